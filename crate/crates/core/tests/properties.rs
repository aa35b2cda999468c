use std::cell::Cell;

use elastic_core::depth::{build_dp_with, drop_last};
use elastic_core::eval::MetricKind;
use elastic_core::smol::GateMode;
use elastic_core::train::{balanced_loss, sandwich_sample};
use elastic_core::width::{build_masks, normalize, BlockKind, BlockScores, RawScores};
use elastic_core::{LayerMask, ModelConfig, ModelF32, ModelF64, Rng, ShapeGrid, SmolBank, SmolConfig, Tensor};
use proptest::prelude::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_ffn: 12,
        vocab_size: 13,
        max_seq_len: 8,
        norm_eps: 1e-5,
    }
}

fn hashed(seed: u64, mask: &LayerMask) -> f64 {
    let mut h = seed.wrapping_add(0x632B_E59B_D9B4_E019);
    for &b in mask.bits() {
        h = (h ^ b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(23);
    }
    ((h >> 44) % 32) as f64
}

fn n_and_m() -> impl Strategy<Value = (usize, usize)> {
    (2usize..=12).prop_flat_map(|n| (Just(n), 1..n))
}

fn raw_scores(layers: usize, heads: usize, d_head: usize, ffn: usize) -> impl Strategy<Value = RawScores> {
    let block = |w: usize| {
        (prop::collection::vec(0.0f64..10.0, w), prop::collection::vec(prop::bool::weighted(0.15), w)).prop_map(
            |(s, dead)| {
                let variance: Vec<f64> = s.iter().zip(&dead).map(|(v, &d)| if d { 0.0 } else { v + 0.1 }).collect();
                let scores = s.iter().zip(&variance).map(|(v, var)| v * var).collect();
                BlockScores { scores, variance }
            },
        )
    };
    (
        prop::collection::vec(block(heads * d_head), layers),
        prop::collection::vec(block(ffn), layers),
    )
        .prop_map(move |(attn, ffn)| RawScores { d_head, attn, ffn })
}

const RATIOS: [f64; 5] = [1.0, 0.875, 0.75, 0.625, 0.5];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dp_columns_are_monotone_and_masks_have_m_removed((n, m) in n_and_m(), seed in any::<u64>()) {
        let calls = Cell::new(0usize);
        let t = build_dp_with(n, m, MetricKind::Ppl, String::new(), |mask| {
            calls.set(calls.get() + 1);
            Ok(hashed(seed, mask))
        }).unwrap();
        prop_assert!(calls.get() <= m * n + 1);
        for j in 1..=m {
            for i in j + 1..=n {
                prop_assert!(t.d[i][j].0 >= t.d[i - 1][j].0);
            }
            for i in j..=n {
                let s = t.s[i][j].as_ref().unwrap();
                prop_assert_eq!(s.retained_count(), n - j);
                prop_assert!(s.bits()[i..].iter().all(|&b| b));
            }
        }
    }

    #[test]
    fn additive_dp_dominates_layer_drop_baselines(weights in prop::collection::vec(0.0f64..1.0, 2..=10)) {
        let n = weights.len();
        let score = |mask: &LayerMask| mask.retained().map(|i| weights[i]).sum::<f64>();
        let t = build_dp_with(n, n - 1, MetricKind::FactAccuracy, String::new(), |mask| Ok(score(mask))).unwrap();
        for m in 1..n {
            let dp = score(&t.select(m).unwrap());
            prop_assert!(dp >= score(&drop_last(n, m).unwrap()) - 1e-12);
            prop_assert!(dp >= score(&t.individually_worst(m).unwrap()) - 1e-12);
        }
    }

    #[test]
    fn width_masks_nest_and_drop_dead_channels_first(raw in raw_scores(3, 2, 4, 10)) {
        let (ranking, masks) = build_masks(&raw, &RATIOS).unwrap();
        for w in 1..masks.len() {
            for l in 0..3 {
                prop_assert!(masks[w].heads[l].is_subset_of(&masks[w - 1].heads[l]));
                prop_assert!(masks[w].ffn[l].is_subset_of(&masks[w - 1].ffn[l]));
            }
            prop_assert!(masks[w].retained_channels(4) as f64 >= RATIOS[w] * 54.0 - 1e-9);
        }
        // within a layer and kind, no zero-variance group outranks a live one
        for (i, g) in ranking.iter().enumerate() {
            if g.variance == 0.0 {
                prop_assert!(!ranking[i + 1..].iter().any(|h| h.layer == g.layer && h.kind == g.kind && h.variance > 0.0));
            }
        }
    }

    #[test]
    fn ranking_ignores_per_layer_scale(raw in raw_scores(3, 2, 4, 10), layer in 0usize..3, c in 0.01f64..100.0) {
        let mut scaled = raw.clone();
        scaled.attn[layer].scores.iter_mut().for_each(|s| *s *= c);
        scaled.ffn[layer].scores.iter_mut().for_each(|s| *s *= c);
        let (_, a) = build_masks(&raw, &RATIOS).unwrap();
        let (_, b) = build_masks(&scaled, &RATIOS).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gate_keeps_top_k_and_sums_to_one(t in 1usize..8, k_off in 0usize..8, dim in 1usize..8, seed in any::<u64>(), noisy in any::<bool>()) {
        let k = 1 + k_off % t;
        let mut rng = Rng::new(seed);
        let base = ModelF64::init(tiny_config(), &mut rng).unwrap();
        let cfg = SmolConfig { n_loras: t, top_k: k, rank: 1, noise: true, ..SmolConfig::default() };
        let mut bank = SmolBank::init(cfg, &base.weights, dim, &mut rng).unwrap();
        bank.w_gate = Tensor::new([dim, t], rng.normal_vec(dim * t, 1.0)).unwrap();
        bank.w_noise = Tensor::new([dim, t], rng.normal_vec(dim * t, 1.0)).unwrap();
        let mask: Vec<f64> = (0..dim).map(|_| rng.below(2) as f64).collect();
        let out = if noisy {
            bank.gate(&mask, GateMode::Train(&mut rng)).unwrap()
        } else {
            bank.gate(&mask, GateMode::Eval).unwrap()
        };
        prop_assert_eq!(out.coefficients.iter().filter(|&&c| c != 0.0).count(), k);
        prop_assert!(out.coefficients.iter().all(|&c| c >= 0.0));
        prop_assert!((out.coefficients.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_total_is_k_times_teacher_loss(l1 in 1e-3f64..20.0, d in prop::collection::vec(1e-3f64..20.0, 1..8)) {
        let (scales, total) = balanced_loss(l1, &d, 0.0, true).unwrap();
        prop_assert!(scales.iter().all(|s| s.is_finite() && *s > 0.0));
        prop_assert!((total - (d.len() + 1) as f64 * l1).abs() < 1e-9 * total.max(1.0));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(seed in any::<u64>()) {
        let model = ModelF32::init(tiny_config(), &mut Rng::new(seed)).unwrap();
        let bytes = model.to_bytes().unwrap();
        let back = ModelF32::from_bytes(&bytes).unwrap();
        prop_assert!(back.weights == model.weights);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn all_zero_block_normalizes_to_zero_and_is_pruned_first() {
    assert_eq!(normalize(&[0.0; 4]), vec![0.0; 4]);
    let live = BlockScores {
        scores: vec![1.0, 2.0, 3.0, 4.0],
        variance: vec![1.0; 4],
    };
    let dead = BlockScores {
        scores: vec![0.0; 4],
        variance: vec![0.0; 4],
    };
    let raw = RawScores {
        d_head: 2,
        attn: vec![live.clone(), dead.clone()],
        ffn: vec![live, dead],
    };
    let (ranking, masks) = build_masks(&raw, &[1.0, 0.5]).unwrap();
    assert!(ranking.iter().all(|g| g.score.is_finite()));
    assert!(ranking[ranking.len() - 6..].iter().all(|g| g.layer == 1 && g.variance == 0.0));
    // half the channels is exactly the live layer
    assert_eq!(masks[1].heads[1].count() + masks[1].ffn[1].count(), 0);
    assert_eq!(masks[1].heads[0].count(), 2);
    assert!(ranking.iter().any(|g| g.kind == BlockKind::Ffn));
}

#[test]
fn sandwich_covers_the_desk_grid_within_1000_steps() {
    let grid = ShapeGrid::new(vec![8, 7, 6, 5], vec![1.0, 0.75, 0.5], 4).unwrap();
    let mut rng = Rng::new(5);
    let mut seen = vec![false; grid.len()];
    let idx: Vec<_> = grid.indices().collect();
    for _ in 0..1000 {
        for s in sandwich_sample(&grid, &mut rng).unwrap() {
            seen[idx.iter().position(|&i| i == s).unwrap()] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
}
