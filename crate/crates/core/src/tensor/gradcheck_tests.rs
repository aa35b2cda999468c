//! Analytic gradients of every op against central finite differences (f64).

use super::{Graph, LoraTerm, Tensor, Var};
use crate::rng::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Builds `loss = f(params)` twice per coordinate and compares the central
/// difference against the backward pass.
fn gradcheck(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    };

    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[which].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(
                rel < TOL,
                "input {which} coord {i}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }
}

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
}

/// Weighted sum so that every output coordinate gets a distinct upstream grad.
fn weighted(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let mut rng = Rng::new(seed);
    let w = rand(&mut rng, &shape);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_and_matmul_nt() {
    let mut rng = Rng::new(1);
    gradcheck(vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[4, 2])], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted(g, y, 9)
    });
    gradcheck(vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[5, 4])], |g, v| {
        let y = g.matmul_nt(v[0], v[1]).unwrap();
        weighted(g, y, 9)
    });
}

#[test]
fn fused_low_rank_linear() {
    let mut rng = Rng::new(11);
    let shapes: [&[usize]; 8] = [&[3, 5], &[4, 5], &[2, 5], &[4, 2], &[1], &[3, 5], &[4, 3], &[1]];
    gradcheck(shapes.iter().map(|s| rand(&mut rng, s)).collect(), |g, v| {
        let terms = [
            LoraTerm { a: v[2], b: v[3], coef: v[4] },
            LoraTerm { a: v[5], b: v[6], coef: v[7] },
        ];
        let y = g.linear_lora(v[0], v[1], &terms).unwrap();
        weighted(g, y, 4)
    });
}

#[test]
fn fused_low_rank_matches_unfused() {
    let mut rng = Rng::new(12);
    let (x, w, a, b) = (rand(&mut rng, &[6, 5]), rand(&mut rng, &[4, 5]), rand(&mut rng, &[2, 5]), rand(&mut rng, &[4, 2]));
    let mut g = Graph::<f64>::new();
    let (x, w, a, b) = (g.constant(x), g.constant(w), g.constant(a), g.constant(b));
    let c = g.constant(Tensor::scalar(0.3));
    let fused = g.linear_lora(x, w, &[LoraTerm { a, b, coef: c }]).unwrap();
    let base = g.matmul_nt(x, w).unwrap();
    let xa = g.matmul_nt(x, a).unwrap();
    let xa = g.mul_scalar(xa, c).unwrap();
    let xab = g.matmul_nt(xa, b).unwrap();
    let plain = g.add(base, xab).unwrap();
    for (p, q) in g.value(fused).data().iter().zip(g.value(plain).data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn elementwise_and_broadcast_rows() {
    let mut rng = Rng::new(2);
    gradcheck(
        vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[3, 4]), rand(&mut rng, &[4])],
        |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.mul(a, v[1]).unwrap();
            let c = g.add_row(b, v[2]).unwrap();
            let d = g.mul_row(c, v[2]).unwrap();
            let e = g.scale(d, -0.7);
            weighted(g, e, 3)
        },
    );
}

#[test]
fn scalar_gate_ops() {
    let mut rng = Rng::new(3);
    gradcheck(vec![rand(&mut rng, &[2, 3]), rand(&mut rng, &[4])], |g, v| {
        let s = g.select(v[1], 2).unwrap();
        let y = g.mul_scalar(v[0], s).unwrap();
        weighted(g, y, 4)
    });
}

#[test]
fn activations() {
    let mut rng = Rng::new(4);
    gradcheck(vec![rand(&mut rng, &[3, 5])], |g, v| {
        let a = g.silu(v[0]);
        let b = g.softplus(a);
        weighted(g, b, 5)
    });
}

#[test]
fn softmax_family() {
    let mut rng = Rng::new(5);
    gradcheck(vec![rand(&mut rng, &[3, 5])], |g, v| {
        let a = g.softmax(v[0]);
        weighted(g, a, 6)
    });
    gradcheck(vec![rand(&mut rng, &[3, 5])], |g, v| {
        let a = g.log_softmax(v[0]);
        weighted(g, a, 7)
    });
}

#[test]
fn rms_norm() {
    let mut rng = Rng::new(6);
    gradcheck(vec![rand(&mut rng, &[4, 6]), rand(&mut rng, &[6])], |g, v| {
        let y = g.rms_norm(v[0], v[1], 1e-5).unwrap();
        weighted(g, y, 8)
    });
}

#[test]
fn embedding_transpose_reshape() {
    let mut rng = Rng::new(7);
    gradcheck(vec![rand(&mut rng, &[5, 3])], |g, v| {
        let e = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        let t = g.transpose(e).unwrap();
        let r = g.reshape(t, &[2, 6]).unwrap();
        weighted(g, r, 9)
    });
}

#[test]
fn masked_fill_then_softmax() {
    let mut rng = Rng::new(8);
    let mask = [false, true, false, true, false, false];
    gradcheck(vec![rand(&mut rng, &[2, 3])], move |g, v| {
        let m = g.masked_fill(v[0], &mask, f64::NEG_INFINITY).unwrap();
        let s = g.softmax(m);
        weighted(g, s, 10)
    });
}

#[test]
fn reductions() {
    let mut rng = Rng::new(9);
    gradcheck(vec![rand(&mut rng, &[2, 3])], |g, v| {
        let sq = g.mul(v[0], v[0]).unwrap();
        let m = g.mean(sq);
        let s = g.sum(v[0]);
        let sm = g.mul(m, s).unwrap();
        g.sum(sm)
    });
}

#[test]
fn cross_entropies() {
    let mut rng = Rng::new(10);
    gradcheck(vec![rand(&mut rng, &[4, 5])], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap());
    let target = {
        let mut g = Graph::new();
        let t = g.constant(rand(&mut rng, &[4, 5]));
        let p = g.softmax(t);
        g.value(p).clone()
    };
    gradcheck(vec![rand(&mut rng, &[4, 5])], move |g, v| g.soft_cross_entropy(v[0], &target).unwrap());
}

#[test]
fn causal_attention() {
    let mut rng = Rng::new(11);
    // 2 sequences of length 3, 2 heads of width 2
    let shape = [6, 4];
    gradcheck(
        vec![rand(&mut rng, &shape), rand(&mut rng, &shape), rand(&mut rng, &shape)],
        |g, v| {
            let y = g.causal_attention(v[0], v[1], v[2], 2, 3, 2, 2).unwrap();
            weighted(g, y, 12)
        },
    );
}

#[test]
fn causal_attention_matches_unfused_reference() {
    let mut rng = Rng::new(12);
    let (t, dh) = (4, 3);
    let q = rand(&mut rng, &[t, dh]);
    let k = rand(&mut rng, &[t, dh]);
    let v = rand(&mut rng, &[t, dh]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let fused = g.causal_attention(qv, kv, vv, 1, t, 1, dh).unwrap();
    // unfused: softmax(mask(q kᵀ / √d)) v
    let s = g.matmul_nt(qv, kv).unwrap();
    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
    let mask: Vec<bool> = (0..t * t).map(|i| i % t > i / t).collect();
    let s = g.masked_fill(s, &mask, f64::NEG_INFINITY).unwrap();
    let p = g.softmax(s);
    let reference = g.matmul(p, vv).unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(reference)) < 1e-12);
}

#[test]
fn known_values() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros([3]));
    let s = g.softmax(z);
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let one = g.constant(Tensor::scalar(1.0));
    let y = g.silu(one);
    assert!((g.value(y).item() - 0.731_058_578_630_004_9).abs() < 1e-12);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([2], vec![1.5, -2.0]).unwrap());
    let y = g.param(Tensor::new([2], vec![0.5, 3.0]).unwrap());
    let xd = g.detach(x);
    let xdd = g.detach(xd);
    assert_eq!(g.value(xdd), g.value(x));
    let p = g.mul(xd, y).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(y).unwrap().data(), &[1.5, -2.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(g.backward(x).is_err(), "non-scalar loss");
    let c = g.constant(Tensor::scalar(1.0));
    assert!(g.backward(c).is_err(), "detached loss");
    // loss = c·0 + x-independent constant: grads exist and are zero
    let s = g.sum(x);
    let z = g.scale(s, 0.0);
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn soft_cross_entropy_of_own_distribution_is_entropy() {
    let mut rng = Rng::new(13);
    let mut g = Graph::<f64>::new();
    let logits = g.param(rand(&mut rng, &[3, 6]));
    let p = g.softmax(logits);
    let target = g.value(p).clone();
    let ce = g.soft_cross_entropy(logits, &target).unwrap();
    let entropy: f64 = (0..3)
        .map(|r| -target.row(r).iter().map(|&q| q * q.ln()).sum::<f64>())
        .sum::<f64>()
        / 3.0;
    assert!((g.value(ce).item() - entropy).abs() < 1e-12);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros([3, 2]));
    assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
}
