use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elastic_core::model::TokenBatch;
use elastic_core::pipeline::PipelineConfig;
use elastic_core::ModelF32;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Smoke config with absolute data paths, written into `dir`.
fn config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = fs::read_to_string(repo().join("configs/smoke.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["paths"]["corpus"] = repo().join("data/corpus.txt").to_str().unwrap().into();
    v["paths"]["facts"] = repo().join("data/facts.tsv").to_str().unwrap().into();
    v["paths"]["output_dir"] = dir.join("runs").to_str().unwrap().into();
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn elastic(args: &[&str], cfg: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elastic"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run_dir(cfg: &Path) -> PathBuf {
    let c = PipelineConfig::load(cfg).unwrap();
    c.paths.output_dir.join(&c.hash().unwrap()[..16])
}

#[test]
fn stages_in_order_then_extract_matches_adapter_forward() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    for stage in ["pretrain", "calibrate-depth", "calibrate-width", "finetune"] {
        ok(elastic(&[stage], &cfg));
    }
    let printed = ok(elastic(&["extract", "--depth", "3", "--width-ratio", "0.75"], &cfg));
    let path = PathBuf::from(printed.trim());
    assert!(path.ends_with("subnets/d3_w0.75.ckpt"));

    let dir = run_dir(&cfg);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    for stage in ["pretrain", "calibrate-depth", "calibrate-width", "finetune", "extract"] {
        assert!(manifest["stages"][stage].is_object(), "{stage}");
    }

    let dense = ModelF32::load(&path).unwrap();
    let pc = PipelineConfig::load(&cfg).unwrap();
    let run = elastic_core::pipeline::Run::open(pc).unwrap();
    let model = run.elastic_model().unwrap();
    let shape = run.find_shape(Some((3, 0.75))).unwrap();
    let batch = TokenBatch::single((0..32).map(|i| (i * 7) % 96).collect()).unwrap();
    let a = model.forward(&batch, &shape.exec()).unwrap();
    let b = dense.forward_full(&batch).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff < 1e-4, "{diff}");

    let eval: serde_json::Value = serde_json::from_str(&ok(elastic(&["eval", "--depth", "2", "--width-ratio", "0.5"], &cfg))).unwrap();
    assert_eq!(eval["shape_id"], "d2_w0.5");
    assert!(eval["ppl"].as_f64().unwrap() > 1.0);

    let csv = ok(elastic(&["profile"], &cfg));
    assert!(csv.starts_with("shape_id,depth,width_ratio,params,flops_per_token,latency_ms_p50\n"));
    assert_eq!(csv.lines().count(), 1 + 9);

    let found: serde_json::Value = serde_json::from_str(&ok(elastic(&["search"], &cfg))).unwrap();
    assert_eq!(found["outcome"]["status"], "found");
    assert!(found["outcome"]["slack"].as_f64().unwrap() >= 0.0);
    let none: serde_json::Value = serde_json::from_str(&ok(elastic(&["search", "--budget", "10"], &cfg))).unwrap();
    assert_eq!(none["outcome"]["status"], "infeasible");
    assert_eq!(none["outcome"]["tightest"]["depth"], 2);
}

#[test]
fn max_remove_not_below_layer_count_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |v| v["depth"]["max_remove"] = 4.into());
    let out = elastic(&["calibrate-depth"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth.max_remove"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |v| v["finetune"]["momentum"] = 0.9.into());
    let out = elastic(&["pretrain"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn finetune_without_calibration_names_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    let out = elastic(&["finetune"], &cfg);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
    ok(elastic(&["pretrain"], &cfg));
    ok(elastic(&["calibrate-depth"], &cfg));
    let out = elastic(&["finetune"], &cfg);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibrate-width"));
}

#[test]
fn tampered_artifact_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    ok(elastic(&["pretrain"], &cfg));
    let ckpt = run_dir(&cfg).join("base.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    let out = elastic(&["calibrate-width"], &cfg);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_corpus_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |v| v["paths"]["corpus"] = "/nonexistent/corpus.txt".into());
    let out = elastic(&["pretrain"], &cfg);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn seed_override_changes_run_directory_and_metric_flag_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    let out = elastic(&["calibrate-depth", "--metric", "bleu"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    let a = Command::new(env!("CARGO_BIN_EXE_elastic"))
        .args(["pretrain", "--seed", "99", "--out"])
        .arg(tmp.path().join("other"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(a.status.success());
    let dirs: Vec<_> = fs::read_dir(tmp.path().join("other")).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    assert!(!run_dir(&cfg).exists());
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_elastic"))
            .args(["run", "--out"])
            .arg(tmp.path().join(name))
            .arg("--config")
            .arg(&cfg)
            .output()
            .unwrap();
        dirs.push(PathBuf::from(ok(out).trim()));
    }
    for f in ["dp_table.json", "width_plan.json", "elastic.ckpt", "base.ckpt", "manifest.json"] {
        assert_eq!(fs::read(dirs[0].join(f)).unwrap(), fs::read(dirs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["x", "y"] {
        let out = Command::new(env!("CARGO_BIN_EXE_elastic"))
            .args(["gen-data", "--chars", "2000", "--facts", "8", "--out"])
            .arg(tmp.path().join(name))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for f in ["corpus.txt", "facts.tsv"] {
        assert_eq!(fs::read(tmp.path().join("x").join(f)).unwrap(), fs::read(tmp.path().join("y").join(f)).unwrap());
    }
}
