//! Black-box tests of the `dff` binary: exit codes, artifacts, and
//! rerun determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dff_core::checkpoint;
use dff_core::seg::{SegArch, SegParams};
use dff_core::tensor::Tensor;

fn dff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dff"))
        .args(args)
        .env("DFF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

fn experiment_config(dir: &Path, name: &str, out_name: &str) -> (PathBuf, PathBuf) {
    let out = dir.join(out_name);
    let cfg = serde_json::json!({
        "sources": [
            {"generate": {"kind": "shapes", "count": 8, "size": 16, "seed": 2}}
        ],
        "target": {
            "generate": {"kind": "blobs-labeled", "count": 8, "size": 16, "seed": 3},
            "train_fraction": 0.5,
            "split_seed": 1
        },
        "arch": {"input": [1, 16, 16], "encoder_channels": [2, 4], "num_classes": 2},
        "train": {"max_iterations": 1, "batch_number": 20, "batch_size": 4, "seed": 1},
        "output_dir": out
    });
    let path = dir.join(name);
    write_json(&path, &cfg);
    (path, out)
}

#[test]
fn train_dff_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = experiment_config(dir.path(), "exp.json", "run");
    let first = dff(&["train-dff", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "stderr: {}", stderr(&first));
    for artifact in ["model.ckpt", "loss.csv", "metrics.json", "manifest.json"] {
        assert!(out.join(artifact).is_file(), "{artifact} missing");
    }
    let snapshot: Vec<Vec<u8>> = ["model.ckpt", "loss.csv", "metrics.json"]
        .iter()
        .map(|a| fs::read(out.join(a)).unwrap())
        .collect();
    let second = dff(&["train-dff", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&second), 0);
    for (artifact, before) in ["model.ckpt", "loss.csv", "metrics.json"].iter().zip(&snapshot) {
        let after = fs::read(out.join(artifact)).unwrap();
        assert_eq!(&after, before, "{artifact} changed across reruns");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = experiment_config(dir.path(), "exp.json", "run");
    assert_eq!(code(&dff(&["train-dff", "--config", cfg.to_str().unwrap()])), 0);
    let base = fs::read(out.join("loss.csv")).unwrap();

    let out2 = dir.path().join("run2");
    let r = dff(&[
        "train-dff",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out2.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_ne!(fs::read(out2.join("loss.csv")).unwrap(), base);
}

#[test]
fn missing_target_path_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = serde_json::json!({
        "sources": [{"generate": {"kind": "shapes", "count": 4, "size": 16, "seed": 1}}],
        "target": {"path": dir.path().join("no-such-dir")},
        "arch": {"input": [1, 16, 16], "encoder_channels": [2, 4], "num_classes": 2},
        "output_dir": out
    });
    let path = dir.path().join("exp.json");
    write_json(&path, &cfg);
    let r = dff(&["train-dff", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&r), 2, "stderr: {}", stderr(&r));
    assert!(stderr(&r).contains("no-such-dir"), "stderr: {}", stderr(&r));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, _) = experiment_config(dir.path(), "exp.json", "run");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg.as_object_mut().unwrap().insert("learning_rte".into(), serde_json::json!(0.1));
    write_json(&cfg_path, &cfg);
    let r = dff(&["train-dff", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&r), 1, "stderr: {}", stderr(&r));
    assert!(stderr(&r).contains("learning_rte"));
}

#[test]
fn missing_config_flag_exits_1() {
    assert_eq!(code(&dff(&["train-dff"])), 1);
    assert_eq!(code(&dff(&["--help"])), 0);
    assert_eq!(code(&dff(&["--version"])), 0);
}

fn tiny_seg_config(dir: &Path, out: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "data": {"generate": {"kind": "blobs-masked", "count": 10, "size": 16, "seed": 4}},
        "train_fraction": 0.8,
        "split_seed": 2,
        "arch": {"input": [1, 16, 16], "base_channels": 2, "dropout_rate": 0.0, "num_classes": 2},
        "train": {"max_iterations": 1, "batch_number": 15, "batch_size": 2, "seed": 2},
        "output_dir": out
    });
    let path = dir.join("seg.json");
    write_json(&path, &cfg);
    path
}

#[test]
fn train_seg_writes_masks_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("segrun");
    let cfg = tiny_seg_config(dir.path(), &out);
    let r = dff(&["train-seg", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "stderr: {}", stderr(&r));
    for artifact in ["model.ckpt", "loss.csv", "metrics.json", "manifest.json"] {
        assert!(out.join(artifact).is_file(), "{artifact} missing");
    }
    let masks: Vec<_> = fs::read_dir(out.join("predicted"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(masks.len(), 2, "10 samples at 0.8 leave 2 test masks");
    let before: Vec<Vec<u8>> = masks.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(code(&dff(&["train-seg", "--config", cfg.to_str().unwrap()])), 0);
    for (p, b) in masks.iter().zip(&before) {
        assert_eq!(&fs::read(p).unwrap(), b, "{} changed", p.display());
    }
}

#[test]
fn malformed_mask_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    fs::create_dir_all(data_dir.join("masks")).unwrap();
    let img = dff_core::data::GrayImage { h: 16, w: 16, pixels: vec![100; 256] };
    dff_core::data::write_pgm(&data_dir.join("a.pgm"), &img).unwrap();
    fs::write(data_dir.join("masks/a.pgm"), b"P5 not really").unwrap();
    let cfg = serde_json::json!({
        "data": {"path": data_dir},
        "train_fraction": 0.5,
        "arch": {"input": [1, 16, 16], "base_channels": 2, "dropout_rate": 0.0, "num_classes": 2},
        "output_dir": dir.path().join("out")
    });
    let path = dir.path().join("seg.json");
    write_json(&path, &cfg);
    let r = dff(&["train-seg", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&r), 2, "stderr: {}", stderr(&r));
}

#[test]
fn pipeline_with_missing_segmenter_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (exp_path, _) = experiment_config(dir.path(), "exp.json", "run");
    let exp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&exp_path).unwrap()).unwrap();
    let cfg = serde_json::json!({
        "segmenter": dir.path().join("nowhere.ckpt"),
        "experiment": exp
    });
    let path = dir.path().join("pipe.json");
    write_json(&path, &cfg);
    let r = dff(&["pipeline", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&r), 2, "stderr: {}", stderr(&r));
    assert!(stderr(&r).contains("nowhere.ckpt"));
}

/// A segmenter whose head bias always votes class 1: every pixel is kept,
/// so masking is a no-op and the pipeline must reproduce train-dff bit for
/// bit.
fn all_ones_segmenter(path: &Path) {
    let arch =
        SegArch { input: (1, 16, 16), base_channels: 2, dropout_rate: 0.0, num_classes: 2 };
    let mut params = SegParams::init(arch, 0).unwrap();
    for p in params.params_mut() {
        let zeros = vec![0.0; p.value.data().len()];
        p.value = Tensor::new(p.value.shape().to_vec(), zeros).unwrap();
        if p.name == "head.bias" {
            p.value = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        }
    }
    checkpoint::save_seg(path, &params).unwrap();
}

#[test]
fn all_ones_mask_pipeline_matches_train_dff() {
    let dir = tempfile::tempdir().unwrap();
    let (exp_path, exp_out) = experiment_config(dir.path(), "exp.json", "raw");
    assert_eq!(code(&dff(&["train-dff", "--config", exp_path.to_str().unwrap()])), 0);

    let ckpt = dir.path().join("ones.ckpt");
    all_ones_segmenter(&ckpt);
    let mut exp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&exp_path).unwrap()).unwrap();
    let pipe_out = dir.path().join("piped");
    exp["output_dir"] = serde_json::json!(pipe_out);
    let cfg = serde_json::json!({"segmenter": ckpt, "experiment": exp});
    let pipe_path = dir.path().join("pipe.json");
    write_json(&pipe_path, &cfg);
    let r = dff(&["pipeline", "--config", pipe_path.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "stderr: {}", stderr(&r));

    for artifact in ["model.ckpt", "loss.csv", "metrics.json"] {
        assert_eq!(
            fs::read(exp_out.join(artifact)).unwrap(),
            fs::read(pipe_out.join(artifact)).unwrap(),
            "{artifact} differs between raw and all-ones pipeline"
        );
    }
}

#[test]
fn eval_reprints_the_stored_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = experiment_config(dir.path(), "exp.json", "run");
    assert_eq!(code(&dff(&["train-dff", "--config", cfg.to_str().unwrap()])), 0);
    let r = dff(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "stderr: {}", stderr(&r));
    let printed: serde_json::Value =
        serde_json::from_slice(&r.stdout).expect("eval prints JSON");
    let stored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed["accuracy"], stored["accuracy"]);
}

#[test]
fn gradcheck_covers_each_op_once_and_exits_0() {
    let r = dff(&["gradcheck"]);
    assert_eq!(code(&r), 0, "stderr: {}", stderr(&r));
    let text = String::from_utf8_lossy(&r.stdout);
    let ops = [
        "conv2d", "bias_channels", "maxpool2", "upsample2", "dense", "relu", "sigmoid",
        "add", "mul", "scale", "add_n", "reshape", "concat_channels", "row_stack", "sum",
        "mean", "mse_loss", "cross_entropy", "pixel_cross_entropy", "mmd_loss",
        "dff_model", "seg_model",
    ];
    for op in ops {
        let count = text
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(op))
            .count();
        assert_eq!(count, 1, "operator {op} should be reported exactly once");
    }
}

#[test]
fn gradcheck_sabotage_exits_3_and_names_the_operator() {
    let r = dff(&["gradcheck", "--sabotage", "maxpool2"]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("maxpool2"), "stderr: {}", stderr(&r));
}

#[test]
fn gen_synth_is_balanced_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let args = [
        "gen-synth", "--kind", "blobs-labeled", "--count", "10", "--size", "16", "--seed",
        "7", "--out",
    ];
    let mut full: Vec<&str> = args.to_vec();
    full.push(out.to_str().unwrap());
    assert_eq!(code(&dff(&full)), 0);
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 10);
    assert_eq!(names.iter().filter(|n| n.starts_with("0_")).count(), 5);
    assert_eq!(names.iter().filter(|n| n.starts_with("1_")).count(), 5);

    let before: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
    assert_eq!(code(&dff(&full)), 0);
    for (n, b) in names.iter().zip(&before) {
        assert_eq!(&fs::read(out.join(n)).unwrap(), b, "{n} changed on rerun");
    }
}

#[test]
fn gen_synth_invalid_kind_exits_1() {
    let r = dff(&["gen-synth", "--kind", "fractals", "--count", "4", "--out", "/tmp/x"]);
    assert_eq!(code(&r), 1);
}
