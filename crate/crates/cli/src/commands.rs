//! Command implementations. Each returns `Ok(())` for exit 0 or an error
//! whose `exit_code` distinguishes config (1), data (2), and numerical (3)
//! failures.

use std::fs;
use std::path::{Path, PathBuf};

use dff_core::checkpoint;
use dff_core::config::{ExperimentConfig, PipelineConfig, SegExperimentConfig};
use dff_core::data::{self, Domain, GrayImage, SynthSpec};
use dff_core::error::{Error, Result};
use dff_core::gradcheck;
use dff_core::model::DffArch;
use dff_core::seg::{self, SegParams};
use dff_core::trainer;

use crate::manifest::RunRecorder;

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_config<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("metrics serialize");
    data::atomic_write(path, &bytes)
}

/// Trains the fusion classifier, evaluates on the held-out target split,
/// and writes checkpoint, loss history, metrics, and manifest.
pub fn cmd_train_dff(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let text = read_config(config_path)?;
    let mut cfg: ExperimentConfig = parse_config(config_path, &text)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let recorder = RunRecorder::start(&text, cfg.train.seed)?;
    let sources = cfg.load_sources()?;
    let (train, test) = cfg.load_target()?;
    run_dff_flow(&cfg, recorder, &sources, &train, &test)
}

fn run_dff_flow(
    cfg: &ExperimentConfig,
    recorder: RunRecorder,
    sources: &[Domain],
    train: &Domain,
    test: &Domain,
) -> Result<()> {
    let tc = cfg.train_config()?;
    let run = trainer::train_dff(sources, train, cfg.arch, &tc)?;
    let dir = &cfg.output_dir;
    checkpoint::save_dff(&dir.join("model.ckpt"), &run.params)?;
    trainer::write_loss_csv(&dir.join("loss.csv"), &run.history)?;
    if let Some(abort) = run.abort {
        recorder.finish(dir, ["model.ckpt", "loss.csv"])?;
        return Err(abort);
    }
    let metrics = trainer::evaluate_classifier(&run.params, test)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    recorder.finish(dir, ["model.ckpt", "loss.csv", "metrics.json"])?;
    println!("accuracy {:.4}", metrics.accuracy);
    println!("artifacts in {}", dir.display());
    Ok(())
}

/// Trains the segmenter and writes checkpoint, loss history, predicted
/// masks for the test split, metrics, and manifest.
pub fn cmd_train_seg(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let text = read_config(config_path)?;
    let mut cfg: SegExperimentConfig = parse_config(config_path, &text)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let recorder = RunRecorder::start(&text, cfg.train.seed)?;
    let (train, test) = cfg.load_data()?;
    let tc = cfg.train_config();
    let run = seg::train_seg(&train, cfg.arch, &tc)?;
    let dir = &cfg.output_dir;
    checkpoint::save_seg(&dir.join("model.ckpt"), &run.params)?;
    trainer::write_loss_csv(&dir.join("loss.csv"), &run.history)?;
    if let Some(abort) = run.abort {
        recorder.finish(dir, ["model.ckpt", "loss.csv"])?;
        return Err(abort);
    }
    let mut outputs = vec!["model.ckpt".to_string(), "loss.csv".to_string()];
    for (i, sample) in test.samples.iter().enumerate() {
        let mask = run.params.predict_mask(sample)?;
        let img = GrayImage { h: mask.h, w: mask.w, pixels: mask.data };
        let name = format!("predicted/{i:04}.pgm");
        data::write_pgm(&dir.join(&name), &img)?;
        outputs.push(name);
    }
    let metrics = seg::evaluate_seg(&run.params, &test)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    outputs.push("metrics.json".to_string());
    recorder.finish(dir, outputs)?;
    println!("iou {:.4}  dice {:.4}", metrics.iou, metrics.dice);
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn mask_domain(params: &SegParams, domain: &mut Domain) -> Result<()> {
    for sample in &mut domain.samples {
        let mask = params.predict_mask(sample)?;
        *sample = seg::apply_mask(sample, &mask)?;
    }
    Ok(())
}

/// Runs the two-stage flow: a trained segmenter masks the target (and
/// optionally source) images, then the fusion classifier trains on the
/// masked data.
pub fn cmd_pipeline(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let text = read_config(config_path)?;
    let mut cfg: PipelineConfig = parse_config(config_path, &text)?;
    if let Some(s) = seed {
        cfg.experiment.train.seed = s;
    }
    if let Some(o) = out {
        cfg.experiment.output_dir = o;
    }
    cfg.validate()?;
    let seg_params = checkpoint::load_seg(&cfg.segmenter)?;
    if seg_params.arch().input != cfg.experiment.arch.input {
        return Err(Error::config(format!(
            "segmenter input {:?} does not match experiment input {:?}",
            seg_params.arch().input,
            cfg.experiment.arch.input
        )));
    }
    let recorder = RunRecorder::start(&text, cfg.experiment.train.seed)?;
    let mut sources = cfg.experiment.load_sources()?;
    let (mut train, mut test) = cfg.experiment.load_target()?;
    mask_domain(&seg_params, &mut train)?;
    mask_domain(&seg_params, &mut test)?;
    if cfg.mask_sources {
        for source in &mut sources {
            mask_domain(&seg_params, source)?;
        }
    }
    run_dff_flow(&cfg.experiment, recorder, &sources, &train, &test)
}

/// Finite-difference checks over every differentiable operator and both
/// models; prints one line per check. The sabotage hook corrupts one
/// operator's analytic gradient so the harness can prove failures are
/// caught and named.
pub fn cmd_gradcheck(sabotage: Option<&str>) -> Result<()> {
    let results = gradcheck::run_all(sabotage)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.ok() { "ok" } else { "FAIL" };
        println!("{:<22} max rel err {:9.3e}  {status}", r.name, r.max_rel);
        if !r.ok() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", results.len());
        Ok(())
    } else {
        Err(Error::non_finite(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Writes a deterministic synthetic dataset as PGM files.
pub fn cmd_gen_synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    let domain = data::gen_synthetic(spec)?;
    data::write_domain(out, &domain)?;
    println!("wrote {} images to {}", domain.samples.len(), out.display());
    Ok(())
}

/// What kind of run a config file describes, judged by its required keys.
enum ConfigKind {
    Experiment,
    Segmentation,
    Pipeline,
}

fn detect_kind(path: &Path, text: &str) -> Result<ConfigKind> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let Some(obj) = value.as_object() else {
        return Err(Error::config(format!("{}: expected a JSON object", path.display())));
    };
    if obj.contains_key("segmenter") {
        Ok(ConfigKind::Pipeline)
    } else if obj.contains_key("sources") {
        Ok(ConfigKind::Experiment)
    } else if obj.contains_key("data") {
        Ok(ConfigKind::Segmentation)
    } else {
        Err(Error::config(format!(
            "{}: not a recognizable config (no sources, data, or segmenter key)",
            path.display()
        )))
    }
}

/// Re-evaluates a stored checkpoint on the test split its config defines
/// and prints the metrics as JSON.
pub fn cmd_eval(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let text = read_config(config_path)?;
    let metrics = match detect_kind(config_path, &text)? {
        ConfigKind::Experiment => {
            let mut cfg: ExperimentConfig = parse_config(config_path, &text)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            let params = checkpoint::load_dff(&cfg.output_dir.join("model.ckpt"))?;
            check_arch(params.arch(), &cfg.arch)?;
            let (_, test) = cfg.load_target()?;
            trainer::evaluate_classifier(&params, &test)?
        }
        ConfigKind::Segmentation => {
            let mut cfg: SegExperimentConfig = parse_config(config_path, &text)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            let params = checkpoint::load_seg(&cfg.output_dir.join("model.ckpt"))?;
            let (_, test) = cfg.load_data()?;
            seg::evaluate_seg(&params, &test)?
        }
        ConfigKind::Pipeline => {
            let mut cfg: PipelineConfig = parse_config(config_path, &text)?;
            if let Some(o) = out {
                cfg.experiment.output_dir = o;
            }
            cfg.validate()?;
            let seg_params = checkpoint::load_seg(&cfg.segmenter)?;
            let params =
                checkpoint::load_dff(&cfg.experiment.output_dir.join("model.ckpt"))?;
            check_arch(params.arch(), &cfg.experiment.arch)?;
            let (_, mut test) = cfg.experiment.load_target()?;
            mask_domain(&seg_params, &mut test)?;
            trainer::evaluate_classifier(&params, &test)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(())
}

fn check_arch(stored: &DffArch, configured: &DffArch) -> Result<()> {
    if stored != configured {
        return Err(Error::config(format!(
            "checkpoint was trained with arch {stored:?}, config says {configured:?}"
        )));
    }
    Ok(())
}
