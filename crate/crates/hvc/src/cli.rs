//! Command implementations behind the `hvc` binary: data generation,
//! training, gradient checking, label propagation, and evaluation.
//!
//! Every command writes its artifacts atomically, echoes the resolved
//! configuration next to its outputs, and ends stdout with one
//! machine-readable summary line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::ImageBuffer;
use crate::gradcheck;
use crate::imgio;
use crate::metrics::{evaluate_dataset, EvalReport};
use crate::propagation::{run_video, NetFrameEncoder, PropagationConfig};
use crate::synth;
use crate::trainer::{StepRecord, Trainer, TrainSummary};

/// Caps the rayon pool. Safe to call more than once; only the first call
/// wins.
pub fn init_threads(cfg: &RunConfig) {
    let n = cfg.effective_threads();
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn write_resolved_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    imgio::write_string_atomic(&out_dir.join("config.resolved.toml"), &cfg.to_toml())
}

/// Generates the synthetic corpus under `out_dir`.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    synth::write_dataset(&cfg.synth, cfg.run.seed, out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    Ok(format!(
        "ok gen-data out={} train_images={} eval_videos={}",
        out_dir.display(),
        cfg.synth.train_images,
        cfg.synth.eval_videos
    ))
}

pub struct TrainOutputs {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub summary: TrainSummary,
}

fn csv_row(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        r.step, r.loss, r.static_term, r.dynamic_term, r.momentum, r.lr
    )
}

/// Trains on the images in `data_dir` (or, when absent, on an in-memory
/// synthetic corpus from the config) and writes the checkpoint plus an
/// append-only loss log.
pub fn cmd_train(cfg: &RunConfig, data_dir: Option<&Path>, out_dir: &Path) -> Result<TrainOutputs> {
    let dataset: Vec<ImageBuffer> = match data_dir {
        Some(dir) => {
            let files = imgio::list_images(dir)?;
            if files.is_empty() {
                return Err(Error::Config(format!(
                    "no images found under '{}'",
                    dir.display()
                )));
            }
            files
                .iter()
                .map(|p| imgio::load_image(p))
                .collect::<Result<_>>()?
        }
        None => synth::generate_training_images(&cfg.synth, cfg.run.seed, cfg.synth.train_images)
            .into_iter()
            .map(|(img, _)| img)
            .collect(),
    };

    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;

    let mut trainer = Trainer::new(cfg.clone())?;
    // The loss log is the one non-atomic artifact: it is an append-only
    // CSV so a run can be monitored and survives an aborted step.
    let loss_log_path = out_dir.join("loss.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&loss_log_path)?);
    {
        use std::io::Write;
        write!(log, "step,loss,static_term,dynamic_term,m,lr\n")?;
    }
    let train_result = trainer.train(&dataset, |r| {
        use std::io::Write;
        let _ = log.write_all(csv_row(r).as_bytes());
        let _ = log.flush();
    });
    {
        use std::io::Write;
        log.flush()?;
    }

    let checkpoint_path = out_dir.join("checkpoint.hvc");
    // On a numeric failure the trainer state is the last good step;
    // checkpoint it before surfacing the error.
    match train_result {
        Ok(summary) => {
            trainer.to_checkpoint().save(&checkpoint_path)?;
            Ok(TrainOutputs {
                checkpoint_path,
                loss_log_path,
                summary,
            })
        }
        Err(e) => {
            trainer.to_checkpoint().save(&checkpoint_path)?;
            Err(e)
        }
    }
}

/// Runs the finite-difference suite; returns the printable report and
/// whether every check passed.
pub fn cmd_gradcheck(seed: u64, trials: usize) -> (String, bool) {
    let reports = gradcheck::run_full_suite(seed, trials);
    let mut out = String::new();
    let mut all_ok = true;
    for r in &reports {
        let _ = writeln!(out, "{}", r.summary_line());
        all_ok &= r.passed();
    }
    let _ = writeln!(
        out,
        "{} gradcheck checks={} trials={}",
        if all_ok { "ok" } else { "fail" },
        reports.len(),
        trials
    );
    (out, all_ok)
}

/// Propagates the first-frame mask through one video directory and writes
/// one mask per frame plus a JSON-lines per-frame summary.
pub fn cmd_propagate(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    video_dir: &Path,
    first_mask_path: &Path,
    out_dir: &Path,
) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let ckpt_cfg = ckpt.run_config()?;
    let net_cfg = ckpt_cfg.network.to_net_config();
    let target_net = crate::encoder::EncoderNet::new(&net_cfg, crate::encoder::EncoderRole::Target);
    let target_store = ckpt.target;

    let frame_paths = imgio::list_images(video_dir)?;
    if frame_paths.len() < 2 {
        return Err(Error::Config(format!(
            "video '{}' needs at least two frames",
            video_dir.display()
        )));
    }
    let frames: Vec<ImageBuffer> = frame_paths
        .iter()
        .map(|p| imgio::load_image(p))
        .collect::<Result<_>>()?;
    let first_mask = imgio::load_mask(first_mask_path)?;

    let prop_cfg = PropagationConfig {
        n_context: cfg.propagation.n_context,
        top_k: cfg.propagation.top_k,
        temperature: cfg.propagation.temperature,
    };
    let encoder = NetFrameEncoder {
        net: &target_net,
        store: &target_store,
    };
    let masks = run_video(&encoder, &frames, &first_mask, &prop_cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let mut summary = String::new();
    for (i, (mask, frame_path)) in masks.iter().zip(frame_paths.iter()).enumerate() {
        let stem = frame_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("frame");
        imgio::save_mask(&out_dir.join(format!("{stem}.png")), mask)?;
        let mut class_pixels: BTreeMap<String, usize> = BTreeMap::new();
        for &v in mask.iter() {
            *class_pixels.entry(v.to_string()).or_insert(0) += 1;
        }
        let row = serde_json::json!({
            "frame": i,
            "file": format!("{stem}.png"),
            "class_pixels": class_pixels,
        });
        summary.push_str(&row.to_string());
        summary.push('\n');
    }
    imgio::write_string_atomic(&out_dir.join("summary.jsonl"), &summary)?;
    write_resolved_config(cfg, out_dir)?;
    Ok(format!(
        "ok propagate frames={} out={}",
        masks.len(),
        out_dir.display()
    ))
}

/// Evaluates a prediction tree against ground truth; the returned report
/// is printed by the binary with `J&F_m` on the last stdout line.
pub fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    tol_frac: f64,
    report_out: Option<&Path>,
) -> Result<EvalReport> {
    let report = evaluate_dataset(pred_dir, gt_dir, tol_frac)?;
    if let Some(path) = report_out {
        imgio::write_string_atomic(path, &report.to_json())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.run.seed = 9;
        cfg.crop.view_size = 16;
        cfg.crop.min_side = 16;
        cfg.network.backbone_channels = vec![6, 8];
        cfg.network.hidden_channels = 6;
        cfg.network.embed_channels = 8;
        cfg.network.pseudo_hidden = 6;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 1;
        cfg.synth.canvas = 16;
        cfg.synth.train_images = 8;
        cfg.synth.eval_videos = 1;
        cfg.synth.video_frames = 3;
        cfg.synth.min_shape_size = 5;
        cfg.synth.max_shape_size = 8;
        cfg
    }

    #[test]
    fn gen_train_propagate_eval_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fast_cfg();
        let data_dir = dir.path().join("data");
        let line = cmd_gen_data(&cfg, &data_dir).unwrap();
        assert!(line.starts_with("ok gen-data"));
        assert!(data_dir.join("config.resolved.toml").exists());
        assert!(data_dir.join("train/images/00000.png").exists());
        assert!(data_dir.join("val/frames/video_000/00000.png").exists());
        assert!(data_dir.join("val/gt/video_000/00000.png").exists());

        let run_dir = dir.path().join("run");
        let outputs = cmd_train(&cfg, Some(&data_dir.join("train/images")), &run_dir).unwrap();
        assert!(outputs.checkpoint_path.exists());
        let log = std::fs::read_to_string(&outputs.loss_log_path).unwrap();
        assert!(log.starts_with("step,loss,static_term,dynamic_term,m,lr\n"));
        assert_eq!(log.lines().count() - 1, outputs.summary.steps as usize);

        let pred_dir = dir.path().join("pred").join("video_000");
        let line = cmd_propagate(
            &cfg,
            &outputs.checkpoint_path,
            &data_dir.join("val/frames/video_000"),
            &data_dir.join("val/gt/video_000/00000.png"),
            &pred_dir,
        )
        .unwrap();
        assert!(line.starts_with("ok propagate frames=3"));
        assert!(pred_dir.join("00001.png").exists());
        assert!(pred_dir.join("summary.jsonl").exists());

        let report = cmd_eval(
            &dir.path().join("pred"),
            &data_dir.join("val/gt"),
            cfg.eval.boundary_tol_frac,
            Some(&dir.path().join("report.json")),
        )
        .unwrap();
        assert!(report.jf_mean >= 0.0 && report.jf_mean <= 1.0);
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn gradcheck_command_passes_with_few_trials() {
        let (out, ok) = cmd_gradcheck(7, 2);
        assert!(ok, "{out}");
        assert!(out.lines().count() == 7, "6 checks + summary: {out}");
    }

    #[test]
    fn eval_with_identical_dirs_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let gt = dir.path().join("gt");
        let mask = ndarray::Array2::from_shape_fn((8, 8), |(y, _)| u8::from(y < 4));
        for t in 0..3 {
            imgio::save_mask(&gt.join("v0").join(format!("{t:05}.png")), &mask).unwrap();
        }
        let report = cmd_eval(&gt, &gt, 0.008, None).unwrap();
        assert_eq!(report.jf_mean, 1.0);
    }
}
