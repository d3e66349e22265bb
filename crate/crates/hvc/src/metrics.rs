//! Region similarity (J), boundary accuracy (F), end-point error, and
//! dataset-level aggregation.
//!
//! J is intersection-over-union; F is the F-measure between one-pixel
//! boundaries under a tolerance of `tol_frac` of the image diagonal,
//! realized as morphological dilation by a disc. Both score two empty
//! masks as 1 so background-only videos evaluate perfectly; that
//! convention is recorded in the report.

use ndarray::{Array2, Array3};
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgio;

/// Intersection over union; both-empty counts as 1.
pub fn jaccard(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(
            "jaccard masks",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// One-pixel boundary: foreground pixels with a 4-neighbor that is
/// background or outside the image.
fn boundary(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[[y, x]] {
            return false;
        }
        let neighbors = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        neighbors
            .iter()
            .any(|&(ny, nx)| ny >= h || nx >= w || !mask[[ny, nx]])
    })
}

/// Dilates a boolean image by a disc of the given radius.
fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !mask[[y as usize, x as usize]] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        out[[ny as usize, nx as usize]] = true;
                    }
                }
            }
        }
    }
    out
}

/// Boundary F-measure under a tolerance of `tol_frac` of the diagonal.
pub fn boundary_f(pred: &Array2<bool>, gt: &Array2<bool>, tol_frac: f64) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(
            "boundary_f masks",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let (h, w) = pred.dim();
    let diag = ((h * h + w * w) as f64).sqrt();
    let radius = (tol_frac * diag).ceil() as usize;

    let pb = boundary(pred);
    let gb = boundary(gt);
    let n_pb = pb.iter().filter(|&&v| v).count();
    let n_gb = gb.iter().filter(|&&v| v).count();
    if n_pb == 0 && n_gb == 0 {
        return Ok(1.0);
    }
    if n_pb == 0 || n_gb == 0 {
        return Ok(0.0);
    }
    let gb_dilated = dilate(&gb, radius);
    let pb_dilated = dilate(&pb, radius);
    let precision = pb
        .iter()
        .zip(gb_dilated.iter())
        .filter(|(&p, &g)| p && g)
        .count() as f64
        / n_pb as f64;
    let recall = gb
        .iter()
        .zip(pb_dilated.iter())
        .filter(|(&g, &p)| g && p)
        .count() as f64
        / n_gb as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Mean end-point error between two 2-channel flow-like fields.
pub fn epe(estimated: &Array3<f64>, reference: &Array3<f64>) -> Result<f64> {
    if estimated.dim() != reference.dim() {
        return Err(Error::shape(
            "epe signals",
            format!("{:?}", reference.dim()),
            format!("{:?}", estimated.dim()),
        ));
    }
    let (c, h, w) = estimated.dim();
    if c != 2 {
        return Err(Error::shape("epe channels", 2, c));
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let du = estimated[[0, y, x]] - reference[[0, y, x]];
            let dv = estimated[[1, y, x]] - reference[[1, y, x]];
            total += (du * du + dv * dv).sqrt();
        }
    }
    Ok(total / (h * w) as f64)
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct VideoClassScore {
    pub video: String,
    pub class_id: u8,
    pub frames_scored: usize,
    pub j_mean: f64,
    pub j_recall: f64,
    pub f_mean: f64,
    pub f_recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_item: Vec<VideoClassScore>,
    pub j_mean: f64,
    pub j_recall: f64,
    pub f_mean: f64,
    pub f_recall: f64,
    pub jf_mean: f64,
    /// Files that could not be scored; evaluation continued without them.
    pub warnings: Vec<String>,
    /// Both-empty masks and boundaries score 1 under this convention.
    pub both_empty_scores_one: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text table, one row per (video, class).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>5} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
            "video", "class", "frames", "J_mean", "J_recall", "F_mean", "F_recall"
        ));
        for item in &self.per_item {
            out.push_str(&format!(
                "{:<14} {:>5} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                item.video,
                item.class_id,
                item.frames_scored,
                item.j_mean,
                item.j_recall,
                item.f_mean,
                item.f_recall
            ));
        }
        out.push_str(&format!(
            "{:<14} {:>5} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "mean",
            "-",
            "-",
            self.j_mean,
            self.j_recall,
            self.f_mean,
            self.f_recall
        ));
        out.push_str(&format!("J&F_mean {:.6}\n", self.jf_mean));
        out
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn recall_at_half(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().filter(|&&v| v > 0.5).count() as f64 / values.len() as f64
    }
}

/// Scores a prediction tree against a ground-truth tree.
///
/// Both directories hold one subdirectory per video with one mask file
/// per frame; frames are matched by file stem and the first frame is
/// excluded from scoring. Classes are the nonzero ids present in the
/// video's ground truth. Missing frames and unknown prediction classes
/// are reported as warnings and skipped.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, tol_frac: f64) -> Result<EvalReport> {
    let mut videos: Vec<_> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", gt_dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    videos.sort();
    if videos.is_empty() {
        return Err(Error::Config(format!(
            "no video directories under '{}'",
            gt_dir.display()
        )));
    }

    let mut per_item = Vec::new();
    let mut warnings = Vec::new();
    for video_dir in &videos {
        let video = video_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("?")
            .to_string();
        let gt_frames = imgio::list_images(video_dir)?;
        if gt_frames.len() < 2 {
            warnings.push(format!("video '{video}': fewer than two ground-truth frames"));
            continue;
        }
        let pred_video_dir = pred_dir.join(&video);

        // Class set: nonzero ids anywhere in the video's ground truth.
        let mut classes: BTreeSet<u8> = BTreeSet::new();
        let mut gt_masks = Vec::new();
        for f in &gt_frames {
            let m = imgio::load_mask(f)?;
            classes.extend(m.iter().copied().filter(|&c| c != 0));
            gt_masks.push(m);
        }

        let mut scores: std::collections::BTreeMap<u8, (Vec<f64>, Vec<f64>)> =
            classes.iter().map(|&c| (c, (vec![], vec![]))).collect();

        for (idx, gt_path) in gt_frames.iter().enumerate().skip(1) {
            let stem = gt_path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let pred_path = ["png", "pgm", "ppm"]
                .iter()
                .map(|ext| pred_video_dir.join(format!("{stem}.{ext}")))
                .find(|p| p.exists());
            let Some(pred_path) = pred_path else {
                warnings.push(
                    Error::MissingFrame {
                        video: video.clone(),
                        frame: stem.to_string(),
                    }
                    .to_string(),
                );
                continue;
            };
            let pred = imgio::load_mask(&pred_path)?;
            let gt = &gt_masks[idx];
            if pred.dim() != gt.dim() {
                warnings.push(format!(
                    "video '{video}', frame '{stem}': prediction shape {:?} vs ground truth {:?}",
                    pred.dim(),
                    gt.dim()
                ));
                continue;
            }
            let unknown: BTreeSet<u8> = pred
                .iter()
                .copied()
                .filter(|&c| c != 0 && !classes.contains(&c))
                .collect();
            if !unknown.is_empty() {
                warnings.push(
                    Error::ClassMismatch {
                        video: video.clone(),
                        frame: stem.to_string(),
                        detail: format!("prediction classes {unknown:?} absent from ground truth"),
                    }
                    .to_string(),
                );
            }
            for (&class, (j_list, f_list)) in scores.iter_mut() {
                let pb = pred.mapv(|v| v == class);
                let gb = gt.mapv(|v| v == class);
                j_list.push(jaccard(&pb, &gb)?);
                f_list.push(boundary_f(&pb, &gb, tol_frac)?);
            }
        }

        for (class, (j_list, f_list)) in scores {
            if j_list.is_empty() {
                warnings.push(format!(
                    "video '{video}', class {class}: no frames were scored"
                ));
                continue;
            }
            per_item.push(VideoClassScore {
                video: video.clone(),
                class_id: class,
                frames_scored: j_list.len(),
                j_mean: mean(&j_list),
                j_recall: recall_at_half(&j_list),
                f_mean: mean(&f_list),
                f_recall: recall_at_half(&f_list),
            });
        }
    }

    let j_mean = mean(&per_item.iter().map(|i| i.j_mean).collect::<Vec<_>>());
    let f_mean = mean(&per_item.iter().map(|i| i.f_mean).collect::<Vec<_>>());
    Ok(EvalReport {
        j_recall: mean(&per_item.iter().map(|i| i.j_recall).collect::<Vec<_>>()),
        f_recall: mean(&per_item.iter().map(|i| i.f_recall).collect::<Vec<_>>()),
        jf_mean: (j_mean + f_mean) / 2.0,
        j_mean,
        f_mean,
        per_item,
        warnings,
        both_empty_scores_one: true,
    })
}
