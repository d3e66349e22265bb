//! Affinity-based video label propagation.
//!
//! Given the first frame's labels and per-frame features, every query
//! location takes a temperature softmax over its top-k most similar
//! reference locations (the annotated first frame plus a FIFO of recent
//! predictions) and mixes their soft labels. Hard masks come from
//! bilinear upsampling of the soft labels followed by argmax.

use std::collections::VecDeque;

use ndarray::{Array2, Array3};

use crate::encoder::{EncoderNet, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::ImageBuffer;
use crate::store::ParameterStore;

/// Soft labels at feature resolution: `(K, h, w)` with per-location
/// columns on the probability simplex.
pub type SoftLabels = Array3<f64>;

#[derive(Debug, Clone)]
pub struct PropagationConfig {
    /// Recent (features, prediction) pairs kept besides the anchor.
    pub n_context: usize,
    /// Reference locations each query mixes over.
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            n_context: 5,
            top_k: 10,
            temperature: 0.07,
        }
    }
}

/// Ordered reference set: the annotated first frame is always present,
/// recent predictions rotate through a bounded FIFO.
pub struct ContextBank {
    anchor: (FeatureMap, SoftLabels),
    recent: VecDeque<(FeatureMap, SoftLabels)>,
    capacity: usize,
}

impl ContextBank {
    pub fn new(anchor_features: FeatureMap, anchor_labels: SoftLabels, capacity: usize) -> Self {
        Self {
            anchor: (anchor_features, anchor_labels),
            recent: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, features: FeatureMap, labels: SoftLabels) {
        if self.capacity == 0 {
            return;
        }
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back((features, labels));
    }

    /// Anchor first, then recent entries oldest to newest.
    pub fn references(&self) -> Vec<(&FeatureMap, &SoftLabels)> {
        let mut refs = vec![(&self.anchor.0, &self.anchor.1)];
        refs.extend(self.recent.iter().map(|(f, l)| (f, l)));
        refs
    }

    pub fn len(&self) -> usize {
        1 + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Histogram downsampling of a hard mask to feature resolution: each cell
/// carries the class distribution of the pixels it covers.
pub fn downsample_mask(
    hard: &Array2<u8>,
    num_classes: usize,
    feat_h: usize,
    feat_w: usize,
) -> SoftLabels {
    let (img_h, img_w) = hard.dim();
    let mut soft = Array3::zeros((num_classes, feat_h, feat_w));
    let mut counts = Array2::<f64>::zeros((feat_h, feat_w));
    for y in 0..img_h {
        let cy = (y * feat_h / img_h).min(feat_h - 1);
        for x in 0..img_w {
            let cx = (x * feat_w / img_w).min(feat_w - 1);
            let class = hard[[y, x]] as usize;
            if class < num_classes {
                soft[[class, cy, cx]] += 1.0;
            }
            counts[[cy, cx]] += 1.0;
        }
    }
    for cy in 0..feat_h {
        for cx in 0..feat_w {
            let n = counts[[cy, cx]];
            if n > 0.0 {
                for k in 0..num_classes {
                    soft[[k, cy, cx]] /= n;
                }
            } else {
                soft[[0, cy, cx]] = 1.0;
            }
        }
    }
    soft
}

/// Bilinear upsampling of soft labels to image resolution,
/// pixel-center convention.
pub fn upsample_soft(soft: &SoftLabels, out_h: usize, out_w: usize) -> SoftLabels {
    let (k, h, w) = soft.dim();
    let mut out = Array3::zeros((k, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = src_y - y0 as f64;
        for ox in 0..out_w {
            let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = src_x - x0 as f64;
            for ki in 0..k {
                let v00 = soft[[ki, y0, x0]];
                let v01 = soft[[ki, y0, x1]];
                let v10 = soft[[ki, y1, x0]];
                let v11 = soft[[ki, y1, x1]];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[[ki, oy, ox]] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Per-pixel argmax over class channels; ties go to the lower class id.
pub fn argmax_classes(soft: &SoftLabels) -> Array2<u8> {
    let (k, h, w) = soft.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = soft[[0, y, x]];
            for ki in 1..k {
                let v = soft[[ki, y, x]];
                if v > best_v {
                    best_v = v;
                    best = ki;
                }
            }
            out[[y, x]] = best as u8;
        }
    }
    out
}

/// Propagates labels to one query frame: per query location, dot products
/// against every reference location, top-k selection, temperature softmax
/// over the kept entries, and an affinity-weighted mix of reference labels.
pub fn propagate_frame(
    query: &FeatureMap,
    bank: &ContextBank,
    cfg: &PropagationConfig,
) -> Result<SoftLabels> {
    let refs = bank.references();
    let (c, h, w) = query.data.dim();
    let n_q = h * w;
    let num_classes = refs[0].1.dim().0;
    for (f, l) in &refs {
        if f.data.dim() != (c, h, w) {
            return Err(Error::shape(
                "propagate_frame reference features",
                format!("({c}, {h}, {w})"),
                format!("{:?}", f.data.dim()),
            ));
        }
        if l.dim() != (num_classes, h, w) {
            return Err(Error::shape(
                "propagate_frame reference labels",
                format!("({num_classes}, {h}, {w})"),
                format!("{:?}", l.dim()),
            ));
        }
    }

    // Concatenate reference locations: features (C, R*N), labels (K, R*N).
    let n_total = refs.len() * n_q;
    let mut ref_feat = Array2::zeros((c, n_total));
    let mut ref_labels = Array2::zeros((num_classes, n_total));
    for (ri, (f, l)) in refs.iter().enumerate() {
        let fm = f.as_matrix();
        let lm = (*l)
            .clone()
            .into_shape_with_order((num_classes, n_q))
            .expect("label reshape");
        for j in 0..n_q {
            for ci in 0..c {
                ref_feat[[ci, ri * n_q + j]] = fm[[ci, j]];
            }
            for ki in 0..num_classes {
                ref_labels[[ki, ri * n_q + j]] = lm[[ki, j]];
            }
        }
    }

    let qm = query.as_matrix();
    let sims = qm.t().dot(&ref_feat); // (N_q, R*N)
    let k = cfg.top_k.min(n_total);
    let mut out = Array3::zeros((num_classes, h, w));
    for q in 0..n_q {
        let row = sims.row(q);
        // Top-k by similarity, ties broken toward the lower index so the
        // anchor wins over later duplicates.
        let mut order: Vec<usize> = (0..n_total).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let kept = &order[..k];
        let max_sim = row[kept[0]];
        let mut weights = Vec::with_capacity(k);
        let mut z = 0.0;
        for &idx in kept {
            let e = ((row[idx] - max_sim) / cfg.temperature).exp();
            weights.push(e);
            z += e;
        }
        let (qy, qx) = (q / w, q % w);
        for (wi, &idx) in weights.iter().zip(kept.iter()) {
            let wgt = wi / z;
            for ki in 0..num_classes {
                out[[ki, qy, qx]] += wgt * ref_labels[[ki, idx]];
            }
        }
    }
    Ok(out)
}

/// Anything that can map a frame to a normalized feature map. The real
/// implementation wraps the target-style encoder in eval mode; tests
/// inject analytic encoders.
pub trait FrameEncoder {
    fn encode_frame(&self, img: &ImageBuffer) -> Result<FeatureMap>;
}

/// Eval-mode wrapper around trained encoder weights.
pub struct NetFrameEncoder<'a> {
    pub net: &'a EncoderNet,
    pub store: &'a ParameterStore,
}

impl FrameEncoder for NetFrameEncoder<'_> {
    fn encode_frame(&self, img: &ImageBuffer) -> Result<FeatureMap> {
        let (h, w) = (img.height(), img.width());
        let batch = img
            .data()
            .clone()
            .into_shape_with_order((1, 3, h, w))
            .expect("batch of one");
        let out = self.net.forward_eval(self.store, &batch)?;
        Ok(FeatureMap::from_batch(&out, 0, true))
    }
}

/// Full-video propagation. Frame 0 keeps the given mask; every later
/// frame is predicted, pushed into the context FIFO, and rendered to a
/// hard mask at image resolution.
pub fn run_video(
    encoder: &dyn FrameEncoder,
    frames: &[ImageBuffer],
    first_mask: &Array2<u8>,
    cfg: &PropagationConfig,
) -> Result<Vec<Array2<u8>>> {
    if frames.len() < 2 {
        return Err(Error::Config(
            "video propagation needs at least two frames".into(),
        ));
    }
    if first_mask.dim() != (frames[0].height(), frames[0].width()) {
        return Err(Error::shape(
            "first frame mask",
            format!("({}, {})", frames[0].height(), frames[0].width()),
            format!("{:?}", first_mask.dim()),
        ));
    }
    let num_classes = *first_mask.iter().max().unwrap_or(&0) as usize + 1;

    let anchor_feat = encoder.encode_frame(&frames[0])?;
    let (fh, fw) = (anchor_feat.height(), anchor_feat.width());
    let anchor_soft = downsample_mask(first_mask, num_classes, fh, fw);
    let mut bank = ContextBank::new(anchor_feat, anchor_soft, cfg.n_context);

    let mut outputs = vec![first_mask.clone()];
    for frame in &frames[1..] {
        let feat = encoder.encode_frame(frame)?;
        let soft = propagate_frame(&feat, &bank, cfg)?;
        let up = upsample_soft(&soft, frame.height(), frame.width());
        outputs.push(argmax_classes(&up));
        bank.push(feat, soft);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3 as A3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(
            A3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0)),
            false,
        )
        .normalize()
    }

    fn one_hot_labels(classes: &Array2<u8>, k: usize) -> SoftLabels {
        let (h, w) = classes.dim();
        let mut soft = Array3::zeros((k, h, w));
        for y in 0..h {
            for x in 0..w {
                soft[[classes[[y, x]] as usize, y, x]] = 1.0;
            }
        }
        soft
    }

    /// Unrestricted softmax propagation (no top-k), the brute-force oracle.
    fn propagate_oracle(
        query: &FeatureMap,
        refs: &[(&FeatureMap, &SoftLabels)],
        temperature: f64,
    ) -> SoftLabels {
        let (c, h, w) = query.data.dim();
        let k = refs[0].1.dim().0;
        let n_q = h * w;
        let qm = query.as_matrix();
        let mut out = Array3::zeros((k, h, w));
        for q in 0..n_q {
            let mut sims = Vec::new();
            for (f, l) in refs {
                let fm = f.as_matrix();
                let lm = (*l).clone().into_shape_with_order((k, f.locations())).unwrap();
                for j in 0..f.locations() {
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += qm[[ci, q]] * fm[[ci, j]];
                    }
                    sims.push((s, lm.column(j).to_owned()));
                }
            }
            let max = sims.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = sims.iter().map(|(s, _)| ((s - max) / temperature).exp()).sum();
            for (s, label) in &sims {
                let wgt = ((s - max) / temperature).exp() / z;
                for ki in 0..k {
                    out[[ki, q / w, q % w]] += wgt * label[ki];
                }
            }
        }
        out
    }

    #[test]
    fn identical_reference_recovers_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feat = random_unit(&mut rng, 32, 2, 2);
        let classes = Array2::from_shape_vec((2, 2), vec![0u8, 1, 1, 0]).unwrap();
        let labels = one_hot_labels(&classes, 2);
        let bank = ContextBank::new(feat.clone(), labels.clone(), 3);
        let out = propagate_frame(&feat, &bank, &PropagationConfig::default()).unwrap();
        // Distinct random features: the self-match at similarity 1 crushes
        // everything else at temperature 0.07.
        for (o, l) in out.iter().zip(labels.iter()) {
            assert_abs_diff_eq!(o, l, epsilon = 5e-3);
        }
        assert_eq!(argmax_classes(&out), classes);
    }

    #[test]
    fn near_zero_temperature_copies_best_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs = random_unit(&mut rng, 6, 2, 2);
        let classes = Array2::from_shape_vec((2, 2), vec![1u8, 2, 0, 1]).unwrap();
        let labels = one_hot_labels(&classes, 3);
        let bank = ContextBank::new(refs.clone(), labels, 3);
        let cfg = PropagationConfig {
            temperature: 1e-4,
            ..Default::default()
        };
        let out = propagate_frame(&refs, &bank, &cfg).unwrap();
        assert_eq!(argmax_classes(&out), classes);
        for v in out.iter() {
            assert!(*v < 1e-9 || *v > 1.0 - 1e-9, "weights must saturate: {v}");
        }
    }

    #[test]
    fn matches_brute_force_on_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchor = random_unit(&mut rng, 5, 2, 2);
        let recent = random_unit(&mut rng, 5, 2, 2);
        let query = random_unit(&mut rng, 5, 2, 2);
        let la = one_hot_labels(
            &Array2::from_shape_vec((2, 2), vec![0u8, 1, 2, 0]).unwrap(),
            3,
        );
        let lr = one_hot_labels(
            &Array2::from_shape_vec((2, 2), vec![2u8, 2, 1, 0]).unwrap(),
            3,
        );
        let mut bank = ContextBank::new(anchor.clone(), la.clone(), 4);
        bank.push(recent.clone(), lr.clone());
        let cfg = PropagationConfig {
            top_k: 8, // full reference size
            temperature: 0.2,
            n_context: 4,
        };
        let got = propagate_frame(&query, &bank, &cfg).unwrap();
        let want = propagate_oracle(&query, &[(&anchor, &la), (&recent, &lr)], 0.2);
        for (g, w) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-10);
        }
    }

    #[test]
    fn soft_labels_stay_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchor = random_unit(&mut rng, 6, 3, 3);
        let labels = downsample_mask(
            &Array2::from_shape_fn((12, 12), |(y, x)| ((y / 4 + x / 4) % 3) as u8),
            3,
            3,
            3,
        );
        let mut bank = ContextBank::new(anchor, labels, 2);
        let cfg = PropagationConfig::default();
        for step in 0..4 {
            let q = random_unit(&mut rng, 6, 3, 3);
            let soft = propagate_frame(&q, &bank, &cfg).unwrap();
            let (k, h, w) = soft.dim();
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = (0..k).map(|ki| soft[[ki, y, x]]).sum();
                    assert_abs_diff_eq!(s, 1.0, epsilon = 1e-5);
                    for ki in 0..k {
                        assert!(soft[[ki, y, x]] >= -1e-12, "step {step}");
                    }
                }
            }
            bank.push(q, soft);
        }
    }

    #[test]
    fn class_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let anchor = random_unit(&mut rng, 5, 2, 2);
        let query = random_unit(&mut rng, 5, 2, 2);
        let classes = Array2::from_shape_vec((2, 2), vec![0u8, 1, 2, 1]).unwrap();
        let perm = [2u8, 0, 1]; // class i -> perm[i]
        let permuted = classes.mapv(|c| perm[c as usize]);

        let cfg = PropagationConfig::default();
        let bank_a = ContextBank::new(anchor.clone(), one_hot_labels(&classes, 3), 2);
        let bank_b = ContextBank::new(anchor.clone(), one_hot_labels(&permuted, 3), 2);
        let out_a = propagate_frame(&query, &bank_a, &cfg).unwrap();
        let out_b = propagate_frame(&query, &bank_b, &cfg).unwrap();
        for ki in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_abs_diff_eq!(
                        out_a[[ki, y, x]],
                        out_b[[perm[ki] as usize, y, x]],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn anchor_is_always_retained() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchor = random_unit(&mut rng, 6, 2, 2);
        let classes = Array2::from_shape_vec((2, 2), vec![1u8, 0, 0, 1]).unwrap();
        let labels = one_hot_labels(&classes, 2);
        let mut bank = ContextBank::new(anchor.clone(), labels, 2);
        // Flood the FIFO with unrelated frames carrying wrong labels.
        for _ in 0..5 {
            let junk_feat = random_unit(&mut rng, 6, 2, 2);
            let junk_labels = one_hot_labels(&Array2::zeros((2, 2)), 2);
            bank.push(junk_feat, junk_labels);
        }
        assert_eq!(bank.len(), 3);
        // A query identical to the anchor still recovers the anchor labels.
        let out = propagate_frame(&anchor, &bank, &PropagationConfig::default()).unwrap();
        assert_eq!(argmax_classes(&out), classes);
    }

    #[test]
    fn downsample_uniform_and_aligned_split() {
        let uniform = Array2::from_elem((8, 8), 1u8);
        let soft = downsample_mask(&uniform, 2, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(soft[[1, y, x]], 1.0);
                assert_eq!(soft[[0, y, x]], 0.0);
            }
        }

        // Vertical half/half split aligned to the cell boundary.
        let split = Array2::from_shape_fn((8, 8), |(_, x)| u8::from(x >= 4));
        let soft = downsample_mask(&split, 2, 2, 2);
        for y in 0..2 {
            assert_eq!(soft[[0, y, 0]], 1.0);
            assert_eq!(soft[[1, y, 1]], 1.0);
        }
    }

    #[test]
    fn downsample_misaligned_split_matches_pixel_counts() {
        // Split at x = 3 on an 8-wide image with 2 cells: the left cell
        // covers x 0..4, of which 3 pixels are class 0 and 1 is class 1.
        let split = Array2::from_shape_fn((8, 8), |(_, x)| u8::from(x >= 3));
        let soft = downsample_mask(&split, 2, 2, 2);
        for y in 0..2 {
            assert_abs_diff_eq!(soft[[0, y, 0]], 0.75, epsilon = 1e-12);
            assert_abs_diff_eq!(soft[[1, y, 0]], 0.25, epsilon = 1e-12);
            assert_eq!(soft[[1, y, 1]], 1.0);
        }
    }

    #[test]
    fn argmax_ties_take_lower_class() {
        let mut soft = Array3::zeros((3, 1, 1));
        soft[[1, 0, 0]] = 0.5;
        soft[[2, 0, 0]] = 0.5;
        assert_eq!(argmax_classes(&soft)[[0, 0]], 1);
    }
}
