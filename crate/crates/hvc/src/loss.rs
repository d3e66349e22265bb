//! Static and dynamic correspondence losses.
//!
//! The static term is the masked mean cosine similarity between the two
//! views' embeddings; the dynamic term is the same quantity computed
//! between the per-location-normalized forward and backward pseudo-dynamic
//! signals. Both are averaged over the positive mask with the
//! `sum(A) + 1e-6` denominator guard, and combined as
//! `total = -(static + alpha * dynamic)`.

use ndarray::{Array2, Array4, Axis};

use crate::encoder::{FeatureMap, PseudoDynamicNet};
use crate::error::{Error, Result};
use crate::geometry::{distance_matrix, positive_mask, GridCoords, PositiveMask};
use crate::layers::{l2norm_backward, l2norm_forward};
use crate::store::ParameterStore;

pub const MASK_DENOM_GUARD: f64 = 1e-6;

/// Dense per-location-pair similarities `(HW x HW)`.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
}

/// Row-stochastic affinity `(n_ref x n_query)`.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
}

/// A hybrid loss evaluation. `static_term` and `dynamic_term` are the
/// masked mean similarities before negation, so
/// `total = -(static_term + alpha * dynamic_term)`.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub total: f64,
    pub static_term: f64,
    pub dynamic_term: f64,
    pub alpha: f64,
    pub positives: usize,
}

/// Per-location dot products between two same-shaped normalized feature
/// maps, over flattened row-major locations.
pub fn similarity_matrix(fa: &FeatureMap, fb: &FeatureMap) -> Result<SimilarityMatrix> {
    if fa.data.dim() != fb.data.dim() {
        return Err(Error::shape(
            "similarity_matrix features",
            format!("{:?}", fa.data.dim()),
            format!("{:?}", fb.data.dim()),
        ));
    }
    if !fa.normalized || !fb.normalized {
        return Err(Error::Config(
            "similarity_matrix expects l2-normalized features".into(),
        ));
    }
    let a = fa.as_matrix();
    let b = fb.as_matrix();
    Ok(SimilarityMatrix {
        values: a.t().dot(&b),
    })
}

/// `sum(T .* A) / (sum(A) + 1e-6)`. An empty mask yields (almost) zero.
pub fn masked_mean(sim: &SimilarityMatrix, mask: &PositiveMask) -> Result<f64> {
    if sim.values.dim() != mask.values.dim() {
        return Err(Error::shape(
            "masked_mean operands",
            format!("{:?}", sim.values.dim()),
            format!("{:?}", mask.values.dim()),
        ));
    }
    let num: f64 = sim
        .values
        .iter()
        .zip(mask.values.iter())
        .map(|(&t, &a)| t * a)
        .sum();
    Ok(num / (mask.positives as f64 + MASK_DENOM_GUARD))
}

/// One directional hybrid loss from precomputed signals. The raw
/// pseudo-dynamic signals are normalized per location before their
/// similarity is taken.
pub fn hybrid_loss(
    f1: &FeatureMap,
    f2: &FeatureMap,
    m1: &FeatureMap,
    m2: &FeatureMap,
    mask: &PositiveMask,
    alpha: f64,
) -> Result<LossValue> {
    let n = f1.locations();
    if mask.values.dim() != (n, n) {
        return Err(Error::shape(
            "hybrid_loss mask",
            format!("({n}, {n})"),
            format!("{:?}", mask.values.dim()),
        ));
    }
    let m1n = if m1.normalized { m1.clone() } else { m1.normalize() };
    let m2n = if m2.normalized { m2.clone() } else { m2.normalize() };
    let static_term = masked_mean(&similarity_matrix(f1, f2)?, mask)?;
    let dynamic_term = masked_mean(&similarity_matrix(&m1n, &m2n)?, mask)?;
    Ok(LossValue {
        total: -(static_term + alpha * dynamic_term),
        static_term,
        dynamic_term,
        alpha,
        positives: mask.positives,
    })
}

/// The symmetric two-direction loss for one crop pair, computing the
/// pseudo-dynamic signals internally. Test/inspection convenience around
/// the batched path used for training.
#[allow(clippy::too_many_arguments)]
pub fn symmetric_step_loss(
    pseudo: &PseudoDynamicNet,
    pseudo_store: &mut ParameterStore,
    o1: &FeatureMap,
    o2: &FeatureMap,
    t1: &FeatureMap,
    t2: &FeatureMap,
    coords1: &GridCoords,
    coords2: &GridCoords,
    r: f64,
    alpha: f64,
) -> Result<LossValue> {
    let mask12 = positive_mask(&distance_matrix(coords1, coords2)?, r);
    let (c, h, w) = o1.data.dim();
    let to_batch = |f: &FeatureMap| {
        f.data
            .clone()
            .into_shape_with_order((1, c, h, w))
            .expect("batch of one")
    };
    let out = symmetric_batch_loss(
        pseudo,
        pseudo_store,
        &to_batch(o1),
        &to_batch(o2),
        &to_batch(t1),
        &to_batch(t2),
        std::slice::from_ref(&mask12),
        alpha,
        false,
        false,
    )?;
    Ok(out.loss)
}

/// Batched symmetric hybrid loss with gradients for the online embeddings.
pub struct BatchLossOutput {
    pub loss: LossValue,
    /// Gradient of the batch-mean loss w.r.t. the online embedding of view 1.
    pub d_o1: Array4<f64>,
    /// Gradient w.r.t. the online embedding of view 2.
    pub d_o2: Array4<f64>,
}

/// Evaluates `hybrid(o1, t2, A) + hybrid(o2, t1, A^T)` as a batch mean.
///
/// `masks` holds one positive mask per sample for the (view1, view2) crop
/// order; the opposite direction uses its transpose. Gradients flow to the
/// online embeddings and, through the generator, to the pseudo parameters;
/// the target embeddings are treated as constants. When `with_grad` is
/// false only the loss is computed.
#[allow(clippy::too_many_arguments)]
pub fn symmetric_batch_loss(
    pseudo: &PseudoDynamicNet,
    pseudo_store: &mut ParameterStore,
    o1: &Array4<f64>,
    o2: &Array4<f64>,
    t1: &Array4<f64>,
    t2: &Array4<f64>,
    masks: &[PositiveMask],
    alpha: f64,
    update_running: bool,
    with_grad: bool,
) -> Result<BatchLossOutput> {
    let b = o1.dim().0;
    if masks.len() != b {
        return Err(Error::shape("symmetric_batch_loss masks", b, masks.len()));
    }
    for (x, name) in [(o2, "o2"), (t1, "t1"), (t2, "t2")] {
        if x.dim() != o1.dim() {
            return Err(Error::shape(
                format!("symmetric_batch_loss {name}"),
                format!("{:?}", o1.dim()),
                format!("{:?}", x.dim()),
            ));
        }
    }
    let masks_t: Vec<PositiveMask> = masks.iter().map(|m| m.transposed()).collect();

    let dir1 = direction_loss(
        pseudo,
        pseudo_store,
        o1,
        t2,
        masks,
        alpha,
        update_running,
        with_grad,
    )?;
    let dir2 = direction_loss(
        pseudo,
        pseudo_store,
        o2,
        t1,
        &masks_t,
        alpha,
        update_running,
        with_grad,
    )?;

    let static_term = dir1.static_term + dir2.static_term;
    let dynamic_term = dir1.dynamic_term + dir2.dynamic_term;
    Ok(BatchLossOutput {
        loss: LossValue {
            total: -(static_term + alpha * dynamic_term),
            static_term,
            dynamic_term,
            alpha,
            positives: dir1.positives + dir2.positives,
        },
        d_o1: dir1.d_online,
        d_o2: dir2.d_online,
    })
}

struct DirectionOutput {
    static_term: f64,
    dynamic_term: f64,
    positives: usize,
    d_online: Array4<f64>,
}

/// One direction of the hybrid loss: static similarity between `online`
/// and `target`, dynamic similarity between the two generator outputs,
/// both masked and averaged, batch-mean weighted.
#[allow(clippy::too_many_arguments)]
fn direction_loss(
    pseudo: &PseudoDynamicNet,
    pseudo_store: &mut ParameterStore,
    online: &Array4<f64>,
    target: &Array4<f64>,
    masks: &[PositiveMask],
    alpha: f64,
    update_running: bool,
    with_grad: bool,
) -> Result<DirectionOutput> {
    let (b, c, h, w) = online.dim();
    let n = h * w;
    let bf = b as f64;

    let (m_fwd, cache_fwd) = pseudo.forward_train(pseudo_store, online, target, update_running)?;
    let (m_bwd, cache_bwd) = pseudo.forward_train(pseudo_store, target, online, update_running)?;
    let (mf_n, mf_l2) = l2norm_forward(&m_fwd);
    let (mb_n, mb_l2) = l2norm_forward(&m_bwd);

    let mut static_term = 0.0;
    let mut dynamic_term = 0.0;
    let mut positives = 0usize;
    let mut d_online = Array4::zeros((b, c, h, w));
    let mut d_mf_n = Array4::zeros(mf_n.raw_dim());
    let mut d_mb_n = Array4::zeros(mb_n.raw_dim());

    for bi in 0..b {
        let mask = &masks[bi];
        if mask.values.dim() != (n, n) {
            return Err(Error::shape(
                "direction_loss mask",
                format!("({n}, {n})"),
                format!("{:?}", mask.values.dim()),
            ));
        }
        let denom = mask.positives as f64 + MASK_DENOM_GUARD;
        positives += mask.positives;

        let om = flat(online, bi, c, n);
        let tm = flat(target, bi, c, n);
        let sim = om.t().dot(&tm);
        let s: f64 = sim
            .iter()
            .zip(mask.values.iter())
            .map(|(&v, &a)| v * a)
            .sum();
        static_term += s / denom / bf;

        let mfm = flat(&mf_n, bi, 2, n);
        let mbm = flat(&mb_n, bi, 2, n);
        let dsim = mfm.t().dot(&mbm);
        let d: f64 = dsim
            .iter()
            .zip(mask.values.iter())
            .map(|(&v, &a)| v * a)
            .sum();
        dynamic_term += d / denom / bf;

        if with_grad {
            // d(total)/d(online_i) = -(1/(B*denom)) * sum_j A(i,j) t_j
            let scale = -1.0 / (bf * denom);
            let d_om = tm.dot(&mask.values.t()) * scale;
            d_online
                .index_axis_mut(Axis(0), bi)
                .assign(&unflat(&d_om, c, h, w));

            let dscale = -alpha / (bf * denom);
            let d_mf = mbm.dot(&mask.values.t()) * dscale;
            let d_mb = mfm.dot(&mask.values) * dscale;
            d_mf_n
                .index_axis_mut(Axis(0), bi)
                .assign(&unflat(&d_mf, 2, h, w));
            d_mb_n
                .index_axis_mut(Axis(0), bi)
                .assign(&unflat(&d_mb, 2, h, w));
        }
    }

    if with_grad {
        let d_m_fwd = l2norm_backward(&mf_l2, &d_mf_n);
        let d_m_bwd = l2norm_backward(&mb_l2, &d_mb_n);
        // forward signal: online was the first argument
        let (d_on_f, _d_t_f) = pseudo.backward(pseudo_store, &cache_fwd, &d_m_fwd)?;
        // backward signal: online was the second argument
        let (_d_t_b, d_on_b) = pseudo.backward(pseudo_store, &cache_bwd, &d_m_bwd)?;
        d_online += &d_on_f;
        d_online += &d_on_b;
    }

    Ok(DirectionOutput {
        static_term,
        dynamic_term,
        positives,
        d_online,
    })
}

fn flat(x: &Array4<f64>, b: usize, c: usize, n: usize) -> Array2<f64> {
    x.index_axis(Axis(0), b)
        .to_owned()
        .into_shape_with_order((c, n))
        .expect("flatten sample")
}

fn unflat(x: &Array2<f64>, c: usize, h: usize, w: usize) -> ndarray::Array3<f64> {
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("unflatten sample")
}

/// Row-stochastic affinity between reference and query locations:
/// `S(i, j) = softmax_j(ref_i . query_j / temperature)`.
pub fn affinity(refer: &FeatureMap, query: &FeatureMap, temperature: f64) -> Result<AffinityMatrix> {
    if refer.channels() != query.channels() {
        return Err(Error::shape(
            "affinity channels",
            refer.channels(),
            query.channels(),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "affinity temperature must be > 0, got {temperature}"
        )));
    }
    let r = refer.as_matrix();
    let q = query.as_matrix();
    let mut values = r.t().dot(&q);
    for mut row in values.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| ((v - max) / temperature).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(AffinityMatrix { values })
}

/// A contrastive-matching query: one anchor row of the affinity matrix,
/// its positive column, and the negative columns in the denominator.
#[derive(Debug, Clone)]
pub struct CmPair {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// The three affinity-based objectives video-based methods train with:
/// photometric reconstruction, cycle consistency and contrastive matching.
/// They exist for comparison experiments; the trainer does not use them.
pub fn baseline_losses(
    refer: &FeatureMap,
    query: &FeatureMap,
    s_fwd: &AffinityMatrix,
    s_bwd: &AffinityMatrix,
    cm_pairs: &[CmPair],
) -> Result<(f64, f64, f64)> {
    let r = refer.as_matrix();
    let q = query.as_matrix();
    let n_ref = r.ncols();
    let n_query = q.ncols();
    if s_fwd.values.dim() != (n_ref, n_query) {
        return Err(Error::shape(
            "baseline_losses s_fwd",
            format!("({n_ref}, {n_query})"),
            format!("{:?}", s_fwd.values.dim()),
        ));
    }
    if s_bwd.values.dim() != (n_query, n_ref) {
        return Err(Error::shape(
            "baseline_losses s_bwd",
            format!("({n_query}, {n_ref})"),
            format!("{:?}", s_bwd.values.dim()),
        ));
    }

    // Photometric reconstruction: || query - S_fwd^T ref ||^2
    let recon = s_fwd.values.t().dot(&r.t().to_owned()); // (n_query, C)
    let l_pr: f64 = q
        .t()
        .iter()
        .zip(recon.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();

    // Cycle consistency: || S_fwd S_bwd - I ||^2
    let cycle = s_fwd.values.dot(&s_bwd.values);
    let mut l_cc = 0.0;
    for i in 0..n_ref {
        for j in 0..n_ref {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = cycle[[i, j]] - target;
            l_cc += d * d;
        }
    }

    // Contrastive matching: -log( exp(S(p,p+)) / sum_{p-} exp(S(p,p-)) )
    let mut l_cm = 0.0;
    for pair in cm_pairs {
        if pair.negatives.is_empty() {
            return Err(Error::EmptyNegativeSet {
                anchor: pair.anchor,
            });
        }
        if pair.negatives.contains(&pair.positive) {
            return Err(Error::Config(format!(
                "contrastive pair for anchor {} lists its positive among the negatives",
                pair.anchor
            )));
        }
        let pos = s_fwd.values[[pair.anchor, pair.positive]];
        let denom: f64 = pair
            .negatives
            .iter()
            .map(|&j| s_fwd.values[[pair.anchor, j]].exp())
            .sum();
        l_cm += -(pos - denom.ln());
    }
    if !cm_pairs.is_empty() {
        l_cm /= cm_pairs.len() as f64;
    }

    Ok((l_pr, l_cc, l_cm))
}
