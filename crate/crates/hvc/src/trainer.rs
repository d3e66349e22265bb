//! The self-supervised training loop: sample crop pairs, encode with the
//! online and target networks, take the symmetric hybrid loss, step Adam
//! on the online and pseudo-dynamic parameters, then EMA-blend the target
//! toward the online weights under the scheduled momentum.

use indexmap::IndexMap;
use ndarray::{Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::{EncoderNet, EncoderRole, PseudoDynamicNet};
use crate::error::{Error, Result};
use crate::geometry::{
    distance_matrix, extract_view, positive_mask, sample_crop_pair, warp_coords, ImageBuffer,
    PositiveMask,
};
use crate::loss::{symmetric_batch_loss, LossValue};
use crate::store::{ema_update, ParameterStore};

// ---------------------------------------------------------------------------
// EMA momentum schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentumSchedule {
    Cosine,
    Linear,
}

impl MomentumSchedule {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown momentum schedule '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        }
    }
}

/// Momentum at `step` of `total_steps`: starts at `m0`, rises to 1.
pub fn momentum_at(step: u64, total_steps: u64, m0: f64, schedule: MomentumSchedule) -> f64 {
    if total_steps == 0 {
        return m0;
    }
    let t = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    match schedule {
        MomentumSchedule::Cosine => 1.0 - (1.0 - m0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0,
        MomentumSchedule::Linear => m0 + (1.0 - m0) * t,
    }
}

#[derive(Debug, Clone)]
pub struct EmaState {
    pub m0: f64,
    pub schedule: MomentumSchedule,
    pub current_m: f64,
}

impl EmaState {
    pub fn new(m0: f64, schedule: MomentumSchedule) -> Self {
        Self {
            m0,
            schedule,
            current_m: m0,
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

use serde::{Deserialize, Serialize};

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer over one or more parameter
/// stores. Moments are keyed by parameter name; the trainer keeps
/// encoder and pseudo names disjoint.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step_count: u64,
    pub first: IndexMap<String, ArrayD<f64>>,
    pub second: IndexMap<String, ArrayD<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, stores: &[&ParameterStore]) -> Self {
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for store in stores {
            for (name, p) in store.iter() {
                if p.trainable {
                    first.insert(name.clone(), ArrayD::zeros(p.value.raw_dim()));
                    second.insert(name.clone(), ArrayD::zeros(p.value.raw_dim()));
                }
            }
        }
        Self {
            cfg,
            step_count: 0,
            first,
            second,
        }
    }

    /// One optimizer step over every trainable parameter. If any gradient
    /// is non-finite the step aborts atomically (no parameter or moment is
    /// touched) and names the offending tensor. Gradients are zeroed on
    /// success.
    pub fn step(&mut self, stores: &mut [&mut ParameterStore]) -> Result<()> {
        for store in stores.iter() {
            if let Some(name) = store.first_nonfinite_grad() {
                return Err(Error::NonFiniteGradient { name: name.into() });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1c = 1.0 - self.cfg.beta1.powi(t);
        let b2c = 1.0 - self.cfg.beta2.powi(t);
        for store in stores.iter_mut() {
            for (name, p) in store.iter_mut() {
                if !p.trainable {
                    continue;
                }
                let m = self
                    .first
                    .get_mut(name)
                    .unwrap_or_else(|| panic!("no first moment for '{name}'"));
                let v = self
                    .second
                    .get_mut(name)
                    .unwrap_or_else(|| panic!("no second moment for '{name}'"));
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                ndarray::Zip::from(&mut p.value)
                    .and(&p.grad)
                    .and(m)
                    .and(v)
                    .for_each(|w, &g, mi, vi| {
                        let g = g + self.cfg.weight_decay * *w;
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let mhat = *mi / b1c;
                        let vhat = *vi / b2c;
                        *w -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                    });
                p.grad.fill(0.0);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Per-step log record; serialized as one CSV row.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub static_term: f64,
    pub dynamic_term: f64,
    pub momentum: f64,
    pub lr: f64,
    /// Images dropped from the batch because no overlapping crop pair was
    /// found.
    pub skipped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: u64,
    pub loss_history: Vec<f64>,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_history.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    /// Mean of the first and last `k` losses.
    pub fn moving_average_ends(&self, k: usize) -> Option<(f64, f64)> {
        if self.loss_history.is_empty() {
            return None;
        }
        let k = k.min(self.loss_history.len()).max(1);
        let head: f64 = self.loss_history[..k].iter().sum::<f64>() / k as f64;
        let tail: f64 =
            self.loss_history[self.loss_history.len() - k..].iter().sum::<f64>() / k as f64;
        Some((head, tail))
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub online_net: EncoderNet,
    pub target_net: EncoderNet,
    pub pseudo_net: PseudoDynamicNet,
    pub online_store: ParameterStore,
    pub target_store: ParameterStore,
    pub pseudo_store: ParameterStore,
    pub adam: AdamState,
    pub ema: EmaState,
    pub step_count: u64,
    pub total_steps: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = cfg.network.to_net_config();
        let online_net = EncoderNet::new(&net_cfg, EncoderRole::Online);
        let target_net = EncoderNet::new(&net_cfg, EncoderRole::Target);
        let pseudo_net = PseudoDynamicNet::new(&net_cfg);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        let mut online_store = ParameterStore::new();
        online_net.init_params(&mut online_store, &mut rng)?;
        let mut pseudo_store = ParameterStore::new();
        pseudo_net.init_params(&mut pseudo_store, &mut rng)?;
        // The target starts as an exact copy of the shared online weights.
        let target_store = online_store.subset_by(|n| !n.starts_with("predictor."));

        let adam = AdamState::new(
            AdamConfig {
                lr: cfg.train.learning_rate,
                beta1: cfg.train.beta1,
                beta2: cfg.train.beta2,
                eps: cfg.train.adam_eps,
                weight_decay: cfg.train.weight_decay,
            },
            &[&online_store, &pseudo_store],
        );
        let schedule = MomentumSchedule::from_name(&cfg.train.momentum_schedule)?;
        let ema = EmaState::new(cfg.train.momentum_start, schedule);

        Ok(Self {
            cfg,
            online_net,
            target_net,
            pseudo_net,
            online_store,
            target_store,
            pseudo_store,
            adam,
            ema,
            step_count: 0,
            total_steps: 0,
        rng,
        })
    }

    pub fn batches_per_epoch(&self, dataset_len: usize) -> usize {
        if dataset_len == 0 {
            0
        } else if dataset_len < self.cfg.train.batch_size {
            1
        } else {
            dataset_len / self.cfg.train.batch_size
        }
    }

    /// Deterministic image order for one epoch, independent of the
    /// training RNG stream so that resuming from a checkpoint replays the
    /// same order.
    pub fn epoch_order(&self, epoch: usize, dataset_len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dataset_len).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.cfg.run.seed ^ 0x5851_f42d_4c95_7f2d ^ epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// One optimization step on a batch of images. Images for which no
    /// overlapping crop pair exists are skipped; an all-skipped batch
    /// yields `Ok(None)`.
    pub fn step(&mut self, images: &[&ImageBuffer]) -> Result<Option<StepRecord>> {
        let crop_cfg = self.cfg.crop.to_crop_config();
        let view = crop_cfg.view_size;
        let grid = self
            .cfg
            .network
            .to_net_config()
            .feature_grid_for(view);
        let r = self.cfg.loss.positive_radius;

        let mut views1 = Vec::new();
        let mut views2 = Vec::new();
        let mut masks: Vec<PositiveMask> = Vec::new();
        let mut skipped = 0usize;
        for img in images {
            match sample_crop_pair(img.height(), img.width(), &mut self.rng, &crop_cfg) {
                Ok((c1, c2)) => {
                    views1.push(extract_view(img, &c1));
                    views2.push(extract_view(img, &c2));
                    let g1 = warp_coords(&c1, grid, grid, img.height(), img.width());
                    let g2 = warp_coords(&c2, grid, grid, img.height(), img.width());
                    masks.push(positive_mask(&distance_matrix(&g1, &g2)?, r));
                }
                Err(Error::RetriesExhausted { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if views1.is_empty() {
            return Ok(None);
        }

        let b = views1.len();
        let mut v1 = Array4::zeros((b, 3, view, view));
        let mut v2 = Array4::zeros((b, 3, view, view));
        for (i, (a, b_)) in views1.iter().zip(views2.iter()).enumerate() {
            v1.index_axis_mut(Axis(0), i).assign(a);
            v2.index_axis_mut(Axis(0), i).assign(b_);
        }

        // Online passes commit BN running stats; the target never does
        // (its running stats track the online ones through the EMA).
        let (o1, c1) = self.online_net.forward_train(&mut self.online_store, &v1, true)?;
        let (o2, c2) = self.online_net.forward_train(&mut self.online_store, &v2, true)?;
        let (t1, _) = self
            .target_net
            .forward_train(&mut self.target_store, &v1, false)?;
        let (t2, _) = self
            .target_net
            .forward_train(&mut self.target_store, &v2, false)?;

        self.online_store.zero_grads();
        self.pseudo_store.zero_grads();
        let out = symmetric_batch_loss(
            &self.pseudo_net,
            &mut self.pseudo_store,
            &o1,
            &o2,
            &t1,
            &t2,
            &masks,
            self.cfg.loss.alpha,
            true,
            true,
        )?;
        self.online_net
            .backward(&mut self.online_store, &c1, &out.d_o1)?;
        self.online_net
            .backward(&mut self.online_store, &c2, &out.d_o2)?;

        self.adam
            .step(&mut [&mut self.online_store, &mut self.pseudo_store])?;
        ema_update(&mut self.target_store, &self.online_store, self.ema.current_m)?;

        self.step_count += 1;
        self.ema.current_m = momentum_at(
            self.step_count,
            self.total_steps,
            self.ema.m0,
            self.ema.schedule,
        );

        Ok(Some(StepRecord {
            step: self.step_count,
            loss: out.loss.total,
            static_term: out.loss.static_term,
            dynamic_term: out.loss.dynamic_term,
            momentum: self.ema.current_m,
            lr: self.adam.cfg.lr,
            skipped,
        }))
    }

    /// Runs the full loop over the dataset; `on_step` sees every record.
    pub fn train(
        &mut self,
        dataset: &[ImageBuffer],
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainSummary> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let batches = self.batches_per_epoch(dataset.len());
        let epochs = self.cfg.train.epochs;
        self.total_steps = (batches * epochs) as u64;
        self.ema.current_m = momentum_at(
            self.step_count,
            self.total_steps,
            self.ema.m0,
            self.ema.schedule,
        );

        let mut summary = TrainSummary::default();
        let start_epoch = (self.step_count as usize) / batches.max(1);
        let batch_size = self.cfg.train.batch_size.min(dataset.len());
        for epoch in start_epoch..epochs {
            let order = self.epoch_order(epoch, dataset.len());
            for chunk in order.chunks_exact(batch_size).take(batches) {
                let images: Vec<&ImageBuffer> = chunk.iter().map(|&i| &dataset[i]).collect();
                if let Some(record) = self.step(&images)? {
                    on_step(&record);
                    summary.loss_history.push(record.loss);
                    summary.steps = record.step;
                }
            }
        }
        Ok(summary)
    }

    /// The loss of one frozen evaluation batch, without updating anything.
    /// Used by tests as a before/after probe.
    pub fn probe_loss(&mut self, images: &[&ImageBuffer]) -> Result<Option<LossValue>> {
        let crop_cfg = self.cfg.crop.to_crop_config();
        let view = crop_cfg.view_size;
        let grid = self.cfg.network.to_net_config().feature_grid_for(view);
        let r = self.cfg.loss.positive_radius;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(self.cfg.run.seed ^ 0x1234_5678);

        let mut views1 = Vec::new();
        let mut views2 = Vec::new();
        let mut masks = Vec::new();
        for img in images {
            if let Ok((cr1, cr2)) =
                sample_crop_pair(img.height(), img.width(), &mut probe_rng, &crop_cfg)
            {
                views1.push(extract_view(img, &cr1));
                views2.push(extract_view(img, &cr2));
                let g1 = warp_coords(&cr1, grid, grid, img.height(), img.width());
                let g2 = warp_coords(&cr2, grid, grid, img.height(), img.width());
                masks.push(positive_mask(&distance_matrix(&g1, &g2)?, r));
            }
        }
        if views1.is_empty() {
            return Ok(None);
        }
        let b = views1.len();
        let mut v1 = Array4::zeros((b, 3, view, view));
        let mut v2 = Array4::zeros((b, 3, view, view));
        for (i, (a, b_)) in views1.iter().zip(views2.iter()).enumerate() {
            v1.index_axis_mut(Axis(0), i).assign(a);
            v2.index_axis_mut(Axis(0), i).assign(b_);
        }
        let (o1, _) = self.online_net.forward_train(&mut self.online_store, &v1, false)?;
        let (o2, _) = self.online_net.forward_train(&mut self.online_store, &v2, false)?;
        let (t1, _) = self.target_net.forward_train(&mut self.target_store, &v1, false)?;
        let (t2, _) = self.target_net.forward_train(&mut self.target_store, &v2, false)?;
        let out = symmetric_batch_loss(
            &self.pseudo_net,
            &mut self.pseudo_store,
            &o1,
            &o2,
            &t1,
            &t2,
            &masks,
            self.cfg.loss.alpha,
            false,
            false,
        )?;
        Ok(Some(out.loss))
    }
}
