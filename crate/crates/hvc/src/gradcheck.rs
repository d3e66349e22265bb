//! Finite-difference verification of every hand-derived backward pass.
//!
//! Each check builds a random instance, computes analytic gradients through
//! the layer (or the whole symmetric hybrid loss), then compares them
//! against central finite differences of a scalar readout at 64-bit
//! precision. Errors are aggregate vector relative errors with a unit
//! floor, `||a - n|| / max(||a||, ||n||, 1)`: relative for large
//! gradients, absolute for small ones. The floor matters for parameters
//! whose true gradient is identically zero (a conv bias feeding a batch
//! norm), where both sides carry nothing but rounding noise.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderNet, EncoderRole, NetConfig, PseudoDynamicNet};
use crate::geometry::{distance_matrix, positive_mask, warp_coords, CropConfig, PositiveMask};
use crate::layers::{
    l2norm_backward, l2norm_forward, relu_backward, relu_forward, BatchNorm2d, Conv2d,
};
use crate::loss::symmetric_batch_loss;
use crate::store::ParameterStore;

pub const LAYER_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;
const LAYER_STEP: f64 = 1e-5;
const END_TO_END_STEP: f64 = 1e-6;

/// Outcome of one gradient check family.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{:<22} {:>3} trials  max rel err {:.3e}  (tol {:.0e})  {}",
            self.name,
            self.trials,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    let an = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dn = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    dn / an.max(nn).max(1.0)
}

fn dot4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn random4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize), lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.gen_range(lo..hi))
}

/// Central finite differences of `eval` with respect to every entry of the
/// named store parameter.
fn fd_store_param(
    store: &mut ParameterStore,
    name: &str,
    step: f64,
    mut eval: impl FnMut(&mut ParameterStore) -> f64,
) -> Vec<f64> {
    let n = store.value(name).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = store.get(name).value.as_slice().unwrap()[i];
        store.get_mut(name).value.as_slice_mut().unwrap()[i] = orig + step;
        let plus = eval(store);
        store.get_mut(name).value.as_slice_mut().unwrap()[i] = orig - step;
        let minus = eval(store);
        store.get_mut(name).value.as_slice_mut().unwrap()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// Central finite differences of `eval` with respect to every entry of an
/// input tensor.
fn fd_input(
    x: &mut Array4<f64>,
    step: f64,
    mut eval: impl FnMut(&Array4<f64>) -> f64,
) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + step;
        let plus = eval(x);
        x.as_slice_mut().unwrap()[i] = orig - step;
        let minus = eval(x);
        x.as_slice_mut().unwrap()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

fn check_conv_trial(rng: &mut ChaCha8Rng) -> f64 {
    let b = rng.gen_range(1..=2);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let stride = rng.gen_range(1..=2);
    let h = rng.gen_range(3..=5);
    let w = rng.gen_range(3..=5);
    let conv = Conv2d::new("c", cin, cout, k, stride, k / 2);
    let mut store = ParameterStore::new();
    conv.init_params(&mut store, rng).unwrap();
    let mut x = random4(rng, (b, cin, h, w), -1.0, 1.0);

    let (y, cache) = conv.forward(&store, &x).unwrap();
    let readout = random4(rng, y.dim(), -1.0, 1.0);
    store.zero_grads();
    let dx = conv.backward(&mut store, &cache, &readout, true).unwrap();

    let mut worst: f64 = 0.0;
    for name in ["c.weight", "c.bias"] {
        let analytic: Vec<f64> = store.get(name).grad.iter().copied().collect();
        let numeric = fd_store_param(&mut store, name, LAYER_STEP, |s| {
            dot4(&conv.forward_only(s, &x).unwrap(), &readout)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let analytic_dx: Vec<f64> = dx.iter().copied().collect();
    let numeric_dx = fd_input(&mut x, LAYER_STEP, |xv| {
        dot4(&conv.forward_only(&store, xv).unwrap(), &readout)
    });
    worst.max(rel_err(&analytic_dx, &numeric_dx))
}

fn check_batchnorm_trial(rng: &mut ChaCha8Rng) -> f64 {
    let b = rng.gen_range(2..=3);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=4);
    let w = rng.gen_range(2..=4);
    let bn = BatchNorm2d::new("bn", c, 1e-5, 0.1);
    let mut store = ParameterStore::new();
    bn.init_params(&mut store).unwrap();
    // Move gamma/beta off their init values so the check is not trivial.
    for v in store.get_mut("bn.gamma").value.iter_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    for v in store.get_mut("bn.beta").value.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let mut x = random4(rng, (b, c, h, w), -1.0, 1.0);

    let (y, cache) = bn.forward_train(&mut store, &x, false).unwrap();
    let readout = random4(rng, y.dim(), -1.0, 1.0);
    store.zero_grads();
    let dx = bn.backward(&mut store, &cache, &readout).unwrap();

    let mut worst: f64 = 0.0;
    for name in ["bn.gamma", "bn.beta"] {
        let analytic: Vec<f64> = store.get(name).grad.iter().copied().collect();
        let numeric = fd_store_param(&mut store, name, LAYER_STEP, |s| {
            dot4(&bn.forward_train(s, &x, false).unwrap().0, &readout)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let analytic_dx: Vec<f64> = dx.iter().copied().collect();
    let numeric_dx = fd_input(&mut x, LAYER_STEP, |xv| {
        dot4(&bn.forward_train(&mut store, xv, false).unwrap().0, &readout)
    });
    worst.max(rel_err(&analytic_dx, &numeric_dx))
}

fn check_relu_trial(rng: &mut ChaCha8Rng) -> f64 {
    let dim = (2, 2, rng.gen_range(2..=4), rng.gen_range(2..=4));
    // Inputs bounded away from the kink at zero.
    let mut x = Array4::from_shape_fn(dim, |_| {
        let mag = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let (y, cache) = relu_forward(&x);
    let readout = random4(rng, y.dim(), -1.0, 1.0);
    let dx = relu_backward(&cache, &readout);
    let analytic: Vec<f64> = dx.iter().copied().collect();
    let numeric = fd_input(&mut x, LAYER_STEP, |xv| dot4(&relu_forward(xv).0, &readout));
    rel_err(&analytic, &numeric)
}

fn check_l2norm_trial(rng: &mut ChaCha8Rng) -> f64 {
    let dim = (
        rng.gen_range(1..=2),
        rng.gen_range(2..=4),
        rng.gen_range(2..=3),
        rng.gen_range(2..=3),
    );
    let mut x = random4(rng, dim, -1.0, 1.0);
    let (y, cache) = l2norm_forward(&x);
    let readout = random4(rng, y.dim(), -1.0, 1.0);
    let dx = l2norm_backward(&cache, &readout);
    let analytic: Vec<f64> = dx.iter().copied().collect();
    let numeric = fd_input(&mut x, LAYER_STEP, |xv| dot4(&l2norm_forward(xv).0, &readout));
    rel_err(&analytic, &numeric)
}

fn check_pseudo_trial(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = NetConfig {
        in_channels: 3,
        backbone_channels: vec![4],
        backbone_kernel: 3,
        backbone_stride: 2,
        hidden_channels: 3,
        embed_channels: rng.gen_range(2..=4),
        pseudo_hidden: rng.gen_range(2..=4),
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    };
    let net = PseudoDynamicNet::new(&cfg);
    let mut store = ParameterStore::new();
    net.init_params(&mut store, rng).unwrap();
    let dim = (2, cfg.embed_channels, 3, 3);
    let mut fa = random4(rng, dim, -1.0, 1.0);
    let mut fb = random4(rng, dim, -1.0, 1.0);

    let (y, cache) = net.forward_train(&mut store, &fa, &fb, false).unwrap();
    let readout = random4(rng, y.dim(), -1.0, 1.0);
    store.zero_grads();
    let (dfa, dfb) = net.backward(&mut store, &cache, &readout).unwrap();

    let mut worst: f64 = 0.0;
    let param_names: Vec<String> = net
        .param_names()
        .into_iter()
        .filter(|n| store.get(n).trainable)
        .collect();
    for name in &param_names {
        let analytic: Vec<f64> = store.get(name).grad.iter().copied().collect();
        let numeric = fd_store_param(&mut store, name, LAYER_STEP, |s| {
            dot4(
                &s_eval_pseudo(&net, s, &fa, &fb),
                &readout,
            )
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let analytic_dfa: Vec<f64> = dfa.iter().copied().collect();
    let numeric_dfa = fd_input(&mut fa, LAYER_STEP, |v| {
        dot4(&s_eval_pseudo(&net, &mut store, v, &fb), &readout)
    });
    worst = worst.max(rel_err(&analytic_dfa, &numeric_dfa));
    let analytic_dfb: Vec<f64> = dfb.iter().copied().collect();
    let numeric_dfb = fd_input(&mut fb, LAYER_STEP, |v| {
        dot4(&s_eval_pseudo(&net, &mut store, &fa, v), &readout)
    });
    worst.max(rel_err(&analytic_dfb, &numeric_dfb))
}

fn s_eval_pseudo(
    net: &PseudoDynamicNet,
    store: &mut ParameterStore,
    fa: &Array4<f64>,
    fb: &Array4<f64>,
) -> Array4<f64> {
    net.forward_train(store, fa, fb, false).unwrap().0
}

/// The full training objective as a pure function of the parameter stores,
/// matching the batched path the trainer runs.
struct EndToEndInstance {
    online_net: EncoderNet,
    target_net: EncoderNet,
    pseudo_net: PseudoDynamicNet,
    online_store: ParameterStore,
    target_store: ParameterStore,
    pseudo_store: ParameterStore,
    v1: Array4<f64>,
    v2: Array4<f64>,
    masks: Vec<PositiveMask>,
    alpha: f64,
}

impl EndToEndInstance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let cfg = NetConfig {
            in_channels: 3,
            backbone_channels: vec![3, 4],
            backbone_kernel: 3,
            backbone_stride: 2,
            hidden_channels: 3,
            embed_channels: 4,
            pseudo_hidden: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        let online_net = EncoderNet::new(&cfg, EncoderRole::Online);
        let target_net = EncoderNet::new(&cfg, EncoderRole::Target);
        let pseudo_net = PseudoDynamicNet::new(&cfg);
        let mut online_store = ParameterStore::new();
        online_net.init_params(&mut online_store, rng).unwrap();
        let mut pseudo_store = ParameterStore::new();
        pseudo_net.init_params(&mut pseudo_store, rng).unwrap();
        let target_store = online_store.subset_by(|n| !n.starts_with("predictor."));

        let batch = 2;
        let view = 8;
        let grid = cfg.feature_grid_for(view);
        let v1 = random4(rng, (batch, 3, view, view), 0.0, 1.0);
        let v2 = random4(rng, (batch, 3, view, view), 0.0, 1.0);

        let crop_cfg = CropConfig {
            min_overlap: 0.3,
            view_size: view,
            ..CropConfig::default()
        };
        let mut masks = Vec::new();
        for _ in 0..batch {
            let (c1, c2) =
                crate::geometry::sample_crop_pair(32, 32, rng, &crop_cfg).expect("crop pair");
            let g1 = warp_coords(&c1, grid, grid, 32, 32);
            let g2 = warp_coords(&c2, grid, grid, 32, 32);
            masks.push(positive_mask(&distance_matrix(&g1, &g2).unwrap(), 0.5));
        }

        Self {
            online_net,
            target_net,
            pseudo_net,
            online_store,
            target_store,
            pseudo_store,
            v1,
            v2,
            masks,
            alpha: 1.0,
        }
    }

    fn loss(&mut self) -> f64 {
        let (o1, _) = self
            .online_net
            .forward_train(&mut self.online_store, &self.v1, false)
            .unwrap();
        let (o2, _) = self
            .online_net
            .forward_train(&mut self.online_store, &self.v2, false)
            .unwrap();
        let (t1, _) = self
            .target_net
            .forward_train(&mut self.target_store, &self.v1, false)
            .unwrap();
        let (t2, _) = self
            .target_net
            .forward_train(&mut self.target_store, &self.v2, false)
            .unwrap();
        symmetric_batch_loss(
            &self.pseudo_net,
            &mut self.pseudo_store,
            &o1,
            &o2,
            &t1,
            &t2,
            &self.masks,
            self.alpha,
            false,
            false,
        )
        .unwrap()
        .loss
        .total
    }

    /// Analytic gradients of the loss for every trainable online and
    /// pseudo parameter, via the hand-derived backward passes.
    fn analytic_grads(&mut self) -> (Vec<(String, Vec<f64>)>, Vec<(String, Vec<f64>)>) {
        self.online_store.zero_grads();
        self.pseudo_store.zero_grads();
        let (o1, c1) = self
            .online_net
            .forward_train(&mut self.online_store, &self.v1, false)
            .unwrap();
        let (o2, c2) = self
            .online_net
            .forward_train(&mut self.online_store, &self.v2, false)
            .unwrap();
        let (t1, _) = self
            .target_net
            .forward_train(&mut self.target_store, &self.v1, false)
            .unwrap();
        let (t2, _) = self
            .target_net
            .forward_train(&mut self.target_store, &self.v2, false)
            .unwrap();
        let out = symmetric_batch_loss(
            &self.pseudo_net,
            &mut self.pseudo_store,
            &o1,
            &o2,
            &t1,
            &t2,
            &self.masks,
            self.alpha,
            false,
            true,
        )
        .unwrap();
        self.online_net
            .backward(&mut self.online_store, &c1, &out.d_o1)
            .unwrap();
        self.online_net
            .backward(&mut self.online_store, &c2, &out.d_o2)
            .unwrap();

        let collect = |store: &ParameterStore| {
            store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, p)| (n.clone(), p.grad.iter().copied().collect::<Vec<f64>>()))
                .collect::<Vec<_>>()
        };
        (collect(&self.online_store), collect(&self.pseudo_store))
    }
}

fn check_end_to_end_trial(rng: &mut ChaCha8Rng) -> f64 {
    let mut inst = EndToEndInstance::random(rng);
    let (online_grads, pseudo_grads) = inst.analytic_grads();

    let mut worst: f64 = 0.0;
    for (name, analytic) in &online_grads {
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = inst.online_store.get(name).value.as_slice().unwrap()[i];
            inst.online_store.get_mut(name).value.as_slice_mut().unwrap()[i] =
                orig + END_TO_END_STEP;
            let plus = inst.loss();
            inst.online_store.get_mut(name).value.as_slice_mut().unwrap()[i] =
                orig - END_TO_END_STEP;
            let minus = inst.loss();
            inst.online_store.get_mut(name).value.as_slice_mut().unwrap()[i] = orig;
            numeric.push((plus - minus) / (2.0 * END_TO_END_STEP));
        }
        worst = worst.max(rel_err(analytic, &numeric));
    }
    for (name, analytic) in &pseudo_grads {
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = inst.pseudo_store.get(name).value.as_slice().unwrap()[i];
            inst.pseudo_store.get_mut(name).value.as_slice_mut().unwrap()[i] =
                orig + END_TO_END_STEP;
            let plus = inst.loss();
            inst.pseudo_store.get_mut(name).value.as_slice_mut().unwrap()[i] =
                orig - END_TO_END_STEP;
            let minus = inst.loss();
            inst.pseudo_store.get_mut(name).value.as_slice_mut().unwrap()[i] = orig;
            numeric.push((plus - minus) / (2.0 * END_TO_END_STEP));
        }
        worst = worst.max(rel_err(analytic, &numeric));
    }
    worst
}

fn run_trials(
    name: &str,
    seed: u64,
    trials: usize,
    tolerance: f64,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> GradCheckReport {
    let mut max_rel_err: f64 = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        max_rel_err = max_rel_err.max(trial(&mut rng));
    }
    GradCheckReport {
        name: name.to_string(),
        trials,
        max_rel_err,
        tolerance,
    }
}

/// Per-layer finite-difference checks: conv, batch norm, ReLU, l2norm and
/// the pseudo-dynamic generator.
pub fn run_layer_checks(seed: u64, trials: usize) -> Vec<GradCheckReport> {
    vec![
        run_trials("conv2d", seed, trials, LAYER_TOLERANCE, check_conv_trial),
        run_trials(
            "batchnorm2d",
            seed.wrapping_add(1000),
            trials,
            LAYER_TOLERANCE,
            check_batchnorm_trial,
        ),
        run_trials(
            "relu",
            seed.wrapping_add(2000),
            trials,
            LAYER_TOLERANCE,
            check_relu_trial,
        ),
        run_trials(
            "l2norm",
            seed.wrapping_add(3000),
            trials,
            LAYER_TOLERANCE,
            check_l2norm_trial,
        ),
        run_trials(
            "pseudo_dynamic",
            seed.wrapping_add(4000),
            trials,
            LAYER_TOLERANCE,
            check_pseudo_trial,
        ),
    ]
}

/// Finite-difference check of the full symmetric hybrid loss with respect
/// to every online and pseudo parameter.
pub fn run_end_to_end_check(seed: u64, trials: usize) -> GradCheckReport {
    run_trials(
        "symmetric_hybrid_loss",
        seed.wrapping_add(5000),
        trials,
        END_TO_END_TOLERANCE,
        check_end_to_end_trial,
    )
}

/// The whole suite: all layer checks plus the end-to-end check.
pub fn run_full_suite(seed: u64, trials: usize) -> Vec<GradCheckReport> {
    let mut reports = run_layer_checks(seed, trials);
    reports.push(run_end_to_end_check(seed, trials));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_gradients_match_finite_differences() {
        let r = run_trials("conv2d", 42, 20, LAYER_TOLERANCE, check_conv_trial);
        assert!(r.passed(), "{}", r.summary_line());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let r = run_trials("batchnorm2d", 43, 20, LAYER_TOLERANCE, check_batchnorm_trial);
        assert!(r.passed(), "{}", r.summary_line());
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        let r = run_trials("relu", 44, 20, LAYER_TOLERANCE, check_relu_trial);
        assert!(r.passed(), "{}", r.summary_line());
    }

    #[test]
    fn l2norm_gradients_match_finite_differences() {
        let r = run_trials("l2norm", 45, 20, LAYER_TOLERANCE, check_l2norm_trial);
        assert!(r.passed(), "{}", r.summary_line());
    }

    #[test]
    fn pseudo_generator_gradients_match_finite_differences() {
        let r = run_trials("pseudo", 46, 20, LAYER_TOLERANCE, check_pseudo_trial);
        assert!(r.passed(), "{}", r.summary_line());
    }

    #[test]
    fn end_to_end_loss_gradients_match_finite_differences() {
        let r = run_trials(
            "end_to_end",
            47,
            3,
            END_TO_END_TOLERANCE,
            check_end_to_end_trial,
        );
        assert!(r.passed(), "{}", r.summary_line());
    }
}
