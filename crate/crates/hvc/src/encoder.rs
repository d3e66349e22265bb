//! The dual-encoder architecture: a small fully-convolutional backbone,
//! 1x1-conv projection heads, an online-only predictor head, and the
//! pseudo-dynamic signal generator.
//!
//! The online encoder is `backbone -> projector -> predictor -> l2norm`;
//! the target encoder omits the predictor and is never backpropagated
//! through. The pseudo-dynamic generator consumes two feature maps
//! (channel-concatenated) and emits a 2-channel flow-like signal.

use ndarray::{concatenate, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    conv_out_size, l2norm_backward, l2norm_forward, l2norm_forward_only, relu_backward,
    relu_forward, relu_forward_only, BatchNorm2d, BnCache, Conv2d, ConvCache, L2NormCache,
    ReluCache,
};
use crate::store::ParameterStore;

/// A dense feature tensor `(C, H, W)` for one view. `normalized` records
/// whether every spatial location has already been scaled to unit length.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub normalized: bool,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, normalized: bool) -> Self {
        Self { data, normalized }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn locations(&self) -> usize {
        self.height() * self.width()
    }

    /// View as a `(C, H*W)` matrix of per-location column vectors.
    pub fn as_matrix(&self) -> Array2<f64> {
        let c = self.channels();
        let n = self.locations();
        self.data
            .clone()
            .into_shape_with_order((c, n))
            .expect("feature reshape")
    }

    /// Extracts sample `i` from a batched `(B, C, H, W)` tensor.
    pub fn from_batch(batch: &Array4<f64>, i: usize, normalized: bool) -> Self {
        Self {
            data: batch.index_axis(Axis(0), i).to_owned(),
            normalized,
        }
    }

    /// L2-normalizes each location's channel vector.
    pub fn normalize(&self) -> Self {
        let (c, h, w) = self.data.dim();
        let batched = self
            .data
            .clone()
            .into_shape_with_order((1, c, h, w))
            .expect("batch of one");
        let normed = l2norm_forward_only(&batched);
        Self {
            data: normed
                .into_shape_with_order((c, h, w))
                .expect("unbatch"),
            normalized: true,
        }
    }
}

/// Architecture hyperparameters shared by the encoders and the
/// pseudo-dynamic generator.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Output channels of each backbone block; one block = conv/BN/ReLU
    /// with stride `backbone_stride`.
    pub backbone_channels: Vec<usize>,
    pub backbone_kernel: usize,
    pub backbone_stride: usize,
    /// Hidden width of the three-layer projection heads.
    pub hidden_channels: usize,
    /// Output embedding width.
    pub embed_channels: usize,
    /// Hidden width of the pseudo-dynamic generator.
    pub pseudo_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            backbone_channels: vec![32, 64, 64],
            backbone_kernel: 3,
            backbone_stride: 2,
            hidden_channels: 64,
            embed_channels: 64,
            pseudo_hidden: 64,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetConfig {
    /// Spatial size of the feature grid produced from a `view`-sized input.
    pub fn feature_grid_for(&self, view: usize) -> usize {
        let mut s = view;
        for _ in &self.backbone_channels {
            s = conv_out_size(
                s,
                self.backbone_kernel,
                self.backbone_stride,
                self.backbone_kernel / 2,
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Projection head: conv1x1 -> BN -> ReLU -> conv1x1 -> BN -> ReLU -> conv1x1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ProjectionHead {
    convs: [Conv2d; 3],
    bns: [BatchNorm2d; 2],
}

#[derive(Debug)]
struct HeadCache {
    conv: [ConvCache; 3],
    bn: [BnCache; 2],
    relu: [ReluCache; 2],
}

impl ProjectionHead {
    fn new(prefix: &str, in_ch: usize, hidden: usize, out_ch: usize, cfg: &NetConfig) -> Self {
        let convs = [
            Conv2d::new(format!("{prefix}.0"), in_ch, hidden, 1, 1, 0),
            Conv2d::new(format!("{prefix}.1"), hidden, hidden, 1, 1, 0),
            Conv2d::new(format!("{prefix}.2"), hidden, out_ch, 1, 1, 0),
        ];
        let bns = [
            BatchNorm2d::new(format!("{prefix}.bn0"), hidden, cfg.bn_eps, cfg.bn_momentum),
            BatchNorm2d::new(format!("{prefix}.bn1"), hidden, cfg.bn_eps, cfg.bn_momentum),
        ];
        Self { convs, bns }
    }

    fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for i in 0..3 {
            self.convs[i].init_params(store, rng)?;
            if i < 2 {
                self.bns[i].init_params(store)?;
            }
        }
        Ok(())
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..3 {
            names.extend(self.convs[i].param_names());
            if i < 2 {
                names.extend(self.bns[i].param_names());
            }
        }
        names
    }

    fn forward_train(
        &self,
        store: &mut ParameterStore,
        x: &Array4<f64>,
        update_running: bool,
    ) -> Result<(Array4<f64>, HeadCache)> {
        let (y0, c0) = self.convs[0].forward(store, x)?;
        let (y1, b0) = self.bns[0].forward_train(store, &y0, update_running)?;
        let (y2, r0) = relu_forward(&y1);
        let (y3, c1) = self.convs[1].forward(store, &y2)?;
        let (y4, b1) = self.bns[1].forward_train(store, &y3, update_running)?;
        let (y5, r1) = relu_forward(&y4);
        let (y6, c2) = self.convs[2].forward(store, &y5)?;
        Ok((
            y6,
            HeadCache {
                conv: [c0, c1, c2],
                bn: [b0, b1],
                relu: [r0, r1],
            },
        ))
    }

    fn forward_eval(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let y = self.convs[0].forward_only(store, x)?;
        let y = self.bns[0].forward_eval(store, &y)?;
        let y = relu_forward_only(&y);
        let y = self.convs[1].forward_only(store, &y)?;
        let y = self.bns[1].forward_eval(store, &y)?;
        let y = relu_forward_only(&y);
        self.convs[2].forward_only(store, &y)
    }

    fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &HeadCache,
        dy: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        let d = self.convs[2].backward(store, &cache.conv[2], dy, true)?;
        let d = relu_backward(&cache.relu[1], &d);
        let d = self.bns[1].backward(store, &cache.bn[1], &d)?;
        let d = self.convs[1].backward(store, &cache.conv[1], &d, true)?;
        let d = relu_backward(&cache.relu[0], &d);
        let d = self.bns[0].backward(store, &cache.bn[0], &d)?;
        self.convs[0].backward(store, &cache.conv[0], &d, true)
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Whether an encoder carries the predictor head (online) or not (target).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    Online,
    Target,
}

#[derive(Debug, Clone)]
pub struct EncoderNet {
    role: EncoderRole,
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    projector: ProjectionHead,
    predictor: Option<ProjectionHead>,
}

pub struct EncoderCache {
    blocks: Vec<(ConvCache, BnCache, ReluCache)>,
    projector: HeadCache,
    predictor: Option<HeadCache>,
    l2: L2NormCache,
}

impl EncoderNet {
    pub fn new(cfg: &NetConfig, role: EncoderRole) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, &out_ch) in cfg.backbone_channels.iter().enumerate() {
            let conv = Conv2d::new(
                format!("backbone.{i}"),
                in_ch,
                out_ch,
                cfg.backbone_kernel,
                cfg.backbone_stride,
                cfg.backbone_kernel / 2,
            );
            let bn = BatchNorm2d::new(
                format!("backbone.bn{i}"),
                out_ch,
                cfg.bn_eps,
                cfg.bn_momentum,
            );
            blocks.push((conv, bn));
            in_ch = out_ch;
        }
        let projector = ProjectionHead::new(
            "projector",
            in_ch,
            cfg.hidden_channels,
            cfg.embed_channels,
            cfg,
        );
        let predictor = match role {
            EncoderRole::Online => Some(ProjectionHead::new(
                "predictor",
                cfg.embed_channels,
                cfg.hidden_channels,
                cfg.embed_channels,
                cfg,
            )),
            EncoderRole::Target => None,
        };
        Self {
            role,
            blocks,
            projector,
            predictor,
        }
    }

    pub fn role(&self) -> EncoderRole {
        self.role
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for (conv, bn) in &self.blocks {
            conv.init_params(store, rng)?;
            bn.init_params(store)?;
        }
        self.projector.init_params(store, rng)?;
        if let Some(p) = &self.predictor {
            p.init_params(store, rng)?;
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (conv, bn) in &self.blocks {
            names.extend(conv.param_names());
            names.extend(bn.param_names());
        }
        names.extend(self.projector.param_names());
        if let Some(p) = &self.predictor {
            names.extend(p.param_names());
        }
        names
    }

    /// Train-mode forward over a view batch. Returns the l2-normalized
    /// embedding and the caches required by [`EncoderNet::backward`].
    pub fn forward_train(
        &self,
        store: &mut ParameterStore,
        views: &Array4<f64>,
        update_running: bool,
    ) -> Result<(Array4<f64>, EncoderCache)> {
        let mut x = views.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (conv, bn) in &self.blocks {
            let (y, cc) = conv.forward(store, &x)?;
            let (y, bc) = bn.forward_train(store, &y, update_running)?;
            let (y, rc) = relu_forward(&y);
            block_caches.push((cc, bc, rc));
            x = y;
        }
        let (x, proj_cache) = self.projector.forward_train(store, &x, update_running)?;
        let (x, pred_cache) = match &self.predictor {
            Some(p) => {
                let (y, c) = p.forward_train(store, &x, update_running)?;
                (y, Some(c))
            }
            None => (x, None),
        };
        let (y, l2) = l2norm_forward(&x);
        Ok((
            y,
            EncoderCache {
                blocks: block_caches,
                projector: proj_cache,
                predictor: pred_cache,
                l2,
            },
        ))
    }

    /// Eval-mode forward: running statistics, no caches, pure function.
    pub fn forward_eval(&self, store: &ParameterStore, views: &Array4<f64>) -> Result<Array4<f64>> {
        let mut x = views.clone();
        for (conv, bn) in &self.blocks {
            let y = conv.forward_only(store, &x)?;
            let y = bn.forward_eval(store, &y)?;
            x = relu_forward_only(&y);
        }
        let mut x = self.projector.forward_eval(store, &x)?;
        if let Some(p) = &self.predictor {
            x = p.forward_eval(store, &x)?;
        }
        Ok(l2norm_forward_only(&x))
    }

    /// Backpropagates the embedding gradient into the store. The input
    /// (pixel) gradient is not materialized.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &EncoderCache,
        dy: &Array4<f64>,
    ) -> Result<()> {
        let mut d = l2norm_backward(&cache.l2, dy);
        if let (Some(p), Some(pc)) = (&self.predictor, &cache.predictor) {
            d = p.backward(store, pc, &d)?;
        }
        d = self.projector.backward(store, &cache.projector, &d)?;
        for (i, (conv, bn)) in self.blocks.iter().enumerate().rev() {
            let (cc, bc, rc) = &cache.blocks[i];
            let dr = relu_backward(rc, &d);
            let db = bn.backward(store, bc, &dr)?;
            d = conv.backward(store, cc, &db, i > 0)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pseudo-dynamic generator
// ---------------------------------------------------------------------------

/// Predicts a 2-channel flow-like signal from an ordered pair of feature
/// maps. The argument order encodes the direction: `forward(a, b)` and
/// `forward(b, a)` are the forward and backward signals.
#[derive(Debug, Clone)]
pub struct PseudoDynamicNet {
    conv_a: Conv2d,
    bn: BatchNorm2d,
    conv_b: Conv2d,
}

pub struct PseudoCache {
    conv_a: ConvCache,
    bn: BnCache,
    relu: ReluCache,
    conv_b: ConvCache,
    in_channels: usize,
}

impl PseudoDynamicNet {
    pub fn new(cfg: &NetConfig) -> Self {
        let in_ch = 2 * cfg.embed_channels;
        Self {
            conv_a: Conv2d::new("pseudo.0", in_ch, cfg.pseudo_hidden, 3, 1, 1),
            bn: BatchNorm2d::new("pseudo.bn0", cfg.pseudo_hidden, cfg.bn_eps, cfg.bn_momentum),
            conv_b: Conv2d::new("pseudo.1", cfg.pseudo_hidden, 2, 3, 1, 1),
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.conv_a.init_params(store, rng)?;
        self.bn.init_params(store)?;
        self.conv_b.init_params(store, rng)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.conv_a.param_names();
        names.extend(self.bn.param_names());
        names.extend(self.conv_b.param_names());
        names
    }

    pub fn forward_train(
        &self,
        store: &mut ParameterStore,
        fa: &Array4<f64>,
        fb: &Array4<f64>,
        update_running: bool,
    ) -> Result<(Array4<f64>, PseudoCache)> {
        if fa.dim() != fb.dim() {
            return Err(Error::shape(
                "pseudo-dynamic inputs",
                format!("{:?}", fa.dim()),
                format!("{:?}", fb.dim()),
            ));
        }
        let x = concatenate(Axis(1), &[fa.view(), fb.view()]).expect("channel concat");
        let (y, ca) = self.conv_a.forward(store, &x)?;
        let (y, cb) = self.bn.forward_train(store, &y, update_running)?;
        let (y, cr) = relu_forward(&y);
        let (y, cc) = self.conv_b.forward(store, &y)?;
        Ok((
            y,
            PseudoCache {
                conv_a: ca,
                bn: cb,
                relu: cr,
                conv_b: cc,
                in_channels: fa.dim().1,
            },
        ))
    }

    pub fn forward_eval(
        &self,
        store: &ParameterStore,
        fa: &Array4<f64>,
        fb: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        if fa.dim() != fb.dim() {
            return Err(Error::shape(
                "pseudo-dynamic inputs",
                format!("{:?}", fa.dim()),
                format!("{:?}", fb.dim()),
            ));
        }
        let x = concatenate(Axis(1), &[fa.view(), fb.view()]).expect("channel concat");
        let y = self.conv_a.forward_only(store, &x)?;
        let y = self.bn.forward_eval(store, &y)?;
        let y = relu_forward_only(&y);
        self.conv_b.forward_only(store, &y)
    }

    /// Backpropagates the signal gradient; returns the gradients of the two
    /// input feature maps in argument order.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &PseudoCache,
        dm: &Array4<f64>,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        let d = self.conv_b.backward(store, &cache.conv_b, dm, true)?;
        let d = relu_backward(&cache.relu, &d);
        let d = self.bn.backward(store, &cache.bn, &d)?;
        let d = self.conv_a.backward(store, &cache.conv_a, &d, true)?;
        let c = cache.in_channels;
        let dfa = d.slice(ndarray::s![.., ..c, .., ..]).to_owned();
        let dfb = d.slice(ndarray::s![.., c.., .., ..]).to_owned();
        Ok((dfa, dfb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> NetConfig {
        NetConfig {
            in_channels: 3,
            backbone_channels: vec![4, 6],
            backbone_kernel: 3,
            backbone_stride: 2,
            hidden_channels: 5,
            embed_channels: 6,
            pseudo_hidden: 5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    fn random_views(rng: &mut ChaCha8Rng, b: usize, view: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, 3, view, view), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn online_outputs_have_unit_norm() {
        let cfg = toy_cfg();
        let net = EncoderNet::new(&cfg, EncoderRole::Online);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.init_params(&mut store, &mut rng).unwrap();
        let x = random_views(&mut rng, 2, 8);
        let (y, _) = net.forward_train(&mut store, &x, false).unwrap();
        let (b, c, h, w) = y.dim();
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let n: f64 = (0..c).map(|ci| y[[bi, ci, hi, wi]].powi(2)).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-5, "norm {n}");
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = toy_cfg();
        let net = EncoderNet::new(&cfg, EncoderRole::Online);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        net.init_params(&mut store, &mut rng).unwrap();
        let x = random_views(&mut rng, 1, 8);
        let y1 = net.forward_eval(&store, &x).unwrap();
        let y2 = net.forward_eval(&store, &x).unwrap();
        assert_eq!(y1, y2, "identical inputs must give bit-identical outputs");
    }

    #[test]
    fn target_differs_from_online_through_predictor() {
        let cfg = toy_cfg();
        let online = EncoderNet::new(&cfg, EncoderRole::Online);
        let target = EncoderNet::new(&cfg, EncoderRole::Target);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        online.init_params(&mut store, &mut rng).unwrap();
        // Target shares backbone+projector weights with the online net.
        let target_store = store.subset_by(|n| !n.starts_with("predictor."));
        assert_eq!(target_store.len(), target.param_names().len());

        let x = random_views(&mut rng, 1, 8);
        let yo = online.forward_eval(&store, &x).unwrap();
        let yt = target.forward_eval(&target_store, &x).unwrap();
        let max_diff = yo
            .iter()
            .zip(yt.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "predictor head must change the embedding");
    }

    #[test]
    fn pseudo_output_is_two_channel_and_order_sensitive() {
        let cfg = toy_cfg();
        let net = PseudoDynamicNet::new(&cfg);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.init_params(&mut store, &mut rng).unwrap();

        let fa = Array4::from_shape_fn((2, cfg.embed_channels, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let fb = Array4::from_shape_fn((2, cfg.embed_channels, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let (mab, _) = net.forward_train(&mut store, &fa, &fb, false).unwrap();
        let (mba, _) = net.forward_train(&mut store, &fb, &fa, false).unwrap();
        assert_eq!(mab.dim(), (2, 2, 3, 3));
        let max_diff = mab
            .iter()
            .zip(mba.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "argument order is the signal direction");
    }

    #[test]
    fn feature_grid_matches_conv_arithmetic() {
        let cfg = NetConfig::default();
        assert_eq!(cfg.feature_grid_for(64), 8);
        assert_eq!(toy_cfg().feature_grid_for(8), 2);
    }
}
