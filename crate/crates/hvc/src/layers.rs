//! Differentiable building blocks: 2-D convolution, batch norm, ReLU and
//! per-location l2 normalization, each with a hand-derived backward pass.
//!
//! All activations are batched `(B, C, H, W)` tensors in f64. Layers do not
//! own their weights; they read and write a [`ParameterStore`] through the
//! parameter names fixed at construction. Convolutions run im2col + matmul
//! and parallelize over the batch; gradient reductions always happen in
//! sample order so results are bit-reproducible regardless of thread count.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Ix1, Ix4};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::{Param, ParameterStore};

/// Spatial output size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// A 2-D cross-correlation layer. `weight` has shape
/// `(out_ch, in_ch, k, k)`, `bias` shape `(out_ch)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Cached forward inputs needed by the backward pass.
#[derive(Debug)]
pub struct ConvCache {
    input: Array4<f64>,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Registers Kaiming-uniform (fan-in) weights and uniform biases.
    /// A nonzero bias keeps per-location embeddings away from the exact
    /// zero vector even when every hidden channel is ReLU-dead there.
    pub fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = vec![self.out_ch, self.in_ch, self.kernel, self.kernel];
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = ndarray::ArrayD::from_shape_vec(shape, data).expect("conv weight shape");
        store.insert(self.weight_name(), Param::new(weight, true))?;
        let b_bound = 1.0 / fan_in.sqrt();
        let bias: Vec<f64> = (0..self.out_ch)
            .map(|_| rng.gen_range(-b_bound..b_bound))
            .collect();
        store.insert(
            self.bias_name(),
            Param::new(
                ndarray::ArrayD::from_shape_vec(vec![self.out_ch], bias).expect("bias shape"),
                true,
            ),
        )?;
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.weight_name(), self.bias_name()]
    }

    /// Weight viewed as a `(out_ch, in_ch*k*k)` matrix.
    fn weight_matrix<'a>(&self, store: &'a ParameterStore) -> ArrayView2<'a, f64> {
        let w = store.value(&self.weight_name());
        w.view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight rank")
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .expect("conv weight reshape")
    }

    pub fn forward(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<(Array4<f64>, ConvCache)> {
        let y = self.forward_only(store, x)?;
        Ok((
            y,
            ConvCache {
                input: x.clone(),
            },
        ))
    }

    /// Forward pass without recording a cache (evaluation path).
    pub fn forward_only(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::shape(
                format!("{} input channels", self.name),
                self.in_ch,
                c,
            ));
        }
        let oh = conv_out_size(h, self.kernel, self.stride, self.padding);
        let ow = conv_out_size(w, self.kernel, self.stride, self.padding);
        let wmat = self.weight_matrix(store);
        let bias = store
            .value(&self.bias_name())
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias rank");

        let samples: Vec<Array3<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let col = im2col(
                    &x.index_axis(Axis(0), i),
                    self.kernel,
                    self.stride,
                    self.padding,
                    oh,
                    ow,
                );
                // (out, Ckk) . (Ckk, OHW) -> (out, OHW)
                let mut y = wmat.dot(&col.t());
                for (mut row, &bv) in y.rows_mut().into_iter().zip(bias.iter()) {
                    row += bv;
                }
                // dot() may hand back a column-major result; reshaping
                // requires standard layout.
                y.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((self.out_ch, oh, ow))
                    .expect("conv output reshape")
            })
            .collect();

        let mut out = Array4::zeros((b, self.out_ch, oh, ow));
        for (i, s) in samples.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&s);
        }
        Ok(out)
    }

    /// Backpropagates `dy`, accumulating weight/bias gradients in the store
    /// and returning the input gradient (skipped when `need_dx` is false).
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &ConvCache,
        dy: &Array4<f64>,
        need_dx: bool,
    ) -> Result<Array4<f64>> {
        let x = &cache.input;
        let (b, _, h, w) = x.dim();
        let (_, _, oh, ow) = dy.dim();
        let ckk = self.in_ch * self.kernel * self.kernel;
        let wmat = self.weight_matrix(store).to_owned();

        struct SampleGrad {
            dw: Array2<f64>,
            db: Array1<f64>,
            dx: Option<Array3<f64>>,
        }

        let grads: Vec<SampleGrad> = (0..b)
            .into_par_iter()
            .map(|i| {
                let col = im2col(
                    &x.index_axis(Axis(0), i),
                    self.kernel,
                    self.stride,
                    self.padding,
                    oh,
                    ow,
                );
                let dyi = dy
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((self.out_ch, oh * ow))
                    .expect("dy reshape");
                let dw = dyi.dot(&col); // (out, Ckk)
                let db = dyi.sum_axis(Axis(1));
                let dx = if need_dx {
                    let dcol = dyi.t().dot(&wmat); // (OHW, Ckk)
                    Some(col2im(
                        &dcol,
                        self.in_ch,
                        h,
                        w,
                        self.kernel,
                        self.stride,
                        self.padding,
                        oh,
                        ow,
                    ))
                } else {
                    None
                };
                SampleGrad { dw, db, dx }
            })
            .collect();

        let mut dx_out = if need_dx {
            Array4::zeros((b, self.in_ch, h, w))
        } else {
            Array4::zeros((0, 0, 0, 0))
        };
        let mut dw_total = Array2::<f64>::zeros((self.out_ch, ckk));
        let mut db_total = Array1::<f64>::zeros(self.out_ch);
        for (i, g) in grads.into_iter().enumerate() {
            dw_total += &g.dw;
            db_total += &g.db;
            if let Some(dx) = g.dx {
                dx_out.index_axis_mut(Axis(0), i).assign(&dx);
            }
        }

        {
            let wp = store.get_mut(&self.weight_name());
            let flat = dw_total
                .into_shape_with_order(vec![self.out_ch, self.in_ch, self.kernel, self.kernel])
                .expect("dw reshape");
            wp.grad += &flat;
        }
        {
            let bp = store.get_mut(&self.bias_name());
            bp.grad += &db_total.into_dyn();
        }
        Ok(dx_out)
    }
}

/// Unfolds one sample into a `(out_h*out_w, in_ch*k*k)` patch matrix.
fn im2col(
    x: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((out_h * out_w, c * k * k));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = oy * out_w + ox;
            let mut col_row = col.row_mut(row);
            for ci in 0..c {
                for dy in 0..k {
                    let sy = (oy * stride + dy) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = (ox * stride + dx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col_row[(ci * k + dy) * k + dx] = x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-gradient matrix back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = dcol.row(oy * out_w + ox);
            for ci in 0..c {
                for dy in 0..k {
                    let sy = (oy * stride + dy) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx_k in 0..k {
                        let sx = (ox * stride + dx_k) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[[ci, sy as usize, sx as usize]] += row[(ci * k + dy) * k + dx_k];
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over `(B, H, W)`.
///
/// Training mode normalizes by batch statistics; evaluation mode uses the
/// running statistics stored (non-trainable) in the parameter store. The
/// running update uses the biased batch variance. The `eps` term keeps the
/// inverse standard deviation finite for any batch, so a degenerate batch
/// never aborts normalization.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            name: name.into(),
            channels,
            eps,
            momentum,
        }
    }

    fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }
    fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }
    fn rmean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }
    fn rvar_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn init_params(&self, store: &mut ParameterStore) -> Result<()> {
        let c = self.channels;
        store.insert(
            self.gamma_name(),
            Param::new(ndarray::ArrayD::ones(vec![c]), true),
        )?;
        store.insert(
            self.beta_name(),
            Param::new(ndarray::ArrayD::zeros(vec![c]), true),
        )?;
        store.insert(
            self.rmean_name(),
            Param::new(ndarray::ArrayD::zeros(vec![c]), false),
        )?;
        store.insert(
            self.rvar_name(),
            Param::new(ndarray::ArrayD::ones(vec![c]), false),
        )?;
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![
            self.gamma_name(),
            self.beta_name(),
            self.rmean_name(),
            self.rvar_name(),
        ]
    }

    /// Train-mode forward. Running statistics are committed only when
    /// `update_running` is set, so gradient checks can re-run the forward
    /// pass without side effects.
    pub fn forward_train(
        &self,
        store: &mut ParameterStore,
        x: &Array4<f64>,
        update_running: bool,
    ) -> Result<(Array4<f64>, BnCache)> {
        let (b, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::shape(
                format!("{} channels", self.name),
                self.channels,
                c,
            ));
        }
        let m = (b * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let slice = x.index_axis(Axis(1), ci);
            let mu = slice.sum() / m;
            let v = slice.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / m;
            mean[ci] = mu;
            var[ci] = v;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());

        let mut xhat = x.clone();
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            xhat.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|e| (e - mu) * is);
        }
        let gamma = store.value(&self.gamma_name()).clone();
        let beta = store.value(&self.beta_name()).clone();
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = gamma[ci];
            let bta = beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|e| g * e + bta);
        }

        if update_running {
            let mom = self.momentum;
            let rm = store.get_mut(&self.rmean_name());
            rm.value
                .iter_mut()
                .zip(mean.iter())
                .for_each(|(r, &mu)| *r = (1.0 - mom) * *r + mom * mu);
            let rv = store.get_mut(&self.rvar_name());
            rv.value
                .iter_mut()
                .zip(var.iter())
                .for_each(|(r, &v)| *r = (1.0 - mom) * *r + mom * v);
        }

        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Eval-mode forward using running statistics only.
    pub fn forward_eval(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (_, c, _, _) = x.dim();
        if c != self.channels {
            return Err(Error::shape(
                format!("{} channels", self.name),
                self.channels,
                c,
            ));
        }
        let gamma = store.value(&self.gamma_name());
        let beta = store.value(&self.beta_name());
        let rm = store.value(&self.rmean_name());
        let rv = store.value(&self.rvar_name());
        let mut y = x.clone();
        for ci in 0..c {
            let scale = gamma[ci] / (rv[ci] + self.eps).sqrt();
            let shift = beta[ci] - rm[ci] * scale;
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|e| e * scale + shift);
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &BnCache,
        dy: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        let (b, c, h, w) = dy.dim();
        let m = (b * h * w) as f64;
        let gamma = store.value(&self.gamma_name()).clone();

        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let mut dx = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xhatc = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy: f64 = dyc.sum();
            let sum_dy_xhat: f64 = dyc.iter().zip(xhatc.iter()).map(|(&d, &xh)| d * xh).sum();
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;

            let coeff = gamma[ci] * cache.inv_std[ci];
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xhatc)
                .for_each(|o, &d, &xh| {
                    *o = coeff * (d - mean_dy - xh * mean_dy_xhat);
                });
        }

        store.get_mut(&self.gamma_name()).grad += &dgamma.into_dyn();
        store.get_mut(&self.beta_name()).grad += &dbeta.into_dyn();
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReluCache {
    positive: Array4<f64>,
}

pub fn relu_forward(x: &Array4<f64>) -> (Array4<f64>, ReluCache) {
    let y = x.mapv(|v| v.max(0.0));
    let positive = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (y, ReluCache { positive })
}

pub fn relu_forward_only(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(cache: &ReluCache, dy: &Array4<f64>) -> Array4<f64> {
    dy * &cache.positive
}

// ---------------------------------------------------------------------------
// Per-location l2 normalization
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct L2NormCache {
    y: Array4<f64>,
    // Per location: 1 / (norm + eps) and the raw norm.
    scale: Array3<f64>,
    norm: Array3<f64>,
}

pub const L2_EPS: f64 = 1e-12;

/// Normalizes every spatial location's channel vector to unit length,
/// guarding zero vectors with a small epsilon in the denominator.
pub fn l2norm_forward(x: &Array4<f64>) -> (Array4<f64>, L2NormCache) {
    let (b, c, h, w) = x.dim();
    let mut norm = Array3::zeros((b, h, w));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut s = 0.0;
                for ci in 0..c {
                    let v = x[[bi, ci, hi, wi]];
                    s += v * v;
                }
                norm[[bi, hi, wi]] = s.sqrt();
            }
        }
    }
    let scale = norm.mapv(|n| 1.0 / (n + L2_EPS));
    let mut y = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    y[[bi, ci, hi, wi]] *= scale[[bi, hi, wi]];
                }
            }
        }
    }
    (
        y.clone(),
        L2NormCache { y, scale, norm },
    )
}

pub fn l2norm_forward_only(x: &Array4<f64>) -> Array4<f64> {
    l2norm_forward(x).0
}

/// Backward pass of the normalization: `dx = s*dy - (dy . y) * y / norm`,
/// evaluated per location. An exactly-zero input vector falls back to the
/// linear scaling branch.
pub fn l2norm_backward(cache: &L2NormCache, dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let s = cache.scale[[bi, hi, wi]];
                let n = cache.norm[[bi, hi, wi]];
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += dy[[bi, ci, hi, wi]] * cache.y[[bi, ci, hi, wi]];
                }
                if n > 0.0 {
                    let k = dot / n;
                    for ci in 0..c {
                        dx[[bi, ci, hi, wi]] =
                            s * dy[[bi, ci, hi, wi]] - k * cache.y[[bi, ci, hi, wi]];
                    }
                } else {
                    for ci in 0..c {
                        dx[[bi, ci, hi, wi]] = s * dy[[bi, ci, hi, wi]];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_x(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let conv = Conv2d::new("c", 2, 2, 1, 1, 0);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        conv.init_params(&mut store, &mut rng).unwrap();
        // 1x1 identity kernel per channel, zero bias.
        let w = store.get_mut("c.weight");
        w.value.fill(0.0);
        w.value[[0, 0, 0, 0]] = 1.0;
        w.value[[1, 1, 0, 0]] = 1.0;
        store.get_mut("c.bias").value.fill(0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_x(&mut rng, (2, 2, 3, 3));
        let y = conv.forward_only(&store, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_conv_emits_bias() {
        let conv = Conv2d::new("c", 3, 4, 3, 1, 1);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        conv.init_params(&mut store, &mut rng).unwrap();
        for (i, b) in store.get_mut("c.bias").value.iter_mut().enumerate() {
            *b = i as f64 + 0.5;
        }
        let x = Array4::zeros((1, 3, 5, 5));
        let y = conv.forward_only(&store, &x).unwrap();
        for ci in 0..4 {
            for v in y.index_axis(Axis(1), ci).iter() {
                assert_eq!(*v, ci as f64 + 0.5);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_rejected() {
        let conv = Conv2d::new("c", 3, 4, 3, 1, 1);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        conv.init_params(&mut store, &mut rng).unwrap();
        let x = Array4::zeros((1, 2, 5, 5));
        assert!(matches!(
            conv.forward_only(&store, &x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        let bn = BatchNorm2d::new("bn", 2, 1e-5, 0.1);
        let mut store = ParameterStore::new();
        bn.init_params(&mut store).unwrap();
        // Build an input that is exactly zero-mean unit-variance per channel.
        let vals = [-1.5, -0.5, 0.5, 1.5];
        let scale = (vals.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        let mut x = Array4::zeros((1, 2, 2, 2));
        for ci in 0..2 {
            for (i, v) in vals.iter().enumerate() {
                x[[0, ci, i / 2, i % 2]] = v / scale;
            }
        }
        let (y, _) = bn.forward_train(&mut store, &x, false).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn batchnorm_zero_gamma_emits_beta() {
        let bn = BatchNorm2d::new("bn", 3, 1e-5, 0.1);
        let mut store = ParameterStore::new();
        bn.init_params(&mut store).unwrap();
        store.get_mut("bn.gamma").value.fill(0.0);
        store.get_mut("bn.beta").value.assign(
            &ndarray::ArrayD::from_shape_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_x(&mut rng, (2, 3, 4, 4));
        let (y, _) = bn.forward_train(&mut store, &x, false).unwrap();
        for ci in 0..3 {
            for v in y.index_axis(Axis(1), ci).iter() {
                assert_abs_diff_eq!(*v, (ci + 1) as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn relu_values() {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        let (y, _) = relu_forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 0, 1]], 2.0);
    }

    #[test]
    fn l2norm_three_four_five() {
        let x = Array4::from_shape_vec((1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        let y = l2norm_forward_only(&x);
        assert_abs_diff_eq!(y[[0, 0, 0, 0]], 0.6, epsilon = 1e-9);
        assert_abs_diff_eq!(y[[0, 1, 0, 0]], 0.8, epsilon = 1e-9);
    }

    #[test]
    fn l2norm_unit_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_x(&mut rng, (2, 5, 3, 3));
        let y = l2norm_forward_only(&x);
        let (b, _, h, w) = y.dim();
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let n: f64 = (0..5).map(|c| y[[bi, c, hi, wi]].powi(2)).sum::<f64>().sqrt();
                    assert_abs_diff_eq!(n, 1.0, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn running_stats_update_only_when_committed() {
        let bn = BatchNorm2d::new("bn", 2, 1e-5, 0.1);
        let mut store = ParameterStore::new();
        bn.init_params(&mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(&mut rng, (2, 2, 3, 3));

        let before = store.value("bn.running_mean").clone();
        bn.forward_train(&mut store, &x, false).unwrap();
        assert_eq!(store.value("bn.running_mean"), &before);
        bn.forward_train(&mut store, &x, true).unwrap();
        assert_ne!(store.value("bn.running_mean"), &before);
    }
}
