//! Crop-pair sampling and the coordinate machinery that supervises
//! correspondence learning.
//!
//! Two overlapping crops of one image play the role of two consecutive
//! video frames. Every feature-grid cell of a crop is warped back to
//! normalized original-image coordinates; cells of the two crops that land
//! within a positive radius of each other form the positive pairs for the
//! loss.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`, stored channel-first (3, H, W).
#[derive(Debug, Clone)]
pub struct ImageBuffer {
    data: Array3<f64>,
}

impl ImageBuffer {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let shape = data.shape();
        if shape[0] != 3 {
            return Err(Error::shape("ImageBuffer channels", 3, shape[0]));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Config(
                "image values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// A crop rectangle in original-image pixels plus the size it is resized to.
///
/// The rectangle is half-open: pixels `x0..x1` by `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl CropSpec {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// Normalized original-image coordinates of every feature cell of a crop.
///
/// `xs` is normalized by source width, `ys` by source height, both in `[0,1]`.
#[derive(Debug, Clone)]
pub struct GridCoords {
    pub xs: Array2<f64>,
    pub ys: Array2<f64>,
}

impl GridCoords {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Pairwise Euclidean distances between the cells of two grids, over
/// flattened (row-major) cell indices.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
}

/// Binary mask of positive cell pairs: `A(i,j) = 1` iff `D(i,j) <= r`.
#[derive(Debug, Clone)]
pub struct PositiveMask {
    pub values: Array2<f64>,
    pub r: f64,
    /// Number of ones; the loss uses it as the averaging denominator.
    pub positives: usize,
}

/// Crop sampling configuration.
#[derive(Debug, Clone)]
pub struct CropConfig {
    /// Fraction of the image area covered by a crop, sampled uniformly.
    pub scale_range: (f64, f64),
    /// Crop aspect ratio (w/h), sampled uniformly and projected to what
    /// fits inside the image at the sampled area.
    pub aspect_range: (f64, f64),
    /// Minimum IoU between the two crop rectangles.
    pub min_overlap: f64,
    /// Pair draws before giving up on an image.
    pub max_retries: u32,
    /// Side length the crop is resized to.
    pub view_size: usize,
    /// Smallest image side accepted for sampling.
    pub min_side: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.2, 1.0),
            aspect_range: (0.75, 4.0 / 3.0),
            min_overlap: 0.1,
            max_retries: 20,
            view_size: 64,
            min_side: 32,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::Config(format!(
                "crop aspect_range must satisfy 0 < lo <= hi, got ({alo}, {ahi})"
            )));
        }
        if !(0.0..1.0).contains(&self.min_overlap) {
            return Err(Error::Config(format!(
                "crop min_overlap must be in [0, 1), got {}",
                self.min_overlap
            )));
        }
        if self.view_size == 0 || self.max_retries == 0 {
            return Err(Error::Config(
                "crop view_size and max_retries must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// IoU of two crop rectangles, exact in pixel units.
pub fn crop_iou(a: &CropSpec, b: &CropSpec) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Draws one crop rectangle: area fraction and aspect ratio are sampled,
/// then the aspect is projected onto the feasible range so the sampled
/// area is always preserved. A scale of exactly 1 therefore always yields
/// the full image.
fn sample_crop<R: Rng>(img_h: usize, img_w: usize, rng: &mut R, cfg: &CropConfig) -> CropSpec {
    let (h, w) = (img_h as f64, img_w as f64);
    let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let aspect = rng.gen_range(cfg.aspect_range.0..=cfg.aspect_range.1);
    let target_area = scale * h * w;

    let crop_w = (target_area * aspect).sqrt().clamp(target_area / h, w);
    let crop_w = (crop_w.round() as usize).clamp(1, img_w);
    let crop_h = ((target_area / crop_w as f64).round() as usize).clamp(1, img_h);

    let x0 = rng.gen_range(0..=img_w - crop_w);
    let y0 = rng.gen_range(0..=img_h - crop_h);
    CropSpec {
        x0,
        y0,
        x1: x0 + crop_w,
        y1: y0 + crop_h,
        out_h: cfg.view_size,
        out_w: cfg.view_size,
    }
}

/// Samples an overlapping crop pair, retrying until the IoU constraint is
/// met or `max_retries` pair draws are spent.
pub fn sample_crop_pair<R: Rng>(
    img_h: usize,
    img_w: usize,
    rng: &mut R,
    cfg: &CropConfig,
) -> Result<(CropSpec, CropSpec)> {
    sample_crop_pair_with(rng, cfg, |rng| {
        (
            sample_crop(img_h, img_w, rng, cfg),
            sample_crop(img_h, img_w, rng, cfg),
        )
    })
    .map_err(|e| {
        if img_h < cfg.min_side || img_w < cfg.min_side {
            Error::Config(format!(
                "image {img_w}x{img_h} smaller than min_side {}",
                cfg.min_side
            ))
        } else {
            e
        }
    })
}

/// Same as [`sample_crop_pair`] but with an injectable candidate source,
/// used by tests to force specific rectangles.
pub fn sample_crop_pair_with<R: Rng>(
    rng: &mut R,
    cfg: &CropConfig,
    mut candidates: impl FnMut(&mut R) -> (CropSpec, CropSpec),
) -> Result<(CropSpec, CropSpec)> {
    for _ in 0..cfg.max_retries {
        let (a, b) = candidates(rng);
        if crop_iou(&a, &b) >= cfg.min_overlap {
            return Ok((a, b));
        }
    }
    Err(Error::RetriesExhausted {
        attempts: cfg.max_retries,
    })
}

/// Maps every feature cell of a crop back to normalized original-image
/// coordinates, using the cell-center convention.
pub fn warp_coords(
    crop: &CropSpec,
    feat_h: usize,
    feat_w: usize,
    src_h: usize,
    src_w: usize,
) -> GridCoords {
    let mut xs = Array2::zeros((feat_h, feat_w));
    let mut ys = Array2::zeros((feat_h, feat_w));
    let (x0, y0) = (crop.x0 as f64, crop.y0 as f64);
    let cw = crop.width() as f64;
    let ch = crop.height() as f64;
    for a in 0..feat_h {
        let y = (y0 + (a as f64 + 0.5) * ch / feat_h as f64) / src_h as f64;
        for b in 0..feat_w {
            let x = (x0 + (b as f64 + 0.5) * cw / feat_w as f64) / src_w as f64;
            xs[[a, b]] = x;
            ys[[a, b]] = y;
        }
    }
    GridCoords { xs, ys }
}

/// Euclidean distances between all cell pairs of two same-shaped grids.
pub fn distance_matrix(c1: &GridCoords, c2: &GridCoords) -> Result<DistanceMatrix> {
    if c1.xs.dim() != c2.xs.dim() {
        return Err(Error::shape(
            "distance_matrix grids",
            format!("{:?}", c1.xs.dim()),
            format!("{:?}", c2.xs.dim()),
        ));
    }
    let n = c1.len();
    let x1: Vec<f64> = c1.xs.iter().copied().collect();
    let y1: Vec<f64> = c1.ys.iter().copied().collect();
    let x2: Vec<f64> = c2.xs.iter().copied().collect();
    let y2: Vec<f64> = c2.ys.iter().copied().collect();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            values[[i, j]] = (x1[i] - x2[j]).hypot(y1[i] - y2[j]);
        }
    }
    Ok(DistanceMatrix { values })
}

/// Thresholds a distance matrix into the binary positive-pair mask.
/// The comparison is inclusive: cells exactly at the radius are positive.
pub fn positive_mask(dist: &DistanceMatrix, r: f64) -> PositiveMask {
    debug_assert!(r > 0.0, "positive radius must be > 0");
    let values = dist.values.mapv(|d| if d <= r { 1.0 } else { 0.0 });
    let positives = values.iter().filter(|&&v| v == 1.0).count();
    PositiveMask {
        values,
        r,
        positives,
    }
}

impl PositiveMask {
    /// The mask for the swapped crop order. Distance is symmetric in its
    /// arguments, so this is an exact transpose.
    pub fn transposed(&self) -> PositiveMask {
        PositiveMask {
            values: self.values.t().to_owned(),
            r: self.r,
            positives: self.positives,
        }
    }
}

/// Cuts the crop rectangle out of the image and resizes it to
/// `out_h x out_w` with bilinear interpolation, pixel-center convention.
/// Coordinates for the loss are always computed analytically from the
/// [`CropSpec`], never from these resampled pixels.
pub fn extract_view(img: &ImageBuffer, crop: &CropSpec) -> Array3<f64> {
    let data = img.data();
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::zeros((3, crop.out_h, crop.out_w));
    let sy = crop.height() as f64 / crop.out_h as f64;
    let sx = crop.width() as f64 / crop.out_w as f64;
    for oy in 0..crop.out_h {
        let src_y = crop.y0 as f64 + (oy as f64 + 0.5) * sy - 0.5;
        let y0 = src_y.floor().clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (src_y - y0 as f64).clamp(0.0, 1.0);
        for ox in 0..crop.out_w {
            let src_x = crop.x0 as f64 + (ox as f64 + 0.5) * sx - 0.5;
            let x0 = src_x.floor().clamp(0.0, (w - 1) as f64) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (src_x - x0 as f64).clamp(0.0, 1.0);
            for c in 0..3 {
                let v00 = data[[c, y0, x0]];
                let v01 = data[[c, y0, x1]];
                let v10 = data[[c, y1, x0]];
                let v11 = data[[c, y1, x1]];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[[c, oy, ox]] = top + (bot - top) * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Pixel-raster IoU oracle: rasterize both rectangles and count.
    fn raster_iou(a: &CropSpec, b: &CropSpec, img_h: usize, img_w: usize) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..img_h {
            for x in 0..img_w {
                let in_a = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
                let in_b = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn degenerate_scale_yields_full_image() {
        let cfg = CropConfig {
            scale_range: (1.0, 1.0),
            ..CropConfig::default()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = sample_crop_pair(64, 64, &mut rng, &cfg).unwrap();
            let full = CropSpec {
                x0: 0,
                y0: 0,
                x1: 64,
                y1: 64,
                out_h: cfg.view_size,
                out_w: cfg.view_size,
            };
            assert_eq!(a, full);
            assert_eq!(b, full);
            assert_eq!(crop_iou(&a, &b), 1.0);
        }
    }

    #[test]
    fn sampled_pair_meets_min_overlap_by_raster_oracle() {
        let cfg = CropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = sample_crop_pair(64, 64, &mut rng, &cfg).unwrap();
        let iou = raster_iou(&a, &b, 64, 64);
        assert!(iou >= cfg.min_overlap, "raster IoU {iou} below min_overlap");
        assert!((iou - crop_iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn forced_disjoint_candidates_exhaust_retries() {
        let cfg = CropConfig {
            min_overlap: 0.5,
            ..CropConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let left = CropSpec {
            x0: 0,
            y0: 0,
            x1: 8,
            y1: 8,
            out_h: 64,
            out_w: 64,
        };
        let right = CropSpec {
            x0: 32,
            y0: 32,
            x1: 40,
            y1: 40,
            out_h: 64,
            out_w: 64,
        };
        let err = sample_crop_pair_with(&mut rng, &cfg, |_| (left, right)).unwrap_err();
        assert!(matches!(err, Error::RetriesExhausted { attempts: 20 }));
    }

    #[test]
    fn warp_full_image_grid_centers() {
        let crop = CropSpec {
            x0: 0,
            y0: 0,
            x1: 10,
            y1: 10,
            out_h: 64,
            out_w: 64,
        };
        let g = warp_coords(&crop, 2, 2, 10, 10);
        assert_eq!(g.xs.row(0).to_vec(), vec![0.25, 0.75]);
        assert_eq!(g.xs.row(1).to_vec(), vec![0.25, 0.75]);
        assert_eq!(g.ys.column(0).to_vec(), vec![0.25, 0.75]);
        assert_eq!(g.ys.column(1).to_vec(), vec![0.25, 0.75]);
    }

    #[test]
    fn warp_left_half_rescales_linearly() {
        let crop = CropSpec {
            x0: 0,
            y0: 0,
            x1: 5,
            y1: 10,
            out_h: 64,
            out_w: 64,
        };
        let g = warp_coords(&crop, 2, 2, 10, 10);
        for &x in g.xs.iter() {
            assert!(x == 0.125 || x == 0.375, "unexpected x {x}");
        }
    }

    #[test]
    fn self_distance_diagonal_is_zero() {
        let crop = CropSpec {
            x0: 3,
            y0: 1,
            x1: 9,
            y1: 8,
            out_h: 64,
            out_w: 64,
        };
        let g = warp_coords(&crop, 3, 3, 12, 12);
        let d = distance_matrix(&g, &g).unwrap();
        for i in 0..g.len() {
            assert_eq!(d.values[[i, i]], 0.0);
        }
    }

    #[test]
    fn distance_three_four_five() {
        let a = GridCoords {
            xs: Array2::from_elem((1, 1), 0.0),
            ys: Array2::from_elem((1, 1), 0.0),
        };
        let b = GridCoords {
            xs: Array2::from_elem((1, 1), 0.3),
            ys: Array2::from_elem((1, 1), 0.4),
        };
        let d = distance_matrix(&a, &b).unwrap();
        assert!((d.values[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distance_shape_mismatch_is_rejected() {
        let a = GridCoords {
            xs: Array2::zeros((2, 2)),
            ys: Array2::zeros((2, 2)),
        };
        let b = GridCoords {
            xs: Array2::zeros((3, 3)),
            ys: Array2::zeros((3, 3)),
        };
        assert!(matches!(
            distance_matrix(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mask_boundary_is_inclusive() {
        let d = DistanceMatrix {
            values: ndarray::array![[0.0, 0.1], [0.100000001, 0.3]],
        };
        let m = positive_mask(&d, 0.1);
        assert_eq!(m.values[[0, 0]], 1.0);
        assert_eq!(m.values[[0, 1]], 1.0, "distance exactly r is positive");
        assert_eq!(m.values[[1, 0]], 0.0);
        assert_eq!(m.values[[1, 1]], 0.0);
        assert_eq!(m.positives, 2);
    }

    #[test]
    fn all_far_gives_empty_mask() {
        let d = DistanceMatrix {
            values: Array2::from_elem((4, 4), 0.9),
        };
        let m = positive_mask(&d, 0.1);
        assert_eq!(m.positives, 0);
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GridCoords {
        let xs = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        let ys = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        GridCoords { xs, ys }
    }

    #[test]
    fn distance_is_transpose_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_grid(&mut rng, 3, 2);
        let b = random_grid(&mut rng, 3, 2);
        let dab = distance_matrix(&a, &b).unwrap();
        let dba = distance_matrix(&b, &a).unwrap();
        assert_eq!(dab.values, dba.values.t().to_owned());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

        #[test]
        fn mask_swap_transpose_symmetry(seed in 0u64..1000, r in 0.01f64..0.8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_grid(&mut rng, 2, 3);
            let b = random_grid(&mut rng, 2, 3);
            let mab = positive_mask(&distance_matrix(&a, &b).unwrap(), r);
            let mba = positive_mask(&distance_matrix(&b, &a).unwrap(), r);
            prop_assert_eq!(mab.values, mba.values.t().to_owned());
            prop_assert_eq!(mab.positives, mba.positives);
        }

        #[test]
        fn mask_radius_monotonicity(seed in 0u64..1000, r in 0.01f64..0.5, dr in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_grid(&mut rng, 2, 2);
            let b = random_grid(&mut rng, 2, 2);
            let d = distance_matrix(&a, &b).unwrap();
            let small = positive_mask(&d, r);
            let large = positive_mask(&d, r + dr);
            for (s, l) in small.values.iter().zip(large.values.iter()) {
                prop_assert!(l >= s);
            }
        }

        #[test]
        fn sampling_is_deterministic(seed in 0u64..1000) {
            let cfg = CropConfig::default();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let p1 = sample_crop_pair(64, 96, &mut r1, &cfg);
            let p2 = sample_crop_pair(64, 96, &mut r2, &cfg);
            prop_assert_eq!(p1.ok(), p2.ok());
        }

        #[test]
        fn disjoint_crops_with_small_radius_mask_empty(gap in 0.05f64..0.3) {
            // Two crops separated horizontally by `gap` (normalized): with
            // r below the gap the mask must be all zeros.
            let w = 100usize;
            let c1 = CropSpec { x0: 0, y0: 0, x1: 30, y1: 100, out_h: 8, out_w: 8 };
            let x0 = 30 + (gap * w as f64).ceil() as usize;
            let c2 = CropSpec { x0, y0: 0, x1: (x0 + 30).min(w), y1: 100, out_h: 8, out_w: 8 };
            let g1 = warp_coords(&c1, 4, 4, 100, w);
            let g2 = warp_coords(&c2, 4, 4, 100, w);
            let d = distance_matrix(&g1, &g2).unwrap();
            let m = positive_mask(&d, gap * 0.9);
            prop_assert_eq!(m.positives, 0);
        }
    }
}
