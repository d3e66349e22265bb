//! Shared helpers for integration tests: an analytic "oracle" frame
//! encoder whose nearest-neighbor matches are exact by construction, and
//! a synthetic bar scene builder.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvc::encoder::FeatureMap;
use hvc::geometry::ImageBuffer;
use hvc::propagation::FrameEncoder;

pub const GRID: usize = 8;
pub const CHANNELS: usize = 64;
pub const OBJECT_COLOR: [f64; 3] = [0.9, 0.15, 0.1];

/// Deterministic near-orthogonal unit vector for a content key.
pub fn key_vector(key: (&str, i64, i64)) -> Vec<f64> {
    let mut hasher = DefaultHasher::new();
    key.hash(&mut hasher);
    let mut rng = ChaCha8Rng::seed_from_u64(hasher.finish());
    let mut v: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Encodes cells by what they contain: object cells get features keyed by
/// their position relative to the object, background cells all share one
/// key (the background is static and interchangeable). Nearest-neighbor
/// matching is then exact by construction, including cells the object
/// just vacated.
pub struct OracleEncoder;

impl OracleEncoder {
    fn is_object(img: &ImageBuffer, y: usize, x: usize) -> bool {
        let d: f64 = (0..3)
            .map(|c| (img.data()[[c, y, x]] - OBJECT_COLOR[c]).powi(2))
            .sum();
        d < 0.01
    }
}

impl FrameEncoder for OracleEncoder {
    fn encode_frame(&self, img: &ImageBuffer) -> hvc::Result<FeatureMap> {
        let (h, w) = (img.height(), img.width());
        let cell = h / GRID;
        let mut min_x = i64::MAX;
        let mut min_y = i64::MAX;
        for y in 0..h {
            for x in 0..w {
                if Self::is_object(img, y, x) {
                    min_x = min_x.min(x as i64);
                    min_y = min_y.min(y as i64);
                }
            }
        }
        let mut data = Array3::zeros((CHANNELS, GRID, GRID));
        for a in 0..GRID {
            for b in 0..GRID {
                let cy = a * cell + cell / 2;
                let cx = b * cell + cell / 2;
                let key = if Self::is_object(img, cy, cx) {
                    ("obj", cx as i64 - min_x, cy as i64 - min_y)
                } else {
                    ("bg", 0, 0)
                };
                for (c, v) in key_vector(key).into_iter().enumerate() {
                    data[[c, a, b]] = v;
                }
            }
        }
        Ok(FeatureMap::new(data, true))
    }
}

/// A full-height bar at columns `x0 .. x0+width` over a gradient
/// background, with its exact mask.
pub fn bar_frame(x0: usize, width: usize) -> (ImageBuffer, Array2<u8>) {
    let mut data = Array3::zeros((3, 64, 64));
    let mut mask = Array2::zeros((64, 64));
    for y in 0..64 {
        for x in 0..64 {
            if x >= x0 && x < x0 + width {
                for c in 0..3 {
                    data[[c, y, x]] = OBJECT_COLOR[c];
                }
                mask[[y, x]] = 1;
            } else {
                let t = 0.2 + 0.6 * (x as f64 + y as f64) / 128.0;
                data[[0, y, x]] = t;
                data[[1, y, x]] = t * 0.9;
                data[[2, y, x]] = 1.0 - t;
            }
        }
    }
    (ImageBuffer::new(data).unwrap(), mask)
}
