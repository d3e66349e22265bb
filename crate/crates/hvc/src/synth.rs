//! Deterministic synthetic data: composite-shape images for training and
//! moving-shape videos with exact ground-truth masks for propagation
//! evaluation. The background is low-amplitude seeded value noise over a
//! color gradient, so color constancy alone cannot solve training.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::config::SynthSection;
use crate::error::Result;
use crate::geometry::ImageBuffer;
use crate::imgio;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Circle,
    Triangle,
}

#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Side length / diameter in pixels.
    pub size: f64,
    /// Center, in pixels.
    pub position: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Class ids are unique and contiguous from 1.
    pub class_id: u8,
}

impl ShapeSpec {
    fn contains(&self, px: f64, py: f64, cx: f64, cy: f64) -> bool {
        let half = self.size / 2.0;
        match self.kind {
            ShapeKind::Rect => (px - cx).abs() <= half && (py - cy).abs() <= half,
            ShapeKind::Circle => {
                let dx = px - cx;
                let dy = py - cy;
                dx * dx + dy * dy <= half * half
            }
            ShapeKind::Triangle => {
                // Isoceles, apex up: (cx, cy-h), (cx-h, cy+h), (cx+h, cy+h).
                let (ax, ay) = (cx, cy - half);
                let (bx, by) = (cx - half, cy + half);
                let (ex, ey) = (cx + half, cy + half);
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                    (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, ex, ey);
                let d3 = sign(ex, ey, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Drawn in order; later shapes overwrite earlier ones.
    pub shapes: Vec<ShapeSpec>,
    pub background_seed: u64,
}

/// Smooth value noise: a coarse random lattice, bilinearly interpolated.
fn value_noise(h: usize, w: usize, seed: u64, cell: usize, amplitude: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(-1.0..1.0));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f64 / cell as f64;
        let fx = x as f64 / cell as f64;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let ty = fy - y0 as f64;
        let tx = fx - x0 as f64;
        let v00 = lattice[[y0, x0]];
        let v01 = lattice[[y0, x0 + 1]];
        let v10 = lattice[[y0 + 1, x0]];
        let v11 = lattice[[y0 + 1, x0 + 1]];
        let top = v00 + (v01 - v00) * tx;
        let bot = v10 + (v11 - v10) * tx;
        (top + (bot - top) * ty) * amplitude
    })
}

/// Renders the scene at the shapes' current positions.
pub fn gen_image(spec: &SceneSpec) -> (ImageBuffer, Array2<u8>) {
    let (h, w) = (spec.canvas_h, spec.canvas_w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
    let ca: [f64; 3] = [
        rng.gen_range(0.15..0.5),
        rng.gen_range(0.15..0.5),
        rng.gen_range(0.15..0.5),
    ];
    let cb: [f64; 3] = [
        rng.gen_range(0.4..0.85),
        rng.gen_range(0.4..0.85),
        rng.gen_range(0.4..0.85),
    ];
    let noise = value_noise(h, w, spec.background_seed ^ 0xA5A5, 8, 0.06);

    let mut img = Array3::zeros((3, h, w));
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 / w.max(1) as f64 + y as f64 / h.max(1) as f64) / 2.0;
            let n = noise[[y, x]];
            for c in 0..3 {
                img[[c, y, x]] = (ca[c] + (cb[c] - ca[c]) * t + n).clamp(0.0, 1.0);
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for shape in &spec.shapes {
                let (cx, cy) = shape.position;
                if shape.contains(px, py, cx, cy) {
                    mask[[y, x]] = shape.class_id;
                    for c in 0..3 {
                        img[[c, y, x]] = shape.color[c];
                    }
                }
            }
        }
    }
    (
        ImageBuffer::new(img).expect("synthetic image in range"),
        mask,
    )
}

/// Reflects a 1-D position into `[lo, hi]`, flipping velocity on bounce.
fn reflect(mut pos: f64, mut vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, 0.0);
    }
    loop {
        if pos < lo {
            pos = 2.0 * lo - pos;
            vel = -vel;
        } else if pos > hi {
            pos = 2.0 * hi - pos;
            vel = -vel;
        } else {
            return (pos, vel);
        }
    }
}

/// Renders `frames` frames, advancing every shape by its velocity per
/// frame with billiard reflection at the canvas borders.
pub fn gen_video(spec: &SceneSpec, frames: usize) -> Vec<(ImageBuffer, Array2<u8>)> {
    let mut current = spec.clone();
    let mut out = Vec::with_capacity(frames);
    for frame in 0..frames {
        if frame > 0 {
            for shape in &mut current.shapes {
                let half = shape.size / 2.0;
                let (x, vx) = reflect(
                    shape.position.0 + shape.velocity.0,
                    shape.velocity.0,
                    half,
                    spec.canvas_w as f64 - half,
                );
                let (y, vy) = reflect(
                    shape.position.1 + shape.velocity.1,
                    shape.velocity.1,
                    half,
                    spec.canvas_h as f64 - half,
                );
                shape.position = (x, y);
                shape.velocity = (vx, vy);
            }
        }
        out.push(gen_image(&current));
    }
    out
}

fn random_shape(
    rng: &mut ChaCha8Rng,
    cfg: &SynthSection,
    class_id: u8,
    moving: bool,
) -> ShapeSpec {
    let kind = match rng.gen_range(0..3) {
        0 => ShapeKind::Rect,
        1 => ShapeKind::Circle,
        _ => ShapeKind::Triangle,
    };
    let size = rng.gen_range(cfg.min_shape_size as f64..=cfg.max_shape_size as f64);
    let half = size / 2.0;
    let w = cfg.canvas as f64;
    let position = (rng.gen_range(half..=w - half), rng.gen_range(half..=w - half));
    let velocity = if moving {
        let mut speed = || {
            let v: f64 = rng.gen_range(cfg.min_speed..=cfg.max_speed);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        };
        (speed(), speed())
    } else {
        (0.0, 0.0)
    };
    // Saturated colors, kept away from the mid-gray background band.
    let mut color = [0.0; 3];
    let bright = rng.gen_range(0..3);
    for (c, v) in color.iter_mut().enumerate() {
        *v = if c == bright {
            rng.gen_range(0.75..1.0)
        } else {
            rng.gen_range(0.0..0.35)
        };
    }
    ShapeSpec {
        kind,
        color,
        size,
        position,
        velocity,
        class_id,
    }
}

/// A random scene with `min..=max` shapes, class ids 1..=k.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    cfg: &SynthSection,
    min_shapes: usize,
    max_shapes: usize,
    moving: bool,
) -> SceneSpec {
    let count = rng.gen_range(min_shapes..=max_shapes);
    let shapes = (0..count)
        .map(|i| random_shape(rng, cfg, (i + 1) as u8, moving))
        .collect();
    SceneSpec {
        canvas_h: cfg.canvas,
        canvas_w: cfg.canvas,
        shapes,
        background_seed: rng.gen(),
    }
}

/// Deterministic batch of training stills.
pub fn generate_training_images(
    cfg: &SynthSection,
    seed: u64,
    count: usize,
) -> Vec<(ImageBuffer, Array2<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    (0..count)
        .map(|_| {
            let scene = random_scene(
                &mut rng,
                cfg,
                cfg.train_min_shapes,
                cfg.train_max_shapes,
                false,
            );
            gen_image(&scene)
        })
        .collect()
}

/// Deterministic batch of evaluation videos with ground-truth masks.
pub fn generate_eval_videos(cfg: &SynthSection, seed: u64) -> Vec<Vec<(ImageBuffer, Array2<u8>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(2));
    (0..cfg.eval_videos)
        .map(|_| {
            let scene = random_scene(
                &mut rng,
                cfg,
                cfg.eval_min_shapes,
                cfg.eval_max_shapes,
                true,
            );
            gen_video(&scene, cfg.video_frames)
        })
        .collect()
}

/// Writes the full corpus in the layout the propagation and evaluation
/// commands read:
///
/// ```text
/// out/
///   train/images/00000.png ...
///   val/frames/video_000/00000.png ...
///   val/gt/video_000/00000.png ...
/// ```
pub fn write_dataset(cfg: &SynthSection, seed: u64, out_dir: &Path) -> Result<()> {
    let train_dir = out_dir.join("train").join("images");
    for (i, (img, _)) in generate_training_images(cfg, seed, cfg.train_images)
        .iter()
        .enumerate()
    {
        imgio::save_image(&train_dir.join(format!("{i:05}.png")), img)?;
    }
    for (v, video) in generate_eval_videos(cfg, seed).iter().enumerate() {
        let frames_dir = out_dir.join("val").join("frames").join(format!("video_{v:03}"));
        let gt_dir = out_dir.join("val").join("gt").join(format!("video_{v:03}"));
        for (t, (img, mask)) in video.iter().enumerate() {
            imgio::save_image(&frames_dir.join(format!("{t:05}.png")), img)?;
            imgio::save_mask(&gt_dir.join(format!("{t:05}.png")), mask)?;
        }
    }
    Ok(())
}
