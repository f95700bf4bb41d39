//! Synthetic scene generator: a textured background (class 0) with one to
//! four non-overlapping filled shapes, each shape kind bound to a class
//! (circle, rectangle, triangle), per-class base colors, Gaussian color
//! noise, and exact ground-truth masks. Deterministic per seed.

use crate::dataset::{Dataset, LabelMap};
use crate::error::{Error, Result};
use crate::volume::FeatureVolume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Per-channel Gaussian noise sigma.
pub const NOISE_SIGMA: f64 = 8.0 / 255.0;

const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.45, 0.52, 0.40], // background, gray-green
    [0.85, 0.20, 0.20], // circle, red
    [0.20, 0.30, 0.85], // rectangle, blue
    [0.90, 0.85, 0.20], // triangle, yellow
];

const CLASS_NAMES: [&str; 4] = ["background", "circle", "rectangle", "triangle"];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GenStats {
    /// Shapes dropped because a non-overlapping placement was not found
    /// within the retry budget.
    pub shape_shortfalls: usize,
}

enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Triangle { apex_y: f64, apex_x: f64, h: f64, half_base: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (yf, xf) = (y as f64, x as f64);
        match *self {
            Shape::Circle { cy, cx, r } => {
                (yf - cy) * (yf - cy) + (xf - cx) * (xf - cx) <= r * r
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle {
                apex_y,
                apex_x,
                h,
                half_base,
            } => {
                let dy = yf - apex_y;
                if dy < 0.0 || dy > h {
                    return false;
                }
                let half_width = half_base * dy / h;
                (xf - apex_x).abs() <= half_width
            }
        }
    }
}

/// Generates `count` images of `image_size^2` pixels with classes
/// `0..n_classes` (2..=4: background plus one shape kind per extra class).
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, GenStats)> {
    if !(2..=4).contains(&cfg.n_classes) {
        return Err(Error::invalid(format!(
            "synthetic generator supports 2..=4 classes, got {}",
            cfg.n_classes
        )));
    }
    if cfg.image_size < 32 {
        return Err(Error::invalid("image size must be at least 32"));
    }
    if cfg.count == 0 {
        return Err(Error::Empty("requested zero images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut stats = GenStats::default();
    let mut pairs = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        // regenerate if the background fraction drifts out of range
        let pair = loop {
            let (image, labels, shortfall) = one_image(cfg, &mut rng, &noise);
            let bg = labels.labels().iter().filter(|&&l| l == 0).count() as f64
                / labels.labels().len() as f64;
            if (0.3..=0.95).contains(&bg) {
                stats.shape_shortfalls += shortfall;
                break (image, labels);
            }
        };
        pairs.push(pair);
    }
    Ok((
        Dataset {
            class_names: CLASS_NAMES[..cfg.n_classes]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            pairs,
            split: String::new(),
        },
        stats,
    ))
}

fn one_image(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> (FeatureVolume, LabelMap, usize) {
    let s = cfg.image_size;
    let sf = s as f64;
    let mut labels = LabelMap::filled(s, s, 0);

    let n_shapes = rng.random_range(1..=4usize);
    let mut shortfall = 0;
    for _ in 0..n_shapes {
        let class = rng.random_range(1..cfg.n_classes) as u8;
        let mut placed = false;
        for _ in 0..40 {
            let shape = match class {
                1 => {
                    let r = rng.random_range(0.14 * sf..0.20 * sf);
                    let cy = rng.random_range(r + 1.0..sf - r - 2.0);
                    let cx = rng.random_range(r + 1.0..sf - r - 2.0);
                    Shape::Circle { cy, cx, r }
                }
                2 => {
                    let hw = rng.random_range(0.12 * sf..0.17 * sf);
                    let hh = rng.random_range(0.12 * sf..0.17 * sf);
                    let cy = rng.random_range(hh + 1.0..sf - hh - 2.0);
                    let cx = rng.random_range(hw + 1.0..sf - hw - 2.0);
                    Shape::Rect {
                        y0: (cy - hh) as usize,
                        x0: (cx - hw) as usize,
                        y1: (cy + hh) as usize,
                        x1: (cx + hw) as usize,
                    }
                }
                _ => {
                    let h = rng.random_range(0.30 * sf..0.42 * sf);
                    let half_base = rng.random_range(0.18 * sf..0.24 * sf);
                    let apex_y = rng.random_range(1.0..sf - h - 2.0);
                    let apex_x = rng.random_range(half_base + 1.0..sf - half_base - 2.0);
                    Shape::Triangle {
                        apex_y,
                        apex_x,
                        h,
                        half_base,
                    }
                }
            };
            if shape_fits(&shape, &labels) {
                paint(&shape, class, &mut labels);
                placed = true;
                break;
            }
        }
        if !placed {
            shortfall += 1;
        }
    }

    // low-frequency luminance texture over the background
    let fx = rng.random_range(1.0..3.0);
    let fy = rng.random_range(1.0..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut image = FeatureVolume::zeros(3, s, s);
    for y in 0..s {
        for x in 0..s {
            let class = labels.at(y, x) as usize;
            let base = CLASS_COLORS[class];
            let texture = if class == 0 {
                0.07 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / sf + phase).sin()
            } else {
                0.0
            };
            for c in 0..3 {
                let v = base[c] + texture + noise.sample(rng);
                image.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    (image, labels, shortfall)
}

fn shape_fits(shape: &Shape, labels: &LabelMap) -> bool {
    let s = labels.width();
    for y in 0..s {
        for x in 0..s {
            if shape.contains(y, x) && labels.at(y, x) != 0 {
                return false;
            }
        }
    }
    true
}

fn paint(shape: &Shape, class: u8, labels: &mut LabelMap) {
    let s = labels.width();
    for y in 0..s {
        for x in 0..s {
            if shape.contains(y, x) {
                labels.set(y, x, class);
            }
        }
    }
}
