//! Training-time augmentation: random horizontal flips and small
//! rotations. Images rotate with bilinear sampling (edge clamped), label
//! maps with nearest-neighbor; pixels rotated in from outside the frame
//! become void.

use crate::dataset::{LabelMap, VOID_LABEL};
use crate::volume::FeatureVolume;
use rand::Rng;

/// Max rotation magnitude in degrees.
pub const MAX_ROTATION_DEG: f64 = 8.0;

/// Deterministic core: optional horizontal flip, then rotation by
/// `angle_deg` around the image center.
pub fn apply_jitter(
    image: &FeatureVolume,
    labels: &LabelMap,
    flip: bool,
    angle_deg: f64,
) -> (FeatureVolume, LabelMap) {
    let (c, h, w) = image.shape();
    let mut img = image.clone();
    let mut lab = labels.clone();
    if flip {
        let mut flipped = FeatureVolume::zeros(c, h, w);
        let mut flabels = LabelMap::filled(w, h, VOID_LABEL);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    flipped.set(ch, y, x, img.at(ch, y, w - 1 - x));
                }
                flabels.set(y, x, lab.at(y, w - 1 - x));
            }
        }
        img = flipped;
        lab = flabels;
    }
    if angle_deg == 0.0 {
        return (img, lab);
    }

    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out_img = FeatureVolume::zeros(c, h, w);
    let mut out_lab = LabelMap::filled(w, h, VOID_LABEL);
    for y in 0..h {
        for x in 0..w {
            // inverse mapping: rotate the destination back into the source
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            let inside = sy >= 0.0 && sx >= 0.0 && sy <= (h - 1) as f64 && sx <= (w - 1) as f64;

            // bilinear with edge clamp for the image
            let fy = sy.clamp(0.0, (h - 1) as f64);
            let fx = sx.clamp(0.0, (w - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = fy - y0 as f64;
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v = img.at(ch, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + img.at(ch, y0, x1) * (1.0 - wy) * wx
                    + img.at(ch, y1, x0) * wy * (1.0 - wx)
                    + img.at(ch, y1, x1) * wy * wx;
                out_img.set(ch, y, x, v);
            }
            if inside {
                let ny = sy.round() as usize;
                let nx = sx.round() as usize;
                out_lab.set(y, x, lab.at(ny.min(h - 1), nx.min(w - 1)));
            }
        }
    }
    (out_img, out_lab)
}

/// Draws flip (probability 0.5) and a rotation uniform in
/// [-MAX_ROTATION_DEG, MAX_ROTATION_DEG] from `rng`.
pub fn jitter(
    image: &FeatureVolume,
    labels: &LabelMap,
    rng: &mut impl Rng,
) -> (FeatureVolume, LabelMap) {
    let flip = rng.random_bool(0.5);
    let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    apply_jitter(image, labels, flip, angle)
}
