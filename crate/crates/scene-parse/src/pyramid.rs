//! Locally normalized Laplacian pyramid. Blur is a separable 5-tap
//! binomial [1,4,6,4,1]/16 with edge replication, decimation keeps even
//! indices (ceil halving), and band-pass levels are the difference against
//! the nearest-neighbor upsampled next level. Each level is then
//! normalized so local neighborhoods have zero mean and unit standard
//! deviation, jointly across channels.

use crate::error::{Error, Result};
use crate::volume::FeatureVolume;

/// Std floor for local normalization; windows flatter than this divide by
/// the floor instead, mapping near-constant regions to zero.
pub const NORM_STD_FLOOR: f64 = 1e-2;

/// Default normalization window side.
pub const DEFAULT_NORM_WINDOW: usize = 15;

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<FeatureVolume>,
}

impl Pyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

const BINOMIAL_5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn blur5(input: &FeatureVolume) -> FeatureVolume {
    let (c, h, w) = input.shape();
    let mut horiz = FeatureVolume::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let row = input.row(ch, y);
            let dst = horiz.channel_mut(ch);
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in BINOMIAL_5.iter().enumerate() {
                    let sx = (x + t).saturating_sub(2).min(w - 1);
                    acc += k * row[sx];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    let mut out = FeatureVolume::zeros(c, h, w);
    for ch in 0..c {
        let src = horiz.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in BINOMIAL_5.iter().enumerate() {
                    let sy = (y + t).saturating_sub(2).min(h - 1);
                    acc += k * src[sy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

fn decimate2(input: &FeatureVolume) -> FeatureVolume {
    let (c, h, w) = input.shape();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = FeatureVolume::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.set(ch, y, x, input.at(ch, y * 2, x * 2));
            }
        }
    }
    out
}

/// Nearest-neighbor 2x upsampling cropped to a target size.
pub(crate) fn upsample2_to(input: &FeatureVolume, th: usize, tw: usize) -> FeatureVolume {
    let c = input.channels();
    let mut out = FeatureVolume::zeros(c, th, tw);
    for ch in 0..c {
        for y in 0..th {
            for x in 0..tw {
                out.set(ch, y, x, input.at(ch, y / 2, x / 2));
            }
        }
    }
    out
}

/// Gaussian and band-pass levels before normalization. Level s of the
/// band-pass stack is G_s - upsample2(G_{s+1}); the last level is the
/// Gaussian base itself.
pub fn laplacian_levels(image: &FeatureVolume, n_levels: usize) -> Result<Vec<FeatureVolume>> {
    if n_levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    if image.channels() == 0 || image.pixels() == 0 {
        return Err(Error::Empty("pyramid input image".into()));
    }
    let (_, h, w) = image.shape();
    if (1usize << (n_levels - 1)) > h.max(w) {
        return Err(Error::invalid(format!(
            "{n_levels} levels degenerate below 1x1 for a {h}x{w} image"
        )));
    }
    let mut gauss = vec![image.clone()];
    for _ in 1..n_levels {
        let prev = gauss.last().unwrap();
        gauss.push(decimate2(&blur5(prev)));
    }
    let mut laps = Vec::with_capacity(n_levels);
    for s in 0..n_levels - 1 {
        let up = upsample2_to(&gauss[s + 1], gauss[s].height(), gauss[s].width());
        let mut lap = gauss[s].clone();
        for (d, u) in lap.data_mut().iter_mut().zip(up.data()) {
            *d -= u;
        }
        laps.push(lap);
    }
    laps.push(gauss[n_levels - 1].clone());
    Ok(laps)
}

/// Full preprocessing: band-pass decomposition followed by per-level local
/// normalization.
pub fn laplacian_pyramid(
    image: &FeatureVolume,
    n_levels: usize,
    norm_window: usize,
) -> Result<Pyramid> {
    let levels = laplacian_levels(image, n_levels)?
        .iter()
        .map(|lvl| local_normalize(lvl, norm_window))
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid { levels })
}

/// Subtracts the windowed local mean and divides by the windowed local
/// std (floored at [`NORM_STD_FLOOR`]). Statistics pool all channels
/// jointly, so between-channel structure survives; borders replicate.
pub fn local_normalize(image: &FeatureVolume, window: usize) -> Result<FeatureVolume> {
    if window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    let (c, h, w) = image.shape();
    if window > h || window > w {
        return Err(Error::invalid(format!(
            "window {window} exceeds image {h}x{w}"
        )));
    }
    let r = window / 2;
    let ph = h + 2 * r;
    let pw = w + 2 * r;

    // channel-summed value and square integral images over the
    // edge-replicated frame
    let mut s1 = vec![0.0f64; (ph + 1) * (pw + 1)];
    let mut s2 = vec![0.0f64; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let iy = if y < r { 0 } else { (y - r).min(h - 1) };
        for x in 0..pw {
            let ix = if x < r { 0 } else { (x - r).min(w - 1) };
            let mut v = 0.0;
            let mut v2 = 0.0;
            for ch in 0..c {
                let val = image.at(ch, iy, ix);
                v += val;
                v2 += val * val;
            }
            let i = (y + 1) * (pw + 1) + (x + 1);
            s1[i] = v + s1[i - 1] + s1[i - (pw + 1)] - s1[i - (pw + 1) - 1];
            s2[i] = v2 + s2[i - 1] + s2[i - (pw + 1)] - s2[i - (pw + 1) - 1];
        }
    }
    let window_area = (window * window * c) as f64;
    let rect = |s: &[f64], y0: usize, x0: usize| -> f64 {
        let y1 = y0 + window;
        let x1 = x0 + window;
        s[y1 * (pw + 1) + x1] - s[y0 * (pw + 1) + x1] - s[y1 * (pw + 1) + x0]
            + s[y0 * (pw + 1) + x0]
    };

    let mut out = FeatureVolume::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let sum = rect(&s1, y, x);
            let sq = rect(&s2, y, x);
            let mean = sum / window_area;
            let var = (sq / window_area - mean * mean).max(0.0);
            let denom = var.sqrt().max(NORM_STD_FLOOR);
            for ch in 0..c {
                out.set(ch, y, x, (image.at(ch, y, x) - mean) / denom);
            }
        }
    }
    Ok(out)
}
