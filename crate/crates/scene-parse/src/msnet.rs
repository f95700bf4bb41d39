//! The multiscale convolutional feature extractor. One stack of filter
//! banks is shared by every pyramid scale (weight replication extended to
//! scale space); each scale runs conv -> tanh -> 2x2 maxpool twice and a
//! final linear conv, so the per-scale output sits at stride 4. Per-scale
//! maps are nearest-neighbor upsampled back to the input resolution and
//! concatenated, scale 1 first, into one dense feature map.
//!
//! Stage-1 training fits the banks jointly with a throwaway per-pixel
//! linear softmax classifier on hard targets, by SGD over pixels sampled
//! from each image (natural class frequencies or balanced).

use crate::dataset::{Dataset, LabelMap, VOID_LABEL};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, softmax, ClassDistribution};
use crate::nn::{
    conv2d, conv2d_backward, maxpool2_backward, maxpool2_with_argmax, tanh_backward, tanh_map,
    FilterBank, FilterBankGrad,
};
use crate::pyramid::{laplacian_pyramid, Pyramid, DEFAULT_NORM_WINDOW};
use crate::volume::FeatureVolume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    /// Input channels feeding each output map; below the previous stage's
    /// width this becomes a sparse random connection table.
    pub fan_in: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub stages: Vec<StageSpec>,
    pub n_scales: usize,
    /// Seed for drawing sparse connection tables; stored with the model.
    pub table_seed: u64,
    pub norm_window: usize,
}

impl NetConfig {
    /// Full-size architecture: 16/64/256 maps of 7x7 kernels, three
    /// octave scales.
    pub fn paper() -> Self {
        NetConfig {
            stages: vec![
                StageSpec { out_channels: 16, kernel_size: 7, fan_in: 3, pool: true },
                StageSpec { out_channels: 64, kernel_size: 7, fan_in: 8, pool: true },
                StageSpec { out_channels: 256, kernel_size: 7, fan_in: 16, pool: false },
            ],
            n_scales: 3,
            table_seed: 1,
            norm_window: DEFAULT_NORM_WINDOW,
        }
    }

    /// Desk-scale architecture for tests and the synthetic pipeline.
    pub fn toy() -> Self {
        NetConfig {
            stages: vec![
                StageSpec { out_channels: 4, kernel_size: 3, fan_in: 3, pool: true },
                StageSpec { out_channels: 8, kernel_size: 3, fan_in: 4, pool: true },
                StageSpec { out_channels: 16, kernel_size: 3, fan_in: 8, pool: false },
            ],
            n_scales: 2,
            table_seed: 1,
            norm_window: DEFAULT_NORM_WINDOW,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self, in_channels: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("network needs at least one stage"));
        }
        if self.n_scales == 0 {
            return Err(Error::invalid("network needs at least one scale"));
        }
        let mut prev = in_channels;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.kernel_size % 2 == 0 {
                return Err(Error::invalid(format!(
                    "stage {i} kernel must be odd"
                )));
            }
            if stage.fan_in == 0 || stage.fan_in > prev {
                return Err(Error::invalid(format!(
                    "stage {i} fan_in {} out of range for {prev} inputs",
                    stage.fan_in
                )));
            }
            prev = stage.out_channels;
        }
        Ok(())
    }

    /// Output stride of one scale relative to its level.
    pub fn stride(&self) -> usize {
        1 << self.stages.iter().filter(|s| s.pool).count()
    }

    pub fn per_scale_channels(&self) -> usize {
        self.stages.last().map(|s| s.out_channels).unwrap_or(0)
    }

    /// Channels of the concatenated multiscale map.
    pub fn feature_dim(&self) -> usize {
        self.n_scales * self.per_scale_channels()
    }

    /// Upsampling factor that brings scale `s` (0-based) to full
    /// resolution.
    pub fn scale_factor(&self, s: usize) -> usize {
        self.stride() << s
    }

    /// Smallest admissible input side: the coarsest level must still
    /// produce a stride-`stride()` output.
    pub fn min_input(&self) -> usize {
        self.stride() << (self.n_scales - 1)
    }
}

/// The single parameter store shared by all scales.
#[derive(Debug, Clone, PartialEq)]
pub struct MsNetParams {
    pub banks: Vec<FilterBank>,
}

impl MsNetParams {
    /// Draws connection tables from `config.table_seed` and weights from
    /// `weight_seed`, uniform in +-1/sqrt(fan-in).
    pub fn init(config: &NetConfig, in_channels: usize, weight_seed: u64) -> Result<Self> {
        config.validate(in_channels)?;
        let mut table_rng = ChaCha8Rng::seed_from_u64(config.table_seed);
        let mut weight_rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let mut banks = Vec::with_capacity(config.stages.len());
        let mut prev = in_channels;
        for stage in &config.stages {
            let mut bank = if stage.fan_in == prev {
                FilterBank::fully_connected(prev, stage.out_channels, stage.kernel_size)?
            } else {
                FilterBank::random_table(
                    prev,
                    stage.out_channels,
                    stage.fan_in,
                    stage.kernel_size,
                    &mut table_rng,
                )?
            };
            bank.init_uniform(&mut weight_rng);
            banks.push(bank);
            prev = stage.out_channels;
        }
        Ok(MsNetParams { banks })
    }

    pub fn param_count(&self) -> usize {
        self.banks.iter().map(FilterBank::param_count).sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for bank in &self.banks {
            bank.write_params(out);
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        let mut off = 0;
        for bank in &mut self.banks {
            let n = bank.param_count();
            bank.read_params(&src[off..off + n])?;
            off += n;
        }
        if off != src.len() {
            return Err(Error::shape(format!(
                "expected {off} network params, got {}",
                src.len()
            )));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<FilterBankGrad> {
        self.banks.iter().map(FilterBank::zero_grad).collect()
    }
}

/// Cached activations of one scale's forward pass, enough to run the
/// backward pass.
pub struct ScaleTrace {
    stages: Vec<StageTrace>,
    pub output: FeatureVolume,
}

struct StageTrace {
    input: FeatureVolume,
    tanh_out: Option<FeatureVolume>,
    argmax: Option<Vec<usize>>,
}

/// Runs the shared stack on one pyramid level.
pub fn forward_one_scale(
    level: &FeatureVolume,
    params: &MsNetParams,
    config: &NetConfig,
) -> Result<FeatureVolume> {
    Ok(forward_one_scale_traced(level, params, config)?.output)
}

/// Forward pass that keeps the intermediate activations.
pub fn forward_one_scale_traced(
    level: &FeatureVolume,
    params: &MsNetParams,
    config: &NetConfig,
) -> Result<ScaleTrace> {
    let stride = config.stride();
    if level.height() < stride || level.width() < stride {
        return Err(Error::shape(format!(
            "level {}x{} too small for stride-{stride} output",
            level.height(),
            level.width()
        )));
    }
    let n_stages = config.stages.len();
    let mut stages = Vec::with_capacity(n_stages);
    let mut current = level.clone();
    for (i, (stage, bank)) in config.stages.iter().zip(&params.banks).enumerate() {
        let pad = (stage.kernel_size - 1) / 2;
        let conv_out = conv2d(&current, bank, pad)?;
        let last = i + 1 == n_stages;
        let (tanh_out, argmax, next) = if last {
            (None, None, conv_out)
        } else {
            let t = tanh_map(&conv_out);
            if stage.pool {
                let (pooled, am) = maxpool2_with_argmax(&t);
                (Some(t), Some(am), pooled)
            } else {
                (Some(t.clone()), None, t)
            }
        };
        stages.push(StageTrace {
            input: current,
            tanh_out,
            argmax,
        });
        current = next;
    }
    Ok(ScaleTrace {
        stages,
        output: current,
    })
}

/// Backpropagates `d_out` through one scale, accumulating bank gradients
/// into `grads`.
pub fn backward_one_scale(
    trace: &ScaleTrace,
    params: &MsNetParams,
    config: &NetConfig,
    d_out: &FeatureVolume,
    grads: &mut [FilterBankGrad],
) -> Result<()> {
    let mut d = d_out.clone();
    for i in (0..config.stages.len()).rev() {
        let st = &trace.stages[i];
        if let Some(am) = &st.argmax {
            let t = st.tanh_out.as_ref().expect("pool implies tanh");
            d = maxpool2_backward(t.shape(), am, &d);
        }
        if let Some(t) = &st.tanh_out {
            d = tanh_backward(t, &d);
        }
        let pad = (config.stages[i].kernel_size - 1) / 2;
        let (d_in, g) = conv2d_backward(&st.input, &params.banks[i], pad, &d)?;
        grads[i].accumulate(&g);
        d = d_in;
    }
    Ok(())
}

/// Nearest-neighbor upsampling: each source pixel becomes a
/// `factor x factor` block.
pub fn upsample(map: &FeatureVolume, factor: usize) -> FeatureVolume {
    if factor == 1 {
        return map.clone();
    }
    let (c, h, w) = map.shape();
    let mut out = FeatureVolume::zeros(c, h * factor, w * factor);
    for ch in 0..c {
        for y in 0..h * factor {
            for x in 0..w * factor {
                out.set(ch, y, x, map.at(ch, y / factor, x / factor));
            }
        }
    }
    out
}

/// The concatenated multiscale feature map at full input resolution, with
/// the stride-4 per-scale maps retained.
pub struct DenseFeatureMap {
    /// `feature_dim x H x W`, scale-1 channels first.
    pub full: FeatureVolume,
    pub native: Vec<FeatureVolume>,
    pub stride: usize,
}

/// Builds the pyramid, runs every scale through the shared stack, and
/// assembles the dense map.
pub fn extract_features(
    image: &FeatureVolume,
    params: &MsNetParams,
    config: &NetConfig,
) -> Result<DenseFeatureMap> {
    let min = config.min_input();
    if image.height() < min || image.width() < min {
        return Err(Error::shape(format!(
            "image {}x{} below the minimum {min} for {} scales",
            image.height(),
            image.width(),
            config.n_scales
        )));
    }
    let pyramid = laplacian_pyramid(image, config.n_scales, config.norm_window)?;
    let native: Vec<FeatureVolume> = pyramid
        .levels
        .iter()
        .map(|level| forward_one_scale(level, params, config))
        .collect::<Result<_>>()?;

    let (h, w) = (image.height(), image.width());
    let per_scale = config.per_scale_channels();
    let mut full = FeatureVolume::zeros(config.feature_dim(), h, w);
    for (s, map) in native.iter().enumerate() {
        let f = config.scale_factor(s);
        for c in 0..per_scale {
            for y in 0..h {
                let src_y = y / f;
                for x in 0..w {
                    full.set(s * per_scale + c, y, x, map.at(c, src_y, x / f));
                }
            }
        }
    }
    Ok(DenseFeatureMap {
        full,
        native,
        stride: config.stride(),
    })
}

/// Reads the multiscale feature vector of one pixel straight from the
/// native per-scale maps.
pub fn gather_feature(
    native: &[FeatureVolume],
    config: &NetConfig,
    y: usize,
    x: usize,
    out: &mut [f64],
) {
    let per_scale = config.per_scale_channels();
    for (s, map) in native.iter().enumerate() {
        let f = config.scale_factor(s);
        let (sy, sx) = (y / f, x / f);
        for c in 0..per_scale {
            out[s * per_scale + c] = map.at(c, sy, sx);
        }
    }
}

/// Per-pixel linear softmax head used during stage-1 training and as the
/// baseline labeler; no bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub classes: usize,
    pub dim: usize,
    /// classes x dim, row-major.
    pub w: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearClassifier {
            classes,
            dim,
            w: vec![0.0; classes * dim],
        }
    }

    pub fn random(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        LinearClassifier {
            classes,
            dim,
            w: (0..classes * dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|a| {
                self.w[a * self.dim..(a + 1) * self.dim]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<ClassDistribution> {
        softmax(&self.logits(x))
    }

    pub fn sgd_update(&mut self, grads: &[f64], lr: f64, weight_decay: f64) {
        for (w, g) in self.w.iter_mut().zip(grads) {
            *w -= lr * (g + weight_decay * *w);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Natural,
    Balanced,
}

#[derive(Debug, Clone)]
pub struct Stage1Options {
    pub sampling: Sampling,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pixels_per_image: usize,
    pub jitter: bool,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            sampling: Sampling::Balanced,
            epochs: 12,
            lr: 0.02,
            weight_decay: 1e-7,
            seed: 1,
            pixels_per_image: 64,
            jitter: false,
        }
    }
}

pub struct Stage1Result {
    pub params: MsNetParams,
    pub linear: LinearClassifier,
    pub epoch_losses: Vec<f64>,
    /// How often each class was sampled, summed over the whole run.
    pub sample_counts: Vec<u64>,
}

/// Mean cross-entropy over the sampled pixels of one image, plus averaged
/// gradients for the banks and the linear head.
pub fn stage1_image_step(
    params: &MsNetParams,
    linear: &LinearClassifier,
    config: &NetConfig,
    pyramid: &Pyramid,
    samples: &[(usize, usize, u8)],
) -> Result<(f64, Vec<FilterBankGrad>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("no sampled pixels".into()));
    }
    let traces: Vec<ScaleTrace> = pyramid
        .levels
        .iter()
        .map(|level| forward_one_scale_traced(level, params, config))
        .collect::<Result<_>>()?;
    let native: Vec<&FeatureVolume> = traces.iter().map(|t| &t.output).collect();
    let per_scale = config.per_scale_channels();
    let dim = config.feature_dim();

    let mut d_native: Vec<FeatureVolume> = native
        .iter()
        .map(|m| FeatureVolume::zeros(m.channels(), m.height(), m.width()))
        .collect();
    let mut d_linear = vec![0.0; linear.w.len()];
    let mut x = vec![0.0; dim];
    let mut loss_sum = 0.0;
    for &(y, px, target) in samples {
        for (s, map) in native.iter().enumerate() {
            let f = config.scale_factor(s);
            let (sy, sx) = (y / f, px / f);
            for c in 0..per_scale {
                x[s * per_scale + c] = map.at(c, sy, sx);
            }
        }
        let pred = softmax(&linear.logits(&x))?;
        let target_dist = ClassDistribution::one_hot(linear.classes, target as usize);
        loss_sum += cross_entropy(&pred, &target_dist)?;
        for a in 0..linear.classes {
            let d = pred.probs()[a] - target_dist.probs()[a];
            let row = &linear.w[a * dim..(a + 1) * dim];
            let grow = &mut d_linear[a * dim..(a + 1) * dim];
            for j in 0..dim {
                grow[j] += d * x[j];
            }
            // feature gradient, scattered to the native cells
            for (s, dmap) in d_native.iter_mut().enumerate() {
                let f = config.scale_factor(s);
                let (sy, sx) = (y / f, px / f);
                for c in 0..per_scale {
                    let idx = dmap.idx(c, sy, sx);
                    dmap.data_mut()[idx] += d * row[s * per_scale + c];
                }
            }
        }
    }
    let scale = 1.0 / samples.len() as f64;
    for g in &mut d_linear {
        *g *= scale;
    }
    let mut bank_grads = params.zero_grads();
    for (trace, mut d_out) in traces.iter().zip(d_native) {
        for v in d_out.data_mut() {
            *v *= scale;
        }
        backward_one_scale(trace, params, config, &d_out, &mut bank_grads)?;
    }
    Ok((loss_sum * scale, bank_grads, d_linear))
}

fn draw_samples(
    labels: &LabelMap,
    sampling: Sampling,
    k: usize,
    rng: &mut ChaCha8Rng,
    n_classes: usize,
) -> Vec<(usize, usize, u8)> {
    let w = labels.width();
    match sampling {
        Sampling::Natural => {
            let valid: Vec<u32> = (0..labels.labels().len() as u32)
                .filter(|&i| labels.labels()[i as usize] != VOID_LABEL)
                .collect();
            if valid.is_empty() {
                return Vec::new();
            }
            (0..k)
                .map(|_| {
                    let p = valid[rng.random_range(0..valid.len())] as usize;
                    (p / w, p % w, labels.labels()[p])
                })
                .collect()
        }
        Sampling::Balanced => {
            let mut per_class: Vec<Vec<u32>> = vec![Vec::new(); n_classes];
            for (i, &l) in labels.labels().iter().enumerate() {
                if l != VOID_LABEL {
                    per_class[l as usize].push(i as u32);
                }
            }
            let present: Vec<usize> = (0..n_classes)
                .filter(|&c| !per_class[c].is_empty())
                .collect();
            if present.is_empty() {
                return Vec::new();
            }
            (0..k)
                .map(|_| {
                    let class = present[rng.random_range(0..present.len())];
                    let list = &per_class[class];
                    let p = list[rng.random_range(0..list.len())] as usize;
                    (p / w, p % w, class as u8)
                })
                .collect()
        }
    }
}

/// Trains the shared banks and the pixel head; the head's weights are kept
/// for the baseline labeler even though the cover pipeline discards its
/// role after this stage.
pub fn train_stage1(
    dataset: &Dataset,
    config: &NetConfig,
    opts: &Stage1Options,
) -> Result<Stage1Result> {
    if dataset.is_empty() {
        return Err(Error::Empty("stage-1 training dataset".into()));
    }
    let n_classes = dataset.n_classes();
    config.validate(3)?;
    if opts.sampling == Sampling::Balanced {
        for c in 0..n_classes {
            let present = dataset.pairs.iter().any(|(_, l)| {
                l.labels().iter().any(|&v| v as usize == c)
            });
            if !present {
                eprintln!(
                    "warning: class {c} ({}) absent from training data; balanced sampling skips it",
                    dataset.class_names[c]
                );
            }
        }
    }

    let mut params = MsNetParams::init(config, 3, opts.seed)?;
    let mut linear = LinearClassifier::random(n_classes, config.feature_dim(), opts.seed ^ 0x11ea);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5a3b1e);

    let mut pyramid_cache: Vec<Option<Pyramid>> = vec![None; dataset.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut sample_counts = vec![0u64; n_classes];

    for _ in 0..opts.epochs {
        for i in 0..order.len() {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut n_images = 0usize;
        for &idx in &order {
            let (image, labels) = &dataset.pairs[idx];
            let (pyramid, samples) = if opts.jitter {
                let (jimg, jlab) = crate::jitter::jitter(image, labels, &mut rng);
                let pyr = laplacian_pyramid(&jimg, config.n_scales, config.norm_window)?;
                let samples =
                    draw_samples(&jlab, opts.sampling, opts.pixels_per_image, &mut rng, n_classes);
                (pyr, samples)
            } else {
                if pyramid_cache[idx].is_none() {
                    pyramid_cache[idx] =
                        Some(laplacian_pyramid(image, config.n_scales, config.norm_window)?);
                }
                let samples =
                    draw_samples(labels, opts.sampling, opts.pixels_per_image, &mut rng, n_classes);
                (pyramid_cache[idx].clone().unwrap(), samples)
            };
            if samples.is_empty() {
                continue;
            }
            for &(_, _, c) in &samples {
                sample_counts[c as usize] += 1;
            }
            let (loss, bank_grads, lin_grads) =
                stage1_image_step(&params, &linear, config, &pyramid, &samples)?;
            for (bank, grad) in params.banks.iter_mut().zip(&bank_grads) {
                bank.sgd_update(grad, opts.lr, opts.weight_decay);
            }
            linear.sgd_update(&lin_grads, opts.lr, opts.weight_decay);
            loss_sum += loss;
            n_images += 1;
        }
        if n_images == 0 {
            return Err(Error::Empty("no labeled pixels in any image".into()));
        }
        epoch_losses.push(loss_sum / n_images as f64);
    }
    Ok(Stage1Result {
        params,
        linear,
        epoch_losses,
        sample_counts,
    })
}
