//! Convolution, pooling and squashing layers with hand-written backward
//! passes. Convolution uses cross-correlation orientation (no kernel flip)
//! and zero padding; filter banks may be sparsely connected, one kernel per
//! (output, input) channel pair.

use crate::error::{Error, Result};
use crate::volume::FeatureVolume;
use rand::Rng;

/// A bank of 2D kernels with a connection table. Each entry of
/// `connections` is an (out_channel, in_channel) pair owning one
/// `kernel_size^2` kernel; each output channel additionally has a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    out_channels: usize,
    kernel_size: usize,
    connections: Vec<(usize, usize)>,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

/// Gradients mirroring a `FilterBank`'s parameter layout.
#[derive(Debug, Clone)]
pub struct FilterBankGrad {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl FilterBank {
    /// Zero-initialized bank. Rejects even kernels and output channels
    /// without any incoming connection.
    pub fn new(
        out_channels: usize,
        kernel_size: usize,
        connections: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if out_channels == 0 {
            return Err(Error::invalid("filter bank needs at least one output"));
        }
        let mut seen = vec![false; out_channels];
        for &(p, _) in &connections {
            if p >= out_channels {
                return Err(Error::invalid(format!(
                    "connection references output channel {p} >= {out_channels}"
                )));
            }
            seen[p] = true;
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!(
                "output channel {p} has no incoming connection"
            )));
        }
        let k2 = kernel_size * kernel_size;
        let weights = vec![vec![0.0; k2]; connections.len()];
        let biases = vec![0.0; out_channels];
        Ok(Self {
            out_channels,
            kernel_size,
            connections,
            weights,
            biases,
        })
    }

    /// Dense bank: every output connected to every input channel.
    pub fn fully_connected(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        let mut connections = Vec::with_capacity(in_channels * out_channels);
        for p in 0..out_channels {
            for q in 0..in_channels {
                connections.push((p, q));
            }
        }
        Self::new(out_channels, kernel_size, connections)
    }

    /// Sparse bank: each output map connects to `fan_in` distinct input
    /// channels drawn uniformly from the table RNG.
    pub fn random_table(
        in_channels: usize,
        out_channels: usize,
        fan_in: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if fan_in == 0 || fan_in > in_channels {
            return Err(Error::invalid(format!(
                "fan_in {fan_in} out of range for {in_channels} input channels"
            )));
        }
        let mut connections = Vec::with_capacity(out_channels * fan_in);
        let mut pool: Vec<usize> = (0..in_channels).collect();
        for p in 0..out_channels {
            // partial Fisher-Yates, then sort for a canonical table
            for i in 0..fan_in {
                let j = rng.random_range(i..in_channels);
                pool.swap(i, j);
            }
            let mut picked: Vec<usize> = pool[..fan_in].to_vec();
            picked.sort_unstable();
            for q in picked {
                connections.push((p, q));
            }
        }
        Self::new(out_channels, kernel_size, connections)
    }

    /// Uniform init in +-1/sqrt(fan_in * k^2), fan-in counted per output map.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        let k2 = self.kernel_size * self.kernel_size;
        let mut fan_in = vec![0usize; self.out_channels];
        for &(p, _) in &self.connections {
            fan_in[p] += 1;
        }
        for (ci, &(p, _)) in self.connections.iter().enumerate() {
            let bound = 1.0 / ((fan_in[p] * k2) as f64).sqrt();
            for w in &mut self.weights[ci] {
                *w = rng.random_range(-bound..bound);
            }
        }
        for (p, b) in self.biases.iter_mut().enumerate() {
            let bound = 1.0 / ((fan_in[p] * k2) as f64).sqrt();
            *b = rng.random_range(-bound..bound);
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn connections(&self) -> &[(usize, usize)] {
        &self.connections
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn zero_grad(&self) -> FilterBankGrad {
        FilterBankGrad {
            weights: self
                .weights
                .iter()
                .map(|w| vec![0.0; w.len()])
                .collect(),
            biases: vec![0.0; self.biases.len()],
        }
    }

    /// SGD update; weight decay applies to kernels only, never biases.
    pub fn sgd_update(&mut self, grad: &FilterBankGrad, lr: f64, weight_decay: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * (gi + weight_decay * *wi);
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grad.biases) {
            *b -= lr * g;
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for w in &self.weights {
            out.extend_from_slice(w);
        }
        out.extend_from_slice(&self.biases);
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} bank parameters, got {}",
                self.param_count(),
                src.len()
            )));
        }
        let mut off = 0;
        for w in &mut self.weights {
            let n = w.len();
            w.copy_from_slice(&src[off..off + n]);
            off += n;
        }
        self.biases.copy_from_slice(&src[off..]);
        Ok(())
    }
}

impl FilterBankGrad {
    pub fn accumulate(&mut self, other: &FilterBankGrad) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            for (wi, oi) in w.iter_mut().zip(o) {
                *wi += oi;
            }
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for wi in w.iter_mut() {
                *wi *= s;
            }
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for w in &self.weights {
            out.extend_from_slice(w);
        }
        out.extend_from_slice(&self.biases);
    }
}

fn padded_channels(input: &FeatureVolume, pad: usize) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = input.shape();
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let mut buf = vec![0.0; c * ph * pw];
    for q in 0..c {
        for y in 0..h {
            let src = input.row(q, y);
            let dst = (q * ph + y + pad) * pw + pad;
            buf[dst..dst + w].copy_from_slice(src);
        }
    }
    (buf, ph, pw)
}

/// Cross-correlate `input` against `bank` with zero padding `pad`.
/// Output channel p = bias_p + sum over its connections of kernel * input.
pub fn conv2d(input: &FeatureVolume, bank: &FilterBank, pad: usize) -> Result<FeatureVolume> {
    let (in_c, h, w) = input.shape();
    let k = bank.kernel_size;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(format!(
            "input {h}x{w} with pad {pad} smaller than kernel {k}x{k}"
        )));
    }
    for &(_, q) in &bank.connections {
        if q >= in_c {
            return Err(Error::shape(format!(
                "connection reads input channel {q} but input has {in_c}"
            )));
        }
    }
    let out_h = h + 2 * pad - k + 1;
    let out_w = w + 2 * pad - k + 1;
    let (padded, ph, pw) = padded_channels(input, pad);
    let _ = ph;

    let mut out = FeatureVolume::zeros(bank.out_channels, out_h, out_w);
    for p in 0..bank.out_channels {
        let b = bank.biases[p];
        out.channel_mut(p).fill(b);
    }
    for (ci, &(p, q)) in bank.connections.iter().enumerate() {
        let ker = &bank.weights[ci];
        let src_base = q * (h + 2 * pad) * pw;
        let dst = out.channel_mut(p);
        for ky in 0..k {
            for kx in 0..k {
                let wv = ker[ky * k + kx];
                for oy in 0..out_h {
                    let s = src_base + (oy + ky) * pw + kx;
                    let src_row = &padded[s..s + out_w];
                    let dst_row = &mut dst[oy * out_w..oy * out_w + out_w];
                    for (d, v) in dst_row.iter_mut().zip(src_row) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a conv2d output w.r.t. its input and parameters.
pub fn conv2d_backward(
    input: &FeatureVolume,
    bank: &FilterBank,
    pad: usize,
    d_out: &FeatureVolume,
) -> Result<(FeatureVolume, FilterBankGrad)> {
    let (in_c, h, w) = input.shape();
    let k = bank.kernel_size;
    let out_h = h + 2 * pad - k + 1;
    let out_w = w + 2 * pad - k + 1;
    if d_out.shape() != (bank.out_channels, out_h, out_w) {
        return Err(Error::shape(format!(
            "d_out shape {:?} does not match conv output {:?}",
            d_out.shape(),
            (bank.out_channels, out_h, out_w)
        )));
    }
    let (padded, _ph, pw) = padded_channels(input, pad);
    let mut grad = bank.zero_grad();
    let mut d_pad = vec![0.0; padded.len()];

    for (ci, &(p, q)) in bank.connections.iter().enumerate() {
        let ker = &bank.weights[ci];
        let gker = &mut grad.weights[ci];
        let src_base = q * (h + 2 * pad) * pw;
        let dch = d_out.channel(p);
        for ky in 0..k {
            for kx in 0..k {
                let wv = ker[ky * k + kx];
                let mut gsum = 0.0;
                for oy in 0..out_h {
                    let s = src_base + (oy + ky) * pw + kx;
                    let drow = &dch[oy * out_w..oy * out_w + out_w];
                    let srow = &padded[s..s + out_w];
                    let prow = &mut d_pad[s..s + out_w];
                    let mut acc = 0.0;
                    for ((g, d), v) in prow.iter_mut().zip(drow).zip(srow) {
                        *g += wv * d;
                        acc += d * v;
                    }
                    gsum += acc;
                }
                gker[ky * k + kx] += gsum;
            }
        }
    }
    for p in 0..bank.out_channels {
        grad.biases[p] += d_out.channel(p).iter().sum::<f64>();
    }

    let mut d_in = FeatureVolume::zeros(in_c, h, w);
    for q in 0..in_c {
        for y in 0..h {
            let s = (q * (h + 2 * pad) + y + pad) * pw + pad;
            let dst = d_in.channel_mut(q);
            dst[y * w..y * w + w].copy_from_slice(&d_pad[s..s + w]);
        }
    }
    Ok((d_in, grad))
}

/// 2x2 max pooling with ceil-halved output dims. Odd trailing rows/cols
/// pool over the cells that exist (equivalent to -inf padding).
pub fn maxpool2(input: &FeatureVolume) -> FeatureVolume {
    maxpool2_with_argmax(input).0
}

/// Max pooling that also records, per output cell, the flat input index of
/// the winning element (first in row-major scan order on ties).
pub fn maxpool2_with_argmax(input: &FeatureVolume) -> (FeatureVolume, Vec<usize>) {
    let (c, h, w) = input.shape();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = FeatureVolume::zeros(c, oh, ow);
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    let y = oy * 2 + dy;
                    if y >= h {
                        break;
                    }
                    for dx in 0..2 {
                        let x = ox * 2 + dx;
                        if x >= w {
                            break;
                        }
                        let idx = (ch * h + y) * w + x;
                        let v = input.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let oidx = (ch * oh + oy) * ow + ox;
                out.data_mut()[oidx] = best;
                argmax[oidx] = best_idx;
            }
        }
    }
    (out, argmax)
}

/// Routes each output gradient to the recorded argmax input position.
pub fn maxpool2_backward(
    input_shape: (usize, usize, usize),
    argmax: &[usize],
    d_out: &FeatureVolume,
) -> FeatureVolume {
    let (c, h, w) = input_shape;
    let mut d_in = FeatureVolume::zeros(c, h, w);
    for (i, &src) in argmax.iter().enumerate() {
        d_in.data_mut()[src] += d_out.data()[i];
    }
    d_in
}

/// Elementwise hyperbolic tangent.
pub fn tanh_map(input: &FeatureVolume) -> FeatureVolume {
    input.map(f64::tanh)
}

/// Backward of `tanh_map`, given the forward *output*.
pub fn tanh_backward(output: &FeatureVolume, d_out: &FeatureVolume) -> FeatureVolume {
    assert!(output.same_shape(d_out));
    let mut d_in = d_out.clone();
    for (d, &o) in d_in.data_mut().iter_mut().zip(output.data()) {
        *d *= 1.0 - o * o;
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> FeatureVolume {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVolume::from_vec(c, h, w, data).unwrap()
    }

    use crate::oracle::conv_reference as conv_oracle;

    #[test]
    fn identity_kernel_preserves_input() {
        let input = FeatureVolume::from_vec(1, 3, 3, (1..=9).map(|v| v as f64).collect()).unwrap();
        let mut bank = FilterBank::fully_connected(1, 1, 1).unwrap();
        bank.weights_mut()[0][0] = 1.0;
        let out = conv2d(&input, &bank, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_volume(1, 5, 5, &mut rng);
        let mut bank = FilterBank::fully_connected(1, 1, 3).unwrap();
        bank.init_uniform(&mut rng);
        let fast = conv2d(&input, &bank, 1).unwrap();
        let slow = conv_oracle(&input, &bank, 1);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn conv_oracle_sparse_connections_and_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(in_c, out_c, k, pad) in &[(3, 4, 3, 1), (2, 3, 5, 2), (4, 2, 3, 0)] {
            let mut bank = FilterBank::random_table(in_c, out_c, in_c.min(2), k, &mut rng).unwrap();
            bank.init_uniform(&mut rng);
            let input = random_volume(in_c, 7, 6, &mut rng);
            let fast = conv2d(&input, &bank, pad).unwrap();
            let slow = conv_oracle(&input, &bank, pad);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn size_preserving_padding_keeps_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = random_volume(3, 320, 240, &mut rng);
        let mut bank = FilterBank::fully_connected(3, 16, 7).unwrap();
        bank.init_uniform(&mut rng);
        let out = conv2d(&input, &bank, 3).unwrap();
        assert_eq!(out.shape(), (16, 320, 240));
    }

    #[test]
    fn conv_is_linear_in_input_with_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut bank = FilterBank::fully_connected(2, 3, 3).unwrap();
        bank.init_uniform(&mut rng);
        for b in bank.biases_mut() {
            *b = 0.0;
        }
        let x = random_volume(2, 6, 6, &mut rng);
        let y = random_volume(2, 6, 6, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mixed = FeatureVolume::from_vec(
            2,
            6,
            6,
            x.data()
                .iter()
                .zip(y.data())
                .map(|(xi, yi)| a * xi + b * yi)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d(&mixed, &bank, 1).unwrap();
        let cx = conv2d(&x, &bank, 1).unwrap();
        let cy = conv2d(&y, &bank, 1).unwrap();
        let rhs = FeatureVolume::from_vec(
            3,
            6,
            6,
            cx.data()
                .iter()
                .zip(cy.data())
                .map(|(xi, yi)| a * xi + b * yi)
                .collect(),
        )
        .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(FilterBank::fully_connected(1, 1, 4).is_err());
    }

    #[test]
    fn conv_rejects_out_of_range_input_channel() {
        let bank = FilterBank::new(1, 3, vec![(0, 2)]).unwrap();
        let input = FeatureVolume::zeros(2, 5, 5);
        assert!(conv2d(&input, &bank, 1).is_err());
    }

    #[test]
    fn maxpool_basic_and_constant() {
        let v = FeatureVolume::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2(&v);
        assert_eq!(out.shape(), (1, 1, 1));
        assert_eq!(out.data(), &[4.0]);

        let c = FeatureVolume::filled(2, 4, 6, 3.5);
        let out = maxpool2(&c);
        assert_eq!(out.shape(), (2, 2, 3));
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn maxpool_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let input = random_volume(4, 6, 8, &mut rng);
        let out = maxpool2(&input);
        let (c, h, w) = input.shape();
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(input.at(ch, oy * 2 + dy, ox * 2 + dx));
                        }
                    }
                    assert_eq!(out.at(ch, oy, ox), best);
                }
            }
        }
    }

    #[test]
    fn maxpool_odd_dims_ceil() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let input = random_volume(1, 5, 3, &mut rng);
        let out = maxpool2(&input);
        assert_eq!(out.shape(), (1, 3, 2));
        // bottom-right cell pools the lone remaining element
        assert_eq!(out.at(0, 2, 1), input.at(0, 4, 2));
    }

    #[test]
    fn maxpool_backward_routes_to_first_argmax_on_ties() {
        let input = FeatureVolume::from_vec(1, 2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, argmax) = maxpool2_with_argmax(&input);
        assert_eq!(argmax, vec![0]);
        let d_out = FeatureVolume::from_vec(1, 1, 1, vec![2.0]).unwrap();
        let d_in = maxpool2_backward((1, 2, 2), &argmax, &d_out);
        assert_eq!(d_in.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_routes_each_gradient_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = random_volume(2, 6, 6, &mut rng);
        let (out, argmax) = maxpool2_with_argmax(&input);
        let d_out = FeatureVolume::filled(2, 3, 3, 1.0);
        let d_in = maxpool2_backward(input.shape(), &argmax, &d_out);
        let nonzero = d_in.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, out.data().len());
        assert_eq!(d_in.data().iter().sum::<f64>(), d_out.data().len() as f64);
    }

    #[test]
    fn tanh_zero_saturation_and_reference() {
        let z = FeatureVolume::zeros(1, 2, 2);
        assert_eq!(tanh_map(&z).data(), z.data());

        let big = FeatureVolume::filled(1, 1, 1, 1e6);
        assert!((tanh_map(&big).at(0, 0, 0) - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let v = random_volume(2, 3, 3, &mut rng);
        let out = tanh_map(&v);
        for (o, i) in out.data().iter().zip(v.data()) {
            assert!((o - i.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let input = random_volume(2, 5, 5, &mut rng);
        let mut bank = FilterBank::random_table(2, 3, 2, 3, &mut rng).unwrap();
        bank.init_uniform(&mut rng);
        // scalar loss: weighted sum of conv output
        let coefs = random_volume(3, 5, 5, &mut rng);

        let loss_of = |b: &FilterBank, inp: &FeatureVolume| {
            let out = conv2d(inp, b, 1).unwrap();
            out.data().iter().zip(coefs.data()).map(|(o, c)| o * c).sum::<f64>()
        };

        let (d_in, grad) = conv2d_backward(&input, &bank, 1, &coefs).unwrap();

        // parameter gradients
        let mut params = Vec::new();
        bank.write_params(&mut params);
        let mut analytic = Vec::new();
        grad.write_params(&mut analytic);
        let mut probe = bank.clone();
        let err = grad_check(
            |p| {
                probe.read_params(p).unwrap();
                loss_of(&probe, &input)
            },
            &params,
            &analytic,
            1e-5,
        );
        assert!(err < 1e-6, "param grad rel err {err}");

        // input gradients
        let err = grad_check(
            |p| {
                let v = FeatureVolume::from_vec(2, 5, 5, p.to_vec()).unwrap();
                loss_of(&bank, &v)
            },
            input.data(),
            d_in.data(),
            1e-5,
        );
        assert!(err < 1e-6, "input grad rel err {err}");
    }

    #[test]
    fn tanh_and_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let input = random_volume(2, 4, 4, &mut rng);
        let coefs = random_volume(2, 2, 2, &mut rng);

        let loss_of = |v: &FeatureVolume| {
            let t = tanh_map(v);
            let p = maxpool2(&t);
            p.data().iter().zip(coefs.data()).map(|(o, c)| o * c).sum::<f64>()
        };

        let t = tanh_map(&input);
        let (_, argmax) = maxpool2_with_argmax(&t);
        let d_pool = coefs.clone();
        let d_tanh = maxpool2_backward(t.shape(), &argmax, &d_pool);
        let d_in = tanh_backward(&t, &d_tanh);

        let err = grad_check(
            |p| {
                let v = FeatureVolume::from_vec(2, 4, 4, p.to_vec()).unwrap();
                loss_of(&v)
            },
            input.data(),
            d_in.data(),
            1e-5,
        );
        assert!(err < 1e-6, "tanh+pool grad rel err {err}");
    }
}
