//! Layer primitives with hand-written adjoints.
//!
//! Activations are `[channels, time]` tensors. Each forward function has a
//! matching backward that maps the output gradient to input and parameter
//! gradients.

use super::{NnError, Tensor};

/// One-hot columns: `[num_classes, labels.len()]`.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor, NnError> {
    if labels.is_empty() || num_classes == 0 {
        return Err(NnError::ShapeMismatch("one_hot needs labels and classes".into()));
    }
    let t_len = labels.len();
    let mut out = Tensor::zeros(&[num_classes, t_len]);
    for (t, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(NnError::LabelOutOfRange { label: l, classes: num_classes });
        }
        out.data_mut()[l * t_len + t] = 1.0;
    }
    Ok(out)
}

fn conv_dims(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
    let (c, t) = input.expect_rank2("conv input")?;
    let &[f, kc, k] = kernels.shape() else {
        return Err(NnError::ShapeMismatch(format!("kernels must be rank 3, got {:?}", kernels.shape())));
    };
    if kc != c || bias.shape() != [f] || t < k {
        return Err(NnError::ShapeMismatch(format!(
            "conv input {:?}, kernels {:?}, bias {:?}",
            input.shape(),
            kernels.shape(),
            bias.shape()
        )));
    }
    Ok((c, t, f, k))
}

/// Valid 1-D convolution, stride 1:
/// `out[f, t] = bias[f] + sum_{c, d} kernels[f, c, d] * input[c, t + d]`.
pub fn conv1d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let (c_n, t_n, f_n, k_n) = conv_dims(input, kernels, bias)?;
    let out_len = t_n - k_n + 1;
    let (x, w) = (input.data(), kernels.data());
    let mut out = Tensor::zeros(&[f_n, out_len]);
    let o = out.data_mut();
    for f in 0..f_n {
        for t in 0..out_len {
            let mut acc = bias.data()[f];
            // tap-major order matches the one-hot fast path bit for bit
            for d in 0..k_n {
                for c in 0..c_n {
                    let v = x[c * t_n + t + d];
                    if v != 0.0 {
                        acc += w[(f * c_n + c) * k_n + d] * v;
                    }
                }
            }
            o[f * out_len + t] = acc;
        }
    }
    Ok(out)
}

/// Convolution of a one-hot encoded label window without materializing it.
pub fn conv1d_one_hot(labels: &[usize], kernels: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let &[f_n, c_n, k_n] = kernels.shape() else {
        return Err(NnError::ShapeMismatch("kernels must be rank 3".into()));
    };
    if labels.len() < k_n || bias.shape() != [f_n] {
        return Err(NnError::ShapeMismatch(format!("window {} vs kernel width {k_n}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c_n) {
        return Err(NnError::LabelOutOfRange { label: l, classes: c_n });
    }
    let out_len = labels.len() - k_n + 1;
    let w = kernels.data();
    let mut out = Tensor::zeros(&[f_n, out_len]);
    let o = out.data_mut();
    for f in 0..f_n {
        for t in 0..out_len {
            let mut acc = bias.data()[f];
            for d in 0..k_n {
                acc += w[(f * c_n + labels[t + d]) * k_n + d] * 1.0;
            }
            o[f * out_len + t] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Adjoint of [`conv1d`].
pub fn conv1d_backward(input: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<ConvGrads, NnError> {
    let bias_shape = Tensor::zeros(&[kernels.shape().first().copied().unwrap_or(1)]);
    let (c_n, t_n, f_n, k_n) = conv_dims(input, kernels, &bias_shape)?;
    let out_len = t_n - k_n + 1;
    if grad_out.shape() != [f_n, out_len] {
        return Err(NnError::ShapeMismatch(format!("conv grad {:?}", grad_out.shape())));
    }
    let (x, w, g) = (input.data(), kernels.data(), grad_out.data());
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(kernels.shape());
    let mut gb = Tensor::zeros(&[f_n]);
    for f in 0..f_n {
        for t in 0..out_len {
            let go = g[f * out_len + t];
            gb.data_mut()[f] += go;
            for d in 0..k_n {
                for c in 0..c_n {
                    let wi = (f * c_n + c) * k_n + d;
                    let xi = c * t_n + t + d;
                    let v = x[xi];
                    if v != 0.0 {
                        gw.data_mut()[wi] += go * v;
                    }
                    gx.data_mut()[xi] += go * w[wi];
                }
            }
        }
    }
    Ok(ConvGrads { input: gx, kernels: gw, bias: gb })
}

/// Kernel and bias gradients for a one-hot window (the input gradient is
/// never needed there).
pub fn conv1d_one_hot_backward(labels: &[usize], kernels: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let &[f_n, c_n, k_n] = kernels.shape() else { unreachable!("validated in forward") };
    let out_len = labels.len() - k_n + 1;
    let g = grad_out.data();
    let mut gw = Tensor::zeros(kernels.shape());
    let mut gb = Tensor::zeros(&[f_n]);
    for f in 0..f_n {
        for t in 0..out_len {
            let go = g[f * out_len + t];
            gb.data_mut()[f] += go;
            for d in 0..k_n {
                gw.data_mut()[(f * c_n + labels[t + d]) * k_n + d] += go * 1.0;
            }
        }
    }
    (gw, gb)
}

/// Parametric ReLU with one slope per channel.
pub fn prelu(input: &Tensor, slopes: &Tensor) -> Result<Tensor, NnError> {
    let (c_n, t_n) = input.expect_rank2("prelu input")?;
    if slopes.shape() != [c_n] {
        return Err(NnError::ShapeMismatch(format!("prelu slopes {:?} for {c_n} channels", slopes.shape())));
    }
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if *v <= 0.0 {
            *v *= slopes.data()[i / t_n];
        }
    }
    Ok(out)
}

/// Gradients of [`prelu`] w.r.t. input and slopes. At exactly zero the
/// positive branch is used.
pub fn prelu_backward(input: &Tensor, slopes: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor), NnError> {
    let (c_n, t_n) = input.expect_rank2("prelu input")?;
    if slopes.shape() != [c_n] || grad_out.shape() != input.shape() {
        return Err(NnError::ShapeMismatch("prelu backward".into()));
    }
    let mut gx = grad_out.clone();
    let mut ga = Tensor::zeros(&[c_n]);
    for (i, (g, &x)) in gx.data_mut().iter_mut().zip(input.data()).enumerate() {
        if x < 0.0 {
            let c = i / t_n;
            ga.data_mut()[c] += *g * x;
            *g *= slopes.data()[c];
        }
    }
    Ok((gx, ga))
}

pub fn pool_len(t: usize, width: usize, stride: usize) -> usize {
    (t - width) / stride + 1
}

/// Max pooling along time. Returns the output and, for each output cell, the
/// flat input index that won (first maximum on ties).
pub fn maxpool1d(input: &Tensor, width: usize, stride: usize) -> Result<(Tensor, Vec<usize>), NnError> {
    let (c_n, t_n) = input.expect_rank2("pool input")?;
    if width == 0 || stride == 0 || t_n < width {
        return Err(NnError::ShapeMismatch(format!("pool width {width} stride {stride} over length {t_n}")));
    }
    let out_len = pool_len(t_n, width, stride);
    let x = input.data();
    let mut out = Tensor::zeros(&[c_n, out_len]);
    let mut arg = vec![0usize; c_n * out_len];
    for c in 0..c_n {
        for o in 0..out_len {
            let start = c * t_n + o * stride;
            let mut best = start;
            for i in start + 1..start + width {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.data_mut()[c * out_len + o] = x[best];
            arg[c * out_len + o] = best;
        }
    }
    Ok((out, arg))
}

/// Routes each output gradient to its winning input cell.
pub fn maxpool1d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

/// Cross-channel local response normalization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub k: f64,
    pub n_neighbors: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self { k: 1.0, n_neighbors: 5, alpha: 1e-4, beta: 0.75 }
    }
}

impl LrnParams {
    /// Channel window `[lo, hi]` around `c`, clipped to `[0, channels)`.
    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let before = (self.n_neighbors - 1) / 2;
        let after = self.n_neighbors / 2;
        (c.saturating_sub(before), (c + after).min(channels - 1))
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_neighbors == 0 || !(self.k > 0.0) || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(NnError::InvalidConfig(format!("bad LRN parameters {self:?}")));
        }
        Ok(())
    }
}

/// `out[c,t] = in[c,t] / (k + alpha * sum_{c' in N(c)} in[c',t]^2)^beta`.
///
/// Returns the output and the denominator base `S[c,t]` for the backward pass.
pub fn lrn(input: &Tensor, p: &LrnParams) -> Result<(Tensor, Tensor), NnError> {
    p.validate()?;
    let (c_n, t_n) = input.expect_rank2("lrn input")?;
    let x = input.data();
    let mut scale = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for c in 0..c_n {
        let (lo, hi) = p.window(c, c_n);
        for t in 0..t_n {
            let sq: f64 = (lo..=hi).map(|cc| x[cc * t_n + t] * x[cc * t_n + t]).sum();
            let s = p.k + p.alpha * sq;
            scale.data_mut()[c * t_n + t] = s;
            out.data_mut()[c * t_n + t] = x[c * t_n + t] * s.powf(-p.beta);
        }
    }
    Ok((out, scale))
}

/// Adjoint of [`lrn`].
pub fn lrn_backward(input: &Tensor, scale: &Tensor, grad_out: &Tensor, p: &LrnParams) -> Tensor {
    let (c_n, t_n) = (input.dim(0), input.dim(1));
    let (x, s, g) = (input.data(), scale.data(), grad_out.data());
    let mut gx = Tensor::zeros(input.shape());
    for c in 0..c_n {
        let (lo, hi) = p.window(c, c_n);
        for t in 0..t_n {
            let i = c * t_n + t;
            let gi = g[i];
            gx.data_mut()[i] += gi * s[i].powf(-p.beta);
            // d S[c,t] / d x[c',t] = 2 alpha x[c',t] for c' in N(c)
            let common = -2.0 * p.alpha * p.beta * gi * x[i] * s[i].powf(-p.beta - 1.0);
            for cc in lo..=hi {
                gx.data_mut()[cc * t_n + t] += common * x[cc * t_n + t];
            }
        }
    }
    gx
}

/// Output of [`softmax_cross_entropy`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxCe {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grad_w: Tensor,
    pub grad_features: Vec<f64>,
}

/// Numerically stable softmax over `w · x` (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

pub fn logits(features: &[f64], w: &Tensor) -> Result<Vec<f64>, NnError> {
    let (k, f) = w.expect_rank2("softmax weights")?;
    if f != features.len() {
        return Err(NnError::ShapeMismatch(format!("weights {k}x{f} vs {} features", features.len())));
    }
    Ok(w.data().chunks_exact(f).map(|row| row.iter().zip(features).map(|(a, b)| a * b).sum()).collect())
}

/// Softmax classifier loss `-log p(label | x; w)` with gradients.
pub fn softmax_cross_entropy(features: &[f64], w: &Tensor, label: usize) -> Result<SoftmaxCe, NnError> {
    let z = logits(features, w)?;
    let k = z.len();
    if label >= k {
        return Err(NnError::LabelOutOfRange { label, classes: k });
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let loss = lse - z[label];
    let probs = softmax(&z);
    let f = features.len();
    let mut grad_w = Tensor::zeros(w.shape());
    let mut grad_features = vec![0.0; f];
    for j in 0..k {
        let gz = probs[j] - if j == label { 1.0 } else { 0.0 };
        let row = &w.data()[j * f..(j + 1) * f];
        for (i, (gw, gx)) in grad_w.data_mut()[j * f..(j + 1) * f].iter_mut().zip(&mut grad_features).enumerate() {
            *gw = gz * features[i];
            *gx += gz * row[i];
        }
    }
    Ok(SoftmaxCe { loss, probs, grad_w, grad_features })
}
