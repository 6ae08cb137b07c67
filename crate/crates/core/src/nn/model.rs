//! The classifier network: conv -> PReLU -> max-pool -> LRN -> softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv1d, conv1d_one_hot, conv1d_one_hot_backward, conv1d_backward, logits, lrn, lrn_backward, maxpool1d,
    maxpool1d_backward, pool_len, prelu, prelu_backward, softmax, softmax_cross_entropy, LrnParams,
};
use super::{NnError, Tensor};

/// Convolution filters ("hidden units") per network.
pub const HIDDEN_UNITS: usize = 25;
/// Initial value of every convolution bias.
pub const CONV_BIAS_INIT: f64 = 0.9;
pub const PRELU_SLOPE_INIT: f64 = 0.25;

/// Where the normalization layer sits relative to pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOrder {
    PoolThenNorm,
    NormThenPool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub kernel_width: usize,
    pub pool_width: usize,
    pub pool_stride: usize,
    /// `None` disables the normalization layer.
    pub lrn: Option<LrnParams>,
    pub order: LayerOrder,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            kernel_width: 5,
            pool_width: 2,
            pool_stride: 2,
            lrn: Some(LrnParams::default()),
            order: LayerOrder::PoolThenNorm,
        }
    }
}

/// Optimizer and data-shape settings shared by every sub-model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the training stream.
    pub epochs: usize,
    pub seed: u64,
    /// History window length W.
    pub window: usize,
    pub train_fraction: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            window: 50,
            train_fraction: 19.0 / 23.0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.window == 0 {
            return bad("batch size, epochs and window must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train fraction must be in (0, 1]");
        }
        if self.net.kernel_width == 0 || self.net.pool_width == 0 || self.net.pool_stride == 0 {
            return bad("kernel and pool sizes must be positive");
        }
        if let Some(p) = &self.net.lrn {
            p.validate()?;
        }
        Ok(())
    }
}

/// Parameters and fixed shape of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub in_channels: usize,
    pub classes: usize,
    pub window: usize,
    pub kernel_width: usize,
    pub pool_width: usize,
    pub pool_stride: usize,
    pub lrn: Option<LrnParams>,
    pub order: LayerOrder,
    pub learning_rate: f64,
    pub seed: u64,
    /// `[HIDDEN_UNITS, in_channels, kernel_width]`
    pub conv_kernels: Tensor,
    /// `[HIDDEN_UNITS]`
    pub conv_bias: Tensor,
    /// `[HIDDEN_UNITS]`
    pub prelu_slopes: Tensor,
    /// `[classes, feature_len]`
    pub softmax_w: Tensor,
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub conv_kernels: Tensor,
    pub conv_bias: Tensor,
    pub prelu_slopes: Tensor,
    pub softmax_w: Tensor,
}

impl Grads {
    pub fn zeros_like(m: &CnnModel) -> Self {
        Self {
            conv_kernels: Tensor::zeros(m.conv_kernels.shape()),
            conv_bias: Tensor::zeros(m.conv_bias.shape()),
            prelu_slopes: Tensor::zeros(m.prelu_slopes.shape()),
            softmax_w: Tensor::zeros(m.softmax_w.shape()),
        }
    }

    fn add(&mut self, other: &Grads) {
        self.conv_kernels.axpy(1.0, &other.conv_kernels);
        self.conv_bias.axpy(1.0, &other.conv_bias);
        self.prelu_slopes.axpy(1.0, &other.prelu_slopes);
        self.softmax_w.axpy(1.0, &other.softmax_w);
    }

    /// Tensors in the fixed parameter order used everywhere.
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.conv_kernels, &self.conv_bias, &self.prelu_slopes, &self.softmax_w]
    }
}

/// A training example: a label window and a class index of the model.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub window: &'a [usize],
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean_loss: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Debug, Clone)]
enum ConvInput {
    Labels(Vec<usize>),
    Dense(Tensor),
}

#[derive(Debug, Clone)]
enum StageCache {
    Pool { in_shape: Vec<usize>, argmax: Vec<usize> },
    Norm { input: Tensor, scale: Tensor },
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    input: ConvInput,
    pre_activation: Tensor,
    stages: Vec<StageCache>,
    features: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Cache {
    /// PReLU sign pattern and pooling winners: the piecewise-linear regime the
    /// forward pass ran in.
    pub fn regime(&self) -> (Vec<bool>, Vec<usize>) {
        let signs = self.pre_activation.data().iter().map(|v| *v < 0.0).collect();
        let winners = self
            .stages
            .iter()
            .flat_map(|s| match s {
                StageCache::Pool { argmax, .. } => argmax.clone(),
                StageCache::Norm { .. } => Vec::new(),
            })
            .collect();
        (signs, winners)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-s..s)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl CnnModel {
    /// Fresh network: biases at [`CONV_BIAS_INIT`], slopes at
    /// [`PRELU_SLOPE_INIT`], weights Glorot-uniform from `seed`.
    pub fn init(in_channels: usize, classes: usize, cfg: &TrainConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        if in_channels == 0 || classes == 0 {
            return Err(NnError::InvalidConfig("channels and classes must be positive".into()));
        }
        let window = cfg.window;
        // Short windows shrink the kernel and pool so every layer stays valid.
        let kernel_width = cfg.net.kernel_width.min(window);
        let conv_len = window - kernel_width + 1;
        let pool_width = cfg.net.pool_width.min(conv_len);
        let pool_stride = cfg.net.pool_stride;
        let feature_len = HIDDEN_UNITS * pool_len(conv_len, pool_width, pool_stride);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv_kernels = uniform(
            &mut rng,
            &[HIDDEN_UNITS, in_channels, kernel_width],
            in_channels * kernel_width,
            HIDDEN_UNITS * kernel_width,
        );
        let softmax_w = uniform(&mut rng, &[classes, feature_len], feature_len, classes);
        Ok(Self {
            in_channels,
            classes,
            window,
            kernel_width,
            pool_width,
            pool_stride,
            lrn: cfg.net.lrn,
            order: cfg.net.order,
            learning_rate: cfg.learning_rate,
            seed,
            conv_kernels,
            conv_bias: Tensor::full(&[HIDDEN_UNITS], CONV_BIAS_INIT),
            prelu_slopes: Tensor::full(&[HIDDEN_UNITS], PRELU_SLOPE_INIT),
            softmax_w,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.softmax_w.dim(1)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.conv_kernels, &self.conv_bias, &self.prelu_slopes, &self.softmax_w]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.conv_kernels, &mut self.conv_bias, &mut self.prelu_slopes, &mut self.softmax_w]
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.all_finite())
    }

    fn check_window(&self, len: usize) -> Result<(), NnError> {
        if len != self.window {
            return Err(NnError::ShapeMismatch(format!("window of {len}, model expects {}", self.window)));
        }
        Ok(())
    }

    /// Forward pass on a dense `[in_channels, window]` input.
    pub fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, Cache), NnError> {
        let (c, t) = input.expect_rank2("model input")?;
        if c != self.in_channels {
            return Err(NnError::ShapeMismatch(format!("{c} input channels, model expects {}", self.in_channels)));
        }
        self.check_window(t)?;
        let pre = conv1d(input, &self.conv_kernels, &self.conv_bias)?;
        self.forward_from_conv(ConvInput::Dense(input.clone()), pre)
    }

    /// Forward pass on a label window, one-hot encoded implicitly.
    pub fn forward_window(&self, window: &[usize]) -> Result<(Vec<f64>, Cache), NnError> {
        self.check_window(window.len())?;
        let pre = conv1d_one_hot(window, &self.conv_kernels, &self.conv_bias)?;
        self.forward_from_conv(ConvInput::Labels(window.to_vec()), pre)
    }

    fn forward_from_conv(&self, input: ConvInput, pre: Tensor) -> Result<(Vec<f64>, Cache), NnError> {
        let mut x = prelu(&pre, &self.prelu_slopes)?;
        let mut stages = Vec::with_capacity(2);
        let pool_first = self.order == LayerOrder::PoolThenNorm;
        for step in 0..2 {
            let do_pool = (step == 0) == pool_first;
            if do_pool {
                let (y, argmax) = maxpool1d(&x, self.pool_width, self.pool_stride)?;
                stages.push(StageCache::Pool { in_shape: x.shape().to_vec(), argmax });
                x = y;
            } else if let Some(p) = &self.lrn {
                let (y, scale) = lrn(&x, p)?;
                stages.push(StageCache::Norm { input: x, scale });
                x = y;
            }
        }
        let features = x.into_data();
        let probs = softmax(&logits(&features, &self.softmax_w)?);
        Ok((probs.clone(), Cache { input, pre_activation: pre, stages, features, probs }))
    }

    /// Loss and parameter gradients for a cached forward pass.
    pub fn backward(&self, cache: &Cache, class: usize) -> Result<(f64, Grads), NnError> {
        let head = softmax_cross_entropy(&cache.features, &self.softmax_w, class)?;
        let mut shape = vec![HIDDEN_UNITS, cache.features.len() / HIDDEN_UNITS];
        let mut g = Tensor::from_vec(&shape, head.grad_features)?;
        for stage in cache.stages.iter().rev() {
            g = match stage {
                StageCache::Pool { in_shape, argmax } => maxpool1d_backward(in_shape, argmax, &g),
                StageCache::Norm { input, scale } => {
                    lrn_backward(input, scale, &g, self.lrn.as_ref().expect("norm stage implies params"))
                }
            };
            shape = g.shape().to_vec();
        }
        debug_assert_eq!(shape, cache.pre_activation.shape());
        let (g_pre, g_slopes) = prelu_backward(&cache.pre_activation, &self.prelu_slopes, &g)?;
        let (g_kernels, g_bias) = match &cache.input {
            ConvInput::Labels(w) => conv1d_one_hot_backward(w, &self.conv_kernels, &g_pre),
            ConvInput::Dense(x) => {
                let cg = conv1d_backward(x, &self.conv_kernels, &g_pre)?;
                (cg.kernels, cg.bias)
            }
        };
        Ok((
            head.loss,
            Grads { conv_kernels: g_kernels, conv_bias: g_bias, prelu_slopes: g_slopes, softmax_w: head.grad_w },
        ))
    }

    pub fn loss(&self, window: &[usize], class: usize) -> Result<f64, NnError> {
        let (_, cache) = self.forward_window(window)?;
        Ok(self.backward(&cache, class)?.0)
    }

    /// Class probabilities for a label window.
    pub fn probabilities(&self, window: &[usize]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_window(window)?.0)
    }

    /// Most probable class; ties resolve to the lowest index.
    pub fn predict(&self, window: &[usize]) -> Result<usize, NnError> {
        Ok(argmax(&self.probabilities(window)?))
    }

    /// One SGD step on the mean loss of `batch`.
    pub fn train_step(&mut self, batch: &[Example<'_>], learning_rate: f64) -> Result<StepStats, NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let mut total = Grads::zeros_like(self);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for ex in batch {
            if ex.class >= self.classes {
                return Err(NnError::LabelOutOfRange { label: ex.class, classes: self.classes });
            }
            let (probs, cache) = self.forward_window(ex.window)?;
            if argmax(&probs) == ex.class {
                correct += 1;
            }
            let (loss, g) = self.backward(&cache, ex.class)?;
            loss_sum += loss;
            total.add(&g);
        }
        let n = batch.len() as f64;
        for (p, g) in self.params_mut().into_iter().zip(total.tensors()) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= learning_rate * (gv / n);
            }
        }
        let mean_loss = loss_sum / n;
        if !mean_loss.is_finite() || !self.all_finite() {
            return Err(NnError::NonFinite("training step"));
        }
        Ok(StepStats { mean_loss, correct, count: batch.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::one_hot;

    fn cfg(window: usize) -> TrainConfig {
        TrainConfig { window, ..TrainConfig::default() }
    }

    fn random_window(seed: u64, len: usize, classes: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(0..classes)).collect()
    }

    #[test]
    fn init_examples() {
        let m = CnnModel::init(6, 4, &cfg(20), 1).unwrap();
        assert!(m.conv_bias.data().iter().all(|&b| b == 0.9));
        assert!(m.prelu_slopes.data().iter().all(|&a| a == 0.25));
        assert_eq!(m.conv_kernels.shape(), &[25, 6, 5]);
        // conv 16 -> pool 8 -> 25 * 8 features
        assert_eq!(m.softmax_w.shape(), &[4, 200]);
        assert_eq!(CnnModel::init(6, 4, &cfg(20), 1).unwrap(), m);
        assert_ne!(CnnModel::init(6, 4, &cfg(20), 2).unwrap().conv_kernels, m.conv_kernels);
        let s = (6.0f64 / (30 + 125) as f64).sqrt();
        assert!(m.conv_kernels.data().iter().all(|v| v.abs() < s));
    }

    #[test]
    fn short_windows_shrink_layers() {
        let m = CnnModel::init(3, 2, &cfg(1), 0).unwrap();
        assert_eq!((m.kernel_width, m.pool_width, m.feature_len()), (1, 1, 25));
        assert!(m.predict(&[2]).unwrap() < 2);
    }

    #[test]
    fn forward_normalizes_and_is_deterministic() {
        let m = CnnModel::init(5, 3, &cfg(12), 9).unwrap();
        let w = random_window(1, 12, 5);
        let p = m.probabilities(&w).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));
        let q = CnnModel::init(5, 3, &cfg(12), 9).unwrap().probabilities(&w).unwrap();
        assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let (dense, _) = m.forward(&one_hot(&w, 5).unwrap()).unwrap();
        assert_eq!(dense, p);
    }

    #[test]
    fn softmax_rows_shift_invariance() {
        let mut m = CnnModel::init(4, 3, &cfg(10), 2).unwrap();
        let w = random_window(2, 10, 4);
        let before = m.probabilities(&w).unwrap();
        let f = m.feature_len();
        let shift: Vec<f64> = (0..f).map(|i| (i as f64 * 0.37).sin()).collect();
        for row in m.softmax_w.data_mut().chunks_exact_mut(f) {
            for (v, s) in row.iter_mut().zip(&shift) {
                *v += s;
            }
        }
        let after = m.probabilities(&w).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn uniform_weights_give_ln_k() {
        let mut m = CnnModel::init(4, 7, &cfg(10), 2).unwrap();
        m.softmax_w = Tensor::zeros(m.softmax_w.shape());
        let loss = m.loss(&random_window(5, 10, 4), 3).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut m = CnnModel::init(4, 3, &cfg(10), 2).unwrap();
        let before = m.clone();
        let w = random_window(3, 10, 4);
        let stats = m.train_step(&[Example { window: &w, class: 1 }], 0.0).unwrap();
        assert!(stats.mean_loss.is_finite());
        assert_eq!(m, before);
    }

    #[test]
    fn repeated_sample_matches_single() {
        let base = CnnModel::init(4, 3, &cfg(10), 2).unwrap();
        let w = random_window(3, 10, 4);
        let ex = Example { window: &w, class: 2 };
        let mut one = base.clone();
        one.train_step(&[ex], 0.1).unwrap();
        for k in [2usize, 3, 5] {
            let mut many = base.clone();
            many.train_step(&vec![ex; k], 0.1).unwrap();
            for (a, b) in one.params().iter().zip(many.params()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "k={k}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn learns_separable_toy_problem() {
        // class 0: windows dominated by label 0; class 1: by label 1
        let c = TrainConfig { window: 8, ..TrainConfig::default() };
        let mut m = CnnModel::init(2, 2, &c, 4).unwrap();
        let a = vec![0usize, 0, 0, 0, 1, 0, 0, 0];
        let b = vec![1usize, 1, 1, 0, 1, 1, 1, 1];
        let batch = [Example { window: &a, class: 0 }, Example { window: &b, class: 1 }];
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = m.train_step(&batch, 0.01).unwrap().mean_loss;
        }
        assert!(last < 0.1, "loss {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = CnnModel::init(4, 3, &cfg(10), 8).unwrap();
            for s in 0..20u64 {
                let w = random_window(s, 10, 4);
                m.train_step(&[Example { window: &w, class: (s % 3) as usize }], 0.05).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn errors() {
        let mut m = CnnModel::init(4, 3, &cfg(10), 8).unwrap();
        assert!(matches!(m.forward_window(&[0; 9]), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(m.forward_window(&[4; 10]), Err(NnError::LabelOutOfRange { .. })));
        assert!(matches!(m.forward(&Tensor::zeros(&[3, 10])), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(m.train_step(&[], 0.1), Err(NnError::EmptyBatch)));
        let w = [0usize; 10];
        assert!(matches!(m.train_step(&[Example { window: &w, class: 3 }], 0.1), Err(NnError::LabelOutOfRange { .. })));
        assert!(CnnModel::init(0, 3, &cfg(10), 0).is_err());
    }

    #[test]
    fn norm_before_pool_and_no_norm_run() {
        for (order, lrn) in [(LayerOrder::NormThenPool, Some(LrnParams::default())), (LayerOrder::PoolThenNorm, None)] {
            let c = TrainConfig { window: 12, net: NetConfig { order, lrn, ..NetConfig::default() }, ..TrainConfig::default() };
            let m = CnnModel::init(3, 2, &c, 1).unwrap();
            let p = m.probabilities(&random_window(7, 12, 3)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
