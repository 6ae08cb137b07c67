//! Central-difference gradient checks for the model and each layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv1d, conv1d_backward, lrn, lrn_backward, maxpool1d, maxpool1d_backward, prelu, prelu_backward,
    softmax_cross_entropy, LrnParams,
};
use super::model::{CnnModel, Example, Grads, TrainConfig};
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters whose perturbation crossed a PReLU kink or changed a pooling
    /// winner, where the loss is not differentiable.
    pub skipped: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Gradient check of the mean loss over `batch`.
pub fn grad_check_batch(model: &CnnModel, batch: &[Example<'_>], epsilon: f64) -> Result<GradCheckReport, NnError> {
    if !(epsilon > 0.0) {
        return Err(NnError::InvalidConfig("epsilon must be positive".into()));
    }
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut analytic = Grads::zeros_like(model);
    let mut regimes = Vec::with_capacity(batch.len());
    for ex in batch {
        let (_, cache) = model.forward_window(ex.window)?;
        let (_, g) = model.backward(&cache, ex.class)?;
        for (a, b) in [
            (&mut analytic.conv_kernels, &g.conv_kernels),
            (&mut analytic.conv_bias, &g.conv_bias),
            (&mut analytic.prelu_slopes, &g.prelu_slopes),
            (&mut analytic.softmax_w, &g.softmax_w),
        ] {
            a.axpy(1.0 / n, b);
        }
        regimes.push(cache.regime());
    }

    // Returns None when the perturbed model runs in a different linear regime.
    let eval = |m: &CnnModel| -> Result<Option<f64>, NnError> {
        let mut total = 0.0;
        for (ex, regime) in batch.iter().zip(&regimes) {
            let (_, cache) = m.forward_window(ex.window)?;
            if cache.regime() != *regime {
                return Ok(None);
            }
            total += m.backward(&cache, ex.class)?.0;
        }
        Ok(Some(total / n))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut probe = model.clone();
    for (ti, grads) in analytic.tensors().into_iter().enumerate() {
        for j in 0..grads.len() {
            let orig = probe.params()[ti].data()[j];
            probe.params_mut()[ti].data_mut()[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.params_mut()[ti].data_mut()[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.params_mut()[ti].data_mut()[j] = orig;
            match (plus, minus) {
                (Some(p), Some(m)) => {
                    let numeric = (p - m) / (2.0 * epsilon);
                    report.max_rel_error = report.max_rel_error.max(rel_error(grads.data()[j], numeric));
                    report.checked += 1;
                }
                _ => report.skipped += 1,
            }
        }
    }
    if !report.max_rel_error.is_finite() {
        return Err(NnError::NonFinite("gradient check"));
    }
    Ok(report)
}

/// Gradient check of the loss on one labelled window.
pub fn grad_check(model: &CnnModel, window: &[usize], class: usize, epsilon: f64) -> Result<GradCheckReport, NnError> {
    grad_check_batch(model, &[Example { window, class }], epsilon)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("valid shape")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic` against central differences of `loss` around `x`.
/// Entries for which `skip` returns true are not compared.
fn compare(
    x: &Tensor,
    analytic: &Tensor,
    epsilon: f64,
    mut loss: impl FnMut(&Tensor) -> f64,
    skip: impl Fn(usize) -> bool,
) -> f64 {
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        if skip(j) {
            continue;
        }
        let orig = x.data()[j];
        probe.data_mut()[j] = orig + epsilon;
        let p = loss(&probe);
        probe.data_mut()[j] = orig - epsilon;
        let m = loss(&probe);
        probe.data_mut()[j] = orig;
        worst = worst.max(rel_error(analytic.data()[j], (p - m) / (2.0 * epsilon)));
    }
    worst
}

/// Checks every layer's adjoint against a random linear projection of its
/// output. Returns `(check name, max relative error)` pairs.
pub fn layer_suite(seed: u64, epsilon: f64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // conv on a 3x8 input with 4 filters of width 3
    let x = random_tensor(&mut rng, &[3, 8], 1.0);
    let k = random_tensor(&mut rng, &[4, 3, 3], 1.0);
    let b = random_tensor(&mut rng, &[4], 1.0);
    let r = random_tensor(&mut rng, &[4, 6], 1.0);
    let g = conv1d_backward(&x, &k, &r).expect("shapes agree");
    out.push(("conv input", compare(&x, &g.input, epsilon, |p| dot(&conv1d(p, &k, &b).unwrap(), &r), |_| false)));
    out.push(("conv kernels", compare(&k, &g.kernels, epsilon, |p| dot(&conv1d(&x, p, &b).unwrap(), &r), |_| false)));
    out.push(("conv bias", compare(&b, &g.bias, epsilon, |p| dot(&conv1d(&x, &k, p).unwrap(), &r), |_| false)));

    // PReLU, skipping inputs near the kink
    let x = random_tensor(&mut rng, &[4, 6], 1.0);
    let a = random_tensor(&mut rng, &[4], 0.5);
    let r = random_tensor(&mut rng, &[4, 6], 1.0);
    let (gx, ga) = prelu_backward(&x, &a, &r).expect("shapes agree");
    let near_kink = |j: usize| x.data()[j].abs() < 1e-4;
    out.push(("prelu input", compare(&x, &gx, epsilon, |p| dot(&prelu(p, &a).unwrap(), &r), near_kink)));
    let xs = x.clone();
    out.push((
        "prelu slopes",
        compare(&a, &ga, epsilon, |p| dot(&prelu(&xs, p).unwrap(), &r), |_| false),
    ));

    // pooling on distinct values spaced well beyond epsilon
    let mut vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[3, 8], vals).expect("valid shape");
    let (_, arg) = maxpool1d(&x, 2, 2).expect("valid pool");
    let r = random_tensor(&mut rng, &[3, 4], 1.0);
    let gx = maxpool1d_backward(x.shape(), &arg, &r);
    out.push(("maxpool", compare(&x, &gx, epsilon, |p| dot(&maxpool1d(p, 2, 2).unwrap().0, &r), |_| false)));

    // LRN with a strong alpha so the cross-channel terms matter
    let p = LrnParams { k: 1.0, n_neighbors: 3, alpha: 0.5, beta: 0.75 };
    let x = random_tensor(&mut rng, &[6, 4], 1.0);
    let r = random_tensor(&mut rng, &[6, 4], 1.0);
    let (_, s) = lrn(&x, &p).expect("valid lrn");
    let gx = lrn_backward(&x, &s, &r, &p);
    out.push(("lrn", compare(&x, &gx, epsilon, |q| dot(&lrn(q, &p).unwrap().0, &r), |_| false)));

    // softmax classifier, 4 classes over 7 features
    let f = random_tensor(&mut rng, &[7], 1.0);
    let w = random_tensor(&mut rng, &[4, 7], 1.0);
    let label = rng.random_range(0..4);
    let ce = softmax_cross_entropy(f.data(), &w, label).expect("valid label");
    out.push((
        "softmax weights",
        compare(&w, &ce.grad_w, epsilon, |q| softmax_cross_entropy(f.data(), q, label).unwrap().loss, |_| false),
    ));
    let gf = Tensor::from_vec(&[7], ce.grad_features).expect("valid shape");
    out.push((
        "softmax features",
        compare(&f, &gf, epsilon, |q| softmax_cross_entropy(q.data(), &w, label).unwrap().loss, |_| false),
    ));
    out
}

/// A small network with spread-out conv biases, so that both PReLU branches
/// and strong normalization terms are exercised.
pub fn check_model(seed: u64, lrn_alpha: f64) -> CnnModel {
    let mut cfg = TrainConfig { window: 10, ..TrainConfig::default() };
    cfg.net.lrn = Some(LrnParams { alpha: lrn_alpha, ..LrnParams::default() });
    let mut m = CnnModel::init(5, 4, &cfg, seed).expect("valid configuration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for b in m.conv_bias.data_mut() {
        *b = rng.random_range(-1.0..1.0);
    }
    m
}

/// Full-network check on [`check_model`] with a random window and label.
pub fn model_check(seed: u64, epsilon: f64) -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window: Vec<usize> = (0..10).map(|_| rng.random_range(0..5)).collect();
    grad_check(&check_model(seed, 0.3), &window, rng.random_range(0..4), epsilon)
}
