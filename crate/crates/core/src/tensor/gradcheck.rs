//! Central finite-difference gradient checks in 64-bit arithmetic.
//!
//! Only forward passes are used to build the numeric estimate, so the check
//! is independent of the backward kernels it validates. Perturbations that
//! flip a ReLU gate or a pooling winner sit on a kink of the piecewise-linear
//! loss; those entries are counted as skipped rather than compared.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, Mode};
use super::network::Network;
use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation size `h` of the central difference.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so gradients near zero
    /// are compared on an absolute scale.
    pub abs_floor: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Description of the entry with the largest relative error.
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, cfg: &GradCheckConfig) {
        let err = relative_error(analytic, numeric, cfg.abs_floor);
        self.checked += 1;
        if err > cfg.tolerance {
            self.failures += 1;
        }
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(format!("{} analytic={analytic:e} numeric={numeric:e}", what()));
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.failures += other.failures;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick_entries(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares the analytic gradients of the mean cross-entropy of `net` on
/// `(input, labels)` against central differences, for every parameter
/// tensor and for the input. `mode` is reused for every pass, so a training
/// mode seed fixes the dropout mask.
pub fn check_network(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    mode: Mode,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let out = net.loss_and_backward(input.clone(), labels, mode)?;
    let analytic: Vec<Tensor<f64>> = net.grads().into_iter().cloned().collect();
    net.loss(input.clone(), labels, mode)?;
    let base = net.decisions();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let h = cfg.step;

    for (ti, grad) in analytic.iter().enumerate() {
        for e in pick_entries(grad.len(), cfg.max_entries, &mut rng) {
            let original = net.params()[ti].data()[e];
            let eval = |net: &mut Network<f64>, v: f64| -> Result<(f64, bool)> {
                net.params_mut()[ti].data_mut()[e] = v;
                let loss = net.loss(input.clone(), labels, mode)?;
                Ok((loss, net.decisions() == base))
            };
            let (plus, same_p) = eval(net, original + h)?;
            let (minus, same_m) = eval(net, original - h)?;
            net.params_mut()[ti].data_mut()[e] = original;
            if !(same_p && same_m) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("param tensor {ti} entry {e}"), grad.data()[e], numeric, cfg);
        }
    }

    let mut x = input.clone();
    for e in pick_entries(x.len(), cfg.max_entries, &mut rng) {
        let original = x.data()[e];
        x.data_mut()[e] = original + h;
        let plus = net.loss(x.clone(), labels, mode)?;
        let same_p = net.decisions() == base;
        x.data_mut()[e] = original - h;
        let minus = net.loss(x.clone(), labels, mode)?;
        let same_m = net.decisions() == base;
        x.data_mut()[e] = original;
        if !(same_p && same_m) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        report.record(|| format!("input entry {e}"), out.grad_input.data()[e], numeric, cfg);
    }
    Ok(report)
}

// Scalar probe loss: sum_i r_i * y_i for a fixed random projection r.
fn probe_loss(layer: &mut Layer<f64>, input: &Tensor<f64>, probe: &[f64], mode: Mode) -> Result<(f64, Vec<usize>)> {
    let y = layer.forward(input.clone(), mode)?;
    let loss = y.data().iter().zip(probe).map(|(a, b)| a * b).sum();
    let mut decisions = Vec::new();
    layer.decisions(&mut decisions);
    Ok((loss, decisions))
}

/// Checks a single layer under the probe loss `sum(r * layer(x))` with a
/// random projection `r`.
pub fn check_layer(
    layer: &mut Layer<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = layer.forward(input.clone(), mode)?;
    let probe: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad_input = layer.backward(Tensor::from_vec(out.shape().to_vec(), probe.clone())?)?;
    let analytic: Vec<Tensor<f64>> = layer.grads().into_iter().cloned().collect();
    let (_, base) = probe_loss(layer, input, &probe, mode)?;
    let h = cfg.step;

    let mut report = GradCheckReport::default();
    for (ti, grad) in analytic.iter().enumerate() {
        for e in pick_entries(grad.len(), cfg.max_entries, &mut rng) {
            let original = layer.params()[ti].data()[e];
            layer.params_mut()[ti].data_mut()[e] = original + h;
            let (plus, dp) = probe_loss(layer, input, &probe, mode)?;
            layer.params_mut()[ti].data_mut()[e] = original - h;
            let (minus, dm) = probe_loss(layer, input, &probe, mode)?;
            layer.params_mut()[ti].data_mut()[e] = original;
            if dp != base || dm != base {
                report.skipped_kinks += 1;
                continue;
            }
            report.record(
                || format!("{:?} param {ti} entry {e}", layer.kind()),
                grad.data()[e],
                (plus - minus) / (2.0 * h),
                cfg,
            );
        }
    }

    let mut x = input.clone();
    let mut input_report = GradCheckReport::default();
    for e in pick_entries(x.len(), cfg.max_entries, &mut rng) {
        let original = x.data()[e];
        x.data_mut()[e] = original + h;
        let (plus, dp) = probe_loss(layer, &x, &probe, mode)?;
        x.data_mut()[e] = original - h;
        let (minus, dm) = probe_loss(layer, &x, &probe, mode)?;
        x.data_mut()[e] = original;
        if dp != base || dm != base {
            input_report.skipped_kinks += 1;
            continue;
        }
        input_report.record(
            || format!("{:?} input entry {e}", layer.kind()),
            grad_input.data()[e],
            (plus - minus) / (2.0 * h),
            cfg,
        );
    }
    report.merge(input_report);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::layers::Dense;

    #[test]
    fn dense_layer_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = Layer::Dense(Dense::<f64>::new(3, 2, &mut rng));
        let x: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(vec![4, 3], x).unwrap();
        let report = check_layer(&mut layer, &input, Mode::Eval, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 3 * 2 + 2 + 12);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        assert!(relative_error(1.0, 1.001, 1e-6) > 1e-4);
        assert!(relative_error(1e-9, 0.0, 1e-6) < 1e-2);
    }
}
