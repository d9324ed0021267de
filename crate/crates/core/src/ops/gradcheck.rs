use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DifferentiableOp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-4;

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor (and flat index) where the worst error occurred.
    pub worst: String,
    pub checked: usize,
}

/// Compares the backward map of `op` against central finite differences of
/// `L = sum(R * op(inputs))` for a fixed random projection `R`, over every
/// element of every input and parameter.
pub fn gradcheck(op: &mut dyn DifferentiableOp<f64>, inputs: &[Tensor<f64>], eps: f64) -> Result<GradcheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("gradcheck eps must be positive"));
    }
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = op.forward(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let proj = Tensor::<f64>::randn(out.shape(), 1.0, &mut rng)?;
    let loss = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum() };
    let (input_grads, param_grads) = op.backward(&refs, &proj)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |label: &str, i: usize, a: f64, n: f64| {
        let e = relative_error(a, n, DEFAULT_ABS_FLOOR);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = format!("{label}[{i}]");
        }
    };

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grad) in input_grads.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = orig + eps;
            let plus = loss(&op.forward(&perturbed.iter().collect::<Vec<_>>())?);
            perturbed[k].data_mut()[i] = orig - eps;
            let minus = loss(&op.forward(&perturbed.iter().collect::<Vec<_>>())?);
            perturbed[k].data_mut()[i] = orig;
            record(&format!("input{k}"), i, grad.data()[i], (plus - minus) / (2.0 * eps));
        }
    }

    let names: Vec<String> = op.params().keys().cloned().collect();
    for name in names {
        let grad = param_grads
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("backward produced no gradient for `{name}`")))?
            .clone();
        for i in 0..grad.numel() {
            let orig = op.params()[&name].data()[i];
            op.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = loss(&op.forward(&refs)?);
            op.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = loss(&op.forward(&refs)?);
            op.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
            record(&name, i, grad.data()[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
