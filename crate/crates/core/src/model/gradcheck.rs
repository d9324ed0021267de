use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{backward, forward};
use super::params::NetworkParams;
use crate::error::{Error, Result};
use crate::ops::{relative_error, GradcheckReport, DEFAULT_ABS_FLOOR};
use crate::tensor::Tensor;

/// An entry whose error at the first step is below this is not retried.
const SETTLED: f64 = 1e-6;

/// Finite-difference check of the whole network on `L = sum(R * mask)`.
///
/// Checks `param_entries` random parameter entries (cycling through the
/// tensors in name order, so every tensor is visited once the count reaches
/// the tensor count) and `frame_entries` input entries, with central
/// differences.
///
/// The network is piecewise smooth: a step can cross ReLU or max-pool
/// switching points, and instance norm on the tiny deepest maps makes such
/// crossings likely at moderate steps. An entry is therefore retried with the
/// successively smaller steps in `steps`, and its error is the smallest seen.
/// A wrong analytic gradient stays wrong at every step.
pub fn network_gradcheck(
    params: &NetworkParams<f64>,
    frames: &Tensor<f64>,
    param_entries: usize,
    frame_entries: usize,
    seed: u64,
    steps: &[f64],
) -> Result<GradcheckReport> {
    if steps.is_empty() || steps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("gradcheck steps must be positive and non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (prob, trace) = forward(frames, params)?;
    let proj = Tensor::<f64>::randn(prob.shape(), 1.0, &mut rng)?;
    let loss = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum() };
    let grads = backward(&trace, params, &proj)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |label: &str, i: usize, a: f64, numeric: &mut dyn FnMut(f64) -> Result<f64>| -> Result<()> {
        let mut e = f64::INFINITY;
        for &step in steps {
            e = e.min(relative_error(a, numeric(step)?, DEFAULT_ABS_FLOOR));
            if e < SETTLED {
                break;
            }
        }
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = format!("{label}[{i}]");
        }
        Ok(())
    };

    let mut work = params.clone();
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for k in 0..param_entries {
        let name = &names[k % names.len()];
        let numel = params.tensors()[name].numel();
        let i = rng.random_range(0..numel);
        let orig = params.tensors()[name].data()[i];
        let mut numeric = |eps: f64| -> Result<f64> {
            let mut at = |v: f64| -> Result<f64> {
                work.tensors_mut().get_mut(name).expect("same layout").data_mut()[i] = v;
                Ok(loss(&forward(frames, &work)?.0))
            };
            let d = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
            work.tensors_mut().get_mut(name).expect("same layout").data_mut()[i] = orig;
            Ok(d)
        };
        record(name, i, grads.params[name].data()[i], &mut numeric)?;
    }

    let mut x = frames.clone();
    for _ in 0..frame_entries.min(frames.numel()) {
        let i = rng.random_range(0..frames.numel());
        let orig = frames.data()[i];
        let mut numeric = |eps: f64| -> Result<f64> {
            x.data_mut()[i] = orig + eps;
            let plus = loss(&forward(&x, params)?.0);
            x.data_mut()[i] = orig - eps;
            let minus = loss(&forward(&x, params)?.0);
            x.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * eps))
        };
        record("frames", i, grads.frames.data()[i], &mut numeric)?;
    }
    Ok(report)
}
