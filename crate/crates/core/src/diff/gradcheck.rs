use super::params::{Gradients, ParameterSet};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

/// Largest relative disagreement between the analytic gradient and central finite
/// differences, `|g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`, over every parameter scalar.
///
/// `loss_fn` returns the loss and its analytic gradients at the given parameters.
pub fn gradient_check<F>(params: &ParameterSet, step: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)> + Sync + Send,
{
    gradient_check_with(params, step, Execution::Parallel, loss_fn)
}

pub fn gradient_check_with<F>(
    params: &ParameterSet,
    step: f64,
    exec: Execution,
    loss_fn: F,
) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)> + Sync + Send,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step {step} must be > 0")));
    }
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base}")));
    }
    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|t| (0..params.tensor(t).len()).map(move |i| (t, i)))
        .collect();

    let errors = parallel::map(exec, &coords, |&(t, i)| -> Result<f64> {
        let mut probe = params.clone();
        let orig = probe.tensor(t).data()[i];
        probe.tensor_mut(t).data_mut()[i] = orig + step;
        let (plus, _) = loss_fn(&probe)?;
        probe.tensor_mut(t).data_mut()[i] = orig - step;
        let (minus, _) = loss_fn(&probe)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("loss not finite near parameter {t}[{i}]")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let exact = analytic.get(t).data()[i];
        Ok((exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-8))
    });

    errors.into_iter().try_fold(0.0f64, |acc, e| Ok(acc.max(e?)))
}
