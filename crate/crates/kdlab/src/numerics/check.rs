use super::tensor::Tensor;
use super::{NumResult, TensorError};

fn finite_or_err(v: f64) -> NumResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite { op: "grad_check" })
    }
}

/// Central-finite-difference check of d f(x) / d x.
///
/// Runs one analytic backward pass, then perturbs every coordinate of `x`
/// by ±h and compares. Returns the max over coordinates of
/// |analytic − central difference| / max(1, |central difference|).
/// `x` must be a trainable leaf; `f` must produce a 1×1 tensor and is
/// evaluated 2·numel + 1 times.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> NumResult<f64>
where
    F: Fn(&Tensor) -> NumResult<Tensor>,
{
    if !x.requires_grad() {
        return Err(TensorError::Dimension {
            op: "grad_check",
            msg: "x must be a trainable leaf".into(),
        });
    }
    if h <= 0.0 {
        return Err(TensorError::Dimension {
            op: "grad_check",
            msg: format!("step must be positive, got {}", h),
        });
    }
    x.zero_grad();
    let y = f(x)?;
    finite_or_err(y.item())?;
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.zero_grad();

    let mut max_err: f64 = 0.0;
    for idx in 0..x.numel() {
        x.nudge(idx, h);
        let plus = finite_or_err(f(x)?.item())?;
        x.nudge(idx, -2.0 * h);
        let minus = finite_or_err(f(x)?.item())?;
        x.nudge(idx, h);
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[idx] - fd).abs() / fd.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// [`grad_check`] over a set of trainable leaves captured by `f`, used for
/// end-to-end objectives where the function closes over a whole model.
/// Returns the max relative error across every coordinate of every listed
/// parameter.
pub fn grad_check_params<F>(f: F, params: &[Tensor], h: f64) -> NumResult<f64>
where
    F: Fn() -> NumResult<Tensor>,
{
    for p in params {
        if !p.requires_grad() {
            return Err(TensorError::Dimension {
                op: "grad_check",
                msg: "every checked parameter must be trainable".into(),
            });
        }
        p.zero_grad();
    }
    let y = f()?;
    finite_or_err(y.item())?;
    y.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let mut max_err: f64 = 0.0;
    for (p, grads) in params.iter().zip(&analytic) {
        for idx in 0..p.numel() {
            p.nudge(idx, h);
            let plus = finite_or_err(f()?.item())?;
            p.nudge(idx, -2.0 * h);
            let minus = finite_or_err(f()?.item())?;
            p.nudge(idx, h);
            let fd = (plus - minus) / (2.0 * h);
            let err = (grads[idx] - fd).abs() / fd.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
