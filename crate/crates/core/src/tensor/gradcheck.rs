//! Central finite differences, used as an independent oracle for `backward`.

use super::{Result, Tensor};

/// Denominator floor for [`relative_error`], so coordinates whose true
/// gradient is essentially zero are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(op_name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        Self {
            op_name: op_name.into(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    let err = (analytic - numeric).abs() / denom;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// Central-difference estimate of the gradient of scalar-valued `f` at `x`:
/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.data().to_vec();
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Tensor::new(probe.clone(), x.shape())?)?.item();
        probe[i] = orig - h;
        let down = f(&Tensor::new(probe.clone(), x.shape())?)?.item();
        probe[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(grad, x.shape())
}

/// Compares `backward` against finite differences for every coordinate of
/// every input of `f`.
pub fn check_gradients<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::parameter(t.data().to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    f(&params)?.backward()?;

    let mut worst: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let numeric = finite_diff_grad(
            |xi| {
                let mut args: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                args[i] = xi.clone();
                f(&args)
            },
            &inputs[i],
            h,
        )?;
        for (a, n) in analytic.iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(GradCheckReport::new(op_name, worst, tolerance))
}

#[cfg(test)]
mod tests {
    use super::super::ops::*;
    use super::*;

    #[test]
    fn sum_is_all_ones() {
        let x = Tensor::new(vec![0.3, -1.2, 4.0], &[3]).unwrap();
        let g = finite_diff_grad(|t| Ok(sum(t)), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![3.0], &[1]).unwrap();
        let g = finite_diff_grad(|t| Ok(sum(&mul(t, t)?)), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn agrees_with_backward_on_cross_entropy() {
        let logits = Tensor::new(vec![0.2, -1.0, 0.7, 1.5, 0.1, -0.3], &[2, 3]).unwrap();
        let targets = [2, 0];
        let p = Tensor::parameter(logits.data().to_vec(), logits.shape()).unwrap();
        cross_entropy(&p, &targets).unwrap().backward().unwrap();
        let numeric = finite_diff_grad(|t| cross_entropy(t, &targets), &logits, 1e-5).unwrap();
        for (a, n) in p.grad().unwrap().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn report_pass_flag_follows_tolerance() {
        assert!(GradCheckReport::new("x", 1e-5, 1e-4).passed);
        assert!(!GradCheckReport::new("x", 2e-4, 1e-4).passed);
        assert!(relative_error(f64::NAN, 1.0).is_infinite());
    }
}
