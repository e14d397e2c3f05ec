use super::Param;
use crate::error::Result;

/// Denominator floor for relative errors, so exact zeros compare sanely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// A scalar objective over a set of parameters, as seen by [`grad_check`].
pub trait Objective {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Returns the loss; with `with_grad`, also accumulates analytic gradients.
    fn evaluate(&mut self, with_grad: bool) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against central differences with step `step`.
///
/// The relative error per entry is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(objective: &mut dyn Objective, step: f64) -> Result<GradCheckReport> {
    for p in objective.params_mut() {
        p.zero_grad();
    }
    objective.evaluate(true)?;
    let analytic: Vec<Vec<f64>> = objective
        .params_mut()
        .into_iter()
        .map(|p| p.grad.iter().copied().collect())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let original = nudge(objective, pi, ei, None);
            nudge(objective, pi, ei, Some(original + step));
            let plus = objective.evaluate(false)?;
            nudge(objective, pi, ei, Some(original - step));
            let minus = objective.evaluate(false)?;
            nudge(objective, pi, ei, Some(original));
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((objective.params_mut()[pi].name.clone(), ei));
            }
        }
    }
    for p in objective.params_mut() {
        p.zero_grad();
    }
    Ok(report)
}

/// Reads entry `ei` of parameter `pi`, optionally overwriting it.
fn nudge(objective: &mut dyn Objective, pi: usize, ei: usize, value: Option<f64>) -> f64 {
    let mut params = objective.params_mut();
    let slot = params[pi]
        .value
        .as_slice_mut()
        .expect("parameters are contiguous")
        .get_mut(ei)
        .expect("index within parameter");
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    /// 0.5·‖Xw − y‖², exactly quadratic so central differences are exact.
    struct LeastSquares {
        w: Param,
        x: Array2<f64>,
        y: Array2<f64>,
        corrupt: f64,
    }

    impl Objective for LeastSquares {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w]
        }

        fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
            let r = self.x.dot(&self.w.value) - &self.y;
            if with_grad {
                self.w.grad += &(self.x.t().dot(&r) * self.corrupt);
            }
            Ok(0.5 * r.iter().map(|v| v * v).sum::<f64>())
        }
    }

    fn problem(corrupt: f64) -> LeastSquares {
        LeastSquares {
            w: Param::new("w", array![[0.3], [-0.7]]),
            x: array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.25]],
            y: array![[1.0], [0.0], [-2.0]],
            corrupt,
        }
    }

    #[test]
    fn linear_regression_is_exact() {
        let report = grad_check(&mut problem(1.0), 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let report = grad_check(&mut problem(1.1), 1e-4).unwrap();
        assert!(report.max_rel_error > 0.05);
        assert_eq!(report.worst.unwrap().0, "w");
    }
}
