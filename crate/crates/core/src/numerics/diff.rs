use crate::error::{Error, Result};
use crate::numerics::{lit, to_f64, Grid, Rng, Scalar};

/// Central-difference step used by [`check_gradient`].
pub const FD_STEP: f64 = 1e-4;

/// An operation with a forward map and its vector-Jacobian product.
pub trait DifferentiableOp<S: Scalar> {
    fn name(&self) -> &str {
        "op"
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>>;

    /// Cotangent of every input given the cotangent of the output.
    fn vjp(&self, inputs: &[Grid<S>], cotangent: &Grid<S>) -> Result<Vec<Grid<S>>>;
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    /// Largest of the per-input relative errors.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub tol: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compares `op.vjp` against central differences of `<r, forward(x)>`.
///
/// `r` is 1 for scalar outputs and a fixed pseudo-random cotangent otherwise.
/// The error for each input is `max|g_vjp - g_fd| / max|g_fd|`, i.e. relative
/// to the infinity norm of the numerical gradient.
pub fn check_gradient<S: Scalar>(
    op: &dyn DifferentiableOp<S>,
    inputs: &[Grid<S>],
    tol: f64,
) -> Result<GradientReport> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let out = op.forward(inputs)?;
    out.ensure_finite(op.name())?;
    let cotangent = if out.len() == 1 {
        Grid::filled(out.shape(), S::one())
    } else {
        let mut rng = Rng::with_stream(0x5eed, 0xc07a);
        Grid::from_fn(out.shape(), |_| lit(rng.normal()))
    };
    let analytic = op.vjp(inputs, &cotangent)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Length(format!(
            "{}: vjp returned {} cotangents for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let h: S = lit(FD_STEP);
    let mut probe = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        grad.ensure_shape(inputs[k].shape())?;
        let mut worst_diff = 0.0f64;
        let mut scale = 0.0f64;
        for j in 0..inputs[k].len() {
            let x = inputs[k].data()[j];
            probe[k].data_mut()[j] = x + h;
            let plus = eval_projected(op, &probe, &cotangent)?;
            probe[k].data_mut()[j] = x - h;
            let minus = eval_projected(op, &probe, &cotangent)?;
            probe[k].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = to_f64(grad.data()[j]);
            worst_diff = worst_diff.max((a - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        per_input.push(if scale > 0.0 {
            worst_diff / scale
        } else {
            worst_diff
        });
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradientReport {
        max_rel_error,
        per_input,
        tol,
    })
}

fn eval_projected<S: Scalar>(
    op: &dyn DifferentiableOp<S>,
    inputs: &[Grid<S>],
    cotangent: &Grid<S>,
) -> Result<f64> {
    let out = op.forward(inputs)?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("{} forward", op.name())));
    }
    Ok(to_f64(out.dot(cotangent)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square {
        vjp_scale: f64,
    }

    impl DifferentiableOp<f64> for Square {
        fn forward(&self, inputs: &[Grid<f64>]) -> Result<Grid<f64>> {
            Ok(inputs[0].map(|v| v * v))
        }

        fn vjp(&self, inputs: &[Grid<f64>], cot: &Grid<f64>) -> Result<Vec<Grid<f64>>> {
            let g = inputs[0].zip_map(cot, |x, c| 2.0 * x * c * self.vjp_scale)?;
            Ok(vec![g])
        }
    }

    struct Identity;

    impl DifferentiableOp<f64> for Identity {
        fn forward(&self, inputs: &[Grid<f64>]) -> Result<Grid<f64>> {
            Ok(inputs[0].clone())
        }

        fn vjp(&self, _: &[Grid<f64>], cot: &Grid<f64>) -> Result<Vec<Grid<f64>>> {
            Ok(vec![cot.clone()])
        }
    }

    struct Blowup;

    impl DifferentiableOp<f64> for Blowup {
        fn forward(&self, inputs: &[Grid<f64>]) -> Result<Grid<f64>> {
            Ok(inputs[0].map(|v| 1.0 / (v * 0.0)))
        }

        fn vjp(&self, inputs: &[Grid<f64>], _: &Grid<f64>) -> Result<Vec<Grid<f64>>> {
            Ok(vec![inputs[0].clone()])
        }
    }

    fn x123() -> Vec<Grid<f64>> {
        vec![Grid::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()]
    }

    #[test]
    fn square_matches_analytic_derivative() {
        let r = check_gradient(&Square { vjp_scale: 1.0 }, &x123(), 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.passed());
    }

    #[test]
    fn identity_is_exact_up_to_rounding() {
        let r = check_gradient(&Identity, &x123(), 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_vjp_is_caught() {
        let r = check_gradient(&Square { vjp_scale: 2.0 }, &x123(), 1e-4).unwrap();
        assert!(r.max_rel_error > 1e-4);
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        assert!(matches!(
            check_gradient(&Blowup, &x123(), 1e-4),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let op = Square { vjp_scale: 1.0 };
        let x = x123();
        let u = Grid::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let v = Grid::new(vec![3], vec![1.5, 0.25, -0.5]).unwrap();
        let (a, b) = (0.7, -1.3);
        let mut combo = u.scale(a);
        combo.axpy(b, &v).unwrap();
        let lhs = op.vjp(&x, &combo).unwrap().remove(0);
        let mut rhs = op.vjp(&x, &u).unwrap().remove(0).scale(a);
        rhs.axpy(b, &op.vjp(&x, &v).unwrap()[0]).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }
}
