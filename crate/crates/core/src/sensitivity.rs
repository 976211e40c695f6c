//! Independent differentiation oracles and cost accounting.
//!
//! Forward variational sensitivities and central finite differences provide
//! two routes to the constraint derivatives that are independent of the
//! backward adjoint sweep; the test suites hold all three together. The cost
//! probe counts integrated scalar ODE dimensions per subinterval, which is
//! where the adjoint route wins once parameters outnumber states.

use nalgebra::{DMatrix, DVector};

use crate::ode::{OdeError, OdeModel, DEFAULT_BLOWUP_BOUND};

/// End-of-interval trajectory derivatives with respect to the interval's
/// initial state and the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSensitivities {
    /// d x(t_end) / d s, `d x d`.
    pub dx_ds: DMatrix<f64>,
    /// d x(t_end) / d p, `d x m`.
    pub dx_dp: DMatrix<f64>,
}

/// Scalar ODE dimensions integrated per subinterval per iteration by the
/// two differentiation strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    /// State + full variational system: `d + d (d + m)`.
    pub ode_dimensions_forward_sens: usize,
    /// State + adjoint + parameter quadrature: `2 d + m`.
    pub ode_dimensions_adjoint: usize,
}

/// Integrates the variational system
/// `x' = f,  S' = f_x S + [0 | f_p],  S(t_start) = [I | 0]`
/// with RK4 on the same uniform grid as the forward solver and returns the
/// two blocks of `S(t_end)`.
pub fn forward_sensitivities(
    model: &dyn OdeModel,
    s: &DVector<f64>,
    p: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    step_count: usize,
) -> Result<ForwardSensitivities, OdeError> {
    assert!(t_end > t_start && step_count >= 1);
    let d = model.dim_state();
    let m = model.dim_params();
    assert_eq!(s.len(), d);
    assert_eq!(p.len(), m);

    let h = (t_end - t_start) / step_count as f64;
    let mut x = s.clone();
    let mut sens = DMatrix::zeros(d, d + m);
    sens.view_mut((0, 0), (d, d)).fill_with_identity();

    let deriv = |x: &DVector<f64>, sens: &DMatrix<f64>, t: f64| -> (DVector<f64>, DMatrix<f64>) {
        let mut ds = model.jac_state(x, t, p) * sens;
        let fp = model.jac_params(x, t, p);
        let mut p_cols = ds.columns_mut(d, m);
        p_cols += fp;
        (model.rhs(x, t, p), ds)
    };

    let check = |x: &DVector<f64>, t: f64| -> Result<(), OdeError> {
        if x.iter().all(|v| v.is_finite() && v.abs() <= DEFAULT_BLOWUP_BOUND) {
            Ok(())
        } else {
            Err(OdeError::BlowUp { t })
        }
    };

    for k in 0..step_count {
        let t = t_start + k as f64 * h;
        let t_mid = t + 0.5 * h;
        let t_next = t + h;

        let (kx1, ks1) = deriv(&x, &sens, t);
        let x2 = &x + (0.5 * h) * &kx1;
        check(&x2, t_mid)?;
        let (kx2, ks2) = deriv(&x2, &(&sens + (0.5 * h) * &ks1), t_mid);
        let x3 = &x + (0.5 * h) * &kx2;
        check(&x3, t_mid)?;
        let (kx3, ks3) = deriv(&x3, &(&sens + (0.5 * h) * &ks2), t_mid);
        let x4 = &x + h * &kx3;
        check(&x4, t_next)?;
        let (kx4, ks4) = deriv(&x4, &(&sens + h * &ks3), t_next);

        x += (h / 6.0) * (kx1 + 2.0 * kx2 + 2.0 * kx3 + kx4);
        sens += (h / 6.0) * (ks1 + 2.0 * ks2 + 2.0 * ks3 + ks4);
        check(&x, t_next)?;
        if !sens.iter().all(|v| v.is_finite()) {
            return Err(OdeError::BlowUp { t: t_next });
        }
    }

    Ok(ForwardSensitivities {
        dx_ds: sens.columns(0, d).clone_owned(),
        dx_dp: sens.columns(d, m).clone_owned(),
    })
}

/// Central finite differences `(f(x + h e_k) - f(x - h e_k)) / (2 h)`.
pub fn finite_diff_gradient<F>(f: F, point: &DVector<f64>, step: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    assert!(step > 0.0, "step must be positive");
    let mut grad = DVector::zeros(point.len());
    let mut probe = point.clone();
    for k in 0..point.len() {
        probe[k] = point[k] + step;
        let hi = f(&probe);
        probe[k] = point[k] - step;
        let lo = f(&probe);
        probe[k] = point[k];
        grad[k] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Scalar ODE dimension counts per subinterval for the two gradient routes.
pub fn cost_report(d: usize, m: usize) -> CostReport {
    assert!(d >= 1 && m >= 1);
    CostReport {
        ode_dimensions_forward_sens: d * (d + m) + d,
        ode_dimensions_adjoint: 2 * d + m,
    }
}
