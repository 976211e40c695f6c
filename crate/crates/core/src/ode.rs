//! Fixed-step explicit Runge-Kutta integration with dense output.
//!
//! Subinterval initial value problems are integrated forward with the
//! classical 4th-order Runge-Kutta scheme on a uniform grid. The stored
//! (state, derivative) node pairs provide cubic Hermite dense output, which
//! the backward adjoint sweep uses to sample the state at its stage times.
//! The adjoint sweep integrates `dL/dt = -f_x^T L` from the interval end back
//! to its start and accumulates the parameter quadrature `int L^T f_p dt` as
//! extra backward state components, so one pass yields everything a
//! constraint gradient needs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// State magnitude above which an integration counts as divergent.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e12;

/// Integration failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    /// A stage or state value became non-finite or exceeded the magnitude
    /// bound. Carries the first offending time.
    #[error("integration blew up at t = {t}")]
    BlowUp { t: f64 },
    /// Dense evaluation requested outside the trajectory span.
    #[error("t = {t} is outside the trajectory span [{t_start}, {t_end}]")]
    OutOfRange { t: f64, t_start: f64, t_end: f64 },
}

/// An ODE system `x' = f(x, t, p)` with analytic Jacobians.
///
/// `jac_state` and `jac_params` must agree with finite differences of `rhs`;
/// every concrete model carries a test for that.
pub trait OdeModel: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_params(&self) -> usize;
    /// f(x, t, p), length `dim_state`.
    fn rhs(&self, x: &DVector<f64>, t: f64, p: &DVector<f64>) -> DVector<f64>;
    /// df/dx, `dim_state` x `dim_state`.
    fn jac_state(&self, x: &DVector<f64>, t: f64, p: &DVector<f64>) -> DMatrix<f64>;
    /// df/dp, `dim_state` x `dim_params`.
    fn jac_params(&self, x: &DVector<f64>, t: f64, p: &DVector<f64>) -> DMatrix<f64>;
}

/// Dense fixed-step solution of one subinterval IVP.
///
/// Node derivatives are stored alongside the states so dense output never
/// re-evaluates the right-hand side. All stored entries are finite; a
/// non-finite value during integration is reported as [`OdeError::BlowUp`]
/// instead of being stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t_start: f64,
    t_end: f64,
    step_count: usize,
    grid_states: Vec<DVector<f64>>,
    grid_derivs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Uniform node spacing.
    pub fn step_size(&self) -> f64 {
        (self.t_end - self.t_start) / self.step_count as f64
    }

    pub fn dim(&self) -> usize {
        self.grid_states[0].len()
    }

    /// Time of grid node `k`, `0 <= k <= step_count`.
    pub fn node_time(&self, k: usize) -> f64 {
        if k == self.step_count {
            self.t_end
        } else {
            self.t_start + k as f64 * self.step_size()
        }
    }

    pub fn state(&self, k: usize) -> &DVector<f64> {
        &self.grid_states[k]
    }

    pub fn deriv(&self, k: usize) -> &DVector<f64> {
        &self.grid_derivs[k]
    }

    pub fn start_state(&self) -> &DVector<f64> {
        &self.grid_states[0]
    }

    pub fn end_state(&self) -> &DVector<f64> {
        &self.grid_states[self.step_count]
    }
}

/// Outcome of one backward adjoint sweep over a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    /// Adjoint state at the interval start, `L(t_start)`.
    pub lambda_at_start: DVector<f64>,
    /// Accumulated quadrature `int_{t_start}^{t_end} L^T f_p dt`, length `m`.
    pub quad_params: DVector<f64>,
}

fn check_finite(v: &DVector<f64>, t: f64, bound: f64) -> Result<(), OdeError> {
    if v.iter().all(|x| x.is_finite() && x.abs() <= bound) {
        Ok(())
    } else {
        Err(OdeError::BlowUp { t })
    }
}

/// Integrates `x' = f(x, t, p)` from `s` over `[t_start, t_end]` with
/// classical RK4 on a uniform grid of `step_count` steps.
///
/// Fails with [`OdeError::BlowUp`] at the first stage or node whose state
/// becomes non-finite or exceeds [`DEFAULT_BLOWUP_BOUND`].
pub fn integrate_forward(
    model: &dyn OdeModel,
    s: &DVector<f64>,
    p: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    step_count: usize,
) -> Result<Trajectory, OdeError> {
    integrate_forward_bounded(model, s, p, t_start, t_end, step_count, DEFAULT_BLOWUP_BOUND)
}

/// [`integrate_forward`] with an explicit blow-up magnitude bound.
pub fn integrate_forward_bounded(
    model: &dyn OdeModel,
    s: &DVector<f64>,
    p: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    step_count: usize,
    bound: f64,
) -> Result<Trajectory, OdeError> {
    assert!(t_end > t_start, "t_end must exceed t_start");
    assert!(step_count >= 1, "step_count must be at least 1");
    assert_eq!(s.len(), model.dim_state(), "initial state dimension");
    assert_eq!(p.len(), model.dim_params(), "parameter dimension");
    assert!(s.iter().chain(p.iter()).all(|v| v.is_finite()));

    let h = (t_end - t_start) / step_count as f64;
    let mut grid_states = Vec::with_capacity(step_count + 1);
    let mut grid_derivs = Vec::with_capacity(step_count + 1);

    let mut x = s.clone();
    check_finite(&x, t_start, bound)?;
    let mut fx = model.rhs(&x, t_start, p);
    check_finite(&fx, t_start, bound)?;
    grid_states.push(x.clone());
    grid_derivs.push(fx.clone());

    for k in 0..step_count {
        let t = t_start + k as f64 * h;
        let t_mid = t + 0.5 * h;
        let t_next = if k + 1 == step_count {
            t_end
        } else {
            t_start + (k + 1) as f64 * h
        };

        let k1 = fx.clone();
        let x2 = &x + (0.5 * h) * &k1;
        check_finite(&x2, t_mid, bound)?;
        let k2 = model.rhs(&x2, t_mid, p);
        check_finite(&k2, t_mid, bound)?;
        let x3 = &x + (0.5 * h) * &k2;
        check_finite(&x3, t_mid, bound)?;
        let k3 = model.rhs(&x3, t_mid, p);
        check_finite(&k3, t_mid, bound)?;
        let x4 = &x + h * &k3;
        check_finite(&x4, t_next, bound)?;
        let k4 = model.rhs(&x4, t_next, p);
        check_finite(&k4, t_next, bound)?;

        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        check_finite(&x, t_next, bound)?;
        fx = model.rhs(&x, t_next, p);
        check_finite(&fx, t_next, bound)?;
        grid_states.push(x.clone());
        grid_derivs.push(fx.clone());
    }

    Ok(Trajectory {
        t_start,
        t_end,
        step_count,
        grid_states,
        grid_derivs,
    })
}

/// Evaluates a trajectory at an arbitrary time by cubic Hermite
/// interpolation on the enclosing grid cell.
///
/// Exact at grid nodes. Times outside the span by more than `h * 1e-9` are
/// rejected; closer overshoots are clamped.
pub fn dense_eval(traj: &Trajectory, t: f64) -> Result<DVector<f64>, OdeError> {
    let h = traj.step_size();
    let slack = h * 1e-9;
    if t < traj.t_start - slack || t > traj.t_end + slack {
        return Err(OdeError::OutOfRange {
            t,
            t_start: traj.t_start,
            t_end: traj.t_end,
        });
    }
    let t = t.clamp(traj.t_start, traj.t_end);

    // Node hits reproduce the stored state bit for bit.
    let k_near = ((t - traj.t_start) / h).round() as usize;
    if k_near <= traj.step_count && t == traj.node_time(k_near) {
        return Ok(traj.grid_states[k_near].clone());
    }

    let cell = (((t - traj.t_start) / h).floor() as usize).min(traj.step_count - 1);
    let t_cell = traj.node_time(cell);
    let theta = (t - t_cell) / h;
    let th2 = theta * theta;
    let th3 = th2 * theta;
    let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
    let h10 = th3 - 2.0 * th2 + theta;
    let h01 = -2.0 * th3 + 3.0 * th2;
    let h11 = th3 - th2;

    Ok(h00 * &traj.grid_states[cell]
        + (h10 * h) * &traj.grid_derivs[cell]
        + h01 * &traj.grid_states[cell + 1]
        + (h11 * h) * &traj.grid_derivs[cell + 1])
}

/// Integrates the adjoint system `dL/dt = -f_x^T L` backward from
/// `t_end` to `t_start` over a stored trajectory, accumulating the parameter
/// quadrature `int L^T f_p dt` as `m` extra backward state components in the
/// same RK4 sweep.
///
/// Uses the trajectory's step count; states at stage midpoints come from
/// [`dense_eval`].
pub fn integrate_adjoint(
    model: &dyn OdeModel,
    traj: &Trajectory,
    p: &DVector<f64>,
    lambda_terminal: &DVector<f64>,
) -> Result<AdjointResult, OdeError> {
    assert_eq!(lambda_terminal.len(), model.dim_state());
    assert_eq!(p.len(), model.dim_params());
    assert!(lambda_terminal.iter().all(|v| v.is_finite()));

    let d = model.dim_state();
    let m = model.dim_params();
    let h = traj.step_size();

    // Derivative of the augmented backward state (lambda, quad) at (x, t):
    //   lambda' = -f_x^T lambda,   quad' = -f_p^T lambda
    // so that quad, integrated from t_end with quad(t_end) = 0, lands on
    // int_{t_start}^{t_end} lambda^T f_p dt at t_start.
    let deriv = |x: &DVector<f64>, t: f64, lam: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let fx = model.jac_state(x, t, p);
        let fp = model.jac_params(x, t, p);
        (-(fx.transpose() * lam), -(fp.transpose() * lam))
    };

    let mut lam = lambda_terminal.clone();
    let mut quad = DVector::zeros(m);

    for k in (1..=traj.step_count).rev() {
        let t_hi = traj.node_time(k);
        let t_lo = traj.node_time(k - 1);
        let t_mid = 0.5 * (t_hi + t_lo);
        let x_hi = traj.state(k);
        let x_lo = traj.state(k - 1);
        let x_mid = dense_eval(traj, t_mid)?;
        let hb = -h;

        let (l1, q1) = deriv(x_hi, t_hi, &lam);
        let lam2 = &lam + (0.5 * hb) * &l1;
        check_finite(&lam2, t_mid, DEFAULT_BLOWUP_BOUND)?;
        let (l2, q2) = deriv(&x_mid, t_mid, &lam2);
        let lam3 = &lam + (0.5 * hb) * &l2;
        check_finite(&lam3, t_mid, DEFAULT_BLOWUP_BOUND)?;
        let (l3, q3) = deriv(&x_mid, t_mid, &lam3);
        let lam4 = &lam + hb * &l3;
        check_finite(&lam4, t_lo, DEFAULT_BLOWUP_BOUND)?;
        let (l4, q4) = deriv(x_lo, t_lo, &lam4);

        lam += (hb / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
        quad += (hb / 6.0) * (q1 + 2.0 * q2 + 2.0 * q3 + q4);
        check_finite(&lam, t_lo, DEFAULT_BLOWUP_BOUND)?;
        check_finite(&quad, t_lo, DEFAULT_BLOWUP_BOUND)?;
    }

    debug_assert_eq!(lam.len(), d);
    Ok(AdjointResult {
        lambda_at_start: lam,
        quad_params: quad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{linear_model, lv_model};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    struct ZeroField {
        d: usize,
    }

    impl OdeModel for ZeroField {
        fn dim_state(&self) -> usize {
            self.d
        }
        fn dim_params(&self) -> usize {
            1
        }
        fn rhs(&self, _x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(self.d)
        }
        fn jac_state(&self, _x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(self.d, self.d)
        }
        fn jac_params(&self, _x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(self.d, 1)
        }
    }

    // x' = p, f_p = 1: quadrature oracle with constant integrand.
    struct PureDrift;

    impl OdeModel for PureDrift {
        fn dim_state(&self) -> usize {
            1
        }
        fn dim_params(&self) -> usize {
            1
        }
        fn rhs(&self, _x: &DVector<f64>, _t: f64, p: &DVector<f64>) -> DVector<f64> {
            dvector![p[0]]
        }
        fn jac_state(&self, _x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(1, 1)
        }
        fn jac_params(&self, _x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0)
        }
    }

    #[test]
    fn zero_field_keeps_state_constant() {
        let model = ZeroField { d: 2 };
        let s = dvector![0.4, 1.0];
        let traj =
            integrate_forward(&model, &s, &dvector![0.0], 0.0, 2.0, 17).expect("integrates");
        for k in 0..=traj.step_count() {
            assert_eq!(traj.state(k), &s);
        }
    }

    #[test]
    fn exponential_growth_matches_closed_form() {
        let model = linear_model();
        let traj = integrate_forward(&model, &dvector![1.0], &dvector![1.0], 0.0, 1.0, 100)
            .expect("integrates");
        assert_relative_eq!(traj.end_state()[0], std::f64::consts::E, epsilon = 1e-8);
    }

    #[test]
    fn lotka_volterra_pole_is_detected() {
        let model = lv_model();
        let err = integrate_forward(
            &model,
            &dvector![0.4, 1.0],
            &dvector![0.5, 0.5, 0.5, -0.2],
            0.0,
            10.0,
            1000,
        )
        .expect_err("diverges");
        match err {
            OdeError::BlowUp { t } => assert!((3.0..=3.6).contains(&t), "t* = {t}"),
            other => panic!("expected BlowUp, got {other:?}"),
        }
    }

    #[test]
    fn dense_eval_reproduces_grid_nodes_exactly() {
        let model = lv_model();
        let p = dvector![1.0, 1.0, 1.0, 1.0];
        let traj =
            integrate_forward(&model, &dvector![0.4, 1.0], &p, 0.0, 1.0, 37).expect("integrates");
        for k in 0..=traj.step_count() {
            let x = dense_eval(&traj, traj.node_time(k)).expect("in range");
            assert_eq!(&x, traj.state(k));
        }
    }

    #[test]
    fn dense_eval_matches_closed_form_between_nodes() {
        let model = linear_model();
        let traj = integrate_forward(&model, &dvector![1.0], &dvector![1.0], 0.0, 1.0, 100)
            .expect("integrates");
        let x = dense_eval(&traj, 0.55).expect("in range");
        assert_relative_eq!(x[0], 0.55_f64.exp(), epsilon = 1e-8);
    }

    #[test]
    fn dense_eval_is_exact_on_linear_states() {
        // x(t) = 0.3 + 2t has a constant derivative; Hermite reproduces it.
        let traj = integrate_forward(&PureDrift, &dvector![0.3], &dvector![2.0], 0.0, 1.0, 10)
            .expect("integrates");
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let x = dense_eval(&traj, t).expect("in range");
            assert_relative_eq!(x[0], 0.3 + 2.0 * t, epsilon = 1e-14);
        }
    }

    #[test]
    fn dense_eval_rejects_out_of_range_times() {
        let traj = integrate_forward(&PureDrift, &dvector![0.0], &dvector![1.0], 0.0, 1.0, 10)
            .expect("integrates");
        assert!(matches!(
            dense_eval(&traj, 1.5),
            Err(OdeError::OutOfRange { .. })
        ));
        assert!(matches!(
            dense_eval(&traj, -0.1),
            Err(OdeError::OutOfRange { .. })
        ));
        // A sub-slack overshoot clamps instead of failing.
        assert!(dense_eval(&traj, 1.0 + 1e-12).is_ok());
    }

    #[test]
    fn adjoint_with_zero_jacobian_is_constant() {
        let model = ZeroField { d: 3 };
        let s = dvector![1.0, -2.0, 0.5];
        let traj =
            integrate_forward(&model, &s, &dvector![0.0], 0.0, 1.0, 20).expect("integrates");
        let v = dvector![3.0, -1.0, 2.0];
        let adj = integrate_adjoint(&model, &traj, &dvector![0.0], &v).expect("adjoint");
        assert_eq!(adj.lambda_at_start, v);
        assert_eq!(adj.quad_params, dvector![0.0]);
    }

    #[test]
    fn linear_adjoint_matches_closed_form() {
        // x' = x: L(t) = exp(t_end - t) backward, so L(0) = e.
        let model = linear_model();
        let traj = integrate_forward(&model, &dvector![1.0], &dvector![1.0], 0.0, 1.0, 100)
            .expect("integrates");
        let adj =
            integrate_adjoint(&model, &traj, &dvector![1.0], &dvector![1.0]).expect("adjoint");
        assert_relative_eq!(adj.lambda_at_start[0], std::f64::consts::E, epsilon = 1e-8);
    }

    #[test]
    fn quadrature_of_constant_integrand_is_exact() {
        // x' = p: f_x = 0 keeps lambda constant, f_p = 1 makes the
        // quadrature c * interval length.
        let c = 2.5;
        let delta = 0.8;
        let traj = integrate_forward(&PureDrift, &dvector![0.1], &dvector![1.3], 0.0, delta, 50)
            .expect("integrates");
        let adj = integrate_adjoint(&PureDrift, &traj, &dvector![1.3], &dvector![c]).expect("adjoint");
        assert_relative_eq!(adj.quad_params[0], c * delta, epsilon = 1e-10);
    }

    #[test]
    fn forward_error_shrinks_at_fourth_order() {
        let model = linear_model();
        let reference = std::f64::consts::E;
        let err = |steps: usize| -> f64 {
            let traj = integrate_forward(&model, &dvector![1.0], &dvector![1.0], 0.0, 1.0, steps)
                .expect("integrates");
            (traj.end_state()[0] - reference).abs()
        };
        let ratio = err(25) / err(50);
        assert!((14.0..=18.0).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn adjoint_agrees_with_transition_matrix_on_linear_system() {
        // For x' = A x, L(t_start)^T = lambda_terminal^T Phi(t_end, t_start)
        // where Phi is the transition matrix of the forward system.
        struct LinearSystem;
        impl OdeModel for LinearSystem {
            fn dim_state(&self) -> usize {
                2
            }
            fn dim_params(&self) -> usize {
                1
            }
            fn rhs(&self, x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DVector<f64> {
                dvector![0.3 * x[0] - 1.1 * x[1], 0.7 * x[0] + 0.2 * x[1]]
            }
            fn jac_state(&self, _x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_row_slice(2, 2, &[0.3, -1.1, 0.7, 0.2])
            }
            fn jac_params(&self, _x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(2, 1)
            }
        }

        let model = LinearSystem;
        let p = dvector![0.0];
        // Columns of Phi come from forward runs started at the basis vectors.
        let mut phi = DMatrix::zeros(2, 2);
        for i in 0..2 {
            let mut e = DVector::zeros(2);
            e[i] = 1.0;
            let traj = integrate_forward(&model, &e, &p, 0.0, 1.5, 200).expect("integrates");
            phi.set_column(i, traj.end_state());
        }

        let base = integrate_forward(&model, &dvector![1.0, 1.0], &p, 0.0, 1.5, 200)
            .expect("integrates");
        let lambda_terminal = dvector![0.4, -1.7];
        let adj = integrate_adjoint(&model, &base, &p, &lambda_terminal).expect("adjoint");
        let expected = phi.transpose() * &lambda_terminal;
        assert_relative_eq!(adj.lambda_at_start, expected, epsilon = 1e-8);
    }

    #[test]
    fn integration_is_deterministic() {
        let model = lv_model();
        let s = dvector![0.4, 1.0];
        let p = dvector![1.0, 1.0, 1.0, 1.0];
        let a = integrate_forward(&model, &s, &p, 0.0, 5.0, 500).expect("integrates");
        let b = integrate_forward(&model, &s, &p, 0.0, 5.0, 500).expect("integrates");
        assert_eq!(a, b);
        let lam = dvector![1.0, -2.0];
        let adj_a = integrate_adjoint(&model, &a, &p, &lam).expect("adjoint");
        let adj_b = integrate_adjoint(&model, &b, &p, &lam).expect("adjoint");
        assert_eq!(adj_a, adj_b);
    }
}
