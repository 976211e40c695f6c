//! Compiled-in ODE models with analytic Jacobians.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};

use crate::ode::OdeModel;

/// Predator-prey benchmark system, d = 2 states and m = 4 parameters:
///
/// ```text
/// x1' = -p1 x1 + p2 x1 x2
/// x2' =  p3 x2 - p4 x1 x2
/// ```
///
/// The solution has finite-time poles for some parameter combinations,
/// which makes the system a standard stress test for estimation schemes.
#[derive(Debug, Clone, Copy)]
pub struct LotkaVolterra;

impl OdeModel for LotkaVolterra {
    fn dim_state(&self) -> usize {
        2
    }

    fn dim_params(&self) -> usize {
        4
    }

    fn rhs(&self, x: &DVector<f64>, _t: f64, p: &DVector<f64>) -> DVector<f64> {
        dvector![
            -p[0] * x[0] + p[1] * x[0] * x[1],
            p[2] * x[1] - p[3] * x[0] * x[1]
        ]
    }

    fn jac_state(&self, x: &DVector<f64>, _t: f64, p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[
                -p[0] + p[1] * x[1],
                p[1] * x[0],
                -p[3] * x[1],
                p[2] - p[3] * x[0],
            ],
        )
    }

    fn jac_params(&self, x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            4,
            &[
                -x[0],
                x[0] * x[1],
                0.0,
                0.0,
                0.0,
                0.0,
                x[1],
                -x[0] * x[1],
            ],
        )
    }
}

/// Scalar linear model `x' = a x`, d = m = 1.
///
/// Closed forms back most oracle tests: `x(t) = s e^{a(t - t0)}`,
/// `dx(T)/ds = e^{aD}` and `dx(T)/da = D s e^{aD}` for D = T - t0.
#[derive(Debug, Clone, Copy)]
pub struct ScalarLinear;

impl OdeModel for ScalarLinear {
    fn dim_state(&self) -> usize {
        1
    }

    fn dim_params(&self) -> usize {
        1
    }

    fn rhs(&self, x: &DVector<f64>, _t: f64, p: &DVector<f64>) -> DVector<f64> {
        dvector![p[0] * x[0]]
    }

    fn jac_state(&self, _x: &DVector<f64>, _t: f64, p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, p[0])
    }

    fn jac_params(&self, x: &DVector<f64>, _t: f64, _p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x[0])
    }
}

/// The Lotka-Volterra benchmark model.
pub fn lv_model() -> LotkaVolterra {
    LotkaVolterra
}

/// The scalar linear verification model.
pub fn linear_model() -> ScalarLinear {
    ScalarLinear
}

/// Names accepted by [`by_name`].
pub const MODEL_NAMES: &[&str] = &["lotka_volterra", "linear"];

/// Looks up a model by its registry name.
pub fn by_name(name: &str) -> Option<Arc<dyn OdeModel>> {
    match name {
        "lotka_volterra" => Some(Arc::new(LotkaVolterra)),
        "linear" => Some(Arc::new(ScalarLinear)),
        _ => None,
    }
}
