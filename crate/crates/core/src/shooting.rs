//! The multiple-shooting optimization problem.
//!
//! The horizon `[t_0, t_f]` is split by shooting nodes into K subintervals.
//! Each node carries its own state `s_j`; together with the model parameters
//! `p` these form the extended parameter vector `q = (s_0, ..., s_K, p)`.
//! Measurements are taken at shooting nodes, so the least-squares objective
//! reads off `s_j` directly and never integrates the ODE. Continuity is
//! imposed through one scalar constraint per interval,
//! `h_j(q) = ||x_j(t_{j+1}; s_j, p) - s_{j+1}||^2`,
//! whose gradient follows from a single backward adjoint sweep and has
//! exactly `2d + m` potentially nonzero entries: the `s_j`, `s_{j+1}` and
//! `p` blocks.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ode::{self, OdeModel, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShootingError {
    #[error("interval {interval}: {source}")]
    Integration {
        interval: usize,
        source: ode::OdeError,
    },
    #[error("shooting nodes must be strictly increasing and at least two")]
    InvalidGrid,
    #[error("steps_per_interval must be at least 1")]
    InvalidStepCount,
    #[error("measurement time {time} is not a shooting node")]
    TimeNotOnGrid { time: f64 },
    #[error("inconsistent measurement dimensions: {0}")]
    InvalidMeasurements(String),
}

/// Strictly increasing shooting nodes plus the per-interval step count.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingGrid {
    nodes: Vec<f64>,
    steps_per_interval: usize,
}

impl ShootingGrid {
    pub fn new(nodes: Vec<f64>, steps_per_interval: usize) -> Result<Self, ShootingError> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ShootingError::InvalidGrid);
        }
        if steps_per_interval == 0 {
            return Err(ShootingError::InvalidStepCount);
        }
        Ok(Self {
            nodes,
            steps_per_interval,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    /// Number of subintervals K.
    pub fn interval_count(&self) -> usize {
        self.nodes.len() - 1
    }

    /// `(t_j, t_{j+1})` for interval `j`.
    pub fn interval_span(&self, j: usize) -> (f64, f64) {
        (self.nodes[j], self.nodes[j + 1])
    }

    pub fn steps_per_interval(&self) -> usize {
        self.steps_per_interval
    }
}

/// The extended parameter vector `q = (s_0, ..., s_K, p)`.
///
/// All indexing into the flat layout goes through this type; nothing else
/// computes raw offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedParams {
    states: Vec<DVector<f64>>,
    params: DVector<f64>,
}

impl ExtendedParams {
    pub fn new(states: Vec<DVector<f64>>, params: DVector<f64>) -> Self {
        assert!(!states.is_empty(), "need at least one node state");
        let d = states[0].len();
        assert!(states.iter().all(|s| s.len() == d), "uniform state dims");
        Self { states, params }
    }

    /// Number of node states, K + 1.
    pub fn num_nodes(&self) -> usize {
        self.states.len()
    }

    pub fn dim_state(&self) -> usize {
        self.states[0].len()
    }

    pub fn dim_params(&self) -> usize {
        self.params.len()
    }

    /// Total flat dimension `d (K + 1) + m`.
    pub fn dim(&self) -> usize {
        self.dim_state() * self.num_nodes() + self.dim_params()
    }

    pub fn state(&self, j: usize) -> &DVector<f64> {
        &self.states[j]
    }

    pub fn params(&self) -> &DVector<f64> {
        &self.params
    }

    pub fn set_state(&mut self, j: usize, v: DVector<f64>) {
        assert_eq!(v.len(), self.dim_state());
        self.states[j] = v;
    }

    /// Flat index range of the `s_j` block.
    pub fn s_range(&self, j: usize) -> std::ops::Range<usize> {
        let d = self.dim_state();
        j * d..(j + 1) * d
    }

    /// Flat index range of the `p` block.
    pub fn p_range(&self) -> std::ops::Range<usize> {
        let base = self.dim_state() * self.num_nodes();
        base..base + self.dim_params()
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut flat = DVector::zeros(self.dim());
        for (j, s) in self.states.iter().enumerate() {
            flat.rows_mut(self.s_range(j).start, s.len()).copy_from(s);
        }
        flat.rows_mut(self.p_range().start, self.params.len())
            .copy_from(&self.params);
        flat
    }

    /// Rebuilds an `ExtendedParams` with this one's shape from a flat vector.
    pub fn from_flat(&self, flat: &DVector<f64>) -> Self {
        assert_eq!(flat.len(), self.dim());
        let d = self.dim_state();
        let states = (0..self.num_nodes())
            .map(|j| DVector::from(flat.rows(self.s_range(j).start, d).clone_owned()))
            .collect();
        let params = DVector::from(flat.rows(self.p_range().start, self.dim_params()).clone_owned());
        Self { states, params }
    }
}

/// Observations at shooting nodes.
///
/// `values[(i, k)]` is the measurement of state component `obs_indices[i]`
/// at the node `node_indices[k]`, taken at time `times[k]`, with standard
/// deviation weight `weights[(i, k)]`. Every measurement time must be a
/// shooting node.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    times: Vec<f64>,
    node_indices: Vec<usize>,
    obs_indices: Vec<usize>,
    values: DMatrix<f64>,
    weights: DMatrix<f64>,
}

impl MeasurementSet {
    pub fn new(
        times: Vec<f64>,
        node_indices: Vec<usize>,
        obs_indices: Vec<usize>,
        values: DMatrix<f64>,
        weights: DMatrix<f64>,
    ) -> Result<Self, ShootingError> {
        let cols = times.len();
        if cols == 0 {
            return Err(ShootingError::InvalidMeasurements(
                "at least one measurement is required".into(),
            ));
        }
        if node_indices.len() != cols {
            return Err(ShootingError::InvalidMeasurements(
                "node_indices and times lengths differ".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ShootingError::InvalidMeasurements(
                "times must be strictly increasing".into(),
            ));
        }
        if node_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ShootingError::InvalidMeasurements(
                "node indices must be strictly increasing".into(),
            ));
        }
        let obs = obs_indices.len();
        if obs == 0 {
            return Err(ShootingError::InvalidMeasurements(
                "at least one observed component is required".into(),
            ));
        }
        if values.nrows() != obs || values.ncols() != cols {
            return Err(ShootingError::InvalidMeasurements(
                "values shape must be obs x |M|".into(),
            ));
        }
        if weights.nrows() != obs || weights.ncols() != cols {
            return Err(ShootingError::InvalidMeasurements(
                "weights shape must be obs x |M|".into(),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(ShootingError::InvalidMeasurements(
                "weights must be positive".into(),
            ));
        }
        Ok(Self {
            times,
            node_indices,
            obs_indices,
            values,
            weights,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Measured node indices M.
    pub fn node_indices(&self) -> &[usize] {
        &self.node_indices
    }

    /// Observed state components (zero-based).
    pub fn obs_indices(&self) -> &[usize] {
        &self.obs_indices
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn num_measured_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn num_obs(&self) -> usize {
        self.obs_indices.len()
    }

    /// Recomputes the node indices by locating each measurement time on the
    /// grid. Fails if some time is not a shooting node.
    pub fn rebind(&self, grid: &ShootingGrid) -> Result<MeasurementSet, ShootingError> {
        let scale = grid
            .nodes()
            .iter()
            .fold(1.0_f64, |acc, t| acc.max(t.abs()));
        let tol = scale * 1e-9;
        let node_indices = self
            .times
            .iter()
            .map(|&t| {
                grid.nodes()
                    .iter()
                    .position(|&node| (node - t).abs() <= tol)
                    .ok_or(ShootingError::TimeNotOnGrid { time: t })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MeasurementSet {
            times: self.times.clone(),
            node_indices,
            obs_indices: self.obs_indices.clone(),
            values: self.values.clone(),
            weights: self.weights.clone(),
        })
    }
}

/// Gradient of one scalar continuity constraint `h_j` over `q`.
///
/// Only the `s_j`, `s_{j+1}` and `p` blocks can be nonzero; the dense
/// embedding keeps every other entry exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGradient {
    pub interval: usize,
    /// d h_j / d s_j.
    pub grad_s_start: DVector<f64>,
    /// d h_j / d s_{j+1}.
    pub grad_s_end: DVector<f64>,
    /// d h_j / d p.
    pub grad_p: DVector<f64>,
}

impl ConstraintGradient {
    /// The `2d + m` flat (index, value) pairs of this gradient.
    pub fn entries(&self, shape: &ExtendedParams) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(2 * self.grad_s_start.len() + self.grad_p.len());
        let s0 = shape.s_range(self.interval).start;
        for (i, v) in self.grad_s_start.iter().enumerate() {
            out.push((s0 + i, *v));
        }
        let s1 = shape.s_range(self.interval + 1).start;
        for (i, v) in self.grad_s_end.iter().enumerate() {
            out.push((s1 + i, *v));
        }
        let pr = shape.p_range().start;
        for (i, v) in self.grad_p.iter().enumerate() {
            out.push((pr + i, *v));
        }
        out
    }

    /// Dense embedding into an `n_q` vector; entries outside the designated
    /// blocks are exactly 0.0.
    pub fn embed(&self, shape: &ExtendedParams) -> DVector<f64> {
        let mut dense = DVector::zeros(shape.dim());
        for (idx, v) in self.entries(shape) {
            dense[idx] = v;
        }
        dense
    }
}

/// Weighted least-squares objective
/// `L(q) = sum_i sum_{j in M} ((eta_ij - s_j[i]) / sigma_ij)^2`.
///
/// Reads the node states directly; no integration involved.
pub fn objective_value(q: &ExtendedParams, meas: &MeasurementSet) -> f64 {
    let mut total = 0.0;
    for (col, &node) in meas.node_indices().iter().enumerate() {
        let s = q.state(node);
        for (row, &comp) in meas.obs_indices().iter().enumerate() {
            let r = (meas.values()[(row, col)] - s[comp]) / meas.weights()[(row, col)];
            total += r * r;
        }
    }
    total
}

/// Analytic gradient of [`objective_value`] over the flat layout of `q`.
///
/// Only measured node-state entries are nonzero; the `p` block is zero for
/// every `q` because the simplified objective never touches the parameters.
pub fn objective_gradient(q: &ExtendedParams, meas: &MeasurementSet) -> DVector<f64> {
    let mut grad = DVector::zeros(q.dim());
    for (col, &node) in meas.node_indices().iter().enumerate() {
        let s = q.state(node);
        let base = q.s_range(node).start;
        for (row, &comp) in meas.obs_indices().iter().enumerate() {
            let w = meas.weights()[(row, col)];
            grad[base + comp] += -2.0 * (meas.values()[(row, col)] - s[comp]) / (w * w);
        }
    }
    grad
}

/// Scalar continuity constraint for interval `j`:
/// integrates the subinterval IVP from `s_j` and returns
/// `h_j = ||x_j(t_{j+1}) - s_{j+1}||^2` together with the trajectory.
///
/// The trajectory feeds [`constraint_gradient`]; the pair belongs together
/// so the gradient pass never repeats the forward integration.
pub fn constraint_value(
    j: usize,
    q: &ExtendedParams,
    model: &dyn OdeModel,
    grid: &ShootingGrid,
) -> Result<(f64, Trajectory), ShootingError> {
    assert!(j < grid.interval_count(), "interval index out of range");
    let (t0, t1) = grid.interval_span(j);
    let traj = ode::integrate_forward(
        model,
        q.state(j),
        q.params(),
        t0,
        t1,
        grid.steps_per_interval(),
    )
    .map_err(|source| ShootingError::Integration {
        interval: j,
        source,
    })?;
    let defect = traj.end_state() - q.state(j + 1);
    Ok((defect.norm_squared(), traj))
}

/// Gradient of `h_j` from one backward adjoint sweep over the trajectory
/// returned by [`constraint_value`] at the same `(j, q)`.
///
/// The sweep starts from `L(t_{j+1}) = -2 (x_j(t_{j+1}) - s_{j+1})` and
/// yields
/// `d h_j/d s_{j+1} = -2 (x_j(t_{j+1}) - s_{j+1})`,
/// `d h_j/d s_j = -L(t_j)` and `d h_j/d p = -int L^T f_p dt`.
pub fn constraint_gradient(
    j: usize,
    q: &ExtendedParams,
    model: &dyn OdeModel,
    grid: &ShootingGrid,
    traj: &Trajectory,
) -> Result<ConstraintGradient, ShootingError> {
    let (t0, t1) = grid.interval_span(j);
    assert!(
        traj.t_start() == t0 && traj.t_end() == t1,
        "trajectory does not belong to interval {j}"
    );
    let defect = traj.end_state() - q.state(j + 1);
    let lambda_terminal = -2.0 * &defect;
    let adj = ode::integrate_adjoint(model, traj, q.params(), &lambda_terminal).map_err(
        |source| ShootingError::Integration {
            interval: j,
            source,
        },
    )?;
    Ok(ConstraintGradient {
        interval: j,
        grad_s_start: -adj.lambda_at_start,
        grad_s_end: lambda_terminal,
        grad_p: -adj.quad_params,
    })
}
