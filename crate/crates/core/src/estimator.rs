//! End-to-end estimation runs.
//!
//! Wires the shooting problem into the SQP solver: node states are seeded
//! from the data, parameters from the initial guess, and each solver
//! iteration evaluates the K continuity constraints (one forward integration
//! each) and their adjoint gradients (one backward sweep each). Also hosts
//! the gradient cross-checks against the finite-difference and
//! forward-sensitivity oracles, the repeated-noise study, and the
//! single-shooting divergence demo.

use std::cell::Cell;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data_io::{self, DataError, Rng};
use crate::models;
use crate::nlp::{self, IterationRecord, NlpError, NlpProblem, SolveOptions, SparseRow};
use crate::ode::{self, OdeError, OdeModel, Trajectory};
use crate::sensitivity::forward_sensitivities;
use crate::shooting::{
    self, ConstraintGradient, ExtendedParams, MeasurementSet, ShootingError, ShootingGrid,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("unknown model '{name}'")]
    UnknownModel { name: String },
    #[error("state component {component} is measured at no node")]
    UninitializableState { component: usize },
    #[error("config is missing ground truth (x0 and p_true) required by this command")]
    MissingGroundTruth,
    #[error("fewer than 2 study runs converged ({converged})")]
    StudyDegenerate { converged: usize },
    #[error("gradient mismatch: max relative error {max_rel_err:e} exceeds {threshold:e}")]
    GradMismatch { max_rel_err: f64, threshold: f64 },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error(transparent)]
    Shooting(#[from] ShootingError),
    #[error(transparent)]
    Solver(#[from] NlpError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Everything one estimation run needs, as read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    /// Registry name of the model ("lotka_volterra", "linear").
    pub model: String,
    /// Shooting nodes; every measurement time must be one of these.
    pub nodes: Vec<f64>,
    pub steps_per_interval: usize,
    /// Initial parameter guess.
    pub p0: DVector<f64>,
    /// Noise standard deviation used when generating synthetic data.
    pub noise_sigma: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub kkt_tol: f64,
    /// Ground-truth initial state, needed for data synthesis and the
    /// single-shooting demo.
    pub x0_true: Option<DVector<f64>>,
    /// Ground-truth parameters, needed for data synthesis.
    pub p_true: Option<DVector<f64>>,
}

impl EstimationConfig {
    /// The predator-prey benchmark: unit-spaced nodes on [0, 10], true
    /// parameters (1, 1, 1, 1), start (0.4, 1), guess (0.5, 0.5, 0.5, -0.2).
    pub fn lv_benchmark() -> Self {
        Self {
            model: "lotka_volterra".into(),
            nodes: (0..=10).map(f64::from).collect(),
            steps_per_interval: 100,
            p0: DVector::from_vec(vec![0.5, 0.5, 0.5, -0.2]),
            noise_sigma: 0.05,
            seed: 1,
            max_iter: 100,
            kkt_tol: 1e-8,
            x0_true: Some(DVector::from_vec(vec![0.4, 1.0])),
            p_true: Some(DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0])),
        }
    }

    fn model(&self) -> Result<std::sync::Arc<dyn OdeModel>, EstimatorError> {
        models::by_name(&self.model).ok_or_else(|| EstimatorError::UnknownModel {
            name: self.model.clone(),
        })
    }

    fn grid(&self) -> Result<ShootingGrid, EstimatorError> {
        Ok(ShootingGrid::new(
            self.nodes.clone(),
            self.steps_per_interval,
        )?)
    }

    fn ground_truth(&self) -> Result<(&DVector<f64>, &DVector<f64>), EstimatorError> {
        match (&self.x0_true, &self.p_true) {
            (Some(x0), Some(p)) => Ok((x0, p)),
            _ => Err(EstimatorError::MissingGroundTruth),
        }
    }

    /// Generates the synthetic dataset this config describes, sampling at
    /// every shooting node.
    pub fn synthesize_data(&self) -> Result<MeasurementSet, EstimatorError> {
        let model = self.model()?;
        let (x0, p_true) = self.ground_truth()?;
        Ok(data_io::generate_synthetic(
            model.as_ref(),
            x0,
            p_true,
            &self.nodes,
            self.noise_sigma,
            self.seed,
        )?)
    }
}

/// Integration work performed by one estimation run, counted in scalar ODE
/// dimensions at the evaluation sites.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkCounters {
    /// Forward constraint evaluations (one per interval per evaluation).
    pub constraint_value_evals: usize,
    /// Backward adjoint sweeps (one per interval per gradient evaluation).
    pub constraint_gradient_evals: usize,
    /// Scalar dimensions integrated forward: d per constraint evaluation.
    pub forward_dims_integrated: usize,
    /// Scalar dimensions integrated backward: d + m per adjoint sweep.
    pub adjoint_dims_integrated: usize,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub p_hat: DVector<f64>,
    /// Final node states, one per shooting node.
    pub s_hat: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub final_objective: f64,
    pub final_constraint_norm: f64,
    pub history: Vec<IterationRecord>,
    pub counters: WorkCounters,
}

/// Adapter exposing the shooting problem through the solver interface.
///
/// Counts integration work as it happens: the dimension of each integrated
/// trajectory and the sizes of each adjoint sweep's outputs.
struct ShootingNlp<'a> {
    model: &'a dyn OdeModel,
    grid: &'a ShootingGrid,
    meas: &'a MeasurementSet,
    shape: ExtendedParams,
    value_evals: Cell<usize>,
    gradient_evals: Cell<usize>,
    forward_dims: Cell<usize>,
    adjoint_dims: Cell<usize>,
}

impl<'a> ShootingNlp<'a> {
    fn new(
        model: &'a dyn OdeModel,
        grid: &'a ShootingGrid,
        meas: &'a MeasurementSet,
        shape: ExtendedParams,
    ) -> Self {
        Self {
            model,
            grid,
            meas,
            shape,
            value_evals: Cell::new(0),
            gradient_evals: Cell::new(0),
            forward_dims: Cell::new(0),
            adjoint_dims: Cell::new(0),
        }
    }

    fn counters(&self) -> WorkCounters {
        WorkCounters {
            constraint_value_evals: self.value_evals.get(),
            constraint_gradient_evals: self.gradient_evals.get(),
            forward_dims_integrated: self.forward_dims.get(),
            adjoint_dims_integrated: self.adjoint_dims.get(),
        }
    }

    fn eval_constraint(
        &self,
        j: usize,
        q: &ExtendedParams,
    ) -> Result<(f64, Trajectory), NlpError> {
        let (h, traj) =
            shooting::constraint_value(j, q, self.model, self.grid).map_err(to_nlp_error)?;
        self.value_evals.set(self.value_evals.get() + 1);
        self.forward_dims.set(self.forward_dims.get() + traj.dim());
        Ok((h, traj))
    }

    fn eval_gradient(
        &self,
        j: usize,
        q: &ExtendedParams,
        traj: &Trajectory,
    ) -> Result<ConstraintGradient, NlpError> {
        let g = shooting::constraint_gradient(j, q, self.model, self.grid, traj)
            .map_err(to_nlp_error)?;
        self.gradient_evals.set(self.gradient_evals.get() + 1);
        self.adjoint_dims
            .set(self.adjoint_dims.get() + g.grad_s_start.len() + g.grad_p.len());
        Ok(g)
    }
}

fn to_nlp_error(err: ShootingError) -> NlpError {
    NlpError::Eval {
        message: err.to_string(),
    }
}

impl NlpProblem for ShootingNlp<'_> {
    fn dim(&self) -> usize {
        self.shape.dim()
    }

    fn constraint_count(&self) -> usize {
        self.grid.interval_count()
    }

    fn objective(&self, q: &DVector<f64>) -> f64 {
        shooting::objective_value(&self.shape.from_flat(q), self.meas)
    }

    fn objective_grad(&self, q: &DVector<f64>) -> DVector<f64> {
        shooting::objective_gradient(&self.shape.from_flat(q), self.meas)
    }

    fn constraints(&self, q: &DVector<f64>) -> Result<DVector<f64>, NlpError> {
        let qx = self.shape.from_flat(q);
        let mut h = DVector::zeros(self.constraint_count());
        for j in 0..self.constraint_count() {
            h[j] = self.eval_constraint(j, &qx)?.0;
        }
        Ok(h)
    }

    fn constraint_grads(&self, q: &DVector<f64>) -> Result<Vec<SparseRow>, NlpError> {
        Ok(self.constraints_with_grads(q)?.1)
    }

    fn constraints_with_grads(
        &self,
        q: &DVector<f64>,
    ) -> Result<(DVector<f64>, Vec<SparseRow>), NlpError> {
        let qx = self.shape.from_flat(q);
        let mut h = DVector::zeros(self.constraint_count());
        let mut rows = Vec::with_capacity(self.constraint_count());
        for j in 0..self.constraint_count() {
            let (hj, traj) = self.eval_constraint(j, &qx)?;
            let grad = self.eval_gradient(j, &qx, &traj)?;
            h[j] = hj;
            rows.push(SparseRow::new(grad.entries(&qx)));
        }
        Ok((h, rows))
    }

    // h_j = ||x_j(t_{j+1}) - s_{j+1}||^2 is anchored on the s_{j+1} block.
    fn constraint_anchor_coords(&self, j: usize) -> Vec<usize> {
        self.shape.s_range(j + 1).collect()
    }

    // Exact defect Jacobians, one backward sweep per state dimension with
    // basis terminal conditions: the sweep started from e_i returns row i
    // of both the state transition matrix and the parameter sensitivity.
    fn constraint_jacobians(
        &self,
        q: &DVector<f64>,
    ) -> Result<Option<Vec<nalgebra::DMatrix<f64>>>, NlpError> {
        let qx = self.shape.from_flat(q);
        let d = self.model.dim_state();
        let m = self.model.dim_params();
        let n = self.shape.dim();
        let mut out = Vec::with_capacity(self.constraint_count());
        for j in 0..self.constraint_count() {
            let (_, traj) = self.eval_constraint(j, &qx)?;
            let mut jac_t = nalgebra::DMatrix::zeros(n, d);
            let s_start = self.shape.s_range(j).start;
            let s_end = self.shape.s_range(j + 1).start;
            let p_start = self.shape.p_range().start;
            for i in 0..d {
                let mut basis = DVector::zeros(d);
                basis[i] = 1.0;
                let adj = ode::integrate_adjoint(self.model, &traj, qx.params(), &basis)
                    .map_err(|source| {
                        to_nlp_error(ShootingError::Integration {
                            interval: j,
                            source,
                        })
                    })?;
                self.gradient_evals.set(self.gradient_evals.get() + 1);
                self.adjoint_dims.set(self.adjoint_dims.get() + d + m);
                for k in 0..d {
                    jac_t[(s_start + k, i)] = adj.lambda_at_start[k];
                }
                jac_t[(s_end + i, i)] = -1.0;
                for k in 0..m {
                    jac_t[(p_start + k, i)] = adj.quad_params[k];
                }
            }
            out.push(jac_t);
        }
        Ok(Some(out))
    }
}

/// Seeds the extended parameter vector from the data: measured node
/// components copy their measurement, unmeasured ones interpolate linearly
/// in time between the nearest measured nodes (constant beyond the ends),
/// and the parameter block takes `p0`.
pub fn initialize_q(
    meas: &MeasurementSet,
    grid: &ShootingGrid,
    p0: &DVector<f64>,
    dim_state: usize,
) -> Result<ExtendedParams, EstimatorError> {
    let num_nodes = grid.nodes().len();
    let mut states = vec![DVector::zeros(dim_state); num_nodes];

    for comp in 0..dim_state {
        let row = meas
            .obs_indices()
            .iter()
            .position(|&c| c == comp)
            .ok_or(EstimatorError::UninitializableState { component: comp })?;
        // (node, value) samples for this component, ordered by node.
        let samples: Vec<(usize, f64)> = meas
            .node_indices()
            .iter()
            .enumerate()
            .map(|(col, &node)| (node, meas.values()[(row, col)]))
            .collect();

        for (node, state) in states.iter_mut().enumerate() {
            let t = grid.node(node);
            let after = samples.iter().find(|(n, _)| *n >= node);
            let before = samples.iter().rev().find(|(n, _)| *n <= node);
            state[comp] = match (before, after) {
                (Some(&(nb, vb)), Some(&(na, va))) => {
                    if nb == na {
                        vb
                    } else {
                        let (tb, ta) = (grid.node(nb), grid.node(na));
                        vb + (va - vb) * (t - tb) / (ta - tb)
                    }
                }
                (Some(&(_, vb)), None) => vb,
                (None, Some(&(_, va))) => va,
                (None, None) => {
                    return Err(EstimatorError::UninitializableState { component: comp })
                }
            };
        }
    }

    Ok(ExtendedParams::new(states, p0.clone()))
}

fn check_dimensions(
    config: &EstimationConfig,
    model: &dyn OdeModel,
    meas: &MeasurementSet,
) -> Result<(), EstimatorError> {
    if config.p0.len() != model.dim_params() {
        return Err(EstimatorError::Dimensions(format!(
            "p0 has {} entries, model '{}' has {} parameters",
            config.p0.len(),
            config.model,
            model.dim_params()
        )));
    }
    if let Some(&comp) = meas
        .obs_indices()
        .iter()
        .find(|&&c| c >= model.dim_state())
    {
        return Err(EstimatorError::Dimensions(format!(
            "observed component {} exceeds state dimension {}",
            comp + 1,
            model.dim_state()
        )));
    }
    Ok(())
}

/// Diagonal Gauss-Newton Hessian of the data-misfit objective: `2 / sigma^2`
/// on measured node-state entries. Entries the objective carries no
/// curvature for (the parameter block and unmeasured states) are set to
/// unit scale so the seed stays positive definite.
fn gauss_newton_seed(shape: &ExtendedParams, meas: &MeasurementSet) -> DMatrix<f64> {
    let mut diag = DVector::from_element(shape.dim(), 1.0);
    for (col, &node) in meas.node_indices().iter().enumerate() {
        let base = shape.s_range(node).start;
        for (row, &comp) in meas.obs_indices().iter().enumerate() {
            let w = meas.weights()[(row, col)];
            diag[base + comp] = (2.0 / (w * w)).max(1.0);
        }
    }
    DMatrix::from_diagonal(&diag)
}

/// Runs one full estimation: data-initialized start, SQP solve, unpacked
/// estimate with per-iteration history and work counters.
pub fn estimate(
    config: &EstimationConfig,
    meas: &MeasurementSet,
) -> Result<EstimationResult, EstimatorError> {
    let model = config.model()?;
    let grid = config.grid()?;
    let meas = meas.rebind(&grid)?;
    check_dimensions(config, model.as_ref(), &meas)?;

    let q0 = initialize_q(&meas, &grid, &config.p0, model.dim_state())?;
    let problem = ShootingNlp::new(model.as_ref(), &grid, &meas, q0.clone());
    let seed_hessian = gauss_newton_seed(&q0, &meas);
    let opts = SolveOptions {
        max_iter: config.max_iter,
        kkt_tol: config.kkt_tol,
        ..Default::default()
    };

    let (q_flat, report) = nlp::sqp_solve(&problem, &q0.to_flat(), Some(seed_hessian), &opts)?;
    let q_star = q0.from_flat(&q_flat);

    Ok(EstimationResult {
        p_hat: q_star.params().clone(),
        s_hat: (0..q_star.num_nodes())
            .map(|j| q_star.state(j).clone())
            .collect(),
        iterations: report.iterations,
        converged: report.converged,
        kkt_residual: report.kkt_residual,
        final_objective: report.final_objective,
        final_constraint_norm: report.final_constraint_norm,
        history: report.history,
        counters: problem.counters(),
    })
}

/// Outcome of one study run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub p_hat: DVector<f64>,
}

/// Sample statistics over repeated noise realizations.
#[derive(Debug, Clone)]
pub struct StudyReport {
    /// Per-parameter sample mean over converged runs.
    pub means: DVector<f64>,
    /// Per-parameter sample standard deviation (n-1 denominator).
    pub stds: DVector<f64>,
    pub converged_runs: usize,
    pub excluded_runs: usize,
    pub runs: Vec<RunSummary>,
}

/// Repeats the estimation over `n_runs` fresh noise realizations with seeds
/// `config.seed + k` and reports per-parameter sample statistics over the
/// converged runs. Non-converged runs are excluded but counted.
pub fn replicate_study(
    config: &EstimationConfig,
    n_runs: usize,
) -> Result<StudyReport, EstimatorError> {
    assert!(n_runs >= 2, "a study needs at least two runs");
    let model = config.model()?;
    let (x0, p_true) = config.ground_truth()?;
    let m = model.dim_params();

    let mut runs = Vec::with_capacity(n_runs);
    for k in 0..n_runs {
        let seed = config.seed.wrapping_add(k as u64);
        let data = data_io::generate_synthetic(
            model.as_ref(),
            x0,
            p_true,
            &config.nodes,
            config.noise_sigma,
            seed,
        )?;
        let run_config = EstimationConfig {
            seed,
            ..config.clone()
        };
        match estimate(&run_config, &data) {
            Ok(result) => runs.push(RunSummary {
                seed,
                converged: result.converged,
                iterations: result.iterations,
                p_hat: result.p_hat,
            }),
            // A failed run (blow-up, line-search stall) counts as
            // non-converged rather than aborting the study.
            Err(EstimatorError::Solver(_)) => runs.push(RunSummary {
                seed,
                converged: false,
                iterations: 0,
                p_hat: DVector::zeros(m),
            }),
            Err(other) => return Err(other),
        }
    }

    let converged: Vec<&RunSummary> = runs.iter().filter(|r| r.converged).collect();
    if converged.len() < 2 {
        return Err(EstimatorError::StudyDegenerate {
            converged: converged.len(),
        });
    }

    let n = converged.len() as f64;
    let mut means = DVector::zeros(m);
    for run in &converged {
        means += &run.p_hat;
    }
    means /= n;
    let mut var = DVector::zeros(m);
    for run in &converged {
        let diff = &run.p_hat - &means;
        var += diff.component_mul(&diff);
    }
    var /= n - 1.0;

    Ok(StudyReport {
        means,
        stds: var.map(f64::sqrt),
        converged_runs: converged.len(),
        excluded_runs: runs.len() - converged.len(),
        runs,
    })
}

/// Outcome of the full-horizon single-shooting attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleShootReport {
    /// Time of the first blow-up, if the integration diverged.
    pub blowup_time: Option<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

/// Integrates the whole horizon from the ground-truth initial state with
/// the guess parameters `p0`, reporting the blow-up time if the solution
/// diverges. Absence of a blow-up is a valid outcome.
pub fn single_shooting_demo(
    config: &EstimationConfig,
) -> Result<SingleShootReport, EstimatorError> {
    let model = config.model()?;
    let grid = config.grid()?;
    let (x0, _) = match (&config.x0_true, &config.p_true) {
        (Some(x0), p) => (x0, p),
        _ => return Err(EstimatorError::MissingGroundTruth),
    };
    let t_start = grid.node(0);
    let t_end = grid.node(grid.interval_count());
    let steps = grid.steps_per_interval() * grid.interval_count();

    match ode::integrate_forward(model.as_ref(), x0, &config.p0, t_start, t_end, steps) {
        Ok(_) => Ok(SingleShootReport {
            blowup_time: None,
            t_start,
            t_end,
        }),
        Err(OdeError::BlowUp { t }) => Ok(SingleShootReport {
            blowup_time: Some(t),
            t_start,
            t_end,
        }),
        Err(other) => Err(EstimatorError::Shooting(ShootingError::Integration {
            interval: 0,
            source: other,
        })),
    }
}

/// Worst relative errors of the adjoint gradient of one interval against
/// the two oracles.
#[derive(Debug, Clone, Copy)]
pub struct IntervalCheck {
    pub interval: usize,
    pub rel_err_fd: f64,
    pub rel_err_chain: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub points_checked: usize,
    /// Worst relative error against central finite differences.
    pub max_rel_err_fd: f64,
    /// Worst relative error against the forward-sensitivity chain rule.
    pub max_rel_err_chain: f64,
    /// Worst errors per interval across all checked points.
    pub per_interval: Vec<IntervalCheck>,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "points_checked = {}", self.points_checked)?;
        for c in &self.per_interval {
            writeln!(
                f,
                "interval {}: rel_err_fd = {:.3e} rel_err_chain = {:.3e}",
                c.interval, c.rel_err_fd, c.rel_err_chain
            )?;
        }
        writeln!(f, "max_rel_err_fd = {:.3e}", self.max_rel_err_fd)?;
        write!(f, "max_rel_err_chain = {:.3e}", self.max_rel_err_chain)
    }
}

fn rel_err(actual: f64, reference: f64) -> f64 {
    (actual - reference).abs() / reference.abs().max(1.0)
}

/// Checks every constraint gradient at the data-initialized point and at
/// five perturbed points against central finite differences and the
/// forward-sensitivity chain rule.
///
/// Fails with [`EstimatorError::GradMismatch`] once any relative error
/// exceeds 1e-4; that threshold catches sign and quadrature mistakes while
/// staying above finite-difference truncation noise.
pub fn gradcheck(config: &EstimationConfig) -> Result<GradcheckReport, EstimatorError> {
    const THRESHOLD: f64 = 1e-4;
    const FD_STEP: f64 = 1e-6;

    let model = config.model()?;
    let grid = config.grid()?;
    let meas = config.synthesize_data()?.rebind(&grid)?;
    check_dimensions(config, model.as_ref(), &meas)?;
    let q0 = initialize_q(&meas, &grid, &config.p0, model.dim_state())?;

    let mut points = vec![q0.clone()];
    let mut rng = Rng::new(config.seed.wrapping_add(0x6772_6164));
    for _ in 0..5 {
        let flat = q0.to_flat().map(|v| v + 0.1 * rng.standard_normal());
        points.push(q0.from_flat(&flat));
    }

    let k = grid.interval_count();
    let mut per_interval: Vec<IntervalCheck> = (0..k)
        .map(|j| IntervalCheck {
            interval: j,
            rel_err_fd: 0.0,
            rel_err_chain: 0.0,
        })
        .collect();

    for q in &points {
        for j in 0..k {
            let (_, traj) = shooting::constraint_value(j, q, model.as_ref(), &grid)?;
            let adjoint = shooting::constraint_gradient(j, q, model.as_ref(), &grid, &traj)?;

            // Finite differences over the 2d + m designated coordinates.
            let dense = adjoint.embed(q);
            let flat = q.to_flat();
            let mut err_fd = 0.0_f64;
            for (idx, _) in adjoint.entries(q) {
                let mut probe = flat.clone();
                let f = |v: &DVector<f64>| {
                    shooting::constraint_value(j, &q.from_flat(v), model.as_ref(), &grid)
                        .expect("finite evaluation near checked point")
                        .0
                };
                probe[idx] = flat[idx] + FD_STEP;
                let hi = f(&probe);
                probe[idx] = flat[idx] - FD_STEP;
                let lo = f(&probe);
                let fd = (hi - lo) / (2.0 * FD_STEP);
                err_fd = err_fd.max(rel_err(dense[idx], fd));
            }

            // Chain rule through the forward variational system.
            let (t0, t1) = grid.interval_span(j);
            let sens = forward_sensitivities(
                model.as_ref(),
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
            let chain_s = 2.0 * sens.dx_ds.transpose() * &defect;
            let chain_p = 2.0 * sens.dx_dp.transpose() * &defect;
            let mut err_chain = 0.0_f64;
            for i in 0..chain_s.len() {
                err_chain = err_chain.max(rel_err(adjoint.grad_s_start[i], chain_s[i]));
            }
            for i in 0..chain_p.len() {
                err_chain = err_chain.max(rel_err(adjoint.grad_p[i], chain_p[i]));
            }

            per_interval[j].rel_err_fd = per_interval[j].rel_err_fd.max(err_fd);
            per_interval[j].rel_err_chain = per_interval[j].rel_err_chain.max(err_chain);
        }
    }

    let max_rel_err_fd = per_interval
        .iter()
        .fold(0.0_f64, |acc, c| acc.max(c.rel_err_fd));
    let max_rel_err_chain = per_interval
        .iter()
        .fold(0.0_f64, |acc, c| acc.max(c.rel_err_chain));
    let report = GradcheckReport {
        points_checked: points.len(),
        max_rel_err_fd,
        max_rel_err_chain,
        per_interval,
    };

    let worst = max_rel_err_fd.max(max_rel_err_chain);
    if worst > THRESHOLD {
        return Err(EstimatorError::GradMismatch {
            max_rel_err: worst,
            threshold: THRESHOLD,
        });
    }
    Ok(report)
}

/// Integrates each subinterval from its node state; the trajectory dumps
/// behind the plot files come from here.
pub fn interval_trajectories(
    model: &dyn OdeModel,
    grid: &ShootingGrid,
    q: &ExtendedParams,
) -> Result<Vec<Trajectory>, EstimatorError> {
    (0..grid.interval_count())
        .map(|j| {
            shooting::constraint_value(j, q, model, grid)
                .map(|(_, traj)| traj)
                .map_err(EstimatorError::from)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn linear_config() -> EstimationConfig {
        EstimationConfig {
            model: "linear".into(),
            nodes: (0..=5).map(f64::from).collect(),
            steps_per_interval: 100,
            p0: dvector![0.1],
            noise_sigma: 0.0,
            seed: 3,
            max_iter: 100,
            kkt_tol: 1e-8,
            x0_true: Some(dvector![1.0]),
            p_true: Some(dvector![0.7]),
        }
    }

    #[test]
    fn initialize_q_copies_full_observations() {
        let config = EstimationConfig::lv_benchmark();
        let grid = config.grid().unwrap();
        let meas = config.synthesize_data().unwrap();
        let q = initialize_q(&meas, &grid, &config.p0, 2).unwrap();
        for (col, &node) in meas.node_indices().iter().enumerate() {
            for (row, &comp) in meas.obs_indices().iter().enumerate() {
                assert_eq!(q.state(node)[comp], meas.values()[(row, col)]);
            }
        }
        assert_eq!(q.params(), &config.p0);
    }

    #[test]
    fn initialize_q_interpolates_unmeasured_nodes() {
        let grid = ShootingGrid::new((0..=10).map(f64::from).collect(), 10).unwrap();
        // Component 2 is measured only at nodes 0 and 10.
        let meas = MeasurementSet::new(
            vec![0.0, 10.0],
            vec![0, 10],
            vec![0, 1],
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 6.0]),
            DMatrix::from_element(2, 2, 1.0),
        )
        .unwrap();
        let q = initialize_q(&meas, &grid, &dvector![0.5], 2).unwrap();
        assert_relative_eq!(q.state(5)[1], 4.0); // midpoint of 2 and 6
        assert_relative_eq!(q.state(0)[1], 2.0);
        assert_relative_eq!(q.state(10)[1], 6.0);
    }

    #[test]
    fn initialize_q_rejects_never_measured_components() {
        let grid = ShootingGrid::new(vec![0.0, 1.0], 10).unwrap();
        let meas = MeasurementSet::new(
            vec![0.0, 1.0],
            vec![0, 1],
            vec![0],
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::from_element(1, 2, 1.0),
        )
        .unwrap();
        match initialize_q(&meas, &grid, &dvector![0.5], 2) {
            Err(EstimatorError::UninitializableState { component }) => assert_eq!(component, 1),
            other => panic!("expected UninitializableState, got {other:?}"),
        }
    }

    #[test]
    fn starting_at_the_solution_converges_immediately() {
        let mut config = EstimationConfig::lv_benchmark();
        config.noise_sigma = 0.0;
        config.p0 = dvector![1.0, 1.0, 1.0, 1.0];
        let meas = config.synthesize_data().unwrap();
        let result = estimate(&config, &meas).unwrap();
        assert!(result.converged);
        assert!(result.iterations <= 2, "iterations = {}", result.iterations);
        for i in 0..4 {
            assert_relative_eq!(result.p_hat[i], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn linear_problem_recovers_the_growth_rate() {
        let config = linear_config();
        let meas = config.synthesize_data().unwrap();
        let result = estimate(&config, &meas).unwrap();
        assert!(result.converged, "kkt_residual = {}", result.kkt_residual);
        assert_relative_eq!(result.p_hat[0], 0.7, epsilon = 1e-6);
    }

    #[test]
    fn estimation_is_deterministic() {
        let config = EstimationConfig::lv_benchmark();
        let meas = config.synthesize_data().unwrap();
        let a = estimate(&config, &meas).unwrap();
        let b = estimate(&config, &meas).unwrap();
        assert_eq!(a.p_hat, b.p_hat);
        assert_eq!(a.s_hat, b.s_hat);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn noiseless_study_has_vanishing_spread() {
        let mut config = EstimationConfig::lv_benchmark();
        config.noise_sigma = 0.0;
        let report = replicate_study(&config, 3).unwrap();
        assert_eq!(report.converged_runs, 3);
        for i in 0..4 {
            assert_relative_eq!(report.means[i], 1.0, epsilon = 1e-6);
            assert!(report.stds[i] <= 1e-9, "std {}", report.stds[i]);
        }
    }

    #[test]
    fn single_shooting_diverges_with_the_bad_guess() {
        let config = EstimationConfig::lv_benchmark();
        let report = single_shooting_demo(&config).unwrap();
        let t = report.blowup_time.expect("diverges");
        assert!((3.0..=3.6).contains(&t), "t* = {t}");
    }

    #[test]
    fn single_shooting_stays_bounded_with_true_parameters() {
        let mut config = EstimationConfig::lv_benchmark();
        config.p0 = dvector![1.0, 1.0, 1.0, 1.0];
        let report = single_shooting_demo(&config).unwrap();
        assert_eq!(report.blowup_time, None);
    }

    #[test]
    fn gradcheck_passes_on_the_linear_model() {
        let report = gradcheck(&linear_config()).unwrap();
        assert!(report.max_rel_err_fd <= 1e-8, "{report}");
        assert!(report.max_rel_err_chain <= 1e-8, "{report}");
    }

    #[test]
    fn gradcheck_passes_on_the_benchmark() {
        let report = gradcheck(&EstimationConfig::lv_benchmark()).unwrap();
        assert!(report.max_rel_err_fd <= 1e-5, "{report}");
        assert!(report.max_rel_err_chain <= 1e-8, "{report}");
    }

    #[test]
    fn stitched_trajectory_has_zero_gradients() {
        // Chain the exact endpoint of each interval into the next node:
        // every defect vanishes, so every gradient block is exactly zero.
        let config = EstimationConfig::lv_benchmark();
        let model = config.model().unwrap();
        let grid = config.grid().unwrap();
        let p = dvector![0.5, 0.5, 0.5, -0.2];
        let mut states = vec![dvector![0.4, 1.0]];
        for j in 0..grid.interval_count() {
            let q = ExtendedParams::new(
                {
                    let mut v = states.clone();
                    v.resize(grid.nodes().len(), DVector::zeros(2));
                    v
                },
                p.clone(),
            );
            let (_, traj) = shooting::constraint_value(j, &q, model.as_ref(), &grid).unwrap();
            states.push(traj.end_state().clone());
        }
        let q = ExtendedParams::new(states, p);
        for j in 0..grid.interval_count() {
            let (h, traj) = shooting::constraint_value(j, &q, model.as_ref(), &grid).unwrap();
            assert_eq!(h, 0.0);
            let g = shooting::constraint_gradient(j, &q, model.as_ref(), &grid, &traj).unwrap();
            for v in g.embed(&q).iter() {
                assert!(v.abs() <= 1e-10, "gradient entry {v}");
            }
        }
    }

    #[test]
    fn work_counters_match_the_cost_model() {
        let config = EstimationConfig::lv_benchmark();
        let meas = config.synthesize_data().unwrap();
        let result = estimate(&config, &meas).unwrap();
        let c = result.counters;
        assert_eq!(c.forward_dims_integrated, 2 * c.constraint_value_evals);
        assert_eq!(c.adjoint_dims_integrated, (2 + 4) * c.constraint_gradient_evals);
    }
}
