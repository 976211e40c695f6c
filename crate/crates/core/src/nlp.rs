//! Equality-constrained SQP with a damped BFGS Hessian.
//!
//! Each iteration linearizes the constraints, minimizes a quadratic model of
//! the Lagrangian subject to them by solving the KKT system
//! `[[B, A^T], [A, 0]] [dq; mu] = [-g; -h]`, and globalizes the step with a
//! backtracking line search on the l1 exact-penalty merit
//! `phi(q) = f(q) + rho * sum_j |h_j(q)|`. The Hessian approximation starts
//! from a caller-supplied positive-definite seed and is maintained by BFGS
//! updates with Powell damping, which keeps it positive definite.
//!
//! Constraint evaluations are fallible: a trial point whose evaluation fails
//! (trajectory blow-up) is treated as having infinite merit and rejected by
//! the line search.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NlpError {
    /// The KKT system is rank deficient; usually a degenerate shooting
    /// configuration (dependent constraint gradients).
    #[error("KKT system is singular (smallest pivot {pivot:e})")]
    SingularKkt { pivot: f64 },
    /// No acceptable step length; signals bad scaling or wrong gradients.
    #[error("line search failed after {halvings} halvings")]
    LineSearchFailure { halvings: u32 },
    /// A problem callback failed at the current (not trial) point.
    #[error("evaluation failed: {message}")]
    Eval { message: String },
}

/// One sparse constraint-gradient row, stored as (flat index, value) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    entries: Vec<(usize, f64)>,
}

impl SparseRow {
    pub fn new(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn dot(&self, v: &DVector<f64>) -> f64 {
        self.entries.iter().map(|&(i, a)| a * v[i]).sum()
    }

    pub fn to_dense(&self, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for &(i, a) in &self.entries {
            out[i] = a;
        }
        out
    }
}

/// A smooth equality-constrained problem
/// `min f(q)  s.t.  h_j(q) = 0,  j = 0..c-1`.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn constraint_count(&self) -> usize;
    fn objective(&self, q: &DVector<f64>) -> f64;
    fn objective_grad(&self, q: &DVector<f64>) -> DVector<f64>;
    /// Constraint values; `Err` marks the point as unevaluable.
    fn constraints(&self, q: &DVector<f64>) -> Result<DVector<f64>, NlpError>;
    /// Constraint gradient rows.
    fn constraint_grads(&self, q: &DVector<f64>) -> Result<Vec<SparseRow>, NlpError>;
    /// Values and gradients together; implementors that share work between
    /// the two (one forward integration per constraint) override this.
    fn constraints_with_grads(
        &self,
        q: &DVector<f64>,
    ) -> Result<(DVector<f64>, Vec<SparseRow>), NlpError> {
        Ok((self.constraints(q)?, self.constraint_grads(q)?))
    }

    /// For squared-distance constraints `h_j = ||G_j||^2` whose residual is
    /// anchored as `G_j = F_j(rest of q) - q[coords]`: the flat coordinates
    /// of the anchor block. The gradient then reveals the residual
    /// (`G_j = -grad/2` on these coordinates) and the solver can maintain
    /// secant estimates of the residual Jacobians, giving it Gauss-Newton
    /// curvature for the Lagrangian. Default: no structure.
    fn constraint_anchor_coords(&self, _j: usize) -> Vec<usize> {
        Vec::new()
    }

    /// Exact residual Jacobians `J_j^T` (one `n x d_j` matrix per squared
    /// constraint), when the problem can produce them on demand. The solver
    /// requests them at most a couple of times per solve, right before the
    /// terminal Newton steps where secant estimates are not accurate
    /// enough. Default: unavailable.
    fn constraint_jacobians(&self, _q: &DVector<f64>) -> Result<Option<Vec<DMatrix<f64>>>, NlpError> {
        Ok(None)
    }
}

/// Mutable solver state across SQP iterations.
#[derive(Debug, Clone)]
pub struct SqpState {
    pub q: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Symmetric positive-definite quasi-Newton approximation.
    pub hessian_approx: DMatrix<f64>,
    pub iteration: usize,
    pub kkt_residual: f64,
}

impl SqpState {
    pub fn new(q: DVector<f64>, constraint_count: usize, hessian: DMatrix<f64>) -> Self {
        assert_eq!(hessian.nrows(), q.len());
        assert_eq!(hessian.ncols(), q.len());
        Self {
            multipliers: DVector::zeros(constraint_count),
            hessian_approx: hessian,
            q,
            iteration: 0,
            kkt_residual: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Convergence threshold on `max(||g + A^T mu||_inf, ||h||_inf)`.
    pub kkt_tol: f64,
    /// Merit penalty is `max(penalty_floor, penalty_factor * ||mu||_inf)`.
    pub penalty_floor: f64,
    pub penalty_factor: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            kkt_tol: 1e-8,
            penalty_floor: 1.0,
            penalty_factor: 1.5,
        }
    }
}

/// One completed SQP step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// `||h||_inf` before the step.
    pub constraint_norm: f64,
    pub kkt_residual: f64,
    pub penalty: f64,
    pub merit_before: f64,
    pub merit_after: f64,
    pub alpha: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    pub final_objective: f64,
    pub final_constraint_norm: f64,
    pub history: Vec<IterationRecord>,
}

fn l1_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn rows_transpose_mul(rows: &[SparseRow], mu: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for (j, row) in rows.iter().enumerate() {
        for &(i, a) in row.entries() {
            out[i] += a * mu[j];
        }
    }
    out
}

/// Solves the KKT system
/// `[[B, A^T], [A, 0]] [dq; mu] = [-g; -h]`
/// by dense LU with full pivoting.
///
/// The constraint rows are symmetrically equilibrated to unit norm before
/// factoring, so the singularity test measures rank deficiency of the
/// constraint directions rather than their magnitude. Squared-defect
/// constraints shrink toward zero rows near feasibility while staying
/// directionally independent; the equilibrated system stays regular there,
/// and genuinely dependent rows still fail.
///
/// Fails with [`NlpError::SingularKkt`] when the smallest equilibrated pivot
/// drops below 1e-10.
pub fn solve_kkt(
    hessian: &DMatrix<f64>,
    grad: &DVector<f64>,
    rows: &[SparseRow],
    constraint_values: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), NlpError> {
    let n = grad.len();
    let c = rows.len();
    assert_eq!(constraint_values.len(), c);
    assert_eq!(hessian.nrows(), n);

    let scale: Vec<f64> = rows
        .iter()
        .map(|row| {
            let norm = row
                .entries()
                .iter()
                .map(|&(_, a)| a * a)
                .sum::<f64>()
                .sqrt();
            if norm > 1e-300 {
                1.0 / norm
            } else {
                1.0
            }
        })
        .collect();

    let mut kkt = DMatrix::zeros(n + c, n + c);
    kkt.view_mut((0, 0), (n, n)).copy_from(hessian);
    for (j, row) in rows.iter().enumerate() {
        for &(i, a) in row.entries() {
            kkt[(n + j, i)] = scale[j] * a;
            kkt[(i, n + j)] = scale[j] * a;
        }
    }
    let mut rhs = DVector::zeros(n + c);
    rhs.rows_mut(0, n).copy_from(&(-grad));
    for j in 0..c {
        rhs[n + j] = -scale[j] * constraint_values[j];
    }

    let lu = kkt.full_piv_lu();
    let min_pivot = (0..n + c)
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-10) {
        return Err(NlpError::SingularKkt { pivot: min_pivot });
    }
    let sol = lu
        .solve(&rhs)
        .ok_or(NlpError::SingularKkt { pivot: min_pivot })?;

    let step: DVector<f64> = sol.rows(0, n).clone_owned().into();
    let mut mu = DVector::zeros(c);
    for j in 0..c {
        mu[j] = scale[j] * sol[n + j];
    }
    Ok((step, mu))
}

/// Computes the SQP step and fresh multipliers at the state's current point.
pub fn kkt_step<P: NlpProblem + ?Sized>(
    state: &SqpState,
    prob: &P,
) -> Result<(DVector<f64>, DVector<f64>), NlpError> {
    let grad = prob.objective_grad(&state.q);
    let (h, rows) = prob.constraints_with_grads(&state.q)?;
    solve_kkt(&state.hessian_approx, &grad, &rows, &h)
}

struct AcceptedStep {
    alpha: f64,
    objective: f64,
    merit: f64,
}

/// Armijo backtracking on the l1 merit
/// `phi(q) = f(q) + penalty * sum_j |h_j(q) - shift_j|`.
///
/// `shift` is zero during plain SQP; the shifted phase keeps each squared
/// defect at a small positive target instead of zero.
fn line_search_inner<P: NlpProblem + ?Sized>(
    prob: &P,
    q: &DVector<f64>,
    objective_0: f64,
    grad_0: &DVector<f64>,
    constraints_0: &DVector<f64>,
    shift: &DVector<f64>,
    step: &DVector<f64>,
    penalty: f64,
) -> Result<AcceptedStep, NlpError> {
    let h1 = l1_norm(&(constraints_0 - shift));
    let merit_0 = objective_0 + penalty * h1;
    // Directional derivative of the merit model along the step; the
    // linearized constraints make the full violation vanish, so the merit
    // can decrease at rate penalty * ||h||_1 plus the objective slope.
    let slope = grad_0.dot(step) - penalty * h1;
    if !(slope < 0.0) {
        return Err(NlpError::LineSearchFailure { halvings: 0 });
    }
    let mut alpha = 1.0;
    for _ in 0..=30 {
        let trial = q + alpha * step;
        let objective = prob.objective(&trial);
        if let Ok(constraints) = prob.constraints(&trial) {
            let merit = objective + penalty * l1_norm(&(constraints - shift));
            if merit.is_finite() && merit <= merit_0 + 1e-4 * alpha * slope {
                return Ok(AcceptedStep {
                    alpha,
                    objective,
                    merit,
                });
            }
        }
        alpha *= 0.5;
    }
    Err(NlpError::LineSearchFailure { halvings: 30 })
}

/// Backtracking Armijo line search on the l1 merit
/// `phi(q) = f(q) + penalty * sum |h_j(q)|`.
///
/// Halves `alpha` starting from 1 until
/// `phi(q + alpha step) <= phi(q) + 1e-4 alpha Dphi`; trial points whose
/// constraint evaluation fails count as infinite merit. Fails once alpha
/// drops below 1e-9.
pub fn merit_line_search<P: NlpProblem + ?Sized>(
    state: &SqpState,
    prob: &P,
    step: &DVector<f64>,
    penalty: f64,
) -> Result<f64, NlpError> {
    let objective_0 = prob.objective(&state.q);
    let constraints_0 = prob.constraints(&state.q)?;
    let grad_0 = prob.objective_grad(&state.q);
    let shift = DVector::zeros(constraints_0.len());
    line_search_inner(
        prob,
        &state.q,
        objective_0,
        &grad_0,
        &constraints_0,
        &shift,
        step,
        penalty,
    )
    .map(|accepted| accepted.alpha)
}

/// BFGS update with Powell damping; keeps the approximation symmetric
/// positive definite. Updates with damped curvature below 1e-12 are skipped.
fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let s_bs = s.dot(&bs);
    if !(s_bs > 0.0) {
        return;
    }
    let s_y = s.dot(y);
    let r = if s_y >= 0.2 * s_bs {
        y.clone()
    } else {
        let theta = 0.8 * s_bs / (s_bs - s_y);
        theta * y + (1.0 - theta) * &bs
    };
    let s_r = s.dot(&r);
    if s_r <= 1e-12 {
        return;
    }
    *b -= &bs * bs.transpose() / s_bs;
    *b += &r * r.transpose() / s_r;
    let bt = b.transpose();
    *b = 0.5 * (&*b + bt);
}

/// Runs the SQP iteration from `q0` until the KKT residual
/// `max(||g + A^T mu||_inf, ||h||_inf)` drops to `kkt_tol` or `max_iter`
/// steps are taken. Hitting the iteration cap is not an error: the best
/// iterate is returned with `converged = false`.
///
/// # Hessian model
///
/// Problems that expose their squared-residual structure through
/// [`NlpProblem::constraint_anchor_coords`] get a structured Hessian: the
/// caller's seed (the objective's Gauss-Newton matrix) plus
/// `sum_j 2 |mu_j| J_j^T J_j`, where each residual Jacobian `J_j` is a
/// secant estimate assembled from the constraint gradients the iteration
/// already computes (Broyden updates along the observed defect directions,
/// with the exact identity on the anchor block). Unstructured problems fall
/// back to damped BFGS on the Lagrangian.
///
/// # Degenerate tail
///
/// Squared-defect constraints `h_j = ||G_j||^2` have gradients that vanish
/// at feasibility, so their exact multipliers diverge and the stationarity
/// residual stalls near the scale of the underlying vector multipliers
/// while `||h||` keeps shrinking. When that stall is detected, the
/// iteration re-targets each constraint at a small positive value
/// `t_j <= 0.45 kkt_tol` and keeps running the same SQP on `h_j = t_j`,
/// which is a regular problem: gradients stay nonzero, multipliers stay
/// finite, and quasi-Newton convergence resumes. Its solution satisfies
/// the original convergence test verbatim, since `||h||_inf <= t < kkt_tol`
/// there and the stationarity residual uses the same gradients.
pub fn sqp_solve<P: NlpProblem + ?Sized>(
    prob: &P,
    q0: &DVector<f64>,
    initial_hessian: Option<DMatrix<f64>>,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, SolveReport), NlpError> {
    let n = prob.dim();
    assert_eq!(q0.len(), n);
    let c = prob.constraint_count();
    let seed_hessian = initial_hessian.unwrap_or_else(|| DMatrix::identity(n, n));
    let mut state = SqpState::new(q0.clone(), c, seed_hessian.clone());

    let mut objective = prob.objective(&state.q);
    let mut grad = prob.objective_grad(&state.q);
    let (mut constraints, mut rows) = prob.constraints_with_grads(&state.q)?;

    let mut structured = StructuredCurvature::detect(prob, n);
    if let Some(tracker) = structured.as_mut() {
        tracker.observe(&rows, &constraints, None);
        state.hessian_approx = tracker.hessian(&seed_hessian, &state.multipliers);
    }
    // Secant corrections accumulated once the defects sit on their targets:
    // at that point the analytic part is static and plain BFGS on top of it
    // captures what Gauss-Newton misses (residual-weighted second
    // derivatives). Zero until then.
    let mut bank = DMatrix::zeros(n, n);

    let mut history: Vec<IterationRecord> = Vec::new();
    // Multiplier magnitudes and vector-multiplier estimates of completed
    // steps, for degeneracy detection.
    let mut mu_trace: Vec<f64> = Vec::new();
    let mut lambda_trace: Vec<f64> = Vec::new();
    // Squared-defect targets, zero until the degenerate tail shows itself.
    // Once engaged, each constraint is held at a small positive value
    // inside the tolerance rather than exactly zero, which keeps the
    // problem regular (gradients of h_j = ||G_j||^2 vanish at zero, so
    // their exact multipliers diverge there). Problems whose multipliers
    // stay bounded (consistent data) never need the shift and converge on
    // the original targets.
    let mut shift = DVector::zeros(c);
    let mut shifted = false;
    let mut mu_prev = DVector::zeros(c);
    // Exact Jacobian refreshes are allowed twice per solve, spaced apart.
    let mut refreshes_left = 2u32;
    let mut last_refresh = 0usize;

    let mut iteration = 0usize;
    while iteration <= opts.max_iter {
        state.iteration = iteration;
        // Convergence always measures the original constraints.
        let feasibility = inf_norm(&constraints);
        let effective = &constraints - &shift;

        // Check with the multipliers already held (zero before the first
        // KKT solve, least-squares estimates once the iterates are nearly
        // feasible); this catches starts at a KKT point without touching
        // the KKT system, which is singular once every defect vanishes.
        if feasibility <= opts.kkt_tol {
            if let Some(mu_ls) = least_squares_multipliers(&grad, &rows, n) {
                let res = inf_norm(&(&grad + rows_transpose_mul(&rows, &mu_ls, n)));
                if res < inf_norm(&(&grad + rows_transpose_mul(&rows, &state.multipliers, n))) {
                    state.multipliers = mu_ls;
                }
            }
        }
        let stationarity_held =
            inf_norm(&(&grad + rows_transpose_mul(&rows, &state.multipliers, n)));
        if stationarity_held.max(feasibility) <= opts.kkt_tol {
            state.kkt_residual = stationarity_held.max(feasibility);
            return Ok((
                state.q.clone(),
                SolveReport {
                    iterations: iteration,
                    kkt_residual: state.kkt_residual,
                    converged: true,
                    final_objective: objective,
                    final_constraint_norm: feasibility,
                    history,
                },
            ));
        }
        if iteration == opts.max_iter {
            break;
        }

        let (step, mu) = match solve_kkt(&state.hessian_approx, &grad, &rows, &effective) {
            Ok(sol) => sol,
            // A singular system at a near-feasible point is the squared-
            // constraint degeneracy; engage the targets and retry.
            Err(NlpError::SingularKkt { .. }) if !shifted && feasibility <= 1e-2 => {
                shift = constraints.map(|h| h.abs().min(0.45 * opts.kkt_tol));
                shifted = true;
                continue;
            }
            Err(other) => return Err(other),
        };
        // The Hessian was built from the previous multipliers; while they
        // grow along the degenerate tail that lag understiffens the model
        // and the line search pays for it. Re-solving after rebuilding the
        // Hessian at the fresh multipliers is pure linear algebra and makes
        // the pair self-consistent.
        let (step, mu) = match structured.as_ref() {
            Some(tracker) => {
                let mut step = step;
                let mut mu = mu;
                for _ in 0..5 {
                    let rebuilt = tracker.hessian(&seed_hessian, &mu) + &bank;
                    let (next_step, next_mu) = solve_kkt(&rebuilt, &grad, &rows, &effective)?;
                    let drift = (&next_mu - &mu).amax();
                    state.hessian_approx = rebuilt;
                    step = next_step;
                    mu = next_mu;
                    if drift <= 0.02 * mu.amax().max(1.0) {
                        break;
                    }
                }
                (step, mu)
            }
            None => (step, mu),
        };
        let stationarity = inf_norm(&(&grad + rows_transpose_mul(&rows, &mu, n)));
        let residual = stationarity.max(feasibility);
        state.multipliers = mu.clone();
        state.kkt_residual = residual;

        if residual <= opts.kkt_tol {
            return Ok((
                state.q.clone(),
                SolveReport {
                    iterations: iteration,
                    kkt_residual: residual,
                    converged: true,
                    final_objective: objective,
                    final_constraint_norm: feasibility,
                    history,
                },
            ));
        }

        // Multipliers diverging while the iterates approach feasibility is
        // the signature of the squared-constraint degeneracy (the exact
        // multipliers grow like 1 / ||G||). The products 2 mu_j sqrt(h_j)
        // estimate the underlying vector-multiplier norms; re-targeting
        // pays off only when those dwarf the defect size the tolerance
        // already permits. Runs with consistent data have vanishing vector
        // multipliers and never trip this.
        let mu_inf = inf_norm(&mu);
        let lambda_hat = 2.0 * mu_inf * feasibility.sqrt();
        let diverging = !shifted
            && feasibility <= 1e-2
            && mu_trace.len() >= 3
            && mu_inf >= 3.0 * mu_trace[mu_trace.len() - 3]
            && mu_inf >= 100.0 * opts.penalty_floor
            && lambda_hat >= 0.7 * lambda_trace[lambda_trace.len() - 3];
        if diverging {
            shift = constraints.map(|h| h.abs().min(0.45 * opts.kkt_tol));
            shifted = true;
            continue;
        }

        let penalty = opts.penalty_floor.max(opts.penalty_factor * inf_norm(&mu));
        let merit_before = objective + penalty * l1_norm(&effective);
        let slope = grad.dot(&step) - penalty * l1_norm(&effective);
        if !(slope < 0.0) {
            // An indefinite correction can spoil descent; drop it and retry
            // on the guaranteed-descent structured model.
            if bank.iter().any(|v| *v != 0.0) {
                bank.fill(0.0);
                if let Some(tracker) = structured.as_ref() {
                    state.hessian_approx = tracker.hessian(&seed_hessian, &mu);
                }
                continue;
            }
            return Err(NlpError::LineSearchFailure { halvings: 0 });
        }

        // Second-order correction: a squared constraint only halves its
        // defect under the linearized full step; re-evaluating at the trial
        // point and correcting inside the same null space removes that
        // quadratic remainder. Falls back to plain backtracking whenever it
        // does not pass the Armijo test at full length.
        let mut accepted: Option<(AcceptedStep, DVector<f64>)> = None;
        if let Ok(h_trial) = prob.constraints(&(&state.q + &step)) {
            let gap = &h_trial - &shift;
            if let Ok((soc, _)) = solve_kkt(
                &state.hessian_approx,
                &DVector::zeros(n),
                &rows,
                &gap,
            ) {
                let corrected = &step + soc;
                let trial = &state.q + &corrected;
                let trial_objective = prob.objective(&trial);
                if let Ok(h_corr) = prob.constraints(&trial) {
                    let merit = trial_objective + penalty * l1_norm(&(h_corr - &shift));
                    if merit.is_finite() && merit <= merit_before + 1e-4 * slope {
                        accepted = Some((
                            AcceptedStep {
                                alpha: 1.0,
                                objective: trial_objective,
                                merit,
                            },
                            corrected,
                        ));
                    }
                }
            }
        }
        let (accepted, displacement) = match accepted {
            Some(found) => found,
            None => {
                let plain = line_search_inner(
                    prob,
                    &state.q,
                    objective,
                    &grad,
                    &constraints,
                    &shift,
                    &step,
                    penalty,
                )?;
                let displacement = plain.alpha * &step;
                (plain, displacement)
            }
        };

        let grad_lagrangian_old = &grad + rows_transpose_mul(&rows, &mu, n);
        let q_new = &state.q + &displacement;
        let grad_new = prob.objective_grad(&q_new);
        let (constraints_new, rows_new) = prob.constraints_with_grads(&q_new)?;

        match structured.as_mut() {
            Some(tracker) => {
                tracker.observe(&rows_new, &constraints_new, Some(&displacement));
                let structured_part = tracker.hessian(&seed_hessian, &mu);
                // SR1 corrections on top of the analytic part, gathered once
                // the multipliers settle (before that the secants chase a
                // moving target). They capture what Gauss-Newton misses --
                // the residual-weighted, generally indefinite second-order
                // constraint terms -- accurately enough for the terminal
                // Newton step to land inside the tolerance in one jump.
                let drift = inf_norm(&(&mu - &mu_prev));
                let settled = shifted && drift <= 0.05 * inf_norm(&mu).max(1.0);
                // Exact Jacobians pay off right before the terminal Newton
                // steps: once the multipliers settle on the shifted path, or
                // once an unshifted run is nearly feasible with stationarity
                // still open.
                let near_end = !shifted
                    && inf_norm(&constraints_new) <= 100.0 * opts.kkt_tol
                    && state.kkt_residual > opts.kkt_tol;
                if (settled || near_end)
                    && refreshes_left > 0
                    && iteration >= last_refresh + 4
                {
                    if let Some(exact) = prob.constraint_jacobians(&q_new)? {
                        tracker.refresh(exact);
                        refreshes_left -= 1;
                        last_refresh = iteration;
                    }
                }
                if settled && inf_norm(&displacement) > 1e-9 {
                    let grad_lagrangian_new =
                        &grad_new + rows_transpose_mul(&rows_new, &mu, n);
                    let y = grad_lagrangian_new - grad_lagrangian_old;
                    let full = &structured_part + &bank;
                    let residual_vec = y - full * &displacement;
                    let gap = displacement.dot(&residual_vec);
                    if gap.abs() >= 1e-8 * displacement.norm() * residual_vec.norm() {
                        bank += &residual_vec * residual_vec.transpose() / gap;
                    }
                }
                state.hessian_approx = structured_part + &bank;
            }
            None => {
                let grad_lagrangian_new = &grad_new + rows_transpose_mul(&rows_new, &mu, n);
                let y = grad_lagrangian_new - grad_lagrangian_old;
                bfgs_update(&mut state.hessian_approx, &displacement, &y);
            }
        }

        history.push(IterationRecord {
            iteration,
            objective,
            constraint_norm: feasibility,
            kkt_residual: residual,
            penalty,
            merit_before,
            merit_after: accepted.merit,
            alpha: accepted.alpha,
            step_norm: inf_norm(&displacement),
        });

        state.q = q_new;
        objective = accepted.objective;
        grad = grad_new;
        constraints = constraints_new;
        rows = rows_new;
        mu_trace.push(mu_inf);
        lambda_trace.push(lambda_hat);
        mu_prev = mu;
        iteration += 1;
    }

    let feasibility = inf_norm(&constraints);
    Ok((
        state.q.clone(),
        SolveReport {
            iterations: opts.max_iter,
            kkt_residual: state.kkt_residual,
            converged: false,
            final_objective: objective,
            final_constraint_norm: feasibility,
            history,
        },
    ))
}

/// Least-squares multiplier estimate `argmin ||g + A^T mu||_2`, from the
/// normal equations of the constraint-gradient rows. `None` when the rows
/// are too degenerate to factor.
fn least_squares_multipliers(
    grad: &DVector<f64>,
    rows: &[SparseRow],
    n: usize,
) -> Option<DVector<f64>> {
    let c = rows.len();
    if c == 0 {
        return None;
    }
    let mut gram = DMatrix::zeros(c, c);
    let mut rhs = DVector::zeros(c);
    let dense: Vec<DVector<f64>> = rows.iter().map(|r| r.to_dense(n)).collect();
    for i in 0..c {
        for j in i..c {
            let v = dense[i].dot(&dense[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
        rhs[i] = -dense[i].dot(grad);
    }
    gram.lu().solve(&rhs)
}

/// Secant-tracked residual Jacobians of squared-distance constraints.
///
/// Constraint `j` is `h_j = ||G_j||^2` with `G_j = F_j(...) - q[anchor]`.
/// Its gradient `grad h_j = 2 J_j^T G_j` is observed every iteration; the
/// anchor block of that gradient recovers `G_j` exactly, so each gradient
/// is one exact directional read `J_j^T u` along the current unit defect
/// `u`. A Broyden update per observation keeps `J_j^T` interpolating the
/// newest read; the anchor block of `J_j^T` is the exact `-I`.
struct StructuredCurvature {
    anchors: Vec<Vec<usize>>,
    /// Per constraint: `J_j^T`, an `n x d_j` matrix.
    jac_t: Vec<DMatrix<f64>>,
    /// Residual vectors at the previously observed point.
    last_residuals: Option<Vec<DVector<f64>>>,
}

impl StructuredCurvature {
    /// Structured mode requires every constraint to expose its anchor.
    fn detect<P: NlpProblem + ?Sized>(prob: &P, n: usize) -> Option<Self> {
        let c = prob.constraint_count();
        if c == 0 {
            return None;
        }
        let anchors: Vec<Vec<usize>> =
            (0..c).map(|j| prob.constraint_anchor_coords(j)).collect();
        if anchors.iter().any(|a| a.is_empty()) {
            return None;
        }
        let jac_t = anchors
            .iter()
            .map(|coords| {
                let mut m = DMatrix::zeros(n, coords.len());
                for (col, &i) in coords.iter().enumerate() {
                    m[(i, col)] = -1.0;
                }
                m
            })
            .collect();
        Some(Self {
            anchors,
            jac_t,
            last_residuals: None,
        })
    }

    /// Residual `G_j = -grad/2` read off the gradient's anchor block.
    fn residual(&self, j: usize, row: &SparseRow) -> DVector<f64> {
        let coords = &self.anchors[j];
        let mut g = DVector::zeros(coords.len());
        for &(idx, v) in row.entries() {
            if let Some(col) = coords.iter().position(|&a| a == idx) {
                g[col] = -0.5 * v;
            }
        }
        g
    }

    /// Absorbs one set of constraint gradients, taken `step` away from the
    /// previous set (`None` at the starting point).
    ///
    /// Two exact reads feed each Jacobian estimate: the secant
    /// `J_j step ~ G_j^+ - G_j^-` refreshes the step direction, and the
    /// gradient itself (`grad h_j = 2 J_j^T G_j`) pins the action on the
    /// current unit defect. The anchor block stays the exact `-I` under
    /// both updates because the observations honor it.
    fn observe(
        &mut self,
        rows: &[SparseRow],
        constraints: &DVector<f64>,
        step: Option<&DVector<f64>>,
    ) {
        let mut residuals = Vec::with_capacity(rows.len());
        for (j, row) in rows.iter().enumerate() {
            let g = self.residual(j, row);
            let norm = g.norm();

            if let (Some(step), Some(last)) = (step, self.last_residuals.as_ref()) {
                let step_sq = step.norm_squared();
                let delta = &g - &last[j];
                // Tiny terminal steps carry more roundoff than information;
                // the estimate is accurate by then, so stop rotating it.
                if step_sq > 1e-16 && delta.norm() > 1e-12 {
                    let correction = (delta - self.jac_t[j].transpose() * step) / step_sq;
                    self.jac_t[j] += step * correction.transpose();
                }
            }

            if norm > 1e-13 && constraints[j].abs() > 1e-26 {
                let u = &g / norm;
                // J^T u, read off the full gradient.
                let mut observed = DVector::zeros(self.jac_t[j].nrows());
                for &(idx, v) in row.entries() {
                    observed[idx] = v / (2.0 * norm);
                }
                let correction = observed - &self.jac_t[j] * &u;
                self.jac_t[j] += correction * u.transpose();
            }
            residuals.push(g);
        }
        self.last_residuals = Some(residuals);
    }

    /// Replaces every estimate with an exactly computed Jacobian.
    fn refresh(&mut self, exact: Vec<DMatrix<f64>>) {
        assert_eq!(exact.len(), self.jac_t.len());
        self.jac_t = exact;
    }

    /// Gauss-Newton Lagrangian Hessian: seed + sum_j 2 |mu_j| J_j J_j^T.
    fn hessian(&self, seed: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
        let mut b = seed.clone();
        for (j, jt) in self.jac_t.iter().enumerate() {
            let weight = 2.0 * mu[j].abs().min(1e12);
            if weight > 0.0 {
                b += weight * jt * jt.transpose();
            }
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    /// `min 0.5 q^T Q q + b^T q` with optional single linear constraint
    /// `a^T q = rhs`, encoded through the trait.
    struct Quadratic {
        q_mat: DMatrix<f64>,
        b: DVector<f64>,
        a: Option<(DVector<f64>, f64)>,
    }

    impl NlpProblem for Quadratic {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn constraint_count(&self) -> usize {
            usize::from(self.a.is_some())
        }
        fn objective(&self, q: &DVector<f64>) -> f64 {
            0.5 * q.dot(&(&self.q_mat * q)) + self.b.dot(q)
        }
        fn objective_grad(&self, q: &DVector<f64>) -> DVector<f64> {
            &self.q_mat * q + &self.b
        }
        fn constraints(&self, q: &DVector<f64>) -> Result<DVector<f64>, NlpError> {
            Ok(match &self.a {
                Some((a, rhs)) => dvector![a.dot(q) - rhs],
                None => DVector::zeros(0),
            })
        }
        fn constraint_grads(&self, _q: &DVector<f64>) -> Result<Vec<SparseRow>, NlpError> {
            Ok(match &self.a {
                Some((a, _)) => vec![SparseRow::new(
                    a.iter().enumerate().map(|(i, v)| (i, *v)).collect(),
                )],
                None => vec![],
            })
        }
    }

    #[test]
    fn kkt_step_hand_example() {
        // min x^2 + y^2 s.t. x + y = 1 from the origin with B = 2 I:
        // step (0.5, 0.5), multiplier -1.
        let prob = Quadratic {
            q_mat: 2.0 * DMatrix::identity(2, 2),
            b: DVector::zeros(2),
            a: Some((dvector![1.0, 1.0], 1.0)),
        };
        let state = SqpState::new(DVector::zeros(2), 1, 2.0 * DMatrix::identity(2, 2));
        let (step, mu) = kkt_step(&state, &prob).expect("solvable");
        assert_relative_eq!(step, dvector![0.5, 0.5], epsilon = 1e-12);
        assert_relative_eq!(mu[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn kkt_step_is_zero_at_a_kkt_point() {
        // Same problem at its optimum (0.5, 0.5) with consistent multiplier.
        let prob = Quadratic {
            q_mat: 2.0 * DMatrix::identity(2, 2),
            b: DVector::zeros(2),
            a: Some((dvector![1.0, 1.0], 1.0)),
        };
        let state = SqpState::new(dvector![0.5, 0.5], 1, 2.0 * DMatrix::identity(2, 2));
        let (step, _) = kkt_step(&state, &prob).expect("solvable");
        assert!(step.norm() <= 1e-14, "step = {step}");
    }

    #[test]
    fn kkt_solution_matches_schur_complement_route() {
        // Independent algebraic path: mu from the Schur complement
        // (A B^-1 A^T) mu = A B^-1 (-g) + h, then dq = -B^-1 (g + A^T mu).
        let q_mat = DMatrix::from_row_slice(
            3,
            3,
            &[4.0, 0.5, 0.2, 0.5, 3.0, -0.1, 0.2, -0.1, 5.0],
        );
        let g = dvector![1.0, -2.0, 0.5];
        let a = dvector![1.0, 2.0, -1.0];
        let h = dvector![0.7];

        let rows = vec![SparseRow::new(vec![(0, a[0]), (1, a[1]), (2, a[2])])];
        let (step, mu) = solve_kkt(&q_mat, &g, &rows, &h).expect("solvable");

        // B dq + A^T mu = -g and A dq = -h give
        // mu = (A B^-1 A^T)^-1 (h - A B^-1 g).
        let b_inv = q_mat.clone().try_inverse().expect("invertible");
        let schur = (a.transpose() * &b_inv * &a)[(0, 0)];
        let mu_schur = (h[0] - (a.transpose() * &b_inv * &g)[0]) / schur;
        let dq = -&b_inv * (&g + &a * mu_schur);
        assert_relative_eq!(mu[0], mu_schur, epsilon = 1e-10);
        assert_relative_eq!(step, dq, epsilon = 1e-10);
    }

    #[test]
    fn duplicate_constraints_are_singular() {
        let q_mat = DMatrix::identity(2, 2);
        let g = dvector![1.0, 1.0];
        let rows = vec![
            SparseRow::new(vec![(0, 1.0), (1, 1.0)]),
            SparseRow::new(vec![(0, 1.0), (1, 1.0)]),
        ];
        let h = dvector![0.3, 0.3];
        match solve_kkt(&q_mat, &g, &rows, &h) {
            Err(NlpError::SingularKkt { pivot }) => assert!(pivot <= 1e-10),
            other => panic!("expected SingularKkt, got {other:?}"),
        }
    }

    #[test]
    fn newton_step_is_accepted_at_full_length() {
        let prob = Quadratic {
            q_mat: DMatrix::from_diagonal(&dvector![2.0, 6.0]),
            b: dvector![1.0, -2.0],
            a: None,
        };
        let q = dvector![1.0, 1.0];
        let hessian = prob.q_mat.clone();
        let state = SqpState::new(q.clone(), 0, hessian);
        let (step, _) = kkt_step(&state, &prob).expect("solvable");
        let alpha = merit_line_search(&state, &prob, &step, 1.0).expect("descends");
        assert_eq!(alpha, 1.0);
    }

    #[test]
    fn steep_merit_accepts_a_shortened_step() {
        // Overshooting step: Armijo must back off to some alpha <= 1/2,
        // verified against direct merit evaluation on the alpha grid.
        let prob = Quadratic {
            q_mat: DMatrix::from_diagonal(&dvector![2.0]),
            b: DVector::zeros(1),
            a: None,
        };
        let state = SqpState::new(dvector![1.0], 0, DMatrix::identity(1, 1));
        let step = dvector![-2.5];
        let alpha = merit_line_search(&state, &prob, &step, 1.0).expect("descends");
        assert!(alpha <= 0.5, "alpha = {alpha}");
        let merit = |a: f64| {
            let q = &state.q + a * &step;
            prob.objective(&q)
        };
        let slope = prob.objective_grad(&state.q).dot(&step);
        assert!(merit(alpha) <= merit(0.0) + 1e-4 * alpha * slope);
        assert!(merit(2.0 * alpha) > merit(0.0) + 1e-4 * 2.0 * alpha * slope);
    }

    #[test]
    fn ascent_direction_fails_the_line_search() {
        let prob = Quadratic {
            q_mat: DMatrix::identity(2, 2),
            b: DVector::zeros(2),
            a: None,
        };
        let state = SqpState::new(dvector![1.0, 0.0], 0, DMatrix::identity(2, 2));
        let ascent = dvector![1.0, 0.0];
        assert!(matches!(
            merit_line_search(&state, &prob, &ascent, 1.0),
            Err(NlpError::LineSearchFailure { .. })
        ));
    }

    #[test]
    fn unconstrained_quadratic_converges_quickly() {
        let prob = Quadratic {
            q_mat: DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 4.0, 0.1, 0.0, 0.1, 3.0]),
            b: dvector![1.0, -1.0, 0.5],
            a: None,
        };
        for q0 in [dvector![0.0, 0.0, 0.0], dvector![5.0, -3.0, 2.0]] {
            let (q_star, report) =
                sqp_solve(&prob, &q0, None, &SolveOptions::default()).expect("solves");
            assert!(report.converged);
            assert!(report.kkt_residual <= 1e-8);
            assert!(report.iterations <= 5, "iterations = {}", report.iterations);
            let grad = prob.objective_grad(&q_star);
            assert!(grad.norm() <= 1e-7, "gradient {grad}");
        }
    }

    #[test]
    fn start_at_kkt_point_converges_immediately() {
        let prob = Quadratic {
            q_mat: 2.0 * DMatrix::identity(2, 2),
            b: DVector::zeros(2),
            a: Some((dvector![1.0, 1.0], 1.0)),
        };
        let (q_star, report) = sqp_solve(
            &prob,
            &dvector![0.5, 0.5],
            None,
            &SolveOptions::default(),
        )
        .expect("solves");
        assert!(report.converged);
        assert!(report.iterations <= 1);
        assert_relative_eq!(q_star, dvector![0.5, 0.5], epsilon = 1e-12);
    }

    #[test]
    fn constrained_quadratic_converges_with_merit_descent() {
        let prob = Quadratic {
            q_mat: DMatrix::from_diagonal(&dvector![2.0, 5.0, 1.0]),
            b: dvector![0.3, -1.0, 0.2],
            a: Some((dvector![1.0, 1.0, 1.0], 2.0)),
        };
        let (q_star, report) = sqp_solve(
            &prob,
            &dvector![4.0, -1.0, 0.0],
            None,
            &SolveOptions::default(),
        )
        .expect("solves");
        assert!(report.converged);
        assert_relative_eq!(q_star.iter().sum::<f64>(), 2.0, epsilon = 1e-8);
        for rec in &report.history {
            assert!(
                rec.merit_after < rec.merit_before,
                "merit rose at iteration {}",
                rec.iteration
            );
        }
    }

    #[test]
    fn hessian_stays_positive_definite_through_updates() {
        let prob = Quadratic {
            q_mat: DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]),
            b: dvector![1.0, -3.0],
            a: Some((dvector![2.0, -1.0], 0.5)),
        };
        let mut b = DMatrix::identity(2, 2);
        let mut q = dvector![2.0, 2.0];
        for _ in 0..12 {
            let grad = prob.objective_grad(&q);
            let (h, rows) = prob.constraints_with_grads(&q).unwrap();
            let (step, mu) = solve_kkt(&b, &grad, &rows, &h).expect("solvable");
            let q_new = &q + 0.7 * &step;
            let gl_old = &grad + rows_transpose_mul(&rows, &mu, 2);
            let grad_new = prob.objective_grad(&q_new);
            let (_, rows_new) = prob.constraints_with_grads(&q_new).unwrap();
            let gl_new = &grad_new + rows_transpose_mul(&rows_new, &mu, 2);
            bfgs_update(&mut b, &(0.7 * &step), &(gl_new - gl_old));

            let eig = b.clone().symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&e| e > 0.0), "eigenvalues {eig}");
            assert_relative_eq!(b[(0, 1)], b[(1, 0)], epsilon = 1e-14);
            q = q_new;
        }
    }

    #[test]
    fn blowing_up_trial_points_are_never_accepted() {
        // Constraint evaluation fails beyond |x| > 2; the full step lands
        // there, so the line search must settle on a shorter step.
        struct Guarded;
        impl NlpProblem for Guarded {
            fn dim(&self) -> usize {
                1
            }
            fn constraint_count(&self) -> usize {
                1
            }
            fn objective(&self, q: &DVector<f64>) -> f64 {
                q[0] * q[0]
            }
            fn objective_grad(&self, q: &DVector<f64>) -> DVector<f64> {
                dvector![2.0 * q[0]]
            }
            fn constraints(&self, q: &DVector<f64>) -> Result<DVector<f64>, NlpError> {
                if q[0].abs() > 2.0 {
                    Err(NlpError::Eval {
                        message: "blow-up".into(),
                    })
                } else {
                    Ok(dvector![q[0] - 0.5])
                }
            }
            fn constraint_grads(&self, _q: &DVector<f64>) -> Result<Vec<SparseRow>, NlpError> {
                Ok(vec![SparseRow::new(vec![(0, 1.0)])])
            }
        }

        let prob = Guarded;
        let state = SqpState::new(dvector![1.0], 1, DMatrix::identity(1, 1));
        // A descent step for the merit whose full length exits the safe box.
        let step = dvector![-4.0];
        let alpha = merit_line_search(&state, &prob, &step, 10.0).expect("finds a step");
        assert!((state.q[0] + alpha * step[0]).abs() <= 2.0);
        assert!(alpha < 1.0);
    }

    #[test]
    fn max_iterations_reports_unconverged() {
        let prob = Quadratic {
            q_mat: DMatrix::from_diagonal(&dvector![1.0, 100.0]),
            b: dvector![1.0, 1.0],
            a: None,
        };
        let opts = SolveOptions {
            max_iter: 1,
            ..Default::default()
        };
        let (_, report) =
            sqp_solve(&prob, &dvector![10.0, 10.0], None, &opts).expect("runs");
        assert!(!report.converged);
        assert_eq!(report.iterations, 1);
    }
}
