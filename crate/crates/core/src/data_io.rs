//! Measurement CSV files, config files, seeded noise, and result writers.
//!
//! Every float is serialized with 17 significant digits so files round-trip
//! doubles exactly, and nothing here writes timestamps: identical inputs
//! produce byte-identical outputs.
//!
//! # Random numbers
//!
//! [`Rng`] is xoshiro256++ seeded through splitmix64, with standard-normal
//! draws via Box-Muller on the generator's uniform output (two uniforms per
//! draw, cosine branch). The generator is fixed here rather than taken from
//! a library so seeded streams are identical on every platform and toolchain.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::{EstimationConfig, EstimationResult};
use crate::ode::{self, OdeModel, Trajectory};
use crate::shooting::{MeasurementSet, ShootingError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty measurement file: at least one data row is required")]
    Empty,
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Integration(#[from] ode::OdeError),
    #[error(transparent)]
    Shooting(#[from] ShootingError),
}

/// Deterministic pseudo-random generator: splitmix64-seeded xoshiro256++.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed;
        let mut split = || {
            z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut x = z;
            x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            x ^ (x >> 31)
        };
        let mut state = [split(), split(), split(), split()];
        if state == [0, 0, 0, 0] {
            state[0] = 1;
        }
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = self.state;
        let result = s0.wrapping_add(s3).rotate_left(23).wrapping_add(s0);
        let t = s1 << 17;
        let s2 = s2 ^ s0;
        let s3 = s3 ^ s1;
        let s1 = s1 ^ s2;
        let s0 = s0 ^ s3;
        self.state = [s0, s1, s2 ^ t, s3.rotate_left(45)];
        result
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard-normal draw by Box-Muller; consumes two uniforms.
    pub fn standard_normal(&mut self) -> f64 {
        // First uniform shifted into (0, 1] so the log stays finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Simulates the true system densely (1000 steps per unit time), samples it
/// at `times`, and disturbs every observed entry with independent
/// N(0, sigma^2) noise from the seeded generator. All state components are
/// observed. The recorded weights are 1: the benchmark objective is
/// unweighted, and uniform weights do not move the minimizer.
pub fn generate_synthetic(
    model: &dyn OdeModel,
    x0: &DVector<f64>,
    p_true: &DVector<f64>,
    times: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<MeasurementSet, DataError> {
    if times.len() < 2 {
        return Err(DataError::Invalid(
            "at least two sample times are required".into(),
        ));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DataError::Invalid("times must be strictly increasing".into()));
    }
    if !(sigma >= 0.0) {
        return Err(DataError::Invalid("sigma must be non-negative".into()));
    }

    let t0 = times[0];
    let t_end = *times.last().expect("non-empty");
    let steps = ((t_end - t0) * 1000.0).ceil() as usize;
    let traj = ode::integrate_forward(model, x0, p_true, t0, t_end, steps.max(1))?;

    let d = model.dim_state();
    let mut rng = Rng::new(seed);
    let mut values = DMatrix::zeros(d, times.len());
    for (col, &t) in times.iter().enumerate() {
        let x = ode::dense_eval(&traj, t)?;
        for i in 0..d {
            values[(i, col)] = x[i] + sigma * rng.standard_normal();
        }
    }

    let weights = DMatrix::from_element(d, times.len(), 1.0);
    Ok(MeasurementSet::new(
        times.to_vec(),
        (0..times.len()).collect(),
        (0..d).collect(),
        values,
        weights,
    )?)
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a measurement set as CSV with header
/// `t,x<i>...,sigma<i>...`, one row per measured node, floats at 17
/// significant digits.
pub fn write_measurements(path: &Path, meas: &MeasurementSet) -> Result<(), DataError> {
    let mut out = String::new();
    out.push('t');
    for &comp in meas.obs_indices() {
        out.push_str(&format!(",x{}", comp + 1));
    }
    for &comp in meas.obs_indices() {
        out.push_str(&format!(",sigma{}", comp + 1));
    }
    out.push('\n');
    for (col, &t) in meas.times().iter().enumerate() {
        out.push_str(&fmt_float(t));
        for row in 0..meas.num_obs() {
            out.push(',');
            out.push_str(&fmt_float(meas.values()[(row, col)]));
        }
        for row in 0..meas.num_obs() {
            out.push(',');
            out.push_str(&fmt_float(meas.weights()[(row, col)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Raw rows of a measurement CSV: times, per-component values, and the
/// optional per-component sigmas.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFile {
    /// Zero-based state components, from the `x<i>` header columns.
    pub components: Vec<usize>,
    pub times: Vec<f64>,
    /// `values[row][k]` is component `components[k]` at `times[row]`.
    pub values: Vec<Vec<f64>>,
    pub sigmas: Option<Vec<Vec<f64>>>,
}

impl MeasurementFile {
    /// Converts to a measurement set, bound to node indices 0.. in file
    /// order. Files without sigma columns take `default_sigma` as the
    /// uniform weight (unit weight when it is zero).
    pub fn into_measurement_set(self, default_sigma: f64) -> Result<MeasurementSet, DataError> {
        let rows = self.times.len();
        let obs = self.components.len();
        let mut values = DMatrix::zeros(obs, rows);
        let mut weights = DMatrix::zeros(obs, rows);
        let fallback = if default_sigma > 0.0 { default_sigma } else { 1.0 };
        for r in 0..rows {
            for c in 0..obs {
                values[(c, r)] = self.values[r][c];
                weights[(c, r)] = match &self.sigmas {
                    Some(s) => s[r][c],
                    None => fallback,
                };
            }
        }
        Ok(MeasurementSet::new(
            self.times,
            (0..rows).collect(),
            self.components,
            values,
            weights,
        )?)
    }
}

fn parse_field(raw: &str, line: usize) -> Result<f64, DataError> {
    raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
        line,
        message: format!("expected a number, found '{}'", raw.trim()),
    })
}

/// Reads a measurement CSV produced by [`write_measurements`] (sigma
/// columns optional).
pub fn read_measurements(path: &Path) -> Result<MeasurementFile, DataError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or(DataError::Empty)?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"t") {
        return Err(DataError::Parse {
            line: 1,
            message: "header must start with 't'".into(),
        });
    }
    let mut components = Vec::new();
    let mut sigma_components = Vec::new();
    for col in &columns[1..] {
        if let Some(idx) = col.strip_prefix("sigma") {
            let comp: usize = idx.parse().map_err(|_| DataError::Parse {
                line: 1,
                message: format!("bad sigma column '{col}'"),
            })?;
            sigma_components.push(comp - 1);
        } else if let Some(idx) = col.strip_prefix('x') {
            let comp: usize = idx.parse().map_err(|_| DataError::Parse {
                line: 1,
                message: format!("bad value column '{col}'"),
            })?;
            components.push(comp - 1);
        } else {
            return Err(DataError::Parse {
                line: 1,
                message: format!("unrecognized column '{col}'"),
            });
        }
    }
    if components.is_empty() {
        return Err(DataError::Parse {
            line: 1,
            message: "no x<i> value columns".into(),
        });
    }
    let has_sigmas = !sigma_components.is_empty();
    if has_sigmas && sigma_components != components {
        return Err(DataError::Parse {
            line: 1,
            message: "sigma columns must mirror the x columns".into(),
        });
    }

    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut sigmas = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        let expected = 1 + components.len() * if has_sigmas { 2 } else { 1 };
        if fields.len() != expected {
            return Err(DataError::Parse {
                line,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        times.push(parse_field(fields[0], line)?);
        let row: Vec<f64> = fields[1..=components.len()]
            .iter()
            .map(|f| parse_field(f, line))
            .collect::<Result<_, _>>()?;
        values.push(row);
        if has_sigmas {
            let srow: Vec<f64> = fields[1 + components.len()..]
                .iter()
                .map(|f| parse_field(f, line))
                .collect::<Result<_, _>>()?;
            if srow.iter().any(|s| !(*s > 0.0)) {
                return Err(DataError::Parse {
                    line,
                    message: "sigma entries must be positive".into(),
                });
            }
            sigmas.push(srow);
        }
    }
    if times.is_empty() {
        return Err(DataError::Empty);
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DataError::Invalid("times must be strictly increasing".into()));
    }

    Ok(MeasurementFile {
        components,
        times,
        values,
        sigmas: has_sigmas.then_some(sigmas),
    })
}

fn parse_float_list(raw: &str, line: usize) -> Result<Vec<f64>, DataError> {
    raw.split(',')
        .map(|f| parse_field(f, line))
        .collect::<Result<Vec<_>, _>>()
}

/// Parses a `key = value` config. Recognized keys: `model`, `nodes`,
/// `steps_per_interval`, `p0`, `sigma`, `seed`, `max_iter`, `kkt_tol`,
/// `x0`, `p_true`. Lists are comma-separated. Lines starting with `#` and
/// blank lines are skipped; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<EstimationConfig, DataError> {
    let mut model = None;
    let mut nodes = None;
    let mut steps_per_interval = None;
    let mut p0 = None;
    let mut sigma = 0.05;
    let mut seed = 1_u64;
    let mut max_iter = 100_usize;
    let mut kkt_tol = 1e-8;
    let mut x0_true = None;
    let mut p_true = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| DataError::Parse {
            line,
            message: "expected 'key = value'".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "model" => model = Some(value.to_string()),
            "nodes" => nodes = Some(parse_float_list(value, line)?),
            "steps_per_interval" => {
                steps_per_interval = Some(value.parse().map_err(|_| DataError::Parse {
                    line,
                    message: format!("bad steps_per_interval '{value}'"),
                })?)
            }
            "p0" => p0 = Some(DVector::from_vec(parse_float_list(value, line)?)),
            "sigma" => sigma = parse_field(value, line)?,
            "seed" => {
                seed = value.parse().map_err(|_| DataError::Parse {
                    line,
                    message: format!("bad seed '{value}'"),
                })?
            }
            "max_iter" => {
                max_iter = value.parse().map_err(|_| DataError::Parse {
                    line,
                    message: format!("bad max_iter '{value}'"),
                })?
            }
            "kkt_tol" => kkt_tol = parse_field(value, line)?,
            "x0" => x0_true = Some(DVector::from_vec(parse_float_list(value, line)?)),
            "p_true" => p_true = Some(DVector::from_vec(parse_float_list(value, line)?)),
            other => {
                return Err(DataError::Parse {
                    line,
                    message: format!("unknown key '{other}'"),
                })
            }
        }
    }

    let missing = |what: &str| DataError::Invalid(format!("config is missing '{what}'"));
    Ok(EstimationConfig {
        model: model.ok_or_else(|| missing("model"))?,
        nodes: nodes.ok_or_else(|| missing("nodes"))?,
        steps_per_interval: steps_per_interval.ok_or_else(|| missing("steps_per_interval"))?,
        p0: p0.ok_or_else(|| missing("p0"))?,
        noise_sigma: sigma,
        seed,
        max_iter,
        kkt_tol,
        x0_true,
        p_true,
    })
}

pub fn read_config(path: &Path) -> Result<EstimationConfig, DataError> {
    parse_config(&fs::read_to_string(path)?)
}

/// Writes one estimation result into `dir`:
/// `summary.txt` (human-readable), `history.csv` (per-iteration objective,
/// constraint norm, KKT residual, merit, step), and `solution.csv`
/// (name,value rows for the estimated parameters and node states).
pub fn write_result(dir: &Path, result: &EstimationResult) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;

    let mut summary = String::new();
    summary.push_str(&format!("converged = {}\n", result.converged));
    summary.push_str(&format!("iterations = {}\n", result.iterations));
    summary.push_str(&format!("kkt_residual = {}\n", fmt_float(result.kkt_residual)));
    summary.push_str(&format!(
        "final_objective = {}\n",
        fmt_float(result.final_objective)
    ));
    summary.push_str(&format!(
        "final_constraint_norm = {}\n",
        fmt_float(result.final_constraint_norm)
    ));
    let p_list = result
        .p_hat
        .iter()
        .map(|v| fmt_float(*v))
        .collect::<Vec<_>>()
        .join(",");
    summary.push_str(&format!("p_hat = {p_list}\n"));
    summary.push_str(&format!(
        "constraint_value_evals = {}\n",
        result.counters.constraint_value_evals
    ));
    summary.push_str(&format!(
        "constraint_gradient_evals = {}\n",
        result.counters.constraint_gradient_evals
    ));
    summary.push_str(&format!(
        "forward_dims_integrated = {}\n",
        result.counters.forward_dims_integrated
    ));
    summary.push_str(&format!(
        "adjoint_dims_integrated = {}\n",
        result.counters.adjoint_dims_integrated
    ));
    fs::write(dir.join("summary.txt"), summary)?;

    let mut history = String::from(
        "iteration,objective,constraint_norm,kkt_residual,penalty,merit_before,merit_after,alpha\n",
    );
    for rec in &result.history {
        history.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            rec.iteration,
            fmt_float(rec.objective),
            fmt_float(rec.constraint_norm),
            fmt_float(rec.kkt_residual),
            fmt_float(rec.penalty),
            fmt_float(rec.merit_before),
            fmt_float(rec.merit_after),
            fmt_float(rec.alpha),
        ));
    }
    fs::write(dir.join("history.csv"), history)?;

    let mut solution = String::from("name,value\n");
    for (i, v) in result.p_hat.iter().enumerate() {
        solution.push_str(&format!("p{},{}\n", i + 1, fmt_float(*v)));
    }
    for (j, s) in result.s_hat.iter().enumerate() {
        for (i, v) in s.iter().enumerate() {
            solution.push_str(&format!("s{}_{},{}\n", j, i + 1, fmt_float(*v)));
        }
    }
    fs::write(dir.join("solution.csv"), solution)?;
    Ok(())
}

/// Dumps subinterval trajectories as CSV rows `(interval, t, x1, ..., xd)`,
/// one block per interval, ready for plotting.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), DataError> {
    let mut file = fs::File::create(path)?;
    let d = trajectories.first().map_or(0, |t| t.dim());
    let mut header = String::from("interval,t");
    for i in 0..d {
        header.push_str(&format!(",x{}", i + 1));
    }
    header.push('\n');
    file.write_all(header.as_bytes())?;
    for (j, traj) in trajectories.iter().enumerate() {
        for k in 0..=traj.step_count() {
            let mut row = format!("{},{}", j, fmt_float(traj.node_time(k)));
            for v in traj.state(k).iter() {
                row.push(',');
                row.push_str(&fmt_float(*v));
            }
            row.push('\n');
            file.write_all(row.as_bytes())?;
        }
    }
    Ok(())
}
