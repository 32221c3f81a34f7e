//! Derivative estimation, sparse coefficient fitting (STLSQ) and fit metrics.

use crate::grammar::{evaluate_features, EquationTemplate, EvalError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

/// Condition-number estimate above which a least-squares subproblem is
/// flagged ill-conditioned (flagged, not failed).
pub const ILL_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("all terms thresholded away")]
    EmptyActiveSet,
    #[error("degenerate variance: actual series is constant")]
    DegenerateVariance,
    #[error("degenerate range: actual series is constant")]
    DegenerateRange,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("trajectory i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory format: {0}")]
    Format(String),
}

/// Sampled multivariate trajectory with a train/test boundary. Rows before
/// `split_index` are the training segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: DMatrix<f64>,
    inputs: Option<DMatrix<f64>>,
    split_index: usize,
}

/// Sidecar metadata carried next to the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrajectoryMeta {
    pub split_index: usize,
    pub state_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub units: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(
        times: Vec<f64>,
        states: DMatrix<f64>,
        inputs: Option<DMatrix<f64>>,
        split_index: usize,
    ) -> Result<Self, RegressError> {
        let n = times.len();
        if n < 10 {
            return Err(RegressError::InvalidTrajectory(format!(
                "{n} samples; need at least 10"
            )));
        }
        if states.nrows() != n {
            return Err(RegressError::InvalidTrajectory(format!(
                "{} state rows vs {n} samples",
                states.nrows()
            )));
        }
        if let Some(u) = &inputs {
            if u.nrows() != n {
                return Err(RegressError::InvalidTrajectory(format!(
                    "{} input rows vs {n} samples",
                    u.nrows()
                )));
            }
            if !u.iter().all(|v| v.is_finite()) {
                return Err(RegressError::InvalidTrajectory(
                    "non-finite input entry".into(),
                ));
            }
        }
        if !times.iter().all(|v| v.is_finite()) || !states.iter().all(|v| v.is_finite()) {
            return Err(RegressError::InvalidTrajectory(
                "non-finite entry in times or states".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(RegressError::InvalidTrajectory(
                "times must be strictly increasing".into(),
            ));
        }
        if split_index == 0 || split_index >= n {
            return Err(RegressError::InvalidTrajectory(format!(
                "split index {split_index} outside (0, {n})"
            )));
        }
        Ok(Trajectory {
            times,
            states,
            inputs,
            split_index,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn inputs(&self) -> Option<&DMatrix<f64>> {
        self.inputs.as_ref()
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.as_ref().map_or(0, DMatrix::ncols)
    }

    pub fn train_times(&self) -> &[f64] {
        &self.times[..self.split_index]
    }

    pub fn test_times(&self) -> &[f64] {
        &self.times[self.split_index..]
    }

    pub fn train_states(&self) -> DMatrix<f64> {
        self.states.rows(0, self.split_index).into_owned()
    }

    pub fn test_states(&self) -> DMatrix<f64> {
        self.states
            .rows(self.split_index, self.len() - self.split_index)
            .into_owned()
    }

    pub fn train_inputs(&self) -> Option<DMatrix<f64>> {
        self.inputs
            .as_ref()
            .map(|u| u.rows(0, self.split_index).into_owned())
    }

    /// Largest per-state value range on the training segment; used to scale
    /// rollout blow-up bounds.
    pub fn train_range(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..self.dim() {
            let col = self.states.view((0, c), (self.split_index, 1));
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in col.iter() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            worst = worst.max(hi - lo);
        }
        worst
    }

    /// Write `<path>` as CSV (`t,x0,..[,u0,..]`) and `<path>.meta.json`.
    /// Values round-trip bit-exactly through the shortest f64 decimal form.
    pub fn write_csv(&self, path: &Path, meta: &TrajectoryMeta) -> Result<(), RegressError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|i| format!("x{i}")));
        header.extend((0..self.input_dim()).map(|j| format!("u{j}")));
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.len() {
            let mut row = vec![format!("{}", self.times[r])];
            for c in 0..self.dim() {
                row.push(format!("{}", self.states[(r, c)]));
            }
            if let Some(u) = &self.inputs {
                for c in 0..u.ncols() {
                    row.push(format!("{}", u[(r, c)]));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        let meta = TrajectoryMeta {
            split_index: self.split_index,
            ..meta.clone()
        };
        let meta_path = meta_path(path);
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<(Self, TrajectoryMeta), RegressError> {
        let meta_raw = std::fs::read_to_string(meta_path(path))?;
        let meta: TrajectoryMeta = serde_json::from_str(&meta_raw)
            .map_err(|e| RegressError::Format(format!("metadata: {e}")))?;
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header = lines
            .next()
            .ok_or_else(|| RegressError::Format("empty file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"t") {
            return Err(RegressError::Format(format!(
                "header must start with `t`, got `{header}`"
            )));
        }
        let d = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        if 1 + d + m != cols.len() {
            return Err(RegressError::Format(format!("unrecognized header `{header}`")));
        }
        let mut times = Vec::new();
        let mut flat: Vec<f64> = Vec::new();
        let mut flat_u: Vec<f64> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(RegressError::Format(format!(
                    "row has {} fields, header has {}",
                    fields.len(),
                    cols.len()
                )));
            }
            let parse = |s: &str| -> Result<f64, RegressError> {
                s.parse()
                    .map_err(|_| RegressError::Format(format!("bad number `{s}`")))
            };
            times.push(parse(fields[0])?);
            for f in &fields[1..=d] {
                flat.push(parse(f)?);
            }
            for f in &fields[1 + d..] {
                flat_u.push(parse(f)?);
            }
        }
        let n = times.len();
        let states = DMatrix::from_row_slice(n, d, &flat);
        let inputs = if m > 0 {
            Some(DMatrix::from_row_slice(n, m, &flat_u))
        } else {
            None
        };
        let traj = Trajectory::new(times, states, inputs, meta.split_index)?;
        Ok((traj, meta))
    }
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

impl From<serde_json::Error> for RegressError {
    fn from(e: serde_json::Error) -> Self {
        RegressError::Format(e.to_string())
    }
}

/// Three-point derivative estimates: second-order central differences on the
/// interior, one-sided second-order at the endpoints. The nonuniform-grid
/// weights come from the local quadratic through the three nearest samples,
/// so quadratics differentiate exactly.
pub fn estimate_derivatives(traj: &Trajectory) -> DMatrix<f64> {
    derivatives_of(traj.times(), traj.states())
}

pub(crate) fn derivatives_of(times: &[f64], states: &DMatrix<f64>) -> DMatrix<f64> {
    let n = times.len();
    let d = states.ncols();
    let mut out = DMatrix::zeros(n, d);
    for c in 0..d {
        for r in 0..n {
            let (i0, i1, i2) = if r == 0 {
                (0, 1, 2)
            } else if r == n - 1 {
                (n - 3, n - 2, n - 1)
            } else {
                (r - 1, r, r + 1)
            };
            let (t0, t1, t2) = (times[i0], times[i1], times[i2]);
            let (y0, y1, y2) = (states[(i0, c)], states[(i1, c)], states[(i2, c)]);
            let h1 = t1 - t0;
            let h2 = t2 - t1;
            let t = times[r];
            // derivative of the Lagrange quadratic through (t0,y0),(t1,y1),(t2,y2)
            let w0 = (2.0 * t - t1 - t2) / (h1 * (h1 + h2));
            let w1 = (2.0 * t - t0 - t2) / (-h1 * h2);
            let w2 = (2.0 * t - t0 - t1) / (h2 * (h1 + h2));
            out[(r, c)] = w0 * y0 + w1 * y1 + w2 * y2;
        }
    }
    out
}

/// Result of one sparse fit: coefficients (inactive entries exactly zero) and
/// an ill-conditioning warning flag.
#[derive(Debug, Clone)]
pub struct StlsqResult {
    pub coefficients: DVector<f64>,
    pub ill_conditioned: bool,
}

/// Sequential thresholded least squares: alternate a least-squares fit on the
/// active columns with hard-thresholding of small coefficients until the
/// active set is stable or `max_sweeps` is reached. Subproblems are solved by
/// SVD; rank-deficient systems get the minimum-norm solution and raise the
/// ill-conditioning flag rather than failing.
pub fn stlsq(
    features: &DMatrix<f64>,
    targets: &DVector<f64>,
    threshold: f64,
    max_sweeps: usize,
) -> Result<StlsqResult, RegressError> {
    let n = features.nrows();
    let k = features.ncols();
    assert_eq!(n, targets.len(), "row count mismatch");
    assert!(threshold >= 0.0, "negative threshold");

    let mut active: Vec<bool> = vec![true; k];
    let mut coefficients = DVector::zeros(k);
    let mut ill_conditioned = false;

    for _ in 0..max_sweeps.max(1) {
        let idx: Vec<usize> = (0..k).filter(|&j| active[j]).collect();
        if idx.is_empty() {
            return Err(RegressError::EmptyActiveSet);
        }
        let sub = features.select_columns(&idx);
        let (sol, ill) = min_norm_lstsq(&sub, targets);
        ill_conditioned |= ill;
        coefficients.fill(0.0);
        for (slot, &j) in idx.iter().enumerate() {
            coefficients[j] = sol[slot];
        }
        let mut changed = false;
        for j in &idx {
            if coefficients[*j].abs() < threshold {
                active[*j] = false;
                coefficients[*j] = 0.0;
                changed = true;
            }
        }
        if !changed {
            return Ok(StlsqResult {
                coefficients,
                ill_conditioned,
            });
        }
    }
    if active.iter().any(|a| *a) {
        Ok(StlsqResult {
            coefficients,
            ill_conditioned,
        })
    } else {
        Err(RegressError::EmptyActiveSet)
    }
}

/// Minimum-norm least squares via SVD with a relative singular-value cutoff.
/// Returns the solution and whether the system was ill-conditioned
/// (condition estimate above [`ILL_CONDITION_LIMIT`] or rank-deficient).
fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let k = a.ncols();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return (DVector::zeros(k), true);
    }
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let ill = smin <= 0.0 || smax / smin > ILL_CONDITION_LIMIT;
    let cutoff = smax * f64::EPSILON * a.nrows().max(k) as f64;
    let sol = svd.solve(b, cutoff).expect("svd solve");
    (sol, ill)
}

/// Fitted model: template plus one coefficient per feature slot, with
/// per-state training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub template: EquationTemplate,
    /// `coefficients[i][k]` multiplies feature `k` of state `i`.
    pub coefficients: Vec<Vec<f64>>,
    pub diagnostics: Vec<FitDiagnostics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// R² of the derivative fit on the training segment; `None` when the
    /// derivative target is constant.
    pub train_r2: Option<f64>,
    pub residual_norm: f64,
    pub ill_conditioned: bool,
    /// True when thresholding removed every term and the equation was
    /// retained as the zero equation.
    pub empty_active_set: bool,
}

impl FittedModel {
    /// Derivative field of the fitted system at one point.
    pub fn derivative(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        for (i, features) in self.template.equations().iter().enumerate() {
            let mut acc = 0.0;
            for (k, f) in features.iter().enumerate() {
                let c = self.coefficients[i][k];
                if c != 0.0 {
                    acc += c * f.eval_raw(x, u, t);
                }
            }
            out[i] = acc;
        }
    }

    pub fn dim(&self) -> usize {
        self.template.dim()
    }

    /// Human-readable equations, e.g. `d x0/dt = 0.998*x1`.
    pub fn render_equations(&self) -> Vec<String> {
        self.template
            .equations()
            .iter()
            .enumerate()
            .map(|(i, features)| {
                let terms: Vec<String> = features
                    .iter()
                    .zip(&self.coefficients[i])
                    .filter(|(_, c)| **c != 0.0)
                    .map(|(f, c)| format!("{c:.6}*{f}"))
                    .collect();
                let rhs = if terms.is_empty() {
                    "0".to_string()
                } else {
                    terms.join(" + ")
                };
                format!("d x{i}/dt = {rhs}")
            })
            .collect()
    }
}

/// Fit template coefficients on the training segment: feature matrices from
/// [`evaluate_features`], derivative targets from [`estimate_derivatives`],
/// one STLSQ per state. An equation whose terms are all thresholded away is
/// retained as `dx_i/dt = 0`.
pub fn fit_model(
    template: &EquationTemplate,
    traj: &Trajectory,
    threshold: f64,
) -> Result<FittedModel, RegressError> {
    fit_model_sweeps(template, traj, threshold, 10)
}

pub fn fit_model_sweeps(
    template: &EquationTemplate,
    traj: &Trajectory,
    threshold: f64,
    max_sweeps: usize,
) -> Result<FittedModel, RegressError> {
    let split = traj.split_index();
    let train_states = traj.train_states();
    let train_inputs = traj.train_inputs();
    let feature_mats = evaluate_features(
        template,
        &train_states,
        train_inputs.as_ref(),
        traj.train_times(),
    )?;
    let derivs = estimate_derivatives(traj);

    let mut coefficients = Vec::with_capacity(template.dim());
    let mut diagnostics = Vec::with_capacity(template.dim());
    for (i, features) in feature_mats.iter().enumerate() {
        let target = DVector::from_iterator(split, (0..split).map(|r| derivs[(r, i)]));
        let (coefs, ill, empty) = match stlsq(features, &target, threshold, max_sweeps) {
            Ok(res) => (res.coefficients, res.ill_conditioned, false),
            Err(RegressError::EmptyActiveSet) => {
                (DVector::zeros(features.ncols()), false, true)
            }
            Err(e) => return Err(e),
        };
        let predicted = features * &coefs;
        let residual_norm = (&predicted - &target).norm();
        let train_r2 = r_squared(predicted.as_slice(), target.as_slice()).ok();
        coefficients.push(coefs.iter().cloned().collect());
        diagnostics.push(FitDiagnostics {
            train_r2,
            residual_norm,
            ill_conditioned: ill,
            empty_active_set: empty,
        });
    }
    Ok(FittedModel {
        template: template.clone(),
        coefficients,
        diagnostics,
    })
}

/// Coefficient of determination, `1 - SS_res/SS_tot`.
pub fn r_squared(predicted: &[f64], actual: &[f64]) -> Result<f64, RegressError> {
    assert_eq!(predicted.len(), actual.len());
    assert!(actual.len() >= 2, "need at least two samples");
    let (lo, hi) = min_max(actual);
    if lo == hi {
        return Err(RegressError::DegenerateVariance);
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    let ss_res: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Root-mean-square error normalized by the actual series' range. Non-finite
/// predictions yield `+inf` (the dominating-penalty convention).
pub fn nrmse(predicted: &[f64], actual: &[f64]) -> Result<f64, RegressError> {
    assert_eq!(predicted.len(), actual.len());
    let (lo, hi) = min_max(actual);
    if lo == hi {
        return Err(RegressError::DegenerateRange);
    }
    if predicted.iter().any(|v| !v.is_finite()) {
        return Ok(f64::INFINITY);
    }
    let mse: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).powi(2))
        .sum::<f64>()
        / actual.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

fn min_max(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_expression;

    fn uniform_traj(
        f: impl Fn(f64) -> Vec<f64>,
        t0: f64,
        t1: f64,
        n: usize,
        split: f64,
    ) -> Trajectory {
        let times: Vec<f64> = (0..n)
            .map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64)
            .collect();
        let d = f(t0).len();
        let states = DMatrix::from_fn(n, d, |r, c| f(times[r])[c]);
        Trajectory::new(times, states, None, (split * n as f64).floor() as usize).unwrap()
    }

    #[test]
    fn derivatives_exact_for_quadratics() {
        let traj = uniform_traj(|t| vec![t * t], 0.0, 2.0, 21, 0.7);
        let d = estimate_derivatives(&traj);
        // interior point at t = 1.0 (index 10)
        assert!((d[(10, 0)] - 2.0).abs() < 1e-9);
        // second-order one-sided endpoints are exact for quadratics too
        assert!((d[(0, 0)] - 0.0).abs() < 1e-9);
        assert!((d[(20, 0)] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn derivatives_match_analytic_sine() {
        let n = 401; // dt = 0.01 over [0, 4]
        let traj = uniform_traj(|t| vec![t.sin()], 0.0, 4.0, n, 0.7);
        let d = estimate_derivatives(&traj);
        assert!((d[(0, 0)] - 1.0).abs() < 1e-4);
        for r in 0..n {
            let t = traj.times()[r];
            assert!((d[(r, 0)] - t.cos()).abs() < 1e-3);
        }
    }

    #[test]
    fn derivatives_of_constant_are_zero() {
        let traj = uniform_traj(|_| vec![3.5, -1.0], 0.0, 1.0, 11, 0.5);
        let d = estimate_derivatives(&traj);
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn derivatives_on_nonuniform_grid_exact_for_quadratics() {
        let times: Vec<f64> = (0..20).map(|i| (i as f64 * 0.13).powf(1.3)).collect();
        let mut times = times;
        times[0] = -0.01; // keep strictly increasing from a distinct start
        let states = DMatrix::from_fn(20, 1, |r, _| {
            let t = times[r];
            3.0 * t * t - 2.0 * t + 1.0
        });
        let traj = Trajectory::new(times.clone(), states, None, 10).unwrap();
        let d = estimate_derivatives(&traj);
        for r in 0..20 {
            let t = times[r];
            assert!((d[(r, 0)] - (6.0 * t - 2.0)).abs() < 1e-8, "row {r}");
        }
    }

    #[test]
    fn stlsq_recovers_sparse_support() {
        // targets = 3x + 0*x^2 + tiny noise; oracle (exhaustive least squares
        // over the 3 nonempty supports, min BIC) picks {x} — frozen here
        let n = 100;
        let x: Vec<f64> = (1..=n).map(|i| i as f64 / 10.0).collect();
        let features = DMatrix::from_fn(n, 2, |r, c| if c == 0 { x[r] } else { x[r] * x[r] });
        let mut rng_state = 42u64;
        let mut noise = || {
            // xorshift; deterministic tiny noise
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            ((rng_state % 1000) as f64 / 1000.0 - 0.5) * 2e-6
        };
        let targets = DVector::from_fn(n, |r, _| 3.0 * x[r] + noise());
        let res = stlsq(&features, &targets, 0.1, 10).unwrap();
        assert!((res.coefficients[0] - 3.0).abs() < 1e-3);
        assert_eq!(res.coefficients[1], 0.0);
    }

    #[test]
    fn stlsq_zero_targets_empty_active_set() {
        let features = DMatrix::from_fn(20, 2, |r, c| (r + c + 1) as f64);
        let targets = DVector::zeros(20);
        assert!(matches!(
            stlsq(&features, &targets, 0.1, 10),
            Err(RegressError::EmptyActiveSet)
        ));
    }

    #[test]
    fn stlsq_threshold_zero_is_plain_least_squares() {
        let n = 50;
        let features = DMatrix::from_fn(n, 3, |r, c| ((r + 1) as f64).powi(c as i32 + 1) / 50.0);
        let targets = DVector::from_fn(n, |r, _| {
            let t = (r + 1) as f64 / 50.0;
            0.001 * t + 2.0 * t * t
        });
        let res = stlsq(&features, &targets, 0.0, 10).unwrap();
        let (ls, _) = min_norm_lstsq(&features, &targets);
        assert!((res.coefficients - ls).norm() < 1e-10);
    }

    #[test]
    fn stlsq_active_set_never_grows() {
        // support monotonicity: run sweep-by-sweep manually
        let n = 60;
        let features = DMatrix::from_fn(n, 4, |r, c| ((r as f64) * 0.1).powi(c as i32));
        let targets = DVector::from_fn(n, |r, _| 0.04 * ((r as f64) * 0.1) + 1.5);
        let res = stlsq(&features, &targets, 0.05, 10).unwrap();
        let support: Vec<usize> = (0..4).filter(|&j| res.coefficients[j] != 0.0).collect();
        let res1 = stlsq(&features, &targets, 0.05, 1).unwrap();
        let support1: Vec<usize> = (0..4).filter(|&j| res1.coefficients[j] != 0.0).collect();
        // the converged support is a subset of the one-sweep support
        assert!(support.iter().all(|j| support1.contains(j)));
    }

    #[test]
    fn fit_model_recovers_oscillator_coefficients() {
        // data from dx0 = x1, dx1 = -2.1 x0
        let omega = 2.1f64.sqrt();
        let traj = uniform_traj(
            |t| vec![0.5 * (omega * t).cos(), -0.5 * omega * (omega * t).sin()],
            0.0,
            12.0,
            600,
            0.7,
        );
        let template = EquationTemplate::new(
            2,
            0,
            vec![
                vec![parse_expression("x1").unwrap()],
                vec![parse_expression("x0").unwrap()],
            ],
        )
        .unwrap();
        let model = fit_model(&template, &traj, 0.05).unwrap();
        assert!((model.coefficients[0][0] - 1.0).abs() < 0.01);
        assert!((model.coefficients[1][0] + 2.1).abs() < 0.021);
        for d in &model.diagnostics {
            assert!(d.train_r2.unwrap() > 0.999);
        }
    }

    #[test]
    fn fit_model_on_constant_trajectory_is_all_zero() {
        let traj = uniform_traj(|_| vec![1.0, 2.0], 0.0, 1.0, 20, 0.5);
        let template = EquationTemplate::new(
            2,
            0,
            vec![
                vec![parse_expression("x0").unwrap(), parse_expression("x1").unwrap()],
                vec![parse_expression("x0").unwrap()],
            ],
        )
        .unwrap();
        let model = fit_model(&template, &traj, 0.05).unwrap();
        assert!(model.coefficients.iter().flatten().all(|c| *c == 0.0));
        assert!(model.diagnostics.iter().all(|d| d.empty_active_set));
    }

    #[test]
    fn r_squared_basics() {
        let actual = [1.0, 2.0, 3.0, 4.0];
        assert!((r_squared(&actual, &actual).unwrap() - 1.0).abs() < 1e-15);
        let mean = [2.5; 4];
        assert!(r_squared(&mean, &actual).unwrap().abs() < 1e-15);
        // wildly divergent predictions go strongly negative
        let bad = [100.0, -50.0, 80.0, -120.0];
        assert!(r_squared(&bad, &actual).unwrap() < -100.0);
        assert!(matches!(
            r_squared(&actual, &[5.0; 4]),
            Err(RegressError::DegenerateVariance)
        ));
    }

    #[test]
    fn nrmse_hand_arithmetic() {
        assert_eq!(nrmse(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = nrmse(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(
            nrmse(&[f64::NAN, 0.0], &[0.0, 1.0]).unwrap(),
            f64::INFINITY
        );
        assert!(matches!(
            nrmse(&[1.0, 2.0], &[3.0, 3.0]),
            Err(RegressError::DegenerateRange)
        ));
    }

    #[test]
    fn nrmse_shift_invariant_and_range_scaling() {
        let actual = [0.0, 0.5, 1.2, 0.8, 0.3];
        let predicted = [0.1, 0.4, 1.3, 0.7, 0.4];
        let base = nrmse(&predicted, &actual).unwrap();
        let shift_a: Vec<f64> = actual.iter().map(|v| v + 10.0).collect();
        let shift_p: Vec<f64> = predicted.iter().map(|v| v + 10.0).collect();
        assert!((nrmse(&shift_p, &shift_a).unwrap() - base).abs() < 1e-12);
        // scaling actual's range by s with absolute errors fixed divides by s
        let scaled_a: Vec<f64> = actual.iter().map(|v| v * 3.0).collect();
        let scaled_p: Vec<f64> = scaled_a
            .iter()
            .zip(predicted.iter().zip(&actual))
            .map(|(sa, (p, a))| sa + (p - a))
            .collect();
        assert!((nrmse(&scaled_p, &scaled_a).unwrap() - base / 3.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_invariants_enforced() {
        let states = DMatrix::zeros(5, 1);
        assert!(Trajectory::new(vec![0.0; 5], states.clone(), None, 2).is_err());
        let times: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let states = DMatrix::zeros(12, 1);
        assert!(Trajectory::new(times.clone(), states.clone(), None, 0).is_err());
        assert!(Trajectory::new(times.clone(), states.clone(), None, 12).is_err());
        let mut bad_times = times.clone();
        bad_times[5] = bad_times[4];
        assert!(Trajectory::new(bad_times, states.clone(), None, 6).is_err());
        assert!(Trajectory::new(times, states, None, 6).is_ok());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let times: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 + 0.05).collect();
        let states = DMatrix::from_fn(16, 2, |r, c| {
            (r as f64 * 0.37 + c as f64).sin() * 1.0e-3 + 1.0 / 3.0
        });
        let inputs = DMatrix::from_fn(16, 1, |r, _| (r as f64).cos() / 7.0);
        let traj = Trajectory::new(times, states, Some(inputs), 11).unwrap();
        let meta = TrajectoryMeta {
            split_index: 11,
            state_names: vec!["x0".into(), "x1".into()],
            input_names: vec!["u0".into()],
            units: vec![],
            notes: std::iter::once(("source".to_string(), "test".to_string())).collect(),
        };
        traj.write_csv(&path, &meta).unwrap();
        let (round, meta2) = Trajectory::read_csv(&path).unwrap();
        assert_eq!(traj, round);
        assert_eq!(meta, meta2);
    }
}
