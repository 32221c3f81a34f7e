//! Forward integration of fitted models with divergence and stall guards.
//!
//! Dormand–Prince 5(4) adaptive stepping with 4th-order dense output sampled
//! at the requested grid. Every failure mode is encoded in the rollout
//! outcome — divergence, stiffness and timeouts are results, not errors, and
//! score as a dominating penalty.

use crate::regress::{nrmse, FittedModel, RegressError, Trajectory};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutOutcome {
    Completed,
    Diverged,
    Timeout,
    StiffnessFailure,
}

/// Integration settings. `blow_up` is an absolute state-magnitude bound when
/// calling [`integrate`] directly; [`score_rollout`] rescales it by
/// `max(1, training range)` so large-amplitude systems are not misclassified.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub rtol: f64,
    pub atol: f64,
    pub blow_up: f64,
    /// Wall-clock budget per rollout, seconds.
    pub timeout: f64,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rtol: 1e-6,
            atol: 1e-8,
            blow_up: 1e6,
            timeout: 10.0,
            max_steps: 1_000_000,
        }
    }
}

/// Exogenous input signal sampled on a time grid, interpolated with zero-order
/// hold: `u(t)` is the row at the largest sample time `<= t`.
#[derive(Debug, Clone)]
pub struct InputSignal {
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl InputSignal {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Self {
        assert_eq!(times.len(), values.nrows());
        InputSignal { times, values }
    }

    pub fn from_trajectory(traj: &Trajectory) -> Option<Self> {
        traj.inputs()
            .map(|u| InputSignal::new(traj.times().to_vec(), u.clone()))
    }

    pub fn sample_into(&self, t: f64, out: &mut [f64]) {
        let idx = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        for (c, v) in out.iter_mut().enumerate() {
            *v = self.values[(idx, c)];
        }
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// Rollout result: the outcome, simulated states on the requested grid when
/// completed, per-state NRMSE and their maximum (`+inf` unless completed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutResult {
    pub outcome: RolloutOutcome,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub states: Option<Vec<Vec<f64>>>,
    #[serde(with = "crate::num_serde::inf_f64_vec")]
    pub nrmse: Vec<f64>,
    #[serde(with = "crate::num_serde::inf_f64")]
    pub max_nrmse: f64,
}

impl RolloutResult {
    fn failed(outcome: RolloutOutcome, dim: usize) -> Self {
        RolloutResult {
            outcome,
            states: None,
            nrmse: vec![f64::INFINITY; dim],
            max_nrmse: f64::INFINITY,
        }
    }

    pub fn completed(&self) -> bool {
        self.outcome == RolloutOutcome::Completed
    }

    pub fn states_matrix(&self) -> Option<DMatrix<f64>> {
        self.states.as_ref().map(|rows| {
            let n = rows.len();
            let d = rows.first().map_or(0, Vec::len);
            DMatrix::from_fn(n, d, |r, c| rows[r][c])
        })
    }
}

/// Integrate a fitted model from `x0` and sample the solution at `grid`
/// (strictly increasing; `grid[0]` is the initial time). States-only result:
/// NRMSE fields are zero-length and filled by [`score_rollout`].
pub fn integrate(
    model: &FittedModel,
    x0: &[f64],
    grid: &[f64],
    inputs: Option<&InputSignal>,
    cfg: &SimConfig,
) -> RolloutResult {
    let d = model.dim();
    let u_width = inputs.map_or(0, InputSignal::width);
    let mut u_buf = vec![0.0; u_width];
    let rhs = |t: f64, x: &[f64], dx: &mut [f64]| {
        if let Some(sig) = inputs {
            sig.sample_into(t, &mut u_buf);
        }
        model.derivative(x, &u_buf, t, dx);
    };
    integrate_rhs(rhs, x0, grid, cfg, d)
}

/// Core adaptive integrator over an arbitrary right-hand side. The RHS uses
/// IEEE semantics; non-finite derivatives or states beyond the blow-up bound
/// end the rollout as `Diverged`.
pub fn integrate_rhs(
    mut rhs: impl FnMut(f64, &[f64], &mut [f64]),
    x0: &[f64],
    grid: &[f64],
    cfg: &SimConfig,
    dim: usize,
) -> RolloutResult {
    assert!(!grid.is_empty(), "empty sample grid");
    assert!(
        grid.windows(2).all(|w| w[1] > w[0]),
        "grid must be strictly increasing"
    );
    assert_eq!(x0.len(), dim);

    let started = Instant::now();
    let t_end = *grid.last().unwrap();
    let span = t_end - grid[0];
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    out.push(x0.to_vec());
    if grid.len() == 1 {
        return RolloutResult {
            outcome: RolloutOutcome::Completed,
            states: Some(out),
            nrmse: Vec::new(),
            max_nrmse: f64::INFINITY,
        };
    }

    let mut t = grid[0];
    let mut y = x0.to_vec();
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; dim]);
    let mut y_stage = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut next_sample = 1;

    rhs(t, &y, &mut k[0]);
    if !k[0].iter().all(|v| v.is_finite()) {
        return RolloutResult::failed(RolloutOutcome::Diverged, dim);
    }

    let mut h = (span * 1e-3).min(span);
    let h_floor = 1e-14 * span;

    for step in 0..cfg.max_steps {
        if step % 64 == 0 && started.elapsed().as_secs_f64() > cfg.timeout {
            return RolloutResult::failed(RolloutOutcome::Timeout, dim);
        }
        if h < h_floor {
            return RolloutResult::failed(RolloutOutcome::StiffnessFailure, dim);
        }
        if t + h > t_end {
            h = t_end - t;
        }

        // stages 2..7 (k[0] is FSAL from the previous step)
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    let a = A[s - 1][j];
                    if a != 0.0 {
                        acc += a * kj[i];
                    }
                }
                y_stage[i] = y[i] + h * acc;
            }
            let (ks_pre, ks_post) = k.split_at_mut(s);
            let _ = ks_pre;
            rhs(t + C[s] * h, &y_stage, &mut ks_post[0]);
        }

        // 5th-order solution (row 7 of the tableau equals B, FSAL)
        let mut finite = true;
        for i in 0..dim {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if B[j] != 0.0 {
                    acc += B[j] * kj[i];
                }
            }
            y_new[i] = y[i] + h * acc;
            finite &= y_new[i].is_finite();
        }
        if !finite {
            // shrink first in case the step simply overshot
            h *= 0.25;
            if h < h_floor {
                return RolloutResult::failed(RolloutOutcome::Diverged, dim);
            }
            continue;
        }

        // weighted RMS error norm from the embedded 4th-order difference
        let mut err_sq = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if E[j] != 0.0 {
                    e += E[j] * kj[i];
                }
            }
            e *= h;
            let scale = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / scale).powi(2);
        }
        let err = (err_sq / dim as f64).sqrt();

        if err <= 1.0 {
            // accept; FSAL derivative at the new point
            let (k_head, k_tail) = k.split_at_mut(6);
            rhs(t + h, &y_new, &mut k_tail[0]);
            let _ = k_head;
            if !k[6].iter().all(|v| v.is_finite()) {
                return RolloutResult::failed(RolloutOutcome::Diverged, dim);
            }

            if y_new.iter().any(|v| v.abs() > cfg.blow_up) {
                return RolloutResult::failed(RolloutOutcome::Diverged, dim);
            }

            // dense output over (t, t+h]
            while next_sample < grid.len() && grid[next_sample] <= t + h + 1e-14 * span {
                let ts = grid[next_sample].min(t + h);
                let theta = ((ts - t) / h).clamp(0.0, 1.0);
                let mut row = vec![0.0; dim];
                for i in 0..dim {
                    let ydiff = y_new[i] - y[i];
                    let bspl = h * k[0][i] - ydiff;
                    let c0 = y[i];
                    let c1 = ydiff;
                    let c2 = bspl;
                    let c3 = ydiff - h * k[6][i] - bspl;
                    let mut c4 = 0.0;
                    for (j, kj) in k.iter().enumerate() {
                        if D[j] != 0.0 {
                            c4 += D[j] * kj[i];
                        }
                    }
                    c4 *= h;
                    row[i] =
                        c0 + theta * (c1 + (1.0 - theta) * (c2 + theta * (c3 + (1.0 - theta) * c4)));
                }
                if !row.iter().all(|v| v.is_finite()) {
                    return RolloutResult::failed(RolloutOutcome::Diverged, dim);
                }
                out.push(row);
                next_sample += 1;
            }

            t += h;
            y.copy_from_slice(&y_new);
            let (k_dst, k_src) = k.split_at_mut(6);
            k_dst[0].copy_from_slice(&k_src[0]);

            if next_sample >= grid.len() || t >= t_end {
                return RolloutResult {
                    outcome: RolloutOutcome::Completed,
                    states: Some(out),
                    nrmse: Vec::new(),
                    max_nrmse: f64::INFINITY,
                };
            }
        }

        // PI-free standard step-size controller
        let scale = if err == 0.0 {
            10.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
        };
        h *= scale;
    }
    RolloutResult::failed(RolloutOutcome::StiffnessFailure, dim)
}

/// Simulate the fitted model over the trajectory's test segment, starting
/// from the first test-segment state, and fill per-state NRMSE against the
/// held-out ground truth. Non-completed rollouts score `+inf` everywhere.
pub fn score_rollout(model: &FittedModel, traj: &Trajectory, cfg: &SimConfig) -> RolloutResult {
    let test_times = traj.test_times();
    assert!(
        test_times.len() >= 5,
        "test segment must have at least 5 samples"
    );
    let run_cfg = SimConfig {
        blow_up: cfg.blow_up * traj.train_range().max(1.0),
        ..cfg.clone()
    };
    let x0: Vec<f64> = (0..traj.dim())
        .map(|c| traj.states()[(traj.split_index(), c)])
        .collect();
    let signal = InputSignal::from_trajectory(traj);
    let mut result = integrate(model, &x0, test_times, signal.as_ref(), &run_cfg);
    if !result.completed() {
        result.nrmse = vec![f64::INFINITY; traj.dim()];
        result.max_nrmse = f64::INFINITY;
        return result;
    }
    let sim = result.states.as_ref().unwrap();
    let truth = traj.test_states();
    let mut per_state = Vec::with_capacity(traj.dim());
    for c in 0..traj.dim() {
        let predicted: Vec<f64> = sim.iter().map(|row| row[c]).collect();
        let actual: Vec<f64> = (0..truth.nrows()).map(|r| truth[(r, c)]).collect();
        let v = match nrmse(&predicted, &actual) {
            Ok(v) => v,
            // a constant ground-truth channel cannot be range-normalized;
            // score it by whether the rollout tracks it
            Err(RegressError::DegenerateRange) => {
                let worst = predicted
                    .iter()
                    .zip(&actual)
                    .map(|(p, a)| (p - a).abs())
                    .fold(0.0, f64::max);
                if worst < 1e-9 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        };
        per_state.push(v);
    }
    result.max_nrmse = per_state.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    result.nrmse = per_state;
    result
}

// Dormand–Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];

// 5th-order minus embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// Dense-output coefficients.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];
