//! Benchmark kit: symbolic system specifications, ground-truth trajectory
//! generation, structural grading of recovered models, the reduced-order
//! reactor generator, and comparison reports.

mod fixtures;
mod march_leuba;
mod report;

pub use fixtures::{builtin_fixtures, write_fixture_dir, Fixture};
pub use march_leuba::{march_leuba_generate, MarchLeubaParams, SetpointSchedule};
pub use report::{emit_report, Report, SystemResult};

use crate::grammar::{
    canonicalize, canonical_signature, parse_truth_expression, BinaryOp, Expr, GrammarError,
    TemplateError,
};
use crate::regress::{FittedModel, RegressError, Trajectory, TrajectoryMeta};
use crate::simulate::{integrate_rhs, InputSignal, RolloutOutcome, SimConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("the ground-truth system diverged on the requested span")]
    TruthDivergence,
    #[error("unstable closed-loop configuration: {0}")]
    UnstableConfiguration(String),
    #[error("spec {0}: {1}")]
    Spec(String, String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Piecewise-constant exogenous input definition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputSpec {
    pub names: Vec<String>,
    /// `(t, values)` steps; the input holds each row until the next step.
    #[serde(default)]
    pub schedule: Vec<(f64, Vec<f64>)>,
}

/// A benchmark system: ground-truth equations in the extended truth grammar
/// (candidates cannot express `tan`/`cot`, truth may), an initial condition,
/// a span and a sample count.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub name: String,
    pub dim: usize,
    pub equations: Vec<Expr>,
    pub x0: Vec<f64>,
    pub t_span: (f64, f64),
    pub n_samples: usize,
    pub input: Option<InputSpec>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSpecDoc {
    name: String,
    dim: usize,
    equations: Vec<String>,
    x0: Vec<f64>,
    t_span: (f64, f64),
    n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<InputSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

impl SystemSpec {
    pub fn from_document(doc: &str) -> Result<Self, BenchError> {
        let parsed: SystemSpecDoc = serde_json::from_str(doc)
            .map_err(|e| BenchError::Spec("<document>".into(), e.to_string()))?;
        let equations = parsed
            .equations
            .iter()
            .map(|s| parse_truth_expression(s))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = SystemSpec {
            name: parsed.name,
            dim: parsed.dim,
            equations,
            x0: parsed.x0,
            t_span: parsed.t_span,
            n_samples: parsed.n_samples,
            input: parsed.input,
            metadata: parsed.metadata,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_document(&self) -> String {
        let doc = SystemSpecDoc {
            name: self.name.clone(),
            dim: self.dim,
            equations: self.equations.iter().map(|e| e.to_string()).collect(),
            x0: self.x0.clone(),
            t_span: self.t_span,
            n_samples: self.n_samples,
            input: self.input.clone(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("spec serialization")
    }

    pub fn read(path: &Path) -> Result<Self, BenchError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_document(&raw).map_err(|e| match e {
            BenchError::Spec(_, msg) => BenchError::Spec(path.display().to_string(), msg),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let err = |msg: String| Err(BenchError::Spec(self.name.clone(), msg));
        if self.dim == 0 || self.equations.len() != self.dim {
            return err(format!(
                "{} equations for dimension {}",
                self.equations.len(),
                self.dim
            ));
        }
        if self.x0.len() != self.dim {
            return err(format!("initial condition has {} entries", self.x0.len()));
        }
        if self.n_samples < 50 {
            return err(format!("{} samples; need at least 50", self.n_samples));
        }
        if !(self.t_span.1 > self.t_span.0) {
            return err("empty time span".into());
        }
        let input_dim = self.input.as_ref().map_or(0, |i| i.names.len());
        let u0: Vec<f64> = match &self.input {
            Some(i) => i
                .schedule
                .first()
                .map(|(_, v)| v.clone())
                .unwrap_or_else(|| vec![0.0; input_dim]),
            None => Vec::new(),
        };
        for (i, eq) in self.equations.iter().enumerate() {
            if let Some(s) = eq.max_state_index() {
                if s >= self.dim {
                    return err(format!("equation {i} references x{s}"));
                }
            }
            if let Some(u) = eq.max_input_index() {
                if u >= input_dim {
                    return err(format!("equation {i} references u{u}"));
                }
            }
            let v = eq.eval_raw(&self.x0, &u0, self.t_span.0);
            if !v.is_finite() {
                return err(format!(
                    "equation {i} does not evaluate finitely at the initial condition"
                ));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input.as_ref().map_or(0, |i| i.names.len())
    }

    fn input_at(&self, t: f64, out: &mut [f64]) {
        if let Some(input) = &self.input {
            out.fill(0.0);
            for (ts, values) in &input.schedule {
                if t >= *ts {
                    out.copy_from_slice(values);
                }
            }
        }
    }

    /// Truth derivative field (IEEE semantics).
    pub fn derivative(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        for (i, eq) in self.equations.iter().enumerate() {
            out[i] = eq.eval_raw(x, u, t);
        }
    }
}

/// Integrate the ground-truth equations on a uniform grid at tightened
/// tolerances (noise-free by construction) and split at `floor(split * n)`.
pub fn generate_trajectory(
    spec: &SystemSpec,
    split: f64,
) -> Result<(Trajectory, TrajectoryMeta), BenchError> {
    assert!(split > 0.0 && split < 1.0, "split must be in (0, 1)");
    spec.validate()?;
    let n = spec.n_samples;
    let grid: Vec<f64> = (0..n)
        .map(|i| {
            spec.t_span.0 + (spec.t_span.1 - spec.t_span.0) * i as f64 / (n - 1) as f64
        })
        .collect();
    let input_dim = spec.input_dim();
    let mut u_buf = vec![0.0; input_dim];
    let cfg = SimConfig {
        rtol: 1e-9,
        atol: 1e-11,
        blow_up: 1e9,
        timeout: 60.0,
        max_steps: 10_000_000,
    };
    let result = integrate_rhs(
        |t, x, dx| {
            spec.input_at(t, &mut u_buf);
            spec.derivative(x, &u_buf, t, dx);
        },
        &spec.x0,
        &grid,
        &cfg,
        spec.dim,
    );
    if result.outcome != RolloutOutcome::Completed {
        return Err(BenchError::TruthDivergence);
    }
    let rows = result.states.unwrap();
    let states = DMatrix::from_fn(n, spec.dim, |r, c| rows[r][c]);
    let inputs = if input_dim > 0 {
        let mut u = DMatrix::zeros(n, input_dim);
        let mut buf = vec![0.0; input_dim];
        for (r, t) in grid.iter().enumerate() {
            spec.input_at(*t, &mut buf);
            for c in 0..input_dim {
                u[(r, c)] = buf[c];
            }
        }
        Some(u)
    } else {
        None
    };
    let split_index = ((split * n as f64).floor() as usize).clamp(1, n - 1);
    let traj = Trajectory::new(grid, states, inputs, split_index)?;
    let meta = TrajectoryMeta {
        split_index,
        state_names: (0..spec.dim).map(|i| format!("x{i}")).collect(),
        input_names: spec
            .input
            .as_ref()
            .map(|i| i.names.clone())
            .unwrap_or_default(),
        units: Vec::new(),
        notes: spec.metadata.clone(),
    };
    Ok((traj, meta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grade {
    Good,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructuralGrade {
    pub grade: Grade,
    pub matched_terms: usize,
    pub truth_terms: usize,
    pub spurious_family: bool,
}

/// Fraction of rollout-variance change above which a non-truth family counts
/// as load-bearing (and the model as structurally wrong).
pub const SPURIOUS_VARIANCE_LIMIT: f64 = 0.10;

/// Split a truth equation into signed terms and strip each term's leading
/// constant, leaving the structural part that a fitted coefficient would
/// absorb.
pub(crate) fn truth_term_structures(eq: &Expr) -> Vec<Expr> {
    let canon = canonicalize(eq);
    let mut terms = Vec::new();
    flatten_add(&canon, &mut terms);
    terms.iter().map(|t| strip_leading_constant(t)).collect()
}

fn flatten_add(e: &Expr, out: &mut Vec<Expr>) {
    match e {
        Expr::Binary(BinaryOp::Add, a, b) => {
            flatten_add(a, out);
            flatten_add(b, out);
        }
        other => out.push(other.clone()),
    }
}

/// Remove the leading constant factor of a canonicalized term; a pure
/// constant becomes the constant feature `1`.
pub(crate) fn strip_leading_constant(term: &Expr) -> Expr {
    let canon = canonicalize(term);
    let mut factors = Vec::new();
    flatten_mul(&canon, &mut factors);
    let rest: Vec<Expr> = factors
        .into_iter()
        .filter(|f| !matches!(f, Expr::Const(_)))
        .collect();
    if rest.is_empty() {
        return Expr::Const(1.0);
    }
    let mut it = rest.into_iter();
    let first = it.next().unwrap();
    canonicalize(&it.fold(first, Expr::mul))
}

fn flatten_mul(e: &Expr, out: &mut Vec<Expr>) {
    match e {
        Expr::Binary(BinaryOp::Mul, a, b) => {
            flatten_mul(a, out);
            flatten_mul(b, out);
        }
        other => out.push(other.clone()),
    }
}

/// Grade structural recovery: canonical-signature matching of model features
/// against the truth terms (ignoring leading coefficients), plus a check that
/// no function family absent from the truth carries more than
/// [`SPURIOUS_VARIANCE_LIMIT`] of the rollout accuracy (measured by zeroing
/// that family's coefficients and re-simulating on the test segment).
pub fn grade_structure(
    model: &FittedModel,
    spec: &SystemSpec,
    traj: &Trajectory,
    sim: &SimConfig,
) -> StructuralGrade {
    use crate::characterize::{feature_family, Family};

    let mut truth_terms = 0usize;
    let mut matched = 0usize;
    let mut truth_families: BTreeSet<Family> = BTreeSet::new();
    for (state, eq) in spec.equations.iter().enumerate() {
        let truth_sigs: Vec<String> = truth_term_structures(eq)
            .iter()
            .map(|t| {
                truth_families.insert(feature_family(t));
                canonical_signature(t).as_str().to_string()
            })
            .collect();
        truth_terms += truth_sigs.len();
        let model_sigs: BTreeSet<String> = model
            .template
            .features(state)
            .iter()
            .map(|f| canonical_signature(&strip_leading_constant(f)).as_str().to_string())
            .collect();
        let truth_set: BTreeSet<String> = truth_sigs.iter().cloned().collect();
        matched += truth_set.intersection(&model_sigs).count();
    }

    // families used by the model but absent from the truth
    let mut model_families: BTreeSet<Family> = BTreeSet::new();
    for (state, features) in model.template.equations().iter().enumerate() {
        for (k, f) in features.iter().enumerate() {
            if model.coefficients[state][k] != 0.0 {
                model_families.insert(feature_family(f));
            }
        }
    }
    let foreign: Vec<Family> = model_families
        .difference(&truth_families)
        .cloned()
        .collect();

    let mut spurious_family = false;
    if !foreign.is_empty() {
        let full = crate::simulate::score_rollout(model, traj, sim);
        for family in foreign {
            let mut zeroed = model.clone();
            for (state, features) in zeroed.template.equations().iter().enumerate() {
                for (k, f) in features.iter().enumerate() {
                    if feature_family(f) == family {
                        zeroed.coefficients[state][k] = 0.0;
                    }
                }
            }
            let without = crate::simulate::score_rollout(&zeroed, traj, sim);
            let change = match (full.max_nrmse.is_finite(), without.max_nrmse.is_finite()) {
                (true, true) => {
                    (without.max_nrmse - full.max_nrmse).abs() / full.max_nrmse.max(1e-12)
                }
                (false, false) => 0.0,
                _ => f64::INFINITY,
            };
            if change > SPURIOUS_VARIANCE_LIMIT {
                spurious_family = true;
                break;
            }
        }
    }

    let needed = truth_terms.div_ceil(2);
    let grade = if matched >= needed && !spurious_family {
        Grade::Good
    } else {
        Grade::Failed
    };
    StructuralGrade {
        grade,
        matched_terms: matched,
        truth_terms,
        spurious_family,
    }
}

/// Convenience: a fitted model whose template and coefficients are the truth
/// itself (used by grading self-checks).
pub fn truth_as_model(spec: &SystemSpec) -> Result<FittedModel, BenchError> {
    use crate::grammar::EquationTemplate;
    let mut features = Vec::with_capacity(spec.dim);
    let mut coefficients = Vec::with_capacity(spec.dim);
    for eq in &spec.equations {
        let canon = canonicalize(eq);
        let mut terms = Vec::new();
        flatten_add(&canon, &mut terms);
        let mut feats = Vec::new();
        let mut coefs = Vec::new();
        for term in &terms {
            let structure = strip_leading_constant(term);
            // leading coefficient = term / structure, evaluated symbolically:
            // the canonical term is (const * rest); recover the constant
            let mut factors = Vec::new();
            flatten_mul(&canonicalize(term), &mut factors);
            let c: f64 = factors
                .iter()
                .filter_map(|f| match f {
                    Expr::Const(v) => Some(*v),
                    _ => None,
                })
                .product();
            feats.push(structure);
            coefs.push(c);
        }
        features.push(feats);
        coefficients.push(coefs);
    }
    let template = EquationTemplate::new(spec.dim, spec.input_dim(), features)?;
    let diagnostics = (0..spec.dim)
        .map(|_| crate::regress::FitDiagnostics {
            train_r2: Some(1.0),
            residual_norm: 0.0,
            ill_conditioned: false,
            empty_active_set: false,
        })
        .collect();
    Ok(FittedModel {
        template,
        coefficients,
        diagnostics,
    })
}

/// Re-simulate exported truth equations against an exported trajectory's
/// input column (zero-order hold), for export self-checks.
pub fn resimulate_with_inputs(
    spec: &SystemSpec,
    traj: &Trajectory,
    cfg: &SimConfig,
) -> crate::simulate::RolloutResult {
    let signal = InputSignal::from_trajectory(traj);
    let mut u_buf = vec![0.0; traj.input_dim()];
    integrate_rhs(
        |t, x, dx| {
            if let Some(sig) = &signal {
                sig.sample_into(t, &mut u_buf);
            }
            spec.derivative(x, &u_buf, t, dx);
        },
        &spec.x0,
        traj.times(),
        cfg,
        spec.dim,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, eqs: &[&str], x0: &[f64], span: (f64, f64), n: usize) -> SystemSpec {
        SystemSpec {
            name: name.into(),
            dim: eqs.len(),
            equations: eqs
                .iter()
                .map(|s| parse_truth_expression(s).unwrap())
                .collect(),
            x0: x0.to_vec(),
            t_span: span,
            n_samples: n,
            input: None,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn exponential_mechanism_approaches_equilibrium_monotonically() {
        // dx = 1.2 - 0.2x - exp(-x); equilibrium from a bisection oracle
        let f = |x: f64| 1.2 - 0.2 * x - (-x).exp();
        let (mut lo, mut hi) = (5.0, 6.5);
        assert!(f(lo) > 0.0 && f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let equilibrium = 0.5 * (lo + hi);

        let s = spec("odebench21", &["1.2 - 0.2*x0 - exp(-1*x0)"], &[0.0], (0.0, 25.0), 500);
        let (traj, _) = generate_trajectory(&s, 0.7).unwrap();
        let col: Vec<f64> = (0..traj.len()).map(|r| traj.states()[(r, 0)]).collect();
        assert!(col.windows(2).all(|w| w[1] >= w[0] - 1e-9), "monotone rise");
        let last = *col.last().unwrap();
        assert!(
            (last - equilibrium).abs() < 0.05,
            "endpoint {last} vs equilibrium {equilibrium}"
        );
    }

    #[test]
    fn conservative_oscillator_keeps_amplitude() {
        let s = spec("osc", &["x1", "-1*x0"], &[1.0, 0.0], (0.0, 30.0), 600);
        let (traj, _) = generate_trajectory(&s, 0.7).unwrap();
        for r in 0..traj.len() {
            let e = traj.states()[(r, 0)].powi(2) + traj.states()[(r, 1)].powi(2);
            assert!((e - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn blow_up_span_reports_truth_divergence() {
        let s = spec("explode", &["x0^2"], &[1.0], (0.0, 2.0), 100);
        assert!(matches!(
            generate_trajectory(&s, 0.7),
            Err(BenchError::TruthDivergence)
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec("osc", &["x1", "-2.1*x0"], &[0.5, 0.0], (0.0, 12.0), 300);
        let (a, _) = generate_trajectory(&s, 0.7).unwrap();
        let (b, _) = generate_trajectory(&s, 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truth_terms_decompose_with_signs_and_structures() {
        let eq = parse_truth_expression("1.2 - 0.2*x0 - exp(-1*x0)").unwrap();
        let structures = truth_term_structures(&eq);
        assert_eq!(structures.len(), 3);
        let sigs: Vec<String> = structures
            .iter()
            .map(|s| canonical_signature(s).as_str().to_string())
            .collect();
        let one = canonical_signature(&Expr::Const(1.0));
        let x0 = canonical_signature(&Expr::state(0));
        assert!(sigs.contains(&one.as_str().to_string()));
        assert!(sigs.contains(&x0.as_str().to_string()));
    }

    #[test]
    fn spec_document_round_trip() {
        let s = spec("osc24", &["x1", "-2.1*x0"], &[0.5, 0.0], (0.0, 12.0), 600);
        let doc = s.to_document();
        let back = SystemSpec::from_document(&doc).unwrap();
        assert_eq!(back.name, "osc24");
        assert_eq!(back.dim, 2);
        assert_eq!(
            canonical_signature(&back.equations[1]),
            canonical_signature(&s.equations[1])
        );
    }

    #[test]
    fn spec_rejects_bad_shapes() {
        let mut s = spec("bad", &["x1", "-2.1*x0"], &[0.5], (0.0, 12.0), 600);
        assert!(matches!(s.validate(), Err(BenchError::Spec(..))));
        s.x0 = vec![0.5, 0.0];
        s.n_samples = 10;
        assert!(matches!(s.validate(), Err(BenchError::Spec(..))));
        // cot singular at the initial condition
        let s = spec("sing", &["cot(x0)"], &[0.0], (0.0, 1.0), 100);
        assert!(matches!(s.validate(), Err(BenchError::Spec(..))));
    }
}
