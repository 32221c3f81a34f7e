//! Deterministic prompt assembly.
//!
//! The prompt is a fixed-order plain-text document; identical contexts render
//! byte-identical prompts. Section headers stay present even when a section
//! has no entries so scripted proposers can assert the layout.

use crate::characterize::{DataSummary, PriorSpec, ALL_FAMILIES};
use crate::grammar::EquationTemplate;
use crate::propose::RejectionMemory;
#[cfg(test)]
use crate::propose::RejectReason;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write;

pub const SECTION_HEADERS: [&str; 9] = [
    "# METADATA",
    "# DATA CHARACTERISTICS",
    "# CURRENT BEST",
    "# BASELINE",
    "# PRIORS",
    "# ERROR FOCUS",
    "# ROLLOUT DIAGNOSTICS",
    "# REJECTED CANDIDATES",
    "# OUTPUT FORMAT",
];

/// Current best candidate as rendered into the prompt; the template itself is
/// kept so the mutation proposer can edit it structurally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestInfo {
    pub template: EquationTemplate,
    pub coefficients: Vec<Vec<f64>>,
    #[serde(with = "crate::num_serde::inf_f64_vec")]
    pub nrmse: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineInfo {
    pub equations: Vec<String>,
    /// Per-state reliability of the baseline fit.
    pub reliable: Vec<bool>,
    #[serde(with = "crate::num_serde::inf_f64_vec")]
    pub nrmse: Vec<f64>,
}

/// Textual rollout diagnostics for one state: how the best candidate's
/// rollout compares against held-out truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StateDiagnostics {
    pub amplitude_ratio: f64,
    pub phase_lag: f64,
    pub drift_slope: f64,
}

/// Everything the prompt is rendered from. Serialization of the same context
/// yields a byte-identical prompt document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptContext {
    pub system_name: String,
    pub dim: usize,
    pub input_dim: usize,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub units: Vec<String>,
    pub known_params: BTreeMap<String, f64>,
    pub summary: DataSummary,
    pub current_best: Option<BestInfo>,
    pub baseline: Option<BaselineInfo>,
    pub priors: PriorSpec,
    pub error_focus: usize,
    #[serde(with = "crate::num_serde::inf_f64")]
    pub focus_nrmse: f64,
    pub diagnostics: Vec<StateDiagnostics>,
    pub rejections: RejectionMemory,
    pub max_terms: usize,
    pub requested: usize,
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub fn build_prompt(ctx: &PromptContext) -> String {
    let mut out = String::new();
    let w = &mut out;

    writeln!(w, "{}", SECTION_HEADERS[0]).unwrap();
    writeln!(w, "system: {}", ctx.system_name).unwrap();
    let states: Vec<String> = (0..ctx.dim)
        .map(|i| {
            let name = ctx.state_names.get(i).cloned().unwrap_or_default();
            let unit = ctx.units.get(i).cloned().unwrap_or_default();
            let mut s = format!("x{i}");
            if !name.is_empty() && name != format!("x{i}") {
                s.push_str(&format!(" ({name})"));
            }
            if !unit.is_empty() {
                s.push_str(&format!(" [{unit}]"));
            }
            s
        })
        .collect();
    writeln!(w, "states: {}", states.join(", ")).unwrap();
    if ctx.input_dim > 0 {
        let inputs: Vec<String> = (0..ctx.input_dim)
            .map(|j| {
                let name = ctx.input_names.get(j).cloned().unwrap_or_default();
                if name.is_empty() || name == format!("u{j}") {
                    format!("u{j}")
                } else {
                    format!("u{j} ({name})")
                }
            })
            .collect();
        writeln!(w, "inputs: {} (exogenous, never modeled)", inputs.join(", ")).unwrap();
    } else {
        writeln!(w, "inputs: none").unwrap();
    }
    if ctx.known_params.is_empty() {
        writeln!(w, "known parameters: none").unwrap();
    } else {
        let params: Vec<String> = ctx
            .known_params
            .iter()
            .map(|(k, v)| format!("{k}={}", fmt_metric(*v)))
            .collect();
        writeln!(w, "known parameters: {}", params.join(", ")).unwrap();
    }

    writeln!(w, "\n{}", SECTION_HEADERS[1]).unwrap();
    for (i, s) in ctx.summary.states.iter().enumerate() {
        let period = s
            .period
            .map(|p| format!(", period~{}", fmt_metric(p)))
            .unwrap_or_default();
        writeln!(
            w,
            "x{i}: range [{}, {}], std {}, monotonic={}, oscillatory={}{period}, saturating={}, sign-definite={}",
            fmt_metric(s.min),
            fmt_metric(s.max),
            fmt_metric(s.std),
            yes_no(s.monotonic),
            yes_no(s.oscillatory),
            yes_no(s.saturating),
            yes_no(s.sign_definite),
        )
        .unwrap();
    }

    writeln!(w, "\n{}", SECTION_HEADERS[2]).unwrap();
    match &ctx.current_best {
        None => writeln!(w, "(none yet)").unwrap(),
        Some(best) => {
            for (i, features) in best.template.equations().iter().enumerate() {
                let terms: Vec<String> = features
                    .iter()
                    .zip(&best.coefficients[i])
                    .filter(|(_, c)| **c != 0.0)
                    .map(|(f, c)| format!("{}*{f}", fmt_metric(*c)))
                    .collect();
                let rhs = if terms.is_empty() {
                    "0".to_string()
                } else {
                    terms.join(" + ")
                };
                let err = best
                    .nrmse
                    .get(i)
                    .map(|v| format!("  (test NRMSE {})", fmt_metric(*v)))
                    .unwrap_or_default();
                writeln!(w, "d x{i}/dt = {rhs}{err}").unwrap();
            }
        }
    }

    writeln!(w, "\n{}", SECTION_HEADERS[3]).unwrap();
    match &ctx.baseline {
        None => writeln!(w, "(none)").unwrap(),
        Some(b) => {
            for (i, eq) in b.equations.iter().enumerate() {
                let trust = if b.reliable.get(i).copied().unwrap_or(false) {
                    "reliable"
                } else {
                    "unreliable"
                };
                let err = b
                    .nrmse
                    .get(i)
                    .map(|v| format!(", test NRMSE {}", fmt_metric(*v)))
                    .unwrap_or_default();
                writeln!(w, "{eq}  [trust: {trust}{err}]").unwrap();
            }
        }
    }

    writeln!(w, "\n{}", SECTION_HEADERS[4]).unwrap();
    for (i, prefs) in ctx.priors.preferences.iter().enumerate() {
        let rendered: Vec<String> = ALL_FAMILIES
            .iter()
            .map(|family| {
                let p = prefs
                    .iter()
                    .find(|(f, _)| f == family)
                    .map(|(_, p)| *p)
                    .unwrap();
                format!("{}={}", family.name(), p.name())
            })
            .collect();
        writeln!(w, "d x{i}/dt: {}", rendered.join(", ")).unwrap();
    }

    writeln!(w, "\n{}", SECTION_HEADERS[5]).unwrap();
    writeln!(
        w,
        "state x{} has the largest test error (NRMSE {}); prioritize improving its equation without destabilizing the others",
        ctx.error_focus,
        fmt_metric(ctx.focus_nrmse)
    )
    .unwrap();

    writeln!(w, "\n{}", SECTION_HEADERS[6]).unwrap();
    if ctx.diagnostics.is_empty() {
        writeln!(w, "(no completed rollout yet)").unwrap();
    } else {
        for (i, d) in ctx.diagnostics.iter().enumerate() {
            writeln!(
                w,
                "x{i}: amplitude ratio {}, phase lag {}, drift slope {}",
                fmt_metric(d.amplitude_ratio),
                fmt_metric(d.phase_lag),
                fmt_metric(d.drift_slope)
            )
            .unwrap();
        }
    }

    writeln!(w, "\n{}", SECTION_HEADERS[7]).unwrap();
    for (label, reason) in ctx.rejections.entries() {
        writeln!(w, "{label} -- {reason}").unwrap();
    }

    writeln!(w, "\n{}", SECTION_HEADERS[8]).unwrap();
    writeln!(
        w,
        "Propose up to {} candidate equation templates. Each candidate must be a fenced block containing one JSON document of the form:",
        ctx.requested
    )
    .unwrap();
    writeln!(w, "```").unwrap();
    writeln!(
        w,
        "{}",
        example_document(ctx.dim)
    )
    .unwrap();
    writeln!(w, "```").unwrap();
    writeln!(w, "Hard constraints:").unwrap();
    writeln!(
        w,
        "- identifiers: x0..x{}{}, t; functions: sin cos exp log sqrt abs; operators: + - * / ^",
        ctx.dim - 1,
        if ctx.input_dim > 0 {
            format!(", u0..u{}", ctx.input_dim - 1)
        } else {
            String::new()
        }
    )
    .unwrap();
    writeln!(
        w,
        "- exponents must be integer or half-integer constants; no variable exponents"
    )
    .unwrap();
    writeln!(w, "- at most {} features per equation", ctx.max_terms).unwrap();
    writeln!(
        w,
        "- features must be linear in the unknown coefficients: no coefficient symbols inside functions, denominators, or exponents"
    )
    .unwrap();
    writeln!(
        w,
        "- every state 0..{} needs an equation with at least one feature",
        ctx.dim - 1
    )
    .unwrap();
    out
}

fn example_document(dim: usize) -> String {
    let eqs: Vec<String> = (0..dim)
        .map(|i| format!(r#"{{ "state": {i}, "features": ["x{}", "..."] }}"#, (i + 1) % dim))
        .collect();
    format!(r#"{{ "equations": [ {} ] }}"#, eqs.join(", "))
}

fn yes_no(v: bool) -> &'static str {
    if v {
        "yes"
    } else {
        "no"
    }
}

/// Compare a completed rollout against held-out truth, per state: amplitude
/// ratio of value ranges, phase lag from the cross-correlation argmax, and
/// the least-squares slope of the error over time.
pub fn diagnose_rollout(
    sim: &[Vec<f64>],
    truth: &DMatrix<f64>,
    times: &[f64],
) -> Vec<StateDiagnostics> {
    let n = times.len().min(sim.len()).min(truth.nrows());
    let d = truth.ncols();
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let s: Vec<f64> = (0..n).map(|r| sim[r][c]).collect();
        let g: Vec<f64> = (0..n).map(|r| truth[(r, c)]).collect();
        out.push(StateDiagnostics {
            amplitude_ratio: amplitude_ratio(&s, &g),
            phase_lag: phase_lag(&s, &g, times),
            drift_slope: drift_slope(&s, &g, times),
        });
    }
    out
}

fn range(v: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in v {
        lo = lo.min(*x);
        hi = hi.max(*x);
    }
    hi - lo
}

fn amplitude_ratio(sim: &[f64], truth: &[f64]) -> f64 {
    let rt = range(truth);
    let rs = range(sim);
    if rt == 0.0 {
        if rs == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        rs / rt
    }
}

/// Lag (in time units) maximizing the cross-correlation of the mean-centered
/// signals; positive means the rollout lags the truth.
fn phase_lag(sim: &[f64], truth: &[f64], times: &[f64]) -> f64 {
    let n = sim.len();
    if n < 4 {
        return 0.0;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ms = mean(sim);
    let mt = mean(truth);
    let max_lag = (n / 4).max(1) as isize;
    let mut best_lag = 0isize;
    let mut best = f64::NEG_INFINITY;
    for lag in -max_lag..=max_lag {
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..n as isize {
            let j = i + lag;
            if j >= 0 && j < n as isize {
                acc += (sim[j as usize] - ms) * (truth[i as usize] - mt);
                count += 1;
            }
        }
        if count > 0 {
            let score = acc / count as f64;
            if score > best {
                best = score;
                best_lag = lag;
            }
        }
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    best_lag as f64 * dt
}

fn drift_slope(sim: &[f64], truth: &[f64], times: &[f64]) -> f64 {
    let n = sim.len();
    let errs: Vec<f64> = (0..n).map(|i| sim[i] - truth[i]).collect();
    let tm = times[..n].iter().sum::<f64>() / n as f64;
    let em = errs.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let dt = times[i] - tm;
        num += dt * (errs[i] - em);
        den += dt * dt;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::characterize::{derive_priors, summarize_state};

    pub(crate) fn minimal_context(dim: usize) -> PromptContext {
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let series: Vec<f64> = times.iter().map(|t| (2.0 * t).sin()).collect();
        let summary = DataSummary {
            states: (0..dim).map(|_| summarize_state(&series, &times)).collect(),
        };
        let priors = derive_priors(&summary);
        PromptContext {
            system_name: "test".into(),
            dim,
            input_dim: 0,
            state_names: (0..dim).map(|i| format!("x{i}")).collect(),
            input_names: vec![],
            units: vec![],
            known_params: BTreeMap::new(),
            summary,
            current_best: None,
            baseline: None,
            priors,
            error_focus: 0,
            focus_nrmse: 1.0,
            diagnostics: vec![],
            rejections: RejectionMemory::new(20),
            max_terms: 8,
            requested: 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characterize::{derive_priors, summarize_state};

    fn context() -> PromptContext {
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let series: Vec<f64> = times.iter().map(|t| (2.0 * t).sin()).collect();
        let summary = DataSummary {
            states: vec![
                summarize_state(&series, &times),
                summarize_state(&series, &times),
            ],
        };
        let priors = derive_priors(&summary);
        PromptContext {
            system_name: "osc".into(),
            dim: 2,
            input_dim: 0,
            state_names: vec!["x0".into(), "x1".into()],
            input_names: vec![],
            units: vec![],
            known_params: BTreeMap::new(),
            summary,
            current_best: None,
            baseline: None,
            priors,
            error_focus: 1,
            focus_nrmse: 0.5,
            diagnostics: vec![],
            rejections: RejectionMemory::new(20),
            max_terms: 8,
            requested: 4,
        }
    }

    #[test]
    fn identical_contexts_render_byte_identical_prompts() {
        let ctx = context();
        assert_eq!(build_prompt(&ctx), build_prompt(&ctx));
    }

    #[test]
    fn sections_appear_in_canonical_order() {
        let ctx = context();
        let prompt = build_prompt(&ctx);
        let mut last = 0;
        for header in SECTION_HEADERS {
            let pos = prompt.find(header).unwrap_or_else(|| panic!("{header} missing"));
            assert!(pos >= last, "{header} out of order");
            last = pos;
        }
    }

    #[test]
    fn empty_rejection_memory_keeps_header_without_entries() {
        let ctx = context();
        let prompt = build_prompt(&ctx);
        let tail = &prompt[prompt.find("# REJECTED CANDIDATES").unwrap()..];
        let next = tail.find("# OUTPUT FORMAT").unwrap();
        let section = &tail["# REJECTED CANDIDATES".len()..next];
        assert!(section.trim().is_empty());
    }

    #[test]
    fn error_focus_names_state_and_nrmse() {
        let ctx = context();
        let prompt = build_prompt(&ctx);
        assert!(prompt.contains("state x1 has the largest test error (NRMSE 0.500000)"));
    }

    #[test]
    fn rejections_render_with_reasons() {
        let mut ctx = context();
        ctx.rejections.push("d0:x1;d1:x0".into(), RejectReason::Duplicate);
        let prompt = build_prompt(&ctx);
        assert!(prompt.contains("d0:x1;d1:x0 -- previously tested"));
    }

    #[test]
    fn diagnostics_amplitude_and_phase() {
        let n = 200;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
        let truth = DMatrix::from_fn(n, 1, |r, _| (times[r]).sin());
        // doubled amplitude, lagging by 0.25 time units
        let sim: Vec<Vec<f64>> = (0..n).map(|r| vec![2.0 * (times[r] - 0.25).sin()]).collect();
        let d = diagnose_rollout(&sim, &truth, &times);
        assert!((d[0].amplitude_ratio - 2.0).abs() < 0.05);
        assert!((d[0].phase_lag - 0.25).abs() < 0.1, "lag {}", d[0].phase_lag);
    }

    #[test]
    fn diagnostics_drift_slope() {
        let n = 100;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let truth = DMatrix::from_fn(n, 1, |r, _| times[r].cos());
        let sim: Vec<Vec<f64>> = (0..n)
            .map(|r| vec![times[r].cos() + 0.03 * times[r]])
            .collect();
        let d = diagnose_rollout(&sim, &truth, &times);
        assert!((d[0].drift_slope - 0.03).abs() < 1e-9);
    }
}
