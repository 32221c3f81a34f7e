//! Per-state empirical summaries and structural priors.
//!
//! Summaries feed the proposal prompt as behavioral cues ("oscillatory",
//! "saturating") and drive a small rule table that marks function families as
//! preferred, optional or discouraged per state derivative. The prior-penalty
//! term of the selection score charges candidates that lean on discouraged
//! families or proliferate families within one equation.

use crate::grammar::{BinaryOp, EquationTemplate, Expr, UnaryOp};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Charge per feature drawn from a discouraged family.
pub const DISCOURAGED_CHARGE: f64 = 0.5;
/// Charge per distinct family beyond the second within one equation.
pub const PROLIFERATION_CHARGE: f64 = 0.25;
/// Minimum mean-crossing count for the oscillatory flag.
pub const OSCILLATION_CROSSINGS: usize = 4;

/// Empirical summary of one state's training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub min: f64,
    pub max: f64,
    pub std: f64,
    pub monotonic: bool,
    pub oscillatory: bool,
    /// Present iff oscillatory.
    pub period: Option<f64>,
    pub saturating: bool,
    pub sign_definite: bool,
}

/// Summaries for every state of a trajectory, in state order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DataSummary {
    pub states: Vec<StateSummary>,
}

/// Summarize one state series. A constant series is the degenerate case: all
/// flags false, zero standard deviation.
pub fn summarize_state(series: &[f64], times: &[f64]) -> StateSummary {
    assert_eq!(series.len(), times.len());
    assert!(series.len() >= 2, "need at least two samples");
    let n = series.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in series {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let range = hi - lo;
    if range == 0.0 {
        return StateSummary {
            min: lo,
            max: hi,
            std: 0.0,
            monotonic: false,
            oscillatory: false,
            period: None,
            saturating: false,
            sign_definite: lo > 0.0 || hi < 0.0,
        };
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let std = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();

    let tol = 1e-9 * range;
    let nondecreasing = series.windows(2).all(|w| w[1] - w[0] >= -tol);
    let nonincreasing = series.windows(2).all(|w| w[1] - w[0] <= tol);
    let monotonic = nondecreasing || nonincreasing;

    // crossings of the mean-centered series, with linearly interpolated
    // crossing times; consecutive crossings are half a period apart
    let mut crossing_times = Vec::new();
    let mut last_sign = 0i8;
    for i in 0..n {
        let c = series[i] - mean;
        let sign = if c > 0.0 {
            1
        } else if c < 0.0 {
            -1
        } else {
            0
        };
        if sign != 0 {
            if last_sign != 0 && sign != last_sign {
                let prev = series[i - 1] - mean;
                let frac = prev / (prev - c);
                crossing_times.push(times[i - 1] + frac * (times[i] - times[i - 1]));
            }
            last_sign = sign;
        }
    }
    let oscillatory = crossing_times.len() >= OSCILLATION_CROSSINGS;
    let period = if oscillatory {
        let spacings: Vec<f64> = crossing_times.windows(2).map(|w| w[1] - w[0]).collect();
        let mean_spacing = spacings.iter().sum::<f64>() / spacings.len() as f64;
        Some(2.0 * mean_spacing)
    } else {
        None
    };

    // last-decile range below 5% of the total range, and not oscillatory
    let tail = n.div_ceil(10);
    let tail_slice = &series[n - tail..];
    let (mut tlo, mut thi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in tail_slice {
        tlo = tlo.min(*v);
        thi = thi.max(*v);
    }
    let saturating = !oscillatory && (thi - tlo) < 0.05 * range;

    StateSummary {
        min: lo,
        max: hi,
        std,
        monotonic,
        oscillatory,
        period,
        saturating,
        sign_definite: lo > 0.0 || hi < 0.0,
    }
}

/// Summarize the training segment of every state column.
pub fn summarize_training_segment(traj: &crate::regress::Trajectory) -> DataSummary {
    let split = traj.split_index();
    let times = traj.train_times();
    let states = (0..traj.dim())
        .map(|c| {
            let series: Vec<f64> = (0..split).map(|r| traj.states()[(r, c)]).collect();
            summarize_state(&series, times)
        })
        .collect();
    DataSummary { states }
}

/// Function families candidates draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum Family {
    Polynomial,
    Trig,
    Exponential,
    BilinearCross,
    RationalSurrogate,
}

pub const ALL_FAMILIES: [Family; 5] = [
    Family::Polynomial,
    Family::Trig,
    Family::Exponential,
    Family::BilinearCross,
    Family::RationalSurrogate,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Polynomial => "polynomial",
            Family::Trig => "trig",
            Family::Exponential => "exponential",
            Family::BilinearCross => "bilinear-cross",
            Family::RationalSurrogate => "rational-surrogate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    Preferred,
    Optional,
    Discouraged,
}

impl Preference {
    pub fn name(self) -> &'static str {
        match self {
            Preference::Preferred => "preferred",
            Preference::Optional => "optional",
            Preference::Discouraged => "discouraged",
        }
    }
}

/// Per-state-derivative preferences, one entry per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// `preferences[i]` maps each family to its preference for `dx_i/dt`,
    /// in [`ALL_FAMILIES`] order.
    pub preferences: Vec<[(Family, Preference); 5]>,
}

impl PriorSpec {
    pub fn preference(&self, state: usize, family: Family) -> Preference {
        self.preferences[state]
            .iter()
            .find(|(f, _)| *f == family)
            .map(|(_, p)| *p)
            .expect("family table is total")
    }

    /// Neutral priors: everything optional.
    pub fn neutral(dim: usize) -> PriorSpec {
        PriorSpec {
            preferences: (0..dim)
                .map(|_| ALL_FAMILIES.map(|f| (f, Preference::Optional)))
                .collect(),
        }
    }
}

/// Rule table from summaries to priors:
/// oscillatory states prefer polynomial structure (harmonic motion is linear)
/// with trig optional; non-oscillatory states discourage trig; a monotone
/// saturating state prefers exponentials. Bilinear cross terms and rational
/// surrogates stay optional throughout.
pub fn derive_priors(summary: &DataSummary) -> PriorSpec {
    let preferences = summary
        .states
        .iter()
        .map(|s| {
            ALL_FAMILIES.map(|family| {
                let pref = match family {
                    Family::Polynomial => {
                        if s.oscillatory {
                            Preference::Preferred
                        } else {
                            Preference::Optional
                        }
                    }
                    Family::Trig => {
                        if s.oscillatory {
                            Preference::Optional
                        } else {
                            Preference::Discouraged
                        }
                    }
                    Family::Exponential => {
                        if s.monotonic && s.saturating {
                            Preference::Preferred
                        } else {
                            Preference::Optional
                        }
                    }
                    Family::BilinearCross | Family::RationalSurrogate => Preference::Optional,
                };
                (family, pref)
            })
        })
        .collect();
    PriorSpec { preferences }
}

/// Classify a feature into its primary family. Precedence: rational
/// structure, then trig, then exponential (log counts as the exponential
/// family), then bilinear cross terms, else polynomial.
pub fn feature_family(expr: &Expr) -> Family {
    if contains_rational(expr) {
        Family::RationalSurrogate
    } else if contains_unary(expr, &[UnaryOp::Sin, UnaryOp::Cos, UnaryOp::Tan, UnaryOp::Cot]) {
        Family::Trig
    } else if contains_unary(expr, &[UnaryOp::Exp, UnaryOp::Log]) {
        Family::Exponential
    } else if distinct_states(expr).len() >= 2 {
        Family::BilinearCross
    } else {
        Family::Polynomial
    }
}

fn contains_unary(expr: &Expr, ops: &[UnaryOp]) -> bool {
    match expr {
        Expr::Unary(op, a) => ops.contains(op) || contains_unary(a, ops),
        Expr::Binary(_, a, b) => contains_unary(a, ops) || contains_unary(b, ops),
        _ => false,
    }
}

fn contains_rational(expr: &Expr) -> bool {
    match expr {
        Expr::Binary(BinaryOp::Div, a, b) => {
            !matches!(**b, Expr::Const(_)) || contains_rational(a) || contains_rational(b)
        }
        Expr::Binary(BinaryOp::Pow, a, b) => {
            matches!(**b, Expr::Const(v) if v < 0.0) || contains_rational(a)
        }
        Expr::Binary(_, a, b) => contains_rational(a) || contains_rational(b),
        Expr::Unary(_, a) => contains_rational(a),
        _ => false,
    }
}

fn distinct_states(expr: &Expr) -> BTreeSet<usize> {
    fn walk(e: &Expr, set: &mut BTreeSet<usize>) {
        match e {
            Expr::State(i) => {
                set.insert(*i);
            }
            Expr::Unary(_, a) => walk(a, set),
            Expr::Binary(_, a, b) => {
                walk(a, set);
                walk(b, set);
            }
            _ => {}
        }
    }
    let mut set = BTreeSet::new();
    walk(expr, &mut set);
    set
}

/// Prior-violation penalty: 0.5 per feature from a discouraged family plus
/// 0.25 per distinct family beyond the second within one equation.
pub fn prior_penalty(template: &EquationTemplate, priors: &PriorSpec) -> f64 {
    let mut penalty = 0.0;
    for (state, features) in template.equations().iter().enumerate() {
        let mut families = BTreeSet::new();
        for f in features {
            let family = feature_family(f);
            families.insert(family);
            if priors.preference(state, family) == Preference::Discouraged {
                penalty += DISCOURAGED_CHARGE;
            }
        }
        penalty += PROLIFERATION_CHARGE * families.len().saturating_sub(2) as f64;
    }
    penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_expression;

    fn series(f: impl Fn(f64) -> f64, t0: f64, t1: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let times: Vec<f64> = (0..n)
            .map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64)
            .collect();
        let values = times.iter().map(|t| f(*t)).collect();
        (values, times)
    }

    #[test]
    fn sine_is_oscillatory_with_analytic_period() {
        let (v, t) = series(f64::sin, 0.0, 4.0 * std::f64::consts::PI, 400);
        let s = summarize_state(&v, &t);
        assert!(s.oscillatory);
        assert!(!s.monotonic);
        assert!(!s.saturating);
        let period = s.period.unwrap();
        let expected = 2.0 * std::f64::consts::PI;
        assert!(
            (period - expected).abs() < 0.02 * expected,
            "period {period} vs {expected}"
        );
    }

    #[test]
    fn logistic_is_monotonic_and_saturating() {
        let (v, t) = series(|t| 1.0 / (1.0 + (-t).exp()), -6.0, 6.0, 200);
        let s = summarize_state(&v, &t);
        assert!(s.monotonic);
        assert!(s.saturating);
        assert!(!s.oscillatory);
        assert!(s.sign_definite);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let (v, t) = series(|_| 2.5, 0.0, 1.0, 50);
        let s = summarize_state(&v, &t);
        assert_eq!(s.std, 0.0);
        assert!(!s.monotonic && !s.oscillatory && !s.saturating);
        assert_eq!(s.period, None);
    }

    #[test]
    fn flags_invariant_under_affine_rescaling() {
        let (v, t) = series(|t| (1.7 * t).sin() + 0.3, 0.0, 15.0, 500);
        let scaled: Vec<f64> = v.iter().map(|x| 40.0 * x - 7.0).collect();
        let a = summarize_state(&v, &t);
        let b = summarize_state(&scaled, &t);
        assert_eq!(a.monotonic, b.monotonic);
        assert_eq!(a.oscillatory, b.oscillatory);
        assert!((a.period.unwrap() - b.period.unwrap()).abs() < 1e-9);
        assert_eq!(a.saturating, b.saturating);
    }

    fn summary(oscillatory: bool, monotonic: bool, saturating: bool) -> DataSummary {
        DataSummary {
            states: vec![StateSummary {
                min: 0.0,
                max: 1.0,
                std: 0.3,
                monotonic,
                oscillatory,
                period: oscillatory.then_some(2.0),
                saturating,
                sign_definite: false,
            }],
        }
    }

    #[test]
    fn rule_table_cases() {
        // non-oscillatory decaying state: trig discouraged
        let p = derive_priors(&summary(false, false, false));
        assert_eq!(p.preference(0, Family::Trig), Preference::Discouraged);
        // oscillatory: polynomial preferred, trig optional
        let p = derive_priors(&summary(true, false, false));
        assert_eq!(p.preference(0, Family::Polynomial), Preference::Preferred);
        assert_eq!(p.preference(0, Family::Trig), Preference::Optional);
        // saturating monotone: exponential preferred
        let p = derive_priors(&summary(false, true, true));
        assert_eq!(
            p.preference(0, Family::Exponential),
            Preference::Preferred
        );
        assert_eq!(p.preference(0, Family::Trig), Preference::Discouraged);
        // rational surrogate stays optional everywhere
        assert_eq!(
            p.preference(0, Family::RationalSurrogate),
            Preference::Optional
        );
    }

    fn template(features: &[&[&str]]) -> EquationTemplate {
        let eqs = features
            .iter()
            .map(|eq| eq.iter().map(|s| parse_expression(s).unwrap()).collect())
            .collect();
        EquationTemplate::new(features.len(), 0, eqs).unwrap()
    }

    #[test]
    fn family_classification() {
        assert_eq!(
            feature_family(&parse_expression("x0^2").unwrap()),
            Family::Polynomial
        );
        assert_eq!(
            feature_family(&parse_expression("x0*x1").unwrap()),
            Family::BilinearCross
        );
        assert_eq!(
            feature_family(&parse_expression("sin(x0)*x1").unwrap()),
            Family::Trig
        );
        assert_eq!(
            feature_family(&parse_expression("exp(-0.5*x0)").unwrap()),
            Family::Exponential
        );
        assert_eq!(
            feature_family(&parse_expression("log(x0)").unwrap()),
            Family::Exponential
        );
        assert_eq!(
            feature_family(&parse_expression("x0/x1").unwrap()),
            Family::RationalSurrogate
        );
        assert_eq!(
            feature_family(&parse_expression("x0^-1").unwrap()),
            Family::RationalSurrogate
        );
        // division by a constant is just scaling
        assert_eq!(
            feature_family(&parse_expression("x0/2").unwrap()),
            Family::Polynomial
        );
    }

    #[test]
    fn penalty_zero_for_all_polynomial_under_trig_discouraged() {
        let priors = derive_priors(&summary(false, false, false));
        let t = template(&[&["x0", "x0^2"]]);
        assert_eq!(prior_penalty(&t, &priors), 0.0);
    }

    #[test]
    fn penalty_single_violation_is_half() {
        let priors = derive_priors(&summary(false, false, false));
        let t = template(&[&["x0", "sin(x0)"]]);
        assert!((prior_penalty(&t, &priors) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_proliferation_charge() {
        // polynomial + trig + exponential with trig optional: one family
        // beyond the second -> 0.25 (hand evaluation of the stated rule,
        // cross-checked by summing the per-family rule terms)
        let priors = derive_priors(&summary(true, false, false));
        let t = template(&[&["x0", "sin(x0)", "exp(-1*x0)"]]);
        let expected = {
            // independent rule interpreter: count discouraged features and
            // distinct families
            let fams = [Family::Polynomial, Family::Trig, Family::Exponential];
            let discouraged = fams
                .iter()
                .filter(|f| priors.preference(0, **f) == Preference::Discouraged)
                .count();
            0.5 * discouraged as f64 + 0.25 * (fams.len() - 2) as f64
        };
        assert!((prior_penalty(&t, &priors) - expected).abs() < 1e-15);
        assert!((prior_penalty(&t, &priors) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn penalty_monotone_under_added_feature() {
        let priors = derive_priors(&summary(false, false, false));
        let base = template(&[&["x0", "x0^2"]]);
        let before = prior_penalty(&base, &priors);
        for extra in ["x0^3", "sin(x0)", "exp(-1*x0)", "x0^-1"] {
            let t = template(&[&["x0", "x0^2", extra]]);
            assert!(
                prior_penalty(&t, &priors) >= before,
                "adding {extra} decreased the penalty"
            );
        }
    }

    #[test]
    fn penalty_zero_when_preferred_or_optional_and_two_families() {
        let priors = derive_priors(&summary(true, false, false));
        let t = template(&[&["x0", "sin(x0)"]]);
        assert_eq!(prior_penalty(&t, &priors), 0.0);
    }
}
