//! Equation templates: per-state feature lists with unknown coefficients.
//!
//! A template fixes the structure of a candidate system; the regression
//! estimates one scalar coefficient per feature. Features are closed
//! expressions over states, inputs, time and constants — explicit coefficient
//! placeholders and outer numeric multipliers are stripped at ingestion, since
//! the fitted coefficient absorbs them.

use super::parser::{parse_feature, FeatureParseError};
use super::{canonical_signature, Expr, GrammarError};
use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DEFAULT_MAX_TERMS: usize = 8;
pub const DEFAULT_COMPLEXITY_NORMALIZER: f64 = 50.0;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TemplateError {
    #[error("state {state}: {source}")]
    Grammar {
        state: usize,
        source: GrammarError,
    },
    #[error("state {state}: {count} features exceed the {max}-term limit")]
    TooManyTerms {
        state: usize,
        count: usize,
        max: usize,
    },
    #[error("state {state}: duplicate feature `{signature}`")]
    DuplicateFeature { state: usize, signature: String },
    #[error("state {state}: linearity violation: {detail}")]
    LinearityViolation { state: usize, detail: String },
    #[error("malformed template document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("state {state} feature {feature} at sample {sample}: {detail}")]
    Evaluation {
        state: usize,
        feature: usize,
        sample: usize,
        detail: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Per-state ordered feature lists. `equations[i]` holds the features of the
/// i-th state derivative; every equation has at least one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationTemplate {
    dim: usize,
    input_dim: usize,
    equations: Vec<Vec<Expr>>,
}

impl EquationTemplate {
    pub fn new(
        dim: usize,
        input_dim: usize,
        equations: Vec<Vec<Expr>>,
    ) -> Result<Self, TemplateError> {
        if dim == 0 || equations.len() != dim {
            return Err(TemplateError::Malformed(format!(
                "expected {dim} equations, got {}",
                equations.len()
            )));
        }
        for (state, features) in equations.iter().enumerate() {
            if features.is_empty() {
                return Err(TemplateError::Malformed(format!(
                    "state {state} has no features"
                )));
            }
            for f in features {
                if let Some(i) = f.max_state_index() {
                    if i >= dim {
                        return Err(TemplateError::Grammar {
                            state,
                            source: GrammarError::DisallowedSymbol(format!(
                                "x{i} (system dimension is {dim})"
                            )),
                        });
                    }
                }
                if let Some(j) = f.max_input_index() {
                    if j >= input_dim {
                        return Err(TemplateError::Grammar {
                            state,
                            source: GrammarError::DisallowedSymbol(format!(
                                "u{j} ({input_dim} input channels)"
                            )),
                        });
                    }
                }
            }
        }
        Ok(EquationTemplate {
            dim,
            input_dim,
            equations,
        })
    }

    /// Parse the structured template document
    /// `{"equations":[{"state":0,"features":["x1","x0^2*x1"]}, ...]}`.
    /// Equations may arrive in any order but must cover every state exactly
    /// once.
    pub fn from_document(
        doc: &str,
        dim: usize,
        input_dim: usize,
    ) -> Result<Self, TemplateError> {
        let parsed: TemplateDoc = serde_json::from_str(doc)
            .map_err(|e| TemplateError::Malformed(e.to_string()))?;
        Self::from_doc_struct(parsed, dim, input_dim)
    }

    fn from_doc_struct(
        doc: TemplateDoc,
        dim: usize,
        input_dim: usize,
    ) -> Result<Self, TemplateError> {
        let mut equations: Vec<Option<Vec<Expr>>> = vec![None; dim];
        for eq in doc.equations {
            if eq.state >= dim {
                return Err(TemplateError::Malformed(format!(
                    "equation for state {} in a {dim}-state system",
                    eq.state
                )));
            }
            if equations[eq.state].is_some() {
                return Err(TemplateError::Malformed(format!(
                    "state {} appears twice",
                    eq.state
                )));
            }
            let mut features = Vec::with_capacity(eq.features.len());
            for text in &eq.features {
                let parsed = parse_feature(text).map_err(|err| match err {
                    FeatureParseError::Grammar(source) => TemplateError::Grammar {
                        state: eq.state,
                        source,
                    },
                    FeatureParseError::Linearity(detail) => TemplateError::LinearityViolation {
                        state: eq.state,
                        detail,
                    },
                })?;
                features.push(parsed.expr);
            }
            equations[eq.state] = Some(features);
        }
        let equations = equations
            .into_iter()
            .enumerate()
            .map(|(state, eq)| {
                eq.ok_or_else(|| TemplateError::Malformed(format!("state {state} missing")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(dim, input_dim, equations)
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string(&self.doc_struct()).expect("template serialization")
    }

    fn doc_struct(&self) -> TemplateDoc {
        TemplateDoc {
            equations: self
                .equations
                .iter()
                .enumerate()
                .map(|(state, features)| EquationDoc {
                    state,
                    features: features.iter().map(|f| f.to_string()).collect(),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn features(&self, state: usize) -> &[Expr] {
        &self.equations[state]
    }

    pub fn equations(&self) -> &[Vec<Expr>] {
        &self.equations
    }

    pub fn feature_count(&self) -> usize {
        self.equations.iter().map(Vec::len).sum()
    }

    /// Template-level identity used by the novelty filter: per-equation sorted
    /// term signatures, concatenated in state order.
    pub fn signature(&self) -> String {
        let per_state: Vec<String> = self
            .equations
            .iter()
            .enumerate()
            .map(|(state, features)| {
                let mut sigs: Vec<String> = features
                    .iter()
                    .map(|f| canonical_signature(f).as_str().to_string())
                    .collect();
                sigs.sort();
                format!("d{state}:{}", sigs.join("+"))
            })
            .collect();
        per_state.join(";")
    }
}

impl Serialize for EquationTemplate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.doc_struct().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EquationTemplate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = TemplateDoc::deserialize(deserializer)?;
        let dim = doc.equations.len();
        let mut input_dim = 0;
        let mut equations: Vec<Option<Vec<Expr>>> = vec![None; dim];
        for eq in doc.equations {
            if eq.state >= dim || equations[eq.state].is_some() {
                return Err(D::Error::custom(format!("bad state index {}", eq.state)));
            }
            let mut features = Vec::new();
            for text in &eq.features {
                let parsed = parse_feature(text)
                    .map_err(|e| D::Error::custom(format!("feature `{text}`: {e:?}")))?;
                if let Some(j) = parsed.expr.max_input_index() {
                    input_dim = input_dim.max(j + 1);
                }
                features.push(parsed.expr);
            }
            equations[eq.state] = Some(features);
        }
        let equations: Vec<Vec<Expr>> = equations.into_iter().map(Option::unwrap).collect();
        EquationTemplate::new(dim, input_dim, equations).map_err(D::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateDoc {
    equations: Vec<EquationDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EquationDoc {
    state: usize,
    features: Vec<String>,
}

/// Candidate gate: per-equation term limit and duplicate-signature check.
/// Linearity in the unknown coefficients is enforced structurally at parse
/// time (features are closed expressions), so a well-typed template cannot
/// violate it; the ingestion path reports `LinearityViolation` for raw text.
pub fn validate_template(
    template: &EquationTemplate,
    max_terms: usize,
) -> Result<(), TemplateError> {
    for (state, features) in template.equations.iter().enumerate() {
        if features.len() > max_terms {
            return Err(TemplateError::TooManyTerms {
                state,
                count: features.len(),
                max: max_terms,
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in features {
            let sig = canonical_signature(f);
            if !seen.insert(sig.clone()) {
                return Err(TemplateError::DuplicateFeature {
                    state,
                    signature: sig.as_str().to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Normalized symbolic complexity: total expression-tree nodes over all
/// features plus one node per coefficient slot, divided by `normalizer`.
pub fn template_complexity(template: &EquationTemplate, normalizer: f64) -> f64 {
    let nodes: usize = template
        .equations
        .iter()
        .flat_map(|eq| eq.iter())
        .map(|f| f.node_count() + 1)
        .sum();
    nodes as f64 / normalizer
}

/// Evaluate every feature on the sample grid. Entry `(j, k)` of matrix `i` is
/// feature `k` of state `i` at sample `j`. Domain violations identify the
/// offending state, feature and sample.
pub fn evaluate_features(
    template: &EquationTemplate,
    states: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
    times: &[f64],
) -> Result<Vec<DMatrix<f64>>, EvalError> {
    let n = times.len();
    if states.nrows() != n {
        return Err(EvalError::DimensionMismatch(format!(
            "{} state rows vs {} samples",
            states.nrows(),
            n
        )));
    }
    if states.ncols() != template.dim {
        return Err(EvalError::DimensionMismatch(format!(
            "{} state columns vs template dimension {}",
            states.ncols(),
            template.dim
        )));
    }
    if let Some(u) = inputs {
        if u.nrows() != n {
            return Err(EvalError::DimensionMismatch(format!(
                "{} input rows vs {} samples",
                u.nrows(),
                n
            )));
        }
        if u.ncols() < template.input_dim {
            return Err(EvalError::DimensionMismatch(format!(
                "{} input columns vs template input dimension {}",
                u.ncols(),
                template.input_dim
            )));
        }
    } else if template.input_dim > 0 {
        return Err(EvalError::DimensionMismatch(
            "template references inputs but the trajectory has none".into(),
        ));
    }

    let mut x_row = vec![0.0; states.ncols()];
    let mut u_row = vec![0.0; inputs.map_or(0, |u| u.ncols())];
    let mut out = Vec::with_capacity(template.dim);
    for (state, features) in template.equations.iter().enumerate() {
        let mut m = DMatrix::zeros(n, features.len());
        for j in 0..n {
            for (c, v) in x_row.iter_mut().enumerate() {
                *v = states[(j, c)];
            }
            if let Some(u) = inputs {
                for (c, v) in u_row.iter_mut().enumerate() {
                    *v = u[(j, c)];
                }
            }
            for (k, f) in features.iter().enumerate() {
                m[(j, k)] =
                    f.eval_checked(&x_row, &u_row, times[j])
                        .map_err(|e| EvalError::Evaluation {
                            state,
                            feature: k,
                            sample: j,
                            detail: e.to_string(),
                        })?;
            }
        }
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_expression;

    fn template(features: &[&[&str]]) -> EquationTemplate {
        let dim = features.len();
        let eqs = features
            .iter()
            .map(|eq| {
                eq.iter()
                    .map(|s| parse_expression(s).unwrap())
                    .collect::<Vec<_>>()
            })
            .collect();
        EquationTemplate::new(dim, 0, eqs).unwrap()
    }

    #[test]
    fn single_linear_template_is_valid() {
        let t = template(&[&["x1"], &["x0"]]);
        assert!(validate_template(&t, DEFAULT_MAX_TERMS).is_ok());
    }

    #[test]
    fn duplicate_features_rejected() {
        let t = template(&[&["x0", "x0"]]);
        assert!(matches!(
            validate_template(&t, 8),
            Err(TemplateError::DuplicateFeature { state: 0, .. })
        ));
        // commutative reorderings are the same feature
        let t = template(&[&["x0*x1", "x1*x0"], &["x0"]]);
        assert!(matches!(
            validate_template(&t, 8),
            Err(TemplateError::DuplicateFeature { .. })
        ));
    }

    #[test]
    fn nine_features_exceed_default_limit() {
        let feats: Vec<String> = (1..=9).map(|k| format!("x0^{k}")).collect();
        let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
        let t = template(&[&refs]);
        assert!(matches!(
            validate_template(&t, 8),
            Err(TemplateError::TooManyTerms {
                state: 0,
                count: 9,
                max: 8
            })
        ));
        assert!(validate_template(&t, 9).is_ok());
    }

    #[test]
    fn complexity_counts_nodes_and_coefficient_slots() {
        // single-leaf feature: (1 node + 1 coefficient slot) / 50
        let t = template(&[&["x0"]]);
        assert!((template_complexity(&t, 50.0) - 0.04).abs() < 1e-15);
        let t = template(&[&["x1"], &["x0"]]);
        assert!((template_complexity(&t, 50.0) - 0.08).abs() < 1e-15);
        // 5-node tree {mul, pow, x0, 2, x0} + coefficient slot = 6 nodes
        let t = template(&[&["x0^2*x0"]]);
        assert!((template_complexity(&t, 50.0) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn complexity_strictly_monotone_under_added_feature() {
        let t = template(&[&["x0"], &["x0", "x1"]]);
        let bigger = template(&[&["x0", "sin(x1)"], &["x0", "x1"]]);
        assert!(
            template_complexity(&bigger, 50.0) > template_complexity(&t, 50.0)
        );
    }

    #[test]
    fn evaluate_features_matches_hand_columns() {
        let t = template(&[&["x0", "x0^2"]]);
        let states = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let m = evaluate_features(&t, &states, None, &[0.0, 0.1, 0.2]).unwrap();
        assert_eq!(m[0].column(0).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(m[0].column(1).as_slice(), &[1.0, 4.0, 9.0]);
    }

    #[test]
    fn evaluate_features_reports_domain_violation() {
        let t = template(&[&["log(x0)"]]);
        let states = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let err = evaluate_features(&t, &states, None, &[0.0, 0.1]).unwrap_err();
        assert!(matches!(
            err,
            EvalError::Evaluation {
                state: 0,
                feature: 0,
                sample: 1,
                ..
            }
        ));
    }

    #[test]
    fn evaluate_features_exp_scalar_oracle() {
        let t = template(&[&["exp(-0.5*x0)"]]);
        let states = DMatrix::from_column_slice(1, 1, &[2.0]);
        let m = evaluate_features(&t, &states, None, &[0.0]).unwrap();
        assert!((m[0][(0, 0)] - 0.367_879_441_171_442_33).abs() < 1e-12);
    }

    #[test]
    fn document_round_trip() {
        let doc = r#"{ "equations": [ { "state": 0, "features": ["x1", "x0^2*x1"] }, { "state": 1, "features": ["x0"] } ] }"#;
        let t = EquationTemplate::from_document(doc, 2, 0).unwrap();
        assert_eq!(t.features(0).len(), 2);
        let round = EquationTemplate::from_document(&t.to_document(), 2, 0).unwrap();
        assert_eq!(t.signature(), round.signature());
    }

    #[test]
    fn document_with_placeholder_strips_coefficient() {
        let doc = r#"{"equations":[{"state":0,"features":["c0*x0","3.7"]}]}"#;
        let t = EquationTemplate::from_document(doc, 1, 0).unwrap();
        assert_eq!(t.features(0)[0], Expr::state(0));
        assert_eq!(t.features(0)[1], Expr::Const(1.0));
    }

    #[test]
    fn document_with_nested_placeholder_is_linearity_violation() {
        let doc = r#"{"equations":[{"state":0,"features":["exp(c0*x0)"]}]}"#;
        assert!(matches!(
            EquationTemplate::from_document(doc, 1, 0),
            Err(TemplateError::LinearityViolation { state: 0, .. })
        ));
    }

    #[test]
    fn document_referencing_missing_state_is_rejected() {
        let doc = r#"{"equations":[{"state":0,"features":["x5"]}]}"#;
        assert!(matches!(
            EquationTemplate::from_document(doc, 2, 0),
            Err(TemplateError::Malformed(_)) | Err(TemplateError::Grammar { .. })
        ));
    }

    #[test]
    fn valid_template_never_hits_unknown_symbols_in_evaluation() {
        // validate_template(t) = ok implies evaluate_features sees no
        // unknown-symbol errors on in-range data
        let t = template(&[&["x0", "x1", "x0*x1", "sin(x0)"], &["x1", "exp(-1*x0)"]]);
        validate_template(&t, 8).unwrap();
        let states = DMatrix::from_fn(12, 2, |r, c| 0.1 * (r as f64) + 0.05 * (c as f64) + 0.2);
        let times: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        evaluate_features(&t, &states, None, &times).unwrap();
    }
}
