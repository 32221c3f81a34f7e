//! The refinement loop: baseline fit with trust labels, seed model, the
//! propose → validate → fit → simulate → score cycle, multi-objective
//! selection, plateau-driven exploration, early stopping and the baseline
//! safeguard.

use crate::characterize::{
    derive_priors, prior_penalty, summarize_training_segment, PriorSpec,
};
use crate::grammar::{
    template_complexity, validate_template, EquationTemplate, Expr, GrammarError, TemplateError,
    UnaryOp,
};
use crate::propose::{
    build_prompt, diagnose_rollout, novelty_filter, BaselineInfo, BestInfo, PromptContext,
    ProposalRequest, ProposeError, Proposer, RejectReason, RejectionMemory,
};
use crate::regress::{
    estimate_derivatives, fit_model_sweeps, r_squared, FittedModel, RegressError, Trajectory,
    TrajectoryMeta,
};
use crate::simulate::{score_rollout, RolloutOutcome, RolloutResult, SimConfig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

/// Derivative-fit R² at or above which a baseline equation may be trusted.
pub const TRUST_R2_MIN: f64 = 0.95;
/// Rollout NRMSE at or below which a baseline equation may be trusted.
pub const TRUST_NRMSE_MAX: f64 = 0.2;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Fit(#[from] RegressError),
    #[error("template construction: {0}")]
    Template(#[from] TemplateError),
}

/// Composition of the fixed broad baseline dictionary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    /// Monomials over states and inputs up to this total degree.
    pub poly_degree: usize,
    /// Include sin/cos of each state.
    pub trig: bool,
    /// Include exp(±r·x) for each rate and state.
    pub exp_grid: bool,
    pub exp_rates: Vec<f64>,
    /// Include the constant feature 1.
    pub constant: bool,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig {
            poly_degree: 3,
            trig: true,
            exp_grid: true,
            exp_rates: vec![0.25, 0.5, 1.0, 2.0],
            constant: true,
        }
    }
}

/// Build the fixed broad dictionary: monomials up to the configured total
/// degree over states and inputs (pairwise bilinear cross terms included),
/// sin/cos of each state, an exp grid over each state, and the constant 1.
pub fn baseline_dictionary(
    dim: usize,
    input_dim: usize,
    cfg: &DictionaryConfig,
) -> Result<EquationTemplate, TemplateError> {
    let nvars = dim + input_dim;
    let var = |v: usize| -> Expr {
        if v < dim {
            Expr::state(v)
        } else {
            Expr::input(v - dim)
        }
    };
    let mut features: Vec<Expr> = Vec::new();
    // multisets of variables with 1 <= |multiset| <= degree, lexicographic
    let mut stack: Vec<Vec<usize>> = (0..nvars).map(|v| vec![v]).collect();
    stack.reverse();
    let mut monomials: Vec<Vec<usize>> = Vec::new();
    while let Some(combo) = stack.pop() {
        if combo.len() < cfg.poly_degree {
            for v in (*combo.last().unwrap()..nvars).rev() {
                let mut next = combo.clone();
                next.push(v);
                stack.push(next);
            }
        }
        monomials.push(combo);
    }
    monomials.sort_by_key(|m| (m.len(), m.clone()));
    for combo in monomials {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for v in combo {
            *counts.entry(v).or_insert(0) += 1;
        }
        let mut factors = counts.into_iter().map(|(v, c)| {
            if c == 1 {
                var(v)
            } else {
                Expr::pow(var(v), c as f64)
            }
        });
        let first = factors.next().unwrap();
        features.push(factors.fold(first, Expr::mul));
    }
    if cfg.trig {
        for i in 0..dim {
            features.push(Expr::unary(UnaryOp::Sin, Expr::state(i)));
            features.push(Expr::unary(UnaryOp::Cos, Expr::state(i)));
        }
    }
    if cfg.exp_grid {
        for i in 0..dim {
            for &r in &cfg.exp_rates {
                for sign in [1.0, -1.0] {
                    features.push(Expr::unary(
                        UnaryOp::Exp,
                        Expr::mul(Expr::constant(sign * r), Expr::state(i)),
                    ));
                }
            }
        }
    }
    if cfg.constant {
        features.push(Expr::constant(1.0));
    }
    let equations = vec![features; dim];
    EquationTemplate::new(dim, input_dim, equations)
}

/// Minimal linear seed: every derivative starts from the full linear coupling
/// over states.
pub fn seed_template(dim: usize, input_dim: usize) -> EquationTemplate {
    let eqs = (0..dim)
        .map(|_| (0..dim).map(Expr::state).collect())
        .collect();
    EquationTemplate::new(dim, input_dim, eqs).expect("seed template")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrustLabel {
    Reliable,
    Unreliable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub model: FittedModel,
    /// Per-state derivative-fit R² on the training segment.
    pub train_r2: Vec<Option<f64>>,
    /// Per-state derivative-fit R² on the test segment.
    pub test_r2: Vec<Option<f64>>,
    pub rollout: RolloutResult,
    pub trust: Vec<TrustLabel>,
}

impl BaselineReport {
    pub fn all_reliable(&self) -> bool {
        self.trust.iter().all(|t| *t == TrustLabel::Reliable)
    }
}

/// Fit the fixed broad dictionary, score its rollout and assign per-state
/// trust labels: reliable iff the training derivative fit reaches
/// [`TRUST_R2_MIN`], the state's rollout NRMSE stays at or below
/// [`TRUST_NRMSE_MAX`] and the rollout completed.
pub fn run_baseline(
    traj: &Trajectory,
    dictionary: &EquationTemplate,
    stlsq_threshold: f64,
    sim: &SimConfig,
) -> Result<BaselineReport, RefineError> {
    let model = fit_model_sweeps(dictionary, traj, stlsq_threshold, 10)?;
    let rollout = score_rollout(&model, traj, sim);
    let train_r2 = model.diagnostics.iter().map(|d| d.train_r2).collect();
    let test_r2 = test_derivative_r2(&model, traj);
    let trust = (0..traj.dim())
        .map(|i| {
            let r2_ok = model.diagnostics[i].train_r2.is_some_and(|v| v >= TRUST_R2_MIN);
            let nrmse_ok = rollout.completed() && rollout.nrmse[i] <= TRUST_NRMSE_MAX;
            if r2_ok && nrmse_ok {
                TrustLabel::Reliable
            } else {
                TrustLabel::Unreliable
            }
        })
        .collect();
    Ok(BaselineReport {
        model,
        train_r2,
        test_r2,
        rollout,
        trust,
    })
}

/// Derivative-level fit quality on the held-out segment (diagnostic only;
/// rollout accuracy decides selection).
fn test_derivative_r2(model: &FittedModel, traj: &Trajectory) -> Vec<Option<f64>> {
    let split = traj.split_index();
    let n_test = traj.len() - split;
    let test_states = traj.test_states();
    let test_inputs = traj
        .inputs()
        .map(|u| u.rows(split, n_test).into_owned());
    let derivs = estimate_derivatives(traj);
    let mats = match crate::grammar::evaluate_features(
        &model.template,
        &test_states,
        test_inputs.as_ref(),
        traj.test_times(),
    ) {
        Ok(m) => m,
        Err(_) => return vec![None; traj.dim()],
    };
    (0..traj.dim())
        .map(|i| {
            let coefs = nalgebra::DVector::from_vec(model.coefficients[i].clone());
            let predicted = &mats[i] * &coefs;
            let actual: Vec<f64> = (split..traj.len()).map(|r| derivs[(r, i)]).collect();
            r_squared(predicted.as_slice(), &actual).ok()
        })
        .collect()
}

/// Multi-objective candidate score; the aggregate is
/// `max_nrmse + lambda_c * complexity + lambda_p * prior_penalty`, forced to
/// `+inf` when the rollout did not complete.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateScore {
    #[serde(with = "crate::num_serde::inf_f64_vec")]
    pub nrmse: Vec<f64>,
    #[serde(with = "crate::num_serde::inf_f64")]
    pub max_nrmse: f64,
    pub complexity: f64,
    pub prior_penalty: f64,
    #[serde(with = "crate::num_serde::inf_f64")]
    pub aggregate: f64,
    pub outcome: RolloutOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// Early-stop threshold on the best candidate's max test NRMSE.
    pub tau: f64,
    pub max_iterations: usize,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub plateau_window: usize,
    /// Minimum relative improvement over the window to avoid plateau mode.
    pub plateau_epsilon: f64,
    pub base_candidates: usize,
    pub plateau_candidates: usize,
    pub base_diversity: f64,
    pub plateau_diversity: f64,
    pub max_terms: usize,
    pub stlsq_threshold: f64,
    pub stlsq_sweeps: usize,
    pub complexity_normalizer: f64,
    pub rejection_memory: usize,
    /// Absolute NRMSE margin for the baseline safeguard.
    pub safeguard_margin: f64,
    pub sim: SimConfig,
    pub dictionary: DictionaryConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            tau: 0.1,
            max_iterations: 10,
            lambda_c: 0.1,
            lambda_p: 0.1,
            plateau_window: 3,
            plateau_epsilon: 0.02,
            base_candidates: 4,
            plateau_candidates: 8,
            base_diversity: 0.3,
            plateau_diversity: 0.9,
            max_terms: 8,
            stlsq_threshold: 0.05,
            stlsq_sweeps: 10,
            complexity_normalizer: 50.0,
            rejection_memory: 20,
            safeguard_margin: 0.05,
            sim: SimConfig::default(),
            dictionary: DictionaryConfig::default(),
        }
    }
}

/// State with the largest normalized test error; ties break to the lowest
/// index.
pub fn select_error_focus(score: &CandidateScore) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in score.nrmse.iter().enumerate() {
        if *v > best_v {
            best_v = *v;
            best = i;
        }
    }
    best
}

/// True when the last `window` best-J values improved by less than `epsilon`
/// relative to the window start. Histories pinned at `+inf` count as a
/// plateau (exploration is the only way out); a best of zero cannot improve
/// further and also counts.
pub fn detect_plateau(history: &[f64], window: usize, epsilon: f64) -> bool {
    if history.len() < window || window == 0 {
        return false;
    }
    let slice = &history[history.len() - window..];
    let first = slice[0];
    let last = slice[slice.len() - 1];
    if first.is_infinite() {
        return last.is_infinite();
    }
    if first <= 0.0 {
        return true;
    }
    (first - last) / first < epsilon
}

/// Compose rollout accuracy, complexity and prior consistency into the
/// aggregate score.
pub fn score_candidate(
    model: &FittedModel,
    traj: &Trajectory,
    priors: &PriorSpec,
    cfg: &LoopConfig,
) -> CandidateScore {
    score_candidate_full(model, traj, priors, cfg).0
}

pub(crate) fn score_candidate_full(
    model: &FittedModel,
    traj: &Trajectory,
    priors: &PriorSpec,
    cfg: &LoopConfig,
) -> (CandidateScore, RolloutResult) {
    let rollout = score_rollout(model, traj, &cfg.sim);
    let score = compose_score(&model.template, &rollout, priors, cfg);
    (score, rollout)
}

pub(crate) fn compose_score(
    template: &EquationTemplate,
    rollout: &RolloutResult,
    priors: &PriorSpec,
    cfg: &LoopConfig,
) -> CandidateScore {
    let complexity = template_complexity(template, cfg.complexity_normalizer);
    let penalty = prior_penalty(template, priors);
    let aggregate = if rollout.completed() {
        rollout.max_nrmse + cfg.lambda_c * complexity + cfg.lambda_p * penalty
    } else {
        f64::INFINITY
    };
    CandidateScore {
        nrmse: rollout.nrmse.clone(),
        max_nrmse: rollout.max_nrmse,
        complexity,
        prior_penalty: penalty,
        aggregate,
        outcome: rollout.outcome,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    BudgetExhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum CandidateStatus {
    Rejected(RejectReason),
    Evaluated,
    Accepted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub raw: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub signature: Option<String>,
    pub status: CandidateStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<CandidateScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub plateau: bool,
    pub requested: usize,
    pub diversity: f64,
    pub error_focus: usize,
    pub prompt: String,
    pub proposer: String,
    pub candidates: Vec<CandidateRecord>,
    #[serde(with = "crate::num_serde::inf_f64")]
    pub best_j_after: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proposer_failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementResult {
    pub best_model: FittedModel,
    pub best_score: CandidateScore,
    pub stop_reason: StopReason,
    pub safeguard_applied: bool,
    pub baseline: BaselineReport,
    pub baseline_score: CandidateScore,
    pub seed_model: FittedModel,
    pub seed_score: CandidateScore,
    pub iterations: Vec<IterationRecord>,
}

impl RefinementResult {
    pub fn iterations_run(&self) -> usize {
        self.iterations.len()
    }
}

struct Best {
    model: FittedModel,
    score: CandidateScore,
    rollout: RolloutResult,
}

fn reason_for(err: &TemplateError) -> RejectReason {
    match err {
        TemplateError::Grammar { source, .. } => match source {
            GrammarError::Syntax(_) => RejectReason::Syntax,
            GrammarError::DisallowedSymbol(_) => RejectReason::DisallowedSymbol,
            GrammarError::DisallowedForm(_) => RejectReason::Syntax,
        },
        TemplateError::TooManyTerms { .. } => RejectReason::TooManyTerms,
        TemplateError::DuplicateFeature { .. } => RejectReason::Duplicate,
        TemplateError::LinearityViolation { .. } => RejectReason::Linearity,
        TemplateError::Malformed(_) => RejectReason::Syntax,
    }
}

fn short_label(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    let mut label: String = cleaned.chars().take(80).collect();
    if cleaned.chars().count() > 80 {
        label.push_str("...");
    }
    label
}

/// Run the full refinement loop. A proposer failure mid-run ends the loop
/// with the current best (`BudgetExhausted`); a malformed response costs one
/// iteration. The safeguard replaces a materially worse final candidate with
/// the baseline when every baseline equation is trusted.
pub fn refine(
    traj: &Trajectory,
    meta: &TrajectoryMeta,
    system_name: &str,
    proposer: &mut dyn Proposer,
    cfg: &LoopConfig,
) -> Result<RefinementResult, RefineError> {
    let dim = traj.dim();
    let input_dim = traj.input_dim();

    let dictionary = baseline_dictionary(dim, input_dim, &cfg.dictionary)?;
    let baseline = run_baseline(traj, &dictionary, cfg.stlsq_threshold, &cfg.sim)?;

    let summary = summarize_training_segment(traj);
    let priors = derive_priors(&summary);

    let seed = seed_template(dim, input_dim);
    let seed_model = fit_model_sweeps(&seed, traj, cfg.stlsq_threshold, cfg.stlsq_sweeps)?;
    let (seed_score, seed_rollout) = score_candidate_full(&seed_model, traj, &priors, cfg);

    let baseline_score = compose_score(&dictionary, &baseline.rollout, &priors, cfg);

    let mut history: HashSet<String> = HashSet::new();
    history.insert(dictionary.signature());
    history.insert(seed.signature());

    let mut best = Best {
        model: seed_model.clone(),
        score: seed_score.clone(),
        rollout: seed_rollout,
    };
    let mut best_j_series = vec![best.score.aggregate];
    let mut memory = RejectionMemory::new(cfg.rejection_memory);
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut stop_reason = StopReason::BudgetExhausted;

    let test_states = traj.test_states();

    for iteration in 1..=cfg.max_iterations {
        let plateau = detect_plateau(&best_j_series, cfg.plateau_window, cfg.plateau_epsilon);
        let requested = if plateau {
            cfg.plateau_candidates
        } else {
            cfg.base_candidates
        };
        let diversity = if plateau {
            cfg.plateau_diversity
        } else {
            cfg.base_diversity
        };

        let (error_focus, focus_nrmse) = if best.score.outcome == RolloutOutcome::Completed {
            let f = select_error_focus(&best.score);
            (f, best.score.nrmse[f])
        } else if baseline.rollout.completed() {
            let f = select_error_focus(&baseline_score);
            (f, f64::INFINITY)
        } else {
            (0, f64::INFINITY)
        };

        let diagnostics = match (&best.rollout.states, best.rollout.completed()) {
            (Some(states), true) => diagnose_rollout(states, &test_states, traj.test_times()),
            _ => Vec::new(),
        };

        let ctx = PromptContext {
            system_name: system_name.to_string(),
            dim,
            input_dim,
            state_names: meta.state_names.clone(),
            input_names: meta.input_names.clone(),
            units: meta.units.clone(),
            known_params: BTreeMap::new(),
            summary: summary.clone(),
            current_best: Some(BestInfo {
                template: best.model.template.clone(),
                coefficients: best.model.coefficients.clone(),
                nrmse: best.score.nrmse.clone(),
            }),
            baseline: Some(BaselineInfo {
                equations: baseline.model.render_equations(),
                reliable: baseline
                    .trust
                    .iter()
                    .map(|t| *t == TrustLabel::Reliable)
                    .collect(),
                nrmse: baseline.rollout.nrmse.clone(),
            }),
            priors: priors.clone(),
            error_focus,
            focus_nrmse,
            diagnostics,
            rejections: memory.clone(),
            max_terms: cfg.max_terms,
            requested,
        };
        let prompt = build_prompt(&ctx);

        let request = ProposalRequest {
            prompt: &prompt,
            ctx: &ctx,
            count: requested,
            diversity,
        };
        let batch = match proposer.propose(&request) {
            Ok(b) => b,
            Err(ProposeError::MalformedResponse(msg)) => {
                iterations.push(IterationRecord {
                    iteration,
                    plateau,
                    requested,
                    diversity,
                    error_focus,
                    prompt,
                    proposer: proposer.name().to_string(),
                    candidates: Vec::new(),
                    best_j_after: best.score.aggregate,
                    proposer_failure: Some(format!("malformed response: {msg}")),
                });
                best_j_series.push(best.score.aggregate);
                continue;
            }
            Err(ProposeError::ProposerUnavailable(msg)) => {
                iterations.push(IterationRecord {
                    iteration,
                    plateau,
                    requested,
                    diversity,
                    error_focus,
                    prompt,
                    proposer: proposer.name().to_string(),
                    candidates: Vec::new(),
                    best_j_after: best.score.aggregate,
                    proposer_failure: Some(format!("proposer unavailable: {msg}")),
                });
                stop_reason = StopReason::BudgetExhausted;
                break;
            }
        };

        // grammar and validation gates run in candidate order
        let mut records: Vec<CandidateRecord> = Vec::with_capacity(batch.candidates.len());
        let mut gated: Vec<(usize, EquationTemplate)> = Vec::new();
        for (index, raw) in batch.candidates.iter().enumerate() {
            match EquationTemplate::from_document(raw, dim, input_dim) {
                Ok(template) => match validate_template(&template, cfg.max_terms) {
                    Ok(()) => {
                        records.push(CandidateRecord {
                            index,
                            raw: raw.clone(),
                            signature: Some(template.signature()),
                            status: CandidateStatus::Evaluated, // provisional
                            score: None,
                        });
                        gated.push((index, template));
                    }
                    Err(err) => records.push(CandidateRecord {
                        index,
                        raw: raw.clone(),
                        signature: Some(template.signature()),
                        status: CandidateStatus::Rejected(reason_for(&err)),
                        score: None,
                    }),
                },
                Err(err) => records.push(CandidateRecord {
                    index,
                    raw: raw.clone(),
                    signature: None,
                    status: CandidateStatus::Rejected(reason_for(&err)),
                    score: None,
                }),
            }
        }

        let (novel, duplicates) = novelty_filter(gated, &history);
        for (index, _sig, reason) in &duplicates {
            let rec = records.iter_mut().find(|r| r.index == *index).unwrap();
            rec.status = CandidateStatus::Rejected(*reason);
        }

        // every structure that reaches evaluation is remembered
        for (_, template) in &novel {
            history.insert(template.signature());
        }

        // fit + simulate + score fan out per candidate; results merge back in
        // candidate order so parallelism never changes selection
        let scored: Vec<(usize, Result<(FittedModel, CandidateScore, RolloutResult), RejectReason>)> =
            crate::par::map_ordered(novel, |(index, template)| {
                let outcome = match fit_model_sweeps(
                    &template,
                    traj,
                    cfg.stlsq_threshold,
                    cfg.stlsq_sweeps,
                ) {
                    Ok(model) => {
                        let (score, rollout) = score_candidate_full(&model, traj, &priors, cfg);
                        if score.outcome == RolloutOutcome::Completed {
                            Ok((model, score, rollout))
                        } else {
                            Err(RejectReason::RolloutDivergence)
                        }
                    }
                    Err(_) => Err(RejectReason::FitFailure),
                };
                (index, outcome)
            });

        for (index, outcome) in scored {
            let rec_pos = records.iter().position(|r| r.index == index).unwrap();
            match outcome {
                Ok((model, score, rollout)) => {
                    records[rec_pos].score = Some(score.clone());
                    if score.aggregate < best.score.aggregate {
                        records[rec_pos].status = CandidateStatus::Accepted;
                        best = Best {
                            model,
                            score,
                            rollout,
                        };
                    } else {
                        records[rec_pos].status = CandidateStatus::Evaluated;
                    }
                }
                Err(reason) => {
                    records[rec_pos].status = CandidateStatus::Rejected(reason);
                }
            }
        }

        // rejections feed the prompt memory in candidate order
        for rec in &records {
            if let CandidateStatus::Rejected(reason) = rec.status {
                let label = rec
                    .signature
                    .clone()
                    .unwrap_or_else(|| short_label(&rec.raw));
                memory.push(label, reason);
            }
        }

        best_j_series.push(best.score.aggregate);
        iterations.push(IterationRecord {
            iteration,
            plateau,
            requested,
            diversity,
            error_focus,
            prompt,
            proposer: batch.proposer.clone(),
            candidates: records,
            best_j_after: best.score.aggregate,
            proposer_failure: None,
        });

        if best.score.max_nrmse < cfg.tau {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    // safeguard: never return a model materially worse than a fully trusted
    // baseline
    let mut safeguard_applied = false;
    let mut best_model = best.model;
    let mut best_score = best.score;
    if baseline.all_reliable()
        && best_score.max_nrmse > baseline.rollout.max_nrmse + cfg.safeguard_margin
    {
        safeguard_applied = true;
        best_model = baseline.model.clone();
        best_score = baseline_score.clone();
    }

    Ok(RefinementResult {
        best_model,
        best_score,
        stop_reason,
        safeguard_applied,
        baseline,
        baseline_score,
        seed_model,
        seed_score,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn plateau_boundary_case_from_hand_arithmetic() {
        // (0.5 - 0.488) / 0.5 = 0.024 >= 0.02: improving enough, no plateau
        assert!(!detect_plateau(&[0.5, 0.49, 0.488], 3, 0.02));
        // large improvement
        assert!(!detect_plateau(&[0.5, 0.3, 0.2], 3, 0.02));
        // warm-up: fewer entries than the window
        assert!(!detect_plateau(&[0.5, 0.49], 3, 0.02));
        // genuine plateau
        assert!(detect_plateau(&[0.5, 0.499, 0.498], 3, 0.02));
        // stuck at +inf counts as plateau; escaping it does not
        assert!(detect_plateau(
            &[f64::INFINITY, f64::INFINITY, f64::INFINITY],
            3,
            0.02
        ));
        assert!(!detect_plateau(&[f64::INFINITY, f64::INFINITY, 0.4], 3, 0.02));
        // a zero best cannot improve
        assert!(detect_plateau(&[0.0, 0.0, 0.0], 3, 0.02));
    }

    #[test]
    fn error_focus_argmax_with_tie_break() {
        let mut score = CandidateScore {
            nrmse: vec![0.01, 0.5],
            max_nrmse: 0.5,
            complexity: 0.0,
            prior_penalty: 0.0,
            aggregate: 0.5,
            outcome: RolloutOutcome::Completed,
        };
        assert_eq!(select_error_focus(&score), 1);
        score.nrmse = vec![0.3, 0.3];
        assert_eq!(select_error_focus(&score), 0);
        score.nrmse = vec![0.2];
        assert_eq!(select_error_focus(&score), 0);
    }

    #[test]
    fn dictionary_contents_for_two_states() {
        let dict = baseline_dictionary(2, 0, &DictionaryConfig::default()).unwrap();
        // monomials of degree <= 3 over 2 vars: 9; trig: 4; exp grid: 16; 1
        assert_eq!(dict.features(0).len(), 9 + 4 + 16 + 1);
        assert_eq!(dict.features(0).len(), dict.features(1).len());
        let rendered: Vec<String> = dict.features(0).iter().map(|f| f.to_string()).collect();
        for expected in [
            "x0", "x1", "x0*x1", "x0^2", "x1^3", "x0^2*x1", "sin(x0)", "cos(x1)",
            "exp(-0.5*x0)", "exp(2*x1)", "1",
        ] {
            assert!(
                rendered.iter().any(|r| r == expected),
                "missing {expected}: {rendered:?}"
            );
        }
        // no duplicates
        crate::grammar::validate_template(&dict, usize::MAX).unwrap();
    }

    #[test]
    fn dictionary_includes_inputs_in_monomials_only() {
        let dict = baseline_dictionary(1, 1, &DictionaryConfig::default()).unwrap();
        let rendered: Vec<String> = dict.features(0).iter().map(|f| f.to_string()).collect();
        assert!(rendered.iter().any(|r| r == "u0"));
        assert!(rendered.iter().any(|r| r == "x0*u0"));
        assert!(!rendered.iter().any(|r| r.contains("sin(u") || r.contains("exp(u")));
    }

    #[test]
    fn score_composition_matches_formula() {
        let cfg = LoopConfig::default();
        let priors = PriorSpec::neutral(1);
        let template = seed_template(1, 0);
        let rollout = RolloutResult {
            outcome: RolloutOutcome::Completed,
            states: None,
            nrmse: vec![0.02],
            max_nrmse: 0.02,
        };
        let score = compose_score(&template, &rollout, &priors, &cfg);
        let expected = 0.02 + 0.1 * template_complexity(&template, 50.0);
        assert!((score.aggregate - expected).abs() < 1e-15);

        let failed = RolloutResult {
            outcome: RolloutOutcome::Diverged,
            states: None,
            nrmse: vec![f64::INFINITY],
            max_nrmse: f64::INFINITY,
        };
        let score = compose_score(&template, &failed, &priors, &cfg);
        assert_eq!(score.aggregate, f64::INFINITY);
    }

    #[test]
    fn extra_feature_strictly_increases_aggregate_at_equal_nrmse() {
        let cfg = LoopConfig::default();
        let priors = PriorSpec::neutral(2);
        let small = seed_template(2, 0);
        let big = EquationTemplate::new(
            2,
            0,
            vec![
                vec![Expr::state(0), Expr::state(1), Expr::pow(Expr::state(0), 2.0)],
                vec![Expr::state(0), Expr::state(1)],
            ],
        )
        .unwrap();
        let rollout = RolloutResult {
            outcome: RolloutOutcome::Completed,
            states: None,
            nrmse: vec![0.05, 0.04],
            max_nrmse: 0.05,
        };
        let s_small = compose_score(&small, &rollout, &priors, &cfg);
        let s_big = compose_score(&big, &rollout, &priors, &cfg);
        assert!(s_big.aggregate > s_small.aggregate);
    }

    #[test]
    fn baseline_trust_labels_on_dictionary_resident_system() {
        // data generated by a dictionary-resident sparse model: dx = -0.5 x
        let n = 200;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.02).collect();
        let states = DMatrix::from_fn(n, 1, |r, _| (-0.5 * times[r]).exp());
        let traj = Trajectory::new(times, states, None, 140).unwrap();
        let dict = baseline_dictionary(1, 0, &DictionaryConfig::default()).unwrap();
        let report = run_baseline(&traj, &dict, 0.05, &SimConfig::default()).unwrap();
        assert!(report.all_reliable(), "trust: {:?}", report.trust);
        assert!(report.rollout.completed());
        assert!(report.rollout.max_nrmse < 0.05);
    }
}
