//! Seeded random-mutation baseline proposer.
//!
//! Each candidate is one structural edit of the current best template: add,
//! drop or swap a single feature, drawn from the prior-preferred families of
//! the focused state (falling back to optional families, never discouraged
//! ones). Fixed seed, fixed batches.

use super::{ProposalBatch, ProposalRequest, ProposeError, Proposer};
use crate::characterize::{feature_family, Preference, PriorSpec};
use crate::grammar::{canonical_signature, EquationTemplate, Expr, UnaryOp};
use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};

pub struct MutationProposer {
    name: String,
    rng: ChaCha8Rng,
}

impl MutationProposer {
    pub fn new(seed: u64) -> Self {
        MutationProposer {
            name: format!("mutate:{seed}"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Candidate features for one state, restricted to families not discouraged
/// by the priors; preferred families come first so low indices are drawn
/// most often.
fn feature_pool(dim: usize, input_dim: usize, state: usize, priors: &PriorSpec) -> Vec<Expr> {
    let mut preferred = Vec::new();
    let mut optional = Vec::new();
    let push = |expr: Expr, lists: (&mut Vec<Expr>, &mut Vec<Expr>), priors: &PriorSpec| {
        let family = feature_family(&expr);
        match priors.preference(state, family) {
            Preference::Preferred => lists.0.push(expr),
            Preference::Optional => lists.1.push(expr),
            Preference::Discouraged => {}
        }
    };
    for i in 0..dim {
        push(Expr::state(i), (&mut preferred, &mut optional), priors);
        push(
            Expr::pow(Expr::state(i), 2.0),
            (&mut preferred, &mut optional),
            priors,
        );
        push(
            Expr::unary(UnaryOp::Sin, Expr::state(i)),
            (&mut preferred, &mut optional),
            priors,
        );
        push(
            Expr::unary(UnaryOp::Cos, Expr::state(i)),
            (&mut preferred, &mut optional),
            priors,
        );
        for rate in [-1.0, -0.5, 0.5, 1.0] {
            push(
                Expr::unary(
                    UnaryOp::Exp,
                    Expr::mul(Expr::constant(rate), Expr::state(i)),
                ),
                (&mut preferred, &mut optional),
                priors,
            );
        }
        for j in (i + 1)..dim {
            push(
                Expr::mul(Expr::state(i), Expr::state(j)),
                (&mut preferred, &mut optional),
                priors,
            );
        }
    }
    for j in 0..input_dim {
        push(Expr::input(j), (&mut preferred, &mut optional), priors);
    }
    push(Expr::constant(1.0), (&mut preferred, &mut optional), priors);
    preferred.extend(optional);
    preferred
}

impl Proposer for MutationProposer {
    fn name(&self) -> &str {
        &self.name
    }

    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<ProposalBatch, ProposeError> {
        let ctx = request.ctx;
        let base = match &ctx.current_best {
            Some(best) => best.template.clone(),
            None => {
                // no best yet: mutate the minimal linear coupling
                let eqs = (0..ctx.dim)
                    .map(|_| (0..ctx.dim).map(Expr::state).collect())
                    .collect();
                EquationTemplate::new(ctx.dim, ctx.input_dim, eqs)
                    .map_err(|e| ProposeError::MalformedResponse(e.to_string()))?
            }
        };
        let mut candidates = Vec::with_capacity(request.count);
        for _ in 0..request.count {
            let mut equations: Vec<Vec<Expr>> =
                base.equations().iter().map(Clone::clone).collect();
            // bias edits toward the error focus, otherwise any state
            let state = if self.rng.random_bool(0.5) {
                ctx.error_focus.min(ctx.dim - 1)
            } else {
                self.rng.random_range(0..ctx.dim)
            };
            let pool = feature_pool(ctx.dim, ctx.input_dim, state, &ctx.priors);
            let eq = &mut equations[state];
            let op = self.rng.random_range(0..3u8);
            let existing: Vec<String> = eq
                .iter()
                .map(|f| canonical_signature(f).as_str().to_string())
                .collect();
            let fresh: Vec<&Expr> = pool
                .iter()
                .filter(|f| !existing.contains(&canonical_signature(f).as_str().to_string()))
                .collect();
            match op {
                // add
                0 if !fresh.is_empty() && eq.len() < ctx.max_terms => {
                    let pick = self.rng.random_range(0..fresh.len());
                    eq.push(fresh[pick].clone());
                }
                // drop
                1 if eq.len() > 1 => {
                    let pick = self.rng.random_range(0..eq.len());
                    eq.remove(pick);
                }
                // swap
                _ if !fresh.is_empty() => {
                    let out = self.rng.random_range(0..eq.len());
                    let pick = self.rng.random_range(0..fresh.len());
                    eq[out] = fresh[pick].clone();
                }
                _ => {}
            }
            match EquationTemplate::new(ctx.dim, ctx.input_dim, equations) {
                Ok(t) => candidates.push(t.to_document()),
                Err(_) => candidates.push(base.to_document()),
            }
        }
        Ok(ProposalBatch {
            candidates,
            diversity: request.diversity,
            proposer: self.name.clone(),
        })
    }
}
