//! Candidate generation behind a pluggable proposer interface.
//!
//! A proposer receives the rendered prompt (plus the structured context it
//! was built from) and returns raw candidate texts — template documents in
//! the grammar's serialization. Three implementations ship: a remote
//! chat-completion client, a deterministic scripted replay, and a seeded
//! random-mutation baseline.

mod mutate;
mod prompt;
mod remote;
mod replay;

pub use mutate::MutationProposer;
pub use prompt::{
    build_prompt, diagnose_rollout, BaselineInfo, BestInfo, PromptContext, StateDiagnostics,
    SECTION_HEADERS,
};
pub use remote::{RemoteConfig, RemoteProposer};
pub use replay::{ReplayFile, ReplayProposer};

use crate::grammar::EquationTemplate;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProposeError {
    #[error("proposer unavailable: {0}")]
    ProposerUnavailable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// One proposal round: the rendered prompt plus the context it came from.
pub struct ProposalRequest<'a> {
    pub prompt: &'a str,
    pub ctx: &'a PromptContext,
    pub count: usize,
    pub diversity: f64,
}

/// Ordered raw candidate texts from one proposer call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalBatch {
    pub candidates: Vec<String>,
    pub diversity: f64,
    pub proposer: String,
}

pub trait Proposer {
    fn name(&self) -> &str;
    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<ProposalBatch, ProposeError>;
}

/// Closed rejection-reason vocabulary; replay files and prompts depend on
/// these strings staying stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Syntax,
    DisallowedSymbol,
    Linearity,
    TooManyTerms,
    Duplicate,
    FitFailure,
    RolloutDivergence,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectReason::Syntax => "syntax",
            RejectReason::DisallowedSymbol => "disallowed symbol",
            RejectReason::Linearity => "linearity",
            RejectReason::TooManyTerms => "too many terms",
            RejectReason::Duplicate => "previously tested",
            RejectReason::FitFailure => "fit failure",
            RejectReason::RolloutDivergence => "rollout divergence",
        };
        f.write_str(s)
    }
}

/// Bounded memory of recently rejected candidates, oldest dropped first.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectionMemory {
    capacity: usize,
    entries: Vec<(String, RejectReason)>,
}

impl RejectionMemory {
    pub fn new(capacity: usize) -> Self {
        RejectionMemory {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, label: String, reason: RejectReason) {
        self.entries.push((label, reason));
        if self.entries.len() > self.capacity {
            let excess = self.entries.len() - self.capacity;
            self.entries.drain(0..excess);
        }
    }

    pub fn entries(&self) -> &[(String, RejectReason)] {
        &self.entries
    }
}

/// Drop templates whose template-level signature was already tested.
/// Within-batch repeats are dropped the same way so one round never evaluates
/// the same structure twice. Returns survivors and per-rejection reasons,
/// both carrying the original batch index.
pub fn novelty_filter(
    batch: Vec<(usize, EquationTemplate)>,
    history: &HashSet<String>,
) -> (
    Vec<(usize, EquationTemplate)>,
    Vec<(usize, String, RejectReason)>,
) {
    let mut seen: HashSet<String> = HashSet::new();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (index, template) in batch {
        let sig = template.signature();
        if history.contains(&sig) || seen.contains(&sig) {
            rejected.push((index, sig, RejectReason::Duplicate));
        } else {
            seen.insert(sig);
            kept.push((index, template));
        }
    }
    (kept, rejected)
}
