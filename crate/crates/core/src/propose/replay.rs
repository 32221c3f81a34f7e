//! Scripted replay proposer.
//!
//! A replay file is a list of batches, each a list of template documents.
//! The proposer returns them in order, ignoring the prompt body but asserting
//! its section layout; a call past the last batch reports exhaustion. Replay
//! files double as golden fixtures and can be regenerated from a live run's
//! log.

use super::{ProposalBatch, ProposalRequest, ProposeError, Proposer, SECTION_HEADERS};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ReplayFile {
    pub batches: Vec<Vec<serde_json::Value>>,
}

impl ReplayFile {
    pub fn read(path: &Path) -> Result<Self, ProposeError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            ProposeError::ProposerUnavailable(format!("replay file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&raw)
            .map_err(|e| ProposeError::MalformedResponse(format!("replay file: {e}")))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("replay serialization"))
    }
}

pub struct ReplayProposer {
    name: String,
    batches: VecDeque<Vec<String>>,
}

impl ReplayProposer {
    pub fn from_file(path: &Path) -> Result<Self, ProposeError> {
        let file = ReplayFile::read(path)?;
        Ok(Self::new(
            format!("replay:{}", path.display()),
            &file,
        ))
    }

    pub fn new(name: String, file: &ReplayFile) -> Self {
        let batches = file
            .batches
            .iter()
            .map(|batch| {
                batch
                    .iter()
                    .map(|doc| serde_json::to_string(doc).expect("template document"))
                    .collect()
            })
            .collect();
        ReplayProposer { name, batches }
    }

    pub fn remaining(&self) -> usize {
        self.batches.len()
    }
}

impl Proposer for ReplayProposer {
    fn name(&self) -> &str {
        &self.name
    }

    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<ProposalBatch, ProposeError> {
        // the replay ignores the prompt body but holds the pipeline to its
        // layout contract
        let mut last = 0;
        for header in SECTION_HEADERS {
            let pos = request
                .prompt
                .find(header)
                .unwrap_or_else(|| panic!("prompt is missing section {header}"));
            assert!(pos >= last, "prompt section {header} out of order");
            last = pos;
        }
        let mut batch = self
            .batches
            .pop_front()
            .ok_or_else(|| ProposeError::ProposerUnavailable("replay exhausted".into()))?;
        batch.truncate(request.count);
        Ok(ProposalBatch {
            candidates: batch,
            diversity: request.diversity,
            proposer: self.name.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propose::prompt::tests_support::minimal_context;
    use crate::propose::build_prompt;

    fn two_batch_file() -> ReplayFile {
        let doc1: serde_json::Value = serde_json::from_str(
            r#"{"equations":[{"state":0,"features":["x1"]},{"state":1,"features":["x0"]}]}"#,
        )
        .unwrap();
        let doc2: serde_json::Value = serde_json::from_str(
            r#"{"equations":[{"state":0,"features":["x0","x1"]},{"state":1,"features":["x0"]}]}"#,
        )
        .unwrap();
        ReplayFile {
            batches: vec![vec![doc1], vec![doc2]],
        }
    }

    #[test]
    fn replays_batches_in_order_then_exhausts() {
        let ctx = minimal_context(2);
        let prompt = build_prompt(&ctx);
        let mut p = ReplayProposer::new("replay:test".into(), &two_batch_file());
        let req = ProposalRequest {
            prompt: &prompt,
            ctx: &ctx,
            count: 4,
            diversity: 0.3,
        };
        let b1 = p.propose(&req).unwrap();
        assert_eq!(b1.candidates.len(), 1);
        assert!(b1.candidates[0].contains("\"x1\""));
        let b2 = p.propose(&req).unwrap();
        assert!(b2.candidates[0].contains("\"x0\",\"x1\""));
        let err = p.propose(&req).unwrap_err();
        assert!(matches!(err, ProposeError::ProposerUnavailable(_)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.json");
        let file = two_batch_file();
        file.write(&path).unwrap();
        let mut p = ReplayProposer::from_file(&path).unwrap();
        assert_eq!(p.remaining(), 2);
        let ctx = minimal_context(2);
        let prompt = build_prompt(&ctx);
        let req = ProposalRequest {
            prompt: &prompt,
            ctx: &ctx,
            count: 1,
            diversity: 0.0,
        };
        assert_eq!(p.propose(&req).unwrap().candidates.len(), 1);
    }

    #[test]
    #[should_panic(expected = "missing section")]
    fn asserts_prompt_section_order() {
        let ctx = minimal_context(2);
        let mut p = ReplayProposer::new("replay:test".into(), &two_batch_file());
        let req = ProposalRequest {
            prompt: "not a real prompt",
            ctx: &ctx,
            count: 1,
            diversity: 0.0,
        };
        let _ = p.propose(&req);
    }
}
