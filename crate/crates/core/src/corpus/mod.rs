//! Causal statements, event-pair records, the synthetic corpus, folds and
//! line-delimited persistence.

mod folds;
mod jsonl;
mod statement;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use folds::{make_folds, make_folds_with_dev, topic_of, FoldPlan, DEV_TOPICS};
pub use jsonl::{load_json, load_jsonl, save_json, save_jsonl};
pub use statement::{convert_statement, CausalStatement, Resource};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec, Template};

use crate::encoders::tokenize;
use crate::error::{Error, Result};

/// One labelled event pair in surface form. Spans are `[start, end)` token
/// ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EciRecord {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub e1: [usize; 2],
    pub e2: [usize; 2],
    pub label: u8,
}

impl EciRecord {
    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        for [start, end] in [self.e1, self.e2] {
            if start >= end || end > len {
                return Err(Error::SpanOutOfRange { start, end, len });
            }
        }
        if self.e1[0] < self.e2[1] && self.e2[0] < self.e1[1] {
            return Err(Error::InvalidSpec(format!(
                "overlapping spans {:?} and {:?}",
                self.e1, self.e2
            )));
        }
        if self.label > 1 {
            return Err(Error::InvalidSpec(format!("label {}", self.label)));
        }
        Ok(())
    }
}

/// Turns a converted statement into a pseudo-positive event pair, taking
/// the second token of each clause as its predicate. Returns `None` when
/// the statement has no comma or a clause is shorter than two tokens.
pub fn pseudo_example(statement: &CausalStatement, doc_id: &str) -> Option<EciRecord> {
    let tokens = tokenize(&statement.converted);
    let comma = tokens.iter().position(|t| t == ",")?;
    let e1 = 1;
    let e2 = comma + 2;
    if comma < 2 || e2 >= tokens.len() || tokens[e2] == "." {
        return None;
    }
    Some(EciRecord {
        doc_id: doc_id.to_string(),
        tokens,
        e1: [e1, e1 + 1],
        e2: [e2, e2 + 1],
        label: 1,
    })
}
