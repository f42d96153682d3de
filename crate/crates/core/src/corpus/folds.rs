use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of trailing topics held out as the development slice.
pub const DEV_TOPICS: usize = 2;

/// Assignment of documents to cross-validation folds plus a dev slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub dev: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

/// Topic of a document id: the part before the first `/`, or the whole id.
pub fn topic_of(doc_id: &str) -> &str {
    doc_id.split('/').next().unwrap_or(doc_id)
}

impl FoldPlan {
    pub fn fold_of(&self, doc_id: &str) -> Option<usize> {
        self.folds
            .iter()
            .position(|f| f.iter().any(|d| d == doc_id))
    }

    pub fn is_dev(&self, doc_id: &str) -> bool {
        self.dev.iter().any(|d| d == doc_id)
    }
}

/// Holds out the last [`DEV_TOPICS`] topics as dev and splits the remaining
/// documents into `k` near-equal folds.
pub fn make_folds<S: AsRef<str>>(doc_ids: &[S], k: usize, seed: u64) -> Result<FoldPlan> {
    make_folds_with_dev(doc_ids, k, DEV_TOPICS, seed)
}

/// As [`make_folds`] with an explicit number of dev topics. At least one
/// topic always stays available for the folds.
pub fn make_folds_with_dev<S: AsRef<str>>(
    doc_ids: &[S],
    k: usize,
    dev_topics: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k = {k}; need k >= 2")));
    }
    let docs: BTreeSet<&str> = doc_ids.iter().map(|d| d.as_ref()).collect();
    let topics: BTreeSet<&str> = docs.iter().map(|d| topic_of(d)).collect();
    let n_dev = dev_topics.min(topics.len().saturating_sub(1));
    let dev_topics: BTreeSet<&str> = topics.iter().rev().take(n_dev).copied().collect();

    let dev: Vec<String> = docs
        .iter()
        .filter(|d| dev_topics.contains(topic_of(d)))
        .map(|d| d.to_string())
        .collect();
    let mut rest: Vec<String> = docs
        .iter()
        .filter(|d| !dev_topics.contains(topic_of(d)))
        .map(|d| d.to_string())
        .collect();
    if rest.len() < k {
        return Err(Error::TooFewDocuments {
            docs: rest.len(),
            k,
        });
    }
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, d) in rest.into_iter().enumerate() {
        folds[i % k].push(d);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldPlan { k, dev, folds })
}
