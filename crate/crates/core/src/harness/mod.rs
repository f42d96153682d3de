//! Configuration, cross-validation, ablations, gradient checks and the
//! files each command writes.

mod commands;
mod config;
pub mod gradcheck;
pub mod pipeline;
pub mod report;

use std::fmt;
use std::str::FromStr;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_gen_corpus, cmd_gradcheck, cmd_train_eci, cmd_train_selfrl, Manifest,
};
pub use config::RunConfig;
pub use gradcheck::{run_gradcheck, GradCheckSummary};
pub use pipeline::{run_ablation, run_cross_validation, run_variants, Dataset, TeacherCheckpoint};
pub use report::{FoldRow, MetricReport};

use crate::error::Error;

/// Training regimes compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Identifier alone.
    Baseline,
    /// Identifier with contrastive transfer from the trained teacher.
    Full,
    /// Contrastive transfer from an untrained teacher encoder.
    NoSelfRl,
    /// Teacher encoder as a frozen identifier encoder, no transfer term.
    NoConRtFrozen,
    /// Teacher encoder as the identifier's initialization, fine-tuned, no
    /// transfer term.
    NoConRtFinetune,
    /// External statements turned into pseudo-positive training examples.
    StatementsAsData,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Full,
        Variant::NoSelfRl,
        Variant::NoConRtFrozen,
        Variant::NoConRtFinetune,
        Variant::StatementsAsData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Full => "full",
            Variant::NoSelfRl => "no-selfrl",
            Variant::NoConRtFrozen => "no-conrt-frozen",
            Variant::NoConRtFinetune => "no-conrt-finetune",
            Variant::StatementsAsData => "statements-as-data",
        }
    }

    pub fn needs_trained_teacher(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoConRtFrozen | Variant::NoConRtFinetune
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}
