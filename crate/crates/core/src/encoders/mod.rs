//! Neural building blocks: embedding tables, the BiLSTM encoder, MLP heads
//! and pooling.

mod layers;
pub mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::{BiLstmEncoder, Binding, Linear, LstmDirection, MlpHead};
pub use vocab::{tokenize, Vocabulary, PAD, UNK};

use crate::error::{Error, Result};
use crate::numeric::params::join;
use crate::numeric::{Parameterized, Tape, Tensor, Var};

/// Layer sizes shared by every network in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_emb: usize,
    /// Hidden units per LSTM direction.
    pub hidden: usize,
    /// Hidden width inside MLP heads.
    pub head_hidden: usize,
    /// Output width of projector, predictor and transfer heads.
    pub space: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_emb: 32,
            hidden: 50,
            head_hidden: 50,
            space: 50,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.hidden == 0 || self.head_hidden == 0 || self.space == 0 {
            return Err(Error::InvalidConfig(format!("zero-sized layer in {self:?}")));
        }
        Ok(())
    }
}

/// Trainable embedding table `[vocab, d]`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub weight: Tensor,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn embed(&self, tape: &mut Tape, tokens: &[usize], binding: Binding) -> Result<Var> {
        let table = binding.bind(tape, &self.weight);
        tape.gather(table, tokens)
    }
}

impl Parameterized for EmbeddingTable {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}

/// Fixed featurizer giving each token its initial representation. Its table
/// is never bound as trainable.
#[derive(Debug, Clone)]
pub struct FrozenEmbeddingProvider {
    table: EmbeddingTable,
}

impl FrozenEmbeddingProvider {
    /// Seeded Gaussian table with standard deviation `std`.
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        FrozenEmbeddingProvider {
            table: EmbeddingTable {
                weight: Tensor::randn(&[vocab, dim], std, rng),
            },
        }
    }

    pub fn from_tensor(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                left: weight.shape().to_vec(),
                right: vec![],
            });
        }
        let mut weight = weight;
        weight.set_requires_grad(false);
        Ok(FrozenEmbeddingProvider {
            table: EmbeddingTable { weight },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.vocab_size()
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn weight(&self) -> &Tensor {
        &self.table.weight
    }

    /// `[len, d]` rows of the table. No gradient can reach the provider.
    pub fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        self.table.embed(tape, tokens, Binding::Frozen)
    }

    /// A trainable copy, used to initialize a fine-tuned encoder.
    pub fn to_trainable(&self) -> EmbeddingTable {
        EmbeddingTable {
            weight: self.table.weight.clone().trainable(),
        }
    }
}

impl Parameterized for FrozenEmbeddingProvider {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.table.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.table.visit_mut(prefix, f);
    }
}

/// Mean over all token vectors: `[len, 2h] -> [2h]`.
pub fn pool_statement(tape: &mut Tape, per_token: Var) -> Result<Var> {
    let len = *tape.shape(per_token).first().ok_or(Error::EmptySequence)?;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    tape.mean_rows(per_token, 0, len)
}

/// Mean over the token vectors of `span = [start, end)`.
pub fn pool_event_span(tape: &mut Tape, per_token: Var, span: (usize, usize)) -> Result<Var> {
    let len = tape.shape(per_token).first().copied().unwrap_or(0);
    if span.0 >= span.1 || span.1 > len {
        return Err(Error::SpanOutOfRange {
            start: span.0,
            end: span.1,
            len,
        });
    }
    tape.mean_rows(per_token, span.0, span.1)
}
