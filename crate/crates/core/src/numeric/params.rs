use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A module that owns named parameter tensors.
///
/// Visiting order is fixed per type, which makes checksums, checkpoints and
/// optimizer state deterministic.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<'a>(m: &'a dyn Parameterized, prefix: &str) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, t| out.push((name, t)));
    out
}

pub fn param_count(m: &dyn Parameterized) -> usize {
    named_params(m, "").iter().map(|(_, t)| t.len()).sum()
}

/// SHA-256 over every parameter's name, shape and little-endian values.
pub fn checksum(m: &dyn Parameterized) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, t| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Copies the last backward pass's gradients into each parameter's buffer.
pub fn pull_grads(tape: &Tape, m: &mut dyn Parameterized) {
    m.visit_mut("", &mut |_, t| tape.write_grad(t));
}

pub fn zero_grads(m: &mut dyn Parameterized) {
    m.visit_mut("", &mut |_, t| t.zero_grad());
}

pub fn set_trainable(m: &mut dyn Parameterized, flag: bool) {
    m.visit_mut("", &mut |_, t| t.set_requires_grad(flag));
}

/// Euclidean distance between two modules' parameters, visited in order.
pub fn param_distance(a: &dyn Parameterized, b: &dyn Parameterized) -> Result<f64> {
    let (pa, pb) = (named_params(a, ""), named_params(b, ""));
    if pa.len() != pb.len() {
        return Err(Error::ShapeMismatch {
            op: "param_distance",
            left: vec![pa.len()],
            right: vec![pb.len()],
        });
    }
    let mut acc = 0.0;
    for ((_, x), (_, y)) in pa.iter().zip(&pb) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_distance",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        acc += x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
    }
    Ok(acc.sqrt())
}

/// One saved tensor inside a [`Checkpoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Name → shape → values map. JSON floats round-trip bit-exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, SavedTensor>,
}

impl Checkpoint {
    pub fn capture(m: &dyn Parameterized, prefix: &str) -> Self {
        let mut ck = Checkpoint::default();
        ck.extend(m, prefix);
        ck
    }

    pub fn extend(&mut self, m: &dyn Parameterized, prefix: &str) {
        m.visit(prefix, &mut |name, t| {
            self.tensors.insert(
                name,
                SavedTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
        });
    }

    /// Writes saved values into `m`; every parameter must be present with a
    /// matching shape.
    pub fn restore(&self, m: &mut dyn Parameterized, prefix: &str) -> Result<()> {
        let mut err = None;
        m.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                Some(s) if s.shape == t.shape() => t.data_mut().copy_from_slice(&s.data),
                Some(s) => {
                    err = Some(Error::Checkpoint(format!(
                        "{name}: shape {:?} vs {:?}",
                        s.shape,
                        t.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("{name} missing"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
