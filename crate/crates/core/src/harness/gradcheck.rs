use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conrt::{anchor_from_encodings, contrastive_loss, project_student, DistanceSign, TransferSpace};
use crate::encoders::{FrozenEmbeddingProvider, ModelDims};
use crate::error::Result;
use crate::identifier::{encode_pair, joint_loss, EventPairExample, IdentifierModel};
use crate::numeric::params::join;
use crate::numeric::{check_with_fault, BackwardFault, GradCheckReport, Parameterized, Tape, Tensor};
use crate::selfrl::{selfrl_loss, OnlineNetwork, TargetNetwork};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

pub const SURFACES: [&str; 4] = ["selfrl", "classification", "contrastive", "joint"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceResult {
    pub surface: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    /// Seed and parameter of the worst entry.
    pub worst: Option<(u64, String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub step: f64,
    pub fault: Option<String>,
    pub surfaces: Vec<SurfaceResult>,
    pub passed: bool,
}

const VOCAB: usize = 10;

fn toy_dims() -> ModelDims {
    ModelDims {
        d_emb: 4,
        hidden: 3,
        head_hidden: 4,
        space: 3,
    }
}

fn random_tokens<R: Rng>(rng: &mut R, min: usize, max: usize) -> Vec<usize> {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| rng.random_range(2..VOCAB)).collect()
}

/// Four examples with at least one positive and one negative.
fn toy_batch<R: Rng>(rng: &mut R) -> Vec<EventPairExample> {
    (0..4)
        .map(|i| {
            let tokens = random_tokens(rng, 3, 6);
            let len = tokens.len();
            let e1 = rng.random_range(0..len - 1);
            let e2 = rng.random_range(e1 + 1..len);
            EventPairExample {
                tokens,
                span_e1: (e1, e1 + 1),
                span_e2: (e2, e2 + 1),
                label: match i {
                    0 => 1,
                    1 => 0,
                    _ => rng.random_range(0..2),
                },
                doc_id: format!("toy/{i}"),
                fold_id: None,
            }
        })
        .collect()
}

struct Joint {
    model: IdentifierModel,
    space: TransferSpace,
}

impl Parameterized for Joint {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.model.visit(&join(prefix, "model"), f);
        self.space.visit(&join(prefix, "space"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.model.visit_mut(&join(prefix, "model"), f);
        self.space.visit_mut(&join(prefix, "space"), f);
    }
}

fn joint_fixture(rng: &mut ChaCha8Rng) -> Result<(Joint, Vec<Vec<f64>>)> {
    let dims = toy_dims();
    let provider = FrozenEmbeddingProvider::random(VOCAB, dims.d_emb, 0.5, rng);
    let model = IdentifierModel::new(provider.to_trainable(), &dims, rng);
    let space = TransferSpace::new(model.state_dim(), 4, &dims, 0.1, rng)?;
    let external = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Ok((Joint { model, space }, external))
}

/// Checks one surface for one seed.
pub fn check_surface(surface: &str, seed: u64, h: f64, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = toy_dims();
    match surface {
        "selfrl" => {
            let provider = FrozenEmbeddingProvider::random(VOCAB, dims.d_emb, 0.5, &mut rng);
            let mut online = OnlineNetwork::new(&dims, &mut rng);
            let target = TargetNetwork::new(&dims, &mut rng);
            let a = random_tokens(&mut rng, 2, 6);
            let b = random_tokens(&mut rng, 2, 6);
            check_with_fault(&mut online, h, fault, |tape, m| {
                selfrl_loss(tape, &provider, &a, &b, m, &target)
            })
        }
        "classification" => {
            let (mut j, _) = joint_fixture(&mut rng)?;
            let batch = toy_batch(&mut rng);
            let refs: Vec<&EventPairExample> = batch.iter().collect();
            check_with_fault(&mut j.model, h, fault, |tape, m| {
                Ok(joint_loss(tape, &refs, &[], m, None)?.0)
            })
        }
        "contrastive" => {
            let (mut j, ext) = joint_fixture(&mut rng)?;
            let batch = toy_batch(&mut rng);
            let ext: Vec<&[f64]> = ext.iter().map(|v| v.as_slice()).collect();
            check_with_fault(&mut j, h, fault, |tape: &mut Tape, j: &Joint| {
                let mut states = Vec::new();
                for ex in &batch {
                    states.push(encode_pair(tape, ex, &j.model)?.1);
                }
                let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
                let anchor = anchor_from_encodings(tape, &j.space, &ext)?;
                let p = project_student(tape, &j.space, &states, &labels)?;
                contrastive_loss(tape, &p.all, &p.positives, anchor, j.space.temperature, DistanceSign::Literal)
            })
        }
        "joint" => {
            let (mut j, ext) = joint_fixture(&mut rng)?;
            let batch = toy_batch(&mut rng);
            let refs: Vec<&EventPairExample> = batch.iter().collect();
            let ext: Vec<&[f64]> = ext.iter().map(|v| v.as_slice()).collect();
            check_with_fault(&mut j, h, fault, |tape, j| {
                Ok(joint_loss(tape, &refs, &ext, &j.model, Some(&j.space))?.0)
            })
        }
        other => Err(crate::Error::InvalidConfig(format!("unknown surface {other:?}"))),
    }
}

/// Runs every surface over `seeds` random instances.
pub fn run_gradcheck(seeds: usize, h: f64, fault: Option<BackwardFault>) -> Result<GradCheckSummary> {
    let mut surfaces = Vec::new();
    for name in SURFACES {
        let mut res = SurfaceResult {
            surface: name.to_string(),
            seeds,
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            passed: true,
        };
        for seed in 0..seeds as u64 {
            let rep = check_surface(name, seed, h, fault)?;
            res.checked += rep.checked;
            if rep.max_rel_error > res.max_rel_error || res.worst.is_none() {
                res.max_rel_error = rep.max_rel_error;
                res.worst = rep.worst.map(|(n, i)| (seed, n, i));
            }
        }
        res.passed = res.max_rel_error < TOLERANCE;
        surfaces.push(res);
    }
    let passed = surfaces.iter().all(|s| s.passed);
    Ok(GradCheckSummary {
        step: h,
        fault: fault.map(|f| format!("{f:?}")),
        surfaces,
        passed,
    })
}
