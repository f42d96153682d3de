//! Contrastive transfer from a frozen teacher encoder to the identifier.
//!
//! External statements are encoded by the teacher, projected and averaged
//! into one anchor. Statement representations of causal event pairs are
//! pulled toward the anchor relative to the rest of the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{pool_statement, BiLstmEncoder, Binding, FrozenEmbeddingProvider, MlpHead, ModelDims};
use crate::error::{Error, Result};
use crate::numeric::params::{join, set_trainable};
use crate::numeric::{checksum, Parameterized, Tape, Tensor, Var};

/// Frozen teacher: embedding provider plus the learned statement encoder.
#[derive(Debug, Clone)]
pub struct TeacherHandle {
    provider: FrozenEmbeddingProvider,
    encoder: BiLstmEncoder,
}

impl TeacherHandle {
    pub fn new(provider: FrozenEmbeddingProvider, mut encoder: BiLstmEncoder) -> Self {
        set_trainable(&mut encoder, false);
        TeacherHandle { provider, encoder }
    }

    pub fn provider(&self) -> &FrozenEmbeddingProvider {
        &self.provider
    }

    pub fn encoder(&self) -> &BiLstmEncoder {
        &self.encoder
    }

    pub fn output_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Checksum of the encoder parameters.
    pub fn checksum(&self) -> String {
        checksum(&self.encoder)
    }

    /// Pooled encoding of one statement, bound frozen onto `tape`.
    pub fn encode(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let e = self.provider.embed(tape, tokens)?;
        let h = self.encoder.encode(tape, e, Binding::Frozen)?;
        pool_statement(tape, h)
    }

    /// Pooled encodings of many statements, computed once for reuse.
    pub fn encode_all(&self, statements: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        statements
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                let v = self.encode(&mut tape, s)?;
                Ok(tape.value(v).to_vec())
            })
            .collect()
    }
}

/// Sign of the distance inside the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceSign {
    /// `log softmax(D / T)` taken literally. Unbounded below: pushing
    /// negatives away lowers it without limit.
    Literal,
    /// `−log softmax(−D / T)`, the usual similarity-style form. Bounded
    /// below by zero.
    #[default]
    Negated,
}

/// Projection heads into the shared space, plus the temperature.
#[derive(Debug, Clone)]
pub struct TransferSpace {
    pub student_head: MlpHead,
    pub teacher_head: MlpHead,
    pub temperature: f64,
    pub sign: DistanceSign,
}

impl TransferSpace {
    pub fn new<R: Rng + ?Sized>(
        student_dim: usize,
        teacher_dim: usize,
        dims: &ModelDims,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature = {temperature}; need > 0")));
        }
        Ok(TransferSpace {
            student_head: MlpHead::new(student_dim, dims.head_hidden, dims.space, rng),
            teacher_head: MlpHead::new(teacher_dim, dims.head_hidden, dims.space, rng),
            temperature,
            sign: DistanceSign::default(),
        })
    }
}

impl Parameterized for TransferSpace {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.student_head.visit(&join(prefix, "student"), f);
        self.teacher_head.visit(&join(prefix, "teacher"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.student_head.visit_mut(&join(prefix, "student"), f);
        self.teacher_head.visit_mut(&join(prefix, "teacher"), f);
    }
}

/// Anchor from precomputed teacher encodings: project each through the
/// teacher head and average.
pub fn anchor_from_encodings(tape: &mut Tape, space: &TransferSpace, encodings: &[&[f64]]) -> Result<Var> {
    let first = encodings.first().ok_or(Error::EmptyBatch)?;
    let width = first.len();
    let mut flat = Vec::with_capacity(encodings.len() * width);
    for e in encodings {
        if e.len() != width {
            return Err(Error::ShapeMismatch {
                op: "anchor",
                left: vec![width],
                right: vec![e.len()],
            });
        }
        flat.extend_from_slice(e);
    }
    let x = tape.constant(vec![encodings.len(), width], flat)?;
    let projected = space.teacher_head.forward(tape, x, Binding::Param)?;
    tape.mean_rows(projected, 0, encodings.len())
}

/// Encodes an external batch with the frozen teacher and reduces it to one
/// anchor vector.
pub fn compute_anchor(
    tape: &mut Tape,
    external_batch: &[Vec<usize>],
    teacher: &TeacherHandle,
    space: &TransferSpace,
) -> Result<Var> {
    if external_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(external_batch.len());
    for s in external_batch {
        let r = teacher.encode(tape, s)?;
        rows.push(r);
    }
    let x = tape.stack(&rows)?;
    let projected = space.teacher_head.forward(tape, x, Binding::Param)?;
    tape.mean_rows(projected, 0, external_batch.len())
}

/// Projected statement vectors and which of them are causal.
#[derive(Debug, Clone)]
pub struct StudentProjection {
    pub all: Vec<Var>,
    pub positives: Vec<usize>,
}

pub fn project_student(
    tape: &mut Tape,
    space: &TransferSpace,
    states: &[Var],
    labels: &[u8],
) -> Result<StudentProjection> {
    if states.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "project_student",
            left: vec![states.len()],
            right: vec![labels.len()],
        });
    }
    if states.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let all = states
        .iter()
        .map(|&s| space.student_head.forward(tape, s, Binding::Param))
        .collect::<Result<Vec<_>>>()?;
    let positives = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 1)
        .map(|(i, _)| i)
        .collect();
    Ok(StudentProjection { all, positives })
}

/// Mean over positives of `log softmax(D / T)[p]`, where `D` is each
/// vector's ℓ2 distance to the anchor. With [`DistanceSign::Negated`] the
/// term is `−log softmax(−D / T)[p]` instead.
pub fn contrastive_loss(
    tape: &mut Tape,
    all: &[Var],
    positives: &[usize],
    anchor: Var,
    temperature: f64,
    sign: DistanceSign,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature = {temperature}; need > 0")));
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= all.len()) {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            left: vec![p],
            right: vec![all.len()],
        });
    }
    let dists = all
        .iter()
        .map(|&r| tape.l2_distance(r, anchor))
        .collect::<Result<Vec<_>>>()?;
    let d = tape.stack(&dists)?;
    let factor = match sign {
        DistanceSign::Literal => 1.0 / temperature,
        DistanceSign::Negated => -1.0 / temperature,
    };
    let logits = tape.scale(d, factor);
    let ls = tape.log_softmax(logits)?;
    let picked = tape.select(ls, positives)?;
    let m = tape.mean(picked);
    Ok(match sign {
        DistanceSign::Literal => m,
        DistanceSign::Negated => tape.scale(m, -1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dims() -> ModelDims {
        ModelDims {
            d_emb: 5,
            hidden: 3,
            head_hidden: 4,
            space: 3,
        }
    }

    fn teacher(seed: u64) -> TeacherHandle {
        let mut r = rng(seed);
        let p = FrozenEmbeddingProvider::random(12, 5, 0.5, &mut r);
        let e = BiLstmEncoder::new(5, 3, &mut r);
        TeacherHandle::new(p, e)
    }

    /// Places vectors so each has exactly the requested distance to the
    /// anchor at the origin.
    fn at_distances(tape: &mut Tape, ds: &[f64]) -> (Vec<Var>, Var) {
        let anchor = tape.vector(vec![0.0, 0.0]);
        let all = ds.iter().map(|&d| tape.vector(vec![d, 0.0])).collect();
        (all, anchor)
    }

    #[test]
    fn closed_forms() {
        let mut tape = Tape::new();
        let (all, a) = at_distances(&mut tape, &[0.3; 4]);
        let l = contrastive_loss(&mut tape, &all, &[2], a, 0.1, DistanceSign::Literal).unwrap();
        assert!((tape.scalar(l) - (0.25f64).ln()).abs() < 1e-12);

        let (all, a) = at_distances(&mut tape, &[0.7]);
        let l = contrastive_loss(&mut tape, &all, &[0], a, 0.1, DistanceSign::Literal).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let (all, a) = at_distances(&mut tape, &[0.0, 0.1]);
        let l = contrastive_loss(&mut tape, &all, &[0], a, 0.1, DistanceSign::Literal).unwrap();
        let expected = (1.0 / (1.0 + 1f64.exp())).ln();
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
        assert!((tape.scalar(l) + 1.3133).abs() < 1e-4);

        assert!(matches!(
            contrastive_loss(&mut tape, &all, &[], a, 0.1, DistanceSign::Literal),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn negated_sign_is_similarity_form() {
        let mut tape = Tape::new();
        let (all, a) = at_distances(&mut tape, &[0.0, 0.1]);
        let lit = contrastive_loss(&mut tape, &all, &[0], a, 0.1, DistanceSign::Literal).unwrap();
        let neg = contrastive_loss(&mut tape, &all, &[0], a, 0.1, DistanceSign::Negated).unwrap();
        let expected = -(1f64.exp() / (1.0 + 1f64.exp())).ln();
        assert!((tape.scalar(neg) - expected).abs() < 1e-12);
        let (all, a) = at_distances(&mut tape, &[0.05, 0.1]);
        let farther = contrastive_loss(&mut tape, &all, &[0], a, 0.1, DistanceSign::Negated).unwrap();
        assert!(tape.scalar(farther) > tape.scalar(neg));
        assert!(tape.scalar(lit) < tape.scalar(neg));
    }

    #[test]
    fn anchor_examples() {
        let t = teacher(1);
        let mut r = rng(2);
        let space = TransferSpace::new(6, t.output_dim(), &dims(), 0.1, &mut r).unwrap();
        let s = vec![2, 3, 4];
        let mut tape = Tape::new();
        let single = compute_anchor(&mut tape, &[s.clone()], &t, &space).unwrap();
        let dup = compute_anchor(&mut tape, &[s.clone(), s.clone(), s.clone()], &t, &space).unwrap();
        let enc = t.encode(&mut tape, &s).unwrap();
        let direct = space.teacher_head.forward(&mut tape, enc, Binding::Param).unwrap();
        for ((x, y), z) in tape.value(single).iter().zip(tape.value(dup)).zip(tape.value(direct)) {
            assert!((x - y).abs() < 1e-15);
            assert_eq!(x, z);
        }
        assert!(matches!(
            compute_anchor(&mut tape, &[], &t, &space),
            Err(Error::EmptyBatch)
        ));

        let cached = t.encode_all(&[s.clone()]).unwrap();
        let from_cache = anchor_from_encodings(&mut tape, &space, &[&cached[0]]).unwrap();
        assert_eq!(tape.value(from_cache), tape.value(single));
    }

    #[test]
    fn anchor_gradient_skips_teacher_encoder() {
        let mut t = teacher(3);
        let mut r = rng(4);
        let space = TransferSpace::new(6, t.output_dim(), &dims(), 0.1, &mut r).unwrap();
        // Even with trainable flags forced on, the frozen binding blocks it.
        set_trainable(&mut t.encoder, true);
        let mut tape = Tape::new();
        let a = compute_anchor(&mut tape, &[vec![2, 5], vec![7, 8, 9]], &t, &space).unwrap();
        let l = tape.sum(a);
        tape.backward(l).unwrap();
        t.encoder.visit("", &mut |name, x| {
            assert!(tape.param_grad(x).is_none(), "{name}");
        });
        let head_grad = tape.param_grad(&space.teacher_head.second.bias).unwrap();
        assert!(head_grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn projection_split() {
        let mut r = rng(5);
        let space = TransferSpace::new(2, 2, &dims(), 0.1, &mut r).unwrap();
        let mut tape = Tape::new();
        let states: Vec<Var> = (0..3).map(|i| tape.vector(vec![i as f64, 1.0])).collect();
        let p = project_student(&mut tape, &space, &states, &[0, 0, 0]).unwrap();
        assert!(p.positives.is_empty());
        assert_eq!(p.all.len(), 3);
        let p = project_student(&mut tape, &space, &states, &[1, 1, 1]).unwrap();
        assert_eq!(p.positives, vec![0, 1, 2]);
        assert!(matches!(
            project_student(&mut tape, &space, &states, &[1]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let mut r = rng(6);
        assert!(TransferSpace::new(2, 2, &dims(), 0.0, &mut r).is_err());
    }

    proptest::proptest! {
        #[test]
        fn stabilized_matches_naive(ds in proptest::collection::vec(0.0f64..3.0, 2..8), t in 0.1f64..2.0) {
            let mut tape = Tape::new();
            let (all, a) = at_distances(&mut tape, &ds);
            let l = contrastive_loss(&mut tape, &all, &[0], a, t, DistanceSign::Literal).unwrap();
            let naive = ((ds[0] / t).exp() / ds.iter().map(|d| (d / t).exp()).sum::<f64>()).ln();
            proptest::prop_assert!((tape.scalar(l) - naive).abs() < 1e-9);
        }

        #[test]
        fn shift_invariant_when_all_positive(ds in proptest::collection::vec(0.0f64..3.0, 1..6), shift in 0.0f64..2.0) {
            let mut tape = Tape::new();
            let idx: Vec<usize> = (0..ds.len()).collect();
            let (all, a) = at_distances(&mut tape, &ds);
            let base = contrastive_loss(&mut tape, &all, &idx, a, 0.1, DistanceSign::Literal).unwrap();
            let shifted: Vec<f64> = ds.iter().map(|d| d + shift).collect();
            let (all, a) = at_distances(&mut tape, &shifted);
            let moved = contrastive_loss(&mut tape, &all, &idx, a, 0.1, DistanceSign::Literal).unwrap();
            proptest::prop_assert!((tape.scalar(base) - tape.scalar(moved)).abs() < 1e-9);
        }
    }
}
