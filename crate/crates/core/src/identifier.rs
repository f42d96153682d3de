//! Event-pair causality classifier, trained with an optional contrastive
//! transfer term and evaluated on its own.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conrt::{anchor_from_encodings, contrastive_loss, project_student, DistanceSign, TransferSpace};
use crate::corpus::EciRecord;
use crate::encoders::{pool_event_span, pool_statement, BiLstmEncoder, Binding, EmbeddingTable, MlpHead, ModelDims, Vocabulary};
use crate::error::{Error, Result};
use crate::numeric::params::{join, pull_grads};
use crate::numeric::{AdamW, AdamWConfig, Checkpoint, Parameterized, Tape, Tensor, Var};

/// A labelled event pair over vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPairExample {
    pub tokens: Vec<usize>,
    pub span_e1: (usize, usize),
    pub span_e2: (usize, usize),
    pub label: u8,
    pub doc_id: String,
    pub fold_id: Option<usize>,
}

impl EventPairExample {
    pub fn from_record(rec: &EciRecord, vocab: &Vocabulary) -> Result<Self> {
        rec.validate()?;
        Ok(EventPairExample {
            tokens: vocab.encode(&rec.tokens),
            span_e1: (rec.e1[0], rec.e1[1]),
            span_e2: (rec.e2[0], rec.e2[1]),
            label: rec.label,
            doc_id: rec.doc_id.clone(),
            fold_id: None,
        })
    }
}

/// Trainable embedding and BiLSTM encoder with a classifier over
/// `[e1; e2; statement]`.
#[derive(Debug, Clone)]
pub struct IdentifierModel {
    pub embedding: EmbeddingTable,
    pub encoder: BiLstmEncoder,
    pub classifier: MlpHead,
}

impl IdentifierModel {
    pub fn new<R: Rng + ?Sized>(embedding: EmbeddingTable, dims: &ModelDims, rng: &mut R) -> Self {
        let encoder = BiLstmEncoder::new(embedding.dim(), dims.hidden, rng);
        Self::with_encoder(embedding, encoder, dims, rng)
    }

    /// Uses a given encoder, e.g. one learned elsewhere.
    pub fn with_encoder<R: Rng + ?Sized>(
        embedding: EmbeddingTable,
        encoder: BiLstmEncoder,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Self {
        let h2 = encoder.output_dim();
        IdentifierModel {
            embedding,
            encoder,
            classifier: MlpHead::new(3 * h2, dims.head_hidden, 1, rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

impl Parameterized for IdentifierModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.embedding.visit_mut(&join(prefix, "embedding"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Returns `(r_event [4h], r_state [2h])`.
pub fn encode_pair(tape: &mut Tape, ex: &EventPairExample, model: &IdentifierModel) -> Result<(Var, Var)> {
    let emb = model.embedding.embed(tape, &ex.tokens, Binding::Param)?;
    let h = model.encoder.encode(tape, emb, Binding::Param)?;
    let e1 = pool_event_span(tape, h, ex.span_e1)?;
    let e2 = pool_event_span(tape, h, ex.span_e2)?;
    let state = pool_statement(tape, h)?;
    let event = tape.concat(&[e1, e2])?;
    Ok((event, state))
}

/// Classifier logit `[1]`.
pub fn classifier_logit(tape: &mut Tape, event: Var, state: Var, model: &IdentifierModel) -> Result<Var> {
    let x = tape.concat(&[event, state])?;
    model.classifier.forward(tape, x, Binding::Param)
}

pub fn classify_pair(tape: &mut Tape, event: Var, state: Var, model: &IdentifierModel) -> Result<f64> {
    let logit = classifier_logit(tape, event, state, model)?;
    let p = tape.sigmoid(logit);
    Ok(tape.value(p)[0])
}

pub fn probability(ex: &EventPairExample, model: &IdentifierModel) -> Result<f64> {
    let mut tape = Tape::new();
    let (event, state) = encode_pair(&mut tape, ex, model)?;
    classify_pair(&mut tape, event, state, model)
}

/// 1 iff the causal probability is at least `threshold`.
pub fn predict(ex: &EventPairExample, model: &IdentifierModel, threshold: f64) -> Result<u8> {
    Ok(u8::from(probability(ex, model)? >= threshold))
}

/// Keeps every positive and each negative with probability `keep_rate`.
pub fn negative_sampling<'a, R: Rng + ?Sized>(
    batch: &[&'a EventPairExample],
    keep_rate: f64,
    rng: &mut R,
) -> Vec<&'a EventPairExample> {
    batch
        .iter()
        .filter(|ex| ex.label == 1 || keep_rate >= 1.0 || rng.random_bool(keep_rate))
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifierConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negative_keep_rate: f64,
    pub temperature: f64,
    pub external_batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub threshold: f64,
    pub weight_decay: f64,
    pub distance_sign: DistanceSign,
    pub seed: u64,
}

impl Default for IdentifierConfig {
    fn default() -> Self {
        IdentifierConfig {
            learning_rate: 2e-5,
            batch_size: 16,
            negative_keep_rate: 0.6,
            temperature: 0.1,
            external_batch_size: 48,
            patience: 5,
            max_epochs: 30,
            threshold: 0.5,
            weight_decay: 0.01,
            distance_sign: DistanceSign::default(),
            seed: 0,
        }
    }
}

impl IdentifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.negative_keep_rate > 0.0 && self.negative_keep_rate <= 1.0) {
            return bad(format!("negative_keep_rate = {} outside (0, 1]", self.negative_keep_rate));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return bad("learning rate and temperature must be positive".into());
        }
        if self.batch_size == 0 || self.external_batch_size == 0 || self.max_epochs == 0 {
            return bad("batch sizes and max_epochs must be positive".into());
        }
        Ok(())
    }
}

/// Frozen-teacher side of a joint step: the transfer heads plus the
/// teacher encodings to draw anchors from.
pub struct Transfer<'a> {
    pub space: &'a mut TransferSpace,
    pub encodings: &'a [Vec<f64>],
}

/// Loss parts of one step. `total == student + contrastive` bit for bit,
/// and `total == student` when the batch has no positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub student: f64,
    pub contrastive: Option<f64>,
}

/// Builds the joint objective on `tape` without updating anything.
pub fn joint_loss(
    tape: &mut Tape,
    batch: &[&EventPairExample],
    external: &[&[f64]],
    model: &IdentifierModel,
    space: Option<&TransferSpace>,
) -> Result<(Var, Var, Option<Var>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut states = Vec::with_capacity(batch.len());
    for ex in batch {
        let (event, state) = encode_pair(tape, ex, model)?;
        logits.push(classifier_logit(tape, event, state, model)?);
        states.push(state);
    }
    let labels: Vec<f64> = batch.iter().map(|e| f64::from(e.label)).collect();
    let stacked = tape.concat(&logits)?;
    let student = tape.bce_with_logits(stacked, &labels)?;
    let Some(space) = space else {
        return Ok((student, student, None));
    };
    let raw: Vec<u8> = batch.iter().map(|e| e.label).collect();
    if !raw.contains(&1) {
        return Ok((student, student, None));
    }
    let anchor = anchor_from_encodings(tape, space, external)?;
    let proj = project_student(tape, space, &states, &raw)?;
    let con = contrastive_loss(tape, &proj.all, &proj.positives, anchor, space.temperature, space.sign)?;
    let total = tape.add(student, con)?;
    Ok((total, student, Some(con)))
}

/// One AdamW step on the identifier (and transfer heads, when present).
pub fn joint_step(
    batch: &[&EventPairExample],
    external: &[&[f64]],
    model: &mut IdentifierModel,
    space: Option<&mut TransferSpace>,
    optimizer: &mut AdamW,
) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let (total, student, con) = joint_loss(&mut tape, batch, external, model, space.as_deref())?;
    tape.backward(total)?;
    pull_grads(&tape, model);
    match space {
        Some(space) => {
            pull_grads(&tape, space);
            optimizer.step(&mut [("model", model), ("space", space)])?;
        }
        None => optimizer.step(&mut [("model", model)])?,
    }
    Ok(StepLoss {
        total: tape.scalar(total),
        student: tape.scalar(student),
        contrastive: con.map(|c| tape.scalar(c)),
    })
}

/// Confusion counts for the causal class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, label: u8, pred: u8) {
        match (label, pred) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, 0) => self.fn_ += 1,
            _ => {}
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn f1(&self) -> f64 {
        prf1(self.tp, self.fp, self.fn_).2
    }
}

/// Precision, recall and F1, each 0 when its denominator is 0.
pub fn prf1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// One line of prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub e1: [usize; 2],
    pub e2: [usize; 2],
    pub prob: f64,
    pub label: u8,
    pub pred: u8,
}

pub fn predict_all(examples: &[EventPairExample], model: &IdentifierModel, threshold: f64) -> Result<Vec<Prediction>> {
    examples
        .iter()
        .map(|ex| {
            let prob = probability(ex, model)?;
            Ok(Prediction {
                doc_id: ex.doc_id.clone(),
                e1: [ex.span_e1.0, ex.span_e1.1],
                e2: [ex.span_e2.0, ex.span_e2.1],
                prob,
                label: ex.label,
                pred: u8::from(prob >= threshold),
            })
        })
        .collect()
}

pub fn evaluate(examples: &[EventPairExample], model: &IdentifierModel, threshold: f64) -> Result<Counts> {
    let mut c = Counts::default();
    for p in predict_all(examples, model, threshold)? {
        c.add(p.label, p.pred);
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedIdentifier {
    pub model: IdentifierModel,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains with early stopping on dev F1 and returns the best snapshot.
///
/// With a transfer, every step draws a fresh external batch from the
/// teacher encodings. Shuffling and negative sampling use their own stream,
/// so runs with and without transfer see the same training batches.
pub fn train_identifier(
    mut model: IdentifierModel,
    mut transfer: Option<Transfer<'_>>,
    train: &[EventPairExample],
    dev: &[EventPairExample],
    config: &IdentifierConfig,
) -> Result<TrainedIdentifier> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(t) = &transfer {
        if t.encodings.is_empty() {
            return Err(Error::EmptyBatch);
        }
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut ext_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0e87_e5a1);
    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::with_lr(config.learning_rate)
    });
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<&EventPairExample> = train.iter().collect();
        order.shuffle(&mut data_rng);
        let kept = negative_sampling(&order, config.negative_keep_rate, &mut data_rng);
        let mut losses = Vec::new();
        for batch in kept.chunks(config.batch_size) {
            let ext: Vec<&[f64]> = match &transfer {
                Some(t) => t
                    .encodings
                    .choose_multiple(&mut ext_rng, config.external_batch_size)
                    .map(|v| v.as_slice())
                    .collect(),
                None => Vec::new(),
            };
            let space = transfer.as_mut().map(|t| &mut *t.space);
            let loss = joint_step(batch, &ext, &mut model, space, &mut optimizer)?;
            losses.push(loss.total);
        }
        let dev_f1 = if dev.is_empty() {
            0.0
        } else {
            evaluate(dev, &model, config.threshold)?.f1()
        };
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        history.push(EpochRecord {
            epoch,
            mean_loss,
            dev_f1,
        });
        if best.as_ref().is_none_or(|(f, _, _)| dev_f1 > *f) {
            best = Some((dev_f1, epoch, Checkpoint::capture(&model, "")));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_dev_f1, best_epoch, snapshot) = best.expect("at least one epoch ran");
    snapshot.restore(&mut model, "")?;
    Ok(TrainedIdentifier {
        model,
        best_epoch,
        best_dev_f1,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::FrozenEmbeddingProvider;
    use crate::numeric::finite_difference_check;

    fn dims() -> ModelDims {
        ModelDims {
            d_emb: 5,
            hidden: 3,
            head_hidden: 4,
            space: 3,
        }
    }

    fn model(seed: u64) -> IdentifierModel {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = FrozenEmbeddingProvider::random(12, 5, 0.5, &mut r);
        IdentifierModel::new(p.to_trainable(), &dims(), &mut r)
    }

    fn example(tokens: Vec<usize>, e1: (usize, usize), e2: (usize, usize), label: u8) -> EventPairExample {
        EventPairExample {
            tokens,
            span_e1: e1,
            span_e2: e2,
            label,
            doc_id: "t0/d0".into(),
            fold_id: None,
        }
    }

    #[test]
    fn prf1_examples() {
        let third = 2.0 / 3.0;
        let (p, r, f) = prf1(2, 1, 1);
        assert!((p - third).abs() < 1e-15 && (r - third).abs() < 1e-15 && (f - third).abs() < 1e-15);
        assert_eq!(prf1(0, 0, 5), (0.0, 0.0, 0.0));
        assert_eq!(prf1(5, 0, 0), (1.0, 1.0, 1.0));
    }

    #[test]
    fn encode_pair_examples() {
        let m = model(1);
        let whole = example(vec![2, 3, 4], (0, 3), (0, 3), 1);
        let mut tape = Tape::new();
        let (ev, st) = encode_pair(&mut tape, &whole, &m).unwrap();
        let (ev, st) = (tape.value(ev).to_vec(), tape.value(st).to_vec());
        assert_eq!(&ev[..6], st.as_slice());
        assert_eq!(&ev[6..], st.as_slice());

        let a = example(vec![2, 3, 4, 5], (0, 1), (2, 4), 1);
        let b = example(vec![2, 3, 4, 5], (2, 4), (0, 1), 1);
        let (ea, sa) = encode_pair(&mut tape, &a, &m).unwrap();
        let (ea2, _) = encode_pair(&mut tape, &a, &m).unwrap();
        let (eb, sb) = encode_pair(&mut tape, &b, &m).unwrap();
        assert_eq!(tape.value(ea), tape.value(ea2));
        assert_eq!(&tape.value(ea)[..6], &tape.value(eb)[6..]);
        assert_eq!(&tape.value(ea)[6..], &tape.value(eb)[..6]);
        assert_eq!(tape.value(sa), tape.value(sb));

        let bad = example(vec![2, 3], (0, 1), (1, 3), 0);
        assert!(matches!(
            encode_pair(&mut tape, &bad, &m),
            Err(Error::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_classifier_predicts_half_and_positive() {
        let mut m = model(2);
        m.classifier.second.weight.data_mut().fill(0.0);
        m.classifier.second.bias.data_mut().fill(0.0);
        let ex = example(vec![2, 3, 4], (0, 1), (2, 3), 0);
        assert_eq!(probability(&ex, &m).unwrap(), 0.5);
        assert_eq!(predict(&ex, &m, 0.5).unwrap(), 1);
    }

    #[test]
    fn probability_monotone_in_bias() {
        let mut m = model(3);
        let ex = example(vec![2, 3, 4], (0, 1), (2, 3), 0);
        let mut last = 0.0;
        for b in [-50.0, -5.0, -1.0, 0.0, 1.0, 5.0, 50.0] {
            m.classifier.second.bias.data_mut()[0] = b;
            let p = probability(&ex, &m).unwrap();
            assert!(p >= last && p <= 1.0);
            last = p;
        }
        m.classifier.second.bias.data_mut()[0] = 5.0;
        let p = probability(&ex, &m).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn negative_sampling_examples() {
        let exs: Vec<EventPairExample> = (0..20)
            .map(|i| example(vec![2, 3], (0, 1), (1, 2), (i % 3 == 0) as u8))
            .collect();
        let refs: Vec<&EventPairExample> = exs.iter().collect();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(negative_sampling(&refs, 1.0, &mut r).len(), 20);
        let pos: Vec<&EventPairExample> = refs.iter().copied().filter(|e| e.label == 1).collect();
        assert_eq!(negative_sampling(&pos, 0.1, &mut r).len(), pos.len());
        let kept = negative_sampling(&refs, 0.3, &mut r);
        assert_eq!(kept.iter().filter(|e| e.label == 1).count(), pos.len());
    }

    fn transfer_fixture(seed: u64) -> (IdentifierModel, TransferSpace, Vec<Vec<f64>>, Vec<EventPairExample>) {
        let m = model(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        let space = TransferSpace::new(m.state_dim(), 4, &dims(), 0.1, &mut r).unwrap();
        let enc: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let batch = vec![
            example(vec![2, 3, 4], (0, 1), (2, 3), 1),
            example(vec![5, 6, 7, 8], (0, 1), (3, 4), 0),
            example(vec![9, 3, 10], (0, 1), (2, 3), 1),
            example(vec![11, 2], (0, 1), (1, 2), 0),
        ];
        (m, space, enc, batch)
    }

    #[test]
    fn joint_loss_decomposes() {
        let (mut m, mut space, enc, batch) = transfer_fixture(4);
        let refs: Vec<&EventPairExample> = batch.iter().collect();
        let ext: Vec<&[f64]> = enc.iter().map(|v| v.as_slice()).collect();
        let mut opt = AdamW::new(AdamWConfig::with_lr(1e-3));
        let l = joint_step(&refs, &ext, &mut m, Some(&mut space), &mut opt).unwrap();
        let con = l.contrastive.unwrap();
        assert_eq!(l.total.to_bits(), (l.student + con).to_bits());

        let negs: Vec<&EventPairExample> = refs.iter().copied().filter(|e| e.label == 0).collect();
        let l = joint_step(&negs, &ext, &mut m, Some(&mut space), &mut opt).unwrap();
        assert!(l.contrastive.is_none());
        assert_eq!(l.total.to_bits(), l.student.to_bits());
        assert!(matches!(
            joint_step(&[], &ext, &mut m, Some(&mut space), &mut opt),
            Err(Error::EmptyBatch)
        ));
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

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (model, space, enc, batch) = transfer_fixture(5);
        let refs: Vec<&EventPairExample> = batch.iter().collect();
        let ext: Vec<&[f64]> = enc.iter().map(|v| v.as_slice()).collect();
        let mut j = Joint { model, space };
        let rep = finite_difference_check(&mut j, 1e-5, |tape, j| {
            Ok(joint_loss(tape, &refs, &ext, &j.model, Some(&j.space))?.0)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn learns_separable_toy_task() {
        // Label is 1 iff the first token is 2.
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let exs: Vec<EventPairExample> = (0..60)
            .map(|_| {
                let first = if r.random_bool(0.5) { 2 } else { 3 };
                let tail = r.random_range(4..12);
                example(vec![first, tail, 5], (0, 1), (2, 3), (first == 2) as u8)
            })
            .collect();
        let cfg = IdentifierConfig {
            learning_rate: 1e-2,
            max_epochs: 15,
            negative_keep_rate: 1.0,
            ..IdentifierConfig::default()
        };
        let trained = train_identifier(model(6), None, &exs[..40], &exs[40..50], &cfg).unwrap();
        let c = evaluate(&exs[50..], &trained.model, 0.5).unwrap();
        assert!(c.f1() > 0.9, "{c:?}");
        assert!(trained.best_epoch <= trained.history.len());
    }
}
