//! Self-supervised statement representation learning with an online network
//! regressing a slowly moving target network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{pool_statement, BiLstmEncoder, Binding, FrozenEmbeddingProvider, MlpHead, ModelDims};
use crate::error::{Error, Result};
use crate::numeric::params::{join, named_params, pull_grads, set_trainable};
use crate::numeric::{collapse_diagnostic, normalized_mse, AdamW, AdamWConfig, Parameterized, Tape, Var};

/// Encoder, projector and predictor. All three are trained.
#[derive(Debug, Clone)]
pub struct OnlineNetwork {
    pub enc: BiLstmEncoder,
    pub proj: MlpHead,
    pub pred: MlpHead,
}

/// Same layout as the online network without a predictor. Only ever moved
/// by [`ema_update`].
#[derive(Debug, Clone)]
pub struct TargetNetwork {
    pub enc: BiLstmEncoder,
    pub proj: MlpHead,
}

impl OnlineNetwork {
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        OnlineNetwork {
            enc: BiLstmEncoder::new(dims.d_emb, dims.hidden, rng),
            proj: MlpHead::new(2 * dims.hidden, dims.head_hidden, dims.space, rng),
            pred: MlpHead::new(dims.space, dims.head_hidden, dims.space, rng),
        }
    }

    /// Pooled encoder output `[2h]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        provider: &FrozenEmbeddingProvider,
        tokens: &[usize],
        binding: Binding,
    ) -> Result<Var> {
        let e = provider.embed(tape, tokens)?;
        let h = self.enc.encode(tape, e, binding)?;
        pool_statement(tape, h)
    }

    /// Returns `(projection, prediction)`.
    fn forward(
        &self,
        tape: &mut Tape,
        provider: &FrozenEmbeddingProvider,
        tokens: &[usize],
    ) -> Result<(Var, Var)> {
        let r = self.encode(tape, provider, tokens, Binding::Param)?;
        let z = self.proj.forward(tape, r, Binding::Param)?;
        let y = self.pred.forward(tape, z, Binding::Param)?;
        Ok((z, y))
    }
}

impl Parameterized for OnlineNetwork {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a crate::numeric::Tensor)) {
        self.enc.visit(&join(prefix, "enc"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.pred.visit(&join(prefix, "pred"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut crate::numeric::Tensor)) {
        self.enc.visit_mut(&join(prefix, "enc"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.pred.visit_mut(&join(prefix, "pred"), f);
    }
}

impl TargetNetwork {
    /// Fresh, independently initialized weights.
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        let mut t = TargetNetwork {
            enc: BiLstmEncoder::new(dims.d_emb, dims.hidden, rng),
            proj: MlpHead::new(2 * dims.hidden, dims.head_hidden, dims.space, rng),
        };
        set_trainable(&mut t, false);
        t
    }

    /// A copy of the online encoder and projector (new tensor identities).
    pub fn copy_of(online: &OnlineNetwork) -> Self {
        let mut t = TargetNetwork {
            enc: online.enc.clone(),
            proj: online.proj.clone(),
        };
        set_trainable(&mut t, false);
        t
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        provider: &FrozenEmbeddingProvider,
        tokens: &[usize],
    ) -> Result<Var> {
        let e = provider.embed(tape, tokens)?;
        let h = self.enc.encode(tape, e, Binding::Param)?;
        let r = pool_statement(tape, h)?;
        self.proj.forward(tape, r, Binding::Param)
    }
}

impl Parameterized for TargetNetwork {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a crate::numeric::Tensor)) {
        self.enc.visit(&join(prefix, "enc"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut crate::numeric::Tensor)) {
        self.enc.visit_mut(&join(prefix, "enc"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `δ ← τ·δ + (1 − τ)·θ` over the encoder and projector.
pub fn ema_update(target: &mut TargetNetwork, online: &OnlineNetwork, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau = {tau} outside [0, 1]")));
    }
    let src: Vec<(String, Vec<usize>, Vec<f64>)> = named_params(&online.enc, "enc")
        .into_iter()
        .chain(named_params(&online.proj, "proj"))
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    let mut i = 0;
    let mut err = None;
    let mut update = |name: String, t: &mut crate::numeric::Tensor| {
        if err.is_some() {
            return;
        }
        match src.get(i) {
            Some((n, shape, data)) if *n == name && shape == t.shape() => {
                for (d, s) in t.data_mut().iter_mut().zip(data) {
                    *d = tau * *d + (1.0 - tau) * s;
                }
            }
            Some((_, shape, _)) => {
                err = Some(Error::ShapeMismatch {
                    op: "ema_update",
                    left: t.shape().to_vec(),
                    right: shape.clone(),
                })
            }
            None => {
                err = Some(Error::ShapeMismatch {
                    op: "ema_update",
                    left: t.shape().to_vec(),
                    right: vec![],
                })
            }
        }
        i += 1;
    };
    target.enc.visit_mut("enc", &mut update);
    target.proj.visit_mut("proj", &mut update);
    if err.is_none() && i != src.len() {
        err = Some(Error::ShapeMismatch {
            op: "ema_update",
            left: vec![i],
            right: vec![src.len()],
        });
    }
    err.map_or(Ok(()), Err)
}

/// ‖θ − δ‖ over the parts both networks share.
pub fn online_target_distance(online: &OnlineNetwork, target: &TargetNetwork) -> f64 {
    let a = named_params(&online.enc, "")
        .into_iter()
        .chain(named_params(&online.proj, ""));
    let b = named_params(&target.enc, "")
        .into_iter()
        .chain(named_params(&target.proj, ""));
    a.zip(b)
        .map(|((_, x), (_, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Random disjoint pairs of batch positions. With an odd batch the last
/// shuffled position sits out.
pub fn pair_statements<R: Rng + ?Sized>(batch_len: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if batch_len < 2 {
        return Err(Error::BatchTooSmall(batch_len));
    }
    let mut idx: Vec<usize> = (0..batch_len).collect();
    idx.shuffle(rng);
    Ok(idx.chunks_exact(2).map(|c| (c[0], c[1])).collect())
}

/// Symmetrized loss for one pair: each statement's online prediction
/// regresses the other's target projection.
pub fn selfrl_loss(
    tape: &mut Tape,
    provider: &FrozenEmbeddingProvider,
    a: &[usize],
    b: &[usize],
    online: &OnlineNetwork,
    target: &TargetNetwork,
) -> Result<Var> {
    let (_, ya) = online.forward(tape, provider, a)?;
    let (_, yb) = online.forward(tape, provider, b)?;
    let za = target.forward(tape, provider, a)?;
    let zb = target.forward(tape, provider, b)?;
    let ab = normalized_mse(tape, ya, zb)?;
    let ba = normalized_mse(tape, yb, za)?;
    tape.add(ab, ba)
}

struct BatchForward {
    loss: Var,
    projections: Vec<Vec<f64>>,
}

/// Mean pair loss over a batch, plus the online projections of every
/// paired statement.
fn batch_loss(
    tape: &mut Tape,
    provider: &FrozenEmbeddingProvider,
    statements: &[&[usize]],
    pairs: &[(usize, usize)],
    online: &OnlineNetwork,
    target: &TargetNetwork,
) -> Result<BatchForward> {
    let mut terms = Vec::with_capacity(pairs.len());
    let mut projections = Vec::with_capacity(2 * pairs.len());
    for &(i, j) in pairs {
        let (zi, yi) = online.forward(tape, provider, statements[i])?;
        let (zj, yj) = online.forward(tape, provider, statements[j])?;
        let ti = target.forward(tape, provider, statements[i])?;
        let tj = target.forward(tape, provider, statements[j])?;
        let ab = normalized_mse(tape, yi, tj)?;
        let ba = normalized_mse(tape, yj, ti)?;
        terms.push(tape.add(ab, ba)?);
        projections.push(tape.value(zi).to_vec());
        projections.push(tape.value(zj).to_vec());
    }
    let stacked = tape.stack(&terms)?;
    let loss = tape.mean(stacked);
    Ok(BatchForward { loss, projections })
}

/// Mean pair loss over a fixed pairing of `statements`, without updates.
pub fn evaluate_loss(
    provider: &FrozenEmbeddingProvider,
    statements: &[Vec<usize>],
    online: &OnlineNetwork,
    target: &TargetNetwork,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = pair_statements(statements.len(), &mut rng)?;
    let mut total = 0.0;
    for &(i, j) in &pairs {
        let mut tape = Tape::new();
        let l = selfrl_loss(&mut tape, provider, &statements[i], &statements[j], online, target)?;
        total += tape.scalar(l);
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfRLConfig {
    pub learning_rate: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Start the target as a copy of the online network.
    pub copy_init: bool,
    pub weight_decay: f64,
}

impl Default for SelfRLConfig {
    fn default() -> Self {
        SelfRLConfig {
            learning_rate: 1e-5,
            tau: 0.996,
            batch_size: 48,
            max_steps: 1000,
            seed: 0,
            copy_init: true,
            weight_decay: 0.01,
        }
    }
}

impl SelfRLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau = {} outside [0, 1]", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("negative learning rate or weight decay".into()));
        }
        Ok(())
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// Collapse diagnostic over the batch's online projections.
    pub proj_std: f64,
    pub theta_delta_dist: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfRLStats {
    pub steps: Vec<StepStats>,
}

impl SelfRLStats {
    pub fn min_proj_std(&self) -> f64 {
        self.steps.iter().map(|s| s.proj_std).fold(f64::INFINITY, f64::min)
    }
}

/// Networks plus optimizer state of a training run.
#[derive(Debug, Clone)]
pub struct SelfRLTrainer {
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    pub optimizer: AdamW,
    config: SelfRLConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl SelfRLTrainer {
    pub fn new(dims: &ModelDims, config: SelfRLConfig) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let online = OnlineNetwork::new(dims, &mut rng);
        let target = if config.copy_init {
            TargetNetwork::copy_of(&online)
        } else {
            TargetNetwork::new(dims, &mut rng)
        };
        Ok(Self::from_networks(online, target, config, rng))
    }

    /// Starts from given networks. The target is made non-trainable.
    pub fn with_networks(online: OnlineNetwork, mut target: TargetNetwork, config: SelfRLConfig) -> Result<Self> {
        config.validate()?;
        set_trainable(&mut target, false);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::from_networks(online, target, config, rng))
    }

    fn from_networks(online: OnlineNetwork, target: TargetNetwork, config: SelfRLConfig, rng: ChaCha8Rng) -> Self {
        let optimizer = AdamW::new(AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::with_lr(config.learning_rate)
        });
        SelfRLTrainer {
            online,
            target,
            optimizer,
            config,
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        }
    }

    pub fn config(&self) -> &SelfRLConfig {
        &self.config
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.config.batch_size.min(n);
        if self.cursor + size > self.order.len() || self.order.len() != n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        batch
    }

    /// One optimizer step on θ followed by the moving-average update of δ.
    pub fn step(&mut self, provider: &FrozenEmbeddingProvider, statements: &[Vec<usize>]) -> Result<StepStats> {
        if statements.len() < 2 {
            return Err(if statements.is_empty() {
                Error::EmptyCorpus
            } else {
                Error::BatchTooSmall(statements.len())
            });
        }
        let batch = self.next_batch(statements.len());
        let toks: Vec<&[usize]> = batch.iter().map(|&i| statements[i].as_slice()).collect();
        let pairs = pair_statements(toks.len(), &mut self.rng)?;
        let mut tape = Tape::new();
        let fwd = batch_loss(&mut tape, provider, &toks, &pairs, &self.online, &self.target)?;
        tape.backward(fwd.loss)?;
        pull_grads(&tape, &mut self.online);
        self.optimizer.step(&mut [("online", &mut self.online)])?;
        ema_update(&mut self.target, &self.online, self.config.tau)?;
        self.target.visit("", &mut |name, t| {
            assert!(
                !self.optimizer.tracks(t.id()),
                "target parameter {name} entered optimizer state"
            );
        });
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: tape.scalar(fwd.loss),
            proj_std: collapse_diagnostic(&fwd.projections)?,
            theta_delta_dist: online_target_distance(&self.online, &self.target),
        })
    }
}

/// Runs `config.max_steps` steps, calling `observe` after each one.
pub fn train_selfrl_with(
    provider: &FrozenEmbeddingProvider,
    statements: &[Vec<usize>],
    dims: &ModelDims,
    config: &SelfRLConfig,
    observe: &mut dyn FnMut(&StepStats, &SelfRLTrainer) -> Result<()>,
) -> Result<(SelfRLTrainer, SelfRLStats)> {
    if statements.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut trainer = SelfRLTrainer::new(dims, config.clone())?;
    let mut stats = SelfRLStats::default();
    for _ in 0..config.max_steps {
        let s = trainer.step(provider, statements)?;
        observe(&s, &trainer)?;
        stats.steps.push(s);
    }
    Ok((trainer, stats))
}

/// Trains and returns the online network whose encoder becomes the teacher.
pub fn train_selfrl(
    provider: &FrozenEmbeddingProvider,
    statements: &[Vec<usize>],
    dims: &ModelDims,
    config: &SelfRLConfig,
) -> Result<(OnlineNetwork, SelfRLStats)> {
    let (trainer, stats) = train_selfrl_with(provider, statements, dims, config, &mut |_, _| Ok(()))?;
    Ok((trainer.online, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{checksum, finite_difference_check, param_distance};

    fn dims() -> ModelDims {
        ModelDims {
            d_emb: 6,
            hidden: 4,
            head_hidden: 5,
            space: 3,
        }
    }

    fn setup(seed: u64) -> (FrozenEmbeddingProvider, OnlineNetwork, TargetNetwork) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = FrozenEmbeddingProvider::random(10, 6, 0.5, &mut rng);
        let o = OnlineNetwork::new(&dims(), &mut rng);
        let t = TargetNetwork::new(&dims(), &mut rng);
        (p, o, t)
    }

    #[test]
    fn pairing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pair_statements(2, &mut rng).unwrap().len(), 1);
        assert_eq!(pair_statements(3, &mut rng).unwrap().len(), 1);
        let pairs = pair_statements(48, &mut rng).unwrap();
        assert_eq!(pairs.len(), 24);
        let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        seen.sort();
        assert_eq!(seen, (0..48).collect::<Vec<_>>());
        assert!(matches!(pair_statements(1, &mut rng), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn ema_examples() {
        let (_, o, t) = setup(1);
        let mut t1 = t.clone();
        ema_update(&mut t1, &o, 1.0).unwrap();
        assert_eq!(checksum(&t1), checksum(&t));
        let mut t0 = t.clone();
        ema_update(&mut t0, &o, 0.0).unwrap();
        for ((_, a), (_, b)) in named_params(&t0.enc, "").iter().zip(named_params(&o.enc, "")) {
            assert_eq!(a.data(), b.data());
        }
        let mut t2 = t.clone();
        let mut o2 = o.clone();
        t2.visit_mut("", &mut |_, x| x.data_mut().fill(0.5));
        o2.visit_mut("", &mut |_, x| x.data_mut().fill(1.5));
        ema_update(&mut t2, &o2, 0.996).unwrap();
        t2.visit("", &mut |_, x| {
            assert!(x.data().iter().all(|v| (v - 0.504).abs() < 1e-15))
        });
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let (_, o, _) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut other = TargetNetwork::new(
            &ModelDims {
                hidden: 5,
                ..dims()
            },
            &mut rng,
        );
        assert!(matches!(
            ema_update(&mut other, &o, 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn loss_is_swap_symmetric_and_bounded() {
        let (p, o, t) = setup(2);
        let a = [2, 3, 4];
        let b = [5, 6];
        let mut tape = Tape::new();
        let ab = selfrl_loss(&mut tape, &p, &a, &b, &o, &t).unwrap();
        let ba = selfrl_loss(&mut tape, &p, &b, &a, &o, &t).unwrap();
        assert_eq!(tape.scalar(ab).to_bits(), tape.scalar(ba).to_bits());
        assert!((0.0..=8.0).contains(&tape.scalar(ab)));
    }

    #[test]
    fn loss_is_zero_when_prediction_matches_target() {
        let (p, mut o, _) = setup(3);
        // Constant projector and predictor outputs pointing the same way.
        o.proj.second.weight.data_mut().fill(0.0);
        o.proj.second.bias.data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        o.pred.second.weight.data_mut().fill(0.0);
        o.pred.second.bias.data_mut().copy_from_slice(&[2.0, 4.0, 6.0]);
        let t = TargetNetwork::copy_of(&o);
        let mut tape = Tape::new();
        let l = selfrl_loss(&mut tape, &p, &[1, 2], &[3, 4, 5], &o, &t).unwrap();
        assert!(tape.scalar(l).abs() < 1e-15);
    }

    #[test]
    fn target_receives_no_gradient() {
        let (p, o, mut t) = setup(4);
        set_trainable(&mut t, true);
        let mut tape = Tape::new();
        let l = selfrl_loss(&mut tape, &p, &[1, 2, 3], &[4, 5], &o, &t).unwrap();
        tape.backward(l).unwrap();
        t.visit("", &mut |name, x| {
            if let Some(g) = tape.param_grad(x) {
                assert!(g.iter().all(|v| *v == 0.0), "{name}");
            }
        });
        let online_norm: f64 = named_params(&o, "")
            .iter()
            .filter_map(|(_, x)| tape.param_grad(x))
            .flatten()
            .map(|g| g * g)
            .sum();
        assert!(online_norm > 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (p, mut o, t) = setup(5);
        let rep = finite_difference_check(&mut o, 1e-5, |tape, m| {
            selfrl_loss(tape, &p, &[1, 2, 3], &[4, 5, 6, 7], m, &t)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn ema_contracts_by_tau_with_fixed_online() {
        let (p, o, t) = setup(6);
        let cfg = SelfRLConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            ..SelfRLConfig::default()
        };
        let mut tr = SelfRLTrainer::with_networks(o, t, cfg).unwrap();
        let stmts: Vec<Vec<usize>> = (0..8).map(|i| vec![2 + i % 8, 3, 4]).collect();
        let d0 = online_target_distance(&tr.online, &tr.target);
        let s = tr.step(&p, &stmts).unwrap();
        let rel = (s.theta_delta_dist - 0.996 * d0).abs() / (0.996 * d0);
        assert!(rel < 1e-12, "{rel}");
    }

    #[test]
    fn training_leaves_provider_untouched() {
        let (p, _, _) = setup(7);
        let before = checksum(&p);
        let stmts: Vec<Vec<usize>> = (0..10).map(|i| vec![2 + i % 8, 3, 4 + i % 5]).collect();
        let cfg = SelfRLConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_steps: 5,
            ..SelfRLConfig::default()
        };
        let (trainer, stats) = train_selfrl_with(&p, &stmts, &dims(), &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(checksum(&p), before);
        assert_eq!(stats.steps.len(), 5);
        assert!(param_distance(&trainer.target.enc, &trainer.online.enc).unwrap() > 0.0);
        assert!(matches!(
            train_selfrl(&p, &[], &dims(), &cfg),
            Err(Error::EmptyCorpus)
        ));
    }
}
