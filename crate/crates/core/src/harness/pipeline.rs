use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{FoldRow, MetricReport};
use super::{RunConfig, Variant};
use crate::conrt::{TeacherHandle, TransferSpace};
use crate::corpus::{
    generate_synthetic, load_jsonl, make_folds_with_dev, pseudo_example, CausalStatement, EciRecord, FoldPlan,
};
use crate::encoders::{tokenize, BiLstmEncoder, FrozenEmbeddingProvider, MlpHead, Vocabulary};
use crate::error::{Error, Result};
use crate::identifier::{evaluate, train_identifier, EventPairExample, IdentifierModel, Transfer};
use crate::numeric::params::set_trainable;
use crate::numeric::{Checkpoint, Tensor};
use crate::selfrl::{train_selfrl_with, OnlineNetwork, SelfRLStats, SelfRLTrainer, StepStats, TargetNetwork};

pub const EXTERNAL_FILE: &str = "external.jsonl";
pub const ECI_FILE: &str = "eci.jsonl";

/// Derives an independent stream seed from a run seed and a purpose tag.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_PROVIDER: u64 = 1;
const TAG_SELFRL: u64 = 2;
const TAG_MODEL: u64 = 100;
const TAG_SPACE: u64 = 200;
const TAG_TRAIN: u64 = 300;

pub fn jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusChecksums {
    pub external_sha256: String,
    pub eci_sha256: String,
    pub n_external: usize,
    pub n_eci: usize,
}

/// Corpora in surface and index form.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub external: Vec<CausalStatement>,
    pub records: Vec<EciRecord>,
    pub vocab: Vocabulary,
    pub external_tokens: Vec<Vec<usize>>,
    pub examples: Vec<EventPairExample>,
    pub checksums: CorpusChecksums,
}

impl Dataset {
    pub fn new(external: Vec<CausalStatement>, records: Vec<EciRecord>) -> Result<Self> {
        if external.is_empty() || records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let checksums = CorpusChecksums {
            external_sha256: sha256_hex(&jsonl_bytes(&external)?),
            eci_sha256: sha256_hex(&jsonl_bytes(&records)?),
            n_external: external.len(),
            n_eci: records.len(),
        };
        let ext_tok: Vec<Vec<String>> = external.iter().map(|s| tokenize(&s.converted)).collect();
        let vocab = Vocabulary::build(
            ext_tok
                .iter()
                .flatten()
                .chain(records.iter().flat_map(|r| r.tokens.iter()))
                .map(String::as_str),
        );
        let external_tokens = ext_tok.iter().map(|t| vocab.encode(t)).collect();
        let examples = records
            .iter()
            .map(|r| EventPairExample::from_record(r, &vocab))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            external,
            records,
            vocab,
            external_tokens,
            examples,
            checksums,
        })
    }

    /// Loads from `corpus_dir` when configured, otherwise generates the
    /// synthetic corpus.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.corpus_dir {
            Some(dir) => Self::load(dir),
            None => {
                let c = generate_synthetic(&cfg.synthetic_spec())?;
                Self::new(c.external, c.examples)
            }
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let external = load_jsonl(&dir.join(EXTERNAL_FILE))?;
        let records = load_jsonl(&dir.join(ECI_FILE))?;
        Self::new(external, records)
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.doc_id.as_str()).collect()
    }

    pub fn fold_plan(&self, cfg: &RunConfig) -> Result<FoldPlan> {
        make_folds_with_dev(&self.doc_ids(), cfg.k, cfg.dev_topics, cfg.corpus_seed)
    }

    /// Pseudo-positive examples built from the external statements.
    pub fn pseudo_examples(&self) -> Vec<EventPairExample> {
        self.external
            .iter()
            .enumerate()
            .filter_map(|(i, s)| pseudo_example(s, &format!("ext/{i:05}")))
            .filter_map(|r| EventPairExample::from_record(&r, &self.vocab).ok())
            .collect()
    }
}

/// Train / dev / test examples for one fold.
pub struct Split {
    pub train: Vec<EventPairExample>,
    pub dev: Vec<EventPairExample>,
    pub test: Vec<EventPairExample>,
}

pub fn split(examples: &[EventPairExample], plan: &FoldPlan, fold: usize) -> Split {
    let mut s = Split {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for ex in examples {
        let mut ex = ex.clone();
        if plan.is_dev(&ex.doc_id) {
            s.dev.push(ex);
        } else {
            ex.fold_id = plan.fold_of(&ex.doc_id);
            if ex.fold_id == Some(fold) {
                s.test.push(ex);
            } else {
                s.train.push(ex);
            }
        }
    }
    s
}

pub fn provider_for(cfg: &RunConfig, vocab_len: usize, seed: u64) -> FrozenEmbeddingProvider {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_PROVIDER));
    FrozenEmbeddingProvider::random(vocab_len, cfg.d_emb, cfg.provider_std, &mut rng)
}

/// Trains the stage-one networks for `seed`.
pub fn train_teacher(
    cfg: &RunConfig,
    provider: &FrozenEmbeddingProvider,
    statements: &[Vec<usize>],
    seed: u64,
    observe: &mut dyn FnMut(&StepStats, &SelfRLTrainer) -> Result<()>,
) -> Result<(SelfRLTrainer, SelfRLStats)> {
    let srl = cfg.selfrl_config(sub_seed(seed, TAG_SELFRL));
    train_selfrl_with(provider, statements, &cfg.dims(), &srl, observe)
}

/// The online network a teacher run for `seed` would start from.
pub fn untrained_teacher(cfg: &RunConfig, seed: u64) -> Result<OnlineNetwork> {
    let srl = cfg.selfrl_config(sub_seed(seed, TAG_SELFRL));
    Ok(SelfRLTrainer::new(&cfg.dims(), srl)?.online)
}

/// Everything stage one produces for a seed, with teacher encodings of
/// every external statement cached.
pub struct TeacherContext {
    pub handle: TeacherHandle,
    pub encodings: Vec<Vec<f64>>,
}

impl TeacherContext {
    pub fn new(handle: TeacherHandle, statements: &[Vec<usize>]) -> Result<Self> {
        let encodings = handle.encode_all(statements)?;
        Ok(TeacherContext { handle, encodings })
    }
}

/// Per-seed shared state for all folds and variants.
pub struct SeedContext {
    pub seed: u64,
    pub provider: FrozenEmbeddingProvider,
    pub trained: Option<TeacherContext>,
    pub untrained: Option<TeacherContext>,
}

impl SeedContext {
    pub fn build(cfg: &RunConfig, data: &Dataset, seed: u64, variants: &[Variant]) -> Result<Self> {
        let need_trained = variants.iter().any(|v| v.needs_trained_teacher());
        let need_untrained = variants.contains(&Variant::NoSelfRl);
        let loaded = match (&cfg.teacher_checkpoint, need_trained) {
            (Some(path), true) => Some(TeacherCheckpoint::load(path)?),
            _ => None,
        };
        let provider = match &loaded {
            Some(t) => t.provider.clone(),
            None => provider_for(cfg, data.vocab.len(), seed),
        };
        if provider.vocab_size() != data.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "teacher vocabulary {} vs corpus vocabulary {}",
                provider.vocab_size(),
                data.vocab.len()
            )));
        }
        let trained = if need_trained {
            let online = match loaded {
                Some(t) => t.online,
                None => train_teacher(cfg, &provider, &data.external_tokens, seed, &mut |_, _| Ok(()))?.0.online,
            };
            let handle = TeacherHandle::new(provider.clone(), online.enc);
            Some(TeacherContext::new(handle, &data.external_tokens)?)
        } else {
            None
        };
        let untrained = if need_untrained {
            let handle = TeacherHandle::new(provider.clone(), untrained_teacher(cfg, seed)?.enc);
            Some(TeacherContext::new(handle, &data.external_tokens)?)
        } else {
            None
        };
        Ok(SeedContext {
            seed,
            provider,
            trained,
            untrained,
        })
    }

    fn teacher(&self, variant: Variant) -> Result<&TeacherContext> {
        let t = if variant == Variant::NoSelfRl {
            &self.untrained
        } else {
            &self.trained
        };
        t.as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("no teacher prepared for {variant}")))
    }
}

/// Result of training and testing one identifier.
pub struct FoldOutcome {
    pub row: FoldRow,
    pub model: IdentifierModel,
    pub test: Vec<EventPairExample>,
}

/// Trains the identifier for one variant on one fold and scores the
/// held-out fold.
pub fn run_fold(
    cfg: &RunConfig,
    data: &Dataset,
    plan: &FoldPlan,
    ctx: &SeedContext,
    fold: usize,
    variant: Variant,
) -> Result<FoldOutcome> {
    let Split { mut train, dev, test } = split(&data.examples, plan, fold);
    let dims = cfg.dims();
    let seed = ctx.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_MODEL + fold as u64));
    let mut model = IdentifierModel::new(ctx.provider.to_trainable(), &dims, &mut rng);
    let mut space_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_SPACE + fold as u64));
    let mut space = None;
    let mut encodings: &[Vec<f64>] = &[];

    match variant {
        Variant::Baseline => {}
        Variant::Full | Variant::NoSelfRl => {
            let t = ctx.teacher(variant)?;
            let mut s = TransferSpace::new(
                model.state_dim(),
                t.handle.output_dim(),
                &dims,
                cfg.temperature,
                &mut space_rng,
            )?;
            s.sign = cfg.distance_sign;
            space = Some(s);
            encodings = &t.encodings;
        }
        Variant::NoConRtFrozen | Variant::NoConRtFinetune => {
            let t = ctx.teacher(variant)?;
            let trainable = variant == Variant::NoConRtFinetune;
            let mut encoder = t.handle.encoder().clone();
            set_trainable(&mut encoder, trainable);
            model.encoder = encoder;
            model.embedding = t.handle.provider().to_trainable();
            set_trainable(&mut model.embedding, trainable);
        }
        Variant::StatementsAsData => train.extend(data.pseudo_examples()),
    }

    let icfg = cfg.identifier_config(sub_seed(seed, TAG_TRAIN + fold as u64));
    let transfer = space.as_mut().map(|space| Transfer { space, encodings });
    let trained = train_identifier(model, transfer, &train, &dev, &icfg)?;
    let counts = evaluate(&test, &trained.model, cfg.threshold)?;
    Ok(FoldOutcome {
        row: FoldRow::new(variant.name(), seed, fold, counts, trained.best_epoch),
        model: trained.model,
        test,
    })
}

/// Runs `variants` over every fold and seed. `progress` sees each row as it
/// completes.
pub fn run_variants(
    cfg: &RunConfig,
    data: &Dataset,
    variants: &[Variant],
    progress: &mut dyn FnMut(&FoldRow),
) -> Result<MetricReport> {
    let plan = data.fold_plan(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, data, seed, variants)?;
        for fold in 0..cfg.k {
            for &v in variants {
                let out = run_fold(cfg, data, &plan, &ctx, fold, v)?;
                progress(&out.row);
                rows.push(out.row);
            }
        }
    }
    Ok(MetricReport::from_rows(cfg.k, &cfg.seeds, rows))
}

/// Cross-validation of the configured single variant.
pub fn run_cross_validation(cfg: &RunConfig, data: &Dataset) -> Result<MetricReport> {
    let v: Variant = cfg.variant.parse()?;
    run_variants(cfg, data, &[v], &mut |_| {})
}

/// The configured ablation variants, always including baseline and full.
pub fn ablation_variants(cfg: &RunConfig) -> Result<Vec<Variant>> {
    let mut out = vec![Variant::Baseline, Variant::Full];
    for name in &cfg.variants {
        let v: Variant = name.parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

pub fn run_ablation(cfg: &RunConfig, data: &Dataset, progress: &mut dyn FnMut(&FoldRow)) -> Result<MetricReport> {
    let variants = ablation_variants(cfg)?;
    run_variants(cfg, data, &variants, progress)
}

/// Stage-one networks plus the embedding provider they were trained with.
#[derive(Debug, Clone)]
pub struct TeacherCheckpoint {
    pub provider: FrozenEmbeddingProvider,
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
}

fn shape_of(ck: &Checkpoint, name: &str) -> Result<Vec<usize>> {
    ck.tensors
        .get(name)
        .map(|t| t.shape.clone())
        .ok_or_else(|| Error::Checkpoint(format!("{name} missing")))
}

fn zero_head(ck: &Checkpoint, prefix: &str) -> Result<MlpHead> {
    let first = shape_of(ck, &format!("{prefix}.first.weight"))?;
    let second = shape_of(ck, &format!("{prefix}.second.weight"))?;
    Ok(MlpHead::zeros(first[0], first[1], second[1]))
}

fn zero_encoder(ck: &Checkpoint, prefix: &str) -> Result<BiLstmEncoder> {
    let wx = shape_of(ck, &format!("{prefix}.fwd.wx"))?;
    Ok(BiLstmEncoder::zeros(wx[0], wx[1] / 4))
}

impl TeacherCheckpoint {
    pub fn from_trainer(provider: &FrozenEmbeddingProvider, trainer: &SelfRLTrainer) -> Self {
        TeacherCheckpoint {
            provider: provider.clone(),
            online: trainer.online.clone(),
            target: trainer.target.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::capture(&self.provider, "provider");
        ck.extend(&self.online, "online");
        ck.extend(&self.target, "target");
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds the networks from tensor shapes alone.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pw = ck
            .tensors
            .get("provider.weight")
            .ok_or_else(|| Error::Checkpoint("provider.weight missing".into()))?;
        let provider = FrozenEmbeddingProvider::from_tensor(Tensor::new(pw.shape.clone(), pw.data.clone())?)?;
        let mut online = OnlineNetwork {
            enc: zero_encoder(ck, "online.enc")?,
            proj: zero_head(ck, "online.proj")?,
            pred: zero_head(ck, "online.pred")?,
        };
        ck.restore(&mut online, "online")?;
        let mut target = TargetNetwork::copy_of(&online);
        target.enc = zero_encoder(ck, "target.enc")?;
        target.proj = zero_head(ck, "target.proj")?;
        ck.restore(&mut target, "target")?;
        set_trainable(&mut target, false);
        Ok(TeacherCheckpoint {
            provider,
            online,
            target,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Identifier weights plus the vocabulary needed to encode new input.
pub fn identifier_checkpoint(model: &IdentifierModel) -> Checkpoint {
    Checkpoint::capture(model, "identifier")
}

pub fn load_identifier(ck: &Checkpoint) -> Result<IdentifierModel> {
    let emb = shape_of(ck, "identifier.embedding.weight")?;
    let mut model = IdentifierModel {
        embedding: crate::encoders::EmbeddingTable {
            weight: Tensor::zeros(&emb).trainable(),
        },
        encoder: zero_encoder(ck, "identifier.encoder")?,
        classifier: zero_head(ck, "identifier.classifier")?,
    };
    ck.restore(&mut model, "identifier")?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            seeds: vec![1],
            k: 2,
            vocab_size: 60,
            n_patterns: 6,
            n_external_statements: 40,
            n_eci_examples: 60,
            n_topics: 4,
            docs_per_topic: 2,
            d_emb: 6,
            hidden: 4,
            head_hidden: 5,
            space: 4,
            selfrl_lr: 1e-3,
            selfrl_steps: 3,
            selfrl_batch_size: 8,
            eci_lr: 1e-3,
            max_epochs: 2,
            external_batch_size: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, 1), sub_seed(1, 2));
        assert_ne!(sub_seed(1, 1), sub_seed(2, 1));
        assert_eq!(sub_seed(5, 7), sub_seed(5, 7));
    }

    #[test]
    fn split_partitions_examples() {
        let cfg = tiny_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let plan = data.fold_plan(&cfg).unwrap();
        let s = split(&data.examples, &plan, 1);
        assert_eq!(s.train.len() + s.dev.len() + s.test.len(), data.examples.len());
        assert!(s.test.iter().all(|e| e.fold_id == Some(1)));
        assert!(s.dev.iter().all(|e| plan.is_dev(&e.doc_id)));
    }

    #[test]
    fn teacher_checkpoint_round_trip() {
        let cfg = tiny_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let provider = provider_for(&cfg, data.vocab.len(), 1);
        let (trainer, _) = train_teacher(&cfg, &provider, &data.external_tokens, 1, &mut |_, _| Ok(())).unwrap();
        let t = TeacherCheckpoint::from_trainer(&provider, &trainer);
        let back = TeacherCheckpoint::from_checkpoint(&t.to_checkpoint()).unwrap();
        assert_eq!(crate::numeric::checksum(&back.online), crate::numeric::checksum(&t.online));
        assert_eq!(crate::numeric::checksum(&back.target), crate::numeric::checksum(&t.target));
        assert_eq!(back.provider.weight(), t.provider.weight());
    }

    #[test]
    fn ablation_always_has_baseline_and_full() {
        let cfg = RunConfig {
            variants: vec!["no-selfrl".into()],
            ..tiny_config()
        };
        assert_eq!(
            ablation_variants(&cfg).unwrap(),
            vec![Variant::Baseline, Variant::Full, Variant::NoSelfRl]
        );
    }
}
