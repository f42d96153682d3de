use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::gradcheck::{run_gradcheck, GradCheckSummary};
use super::pipeline::{
    identifier_checkpoint, jsonl_bytes, run_fold, sha256_hex, train_teacher, CorpusChecksums, Dataset,
    SeedContext, TeacherCheckpoint, ECI_FILE, EXTERNAL_FILE,
};
use super::report::MetricReport;
use super::{run_ablation, run_cross_validation, RunConfig, Variant};
use crate::corpus::{generate_synthetic, load_json, save_json, save_jsonl};
use crate::error::{Error, Result};
use crate::identifier::predict_all;

/// Everything needed to re-run a command and check its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub corpus: CorpusChecksums,
    /// SHA-256 of `report.json`, for commands that write one.
    pub report_sha256: Option<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    /// Fails if `data` is not the corpus this manifest was written for.
    pub fn verify_corpus(&self, data: &Dataset) -> Result<()> {
        if self.corpus != data.checksums {
            return Err(Error::InvalidConfig(format!(
                "corpus checksums differ from manifest: {:?} vs {:?}",
                data.checksums, self.corpus
            )));
        }
        Ok(())
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    corpus: &CorpusChecksums,
    report_sha256: Option<String>,
    outputs: &[&str],
) -> Result<()> {
    let m = Manifest {
        command: command.to_string(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        corpus: corpus.clone(),
        report_sha256,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    save_json(&dir.join("manifest.json"), &m)
}

/// Serialized report bytes; identical runs give identical bytes.
pub fn report_bytes(report: &MetricReport) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(report)?;
    v.push(b'\n');
    Ok(v)
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<String> {
    let bytes = report_bytes(report)?;
    fs::write(dir.join("report.json"), &bytes)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    Ok(sha256_hex(&bytes))
}

/// Writes the synthetic corpus, its templates and the fold plan.
pub fn cmd_gen_corpus(cfg: &RunConfig) -> Result<Dataset> {
    let dir = out_dir(cfg)?;
    let corpus = generate_synthetic(&cfg.synthetic_spec())?;
    fs::write(dir.join(EXTERNAL_FILE), jsonl_bytes(&corpus.external)?)?;
    fs::write(dir.join(ECI_FILE), jsonl_bytes(&corpus.examples)?)?;
    save_json(&dir.join("templates.json"), &corpus.templates)?;
    let data = Dataset::new(corpus.external, corpus.examples)?;
    save_json(&dir.join("folds.json"), &data.fold_plan(cfg)?)?;
    write_manifest(
        &dir,
        "gen-corpus",
        cfg,
        &data.checksums,
        None,
        &[EXTERNAL_FILE, ECI_FILE, "templates.json", "folds.json"],
    )?;
    Ok(data)
}

/// Trains the teacher for the first configured seed; writes per-step
/// statistics and checkpoints.
pub fn cmd_train_selfrl(cfg: &RunConfig, data: &Dataset) -> Result<TeacherCheckpoint> {
    let dir = out_dir(cfg)?;
    let seed = cfg.seeds[0];
    let provider = super::pipeline::provider_for(cfg, data.vocab.len(), seed);
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("selfrl_stats.jsonl"))?);
    let every = cfg.checkpoint_every;
    let (trainer, _) = train_teacher(cfg, &provider, &data.external_tokens, seed, &mut |s, tr| {
        serde_json::to_writer(&mut log, s)?;
        log.write_all(b"\n")?;
        if every > 0 && s.step % every == 0 {
            TeacherCheckpoint::from_trainer(&provider, tr).save(&dir.join(format!("teacher_step{:06}.json", s.step)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let ck = TeacherCheckpoint::from_trainer(&provider, &trainer);
    ck.save(&dir.join("teacher.json"))?;
    save_json(&dir.join("vocab.json"), &data.vocab)?;
    write_manifest(
        &dir,
        "train-selfrl",
        cfg,
        &data.checksums,
        None,
        &["selfrl_stats.jsonl", "teacher.json", "vocab.json"],
    )?;
    Ok(ck)
}

/// Trains one identifier (configured variant, first seed) with
/// `test_fold` held out; writes the model and its predictions.
pub fn cmd_train_eci(cfg: &RunConfig, data: &Dataset) -> Result<crate::harness::FoldRow> {
    let dir = out_dir(cfg)?;
    let variant: Variant = cfg.variant.parse()?;
    if cfg.test_fold >= cfg.k {
        return Err(Error::InvalidConfig(format!("test_fold {} >= k {}", cfg.test_fold, cfg.k)));
    }
    let plan = data.fold_plan(cfg)?;
    let ctx = SeedContext::build(cfg, data, cfg.seeds[0], &[variant])?;
    let out = run_fold(cfg, data, &plan, &ctx, cfg.test_fold, variant)?;
    identifier_checkpoint(&out.model).save(&dir.join("identifier.json"))?;
    save_json(&dir.join("vocab.json"), &data.vocab)?;
    save_jsonl(
        &dir.join("predictions.jsonl"),
        &predict_all(&out.test, &out.model, cfg.threshold)?,
    )?;
    write_manifest(
        &dir,
        "train-eci",
        cfg,
        &data.checksums,
        None,
        &["identifier.json", "vocab.json", "predictions.jsonl"],
    )?;
    Ok(out.row)
}

pub fn cmd_evaluate(cfg: &RunConfig, data: &Dataset) -> Result<MetricReport> {
    let dir = out_dir(cfg)?;
    let report = run_cross_validation(cfg, data)?;
    let sha = write_report(&dir, &report)?;
    write_manifest(&dir, "evaluate", cfg, &data.checksums, Some(sha), &["report.json", "report.csv"])?;
    Ok(report)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &Dataset,
    progress: &mut dyn FnMut(&crate::harness::FoldRow),
) -> Result<MetricReport> {
    let dir = out_dir(cfg)?;
    let report = run_ablation(cfg, data, progress)?;
    let sha = write_report(&dir, &report)?;
    write_manifest(&dir, "ablate", cfg, &data.checksums, Some(sha), &["report.json", "report.csv"])?;
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckSummary> {
    let dir = out_dir(cfg)?;
    let summary = run_gradcheck(cfg.gradcheck_seeds, cfg.gradcheck_step, cfg.fault()?)?;
    save_json(&dir.join("gradcheck.json"), &summary)?;
    Ok(summary)
}
