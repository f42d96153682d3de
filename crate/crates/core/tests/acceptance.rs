//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use causerl::conrt::{contrastive_loss, DistanceSign};
use causerl::corpus::{convert_statement, Resource};
use causerl::encoders::{FrozenEmbeddingProvider, ModelDims};
use causerl::harness::pipeline::{provider_for, run_fold, untrained_teacher, SeedContext};
use causerl::harness::{
    cmd_evaluate, run_gradcheck, run_variants, Dataset, Manifest, MetricReport, RunConfig, Variant,
};
use causerl::numeric::{checksum, normalized_mse, Parameterized, Tape, Var};
use causerl::selfrl::{
    ema_update, evaluate_loss, online_target_distance, selfrl_loss, OnlineNetwork, SelfRLTrainer, TargetNetwork,
};

// Gradient oracle.
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_SEEDS: usize = 20;
const GRAD_BUDGET_SECS: f64 = 120.0;
// Normalized squared error algebra.
const MSE_PAIRS: usize = 1000;
const MSE_TOL: f64 = 1e-12;
// Swap symmetry.
const SWAP_PAIRS: usize = 100;
// Moving average.
const EMA_TAU: f64 = 0.996;
const EMA_STEPS: i32 = 100;
const EMA_REL_TOL: f64 = 1e-10;
// Contrastive closed forms.
const UNIFORM_TOL: f64 = 1e-9;
// Printed to four places; compared against the exact value below.
const HAND_VALUE_4DP: f64 = -1.3133;
const HAND_TOL: f64 = 1e-6;
const MONOTONE_CONFIGS: usize = 1000;
// Non-collapse.
const COLLAPSE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MIN_PROJ_STD: f64 = 1e-3;
// Cross-validation budget for the full model.
const CV_BUDGET_SECS: f64 = 600.0;

/// Desk-scale run settings used by every end-to-end criterion.
fn desk(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_path_buf(),
        selfrl_lr: 1e-3,
        selfrl_steps: 300,
        eci_lr: 1e-3,
        temperature: 1.0,
        ..RunConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let summary = run_gradcheck(GRAD_SEEDS, GRAD_STEP, None).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let worst: Vec<String> = summary
        .surfaces
        .iter()
        .map(|s| format!("{} {:.2e}", s.surface, s.max_rel_error))
        .collect();
    let pass = summary.surfaces.len() == 4
        && summary.surfaces.iter().all(|s| s.max_rel_error < GRAD_TOL)
        && secs < GRAD_BUDGET_SECS;
    outcome(pass, format!("{}; {secs:.1}s", worst.join(", ")))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized_mse_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut out_of_bounds = 0;
    for i in 0..MSE_PAIRS {
        let n = rng.random_range(1..17);
        let y = normal_vec(&mut rng, n);
        // Every tenth pair is nearly anti-parallel to probe the upper bound.
        let z = if i % 10 == 0 {
            y.iter().map(|v| -v * 3.0 + 1e-3 * rng.random::<f64>()).collect()
        } else {
            normal_vec(&mut rng, n)
        };
        let dot: f64 = y.iter().zip(&z).map(|(a, b)| a * b).sum();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
        let expected = 2.0 - 2.0 * dot / (ny * nz);
        let mut tape = Tape::new();
        let yv = tape.vector(y);
        let zv = tape.vector(z);
        let l = normalized_mse(&mut tape, yv, zv).unwrap();
        let got = tape.scalar(l);
        worst = worst.max((got - expected).abs());
        if !(0.0..=4.0).contains(&got) {
            out_of_bounds += 1;
        }
    }
    outcome(
        worst < MSE_TOL && out_of_bounds == 0,
        format!("max |diff| {worst:.2e}, {out_of_bounds} out of [0, 4]"),
    )
}

fn small_dims() -> ModelDims {
    ModelDims {
        d_emb: 8,
        hidden: 6,
        head_hidden: 8,
        space: 5,
    }
}

fn random_statement(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<usize> {
    let len = rng.random_range(2..12);
    (0..len).map(|_| rng.random_range(2..vocab)).collect()
}

fn swap_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = small_dims();
    let provider = FrozenEmbeddingProvider::random(40, dims.d_emb, 0.5, &mut rng);
    let online = OnlineNetwork::new(&dims, &mut rng);
    let target = TargetNetwork::new(&dims, &mut rng);
    let mut mismatches = 0;
    for _ in 0..SWAP_PAIRS {
        let a = random_statement(&mut rng, 40);
        let b = random_statement(&mut rng, 40);
        let mut tape = Tape::new();
        let ab = selfrl_loss(&mut tape, &provider, &a, &b, &online, &target).unwrap();
        let ba = selfrl_loss(&mut tape, &provider, &b, &a, &online, &target).unwrap();
        if tape.scalar(ab).to_bits() != tape.scalar(ba).to_bits() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of {SWAP_PAIRS} pairs differ"))
}

fn target_grad_is_zero(tape: &Tape, target: &TargetNetwork) -> bool {
    let mut zero = true;
    target.visit("", &mut |_, t| {
        if let Some(g) = tape.param_grad(t) {
            zero &= g.iter().all(|&x| x == 0.0);
        }
    });
    zero
}

fn online_grad_is_nonzero(tape: &Tape, online: &OnlineNetwork) -> bool {
    let mut any = false;
    online.visit("", &mut |_, t| {
        if let Some(g) = tape.param_grad(t) {
            any |= g.iter().any(|&x| x != 0.0);
        }
    });
    any
}

fn freezing_contracts(data: &Dataset) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = small_dims();
    let provider = FrozenEmbeddingProvider::random(40, dims.d_emb, 0.5, &mut rng);
    let online = OnlineNetwork::new(&dims, &mut rng);
    let target = TargetNetwork::new(&dims, &mut rng);
    let mut leaked = 0;
    for _ in 0..SWAP_PAIRS {
        let a = random_statement(&mut rng, 40);
        let b = random_statement(&mut rng, 40);
        let mut tape = Tape::new();
        let l = selfrl_loss(&mut tape, &provider, &a, &b, &online, &target).unwrap();
        tape.backward(l).unwrap();
        if !target_grad_is_zero(&tape, &target) || !online_grad_is_nonzero(&tape, &online) {
            leaked += 1;
        }
    }

    // Whole runs: teacher training, then identifier training with transfer
    // and with the teacher as a frozen encoder.
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk(dir.path());
    let seed = cfg.seeds[0];
    let provider = provider_for(&cfg, data.vocab.len(), seed);
    let provider_before = checksum(&provider);
    let variants = [Variant::Full, Variant::NoSelfRl, Variant::NoConRtFrozen];
    let ctx = SeedContext::build(&cfg, data, seed, &variants).unwrap();
    let teacher = ctx.trained.as_ref().unwrap();
    let teacher_before = teacher.handle.checksum();
    let untrained_before = ctx.untrained.as_ref().unwrap().handle.checksum();
    let enc_before = checksum(teacher.handle.encoder());
    let plan = data.fold_plan(&cfg).unwrap();
    let mut frozen_ok = true;
    for v in variants {
        let out = run_fold(&cfg, data, &plan, &ctx, 0, v).unwrap();
        if v == Variant::NoConRtFrozen {
            frozen_ok &= checksum(&out.model.encoder) == enc_before;
            frozen_ok &= checksum(&out.model.embedding) == checksum(&teacher.handle.provider().to_trainable());
        }
    }
    let provider_ok = checksum(&ctx.provider) == provider_before
        && checksum(teacher.handle.provider()) == provider_before;
    let teacher_ok = teacher.handle.checksum() == teacher_before
        && ctx.untrained.as_ref().unwrap().handle.checksum() == untrained_before;
    outcome(
        leaked == 0 && provider_ok && teacher_ok && frozen_ok,
        format!(
            "target grad nonzero in {leaked} of {SWAP_PAIRS}; provider {}; teacher {}; frozen encoder {}",
            if provider_ok { "unchanged" } else { "CHANGED" },
            if teacher_ok { "unchanged" } else { "CHANGED" },
            if frozen_ok { "unchanged" } else { "CHANGED" },
        ),
    )
}

fn ema_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = small_dims();
    let online = OnlineNetwork::new(&dims, &mut rng);
    let mut target = TargetNetwork::new(&dims, &mut rng);
    let d0 = online_target_distance(&online, &target);
    let mut worst = 0.0f64;
    for k in 1..=EMA_STEPS {
        ema_update(&mut target, &online, EMA_TAU).unwrap();
        let expected = d0 * EMA_TAU.powi(k);
        worst = worst.max(((online_target_distance(&online, &target) - expected) / expected).abs());
    }
    let frozen = checksum(&target);
    ema_update(&mut target, &online, 1.0).unwrap();
    let hold = checksum(&target) == frozen;
    ema_update(&mut target, &online, 0.0).unwrap();
    let copy = online_target_distance(&online, &target) == 0.0;
    outcome(
        worst < EMA_REL_TOL && hold && copy,
        format!("max rel err {worst:.2e}; tau=1 holds {hold}; tau=0 copies {copy}"),
    )
}

/// Vectors placed at the given distances from an anchor at the origin.
fn at_distances(tape: &mut Tape, ds: &[f64]) -> (Vec<Var>, Var) {
    let anchor = tape.vector(vec![0.0, 0.0]);
    let all = ds.iter().map(|&d| tape.vector(vec![d, 0.0])).collect();
    (all, anchor)
}

fn con_value(ds: &[f64], pos: &[usize], t: f64, sign: DistanceSign) -> f64 {
    let mut tape = Tape::new();
    let (all, a) = at_distances(&mut tape, ds);
    let l = contrastive_loss(&mut tape, &all, pos, a, t, sign).unwrap();
    tape.scalar(l)
}

fn contrastive_closed_forms() -> Outcome {
    let uniform = con_value(&[0.4; 4], &[1], 0.1, DistanceSign::Literal);
    let uniform_err = (uniform - 0.25f64.ln()).abs();
    let singleton = con_value(&[0.7], &[0], 0.1, DistanceSign::Literal);
    let hand = con_value(&[0.0, 0.1], &[0], 0.1, DistanceSign::Literal);
    let exact = -(1.0 + 1f64.exp()).ln();
    let hand_err = (hand - exact).abs();
    let rounds = ((hand * 1e4).round() / 1e4 - HAND_VALUE_4DP).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for i in 0..MONOTONE_CONFIGS {
        let n = rng.random_range(2..9);
        let ds: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
        let p = rng.random_range(0..n);
        let t = rng.random_range(0.05..2.0);
        let mut closer = ds.clone();
        closer[p] *= rng.random_range(0.1..0.99);
        let sign = if i % 2 == 0 {
            DistanceSign::Literal
        } else {
            DistanceSign::Negated
        };
        if con_value(&closer, &[p], t, sign) >= con_value(&ds, &[p], t, sign) {
            violations += 1;
        }
    }
    outcome(
        uniform_err < UNIFORM_TOL && singleton == 0.0 && hand_err < HAND_TOL && rounds && violations == 0,
        format!(
            "uniform err {uniform_err:.1e}; singleton {singleton}; pair {hand:.6} (err {hand_err:.1e}); \
             {violations} of {MONOTONE_CONFIGS} non-monotone"
        ),
    )
}

const REFERENCE_ROWS: [(Resource, &str, &str); 4] = [
    (
        Resource::GluSpe,
        "Billy finds his childhood teddy bear >Cause/Enable> Billy gives his childhood teddy bear to his daughter",
        "Billy finds his childhood teddy bear, billy gives his childhood teddy bear to his daughter.",
    ),
    (
        Resource::GluGen,
        "Someone_A finds Something_A >Cause/Enable> Someone_A gives Something_A to Someone_B",
        "Someone_A finds Something_A, Someone_A gives Something_A to Someone_B.",
    ),
    (
        Resource::Atomic,
        "PersonX follows PersonY into room >oWant> to know why PersonX is following them",
        "PersonX follows PersonY into room, to know why PersonX is following them.",
    ),
    (
        Resource::Distant,
        "Fisk was shot to death by his mistress's new lover and Fisk's ex-business partner.",
        "Fisk was shot to death by his mistress's new lover and Fisk's ex-business partner.",
    ),
];

fn statement_conversion(data: &Dataset) -> Outcome {
    let exact = REFERENCE_ROWS
        .iter()
        .filter(|(r, original, converted)| convert_statement(original, *r).unwrap() == *converted)
        .count();
    let mut broken = 0;
    let mut checked = 0;
    let reference = REFERENCE_ROWS.iter().map(|(r, _, c)| (*r, c.to_string()));
    let corpus = data.external.iter().map(|s| (s.resource, s.converted.clone()));
    for (resource, converted) in reference.chain(corpus) {
        checked += 1;
        if convert_statement(&converted, resource).unwrap() != converted {
            broken += 1;
        }
    }
    for s in &data.external {
        checked += 1;
        if convert_statement(&s.original, s.resource).unwrap() != s.converted {
            broken += 1;
        }
    }
    outcome(
        exact == REFERENCE_ROWS.len() && broken == 0,
        format!("{exact}/4 reference rows exact; {broken} of {checked} idempotence checks fail"),
    )
}

fn non_collapse(data: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk(dir.path());
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in COLLAPSE_SEEDS {
        let provider = provider_for(&cfg, data.vocab.len(), seed);
        let online = untrained_teacher(&cfg, seed).unwrap();
        let target = TargetNetwork::copy_of(&online);
        let before = evaluate_loss(&provider, &data.external_tokens, &online, &target, seed).unwrap();
        let srl = cfg.selfrl_config(seed);
        let mut trainer = SelfRLTrainer::with_networks(online, target, srl).unwrap();
        let mut min_std = f64::INFINITY;
        for _ in 0..cfg.selfrl_steps {
            let s = trainer.step(&provider, &data.external_tokens).unwrap();
            min_std = min_std.min(s.proj_std);
        }
        let after = evaluate_loss(&provider, &data.external_tokens, &trainer.online, &trainer.target, seed).unwrap();
        pass &= after < before && min_std > MIN_PROJ_STD;
        parts.push(format!("seed {seed}: {before:.3} -> {after:.4}, min std {min_std:.4}"));
    }
    outcome(pass, format!("{} steps; {}", cfg.selfrl_steps, parts.join("; ")))
}

struct Ablation {
    report: MetricReport,
    full_secs: f64,
}

fn run_ablation_suite(data: &Dataset) -> Ablation {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk(dir.path());
    let start = Instant::now();
    let full = run_variants(&cfg, data, &[Variant::Full], &mut |_| {}).unwrap();
    let full_secs = start.elapsed().as_secs_f64();
    let rest = [
        Variant::Baseline,
        Variant::NoSelfRl,
        Variant::NoConRtFrozen,
        Variant::NoConRtFinetune,
        Variant::StatementsAsData,
    ];
    let others = run_variants(&cfg, data, &rest, &mut |_| {}).unwrap();
    let mut rows = full.rows;
    rows.extend(others.rows);
    Ablation {
        report: MetricReport::from_rows(cfg.k, &cfg.seeds, rows),
        full_secs,
    }
}

fn mean_f1(report: &MetricReport, v: Variant) -> f64 {
    report.variant(v.name()).expect("variant present").mean_f1
}

fn transfer_gain(ab: &Ablation) -> Outcome {
    let r = &ab.report;
    let full = mean_f1(r, Variant::Full);
    let base = mean_f1(r, Variant::Baseline);
    let no_selfrl = mean_f1(r, Variant::NoSelfRl);
    let frozen = mean_f1(r, Variant::NoConRtFrozen);
    let finetune = mean_f1(r, Variant::NoConRtFinetune);
    let checks = [
        ("full > baseline", full > base),
        ("full >= no-selfrl", full >= no_selfrl),
        ("full >= no-conrt-frozen", full >= frozen),
        ("full >= no-conrt-finetune", full >= finetune),
        ("full CV < 10 min", ab.full_secs < CV_BUDGET_SECS),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "full {full:.4}, baseline {base:.4}, no-selfrl {no_selfrl:.4}, no-conrt-frozen {frozen:.4}, \
             no-conrt-finetune {finetune:.4}; full CV {:.0}s{}",
            ab.full_secs,
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            }
        ),
    )
}

fn statements_as_data(ab: &Ablation) -> Outcome {
    let full = mean_f1(&ab.report, Variant::Full);
    let sad = mean_f1(&ab.report, Variant::StatementsAsData);
    outcome(sad < full, format!("statements-as-data {sad:.4} vs full {full:.4}"))
}

fn manifest_determinism(data: &Dataset) -> Outcome {
    let first = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seeds: vec![1],
        variant: "full".into(),
        ..desk(first.path())
    };
    cmd_evaluate(&cfg, data).unwrap();
    let manifest_path = first.path().join("manifest.json");
    let manifest = Manifest::load(&manifest_path).unwrap();
    let second = tempfile::tempdir().unwrap();
    let mut again = RunConfig::load(&manifest_path).unwrap();
    again.out_dir = second.path().to_path_buf();
    let rebuilt = Dataset::from_config(&again).unwrap();
    let corpus_ok = manifest.verify_corpus(&rebuilt).is_ok();
    cmd_evaluate(&again, &rebuilt).unwrap();
    let a = std::fs::read(first.path().join("report.json")).unwrap();
    let b = std::fs::read(second.path().join("report.json")).unwrap();
    let c = std::fs::read(first.path().join("report.csv")).unwrap();
    let d = std::fs::read(second.path().join("report.csv")).unwrap();
    outcome(
        corpus_ok && a == b && c == d,
        format!("corpus checksums match {corpus_ok}; report.json identical {}; report.csv identical {}", a == b, c == d),
    )
}

fn main() {
    let total = Instant::now();
    let scratch = tempfile::tempdir().unwrap();
    let data = Dataset::from_config(&desk(scratch.path())).expect("default corpus");

    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!("criterion {n:>2} {tag} {name}: {}", o.detail);
    };

    report(1, "gradient oracle", gradient_oracle());
    report(2, "normalized squared error algebra", normalized_mse_algebra());
    report(3, "swap symmetry", swap_symmetry());
    report(4, "stop-gradient and freezing", freezing_contracts(&data));
    report(5, "moving-average algebra", ema_algebra());
    report(6, "contrastive closed forms", contrastive_closed_forms());
    report(7, "statement conversion", statement_conversion(&data));
    report(8, "teacher non-collapse", non_collapse(&data));
    let ablation = run_ablation_suite(&data);
    report(9, "transfer gain ordering", transfer_gain(&ablation));
    report(10, "statements as data", statements_as_data(&ablation));
    report(11, "manifest determinism", manifest_determinism(&data));

    println!("acceptance: {} of 11 passed in {:.0}s", 11 - failures, total.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
