use serde::{Deserialize, Serialize};

use crate::identifier::{prf1, Counts};

/// One fold of one seed of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub variant: String,
    pub seed: u64,
    pub fold: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_epoch: usize,
}

impl FoldRow {
    pub fn new(variant: &str, seed: u64, fold: usize, c: Counts, best_epoch: usize) -> Self {
        let (precision, recall, f1) = prf1(c.tp, c.fp, c.fn_);
        FoldRow {
            variant: variant.to_string(),
            seed,
            fold,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision,
            recall,
            f1,
            best_epoch,
        }
    }

    fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Pooled over folds.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of per-fold F1.
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<SeedSummary>,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
    pub rows: Vec<FoldRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    /// Aggregates rows; variants keep their first-appearance order.
    pub fn from_rows(k: usize, seeds: &[u64], rows: Vec<FoldRow>) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for r in &rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        let variants = names
            .iter()
            .map(|&name| {
                let per_seed: Vec<SeedSummary> = seeds
                    .iter()
                    .map(|&seed| {
                        let mine: Vec<&FoldRow> = rows
                            .iter()
                            .filter(|r| r.variant == name && r.seed == seed)
                            .collect();
                        let mut pooled = Counts::default();
                        for r in &mine {
                            pooled.merge(&r.counts());
                        }
                        let (precision, recall, f1) = prf1(pooled.tp, pooled.fp, pooled.fn_);
                        let fold_f1: Vec<f64> = mine.iter().map(|r| r.f1).collect();
                        SeedSummary {
                            seed,
                            precision,
                            recall,
                            f1,
                            macro_f1: mean_std(&fold_f1).0,
                        }
                    })
                    .collect();
                let f1s: Vec<f64> = per_seed.iter().map(|s| s.f1).collect();
                let macros: Vec<f64> = per_seed.iter().map(|s| s.macro_f1).collect();
                let (mean_f1, std_f1) = mean_std(&f1s);
                let (mean_macro_f1, std_macro_f1) = mean_std(&macros);
                VariantSummary {
                    variant: name.to_string(),
                    seeds: per_seed,
                    mean_f1,
                    std_f1,
                    mean_macro_f1,
                    std_macro_f1,
                }
            })
            .collect();
        MetricReport {
            k,
            seeds: seeds.to_vec(),
            variants,
            rows,
        }
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,fold,tp,fp,fn,precision,recall,f1,best_epoch\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.variant, r.seed, r.fold, r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1, r.best_epoch
            ));
        }
        out
    }

    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        let mut out = format!("{:<20} {:>8} {:>8} {:>10}\n", "variant", "mean F1", "std", "macro F1");
        for v in &self.variants {
            out.push_str(&format!(
                "{:<20} {:>8.4} {:>8.4} {:>10.4}\n",
                v.variant, v.mean_f1, v.std_f1, v.mean_macro_f1
            ));
        }
        out
    }
}
