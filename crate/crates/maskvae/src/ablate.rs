//! The hypothesis sweep and its comparison report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use maskvae_core::metrics::{aggregate, MetricReport};
use maskvae_core::vae::{HypothesisConfig, TrainConfig};
use serde::Serialize;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_csv_file};
use crate::train::{train, StepRecord, TrainData};

pub const METRIC_NAMES: [&str; 5] = ["1-ssim", "1-msssim", "1-vif", "l1", "l2"];
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const REPORT_FILE: &str = "report.md";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub hypotheses: Vec<HypothesisConfig>,
    pub seeds: Vec<u64>,
    /// Shared settings; `hypothesis` and `seed` are replaced per run.
    pub base: TrainConfig,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub mean: MetricReport,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisResult {
    pub hypothesis: String,
    pub use_mask: bool,
    pub use_ssim: bool,
    pub use_l1: bool,
    pub use_l2: bool,
    pub runs: Vec<SeedRun>,
    /// Mean over seeds of each run's test-split mean.
    pub mean: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub seeds: Vec<u64>,
    pub split: Split,
    pub manifest_hash: Option<String>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub rows: Vec<HypothesisResult>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone)]
pub struct RunHistory {
    pub hypothesis: u8,
    pub seed: u64,
    pub history: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub result: AblationResult,
    pub histories: Vec<RunHistory>,
    pub seconds: f64,
}

impl AblationResult {
    pub fn row(&self, id: u8) -> Option<&HypothesisResult> {
        self.rows.iter().find(|r| r.hypothesis == format!("H{id}"))
    }
}

/// Trains and evaluates every (hypothesis, seed) pair in plan order. With
/// `out_dir`, each run writes under `<out>/<H>/seed_<s>/` and the combined
/// results and report go to `<out>/`.
pub fn run_ablation(dataset: &Dataset, plan: &AblationPlan, out_dir: Option<&Path>) -> Result<AblationOutcome> {
    if plan.hypotheses.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one hypothesis and one seed".into()));
    }
    let start = Instant::now();
    let res = plan.base.resolution;
    let train_data = TrainData::from_samples(&dataset.load(Split::Train, res)?);
    let test = dataset.load(plan.split, res)?;
    let mut rows = Vec::new();
    let mut histories = Vec::new();
    for hyp in &plan.hypotheses {
        let mut runs = Vec::new();
        for &seed in &plan.seeds {
            let cfg = TrainConfig { hypothesis: hyp.id, seed, ..plan.base };
            let run_dir = out_dir.map(|d| d.join(hyp.name()).join(format!("seed_{seed}")));
            let outcome = train(&train_data, &cfg, run_dir.as_deref())?;
            let eval_rows = evaluate(&outcome.checkpoint.params, &test)?;
            if let Some(dir) = &run_dir {
                write_csv_file(&dir.join(EVAL_FILE), &eval_rows)?;
            }
            let mean = eval_rows.last().cloned().expect("evaluation appends a mean row");
            let summary: Vec<String> =
                METRIC_NAMES.iter().zip(mean.values()).map(|(m, v)| format!("{m} {v:.4}")).collect();
            log::info!("{} seed {seed}: {}", hyp.name(), summary.join(", "));
            runs.push(SeedRun { seed, mean, train_seconds: outcome.seconds });
            histories.push(RunHistory { hypothesis: hyp.id, seed, history: outcome.history });
        }
        let per_seed: Vec<MetricReport> = runs.iter().map(|r| r.mean.clone()).collect();
        let mut mean = aggregate(&per_seed)?;
        mean.image_id = hyp.name();
        rows.push(HypothesisResult {
            hypothesis: hyp.name(),
            use_mask: hyp.use_mask,
            use_ssim: hyp.use_ssim,
            use_l1: hyp.use_l1,
            use_l2: hyp.use_l2,
            runs,
            mean,
        });
    }
    let result = AblationResult {
        rows,
        metadata: Metadata {
            seeds: plan.seeds.clone(),
            split: plan.split,
            manifest_hash: dataset.manifest_hash(),
            config: plan.base,
        },
    };
    if let Some(dir) = out_dir {
        write_outputs(dir, &result)?;
    }
    Ok(AblationOutcome { result, histories, seconds: start.elapsed().as_secs_f64() })
}

pub fn write_outputs(dir: &Path, result: &AblationResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut csv = String::from("hypothesis,1-ssim,1-msssim,1-vif,l1,l2\n");
    for r in &result.rows {
        let cells: Vec<String> = r.mean.values().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(csv, "{},{}", r.hypothesis, cells.join(",")).unwrap();
    }
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(Error::io(&path))
    };
    write(RESULTS_CSV, &csv)?;
    write(RESULTS_JSON, &serde_json::to_string_pretty(result).expect("results serialize"))?;
    write(REPORT_FILE, &render_report(result))
}

/// Per-metric `left − right` differences between two hypotheses; negative
/// favours `left`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub left: String,
    pub right: String,
    pub deltas: [f64; 5],
}

impl Comparison {
    pub fn left_wins(&self) -> usize {
        self.deltas.iter().filter(|d| **d < 0.0).count()
    }
}

/// Masked vs unmasked for every loss set whose two hypotheses were both run.
pub fn pairings(result: &AblationResult) -> Vec<Comparison> {
    (1..=9)
        .step_by(2)
        .filter_map(|odd| {
            let (m, u) = (result.row(odd)?, result.row(odd + 1)?);
            let (a, b) = (m.mean.values(), u.mean.values());
            Some(Comparison {
                left: m.hypothesis.clone(),
                right: u.hypothesis.clone(),
                deltas: std::array::from_fn(|i| a[i] - b[i]),
            })
        })
        .collect()
}

/// Present hypotheses ordered by mean rank over the five metrics (ties keep the listed order).
fn rank(result: &AblationResult, ids: &[u8]) -> Vec<(String, f64)> {
    let rows: Vec<&HypothesisResult> = ids.iter().filter_map(|&id| result.row(id)).collect();
    let mut ranked: Vec<(String, f64)> = rows
        .iter()
        .map(|r| {
            let v = r.mean.values();
            let total: usize = (0..5).map(|m| rows.iter().filter(|o| o.mean.values()[m] < v[m]).count() + 1).sum();
            (r.hypothesis.clone(), total as f64 / 5.0)
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranked
}

/// Standalone losses (SSIM, l1, l2) ranked separately with and without masks.
/// Groups with fewer than two present hypotheses are omitted.
pub fn standalone_ranking(result: &AblationResult) -> Vec<(&'static str, Vec<(String, f64)>)> {
    [("with masks", [5u8, 3, 7]), ("without masks", [6, 4, 8])]
        .into_iter()
        .map(|(label, ids)| (label, rank(result, &ids)))
        .filter(|(_, r)| r.len() >= 2)
        .collect()
}

/// SSIM + l1 minus SSIM + l2, with and without masks; negative favours l1.
pub fn ssim_ln_comparison(result: &AblationResult) -> Vec<Comparison> {
    [(1u8, 9u8), (2, 10)]
        .into_iter()
        .filter_map(|(l1, l2)| {
            let (a, b) = (result.row(l1)?, result.row(l2)?);
            let (x, y) = (a.mean.values(), b.mean.values());
            Some(Comparison {
                left: a.hypothesis.clone(),
                right: b.hypothesis.clone(),
                deltas: std::array::from_fn(|i| x[i] - y[i]),
            })
        })
        .collect()
}

/// The hypothesis with the lowest mean for each metric column (first wins ties).
pub fn best_per_metric(result: &AblationResult) -> Vec<(&'static str, String)> {
    METRIC_NAMES
        .iter()
        .enumerate()
        .filter_map(|(m, name)| {
            let best = result.rows.iter().min_by(|a, b| a.mean.values()[m].total_cmp(&b.mean.values()[m]))?;
            Some((*name, best.hypothesis.clone()))
        })
        .collect()
}

fn delta_table(out: &mut String, left: &str, right: &str, rows: &[Comparison]) {
    writeln!(out, "| {left} | {right} | {} |", METRIC_NAMES.map(|m| format!("Δ {m}")).join(" | ")).unwrap();
    writeln!(out, "|---|---|{}", "---|".repeat(5)).unwrap();
    for p in rows {
        let cells: Vec<String> = p.deltas.iter().map(|d| format!("{d:+.6}")).collect();
        writeln!(out, "| {} | {} | {} |", p.left, p.right, cells.join(" | ")).unwrap();
    }
}

pub fn render_report(result: &AblationResult) -> String {
    let mut out = String::new();
    let meta = &result.metadata;
    writeln!(out, "# Ablation report\n").unwrap();
    writeln!(
        out,
        "Seeds {:?}, split `{}`, {} x {} steps, batch {}, dataset manifest {}.\n",
        meta.seeds,
        meta.split,
        meta.config.epochs,
        meta.config.steps_per_epoch,
        meta.config.batch_size,
        meta.manifest_hash.as_deref().unwrap_or("(none)")
    )
    .unwrap();
    writeln!(out, "## Results (lower is better)\n").unwrap();
    writeln!(out, "| hypothesis | {} |", METRIC_NAMES.join(" | ")).unwrap();
    writeln!(out, "|---|{}", "---|".repeat(5)).unwrap();
    for r in &result.rows {
        let cells: Vec<String> = r.mean.values().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "| {} | {} |", r.hypothesis, cells.join(" | ")).unwrap();
    }

    writeln!(out, "\n## Do face masks help?\n").unwrap();
    let pairs = pairings(result);
    if pairs.is_empty() {
        writeln!(out, "No mask/no-mask pair was run.").unwrap();
    } else {
        writeln!(out, "Masked minus unmasked; negative means the mask helped.\n").unwrap();
        delta_table(&mut out, "masked", "unmasked", &pairs);
        for p in &pairs {
            writeln!(out, "\n- {} vs {}: mask better on {}/5 metrics", p.left, p.right, p.left_wins()).unwrap();
        }
    }

    writeln!(out, "\n## Which standalone loss works better?\n").unwrap();
    let groups = standalone_ranking(result);
    if groups.is_empty() {
        writeln!(out, "Fewer than two standalone-loss hypotheses were run in each group.").unwrap();
    }
    for (label, ranked) in groups {
        let order: Vec<String> = ranked.iter().map(|(h, r)| format!("{h} (mean rank {r:.1})")).collect();
        writeln!(out, "- {label}: {}", order.join(" < ")).unwrap();
    }

    writeln!(out, "\n## Which l_n works better with SSIM?\n").unwrap();
    let combos = ssim_ln_comparison(result);
    if combos.is_empty() {
        writeln!(out, "No SSIM + l1 / SSIM + l2 pair was run.").unwrap();
    } else {
        writeln!(out, "SSIM + l1 minus SSIM + l2; negative means l1 did better.\n").unwrap();
        delta_table(&mut out, "SSIM + l1", "SSIM + l2", &combos);
    }

    writeln!(out, "\n## Best hypothesis per metric\n").unwrap();
    for (metric, h) in best_per_metric(result) {
        writeln!(out, "- {metric}: {h}").unwrap();
    }
    out
}
