//! Command-line front end. Exit status: 0 success, 1 usage error, 2 data
//! error, 3 verification failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use maskvae_core::gradcheck::{run_suite, GradCheckOptions, GradCheckReport};
use maskvae_core::metrics::{aggregate, evaluate_pair, MetricReport};
use maskvae_core::vae::HypothesisConfig;
use maskvae_core::FaceMask;

use crate::ablate::{run_ablation, AblationPlan};
use crate::checkpoint::Checkpoint;
use crate::config::{self, Overrides};
use crate::dataset::{generate_dataset, manifest_hash, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_csv, write_csv_file};
use crate::png;
use crate::train::{train_dataset, CHECKPOINT_FILE};

#[derive(Debug, Parser)]
#[command(name = "maskvae", version, about = "Face-mask VAE training, evaluation and ablation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic face dataset.
    GenData(GenDataArgs),
    /// Train one hypothesis; writes under <out>/<hypothesis>/.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate a set of hypotheses and write the comparison report.
    Ablate(AblateArgs),
    /// Score image pairs (two files or two directories).
    Metrics(MetricsArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    resolution: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    fractions: Vec<f64>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl TrainFlags {
    fn overrides(&self, hypothesis: Option<u8>) -> Overrides {
        Overrides {
            hypothesis,
            seed: self.seed,
            epochs: self.epochs,
            steps_per_epoch: self.steps,
            batch_size: self.batch,
            learning_rate: self.lr,
            clip_norm: self.clip_norm,
            kl_weight: self.kl_weight,
            resolution: self.resolution,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_hypothesis)]
    hyp: HypothesisConfig,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// CSV destination; defaults to eval_<split>.csv beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
    /// Hypotheses to run (comma separated); all ten by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_hypothesis)]
    hyp: Vec<HypothesisConfig>,
    /// Number of consecutive seeds, starting at --seed, to average over.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Predicted image, or a directory of them.
    predicted: PathBuf,
    /// Reference image, or a directory matched by file name.
    reference: PathBuf,
    /// Mask file, or a directory matched by file name; all-ones by default.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// CSV destination; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one component's analytic gradient (exercises the failure path).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

fn parse_hypothesis(s: &str) -> std::result::Result<HypothesisConfig, String> {
    HypothesisConfig::parse(s).map_err(|e| e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let fractions: [f64; 3] =
        a.fractions.try_into().map_err(|_| Error::Usage("--fractions takes three values".into()))?;
    let manifest = generate_dataset(a.n, a.seed, &a.out, a.resolution, fractions)?;
    println!(
        "wrote {} images to {} (train/val/test {}/{}/{})",
        manifest.n,
        a.out.display(),
        manifest.counts[0],
        manifest.counts[1],
        manifest.counts[2]
    );
    println!("manifest sha256 {}", manifest_hash(&a.out)?);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = config::resolve(a.flags.config.as_deref(), &a.flags.overrides(Some(a.hyp.id)))?;
    let dataset = Dataset::open(&a.data)?;
    let dir = a.out.join(a.hyp.name());
    let outcome = train_dataset(&dataset, &cfg, Some(&dir))?;
    let last = outcome.history.last().expect("at least one step");
    println!(
        "{}: {} steps in {:.1}s, final total loss {:.6}; checkpoint {}",
        a.hyp.name(),
        outcome.history.len(),
        outcome.seconds,
        last.losses.total,
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dataset = Dataset::open(&a.data)?;
    let samples = dataset.load(a.split, ck.arch().resolution)?;
    let rows = evaluate(&ck.params, &samples)?;
    let out =
        a.out.unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval_{}.csv", a.split)));
    write_csv_file(&out, &rows)?;
    let mean = rows.last().expect("mean row");
    println!("{} on {} ({} images): {}", ck.hypothesis.name(), a.split, samples.len(), format_values(mean));
    println!("wrote {}", out.display());
    Ok(())
}

fn format_values(r: &MetricReport) -> String {
    crate::ablate::METRIC_NAMES
        .iter()
        .zip(r.values())
        .map(|(n, v)| format!("{n} {v:.6}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let base = config::resolve(a.flags.config.as_deref(), &a.flags.overrides(None))?;
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let hypotheses = if a.hyp.is_empty() { HypothesisConfig::ALL.to_vec() } else { a.hyp };
    let plan = AblationPlan { hypotheses, seeds: (base.seed..base.seed + a.seeds).collect(), base, split: a.split };
    let dataset = Dataset::open(&a.data)?;
    let outcome = run_ablation(&dataset, &plan, Some(&a.out))?;
    for row in &outcome.result.rows {
        println!("{:>4}: {}", row.hypothesis, format_values(&row.mean));
    }
    println!("{} runs in {:.1}s; report in {}", outcome.histories.len(), outcome.seconds, a.out.display());
    Ok(())
}

/// Result of pairing two directories by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedMetrics {
    /// Per-pair rows followed by the `MEAN` row.
    pub rows: Vec<MetricReport>,
    /// Names present in only one directory.
    pub unmatched: Vec<String>,
}

fn png_names(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(Error::io(dir))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let name = path.file_name().expect("entries have names").to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

fn score(id: &str, pred: &Path, reference: &Path, mask: Option<&Path>) -> Result<MetricReport> {
    let (p, r) = (png::load_image(pred)?, png::load_image(reference)?);
    if p.shape() != r.shape() {
        return Err(Error::Data(format!("{id}: shapes differ ({:?} vs {:?})", p.shape(), r.shape())));
    }
    let m = match mask {
        Some(path) => png::load_mask(path)?,
        None => FaceMask::ones(r.height(), r.width()),
    };
    if (m.height(), m.width()) != (r.height(), r.width()) {
        return Err(Error::Data(format!("{id}: mask does not match the image size")));
    }
    Ok(evaluate_pair(id, &p, &r, &m)?)
}

/// Scores two files, or every same-named PNG in two directories.
pub fn metrics_for_paths(predicted: &Path, reference: &Path, mask: Option<&Path>) -> Result<PairedMetrics> {
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    match (predicted.is_dir(), reference.is_dir()) {
        (false, false) => {
            let id = predicted.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            rows.push(score(&id, predicted, reference, mask)?);
        }
        (true, true) => {
            let (p, r) = (png_names(predicted)?, png_names(reference)?);
            unmatched.extend(p.keys().filter(|k| !r.contains_key(*k)).cloned());
            unmatched.extend(r.keys().filter(|k| !p.contains_key(*k)).cloned());
            unmatched.sort();
            let mask_dir = mask.filter(|m| m.is_dir());
            for (name, p_path) in &p {
                let Some(r_path) = r.get(name) else { continue };
                let m_path = match mask_dir {
                    Some(dir) => {
                        let path = dir.join(name);
                        if !path.is_file() {
                            return Err(Error::Data(format!("no mask for {name} in {}", dir.display())));
                        }
                        Some(path)
                    }
                    None => mask.map(Path::to_path_buf),
                };
                rows.push(score(name, p_path, r_path, m_path.as_deref())?);
            }
            if rows.is_empty() {
                return Err(Error::Data("no file names are shared by the two directories".into()));
            }
        }
        _ => return Err(Error::Usage("give two files or two directories".into())),
    }
    rows.push(aggregate(&rows)?);
    Ok(PairedMetrics { rows, unmatched })
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let paired = metrics_for_paths(&a.predicted, &a.reference, a.mask.as_deref())?;
    for name in &paired.unmatched {
        eprintln!("unmatched: {name}");
    }
    match &a.out {
        Some(path) => write_csv_file(path, &paired.rows),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_csv(&mut lock, &paired.rows)?;
            lock.flush().map_err(Error::io("<stdout>"))
        }
    }
}

/// One line per component, in suite order.
pub fn format_gradcheck(report: &GradCheckReport) -> String {
    let mut out = String::new();
    for c in &report.components {
        out.push_str(&format!(
            "{:<28} {:>6} coords  worst rel err {:.3e}  (tol {:.0e})  {}\n",
            c.name,
            c.checked,
            c.worst_relative_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let start = Instant::now();
    let options = GradCheckOptions { fault: a.fault, ..GradCheckOptions::new(a.seed) };
    let report = run_suite(&options);
    print!("{}", format_gradcheck(&report));
    println!("{} components in {:.2}s", report.components.len(), start.elapsed().as_secs_f64());
    if report.all_passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(Error::Verification(format!("gradient check failed for {}", names.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskvae_core::gradcheck::COMPONENTS;
    use maskvae_core::synthface::{render, sample_spec};

    fn write_pair(dir: &Path, name: &str, seed: u64) {
        let (img, mask) = render(&sample_spec(seed), 48).unwrap();
        for sub in ["a", "b", "m"] {
            std::fs::create_dir_all(dir.join(sub)).unwrap();
        }
        png::save_image(&dir.join("a").join(name), &img).unwrap();
        png::save_image(&dir.join("b").join(name), &img).unwrap();
        png::save_mask(&dir.join("m").join(name), &mask).unwrap();
    }

    #[test]
    fn directory_mode_pairs_by_name() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "x.png", 1);
        write_pair(dir.path(), "y.png", 2);
        std::fs::copy(dir.path().join("a/x.png"), dir.path().join("a/only_a.png")).unwrap();
        std::fs::copy(dir.path().join("b/x.png"), dir.path().join("b/only_b.png")).unwrap();
        let r = metrics_for_paths(&dir.path().join("a"), &dir.path().join("b"), Some(&dir.path().join("m"))).unwrap();
        assert_eq!(r.unmatched, ["only_a.png", "only_b.png"]);
        let ids: Vec<_> = r.rows.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["x.png", "y.png", "MEAN"]);
        assert!(r.rows.iter().all(|r| r.values().iter().all(|v| v.abs() <= 1e-6)));
    }

    #[test]
    fn file_mode_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "x.png", 1);
        let (a, b) = (dir.path().join("a/x.png"), dir.path().join("b/x.png"));
        let r = metrics_for_paths(&a, &b, None).unwrap();
        assert_eq!(r.rows.len(), 2);
        let small = dir.path().join("small.png");
        png::save_image(&small, &maskvae_core::ImageTensor::zeros(16, 16, 3)).unwrap();
        assert_eq!(metrics_for_paths(&a, &small, None).unwrap_err().exit_code(), 2);
        assert_eq!(metrics_for_paths(&a, &dir.path().join("b"), None).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["maskvae", "train", "--hyp", "H11", "--data", "x"]), 1);
        assert_eq!(run(["maskvae", "frobnicate"]), 1);
        assert_eq!(run(["maskvae", "--help"]), 0);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none");
        assert_eq!(
            run([
                "maskvae".into(),
                "train".into(),
                "--hyp".into(),
                "H4".into(),
                "--data".into(),
                missing.into_os_string()
            ]),
            2
        );
        let out = dir.path().join("d");
        let args = ["maskvae", "gen-data", "--n", "4", "--fractions", "0.5,0.5,0.5", "--out"];
        let mut v: Vec<OsString> = args.iter().map(OsString::from).collect();
        v.push(out.clone().into_os_string());
        assert_eq!(run(v.clone()), 1);
        v[5] = "0.5,0.25,0.25".into();
        assert_eq!(run(v), 0);
    }

    #[test]
    fn gradcheck_lists_every_component_once_and_reports_faults() {
        let report = run_suite(&GradCheckOptions::new(3));
        let text = format_gradcheck(&report);
        for name in COMPONENTS {
            assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(name)).count(), 1, "{name}");
        }
        assert!(report.all_passed(), "{text}");
        assert_eq!(run(["maskvae", "grad-check", "--fault", "loss/l2"]), 3);
    }
}
