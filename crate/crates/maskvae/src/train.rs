//! The training loop with its on-disk outputs: `config.json`, `log.csv`
//! (one row per optimizer step) and `checkpoint.bin` (rewritten after every
//! epoch).

use std::fs::{self, File};
use std::path::Path;
use std::time::Instant;

use maskvae_core::vae::{LossBreakdown, TrainConfig, Trainer};
use maskvae_core::{FaceMask, ImageTensor};

use crate::checkpoint::Checkpoint;
use crate::config;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};

pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_HEADER: [&str; 9] = ["epoch", "step", "total", "recon", "bce", "dice", "kl", "grad_norm", "seconds"];

/// Training images held in the training precision.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Vec<ImageTensor<f32>>,
    /// Present only when every image has a mask.
    pub masks: Option<Vec<FaceMask<f32>>>,
}

impl TrainData {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let images = samples.iter().map(|s| s.image.cast()).collect();
        let masks = samples.iter().map(|s| s.mask.as_ref().map(FaceMask::cast)).collect();
        Self { images, masks }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based global step.
    pub step: usize,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    pub seconds: f64,
}

/// Mean total loss over the `window` steps ending at 1-based step `at`.
pub fn moving_average(history: &[StepRecord], window: usize, at: usize) -> Option<f64> {
    if window == 0 || at < window || at > history.len() {
        return None;
    }
    let slice = &history[at - window..at];
    Some(slice.iter().map(|r| r.losses.total).sum::<f64>() / window as f64)
}

struct RunFiles<'a> {
    dir: &'a Path,
    log: csv::Writer<File>,
}

impl<'a> RunFiles<'a> {
    fn create(dir: &'a Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, config::to_json(cfg)).map_err(Error::io(&cfg_path))?;
        let log_path = dir.join(LOG_FILE);
        let mut log = csv::Writer::from_path(&log_path).map_err(|e| csv_error(&log_path, e))?;
        log.write_record(LOG_HEADER).map_err(|e| csv_error(&log_path, e))?;
        Ok(Self { dir, log })
    }

    fn row(&mut self, r: &StepRecord) -> Result<()> {
        let l = &r.losses;
        let fields = [
            r.epoch.to_string(),
            r.step.to_string(),
            l.total.to_string(),
            l.recon.to_string(),
            l.bce.to_string(),
            l.dice.to_string(),
            l.kl.to_string(),
            r.grad_norm.to_string(),
            format!("{:.3}", r.seconds),
        ];
        self.log.write_record(&fields).map_err(|e| csv_error(&self.dir.join(LOG_FILE), e))
    }

    fn end_epoch(&mut self, ck: &Checkpoint) -> Result<()> {
        self.log.flush().map_err(Error::io(self.dir.join(LOG_FILE)))?;
        ck.save(&self.dir.join(CHECKPOINT_FILE))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_owned(), source },
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Trains one hypothesis. With `out_dir` set, writes the config, the step log
/// and a checkpoint after every epoch there. Everything except the
/// `seconds` column is a function of `cfg` and `data`.
pub fn train(data: &TrainData, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let hyp = cfg.hypothesis().map_err(|e| Error::Usage(e.to_string()))?;
    if data.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    if let Some(img) = data.images.iter().find(|i| i.shape() != (cfg.resolution, cfg.resolution, 3)) {
        return Err(Error::Data(format!(
            "training image of shape {:?} does not match resolution {}",
            img.shape(),
            cfg.resolution
        )));
    }
    let masks = match (&data.masks, hyp.use_mask) {
        (Some(m), true) => Some(m),
        (None, true) => {
            return Err(Error::Data(format!("{} needs face masks; the training split has none", hyp.name())))
        }
        (_, false) => None,
    };
    let mut trainer = Trainer::<f32>::new(*cfg, data.len()).map_err(|e| Error::Usage(e.to_string()))?;
    let mut files = out_dir.map(|d| RunFiles::create(d, cfg)).transpose()?;
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.total_steps());
    let mut batch_images = Vec::with_capacity(cfg.batch_size);
    let mut batch_masks = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let idx = trainer.next_batch();
            batch_images.clear();
            batch_images.extend(idx.iter().map(|&i| data.images[i].clone()));
            batch_masks.clear();
            if let Some(m) = masks {
                batch_masks.extend(idx.iter().map(|&i| m[i].clone()));
            }
            let report = trainer.step(&batch_images, masks.map(|_| batch_masks.as_slice()))?;
            let record = StepRecord {
                epoch,
                step: trainer.steps_done(),
                losses: report.losses,
                grad_norm: report.grad_norm,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(f) = files.as_mut() {
                f.row(&record)?;
            }
            history.push(record);
        }
        let window = &history[history.len() - cfg.steps_per_epoch..];
        let mean = |f: fn(&StepRecord) -> f64| window.iter().map(f).sum::<f64>() / window.len() as f64;
        log::info!(
            "{} seed {} epoch {epoch}/{}: total {:.5} recon {:.5} kl {:.3} ({:.1}s)",
            hyp.name(),
            cfg.seed,
            cfg.epochs,
            mean(|r| r.losses.total),
            mean(|r| r.losses.recon),
            mean(|r| r.losses.kl),
            start.elapsed().as_secs_f64()
        );
        if let Some(f) = files.as_mut() {
            f.end_epoch(&Checkpoint { hypothesis: hyp, params: trainer.params.clone() })?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { hypothesis: hyp, params: trainer.params },
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads the training split of `dataset` and trains on it.
pub fn train_dataset(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let samples = dataset.load(Split::Train, cfg.resolution)?;
    train(&TrainData::from_samples(&samples), cfg, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskvae_core::synthface::{render, sample_spec};

    fn tiny_data(n: usize) -> TrainData {
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let (image, mask) = render(&sample_spec(i as u64), 16).unwrap();
                Sample { id: i.to_string(), image, mask: Some(mask) }
            })
            .collect();
        TrainData::from_samples(&samples)
    }

    fn tiny_config(hyp: u8) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch_size: 4,
            resolution: 16,
            latent_dim: 8,
            hypothesis: hyp,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_checkpoint_and_log() {
        let data = tiny_data(6);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = train(&data, &tiny_config(9), Some(a.path())).unwrap();
        let rb = train(&data, &tiny_config(9), Some(b.path())).unwrap();
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), CHECKPOINT_FILE), read(b.path(), CHECKPOINT_FILE));
        assert_eq!(read(a.path(), CONFIG_FILE), read(b.path(), CONFIG_FILE));
        let strip = |d: &Path| {
            let text = String::from_utf8(read(d, LOG_FILE)).unwrap();
            text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_owned()).collect::<Vec<_>>()
        };
        assert_eq!(strip(a.path()), strip(b.path()));
        assert_eq!(strip(a.path()).len(), 7);
        assert_eq!(strip(a.path())[0], LOG_HEADER[..8].join(","));
        assert_eq!(ra.history.len(), 6);
        assert_eq!(ra.checkpoint, rb.checkpoint);
        assert_eq!(Checkpoint::load(&a.path().join(CHECKPOINT_FILE)).unwrap(), ra.checkpoint);
        let other = train(&data, &TrainConfig { seed: 8, ..tiny_config(9) }, None).unwrap();
        assert_ne!(other.checkpoint, ra.checkpoint);
    }

    #[test]
    fn unmasked_hypotheses_skip_the_mask_terms() {
        let r = train(&tiny_data(4), &tiny_config(4), None).unwrap();
        assert!(r.history.iter().all(|s| s.losses.bce == 0.0 && s.losses.dice == 0.0 && s.losses.kl > 0.0));
        let r = train(&tiny_data(4), &tiny_config(3), None).unwrap();
        assert!(r.history.iter().all(|s| s.losses.bce > 0.0 && s.losses.dice > 0.0));
    }

    #[test]
    fn mask_hypotheses_need_masks() {
        let mut data = tiny_data(4);
        data.masks = None;
        assert!(matches!(train(&data, &tiny_config(1), None), Err(Error::Data(_))));
        assert!(train(&data, &tiny_config(2), None).is_ok());
        let empty = TrainData { images: vec![], masks: None };
        assert!(matches!(train(&empty, &tiny_config(2), None), Err(Error::Data(_))));
    }

    #[test]
    fn moving_average_windows() {
        let rec = |t: f64| StepRecord {
            epoch: 1,
            step: 0,
            losses: LossBreakdown { total: t, ..Default::default() },
            grad_norm: 0.0,
            seconds: 0.0,
        };
        let h: Vec<_> = (1..=10).map(|i| rec(i as f64)).collect();
        assert_eq!(moving_average(&h, 4, 10), Some(8.5));
        assert_eq!(moving_average(&h, 1, 1), Some(1.0));
        assert_eq!(moving_average(&h, 4, 3), None);
        assert_eq!(moving_average(&h, 4, 11), None);
    }
}
