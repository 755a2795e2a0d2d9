//! Adam, the plateau schedule, the epoch loop and checkpoints.

mod adam;
mod checkpoint;
mod eval;
mod schedule;

pub use adam::{OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use eval::{evaluate, predict_batch, predict_image, Tiling};
pub use schedule::{plateau_update, ScheduleState, PLATEAU_FACTOR, PLATEAU_MIN_DELTA, PLATEAU_PATIENCE};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::Network;
use crate::data::{augment, normalize, AugmentConfig, ChannelStats, PatchSet, Sample};
use crate::error::{Error, Result};
use crate::metrics::{Averaging, MetricsReport, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;

pub const HISTORY_HEADER: &str = "epoch,train_loss,lr,val_AC,val_SE,val_SP,val_PC,val_F1,val_JS";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// Indexed access to training or evaluation samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Sample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn get(&self, index: usize) -> Sample {
        self[index].clone()
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Sample {
        self[index].clone()
    }
}

/// Patches cut on demand from their source images.
pub struct PatchSource<'a> {
    pub samples: &'a [Sample],
    pub patches: &'a PatchSet,
}

impl SampleSource for PatchSource<'_> {
    fn len(&self) -> usize {
        self.patches.len()
    }

    fn get(&self, index: usize) -> Sample {
        self.patches.materialize(index, self.samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub threshold: f64,
    /// Where `history.csv`, `last.ckpt` and `best.ckpt` go.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 0.001,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            threshold: DEFAULT_THRESHOLD,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} is outside [0,1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Rate used during the epoch.
    pub lr: f64,
    pub val: Option<MetricsReport>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let val = match &self.val {
            Some(m) => m.csv_fields(),
            None => ",,,,,".to_string(),
        };
        format!("{},{:.6},{},{}", self.epoch, self.train_loss, self.lr, val)
    }
}

/// The full mutable state of a training run.
pub struct Trainer {
    pub net: Network<f32>,
    pub optimizer: OptimizerState<f32>,
    pub schedule: ScheduleState,
    pub epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<EpochRecord>,
    pub norm: Option<ChannelStats>,
    rng: ChaCha8Rng,
    cfg: TrainConfig,
}

fn stack_batch(items: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<Tensor<f32>> = items.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor<f32>> = items.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

impl Trainer {
    pub fn new(net: Network<f32>, cfg: TrainConfig, norm: Option<ChannelStats>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            optimizer: OptimizerState::new(net.store(), cfg.lr),
            schedule: ScheduleState::new(cfg.lr),
            epoch: 0,
            best_val_f1: f64::NEG_INFINITY,
            history: Vec::new(),
            norm,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            net,
            cfg,
        })
    }

    /// Continues from a checkpoint; `cfg.epochs` is the total budget.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            net: ckpt.network()?,
            optimizer: ckpt.optimizer.clone(),
            schedule: ckpt.schedule.clone(),
            epoch: ckpt.epoch,
            best_val_f1: ckpt.best_val_f1,
            history: Vec::new(),
            norm: ckpt.norm.clone(),
            rng: ckpt.rng.restore(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_parts(
            &self.net,
            self.epoch,
            self.best_val_f1,
            &self.rng,
            &self.schedule,
            &self.optimizer,
            self.norm.as_ref(),
        )
    }

    fn prepare(&self, s: Sample, aug_seed: u64) -> Result<Sample> {
        let s = match &self.cfg.augment {
            Some(cfg) => augment(&s, aug_seed, cfg),
            None => s,
        };
        match &self.norm {
            Some(n) => normalize(&s, n),
            None => Ok(s),
        }
    }

    /// One pass over `train` in shuffled mini-batches, then validation,
    /// the schedule update and, with an output directory, history and
    /// checkpoints.
    pub fn run_epoch(&mut self, train: &dyn SampleSource, val: &dyn SampleSource) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let epoch = self.epoch + 1;
        let lr = self.schedule.lr;
        self.optimizer.lr = lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0f64;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let seed: u64 = self.rng.random();
                items.push(self.prepare(train.get(i), seed)?);
            }
            let (x, y) = stack_batch(&items)?;
            let loss = self.net.loss_and_grads(&x, &y)? as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {loss} at epoch {epoch}, batch {}; the last checkpoint is kept",
                    b + 1
                )));
            }
            self.optimizer.step(self.net.store_mut())?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate(
                &mut self.net,
                val,
                self.norm.as_ref(),
                self.cfg.threshold,
                Averaging::Micro,
                Tiling::Whole,
                self.cfg.batch_size,
            )?)
        };
        self.schedule.update(train_loss);
        self.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss,
            lr,
            val: val_report,
        };
        let improved = val_report.is_some_and(|m| m.f1 > self.best_val_f1);
        if let Some(m) = &val_report {
            if improved {
                self.best_val_f1 = m.f1;
            }
        }
        if let Some(dir) = self.cfg.output_dir.clone() {
            self.persist(&dir, &record, improved)?;
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.6} lr {lr} val F1 {}",
            val_report.map_or("-".to_string(), |m| format!("{:.4}", m.f1))
        );
        self.history.push(record.clone());
        Ok(record)
    }

    fn persist(&self, dir: &Path, record: &EpochRecord, improved: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(HISTORY_FILE);
        let fresh = record.epoch == 1 || !path.exists();
        let mut f = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(&path)?;
        if fresh {
            writeln!(f, "{HISTORY_HEADER}")?;
        }
        writeln!(f, "{}", record.csv_row())?;
        let ckpt = self.checkpoint();
        ckpt.save(&dir.join(LAST_CHECKPOINT))?;
        if improved {
            ckpt.save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    }

    /// Runs the remaining epochs of the budget.
    pub fn run(&mut self, train: &dyn SampleSource, val: &dyn SampleSource) -> Result<&[EpochRecord]> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(train, val)?;
        }
        Ok(&self.history)
    }
}

/// Trains `net` for `cfg.epochs` epochs.
pub fn train(
    net: Network<f32>,
    train: &dyn SampleSource,
    val: &dyn SampleSource,
    cfg: TrainConfig,
    norm: Option<ChannelStats>,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(net, cfg, norm)?;
    trainer.run(train, val)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchitectureSpec, Variant};
    use crate::data::synthetic::blobs;

    fn tiny() -> Network<f32> {
        let spec = ArchitectureSpec::new(Variant::UNet, true).with_size(2, 4).with_kernel_sizes(&[1, 3]);
        Network::build(&spec, 3).unwrap()
    }

    #[test]
    fn smoke_run_writes_history_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs(3, 8, 8, 0);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            output_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let t = train(tiny(), &data, &data[..1].to_vec(), cfg, None).unwrap();
        assert_eq!(t.epoch, 2);
        let history = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
        let lines: Vec<&str> = history.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,") && lines[1].split(',').count() == 9);
        let last = load_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(last.epoch, 2);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = blobs(4, 8, 8, 1);
        let val = data[..2].to_vec();
        let cfg = TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() };
        let full = train(tiny(), &data, &val, cfg.clone(), None).unwrap();

        let mut first = Trainer::new(tiny(), TrainConfig { epochs: 1, ..cfg.clone() }, None).unwrap();
        first.run(&data, &val).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), cfg).unwrap();
        resumed.run(&data, &val).unwrap();
        assert_eq!(resumed.history[..], full.history[1..]);
        assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    }

    #[test]
    fn csv_row_without_validation() {
        let r = EpochRecord { epoch: 4, train_loss: 0.5, lr: 0.0001, val: None };
        assert_eq!(r.csv_row(), "4,0.500000,0.0001,,,,,,");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut t = Trainer::new(tiny(), TrainConfig::default(), None).unwrap();
        let empty: Vec<Sample> = Vec::new();
        assert!(matches!(t.run_epoch(&empty, &empty), Err(Error::Data(_))));
    }
}
