use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, Checkpoint};
use crate::data::{crop_or_pad, CropMode, Dataset, Key};
use crate::params::ParamSet;
use crate::{Error, Result};

use super::{adamw_step, batch_loss, loss_and_grads, lr_schedule, OptimizerState, TrainConfig};

/// Stops once `patience` consecutive epochs fail to improve on the best
/// dev loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    epoch: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            epoch: 0,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the next epoch's dev loss; returns `true` when training
    /// should stop after this epoch.
    pub fn observe(&mut self, dev_loss: f64) -> bool {
        self.epoch += 1;
        if dev_loss < self.best {
            self.best = dev_loss;
            self.best_epoch = self.epoch;
        }
        self.epoch - self.best_epoch >= self.patience
    }

    /// 1-based epoch of the best loss so far, 0 before any epoch.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub dev_loss: f64,
    pub path: PathBuf,
}

/// The `k` lowest-dev-loss checkpoints; among equal losses the earlier
/// epoch ranks first.
#[derive(Clone, Debug)]
pub struct TopK {
    k: usize,
    entries: Vec<CheckpointRecord>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            entries: Vec::new(),
        }
    }

    fn rank(r: &CheckpointRecord) -> (f64, usize) {
        (r.dev_loss, r.epoch)
    }

    pub fn admits(&self, epoch: usize, dev_loss: f64) -> bool {
        self.entries.len() < self.k
            || self
                .entries
                .last()
                .is_some_and(|w| (dev_loss, epoch) < Self::rank(w))
    }

    /// Inserts `record` if it ranks among the best `k`; returns the record
    /// it displaced, or `record` itself when it does not qualify.
    pub fn insert(&mut self, record: CheckpointRecord) -> Option<CheckpointRecord> {
        if !self.admits(record.epoch, record.dev_loss) {
            return Some(record);
        }
        let pos = self
            .entries
            .partition_point(|e| Self::rank(e) < Self::rank(&record));
        self.entries.insert(pos, record);
        (self.entries.len() > self.k).then(|| self.entries.pop().expect("nonempty"))
    }

    /// Retained records, best first.
    pub fn records(&self) -> &[CheckpointRecord] {
        &self.entries
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.7e} dev_loss={:.7e} lr={:.7e}",
            self.epoch, self.train_loss, self.dev_loss, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    /// Retained checkpoints, lowest dev loss first.
    pub retained: Vec<CheckpointRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn check_dataset(name: &str, data: &Dataset, input_dim: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{name} set is empty")));
    }
    for u in data {
        if u.features.ncols() != input_dim || u.features.nrows() == 0 {
            return Err(Error::Data(format!(
                "{name} utterance {}: features are {:?}, model expects T x {input_dim}",
                u.id,
                u.features.dim()
            )));
        }
    }
    Ok(())
}

fn write_index(path: &Path, out_dir: &Path, records: &[CheckpointRecord]) -> Result<()> {
    let text: String = records
        .iter()
        .map(|r| {
            let rel = r.path.strip_prefix(out_dir).unwrap_or(&r.path);
            format!("epoch={} dev_loss={:.7e} path={}\n", r.epoch, r.dev_loss, rel.display())
        })
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model and writes `run.log`, `checkpoints/epoch_NNN.ckpt`
/// for the retained epochs and `checkpoints/index.txt` under `out_dir`.
///
/// Epochs are 1-based.  A non-finite loss or gradient aborts the run with
/// [`Error::NonFiniteLoss`]; checkpoints already retained stay on disk.
pub fn train_run(
    model_cfg: &BackboneConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    dev: &Dataset,
    t_fixed: usize,
    out_dir: &Path,
) -> Result<RunLog> {
    model_cfg.validate()?;
    cfg.validate()?;
    if t_fixed == 0 {
        return Err(Error::Config("t_fixed must be at least 1".into()));
    }
    check_dataset("train", train, model_cfg.input_dim)?;
    check_dataset("dev", dev, model_cfg.input_dim)?;

    let ckpt_dir = out_dir.join("checkpoints");
    let log_path = out_dir.join("run.log");
    let index_path = ckpt_dir.join("index.txt");
    if log_path.exists() {
        return Err(Error::Format {
            path: log_path,
            detail: "a run already exists in this directory".into(),
        });
    }
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut log = OpenOptions::new()
        .create_new(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let (model, mut params) = Backbone::new::<f32>(model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let dev_x: Vec<Array2<f32>> = dev
        .iter()
        .map(|u| crop_or_pad(&u.features, t_fixed, CropMode::Eval))
        .collect();
    let dev_batch: Vec<(&Array2<f32>, Key)> = dev_x.iter().zip(dev).map(|(x, u)| (x, u.key)).collect();

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let mut step = 0;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut topk = TopK::new(cfg.topk);
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let abort = |e: Error| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, step },
                other => other,
            };
            let xs: Vec<Array2<f32>> = chunk
                .iter()
                .map(|&i| {
                    let seed = rng.gen();
                    crop_or_pad(&train[i].features, t_fixed, CropMode::Train { seed })
                })
                .collect();
            let batch: Vec<(&Array2<f32>, Key)> =
                xs.iter().zip(chunk).map(|(x, &i)| (x, train[i].key)).collect();
            let (loss, grads) =
                loss_and_grads(&model, &params, &batch, cfg, Some(&mut rng)).map_err(abort)?;
            lr = lr_schedule(step, total_steps, cfg)?;
            adamw_step(&mut params, &grads, &mut state, lr, cfg).map_err(abort)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let dev_loss = batch_loss(&model, &params, &dev_batch, cfg).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { epoch, step },
            other => other,
        })?;
        if !dev_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            lr,
        };
        writeln!(log, "{}", record.log_line()).map_err(|e| Error::io(&log_path, e))?;
        epochs.push(record);

        if topk.admits(epoch, dev_loss) {
            let path = ckpt_dir.join(format!("epoch_{epoch:03}.ckpt"));
            Checkpoint::new(&model, params.clone(), epoch, dev_loss).write(&path)?;
            if let Some(evicted) = topk.insert(CheckpointRecord {
                epoch,
                dev_loss,
                path,
            }) {
                fs::remove_file(&evicted.path).map_err(|e| Error::io(&evicted.path, e))?;
            }
            write_index(&index_path, out_dir, topk.records())?;
        }

        if stopper.observe(dev_loss) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    Ok(RunLog {
        epochs,
        retained: topk.records().to_vec(),
        best_epoch: stopper.best_epoch(),
        stopped_early,
    })
}

/// Scores every utterance (bonafide logit minus spoof logit) after an
/// evaluation-mode crop, sorted by id.
pub fn score_dataset(
    model: &Backbone,
    params: &ParamSet<f32>,
    data: &Dataset,
    t_fixed: usize,
) -> Result<Vec<(String, f64)>> {
    score_features(model, params, data.iter().map(|u| (u.id.as_str(), &u.features)), t_fixed)
}

/// [`score_dataset`] over unlabeled `(id, features)` pairs.
pub fn score_features<'a>(
    model: &Backbone,
    params: &ParamSet<f32>,
    items: impl IntoIterator<Item = (&'a str, &'a Array2<f32>)>,
    t_fixed: usize,
) -> Result<Vec<(String, f64)>> {
    if t_fixed == 0 {
        return Err(Error::Config("t_fixed must be at least 1".into()));
    }
    let mut out = items
        .into_iter()
        .map(|(id, features)| {
            if features.ncols() != model.config.input_dim || features.nrows() == 0 {
                return Err(Error::Data(format!(
                    "utterance {id}: features are {:?}, model expects T x {}",
                    features.dim(),
                    model.config.input_dim
                )));
            }
            let x = crop_or_pad(features, t_fixed, CropMode::Eval);
            Ok((id.to_string(), f64::from(model.score(params, &x)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
