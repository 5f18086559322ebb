//! Mini-batch Adam training with warm-up and cosine annealing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::derive_seed;
use super::eval::evaluate;
use super::metrics::MetricReport;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::model::{EncodedEpisode, Kbgn};
use crate::numerics::{AdamConfig, AdamState, LrSchedule, ParameterRegistry};

const BATCH_STREAM: u64 = 0x6261_7463;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stretched to `epochs` when its own length differs.
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 15,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_schedule(&self) -> LrSchedule {
        if self.schedule.total_epochs == self.epochs {
            self.schedule
        } else {
            self.schedule.scaled_to(self.epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        self.effective_schedule().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One log line. Step records carry the learning rate used for that step;
/// epoch records carry the mean loss and the rate at the epoch's end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterRegistry,
    pub adam: AdamState,
    pub log: Vec<LogRecord>,
    pub best_val: Option<MetricReport>,
    pub global_step: usize,
}

impl TrainOutcome {
    pub fn step_losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.kind == RecordKind::Step)
            .map(|r| r.loss)
            .collect()
    }

    pub fn epoch_records(&self) -> impl Iterator<Item = &LogRecord> {
        self.log.iter().filter(|r| r.kind == RecordKind::Epoch)
    }
}

/// Output files of a run directory.
pub struct RunFiles {
    pub log: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            log: dir.join("log.jsonl"),
            best: dir.join("best.json"),
            last: dir.join("last.json"),
        }
    }
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn write(&mut self, path: Option<&Path>, rec: &LogRecord) -> Result<()> {
        if let (Some(w), Some(path)) = (self.0.as_mut(), path) {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Trains `params` in place of a fresh copy and returns the result.
///
/// With `out_dir`, writes `log.jsonl`, `last.json` after every epoch and
/// `best.json` whenever validation MRR improves. `resume` continues from a
/// checkpoint's epoch with its optimizer state.
pub fn train(
    model: &Kbgn,
    params: ParameterRegistry,
    train_set: &[EncodedEpisode],
    val_set: &[EncodedEpisode],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_until(model, params, train_set, val_set, cfg, out_dir, resume, cfg.epochs)
}

/// [`train`] that returns once `stop_epoch` epochs are complete, as an
/// interrupted run would.
#[allow(clippy::too_many_arguments)]
pub fn train_until(
    model: &Kbgn,
    params: ParameterRegistry,
    train_set: &[EncodedEpisode],
    val_set: &[EncodedEpisode],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
    stop_epoch: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("no episodes"));
    }
    let schedule = cfg.effective_schedule();
    let files = out_dir.map(RunFiles::in_dir);
    let mut sink = LogSink(None);
    if let (Some(dir), Some(f)) = (out_dir, &files) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume.is_some())
            .truncate(resume.is_none())
            .open(&f.log)
            .map_err(|e| Error::io(&f.log, e))?;
        sink = LogSink(Some(BufWriter::new(file)));
    }
    let log_path = files.as_ref().map(|f| f.log.as_path());

    let (mut params, mut adam, start_epoch, mut global_step, mut best_mrr) = match resume {
        Some(ck) => {
            let (_, p) = ck.restore(&model.config)?;
            (p, ck.adam.clone(), ck.epoch, ck.global_step, ck.best_val_mrr)
        }
        None => {
            let adam = AdamState::new(&params, cfg.adam);
            (params, adam, 0, 0, None)
        }
    };
    let mut best_val = None;
    let mut log = Vec::new();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();

    for epoch in start_epoch..stop_epoch.min(cfg.epochs) {
        let batch_seed = derive_seed(cfg.seed ^ BATCH_STREAM, epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(batch_seed));
        let mut epoch_loss = 0.0;

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = schedule.lr_at_step(epoch, b, steps_per_epoch);
            let step_seed = derive_seed(cfg.seed ^ DROPOUT_STREAM, global_step as u64);
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, j as u64));
                    let mut ctx = ForwardCtx::train(model.config.dropout, rng);
                    model.loss_and_grads(&params, &train_set[idx], &mut ctx)
                })
                .collect::<Result<Vec<_>>>()?;

            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (acc, part) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    batch_seed,
                    dump: format!("epoch {epoch} batch {b} episodes {batch:?}"),
                });
            }
            params.zero_grad();
            let names: Vec<String> = params.names().map(String::from).collect();
            for (name, g) in names.iter().zip(&grads) {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                params.accumulate_grad(name, &scaled)?;
            }
            adam.step(&mut params, lr)?;

            let rec = LogRecord {
                epoch,
                step: global_step,
                loss,
                lr,
                kind: RecordKind::Step,
                val: None,
            };
            sink.write(log_path, &rec)?;
            log.push(rec);
            epoch_loss += loss * batch.len() as f64;
            global_step += 1;
        }

        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, &params, val_set, None)?.0)
        };
        let rec = LogRecord {
            epoch,
            step: global_step,
            loss: epoch_loss / train_set.len() as f64,
            lr: schedule.lr_at((epoch + 1) as f64),
            kind: RecordKind::Epoch,
            val,
        };
        sink.write(log_path, &rec)?;
        log.push(rec);

        let improved = match (val, best_mrr) {
            (Some(v), Some(b)) => v.mrr > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best_mrr = val.map(|v| v.mrr);
            best_val = val;
        }
        if let Some(f) = &files {
            let ck = Checkpoint::capture(&model.config, &params, &adam, epoch + 1, global_step, best_mrr);
            if improved || (val.is_none() && epoch + 1 == cfg.epochs) {
                ck.save(&f.best)?;
            }
            ck.save(&f.last)?;
        }
    }

    Ok(TrainOutcome {
        params,
        adam,
        log,
        best_val,
        global_step,
    })
}

/// Reads a line-delimited JSON log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::data(format!("{}:{}", path.display(), k + 1), e.to_string()))
        })
        .collect()
}
