//! Learning-rate grid search with early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{mse_loss, DoseModel};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

pub const LR_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];
pub const PATIENCE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Share of the training cases held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_grid: LR_GRID.to_vec(),
            patience: PATIENCE,
            max_epochs: 200,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::InvalidArgument("lr grid must be non-empty and positive".into()));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument("patience and max_epochs must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEntry {
    Epoch {
        lr: f64,
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        improved: bool,
    },
    Stop {
        lr: f64,
        epoch: usize,
        best_epoch: usize,
        best_val_loss: f64,
        reason: StopReason,
        detail: Option<String>,
    },
    Selected {
        lr: f64,
        best_val_loss: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn selected_lr(&self) -> Option<f64> {
        self.entries.iter().find_map(|e| match e {
            LogEntry::Selected { lr, .. } => Some(*lr),
            _ => None,
        })
    }

    /// Epochs run under the selected learning rate.
    pub fn epochs_run(&self) -> usize {
        let Some(lr) = self.selected_lr() else { return 0 };
        self.entries
            .iter()
            .filter(|e| matches!(e, LogEntry::Epoch { lr: l, .. } if *l == lr))
            .count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Stops once `patience` epochs have passed without a new best.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the validation loss of `epoch` (1-based); returns whether it
    /// improved on the best so far.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch - self.best_epoch >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Seeded split of `n` items into (train, validation) index lists.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((n as f64) * fraction).round().max(1.0) as usize;
    if n < 2 || n_val >= n {
        return Err(Error::TooFewCases { k: 2, cases: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a11));
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    Ok((train, val))
}

pub fn evaluate_loss(model: &dyn DoseModel, samples: &[Sample]) -> Result<f64> {
    let preds = samples.iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>()?;
    let targets = samples.iter().map(|s| s.targets()).collect::<Result<Vec<_>>>()?;
    mse_loss(&preds, &targets)
}

/// One Adam step per case on that case's squared error, averaged over
/// its dose voxels. Returns the mean case loss seen during the epoch.
fn run_epoch(
    model: &mut dyn DoseModel,
    samples: &[&Sample],
    adam: &mut AdamState,
    cfg: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in order {
        let s = samples[i];
        let targets = s.targets()?;
        model.params_mut().zero_grads();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pred = model.forward(&mut tape, &bound, s, true, rng)?;
        let y = tape.constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
        let diff = tape.sub(pred, y)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / targets.len() as f64);
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss on case {}", s.case_id)));
        }
        tape.backward(loss)?;
        model.params_mut().collect_grads(&tape, &bound);
        adam_step(model.params_mut(), adam, cfg)?;
        sum += value;
        count += targets.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Trains `model` under every learning rate of the grid, each from the same
/// initial parameters, and keeps the parameters with the lowest validation
/// loss. Divergent learning rates are logged and skipped.
pub fn train(model: &mut dyn DoseModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::TooFewCases {
            k: 2,
            cases: train_set.len() + val_set.len(),
        });
    }
    let init = model.params().snapshot();
    let refs: Vec<&Sample> = train_set.iter().collect();
    let mut log = TrainLog::default();
    let mut winner: Option<(f64, f64, Vec<Tensor>)> = None;

    for (arm, &lr) in cfg.lr_grid.iter().enumerate() {
        model.params_mut().restore(&init)?;
        let adam_cfg = AdamConfig { lr, ..Default::default() };
        let mut adam = AdamState::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(arm as u64 * 0x9E37_79B9));
        let mut stopper = EarlyStopping::new(cfg.patience);
        let mut best_params = model.params().snapshot();
        let mut stop = (StopReason::MaxEpochs, None, cfg.max_epochs);

        for epoch in 1..=cfg.max_epochs {
            let result = run_epoch(model, &refs, &mut adam, &adam_cfg, &mut rng)
                .and_then(|train_loss| Ok((train_loss, evaluate_loss(model, val_set)?)));
            let (train_loss, val_loss) = match result {
                Ok((t, v)) if t.is_finite() && v.is_finite() => (t, v),
                Ok((t, v)) => {
                    stop = (StopReason::Diverged, Some(format!("non-finite loss (train {t}, val {v})")), epoch);
                    break;
                }
                Err(Error::NonFinite(msg)) => {
                    stop = (StopReason::Diverged, Some(msg), epoch);
                    break;
                }
                Err(e) => return Err(e),
            };
            let improved = stopper.observe(epoch, val_loss);
            if improved {
                best_params = model.params().snapshot();
            }
            log.entries.push(LogEntry::Epoch {
                lr,
                epoch,
                train_loss,
                val_loss,
                improved,
            });
            log::debug!("lr {lr:e} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
            if stopper.should_stop(epoch) {
                stop = (StopReason::Patience, None, epoch);
                break;
            }
        }
        let (best_epoch, best_val) = stopper.best();
        log.entries.push(LogEntry::Stop {
            lr,
            epoch: stop.2,
            best_epoch,
            best_val_loss: best_val,
            reason: stop.0,
            detail: stop.1,
        });
        // A diverged arm still counts if it had a finite best epoch before.
        if best_epoch > 0 && winner.as_ref().is_none_or(|(_, v, _)| best_val < *v) {
            winner = Some((lr, best_val, best_params));
        }
    }

    let (lr, best_val, params) = winner.ok_or(Error::AllDiverged)?;
    model.params_mut().restore(&params)?;
    log.entries.push(LogEntry::Selected {
        lr,
        best_val_loss: best_val,
    });
    Ok(log)
}
