use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{Clock, MetricsWriter, Profile};
use crate::model::{batch_loss_grad, mean_loss};
use crate::optim::Adam;
use crate::seed;
use crate::synth::{BalancedSampler, Utterance};

use super::config::FinetuneConfig;

/// Patience counter over a stream of validation losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    /// `patience = 0` never stops.
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, bad: 0 }
    }

    /// Records one evaluation; returns true when it is a strict improvement.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.bad >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub updates: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Update count of the returned checkpoint.
    pub best_step: usize,
    /// Validation loss after the last update.
    pub final_val_loss: f64,
    pub stopped_early: bool,
}

/// Supervised transducer training with AdamW.
///
/// Each batch draws `batch_size` utterances: a language from the balanced
/// sampler, then an utterance uniformly within it. Validation runs every
/// `eval_every` updates and after the last one; the checkpoint with the
/// lowest validation loss is returned. Zero steps returns `init`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    init: &Checkpoint,
    train: &[&Utterance],
    val: &[&Utterance],
    cfg: &FinetuneConfig,
    batch_size: usize,
    seed: u64,
    profile: Profile,
    metrics: &mut MetricsWriter,
) -> Result<(Checkpoint, FinetuneSummary)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::input("fine-tuning needs non-empty training and validation sets"));
    }
    if batch_size == 0 || cfg.eval_every == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::input(format!("invalid fine-tuning settings {cfg:?}")));
    }
    let model = &init.config;
    let mut groups: Vec<Vec<&Utterance>> = vec![Vec::new(); model.num_languages];
    for u in train {
        if u.language >= model.num_languages {
            return Err(Error::input(format!(
                "utterance {} has language {} of {}",
                u.id, u.language, model.num_languages
            )));
        }
        groups[u.language].push(u);
    }
    groups.retain(|g| !g.is_empty());
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mut languages = BalancedSampler::new(&counts, cfg.sampling_alpha, seed::derive(seed, "languages"))?;
    let mut rng = seed::rng(seed, "batches");

    let initial = mean_loss(&init.params, model, val)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    stopper.observe(initial);
    let mut best = init.clone();
    let mut summary = FinetuneSummary {
        updates: 0,
        initial_val_loss: initial,
        best_val_loss: initial,
        best_step: 0,
        final_val_loss: initial,
        stopped_early: false,
    };
    let mut current = init.clone();
    let mut adam = Adam::new(current.params.len(), cfg.adam())?;
    let clock = Clock::start(profile);
    for step in 1..=cfg.max_steps {
        let batch: Vec<&Utterance> = (0..batch_size)
            .map(|_| {
                let g = &groups[languages.next().expect("sampler is infinite")];
                g[rng.random_range(0..g.len())]
            })
            .collect();
        let (loss, grad) = batch_loss_grad(&current.params, model, &batch)?;
        if !loss.is_finite() || loss > cfg.divergence_limit {
            return Err(Error::numeric(format!("fine-tuning diverged at update {step}: loss {loss}")));
        }
        adam.step(current.params.flat_mut(), &grad, cfg.lr)?;
        current.step += 1;
        summary.updates = step;

        let val_loss = (step % cfg.eval_every == 0 || step == cfg.max_steps)
            .then(|| mean_loss(&current.params, model, val))
            .transpose()?;
        metrics.write(&FinetuneRecord { step, loss, lr: cfg.lr, val_loss, wall_ms: clock.elapsed_ms() })?;
        if let Some(v) = val_loss {
            summary.final_val_loss = v;
            if stopper.observe(v) {
                best = current.clone();
                summary.best_val_loss = v;
                summary.best_step = step;
            }
            if stopper.should_stop() {
                summary.stopped_early = step < cfg.max_steps;
                break;
            }
        }
    }
    Ok((best, summary))
}
