//! The training loop: shuffled minibatches forwarded jointly, mean CTC loss
//! and one Novograd step per batch at the scheduled learning rate.
//!
//! Every random choice is derived from `(seed, epoch)` for the batch order
//! and `(seed, step, utterance)` for SpecAugment, so a run resumed from a
//! checkpoint at step `k` continues exactly like an uninterrupted one.

use std::io::Write;

use log::warn;
use mqnet_core::params::BnUpdate;
use mqnet_core::{Error as CoreError, ForwardCtx, Mode, Model, ParamId, Tape, Tensor};
use mqnet_decoder::Vocabulary;
use mqnet_frontend::specaug::{apply_masks, sample_masks};
use mqnet_frontend::SpecAugmentPolicy;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Result, TrainError};
use crate::optim::Novograd;
use crate::schedule::ScheduleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = SpecAugmentPolicy::default();
        Self {
            freq_masks: p.num_freq_masks,
            max_freq_width: p.max_freq_width,
            time_masks: p.num_time_masks,
            max_time_width: p.max_time_width,
        }
    }
}

impl AugmentConfig {
    fn policy(&self, seed: u64) -> SpecAugmentPolicy {
        SpecAugmentPolicy {
            num_freq_masks: self.freq_masks,
            max_freq_width: self.max_freq_width,
            num_time_masks: self.time_masks,
            max_time_width: self.max_time_width,
            rng_seed: seed,
            speed_perturb: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 8,
            seed: 0,
            lr: 0.01,
            lr_min: 0.0,
            weight_decay: 0.0001,
            warmup: 8000,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, corpus_len: usize) -> u64 {
        corpus_len.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn schedule(&self, corpus_len: usize) -> Result<ScheduleConfig> {
        let total = self.epochs * self.steps_per_epoch(corpus_len);
        ScheduleConfig::new(self.warmup, total, self.lr, self.lr_min)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub features: Tensor,
    pub target: Vec<usize>,
}

/// Per-utterance losses, gradients of their mean and the pending
/// batch-norm updates of one minibatch.
pub struct BatchGradients {
    pub losses: Vec<f64>,
    pub grads: Vec<(ParamId, Tensor)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Train-mode forward of a whole minibatch on one tape, so batch norm sees
/// the statistics of all its frames, then backward through the mean CTC loss.
pub fn batch_gradients(model: &Model, batch: &[(Tensor, &[usize])]) -> mqnet_core::Result<BatchGradients> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.store, Mode::Train);
    let xs: Vec<_> = batch.iter().map(|(f, _)| ctx.tape.constant(f.clone())).collect();
    let lps = model.forward_batch(&mut ctx, &xs)?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut nodes = Vec::with_capacity(batch.len());
    for (&lp, (_, target)) in lps.iter().zip(batch) {
        let l = ctx.tape.ctc_loss(lp, target)?;
        losses.push(ctx.tape.value(l).data()[0]);
        nodes.push(l);
    }
    let total = ctx.tape.add_all(&nodes)?;
    let mean = ctx.tape.scale(total, 1.0 / batch.len() as f64)?;
    ctx.tape.backward(mean)?;
    Ok(BatchGradients {
        losses,
        grads: ctx.param_grads(),
        bn_updates: ctx.take_bn_updates(),
    })
}

/// Eval-mode CTC loss (running batch-norm statistics).
pub fn eval_loss(model: &Model, features: &Tensor, target: &[usize]) -> mqnet_core::Result<f64> {
    let lp = mqnet_core::ctc::LogProbMatrix::new_unchecked(model.infer(features)?)?;
    Ok(mqnet_core::ctc::ctc_loss(&lp, target)?.0)
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Novograd,
    pub config: TrainConfig,
    pub schedule: ScheduleConfig,
    /// Completed optimizer steps.
    pub step: u64,
    items: Vec<TrainItem>,
    /// Utterances dropped because they have fewer output frames than CTC needs.
    pub skipped: Vec<String>,
}

impl Trainer {
    pub fn new(model: Model, utterances: &[Utterance], vocab: &Vocabulary, config: TrainConfig) -> Result<Self> {
        Self::resume(model, Novograd::new(config.weight_decay), 0, utterances, vocab, config)
    }

    pub fn resume(
        model: Model,
        optimizer: Novograd,
        step: u64,
        utterances: &[Utterance],
        vocab: &Vocabulary,
        config: TrainConfig,
    ) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(TrainError::Corpus(format!(
                "model predicts {} labels, vocabulary has {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(TrainError::Corpus("batch size and epochs must be positive".into()));
        }
        let mut items = Vec::with_capacity(utterances.len());
        let mut skipped = Vec::new();
        for u in utterances {
            let target = vocab.encode_line(&u.text, u.line)?;
            let frames = model.output_frames(u.features.rows());
            let required = mqnet_core::ctc::required_frames(&target);
            if required > frames {
                warn!("skipping {}: {required} frames needed for its transcript, {frames} available", u.id);
                skipped.push(u.id.clone());
                continue;
            }
            items.push(TrainItem {
                id: u.id.clone(),
                features: u.features.clone(),
                target,
            });
        }
        if items.is_empty() {
            return Err(TrainError::Corpus("no trainable utterances".into()));
        }
        let schedule = config.schedule(items.len())?;
        if step > schedule.total_steps {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint step {step} is past the schedule's {} steps",
                schedule.total_steps
            )));
        }
        Ok(Self {
            model,
            optimizer,
            config,
            schedule,
            step,
            items,
            skipped,
        })
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    /// Utterance indices of batch `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let n = self.items.len();
        let spe = self.config.steps_per_epoch(n);
        let (epoch, i) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch)));
        let b = self.config.batch_size;
        order[i * b..((i + 1) * b).min(n)].to_vec()
    }

    fn features(&self, index: usize, step: u64) -> Result<Tensor> {
        let f = &self.items[index].features;
        Ok(match &self.config.augment {
            Some(a) => {
                let seed = mix(mix(self.config.seed, step), index as u64 + 1);
                let masks = sample_masks(&a.policy(seed), f.rows(), f.cols())?;
                apply_masks(f, &masks)
            }
            None => f.clone(),
        })
    }

    /// Runs one batch and one optimizer step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        if step >= self.schedule.total_steps {
            return Err(TrainError::Schedule(format!("all {step} steps are done")));
        }
        let lr = self.schedule.lr_at(step)?;
        let batch = self.batch(step);
        let inputs = batch
            .iter()
            .map(|&i| Ok((self.features(i, step)?, self.items[i].target.as_slice())))
            .collect::<Result<Vec<_>>>()?;
        let g = match batch_gradients(&self.model, &inputs) {
            Ok(g) => g,
            Err(CoreError::CtcUnderflow) | Err(CoreError::NonFinite { .. }) => {
                return Err(TrainError::Diverged { step, loss: f64::NAN });
            }
            Err(e) => return Err(e.into()),
        };
        let loss = g.losses.iter().sum::<f64>() / g.losses.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        let (grads, updates) = (g.grads, g.bn_updates);
        self.optimizer.step(&mut self.model.store, &grads, lr)?;
        self.model.store.apply_bn_updates(&updates);
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            loss,
        })
    }

    /// Trains until `until` completed steps (capped at the schedule length),
    /// writing one JSON line per step to `log`.
    pub fn run<W: Write>(&mut self, until: u64, mut log: Option<&mut W>, mut after_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let until = until.min(self.schedule.total_steps);
        let mut records = Vec::new();
        while self.step < until {
            let r = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &r).map_err(|e| TrainError::Io {
                    path: "metrics log".into(),
                    source: e.into(),
                })?;
                w.write_all(b"\n").map_err(|e| TrainError::io("metrics log", e))?;
            }
            after_step(self, &r)?;
            records.push(r);
        }
        Ok(records)
    }

    /// Mean eval-mode CTC loss over the training items.
    pub fn eval_mean_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for it in &self.items {
            total += eval_loss(&self.model, &it.features, &it.target)?;
        }
        Ok(total / self.items.len() as f64)
    }
}
