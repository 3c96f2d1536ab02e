//! Training: cross-entropy over candidates, ADAM, global-norm clipping and a
//! step learning-rate schedule.
//!
//! The learning rate stays at `lr0` for epochs 1 and 2 and halves at the start
//! of every later epoch: `lr0, lr0, lr0/2, lr0/4, ...`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::evalviz::accuracy;
use crate::params::{Checkpoint, ParamGrads, ParamSet};
use crate::reader::{forward, Mode, Model, ReaderConfig};
use crate::tensor::{Tape, LOG_CLAMP};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub reader: ReaderConfig,
    pub batch_size: usize,
    pub lr0: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reader: ReaderConfig::default(),
            batch_size: 32,
            lr0: 5e-4,
            clip_threshold: 10.0,
            epochs: 10,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Sets a training or reader field by name. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num_err = || Error::Parameter(format!("{key}: cannot parse {value:?}"));
        match key {
            "batch_size" => self.batch_size = value.parse().map_err(|_| num_err())?,
            "lr0" | "lr" => self.lr0 = value.parse().map_err(|_| num_err())?,
            "clip_threshold" | "clip" => self.clip_threshold = value.parse().map_err(|_| num_err())?,
            "epochs" => self.epochs = value.parse().map_err(|_| num_err())?,
            "seed" => self.seed = value.parse().map_err(|_| num_err())?,
            _ => return self.reader.set(key, value),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("lr0".to_string(), format!("{:?}", self.lr0)),
            ("clip_threshold".to_string(), format!("{:?}", self.clip_threshold)),
            ("epochs".to_string(), self.epochs.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        v.extend(self.reader.pairs());
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Parameter("batch_size and epochs must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.clip_threshold > 0.0) {
            return Err(Error::Parameter("lr0 and clip_threshold must be positive".into()));
        }
        self.reader.validate()
    }
}

/// `-ln Pr(answer)`, clamped at [`LOG_CLAMP`]. The flag reports whether clamping applied.
pub fn cross_entropy(probs: &[f64], answer: usize) -> Result<(f64, bool)> {
    let p = *probs.get(answer).ok_or(Error::Index {
        what: "answer",
        index: answer,
        len: probs.len(),
    })?;
    Ok((-p.max(LOG_CLAMP).ln(), !(p > LOG_CLAMP)))
}

/// Mean cross-entropy over a batch.
pub fn batch_loss(probs: &[Vec<f64>], answers: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != answers.len() {
        return Err(Error::Parameter("batch loss needs matching nonempty inputs".into()));
    }
    let mut total = 0.0;
    for (p, &a) in probs.iter().zip(answers) {
        total += cross_entropy(p, a)?.0;
    }
    Ok(total / probs.len() as f64)
}

/// Rescales all gradients together when their global L2 norm exceeds `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], threshold: f64) -> f64 {
    let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm > threshold {
        let s = threshold / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

pub fn lr_schedule(epoch: usize, lr0: f64) -> f64 {
    if epoch <= 2 {
        lr0
    } else {
        lr0 * 0.5f64.powi((epoch - 2) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Frozen parameters keep their values and moments.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamGrads, lr: f64) -> Result<()> {
        let g_all = grads.as_slices();
        if g_all.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension {
                op: "adam",
                lhs: vec![params.len()],
                rhs: vec![g_all.len(), self.m.len()],
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = &g_all[i];
            if g.len() != params.get(id).numel() || self.m[i].len() != g.len() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if params.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = params.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn store(&self, names: &ParamSet, ck: &mut Checkpoint) {
        ck.meta.push(("adam_step".into(), self.step.to_string()));
        for id in names.ids() {
            let shape = names.get(id).shape().to_vec();
            for (tag, buf) in [("m", &self.m), ("v", &self.v)] {
                let t = crate::tensor::Tensor::new(shape.clone(), buf[id.index()].clone()).expect("aligned");
                ck.params.add(format!("adam.{tag}.{}", names.name(id)), t);
            }
        }
    }

    fn restore(names: &ParamSet, ck: &Checkpoint) -> Result<Self> {
        let mut adam = Adam::new(names);
        adam.step = ck
            .require_meta("adam_step")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad adam_step".into()))?;
        for id in names.ids() {
            for (tag, buf) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let name = format!("adam.{tag}.{}", names.name(id));
                let src = ck
                    .params
                    .find(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {name}")))?;
                buf[id.index()] = ck.params.get(src).data().to_vec();
            }
        }
        Ok(adam)
    }
}

/// Loss and parameter gradients for one example.
pub struct ExampleGrad {
    pub loss: f64,
    pub clamped: bool,
    pub grads: ParamGrads,
}

pub fn example_gradients(model: &Model, ex: &EncodedExample, mode: Mode) -> Result<ExampleGrad> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, &model.params, ex, mode)?;
    let loss = tape.neg_log(out.probs, ex.answer)?;
    let grads = tape.backward(loss)?;
    let mut pg = ParamGrads::zeros_like(&model.params.set);
    grads.accumulate_params(&tape, &mut pg);
    let (value, clamped) = cross_entropy(tape.value(out.probs).data(), ex.answer)?;
    Ok(ExampleGrad {
        loss: value,
        clamped,
        grads: pg,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_acc: f64,
    /// Whether this epoch set a new best validation accuracy.
    pub improved: bool,
}

impl fmt::Display for EpochMetrics {
    /// `epoch,lr,train_loss,valid_acc`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:?},{:?},{:?}", self.epoch, self.lr, self.train_loss, self.valid_acc)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

/// Owns the model and optimizer across epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Last completed epoch (1-based); 0 before training.
    pub epoch: usize,
    /// Best validation accuracy so far and the epoch that reached it.
    pub best: Option<(f64, usize)>,
    /// Number of examples whose answer probability hit the log clamp.
    pub clamp_count: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if &config.reader != model.config() {
            return Err(Error::Parameter("training config and model disagree on the reader architecture".into()));
        }
        let adam = Adam::new(&model.params.set);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            best: None,
            clamp_count: 0,
        })
    }

    /// Runs one epoch and returns its metrics line.
    pub fn run_epoch(&mut self, train: &[EncodedExample], valid: &[EncodedExample]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Parameter("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let lr = lr_schedule(epoch, self.config.lr0);
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));

        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut grads = ParamGrads::zeros_like(&self.model.params.set);
            let mut batch_loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                let dropout_seed = mix(mix(seed, epoch as u64), (b * self.config.batch_size + j) as u64);
                let eg = example_gradients(&self.model, &train[i], Mode::Train { seed: dropout_seed })?;
                if !eg.loss.is_finite() || !eg.grads.global_norm().is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}, batch {b}: non-finite loss or gradient on training example {i} (batch holds {chunk:?})"
                    )));
                }
                self.clamp_count += usize::from(eg.clamped);
                batch_loss += eg.loss;
                grads.add_all(&eg.grads);
            }
            grads.scale(1.0 / chunk.len() as f64);
            clip_gradients(grads.as_slices_mut(), self.config.clip_threshold);
            self.adam.update(&mut self.model.params.set, &grads, lr)?;
            loss_sum += batch_loss;
        }
        self.epoch = epoch;
        let valid_acc = if valid.is_empty() {
            0.0
        } else {
            accuracy(&self.model, valid)?
        };
        let improved = self.best.is_none_or(|(acc, _)| valid_acc > acc);
        if improved {
            self.best = Some((valid_acc, epoch));
        }
        Ok(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            valid_acc,
            improved,
        })
    }

    /// Checkpoint holding the model, training configuration and optimizer state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = vec![("epoch".to_string(), self.epoch.to_string())];
        if let Some((acc, e)) = self.best {
            extra.push(("best_valid_acc".into(), format!("{acc:?}")));
            extra.push(("best_epoch".into(), e.to_string()));
        }
        for (k, v) in self.config.pairs() {
            if !ReaderConfig::KEYS.contains(&k.as_str()) {
                extra.push((format!("train.{k}"), v));
            }
        }
        let mut ck = self.model.to_checkpoint(&extra);
        self.adam.store(&self.model.params.set, &mut ck);
        ck
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output. Training settings
    /// come from `config`; the model architecture comes from the checkpoint.
    /// Fails if `config.reader` differs from the architecture stored in `ck`.
    pub fn resume(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let adam = Adam::restore(&model.params.set, ck)?;
        let parse_err = |k: &str| Error::Checkpoint(format!("bad {k}"));
        let epoch = ck.require_meta("epoch")?.parse().map_err(|_| parse_err("epoch"))?;
        let best = match (ck.meta("best_valid_acc"), ck.meta("best_epoch")) {
            (Some(a), Some(e)) => Some((
                a.parse().map_err(|_| parse_err("best_valid_acc"))?,
                e.parse().map_err(|_| parse_err("best_epoch"))?,
            )),
            _ => None,
        };
        let mut t = Trainer::new(config, model)?;
        t.adam = adam;
        t.epoch = epoch;
        t.best = best;
        Ok(t)
    }
}

/// Loads the model from any checkpoint, ignoring optimizer state if present.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let mut model_ck = ck.clone();
    model_ck.params = ParamSet::new();
    for id in ck.params.ids() {
        let name = ck.params.name(id);
        if !name.starts_with("adam.") {
            let nid = model_ck.params.add(name, ck.params.get(id).clone());
            model_ck.params.set_frozen(nid, ck.params.is_frozen(id));
        }
    }
    Model::from_checkpoint(&model_ck)
}

pub struct TrainOutcome {
    /// Best-validation model seen during this call. `None` only when a resumed
    /// run never beat the accuracy recorded before it was interrupted.
    pub best: Option<Model>,
    pub best_epoch: usize,
    /// Model after the last epoch.
    pub last: Model,
    pub metrics: Vec<EpochMetrics>,
    pub clamp_count: usize,
}

/// Trains until `trainer.config.epochs` epochs have completed in total.
/// `on_epoch` sees each metrics line together with the trainer state after that epoch.
pub fn train_with(
    mut trainer: Trainer,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    mut on_epoch: impl FnMut(&EpochMetrics, &Trainer) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut metrics = Vec::new();
    let mut best = None;
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.run_epoch(train, valid)?;
        on_epoch(&m, &trainer)?;
        if m.improved {
            best = Some(trainer.model.clone());
        }
        metrics.push(m);
    }
    Ok(TrainOutcome {
        best,
        best_epoch: trainer.best.map_or(0, |(_, e)| e),
        last: trainer.model,
        metrics,
        clamp_count: trainer.clamp_count,
    })
}

/// Trains `model` from scratch and returns the best-validation model with its outcome.
pub fn train(config: &TrainConfig, model: Model, train_set: &[EncodedExample], valid: &[EncodedExample]) -> Result<(Model, TrainOutcome)> {
    let trainer = Trainer::new(config.clone(), model)?;
    let mut outcome = train_with(trainer, train_set, valid, |_, _| Ok(()))?;
    let best = outcome.best.take().expect("a fresh run always records a best epoch");
    Ok((best, outcome))
}
