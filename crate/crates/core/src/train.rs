//! ELBO / cross-entropy training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::evaluate_with_classes;
use crate::model::{Bound, ElboReport, EncodedExample, PredictMode, Prediction, VsamParameters};
use crate::optim::Adam;
use crate::tensor::{Tape, Var};
use crate::variational::{NoiseGenerator, NoiseSource};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Posterior samples per example per step.
    pub samples: usize,
    pub seed: u64,
    /// Linear KL warmup length in optimizer steps; `None` means 10% of all steps.
    pub kl_warmup_steps: Option<usize>,
    /// Weight each example by the inverse frequency of its class.
    pub class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            samples: 1,
            seed: 0,
            kl_warmup_steps: None,
            class_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Contract("learning rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.samples == 0 {
            return Err(Error::Contract("epochs, batch_size and samples must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("train.learning_rate".into(), format!("{:?}", self.learning_rate)),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.samples".into(), self.samples.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            (
                "train.kl_warmup_steps".into(),
                self.kl_warmup_steps.map_or("auto".into(), |s| s.to_string()),
            ),
            ("train.class_weights".into(), self.class_weights.to_string()),
        ]
    }
}

/// Per-step knobs for [`train_step`] and [`batch_loss`].
#[derive(Clone, Copy, Debug)]
pub struct StepOptions<'a> {
    pub samples: usize,
    pub kl_weight: f64,
    pub class_weights: Option<&'a [f64]>,
}

impl Default for StepOptions<'_> {
    fn default() -> Self {
        StepOptions {
            samples: 1,
            kl_weight: 1.0,
            class_weights: None,
        }
    }
}

/// Batch loss pieces recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    /// Mean (weighted) negative objective; the quantity minimized.
    pub loss: Var,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Records `-(1/B) Σ w_i objective_i` for the batch on `tape`.
pub fn batch_loss(
    params: &VsamParameters,
    tape: &mut Tape,
    bound: &Bound,
    batch: &[&EncodedExample],
    opts: StepOptions<'_>,
    noise: &mut dyn NoiseSource,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    let (mut recon, mut kl) = (0.0, 0.0);
    for ex in batch {
        let o = params.objective(tape, bound, ex, opts.samples, noise, opts.kl_weight)?;
        recon += tape.item(o.reconstruction)?;
        kl += tape.item(o.kl)?;
        let w = match opts.class_weights {
            Some(ws) => *ws
                .get(ex.label)
                .ok_or_else(|| Error::Contract(format!("no weight for class {}", ex.label)))?,
            None => 1.0,
        };
        let term = if w == 1.0 { o.objective } else { tape.scale(o.objective, w) };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let n = batch.len() as f64;
    let loss = tape.scale(total.expect("non-empty batch"), -1.0 / n);
    Ok(BatchLoss {
        loss,
        reconstruction: recon / n,
        kl: kl / n,
    })
}

/// One optimizer update on the batch; returns the batch-mean bound.
///
/// On a non-finite loss, gradient or updated weight the step is abandoned and
/// both `params` and `optimizer` are left untouched.
pub fn train_step(
    batch: &[&EncodedExample],
    params: &mut VsamParameters,
    optimizer: &mut Adam,
    opts: StepOptions<'_>,
    noise: &mut dyn NoiseSource,
) -> Result<ElboReport> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let out = batch_loss(params, &mut tape, &bound, batch, opts, noise)?;
    let loss = tape.item(out.loss)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("batch loss is {loss}")));
    }
    tape.backward(out.loss)?;

    let mut next = params.clone();
    next.zero_grad();
    next.collect_grads(&tape, &bound)?;
    let mut next_opt = optimizer.clone();
    next_opt.step(&mut next)?;
    next.zero_grad();
    if !next.all_finite() {
        return Err(Error::Numerical("optimizer produced non-finite weights".into()));
    }
    *params = next;
    *optimizer = next_opt;
    Ok(ElboReport {
        elbo: out.reconstruction - out.kl,
        reconstruction: out.reconstruction,
        kl: out.kl,
        samples: opts.samples,
        std_error: 0.0,
    })
}

/// Inverse-frequency weights `N / (C · n_c)`; absent classes get weight 0.
pub fn inverse_frequency_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y < n_classes {
            counts[y] += 1;
        }
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (n_classes as f64 * c as f64) })
        .collect()
}

/// Noise seed for example `i` under a run seed; independent of thread layout.
pub fn example_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Predictions for every example, fanned out over scoped worker threads.
pub fn predict_all(
    params: &VsamParameters,
    data: &[EncodedExample],
    mode: PredictMode,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = data.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, ex)| {
                            let mut noise = NoiseGenerator::new(example_seed(seed, c * chunk + k));
                            params.predict(&ex.headline, &ex.body, mode, &mut noise)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub train_accuracy: f64,
    pub train_micro_f1: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} elbo={:.6} reconstruction={:.6} kl={:.6} kl_weight={:.4} train_accuracy={:.2} train_micro_f1={:.2}",
            self.epoch,
            self.elbo,
            self.reconstruction,
            self.kl,
            self.kl_weight,
            self.train_accuracy,
            self.train_micro_f1
        )
    }
}

/// Owns parameters, optimizer and RNG state across epochs.
pub struct Trainer {
    params: VsamParameters,
    optimizer: Adam,
    config: TrainConfig,
    noise: NoiseGenerator,
    shuffle: ChaCha8Rng,
    step: usize,
    warmup: usize,
    class_weights: Option<Vec<f64>>,
}

impl Trainer {
    /// `n_train` fixes the step count used for the default warmup length.
    pub fn new(params: VsamParameters, config: TrainConfig, train: &[EncodedExample]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset("no training examples".into()));
        }
        let steps_per_epoch = train.len().div_ceil(config.batch_size);
        let total = steps_per_epoch * config.epochs;
        let warmup = config.kl_warmup_steps.unwrap_or(total / 10);
        let class_weights = config.class_weights.then(|| {
            let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
            inverse_frequency_weights(&labels, params.config().n_classes)
        });
        Ok(Trainer {
            optimizer: Adam::new(config.learning_rate),
            noise: NoiseGenerator::new(config.seed.wrapping_add(1)),
            shuffle: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            step: 0,
            warmup,
            class_weights,
        })
    }

    pub fn params(&self) -> &VsamParameters {
        &self.params
    }

    pub fn into_params(self) -> VsamParameters {
        self.params
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Current KL weight: `min(1, step / warmup)`, or 1 with warmup disabled.
    pub fn kl_weight(&self) -> f64 {
        if self.warmup == 0 {
            1.0
        } else {
            (self.step as f64 / self.warmup as f64).min(1.0)
        }
    }

    /// One optimizer step on an explicit batch.
    pub fn step(&mut self, batch: &[&EncodedExample]) -> Result<ElboReport> {
        let opts = StepOptions {
            samples: self.config.samples,
            kl_weight: self.kl_weight(),
            class_weights: self.class_weights.as_deref(),
        };
        let report = train_step(batch, &mut self.params, &mut self.optimizer, opts, &mut self.noise)?;
        self.step += 1;
        Ok(report)
    }

    /// Shuffles, runs every batch once, then scores the training set.
    pub fn run_epoch(&mut self, train: &[EncodedExample], epoch: usize) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let (mut recon, mut kl) = (0.0, 0.0);
        let mut kl_weight = 0.0;
        for idx in order.chunks(self.config.batch_size) {
            let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &train[i]).collect();
            kl_weight = self.kl_weight();
            let r = self.step(&batch)?;
            recon += r.reconstruction * batch.len() as f64;
            kl += r.kl * batch.len() as f64;
        }
        let n = train.len() as f64;
        let preds = predict_all(&self.params, train, PredictMode::Mean, self.config.seed)?;
        let pred: Vec<usize> = preds.iter().map(|p| p.class).collect();
        let gold: Vec<usize> = train.iter().map(|e| e.label).collect();
        let m = evaluate_with_classes(&pred, &gold, self.params.config().n_classes)?;
        Ok(EpochLog {
            epoch,
            elbo: (recon - kl) / n,
            reconstruction: recon / n,
            kl: kl / n,
            kl_weight,
            train_accuracy: m.accuracy(),
            train_micro_f1: m.micro_f1(),
        })
    }

    /// Runs all configured epochs, calling `on_epoch` after each.
    pub fn fit<F>(&mut self, train: &[EncodedExample], mut on_epoch: F) -> Result<Vec<EpochLog>>
    where
        F: FnMut(&EpochLog, &VsamParameters) -> Result<()>,
    {
        let mut logs = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            let log = self.run_epoch(train, epoch)?;
            on_epoch(&log, &self.params)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
