use std::fmt;
use std::path::Path;
use std::time::Instant;

use super::adam::{Adam, AdamConfig, StepStats};
use super::batch::{batch_iter, chunk_starts, make_batch, Batch};
use super::checkpoint::save_checkpoint;
use super::corpus::Corpus;
use crate::autodiff::Graph;
use crate::blocks::Pass;
use crate::error::{Error, Result};
use crate::model::{lm_forward, LanguageModel};
use crate::params::{bind, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub block_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Extra validation every this many optimizer steps; `0` evaluates only
    /// at the end of each epoch.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            block_size: 128,
            batch_size: 16,
            epochs: 3,
            optimizer: AdamConfig::default(),
            seed: 0,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("block_size and batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches.
    pub train_loss: f64,
    pub val_ppl: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{:.3}", self.epoch, self.train_loss, self.val_ppl, self.seconds)
    }
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_ppl,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Training loss of the first batch before any update.
    pub initial_loss: Option<f64>,
    pub initial_val_ppl: f64,
    pub epochs: Vec<EpochLog>,
    pub best_val_ppl: f64,
    /// Optimizer steps taken when the best model was seen.
    pub best_step: u64,
    pub steps: u64,
    /// Parameter elements updated by each optimizer step.
    pub updated_per_step: usize,
}

impl TrainLog {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn final_val_ppl(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_ppl, |e| e.val_ppl)
    }

    /// Header plus one line per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.epochs {
            out.push_str(&format!("{e}\n"));
        }
        out
    }
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean cross-entropy of one batch and the gradient of every parameter in
/// canonical order.
pub fn loss_and_grads(
    model: &LanguageModel<f32>,
    batch: &Batch,
    training: bool,
    seed: u64,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut g = Graph::new();
    let p = bind(&mut g, &model.params);
    let pass = Pass {
        seq_len: batch.block_size,
        training,
        dropout: model.config.dropout,
        seed,
    };
    let logits = lm_forward(&mut g, &model.config, &p, &batch.inputs, &pass)?;
    let loss = g.cross_entropy(logits, &batch.targets)?;
    let value = f64::from(g.value(loss).item());
    g.backward(loss)?;
    let mut grads = Vec::new();
    p.visit("", &mut |_, v| grads.push(g.take_grad(*v)));
    Ok((value, grads))
}

/// Summed next-token cross-entropy (in double precision) and token count
/// over every full window of `segment`, with dropout off.
pub fn cross_entropy_sum(
    model: &LanguageModel<f32>,
    segment: &[usize],
    block_size: usize,
    batch_size: usize,
) -> Result<(f64, usize)> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let starts = chunk_starts(segment.len(), block_size)?;
    let (mut total, mut count) = (0.0, 0);
    for group in starts.chunks(batch_size) {
        let batch = make_batch(segment, group, block_size);
        let mut g = Graph::new();
        let p = bind(&mut g, &model.params);
        let logits = lm_forward(&mut g, &model.config, &p, &batch.inputs, &Pass::inference(block_size))?;
        let logits = g.value(logits);
        for (row, &target) in batch.targets.iter().enumerate() {
            let xs = logits.row(row);
            let m = xs.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
            let lse = m + xs.iter().map(|&v| (f64::from(v) - m).exp()).sum::<f64>().ln();
            total += lse - f64::from(xs[target]);
        }
        count += batch.targets.len();
    }
    Ok((total, count))
}

/// `exp` of the token-weighted mean cross-entropy over `segment`.
pub fn evaluate(model: &LanguageModel<f32>, segment: &[usize], block_size: usize, batch_size: usize) -> Result<f64> {
    let (total, count) = cross_entropy_sum(model, segment, block_size, batch_size)?;
    Ok((total / count as f64).exp())
}

fn diverged(at: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged(format!("non-finite value from {op} at {at}")),
        other => other,
    }
}

/// Trains `model` in place and keeps the checkpoint with the lowest
/// validation perplexity at `best_path`. `on_epoch` sees each log line as
/// soon as it is produced.
pub fn train(
    model: &mut LanguageModel<f32>,
    corpus: &Corpus,
    config: &TrainConfig,
    best_path: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainLog> {
    config.validate()?;
    let (l, b) = (config.block_size, config.batch_size);
    if l > model.config.max_len {
        return Err(Error::Config(format!(
            "block size {l} exceeds the model's max_len {}",
            model.config.max_len
        )));
    }
    let mut opt = Adam::new(config.optimizer)?;
    let eval = |m: &LanguageModel<f32>| evaluate(m, corpus.valid(), l, b);

    let initial_val_ppl = eval(model).map_err(diverged("initial evaluation"))?;
    let mut log = TrainLog {
        initial_loss: None,
        initial_val_ppl,
        epochs: Vec::new(),
        best_val_ppl: initial_val_ppl,
        best_step: 0,
        steps: 0,
        updated_per_step: 0,
    };
    if let Some(path) = best_path {
        save_checkpoint(model, path)?;
    }
    let consider = |m: &LanguageModel<f32>, ppl: f64, log: &mut TrainLog| -> Result<()> {
        if ppl < log.best_val_ppl {
            log.best_val_ppl = ppl;
            log.best_step = log.steps;
            if let Some(path) = best_path {
                save_checkpoint(m, path)?;
            }
        }
        Ok(())
    };

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let batches = batch_iter(corpus.train(), l, b, mix_seed(config.seed, epoch as u64))?;
        let n = batches.len();
        let mut loss_sum = 0.0;
        for (i, batch) in batches.enumerate() {
            let at = format!("epoch {epoch} batch {}", i + 1);
            let (loss, mut grads) =
                loss_and_grads(model, &batch, true, mix_seed(config.seed ^ 0xD5, log.steps)).map_err(diverged(&at))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} at {at}")));
            }
            log.initial_loss.get_or_insert(loss);
            let StepStats { updated, .. } = opt.step(&mut model.params, &mut grads).map_err(diverged(&at))?;
            log.updated_per_step = updated;
            log.steps += 1;
            loss_sum += loss;
            if config.eval_interval > 0 && log.steps % config.eval_interval as u64 == 0 && i + 1 < n {
                let ppl = eval(model).map_err(diverged(&at))?;
                consider(model, ppl, &mut log)?;
            }
        }
        let val_ppl = eval(model).map_err(diverged(&format!("end of epoch {epoch}")))?;
        consider(model, val_ppl, &mut log)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            val_ppl,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}
