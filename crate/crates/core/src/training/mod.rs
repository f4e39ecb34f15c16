//! Single-index variational training of the flow-chain model, with a
//! per-frame warm-up phase and a step learning-rate schedule.

mod loss;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Array, Binding, Checkpoint, CheckpointMeta, Precision, Tape};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::Model;
pub use loss::{draw_for_sequence, sequence_loss, warmup_loss, Draw, LossBreakdown, ReconDivisor};
pub(crate) use loss::{group_by_index, group_terms};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total epochs, warm-up included.
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    /// `(epoch, factor)`: from `epoch` on the learning rate is multiplied by `factor`.
    pub schedule: Vec<(usize, f64)>,
    pub seed: u64,
    /// Seed of the draws used for validation, identical every epoch.
    pub val_seed: u64,
    pub divisor: ReconDivisor,
    pub precision: Precision,
    pub adam: AdamConfig,
    /// Stored in checkpoint metadata.
    pub config_hash: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            warmup_epochs: 10.min(epochs),
            lr: 1e-3,
            schedule: default_schedule(epochs),
            seed,
            val_seed: seed ^ 0x5eed_0f_7a11d,
            divisor: ReconDivisor::Nominal,
            precision: Precision::F32,
            adam: AdamConfig::default(),
            config_hash: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid("warm-up epochs cannot exceed total epochs"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.schedule.iter().any(|&(_, f)| !(f > 0.0 && f.is_finite())) {
            return Err(Error::invalid("schedule factors must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .fold(self.lr, |lr, &(_, f)| lr * f)
    }
}

/// Halve at 50%, 75% and 90% of the run.
pub fn default_schedule(epochs: usize) -> Vec<(usize, f64)> {
    [0.5, 0.75, 0.9]
        .iter()
        .map(|&f| ((f * epochs as f64).round() as usize, 0.5))
        .filter(|&(e, _)| e > 0)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitName {
    Train,
    Val,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
        }
    }
}

/// One row of the metrics table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: SplitName,
    pub loss: f64,
    pub recon: f64,
    pub logq: f64,
    pub logprior: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,recon,logq,logprior,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split.as_str(),
            self.loss,
            self.recon,
            self.logq,
            self.logprior,
            self.lr
        )
    }

    fn from_breakdowns(epoch: usize, split: SplitName, lr: f64, rows: &[LossBreakdown]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / n;
        EpochMetrics {
            epoch,
            split,
            loss: mean(|b| b.total),
            recon: mean(|b| b.recon_avg),
            logq: mean(|b| b.log_q),
            logprior: mean(|b| b.log_prior_zj),
            lr,
        }
    }
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Epoch {
        train: &'a EpochMetrics,
        val: &'a EpochMetrics,
        model: &'a Model,
        /// Validation loss improved on every earlier epoch.
        improved: bool,
        checkpoint: &'a dyn Fn() -> Checkpoint,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub initial: Checkpoint,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
}

/// Sets VAMP pseudo-inputs to distinct random observed training frames.
pub fn init_pseudo_inputs(model: &mut Model, data: &SequenceBatch, seed: u64) -> Result<()> {
    let Some(id) = model.pseudo_inputs() else {
        return Ok(());
    };
    let k = model.params.get(id).shape()[0];
    let mut frames: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|i| data.observed_indices(i).into_iter().map(move |l| (i, l)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    frames.shuffle(&mut rng);
    let picked: Vec<Vec<f64>> = frames.iter().take(k).map(|&(i, l)| data.frame_f64(i, l)).collect();
    let refs: Vec<&[f64]> = picked.iter().map(Vec::as_slice).collect();
    model.set_pseudo_inputs(&refs)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn add_grads(acc: &mut [Option<Array>], g: Vec<Option<Array>>) {
    for (a, g) in acc.iter_mut().zip(g) {
        if let Some(g) = g {
            match a {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                None => *a = Some(g),
            }
        }
    }
}

/// Gradient of the mean sequence loss over `seqs`. Groups of equal
/// `(j, length)` run on separate tapes, possibly in parallel; their gradients
/// are summed in group order, so the result does not depend on scheduling.
pub fn sequence_loss_gradients(
    model: &Model,
    data: &SequenceBatch,
    seqs: &[usize],
    draws: &[Draw],
    divisor: ReconDivisor,
    precision: Precision,
) -> Result<(Vec<Option<Array>>, Vec<LossBreakdown>)> {
    let groups = group_by_index(data, seqs, draws);
    let scale = 1.0 / seqs.len() as f64;
    let results: Vec<Result<(Vec<Option<Array>>, Vec<(usize, LossBreakdown)>)>> = groups
        .par_iter()
        .map(|(j, len, members)| {
            let tape = Tape::new(precision);
            let b = Binding::trainable(&tape, &model.params);
            let ids: Vec<usize> = members.iter().map(|&p| seqs[p]).collect();
            let noise: Vec<&[f64]> = members.iter().map(|&p| draws[p].noise.as_slice()).collect();
            let terms = group_terms(model, &b, data, &ids, *j, *len, &noise, divisor)?;
            let s = tape.sum(terms.total, None);
            let loss = tape.mul_scalar(s, scale);
            tape.ensure_finite(loss, "sequence loss")?;
            let grads = tape.backward(loss)?;
            let tot = tape.value(terms.total);
            let rec = tape.value(terms.recon);
            let lq = tape.value(terms.log_q);
            let lp = tape.value(terms.log_prior);
            let rows = members
                .iter()
                .enumerate()
                .map(|(r, &p)| {
                    (
                        p,
                        LossBreakdown {
                            recon_avg: rec.data()[r],
                            log_q: lq.data()[r],
                            log_prior_zj: lp.data()[r],
                            total: tot.data()[r],
                            j: *j,
                        },
                    )
                })
                .collect();
            Ok((b.gradients(&grads), rows))
        })
        .collect();
    let mut acc: Vec<Option<Array>> = vec![None; model.params.len()];
    let mut rows = vec![None; seqs.len()];
    for r in results {
        let (g, br) = r?;
        add_grads(&mut acc, g);
        for (p, b) in br {
            rows[p] = Some(b);
        }
    }
    Ok((acc, rows.into_iter().map(|r| r.expect("grouped")).collect()))
}

/// Per-sequence loss values without gradients.
pub fn evaluate_sequences(
    model: &Model,
    data: &SequenceBatch,
    seqs: &[usize],
    draws: &[Draw],
    divisor: ReconDivisor,
    precision: Precision,
) -> Result<Vec<LossBreakdown>> {
    let groups = group_by_index(data, seqs, draws);
    let results: Vec<Result<Vec<(usize, LossBreakdown)>>> = groups
        .par_iter()
        .map(|(j, len, members)| {
            let tape = Tape::new(precision);
            let b = Binding::frozen(&tape, &model.params);
            let ids: Vec<usize> = members.iter().map(|&p| seqs[p]).collect();
            let noise: Vec<&[f64]> = members.iter().map(|&p| draws[p].noise.as_slice()).collect();
            let terms = group_terms(model, &b, data, &ids, *j, *len, &noise, divisor)?;
            tape.ensure_finite(terms.total, "validation loss")?;
            let tot = tape.value(terms.total);
            let rec = tape.value(terms.recon);
            let lq = tape.value(terms.log_q);
            let lp = tape.value(terms.log_prior);
            Ok(members
                .iter()
                .enumerate()
                .map(|(r, &p)| {
                    (
                        p,
                        LossBreakdown {
                            recon_avg: rec.data()[r],
                            log_q: lq.data()[r],
                            log_prior_zj: lp.data()[r],
                            total: tot.data()[r],
                            j: *j,
                        },
                    )
                })
                .collect())
        })
        .collect();
    let mut rows = vec![None; seqs.len()];
    for r in results {
        for (p, b) in r? {
            rows[p] = Some(b);
        }
    }
    Ok(rows.into_iter().map(|r| r.expect("grouped")).collect())
}

/// Validation loss with draws from a fixed seed.
pub fn validation_loss(
    model: &Model,
    data: &SequenceBatch,
    cfg: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.val_seed);
    let d = model.latent_dim();
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(cfg.batch_size) {
        let draws = chunk
            .iter()
            .map(|&i| draw_for_sequence(data, i, d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        out.extend(evaluate_sequences(model, data, chunk, &draws, cfg.divisor, cfg.precision)?);
    }
    Ok(out)
}

fn warmup_step(
    model: &Model,
    data: &SequenceBatch,
    chunk: &[usize],
    rng: &mut ChaCha8Rng,
    precision: Precision,
) -> Result<(Vec<Option<Array>>, Vec<LossBreakdown>)> {
    let d = model.latent_dim();
    let count: usize = chunk.iter().map(|&i| data.observed_indices(i).len()).sum();
    let noise: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    let tape = Tape::new(precision);
    let b = Binding::trainable(&tape, &model.params);
    let (loss, rows) = warmup_loss(model, &b, data, chunk, &noise)?;
    let grads = tape.backward(loss)?;
    Ok((b.gradients(&grads), rows))
}

/// Runs warm-up then flow training. `on_event` sees every finished epoch,
/// which lets callers persist checkpoints as training goes; a non-finite
/// loss aborts with an error after the last good epoch was reported.
pub fn train(
    model: &mut Model,
    train_data: &SequenceBatch,
    val_data: &SequenceBatch,
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if val_data.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    train_data.validate()?;
    val_data.validate()?;
    model.params.round_to(cfg.precision);
    let meta = |epoch: usize| CheckpointMeta {
        epoch: epoch as u64,
        seed: cfg.seed,
        config_hash: cfg.config_hash,
    };
    let mut adam = AdamState::for_store(AdamConfig { lr: cfg.lr, ..cfg.adam }, &model.params);
    let initial = Checkpoint::capture(&model.params, Some(&adam), meta(0));
    let mut best = initial.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut metrics = Vec::new();
    let d = model.latent_dim();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        adam.set_lr(lr);
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let warm = epoch < cfg.warmup_epochs;
        let mut rows = Vec::with_capacity(train_data.len());
        for chunk in order.chunks(cfg.batch_size) {
            let (grads, br) = if warm {
                warmup_step(model, train_data, chunk, &mut rng, cfg.precision)?
            } else {
                let draws = chunk
                    .iter()
                    .map(|&i| draw_for_sequence(train_data, i, d, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                sequence_loss_gradients(model, train_data, chunk, &draws, cfg.divisor, cfg.precision)?
            };
            adam_step(model.params.values_mut(), &grads, &mut adam, cfg.precision)?;
            rows.extend(br);
        }
        let train_m = EpochMetrics::from_breakdowns(epoch + 1, SplitName::Train, lr, &rows);
        let val_rows = validation_loss(model, val_data, cfg)?;
        let val_m = EpochMetrics::from_breakdowns(epoch + 1, SplitName::Val, lr, &val_rows);
        if !val_m.loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {}", epoch + 1)));
        }
        let improved = val_m.loss < best_val;
        let snapshot = || Checkpoint::capture(&model.params, Some(&adam), meta(epoch + 1));
        if improved {
            best_val = val_m.loss;
            best_epoch = Some(epoch + 1);
            best = snapshot();
        }
        on_event(TrainEvent::Epoch {
            train: &train_m,
            val: &val_m,
            model,
            improved,
            checkpoint: &snapshot,
        })?;
        metrics.push(train_m);
        metrics.push(val_m);
    }
    let last = Checkpoint::capture(&model.params, Some(&adam), meta(cfg.epochs));
    Ok(TrainOutcome {
        metrics,
        initial,
        best,
        last,
        best_epoch,
        best_val,
    })
}

/// Draws `j` for sequence `i` many times; used to check selection frequencies.
pub fn sample_conditioning_indices<R: Rng + ?Sized>(data: &SequenceBatch, i: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    (0..n).map(|_| draw_for_sequence(data, i, 0, rng).map(|d| d.j)).collect()
}
