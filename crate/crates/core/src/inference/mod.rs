//! Post-training use of a model: optimal-index imputation, unconditional and
//! conditional generation, importance-weighted likelihood and masked MSE.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Array, Binding, Precision, Tape, Var};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::{Model, PosteriorOutput};
use crate::training::{group_terms, ReconDivisor};

/// Score of one candidate trajectory seeded at observed index `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateScore {
    pub j: usize,
    pub draw: usize,
    /// Log-likelihood of all observed pixels under the decoded trajectory.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputationResult {
    /// Decoded means for timesteps `0..=t_i`, each `D` values.
    pub completed: Vec<Vec<f64>>,
    pub j_opt: usize,
    pub draw_opt: usize,
    pub scores: Vec<CandidateScore>,
    pub samples_per_index: usize,
}

/// Best candidate: highest score, ties to the smallest index then draw.
pub fn select_best(scores: &[CandidateScore]) -> Option<CandidateScore> {
    let mut best: Option<CandidateScore> = None;
    for &c in scores {
        best = match best {
            None => Some(c),
            Some(b) if c.score > b.score || (c.score == b.score && (c.j, c.draw) < (b.j, b.draw)) => Some(c),
            keep => keep,
        };
    }
    best
}

fn standard_noise<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Array {
    Array::from_fn(&[rows, d], |_| StandardNormal.sample(rng))
}

fn repeat_rows(frame: &[f64], rows: usize) -> Array {
    let d = frame.len();
    Array::from_fn(&[rows, d], |i| frame[i % d])
}

/// Posterior draws at index `j` propagated over `0..frames`; returns the
/// latent variables per timestep and the decoder outputs stacked by timestep.
fn trajectories(
    model: &Model,
    b: &Binding<'_>,
    x_j: &[f64],
    j: usize,
    frames: usize,
    noise: Array,
) -> Result<(Vec<Var>, Var)> {
    let t = b.tape();
    let n = noise.rows();
    let x = t.constant(repeat_rows(x_j, n));
    let post: PosteriorOutput = model.encode(b, x);
    let eps = t.constant(noise);
    let (zj, _) = model.posterior_sample(b, post, eps);
    let traj = model.chain().propagate_full(b, zj, j, frames - 1)?;
    let z_all = if frames == 1 {
        traj.latents[0]
    } else {
        t.concat(&traj.latents, 0)
    };
    let out = model.decode(b, z_all);
    Ok((traj.latents, out))
}

fn check_model_data(model: &Model, data: &SequenceBatch) -> Result<()> {
    if data.frame_dim() != model.obs_dim() {
        return Err(Error::shape(
            "model/dataset",
            format!("frames hold {} values, model expects {}", data.frame_dim(), model.obs_dim()),
        ));
    }
    if data.frames > model.chain().len() + 1 {
        return Err(Error::IndexOutOfRange {
            index: data.frames - 1,
            limit: model.chain().len(),
            context: "sequence length versus flow chain",
        });
    }
    Ok(())
}

/// Completes sequence `i` by trying every observed index as the conditioning
/// index (`samples_per_index` posterior draws each) and keeping the
/// trajectory that best explains all observed pixels.
pub fn impute<R: Rng + ?Sized>(
    model: &Model,
    data: &SequenceBatch,
    i: usize,
    samples_per_index: usize,
    rng: &mut R,
    precision: Precision,
) -> Result<ImputationResult> {
    check_model_data(model, data)?;
    if samples_per_index == 0 {
        return Err(Error::invalid("samples per index must be at least 1"));
    }
    let obs = data.observed_indices(i);
    if obs.is_empty() {
        return Err(Error::NoObservation(i));
    }
    let len = data.lengths[i];
    let big_d = model.obs_dim();
    let s = samples_per_index;
    let mut scores = Vec::new();
    let mut means: Vec<Array> = Vec::new();
    for &j in &obs {
        let noise = standard_noise(s, model.latent_dim(), rng);
        let tape = Tape::new(precision);
        let b = Binding::frozen(&tape, &model.params);
        let (_, out) = trajectories(model, &b, &data.frame_f64(i, j), j, len, noise)?;
        // rows are timestep-major: row l * s + k
        let x = Array::from_fn(&[len * s, big_d], |idx| {
            let (r, c) = (idx / big_d, idx % big_d);
            data.frame(i, r / s)[c] as f64
        });
        let mask = Array::from_fn(&[len * s, big_d], |idx| {
            let (r, c) = (idx / big_d, idx % big_d);
            let l = r / s;
            if data.is_observed(i, l) {
                data.pixel_mask_frame(i, l)[c] as f64
            } else {
                0.0
            }
        });
        let xv = tape.constant(x);
        let mv = tape.constant(mask);
        let ll = model.obs_loglik(&tape, out, xv, mv);
        let mean = model.output_mean(&tape, out);
        tape.ensure_finite(mean, "imputation")?;
        let ll = tape.value(ll);
        for k in 0..s {
            let score: f64 = (0..len).map(|l| ll.data()[l * s + k]).sum();
            scores.push(CandidateScore { j, draw: k, score });
        }
        means.push(tape.value(mean));
    }
    let best = select_best(&scores).ok_or(Error::NoObservation(i))?;
    let slot = obs.iter().position(|&j| j == best.j).expect("candidate index");
    let m = &means[slot];
    let completed = (0..len).map(|l| m.row_slice(l * s + best.draw).to_vec()).collect();
    Ok(ImputationResult {
        completed,
        j_opt: best.j,
        draw_opt: best.draw,
        scores,
        samples_per_index: s,
    })
}

/// Completion from a single uniformly drawn observed index and one posterior
/// draw; the reference procedure the optimal index is compared against.
pub fn impute_naive<R: Rng + ?Sized>(
    model: &Model,
    data: &SequenceBatch,
    i: usize,
    rng: &mut R,
    precision: Precision,
) -> Result<(usize, Vec<Vec<f64>>)> {
    check_model_data(model, data)?;
    let obs = data.observed_indices(i);
    if obs.is_empty() {
        return Err(Error::NoObservation(i));
    }
    let j = obs[rng.random_range(0..obs.len())];
    let len = data.lengths[i];
    let noise = standard_noise(1, model.latent_dim(), rng);
    let tape = Tape::new(precision);
    let b = Binding::frozen(&tape, &model.params);
    let (_, out) = trajectories(model, &b, &data.frame_f64(i, j), j, len, noise)?;
    let mean = model.output_mean(&tape, out);
    tape.ensure_finite(mean, "imputation")?;
    let m = tape.value(mean);
    Ok((j, (0..len).map(|l| m.row_slice(l).to_vec()).collect()))
}

/// Decoded means of `n` sequences of `frames` timesteps; row `k * frames + l`
/// holds sequence `k` at timestep `l`.
pub type Frames = Array;

fn reorder_timestep_major(m: &Array, n: usize, frames: usize) -> Frames {
    let d = m.cols();
    Array::from_fn(&[n * frames, d], |idx| {
        let (r, c) = (idx / d, idx % d);
        let (k, l) = (r / frames, r % frames);
        m.row_slice(l * n + k)[c]
    })
}

/// `n` sequences from `z_0` drawn from the prior, pushed forward through the
/// chain only.
pub fn generate_unconditional<R: Rng + ?Sized>(
    model: &Model,
    n: usize,
    frames: usize,
    rng: &mut R,
    precision: Precision,
) -> Result<Frames> {
    if frames == 0 || frames > model.chain().len() + 1 {
        return Err(Error::IndexOutOfRange {
            index: frames.saturating_sub(1),
            limit: model.chain().len(),
            context: "generation length",
        });
    }
    let z0 = model.sample_prior_z0(n, rng, precision)?;
    let tape = Tape::new(precision);
    let b = Binding::frozen(&tape, &model.params);
    let zv = tape.constant(z0);
    let traj = model.chain().propagate(&b, zv, 0, frames - 1)?;
    let z_all = if frames == 1 {
        traj.latents[0]
    } else {
        tape.concat(&traj.latents, 0)
    };
    let out = model.decode(&b, z_all);
    let mean = model.output_mean(&tape, out);
    tape.ensure_finite(mean, "generation")?;
    Ok(reorder_timestep_major(&tape.value(mean), n, frames))
}

/// `n` trajectories through a single frame `x_j` placed at timestep `j`.
pub fn generate_conditional<R: Rng + ?Sized>(
    model: &Model,
    x_j: &[f64],
    j: usize,
    n: usize,
    frames: usize,
    rng: &mut R,
    precision: Precision,
) -> Result<Frames> {
    if x_j.len() != model.obs_dim() {
        return Err(Error::shape(
            "generate_conditional",
            format!("frame holds {} values, model expects {}", x_j.len(), model.obs_dim()),
        ));
    }
    if frames == 0 || j >= frames || frames > model.chain().len() + 1 {
        return Err(Error::IndexOutOfRange {
            index: j.max(frames.saturating_sub(1)),
            limit: model.chain().len(),
            context: "conditional generation",
        });
    }
    let noise = standard_noise(n, model.latent_dim(), rng);
    let tape = Tape::new(precision);
    let b = Binding::frozen(&tape, &model.params);
    let (_, out) = trajectories(model, &b, x_j, j, frames, noise)?;
    let mean = model.output_mean(&tape, out);
    tape.ensure_finite(mean, "generation")?;
    Ok(reorder_timestep_major(&tape.value(mean), n, frames))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NllPolicy {
    /// One conditioning index drawn uniformly from the observed ones, shared
    /// by all importance samples.
    #[default]
    FixedJ,
    /// Mean of the per-index estimates over every observed index.
    AverageJ,
}

impl NllPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed-j" => Ok(NllPolicy::FixedJ),
            "average-j" => Ok(NllPolicy::AverageJ),
            other => Err(Error::invalid(format!("unknown NLL policy {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NllPolicy::FixedJ => "fixed-j",
            NllPolicy::AverageJ => "average-j",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllEstimate {
    /// Negative log joint likelihood divided by the frame count `t_i + 1`.
    pub nll: f64,
    pub samples: usize,
    pub policy: NllPolicy,
}

/// `log((1/S) sum exp(w))`, stabilised by the maximum.
pub fn log_mean_exp(w: &[f64]) -> Result<f64> {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || w.is_empty() {
        return Err(Error::DegenerateWeights);
    }
    if m.is_nan() || m == f64::INFINITY {
        return Err(Error::NonFinite("importance weights".into()));
    }
    let s: f64 = w.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + (s / w.len() as f64).ln())
}

/// Importance log-weights `log p(x_O | z) + log p(z_j) - log q(z_j | x_j)`
/// for `S` draws conditioned at `j`.
pub fn importance_log_weights<R: Rng + ?Sized>(
    model: &Model,
    data: &SequenceBatch,
    i: usize,
    j: usize,
    samples: usize,
    rng: &mut R,
    precision: Precision,
) -> Result<Vec<f64>> {
    check_model_data(model, data)?;
    let noise: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..model.latent_dim()).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    let refs: Vec<&[f64]> = noise.iter().map(Vec::as_slice).collect();
    let members = vec![i; samples];
    let tape = Tape::new(precision);
    let b = Binding::frozen(&tape, &model.params);
    let terms = group_terms(model, &b, data, &members, j, data.lengths[i], &refs, ReconDivisor::Nominal)?;
    let w = tape.add(terms.recon_sum, terms.log_prior);
    let w = tape.sub(w, terms.log_q);
    Ok(tape.value(w).into_data())
}

/// Importance-weighted estimate of `-log p(x_O) / (t_i + 1)` for sequence `i`.
pub fn estimate_nll<R: Rng + ?Sized>(
    model: &Model,
    data: &SequenceBatch,
    i: usize,
    samples: usize,
    policy: NllPolicy,
    rng: &mut R,
    precision: Precision,
) -> Result<NllEstimate> {
    if samples == 0 {
        return Err(Error::invalid("importance sample count must be at least 1"));
    }
    let obs = data.observed_indices(i);
    if obs.is_empty() {
        return Err(Error::NoObservation(i));
    }
    let frames = data.lengths[i] as f64;
    let per_j = |j: usize, rng: &mut R| -> Result<f64> {
        let w = importance_log_weights(model, data, i, j, samples, rng, precision)?;
        Ok(-log_mean_exp(&w)? / frames)
    };
    let nll = match policy {
        NllPolicy::FixedJ => {
            let j = obs[rng.random_range(0..obs.len())];
            per_j(j, rng)?
        }
        NllPolicy::AverageJ => {
            let mut acc = 0.0;
            for &j in &obs {
                acc += per_j(j, rng)?;
            }
            acc / obs.len() as f64
        }
    };
    Ok(NllEstimate { nll, samples, policy })
}

/// Mean squared difference over entries with `mask = 1`.
pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape(
            "masked_mse",
            format!("{} predictions, {} targets, {} mask entries", pred.len(), target.len(), mask.len()),
        ));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("masked_mse: mask selects nothing"));
    }
    Ok(sum / n as f64)
}

/// Which pixels of a sequence an MSE is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MseRegion {
    All,
    Observed,
    Missing,
}

/// Per-pixel selection for sequence `i`, laid out like its frames.
pub fn region_mask(data: &SequenceBatch, i: usize, region: MseRegion) -> Vec<bool> {
    let mut out = Vec::with_capacity(data.lengths[i] * data.frame_dim());
    for l in 0..data.lengths[i] {
        let obs = data.is_observed(i, l);
        for &p in data.pixel_mask_frame(i, l) {
            let seen = obs && p == 1;
            out.push(match region {
                MseRegion::All => true,
                MseRegion::Observed => seen,
                MseRegion::Missing => !seen,
            });
        }
    }
    out
}
