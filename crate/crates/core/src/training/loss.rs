use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Array, Binding, Tape, Var};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::flow::chain_log_prior;
use crate::model::{standard_normal_logpdf, Model};

/// Divisor applied to the summed reconstruction of a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReconDivisor {
    /// `t_i + 1`, the nominal frame count, whatever is missing.
    #[default]
    Nominal,
    /// `|O_i|`, the number of observed frames.
    Observed,
}

/// Conditioning index and standard-normal noise for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub j: usize,
    pub noise: Vec<f64>,
}

/// Draws `j` uniformly from the observed indices of sequence `i`, then the
/// posterior noise, in that order.
pub fn draw_for_sequence<R: Rng + ?Sized>(data: &SequenceBatch, i: usize, latent_dim: usize, rng: &mut R) -> Result<Draw> {
    let obs = data.observed_indices(i);
    if obs.is_empty() {
        return Err(Error::NoObservation(i));
    }
    let j = obs[rng.random_range(0..obs.len())];
    let noise = (0..latent_dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Draw { j, noise })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Summed log-likelihood of observed frames over the divisor.
    pub recon_avg: f64,
    pub log_q: f64,
    pub log_prior_zj: f64,
    /// `-recon_avg + log_q - log_prior_zj`.
    pub total: f64,
    pub j: usize,
}

/// Per-row loss terms of a group of sequences sharing `(j, length)`.
pub(crate) struct GroupTerms {
    pub total: Var,
    pub recon: Var,
    /// Reconstruction before the divisor.
    pub recon_sum: Var,
    pub log_q: Var,
    pub log_prior: Var,
}

/// Sequences grouped by `(j, length)` in order of first appearance, keeping
/// member order.
pub(crate) fn group_by_index(data: &SequenceBatch, seqs: &[usize], draws: &[Draw]) -> Vec<(usize, usize, Vec<usize>)> {
    let mut groups: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (pos, (&i, d)) in seqs.iter().zip(draws).enumerate() {
        let len = data.lengths[i];
        match groups.iter_mut().find(|g| g.0 == d.j && g.1 == len) {
            Some(g) => g.2.push(pos),
            None => groups.push((d.j, len, vec![pos])),
        }
    }
    groups
}

fn frames_matrix(data: &SequenceBatch, rows: impl Iterator<Item = (usize, usize)>) -> (Vec<f64>, usize) {
    let mut out = Vec::new();
    let mut n = 0;
    for (i, l) in rows {
        out.extend(data.frame(i, l).iter().map(|&v| v as f64));
        n += 1;
    }
    (out, n)
}

pub(crate) fn group_terms(
    model: &Model,
    b: &Binding<'_>,
    data: &SequenceBatch,
    members: &[usize],
    j: usize,
    len: usize,
    noise: &[&[f64]],
    divisor: ReconDivisor,
) -> Result<GroupTerms> {
    let t = b.tape();
    let g = members.len();
    let (big_d, d) = (model.obs_dim(), model.latent_dim());
    if data.frame_dim() != big_d {
        return Err(Error::shape(
            "sequence_loss",
            format!("frames hold {} values, model expects {big_d}", data.frame_dim()),
        ));
    }
    if len > model.chain().len() + 1 {
        return Err(Error::IndexOutOfRange {
            index: len - 1,
            limit: model.chain().len(),
            context: "sequence length versus flow chain",
        });
    }
    let (xj, _) = frames_matrix(data, members.iter().map(|&i| (i, j)));
    let xj = t.constant(Array::new(vec![g, big_d], xj)?);
    let post = model.encode(b, xj);
    let eps = t.constant(Array::new(vec![g, d], noise.iter().flat_map(|n| n.iter().copied()).collect())?);
    let (zj, log_q) = model.posterior_sample(b, post, eps);

    let traj = model.chain().propagate_full(b, zj, j, len - 1)?;
    let lp0 = model.log_prior_z0(b, traj.latents[0]);
    let log_prior = chain_log_prior(t, lp0, &traj, j)?;

    let steps: Vec<usize> = (0..len)
        .filter(|&l| members.iter().any(|&i| data.is_observed(i, l)))
        .collect();
    let zs: Vec<Var> = steps.iter().map(|&l| traj.latents[l]).collect();
    let z_all = if zs.len() == 1 { zs[0] } else { t.concat(&zs, 0) };
    let out = model.decode(b, z_all);
    let rows = || steps.iter().flat_map(|&l| members.iter().map(move |&i| (i, l)));
    let (x, nrows) = frames_matrix(data, rows());
    let x = t.constant(Array::new(vec![nrows, big_d], x)?);
    let mut mask = Vec::with_capacity(nrows * big_d);
    for (i, l) in rows() {
        if data.is_observed(i, l) {
            mask.extend(data.pixel_mask_frame(i, l).iter().map(|&m| m as f64));
        } else {
            mask.extend(std::iter::repeat_n(0.0, big_d));
        }
    }
    let mask = t.constant(Array::new(vec![nrows, big_d], mask)?);
    let ll = model.obs_loglik(t, out, x, mask);
    let mut recon_sum = t.slice(ll, 0, 0, g);
    for k in 1..steps.len() {
        let part = t.slice(ll, 0, k * g, (k + 1) * g);
        recon_sum = t.add(recon_sum, part);
    }
    let recon = match divisor {
        ReconDivisor::Nominal => t.mul_scalar(recon_sum, 1.0 / len as f64),
        ReconDivisor::Observed => {
            let inv: Vec<f64> = members
                .iter()
                .map(|&i| 1.0 / data.observed_indices(i).len() as f64)
                .collect();
            let inv = t.constant(Array::new(vec![g, 1], inv)?);
            t.mul(recon_sum, inv)
        }
    };
    let neg_recon = t.neg(recon);
    let total = t.add(neg_recon, log_q);
    let total = t.sub(total, log_prior);
    Ok(GroupTerms {
        total,
        recon,
        recon_sum,
        log_q,
        log_prior,
    })
}

fn breakdowns(t: &Tape, terms: &GroupTerms, j: usize) -> Vec<LossBreakdown> {
    let (tot, rec, lq, lp) = (
        t.value(terms.total),
        t.value(terms.recon),
        t.value(terms.log_q),
        t.value(terms.log_prior),
    );
    (0..tot.len())
        .map(|r| LossBreakdown {
            recon_avg: rec.data()[r],
            log_q: lq.data()[r],
            log_prior_zj: lp.data()[r],
            total: tot.data()[r],
            j,
        })
        .collect()
}

/// Mean loss over the sequences `seqs` of `data` with the given draws,
/// recorded on the tape of `b`, plus the per-sequence breakdown in `seqs`
/// order.
pub fn sequence_loss(
    model: &Model,
    b: &Binding<'_>,
    data: &SequenceBatch,
    seqs: &[usize],
    draws: &[Draw],
    divisor: ReconDivisor,
) -> Result<(Var, Vec<LossBreakdown>)> {
    if seqs.is_empty() || seqs.len() != draws.len() {
        return Err(Error::invalid("sequence_loss needs one draw per sequence"));
    }
    let t = b.tape();
    let mut out = vec![None; seqs.len()];
    let mut sum: Option<Var> = None;
    for (j, len, members) in group_by_index(data, seqs, draws) {
        let ids: Vec<usize> = members.iter().map(|&p| seqs[p]).collect();
        let noise: Vec<&[f64]> = members.iter().map(|&p| draws[p].noise.as_slice()).collect();
        let terms = group_terms(model, b, data, &ids, j, len, &noise, divisor)?;
        for (p, br) in members.iter().zip(breakdowns(t, &terms, j)) {
            out[*p] = Some(br);
        }
        let s = t.sum(terms.total, None);
        sum = Some(match sum {
            Some(acc) => t.add(acc, s),
            None => s,
        });
    }
    let loss = t.mul_scalar(sum.expect("at least one group"), 1.0 / seqs.len() as f64);
    t.ensure_finite(loss, "sequence loss")?;
    Ok((loss, out.into_iter().map(|b| b.expect("every sequence grouped")).collect()))
}

/// Per-frame VAE objective: every observed frame on its own, standard-normal
/// prior on its latent, no flows. Returns the mean over frames and the
/// frame-level breakdown. `noise` holds one row per observed frame, in
/// sequence-major order.
pub fn warmup_loss(
    model: &Model,
    b: &Binding<'_>,
    data: &SequenceBatch,
    seqs: &[usize],
    noise: &[Vec<f64>],
) -> Result<(Var, Vec<LossBreakdown>)> {
    let t = b.tape();
    let (big_d, d) = (model.obs_dim(), model.latent_dim());
    let frames: Vec<(usize, usize)> = seqs
        .iter()
        .flat_map(|&i| data.observed_indices(i).into_iter().map(move |l| (i, l)))
        .collect();
    if frames.is_empty() || frames.len() != noise.len() {
        return Err(Error::invalid("warm-up needs one noise row per observed frame"));
    }
    let n = frames.len();
    let (x, _) = frames_matrix(data, frames.iter().copied());
    let x = t.constant(Array::new(vec![n, big_d], x)?);
    let mask: Vec<f64> = frames
        .iter()
        .flat_map(|&(i, l)| data.pixel_mask_frame(i, l).iter().map(|&m| m as f64))
        .collect();
    let mask = t.constant(Array::new(vec![n, big_d], mask)?);
    let eps = t.constant(Array::new(vec![n, d], noise.iter().flatten().copied().collect())?);
    let post = model.encode(b, x);
    let (z, log_q) = model.posterior_sample(b, post, eps);
    let log_prior = standard_normal_logpdf(t, z, d as f64);
    let out = model.decode(b, z);
    let recon = model.obs_loglik(t, out, x, mask);
    let neg = t.neg(recon);
    let total = t.add(neg, log_q);
    let total = t.sub(total, log_prior);
    let loss = t.mean(total, None);
    t.ensure_finite(loss, "warm-up loss")?;
    let terms = GroupTerms {
        total,
        recon,
        recon_sum: recon,
        log_q,
        log_prior,
    };
    let mut br = breakdowns(t, &terms, 0);
    for (b, &(_, l)) in br.iter_mut().zip(&frames) {
        b.j = l;
    }
    Ok((loss, br))
}
