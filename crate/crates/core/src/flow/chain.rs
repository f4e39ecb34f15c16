use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::iaf::IafBlock;
use super::made::MadeConfig;
use crate::autodiff::{Array, Binding, ParamId, ParamStore, Precision, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// IAF blocks composed inside one transition; odd blocks use the
    /// reversed variable order.
    pub blocks_per_transition: usize,
    pub made: MadeConfig,
    pub gate_bias: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            blocks_per_transition: 2,
            made: MadeConfig::default(),
            gate_bias: 2.0,
        }
    }
}

/// Transitions `f_1 .. f_T` with independent parameters. Transition `l` maps
/// the latent of timestep `l - 1` to the latent of timestep `l`.
#[derive(Debug)]
pub struct FlowChain {
    dim: usize,
    transitions: Vec<Vec<IafBlock>>,
    inversions: AtomicUsize,
}

impl Clone for FlowChain {
    fn clone(&self) -> Self {
        FlowChain {
            dim: self.dim,
            transitions: self.transitions.clone(),
            inversions: AtomicUsize::new(self.inversions()),
        }
    }
}

/// Latents over a contiguous range of timesteps, together with the forward
/// log-determinant of every transition inside the range.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    /// Timestep of `latents[0]`.
    pub first: usize,
    /// Timestep the trajectory was propagated from.
    pub anchor: usize,
    pub latents: Vec<T>,
    /// `logdets[i]` belongs to transition `first + i + 1`, evaluated at its input.
    pub logdets: Vec<T>,
    pub log_p_z0: Option<T>,
}

/// A trajectory materialised as plain arrays.
pub type LatentTrajectory = Trajectory<Array>;

impl<T> Trajectory<T> {
    pub fn last(&self) -> usize {
        self.first + self.latents.len() - 1
    }

    pub fn latent(&self, step: usize) -> Option<&T> {
        step.checked_sub(self.first).and_then(|i| self.latents.get(i))
    }

    pub fn logdet(&self, transition: usize) -> Option<&T> {
        if transition <= self.first {
            return None;
        }
        self.logdets.get(transition - self.first - 1)
    }
}

impl Trajectory<Var> {
    pub fn to_arrays(&self, tape: &Tape) -> LatentTrajectory {
        Trajectory {
            first: self.first,
            anchor: self.anchor,
            latents: self.latents.iter().map(|&v| tape.value(v)).collect(),
            logdets: self.logdets.iter().map(|&v| tape.value(v)).collect(),
            log_p_z0: self.log_p_z0.map(|v| tape.value(v)),
        }
    }
}

impl FlowChain {
    /// Builds `length` transitions with parameters named `flow.t{l}.block{b}.*`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        length: usize,
        config: FlowConfig,
        rng: &mut R,
    ) -> Self {
        let transitions = (1..=length)
            .map(|l| {
                (0..config.blocks_per_transition)
                    .map(|b| {
                        IafBlock::new(
                            store,
                            &format!("flow.t{l}.block{b}"),
                            dim,
                            b % 2 == 1,
                            config.made,
                            config.gate_bias,
                            rng,
                        )
                    })
                    .collect()
            })
            .collect();
        FlowChain {
            dim,
            transitions,
            inversions: AtomicUsize::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn blocks(&self, transition: usize) -> &[IafBlock] {
        &self.transitions[transition - 1]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.transitions
            .iter()
            .flatten()
            .flat_map(IafBlock::param_ids)
            .collect()
    }

    /// Count of transition inversions performed so far.
    pub fn inversions(&self) -> usize {
        self.inversions.load(Ordering::Relaxed)
    }

    pub fn reset_inversions(&self) {
        self.inversions.store(0, Ordering::Relaxed);
    }

    fn check_transition(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.len() {
            return Err(Error::IndexOutOfRange {
                index: l,
                limit: self.len(),
                context: "flow transition",
            });
        }
        Ok(())
    }

    /// `f_l(z)` and its log-determinant (`[B, 1]`).
    pub fn forward(&self, b: &Binding<'_>, l: usize, z: Var) -> Result<(Var, Var)> {
        self.check_transition(l)?;
        let t = b.tape();
        let mut cur = z;
        let mut total: Option<Var> = None;
        for block in &self.transitions[l - 1] {
            let (next, ld) = block.forward(b, cur);
            cur = next;
            total = Some(match total {
                Some(acc) => t.add(acc, ld),
                None => ld,
            });
        }
        let ld = total.unwrap_or_else(|| t.constant(Array::zeros(&[t.shape(z)[0], 1])));
        Ok((cur, ld))
    }

    /// `f_l^{-1}(z)` and the forward log-determinant of `f_l` at the result.
    pub fn inverse(&self, b: &Binding<'_>, l: usize, z: Var) -> Result<(Var, Var)> {
        self.check_transition(l)?;
        self.inversions.fetch_add(1, Ordering::Relaxed);
        let t = b.tape();
        let mut cur = z;
        let mut total: Option<Var> = None;
        for block in self.transitions[l - 1].iter().rev() {
            let (prev, ld) = block.inverse(b, cur)?;
            cur = prev;
            total = Some(match total {
                Some(acc) => t.add(acc, ld),
                None => ld,
            });
        }
        let ld = total.unwrap_or_else(|| t.constant(Array::zeros(&[t.shape(z)[0], 1])));
        Ok((cur, ld))
    }

    /// Propagates `z_j` from timestep `j` to timestep `k`, forward through
    /// `f_{j+1} .. f_k` when `k > j`, backward through `f_j^{-1} .. f_{k+1}^{-1}`
    /// when `k < j`.
    pub fn propagate(&self, b: &Binding<'_>, z_j: Var, j: usize, k: usize) -> Result<Trajectory<Var>> {
        for idx in [j, k] {
            if idx > self.len() {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    limit: self.len(),
                    context: "chain_propagate",
                });
            }
        }
        let mut traj = Trajectory {
            first: j.min(k),
            anchor: j,
            latents: vec![z_j],
            logdets: Vec::new(),
            log_p_z0: None,
        };
        if k >= j {
            let mut cur = z_j;
            for l in j + 1..=k {
                let (next, ld) = self.forward(b, l, cur)?;
                traj.latents.push(next);
                traj.logdets.push(ld);
                cur = next;
            }
        } else {
            let mut cur = z_j;
            let mut latents = vec![z_j];
            let mut logdets = Vec::new();
            for l in (k + 1..=j).rev() {
                let (prev, ld) = self.inverse(b, l, cur)?;
                latents.push(prev);
                logdets.push(ld);
                cur = prev;
            }
            latents.reverse();
            logdets.reverse();
            traj.latents = latents;
            traj.logdets = logdets;
        }
        Ok(traj)
    }

    /// Fills timesteps `0..=last` from `z_j` at timestep `j` (past by
    /// inversion, future by forward maps).
    pub fn propagate_full(&self, b: &Binding<'_>, z_j: Var, j: usize, last: usize) -> Result<Trajectory<Var>> {
        if j > last {
            return Err(Error::IndexOutOfRange {
                index: j,
                limit: last,
                context: "conditioning index",
            });
        }
        let past = self.propagate(b, z_j, j, 0)?;
        let future = self.propagate(b, z_j, j, last)?;
        let mut latents = past.latents;
        latents.extend_from_slice(&future.latents[1..]);
        let mut logdets = past.logdets;
        logdets.extend(future.logdets);
        Ok(Trajectory {
            first: 0,
            anchor: j,
            latents,
            logdets,
            log_p_z0: None,
        })
    }

    /// Plain-array propagation from `j` to `k`.
    pub fn propagate_arrays(
        &self,
        store: &ParamStore,
        z_j: &Array,
        j: usize,
        k: usize,
        precision: Precision,
    ) -> Result<LatentTrajectory> {
        if z_j.rank() != 2 || z_j.cols() != self.dim {
            return Err(Error::shape(
                "chain_propagate",
                format!("expected [B, {}], got {:?}", self.dim, z_j.shape()),
            ));
        }
        let tape = Tape::new(precision);
        let b = Binding::frozen(&tape, store);
        let zv = tape.constant(z_j.clone());
        let traj = self.propagate(&b, zv, j, k)?;
        for &v in traj.latents.iter().chain(&traj.logdets) {
            tape.ensure_finite(v, "chain_propagate")?;
        }
        Ok(traj.to_arrays(&tape))
    }
}

/// `log p(z_j) = log p(z_0) - sum_{l=1..j} logdet_l`, rows broadcast.
pub fn chain_log_prior(tape: &Tape, log_p_z0: Var, traj: &Trajectory<Var>, j: usize) -> Result<Var> {
    let mut acc = log_p_z0;
    for l in 1..=j {
        let ld = traj.logdet(l).ok_or(Error::MissingLogDet(l))?;
        acc = tape.sub(acc, *ld);
    }
    Ok(acc)
}

/// Plain-array form of [`chain_log_prior`].
pub fn chain_log_prior_arrays(log_p_z0: &Array, traj: &LatentTrajectory, j: usize) -> Result<Array> {
    let mut out = log_p_z0.clone();
    for l in 1..=j {
        let ld = traj.logdet(l).ok_or(Error::MissingLogDet(l))?;
        if ld.len() != out.len() {
            return Err(Error::shape("chain_log_prior", format!("{:?} vs {:?}", ld.shape(), out.shape())));
        }
        for (o, v) in out.data_mut().iter_mut().zip(ld.data()) {
            *o -= v;
        }
    }
    Ok(out)
}
