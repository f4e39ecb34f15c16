//! Per-frame encoder and decoder, priors over the first latent, optional
//! posterior flows, and the flow chain linking latent timesteps.

mod mlp;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Array, Binding, ParamId, ParamStore, Precision, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowChain, FlowConfig, IafBlock, MadeConfig};
pub use mlp::Mlp;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObsFamily {
    /// Pixel means in (0, 1) through a sigmoid; the decoder emits logits.
    Bernoulli,
    /// Fixed-variance Gaussian; the decoder emits the mean.
    Gaussian { variance: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorKind {
    Standard,
    /// Mixture of encoder Gaussians evaluated at learnable pseudo-inputs.
    Vamp { components: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PosteriorKind {
    Gaussian,
    IafEnriched { transforms: usize, made: MadeConfig },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Flattened observation size `C * H * W`.
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub family: ObsFamily,
    pub prior: PriorKind,
    pub posterior: PosteriorKind,
    pub flow: FlowConfig,
    /// Number of transitions, at least the longest sequence length minus one.
    pub chain_len: usize,
}

impl ModelConfig {
    pub fn new(obs_dim: usize, latent_dim: usize, chain_len: usize) -> Self {
        ModelConfig {
            obs_dim,
            latent_dim,
            enc_hidden: vec![256, 256],
            dec_hidden: vec![256, 256],
            family: ObsFamily::Bernoulli,
            prior: PriorKind::Standard,
            posterior: PosteriorKind::Gaussian,
            flow: FlowConfig::default(),
            chain_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("observation and latent dimensions must be positive"));
        }
        if let PriorKind::Vamp { components: 0 } = self.prior {
            return Err(Error::invalid("VAMP prior needs at least one component"));
        }
        if let ObsFamily::Gaussian { variance } = self.family {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(Error::invalid("Gaussian observation variance must be positive"));
            }
        }
        if self.enc_hidden.iter().chain(&self.dec_hidden).any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Variational parameters of `q(z | x)` for a batch, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorOutput {
    pub mu: Var,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Var,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    pseudo_inputs: Option<ParamId>,
    postflow: Vec<IafBlock>,
    chain: FlowChain,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            pseudo_inputs: self.pseudo_inputs,
            postflow: self.postflow.clone(),
            chain: self.chain.clone(),
        }
    }
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (big_d, d) = (config.obs_dim, config.latent_dim);
        let encoder = Mlp::new(&mut params, "enc", big_d, &config.enc_hidden, 2 * d, rng);
        let decoder = Mlp::new(&mut params, "dec", d, &config.dec_hidden, big_d, rng);
        let pseudo_inputs = match config.prior {
            PriorKind::Standard => None,
            PriorKind::Vamp { components } => {
                let u = Array::from_fn(&[components, big_d], |_| rng.random_range(0.0..1.0));
                Some(params.add("prior.pseudo", u))
            }
        };
        let postflow = match config.posterior {
            PosteriorKind::Gaussian => Vec::new(),
            PosteriorKind::IafEnriched { transforms, made } => (0..transforms)
                .map(|k| {
                    IafBlock::new(
                        &mut params,
                        &format!("postflow.b{k}"),
                        d,
                        k % 2 == 1,
                        made,
                        config.flow.gate_bias,
                        rng,
                    )
                })
                .collect(),
        };
        let chain = FlowChain::new(&mut params, d, config.chain_len, config.flow, rng);
        Ok(Model {
            config,
            params,
            encoder,
            decoder,
            pseudo_inputs,
            postflow,
            chain,
        })
    }

    pub fn chain(&self) -> &FlowChain {
        &self.chain
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn pseudo_inputs(&self) -> Option<ParamId> {
        self.pseudo_inputs
    }

    pub fn posterior_flow(&self) -> &[IafBlock] {
        &self.postflow
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    /// Parameter ids of the transition flows.
    pub fn flow_param_ids(&self) -> Vec<ParamId> {
        self.chain.param_ids()
    }

    /// Replaces the VAMP pseudo-inputs with the given observations (one per
    /// component, cycling if fewer are given).
    pub fn set_pseudo_inputs(&mut self, frames: &[&[f64]]) -> Result<()> {
        let Some(id) = self.pseudo_inputs else {
            return Ok(());
        };
        if frames.is_empty() || frames.iter().any(|f| f.len() != self.config.obs_dim) {
            return Err(Error::invalid("pseudo-input frames must be non-empty and match the observation size"));
        }
        let shape = self.params.get(id).shape().to_vec();
        let k = shape[0];
        let big_d = shape[1];
        *self.params.get_mut(id) = Array::from_fn(&shape, |i| frames[(i / big_d) % frames.len().min(k)][i % big_d]);
        Ok(())
    }

    // ---- tape-level pieces ----------------------------------------------

    pub fn encode(&self, b: &Binding<'_>, x: Var) -> PosteriorOutput {
        let t = b.tape();
        let d = self.config.latent_dim;
        let out = self.encoder.forward(b, x);
        let mu = t.slice(out, 1, 0, d);
        let raw = t.slice(out, 1, d, 2 * d);
        let logvar = t.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        PosteriorOutput { mu, logvar }
    }

    /// Reparameterised draw `z = mu + exp(logvar / 2) * noise`, pushed through
    /// the posterior flows when present, and its log-density `[B, 1]`.
    pub fn posterior_sample(&self, b: &Binding<'_>, post: PosteriorOutput, noise: Var) -> (Var, Var) {
        let t = b.tape();
        let half = t.mul_scalar(post.logvar, 0.5);
        let std = t.exp(half);
        let scaled = t.mul(std, noise);
        let mut z = t.add(post.mu, scaled);
        let sq = t.square(noise);
        let inner = t.add(post.logvar, sq);
        let s = t.sum(inner, Some(1));
        let s = t.mul_scalar(s, -0.5);
        let mut log_q = t.add_scalar(s, -0.5 * self.config.latent_dim as f64 * LN_2PI);
        for block in &self.postflow {
            let (next, ld) = block.forward(b, z);
            z = next;
            log_q = t.sub(log_q, ld);
        }
        (z, log_q)
    }

    /// Decoder output: logits for Bernoulli, means for Gaussian.
    pub fn decode(&self, b: &Binding<'_>, z: Var) -> Var {
        self.decoder.forward(b, z)
    }

    /// Distribution mean from a decoder output.
    pub fn output_mean(&self, t: &Tape, out: Var) -> Var {
        match self.config.family {
            ObsFamily::Bernoulli => t.sigmoid(out),
            ObsFamily::Gaussian { .. } => out,
        }
    }

    /// Per-row log-likelihood `[B, 1]` summed over pixels with `mask = 1`.
    /// Masked pixels contribute exactly zero value and gradient.
    pub fn obs_loglik(&self, t: &Tape, out: Var, x: Var, mask: Var) -> Var {
        let per_pixel = match self.config.family {
            ObsFamily::Bernoulli => {
                // x log s(a) + (1 - x) log(1 - s(a)) = x a - softplus(a)
                let xa = t.mul(x, out);
                let sp = t.softplus(out);
                t.sub(xa, sp)
            }
            ObsFamily::Gaussian { variance } => {
                let diff = t.sub(x, out);
                let sq = t.square(diff);
                let scaled = t.mul_scalar(sq, -0.5 / variance);
                t.add_scalar(scaled, -0.5 * (LN_2PI + variance.ln()))
            }
        };
        let kept = t.mul(per_pixel, mask);
        t.sum(kept, Some(1))
    }

    /// `log p(z_0)` per row, `[B, 1]`.
    pub fn log_prior_z0(&self, b: &Binding<'_>, z0: Var) -> Var {
        let t = b.tape();
        let d = self.config.latent_dim as f64;
        match self.pseudo_inputs {
            None => standard_normal_logpdf(t, z0, d),
            Some(id) => {
                let u = b.var(id);
                let post = self.encode(b, u);
                let k = t.shape(u)[0];
                let comps: Vec<Var> = (0..k)
                    .map(|c| {
                        let mu = t.slice(post.mu, 0, c, c + 1);
                        let lv = t.slice(post.logvar, 0, c, c + 1);
                        diag_gaussian_logpdf(t, z0, mu, lv)
                    })
                    .collect();
                let all = t.concat(&comps, 1);
                t.log_mean_exp(all, 1)
            }
        }
    }

    // ---- array-level conveniences ---------------------------------------

    /// Posterior means and log-variances for a batch of frames.
    pub fn encode_arrays(&self, x: &Array, precision: Precision) -> Result<(Array, Array)> {
        self.check_obs(x, "encode")?;
        let tape = Tape::new(precision);
        let b = Binding::frozen(&tape, &self.params);
        let xv = tape.constant(x.clone());
        let post = self.encode(&b, xv);
        tape.ensure_finite(post.mu, "encoder mean")?;
        Ok((tape.value(post.mu), tape.value(post.logvar)))
    }

    /// Decoded distribution means for a batch of latents.
    pub fn decode_mean_arrays(&self, z: &Array, precision: Precision) -> Result<Array> {
        if z.rank() != 2 || z.cols() != self.config.latent_dim {
            return Err(Error::shape(
                "decode",
                format!("expected [B, {}], got {:?}", self.config.latent_dim, z.shape()),
            ));
        }
        let tape = Tape::new(precision);
        let b = Binding::frozen(&tape, &self.params);
        let zv = tape.constant(z.clone());
        let out = self.decode(&b, zv);
        let mean = self.output_mean(&tape, out);
        tape.ensure_finite(mean, "decoder output")?;
        Ok(tape.value(mean))
    }

    /// `log p(z_0)` for a batch of latents.
    pub fn log_prior_arrays(&self, z0: &Array, precision: Precision) -> Result<Array> {
        let tape = Tape::new(precision);
        let b = Binding::frozen(&tape, &self.params);
        let zv = tape.constant(z0.clone());
        let lp = self.log_prior_z0(&b, zv);
        Ok(tape.value(lp))
    }

    /// `n` draws from the prior over `z_0`.
    pub fn sample_prior_z0<R: Rng + ?Sized>(&self, n: usize, rng: &mut R, precision: Precision) -> Result<Array> {
        let d = self.config.latent_dim;
        match self.pseudo_inputs {
            None => Ok(Array::from_fn(&[n, d], |_| StandardNormal.sample(rng))),
            Some(id) => {
                let (mu, lv) = self.encode_arrays(self.params.get(id), precision)?;
                let k = mu.rows();
                let mut out = Vec::with_capacity(n * d);
                for _ in 0..n {
                    let c = rng.random_range(0..k);
                    for i in 0..d {
                        let e: f64 = StandardNormal.sample(rng);
                        out.push(mu.row_slice(c)[i] + (0.5 * lv.row_slice(c)[i]).exp() * e);
                    }
                }
                Array::new(vec![n, d], out)
            }
        }
    }

    fn check_obs(&self, x: &Array, op: &'static str) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.obs_dim {
            return Err(Error::shape(
                op,
                format!("expected [B, {}], got {:?}", self.config.obs_dim, x.shape()),
            ));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("{op} input")));
        }
        Ok(())
    }
}

/// `-0.5 |z|^2 - (d / 2) log 2 pi` per row.
pub(crate) fn standard_normal_logpdf(t: &Tape, z: Var, d: f64) -> Var {
    let sq = t.square(z);
    let s = t.sum(sq, Some(1));
    let s = t.mul_scalar(s, -0.5);
    t.add_scalar(s, -0.5 * d * LN_2PI)
}

/// Diagonal Gaussian log-density per row of `z`; `mu`, `logvar` broadcast.
pub(crate) fn diag_gaussian_logpdf(t: &Tape, z: Var, mu: Var, logvar: Var) -> Var {
    let d = t.shape(z)[1] as f64;
    let diff = t.sub(z, mu);
    let sq = t.square(diff);
    let neg_lv = t.neg(logvar);
    let prec = t.exp(neg_lv);
    let q = t.mul(sq, prec);
    let inner = t.add(q, logvar);
    let s = t.sum(inner, Some(1));
    let s = t.mul_scalar(s, -0.5);
    t.add_scalar(s, -0.5 * d * LN_2PI)
}
