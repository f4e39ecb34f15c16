//! The 64-bit verification battery run by `selftest` and the acceptance
//! suite. Every check builds its own small model from a seed.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::oracle::{
    gaussian_kl_standard, grid_integral_2d, log_abs_det, max_upper_entry, numerical_jacobian, LinearGaussianChain,
};
use crate::autodiff::{gradcheck_with, Array, Binding, GradCheck, ParamStore, Precision, Stencil, Tape};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::flow::{
    chain_log_prior_arrays, iaf_forward, iaf_inverse, FlowChain, FlowConfig, IafBlock, MadeConfig, MadeNet,
};
use crate::inference::{estimate_nll, NllPolicy};
use crate::model::{Model, ModelConfig, ObsFamily, PosteriorKind, PriorKind};
use crate::training::{group_terms, sequence_loss, Draw, ReconDivisor};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One line of the battery report.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: &'static str,
    /// Measured quantity, compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} {:>12.3e} (limit {:.1e})  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold,
            self.detail
        )
    }
}

fn row(name: &'static str, value: f64, threshold: f64, detail: String) -> CheckRow {
    CheckRow {
        name,
        value,
        threshold,
        passed: value.is_finite() && value < threshold,
        detail,
    }
}

fn random_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2.5..2.5)).collect()
}

// ---- flows -----------------------------------------------------------------

/// Worst `||f^-1(f(z)) - z||_inf` over `pairs` random blocks and points.
pub fn round_trip_error(precision: Precision, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MadeConfig {
        hidden_layers: 2,
        hidden_width: 32,
    };
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let d = 1 + i % 8;
        let mut store = ParamStore::new();
        let block = IafBlock::new(&mut store, "b", d, i % 2 == 0, cfg, 2.0, &mut rng);
        store.round_to(precision);
        let z = Array::row(random_point(&mut rng, d)).rounded(precision);
        let (out, _) = iaf_forward(&block, &store, &z, precision)?;
        let back = iaf_inverse(&block, &store, &out, precision)?;
        worst = worst.max(back.max_abs_diff(&z));
    }
    Ok(worst)
}

/// Largest `|J|` entry on or above the diagonal (in autoregressive order) of
/// either MADE head, over both variable orders and a few random points.
/// Also fails when no entry below the diagonal is active.
pub fn made_mask_leak(cfg: MadeConfig, dim: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for reversed in [false, true] {
        let mut store = ParamStore::new();
        let order: Vec<usize> = if reversed { (0..dim).rev().collect() } else { (0..dim).collect() };
        let net = MadeNet::new(&mut store, "m", dim, &order, cfg, &mut rng);
        let pos: Vec<usize> = net.input_degrees().iter().map(|g| g - 1).collect();
        for _ in 0..5 {
            let x = random_point(&mut rng, dim);
            for head in 0..2 {
                let jac = numerical_jacobian(
                    |p| {
                        let (m, s) = net.eval(&store, &Array::row(p.to_vec()), Precision::F64)?;
                        Ok(if head == 0 { m } else { s }.into_data())
                    },
                    &x,
                    1e-5,
                )?;
                if dim > 1 && jac.iter().all(|v| v.abs() <= 1e-6) {
                    return Err(Error::invalid("MADE Jacobian is identically zero"));
                }
                worst = worst.max(max_upper_entry(&jac, &pos));
            }
        }
    }
    Ok(worst)
}

/// Worst `|logdet - log|det J||` over blocks of dimension 1 to 8, with `J`
/// from central differences.
pub fn logdet_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for d in 1..=8 {
        for trial in 0..3 {
            let mut store = ParamStore::new();
            let cfg = MadeConfig {
                hidden_layers: 2,
                hidden_width: 32,
            };
            let gate_bias = rng.random_range(-1.0..3.0);
            let block = IafBlock::new(&mut store, "b", d, trial % 2 == 1, cfg, gate_bias, &mut rng);
            let z = random_point(&mut rng, d);
            let (_, ld) = iaf_forward(&block, &store, &Array::row(z.clone()), Precision::F64)?;
            let jac = numerical_jacobian(
                |p| Ok(iaf_forward(&block, &store, &Array::row(p.to_vec()), Precision::F64)?.0.into_data()),
                &z,
                1e-5,
            )?;
            worst = worst.max((ld.item() - log_abs_det(&jac)).abs());
        }
    }
    Ok(worst)
}

/// Worst `|mass - 1|` of the standard prior pushed through chains of length
/// 1 to 4 in two dimensions.
pub fn density_mass_error(seed: u64, cells: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for len in 1..=4 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + len as u64);
        let cfg = FlowConfig {
            made: MadeConfig {
                hidden_layers: 2,
                hidden_width: 16,
            },
            ..FlowConfig::default()
        };
        let chain = FlowChain::new(&mut store, 2, len, cfg, &mut rng);
        let mass = grid_integral_2d(
            |pts| {
                let z = Array::from_fn(&[pts.len(), 2], |i| pts[i / 2][i % 2]);
                let tr = chain.propagate_arrays(&store, &z, len, 0, Precision::F64)?;
                let z0 = &tr.latents[0];
                let lp0 = Array::from_fn(&[pts.len(), 1], |r| {
                    let v = z0.row_slice(r);
                    -0.5 * (v[0] * v[0] + v[1] * v[1]) - LN_2PI
                });
                Ok(chain_log_prior_arrays(&lp0, &tr, len)?.into_data())
            },
            -8.0,
            8.0,
            cells,
        )?;
        worst = worst.max((mass - 1.0).abs());
    }
    Ok(worst)
}

// ---- full loss gradient ------------------------------------------------------

/// Model and batch used by the full-loss gradient check: every parameter
/// group (encoder, decoder, transition flows, VAMP pseudo-inputs, posterior
/// flow) takes part.
pub fn gradcheck_fixture(seed: u64) -> Result<(Model, SequenceBatch, Vec<usize>, Vec<Draw>)> {
    let (big_d, d, chain_len) = (8, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = MadeConfig {
        hidden_layers: 1,
        hidden_width: 6,
    };
    let config = ModelConfig {
        enc_hidden: vec![6],
        dec_hidden: vec![6],
        prior: PriorKind::Vamp { components: 3 },
        posterior: PosteriorKind::IafEnriched {
            transforms: 1,
            made: small,
        },
        flow: FlowConfig {
            made: small,
            ..FlowConfig::default()
        },
        ..ModelConfig::new(big_d, d, chain_len)
    };
    let mut model = Model::new(config, &mut rng)?;
    // nonzero biases so no coordinate sits at an exact symmetry point
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with(".b") {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let n = 4;
    let mut data = SequenceBatch::empty(n, chain_len + 1, 1, 2, 4);
    for v in data.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    data.lengths[2] = 3;
    data.obs_mask[1] = 0;
    data.obs_mask[4 + 2] = 0;
    for k in (0..data.pixel_mask.len()).step_by(7) {
        data.pixel_mask[k] = 0;
    }
    let seqs: Vec<usize> = (0..n).collect();
    let js = [0, 3, 1, 3];
    let draws = seqs
        .iter()
        .zip(js)
        .map(|(_, j)| Draw {
            j,
            noise: (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        })
        .collect();
    Ok((model, data, seqs, draws))
}

/// Reverse-mode gradient of the mean sequence loss against finite
/// differences over every parameter of [`gradcheck_fixture`].
pub fn full_loss_gradcheck(seed: u64) -> Result<GradCheck> {
    let (model, data, seqs, draws) = gradcheck_fixture(seed)?;
    let point: Vec<Array> = model.params.values().to_vec();
    gradcheck_with(
        |t, vars| {
            let b = Binding::with_vars(t, vars);
            let (loss, _) = sequence_loss(&model, &b, &data, &seqs, &draws, ReconDivisor::Nominal)?;
            Ok(loss)
        },
        &point,
        5e-3,
        Stencil::SevenPoint,
    )
}

// ---- KL estimator ------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct KlCheck {
    pub mean: f64,
    pub std_err: f64,
    pub analytic: f64,
}

impl KlCheck {
    /// Distance between the Monte Carlo mean and the closed form, in standard
    /// errors.
    pub fn z_score(&self) -> f64 {
        (self.mean - self.analytic).abs() / self.std_err
    }
}

/// Makes every transition the identity map: MADE weights zeroed, gates
/// saturated so `g = 1` and `log g = 0` in 64-bit arithmetic.
fn identity_flows(config: &mut ModelConfig) {
    config.flow.gate_bias = 60.0;
}

fn zero_flow_params(model: &mut Model) {
    for id in model.flow_param_ids() {
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Array::zeros(&shape);
    }
}

/// Mean of `log q(z_j | x_j) - log p(z_j)` over `draws` samples with identity
/// flows and a standard prior, against the closed-form KL.
pub fn kl_unbiasedness(draws: usize, seed: u64) -> Result<KlCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (big_d, d) = (8, 3);
    let mut config = ModelConfig {
        enc_hidden: vec![16],
        dec_hidden: vec![16],
        flow: FlowConfig {
            made: MadeConfig {
                hidden_layers: 1,
                hidden_width: 8,
            },
            ..FlowConfig::default()
        },
        ..ModelConfig::new(big_d, d, 3)
    };
    identity_flows(&mut config);
    let mut model = Model::new(config, &mut rng)?;
    zero_flow_params(&mut model);
    let enc_bias = model.params.id("enc.out.b").expect("encoder output bias");
    for v in model.params.get_mut(enc_bias).data_mut() {
        *v = rng.random_range(-0.8..0.8);
    }
    let mut data = SequenceBatch::empty(1, 4, 1, 2, 4);
    for v in data.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let j = 2;
    // only x_j is observed, so the decoder runs on a single timestep
    for l in 0..4 {
        data.obs_mask[l] = u8::from(l == j);
    }
    let x = Array::row(data.frame_f64(0, j));
    let (mu, logvar) = model.encode_arrays(&x, Precision::F64)?;
    let analytic = gaussian_kl_standard(mu.data(), logvar.data());

    let (mut sum, mut sq) = (0.0, 0.0);
    let chunk = 10_000;
    let mut done = 0;
    while done < draws {
        let n = chunk.min(draws - done);
        let noise: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let refs: Vec<&[f64]> = noise.iter().map(Vec::as_slice).collect();
        let tape = Tape::new(Precision::F64);
        let b = Binding::frozen(&tape, &model.params);
        let terms = group_terms(&model, &b, &data, &vec![0; n], j, 4, &refs, ReconDivisor::Nominal)?;
        let diff = tape.sub(terms.log_q, terms.log_prior);
        for &v in tape.value(diff).data() {
            sum += v;
            sq += v * v;
        }
        done += n;
    }
    let nf = draws as f64;
    let mean = sum / nf;
    let var = (sq / nf - mean * mean) * nf / (nf - 1.0);
    Ok(KlCheck {
        mean,
        std_err: (var / nf).sqrt(),
        analytic,
    })
}

// ---- linear-Gaussian toy -------------------------------------------------------

/// Linear-Gaussian sequence model (`d = 2`, `D = 3`, one transition) written
/// both as a [`Model`] with a linear decoder, fixed affine flows and a linear
/// encoder, and as the closed-form [`LinearGaussianChain`].
pub struct LinearGaussianToy {
    pub model: Model,
    pub oracle: LinearGaussianChain,
}

pub const TOY_NOISE_VAR: f64 = 0.05;

impl LinearGaussianToy {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (big_d, d) = (3, 2);
        let config = ModelConfig {
            enc_hidden: vec![],
            dec_hidden: vec![],
            family: ObsFamily::Gaussian {
                variance: TOY_NOISE_VAR,
            },
            flow: FlowConfig {
                made: MadeConfig {
                    hidden_layers: 1,
                    hidden_width: 4,
                },
                ..FlowConfig::default()
            },
            ..ModelConfig::new(big_d, d, 1)
        };
        let mut model = Model::new(config, &mut rng)?;
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.4, 0.8, 0.5, -0.6]);
        let bias = DVector::from_row_slice(&[0.5, 0.4, 0.6]);

        // decoder: x = z W^T + b
        let set = |model: &mut Model, name: &str, values: Vec<f64>| {
            let id = model.params.id(name).expect("toy parameter");
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Array::new(shape, values).expect("toy shape");
        };
        let wt = w.transpose();
        set(&mut model, "dec.out.w", (0..d).flat_map(|r| (0..big_d).map(move |c| (r, c))).map(|(r, c)| wt[(r, c)]).collect());
        set(&mut model, "dec.out.b", bias.iter().copied().collect());

        // transitions: zero weights, so every block is z' = g z + (1 - g) m
        zero_flow_params(&mut model);
        let gate_bias = model.config.flow.gate_bias;
        let mut a = DVector::from_element(d, 1.0);
        let mut c = DVector::zeros(d);
        for block in model.chain().blocks(1).to_vec() {
            let ids = block.param_ids();
            let out_b = *ids.last().expect("output bias");
            let m: Vec<f64> = (0..d).map(|_| rng.random_range(-0.6..0.6)).collect();
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(0.75..0.9)).collect();
            let s: Vec<f64> = g.iter().map(|&g| (g / (1.0 - g)).ln() - gate_bias).collect();
            *model.params.get_mut(out_b) = Array::row(m.iter().chain(&s).copied().collect());
            for k in 0..d {
                a[k] *= g[k];
                c[k] = g[k] * c[k] + (1.0 - g[k]) * m[k];
            }
        }

        // encoder: posterior of z given one frame under N(0, I), widened
        let prec = DMatrix::identity(d, d) + w.transpose() * &w / TOY_NOISE_VAR;
        let cov = prec.try_inverse().ok_or_else(|| Error::invalid("toy posterior"))?;
        let gain = &cov * w.transpose() / TOY_NOISE_VAR; // d x D
        let offset = -(&gain * &bias);
        let mut enc_w = vec![0.0; big_d * 2 * d];
        for r in 0..big_d {
            for k in 0..d {
                enc_w[r * 2 * d + k] = gain[(k, r)];
            }
        }
        set(&mut model, "enc.out.w", enc_w);
        let mut enc_b: Vec<f64> = offset.iter().copied().collect();
        enc_b.extend((0..d).map(|k| (2.0 * cov[(k, k)]).ln()));
        set(&mut model, "enc.out.b", enc_b);

        let oracle = LinearGaussianChain {
            w,
            b: bias,
            noise_var: TOY_NOISE_VAR,
            transitions: vec![(DMatrix::from_diagonal(&a), c)],
        };
        Ok(LinearGaussianToy { model, oracle })
    }

    /// `n` two-frame sequences drawn from the oracle model.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SequenceBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mean, cov) = self.oracle.joint(2)?;
        let chol = cov.cholesky().ok_or_else(|| Error::invalid("toy covariance"))?;
        let mut data = SequenceBatch::empty(n, 2, 1, 1, 3);
        for i in 0..n {
            let e = DVector::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
            let x = &mean + chol.l() * e;
            for (k, v) in x.iter().enumerate() {
                data.data[i * 6 + k] = *v as f32;
            }
        }
        Ok(data)
    }

    /// Exact per-frame negative log-likelihood of sequence `i`.
    pub fn exact_nll(&self, data: &SequenceBatch, i: usize) -> Result<f64> {
        let frames: Vec<Vec<f64>> = (0..data.lengths[i]).map(|l| data.frame_f64(i, l)).collect();
        Ok(-self.oracle.log_likelihood(&frames)? / frames.len() as f64)
    }
}

/// Largest `|estimate - exact|` (per frame) over `n` toy sequences with `s`
/// importance samples.
pub fn linear_gaussian_nll_error(toy: &LinearGaussianToy, n: usize, s: usize, seed: u64) -> Result<f64> {
    let data = toy.sample(n, seed)?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let est = estimate_nll(&toy.model, &data, i, s, NllPolicy::FixedJ, &mut rng, Precision::F64)?;
        worst = worst.max((est.nll - toy.exact_nll(&data, i)?).abs());
    }
    Ok(worst)
}

/// Replicate means and standard errors of the estimate at each sample count.
#[derive(Clone, Debug)]
pub struct Monotonicity {
    pub samples: Vec<usize>,
    pub means: Vec<f64>,
    pub std_errs: Vec<f64>,
}

impl Monotonicity {
    /// Largest increase between consecutive sample counts, in combined
    /// standard errors (negative when every step decreases).
    pub fn worst_increase(&self) -> f64 {
        self.means
            .windows(2)
            .zip(self.std_errs.windows(2))
            .map(|(m, s)| (m[1] - m[0]) / (s[0] * s[0] + s[1] * s[1]).sqrt().max(1e-300))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn iwae_monotonicity(
    model: &Model,
    data: &SequenceBatch,
    i: usize,
    samples: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<Monotonicity> {
    let mut means = Vec::new();
    let mut std_errs = Vec::new();
    for (k, &s) in samples.iter().enumerate() {
        let mut vals = Vec::with_capacity(replicates);
        for r in 0..replicates {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((k * replicates + r) as u64);
            vals.push(estimate_nll(model, data, i, s, NllPolicy::FixedJ, &mut rng, Precision::F64)?.nll);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        means.push(mean);
        std_errs.push((var / n).sqrt());
    }
    Ok(Monotonicity {
        samples: samples.to_vec(),
        means,
        std_errs,
    })
}

// ---- battery -------------------------------------------------------------------

/// Runs every check and returns one row each. Errors inside a check become
/// failing rows.
pub fn run_battery(seed: u64) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let failed = |name: &'static str, e: Error| CheckRow {
        name,
        value: f64::NAN,
        threshold: 0.0,
        passed: false,
        detail: format!("error: {e}"),
    };

    rows.push(match full_loss_gradcheck(seed) {
        Ok(g) => row(
            "gradcheck (full loss)",
            g.max_rel_error,
            1e-6,
            format!("{} coordinates", g.coordinates),
        ),
        Err(e) => failed("gradcheck (full loss)", e),
    });
    rows.push(match round_trip_error(Precision::F64, 1000, seed) {
        Ok(v) => row("flow round trip (f64)", v, 1e-9, "1000 pairs".into()),
        Err(e) => failed("flow round trip (f64)", e),
    });
    rows.push(match round_trip_error(Precision::F32, 1000, seed + 1) {
        Ok(v) => row("flow round trip (f32)", v, 1e-5, "1000 pairs".into()),
        Err(e) => failed("flow round trip (f32)", e),
    });
    rows.push(
        match made_mask_leak(MadeConfig::default(), 6, seed).and_then(|a| {
            let b = made_mask_leak(
                MadeConfig {
                    hidden_layers: 2,
                    hidden_width: 16,
                },
                6,
                seed,
            )?;
            Ok(a.max(b))
        }) {
            Ok(v) => row("MADE masking", v, 1e-10, "(2, 16) and (3, 128)".into()),
            Err(e) => failed("MADE masking", e),
        },
    );
    rows.push(match logdet_error(seed) {
        Ok(v) => row("log-det vs Jacobian", v, 1e-6, "d = 1..8".into()),
        Err(e) => failed("log-det vs Jacobian", e),
    });
    rows.push(match density_mass_error(seed, 400) {
        Ok(v) => row("density quadrature", v, 1e-3, "chains of length 1..4".into()),
        Err(e) => failed("density quadrature", e),
    });
    rows.push(match kl_unbiasedness(100_000, seed) {
        Ok(k) => row(
            "KL unbiasedness",
            k.z_score(),
            3.0,
            format!("mean {:.5} vs {:.5} (se {:.1e})", k.mean, k.analytic, k.std_err),
        ),
        Err(e) => failed("KL unbiasedness", e),
    });
    rows.push(match LinearGaussianToy::new(seed).and_then(|toy| linear_gaussian_nll_error(&toy, 10, 5000, seed)) {
        Ok(v) => row("linear-Gaussian NLL", v, 0.05, "S = 5000, 10 sequences".into()),
        Err(e) => failed("linear-Gaussian NLL", e),
    });
    rows
}
