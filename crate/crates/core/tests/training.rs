use longiflow::autodiff::{Array, Binding, Checkpoint, Precision, Tape};
use longiflow::data::{Generator, SequenceBatch};
use longiflow::flow::{FlowConfig, MadeConfig};
use longiflow::inference::{estimate_nll, importance_log_weights, NllPolicy};
use longiflow::model::{Model, ModelConfig, PriorKind};
use longiflow::training::{
    draw_for_sequence, sample_conditioning_indices, sequence_loss, train, warmup_loss, Draw, ReconDivisor,
    TrainConfig, TrainEvent,
};
use longiflow::verify::{full_loss_gradcheck, kl_unbiasedness};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const LN_2PI: f64 = 1.8378770664093453;

fn small_config(obs_dim: usize, d: usize, chain_len: usize) -> ModelConfig {
    ModelConfig {
        enc_hidden: vec![12],
        dec_hidden: vec![12],
        flow: FlowConfig {
            made: MadeConfig {
                hidden_layers: 1,
                hidden_width: 8,
            },
            ..FlowConfig::default()
        },
        ..ModelConfig::new(obs_dim, d, chain_len)
    }
}

fn random_batch(n: usize, frames: usize, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let mut data = SequenceBatch::empty(n, frames, 1, 2, 3);
    for v in data.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    data
}

fn noise(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Makes every transition exactly the identity in 64-bit arithmetic.
fn identity_model(mut config: ModelConfig, rng: &mut ChaCha8Rng) -> Model {
    config.flow.gate_bias = 60.0;
    let mut model = Model::new(config, rng).unwrap();
    for id in model.flow_param_ids() {
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Array::zeros(&shape);
    }
    model
}

fn loss_value(model: &Model, data: &SequenceBatch, draws: &[Draw]) -> (f64, Vec<longiflow::training::LossBreakdown>) {
    let tape = Tape::new(Precision::F64);
    let b = Binding::frozen(&tape, &model.params);
    let seqs: Vec<usize> = (0..data.len()).collect();
    let (loss, br) = sequence_loss(model, &b, data, &seqs, draws, ReconDivisor::Nominal).unwrap();
    (tape.item(loss), br)
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let g = full_loss_gradcheck(1).unwrap();
    assert!(g.max_rel_error < 1e-6, "{g:?}");
    assert!(g.coordinates > 500);
}

#[test]
fn kl_estimator_is_unbiased() {
    let k = kl_unbiasedness(100_000, 3).unwrap();
    assert!(k.z_score() < 3.0, "{k:?}");
}

#[test]
fn conditioning_index_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut data = random_batch(1, 5, &mut rng);
    data.obs_mask[1] = 0;
    data.obs_mask[3] = 0;
    let n = 100_000;
    let js = sample_conditioning_indices(&data, 0, n, &mut rng).unwrap();
    for l in [0, 2, 4] {
        let f = js.iter().filter(|&&j| j == l).count() as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.01, "index {l}: {f}");
    }
    assert!(js.iter().all(|j| [0, 2, 4].contains(j)));
}

#[test]
fn no_observed_frame_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut data = random_batch(1, 3, &mut rng);
    data.obs_mask.fill(0);
    assert!(draw_for_sequence(&data, 0, 2, &mut rng).is_err());
}

#[test]
fn single_frame_loss_is_the_negative_elbo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 3;
    let model = Model::new(small_config(6, d, 2), &mut rng).unwrap();
    let data = random_batch(3, 1, &mut rng);
    let draws: Vec<Draw> = (0..3).map(|_| Draw { j: 0, noise: noise(d, &mut rng) }).collect();
    let (_, br) = loss_value(&model, &data, &draws);
    for (i, b) in br.iter().enumerate() {
        // independent evaluation of log p(x|z) + log p(z) - log q(z|x)
        let x = data.frame_f64(i, 0);
        let (mu, lv) = model.encode_arrays(&Array::row(x.clone()), Precision::F64).unwrap();
        let z: Vec<f64> = (0..d)
            .map(|k| mu.data()[k] + (0.5 * lv.data()[k]).exp() * draws[i].noise[k])
            .collect();
        let log_q: f64 = (0..d)
            .map(|k| -0.5 * (LN_2PI + lv.data()[k] + draws[i].noise[k].powi(2)))
            .sum();
        let log_p: f64 = z.iter().map(|v| -0.5 * (LN_2PI + v * v)).sum();
        let mean = model.decode_mean_arrays(&Array::row(z), Precision::F64).unwrap();
        let recon: f64 = x
            .iter()
            .zip(mean.data())
            .map(|(&x, &p)| x * p.ln() + (1.0 - x) * (1.0 - p).ln())
            .sum();
        let neg_elbo = -(recon + log_p - log_q);
        assert!((b.total - neg_elbo).abs() < 1e-10, "{} vs {neg_elbo}", b.total);
        assert!((b.total - (-b.recon_avg + b.log_q - b.log_prior_zj)).abs() < 1e-12);
    }
}

#[test]
fn identity_chain_prior_is_base_density_at_zj() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 2;
    let model = identity_model(small_config(6, d, 3), &mut rng);
    let data = random_batch(1, 4, &mut rng);
    let draw = Draw { j: 3, noise: noise(d, &mut rng) };
    let (_, br) = loss_value(&model, &data, std::slice::from_ref(&draw));
    let x = data.frame_f64(0, 3);
    let (mu, lv) = model.encode_arrays(&Array::row(x), Precision::F64).unwrap();
    let expected: f64 = (0..d)
        .map(|k| {
            let z = mu.data()[k] + (0.5 * lv.data()[k]).exp() * draw.noise[k];
            -0.5 * (LN_2PI + z * z)
        })
        .sum();
    assert!((br[0].log_prior_zj - expected).abs() < 1e-12);
}

#[test]
fn warmup_matches_sequence_loss_on_single_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 3;
    let model = identity_model(small_config(6, d, 3), &mut rng);
    let data = random_batch(5, 1, &mut rng);
    let draws: Vec<Draw> = (0..5).map(|_| Draw { j: 0, noise: noise(d, &mut rng) }).collect();
    let (seq, _) = loss_value(&model, &data, &draws);
    let tape = Tape::new(Precision::F64);
    let b = Binding::frozen(&tape, &model.params);
    let rows: Vec<Vec<f64>> = draws.iter().map(|d| d.noise.clone()).collect();
    let (warm, _) = warmup_loss(&model, &b, &data, &[0, 1, 2, 3, 4], &rows).unwrap();
    assert!((tape.item(warm) - seq).abs() < 1e-12);
}

#[test]
fn flows_get_no_gradient_in_warmup() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 2;
    let model = Model::new(small_config(6, d, 3), &mut rng).unwrap();
    let data = random_batch(2, 4, &mut rng);
    let rows: Vec<Vec<f64>> = (0..8).map(|_| noise(d, &mut rng)).collect();
    let tape = Tape::new(Precision::F64);
    let b = Binding::trainable(&tape, &model.params);
    let (loss, _) = warmup_loss(&model, &b, &data, &[0, 1], &rows).unwrap();
    let grads = b.gradients(&tape.backward(loss).unwrap());
    for id in model.flow_param_ids() {
        assert!(grads[id.index()].as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    }
    let enc = model.params.id("enc.out.w").unwrap();
    assert!(grads[enc.index()].is_some());
}

#[test]
fn unobserved_content_never_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 3;
    let model = Model::new(small_config(6, d, 3), &mut rng).unwrap();
    let mut data = random_batch(2, 4, &mut rng);
    data.obs_mask[2] = 0;
    data.pixel_mask[4 * 6 + 6 + 1] = 0;
    let draws = vec![Draw { j: 1, noise: noise(d, &mut rng) }, Draw { j: 2, noise: noise(d, &mut rng) }];
    let grads = |data: &SequenceBatch| {
        let tape = Tape::new(Precision::F64);
        let b = Binding::trainable(&tape, &model.params);
        let (loss, _) = sequence_loss(&model, &b, data, &[0, 1], &draws, ReconDivisor::Nominal).unwrap();
        let g = b.gradients(&tape.backward(loss).unwrap());
        (tape.item(loss), g)
    };
    let before = grads(&data);
    let mut other = data.clone();
    for k in 0..6 {
        other.data[2 * 6 + k] = rng.random_range(0.0..1.0);
    }
    other.data[4 * 6 + 6 + 1] = 0.123;
    let after = grads(&other);
    assert_eq!(before.0.to_bits(), after.0.to_bits());
    assert_eq!(before.1, after.1);
}

#[test]
fn masked_pixels_have_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Model::new(small_config(6, 2, 1), &mut rng).unwrap();
    let tape = Tape::new(Precision::F64);
    let out = tape.param(Array::from_fn(&[2, 6], |_| rng.random_range(-2.0..2.0)));
    let x = tape.constant(Array::from_fn(&[2, 6], |_| rng.random_range(0.0..1.0)));
    let mask_v: Vec<f64> = (0..12).map(|k| if k % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let mask = tape.constant(Array::new(vec![2, 6], mask_v.clone()).unwrap());
    let ll = model.obs_loglik(&tape, out, x, mask);
    let s = tape.sum(ll, None);
    let g = tape.backward(s).unwrap();
    let g = g.get(out).unwrap();
    for (k, m) in mask_v.iter().enumerate() {
        if *m == 0.0 {
            assert_eq!(g.data()[k], 0.0);
        } else {
            assert_ne!(g.data()[k], 0.0);
        }
    }
}

#[test]
fn duplicated_frames_leave_recon_avg_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 3;
    let model = identity_model(small_config(6, d, 3), &mut rng);
    let short = random_batch(1, 2, &mut rng);
    let mut long = SequenceBatch::empty(1, 4, 1, 2, 3);
    for l in 0..4 {
        let src = short.frame(0, l / 2).to_vec();
        long.data[l * 6..(l + 1) * 6].copy_from_slice(&src);
    }
    let eps = noise(d, &mut rng);
    let (_, a) = loss_value(&model, &short, &[Draw { j: 0, noise: eps.clone() }]);
    let (_, b) = loss_value(&model, &long, &[Draw { j: 0, noise: eps }]);
    // the identity chain decodes the same latent at every step
    assert!((a[0].recon_avg - b[0].recon_avg).abs() < 1e-12, "{} vs {}", a[0].recon_avg, b[0].recon_avg);
}

#[test]
fn elbo_lies_below_the_importance_weighted_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 2;
    let model = Model::new(small_config(6, d, 2), &mut rng).unwrap();
    let data = random_batch(1, 3, &mut rng);
    // E[log w] over (j, noise) draws is the joint ELBO
    let mut total = 0.0;
    let draws = 10_000;
    for j in 0..3 {
        let w = importance_log_weights(&model, &data, 0, j, draws / 2, &mut rng, Precision::F64).unwrap();
        total += w.iter().sum::<f64>();
    }
    let elbo = total / (3 * (draws / 2)) as f64 / 3.0;
    let iwae = -estimate_nll(&model, &data, 0, 1000, NllPolicy::AverageJ, &mut rng, Precision::F64)
        .unwrap()
        .nll;
    assert!(elbo <= iwae, "{elbo} > {iwae}");
}

fn tiny_dataset(seed: u64) -> (SequenceBatch, SequenceBatch) {
    let all = Generator::RotatingBar.generate(24, 4, 8, seed).unwrap();
    (all.subset(0..16), all.subset(16..24))
}

fn tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = small_config(64, 3, 3);
    cfg.prior = PriorKind::Vamp { components: 4 };
    Model::new(cfg, &mut rng).unwrap()
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let (tr, va) = tiny_dataset(1);
    let mut model = tiny_model(2);
    let mut cfg = TrainConfig::new(0, 3);
    cfg.precision = Precision::F64;
    let before = model.params.clone();
    let out = train(&mut model, &tr, &va, &cfg, |_| Ok(())).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(out.best, out.initial);
    assert_eq!(out.last.params, out.initial.params);
    assert_eq!(model.params.values(), before.values());
    let mut restored = tiny_model(99);
    out.last.restore_params(&mut restored.params).unwrap();
    assert_eq!(restored.params.values(), before.values());
}

#[test]
fn training_is_bitwise_deterministic() {
    let (tr, va) = tiny_dataset(4);
    let run = || {
        let mut model = tiny_model(5);
        let mut cfg = TrainConfig::new(4, 6);
        cfg.warmup_epochs = 2;
        cfg.batch_size = 5;
        let mut seen = Vec::new();
        let out = train(&mut model, &tr, &va, &cfg, |ev| {
            let TrainEvent::Epoch { train, val, .. } = ev;
            seen.push((train.csv_row(), val.csv_row()));
            Ok(())
        })
        .unwrap();
        (seen, out.last.to_bytes(), out.best_epoch)
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(a.0.len(), 4);
}

#[test]
fn learning_rate_follows_the_schedule() {
    let cfg = TrainConfig::new(100, 0);
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert_eq!(cfg.lr_at(49), 1e-3);
    assert_eq!(cfg.lr_at(50), 5e-4);
    assert_eq!(cfg.lr_at(75), 2.5e-4);
    assert_eq!(cfg.lr_at(90), 1.25e-4);
    assert_eq!(cfg.lr_at(99), 1.25e-4);
}

#[test]
fn invalid_configs_are_rejected() {
    let (tr, va) = tiny_dataset(7);
    let mut model = tiny_model(8);
    let mut cfg = TrainConfig::new(3, 0);
    cfg.warmup_epochs = 4;
    assert!(train(&mut model, &tr, &va, &cfg, |_| Ok(())).is_err());
    let cfg = TrainConfig::new(3, 0);
    assert!(train(&mut model, &tr, &va.subset(0..0), &cfg, |_| Ok(())).is_err());
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let (tr, va) = tiny_dataset(9);
    let mut model = tiny_model(10);
    let mut cfg = TrainConfig::new(5, 11);
    cfg.warmup_epochs = 1;
    cfg.lr = 3e-3;
    let out = train(&mut model, &tr, &va, &cfg, |_| Ok(())).unwrap();
    let vals: Vec<f64> = out.metrics.iter().skip(1).step_by(2).map(|m| m.loss).collect();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val, min);
    let epoch = out.best_epoch.unwrap();
    assert_eq!(vals[epoch - 1], min);
    assert_eq!(out.best.meta.epoch, epoch as u64);
    let bytes = out.best.to_bytes();
    // parameters are f32-exact after 32-bit training, so they survive the file format
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.params, out.best.params);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn warmup_loss_drops_on_rotating_bar() {
    let all = Generator::RotatingBar.generate(640, 8, 16, 7).unwrap();
    let (tr, va) = (all.subset(0..512), all.subset(512..640));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::new(ModelConfig::new(256, 8, 7), &mut rng).unwrap();
    let cfg = TrainConfig::new(10, 2);
    assert_eq!(cfg.warmup_epochs, 10);
    let out = train(&mut model, &tr, &va, &cfg, |_| Ok(())).unwrap();
    let train_losses: Vec<f64> = out.metrics.iter().step_by(2).map(|m| m.loss).collect();
    let (first, last) = (train_losses[0], *train_losses.last().unwrap());
    assert!(last <= 0.9 * first, "{first} -> {last}");
}
