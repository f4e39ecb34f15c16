use longiflow::autodiff::{Array, ParamStore, Precision};
use longiflow::flow::{
    chain_log_prior_arrays, iaf_forward, iaf_inverse, FlowChain, FlowConfig, IafBlock, MadeConfig, MadeNet,
};
use longiflow::verify::{grid_integral_2d, log_abs_det, max_upper_entry, numerical_jacobian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.8378770664093453;

fn random_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2.5..2.5)).collect()
}

#[test]
fn made_heads_are_autoregressive() {
    for (layers, width) in [(2, 16), (3, 128)] {
        for reversed in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(layers as u64 * 31 + width as u64);
            let mut store = ParamStore::new();
            let d = 6;
            let order: Vec<usize> = if reversed { (0..d).rev().collect() } else { (0..d).collect() };
            let cfg = MadeConfig {
                hidden_layers: layers,
                hidden_width: width,
            };
            let net = MadeNet::new(&mut store, "m", d, &order, cfg, &mut rng);
            let pos: Vec<usize> = net.input_degrees().iter().map(|g| g - 1).collect();
            for _ in 0..5 {
                let x = random_point(&mut rng, d);
                for head in 0..2 {
                    let jac = numerical_jacobian(
                        |p| {
                            let (m, s) = net.eval(&store, &Array::row(p.to_vec()), Precision::F64)?;
                            Ok(if head == 0 { m } else { s }.into_data())
                        },
                        &x,
                        1e-5,
                    )
                    .unwrap();
                    let upper = max_upper_entry(&jac, &pos);
                    assert!(upper <= 1e-10, "({layers},{width}) head {head}: {upper}");
                    // some lower entry must actually be active
                    assert!(jac.iter().any(|v| v.abs() > 1e-6));
                }
            }
        }
    }
}

#[test]
fn logdet_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in 1..=8 {
        for trial in 0..4 {
            let mut store = ParamStore::new();
            let block = IafBlock::new(
                &mut store,
                "b",
                d,
                trial % 2 == 1,
                MadeConfig::default(),
                rng.random_range(-1.0..3.0),
                &mut rng,
            );
            let z = random_point(&mut rng, d);
            let (_, ld) = iaf_forward(&block, &store, &Array::row(z.clone()), Precision::F64).unwrap();
            let jac = numerical_jacobian(
                |p| Ok(iaf_forward(&block, &store, &Array::row(p.to_vec()), Precision::F64)?.0.into_data()),
                &z,
                1e-5,
            )
            .unwrap();
            let diff = (ld.item() - log_abs_det(&jac)).abs();
            assert!(diff < 1e-6, "d={d}: {diff}");
        }
    }
}

fn round_trip_max(precision: Precision, pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let cfg = MadeConfig {
        hidden_layers: 2,
        hidden_width: 32,
    };
    for i in 0..pairs {
        let d = 1 + i % 8;
        let mut store = ParamStore::new();
        let block = IafBlock::new(&mut store, "b", d, i % 2 == 0, cfg, 2.0, &mut rng);
        store.round_to(precision);
        let z = Array::row(random_point(&mut rng, d)).rounded(precision);
        let (out, _) = iaf_forward(&block, &store, &z, precision).unwrap();
        let back = iaf_inverse(&block, &store, &out, precision).unwrap();
        worst = worst.max(back.max_abs_diff(&z));
    }
    worst
}

#[test]
fn round_trips_in_both_precisions() {
    let e64 = round_trip_max(Precision::F64, 1000, 1);
    assert!(e64 < 1e-9, "{e64}");
    let e32 = round_trip_max(Precision::F32, 1000, 2);
    assert!(e32 < 1e-5, "{e32}");
}

fn small_chain(seed: u64, d: usize, len: usize) -> (ParamStore, FlowChain) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlowConfig {
        made: MadeConfig {
            hidden_layers: 2,
            hidden_width: 16,
        },
        ..FlowConfig::default()
    };
    let chain = FlowChain::new(&mut store, d, len, cfg, &mut rng);
    (store, chain)
}

#[test]
fn propagation_composes() {
    let (store, chain) = small_chain(5, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (j, k, m) in [(0, 3, 6), (5, 2, 4), (6, 0, 3), (1, 6, 0), (3, 3, 5)] {
        let z = Array::from_fn(&[4, 8], |_| rng.random_range(-2.0..2.0));
        let direct = chain.propagate_arrays(&store, &z, j, m, Precision::F64).unwrap();
        let mid = chain.propagate_arrays(&store, &z, j, k, Precision::F64).unwrap();
        let zk = mid.latent(k).unwrap().clone();
        let two = chain.propagate_arrays(&store, &zk, k, m, Precision::F64).unwrap();
        let diff = direct.latent(m).unwrap().max_abs_diff(two.latent(m).unwrap());
        assert!(diff < 1e-8, "{j}->{k}->{m}: {diff}");
    }
}

#[test]
fn trajectory_is_reproducible_step_by_step() {
    let (store, chain) = small_chain(7, 4, 5);
    let z = Array::matrix(1, 4, vec![0.3, -0.2, 1.1, 0.0]).unwrap();
    let full = chain.propagate_arrays(&store, &z, 3, 0, Precision::F64).unwrap();
    let fwd = chain.propagate_arrays(&store, &full.latents[0], 0, 5, Precision::F64).unwrap();
    for l in 0..=3 {
        assert!(fwd.latents[l].max_abs_diff(&full.latents[l]) < 1e-12);
    }
    for l in 1..=3 {
        let step = chain
            .propagate_arrays(&store, &fwd.latents[l - 1], l - 1, l, Precision::F64)
            .unwrap();
        assert_eq!(step.latents[1], fwd.latents[l]);
    }
}

#[test]
fn pushed_density_integrates_to_one() {
    for len in 1..=4 {
        let (store, chain) = small_chain(20 + len as u64, 2, len);
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
            400,
        )
        .unwrap();
        assert!((mass - 1.0).abs() < 1e-3, "length {len}: {mass}");
    }
}
