use super::array::{Array, Precision};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one slot per parameter array.
///
/// Each slot keeps its own step counter: a parameter that receives no
/// gradient in a step (it did not take part in the loss) is left untouched,
/// and its bias correction starts when it first participates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Array]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            steps: vec![0; params.len()],
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        Self::new(config, store.values())
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [Array],
    grads: &[Option<Array>],
    state: &mut AdamState,
    precision: Precision,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() || state.m[i].shape() != params[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("slot {i}: param {:?}, grad {:?}", params[i].shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter slot {i}")));
            }
        }
    }

    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let w = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..w.len() {
            let gk = g.data()[k];
            m[k] = precision.round(beta1 * m[k] + (1.0 - beta1) * gk);
            v[k] = precision.round(beta2 * v[k] + (1.0 - beta2) * gk * gk);
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            w[k] = precision.round(w[k] - lr * mhat / (vhat.sqrt() + eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![Array::row(vec![0.5, -1.5])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..10 {
            let g = vec![Some(Array::row(vec![0.0, 0.0]))];
            adam_step(&mut p, &g, &mut st, Precision::F64).unwrap();
        }
        assert_eq!(p[0].data(), &[0.5, -1.5]);
        assert_eq!(st.steps[0], 10);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // f(w) = w^2 at w = 1: g = 2, m = 0.2, v = 0.004,
        // mhat = 2, vhat = 4, w' = 1 - 0.1 * 2 / (2 + 1e-8).
        let mut p = vec![Array::scalar(1.0)];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        adam_step(&mut p, &[Some(Array::scalar(2.0))], &mut st, Precision::F64).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Array::scalar(1.0)];
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        let mut reached = None;
        for step in 1..=2000 {
            let g = Array::scalar(2.0 * p[0].item());
            adam_step(&mut p, &[Some(g)], &mut st, Precision::F64).unwrap();
            if p[0].item().abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "|w| = {}", p[0].item().abs());
    }

    #[test]
    fn skipped_slot_keeps_state() {
        let mut p = vec![Array::scalar(1.0), Array::scalar(2.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[Some(Array::scalar(1.0)), None], &mut st, Precision::F64).unwrap();
        assert_eq!(st.steps, vec![1, 0]);
        assert_eq!(p[1].item(), 2.0);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = vec![Array::row(vec![1.0, 2.0])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let wrong = [Some(Array::row(vec![1.0]))];
        assert!(matches!(
            adam_step(&mut p, &wrong, &mut st, Precision::F64),
            Err(Error::Shape { .. })
        ));
        let nan = [Some(Array::row(vec![f64::NAN, 0.0]))];
        assert!(matches!(
            adam_step(&mut p, &nan, &mut st, Precision::F64),
            Err(Error::NonFinite(_))
        ));
    }
}
