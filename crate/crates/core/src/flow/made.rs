use rand::Rng;

use crate::autodiff::{Array, Binding, ParamId, ParamStore, Precision, Tape, Var};
use crate::error::{Error, Result};

/// Hidden-layer layout of a masked autoregressive network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MadeConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for MadeConfig {
    fn default() -> Self {
        MadeConfig {
            hidden_layers: 3,
            hidden_width: 128,
        }
    }
}

#[derive(Clone, Debug)]
struct MaskedLayer {
    weight: ParamId,
    bias: ParamId,
    mask: Array,
}

/// Masked fully-connected network with two autoregressive heads.
///
/// Input coordinate `order[p]` gets degree `p + 1`; hidden units cycle through
/// degrees `1..d-1`. A hidden unit sees inputs of degree `<=` its own, and an
/// output of degree `k` sees hidden units of degree `< k`, so both heads at
/// order position `p` depend only on the inputs at earlier positions.
#[derive(Clone, Debug)]
pub struct MadeNet {
    dim: usize,
    hidden: Vec<MaskedLayer>,
    output: MaskedLayer,
    input_degrees: Vec<usize>,
}

impl MadeNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        order: &[usize],
        config: MadeConfig,
        rng: &mut R,
    ) -> Self {
        assert!(dim > 0, "MADE needs at least one input");
        assert_eq!(order.len(), dim, "order must be a permutation of 0..dim");
        let mut input_degrees = vec![0; dim];
        for (pos, &coord) in order.iter().enumerate() {
            input_degrees[coord] = pos + 1;
        }
        let hidden_degree = |k: usize| if dim > 1 { k % (dim - 1) + 1 } else { 0 };

        let mut hidden = Vec::with_capacity(config.hidden_layers);
        let mut prev: Vec<usize> = input_degrees.clone();
        for layer in 0..config.hidden_layers {
            let degrees: Vec<usize> = (0..config.hidden_width).map(hidden_degree).collect();
            let mask = Array::from_fn(&[prev.len(), degrees.len()], |i| {
                let (r, c) = (i / degrees.len(), i % degrees.len());
                if degrees[c] >= prev[r] {
                    1.0
                } else {
                    0.0
                }
            });
            hidden.push(masked_layer(store, &format!("{prefix}.l{layer}"), mask, rng));
            prev = degrees;
        }
        let out_degrees: Vec<usize> = input_degrees.iter().chain(&input_degrees).copied().collect();
        let mask = Array::from_fn(&[prev.len(), 2 * dim], |i| {
            let (r, c) = (i / (2 * dim), i % (2 * dim));
            if out_degrees[c] > prev[r] {
                1.0
            } else {
                0.0
            }
        });
        let output = masked_layer(store, &format!("{prefix}.out"), mask, rng);
        MadeNet {
            dim,
            hidden,
            output,
            input_degrees,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_degrees(&self) -> &[usize] {
        &self.input_degrees
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Shift head `m` and gate pre-activation head `s` for a `[B, d]` batch.
    pub fn forward(&self, b: &Binding<'_>, x: Var) -> (Var, Var) {
        let bound = self.bind(b);
        self.forward_bound(b.tape(), &bound, x)
    }

    /// Masked weights and biases on the tape, reusable across many forward
    /// passes (the sequential inverse evaluates the network `d` times).
    pub(crate) fn bind(&self, b: &Binding<'_>) -> Vec<(Var, Var)> {
        let t = b.tape();
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .map(|layer| {
                let mask = t.constant(layer.mask.clone());
                (t.mul(b.var(layer.weight), mask), b.var(layer.bias))
            })
            .collect()
    }

    pub(crate) fn forward_bound(&self, t: &Tape, bound: &[(Var, Var)], x: Var) -> (Var, Var) {
        let (last, hidden) = bound.split_last().expect("output layer");
        let mut h = x;
        for &(w, bias) in hidden {
            let y = t.matmul(h, w);
            let a = t.add(y, bias);
            h = t.tanh(a);
        }
        let y = t.matmul(h, last.0);
        let out = t.add(y, last.1);
        let m = t.slice(out, 1, 0, self.dim);
        let s = t.slice(out, 1, self.dim, 2 * self.dim);
        (m, s)
    }

    /// Evaluates both heads on plain arrays.
    pub fn eval(&self, store: &ParamStore, x: &Array, precision: Precision) -> Result<(Array, Array)> {
        if x.rank() != 2 || x.cols() != self.dim {
            return Err(Error::shape(
                "made_eval",
                format!("expected [B, {}], got {:?}", self.dim, x.shape()),
            ));
        }
        let tape = Tape::new(precision);
        let b = Binding::frozen(&tape, store);
        let xv = tape.constant(x.clone());
        let (m, s) = self.forward(&b, xv);
        Ok((tape.value(m), tape.value(s)))
    }
}

fn masked_layer<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, mask: Array, rng: &mut R) -> MaskedLayer {
    let (fan_in, fan_out) = (mask.shape()[0], mask.shape()[1]);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let w = Array::from_fn(&[fan_in, fan_out], |i| mask.data()[i] * rng.random_range(-bound..bound));
    let weight = store.add(format!("{prefix}.w"), w);
    let bias = store.add(format!("{prefix}.b"), Array::zeros(&[1, fan_out]));
    MaskedLayer { weight, bias, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(dim: usize, cfg: MadeConfig, seed: u64) -> (ParamStore, MadeNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order: Vec<usize> = (0..dim).collect();
        let n = MadeNet::new(&mut store, "made", dim, &order, cfg, &mut rng);
        (store, n)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let (mut store, n) = net(4, MadeConfig { hidden_layers: 2, hidden_width: 8 }, 1);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Array::zeros(&shape);
        }
        let x = Array::from_fn(&[3, 4], |i| i as f64 * 0.7 - 2.0);
        let (m, s) = n.eval(&store, &x, Precision::F64).unwrap();
        assert!(m.data().iter().chain(s.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn first_coordinate_is_constant() {
        let (store, n) = net(5, MadeConfig { hidden_layers: 2, hidden_width: 16 }, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_fn(&[100, 5], |_| rng.random_range(-3.0..3.0));
        let (m, s) = n.eval(&store, &x, Precision::F64).unwrap();
        for r in 1..100 {
            assert_eq!(m.row_slice(r)[0], m.row_slice(0)[0]);
            assert_eq!(s.row_slice(r)[0], s.row_slice(0)[0]);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (store, n) = net(3, MadeConfig::default(), 4);
        let x = Array::zeros(&[2, 4]);
        assert!(matches!(n.eval(&store, &x, Precision::F64), Err(Error::Shape { .. })));
    }

    #[test]
    fn degrees_follow_order() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = MadeNet::new(&mut store, "m", 4, &[3, 2, 1, 0], MadeConfig::default(), &mut rng);
        assert_eq!(n.input_degrees(), &[4, 3, 2, 1]);
    }
}
