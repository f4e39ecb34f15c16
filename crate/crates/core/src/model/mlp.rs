use rand::Rng;

use crate::autodiff::{Array, Binding, ParamId, ParamStore, Var};

/// Fully-connected stack with tanh hidden units and a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Parameters are named `{prefix}.l{k}.w`/`.b` for hidden layers and
    /// `{prefix}.out.w`/`.b` for the output layer.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for (k, &width) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
            let name = if k == hidden.len() {
                format!("{prefix}.out")
            } else {
                format!("{prefix}.l{k}")
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array::from_fn(&[fan_in, width], |_| rng.random_range(-bound..bound));
            let w = store.add(format!("{name}.w"), w);
            let b = store.add(format!("{name}.b"), Array::zeros(&[1, width]));
            layers.push((w, b));
            fan_in = width;
        }
        Mlp { layers }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, b: &Binding<'_>, x: Var) -> Var {
        let t = b.tape();
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, bias)) in self.layers.iter().enumerate() {
            let y = t.matmul(h, b.var(w));
            let a = t.add(y, b.var(bias));
            h = if k == last { a } else { t.tanh(a) };
        }
        h
    }
}
