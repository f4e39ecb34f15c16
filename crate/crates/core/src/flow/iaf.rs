use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use super::made::{MadeConfig, MadeNet};
use crate::autodiff::{Array, Binding, ParamId, ParamStore, Precision, Tape, Var};
use crate::error::{Error, Result};

/// Gates below this value make the inverse numerically meaningless.
pub const GATE_FLOOR: f64 = 1e-12;

static LOGDET_SIGN_FAULT: AtomicBool = AtomicBool::new(false);

/// Flips the sign of every reported forward log-determinant. Only for
/// checking that the verification battery notices a broken log-det.
#[doc(hidden)]
pub fn inject_logdet_sign_fault(enabled: bool) {
    LOGDET_SIGN_FAULT.store(enabled, Ordering::SeqCst);
}

/// Gated inverse autoregressive transform
/// `z' = g * z + (1 - g) * m`, `g = sigmoid(s + gate_bias)`,
/// with `(m, s)` produced by a MADE over `z` in the block's variable order.
#[derive(Clone, Debug)]
pub struct IafBlock {
    made: MadeNet,
    order: Vec<usize>,
    gate_bias: f64,
}

impl IafBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        reversed: bool,
        made: MadeConfig,
        gate_bias: f64,
        rng: &mut R,
    ) -> Self {
        let order: Vec<usize> = if reversed {
            (0..dim).rev().collect()
        } else {
            (0..dim).collect()
        };
        let made = MadeNet::new(store, &format!("{prefix}.made"), dim, &order, made, rng);
        IafBlock { made, order, gate_bias }
    }

    pub fn dim(&self) -> usize {
        self.made.dim()
    }

    pub fn made(&self) -> &MadeNet {
        &self.made
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn gate_bias(&self) -> f64 {
        self.gate_bias
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.made.param_ids()
    }

    /// Sampling direction, parallel over coordinates. Returns `(z', logdet)`
    /// with `logdet` of shape `[B, 1]`.
    pub fn forward(&self, b: &Binding<'_>, z: Var) -> (Var, Var) {
        let t = b.tape();
        let (m, s) = self.made.forward(b, z);
        let a = t.add_scalar(s, self.gate_bias);
        let g = t.sigmoid(a);
        let na = t.neg(a);
        let one_minus_g = t.sigmoid(na);
        let kept = t.mul(g, z);
        let shifted = t.mul(one_minus_g, m);
        let out = t.add(kept, shifted);
        let log_g = t.log_sigmoid(a);
        let mut logdet = t.sum(log_g, Some(1));
        if LOGDET_SIGN_FAULT.load(Ordering::Relaxed) {
            logdet = t.neg(logdet);
        }
        (out, logdet)
    }

    /// Inverse direction, solved one coordinate at a time in the block's
    /// variable order. Returns `(z, logdet)` where `logdet` is the forward
    /// log-determinant at the recovered `z`.
    pub fn inverse(&self, b: &Binding<'_>, z_out: Var) -> Result<(Var, Var)> {
        let t = b.tape();
        let shape = t.shape(z_out);
        let d = self.dim();
        let mut z = t.constant(Array::zeros(&shape));
        let mut log_g_acc: Option<Var> = None;
        let bound = self.made.bind(b);
        for &coord in &self.order {
            let (m, s) = self.made.forward_bound(t, &bound, z);
            let a = t.add_scalar(s, self.gate_bias);
            let g = t.sigmoid(a);
            let min_gate = t.with_value(g, |gv| {
                (0..gv.rows())
                    .map(|r| gv.row_slice(r)[coord])
                    .fold(f64::INFINITY, f64::min)
            });
            if min_gate < GATE_FLOOR {
                return Err(Error::SingularInversion { gate: min_gate, coord });
            }
            let na = t.neg(a);
            let one_minus_g = t.sigmoid(na);
            let shifted = t.mul(one_minus_g, m);
            let num = t.sub(z_out, shifted);
            let cand = t.div(num, g);
            let unit = t.constant(one_hot(d, coord));
            let picked = t.mul(cand, unit);
            z = t.add(z, picked);
            let log_g = t.log_sigmoid(a);
            let log_g = t.mul(log_g, unit);
            log_g_acc = Some(match log_g_acc {
                Some(acc) => t.add(acc, log_g),
                None => log_g,
            });
        }
        let log_g = log_g_acc.expect("at least one coordinate");
        let mut logdet = t.sum(log_g, Some(1));
        if LOGDET_SIGN_FAULT.load(Ordering::Relaxed) {
            logdet = t.neg(logdet);
        }
        Ok((z, logdet))
    }
}

fn one_hot(d: usize, k: usize) -> Array {
    Array::from_fn(&[1, d], |i| if i == k { 1.0 } else { 0.0 })
}

fn check_batch(block: &IafBlock, z: &Array, op: &'static str) -> Result<()> {
    if z.rank() != 2 || z.cols() != block.dim() {
        return Err(Error::shape(op, format!("expected [B, {}], got {:?}", block.dim(), z.shape())));
    }
    if !z.all_finite() {
        return Err(Error::NonFinite(format!("{op} input")));
    }
    Ok(())
}

/// Forward transform of plain arrays; `logdet` has one entry per row.
pub fn iaf_forward(block: &IafBlock, store: &ParamStore, z: &Array, precision: Precision) -> Result<(Array, Array)> {
    check_batch(block, z, "iaf_forward")?;
    let tape = Tape::new(precision);
    let b = Binding::frozen(&tape, store);
    let zv = tape.constant(z.clone());
    let (out, ld) = block.forward(&b, zv);
    tape.ensure_finite(out, "iaf_forward output")?;
    tape.ensure_finite(ld, "iaf_forward logdet")?;
    Ok((tape.value(out), tape.value(ld)))
}

/// Inverse transform of plain arrays.
pub fn iaf_inverse(block: &IafBlock, store: &ParamStore, z_out: &Array, precision: Precision) -> Result<Array> {
    check_batch(block, z_out, "iaf_inverse")?;
    let tape = Tape::new(precision);
    let b = Binding::frozen(&tape, store);
    let zv = tape.constant(z_out.clone());
    let (z, _) = block.inverse(&b, zv)?;
    tape.ensure_finite(z, "iaf_inverse output")?;
    Ok(tape.value(z))
}
