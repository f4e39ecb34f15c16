use super::array::{Array, Precision};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter array, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative disagreement used throughout the verification code.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Finite-difference formula used for the numerical derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    #[default]
    Central,
    /// Seven-point central formula, error `O(h^6)`. Needed when gradients are
    /// small enough that the two-point truncation error shows up at 1e-6.
    SevenPoint,
}

impl Stencil {
    /// `(k, w)` pairs: the derivative is `sum w * (f(x + kh) - f(x - kh)) / h`.
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central => &[(1.0, 0.5)],
            Stencil::SevenPoint => &[(1.0, 45.0 / 60.0), (2.0, -9.0 / 60.0), (3.0, 1.0 / 60.0)],
        }
    }
}

/// Checks `f` at `point` in 64-bit mode with two-point central differences.
pub fn gradcheck<F>(f: F, point: &[Array], h: f64) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, point, h, Stencil::Central)
}

/// Checks `f` at `point` in 64-bit mode.
///
/// `f` receives one tape variable per array in `point` and must return a
/// scalar. It is evaluated twice at `point` first; any difference between the
/// two values means it draws fresh randomness and is rejected.
pub fn gradcheck_with<F>(f: F, point: &[Array], h: f64, stencil: Stencil) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array]| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.item(out))
    };

    let tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = point.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&tape, &vars)?;
    let first = tape.item(loss);
    let second = eval(point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Array> = point.to_vec();
    for (a, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        for k in 0..point[a].len() {
            let x0 = point[a].data()[k];
            let mut numeric = 0.0;
            // paired differences keep structurally zero gradients exactly zero
            for &(step, weight) in stencil.taps() {
                probe[a].data_mut()[k] = x0 + step * h;
                let up = eval(&probe)?;
                probe[a].data_mut()[k] = x0 - step * h;
                let down = eval(&probe)?;
                numeric += weight * (up - down);
            }
            probe[a].data_mut()[k] = x0;
            numeric /= h;
            let an = analytic.data()[k];
            let err = rel_error(an, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = (a, k);
                report.analytic = an;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
