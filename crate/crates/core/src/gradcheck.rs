//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::array::Array;
use crate::error::Result;
use crate::graph::Graph;
use crate::rng;
use crate::tape::{Tape, Var};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the largest relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central difference half-step.
    pub step: f64,
    /// Use the five-point stencil (error `O(h⁴)`) instead of three-point.
    pub fourth_order: bool,
    /// Number of steps tried per coordinate: `step, step/3, step/9, ...`.
    /// With more than one, the estimate kept is the one that agrees best with
    /// its neighbour on the ladder, which sits between the truncation-bound
    /// and roundoff-bound regimes.
    pub ladder: usize,
    /// Denominator floor in [`relative_error`].
    pub floor: f64,
    /// Coordinates probed per input; `None` checks every coordinate.
    pub samples_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fourth_order: false,
            ladder: 1,
            floor: 1e-6,
            samples_per_input: None,
            seed: 0,
        }
    }
}

/// Compares `∂f/∂inputs` from the tape against central differences of `f`.
///
/// `f` must return a scalar and be a pure function of its inputs.
pub fn check_gradients<F>(inputs: &[Array], f: F, opts: &GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| t.var(a.clone())).collect();
        let out = f(&mut t, &vars)?;
        t.value(&out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut rng = rng::stream(opts.seed, "gradcheck");
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.vec(*var);
        let n = analytic.len();
        let coords: Vec<usize> = match opts.samples_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = probe[which].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                probe[which].data_mut()[i] = orig + offset;
                eval(&probe)
            };
            let mut estimates = Vec::with_capacity(opts.ladder.max(1));
            let mut h = opts.step;
            for _ in 0..opts.ladder.max(1) {
                estimates.push(if opts.fourth_order {
                    (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
                } else {
                    (at(h)? - at(-h)?) / (2.0 * h)
                });
                h /= 3.0;
            }
            let numeric = most_stable(&estimates);
            probe[which].data_mut()[i] = orig;
            report.max_abs_err = report.max_abs_err.max((analytic[i] - numeric).abs());
            let rel = relative_error(analytic[i], numeric, opts.floor);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((which, i, analytic[i], numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// The finer of the two adjacent ladder entries that agree best.
fn most_stable(estimates: &[f64]) -> f64 {
    estimates
        .windows(2)
        .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
        .map_or(estimates[0], |w| w[1])
}

/// Reduces a tensor output to a scalar by a fixed random projection, so that
/// every output coordinate contributes a distinct weight.
pub fn project_to_scalar<G: Graph>(g: &mut G, y: &G::Value, seed: u64) -> Result<G::Value> {
    use rand::Rng;
    let shape = g.value(y).shape().to_vec();
    let mut r = rng::stream(seed, "gradcheck/projection");
    let weights = Array::from_fn(&shape, |_| r.gen_range(-1.0..1.0))?;
    let w = g.constant(weights);
    let prod = g.mul(y, &w)?;
    g.sum(&prod)
}
