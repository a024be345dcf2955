//! Continuous-time diagonal SSM and its zero-order-hold discretization.
//!
//! ```text
//!   h'(t) = A h(t) + B x(t)
//!   y(t)  = C h(t) + D x(t)
//! ```
//!
//! `A` is diagonal, so every state evolves independently and the ZOH
//! transition `e^{ΔA}` is an elementwise exponential.

use crate::error::{Error, Result};

/// Single-input single-output SSM with a diagonal evolution matrix.
///
/// A multi-channel model is a collection of these, one per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    /// Diagonal of `A`. Strictly negative.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Output projection (the `C` of the ODE, renamed to avoid clashing with
    /// the channel count).
    pub c_proj: Vec<f64>,
    pub d: f64,
}

impl ContinuousSsm {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c_proj: Vec<f64>, d: f64) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(Error::InvalidArgument("state size must be at least 1".into()));
        }
        if b.len() != n || c_proj.len() != n {
            return Err(Error::shape(
                "ContinuousSsm::new",
                format!("A has {n} states, B {} and C {}", b.len(), c_proj.len()),
            ));
        }
        if let Some(bad) = a.iter().find(|v| !(**v < 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "diagonal of A must be finite and negative, found {bad}"
            )));
        }
        if b.iter().chain(&c_proj).chain([&d]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ContinuousSsm::new"));
        }
        Ok(Self { a, b, c_proj, d })
    }

    /// Builds `A = -exp(log_neg_a)`, the parameterization that keeps `A`
    /// negative under unconstrained updates.
    pub fn from_log_neg_a(log_neg_a: &[f64], b: Vec<f64>, c_proj: Vec<f64>, d: f64) -> Result<Self> {
        let a = log_neg_a.iter().map(|v| -v.exp()).collect();
        Self::new(a, b, c_proj, d)
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    fn output(&self, h: &[f64], x: f64) -> f64 {
        self.c_proj.iter().zip(h).map(|(c, h)| c * h).sum::<f64>() + self.d * x
    }
}

/// Default diagonal for a state of size `n`: `A_i = -(1 + i)`.
pub fn default_a_diagonal(n: usize) -> Vec<f64> {
    (0..n).map(|i| -(1.0 + i as f64)).collect()
}

/// Discrete-time counterpart of a [`ContinuousSsm`] for a fixed step `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    /// Identical to the continuous output projection.
    pub c_bar: Vec<f64>,
    /// The discrete skip term; equal to the continuous `D`.
    pub d: f64,
    pub delta: f64,
}

impl DiscretizedSsm {
    /// One recurrence step: `h <- Ā h + B̄ x`, returning `C̄ h + D x`.
    pub fn step(&self, h: &mut [f64], x: f64) -> f64 {
        for ((h, a), b) in h.iter_mut().zip(&self.a_bar).zip(&self.b_bar) {
            *h = a * *h + b * x;
        }
        self.c_bar.iter().zip(h.iter()).map(|(c, h)| c * h).sum::<f64>() + self.d * x
    }

    /// Runs the recurrence from `h_0 = 0` over a whole input sequence.
    pub fn run(&self, xs: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.a_bar.len()];
        xs.iter().map(|&x| self.step(&mut h, x)).collect()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("timescale must be positive, got {delta}")));
    }
    Ok(())
}

/// Exact zero-order hold: `Ā = e^{ΔA}`, `B̄ = (e^{ΔA} - 1) A⁻¹ B`.
pub fn zoh_discretize(ssm: &ContinuousSsm, delta: f64) -> Result<DiscretizedSsm> {
    check_delta(delta)?;
    if let Some(i) = ssm.a.iter().position(|&a| a == 0.0) {
        return Err(Error::InvalidArgument(format!("A has a zero diagonal entry at {i}")));
    }
    let a_bar: Vec<f64> = ssm.a.iter().map(|a| (delta * a).exp()).collect();
    let b_bar = ssm
        .a
        .iter()
        .zip(&ssm.b)
        .map(|(a, b)| (delta * a).exp_m1() / a * b)
        .collect();
    Ok(DiscretizedSsm {
        a_bar,
        b_bar,
        c_bar: ssm.c_proj.clone(),
        d: ssm.d,
        delta,
    })
}

/// First-order Taylor form of the input weight, `B̄ ≈ ΔB`.
pub fn taylor_discretize_b(delta: f64, b: &[f64]) -> Vec<f64> {
    b.iter().map(|b| delta * b).collect()
}

/// Output of [`simulate_ode`]: samples at `t = dt·k`, `k = 0..=steps`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub outputs: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Integrates the continuous ODE with classical RK4 from `h(0) = 0`.
///
/// The input is sampled at the start of each step and held constant across
/// it, so a piecewise-constant signal aligned to `dt` is integrated without
/// discontinuity error. `outputs[k]` uses the held input of step `k`
/// (the final sample reuses the last held value).
pub fn simulate_ode(
    ssm: &ContinuousSsm,
    input: impl Fn(f64) -> f64,
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let n = ssm.state_size();
    let mut h = vec![0.0; n];
    let mut times = Vec::with_capacity(steps + 1);
    let mut outputs = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = input(0.0);
    times.push(0.0);
    outputs.push(ssm.output(&h, x));
    states.push(h.clone());
    for k in 0..steps {
        let t = k as f64 * dt;
        x = input(t);
        // Diagonal A: each state is an independent scalar ODE.
        for i in 0..n {
            let (a, bx) = (ssm.a[i], ssm.b[i] * x);
            let f = |h: f64| a * h + bx;
            let k1 = f(h[i]);
            let k2 = f(h[i] + 0.5 * dt * k1);
            let k3 = f(h[i] + 0.5 * dt * k2);
            let k4 = f(h[i] + dt * k3);
            h[i] += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        times.push((k + 1) as f64 * dt);
        outputs.push(ssm.output(&h, x));
        states.push(h.clone());
    }
    Ok(Trajectory {
        times,
        outputs,
        states,
    })
}
