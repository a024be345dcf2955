//! Sequential and parallel evaluation of the time-varying diagonal recurrence
//!
//! ```text
//!   h_k = Ā_k ⊙ h_{k-1} + B̄_k x_k        (per channel e, state n)
//!   y_k = Σ_n C_k,n h_k,e,n + D_e x_k,e
//! ```
//!
//! with `Ā_k = exp(Δ_k A)` and `B̄_k` given by the chosen [`Discretization`].
//! The sequential scan is the reference; the parallel scan treats every step
//! as an affine map `h -> a h + b` and composes chunks of them with the
//! associative operator [`Affine::then`].

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Steps per block in [`scan_parallel`] unless the caller overrides it.
pub const DEFAULT_CHUNK: usize = 64;

/// How the per-step input weight is derived from `Δ_k` and `B_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `B̄ = Δ B`.
    #[default]
    Taylor,
    /// `B̄ = (e^{ΔA} - 1) A⁻¹ B`.
    Zoh,
}

/// Per-timestep scan inputs, row-major.
#[derive(Clone, Debug)]
pub struct SelectiveScanInput<T = f64> {
    len: usize,
    channels: usize,
    state: usize,
    /// `len × channels`
    pub x: Vec<T>,
    /// `len × channels`, strictly positive.
    pub delta: Vec<T>,
    /// `len × state`
    pub b: Vec<T>,
    /// `len × state`
    pub c: Vec<T>,
}

impl<T: Float> SelectiveScanInput<T> {
    pub fn new(
        len: usize,
        channels: usize,
        state: usize,
        x: Vec<T>,
        delta: Vec<T>,
        b: Vec<T>,
        c: Vec<T>,
    ) -> Result<Self> {
        let expect = [
            ("x", x.len(), len * channels),
            ("delta", delta.len(), len * channels),
            ("B", b.len(), len * state),
            ("C", c.len(), len * state),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::shape(
                    "SelectiveScanInput",
                    format!("{name} has {got} values, expected {want}"),
                ));
            }
        }
        if delta.iter().any(|d| !(*d > T::zero())) {
            return Err(Error::InvalidArgument("delta must be strictly positive".into()));
        }
        Ok(Self {
            len,
            channels,
            state,
            x,
            delta,
            b,
            c,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_size(&self) -> usize {
        self.state
    }
}

/// Time-invariant parameters of the scan.
#[derive(Clone, Debug)]
pub struct ScanParams<T = f64> {
    /// Continuous diagonal, `channels × state`, strictly negative.
    pub a: Vec<T>,
    /// Skip coefficient per channel.
    pub d: Vec<T>,
}

fn check<T: Float>(inp: &SelectiveScanInput<T>, params: &ScanParams<T>) -> Result<()> {
    if params.a.len() != inp.channels * inp.state || params.d.len() != inp.channels {
        return Err(Error::shape(
            "scan",
            format!(
                "params A={} D={} for {} channels x {} states",
                params.a.len(),
                params.d.len(),
                inp.channels,
                inp.state
            ),
        ));
    }
    Ok(())
}

/// Transition and input weight for step `k`, channel `e`, state `n`.
#[inline]
fn step_coeffs<T: Float>(
    inp: &SelectiveScanInput<T>,
    params: &ScanParams<T>,
    disc: Discretization,
    k: usize,
    e: usize,
    n: usize,
) -> (T, T) {
    let delta = inp.delta[k * inp.channels + e];
    let a = params.a[e * inp.state + n];
    let a_bar = (delta * a).exp();
    let b = inp.b[k * inp.state + n];
    let b_bar = match disc {
        Discretization::Taylor => delta * b,
        Discretization::Zoh => (a_bar - T::one()) / a * b,
    };
    (a_bar, b_bar * inp.x[k * inp.channels + e])
}

/// Advances `h` through steps `range`, writing outputs into `y` (indexed
/// from the start of `range`).
fn run_steps<T: Float>(
    inp: &SelectiveScanInput<T>,
    params: &ScanParams<T>,
    disc: Discretization,
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
) {
    let (ch, st) = (inp.channels, inp.state);
    for (row, k) in range.enumerate() {
        for e in 0..ch {
            let mut acc = T::zero();
            for n in 0..st {
                let (a_bar, bx) = step_coeffs(inp, params, disc, k, e, n);
                let s = &mut h[e * st + n];
                *s = a_bar * *s + bx;
                acc = acc + inp.c[k * st + n] * *s;
            }
            y[row * ch + e] = acc + params.d[e] * inp.x[k * ch + e];
        }
    }
}

/// Left-to-right recurrence from `h_0 = 0`. Returns `len × channels`.
pub fn scan_sequential<T: Float>(
    inp: &SelectiveScanInput<T>,
    params: &ScanParams<T>,
    disc: Discretization,
) -> Result<Vec<T>> {
    check(inp, params)?;
    let mut h = vec![T::zero(); inp.channels * inp.state];
    let mut y = vec![T::zero(); inp.len * inp.channels];
    run_steps(inp, params, disc, 0..inp.len, &mut h, &mut y);
    Ok(y)
}

/// Same as [`scan_sequential`] but also returns the final hidden state.
pub fn scan_sequential_with_state<T: Float>(
    inp: &SelectiveScanInput<T>,
    params: &ScanParams<T>,
    disc: Discretization,
) -> Result<(Vec<T>, Vec<T>)> {
    check(inp, params)?;
    let mut h = vec![T::zero(); inp.channels * inp.state];
    let mut y = vec![T::zero(); inp.len * inp.channels];
    run_steps(inp, params, disc, 0..inp.len, &mut h, &mut y);
    Ok((y, h))
}

/// The affine map `h -> a h + b`, elementwise over a state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T = f64> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Float> Affine<T> {
    pub fn identity(size: usize) -> Self {
        Self {
            a: vec![T::one(); size],
            b: vec![T::zero(); size],
        }
    }

    /// Composition "apply `self`, then `next`":
    /// `(a, b) ⊕ (a', b') = (a'a, a'b + b')`.
    pub fn then(&self, next: &Affine<T>) -> Affine<T> {
        let a = self.a.iter().zip(&next.a).map(|(&a, &a2)| a2 * a).collect();
        let b = self
            .b
            .iter()
            .zip(&next.a)
            .zip(&next.b)
            .map(|((&b, &a2), &b2)| a2 * b + b2)
            .collect();
        Affine { a, b }
    }

    pub fn apply(&self, h: &[T]) -> Vec<T> {
        h.iter()
            .zip(&self.a)
            .zip(&self.b)
            .map(|((&h, &a), &b)| a * h + b)
            .collect()
    }
}

/// Composite affine map of steps `range`.
fn chunk_summary<T: Float>(
    inp: &SelectiveScanInput<T>,
    params: &ScanParams<T>,
    disc: Discretization,
    range: std::ops::Range<usize>,
) -> Affine<T> {
    let (ch, st) = (inp.channels, inp.state);
    let mut acc = Affine::identity(ch * st);
    for k in range {
        for e in 0..ch {
            for n in 0..st {
                let (a_bar, bx) = step_coeffs(inp, params, disc, k, e, n);
                let i = e * st + n;
                acc.a[i] = a_bar * acc.a[i];
                acc.b[i] = a_bar * acc.b[i] + bx;
            }
        }
    }
    acc
}

/// Balanced reduction with a split point fixed by the slice length, so the
/// combination tree never depends on the worker count.
fn reduce_tree<T: Float + Send + Sync>(parts: &[Affine<T>]) -> Affine<T> {
    match parts.len() {
        0 => unreachable!("reduce_tree on empty slice"),
        1 => parts[0].clone(),
        len => {
            let (l, r) = parts.split_at(len / 2);
            let (l, r) = rayon::join(|| reduce_tree(l), || reduce_tree(r));
            l.then(&r)
        }
    }
}

/// Writes into `carries[i]` the state entering chunk `i`, given the state
/// `carry` entering `parts[0]`.
fn distribute_carries<T: Float + Send + Sync>(
    parts: &[Affine<T>],
    carry: Vec<T>,
    carries: &mut [Vec<T>],
) {
    if parts.len() == 1 {
        carries[0] = carry;
        return;
    }
    let mid = parts.len() / 2;
    let (lp, rp) = parts.split_at(mid);
    let (lc, rc) = carries.split_at_mut(mid);
    let right_carry = reduce_tree(lp).apply(&carry);
    rayon::join(
        || distribute_carries(lp, carry, lc),
        || distribute_carries(rp, right_carry, rc),
    );
}

/// Blocked divide-and-conquer evaluation of the recurrence.
///
/// 1. each block of `chunk` steps is summarised as one [`Affine`] map;
/// 2. a fixed balanced tree over the summaries yields every block's entry state;
/// 3. blocks replay their steps from that state to emit outputs.
///
/// Phases 1 and 3 run blocks concurrently. Output is bit-identical for any
/// thread count because block boundaries and the tree shape depend only on
/// `len` and `chunk`.
pub fn scan_parallel<T: Float + Send + Sync>(
    inp: &SelectiveScanInput<T>,
    params: &ScanParams<T>,
    disc: Discretization,
    chunk: usize,
) -> Result<Vec<T>> {
    check(inp, params)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be positive".into()));
    }
    let (len, ch, st) = (inp.len, inp.channels, inp.state);
    let mut y = vec![T::zero(); len * ch];
    if len == 0 || ch == 0 {
        return Ok(y);
    }
    let blocks: Vec<_> = (0..len)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(len))
        .collect();
    let summaries: Vec<Affine<T>> = blocks
        .par_iter()
        .map(|r| chunk_summary(inp, params, disc, r.clone()))
        .collect();
    let mut carries = vec![Vec::new(); blocks.len()];
    distribute_carries(&summaries, vec![T::zero(); ch * st], &mut carries);
    y.par_chunks_mut(chunk * ch)
        .zip(blocks.par_iter())
        .zip(carries.into_par_iter())
        .for_each(|((out, range), mut h)| {
            run_steps(inp, params, disc, range.clone(), &mut h, out);
        });
    Ok(y)
}

/// `max |a - b| / max |b|`, the ∞-norm relative deviation of `a` from the
/// reference `b`. Returns the absolute deviation when `b` is all zeros.
pub fn max_relative_deviation<T: Float>(a: &[T], b: &[T]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs().to_f64().unwrap_or(f64::NAN)));
    let dev = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((*x - *y).abs().to_f64().unwrap_or(f64::NAN)));
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        dev
    } else {
        dev / scale
    }
}
