//! Input-dependent (selective) scan: `Δ`, `B` and `C` are projected from the
//! sequence itself, and each step is discretized with `Ā_k = e^{Δ_k A}` and
//! the first-order `B̄_k = Δ_k B_k`.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Init, ParamId, ParamLayout};
use crate::ssm::scan::{scan_sequential, Discretization, ScanParams, SelectiveScanInput};

/// Sampling range for the initial `softplus(dt bias)`.
pub const DT_INIT_RANGE: (f64, f64) = (0.01, 0.1);

struct Dims {
    len: usize,
    channels: usize,
    state: usize,
}

fn scan_dims(x: &Array, delta: &Array, a: &Array, b: &Array, c: &Array, d: &Array) -> Result<Dims> {
    let (len, channels) = match x.shape() {
        &[l, e] => (l, e),
        s => return Err(Error::shape("selective_scan", format!("x must be L x E, got {s:?}"))),
    };
    let state = match a.shape() {
        &[e, n] if e == channels => n,
        s => return Err(Error::shape("selective_scan", format!("A {s:?} for {channels} channels"))),
    };
    let ok = delta.shape() == [len, channels]
        && b.shape() == [len, state]
        && c.shape() == [len, state]
        && d.shape() == [channels];
    if !ok {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "x {:?}, delta {:?}, B {:?}, C {:?}, D {:?}",
                x.shape(),
                delta.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            ),
        ));
    }
    Ok(Dims {
        len,
        channels,
        state,
    })
}

/// Forward kernel: `x, Δ: [L, E]`, `A: [E, N]`, `B, C: [L, N]`, `D: [E]`.
pub fn scan_forward(
    x: &Array,
    delta: &Array,
    a: &Array,
    b: &Array,
    c: &Array,
    d: &Array,
) -> Result<Array> {
    let dims = scan_dims(x, delta, a, b, c, d)?;
    let inp = SelectiveScanInput::new(
        dims.len,
        dims.channels,
        dims.state,
        x.data().to_vec(),
        delta.data().to_vec(),
        b.data().to_vec(),
        c.data().to_vec(),
    )?;
    let params = ScanParams {
        a: a.data().to_vec(),
        d: d.data().to_vec(),
    };
    let y = scan_sequential(&inp, &params, Discretization::Taylor)?;
    Array::checked(vec![dims.len, dims.channels], y, "selective_scan")
}

pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Reverse pass of [`scan_forward`]. Hidden states are recomputed rather
/// than stored by the forward pass.
pub fn scan_backward(
    x: &Array,
    delta: &Array,
    a: &Array,
    b: &Array,
    c: &Array,
    d: &Array,
    gy: &[f64],
) -> ScanGrads {
    let (len, ch, st) = (x.shape()[0], x.shape()[1], a.shape()[1]);
    let (xd, dd, ad, bd, cd, skip) = (x.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let es = ch * st;

    // hs[k] holds h_k for k = 0..=len, with h_0 = 0.
    let mut hs = vec![0.0; (len + 1) * es];
    for k in 0..len {
        let (prev, cur) = hs.split_at_mut((k + 1) * es);
        let prev = &prev[k * es..];
        let cur = &mut cur[..es];
        for e in 0..ch {
            let dl = dd[k * ch + e];
            let xv = xd[k * ch + e];
            for n in 0..st {
                let i = e * st + n;
                cur[i] = (dl * ad[i]).exp() * prev[i] + dl * bd[k * st + n] * xv;
            }
        }
    }

    let mut g = ScanGrads {
        x: vec![0.0; x.len()],
        delta: vec![0.0; delta.len()],
        a: vec![0.0; a.len()],
        b: vec![0.0; b.len()],
        c: vec![0.0; c.len()],
        d: vec![0.0; d.len()],
    };
    // Adjoint flowing into h_k from step k + 1.
    let mut carry = vec![0.0; es];
    for k in (0..len).rev() {
        let h_prev = &hs[k * es..(k + 1) * es];
        let h_cur = &hs[(k + 1) * es..(k + 2) * es];
        for e in 0..ch {
            let gyk = gy[k * ch + e];
            let xv = xd[k * ch + e];
            let dl = dd[k * ch + e];
            g.d[e] += gyk * xv;
            g.x[k * ch + e] += gyk * skip[e];
            for n in 0..st {
                let i = e * st + n;
                let gh = carry[i] + gyk * cd[k * st + n];
                g.c[k * st + n] += gyk * h_cur[i];
                let a_bar = (dl * ad[i]).exp();
                let bv = bd[k * st + n];
                let g_abar = gh * h_prev[i];
                g.delta[k * ch + e] += g_abar * a_bar * ad[i] + gh * bv * xv;
                g.a[i] += g_abar * a_bar * dl;
                g.b[k * st + n] += gh * dl * xv;
                g.x[k * ch + e] += gh * dl * bv;
                carry[i] = gh * a_bar;
            }
        }
    }
    g
}

/// Parameters of one selective-scan direction over `channels` inputs.
///
/// `Δ` is produced through a rank-`dt_rank` bottleneck, as in Mamba:
/// `x -> [dt_low | B | C]`, then `Δ = softplus(dt_low · W_dt + b_dt)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmProjection {
    pub channels: usize,
    pub state: usize,
    pub dt_rank: usize,
    /// `[E, R + 2N]`, no bias.
    pub x_proj: ParamId,
    /// `[R, E]`
    pub dt_weight: ParamId,
    /// `[E]`
    pub dt_bias: ParamId,
    /// `[E, N]`, `A = -exp(a_log)`.
    pub a_log: ParamId,
    /// `[E]`
    pub d: ParamId,
}

impl SsmProjection {
    pub fn register(layout: &mut ParamLayout, prefix: &str, channels: usize, state: usize, dt_rank: usize) -> Self {
        let (x_proj, _) = layout.add_linear(&format!("{prefix}.x_proj"), channels, dt_rank + 2 * state, false);
        let dt_weight = layout.add(
            format!("{prefix}.dt_proj.weight"),
            &[dt_rank, channels],
            Init::Uniform {
                bound: 1.0 / (dt_rank as f64).sqrt(),
            },
        );
        let (lo, hi) = DT_INIT_RANGE;
        let dt_bias = layout.add(
            format!("{prefix}.dt_proj.bias"),
            &[channels],
            Init::DtBias { min: lo, max: hi },
        );
        let a_log = layout.add(format!("{prefix}.a_log"), &[channels, state], Init::ALog);
        let d = layout.add(format!("{prefix}.d"), &[channels], Init::Ones);
        Self {
            channels,
            state,
            dt_rank,
            x_proj,
            dt_weight,
            dt_bias,
            a_log,
            d,
        }
    }
}

/// Default low-rank width for the `Δ` projection: `ceil(model_dim / 16)`.
pub fn default_dt_rank(model_dim: usize) -> usize {
    model_dim.div_ceil(16).max(1)
}

/// Runs the selective scan on `x: [L, E]` with projections `w`, using the
/// bound parameter values `p`.
pub fn selective_scan<G: Graph>(
    g: &mut G,
    p: &[G::Value],
    w: &SsmProjection,
    x: &G::Value,
) -> Result<G::Value> {
    let (r, n) = (w.dt_rank, w.state);
    let proj = g.linear(x, &p[w.x_proj.0], None)?;
    let dt_low = g.slice_last(&proj, 0, r)?;
    let b = g.slice_last(&proj, r, n)?;
    let c = g.slice_last(&proj, r + n, n)?;
    let dt = g.linear(&dt_low, &p[w.dt_weight.0], Some(&p[w.dt_bias.0]))?;
    let delta = g.softplus(&dt)?;
    let a_pos = g.exp(&p[w.a_log.0])?;
    let a = g.scale(&a_pos, -1.0)?;
    g.selective_scan(x, &delta, &a, &b, &c, &p[w.d.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        let x = Array::zeros(&[4, 2]);
        let delta = Array::full(&[4, 2], 0.1).unwrap();
        let a = Array::full(&[2, 3], -1.0).unwrap();
        let b = Array::zeros(&[4, 3]);
        let c = Array::zeros(&[5, 3]);
        let d = Array::zeros(&[2]);
        assert!(scan_forward(&x, &delta, &a, &b, &c, &d).is_err());
        assert!(scan_forward(&x, &delta, &a, &b, &b, &d).is_ok());
    }

    #[test]
    fn dt_rank_default() {
        assert_eq!(default_dt_rank(8), 1);
        assert_eq!(default_dt_rank(96), 6);
        assert_eq!(default_dt_rank(100), 7);
    }
}
