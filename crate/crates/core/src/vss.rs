//! Visual State Space block.
//!
//! ```text
//!   n   = LN(x)
//!   a   = SS2D(SiLU(DWConv(Linear_a(n))))      (normalized: LN_post(a))
//!   b   = SiLU(Linear_b(n))
//!   out = x + Linear_out(a ⊙ b)
//! ```
//!
//! There is no MLP sub-layer and no positional parameter.

use serde::{Deserialize, Serialize};

use crate::cross_scan::{ss2d, Ss2dParams};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::DEFAULT_LN_EPS;
use crate::params::{Init, ParamId, ParamLayout};
use crate::ssm::selective::default_dt_rank;

/// How the scan pathway and the gate pathway are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Multiply,
    Add,
}

/// Where the second layer norm sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostNormPlacement {
    /// Directly after SS2D, before gating.
    #[default]
    AfterSs2d,
    /// After the two pathways are merged.
    AfterMerge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VssOptions {
    pub expansion_ratio: usize,
    pub kernel_size: usize,
    pub state_size: usize,
    pub gate: GateMode,
    pub post_norm: PostNormPlacement,
    pub share_directions: bool,
}

impl Default for VssOptions {
    fn default() -> Self {
        Self {
            expansion_ratio: 2,
            kernel_size: 3,
            state_size: 16,
            gate: GateMode::Multiply,
            post_norm: PostNormPlacement::AfterSs2d,
            share_directions: false,
        }
    }
}

impl VssOptions {
    pub fn validate(&self) -> Result<()> {
        if self.expansion_ratio < 1 {
            return Err(Error::Config("expansion_ratio must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.state_size < 1 {
            return Err(Error::Config("state size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VssBlockParams {
    pub dim: usize,
    pub expanded: usize,
    pub gate: GateMode,
    pub post_norm_at: PostNormPlacement,
    pub pre_norm: (ParamId, ParamId),
    pub in_proj_a: (ParamId, ParamId),
    pub in_proj_b: (ParamId, ParamId),
    /// `[k, k, E]`
    pub dw_conv: ParamId,
    pub ssm: Ss2dParams,
    pub post_norm: (ParamId, ParamId),
    pub out_proj: (ParamId, ParamId),
}

impl VssBlockParams {
    pub fn register(layout: &mut ParamLayout, prefix: &str, dim: usize, opts: &VssOptions) -> Self {
        let e = dim * opts.expansion_ratio;
        let k = opts.kernel_size;
        let pre_norm = layout.add_norm(&format!("{prefix}.pre_norm"), dim);
        let (wa, ba) = layout.add_linear(&format!("{prefix}.in_proj_a"), dim, e, true);
        let (wb, bb) = layout.add_linear(&format!("{prefix}.in_proj_b"), dim, e, true);
        let dw_conv = layout.add(
            format!("{prefix}.dw_conv.weight"),
            &[k, k, e],
            Init::Uniform {
                bound: 1.0 / k as f64,
            },
        );
        let ssm = Ss2dParams::register(
            layout,
            &format!("{prefix}.ss2d"),
            e,
            opts.state_size,
            default_dt_rank(dim),
            opts.share_directions,
        );
        let post_dim = e;
        let post_norm = layout.add_norm(&format!("{prefix}.post_norm"), post_dim);
        let (wo, bo) = layout.add_linear(&format!("{prefix}.out_proj"), e, dim, true);
        Self {
            dim,
            expanded: e,
            gate: opts.gate,
            post_norm_at: opts.post_norm,
            pre_norm,
            in_proj_a: (wa, ba.expect("bias")),
            in_proj_b: (wb, bb.expect("bias")),
            dw_conv,
            ssm,
            post_norm,
            out_proj: (wo, bo.expect("bias")),
        }
    }
}

/// One VSS block on `[H, W, D]`; returns the same shape.
pub fn vss_forward<G: Graph>(
    g: &mut G,
    p: &[G::Value],
    w: &VssBlockParams,
    x: &G::Value,
) -> Result<G::Value> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != w.dim {
        return Err(Error::shape(
            "vss_forward",
            format!("input {shape:?}, block width {}", w.dim),
        ));
    }
    let pv = |id: ParamId| &p[id.index()];
    let n = g.layer_norm(x, pv(w.pre_norm.0), pv(w.pre_norm.1), DEFAULT_LN_EPS)?;

    let a = g.linear(&n, pv(w.in_proj_a.0), Some(pv(w.in_proj_a.1)))?;
    let a = g.depthwise_conv2d(&a, pv(w.dw_conv))?;
    let a = g.silu(&a)?;
    let mut a = ss2d(g, p, &w.ssm, &a)?;
    if w.post_norm_at == PostNormPlacement::AfterSs2d {
        a = g.layer_norm(&a, pv(w.post_norm.0), pv(w.post_norm.1), DEFAULT_LN_EPS)?;
    }

    let b = g.linear(&n, pv(w.in_proj_b.0), Some(pv(w.in_proj_b.1)))?;
    let b = g.silu(&b)?;

    let mut merged = match w.gate {
        GateMode::Multiply => g.mul(&a, &b)?,
        GateMode::Add => g.add(&a, &b)?,
    };
    if w.post_norm_at == PostNormPlacement::AfterMerge {
        merged = g.layer_norm(&merged, pv(w.post_norm.0), pv(w.post_norm.1), DEFAULT_LN_EPS)?;
    }
    let out = g.linear(&merged, pv(w.out_proj.0), Some(pv(w.out_proj.1)))?;
    g.add(x, &out)
}

/// Analytic parameter count of one block.
pub fn vss_param_count(dim: usize, opts: &VssOptions) -> usize {
    let e = dim * opts.expansion_ratio;
    let (n, k, r) = (opts.state_size, opts.kernel_size, default_dt_rank(dim));
    let directions = if opts.share_directions { 1 } else { 4 };
    let ssm = e * (r + 2 * n) + r * e + e + e * n + e;
    2 * dim + 2 * (dim * e + e) + k * k * e + directions * ssm + 2 * e + e * dim + dim
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registered_count_matches_formula() {
        for (dim, opts) in [
            (8, VssOptions { state_size: 4, ..Default::default() }),
            (96, VssOptions::default()),
            (
                20,
                VssOptions {
                    expansion_ratio: 3,
                    kernel_size: 5,
                    state_size: 2,
                    share_directions: true,
                    ..Default::default()
                },
            ),
        ] {
            let mut l = ParamLayout::new();
            VssBlockParams::register(&mut l, "b", dim, &opts);
            assert_eq!(l.total_numel(), vss_param_count(dim, &opts), "dim={dim}");
        }
    }

    #[test]
    fn options_validation() {
        assert!(VssOptions { kernel_size: 4, ..Default::default() }.validate().is_err());
        assert!(VssOptions { expansion_ratio: 0, ..Default::default() }.validate().is_err());
        assert!(VssOptions::default().validate().is_ok());
    }
}
