//! Resolution-changing layers. Each is a fixed gather followed by linear
//! maps and layer norms, so all of them run on any [`Graph`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::DEFAULT_LN_EPS;
use crate::params::{ParamId, ParamLayout};

fn hwc<G: Graph>(g: &G, x: &G::Value, op: &'static str) -> Result<(usize, usize, usize)> {
    match g.value(x).shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape(op, format!("expected H x W x C, got {s:?}"))),
    }
}

/// Gather indices turning `[h, w, c]` into `[h/f, w/f, f·f·c]`, each output
/// token holding its `f × f` neighbourhood in row-major `(dy, dx, c)` order.
pub fn space_to_depth_index(h: usize, w: usize, c: usize, f: usize) -> Arc<[usize]> {
    let (oh, ow) = (h / f, w / f);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..oh {
        for j in 0..ow {
            for dy in 0..f {
                for dx in 0..f {
                    let base = ((i * f + dy) * w + j * f + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}

/// Gather indices turning `[h, w, f·f·c]` into `[f·h, f·w, c]`; inverse of
/// [`space_to_depth_index`].
pub fn depth_to_space_index(h: usize, w: usize, c: usize, f: usize) -> Arc<[usize]> {
    let cin = f * f * c;
    let mut idx = Vec::with_capacity(h * w * cin);
    for y in 0..h * f {
        for x in 0..w * f {
            let (i, dy, j, dx) = (y / f, y % f, x / f, x % f);
            let base = (i * w + j) * cin + (dy * f + dx) * c;
            idx.extend(base..base + c);
        }
    }
    idx.into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_channels: usize,
    pub proj: (ParamId, ParamId),
    pub norm: (ParamId, ParamId),
}

impl PatchEmbed {
    pub fn register(layout: &mut ParamLayout, prefix: &str, patch: usize, in_channels: usize, dim: usize) -> Self {
        let (w, b) = layout.add_linear(&format!("{prefix}.proj"), patch * patch * in_channels, dim, true);
        let norm = layout.add_norm(&format!("{prefix}.norm"), dim);
        Self {
            patch,
            in_channels,
            proj: (w, b.expect("bias")),
            norm,
        }
    }
}

/// `[H, W, Cin]` → `[H/p, W/p, C]`.
pub fn patch_embed<G: Graph>(g: &mut G, p: &[G::Value], w: &PatchEmbed, image: &G::Value) -> Result<G::Value> {
    let (h, wd, c) = hwc(g, image, "patch_embed")?;
    let f = w.patch;
    if h % f != 0 || wd % f != 0 || c != w.in_channels {
        return Err(Error::shape(
            "patch_embed",
            format!("{h}x{wd}x{c} with patch {f}, {} channels", w.in_channels),
        ));
    }
    let tokens = g.gather(image, &[h / f, wd / f, f * f * c], space_to_depth_index(h, wd, c, f))?;
    let x = g.linear(&tokens, &p[w.proj.0.index()], Some(&p[w.proj.1.index()]))?;
    g.layer_norm(&x, &p[w.norm.0.index()], &p[w.norm.1.index()], DEFAULT_LN_EPS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMerge {
    pub norm: (ParamId, ParamId),
    pub reduction: ParamId,
}

impl PatchMerge {
    pub fn register(layout: &mut ParamLayout, prefix: &str, dim: usize) -> Self {
        let norm = layout.add_norm(&format!("{prefix}.norm"), 4 * dim);
        let (reduction, _) = layout.add_linear(&format!("{prefix}.reduction"), 4 * dim, 2 * dim, false);
        Self { norm, reduction }
    }
}

/// `[H, W, Cs]` → `[H/2, W/2, 2Cs]`.
pub fn patch_merge<G: Graph>(g: &mut G, p: &[G::Value], w: &PatchMerge, x: &G::Value) -> Result<G::Value> {
    let (h, wd, c) = hwc(g, x, "patch_merge")?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::shape("patch_merge", format!("odd extent {h}x{wd}")));
    }
    let grouped = g.gather(x, &[h / 2, wd / 2, 4 * c], space_to_depth_index(h, wd, c, 2))?;
    let n = g.layer_norm(&grouped, &p[w.norm.0.index()], &p[w.norm.1.index()], DEFAULT_LN_EPS)?;
    g.linear(&n, &p[w.reduction.index()], None)
}

/// Linear widening followed by depth-to-space and a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchExpand {
    pub factor: usize,
    pub expand: ParamId,
    pub norm: (ParamId, ParamId),
}

impl PatchExpand {
    /// `[h, w, din]` → `[f·h, f·w, dout]`.
    pub fn register(layout: &mut ParamLayout, prefix: &str, din: usize, dout: usize, factor: usize) -> Self {
        let (expand, _) = layout.add_linear(&format!("{prefix}.expand"), din, factor * factor * dout, false);
        let norm = layout.add_norm(&format!("{prefix}.norm"), dout);
        Self { factor, expand, norm }
    }

    /// The 2× decoder step: `Cs → Cs/2`.
    pub fn upsample2(layout: &mut ParamLayout, prefix: &str, dim: usize) -> Self {
        Self::register(layout, prefix, dim, dim / 2, 2)
    }
}

pub fn patch_expand<G: Graph>(g: &mut G, p: &[G::Value], w: &PatchExpand, x: &G::Value) -> Result<G::Value> {
    let (h, wd, _) = hwc(g, x, "patch_expand")?;
    let wide = g.linear(x, &p[w.expand.index()], None)?;
    let f = w.factor;
    let cw = g.value(&wide).last_dim();
    if cw % (f * f) != 0 {
        return Err(Error::shape("patch_expand", format!("{cw} channels for factor {f}")));
    }
    let c = cw / (f * f);
    let up = g.gather(&wide, &[h * f, wd * f, c], depth_to_space_index(h, wd, c, f))?;
    g.layer_norm(&up, &p[w.norm.0.index()], &p[w.norm.1.index()], DEFAULT_LN_EPS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipFuse {
    pub proj: (ParamId, ParamId),
}

impl SkipFuse {
    pub fn register(layout: &mut ParamLayout, prefix: &str, dim: usize) -> Self {
        let (w, b) = layout.add_linear(&format!("{prefix}.proj"), 2 * dim, dim, true);
        Self {
            proj: (w, b.expect("bias")),
        }
    }
}

/// `concat(decoder, encoder)` along channels, then `2Cs → Cs`.
pub fn skip_fuse<G: Graph>(
    g: &mut G,
    p: &[G::Value],
    w: &SkipFuse,
    decoder: &G::Value,
    encoder: &G::Value,
) -> Result<G::Value> {
    let (ds, es) = (g.value(decoder).shape(), g.value(encoder).shape());
    if ds != es {
        return Err(Error::shape("skip_fuse", format!("{ds:?} vs {es:?}")));
    }
    let cat = g.concat_last(decoder, encoder)?;
    g.linear(&cat, &p[w.proj.0.index()], Some(&p[w.proj.1.index()]))
}
