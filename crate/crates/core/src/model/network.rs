use std::sync::Arc;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::ops;
use crate::params::{ParamId, ParamLayout, ParamStore};
use crate::vss::{vss_forward, vss_param_count, VssBlockParams};

use super::config::{ModelConfig, NUM_DOWNSAMPLES};
use super::layers::{
    patch_embed, patch_expand, patch_merge, skip_fuse, PatchEmbed, PatchExpand, PatchMerge, SkipFuse,
};

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    blocks: Vec<VssBlockParams>,
    merge: PatchMerge,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    expand: PatchExpand,
    fuse: SkipFuse,
    blocks: Vec<VssBlockParams>,
}

/// Shape of one named intermediate, as recorded by [`MambaUnet::forward_traced`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Network structure: configuration plus the parameter layout. Weights live
/// separately in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MambaUnet {
    config: ModelConfig,
    layout: ParamLayout,
    embed: PatchEmbed,
    /// The three down-sampling stages.
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<VssBlockParams>,
    /// Indexed by the encoder stage each one mirrors.
    decoder: Vec<DecoderStage>,
    final_expand: PatchExpand,
    head: (ParamId, ParamId),
}

impl MambaUnet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let opts = config.vss_options();
        let mut l = ParamLayout::new();
        let c = config.embed_dim;
        let embed = PatchEmbed::register(&mut l, "embed", config.patch_size, config.in_channels, c);

        let blocks = |l: &mut ParamLayout, prefix: &str, n: usize, dim: usize| -> Vec<VssBlockParams> {
            (0..n)
                .map(|b| VssBlockParams::register(l, &format!("{prefix}.block{b}"), dim, &opts))
                .collect()
        };

        let mut encoder = Vec::new();
        for s in 0..NUM_DOWNSAMPLES {
            let d = config.stage_dim(s);
            let bl = blocks(&mut l, &format!("encoder{s}"), config.depths[s], d);
            let merge = PatchMerge::register(&mut l, &format!("encoder{s}.merge"), d);
            encoder.push(EncoderStage { blocks: bl, merge });
        }
        let bottleneck = blocks(
            &mut l,
            "bottleneck",
            config.depths[NUM_DOWNSAMPLES],
            config.stage_dim(NUM_DOWNSAMPLES),
        );

        let mut decoder = Vec::new();
        for s in (0..NUM_DOWNSAMPLES).rev() {
            let d = config.stage_dim(s);
            let expand = PatchExpand::upsample2(&mut l, &format!("decoder{s}.expand"), 2 * d);
            let fuse = SkipFuse::register(&mut l, &format!("decoder{s}.fuse"), d);
            let bl = blocks(&mut l, &format!("decoder{s}"), config.depths[s], d);
            decoder.push(DecoderStage { expand, fuse, blocks: bl });
        }
        decoder.reverse();

        let final_expand = PatchExpand::register(&mut l, "final_expand", c, c, config.patch_size);
        let (hw, hb) = l.add_linear("head", c, config.num_classes, true);

        Ok(Self {
            config,
            layout: l,
            embed,
            encoder,
            bottleneck,
            decoder,
            final_expand,
            head: (hw, hb.expect("bias")),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_weights(&self, seed: u64) -> Result<ParamStore> {
        self.layout.initialize(seed)
    }

    /// Image `[H, W, Cin]` → logits `[H, W, num_classes]`.
    pub fn forward<G: Graph>(&self, g: &mut G, p: &[G::Value], image: &G::Value) -> Result<G::Value> {
        self.run(g, p, image, &mut |_, _| {})
    }

    /// Like [`forward`](Self::forward) but also returns every stage's shape.
    pub fn forward_traced<G: Graph>(
        &self,
        g: &mut G,
        p: &[G::Value],
        image: &G::Value,
    ) -> Result<(G::Value, Vec<StageShape>)> {
        let mut trace = Vec::new();
        let out = self.run(g, p, image, &mut |name, shape| {
            trace.push(StageShape {
                name: name.to_string(),
                shape: shape.to_vec(),
            })
        })?;
        Ok((out, trace))
    }

    fn run<G: Graph>(
        &self,
        g: &mut G,
        p: &[G::Value],
        image: &G::Value,
        record: &mut dyn FnMut(&str, &[usize]),
    ) -> Result<G::Value> {
        let cfg = &self.config;
        let expected = [cfg.input_h, cfg.input_w, cfg.in_channels];
        if g.value(image).shape() != expected {
            return Err(Error::shape(
                "forward",
                format!("image {:?}, model expects {expected:?}", g.value(image).shape()),
            ));
        }
        if p.len() != self.layout.len() {
            return Err(Error::shape(
                "forward",
                format!("{} parameters bound, layout has {}", p.len(), self.layout.len()),
            ));
        }

        let mut x = patch_embed(g, p, &self.embed, image)?;
        record("embed", g.value(&x).shape());
        let mut skips = Vec::with_capacity(NUM_DOWNSAMPLES);
        for (s, stage) in self.encoder.iter().enumerate() {
            for b in &stage.blocks {
                x = vss_forward(g, p, b, &x)?;
            }
            record(&format!("encoder{s}"), g.value(&x).shape());
            skips.push(x.clone());
            x = patch_merge(g, p, &stage.merge, &x)?;
        }
        for b in &self.bottleneck {
            x = vss_forward(g, p, b, &x)?;
        }
        record("bottleneck", g.value(&x).shape());
        for s in (0..NUM_DOWNSAMPLES).rev() {
            let stage = &self.decoder[s];
            x = patch_expand(g, p, &stage.expand, &x)?;
            x = skip_fuse(g, p, &stage.fuse, &x, &skips[s])?;
            for b in &stage.blocks {
                x = vss_forward(g, p, b, &x)?;
            }
            record(&format!("decoder{s}"), g.value(&x).shape());
        }
        x = patch_expand(g, p, &self.final_expand, &x)?;
        record("final_expand", g.value(&x).shape());
        let logits = g.linear(&x, &p[self.head.0.index()], Some(&p[self.head.1.index()]))?;
        record("logits", g.value(&logits).shape());
        Ok(logits)
    }

    /// Inference-only forward pass.
    pub fn logits(&self, weights: &ParamStore, image: &Array) -> Result<Array> {
        let mut g = Eager;
        let p = weights.bind(&mut g);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, &x)?;
        Ok(Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    }

    /// Per-pixel posteriors `[H, W, K]`.
    pub fn posteriors(&self, weights: &ParamStore, image: &Array) -> Result<Array> {
        ops::softmax(&self.logits(weights, image)?)
    }

    /// Per-pixel argmax labels, row-major `H·W`.
    pub fn predict(&self, weights: &ParamStore, image: &Array) -> Result<Vec<u8>> {
        Ok(argmax_labels(&self.logits(weights, image)?))
    }
}

/// Argmax over the last axis; ties resolve to the lowest class.
pub fn argmax_labels(logits: &Array) -> Vec<u8> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Parameter count computed directly from the configuration, without
/// building a layout.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let opts = cfg.vss_options();
    let c = cfg.embed_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    let norm = |d: usize| 2 * d;
    let mut total = p2 * cfg.in_channels * c + c + norm(c);
    for s in 0..NUM_DOWNSAMPLES {
        let d = cfg.stage_dim(s);
        total += cfg.depths[s] * vss_param_count(d, &opts);
        total += norm(4 * d) + 4 * d * 2 * d;
        // decoder mirror: expand 2d → 4d, norm d, fuse 2d → d
        total += 2 * d * 4 * d + norm(d) + 2 * d * d + d;
        total += cfg.depths[s] * vss_param_count(d, &opts);
    }
    total += cfg.depths[NUM_DOWNSAMPLES] * vss_param_count(cfg.stage_dim(NUM_DOWNSAMPLES), &opts);
    total += c * p2 * c + norm(c);
    total + c * cfg.num_classes + cfg.num_classes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_analytic_count() {
        for cfg in [
            ModelConfig::tiny(2),
            ModelConfig::default(),
            ModelConfig {
                depths: [1, 0, 3, 1],
                share_directions: true,
                ..ModelConfig::tiny(5)
            },
        ] {
            let m = MambaUnet::new(cfg.clone()).unwrap();
            assert_eq!(m.layout().total_numel(), analytic_param_count(&cfg));
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = MambaUnet::new(ModelConfig::tiny(2)).unwrap();
        let mut names: Vec<_> = m.layout().specs().iter().map(|s| s.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn argmax_prefers_lowest_on_tie() {
        let a = Array::new(vec![2, 3], vec![1.0, 1.0, 0.0, -1.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&a), vec![0, 2]);
    }
}
