use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vss::{GateMode, PostNormPlacement, VssOptions};

/// Number of 2× reductions between the embedding and the bottleneck.
pub const NUM_DOWNSAMPLES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    /// Blocks in encoder stages 1..3 and the bottleneck; decoder stages
    /// mirror the encoder.
    pub depths: [usize; 4],
    pub num_classes: usize,
    pub patch_size: usize,
    pub state_size: usize,
    pub expansion_ratio: usize,
    pub kernel_size: usize,
    pub gate: GateMode,
    pub post_norm: PostNormPlacement,
    pub share_directions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 224,
            input_w: 224,
            in_channels: 1,
            embed_dim: 96,
            depths: [2, 2, 2, 2],
            num_classes: 4,
            patch_size: 4,
            state_size: 16,
            expansion_ratio: 2,
            kernel_size: 3,
            gate: GateMode::Multiply,
            post_norm: PostNormPlacement::AfterSs2d,
            share_directions: false,
        }
    }
}

impl ModelConfig {
    /// Smallest legal configuration.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            embed_dim: 8,
            num_classes,
            state_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return bad("patch_size, in_channels and embed_dim must be positive".into());
        }
        let factor = self.patch_size << NUM_DOWNSAMPLES;
        if self.input_h == 0 || !self.input_h.is_multiple_of(factor) || self.input_w == 0 || !self.input_w.is_multiple_of(factor) {
            return bad(format!(
                "input {}x{} must be a positive multiple of {factor}",
                self.input_h, self.input_w
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        self.vss_options().validate()
    }

    pub fn vss_options(&self) -> VssOptions {
        VssOptions {
            expansion_ratio: self.expansion_ratio,
            kernel_size: self.kernel_size,
            state_size: self.state_size,
            gate: self.gate,
            post_norm: self.post_norm,
            share_directions: self.share_directions,
        }
    }

    /// Channel width of encoder stage `s` (0-based; 3 is the bottleneck).
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Spatial extent `(h, w)` of encoder stage `s`.
    pub fn stage_hw(&self, s: usize) -> (usize, usize) {
        let f = self.patch_size << s;
        (self.input_h / f, self.input_w / f)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fields in weight-file order.
    pub(crate) fn to_words(&self) -> Vec<u32> {
        let mut w = vec![
            self.input_h,
            self.input_w,
            self.in_channels,
            self.embed_dim,
            self.depths[0],
            self.depths[1],
            self.depths[2],
            self.depths[3],
            self.num_classes,
            self.patch_size,
            self.state_size,
            self.expansion_ratio,
            self.kernel_size,
        ];
        w.push(match self.gate {
            GateMode::Multiply => 0,
            GateMode::Add => 1,
        });
        w.push(match self.post_norm {
            PostNormPlacement::AfterSs2d => 0,
            PostNormPlacement::AfterMerge => 1,
        });
        w.push(self.share_directions as usize);
        w.into_iter().map(|v| v as u32).collect()
    }

    pub(crate) const WORDS: usize = 16;

    pub(crate) fn from_words(w: &[u32]) -> Result<Self> {
        if w.len() != Self::WORDS {
            return Err(Error::WeightFile(format!("config block has {} fields", w.len())));
        }
        let u = |i: usize| w[i] as usize;
        let flag = |i: usize, name: &str| match w[i] {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::WeightFile(format!("bad {name} flag {v}"))),
        };
        let cfg = Self {
            input_h: u(0),
            input_w: u(1),
            in_channels: u(2),
            embed_dim: u(3),
            depths: [u(4), u(5), u(6), u(7)],
            num_classes: u(8),
            patch_size: u(9),
            state_size: u(10),
            expansion_ratio: u(11),
            kernel_size: u(12),
            gate: if flag(13, "gate")? { GateMode::Add } else { GateMode::Multiply },
            post_norm: if flag(14, "post_norm")? {
                PostNormPlacement::AfterMerge
            } else {
                PostNormPlacement::AfterSs2d
            },
            share_directions: flag(15, "share_directions")?,
        };
        cfg.validate().map_err(|e| Error::WeightFile(e.to_string()))?;
        Ok(cfg)
    }
}
