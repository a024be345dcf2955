//! Seeded synthetic segmentation data: filled ellipses and rectangles on a
//! noisy background, one intensity level per class.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::metrics::LabelMap;
use crate::model::ModelConfig;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Including background.
    pub num_classes: usize,
    /// Each image holds between 1 and this many shapes.
    pub shapes_per_image: usize,
    pub shape_kind: ShapeKind,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub samples: usize,
    /// Share of all samples held out for testing.
    pub test_fraction: f64,
    /// Share of the remaining samples held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 2,
            shapes_per_image: 1,
            shape_kind: ShapeKind::Ellipse,
            noise: 0.1,
            samples: 200,
            test_fraction: 0.2,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            height: cfg.input_h,
            width: cfg.input_w,
            num_classes: cfg.num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("dataset: {msg}")));
        if self.height < 4 || self.width < 4 {
            return bad("images must be at least 4x4");
        }
        if !(2..=256).contains(&self.num_classes) {
            return bad("num_classes must lie in 2..=256");
        }
        if self.shapes_per_image == 0 {
            return bad("shapes_per_image must be positive");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("split fractions must lie in [0, 1)");
        }
        let (train, val, _) = self.split_sizes();
        if train == 0 || val == 0 {
            return bad("too few samples for non-empty train and validation splits");
        }
        Ok(())
    }

    /// `(train, validation, test)` sizes.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let test = (self.samples as f64 * self.test_fraction).round() as usize;
        let rest = self.samples - test.min(self.samples);
        let val = (rest as f64 * self.val_fraction).round() as usize;
        (rest - val.min(rest), val.min(rest), test.min(self.samples))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    fn intensity(&self, class: u8) -> f64 {
        class as f64 / (self.num_classes - 1) as f64
    }

    fn render(&self, index: usize) -> Sample {
        let (h, w) = (self.height, self.width);
        let mut r = rng::stream(self.seed, &format!("data/sample/{index}"));
        let mut labels = vec![0u8; h * w];
        let side = h.min(w) as f64;
        for _ in 0..r.gen_range(1..=self.shapes_per_image) {
            let class = r.gen_range(1..self.num_classes) as u8;
            let ellipse = match self.shape_kind {
                ShapeKind::Ellipse => true,
                ShapeKind::Rectangle => false,
                ShapeKind::Mixed => r.gen_bool(0.5),
            };
            let ci = r.gen_range(0.3..0.7) * h as f64;
            let cj = r.gen_range(0.3..0.7) * w as f64;
            let a = r.gen_range(0.12..0.3) * side;
            let b = r.gen_range(0.12..0.3) * side;
            let (sin, cos) = r.gen_range(0.0..std::f64::consts::PI).sin_cos();
            for i in 0..h {
                for j in 0..w {
                    let (y, x) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
                    let (u, v) = ((x * cos + y * sin) / a, (y * cos - x * sin) / b);
                    let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                    if inside {
                        labels[i * w + j] = class;
                    }
                }
            }
        }
        let noise = Normal::new(0.0, self.noise).expect("validated noise");
        let data = labels.iter().map(|&l| self.intensity(l) + noise.sample(&mut r)).collect();
        Sample {
            image: Array::new(vec![h, w, 1], data).expect("shape"),
            labels: LabelMap { height: h, width: w, labels },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 1]`.
    pub image: Array,
    pub labels: LabelMap,
}

/// Generated samples plus their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "train" => Some(Self::Train),
            "val" | "validation" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }
}

const CACHE_MAGIC: &[u8; 4] = b"MSYN";
const CACHE_VERSION: u32 = 1;
const CACHE_HEADER: usize = 4 + 4 + 32 + 4 * 8;

impl Dataset {
    pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let samples: Vec<Sample> = (0..spec.samples).into_par_iter().map(|i| spec.render(i)).collect();
        let mut order: Vec<usize> = (0..spec.samples).collect();
        let mut r = rng::stream(spec.seed, "data/split");
        for i in (1..order.len()).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        let (ntrain, nval, _) = spec.split_sizes();
        let mut train = order[..ntrain].to_vec();
        let mut val = order[ntrain..ntrain + nval].to_vec();
        let mut test = order[ntrain + nval..].to_vec();
        for s in [&mut train, &mut val, &mut test] {
            s.sort_unstable();
        }
        Ok(Self {
            spec: spec.clone(),
            samples,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        let idx = match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Flat cache: magic, version, spec digest, counts and dimensions,
    /// split indices, then images (f64 LE) and labels (u8).
    pub fn encode(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&s.digest());
        for v in [
            s.samples,
            s.height,
            s.width,
            1,
            s.num_classes,
            self.train.len(),
            self.val.len(),
            self.test.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
        for sample in &self.samples {
            for v in sample.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for sample in &self.samples {
            out.extend_from_slice(&sample.labels.labels);
        }
        out
    }

    /// Decodes a cache written for exactly `spec`.
    pub fn decode(spec: &SyntheticDatasetSpec, bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::DatasetCache(msg.into());
        if bytes.len() < CACHE_HEADER || &bytes[..4] != CACHE_MAGIC {
            return Err(bad("not a dataset cache"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        if word(4) != CACHE_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        if bytes[8..40] != spec.digest() {
            return Err(bad("written for a different dataset spec"));
        }
        let dims: Vec<usize> = (0..8).map(|k| word(40 + 4 * k)).collect();
        let (n, h, w) = (dims[0], dims[1], dims[2]);
        let (ntrain, nval, ntest) = (dims[5], dims[6], dims[7]);
        if (n, h, w, dims[3], dims[4]) != (spec.samples, spec.height, spec.width, 1, spec.num_classes)
            || ntrain + nval + ntest != n
        {
            return Err(bad("header does not match spec"));
        }
        let pixels = h * w;
        let expected = CACHE_HEADER + 4 * n + 8 * n * pixels + n * pixels;
        if bytes.len() != expected {
            return Err(bad("truncated or oversized"));
        }
        let idx: Vec<usize> = (0..n).map(|k| word(CACHE_HEADER + 4 * k)).collect();
        if idx.iter().any(|&i| i >= n) {
            return Err(bad("split index out of range"));
        }
        let img_at = CACHE_HEADER + 4 * n;
        let lab_at = img_at + 8 * n * pixels;
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let data = bytes[img_at + 8 * k * pixels..img_at + 8 * (k + 1) * pixels]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let labels = LabelMap::new(h, w, bytes[lab_at + k * pixels..lab_at + (k + 1) * pixels].to_vec())?;
            labels.check_classes(spec.num_classes)?;
            samples.push(Sample {
                image: Array::new(vec![h, w, 1], data)?,
                labels,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            samples,
            train: idx[..ntrain].to_vec(),
            val: idx[ntrain..ntrain + nval].to_vec(),
            test: idx[ntrain + nval..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    /// Reads `path` when it holds a cache for `spec`, otherwise generates the
    /// data and (re)writes the cache.
    pub fn load_or_generate(spec: &SyntheticDatasetSpec, path: &Path) -> Result<Self> {
        if let Ok(bytes) = std::fs::read(path) {
            match Self::decode(spec, &bytes) {
                Ok(d) => return Ok(d),
                Err(e) => log::info!("regenerating {}: {e}", path.display()),
            }
        }
        let d = Self::generate(spec)?;
        d.save(path)?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            samples: 30,
            ..SyntheticDatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = Dataset::generate(&small()).unwrap().encode();
        let b = Dataset::generate(&small()).unwrap().encode();
        assert_eq!(a, b);
        let c = Dataset::generate(&SyntheticDatasetSpec { seed: 1, ..small() }).unwrap().encode();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_partition_samples() {
        let d = Dataset::generate(&SyntheticDatasetSpec { samples: 100, ..small() }).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (72, 8, 20));
        let mut all: Vec<usize> = d.train.iter().chain(&d.val).chain(&d.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn every_image_has_foreground() {
        let spec = SyntheticDatasetSpec {
            num_classes: 4,
            shapes_per_image: 3,
            shape_kind: ShapeKind::Mixed,
            ..small()
        };
        let d = Dataset::generate(&spec).unwrap();
        for s in &d.samples {
            assert!(s.labels.labels.iter().any(|&l| l > 0));
            s.labels.check_classes(4).unwrap();
        }
    }

    #[test]
    fn noiseless_intensity_encodes_class() {
        let spec = SyntheticDatasetSpec { noise: 0.0, num_classes: 3, ..small() };
        let d = Dataset::generate(&spec).unwrap();
        for s in &d.samples {
            for (v, &l) in s.image.data().iter().zip(&s.labels.labels) {
                assert_eq!(*v, l as f64 / 2.0);
            }
        }
    }

    #[test]
    fn cache_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let d = Dataset::load_or_generate(&small(), &path).unwrap();
        assert_eq!(Dataset::load_or_generate(&small(), &path).unwrap(), d);
        let bytes = std::fs::read(&path).unwrap();
        assert!(Dataset::decode(&SyntheticDatasetSpec { seed: 5, ..small() }, &bytes).is_err());
        assert!(Dataset::decode(&small(), &bytes[..bytes.len() - 1]).is_err());
    }
}
