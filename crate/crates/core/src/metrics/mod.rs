//! Segmentation measures: overlap scores from confusion counts, boundary
//! distances (HD95, ASD) and the per-image Dice histogram.
//!
//! Means are taken over foreground classes; label 0 is background.

pub mod counts;
pub mod histogram;
pub mod report;
pub mod surface;

pub use counts::{confusion, ConfusionCounts, LabelMap};
pub use histogram::{dice_histogram, Histogram};
pub use report::{class_scores, evaluate, image_scores, DatasetPreset, MetricReport, Scores};
pub use surface::{asd, boundary, distance_transform, hd95, Spacing, SurfaceDistances, UNIT_SPACING};
