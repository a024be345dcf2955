use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::counts::{confusion, LabelMap};
use super::surface::{Spacing, SurfaceDistances};

/// The eight measures for one class (or an average of several).
///
/// Distances are `None` when undefined: exactly one of the two surfaces was
/// empty, or nothing defined was averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Scores {
    /// Plain average; distances average only their defined entries.
    pub fn average(items: &[Scores]) -> Option<Scores> {
        if items.is_empty() {
            return None;
        }
        let m = |f: fn(&Scores) -> f64| mean(items.iter().map(f)).expect("nonempty");
        Some(Scores {
            dice: m(|s| s.dice),
            iou: m(|s| s.iou),
            acc: m(|s| s.acc),
            pre: m(|s| s.pre),
            sen: m(|s| s.sen),
            spe: m(|s| s.spe),
            hd95: mean(items.iter().filter_map(|s| s.hd95)),
            asd: mean(items.iter().filter_map(|s| s.asd)),
        })
    }

    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}\n",
            self.dice,
            self.iou,
            self.acc,
            self.pre,
            self.sen,
            self.spe,
            opt(self.hd95),
            opt(self.asd)
        )
    }
}

/// All eight measures for `class`, one-vs-rest.
pub fn class_scores(pred: &LabelMap, gt: &LabelMap, class: usize, num_classes: usize, spacing: Spacing) -> Result<Scores> {
    let c = confusion(pred, gt, class, num_classes)?;
    let (pm, gm) = (pred.mask(class), gt.mask(class));
    let (hd95, asd) = match SurfaceDistances::new(&pm, &gm, pred.height, pred.width, spacing) {
        Ok(s) => (Some(s.hd95()), Some(s.asd())),
        Err(Error::EmptySurface(_)) => {
            if pm.contains(&true) || gm.contains(&true) {
                (None, None)
            } else {
                (Some(0.0), Some(0.0))
            }
        }
        Err(e) => return Err(e),
    };
    Ok(Scores {
        dice: c.dice(),
        iou: c.iou(),
        acc: c.accuracy(),
        pre: c.precision(),
        sen: c.sensitivity(),
        spe: c.specificity(),
        hd95,
        asd,
    })
}

/// Scores for every foreground class (`1..num_classes`) of one image.
pub fn image_scores(pred: &LabelMap, gt: &LabelMap, num_classes: usize, spacing: Spacing) -> Result<Vec<Scores>> {
    (1..num_classes)
        .map(|c| class_scores(pred, gt, c, num_classes, spacing))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_classes: usize,
    pub images: usize,
    /// Names of the foreground classes, in label order.
    pub class_names: Vec<String>,
    /// Per foreground class, averaged over images.
    pub per_class: Vec<Scores>,
    /// Average of `per_class`.
    pub mean_over_classes: Scores,
    /// Average over images of each image's foreground-class mean.
    pub mean_over_images: Scores,
    /// Foreground-class mean Dice of each image, in input order.
    pub per_image_dice: Vec<f64>,
}

/// Evaluates `(prediction, ground truth)` pairs. Images are scored in
/// parallel; results are combined in input order.
pub fn evaluate(pairs: &[(LabelMap, LabelMap)], num_classes: usize, spacing: Spacing) -> Result<MetricReport> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least one foreground class".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let per_image: Vec<Vec<Scores>> = pairs
        .par_iter()
        .map(|(p, g)| image_scores(p, g, num_classes, spacing))
        .collect::<Result<_>>()?;

    let per_class: Vec<Scores> = (0..num_classes - 1)
        .map(|c| {
            let col: Vec<Scores> = per_image.iter().map(|img| img[c].clone()).collect();
            Scores::average(&col).expect("nonempty")
        })
        .collect();
    let image_means: Vec<Scores> = per_image
        .iter()
        .map(|img| Scores::average(img).expect("nonempty"))
        .collect();
    Ok(MetricReport {
        num_classes,
        images: pairs.len(),
        class_names: (1..num_classes).map(|c| format!("class{c}")).collect(),
        mean_over_classes: Scores::average(&per_class).expect("nonempty"),
        mean_over_images: Scores::average(&image_means).expect("nonempty"),
        per_image_dice: image_means.iter().map(|s| s.dice).collect(),
        per_class,
    })
}

pub const CSV_HEADER: &str = "dice,iou,acc,pre,sen,spe,hd95,asd";

impl MetricReport {
    pub fn with_class_names(mut self, names: &[&str]) -> Self {
        if names.len() == self.class_names.len() {
            self.class_names = names.iter().map(|s| s.to_string()).collect();
        }
        self
    }

    /// One row per foreground class in label order, then the mean over
    /// classes, then the mean over images. Undefined distances are blank.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for row in &self.per_class {
            s.push_str(&row.csv_row());
        }
        s.push_str(&self.mean_over_classes.csv_row());
        s.push_str(&self.mean_over_images.csv_row());
        s
    }

    /// Labels of the [`to_csv`](Self::to_csv) rows, in order.
    pub fn csv_row_labels(&self) -> Vec<String> {
        let mut labels = self.class_names.clone();
        labels.push("mean".into());
        labels.push("mean_over_images".into());
        labels
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Class layouts of the two benchmark datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetPreset {
    Acdc,
    Synapse,
}

impl DatasetPreset {
    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "acdc" => Some(Self::Acdc),
            "synapse" => Some(Self::Synapse),
            _ => None,
        }
    }

    /// Including background.
    pub fn num_classes(self) -> usize {
        match self {
            Self::Acdc => 4,
            Self::Synapse => 9,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Self::Acdc => &["rv", "myo", "lv"],
            Self::Synapse => &[
                "aorta",
                "gallbladder",
                "kidney_l",
                "kidney_r",
                "liver",
                "pancreas",
                "spleen",
                "stomach",
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::surface::UNIT_SPACING;

    fn map(h: usize, w: usize, labels: &[u8]) -> LabelMap {
        LabelMap::new(h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_score_perfectly() {
        let a = map(3, 3, &[0, 1, 1, 0, 1, 2, 0, 0, 2]);
        let s = image_scores(&a, &a, 3, UNIT_SPACING).unwrap();
        for c in s {
            assert_eq!((c.dice, c.iou, c.hd95, c.asd), (1.0, 1.0, Some(0.0), Some(0.0)));
        }
    }

    #[test]
    fn distance_conventions_for_empty_classes() {
        let a = map(2, 2, &[0, 0, 0, 1]);
        let b = map(2, 2, &[0, 0, 0, 0]);
        let s = image_scores(&a, &b, 3, UNIT_SPACING).unwrap();
        assert_eq!((s[0].hd95, s[0].dice), (None, 0.0));
        assert_eq!((s[1].hd95, s[1].dice), (Some(0.0), 1.0));
    }

    #[test]
    fn class_and_image_means_are_both_reported() {
        // image 1: class 1 perfect, class 2 absent in prediction only
        let p1 = map(1, 4, &[1, 1, 0, 0]);
        let g1 = map(1, 4, &[1, 1, 0, 2]);
        // image 2: both classes perfect
        let p2 = map(1, 4, &[1, 2, 0, 0]);
        let r = evaluate(&[(p1, g1), (p2.clone(), p2)], 3, UNIT_SPACING).unwrap();
        assert_eq!(r.per_class[1].hd95, Some(0.0));
        assert_eq!(r.per_image_dice, vec![0.5, 1.0]);
        assert_eq!(r.mean_over_images.dice, 0.75);
        assert_eq!(r.mean_over_classes.dice, 0.75);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("0.75,"));
        assert_eq!(r.csv_row_labels()[2], "mean");
    }

    #[test]
    fn presets() {
        assert_eq!(DatasetPreset::parse("ACDC").unwrap().num_classes(), 4);
        assert_eq!(DatasetPreset::Synapse.num_classes(), 9);
        for p in [DatasetPreset::Acdc, DatasetPreset::Synapse] {
            assert_eq!(p.class_names().len(), p.num_classes() - 1);
        }
    }
}
