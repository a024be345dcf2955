use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Smoothing added to numerator and denominator of each soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// One-hot `[H, W, K]` encoding of row-major labels.
pub fn one_hot(labels: &[u8], h: usize, w: usize, k: usize) -> Result<Array> {
    if labels.len() != h * w {
        return Err(Error::shape("one_hot", format!("{} labels for {h}x{w}", labels.len())));
    }
    let mut out = Array::zeros(&[h, w, k]);
    for (p, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::LabelRange {
                label: l as usize,
                num_classes: k,
            });
        }
        out.data_mut()[p * k + l as usize] = 1.0;
    }
    Ok(out)
}

/// `ce_weight · mean pixel cross-entropy + dice_weight · (1 − mean soft Dice
/// over the foreground classes)` for logits `[H, W, K]`.
pub fn segmentation_loss<G: Graph>(
    g: &mut G,
    logits: &G::Value,
    labels: &[u8],
    ce_weight: f64,
    dice_weight: f64,
) -> Result<G::Value> {
    let shape = g.value(logits).shape().to_vec();
    let [h, w, k] = shape[..] else {
        return Err(Error::shape("segmentation_loss", format!("logits {shape:?}")));
    };
    if k < 2 {
        return Err(Error::shape("segmentation_loss", "need at least two classes"));
    }
    let target = one_hot(labels, h, w, k)?;
    let class_totals: Vec<f64> = (0..k)
        .map(|c| target.data().iter().skip(c).step_by(k).sum())
        .collect();
    let target = g.constant(target);

    let logp = g.log_softmax(logits)?;
    let picked = g.mul(&logp, &target)?;
    let total = g.sum(&picked)?;
    let ce = g.scale(&total, -ce_weight / (h * w) as f64)?;

    let probs = g.softmax(logits)?;
    let inter = g.mul(&probs, &target)?;
    let mut dice_sum: Option<G::Value> = None;
    for c in 1..k {
        let i = g.slice_last(&inter, c, 1)?;
        let i = g.sum(&i)?;
        let num = g.scale(&i, 2.0)?;
        let num = g.add_scalar(&num, DICE_SMOOTH)?;
        let p = g.slice_last(&probs, c, 1)?;
        let p = g.sum(&p)?;
        let den = g.add_scalar(&p, class_totals[c] + DICE_SMOOTH)?;
        let d = g.div(&num, &den)?;
        dice_sum = Some(match dice_sum {
            Some(s) => g.add(&s, &d)?,
            None => d,
        });
    }
    let dice_sum = dice_sum.expect("k >= 2");
    let dice_term = g.scale(&dice_sum, -dice_weight / (k - 1) as f64)?;
    let dice_term = g.add_scalar(&dice_term, dice_weight)?;
    g.add(&ce, &dice_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;

    fn eval(logits: Array, labels: &[u8], ce: f64, dice: f64) -> f64 {
        let mut g = Eager;
        let x = g.constant(logits);
        let l = segmentation_loss(&mut g, &x, labels, ce, dice).unwrap();
        g.value(&l).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2, 3, 5] {
            let labels: Vec<u8> = (0..6).map(|i| (i % k) as u8).collect();
            let v = eval(Array::zeros(&[2, 3, k]), &labels, 1.0, 0.0);
            assert!((v - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let labels = [0u8, 1, 2, 1];
        let mut x = Array::zeros(&[2, 2, 3]);
        for (p, &l) in labels.iter().enumerate() {
            x.data_mut()[p * 3 + l as usize] = 40.0;
        }
        assert!(eval(x, &labels, 1.0, 1.0) < 1e-9);
    }

    #[test]
    fn loss_is_non_negative() {
        let x = Array::from_fn(&[3, 3, 3], |i| ((i * 7919) % 13) as f64 - 6.0).unwrap();
        let labels: Vec<u8> = (0..9).map(|i| (i % 3) as u8).collect();
        assert!(eval(x, &labels, 1.0, 1.0) > 0.0);
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let mut g = Eager;
        let x = g.constant(Array::zeros(&[1, 2, 2]));
        assert!(matches!(
            segmentation_loss(&mut g, &x, &[0, 2], 1.0, 1.0),
            Err(Error::LabelRange { label: 2, .. })
        ));
    }
}
