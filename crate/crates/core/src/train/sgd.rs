use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::{ParamLayout, ParamStore};

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Array>,
}

impl SgdState {
    pub fn zeros(weights: &ParamStore) -> Self {
        Self {
            velocity: weights.iter().map(|w| Array::zeros(w.shape())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← m·v + g + wd·w; w ← w − lr·v`. Leaves everything untouched when a
/// gradient is non-finite.
pub fn sgd_step(
    weights: &mut ParamStore,
    grads: &[Array],
    state: &mut SgdState,
    layout: &ParamLayout,
    p: SgdParams,
) -> Result<()> {
    if grads.len() != weights.len() || state.velocity.len() != weights.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} gradients, {} buffers for {} weights", grads.len(), state.velocity.len(), weights.len()),
        ));
    }
    for ((g, w), spec) in grads.iter().zip(weights.iter()).zip(layout.specs()) {
        if g.shape() != w.shape() {
            return Err(Error::shape("sgd_step", format!("{}: {:?} vs {:?}", spec.name, g.shape(), w.shape())));
        }
        if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Training(format!("gradient of {} contains {v}", spec.name)));
        }
    }
    for ((w, g), v) in weights.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = p.momentum * *vi + gi + p.weight_decay * *wi;
            *wi -= p.lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn scalar_model(w0: f64) -> (ParamLayout, ParamStore) {
        let mut layout = ParamLayout::new();
        layout.add("w", &[1], Init::Zeros);
        let store = ParamStore::from_values(&layout, vec![Array::new(vec![1], vec![w0]).unwrap()]).unwrap();
        (layout, store)
    }

    fn g(v: f64) -> Vec<Array> {
        let mut a = Array::zeros(&[1]);
        a.data_mut()[0] = v;
        vec![a]
    }

    #[test]
    fn single_scalar_step() {
        let (layout, mut w) = scalar_model(1.0);
        let mut s = SgdState::zeros(&w);
        let p = SgdParams { lr: 0.01, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut w, &g(1.0), &mut s, &layout, p).unwrap();
        assert_eq!(w.iter().next().unwrap().data()[0], 0.99);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (layout, mut w) = scalar_model(0.3);
        let mut s = SgdState::zeros(&w);
        let p = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut w, &g(0.0), &mut s, &layout, p).unwrap();
        assert_eq!(w.iter().next().unwrap().data()[0], 0.3);
    }

    #[test]
    fn two_momentum_steps_match_hand_unroll() {
        let (layout, mut w) = scalar_model(1.0);
        let mut s = SgdState::zeros(&w);
        let p = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        sgd_step(&mut w, &g(0.5), &mut s, &layout, p).unwrap();
        sgd_step(&mut w, &g(-0.2), &mut s, &layout, p).unwrap();
        let v1 = 0.5 + 0.01 * 1.0;
        let w1 = 1.0 - 0.1 * v1;
        let v2 = 0.9 * v1 - 0.2 + 0.01 * w1;
        let w2 = w1 - 0.1 * v2;
        assert_eq!(w.iter().next().unwrap().data()[0], w2);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let (layout, mut w) = scalar_model(1.0);
        let mut s = SgdState::zeros(&w);
        let p = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let err = sgd_step(&mut w, &g(f64::NAN), &mut s, &layout, p).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(w.iter().next().unwrap().data()[0], 1.0);
        assert_eq!(s.velocity[0].data()[0], 0.0);
    }
}
