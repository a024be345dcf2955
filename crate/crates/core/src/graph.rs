//! The evaluation interface shared by the model code.
//!
//! Forward passes are written once against [`Graph`]. Running them on a
//! [`Tape`](crate::tape::Tape) records every operation for reverse-mode
//! differentiation; running them on [`Eager`] computes values only and drops
//! intermediates as soon as they go out of scope.

use std::sync::Arc;

use crate::array::Array;
use crate::error::Result;
use crate::ops;
use crate::ssm::selective;

/// The closed set of operations the artifact differentiates through.
pub trait Graph {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Array;

    /// A non-differentiable input.
    fn constant(&mut self, a: Array) -> Self::Value;

    /// A learnable leaf. Shared so that binding weights never copies them.
    fn param(&mut self, a: &Arc<Array>) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn linear(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
    ) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, s: f64) -> Result<Self::Value>;
    fn add_scalar(&mut self, a: &Self::Value, s: f64) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn softplus(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn exp(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    fn depthwise_conv2d(&mut self, x: &Self::Value, k: &Self::Value) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn log_softmax(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn gather(
        &mut self,
        x: &Self::Value,
        shape: &[usize],
        index: Arc<[usize]>,
    ) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn concat_last(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn slice_last(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sum_leading(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// Fused time-varying diagonal scan; see [`selective::scan_forward`].
    #[allow(clippy::too_many_arguments)]
    fn selective_scan(
        &mut self,
        x: &Self::Value,
        delta: &Self::Value,
        a: &Self::Value,
        b: &Self::Value,
        c: &Self::Value,
        d: &Self::Value,
    ) -> Result<Self::Value>;
}

/// Value-only evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

type V = Arc<Array>;

impl Graph for Eager {
    type Value = V;

    fn value<'a>(&'a self, v: &'a V) -> &'a Array {
        v
    }

    fn constant(&mut self, a: Array) -> V {
        Arc::new(a)
    }

    fn param(&mut self, a: &Arc<Array>) -> V {
        Arc::clone(a)
    }

    fn matmul(&mut self, a: &V, b: &V) -> Result<V> {
        ops::matmul(a, b).map(Arc::new)
    }

    fn linear(&mut self, x: &V, w: &V, b: Option<&V>) -> Result<V> {
        ops::linear(x, w, b.map(|b| &**b)).map(Arc::new)
    }

    fn add(&mut self, a: &V, b: &V) -> Result<V> {
        ops::add(a, b).map(Arc::new)
    }

    fn mul(&mut self, a: &V, b: &V) -> Result<V> {
        ops::mul(a, b).map(Arc::new)
    }

    fn div(&mut self, a: &V, b: &V) -> Result<V> {
        ops::div(a, b).map(Arc::new)
    }

    fn scale(&mut self, a: &V, s: f64) -> Result<V> {
        ops::scale(a, s).map(Arc::new)
    }

    fn add_scalar(&mut self, a: &V, s: f64) -> Result<V> {
        ops::add_scalar(a, s).map(Arc::new)
    }

    fn silu(&mut self, x: &V) -> Result<V> {
        ops::silu(x).map(Arc::new)
    }

    fn softplus(&mut self, x: &V) -> Result<V> {
        ops::softplus(x).map(Arc::new)
    }

    fn exp(&mut self, x: &V) -> Result<V> {
        ops::exp(x).map(Arc::new)
    }

    fn layer_norm(&mut self, x: &V, gain: &V, bias: &V, eps: f64) -> Result<V> {
        ops::layer_norm(x, gain, bias, eps).map(Arc::new)
    }

    fn depthwise_conv2d(&mut self, x: &V, k: &V) -> Result<V> {
        ops::depthwise_conv2d(x, k).map(Arc::new)
    }

    fn softmax(&mut self, x: &V) -> Result<V> {
        ops::softmax(x).map(Arc::new)
    }

    fn log_softmax(&mut self, x: &V) -> Result<V> {
        ops::log_softmax(x).map(Arc::new)
    }

    fn gather(&mut self, x: &V, shape: &[usize], index: Arc<[usize]>) -> Result<V> {
        ops::gather(x, shape, &index).map(Arc::new)
    }

    fn reshape(&mut self, x: &V, shape: &[usize]) -> Result<V> {
        x.reshape(shape).map(Arc::new)
    }

    fn concat_last(&mut self, a: &V, b: &V) -> Result<V> {
        ops::concat_last(a, b).map(Arc::new)
    }

    fn slice_last(&mut self, x: &V, start: usize, len: usize) -> Result<V> {
        ops::slice_last(x, start, len).map(Arc::new)
    }

    fn sum(&mut self, x: &V) -> Result<V> {
        ops::sum(x).map(Arc::new)
    }

    fn sum_leading(&mut self, x: &V) -> Result<V> {
        ops::sum_leading(x).map(Arc::new)
    }

    fn selective_scan(&mut self, x: &V, delta: &V, a: &V, b: &V, c: &V, d: &V) -> Result<V> {
        selective::scan_forward(x, delta, a, b, c, d).map(Arc::new)
    }
}
