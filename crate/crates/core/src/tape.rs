//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Each operation appends one node holding its value and its parents. The
//! backward pass walks the nodes in reverse creation order, which is a valid
//! topological order, so every recorded operation is visited at most once.

use std::sync::Arc;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops;
use crate::ssm::selective;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    DwConv(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Arc<[usize]>),
    Reshape(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Sum(Var),
    SumLeading(Var),
    Scan([Var; 6]),
}

struct Node {
    value: Arc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward evaluation. Single-writer: build a fresh tape per
/// training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    /// Raw adjoint of `v`, or `None` when `v` does not influence the loss.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adjoint of `v` as a vector, zeros when `v` is unreachable.
    pub fn vec(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn array(&self, v: Var) -> Result<Array> {
        Array::new(self.shapes[v.0].clone(), self.vec(v))
    }

    /// Number of operations whose backward rule ran.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a learnable leaf from an owned array.
    pub fn var(&mut self, a: Array) -> Var {
        self.param(&Arc::new(a))
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Propagates `d loss / d v` to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let send = |v: Var, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if self.needs(v) {
                    accumulate(&mut grads[v.0], g);
                }
            };
            match &node.op {
                Op::Param | Op::Constant => {
                    grads[i] = Some(gy);
                    continue;
                }
                &Op::MatMul(a, b) => {
                    let (ga, gb) = ops::matmul_backward(self.val(a), self.val(b), &gy);
                    send(a, ga, &mut grads);
                    send(b, gb, &mut grads);
                }
                &Op::Linear(x, w, b) => {
                    let g = ops::linear_backward(self.val(x), self.val(w), &gy);
                    send(x, g.x, &mut grads);
                    send(w, g.w, &mut grads);
                    if let Some(b) = b {
                        send(b, g.b, &mut grads);
                    }
                }
                &Op::Add(a, b) => {
                    send(a, gy.clone(), &mut grads);
                    send(b, gy, &mut grads);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.val(a).data(), self.val(b).data());
                    send(a, gy.iter().zip(bv).map(|(g, b)| g * b).collect(), &mut grads);
                    send(b, gy.iter().zip(av).map(|(g, a)| g * a).collect(), &mut grads);
                }
                &Op::Div(a, b) => {
                    let (av, bv) = (self.val(a).data(), self.val(b).data());
                    send(a, gy.iter().zip(bv).map(|(g, b)| g / b).collect(), &mut grads);
                    send(
                        b,
                        gy.iter()
                            .zip(av)
                            .zip(bv)
                            .map(|((g, a), b)| -g * a / (b * b))
                            .collect(),
                        &mut grads,
                    );
                }
                &Op::Scale(a, s) => send(a, gy.iter().map(|g| g * s).collect(), &mut grads),
                &Op::AddScalar(a) | &Op::Reshape(a) => send(a, gy, &mut grads),
                &Op::Silu(x) => send(x, ops::silu_backward(self.val(x), &gy), &mut grads),
                &Op::Softplus(x) => send(x, ops::softplus_backward(self.val(x), &gy), &mut grads),
                &Op::Exp(x) => {
                    let y = node.value.data();
                    send(x, gy.iter().zip(y).map(|(g, y)| g * y).collect(), &mut grads);
                }
                &Op::LayerNorm { x, gain, bias, eps } => {
                    let g = ops::layer_norm_backward(self.val(x), self.val(gain), eps, &gy);
                    send(x, g.x, &mut grads);
                    send(gain, g.gain, &mut grads);
                    send(bias, g.bias, &mut grads);
                }
                &Op::DwConv(x, k) => {
                    let (gx, gk) = ops::depthwise_conv2d_backward(self.val(x), self.val(k), &gy);
                    send(x, gx, &mut grads);
                    send(k, gk, &mut grads);
                }
                &Op::Softmax(x) => send(x, ops::softmax_backward(&node.value, &gy), &mut grads),
                &Op::LogSoftmax(x) => {
                    send(x, ops::log_softmax_backward(&node.value, &gy), &mut grads)
                }
                Op::Gather(x, index) => {
                    let g = ops::gather_backward(self.val(*x).len(), index, &gy);
                    send(*x, g, &mut grads);
                }
                &Op::Concat(a, b) => {
                    let (la, lb) = (self.val(a).last_dim(), self.val(b).last_dim());
                    let mut ga = Vec::with_capacity(self.val(a).len());
                    let mut gb = Vec::with_capacity(self.val(b).len());
                    for row in gy.chunks(la + lb) {
                        ga.extend_from_slice(&row[..la]);
                        gb.extend_from_slice(&row[la..]);
                    }
                    send(a, ga, &mut grads);
                    send(b, gb, &mut grads);
                }
                &Op::Slice { x, start } => {
                    let c = self.val(x).last_dim();
                    let len = node.value.last_dim();
                    let mut gx = vec![0.0; self.val(x).len()];
                    for (dst, src) in gx.chunks_mut(c).zip(gy.chunks(len)) {
                        dst[start..start + len].copy_from_slice(src);
                    }
                    send(x, gx, &mut grads);
                }
                &Op::Sum(x) => send(x, vec![gy[0]; self.val(x).len()], &mut grads),
                &Op::SumLeading(x) => {
                    let n = self.val(x).len();
                    send(x, gy.iter().copied().cycle().take(n).collect(), &mut grads);
                }
                &Op::Scan([x, delta, a, b, c, d]) => {
                    let g = selective::scan_backward(
                        self.val(x),
                        self.val(delta),
                        self.val(a),
                        self.val(b),
                        self.val(c),
                        self.val(d),
                        &gy,
                    );
                    send(x, g.x, &mut grads);
                    send(delta, g.delta, &mut grads);
                    send(a, g.a, &mut grads);
                    send(b, g.b, &mut grads);
                    send(c, g.c, &mut grads);
                    send(d, g.d, &mut grads);
                }
            }
            visited += 1;
            // Adjoints of intermediates are not kept once consumed.
            grads[i] = None;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }
}

impl Graph for Tape {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Array {
        self.val(*v)
    }

    fn constant(&mut self, a: Array) -> Var {
        self.nodes.push(Node {
            value: Arc::new(a),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn param(&mut self, a: &Arc<Array>) -> Var {
        self.nodes.push(Node {
            value: Arc::clone(a),
            op: Op::Param,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::MatMul(*a, *b), &[*a, *b]))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = ops::linear(self.val(*x), self.val(*w), b.map(|b| self.val(*b)))?;
        let mut parents = vec![*x, *w];
        parents.extend(b.copied());
        Ok(self.push(y, Op::Linear(*x, *w, b.copied()), &parents))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Add(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::div(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Div(*a, *b), &[*a, *b]))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Result<Var> {
        let y = ops::scale(self.val(*a), s)?;
        Ok(self.push(y, Op::Scale(*a, s), &[*a]))
    }

    fn add_scalar(&mut self, a: &Var, s: f64) -> Result<Var> {
        let y = ops::add_scalar(self.val(*a), s)?;
        Ok(self.push(y, Op::AddScalar(*a), &[*a]))
    }

    fn silu(&mut self, x: &Var) -> Result<Var> {
        let y = ops::silu(self.val(*x))?;
        Ok(self.push(y, Op::Silu(*x), &[*x]))
    }

    fn softplus(&mut self, x: &Var) -> Result<Var> {
        let y = ops::softplus(self.val(*x))?;
        Ok(self.push(y, Op::Softplus(*x), &[*x]))
    }

    fn exp(&mut self, x: &Var) -> Result<Var> {
        let y = ops::exp(self.val(*x))?;
        Ok(self.push(y, Op::Exp(*x), &[*x]))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let y = ops::layer_norm(self.val(*x), self.val(*gain), self.val(*bias), eps)?;
        let op = Op::LayerNorm {
            x: *x,
            gain: *gain,
            bias: *bias,
            eps,
        };
        Ok(self.push(y, op, &[*x, *gain, *bias]))
    }

    fn depthwise_conv2d(&mut self, x: &Var, k: &Var) -> Result<Var> {
        let y = ops::depthwise_conv2d(self.val(*x), self.val(*k))?;
        Ok(self.push(y, Op::DwConv(*x, *k), &[*x, *k]))
    }

    fn softmax(&mut self, x: &Var) -> Result<Var> {
        let y = ops::softmax(self.val(*x))?;
        Ok(self.push(y, Op::Softmax(*x), &[*x]))
    }

    fn log_softmax(&mut self, x: &Var) -> Result<Var> {
        let y = ops::log_softmax(self.val(*x))?;
        Ok(self.push(y, Op::LogSoftmax(*x), &[*x]))
    }

    fn gather(&mut self, x: &Var, shape: &[usize], index: Arc<[usize]>) -> Result<Var> {
        let y = ops::gather(self.val(*x), shape, &index)?;
        Ok(self.push(y, Op::Gather(*x, index), &[*x]))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(*x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(*x), &[*x]))
    }

    fn concat_last(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::concat_last(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Concat(*a, *b), &[*a, *b]))
    }

    fn slice_last(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_last(self.val(*x), start, len)?;
        Ok(self.push(y, Op::Slice { x: *x, start }, &[*x]))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = ops::sum(self.val(*x))?;
        Ok(self.push(y, Op::Sum(*x), &[*x]))
    }

    fn sum_leading(&mut self, x: &Var) -> Result<Var> {
        let y = ops::sum_leading(self.val(*x))?;
        Ok(self.push(y, Op::SumLeading(*x), &[*x]))
    }

    fn selective_scan(
        &mut self,
        x: &Var,
        delta: &Var,
        a: &Var,
        b: &Var,
        c: &Var,
        d: &Var,
    ) -> Result<Var> {
        let y = selective::scan_forward(
            self.val(*x),
            self.val(*delta),
            self.val(*a),
            self.val(*b),
            self.val(*c),
            self.val(*d),
        )?;
        let parents = [*x, *delta, *a, *b, *c, *d];
        Ok(self.push(y, Op::Scan(parents), &parents))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.var(Array::from_fn(&[2, 3], |i| i as f64 - 2.0).unwrap());
        let s = t.sum(&p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.vec(p), vec![1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut t = Tape::new();
        let data = Array::from_fn(&[4], |i| 0.3 * i as f64 - 0.4).unwrap();
        let p = t.var(data.clone());
        let sq = t.mul(&p, &p).unwrap();
        let s = t.sum(&sq).unwrap();
        let l = t.scale(&s, 0.5).unwrap();
        let g = t.backward(l).unwrap();
        for (a, b) in g.vec(p).iter().zip(data.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.var(Array::zeros(&[3]));
        assert!(matches!(t.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_values_get_zero_adjoint() {
        let mut t = Tape::new();
        let p = t.var(Array::full(&[2], 1.0).unwrap());
        let q = t.var(Array::full(&[3], 2.0).unwrap());
        let _unused = t.silu(&q).unwrap();
        let s = t.sum(&p).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.raw(q).is_none());
        assert_eq!(g.vec(q), vec![0.0; 3]);
    }

    #[test]
    fn each_reachable_op_visited_once() {
        let mut t = Tape::new();
        let p = t.var(Array::full(&[3], 0.5).unwrap());
        let a = t.silu(&p).unwrap();
        let b = t.exp(&p).unwrap();
        let c = t.add(&a, &b).unwrap();
        let d = t.mul(&c, &a).unwrap();
        let s = t.sum(&d).unwrap();
        // silu, exp, add, mul, sum
        assert_eq!(t.backward(s).unwrap().visited_ops(), 5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array::full(&[2], 3.0).unwrap());
        let p = t.var(Array::full(&[2], 2.0).unwrap());
        let m = t.mul(&c, &p).unwrap();
        let s = t.sum(&m).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.raw(c).is_none());
        assert_eq!(g.vec(p), vec![3.0, 3.0]);
    }
}
