//! Two evaluators behind one interface: [`Eager`] computes values and lets
//! intermediates drop as soon as they go out of scope (inference), [`Tape`]
//! records every operation for reverse-mode differentiation (training).

use std::borrow::Cow;
use std::rc::Rc;

use super::kernels::{self, AttnLayout, PickLayout};
use super::{Array2, Gradients, ParamId, ParamStore, Real, TensorError};

/// Differentiable operations used by the model.
pub trait Graph<'p> {
    type T;

    fn store(&self) -> &'p ParamStore;
    fn param(&mut self, id: ParamId) -> Self::T;
    fn input(&mut self, value: Array2) -> Self::T;
    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Array2;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// Adds a 1 x c row to every row of `x`.
    fn add_row(&mut self, x: &Self::T, row: &Self::T) -> Self::T;
    fn relu(&mut self, x: &Self::T) -> Self::T;
    fn gather_rows(&mut self, x: &Self::T, index: Rc<[usize]>) -> Self::T;
    fn concat_rows(&mut self, parts: &[&Self::T]) -> Self::T;
    fn concat_cols(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn attention(&mut self, q: &Self::T, k: &Self::T, v: &Self::T, layout: Rc<AttnLayout>) -> Self::T;
    /// Per-group negative log-probability of the target action (G x 1).
    fn pick_nll(&mut self, logits: &Self::T, layout: Rc<PickLayout>) -> Self::T;
    /// `sum_i w_i * x_i` over all entries of `x` (1 x 1).
    fn weighted_sum(&mut self, x: &Self::T, weights: Rc<[Real]>) -> Self::T;
    fn sum(&mut self, x: &Self::T) -> Self::T;
    fn scale(&mut self, x: &Self::T, s: Real) -> Self::T;
}

mod forward {
    use super::*;

    pub fn add(a: &Array2, b: &Array2) -> Array2 {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Array2::from_vec(a.rows(), a.cols(), data)
    }

    pub fn add_row(x: &Array2, row: &Array2) -> Array2 {
        assert_eq!(row.shape(), (1, x.cols()), "bias shape mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
                *o += *b;
            }
        }
        out
    }

    pub fn relu(x: &Array2) -> Array2 {
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        Array2::from_vec(x.rows(), x.cols(), data)
    }

    pub fn gather_rows(x: &Array2, index: &[usize]) -> Array2 {
        let c = x.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(x.row(i));
        }
        Array2::from_vec(index.len(), c, data)
    }

    pub fn concat_rows(parts: &[&Array2]) -> Array2 {
        let c = parts.first().map_or(0, |p| p.cols());
        let rows = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            assert_eq!(p.cols(), c, "concat_rows width mismatch");
            data.extend_from_slice(p.data());
        }
        Array2::from_vec(rows, c, data)
    }

    pub fn concat_cols(a: &Array2, b: &Array2) -> Array2 {
        assert_eq!(a.rows(), b.rows(), "concat_cols height mismatch");
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..a.rows() {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Array2::from_vec(a.rows(), a.cols() + b.cols(), data)
    }

    pub fn weighted_sum(x: &Array2, w: &[Real]) -> Array2 {
        assert_eq!(x.len(), w.len(), "weighted_sum length mismatch");
        Array2::scalar(x.data().iter().zip(w).map(|(a, b)| a * b).sum())
    }

    pub fn scale(x: &Array2, s: Real) -> Array2 {
        let data = x.data().iter().map(|v| v * s).collect();
        Array2::from_vec(x.rows(), x.cols(), data)
    }
}

/// Value-only evaluation. Parameters are borrowed, intermediates are owned.
pub struct Eager<'p> {
    store: &'p ParamStore,
}

impl<'p> Eager<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store }
    }
}

impl<'p> Graph<'p> for Eager<'p> {
    type T = Cow<'p, Array2>;

    fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn param(&mut self, id: ParamId) -> Self::T {
        Cow::Borrowed(self.store.get(id))
    }

    fn input(&mut self, value: Array2) -> Self::T {
        Cow::Owned(value)
    }

    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Array2 {
        t
    }

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        Cow::Owned(kernels::matmul(a, b))
    }

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        Cow::Owned(forward::add(a, b))
    }

    fn add_row(&mut self, x: &Self::T, row: &Self::T) -> Self::T {
        Cow::Owned(forward::add_row(x, row))
    }

    fn relu(&mut self, x: &Self::T) -> Self::T {
        Cow::Owned(forward::relu(x))
    }

    fn gather_rows(&mut self, x: &Self::T, index: Rc<[usize]>) -> Self::T {
        Cow::Owned(forward::gather_rows(x, &index))
    }

    fn concat_rows(&mut self, parts: &[&Self::T]) -> Self::T {
        let parts: Vec<&Array2> = parts.iter().map(|p| &***p).collect();
        Cow::Owned(forward::concat_rows(&parts))
    }

    fn concat_cols(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        Cow::Owned(forward::concat_cols(a, b))
    }

    fn attention(&mut self, q: &Self::T, k: &Self::T, v: &Self::T, layout: Rc<AttnLayout>) -> Self::T {
        let (out, weights) = kernels::attention_forward(q, k, v, &layout);
        drop(weights);
        Cow::Owned(out)
    }

    fn pick_nll(&mut self, logits: &Self::T, layout: Rc<PickLayout>) -> Self::T {
        layout.validate(logits);
        Cow::Owned(kernels::pick_nll_forward(logits, &layout).0)
    }

    fn weighted_sum(&mut self, x: &Self::T, weights: Rc<[Real]>) -> Self::T {
        Cow::Owned(forward::weighted_sum(x, &weights))
    }

    fn sum(&mut self, x: &Self::T) -> Self::T {
        Cow::Owned(Array2::scalar(x.sum()))
    }

    fn scale(&mut self, x: &Self::T, s: Real) -> Self::T {
        Cow::Owned(forward::scale(x, s))
    }
}

/// Index of a recorded value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(ParamId),
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Gather(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, weights: Array2 },
    PickNll { logits: Var, layout: Rc<PickLayout>, probs: Vec<Real> },
    WeightedSum(Var, Rc<[Real]>),
    Sum(Var),
    Scale(Var, Real),
}

struct Node<'p> {
    value: Cow<'p, Array2>,
    op: Op,
}

/// Append-only record of operations for reverse-mode differentiation.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    /// Gradients of the scalar `loss` with respect to every parameter of the store.
    /// Parameters that do not influence the loss receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.val(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape.0, shape.1));
        }
        let mut params = Gradients::zeros_like(self.store);
        let mut grads: Vec<Option<Array2>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::scalar(1.0));

        fn acc(grads: &mut [Option<Array2>], v: Var, g: Array2) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(id) => params.get_mut(*id).add_assign(&g),
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let mut ga = Array2::zeros(av.rows(), av.cols());
                    kernels::matmul_nt_acc(&g, bv, &mut ga);
                    let mut gb = Array2::zeros(bv.rows(), bv.cols());
                    kernels::matmul_tn_acc(av, &g, &mut gb);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(x, row) => {
                    let mut gr = Array2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    let data = g.data().iter().zip(out.data()).map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 }).collect();
                    acc(&mut grads, *x, Array2::from_vec(g.rows(), g.cols(), data));
                }
                Op::Gather(x, index) => {
                    let xv = self.val(*x);
                    let mut gx = Array2::zeros(xv.rows(), xv.cols());
                    for (r, &src) in index.iter().enumerate() {
                        for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut start = 0;
                    for p in parts {
                        let rows = self.val(*p).rows();
                        let data = g.data()[start * c..(start + rows) * c].to_vec();
                        acc(&mut grads, *p, Array2::from_vec(rows, c, data));
                        start += rows;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.val(*a).cols(), self.val(*b).cols());
                    let mut ga = Vec::with_capacity(g.rows() * ca);
                    let mut gb = Vec::with_capacity(g.rows() * cb);
                    for r in 0..g.rows() {
                        ga.extend_from_slice(&g.row(r)[..ca]);
                        gb.extend_from_slice(&g.row(r)[ca..]);
                    }
                    acc(&mut grads, *a, Array2::from_vec(g.rows(), ca, ga));
                    acc(&mut grads, *b, Array2::from_vec(g.rows(), cb, gb));
                }
                Op::Attention { q, k, v, layout, weights } => {
                    let (dq, dk, dv) =
                        kernels::attention_backward(self.val(*q), self.val(*k), self.val(*v), weights, layout, &g);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::PickNll { logits, layout, probs } => {
                    let gl = kernels::pick_nll_backward(self.val(*logits), probs, layout, &g);
                    acc(&mut grads, *logits, gl);
                }
                Op::WeightedSum(x, w) => {
                    let xv = self.val(*x);
                    let s = g.item();
                    let data = w.iter().map(|wi| wi * s).collect();
                    acc(&mut grads, *x, Array2::from_vec(xv.rows(), xv.cols(), data));
                }
                Op::Sum(x) => {
                    let xv = self.val(*x);
                    acc(&mut grads, *x, Array2::filled(xv.rows(), xv.cols(), g.item()));
                }
                Op::Scale(x, s) => {
                    let data = g.data().iter().map(|v| v * s).collect();
                    acc(&mut grads, *x, Array2::from_vec(g.rows(), g.cols(), data));
                }
            }
        }
        Ok(params)
    }
}

impl<'p> Graph<'p> for Tape<'p> {
    type T = Var;

    fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(self.store.get(id)), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    fn input(&mut self, value: Array2) -> Var {
        self.push(value, Op::Input)
    }

    fn value<'a>(&'a self, t: &'a Var) -> &'a Array2 {
        self.val(*t)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::matmul(self.val(*a), self.val(*b));
        self.push(v, Op::MatMul(*a, *b))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = forward::add(self.val(*a), self.val(*b));
        self.push(v, Op::Add(*a, *b))
    }

    fn add_row(&mut self, x: &Var, row: &Var) -> Var {
        let v = forward::add_row(self.val(*x), self.val(*row));
        self.push(v, Op::AddRow(*x, *row))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let v = forward::relu(self.val(*x));
        self.push(v, Op::Relu(*x))
    }

    fn gather_rows(&mut self, x: &Var, index: Rc<[usize]>) -> Var {
        let v = forward::gather_rows(self.val(*x), &index);
        self.push(v, Op::Gather(*x, index))
    }

    fn concat_rows(&mut self, parts: &[&Var]) -> Var {
        let values: Vec<&Array2> = parts.iter().map(|p| self.val(**p)).collect();
        let v = forward::concat_rows(&values);
        self.push(v, Op::ConcatRows(parts.iter().map(|p| **p).collect()))
    }

    fn concat_cols(&mut self, a: &Var, b: &Var) -> Var {
        let v = forward::concat_cols(self.val(*a), self.val(*b));
        self.push(v, Op::ConcatCols(*a, *b))
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, layout: Rc<AttnLayout>) -> Var {
        let (out, weights) = kernels::attention_forward(self.val(*q), self.val(*k), self.val(*v), &layout);
        self.push(out, Op::Attention { q: *q, k: *k, v: *v, layout, weights })
    }

    fn pick_nll(&mut self, logits: &Var, layout: Rc<PickLayout>) -> Var {
        layout.validate(self.val(*logits));
        let (out, probs) = kernels::pick_nll_forward(self.val(*logits), &layout);
        self.push(out, Op::PickNll { logits: *logits, layout, probs })
    }

    fn weighted_sum(&mut self, x: &Var, weights: Rc<[Real]>) -> Var {
        let v = forward::weighted_sum(self.val(*x), &weights);
        self.push(v, Op::WeightedSum(*x, weights))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let v = Array2::scalar(self.val(*x).sum());
        self.push(v, Op::Sum(*x))
    }

    fn scale(&mut self, x: &Var, s: Real) -> Var {
        let v = forward::scale(self.val(*x), s);
        self.push(v, Op::Scale(*x, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: Array2) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", w);
        (s, id)
    }

    #[test]
    fn linear_map_gradient_is_outer_product_of_ones_and_input() {
        let (store, id) = store_with(Array2::from_rows(&[&[0.5, -1.0], &[2.0, 0.25], &[1.0, 1.0]]));
        let mut tape = Tape::new(&store);
        let x = tape.input(Array2::from_rows(&[&[1.0, 2.0, 3.0]]));
        let w = tape.param(id);
        let y = tape.matmul(&x, &w);
        let loss = tape.sum(&y);
        let g = tape.backward(loss).unwrap();
        // d/dW sum(x W) = x^T 1
        let expected = Array2::from_rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        assert_eq!(g.get(id), &expected);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("a", Array2::from_rows(&[&[2.0]]));
        let unused = store.add("b", Array2::from_rows(&[&[3.0, 4.0]]));
        let mut tape = Tape::new(&store);
        let a = tape.param(used);
        let _b = tape.param(unused);
        let l = tape.scale(&a, 3.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(used).item(), 3.0);
        assert_eq!(g.get(unused), &Array2::zeros(1, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (store, id) = store_with(Array2::zeros(2, 2));
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(2, 2))));
    }

    #[test]
    fn eager_and_tape_agree() {
        let (store, id) = store_with(Array2::from_rows(&[&[0.3, -0.7], &[1.1, 0.2]]));
        let x = Array2::from_rows(&[&[1.0, -2.0], &[0.5, 0.5], &[3.0, 1.0]]);
        fn run<'p, G: Graph<'p>>(g: &mut G, id: ParamId, x: Array2) -> Array2 {
            let x = g.input(x);
            let w = g.param(id);
            let h = g.matmul(&x, &w);
            let r = g.relu(&h);
            let c = g.concat_cols(&r, &h);
            let i = g.gather_rows(&c, Rc::from(vec![2, 0, 0]));
            g.value(&i).clone()
        }
        let a = run(&mut Eager::new(&store), id, x.clone());
        let b = run(&mut Tape::new(&store), id, x);
        assert_eq!(a, b);
    }
}
