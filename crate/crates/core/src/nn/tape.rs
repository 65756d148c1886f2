//! Reverse-mode differentiation over small dense vectors.
//!
//! A [`Tape`] borrows a [`ParamStore`], records vector-valued nodes as the
//! forward computation runs, and [`Tape::backward`] propagates adjoints from a
//! scalar node back into per-array parameter gradients. Scalars are length-1
//! vectors. Only the ops the policy/flow networks and the losses need exist.

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Gather { table: ParamId, row: usize },
    Concat(Vec<NodeId>),
    Linear { w: ParamId, b: ParamId, x: NodeId },
    Relu(NodeId),
    LogSoftmax { x: NodeId, mask: Option<Vec<bool>> },
    Pick { x: NodeId, index: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, S),
    Offset(NodeId),
    Square(NodeId),
    Sum(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Vec<S>,
    op: Op<S>,
}

pub struct Tape<'a, S> {
    store: &'a ParamStore<S>,
    nodes: Vec<Node<S>>,
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> S {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<S>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: S) -> NodeId {
        self.push(vec![value], Op::Constant)
    }

    /// Row `row` of a 2-D parameter table.
    pub fn gather(&mut self, table: ParamId, row: usize) -> NodeId {
        let value = self.store.get(table).row(row).to_vec();
        self.push(value, Op::Gather { table, row })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let value = parts.iter().flat_map(|p| self.nodes[p.0].value.iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// `w x + b` with `w` stored row-major as `[out, in]`.
    pub fn linear(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let (wa, ba) = (self.store.get(w), self.store.get(b));
        let mut out = vec![S::zero(); ba.len()];
        linear_forward(&wa.values, &ba.values, &self.nodes[x.0].value, &mut out);
        self.push(out, Op::Linear { w, b, x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|&v| v.max(S::zero())).collect();
        self.push(value, Op::Relu(x))
    }

    /// Log-softmax; entries with `mask[i] == false` get `-inf` and no gradient.
    pub fn log_softmax(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let value = log_softmax(&self.nodes[x.0].value, mask.as_deref());
        self.push(value, Op::LogSoftmax { x, mask })
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        let value = vec![self.nodes[x.0].value[index]];
        self.push(value, Op::Pick { x, index })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&v| v * c).collect();
        self.push(value, Op::Scale(a, c))
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: NodeId, c: S) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&v| v + c).collect();
        self.push(value, Op::Offset(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&v| v * v).collect();
        self.push(value, Op::Square(a))
    }

    /// Elementwise sum of equally sized nodes. An empty list gives a scalar zero.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = match parts.first() {
            Some(p) => vec![S::zero(); self.nodes[p.0].value.len()],
            None => vec![S::zero()],
        };
        for p in parts {
            for (acc, &v) in value.iter_mut().zip(&self.nodes[p.0].value) {
                *acc += v;
            }
        }
        self.push(value, Op::Sum(parts.to_vec()))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(S, S) -> S) -> Vec<S> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "elementwise op on mismatched lengths");
        va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
    }

    /// Gradients of the scalar `loss` with respect to every parameter array.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads = self.store.zero_gradients();
        let mut adj: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Gather { table, row } => {
                    let cols = g.len();
                    let slot = grads.slot(*table);
                    for (acc, &v) in slot[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        accumulate(&mut adj, *p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Linear { w, b, x } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.store.get(*w).values;
                    let mut dx = vec![S::zero(); xv.len()];
                    for (o, &go) in g.iter().enumerate() {
                        if go != S::zero() {
                            axpy(go, &wv[o * xv.len()..(o + 1) * xv.len()], &mut dx);
                        }
                    }
                    {
                        let dw = grads.slot(*w);
                        for (o, &go) in g.iter().enumerate() {
                            if go != S::zero() {
                                axpy(go, xv, &mut dw[o * xv.len()..(o + 1) * xv.len()]);
                            }
                        }
                    }
                    let db = grads.slot(*b);
                    for (acc, &v) in db.iter_mut().zip(&g) {
                        *acc += v;
                    }
                    accumulate(&mut adj, *x, &dx);
                }
                Op::Relu(x) => {
                    let out = &self.nodes[i].value;
                    let dx: Vec<S> =
                        g.iter().zip(out).map(|(&gv, &o)| if o > S::zero() { gv } else { S::zero() }).collect();
                    accumulate(&mut adj, *x, &dx);
                }
                Op::LogSoftmax { x, mask } => {
                    let out = &self.nodes[i].value;
                    let live = |k: usize| mask.as_ref().is_none_or(|m| m[k]);
                    let total: S = (0..g.len()).filter(|&k| live(k)).map(|k| g[k]).sum();
                    let dx: Vec<S> = (0..g.len())
                        .map(|k| if live(k) { g[k] - out[k].exp() * total } else { S::zero() })
                        .collect();
                    accumulate(&mut adj, *x, &dx);
                }
                Op::Pick { x, index } => {
                    let mut dx = vec![S::zero(); self.nodes[x.0].value.len()];
                    dx[*index] = g[0];
                    accumulate(&mut adj, *x, &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    accumulate(&mut adj, *b, &neg);
                }
                Op::Scale(a, c) => {
                    let d: Vec<S> = g.iter().map(|&v| v * *c).collect();
                    accumulate(&mut adj, *a, &d);
                }
                Op::Offset(a) => accumulate(&mut adj, *a, &g),
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value;
                    let d: Vec<S> = g.iter().zip(av).map(|(&gv, &x)| gv * (x + x)).collect();
                    accumulate(&mut adj, *a, &d);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut adj, *p, &g);
                    }
                }
            }
        }
        grads.check_finite(self.store)?;
        Ok(grads)
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Vec<S>>], id: NodeId, g: &[S]) {
    match &mut adj[id.0] {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = S::zero();
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn linear_forward<S: Scalar>(w: &[S], b: &[S], x: &[S], out: &mut [S]) {
    debug_assert_eq!(w.len(), b.len() * x.len());
    for (o, row) in w.chunks_exact(x.len()).enumerate() {
        out[o] = b[o] + dot(row, x);
    }
}

pub(crate) fn log_softmax<S: Scalar>(x: &[S], mask: Option<&[bool]>) -> Vec<S> {
    let live = |k: usize| mask.is_none_or(|m| m[k]);
    let max = (0..x.len()).filter(|&k| live(k)).map(|k| x[k]).fold(S::neg_infinity(), S::max);
    let total: S = (0..x.len()).filter(|&k| live(k)).map(|k| (x[k] - max).exp()).sum();
    let lz = max + total.ln();
    (0..x.len()).map(|k| if live(k) { x[k] - lz } else { S::neg_infinity() }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;

    #[test]
    fn quadratic_gradient_is_twice_theta() {
        let mut store = ParamStore::<f64>::new();
        let theta = vec![0.5, -1.5, 2.0];
        let id = store.add("theta", &[1, 3], ParamGroup::Policy, theta.clone()).unwrap();
        let mut tape = Tape::new(&store);
        let row = tape.gather(id, 0);
        let sq = tape.square(row);
        let parts: Vec<NodeId> = (0..3).map(|k| tape.pick(sq, k)).collect();
        let loss = tape.sum(&parts);
        let g = tape.backward(loss).unwrap();
        for (gi, ti) in g.get(id).iter().zip(&theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", &[1, 2], ParamGroup::Policy, vec![0.0, 0.0]).unwrap();
        let mut tape = Tape::new(&store);
        let row = tape.gather(id, 0);
        let sq = tape.square(row);
        let a = tape.pick(sq, 0);
        let b = tape.pick(sq, 1);
        let loss = tape.add(a, b);
        assert_eq!(tape.scalar(loss), 0.0);
        assert_eq!(tape.backward(loss).unwrap().get(id), &[0.0, 0.0]);
    }

    #[test]
    fn non_participating_arrays_get_zero_and_untouched() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", &[1, 1], ParamGroup::Policy, vec![3.0]).unwrap();
        let idle = store.add("idle", &[1, 1], ParamGroup::Flow, vec![4.0]).unwrap();
        let mut tape = Tape::new(&store);
        let v = tape.gather(used, 0);
        let loss = tape.square(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(used), &[6.0]);
        assert_eq!(g.get(idle), &[0.0]);
        assert!(!g.touched[idle.index()]);
    }

    #[test]
    fn masked_log_softmax_excludes_entries() {
        let out = log_softmax(&[1.0f64, 2.0, 3.0], Some(&[true, false, true]));
        assert_eq!(out[1], f64::NEG_INFINITY);
        let s: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
