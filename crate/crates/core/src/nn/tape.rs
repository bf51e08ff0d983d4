//! Minimal reverse-mode tape over `Vec<f64>` nodes.
//!
//! Every forward value is computed eagerly at node creation; `backward`
//! walks the tape once in reverse, accumulating adjoints and parameter
//! gradients. Node ids are topologically ordered by construction.

use super::params::{Grads, ParamStore};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatVec { w: usize, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(NodeId, NodeId),
    Mean(Vec<NodeId>),
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    Softmax(NodeId),
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    LogSoftmaxPick { logits: NodeId, pick: usize },
    MulMask { x: NodeId, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> NodeId {
        let t = store.get(id);
        debug_assert_eq!(t.shape.len(), 1, "param node must be a vector");
        self.push(t.data.clone(), Op::Param(id))
    }

    /// `W x` for a matrix parameter `W` of shape `[rows, cols]`.
    pub fn matvec(&mut self, store: &ParamStore, w: usize, x: NodeId) -> NodeId {
        let t = store.get(w);
        let (rows, cols) = (t.rows(), t.cols());
        let xv = &self.nodes[x].value;
        debug_assert_eq!(xv.len(), cols);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data[r * cols..(r + 1) * cols];
            out[r] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(out, Op::MatVec { w, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x - y)
            .collect();
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(v, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[x]
            .value
            .iter()
            .map(|a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[x].value.iter().map(|a| a.tanh()).collect();
        self.push(v, Op::Tanh(x))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.extend_from_slice(&self.nodes[b].value);
        self.push(v, Op::Concat(a, b))
    }

    pub fn mean(&mut self, items: &[NodeId]) -> NodeId {
        assert!(!items.is_empty());
        let n = self.nodes[items[0]].value.len();
        let mut v = vec![0.0; n];
        for &it in items {
            for (acc, x) in v.iter_mut().zip(&self.nodes[it].value) {
                *acc += x;
            }
        }
        let scale = 1.0 / items.len() as f64;
        v.iter_mut().for_each(|x| *x *= scale);
        self.push(v, Op::Mean(items.to_vec()))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: f64 = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![v], Op::Dot(a, b))
    }

    /// Stacks length-1 nodes into one vector.
    pub fn stack(&mut self, items: &[NodeId]) -> NodeId {
        let v: Vec<f64> = items.iter().map(|&i| self.scalar(i)).collect();
        self.push(v, Op::Stack(items.to_vec()))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = softmax(&self.nodes[x].value);
        self.push(v, Op::Softmax(x))
    }

    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        let w = self.nodes[weights].value.clone();
        debug_assert_eq!(w.len(), items.len());
        let n = self.nodes[items[0]].value.len();
        let mut v = vec![0.0; n];
        for (wi, &it) in w.iter().zip(items) {
            for (acc, x) in v.iter_mut().zip(&self.nodes[it].value) {
                *acc += wi * x;
            }
        }
        self.push(
            v,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// `log softmax(logits)[pick]`, as a length-1 node.
    pub fn log_softmax_pick(&mut self, logits: NodeId, pick: usize) -> NodeId {
        let xs = &self.nodes[logits].value;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let v = xs[pick] - lse;
        self.push(vec![v], Op::LogSoftmaxPick { logits, pick })
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mul_mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let v: Vec<f64> = self.nodes[x]
            .value
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        self.push(v, Op::MulMask { x, mask })
    }

    /// Reverse pass from `root` (a length-1 node), seeding its adjoint with
    /// `seed`. Parameter gradients accumulate into `grads`.
    pub fn backward(&self, root: NodeId, seed: f64, store: &ParamStore, grads: &mut Grads) {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(vec![seed; self.nodes[root].value.len()]);
        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(p) => {
                    for (acc, x) in grads.data[*p].iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
                Op::MatVec { w, x } => {
                    let t = store.get(*w);
                    let (rows, cols) = (t.rows(), t.cols());
                    let xv = &self.nodes[*x].value;
                    let gw = &mut grads.data[*w];
                    for r in 0..rows {
                        for c in 0..cols {
                            gw[r * cols + c] += g[r] * xv[c];
                        }
                    }
                    let gx = acc_slot(&mut adj, *x, cols);
                    for r in 0..rows {
                        let row = &t.data[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gx[c] += row[c] * g[r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut adj, *a, &g);
                    add_into(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut adj, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].value)
                        .map(|(gi, av)| gi * av)
                        .collect();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*b].value)
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    add_into(&mut adj, *a, &ga);
                    add_into(&mut adj, *b, &gb);
                }
                Op::Sigmoid(x) => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value)
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    add_into(&mut adj, *x, &gx);
                }
                Op::Tanh(x) => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value)
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect();
                    add_into(&mut adj, *x, &gx);
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[*a].value.len();
                    add_into(&mut adj, *a, &g[..na]);
                    add_into(&mut adj, *b, &g[na..]);
                }
                Op::Mean(items) => {
                    let scaled: Vec<f64> =
                        g.iter().map(|x| x / items.len() as f64).collect();
                    for &it in items {
                        add_into(&mut adj, it, &scaled);
                    }
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let ga: Vec<f64> =
                        self.nodes[*b].value.iter().map(|x| g0 * x).collect();
                    let gb: Vec<f64> =
                        self.nodes[*a].value.iter().map(|x| g0 * x).collect();
                    add_into(&mut adj, *a, &ga);
                    add_into(&mut adj, *b, &gb);
                }
                Op::Stack(items) => {
                    for (gi, &it) in g.iter().zip(items) {
                        add_into(&mut adj, it, &[*gi]);
                    }
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[id].value;
                    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| yi * (gi - gy))
                        .collect();
                    add_into(&mut adj, *x, &gx);
                }
                Op::WeightedSum { weights, items } => {
                    let w = &self.nodes[*weights].value;
                    let mut gw = vec![0.0; w.len()];
                    for (i, &it) in items.iter().enumerate() {
                        gw[i] = g
                            .iter()
                            .zip(&self.nodes[it].value)
                            .map(|(gi, xi)| gi * xi)
                            .sum();
                        let gx: Vec<f64> = g.iter().map(|gi| gi * w[i]).collect();
                        add_into(&mut adj, it, &gx);
                    }
                    add_into(&mut adj, *weights, &gw);
                }
                Op::LogSoftmaxPick { logits, pick } => {
                    let sm = softmax(&self.nodes[*logits].value);
                    let g0 = g[0];
                    let gx: Vec<f64> = sm
                        .iter()
                        .enumerate()
                        .map(|(i, si)| {
                            let onehot = if i == *pick { 1.0 } else { 0.0 };
                            g0 * (onehot - si)
                        })
                        .collect();
                    add_into(&mut adj, *logits, &gx);
                }
                Op::MulMask { x, mask } => {
                    let gx: Vec<f64> =
                        g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                    add_into(&mut adj, *x, &gx);
                }
            }
        }
    }
}

fn acc_slot<'a>(adj: &'a mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &'a mut Vec<f64> {
    adj[id].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(adj: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    let slot = adj[id].get_or_insert_with(|| vec![0.0; g.len()]);
    for (acc, x) in slot.iter_mut().zip(g) {
        *acc += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Builds a little network exercising every op and returns the scalar
    /// output. Used for a finite-difference sweep over all parameters.
    fn forward(store: &ParamStore, w: usize, b: usize, k: usize) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.3, -0.2, 0.5]);
        let bx = tape.param(store, b);
        let wx = tape.matvec(store, w, x);
        let pre = tape.add(wx, bx);
        let s = tape.sigmoid(pre);
        let t = tape.tanh(pre);
        let m = tape.mul(s, t);
        let d = tape.sub(m, bx);
        let mask = vec![2.0, 0.0, 1.0];
        let dm = tape.mul_mask(d, mask);
        let mn = tape.mean(&[dm, s]);
        let kx = tape.param(store, k);
        let key = tape.concat(mn, kx);
        let probe = tape.constant(vec![0.05; 6]);
        let d1 = tape.dot(key, probe);
        let d2 = tape.dot(key, key);
        let d3 = tape.dot(probe, key);
        let logits = tape.stack(&[d1, d2, d3]);
        let att = tape.softmax(logits);
        let ctx = tape.weighted_sum(att, &[s, t, mn]);
        let sc1 = tape.dot(ctx, s);
        let sc2 = tape.dot(ctx, t);
        let final_logits = tape.stack(&[sc1, sc2]);
        let lp = tape.log_softmax_pick(final_logits, 1);
        tape.scalar(lp)
    }

    #[test]
    fn finite_difference_all_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::uniform_matrix(3, 3, &mut rng));
        let b = store.add(
            "b",
            Tensor {
                shape: vec![3],
                data: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            },
        );
        let k = store.add(
            "k",
            Tensor {
                shape: vec![3],
                data: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            },
        );

        let mut grads = Grads::zeros_like(&store);
        let root_val;
        {
            let mut tape = Tape::new();
            let x = tape.constant(vec![0.3, -0.2, 0.5]);
            let bx = tape.param(&store, b);
            let wx = tape.matvec(&store, w, x);
            let pre = tape.add(wx, bx);
            let s = tape.sigmoid(pre);
            let t = tape.tanh(pre);
            let m = tape.mul(s, t);
            let d = tape.sub(m, bx);
            let dm = tape.mul_mask(d, vec![2.0, 0.0, 1.0]);
            let mn = tape.mean(&[dm, s]);
            let kx = tape.param(&store, k);
            let key = tape.concat(mn, kx);
            let probe = tape.constant(vec![0.05; 6]);
            let d1 = tape.dot(key, probe);
            let d2 = tape.dot(key, key);
            let d3 = tape.dot(probe, key);
            let logits = tape.stack(&[d1, d2, d3]);
            let att = tape.softmax(logits);
            let ctx = tape.weighted_sum(att, &[s, t, mn]);
            let sc1 = tape.dot(ctx, s);
            let sc2 = tape.dot(ctx, t);
            let final_logits = tape.stack(&[sc1, sc2]);
            let lp = tape.log_softmax_pick(final_logits, 1);
            root_val = tape.scalar(lp);
            tape.backward(lp, 1.0, &store, &mut grads);
        }
        assert!(root_val.is_finite());

        let eps = 1e-5;
        for pid in 0..store.len() {
            for j in 0..store.get(pid).data.len() {
                let orig = store.get(pid).data[j];
                store.get_mut(pid).data[j] = orig + eps;
                let plus = forward(&store, w, b, k);
                store.get_mut(pid).data[j] = orig - eps;
                let minus = forward(&store, w, b, k);
                store.get_mut(pid).data[j] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads.data[pid][j];
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
                assert!(
                    rel < 1e-6,
                    "param {pid}[{j}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 4]);
        let y = tape.softmax(x);
        for v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
