//! A small reverse-mode differentiation tape over [`Tensor`] values.
//!
//! Every forward computation in the model records its operations on a
//! [`Graph`]. Parameters are borrowed from a [`ParamStore`] rather than
//! copied, and [`Graph::backward`] returns gradients for every parameter
//! touched plus every input leaf.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul_acc, matmul_at_acc, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
pub struct CeTarget {
    pub token: usize,
    /// Softmax is taken over `logits[row][lo..hi]` only.
    pub lo: usize,
    pub hi: usize,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Log1p(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, rstd: Vec<f64> },
    Softmax(NodeId),
    Cols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Gather { table: NodeId, idx: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<f64> },
    GateFuse { zs: NodeId, zr: NodeId, g: NodeId, active: Vec<bool> },
    CrossEntropy { logits: NodeId, targets: Vec<CeTarget>, probs: Vec<Vec<f64>> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    /// Gradient with respect to an input leaf created by [`Graph::input`].
    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(id).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Convex combination `(1-g)·zs + g·zr`, clamped into the closed interval
/// spanned by `zs` and `zr` so rounding never escapes it.
pub fn lerp_bounded(zs: f64, zr: f64, g: f64) -> f64 {
    let v = (1.0 - g) * zs + g * zr;
    let (lo, hi) = if zs <= zr { (zs, zr) } else { (zr, zs) };
    if !(lo <= hi) {
        return v;
    }
    v.clamp(lo, hi)
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let n = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with `b` a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&bias) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        self.push(v, Op::Gelu(a))
    }

    pub fn log1p(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = libm::log1p(*x));
        self.push(v, Op::Log1p(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd.push(rs);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let row = v.row_mut(r);
            let m = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row[..limit].iter_mut() {
                *x = libm::exp(*x - m);
                s += *x;
            }
            for x in row[..limit].iter_mut() {
                *x /= s;
            }
            for x in row[limit..].iter_mut() {
                *x = 0.0;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(v, Op::Cols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            debug_assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            debug_assert_eq!(pv.cols(), cols);
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let v = Tensor::from_vec(rows, cols, data).expect("row concat");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let tv = self.value(table);
        let mut v = Tensor::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(v, Op::Gather { table, idx: idx.to_vec() })
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut v = self.value(x).clone();
        for (a, m) in v.data_mut().iter_mut().zip(&mask) {
            *a *= m;
        }
        self.push(v, Op::Dropout { x, mask })
    }

    /// Gated fusion `(1-g)⊙zs + g⊙zr` for rows marked active; inactive rows
    /// pass `zs` through untouched (gate forced to zero).
    pub fn gate_fuse(&mut self, zs: NodeId, zr: NodeId, g: NodeId, active: Vec<bool>) -> NodeId {
        let s = self.value(zs);
        let r = self.value(zr);
        let gv = self.value(g);
        let mut v = s.clone();
        let cols = v.cols();
        for (row, &on) in active.iter().enumerate() {
            if !on {
                continue;
            }
            for c in 0..cols {
                let z = lerp_bounded(s.get(row, c), r.get(row, c), gv.get(row, c));
                v.set(row, c, z);
            }
        }
        self.push(v, Op::GateFuse { zs, zr, g, active })
    }

    /// Summed cross-entropy; row `i` of `logits` is scored against `targets[i]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<CeTarget>) -> NodeId {
        let lv = self.value(logits);
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for (r, t) in targets.iter().enumerate() {
            let row = &lv.row(r)[t.lo..t.hi];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = row.iter().map(|x| libm::exp(x - m)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            loss -= row[t.token - t.lo] - m - libm::log(s);
            probs.push(p);
        }
        self.push(Tensor::row_vector(vec![loss]), Op::CrossEntropy { logits, targets, probs })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        let (rr, rc) = self.value(root).shape();
        let mut seed = Tensor::zeros(rr, rc);
        seed.data_mut().iter_mut().for_each(|v| *v = 1.0);
        grads[root] = Some(seed);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let g = match &node.op {
                Op::Input => continue,
                Op::Param(p) => {
                    if let Some(g) = grads[i].take() {
                        accumulate(&mut param_grads[p.0], g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[*a], g.matmul_bt(bv));
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    matmul_at_acc(av, &g, &mut gb);
                    accumulate(&mut grads[*b], gb);
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ ; da = g b ; db = gᵀ a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    matmul_acc(&g, bv, &mut ga);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], g.matmul_at(av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[*b], gb);
                    accumulate(&mut grads[*a], g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut grads[*a], g);
                    accumulate(&mut grads[*b], neg);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    for (d, yv) in ga.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (1.0 - yv);
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (d, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *d *= gelu_grad(*xv);
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::Log1p(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (d, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *d /= 1.0 + xv;
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gam = self.value(*gamma).data();
                    let (rows, cols) = xhat.shape();
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dgamma.data_mut()[c] += gr[c] * xr[c];
                            dbeta.data_mut()[c] += gr[c];
                            let dh = gr[c] * gam[c];
                            mean_d += dh;
                            mean_dx += dh * xr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            out[c] = rstd[r] * (dh - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[*gamma], dgamma);
                    accumulate(&mut grads[*beta], dbeta);
                    accumulate(&mut grads[*x], dx);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s: f64 = ga.row(r).iter().zip(yr).map(|(d, p)| d * p).sum();
                        for (d, p) in ga.row_mut(r).iter_mut().zip(yr) {
                            *d = p * (*d - s);
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::Cols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads[p], gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.value(p).shape();
                        let data = g.data()[off * pc..(off + pr) * pc].to_vec();
                        off += pr;
                        accumulate(&mut grads[p], Tensor::from_vec(pr, pc, data).unwrap());
                    }
                }
                Op::Gather { table, idx } => {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &row) in idx.iter().enumerate() {
                        for (o, v) in gt.row_mut(row).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[*table], gt);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (d, m) in gx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::GateFuse { zs, zr, g: gate, active } => {
                    let s = self.value(*zs);
                    let r = self.value(*zr);
                    let gv = self.value(*gate);
                    let (rows, cols) = s.shape();
                    let mut gs = Tensor::zeros(rows, cols);
                    let mut gr = Tensor::zeros(rows, cols);
                    let mut gg = Tensor::zeros(rows, cols);
                    for row in 0..rows {
                        for c in 0..cols {
                            let up = g.get(row, c);
                            if active[row] {
                                let gate_v = gv.get(row, c);
                                gs.set(row, c, up * (1.0 - gate_v));
                                gr.set(row, c, up * gate_v);
                                gg.set(row, c, up * (r.get(row, c) - s.get(row, c)));
                            } else {
                                gs.set(row, c, up);
                            }
                        }
                    }
                    accumulate(&mut grads[*zs], gs);
                    accumulate(&mut grads[*zr], gr);
                    accumulate(&mut grads[*gate], gg);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let up = g.data()[0];
                    let lv = self.value(*logits);
                    let mut gl = Tensor::zeros(lv.rows(), lv.cols());
                    for (r, (t, p)) in targets.iter().zip(probs).enumerate() {
                        let row = &mut gl.row_mut(r)[t.lo..t.hi];
                        for (o, pv) in row.iter_mut().zip(p) {
                            *o = up * pv;
                        }
                        row[t.token - t.lo] -= up;
                    }
                    accumulate(&mut grads[*logits], gl);
                }
            }
        }
        Gradients { params: param_grads, leaves: grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(r, c, data).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(x0: Tensor, build: impl Fn(&mut Graph<'_>, NodeId) -> NodeId) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.input(x).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x0.data().len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let x = g.input(xp);
                let out = build(&mut g, x);
                g.value(out).data()[0]
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!((fd - a).abs() < 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {a}");
        }
    }

    /// Reduces any node to a scalar via a fixed random projection.
    fn project(g: &mut Graph<'_>, y: NodeId, seed: u64) -> NodeId {
        let (r, c) = g.value(y).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, r * c, 1);
        // sum_ij y_ij w_ij, one row at a time
        let mut parts = Vec::new();
        for row in 0..r {
            let sel = g.gather(y, &[row]);
            let wr = g.input(Tensor::from_vec(c, 1, w.data()[row * c..(row + 1) * c].to_vec()).unwrap());
            parts.push(g.matmul(sel, wr));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        acc
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 4, 5);
        let w2 = rand_tensor(&mut rng, 2, 4);
        check_input_grad(x0.clone(), |g, x| {
            let wn = g.input(w.clone());
            let y = g.matmul(x, wn);
            let y = g.gelu(y);
            let y = g.sigmoid(y);
            project(g, y, 1)
        });
        check_input_grad(x0.clone(), |g, x| {
            let wn = g.input(w2.clone());
            let y = g.matmul_bt(x, wn);
            let y = g.softmax(y, false);
            project(g, y, 2)
        });
        check_input_grad(x0.clone(), |g, x| {
            let s = g.matmul_bt(x, x);
            let s = g.softmax(s, true);
            let y = g.matmul(s, x);
            project(g, y, 3)
        });
    }

    #[test]
    fn layer_norm_and_structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_tensor(&mut rng, 3, 6);
        let gamma = rand_tensor(&mut rng, 1, 6);
        let beta = rand_tensor(&mut rng, 1, 6);
        check_input_grad(x0.clone(), |g, x| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            let y = g.layer_norm(x, ga, be);
            project(g, y, 5)
        });
        check_input_grad(x0.clone(), |g, x| {
            let a = g.cols(x, 1, 3);
            let b = g.cols(x, 4, 2);
            let c = g.concat_cols(&[b, a]);
            let d = g.concat_rows(&[c, c]);
            let e = g.gather(d, &[0, 5, 5, 2]);
            let e = g.scale(e, 0.7);
            project(g, e, 6)
        });
        check_input_grad(x0, |g, x| {
            let b = g.cols(x, 0, 6);
            let b = g.gather(b, &[1]);
            let y = g.add_row(x, b);
            let y = g.sub(y, x);
            let y = g.add(y, x);
            let y = g.dropout(y, (0..18).map(|i| (i % 3) as f64 * 0.5).collect());
            project(g, y, 7)
        });
    }

    #[test]
    fn log1p_gate_and_cross_entropy_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&mut rng, 2, 6);
        let other = rand_tensor(&mut rng, 2, 6);
        check_input_grad(x0.clone(), |g, x| {
            let o = g.input(other.clone());
            let gl = g.add(x, o);
            let gate = g.sigmoid(gl);
            let y = g.gate_fuse(x, o, gate, vec![false, true]);
            project(g, y, 8)
        });
        let pos = Tensor::from_vec(2, 6, x0.data().iter().map(|v| v.abs()).collect()).unwrap();
        check_input_grad(pos, |g, x| {
            let y = g.log1p(x);
            project(g, y, 9)
        });
        check_input_grad(x0, |g, x| {
            g.cross_entropy(
                x,
                vec![CeTarget { token: 2, lo: 0, hi: 4 }, CeTarget { token: 5, lo: 3, hi: 6 }],
            )
        });
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_of_range() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(1, 10));
        let l = g.cross_entropy(x, vec![CeTarget { token: 4, lo: 2, hi: 10 }]);
        assert!((g.value(l).data()[0] - libm::log(8.0)).abs() < 1e-15);
    }

    #[test]
    fn inactive_gate_rows_pass_through_exactly() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zs = g.input(Tensor::from_vec(1, 3, vec![-0.0, 1.5, 3.25]).unwrap());
        let zr = g.input(Tensor::from_vec(1, 3, vec![9.0, 9.0, 9.0]).unwrap());
        let gate = g.input(Tensor::from_vec(1, 3, vec![0.9, 0.9, 0.9]).unwrap());
        let y = g.gate_fuse(zs, zr, gate, vec![false]);
        let bits: Vec<u64> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = [-0.0f64, 1.5, 3.25].iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn param_nodes_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(1, 1, vec![2.0]).unwrap(), true);
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.matmul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param(w).unwrap().data(), &[4.0]);
    }
}
