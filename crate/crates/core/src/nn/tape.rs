use std::collections::HashMap;
use std::sync::Arc;

use super::attention::{self, MhaDims, ScoreDims};
use super::norm::{self, NormGroups};
use super::params::ParamSet;
use super::real::{gemm, Real};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct MhaSaved<F> {
    q: Var,
    k: Var,
    v: Var,
    kv_row: Arc<Vec<usize>>,
    dims: MhaDims,
    attn: Vec<F>,
}

struct ScoreSaved<F> {
    q: Var,
    k: Var,
    kv_row: Arc<Vec<usize>>,
    mask: Option<Arc<Vec<bool>>>,
    dims: ScoreDims,
    clip: F,
    tanh: Vec<F>,
}

struct NormSaved<F> {
    x: Var,
    gamma: Var,
    beta: Var,
    groups: NormGroups,
    fixed: bool,
    dims: (usize, usize, usize),
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

enum Op<F> {
    Leaf,
    MatMul { x: Var, w: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Minimum(Var, Var),
    Clamp { x: Var, lo: F, hi: F },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, w: Arc<Vec<F>> },
    MeanNodes { x: Var, l: usize, d: usize },
    SegmentSum { x: Var, seg: Arc<Vec<usize>> },
    GatherRows { x: Var, idx: Arc<Vec<usize>>, stride: usize },
    GatherNodes { x: Var, rows: Arc<Vec<usize>>, nodes: Arc<Vec<usize>>, l: usize, d: usize },
    ReplaceRows { x: Var, p: Var, which: Arc<Vec<bool>> },
    ConcatLast { parts: Vec<(Var, usize)> },
    SliceLast { x: Var, start: usize, width: usize },
    ConcatNodes { a: Var, b: Var, la: usize, lb: usize, d: usize },
    Reshape(Var),
    Mha(Box<MhaSaved<F>>),
    ClippedScore(Box<ScoreSaved<F>>),
    LogSoftmax { x: Var, width: usize },
    Pick { x: Var, idx: Arc<Vec<usize>>, width: usize },
    Entropy { logp: Var, width: usize },
    Norm(Box<NormSaved<F>>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Batch statistics produced by a batch-normalization op in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Reverse-mode automatic differentiation tape.
///
/// Every op records its output value; when gradients are enabled it also
/// keeps whatever the backward pass needs. Parameters enter through
/// [`Tape::param`] and are deduplicated per parameter set.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    params: HashMap<(u64, usize), Var>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true, params: HashMap::new() }
    }

    /// A tape that records values only.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false, params: HashMap::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free input that receives gradient (used by gradient checks).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Parameter `idx` of `set`; repeated calls return the same handle.
    pub fn param(&mut self, set: &ParamSet<F>, idx: usize) -> Var {
        let key = (set.uid(), idx);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = set.is_trainable(idx);
        let value = set.value(idx).clone();
        let v = if trainable { self.input(value) } else { self.constant(value) };
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, set: &ParamSet<F>, idx: usize) -> Option<Var> {
        self.params.get(&(set.uid(), idx)).copied()
    }

    // ----- linear algebra -----

    /// `x[.., k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul weight must be 2-d, got {ws:?}");
        let (k, n) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        assert_eq!(last_dim(&xs), k, "matmul: input {xs:?} vs weight {ws:?}");
        let m = self.value(x).len() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.data(x), false, self.data(w), false, F::zero(), &mut out);
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(n);
        self.push(Tensor::new(shape, out), Op::MatMul { x, w, m, k, n }, &[x, w])
    }

    /// `x[.., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(b).len();
        assert_eq!(last_dim(self.shape(x)), n, "add_bias width mismatch");
        let bd = self.data(b).to_vec();
        let out: Vec<F> = self.data(x).chunks(n).flat_map(|row| row.iter().zip(&bd).map(|(a, c)| *a + *c)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::AddBias { x, b }, &[x, b])
    }

    /// `x · w + b` with `w[k, n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    // ----- elementwise -----

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), op, &[a, b])
    }

    fn map_op(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out: Vec<F> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.map_op(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.map_op(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.map_op(a, |x| x.max(lo).min(hi), Op::Clamp { x: a, lo, hi })
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: F = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s / F::c(n.max(1) as f64)), Op::Mean(a), &[a])
    }

    /// `Σ x_i w_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<F>) -> Var {
        assert_eq!(self.value(a).len(), w.len(), "weighted_sum length mismatch");
        let s = self.data(a).iter().zip(&w).map(|(&x, &y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x: a, w: Arc::new(w) }, &[a])
    }

    /// Mean over axis 1 of `[R, L, d]`.
    pub fn mean_nodes(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "mean_nodes expects [R, L, d]");
        let (r, l, d) = (s[0], s[1], s[2]);
        let x = self.data(a);
        let mut out = vec![F::zero(); r * d];
        for ri in 0..r {
            for li in 0..l {
                for c in 0..d {
                    out[ri * d + c] += x[(ri * l + li) * d + c];
                }
            }
        }
        let lf = F::c(l as f64);
        for o in out.iter_mut() {
            *o /= lf;
        }
        self.push(Tensor::new(vec![r, d], out), Op::MeanNodes { x: a, l, d }, &[a])
    }

    /// `out[s] = Σ_{i: seg[i] = s} x[i]` for a flat `x`.
    pub fn segment_sum(&mut self, a: Var, seg: Vec<usize>, segments: usize) -> Var {
        assert_eq!(self.value(a).len(), seg.len(), "segment_sum length mismatch");
        let mut out = vec![F::zero(); segments];
        for (&x, &s) in self.data(a).iter().zip(&seg) {
            out[s] += x;
        }
        self.push(Tensor::new(vec![segments], out), Op::SegmentSum { x: a, seg: Arc::new(seg) }, &[a])
    }

    // ----- indexing and layout -----

    /// Rows of axis 0: `out[q] = x[idx[q]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let s = self.shape(a).to_vec();
        let stride: usize = s[1..].iter().product();
        let x = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx.iter() {
            out.extend_from_slice(&x[i * stride..(i + 1) * stride]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        self.push(Tensor::new(shape, out), Op::GatherRows { x: a, idx, stride }, &[a])
    }

    /// `out[q] = x[rows[q], nodes[q]]` for `x[R, L, d]`.
    pub fn gather_nodes(&mut self, a: Var, rows: Arc<Vec<usize>>, nodes: Arc<Vec<usize>>) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "gather_nodes expects [R, L, d]");
        let (l, d) = (s[1], s[2]);
        let x = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for (&r, &j) in rows.iter().zip(nodes.iter()) {
            out.extend_from_slice(&x[(r * l + j) * d..(r * l + j + 1) * d]);
        }
        let shape = vec![rows.len(), d];
        self.push(Tensor::new(shape, out), Op::GatherNodes { x: a, rows, nodes, l, d }, &[a])
    }

    /// Rows of `x[Q, d]` flagged in `which` are replaced by `p[d]`.
    pub fn replace_rows(&mut self, a: Var, p: Var, which: Arc<Vec<bool>>) -> Var {
        let d = self.value(p).len();
        assert_eq!(last_dim(self.shape(a)), d, "replace_rows width mismatch");
        let pd = self.data(p).to_vec();
        let mut out = self.data(a).to_vec();
        for (q, &w) in which.iter().enumerate() {
            if w {
                out[q * d..(q + 1) * d].copy_from_slice(&pd);
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::ReplaceRows { x: a, p, which }, &[a, p])
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let lead = self.shape(parts[0]).to_vec();
        let lead = &lead[..lead.len() - 1];
        let widths: Vec<usize> = parts.iter().map(|&p| last_dim(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let op = Op::ConcatLast { parts: parts.iter().copied().zip(widths).collect() };
        self.push(Tensor::new(shape, out), op, parts)
    }

    /// `x[.., start..start + len]`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        let width = last_dim(&s);
        assert!(start + len <= width, "slice_last out of range");
        let out: Vec<F> = self.data(a).chunks(width).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(shape, out), Op::SliceLast { x: a, start, width }, &[a])
    }

    /// `[R, La, d] ++ [R, Lb, d]` along axis 1.
    pub fn concat_nodes(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "concat_nodes shapes {sa:?} {sb:?}");
        let (r, la, lb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Vec::with_capacity(r * (la + lb) * d);
        for ri in 0..r {
            out.extend_from_slice(&self.data(a)[ri * la * d..(ri + 1) * la * d]);
            out.extend_from_slice(&self.data(b)[ri * lb * d..(ri + 1) * lb * d]);
        }
        self.push(Tensor::new(vec![r, la + lb, d], out), Op::ConcatNodes { a, b, la, lb, d }, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).reshape(shape);
        self.push(t, Op::Reshape(a), &[a])
    }

    // ----- attention -----

    /// Multi-head attention without projections.
    ///
    /// `q[Q, Lq, d]` attends over `k, v[R, L, d]` at row `kv_row[q]`;
    /// `mask[Q, L]` (`true` = excluded) applies to every query position.
    /// A query with every key masked yields zeros.
    pub fn mha(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        kv_row: Arc<Vec<usize>>,
        mask: Option<Arc<Vec<bool>>>,
        heads: usize,
    ) -> Var {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        assert!(qs.len() == 3 && ks.len() == 3, "mha expects 3-d q and k");
        assert_eq!(self.shape(k), self.shape(v), "mha key/value shapes differ");
        assert_eq!(qs[2], ks[2], "mha width mismatch");
        assert_eq!(kv_row.len(), qs[0], "mha kv_row length");
        assert!(heads > 0 && qs[2] % heads == 0, "width {} not divisible by {heads} heads", qs[2]);
        let dims = MhaDims { queries: qs[0], lq: qs[1], rows: ks[0], l: ks[1], d: qs[2], heads };
        if let Some(m) = &mask {
            assert_eq!(m.len(), dims.queries * dims.l, "mha mask shape");
        }
        let (out, attn) =
            attention::mha_forward(dims, self.data(q), self.data(k), self.data(v), &kv_row, mask.as_deref().map(|m| &m[..]));
        let op = Op::Mha(Box::new(MhaSaved { q, k, v, kv_row, dims, attn }));
        self.push(Tensor::new(qs, out), op, &[q, k, v])
    }

    /// `C·tanh(q·k/√d)` for `q[Q, d]` against `k[R, L, d]`; masked entries are `-inf`.
    pub fn clipped_score(&mut self, q: Var, k: Var, kv_row: Arc<Vec<usize>>, mask: Option<Arc<Vec<bool>>>, clip: F) -> Var {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        assert!(qs.len() == 2 && ks.len() == 3 && qs[1] == ks[2], "clipped_score shapes {qs:?} {ks:?}");
        assert_eq!(kv_row.len(), qs[0]);
        let dims = ScoreDims { queries: qs[0], rows: ks[0], l: ks[1], d: qs[1] };
        let (out, tanh) =
            attention::clipped_score_forward(dims, self.data(q), self.data(k), &kv_row, mask.as_deref().map(|m| &m[..]), clip);
        let op = Op::ClippedScore(Box::new(ScoreSaved { q, k, kv_row, mask, dims, clip, tanh }));
        self.push(Tensor::new(vec![dims.queries, dims.l], out), op, &[q, k])
    }

    /// Row-wise log-softmax over the last axis; `-inf` entries stay `-inf`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let width = last_dim(self.shape(a));
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                continue;
            }
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::LogSoftmax { x: a, width }, &[a])
    }

    /// `out[q] = x[q, idx[q]]` for `x[Q, L]`.
    pub fn pick(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let width = last_dim(self.shape(a));
        let x = self.data(a);
        let out: Vec<F> = idx.iter().enumerate().map(|(q, &j)| x[q * width + j]).collect();
        self.push(Tensor::new(vec![idx.len()], out), Op::Pick { x: a, idx, width }, &[a])
    }

    /// Entropy per row of a log-probability matrix `[Q, L]`.
    pub fn entropy(&mut self, logp: Var) -> Var {
        let width = last_dim(self.shape(logp));
        let out: Vec<F> = self
            .data(logp)
            .chunks(width)
            .map(|row| {
                -row.iter().filter(|x| x.is_finite()).map(|&x| x.exp() * x).sum::<F>()
            })
            .collect();
        let q = out.len();
        self.push(Tensor::new(vec![q], out), Op::Entropy { logp, width }, &[logp])
    }

    // ----- normalization -----

    /// Normalizes `x[R, L, d]` per instance and channel over nodes.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        self.norm(x, gamma, beta, NormGroups::Instance, None).0
    }

    /// Batch normalization of `x[R, L, d]` per channel.
    ///
    /// With `running = None` batch statistics are used and returned;
    /// otherwise the given `(mean, var)` are applied as constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[F], &[F])>) -> (Var, Option<BatchStats<F>>) {
        self.norm(x, gamma, beta, NormGroups::Batch, running)
    }

    fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: NormGroups,
        fixed: Option<(&[F], &[F])>,
    ) -> (Var, Option<BatchStats<F>>) {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "normalization expects [R, L, d]");
        let (r, l, d) = (s[0], s[1], s[2]);
        let f = norm::norm_forward(groups, self.data(x), self.data(gamma), self.data(beta), r, l, d, fixed);
        let stats = (groups == NormGroups::Batch && fixed.is_none())
            .then(|| BatchStats { mean: f.mean.clone(), var: f.var.clone() });
        let op = Op::Norm(Box::new(NormSaved {
            x,
            gamma,
            beta,
            groups,
            fixed: fixed.is_some(),
            dims: (r, l, d),
            xhat: f.xhat,
            inv_std: f.inv_std,
        }));
        (self.push(Tensor::new(s, f.out), op, &[x, gamma, beta]), stats)
    }

    // ----- backward -----

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { x, w, m, k, n } => {
                if let Some(dx) = self.acc(grads, x) {
                    gemm(m, n, k, g, false, self.data(w), true, F::one(), dx);
                }
                if let Some(dw) = self.acc(grads, w) {
                    gemm(k, m, n, self.data(x), true, g, false, F::one(), dw);
                }
            }
            &Op::AddBias { x, b } => {
                if let Some(dx) = self.acc(grads, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.acc(grads, b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, b) {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(self.data(b)) {
                        *d += x * y;
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(self.data(a)) {
                        *d += x * y;
                    }
                }
            }
            &Op::Minimum(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                if let Some(da) = self.acc(grads, a) {
                    for j in 0..g.len() {
                        if av[j] <= bv[j] {
                            da[j] += g[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for j in 0..g.len() {
                        if av[j] > bv[j] {
                            db[j] += g[j];
                        }
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x * c;
                    }
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if let Some(da) = self.acc(grads, a) {
                    add_into(da, g);
                }
            }
            &Op::Relu(a) => {
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(out) {
                        if y > F::zero() {
                            *d += x;
                        }
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += x * (F::one() - y * y);
                    }
                }
            }
            &Op::Exp(a) => {
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += x * y;
                    }
                }
            }
            &Op::Square(a) => {
                let av = self.data(a);
                if let Some(da) = self.acc(grads, a) {
                    let two = F::c(2.0);
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(av) {
                        *d += two * x * y;
                    }
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = self.data(x);
                if let Some(dx) = self.acc(grads, x) {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v >= lo && v <= hi {
                            *d += gg;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(da) = self.acc(grads, a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                if let Some(da) = self.acc(grads, a) {
                    let s = g[0] / F::c(da.len().max(1) as f64);
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &c) in dx.iter_mut().zip(w.iter()) {
                        *d += g[0] * c;
                    }
                }
            }
            &Op::MeanNodes { x, l, d } => {
                if let Some(dx) = self.acc(grads, x) {
                    let lf = F::c(l as f64);
                    let r = dx.len() / (l * d).max(1);
                    for ri in 0..r {
                        for li in 0..l {
                            for c in 0..d {
                                dx[(ri * l + li) * d + c] += g[ri * d + c] / lf;
                            }
                        }
                    }
                }
            }
            Op::SegmentSum { x, seg } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &s) in dx.iter_mut().zip(seg.iter()) {
                        *d += g[s];
                    }
                }
            }
            Op::GatherRows { x, idx, stride } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (q, &r) in idx.iter().enumerate() {
                        add_into(&mut dx[r * stride..(r + 1) * stride], &g[q * stride..(q + 1) * stride]);
                    }
                }
            }
            Op::GatherNodes { x, rows, nodes, l, d } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (q, (&r, &j)) in rows.iter().zip(nodes.iter()).enumerate() {
                        add_into(&mut dx[(r * l + j) * d..(r * l + j + 1) * d], &g[q * d..(q + 1) * d]);
                    }
                }
            }
            Op::ReplaceRows { x, p, which } => {
                let d = self.value(*p).len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (q, &w) in which.iter().enumerate() {
                        if !w {
                            add_into(&mut dx[q * d..(q + 1) * d], &g[q * d..(q + 1) * d]);
                        }
                    }
                }
                if let Some(dp) = self.acc(grads, *p) {
                    for (q, &w) in which.iter().enumerate() {
                        if w {
                            add_into(dp, &g[q * d..(q + 1) * d]);
                        }
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &(p, w) in parts {
                    if let Some(dp) = self.acc(grads, p) {
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceLast { x, start, width } => {
                if let Some(dx) = self.acc(grads, x) {
                    let len = self.value(i_var(i)).shape().last().copied().unwrap_or(1);
                    let rows = g.len() / len.max(1);
                    for r in 0..rows {
                        add_into(&mut dx[r * width + start..r * width + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            &Op::ConcatNodes { a, b, la, lb, d } => {
                let r = g.len() / ((la + lb) * d).max(1);
                if let Some(da) = self.acc(grads, a) {
                    for ri in 0..r {
                        let src = &g[ri * (la + lb) * d..ri * (la + lb) * d + la * d];
                        add_into(&mut da[ri * la * d..(ri + 1) * la * d], src);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ri in 0..r {
                        let src = &g[ri * (la + lb) * d + la * d..(ri + 1) * (la + lb) * d];
                        add_into(&mut db[ri * lb * d..(ri + 1) * lb * d], src);
                    }
                }
            }
            Op::Mha(s) => {
                let (need_q, need_kv) = (self.needs(s.q), self.needs(s.k) || self.needs(s.v));
                let (dq, dk, dv) = attention::mha_backward(
                    s.dims,
                    self.data(s.q),
                    self.data(s.k),
                    self.data(s.v),
                    &s.kv_row,
                    &s.attn,
                    g,
                    need_q,
                    need_kv,
                );
                for (var, part) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
                    if let (Some(dst), Some(src)) = (self.acc(grads, var), part) {
                        add_into(dst, &src);
                    }
                }
            }
            Op::ClippedScore(s) => {
                let (dq, dk) = attention::clipped_score_backward(
                    s.dims,
                    self.data(s.q),
                    self.data(s.k),
                    &s.kv_row,
                    s.mask.as_deref().map(|m| &m[..]),
                    &s.tanh,
                    s.clip,
                    g,
                    self.needs(s.q),
                    self.needs(s.k),
                );
                for (var, part) in [(s.q, dq), (s.k, dk)] {
                    if let (Some(dst), Some(src)) = (self.acc(grads, var), part) {
                        add_into(dst, &src);
                    }
                }
            }
            &Op::LogSoftmax { x, width } => {
                if let Some(dx) = self.acc(grads, x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(width).zip(g.chunks(width)).zip(out.chunks(width)) {
                        let mut gs = F::zero();
                        for (&gg, &y) in grow.iter().zip(yrow) {
                            if y.is_finite() {
                                gs += gg;
                            }
                        }
                        for ((d, &gg), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            if y.is_finite() {
                                *d += gg - y.exp() * gs;
                            }
                        }
                    }
                }
            }
            Op::Pick { x, idx, width } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (q, &j) in idx.iter().enumerate() {
                        dx[q * width + j] += g[q];
                    }
                }
            }
            &Op::Entropy { logp, width } => {
                let lv = self.data(logp);
                if let Some(dl) = self.acc(grads, logp) {
                    for (q, &gq) in g.iter().enumerate() {
                        for j in 0..width {
                            let y = lv[q * width + j];
                            if y.is_finite() {
                                dl[q * width + j] -= gq * y.exp() * (y + F::one());
                            }
                        }
                    }
                }
            }
            Op::Norm(s) => {
                let (r, l, d) = s.dims;
                let (dx, dg, db) =
                    norm::norm_backward(s.groups, s.fixed, &s.xhat, &s.inv_std, self.data(s.gamma), g, r, l, d);
                for (var, part) in [(s.x, dx), (s.gamma, dg), (s.beta, db)] {
                    if let Some(dst) = self.acc(grads, var) {
                        add_into(dst, &part);
                    }
                }
            }
        }
    }
}

#[inline]
fn i_var(i: usize) -> Var {
    Var(i)
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a recorded value, `None` if it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for every parameter of `set`, in parameter order.
    pub fn for_params(&self, tape: &Tape<F>, set: &ParamSet<F>) -> Vec<Option<Vec<F>>> {
        (0..set.len())
            .map(|i| tape.param_var(set, i).and_then(|v| self.grads[v.0].clone()))
            .collect()
    }
}
