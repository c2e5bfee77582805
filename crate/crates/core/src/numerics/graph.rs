//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and records its inputs. `backward`
//! replays the tape in reverse. Shape agreement is an internal invariant of
//! the model code built on top of this: operations panic on mismatched
//! shapes, and public entry points validate shapes before building a graph.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{matmul_into, matmul_t_into, matmul_tn_into, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Softmax { x: Var, scale: T },
    L2Normalize { x: Var, eps: T },
    LayerNorm { x: Var, eps: T },
    Gelu(Var),
    MeanRows(Var),
    SumCols(Var),
    DivByCol(Var, Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    LogSumExpRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_in_place<T: Real>(row: &mut [T], valid: usize) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row[..valid].iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row[..valid].iter_mut() {
        *x = *x / sum;
    }
    for x in row[valid..].iter_mut() {
        *x = T::zero();
    }
}

fn logsumexp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Loads a named parameter onto the tape. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameters loaded onto this tape, by name.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul_t(self.value(b))
            .expect("matmul_t shapes");
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            (x.rows(), x.cols()),
            (y.rows(), y.cols()),
            "elementwise shapes"
        );
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(vec![x.rows(), x.cols()], data).expect("same numel")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        self.push(value, Op::Mul(a, b))
    }

    fn row_broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let c = x.cols();
        assert_eq!(y.numel(), c, "row broadcast width");
        let mut out = Tensor::zeros(&[x.rows(), c]);
        for (o, chunk) in out.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
            for ((o, &p), &q) in o.iter_mut().zip(chunk).zip(y.data()) {
                *o = f(p, q);
            }
        }
        out
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.row_broadcast(a, b, |p, q| p + q);
        self.push(value, Op::AddRow(a, b))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.row_broadcast(a, b, |p, q| p * q);
        self.push(value, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    /// Row softmax of `x · scale`. With `causal`, row `i` only sees columns
    /// `0..=i` and masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, scale: T, causal: bool) -> Var {
        let mut out = self.value(x).map(|v| v * scale);
        let (r, c) = (out.rows(), out.cols());
        for i in 0..r {
            let valid = if causal { (i + 1).min(c) } else { c };
            softmax_in_place(out.row_mut(i), valid);
        }
        let out = Tensor::new(vec![r, c], out.into_data()).expect("numel");
        self.push(out, Op::Softmax { x, scale })
    }

    /// Row-wise `x / sqrt(‖x‖² + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = src.row(i);
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v / n;
            }
        }
        self.push(out, Op::L2Normalize { x, eps })
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        let n = T::from_usize(c).unwrap();
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm { x, eps })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let value = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x))
    }

    /// Column means, `[1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(src.row(i)) {
                *o = *o + v;
            }
        }
        let n = T::from_usize(r).unwrap();
        let out = out.into_iter().map(|v| v / n).collect();
        let value = Tensor::new(vec![1, c], out).expect("numel");
        self.push(value, Op::MeanRows(x))
    }

    /// Row sums, `[r×1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let r = src.rows();
        let out = (0..r).map(|i| src.row(i).iter().copied().sum()).collect();
        let value = Tensor::new(vec![r, 1], out).expect("numel");
        self.push(value, Op::SumCols(x))
    }

    /// Divides row `i` of `a` by `d[i]` where `d` is `[r×1]`.
    pub fn div_by_col(&mut self, a: Var, d: Var) -> Var {
        let (x, y) = (self.value(a), self.value(d));
        assert_eq!(x.rows(), y.numel(), "div_by_col rows");
        let mut out = x.clone();
        let c = x.cols();
        for i in 0..x.rows() {
            let den = y.data()[i];
            for v in out.data_mut()[i * c..(i + 1) * c].iter_mut() {
                *v = *v / den;
            }
        }
        let out = Tensor::new(vec![x.rows(), c], out.into_data()).expect("numel");
        self.push(out, Op::DivByCol(a, d))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data).expect("numel");
        self.push(value, Op::SelectRows(x, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows widths");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::new(vec![rows, c], data).expect("numel");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let r = src.rows();
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = src.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(vec![r, idx.len()], data).expect("numel");
        self.push(value, Op::SelectCols(x, idx.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols heights");
                data.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data).expect("numel");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise log-sum-exp, `[r×1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let r = src.rows();
        let out = (0..r).map(|i| logsumexp(src.row(i))).collect();
        let value = Tensor::new(vec![r, 1], out).expect("numel");
        self.push(value, Op::LogSumExpRows(x))
    }

    /// `Σ_i w_i · (logsumexp(logits_i) − logits_i[t_i])` as a `[1×1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let src = self.value(logits);
        assert_eq!(src.rows(), targets.len(), "one target per logit row");
        assert_eq!(targets.len(), weights.len(), "one weight per target");
        let mut loss = T::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == T::zero() {
                continue;
            }
            let row = src.row(i);
            loss = loss + w * (logsumexp(row) - row[t]);
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a scalar");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<'a, T: Real>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = dY · Bᵀ, dB = Aᵀ · dY
                    matmul_t_into(&dy, bv.data(), slot(&mut grads, &self.nodes, *a), m, n, k);
                    matmul_tn_into(av.data(), &dy, slot(&mut grads, &self.nodes, *b), k, m, n);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    // Y = A·Bᵀ: dA = dY · B, dB = dYᵀ · A
                    matmul_into(&dy, bv.data(), slot(&mut grads, &self.nodes, *a), m, n, k);
                    matmul_tn_into(&dy, av.data(), slot(&mut grads, &self.nodes, *b), n, m, k);
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.rows(), out.cols());
                    let g = slot(&mut grads, &self.nodes, *a);
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] = g[j * r + i] + dy[i * c + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(slot(&mut grads, &self.nodes, *a), &dy, T::one());
                    accumulate(slot(&mut grads, &self.nodes, *b), &dy, T::one());
                }
                Op::Sub(a, b) => {
                    accumulate(slot(&mut grads, &self.nodes, *a), &dy, T::one());
                    accumulate(slot(&mut grads, &self.nodes, *b), &dy, -T::one());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for ((g, &d), &q) in ga.iter_mut().zip(&dy).zip(bv) {
                        *g = *g + d * q;
                    }
                    let gb = slot(&mut grads, &self.nodes, *b);
                    for ((g, &d), &p) in gb.iter_mut().zip(&dy).zip(av) {
                        *g = *g + d * p;
                    }
                }
                Op::AddRow(a, b) => {
                    let c = out.cols();
                    accumulate(slot(&mut grads, &self.nodes, *a), &dy, T::one());
                    let gb = slot(&mut grads, &self.nodes, *b);
                    for chunk in dy.chunks(c) {
                        accumulate(gb, chunk, T::one());
                    }
                }
                Op::MulRow(a, b) => {
                    let c = out.cols();
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for (gchunk, dchunk) in ga.chunks_mut(c).zip(dy.chunks(c)) {
                        for ((g, &d), &q) in gchunk.iter_mut().zip(dchunk).zip(bv) {
                            *g = *g + d * q;
                        }
                    }
                    let gb = slot(&mut grads, &self.nodes, *b);
                    for (achunk, dchunk) in av.chunks(c).zip(dy.chunks(c)) {
                        for ((g, &d), &p) in gb.iter_mut().zip(dchunk).zip(achunk) {
                            *g = *g + d * p;
                        }
                    }
                }
                Op::Scale(a, s) => accumulate(slot(&mut grads, &self.nodes, *a), &dy, *s),
                Op::Softmax { x, scale, .. } => {
                    let c = out.cols();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for ((gchunk, ychunk), dchunk) in
                        g.chunks_mut(c).zip(out.data().chunks(c)).zip(dy.chunks(c))
                    {
                        let dot: T = ychunk.iter().zip(dchunk).map(|(&y, &d)| y * d).sum();
                        for ((gv, &y), &d) in gchunk.iter_mut().zip(ychunk).zip(dchunk) {
                            *gv = *gv + *scale * y * (d - dot);
                        }
                    }
                }
                Op::L2Normalize { x, eps } => {
                    let src = self.value(*x);
                    let c = src.cols();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for ((gchunk, xchunk), dchunk) in
                        g.chunks_mut(c).zip(src.data().chunks(c)).zip(dy.chunks(c))
                    {
                        let s: T = xchunk.iter().map(|&v| v * v).sum();
                        let n = (s + *eps).sqrt();
                        let n3 = n * n * n;
                        let dot: T = xchunk.iter().zip(dchunk).map(|(&v, &d)| v * d).sum();
                        for ((gv, &xv), &d) in gchunk.iter_mut().zip(xchunk).zip(dchunk) {
                            *gv = *gv + d / n - xv * dot / n3;
                        }
                    }
                }
                Op::LayerNorm { x, eps } => {
                    let src = self.value(*x);
                    let c = src.cols();
                    let nf = T::from_usize(c).unwrap();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for (((gchunk, xchunk), ychunk), dchunk) in g
                        .chunks_mut(c)
                        .zip(src.data().chunks(c))
                        .zip(out.data().chunks(c))
                        .zip(dy.chunks(c))
                    {
                        let mean = xchunk.iter().copied().sum::<T>() / nf;
                        let var =
                            xchunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                        let inv = T::one() / (var + *eps).sqrt();
                        let mean_d = dchunk.iter().copied().sum::<T>() / nf;
                        let mean_dy: T =
                            dchunk.iter().zip(ychunk).map(|(&d, &y)| d * y).sum::<T>() / nf;
                        for ((gv, &y), &d) in gchunk.iter_mut().zip(ychunk).zip(dchunk) {
                            *gv = *gv + inv * (d - mean_d - y * mean_dy);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let c = T::lit(GELU_C);
                    let a = T::lit(GELU_A);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let src = self.value(*x).data();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for ((gv, &v), &d) in g.iter_mut().zip(src).zip(&dy) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        *gv = *gv + d * (half * (T::one() + t) + half * v * dt);
                    }
                }
                Op::MeanRows(x) => {
                    let src = self.value(*x);
                    let (r, c) = (src.rows(), src.cols());
                    let inv = T::one() / T::from_usize(r).unwrap();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for chunk in g.chunks_mut(c) {
                        for (gv, &d) in chunk.iter_mut().zip(&dy) {
                            *gv = *gv + d * inv;
                        }
                    }
                }
                Op::SumCols(x) => {
                    let c = self.value(*x).cols();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for (chunk, &d) in g.chunks_mut(c).zip(&dy) {
                        for gv in chunk.iter_mut() {
                            *gv = *gv + d;
                        }
                    }
                }
                Op::DivByCol(a, d) => {
                    let c = out.cols();
                    let den = self.value(*d).data().to_vec();
                    {
                        let ga = slot(&mut grads, &self.nodes, *a);
                        for ((chunk, dchunk), &q) in ga.chunks_mut(c).zip(dy.chunks(c)).zip(&den)
                        {
                            for (gv, &dv) in chunk.iter_mut().zip(dchunk) {
                                *gv = *gv + dv / q;
                            }
                        }
                    }
                    let gd = slot(&mut grads, &self.nodes, *d);
                    for (i, (ychunk, dchunk)) in
                        out.data().chunks(c).zip(dy.chunks(c)).enumerate()
                    {
                        let dot: T = ychunk.iter().zip(dchunk).map(|(&y, &dv)| y * dv).sum();
                        gd[i] = gd[i] - dot / den[i];
                    }
                }
                Op::SelectRows(x, idx) => {
                    let c = out.cols();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for (k, &i) in idx.iter().enumerate() {
                        accumulate(&mut g[i * c..(i + 1) * c], &dy[k * c..(k + 1) * c], T::one());
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).numel();
                        accumulate(
                            slot(&mut grads, &self.nodes, *p),
                            &dy[offset..offset + n],
                            T::one(),
                        );
                        offset += n;
                    }
                }
                Op::SelectCols(x, idx) => {
                    let (r, k) = (out.rows(), out.cols());
                    let c = self.value(*x).cols();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for i in 0..r {
                        for (jj, &j) in idx.iter().enumerate() {
                            g[i * c + j] = g[i * c + j] + dy[i * k + jj];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (out.rows(), out.cols());
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let g = slot(&mut grads, &self.nodes, *p);
                        for i in 0..r {
                            accumulate(
                                &mut g[i * c..(i + 1) * c],
                                &dy[i * total + offset..i * total + offset + c],
                                T::one(),
                            );
                        }
                        offset += c;
                    }
                }
                Op::LogSumExpRows(x) => {
                    let src = self.value(*x);
                    let c = src.cols();
                    let g = slot(&mut grads, &self.nodes, *x);
                    for (i, (gchunk, xchunk)) in
                        g.chunks_mut(c).zip(src.data().chunks(c)).enumerate()
                    {
                        let lse = out.data()[i];
                        for (gv, &v) in gchunk.iter_mut().zip(xchunk) {
                            *gv = *gv + dy[i] * (v - lse).exp();
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let src = self.value(*logits);
                    let c = src.cols();
                    let g = slot(&mut grads, &self.nodes, *logits);
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let row = src.row(i);
                        let lse = logsumexp(row);
                        let scale = dy[0] * w;
                        let gchunk = &mut g[i * c..(i + 1) * c];
                        for (gv, &v) in gchunk.iter_mut().zip(row) {
                            *gv = *gv + scale * (v - lse).exp();
                        }
                        gchunk[t] = gchunk[t] - scale;
                    }
                }
                Op::Sum(x) => {
                    let g = slot(&mut grads, &self.nodes, *x);
                    for gv in g.iter_mut() {
                        *gv = *gv + dy[0];
                    }
                }
            }
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    /// Adds the gradients of every parameter on this tape into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (name, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                store.accumulate_grad(name, g);
            }
        }
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T], s: T) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, input: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.wrt(x).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..input.numel() {
            let mut p = input.clone();
            p.data_mut()[i] += h;
            let mut m = input.clone();
            m.data_mut()[i] -= h;
            let f = |t: Tensor<f64>| {
                let mut g = Graph::new();
                let x = g.constant(t);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let numeric = (f(p) - f(m)) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-6, "entry {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }

    fn sample() -> Tensor<f64> {
        Tensor::from_f64_rows(&[&[0.3, -1.2, 0.7], &[1.1, 0.4, -0.5], &[-0.9, 0.2, 0.6]]).unwrap()
    }

    fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Var {
        let (r, c) = g.shape(y);
        let w: Vec<f64> = (0..r * c).map(|i| 0.37 * i as f64 - 1.1).collect();
        let w = g.constant(Tensor::new(vec![r, c], w).unwrap());
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        fd_check(
            |g, x| {
                let t = g.transpose(x);
                let m = g.matmul(x, t);
                let mt = g.matmul_t(m, x);
                let s = g.sub(mt, x);
                let p = g.mul(s, x);
                let sc = g.scale(p, 0.5);
                weighted_sum(g, sc)
            },
            sample(),
        );
    }

    #[test]
    fn softmax_and_causal_gradients() {
        for causal in [false, true] {
            fd_check(
                move |g, x| {
                    let s = g.softmax_rows(x, 1.7, causal);
                    weighted_sum(g, s)
                },
                sample(),
            );
        }
    }

    #[test]
    fn normalization_gradients() {
        fd_check(
            |g, x| {
                let n = g.l2_normalize_rows(x, 1e-12);
                weighted_sum(g, n)
            },
            sample(),
        );
        fd_check(
            |g, x| {
                let n = g.layer_norm_rows(x, 1e-5);
                weighted_sum(g, n)
            },
            sample(),
        );
        fd_check(
            |g, x| {
                let n = g.gelu(x);
                weighted_sum(g, n)
            },
            sample(),
        );
    }

    #[test]
    fn reduction_and_gather_gradients() {
        fd_check(
            |g, x| {
                let m = g.mean_rows(x);
                let r = g.add_row(x, m);
                let q = g.mul_row(r, m);
                let s = g.sum_cols(q);
                let sel = g.select_rows(x, &[2, 0, 2]);
                let cols = g.select_cols(sel, &[1, 1, 0]);
                let cat = g.concat_rows(&[cols, x]);
                let cc = g.concat_cols(&[cat, cat]);
                let l = g.logsumexp_rows(cc);
                let a = weighted_sum(g, l);
                let b = weighted_sum(g, s);
                let both = g.add(a, b);
                g.scale(both, 1.0)
            },
            sample(),
        );
    }

    #[test]
    fn division_and_cross_entropy_gradients() {
        fd_check(
            |g, x| {
                let d = g.select_cols(x, &[0]);
                let sq = g.mul(d, d);
                let one = g.constant(Tensor::full(&[3, 1], 1.0));
                let den = g.add(sq, one);
                let q = g.div_by_col(x, den);
                g.cross_entropy(q, &[2, 0, 1], &[1.0, 0.0, 2.5])
            },
            sample(),
        );
    }

    #[test]
    fn uniform_cross_entropy_gradient_on_true_class() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 10]));
        let loss = g.cross_entropy(logits, &[3], &[1.0]);
        assert!((g.value(loss).item() - 10f64.ln()).abs() < 1e-12);
        let grads = g.backward(loss);
        let gl = grads.wrt(logits).unwrap();
        assert!((gl[3] - (0.1 - 1.0)).abs() < 1e-12);
        assert!((gl[0] - 0.1).abs() < 1e-12);
    }
}
