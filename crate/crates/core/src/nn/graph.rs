use std::collections::HashMap;
use std::rc::Rc;

use super::{NnError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-8;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// `a[.., k] · b[k, n]`
    MatMul(Var, Var),
    /// `a[.., k] · b[n, k]ᵀ`
    MatMulBt(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedFill {
        a: Var,
        mask: Rc<[bool]>,
    },
    /// `out[i] = a[source[i]]`; covers max-reductions, embedding lookups and
    /// axis permutations.
    Gather {
        a: Var,
        source: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// `C (+)= A·B` for strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every output element of a broadcast, the flat source index into `a`
/// and into `b`.
fn broadcast_indices(out: &[usize], a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = out.len();
    let strides = |shape: &[usize]| {
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            let oi = i + rank - shape.len();
            s[oi] = if shape[i] == 1 { 0 } else { acc };
            acc *= shape[i];
        }
        s
    };
    let (sa, sb) = (strides(a), strides(b));
    let total: usize = out.iter().product();
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        ia.push(oa);
        ib.push(ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    (ia, ib)
}

enum Layout {
    Same,
    /// `b` repeats along the leading axes of `a`.
    Suffix(usize),
    General(Vec<usize>, Vec<usize>),
}

fn layout(out: &[usize], a: &[usize], b: &[usize]) -> Layout {
    if a == b {
        Layout::Same
    } else if a == out && b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Layout::Suffix(b.iter().product())
    } else {
        let (ia, ib) = broadcast_indices(out, a, b);
        Layout::General(ia, ib)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(src: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (row, dst) in src.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad =
            matches!(op, Op::Param(_)) || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Brings a trainable tensor onto the tape; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.params.insert(id, v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NnError {
        NnError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[.., k] · b[k, n] → [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[.., k] · b[n, k]ᵀ → [.., n]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[1] {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let (n, k) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (1, k),
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]ᵀ`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.shape_err("bmm", a, b));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(self.shape_err("bmm", a, b));
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            &[a, b],
        ))
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| self.shape_err(name, a, b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = match layout(&shape, self.shape(a), self.shape(b)) {
            Layout::Same => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            Layout::Suffix(period) => va
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, vb[i % period]))
                .collect(),
            Layout::General(ia, ib) => ia.iter().zip(&ib).map(|(i, j)| f(va[*i], vb[*j])).collect(),
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, &[a, b]))
    }

    /// Elementwise sum with broadcasting over trailing-aligned axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(&shape, out).expect("same shape"),
            Op::Scale(a, s),
            &[a],
        )
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|v| f(*v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).expect("same shape"), op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Var {
        let width = self.value(a).last_dim();
        let out = softmax_rows(self.value(a).data(), width);
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(&shape, out).expect("same shape"),
            Op::Softmax(a),
            &[a],
        )
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let width = self.value(x).last_dim();
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / width;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..width {
                let h = (row[j] - mean) * s;
                xhat[r * width + j] = h;
                out[r * width + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Sets entries to `value` wherever `mask` is true. The mask covers the
    /// trailing block of `a` (e.g. the last two axes) and repeats over the rest.
    pub fn masked_fill(&mut self, a: Var, mask: Rc<[bool]>, value: f64) -> Result<Var, NnError> {
        let total = self.value(a).numel();
        if mask.is_empty() || !total.is_multiple_of(mask.len()) {
            return Err(NnError::Shape {
                op: "masked_fill",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let period = mask.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if mask[i % period] { value } else { *v })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaskedFill { a, mask }, &[a]))
    }

    fn gather(&mut self, a: Var, source: Vec<usize>, shape: &[usize]) -> Result<Var, NnError> {
        let src = self.value(a).data();
        let out = source.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { a, source }, &[a]))
    }

    /// Maximum over `axis`, which is removed. Ties go to the first index,
    /// and so does the gradient.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, NnError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(NnError::Index {
                op: "max_axis",
                index: axis,
                size: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = self.value(a).data();
        let mut source = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for j in 1..len {
                    let idx = base + j * inner;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                source.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.gather(a, source, &out_shape)
    }

    /// Column-wise maximum over consecutive row segments of a matrix:
    /// segment `s` covers rows `offsets[s]..offsets[s+1]`. Output is
    /// `[segments, cols]`.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Result<Var, NnError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || offsets.len() < 2 || *offsets.last().unwrap() != shape[0] {
            return Err(NnError::Shape {
                op: "segment_max",
                lhs: shape,
                rhs: offsets.to_vec(),
            });
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(NnError::Invalid(
                "segment_max: every segment needs at least one row".into(),
            ));
        }
        let cols = shape[1];
        let src = self.value(a).data();
        let mut source = Vec::with_capacity((offsets.len() - 1) * cols);
        for w in offsets.windows(2) {
            for c in 0..cols {
                let mut best = w[0] * cols + c;
                for r in w[0] + 1..w[1] {
                    let idx = r * cols + c;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                source.push(best);
            }
        }
        self.gather(a, source, &[offsets.len() - 1, cols])
    }

    /// Rows of `table[V, C]` selected by `ids`; output shape `ids_shape + [C]`.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        ids_shape: &[usize],
    ) -> Result<Var, NnError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(NnError::Shape {
                op: "embedding",
                lhs: shape,
                rhs: ids_shape.to_vec(),
            });
        }
        let (vocab, width) = (shape[0], shape[1]);
        let mut source = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(NnError::Index {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            source.extend(id * width..(id + 1) * width);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(width);
        self.gather(table, source, &out_shape)
    }

    /// `[A, B, C, D] → [A, C, B, D]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var, NnError> {
        let shape = self.shape(a).to_vec();
        let [d0, d1, d2, d3] = shape[..] else {
            return Err(NnError::Shape {
                op: "swap_axes12",
                lhs: shape,
                rhs: vec![],
            });
        };
        let mut source = Vec::with_capacity(d0 * d1 * d2 * d3);
        for i in 0..d0 {
            for k in 0..d2 {
                for j in 0..d1 {
                    let base = ((i * d1 + j) * d2 + k) * d3;
                    source.extend(base..base + d3);
                }
            }
        }
        self.gather(a, source, &[d0, d2, d1, d3])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the rows whose target differs from `ignore`. Zero when every row is
    /// ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: usize,
    ) -> Result<Var, NnError> {
        let width = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / width.max(1);
        if targets.len() != rows {
            return Err(NnError::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let probs = softmax_rows(self.value(logits).data(), width);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= width {
                return Err(NnError::Index {
                    op: "cross_entropy",
                    index: t,
                    size: width,
                });
            }
            let row = &self.value(logits).data()[r * width..(r + 1) * width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore,
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse pass from a scalar. Returns one gradient per parameter of
    /// `store`, zero for parameters the loss does not reach.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Vec<Tensor>, NnError> {
        let lt = self.value(loss);
        let Some(l) = lt
            .item()
            .filter(|_| lt.shape().is_empty() || lt.numel() == 1)
        else {
            return Err(NnError::NonScalarLoss(lt.shape().to_vec()));
        };
        if !l.is_finite() {
            return Err(NnError::NonFiniteLoss(l));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();

        for i in (0..=loss.0).rev() {
            let Some(dout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &dout, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(
        &self,
        node: &Node,
        dout: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut [Tensor],
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (g, d) in out[id.index()].data_mut().iter_mut().zip(dout) {
                    *g += d;
                }
            }
            Op::MatMul(a, b) => {
                let sb = self.nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let rows = self.nodes[a.0].value.numel() / k.max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(rows, n, k, dout, (n, 1), val(*b), (1, n), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, rows, n, val(*a), (1, k), dout, (n, 1), gb, true);
                }
            }
            Op::MatMulBt(a, b) => {
                let sb = self.nodes[b.0].value.shape();
                let (n, k) = (sb[0], sb[1]);
                let rows = self.nodes[a.0].value.numel() / k.max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(rows, n, k, dout, (n, 1), val(*b), (k, 1), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(n, rows, k, dout, (1, n), val(*a), (k, 1), gb, true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ (or dC · B when B was transposed)
                    let strides = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &dout[i * mn..(i + 1) * mn],
                            (n, 1),
                            &vb[i * kn..(i + 1) * kn],
                            strides,
                            &mut ga[i * mk..(i + 1) * mk],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let (ab, db, gbb) = (
                            &va[i * mk..(i + 1) * mk],
                            &dout[i * mn..(i + 1) * mn],
                            &mut gb[i * kn..(i + 1) * kn],
                        );
                        if *trans_b {
                            // dB[n, k] = dCᵀ · A
                            gemm(n, m, k, db, (1, n), ab, (k, 1), gbb, true);
                        } else {
                            // dB[k, n] = Aᵀ · dC
                            gemm(k, m, n, ab, (1, k), db, (n, 1), gbb, true);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let lay = layout(node.value.shape(), sa, sb);
                let (va, vb) = (val(*a), val(*b));
                let index = |o: usize| -> (usize, usize) {
                    match &lay {
                        Layout::Same => (o, o),
                        Layout::Suffix(p) => (o, o % p),
                        Layout::General(ia, ib) => (ia[o], ib[o]),
                    }
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, d) in dout.iter().enumerate() {
                        let (i, j) = index(o);
                        ga[i] += if is_mul { d * vb[j] } else { *d };
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, d) in dout.iter().enumerate() {
                        let (i, j) = index(o);
                        gb[j] += if is_mul { d * va[i] } else { *d };
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(dout).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::Tanh(a) | Op::Gelu(a) | Op::Relu(a) | Op::Exp(a) | Op::Log(a) => {
                let (x, y) = (val(*a), node.value.data());
                let deriv: Box<dyn Fn(usize) -> f64> = match node.op {
                    Op::Tanh(_) => Box::new(|i| 1.0 - y[i] * y[i]),
                    Op::Gelu(_) => Box::new(|i| gelu_grad(x[i])),
                    Op::Relu(_) => Box::new(|i| if x[i] > 0.0 { 1.0 } else { 0.0 }),
                    Op::Exp(_) => Box::new(|i| y[i]),
                    _ => Box::new(|i| 1.0 / x[i]),
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, d) in dout.iter().enumerate() {
                        ga[i] += d * deriv(i);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let width = node.value.last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((yr, dr), gr) in y
                        .chunks(width)
                        .zip(dout.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for j in 0..width {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let width = node.value.last_dim();
                let g = val(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (h, d) in xhat.chunks(width).zip(dout.chunks(width)) {
                        for j in 0..width {
                            gg[j] += d[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for d in dout.chunks(width) {
                        for j in 0..width {
                            gb[j] += d[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; width];
                    for (r, s) in rstd.iter().enumerate() {
                        let h = &xhat[r * width..(r + 1) * width];
                        let d = &dout[r * width..(r + 1) * width];
                        for j in 0..width {
                            dxhat[j] = d[j] * g[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / width as f64;
                        let mean_dh =
                            dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        let gr = &mut gx[r * width..(r + 1) * width];
                        for j in 0..width {
                            gr[j] += s * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                let period = mask.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, d) in dout.iter().enumerate() {
                        if !mask[i % period] {
                            ga[i] += d;
                        }
                    }
                }
            }
            Op::Gather { a, source } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (&s, d) in source.iter().zip(dout) {
                        ga[s] += d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let width = self.nodes[logits.0].value.last_dim();
                let scale = dout[0] / *count as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut gl[r * width..(r + 1) * width];
                        for j in 0..width {
                            row[j] += scale * probs[r * width + j];
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let d = if matches!(node.op, Op::Mean(_)) {
                    dout[0] / n.max(1) as f64
                } else {
                    dout[0]
                };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
            }
        }
    }
}
