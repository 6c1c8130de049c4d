//! A small tape-based reverse-mode differentiator over `f64` tensors.
//!
//! Every forward computation records its nodes on a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every parameter that was read
//! through [`Graph::param`]. Image tensors use the NHWC layout throughout.

mod conv;

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn, Zip};

use crate::params::{ParamId, ParamStore};

pub use conv::conv_output_len;

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: (usize, usize),
}

impl Conv2dSpec {
    /// Stride-`stride` convolution with "same"-style padding for a
    /// `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize, stride: usize) -> Self {
        Self {
            stride,
            pad: (kh / 2, kw / 2),
        }
    }
}

enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Softplus(Var),
    Mean(Var),
    Sum(Var),
    LogMeanExp(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, usize, Vec<usize>),
    MeanAxis(Var, usize),
    Expand(Var),
    PairwiseAdd(Var, Var),
    RowOuter(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        spec: Conv2dSpec,
    },
    Upsample2x(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    vars: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter; `None` when the parameter did not take part
    /// in the differentiated computation.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    /// Drops the gradients of parameters for which `keep` is false.
    pub fn retain_params(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.params.retain(|id, _| keep(*id));
    }

    /// Euclidean norm over every parameter gradient, summed in parameter order.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so the global norm is at most `max_norm`; returns
    /// the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.params.values_mut() {
                g.mapv_inplace(|x| x * s);
            }
        }
        norm
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scalar(x: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), x)
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape());
        *t.iter().next().expect("one element")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Constant)
    }

    /// Reads a parameter onto the tape. Repeated reads within one graph share
    /// a node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape mismatch");
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x);
        let n = *xs.last().expect("bias on scalar");
        assert_eq!(self.shape(b), &[n], "bias length mismatch");
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddBias(x, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let av = as2(self.value(a));
            let bv = as2(self.value(b));
            assert_eq!(
                av.ncols(),
                bv.nrows(),
                "matmul inner dims {:?} x {:?}",
                av.shape(),
                bv.shape()
            );
            av.dot(&bv).into_dyn()
        };
        self.push(v, Op::MatMul(a, b))
    }

    /// Affine map over the last axis: `x[..., i] W[i, o] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().expect("linear on scalar");
        let rows = shape.iter().product::<usize>() / d_in.max(1);
        let x2 = self.reshape(x, &[rows, d_in]);
        let mut y = self.matmul(x2, w);
        if let Some(b) = b {
            y = self.add_bias(y, b);
        }
        let d_out = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = d_out;
        self.reshape(y, &out_shape)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `log(1 + e^x)`, evaluated without overflow for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// `log(mean(exp(a)))` over every element, with max subtraction.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        let s: f64 = t.iter().map(|x| (x - m).exp()).sum();
        let v = scalar(m + (s / t.len() as f64).ln());
        self.push(v, Op::LogMeanExp(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(
            t.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            t.shape(),
            shape
        );
        let v = t
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut shape = self.shape(parts[0]).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let mut blocks = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            assert!(
                s.len() == shape.len() && s[..axis] == shape[..axis] && s[axis + 1..] == shape[axis + 1..],
                "concat shapes disagree off-axis"
            );
            blocks.push(self.value(*p).as_standard_layout());
        }
        shape[axis] = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for b in &blocks {
                let d = b.as_slice().expect("standard layout");
                let chunk = d.len() / outer.max(1);
                out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("concat shape");
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    /// Selects entries along axis 0: `out[i] = a[index[i]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Var {
        self.gather_axis(a, 0, index)
    }

    /// Selects entries along `axis`; indices may repeat.
    pub fn gather_axis(&mut self, a: Var, axis: usize, index: &[usize]) -> Var {
        let v = self
            .value(a)
            .select(Axis(axis), index)
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::Gather(a, axis, index.to_vec()))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(axis))
            .expect("non-empty axis");
        self.push(v, Op::MeanAxis(a, axis))
    }

    /// Inserts a new axis 1 of length `n`, copying the input along it:
    /// `[B, C] -> [B, n, C]`.
    pub fn expand(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        let mut shape = t.shape().to_vec();
        shape.insert(1, n);
        let v = t
            .view()
            .insert_axis(Axis(1))
            .broadcast(IxDyn(&shape))
            .expect("broadcastable")
            .to_owned()
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::Expand(a))
    }

    /// `out[b, n, m, h] = a[b, n, h] + c[b, m, h]`.
    pub fn pairwise_add(&mut self, a: Var, c: Var) -> Var {
        let (sa, sc) = (self.shape(a).to_vec(), self.shape(c).to_vec());
        assert_eq!(sa.len(), 3, "pairwise_add expects [B, N, H]");
        assert!(
            sa[0] == sc[0] && sa[2] == sc[2],
            "pairwise_add {sa:?} vs {sc:?}"
        );
        let (b, n, m, h) = (sa[0], sa[1], sc[1], sa[2]);
        let av = self.value(a).as_standard_layout();
        let cv = self.value(c).as_standard_layout();
        let (ad, cd) = (av.as_slice().expect("std"), cv.as_slice().expect("std"));
        let mut out = vec![0.0; b * n * m * h];
        for bi in 0..b {
            for ni in 0..n {
                let ar = &ad[(bi * n + ni) * h..(bi * n + ni + 1) * h];
                for mi in 0..m {
                    let cr = &cd[(bi * m + mi) * h..(bi * m + mi + 1) * h];
                    let o = ((bi * n + ni) * m + mi) * h;
                    for k in 0..h {
                        out[o + k] = ar[k] + cr[k];
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, n, m, h]), out).expect("shape");
        self.push(v, Op::PairwiseAdd(a, c))
    }

    /// `out[b, :] = weights[b] * d` for a vector `d`.
    pub fn row_outer(&mut self, d: Var, weights: &[f64]) -> Var {
        let dv = self.value(d);
        assert_eq!(dv.ndim(), 1, "row_outer expects a vector");
        let c = dv.len();
        let mut out = Array2::zeros((weights.len(), c));
        for (mut row, &w) in out.rows_mut().into_iter().zip(weights) {
            for (o, &x) in row.iter_mut().zip(dv.iter()) {
                *o = w * x;
            }
        }
        self.push(out.into_dyn(), Op::RowOuter(d, weights.to_vec()))
    }

    /// 2-D convolution, NHWC input `[B, H, W, Ci]`, kernel `[kh, kw, Ci, Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let value = conv::forward(self.value(x), self.value(w), spec);
        self.push(value, Op::Conv2d { x, w, spec })
    }

    /// Nearest-neighbour 2x upsampling of an NHWC tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = conv::upsample2x(self.value(x));
        self.push(v, Op::Upsample2x(x))
    }

    /// Mean categorical cross-entropy of `logits [R, K]` against integer labels.
    /// Labels must already be validated to lie in `0..K`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = as2(self.value(logits));
        let (r, k) = lv.dim();
        assert_eq!(r, labels.len(), "one label per logit row");
        let mut probs = Array2::zeros((r, k));
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[i]];
            for j in 0..k {
                probs[[i, j]] = (row[j] - lse).exp();
            }
        }
        let v = scalar(total / r as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward from a non-scalar node"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::AddBias(x, b) => {
                    let n = self.shape(*b)[0];
                    let rows = g.len() / n.max(1);
                    let gb = g
                        .as_standard_layout()
                        .into_shape_with_order((rows, n))
                        .expect("contiguous")
                        .sum_axis(Axis(0))
                        .into_dyn();
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g.clone());
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    let ga = g2.dot(&as2(self.value(*b)).t()).into_dyn();
                    let gb = as2(self.value(*a)).t().dot(&g2).into_dyn();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let s = g.iter().next().copied().unwrap_or(0.0) / t.len() as f64;
                    acc(&mut grads, *a, ArrayD::from_elem(t.raw_dim(), s));
                }
                Op::Sum(a) => {
                    let t = self.value(*a);
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    acc(&mut grads, *a, ArrayD::from_elem(t.raw_dim(), s));
                }
                Op::LogMeanExp(a) => {
                    let t = self.value(*a);
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    let m = t.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                    let e = t.mapv(|x| (x - m).exp());
                    let z = e.sum();
                    acc(&mut grads, *a, e * (s / z));
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    let ga = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("contiguous");
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let outer: usize = g.shape()[..*axis].iter().product();
                    let gs = g.as_standard_layout();
                    let gd = gs.as_slice().expect("standard layout");
                    let row = gd.len() / outer.max(1);
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.shape(*p);
                        let chunk = shape.iter().product::<usize>() / outer.max(1);
                        let mut piece = Vec::with_capacity(chunk * outer);
                        for o in 0..outer {
                            piece.extend_from_slice(&gd[o * row + offset..o * row + offset + chunk]);
                        }
                        offset += chunk;
                        let piece = ArrayD::from_shape_vec(IxDyn(shape), piece).expect("piece shape");
                        acc(&mut grads, *p, piece);
                    }
                }
                Op::Gather(a, axis, index) => {
                    let mut ga = ArrayD::zeros(self.value(*a).raw_dim());
                    for (i, &src) in index.iter().enumerate() {
                        let mut dst = ga.index_axis_mut(Axis(*axis), src);
                        dst += &g.index_axis(Axis(*axis), i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.shape(*a).to_vec();
                    let n = shape[*axis] as f64;
                    let ga = (&g / n)
                        .insert_axis(Axis(*axis))
                        .broadcast(IxDyn(&shape))
                        .expect("broadcast")
                        .to_owned()
                        .as_standard_layout()
                        .into_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Expand(a) => acc(&mut grads, *a, g.sum_axis(Axis(1))),
                Op::PairwiseAdd(a, c) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(2)));
                    acc(&mut grads, *c, g.sum_axis(Axis(1)));
                }
                Op::RowOuter(d, weights) => {
                    let g2 = as2(&g);
                    let mut gd = ndarray::Array1::zeros(g2.ncols());
                    for (row, &w) in g2.rows().into_iter().zip(weights) {
                        gd.scaled_add(w, &row);
                    }
                    acc(&mut grads, *d, gd.into_dyn());
                }
                Op::Conv2d { x, w, spec } => {
                    let (gx, gw) = conv::backward(&g, self.value(*x), self.value(*w), *spec);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::Upsample2x(x) => acc(&mut grads, *x, conv::upsample2x_backward(&g)),
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = g.iter().next().copied().unwrap_or(0.0) / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[[i, l]] -= 1.0;
                    }
                    gl *= s;
                    acc(&mut grads, *logits, gl.into_dyn());
                }
            }
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (id, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.insert(*id, g.clone());
            }
        }
        Gradients {
            vars: grads,
            params,
        }
    }
}
