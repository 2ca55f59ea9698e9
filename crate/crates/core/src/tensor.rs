//! Dense row-major tensors with a reverse-mode tape.
//!
//! Values are stored in the tensor's scalar type (`f32` by default); every
//! reduction and every gradient is accumulated in `f64`. Tape operations work
//! on rank-2 values; a rank-1 tensor of length `n` is treated as `[1, n]`.

use std::collections::HashMap;
use std::fmt::Debug;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Scalar storage type for tensors.
pub trait Real: Copy + Debug + Default + PartialEq + PartialOrd + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    const NAME: &'static str;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![T::default(); shape.iter().product()])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Tensor::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view used by tape operations.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("tape tensors are rank <= 2, got {other:?}"),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }
}

/// Parameter initialization rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Normal(f64),
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: Init,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds an initialized tensor. Panics on duplicate names.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
            }
            Init::Zeros => vec![T::default(); n],
        };
        self.insert(name, Tensor::new(shape.to_vec(), data), init)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            init,
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    init: e.init,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

/// Parameter gradients, aligned with a [`Params`] set, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like<T: Real>(params: &Params<T>) -> Self {
        Grads {
            values: params
                .entries
                .iter()
                .map(|e| vec![0.0; e.tensor.len()])
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    StopGrad,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Row(Var, usize),
    Stack(Vec<Var>),
    Gather(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SelectCols(Var, Vec<usize>),
    Reshape(Var),
    PickSum(Var, Vec<(usize, usize)>),
    Sum(Var),
    Gru(Box<GruRecord>),
}

/// Saved activations of a fused recurrent pass, each `[T, h]` in time order.
#[derive(Debug, Clone)]
struct GruRecord {
    x: Var,
    /// `wz, wr, wn, uz, ur, un, bz, br, bn`.
    w: [Var; 9],
    reverse: bool,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    h_prev: Vec<f64>,
}

/// `out[j] += sum_i v[i] * m[i, j]` for row-major `m: [len(v), n]`.
fn vec_mat_acc<T: Real>(v: &[f64], m: &[T], n: usize, out: &mut [f64]) {
    for (i, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(&m[i * n..(i + 1) * n]) {
            *o += x * w.to_f64();
        }
    }
}

/// `out[i] += sum_j m[i, j] * g[j]`, i.e. `g` times the transpose of `m`.
fn mat_vec_acc<T: Real>(m: &[T], g: &[f64], out: &mut [f64]) {
    let n = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += m[i * n..(i + 1) * n]
            .iter()
            .zip(g)
            .map(|(w, x)| w.to_f64() * x)
            .sum::<f64>();
    }
}

/// `out[i, j] += a[i] * b[j]`.
fn outer_acc(a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = b.len();
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
            *o += x * y;
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p, T: Real = f32> {
    params: &'p Params<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p Params<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p Params<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_f64(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        let value = value.into_iter().map(T::from_f64).collect();
        self.push(rows, cols, value, op)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value_f64(&self, v: Var) -> Vec<f64> {
        self.value(v).iter().map(|x| x.to_f64()).collect()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.dims(v), (1, 1), "not a scalar");
        self.value(v)[0].to_f64()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.dims(v);
        Tensor::new(vec![r, c], self.value(v).to_vec())
    }

    /// Constant input; gradients are still reported for it.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        let (r, c) = t.dims();
        self.push(r, c, t.data().to_vec(), Op::Leaf)
    }

    pub fn input_f64(&mut self, rows: usize, cols: usize, values: &[f64]) -> Var {
        self.push_f64(rows, cols, values.to_vec(), Op::Leaf)
    }

    /// Parameter leaf; repeated uses share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let (r, c) = t.dims();
        let v = self.push(r, c, t.data().to_vec(), Op::Param);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).to_vec();
        self.push(r, c, value, Op::StopGrad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for p in 0..k {
                let x = av[i * k + p].to_f64();
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (s, &y) in acc.iter_mut().zip(brow) {
                    *s += x * y.to_f64();
                }
            }
            out.extend(acc.iter().map(|&s| T::from_f64(s)));
        }
        self.push(m, n, out, Op::MatMul(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let dims = self.dims(a);
        assert_eq!(dims, self.dims(b), "elementwise shape mismatch");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(x.to_f64(), y.to_f64()))
            .collect();
        self.push_f64(dims.0, dims.1, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[1, n]` row to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(row), (1, n), "broadcast row shape");
        let rv = self.value_f64(row);
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x.to_f64() + rv[i % n])
            .collect();
        self.push_f64(m, n, out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.to_f64() * c).collect();
        self.push_f64(m, n, out, Op::Scale(a, c))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|x| f(x.to_f64())).collect();
        self.push_f64(m, n, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Column-wise concatenation of equally tall values.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, rows, "concat row mismatch");
                c
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        self.push(rows, cols, out, Op::Concat(parts.to_vec()))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(i < m, "row {i} of {m}");
        let out = self.nodes[a.0].value[i * n..(i + 1) * n].to_vec();
        self.push(1, n, out, Op::Row(a, i))
    }

    /// Stacks `[1, n]` rows into `[len, n]`.
    pub fn stack(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack of nothing");
        let n = self.dims(rows[0]).1;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert_eq!(self.dims(r), (1, n), "stack expects equal rows");
            out.extend_from_slice(&self.nodes[r.0].value);
        }
        self.push(rows.len(), n, out, Op::Stack(rows.to_vec()))
    }

    /// Row gather from an embedding table. Panics on out-of-range ids; see
    /// [`Tape::try_embed`].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        self.try_embed(table, ids).expect("embedding id in range")
    }

    pub fn try_embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, usize> {
        let (v, d) = self.dims(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(id);
            }
            out.extend_from_slice(&self.nodes[table.0].value[id * d..(id + 1) * d]);
        }
        Ok(self.push(ids.len(), d, out, Op::Gather(table, ids.to_vec())))
    }

    /// Column-wise max over rows, `[m, n] -> [1, n]`. Ties pick the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        assert!(m >= 1, "max over zero rows");
        let v = &self.nodes[a.0].value;
        let mut arg = vec![0usize; n];
        let mut out: Vec<T> = v[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                if v[i * n + j] > out[j] {
                    out[j] = v[i * n + j];
                    arg[j] = i;
                }
            }
        }
        self.push(1, n, out, Op::MaxRows(a, arg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = self.value_f64(a);
        let out = v.chunks(n.max(1)).flat_map(softmax_row).collect();
        self.push_f64(m, n, out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = self.value_f64(a);
        let out = v.chunks(n.max(1)).flat_map(log_softmax_row).collect();
        self.push_f64(m, n, out, Op::LogSoftmaxRows(a))
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let (m, n) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            for &c in cols {
                assert!(c < n, "column {c} of {n}");
                out.push(v[i * n + c]);
            }
        }
        self.push(m, cols.len(), out, Op::SelectCols(a, cols.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(m * n, rows * cols, "reshape size");
        let out = self.value(a).to_vec();
        self.push(rows, cols, out, Op::Reshape(a))
    }

    /// Sum of the selected `(row, col)` entries as a scalar.
    pub fn pick_sum(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let (m, n) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let s: f64 = at
            .iter()
            .map(|&(r, c)| {
                assert!(r < m && c < n, "pick ({r},{c}) outside [{m},{n}]");
                v[r * n + c].to_f64()
            })
            .sum();
        self.push_f64(1, 1, vec![s], Op::PickSum(a, at.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.to_f64()).sum();
        self.push_f64(1, 1, vec![s], Op::Sum(a))
    }

    /// Fused gated recurrent pass over `x: [T, d]`, returning `[T, h]` in time
    /// order. `w` holds `wz, wr, wn: [d, h]`, `uz, ur, un: [h, h]` and
    /// `bz, br, bn: [1, h]`; the gate convention matches the composed form
    /// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
    /// `c = tanh(x Wn + (r * h) Un + bn)`, `h' = (1 - z) h + z c`, `h0 = 0`.
    pub fn gru_seq(&mut self, x: Var, w: [Var; 9], reverse: bool) -> Var {
        let (steps, d) = self.dims(x);
        let h = self.dims(w[3]).0;
        for (k, &v) in w.iter().enumerate() {
            let want = match k {
                0..=2 => (d, h),
                3..=5 => (h, h),
                _ => (1, h),
            };
            assert_eq!(self.dims(v), want, "recurrent weight {k} shape");
        }
        let val = |v: Var| &self.nodes[v.0].value;
        let xv = val(x);
        let mut rec = GruRecord {
            x,
            w,
            reverse,
            z: vec![0.0; steps * h],
            r: vec![0.0; steps * h],
            c: vec![0.0; steps * h],
            h_prev: vec![0.0; steps * h],
        };
        let mut out = vec![0.0f64; steps * h];
        let mut state = vec![0.0f64; h];
        let mut xt = vec![0.0f64; d];
        let (mut az, mut ar, mut an) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let mut rh = vec![0.0; h];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            for (o, v) in xt.iter_mut().zip(&xv[t * d..(t + 1) * d]) {
                *o = v.to_f64();
            }
            for (a, b) in [(&mut az, w[6]), (&mut ar, w[7]), (&mut an, w[8])] {
                for (o, v) in a.iter_mut().zip(val(b)) {
                    *o = v.to_f64();
                }
            }
            vec_mat_acc(&xt, val(w[0]), h, &mut az);
            vec_mat_acc(&xt, val(w[1]), h, &mut ar);
            vec_mat_acc(&xt, val(w[2]), h, &mut an);
            vec_mat_acc(&state, val(w[3]), h, &mut az);
            vec_mat_acc(&state, val(w[4]), h, &mut ar);
            let row = t * h..(t + 1) * h;
            for j in 0..h {
                rec.z[row.start + j] = sigmoid(az[j]);
                rec.r[row.start + j] = sigmoid(ar[j]);
                rh[j] = rec.r[row.start + j] * state[j];
            }
            vec_mat_acc(&rh, val(w[5]), h, &mut an);
            rec.h_prev[row.clone()].copy_from_slice(&state);
            for j in 0..h {
                let c = an[j].tanh();
                let z = rec.z[row.start + j];
                rec.c[row.start + j] = c;
                state[j] += z * (c - state[j]);
            }
            out[row].copy_from_slice(&state);
        }
        self.push_f64(steps, h, out, Op::Gru(Box::new(rec)))
    }

    /// Summed cross-entropy of row-wise logits against `(row, target)` pairs.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let logp = self.log_softmax_rows(logits);
        let picked = self.pick_sum(logp, targets);
        self.scale(picked, -1.0)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.dims(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            let len = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Leaf | Op::Param | Op::StopGrad => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = node.cols;
                    let (av, bv) = (val(*a), val(*b));
                    {
                        let ga = acc(&mut grads, *a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let s: f64 =
                                    grow.iter().zip(brow).map(|(x, y)| x * y.to_f64()).sum();
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p].to_f64();
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += x);
                    acc(&mut grads, *b, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += sign * x);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    {
                        let ga = acc(&mut grads, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i].to_f64();
                        }
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i].to_f64();
                    }
                }
                Op::AddRow(a, row) => {
                    let n = node.cols;
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += x);
                    let gr = acc(&mut grads, *row, n);
                    for (i, x) in g.iter().enumerate() {
                        gr[i % n] += x;
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += c * x);
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (i, y) in node.value.iter().enumerate() {
                        let y = y.to_f64();
                        ga[i] += g[i] * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (i, y) in node.value.iter().enumerate() {
                        let y = y.to_f64();
                        ga[i] += g[i] * (1.0 - y * y);
                    }
                }
                Op::Concat(parts) => {
                    let cols = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].cols;
                        let gp = acc(&mut grads, p, node.rows * w);
                        for i in 0..node.rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * cols + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::Row(a, i) => {
                    let n = node.cols;
                    let ga = acc(&mut grads, *a, len(*a));
                    for (d, x) in ga[i * n..(i + 1) * n].iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Stack(rows) => {
                    let n = node.cols;
                    for (i, &r) in rows.iter().enumerate() {
                        let gr = acc(&mut grads, r, n);
                        for (d, x) in gr.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += x;
                        }
                    }
                }
                Op::Gather(table, ids) => {
                    let d = node.cols;
                    let gt = acc(&mut grads, *table, len(*table));
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                }
                Op::MaxRows(a, arg) => {
                    let n = node.cols;
                    let ga = acc(&mut grads, *a, len(*a));
                    for (j, &i) in arg.iter().enumerate() {
                        ga[i * n + j] += g[j];
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = node.cols;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..node.rows {
                        let y = &node.value[i * n..(i + 1) * n];
                        let gy = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gy).map(|(y, g)| y.to_f64() * g).sum();
                        for j in 0..n {
                            ga[i * n + j] += y[j].to_f64() * (gy[j] - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let n = node.cols;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..node.rows {
                        let y = &node.value[i * n..(i + 1) * n];
                        let gy = &g[i * n..(i + 1) * n];
                        let total: f64 = gy.iter().sum();
                        for j in 0..n {
                            ga[i * n + j] += gy[j] - y[j].to_f64().exp() * total;
                        }
                    }
                }
                Op::SelectCols(a, cols) => {
                    let (_, n) = self.dims(*a);
                    let k = cols.len();
                    let ga = acc(&mut grads, *a, len(*a));
                    for i in 0..node.rows {
                        for (j, &c) in cols.iter().enumerate() {
                            ga[i * n + c] += g[i * k + j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += x);
                }
                Op::PickSum(a, at) => {
                    let (_, n) = self.dims(*a);
                    let ga = acc(&mut grads, *a, len(*a));
                    for &(r, c) in at {
                        ga[r * n + c] += g[0];
                    }
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, len(*a))
                        .iter_mut()
                        .for_each(|d| *d += g[0]);
                }
                Op::Gru(rec) => self.gru_backward(rec, &g, &mut grads),
            }
            grads[idx] = Some(g);
        }
        let mut params = Grads::zeros_like(self.params);
        for (i, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &grads[v.0] {
                    params.values[i].copy_from_slice(g);
                }
            }
        }
        Backward {
            nodes: grads,
            params,
        }
    }
}

impl<T: Real> Tape<'_, T> {
    fn gru_backward(&self, rec: &GruRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (steps, d) = self.dims(rec.x);
        let h = self.dims(rec.w[3]).0;
        let val = |v: Var| &self.nodes[v.0].value;
        let xv = val(rec.x);
        let mut gx = vec![0.0; steps * d];
        let mut gw: Vec<Vec<f64>> = rec
            .w
            .iter()
            .map(|&v| vec![0.0; self.nodes[v.0].value.len()])
            .collect();
        let mut carry = vec![0.0f64; h];
        let mut xt = vec![0.0f64; d];
        let (mut daz, mut dar, mut dan) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let (mut drh, mut rh) = (vec![0.0; h], vec![0.0; h]);
        for k in (0..steps).rev() {
            let t = if rec.reverse { steps - 1 - k } else { k };
            let row = t * h..(t + 1) * h;
            let (z, r, c, hp) = (
                &rec.z[row.clone()],
                &rec.r[row.clone()],
                &rec.c[row.clone()],
                &rec.h_prev[row.clone()],
            );
            let mut dh_prev = vec![0.0f64; h];
            for j in 0..h {
                let dh = carry[j] + g[row.start + j];
                dan[j] = dh * z[j] * (1.0 - c[j] * c[j]);
                daz[j] = dh * (c[j] - hp[j]) * z[j] * (1.0 - z[j]);
                dh_prev[j] = dh * (1.0 - z[j]);
                rh[j] = r[j] * hp[j];
            }
            drh.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_acc(val(rec.w[5]), &dan, &mut drh);
            for j in 0..h {
                dar[j] = drh[j] * hp[j] * r[j] * (1.0 - r[j]);
                dh_prev[j] += drh[j] * r[j];
            }
            mat_vec_acc(val(rec.w[3]), &daz, &mut dh_prev);
            mat_vec_acc(val(rec.w[4]), &dar, &mut dh_prev);
            for (o, v) in xt.iter_mut().zip(&xv[t * d..(t + 1) * d]) {
                *o = v.to_f64();
            }
            let gxt = &mut gx[t * d..(t + 1) * d];
            for (wi, da) in [(0, &daz), (1, &dar), (2, &dan)] {
                mat_vec_acc(val(rec.w[wi]), da, gxt);
                outer_acc(&xt, da, &mut gw[wi]);
                gw[wi + 6]
                    .iter_mut()
                    .zip(da.iter())
                    .for_each(|(o, v)| *o += v);
            }
            outer_acc(hp, &daz, &mut gw[3]);
            outer_acc(hp, &dar, &mut gw[4]);
            outer_acc(&rh, &dan, &mut gw[5]);
            carry = dh_prev;
        }
        let mut add = |v: Var, src: &[f64]| {
            let dst = grads[v.0].get_or_insert_with(|| vec![0.0; src.len()]);
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        };
        add(rec.x, &gx);
        for (&v, gv) in rec.w.iter().zip(&gw) {
            add(v, gv);
        }
    }
}

/// Result of a reverse pass.
pub struct Backward {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: Grads,
}

impl Backward {
    /// Gradient of the loss with respect to a node (`None` if unreachable).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Max relative error between the tape gradient of a scalar function and
/// central differences, one coordinate of `x` at a time.
///
/// Relative error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// The numeric step divides by the actual difference of the perturbed inputs
/// so storage rounding of `x +- eps` does not bias it.
pub fn grad_check<T, F>(params: &Params<T>, x: &Tensor<T>, eps: f64, f: F) -> f64
where
    T: Real,
    F: Fn(&mut Tape<'_, T>, Var) -> Var,
{
    let mut tape = Tape::new(params);
    let xv = tape.input(x);
    let out = f(&mut tape, xv);
    let back = tape.backward(out);
    let analytic = back
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |t: &Tensor<T>| {
        let mut tape = Tape::new(params);
        let v = tape.input(t);
        let out = f(&mut tape, v);
        tape.scalar(out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let base = x.data()[i].to_f64();
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] = T::from_f64(base + eps);
        minus.data_mut()[i] = T::from_f64(base - eps);
        let step = plus.data()[i].to_f64() - minus.data()[i].to_f64();
        let numeric = (eval(&plus) - eval(&minus)) / step;
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Like [`grad_check`] but perturbs parameter coordinates. `coords` picks
/// `(param, index)` pairs; pass `None` to check every coordinate.
pub fn grad_check_params<T, F>(
    params: &Params<T>,
    eps: f64,
    coords: Option<&[(ParamId, usize)]>,
    f: F,
) -> f64
where
    T: Real,
    F: Fn(&mut Tape<'_, T>) -> Var,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape);
    let analytic = tape.backward(out).params;
    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .entries()
                .iter()
                .enumerate()
                .flat_map(|(p, e)| (0..e.tensor.len()).map(move |i| (ParamId(p), i)))
                .collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for &(pid, i) in coords {
        let base = params.get(pid).data()[i];
        let b = base.to_f64();
        probe.get_mut(pid).data_mut()[i] = T::from_f64(b + eps);
        let hi_x = probe.get(pid).data()[i].to_f64();
        let hi = {
            let mut t = Tape::new(&probe);
            let o = f(&mut t);
            t.scalar(o)
        };
        probe.get_mut(pid).data_mut()[i] = T::from_f64(b - eps);
        let lo_x = probe.get(pid).data()[i].to_f64();
        let lo = {
            let mut t = Tape::new(&probe);
            let o = f(&mut t);
            t.scalar(o)
        };
        probe.get_mut(pid).data_mut()[i] = base;
        let numeric = (hi - lo) / (hi_x - lo_x);
        worst = worst.max(relative_error(analytic.values[pid.0][i], numeric));
    }
    worst
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// `-ln p[target]` for a probability vector.
pub fn cross_entropy(pred: &[f64], target: usize) -> Option<f64> {
    pred.get(target).map(|p| -p.ln())
}
