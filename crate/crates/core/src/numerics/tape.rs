//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a dense matrix. Forward methods push a node and return a
//! [`Var`] handle; [`Tape::backward`] sweeps the nodes in exact reverse
//! order of creation.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use super::array::{gemm, Layout, NdArray};
use super::params::ParameterStore;
use super::NumericsError;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Affine { a: Var, scale: T },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    Transpose(Var),
    SegmentMax { a: Var, source: Vec<usize> },
    MaskedSoftmaxRows(Var),
    GatherElems { a: Var, idx: Vec<(usize, usize)> },
    Sum(Var),
    WeightedSqErr { a: Var, target: NdArray<T>, row_weight: Vec<T> },
    Bce { p: Var, target: Vec<T>, weight: Vec<T>, eps: T },
}

/// Recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    values: Vec<NdArray<T>>,
    ops: Vec<Op<T>>,
    params: HashMap<String, Var>,
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dim_err(op: &str, detail: String) -> NumericsError {
    NumericsError::Dimension(format!("{op}: {detail}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].as_matrix_shape()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(format!(
                "node {} ({})",
                self.ops.len(),
                op_name(&op)
            )));
        }
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn constant(&mut self, value: NdArray<T>) -> Result<Var, NumericsError> {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · Wᵀ + b` with `W` of shape `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (n, din) = self.shape(x);
        let wv = &self.values[w.0];
        let (out, win) = wv.as_matrix_shape();
        if win != din {
            return Err(dim_err(
                "linear",
                format!("input {:?} vs weight {:?}", self.values[x.0].shape(), wv.shape()),
            ));
        }
        let mut y = NdArray::zeros(&[n, out]);
        if let Some(b) = b {
            let bv = &self.values[b.0];
            if bv.len() != out {
                return Err(dim_err(
                    "linear",
                    format!("bias {:?} vs weight {:?}", bv.shape(), wv.shape()),
                ));
            }
            for r in 0..n {
                y.data_mut()[r * out..(r + 1) * out].copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            &self.values[x.0],
            Layout::Normal,
            &self.values[w.0],
            Layout::Transposed,
            beta,
            &mut y,
        )?;
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, _) = self.shape(a);
        let (_, n) = self.shape(b);
        let mut y = NdArray::zeros(&[m, n]);
        gemm(
            T::one(),
            &self.values[a.0],
            Layout::Normal,
            &self.values[b.0],
            Layout::Normal,
            T::zero(),
            &mut y,
        )?;
        self.push(y, Op::MatMul { a, b })
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(usize, usize), NumericsError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(dim_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> NdArray<T> {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        NdArray::from_vec(vec![av.rows(), av.cols()], data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let y = self.zip(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let y = self.zip(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let y = self.zip(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &self,
        op: &str,
        a: Var,
        row: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<NdArray<T>, NumericsError> {
        let (n, c) = self.shape(a);
        let rv = &self.values[row.0];
        if rv.len() != c {
            return Err(dim_err(
                op,
                format!("{:?} vs row {:?}", self.values[a.0].shape(), rv.shape()),
            ));
        }
        let av = &self.values[a.0];
        let mut data = Vec::with_capacity(n * c);
        for r in 0..n {
            for j in 0..c {
                data.push(f(av.data()[r * c + j], rv.data()[j]));
            }
        }
        NdArray::matrix(n, c, data)
    }

    /// Adds one row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let y = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        self.push(y, Op::AddRow { a, row })
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let y = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        self.push(y, Op::MulRow { a, row })
    }

    /// `a * scale + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var, NumericsError> {
        let y = self.values[a.0].map(|x| x * scale + shift);
        let y = y.reshaped(vec![self.shape(a).0, self.shape(a).1])?;
        self.push(y, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Result<Var, NumericsError> {
        self.affine(a, scale, T::zero())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        let y = self.values[a.0].map(f).reshaped(vec![r, c])?;
        self.push(y, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Row-wise normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        if self.values[gamma.0].len() != c || self.values[beta.0].len() != c {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "input {:?} vs gain {:?} / shift {:?}",
                    self.values[a.0].shape(),
                    self.values[gamma.0].shape(),
                    self.values[beta.0].shape()
                ),
            ));
        }
        let av = &self.values[a.0];
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let cn = T::from_usize(c).unwrap();
        let mut xhat = Vec::with_capacity(n * c);
        let mut inv_std = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n * c);
        for r in 0..n {
            let row = av.row_slice(r);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat.push(xh);
                y.push(xh * g[j] + bt[j]);
            }
        }
        let y = NdArray::matrix(n, c, y)?;
        self.push(
            y,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let n = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| dim_err("concat_cols", "no operands".into()))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(dim_err("concat_cols", format!("row counts {n} vs {r}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.values[p.0].row_slice(r));
            }
        }
        let y = NdArray::matrix(n, total, data)?;
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| dim_err("concat_rows", "no operands".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(dim_err("concat_rows", format!("column counts {c} vs {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.values[p.0].data());
        }
        let y = NdArray::matrix(rows, c, data)?;
        self.push(y, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        if cols.end > c || cols.start > cols.end {
            return Err(dim_err("slice_cols", format!("{cols:?} out of {c} columns")));
        }
        let w = cols.len();
        let av = &self.values[a.0];
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&av.row_slice(r)[cols.clone()]);
        }
        let y = NdArray::matrix(n, w, data)?;
        self.push(y, Op::SliceCols { a, start: cols.start })
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        if rows.end > n || rows.start > rows.end {
            return Err(dim_err("slice_rows", format!("{rows:?} out of {n} rows")));
        }
        let data = self.values[a.0].data()[rows.start * c..rows.end * c].to_vec();
        let y = NdArray::matrix(rows.len(), c, data)?;
        self.push(y, Op::SliceRows { a, start: rows.start })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(dim_err("gather_rows", format!("row {i} out of {n}")));
            }
            data.extend_from_slice(self.values[a.0].row_slice(i));
        }
        let y = NdArray::matrix(idx.len(), c, data)?;
        self.push(y, Op::GatherRows { a, idx: idx.to_vec() })
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        if idx.len() != n {
            return Err(dim_err("scatter_rows", format!("{} targets for {n} rows", idx.len())));
        }
        let mut y = NdArray::zeros(&[rows, c]);
        let mut seen = vec![false; rows];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows || seen[i] {
                return Err(dim_err("scatter_rows", format!("bad target row {i} of {rows}")));
            }
            seen[i] = true;
            y.data_mut()[i * c..(i + 1) * c].copy_from_slice(self.values[a.0].row_slice(r));
        }
        self.push(y, Op::ScatterRows { a, idx: idx.to_vec() })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let y = self.values[a.0].transpose();
        self.push(y, Op::Transpose(a))
    }

    /// Column-wise max over each row segment; one output row per segment.
    pub fn segment_max(&mut self, a: Var, segments: &[Range<usize>]) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        let av = &self.values[a.0];
        let mut data = Vec::with_capacity(segments.len() * c);
        let mut source = Vec::with_capacity(segments.len() * c);
        for seg in segments {
            if seg.is_empty() || seg.end > n {
                return Err(dim_err("segment_max", format!("segment {seg:?} of {n} rows")));
            }
            for j in 0..c {
                let mut best = seg.start;
                for r in seg.clone() {
                    if av.at(r, j) > av.at(best, j) {
                        best = r;
                    }
                }
                data.push(av.at(best, j));
                source.push(best);
            }
        }
        let y = NdArray::matrix(segments.len(), c, data)?;
        self.push(y, Op::SegmentMax { a, source })
    }

    /// For each row, the column-wise max over the *other* rows of its
    /// segment. A single-row segment pools over itself.
    pub fn segment_max_others(
        &mut self,
        a: Var,
        segments: &[Range<usize>],
    ) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        let av = &self.values[a.0];
        let mut y = NdArray::zeros(&[n, c]);
        let mut source = vec![0usize; n * c];
        let mut covered = 0;
        for seg in segments {
            if seg.is_empty() || seg.end > n {
                return Err(dim_err("segment_max_others", format!("segment {seg:?} of {n} rows")));
            }
            covered += seg.len();
            for j in 0..c {
                // top two rows by value, first occurrence wins ties
                let mut first = seg.start;
                let mut second: Option<usize> = None;
                for r in seg.clone().skip(1) {
                    let v = av.at(r, j);
                    if v > av.at(first, j) {
                        second = Some(first);
                        first = r;
                    } else if second.map_or(true, |s| v > av.at(s, j)) {
                        second = Some(r);
                    }
                }
                for r in seg.clone() {
                    let src = if r == first { second.unwrap_or(first) } else { first };
                    y.set(r, j, av.at(src, j));
                    source[r * c + j] = src;
                }
            }
        }
        if covered != n {
            return Err(dim_err("segment_max_others", format!("segments cover {covered} of {n} rows")));
        }
        self.push(y, Op::SegmentMax { a, source })
    }

    /// Row-wise softmax. `key_mask[j] == false` removes column `j`
    /// (weight exactly 0); `row_valid[r] == false` yields an all-zero row.
    pub fn masked_softmax_rows(
        &mut self,
        a: Var,
        key_mask: Option<&[bool]>,
        row_valid: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        if key_mask.is_some_and(|m| m.len() != c) || row_valid.is_some_and(|m| m.len() != n) {
            return Err(dim_err("masked_softmax_rows", format!("mask lengths vs {n}x{c}")));
        }
        if let Some(m) = key_mask {
            if !m.iter().any(|&k| k) {
                return Err(NumericsError::Contract(
                    "masked_softmax_rows: every column is masked".into(),
                ));
            }
        }
        let keep = |j: usize| key_mask.map_or(true, |m| m[j]);
        let av = &self.values[a.0];
        let mut y = NdArray::zeros(&[n, c]);
        for r in 0..n {
            if row_valid.is_some_and(|m| !m[r]) {
                continue;
            }
            let row = av.row_slice(r);
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    y.set(r, j, e);
                    z = z + e;
                }
            }
            for j in 0..c {
                let v = y.at(r, j) / z;
                y.set(r, j, v);
            }
        }
        self.push(y, Op::MaskedSoftmaxRows(a))
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        let mut data = Vec::with_capacity(idx.len());
        for &(r, j) in idx {
            if r >= n || j >= c {
                return Err(dim_err("gather_elems", format!("({r}, {j}) out of {n}x{c}")));
            }
            data.push(self.values[a.0].at(r, j));
        }
        let y = NdArray::matrix(idx.len(), 1, data)?;
        self.push(y, Op::GatherElems { a, idx: idx.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let y = NdArray::scalar(self.values[a.0].sum());
        self.push(y, Op::Sum(a))
    }

    /// `Σ_r w_r ‖a_r − target_r‖²`.
    pub fn weighted_sq_err(
        &mut self,
        a: Var,
        target: NdArray<T>,
        row_weight: Vec<T>,
    ) -> Result<Var, NumericsError> {
        let (n, c) = self.shape(a);
        if target.as_matrix_shape() != (n, c) || row_weight.len() != n {
            return Err(dim_err(
                "weighted_sq_err",
                format!(
                    "prediction {:?} vs target {:?} with {} weights",
                    self.values[a.0].shape(),
                    target.shape(),
                    row_weight.len()
                ),
            ));
        }
        let av = &self.values[a.0];
        let mut total = T::zero();
        for r in 0..n {
            let mut s = T::zero();
            for j in 0..c {
                let d = av.at(r, j) - target.at(r, j);
                s = s + d * d;
            }
            total = total + row_weight[r] * s;
        }
        self.push(
            NdArray::scalar(total),
            Op::WeightedSqErr {
                a,
                target,
                row_weight,
            },
        )
    }

    /// `Σ_i w_i · BCE(clamp(p_i, eps, 1 − eps), t_i)` over all entries of `p`.
    pub fn bce(
        &mut self,
        p: Var,
        target: Vec<T>,
        weight: Vec<T>,
        eps: T,
    ) -> Result<Var, NumericsError> {
        let pv = &self.values[p.0];
        if target.len() != pv.len() || weight.len() != pv.len() {
            return Err(dim_err(
                "bce",
                format!("{:?} vs {} targets, {} weights", pv.shape(), target.len(), weight.len()),
            ));
        }
        let mut total = T::zero();
        for ((&x, &t), &w) in pv.data().iter().zip(&target).zip(&weight) {
            let pc = x.max(eps).min(T::one() - eps);
            total = total - w * (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
        }
        self.push(
            NdArray::scalar(total),
            Op::Bce {
                p,
                target,
                weight,
                eps,
            },
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<NdArray<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(NdArray::filled(&[1, 1], T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter leaf that reaches the loss.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, NdArray<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                let shaped = g.clone().reshaped(self.values[v.0].shape().to_vec());
                out.insert(name.clone(), shaped.expect("param gradient shape"));
            }
        }
        out
    }

    fn backward_node(
        &self,
        i: usize,
        g: &NdArray<T>,
        grads: &mut [Option<NdArray<T>>],
    ) -> Result<(), NumericsError> {
        let y = &self.values[i];
        match &self.ops[i] {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = &self.values[x.0];
                let wv = &self.values[w.0];
                let mut gx = NdArray::zeros(&[xv.rows(), xv.cols()]);
                gemm(T::one(), g, Layout::Normal, wv, Layout::Normal, T::zero(), &mut gx)?;
                accumulate(grads, *x, gx);
                let mut gw = NdArray::zeros(wv.shape());
                gemm(T::one(), g, Layout::Transposed, xv, Layout::Normal, T::zero(), &mut gw)?;
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    let gb = column_sums(g).reshaped(self.values[b.0].shape().to_vec())?;
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMul { a, b } => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                let mut ga = NdArray::zeros(&[av.rows(), av.cols()]);
                gemm(T::one(), g, Layout::Normal, bv, Layout::Transposed, T::zero(), &mut ga)?;
                accumulate(grads, *a, ga);
                let mut gb = NdArray::zeros(&[bv.rows(), bv.cols()]);
                gemm(T::one(), av, Layout::Transposed, g, Layout::Normal, T::zero(), &mut gb)?;
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                accumulate(grads, *a, hadamard(g, bv));
                accumulate(grads, *b, hadamard(g, av));
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *a, g.clone());
                let gr = column_sums(g).reshaped(self.values[row.0].shape().to_vec())?;
                accumulate(grads, *row, gr);
            }
            Op::MulRow { a, row } => {
                let av = &self.values[a.0];
                let rv = &self.values[row.0];
                let c = g.cols();
                let mut ga = g.clone();
                let mut gr = vec![T::zero(); c];
                for r in 0..g.rows() {
                    for j in 0..c {
                        let gv = g.at(r, j);
                        ga.set(r, j, gv * rv.data()[j]);
                        gr[j] = gr[j] + gv * av.at(r, j);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *row, NdArray::from_vec(rv.shape().to_vec(), gr)?);
            }
            Op::Affine { a, scale } => accumulate(grads, *a, g.map(|v| v * *scale)),
            Op::Relu(a) => accumulate(grads, *a, zip_map(g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() })),
            Op::Sigmoid(a) => accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv))),
            Op::Tanh(a) => accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * (T::one() - yv * yv))),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.as_matrix_shape();
                let gam = self.values[gamma.0].data();
                let cn = T::from_usize(c).unwrap();
                let mut gx = NdArray::zeros(&[n, c]);
                let mut ggam = vec![T::zero(); c];
                let mut gbet = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for r in 0..n {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let gv = g.at(r, j);
                        let xh = xhat[r * c + j];
                        ggam[j] = ggam[j] + gv * xh;
                        gbet[j] = gbet[j] + gv;
                        dxhat[j] = gv * gam[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xh;
                    }
                    for j in 0..c {
                        let xh = xhat[r * c + j];
                        let v = inv_std[r] / cn * (cn * dxhat[j] - s1 - xh * s2);
                        gx.set(r, j, v);
                    }
                }
                accumulate(grads, *a, gx);
                accumulate(
                    grads,
                    *gamma,
                    NdArray::from_vec(self.values[gamma.0].shape().to_vec(), ggam)?,
                );
                accumulate(
                    grads,
                    *beta,
                    NdArray::from_vec(self.values[beta.0].shape().to_vec(), gbet)?,
                );
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.values[p.0].cols();
                    let mut gp = Vec::with_capacity(n * pc);
                    for r in 0..n {
                        gp.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                    }
                    accumulate(grads, p, NdArray::matrix(n, pc, gp)?);
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.values[p.0].rows();
                    let gp = g.data()[offset * c..(offset + pr) * c].to_vec();
                    accumulate(grads, p, NdArray::matrix(pr, c, gp)?);
                    offset += pr;
                }
            }
            Op::SliceCols { a, start } => {
                let (n, c) = self.shape(*a);
                let w = g.cols();
                let mut ga = NdArray::zeros(&[n, c]);
                for r in 0..n {
                    for j in 0..w {
                        ga.set(r, start + j, g.at(r, j));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceRows { a, start } => {
                let (n, c) = self.shape(*a);
                let mut ga = NdArray::zeros(&[n, c]);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::GatherRows { a, idx } => {
                let (n, c) = self.shape(*a);
                let mut ga = NdArray::zeros(&[n, c]);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        let v = ga.at(i, j) + g.at(r, j);
                        ga.set(i, j, v);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterRows { a, idx } => {
                let (n, c) = self.shape(*a);
                let mut ga = Vec::with_capacity(n * c);
                for &i in idx {
                    ga.extend_from_slice(g.row_slice(i));
                }
                accumulate(grads, *a, NdArray::matrix(n, c, ga)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::SegmentMax { a, source } => {
                let (n, c) = self.shape(*a);
                let mut ga = NdArray::zeros(&[n, c]);
                for (k, &src) in source.iter().enumerate() {
                    let j = k % c;
                    let v = ga.at(src, j) + g.data()[k];
                    ga.set(src, j, v);
                }
                accumulate(grads, *a, ga);
            }
            Op::MaskedSoftmaxRows(a) => {
                let (n, c) = g.as_matrix_shape();
                let mut ga = NdArray::zeros(&[n, c]);
                for r in 0..n {
                    let dot: T = (0..c).map(|j| g.at(r, j) * y.at(r, j)).sum();
                    for j in 0..c {
                        ga.set(r, j, y.at(r, j) * (g.at(r, j) - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherElems { a, idx } => {
                let (n, c) = self.shape(*a);
                let mut ga = NdArray::zeros(&[n, c]);
                for (k, &(r, j)) in idx.iter().enumerate() {
                    let v = ga.at(r, j) + g.data()[k];
                    ga.set(r, j, v);
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (n, c) = self.shape(*a);
                accumulate(grads, *a, NdArray::filled(&[n, c], g.item()));
            }
            Op::WeightedSqErr {
                a,
                target,
                row_weight,
            } => {
                let av = &self.values[a.0];
                let (n, c) = av.as_matrix_shape();
                let gs = g.item();
                let two = T::lit(2.0);
                let mut ga = NdArray::zeros(&[n, c]);
                for r in 0..n {
                    for j in 0..c {
                        ga.set(r, j, gs * two * row_weight[r] * (av.at(r, j) - target.at(r, j)));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Bce {
                p,
                target,
                weight,
                eps,
            } => {
                let pv = &self.values[p.0];
                let gs = g.item();
                let data = pv
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&x, &t), &w)| {
                        if x <= *eps || x >= T::one() - *eps {
                            T::zero()
                        } else {
                            gs * w * (-t / x + (T::one() - t) / (T::one() - x))
                        }
                    })
                    .collect();
                accumulate(grads, *p, NdArray::from_vec(vec![pv.rows(), pv.cols()], data)?);
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::Linear { .. } => "linear",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow { .. } => "add_row",
        Op::MulRow { .. } => "mul_row",
        Op::Affine { .. } => "affine",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::Transpose(_) => "transpose",
        Op::SegmentMax { .. } => "segment_max",
        Op::MaskedSoftmaxRows(_) => "masked_softmax_rows",
        Op::GatherElems { .. } => "gather_elems",
        Op::Sum(_) => "sum",
        Op::WeightedSqErr { .. } => "weighted_sq_err",
        Op::Bce { .. } => "bce",
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<NdArray<T>>], v: Var, g: NdArray<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(g: &NdArray<T>) -> NdArray<T> {
    let (n, c) = g.as_matrix_shape();
    let mut s = vec![T::zero(); c];
    for r in 0..n {
        for (j, acc) in s.iter_mut().enumerate() {
            *acc = *acc + g.at(r, j);
        }
    }
    NdArray::row(s)
}

fn hadamard<T: Scalar>(a: &NdArray<T>, b: &NdArray<T>) -> NdArray<T> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<T: Scalar>(a: &NdArray<T>, b: &NdArray<T>, f: impl Fn(T, T) -> T) -> NdArray<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NdArray::from_vec(vec![a.rows(), a.cols()], data).expect("matching shapes")
}
