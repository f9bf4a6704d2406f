//! Wengert-tape reverse-mode differentiation.
//!
//! Forward results are computed eagerly as operations are recorded; calling
//! [`Tape::backward`] replays the recorded list in reverse and accumulates
//! vector-Jacobian products into every node. Parameters are registered by
//! name and snapshotted onto the tape, so later mutation of the model cannot
//! affect an in-flight step. A tape lives for exactly one forward/backward
//! pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{
    gelu_grad_scalar, sigmoid_scalar, Scalar, Tensor,
};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Matmul { a: Var, b: Var, out: Var },
    Transpose { a: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, c: f64, out: Var },
    AddRow { a: Var, row: Var, out: Var },
    MulRow { a: Var, row: Var, out: Var },
    Relu { a: Var, out: Var },
    Gelu { a: Var, out: Var },
    Softplus { a: Var, out: Var },
    SoftmaxRows { a: Var, out: Var },
    LayerNormRows { a: Var, eps: f64, out: Var },
    BatchNormCols { a: Var, eps: f64, out: Var },
    LogClamp { a: Var, floor: f64, out: Var },
    SumAll { a: Var, out: Var },
    MeanAll { a: Var, out: Var },
    ConcatRows { parts: Vec<Var>, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    SliceRows { a: Var, start: usize, out: Var },
    SliceCols { a: Var, start: usize, out: Var },
    Gather { a: Var, indices: Vec<usize>, out: Var },
    Reshape { a: Var, out: Var },
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    ops: Vec<Op>,
    param_names: Vec<(String, Var)>,
    param_index: HashMap<String, usize>,
    trainable_prefixes: Option<Vec<String>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape on which every registered parameter is trainable.
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            param_names: Vec::new(),
            param_index: HashMap::new(),
            trainable_prefixes: None,
        }
    }

    /// Tape that treats only parameters whose name starts with one of
    /// `prefixes` as trainable; everything else becomes a constant. This is
    /// how later training stages freeze earlier ones.
    pub fn with_trainable(prefixes: &[&str]) -> Self {
        let mut t = Tape::new();
        t.trainable_prefixes = Some(prefixes.iter().map(|s| s.to_string()).collect());
        t
    }

    fn push(&mut self, value: Tensor<T>) -> Var {
        let id = Var(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        id
    }

    /// Leaf node with no gradient tracking by name. Gradients still flow
    /// *to* it (readable via [`Tape::grad`]), which input-space attacks use.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value)
    }

    /// Register a named parameter. Repeated registration under the same name
    /// returns the original node. Names filtered out by the trainable set
    /// degrade to plain constants.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&idx) = self.param_index.get(name) {
            return self.param_names[idx].1;
        }
        let trainable = match &self.trainable_prefixes {
            None => true,
            Some(pfx) => pfx.iter().any(|p| name.starts_with(p.as_str())),
        };
        let var = self.push(value.clone());
        if trainable {
            self.param_index.insert(name.to_string(), self.param_names.len());
            self.param_names.push((name.to_string(), var));
        }
        var
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of all registered trainable parameters, zeros where no
    /// gradient flowed. Only meaningful after [`Tape::backward`].
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.param_names
            .iter()
            .map(|(name, var)| {
                let g = match &self.grads[var.0] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(self.values[var.0].shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    /// Names of trainable parameters that received a nonzero gradient.
    pub fn touched_params(&self) -> Vec<String> {
        self.param_names
            .iter()
            .filter(|(_, var)| {
                self.grads[var.0]
                    .as_ref()
                    .map(|g| g.data().iter().any(|x| *x != T::zero()))
                    .unwrap_or(false)
            })
            .map(|(name, _)| name.clone())
            .collect()
    }

    // ---- recorded operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        let out = self.push(v);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.values[a.0].transpose()?;
        let out = self.push(v);
        self.ops.push(Op::Transpose { a, out });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        let out = self.push(v);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].sub(&self.values[b.0])?;
        let out = self.push(v);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].mul(&self.values[b.0])?;
        let out = self.push(v);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].scale(T::from_f64(c));
        let out = self.push(v);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    /// `out[r][c] = a[r][c] + row[c]` — bias addition.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = broadcast_row(&self.values[a.0], &self.values[row.0], |x, r| x + r)?;
        let out = self.push(v);
        self.ops.push(Op::AddRow { a, row, out });
        Ok(out)
    }

    /// `out[r][c] = a[r][c] * row[c]` — per-feature scaling.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = broadcast_row(&self.values[a.0], &self.values[row.0], |x, r| x * r)?;
        let out = self.push(v);
        self.ops.push(Op::MulRow { a, row, out });
        Ok(out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].relu();
        let out = self.push(v);
        self.ops.push(Op::Relu { a, out });
        out
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].gelu();
        let out = self.push(v);
        self.ops.push(Op::Gelu { a, out });
        out
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].softplus();
        let out = self.push(v);
        self.ops.push(Op::Softplus { a, out });
        out
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.values[a.0].softmax_rows()?;
        let out = self.push(v);
        self.ops.push(Op::SoftmaxRows { a, out });
        Ok(out)
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.values[a.0].layer_norm_rows(eps)?;
        let out = self.push(v);
        self.ops.push(Op::LayerNormRows { a, eps, out });
        Ok(out)
    }

    /// Normalize each column by its batch (row-dimension) statistics.
    pub fn batch_norm_cols(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = batch_norm_cols_forward(&self.values[a.0], eps)?;
        let out = self.push(v);
        self.ops.push(Op::BatchNormCols { a, eps, out });
        Ok(out)
    }

    /// `ln(max(a, floor))` elementwise. NaN input stays NaN so a diverged
    /// upstream value cannot hide behind the clamp.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        let fl = T::from_f64(floor);
        let v = self.values[a.0].map(|x| {
            if x > fl {
                x.ln()
            } else if x.is_nan() {
                x
            } else {
                fl.ln()
            }
        });
        let out = self.push(v);
        self.ops.push(Op::LogClamp { a, floor, out });
        out
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.values[a.0].sum());
        let out = self.push(v);
        self.ops.push(Op::SumAll { a, out });
        out
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.values[a.0].mean());
        let out = self.push(v);
        self.ops.push(Op::MeanAll { a, out });
        out
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| &self.values[v.0]).collect();
        let v = Tensor::concat_rows(&tensors)?;
        let out = self.push(v);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| &self.values[v.0]).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let out = self.push(v);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.values[a.0].slice_rows(start, len)?;
        let out = self.push(v);
        self.ops.push(Op::SliceRows { a, start, out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.values[a.0];
        let (rows, cols) = (src.rows()?, src.cols()?);
        if start + len > cols {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.data()[r * cols + start..r * cols + start + len]);
        }
        let v = Tensor::from_vec(vec![rows, len], data)?;
        let out = self.push(v);
        self.ops.push(Op::SliceCols { a, start, out });
        Ok(out)
    }

    /// `out.data[i] = a.data[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = &self.values[a.0];
        let mut data = Vec::with_capacity(indices.len());
        for &ix in &indices {
            if ix >= src.len() {
                return Err(Error::shape(format!(
                    "gather index {ix} out of {}",
                    src.len()
                )));
            }
            data.push(src.data()[ix]);
        }
        let v = Tensor::from_vec(shape.to_vec(), data)?;
        let out = self.push(v);
        self.ops.push(Op::Gather { a, indices, out });
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.values[a.0].reshape(shape)?;
        let out = self.push(v);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    /// `x @ w + b` with `w: in x out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep seeding `d loss = 1`. `loss` must be a scalar node with
    /// a finite value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::numeric("loss is not finite"));
        }
        self.grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op)?;
        }
        Ok(())
    }

    fn take_out_grad(&self, out: Var) -> Option<Tensor<T>> {
        self.grads[out.0].clone()
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data().iter()) {
                    *e = *e + *x;
                }
            }
            None => self.grads[v.0] = Some(g),
        }
    }

    fn backward_op(&mut self, op: &Op) -> Result<()> {
        match op {
            Op::Matmul { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let bt = self.values[b.0].transpose()?;
                    let at = self.values[a.0].transpose()?;
                    let da = d.matmul(&bt)?;
                    let db = at.matmul(&d)?;
                    self.accumulate(*a, da);
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*a, d.transpose()?);
                }
            }
            Op::Add { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*a, d.clone());
                    self.accumulate(*b, d);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*a, d.clone());
                    self.accumulate(*b, d.neg());
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let da = d.mul(&self.values[b.0])?;
                    let db = d.mul(&self.values[a.0])?;
                    self.accumulate(*a, da);
                    self.accumulate(*b, db);
                }
            }
            Op::Scale { a, c, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*a, d.scale(T::from_f64(*c)));
                }
            }
            Op::AddRow { a, row, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*row, col_sums(&d)?);
                    self.accumulate(*a, d);
                }
            }
            Op::MulRow { a, row, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let da = broadcast_row(&d, &self.values[row.0], |x, r| x * r)?;
                    let d_times_a = d.mul(&self.values[a.0])?;
                    self.accumulate(*row, col_sums(&d_times_a)?);
                    self.accumulate(*a, da);
                }
            }
            Op::Relu { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mask = self.values[a.0].map(|x| if x > T::zero() { T::one() } else { T::zero() });
                    self.accumulate(*a, d.mul(&mask)?);
                }
            }
            Op::Gelu { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let grad = self.values[a.0].map(gelu_grad_scalar);
                    self.accumulate(*a, d.mul(&grad)?);
                }
            }
            Op::Softplus { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let grad = self.values[a.0].map(sigmoid_scalar);
                    self.accumulate(*a, d.mul(&grad)?);
                }
            }
            Op::SoftmaxRows { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let y = &self.values[out.0];
                    let (rows, cols) = y.as_rows()?;
                    let mut dx = d.clone();
                    for r in 0..rows {
                        let y_row = &y.data()[r * cols..(r + 1) * cols];
                        let d_row = &d.data()[r * cols..(r + 1) * cols];
                        let dot = y_row
                            .iter()
                            .zip(d_row.iter())
                            .fold(T::zero(), |acc, (&yv, &dv)| acc + yv * dv);
                        let dx_row = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for ((o, &yv), &dv) in dx_row.iter_mut().zip(y_row).zip(d_row) {
                            *o = yv * (dv - dot);
                        }
                    }
                    self.accumulate(*a, dx);
                }
            }
            Op::LayerNormRows { a, eps, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx = norm_backward_rows(&self.values[a.0], &self.values[out.0], &d, *eps)?;
                    self.accumulate(*a, dx);
                }
            }
            Op::BatchNormCols { a, eps, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let xt = self.values[a.0].transpose()?;
                    let yt = self.values[out.0].transpose()?;
                    let dt = d.transpose()?;
                    let dxt = norm_backward_rows(&xt, &yt, &dt, *eps)?;
                    self.accumulate(*a, dxt.transpose()?);
                }
            }
            Op::LogClamp { a, floor, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let fl = T::from_f64(*floor);
                    let x = &self.values[a.0];
                    let grad = x.map(|v| if v > fl { v.recip() } else { T::zero() });
                    self.accumulate(*a, d.mul(&grad)?);
                }
            }
            Op::SumAll { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let g = Tensor::full(self.values[a.0].shape(), d.data()[0]);
                    self.accumulate(*a, g);
                }
            }
            Op::MeanAll { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let n = T::from_f64(self.values[a.0].len() as f64);
                    let g = Tensor::full(self.values[a.0].shape(), d.data()[0] / n);
                    self.accumulate(*a, g);
                }
            }
            Op::ConcatRows { parts, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.values[p.0].shape()[0];
                        let slice = d.slice_rows(start, rows)?.reshape(self.values[p.0].shape())?;
                        self.accumulate(*p, slice);
                        start += rows;
                    }
                }
            }
            Op::ConcatCols { parts, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let rows = d.rows()?;
                    let total = d.cols()?;
                    let mut start = 0;
                    for p in parts {
                        let cols = self.values[p.0].cols()?;
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            data.extend_from_slice(&d.data()[r * total + start..r * total + start + cols]);
                        }
                        self.accumulate(*p, Tensor::from_vec(vec![rows, cols], data)?);
                        start += cols;
                    }
                }
            }
            Op::SliceRows { a, start, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut g = Tensor::zeros(self.values[a.0].shape());
                    let cols = self.values[a.0].cols()?;
                    let off = start * cols;
                    g.data_mut()[off..off + d.len()].copy_from_slice(d.data());
                    self.accumulate(*a, g);
                }
            }
            Op::SliceCols { a, start, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut g = Tensor::zeros(self.values[a.0].shape());
                    let cols = self.values[a.0].cols()?;
                    let d_cols = d.cols()?;
                    for r in 0..d.rows()? {
                        for c in 0..d_cols {
                            g.data_mut()[r * cols + start + c] = d.data()[r * d_cols + c];
                        }
                    }
                    self.accumulate(*a, g);
                }
            }
            Op::Gather { a, indices, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut g = Tensor::zeros(self.values[a.0].shape());
                    for (i, &ix) in indices.iter().enumerate() {
                        g.data_mut()[ix] = g.data()[ix] + d.data()[i];
                    }
                    self.accumulate(*a, g);
                }
            }
            Op::Reshape { a, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*a, d.reshape(self.values[a.0].shape())?);
                }
            }
        }
        Ok(())
    }
}

fn broadcast_row<T: Scalar>(
    a: &Tensor<T>,
    row: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (rows, cols) = a.as_rows()?;
    if row.len() != cols {
        return Err(Error::shape(format!(
            "row broadcast: {} columns vs row of {}",
            cols,
            row.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(a.data()[r * cols + c], row.data()[c]));
        }
    }
    Tensor::from_vec(a.shape().to_vec(), data)
}

fn col_sums<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = a.as_rows()?;
    let mut sums = vec![T::zero(); cols];
    for r in 0..rows {
        for (c, s) in sums.iter_mut().enumerate() {
            *s = *s + a.data()[r * cols + c];
        }
    }
    Tensor::from_vec(vec![cols], sums)
}

fn batch_norm_cols_forward<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let t = x.transpose()?;
    t.layer_norm_rows(eps)?.transpose()
}

/// Shared VJP for per-row zero-mean/unit-variance normalization:
/// `dx = s * (dy - mean(dy) - y * mean(dy * y))` with `s = 1/sqrt(var + eps)`.
fn norm_backward_rows<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    d: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (rows, cols) = x.as_rows()?;
    let n = T::from_f64(cols as f64);
    let eps = T::from_f64(eps);
    let mut dx = d.clone();
    for r in 0..rows {
        let x_row = &x.data()[r * cols..(r + 1) * cols];
        let y_row = &y.data()[r * cols..(r + 1) * cols];
        let d_row = &d.data()[r * cols..(r + 1) * cols];
        let mean = x_row.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = x_row
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            / n;
        let s = (var + eps).sqrt().recip();
        let d_mean = d_row.iter().fold(T::zero(), |a, &b| a + b) / n;
        let dy_dot_y = d_row
            .iter()
            .zip(y_row.iter())
            .fold(T::zero(), |a, (&dv, &yv)| a + dv * yv)
            / n;
        let out_row = &mut dx.data_mut()[r * cols..(r + 1) * cols];
        for ((o, &dv), &yv) in out_row.iter_mut().zip(d_row).zip(y_row) {
            *o = s * (dv - d_mean - yv * dy_dot_y);
        }
    }
    Ok(dx)
}
