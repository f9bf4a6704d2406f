//! Parameter containers shared by the networks in this crate, plus the
//! visitor used for optimization, serialization, and hashing.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Distinguishes optimizable weights from state carried alongside them
/// (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Uniform access to every named tensor of a model component.
pub trait ParamSource<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));
}

/// All `(name, kind, tensor)` triples under `prefix`, in visit order.
pub fn named_tensors<T: Scalar>(
    source: &dyn ParamSource<T>,
    prefix: &str,
) -> Vec<(String, ParamKind, Tensor<T>)> {
    let mut out = Vec::new();
    source.visit(prefix, &mut |name, kind, t| {
        out.push((name.to_string(), kind, t.clone()));
    });
    out
}

/// SHA-256 over names, shapes, and little-endian element bytes. Used for the
/// stage-freeze contract: a hash that changes means a parameter moved.
pub fn param_hash<T: Scalar>(source: &dyn ParamSource<T>, prefix: &str) -> String {
    let mut hasher = Sha256::new();
    source.visit(prefix, &mut |name, _, t| {
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            hasher.update(x.to_f64_val().to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Overwrite every named tensor from `map`, erroring on missing names or
/// shape disagreement. Used by checkpoint loading.
pub fn load_named_tensors<T: Scalar>(
    source: &mut dyn ParamSource<T>,
    prefix: &str,
    map: &std::collections::HashMap<String, Tensor<T>>,
) -> Result<()> {
    let mut missing = Vec::new();
    source.visit_mut(prefix, &mut |name, _, t| {
        match map.get(name) {
            Some(new) if new.shape() == t.shape() => *t = new.clone(),
            Some(new) => missing.push(format!(
                "{name}: shape {:?} vs expected {:?}",
                new.shape(),
                t.shape()
            )),
            None => missing.push(format!("{name}: absent from checkpoint")),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(missing.join("; ")))
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer, `w: in x out`, `b: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        Linear {
            w: Tensor::trunc_normal(rng, &[in_dim, out_dim], 0.02),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(&join(prefix, "w"), &self.w);
        let b = tape.param(&join(prefix, "b"), &self.b);
        tape.linear(x, w, b)
    }
}

impl<T: Scalar> ParamSource<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "w"), ParamKind::Trainable, &self.w);
        f(&join(prefix, "b"), ParamKind::Trainable, &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "w"), ParamKind::Trainable, &mut self.w);
        f(&join(prefix, "b"), ParamKind::Trainable, &mut self.b);
    }
}

/// Layer normalization with affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(&join(prefix, "gamma"), &self.gamma);
        let b = tape.param(&join(prefix, "beta"), &self.beta);
        let normed = tape.layer_norm_rows(x, self.eps)?;
        let scaled = tape.mul_row(normed, g)?;
        tape.add_row(scaled, b)
    }
}

impl<T: Scalar> ParamSource<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
    }
}

/// 1-d batch normalization over the batch (row) dimension.
///
/// Training mode normalizes with batch statistics and reports them so the
/// caller can fold them into the running estimates; inference normalizes
/// with the stored running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::ones(&[dim]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Batch-statistics path. Returns the output node plus the per-column
    /// batch mean and population variance for the running-stat update.
    pub fn forward_train(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        x: Var,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let (mean, var) = column_stats(tape.value(x))?;
        let g = tape.param(&join(prefix, "gamma"), &self.gamma);
        let b = tape.param(&join(prefix, "beta"), &self.beta);
        let normed = tape.batch_norm_cols(x, self.eps)?;
        let scaled = tape.mul_row(normed, g)?;
        let out = tape.add_row(scaled, b)?;
        Ok((out, mean, var))
    }

    /// Running-statistics path: a fixed affine map, as used at inference.
    pub fn forward_infer(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(&join(prefix, "gamma"), &self.gamma);
        let b = tape.param(&join(prefix, "beta"), &self.beta);
        let eps = T::from_f64(self.eps);
        let inv_std = self.running_var.map(|v| (v + eps).sqrt().recip());
        let neg_mean = self.running_mean.neg();
        let neg_mean = tape.constant(neg_mean);
        let inv_std = tape.constant(inv_std);
        let centered = tape.add_row(x, neg_mean)?;
        let normed = tape.mul_row(centered, inv_std)?;
        let scaled = tape.mul_row(normed, g)?;
        tape.add_row(scaled, b)
    }

    /// Fold batch statistics into the running estimates.
    pub fn update_running(&mut self, batch_mean: &Tensor<T>, batch_var: &Tensor<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = keep * *r + m * b;
        }
    }
}

fn column_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, cols) = x.as_rows()?;
    let n = T::from_f64(rows as f64);
    let mut mean = vec![T::zero(); cols];
    for r in 0..rows {
        for (c, m) in mean.iter_mut().enumerate() {
            *m = *m + x.data()[r * cols + c];
        }
    }
    for m in mean.iter_mut() {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = x.data()[r * cols + c] - mean[c];
            var[c] = var[c] + d * d;
        }
    }
    for v in var.iter_mut() {
        *v = *v / n;
    }
    Ok((Tensor::from_vec(vec![cols], mean)?, Tensor::from_vec(vec![cols], var)?))
}

impl<T: Scalar> ParamSource<T> for BatchNorm1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &self.beta);
        f(&join(prefix, "running_mean"), ParamKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
        f(&join(prefix, "running_mean"), ParamKind::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::Buffer, &mut self.running_var);
    }
}

/// Plain feed-forward stack with ReLU between layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `dims` lists input, hidden..., output sizes.
    pub fn new(dims: &[usize], rng: &mut RngStream) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &join(prefix, &format!("fc{i}")), h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> ParamSource<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("fc{i}")), f);
        }
    }
}

/// Cross-entropy between a probability vector (or batch of rows) and a
/// matching one-hot target: `-sum(y * ln(max(p, 1e-12))) / rows`.
pub fn cross_entropy_one_hot<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
) -> Result<Var> {
    validate_one_hot(target)?;
    if tape.value(probs).shape() != target.shape() {
        return Err(Error::shape(format!(
            "cross entropy: probs {:?} vs target {:?}",
            tape.value(probs).shape(),
            target.shape()
        )));
    }
    let (rows, _) = target.as_rows()?;
    let y = tape.constant(target.clone());
    let logp = tape.log_clamp(probs, 1e-12);
    let picked = tape.mul(y, logp)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Every row must be exactly one-hot: a single 1.0 with 0.0 elsewhere.
pub fn validate_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    let (rows, cols) = y.as_rows()?;
    for r in 0..rows {
        let row = &y.data()[r * cols..(r + 1) * cols];
        let ones = row.iter().filter(|&&x| x == T::one()).count();
        let zeros = row.iter().filter(|&&x| x == T::zero()).count();
        if ones != 1 || zeros != cols - 1 {
            return Err(Error::numeric(format!(
                "target row {r} is not one-hot"
            )));
        }
    }
    Ok(())
}
