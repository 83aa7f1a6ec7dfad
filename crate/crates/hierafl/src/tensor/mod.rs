//! Dense f64 arrays and the numeric kernels the rest of the crate builds on.
//!
//! Everything is 64-bit, row-major, and eager. The same kernels back both the
//! plain (value-only) forward passes and the recorded ones on the [`tape`],
//! so there is exactly one implementation of each piece of arithmetic.
//! Softmax, cross-entropy, and KL all use log-sum-exp shifts; batch sums run
//! in storage order so reruns are bit-identical.

pub mod tape;

pub use tape::{sgd_step, GradientMap, Tape, Var};

use crate::error::{Error, Result};

/// Dense array: positive dimensions, row-major finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Array {
    /// Build an array, rejecting empty/zero shapes, length mismatches, and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidArray(
                "shape must have at least one dimension".into(),
            ));
        }
        if let Some(d) = shape.iter().find(|&&d| d == 0) {
            return Err(Error::InvalidArray(format!(
                "zero-sized dimension {d} in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidArray(format!(
                "shape {shape:?} wants {numel} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArray(format!(
                "non-finite value {} at flat index {pos}",
                values[pos]
            )));
        }
        Ok(Array { shape, values })
    }

    /// All-zero array of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Array::new(shape, vec![0.0; numel])
    }

    /// Single-element array holding a scalar.
    pub fn scalar(v: f64) -> Result<Self> {
        Array::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Element of a 2-D array.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[r * self.shape[1] + c]
    }

    /// True when shapes and every value's bit pattern match exactly
    /// (distinguishes 0.0 from -0.0; used by the determinism checks).
    pub fn bitwise_eq(&self, other: &Array) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Interpret as a matrix, or report which operand of `op` is not one.
    pub(crate) fn dims2(&self, op: &'static str, operand: &str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::Shape {
                op,
                detail: format!("{operand} must be 2-D, got shape {:?}", self.shape),
            })
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Matrix product of two 2-D arrays.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = a.dims2("matmul", "lhs")?;
    let (k2, n) = b.dims2("matmul", "rhs")?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("lhs is {m}x{k} but rhs is {k2}x{n}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.values[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.values[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Array::new(vec![m, n], out)
}

/// `x·W + b` with the bias broadcast across rows.
pub fn linear(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    let (m, k) = x.dims2("linear", "input")?;
    let (k2, n) = w.dims2("linear", "weight")?;
    if k != k2 {
        return Err(shape_err(
            "linear",
            format!("input is {m}x{k} but weight is {k2}x{n}"),
        ));
    }
    if b.shape() != [n] {
        return Err(shape_err(
            "linear",
            format!(
                "bias shape {:?} does not match weight columns {n}",
                b.shape()
            ),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o_row = &mut out[i * n..(i + 1) * n];
        o_row.copy_from_slice(&b.values);
        let x_row = &x.values[i * k..(i + 1) * k];
        for (kk, &xik) in x_row.iter().enumerate() {
            let w_row = &w.values[kk * n..(kk + 1) * n];
            for (o, &wv) in o_row.iter_mut().zip(w_row) {
                *o += xik * wv;
            }
        }
    }
    Array::new(vec![m, n], out)
}

/// Element-wise `max(0, x)`.
pub fn relu(x: &Array) -> Array {
    let values = x
        .values
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Array {
        shape: x.shape.clone(),
        values,
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax(x: &Array) -> Result<Array> {
    let (rows, cols) = x.dims2("softmax", "logits")?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.values[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    Array::new(vec![rows, cols], out)
}

/// Softmax over a 1-D vector (used for the meta-learner weights).
pub fn softmax_vec(x: &Array) -> Result<Array> {
    if x.shape().len() != 1 {
        return Err(shape_err(
            "softmax_vec",
            format!("input must be 1-D, got shape {:?}", x.shape()),
        ));
    }
    let max = x.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Array::new(x.shape.clone(), out)
}

/// Row-wise log-softmax (the shifted form `x - max - ln Σ exp(x - max)`).
pub fn log_softmax(x: &Array) -> Result<Array> {
    let (rows, cols) = x.dims2("log_softmax", "logits")?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.values[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = v - max - log_sum;
        }
    }
    Array::new(vec![rows, cols], out)
}

pub(crate) fn check_labels(
    op: &'static str,
    rows: usize,
    cols: usize,
    labels: &[usize],
) -> Result<()> {
    if labels.len() != rows {
        return Err(shape_err(
            op,
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {bad} out of range for {cols} classes"
        )));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[r, label_r]`.
pub fn cross_entropy(logits: &Array, labels: &[usize]) -> Result<f64> {
    let (rows, cols) = logits.dims2("cross_entropy", "logits")?;
    check_labels("cross_entropy", rows, cols, labels)?;
    let ls = log_softmax(logits)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total -= ls.values[r * cols + y];
    }
    Ok(total / rows as f64)
}

/// Mean over the batch of `Σ_c t_c (ln t_c - log_softmax(student)_c)`.
///
/// The teacher is a constant distribution per row; terms with `t_c = 0`
/// contribute nothing. Rounding can push the sum a few ulps negative when the
/// teacher equals the student's softmax, so the result is clamped at zero.
pub fn kl_divergence(teacher: &Array, student_logits: &Array) -> Result<f64> {
    let (rows, cols) = teacher.dims2("kl_divergence", "teacher")?;
    let (rows2, cols2) = student_logits.dims2("kl_divergence", "student")?;
    if (rows, cols) != (rows2, cols2) {
        return Err(shape_err(
            "kl_divergence",
            format!("teacher is {rows}x{cols} but student is {rows2}x{cols2}"),
        ));
    }
    check_teacher_rows(teacher)?;
    let ls = log_softmax(student_logits)?;
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let t = teacher.values[r * cols + c];
            if t > 0.0 {
                total += t * (t.ln() - ls.values[r * cols + c]);
            }
        }
    }
    Ok((total / rows as f64).max(0.0))
}

/// Reject teacher rows with negative mass or sums off 1 by more than 1e-6.
pub(crate) fn check_teacher_rows(teacher: &Array) -> Result<()> {
    let (rows, cols) = teacher.dims2("kl_divergence", "teacher")?;
    for r in 0..rows {
        let row = &teacher.values[r * cols..(r + 1) * cols];
        if let Some(&neg) = row.iter().find(|&&t| t < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kl_divergence: teacher row {r} has negative probability {neg}"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "kl_divergence: teacher row {r} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Mean of element-wise squared differences.
pub fn mean_squared_error(a: &Array, b: &Array) -> Result<f64> {
    if a.shape != b.shape {
        return Err(shape_err(
            "mean_squared_error",
            format!("shapes {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    let total: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.numel() as f64)
}

/// Mean of `-ln probs[r, label_r]` for already-mixed probability rows.
pub fn nll_of_probs(probs: &Array, labels: &[usize]) -> Result<f64> {
    let (rows, cols) = probs.dims2("nll_of_probs", "probs")?;
    check_labels("nll_of_probs", rows, cols, labels)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let p = probs.values[r * cols + y];
        if p <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "nll_of_probs: zero probability at row {r}, label {y}"
            )));
        }
        total -= p.ln();
    }
    Ok(total / rows as f64)
}

/// Row-wise argmax, ties broken toward the lowest index.
pub fn argmax_rows(x: &Array) -> Result<Vec<usize>> {
    let (rows, cols) = x.dims2("argmax_rows", "input")?;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.values[r * cols..(r + 1) * cols];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}
