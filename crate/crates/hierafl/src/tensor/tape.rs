//! Reverse-mode automatic differentiation over a flat operation record.
//!
//! A [`Tape`] owns every intermediate value. Recording an op computes its
//! value eagerly (through the kernels in the parent module) and appends a
//! node holding the inputs needed for the adjoint. [`Tape::backward`] walks
//! the record in reverse, accumulating adjoints, and returns gradients for
//! the named trainable leaves only — constants (teacher distributions,
//! detached features, mixed-in probability matrices) never receive one.
//!
//! Vars are indices into one tape; a tape is built per loss evaluation and
//! dropped after `backward`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{
    cross_entropy, linear, mean_squared_error, nll_of_probs, relu, softmax, Array,
};

/// Gradients keyed by canonical parameter name.
pub type GradientMap = BTreeMap<String, Array>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { name: Option<String> },
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Softmax { x: Var },
    SoftmaxVec { x: Var },
    MixProbs { weights: Var, mats: Vec<Array> },
    NllProbs { probs: Var, labels: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    KlConstTeacher { teacher: Array, logits: Var },
    MseConstTarget { x: Var, target: Array },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
}

struct Node {
    value: Array,
    op: Op,
}

/// Operation record for one loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_names: BTreeSet<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "var does not belong to this tape".into(),
            ))
        }
    }

    /// Value held by a recorded node.
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// The value of a scalar node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = self.value(v);
        if a.shape() == [1] {
            Ok(a.values()[0])
        } else {
            Err(Error::Shape {
                op: "scalar",
                detail: format!("expected shape [1], got {:?}", a.shape()),
            })
        }
    }

    /// Record a constant; it never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf { name: None })
    }

    /// Record a named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Array) -> Result<Var> {
        if !self.param_names.insert(name.to_string()) {
            return Err(Error::Parameter(format!(
                "trainable leaf {name:?} registered twice"
            )));
        }
        Ok(self.push(
            value,
            Op::Leaf {
                name: Some(name.to_string()),
            },
        ))
    }

    /// `x·W + b`, recorded.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(w)?;
        self.check_var(b)?;
        let value = linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Element-wise `max(0, x)`, recorded.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let value = relu(self.value(x));
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Row-wise softmax, recorded.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let value = softmax(self.value(x))?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Softmax over a 1-D vector, recorded.
    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let value = crate::tensor::softmax_vec(self.value(x))?;
        Ok(self.push(value, Op::SoftmaxVec { x }))
    }

    /// Convex mixture `Σ_i weights[i]·mats[i]` of constant probability
    /// matrices under recorded mixing weights.
    pub fn mix_probs(&mut self, weights: Var, mats: Vec<Array>) -> Result<Var> {
        self.check_var(weights)?;
        let w = self.value(weights);
        if w.shape().len() != 1 {
            return Err(Error::Shape {
                op: "mix_probs",
                detail: format!("weights must be 1-D, got {:?}", w.shape()),
            });
        }
        if mats.is_empty() || mats.len() != w.numel() {
            return Err(Error::Shape {
                op: "mix_probs",
                detail: format!("{} weights for {} matrices", w.numel(), mats.len()),
            });
        }
        let (rows, cols) = mats[0].dims2("mix_probs", "matrix")?;
        for (i, m) in mats.iter().enumerate() {
            if m.shape() != mats[0].shape() {
                return Err(Error::Shape {
                    op: "mix_probs",
                    detail: format!(
                        "matrix {i} has shape {:?}, expected {:?}",
                        m.shape(),
                        mats[0].shape()
                    ),
                });
            }
        }
        let mut out = vec![0.0; rows * cols];
        for (wi, m) in w.values().iter().zip(&mats) {
            for (o, &mv) in out.iter_mut().zip(m.values()) {
                *o += wi * mv;
            }
        }
        let value = Array::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::MixProbs { weights, mats }))
    }

    /// Mean negative log of already-mixed probabilities at the labels.
    pub fn nll_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.check_var(probs)?;
        let value = nll_of_probs(self.value(probs), labels)?;
        Ok(self.push(
            Array::scalar(value)?,
            Op::NllProbs {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of logits against integer labels, recorded.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_var(logits)?;
        let value = cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Array::scalar(value)?,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// KL divergence from a constant teacher distribution to the student's
    /// softmax; gradient flows into the student logits only.
    pub fn kl_divergence(&mut self, teacher: &Array, student_logits: Var) -> Result<Var> {
        self.check_var(student_logits)?;
        let value = crate::tensor::kl_divergence(teacher, self.value(student_logits))?;
        Ok(self.push(
            Array::scalar(value)?,
            Op::KlConstTeacher {
                teacher: teacher.clone(),
                logits: student_logits,
            },
        ))
    }

    /// Mean squared error against a constant target; gradient flows into `x`.
    pub fn mean_squared_error(&mut self, x: Var, target: &Array) -> Result<Var> {
        self.check_var(x)?;
        let value = mean_squared_error(self.value(x), target)?;
        Ok(self.push(
            Array::scalar(value)?,
            Op::MseConstTarget {
                x,
                target: target.clone(),
            },
        ))
    }

    /// Element-wise sum of two same-shape recorded values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!(
                    "shapes {:?} and {:?} differ",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Array::new(self.value(a).shape().to_vec(), values)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Multiply a recorded value by a finite constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_var(x)?;
        if !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be finite, got {c}"
            )));
        }
        let values = self.value(x).values().iter().map(|&v| c * v).collect();
        let value = Array::new(self.value(x).shape().to_vec(), values)?;
        Ok(self.push(value, Op::Scale { x, c }))
    }

    /// Reverse sweep from a recorded scalar loss; returns gradients for every
    /// named leaf reached by the sweep.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        self.check_var(loss)?;
        if self.value(loss).shape() != [1] {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "loss must be a scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let d = match adj[i].take() {
                Some(d) => d,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    // gradients are harvested below; put the adjoint back
                    adj[i] = Some(d);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (m, k) = (xv.shape()[0], xv.shape()[1]);
                    let n = wv.shape()[1];
                    let mut dx = vec![0.0; m * k];
                    let mut dw = vec![0.0; k * n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        let d_row = &d[r * n..(r + 1) * n];
                        let x_row = &xv.values()[r * k..(r + 1) * k];
                        for kk in 0..k {
                            let w_row = &wv.values()[kk * n..(kk + 1) * n];
                            let mut acc = 0.0;
                            for (dv, wv2) in d_row.iter().zip(w_row) {
                                acc += dv * wv2;
                            }
                            dx[r * k + kk] += acc;
                            let dw_row = &mut dw[kk * n..(kk + 1) * n];
                            for (dwv, dv) in dw_row.iter_mut().zip(d_row) {
                                *dwv += x_row[kk] * dv;
                            }
                        }
                        for (dbv, dv) in db.iter_mut().zip(d_row) {
                            *dbv += dv;
                        }
                    }
                    accumulate(&mut adj, x.0, dx);
                    accumulate(&mut adj, w.0, dw);
                    accumulate(&mut adj, b.0, db);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let dx = xv
                        .values()
                        .iter()
                        .zip(&d)
                        .map(|(&v, &dv)| if v > 0.0 { dv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, x.0, dx);
                }
                Op::Softmax { x } => {
                    let p = self.value(i_var(i));
                    let (rows, cols) = (p.shape()[0], p.shape()[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let p_row = &p.values()[r * cols..(r + 1) * cols];
                        let d_row = &d[r * cols..(r + 1) * cols];
                        let dot: f64 = p_row.iter().zip(d_row).map(|(&pv, &dv)| pv * dv).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = p_row[c] * (d_row[c] - dot);
                        }
                    }
                    accumulate(&mut adj, x.0, dx);
                }
                Op::SoftmaxVec { x } => {
                    let p = self.value(i_var(i));
                    let dot: f64 = p.values().iter().zip(&d).map(|(&pv, &dv)| pv * dv).sum();
                    let dx = p
                        .values()
                        .iter()
                        .zip(&d)
                        .map(|(&pv, &dv)| pv * (dv - dot))
                        .collect();
                    accumulate(&mut adj, x.0, dx);
                }
                Op::MixProbs { weights, mats } => {
                    let mut dweights = vec![0.0; mats.len()];
                    for (dw, m) in dweights.iter_mut().zip(mats) {
                        *dw = m.values().iter().zip(&d).map(|(&mv, &dv)| mv * dv).sum();
                    }
                    accumulate(&mut adj, weights.0, dweights);
                }
                Op::NllProbs { probs, labels } => {
                    let pv = self.value(*probs);
                    let cols = pv.shape()[1];
                    let batch = labels.len() as f64;
                    let mut dp = vec![0.0; pv.numel()];
                    for (r, &y) in labels.iter().enumerate() {
                        dp[r * cols + y] = -d[0] / (batch * pv.values()[r * cols + y]);
                    }
                    accumulate(&mut adj, probs.0, dp);
                }
                Op::CrossEntropy { logits, labels } => {
                    let p = softmax(self.value(*logits))?;
                    let cols = p.shape()[1];
                    let batch = labels.len() as f64;
                    let mut dl: Vec<f64> = p.values().iter().map(|&pv| d[0] * pv / batch).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        dl[r * cols + y] -= d[0] / batch;
                    }
                    accumulate(&mut adj, logits.0, dl);
                }
                Op::KlConstTeacher { teacher, logits } => {
                    // exact gradient for normalized teacher rows: (p - t)/B
                    let p = softmax(self.value(*logits))?;
                    let batch = p.shape()[0] as f64;
                    let dl = p
                        .values()
                        .iter()
                        .zip(teacher.values())
                        .map(|(&pv, &tv)| d[0] * (pv - tv) / batch)
                        .collect();
                    accumulate(&mut adj, logits.0, dl);
                }
                Op::MseConstTarget { x, target } => {
                    let xv = self.value(*x);
                    let numel = xv.numel() as f64;
                    let dx = xv
                        .values()
                        .iter()
                        .zip(target.values())
                        .map(|(&a, &b)| d[0] * 2.0 * (a - b) / numel)
                        .collect();
                    accumulate(&mut adj, x.0, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, a.0, d.clone());
                    accumulate(&mut adj, b.0, d);
                }
                Op::Scale { x, c } => {
                    let dx = d.iter().map(|&dv| c * dv).collect();
                    accumulate(&mut adj, x.0, dx);
                }
            }
        }

        let mut grads = GradientMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(d) = &adj[i] {
                    grads.insert(
                        name.clone(),
                        Array::new(node.value.shape().to_vec(), d.clone())?,
                    );
                }
            }
        }
        Ok(grads)
    }
}

fn i_var(i: usize) -> Var {
    Var(i)
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
    match &mut adj[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot => *slot = Some(contrib),
    }
}

/// In-place SGD: `p ← p − lr·g` for every key in `grads`.
///
/// Keys absent from `grads` are untouched; every present key must name a
/// parameter of matching shape. Rejects non-positive learning rates and
/// updates that produce non-finite values.
pub fn sgd_step(params: &mut BTreeMap<String, Array>, grads: &GradientMap, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: learning rate must be positive and finite, got {lr}"
        )));
    }
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("sgd_step: unknown parameter {name:?}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                detail: format!(
                    "parameter {name:?} has shape {:?} but gradient has {:?}",
                    p.shape(),
                    g.shape()
                ),
            });
        }
        for (pv, &gv) in p.values_mut().iter_mut().zip(g.values()) {
            *pv -= lr * gv;
        }
        if let Some(bad) = p.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArray(format!(
                "sgd_step: parameter {name:?} became non-finite ({bad})"
            )));
        }
    }
    Ok(())
}
