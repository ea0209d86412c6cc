//! Loss functions: softmax cross-entropy, the prototypical episodic loss,
//! the two self-supervised losses and their equal-weight sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, Matrix};
use crate::scalar::Scalar;

/// Mean cross-entropy with its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    pub loss: T,
    /// `d loss / d logits`, already divided by the batch size.
    pub grad: Matrix<T>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

fn check_targets<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<()> {
    if logits.rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows,
            targets.len()
        )));
    }
    if logits.rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= logits.cols) {
        return Err(Error::InvalidArgument(format!(
            "target {t} outside [0, {})",
            logits.cols
        )));
    }
    Ok(())
}

/// `-log softmax(row)[target]` averaged over rows, with max-subtraction.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, targets)?.loss)
}

pub fn cross_entropy_with_grad<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<CrossEntropy<T>> {
    check_targets(logits, targets)?;
    let b = T::from_usize_lossy(logits.rows);
    let mut total = T::zero();
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut predictions = Vec::with_capacity(logits.rows);
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = grad.row_mut(r);
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            z += *gi;
        }
        total += z.ln() - (row[t] - max);
        for gi in g.iter_mut() {
            *gi = *gi / z / b;
        }
        g[t] -= T::one() / b;
        predictions.push(argmax(row));
    }
    let correct = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(CrossEntropy {
        loss: total / b,
        grad,
        accuracy: correct as f64 / targets.len() as f64,
        predictions,
    })
}

/// Cross-entropy over permutation-set indices.
pub fn jigsaw_loss<T: Scalar>(logits: &Matrix<T>, perm_indices: &[usize]) -> Result<CrossEntropy<T>> {
    cross_entropy_with_grad(logits, perm_indices)
}

/// Cross-entropy over the four rotation angles.
pub fn rotation_loss<T: Scalar>(logits: &Matrix<T>, angle_indices: &[usize]) -> Result<CrossEntropy<T>> {
    if logits.cols != 4 {
        return Err(Error::Shape(format!("rotation logits need 4 columns, got {}", logits.cols)));
    }
    cross_entropy_with_grad(logits, angle_indices)
}

/// Per-class mean embeddings; row `i` belongs to local class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes<T> {
    pub means: Matrix<T>,
    pub counts: Vec<usize>,
}

pub fn prototypes<T: Scalar>(support: &Matrix<T>, labels: &[usize], n_way: usize) -> Result<Prototypes<T>> {
    if support.rows != labels.len() {
        return Err(Error::Shape(format!(
            "{} support embeddings for {} labels",
            support.rows,
            labels.len()
        )));
    }
    let mut means = Matrix::zeros(n_way, support.cols);
    let mut counts = vec![0usize; n_way];
    for (r, &l) in labels.iter().enumerate() {
        if l >= n_way {
            return Err(Error::InvalidArgument(format!("support label {l} outside 0..{n_way}")));
        }
        counts[l] += 1;
        for (m, &v) in means.row_mut(l).iter_mut().zip(support.row(r)) {
            *m += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("class {empty} has no support examples")));
    }
    for (c, &count) in counts.iter().enumerate() {
        let inv = T::one() / T::from_usize_lossy(count);
        means.row_mut(c).iter_mut().for_each(|m| *m *= inv);
    }
    Ok(Prototypes { means, counts })
}

/// Negative squared Euclidean distance from every query to every prototype.
pub fn prototype_logits<T: Scalar>(protos: &Prototypes<T>, query: &Matrix<T>) -> Result<Matrix<T>> {
    if query.cols != protos.means.cols {
        return Err(Error::Shape(format!(
            "query dimension {} differs from prototype dimension {}",
            query.cols, protos.means.cols
        )));
    }
    let n = protos.means.rows;
    let mut logits = Matrix::zeros(query.rows, n);
    for q in 0..query.rows {
        let qr = query.row(q);
        for c in 0..n {
            let d: T = qr
                .iter()
                .zip(protos.means.row(c))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            logits.data[q * n + c] = -d;
        }
    }
    Ok(logits)
}

/// Episodic loss with gradients for both the support and query embeddings.
#[derive(Debug, Clone)]
pub struct PrototypeLoss<T> {
    pub loss: T,
    pub accuracy: f64,
    pub logits: Matrix<T>,
    pub predictions: Vec<usize>,
    pub grad_support: Matrix<T>,
    pub grad_query: Matrix<T>,
}

/// Prototypes from the support set, queries scored by negative squared
/// distance, cross-entropy against the query labels. `N` is one more than
/// the largest support label.
pub fn prototype_loss<T: Scalar>(
    support: &Matrix<T>,
    support_labels: &[usize],
    query: &Matrix<T>,
    query_labels: &[usize],
) -> Result<PrototypeLoss<T>> {
    let n_way = support_labels
        .iter()
        .max()
        .map(|&m| m + 1)
        .ok_or_else(|| Error::Shape("empty support set".into()))?;
    if query.rows == 0 {
        return Err(Error::Shape("empty query set".into()));
    }
    let protos = prototypes(support, support_labels, n_way)?;
    let logits = prototype_logits(&protos, query)?;
    let ce = cross_entropy_with_grad(&logits, query_labels)?;

    let dim = query.cols;
    let two = T::lit(2.0);
    let mut grad_query = Matrix::<T>::zeros(query.rows, dim);
    let mut grad_protos = Matrix::<T>::zeros(n_way, dim);
    for q in 0..query.rows {
        for c in 0..n_way {
            let g = ce.grad.get(q, c);
            if g == T::zero() {
                continue;
            }
            let qr = query.row(q);
            let pr = protos.means.row(c);
            for d in 0..dim {
                let diff = two * g * (qr[d] - pr[d]);
                grad_query.data[q * dim + d] -= diff;
                grad_protos.data[c * dim + d] += diff;
            }
        }
    }
    let mut grad_support = Matrix::zeros(support.rows, dim);
    for (r, &l) in support_labels.iter().enumerate() {
        let inv = T::one() / T::from_usize_lossy(protos.counts[l]);
        for (g, &p) in grad_support.row_mut(r).iter_mut().zip(grad_protos.row(l)) {
            *g = p * inv;
        }
    }
    Ok(PrototypeLoss {
        loss: ce.loss,
        accuracy: ce.accuracy,
        predictions: ce.predictions,
        logits,
        grad_support,
        grad_query,
    })
}

/// `L = L_s + L_ss` with both weights fixed at one.
pub fn combine<T: Scalar>(supervised: T, self_supervised: T) -> Result<T> {
    if supervised.is_nan() || self_supervised.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "cannot combine NaN losses (supervised={supervised}, self-supervised={self_supervised})"
        )));
    }
    Ok(supervised + self_supervised)
}

/// Loss breakdown of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub supervised: f64,
    pub self_supervised: f64,
    pub task_accuracies: BTreeMap<String, f64>,
}
