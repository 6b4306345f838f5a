//! Fully connected head and the softmax / negative log-likelihood loss.
//! Rows of every batch matrix are samples.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{dim_err, QcnnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    /// `outputs x inputs`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

impl FcLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

pub fn fc_forward(layer: &FcLayer, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != layer.inputs() {
        return dim_err(format!("fc layer takes {} inputs, got {}", layer.inputs(), x.ncols()));
    }
    Ok(x.dot(&layer.weight.t()) + &layer.bias)
}

pub fn fc_backward(layer: &FcLayer, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Result<FcGrad> {
    if x.nrows() != dy.nrows() || dy.ncols() != layer.outputs() || x.ncols() != layer.inputs() {
        return dim_err("fc backward shapes disagree with the layer");
    }
    Ok(FcGrad { weight: dy.t().dot(&x), bias: dy.sum_axis(Axis(0)), input: dy.dot(&layer.weight) })
}

pub fn relu_in_place(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_in_place(grad: &mut Array2<f64>, activated: &Array2<f64>) {
    grad.zip_mut_with(activated, |g, &a| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

/// Mean negative log-likelihood of the softmax over each row, and its
/// gradient with respect to the logits.
pub fn softmax_nll(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return dim_err(format!("{} labels for {n} rows", labels.len()));
    }
    if n == 0 {
        return dim_err("empty batch");
    }
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for (r, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        if label >= k {
            return Err(QcnnError::IndexOutOfRange { index: label, len: k });
        }
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[label];
        for c in 0..k {
            grad[[r, c]] = (row[c] - lse).exp() / n as f64;
        }
        grad[[r, label]] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
