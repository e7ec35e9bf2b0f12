// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector};

use super::HarnessError;
use crate::data::{dot, DatasetPartition, Matrix};

/// Solves `(XᵀX + ridge·I) w = Xᵀy`.
pub fn ridge_closed_form(x: &Matrix, y: &[f64], ridge: f64) -> Result<Vec<f64>, HarnessError> {
    if x.rows() != y.len() {
        return Err(HarnessError::InvalidSpec(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    let xm = DMatrix::from_row_slice(x.rows(), x.cols(), x.as_slice());
    let normal = xm.transpose() * &xm + DMatrix::<f64>::identity(x.cols(), x.cols()) * ridge;
    let rhs = xm.transpose() * DVector::from_column_slice(y);
    let chol = normal.cholesky().ok_or_else(|| {
        HarnessError::Singular(format!("{} x {} design with ridge {ridge}", x.rows(), x.cols()))
    })?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Loss scaling used by a descent run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `Σ(xθ − y)² + λ/2‖θ‖²` stepped along `Xᵀr + λθ`.
    HalfSum,
    /// `(1/n)Σ(xθ − y)² + λ/2‖θ‖²` stepped along its exact gradient.
    Mean,
}

impl Objective {
    /// Ridge parameter of the closed-form minimizer of the step direction.
    pub fn ridge(self, reg_lambda: f64, n: usize) -> f64 {
        match self {
            Objective::HalfSum => reg_lambda,
            Objective::Mean => reg_lambda * n as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub theta: Vec<f64>,
    /// Loss at the start of each iteration.
    pub losses: Vec<f64>,
    /// Step direction of each iteration.
    pub gradients: Vec<Vec<f64>>,
    /// Model after each iteration.
    pub models: Vec<Vec<f64>>,
}

impl Descent {
    pub fn rounds(&self) -> usize {
        self.losses.len()
    }
}

/// Full-batch gradient descent from zero. Iteration `t` records the loss,
/// takes one step, then stops once `t` reaches `max_iters` or the loss moved
/// by less than `tol·max(1, |previous|)`.
pub fn gradient_descent(
    x: &Matrix,
    y: &[f64],
    objective: Objective,
    learning_rate: f64,
    reg_lambda: f64,
    max_iters: u32,
    tol: f64,
) -> Descent {
    let n = x.rows().max(1) as f64;
    let (loss_scale, grad_scale) = match objective {
        Objective::HalfSum => (1.0, 1.0),
        Objective::Mean => (1.0 / n, 2.0 / n),
    };
    let mut theta = vec![0.0; x.cols()];
    let mut losses: Vec<f64> = Vec::new();
    let (mut gradients, mut models) = (Vec::new(), Vec::new());
    for t in 1..=max_iters.max(1) {
        let r: Vec<f64> = x.mul_vec(&theta).iter().zip(y).map(|(u, y)| u - y).collect();
        let norm2 = dot(&theta, &theta);
        let loss = loss_scale * dot(&r, &r) + 0.5 * reg_lambda * norm2;
        let g: Vec<f64> = x
            .tmul_vec(&r)
            .iter()
            .zip(&theta)
            .map(|(gj, th)| grad_scale * gj + reg_lambda * th)
            .collect();
        for (th, gj) in theta.iter_mut().zip(&g) {
            *th -= learning_rate * gj;
        }
        gradients.push(g);
        models.push(theta.clone());
        let converged = losses
            .last()
            .is_some_and(|&prev: &f64| (loss - prev).abs() < tol * prev.abs().max(1.0));
        losses.push(loss);
        if t >= max_iters || converged {
            break;
        }
    }
    Descent { theta, losses, gradients, models }
}

pub fn mse(predicted: &[f64], actual: &[f64]) -> f64 {
    let n = actual.len().max(1) as f64;
    predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / n
}

/// Coefficient of determination; zero-variance targets score 1 only when
/// matched exactly.
pub fn r_squared(predicted: &[f64], actual: &[f64]) -> f64 {
    let n = actual.len().max(1) as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    let ss_res: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Joins two vertical partitions on their common ids in sorted id order:
/// A's features, then B's, with B's labels.
pub fn pooled_vertical(a: &DatasetPartition, b: &DatasetPartition) -> DatasetPartition {
    let mut ids: Vec<_> = a.ids().iter().filter(|id| b.position(id).is_some()).cloned().collect();
    ids.sort();
    let rows_a: Vec<usize> = ids.iter().map(|id| a.position(id).unwrap()).collect();
    let rows_b: Vec<usize> = ids.iter().map(|id| b.position(id).unwrap()).collect();
    let sub_b = b.select_rows(&rows_b);
    let names = a.feature_names().iter().chain(b.feature_names()).cloned().collect();
    DatasetPartition::new(
        ids,
        a.select_rows(&rows_a).features().hconcat(sub_b.features()),
        sub_b.labels().map(<[f64]>::to_vec),
        names,
    )
    .expect("joined partitions are consistent")
}
