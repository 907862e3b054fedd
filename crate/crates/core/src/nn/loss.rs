use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::model::{ModelKind, ModelParams};
use crate::data::{check_finite, Dataset};
use crate::error::{config, shape, Result};

/// Training objective. Both are averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Squared error of a scalar output against a `{0, 1}` target.
    MeanSquaredError,
}

/// Mean loss and accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eval {
    pub loss: f64,
    pub accuracy: f64,
}

/// Rows evaluated at once; bounds memory on large datasets.
const EVAL_CHUNK: usize = 2048;

pub fn check_compatible(model: &ModelParams, loss: LossKind) -> Result<()> {
    match (model.kind(), loss) {
        (ModelKind::FixedHead, LossKind::CrossEntropy) => {
            config("fixed-head models are trained with squared error")
        }
        (_, LossKind::MeanSquaredError) if model.output_dim() != 1 => {
            config("squared error needs a single output")
        }
        (_, LossKind::CrossEntropy) if model.output_dim() < 2 => {
            config("cross-entropy needs at least two output classes")
        }
        _ => Ok(()),
    }
}

fn check_labels(outputs: usize, labels: &[usize], loss: LossKind) -> Result<()> {
    let limit = match loss {
        LossKind::CrossEntropy => outputs,
        LossKind::MeanSquaredError => 2,
    };
    match labels.iter().find(|&&y| y >= limit) {
        Some(y) => shape(format!("label {y} out of range for {limit} classes")),
        None => Ok(()),
    }
}

/// Summed (not averaged) loss and number of correct predictions.
fn sum_loss(output: &Array2<f64>, labels: &[usize], loss: LossKind) -> (f64, usize) {
    let mut total = 0.0;
    let mut correct = 0;
    match loss {
        LossKind::CrossEntropy => {
            for (row, &y) in output.axis_iter(Axis(0)).zip(labels) {
                let (arg, max) = argmax(row.iter().copied());
                // Leave out the largest term (exactly 1) so that ln_1p keeps
                // precision when the prediction is confident.
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != arg)
                    .map(|(_, v)| (v - max).exp())
                    .sum();
                total += (max - row[y]) + rest.ln_1p();
                correct += usize::from(arg == y);
            }
        }
        LossKind::MeanSquaredError => {
            for (&o, &y) in output.column(0).iter().zip(labels) {
                let r = o - y as f64;
                total += r * r;
                correct += usize::from((o > 0.5) == (y == 1));
            }
        }
    }
    (total, correct)
}

/// Index and value of the largest entry, lowest index on ties.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values.enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
        if v > bv {
            (i, v)
        } else {
            (bi, bv)
        }
    })
}

/// Mean loss over the batch and its gradient with respect to the output.
pub fn loss_and_output_grad(
    output: &Array2<f64>,
    labels: &[usize],
    loss: LossKind,
) -> (f64, Array2<f64>) {
    let b = labels.len() as f64;
    let (total, _) = sum_loss(output, labels, loss);
    let mut grad = Array2::zeros(output.dim());
    match loss {
        LossKind::CrossEntropy => {
            for ((row, mut g), &y) in output.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(labels) {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for (gk, &v) in g.iter_mut().zip(row.iter()) {
                    *gk = (v - max).exp() / z / b;
                }
                g[y] -= 1.0 / b;
            }
        }
        LossKind::MeanSquaredError => {
            for ((g, &o), &y) in grad.column_mut(0).iter_mut().zip(output.column(0)).zip(labels) {
                *g = 2.0 * (o - y as f64) / b;
            }
        }
    }
    (total / b, grad)
}

/// Mean loss of a batch and its exact gradient.
pub fn loss_and_grads(
    model: &ModelParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    loss: LossKind,
) -> Result<(f64, ModelParams)> {
    if x.nrows() != labels.len() {
        return shape(format!("{} rows but {} labels", x.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return shape("empty batch");
    }
    check_compatible(model, loss)?;
    check_labels(model.output_dim(), labels, loss)?;
    check_finite("batch inputs", x)?;
    let trace = model.forward_trace(x)?;
    let (value, d_out) = loss_and_output_grad(&trace.output, labels, loss);
    let grads = model.backward(x, &trace, &d_out, None)?;
    Ok((value, grads))
}

/// Mean loss only.
pub fn batch_loss(
    model: &ModelParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    loss: LossKind,
) -> Result<f64> {
    check_compatible(model, loss)?;
    check_labels(model.output_dim(), labels, loss)?;
    let out = model.forward(x)?;
    Ok(sum_loss(&out, labels, loss).0 / labels.len() as f64)
}

/// Mean loss and accuracy over a full dataset, evaluated in fixed chunks.
pub fn evaluate(model: &ModelParams, data: &Dataset, loss: LossKind) -> Result<Eval> {
    check_compatible(model, loss)?;
    check_labels(model.output_dim(), data.labels(), loss)?;
    if data.is_empty() {
        return shape("cannot evaluate on an empty dataset");
    }
    let mut total = 0.0;
    let mut correct = 0;
    let x = data.inputs();
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let out = model.forward(x.slice(ndarray::s![start..end, ..]))?;
        let (t, c) = sum_loss(&out, &data.labels()[start..end], loss);
        total += t;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(Eval { loss: total / n, accuracy: correct as f64 / n })
}

/// Predicted class per row (threshold 0.5 for scalar outputs).
pub fn predict(model: &ModelParams, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let out = model.forward(x)?;
    Ok(if out.ncols() == 1 {
        out.column(0).iter().map(|&o| usize::from(o > 0.5)).collect()
    } else {
        out.axis_iter(Axis(0)).map(|r| argmax(r.iter().copied()).0).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Architecture, Dense};
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_k() {
        let out = Array2::zeros((3, 10));
        let (l, g) = loss_and_output_grad(&out, &[0, 4, 9], LossKind::CrossEntropy);
        assert!((l - 10f64.ln()).abs() < 1e-15);
        assert!((g.sum()).abs() < 1e-15);
    }

    #[test]
    fn perfect_regression_has_zero_loss_and_gradient() {
        let m = ModelParams::new(
            ModelKind::GeneralMlp,
            vec![
                Dense { weights: array![[1.0]], bias: Some(array![0.0]) },
                Dense { weights: array![[1.0]], bias: Some(array![0.0]) },
            ],
        )
        .unwrap();
        let (l, g) =
            loss_and_grads(&m, array![[0.0], [1.0]].view(), &[0, 1], LossKind::MeanSquaredError)
                .unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn cross_entropy_falls_along_the_correct_logit_ray() {
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let mut out = Array2::zeros((1, 4));
            out[[0, 2]] = k as f64;
            let (l, _) = loss_and_output_grad(&out, &[2], LossKind::CrossEntropy);
            assert!(l >= 0.0 && l < prev, "{k} {l} {prev}");
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn non_finite_input_is_reported_with_its_index() {
        let m = init_model(&Architecture::mlp(&[2, 3, 2]), 0).unwrap();
        let x = array![[0.0, 1.0], [f64::INFINITY, 0.0]];
        match loss_and_grads(&m, x.view(), &[0, 1], LossKind::CrossEntropy) {
            Err(crate::Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fixed_head_rejects_cross_entropy() {
        let m = init_model(&Architecture::fixed_head(3, 4), 0).unwrap();
        assert!(check_compatible(&m, LossKind::CrossEntropy).is_err());
        assert!(check_compatible(&m, LossKind::MeanSquaredError).is_ok());
    }

    #[test]
    fn chunked_evaluation_matches_single_batch() {
        let m = init_model(&Architecture::mlp(&[2, 8, 3]), 1).unwrap();
        let n = 5000;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let d = Dataset::new(x.clone(), y.clone()).unwrap();
        let e = evaluate(&m, &d, LossKind::CrossEntropy).unwrap();
        let l = batch_loss(&m, x.view(), &y, LossKind::CrossEntropy).unwrap();
        assert!((e.loss - l).abs() < 1e-12);
        let pred = predict(&m, x.view()).unwrap();
        let acc = pred.iter().zip(&y).filter(|(p, y)| p == y).count() as f64 / n as f64;
        assert_eq!(acc, e.accuracy);
    }
}
