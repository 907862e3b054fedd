use ndarray::ArrayView2;
use rand::seq::index::sample;

use super::loss::{batch_loss, loss_and_grads, LossKind};
use super::model::ModelParams;
use crate::error::{config, Result};
use crate::rng;

/// Coordinates checked when a model has more parameters than this.
pub const GRAD_CHECK_SAMPLE: usize = 400;

/// Denominator floor so that coordinates with vanishing gradients compare
/// absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the analytic gradient and central
/// differences `(L(p + h) - L(p - h)) / 2h`. Models with more than
/// [`GRAD_CHECK_SAMPLE`] parameters are checked on a seeded random subset.
pub fn grad_check(
    model: &ModelParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    loss: LossKind,
    step: f64,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return config(format!("finite-difference step must be positive, got {step}"));
    }
    let (_, grads) = loss_and_grads(model, x, labels, loss)?;
    let analytic = grads.to_flat();
    let base = model.to_flat();
    let n = base.len();
    let coords: Vec<usize> = if n <= GRAD_CHECK_SAMPLE {
        (0..n).collect()
    } else {
        let mut r = rng::stream(seed, &[rng::tag::GRADCHECK]);
        let mut c = sample(&mut r, n, GRAD_CHECK_SAMPLE).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = base.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        probe[i] = base[i] + step;
        let up = batch_loss(&model.with_flat(&probe)?, x, labels, loss)?;
        probe[i] = base[i] - step;
        let down = batch_loss(&model.with_flat(&probe)?, x, labels, loss)?;
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
