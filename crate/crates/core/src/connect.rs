//! Parameter paths between two models, loss and accuracy along them, and
//! barrier heights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config, Error, Result};
use crate::nn::{
    batch_order, evaluate, loss_and_grads, lr_at, sgd_step, LossKind, ModelParams, SgdState,
    TrainConfig,
};
use crate::report::fmt_f64;
use crate::rng::{self, tag};
use rand::Rng;

/// Default number of evenly spaced points on a path.
pub const DEFAULT_GRID: usize = 21;

/// A path `gamma(t)` with `gamma(0) = start` and `gamma(1) = end`.
#[derive(Debug, Clone, PartialEq)]
pub enum PathSpec {
    /// `(1 - t) start + t end`.
    Linear { start: ModelParams, end: ModelParams },
    /// `(1 - t)^2 start + 2 t (1 - t) mid + t^2 end`.
    Bezier { start: ModelParams, mid: ModelParams, end: ModelParams },
}

impl PathSpec {
    pub fn linear(start: ModelParams, end: ModelParams) -> Result<Self> {
        start.require_same_architecture(&end)?;
        Ok(Self::Linear { start, end })
    }

    pub fn bezier(start: ModelParams, mid: ModelParams, end: ModelParams) -> Result<Self> {
        start.require_same_architecture(&end)?;
        start.require_same_architecture(&mid)?;
        Ok(Self::Bezier { start, mid, end })
    }

    pub fn start(&self) -> &ModelParams {
        match self {
            Self::Linear { start, .. } | Self::Bezier { start, .. } => start,
        }
    }

    pub fn end(&self) -> &ModelParams {
        match self {
            Self::Linear { end, .. } | Self::Bezier { end, .. } => end,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::Bezier { .. } => "bezier",
        }
    }

    /// Point with explicit weights `u = 1 - t` and `t`. Grid evaluation
    /// passes exact rationals so that reversing a linear path mirrors it
    /// bit for bit.
    fn point_weighted(&self, u: f64, t: f64) -> ModelParams {
        // Coordinates shared by all control points are copied, so a path
        // between identical models is exactly constant.
        match self {
            Self::Linear { start, end } => start
                .zip_map(end, |a, b| if a == b { a } else { u * a + t * b })
                .expect("checked at construction"),
            Self::Bezier { start, mid, end } => {
                let (ca, cm, cb) = (u * u, 2.0 * t * u, t * t);
                let mut p = start.clone();
                for ((o, m), e) in p.tensors_mut().into_iter().zip(mid.tensors()).zip(end.tensors()) {
                    for ((a, &m), &b) in o.iter_mut().zip(m).zip(e) {
                        if !(*a == m && m == b) {
                            *a = ca * *a + cm * m + cb * b;
                        }
                    }
                }
                p
            }
        }
    }
}

/// Model at position `t` in `[0, 1]`.
pub fn point_on_path(spec: &PathSpec, t: f64) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&t) {
        return config(format!("path position {t} outside [0, 1]"));
    }
    Ok(spec.point_weighted(1.0 - t, t))
}

/// `n` evenly spaced positions from 0 to 1 and the matching `1 - t` weights.
fn grid_weights(n: usize) -> Vec<(f64, f64)> {
    let d = (n - 1) as f64;
    (0..n).map(|i| ((n - 1 - i) as f64 / d, i as f64 / d)).collect()
}

/// Largest excess of the curve over the chord between its endpoints,
/// clamped at zero.
pub fn barrier_height(ts: &[f64], losses: &[f64]) -> f64 {
    let (Some(&l0), Some(&l1)) = (losses.first(), losses.last()) else {
        return 0.0;
    };
    // Endpoints lie on the chord by definition and are skipped.
    let n = losses.len();
    ts.iter()
        .zip(losses)
        .take(n.saturating_sub(1))
        .skip(1)
        .map(|(&t, &l)| l - (l0 + t * (l1 - l0)))
        .fold(0.0, f64::max)
}

/// Loss and accuracy along a path on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCurve {
    pub dataset: String,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub barrier: f64,
}

impl PathCurve {
    pub fn start_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn end_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }

    /// Largest distance, in accuracy points (0-100), between an interior point
    /// and either endpoint.
    pub fn interior_accuracy_deviation(&self) -> f64 {
        let a0 = self.accuracies[0];
        let a1 = *self.accuracies.last().unwrap();
        let n = self.accuracies.len();
        self.accuracies[1..n - 1]
            .iter()
            .map(|&a| (a - a0).abs().max((a - a1).abs()) * 100.0)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEvalReport {
    pub path: String,
    pub ts: Vec<f64>,
    pub curves: Vec<PathCurve>,
}

impl PathEvalReport {
    pub fn curve(&self, name: &str) -> Option<&PathCurve> {
        self.curves.iter().find(|c| c.dataset == name)
    }

    /// `dataset,t,loss,accuracy`, one row per dataset and grid point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "dataset,t,loss,accuracy")?;
        for c in &self.curves {
            for (i, &t) in self.ts.iter().enumerate() {
                writeln!(w, "{},{},{},{}", c.dataset, fmt_f64(t), fmt_f64(c.losses[i]), fmt_f64(c.accuracies[i]))?;
            }
        }
        Ok(())
    }
}

/// Full-dataset loss and accuracy at `grid` evenly spaced points.
pub fn eval_path(
    spec: &PathSpec,
    datasets: &[(&str, &Dataset)],
    grid: usize,
    loss: LossKind,
) -> Result<PathEvalReport> {
    if grid < 3 {
        return config(format!("a path grid needs at least 3 points, got {grid}"));
    }
    let weights = grid_weights(grid);
    let ts: Vec<f64> = weights.iter().map(|&(_, t)| t).collect();
    let mut curves: Vec<PathCurve> = datasets
        .iter()
        .map(|(name, _)| PathCurve {
            dataset: name.to_string(),
            losses: Vec::with_capacity(grid),
            accuracies: Vec::with_capacity(grid),
            barrier: 0.0,
        })
        .collect();
    for &(u, t) in &weights {
        // Endpoints are used as given rather than recomputed.
        let owned;
        let model = if t == 0.0 {
            spec.start()
        } else if u == 0.0 {
            spec.end()
        } else {
            owned = spec.point_weighted(u, t);
            &owned
        };
        for (curve, (_, data)) in curves.iter_mut().zip(datasets) {
            let e = evaluate(model, data, loss)?;
            curve.losses.push(e.loss);
            curve.accuracies.push(e.accuracy);
        }
    }
    for c in &mut curves {
        c.barrier = barrier_height(&ts, &c.losses);
    }
    Ok(PathEvalReport { path: spec.kind_name().into(), ts, curves })
}

/// Gradient with respect to the Bezier midpoint of the batch loss at
/// `gamma(t)`: the gradient at the path point times `2 t (1 - t)`.
pub fn midpoint_gradient(
    start: &ModelParams,
    mid: &ModelParams,
    end: &ModelParams,
    t: f64,
    batch: &Dataset,
    loss: LossKind,
) -> Result<(f64, ModelParams)> {
    let spec = PathSpec::bezier(start.clone(), mid.clone(), end.clone())?;
    let point = point_on_path(&spec, t)?;
    let (value, mut g) = loss_and_grads(&point, batch.inputs(), batch.labels(), loss)?;
    g.scale(2.0 * t * (1.0 - t));
    Ok((value, g))
}

/// Fit the midpoint of a quadratic path with frozen endpoints. The midpoint
/// starts at the average of the endpoints; each step draws `t` uniformly and
/// one mini-batch.
pub fn train_quadratic_midpoint(
    start: &ModelParams,
    end: &ModelParams,
    data: &Dataset,
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    start.require_same_architecture(end)?;
    let mut mid = start.lerp(end, 0.5)?;
    let mut state = SgdState::new(&mid);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let h = cfg.hyper(lr_at(cfg, epoch)?);
        for idx in batch_order(cfg.seed, epoch, data.len()).chunks(cfg.batch_size) {
            let t: f64 = rng::stream(cfg.seed, &[tag::PATH_T, step as u64]).random_range(0.0..=1.0);
            let batch = data.select(idx);
            let (value, g) = midpoint_gradient(start, &mid, end, t, &batch, loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step, reason: format!("path loss became {value}") });
            }
            sgd_step(&mut mid, &g, &mut state, h)?;
            step += 1;
        }
    }
    if !mid.is_finite() {
        return Err(Error::Diverged { step, reason: "midpoint became non-finite".into() });
    }
    Ok(mid)
}

/// Connectivity verdict on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetVerdict {
    pub dataset: String,
    pub barrier: f64,
    pub start_loss: f64,
    pub end_loss: f64,
    pub interior_accuracy_deviation: f64,
    /// Both endpoints have loss below the minimizer tolerance (true when no
    /// tolerance is set).
    pub endpoints_minimize: bool,
    pub connected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub epsilon_mc: f64,
    pub minimizer_tolerance: Option<f64>,
    pub verdicts: Vec<DatasetVerdict>,
    /// Connected on the base dataset and on every counterfactual.
    pub mechanistically_connected: bool,
    pub curves: PathEvalReport,
}

impl ConnectivityReport {
    pub fn verdict(&self, name: &str) -> Option<&DatasetVerdict> {
        self.verdicts.iter().find(|v| v.dataset == name)
    }
}

/// Evaluate the path on the base dataset and its counterfactuals. A dataset
/// is connected when the barrier is at most `epsilon_mc` and, if
/// `minimizer_tolerance` is given, both endpoints reach loss below it.
pub fn mechanistic_connectivity_report(
    spec: &PathSpec,
    base: (&str, &Dataset),
    counterfactuals: &[(&str, &Dataset)],
    epsilon_mc: f64,
    minimizer_tolerance: Option<f64>,
    grid: usize,
    loss: LossKind,
) -> Result<ConnectivityReport> {
    let mut all = vec![base];
    all.extend_from_slice(counterfactuals);
    let curves = eval_path(spec, &all, grid, loss)?;
    let verdicts: Vec<DatasetVerdict> = curves
        .curves
        .iter()
        .map(|c| {
            let endpoints_minimize =
                minimizer_tolerance.is_none_or(|tol| c.start_loss() < tol && c.end_loss() < tol);
            DatasetVerdict {
                dataset: c.dataset.clone(),
                barrier: c.barrier,
                start_loss: c.start_loss(),
                end_loss: c.end_loss(),
                interior_accuracy_deviation: c.interior_accuracy_deviation(),
                endpoints_minimize,
                connected: endpoints_minimize && c.barrier <= epsilon_mc,
            }
        })
        .collect();
    Ok(ConnectivityReport {
        epsilon_mc,
        minimizer_tolerance,
        mechanistically_connected: verdicts.iter().all(|v| v.connected),
        verdicts,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Architecture};
    use ndarray::Array2;

    fn models() -> (ModelParams, ModelParams) {
        let arch = Architecture::mlp(&[3, 5, 2]);
        (init_model(&arch, 1).unwrap(), init_model(&arch, 2).unwrap())
    }

    fn data() -> Dataset {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 5 + j * 7) % 13) as f64 / 6.0 - 1.0);
        Dataset::new(x, (0..40).map(|i| i % 2).collect()).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let (a, b) = models();
        let mid = a.lerp(&b, 0.3).unwrap();
        for spec in [
            PathSpec::linear(a.clone(), b.clone()).unwrap(),
            PathSpec::bezier(a.clone(), mid, b.clone()).unwrap(),
        ] {
            assert_eq!(point_on_path(&spec, 0.0).unwrap(), a);
            assert_eq!(point_on_path(&spec, 1.0).unwrap(), b);
            assert!(point_on_path(&spec, 1.5).is_err());
        }
    }

    #[test]
    fn barrier_hand_cases() {
        let ts = [0.0, 0.5, 1.0];
        assert_eq!(barrier_height(&ts, &[0.3, 0.3, 0.3]), 0.0);
        assert_eq!(barrier_height(&ts, &[0.25, 0.0, 0.25]), 0.0);
        assert_eq!(barrier_height(&ts, &[0.0, 2.0, 0.0]), 2.0);
    }

    #[test]
    fn identical_endpoints_give_a_flat_curve() {
        let (a, _) = models();
        let spec = PathSpec::linear(a.clone(), a).unwrap();
        let d = data();
        let r = eval_path(&spec, &[("d", &d)], 11, LossKind::CrossEntropy).unwrap();
        let c = &r.curves[0];
        assert!(c.losses.iter().all(|&l| l == c.losses[0]));
        assert_eq!(c.barrier, 0.0);
        assert!(eval_path(&spec, &[("d", &d)], 2, LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn reversed_linear_path_mirrors_exactly() {
        let (a, b) = models();
        let d = data();
        let f = eval_path(&PathSpec::linear(a.clone(), b.clone()).unwrap(), &[("d", &d)], 21, LossKind::CrossEntropy)
            .unwrap();
        let r = eval_path(&PathSpec::linear(b, a).unwrap(), &[("d", &d)], 21, LossKind::CrossEntropy).unwrap();
        let mut back = r.curves[0].losses.clone();
        back.reverse();
        assert_eq!(f.curves[0].losses, back);
    }

    #[test]
    fn midpoint_gradient_vanishes_at_the_ends() {
        let (a, b) = models();
        let mid = a.lerp(&b, 0.5).unwrap();
        let d = data();
        for t in [0.0, 1.0] {
            let (_, g) = midpoint_gradient(&a, &mid, &b, t, &d, LossKind::CrossEntropy).unwrap();
            assert_eq!(g.norm(), 0.0);
        }
    }

    #[test]
    fn csv_has_one_row_per_dataset_and_point() {
        let (a, b) = models();
        let d = data();
        let r = eval_path(&PathSpec::linear(a, b).unwrap(), &[("x", &d), ("y", &d)], 5, LossKind::CrossEntropy)
            .unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1 + 2 * 5);
    }
}
