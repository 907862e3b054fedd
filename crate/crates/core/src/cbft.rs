//! Connectivity-based fine-tuning and the baselines it is compared with.
//!
//! Starting from a model trained on cue-laden data `D_C`, fine-tuning on a
//! small clean set `D_NC` alternates two updates per iteration:
//!
//! * A: cross-entropy on a `D_NC` batch plus `w_I` times the squared distance
//!   between per-class mean penultimate representations of a `D_C` batch and
//!   the `D_NC` batch;
//! * B: `|lambda_B - CE(D_C batch)|` evaluated at a random point
//!   `(1 - t) theta + t theta_C` of the straight line back to the anchor, with
//!   the gradient scaled by `1 - t`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config, Error, Result};
use crate::grid::TestFamily;
use crate::nn::{
    batch_order, evaluate, init_model, loss_and_output_grad, lr_at, sgd_step, train, Architecture,
    LossKind, ModelKind, ModelParams, Schedule, SgdHyper, SgdState, TrainConfig,
};
use crate::rng::{self, tag};

/// Draw from Normal(mean, std) restricted to `[0, 1]` by rejection.
pub fn sample_trunc_normal_with(rng: &mut impl Rng, mean: f64, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let t = mean + std * z;
        if (0.0..=1.0).contains(&t) {
            return t;
        }
    }
}

/// Normal(0.5, 0.5) restricted to `[0, 1]`.
pub fn sample_trunc_normal(rng: &mut impl Rng) -> f64 {
    sample_trunc_normal_with(rng, 0.5, 0.5)
}

/// How class means in the representation-matching term are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMeans {
    /// Means over the class members of the current mini-batches.
    #[default]
    MiniBatch,
    /// `D_C` means recomputed over the full set at the start of each epoch
    /// (treated as constants); `D_NC` means from the mini-batch.
    FullDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbftConfig {
    /// Target cross-entropy on the path back to the anchor.
    pub lambda_b: f64,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size_c: usize,
    pub batch_size_nc: usize,
    /// Weight of the representation-matching term; `None` means `1 / classes`.
    pub invariance_weight: Option<f64>,
    pub barrier_weight: f64,
    pub t_mean: f64,
    pub t_std: f64,
    /// A class contributes to the matching term only if both batches hold at
    /// least this many of its samples.
    pub min_class_samples: usize,
    pub class_means: ClassMeans,
    pub seed: u64,
}

impl Default for CbftConfig {
    fn default() -> Self {
        Self {
            lambda_b: 1.0,
            epochs: 40,
            lr: 0.05,
            schedule: Schedule::Cosine,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size_c: 128,
            batch_size_nc: 128,
            invariance_weight: None,
            barrier_weight: 1.0,
            t_mean: 0.5,
            t_std: 0.5,
            min_class_samples: 1,
            class_means: ClassMeans::MiniBatch,
            seed: 0,
        }
    }
}

impl CbftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_b > 0.0) {
            return config("lambda_B must be positive");
        }
        if !(self.t_std > 0.0) || !(0.0..=1.0).contains(&self.t_mean) {
            return config("t sampler needs a positive std and a mean inside [0, 1]");
        }
        if self.min_class_samples == 0 {
            return config("minimum class samples must be at least 1");
        }
        self.train_config(self.batch_size_nc).validate()?;
        if self.batch_size_c == 0 {
            return config("batch sizes must be positive");
        }
        Ok(())
    }

    fn train_config(&self, batch_size: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size,
            epochs: self.epochs,
            schedule: self.schedule.clone(),
            seed: self.seed,
        }
    }

    /// The plain fine-tuning run that step A alone reproduces.
    pub fn equivalent_naive(&self) -> TrainConfig {
        self.train_config(self.batch_size_nc)
    }
}

/// Representation-matching loss and its gradients with respect to the two
/// representation batches.
#[derive(Debug, Clone)]
pub struct InvarianceTerm {
    pub value: f64,
    pub grad_c: Array2<f64>,
    pub grad_nc: Array2<f64>,
    /// Classes that contributed.
    pub classes_used: usize,
}

/// `sum_k |mean(rep_c of class k) - mean(rep_nc of class k)|^2` over classes
/// with at least `min_count` members on both sides.
pub fn invariance_term(
    rep_c: ArrayView2<'_, f64>,
    labels_c: &[usize],
    rep_nc: ArrayView2<'_, f64>,
    labels_nc: &[usize],
    classes: usize,
    min_count: usize,
) -> InvarianceTerm {
    let w = rep_c.ncols();
    let means = |rep: ArrayView2<'_, f64>, labels: &[usize]| {
        let mut sums = Array2::<f64>::zeros((classes, w));
        let mut counts = vec![0usize; classes];
        for (row, &y) in rep.rows().into_iter().zip(labels) {
            sums.row_mut(y).scaled_add(1.0, &row);
            counts[y] += 1;
        }
        for (mut s, &n) in sums.rows_mut().into_iter().zip(&counts) {
            if n > 0 {
                s /= n as f64;
            }
        }
        (sums, counts)
    };
    let (mc, nc_counts_c) = means(rep_c, labels_c);
    let (mn, counts_n) = means(rep_nc, labels_nc);
    let mut value = 0.0;
    let mut diff = Array2::<f64>::zeros((classes, w));
    let mut used = 0;
    for k in 0..classes {
        if nc_counts_c[k] < min_count || counts_n[k] < min_count {
            continue;
        }
        let d = &mc.row(k) - &mn.row(k);
        value += d.dot(&d);
        diff.row_mut(k).assign(&d);
        used += 1;
    }
    let grad = |rep: ArrayView2<'_, f64>, labels: &[usize], counts: &[usize], sign: f64| {
        let mut g = Array2::<f64>::zeros(rep.dim());
        for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
            if counts[y] > 0 {
                row.scaled_add(sign * 2.0 / counts[y] as f64, &diff.row(y));
            }
        }
        g
    };
    InvarianceTerm {
        value,
        grad_c: grad(rep_c, labels_c, &nc_counts_c, 1.0),
        grad_nc: grad(rep_nc, labels_nc, &counts_n, -1.0),
        classes_used: used,
    }
}

/// Which half of an iteration an observed step belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CbftPhase {
    Fit,
    /// Barrier step at path position `t`.
    Barrier { t: f64 },
}

/// Passed to the observer after every parameter update.
pub struct CbftStep<'a> {
    pub iteration: usize,
    pub phase: CbftPhase,
    pub loss: f64,
    pub lr: f64,
    pub before: &'a ModelParams,
    pub after: &'a ModelParams,
    /// Gradient of the step's objective at the point where it was evaluated,
    /// before any `1 - t` scaling.
    pub raw_grad: &'a ModelParams,
}

fn require_classifier(model: &ModelParams) -> Result<()> {
    if model.kind() != ModelKind::GeneralMlp || model.num_hidden() == 0 {
        return config("fine-tuning needs an MLP classifier with at least one hidden layer");
    }
    Ok(())
}

pub fn cbft_train(
    anchor: &ModelParams,
    d_c: &Dataset,
    d_nc: &Dataset,
    cfg: &CbftConfig,
) -> Result<ModelParams> {
    cbft_train_observed(anchor, d_c, d_nc, cfg, |_| {})
}

/// [`cbft_train`] with a callback after every update.
pub fn cbft_train_observed(
    anchor: &ModelParams,
    d_c: &Dataset,
    d_nc: &Dataset,
    cfg: &CbftConfig,
    mut observe: impl FnMut(&CbftStep<'_>),
) -> Result<ModelParams> {
    cfg.validate()?;
    require_classifier(anchor)?;
    if d_c.is_empty() || d_nc.is_empty() {
        return config("both datasets must be non-empty");
    }
    d_c.check_finite()?;
    d_nc.check_finite()?;
    let classes = anchor.output_dim();
    let w_inv = cfg.invariance_weight.unwrap_or(1.0 / classes as f64);
    let naive = cfg.equivalent_naive();
    let mut theta = anchor.clone();
    let mut fit_state = SgdState::new(&theta);
    let mut barrier_state = SgdState::new(&theta);
    let mut t_rng = rng::stream(cfg.seed, &[tag::CBFT, 0]);
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(&naive, epoch)?;
        let fit_h = naive.hyper(lr);
        let barrier_h = SgdHyper { lr, momentum: cfg.momentum, weight_decay: 0.0 };
        let mut c_order: Vec<usize> = (0..d_c.len()).collect();
        c_order.shuffle(&mut rng::stream(cfg.seed, &[tag::CBFT, 1, epoch as u64]));
        let full_means = match cfg.class_means {
            ClassMeans::FullDataset if w_inv != 0.0 => Some(full_class_means(&theta, d_c, classes)?),
            _ => None,
        };
        let nc_order = batch_order(cfg.seed, epoch, d_nc.len());
        for (b, nc_idx) in nc_order.chunks(cfg.batch_size_nc).enumerate() {
            let start = (b * cfg.batch_size_c) % d_c.len();
            let c_idx: Vec<usize> =
                (0..cfg.batch_size_c.min(d_c.len())).map(|k| c_order[(start + k) % d_c.len()]).collect();
            let nc_batch = d_nc.select(nc_idx);
            let c_batch = d_c.select(&c_idx);

            // Step A: fit the clean batch and match class representations.
            let tn = theta.forward_trace(nc_batch.inputs())?;
            let (ce, d_out) = loss_and_output_grad(&tn.output, nc_batch.labels(), LossKind::CrossEntropy);
            let mut loss_a = ce;
            let grads = if w_inv == 0.0 {
                theta.backward(nc_batch.inputs(), &tn, &d_out, None)?
            } else {
                let tc = theta.forward_trace(c_batch.inputs())?;
                let term = match &full_means {
                    None => invariance_term(
                        tc.penultimate().unwrap().view(),
                        c_batch.labels(),
                        tn.penultimate().unwrap().view(),
                        nc_batch.labels(),
                        classes,
                        cfg.min_class_samples,
                    ),
                    Some((means, counts)) => invariance_to_means(
                        means,
                        counts,
                        tn.penultimate().unwrap().view(),
                        nc_batch.labels(),
                        cfg.min_class_samples,
                    ),
                };
                loss_a += w_inv * term.value;
                let mut g = theta.backward(nc_batch.inputs(), &tn, &d_out, Some(&(term.grad_nc * w_inv)))?;
                if full_means.is_none() {
                    let zero = Array2::zeros(tc.output.dim());
                    let gc = theta.backward(c_batch.inputs(), &tc, &zero, Some(&(term.grad_c * w_inv)))?;
                    g.add_scaled(1.0, &gc)?;
                }
                g
            };
            if !loss_a.is_finite() {
                return Err(Error::Diverged { step: iteration, reason: format!("fit loss became {loss_a}") });
            }
            let before = theta.clone();
            sgd_step(&mut theta, &grads, &mut fit_state, fit_h)?;
            observe(&CbftStep {
                iteration,
                phase: CbftPhase::Fit,
                loss: loss_a,
                lr,
                before: &before,
                after: &theta,
                raw_grad: &grads,
            });

            // Step B: raise the loss on the line back to the anchor.
            let t = sample_trunc_normal_with(&mut t_rng, cfg.t_mean, cfg.t_std);
            if cfg.barrier_weight != 0.0 {
                let point = theta.lerp(anchor, t)?;
                let tp = point.forward_trace(c_batch.inputs())?;
                let (ce_c, d_ce) = loss_and_output_grad(&tp.output, c_batch.labels(), LossKind::CrossEntropy);
                let loss_b = (cfg.lambda_b - ce_c).abs();
                if !loss_b.is_finite() {
                    return Err(Error::Diverged { step: iteration, reason: format!("barrier loss became {loss_b}") });
                }
                let sign = if ce_c > cfg.lambda_b { 1.0 } else if ce_c < cfg.lambda_b { -1.0 } else { 0.0 };
                let raw = point.backward(c_batch.inputs(), &tp, &(d_ce * (sign * cfg.barrier_weight)), None)?;
                let mut scaled = raw.clone();
                scaled.scale(1.0 - t);
                let before = theta.clone();
                sgd_step(&mut theta, &scaled, &mut barrier_state, barrier_h)?;
                observe(&CbftStep {
                    iteration,
                    phase: CbftPhase::Barrier { t },
                    loss: loss_b,
                    lr,
                    before: &before,
                    after: &theta,
                    raw_grad: &raw,
                });
            }
            iteration += 1;
        }
    }
    if !theta.is_finite() {
        return Err(Error::Diverged { step: iteration, reason: "parameters became non-finite".into() });
    }
    Ok(theta)
}

fn full_class_means(model: &ModelParams, data: &Dataset, classes: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let rep = penultimate(model, data)?;
    let mut sums = Array2::<f64>::zeros((classes, rep.ncols()));
    let mut counts = vec![0usize; classes];
    for (row, &y) in rep.rows().into_iter().zip(data.labels()) {
        sums.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1;
    }
    for (mut s, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            s /= n as f64;
        }
    }
    Ok((sums, counts))
}

fn invariance_to_means(
    means: &Array2<f64>,
    counts_c: &[usize],
    rep_nc: ArrayView2<'_, f64>,
    labels_nc: &[usize],
    min_count: usize,
) -> InvarianceTerm {
    // Feed the fixed means in as a one-row-per-class batch.
    let classes = means.nrows();
    let present: Vec<usize> = (0..classes).filter(|&k| counts_c[k] > 0).collect();
    let rows = means.select(Axis(0), &present);
    let mut t = invariance_term(rows.view(), &present, rep_nc, labels_nc, classes, 1);
    // Re-apply the minimum on the clean side only.
    let mut counts_n = vec![0usize; classes];
    labels_nc.iter().for_each(|&y| counts_n[y] += 1);
    if counts_n.iter().any(|&n| n > 0 && n < min_count) {
        let keep: Vec<usize> = present.iter().copied().filter(|&k| counts_n[k] >= min_count).collect();
        let rows = means.select(Axis(0), &keep);
        t = invariance_term(rows.view(), &keep, rep_nc, labels_nc, classes, 1);
    }
    t
}

/// Last hidden-layer activations for every sample.
pub fn penultimate(model: &ModelParams, data: &Dataset) -> Result<Array2<f64>> {
    require_classifier(model)?;
    let width = *model.hidden_widths().last().unwrap();
    let mut out = Array2::zeros((data.len(), width));
    let all = data.inputs();
    for start in (0..data.len()).step_by(2048) {
        let end = (start + 2048).min(data.len());
        let t = model.forward_trace(all.slice(ndarray::s![start..end, ..]))?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(t.penultimate().unwrap());
    }
    Ok(out)
}

/// Last-layer retraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LlrConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 30.0, momentum: 0.9, weight_decay: 0.0, batch_size: 128, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FinetuneMethod {
    /// Continue SGD on the clean data.
    Naive(TrainConfig),
    /// Freeze the body, re-initialize and retrain the output layer (cosine schedule).
    Llr(LlrConfig),
    /// Last-layer retraining, then full fine-tuning at each learning rate in
    /// `lrs`, keeping the run with the best held-out accuracy.
    Lpft { probe: LlrConfig, tune: TrainConfig, lrs: Vec<f64> },
}

/// Result of [`finetune`]; `chosen_lr` is set for LPFT.
#[derive(Debug, Clone)]
pub struct Finetuned {
    pub model: ModelParams,
    pub chosen_lr: Option<f64>,
    /// Learning rates whose LPFT run diverged and was skipped.
    pub diverged: Vec<f64>,
}

pub fn finetune(
    model: &ModelParams,
    d_nc: &Dataset,
    method: &FinetuneMethod,
    validation: Option<&Dataset>,
) -> Result<Finetuned> {
    require_classifier(model)?;
    match method {
        FinetuneMethod::Naive(cfg) => Ok(Finetuned {
            model: train(model.clone(), d_nc, LossKind::CrossEntropy, cfg)?.model,
            chosen_lr: None,
            diverged: Vec::new(),
        }),
        FinetuneMethod::Llr(cfg) => {
            Ok(Finetuned { model: retrain_last_layer(model, d_nc, cfg)?, chosen_lr: None, diverged: Vec::new() })
        }
        FinetuneMethod::Lpft { probe, tune, lrs } => {
            let Some(val) = validation else {
                return config("LPFT needs a held-out clean set to choose its learning rate");
            };
            if lrs.is_empty() {
                return config("LPFT needs at least one learning rate");
            }
            let probed = retrain_last_layer(model, d_nc, probe)?;
            let mut best: Option<(f64, f64, ModelParams)> = None;
            let mut diverged = Vec::new();
            for &lr in lrs {
                let cfg = TrainConfig { lr, ..tune.clone() };
                let tuned = match train(probed.clone(), d_nc, LossKind::CrossEntropy, &cfg) {
                    Ok(o) => o.model,
                    Err(Error::Diverged { .. }) => {
                        diverged.push(lr);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let e = evaluate(&tuned, val, LossKind::CrossEntropy)?;
                if !e.loss.is_finite() {
                    diverged.push(lr);
                    continue;
                }
                if best.as_ref().is_none_or(|(acc, _, _)| e.accuracy > *acc) {
                    best = Some((e.accuracy, lr, tuned));
                }
            }
            let (_, lr, model) = best.ok_or_else(|| Error::Diverged {
                step: 0,
                reason: "every LPFT learning rate diverged".into(),
            })?;
            Ok(Finetuned { model, chosen_lr: Some(lr), diverged })
        }
    }
}

/// Freeze everything but the output layer, re-initialize it, and train it on
/// the frozen representations.
pub fn retrain_last_layer(model: &ModelParams, data: &Dataset, cfg: &LlrConfig) -> Result<ModelParams> {
    require_classifier(model)?;
    let features = Dataset::new(penultimate(model, data)?, data.labels().to_vec())?;
    let head_arch = Architecture::mlp(&[features.dim(), model.output_dim()]);
    let head = init_model(&head_arch, rng::derive_seed(cfg.seed, &[tag::HEAD]))?;
    let tc = TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        schedule: Schedule::Cosine,
        seed: cfg.seed,
    };
    let head = train(head, &features, LossKind::CrossEntropy, &tc)?.model;
    let mut out = model.clone();
    let last = out.layers().len() - 1;
    out.layers_mut()[last] = head.layers()[0].clone();
    Ok(out)
}

/// Accuracy (percent) on the four evaluation sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub nc: f64,
    pub c: f64,
    pub rc: f64,
    pub ri: f64,
}

impl EvalTable {
    /// Entry-wise mean of several tables.
    pub fn mean(tables: &[EvalTable]) -> EvalTable {
        let n = tables.len().max(1) as f64;
        let sum = |f: fn(&EvalTable) -> f64| tables.iter().map(f).sum::<f64>() / n;
        EvalTable { nc: sum(|t| t.nc), c: sum(|t| t.c), rc: sum(|t| t.rc), ri: sum(|t| t.ri) }
    }
}

pub fn counterfactual_eval(model: &ModelParams, family: &TestFamily) -> Result<EvalTable> {
    let acc = |d: &Dataset| -> Result<f64> { Ok(100.0 * evaluate(model, d, LossKind::CrossEntropy)?.accuracy) };
    Ok(EvalTable { nc: acc(&family.nc)?, c: acc(&family.c)?, rc: acc(&family.rc)?, ri: acc(&family.ri)? })
}
