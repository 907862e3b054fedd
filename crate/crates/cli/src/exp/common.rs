//! Pieces shared by several experiments.

use mechlab::align::{activation_patterns, apply_permutation, match_by_activations, pattern_mismatch, w1_distance, MatchOptions};
use mechlab::connect::{eval_path, PathEvalReport, PathSpec};
use mechlab::mechanism::{mechanistically_similar, InvarianceProfile};
use mechlab::nn::{init_model, train, Architecture, LossKind};
use mechlab::{Dataset, ModelParams, TrainConfig};
use serde::Serialize;

use crate::error::CliResult;
use crate::output::{Cell, RunContext};

pub fn mlp_arch(input: usize, hidden: &[usize], output: usize) -> Architecture {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    Architecture::mlp(&sizes)
}

/// Initialize and train, reusing a cached model when the context has one
/// for the same `key`.
pub fn fit<K: Serialize>(
    ctx: &RunContext,
    tag: &str,
    key: &K,
    arch: &Architecture,
    init_seed: u64,
    data: &Dataset,
    loss: LossKind,
    cfg: &TrainConfig,
) -> CliResult<ModelParams> {
    ctx.cached_model(tag, &(key, arch, init_seed, cfg), || {
        ctx.log(format!("training {tag} ({} samples, {} epochs)", data.len(), cfg.epochs));
        Ok(train(init_model(arch, init_seed)?, data, loss, cfg)?.model)
    })
}

/// Linear-path comparison of two trained models before and after aligning
/// the second to the first.
#[derive(Debug, Clone)]
pub struct PairReport {
    pub a: String,
    pub b: String,
    pub raw: PathEvalReport,
    pub aligned: PathEvalReport,
    pub w1: f64,
    /// Fraction of sample-unit activation indicators that differ after alignment.
    pub aligned_mismatch: f64,
    pub similar: bool,
}

impl PairReport {
    pub fn label(&self) -> String {
        format!("{}~{}", self.a, self.b)
    }

    pub fn raw_barrier(&self) -> f64 {
        self.raw.curves[0].barrier
    }

    pub fn aligned_barrier(&self) -> f64 {
        self.aligned.curves[0].barrier
    }
}

#[allow(clippy::too_many_arguments)]
pub fn compare_pair(
    (na, a, pa): (&str, &ModelParams, &InvarianceProfile),
    (nb, b, pb): (&str, &ModelParams, &InvarianceProfile),
    match_data: &Dataset,
    eval: (&str, &Dataset),
    grid: usize,
    loss: LossKind,
) -> CliResult<PairReport> {
    let raw = eval_path(&PathSpec::linear(a.clone(), b.clone())?, &[eval], grid, loss)?;
    let map = match_by_activations(a, b, match_data, MatchOptions::default())?;
    let b_aligned = apply_permutation(b, &map)?;
    let aligned = eval_path(&PathSpec::linear(a.clone(), b_aligned.clone())?, &[eval], grid, loss)?;
    let (fa, fb) = (activation_patterns(a, eval.1)?, activation_patterns(&b_aligned, eval.1)?);
    Ok(PairReport {
        a: na.to_string(),
        b: nb.to_string(),
        raw,
        aligned,
        w1: w1_distance(&fa, &fb)?.overall,
        aligned_mismatch: pattern_mismatch(&fa, &fb)?,
        similar: mechanistically_similar(pa, pb)?,
    })
}

pub const PAIR_HEADER: [&str; 10] = [
    "seed",
    "setting",
    "model_a",
    "model_b",
    "raw_barrier",
    "aligned_barrier",
    "w1_distance",
    "aligned_pattern_mismatch",
    "mechanistically_similar",
    "counterexample",
];

/// One `pairs.csv` row; `counterexample` marks a pair above `epsilon_barrier`
/// that is nevertheless mechanistically similar.
pub fn pair_row(seed: u64, setting: &str, p: &PairReport, epsilon_barrier: f64) -> Vec<Cell> {
    vec![
        seed.into(),
        setting.into(),
        p.a.clone().into(),
        p.b.clone().into(),
        p.raw_barrier().into(),
        p.aligned_barrier().into(),
        p.w1.into(),
        p.aligned_mismatch.into(),
        p.similar.into(),
        (p.aligned_barrier() > epsilon_barrier && p.similar).into(),
    ]
}

pub fn report_csv(ctx: &RunContext, rel: &str, report: &PathEvalReport) -> CliResult<()> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    ctx.write(rel, buf)
}

/// Profile rows for `profiles.csv`.
pub fn profile_rows(seed: u64, setting: &str, model: &str, p: &InvarianceProfile) -> Vec<Vec<Cell>> {
    p.records
        .iter()
        .map(|r| {
            vec![
                seed.into(),
                setting.into(),
                model.into(),
                r.intervention.clone().into(),
                r.base_loss.into(),
                r.counterfactual_loss.into(),
                r.gap.into(),
                r.std_error.into(),
                r.accuracy_gap.into(),
                r.tolerance.into(),
                r.invariant.into(),
            ]
        })
        .collect()
}

pub const PROFILE_HEADER: [&str; 11] = [
    "seed",
    "setting",
    "model",
    "intervention",
    "base_loss",
    "counterfactual_loss",
    "gap",
    "std_error",
    "accuracy_gap",
    "tolerance",
    "invariant",
];
