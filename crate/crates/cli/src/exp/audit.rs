//! Gradient and permutation audits on randomly drawn models.

use std::collections::BTreeMap;

use mechlab::align::{apply_permutation, match_by_activations, solve_assignment, MatchOptions, PermutationMap};
use mechlab::connect::{eval_path, PathSpec};
use mechlab::nn::{grad_check, init_model, Architecture, LossKind};
use mechlab::rng::{self, StreamRng};
use mechlab::{Dataset, ModelParams};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use crate::error::CliResult;
use crate::output::{Cell, Check, RunContext, Summary};
use crate::recipe::{AuditRecipe, GradientAudit, PermutationAudit};

fn uniform(r: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * r.random_range(-1.0..1.0))
}

/// Model with every parameter, biases included, drawn at random.
/// Pre-activation distance from zero, in finite-difference steps, below which
/// a sample is redrawn so that no probe crosses a ReLU kink.
const KINK_MARGIN_STEPS: f64 = 1e3;

fn away_from_kinks(model: &ModelParams, r: &mut StreamRng, rows: usize, margin: f64) -> CliResult<Array2<f64>> {
    let dim = model.input_dim();
    let mut x = Array2::zeros((rows, dim));
    for mut row in x.rows_mut() {
        for _ in 0..1000 {
            let cand = uniform(r, 1, dim, 1.0);
            row.assign(&cand.row(0));
            let trace = model.forward_trace(cand.view())?;
            if trace.pre.iter().flatten().all(|z| z.abs() >= margin) {
                break;
            }
        }
    }
    Ok(x)
}

fn random_params(arch: &Architecture, r: &mut StreamRng) -> CliResult<ModelParams> {
    // Uniform weights with variance 2 / fan_in keep logits of deep models
    // moderate; biases are uniform on [-1, 1].
    let mut m = init_model(arch, r.random())?;
    for d in m.layers_mut() {
        let scale = (6.0 / d.fan_in() as f64).sqrt();
        d.weights.mapv_inplace(|_| scale * r.random_range(-1.0..1.0));
        if let Some(b) = &mut d.bias {
            b.mapv_inplace(|_| r.random_range(-1.0..1.0));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Case {
    Linear,
    FixedHead,
    Mlp,
}

impl Case {
    fn name(self) -> &'static str {
        match self {
            Case::Linear => "linear",
            Case::FixedHead => "fixed_head",
            Case::Mlp => "mlp",
        }
    }
}

struct GradRow {
    loss: LossKind,
    case: Case,
    sizes: Vec<usize>,
    params: usize,
    error: f64,
}

fn gradient_cases(g: &GradientAudit, seed: u64) -> CliResult<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (li, loss) in [LossKind::CrossEntropy, LossKind::MeanSquaredError].into_iter().enumerate() {
        for i in 0..g.models_per_loss {
            let mut r = rng::stream(seed, &[rng::tag::GRADCHECK, li as u64, i as u64]);
            let input = r.random_range(1..=g.max_input_dim);
            let case = match (loss, i % 3) {
                (LossKind::MeanSquaredError, 0) => Case::Linear,
                (LossKind::MeanSquaredError, 1) => Case::FixedHead,
                (LossKind::CrossEntropy, 0) => Case::Linear,
                _ => Case::Mlp,
            };
            let outputs = match loss {
                LossKind::CrossEntropy => r.random_range(2..=5),
                LossKind::MeanSquaredError => 1,
            };
            let arch = match case {
                Case::Linear => Architecture::mlp(&[input, outputs]),
                Case::FixedHead => Architecture::fixed_head(input, r.random_range(1..=g.max_width)),
                Case::Mlp => {
                    let depth = r.random_range(1..=g.max_hidden_layers.max(1));
                    let mut sizes = vec![input];
                    sizes.extend((0..depth).map(|_| r.random_range(1..=g.max_width)));
                    sizes.push(outputs);
                    Architecture::mlp(&sizes)
                }
            };
            let model = random_params(&arch, &mut r)?;
            let x = away_from_kinks(&model, &mut r, g.batch_size, KINK_MARGIN_STEPS * g.step)?;
            let classes = if loss == LossKind::MeanSquaredError { 2 } else { outputs };
            let labels: Vec<usize> = (0..g.batch_size).map(|_| r.random_range(0..classes)).collect();
            let linear_mse = case == Case::Linear && loss == LossKind::MeanSquaredError;
            let step = if linear_mse { g.linear_step } else { g.step };
            let error = grad_check(&model, x.view(), &labels, loss, step, r.random())?;
            rows.push(GradRow { loss, case, sizes: model.layer_sizes(), params: model.num_params(), error });
        }
    }
    Ok(rows)
}

struct PermRow {
    widths: Vec<usize>,
    recovered: bool,
    barrier: f64,
}

fn random_map(model: &ModelParams, r: &mut StreamRng) -> PermutationMap {
    PermutationMap {
        layers: model
            .hidden_widths()
            .into_iter()
            .map(|w| {
                let mut p: Vec<usize> = (0..w).collect();
                p.shuffle(r);
                p
            })
            .collect(),
    }
}

fn permutation_cases(p: &PermutationAudit, seed: u64) -> CliResult<Vec<PermRow>> {
    let mut rows = Vec::new();
    for i in 0..p.models {
        let mut r = rng::stream(seed, &[rng::tag::INIT, 1000 + i as u64]);
        let depth = r.random_range(1..=p.max_hidden_layers);
        let mut sizes = vec![p.input_dim];
        sizes.extend((0..depth).map(|_| r.random_range(p.min_width..=p.max_width)));
        sizes.push(10);
        let a = random_params(&Architecture::mlp(&sizes), &mut r)?;
        let sigma = random_map(&a, &mut r);
        let b = apply_permutation(&a, &sigma)?;
        let x = uniform(&mut r, p.samples, p.input_dim, 1.0);
        let labels: Vec<usize> = (0..p.samples).map(|_| r.random_range(0..10)).collect();
        let data = Dataset::new(x, labels)?;
        let map = match_by_activations(&a, &b, &data, MatchOptions::default())?;
        let aligned = apply_permutation(&b, &map)?;
        let recovered = map == sigma.inverse() && aligned == a;
        let report = eval_path(&PathSpec::linear(a.clone(), aligned)?, &[("random", &data)], p.grid, LossKind::CrossEntropy)?;
        rows.push(PermRow { widths: a.hidden_widths(), recovered, barrier: report.curves[0].barrier });
    }
    Ok(rows)
}

fn brute_force_min(cost: &Array2<f64>) -> f64 {
    fn go(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = cost.nrows();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
    best
}

/// Returns (cases compared, mismatches).
fn assignment_cases(p: &PermutationAudit, seed: u64) -> CliResult<(usize, usize)> {
    let mut r = rng::stream(seed, &[rng::tag::INIT, 2000]);
    let mut bad = 0;
    for i in 0..p.brute_force_cases {
        let n = 1 + i % p.brute_force_max_width;
        // Alternate small integer costs (many ties) with real-valued ones.
        let cost = if i % 2 == 0 {
            Array2::from_shape_simple_fn((n, n), || r.random_range(0..6) as f64)
        } else {
            uniform(&mut r, n, n, 10.0)
        };
        let a = solve_assignment(cost.view())?;
        let total: f64 = a.cols.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        let best = brute_force_min(&cost);
        if (total - best).abs() > 1e-12 * best.abs().max(1.0) {
            bad += 1;
        }
    }
    Ok((p.brute_force_cases, bad))
}

pub fn run(recipe: &AuditRecipe, ctx: &RunContext) -> CliResult<Summary> {
    let g = &recipe.gradient;
    let p = &recipe.permutation;
    let mut grad_rows = Vec::new();
    let mut perm_rows = Vec::new();
    let (mut compared, mut mismatched) = (0, 0);
    for &seed in &recipe.seeds {
        ctx.log(format!("gradient audit, seed {seed}"));
        for row in gradient_cases(g, seed)? {
            grad_rows.push((seed, row));
        }
        ctx.log(format!("permutation audit, seed {seed}"));
        for row in permutation_cases(p, seed)? {
            perm_rows.push((seed, row));
        }
        let (c, m) = assignment_cases(p, seed)?;
        compared += c;
        mismatched += m;
    }

    let worst = |pred: &dyn Fn(&GradRow) -> bool| {
        grad_rows.iter().filter(|(_, r)| pred(r)).map(|(_, r)| r.error).fold(0.0, f64::max)
    };
    let ce = worst(&|r| r.loss == LossKind::CrossEntropy);
    let mse = worst(&|r| r.loss == LossKind::MeanSquaredError && r.case != Case::Linear);
    let linear = worst(&|r| r.loss == LossKind::MeanSquaredError && r.case == Case::Linear);
    let recovered = perm_rows.iter().filter(|(_, r)| r.recovered).count();
    let max_barrier = perm_rows.iter().map(|(_, r)| r.barrier).fold(0.0, f64::max);

    let checks = vec![
        Check::below("gradient max relative error, cross-entropy", ce, g.max_rel_error),
        Check::below("gradient max relative error, squared error", mse, g.max_rel_error),
        Check::below("gradient max relative error, linear squared error", linear, g.linear_mse_max_rel_error),
        Check::at_least("permutations recovered exactly", recovered as f64, perm_rows.len() as f64),
        Check::at_most("max aligned linear barrier", max_barrier, p.max_barrier),
        Check::holds(format!("assignment equals brute force ({compared} cases)"), mismatched == 0),
    ];

    let grad_csv: Vec<Vec<Cell>> = grad_rows
        .iter()
        .map(|(s, r)| {
            let loss = match r.loss {
                LossKind::CrossEntropy => "cross_entropy",
                LossKind::MeanSquaredError => "mse",
            };
            let sizes = r.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-");
            vec![(*s).into(), loss.into(), r.case.name().into(), sizes.into(), r.params.into(), r.error.into()]
        })
        .collect();
    ctx.write_csv("gradients.csv", &["seed", "loss", "case", "sizes", "params", "max_rel_error"], &grad_csv)?;
    let perm_csv: Vec<Vec<Cell>> = perm_rows
        .iter()
        .map(|(s, r)| {
            let w = r.widths.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-");
            vec![(*s).into(), w.into(), r.recovered.into(), r.barrier.into()]
        })
        .collect();
    ctx.write_csv("permutations.csv", &["seed", "hidden_widths", "recovered", "aligned_barrier"], &perm_csv)?;

    let mut thresholds = BTreeMap::new();
    thresholds.insert("max_rel_error".into(), g.max_rel_error);
    thresholds.insert("linear_mse_max_rel_error".into(), g.linear_mse_max_rel_error);
    thresholds.insert("max_barrier".into(), p.max_barrier);
    Ok(Summary::new(
        recipe.name.as_str(),
        &recipe.seeds,
        thresholds,
        checks,
        json!({
            "max_rel_error": {"cross_entropy": ce, "mse": mse, "linear_mse": linear},
            "permutation_models": perm_rows.len(),
            "permutations_recovered": recovered,
            "max_aligned_barrier": max_barrier,
            "assignment_cases": compared,
            "assignment_mismatches": mismatched,
        }),
    ))
}
