//! Fine-tuning a cue-reliant model on a small clean set: naive fine-tuning,
//! last-layer retraining, LPFT and CBFT, evaluated on the four
//! counterfactual test sets.

use std::collections::BTreeMap;

use mechlab::cbft::{cbft_train, counterfactual_eval, finetune, EvalTable, FinetuneMethod};
use mechlab::connect::{eval_path, PathSpec};
use mechlab::grid::GridDataset;
use mechlab::nn::LossKind;
use mechlab::rng::derive_seed;
use mechlab::ModelParams;
use serde_json::json;

use super::common::{fit, mlp_arch};
use super::smc::p_label;
use crate::error::CliResult;
use crate::output::{par_map, Cell, Check, RunContext, Summary};
use crate::recipe::{cbft_config, CbftRecipe};

pub const METHODS: [&str; 6] = ["pretrained", "ft_medium", "ft_small", "llr", "lpft", "cbft"];

struct Run {
    seed: u64,
    p: f64,
    tables: Vec<(&'static str, EvalTable)>,
    /// Linear barrier between the CBFT model and its anchor on the cue data.
    barrier: f64,
    lpft_lr: Option<f64>,
}

fn p_tag(p: f64) -> u64 {
    (p * 1e6).round() as u64
}

fn run_one(r: &CbftRecipe, ctx: &RunContext, seed: u64, p: f64) -> CliResult<Run> {
    ctx.log(format!("cbft-bench: seed {seed}, p = {p}"));
    let d = &r.data;
    let g = &d.grid;
    let dc = GridDataset::generate(&g.config(p, d.pretrain_samples, derive_seed(seed, &[300, p_tag(p)])))?;
    let dnc = GridDataset::generate(&g.config(0.0, d.clean_samples, derive_seed(seed, &[301])))?;
    let val = GridDataset::generate(&g.config(0.0, d.validation_samples, derive_seed(seed, &[302])))?;
    let test = GridDataset::generate(&g.config(1.0, d.test_samples, derive_seed(seed, &[303])))?;
    let family = test.test_family(derive_seed(seed, &[304]))?;
    let arch = mlp_arch(g.side * g.side, &r.hidden, g.classes);
    let anchor = fit(
        ctx,
        "grid_pretrained",
        &("cbft", g, d.pretrain_samples, seed, p_tag(p)),
        &arch,
        derive_seed(seed, &[310, p_tag(p)]),
        &dc.data,
        LossKind::CrossEntropy,
        &r.pretrain.config(derive_seed(seed, &[311, p_tag(p)])),
    )?;
    let b = &r.baselines;
    let ft_seed = derive_seed(seed, &[312, p_tag(p)]);
    let naive = |lr: f64| FinetuneMethod::Naive(mechlab::TrainConfig { lr, ..b.finetune.config(ft_seed) });
    let methods: Vec<(&'static str, FinetuneMethod)> = vec![
        ("ft_medium", naive(b.medium_lr)),
        ("ft_small", naive(b.small_lr)),
        ("llr", FinetuneMethod::Llr(b.llr.config(ft_seed))),
        (
            "lpft",
            FinetuneMethod::Lpft {
                probe: b.llr.config(ft_seed),
                tune: mechlab::TrainConfig { epochs: b.lpft_epochs, ..b.finetune.config(ft_seed) },
                lrs: b.lpft_lrs.clone(),
            },
        ),
    ];
    let dir = format!("checkpoints/seed-{seed}/p{}", p_label(p));
    ctx.save_model(&format!("{dir}/pretrained.json"), &anchor, seed, "pretrained on cue data")?;
    let mut tables = vec![("pretrained", counterfactual_eval(&anchor, &family)?)];
    let mut lpft_lr = None;
    for (name, method) in &methods {
        ctx.log(format!("fine-tuning: {name}"));
        let out = finetune(&anchor, &dnc.data, method, Some(&val.data))?;
        if out.chosen_lr.is_some() {
            lpft_lr = out.chosen_lr;
        }
        ctx.save_model(&format!("{dir}/{name}.json"), &out.model, seed, name)?;
        tables.push((name, counterfactual_eval(&out.model, &family)?));
    }
    ctx.log("fine-tuning: cbft");
    let tuned: ModelParams = cbft_train(&anchor, &dc.data, &dnc.data, &cbft_config(r, derive_seed(seed, &[313, p_tag(p)])))?;
    ctx.save_model(&format!("{dir}/cbft.json"), &tuned, seed, "cbft")?;
    tables.push(("cbft", counterfactual_eval(&tuned, &family)?));
    let path = eval_path(&PathSpec::linear(tuned, anchor)?, &[("cue_train", &dc.data)], r.grid_points, LossKind::CrossEntropy)?;
    Ok(Run { seed, p, tables, barrier: path.curves[0].barrier, lpft_lr })
}

fn table_row(method: &str, p: f64, t: &EvalTable, seed: Cell) -> Vec<Cell> {
    vec![method.into(), p.into(), t.nc.into(), t.c.into(), t.rc.into(), t.ri.into(), seed]
}

pub fn run(r: &CbftRecipe, ctx: &RunContext) -> CliResult<Summary> {
    let jobs: Vec<(u64, f64)> =
        r.seeds.iter().flat_map(|&s| r.data.cue_proportions.iter().map(move |&p| (s, p))).collect();
    let runs: Vec<Run> =
        par_map(&jobs, ctx.threads, |&(s, p)| run_one(r, ctx, s, p)).into_iter().collect::<CliResult<_>>()?;

    let header = ["method", "cue_proportion", "NC", "C", "RC", "RI", "seed"];
    let mut rows = Vec::new();
    for run in &runs {
        for (m, t) in &run.tables {
            rows.push(table_row(m, run.p, t, run.seed.into()));
        }
    }
    ctx.write_csv("eval_table.csv", &header, &rows)?;

    let chance = 100.0 / r.data.grid.classes as f64;
    let c = &r.checks;
    let mut checks = Vec::new();
    let mut mean_rows = Vec::new();
    let mut means_json = Vec::new();
    for &p in &r.data.cue_proportions {
        let pl = p_label(p);
        let of_p: Vec<&Run> = runs.iter().filter(|run| run.p == p).collect();
        let mean = |m: &str| {
            let ts: Vec<EvalTable> =
                of_p.iter().map(|run| run.tables.iter().find(|(n, _)| *n == m).unwrap().1).collect();
            EvalTable::mean(&ts)
        };
        for m in METHODS {
            let t = mean(m);
            mean_rows.push(table_row(m, p, &t, "mean".into()));
            means_json.push(json!({"method": m, "cue_proportion": p, "table": t}));
        }
        let (cb, fm, fs, llr, lpft) = (mean("cbft"), mean("ft_medium"), mean("ft_small"), mean("llr"), mean("lpft"));
        checks.push(Check::at_most(format!("p={pl}: CBFT |RC - NC|"), (cb.rc - cb.nc).abs(), c.max_rc_nc_gap));
        checks.push(Check::at_most(format!("p={pl}: CBFT RI"), cb.ri, c.max_ri_chance_multiple * chance));
        checks.push(Check::at_most(format!("p={pl}: naive FT NC minus CBFT NC"), fm.nc - cb.nc, c.max_nc_shortfall));
        checks.push(Check::at_least(format!("p={pl}: small-lr naive FT RI"), fs.ri, c.min_naive_ri));
        checks.push(Check::at_least(format!("p={pl}: small-lr naive FT NC - RC"), fs.nc - fs.rc, c.min_naive_rc_drop));
        let (lo, hi) = (cb.ri.min(fs.ri), cb.ri.max(fs.ri));
        for (name, t) in [("LLR", llr), ("LPFT", lpft)] {
            checks.push(Check::holds(
                format!("p={pl}: {name} RI {:.1} between CBFT {:.1} and small-lr naive FT {:.1}", t.ri, cb.ri, fs.ri),
                (lo..=hi).contains(&t.ri),
            ));
        }
        let barrier = of_p.iter().map(|run| run.barrier).fold(f64::INFINITY, f64::min);
        checks.push(Check::at_least(
            format!("p={pl}: barrier between CBFT model and anchor"),
            barrier,
            c.min_barrier_fraction * r.cbft.lambda_b,
        ));
    }
    ctx.write_csv("eval_table_mean.csv", &header, &mean_rows)?;

    let mut thresholds = BTreeMap::new();
    thresholds.insert("lambda_b".to_string(), r.cbft.lambda_b);
    thresholds.insert("max_rc_nc_gap".to_string(), c.max_rc_nc_gap);
    thresholds.insert("max_ri".to_string(), c.max_ri_chance_multiple * chance);
    thresholds.insert("max_nc_shortfall".to_string(), c.max_nc_shortfall);
    thresholds.insert("min_naive_ri".to_string(), c.min_naive_ri);
    thresholds.insert("min_naive_rc_drop".to_string(), c.min_naive_rc_drop);
    thresholds.insert("min_barrier".to_string(), c.min_barrier_fraction * r.cbft.lambda_b);
    let per_run: Vec<_> = runs
        .iter()
        .map(|run| json!({"seed": run.seed, "cue_proportion": run.p, "cbft_anchor_barrier": run.barrier, "lpft_lr": run.lpft_lr}))
        .collect();
    Ok(Summary::new(r.name.as_str(), &r.seeds, thresholds, checks, json!({"means": means_json, "runs": per_run})))
}
