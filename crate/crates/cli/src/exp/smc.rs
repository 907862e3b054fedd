//! Cue model versus clean model on grid images: a trained quadratic path
//! connects them on the cue data, yet the connection does not survive
//! counterfactuals that break the cue.

use std::collections::BTreeMap;

use mechlab::connect::{mechanistic_connectivity_report, train_quadratic_midpoint, ConnectivityReport, PathSpec};
use mechlab::grid::{CounterfactualKind, GridDataset};
use mechlab::mechanism::{invariance_set, InvarianceProfile};
use mechlab::nn::LossKind;
use mechlab::rng::derive_seed;
use mechlab::ModelParams;
use serde_json::json;

use super::common::{compare_pair, fit, mlp_arch, pair_row, profile_rows, report_csv, PairReport, PAIR_HEADER, PROFILE_HEADER};
use crate::error::CliResult;
use crate::output::{par_map, Check, RunContext, Summary};
use crate::recipe::SmcRecipe;

const LOSS: LossKind = LossKind::CrossEntropy;

pub fn p_label(p: f64) -> String {
    format!("{p}")
}

fn p_tag(p: f64) -> u64 {
    (p * 1e6).round() as u64
}

pub fn grid_interventions() -> Vec<(String, Vec<CounterfactualKind>)> {
    CounterfactualKind::ALL.iter().map(|&k| (k.name().to_string(), vec![k])).collect()
}

struct CueRun {
    p: f64,
    train: GridDataset,
    model: ModelParams,
    connectivity: ConnectivityReport,
}

struct SeedRun {
    seed: u64,
    cue: Vec<CueRun>,
    pairs: Vec<(String, PairReport)>,
    profiles: Vec<(String, InvarianceProfile)>,
}

fn run_seed(r: &SmcRecipe, ctx: &RunContext, seed: u64) -> CliResult<SeedRun> {
    let d = &r.data;
    let arch = mlp_arch(d.grid.side * d.grid.side, &r.hidden, d.grid.classes);
    let clean = GridDataset::generate(&d.grid.config(0.0, d.train_samples, derive_seed(seed, &[200])))?;
    let nc = fit(ctx, "grid_nc", &("smc", &d.grid, d.train_samples, seed), &arch, derive_seed(seed, &[210]), &clean.data, LOSS, &r.train.config(derive_seed(seed, &[211])))?;
    ctx.save_model(&format!("checkpoints/seed-{seed}/nc.json"), &nc, seed, "trained without cues")?;
    let test = GridDataset::generate(&d.grid.config(1.0, d.test_samples, derive_seed(seed, &[202])))?;
    let rand_cue = test.counterfactual(CounterfactualKind::RandCue, derive_seed(seed, &[203]))?;
    let rand_image = test.counterfactual(CounterfactualKind::RandImage, derive_seed(seed, &[203]))?;
    let profile = |m: &ModelParams| -> CliResult<InvarianceProfile> {
        Ok(invariance_set(
            m,
            &test,
            &grid_interventions(),
            r.mechanism.threshold(),
            LOSS,
            r.mechanism.repeats,
            derive_seed(seed, &[205]),
        )?)
    };
    let nc_profile = profile(&nc)?;

    let mut cue = Vec::new();
    for &p in &d.cue_proportions {
        ctx.log(format!("smc-toy: seed {seed}, p = {p}"));
        let train = GridDataset::generate(&d.grid.config(p, d.train_samples, derive_seed(seed, &[201, p_tag(p)])))?;
        let model = fit(
            ctx,
            "grid_c",
            &("smc", &d.grid, d.train_samples, seed, p_tag(p)),
            &arch,
            derive_seed(seed, &[212, p_tag(p)]),
            &train.data,
            LOSS,
            &r.train.config(derive_seed(seed, &[213, p_tag(p)])),
        )?;
        ctx.save_model(&format!("checkpoints/seed-{seed}/c-p{}.json", p_label(p)), &model, seed, "trained with cues")?;
        ctx.log("training quadratic path midpoint");
        let mid = train_quadratic_midpoint(&model, &nc, &train.data, LOSS, &r.path.config(derive_seed(seed, &[214, p_tag(p)])))?;
        ctx.save_model(&format!("checkpoints/seed-{seed}/mid-p{}.json", p_label(p)), &mid, seed, "quadratic path midpoint")?;
        let spec = PathSpec::bezier(model.clone(), mid, nc.clone())?;
        let connectivity = mechanistic_connectivity_report(
            &spec,
            ("train", &train.data),
            &[("rand_cue", &rand_cue.data), ("rand_image", &rand_image.data)],
            r.connect.epsilon_mc,
            r.connect.minimizer_tolerance,
            r.connect.grid,
            LOSS,
        )?;
        cue.push(CueRun { p, train, model, connectivity });
    }

    let mut named: Vec<(String, &ModelParams, InvarianceProfile, Option<&GridDataset>)> = Vec::new();
    for c in &cue {
        named.push((format!("c_p{}", p_label(c.p)), &c.model, profile(&c.model)?, Some(&c.train)));
    }
    named.push(("nc".to_string(), &nc, nc_profile, None));
    let mut pairs = Vec::new();
    for i in 0..named.len() {
        for j in i + 1..named.len() {
            let (na, a, pa, data) = &named[i];
            let (nb, b, pb, _) = &named[j];
            let data = &data.expect("cue models come first").data;
            let setting = format!("train_{na}");
            let rep = compare_pair((na, a, pa), (nb, b, pb), data, (&setting, data), r.connect.grid, LOSS)?;
            pairs.push((setting, rep));
        }
    }
    let profiles = named.into_iter().map(|(n, _, p, _)| (n, p)).collect();
    Ok(SeedRun { seed, cue, pairs, profiles })
}

pub fn run(r: &SmcRecipe, ctx: &RunContext) -> CliResult<Summary> {
    let runs: Vec<SeedRun> = par_map(&r.seeds, ctx.threads, |&s| run_seed(r, ctx, s)).into_iter().collect::<CliResult<_>>()?;
    let eps = r.connect.epsilon_mc;
    let eb = r.connect.epsilon_barrier;
    let mut checks = Vec::new();
    for &p in &r.data.cue_proportions {
        let pl = p_label(p);
                let linear = |run: &'_ SeedRun| {
            let name = format!("c_p{pl}");
            run.pairs.iter().find(|(_, q)| q.a == name && q.b == "nc").unwrap().1.aligned_barrier()
        };
        let quad = runs.iter().map(|run| run.cue.iter().find(|c| c.p == p).unwrap().connectivity.verdict("train").unwrap().barrier).fold(0.0, f64::max);
        let lin = runs.iter().map(linear).fold(f64::INFINITY, f64::min);
        checks.push(Check::below(format!("p={pl}: quadratic path barrier on cue training data"), quad, eps));
        checks.push(Check::above(
            format!("p={pl}: aligned linear barrier on cue training data"),
            lin,
            r.checks.linear_barrier_multiple * eps,
        ));
        for cf in ["rand_cue", "rand_image"] {
            let dev = runs
                .iter()
                .map(|run| {
                    let v = run.cue.iter().find(|c| c.p == p).unwrap().connectivity.verdict(cf).unwrap();
                    if v.connected { f64::NEG_INFINITY } else { v.interior_accuracy_deviation }
                })
                .fold(f64::INFINITY, f64::min);
            checks.push(Check::above(
                format!("p={pl}: {cf} not connected, interior accuracy deviation (points)"),
                dev,
                r.checks.min_accuracy_deviation,
            ));
        }
    }
    let counter = runs.iter().flat_map(|run| &run.pairs).filter(|(_, p)| p.aligned_barrier() > eb && p.similar).count();
    checks.push(Check::at_most("pairs above epsilon_barrier yet similar", counter as f64, 0.0));

    let mut pair_rows = Vec::new();
    let mut profile_csv = Vec::new();
    let mut verdicts = Vec::new();
    for run in &runs {
        for (setting, p) in &run.pairs {
            pair_rows.push(pair_row(run.seed, setting, p, eb));
            let stem = format!("curves/seed-{}/{}", run.seed, p.label());
            report_csv(ctx, &format!("{stem}-raw.csv"), &p.raw)?;
            report_csv(ctx, &format!("{stem}-aligned.csv"), &p.aligned)?;
        }
        for (name, prof) in &run.profiles {
            profile_csv.extend(profile_rows(run.seed, "grid", name, prof));
        }
        for c in &run.cue {
            report_csv(ctx, &format!("curves/seed-{}/quadratic-p{}.csv", run.seed, p_label(c.p)), &c.connectivity.curves)?;
            verdicts.push(json!({"seed": run.seed, "cue_proportion": c.p, "verdicts": c.connectivity.verdicts}));
        }
    }
    ctx.write_csv("pairs.csv", &PAIR_HEADER, &pair_rows)?;
    ctx.write_csv("profiles.csv", &PROFILE_HEADER, &profile_csv)?;

    let mut thresholds = BTreeMap::new();
    thresholds.insert("epsilon_mc".to_string(), eps);
    thresholds.insert("epsilon_barrier".to_string(), eb);
    thresholds.insert("epsilon_inv".to_string(), r.mechanism.epsilon_inv);
    thresholds.insert("linear_barrier_multiple".to_string(), r.checks.linear_barrier_multiple);
    thresholds.insert("min_accuracy_deviation".to_string(), r.checks.min_accuracy_deviation);
    let pairs_json: Vec<_> = runs
        .iter()
        .flat_map(|run| {
            run.pairs.iter().map(move |(setting, p)| {
                json!({
                    "seed": run.seed,
                    "setting": setting,
                    "model_a": p.a,
                    "model_b": p.b,
                    "raw_barrier": p.raw_barrier(),
                    "aligned_barrier": p.aligned_barrier(),
                    "w1_distance": p.w1,
                    "mechanistically_similar": p.similar,
                })
            })
        })
        .collect();
    Ok(Summary::new(
        r.name.as_str(),
        &r.seeds,
        thresholds,
        checks,
        json!({"connectivity": verdicts, "pairs": pairs_json}),
    ))
}
