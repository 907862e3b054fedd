//! Slab experiments: which attribute a model relies on, and which model pairs
//! are linearly connected.

use std::collections::BTreeMap;

use mechlab::mechanism::{invariance_set, InvarianceProfile};
use mechlab::nn::LossKind;
use mechlab::rng::derive_seed;
use mechlab::slab::{InterventionSpec, SlabAttribute, SlabConfig, SlabDataset};
use mechlab::{Dataset, ModelParams};
use serde_json::json;

use super::common::{compare_pair, fit, mlp_arch, pair_row, profile_rows, report_csv, PairReport, PAIR_HEADER, PROFILE_HEADER};
use crate::error::CliResult;
use crate::output::{par_map, Cell, Check, RunContext, Summary};
use crate::recipe::{RecipeName, SlabRecipe};

const LOSS: LossKind = LossKind::MeanSquaredError;

/// Which attributes stay predictive in a model's training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    SimpleOnly,
    ComplexOnly,
    Both,
}

/// A trained model and the label used in reports.
pub struct Trained {
    pub name: String,
    pub scenario: Scenario,
    pub model: ModelParams,
    pub profile: InvarianceProfile,
}

pub struct SeedRun {
    pub seed: u64,
    pub models: Vec<Trained>,
    pub pairs: Vec<PairReport>,
}

fn data_config(r: &SlabRecipe, n: usize, seed: u64) -> SlabConfig {
    let d = &r.data;
    SlabConfig {
        dim: d.dim,
        attributes: vec![
            SlabAttribute { k: d.simple_k, predictive: true },
            SlabAttribute { k: d.complex_k, predictive: true },
        ],
        delta: d.delta,
        noise: d.noise,
        num_samples: n,
        seed,
        boundary: d.boundary,
    }
}

fn interventions(r: &SlabRecipe) -> Vec<(String, Vec<InterventionSpec>)> {
    vec![
        (format!("randomize_k{}", r.data.simple_k), vec![InterventionSpec::randomize(0)]),
        (format!("randomize_k{}", r.data.complex_k), vec![InterventionSpec::randomize(1)]),
    ]
}

fn scenario_name(r: &SlabRecipe, s: Scenario) -> String {
    let d = &r.data;
    match s {
        Scenario::SimpleOnly => format!("k{}", d.simple_k),
        Scenario::ComplexOnly => format!("k{}", d.complex_k),
        Scenario::Both => format!("k{}_{}", d.simple_k, d.complex_k),
    }
}

fn run_seed(r: &SlabRecipe, ctx: &RunContext, seed: u64) -> CliResult<SeedRun> {
    ctx.log(format!("{}: seed {seed}", r.name.as_str()));
    let base = SlabDataset::generate(&data_config(r, r.data.train_samples, derive_seed(seed, &[100])))?;
    let eval = SlabDataset::generate(&data_config(r, r.data.eval_samples, derive_seed(seed, &[101])))?;
    let mut plan = vec![(Scenario::SimpleOnly, 0u64), (Scenario::ComplexOnly, 0), (Scenario::Both, 0)];
    if r.name == RecipeName::LmcVerify {
        plan.push((Scenario::ComplexOnly, 1));
    }
    let arch = mlp_arch(r.data.dim, &r.hidden, 1);
    let mut models = Vec::new();
    for (scenario, replica) in plan {
        let sid = scenario as u64;
        let train_data: Dataset = match scenario {
            Scenario::SimpleOnly => base.intervene(&InterventionSpec::randomize(1), derive_seed(seed, &[102, sid]))?.data,
            Scenario::ComplexOnly => base.intervene(&InterventionSpec::randomize(0), derive_seed(seed, &[102, sid]))?.data,
            Scenario::Both => base.data.clone(),
        };
        let mut name = scenario_name(r, scenario);
        if replica > 0 {
            name.push_str("_prime");
        }
        // Models of one replica share initialization and batch order across
        // scenarios, so only the training data tells them apart.
        let cfg = r.train.config(derive_seed(seed, &[104, replica]));
        let key = ("slab", &r.data, seed, sid);
        let model = fit(ctx, &name, &key, &arch, derive_seed(seed, &[103, replica]), &train_data, LOSS, &cfg)?;
        ctx.save_model(&format!("checkpoints/seed-{seed}/{name}.json"), &model, seed, &name)?;
        let profile = invariance_set(
            &model,
            &eval,
            &interventions(r),
            r.mechanism.threshold(),
            LOSS,
            r.mechanism.repeats,
            derive_seed(seed, &[105]),
        )?;
        models.push(Trained { name, scenario, model, profile });
    }
    let mut pairs = Vec::new();
    if r.name == RecipeName::LmcVerify {
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let (a, b) = (&models[i], &models[j]);
                pairs.push(compare_pair(
                    (&a.name, &a.model, &a.profile),
                    (&b.name, &b.model, &b.profile),
                    &eval.data,
                    ("eval", &eval.data),
                    r.connect.grid,
                    LOSS,
                )?);
            }
        }
    }
    Ok(SeedRun { seed, models, pairs })
}

pub fn train_and_compare(r: &SlabRecipe, ctx: &RunContext) -> CliResult<Vec<SeedRun>> {
    par_map(&r.seeds, ctx.threads, |&s| run_seed(r, ctx, s)).into_iter().collect()
}

fn gap(m: &Trained, intervention: &str) -> f64 {
    m.profile.get(intervention).map_or(f64::NAN, |rec| rec.gap)
}

pub fn run(r: &SlabRecipe, ctx: &RunContext) -> CliResult<Summary> {
    let runs = train_and_compare(r, ctx)?;
    let names = interventions(r);
    let (simple, complex) = (names[0].0.clone(), names[1].0.clone());

    let mut profile_csv = Vec::new();
    for run in &runs {
        for m in &run.models {
            profile_csv.extend(profile_rows(run.seed, "slab", &m.name, &m.profile));
        }
    }
    ctx.write_csv("profiles.csv", &PROFILE_HEADER, &profile_csv)?;

    let mut thresholds = BTreeMap::new();
    thresholds.insert("epsilon_inv".to_string(), r.mechanism.epsilon_inv);
    let mut checks = Vec::new();
    let mut results = serde_json::Map::new();

    // Gap table: trained scenario x randomized attribute, averaged over seeds.
    let scenarios = [Scenario::SimpleOnly, Scenario::ComplexOnly, Scenario::Both];
    let mut table = Vec::new();
    for s in scenarios {
        for iv in [&simple, &complex] {
            let gs: Vec<f64> = runs
                .iter()
                .flat_map(|run| run.models.iter().filter(|m| m.scenario == s && !m.name.ends_with("_prime")))
                .map(|m| gap(m, iv))
                .collect();
            let mean = gs.iter().sum::<f64>() / gs.len() as f64;
            table.push(vec![Cell::from(scenario_name(r, s)), Cell::from(iv.as_str()), mean.into()]);
        }
    }
    ctx.write_csv("gap_table.csv", &["trained_on", "intervention", "mean_gap"], &table)?;

    if r.name == RecipeName::SimplicityBias {
        thresholds.insert("max_gap_ratio".to_string(), r.checks.max_gap_ratio);
        // (scenario, attribute it should be invariant to, attribute it relies on)
        let cells = [
            (Scenario::SimpleOnly, &complex, &simple),
            (Scenario::ComplexOnly, &simple, &complex),
            (Scenario::Both, &complex, &simple),
        ];
        for (s, small, large) in cells {
            let label = scenario_name(r, s);
            let mut worst_ratio: f64 = 0.0;
            let mut min_large = f64::INFINITY;
            for run in &runs {
                let m = run.models.iter().find(|m| m.scenario == s).unwrap();
                let (gs, gl) = (gap(m, small), gap(m, large));
                min_large = min_large.min(gl);
                worst_ratio = worst_ratio.max(if gl > 0.0 { gs.abs() / gl } else { f64::INFINITY });
            }
            checks.push(Check::below(format!("{label}: |gap {small}| / gap {large}"), worst_ratio, r.checks.max_gap_ratio));
            checks.push(Check::above(format!("{label}: gap {large}"), min_large, 0.0));
        }
        results.insert(
            "gap_table".into(),
            json!(table
                .iter()
                .map(|row| json!({"trained_on": cell_text(&row[0]), "intervention": cell_text(&row[1]), "mean_gap": cell_f64(&row[2])}))
                .collect::<Vec<_>>()),
        );
    } else {
        let eps = r.connect.epsilon_mc;
        let eb = r.connect.epsilon_barrier;
        thresholds.insert("epsilon_mc".to_string(), eps);
        thresholds.insert("epsilon_barrier".to_string(), eb);
        thresholds.insert("dissimilar_barrier_multiple".to_string(), r.checks.dissimilar_barrier_multiple);
        let (n0, n4, n04) =
            (scenario_name(r, Scenario::SimpleOnly), scenario_name(r, Scenario::ComplexOnly), scenario_name(r, Scenario::Both));
        let n4b = format!("{n4}_prime");
        let find = |run: &'_ SeedRun, a: &str, b: &str| -> PairReport {
            run.pairs.iter().find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a)).cloned().unwrap()
        };
        let fold = |f: &dyn Fn(&SeedRun) -> f64, init: f64, g: fn(f64, f64) -> f64| runs.iter().map(f).fold(init, g);
        let a_raw = fold(&|run| find(run, &n0, &n04).raw_barrier(), 0.0, f64::max);
        let b_aligned = fold(&|run| find(run, &n4, &n4b).aligned_barrier(), 0.0, f64::max);
        let b_raw = fold(&|run| find(run, &n4, &n4b).raw_barrier(), f64::INFINITY, f64::min);
        let c_aligned = fold(&|run| find(run, &n0, &n4).aligned_barrier(), f64::INFINITY, f64::min);
        let w1_margin = fold(
            &|run| find(run, &n0, &n4).w1 - find(run, &n0, &n04).w1.max(find(run, &n4, &n4b).w1),
            f64::INFINITY,
            f64::min,
        );
        let sim = |a: &str, b: &str| runs.iter().all(|run| find(run, a, b).similar);
        let dissim = |a: &str, b: &str| runs.iter().all(|run| !find(run, a, b).similar);
        checks.push(Check::below(format!("barrier {n0}~{n04} without alignment"), a_raw, eps));
        checks.push(Check::below(format!("barrier {n4}~{n4b} after alignment"), b_aligned, eps));
        checks.push(Check::above(format!("barrier {n4}~{n4b} before alignment"), b_raw, eps));
        checks.push(Check::above(
            format!("barrier {n0}~{n4} after alignment"),
            c_aligned,
            r.checks.dissimilar_barrier_multiple * eps,
        ));
        checks.push(Check::above(format!("W1 {n0}~{n4} minus the larger same-mechanism W1"), w1_margin, 0.0));
        checks.push(Check::holds(format!("{n0} and {n04} mechanistically similar"), sim(&n0, &n04)));
        checks.push(Check::holds(format!("{n4} and {n4b} mechanistically similar"), sim(&n4, &n4b)));
        checks.push(Check::holds(format!("{n0} and {n4} mechanistically dissimilar"), dissim(&n0, &n4)));
        let counter = runs
            .iter()
            .flat_map(|run| run.pairs.iter())
            .filter(|p| p.aligned_barrier() > eb && p.similar)
            .count();
        checks.push(Check::at_most("pairs above epsilon_barrier yet similar", counter as f64, 0.0));

        let mut rows = Vec::new();
        for run in &runs {
            for p in &run.pairs {
                rows.push(pair_row(run.seed, "slab", p, eb));
                let stem = format!("curves/seed-{}/{}", run.seed, p.label());
                report_csv(ctx, &format!("{stem}-raw.csv"), &p.raw)?;
                report_csv(ctx, &format!("{stem}-aligned.csv"), &p.aligned)?;
            }
        }
        ctx.write_csv("pairs.csv", &PAIR_HEADER, &rows)?;
        results.insert(
            "pairs".into(),
            json!(runs
                .iter()
                .flat_map(|run| run.pairs.iter().map(move |p| json!({
                    "seed": run.seed,
                    "model_a": p.a,
                    "model_b": p.b,
                    "raw_barrier": p.raw_barrier(),
                    "aligned_barrier": p.aligned_barrier(),
                    "w1_distance": p.w1,
                    "aligned_pattern_mismatch": p.aligned_mismatch,
                    "mechanistically_similar": p.similar,
                })))
                .collect::<Vec<_>>()),
        );
    }
    Ok(Summary::new(r.name.as_str(), &r.seeds, thresholds, checks, serde_json::Value::Object(results)))
}

fn cell_text(c: &Cell) -> String {
    match c {
        Cell::Text(s) => s.clone(),
        _ => String::new(),
    }
}

fn cell_f64(c: &Cell) -> f64 {
    match c {
        Cell::Float(v) => *v,
        _ => f64::NAN,
    }
}
