//! Command-line definitions and the single-step verbs.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mechlab::align::{activation_patterns, apply_permutation, match_by_activations, pattern_mismatch, w1_distance, MatchCost, MatchMode, MatchOptions};
use mechlab::cbft::{cbft_train, finetune, CbftConfig, FinetuneMethod, LlrConfig};
use mechlab::connect::{eval_path, mechanistic_connectivity_report, train_quadratic_midpoint, PathSpec, DEFAULT_GRID};
use mechlab::grid::{GridConfig, GridDataset};
use mechlab::mechanism::{invariance_set, Threshold};
use mechlab::nn::{evaluate, init_model, load_checkpoint, train, Architecture, LossKind, Schedule};
use mechlab::slab::{InterventionSpec, NoiseFamily, SlabAttribute, SlabConfig, SlabDataset, BoundaryRule};
use mechlab::{Dataset, ModelParams, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::error::{usage, CliError, CliResult};
use crate::exp::common::{profile_rows, PROFILE_HEADER};
use crate::exp::smc::grid_interventions;
use crate::output::{Cell, Check, RunContext, Summary};
use crate::recipe::{apply_override, load_recipe, TrainSection};

#[derive(Debug, Parser)]
#[command(name = "mechlab", version, about = "Mode connectivity and mechanism experiments on small ReLU networks")]
pub struct Cli {
    /// Output directory (default: $MECHLAB_OUT/<command>, or ./mechlab-out/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent seeds.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// How results are printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Reuse trained checkpoints stored in this directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Slab,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    Mse,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossKind::CrossEntropy,
            LossArg::Mse => LossKind::MeanSquaredError,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cbft,
    Naive,
    Llr,
    Lpft,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key=value` settings overrides; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a slab or grid dataset.
    Generate {
        #[arg(value_enum)]
        family: Family,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated hidden widths; empty for a linear model.
        #[arg(long, default_value = "512")]
        hidden: String,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Single hidden layer with a fixed averaging head (squared error only).
        #[arg(long)]
        fixed_head: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a linear or quadratic path between two checkpoints.
    Path {
        #[arg(long)]
        start: PathBuf,
        #[arg(long)]
        end: PathBuf,
        /// Quadratic path midpoint checkpoint.
        #[arg(long, conflicts_with = "train_mid")]
        mid: Option<PathBuf>,
        /// Train a quadratic midpoint on the first dataset.
        #[arg(long)]
        train_mid: bool,
        /// Evaluation datasets; the first is the base dataset.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon_mc: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Align the hidden units of `b` to `a` by matching activations.
    Align {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Match on correlation instead of squared distance.
        #[arg(long)]
        correlation: bool,
        /// Apply each layer's permutation before matching the next.
        #[arg(long)]
        sequential: bool,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
    },
    /// Invariance profile of a model under the dataset family's interventions.
    Mechanism {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon_inv: f64,
        /// Treat `epsilon_inv` as an absolute loss tolerance.
        #[arg(long)]
        absolute: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune a cue-trained model on clean data.
    Cbft {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        cue_data: PathBuf,
        #[arg(long)]
        clean_data: PathBuf,
        /// Held-out clean data (required for LPFT).
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Cbft)]
        method: MethodArg,
        #[command(flatten)]
        common: Common,
    },
    /// Run experiment recipes.
    Recipe {
        #[command(subcommand)]
        action: RecipeAction,
    },
    /// Print a run summary as text, CSV or JSON.
    Report {
        /// `summary.json` or the directory holding it.
        summary: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum RecipeAction {
    /// Run a recipe file.
    Run {
        recipe: PathBuf,
        /// Replace the recipe's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// A dataset file of either family.
pub enum Loaded {
    Slab(SlabDataset),
    Grid(GridDataset),
}

impl Loaded {
    pub fn data(&self) -> &Dataset {
        match self {
            Loaded::Slab(d) => &d.data,
            Loaded::Grid(d) => &d.data,
        }
    }
}

pub fn load_dataset(path: &Path) -> CliResult<Loaded> {
    let open = || -> CliResult<BufReader<File>> {
        Ok(BufReader::new(File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?))
    };
    if let Ok(d) = SlabDataset::read_binary(open()?) {
        return Ok(Loaded::Slab(d));
    }
    GridDataset::read_binary(open()?)
        .map(Loaded::Grid)
        .map_err(|e| CliError::Usage(format!("{}: not a dataset file ({e})", path.display())))
}

pub fn load_model(path: &Path) -> CliResult<ModelParams> {
    load_checkpoint(path).map(|(m, _)| m).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Loss kind implied by a model's output width.
fn loss_for(model: &ModelParams) -> LossKind {
    if model.output_dim() == 1 {
        LossKind::MeanSquaredError
    } else {
        LossKind::CrossEntropy
    }
}

/// Serialize `base`, apply overrides, and read it back.
fn with_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> CliResult<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::Usage(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Usage(format!("invalid settings: {e}")))
}

fn default_train() -> TrainSection {
    TrainSection {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 256,
        epochs: 20,
        schedule: Schedule::Cosine,
    }
}

fn parse_widths(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::Usage(format!("bad width `{t}`"))))
        .collect()
}

fn out_dir(cli: &Cli, name: &str) -> PathBuf {
    match &cli.out {
        Some(p) => p.clone(),
        None => std::env::var_os("MECHLAB_OUT").map_or_else(|| PathBuf::from("mechlab-out"), PathBuf::from).join(name),
    }
}

fn context(cli: &Cli, name: &str) -> RunContext {
    RunContext { out: out_dir(cli, name), cache: cli.cache.clone(), threads: cli.threads, verbose: cli.verbose }
}

fn print_summary(format: Format, s: &Summary) {
    match format {
        Format::Text => {
            for c in &s.checks {
                println!("{}", c.line());
            }
            println!("{}: {}", s.recipe, if s.passed { "PASS" } else { "FAIL" });
        }
        Format::Csv => print!("{}", s.checks_csv()),
        Format::Json => print!("{}", s.to_json()),
    }
}

fn finish(ctx: &RunContext, format: Format, s: Summary) -> CliResult<bool> {
    ctx.write("summary.json", s.to_json())?;
    print_summary(format, &s);
    Ok(s.passed)
}

fn simple_summary(name: &str, seed: u64, checks: Vec<Check>, results: serde_json::Value) -> Summary {
    Summary::new(name, &[seed], Default::default(), checks, results)
}

/// Execute a parsed command line. Returns whether every check passed.
pub fn execute(cli: &Cli) -> CliResult<bool> {
    match &cli.command {
        Command::Recipe { action: RecipeAction::Run { recipe, seed, overrides } } => {
            let mut overrides = overrides.clone();
            if let Some(s) = seed {
                overrides.push(format!("seeds=[{s}]"));
            }
            let recipe = load_recipe(recipe, &overrides)?;
            let ctx = context(cli, recipe.name().as_str());
            let summary = crate::exp::run_recipe(&recipe, &ctx)?;
            print_summary(cli.format, &summary);
            Ok(summary.passed)
        }
        Command::Report { summary } => {
            let file = if summary.is_dir() { summary.join("summary.json") } else { summary.clone() };
            let text = std::fs::read_to_string(&file).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
            let s = Summary::from_json(&text)?;
            print_summary(cli.format, &s);
            Ok(s.passed)
        }
        Command::Generate { family, common } => generate(cli, *family, common),
        Command::Train { data, hidden, loss, fixed_head, common } => {
            train_cmd(cli, data, hidden, *loss, *fixed_head, common)
        }
        Command::Path { start, end, mid, train_mid, data, grid, epsilon_mc, common } => {
            path_cmd(cli, start, end, mid.as_deref(), *train_mid, data, *grid, *epsilon_mc, common)
        }
        Command::Align { a, b, data, correlation, sequential, grid } => {
            align_cmd(cli, a, b, data, *correlation, *sequential, *grid)
        }
        Command::Mechanism { model, data, repeats, epsilon_inv, absolute, seed } => {
            mechanism_cmd(cli, model, data, *repeats, *epsilon_inv, *absolute, *seed)
        }
        Command::Cbft { anchor, cue_data, clean_data, validation, method, common } => {
            cbft_cmd(cli, anchor, cue_data, clean_data, validation.as_deref(), *method, common)
        }
    }
}

fn generate(cli: &Cli, family: Family, common: &Common) -> CliResult<bool> {
    let (name, config, n) = match family {
        Family::Slab => {
            let base = SlabConfig {
                dim: 128,
                attributes: vec![SlabAttribute { k: 0, predictive: true }, SlabAttribute { k: 4, predictive: true }],
                delta: 0.1,
                noise: NoiseFamily::Uniform,
                num_samples: 1000,
                seed: common.seed,
                boundary: BoundaryRule::Inward,
            };
            let cfg = with_overrides(&base, &common.overrides)?;
            let d = SlabDataset::generate(&cfg)?;
            let ctx = context(cli, "generate");
            write_file(&ctx, "dataset.mlds", |w| d.write_binary(w))?;
            write_file(&ctx, "dataset.tsv", |w| d.write_text(w))?;
            ("slab", serde_json::to_value(&cfg)?, d.len())
        }
        Family::Grid => {
            let base = GridConfig { seed: common.seed, ..GridConfig::default() };
            let cfg = with_overrides(&base, &common.overrides)?;
            let d = GridDataset::generate(&cfg)?;
            let ctx = context(cli, "generate");
            write_file(&ctx, "dataset.mlds", |w| d.write_binary(w))?;
            write_file(&ctx, "dataset.tsv", |w| d.write_text(w))?;
            ("grid", serde_json::to_value(&cfg)?, d.len())
        }
    };
    let ctx = context(cli, "generate");
    let s = simple_summary("generate", common.seed, vec![], json!({"family": name, "samples": n, "config": config}));
    finish(&ctx, cli.format, s)
}

fn write_file(ctx: &RunContext, rel: &str, f: impl FnOnce(&mut BufWriter<File>) -> mechlab::Result<()>) -> CliResult<()> {
    let p = ctx.path(rel);
    if let Some(dir) = p.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?);
    f(&mut w)?;
    Ok(())
}

fn train_cmd(cli: &Cli, data: &Path, hidden: &str, loss: Option<LossArg>, fixed_head: bool, common: &Common) -> CliResult<bool> {
    let section = with_overrides(&default_train(), &common.overrides)?;
    let cfg = section.config(common.seed);
    cfg.validate()?;
    let widths = parse_widths(hidden)?;
    let loaded = load_dataset(data)?;
    let d = loaded.data();
    let loss: LossKind = match (loss, &loaded) {
        (Some(l), _) => l.into(),
        (None, Loaded::Slab(_)) => LossKind::MeanSquaredError,
        (None, Loaded::Grid(_)) => LossKind::CrossEntropy,
    };
    let outputs = match loss {
        LossKind::MeanSquaredError => 1,
        LossKind::CrossEntropy => d.num_classes().max(2),
    };
    let arch = if fixed_head {
        if widths.len() != 1 {
            return usage("a fixed-head model has exactly one hidden layer");
        }
        Architecture::fixed_head(d.dim(), widths[0])
    } else {
        crate::exp::common::mlp_arch(d.dim(), &widths, outputs)
    };
    let ctx = context(cli, "train");
    let outcome = train(init_model(&arch, common.seed)?, d, loss, &cfg)?;
    let eval = evaluate(&outcome.model, d, loss)?;
    ctx.save_model("model.json", &outcome.model, common.seed, "mechlab train")?;
    let rows: Vec<Vec<Cell>> =
        outcome.epoch_losses.iter().enumerate().map(|(e, &l)| vec![e.into(), l.into()]).collect();
    ctx.write_csv("losses.csv", &["epoch", "loss"], &rows)?;
    ctx.write("train.toml", toml::to_string(&section).map_err(|e| CliError::Io(e.to_string()))?)?;
    let s = simple_summary(
        "train",
        common.seed,
        vec![],
        json!({"architecture": arch, "train": cfg, "final_loss": eval.loss, "final_accuracy": eval.accuracy}),
    );
    finish(&ctx, cli.format, s)
}

#[allow(clippy::too_many_arguments)]
fn path_cmd(
    cli: &Cli,
    start: &Path,
    end: &Path,
    mid: Option<&Path>,
    train_mid: bool,
    data: &[PathBuf],
    grid: usize,
    epsilon_mc: f64,
    common: &Common,
) -> CliResult<bool> {
    let (a, b) = (load_model(start)?, load_model(end)?);
    let loss = loss_for(&a);
    let sets: Vec<(String, Loaded)> = data
        .iter()
        .map(|p| Ok((p.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()), load_dataset(p)?)))
        .collect::<CliResult<_>>()?;
    let ctx = context(cli, "path");
    let spec = if let Some(m) = mid {
        PathSpec::bezier(a, load_model(m)?, b)?
    } else if train_mid {
        let section = with_overrides(&default_train(), &common.overrides)?;
        let m = train_quadratic_midpoint(&a, &b, sets[0].1.data(), loss, &section.config(common.seed))?;
        ctx.save_model("midpoint.json", &m, common.seed, "quadratic path midpoint")?;
        PathSpec::bezier(a, m, b)?
    } else {
        PathSpec::linear(a, b)?
    };
    let named: Vec<(&str, &Dataset)> = sets.iter().map(|(n, d)| (n.as_str(), d.data())).collect();
    let report = mechanistic_connectivity_report(&spec, named[0], &named[1..], epsilon_mc, None, grid, loss)?;
    let mut buf = Vec::new();
    report.curves.write_csv(&mut buf)?;
    ctx.write("path.csv", buf)?;
    let checks = report.verdicts.iter().map(|v| Check::at_most(format!("barrier on {}", v.dataset), v.barrier, epsilon_mc)).collect();
    let s = simple_summary(
        "path",
        common.seed,
        checks,
        json!({"path": spec.kind_name(), "verdicts": report.verdicts, "mechanistically_connected": report.mechanistically_connected}),
    );
    // A path that is not connected is a finding, not a failed run.
    finish(&ctx, cli.format, s).map(|_| true)
}

fn align_cmd(cli: &Cli, a: &Path, b: &Path, data: &Path, correlation: bool, sequential: bool, grid: usize) -> CliResult<bool> {
    let (ma, mb) = (load_model(a)?, load_model(b)?);
    let loaded = load_dataset(data)?;
    let d = loaded.data();
    let opts = MatchOptions {
        cost: if correlation { MatchCost::Correlation } else { MatchCost::SquaredDistance },
        mode: if sequential { MatchMode::Sequential } else { MatchMode::Independent },
    };
    let map = match_by_activations(&ma, &mb, d, opts)?;
    let aligned = apply_permutation(&mb, &map)?;
    let loss = loss_for(&ma);
    let before = eval_path(&PathSpec::linear(ma.clone(), mb.clone())?, &[("data", d)], grid, loss)?;
    let after = eval_path(&PathSpec::linear(ma.clone(), aligned.clone())?, &[("data", d)], grid, loss)?;
    let (pa, pb) = (activation_patterns(&ma, d)?, activation_patterns(&aligned, d)?);
    let ctx = context(cli, "align");
    ctx.write("permutation.json", map.to_json()?)?;
    ctx.save_model("aligned.json", &aligned, 0, "aligned to the first model")?;
    let mut hist = Vec::new();
    pa.write_rate_histogram(&mut hist, 10)?;
    ctx.write("rates_a.csv", hist)?;
    let s = simple_summary(
        "align",
        0,
        vec![],
        json!({
            "barrier_before": before.curves[0].barrier,
            "barrier_after": after.curves[0].barrier,
            "w1_distance": w1_distance(&pa, &pb)?,
            "pattern_mismatch": pattern_mismatch(&pa, &pb)?,
            "identity": map.is_identity(),
        }),
    );
    finish(&ctx, cli.format, s)
}

fn mechanism_cmd(cli: &Cli, model: &Path, data: &Path, repeats: usize, eps: f64, absolute: bool, seed: u64) -> CliResult<bool> {
    let m = load_model(model)?;
    let threshold = if absolute { Threshold::Absolute(eps) } else { Threshold::Relative(eps) };
    let loss = loss_for(&m);
    let profile = match load_dataset(data)? {
        Loaded::Slab(d) => {
            let list: Vec<(String, Vec<InterventionSpec>)> = d
                .config
                .attributes
                .iter()
                .enumerate()
                .map(|(i, a)| (format!("randomize_{i}_k{}", a.k), vec![InterventionSpec::randomize(i)]))
                .collect();
            invariance_set(&m, &d, &list, threshold, loss, repeats, seed)?
        }
        Loaded::Grid(d) => invariance_set(&m, &d, &grid_interventions(), threshold, loss, repeats, seed)?,
    };
    let ctx = context(cli, "mechanism");
    ctx.write_csv("profile.csv", &PROFILE_HEADER, &profile_rows(seed, "cli", "model", &profile))?;
    let s = simple_summary("mechanism", seed, vec![], serde_json::to_value(&profile)?);
    finish(&ctx, cli.format, s)
}

fn cbft_cmd(
    cli: &Cli,
    anchor: &Path,
    cue: &Path,
    clean: &Path,
    validation: Option<&Path>,
    method: MethodArg,
    common: &Common,
) -> CliResult<bool> {
    let theta = load_model(anchor)?;
    let dnc = load_dataset(clean)?;
    let ctx;
    let model = match method {
        MethodArg::Cbft => {
            let cfg = with_overrides(&CbftConfig { seed: common.seed, ..CbftConfig::default() }, &common.overrides)?;
            let dc = load_dataset(cue)?;
            ctx = context(cli, "cbft");
            ctx.write("cbft.toml", toml::to_string(&cfg).map_err(|e| CliError::Io(e.to_string()))?)?;
            cbft_train(&theta, dc.data(), dnc.data(), &cfg)?
        }
        other => {
            let tc = with_overrides(
                &TrainConfig {
                    lr: 0.01,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 128,
                    epochs: 20,
                    schedule: Schedule::Cosine,
                    seed: common.seed,
                },
                &common.overrides,
            )?;
            let llr = LlrConfig { seed: common.seed, ..LlrConfig::default() };
            let m = match other {
                MethodArg::Naive => FinetuneMethod::Naive(tc),
                MethodArg::Llr => FinetuneMethod::Llr(llr),
                _ => FinetuneMethod::Lpft { probe: llr, tune: tc, lrs: vec![0.01, 0.001, 0.0001] },
            };
            let val = validation.map(load_dataset).transpose()?;
            ctx = context(cli, "cbft");
            finetune(&theta, dnc.data(), &m, val.as_ref().map(Loaded::data))?.model
        }
    };
    ctx.save_model("model.json", &model, common.seed, "fine-tuned")?;
    let e = evaluate(&model, dnc.data(), LossKind::CrossEntropy)?;
    let s = simple_summary("cbft", common.seed, vec![], json!({"clean_loss": e.loss, "clean_accuracy": e.accuracy}));
    finish(&ctx, cli.format, s)
}
