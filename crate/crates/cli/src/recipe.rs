//! Experiment recipes: typed TOML files with one section per concern, plus
//! `section.key=value` command-line overrides.

use std::f64::consts::PI;
use std::path::Path;

use mechlab::cbft::{ClassMeans, LlrConfig};
use mechlab::grid::GridConfig;
use mechlab::mechanism::Threshold;
use mechlab::nn::Schedule;
use mechlab::slab::{BoundaryRule, NoiseFamily};
use mechlab::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeName {
    SimplicityBias,
    LmcVerify,
    SmcToy,
    CbftBench,
    GradAudit,
}

impl RecipeName {
    pub fn as_str(self) -> &'static str {
        match self {
            RecipeName::SimplicityBias => "simplicity-bias",
            RecipeName::LmcVerify => "lmc-verify",
            RecipeName::SmcToy => "smc-toy",
            RecipeName::CbftBench => "cbft-bench",
            RecipeName::GradAudit => "grad-audit",
        }
    }
}

/// SGD settings without a seed; each run supplies its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            schedule: self.schedule.clone(),
            seed,
        }
    }

    fn validate(&self, what: &str) -> CliResult<()> {
        self.config(0).validate().map_err(|e| CliError::from(e).context(what))
    }
}

/// Invariance threshold and Monte Carlo repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSection {
    /// Invariance tolerance on the loss gap.
    pub epsilon_inv: f64,
    /// Whether `epsilon_inv` is a fraction of the base loss.
    pub relative: bool,
    pub repeats: usize,
}

impl MechanismSection {
    pub fn threshold(&self) -> Threshold {
        if self.relative {
            Threshold::Relative(self.epsilon_inv)
        } else {
            Threshold::Absolute(self.epsilon_inv)
        }
    }
}

impl Default for MechanismSection {
    fn default() -> Self {
        Self { epsilon_inv: 0.05, relative: true, repeats: 5 }
    }
}

/// Path evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectSection {
    /// Largest barrier still counted as mode connected.
    pub epsilon_mc: f64,
    /// Barrier above which a pair counts as not linearly connected in the
    /// dissimilarity screen.
    pub epsilon_barrier: f64,
    pub grid: usize,
    /// Largest endpoint loss still counted as a minimizer in connectivity
    /// verdicts; absent means any endpoint qualifies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimizer_tolerance: Option<f64>,
}

// ---------------------------------------------------------------- slab

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabSection {
    pub dim: usize,
    pub delta: f64,
    pub noise: NoiseFamily,
    pub boundary: BoundaryRule,
    /// Complexity of the simple attribute.
    pub simple_k: u32,
    /// Complexity of the complex attribute.
    pub complex_k: u32,
    pub train_samples: usize,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabChecks {
    /// Largest allowed ratio of a should-be-zero gap to the matching large gap.
    pub max_gap_ratio: f64,
    /// Required multiple of `epsilon_mc` for the barrier between models using
    /// different attributes.
    pub dissimilar_barrier_multiple: f64,
}

/// Shared by `simplicity-bias` and `lmc-verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabRecipe {
    pub name: RecipeName,
    pub seeds: Vec<u64>,
    pub data: SlabSection,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub train: TrainSection,
    pub mechanism: MechanismSection,
    pub connect: ConnectSection,
    pub checks: SlabChecks,
}

// ---------------------------------------------------------------- grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub classes: usize,
    pub side: usize,
    pub cue_size: usize,
    pub noise_amplitude: f64,
    pub contrast: f64,
    pub frequency: f64,
    pub jitter: f64,
    pub phase_max: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        Self {
            classes: g.classes,
            side: g.side,
            cue_size: g.cue_size,
            noise_amplitude: g.noise_amplitude,
            contrast: g.contrast,
            frequency: g.frequency,
            jitter: g.jitter,
            phase_max: 2.0 * PI,
        }
    }
}

impl GridSection {
    pub fn config(&self, cue_proportion: f64, num_samples: usize, seed: u64) -> GridConfig {
        GridConfig {
            classes: self.classes,
            side: self.side,
            cue_size: self.cue_size,
            cue_proportion,
            noise_amplitude: self.noise_amplitude,
            num_samples,
            seed,
            contrast: self.contrast,
            frequency: self.frequency,
            jitter: self.jitter,
            phase_max: self.phase_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcData {
    pub grid: GridSection,
    pub cue_proportions: Vec<f64>,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcChecks {
    /// Required multiple of `epsilon_mc` for the aligned linear barrier.
    pub linear_barrier_multiple: f64,
    /// Interior accuracy must leave an endpoint by more than this many points
    /// on the cue-breaking counterfactuals.
    pub min_accuracy_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcRecipe {
    pub name: RecipeName,
    pub seeds: Vec<u64>,
    pub data: SmcData,
    pub hidden: Vec<usize>,
    pub train: TrainSection,
    /// Quadratic-path midpoint training.
    pub path: TrainSection,
    pub mechanism: MechanismSection,
    pub connect: ConnectSection,
    pub checks: SmcChecks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbftData {
    pub grid: GridSection,
    pub cue_proportions: Vec<f64>,
    pub pretrain_samples: usize,
    pub clean_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
}

/// Fine-tuning baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// Naive fine-tuning at the medium rate; its clean accuracy is the
    /// reference for CBFT.
    pub medium_lr: f64,
    /// Naive fine-tuning at the small rate.
    pub small_lr: f64,
    pub finetune: TrainSection,
    pub llr: LlrSection,
    pub lpft_lrs: Vec<f64>,
    pub lpft_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlrSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl LlrSection {
    pub fn config(&self, seed: u64) -> LlrConfig {
        LlrConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbftSection {
    pub lambda_b: f64,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size_c: usize,
    pub batch_size_nc: usize,
    /// Weight of the representation-matching term; 0 or less means `1 / classes`.
    pub invariance_weight: f64,
    pub barrier_weight: f64,
    pub t_mean: f64,
    pub t_std: f64,
    pub min_class_samples: usize,
    pub class_means: ClassMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbftChecks {
    /// Largest |RC - NC| after CBFT, in accuracy points.
    pub max_rc_nc_gap: f64,
    /// CBFT accuracy on RI must not exceed this multiple of chance.
    pub max_ri_chance_multiple: f64,
    /// Largest shortfall of CBFT's NC accuracy against medium-rate naive FT.
    pub max_nc_shortfall: f64,
    /// Smallest RI accuracy of small-rate naive FT.
    pub min_naive_ri: f64,
    /// Small-rate naive FT must have RC at least this far below NC.
    pub min_naive_rc_drop: f64,
    /// Smallest linear barrier between the CBFT model and its anchor on the
    /// cue data, as a fraction of `lambda_b`.
    pub min_barrier_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbftRecipe {
    pub name: RecipeName,
    pub seeds: Vec<u64>,
    pub data: CbftData,
    pub hidden: Vec<usize>,
    pub pretrain: TrainSection,
    pub baselines: BaselineSection,
    pub cbft: CbftSection,
    pub grid_points: usize,
    pub checks: CbftChecks,
}

// ---------------------------------------------------------------- audit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientAudit {
    pub models_per_loss: usize,
    pub max_hidden_layers: usize,
    pub max_width: usize,
    pub max_input_dim: usize,
    pub batch_size: usize,
    pub step: f64,
    /// Step for linear models under squared error, where central differences
    /// are exact up to rounding.
    pub linear_step: f64,
    pub max_rel_error: f64,
    pub linear_mse_max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermutationAudit {
    pub models: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub max_hidden_layers: usize,
    pub input_dim: usize,
    pub samples: usize,
    pub max_barrier: f64,
    pub grid: usize,
    /// Random cost matrices compared against exhaustive search.
    pub brute_force_cases: usize,
    pub brute_force_max_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecipe {
    pub name: RecipeName,
    pub seeds: Vec<u64>,
    pub gradient: GradientAudit,
    pub permutation: PermutationAudit,
}

// ---------------------------------------------------------------- loading

#[derive(Debug, Clone, PartialEq)]
pub enum Recipe {
    Slab(SlabRecipe),
    Smc(SmcRecipe),
    Cbft(CbftRecipe),
    Audit(AuditRecipe),
}

impl Recipe {
    pub fn name(&self) -> RecipeName {
        match self {
            Recipe::Slab(r) => r.name,
            Recipe::Smc(r) => r.name,
            Recipe::Cbft(r) => r.name,
            Recipe::Audit(r) => r.name,
        }
    }

    pub fn seeds(&self) -> &[u64] {
        match self {
            Recipe::Slab(r) => &r.seeds,
            Recipe::Smc(r) => &r.seeds,
            Recipe::Cbft(r) => &r.seeds,
            Recipe::Audit(r) => &r.seeds,
        }
    }

    /// The fully resolved recipe as TOML.
    pub fn to_toml(&self) -> String {
        let out = match self {
            Recipe::Slab(r) => toml::to_string(r),
            Recipe::Smc(r) => toml::to_string(r),
            Recipe::Cbft(r) => toml::to_string(r),
            Recipe::Audit(r) => toml::to_string(r),
        };
        out.expect("recipe types serialize to TOML")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds().is_empty() {
            return usage("seed list is empty");
        }
        match self {
            Recipe::Slab(r) => {
                if r.data.simple_k % 2 != 0 || r.data.complex_k % 2 != 0 {
                    return usage("slab complexities must be even");
                }
                if r.data.simple_k >= r.data.complex_k {
                    return usage("simple_k must be below complex_k");
                }
                if !(0.0..0.5).contains(&r.data.delta) || r.data.dim < 2 {
                    return usage("slab data needs delta in [0, 0.5) and at least two columns");
                }
                nonempty(&r.hidden, "hidden")?;
                r.train.validate("train")?;
                check_connect(&r.connect)?;
                check_mechanism(&r.mechanism)
            }
            Recipe::Smc(r) => {
                check_proportions(&r.data.cue_proportions)?;
                for &p in &r.data.cue_proportions {
                    r.data.grid.config(p, r.data.train_samples, 0).validate()?;
                }
                nonempty(&r.hidden, "hidden")?;
                r.train.validate("train")?;
                r.path.validate("path")?;
                check_connect(&r.connect)?;
                check_mechanism(&r.mechanism)
            }
            Recipe::Cbft(r) => {
                check_proportions(&r.data.cue_proportions)?;
                for &p in &r.data.cue_proportions {
                    r.data.grid.config(p, r.data.pretrain_samples, 0).validate()?;
                }
                nonempty(&r.hidden, "hidden")?;
                r.pretrain.validate("pretrain")?;
                r.baselines.finetune.validate("baselines.finetune")?;
                if r.baselines.lpft_lrs.is_empty() || r.baselines.lpft_epochs == 0 {
                    return usage("LPFT needs learning rates and a positive epoch count");
                }
                if r.grid_points < 3 {
                    return usage("grid_points must be at least 3");
                }
                cbft_config(r, 0).validate()?;
                Ok(())
            }
            Recipe::Audit(r) => {
                let g = &r.gradient;
                if g.models_per_loss == 0 || g.batch_size == 0 || g.max_width == 0 || g.max_input_dim == 0 {
                    return usage("gradient audit sizes must be positive");
                }
                if !(g.step > 0.0 && g.linear_step > 0.0) {
                    return usage("finite-difference steps must be positive");
                }
                let p = &r.permutation;
                if p.min_width == 0 || p.min_width > p.max_width || p.max_hidden_layers == 0 || p.samples == 0 {
                    return usage("permutation audit needs 0 < min_width <= max_width and positive sizes");
                }
                if p.grid < 3 || p.brute_force_max_width == 0 || p.brute_force_max_width > 8 {
                    return usage("permutation audit needs grid >= 3 and brute-force widths in 1..=8");
                }
                Ok(())
            }
        }
    }
}

/// CBFT settings for one run.
pub fn cbft_config(r: &CbftRecipe, seed: u64) -> mechlab::cbft::CbftConfig {
    let c = &r.cbft;
    mechlab::cbft::CbftConfig {
        lambda_b: c.lambda_b,
        epochs: c.epochs,
        lr: c.lr,
        schedule: c.schedule.clone(),
        momentum: c.momentum,
        weight_decay: c.weight_decay,
        batch_size_c: c.batch_size_c,
        batch_size_nc: c.batch_size_nc,
        invariance_weight: (c.invariance_weight > 0.0).then_some(c.invariance_weight),
        barrier_weight: c.barrier_weight,
        t_mean: c.t_mean,
        t_std: c.t_std,
        min_class_samples: c.min_class_samples,
        class_means: c.class_means,
        seed,
    }
}

fn nonempty(v: &[usize], what: &str) -> CliResult<()> {
    if v.is_empty() || v.contains(&0) {
        return usage(format!("{what} must list positive widths"));
    }
    Ok(())
}

fn check_connect(c: &ConnectSection) -> CliResult<()> {
    if !(c.epsilon_mc >= 0.0 && c.epsilon_barrier >= 0.0) || c.grid < 3 {
        return usage("connect needs non-negative epsilons and grid >= 3");
    }
    Ok(())
}

fn check_mechanism(m: &MechanismSection) -> CliResult<()> {
    if m.repeats == 0 || !(m.epsilon_inv >= 0.0) {
        return usage("mechanism needs repeats >= 1 and a non-negative epsilon_inv");
    }
    Ok(())
}

fn check_proportions(ps: &[f64]) -> CliResult<()> {
    if ps.is_empty() || ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return usage("cue_proportions must be a non-empty list of values in [0, 1]");
    }
    Ok(())
}

fn typed<T: DeserializeOwned + Serialize>(table: toml::Table) -> CliResult<T> {
    T::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Usage(format!("invalid recipe: {e}")))
}

fn retable<T: Serialize>(v: &T) -> toml::Table {
    toml::Table::try_from(v).expect("recipe types serialize to TOML")
}

fn decode(table: toml::Table) -> CliResult<Recipe> {
    let name = match table.get("name") {
        Some(toml::Value::String(s)) => s.clone(),
        _ => return usage("recipe needs a string `name`"),
    };
    let name: RecipeName = toml::Value::String(name.clone())
        .try_into()
        .map_err(|_| CliError::Usage(format!("unknown recipe name `{name}`")))?;
    Ok(match name {
        RecipeName::SimplicityBias | RecipeName::LmcVerify => Recipe::Slab(typed(table)?),
        RecipeName::SmcToy => Recipe::Smc(typed(table)?),
        RecipeName::CbftBench => Recipe::Cbft(typed(table)?),
        RecipeName::GradAudit => Recipe::Audit(typed(table)?),
    })
}

/// Parse a `key=value` override value: any TOML value, or a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub(crate) fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return usage(format!("override `{spec}` is not of the form key=value"));
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for (i, part) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        let Some(slot) = cur.get_mut(*part) else {
            return usage(format!("unknown recipe key `{}`", key.trim()));
        };
        if last {
            if matches!(slot, toml::Value::Table(_)) {
                return usage(format!("`{}` is a section, not a value", key.trim()));
            }
            *slot = parse_value(raw.trim());
            return Ok(());
        }
        match slot {
            toml::Value::Table(t) => cur = t,
            _ => return usage(format!("unknown recipe key `{}`", key.trim())),
        }
    }
    unreachable!("split always yields at least one part")
}

/// Parse recipe text, apply overrides to the resolved recipe, and validate.
pub fn parse_recipe(text: &str, overrides: &[String]) -> CliResult<Recipe> {
    let table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("unparseable recipe: {e}")))?;
    let recipe = decode(table)?;
    let recipe = if overrides.is_empty() {
        recipe
    } else {
        let mut resolved = match &recipe {
            Recipe::Slab(r) => retable(r),
            Recipe::Smc(r) => retable(r),
            Recipe::Cbft(r) => retable(r),
            Recipe::Audit(r) => retable(r),
        };
        for o in overrides {
            if o.trim_start().starts_with("name=") || o.trim_start().starts_with("name =") {
                return usage("the recipe name cannot be overridden");
            }
            apply_override(&mut resolved, o)?;
        }
        decode(resolved)?
    };
    recipe.validate()?;
    Ok(recipe)
}

pub fn load_recipe(path: &Path, overrides: &[String]) -> CliResult<Recipe> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read recipe {}: {e}", path.display())))?;
    parse_recipe(&text, overrides)
}
