//! Recipe runners.

pub mod audit;
pub mod cbft;
pub mod common;
pub mod slab;
pub mod smc;

use crate::error::CliResult;
use crate::output::{RunContext, Summary};
use crate::recipe::Recipe;

/// Run a validated recipe, writing the recipe echo, per-experiment CSVs,
/// checkpoints, `summary.json` and `checks.csv` under `ctx.out`.
pub fn run_recipe(recipe: &Recipe, ctx: &RunContext) -> CliResult<Summary> {
    ctx.write("recipe.toml", recipe.to_toml())?;
    let summary = match recipe {
        Recipe::Slab(r) => slab::run(r, ctx)?,
        Recipe::Smc(r) => smc::run(r, ctx)?,
        Recipe::Cbft(r) => cbft::run(r, ctx)?,
        Recipe::Audit(r) => audit::run(r, ctx)?,
    };
    ctx.write("summary.json", summary.to_json())?;
    ctx.write("checks.csv", summary.checks_csv())?;
    Ok(summary)
}
