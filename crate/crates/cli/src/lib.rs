//! Recipe-driven experiment runner and command-line front end for `mechlab`.

pub mod cli;
pub mod error;
pub mod exp;
pub mod output;
pub mod recipe;

pub use error::{CliError, CliResult};
pub use exp::run_recipe;
pub use output::{Check, RunContext, Summary};
pub use recipe::{load_recipe, parse_recipe, Recipe, RecipeName};
