//! The end-to-end recipe: data, the three training stages, evaluation,
//! ablations and metric plots.

mod ablate;
mod config;
mod finetune;
mod plot;
mod recipe;

pub use ablate::{ablate, to_csv as ablation_csv, AblationRow, Method};
pub use config::{CorpusConfig, FinetuneConfig, RunConfig, Stages, DEFAULT_COUNTS};
pub use finetune::{finetune, EarlyStopping, FinetuneRecord, FinetuneSummary};
pub use plot::{plot_metrics, Series};
pub use recipe::{evaluate, gen_data, group, locale_name, run_recipe, Data, RecipeReport};

#[cfg(test)]
mod tests;
