//! Closed-loop experiment driver over an object catalog.
//!
//! For each object in turn: capture a noisy multi-view cloud, fit a
//! superquadric, predict a mass prior from the cross-modal GP, simulate a
//! push, filter the observations and let the surprise gate decide whether
//! the result joins the GP dataset.

mod config;
mod experiment;
mod figures;
mod scene;

pub use config::{Catalog, CatalogObject, CloudConfig, InteractionOrder, RunConfig};
pub use experiment::{
    run_ablation, run_ablation_prepared, run_experiment, write_outputs, AblationReport, AblationRow, Experiment, MetricsRecord,
    PriorMode, RunOutput, RunSummary,
};
pub use figures::{emit_figures_data, FIGURE_FILES};
pub use scene::{object_seed, prepare_object, surface_cloud, synthesize_views, PreparedObject, Stream};
