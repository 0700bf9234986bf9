pub mod deep;
pub mod fig1;
pub mod mnist;
pub mod ntk;
pub mod verify;

pub use deep::{run_depth_experiment, run_frozen_experiment, run_scaling_experiment};
pub use fig1::run_fig1;
pub use mnist::run_mnist_correlation;
pub use ntk::run_ntk_experiment;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::table::ResultTable;

/// Dispatches on the config's experiment name.
pub fn run(cfg: &ExperimentConfig, verify: bool) -> Result<ResultTable> {
    match cfg.experiment.as_str() {
        "fig1" => run_fig1(cfg, verify),
        "depth" => run_depth_experiment(cfg, verify),
        "scaling" => run_scaling_experiment(cfg, verify),
        "frozen" => run_frozen_experiment(cfg, verify),
        "mnist" => run_mnist_correlation(cfg, verify),
        "ntk" => run_ntk_experiment(cfg, verify),
        other => Err(LabError::Config(format!("unknown experiment {other:?}"))),
    }
}
