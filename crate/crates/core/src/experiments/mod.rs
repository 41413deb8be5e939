//! Configurable end-to-end runs with CSV and JSON outputs.

mod config;
mod fit;
mod run;

pub use config::{
    CalibrationSpec, DictionarySpec, ExperimentConfig, ExperimentKind, GridSpec, LambdaGrid, NoiseSpec, PotentialPairSpec, ReconstructTarget,
};
pub use fit::{fit_line, fit_modulus, log_log_slope, spearman, LineFit, ModulusBranch, ModulusFit};
pub use run::{fit_kappa, identity_mismatch, output_dir, run, run_to_dir, Check, ErrorRecord, Outcome, Summary, Table};
