//! Nuclear-norm regularized estimation of conditional factor models.

pub mod error;
pub mod evaluate;
pub mod extract;
pub mod matdecomp;
pub mod panel_io;
pub mod problems;
pub mod prox_apg;
pub mod rng;
pub mod simulate;
pub mod tuning;

pub use error::{Error, Result};
pub use evaluate::{in_sample_r2, out_of_sample_r2, FitScores, OosConfig, R2Scores, RollingTuning};
pub use extract::{extract_factors, FactorEstimate, LowRankFit, RankRule};
pub use panel_io::{build_design, load_panel, load_estimate, save_estimate, DesignSpec, EstimateArchive, RawTable, Schema};
pub use problems::{DecisionMatrix, FamilyKind, ModelFamily, Panel, Problem};
pub use prox_apg::{default_lambda, solve, SolverConfig, SolverReport};
pub use simulate::{Dgp, DgpSpec, SimReport, Tuning};
pub use tuning::{cross_validate, CvPlan, CvResult};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
