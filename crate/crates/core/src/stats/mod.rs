//! Population-statistics estimators.

mod aggregate;
mod ema;
mod oracle;
mod precise;

pub use aggregate::{aggregate_moment_matching, aggregate_naive, Aggregator, BatchMomentLog};
pub use ema::{ema_update, EmaInit, EmaState};
pub use oracle::{
    analytic_naive_variance, estimator_trials, var_of_var_oracle, EstimateSummary, EstimatorTrials, ScalarLaw,
    VarVarOracleReport,
};
pub use precise::{install_domain_population, install_population, precise_bn, precise_bn_layerwise, Population};
