//! Monte Carlo checks on the two variance aggregators.
//!
//! Draws `N = k * B` i.i.d. scalars per trial, groups them into `k` batches
//! of `B`, and records what each aggregator reports. The analytic variance
//! of the naive estimator is `sigma^4 / N * (kappa - 1 + 2 / (B - 1))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::aggregate::{aggregate_moment_matching, aggregate_naive, BatchMomentLog};
use crate::error::{BnError, Result};
use crate::tensor::{channel_moments, Shape4, Tensor4};

/// Zero-mean scalar law with a prescribed standard deviation and kurtosis.
///
/// Kurtosis 3 uses a Gaussian. Anything else uses the symmetric three-point
/// law `P(0) = 1 - 1/kappa`, `P(+a) = P(-a) = 1/(2 kappa)` with
/// `a = sigma * sqrt(kappa)`, whose variance is `sigma^2` and whose fourth
/// moment is `kappa * sigma^4`. Requires `kappa >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarLaw {
    Gaussian { sigma: f64 },
    ThreePoint { sigma: f64, kurtosis: f64 },
}

impl ScalarLaw {
    pub fn new(sigma: f64, kurtosis: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(BnError::InvalidParams(format!("sigma must be positive, got {sigma}")));
        }
        if !(kurtosis >= 1.0) || !kurtosis.is_finite() {
            return Err(BnError::InvalidParams(format!("kurtosis must be >= 1, got {kurtosis}")));
        }
        if kurtosis == 3.0 {
            Ok(ScalarLaw::Gaussian { sigma })
        } else {
            Ok(ScalarLaw::ThreePoint { sigma, kurtosis })
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScalarLaw::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            ScalarLaw::ThreePoint { sigma, kurtosis } => {
                let u: f64 = rng.random();
                let p = 1.0 / kurtosis;
                if u >= p {
                    0.0
                } else {
                    let a = sigma * kurtosis.sqrt();
                    if u < p / 2.0 {
                        a
                    } else {
                        -a
                    }
                }
            }
        }
    }
}

/// `Var[sigma_hat^2]` of the naive estimator.
pub fn analytic_naive_variance(sigma: f64, kurtosis: f64, n: usize, b: usize) -> f64 {
    sigma.powi(4) / n as f64 * (kurtosis - 1.0 + 2.0 / (b as f64 - 1.0))
}

/// Sample mean and unbiased sample variance of a set of estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateSummary {
    pub mean: f64,
    pub var: f64,
}

impl EstimateSummary {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        EstimateSummary { mean, var }
    }

    /// Standard error of the mean.
    pub fn std_err(&self, trials: usize) -> f64 {
        (self.var / trials as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorTrials {
    pub naive: EstimateSummary,
    /// Moment matching with the `N/(N-1)` correction.
    pub moment_matching: EstimateSummary,
    pub trials: usize,
}

fn check_layout(n: usize, b: usize, trials: usize, min_trials: usize) -> Result<usize> {
    if b < 2 {
        return Err(BnError::InvalidParams(format!("batch size {b} < 2")));
    }
    if n == 0 || !n.is_multiple_of(b) {
        return Err(BnError::InvalidParams(format!("N = {n} is not a positive multiple of B = {b}")));
    }
    if trials < min_trials {
        return Err(BnError::InvalidParams(format!("need at least {min_trials} trials, got {trials}")));
    }
    Ok(n / b)
}

/// Runs both aggregators on `trials` independent populations of `n` scalars
/// split into batches of `b`.
pub fn estimator_trials(law: ScalarLaw, n: usize, b: usize, trials: usize, seed: u64) -> Result<EstimatorTrials> {
    let k = check_layout(n, b, trials, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut naive = Vec::with_capacity(trials);
    let mut matched = Vec::with_capacity(trials);
    let mut buf = Vec::with_capacity(b);
    for _ in 0..trials {
        let mut log = BatchMomentLog::new();
        for _ in 0..k {
            buf.clear();
            buf.extend((0..b).map(|_| law.draw(&mut rng)));
            let batch = Tensor4::new(Shape4::flat(b, 1), buf.clone())?;
            log.push(channel_moments(&batch)?)?;
        }
        naive.push(aggregate_naive(&log)?.var[0]);
        matched.push(aggregate_moment_matching(&log, true)?.var[0]);
    }
    Ok(EstimatorTrials {
        naive: EstimateSummary::of(&naive),
        moment_matching: EstimateSummary::of(&matched),
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarVarOracleReport {
    pub analytic_var: f64,
    pub empirical_var: f64,
    pub sigma: f64,
    pub kurtosis: f64,
    pub trials: usize,
}

impl VarVarOracleReport {
    pub fn relative_error(&self) -> f64 {
        (self.empirical_var - self.analytic_var).abs() / self.analytic_var
    }
}

/// Compares the analytic variance of the naive estimator against Monte Carlo.
pub fn var_of_var_oracle(
    sigma: f64,
    kurtosis: f64,
    n: usize,
    b: usize,
    trials: usize,
    seed: u64,
) -> Result<VarVarOracleReport> {
    let law = ScalarLaw::new(sigma, kurtosis)?;
    check_layout(n, b, trials, 1000)?;
    let runs = estimator_trials(law, n, b, trials, seed)?;
    Ok(VarVarOracleReport {
        analytic_var: analytic_naive_variance(sigma, kurtosis, n, b),
        empirical_var: runs.naive.var,
        sigma,
        kurtosis,
        trials,
    })
}
