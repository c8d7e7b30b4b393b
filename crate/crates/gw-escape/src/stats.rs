//! Estimators applied to simulation output: tail indices, log-log slopes,
//! empirical Laplace transforms, and goodness-of-fit. All estimators are
//! deterministic functions of the sample multiset; censored values are
//! lower bounds from budget exhaustion and are excluded from mean-based
//! quantities but kept (as bounds) in tail counts.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("too few uncensored samples ({0})")]
    InsufficientData(usize),
    #[error("log-log slope needs at least 4 levels, got {0}")]
    InsufficientLevels(usize),
    #[error("censored fraction {0} too high for a mean-based estimator")]
    CensoringTooHigh(f64),
    #[error("fewer than two usable bins after merging")]
    DegenerateBins,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    pub regime: Option<String>,
    pub level: Option<u64>,
    pub replicas: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub values: Vec<f64>,
    pub censored: Vec<bool>,
    pub meta: SampleMeta,
}

impl SampleSet {
    pub fn exact(values: Vec<f64>) -> Self {
        let censored = vec![false; values.len()];
        Self {
            values,
            censored,
            meta: SampleMeta::default(),
        }
    }

    pub fn with_censoring(values: Vec<f64>, censored: Vec<bool>) -> Self {
        assert_eq!(values.len(), censored.len());
        Self {
            values,
            censored,
            meta: SampleMeta::default(),
        }
    }

    pub fn censored_fraction(&self) -> f64 {
        if self.censored.is_empty() {
            return 0.0;
        }
        self.censored.iter().filter(|&&c| c).count() as f64 / self.censored.len() as f64
    }

    pub fn uncensored(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.censored)
            .filter(|&(_, &c)| !c)
            .map(|(&v, _)| v)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HillEstimate {
    pub index: f64,
    pub se: f64,
    pub k: usize,
    /// Set when the estimate drifts monotonically and materially across
    /// k/2, k, 2k — the signature of a light tail with no Hill plateau.
    pub monotone_drift: bool,
}

/// Tail-index estimate from the top-k order statistics. Censored values
/// enter the log spacings as the lower bounds they are, but only
/// uncensored exceedances count in the numerator, which is the maximum-
/// likelihood treatment of type-I censoring in a Pareto tail.
pub fn hill_tail_index(samples: &SampleSet, k: Option<usize>) -> Result<HillEstimate, StatsError> {
    let n_uncensored = samples.uncensored().count();
    if n_uncensored < 100 {
        return Err(StatsError::InsufficientData(n_uncensored));
    }
    let n = samples.values.len();
    let k = k.unwrap_or_else(|| (n as f64).sqrt() as usize);
    if k < 5 || k >= n / 2 {
        return Err(StatsError::InsufficientData(k));
    }
    let at = |kk: usize| hill_at(&samples.values, &samples.censored, kk);
    let (index, se) = at(k)?;
    let lo = at(k / 2).map(|e| e.0);
    let hi = at(2 * k).map(|e| e.0);
    let monotone_drift = match (lo, hi) {
        (Ok(lo), Ok(hi)) => {
            let monotone = (lo < index && index < hi) || (lo > index && index > hi);
            monotone && lo.max(hi) / lo.min(hi) > 1.1
        }
        _ => false,
    };
    Ok(HillEstimate {
        index,
        se,
        k,
        monotone_drift,
    })
}

fn hill_at(values: &[f64], censored: &[bool], k: usize) -> Result<(f64, f64), StatsError> {
    if k + 1 > values.len() {
        return Err(StatsError::InsufficientData(values.len()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.select_nth_unstable_by(k, |&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    // summing in value order makes the result independent of input order
    order[..k].sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let threshold = values[order[k]];
    if threshold <= 0.0 {
        return Err(StatsError::InsufficientData(k));
    }
    let mut log_sum = 0.0;
    let mut uncensored_exceedances = 0usize;
    for &i in &order[..k] {
        log_sum += (values[i] / threshold).ln();
        uncensored_exceedances += !censored[i] as usize;
    }
    if uncensored_exceedances == 0 || log_sum <= 0.0 {
        return Err(StatsError::InsufficientData(0));
    }
    let index = uncensored_exceedances as f64 / log_sum;
    Ok((index, index / (uncensored_exceedances as f64).sqrt()))
}

#[derive(Debug, Clone, Copy)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub se: f64,
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - xm) * (y - ym)).sum();
    let den: f64 = xs.iter().map(|&x| (x - xm).powi(2)).sum();
    num / den
}

/// Least-squares slope of log(median value) against log n, with a
/// leave-one-replica-out jackknife SE. `per_level[i]` holds the replica
/// values at `levels[i]`; medians keep the estimate finite even where the
/// underlying hitting times have no mean.
pub fn loglog_slope(levels: &[u64], per_level: &[Vec<f64>]) -> Result<SlopeEstimate, StatsError> {
    if levels.len() < 4 {
        return Err(StatsError::InsufficientLevels(levels.len()));
    }
    assert_eq!(levels.len(), per_level.len());
    let replicas = per_level.iter().map(|v| v.len()).min().unwrap_or(0);
    if replicas == 0 {
        return Err(StatsError::InsufficientData(0));
    }
    let xs: Vec<f64> = levels.iter().map(|&n| (n as f64).ln()).collect();
    let slope_of = |skip: Option<usize>| -> f64 {
        let ys: Vec<f64> = per_level
            .iter()
            .map(|vals| {
                let mut kept: Vec<f64> = vals
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| Some(j) != skip)
                    .map(|(_, &v)| v)
                    .collect();
                median(&mut kept).ln()
            })
            .collect();
        ls_slope(&xs, &ys)
    };
    let slope = slope_of(None);
    if replicas < 2 {
        return Ok(SlopeEstimate { slope, se: 0.0 });
    }
    let jack: Vec<f64> = (0..replicas).map(|j| slope_of(Some(j))).collect();
    let jm = jack.iter().sum::<f64>() / replicas as f64;
    let var = (replicas - 1) as f64 / replicas as f64
        * jack.iter().map(|&s| (s - jm).powi(2)).sum::<f64>();
    Ok(SlopeEstimate {
        slope,
        se: var.sqrt(),
    })
}

/// Mean of exp(-s * value) over the samples; censoring beyond 1% makes
/// the transform unreliable and is rejected.
pub fn empirical_laplace(samples: &SampleSet, s: f64) -> Result<f64, StatsError> {
    let cf = samples.censored_fraction();
    if cf > 0.01 {
        return Err(StatsError::CensoringTooHigh(cf));
    }
    let vals: Vec<f64> = samples.uncensored().collect();
    if vals.is_empty() {
        return Err(StatsError::InsufficientData(0));
    }
    Ok(vals.iter().map(|&v| (-s * v).exp()).sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square against an expected pmf over the same bins.
/// Trailing bins are merged (rightmost first) until every expected count
/// is at least 5.
pub fn chi_square_gof(observed: &[u64], expected_pmf: &[f64]) -> Result<ChiSquareResult, StatsError> {
    assert_eq!(observed.len(), expected_pmf.len());
    let n: u64 = observed.iter().sum();
    let mut obs: Vec<f64> = observed.iter().map(|&c| c as f64).collect();
    let mut exp: Vec<f64> = expected_pmf.iter().map(|&p| p * n as f64).collect();
    while exp.len() > 1 && *exp.last().unwrap() < 5.0 {
        let (o, e) = (obs.pop().unwrap(), exp.pop().unwrap());
        *obs.last_mut().unwrap() += o;
        *exp.last_mut().unwrap() += e;
    }
    if exp.len() < 2 || exp.iter().any(|&e| e < 5.0) {
        return Err(StatsError::DegenerateBins);
    }
    let statistic: f64 = obs
        .iter()
        .zip(&exp)
        .map(|(&o, &e)| (o - e).powi(2) / e)
        .sum();
    let dof = exp.len() - 1;
    let dist = ChiSquared::new(dof as f64).unwrap();
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}
