//! Closed-form quantities of the trapping model: extinction probability,
//! regime classification, the trapping exponent, escape/return formulas,
//! the limiting deep-trap-count pmf, and the various constants that the
//! simulations are checked against.

use crate::distributions::{DistributionError, OffspringLaw};
use crate::trees::{Tree, TreeError};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("fixed-point iteration failed to converge")]
    NonConvergence,
    #[error("law is not subcritical (mean {0})")]
    NotSubcritical(f64),
    #[error("parameters outside the formula's scope: {0}")]
    OutOfScope(String),
    #[error(transparent)]
    Law(#[from] DistributionError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    Recurrent,
    Ballistic,
    Ivfe,
    Fvie,
    Ivie,
    SupBallistic,
    SupSubballistic,
    Boundary,
    CriticalUnsupported,
}

/// An offspring law plus a bias, with every derived quantity the
/// experiments need: extinction probability `q`, the trap-law mean
/// (`mu` below criticality, `f'(q)` above), the trapping exponent
/// `gamma`, and the regime tag.
#[derive(Debug, Clone)]
pub struct RegimeParams {
    pub law: Arc<OffspringLaw>,
    pub beta: f64,
    pub q: f64,
    pub fprime_q: f64,
    pub gamma: Option<f64>,
    pub regime: Regime,
}

impl RegimeParams {
    pub fn new(law: Arc<OffspringLaw>, beta: f64) -> Result<Self, AnalyticsError> {
        if beta <= 0.0 {
            return Err(AnalyticsError::OutOfScope(format!(
                "bias must be positive, got {beta}"
            )));
        }
        let q = extinction_probability(&law)?;
        let fprime_q = law.gf_derivative(q);
        let regime = phase_classify(&law, beta, fprime_q);
        let mu = law.mean();
        let gamma = if mu != 1.0 && beta > 1.0 {
            let trap_mean = if mu < 1.0 { mu } else { fprime_q };
            Some((1.0 / trap_mean).ln() / beta.ln())
        } else {
            None
        };
        Ok(Self {
            law,
            beta,
            q,
            fprime_q,
            gamma,
            regime,
        })
    }
}

/// Smallest fixed point of the generating function on [0,1]: 1 for
/// mean <= 1, otherwise bisection bracketing followed by Newton polish to
/// |f(q) - q| <= 1e-12.
pub fn extinction_probability(law: &OffspringLaw) -> Result<f64, AnalyticsError> {
    if law.mean() <= 1.0 {
        return Ok(1.0);
    }
    // g(s) = f(s) - s: g(0) = p_0 >= 0, g'(1) = mean - 1 > 0 so g < 0
    // just below 1
    let g = |s: f64| law.generating_function(s) - s;
    let (mut lo, mut hi) = (0.0f64, 1.0 - 1e-9);
    if g(hi) >= 0.0 {
        // q indistinguishable from 1 at this resolution
        return Err(AnalyticsError::NonConvergence);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut q = 0.5 * (lo + hi);
    for _ in 0..50 {
        let step = g(q) / (law.gf_derivative(q) - 1.0);
        q -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    if g(q).abs() > 1e-12 || !(0.0..1.0).contains(&q) {
        return Err(AnalyticsError::NonConvergence);
    }
    Ok(q)
}

/// Regime tag per the phase diagram. Finite variance versus a heavy tail
/// is read off the law itself; both critical lines (`beta mu = 1` below
/// criticality, `beta f'(q) = 1` above) land on BOUNDARY.
pub fn phase_classify(law: &OffspringLaw, beta: f64, fprime_q: f64) -> Regime {
    let mu = law.mean();
    if mu == 1.0 {
        return Regime::CriticalUnsupported;
    }
    let finite_var = law.variance().is_some();
    if mu < 1.0 {
        if beta <= 1.0 {
            return Regime::Recurrent;
        }
        if (beta * mu - 1.0).abs() < 1e-9 {
            return Regime::Boundary;
        }
        return match (beta * mu < 1.0, finite_var) {
            (true, true) => Regime::Ballistic,
            (true, false) => Regime::Ivfe,
            (false, true) => Regime::Fvie,
            (false, false) => Regime::Ivie,
        };
    }
    if beta <= 1.0 / mu {
        return Regime::Recurrent;
    }
    if (beta * fprime_q - 1.0).abs() < 1e-9 {
        return Regime::Boundary;
    }
    if beta * fprime_q < 1.0 {
        Regime::SupBallistic
    } else {
        Regime::SupSubballistic
    }
}

/// `gamma = log(1/mu)/log(beta)` below criticality and
/// `log(1/f'(q))/log(beta)` above; the walk is sub-ballistic when
/// `gamma < 1`.
pub fn gamma_exponent(params: &RegimeParams) -> Result<f64, AnalyticsError> {
    params.gamma.ok_or_else(|| {
        AnalyticsError::OutOfScope(format!(
            "gamma needs mean != 1 and bias > 1 (mean {}, beta {})",
            params.law.mean(),
            params.beta
        ))
    })
}

/// Expected first return time on a finite fully-expanded tree.
///
/// `from_root`: start at the tree's root with a uniform first step,
/// giving `2 sum_n Z_n beta^{n-1} / Z_1`. Otherwise the tree is read as a
/// trap hanging below an (absent) backbone vertex and the value is the
/// expected time to first reach that vertex from the trap's root:
/// `2 sum_n Z_n beta^n - 1` with `Z_0 = 1`.
pub fn expected_return_time(
    tree: &Tree,
    beta: f64,
    from_root: bool,
) -> Result<f64, AnalyticsError> {
    let sizes = tree.subtree_generation_sizes(tree.root())?;
    if from_root {
        if sizes.len() < 2 || sizes[1] == 0 {
            return Err(AnalyticsError::OutOfScope(
                "return to the root needs at least one child".into(),
            ));
        }
        let total: f64 = sizes
            .iter()
            .enumerate()
            .skip(1)
            .map(|(n, &z)| z as f64 * beta.powi(n as i32 - 1))
            .sum();
        Ok(2.0 * total / sizes[1] as f64)
    } else {
        let total: f64 = sizes
            .iter()
            .enumerate()
            .map(|(n, &z)| z as f64 * beta.powi(n as i32))
            .sum();
        Ok(2.0 * total - 1.0)
    }
}

/// For a trap of height `H` entered at its top vertex: `p1` is the chance
/// of reaching the deepest point before stepping back onto the backbone,
/// `p2` the chance, from the deepest point, of reaching the backbone
/// without returning to the bottom.
pub fn deepest_point_probabilities(h: u32, beta: f64) -> (f64, f64) {
    assert!(h >= 1 && beta > 1.0);
    let p1 = (1.0 - 1.0 / beta) / (1.0 - beta.powi(-(h as i32 + 1)));
    let p2 = (1.0 - 1.0 / beta) / (beta.powi(h as i32) - 1.0 / beta);
    (p1, p2)
}

#[derive(Debug, Clone, Copy)]
pub struct TrapTimeConstants {
    /// Mean excursion duration into a single subcritical trap.
    pub e_t11: f64,
    /// Rate of the exponential limit of normalized trap occupation time.
    pub theta: f64,
}

pub fn trap_time_constants(beta: f64, mu: f64) -> Result<TrapTimeConstants, AnalyticsError> {
    if beta * mu >= 1.0 {
        return Err(AnalyticsError::OutOfScope(format!(
            "trap time constants need beta*mu < 1, got {}",
            beta * mu
        )));
    }
    Ok(TrapTimeConstants {
        e_t11: 2.0 / (1.0 - beta * mu),
        theta: (beta - 1.0) * (1.0 - beta * mu) / (2.0 * beta),
    })
}

/// Scale constant of the stable subordinator limit of the hitting-time
/// clock in the heavy-tailed sub-criticality regime.
pub fn subordinator_constant(alpha: f64, beta: f64, mu: f64) -> f64 {
    let a = alpha - 1.0;
    (std::f64::consts::PI * a / (std::f64::consts::PI * a).sin())
        * (beta * (1.0 - beta * mu) / (2.0 * (beta - 1.0))).powf(a)
}

/// Limiting pmf of the number of deepest branches in a large trapping
/// landscape: `P(N = l) = (1/l!) prod_{j=1..l} |alpha - j|` for `l >= 1`.
pub fn deep_trap_count_pmf(alpha: f64, l: u64) -> f64 {
    assert!((1.0..2.0).contains(&alpha) && l >= 1);
    let mut p = 1.0;
    for j in 1..=l {
        p *= (alpha - j as f64).abs() / j as f64;
    }
    p
}

#[derive(Debug, Clone)]
pub struct HeightCdf {
    /// `s[n] = P(height < n)`; `s[0] = 0`.
    pub s: Vec<f64>,
    /// Stabilized `(1 - s_n)/mu^n` at `n_max`; `None` for a degenerate
    /// law with mean 0, where the tree height is identically 0.
    pub c_mu: Option<f64>,
    /// `|c(n_max) - c(n_max/2)|`, a convergence report for `c_mu`.
    pub cauchy_gap: f64,
}

/// Height-CDF iterates `s_{n+1} = f(s_n)` of a subcritical law, tracked in
/// survival form `1 - s_n` so the geometric decay never underflows, plus
/// the tail constant `c_mu = lim (1 - s_n)/mu^n`.
pub fn height_cdf_and_cmu(law: &OffspringLaw, n_max: u32) -> Result<HeightCdf, AnalyticsError> {
    let mu = law.mean();
    if mu >= 1.0 {
        return Err(AnalyticsError::NotSubcritical(mu));
    }
    let mut eps = vec![1.0f64];
    for _ in 0..n_max {
        eps.push(law.one_minus_f(*eps.last().unwrap()));
    }
    let s: Vec<f64> = eps.iter().map(|e| 1.0 - e).collect();
    if mu == 0.0 {
        return Ok(HeightCdf {
            s,
            c_mu: None,
            cauchy_gap: 0.0,
        });
    }
    let c = |n: u32| eps[n as usize] / mu.powi(n as i32);
    Ok(HeightCdf {
        s,
        c_mu: Some(c(n_max)),
        cauchy_gap: (c(n_max) - c(n_max / 2)).abs(),
    })
}

/// `C* = q (mu - f'(q)) c_mu / (1 - q)` with `c_mu` taken from the law
/// conditioned on extinction: the constant in the geometric tail
/// `P(branch height > n) ~ C* f'(q)^n` of supercritical trap branches.
pub fn supercritical_branch_tail_constant(law: &OffspringLaw) -> Result<f64, AnalyticsError> {
    let mu = law.mean();
    if mu <= 1.0 {
        return Err(AnalyticsError::OutOfScope(format!(
            "supercritical tail constant needs mean > 1, got {mu}"
        )));
    }
    let q = extinction_probability(law)?;
    let fprime_q = law.gf_derivative(q);
    let trap_law = law.conditioned_on_extinction(q)?;
    let c_mu = height_cdf_and_cmu(&trap_law, 120)?
        .c_mu
        .ok_or_else(|| AnalyticsError::OutOfScope("degenerate trap law".into()))?;
    Ok(q * (mu - fprime_q) * c_mu / (1.0 - q))
}
