//! Offspring-law families, the size-biased transform and scaling sequences.
//!
//! Three families are supported: finite pmfs, geometric laws
//! `p_k = (1-a) a^k`, and pure power tails `p_k = C k^{-(alpha+1)}` with an
//! atom at zero, `C = (1-p0)/zeta(alpha+1)`. The power-tail family fixes the
//! slowly varying factor to a constant, which makes the scaling sequence
//! `a_n` computable in closed form.

mod seed;
mod zeta;

pub use seed::{child_seed, splitmix64, u64_to_unit, NodeRng, SeedStream};
pub use zeta::{zeta, zeta_tail, zeta_tail_damped};

use rand::RngCore;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("invalid law parameter: {0}")]
    InvalidParameter(String),
    #[error("scaling sequence undefined for finite-variance offspring laws")]
    ScalingUndefined,
    #[error("target mean {0} unreachable for PowerTail(alpha={1})")]
    MeanUnreachable(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LawVariant {
    FinitePmf { pmf: Vec<f64> },
    Geometric { a: f64 },
    PowerTail { alpha: f64, p0: f64, coeff: f64 },
}

/// An offspring distribution with cached moments and a CDF table for
/// single-uniform inverse-transform sampling.
#[derive(Debug, Clone)]
pub struct OffspringLaw {
    variant: LawVariant,
    mean: f64,
    variance: Option<f64>,
    tail_index: f64,
    cdf: Vec<f64>,
    table_cutoff: u64,
}

/// Tail-mass threshold below which the CDF table stops and sampling falls
/// back to analytic inversion (PowerTail) or clamping (light tails).
const TABLE_TAIL_EPS: f64 = 1e-8;
const TABLE_CAP: u64 = 10_000_000;

impl OffspringLaw {
    pub fn finite_pmf(pmf: Vec<f64>) -> Result<Self, DistributionError> {
        if pmf.is_empty() {
            return Err(DistributionError::InvalidParameter("empty pmf".into()));
        }
        if pmf.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(DistributionError::InvalidParameter(
                "pmf entries must lie in [0,1]".into(),
            ));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DistributionError::InvalidParameter(format!(
                "pmf sums to {total}, not 1"
            )));
        }
        let pmf: Vec<f64> = pmf.iter().map(|p| p / total).collect();
        let mean: f64 = pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let m2: f64 = pmf
            .iter()
            .enumerate()
            .map(|(k, p)| (k as f64).powi(2) * p)
            .sum();
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for p in &pmf {
            acc += p;
            cdf.push(acc);
        }
        let cutoff = pmf.len() as u64 - 1;
        Ok(Self {
            variant: LawVariant::FinitePmf { pmf },
            mean,
            variance: Some(m2 - mean * mean),
            tail_index: 2.0,
            cdf,
            table_cutoff: cutoff,
        })
    }

    /// `p_k = (1-a) a^k` for `k >= 0`, mean `a/(1-a)`.
    pub fn geometric(a: f64) -> Result<Self, DistributionError> {
        if !(0.0..1.0).contains(&a) || a <= 0.0 {
            return Err(DistributionError::InvalidParameter(format!(
                "geometric parameter a={a} must lie in (0,1)"
            )));
        }
        let mean = a / (1.0 - a);
        let variance = a / (1.0 - a).powi(2);
        // table to tail mass 1e-16: P(xi > k) = a^{k+1}
        let cutoff = ((-16.0 * std::f64::consts::LN_10) / a.ln()).ceil() as u64 + 1;
        let mut cdf = Vec::with_capacity(cutoff as usize + 1);
        for k in 0..=cutoff {
            cdf.push(1.0 - a.powi(k as i32 + 1));
        }
        Ok(Self {
            variant: LawVariant::Geometric { a },
            mean,
            variance: Some(variance),
            tail_index: 2.0,
            cdf,
            table_cutoff: cutoff,
        })
    }

    /// `p_0 = p0`, `p_k = C k^{-(alpha+1)}` for `k >= 1` with
    /// `C = (1-p0)/zeta(alpha+1)`; `alpha` strictly inside `(1,2)`.
    pub fn power_tail(alpha: f64, p0: f64) -> Result<Self, DistributionError> {
        if !(1.0 < alpha && alpha < 2.0) {
            return Err(DistributionError::InvalidParameter(format!(
                "power tail index alpha={alpha} must lie strictly in (1,2)"
            )));
        }
        if !(0.0..1.0).contains(&p0) {
            return Err(DistributionError::InvalidParameter(format!(
                "power tail atom p0={p0} must lie in [0,1)"
            )));
        }
        let coeff = (1.0 - p0) / zeta(alpha + 1.0);
        let mean = coeff * zeta(alpha);
        // table until the analytic tail mass C zeta_tail(alpha+1, k) drops
        // below TABLE_TAIL_EPS; tail mass ~ C k^-alpha / alpha
        let mut cdf = Vec::new();
        let mut acc = p0;
        let mut comp = 0.0f64; // Kahan compensation
        cdf.push(acc);
        let mut k = 1u64;
        let cutoff = loop {
            let p = coeff * (k as f64).powf(-(alpha + 1.0));
            let y = p - comp;
            let t = acc + y;
            comp = (t - acc) - y;
            acc = t;
            cdf.push(acc);
            if 1.0 - acc < TABLE_TAIL_EPS || k >= TABLE_CAP {
                break k;
            }
            k += 1;
        };
        Ok(Self {
            variant: LawVariant::PowerTail { alpha, p0, coeff },
            mean,
            variance: None,
            tail_index: alpha,
            cdf,
            table_cutoff: cutoff,
        })
    }

    /// Solve for the zero atom giving the requested mean, by bisection on
    /// `p0 -> mean` to 1e-12.
    pub fn power_tail_with_mean(alpha: f64, mu: f64) -> Result<Self, DistributionError> {
        let mu_max = zeta(alpha) / zeta(alpha + 1.0);
        if mu <= 0.0 || mu >= mu_max {
            return Err(DistributionError::MeanUnreachable(mu, alpha));
        }
        let mean_of = |p0: f64| (1.0 - p0) * zeta(alpha) / zeta(alpha + 1.0);
        let (mut lo, mut hi) = (0.0f64, 1.0f64); // mean decreasing in p0
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_of(mid) > mu {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let p0 = 0.5 * (lo + hi);
        debug_assert!((mean_of(p0) - mu).abs() < 1e-12);
        Self::power_tail(alpha, p0)
    }

    pub fn variant(&self) -> &LawVariant {
        &self.variant
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `None` means infinite variance.
    pub fn variance(&self) -> Option<f64> {
        self.variance
    }

    /// Stability index `alpha`; reported as 2 for finite-variance laws.
    pub fn tail_index(&self) -> f64 {
        self.tail_index
    }

    /// Largest `k` with `p_k > 0` when the support is finite.
    pub fn support_upper(&self) -> Option<u64> {
        match &self.variant {
            LawVariant::FinitePmf { pmf } => Some(pmf.len() as u64 - 1),
            _ => None,
        }
    }

    pub fn pmf(&self, k: u64) -> f64 {
        match &self.variant {
            LawVariant::FinitePmf { pmf } => pmf.get(k as usize).copied().unwrap_or(0.0),
            LawVariant::Geometric { a } => (1.0 - a) * a.powf(k as f64),
            LawVariant::PowerTail { alpha, p0, coeff } => {
                if k == 0 {
                    *p0
                } else {
                    coeff * (k as f64).powf(-(alpha + 1.0))
                }
            }
        }
    }

    /// `P(xi > k)`, analytic for the power tail beyond the table.
    pub fn tail_mass(&self, k: u64) -> f64 {
        match &self.variant {
            LawVariant::FinitePmf { pmf } => {
                pmf.iter().skip(k as usize + 1).sum::<f64>()
            }
            LawVariant::Geometric { a } => a.powf(k as f64 + 1.0),
            LawVariant::PowerTail { alpha, coeff, .. } => coeff * zeta_tail(alpha + 1.0, k),
        }
    }

    /// `f(s) = E[s^xi]` to absolute error <= 1e-12 on `[0,1]`.
    pub fn generating_function(&self, s: f64) -> f64 {
        1.0 - self.one_minus_f(1.0 - s)
    }

    /// `1 - f(1-eps)` evaluated in a form stable for tiny `eps`.
    pub fn one_minus_f(&self, eps: f64) -> f64 {
        if eps <= 0.0 {
            return 0.0;
        }
        match &self.variant {
            LawVariant::FinitePmf { pmf } => {
                let lns = (-eps).ln_1p();
                pmf.iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, p)| p * (-(k as f64 * lns).exp_m1()))
                    .sum()
            }
            LawVariant::Geometric { a } => a * eps / (1.0 - a + a * eps),
            LawVariant::PowerTail { alpha, coeff, .. } => {
                let lambda = -(-eps).ln_1p();
                let head_stop = 1_000_000u64.min((45.0 / lambda).ceil() as u64);
                let mut head = 0.0;
                for k in 1..=head_stop {
                    let kf = k as f64;
                    head += kf.powf(-(alpha + 1.0)) * (-(-kf * lambda).exp_m1());
                }
                let tail = zeta_tail(alpha + 1.0, head_stop)
                    - zeta_tail_damped(alpha + 1.0, head_stop, lambda);
                coeff * (head + tail)
            }
        }
    }

    /// `f'(s)`, analytic per variant.
    pub fn gf_derivative(&self, s: f64) -> f64 {
        self.mean - self.mean_minus_fprime(1.0 - s)
    }

    /// `mu - f'(1-eps)`, stable for tiny `eps`.
    pub fn mean_minus_fprime(&self, eps: f64) -> f64 {
        if eps <= 0.0 {
            return 0.0;
        }
        let s = 1.0 - eps;
        match &self.variant {
            LawVariant::FinitePmf { pmf } => {
                let lns = (-eps).ln_1p();
                pmf.iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, p)| k as f64 * p * (-((k as f64 - 1.0) * lns).exp_m1()))
                    .sum()
            }
            LawVariant::Geometric { a } => {
                // mu - f'(s) = a^2 (1-a) eps (2 - a - a s) / ((1-a)^2 (1-a s)^2)
                a * a * (1.0 - a) * eps * (2.0 - a - a * s)
                    / ((1.0 - a).powi(2) * (1.0 - a * s).powi(2))
            }
            LawVariant::PowerTail { alpha, coeff, .. } => {
                let lambda = -(-eps).ln_1p();
                let head_stop = 1_000_000u64.min((45.0 / lambda).ceil() as u64);
                let mut head = 0.0;
                for k in 1..=head_stop {
                    let kf = k as f64;
                    head += kf.powf(-alpha) * (-(-(kf - 1.0) * lambda).exp_m1());
                }
                // sum_{k>K} k^-alpha (1 - e^{-(k-1) lambda})
                let tail = zeta_tail(*alpha, head_stop)
                    - lambda.exp() * zeta_tail_damped(*alpha, head_stop, lambda);
                coeff * (head + tail)
            }
        }
    }

    /// `l`-th derivative `f^(l)(s)` for `s` in `[0,1)`; direct summation
    /// with the geometric damping of `s^k` truncating the series.
    pub fn gf_derivative_l(&self, l: u32, s: f64) -> f64 {
        assert!((0.0..1.0).contains(&s), "gf_derivative_l needs s in [0,1)");
        if l == 0 {
            return self.generating_function(s);
        }
        let falling = |k: f64| -> f64 {
            let mut prod = 1.0;
            for j in 0..l {
                prod *= k - j as f64;
            }
            prod
        };
        match &self.variant {
            LawVariant::FinitePmf { pmf } => pmf
                .iter()
                .enumerate()
                .skip(l as usize)
                .map(|(k, p)| p * falling(k as f64) * s.powi(k as i32 - l as i32))
                .sum(),
            LawVariant::Geometric { a } => {
                // f(s) = (1-a)/(1-as): f^(l)(s) = (1-a) l! a^l / (1-as)^{l+1}
                let mut fact = 1.0;
                for j in 1..=l {
                    fact *= j as f64;
                }
                (1.0 - a) * fact * a.powi(l as i32) / (1.0 - a * s).powi(l as i32 + 1)
            }
            LawVariant::PowerTail { alpha, coeff, .. } => {
                let lambda = -s.ln();
                let stop = ((60.0 + 3.0 * l as f64 * (1.0 / lambda).max(1.0).ln()) / lambda)
                    .ceil()
                    .min(2e8) as u64;
                let mut acc = 0.0;
                for k in (l as u64).max(1)..=stop {
                    let kf = k as f64;
                    acc += kf.powf(-(alpha + 1.0))
                        * falling(kf)
                        * (-(kf - l as f64) * lambda).exp();
                }
                coeff * acc
            }
        }
    }

    /// The law conditioned on extinction: `h_k = p_k q^{k-1}` where `q` is
    /// the extinction probability, i.e. the p.g.f. becomes `f(qs)/q`. The
    /// geometric damping makes the support effectively finite, so the result
    /// is materialized as a finite pmf (tail mass below 1e-14 truncated).
    pub fn conditioned_on_extinction(&self, q: f64) -> Result<Self, DistributionError> {
        if !(0.0 < q && q < 1.0) {
            return Err(DistributionError::InvalidParameter(format!(
                "extinction probability q={q} must lie in (0,1)"
            )));
        }
        let mut pmf = Vec::new();
        let mut acc = 0.0;
        let mut k = 0u64;
        while acc < 1.0 - 1e-14 && k < 2_000_000 {
            let h = self.pmf(k) * q.powi(k as i32 - 1);
            pmf.push(h);
            acc += h;
            k += 1;
            // q^{k-1} alone bounds the remaining mass
            if q.powi(k as i32 - 1) / (1.0 - q) < 1e-14 {
                break;
            }
        }
        Self::finite_pmf(pmf)
    }

    /// Draw one sample using a single uniform via CDF inversion; power-tail
    /// mass beyond the table is inverted analytically.
    pub fn sample(&self, rng: &mut impl RngCore) -> u64 {
        let u = u64_to_unit(rng.next_u64());
        self.quantile(u)
    }

    fn quantile(&self, u: f64) -> u64 {
        let last = *self.cdf.last().unwrap();
        if u < last {
            return self.cdf.partition_point(|&c| c <= u) as u64;
        }
        match &self.variant {
            LawVariant::PowerTail { alpha, coeff, .. } => {
                // smallest k with P(xi > k) <= 1-u, analytic tail
                let target = (1.0 - u).max(f64::MIN_POSITIVE);
                let (mut lo, mut hi) = (self.table_cutoff, self.table_cutoff.max(1) * 2);
                while coeff * zeta_tail(alpha + 1.0, hi) > target {
                    lo = hi;
                    hi *= 2;
                    if hi > 1 << 62 {
                        break;
                    }
                }
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if coeff * zeta_tail(alpha + 1.0, mid) > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
            // light tails: table reaches 1e-16 mass, clamp to the cutoff
            _ => self.table_cutoff,
        }
    }
}

/// Size-biased transform `P(xi* = k) = k p_k / mu`.
#[derive(Debug, Clone)]
pub struct SizeBiasedLaw {
    base: Arc<OffspringLaw>,
    cdf: Vec<f64>,
    table_cutoff: u64,
}

impl SizeBiasedLaw {
    pub fn new(base: Arc<OffspringLaw>) -> Result<Self, DistributionError> {
        if base.mean() <= 0.0 {
            return Err(DistributionError::InvalidParameter(
                "size-biased transform needs mu > 0".into(),
            ));
        }
        let mu = base.mean();
        let mut cdf = vec![0.0]; // P(xi* = 0) = 0
        let mut acc = 0.0f64;
        let mut comp = 0.0f64;
        let mut k = 1u64;
        let cutoff = loop {
            let p = k as f64 * base.pmf(k) / mu;
            let y = p - comp;
            let t = acc + y;
            comp = (t - acc) - y;
            acc = t;
            cdf.push(acc);
            let done = match base.variant() {
                LawVariant::FinitePmf { pmf } => k as usize + 1 >= pmf.len(),
                LawVariant::Geometric { .. } => 1.0 - acc < 1e-16,
                // heavy tails decay like k^{1-alpha} here; cap the table at
                // 1e6 entries and leave the rest to analytic inversion
                LawVariant::PowerTail { .. } => 1.0 - acc < TABLE_TAIL_EPS || k >= 1_000_000,
            };
            if done {
                break k;
            }
            k += 1;
        };
        Ok(Self {
            base,
            cdf,
            table_cutoff: cutoff,
        })
    }

    pub fn base(&self) -> &OffspringLaw {
        &self.base
    }

    pub fn pmf(&self, k: u64) -> f64 {
        k as f64 * self.base.pmf(k) / self.base.mean()
    }

    /// `E[xi*] = (sigma^2 + mu^2)/mu`; `None` when infinite.
    pub fn mean(&self) -> Option<f64> {
        let mu = self.base.mean();
        self.base.variance().map(|v| (v + mu * mu) / mu)
    }

    /// `P(xi* >= x)` for real `x`, analytic beyond the table.
    pub fn tail_prob(&self, x: f64) -> f64 {
        if x <= 1.0 {
            return 1.0;
        }
        let k = x.ceil() as u64; // P(xi* >= x) = P(xi* > k-1)
        if k - 1 < self.cdf.len() as u64 {
            return 1.0 - self.cdf[(k - 1) as usize];
        }
        match self.base.variant() {
            LawVariant::PowerTail { alpha, coeff, .. } => {
                coeff / self.base.mean() * zeta_tail(*alpha, k - 1)
            }
            _ => 0.0,
        }
    }

    pub fn sample(&self, rng: &mut impl RngCore) -> u64 {
        let u = u64_to_unit(rng.next_u64());
        let last = *self.cdf.last().unwrap();
        if u < last {
            return self.cdf.partition_point(|&c| c <= u) as u64;
        }
        match self.base.variant() {
            LawVariant::PowerTail { alpha, coeff, .. } => {
                let scale = coeff / self.base.mean();
                let target = (1.0 - u).max(f64::MIN_POSITIVE);
                let (mut lo, mut hi) = (self.table_cutoff, self.table_cutoff.max(1) * 2);
                while scale * zeta_tail(*alpha, hi) > target {
                    lo = hi;
                    hi *= 2;
                    if hi > 1 << 62 {
                        break;
                    }
                }
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if scale * zeta_tail(*alpha, mid) > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
            _ => self.table_cutoff,
        }
    }
}

/// The scaling sequence `a_n = (c' n)^{1/(alpha-1)}` where `c'` is the
/// size-biased tail constant `lim x^{alpha-1} P(xi* >= x)`.
#[derive(Debug, Clone)]
pub struct ScalingSequence {
    alpha: f64,
    tail_constant: f64,
}

impl ScalingSequence {
    pub fn new(base: &OffspringLaw) -> Result<Self, DistributionError> {
        let (alpha, coeff) = match base.variant() {
            LawVariant::PowerTail { alpha, coeff, .. } => (*alpha, *coeff),
            _ => return Err(DistributionError::ScalingUndefined),
        };
        // evaluate x^{alpha-1} P(xi* >= x) at a large cutoff; the pmf sum up
        // to the cutoff plus the analytic Hurwitz-zeta remainder is the
        // exact tail, already converged to its limit at x = 1e9
        let x = 1e9f64;
        let tail = coeff / base.mean() * zeta_tail(alpha, x as u64 - 1);
        Ok(Self {
            alpha,
            tail_constant: x.powf(alpha - 1.0) * tail,
        })
    }

    pub fn tail_constant(&self) -> f64 {
        self.tail_constant
    }

    pub fn a(&self, n: u64) -> f64 {
        (self.tail_constant * n as f64).powf(1.0 / (self.alpha - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha12Rng {
        rand_chacha::ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn pmf_examples() {
        let g = OffspringLaw::geometric(2.0 / 3.0).unwrap();
        assert!((g.pmf(0) - 1.0 / 3.0).abs() < 1e-15);

        let pt = OffspringLaw::power_tail(1.5, 0.5).unwrap();
        // p_1 = (1-p0)/zeta(2.5)
        assert!((pt.pmf(1) - 0.5 / zeta(2.5)).abs() < 1e-12);
        assert!((pt.pmf(1) - 0.372725).abs() < 1e-5);

        let f = OffspringLaw::finite_pmf(vec![0.2, 0.3, 0.5]).unwrap();
        assert!((f.pmf(2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalization_within_1e12() {
        for law in [
            OffspringLaw::finite_pmf(vec![0.25, 0.25, 0.5]).unwrap(),
            OffspringLaw::geometric(1.0 / 3.0).unwrap(),
            OffspringLaw::power_tail(1.5, 0.5).unwrap(),
            OffspringLaw::power_tail(1.2, 0.1).unwrap(),
            OffspringLaw::power_tail_with_mean(1.5, 0.5).unwrap(),
        ] {
            let total = (0..=law.table_cutoff)
                .map(|k| law.pmf(k))
                .sum::<f64>()
                + law.tail_mass(law.table_cutoff);
            assert!((total - 1.0).abs() < 1e-12, "{:?}: {total}", law.variant());
            // f(1) = 1
            assert!((law.generating_function(1.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generating_function_examples() {
        let g = OffspringLaw::geometric(2.0 / 3.0).unwrap();
        // closed form (1-a)/(1-as)
        assert!((g.generating_function(0.5) - 0.5).abs() < 1e-12);

        let f = OffspringLaw::finite_pmf(vec![0.5, 0.0, 0.5]).unwrap();
        assert!((f.generating_function(0.5) - 0.625).abs() < 1e-15);

        // PowerTail vs brute-force series at s = 0.9
        let pt = OffspringLaw::power_tail(1.5, 0.5).unwrap();
        let brute: f64 = 0.5
            + (1..30_000_000u64)
                .map(|k| pt.pmf(k) * 0.9f64.powi(k as i32))
                .sum::<f64>();
        assert!((pt.generating_function(0.9) - brute).abs() < 1e-10);
    }

    #[test]
    fn gf_derivative_tends_to_mean() {
        for law in [
            OffspringLaw::geometric(1.0 / 3.0).unwrap(),
            OffspringLaw::finite_pmf(vec![0.25, 0.25, 0.5]).unwrap(),
            OffspringLaw::power_tail(1.7, 0.3).unwrap(),
        ] {
            // numeric difference quotient at s close to 1 approaches mu
            let h = 1e-6;
            let num = (law.generating_function(1.0) - law.generating_function(1.0 - h)) / h;
            let tol = if law.variance().is_some() { 1e-4 } else { 0.05 };
            assert!(
                (num - law.mean()).abs() < tol,
                "{num} vs mu={}",
                law.mean()
            );
            // analytic derivative agrees with a brute sum at s=0.7
            let s: f64 = 0.7;
            let brute: f64 = (1..3_000_000)
                .map(|k| k as f64 * law.pmf(k) * s.powi(k as i32 - 1))
                .sum();
            assert!((law.gf_derivative(s) - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_law_samples_zero() {
        let law = OffspringLaw::finite_pmf(vec![1.0]).unwrap();
        let mut r = rng(1);
        for _ in 0..100 {
            assert_eq!(law.sample(&mut r), 0);
        }
    }

    #[test]
    fn geometric_sample_mean() {
        let law = OffspringLaw::geometric(2.0 / 3.0).unwrap();
        let mut r = rng(2);
        let n = 1_000_000u64;
        let mean = (0..n).map(|_| law.sample(&mut r)).sum::<u64>() as f64 / n as f64;
        // mu = 2, sd = sqrt(6); 3 SE
        let se = 6.0f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn size_biased_identity() {
        // E[phi(xi*)] = E[phi(xi) xi]/mu for phi(x) = x 1{x<=t}
        let base = Arc::new(OffspringLaw::geometric(1.0 / 3.0).unwrap());
        let sb = SizeBiasedLaw::new(base.clone()).unwrap();
        for t in [5u64, 50] {
            let lhs: f64 = (1..=t).map(|k| k as f64 * sb.pmf(k)).sum();
            let rhs: f64 = (1..=t)
                .map(|k| (k as f64).powi(2) * base.pmf(k))
                .sum::<f64>()
                / base.mean();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn size_biased_mean_identity() {
        // E[xi*] = (sigma^2 + mu^2)/mu, checked against brute-force pmf sum
        let base = Arc::new(OffspringLaw::geometric(1.0 / 3.0).unwrap());
        let sb = SizeBiasedLaw::new(base).unwrap();
        let brute: f64 = (1..10_000).map(|k| k as f64 * sb.pmf(k)).sum();
        assert!((sb.mean().unwrap() - brute).abs() < 1e-10);
        assert!((sb.mean().unwrap() - 2.0).abs() < 1e-12); // (0.75+0.25)/0.5
    }

    #[test]
    fn size_biased_sample_matches_pmf() {
        let base = Arc::new(OffspringLaw::geometric(2.0 / 3.0).unwrap());
        let sb = SizeBiasedLaw::new(base).unwrap();
        let mut r = rng(3);
        let n = 1_000_000usize;
        let mut counts = vec![0u64; 64];
        for _ in 0..n {
            let k = sb.sample(&mut r) as usize;
            counts[k.min(63)] += 1;
        }
        // crude chi-square against the transform pmf over k=1..20
        let mut chi2 = 0.0;
        for k in 1..20 {
            let e = n as f64 * sb.pmf(k as u64);
            chi2 += (counts[k] as f64 - e).powi(2) / e;
        }
        // 19 dof; 1% critical value ~ 36.2
        assert!(chi2 < 36.2, "chi2 = {chi2}");
    }

    #[test]
    fn power_tail_quantile_consistency() {
        let law = OffspringLaw::power_tail(1.5, 0.5).unwrap();
        // quantile inverts the CDF: P(xi <= q(u)) >= u > P(xi <= q(u)-1)
        for &u in &[0.1, 0.6, 0.99, 0.999999999] {
            let k = law.quantile(u);
            let cdf_k = 1.0 - law.tail_mass(k);
            assert!(cdf_k >= u - 1e-9, "u={u} k={k}");
            if k > 0 {
                let cdf_km1 = 1.0 - law.tail_mass(k - 1);
                assert!(cdf_km1 <= u + 1e-9, "u={u} k={k}");
            }
        }
    }

    #[test]
    fn scaling_sequence_tail_invariant() {
        // P(xi* >= x a_n) * n -> x^-(alpha-1), by numeric tail evaluation
        let law = OffspringLaw::power_tail_with_mean(1.5, 0.5).unwrap();
        let sb = SizeBiasedLaw::new(Arc::new(law.clone())).unwrap();
        let seq = ScalingSequence::new(&law).unwrap();
        for &x in &[0.5f64, 1.0, 2.0] {
            for &n in &[1_000u64, 10_000, 100_000] {
                let p = sb.tail_prob(x * seq.a(n));
                let limit = x.powf(-0.5);
                assert!(
                    (p * n as f64 / limit - 1.0).abs() < 0.02,
                    "x={x} n={n}: {}",
                    p * n as f64
                );
            }
        }
    }

    #[test]
    fn scaling_sequence_examples() {
        let law = OffspringLaw::power_tail_with_mean(1.5, 0.5).unwrap();
        let seq = ScalingSequence::new(&law).unwrap();
        // a_1 = c'^{1/(alpha-1)} = c'^2
        assert!((seq.a(1) - seq.tail_constant().powi(2)).abs() < 1e-9 * seq.a(1));
        // monotone
        for n in [1u64, 2, 10, 100, 1000] {
            assert!(seq.a(2 * n) > seq.a(n));
        }
        // rejects finite-variance base
        let geo = OffspringLaw::geometric(0.5).unwrap();
        assert!(ScalingSequence::new(&geo).is_err());
    }

    #[test]
    fn mean_tuning_hits_target() {
        let law = OffspringLaw::power_tail_with_mean(1.5, 0.5).unwrap();
        assert!((law.mean() - 0.5).abs() < 1e-12);
        assert!(OffspringLaw::power_tail_with_mean(1.5, 5.0).is_err());
    }

    #[test]
    fn one_minus_f_small_eps_linearizes() {
        // 1 - f(1-eps) ~ mu eps as eps -> 0 for finite-variance laws
        let law = OffspringLaw::geometric(1.0 / 3.0).unwrap();
        let eps = 1e-10;
        let v = law.one_minus_f(eps);
        assert!((v / (law.mean() * eps) - 1.0).abs() < 1e-6);
    }
}
