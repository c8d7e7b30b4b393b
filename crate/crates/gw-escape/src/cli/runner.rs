//! Replica fan-out, persistence and summaries for each experiment kind.
//!
//! Replica `i` always draws from `SeedStream(master_seed, i)`, so records
//! are reproducible and mergeable in any order. Records append to
//! `records.jsonl` one line at a time; resume drops any truncated final
//! line and re-runs the missing replicas.

use std::collections::HashSet;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::distributions::Distribution;
use serde::{Deserialize, Serialize};

use super::{CliError, ExperimentConfig, ExperimentKind, RunRecord};
use crate::analytics::{self, Regime, RegimeParams};
use crate::distributions::{OffspringLaw, SeedStream, SizeBiasedLaw};
use crate::oracle;
use crate::stats::{self, SampleSet};
use crate::trees::{Role, Tree};
use crate::walk::{self, WalkConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: u32,
    pub n: u64,
    pub median_delta: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub censored_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub law: String,
    pub beta: f64,
    pub mu: f64,
    pub regime: Regime,
}

/// Estimator outputs next to their analytic targets. Fields not produced
/// by the experiment kind stay null; the schema never changes shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub experiment: ExperimentKind,
    pub regime: Regime,
    pub replicas_done: u64,
    pub censored_frac: f64,
    pub levels: Vec<LevelRow>,
    pub delta_slope: Option<f64>,
    pub delta_slope_se: Option<f64>,
    pub delta_slope_target: Option<f64>,
    pub depth_slope: Option<f64>,
    pub depth_slope_se: Option<f64>,
    pub depth_slope_target: Option<f64>,
    pub hill_index: Option<f64>,
    pub hill_se: Option<f64>,
    pub hill_target: Option<f64>,
    pub hill_monotone_drift: Option<bool>,
    pub chi_square_statistic: Option<f64>,
    pub chi_square_p: Option<f64>,
    /// Target parameter of the fitted family (e.g. geometric success prob).
    pub fit_parameter_target: Option<f64>,
    pub mean_duration: Option<f64>,
    pub mean_duration_target: Option<f64>,
    /// (l, empirical mass, limit mass) for small deep-trap multiplicities.
    pub deep_trap_pmf: Option<Vec<(u64, f64, f64)>>,
    pub max_return_rel_error: Option<f64>,
    pub tail_slope: Option<f64>,
    pub tail_slope_se: Option<f64>,
    pub tail_slope_target: Option<f64>,
    pub tail_constant_target: Option<f64>,
    /// (s, empirical Laplace transform of Delta_n/a_n, stable target).
    pub laplace: Option<Vec<(f64, f64, f64)>>,
    pub phase_rows: Option<Vec<PhaseRow>>,
}

impl Summary {
    fn empty(config_hash: String, experiment: ExperimentKind, regime: Regime) -> Self {
        Self {
            config_hash,
            experiment,
            regime,
            replicas_done: 0,
            censored_frac: 0.0,
            levels: Vec::new(),
            delta_slope: None,
            delta_slope_se: None,
            delta_slope_target: None,
            depth_slope: None,
            depth_slope_se: None,
            depth_slope_target: None,
            hill_index: None,
            hill_se: None,
            hill_target: None,
            hill_monotone_drift: None,
            chi_square_statistic: None,
            chi_square_p: None,
            fit_parameter_target: None,
            mean_duration: None,
            mean_duration_target: None,
            deep_trap_pmf: None,
            max_return_rel_error: None,
            tail_slope: None,
            tail_slope_se: None,
            tail_slope_target: None,
            tail_constant_target: None,
            laplace: None,
            phase_rows: None,
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, resume: bool) -> Result<Summary, CliError> {
    cfg.validate()?;
    if cfg.experiment == ExperimentKind::PhaseSweep {
        return phase_sweep(cfg);
    }
    let law = Arc::new(cfg.law.build()?);
    let params = RegimeParams::new(law.clone(), cfg.beta)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.check_regime
        && matches!(
            params.regime,
            Regime::Boundary | Regime::CriticalUnsupported
        )
    {
        return Err(CliError::Config(format!(
            "(law, beta) classifies as {:?}; pass check_regime=false to force",
            params.regime
        )));
    }
    let needs_subcritical = matches!(
        cfg.experiment,
        ExperimentKind::ExcursionLaw
            | ExperimentKind::DeepTrapCount
            | ExperimentKind::ReturnTimeCheck
    );
    if needs_subcritical && law.mean() >= 1.0 {
        return Err(CliError::Config(format!(
            "{:?} needs a subcritical law, mean is {}",
            cfg.experiment,
            law.mean()
        )));
    }
    if cfg.experiment == ExperimentKind::SupercriticalTail && law.mean() <= 1.0 {
        return Err(CliError::Config(format!(
            "supercritical-tail needs mean > 1, mean is {}",
            law.mean()
        )));
    }

    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir)?;
    let records_path = dir.join("records.jsonl");
    let hash = cfg.hash();

    let mut records = if resume {
        load_and_compact(&records_path, &hash)?
    } else {
        let _ = fs::remove_file(&records_path);
        Vec::new()
    };
    let done: HashSet<u64> = records.iter().map(|r| r.replica).collect();

    let ctx = ReplicaContext::new(cfg, &law, &params)?;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)?;
    for replica in 0..cfg.replicas {
        if done.contains(&replica) {
            continue;
        }
        let rec = run_replica(cfg, &ctx, replica, &hash);
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(file, "{line}")?;
        file.flush()?;
        records.push(rec);
    }
    records.sort_by_key(|r| r.replica);

    let summary = summarize(cfg, &ctx, &records);
    emit_outputs(&summary, &dir)?;
    Ok(summary)
}

/// Per-run immutable inputs shared by every replica.
struct ReplicaContext {
    law: Arc<OffspringLaw>,
    params: RegimeParams,
    /// P(trap height >= levels) for deep-trap-count.
    deep_trap_eps: Option<f64>,
}

impl ReplicaContext {
    fn new(
        cfg: &ExperimentConfig,
        law: &Arc<OffspringLaw>,
        params: &RegimeParams,
    ) -> Result<Self, CliError> {
        let deep_trap_eps = if cfg.experiment == ExperimentKind::DeepTrapCount {
            let cdf = analytics::height_cdf_and_cmu(law, cfg.levels)
                .map_err(|e| CliError::Config(e.to_string()))?;
            Some(1.0 - cdf.s[cfg.levels as usize])
        } else {
            None
        };
        Ok(Self {
            law: law.clone(),
            params: params.clone(),
            deep_trap_eps,
        })
    }
}

fn run_replica(
    cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    replica: u64,
    hash: &str,
) -> RunRecord {
    let started = Instant::now();
    let mut rec = RunRecord::new(hash.to_string(), replica, ctx.params.regime);
    let mut stream = SeedStream::new(cfg.master_seed, replica);
    let outcome = match cfg.experiment {
        ExperimentKind::WalkScaling => walk_scaling(cfg, ctx, &mut stream, &mut rec),
        ExperimentKind::ExcursionLaw => excursion_law(cfg, ctx, &mut stream, &mut rec),
        ExperimentKind::DeepTrapCount => deep_trap_count(cfg, ctx, &mut stream, &mut rec),
        ExperimentKind::ReturnTimeCheck => return_time_check(cfg, ctx, &mut stream, &mut rec),
        ExperimentKind::SupercriticalTail => supercritical_tail(cfg, ctx, &mut stream, &mut rec),
        ExperimentKind::PhaseSweep => unreachable!("handled by phase_sweep"),
    };
    if outcome.is_err() {
        // budget exhaustion mid-replica: keep whatever was recorded
        rec.censored = true;
    }
    rec.wall_ms = started.elapsed().as_millis() as u64;
    rec
}

fn step_checkpoints(budget: u64) -> Vec<u64> {
    let mut cps = Vec::new();
    let mut c = 1u64;
    while c <= budget {
        cps.push(c);
        if c > budget / 2 {
            break;
        }
        c *= 2;
    }
    cps
}

fn walk_scaling(
    cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    stream: &mut SeedStream,
    rec: &mut RunRecord,
) -> Result<(), CliError> {
    let n = 1u32 << cfg.levels;
    let budget = cfg.node_budget as usize;
    let mut tree = if ctx.law.mean() < 1.0 {
        Tree::sample_kesten(ctx.law.clone(), n, stream, budget)
    } else {
        Tree::sample_supercritical_conditioned(ctx.law.clone(), ctx.params.q, 0, stream, budget)
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut wcfg = WalkConfig::new(cfg.beta);
    wcfg.step_budget = cfg.step_budget;
    wcfg.step_checkpoints = step_checkpoints(cfg.step_budget);
    let run = walk::run_to_level(&mut tree, &wcfg, n, stream)
        .map_err(|e| CliError::Config(e.to_string()))?;
    rec.delta = run.hitting;
    rec.depth_at = run.depth_at;
    rec.censored = run.censored;
    Ok(())
}

fn excursion_law(
    cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    stream: &mut SeedStream,
    rec: &mut RunRecord,
) -> Result<(), CliError> {
    let n = 1u32 << cfg.levels;
    let budget = cfg.node_budget as usize;
    let mut tree = Tree::sample_kesten(ctx.law.clone(), n, stream, budget)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut wcfg = WalkConfig::new(cfg.beta);
    wcfg.step_budget = cfg.step_budget;
    wcfg.record_excursions = true;
    let run = walk::run_to_level(&mut tree, &wcfg, n, stream)
        .map_err(|e| CliError::Config(e.to_string()))?;
    rec.censored = run.censored;
    for tv in run.excursions.values() {
        rec.excursion_durations.extend(tv.durations.iter().copied());
    }
    if run.censored {
        return Ok(());
    }
    // Entry counts only for spine vertices the walk has permanently left
    // behind (a safety margin below the terminal level) with exactly one
    // bud, where the count is a clean geometric.
    let margin = (n / 2).min(100);
    let spine: Vec<u32> = tree.spine().to_vec();
    for &v in spine.iter().skip(1) {
        if tree.depth(v) > n - margin {
            break;
        }
        let buds: Vec<u32> = tree
            .children(v)
            .into_iter()
            .filter(|&c| tree.role(c) == Role::Bud)
            .collect();
        if buds.len() == 1 {
            let w = run
                .excursions
                .get(&(v, buds[0]))
                .map(|t| t.entries)
                .unwrap_or(0);
            rec.excursion_entries.push(w);
        }
    }
    Ok(())
}

fn deep_trap_count(
    _cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    stream: &mut SeedStream,
    rec: &mut RunRecord,
) -> Result<(), CliError> {
    let eps = ctx.deep_trap_eps.expect("precomputed for this kind");
    let sb = SizeBiasedLaw::new(ctx.law.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    // Branch = spine vertex + its buds' traps; bud count is xi*-1 and each
    // trap independently reaches the depth threshold with probability eps.
    // Rejection-sample the conditioning on at least one deep trap.
    for _ in 0..100_000_000u64 {
        let xi = sb.sample(stream);
        let buds = xi.saturating_sub(1);
        if buds == 0 {
            continue;
        }
        let count = rand_distr::Binomial::new(buds, eps)
            .map_err(|e| CliError::Config(e.to_string()))?
            .sample(stream);
        if count >= 1 {
            rec.deep_trap_count = Some(count);
            return Ok(());
        }
    }
    Err(CliError::Config(
        "deep-trap conditioning never hit; threshold too deep".into(),
    ))
}

fn return_time_check(
    cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    stream: &mut SeedStream,
    rec: &mut RunRecord,
) -> Result<(), CliError> {
    let budget = (cfg.node_budget as usize).min(10_000);
    for _ in 0..10_000 {
        let tree = match Tree::sample_gw(ctx.law.clone(), 60, stream, budget) {
            Ok(t) => t,
            Err(_) => continue, // over budget: resample
        };
        if tree.children(tree.root()).is_empty() {
            continue;
        }
        let formula = analytics::expected_return_time(&tree, cfg.beta, true)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let exact = oracle::exact_expected_return_to_root(&tree, cfg.beta)
            .map_err(|e| CliError::Config(e.to_string()))?;
        rec.return_formula = Some(formula);
        rec.return_oracle = Some(exact);
        return Ok(());
    }
    Err(CliError::Config(
        "could not sample a nontrivial tree within budget".into(),
    ))
}

fn supercritical_tail(
    cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    stream: &mut SeedStream,
    rec: &mut RunRecord,
) -> Result<(), CliError> {
    let gens = cfg.levels;
    let mut tree = Tree::sample_supercritical_conditioned(
        ctx.law.clone(),
        ctx.params.q,
        gens,
        stream,
        cfg.node_budget as usize,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let branches = tree
        .decompose_branches()
        .map_err(|e| CliError::Config(e.to_string()))?;
    for b in branches {
        // frontier vertices are not fully materialized; skip them
        if tree.depth(b.root) < gens {
            rec.branch_heights.push(b.branch_height);
        }
    }
    Ok(())
}

fn quantiles(values: &mut [f64]) -> (f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let i = ((values.len() - 1) as f64 * p).round() as usize;
        values[i]
    };
    (q(0.5), q(0.25), q(0.75))
}

fn slope_targets(params: &RegimeParams, alpha: f64) -> (Option<f64>, Option<f64>) {
    // (delta exponent d: Delta_n ~ n^d, depth exponent 1/d: |X_m| ~ m^(1/d))
    let d = match params.regime {
        Regime::Ivfe => Some(1.0 / (alpha - 1.0)),
        Regime::Fvie | Regime::SupSubballistic => params.gamma.map(|g| 1.0 / g),
        Regime::Ivie => params.gamma.map(|g| 1.0 / (g * (alpha - 1.0))),
        Regime::Ballistic | Regime::SupBallistic => Some(1.0),
        _ => None,
    };
    (d, d.map(|d| 1.0 / d))
}

fn summarize(cfg: &ExperimentConfig, ctx: &ReplicaContext, records: &[RunRecord]) -> Summary {
    let mut s = Summary::empty(cfg.hash(), cfg.experiment, ctx.params.regime);
    s.replicas_done = records.len() as u64;
    s.censored_frac = if records.is_empty() {
        0.0
    } else {
        records.iter().filter(|r| r.censored).count() as f64 / records.len() as f64
    };
    match cfg.experiment {
        ExperimentKind::WalkScaling => summarize_walk_scaling(cfg, ctx, records, &mut s),
        ExperimentKind::ExcursionLaw => summarize_excursion_law(cfg, ctx, records, &mut s),
        ExperimentKind::DeepTrapCount => summarize_deep_trap(ctx, records, &mut s),
        ExperimentKind::ReturnTimeCheck => {
            let mut worst = 0.0f64;
            for r in records {
                if let (Some(f), Some(o)) = (r.return_formula, r.return_oracle) {
                    worst = worst.max(((f - o) / o).abs());
                }
            }
            s.max_return_rel_error = Some(worst);
        }
        ExperimentKind::SupercriticalTail => summarize_supercritical_tail(ctx, records, &mut s),
        ExperimentKind::PhaseSweep => unreachable!(),
    }
    s
}

fn summarize_walk_scaling(
    cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    records: &[RunRecord],
    s: &mut Summary,
) {
    let Some(first) = records.first() else { return };
    let alpha = ctx.law.tail_index();
    let (delta_target, depth_target) = slope_targets(&ctx.params, alpha);
    s.delta_slope_target = delta_target;
    s.depth_slope_target = depth_target;

    // per-level rows
    for (i, &(level, _)) in first.delta.iter().enumerate() {
        let mut vals: Vec<f64> = Vec::new();
        let mut censored = 0usize;
        for r in records {
            match r.delta.get(i).and_then(|&(_, t)| t) {
                Some(t) => vals.push(t as f64),
                None => censored += 1,
            }
        }
        let (median, q25, q75) = if vals.is_empty() {
            (None, None, None)
        } else {
            let (m, a, b) = quantiles(&mut vals);
            (Some(m), Some(a), Some(b))
        };
        s.levels.push(LevelRow {
            level: i as u32,
            n: level as u64,
            median_delta: median,
            q25,
            q75,
            censored_frac: censored as f64 / records.len() as f64,
        });
    }

    // hitting-time slope over the upper dyadic window, uncensored replicas
    let lo = 1u64 << (cfg.levels / 2 + cfg.levels % 2);
    let complete: Vec<&RunRecord> = records.iter().filter(|r| !r.censored).collect();
    let mut xs: Vec<u64> = Vec::new();
    let mut per_level: Vec<Vec<f64>> = Vec::new();
    for (i, &(level, _)) in first.delta.iter().enumerate() {
        if (level as u64) < lo {
            continue;
        }
        let vals: Vec<f64> = complete
            .iter()
            .filter_map(|r| r.delta.get(i).and_then(|&(_, t)| t).map(|t| t as f64))
            .collect();
        if vals.len() == complete.len() && !vals.is_empty() {
            xs.push(level as u64);
            per_level.push(vals);
        }
    }
    if let Ok(est) = stats::loglog_slope(&xs, &per_level) {
        s.delta_slope = Some(est.slope);
        s.delta_slope_se = Some(est.se);
    }

    // tail index of the top-level hitting time; censored replicas enter as
    // right-censored at the step budget
    let top = first.delta.len() - 1;
    let mut vals = Vec::new();
    let mut cens = Vec::new();
    for r in records {
        match r.delta.get(top).and_then(|&(_, t)| t) {
            Some(t) => {
                vals.push(t as f64);
                cens.push(false);
            }
            None => {
                vals.push(cfg.step_budget as f64);
                cens.push(true);
            }
        }
    }
    // push k past the censored mass at the budget so the top-k region
    // still sees uncensored spacings
    let n_censored = cens.iter().filter(|&&c| c).count();
    let base_k = (vals.len() as f64).sqrt() as usize;
    let k = (base_k + 2 * n_censored).min(vals.len().saturating_sub(1) / 2);
    let sample = SampleSet::with_censoring(vals, cens);
    if let Ok(h) = stats::hill_tail_index(&sample, Some(k)) {
        s.hill_index = Some(h.index);
        s.hill_se = Some(h.se);
        s.hill_monotone_drift = Some(h.monotone_drift);
    }
    s.hill_target = match ctx.params.regime {
        Regime::Ivfe | Regime::Fvie | Regime::Ivie | Regime::SupSubballistic => {
            delta_target.map(|d| 1.0 / d)
        }
        _ => None,
    };

    // depth-vs-steps slope on checkpoints every replica reached
    if let Some(first_cp) = records.first().map(|r| &r.depth_at) {
        let mut cps: Vec<u64> = Vec::new();
        let mut per_cp: Vec<Vec<f64>> = Vec::new();
        for (i, &(step, _)) in first_cp.iter().enumerate() {
            let vals: Vec<f64> = records
                .iter()
                .filter_map(|r| r.depth_at.get(i).and_then(|&(_, d)| d))
                .map(|d| (d as f64).max(1.0))
                .collect();
            if vals.len() == records.len() {
                cps.push(step);
                per_cp.push(vals);
            }
        }
        // upper half of the usable window, where the asymptote dominates
        let keep = (cps.len() / 2).max(4.min(cps.len()));
        let start = cps.len() - keep.min(cps.len());
        if let Ok(est) = stats::loglog_slope(&cps[start..], &per_cp[start..]) {
            s.depth_slope = Some(est.slope);
            s.depth_slope_se = Some(est.se);
        }
    }

    // heavy-tail Laplace diagnostic against the stable-subordinator limit.
    // Censored replicas contribute 0: their true weight e^{-s Delta/a_n}
    // is below e^{-s budget/a_n}, negligible at these s.
    if ctx.params.regime == Regime::Ivfe && !records.is_empty() {
        let a_n = scaling_sequence(ctx, cfg.master_seed, 1u64 << cfg.levels);
        let c = analytics::subordinator_constant(alpha, cfg.beta, ctx.law.mean());
        let scaled: Vec<f64> = records
            .iter()
            .filter_map(|r| r.delta.get(top).and_then(|&(_, t)| t))
            .map(|t| t as f64 / a_n)
            .collect();
        let total = records.len() as f64;
        let mut rows = Vec::new();
        for &sv in &[0.5, 1.0, 2.0] {
            let emp = scaled.iter().map(|&x| (-sv * x).exp()).sum::<f64>() / total;
            rows.push((sv, emp, (-c * sv.powf(alpha - 1.0)).exp()));
        }
        s.laplace = Some(rows);
    }
}

/// Normalizer a_n with n * P(xi* >= a_n) ~ 1, estimated as the empirical
/// (1 - 1/n) quantile of the size-biased law on a dedicated stream.
fn scaling_sequence(ctx: &ReplicaContext, master_seed: u64, n: u64) -> f64 {
    let sb = SizeBiasedLaw::new(ctx.law.clone()).expect("subcritical law");
    let mut stream = SeedStream::new(master_seed, u64::MAX);
    let draws: usize = 200_000;
    let mut xs: Vec<u64> = (0..draws).map(|_| sb.sample(&mut stream)).collect();
    xs.sort_unstable();
    let rank = ((draws as f64) * (1.0 - 1.0 / n as f64)) as usize;
    xs[rank.min(draws - 1)] as f64
}

fn summarize_excursion_law(
    cfg: &ExperimentConfig,
    ctx: &ReplicaContext,
    records: &[RunRecord],
    s: &mut Summary,
) {
    let p = (cfg.beta - 1.0) / (2.0 * cfg.beta - 1.0);
    s.fit_parameter_target = Some(p);
    let mut counts = Vec::new();
    for r in records {
        counts.extend(r.excursion_entries.iter().copied());
    }
    if !counts.is_empty() {
        let cap = 30usize;
        let mut observed = vec![0u64; cap + 1];
        for &w in &counts {
            observed[(w as usize).min(cap)] += 1;
        }
        let mut expected: Vec<f64> = (0..cap).map(|k| p * (1.0 - p).powi(k as i32)).collect();
        expected.push(1.0 - expected.iter().sum::<f64>());
        if let Ok(gof) = stats::chi_square_gof(&observed, &expected) {
            s.chi_square_statistic = Some(gof.statistic);
            s.chi_square_p = Some(gof.p_value);
        }
    }
    let durations: Vec<f64> = records
        .iter()
        .flat_map(|r| r.excursion_durations.iter().map(|&d| d as f64))
        .collect();
    if !durations.is_empty() {
        s.mean_duration = Some(durations.iter().sum::<f64>() / durations.len() as f64);
    }
    let bm = cfg.beta * ctx.law.mean();
    if bm < 1.0 {
        s.mean_duration_target = Some(2.0 / (1.0 - bm));
    }
}

fn summarize_deep_trap(ctx: &ReplicaContext, records: &[RunRecord], s: &mut Summary) {
    let counts: Vec<u64> = records.iter().filter_map(|r| r.deep_trap_count).collect();
    if counts.is_empty() {
        return;
    }
    let alpha = ctx.law.tail_index();
    let n = counts.len() as f64;
    let heavy = alpha < 2.0;
    let mut rows = Vec::new();
    for l in 1..=4u64 {
        let emp = counts.iter().filter(|&&c| c == l).count() as f64 / n;
        let limit = if heavy {
            analytics::deep_trap_count_pmf(alpha, l)
        } else {
            f64::NAN // no heavy-tail limit; serializes as null
        };
        rows.push((l, emp, limit));
    }
    s.deep_trap_pmf = Some(rows);
    if heavy {
        let cap = 6usize;
        let mut observed = vec![0u64; cap + 1];
        for &c in &counts {
            observed[((c - 1) as usize).min(cap)] += 1;
        }
        let mut expected: Vec<f64> = (1..=cap as u64)
            .map(|l| analytics::deep_trap_count_pmf(alpha, l))
            .collect();
        expected.push(1.0 - expected.iter().sum::<f64>());
        if let Ok(gof) = stats::chi_square_gof(&observed, &expected) {
            s.chi_square_statistic = Some(gof.statistic);
            s.chi_square_p = Some(gof.p_value);
        }
    }
}

fn summarize_supercritical_tail(ctx: &ReplicaContext, records: &[RunRecord], s: &mut Summary) {
    let fq = ctx.params.fprime_q;
    s.tail_slope_target = Some(fq.ln());
    if let Ok(c) = analytics::supercritical_branch_tail_constant(&ctx.law) {
        s.tail_constant_target = Some(c);
    }
    let heights: Vec<u32> = records
        .iter()
        .flat_map(|r| r.branch_heights.iter().copied())
        .collect();
    let total = heights.len() as f64;
    if total == 0.0 {
        return;
    }
    // least-squares fit of ln P(height > n) on n over 4..=10, dropping
    // sparse bins where Poisson noise dominates
    let mut pts = Vec::new();
    for n in 4u32..=10 {
        let surv = heights.iter().filter(|&&h| h > n).count();
        if surv >= 10 {
            pts.push((n as f64, (surv as f64 / total).ln()));
        }
    }
    if pts.len() < 3 {
        return;
    }
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let intercept = (sy - slope * sx) / m;
    let dof = (m - 2.0).max(1.0);
    let resid: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    s.tail_slope = Some(slope);
    s.tail_slope_se = Some((resid / dof / (sxx - sx * sx / m)).sqrt());
}

fn phase_sweep(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let grid = cfg
        .phase_grid
        .as_ref()
        .ok_or_else(|| CliError::Config("phase-sweep needs a phase_grid".into()))?;
    let mut rows = Vec::new();
    for spec in &grid.laws {
        let law = Arc::new(spec.build()?);
        for &beta in &grid.betas {
            if beta <= 0.0 {
                return Err(CliError::Config(format!("bias must be positive: {beta}")));
            }
            let params = RegimeParams::new(law.clone(), beta)
                .map_err(|e| CliError::Config(e.to_string()))?;
            rows.push(PhaseRow {
                law: serde_json::to_string(spec).expect("law serializes"),
                beta,
                mu: law.mean(),
                regime: params.regime,
            });
        }
    }
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir)?;
    let mut out = String::from("law,beta,mu,regime\n");
    for r in &rows {
        let tag = serde_json::to_string(&r.regime).expect("regime serializes");
        out.push_str(&format!(
            "\"{}\",{},{},{}\n",
            r.law.replace('"', "\"\""),
            r.beta,
            r.mu,
            tag.trim_matches('"')
        ));
    }
    fs::write(dir.join("phase.csv"), &out)?;

    let mut s = Summary::empty(cfg.hash(), cfg.experiment, Regime::CriticalUnsupported);
    s.replicas_done = rows.len() as u64;
    s.phase_rows = Some(rows);
    Ok(s)
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn emit_outputs(summary: &Summary, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("level,n,median_delta,q25,q75,censored_frac\n");
    for row in &summary.levels {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.level,
            row.n,
            csv_opt(row.median_delta),
            csv_opt(row.q25),
            csv_opt(row.q75),
            row.censored_frac
        ));
    }
    fs::write(dir.join("summary.csv"), &csv)?;

    let mut plot = String::from("x,y,y_err\n");
    for row in &summary.levels {
        if let Some(m) = row.median_delta {
            let err = match (row.q25, row.q75) {
                (Some(a), Some(b)) => (b - a) / 2.0,
                _ => 0.0,
            };
            plot.push_str(&format!("{},{},{}\n", row.n, m, err));
        }
    }
    fs::write(dir.join("plot.csv"), &plot)?;

    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// Read back records matching `hash`, dropping unparsable lines (a crash
/// can truncate the final one), and compact the file to the valid prefix.
fn load_and_compact(path: &Path, hash: &str) -> Result<Vec<RunRecord>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = Vec::new();
    let mut dropped = false;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(rec) if rec.config_hash == hash => kept.push(rec),
            Ok(_) => dropped = true,  // stale records from another config
            Err(_) => dropped = true, // truncated or corrupt line
        }
    }
    if dropped {
        let mut out = String::new();
        for rec in &kept {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::LawSpec;

    fn tmp_cfg(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            experiment: kind,
            law: LawSpec::Geometric { a: 1.0 / 3.0 },
            beta: 1.5,
            check_regime: true,
            levels: 4,
            replicas: 3,
            step_budget: 1_000_000,
            node_budget: 1_000_000,
            master_seed: 7,
            output_dir: dir.to_str().unwrap().into(),
            phase_grid: None,
        }
    }

    #[test]
    fn deterministic_records_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tmp_cfg(ExperimentKind::WalkScaling, dir.path());
        let s1 = run_experiment(&cfg, false).unwrap();
        let bytes1 = fs::read(dir.path().join("records.jsonl")).unwrap();
        let s2 = run_experiment(&cfg, false).unwrap();
        let bytes2 = fs::read(dir.path().join("records.jsonl")).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(s1, s2);
        assert_eq!(s1.replicas_done, 3);
        assert!(!s1.levels.is_empty());
        let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(csv.starts_with("level,n,median_delta,q25,q75,censored_frac\n"));
        let plot = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
        assert!(plot.starts_with("x,y,y_err\n"));
    }

    #[test]
    fn resume_skips_completed_and_rerun_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tmp_cfg(ExperimentKind::WalkScaling, dir.path());
        run_experiment(&cfg, false).unwrap();
        let path = dir.path().join("records.jsonl");
        let full = fs::read_to_string(&path).unwrap();

        // truncate mid-line: the damaged replica must be re-run
        let cut = full.len() - 17;
        fs::write(&path, &full[..cut]).unwrap();
        run_experiment(&cfg, true).unwrap();
        let after = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = after.lines().collect();
        lines.sort_by_key(|l| {
            serde_json::from_str::<RunRecord>(l).unwrap().replica
        });
        let sorted = lines.join("\n") + "\n";
        assert_eq!(sorted, full);

        // resume on an intact file does nothing
        let before = fs::read(&path).unwrap();
        run_experiment(&cfg, true).unwrap();
        assert_eq!(before, fs::read(&path).unwrap());
    }

    #[test]
    fn boundary_regime_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tmp_cfg(ExperimentKind::WalkScaling, dir.path());
        cfg.beta = 2.0; // beta * mu = 1 for Geometric(1/3)
        assert!(matches!(
            run_experiment(&cfg, false),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn phase_sweep_matches_classifier() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tmp_cfg(ExperimentKind::PhaseSweep, dir.path());
        cfg.phase_grid = Some(crate::cli::PhaseGrid {
            laws: vec![
                LawSpec::Geometric { a: 1.0 / 3.0 },
                LawSpec::Geometric { a: 2.0 / 3.0 },
            ],
            betas: vec![1.5, 3.0],
        });
        let s = run_experiment(&cfg, false).unwrap();
        let rows = s.phase_rows.unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].regime, Regime::Ballistic); // mu=0.5, beta=1.5
        assert_eq!(rows[1].regime, Regime::Fvie); // mu=0.5, beta=3
        assert_eq!(rows[2].regime, Regime::SupBallistic); // mu=2, beta=1.5
        let csv = fs::read_to_string(dir.path().join("phase.csv")).unwrap();
        assert!(csv.starts_with("law,beta,mu,regime\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn excursion_law_summary_has_fit_and_targets() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tmp_cfg(ExperimentKind::ExcursionLaw, dir.path());
        cfg.levels = 8;
        cfg.replicas = 2;
        let s = run_experiment(&cfg, false).unwrap();
        assert_eq!(s.fit_parameter_target, Some(0.25));
        // beta*mu = 0.75: mean excursion duration target 8
        assert!((s.mean_duration_target.unwrap() - 8.0).abs() < 1e-9);
        assert!(s.mean_duration.is_some());
    }

    #[test]
    fn deep_trap_count_records_conditioned_draws() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tmp_cfg(ExperimentKind::DeepTrapCount, dir.path());
        cfg.levels = 2;
        cfg.replicas = 50;
        let s = run_experiment(&cfg, false).unwrap();
        assert_eq!(s.replicas_done, 50);
        let pmf = s.deep_trap_pmf.unwrap();
        assert_eq!(pmf.len(), 4);
        let mass: f64 = pmf.iter().map(|&(_, e, _)| e).sum();
        assert!(mass > 0.9); // small multiplicities dominate
    }

    #[test]
    fn return_time_check_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tmp_cfg(ExperimentKind::ReturnTimeCheck, dir.path());
        cfg.replicas = 10;
        let s = run_experiment(&cfg, false).unwrap();
        assert!(s.max_return_rel_error.unwrap() < 1e-9);
    }

    #[test]
    fn supercritical_tail_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tmp_cfg(ExperimentKind::SupercriticalTail, dir.path());
        cfg.law = LawSpec::Geometric { a: 2.0 / 3.0 };
        cfg.beta = 1.5;
        cfg.levels = 3;
        cfg.replicas = 2000;
        let s = run_experiment(&cfg, false).unwrap();
        assert!((s.tail_slope_target.unwrap() - 0.5f64.ln()).abs() < 1e-12);
        assert!((s.tail_constant_target.unwrap() - 0.75).abs() < 1e-6);
        assert!(s.tail_slope.is_some());
    }
}
