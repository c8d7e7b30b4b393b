use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use gw_escape::analytics;
use gw_escape::cli::{runner, CliError, ExperimentConfig};
use gw_escape::distributions::{OffspringLaw, SeedStream};
use gw_escape::oracle;
use gw_escape::trees::Tree;

#[derive(Parser)]
#[command(name = "gw-escape", about = "Biased-walk escape experiments on Galton-Watson trees")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a JSON config
    Run {
        config: PathBuf,
        /// Worker count; affects scheduling only, never results
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the config's master_seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output_dir
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's replica count
        #[arg(long)]
        replicas: Option<u64>,
        /// Skip replicas already present in records.jsonl
        #[arg(long)]
        resume: bool,
    },
    /// Classify a (law, beta) grid without running walks
    Phase { config: PathBuf },
    /// Fast oracle/analytics self-test
    Check,
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

fn cmd_run(
    config: PathBuf,
    jobs: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
    replicas: Option<u64>,
    resume: bool,
) -> Result<(), CliError> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_string_lossy().into_owned();
    }
    if let Some(r) = replicas {
        cfg.replicas = r;
    }
    let summary = runner::run_experiment(&cfg, resume)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn cmd_phase(config: PathBuf) -> Result<(), CliError> {
    let mut cfg = load_config(&config)?;
    cfg.experiment = gw_escape::cli::ExperimentKind::PhaseSweep;
    let summary = runner::run_experiment(&cfg, false)?;
    let rows = summary.phase_rows.unwrap_or_default();
    println!("law,beta,mu,regime");
    for r in rows {
        let tag = serde_json::to_string(&r.regime).expect("regime serializes");
        println!(
            "\"{}\",{},{},{}",
            r.law.replace('"', "\"\""),
            r.beta,
            r.mu,
            tag.trim_matches('"')
        );
    }
    Ok(())
}

fn check_item(name: &str, ok: bool) -> bool {
    println!("{} {}", if ok { "PASS" } else { "FAIL" }, name);
    ok
}

/// Deterministic self-test of the closed forms against the independent
/// linear-system oracle; runs in seconds.
fn cmd_check() -> Result<ExitCode, CliError> {
    let mut all = true;

    let law = OffspringLaw::geometric(2.0 / 3.0)?;
    let q = analytics::extinction_probability(&law).map_err(|e| CliError::Config(e.to_string()))?;
    let fq = law.gf_derivative(q);
    all &= check_item(
        "extinction probability and branch mean (geometric offspring)",
        (q - 0.5).abs() < 1e-10 && (fq - 0.5).abs() < 1e-10,
    );

    let sub = Arc::new(OffspringLaw::geometric(1.0 / 3.0)?);
    let mut stream = SeedStream::new(0xC0FFEE, 0);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 20 {
        let tree = match Tree::sample_gw(sub.clone(), 40, &mut stream, 5_000) {
            Ok(t) => t,
            Err(_) => continue,
        };
        if tree.children(tree.root()).is_empty() {
            continue;
        }
        for &beta in &[1.5f64, 2.0] {
            let f = analytics::expected_return_time(&tree, beta, true)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let o = oracle::exact_expected_return_to_root(&tree, beta)
                .map_err(|e| CliError::Config(e.to_string()))?;
            worst = worst.max(((f - o) / o).abs());
        }
        checked += 1;
    }
    all &= check_item("return-time formula vs linear-system oracle", worst < 1e-9);

    let mut ok = true;
    for h in 1u32..=4 {
        for &beta in &[1.5f64, 2.0, 4.0] {
            let (p1, p2) = analytics::deepest_point_probabilities(h, beta);
            let mut path = Tree::fixed(100);
            let mut prev = None;
            let mut ids = Vec::new();
            for _ in 0..h + 2 {
                let id = tree_push(&mut path, prev);
                ids.push(id);
                prev = Some(id);
            }
            let deep = *ids.last().unwrap();
            let p = oracle::AbsorptionProblem::new(&path, beta, HashSet::from([deep]), HashSet::from([ids[0]]))
                .and_then(|pr| oracle::exact_hit_probability(&pr))
                .map_err(|e| CliError::Config(e.to_string()))?;
            ok &= (p[&ids[1]] - p1).abs() < 1e-12;
            let back = oracle::AbsorptionProblem::new(&path, beta, HashSet::from([ids[0]]), HashSet::from([deep]))
                .and_then(|pr| oracle::exact_hit_probability(&pr))
                .map_err(|e| CliError::Config(e.to_string()))?;
            ok &= (back[&ids[h as usize]] - p2).abs() < 1e-12;
        }
    }
    all &= check_item("deepest-point transit probabilities vs path solves", ok);

    let mut ok = true;
    for &alpha in &[1.1f64, 1.5, 1.9] {
        let total: f64 = (1..=400u64)
            .map(|l| analytics::deep_trap_count_pmf(alpha, l))
            .sum();
        let remainder: f64 = (1..=400u64).map(|j| (j as f64 + 1.0 - alpha) / j as f64).product();
        ok &= (total + remainder - 1.0).abs() < 1e-10;
    }
    all &= check_item("deep-trap multiplicity pmf partial sums", ok);

    let c = analytics::trap_time_constants(2.0, 1.0 / 3.0)
        .map_err(|e| CliError::Config(e.to_string()))?;
    all &= check_item(
        "single-trap expected time constant",
        (c.e_t11 - 6.0).abs() < 1e-12,
    );

    Ok(if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn tree_push(tree: &mut Tree, parent: Option<u32>) -> u32 {
    tree.add_fixed_node(parent, gw_escape::trees::Role::Trap)
        .expect("within fixed budget")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            config,
            jobs,
            seed,
            out,
            replicas,
            resume,
        } => cmd_run(config, jobs, seed, out, replicas, resume).map(|_| ExitCode::SUCCESS),
        Cmd::Phase { config } => cmd_phase(config).map(|_| ExitCode::SUCCESS),
        Cmd::Check => cmd_check(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
