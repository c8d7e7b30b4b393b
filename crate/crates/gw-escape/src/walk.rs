//! The quenched biased-walk engine.
//!
//! From a vertex with `d` children the walk moves to the parent with
//! probability `1/(1 + beta d)` and to each child with probability
//! `beta/(1 + beta d)`; at the root it picks a child uniformly. Each step
//! consumes exactly one uniform, mapped through the cumulative kernel, so
//! runs are bit-reproducible across refactors.

use crate::distributions::SeedStream;
use crate::trees::{Role, Tree, TreeError};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("walk started at a root without children")]
    DeadRoot,
}

#[derive(Debug, Clone)]
pub struct WalkConfig {
    pub beta: f64,
    pub step_budget: u64,
    /// Track per-trap entry counts and excursion durations. Off for long
    /// scaling runs where only hitting times matter.
    pub record_excursions: bool,
    /// Record the walk's depth at these step counts (sorted, distinct).
    pub step_checkpoints: Vec<u64>,
}

impl WalkConfig {
    pub fn new(beta: f64) -> Self {
        assert!(beta > 1.0, "bias must exceed 1");
        Self {
            beta,
            step_budget: 1_000_000_000,
            record_excursions: false,
            step_checkpoints: Vec::new(),
        }
    }
}

/// Entry count and completed-excursion durations for one trap, keyed by
/// (backbone vertex, bud) in [`WalkRun::excursions`].
#[derive(Debug, Clone, Default)]
pub struct TrapVisits {
    pub entries: u64,
    pub durations: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct WalkRun {
    pub beta: f64,
    pub position: u32,
    pub steps: u64,
    /// (level, first hitting time of a backbone vertex at that level);
    /// `None` when the budget ran out first.
    pub hitting: Vec<(u32, Option<u64>)>,
    pub excursions: HashMap<(u32, u32), TrapVisits>,
    /// (step count, walk depth at that step), per requested checkpoint.
    pub depth_at: Vec<(u64, Option<u32>)>,
    /// Budget exhausted before the target level was reached.
    pub censored: bool,
}

/// One transition. The single uniform `u` maps to: parent on
/// `[0, 1/(1+beta d))`, then the children in index order.
pub fn step_once(tree: &mut Tree, pos: u32, beta: f64, u: f64) -> Result<u32, WalkError> {
    let d = tree.degree(pos)?;
    match tree.parent(pos) {
        None => {
            if d == 0 {
                return Err(WalkError::DeadRoot);
            }
            let idx = ((u * d as f64) as u64).min(d - 1);
            Ok(tree.child(pos, idx)?)
        }
        Some(p) => {
            if d == 0 {
                return Ok(p);
            }
            let denom = 1.0 + beta * d as f64;
            if u < 1.0 / denom {
                Ok(p)
            } else {
                let idx = (((u - 1.0 / denom) * denom / beta) as u64).min(d - 1);
                Ok(tree.child(pos, idx)?)
            }
        }
    }
}

/// Transition distribution of the walk at `pos` over (neighbor, probability)
/// pairs; requires the node's children to be materialized. Used by the
/// exact-solve oracle, not by the hot path.
pub fn kernel(tree: &Tree, pos: u32, beta: f64) -> Vec<(u32, f64)> {
    let children = tree.children(pos);
    let d = children.len() as f64;
    match tree.parent(pos) {
        None => children.iter().map(|&c| (c, 1.0 / d)).collect(),
        Some(p) => {
            if children.is_empty() {
                return vec![(p, 1.0)];
            }
            let denom = 1.0 + beta * d;
            let mut out = vec![(p, 1.0 / denom)];
            out.extend(children.iter().map(|&c| (c, beta / denom)));
            out
        }
    }
}

/// Dyadic level grid: 0, 1, 2, 4, ..., plus the terminal level.
pub fn dyadic_levels(n: u32) -> Vec<u32> {
    let mut levels = vec![0u32];
    let mut l = 1u32;
    while l < n {
        levels.push(l);
        l = l.saturating_mul(2);
    }
    if n > 0 {
        levels.push(n);
    }
    levels
}

/// Run from the root until the walk first stands on a backbone vertex at
/// level `n` (recording all intermediate dyadic levels) or the step budget
/// runs out (partial record, flagged censored).
pub fn run_to_level(
    tree: &mut Tree,
    cfg: &WalkConfig,
    n: u32,
    stream: &mut SeedStream,
) -> Result<WalkRun, WalkError> {
    let levels = dyadic_levels(n);
    let level_index: HashMap<u32, usize> =
        levels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut hitting: Vec<(u32, Option<u64>)> = levels.iter().map(|&l| (l, None)).collect();
    hitting[0].1 = Some(0); // the walk starts on the backbone at level 0
    let mut depth_at: Vec<(u64, Option<u32>)> =
        cfg.step_checkpoints.iter().map(|&c| (c, None)).collect();
    let mut next_cp = 0usize;

    let mut excursions: HashMap<(u32, u32), TrapVisits> = HashMap::new();
    let mut active: Option<(u32, u32, u64)> = None; // (backbone, bud, entry step)
    let mut pos = tree.root();
    let mut steps = 0u64;
    let mut censored = false;

    while hitting.last().unwrap().1.is_none() {
        if steps >= cfg.step_budget {
            censored = true;
            break;
        }
        let prev = pos;
        let prev_role = tree.role(prev);
        let u = stream.uniform();
        pos = step_once(tree, pos, cfg.beta, u)?;
        steps += 1;

        let r = tree.role(pos);
        if cfg.record_excursions {
            match (prev_role, r) {
                (Role::Backbone, Role::Bud) => {
                    excursions.entry((prev, pos)).or_default().entries += 1;
                    active = Some((prev, pos, steps));
                }
                (Role::Bud, Role::Backbone) => {
                    if let Some((backbone, bud, t0)) = active.take() {
                        debug_assert_eq!((backbone, bud), (pos, prev));
                        excursions
                            .entry((backbone, bud))
                            .or_default()
                            .durations
                            .push(steps - t0 + 1);
                    }
                }
                _ => {}
            }
        }
        if r == Role::Backbone {
            if let Some(&i) = level_index.get(&tree.depth(pos)) {
                if hitting[i].1.is_none() {
                    hitting[i].1 = Some(steps);
                }
            }
        }
        while next_cp < depth_at.len() && depth_at[next_cp].0 == steps {
            depth_at[next_cp].1 = Some(tree.depth(pos));
            next_cp += 1;
        }
    }

    Ok(WalkRun {
        beta: cfg.beta,
        position: pos,
        steps,
        hitting,
        excursions,
        depth_at,
        censored,
    })
}

/// Per-trap summary: (backbone depth, entries, completed durations).
pub fn excursion_stats(run: &WalkRun, tree: &Tree) -> Vec<(u32, u64, Vec<u64>)> {
    let mut out: Vec<(u32, u64, Vec<u64>)> = run
        .excursions
        .iter()
        .map(|(&(b, _), v)| (tree.depth(b), v.entries, v.durations.clone()))
        .collect();
    out.sort_by_key(|&(d, _, _)| d);
    out
}
