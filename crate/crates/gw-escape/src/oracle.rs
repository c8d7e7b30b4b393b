//! Exact small-instance ground truth: absorption probabilities and expected
//! absorption times on finite trees by linear solves, plus exhaustive
//! enumeration of small height-conditioned tree distributions.

use crate::distributions::OffspringLaw;
use crate::trees::Tree;
use crate::walk::kernel;
use nalgebra::{DMatrix, DVector};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

const MAX_STATES: usize = 10_000;
const DENSE_LIMIT: usize = 2_000;
const RESIDUAL_TOL: f64 = 1e-12;
const SHAPE_GUARD: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("malformed absorption problem: {0}")]
    InvalidProblem(String),
    #[error("linear system is singular or did not meet the residual bound")]
    Singular,
    #[error("shape enumeration exceeded {SHAPE_GUARD} shapes")]
    ExplosionGuard,
}

pub struct AbsorptionProblem<'a> {
    pub tree: &'a Tree,
    pub beta: f64,
    pub target: HashSet<u32>,
    pub forbidden: HashSet<u32>,
}

impl<'a> AbsorptionProblem<'a> {
    pub fn new(
        tree: &'a Tree,
        beta: f64,
        target: HashSet<u32>,
        forbidden: HashSet<u32>,
    ) -> Result<Self, OracleError> {
        if beta <= 1.0 {
            return Err(OracleError::InvalidProblem(format!(
                "bias must exceed 1, got {beta}"
            )));
        }
        if target.is_empty() && forbidden.is_empty() {
            return Err(OracleError::InvalidProblem(
                "no absorbing states".into(),
            ));
        }
        if tree.num_nodes() > MAX_STATES {
            return Err(OracleError::InvalidProblem(format!(
                "{} states exceed the {MAX_STATES}-state limit",
                tree.num_nodes()
            )));
        }
        Ok(Self {
            tree,
            beta,
            target,
            forbidden,
        })
    }

    fn absorbing(&self, id: u32) -> bool {
        self.target.contains(&id) || self.forbidden.contains(&id)
    }

    /// Transient states in id order plus the reverse index map.
    fn transient(&self) -> (Vec<u32>, HashMap<u32, usize>) {
        let ids: Vec<u32> = (0..self.tree.num_nodes() as u32)
            .filter(|&id| !self.absorbing(id))
            .collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        (ids, index)
    }

    /// Solve (I - Q) x = b over the transient states. `b` is the per-state
    /// one-step mass into `target` for hit probabilities, or all ones for
    /// expected absorption times.
    fn solve(&self, times: bool) -> Result<HashMap<u32, f64>, OracleError> {
        let (ids, index) = self.transient();
        let n = ids.len();
        // row i: (transient neighbor column, probability)
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut b = vec![0.0f64; n];
        for (i, &id) in ids.iter().enumerate() {
            let mut row = Vec::new();
            for (nb, p) in kernel(self.tree, id, self.beta) {
                if let Some(&j) = index.get(&nb) {
                    row.push((j, p));
                } else if self.target.contains(&nb) {
                    b[i] += p;
                }
            }
            if times {
                b[i] = 1.0;
            }
            rows.push(row);
        }
        let x = if n <= DENSE_LIMIT {
            let mut m = DMatrix::<f64>::identity(n, n);
            for (i, row) in rows.iter().enumerate() {
                for &(j, p) in row {
                    m[(i, j)] -= p;
                }
            }
            let rhs = DVector::from_vec(b.clone());
            let sol = m.lu().solve(&rhs).ok_or(OracleError::Singular)?;
            sol.iter().copied().collect::<Vec<f64>>()
        } else {
            gauss_seidel(&rows, &b)?
        };
        // residual check regardless of method
        let mut worst = 0.0f64;
        for (i, row) in rows.iter().enumerate() {
            let qx: f64 = row.iter().map(|&(j, p)| p * x[j]).sum();
            worst = worst.max((x[i] - qx - b[i]).abs());
        }
        if !worst.is_finite() || worst > RESIDUAL_TOL {
            return Err(OracleError::Singular);
        }
        let mut out: HashMap<u32, f64> = ids.iter().copied().zip(x).collect();
        for &t in &self.target {
            out.insert(t, if times { 0.0 } else { 1.0 });
        }
        for &f in &self.forbidden {
            out.insert(f, 0.0);
        }
        Ok(out)
    }
}

fn gauss_seidel(rows: &[Vec<(usize, f64)>], b: &[f64]) -> Result<Vec<f64>, OracleError> {
    let n = rows.len();
    let mut x = vec![0.0f64; n];
    for _ in 0..1_000_000 {
        let mut delta = 0.0f64;
        for i in 0..n {
            let mut acc = b[i];
            let mut diag = 1.0;
            for &(j, p) in &rows[i] {
                if j == i {
                    diag -= p;
                } else {
                    acc += p * x[j];
                }
            }
            let next = acc / diag;
            delta = delta.max((next - x[i]).abs());
            x[i] = next;
        }
        if delta < RESIDUAL_TOL / 10.0 {
            return Ok(x);
        }
    }
    Err(OracleError::Singular)
}

/// P(hit `target` before `forbidden`) from every state.
pub fn exact_hit_probability(p: &AbsorptionProblem) -> Result<HashMap<u32, f64>, OracleError> {
    p.solve(false)
}

/// Expected steps to absorption from every state. Only meaningful when
/// absorption is certain (`forbidden` counts as absorption too).
pub fn exact_expected_hitting_time(
    p: &AbsorptionProblem,
) -> Result<HashMap<u32, f64>, OracleError> {
    p.solve(true)
}

/// Expected first return time to the root: one step out to a uniform child,
/// then the exact expected hitting time of the root.
pub fn exact_expected_return_to_root(tree: &Tree, beta: f64) -> Result<f64, OracleError> {
    let children = tree.children(tree.root());
    if children.is_empty() {
        return Err(OracleError::InvalidProblem(
            "root has no children: return time undefined".into(),
        ));
    }
    let problem = AbsorptionProblem::new(
        tree,
        beta,
        HashSet::from([tree.root()]),
        HashSet::new(),
    )?;
    let t = exact_expected_hitting_time(&problem)?;
    let mean_child: f64 = children.iter().map(|c| t[c]).sum::<f64>() / children.len() as f64;
    Ok(1.0 + mean_child)
}

/// Canonical encoding of the (ordered) subtree below `node`:
/// `(` child encodings `)`. Children must be materialized.
pub fn encode_shape(tree: &Tree, node: u32) -> String {
    let mut s = String::from("(");
    for c in tree.children(node) {
        s.push_str(&encode_shape(tree, c));
    }
    s.push(')');
    s
}

/// All ordered tree shapes of height <= `cap` with their unconditioned
/// probabilities, as (encoding, height, probability).
fn shapes_up_to(
    pmf: &[f64],
    cap: u32,
    count: &mut u64,
) -> Result<Vec<(String, u32, f64)>, OracleError> {
    let leaf = ("()".to_string(), 0u32, pmf[0]);
    if cap == 0 {
        return Ok(vec![leaf]);
    }
    let sub = shapes_up_to(pmf, cap - 1, count)?;
    let mut out = vec![leaf];
    for (k, &pk) in pmf.iter().enumerate().skip(1) {
        if pk == 0.0 {
            continue;
        }
        // ordered k-tuples of subtrees of height <= cap-1
        let mut picks = vec![0usize; k];
        loop {
            *count += 1;
            if *count > SHAPE_GUARD {
                return Err(OracleError::ExplosionGuard);
            }
            let mut enc = String::from("(");
            let mut h = 0u32;
            let mut prob = pk;
            for &i in &picks {
                let (e, sh, sp) = &sub[i];
                enc.push_str(e);
                h = h.max(sh + 1);
                prob *= sp;
            }
            enc.push(')');
            out.push((enc, h, prob));
            // next tuple
            let mut pos = k;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                picks[pos] += 1;
                if picks[pos] < sub.len() {
                    break;
                }
                picks[pos] = 0;
            }
            if picks.iter().all(|&i| i == 0) {
                break;
            }
        }
    }
    Ok(out)
}

/// Exact distribution over ordered tree shapes conditioned on height
/// exactly `h`, for a finite-support offspring law with `h <= 3`.
pub fn enumerate_height_conditioned(
    law: &OffspringLaw,
    h: u32,
) -> Result<HashMap<String, f64>, OracleError> {
    let kmax = law.support_upper().ok_or_else(|| {
        OracleError::InvalidProblem("enumeration needs a finite-support law".into())
    })?;
    let pmf: Vec<f64> = (0..=kmax).map(|k| law.pmf(k)).collect();
    if h > 3 {
        return Err(OracleError::InvalidProblem(format!(
            "height {h} too large to enumerate"
        )));
    }
    let mut count = 0u64;
    let all = shapes_up_to(&pmf, h, &mut count)?;
    let mut dist: HashMap<String, f64> = HashMap::new();
    let mut total = 0.0;
    for (enc, height, prob) in all {
        if height == h {
            *dist.entry(enc).or_insert(0.0) += prob;
            total += prob;
        }
    }
    if total <= 0.0 {
        return Err(OracleError::InvalidProblem(format!(
            "height {h} has probability zero under this law"
        )));
    }
    for v in dist.values_mut() {
        *v /= total;
    }
    Ok(dist)
}
