//! Exhaustive optimal stopping and Dynkin game values on small trees.
//!
//! Nothing here uses the backward recursion: every stopping rule is
//! enumerated and its expected reward summed path by path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{count_stopping_times, visit_stopping_frontiers, AdaptedProcess, FiltrationTree, NodeId};
use crate::lattice::{PredictableProcess, StoppingTime};

/// Default cap on enumerated objects (stopping rules, or pairs of them).
pub const DEFAULT_ORACLE_CAP: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SnellOracle {
    pub value: f64,
    pub stopping: StoppingTime,
    pub enumerated: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynkinOracle {
    /// `max_tau min_sigma E[R(tau, sigma)]`.
    pub lower: f64,
    /// `min_sigma max_tau E[R(tau, sigma)]`.
    pub upper: f64,
    /// `(tau, sigma)` when `lower` and `upper` agree to `SADDLE_TOL`.
    pub saddle: Option<(StoppingTime, StoppingTime)>,
    pub enumerated: u128,
}

/// Relative tolerance for declaring a saddle point.
pub const SADDLE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub dp: f64,
    pub oracle_lower: f64,
    pub oracle_upper: f64,
    pub discrepancy: f64,
}

/// `G_v = sum_{j < level(v)} g_j dQ_j` along the path to `v`.
fn accumulated_driver(tree: &FiltrationTree, g_path: &PredictableProcess) -> Vec<f64> {
    let mut acc = vec![0.0; tree.len()];
    for v in 1..tree.len() {
        let p = tree.parent(v).expect("non-root node has a parent");
        acc[v] = acc[p] + g_path[p] * tree.dq_after(p);
    }
    acc
}

fn check_shapes(tree: &FiltrationTree, g_path: &PredictableProcess, obstacles: &[&AdaptedProcess], eta: &[f64]) -> Result<()> {
    if g_path.len() != tree.len() || obstacles.iter().any(|o| o.len() != tree.len()) {
        return Err(Error::ShapeMismatch("oracle inputs do not match the tree".into()));
    }
    if eta.len() != tree.leaves().len() {
        return Err(Error::ShapeMismatch("eta does not match the leaves".into()));
    }
    Ok(())
}

/// Reward collected by stopping at `v`: accumulated driver plus `xi_v`, or
/// `eta` at a leaf.
fn stop_rewards(tree: &FiltrationTree, g_path: &PredictableProcess, obstacle: &AdaptedProcess, eta: &[f64]) -> Vec<f64> {
    let acc = accumulated_driver(tree, g_path);
    let mut r: Vec<f64> = (0..tree.len()).map(|v| acc[v] + obstacle[v]).collect();
    for (&leaf, &e) in tree.leaves().iter().zip(eta) {
        r[leaf] = acc[leaf] + e;
    }
    r
}

/// `max_tau E[sum_{j < tau} g_j dQ_j + xi_tau]` over all stopping rules,
/// with `eta` as the reward at the horizon. Ties go to the rule visited
/// first (earliest stopping).
pub fn brute_force_snell(
    tree: &FiltrationTree,
    g_path: &PredictableProcess,
    xi: &AdaptedProcess,
    eta: &[f64],
    cap: u128,
) -> Result<SnellOracle> {
    check_shapes(tree, g_path, &[xi], eta)?;
    let reward = stop_rewards(tree, g_path, xi, eta);
    let mut best = f64::NEG_INFINITY;
    let mut best_frontier = Vec::new();
    let enumerated = visit_stopping_frontiers(tree, cap, |frontier| {
        let value: f64 = frontier.iter().map(|&u| tree.reach(u) * reward[u]).sum();
        if value > best {
            best = value;
            best_frontier = frontier.to_vec();
        }
    })?;
    Ok(SnellOracle {
        value: best,
        stopping: StoppingTime::from_frontier(tree, &best_frontier),
        enumerated,
    })
}

/// Per-leaf stopping levels of every rule, in visiting order.
fn leaf_levels(tree: &FiltrationTree, cap: u128) -> Result<(Vec<Vec<u8>>, Vec<Vec<NodeId>>)> {
    let leaves = tree.leaves();
    let mut below: Vec<Vec<usize>> = vec![Vec::new(); tree.len()];
    for (i, &leaf) in leaves.iter().enumerate() {
        for v in tree.path(leaf) {
            below[v].push(i);
        }
    }
    let mut levels = Vec::new();
    let mut frontiers = Vec::new();
    visit_stopping_frontiers(tree, cap, |frontier| {
        let mut lv = vec![0u8; leaves.len()];
        for &u in frontier {
            let k = tree.level_of(u) as u8;
            for &i in &below[u] {
                lv[i] = k;
            }
        }
        levels.push(lv);
        frontiers.push(frontier.to_vec());
    })?;
    Ok((levels, frontiers))
}

/// Lower and upper values of the Dynkin game with payoff
/// `R(tau, sigma) = sum_{j < tau ^ sigma} g_j dQ_j + xi_tau 1{tau <= sigma, tau < N}
///  + zeta_sigma 1{sigma < tau} + eta 1{tau = sigma = N}`.
///
/// The maximizer stops with `tau` and wins ties. `cap` bounds the number of
/// `(tau, sigma)` pairs.
pub fn brute_force_dynkin(
    tree: &FiltrationTree,
    g_path: &PredictableProcess,
    xi: &AdaptedProcess,
    zeta: &AdaptedProcess,
    eta: &[f64],
    cap: u128,
) -> Result<DynkinOracle> {
    check_shapes(tree, g_path, &[xi, zeta], eta)?;
    let count = count_stopping_times(tree);
    let pairs = count.saturating_mul(count);
    if pairs > cap {
        return Err(Error::TooLarge { count: pairs, cap });
    }
    let n = tree.depth();
    let leaves = tree.leaves();
    let paths: Vec<Vec<NodeId>> = leaves.iter().map(|&l| tree.path(l)).collect();
    let lower_reward = stop_rewards(tree, g_path, xi, eta);
    let upper_reward = stop_rewards(tree, g_path, zeta, eta);
    let reach: Vec<f64> = leaves.iter().map(|&l| tree.reach(l)).collect();
    let (levels, frontiers) = leaf_levels(tree, u128::MAX)?;

    let matrix: Vec<Vec<f64>> = levels
        .par_iter()
        .map(|tau| {
            levels
                .iter()
                .map(|sigma| {
                    (0..leaves.len())
                        .map(|i| {
                            let (t, s) = (tau[i] as usize, sigma[i] as usize);
                            let r = if t <= s && t < n {
                                lower_reward[paths[i][t]]
                            } else if s < t {
                                upper_reward[paths[i][s]]
                            } else {
                                lower_reward[leaves[i]]
                            };
                            reach[i] * r
                        })
                        .sum()
                })
                .collect()
        })
        .collect();

    let mut lower = f64::NEG_INFINITY;
    let mut tau_star = 0;
    for (i, row) in matrix.iter().enumerate() {
        let row_min = row.iter().copied().fold(f64::INFINITY, f64::min);
        if row_min > lower {
            lower = row_min;
            tau_star = i;
        }
    }
    let mut upper = f64::INFINITY;
    let mut sigma_star = 0;
    for j in 0..levels.len() {
        let col_max = matrix.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if col_max < upper {
            upper = col_max;
            sigma_star = j;
        }
    }
    let saddle = ((upper - lower).abs() <= SADDLE_TOL * (1.0 + lower.abs())).then(|| {
        (
            StoppingTime::from_frontier(tree, &frontiers[tau_star]),
            StoppingTime::from_frontier(tree, &frontiers[sigma_star]),
        )
    });
    Ok(DynkinOracle {
        lower,
        upper,
        saddle,
        enumerated: pairs,
    })
}
