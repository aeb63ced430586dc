//! Reflected BSDEs with a lower obstacle.
//!
//! In discrete time the reflection process `K` is purely discontinuous: every
//! increment `dK_k` is a jump attached to the interval `(t_k, t_{k+1}]` and is
//! decided at the time-`t_k` node. The Skorokhod condition therefore becomes
//! the nodewise complementarity `dK_k (Y_k - xi_k) = 0`, and the continuous
//! part of `K` is identically zero.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::backward::{backward_solve, dynamics_defect};
use crate::error::{Error, Result};
use crate::generator::{freeze_generator, RbsdeData, ShiftTransform};
use crate::lattice::{AdaptedProcess, FiltrationTree, PredictableProcess, VectorProcess};
use crate::martingale::{estimate_m_lipschitz, l_norm_sq, log_l_norm_sq, log_s_norm_sq, log_sum_exp, s_norm_sq, BetaWeights, LipschitzSampling, MartingaleM};

/// Constant in the Picard-step a priori bound.
pub const PICARD_STEP_CONSTANT: f64 = 1158.0;
/// Default squared-norm tolerance of the Picard loop.
pub const DEFAULT_PICARD_TOL: f64 = 1e-18;
pub const DEFAULT_PICARD_MAX_ITER: usize = 200;
/// Tolerance for the nodewise solution invariants.
pub const INVARIANT_TOL: f64 = 1e-11;

/// `beta = 2 * 1158 * L^2 * (C_Q + 1)`, the weight that makes the Picard
/// map a 1/2-contraction in squared β-norm.
pub fn default_beta(lipschitz: f64, c_q: f64) -> f64 {
    2.0 * picard_step_scale(lipschitz, c_q)
}

/// `1158 * L^2 * (C_Q + 1)`.
pub(crate) fn picard_step_scale(lipschitz: f64, c_q: f64) -> f64 {
    PICARD_STEP_CONSTANT * lipschitz * lipschitz * (c_q + 1.0)
}

#[derive(Clone, Debug)]
pub struct RbsdeSolution {
    pub y: AdaptedProcess,
    pub z: VectorProcess,
    /// `dK` on `(t_k, t_{k+1}]`, stored at the left node.
    pub k_inc: PredictableProcess,
    /// `K_T` per leaf.
    pub k_total: Vec<f64>,
    /// Per-node dynamics defect against the generator path used to solve.
    pub residuals: AdaptedProcess,
}

/// Read access shared by single- and double-barrier solutions.
pub trait SolutionView {
    fn y(&self) -> &AdaptedProcess;
    fn z(&self) -> &VectorProcess;
    /// Net upward push per interval: `dK`, or `dL - dU`.
    fn net_push(&self) -> PredictableProcess;
}

impl SolutionView for RbsdeSolution {
    fn y(&self) -> &AdaptedProcess {
        &self.y
    }
    fn z(&self) -> &VectorProcess {
        &self.z
    }
    fn net_push(&self) -> PredictableProcess {
        self.k_inc.clone()
    }
}

impl RbsdeSolution {
    pub fn root_value(&self) -> f64 {
        self.y[0]
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.max_abs()
    }

    /// Adds `d` back to `Y`; `Z` and `K` are unchanged by the shift.
    pub fn unshift(mut self, d: &AdaptedProcess) -> Self {
        self.y = self.y.zip_with(d, |a, b| a + b);
        self
    }
}

/// Solves the reflected equation for a driver that does not depend on
/// `(y, z)`: `Y_N = eta`, `c_v = E_v[Y] + g_v dQ`, `Y_v = max(xi_v, c_v)`,
/// `dK_v = Y_v - c_v`. `Y` is the Snell envelope of the reward
/// `xi_tau + sum_{j < tau} g_j dQ_j` (with `eta` at the horizon).
pub fn solve_fixed_generator(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g_path: &PredictableProcess,
    eta: &[f64],
    xi: &AdaptedProcess,
) -> Result<RbsdeSolution> {
    solve_fixed_generator_shifted(tree, m, g_path, eta, xi, None)
}

/// [`solve_fixed_generator`] with a `D` process in the dynamics
/// `Y_{k+1} = Y_k - g dQ + Z . dM + dD - dK`.
pub fn solve_fixed_generator_shifted(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g_path: &PredictableProcess,
    eta: &[f64],
    xi: &AdaptedProcess,
    d: Option<&AdaptedProcess>,
) -> Result<RbsdeSolution> {
    if xi.len() != tree.len() {
        return Err(Error::ShapeMismatch("xi does not match the tree".into()));
    }
    for (&leaf, &e) in tree.leaves().iter().zip(eta) {
        if xi[leaf] > e {
            return Err(Error::ObstacleAboveTerminal {
                node: leaf,
                xi: xi[leaf],
                eta: e,
            });
        }
    }
    let out = backward_solve(tree, m, g_path, eta, d, |v, c| xi[v].max(c))?;
    let k_total = out.up.cumulative(tree).terminal(tree);
    Ok(RbsdeSolution {
        y: out.y,
        z: out.z,
        k_inc: out.up,
        k_total,
        residuals: out.residuals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkorokhodReport {
    /// `max |dK_v (Y_v - xi_v)|` over non-terminal nodes.
    pub max_complementarity: f64,
    /// `max (xi - Y)^+` over all nodes.
    pub max_dominance_violation: f64,
    /// Smallest increment (negative means `K` decreased).
    pub min_increment: f64,
}

impl SkorokhodReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_complementarity <= tol && self.max_dominance_violation <= tol && self.min_increment >= -tol
    }
}

pub fn check_skorokhod(tree: &FiltrationTree, sol: &RbsdeSolution, xi: &AdaptedProcess) -> SkorokhodReport {
    let mut report = SkorokhodReport {
        max_complementarity: 0.0,
        max_dominance_violation: 0.0,
        min_increment: 0.0,
    };
    for v in 0..tree.len() {
        report.max_dominance_violation = report.max_dominance_violation.max(xi[v] - sol.y[v]);
        if !tree.is_terminal(v) {
            let dk = sol.k_inc[v];
            report.max_complementarity = report.max_complementarity.max((dk * (sol.y[v] - xi[v])).abs());
            report.min_increment = report.min_increment.min(dk);
        }
    }
    report
}

/// All nodewise invariants of a single-barrier solution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub max_dynamics_defect: f64,
    pub skorokhod: SkorokhodReport,
}

impl InvariantReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_dynamics_defect <= tol && self.skorokhod.holds(tol)
    }
}

pub fn check_invariants(
    tree: &FiltrationTree,
    m: &MartingaleM,
    sol: &RbsdeSolution,
    g_path: &PredictableProcess,
    xi: &AdaptedProcess,
    d: Option<&AdaptedProcess>,
) -> InvariantReport {
    let zero = PredictableProcess::zeros(tree);
    let defect = dynamics_defect(tree, m, &sol.y, &sol.z, g_path, &sol.k_inc, &zero, d);
    InvariantReport {
        max_dynamics_defect: defect.max_abs(),
        skorokhod: check_skorokhod(tree, sol, xi),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Overrides `default_beta` when set.
    pub beta: Option<f64>,
    /// Sampling used to sanity-check the declared Lipschitz constant.
    pub lipschitz_check: Option<LipschitzSampling>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            tol: DEFAULT_PICARD_TOL,
            max_iter: DEFAULT_PICARD_MAX_ITER,
            beta: None,
            lipschitz_check: Some(LipschitzSampling::default()),
        }
    }
}

/// History of a Picard run.
///
/// `diffs[n]` is the squared β-norm `||Y^n - Y^{n-1}||_S^2 + ||Z^n - Z^{n-1}||_L^2`
/// with clock weights divided by `exp(beta C_Q)`; for large β the early
/// levels underflow there, so `log_diffs` keeps the exact natural log of the
/// unnormalized distance and the ratios are computed from it. `plain_diffs`
/// is the same distance with `beta = 0`. The loop stops once both `diffs`
/// and `plain_diffs` are below `tol` (the first implies nothing about the
/// early levels, the second bounds every level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardDiagnostics {
    pub beta_used: f64,
    pub tol: f64,
    pub diffs: Vec<f64>,
    pub log_diffs: Vec<f64>,
    pub plain_diffs: Vec<f64>,
    /// S²-norm of the change in cumulative net reflection `(L - U)` or `K`.
    pub reflection_diffs: Vec<f64>,
    /// Number of solves after the first one.
    pub iterations: usize,
    pub converged: bool,
    /// Dynamics defect of the returned solution under the unfrozen driver.
    pub fixed_point_defect: f64,
    /// Sampled lower bound on the m-Lipschitz constant, when checked.
    pub lipschitz_estimate: Option<f64>,
}

impl PicardDiagnostics {
    /// `diffs[n] / diffs[n-1]` for `n >= 1` (zero-based), skipping steps
    /// whose predecessor is already zero.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.log_diffs
            .windows(2)
            .filter(|w| w[0] > f64::NEG_INFINITY)
            .map(|w| (w[1] - w[0]).exp())
            .collect()
    }

    /// Ratios `diffs[n] / diffs[n-1]` for `n >= 2`, the ones the contraction
    /// bound is checked on (the first difference is measured from the
    /// arbitrary starting pair).
    pub fn late_ratios(&self) -> Vec<f64> {
        self.log_diffs
            .windows(2)
            .skip(1)
            .filter(|w| w[0] > f64::NEG_INFINITY)
            .map(|w| (w[1] - w[0]).exp())
            .collect()
    }

    pub fn max_ratio(&self) -> f64 {
        self.contraction_ratios().into_iter().fold(0.0, f64::max)
    }
}

/// Generic Picard loop: freeze the driver at the previous iterate, solve the
/// fixed-driver problem, repeat. The first iterate is `(D, 0)`, i.e. the zero
/// pair of the shifted problem.
pub(crate) fn picard_loop<S: SolutionView>(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g: &crate::generator::GeneratorSpec,
    d: &AdaptedProcess,
    opts: &PicardOptions,
    mut inner: impl FnMut(&PredictableProcess) -> Result<S>,
) -> Result<(S, PicardDiagnostics, PredictableProcess)> {
    if !(opts.tol > 0.0) {
        return Err(Error::BadParameters(format!("tol must be > 0, got {}", opts.tol)));
    }
    let c_q = tree.grid().c_q();
    let beta = opts.beta.unwrap_or_else(|| default_beta(g.lipschitz(), c_q));
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::BadParameters(format!("beta must be finite and >= 0, got {beta}")));
    }
    g.check_declared_independence(tree, m.dim())?;
    let lipschitz_estimate = opts.lipschitz_check.map(|s| estimate_m_lipschitz(tree, m, g, s));
    if let Some(est) = lipschitz_estimate {
        if est > g.lipschitz() * (1.0 + 1e-9) + 1e-12 {
            warn!(
                "declared Lipschitz constant {} is below the sampled lower bound {est}",
                g.lipschitz()
            );
        }
    }
    let plain = BetaWeights::new(0.0);

    let mut w = d.clone();
    let mut v = crate::generator::zero_vectors(tree, m.dim());
    let mut prev_push: Option<AdaptedProcess> = None;
    let mut diag = PicardDiagnostics {
        beta_used: beta,
        tol: opts.tol,
        diffs: Vec::new(),
        log_diffs: Vec::new(),
        plain_diffs: Vec::new(),
        reflection_diffs: Vec::new(),
        iterations: 0,
        converged: false,
        fixed_point_defect: f64::NAN,
        lipschitz_estimate,
    };
    let mut solves = 0usize;
    loop {
        let g_path = freeze_generator(tree, g, &w, &v);
        let sol = inner(&g_path)?;
        solves += 1;
        let dy = sol.y().zip_with(&w, |a, b| a - b);
        let dz: VectorProcess = sol.z().iter().zip(&v).map(|(a, b)| a - b).collect();
        let log_diff = log_sum_exp([log_s_norm_sq(tree, &dy, beta), log_l_norm_sq(tree, m, &dz, beta)]);
        let diff = (log_diff - beta * c_q).exp();
        let plain_diff = s_norm_sq(tree, &dy, plain) + l_norm_sq(tree, m, &dz, plain);
        let push = sol.net_push().cumulative(tree);
        if let Some(prev) = &prev_push {
            let delta = push.zip_with(prev, |a, b| a - b);
            diag.reflection_diffs.push(s_norm_sq(tree, &delta, plain));
        }
        debug!("picard solve {solves}: diff {diff:e}, plain {plain_diff:e}");
        diag.diffs.push(diff);
        diag.log_diffs.push(log_diff);
        diag.plain_diffs.push(plain_diff);
        diag.iterations = solves - 1;
        let done = solves >= 2 && diff <= opts.tol && plain_diff <= opts.tol;
        w = sol.y().clone();
        v = sol.z().clone();
        prev_push = Some(push);
        if done {
            diag.converged = true;
            let unfrozen = freeze_generator(tree, g, &w, &v);
            return Ok((sol, diag, unfrozen));
        }
        if solves > opts.max_iter {
            return Err(Error::NotConverged(Box::new(diag)));
        }
    }
}

/// Solves the reflected equation with an `m`-Lipschitz driver by Picard
/// iteration on fixed-driver problems. A nonzero `D` is handled directly in
/// the dynamics.
pub fn picard_solve(
    tree: &FiltrationTree,
    m: &MartingaleM,
    data: &RbsdeData,
    opts: &PicardOptions,
) -> Result<(RbsdeSolution, PicardDiagnostics)> {
    let d = (data.d_proc.max_abs() > 0.0).then_some(&data.d_proc);
    let (sol, mut diag, unfrozen) = picard_loop(tree, m, &data.g, &data.d_proc, opts, |g_path| {
        solve_fixed_generator_shifted(tree, m, g_path, &data.eta, &data.xi, d)
    })?;
    let zero = PredictableProcess::zeros(tree);
    diag.fixed_point_defect = dynamics_defect(tree, m, &sol.y, &sol.z, &unfrozen, &sol.k_inc, &zero, d).max_abs();
    Ok((sol, diag))
}

/// Removes `D` with the shift transform, solves, and shifts back.
pub fn solve_via_shift(
    tree: &FiltrationTree,
    m: &MartingaleM,
    data: &RbsdeData,
    opts: &PicardOptions,
) -> Result<(RbsdeSolution, PicardDiagnostics)> {
    let shifted = data.shift_transform(tree);
    let (sol, diag) = picard_solve(tree, m, &shifted, opts)?;
    Ok((sol.unshift(&data.d_proc), diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorSpec;
    use crate::martingale::attach_martingale;
    use crate::lattice::{build_tree, LevelBranching, TimeGrid};
    use nalgebra::DVector;

    fn t2() -> (FiltrationTree, MartingaleM) {
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let tree = build_tree(grid, &[LevelBranching::uniform(2), LevelBranching::uniform(2)]).unwrap();
        let s = 0.5f64.sqrt();
        let vals = [0.0, s, -s, 2.0 * s, 0.0, 0.0, -2.0 * s];
        let m = attach_martingale(&tree, vals.iter().map(|&x| DVector::from_element(1, x)).collect()).unwrap();
        (tree, m)
    }

    #[test]
    fn submartingale_obstacle_never_binds() {
        let (tree, m) = t2();
        let msq = m.component(0).map(|x| x * x);
        let eta = msq.terminal(&tree);
        let sol = solve_fixed_generator(&tree, &m, &PredictableProcess::zeros(&tree), &eta, &msq).unwrap();
        assert!((sol.root_value() - 1.0).abs() < 1e-14);
        for v in 0..tree.len() {
            let q = tree.grid().q(tree.level_of(v));
            assert!((sol.y[v] - (msq[v] + 1.0 - q)).abs() < 1e-14);
        }
        assert!(sol.k_inc.max_abs() < 1e-15);
        assert!(sol.max_residual() < 1e-14);
    }

    #[test]
    fn deterministic_obstacle_binds_everywhere() {
        let (tree, m) = t2();
        let xi = AdaptedProcess::from_fn(&tree, |v| [1.0, 0.5, 0.0][tree.level_of(v)]);
        let sol = solve_fixed_generator(&tree, &m, &PredictableProcess::zeros(&tree), &[0.0; 4], &xi).unwrap();
        assert_eq!(sol.root_value(), 1.0);
        assert_eq!(sol.k_inc[0], 0.5);
        assert_eq!(sol.k_inc[1], 0.5);
        assert_eq!(sol.k_inc[2], 0.5);
        assert_eq!(sol.k_total, vec![1.0; 4]);
        for v in tree.interior() {
            assert_eq!(sol.y[v], xi[v]);
        }
        let rep = check_skorokhod(&tree, &sol, &xi);
        assert!(rep.holds(1e-15));
    }

    #[test]
    fn inactive_obstacle_gives_plain_bsde() {
        let (tree, m) = t2();
        let xi = AdaptedProcess::constant(&tree, -1e6);
        let g = PredictableProcess::from_fn(&tree, |v| 0.3 * v as f64 - 0.5);
        let eta = vec![1.0, -2.0, 0.5, 3.0];
        let sol = solve_fixed_generator(&tree, &m, &g, &eta, &xi).unwrap();
        assert_eq!(sol.k_inc.max_abs(), 0.0);
        let plain = tree.backward_closure(&eta, |v| g[v] * tree.dq_after(v));
        for v in 0..tree.len() {
            assert!((plain[v] - sol.y[v]).abs() < 1e-14);
        }
    }

    #[test]
    fn obstacle_above_terminal_is_rejected() {
        let (tree, m) = t2();
        let xi = AdaptedProcess::constant(&tree, 1.0);
        let err = solve_fixed_generator(&tree, &m, &PredictableProcess::zeros(&tree), &[0.0; 4], &xi).unwrap_err();
        assert!(matches!(err, Error::ObstacleAboveTerminal { .. }));
    }

    #[test]
    fn skorokhod_reports_constructed_violations() {
        let (tree, m) = t2();
        let xi = AdaptedProcess::from_fn(&tree, |v| [1.0, 0.5, 0.0][tree.level_of(v)]);
        let mut sol = solve_fixed_generator(&tree, &m, &PredictableProcess::zeros(&tree), &[0.0; 4], &xi).unwrap();
        sol.y[1] += 0.25;
        let rep = check_skorokhod(&tree, &sol, &xi);
        assert!((rep.max_complementarity - 0.125).abs() < 1e-15);
        sol.y[1] -= 0.5;
        let rep = check_skorokhod(&tree, &sol, &xi);
        assert!((rep.max_dominance_violation - 0.25).abs() < 1e-15);
    }

    #[test]
    fn default_beta_values() {
        assert_eq!(default_beta(0.5, 1.0), 1158.0);
        assert_eq!(default_beta(1.0, 1.0), 4632.0);
    }

    #[test]
    fn fixed_generator_converges_in_one_iteration() {
        let (tree, m) = t2();
        let data = RbsdeData::without_shift(&tree, GeneratorSpec::constant(0.7), m.component(0).terminal(&tree),
            AdaptedProcess::from_fn(&tree, |v| if tree.is_terminal(v) { -2.0 } else { -0.2 })).unwrap();
        let (_, diag) = picard_solve(&tree, &m, &data, &PicardOptions::default()).unwrap();
        assert_eq!(diag.iterations, 1);
        assert!(diag.converged);
        assert_eq!(diag.diffs[1], 0.0);
    }

    #[test]
    fn linear_driver_matches_scalar_fixed_points() {
        let (tree, m) = t2();
        let g = GeneratorSpec::affine(0.0, 0.5, vec![0.0]);
        let eta = m.component(0).terminal(&tree);
        let data = RbsdeData::without_shift(&tree, g, eta.clone(), AdaptedProcess::constant(&tree, -1e6)).unwrap();
        let opts = PicardOptions {
            tol: 1e-24,
            ..Default::default()
        };
        let (sol, diag) = picard_solve(&tree, &m, &data, &opts).unwrap();
        assert!(diag.converged);
        // Oracle: iterate y <- E[Y_next] + 0.5 y dQ to its scalar fixed point
        // node by node, backward.
        let mut oracle = vec![0.0; tree.len()];
        for (&leaf, &e) in tree.leaves().iter().zip(&eta) {
            oracle[leaf] = e;
        }
        for k in (0..2).rev() {
            for &v in tree.level(k) {
                let cond: f64 = tree.children(v).iter().map(|&c| 0.5 * oracle[c]).sum();
                let mut y = 0.0;
                for _ in 0..200 {
                    y = cond + 0.5 * y * 0.5;
                }
                oracle[v] = y;
                assert!((y - cond / (1.0 - 0.25)).abs() < 1e-14);
            }
        }
        for v in 0..tree.len() {
            assert!((sol.y[v] - oracle[v]).abs() < 1e-10, "node {v}");
        }
        assert!(diag.fixed_point_defect <= 100.0 * opts.tol.sqrt());
        for r in diag.contraction_ratios() {
            assert!(r <= 0.6, "{r}");
        }
    }

    #[test]
    fn max_iter_is_enforced() {
        let (tree, m) = t2();
        let g = GeneratorSpec::affine(0.0, 0.5, vec![0.0]);
        let data = RbsdeData::without_shift(&tree, g, vec![1.0, 0.0, 0.0, -1.0], AdaptedProcess::constant(&tree, -5.0))
            .unwrap();
        let opts = PicardOptions {
            max_iter: 1,
            ..Default::default()
        };
        match picard_solve(&tree, &m, &data, &opts) {
            Err(Error::NotConverged(diag)) => {
                assert_eq!(diag.diffs.len(), 2);
                assert!(!diag.converged);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }
}
