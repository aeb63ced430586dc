//! Doubly reflected BSDEs.
//!
//! As in the single-barrier case both reflection processes are pure jump in
//! discrete time. `dL_k` and `dU_k` sit at the left node of `(t_k, t_{k+1}]`
//! and at most one of them is nonzero per node.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::backward::{backward_solve, dynamics_defect};
use crate::error::{Error, Result};
use crate::generator::{DrbsdeData, ShiftTransform};
use crate::lattice::{AdaptedProcess, FiltrationTree, NodeId, PredictableProcess, VectorProcess};
use crate::martingale::MartingaleM;
use crate::rbsde::{picard_loop, PicardDiagnostics, PicardOptions, SolutionView};

pub const DEFAULT_IJ_TOL: f64 = 1e-9;
pub const DEFAULT_IJ_MAX_ITER: usize = 500;
/// Slack allowed when checking that I/J iterates never decrease.
pub const MONOTONICITY_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct DrbsdeSolution {
    pub y: AdaptedProcess,
    pub z: VectorProcess,
    pub l_inc: PredictableProcess,
    pub u_inc: PredictableProcess,
    pub residuals: AdaptedProcess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActiveBarrier {
    None,
    Lower,
    Upper,
}

impl ActiveBarrier {
    pub fn as_str(self) -> &'static str {
        match self {
            ActiveBarrier::None => "none",
            ActiveBarrier::Lower => "lower",
            ActiveBarrier::Upper => "upper",
        }
    }
}

impl SolutionView for DrbsdeSolution {
    fn y(&self) -> &AdaptedProcess {
        &self.y
    }
    fn z(&self) -> &VectorProcess {
        &self.z
    }
    fn net_push(&self) -> PredictableProcess {
        self.l_inc.zip_with(&self.u_inc, |l, u| l - u)
    }
}

impl DrbsdeSolution {
    pub fn root_value(&self) -> f64 {
        self.y[0]
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.max_abs()
    }

    pub fn active_barrier(&self, v: NodeId) -> ActiveBarrier {
        if self.l_inc[v] > 0.0 {
            ActiveBarrier::Lower
        } else if self.u_inc[v] > 0.0 {
            ActiveBarrier::Upper
        } else {
            ActiveBarrier::None
        }
    }

    pub fn unshift(mut self, d: &AdaptedProcess) -> Self {
        self.y = self.y.zip_with(d, |a, b| a + b);
        self
    }
}

fn check_order(tree: &FiltrationTree, eta: &[f64], xi: &AdaptedProcess, zeta: &AdaptedProcess) -> Result<()> {
    if xi.len() != tree.len() || zeta.len() != tree.len() {
        return Err(Error::ShapeMismatch("obstacles do not match the tree".into()));
    }
    for v in 0..tree.len() {
        if xi[v] > zeta[v] {
            return Err(Error::ObstacleOrderViolation {
                node: v,
                lower: xi[v],
                upper: zeta[v],
            });
        }
    }
    for (&leaf, &e) in tree.leaves().iter().zip(eta) {
        if xi[leaf] > e {
            return Err(Error::ObstacleAboveTerminal {
                node: leaf,
                xi: xi[leaf],
                eta: e,
            });
        }
        if e > zeta[leaf] {
            return Err(Error::ObstacleOrderViolation {
                node: leaf,
                lower: e,
                upper: zeta[leaf],
            });
        }
    }
    Ok(())
}

/// Backward DP `Y_v = min(zeta_v, max(xi_v, c_v))` with
/// `c_v = E_v[Y] + g_v dQ`, `dL = (Y - c)^+`, `dU = (c - Y)^+`.
pub fn solve_fixed_generator_dr(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g_path: &PredictableProcess,
    eta: &[f64],
    xi: &AdaptedProcess,
    zeta: &AdaptedProcess,
) -> Result<DrbsdeSolution> {
    solve_fixed_generator_dr_shifted(tree, m, g_path, eta, xi, zeta, None)
}

pub fn solve_fixed_generator_dr_shifted(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g_path: &PredictableProcess,
    eta: &[f64],
    xi: &AdaptedProcess,
    zeta: &AdaptedProcess,
    d: Option<&AdaptedProcess>,
) -> Result<DrbsdeSolution> {
    check_order(tree, eta, xi, zeta)?;
    let out = backward_solve(tree, m, g_path, eta, d, |v, c| zeta[v].min(xi[v].max(c)))?;
    Ok(DrbsdeSolution {
        y: out.y,
        z: out.z,
        l_inc: out.up,
        u_inc: out.down,
        residuals: out.residuals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrInvariantReport {
    pub max_dynamics_defect: f64,
    /// `max((xi - Y)^+, (Y - zeta)^+)`.
    pub max_sandwich_violation: f64,
    pub max_lower_complementarity: f64,
    pub max_upper_complementarity: f64,
    /// `max dL * dU`.
    pub max_singularity: f64,
    pub min_increment: f64,
}

impl DrInvariantReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_dynamics_defect <= tol
            && self.max_sandwich_violation <= tol
            && self.max_lower_complementarity <= tol
            && self.max_upper_complementarity <= tol
            && self.max_singularity <= tol
            && self.min_increment >= -tol
    }
}

pub fn check_dr_invariants(
    tree: &FiltrationTree,
    m: &MartingaleM,
    sol: &DrbsdeSolution,
    g_path: &PredictableProcess,
    xi: &AdaptedProcess,
    zeta: &AdaptedProcess,
    d: Option<&AdaptedProcess>,
) -> DrInvariantReport {
    let defect = dynamics_defect(tree, m, &sol.y, &sol.z, g_path, &sol.l_inc, &sol.u_inc, d);
    let mut r = DrInvariantReport {
        max_dynamics_defect: defect.max_abs(),
        max_sandwich_violation: 0.0,
        max_lower_complementarity: 0.0,
        max_upper_complementarity: 0.0,
        max_singularity: 0.0,
        min_increment: 0.0,
    };
    for v in 0..tree.len() {
        r.max_sandwich_violation = r.max_sandwich_violation.max(xi[v] - sol.y[v]).max(sol.y[v] - zeta[v]);
        if tree.is_terminal(v) {
            continue;
        }
        let (l, u) = (sol.l_inc[v], sol.u_inc[v]);
        r.max_lower_complementarity = r.max_lower_complementarity.max((l * (sol.y[v] - xi[v])).abs());
        r.max_upper_complementarity = r.max_upper_complementarity.max((u * (zeta[v] - sol.y[v])).abs());
        r.max_singularity = r.max_singularity.max((l * u).abs());
        r.min_increment = r.min_increment.min(l).min(u);
    }
    r
}

/// `E_t[eta + sum_{j >= k} g_j dQ_j]`.
pub fn terminal_closure(tree: &FiltrationTree, g_path: &PredictableProcess, eta: &[f64]) -> AdaptedProcess {
    tree.backward_closure(eta, |v| g_path[v] * tree.dq_after(v))
}

/// `xi^g = xi - E_t[eta + sum g dQ]` and the same for `zeta`, with the
/// terminal values replaced by `eta` (so both vanish at the horizon).
pub fn shifted_obstacles(
    tree: &FiltrationTree,
    g_path: &PredictableProcess,
    xi: &AdaptedProcess,
    zeta: &AdaptedProcess,
    eta: &[f64],
) -> (AdaptedProcess, AdaptedProcess) {
    let closure = terminal_closure(tree, g_path, eta);
    let shift = |x: &AdaptedProcess| {
        AdaptedProcess::from_fn(tree, |v| if tree.is_terminal(v) { 0.0 } else { x[v] - closure[v] })
    };
    (shift(xi), shift(zeta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IjState {
    pub i_proc: AdaptedProcess,
    pub j_proc: AdaptedProcess,
    pub k: usize,
    pub sup_delta: f64,
    pub converged: bool,
}

impl IjState {
    pub fn zero(tree: &FiltrationTree) -> Self {
        IjState {
            i_proc: AdaptedProcess::zeros(tree),
            j_proc: AdaptedProcess::zeros(tree),
            k: 0,
            sup_delta: 0.0,
            converged: false,
        }
    }
}

/// Snell envelope of `reward` with zero driver and zero terminal value.
fn snell(tree: &FiltrationTree, reward: &AdaptedProcess) -> AdaptedProcess {
    let mut s = AdaptedProcess::zeros(tree);
    for k in (0..tree.depth()).rev() {
        for &v in tree.level(k) {
            s[v] = reward[v].max(tree.expect_children(v, |c| s[c]));
        }
    }
    s
}

fn check_monotone(old: &AdaptedProcess, new: &AdaptedProcess) -> Result<()> {
    for (v, (&a, &b)) in old.iter().zip(new.iter()).enumerate() {
        if b < a - MONOTONICITY_TOL * (1.0 + a.abs()) {
            return Err(Error::MonotonicityViolation { node: v, amount: a - b });
        }
    }
    Ok(())
}

/// `I^{k+1} = Snell(J^k + xi^g)`, `J^{k+1} = Snell(I^k - zeta^g)` from
/// `I^0 = J^0 = 0` until the largest nodewise change is at most `tol`.
///
/// Fails with `IjNotConverged` (carrying the last state) after `max_iter`
/// steps.
pub fn iterate_ij(
    tree: &FiltrationTree,
    xi_g: &AdaptedProcess,
    zeta_g: &AdaptedProcess,
    tol: f64,
    max_iter: usize,
) -> Result<IjState> {
    if xi_g.len() != tree.len() || zeta_g.len() != tree.len() {
        return Err(Error::ShapeMismatch("shifted obstacles do not match the tree".into()));
    }
    let mut state = IjState::zero(tree);
    let mut last_delta = f64::NAN;
    while state.k < max_iter {
        let i_next = snell(tree, &state.j_proc.zip_with(xi_g, |j, x| j + x));
        let j_next = snell(tree, &state.i_proc.zip_with(zeta_g, |i, z| i - z));
        check_monotone(&state.i_proc, &i_next)?;
        check_monotone(&state.j_proc, &j_next)?;
        let delta = i_next
            .iter()
            .zip(state.i_proc.iter())
            .chain(j_next.iter().zip(state.j_proc.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        state.i_proc = i_next;
        state.j_proc = j_next;
        state.k += 1;
        state.sup_delta = delta;
        if last_delta > 0.0 && delta > 0.0 {
            debug!("I/J step {}: sup delta {delta:e}, factor {:.4}", state.k, delta / last_delta);
        }
        last_delta = delta;
        if delta <= tol {
            state.converged = true;
            return Ok(state);
        }
    }
    warn!("I/J iteration stopped after {} steps with sup delta {:e}", state.k, state.sup_delta);
    Err(Error::IjNotConverged(Box::new(state)))
}

/// `I - J + E_t[eta + sum g dQ]`.
pub fn assemble_ybar(tree: &FiltrationTree, ij: &IjState, g_path: &PredictableProcess, eta: &[f64]) -> AdaptedProcess {
    let closure = terminal_closure(tree, g_path, eta);
    AdaptedProcess::from_fn(tree, |v| ij.i_proc[v] - ij.j_proc[v] + closure[v])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MokobodzkiReport {
    pub h: AdaptedProcess,
    pub h_prime: AdaptedProcess,
    pub holds: bool,
    /// First failing node and the failed condition.
    pub violation: Option<(NodeId, String)>,
}

/// Builds `H = E_t[Y_T^+ + sum (dL + g^+ dQ)]` and
/// `H' = E_t[Y_T^- + sum (dU + g^- dQ)]` and checks that both are
/// nonnegative supermartingales with `xi <= H - H' <= zeta`.
pub fn check_mokobodzki(
    tree: &FiltrationTree,
    sol: &DrbsdeSolution,
    g_path: &PredictableProcess,
    xi: &AdaptedProcess,
    zeta: &AdaptedProcess,
    tol: f64,
) -> MokobodzkiReport {
    let y_t = sol.y.terminal(tree);
    let pos: Vec<f64> = y_t.iter().map(|y| y.max(0.0)).collect();
    let neg: Vec<f64> = y_t.iter().map(|y| (-y).max(0.0)).collect();
    let h = tree.backward_closure(&pos, |v| sol.l_inc[v] + g_path[v].max(0.0) * tree.dq_after(v));
    let h_prime = tree.backward_closure(&neg, |v| sol.u_inc[v] + (-g_path[v]).max(0.0) * tree.dq_after(v));
    let mut violation = None;
    for v in 0..tree.len() {
        let fail = |what: &str| Some((v, what.to_string()));
        violation = if !tree.is_terminal(v) && h[v] < tree.expect_children(v, |c| h[c]) - tol {
            fail("H is not a supermartingale")
        } else if !tree.is_terminal(v) && h_prime[v] < tree.expect_children(v, |c| h_prime[c]) - tol {
            fail("H' is not a supermartingale")
        } else if h[v] < -tol {
            fail("H is negative")
        } else if h_prime[v] < -tol {
            fail("H' is negative")
        } else if h[v] - h_prime[v] < xi[v] - tol {
            fail("H - H' is below xi")
        } else if h[v] - h_prime[v] > zeta[v] + tol {
            fail("H - H' is above zeta")
        } else {
            None
        };
        if violation.is_some() {
            break;
        }
    }
    MokobodzkiReport {
        h,
        h_prime,
        holds: violation.is_none(),
        violation,
    }
}

/// Picard iteration on fixed-driver double-barrier problems.
pub fn picard_solve_dr(
    tree: &FiltrationTree,
    m: &MartingaleM,
    data: &DrbsdeData,
    opts: &PicardOptions,
) -> Result<(DrbsdeSolution, PicardDiagnostics)> {
    let d = (data.d_proc.max_abs() > 0.0).then_some(&data.d_proc);
    let (sol, mut diag, unfrozen) = picard_loop(tree, m, &data.g, &data.d_proc, opts, |g_path| {
        solve_fixed_generator_dr_shifted(tree, m, g_path, &data.eta, &data.xi, &data.zeta, d)
    })?;
    diag.fixed_point_defect =
        dynamics_defect(tree, m, &sol.y, &sol.z, &unfrozen, &sol.l_inc, &sol.u_inc, d).max_abs();
    Ok((sol, diag))
}

pub fn solve_via_shift_dr(
    tree: &FiltrationTree,
    m: &MartingaleM,
    data: &DrbsdeData,
    opts: &PicardOptions,
) -> Result<(DrbsdeSolution, PicardDiagnostics)> {
    let shifted = data.shift_transform(tree);
    let (sol, diag) = picard_solve_dr(tree, m, &shifted, opts)?;
    Ok((sol.unshift(&data.d_proc), diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorSpec;
    use crate::lattice::{build_tree, LevelBranching, TimeGrid};
    use crate::martingale::attach_martingale;
    use crate::rbsde::solve_fixed_generator;
    use nalgebra::DVector;

    fn t2() -> (FiltrationTree, MartingaleM) {
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let tree = build_tree(grid, &[LevelBranching::uniform(2), LevelBranching::uniform(2)]).unwrap();
        let s = 0.5f64.sqrt();
        let vals = [0.0, s, -s, 2.0 * s, 0.0, 0.0, -2.0 * s];
        let m = attach_martingale(&tree, vals.iter().map(|&x| DVector::from_element(1, x)).collect()).unwrap();
        (tree, m)
    }

    fn game(tree: &FiltrationTree) -> (PredictableProcess, AdaptedProcess, AdaptedProcess) {
        let g = PredictableProcess::from_fn(tree, |_| 1.0);
        let pre = |b: f64| AdaptedProcess::from_fn(tree, |v| if tree.is_terminal(v) { 0.0 } else { b });
        (g, pre(-0.25), pre(0.25))
    }

    #[test]
    fn game_fixture_by_hand() {
        let (tree, m) = t2();
        let (g, xi, zeta) = game(&tree);
        let sol = solve_fixed_generator_dr(&tree, &m, &g, &[0.0; 4], &xi, &zeta).unwrap();
        assert_eq!(sol.y[0], 0.25);
        assert_eq!(sol.y[1], 0.25);
        assert_eq!(sol.u_inc[1], 0.25);
        assert_eq!(sol.u_inc[0], 0.5);
        assert_eq!(sol.l_inc.max_abs(), 0.0);
        assert_eq!(sol.active_barrier(0), ActiveBarrier::Upper);
        let rep = check_dr_invariants(&tree, &m, &sol, &g, &xi, &zeta, None);
        assert!(rep.holds(1e-15), "{rep:?}");
    }

    #[test]
    fn pinned_obstacles() {
        let (tree, m) = t2();
        let c = AdaptedProcess::constant(&tree, 0.3);
        let g = PredictableProcess::from_fn(&tree, |_| 1.0);
        let sol = solve_fixed_generator_dr(&tree, &m, &g, &[0.3; 4], &c, &c).unwrap();
        assert!(sol.y.iter().all(|&y| y == 0.3));
        for v in tree.interior() {
            assert_eq!(sol.u_inc[v], 0.5);
            assert_eq!(sol.l_inc[v], 0.0);
        }
    }

    #[test]
    fn inactive_upper_barrier_matches_single_reflection() {
        let (tree, m) = t2();
        let xi = AdaptedProcess::from_fn(&tree, |v| [1.0, 0.5, 0.0][tree.level_of(v)]);
        let zeta = AdaptedProcess::constant(&tree, 1e6);
        let g = PredictableProcess::from_fn(&tree, |v| 0.1 * v as f64);
        let a = solve_fixed_generator_dr(&tree, &m, &g, &[0.0; 4], &xi, &zeta).unwrap();
        let b = solve_fixed_generator(&tree, &m, &g, &[0.0; 4], &xi).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.l_inc, b.k_inc);
        assert_eq!(a.u_inc.max_abs(), 0.0);
    }

    #[test]
    fn order_violations_are_rejected() {
        let (tree, m) = t2();
        let g = PredictableProcess::zeros(&tree);
        let mut xi = AdaptedProcess::zeros(&tree);
        xi[1] = 1.0;
        let zeta = AdaptedProcess::zeros(&tree);
        let err = solve_fixed_generator_dr(&tree, &m, &g, &[0.0; 4], &xi, &zeta).unwrap_err();
        assert!(matches!(err, Error::ObstacleOrderViolation { node: 1, .. }));
        let err = solve_fixed_generator_dr(&tree, &m, &g, &[1.0; 4], &AdaptedProcess::zeros(&tree), &zeta).unwrap_err();
        assert!(matches!(err, Error::ObstacleOrderViolation { .. }));
    }

    #[test]
    fn shifted_obstacle_examples() {
        let grid = TimeGrid::uniform(1, 1.0).unwrap();
        let tree = build_tree(grid, &[LevelBranching::uniform(1)]).unwrap();
        let g = PredictableProcess::from_fn(&tree, |_| 1.0);
        let xi = AdaptedProcess::from_vec(vec![5.0, 3.0]);
        let (xg, zg) = shifted_obstacles(&tree, &g, &xi, &AdaptedProcess::constant(&tree, 9.0), &[3.0]);
        assert_eq!(xg.values(), &[1.0, 0.0]);
        assert_eq!(zg.values(), &[5.0, 0.0]);

        let (tree, m) = t2();
        let closed = m.component(0);
        let (xg, _) = shifted_obstacles(&tree, &PredictableProcess::zeros(&tree), &closed, &closed, &closed.terminal(&tree));
        assert!(xg.max_abs() < 1e-15);
    }

    #[test]
    fn ij_trivial_fixed_point() {
        let (tree, _) = t2();
        let xg = AdaptedProcess::constant(&tree, -1.0);
        let zg = AdaptedProcess::constant(&tree, 1.0);
        let st = iterate_ij(&tree, &xg, &zg, 1e-9, 500).unwrap();
        assert_eq!(st.k, 1);
        assert_eq!(st.i_proc.max_abs(), 0.0);
        assert_eq!(st.j_proc.max_abs(), 0.0);
    }

    #[test]
    fn ij_matches_game_fixture() {
        let (tree, m) = t2();
        let (g, xi, zeta) = game(&tree);
        let (xg, zg) = shifted_obstacles(&tree, &g, &xi, &zeta, &[0.0; 4]);
        let st = iterate_ij(&tree, &xg, &zg, 1e-12, 500).unwrap();
        assert!((st.i_proc[0] - st.j_proc[0] + 0.75).abs() < 1e-12);
        let ybar = assemble_ybar(&tree, &st, &g, &[0.0; 4]);
        let dp = solve_fixed_generator_dr(&tree, &m, &g, &[0.0; 4], &xi, &zeta).unwrap();
        for v in 0..tree.len() {
            assert!((ybar[v] - dp.y[v]).abs() < 1e-12);
        }
    }

    #[test]
    fn mokobodzki_identity_and_corruption() {
        let (tree, m) = t2();
        let (g, xi, zeta) = game(&tree);
        let mut sol = solve_fixed_generator_dr(&tree, &m, &g, &[0.0; 4], &xi, &zeta).unwrap();
        let rep = check_mokobodzki(&tree, &sol, &g, &xi, &zeta, 1e-12);
        assert!(rep.holds, "{:?}", rep.violation);
        for v in 0..tree.len() {
            assert!((rep.h[v] - rep.h_prime[v] - sol.y[v]).abs() < 1e-15);
        }
        sol.l_inc[1] = -0.6;
        let rep = check_mokobodzki(&tree, &sol, &g, &xi, &zeta, 1e-12);
        assert_eq!(rep.violation.unwrap(), (1, "H is not a supermartingale".to_string()));
    }

    #[test]
    fn mokobodzki_without_reflection_is_martingale_closed() {
        let (tree, m) = t2();
        let xi = AdaptedProcess::constant(&tree, -10.0);
        let zeta = AdaptedProcess::constant(&tree, 10.0);
        let g = PredictableProcess::zeros(&tree);
        let eta = m.component(0).terminal(&tree);
        let sol = solve_fixed_generator_dr(&tree, &m, &g, &eta, &xi, &zeta).unwrap();
        let rep = check_mokobodzki(&tree, &sol, &g, &xi, &zeta, 1e-12);
        assert!(rep.holds);
        let s = 0.5f64.sqrt();
        assert!((rep.h[0] - 0.25 * 2.0 * s).abs() < 1e-15);
        assert!((rep.h[0] - rep.h_prime[0]).abs() < 1e-15);
    }

    #[test]
    fn picard_dr_fixed_generator_and_beta() {
        let (tree, m) = t2();
        let (_, xi, zeta) = game(&tree);
        let data = DrbsdeData::without_shift(&tree, GeneratorSpec::constant(1.0), vec![0.0; 4], xi, zeta).unwrap();
        let (sol, diag) = picard_solve_dr(&tree, &m, &data, &PicardOptions::default()).unwrap();
        assert_eq!(diag.iterations, 1);
        assert_eq!(sol.y[0], 0.25);
        assert_eq!(crate::rbsde::default_beta(1.0, 1.0), 4632.0);
    }
}
