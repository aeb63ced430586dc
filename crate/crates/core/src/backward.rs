//! Backward recursion shared by the single- and double-barrier solvers.

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, FiltrationTree, NodeId, PredictableProcess, VectorProcess};
use crate::martingale::MartingaleM;
use nalgebra::DVector;

pub(crate) struct BackwardOutput {
    pub y: AdaptedProcess,
    pub z: VectorProcess,
    /// Upward push `(Y - c)^+`.
    pub up: PredictableProcess,
    /// Downward push `(c - Y)^+`.
    pub down: PredictableProcess,
    pub residuals: AdaptedProcess,
}

pub(crate) fn check_inputs(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g_path: &PredictableProcess,
    eta: &[f64],
    d: Option<&AdaptedProcess>,
) -> Result<()> {
    if m.values().len() != tree.len() {
        return Err(Error::ShapeMismatch("martingale does not live on this tree".into()));
    }
    if g_path.len() != tree.len() {
        return Err(Error::ShapeMismatch(format!(
            "generator path has {} values, tree has {} nodes",
            g_path.len(),
            tree.len()
        )));
    }
    if eta.len() != tree.leaves().len() {
        return Err(Error::ShapeMismatch(format!(
            "eta has {} values, tree has {} leaves",
            eta.len(),
            tree.leaves().len()
        )));
    }
    if let Some(d) = d {
        if d.len() != tree.len() {
            return Err(Error::ShapeMismatch("D does not match the tree".into()));
        }
    }
    Ok(())
}

/// `Y_N = eta`; at each non-terminal node
/// `c_v = E_v[Y - D] + D_v + g_v dQ`, `Y_v = reflect(v, c_v)`, and `Z_v`
/// represents the centred increment of `Y - D`.
pub(crate) fn backward_solve(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g_path: &PredictableProcess,
    eta: &[f64],
    d: Option<&AdaptedProcess>,
    reflect: impl Fn(NodeId, f64) -> f64,
) -> Result<BackwardOutput> {
    check_inputs(tree, m, g_path, eta, d)?;
    let n = tree.len();
    let dval = |v: NodeId| d.map_or(0.0, |d| d[v]);
    let mut y = AdaptedProcess::zeros(tree);
    let mut z: VectorProcess = vec![DVector::zeros(m.dim()); n];
    let mut up = PredictableProcess::zeros(tree);
    let mut down = PredictableProcess::zeros(tree);
    for (&leaf, &e) in tree.leaves().iter().zip(eta) {
        y[leaf] = e;
    }
    let mut dn = Vec::new();
    for k in (0..tree.depth()).rev() {
        let dq = tree.grid().dq(k);
        for &v in tree.level(k) {
            let cond = tree.expect_children(v, |c| y[c] - dval(c));
            let c = cond + dval(v) + g_path[v] * dq;
            let yv = reflect(v, c);
            y[v] = yv;
            up[v] = (yv - c).max(0.0);
            down[v] = (c - yv).max(0.0);
            dn.clear();
            dn.extend(tree.children(v).iter().map(|&ch| y[ch] - dval(ch) - cond));
            // Remove the rounding-level mean left by the subtraction above.
            let bias: f64 = tree.children(v).iter().zip(&dn).map(|(&ch, x)| tree.prob(ch) * x).sum();
            dn.iter_mut().for_each(|x| *x -= bias);
            z[v] = m.solve_prp(tree, v, &dn)?.z;
        }
    }
    let residuals = dynamics_defect(tree, m, &y, &z, g_path, &up, &down, d);
    Ok(BackwardOutput {
        y,
        z,
        up,
        down,
        residuals,
    })
}

/// Per-node max over outgoing edges of
/// `|Y_child - (Y_v - g_v dQ + Z_v . dM + dD - up_v + down_v)|`.
#[allow(clippy::too_many_arguments)]
pub fn dynamics_defect(
    tree: &FiltrationTree,
    m: &MartingaleM,
    y: &AdaptedProcess,
    z: &VectorProcess,
    g_path: &PredictableProcess,
    up: &PredictableProcess,
    down: &PredictableProcess,
    d: Option<&AdaptedProcess>,
) -> AdaptedProcess {
    let dval = |v: NodeId| d.map_or(0.0, |d| d[v]);
    AdaptedProcess::from_fn(tree, |v| {
        if tree.is_terminal(v) {
            return 0.0;
        }
        let dq = tree.dq_after(v);
        tree.children(v)
            .iter()
            .map(|&c| {
                let predicted =
                    y[v] - g_path[v] * dq + z[v].dot(&m.increment(tree, c)) + (dval(c) - dval(v)) - up[v] + down[v];
                (y[c] - predicted).abs()
            })
            .fold(0.0, f64::max)
    })
}
