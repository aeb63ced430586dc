//! The driving martingale `M`, its bracket factor `m`, predictable
//! representation solves, β-weighted norms and Lipschitz estimation.
//!
//! On a tree the factorization `<M>_t = int m m* dQ` reads
//! `m_v m_v* dQ_k = E_v[dM dM*]` at every non-terminal node `v` of level `k`;
//! `m_v` is taken as the symmetric PSD square root.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GenPoint, GeneratorSpec};
use crate::lattice::{AdaptedProcess, FiltrationTree, NodeId, VectorProcess};

/// Relative drift allowed by the martingale check.
pub const MARTINGALE_TOL: f64 = 1e-12;
/// Entrywise tolerance on `m m* dQ = E[dM dM*]`.
pub const FACTOR_TOL: f64 = 1e-10;
/// Eigenvalues of the conditional covariance below this are set to zero.
pub const EIGEN_CLAMP: f64 = 1e-14;
/// Default relative residual below which a representation counts as exact.
pub const DEFAULT_PRP_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct MartingaleM {
    dim: usize,
    values: VectorProcess,
    bracket: Vec<DMatrix<f64>>,
    prp_tol: f64,
}

/// Checks the martingale property and computes the bracket factor.
pub fn attach_martingale(tree: &FiltrationTree, values: VectorProcess) -> Result<MartingaleM> {
    if values.len() != tree.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} martingale values for {} nodes",
            values.len(),
            tree.len()
        )));
    }
    let dim = values[0].len();
    if dim == 0 {
        return Err(Error::ShapeMismatch("martingale dimension must be >= 1".into()));
    }
    if let Some(v) = values.iter().position(|x| x.len() != dim) {
        return Err(Error::ShapeMismatch(format!("node {v} has a martingale value of the wrong dimension")));
    }
    if values.iter().any(|x| x.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite("martingale values".into()));
    }

    // Drift check, reporting the worst node.
    let mut worst: Option<(NodeId, f64)> = None;
    for v in tree.interior() {
        let scale = 1.0
            + tree
                .children(v)
                .iter()
                .map(|&c| values[c].amax())
                .fold(values[v].amax(), f64::max);
        let mut mean = DVector::zeros(dim);
        for &c in tree.children(v) {
            mean += tree.prob(c) * &values[c];
        }
        let drift = (mean - &values[v]).amax();
        if drift > MARTINGALE_TOL * scale && worst.is_none_or(|(_, d)| drift > d) {
            worst = Some((v, drift));
        }
    }
    if let Some((node, drift)) = worst {
        return Err(Error::NotAMartingale { node, drift });
    }

    let mut bracket = vec![DMatrix::zeros(dim, dim); tree.len()];
    for v in tree.interior() {
        let dq = tree.dq_after(v);
        let mut cov = DMatrix::zeros(dim, dim);
        for &c in tree.children(v) {
            let dm = &values[c] - &values[v];
            cov += tree.prob(c) * &dm * dm.transpose();
        }
        let asym = (&cov - cov.transpose()).amax();
        let scale = 1.0 + cov.amax();
        if asym > FACTOR_TOL * scale {
            return Err(Error::BadCovariance {
                node: v,
                reason: format!("asymmetry {asym:e}"),
            });
        }
        let m = sqrt_psd(&(&cov / dq), v)?;
        let defect = (&m * &m * dq - &cov).amax();
        if defect > FACTOR_TOL * scale {
            return Err(Error::BadCovariance {
                node: v,
                reason: format!("factorization defect {defect:e}"),
            });
        }
        bracket[v] = m;
    }
    Ok(MartingaleM {
        dim,
        values,
        bracket,
        prp_tol: DEFAULT_PRP_TOL,
    })
}

fn sqrt_psd(c: &DMatrix<f64>, node: NodeId) -> Result<DMatrix<f64>> {
    if c.nrows() == 1 {
        let x = c[(0, 0)];
        if x < -EIGEN_CLAMP.max(FACTOR_TOL * x.abs()) {
            return Err(Error::BadCovariance {
                node,
                reason: format!("negative variance {x:e}"),
            });
        }
        let x = if x < EIGEN_CLAMP { 0.0 } else { x };
        return Ok(DMatrix::from_element(1, 1, x.sqrt()));
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.amax();
    let mut lambdas = eig.eigenvalues.clone();
    for l in lambdas.iter_mut() {
        if *l < -(EIGEN_CLAMP + FACTOR_TOL * top) {
            return Err(Error::BadCovariance {
                node,
                reason: format!("indefinite covariance, eigenvalue {l:e}"),
            });
        }
        *l = if *l < EIGEN_CLAMP { 0.0 } else { l.sqrt() };
    }
    let v = &eig.eigenvectors;
    let m = v * DMatrix::from_diagonal(&lambdas) * v.transpose();
    Ok((&m + m.transpose()) * 0.5)
}

/// Minimum-norm least-squares solution of `a z = rhs` by one-sided Jacobi,
/// dropping singular values below `rel_eps` times the largest.
///
/// nalgebra's SVD returns inconsistent singular vectors on some
/// rank-deficient matrices, so it is not used here.
fn min_norm_lstsq(mut a: DMatrix<f64>, rhs: &DVector<f64>, rel_eps: f64) -> DVector<f64> {
    let n = a.ncols();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut a, &mut v] {
                    for r in 0..m.nrows() {
                        let (x, y) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = c * x - s * y;
                        m[(r, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let top = sigma.iter().fold(0.0f64, |x, &y| x.max(y));
    let mut z = DVector::zeros(n);
    for (j, &s) in sigma.iter().enumerate() {
        if s > rel_eps * top && s > 0.0 {
            // u_j = a_j / s, coefficient (u_j . rhs) / s
            let coef = a.column(j).dot(rhs) / (s * s);
            z += coef * v.column(j);
        }
    }
    z
}

/// Minimum-norm representation of a mean-zero increment at one node.
#[derive(Clone, Debug, PartialEq)]
pub struct PrpSolution {
    pub z: DVector<f64>,
    pub residual: f64,
}

impl MartingaleM {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, v: NodeId) -> &DVector<f64> {
        &self.values[v]
    }

    pub fn values(&self) -> &VectorProcess {
        &self.values
    }

    /// `m_v` (zero matrix at terminal nodes).
    pub fn bracket_factor(&self, v: NodeId) -> &DMatrix<f64> {
        &self.bracket[v]
    }

    pub fn prp_tolerance(&self) -> f64 {
        self.prp_tol
    }

    /// Overrides the relative residual threshold used by [`MartingaleM::solve_prp`].
    pub fn with_prp_tolerance(mut self, tol: f64) -> Self {
        self.prp_tol = tol;
        self
    }

    /// `M(child) - M(parent(child))`.
    pub fn increment(&self, tree: &FiltrationTree, child: NodeId) -> DVector<f64> {
        let p = tree.parent(child).expect("increment of the root");
        &self.values[child] - &self.values[p]
    }

    /// `||m_v z||`.
    pub fn mz_norm(&self, v: NodeId, z: &DVector<f64>) -> f64 {
        (&self.bracket[v] * z).norm()
    }

    /// Component `i` of `M` as a scalar process.
    pub fn component(&self, i: usize) -> AdaptedProcess {
        AdaptedProcess::from_vec(self.values.iter().map(|x| x[i]).collect())
    }

    /// Solves `z . dM(child_i) = dn_i` in the weighted least-squares sense
    /// and returns the minimum-norm solution. `dn` lists one value per child
    /// of `node`, in child order.
    pub fn solve_prp(&self, tree: &FiltrationTree, node: NodeId, dn: &[f64]) -> Result<PrpSolution> {
        let sol = self.least_squares(tree, node, dn)?;
        let max_dn = dn.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let tolerance = self.prp_tol * (1.0 + max_dn);
        if sol.residual > tolerance {
            return Err(Error::PrpViolation {
                node,
                residual: sol.residual,
                tolerance,
            });
        }
        Ok(sol)
    }

    /// Least-squares fit without the exactness check.
    pub fn least_squares(&self, tree: &FiltrationTree, node: NodeId, dn: &[f64]) -> Result<PrpSolution> {
        let children = tree.children(node);
        if children.len() != dn.len() {
            return Err(Error::ShapeMismatch(format!(
                "node {node} has {} children, got {} increments",
                children.len(),
                dn.len()
            )));
        }
        let max_dn = dn.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let mean: f64 = children.iter().zip(dn).map(|(&c, &x)| tree.prob(c) * x).sum();
        if mean.abs() > MARTINGALE_TOL * (1.0 + max_dn) {
            return Err(Error::InvalidData(format!(
                "increments at node {node} have mean {mean:e}, expected 0"
            )));
        }
        let z = if self.dim == 1 {
            let (mut num, mut den) = (0.0, 0.0);
            for (&c, &x) in children.iter().zip(dn) {
                let dm = self.values[c][0] - self.values[node][0];
                num += tree.prob(c) * dm * x;
                den += tree.prob(c) * dm * dm;
            }
            DVector::from_element(1, if den > 0.0 { num / den } else { 0.0 })
        } else {
            let b = children.len();
            let mut a = DMatrix::zeros(b, self.dim);
            let mut rhs = DVector::zeros(b);
            for (i, (&c, &x)) in children.iter().zip(dn).enumerate() {
                let w = tree.prob(c).sqrt();
                let dm = &self.values[c] - &self.values[node];
                a.row_mut(i).copy_from(&(w * dm).transpose());
                rhs[i] = w * x;
            }
            min_norm_lstsq(a, &rhs, 1e-12)
        };
        let residual = children
            .iter()
            .zip(dn)
            .map(|(&c, &x)| {
                let dm = &self.values[c] - &self.values[node];
                tree.prob(c) * (x - z.dot(&dm)).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        Ok(PrpSolution { z, residual })
    }
}

/// Exponential clock weights `exp(beta Q_k - shift)`.
///
/// A positive `shift` (typically `beta C_Q`) keeps the weights representable
/// for large `beta`; every norm computed with it is the true β-norm times
/// `exp(-shift)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaWeights {
    pub beta: f64,
    pub shift: f64,
}

impl BetaWeights {
    pub fn new(beta: f64) -> Self {
        BetaWeights { beta, shift: 0.0 }
    }

    /// Weights divided by `exp(beta C_Q)`, so the largest is 1.
    pub fn normalized(beta: f64, c_q: f64) -> Self {
        BetaWeights { beta, shift: beta * c_q }
    }

    pub fn at(&self, tree: &FiltrationTree, level: usize) -> f64 {
        (self.beta * tree.grid().q(level) - self.shift).exp()
    }
}

/// `E[max_k w_k x_k^2]` over paths.
pub fn s_norm_sq(tree: &FiltrationTree, x: &AdaptedProcess, w: BetaWeights) -> f64 {
    let weights: Vec<f64> = (0..=tree.depth()).map(|k| w.at(tree, k)).collect();
    let mut running = vec![0.0f64; tree.len()];
    for v in 0..tree.len() {
        let here = weights[tree.level_of(v)] * x[v] * x[v];
        running[v] = match tree.parent(v) {
            Some(p) => running[p].max(here),
            None => here,
        };
    }
    tree.leaves().iter().map(|&v| tree.reach(v) * running[v]).sum()
}

/// `E[sum_{k<N} w_k x_k^2 dQ_k]`.
pub fn h_norm_sq(tree: &FiltrationTree, x: &AdaptedProcess, w: BetaWeights) -> f64 {
    tree.interior()
        .map(|v| {
            let k = tree.level_of(v);
            tree.reach(v) * w.at(tree, k) * x[v] * x[v] * tree.grid().dq(k)
        })
        .sum()
}

/// `E[sum_{k<N} w_k ||m_k z_k||^2 dQ_k]`.
pub fn l_norm_sq(tree: &FiltrationTree, m: &MartingaleM, z: &VectorProcess, w: BetaWeights) -> f64 {
    tree.interior()
        .map(|v| {
            let k = tree.level_of(v);
            tree.reach(v) * w.at(tree, k) * m.mz_norm(v, &z[v]).powi(2) * tree.grid().dq(k)
        })
        .sum()
}

/// `ln(sum exp(a_i))`, with `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(terms: impl IntoIterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.into_iter().collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

fn ln_sq(x: f64) -> f64 {
    2.0 * x.abs().ln()
}

/// `ln ||x||_S^2` for the unnormalized weights `exp(beta Q_k)`.
///
/// The log form stays exact when `beta C_Q` is far beyond the range of
/// `exp`; a zero process gives `-inf`.
pub fn log_s_norm_sq(tree: &FiltrationTree, x: &AdaptedProcess, beta: f64) -> f64 {
    let mut running = vec![f64::NEG_INFINITY; tree.len()];
    for v in 0..tree.len() {
        let here = beta * tree.grid().q(tree.level_of(v)) + ln_sq(x[v]);
        running[v] = match tree.parent(v) {
            Some(p) => running[p].max(here),
            None => here,
        };
    }
    log_sum_exp(tree.leaves().iter().map(|&v| tree.reach(v).ln() + running[v]))
}

/// `ln ||x||_H^2`.
pub fn log_h_norm_sq(tree: &FiltrationTree, x: &AdaptedProcess, beta: f64) -> f64 {
    log_sum_exp(tree.interior().map(|v| {
        let k = tree.level_of(v);
        tree.reach(v).ln() + beta * tree.grid().q(k) + ln_sq(x[v]) + tree.grid().dq(k).ln()
    }))
}

/// `ln ||z||_L^2`.
pub fn log_l_norm_sq(tree: &FiltrationTree, m: &MartingaleM, z: &VectorProcess, beta: f64) -> f64 {
    log_sum_exp(tree.interior().map(|v| {
        let k = tree.level_of(v);
        tree.reach(v).ln() + beta * tree.grid().q(k) + ln_sq(m.mz_norm(v, &z[v])) + tree.grid().dq(k).ln()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaNormReport {
    pub beta: f64,
    pub s_norm_sq: f64,
    pub h_norm_sq: f64,
    pub l_norm_sq: f64,
}

/// S²β and H²β norms of `x` and the L²β norm of `z` (absent inputs report 0).
pub fn beta_norms(
    tree: &FiltrationTree,
    m: &MartingaleM,
    x: Option<&AdaptedProcess>,
    z: Option<&VectorProcess>,
    beta: f64,
) -> Result<BetaNormReport> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::BadParameters(format!("beta must be finite and >= 0, got {beta}")));
    }
    if let Some(x) = x {
        if x.len() != tree.len() {
            return Err(Error::ShapeMismatch("x does not match the tree".into()));
        }
    }
    if let Some(z) = z {
        if z.len() != tree.len() || z.iter().any(|zi| zi.len() != m.dim()) {
            return Err(Error::ShapeMismatch("z does not match the tree or dimension".into()));
        }
    }
    let w = BetaWeights::new(beta);
    Ok(BetaNormReport {
        beta,
        s_norm_sq: x.map_or(0.0, |x| s_norm_sq(tree, x, w)),
        h_norm_sq: x.map_or(0.0, |x| h_norm_sq(tree, x, w)),
        l_norm_sq: z.map_or(0.0, |z| l_norm_sq(tree, m, z, w)),
    })
}

/// Sampling box for [`estimate_m_lipschitz`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzSampling {
    pub samples: usize,
    pub seed: u64,
    /// Half-width of the `(y, z)` box.
    pub radius: f64,
}

impl Default for LipschitzSampling {
    fn default() -> Self {
        LipschitzSampling {
            samples: 256,
            seed: 0,
            radius: 1.0,
        }
    }
}

/// Largest observed `|g(y1,z1) - g(y2,z2)| / (|y1-y2| + ||m (z1-z2)||)`.
///
/// This is a lower bound for the true m-Lipschitz constant. Half the draws
/// are independent pairs in the box, half are small perturbations along `y`,
/// a single `z` axis, or a random direction. Returns infinity if `g` moves
/// while the denominator vanishes (dependence on `z` where `m` is singular).
pub fn estimate_m_lipschitz(
    tree: &FiltrationTree,
    m: &MartingaleM,
    g: &GeneratorSpec,
    sampling: LipschitzSampling,
) -> f64 {
    let interior: Vec<NodeId> = tree.interior().collect();
    if interior.is_empty() || sampling.samples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let r = sampling.radius;
    let d = m.dim();
    let mut best = 0.0f64;
    for s in 0..sampling.samples {
        let node = interior[rng.random_range(0..interior.len())];
        let y1 = rng.random_range(-r..=r);
        let z1 = DVector::from_fn(d, |_, _| rng.random_range(-r..=r));
        let (y2, z2) = if s % 2 == 0 {
            (rng.random_range(-r..=r), DVector::from_fn(d, |_, _| rng.random_range(-r..=r)))
        } else {
            let h = r * 10f64.powf(-rng.random_range(1.0..4.0));
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            match rng.random_range(0..3) {
                0 => (y1 + sign * h, z1.clone()),
                1 => {
                    let mut z2 = z1.clone();
                    z2[rng.random_range(0..d)] += sign * h;
                    (y1, z2)
                }
                _ => (
                    y1 + h * rng.random_range(-1.0..=1.0),
                    &z1 + DVector::from_fn(d, |_, _| h * rng.random_range(-1.0..=1.0)),
                ),
            }
        };
        let p = GenPoint::at(tree, node);
        let num = (g.eval(&p, y1, z1.as_slice()) - g.eval(&p, y2, z2.as_slice())).abs();
        let den = (y1 - y2).abs() + m.mz_norm(node, &(&z1 - &z2));
        if den <= 1e-300 {
            if num > 1e-12 {
                return f64::INFINITY;
            }
            continue;
        }
        best = best.max(num / den);
    }
    best
}
