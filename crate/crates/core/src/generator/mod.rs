//! Drivers `g(t, y, z)`, equation data, and the shift that removes `D`.

mod expr;
mod families;

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

pub use expr::{softplus, Expr};
pub use families::{build_generator, GeneratorConfig};

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, FiltrationTree, NodeId, PredictableProcess, VectorProcess};

/// Where a driver is being evaluated.
#[derive(Clone, Copy, Debug)]
pub struct GenPoint {
    pub level: usize,
    pub node: NodeId,
    pub t: f64,
}

impl GenPoint {
    pub fn at(tree: &FiltrationTree, node: NodeId) -> Self {
        let level = tree.level_of(node);
        GenPoint {
            level,
            node,
            t: tree.grid().time(level),
        }
    }
}

type EvalFn = dyn Fn(&GenPoint, f64, &[f64]) -> f64 + Send + Sync;

/// A driver together with its declared m-Lipschitz constant.
#[derive(Clone)]
pub struct GeneratorSpec {
    eval: Arc<EvalFn>,
    lipschitz: f64,
    depends_on_yz: bool,
    label: String,
}

impl fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("label", &self.label)
            .field("lipschitz", &self.lipschitz)
            .field("depends_on_yz", &self.depends_on_yz)
            .finish()
    }
}

impl GeneratorSpec {
    pub fn new(
        label: impl Into<String>,
        lipschitz: f64,
        depends_on_yz: bool,
        eval: impl Fn(&GenPoint, f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(Error::InvalidGenerator(format!(
                "Lipschitz constant must be finite and >= 0, got {lipschitz}"
            )));
        }
        Ok(GeneratorSpec {
            eval: Arc::new(eval),
            lipschitz,
            depends_on_yz,
            label: label.into(),
        })
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        GeneratorSpec::new(format!("constant({c})"), 0.0, false, move |_, _, _| c).expect("valid")
    }

    /// Driver that ignores `(y, z)` and reads a per-node value.
    pub fn from_path(path: &PredictableProcess) -> Self {
        let values = Arc::new(path.values().to_vec());
        GeneratorSpec::new("path", 0.0, false, move |p, _, _| values[p.node]).expect("valid")
    }

    /// `g(t, y, z) = a + b y + c . z`.
    pub fn affine(a: f64, b: f64, c: Vec<f64>) -> Self {
        let lip = b.abs() + c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let depends = b != 0.0 || c.iter().any(|&x| x != 0.0);
        GeneratorSpec::new("affine", lip, depends, move |_, y, z| {
            a + b * y + c.iter().zip(z).map(|(ci, zi)| ci * zi).sum::<f64>()
        })
        .expect("valid")
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn depends_on_yz(&self) -> bool {
        self.depends_on_yz
    }

    /// Replaces the declared Lipschitz constant.
    pub fn with_lipschitz(mut self, lipschitz: f64) -> Result<Self> {
        if !(lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(Error::InvalidGenerator(format!("bad Lipschitz constant {lipschitz}")));
        }
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn eval(&self, point: &GenPoint, y: f64, z: &[f64]) -> f64 {
        (self.eval)(point, y, z)
    }

    pub fn at(&self, tree: &FiltrationTree, node: NodeId, y: f64, z: &[f64]) -> f64 {
        (self.eval)(&GenPoint::at(tree, node), y, z)
    }

    /// `g + c`.
    pub fn offset(&self, c: f64) -> Self {
        let inner = self.eval.clone();
        GeneratorSpec {
            eval: Arc::new(move |p, y, z| inner(p, y, z) + c),
            lipschitz: self.lipschitz,
            depends_on_yz: self.depends_on_yz,
            label: format!("{} + {c}", self.label),
        }
    }

    /// `(t, y, z) -> g(t, y + d_t, z)`.
    pub fn shifted(&self, d: &AdaptedProcess) -> Self {
        let inner = self.eval.clone();
        let d = Arc::new(d.values().to_vec());
        GeneratorSpec {
            eval: Arc::new(move |p, y, z| inner(p, y + d[p.node], z)),
            lipschitz: self.lipschitz,
            depends_on_yz: self.depends_on_yz,
            label: format!("shifted({})", self.label),
        }
    }

    /// `(t, y, z) -> lambda g(t, y / lambda, z / lambda)`, the driver of the
    /// problem whose data are all scaled by `lambda > 0`.
    pub fn scaled(&self, lambda: f64) -> Self {
        assert!(lambda > 0.0, "scale must be positive");
        let inner = self.eval.clone();
        GeneratorSpec {
            eval: Arc::new(move |p, y, z| {
                let zs: Vec<f64> = z.iter().map(|x| x / lambda).collect();
                lambda * inner(p, y / lambda, &zs)
            }),
            lipschitz: self.lipschitz,
            depends_on_yz: self.depends_on_yz,
            label: format!("{lambda} * {}", self.label),
        }
    }

    /// Spot-checks the `depends_on_yz = false` declaration on every node.
    pub fn check_declared_independence(&self, tree: &FiltrationTree, dim: usize) -> Result<()> {
        if self.depends_on_yz {
            return Ok(());
        }
        let z1 = vec![0.0; dim];
        let z2: Vec<f64> = (0..dim).map(|i| 1.5 - 0.7 * i as f64).collect();
        for v in 0..tree.len() {
            let p = GenPoint::at(tree, v);
            let a = self.eval(&p, 0.0, &z1);
            let b = self.eval(&p, 2.75, &z2);
            if a != b && !(a.is_nan() && b.is_nan()) {
                return Err(Error::InvalidGenerator(format!(
                    "`{}` declared independent of (y, z) but differs at node {v}",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

/// `g_k(v) = g(k, v, w(v), z(v))` on every non-terminal node.
pub fn freeze_generator(
    tree: &FiltrationTree,
    g: &GeneratorSpec,
    w: &AdaptedProcess,
    v: &VectorProcess,
) -> PredictableProcess {
    PredictableProcess::from_fn(tree, |node| g.at(tree, node, w[node], v[node].as_slice()))
}

/// Data `(g, eta, D, xi)` of a reflected equation.
///
/// `eta` holds one value per leaf, in leaf order.
#[derive(Clone, Debug)]
pub struct RbsdeData {
    pub g: GeneratorSpec,
    pub eta: Vec<f64>,
    pub d_proc: AdaptedProcess,
    pub xi: AdaptedProcess,
}

/// Data `(g, eta, D, xi, zeta)` of a doubly reflected equation.
#[derive(Clone, Debug)]
pub struct DrbsdeData {
    pub g: GeneratorSpec,
    pub eta: Vec<f64>,
    pub d_proc: AdaptedProcess,
    pub xi: AdaptedProcess,
    pub zeta: AdaptedProcess,
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn check_shapes(tree: &FiltrationTree, eta: &[f64], procs: &[(&str, &AdaptedProcess)]) -> Result<()> {
    if eta.len() != tree.leaves().len() {
        return Err(Error::ShapeMismatch(format!(
            "eta has {} values, tree has {} leaves",
            eta.len(),
            tree.leaves().len()
        )));
    }
    check_finite("eta", eta)?;
    for (name, p) in procs {
        if p.len() != tree.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name} has {} values, tree has {} nodes",
                p.len(),
                tree.len()
            )));
        }
        check_finite(name, p.values())?;
    }
    Ok(())
}

fn check_lower_terminal(tree: &FiltrationTree, eta: &[f64], xi: &AdaptedProcess) -> Result<()> {
    for (&leaf, &e) in tree.leaves().iter().zip(eta) {
        if xi[leaf] > e {
            return Err(Error::ObstacleAboveTerminal {
                node: leaf,
                xi: xi[leaf],
                eta: e,
            });
        }
    }
    Ok(())
}

impl RbsdeData {
    pub fn new(
        tree: &FiltrationTree,
        g: GeneratorSpec,
        eta: Vec<f64>,
        d_proc: AdaptedProcess,
        xi: AdaptedProcess,
    ) -> Result<Self> {
        check_shapes(tree, &eta, &[("D", &d_proc), ("xi", &xi)])?;
        check_lower_terminal(tree, &eta, &xi)?;
        Ok(RbsdeData { g, eta, d_proc, xi })
    }

    /// Same data without a `D` process.
    pub fn without_shift(tree: &FiltrationTree, g: GeneratorSpec, eta: Vec<f64>, xi: AdaptedProcess) -> Result<Self> {
        Self::new(tree, g, eta, AdaptedProcess::zeros(tree), xi)
    }

    /// Subtracts `d` from the state: `g(., y + d, .)`, `eta - d_T`,
    /// `D - d`, `xi - d`.
    pub fn shift_by(&self, tree: &FiltrationTree, d: &AdaptedProcess) -> Self {
        RbsdeData {
            g: self.g.shifted(d),
            eta: shift_terminal(tree, &self.eta, d),
            d_proc: self.d_proc.zip_with(d, |a, b| a - b),
            xi: self.xi.zip_with(d, |a, b| a - b),
        }
    }

    /// Data scaled by `lambda > 0`; its solution is `lambda` times the
    /// original one.
    pub fn scaled(&self, lambda: f64) -> Self {
        RbsdeData {
            g: self.g.scaled(lambda),
            eta: self.eta.iter().map(|x| lambda * x).collect(),
            d_proc: self.d_proc.map(|x| lambda * x),
            xi: self.xi.map(|x| lambda * x),
        }
    }
}

impl DrbsdeData {
    pub fn new(
        tree: &FiltrationTree,
        g: GeneratorSpec,
        eta: Vec<f64>,
        d_proc: AdaptedProcess,
        xi: AdaptedProcess,
        zeta: AdaptedProcess,
    ) -> Result<Self> {
        check_shapes(tree, &eta, &[("D", &d_proc), ("xi", &xi), ("zeta", &zeta)])?;
        for v in 0..tree.len() {
            if xi[v] > zeta[v] {
                return Err(Error::ObstacleOrderViolation {
                    node: v,
                    lower: xi[v],
                    upper: zeta[v],
                });
            }
        }
        check_lower_terminal(tree, &eta, &xi)?;
        for (&leaf, &e) in tree.leaves().iter().zip(&eta) {
            if e > zeta[leaf] {
                return Err(Error::ObstacleOrderViolation {
                    node: leaf,
                    lower: e,
                    upper: zeta[leaf],
                });
            }
        }
        Ok(DrbsdeData {
            g,
            eta,
            d_proc,
            xi,
            zeta,
        })
    }

    pub fn without_shift(
        tree: &FiltrationTree,
        g: GeneratorSpec,
        eta: Vec<f64>,
        xi: AdaptedProcess,
        zeta: AdaptedProcess,
    ) -> Result<Self> {
        Self::new(tree, g, eta, AdaptedProcess::zeros(tree), xi, zeta)
    }

    pub fn shift_by(&self, tree: &FiltrationTree, d: &AdaptedProcess) -> Self {
        DrbsdeData {
            g: self.g.shifted(d),
            eta: shift_terminal(tree, &self.eta, d),
            d_proc: self.d_proc.zip_with(d, |a, b| a - b),
            xi: self.xi.zip_with(d, |a, b| a - b),
            zeta: self.zeta.zip_with(d, |a, b| a - b),
        }
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        DrbsdeData {
            g: self.g.scaled(lambda),
            eta: self.eta.iter().map(|x| lambda * x).collect(),
            d_proc: self.d_proc.map(|x| lambda * x),
            xi: self.xi.map(|x| lambda * x),
            zeta: self.zeta.map(|x| lambda * x),
        }
    }

    /// The single-barrier data obtained by dropping `zeta`.
    pub fn lower(&self) -> RbsdeData {
        RbsdeData {
            g: self.g.clone(),
            eta: self.eta.clone(),
            d_proc: self.d_proc.clone(),
            xi: self.xi.clone(),
        }
    }
}

fn shift_terminal(tree: &FiltrationTree, eta: &[f64], d: &AdaptedProcess) -> Vec<f64> {
    tree.leaves().iter().zip(eta).map(|(&v, &e)| e - d[v]).collect()
}

/// Data with or without an upper barrier.
pub trait ShiftTransform: Sized {
    /// Returns the equivalent data with `D = 0`.
    fn shift_transform(&self, tree: &FiltrationTree) -> Self;
}

impl ShiftTransform for RbsdeData {
    fn shift_transform(&self, tree: &FiltrationTree) -> Self {
        self.shift_by(tree, &self.d_proc)
    }
}

impl ShiftTransform for DrbsdeData {
    fn shift_transform(&self, tree: &FiltrationTree) -> Self {
        self.shift_by(tree, &self.d_proc)
    }
}

/// `shift_transform` as a free function.
pub fn shift_transform<T: ShiftTransform>(tree: &FiltrationTree, data: &T) -> T {
    data.shift_transform(tree)
}

/// Zero vectors of dimension `dim` on every node.
pub fn zero_vectors(tree: &FiltrationTree, dim: usize) -> VectorProcess {
    vec![DVector::zeros(dim); tree.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_tree, LevelBranching, TimeGrid};

    fn t2() -> FiltrationTree {
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        build_tree(grid, &[LevelBranching::uniform(2), LevelBranching::uniform(2)]).unwrap()
    }

    #[test]
    fn zero_shift_is_identity() {
        let tree = t2();
        let xi = AdaptedProcess::from_fn(&tree, |v| v as f64 * 0.25 - 3.0);
        let data = RbsdeData::without_shift(&tree, GeneratorSpec::affine(0.0, 0.5, vec![]), vec![0.0; 4], xi.clone())
            .unwrap();
        let s = data.shift_transform(&tree);
        assert_eq!(s.xi, xi);
        assert_eq!(s.eta, data.eta);
        let p = GenPoint::at(&tree, 1);
        assert_eq!(s.g.eval(&p, 1.25, &[]), data.g.eval(&p, 1.25, &[]));
    }

    #[test]
    fn constant_shift_arithmetic() {
        let tree = t2();
        let data = RbsdeData::new(
            &tree,
            GeneratorSpec::zero(),
            vec![7.0; 4],
            AdaptedProcess::constant(&tree, 5.0),
            AdaptedProcess::constant(&tree, 1.0),
        )
        .unwrap();
        let s = shift_transform(&tree, &data);
        assert_eq!(s.eta, vec![2.0; 4]);
        assert!(s.xi.iter().all(|&x| x == -4.0));
        assert!(s.d_proc.iter().all(|&x| x == 0.0));
        assert_eq!(s.g.at(&tree, 0, 3.0, &[]), 0.0);
        assert_eq!(s.g.lipschitz(), data.g.lipschitz());
    }

    #[test]
    fn freeze_examples() {
        let tree = t2();
        let g = GeneratorSpec::new("y", 1.0, true, |_, y, _| y).unwrap();
        let w = AdaptedProcess::constant(&tree, 3.0);
        let z = zero_vectors(&tree, 1);
        let frozen = freeze_generator(&tree, &g, &w, &z);
        for v in tree.interior() {
            assert_eq!(frozen[v], 3.0);
        }
        let c = GeneratorSpec::constant(2.5);
        let frozen = freeze_generator(&tree, &c, &AdaptedProcess::from_fn(&tree, |v| v as f64), &z);
        assert!(tree.interior().all(|v| frozen[v] == 2.5));
    }

    #[test]
    fn freeze_y_plus_z() {
        // g = y + z.e1 on T2 with w = M, v = 1: root value 0 + 1.
        let tree = t2();
        let s = 0.5f64.sqrt();
        let m = AdaptedProcess::from_vec(vec![0.0, s, -s, 2.0 * s, 0.0, 0.0, -2.0 * s]);
        let g = GeneratorSpec::affine(0.0, 1.0, vec![1.0]);
        let ones = vec![DVector::from_element(1, 1.0); tree.len()];
        let frozen = freeze_generator(&tree, &g, &m, &ones);
        assert_eq!(frozen[0], 1.0);
        assert!((frozen[1] - (s + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let tree = t2();
        let err = RbsdeData::without_shift(&tree, GeneratorSpec::zero(), vec![0.0; 4], AdaptedProcess::constant(&tree, 1.0))
            .unwrap_err();
        assert!(matches!(err, Error::ObstacleAboveTerminal { node: 3, .. }));
        let mut zeta = AdaptedProcess::constant(&tree, 1.0);
        zeta[2] = -1.0;
        let err = DrbsdeData::without_shift(&tree, GeneratorSpec::zero(), vec![0.0; 4], AdaptedProcess::zeros(&tree), zeta)
            .unwrap_err();
        assert!(matches!(err, Error::ObstacleOrderViolation { node: 2, .. }));
        assert!(matches!(
            RbsdeData::without_shift(&tree, GeneratorSpec::zero(), vec![0.0; 3], AdaptedProcess::zeros(&tree)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn independence_spot_check() {
        let tree = t2();
        let liar = GeneratorSpec::new("liar", 0.0, false, |_, y, _| y).unwrap();
        assert!(liar.check_declared_independence(&tree, 1).is_err());
        assert!(GeneratorSpec::constant(1.0).check_declared_independence(&tree, 2).is_ok());
    }
}
