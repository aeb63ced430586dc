//! Seeded random instances for property tests and benchmarks.

use nalgebra::DVector;
use rand::Rng;

use super::Model;
use crate::error::Result;
use crate::generator::GeneratorSpec;
use crate::lattice::{count_stopping_times, AdaptedProcess, FiltrationTree, NodeRecord, PredictableProcess, Prob, TimeGrid};

/// Shape of random trees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeShape {
    pub min_depth: usize,
    pub max_depth: usize,
    /// Children per node are drawn from `1..=max_branching`.
    pub max_branching: usize,
    /// Clock increments are drawn from `[min_dq, max_dq]`.
    pub min_dq: f64,
    pub max_dq: f64,
    /// Resample until the number of stopping rules is at most this.
    pub max_stopping_times: Option<u128>,
}

impl Default for TreeShape {
    fn default() -> Self {
        TreeShape {
            min_depth: 1,
            max_depth: 4,
            max_branching: 3,
            min_dq: 0.05,
            max_dq: 0.5,
            max_stopping_times: None,
        }
    }
}

fn random_grid(rng: &mut impl Rng, depth: usize, shape: &TreeShape) -> Result<TimeGrid> {
    let mut q = vec![0.0];
    for _ in 0..depth {
        let dq = rng.random_range(shape.min_dq..=shape.max_dq);
        q.push(q.last().unwrap() + dq);
    }
    TimeGrid::new(q.clone(), q)
}

fn random_tree(rng: &mut impl Rng, shape: &TreeShape) -> Result<FiltrationTree> {
    let depth = rng.random_range(shape.min_depth..=shape.max_depth);
    let grid = random_grid(rng, depth, shape)?;
    let mut records = vec![NodeRecord {
        level: 0,
        parent: None,
        prob: Prob::ratio(1, 1),
    }];
    let mut current = vec![0usize];
    for k in 0..depth {
        let mut next = Vec::new();
        for &v in &current {
            let b = rng.random_range(1..=shape.max_branching);
            let weights: Vec<u64> = (0..b).map(|_| rng.random_range(1..=9)).collect();
            let total: u64 = weights.iter().sum();
            for w in weights {
                next.push(records.len());
                records.push(NodeRecord {
                    level: k + 1,
                    parent: Some(v),
                    prob: Prob::ratio(w, total),
                });
            }
        }
        current = next;
    }
    FiltrationTree::from_records(grid, records)
}

/// Random martingale of dimension `max_branching - 1` on `tree`: child
/// increments uniform in a box, centred, scaled by `sqrt(dQ)`.
fn random_martingale(rng: &mut impl Rng, tree: &FiltrationTree, dim: usize) -> Vec<DVector<f64>> {
    let mut values = vec![DVector::zeros(dim); tree.len()];
    for v in tree.interior() {
        let children = tree.children(v);
        let raw: Vec<DVector<f64>> = children
            .iter()
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0)))
            .collect();
        let mean = children
            .iter()
            .zip(&raw)
            .fold(DVector::zeros(dim), |acc, (&c, x)| acc + tree.prob(c) * x);
        let scale = tree.dq_after(v).sqrt();
        for (&c, x) in children.iter().zip(&raw) {
            values[c] = &values[v] + scale * (x - &mean);
        }
    }
    values
}

/// Random tree with a martingale that has the representation property.
pub fn random_model(rng: &mut impl Rng, shape: &TreeShape) -> Result<Model> {
    loop {
        let tree = random_tree(rng, shape)?;
        if shape.max_stopping_times.is_some_and(|cap| count_stopping_times(&tree) > cap) {
            continue;
        }
        let dim = shape.max_branching.saturating_sub(1).max(1);
        let values = random_martingale(rng, &tree, dim);
        return Model::new(tree, values);
    }
}

/// Uniform values in `[-scale, scale]` on every node.
pub fn random_adapted(rng: &mut impl Rng, tree: &FiltrationTree, scale: f64) -> AdaptedProcess {
    AdaptedProcess::from_fn(tree, |_| rng.random_range(-scale..=scale))
}

pub fn random_predictable(rng: &mut impl Rng, tree: &FiltrationTree, scale: f64) -> PredictableProcess {
    PredictableProcess::from_fn(tree, |_| rng.random_range(-scale..=scale))
}

/// Obstacles and terminal value with `xi <= zeta`, `xi_T <= eta <= zeta_T`.
#[derive(Clone, Debug)]
pub struct RandomObstacles {
    pub xi: AdaptedProcess,
    pub zeta: AdaptedProcess,
    pub eta: Vec<f64>,
}

pub fn random_obstacles(rng: &mut impl Rng, tree: &FiltrationTree) -> RandomObstacles {
    let xi = random_adapted(rng, tree, 1.0);
    // Gaps are zero about one time in ten, so pinned nodes occur.
    let zeta = AdaptedProcess::from_fn(tree, |v| {
        let gap = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..=1.5) };
        xi[v] + gap
    });
    let eta = tree
        .leaves()
        .iter()
        .map(|&v| xi[v] + rng.random_range(0.0..=1.0) * (zeta[v] - xi[v]))
        .collect();
    RandomObstacles { xi, zeta, eta }
}

/// A driver with m-Lipschitz constant at most `max_lipschitz` on `model`.
///
/// Drivers are affine, sine or softplus in `y` plus `kappa u . (m_v z)` for
/// a random unit vector `u`, so the declared constant `|a| + |kappa|` bounds
/// the true one. The driver reads the bracket factor by node id and is only
/// meaningful on `model`.
pub fn random_lipschitz_generator(rng: &mut impl Rng, model: &Model, max_lipschitz: f64) -> GeneratorSpec {
    let dim = model.dim();
    let a = rng.random_range(-1.0..=1.0) * max_lipschitz / 2.0;
    let kappa = rng.random_range(-1.0..=1.0) * max_lipschitz / 2.0;
    let offset = rng.random_range(-1.0..=1.0);
    let raw = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0));
    let u = if raw.norm() > 0.0 { raw.normalize() } else { DVector::zeros(dim) };
    // u^T m_v, one row per node
    let rows: Vec<Vec<f64>> = (0..model.tree.len())
        .map(|v| (u.transpose() * model.m.bracket_factor(v)).iter().copied().collect())
        .collect();
    let zterm = move |node: usize, z: &[f64]| -> f64 { kappa * rows[node].iter().zip(z).map(|(p, q)| p * q).sum::<f64>() };
    let lip = a.abs() + kappa.abs();
    let g = match rng.random_range(0..3) {
        0 => GeneratorSpec::new("random-affine", lip, true, move |p, y, z| a * y + zterm(p.node, z) + offset * p.t),
        1 => GeneratorSpec::new("random-sine", lip, true, move |p, y, z| a * y.sin() + zterm(p.node, z) + offset),
        _ => GeneratorSpec::new("random-softplus", lip, true, move |p, y, z| {
            a * crate::generator::softplus(y) + zterm(p.node, z) - offset
        }),
    };
    g.expect("declared constant is finite and nonnegative")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::martingale::{estimate_m_lipschitz, LipschitzSampling};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn models_are_valid_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = TreeShape {
            max_stopping_times: Some(20_000),
            ..Default::default()
        };
        for _ in 0..30 {
            let m = random_model(&mut rng, &shape).unwrap();
            assert!(count_stopping_times(&m.tree) <= 20_000);
            assert_eq!(m.dim(), 2);
        }
    }

    #[test]
    fn obstacles_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, &TreeShape::default()).unwrap();
        let o = random_obstacles(&mut rng, &m.tree);
        for v in 0..m.tree.len() {
            assert!(o.xi[v] <= o.zeta[v]);
        }
        for (&leaf, &e) in m.tree.leaves().iter().zip(&o.eta) {
            assert!(o.xi[leaf] <= e && e <= o.zeta[leaf]);
        }
    }

    #[test]
    fn declared_constant_dominates_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_model(&mut rng, &TreeShape::default()).unwrap();
            let g = random_lipschitz_generator(&mut rng, &m, 1.0);
            assert!(g.lipschitz() <= 1.0 + 1e-12);
            let est = estimate_m_lipschitz(&m.tree, &m.m, &g, LipschitzSampling::default());
            assert!(est <= g.lipschitz() * (1.0 + 1e-9) + 1e-12, "{est} > {}", g.lipschitz());
        }
    }
}
