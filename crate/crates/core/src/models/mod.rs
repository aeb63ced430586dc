//! Scenario builders: random walks, default indicators, products of
//! independent models, and option payoffs.

mod payoffs;
pub mod random;

pub use payoffs::{build_payoffs, PayoffConfig, PayoffKind, Payoffs, PriceWalk};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{build_tree, FiltrationTree, LevelBranching, NodeRecord, Prob, TimeGrid, TreeDocument};
use crate::martingale::{attach_martingale, MartingaleM};

/// A tree together with the martingale driving the equation.
#[derive(Clone, Debug)]
pub struct Model {
    pub tree: FiltrationTree,
    pub m: MartingaleM,
}

impl Model {
    pub fn new(tree: FiltrationTree, values: Vec<DVector<f64>>) -> Result<Self> {
        let m = attach_martingale(&tree, values)?;
        Ok(Model { tree, m })
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn to_document(&self) -> TreeDocument {
        let values: Vec<Vec<f64>> = self.m.values().iter().map(|x| x.iter().copied().collect()).collect();
        TreeDocument::from_tree(&self.tree, Some(&values))
    }

    pub fn from_document(doc: &TreeDocument) -> Result<Self> {
        let (tree, values) = doc.to_tree()?;
        let values = values.ok_or_else(|| Error::InvalidTree("model file has no martingale values".into()))?;
        let values = values.into_iter().map(DVector::from_vec).collect();
        Model::new(tree, values)
    }
}

/// Model selection as it appears in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    BrownianWalk {
        steps: usize,
        horizon: f64,
    },
    DefaultIndicator {
        steps: usize,
        horizon: f64,
        lambda: f64,
    },
    Product {
        factors: Vec<ModelConfig>,
    },
    /// A tree document with martingale values on every node.
    File {
        path: String,
    },
    Inline {
        tree: TreeDocument,
    },
    /// Random tree drawn from the scenario seed.
    Random {
        #[serde(default = "random_min_depth")]
        min_depth: usize,
        max_depth: usize,
        max_branching: usize,
        #[serde(default = "random_max_dq")]
        max_dq: f64,
    },
}

fn random_min_depth() -> usize {
    1
}

fn random_max_dq() -> f64 {
    0.34
}

impl ModelConfig {
    /// Builds the model; `File` paths are resolved relative to `base` and
    /// `seed` drives `Random`.
    pub fn build(&self, base: &std::path::Path, seed: u64) -> Result<Model> {
        match self {
            ModelConfig::BrownianWalk { steps, horizon } => build_brownian_walk(*steps, *horizon),
            ModelConfig::DefaultIndicator { steps, horizon, lambda } => {
                build_default_indicator(*steps, *horizon, *lambda)
            }
            ModelConfig::Product { factors } => {
                let mut iter = factors.iter();
                let first = iter
                    .next()
                    .ok_or_else(|| Error::InvalidData("product model needs at least one factor".into()))?;
                iter.enumerate().try_fold(first.build(base, seed)?, |acc, (i, f)| {
                    product_model(&acc, &f.build(base, seed.wrapping_add(i as u64 + 1))?)
                })
            }
            ModelConfig::File { path } => {
                let text = std::fs::read_to_string(base.join(path))
                    .map_err(|e| Error::InvalidData(format!("cannot read model file {path}: {e}")))?;
                Model::from_document(&serde_json::from_str(&text)?)
            }
            ModelConfig::Inline { tree } => Model::from_document(tree),
            ModelConfig::Random {
                min_depth,
                max_depth,
                max_branching,
                max_dq,
            } => {
                if *min_depth == 0 || min_depth > max_depth || *max_branching == 0 || !(*max_dq >= 0.01) {
                    return Err(Error::InvalidData(
                        "random model needs 1 <= min_depth <= max_depth, max_branching >= 1, max_dq >= 0.01".into(),
                    ));
                }
                let shape = random::TreeShape {
                    min_depth: *min_depth,
                    max_depth: *max_depth,
                    max_branching: *max_branching,
                    min_dq: 0.01,
                    max_dq: *max_dq,
                    max_stopping_times: None,
                };
                random::random_model(&mut ChaCha8Rng::seed_from_u64(seed), &shape)
            }
        }
    }
}

/// Binary walk with `dM = +-sqrt(dQ)`, `Q_t = t`.
pub fn build_brownian_walk(steps: usize, horizon: f64) -> Result<Model> {
    let grid = TimeGrid::uniform(steps, horizon)?;
    let tree = build_tree(grid, &vec![LevelBranching::uniform(2); steps])?;
    let mut values = vec![0.0; tree.len()];
    for v in 1..tree.len() {
        let p = tree.parent(v).expect("non-root");
        let step = tree.dq_after(p).sqrt();
        let first = tree.children(p)[0] == v;
        values[v] = values[p] + if first { step } else { -step };
    }
    Model::new(tree, values.into_iter().map(|x| DVector::from_element(1, x)).collect())
}

/// Compensated single-jump default indicator `M = H - int lambda 1{alive} dQ`.
///
/// An alive node branches into default (probability `lambda dQ`) and
/// survival; a defaulted node has one child with probability 1. With
/// `lambda = 0` alive nodes have a single child as well.
pub fn build_default_indicator(steps: usize, horizon: f64, lambda: f64) -> Result<Model> {
    let grid = TimeGrid::uniform(steps, horizon)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidData(format!("intensity must be finite and >= 0, got {lambda}")));
    }
    for k in 0..steps {
        if lambda * grid.dq(k) >= 1.0 {
            return Err(Error::IntensityTooLarge { lambda, dq: grid.dq(k) });
        }
    }
    let mut records = vec![NodeRecord {
        level: 0,
        parent: None,
        prob: Prob::ratio(1, 1),
    }];
    // (alive, M) per node
    let mut state = vec![(true, 0.0)];
    let mut current = vec![0usize];
    for k in 0..steps {
        let jump = lambda * grid.dq(k);
        let mut next = Vec::new();
        for &v in &current {
            let (alive, m) = state[v];
            let mut push = |prob: Prob, child: (bool, f64)| {
                next.push(records.len());
                records.push(NodeRecord {
                    level: k + 1,
                    parent: Some(v),
                    prob,
                });
                state.push(child);
            };
            if alive && jump > 0.0 {
                push(Prob::Float(jump), (false, m + 1.0 - jump));
                push(Prob::Float(1.0 - jump), (true, m - jump));
            } else {
                push(Prob::ratio(1, 1), (alive, m));
            }
        }
        current = next;
    }
    let tree = FiltrationTree::from_records(grid, records)?;
    Model::new(tree, state.into_iter().map(|(_, m)| DVector::from_element(1, m)).collect())
}

fn product_prob(a: Prob, b: Prob) -> Prob {
    if let (Prob::Ratio([n1, d1]), Prob::Ratio([n2, d2])) = (a, b) {
        if let (Some(n), Some(d)) = (n1.checked_mul(n2), d1.checked_mul(d2)) {
            return Prob::Ratio([n, d]);
        }
    }
    Prob::Float(a.value() * b.value())
}

/// Independent product: nodes are pairs of same-level nodes, probabilities
/// multiply and the martingales are stacked.
pub fn product_model(a: &Model, b: &Model) -> Result<Model> {
    if a.tree.grid() != b.tree.grid() {
        return Err(Error::GridMismatch);
    }
    let mut records = vec![NodeRecord {
        level: 0,
        parent: None,
        prob: Prob::ratio(1, 1),
    }];
    let mut pairs = vec![(a.tree.root(), b.tree.root())];
    let mut current = vec![0usize];
    for k in 0..a.tree.depth() {
        let mut next = Vec::new();
        for &v in &current {
            let (i, j) = pairs[v];
            for &ci in a.tree.children(i) {
                for &cj in b.tree.children(j) {
                    next.push(records.len());
                    records.push(NodeRecord {
                        level: k + 1,
                        parent: Some(v),
                        prob: product_prob(a.tree.node(ci).prob, b.tree.node(cj).prob),
                    });
                    pairs.push((ci, cj));
                }
            }
        }
        current = next;
    }
    let tree = FiltrationTree::from_records(a.tree.grid().clone(), records)?;
    let (da, db) = (a.dim(), b.dim());
    let values = pairs
        .iter()
        .map(|&(i, j)| {
            let mut x = DVector::zeros(da + db);
            x.rows_mut(0, da).copy_from(a.m.value(i));
            x.rows_mut(da, db).copy_from(b.m.value(j));
            x
        })
        .collect();
    Model::new(tree, values)
}
