//! Finite filtration trees.
//!
//! A [`FiltrationTree`] is an explicit (non-recombining) probability tree with
//! one level per grid time. Node ids are assigned level-major, so every node
//! at level `k` has a smaller id than every node at level `k + 1`. Processes
//! are stored as dense vectors indexed by node id.
//!
//! Predictable quantities (integrands, reflection increments, bracket
//! factors) attach to the interval `(t_k, t_{k+1}]` and are stored at the
//! time-`t_k` node, i.e. the left endpoint carries the information.

mod grid;
mod json;
mod process;
mod stopping;

pub use grid::TimeGrid;
pub use json::{GridDocument, NodeDocument, TreeDocument};
pub use process::{AdaptedProcess, PredictableProcess, VectorProcess};
pub use stopping::{count_stopping_times, enumerate_stopping_times, visit_stopping_frontiers, StoppingTime};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Tolerance on the sum of child probabilities.
pub const PROBABILITY_SUM_TOL: f64 = 1e-14;

/// A transition probability, kept as an exact ratio when one was supplied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prob {
    Ratio([u64; 2]),
    Float(f64),
}

impl Prob {
    pub fn ratio(num: u64, den: u64) -> Self {
        Prob::Ratio([num, den])
    }

    pub fn value(&self) -> f64 {
        match *self {
            Prob::Ratio([n, d]) => n as f64 / d as f64,
            Prob::Float(p) => p,
        }
    }

    fn is_positive(&self) -> bool {
        match *self {
            Prob::Ratio([n, d]) => n > 0 && d > 0,
            Prob::Float(p) => p.is_finite() && p > 0.0,
        }
    }
}

impl From<f64> for Prob {
    fn from(p: f64) -> Self {
        Prob::Float(p)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub level: usize,
    pub parent: Option<NodeId>,
    pub prob: Prob,
    pub children: Vec<NodeId>,
}

/// Input record for [`FiltrationTree::from_records`].
#[derive(Clone, Debug)]
pub struct NodeRecord {
    pub level: usize,
    pub parent: Option<NodeId>,
    pub prob: Prob,
}

#[derive(Clone, Debug)]
pub struct FiltrationTree {
    grid: TimeGrid,
    nodes: Vec<Node>,
    probs: Vec<f64>,
    levels: Vec<Vec<NodeId>>,
    position: Vec<usize>,
    reach: Vec<f64>,
}

/// Child probabilities applied uniformly to every node of one level.
#[derive(Clone, Debug)]
pub struct LevelBranching(pub Vec<Prob>);

impl LevelBranching {
    pub fn uniform(branches: usize) -> Self {
        LevelBranching(vec![Prob::ratio(1, branches as u64); branches])
    }
}

/// Builds a tree in which every node of level `k` has the children listed in
/// `branching[k]`.
pub fn build_tree(grid: TimeGrid, branching: &[LevelBranching]) -> Result<FiltrationTree> {
    if branching.len() != grid.steps() {
        return Err(Error::InvalidTree(format!(
            "branching spec has {} levels, grid has {} steps",
            branching.len(),
            grid.steps()
        )));
    }
    let mut records = vec![NodeRecord {
        level: 0,
        parent: None,
        prob: Prob::ratio(1, 1),
    }];
    let mut current = vec![0usize];
    for (k, spec) in branching.iter().enumerate() {
        if spec.0.is_empty() {
            return Err(Error::InvalidTree(format!("level {k} has branching factor 0")));
        }
        let mut next = Vec::with_capacity(current.len() * spec.0.len());
        for &parent in &current {
            for &prob in &spec.0 {
                next.push(records.len());
                records.push(NodeRecord {
                    level: k + 1,
                    parent: Some(parent),
                    prob,
                });
            }
        }
        current = next;
    }
    FiltrationTree::from_records(grid, records)
}

impl FiltrationTree {
    /// Validates and assembles a tree from level-major node records.
    pub fn from_records(grid: TimeGrid, records: Vec<NodeRecord>) -> Result<Self> {
        let depth = grid.steps();
        let n = records.len();
        if n == 0 {
            return Err(Error::InvalidTree("no nodes".into()));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(n);
        let mut levels: Vec<Vec<NodeId>> = vec![Vec::new(); depth + 1];
        let mut position = Vec::with_capacity(n);
        for (id, rec) in records.into_iter().enumerate() {
            if rec.level > depth {
                return Err(Error::InvalidTree(format!(
                    "node {id} at level {} beyond grid depth {depth}",
                    rec.level
                )));
            }
            if let Some(prev) = nodes.last() {
                if prev.level > rec.level {
                    return Err(Error::InvalidTree(format!("node {id} breaks level-major ordering")));
                }
            }
            match (rec.level, rec.parent) {
                (0, None) => {
                    if id != 0 {
                        return Err(Error::InvalidTree("more than one level-0 node".into()));
                    }
                }
                (0, Some(_)) => {
                    return Err(Error::InvalidTree(format!("root node {id} has a parent")));
                }
                (_, None) => {
                    return Err(Error::InvalidTree(format!("node {id} has no parent")));
                }
                (level, Some(p)) => {
                    if p >= id || nodes[p].level + 1 != level {
                        return Err(Error::InvalidTree(format!(
                            "node {id} at level {level} has parent {p} on the wrong level"
                        )));
                    }
                }
            }
            if !rec.prob.is_positive() {
                return Err(Error::InvalidProbabilities {
                    node: id,
                    reason: "probability must be strictly positive".into(),
                });
            }
            if let Some(p) = rec.parent {
                nodes[p].children.push(id);
            }
            position.push(levels[rec.level].len());
            levels[rec.level].push(id);
            nodes.push(Node {
                level: rec.level,
                parent: rec.parent,
                prob: rec.prob,
                children: Vec::new(),
            });
        }
        for (k, level) in levels.iter().enumerate() {
            if level.is_empty() {
                return Err(Error::InvalidTree(format!("level {k} is empty")));
            }
        }
        let probs: Vec<f64> = nodes.iter().map(|node| node.prob.value()).collect();
        for (id, node) in nodes.iter().enumerate() {
            if node.level < depth {
                if node.children.is_empty() {
                    return Err(Error::InvalidTree(format!("non-terminal node {id} has no children")));
                }
                let sum: f64 = node.children.iter().map(|&c| probs[c]).sum();
                if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
                    return Err(Error::InvalidProbabilities {
                        node: id,
                        reason: format!("child probabilities sum to {sum}"),
                    });
                }
            }
        }
        let mut reach = vec![0.0; n];
        reach[0] = 1.0;
        for id in 1..n {
            let parent = nodes[id].parent.expect("validated above");
            reach[id] = reach[parent] * probs[id];
        }
        Ok(FiltrationTree {
            grid,
            nodes,
            probs,
            levels,
            position,
            reach,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Number of steps `N`; levels run from 0 to `N`.
    pub fn depth(&self) -> usize {
        self.grid.steps()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, v: NodeId) -> &Node {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn level(&self, k: usize) -> &[NodeId] {
        &self.levels[k]
    }

    pub fn level_of(&self, v: NodeId) -> usize {
        self.nodes[v].level
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.levels[self.depth()]
    }

    /// Index of `v` within its level.
    pub fn position(&self, v: NodeId) -> usize {
        self.position[v]
    }

    pub fn children(&self, v: NodeId) -> &[NodeId] {
        &self.nodes[v].children
    }

    pub fn parent(&self, v: NodeId) -> Option<NodeId> {
        self.nodes[v].parent
    }

    /// Transition probability from the parent to `v` (1 for the root).
    pub fn prob(&self, v: NodeId) -> f64 {
        self.probs[v]
    }

    /// Unconditional probability of reaching `v`.
    pub fn reach(&self, v: NodeId) -> f64 {
        self.reach[v]
    }

    pub fn is_terminal(&self, v: NodeId) -> bool {
        self.nodes[v].level == self.depth()
    }

    /// Clock increment `Q_{k+1} - Q_k` following a node of level `k`.
    pub fn dq_after(&self, v: NodeId) -> f64 {
        self.grid.dq(self.nodes[v].level)
    }

    /// Non-terminal nodes in id order.
    pub fn interior(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.len()).filter(move |&v| !self.is_terminal(v))
    }

    /// Root-to-`v` path, inclusive.
    pub fn path(&self, v: NodeId) -> Vec<NodeId> {
        let mut path = vec![v];
        let mut cur = v;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// One-step conditional expectation `E_v[f(child)]`.
    pub fn expect_children(&self, v: NodeId, mut f: impl FnMut(NodeId) -> f64) -> f64 {
        self.nodes[v]
            .children
            .iter()
            .map(|&c| self.probs[c] * f(c))
            .sum()
    }

    /// Conditional expectation onto level `to` of the level-`from` values of `x`.
    ///
    /// Returns one value per node of level `to`, in level order. Iterates the
    /// one-step operator, so the tower property holds by construction.
    pub fn conditional_expectation(&self, x: &AdaptedProcess, from: usize, to: usize) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "process has {} values, tree has {} nodes",
                x.len(),
                self.len()
            )));
        }
        if to > from || from > self.depth() {
            return Err(Error::LevelMismatch(format!(
                "cannot condition level {from} values on level {to} (depth {})",
                self.depth()
            )));
        }
        let mut cur: Vec<f64> = x.values().to_vec();
        for k in (to..from).rev() {
            for &v in &self.levels[k] {
                cur[v] = self.expect_children(v, |c| cur[c]);
            }
        }
        Ok(self.levels[to].iter().map(|&v| cur[v]).collect())
    }

    /// Unconditional expectation of a terminal random variable given per leaf
    /// in level order.
    pub fn expect_terminal(&self, eta: &[f64]) -> f64 {
        self.leaves().iter().zip(eta).map(|(&v, &x)| self.reach[v] * x).sum()
    }

    /// Backward closure `V_N = terminal`, `V_v = E_v[V] + running(v)`.
    ///
    /// With `running(v) = g_v dQ` this is `E_t[eta + sum_{j >= k} g_j dQ_j]`.
    pub fn backward_closure(&self, terminal: &[f64], mut running: impl FnMut(NodeId) -> f64) -> AdaptedProcess {
        let mut out = vec![0.0; self.len()];
        for (&v, &x) in self.leaves().iter().zip(terminal) {
            out[v] = x;
        }
        for k in (0..self.depth()).rev() {
            for &v in &self.levels[k] {
                out[v] = self.expect_children(v, |c| out[c]) + running(v);
            }
        }
        AdaptedProcess::from_vec(out)
    }
}
