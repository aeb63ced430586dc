use super::{FiltrationTree, NodeId};
use crate::error::{Error, Result};

/// A stopping rule on a tree: stop or continue at each node.
///
/// Canonical form: terminal nodes are always marked stop, and non-terminal
/// nodes that cannot be reached (an ancestor already stops) are marked
/// continue. Two canonical rules are equal iff they stop on the same paths
/// at the same levels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StoppingTime {
    pub stop: Vec<bool>,
}

impl StoppingTime {
    /// Builds the canonical rule whose first stop nodes are `frontier`.
    pub fn from_frontier(tree: &FiltrationTree, frontier: &[NodeId]) -> Self {
        let mut stop: Vec<bool> = (0..tree.len()).map(|v| tree.is_terminal(v)).collect();
        for &v in frontier {
            stop[v] = true;
        }
        StoppingTime { stop }
    }

    /// Rule that never stops before the horizon.
    pub fn terminal(tree: &FiltrationTree) -> Self {
        Self::from_frontier(tree, &[])
    }

    /// First stop node on each path, in depth-first order.
    pub fn frontier(&self, tree: &FiltrationTree) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![tree.root()];
        while let Some(v) = stack.pop() {
            if self.stop[v] {
                out.push(v);
            } else {
                stack.extend(tree.children(v).iter().rev());
            }
        }
        out
    }

    /// Level at which the rule stops along the path through `leaf`.
    pub fn stopping_level(&self, tree: &FiltrationTree, leaf: NodeId) -> usize {
        tree.path(leaf)
            .into_iter()
            .find(|&v| self.stop[v])
            .map(|v| tree.level_of(v))
            .unwrap_or_else(|| tree.depth())
    }

    pub fn is_valid(&self, tree: &FiltrationTree) -> bool {
        self.stop.len() == tree.len() && tree.leaves().iter().all(|&v| self.stop[v])
    }
}

fn count_from(tree: &FiltrationTree, v: NodeId) -> u128 {
    if tree.is_terminal(v) {
        return 1;
    }
    let product = tree
        .children(v)
        .iter()
        .fold(1u128, |acc, &c| acc.saturating_mul(count_from(tree, c)));
    product.saturating_add(1)
}

/// Number of distinct stopping rules: `S(leaf) = 1`,
/// `S(v) = 1 + prod_children S(c)`. Saturates at `u128::MAX`.
pub fn count_stopping_times(tree: &FiltrationTree) -> u128 {
    count_from(tree, tree.root())
}

/// Calls `f` with the frontier (first stop nodes) of every stopping rule,
/// each exactly once. Rules that stop earlier are visited first; the very
/// first rule stops at the root.
pub fn visit_stopping_frontiers(
    tree: &FiltrationTree,
    cap: u128,
    mut f: impl FnMut(&[NodeId]),
) -> Result<u128> {
    let count = count_stopping_times(tree);
    if count > cap {
        return Err(Error::TooLarge { count, cap });
    }
    let mut pending = vec![tree.root()];
    let mut frontier = Vec::new();
    visit(tree, &mut pending, &mut frontier, &mut f);
    Ok(count)
}

fn visit(
    tree: &FiltrationTree,
    pending: &mut Vec<NodeId>,
    frontier: &mut Vec<NodeId>,
    f: &mut impl FnMut(&[NodeId]),
) {
    let Some(v) = pending.pop() else {
        f(frontier);
        return;
    };
    frontier.push(v);
    visit(tree, pending, frontier, f);
    frontier.pop();
    if !tree.is_terminal(v) {
        let base = pending.len();
        pending.extend(tree.children(v).iter().rev());
        visit(tree, pending, frontier, f);
        pending.truncate(base);
    }
    pending.push(v);
}

/// Materializes every stopping rule of `tree`.
pub fn enumerate_stopping_times(tree: &FiltrationTree, cap: u128) -> Result<Vec<StoppingTime>> {
    let mut out = Vec::new();
    visit_stopping_frontiers(tree, cap, |frontier| {
        out.push(StoppingTime::from_frontier(tree, frontier));
    })?;
    Ok(out)
}
