use serde::{Deserialize, Serialize};

use super::{FiltrationTree, NodeId, NodeRecord, Prob, TimeGrid};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub times: Vec<f64>,
    pub clock: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: NodeId,
    pub level: usize,
    pub parent: Option<NodeId>,
    /// Either a float or a `[numerator, denominator]` pair.
    pub p: Prob,
    /// Martingale value at the node, when one is attached.
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Vec<f64>>,
}

/// Serialized form of a tree and (optionally) the martingale values on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub grid: GridDocument,
    pub nodes: Vec<NodeDocument>,
}

impl TreeDocument {
    pub fn from_tree(tree: &FiltrationTree, martingale: Option<&[Vec<f64>]>) -> Self {
        let grid = GridDocument {
            times: tree.grid().times().to_vec(),
            clock: tree.grid().clock().to_vec(),
        };
        let nodes = tree
            .nodes()
            .iter()
            .enumerate()
            .map(|(id, node)| NodeDocument {
                id,
                level: node.level,
                parent: node.parent,
                p: node.prob,
                m: martingale.map(|m| m[id].clone()),
            })
            .collect();
        TreeDocument { grid, nodes }
    }

    /// Rebuilds the tree; returns the martingale values if every node has them.
    pub fn to_tree(&self) -> Result<(FiltrationTree, Option<Vec<Vec<f64>>>)> {
        let grid = TimeGrid::new(self.grid.times.clone(), self.grid.clock.clone())?;
        let mut records = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::InvalidTree(format!("node at index {i} has id {}", n.id)));
            }
            records.push(NodeRecord {
                level: n.level,
                parent: n.parent,
                prob: n.p,
            });
        }
        let tree = FiltrationTree::from_records(grid, records)?;
        let with_m = self.nodes.iter().filter(|n| n.m.is_some()).count();
        let martingale = match with_m {
            0 => None,
            k if k == self.nodes.len() => Some(self.nodes.iter().map(|n| n.m.clone().unwrap()).collect()),
            _ => {
                return Err(Error::InvalidTree(
                    "martingale values present on some nodes only".into(),
                ))
            }
        };
        Ok((tree, martingale))
    }
}
