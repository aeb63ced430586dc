use std::ops::{Index, IndexMut};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{FiltrationTree, NodeId};

/// One real value per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdaptedProcess(Vec<f64>);

/// One real value per non-terminal node, applying to the interval that
/// follows it. Entries at terminal nodes are kept at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictableProcess(Vec<f64>);

/// Vector-valued process indexed by node id (terminal entries are zero for
/// predictable integrands).
pub type VectorProcess = Vec<DVector<f64>>;

macro_rules! process_common {
    ($t:ident) => {
        impl $t {
            pub fn from_vec(values: Vec<f64>) -> Self {
                $t(values)
            }

            pub fn zeros(tree: &FiltrationTree) -> Self {
                $t(vec![0.0; tree.len()])
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn iter(&self) -> std::slice::Iter<'_, f64> {
                self.0.iter()
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                $t(self.0.iter().map(|&x| f(x)).collect())
            }

            pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
                $t(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
            }

            pub fn max_abs(&self) -> f64 {
                self.0.iter().fold(0.0, |acc, x| acc.max(x.abs()))
            }
        }

        impl Index<NodeId> for $t {
            type Output = f64;
            fn index(&self, v: NodeId) -> &f64 {
                &self.0[v]
            }
        }

        impl IndexMut<NodeId> for $t {
            fn index_mut(&mut self, v: NodeId) -> &mut f64 {
                &mut self.0[v]
            }
        }
    };
}

process_common!(AdaptedProcess);
process_common!(PredictableProcess);

impl AdaptedProcess {
    pub fn constant(tree: &FiltrationTree, c: f64) -> Self {
        AdaptedProcess(vec![c; tree.len()])
    }

    pub fn from_fn(tree: &FiltrationTree, f: impl FnMut(NodeId) -> f64) -> Self {
        AdaptedProcess((0..tree.len()).map(f).collect())
    }

    /// Values at the terminal level, in leaf order.
    pub fn terminal(&self, tree: &FiltrationTree) -> Vec<f64> {
        tree.leaves().iter().map(|&v| self.0[v]).collect()
    }
}

impl PredictableProcess {
    pub fn from_fn(tree: &FiltrationTree, mut f: impl FnMut(NodeId) -> f64) -> Self {
        PredictableProcess(
            (0..tree.len())
                .map(|v| if tree.is_terminal(v) { 0.0 } else { f(v) })
                .collect(),
        )
    }

    /// Running sum `A_v = sum of increments strictly before v` along the path.
    pub fn cumulative(&self, tree: &FiltrationTree) -> AdaptedProcess {
        let mut out = vec![0.0; tree.len()];
        for v in 1..tree.len() {
            let p = tree.parent(v).expect("non-root");
            out[v] = out[p] + self.0[p];
        }
        AdaptedProcess(out)
    }
}
