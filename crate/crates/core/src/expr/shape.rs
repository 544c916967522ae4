//! Fixed tree shapes and the operator sequences that fill them.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::ops::{BinaryOp, CombinerOp, OperatorLibrary, UnaryOp};
use crate::error::FexError;

/// Which operator set a slot draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Combiner,
    Unary,
    Binary,
}

/// A slot together with the tree position it fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    Combiner { leaf: usize },
    Unary { leaf: usize },
    /// Internal node, heap-indexed (root = 0).
    Binary { node: usize },
}

impl SlotRole {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotRole::Combiner { .. } => SlotKind::Combiner,
            SlotRole::Unary { .. } => SlotKind::Unary,
            SlotRole::Binary { .. } => SlotKind::Binary,
        }
    }
}

/// A complete binary tree of binary operators whose leaves are
/// (combiner, unary) input layers.
///
/// `depth = 1` is a single leaf; `depth = 2` is the default
/// `B(leaf₁, leaf₂)` tree. Slots are laid out in post-order, so the default
/// tree reads `(combiner₁, unary₁, combiner₂, unary₂, root)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeShape {
    depth: u8,
}

impl Default for TreeShape {
    fn default() -> Self {
        TreeShape { depth: 2 }
    }
}

impl TreeShape {
    pub const MAX_DEPTH: u8 = 4;

    pub fn new(depth: u8) -> Result<Self, FexError> {
        if depth == 0 || depth > Self::MAX_DEPTH {
            return Err(FexError::InvalidShape(format!(
                "tree depth must be in 1..={}, got {depth}",
                Self::MAX_DEPTH
            )));
        }
        Ok(TreeShape { depth })
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn num_leaves(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn num_internal(&self) -> usize {
        self.num_leaves() - 1
    }

    /// Sequence length `s`.
    pub fn num_slots(&self) -> usize {
        2 * self.num_leaves() + self.num_internal()
    }

    pub fn slots(&self) -> Vec<SlotRole> {
        let mut out = Vec::with_capacity(self.num_slots());
        self.post_order(0, &mut out);
        out
    }

    fn post_order(&self, node: usize, out: &mut Vec<SlotRole>) {
        let internal = self.num_internal();
        if node >= internal {
            let leaf = node - internal;
            out.push(SlotRole::Combiner { leaf });
            out.push(SlotRole::Unary { leaf });
        } else {
            self.post_order(2 * node + 1, out);
            self.post_order(2 * node + 2, out);
            out.push(SlotRole::Binary { node });
        }
    }
}

/// Operator indices, one per slot of a [`TreeShape`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OperatorSequence(pub Vec<usize>);

impl OperatorSequence {
    pub fn new(choices: Vec<usize>) -> Self {
        OperatorSequence(choices)
    }

    pub fn choices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks every index against its slot's operator set.
    pub fn validate(&self, shape: &TreeShape, library: &OperatorLibrary) -> Result<(), FexError> {
        let slots = shape.slots();
        if self.0.len() != slots.len() {
            return Err(FexError::SequenceLength {
                expected: slots.len(),
                got: self.0.len(),
            });
        }
        for (slot, (role, &idx)) in slots.iter().zip(&self.0).enumerate() {
            let size = library.len_for(role.kind());
            if idx >= size {
                return Err(FexError::InvalidOperator {
                    slot,
                    index: idx,
                    size,
                });
            }
        }
        Ok(())
    }

    /// Resolves indices into concrete operators.
    pub fn decode(&self, shape: &TreeShape, library: &OperatorLibrary) -> Result<DecodedTree, FexError> {
        self.validate(shape, library)?;
        let mut leaves = vec![(CombinerOp::Sum, UnaryOp::plain(super::UnaryKind::Zero)); shape.num_leaves()];
        let mut nodes = vec![BinaryOp::Add; shape.num_internal()];
        for (role, &idx) in shape.slots().iter().zip(&self.0) {
            match *role {
                SlotRole::Combiner { leaf } => leaves[leaf].0 = library.combiners[idx],
                SlotRole::Unary { leaf } => leaves[leaf].1 = library.unaries[idx],
                SlotRole::Binary { node } => nodes[node] = library.binaries[idx],
            }
        }
        Ok(DecodedTree { leaves, nodes })
    }

    /// Human-readable form, e.g. `(prod,sin*21,sum,1,mul)`.
    pub fn describe(&self, shape: &TreeShape, library: &OperatorLibrary) -> String {
        let parts: Vec<String> = shape
            .slots()
            .iter()
            .zip(&self.0)
            .map(|(role, &i)| match role.kind() {
                SlotKind::Combiner => library
                    .combiners
                    .get(i)
                    .map_or("?".into(), |c| c.symbol().to_string()),
                SlotKind::Unary => library.unaries.get(i).map_or("?".into(), |u| u.name()),
                SlotKind::Binary => library.binaries.get(i).map_or("?".into(), |b| {
                    match b {
                        BinaryOp::Add => "add",
                        BinaryOp::Sub => "sub",
                        BinaryOp::Mul => "mul",
                    }
                    .to_string()
                }),
            })
            .collect();
        format!("({})", parts.join(","))
    }
}

impl fmt::Display for OperatorSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Operators of a sequence placed on the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedTree {
    pub leaves: Vec<(CombinerOp, UnaryOp)>,
    /// Heap-ordered internal nodes.
    pub nodes: Vec<BinaryOp>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_layout() {
        let shape = TreeShape::default();
        assert_eq!(shape.num_slots(), 5);
        assert_eq!(
            shape.slots(),
            vec![
                SlotRole::Combiner { leaf: 0 },
                SlotRole::Unary { leaf: 0 },
                SlotRole::Combiner { leaf: 1 },
                SlotRole::Unary { leaf: 1 },
                SlotRole::Binary { node: 0 },
            ]
        );
    }

    #[test]
    fn slot_counts_by_depth() {
        assert_eq!(TreeShape::new(1).unwrap().num_slots(), 2);
        assert_eq!(TreeShape::new(3).unwrap().num_slots(), 11);
        assert!(TreeShape::new(0).is_err());
    }

    #[test]
    fn invalid_index_reports_slot() {
        let lib = OperatorLibrary::default();
        let seq = OperatorSequence::new(vec![0, 3, 1, 99, 2]);
        match seq.validate(&TreeShape::default(), &lib) {
            Err(FexError::InvalidOperator { slot, index, .. }) => {
                assert_eq!(slot, 3);
                assert_eq!(index, 99);
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_root = OperatorSequence::new(vec![0, 0, 0, 0, 3]);
        assert!(matches!(
            bad_root.validate(&TreeShape::default(), &lib),
            Err(FexError::InvalidOperator { slot: 4, .. })
        ));
    }
}
