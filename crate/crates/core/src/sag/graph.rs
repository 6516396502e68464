use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::search::{Evaluator, MseRecord};
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::perturbation::PatchSubset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SagNode {
    pub id: usize,
    pub patches: Vec<usize>,
    pub confidence: f64,
    pub is_root: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SagEdge {
    pub from: usize,
    pub to: usize,
}

/// Roots are diverse MSEs; every edge removes one patch from its source node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sag {
    pub image_id: String,
    pub class_index: usize,
    pub grid: GridDims,
    pub full_confidence: f64,
    pub nodes: Vec<SagNode>,
    pub edges: Vec<SagEdge>,
}

/// Roots, their one-patch reductions and those reductions' one-patch
/// reductions, with nodes shared across roots by subset.
pub fn build_sag<S: Scorer + ?Sized>(eval: &Evaluator<'_, S>, image_id: &str, roots: &[MseRecord]) -> Result<Sag> {
    let grid = eval.grid();
    let n = grid.patch_count();
    if let Some(bad) = roots.iter().find(|r| r.subset.patch_count() != n) {
        return Err(Error::input(format!("root {:?} is not on the {n}-patch grid", bad.subset.members())));
    }
    let mut ids: BTreeMap<PatchSubset, usize> = BTreeMap::new();
    let mut nodes: Vec<SagNode> = Vec::new();
    let mut edges: BTreeSet<SagEdge> = BTreeSet::new();
    let mut node = |subset: &PatchSubset, is_root: bool| -> usize {
        if let Some(&id) = ids.get(subset) {
            nodes[id].is_root |= is_root;
            return id;
        }
        let id = nodes.len();
        nodes.push(SagNode {
            id,
            patches: subset.members().to_vec(),
            confidence: eval.confidence(subset),
            is_root,
        });
        ids.insert(subset.clone(), id);
        id
    };
    for root in roots {
        let r = node(&root.subset, true);
        for &p in root.subset.members() {
            let child = root.subset.without(p);
            let c = node(&child, false);
            edges.insert(SagEdge { from: r, to: c });
            for &q in child.members() {
                let g = node(&child.without(q), false);
                edges.insert(SagEdge { from: c, to: g });
            }
        }
    }
    let sag = Sag {
        image_id: image_id.to_string(),
        class_index: eval.class_index(),
        grid: GridDims { rows: grid.rows, cols: grid.cols },
        full_confidence: eval.full_confidence(),
        nodes,
        edges: edges.into_iter().collect(),
    };
    sag.validate()?;
    Ok(sag)
}

impl Sag {
    pub fn roots(&self) -> impl Iterator<Item = &SagNode> {
        self.nodes.iter().filter(|n| n.is_root)
    }

    pub fn in_degree(&self, id: usize) -> usize {
        self.edges.iter().filter(|e| e.to == id).count()
    }

    /// Checks ids, patch ranges, that every edge removes exactly one patch,
    /// and that every node lies within two edges of a root.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.rows * self.grid.cols;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Format(format!("node {i} carries id {}", node.id)));
            }
            if node.patches.windows(2).any(|w| w[0] >= w[1]) || node.patches.iter().any(|&p| p >= n) {
                return Err(Error::Format(format!("node {i} has invalid patches")));
            }
            if !(0.0..=1.0).contains(&node.confidence) {
                return Err(Error::Format(format!("node {i} confidence out of range")));
            }
        }
        for e in &self.edges {
            let (Some(from), Some(to)) = (self.nodes.get(e.from), self.nodes.get(e.to)) else {
                return Err(Error::Format(format!("edge {}->{} references a missing node", e.from, e.to)));
            };
            let removes_one = from.patches.len() == to.patches.len() + 1
                && to.patches.iter().all(|p| from.patches.binary_search(p).is_ok());
            if !removes_one {
                return Err(Error::Format(format!("edge {}->{} does not remove exactly one patch", e.from, e.to)));
            }
        }
        let mut depth: Vec<Option<usize>> = self.nodes.iter().map(|n| n.is_root.then_some(0)).collect();
        for level in 0..2 {
            for e in &self.edges {
                if depth[e.from] == Some(level) && depth[e.to].is_none() {
                    depth[e.to] = Some(level + 1);
                }
            }
        }
        if let Some(i) = depth.iter().position(Option::is_none) {
            return Err(Error::Format(format!("node {i} is not within two removals of a root")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("SAG serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sag: Sag = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        sag.validate()?;
        Ok(sag)
    }

    /// Graphviz rendering; nodes are labeled with their patches and confidence.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph sag {\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n");
        for n in &self.nodes {
            let patches: Vec<String> = n.patches.iter().map(ToString::to_string).collect();
            let style = if n.is_root { ", style=bold" } else { "" };
            let _ = writeln!(out, "  n{} [label=\"{{{}}}\\n{:.3}\"{style}];", n.id, patches.join(","), n.confidence);
        }
        for e in &self.edges {
            let _ = writeln!(out, "  n{} -> n{};", e.from, e.to);
        }
        out.push_str("}\n");
        out
    }
}
