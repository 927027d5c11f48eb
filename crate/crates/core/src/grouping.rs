//! Root/leaf group discovery.
//!
//! Two convolutions are coupled when one feeds the other directly, possibly
//! through weightless layers (relu, add, pooling), and both use the same
//! spatial kernel size. Every connected component of that coupling graph is
//! one group; its topologically first member is the root.

use std::collections::hash_map::Entry;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{LayerKind, ModelGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootGroup {
    #[serde(rename = "root")]
    pub root_id: String,
    #[serde(rename = "leaves")]
    pub leaf_ids: Vec<String>,
}

impl RootGroup {
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.root_id.as_str()).chain(self.leaf_ids.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        1 + self.leaf_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Undirected coupling edges between conv layer ids, as `(earlier, later)`
/// pairs in topological order, sorted.
pub fn build_coupling_graph(model: &ModelGraph) -> Vec<(String, String)> {
    let index: HashMap<&str, usize> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.as_str(), i))
        .collect();

    let mut edges = BTreeSet::new();
    for (ci, layer) in model.layers.iter().enumerate() {
        if layer.kind != LayerKind::Conv2d {
            continue;
        }
        let dims = kernel_dims(model, ci);
        for p in conv_producers(model, &index, ci) {
            if kernel_dims(model, p) == dims {
                edges.insert((p.min(ci), p.max(ci)));
            }
        }
    }
    edges
        .into_iter()
        .map(|(a, b)| (model.layers[a].id.clone(), model.layers[b].id.clone()))
        .collect()
}

fn kernel_dims(model: &ModelGraph, i: usize) -> (usize, usize) {
    let w = model.layers[i].weights.as_ref().expect("conv layers carry weights");
    (w.kh, w.kw)
}

/// Nearest upstream conv layers of layer `i`, looking through weightless layers.
fn conv_producers(model: &ModelGraph, index: &HashMap<&str, usize>, i: usize) -> BTreeSet<usize> {
    let mut found = BTreeSet::new();
    let mut stack: Vec<usize> = model.layers[i].inputs.iter().map(|id| index[id.as_str()]).collect();
    let mut visited = BTreeSet::new();
    while let Some(j) = stack.pop() {
        if !visited.insert(j) {
            continue;
        }
        match model.layers[j].kind {
            LayerKind::Conv2d => {
                found.insert(j);
            }
            // a linear layer is a hard boundary, like a conv of a different shape
            LayerKind::Linear => {}
            _ => stack.extend(model.layers[j].inputs.iter().map(|id| index[id.as_str()])),
        }
    }
    found
}

/// Partitions all conv layers into root groups, ordered by root position.
pub fn find_root_groups(model: &ModelGraph) -> Vec<RootGroup> {
    let conv: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::Conv2d)
        .map(|(i, _)| i)
        .collect();
    let index: HashMap<&str, usize> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.as_str(), i))
        .collect();

    let mut adjacency: HashMap<usize, Vec<usize>> = conv.iter().map(|&c| (c, Vec::new())).collect();
    for (a, b) in build_coupling_graph(model) {
        let (a, b) = (index[a.as_str()], index[b.as_str()]);
        adjacency.get_mut(&a).unwrap().push(b);
        adjacency.get_mut(&b).unwrap().push(a);
    }

    // root_of[layer] = root layer index; assigned by DFS from each unassigned
    // conv in topological order, so the root is the component's first layer.
    let mut root_of: HashMap<usize, usize> = HashMap::new();
    let mut groups = Vec::new();
    for &start in &conv {
        if root_of.contains_key(&start) {
            continue;
        }
        let mut members = vec![start];
        root_of.insert(start, start);
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adjacency[&u] {
                if let Entry::Vacant(slot) = root_of.entry(v) {
                    slot.insert(start);
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        groups.push(RootGroup {
            root_id: model.layers[start].id.clone(),
            leaf_ids: members[1..].iter().map(|&m| model.layers[m].id.clone()).collect(),
        });
    }
    groups
}
