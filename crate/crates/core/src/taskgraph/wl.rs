use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::kgdata::KnowledgeGraph;

/// Discrete WL edge-subtree labels, `labels[m][node]` for depth `m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WlLabels {
    labels: Vec<Vec<usize>>,
}

impl WlLabels {
    pub fn depth(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn at(&self, m: usize) -> &[usize] {
        &self.labels[m]
    }

    pub fn label(&self, m: usize, node: usize) -> usize {
        self.labels[m][node]
    }
}

/// Labels for an arbitrary line graph given each node's relation type.
///
/// Depth 0 is the relation id. Depth `m` relabels the pair (own label,
/// sorted neighbor labels) at depth `m - 1`; distinct pairs are numbered in
/// sorted order, so the labeling does not depend on node order.
pub fn wl_labels(relations: &[usize], adj: &[Vec<usize>], depth: usize) -> WlLabels {
    assert_eq!(relations.len(), adj.len(), "one neighbor list per node");
    let mut labels = vec![relations.to_vec()];
    for _ in 0..depth {
        let prev = labels.last().expect("depth 0 present");
        let keys: Vec<(usize, Vec<usize>)> = adj
            .iter()
            .enumerate()
            .map(|(i, nbrs)| {
                let mut ms: Vec<usize> = nbrs.iter().map(|&j| prev[j]).collect();
                ms.sort_unstable();
                (prev[i], ms)
            })
            .collect();
        let mut dict: BTreeMap<&(usize, Vec<usize>), usize> = keys.iter().map(|k| (k, 0)).collect();
        for (id, v) in dict.values_mut().enumerate() {
            *v = id;
        }
        let next = keys.iter().map(|k| dict[k]).collect();
        labels.push(next);
    }
    WlLabels { labels }
}

/// Labels for every background triple of `graph`.
pub fn wl_edge_labels(graph: &KnowledgeGraph, depth: usize) -> WlLabels {
    let rels: Vec<usize> = graph.triples().iter().map(|t| t.relation).collect();
    wl_labels(&rels, &graph.build_edge_neighbors(), depth)
}

/// `(1/nn′) Σ_m Σ_{r∈S} Σ_{r′∈S′} δ(f_m(r), f_m(r′))` over node indices.
pub fn wl_set_kernel(s: &[usize], s_prime: &[usize], labels: &WlLabels, depth: usize) -> Result<f64> {
    if s.is_empty() || s_prime.is_empty() {
        return Err(Error::Contract("WL set kernel needs two non-empty sets".into()));
    }
    if depth > labels.depth() {
        return Err(Error::Contract(format!("labels computed to depth {}, asked for {depth}", labels.depth())));
    }
    let mut matches: u64 = 0;
    for m in 0..=depth {
        let mut counts: HashMap<usize, u64> = HashMap::new();
        for &i in s {
            *counts.entry(labels.label(m, i)).or_default() += 1;
        }
        matches += s_prime.iter().map(|&j| counts.get(&labels.label(m, j)).copied().unwrap_or(0)).sum::<u64>();
    }
    Ok(matches as f64 / (s.len() * s_prime.len()) as f64)
}
