use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple { head, relation, tail }
    }

    pub fn shares_endpoint(&self, other: &Triple) -> bool {
        self.head == other.head || self.head == other.tail || self.tail == other.head || self.tail == other.tail
    }
}

/// Bidirectional name/id map with dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `name`, appending it when unseen.
    pub fn insert(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl<S: AsRef<str>> FromIterator<S> for Vocab {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut v = Vocab::new();
        for s in iter {
            v.insert(s.as_ref());
        }
        v
    }
}

/// Background graph with an incident-edge index per entity.
///
/// Line-graph neighborhoods are computed on demand from the incident index;
/// [`KnowledgeGraph::build_edge_neighbors`] materializes all of them.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    pub relations: Vocab,
    triples: Vec<Triple>,
    incident: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    /// Duplicate triples are dropped, keeping the first occurrence.
    pub fn new(entities: Vocab, relations: Vocab, triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut seen = HashSet::new();
        let triples: Vec<Triple> = triples.into_iter().filter(|t| seen.insert(*t)).collect();
        let mut incident = vec![Vec::new(); entities.len()];
        for (i, t) in triples.iter().enumerate() {
            assert!(t.head < entities.len() && t.tail < entities.len(), "entity id out of range");
            assert!(t.relation < relations.len(), "relation id out of range");
            incident[t.head].push(i);
            if t.tail != t.head {
                incident[t.tail].push(i);
            }
        }
        KnowledgeGraph { entities, relations, triples, incident }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Indices of background triples touching entity `e`.
    pub fn incident(&self, e: usize) -> &[usize] {
        &self.incident[e]
    }

    /// `(relation, tail)` pairs of the triples leaving `e`, in index order.
    pub fn outgoing(&self, e: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.incident[e]
            .iter()
            .map(|&i| self.triples[i])
            .filter(move |t| t.head == e)
            .map(|t| (t.relation, t.tail))
    }

    /// Background triples sharing an endpoint with `triple`, sorted, excluding
    /// the triple itself when it is part of the graph.
    pub fn neighbors_of(&self, triple: &Triple) -> Vec<usize> {
        let mut out: Vec<usize> = self.incident[triple.head].to_vec();
        if triple.tail != triple.head {
            out.extend_from_slice(&self.incident[triple.tail]);
        }
        out.sort_unstable();
        out.dedup();
        out.retain(|&i| self.triples[i] != *triple);
        out
    }

    pub fn edge_neighbors(&self, e: usize) -> Vec<usize> {
        self.neighbors_of(&self.triples[e])
    }

    /// N(e) for every triple `e`.
    pub fn build_edge_neighbors(&self) -> Vec<Vec<usize>> {
        (0..self.triples.len()).map(|e| self.edge_neighbors(e)).collect()
    }
}

/// A bounded piece of the line graph around a set of seed triples.
///
/// Seeds need not belong to the background graph; they occupy the first
/// `num_seeds` nodes. Nodes at the last BFS hop get no neighbor list, which is
/// exact for depth-`hops` recurrences evaluated at the seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLineGraph {
    pub triples: Vec<Triple>,
    pub adj: Vec<Vec<usize>>,
    pub num_seeds: usize,
}

impl LocalLineGraph {
    pub fn around<R: Rng>(graph: &KnowledgeGraph, seeds: &[Triple], hops: usize, cap: usize, rng: &mut R) -> Self {
        let mut triples: Vec<Triple> = seeds.to_vec();
        let mut node_of_bg: HashMap<usize, usize> = HashMap::new();
        let mut depth = vec![0usize; seeds.len()];
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); seeds.len()];
        let mut queue: VecDeque<usize> = (0..seeds.len()).collect();

        while let Some(node) = queue.pop_front() {
            if depth[node] >= hops {
                continue;
            }
            let t = triples[node];
            let mut nbrs: Vec<usize> = (0..seeds.len()).filter(|&j| j != node && seeds[j].shares_endpoint(&t)).collect();
            let mut bg = graph.neighbors_of(&t);
            if bg.len() > cap {
                bg.shuffle(rng);
                bg.truncate(cap);
                bg.sort_unstable();
            }
            for b in bg {
                let id = *node_of_bg.entry(b).or_insert_with(|| {
                    triples.push(graph.triples()[b]);
                    depth.push(depth[node] + 1);
                    adj.push(Vec::new());
                    queue.push_back(triples.len() - 1);
                    triples.len() - 1
                });
                nbrs.push(id);
            }
            adj[node] = nbrs;
        }
        LocalLineGraph { triples, adj, num_seeds: seeds.len() }
    }

    /// The whole line graph, with every background triple as a seed.
    pub fn full(graph: &KnowledgeGraph) -> Self {
        LocalLineGraph {
            triples: graph.triples().to_vec(),
            adj: graph.build_edge_neighbors(),
            num_seeds: graph.triples().len(),
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn relation_ids(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.relation).collect()
    }
}
