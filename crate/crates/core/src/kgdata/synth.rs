//! Compositional synthetic knowledge graphs.
//!
//! Each relation group owns a block of entities split into a head half and a
//! tail half. Both halves are grids with `east` and `north` background edges,
//! and `link` pairs them cell by cell. All task relations of a group send a
//! head to the tail cell at the same latent offset, so group members are
//! noisy copies of one another and knowledge transfers inside a group. The
//! candidates of a relation are its tail half.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetBundle;
use super::graph::{KnowledgeGraph, Triple, Vocab};
use crate::error::{Error, Result};

const SHIFTS: [(usize, usize); 8] = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2), (2, 2)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub entities: usize,
    /// Task relations; background relations come on top.
    pub relations: usize,
    pub triples_per_relation: usize,
    pub groups: usize,
    /// Fraction of head entities shared by every member of a group.
    pub overlap: f64,
    /// Probability that a tail is replaced by a random entity of the tail half.
    pub noise: f64,
    pub valid_per_group: usize,
    pub test_per_group: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            entities: 200,
            relations: 12,
            triples_per_relation: 40,
            groups: 3,
            overlap: 0.7,
            noise: 0.1,
            valid_per_group: 1,
            test_per_group: 1,
        }
    }
}

/// One half of a group block, laid out row-major on a grid.
struct Half {
    first: usize,
    size: usize,
    width: usize,
}

impl Half {
    fn new(first: usize, size: usize) -> Half {
        Half { first, size, width: (size as f64).sqrt().ceil() as usize }
    }

    fn cell(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    fn at(&self, x: usize, y: usize) -> Option<usize> {
        let i = y * self.width + x;
        (x < self.width && i < self.size).then_some(i)
    }

    fn ids(&self) -> Vec<usize> {
        (self.first..self.first + self.size).collect()
    }
}

impl SynthSpec {
    fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.groups == 0 || self.relations < self.groups {
            return fail(format!("need at least one relation per group ({} relations, {} groups)", self.relations, self.groups));
        }
        if self.entities < 4 * self.groups {
            return fail(format!("{} entities cannot fill {} blocks of at least 4", self.entities, self.groups));
        }
        if self.triples_per_relation < 2 {
            return fail("each relation needs at least 2 triples".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) || !(0.0..1.0).contains(&self.noise) {
            return fail("overlap must lie in [0, 1] and noise in [0, 1)".into());
        }
        let smallest = self.relations / self.groups;
        if smallest < self.valid_per_group + self.test_per_group {
            return fail(format!(
                "groups of {smallest} relations cannot hold {} valid and {} test tasks",
                self.valid_per_group, self.test_per_group
            ));
        }
        if self.relations == self.groups * (self.valid_per_group + self.test_per_group) {
            return fail("no relation is left for training".into());
        }
        Ok(())
    }

    /// Builds the bundle. Identical spec and rng state give identical output.
    pub fn generate<R: Rng>(&self, rng: &mut R) -> Result<DatasetBundle> {
        self.check()?;
        let mut entities = Vocab::new();
        let mut relations = Vocab::new();
        let mut blocks = Vec::with_capacity(self.groups);
        let mut first = 0;
        for g in 0..self.groups {
            let size = self.entities / self.groups + usize::from(g < self.entities % self.groups);
            let heads = Half::new(first, size.div_ceil(2));
            let tails = Half::new(first + heads.size, size / 2);
            for (tag, half) in [("a", &heads), ("b", &tails)] {
                for i in 0..half.size {
                    let (x, y) = half.cell(i);
                    entities.insert(&format!("g{g}_{tag}{x}_{y}"));
                }
            }
            first += size;
            blocks.push((heads, tails));
        }

        let mut background = Vec::new();
        for (g, (a, b)) in blocks.iter().enumerate() {
            let east = relations.insert(&format!("g{g}_east"));
            let north = relations.insert(&format!("g{g}_north"));
            let link = relations.insert(&format!("g{g}_link"));
            for half in [a, b] {
                for i in 0..half.size {
                    let (x, y) = half.cell(i);
                    if let Some(j) = half.at(x + 1, y) {
                        background.push(Triple::new(half.first + i, east, half.first + j));
                    }
                    if let Some(j) = half.at(x, y + 1) {
                        background.push(Triple::new(half.first + i, north, half.first + j));
                    }
                }
            }
            for i in 0..a.size.min(b.size) {
                background.push(Triple::new(a.first + i, link, b.first + i));
            }
        }

        let mut shifts = SHIFTS.to_vec();
        shifts.shuffle(rng);
        let members: Vec<Vec<usize>> =
            (0..self.groups).map(|g| (0..self.relations).filter(|j| j % self.groups == g).collect()).collect();

        let mut tasks = BTreeMap::new();
        let mut candidates = BTreeMap::new();
        let mut groups = BTreeMap::new();
        let mut splits: [Vec<usize>; 3] = Default::default();
        for (g, (a, b)) in blocks.iter().enumerate() {
            if self.triples_per_relation > a.size * b.size {
                return Err(Error::Spec(format!(
                    "group {g}: {} triples per relation exceed the {} available head/tail pairs",
                    self.triples_per_relation,
                    a.size * b.size
                )));
            }
            let (dx, dy) = shifts[g % shifts.len()];
            let offset = dx + dy * b.width;
            // k-th clean tail of head i.
            let clean = |i: usize, k: usize| (i + offset + k) % b.size;
            let n_heads = self.triples_per_relation.min(a.size);
            let n_shared = ((self.overlap * n_heads as f64).ceil() as usize).min(n_heads);
            let mut pool: Vec<usize> = (0..a.size).collect();
            pool.shuffle(rng);
            let shared: Vec<usize> = pool[..n_shared].to_vec();
            let rest_pool: Vec<usize> = pool[n_shared..].to_vec();

            let n = members[g].len();
            for (k, &j) in members[g].iter().enumerate() {
                let r = relations.insert(&format!("g{g}_r{j}"));
                let mut heads = shared.clone();
                heads.extend(rest_pool.choose_multiple(rng, n_heads - n_shared));
                let mut used: HashSet<(usize, usize)> = HashSet::new();
                let mut triples = Vec::with_capacity(self.triples_per_relation);
                // Each round gives every head one more tail until the quota is met.
                'rounds: for round in 0.. {
                    for &h in &heads {
                        if triples.len() == self.triples_per_relation {
                            break 'rounds;
                        }
                        let mut t = clean(h, round);
                        if used.contains(&(h, t)) || rng.gen::<f64>() < self.noise {
                            let free: Vec<usize> =
                                (0..b.size).filter(|&c| c != clean(h, round) && !used.contains(&(h, c))).collect();
                            match free.choose(rng) {
                                Some(&c) => t = c,
                                None if used.contains(&(h, t)) => continue,
                                None => {}
                            }
                        }
                        used.insert((h, t));
                        triples.push(Triple::new(a.first + h, r, b.first + t));
                    }
                }
                tasks.insert(r, triples);
                candidates.insert(r, b.ids());
                groups.insert(r, g);
                let slot = if k + self.test_per_group >= n {
                    2
                } else if k + self.test_per_group + self.valid_per_group >= n {
                    1
                } else {
                    0
                };
                splits[slot].push(r);
            }
        }

        let graph = KnowledgeGraph::new(entities, relations, background);
        let mut bundle = DatasetBundle::new(graph, tasks, splits, candidates)?;
        bundle.groups = Some(groups);
        Ok(bundle)
    }
}

/// Generates a bundle from `spec`.
pub fn synth_generate<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<DatasetBundle> {
    spec.generate(rng)
}
