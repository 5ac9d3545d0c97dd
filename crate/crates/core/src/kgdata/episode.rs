use rand::seq::SliceRandom;
use rand::Rng;

use super::dataset::DatasetBundle;
use super::graph::Triple;
use crate::error::{Error, Result};

/// One few-shot task instance for a single relation.
///
/// `support_neg[i]` and `query_neg[j]` are corrupted tails for the matching
/// positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub relation: usize,
    pub support: Vec<Triple>,
    pub query: Vec<Triple>,
    pub support_neg: Vec<usize>,
    pub query_neg: Vec<usize>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// Uniform draw from `candidates` among tails `t′` with `(h, r, t′)` unknown.
pub fn sample_negative<R: Rng>(bundle: &DatasetBundle, head: usize, relation: usize, rng: &mut R) -> Result<usize> {
    let candidates = bundle.candidates(relation);
    if candidates.is_empty() {
        return Err(Error::Episode(format!("relation {relation} has no candidates")));
    }
    for _ in 0..32 {
        let t = *candidates.choose(rng).expect("non-empty");
        if !bundle.is_known(head, relation, t) {
            return Ok(t);
        }
    }
    let valid: Vec<usize> = candidates.iter().copied().filter(|&t| !bundle.is_known(head, relation, t)).collect();
    valid.choose(rng).copied().ok_or_else(|| {
        Error::Episode(format!(
            "no valid negative for head {} of relation {}",
            bundle.graph.entities.name(head),
            bundle.graph.relations.name(relation)
        ))
    })
}

fn with_negatives<R: Rng>(bundle: &DatasetBundle, relation: usize, support: Vec<Triple>, query: Vec<Triple>, rng: &mut R) -> Result<Episode> {
    let support_neg = support.iter().map(|t| sample_negative(bundle, t.head, relation, rng)).collect::<Result<_>>()?;
    let query_neg = query.iter().map(|t| sample_negative(bundle, t.head, relation, rng)).collect::<Result<_>>()?;
    Ok(Episode { relation, support, query, support_neg, query_neg })
}

fn check_size(bundle: &DatasetBundle, relation: usize, shots: usize) -> Result<&[Triple]> {
    let triples = bundle.task(relation);
    if shots == 0 || triples.len() < shots + 1 {
        return Err(Error::Episode(format!(
            "relation {} has {} triples, need at least {}",
            bundle.graph.relations.name(relation),
            triples.len(),
            shots + 1
        )));
    }
    Ok(triples)
}

/// Random training episode: `shots` support pairs and up to `query_cap` queries.
pub fn sample_episode<R: Rng>(
    bundle: &DatasetBundle,
    relation: usize,
    shots: usize,
    query_cap: usize,
    rng: &mut R,
) -> Result<Episode> {
    let mut triples = check_size(bundle, relation, shots)?.to_vec();
    triples.shuffle(rng);
    let query: Vec<Triple> = triples[shots..].iter().take(query_cap).copied().collect();
    triples.truncate(shots);
    with_negatives(bundle, relation, triples, query, rng)
}

/// Evaluation episode: the first `shots` triples in sorted order are the
/// support set and every remaining triple is a query.
pub fn evaluation_episode<R: Rng>(bundle: &DatasetBundle, relation: usize, shots: usize, rng: &mut R) -> Result<Episode> {
    let triples = check_size(bundle, relation, shots)?;
    let (support, query) = triples.split_at(shots);
    with_negatives(bundle, relation, support.to_vec(), query.to_vec(), rng)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, HashSet};

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::kgdata::{KnowledgeGraph, Vocab};

    /// Relation 1 is the task; relation 0 is background.
    fn bundle(task: &[(usize, usize)], cands: &[usize], background: &[(usize, usize)]) -> DatasetBundle {
        let ents: Vocab = (0..10).map(|i| format!("e{i}")).collect();
        let rels: Vocab = ["bg", "task"].into_iter().collect();
        let g = KnowledgeGraph::new(ents, rels, background.iter().map(|&(h, t)| Triple::new(h, 0, t)));
        let tasks = BTreeMap::from([(1, task.iter().map(|&(h, t)| Triple::new(h, 1, t)).collect())]);
        let candidates = BTreeMap::from([(1, cands.to_vec())]);
        DatasetBundle::new(g, tasks, [vec![1], vec![], vec![]], candidates).unwrap()
    }

    #[test]
    fn k_plus_one_triples_give_one_query() {
        let b = bundle(&[(0, 1), (2, 3), (4, 5)], &[1, 3, 5, 6], &[]);
        let ep = sample_episode(&b, 1, 2, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (2, 1));
    }

    #[test]
    fn forced_negative() {
        let b = bundle(&[(0, 1), (0, 2)], &[1, 2, 3], &[]);
        // head 0 is linked to 1 and 2, so 3 is the only valid negative.
        for seed in 0..20 {
            let ep = sample_episode(&b, 1, 1, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(ep.support_neg, vec![3]);
            assert_eq!(ep.query_neg, vec![3]);
        }
    }

    #[test]
    fn candidates_are_extended_with_true_tails() {
        let b = bundle(&[(0, 1), (2, 3)], &[4], &[]);
        assert_eq!(b.candidates(1), &[4, 1, 3]);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let b = bundle(&[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)], &[1, 3, 5, 7, 9], &[(0, 2)]);
        let a = sample_episode(&b, 1, 2, 10, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let c = sample_episode(&b, 1, 2, 10, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn too_few_triples() {
        let b = bundle(&[(0, 1), (2, 3)], &[1, 3, 5], &[]);
        assert!(matches!(sample_episode(&b, 1, 2, 10, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Episode(_))));
    }

    #[test]
    fn no_valid_negative() {
        let b = bundle(&[(0, 1), (2, 1)], &[1], &[]);
        assert!(matches!(sample_episode(&b, 1, 1, 10, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Episode(_))));
    }

    #[test]
    fn evaluation_support_is_sorted_prefix() {
        let b = bundle(&[(4, 5), (0, 1), (2, 3), (6, 7)], &[1, 3, 5, 7, 9], &[]);
        let ep = evaluation_episode(&b, 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ep.support, vec![Triple::new(0, 1, 1), Triple::new(2, 1, 3)]);
        assert_eq!(ep.query.len(), 2);
    }

    proptest! {
        #[test]
        fn negatives_valid_and_sets_disjoint(
            pairs in proptest::collection::hash_set((0usize..10, 0usize..10), 3..40),
            seed in 0u64..1000,
        ) {
            let pairs: Vec<_> = pairs.into_iter().collect();
            let b = bundle(&pairs, &(0..10).collect::<Vec<_>>(), &[(0, 1), (3, 3)]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match sample_episode(&b, 1, 2, 10, &mut rng) {
                Ok(ep) => {
                    let s: HashSet<_> = ep.support.iter().collect();
                    prop_assert!(ep.query.iter().all(|q| !s.contains(q)));
                    for (t, &n) in ep.support.iter().chain(&ep.query).zip(ep.support_neg.iter().chain(&ep.query_neg)) {
                        prop_assert!(!b.is_known(t.head, 1, n));
                    }
                }
                Err(e) => prop_assert!(matches!(e, Error::Episode(_))),
            }
        }
    }
}
