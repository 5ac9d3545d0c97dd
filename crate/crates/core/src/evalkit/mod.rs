//! Tail-prediction evaluation: filtered ranking of candidates, MRR and
//! Hits@n, split-level aggregation and report output.

mod report;

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use report::{aggregate, random_baseline, MetricsReport, RankResult, RelationMetrics};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kgdata::{evaluation_episode, DatasetBundle, Episode, Split, Triple};
use crate::metatrain::{
    adaptive_scale, all_train_pool, encode_episode, episode_loss, inner_adapt, task_stats, transfer_merge, EncodedTask,
    EntityRows, EpisodeInputs, Model, Stream,
};
use crate::numkit::{Tape, Tensor};
use crate::relearner::merge_without_transfer;
use crate::scorer::project;

/// Ranks `query.tail` among `candidates` by ascending score.
///
/// Candidates `c ≠ tail` with `filtered(c)` are dropped first. Tied scores
/// put the true tail at the rounded-up middle of its tie group.
pub fn rank_query(
    query: &Triple,
    candidates: &[usize],
    scores: &[f64],
    filtered: impl Fn(usize) -> bool,
) -> Result<RankResult> {
    if candidates.len() != scores.len() {
        return Err(Error::Contract(format!("{} candidates with {} scores", candidates.len(), scores.len())));
    }
    let pos = candidates
        .iter()
        .position(|&c| c == query.tail)
        .ok_or_else(|| Error::Eval(format!("true tail {} is not among the candidates", query.tail)))?;
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("candidate score {bad}")));
    }
    let truth = scores[pos];
    let mut seen = HashSet::new();
    let (mut better, mut tied, mut kept) = (0usize, 0usize, 0usize);
    for (&c, &s) in candidates.iter().zip(scores) {
        if c == query.tail || !seen.insert(c) || filtered(c) {
            continue;
        }
        kept += 1;
        if s < truth {
            better += 1;
        } else if s == truth {
            tied += 1;
        }
    }
    let first = better + 1;
    let last = first + tied;
    Ok(RankResult { query: *query, rank: (first + last).div_ceil(2), candidates: kept + 1 })
}

/// Relation vector, projection vectors and adapted projection rows after
/// the inner step on a support set.
#[derive(Clone, Debug)]
pub struct AdaptedRelation {
    pub relation: Vec<f64>,
    pub relation_proj: Vec<f64>,
    pub entity_proj: HashMap<usize, Vec<f64>>,
}

fn relation_rng(seed: u64, relation: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (relation as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(Stream::Evaluation as u64);
    rng
}

/// Runs the forward pass and inner step for an evaluation episode. The
/// transfer pool is every training relation other than the target, each
/// with its first `shots` triples as support.
pub fn adapt_relation(
    model: &Model,
    bundle: &DatasetBundle,
    episode: &Episode,
    config: &TrainConfig,
    transfer: bool,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptedRelation> {
    let mut tape = Tape::with_params(&model.store);
    let graph = &bundle.graph;
    let target = encode_episode(&mut tape, model, graph, episode.relation, &episode.support, config, transfer, rng)?;
    let merged = if transfer {
        let pool = all_train_pool(bundle, config.shots)
            .into_iter()
            .filter(|(r, _)| *r != episode.relation)
            .map(|(r, s)| encode_episode(&mut tape, model, graph, r, s, config, true, rng))
            .collect::<Result<Vec<EncodedTask>>>()?;
        let refs: Vec<&EncodedTask> = pool.iter().collect();
        transfer_merge(&mut tape, model, &target, &refs)?
    } else {
        merge_without_transfer(&mut tape, target.base, &model.mrl)?
    };
    let rows = EntityRows::new(
        episode.support.iter().flat_map(|t| [t.head, t.tail]).chain(episode.support_neg.iter().copied()),
    );
    let inputs = EpisodeInputs::gather(&mut tape, model, &rows, episode.relation)?;
    let (relation, proj, r_p) = if config.meta {
        let support =
            episode_loss(&mut tape, model, &inputs, merged, &rows, &episode.support, &episode.support_neg, config.margin)?;
        let stats = task_stats(&mut tape, target.x)?;
        let alpha = adaptive_scale(&mut tape, stats, model.scale)?;
        let s = inner_adapt(&mut tape, support, merged, inputs.entity_proj, inputs.relation_proj, alpha, config.inner_lr)?;
        (s.relation, s.entity_proj, s.relation_proj)
    } else {
        (merged, inputs.entity_proj, inputs.relation_proj)
    };
    let proj = tape.value(proj);
    let entity_proj = rows.ids.iter().enumerate().map(|(i, &e)| (e, proj.row(i).to_vec())).collect();
    let out = AdaptedRelation {
        relation: tape.value(relation).data().to_vec(),
        relation_proj: tape.value(r_p).data().to_vec(),
        entity_proj,
    };
    if !out.relation.iter().chain(&out.relation_proj).all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("adapted representation of relation {}", episode.relation)));
    }
    Ok(out)
}

/// Projected embeddings `ê` of `entities` under an adapted relation.
pub fn project_entities(model: &Model, adapted: &AdaptedRelation, entities: &[usize]) -> Result<Tensor> {
    let d = model.dim;
    let table = model.store.get(model.bank.entity_proj);
    let mut proj = Tensor::zeros(&[entities.len(), d]);
    for (i, e) in entities.iter().enumerate() {
        let src = adapted.entity_proj.get(e).map_or(table.row(*e), Vec::as_slice);
        proj.row_mut(i).copy_from_slice(src);
    }
    let mut tape = Tape::with_params(&model.store);
    let e = tape.gather(model.entities, entities)?;
    let p = tape.constant(proj);
    let r_p = tape.constant(Tensor::new(vec![1, d], adapted.relation_proj.clone())?);
    let out = project(&mut tape, e, p, r_p, &model.bank)?;
    Ok(tape.value(out).clone())
}

/// Ranks of every query of one relation.
fn rank_relation(
    model: &Model,
    bundle: &DatasetBundle,
    relation: usize,
    config: &TrainConfig,
    transfer: bool,
) -> Result<Vec<RankResult>> {
    let mut rng = relation_rng(config.seed, relation);
    let episode = evaluation_episode(bundle, relation, config.shots, &mut rng)?;
    let adapted = adapt_relation(model, bundle, &episode, config, transfer, &mut rng)?;
    let candidates = bundle.candidates(relation);
    let heads: Vec<usize> = episode.query.iter().map(|t| t.head).collect();
    let cand = project_entities(model, &adapted, candidates)?;
    let head = project_entities(model, &adapted, &heads)?;
    let r = &adapted.relation;
    let mut out = Vec::with_capacity(episode.query.len());
    let mut shifted = vec![0.0; model.dim];
    for (qi, q) in episode.query.iter().enumerate() {
        for (k, v) in shifted.iter_mut().enumerate() {
            *v = head.row(qi)[k] + r[k];
        }
        let scores: Vec<f64> = (0..candidates.len())
            .map(|c| cand.row(c).iter().zip(&shifted).map(|(t, h)| (h - t) * (h - t)).sum())
            .collect();
        let filter = |c: usize| !config.raw_eval && bundle.is_known(q.head, q.relation, c);
        out.push(rank_query(q, candidates, &scores, filter)?);
    }
    Ok(out)
}

/// Evaluates every relation of `split`: the first `shots` triples (sorted)
/// are the support set and the rest are ranked queries. Metrics are
/// averaged over queries.
pub fn evaluate_split(
    bundle: &DatasetBundle,
    split: Split,
    model: &Model,
    config: &TrainConfig,
    transfer: bool,
) -> Result<MetricsReport> {
    let results = rank_split(bundle, split, model, config, transfer)?;
    let names = &bundle.graph.relations;
    Ok(aggregate(&results)?.with_names(|r| names.name(r).to_string()))
}

/// Rank results of every query in `split`, in relation order.
pub fn rank_split(
    bundle: &DatasetBundle,
    split: Split,
    model: &Model,
    config: &TrainConfig,
    transfer: bool,
) -> Result<Vec<RankResult>> {
    let relations = bundle.split(split);
    let workers = config.workers.max(1).min(relations.len().max(1));
    let per_relation: Vec<Result<Vec<RankResult>>> = if workers <= 1 {
        relations.iter().map(|&r| rank_relation(model, bundle, r, config, transfer)).collect()
    } else {
        let chunk = relations.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = relations
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter().map(|&r| rank_relation(model, bundle, r, config, transfer)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut all = Vec::new();
    for r in per_relation {
        all.extend(r?);
    }
    Ok(all)
}
