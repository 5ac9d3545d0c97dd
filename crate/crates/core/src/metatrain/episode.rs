use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::inner::{adaptive_scale, inner_adapt, task_stats};
use super::{stream, Model, Stream};
use crate::config::{TrainConfig, TransferPool};
use crate::contrast::{anchor, combined_objective, contrastive_loss, corrupt_context, encode_context, gather_context};
use crate::error::{Error, Result};
use crate::kgdata::{DatasetBundle, Episode, KnowledgeGraph, Split, Triple};
use crate::numkit::{adam_step, AdamState, Tape, Tensor, Var};
use crate::relearner::{merge, merge_without_transfer, mrl_forward, support_encoding, transfer_aggregate};
use crate::scorer::{margin_loss, project, score};
use crate::taskgraph::{task_attention, task_repr, TaskRepr};

/// Distinct entities touched by an episode, in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct EntityRows {
    pub ids: Vec<usize>,
    index: HashMap<usize, usize>,
}

impl EntityRows {
    pub fn new(entities: impl IntoIterator<Item = usize>) -> Self {
        let mut rows = EntityRows::default();
        for e in entities {
            rows.index.entry(e).or_insert_with(|| {
                rows.ids.push(e);
                rows.ids.len() - 1
            });
        }
        rows
    }

    pub fn of_episode(ep: &Episode) -> Self {
        let support = ep.support.iter().flat_map(|t| [t.head, t.tail]);
        let query = ep.query.iter().flat_map(|t| [t.head, t.tail]);
        Self::new(support.chain(ep.support_neg.iter().copied()).chain(query).chain(ep.query_neg.iter().copied()))
    }

    pub fn row(&self, entity: usize) -> Option<usize> {
        self.index.get(&entity).copied()
    }

    fn rows(&self, entities: impl Iterator<Item = usize>) -> Result<Vec<usize>> {
        entities
            .map(|e| self.row(e).ok_or_else(|| Error::Contract(format!("entity {e} is not part of the episode"))))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embedding rows, projection rows and `r_p` of one episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeInputs {
    pub entities: Var,
    pub entity_proj: Var,
    pub relation_proj: Var,
}

impl EpisodeInputs {
    pub fn gather(tape: &mut Tape, model: &Model, rows: &EntityRows, relation: usize) -> Result<Self> {
        Ok(EpisodeInputs {
            entities: tape.gather(model.entities, &rows.ids)?,
            entity_proj: tape.gather(model.bank.entity_proj, &rows.ids)?,
            relation_proj: tape.gather(model.bank.relation_proj, &[relation])?,
        })
    }
}

/// Margin loss of `(h, R, t)` against `(h, R, t′)` for each triple and its
/// negative tail.
pub fn episode_loss(
    tape: &mut Tape,
    model: &Model,
    inputs: &EpisodeInputs,
    relation: Var,
    rows: &EntityRows,
    triples: &[Triple],
    negatives: &[usize],
    gamma: f64,
) -> Result<Var> {
    if triples.len() != negatives.len() || triples.is_empty() {
        return Err(Error::Contract(format!("{} triples with {} negatives", triples.len(), negatives.len())));
    }
    let projected = project(tape, inputs.entities, inputs.entity_proj, inputs.relation_proj, &model.bank)?;
    let heads = rows.rows(triples.iter().map(|t| t.head))?;
    let tails = rows.rows(triples.iter().map(|t| t.tail))?;
    let negs = rows.rows(negatives.iter().copied())?;
    let h = tape.select_rows(projected, &heads)?;
    let t = tape.select_rows(projected, &tails)?;
    let n = tape.select_rows(projected, &negs)?;
    let pos = score(tape, h, relation, t)?;
    let neg = score(tape, h, relation, n)?;
    margin_loss(tape, pos, neg, gamma)
}

/// Support encodings, the base representation `R` and, when transfer is in
/// play, the task representation used for attention.
#[derive(Clone, Debug)]
pub struct EncodedTask {
    pub relation: usize,
    pub x: Var,
    pub base: Var,
    pub task: Option<TaskRepr>,
}

#[allow(clippy::too_many_arguments)]
pub fn encode_episode<R: Rng>(
    tape: &mut Tape,
    model: &Model,
    graph: &KnowledgeGraph,
    relation: usize,
    support: &[Triple],
    config: &TrainConfig,
    with_task: bool,
    rng: &mut R,
) -> Result<EncodedTask> {
    let x = support_encoding(tape, model.entities, model.relations, support)?;
    let base = mrl_forward(tape, x, &model.mrl)?;
    let task = if with_task {
        Some(task_repr(
            tape,
            graph,
            relation,
            support,
            model.relations,
            &model.mp,
            config.wl_depth,
            config.mp_neighbor_cap,
            rng,
        )?)
    } else {
        None
    };
    Ok(EncodedTask { relation, x, base, task })
}

/// `merge(R, R′)` with `R′` aggregated over `pool`, or `merge(R, 0)` when
/// the pool is empty.
pub fn transfer_merge(tape: &mut Tape, model: &Model, target: &EncodedTask, pool: &[&EncodedTask]) -> Result<Var> {
    if pool.is_empty() {
        return merge_without_transfer(tape, target.base, &model.mrl);
    }
    let summary = |t: &EncodedTask| {
        t.task
            .as_ref()
            .map(|r| r.summary)
            .ok_or_else(|| Error::Contract(format!("relation {} has no task representation", t.relation)))
    };
    let target_summary = summary(target)?;
    let summaries = pool.iter().map(|t| summary(t)).collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&summaries)?;
    let alpha = task_attention(tape, target_summary, stacked, &model.similarity)?;
    let bases: Vec<Var> = pool.iter().map(|t| t.base).collect();
    let neighbors = tape.concat_rows(&bases)?;
    let r_prime = transfer_aggregate(tape, alpha, neighbors, &model.mrl)?;
    merge(tape, target.base, r_prime, &model.mrl)
}

/// Random streams consumed while training.
#[derive(Clone, Debug)]
pub struct Rngs {
    pub episodes: ChaCha8Rng,
    pub contexts: ChaCha8Rng,
    pub local_graphs: ChaCha8Rng,
}

impl Rngs {
    pub fn new(seed: u64) -> Self {
        Rngs {
            episodes: stream(seed, Stream::Episodes),
            contexts: stream(seed, Stream::Contexts),
            local_graphs: stream(seed, Stream::LocalGraphs),
        }
    }
}

/// Summed objective of a batch and its parts.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub query: f64,
    pub contrast: f64,
    pub alphas: Vec<f64>,
    pub episodes: usize,
    pub dropped: usize,
}

/// Support triples of the transfer pool when it spans every training relation.
pub(crate) fn all_train_pool(bundle: &DatasetBundle, shots: usize) -> Vec<(usize, &[Triple])> {
    bundle
        .split(Split::Train)
        .iter()
        .filter(|&&r| bundle.task(r).len() > shots)
        .map(|&r| (r, &bundle.task(r)[..shots]))
        .collect()
}

/// Contrastive term summed over the support triples that have a context.
fn contrast_term(
    tape: &mut Tape,
    model: &Model,
    bundle: &DatasetBundle,
    support: &[Triple],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for t in support {
        let ctx = gather_context(&bundle.graph, t, config.context_cap, rng);
        if ctx.is_empty() {
            continue;
        }
        let a = anchor(tape, model.entities, t)?;
        let c = encode_context(tape, &ctx, model.entities, model.relations, &model.context)?;
        let fakes = (0..config.false_contexts)
            .map(|_| {
                let fake = corrupt_context(&ctx, bundle.num_relations(), bundle.num_entities(), rng);
                encode_context(tape, &fake, model.entities, model.relations, &model.context).map(|e| e.embedding)
            })
            .collect::<Result<Vec<_>>>()?;
        terms.push(contrastive_loss(tape, a, c.embedding, &fakes, config.tau)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    sum_scalars(tape, &terms).map(Some)
}

/// Builds the batch objective on `tape` without touching parameters.
///
/// Per episode: `R` from the set encoder, optional transfer and merge, one
/// inner step, then the query margin loss plus `λ` times the contrastive
/// term. Episodes whose inner gradient is not finite are dropped with a
/// warning.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    bundle: &DatasetBundle,
    batch: &[Episode],
    config: &TrainConfig,
    transfer: bool,
    rngs: &mut Rngs,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("outer step needs a non-empty batch".into()));
    }
    let graph = &bundle.graph;
    let mut encoded = Vec::with_capacity(batch.len());
    for ep in batch {
        encoded.push(encode_episode(
            tape,
            model,
            graph,
            ep.relation,
            &ep.support,
            config,
            transfer,
            &mut rngs.local_graphs,
        )?);
    }
    let extra = if transfer && config.transfer_pool == TransferPool::AllTrain {
        all_train_pool(bundle, config.shots)
            .into_iter()
            .map(|(r, s)| encode_episode(tape, model, graph, r, s, config, true, &mut rngs.local_graphs))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut parts = Vec::with_capacity(batch.len());
    let mut alphas = Vec::new();
    let (mut query_sum, mut contrast_sum, mut dropped) = (0.0, 0.0, 0);
    for (i, ep) in batch.iter().enumerate() {
        let merged = if transfer {
            let pool = pool_for(&encoded, &extra, i, config.transfer_pool);
            transfer_merge(tape, model, &encoded[i], &pool)?
        } else {
            merge_without_transfer(tape, encoded[i].base, &model.mrl)?
        };
        let rows = EntityRows::of_episode(ep);
        let inputs = EpisodeInputs::gather(tape, model, &rows, ep.relation)?;
        let (relation, adapted) = if config.meta {
            let support =
                episode_loss(tape, model, &inputs, merged, &rows, &ep.support, &ep.support_neg, config.margin)?;
            let stats = task_stats(tape, encoded[i].x)?;
            let alpha = adaptive_scale(tape, stats, model.scale)?;
            match inner_adapt(tape, support, merged, inputs.entity_proj, inputs.relation_proj, alpha, config.inner_lr) {
                Ok(state) => {
                    alphas.push(tape.item(state.alpha));
                    let adapted = EpisodeInputs {
                        entities: inputs.entities,
                        entity_proj: state.entity_proj,
                        relation_proj: state.relation_proj,
                    };
                    (state.relation, adapted)
                }
                Err(Error::Numeric(what)) => {
                    log::warn!("dropping episode for relation {}: non-finite {what}", ep.relation);
                    dropped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
        } else {
            (merged, inputs)
        };
        let query = episode_loss(tape, model, &adapted, relation, &rows, &ep.query, &ep.query_neg, config.margin)?;
        query_sum += tape.item(query);
        let contrast = contrast_term(tape, model, bundle, &ep.support, config, &mut rngs.contexts)?;
        if let Some(c) = contrast {
            contrast_sum += tape.item(c);
        }
        parts.push(combined_objective(tape, query, contrast, config.lambda)?);
    }
    let total = if parts.is_empty() { tape.constant(Tensor::scalar(0.0)) } else { sum_scalars(tape, &parts)? };
    Ok(BatchLoss { total, query: query_sum, contrast: contrast_sum, alphas, episodes: batch.len(), dropped })
}

fn sum_scalars(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let parts = xs.iter().map(|&x| tape.reshape(x, &[1])).collect::<Result<Vec<_>>>()?;
    let cat = tape.concat(&parts)?;
    tape.sum_all(cat)
}

/// Other relations available for transfer to episode `i`, one entry per
/// relation.
fn pool_for<'a>(
    encoded: &'a [EncodedTask],
    extra: &'a [EncodedTask],
    i: usize,
    kind: TransferPool,
) -> Vec<&'a EncodedTask> {
    let target = encoded[i].relation;
    let source = match kind {
        TransferPool::Batch => encoded,
        TransferPool::AllTrain => extra,
    };
    let mut seen = Vec::new();
    let mut pool = Vec::new();
    for t in source {
        if t.relation != target && !seen.contains(&t.relation) {
            seen.push(t.relation);
            pool.push(t);
        }
    }
    pool
}

/// Scalars logged for one outer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub query_loss: f64,
    pub contrast_loss: f64,
    pub alpha_mean: Option<f64>,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub episodes: usize,
    pub dropped: usize,
    pub transfer: bool,
}

/// One Adam step on every parameter from the summed batch objective.
#[allow(clippy::too_many_arguments)]
pub fn outer_step(
    model: &mut Model,
    adam: &mut AdamState,
    bundle: &DatasetBundle,
    batch: &[Episode],
    config: &TrainConfig,
    transfer: bool,
    step: usize,
    rngs: &mut Rngs,
) -> Result<StepRecord> {
    let (record, grads) = {
        let mut tape = Tape::with_params(&model.store);
        let loss = batch_loss(&mut tape, model, bundle, batch, config, transfer, rngs)?;
        let total = tape.item(loss.total);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("batch loss at step {step}")));
        }
        let grads = tape.backward(loss.total)?;
        let a = &loss.alphas;
        let record = StepRecord {
            step,
            loss: total,
            query_loss: loss.query,
            contrast_loss: loss.contrast,
            alpha_mean: (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64),
            alpha_min: a.iter().copied().reduce(f64::min),
            alpha_max: a.iter().copied().reduce(f64::max),
            episodes: loss.episodes,
            dropped: loss.dropped,
            transfer,
        };
        (record, grads)
    };
    if !grads.is_finite() {
        return Err(Error::Numeric(format!("parameter gradient at step {step}")));
    }
    model.store.zero_grad();
    model.store.accumulate(&grads);
    adam_step(&mut model.store, adam)?;
    Ok(record)
}
