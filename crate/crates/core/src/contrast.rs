//! Contrastive refinement: neighborhood contexts of a triple, an attention
//! pooled context encoder and an InfoNCE loss against corrupted contexts.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kgdata::{KnowledgeGraph, Triple};
use crate::numkit::layers::MultiHeadAttention;
use crate::numkit::{uniform, ParamId, ParamStore, Tape, Var};

/// Deduplicated `(relation, entity)` tuples around a triple.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Context {
    pub tuples: Vec<(usize, usize)>,
}

impl Context {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Outgoing tuples of `h` and of `t`, without the triple itself, sampled
/// down to `cap` tuples when larger.
pub fn gather_context<R: Rng>(graph: &KnowledgeGraph, triple: &Triple, cap: usize, rng: &mut R) -> Context {
    let mut seen = HashSet::new();
    let mut tuples = Vec::new();
    for (src, pair) in graph.outgoing(triple.head).map(|p| (triple.head, p)).chain(graph.outgoing(triple.tail).map(|p| (triple.tail, p))) {
        if src == triple.head && pair == (triple.relation, triple.tail) {
            continue;
        }
        if seen.insert(pair) {
            tuples.push(pair);
        }
    }
    if tuples.len() > cap {
        tuples.shuffle(rng);
        tuples.truncate(cap);
    }
    Context { tuples }
}

/// Each tuple is corrupted with probability 1/2, in its relation or its entity
/// (chosen uniformly). At least one tuple always differs from `ctx`.
pub fn corrupt_context<R: Rng>(ctx: &Context, relations: usize, entities: usize, rng: &mut R) -> Context {
    let mut out = ctx.clone();
    let mut changed = false;
    for tuple in out.tuples.iter_mut() {
        if rng.gen_bool(0.5) {
            let before = *tuple;
            if rng.gen_bool(0.5) {
                tuple.0 = rng.gen_range(0..relations);
            } else {
                tuple.1 = rng.gen_range(0..entities);
            }
            changed |= *tuple != before;
        }
    }
    if !changed && !out.is_empty() && (relations > 1 || entities > 1) {
        let i = rng.gen_range(0..out.len());
        let before = out.tuples[i];
        while out.tuples[i] == before {
            if entities > 1 && (relations == 1 || rng.gen_bool(0.5)) {
                out.tuples[i].1 = rng.gen_range(0..entities);
            } else {
                out.tuples[i].0 = rng.gen_range(0..relations);
            }
        }
    }
    out
}

/// Self-attention over context tokens followed by learned-query pooling.
#[derive(Clone, Copy, Debug)]
pub struct ContextEncoder {
    pub attn: MultiHeadAttention,
    /// Pooling query, `[1, 2d]`.
    pub query: ParamId,
    pub width: usize,
}

impl ContextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let width = 2 * dim;
        let attn = MultiHeadAttention::new(store, "ctx.attn", width, heads, rng)?;
        let query = store.add("ctx.query", uniform(rng, &[1, width], 1.0 / (width as f64).sqrt()));
        Ok(ContextEncoder { attn, query, width })
    }
}

/// Context embedding `c = Σ α_i re_i` (`[1, 2d]`) and pooling weights `α` (`[1, n]`).
pub struct EncodedContext {
    pub embedding: Var,
    pub weights: Var,
}

/// `re_i = r_i ‖ e_i`; `α = softmax(q·MSA(re)ᵀ / √(2d))`.
pub fn encode_context(
    tape: &mut Tape,
    ctx: &Context,
    entities: ParamId,
    relations: ParamId,
    enc: &ContextEncoder,
) -> Result<EncodedContext> {
    if ctx.is_empty() {
        return Err(Error::Contract("cannot encode an empty context".into()));
    }
    let rels: Vec<usize> = ctx.tuples.iter().map(|p| p.0).collect();
    let ents: Vec<usize> = ctx.tuples.iter().map(|p| p.1).collect();
    let r = tape.gather(relations, &rels)?;
    let e = tape.gather(entities, &ents)?;
    let re = tape.concat(&[r, e])?;
    let z = enc.attn.forward(tape, re)?;
    let q = tape.param(enc.query)?;
    let zt = tape.transpose(z)?;
    let logits = tape.matmul(q, zt)?;
    let logits = tape.scale(logits, 1.0 / (enc.width as f64).sqrt())?;
    let weights = tape.softmax(logits)?;
    let embedding = tape.matmul(weights, re)?;
    Ok(EncodedContext { embedding, weights })
}

/// `−log softmax_0(cos(anchor, c)/τ, cos(anchor, c̃_1)/τ, …)`: the true context
/// sits in the denominator next to the corrupted ones.
pub fn contrastive_loss(tape: &mut Tape, anchor: Var, true_c: Var, false_cs: &[Var], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    if false_cs.is_empty() {
        return Err(Error::Contract("contrastive loss needs at least one corrupted context".into()));
    }
    let sims = std::iter::once(true_c)
        .chain(false_cs.iter().copied())
        .map(|c| tape.cosine(anchor, c))
        .collect::<Result<Vec<_>>>()?;
    let logits = tape.concat(&sims)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let logp = tape.log_softmax(logits)?;
    let n = tape.value(logp).len();
    let logp = tape.reshape(logp, &[1, n])?;
    let first = tape.slice_cols(logp, 0, 1)?;
    let first = tape.sum_all(first)?;
    tape.scale(first, -1.0)
}

/// `task + λ·contrast`.
pub fn combined_objective(tape: &mut Tape, task_loss: Var, contrast_loss: Option<Var>, lambda: f64) -> Result<Var> {
    match contrast_loss {
        None => Ok(task_loss),
        Some(c) => {
            let c = tape.scale(c, lambda)?;
            tape.add(task_loss, c)
        }
    }
}

/// `h ‖ t` from the entity table, `[1, 2d]`.
pub fn anchor(tape: &mut Tape, entities: ParamId, triple: &Triple) -> Result<Var> {
    let h = tape.gather(entities, &[triple.head])?;
    let t = tape.gather(entities, &[triple.tail])?;
    tape.concat(&[h, t])
}
