use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kgdata::{KnowledgeGraph, Triple};
use crate::numkit::{uniform, Tensor};

/// TransE tables plus the mean margin loss of every epoch.
#[derive(Clone, Debug)]
pub struct TransE {
    pub entities: Tensor,
    pub relations: Tensor,
    pub epoch_losses: Vec<f64>,
}

/// Plain SGD TransE over the background triples, `‖h + r − t‖²` with a
/// margin against one corrupted head or tail per triple. Entity rows are
/// projected back to unit length at the start of each epoch.
pub fn pretrain_transe<R: Rng>(
    graph: &KnowledgeGraph,
    num_entities: usize,
    num_relations: usize,
    epochs: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TransE> {
    let d = config.dim;
    let bound = 6.0 / (d as f64).sqrt();
    let mut ent = uniform(rng, &[num_entities, d], bound);
    let mut rel = uniform(rng, &[num_relations, d], bound);
    for i in 0..num_relations {
        normalize(rel.row_mut(i));
    }
    if epochs == 0 {
        return Ok(TransE { entities: ent, relations: rel, epoch_losses: Vec::new() });
    }
    if graph.triples().is_empty() {
        return Err(Error::Contract("TransE needs a non-empty background graph".into()));
    }
    if num_entities < 2 {
        return Err(Error::Contract("TransE needs at least two entities to corrupt triples".into()));
    }
    let lr = config.pretrain_lr;
    let gamma = config.margin;
    let mut order: Vec<Triple> = graph.triples().to_vec();
    let mut losses = Vec::with_capacity(epochs);
    let (mut gp, mut gn) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..epochs {
        for i in 0..num_entities {
            normalize(ent.row_mut(i));
        }
        order.shuffle(rng);
        let mut total = 0.0;
        for t in &order {
            let mut neg = *t;
            let corrupt_head = rng.gen_bool(0.5);
            loop {
                let e = rng.gen_range(0..num_entities);
                if corrupt_head {
                    neg.head = e;
                } else {
                    neg.tail = e;
                }
                if neg != *t {
                    break;
                }
            }
            let pos = residual(&ent, &rel, t, &mut gp);
            let ng = residual(&ent, &rel, &neg, &mut gn);
            let loss = pos + gamma - ng;
            if loss <= 0.0 {
                continue;
            }
            total += loss;
            // d/dh ‖h+r−t‖² = 2(h+r−t), d/dt = −2(h+r−t).
            for k in 0..d {
                let (a, b) = (2.0 * lr * gp[k], 2.0 * lr * gn[k]);
                ent.row_mut(t.head)[k] -= a;
                ent.row_mut(t.tail)[k] += a;
                rel.row_mut(t.relation)[k] -= a - b;
                ent.row_mut(neg.head)[k] += b;
                ent.row_mut(neg.tail)[k] -= b;
            }
        }
        losses.push(total / order.len() as f64);
    }
    if !(ent.is_finite() && rel.is_finite()) {
        return Err(Error::Numeric("TransE pre-training".into()));
    }
    Ok(TransE { entities: ent, relations: rel, epoch_losses: losses })
}

/// Writes `h + r − t` into `out` and returns its squared norm.
fn residual(ent: &Tensor, rel: &Tensor, t: &Triple, out: &mut [f64]) -> f64 {
    let (h, r, tl) = (ent.row(t.head), rel.row(t.relation), ent.row(t.tail));
    let mut s = 0.0;
    for k in 0..out.len() {
        out[k] = h[k] + r[k] - tl[k];
        s += out[k] * out[k];
    }
    s
}

fn normalize(row: &mut [f64]) {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

/// `‖h + r − t‖²` under the given tables.
#[cfg(test)]
pub(crate) fn transe_score(ent: &Tensor, rel: &Tensor, t: &Triple) -> f64 {
    let mut buf = vec![0.0; ent.last_dim()];
    residual(ent, rel, t, &mut buf)
}
