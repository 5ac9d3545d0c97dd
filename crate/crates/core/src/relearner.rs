//! Meta relation learner: a set encoder over support triplets and the
//! transfer/merge step that mixes in representations of related tasks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kgdata::Triple;
use crate::numkit::layers::{LayerNorm, Linear, MultiHeadAttention};
use crate::numkit::{xavier, ParamId, ParamStore, Tape, Tensor, Var};

/// One post-norm transformer layer without positional terms, followed by a
/// token-wise output MLP, plus the transfer and merge weights.
#[derive(Clone, Copy, Debug)]
pub struct MrlParams {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub out1: Linear,
    pub out2: Linear,
    /// `W` of the transfer step, `d × d`.
    pub transfer: ParamId,
    pub merge: Linear,
    pub dim: usize,
}

impl MrlParams {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let w = 3 * dim;
        let attn = MultiHeadAttention::new(store, "mrl.attn", w, heads, rng)?;
        let norm1 = LayerNorm::new(store, "mrl.norm1", w);
        let ff1 = Linear::new(store, "mrl.ff1", w, 4 * w, rng);
        let ff2 = Linear::new(store, "mrl.ff2", 4 * w, w, rng);
        let norm2 = LayerNorm::new(store, "mrl.norm2", w);
        let out1 = Linear::new(store, "mrl.out1", w, dim, rng);
        let out2 = Linear::new(store, "mrl.out2", dim, dim, rng);
        let transfer = store.add("mrl.transfer", xavier(rng, dim, dim));
        let merge = Linear::zeros(store, "mrl.merge", 2 * dim, dim);
        let mw = store.get_mut(merge.weight).data_mut();
        for i in 0..dim {
            mw[i * dim + i] = 1.0;
        }
        Ok(MrlParams { attn, norm1, ff1, ff2, norm2, out1, out2, transfer, merge, dim })
    }
}

/// `x_i = h_i ‖ R ‖ t_i` for each support triple, `[K, 3d]`.
///
/// `R` is the target relation's embedding row, shared by every token.
pub fn support_encoding(tape: &mut Tape, entities: ParamId, relations: ParamId, support: &[Triple]) -> Result<Var> {
    if support.is_empty() {
        return Err(Error::Contract("support encoding needs at least one triple".into()));
    }
    let heads: Vec<usize> = support.iter().map(|t| t.head).collect();
    let tails: Vec<usize> = support.iter().map(|t| t.tail).collect();
    let rels: Vec<usize> = support.iter().map(|t| t.relation).collect();
    let h = tape.gather(entities, &heads)?;
    let r = tape.gather(relations, &rels)?;
    let t = tape.gather(entities, &tails)?;
    tape.concat(&[h, r, t])
}

/// `R = mean_i MLP(transformer(x)_i)`, returned as `[1, d]`.
pub fn mrl_forward(tape: &mut Tape, x: Var, p: &MrlParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract("meta relation learner needs K >= 1 support tokens".into()));
    }
    if shape[1] != 3 * p.dim {
        return Err(Error::shape("mrl_forward", format!("token width {} != 3d = {}", shape[1], 3 * p.dim)));
    }
    let a = p.attn.forward(tape, x)?;
    let h = tape.add(x, a)?;
    let h = p.norm1.forward(tape, h)?;
    let f = p.ff1.forward(tape, h)?;
    let f = tape.relu(f)?;
    let f = p.ff2.forward(tape, f)?;
    let h = tape.add(h, f)?;
    let h = p.norm2.forward(tape, h)?;
    let o = p.out1.forward(tape, h)?;
    let o = tape.tanh(o)?;
    let o = p.out2.forward(tape, o)?;
    let r = tape.mean(o, 0)?;
    tape.reshape(r, &[1, p.dim])
}

/// `R′ = tanh(Σ_j α_j R_j W)` with `alpha` `[1, p]` and `neighbors` `[p, d]`.
pub fn transfer_aggregate(tape: &mut Tape, alpha: Var, neighbors: Var, p: &MrlParams) -> Result<Var> {
    let (a, n) = (tape.shape(alpha).to_vec(), tape.shape(neighbors).to_vec());
    if a.len() != 2 || a[0] != 1 || n.len() != 2 || a[1] != n[0] {
        return Err(Error::Contract(format!("attention weights {a:?} do not match neighbors {n:?}")));
    }
    let mixed = tape.matmul(alpha, neighbors)?;
    let w = tape.param(p.transfer)?;
    let y = tape.matmul(mixed, w)?;
    tape.tanh(y)
}

/// `Linear(R ‖ R′)`, both `[1, d]`.
pub fn merge(tape: &mut Tape, r: Var, r_prime: Var, p: &MrlParams) -> Result<Var> {
    let want = [1, p.dim];
    if tape.shape(r) != want || tape.shape(r_prime) != want {
        return Err(Error::Contract(format!(
            "merge expects two [1, {}] inputs, got {:?} and {:?}",
            p.dim,
            tape.shape(r),
            tape.shape(r_prime)
        )));
    }
    let cat = tape.concat(&[r, r_prime])?;
    p.merge.forward(tape, cat)
}

/// `merge(R, 0)`: the merged representation when nothing is transferred.
pub fn merge_without_transfer(tape: &mut Tape, r: Var, p: &MrlParams) -> Result<Var> {
    let zero = tape.constant(Tensor::zeros(&[1, p.dim]));
    merge(tape, r, zero, p)
}
