//! SkipTransD: relation-aware entity projection with a skip connection, the
//! translational score and the margin loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::layers::Linear;
use crate::numkit::{ParamId, Tape, Tensor, Var};

/// Projection vectors and the shared projection MLP.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionBank {
    /// Per-entity projection vectors `e_p`, `[entities, d]`.
    pub entity_proj: ParamId,
    /// Per-relation projection vectors `r_p`, `[relations, d]`.
    pub relation_proj: ParamId,
    pub hidden: Linear,
    /// Zero-initialized, so projection starts as the identity.
    pub output: Linear,
    pub dim: usize,
}

impl ProjectionBank {
    pub fn new<R: Rng>(
        store: &mut crate::numkit::ParamStore,
        entity_proj: Tensor,
        relation_proj: Tensor,
        rng: &mut R,
    ) -> Self {
        let dim = entity_proj.last_dim();
        ProjectionBank {
            entity_proj: store.add("proj.entity", entity_proj),
            relation_proj: store.add("proj.relation", relation_proj),
            hidden: Linear::new(store, "proj.hidden", dim, dim, rng),
            output: Linear::zeros(store, "proj.output", dim, dim),
            dim,
        }
    }
}

/// `ê = MLP((r_p·e_p) e) + e` row-wise. `e` and `e_p` are `[n, d]`, `r_p` is `[1, d]`.
pub fn project(tape: &mut Tape, e: Var, e_p: Var, r_p: Var, bank: &ProjectionBank) -> Result<Var> {
    let (se, sp, sr) = (tape.shape(e).to_vec(), tape.shape(e_p).to_vec(), tape.shape(r_p).to_vec());
    if se.len() != 2 || se != sp || sr != [1, bank.dim] || se[1] != bank.dim {
        return Err(Error::Contract(format!("projection widths differ: e {se:?}, e_p {sp:?}, r_p {sr:?}")));
    }
    let rt = tape.transpose(r_p)?;
    let s = tape.matmul(e_p, rt)?;
    let s = tape.reshape(s, &[se[0]])?;
    let scaled = tape.mul_col(e, s)?;
    let h = bank.hidden.forward(tape, scaled)?;
    let h = tape.tanh(h)?;
    let out = bank.output.forward(tape, h)?;
    tape.add(out, e)
}

/// `‖ĥ + R − t̂‖²` per row; `h_hat`, `t_hat` are `[n, d]` and `r` is `[1, d]`.
pub fn score(tape: &mut Tape, h_hat: Var, r: Var, t_hat: Var) -> Result<Var> {
    let shifted = tape.add_row(h_hat, r)?;
    let diff = tape.sub(shifted, t_hat)?;
    tape.sq_norm(diff)
}

/// `Σ max(0, pos + γ − neg)` over matching entries of `pos` and `neg`.
pub fn margin_loss(tape: &mut Tape, pos: Var, neg: Var, gamma: f64) -> Result<Var> {
    let gap = tape.sub(pos, neg)?;
    let margin = tape.constant(Tensor::full(tape.shape(gap), gamma));
    let gap = tape.add(gap, margin)?;
    let hinge = tape.relu(gap)?;
    tape.sum_all(hinge)
}
