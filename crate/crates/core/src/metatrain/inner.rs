use crate::error::{Error, Result};
use crate::numkit::{ParamId, Tape, Tensor, Var};

/// `ψ(S) = mean(x) ‖ var(x) ‖ K` over support encodings `x` (`[K, w]`),
/// returned as `[1, 2w + 1]`. The variance is the population variance.
pub fn task_stats(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract("task statistics need K >= 1 support encodings".into()));
    }
    let mean = tape.mean(x, 0)?;
    let neg = tape.scale(mean, -1.0)?;
    let centered = tape.add_row(x, neg)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq, 0)?;
    let k = tape.constant(Tensor::vector(vec![shape[0] as f64]));
    let psi = tape.concat(&[mean, var, k])?;
    tape.reshape(psi, &[1, 2 * shape[1] + 1])
}

/// `α = σ(W_rᵀ ψ)`, a one-element value in (0, 1).
pub fn adaptive_scale(tape: &mut Tape, stats: Var, w: ParamId) -> Result<Var> {
    let width = tape.value(stats).len();
    let want = tape.param_shape(w)?.iter().product::<usize>();
    if width != want {
        return Err(Error::Contract(format!("task statistics width {width} does not match W_r width {want}")));
    }
    let w = tape.param(w)?;
    let psi = tape.reshape(stats, &[width])?;
    let logit = tape.dot(psi, w)?;
    tape.sigmoid(logit)
}

/// Values after one scaled gradient step on the support loss. The step is
/// first order: the gradient enters the graph as a constant.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub alpha: Var,
    /// `R_T′`.
    pub relation: Var,
    /// Adapted entity projection rows, aligned with the episode's entity rows.
    pub entity_proj: Var,
    /// Adapted `r_p`.
    pub relation_proj: Var,
    pub support_loss: Var,
    /// `α·η·∇` for the relation, entity projections and relation projection.
    pub steps: [Tensor; 3],
}

/// `X′ = X − α η ∇_X L(S)` for `X` in (`R`, entity projection rows, `r_p`).
pub fn inner_adapt(
    tape: &mut Tape,
    support_loss: Var,
    relation: Var,
    entity_proj: Var,
    relation_proj: Var,
    alpha: Var,
    eta: f64,
) -> Result<AdaptState> {
    let grads = tape.grad_wrt(support_loss, &[relation, entity_proj, relation_proj])?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("inner-loop gradient".into()));
    }
    let rate = tape.scale(alpha, eta)?;
    let mut adapted = Vec::with_capacity(3);
    let mut steps = Vec::with_capacity(3);
    for (x, g) in [relation, entity_proj, relation_proj].into_iter().zip(grads) {
        let g = tape.constant(g);
        let step = tape.scale_by(g, rate)?;
        steps.push(tape.value(step).clone());
        adapted.push(tape.sub(x, step)?);
    }
    let steps: [Tensor; 3] = steps.try_into().expect("three steps");
    Ok(AdaptState {
        alpha,
        relation: adapted[0],
        entity_proj: adapted[1],
        relation_proj: adapted[2],
        support_loss,
        steps,
    })
}
