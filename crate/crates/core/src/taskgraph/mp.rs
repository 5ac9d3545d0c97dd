use rand::Rng;

use crate::error::{Error, Result};
use crate::kgdata::LocalLineGraph;
use crate::numkit::layers::Linear;
use crate::numkit::{xavier, ParamId, ParamStore, Tape, Tensor, Var};

/// Weights of the message map `A` and the update map `U`.
///
/// `A(s, s′) = [s‖s′]·W_a + b_a` and `U(s, m) = tanh([s‖m]·W_u + b_u)`.
#[derive(Clone, Copy, Debug)]
pub struct MpParams {
    pub message: Linear,
    pub update: Linear,
    pub width: usize,
}

impl MpParams {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        MpParams {
            message: Linear::new(store, "mp.message", 2 * width, width, rng),
            update: Linear::new(store, "mp.update", 2 * width, width, rng),
            width,
        }
    }
}

/// Edge states `s_m` for every node of a local line graph, `m = 0..=M`.
#[derive(Clone, Debug)]
pub struct EdgeStates {
    pub layers: Vec<Var>,
    pub num_seeds: usize,
}

/// Runs `M` rounds of relational message passing.
///
/// `s_0` is gathered from `relation_table`. The message sum over `N(r)` is
/// evaluated in split form, `deg·(s W_top + b) + (Σ s′) W_bottom`, which is
/// the same sum without materializing one concatenation per edge pair.
pub fn relational_mp_forward(
    tape: &mut Tape,
    relation_table: ParamId,
    local: &LocalLineGraph,
    params: &MpParams,
    depth: usize,
) -> Result<EdgeStates> {
    let rels = local.relation_ids();
    let rows = tape.param_shape(relation_table)?[0];
    if let Some(&bad) = rels.iter().find(|&&r| r >= rows) {
        return Err(Error::Contract(format!("relation {bad} has no embedding row ({rows} rows)")));
    }
    let d = params.width;
    let deg = Tensor::vector(local.adj.iter().map(|n| n.len() as f64).collect());
    let deg = tape.constant(deg);
    let w_msg = tape.param(params.message.weight)?;
    let w_top = tape.slice_rows(w_msg, 0, d)?;
    let w_bottom = tape.slice_rows(w_msg, d, 2 * d)?;
    let b_msg = tape.param(params.message.bias)?;

    let mut layers = vec![tape.gather(relation_table, &rels)?];
    for _ in 0..depth {
        let s = *layers.last().expect("non-empty");
        let own = tape.matmul(s, w_top)?;
        let own = tape.add_row(own, b_msg)?;
        let own = tape.mul_col(own, deg)?;
        let nsum = tape.neighbor_sum(s, local.adj.clone())?;
        let other = tape.matmul(nsum, w_bottom)?;
        let msg = tape.add(own, other)?;
        let joined = tape.concat(&[s, msg])?;
        let pre = params.update.forward(tape, joined)?;
        layers.push(tape.tanh(pre)?);
    }
    Ok(EdgeStates { layers, num_seeds: local.num_seeds })
}

/// The edge states of a task's support edges at every depth.
#[derive(Clone, Debug)]
pub struct TaskRepr {
    pub relation: usize,
    /// One `[n, d]` block per depth.
    pub layers: Vec<Var>,
    /// Mean over depths and edges, `[1, d]`.
    pub summary: Var,
}

impl TaskRepr {
    pub fn from_states(tape: &mut Tape, relation: usize, states: &EdgeStates) -> Result<Self> {
        if states.num_seeds == 0 {
            return Err(Error::Contract("task representation needs at least one edge".into()));
        }
        let layers = states
            .layers
            .iter()
            .map(|&l| tape.slice_rows(l, 0, states.num_seeds))
            .collect::<Result<Vec<_>>>()?;
        let all = tape.concat_rows(&layers)?;
        let mean = tape.mean(all, 0)?;
        let d = tape.value(mean).len();
        let summary = tape.reshape(mean, &[1, d])?;
        Ok(TaskRepr { relation, layers, summary })
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn edges(&self, tape: &Tape) -> usize {
        tape.value(self.layers[0]).rows()
    }
}

/// `W = VᵀV`, so the bilinear form `u·W·v = (Vu)·(Vv)` is symmetric PSD.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityHead {
    pub v: ParamId,
    pub width: usize,
}

impl SimilarityHead {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        SimilarityHead { v: store.add("sim.v", xavier(rng, width, width)), width }
    }

    /// Rows of `x` mapped through `V`: `x·Vᵀ`.
    fn project(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let v = tape.param(self.v)?;
        let vt = tape.transpose(v)?;
        tape.matmul(x, vt)
    }
}

/// Pre-activation of the exact task kernel,
/// `(1/nn′) Σ_m Σ_{r,r′} f_m(r)ᵀ W f_m(r′)`.
pub fn task_kernel_logit(tape: &mut Tape, a: &TaskRepr, b: &TaskRepr, head: &SimilarityHead) -> Result<Var> {
    if a.depth() != b.depth() {
        return Err(Error::Contract(format!("task depths differ: {} vs {}", a.depth(), b.depth())));
    }
    let (wa, wb) = (tape.shape(a.layers[0])[1], tape.shape(b.layers[0])[1]);
    if wa != head.width || wb != head.width {
        return Err(Error::Contract(format!("state widths {wa}/{wb} do not match head width {}", head.width)));
    }
    let stack = |tape: &mut Tape, t: &TaskRepr| -> Result<Var> {
        let sums = t
            .layers
            .iter()
            .map(|&l| {
                let s = tape.sum(l, 0)?;
                tape.reshape(s, &[1, head.width])
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = tape.concat_rows(&sums)?;
        head.project(tape, rows)
    };
    let pa = stack(tape, a)?;
    let pb = stack(tape, b)?;
    let n = (a.edges(tape) * b.edges(tape)) as f64;
    let prod = tape.mul(pa, pb)?;
    let total = tape.sum_all(prod)?;
    tape.scale(total, 1.0 / n)
}

/// `σ` of [`task_kernel_logit`], in (0, 1).
pub fn task_kernel(tape: &mut Tape, a: &TaskRepr, b: &TaskRepr, head: &SimilarityHead) -> Result<Var> {
    let logit = task_kernel_logit(tape, a, b, head)?;
    tape.sigmoid(logit)
}

/// Softmax over bilinear scores between a target summary `[1, d]` and pool
/// summaries `[p, d]`; returns `[1, p]`.
pub fn task_attention(tape: &mut Tape, target: Var, pool: Var, head: &SimilarityHead) -> Result<Var> {
    if tape.shape(pool).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("task attention needs a non-empty pool".into()));
    }
    let t = head.project(tape, target)?;
    let p = head.project(tape, pool)?;
    let pt = tape.transpose(p)?;
    let logits = tape.matmul(t, pt)?;
    tape.softmax(logits)
}

/// [`task_attention`] over task representations.
pub fn task_attention_over(tape: &mut Tape, target: &TaskRepr, pool: &[TaskRepr], head: &SimilarityHead) -> Result<Var> {
    if pool.is_empty() {
        return Err(Error::Contract("task attention needs a non-empty pool".into()));
    }
    let rows: Vec<Var> = pool.iter().map(|t| t.summary).collect();
    let stacked = tape.concat_rows(&rows)?;
    task_attention(tape, target.summary, stacked, head)
}
