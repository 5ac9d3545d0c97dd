//! Task similarity: WL edge-subtree labels and kernel, relational message
//! passing over the line graph, and the learned task kernel with its
//! attention approximation.

mod mp;
mod wl;

use rand::Rng;

pub use mp::{
    relational_mp_forward, task_attention, task_attention_over, task_kernel, task_kernel_logit, EdgeStates, MpParams,
    SimilarityHead, TaskRepr,
};
pub use wl::{wl_edge_labels, wl_labels, wl_set_kernel, WlLabels};

use crate::error::Result;
use crate::kgdata::{KnowledgeGraph, LocalLineGraph, Triple};
use crate::numkit::{ParamId, Tape};

/// Message passing over the local line graph around `support`, pooled into a
/// [`TaskRepr`].
#[allow(clippy::too_many_arguments)]
pub fn task_repr<R: Rng>(
    tape: &mut Tape,
    graph: &KnowledgeGraph,
    relation: usize,
    support: &[Triple],
    relation_table: ParamId,
    params: &MpParams,
    depth: usize,
    neighbor_cap: usize,
    rng: &mut R,
) -> Result<TaskRepr> {
    let local = LocalLineGraph::around(graph, support, depth, neighbor_cap, rng);
    let states = relational_mp_forward(tape, relation_table, &local, params, depth)?;
    TaskRepr::from_states(tape, relation, &states)
}
