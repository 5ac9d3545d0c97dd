//! Task-conditioned meta-learning: the model, the adaptive inner step, the
//! outer optimization loop, warm-up scheduling and TransE pre-training.

mod episode;
mod inner;
mod train;
mod transe;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use episode::{
    batch_loss, encode_episode, episode_loss, outer_step, transfer_merge, BatchLoss, EncodedTask, EntityRows,
    EpisodeInputs, Rngs, StepRecord,
};
pub(crate) use episode::all_train_pool;
pub use inner::{adaptive_scale, inner_adapt, task_stats, AdaptState};
pub use train::{train, validation_steps, warmup_schedule, LogRecord, Trained};
pub use transe::{pretrain_transe, TransE};

use crate::config::TrainConfig;
use crate::contrast::ContextEncoder;
use crate::error::Result;
use crate::kgdata::{DatasetBundle, Split};
use crate::numkit::{checkpoint, uniform, ParamId, ParamStore, Tape, Tensor};
use crate::relearner::MrlParams;
use crate::scorer::ProjectionBank;
use crate::taskgraph::{task_kernel, MpParams, SimilarityHead};

/// Independent random streams. Keeping them apart means that switching one
/// component off never shifts the draws seen by another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Embeddings = 0,
    Projection = 1,
    Relearner = 2,
    TaskGraph = 3,
    Context = 4,
    Episodes = 10,
    Contexts = 11,
    LocalGraphs = 12,
    Evaluation = 13,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Every learned parameter, with handles into one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub entities: ParamId,
    pub relations: ParamId,
    pub bank: ProjectionBank,
    pub mrl: MrlParams,
    pub mp: MpParams,
    pub similarity: SimilarityHead,
    /// `W_r` of the adaptive scale, `[6d + 1]`.
    pub scale: ParamId,
    pub context: ContextEncoder,
    pub dim: usize,
}

impl Model {
    /// Builds the model around given embedding tables. Projection vectors
    /// start as copies of the embeddings.
    pub fn with_embeddings(entities: Tensor, relations: Tensor, config: &TrainConfig) -> Result<Self> {
        let dim = config.dim;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let ent = store.add("emb.entity", entities.clone());
        let rel = store.add("emb.relation", relations.clone());
        let bank = ProjectionBank::new(&mut store, entities, relations, &mut stream(seed, Stream::Projection));
        let mrl = MrlParams::new(&mut store, dim, config.heads, &mut stream(seed, Stream::Relearner))?;
        let mut rng = stream(seed, Stream::TaskGraph);
        let mp = MpParams::new(&mut store, dim, &mut rng);
        let similarity = SimilarityHead::new(&mut store, dim, &mut rng);
        let scale = store.add("scale.w", Tensor::zeros(&[6 * dim + 1]));
        let context = ContextEncoder::new(&mut store, dim, config.heads, &mut stream(seed, Stream::Context))?;
        Ok(Model { store, entities: ent, relations: rel, bank, mrl, mp, similarity, scale, context, dim })
    }

    /// Initializes from the bundle: supplied pretrained tables when present,
    /// otherwise TransE over the background graph.
    pub fn init(bundle: &DatasetBundle, config: &TrainConfig) -> Result<Self> {
        let (ent, rel) = match (&bundle.entity_init, &bundle.relation_init) {
            (Some(e), Some(r)) => (e.clone(), r.clone()),
            _ => {
                let mut rng = stream(config.seed, Stream::Embeddings);
                let t = pretrain_transe(
                    &bundle.graph,
                    bundle.num_entities(),
                    bundle.num_relations(),
                    config.pretrain_epochs,
                    config,
                    &mut rng,
                )?;
                (t.entities, t.relations)
            }
        };
        Self::with_embeddings(ent, rel, config)
    }

    /// A model with the right layout for restoring a checkpoint into.
    pub fn skeleton(num_entities: usize, num_relations: usize, config: &TrainConfig) -> Result<Self> {
        let mut rng = stream(config.seed, Stream::Embeddings);
        let bound = 6.0 / (config.dim as f64).sqrt();
        let ent = uniform(&mut rng, &[num_entities, config.dim], bound);
        let rel = uniform(&mut rng, &[num_relations, config.dim], bound);
        Self::with_embeddings(ent, rel, config)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.store, None)
    }

    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        checkpoint::restore(bytes, &mut self.store, None)
    }
}

/// Pairwise task kernel over every task of the bundle, in train, valid,
/// test order. Each task is represented by its first `shots` triples.
pub fn task_similarity(model: &Model, bundle: &DatasetBundle, config: &TrainConfig) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let relations: Vec<usize> = [Split::Train, Split::Valid, Split::Test]
        .into_iter()
        .flat_map(|s| bundle.split(s).iter().copied())
        .collect();
    let mut rng = stream(config.seed, Stream::LocalGraphs);
    let mut tape = Tape::with_params(&model.store);
    let mut reprs = Vec::with_capacity(relations.len());
    for &r in &relations {
        let triples = bundle.task(r);
        let support = &triples[..config.shots.min(triples.len())];
        let encoded = encode_episode(&mut tape, model, &bundle.graph, r, support, config, true, &mut rng)?;
        reprs.push(encoded.task.expect("task representation requested"));
    }
    let mut matrix = vec![vec![0.0; relations.len()]; relations.len()];
    for i in 0..relations.len() {
        for j in 0..relations.len() {
            let k = task_kernel(&mut tape, &reprs[i], &reprs[j], &model.similarity)?;
            matrix[i][j] = tape.item(k);
        }
    }
    Ok((relations, matrix))
}
