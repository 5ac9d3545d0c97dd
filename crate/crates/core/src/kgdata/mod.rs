//! Graph storage, dataset ingestion, episode sampling and synthetic data.

mod dataset;
mod episode;
mod graph;
mod synth;

pub use dataset::{load_dataset, write_bundle, DatasetBundle, DatasetStats, Split, REQUIRED_FILES};
pub use episode::{evaluation_episode, sample_episode, sample_negative, Episode};
pub use graph::{KnowledgeGraph, LocalLineGraph, Triple, Vocab};
pub use synth::{synth_generate, SynthSpec};
