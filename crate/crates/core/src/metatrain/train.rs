use std::io::Write;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::episode::{outer_step, Rngs, StepRecord};
use super::Model;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_split, MetricsReport};
use crate::kgdata::{sample_episode, DatasetBundle, Split};
use crate::numkit::AdamState;

/// Whether transfer is active at `step`: off for the first
/// `warmup_steps` steps, on afterwards.
pub fn warmup_schedule(step: usize, config: &TrainConfig) -> bool {
    step >= config.warmup_steps
}

/// Step indices after which the validation split is evaluated.
pub fn validation_steps(config: &TrainConfig) -> Vec<usize> {
    (0..config.max_steps).filter(|s| (s + 1) % config.eval_every == 0).collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Validation { step: usize, mrr: f64, hits1: f64, hits5: f64, hits10: f64, queries: usize, best: bool },
}

/// Result of [`train`]: the model with the best validation MRR (or the final
/// model when validation never ran).
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub best_step: Option<usize>,
    pub best: Option<MetricsReport>,
    pub steps: usize,
}

/// The outer loop. Every step samples `batch_size` episodes over training
/// relations; validation runs every `eval_every` steps.
pub fn train<W: Write>(bundle: &DatasetBundle, config: &TrainConfig, log: &mut W) -> Result<Trained> {
    config.validate()?;
    let mut model = Model::init(bundle, config)?;
    let relations: Vec<usize> =
        bundle.split(Split::Train).iter().copied().filter(|&r| bundle.task(r).len() > config.shots).collect();
    if relations.is_empty() && config.max_steps > 0 {
        return Err(Error::Validation(format!("no training relation has more than {} triples", config.shots)));
    }
    let validate = !bundle.split(Split::Valid).is_empty();
    let mut adam = AdamState::new(&model.store, config.lr);
    let mut rngs = Rngs::new(config.seed);
    let mut best: Option<(usize, MetricsReport, crate::numkit::ParamStore)> = None;

    for step in 0..config.max_steps {
        let transfer = config.transfer && warmup_schedule(step, config);
        let batch = (0..config.batch_size)
            .map(|_| {
                let r = *relations.choose(&mut rngs.episodes).expect("non-empty");
                sample_episode(bundle, r, config.shots, config.query_size, &mut rngs.episodes)
            })
            .collect::<Result<Vec<_>>>()?;
        let record = outer_step(&mut model, &mut adam, bundle, &batch, config, transfer, step, &mut rngs)?;
        write_record(log, &LogRecord::Step(record))?;

        if validate && (step + 1) % config.eval_every == 0 {
            let report = evaluate_split(bundle, Split::Valid, &model, config, transfer)?;
            let improved = best.as_ref().map_or(true, |(_, b, _)| report.mrr > b.mrr);
            write_record(
                log,
                &LogRecord::Validation {
                    step,
                    mrr: report.mrr,
                    hits1: report.hits1,
                    hits5: report.hits5,
                    hits10: report.hits10,
                    queries: report.queries,
                    best: improved,
                },
            )?;
            log::info!("step {step}: validation MRR {:.4}", report.mrr);
            if improved {
                best = Some((step, report, model.store.clone()));
            }
        }
    }
    Ok(match best {
        Some((step, report, store)) => {
            model.store = store;
            Trained { model, best_step: Some(step), best: Some(report), steps: config.max_steps }
        }
        None => Trained { model, best_step: None, best: None, steps: config.max_steps },
    })
}

fn write_record<W: Write>(log: &mut W, record: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Format { file: "training log".into(), detail: e.to_string() })?;
    writeln!(log, "{line}").map_err(|e| Error::io("training log", e))
}
