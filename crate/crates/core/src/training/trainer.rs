use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{assemble_stage_data, Adam, DatasetRegistry, StageResult, StageSpec, StopMode, StopReason};
use crate::corpus::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::eval::fast_accuracy;
use crate::model::{Batch, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng};
use crate::tokenizer::Tokenizer;

/// End-of-epoch progress passed to [`train_stage_observed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Present when the stop rule measured it.
    pub accuracy: Option<f64>,
}

/// Trains `model` on `data` with shuffled mini-batch Adam until the stop rule fires.
///
/// `accuracy_set` is what `accuracy_target` rules are judged on, normally the
/// stage's own dataset before any mixing data was added.
pub fn train_stage<F: Scalar>(
    model: &mut Model<F>,
    tokenizer: &Tokenizer,
    data: &Dataset,
    accuracy_set: &Dataset,
    stage: &StageSpec,
) -> Result<StageResult> {
    train_stage_observed(model, tokenizer, data, accuracy_set, stage, &mut |_| {})
}

/// [`train_stage`] with a callback after every epoch.
pub fn train_stage_observed<F: Scalar>(
    model: &mut Model<F>,
    tokenizer: &Tokenizer,
    data: &Dataset,
    accuracy_set: &Dataset,
    stage: &StageSpec,
    on_epoch: &mut dyn FnMut(EpochStats),
) -> Result<StageResult> {
    stage.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.id.clone()));
    }
    let pairs = data
        .examples
        .iter()
        .map(|e| tokenizer.encode_pair(&e.prompt, &e.response))
        .collect::<Result<Vec<_>>>()?;
    let opt = &stage.optimizer;
    let mut adam = Adam::new(opt, model.num_params());
    let mut rng = rng(opt.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut epochs_run = 0;

    for epoch in 1..=stage.stop.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut scored = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            let batch = Batch::from_pairs(&chunk.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>());
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, curve });
            }
            adam.step(model.params_mut(), &grad);
            let n = batch.scored_tokens();
            weighted += loss * n as f64;
            scored += n;
        }
        let epoch_loss = weighted / scored as f64;
        curve.push((adam.steps() as usize, epoch_loss));
        epochs_run = epoch;
        let accuracy = match stage.stop.mode {
            StopMode::AccuracyTarget => Some(fast_accuracy(model, tokenizer, accuracy_set)?),
            _ => None,
        };
        on_epoch(EpochStats { epoch, step: adam.steps() as usize, loss: epoch_loss, accuracy });
        let done = match stage.stop.mode {
            StopMode::LossThreshold => (epoch_loss < stage.stop.threshold).then_some(StopReason::LossThreshold),
            StopMode::AccuracyTarget => {
                (accuracy.unwrap_or(0.0) >= stage.stop.threshold).then_some(StopReason::AccuracyTarget)
            }
            StopMode::FixedEpochs => None,
        };
        if let Some(reason) = done {
            stop_reason = reason;
            break;
        }
    }
    Ok(StageResult {
        model_checkpoint: None,
        train_curve: curve,
        epochs_run,
        stop_reason,
        mix_pool_cycles: 0,
        train_examples: data.len(),
    })
}

/// Accuracy on the evaluation set after one stage, with its training outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// 1-based stage number.
    pub stage_index: usize,
    pub stage_dataset: String,
    pub strategy: String,
    pub accuracy: f64,
    pub result: StageResult,
}

/// What one stage trained on, handed to observers before training starts.
pub struct StageRun<'a> {
    pub stage_index: usize,
    pub spec: &'a StageSpec,
    pub assembled: &'a Dataset,
    pub prior_factoids: Option<&'a Dataset>,
}

/// Hooks for diagnostics and persistence around every stage.
pub trait PipelineObserver<F> {
    fn before_stage(&mut self, _run: &StageRun<'_>, _model: &Model<F>) -> Result<()> {
        Ok(())
    }

    fn after_stage(&mut self, _run: &StageRun<'_>, _model: &Model<F>, _record: &mut StageRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _stage_index: usize, _stats: EpochStats) {}
}

impl<F> PipelineObserver<F> for () {}

/// Trains the stages in order from a fresh model, evaluating exact match on
/// `eval_on` after each one. Returns the final model and one record per stage.
pub fn run_pipeline<F: Scalar>(
    initial: &ModelConfig,
    tokenizer: &Tokenizer,
    registry: &DatasetRegistry,
    stages: &[StageSpec],
    eval_on: &str,
    observer: &mut dyn PipelineObserver<F>,
) -> Result<(Model<F>, Vec<StageRecord>)> {
    if stages.is_empty() {
        return Err(Error::config("pipeline needs at least one stage"));
    }
    let eval_set = registry
        .get(eval_on)
        .ok_or_else(|| Error::config(format!("eval_on references undefined dataset {eval_on:?}")))?;
    let mut model = Model::<F>::init(initial.clone())?;
    let mut records = Vec::with_capacity(stages.len());
    let mut prior: Option<Dataset> = None;

    for (i, stage) in stages.iter().enumerate() {
        let base = registry
            .get(&stage.dataset)
            .ok_or_else(|| Error::config(format!("stage {} references undefined dataset {:?}", i + 1, stage.dataset)))?;
        let assembled = assemble_stage_data(stage, prior.as_ref(), registry, derive_seed(stage.optimizer.seed, "assemble"))?;
        let run = StageRun {
            stage_index: i + 1,
            spec: stage,
            assembled: &assembled.dataset,
            prior_factoids: prior.as_ref(),
        };
        observer.before_stage(&run, &model)?;
        let mut result = train_stage_observed(&mut model, tokenizer, &assembled.dataset, base, stage, &mut |stats| {
            observer.on_epoch(i + 1, stats)
        })?;
        result.mix_pool_cycles = assembled.pool_cycles;
        let accuracy = fast_accuracy(&model, tokenizer, eval_set)?;
        let mut record = StageRecord {
            stage_index: i + 1,
            stage_dataset: stage.dataset.clone(),
            strategy: stage.strategy.label(),
            accuracy,
            result,
        };
        observer.after_stage(&run, &model, &mut record)?;
        records.push(record);

        if base.kind == DatasetKind::Factoid {
            match prior.as_mut() {
                Some(p) => {
                    p.id = format!("{}+{}", p.id, base.id);
                    p.examples.extend(base.examples.iter().cloned());
                }
                None => prior = Some(base.clone()),
            }
        }
    }
    Ok((model, records))
}
