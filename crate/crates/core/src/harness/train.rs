//! Training loop with early stopping, and dense evaluation.

use std::borrow::Cow;
use std::fmt::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::model::SegmentationModel;
use crate::data::{crop_at, flip_augment, random_crop, sample_points_train, DatasetSplit, SampleRef, SegSample};
use crate::diffcore::{adam_step, Graph};
use crate::error::{ensure, Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};

/// Keeps synthetic samples in memory; tiles are decoded on every access.
pub struct SampleCache<'a> {
    refs: &'a [SampleRef],
    cached: Vec<Option<SegSample>>,
}

impl<'a> SampleCache<'a> {
    pub fn new(refs: &'a [SampleRef]) -> Result<Self> {
        let cached = refs
            .iter()
            .map(|r| match r {
                SampleRef::Synthetic { .. } => r.load().map(Some),
                SampleRef::Tile { .. } => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { refs, cached })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<Cow<'_, SegSample>> {
        match &self.cached[i] {
            Some(s) => Ok(Cow::Borrowed(s)),
            None => self.refs[i].load().map(Cow::Owned),
        }
    }
}

/// Non-overlapping `size x size` crops covering a sample in row-major order
/// (the sample itself when it already has that size).
pub fn eval_views(sample: &SegSample, size: usize) -> Result<Vec<Cow<'_, SegSample>>> {
    let (h, w) = (sample.height(), sample.width());
    if h == size && w == size {
        return Ok(vec![Cow::Borrowed(sample)]);
    }
    ensure!(
        h >= size && w >= size,
        Config,
        "sample of {h}x{w} is smaller than the {size} px evaluation size"
    );
    let mut out = Vec::new();
    for top in (0..=h - size).step_by(size) {
        for left in (0..=w - size).step_by(size) {
            out.push(Cow::Owned(crop_at(sample, top, left, size)?));
        }
    }
    Ok(out)
}

/// Confusion matrix of dense eval-mode predictions over `samples`.
pub fn confusion_on(model: &SegmentationModel, samples: &SampleCache<'_>, size: usize, chunk: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(model.field.config().classes);
    for i in 0..samples.len() {
        let s = samples.get(i)?;
        for view in eval_views(&s, size)? {
            let pred = model.predict_sample(&view, chunk)?;
            m.add(&pred, &view.mask)?;
        }
    }
    Ok(m)
}

/// Full metrics of `model` on a list of samples.
pub fn evaluate_model(
    model: &SegmentationModel,
    config: &ExperimentConfig,
    refs: &[SampleRef],
) -> Result<MetricsReport> {
    ensure!(!refs.is_empty(), Config, "nothing to evaluate");
    let start = Instant::now();
    let cache = SampleCache::new(refs)?;
    let m = confusion_on(model, &cache, config.data.image_size, config.training.eval_chunk)?;
    Ok(MetricsReport::new(
        m,
        model.decoder_parameters(),
        start.elapsed().as_secs_f64(),
        config.training.seed,
    ))
}

pub fn evaluate(checkpoint: &Checkpoint, refs: &[SampleRef]) -> Result<MetricsReport> {
    evaluate_model(&checkpoint.model, &checkpoint.config, refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    /// Aggregate validation IoU when a validation pass followed this step.
    pub val_iou: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    EarlyStopping,
    TargetReached,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the best validation IoU.
    pub best: Checkpoint,
    pub log: Vec<LogRecord>,
    pub stop: StopReason,
    pub steps: usize,
    pub runtime_s: f64,
}

pub const LOG_HEADER: &str = "step,epoch,loss,val_aggregate_iou";

/// Training log as CSV with [`LOG_HEADER`]; losses and IoUs are written
/// with full precision so equal logs mean bit-equal values.
pub fn log_csv(log: &[LogRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        let iou = r.val_iou.map_or_else(String::new, |v| format!("{v:?}"));
        writeln!(s, "{},{},{:?},{}", r.step, r.epoch, r.loss, iou).unwrap();
    }
    s
}

/// Salt that separates the data stream from the initialisation stream.
const DATA_STREAM: u64 = 0x5eed_da7a;

/// Trains on the dataset described by `config`.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    train_on(config, &config.dataset()?, |_| {})
}

/// Trains encoder and decoder jointly on `data.train`, validating on
/// `data.val`, and returns the state with the best aggregate validation IoU.
pub fn train_on(
    config: &ExperimentConfig,
    data: &DatasetSplit,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    ensure!(!data.train.is_empty(), Config, "the training split is empty");
    ensure!(!data.val.is_empty(), Config, "the validation split is empty");
    let start = Instant::now();
    let t = &config.training;
    let size = config.data.image_size;
    let train = SampleCache::new(&data.train)?;
    let val = SampleCache::new(&data.val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ DATA_STREAM);

    let mut state = Checkpoint::new(config.clone(), SegmentationModel::new(config)?);
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let validate = |state: &mut Checkpoint, best: &mut Option<Checkpoint>, since_best: &mut usize| -> Result<f64> {
        let m = confusion_on(&state.model, &val, size, t.eval_chunk)?;
        let iou = crate::metrics::iou(&m).aggregate;
        if best.as_ref().is_none_or(|b| iou > b.best_val_iou) {
            state.best_val_iou = iou;
            *best = Some(state.clone());
            *since_best = 0;
        } else {
            *since_best += 1;
        }
        Ok(iou)
    };

    let stop = 'outer: {
        for epoch in 0..t.max_epochs {
            state.epoch = epoch;
            order.shuffle(&mut rng);
            for batch in order.chunks(t.batch_size) {
                let mut images = Vec::with_capacity(batch.len());
                let mut points = Vec::with_capacity(batch.len());
                for &i in batch {
                    let s = train.get(i)?;
                    let mut s = if s.height() == size && s.width() == size {
                        s.into_owned()
                    } else {
                        random_crop(&s, size, &mut rng)?.0
                    };
                    if t.augment {
                        s = flip_augment(&s, &mut rng);
                    }
                    points.push(sample_points_train(&s.mask, size, size, t.points, &mut rng)?);
                    images.push(s.image);
                }
                let refs: Vec<_> = images.iter().collect();
                let mut g = Graph::new();
                let loss = state.model.loss(&mut g, &refs, &points)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss {value} at step {step}")));
                }
                let grads = g.backward(loss)?;
                state.model.params.zero_grads();
                state.model.params.accumulate_grads(&g, &grads);
                adam_step(&mut state.model.params, &mut state.adam).map_err(|e| match e {
                    Error::Divergence(m) => Error::Divergence(format!("{m} at step {step}")),
                    e => e,
                })?;
                state.model.params.apply_running_updates(&g);
                state.model.params.zero_grads();
                step += 1;
                state.step = step;

                let mut record = LogRecord {
                    step,
                    epoch,
                    loss: value,
                    val_iou: None,
                };
                let last_step = t.max_steps > 0 && step >= t.max_steps;
                if (t.eval_every > 0 && step % t.eval_every == 0) || (last_step && t.eval_every > 0) {
                    record.val_iou = Some(validate(&mut state, &mut best, &mut since_best)?);
                }
                let finished = record.val_iou.is_some_and(|v| t.target_iou > 0.0 && v >= t.target_iou);
                let patience_out =
                    record.val_iou.is_some() && t.early_stop_patience > 0 && since_best >= t.early_stop_patience;
                progress(&record);
                log.push(record);
                if finished {
                    break 'outer StopReason::TargetReached;
                }
                if patience_out {
                    break 'outer StopReason::EarlyStopping;
                }
                if last_step {
                    if t.eval_every == 0 {
                        let iou = validate(&mut state, &mut best, &mut since_best)?;
                        log.last_mut().expect("just pushed").val_iou = Some(iou);
                    }
                    break 'outer StopReason::MaxSteps;
                }
            }
            if t.eval_every == 0 {
                let iou = validate(&mut state, &mut best, &mut since_best)?;
                let last = log.last_mut().expect("an epoch has at least one step");
                last.val_iou = Some(iou);
                progress(last);
                if t.target_iou > 0.0 && iou >= t.target_iou {
                    break 'outer StopReason::TargetReached;
                }
                if t.early_stop_patience > 0 && since_best >= t.early_stop_patience {
                    break 'outer StopReason::EarlyStopping;
                }
            }
        }
        StopReason::MaxEpochs
    };
    let best = match best {
        Some(b) => b,
        None => {
            let _ = validate(&mut state, &mut best, &mut since_best)?;
            best.expect("validation stores a best state")
        }
    };
    Ok(TrainOutcome {
        best,
        log,
        stop,
        steps: step,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}
