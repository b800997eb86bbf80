//! Minibatch maximum-likelihood training with AdamW, and declarative
//! multi-stage plans built on top of it.

use std::borrow::Cow;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, LineageEntry};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::MatchRule;
use crate::graph::Graph;
use crate::image::Image;
use crate::model::{Dropout, Recognizer};
use crate::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::preprocess::Preprocess;
use crate::{derive_seed, stream};

pub mod plan;

pub use plan::{run_plan, DataSelector, Init, PlanOutcome, Preset, RunOptions, StagePlan, StageSpec};

/// Everything one stage needs besides its data and starting weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Transform applied to training images; evaluation uses its
    /// deterministic form.
    pub preprocess: Preprocess,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl StageConfig {
    pub fn new(name: impl Into<String>, epochs: usize, batch_size: usize, peak_lr: f64, preprocess: Preprocess, seed: u64) -> Self {
        StageConfig {
            name: name.into(),
            epochs,
            batch_size,
            peak_lr,
            preprocess,
            seed,
            adamw: AdamWConfig::default(),
            clip_norm: Some(1.0),
        }
    }
}

/// One line of the metric trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub stage: String,
    pub split: &'static str,
    /// Mean token negative log-likelihood.
    pub loss: f64,
    /// Exact-match percentage; validation rows only.
    pub accuracy: Option<f64>,
}

pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Argument(format!("trace: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    /// Weights from the epoch with the best validation accuracy (epoch 0 is
    /// the starting point).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub trace: Vec<TraceRow>,
}

struct Candidate {
    accuracy: f64,
    loss: f64,
}

impl Candidate {
    fn beats(&self, other: &Candidate) -> bool {
        self.accuracy > other.accuracy || (self.accuracy == other.accuracy && self.loss < other.loss)
    }
}

/// Trains from `init` on `train`, selecting the best epoch on `valid`.
pub fn train_stage(
    cfg: &StageConfig,
    init: &Checkpoint,
    train: &[&Sample],
    valid: &[&Sample],
    progress: &mut dyn FnMut(&TraceRow),
) -> Result<StageOutcome> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Argument(format!("stage {}: empty train or validation set", cfg.name)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut model = init.model()?;
    let vocab = init.vocab.clone();
    let eval_pre = cfg.preprocess.deterministic();
    let mut recognizer = Recognizer::new(model.clone(), vocab.clone(), eval_pre)?;
    let max_len = model.config().max_target_len;
    let encode = |s: &Sample| -> Result<Vec<usize>> {
        let seq = vocab.encode(s.transcript());
        if seq.len() - 1 > max_len {
            return Err(Error::Contract(format!(
                "transcript {:?} needs {} decoder steps, model allows {max_len}",
                s.transcript(),
                seq.len() - 1
            )));
        }
        Ok(seq)
    };
    let train_seqs = train.iter().map(|s| encode(s)).collect::<Result<Vec<_>>>()?;
    let valid_seqs = valid.iter().map(|s| encode(s)).collect::<Result<Vec<_>>>()?;
    let sources: Vec<Cow<'_, Image>> = train.iter().map(|s| s.load_image()).collect::<Result<_>>()?;
    let valid_imgs: Vec<Image> = valid
        .iter()
        .map(|s| s.load_image().and_then(|img| eval_pre.apply_deterministic(&img)))
        .collect::<Result<_>>()?;
    let fixed_train: Option<Vec<Image>> = if cfg.preprocess == eval_pre {
        Some(sources.iter().map(|img| eval_pre.apply_deterministic(img)).collect::<Result<_>>()?)
    } else {
        None
    };

    let mut rng = stream(derive_seed(cfg.seed, &["order"]));
    let mut drop_rng = stream(derive_seed(cfg.seed, &["dropout"]));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.epochs * steps_per_epoch);
    let mut opt = OptimizerState::new(model.params(), cfg.adamw, cfg.peak_lr);
    let mut trace = Vec::new();

    let validate = |rec: &Recognizer| -> Result<Candidate> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (imgs, seqs) in valid_imgs.chunks(cfg.batch_size).zip(valid_seqs.chunks(cfg.batch_size)) {
            let refs: Vec<&Image> = imgs.iter().collect();
            let mut g = Graph::new();
            let (loss, _) = rec.model.batch_loss(&mut g, &refs, seqs, None)?;
            let n: usize = seqs.iter().map(|s| s.len() - 1).sum();
            total += g.value(loss)[0] * n as f64;
            tokens += n;
        }
        let mut correct = 0;
        for (img, s) in valid_imgs.iter().zip(valid) {
            if MatchRule::Normalized.matches(&rec.recognize_prepared(img)?.text, s.transcript()) {
                correct += 1;
            }
        }
        Ok(Candidate {
            accuracy: 100.0 * correct as f64 / valid.len() as f64,
            loss: total / tokens as f64,
        })
    };

    let record = |trace: &mut Vec<TraceRow>, progress: &mut dyn FnMut(&TraceRow), row: TraceRow| {
        progress(&row);
        trace.push(row);
    };

    let first = validate(&recognizer)?;
    record(
        &mut trace,
        progress,
        TraceRow {
            epoch: 0,
            stage: cfg.name.clone(),
            split: "valid",
            loss: first.loss,
            accuracy: Some(first.accuracy),
        },
    );
    let mut best = (first, 0usize, model.params().clone(), None::<OptimizerState>);

    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<Cow<'_, Image>> = match &fixed_train {
                Some(fixed) => chunk.iter().map(|&i| Cow::Borrowed(&fixed[i])).collect(),
                None => chunk
                    .iter()
                    .map(|&i| cfg.preprocess.apply(&sources[i], &mut rng).map(Cow::Owned))
                    .collect::<Result<_>>()?,
            };
            let refs: Vec<&Image> = imgs.iter().map(|c| c.as_ref()).collect();
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let rate = model.config().dropout;
            let (loss, grads, bound) = {
                let mut g = Graph::new();
                let drop = (rate > 0.0).then(|| Dropout { rate, rng: &mut drop_rng });
                let (loss, bound) = model.batch_loss(&mut g, &refs, &seqs, drop)?;
                let value = g.value(loss)[0];
                (value, g.backward(loss)?, bound)
            };
            bound.accumulate(&grads, model.params_mut())?;
            let lr = schedule.lr(step);
            let grad_norm = match cfg.clip_norm {
                Some(c) => model.params_mut().clip_grad_norm(c),
                None => model.params().grad_norm(),
            };
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFinite { step, lr, grad_norm });
            }
            adamw_step(model.params_mut(), &mut opt, lr)?;
            model.params_mut().zero_grads();
            step += 1;
            epoch_loss += loss * chunk.len() as f64;
        }
        record(
            &mut trace,
            progress,
            TraceRow {
                epoch,
                stage: cfg.name.clone(),
                split: "train",
                loss: epoch_loss / train.len() as f64,
                accuracy: None,
            },
        );
        recognizer.model = model.clone();
        let cand = validate(&recognizer)?;
        record(
            &mut trace,
            progress,
            TraceRow {
                epoch,
                stage: cfg.name.clone(),
                split: "valid",
                loss: cand.loss,
                accuracy: Some(cand.accuracy),
            },
        );
        if cand.beats(&best.0) {
            best = (cand, epoch, model.params().clone(), Some(opt.clone()));
        }
    }

    let (cand, best_epoch, params, optimizer) = best;
    let mut lineage = init.lineage.clone();
    lineage.push(LineageEntry {
        stage: cfg.name.clone(),
        input: init.fingerprint(),
        output: params.fingerprint(),
    });
    let checkpoint = Checkpoint {
        config: model.config().clone(),
        vocab: vocab.clone(),
        preprocess: eval_pre,
        params,
        step: optimizer.as_ref().map_or(init.step, |o| o.step_count),
        optimizer,
        lineage,
    };
    Ok(StageOutcome {
        checkpoint,
        best_epoch,
        best_valid_accuracy: cand.accuracy,
        trace,
    })
}
