//! Training loop, evaluation passes and repeated-run experiments.

mod experiments;
mod optim;

pub use experiments::{
    ablate_scales, mean_sd, repeat_seed, sweep_alpha, train_repeats, AblationRow, RepeatSummary, SweepRow,
};
pub use optim::{clip_global_norm, cosine_warmup_lr, AdamW, OptimizerState};

use rand::seq::SliceRandom;

use crate::bagdata::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc_binary, auc_macro_ovr, c_index, cox_loss, cross_entropy, SurvivalRecord};
use crate::model::{encode_slide, encode_slide_on, HeadKind, HeadOutput, Marble, MarbleParams, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::pyramid::{coarse_branch_drop, shuffle_within_levels, TokenBag};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    /// Slides per optimizer step for classification; only 1 is supported.
    pub batch_size: usize,
    pub drop_alpha: f64,
    pub shuffle: bool,
    pub seed: u64,
    pub cox_lambda: f64,
    /// Slides sharing one Cox partial likelihood per optimizer step.
    pub cox_group: usize,
    /// Global gradient-norm limit; `0` disables clipping.
    pub grad_clip: f64,
    /// SSM inner width `E`; `None` means `2 D`.
    pub inner: Option<usize>,
    /// SSM state size `N`.
    pub state: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            epochs: 30,
            warmup_epochs: 5,
            patience: 10,
            batch_size: 1,
            drop_alpha: 0.1,
            shuffle: true,
            seed: 0,
            cox_lambda: 1e-4,
            cox_group: 32,
            grad_clip: 5.0,
            inner: None,
            state: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.drop_alpha) {
            return bad(format!("drop_alpha must be in [0, 1), got {}", self.drop_alpha));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be a non-negative number, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.cox_lambda >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay, cox_lambda and grad_clip must be non-negative".into());
        }
        if self.cox_group == 0 || self.state == 0 || self.inner == Some(0) {
            return bad("cox_group, state and inner must be positive".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// Model dimensions for `dataset`.
    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let d = dataset.dim();
        let cfg = ModelConfig {
            d_model: d,
            inner: self.inner.unwrap_or(2 * d),
            state: self.state,
            levels: dataset.num_levels(),
            classes: match dataset.task {
                HeadKind::Classification => dataset.classes().max(2),
                HeadKind::Survival => 2,
            },
            head: dataset.task,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the per-epoch report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub best_so_far: f64,
    pub stopped: bool,
}

pub const EPOCH_HEADER: &str = "epoch,lr,train_loss,val_metric,best_so_far,stopped_flag";

impl EpochRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_metric,
            self.best_so_far,
            u8::from(self.stopped)
        )
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Parameters of the epoch with the best validation metric.
    pub best: MarbleParams,
    pub best_epoch: usize,
    pub final_params: MarbleParams,
    pub report: Vec<EpochRow>,
}

/// Per-slide prediction: class probabilities or `[risk]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: HeadKind,
    pub predictions: Vec<Prediction>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub c_index: Option<f64>,
}

impl EvalReport {
    /// AUC for classification, C-index for survival.
    pub fn metric(&self) -> f64 {
        match self.task {
            HeadKind::Classification => self.auc.unwrap_or(f64::NAN),
            HeadKind::Survival => self.c_index.unwrap_or(f64::NAN),
        }
    }
}

fn check_compatible(params: &MarbleParams, dataset: &Dataset) -> Result<()> {
    if params.head_kind() != dataset.task
        || params.d_model() != dataset.dim()
        || params.num_levels() != dataset.num_levels()
    {
        return Err(Error::Checkpoint(format!(
            "model ({} head, D={}, {} levels) does not fit the data ({}, D={}, {} levels)",
            params.head_kind().name(),
            params.d_model(),
            params.num_levels(),
            dataset.task.name(),
            dataset.dim(),
            dataset.num_levels()
        )));
    }
    Ok(())
}

/// Deterministic pass over one split: full bags in stored order.
pub fn evaluate(params: &MarbleParams, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    check_compatible(params, dataset)?;
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("{} split is empty", split.name())));
    }
    let mut predictions = Vec::with_capacity(idx.len());
    for &i in &idx {
        let slide = &dataset.slides[i];
        let scores = match encode_slide(&slide.bag, params)?.head {
            HeadOutput::Logits(l) => {
                let mut p = l.into_data();
                crate::numerics::softmax_in_place(&mut p);
                p
            }
            HeadOutput::Risk(r) => vec![r],
        };
        predictions.push(Prediction {
            id: slide.id.clone(),
            scores,
        });
    }
    let mut report = EvalReport {
        task: dataset.task,
        predictions,
        accuracy: None,
        auc: None,
        c_index: None,
    };
    match dataset.task {
        HeadKind::Classification => {
            let truth: Vec<usize> = idx.iter().map(|&i| dataset.slides[i].label()).collect::<Result<_>>()?;
            let pred: Vec<usize> = report
                .predictions
                .iter()
                .map(|p| argmax(&p.scores))
                .collect();
            report.accuracy = Some(accuracy(&pred, &truth)?);
            let c = report.predictions[0].scores.len();
            report.auc = Some(if c == 2 {
                let s: Vec<f64> = report.predictions.iter().map(|p| p.scores[1]).collect();
                let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
                auc_binary(&s, &pos)?
            } else {
                let rows: Vec<Vec<f64>> = report.predictions.iter().map(|p| p.scores.clone()).collect();
                auc_macro_ovr(&Tensor::from_rows(&rows)?, &truth)?
            });
        }
        HeadKind::Survival => {
            let records: Vec<SurvivalRecord> =
                idx.iter().map(|&i| dataset.slides[i].record()).collect::<Result<_>>()?;
            let risks: Vec<f64> = report.predictions.iter().map(|p| p.scores[0]).collect();
            report.c_index = Some(c_index(&risks, &records)?);
        }
    }
    Ok(report)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The training-time view of a bag: coarse-branch drop, then within-level shuffle.
pub fn augment(bag: &TokenBag, cfg: &TrainConfig, epoch: usize, slide: usize) -> Result<TokenBag> {
    let path = [epoch as u64, slide as u64];
    let dropped = if cfg.drop_alpha > 0.0 {
        coarse_branch_drop(bag, cfg.drop_alpha, derive_seed(cfg.seed, "coarse-branch-drop", &path))?
    } else {
        bag.clone()
    };
    if cfg.shuffle {
        shuffle_within_levels(&dropped, derive_seed(cfg.seed, "scan-order", &path))
    } else {
        Ok(dropped)
    }
}

fn gradients(tape: &Tape, loss: Var, bound: &Marble<Var>, params: &MarbleParams) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss)?;
    Ok(bound
        .named()
        .into_iter()
        .zip(params.named())
        .map(|((_, v), (_, p))| g.get_or_zeros(*v, p))
        .collect())
}

fn with_context(e: Error, epoch: usize, ids: &str) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Numeric(_) | Error::Domain { .. } => {
            Error::Numeric(format!("epoch {epoch}, slide {ids}: {e}"))
        }
        other => other,
    }
}

/// One optimizer step's loss and gradients.
fn step_gradients(
    dataset: &Dataset,
    batch: &[usize],
    params: &MarbleParams,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = match dataset.task {
        HeadKind::Classification => {
            let i = batch[0];
            let bag = augment(&dataset.slides[i].bag, cfg, epoch, i)?;
            let out = encode_slide_on(&mut tape, &bag, &bound)?;
            cross_entropy(&mut tape, out.head, dataset.slides[i].label()?)?
        }
        HeadKind::Survival => {
            let mut risks = Vec::with_capacity(batch.len());
            let mut records = Vec::with_capacity(batch.len());
            for &i in batch {
                let bag = augment(&dataset.slides[i].bag, cfg, epoch, i)?;
                risks.push(encode_slide_on(&mut tape, &bag, &bound)?.head);
                records.push(dataset.slides[i].record()?);
            }
            let r = tape.stack_scalars(&risks)?;
            let norm = if cfg.cox_lambda > 0.0 {
                let vars: Vec<Var> = bound.named().into_iter().map(|(_, v)| *v).collect();
                Some(tape.sq_norm(&vars)?)
            } else {
                None
            };
            cox_loss(&mut tape, r, &records, cfg.cox_lambda, norm)?.loss
        }
    };
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((value, gradients(&tape, loss, &bound, params)?))
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_| {})
}

/// Trains with a callback after every epoch.
pub fn train_with(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() || dataset.indices(Split::Val).is_empty() {
        return Err(Error::Config("train and val splits must be non-empty".into()));
    }
    let model = cfg.model_config(dataset)?;
    let mut params = MarbleParams::init(&model)?;
    let opt = cfg.optimizer();
    let mut state = OptimizerState::new(params.named().into_iter().map(|(_, t)| t));

    let mut best = params.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stagnant = 0;
    let mut report = Vec::new();
    let group = match dataset.task {
        HeadKind::Classification => cfg.batch_size,
        HeadKind::Survival => cfg.cox_group,
    };

    for epoch in 0..cfg.epochs {
        let lr = cosine_warmup_lr(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.epochs)?;
        let mut order = train_idx.clone();
        if cfg.shuffle {
            order.shuffle(&mut rng_for(cfg.seed, "slide-order", &[epoch as u64]));
        }
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(group) {
            let ids = || {
                batch
                    .iter()
                    .map(|&i| dataset.slides[i].id.as_str())
                    .collect::<Vec<_>>()
                    .join("+")
            };
            let (loss, mut grads) =
                step_gradients(dataset, batch, &params, cfg, epoch).map_err(|e| with_context(e, epoch, &ids()))?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut params.params_mut(), &grads, &mut state, lr)?;
            total += loss;
            steps += 1;
        }
        let val = evaluate(&params, dataset, Split::Val)?.metric();
        if val > best_metric {
            best_metric = val;
            best = params.clone();
            best_epoch = epoch;
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        let stopped = stagnant >= cfg.patience;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: total / steps as f64,
            val_metric: val,
            best_so_far: best_metric,
            stopped,
        };
        on_epoch(&row);
        report.push(row);
        if stopped {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        final_params: params,
        report,
    })
}
