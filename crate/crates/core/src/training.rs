//! Adapter training: AdamW with decoupled decay, cosine schedule with linear
//! warmup, global-norm clipping, gradient accumulation and early stopping on
//! validation balanced accuracy.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::eval::{effective_threads, evaluate, predict_batch, AnswerTokens, EvalError};
use crate::lm::{loss_and_grad, Gradients, ModelError, ModelParams, Mode, TensorRecord};
use crate::prompting::TokenizedPrompt;
use crate::real::Real;
use crate::seeds;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cosine_lr: step {step} outside [0, {total}] or total <= warmup {warmup}")]
    Schedule { step: u64, total: u64, warmup: u64 },
    #[error("empty training set")]
    EmptyTrain,
    #[error("validation set must contain both labels")]
    SingleClassValidation,
    #[error("gradient set does not match trainable tensors: {0}")]
    GradientMismatch(String),
    #[error("target token {0} is not an answer token")]
    BadTarget(u32),
    #[error("resume state does not match this model: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    #[default]
    BalancedAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub clip_norm: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_metric: EvalMetric,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Worker threads for micro-batch gradients and validation; 0 = all cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            clip_norm: 0.5,
            effective_batch: 16,
            micro_batch: 4,
            max_epochs: 250,
            patience: 15,
            eval_metric: EvalMetric::BalancedAccuracy,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("train.learning_rate must be > 0");
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be >= 0");
        }
        if self.micro_batch == 0 || self.effective_batch == 0 || self.effective_batch % self.micro_batch != 0 {
            return bad("train.micro_batch must divide train.effective_batch");
        }
        if self.patience == 0 {
            return bad("train.patience must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("train.max_epochs must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("train.beta1/beta2 must be in [0, 1) and train.eps > 0");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.effective_batch) as u64
    }

    /// Schedule horizon: `max_epochs × steps_per_epoch`.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.max_epochs as u64 * self.steps_per_epoch(n_train)
    }
}

/// Linear warmup to `base`, then half-cosine decay to 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, base: f64) -> Result<f64, TrainError> {
    if step > total || total <= warmup {
        return Err(TrainError::Schedule { step, total, warmup });
    }
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// If the global L2 norm exceeds `max_norm`, scale every gradient by
/// `max_norm / norm`. Returns the norm before clipping.
pub fn clip_gradients<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW moments for the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: BTreeMap<String, Array2<F>>,
    pub v: BTreeMap<String, Array2<F>>,
}

impl<F: Real> Default for AdamState<F> {
    fn default() -> Self {
        AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One AdamW update on named parameters: decay `w ← w·(1 − lr·wd)`, then
/// `w ← w − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step<F: Real>(
    params: &mut [(String, &mut Array2<F>)],
    state: &mut AdamState<F>,
    grads: &Gradients<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || params.iter().any(|(n, _)| grads.get(n).is_none()) {
        let have: Vec<&String> = grads.tensors.keys().collect();
        let want: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        return Err(TrainError::GradientMismatch(format!("got {have:?}, expected {want:?}")));
    }
    for (name, w) in params.iter() {
        if grads.get(name).map(|g| g.dim()) != Some(w.dim()) {
            return Err(TrainError::GradientMismatch(format!("shape mismatch for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let decay = F::of(1.0 - lr * cfg.weight_decay);
    let step_size = F::of(lr / bc1);
    let inv_bc2 = F::of(1.0 / bc2);
    let eps = F::of(cfg.eps);
    for (name, w) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        ndarray::Zip::from(&mut **w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            *w = *w * decay - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
    pub seconds: f64,
}

/// Everything needed to continue a run where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub epochs_done: usize,
    pub adam: AdamState<F>,
    pub best_score: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub history: Vec<EpochRecord>,
    /// Trainable tensors at the best epoch.
    pub best: BTreeMap<String, Array2<F>>,
    /// Trainable tensors at the end of the last completed epoch.
    pub current: BTreeMap<String, Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Model carrying the best-validation trainable tensors.
    pub model: ModelParams<F>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
    pub state: TrainState<F>,
}

#[derive(Debug, Default)]
pub struct TrainOptions<'a, F> {
    /// Append one CSV row per epoch.
    pub log_path: Option<&'a Path>,
    pub resume: Option<TrainState<F>>,
    /// Stop after this many epochs in this call (for checkpoint/resume).
    pub epoch_limit: Option<usize>,
}

pub const LOG_HEADER: &str = "epoch,step,lr,train_loss,val_balanced_accuracy,seconds";

fn snapshot<F: Real>(model: &mut ModelParams<F>) -> BTreeMap<String, Array2<F>> {
    model.trainable_mut().into_iter().map(|(n, a)| (n, a.clone())).collect()
}

fn restore<F: Real>(model: &mut ModelParams<F>, tensors: &BTreeMap<String, Array2<F>>) -> Result<(), TrainError> {
    for (name, slot) in model.trainable_mut() {
        let t = tensors.get(&name).ok_or_else(|| TrainError::Resume(format!("missing tensor {name}")))?;
        if t.dim() != slot.dim() {
            return Err(TrainError::Resume(format!("shape mismatch for {name}")));
        }
        slot.assign(t);
    }
    Ok(())
}

struct Example<'a> {
    inputs: &'a [u32],
    labels: &'a [u32],
    mask: &'a [bool],
}

/// Sum of per-example losses and gradients over `batch`, computed by up to
/// `threads` workers and reduced in input order.
fn batch_gradients<F: Real>(
    model: &ModelParams<F>,
    batch: &[(usize, Example<'_>)],
    seed: u64,
    epoch: usize,
    threads: usize,
) -> Result<(f64, Gradients<F>), TrainError> {
    let one = |(idx, ex): &(usize, Example<'_>)| -> Result<(f64, Gradients<F>), TrainError> {
        let mut rng = seeds::labeled_rng(seed, &format!("dropout:{epoch}:{idx}"));
        Ok(loss_and_grad(model, ex.inputs, ex.labels, ex.mask, Mode::Train(&mut rng))?)
    };
    let results: Vec<Result<(f64, Gradients<F>), TrainError>> = if threads <= 1 || batch.len() <= 1 {
        batch.iter().map(one).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(one).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut loss = 0.0;
    let mut acc = Gradients::new();
    for r in results {
        let (l, g) = r?;
        loss += l;
        acc.accumulate(&g);
    }
    Ok((loss, acc))
}

/// Fine-tune the trainable tensors of `model`.
///
/// Each optimizer step averages the gradients of `effective_batch` examples,
/// accumulated `micro_batch` at a time. Validation balanced accuracy is
/// measured after every epoch; training stops after `patience` epochs without
/// strict improvement. The returned model carries the best epoch's tensors.
pub fn train<F: Real>(
    mut model: ModelParams<F>,
    train_set: &[TokenizedPrompt],
    val_set: &[TokenizedPrompt],
    answers: AnswerTokens,
    cfg: &TrainConfig,
    opts: TrainOptions<'_, F>,
) -> Result<TrainOutcome<F>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let val_gold = val_set
        .iter()
        .map(|tp| answers.label_of(tp.target_token).ok_or(TrainError::BadTarget(tp.target_token)))
        .collect::<Result<Vec<Label>, _>>()?;
    if !val_gold.iter().any(|l| l.is_midblock()) || val_gold.iter().all(|l| l.is_midblock()) {
        return Err(TrainError::SingleClassValidation);
    }
    let val_items: Vec<(String, Vec<u32>)> = val_set.iter().map(|tp| (tp.obs_id.clone(), tp.context().to_vec())).collect();
    let threads = effective_threads(cfg.threads);
    let total = cfg.total_steps(train_set.len());
    let warmup = cfg.warmup_steps.min(total.saturating_sub(1));

    let mut state = match opts.resume {
        Some(st) => {
            restore(&mut model, &st.current)?;
            st
        }
        None => TrainState {
            epochs_done: 0,
            adam: AdamState::default(),
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            history: Vec::new(),
            best: snapshot(&mut model),
            current: BTreeMap::new(),
        },
    };
    let mut log = match opts.log_path {
        Some(path) => {
            let fresh = state.epochs_done == 0 || !path.exists();
            let mut f = File::options()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)
                .map_err(|source| TrainError::Io { path: path.into(), source })?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|source| TrainError::Io { path: path.into(), source })?;
            }
            Some((f, path))
        }
        None => None,
    };

    let mut stopped_early = state.since_improvement >= cfg.patience;
    let mut epochs_this_call = 0;
    while state.epochs_done < cfg.max_epochs && !stopped_early {
        if opts.epoch_limit.is_some_and(|n| epochs_this_call >= n) {
            break;
        }
        let epoch = state.epochs_done + 1;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeds::labeled_rng(cfg.seed, &format!("shuffle:{epoch}")));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.effective_batch) {
            let mut acc = Gradients::new();
            for micro in batch.chunks(cfg.micro_batch) {
                let examples: Vec<(usize, Example<'_>)> = micro
                    .iter()
                    .map(|&i| {
                        let (inputs, labels, mask) = train_set[i].shifted();
                        (i, Example { inputs, labels, mask })
                    })
                    .collect();
                let (loss, g) = batch_gradients(&model, &examples, cfg.seed, epoch, threads)?;
                epoch_loss += loss;
                acc.accumulate(&g);
            }
            acc.scale(1.0 / batch.len() as f64);
            clip_gradients(&mut acc, cfg.clip_norm);
            let step = state.adam.step + 1;
            lr = cosine_lr(step.min(total), total, warmup, cfg.learning_rate)?;
            let mut params = model.trainable_mut();
            adamw_step(&mut params, &mut state.adam, &acc, lr, cfg)?;
        }
        let preds = predict_batch(&model, &val_items, answers, threads)?;
        let score = evaluate(&preds, &val_gold)?.balanced_accuracy;
        let record = EpochRecord {
            epoch,
            step: state.adam.step,
            lr,
            train_loss: epoch_loss / train_set.len() as f64,
            val_balanced_accuracy: score,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val balanced accuracy {:.4}, lr {:.2e}, {:.1}s",
            record.train_loss,
            score,
            lr,
            record.seconds
        );
        if let Some((f, path)) = log.as_mut() {
            writeln!(
                f,
                "{},{},{:e},{:.6},{:.6},{:.3}",
                record.epoch, record.step, record.lr, record.train_loss, record.val_balanced_accuracy, record.seconds
            )
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        }
        state.history.push(record);
        state.epochs_done = epoch;
        epochs_this_call += 1;
        if score > state.best_score {
            state.best_score = score;
            state.best_epoch = epoch;
            state.since_improvement = 0;
            state.best = snapshot(&mut model);
        } else {
            state.since_improvement += 1;
        }
        stopped_early = state.since_improvement >= cfg.patience;
    }
    state.current = snapshot(&mut model);
    restore(&mut model, &state.best)?;
    Ok(TrainOutcome {
        model,
        history: state.history.clone(),
        best_epoch: state.best_epoch,
        best_score: state.best_score,
        stopped_early,
        state,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    format: String,
    epochs_done: usize,
    adam_step: u64,
    best_score: Option<f64>,
    best_epoch: usize,
    since_improvement: usize,
    history: Vec<EpochRecord>,
    adam_m: Vec<TensorRecord>,
    adam_v: Vec<TensorRecord>,
    best: Vec<TensorRecord>,
    current: Vec<TensorRecord>,
}

const STATE_FORMAT: &str = "xwalk-train-state/1";

fn records<F: Real>(m: &BTreeMap<String, Array2<F>>) -> Vec<TensorRecord> {
    m.iter().map(|(n, a)| TensorRecord::dense(n, a)).collect()
}

fn tensors<F: Real>(rs: &[TensorRecord]) -> Result<BTreeMap<String, Array2<F>>, TrainError> {
    rs.iter().map(|r| Ok((r.name.clone(), r.to_dense()?))).collect()
}

impl<F: Real> TrainState<F> {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = StateFile {
            format: STATE_FORMAT.into(),
            epochs_done: self.epochs_done,
            adam_step: self.adam.step,
            best_score: self.best_score.is_finite().then_some(self.best_score),
            best_epoch: self.best_epoch,
            since_improvement: self.since_improvement,
            history: self.history.clone(),
            adam_m: records(&self.adam.m),
            adam_v: records(&self.adam.v),
            best: records(&self.best),
            current: records(&self.current),
        };
        Ok(crate::lm::write_json(path, &file)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file: StateFile = crate::lm::read_json(path)?;
        if file.format != STATE_FORMAT {
            return Err(TrainError::Resume(format!("unknown state format {:?}", file.format)));
        }
        Ok(TrainState {
            epochs_done: file.epochs_done,
            adam: AdamState { step: file.adam_step, m: tensors(&file.adam_m)?, v: tensors(&file.adam_v)? },
            best_score: file.best_score.unwrap_or(f64::NEG_INFINITY),
            best_epoch: file.best_epoch,
            since_improvement: file.since_improvement,
            history: file.history,
            best: tensors(&file.best)?,
            current: tensors(&file.current)?,
        })
    }
}
