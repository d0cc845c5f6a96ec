//! Two-stage optimization: sentence-level pre-training, then document-level
//! fine-tuning with checkpoint averaging.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{plan_batches, BatchPlan, Document, Vocab};
use crate::error::{Error, Result};
use crate::model::{eval_loss, loss_and_grads, ModelConfig, ModelParams, RunOptions, Variant};
use crate::rng::{KeyedRng, Purpose};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Tensor};

/// Inverse square-root schedule with linear warmup, peaking at `peak_lr`
/// when `step == warmup`. The usual `e^-0.5` factor cancels in this
/// normalization.
pub fn lr_schedule(step: u64, warmup: u64, peak_lr: f64) -> Result<f64> {
    if warmup < 1 {
        return Err(Error::Config("warmup must be at least 1".into()));
    }
    if step < 1 {
        return Err(Error::invalid("schedule steps start at 1"));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak_lr * (s / w).min((w / s).sqrt()))
}

/// True once the last `patience` evaluations brought no improvement over
/// the best loss seen before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some(best) = history
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, b)) if v >= b => acc,
            _ => Some((i, v)),
        })
    else {
        return false;
    };
    history.len() - 1 - best.0 >= patience.max(1)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}

/// Element-wise mean of parameter sets with identical names and shapes.
pub fn average_checkpoints<T: Scalar>(sets: &[ModelParams<T>]) -> Result<ModelParams<T>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("no checkpoints to average"))?;
    let k = sets.len() as f64;
    let mut tensors = BTreeMap::new();
    for (name, t) in &first.tensors {
        let mut acc = vec![0.0f64; t.numel()];
        for s in sets {
            let other = s.get(name)?;
            if other.shape() != t.shape() {
                return Err(Error::shape(
                    "average_checkpoints",
                    t.shape(),
                    other.shape(),
                ));
            }
            for (a, x) in acc.iter_mut().zip(other.data()) {
                *a += x.as_f64();
            }
        }
        tensors.insert(
            name.clone(),
            Tensor::new(t.shape(), acc.into_iter().map(|a| T::lit(a / k)).collect())?,
        );
    }
    if sets.iter().any(|s| s.tensors.len() != first.tensors.len()) {
        return Err(Error::Checkpoint(
            "checkpoints hold different tensor sets".into(),
        ));
    }
    Ok(ModelParams { tensors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub max_updates: u64,
    /// Batches per parameter update.
    pub accumulation: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Optional token cap closing batches early.
    pub token_cap: Option<usize>,
    pub valid_every: u64,
    pub patience: usize,
    pub clip_norm: f64,
    pub word_dropout: f64,
    pub keep_checkpoints: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            warmup: 4000,
            max_updates: 100_000,
            accumulation: 8,
            batch_size: 16,
            token_cap: Some(4096),
            valid_every: 50,
            patience: 5,
            clip_norm: 1.0,
            word_dropout: 0.0,
            keep_checkpoints: 5,
            seed: 1,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            peak_lr: 2e-4,
            word_dropout: 0.1,
            ..TrainConfig::stage1()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "peak_lr" => self.peak_lr = p(key, value)?,
            "warmup" => self.warmup = p(key, value)?,
            "max_updates" => self.max_updates = p(key, value)?,
            "accumulation" => self.accumulation = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "token_cap" => {
                self.token_cap = match value {
                    "none" | "0" => None,
                    v => Some(p(key, v)?),
                }
            }
            "valid_every" => self.valid_every = p(key, value)?,
            "patience" => self.patience = p(key, value)?,
            "clip_norm" => self.clip_norm = p(key, value)?,
            "word_dropout" => self.word_dropout = p(key, value)?,
            "keep_checkpoints" => self.keep_checkpoints = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let cap = self.token_cap.map_or("none".to_string(), |c| c.to_string());
        format!(
            "peak_lr = {}\nwarmup = {}\nmax_updates = {}\naccumulation = {}\nbatch_size = {}\ntoken_cap = {cap}\n\
             valid_every = {}\npatience = {}\nclip_norm = {}\nword_dropout = {}\nkeep_checkpoints = {}\nseed = {}\n",
            self.peak_lr,
            self.warmup,
            self.max_updates,
            self.accumulation,
            self.batch_size,
            self.valid_every,
            self.patience,
            self.clip_norm,
            self.word_dropout,
            self.keep_checkpoints,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 || self.accumulation < 1 || self.batch_size < 1 || self.valid_every < 1 {
            return Err(Error::Config(
                "warmup, accumulation, batch_size and valid_every must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!(
                "word_dropout {} outside [0, 1)",
                self.word_dropout
            )));
        }
        if self.keep_checkpoints < 1 {
            return Err(Error::Config("keep_checkpoints must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub lr: f64,
    pub ups: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step\ttrain_loss\tvalid_loss\tlr\tups";

    pub fn to_tsv(&self) -> String {
        let v = self
            .valid_loss
            .map_or("nan".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6}\t{v}\t{:.3e}\t{:.3}",
            self.step, self.train_loss, self.lr, self.ups
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Mean of the retained checkpoints.
    pub averaged: ModelParams<T>,
    /// Parameters with the lowest validation loss.
    pub best: ModelParams<T>,
    pub best_valid: f64,
    /// Most recent checkpoints, oldest first.
    pub checkpoints: Vec<(u64, ModelParams<T>)>,
    pub log: Vec<LogRow>,
    pub updates: u64,
    pub early_stopped: bool,
    /// Update at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<u64>,
}

/// Mean evaluation loss over `plans`.
pub fn validation_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plans: &[BatchPlan],
) -> Result<f64> {
    if plans.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut total = 0.0;
    for p in plans {
        total += eval_loss(cfg, params, p)?;
    }
    Ok(total / plans.len() as f64)
}

/// Optimizes `params` on `train` batches taken in order, cycling epochs.
/// Validation every `valid_every` updates drives checkpointing and early
/// stopping. Checkpoints are also written to `out_dir` when given.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    mut params: ModelParams<T>,
    train: &[BatchPlan],
    valid: &[BatchPlan],
    tcfg: &TrainConfig,
    vocab: &Vocab,
    out_dir: Option<&Path>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    tcfg.validate()?;
    params.check_against(cfg)?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(w) = log_sink.as_deref_mut() {
        writeln!(w, "{}", LogRow::HEADER)?;
    }
    let keyed = KeyedRng::new(tcfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut checkpoints: Vec<(u64, ModelParams<T>)> = Vec::new();
    let mut best = (f64::INFINITY, params.clone());
    let mut batch_counter = 0u64;
    let mut window_loss = (0.0, 0usize);
    let mut window_start = Instant::now();
    let mut window_updates = 0u64;
    let mut early_stopped = false;
    let mut diverged_at = None;
    let mut update = 0u64;

    while update < tcfg.max_updates {
        update += 1;
        let mut acc: Option<BTreeMap<String, Tensor<T>>> = None;
        let mut step_loss = 0.0;
        let mut finite = true;
        for _ in 0..tcfg.accumulation {
            let plan = &train[(batch_counter as usize) % train.len()];
            let plan = if tcfg.word_dropout > 0.0 {
                let mut r = keyed.stream(Purpose::WordDropout, batch_counter);
                plan.with_word_dropout(tcfg.word_dropout, vocab, &mut r)
            } else {
                plan.clone()
            };
            let mut run = RunOptions::train(keyed.stream(Purpose::Dropout, batch_counter));
            batch_counter += 1;
            let (l, g) = match loss_and_grads(cfg, &params, &plan, &mut run) {
                Ok(x) => x,
                Err(e) if e.is_numeric() => {
                    finite = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !l.is_finite() || g.values().any(|t| !t.all_finite()) {
                finite = false;
                break;
            }
            step_loss += l / tcfg.accumulation as f64;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (k, t) in g {
                        let dst = a.get_mut(&k).expect("same parameter set");
                        for (x, y) in dst.data_mut().iter_mut().zip(t.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        if !finite {
            diverged_at = Some(update);
            break;
        }
        let mut grads = acc.expect("accumulation >= 1");
        if tcfg.accumulation > 1 {
            let c = T::lit(1.0 / tcfg.accumulation as f64);
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= c;
                }
            }
        }
        clip_grad_norm(&mut grads, tcfg.clip_norm);
        let lr = lr_schedule(update, tcfg.warmup, tcfg.peak_lr)?;
        if let Err(e) = adam.step(&mut params.tensors, &grads, lr) {
            if e.is_numeric() {
                diverged_at = Some(update);
                break;
            }
            return Err(e);
        }
        window_loss.0 += step_loss;
        window_loss.1 += 1;
        window_updates += 1;

        if update.is_multiple_of(tcfg.valid_every) || update == tcfg.max_updates {
            let v = if valid.is_empty() {
                None
            } else {
                Some(validation_loss(cfg, &params, valid)?)
            };
            let elapsed = window_start.elapsed().as_secs_f64().max(1e-9);
            let row = LogRow {
                step: update,
                train_loss: window_loss.0 / window_loss.1.max(1) as f64,
                valid_loss: v,
                lr,
                ups: window_updates as f64 / elapsed,
            };
            if let Some(w) = log_sink.as_deref_mut() {
                writeln!(w, "{}", row.to_tsv())?;
            }
            log.push(row);
            window_loss = (0.0, 0);
            window_updates = 0;
            window_start = Instant::now();

            if let Some(dir) = out_dir {
                params.save(cfg, dir.join(format!("checkpoint_{update}.dflt")))?;
            }
            checkpoints.push((update, params.clone()));
            if checkpoints.len() > tcfg.keep_checkpoints {
                checkpoints.remove(0);
            }
            if let Some(v) = v {
                if v < best.0 {
                    best = (v, params.clone());
                }
                history.push(v);
                if early_stop(&history, tcfg.patience) {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    if checkpoints.is_empty() {
        checkpoints.push((update, params.clone()));
    }
    if best.0.is_infinite() {
        best.1 = checkpoints.last().expect("non-empty").1.clone();
    }
    let sets: Vec<ModelParams<T>> = checkpoints.iter().map(|c| c.1.clone()).collect();
    let averaged = average_checkpoints(&sets)?;
    Ok(TrainOutcome {
        averaged,
        best: best.1,
        best_valid: best.0,
        checkpoints,
        log,
        updates: update,
        early_stopped,
        diverged_at,
    })
}

/// Batches of a corpus at the context size of `cfg`.
pub fn make_plans(
    docs: &[Document],
    vocab: &Vocab,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<BatchPlan>> {
    plan_batches(docs, vocab, cfg.c_minus, tcfg.batch_size, tcfg.token_cap)
}

/// Sentence-level pre-training from fresh parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1<T: Scalar>(
    train_docs: &[Document],
    valid_docs: &[Document],
    vocab: &Vocab,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    if cfg.variant != Variant::Sent2Sent {
        return Err(Error::Config(format!(
            "stage 1 trains sent2sent, not {}",
            cfg.variant
        )));
    }
    let params = ModelParams::init(cfg, tcfg.seed)?;
    let tp = make_plans(train_docs, vocab, cfg, tcfg)?;
    let vp = make_plans(valid_docs, vocab, cfg, tcfg)?;
    train(cfg, params, &tp, &vp, tcfg, vocab, out_dir, log_sink)
}

/// Document-level fine-tuning from a stage-1 model. Batch-context blocks
/// absent from `stage1` are freshly initialized; every other tensor must be
/// present.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2<T: Scalar>(
    stage1: &ModelParams<T>,
    train_docs: &[Document],
    valid_docs: &[Document],
    vocab: &Vocab,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    let params = ModelParams::from_stage1(stage1, cfg, tcfg.seed)?;
    let tp = make_plans(train_docs, vocab, cfg, tcfg)?;
    let vp = make_plans(valid_docs, vocab, cfg, tcfg)?;
    train(cfg, params, &tp, &vp, tcfg, vocab, out_dir, log_sink)
}
