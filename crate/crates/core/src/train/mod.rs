//! Deterministic desk-scale training with periodic module-wise decay
//! reassignment.
//!
//! The loop runs `t = 0..=T`. Whenever `t % interval == 0` every scheduled
//! projection is analyzed and the decay plan is rebuilt; for `t < T` one
//! optimizer update follows. The recomputation at `t = T` records the final
//! spectra without driving any update, so a run of `T` steps logs `T` step
//! records and `⌊T/interval⌋ + 1` plans.

pub mod data;
pub mod model;
pub mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{scheduler_step, DecayPlan, ScheduleError, SchedulerConfig};
use crate::spectral::{analyze_all, ModuleError, SpectralReport};
use crate::tensor_io::{ModuleId, TensorError, WeightMatrix};

pub use data::{synthetic_corpus, Batch, Corpus};
pub use model::{build_model, forward_backward, loss, token_nll, ModelConfig, ParamSet};
pub use optim::{clip_global_norm, lr_at, optimizer_step, OptimizerKind, OptimizerState, StepStats};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("non-finite parameter after update of `{0}`")]
    NonFiniteUpdate(ModuleId),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String, partial: Box<RunLog> },
    #[error("empty held-out set")]
    EmptyHeldOut,
    #[error(transparent)]
    Spectral(#[from] ModuleError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn default_min_lr_ratio() -> f64 {
    0.1
}

fn default_eval_windows() -> usize {
    64
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub warmup_fraction: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub clip: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub scheduler: SchedulerConfig,
    /// Cosine floor as a fraction of the peak learning rate.
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    /// Held-out windows used for the final evaluation.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
    /// Workers for spectral analysis at recompute steps.
    #[serde(default = "default_threads")]
    pub analysis_threads: usize,
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 || self.batch == 0 || self.seq_len == 0 {
            return fail("steps, batch and seq_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} is outside [0, 1]", self.warmup_fraction));
        }
        if !(self.clip > 0.0) {
            return fail(format!("clip must be positive, got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail(format!("min_lr_ratio {} is outside [0, 1]", self.min_lr_ratio));
        }
        if self.seq_len > model.context {
            return fail(format!("seq_len {} exceeds context {}", self.seq_len, model.context));
        }
        self.scheduler.validate()?;
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        lr_at(t, self.steps, self.warmup_fraction, self.lr, self.min_lr_ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputeRecord {
    pub step: usize,
    pub plan: DecayPlan,
    pub reports: Vec<SpectralReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub recomputes: Vec<RecomputeRecord>,
    pub final_val_loss: Option<f64>,
    pub perplexity: Option<f64>,
}

/// One line of the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Recompute(RecomputeRecord),
    Final { val_loss: f64, perplexity: f64 },
}

impl RunLog {
    pub fn plans(&self) -> Vec<DecayPlan> {
        self.recomputes.iter().map(|r| r.plan.clone()).collect()
    }

    /// Step records, recompute records interleaved at their step, final line last.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |line: LogLine| {
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        };
        let mut recomputes = self.recomputes.iter().peekable();
        for s in &self.steps {
            while let Some(r) = recomputes.next_if(|r| r.step <= s.step) {
                push(LogLine::Recompute(r.clone()));
            }
            push(LogLine::Step(s.clone()));
        }
        for r in recomputes {
            push(LogLine::Recompute(r.clone()));
        }
        if let (Some(val_loss), Some(perplexity)) = (self.final_val_loss, self.perplexity) {
            push(LogLine::Final { val_loss, perplexity });
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<RunLog, serde_json::Error> {
        let mut log = RunLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Recompute(r) => log.recomputes.push(r),
                LogLine::Final { val_loss, perplexity } => {
                    log.final_val_loss = Some(val_loss);
                    log.perplexity = Some(perplexity);
                }
            }
        }
        Ok(log)
    }
}

/// Mean token cross-entropy over the held-out batches and its exponential.
pub fn evaluate(cfg: &ModelConfig, params: &ParamSet, held_out: &[Batch]) -> Result<(f64, f64), TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in held_out {
        let nll = token_nll(cfg, params, batch)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    if count == 0 {
        return Err(TrainError::EmptyHeldOut);
    }
    let ce = total / count as f64;
    Ok((ce, ce.exp()))
}

fn analyze_projections(
    cfg: &TrainConfig,
    params: &ParamSet,
    grads: Option<&ParamSet>,
    modules: &[ModuleId],
) -> Result<BTreeMap<ModuleId, SpectralReport>, TrainError> {
    let weights: Vec<WeightMatrix> = modules
        .iter()
        .map(|id| params.to_weight_matrix(id).expect("model id"))
        .collect::<Result<_, _>>()?;
    let grad_mats: Option<Vec<WeightMatrix>> = grads
        .map(|g| modules.iter().map(|id| g.to_weight_matrix(id).expect("model id")).collect::<Result<_, _>>())
        .transpose()?;
    let items: Vec<(&WeightMatrix, Option<&WeightMatrix>)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (w, grad_mats.as_ref().map(|g| &g[i])))
        .collect();
    let fit = &cfg.scheduler;
    let reports = analyze_all(&items, fit.fit, &fit.fit_config, cfg.analysis_threads)?;
    Ok(reports.into_iter().map(|r| (r.module.clone(), r)).collect())
}

/// Output of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub params: ParamSet,
}

/// Trains from scratch. Bit-reproducible for a fixed configuration.
pub fn train_run(model_cfg: &ModelConfig, cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    let held_out = corpus.validation_batches(cfg.batch, cfg.seq_len, cfg.eval_windows)?;
    let mut params = build_model(model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let sched = &cfg.scheduler;
    let scheduled: Vec<ModuleId> = params.ids().iter().filter(|id| sched.is_scheduled(id.kind)).cloned().collect();
    let mut plan = DecayPlan::uniform(0, sched.eta, scheduled.iter());
    let mut last_grads: Option<ParamSet> = None;
    let mut log = RunLog::default();

    for t in 0..=cfg.steps {
        if sched.is_recompute_step(t) {
            let reports = analyze_projections(cfg, &params, last_grads.as_ref(), &scheduled)?;
            plan = scheduler_step(t, sched, &scheduled, &reports, &plan)?;
            log.recomputes.push(RecomputeRecord { step: t, plan: plan.clone(), reports: reports.into_values().collect() });
        }
        if t == cfg.steps {
            break;
        }
        let batch = corpus.sample_batch(cfg.batch, cfg.seq_len, cfg.seed, t)?;
        let (loss, mut grads) = match forward_backward(model_cfg, &params, &batch) {
            Ok(out) => out,
            Err(TrainError::NonFiniteLoss(l)) => {
                return Err(TrainError::Diverged { step: t, reason: format!("loss is {l}"), partial: Box::new(log) })
            }
            Err(e) => return Err(e),
        };
        let raw_grads = grads.clone();
        let lr = cfg.lr_at(t);
        let stats = match optimizer_step(&mut params, &mut grads, &mut state, lr, &plan, cfg.optimizer, cfg.clip) {
            Ok(stats) => stats,
            Err(TrainError::NonFiniteUpdate(id)) => {
                return Err(TrainError::Diverged {
                    step: t,
                    reason: format!("non-finite update of `{id}`"),
                    partial: Box::new(log),
                })
            }
            Err(e) => return Err(e),
        };
        log.steps.push(StepRecord { step: t, loss, lr, grad_norm: stats.grad_norm });
        last_grads = Some(raw_grads);
    }

    let (val_loss, ppl) = evaluate(model_cfg, &params, &held_out)?;
    log.final_val_loss = Some(val_loss);
    log.perplexity = Some(ppl);
    Ok(TrainOutcome { log, params })
}

/// Where the training bytes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// A file on disk, split at `split_offset` bytes.
    File { path: String, split_offset: usize },
    /// Built-in generator; the trailing `holdout_fraction` is held out.
    Synthetic { bytes: usize, seed: u64, holdout_fraction: f64 },
}

impl CorpusSource {
    pub fn load(&self, base_dir: &std::path::Path) -> Result<Corpus, TrainError> {
        match self {
            CorpusSource::File { path, split_offset } => {
                let path = base_dir.join(path);
                let bytes = std::fs::read(&path)
                    .map_err(|e| TrainError::Corpus(format!("reading {}: {e}", path.display())))?;
                Corpus::split(&bytes, *split_offset)
            }
            CorpusSource::Synthetic { bytes, seed, holdout_fraction } => {
                Corpus::split_fraction(&synthetic_corpus(*bytes, *seed), *holdout_fraction)
            }
        }
    }
}

/// The single JSON document accepted by `htsr train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSource,
}
