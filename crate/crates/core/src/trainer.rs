//! Trains the toy transformer on a weighted mix of addition classes, with
//! loss on answer tokens only.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::io_util::{atomic_write, fmt_sig9};
use crate::model::graph::{loss_and_grads, TokenBatch};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::seeds::{derive_seed, rng_from};
use crate::tasks::{digit_tokens, eval_accuracy, sample_prompt, tokenize, TaskClass, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumEntry {
    pub m: u32,
    pub n: u32,
    pub weight: f64,
}

/// Missing fields take their defaults; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub curriculum: Vec<CurriculumEntry>,
    pub shots: usize,
    pub max_digits: u32,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Floor of the cosine decay.
    pub min_lr: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Classes scored at each eval point, as `(m, n)`.
    pub eval_classes: Vec<(u32, u32)>,
    pub seed: u64,
}

/// Uniform weight over the nine classes with at most three digits per operand.
pub fn default_curriculum() -> Vec<CurriculumEntry> {
    (1..=3)
        .flat_map(|m| {
            (1..=3).map(move |n| CurriculumEntry {
                m,
                n,
                weight: 1.0 / 9.0,
            })
        })
        .collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            curriculum: default_curriculum(),
            shots: crate::tasks::DEFAULT_SHOTS,
            max_digits: crate::tasks::DEFAULT_MAX_DIGITS,
            batch_size: 64,
            steps: 20_000,
            warmup_steps: 500,
            peak_lr: 1e-3,
            min_lr: 1e-5,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            log_every: 50,
            eval_every: 1000,
            eval_samples: 200,
            eval_classes: vec![(1, 1), (2, 2), (3, 3)],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidTrainConfig(m));
        self.model.validate()?;
        if self.curriculum.is_empty() {
            return bad("curriculum is empty".into());
        }
        for e in &self.curriculum {
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return bad(format!(
                    "weight {} for class ({}, {}) must be positive",
                    e.weight, e.m, e.n
                ));
            }
            let class = TaskClass::with_shots(e.m, e.n, self.shots, self.max_digits)?;
            if class.max_prompt_tokens() > self.model.max_seq_len {
                return bad(format!(
                    "class {class} needs {} tokens but max_seq_len is {}",
                    class.max_prompt_tokens(),
                    self.model.max_seq_len
                ));
            }
        }
        for &(m, n) in &self.eval_classes {
            TaskClass::with_shots(m, n, self.shots, self.max_digits)?;
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!(
                "warmup {} must be below steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.peak_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return bad("need 0 <= min_lr <= peak_lr and peak_lr > 0".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> Result<Vec<TaskClass>> {
        self.curriculum
            .iter()
            .map(|e| TaskClass::with_shots(e.m, e.n, self.shots, self.max_digits))
            .collect()
    }

    /// Linear warmup to `peak_lr`, then cosine decay to `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// A padded training batch plus the answer span of each item.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumBatch {
    pub batch: TokenBatch,
    pub classes: Vec<TaskClass>,
    pub answer_spans: Vec<Range<usize>>,
}

/// Samples classes by weight and builds full prompts with answers, padded
/// with PAD to the longest item. The mask selects the positions that
/// predict answer tokens.
pub fn curriculum_batch<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Result<CurriculumBatch> {
    let classes = config.classes()?;
    let weights: Vec<f64> = config.curriculum.iter().map(|e| e.weight).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| LabError::InvalidTrainConfig(e.to_string()))?;
    let mut items = Vec::with_capacity(config.batch_size);
    let mut chosen = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let class = classes[pick.sample(rng)];
        let (_, query, text) = sample_prompt(&class, rng);
        let mut tokens = tokenize(&text)?;
        let start = tokens.len();
        tokens.extend(digit_tokens(query.sum));
        items.push((tokens, start));
        chosen.push(class);
    }
    let seq = items.iter().map(|(t, _)| t.len()).max().unwrap_or(1);
    let b = items.len();
    let mut tokens = vec![PAD; b * seq];
    let mut targets = vec![PAD; b * seq];
    let mut mask = vec![false; b * seq];
    let mut spans = Vec::with_capacity(b);
    for (i, (t, start)) in items.iter().enumerate() {
        let row = i * seq;
        tokens[row..row + t.len()].copy_from_slice(t);
        for p in 0..seq - 1 {
            targets[row + p] = tokens[row + p + 1];
        }
        for p in *start..t.len() {
            mask[row + p - 1] = true;
        }
        spans.push(*start..t.len());
    }
    Ok(CurriculumBatch {
        batch: TokenBatch {
            tokens,
            targets,
            mask,
            batch: b,
            seq,
        },
        classes: chosen,
        answer_spans: spans,
    })
}

/// One metrics-log row. Loss rows leave the class fields empty; eval rows
/// carry one class and its accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub class: Option<(u32, u32)>,
    pub accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,class_m,class_n,accuracy";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let (m, n) = r
            .class
            .map_or((String::new(), String::new()), |(m, n)| (m.to_string(), n.to_string()));
        let acc = r.accuracy.map(fmt_sig9).unwrap_or_default();
        out.push_str(&format!("{},{},{m},{n},{acc}\n", r.step, fmt_sig9(r.loss)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRow>,
    pub final_loss: f64,
    /// Best mean eval accuracy and the step it was reached at.
    pub best: Option<(usize, f64)>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

fn clip_gradients(grads: &mut [Option<Vec<f32>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads.iter().flatten().flatten().map(|&g| (g as f64) * (g as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= scale);
    }
}

fn evaluate(model: &Model, config: &TrainConfig, step: usize) -> Result<Vec<(TaskClass, f64)>> {
    config
        .eval_classes
        .iter()
        .map(|&(m, n)| {
            let class = TaskClass::with_shots(m, n, config.shots, config.max_digits)?;
            let seed = derive_seed(derive_seed(config.seed, 0xE7A1), step as u64);
            let acc = eval_accuracy(model, &class, config.eval_samples, &mut rng_from(seed))?;
            Ok((class, acc))
        })
        .collect()
}

/// Runs `config.steps` optimizer steps on `model`. With `out_dir`, writes
/// `metrics.csv`, `final.ckpt` and `best.ckpt` (best mean eval accuracy).
/// `progress` sees every metrics row as it is produced.
pub fn train(
    model: &mut Model,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&MetricRow)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.config != config.model {
        return Err(LabError::InvalidTrainConfig(
            "model config differs from the training config".into(),
        ));
    }
    model.metadata = Some(serde_json::json!({ "train_config": config }));
    let mut state = AdamState::new(&model.params, config.adam);
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_checkpoint = None;
    let mut last_loss = f64::NAN;
    let mut emit = |row: MetricRow, metrics: &mut Vec<MetricRow>| {
        if let Some(p) = progress.as_mut() {
            p(&row);
        }
        metrics.push(row);
    };
    for step in 0..config.steps {
        let batch_seed = derive_seed(config.seed, step as u64);
        let batch = curriculum_batch(config, &mut rng_from(batch_seed))?;
        let (loss, grads) = loss_and_grads(&model.config, &model.params, &batch.batch)?;
        if !loss.is_finite() {
            return Err(LabError::NonFiniteLoss { step, batch_seed });
        }
        let mut grads = grads.per_param;
        clip_gradients(&mut grads, config.grad_clip);
        adam_step(&mut model.params, &grads, &mut state, config.lr_at(step))?;
        last_loss = loss;
        let done = step + 1;
        if done % config.log_every.max(1) == 0 || done == config.steps || step == 0 {
            emit(
                MetricRow {
                    step: done,
                    loss,
                    class: None,
                    accuracy: None,
                },
                &mut metrics,
            );
        }
        let eval_now = config.eval_every > 0 && (done % config.eval_every == 0 || done == config.steps);
        if eval_now && !config.eval_classes.is_empty() {
            let scores = evaluate(model, config, done)?;
            for (class, acc) in &scores {
                emit(
                    MetricRow {
                        step: done,
                        loss,
                        class: Some((class.m, class.n)),
                        accuracy: Some(*acc),
                    },
                    &mut metrics,
                );
            }
            let mean = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
            if best.is_none_or(|(_, b)| mean > b) {
                best = Some((done, mean));
                if let Some(dir) = out_dir {
                    let p = dir.join("best.ckpt");
                    save_checkpoint(model, &p)?;
                    best_checkpoint = Some(p);
                }
            }
        }
    }
    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        let p = dir.join("final.ckpt");
        save_checkpoint(model, &p)?;
        final_checkpoint = Some(p);
        atomic_write(&dir.join("metrics.csv"), metrics_csv(&metrics).as_bytes())?;
    }
    Ok(TrainOutcome {
        metrics,
        final_loss: last_loss,
        best,
        final_checkpoint,
        best_checkpoint,
    })
}
