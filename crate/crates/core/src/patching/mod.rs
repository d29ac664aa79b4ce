//! Denoising activation patching: run the corrupted prompt, splice in one
//! head's clean output, and measure how much probability of the clean answer
//! comes back.

mod map;

use std::ops::Range;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::model::{HeadId, Model, PatchSet};
use crate::numerics::Tensor;
use crate::seeds::{derive_seed, rng_from};
use crate::tasks::{build_prompt_pair, PromptPair, TaskClass};

pub use map::{load_map, map_paths, save_map, weights_digest, InfluenceMap, MapSidecar, CSV_HEADER};

fn target_prob(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    (row[target] as f64 - max).exp() / z
}

/// Mean softmax probability of `targets`, where target `i` is predicted by
/// the logits at position `answer_span.start + i - 1`.
pub fn answer_probability(logits: &Tensor, answer_span: Range<usize>, targets: &[usize]) -> Result<f64> {
    if answer_span.len() != targets.len() || answer_span.start == 0 || answer_span.end > logits.rows() + 1 {
        return Err(LabError::SpanMismatch {
            span: answer_span.len(),
            targets: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(LabError::SpanMismatch { span: 0, targets: 0 });
    }
    let total: f64 = answer_span
        .zip(targets)
        .map(|(pos, &t)| target_prob(logits.row(pos - 1), t))
        .sum();
    Ok(total / targets.len() as f64)
}

/// Same estimator over already selected logit rows, `[targets.len(), vocab]`.
fn rows_probability(rows: &[f32], vocab: usize, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| target_prob(&rows[i * vocab..(i + 1) * vocab], t))
        .sum();
    total / targets.len() as f64
}

/// Recovered probability of the clean answer when `head` carries its clean
/// output (all positions) inside the corrupted run.
pub fn head_influence(model: &Model, pair: &PromptPair, head: HeadId) -> Result<f64> {
    head.check(&model.config)?;
    let (_, clean_cache) = model.forward(&pair.clean_tokens)?;
    let (corrupt_logits, _) = model.forward(&pair.corrupted_tokens)?;
    let patches = PatchSet::whole_heads([head], pair.corrupted_tokens.len());
    let patched = model.forward_with_patches(&pair.corrupted_tokens, &clean_cache, &patches)?;
    let span = pair.answer_span.clone();
    Ok(answer_probability(&patched, span.clone(), &pair.y_clean)?
        - answer_probability(&corrupt_logits, span, &pair.y_clean)?)
}

/// Per-pair result of patching every head.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDeltas {
    /// `L * H` deltas in (layer, head) order.
    pub deltas: Vec<f64>,
    pub clean_prob: f64,
    pub corrupt_prob: f64,
}

/// Deltas for every head of one pair. The corrupted run is traced once and
/// each layer's heads are patched in one batched resume from that layer.
pub fn pair_deltas(model: &Model, pair: &PromptPair) -> Result<PairDeltas> {
    let (clean_logits, clean_cache) = model.forward(&pair.clean_tokens)?;
    let trace = model.trace(&pair.corrupted_tokens)?;
    if clean_cache.seq_len() != trace.cache.seq_len() {
        return Err(LabError::DonorLength {
            donor: clean_cache.seq_len(),
            tokens: trace.cache.seq_len(),
        });
    }
    let span = pair.answer_span.clone();
    let clean_prob = answer_probability(&clean_logits, span.clone(), &pair.y_clean)?;
    let corrupt_prob = answer_probability(&trace.logits, span, &pair.y_clean)?;
    let rows = pair.prediction_rows();
    let vocab = model.config.vocab_size;
    let heads: Vec<usize> = (0..model.config.n_heads).collect();
    let mut deltas = Vec::with_capacity(model.config.n_layers * heads.len());
    for layer in 0..model.config.n_layers {
        for logits in model.patched_head_logits(&trace, &clean_cache, layer, &heads, &rows) {
            deltas.push(rows_probability(&logits, vocab, &pair.y_clean) - corrupt_prob);
        }
    }
    Ok(PairDeltas {
        deltas,
        clean_prob,
        corrupt_prob,
    })
}

/// Seed of the generator behind pair `index` of `class` under `seed`.
pub fn pair_seed(class: &TaskClass, seed: u64, index: usize) -> u64 {
    let class_seed = derive_seed(seed, ((class.m as u64) << 32) | class.n as u64);
    derive_seed(class_seed, index as u64)
}

/// The `n_pairs` prompt pairs an influence map of `class` under `seed` uses.
pub fn patch_pairs(class: &TaskClass, n_pairs: usize, seed: u64) -> Result<Vec<PromptPair>> {
    (0..n_pairs)
        .map(|i| {
            let s = pair_seed(class, seed, i);
            let mut pair = build_prompt_pair(class, &mut rng_from(s))?;
            pair.seed = Some(s);
            Ok(pair)
        })
        .collect()
}

/// Mean per-head delta over `n_pairs` generated pairs, reduced in pair order.
pub fn influence_map(model: &Model, class: &TaskClass, n_pairs: usize, seed: u64) -> Result<InfluenceMap> {
    influence_map_from_pairs(model, class, &patch_pairs(class, n_pairs, seed)?, seed)
}

pub fn influence_map_from_pairs(
    model: &Model,
    class: &TaskClass,
    pairs: &[PromptPair],
    seed: u64,
) -> Result<InfluenceMap> {
    if pairs.is_empty() {
        return Err(LabError::Analysis("influence map needs at least one pair".into()));
    }
    let (l, h) = (model.config.n_layers, model.config.n_heads);
    let mut sum = vec![0.0f64; l * h];
    let mut sum_sq = vec![0.0f64; l * h];
    let (mut clean, mut corrupt) = (0.0, 0.0);
    for pair in pairs {
        let d = pair_deltas(model, pair)?;
        for (i, v) in d.deltas.iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
        clean += d.clean_prob;
        corrupt += d.corrupt_prob;
    }
    let n = pairs.len() as f64;
    let scores: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr = scores
        .iter()
        .zip(&sum_sq)
        .map(|(mean, sq)| {
            if pairs.len() < 2 {
                return 0.0;
            }
            let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LabError::NonFinite(format!("influence map for class {class}")));
    }
    Ok(InfluenceMap {
        class: *class,
        n_layers: l,
        n_heads: h,
        scores,
        n_pairs: pairs.len(),
        seed,
        stderr: Some(stderr),
        clean_prob: Some(clean / n),
        corrupt_prob: Some(corrupt / n),
    })
}

/// Loads the persisted map for `(class, seed)` from `dir` when its sidecar
/// matches the request, otherwise computes and persists it. Returns the map
/// and whether it was computed.
pub fn influence_map_resumable(
    model: &Model,
    class: &TaskClass,
    n_pairs: usize,
    seed: u64,
    dir: &Path,
    checkpoint: Option<String>,
) -> Result<(InfluenceMap, bool)> {
    let (csv, json) = map_paths(dir, class, seed);
    if csv.exists() && json.exists() {
        if let Ok((map, Some(side))) = load_map(&csv) {
            if side.n_pairs == n_pairs
                && side.seed == seed
                && side.model == model.config
                && side.weights_digest == weights_digest(model)
                && side.class == *class
            {
                return Ok((map, false));
            }
        }
    }
    let map = influence_map(model, class, n_pairs, seed)?;
    save_map(dir, &map, model, checkpoint)?;
    Ok((map, true))
}
