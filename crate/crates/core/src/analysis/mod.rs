//! Comparisons between influence maps: correlation, dissimilarity,
//! stability verdicts, top-quantile circuits, partition heatmaps and 2-D
//! embeddings.

mod mds;
mod tsne;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::HeadId;
use crate::patching::InfluenceMap;
use crate::tasks::{Partition, TaskClass};

pub use mds::mds_embed;
pub use tsne::{perplexity_calibration, tsne_embed, Calibration, TsneConfig};

pub const DEFAULT_EPSILON: f64 = 0.5;
pub const CIRCUIT_QUANTILE: f64 = 0.10;
pub const HEATMAP_QUANTILE: f64 = 0.05;

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LabError::Analysis(format!(
            "pearson needs two equal-length inputs of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 || !(saa.is_finite() && sbb.is_finite()) {
        return Err(LabError::ZeroVariance);
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn check_shapes(a: &InfluenceMap, b: &InfluenceMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LabError::Analysis(format!(
            "map {} is {:?} but map {} is {:?}",
            a.class,
            a.shape(),
            b.class,
            b.shape()
        )));
    }
    Ok(())
}

/// `1 - pearson` of the flattened maps, in `[0, 2]`.
pub fn dissimilarity(a: &InfluenceMap, b: &InfluenceMap) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(1.0 - pearson(&a.scores, &b.scores)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrices {
    pub tasks: Vec<TaskClass>,
    pub similarity: Vec<Vec<f64>>,
    pub dissimilarity: Vec<Vec<f64>>,
}

/// Pearson and `1 - pearson` matrices over every pair of maps.
pub fn pairwise_matrix(maps: &[InfluenceMap]) -> Result<PairwiseMatrices> {
    if maps.len() < 2 {
        return Err(LabError::Analysis(format!("need at least 2 maps, got {}", maps.len())));
    }
    let offenders: Vec<String> = maps
        .iter()
        .filter(|m| m.shape() != maps[0].shape())
        .map(|m| format!("{} {:?}", m.class, m.shape()))
        .collect();
    if !offenders.is_empty() {
        return Err(LabError::Analysis(format!(
            "maps differ in shape from {:?}: {}",
            maps[0].shape(),
            offenders.join(", ")
        )));
    }
    let n = maps.len();
    let mut sim = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = pearson(&maps[i].scores, &maps[j].scores).map_err(|e| match e {
                LabError::ZeroVariance => LabError::Analysis(format!(
                    "zero-variance map among {} and {}",
                    maps[i].class, maps[j].class
                )),
                other => other,
            })?;
            sim[i][j] = r;
            sim[j][i] = r;
        }
    }
    let dis = sim
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, r)| if i == j { 0.0 } else { 1.0 - r })
                .collect()
        })
        .collect();
    Ok(PairwiseMatrices {
        tasks: maps.iter().map(|m| m.class).collect(),
        similarity: sim,
        dissimilarity: dis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub a: TaskClass,
    pub b: TaskClass,
    pub dissimilarity: f64,
}

/// Order statistics of the off-diagonal dissimilarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub tasks: Vec<TaskClass>,
    pub dissimilarity: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<Vec<Vec<f64>>>,
    pub epsilon: f64,
    pub stable: bool,
    pub max_dissimilarity: f64,
    pub spectrum: Spectrum,
    pub transitions: Vec<Transition>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Stable iff every pair's dissimilarity is at most `epsilon`. An unstable
/// verdict lists every pair at or above `epsilon` as a transition.
pub fn check_stability(tasks: &[TaskClass], dissimilarity: &[Vec<f64>], epsilon: f64) -> Result<StabilityReport> {
    let n = tasks.len();
    if !(epsilon > 0.0) {
        return Err(LabError::Analysis(format!("epsilon must be positive, got {epsilon}")));
    }
    if n < 2 || dissimilarity.len() != n || dissimilarity.iter().any(|r| r.len() != n) {
        return Err(LabError::Analysis(format!(
            "dissimilarity matrix must be {n}x{n} with n >= 2"
        )));
    }
    let mut off = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        if dissimilarity[i][i] != 0.0 {
            return Err(LabError::Analysis(format!("nonzero diagonal at {}", tasks[i])));
        }
        for j in i + 1..n {
            let (a, b) = (dissimilarity[i][j], dissimilarity[j][i]);
            if !a.is_finite() || (a - b).abs() > 1e-9 {
                return Err(LabError::Analysis(format!("matrix not symmetric at ({i}, {j})")));
            }
            off.push((i, j, a));
        }
    }
    let mut sorted: Vec<f64> = off.iter().map(|t| t.2).collect();
    sorted.sort_by(f64::total_cmp);
    let max = *sorted.last().expect("at least one pair");
    let stable = max <= epsilon;
    let transitions = if stable {
        Vec::new()
    } else {
        off.iter()
            .filter(|t| t.2 >= epsilon)
            .map(|&(i, j, d)| Transition {
                a: tasks[i],
                b: tasks[j],
                dissimilarity: d,
            })
            .collect()
    };
    Ok(StabilityReport {
        tasks: tasks.to_vec(),
        dissimilarity: dissimilarity.to_vec(),
        similarity: None,
        epsilon,
        stable,
        max_dissimilarity: max,
        spectrum: Spectrum {
            min: sorted[0],
            p25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            p75: quantile(&sorted, 0.75),
            p90: quantile(&sorted, 0.90),
            p95: quantile(&sorted, 0.95),
            max,
        },
        transitions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub class: TaskClass,
    pub q: f64,
    /// Heads in descending score order.
    pub heads: Vec<HeadId>,
    pub scores: Vec<f64>,
}

impl Circuit {
    pub fn contains(&self, head: HeadId) -> bool {
        self.heads.contains(&head)
    }
}

/// `ceil(q * total)`, robust to the rounding in `q * total`.
pub fn quantile_count(q: f64, total: usize) -> usize {
    let exact = q * total as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() <= 1e-9 * total as f64 {
        rounded
    } else {
        exact.ceil()
    };
    (k as usize).clamp(1, total)
}

/// The `ceil(q * L * H)` highest-scoring heads; ties go to the
/// lexicographically smaller `(layer, head)`.
pub fn top_quantile_circuit(map: &InfluenceMap, q: f64) -> Result<Circuit> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(LabError::Analysis(format!("quantile must lie in (0, 1], got {q}")));
    }
    let mut order: Vec<HeadId> = map.heads().collect();
    order.sort_by(|a, b| map.score(*b).total_cmp(&map.score(*a)).then(a.cmp(b)));
    order.truncate(quantile_count(q, map.scores.len()));
    Ok(Circuit {
        class: map.class,
        q,
        scores: order.iter().map(|h| map.score(*h)).collect(),
        heads: order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_maps: usize,
    /// Row-major `[layer][head]` fraction of maps whose circuit holds the head.
    pub frequency: Vec<f64>,
}

impl Heatmap {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.frequency.chunks(self.n_heads).map(<[f64]>::to_vec).collect()
    }
}

/// Fraction of `maps` whose top-`q` circuit contains each head.
pub fn head_frequency_heatmap(maps: &[InfluenceMap], q: f64) -> Result<Heatmap> {
    let first = maps
        .first()
        .ok_or_else(|| LabError::Analysis("frequency heatmap needs at least one map".into()))?;
    let (l, h) = first.shape();
    let mut counts = vec![0usize; l * h];
    for map in maps {
        check_shapes(first, map)?;
        for head in top_quantile_circuit(map, q)?.heads {
            counts[head.layer * h + head.head] += 1;
        }
    }
    Ok(Heatmap {
        n_layers: l,
        n_heads: h,
        n_maps: maps.len(),
        frequency: counts.iter().map(|&c| c as f64 / maps.len() as f64).collect(),
    })
}

/// One heatmap per partition present among `maps`, boundary split by
/// orientation.
pub fn partition_heatmaps(maps: &[InfluenceMap], q: f64) -> Result<BTreeMap<Partition, Heatmap>> {
    let mut groups: BTreeMap<Partition, Vec<InfluenceMap>> = BTreeMap::new();
    for m in maps {
        groups.entry(m.class.partition()).or_default().push(m.clone());
    }
    groups
        .into_iter()
        .map(|(p, ms)| Ok((p, head_frequency_heatmap(&ms, q)?)))
        .collect()
}

/// 2-D coordinates, one per input map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub method: String,
    pub coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Final KL divergence (t-SNE).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    /// KL divergence right after early exaggeration ends (t-SNE).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_after_exaggeration: Option<f64>,
    /// Frobenius norm of the part of the centered Gram matrix the two
    /// retained components leave out (MDS).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
}

/// Flattened raw scores, one row per map.
pub fn map_features(maps: &[InfluenceMap]) -> Vec<Vec<f64>> {
    maps.iter().map(|m| m.scores.clone()).collect()
}

pub(crate) fn sq_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    d
}
