use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::io_util::{atomic_write, fmt_sig9};
use crate::model::{HeadId, Model, ModelConfig};
use crate::tasks::TaskClass;

pub const CSV_HEADER: &str = "m,n,layer,head,mean_delta,n_pairs,seed";

/// `L x H` mean patching deltas for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMap {
    pub class: TaskClass,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Row-major `[layer][head]`.
    pub scores: Vec<f64>,
    pub n_pairs: usize,
    pub seed: u64,
    /// Standard error of each mean, when known.
    pub stderr: Option<Vec<f64>>,
    /// Mean clean-run probability of the clean answer.
    pub clean_prob: Option<f64>,
    /// Mean unpatched corrupted-run probability of the clean answer.
    pub corrupt_prob: Option<f64>,
}

impl InfluenceMap {
    pub fn score(&self, head: HeadId) -> f64 {
        self.scores[head.layer * self.n_heads + head.head]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_layers, self.n_heads)
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_layers).flat_map(move |l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for head in self.heads() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.class.m,
                self.class.n,
                head.layer,
                head.head,
                fmt_sig9(self.score(head)),
                self.n_pairs,
                self.seed
            ));
        }
        out
    }

    /// Parses the CSV form. Rows may come in any order but must cover the
    /// full grid exactly once.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |msg: String| LabError::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => return Err(err(format!("expected header `{CSV_HEADER}`, found {other:?}"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(err(format!("row {} has {} fields", i + 1, f.len())));
            }
            let int = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| err(format!("row {}: bad integer `{s}`", i + 1)))
            };
            let delta: f64 = f[4]
                .parse()
                .map_err(|_| err(format!("row {}: bad delta `{}`", i + 1, f[4])))?;
            rows.push((
                int(f[0])?,
                int(f[1])?,
                int(f[2])? as usize,
                int(f[3])? as usize,
                delta,
                int(f[5])?,
                int(f[6])?,
            ));
        }
        let first = rows.first().ok_or_else(|| err("no rows".into()))?;
        let (m, n, n_pairs, seed) = (first.0, first.1, first.5, first.6);
        let n_layers = rows.iter().map(|r| r.2).max().unwrap_or(0) + 1;
        let n_heads = rows.iter().map(|r| r.3).max().unwrap_or(0) + 1;
        if rows.len() != n_layers * n_heads {
            return Err(err(format!(
                "{} rows do not cover a {n_layers}x{n_heads} grid",
                rows.len()
            )));
        }
        let mut scores = vec![f64::NAN; n_layers * n_heads];
        for r in &rows {
            if (r.0, r.1, r.5, r.6) != (m, n, n_pairs, seed) {
                return Err(err("rows disagree on class, n_pairs or seed".into()));
            }
            if !r.4.is_finite() {
                return Err(err(format!("non-finite delta at head {}.{}", r.2, r.3)));
            }
            let slot = &mut scores[r.2 * n_heads + r.3];
            if !slot.is_nan() {
                return Err(err(format!("duplicate row for head {}.{}", r.2, r.3)));
            }
            *slot = r.4;
        }
        let class = TaskClass {
            m: m as u32,
            n: n as u32,
            k: crate::tasks::DEFAULT_SHOTS,
            max_digits: crate::tasks::DEFAULT_MAX_DIGITS.max(m.max(n) as u32),
        };
        Ok(Self {
            class,
            n_layers,
            n_heads,
            scores,
            n_pairs: n_pairs as usize,
            seed,
            stderr: None,
            clean_prob: None,
            corrupt_prob: None,
        })
    }
}

/// JSON written next to each map CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub class: TaskClass,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// FNV-1a digest of the parameter bits, hex encoded.
    pub weights_digest: String,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub stderr: Option<Vec<f64>>,
    #[serde(default)]
    pub clean_prob: Option<f64>,
    #[serde(default)]
    pub corrupt_prob: Option<f64>,
}

/// CSV and sidecar paths of the map for `(class, seed)` inside `dir`.
pub fn map_paths(dir: &Path, class: &TaskClass, seed: u64) -> (PathBuf, PathBuf) {
    let stem = format!("map_m{}_n{}_seed{}", class.m, class.n, seed);
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")))
}

/// FNV-1a over every parameter's bit pattern.
pub fn weights_digest(model: &Model) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in &model.params {
        for v in p.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

pub fn save_map(dir: &Path, map: &InfluenceMap, model: &Model, checkpoint: Option<String>) -> Result<PathBuf> {
    let (csv, json) = map_paths(dir, &map.class, map.seed);
    let side = MapSidecar {
        class: map.class,
        n_layers: map.n_layers,
        n_heads: map.n_heads,
        n_pairs: map.n_pairs,
        seed: map.seed,
        model: model.config.clone(),
        weights_digest: weights_digest(model),
        checkpoint,
        stderr: map.stderr.clone(),
        clean_prob: map.clean_prob,
        corrupt_prob: map.corrupt_prob,
    };
    let mut body = serde_json::to_vec_pretty(&side)?;
    body.push(b'\n');
    atomic_write(&json, &body)?;
    atomic_write(&csv, map.to_csv().as_bytes())?;
    Ok(csv)
}

/// Reads a map CSV, filling in the sidecar fields when the sidecar exists.
pub fn load_map(csv_path: &Path) -> Result<(InfluenceMap, Option<MapSidecar>)> {
    let text = std::fs::read_to_string(csv_path)?;
    let mut map = InfluenceMap::from_csv(&text, csv_path)?;
    let side_path = csv_path.with_extension("json");
    let side = if side_path.exists() {
        let side: MapSidecar = serde_json::from_slice(&std::fs::read(&side_path)?).map_err(|e| LabError::Parse {
            path: side_path.clone(),
            msg: e.to_string(),
        })?;
        map.class = side.class;
        map.stderr = side.stderr.clone();
        map.clean_prob = side.clean_prob;
        map.corrupt_prob = side.corrupt_prob;
        Some(side)
    } else {
        None
    };
    Ok((map, side))
}
