//! Exact t-SNE.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sq_distances, Embedding2D};
use crate::error::{LabError, Result};
use crate::seeds::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// `None` picks `max(N / exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 3.0,
            iterations: 1000,
            seed: 0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: None,
        }
    }
}

/// Per-point conditional affinities `p_{j|i}` and the entropy (bits) each
/// bandwidth search reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub conditional: Vec<Vec<f64>>,
    pub entropy_bits: Vec<f64>,
    pub beta: Vec<f64>,
}

const ENTROPY_TOL: f64 = 1e-6;

fn row_affinities(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (&dj, o)) in d.iter().zip(out.iter_mut()).enumerate() {
        *o = if j == i { 0.0 } else { (-(dj - min) * beta).exp() };
        z += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= z;
        if *o > 0.0 {
            h -= *o * o.log2();
        }
    }
    h
}

/// Binary search per point for the Gaussian precision whose conditional
/// distribution has entropy `log2(perplexity)`.
pub fn perplexity_calibration(x: &[Vec<f64>], perplexity: f64) -> Result<Calibration> {
    let n = x.len();
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(LabError::PerplexityTooLarge { perplexity, n });
    }
    let target = perplexity.log2();
    let d = sq_distances(x);
    let mut conditional = vec![vec![0.0; n]; n];
    let mut entropy = vec![0.0; n];
    let mut betas = vec![0.0; n];
    for i in 0..n {
        let row = &d[i];
        let scale = {
            let mut v: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &x)| x)
                .collect();
            v.sort_by(f64::total_cmp);
            let med = v[v.len() / 2];
            if med > 0.0 {
                med
            } else {
                1.0
            }
        };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0 / scale;
        let mut h = row_affinities(row, i, beta, &mut conditional[i]);
        for _ in 0..500 {
            if (h - target).abs() <= ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (lo + hi) / 2.0;
            }
            h = row_affinities(row, i, beta, &mut conditional[i]);
        }
        entropy[i] = h;
        betas[i] = beta;
    }
    Ok(Calibration {
        conditional,
        entropy_bits: entropy,
        beta: betas,
    })
}

fn kl_and_grad(p: &[f64], y: &[[f64; 2]], exaggeration: f64, grad: &mut [[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    let mut kl = 0.0;
    for g in grad.iter_mut() {
        *g = [0.0, 0.0];
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = (num[i * n + j] / z).max(1e-300);
            let pij = p[i * n + j];
            if pij > 0.0 {
                kl += pij * (pij / q).ln();
            }
            let mult = 4.0 * (exaggeration * pij - q) * num[i * n + j];
            grad[i][0] += mult * (y[i][0] - y[j][0]);
            grad[i][1] += mult * (y[i][1] - y[j][1]);
        }
    }
    kl
}

/// Exact t-SNE of the rows of `x` into the plane.
pub fn tsne_embed(x: &[Vec<f64>], config: &TsneConfig) -> Result<Embedding2D> {
    let n = x.len();
    if n < 4 {
        return Err(LabError::Analysis(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let cal = perplexity_calibration(x, config.perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cal.conditional[i][j] + cal.conditional[j][i]) / (2.0 * n as f64);
        }
    }
    let lr = config
        .learning_rate
        .unwrap_or_else(|| (n as f64 / config.exaggeration / 4.0).max(50.0));
    let mut rng = rng_from(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut kl_after = None;
    for it in 0..config.iterations {
        let exaggerating = it < config.exaggeration_iters;
        let exag = if exaggerating { config.exaggeration } else { 1.0 };
        let momentum = if exaggerating { 0.5 } else { 0.8 };
        let kl = kl_and_grad(&p, &y, exag, &mut grad);
        if it == config.exaggeration_iters {
            kl_after = Some(kl);
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign {
                    (gains[i][d] * 0.8).max(0.01)
                } else {
                    gains[i][d] + 0.2
                };
                update[i][d] = momentum * update[i][d] - lr * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        for d in 0..2 {
            let mean = y.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            for v in y.iter_mut() {
                v[d] -= mean;
            }
        }
    }
    let kl = kl_and_grad(&p, &y, 1.0, &mut grad);
    if !kl.is_finite() || y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(LabError::NonFinite("t-SNE coordinates".into()));
    }
    Ok(Embedding2D {
        method: "tsne".into(),
        coords: y,
        perplexity: Some(config.perplexity),
        iterations: Some(config.iterations),
        seed: Some(config.seed),
        kl: Some(kl.max(0.0)),
        kl_after_exaggeration: kl_after,
        residual: None,
        eigenvalues: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 5.0 } else { -5.0 };
                (0..6).map(|_| c + normal.sample(&mut rng)).collect()
            })
            .collect()
    }

    #[test]
    fn calibration_hits_target_entropy() {
        let x = blobs(20, 1);
        let cal = perplexity_calibration(&x, 3.0).unwrap();
        for (i, row) in cal.conditional.iter().enumerate() {
            assert!((cal.entropy_bits[i] - 3f64.log2()).abs() < 1e-4);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(row[i], 0.0);
        }
    }

    #[test]
    fn calibration_handles_tiny_scales() {
        let x: Vec<Vec<f64>> = blobs(10, 2)
            .into_iter()
            .map(|r| r.iter().map(|v| v * 1e-7).collect())
            .collect();
        let cal = perplexity_calibration(&x, 3.0).unwrap();
        assert!(cal.entropy_bits.iter().all(|h| (h - 3f64.log2()).abs() < 1e-4));
    }

    #[test]
    fn perplexity_must_be_below_point_count() {
        let x = blobs(4, 0);
        assert!(matches!(
            tsne_embed(
                &x,
                &TsneConfig {
                    perplexity: 4.0,
                    ..TsneConfig::default()
                }
            ),
            Err(LabError::PerplexityTooLarge { .. })
        ));
        assert!(tsne_embed(&x[..3], &TsneConfig::default()).is_err());
    }

    #[test]
    fn seeded_runs_are_identical_and_separate_blobs() {
        let x = blobs(16, 3);
        let cfg = TsneConfig {
            iterations: 400,
            ..TsneConfig::default()
        };
        let a = tsne_embed(&x, &cfg).unwrap();
        let b = tsne_embed(&x, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.kl.unwrap() >= 0.0);
        assert!(a.kl.unwrap() < a.kl_after_exaggeration.unwrap());
        let mean = |parity: usize| {
            let pts: Vec<&[f64; 2]> = a
                .coords
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == parity)
                .map(|(_, c)| c)
                .collect();
            let k = pts.len() as f64;
            [
                pts.iter().map(|c| c[0]).sum::<f64>() / k,
                pts.iter().map(|c| c[1]).sum::<f64>() / k,
            ]
        };
        let (m0, m1) = (mean(0), mean(1));
        let gap = ((m0[0] - m1[0]).powi(2) + (m0[1] - m1[1]).powi(2)).sqrt();
        let spread = a
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let m = if i % 2 == 0 { m0 } else { m1 };
                ((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        assert!(gap > spread, "gap {gap} spread {spread}");
    }

    #[test]
    fn symmetrized_affinities_sum_to_one() {
        let x = blobs(12, 4);
        let cal = perplexity_calibration(&x, 3.0).unwrap();
        let n = x.len();
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (cal.conditional[i][j] + cal.conditional[j][i]) / (2.0 * n as f64))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
