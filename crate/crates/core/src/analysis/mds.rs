//! Classical (Torgerson) multidimensional scaling.

use super::{sq_distances, Embedding2D};
use crate::error::{LabError, Result};

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 100_000;

fn mat_vec(b: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    b.iter()
        .map(|row| row.iter().zip(v).map(|(a, x)| a * x).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Dominant eigenpair of symmetric `b` by power iteration, sign fixed so
/// the largest-magnitude component is positive.
fn dominant_eigen(b: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = b.len();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = mat_vec(b, &v);
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return (0.0, v);
        }
        let diff = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let flipped = v.iter().zip(&w).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = v.iter().zip(mat_vec(b, &v)).map(|(a, b)| a * b).sum();
        if diff.min(flipped) < POWER_TOL {
            break;
        }
    }
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

/// Classical MDS of the rows of `x` onto the top two principal axes of the
/// double-centered squared-distance matrix.
pub fn mds_embed(x: &[Vec<f64>]) -> Result<Embedding2D> {
    let n = x.len();
    if n < 3 {
        return Err(LabError::Analysis(format!("MDS needs at least 3 points, got {n}")));
    }
    let d2 = sq_distances(x);
    let row_mean: Vec<f64> = d2.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| -0.5 * (d2[i][j] - row_mean[i] - row_mean[j] + grand))
                .collect()
        })
        .collect();
    let mut coords = vec![[0.0f64; 2]; n];
    let mut eigenvalues = Vec::with_capacity(2);
    for k in 0..2 {
        let (lambda, v) = dominant_eigen(&b);
        let lambda = lambda.max(0.0);
        for i in 0..n {
            coords[i][k] = v[i] * lambda.sqrt();
            for j in 0..n {
                b[i][j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda);
    }
    let residual: f64 = b.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("MDS coordinates".into()));
    }
    Ok(Embedding2D {
        method: "mds".into(),
        coords,
        perplexity: None,
        iterations: None,
        seed: None,
        kl: None,
        kl_after_exaggeration: None,
        residual: Some(residual),
        eigenvalues: Some(eigenvalues),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn collinear_maps_stay_collinear() {
        let a = vec![0.3, -0.1, 0.7, 0.2];
        let delta = [0.05, 0.02, -0.04, 0.01];
        let x: Vec<Vec<f64>> = (0..3)
            .map(|k| a.iter().zip(&delta).map(|(v, d)| v + k as f64 * d).collect())
            .collect();
        let e = mds_embed(&x).unwrap();
        let [p, q, r] = [e.coords[0], e.coords[1], e.coords[2]];
        let cross = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
        assert!(cross.abs() < 1e-6);
        let d01 = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
        assert!((d01 - dist(&x[0], &x[1])).abs() < 1e-9);
    }

    #[test]
    fn identical_maps_coincide() {
        let x = vec![vec![0.1, 0.2, 0.3]; 5];
        let e = mds_embed(&x).unwrap();
        for c in &e.coords {
            assert!(c[0].abs() < 1e-9 && c[1].abs() < 1e-9);
        }
    }

    #[test]
    fn planar_data_is_recovered_exactly() {
        let pts = [[0.0, 0.0], [3.0, 0.0], [0.0, 4.0], [1.0, 1.0], [-2.0, 0.5]];
        let x: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0], p[1], 0.0]).collect();
        let e = mds_embed(&x).unwrap();
        assert!(e.residual.unwrap() < 1e-6);
        for i in 0..5 {
            for j in 0..5 {
                let got =
                    ((e.coords[i][0] - e.coords[j][0]).powi(2) + (e.coords[i][1] - e.coords[j][1]).powi(2)).sqrt();
                assert!((got - dist(&x[i], &x[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_never_stretches_distances() {
        let x: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..8).map(|j| (((i * 13 + j * 7) % 19) as f64 - 9.0) / 10.0).collect())
            .collect();
        let e = mds_embed(&x).unwrap();
        assert!(e.residual.unwrap() > 0.0);
        let ev = e.eigenvalues.as_ref().unwrap();
        assert!(ev[0] >= ev[1]);
        for i in 0..12 {
            for j in 0..12 {
                let got =
                    ((e.coords[i][0] - e.coords[j][0]).powi(2) + (e.coords[i][1] - e.coords[j][1]).powi(2)).sqrt();
                assert!(got <= dist(&x[i], &x[j]) + 1e-7);
            }
        }
        assert_eq!(e, mds_embed(&x).unwrap());
    }
}
