use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{LabError, Result};

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    if m.shape().len() != 2 {
        return Err(LabError::Shape {
            op: "softmax_rows",
            expected: vec![0, 0],
            got: m.shape().to_vec(),
        });
    }
    if !m.all_finite() {
        return Err(LabError::NonFinite("softmax_rows input".into()));
    }
    let mut out = m.clone();
    let cols = m.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_exact_mut(cols) {
            kernels::softmax_in_place(row);
        }
    }
    Ok(out)
}

/// `gain_i * v_i / sqrt(mean(v^2) + eps)`.
pub fn rms_norm<T: Real>(v: &[T], gain: &[T], eps: f64) -> Result<Vec<T>> {
    if v.len() != gain.len() {
        return Err(LabError::Shape {
            op: "rms_norm",
            expected: vec![gain.len()],
            got: vec![v.len()],
        });
    }
    if eps <= 0.0 {
        return Err(LabError::InvalidConfig(format!("rms_norm eps must be > 0, got {eps}")));
    }
    let mut out = vec![T::ZERO; v.len()];
    kernels::rms_norm_rows(v, gain, eps, &mut out, None);
    Ok(out)
}

/// Rotary position encoding of one head vector at `position`.
pub fn apply_rope<T: Real>(x: &[T], position: usize, base: f64) -> Result<Vec<T>> {
    if x.len() % 2 != 0 {
        return Err(LabError::OddHeadDim(x.len()));
    }
    let mut out = x.to_vec();
    let angles = kernels::rope_angles(position, x.len(), base);
    kernels::rope_row(&mut out, x.len(), &angles, false);
    Ok(out)
}

/// Mean negative log-likelihood over unmasked rows of `logits[seq, vocab]`.
///
/// Also returns the per-row softmax (needed for the gradient).
pub fn cross_entropy_with_probs<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Vec<T>, usize)> {
    let rows = logits.rows();
    let vocab = logits.cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(LabError::Shape {
            op: "cross_entropy",
            expected: vec![rows],
            got: vec![targets.len(), mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LabError::AllMasked);
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0f64;
    for (r, row) in probs.chunks_exact_mut(vocab).enumerate() {
        if !mask[r] {
            row.iter_mut().for_each(|p| *p = T::ZERO);
            continue;
        }
        let t = targets[r];
        if t >= vocab {
            return Err(LabError::TokenOutOfRange { token: t, vocab });
        }
        // log-softmax in f64
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[t].to_f64();
        kernels::softmax_in_place(row);
    }
    Ok((total / count as f64, probs, count))
}

pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    cross_entropy_with_probs(logits, targets, mask).map(|(loss, _, _)| loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let out = softmax_rows(&t(1, 2, vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        let out = softmax_rows(&t(1, 3, vec![7.5, 7.5, 7.5])).unwrap();
        for &p in out.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let out = softmax_rows(&t(1, 2, vec![1000.0, 0.0])).unwrap();
        assert!(out.all_finite());
        assert!((out.data()[0] - 1.0).abs() < 1e-6 && out.data()[1] < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_rows(&t(1, 2, vec![f32::NAN, 0.0])),
            Err(LabError::NonFinite(_))
        ));
        assert!(softmax_rows(&t(1, 2, vec![f32::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn rms_norm_examples() {
        let v = vec![-3.0f64; 8];
        let out = rms_norm(&v, &[1.0; 8], 1e-12).unwrap();
        for o in out {
            assert!((o + 1.0).abs() < 1e-9);
        }
        let out = rms_norm(&[0.0f32; 4], &[1.0; 4], 1e-6).unwrap();
        assert_eq!(out, vec![0.0; 4]);
        assert!(rms_norm(&[1.0f32; 3], &[1.0; 4], 1e-6).is_err());
    }

    #[test]
    fn rms_norm_matches_direct_formula() {
        let v: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.37).collect();
        let g: Vec<f64> = (0..16).map(|i| 0.5 + i as f64 * 0.1).collect();
        let out = rms_norm(&v, &g, 1e-6).unwrap();
        let rms = (v.iter().map(|x| x * x).sum::<f64>() / 16.0 + 1e-6).sqrt();
        for i in 0..16 {
            assert!((out[i] - g[i] * v[i] / rms).abs() < 1e-12);
        }
        assert!(out.iter().all(|o| o.is_finite()));
    }

    #[test]
    fn rope_examples() {
        let x = vec![0.3f64, -1.2, 2.0, 0.5];
        assert_eq!(apply_rope(&x, 0, 10000.0).unwrap(), x);
        let e0 = vec![1.0f64, 0.0, 0.0, 0.0];
        let p = 5;
        let out = apply_rope(&e0, p, 10000.0).unwrap();
        // first pair rotates with frequency base^0 = 1
        assert!((out[0] - (p as f64).cos()).abs() < 1e-12);
        assert!((out[1] - (p as f64).sin()).abs() < 1e-12);
        assert!(matches!(
            apply_rope(&[1.0f32; 3], 1, 10000.0),
            Err(LabError::OddHeadDim(3))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 15;
        let logits = t(1, v, vec![0.25; v]);
        let loss = cross_entropy(&logits, &[3], &[true]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-6);

        let mut row = vec![0.0f32; 4];
        row[2] = 100.0;
        let loss = cross_entropy(&t(1, 4, row), &[2], &[true]).unwrap();
        assert!(loss < 1e-6);

        let logits = t(3, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, -1.0, 9.0, 9.0, 9.0]);
        let a = cross_entropy(&t(1, 3, vec![1.0, 2.0, 3.0]), &[0], &[true]).unwrap();
        let b = cross_entropy(&t(1, 3, vec![0.5, 0.5, -1.0]), &[2], &[true]).unwrap();
        let both = cross_entropy(&logits, &[0, 2, 1], &[true, true, false]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&logits, &[0, 0, 0], &[false; 3]),
            Err(LabError::AllMasked)
        ));
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            grid in prop::collection::vec(-3200i32..3200, 1..20),
            shift_steps in -6400i32..6400,
        ) {
            // dyadic values keep `x + shift` exact in f32
            let row: Vec<f32> = grid.iter().map(|&v| v as f32 / 64.0).collect();
            let shift = shift_steps as f32 / 64.0;
            let n = row.len();
            let a = softmax_rows(&t(1, n, row.clone())).unwrap();
            let s: f64 = a.data().iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(a.data().iter().all(|&p| p >= 0.0));
            let shifted: Vec<f32> = row.iter().map(|v| v + shift).collect();
            let b = softmax_rows(&t(1, n, shifted)).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn rope_preserves_norm(
            x in prop::collection::vec(-3.0f32..3.0, 8),
            pos in 0usize..512,
        ) {
            let out = apply_rope(&x, pos, 10000.0).unwrap();
            let n0: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let n1: f64 = out.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-6 * n0.max(1.0));
        }
    }
}
