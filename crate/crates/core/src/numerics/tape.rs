//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! Parameters are borrowed, not copied: a [`Tape`] records the forward graph
//! over a parameter slice and [`Tape::backward`] returns one gradient buffer
//! per parameter that the loss depends on.

use super::kernels;
use super::ops::cross_entropy_with_probs;
use super::tensor::{Real, Tensor};
use crate::error::{LabError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Param(usize),
    Constant,
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Rope {
        x: Var,
        d_head: usize,
        positions: Vec<usize>,
        angles: Vec<Vec<(f64, f64)>>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        n_heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<T: Real> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Per-parameter gradients produced by [`Tape::backward`]. `None` marks a
/// parameter the loss does not reach.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    pub per_param: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, param: usize) -> Option<&[T]> {
        self.per_param.get(param).and_then(|g| g.as_deref())
    }

    /// Writes each gradient into the matching parameter's `grad` slot.
    pub fn apply_to(&self, params: &mut [Tensor<T>]) -> Result<()> {
        for (p, g) in params.iter_mut().zip(&self.per_param) {
            match g {
                Some(g) => p.set_grad(g.clone())?,
                None => p.clear_grad(),
            }
        }
        Ok(())
    }
}

pub struct Tape<'p, T: Real = f32> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> LabError {
    LabError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    /// Gathers rows of `table[vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(LabError::TokenOutOfRange { token: id, vocab });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", &[k, n], bv.shape()));
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::gemm_nn(m, k, n, av.data(), bv.data(), T::ZERO, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Row-wise RMS normalization of `x[rows, d]` with gain `[d]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = gv.len();
        if xv.cols() != d {
            return Err(shape_err("rms_norm", &[xv.rows(), d], xv.shape()));
        }
        let rows = xv.rows();
        let mut out = vec![T::ZERO; xv.len()];
        let mut inv = vec![T::ZERO; rows];
        kernels::rms_norm_rows(xv.data(), gv.data(), eps, &mut out, Some(&mut inv));
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = super::ops::softmax_rows(self.value(x))?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Rotary encoding of every head in `x[rows, n_heads*d_head]`; row `r`
    /// sits at `positions[r]`.
    pub fn rope(&mut self, x: Var, d_head: usize, positions: &[usize], base: f64) -> Result<Var> {
        if d_head % 2 != 0 {
            return Err(LabError::OddHeadDim(d_head));
        }
        let xv = self.value(x);
        if positions.len() != xv.rows() || xv.cols() % d_head != 0 {
            return Err(shape_err("rope", &[positions.len(), d_head], xv.shape()));
        }
        let max_pos = positions.iter().copied().max().unwrap_or(0);
        let angles: Vec<_> = (0..=max_pos).map(|p| kernels::rope_angles(p, d_head, base)).collect();
        let mut out = xv.data().to_vec();
        let cols = xv.cols();
        for (row, &p) in out.chunks_exact_mut(cols).zip(positions) {
            kernels::rope_row(row, d_head, &angles[p], false);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                d_head,
                positions: positions.to_vec(),
                angles,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Gelu { x }))
    }

    /// Causal multi-head attention over `batch` sequences of length `seq`;
    /// returns the concatenated per-head outputs (before any projection).
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        n_heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != batch * seq {
            return Err(shape_err("causal_attention", qv.shape(), kv.shape()));
        }
        if qv.cols() % n_heads != 0 {
            return Err(shape_err("causal_attention", &[batch * seq, n_heads], qv.shape()));
        }
        let mut probs = vec![T::ZERO; batch * n_heads * seq * seq];
        let z = kernels::causal_attention(qv.data(), kv.data(), vv.data(), batch, seq, n_heads, Some(&mut probs));
        let value = Tensor::new(qv.shape().to_vec(), z)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                n_heads,
                probs,
            },
        ))
    }

    /// Mean next-token cross-entropy over unmasked rows; yields a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (loss, probs, count) = cross_entropy_with_probs(self.value(logits), targets, mask)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(LabError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        let mut per_param: Vec<Option<Vec<T>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Param(i) => accumulate(&mut per_param[*i], g),
                Op::Constant => {}
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut gt = vec![T::ZERO; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, &src) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..]) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![T::ZERO; m * k];
                    kernels::gemm_nt(m, n, k, &g, bv.data(), T::ZERO, &mut ga);
                    let mut gb = vec![T::ZERO; k * n];
                    kernels::gemm_tn(k, m, n, av.data(), &g, T::ZERO, &mut gb);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(bv.data()).map(|(&d, &y)| d * y).collect();
                    let gb = g.iter().zip(av.data()).map(|(&d, &x)| d * x).collect();
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::RmsNorm { x, gain, inv } => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let d = gv.len();
                    let mut gx = vec![T::ZERO; xv.len()];
                    let mut gg = vec![T::ZERO; d];
                    let inv_d = T::from_f64(1.0 / d as f64);
                    for (r, ((xr, gr), gxr)) in xv
                        .data()
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let s = inv[r];
                        let mut dot = 0.0f64;
                        for j in 0..d {
                            let gy = gr[j] * gv.data()[j];
                            dot += (gy * xr[j]).to_f64();
                            gg[j] += gr[j] * xr[j] * s;
                        }
                        let coef = T::from_f64(dot) * s * s * s * inv_d;
                        for j in 0..d {
                            gxr[j] = gr[j] * gv.data()[j] * s - xr[j] * coef;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gain.0], gg);
                }
                Op::Softmax { x } => {
                    let yv = self.nodes[idx].value.as_ref().expect("softmax value");
                    let cols = yv.cols();
                    let mut gx = vec![T::ZERO; yv.len()];
                    for ((yr, gr), gxr) in yv
                        .data()
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(&y, &d)| (y * d).to_f64()).sum();
                        let dot = T::from_f64(dot);
                        for j in 0..cols {
                            gxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Rope {
                    x,
                    d_head,
                    positions,
                    angles,
                } => {
                    let cols = self.value(*x).cols();
                    let mut gx = g;
                    for (row, &p) in gx.chunks_exact_mut(cols).zip(positions) {
                        kernels::rope_row(row, *d_head, &angles[p], true);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let gx = g
                        .iter()
                        .zip(xv.data())
                        .map(|(&d, &v)| d * kernels::gelu_grad(v))
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    n_heads,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::causal_attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &g,
                        *batch,
                        *seq,
                        *n_heads,
                    );
                    accumulate(&mut grads[q.0], dq);
                    accumulate(&mut grads[k.0], dk);
                    accumulate(&mut grads[v.0], dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let vocab = self.value(*logits).cols();
                    let scale = g[0] * T::from_f64(1.0 / *count as f64);
                    let mut gl = probs.clone();
                    for (r, row) in gl.chunks_exact_mut(vocab).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        row[targets[r]] -= T::ONE;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads[x.0], vec![g[0]; n]);
                }
            }
        }
        Ok(Gradients { per_param })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}
