//! Inference forward pass with per-head capture and interception.
//!
//! The patchable unit is a head's attention-weighted value vector, taken
//! before the layer's output projection. Patching overwrites that vector and
//! recomputes everything downstream, MLPs included.

use std::ops::Range;

use super::{final_norm_index, unembed_index, HeadId, Model, ParamSlot, TOKEN_EMBED};
use crate::error::{LabError, Result};
use crate::numerics::{kernels, Tensor};

/// Per-head outputs of every layer at every position of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    n_heads: usize,
    d_head: usize,
    seq_len: usize,
    /// One `[seq_len, n_heads * d_head]` buffer per layer.
    head_out: Vec<Vec<f32>>,
    pub answer_span: Option<Range<usize>>,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_layers(&self) -> usize {
        self.head_out.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Number of cached head vectors, `L * H * seq_len`.
    pub fn n_vectors(&self) -> usize {
        self.head_out.len() * self.n_heads * self.seq_len
    }

    pub fn head_out(&self, head: HeadId, position: usize) -> &[f32] {
        let d_model = self.n_heads * self.d_head;
        let off = position * d_model + head.head * self.d_head;
        &self.head_out[head.layer][off..off + self.d_head]
    }

    /// Concatenated head outputs of one layer, `[seq_len, d_model]`.
    pub fn layer_outputs(&self, layer: usize) -> &[f32] {
        &self.head_out[layer]
    }

    pub fn all_finite(&self) -> bool {
        self.head_out.iter().flatten().all(|v| v.is_finite())
    }

    pub fn with_answer_span(mut self, span: Range<usize>) -> Self {
        self.answer_span = Some(span);
        self
    }
}

/// Heads and position ranges to overwrite from a donor cache.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    entries: Vec<(HeadId, Range<usize>)>,
}

impl PatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Patches each head at every position of a `seq_len`-token sequence.
    pub fn whole_heads(heads: impl IntoIterator<Item = HeadId>, seq_len: usize) -> Self {
        Self {
            entries: heads.into_iter().map(|h| (h, 0..seq_len)).collect(),
        }
    }

    pub fn push(&mut self, head: HeadId, positions: Range<usize>) {
        self.entries.push((head, positions));
    }

    pub fn entries(&self) -> &[(HeadId, Range<usize>)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate(&self, model: &Model, seq_len: usize) -> Result<()> {
        for (head, range) in &self.entries {
            head.check(&model.config)?;
            if range.start > range.end || range.end > seq_len {
                return Err(LabError::PatchOutOfRange(format!(
                    "positions {range:?} outside sequence of length {seq_len}"
                )));
            }
        }
        Ok(())
    }
}

/// A vector added to the residual stream right after layer `layer`'s
/// attention block, at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAddition {
    pub layer: usize,
    pub position: usize,
    pub delta: Vec<f32>,
}

/// Residual-stream snapshots of a clean forward, used to resume a forward
/// from any layer without recomputing the layers below it.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub resid_pre: Vec<Vec<f32>>,
    pub cache: ActivationCache,
    pub logits: Tensor,
}

trait LayerHook {
    fn resid_pre(&mut self, _layer: usize, _x: &[f32]) {}
    fn head_outputs(&mut self, _layer: usize, _z: &mut [f32]) {}
    fn attn_out(&mut self, _layer: usize, _a: &mut [f32]) {}
}

struct Capture {
    resid: Option<Vec<Vec<f32>>>,
    heads: Vec<Vec<f32>>,
}

impl LayerHook for Capture {
    fn resid_pre(&mut self, _layer: usize, x: &[f32]) {
        if let Some(r) = self.resid.as_mut() {
            r.push(x.to_vec());
        }
    }

    fn head_outputs(&mut self, _layer: usize, z: &mut [f32]) {
        self.heads.push(z.to_vec());
    }
}

struct Patcher<'a> {
    donor: &'a ActivationCache,
    patches: &'a PatchSet,
    d_head: usize,
    d_model: usize,
}

impl LayerHook for Patcher<'_> {
    fn head_outputs(&mut self, layer: usize, z: &mut [f32]) {
        for (head, range) in self.patches.entries() {
            if head.layer != layer {
                continue;
            }
            for pos in range.clone() {
                let off = pos * self.d_model + head.head * self.d_head;
                z[off..off + self.d_head].copy_from_slice(self.donor.head_out(*head, pos));
            }
        }
    }
}

struct Adder<'a> {
    additions: &'a [ResidualAddition],
    d_model: usize,
}

impl LayerHook for Adder<'_> {
    fn attn_out(&mut self, layer: usize, a: &mut [f32]) {
        for add in self.additions.iter().filter(|a| a.layer == layer) {
            let row = &mut a[add.position * self.d_model..(add.position + 1) * self.d_model];
            for (dst, &d) in row.iter_mut().zip(&add.delta) {
                *dst += d;
            }
        }
    }
}

struct NoHook;
impl LayerHook for NoHook {}

impl Model {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(LabError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LabError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Vec<f32> {
        let table = &self.params[TOKEN_EMBED];
        tokens.iter().flat_map(|&t| table.row(t).iter().copied()).collect()
    }

    fn matmul(&self, x: &[f32], rows: usize, w: &Tensor) -> Vec<f32> {
        let (k, n) = (w.rows(), w.cols());
        let mut out = vec![0.0; rows * n];
        kernels::gemm_nn(rows, k, n, x, w.data(), 0.0, &mut out);
        out
    }

    fn norm(&self, x: &[f32], gain: &Tensor) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        kernels::rms_norm_rows(x, gain.data(), self.config.norm_eps, &mut out, None);
        out
    }

    /// Rotated queries/keys and values for `x[batch*seq, d]`; row `r` sits at
    /// position `offset + r % seq`.
    fn qkv(&self, l: usize, x: &[f32], rows: usize, seq: usize, offset: usize) -> [Vec<f32>; 3] {
        let h = self.norm(x, self.layer(l, ParamSlot::AttnNorm));
        let mut q = self.matmul(&h, rows, self.layer(l, ParamSlot::Wq));
        let mut k = self.matmul(&h, rows, self.layer(l, ParamSlot::Wk));
        let v = self.matmul(&h, rows, self.layer(l, ParamSlot::Wv));
        let d = self.config.d_model;
        let dh = self.config.d_head();
        let angles: Vec<_> = (0..seq)
            .map(|p| kernels::rope_angles(offset + p, dh, self.config.rope_base))
            .collect();
        for r in 0..rows {
            let a = &angles[r % seq];
            kernels::rope_row(&mut q[r * d..(r + 1) * d], dh, a, false);
            kernels::rope_row(&mut k[r * d..(r + 1) * d], dh, a, false);
        }
        [q, k, v]
    }

    fn head_outputs(&self, l: usize, x: &[f32], batch: usize, seq: usize) -> Vec<f32> {
        let [q, k, v] = self.qkv(l, x, batch * seq, seq, 0);
        kernels::causal_attention(&q, &k, &v, batch, seq, self.config.n_heads, None)
    }

    /// Output projection, residual add and the MLP block of layer `l`.
    fn finish_layer(&self, l: usize, x: &mut [f32], z: &[f32], rows: usize, hook: &mut dyn LayerHook) {
        let mut a = self.matmul(z, rows, self.layer(l, ParamSlot::Wo));
        hook.attn_out(l, &mut a);
        for (xv, av) in x.iter_mut().zip(&a) {
            *xv += *av;
        }
        let h = self.norm(x, self.layer(l, ParamSlot::MlpNorm));
        let mut u = self.matmul(&h, rows, self.layer(l, ParamSlot::WIn));
        u.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let m = self.matmul(&u, rows, self.layer(l, ParamSlot::WOut));
        for (xv, mv) in x.iter_mut().zip(&m) {
            *xv += *mv;
        }
    }

    fn run_layers(&self, start: usize, x: &mut [f32], batch: usize, seq: usize, hook: &mut dyn LayerHook) {
        for l in start..self.config.n_layers {
            hook.resid_pre(l, x);
            let mut z = self.head_outputs(l, x, batch, seq);
            hook.head_outputs(l, &mut z);
            self.finish_layer(l, x, &z, batch * seq, hook);
        }
    }

    /// Final norm and unembedding of the selected rows of `x`.
    fn logits_rows(&self, x: &[f32], rows: &[usize]) -> Vec<f32> {
        let d = self.config.d_model;
        let picked: Vec<f32> = rows
            .iter()
            .flat_map(|&r| x[r * d..(r + 1) * d].iter().copied())
            .collect();
        let h = self.norm(&picked, &self.params[final_norm_index(&self.config)]);
        self.matmul(&h, rows.len(), &self.params[unembed_index(&self.config)])
    }

    fn all_logits(&self, x: &[f32], seq: usize) -> Result<Tensor> {
        let rows: Vec<usize> = (0..seq).collect();
        Tensor::new(vec![seq, self.config.vocab_size], self.logits_rows(x, &rows))
    }

    fn run_hooked(&self, tokens: &[usize], hook: &mut dyn LayerHook) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        self.run_layers(0, &mut x, 1, tokens.len(), hook);
        self.all_logits(&x, tokens.len())
    }

    fn empty_cache(&self, seq_len: usize, head_out: Vec<Vec<f32>>) -> ActivationCache {
        ActivationCache {
            n_heads: self.config.n_heads,
            d_head: self.config.d_head(),
            seq_len,
            head_out,
            answer_span: None,
        }
    }

    /// Clean run: logits `[seq, vocab]` plus every head output.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, ActivationCache)> {
        let mut cap = Capture {
            resid: None,
            heads: Vec::with_capacity(self.config.n_layers),
        };
        let logits = self.run_hooked(tokens, &mut cap)?;
        Ok((logits, self.empty_cache(tokens.len(), cap.heads)))
    }

    pub(crate) fn trace(&self, tokens: &[usize]) -> Result<Trace> {
        let mut cap = Capture {
            resid: Some(Vec::with_capacity(self.config.n_layers)),
            heads: Vec::with_capacity(self.config.n_layers),
        };
        let logits = self.run_hooked(tokens, &mut cap)?;
        Ok(Trace {
            resid_pre: cap.resid.unwrap_or_default(),
            cache: self.empty_cache(tokens.len(), cap.heads),
            logits,
        })
    }

    /// Runs `tokens` with the listed head outputs replaced by the donor's.
    pub fn forward_with_patches(
        &self,
        tokens: &[usize],
        donor: &ActivationCache,
        patches: &PatchSet,
    ) -> Result<Tensor> {
        if donor.seq_len() != tokens.len() {
            return Err(LabError::DonorLength {
                donor: donor.seq_len(),
                tokens: tokens.len(),
            });
        }
        if donor.n_layers() != self.config.n_layers || donor.n_heads() != self.config.n_heads {
            return Err(LabError::PatchOutOfRange(format!(
                "donor cache is {}x{} but the model is {}x{}",
                donor.n_layers(),
                donor.n_heads(),
                self.config.n_layers,
                self.config.n_heads
            )));
        }
        patches.validate(self, tokens.len())?;
        let mut hook = Patcher {
            donor,
            patches,
            d_head: self.config.d_head(),
            d_model: self.config.d_model,
        };
        self.run_hooked(tokens, &mut hook)
    }

    /// Runs `tokens` adding fixed vectors to the residual stream after the
    /// attention block of the given layers.
    pub fn forward_with_residual_additions(&self, tokens: &[usize], additions: &[ResidualAddition]) -> Result<Tensor> {
        for add in additions {
            if add.layer >= self.config.n_layers
                || add.position >= tokens.len()
                || add.delta.len() != self.config.d_model
            {
                return Err(LabError::PatchOutOfRange(format!(
                    "residual addition at layer {} position {} (len {})",
                    add.layer,
                    add.position,
                    add.delta.len()
                )));
            }
        }
        let mut hook = Adder {
            additions,
            d_model: self.config.d_model,
        };
        self.run_hooked(tokens, &mut hook)
    }

    /// For each head of `layer` in `heads`, resumes the traced corrupted run
    /// at `layer` with that head's output (all positions) taken from `donor`.
    /// Returns, per head, the logits at `rows` flattened `[rows, vocab]`.
    pub(crate) fn patched_head_logits(
        &self,
        trace: &Trace,
        donor: &ActivationCache,
        layer: usize,
        heads: &[usize],
        rows: &[usize],
    ) -> Vec<Vec<f32>> {
        let seq = trace.cache.seq_len();
        let d = self.config.d_model;
        let dh = self.config.d_head();
        let nv = heads.len();
        let base_x = &trace.resid_pre[layer];
        let base_z = trace.cache.layer_outputs(layer);
        let mut x = Vec::with_capacity(nv * seq * d);
        let mut z = Vec::with_capacity(nv * seq * d);
        for _ in 0..nv {
            x.extend_from_slice(base_x);
            z.extend_from_slice(base_z);
        }
        let donor_z = donor.layer_outputs(layer);
        for (i, &h) in heads.iter().enumerate() {
            for pos in 0..seq {
                let src = pos * d + h * dh;
                let dst = (i * seq + pos) * d + h * dh;
                z[dst..dst + dh].copy_from_slice(&donor_z[src..src + dh]);
            }
        }
        self.finish_layer(layer, &mut x, &z, nv * seq, &mut NoHook);
        self.run_layers(layer + 1, &mut x, nv, seq, &mut NoHook);
        (0..nv)
            .map(|i| {
                let picked: Vec<usize> = rows.iter().map(|&r| i * seq + r).collect();
                self.logits_rows(&x, &picked)
            })
            .collect()
    }

    /// Greedy continuation of `prompt` by `n` tokens using cached keys/values.
    pub fn generate_greedy(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(LabError::InvalidConfig(
                "greedy decoding needs a non-empty prompt".into(),
            ));
        }
        self.check_tokens(prompt)?;
        let total = prompt.len() + n.saturating_sub(1);
        if total > self.config.max_seq_len {
            return Err(LabError::SequenceTooLong {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        let cfg = &self.config;
        let (d, dh, nh) = (cfg.d_model, cfg.d_head(), cfg.n_heads);
        let scale = 1.0 / (dh as f32).sqrt();

        // prompt pass, keeping rotated keys and values per layer
        let seq = prompt.len();
        let mut x = self.embed(prompt);
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let [q, k, v] = self.qkv(l, &x, seq, seq, 0);
            let z = kernels::causal_attention(&q, &k, &v, 1, seq, nh, None);
            self.finish_layer(l, &mut x, &z, seq, &mut NoHook);
            keys.push(k);
            values.push(v);
        }
        let mut out = Vec::with_capacity(n);
        let mut last = argmax(&self.logits_rows(&x, &[seq - 1]));
        let mut probs = vec![0.0f32; cfg.max_seq_len];
        for step in 0..n {
            out.push(last);
            if step + 1 == n {
                break;
            }
            let pos = seq + step;
            let mut x = self.embed(&[last]);
            for l in 0..cfg.n_layers {
                let [q, k, v] = self.qkv(l, &x, 1, 1, pos);
                keys[l].extend_from_slice(&k);
                values[l].extend_from_slice(&v);
                let mut z = vec![0.0f32; d];
                for h in 0..nh {
                    let c = h * dh;
                    kernels::attend_row(
                        &q[c..c + dh],
                        &keys[l][c..],
                        &values[l][c..],
                        d,
                        pos + 1,
                        scale,
                        &mut probs,
                        &mut z[c..c + dh],
                    );
                }
                self.finish_layer(l, &mut x, &z, 1, &mut NoHook);
            }
            last = argmax(&self.logits_rows(&x, &[0]));
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
