//! The transformer expressed on the autodiff tape, for training.

use super::{final_norm_index, layer_param, unembed_index, ModelConfig, ParamSlot, TOKEN_EMBED};
use crate::error::{LabError, Result};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

/// `batch` right-padded sequences of length `seq`, flattened row-major, with
/// next-token targets and a loss mask per position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    fn check(&self) -> Result<()> {
        let n = self.batch * self.seq;
        if self.tokens.len() != n || self.targets.len() != n || self.mask.len() != n {
            return Err(LabError::Shape {
                op: "token_batch",
                expected: vec![self.batch, self.seq],
                got: vec![self.tokens.len(), self.targets.len(), self.mask.len()],
            });
        }
        Ok(())
    }
}

/// Records the forward pass and returns the `[batch*seq, vocab]` logits node.
pub fn build_logits<T: Real>(
    config: &ModelConfig,
    tape: &mut Tape<'_, T>,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if seq > config.max_seq_len {
        return Err(LabError::SequenceTooLong {
            len: seq,
            max: config.max_seq_len,
        });
    }
    let positions: Vec<usize> = (0..batch * seq).map(|r| r % seq).collect();
    let dh = config.d_head();
    let eps = config.norm_eps;
    let table = tape.param(TOKEN_EMBED);
    let mut x = tape.embedding(table, tokens)?;
    for l in 0..config.n_layers {
        let p = |s| layer_param(l, s);
        let g = tape.param(p(ParamSlot::AttnNorm));
        let h = tape.rms_norm(x, g, eps)?;
        let wq = tape.param(p(ParamSlot::Wq));
        let wk = tape.param(p(ParamSlot::Wk));
        let wv = tape.param(p(ParamSlot::Wv));
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let q = tape.rope(q, dh, &positions, config.rope_base)?;
        let k = tape.rope(k, dh, &positions, config.rope_base)?;
        let z = tape.causal_attention(q, k, v, batch, seq, config.n_heads)?;
        let wo = tape.param(p(ParamSlot::Wo));
        let a = tape.matmul(z, wo)?;
        x = tape.add(x, a)?;
        let g2 = tape.param(p(ParamSlot::MlpNorm));
        let h2 = tape.rms_norm(x, g2, eps)?;
        let w_in = tape.param(p(ParamSlot::WIn));
        let u = tape.matmul(h2, w_in)?;
        let u = tape.gelu(u)?;
        let w_out = tape.param(p(ParamSlot::WOut));
        let m = tape.matmul(u, w_out)?;
        x = tape.add(x, m)?;
    }
    let gf = tape.param(final_norm_index(config));
    let xf = tape.rms_norm(x, gf, eps)?;
    let un = tape.param(unembed_index(config));
    tape.matmul(xf, un)
}

pub fn build_loss<T: Real>(config: &ModelConfig, tape: &mut Tape<'_, T>, batch: &TokenBatch) -> Result<Var> {
    batch.check()?;
    let logits = build_logits(config, tape, &batch.tokens, batch.batch, batch.seq)?;
    tape.cross_entropy(logits, &batch.targets, &batch.mask)
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_grads<T: Real>(
    config: &ModelConfig,
    params: &[Tensor<T>],
    batch: &TokenBatch,
) -> Result<(f64, Gradients<T>)> {
    let mut tape = Tape::new(params);
    let loss = build_loss(config, &mut tape, batch)?;
    let value = tape.value(loss).data()[0].to_f64();
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Loss only, no backward sweep.
pub fn loss_value<T: Real>(config: &ModelConfig, params: &[Tensor<T>], batch: &TokenBatch) -> Result<f64> {
    let mut tape = Tape::new(params);
    let loss = build_loss(config, &mut tape, batch)?;
    Ok(tape.value(loss).data()[0].to_f64())
}
