//! Analytic prefill cost model, cross-checked against an instrumented
//! matmul counter.

use crate::error::{Error, Result};
use crate::math::{matmul_flops, reset_matmul_flops, Matrix};
use crate::model::{embed_prompt, prefill_embedded, ModelConfig, ModelWeights, PrefilledState};
use crate::prune::Strategy;
use crate::rope::PositionIds;

/// Matmul FLOPs for one decoder prefill over `seq_len` tokens:
///
/// ```text
/// layers * (8*n*d^2      q/k/v/o projections
///         + 4*n^2*d      logits + value mixing
///         + 16*n*d^2)    MLP at ratio 4
/// ```
///
/// counting 2 FLOPs per multiply-accumulate. The LM head and
/// normalizations are excluded; they are sub-percent at any size this
/// crate runs.
pub fn estimate_flops(cfg: &ModelConfig, seq_len: usize) -> Result<u64> {
    if seq_len == 0 {
        return Err(Error::invalid("estimate_flops: seq_len must be >= 1"));
    }
    let n = seq_len as u64;
    let d = cfg.d_model as u64;
    Ok(cfg.decoder_layers as u64 * (24 * n * d * d + 4 * n * n * d))
}

/// Prefill sequence length for a pruning configuration: BOS + retained
/// visual tokens + text tokens.
pub fn prefill_seq_len(cfg: &ModelConfig, strategy: Strategy, ratio: f64, text_len: usize) -> Result<usize> {
    let k = match strategy {
        Strategy::None => cfg.num_visual(),
        _ => crate::prune::retained_count(cfg.num_visual(), ratio)?,
    };
    Ok(1 + k + text_len)
}

/// Run one prefill with the thread-local matmul counter and return
/// `(state, counted_flops)`. The count covers the decoder stack only —
/// prompt embedding (projector, lookups) happens outside the counter,
/// matching the scope of [`estimate_flops`].
pub fn instrumented_prefill(
    visual: &Matrix,
    visual_ids: &PositionIds,
    text_tokens: &[usize],
    text_ids: &PositionIds,
    w: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<(PrefilledState, u64)> {
    let prompt = embed_prompt(visual, visual_ids, text_tokens, text_ids, w, cfg)?;
    reset_matmul_flops();
    let state = prefill_embedded(&prompt, w, cfg, false)?;
    Ok((state, matmul_flops()))
}
