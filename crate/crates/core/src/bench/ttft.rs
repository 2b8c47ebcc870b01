//! Time-to-first-token measurement: wall clock from prompt submission
//! (raw image + query) to the first generated token, batch size 1,
//! single-threaded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::data::RecExample;
use crate::error::{Error, Result};
use crate::math::{argmax, Rng};
use crate::model::{prefill_with_pruning, ModelConfig, ModelWeights};
use crate::prune::{Alignment, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtftOptions {
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for TtftOptions {
    fn default() -> Self {
        TtftOptions { warmup: 3, runs: 50, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TtftStats {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub p50_ms: f64,
    /// Coefficient of variation: stddev / mean.
    pub cv: f64,
    pub runs: usize,
}

/// Average TTFT over `opts.runs` timed runs (after `opts.warmup`
/// untimed ones), cycling through `sample`.
pub fn measure_ttft(
    w: &ModelWeights,
    cfg: &ModelConfig,
    sample: &[RecExample],
    strategy: Strategy,
    ratio: f64,
    alignment: Alignment,
    opts: &TtftOptions,
) -> Result<TtftStats> {
    if sample.is_empty() {
        return Err(Error::invalid("measure_ttft: empty sample"));
    }
    if opts.runs == 0 {
        return Err(Error::invalid("measure_ttft: need at least one run"));
    }
    let one = |i: usize, rng: &mut Rng| -> Result<f64> {
        let ex = &sample[i % sample.len()];
        let text = [cfg.color_token(ex.query_color)];
        let start = Instant::now();
        let (state, _) = prefill_with_pruning(
            &ex.image, &text, strategy, ratio, alignment, rng, w, cfg, false,
        )?;
        let first = argmax(&state.last_logits)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(first);
        Ok(elapsed)
    };
    let mut rng = Rng::new(opts.seed);
    for i in 0..opts.warmup {
        one(i, &mut rng)?;
    }
    let mut times = Vec::with_capacity(opts.runs);
    for i in 0..opts.runs {
        times.push(one(i, &mut rng)?);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TtftStats {
        mean_ms: mean,
        min_ms: sorted[0],
        max_ms: *sorted.last().unwrap(),
        p50_ms: sorted[sorted.len() / 2],
        cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        runs: times.len(),
    })
}
