//! Grounding-accuracy evaluation under pruning and realignment.

use crate::bench::data::RecExample;
use crate::error::Result;
use crate::math::Rng;
use crate::model::{
    encode_image, generate_greedy, prefill, prefill_with_pruning, ModelConfig, ModelWeights,
};
use crate::prune::{Alignment, Strategy};
use crate::rope::{sequential_ids, PositionIds};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "GAP_PRUNE_THREADS";

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Seed for stochastic strategies (random scoring). Each example gets
    /// an independent stream derived from this and its index, so results
    /// do not depend on the worker count.
    pub seed: u64,
    /// Worker threads; `None` reads [`THREADS_ENV`], falling back to the
    /// available parallelism.
    pub threads: Option<usize>,
    pub max_new_tokens: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { seed: 0, threads: None, max_new_tokens: 4 }
    }
}

pub fn resolve_threads(opts: &EvalOptions) -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = opts.threads.or_else(|| {
        std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok())
    });
    cap.unwrap_or(hw).clamp(1, hw.max(1))
}

/// Whether the model answers one example correctly: the first generated
/// token must be the answer cell's token.
fn example_correct(
    ex: &RecExample,
    w: &ModelWeights,
    cfg: &ModelConfig,
    strategy: Strategy,
    ratio: f64,
    alignment: Alignment,
    rng: &mut Rng,
    max_new: usize,
) -> Result<bool> {
    let text = [cfg.color_token(ex.query_color)];
    let (mut state, _) =
        prefill_with_pruning(&ex.image, &text, strategy, ratio, alignment, rng, w, cfg, false)?;
    let toks = generate_greedy(&mut state, max_new, w, cfg)?;
    Ok(toks.first() == Some(&cfg.cell_token(ex.answer_cell)))
}

fn run_parallel<F>(count: usize, threads: usize, correct: F) -> Result<f64>
where
    F: Fn(usize) -> Result<bool> + Sync,
{
    if count == 0 {
        return Ok(f64::NAN);
    }
    let threads = threads.min(count).max(1);
    let chunk = count.div_ceil(threads);
    let hits = std::sync::atomic::AtomicUsize::new(0);
    let correct = &correct;
    let hits_ref = &hits;
    std::thread::scope(|s| -> Result<()> {
        let mut handles = Vec::new();
        for t in 0..threads {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(count);
            if lo >= hi {
                break;
            }
            handles.push(s.spawn(move || -> Result<()> {
                let mut local = 0usize;
                for i in lo..hi {
                    if correct(i)? {
                        local += 1;
                    }
                }
                hits_ref.fetch_add(local, std::sync::atomic::Ordering::Relaxed);
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("eval worker panicked")?;
        }
        Ok(())
    })?;
    Ok(hits.load(std::sync::atomic::Ordering::Relaxed) as f64 / count as f64)
}

/// Accuracy of `weights` on `data` with the given pruning setup.
pub fn evaluate(
    w: &ModelWeights,
    cfg: &ModelConfig,
    data: &[RecExample],
    strategy: Strategy,
    ratio: f64,
    alignment: Alignment,
    opts: &EvalOptions,
) -> Result<f64> {
    cfg.validate()?;
    let threads = resolve_threads(opts);
    run_parallel(data.len(), threads, |i| {
        let mut rng = Rng::new(opts.seed).derive(i as u64);
        example_correct(&data[i], w, cfg, strategy, ratio, alignment, &mut rng, opts.max_new_tokens)
    })
}

/// Accuracy with the full visual block kept but every visual position ID
/// offset by a constant while text IDs stay at their unpruned values.
///
/// Nothing is removed or reordered — only the ID *values* are wrong — so
/// any accuracy drop isolates the decoder's dependence on absolute
/// visual/text ID geometry.
pub fn evaluate_shift_full(
    w: &ModelWeights,
    cfg: &ModelConfig,
    data: &[RecExample],
    offset: usize,
    opts: &EvalOptions,
) -> Result<f64> {
    cfg.validate()?;
    let n = cfg.num_visual();
    if cfg.visual_base() + n + offset + opts.max_new_tokens + 1 > cfg.max_seq_len {
        return Err(crate::error::Error::config(format!(
            "offset {offset} pushes position ids past max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let visual_ids = PositionIds(
        (0..n).map(|i| cfg.visual_base() + i + offset).collect(),
    );
    let threads = resolve_threads(opts);
    run_parallel(data.len(), threads, |i| {
        let ex = &data[i];
        let enc = encode_image(&ex.image, w, cfg)?;
        let text = [cfg.color_token(ex.query_color)];
        let mut state = prefill(
            &enc.visual,
            &visual_ids,
            &text,
            &sequential_ids(cfg.text_base(), text.len()),
            w,
            cfg,
            false,
        )?;
        let toks = generate_greedy(&mut state, opts.max_new_tokens, w, cfg)?;
        Ok(toks.first() == Some(&cfg.cell_token(ex.answer_cell)))
    })
}
