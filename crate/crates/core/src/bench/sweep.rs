//! Cross-method / cross-ratio sweeps and report serialization.
//!
//! The JSON report has two top-level sections: `results`, which is
//! byte-deterministic for a given config and seeds, and `timing`, which
//! holds machine-dependent wall-clock numbers. Determinism checks
//! compare the `results` section only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::data::{generate_dataset, RecExample};
use crate::bench::eval::{evaluate, EvalOptions};
use crate::bench::flops::{estimate_flops, prefill_seq_len};
use crate::bench::train::{train_model, TrainConfig};
use crate::bench::ttft::{measure_ttft, TtftOptions, TtftStats};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::prune::{retained_count, Alignment, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub strategies: Vec<Strategy>,
    pub ratios: Vec<f64>,
    pub alignments: Vec<Alignment>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            strategies: vec![
                Strategy::ClsVisual,
                Strategy::TextVisual,
                Strategy::Random,
                Strategy::Spatial,
            ],
            ratios: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            alignments: vec![Alignment::Gap, Alignment::Shifted],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("sweep needs at least one strategy"));
        }
        for &r in &self.ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("sweep ratio {r} outside (0, 1]")));
            }
        }
        if self.alignments.is_empty() {
            return Err(Error::config("sweep needs at least one alignment"));
        }
        Ok(())
    }
}

/// Everything a full benchmark run needs: model shape, data sizes,
/// training hyperparameters, sweep grid, seeds, and output paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_train_examples")]
    pub train_examples: usize,
    #[serde(default = "default_val_examples")]
    pub val_examples: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub eval_seed: u64,
    #[serde(default)]
    pub sweep: SweepSpec,
    /// Measure TTFT per sweep row; off by default (timing dominates).
    #[serde(default)]
    pub measure_ttft: bool,
    #[serde(default)]
    pub ttft: TtftOptions,
    pub report_json: Option<PathBuf>,
    pub report_csv: Option<PathBuf>,
}

fn default_train_examples() -> usize {
    2048
}

fn default_val_examples() -> usize {
    512
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_examples: default_train_examples(),
            val_examples: default_val_examples(),
            data_seed: 0,
            eval_seed: 0,
            sweep: SweepSpec::default(),
            measure_ttft: false,
            ttft: TtftOptions::default(),
            report_json: None,
            report_csv: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sweep.validate()?;
        if self.train_examples == 0 {
            return Err(Error::config("train_examples must be >= 1"));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let run: RunConfig = serde_json::from_str(&text)?;
        run.validate()?;
        Ok(run)
    }
}

/// One sweep grid point. `delta_vs_baseline` is Eq.-8-style:
/// `accuracy(gap) − accuracy(shifted)` for the same strategy and ratio,
/// recorded on both rows of the pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub strategy: Strategy,
    pub ratio: f64,
    pub alignment: Alignment,
    pub accuracy: f64,
    /// accuracy / unpruned baseline accuracy.
    pub normalized_accuracy: f64,
    /// 100 * retained / total visual tokens.
    pub token_percent: f64,
    pub delta_vs_baseline: Option<f64>,
    pub flops_estimate: u64,
    pub seed: u64,
}

/// Deterministic section of the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResults {
    pub model: ModelConfig,
    pub eval_seed: u64,
    pub val_examples: usize,
    pub baseline_accuracy: f64,
    pub rows: Vec<EvalRow>,
}

/// Machine-dependent section, excluded from determinism comparisons.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TimingSection {
    /// Parallel to `results.rows`; `None` when timing was skipped.
    pub ttft_ms: Vec<Option<TtftStats>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub results: SweepResults,
    pub timing: TimingSection,
}

impl SweepReport {
    /// Canonical bytes of the deterministic section.
    pub fn results_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.results)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Flat table mirroring `results.rows`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
        wtr.write_record([
            "strategy",
            "ratio",
            "alignment",
            "accuracy",
            "normalized_accuracy",
            "token_percent",
            "delta_vs_baseline",
            "flops_estimate",
            "seed",
        ])
        .map_err(csv_err)?;
        for row in &self.results.rows {
            wtr.write_record([
                row.strategy.to_string(),
                format!("{}", row.ratio),
                row.alignment.to_string(),
                format!("{}", row.accuracy),
                format!("{}", row.normalized_accuracy),
                format!("{}", row.token_percent),
                row.delta_vs_baseline.map_or(String::new(), |d| format!("{d}")),
                format!("{}", row.flops_estimate),
                format!("{}", row.seed),
            ])
            .map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// Cartesian sweep against already-trained weights.
pub fn sweep_trained(
    w: &ModelWeights,
    cfg: &ModelConfig,
    data: &[RecExample],
    spec: &SweepSpec,
    eval_seed: u64,
    ttft: Option<&TtftOptions>,
) -> Result<SweepReport> {
    spec.validate()?;
    let opts = EvalOptions { seed: eval_seed, ..Default::default() };
    let baseline = evaluate(w, cfg, data, Strategy::None, 1.0, Alignment::Gap, &opts)?;
    let n = cfg.num_visual();
    let mut rows = Vec::new();
    let mut timing = TimingSection::default();
    for &strategy in &spec.strategies {
        for &ratio in &spec.ratios {
            // accuracy per alignment first, so the gap/shifted delta can
            // be attached to both rows
            let mut accs = Vec::with_capacity(spec.alignments.len());
            for &alignment in &spec.alignments {
                if alignment == Alignment::Permuted && (ratio - 1.0).abs() > 1e-12 {
                    accs.push(None);
                    continue;
                }
                accs.push(Some(evaluate(w, cfg, data, strategy, ratio, alignment, &opts)?));
            }
            let find = |al: Alignment| {
                spec.alignments
                    .iter()
                    .position(|&a| a == al)
                    .and_then(|i| accs[i])
            };
            let delta = match (find(Alignment::Gap), find(Alignment::Shifted)) {
                (Some(g), Some(s)) => Some(g - s),
                _ => None,
            };
            let k = retained_count(n, ratio)?;
            for (&alignment, acc) in spec.alignments.iter().zip(&accs) {
                let Some(acc) = *acc else { continue };
                let kept = if alignment == Alignment::Permuted { n } else { k };
                let seq = prefill_seq_len(
                    cfg,
                    if alignment == Alignment::Permuted { Strategy::None } else { strategy },
                    ratio,
                    1,
                )?;
                rows.push(EvalRow {
                    strategy,
                    ratio,
                    alignment,
                    accuracy: acc,
                    normalized_accuracy: if baseline > 0.0 { acc / baseline } else { f64::NAN },
                    token_percent: 100.0 * kept as f64 / n as f64,
                    delta_vs_baseline: delta,
                    flops_estimate: estimate_flops(cfg, seq)?,
                    seed: eval_seed,
                });
                timing.ttft_ms.push(match ttft {
                    Some(topts) => {
                        let sample = &data[..data.len().min(8)];
                        Some(measure_ttft(w, cfg, sample, strategy, ratio, alignment, topts)?)
                    }
                    None => None,
                });
            }
        }
    }
    Ok(SweepReport {
        results: SweepResults {
            model: cfg.clone(),
            eval_seed,
            val_examples: data.len(),
            baseline_accuracy: baseline,
            rows,
        },
        timing,
    })
}

/// End-to-end run: generate data, train, sweep, write any configured
/// report files. Returns the trained weights alongside the report.
pub fn run_full(run: &RunConfig) -> Result<(ModelWeights, SweepReport)> {
    run.validate()?;
    let mut rng = crate::math::Rng::new(run.data_seed);
    let train_set = generate_dataset(run.train_examples, &run.model, &mut rng)?;
    let val_set = if run.val_examples > 0 {
        generate_dataset(run.val_examples, &run.model, &mut rng)?
    } else {
        Vec::new()
    };
    let (weights, _) = train_model(&train_set, &val_set, &run.model, &run.train)?;
    let ttft = run.measure_ttft.then_some(&run.ttft);
    let report = sweep_trained(&weights, &run.model, &val_set, &run.sweep, run.eval_seed, ttft)?;
    if let Some(p) = &run.report_json {
        report.write_json(p)?;
    }
    if let Some(p) = &run.report_csv {
        report.write_csv(p)?;
    }
    Ok((weights, report))
}
