//! Command-line front end. Every subcommand talks to the HTTP service;
//! with no `--server` given, an in-process server is started on an
//! ephemeral port so the tool works standalone.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prunebench_client::Client;
use prunebench_core::api::{
    DatasetRef, EvalRequest, GenDataRequest, GenSpec, ProbeRequest, SweepRequest, TrainRequest,
    TtftRequest,
};
use prunebench_core::bench::data::{read_jsonl, write_jsonl};
use prunebench_core::bench::sweep::RunConfig;
use prunebench_core::bench::ttft::TtftOptions;
use prunebench_core::probe::ProbeOptions;
use prunebench_core::prune::{Alignment, Strategy};

#[derive(Parser)]
#[command(name = "prunebench", version, about = "Visual-token pruning benchmark")]
struct Cli {
    /// Base URL of a running service; omit to run one in-process.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Evaluation dataset (JSON lines); generated server-side if omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Examples to generate when --data is not given.
    #[arg(long, default_value_t = 512)]
    count: usize,
    /// Generation seed when --data is not given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn to_ref(&self) -> Result<DatasetRef> {
        Ok(match &self.data {
            Some(p) => DatasetRef {
                examples: Some(read_jsonl(p).with_context(|| format!("reading {}", p.display()))?),
                generate: None,
            },
            None => DatasetRef {
                examples: None,
                generate: Some(GenSpec { count: self.count, seed: self.seed }),
            },
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as JSON lines.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path (.jsonl).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save its checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under one pruning configuration.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Trained checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "none")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long, default_value = "gap")]
        alignment: Alignment,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Full cross-method / cross-ratio sweep; writes JSON + CSV reports.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Reuse a checkpoint instead of training first.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Linear position probes over all encoder layers.
    Probe {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time-to-first-token measurement.
    BenchTtft {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "none")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long, default_value = "gap")]
        alignment: Alignment,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(path) => RunConfig::from_json_file(path)
            .with_context(|| format!("loading config {}", path.display())),
        None => Ok(RunConfig::default()),
    }
}

async fn connect(server: &Option<String>) -> Result<Client> {
    let base = match server {
        Some(url) => url.clone(),
        None => {
            let (addr, _handle) = prunebench_server::spawn("127.0.0.1:0".parse().unwrap())
                .await
                .context("starting in-process server")?;
            format!("http://{addr}")
        }
    };
    let client = Client::new(base);
    client.health().await.context("service not reachable")?;
    Ok(client)
}

async fn upload(client: &Client, path: &PathBuf) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(client.upload_checkpoint(bytes).await?.model_id)
}

async fn run(cli: Cli) -> Result<()> {
    let client = connect(&cli.server).await?;
    match cli.command {
        Command::GenData { config, count, seed, out } => {
            let run = load_config(&config)?;
            let examples = client
                .gen_data(&GenDataRequest { model: run.model, count, seed })
                .await?;
            write_jsonl(&examples, &out)?;
            println!("wrote {} examples to {}", examples.len(), out.display());
        }
        Command::Train { config, out } => {
            let run = load_config(&config)?;
            let resp = client
                .train(&TrainRequest {
                    model: run.model,
                    train: run.train,
                    train_examples: run.train_examples,
                    val_examples: run.val_examples,
                    data_seed: run.data_seed,
                })
                .await?;
            let bytes = client.download_checkpoint(&resp.model_id).await?;
            std::fs::write(&out, bytes)
                .with_context(|| format!("writing checkpoint {}", out.display()))?;
            println!(
                "trained: final loss {:.4}, train acc {:.3}, val acc {:.3}; checkpoint -> {}",
                resp.summary.epoch_losses.last().copied().unwrap_or(f64::NAN),
                resp.summary.final_train_accuracy,
                resp.summary.final_val_accuracy,
                out.display()
            );
        }
        Command::Eval { config, model, strategy, ratio, alignment, data } => {
            let run = load_config(&config)?;
            let model_id = upload(&client, &model).await?;
            let resp = client
                .eval(&EvalRequest {
                    model_id,
                    dataset: data.to_ref()?,
                    strategy,
                    ratio,
                    alignment,
                    seed: run.eval_seed,
                })
                .await?;
            println!(
                "accuracy {:.4} ({} examples, {strategy} ratio {ratio} {alignment})",
                resp.accuracy, resp.examples
            );
        }
        Command::Sweep { config, model } => {
            let run = load_config(&config)?;
            let model_id = match &model {
                Some(path) => upload(&client, path).await?,
                None => {
                    eprintln!(
                        "training {} examples for {} epochs...",
                        run.train_examples, run.train.epochs
                    );
                    client
                        .train(&TrainRequest {
                            model: run.model.clone(),
                            train: run.train.clone(),
                            train_examples: run.train_examples,
                            val_examples: run.val_examples,
                            data_seed: run.data_seed,
                        })
                        .await?
                        .model_id
                }
            };
            let report = client
                .sweep(&SweepRequest {
                    model_id,
                    dataset: DatasetRef {
                        examples: None,
                        generate: Some(GenSpec { count: run.val_examples.max(1), seed: run.data_seed }),
                    },
                    sweep: run.sweep,
                    eval_seed: run.eval_seed,
                    measure_ttft: run.measure_ttft,
                    ttft: run.ttft,
                })
                .await?;
            let json_path = run.report_json.unwrap_or_else(|| PathBuf::from("report.json"));
            let csv_path = run.report_csv.unwrap_or_else(|| PathBuf::from("report.csv"));
            report.write_json(&json_path)?;
            report.write_csv(&csv_path)?;
            println!(
                "sweep: {} rows, baseline accuracy {:.4}; wrote {} and {}",
                report.results.rows.len(),
                report.results.baseline_accuracy,
                json_path.display(),
                csv_path.display()
            );
        }
        Command::Probe { config, model, data, out } => {
            let _ = load_config(&config)?;
            let model_id = upload(&client, &model).await?;
            let report = client
                .probe(&ProbeRequest {
                    model_id,
                    dataset: data.to_ref()?,
                    options: ProbeOptions::default(),
                })
                .await?;
            let json = report.to_json()?;
            match out {
                Some(p) => {
                    std::fs::write(&p, json)?;
                    println!("wrote probe report to {}", p.display());
                }
                None => println!("{json}"),
            }
        }
        Command::BenchTtft { config, model, strategy, ratio, alignment, runs, warmup, data } => {
            let run = load_config(&config)?;
            let model_id = upload(&client, &model).await?;
            if runs == 0 {
                bail!("--runs must be at least 1");
            }
            let stats = client
                .ttft(&TtftRequest {
                    model_id,
                    dataset: data.to_ref()?,
                    strategy,
                    ratio,
                    alignment,
                    options: TtftOptions { warmup, runs, seed: run.eval_seed },
                })
                .await?;
            println!(
                "ttft mean {:.3} ms  p50 {:.3} ms  min {:.3} ms  max {:.3} ms  cv {:.3} ({} runs)",
                stats.mean_ms, stats.p50_ms, stats.min_ms, stats.max_ms, stats.cv, stats.runs
            );
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli).await {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
