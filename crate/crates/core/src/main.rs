// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use prelab::io::{self, ReportOptions, RunConfig};
use prelab::model::AnchorSource;
use prelab::par::{init_threads_from_env, Exec};
use prelab::synth::{ImageSpec, Split};

#[derive(Parser)]
#[command(name = "prelab", version, about = "Toy multimodal decoder lab")]
struct Cli {
    /// Run every batch-level loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model (baseline when the predictive weight is 0).
    Train(Box<TrainArgs>),
    /// Dump visual hidden states of a trained run.
    Dump(DumpArgs),
    /// Compute per-layer diagnostics from dumped hidden states.
    Metrics(MetricsArgs),
    /// Compare a baseline run against a regularized one.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--lambda 0`.
    #[arg(long, conflicts_with = "lambda")]
    baseline: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    cosine: Option<bool>,
    /// Gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    diag_every: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_l: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    target_layer: Option<usize>,
    #[arg(long)]
    anchor: Option<AnchorSource>,
    #[arg(long)]
    max_answer_len: Option<usize>,
    #[arg(long)]
    pos_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, probe-train or probe-test; both probe splits when omitted.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Probe-test image used for the similarity heatmaps.
    #[arg(long, default_value_t = 0)]
    example: usize,
    /// Patch the similarity maps are measured from.
    #[arg(long, default_value_t = 0)]
    patch: usize,
}

macro_rules! overlay {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overlay!(c.dataset, a.data.clone());
    overlay!(c.out_dir, a.out.clone());
    overlay!(c.steps, a.steps);
    overlay!(c.batch_size, a.batch_size);
    overlay!(c.lr, a.lr);
    overlay!(c.weight_decay, a.weight_decay);
    overlay!(c.warmup_frac, a.warmup_frac);
    overlay!(c.cosine, a.cosine);
    overlay!(c.diag_every, a.diag_every);
    if let Some(g) = a.grad_clip {
        c.grad_clip = (g != 0.0).then_some(g);
    }
    let m = &mut c.model;
    overlay!(m.grid, a.grid);
    overlay!(m.patch, a.patch);
    overlay!(m.d_v, a.d_v);
    overlay!(m.d_l, a.d_l);
    overlay!(m.layers, a.layers);
    overlay!(m.heads, a.heads);
    overlay!(m.d_ff, a.d_ff);
    overlay!(m.lambda, a.lambda);
    overlay!(m.anchor, a.anchor);
    overlay!(m.max_answer_len, a.max_answer_len);
    overlay!(m.pos_scale, a.pos_scale);
    overlay!(m.seed, a.seed);
    if a.target_layer.is_some() {
        m.target_layer = a.target_layer;
    }
    if a.baseline {
        m.lambda = 0.0;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    init_threads_from_env()?;
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match cli.command {
        Command::GenData(a) => {
            let mut spec = ImageSpec::default();
            overlay!(spec.grid, a.grid);
            overlay!(spec.patch, a.patch);
            let m = io::gen_data(a.n, a.seed, &spec, &a.out, exec)?;
            println!(
                "wrote {} examples (train {}, probe-train {}, probe-test {}) to {} with seed {}",
                m.n,
                m.counts.train,
                m.counts.probe_train,
                m.counts.probe_test,
                a.out.display(),
                m.seed
            );
        }
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            let every = a.log_every.max(1);
            let (_, log) = io::cmd_train(&cfg, exec, |r| {
                if r.step % every == 0 || r.step == 1 {
                    let pre = r.pre.map_or_else(|| "-".to_string(), |p| format!("{p:.4}"));
                    eprintln!(
                        "step {:>5}  lm {:.4}  pre {pre}  total {:.4}  |g| {:.3}  lr {:.2e}",
                        r.step, r.lm, r.total, r.grad_norm, r.lr
                    );
                }
            })?;
            let last = log.last().context("no steps were run")?;
            println!(
                "trained {} steps into {} (final lm {:.4}, config {})",
                log.len(),
                cfg.out_dir.display(),
                last.lm,
                &cfg.hash()[..12]
            );
        }
        Command::Dump(a) => {
            let splits = match &a.split {
                Some(s) => vec![Split::parse(s)?],
                None => vec![Split::ProbeTrain, Split::ProbeTest],
            };
            for s in splits {
                let path = io::cmd_dump(&a.run, &a.data, s, exec)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Metrics(a) => {
            let out = io::cmd_metrics(&a.run, &a.data, exec)?;
            println!("layer  probe_acc  contrast  eff_dim  redundancy");
            for r in out.csv_rows() {
                println!(
                    "{:>5}  {:>9.4}  {:>8.4}  {:>7}  {:>10.4}",
                    r.layer, r.probe_acc, r.contrast, r.eff_dim, r.redundancy
                );
            }
        }
        Command::Report(a) => {
            let opts = ReportOptions {
                example: a.example,
                patch: a.patch,
            };
            let files = io::cmd_report(&a.baseline, &a.pre, &a.data, &a.out, &opts)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .downcast_ref::<prelab::Error>()
                .is_some_and(prelab::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
