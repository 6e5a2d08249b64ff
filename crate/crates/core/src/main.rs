use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ffnspec::error::{Error, Result};
use ffnspec::ingest::Dtype;
use ffnspec::report::{self, AnalysisOptions, RunManifest, Solver};
use ffnspec::synth::{SpectrumFamily, SynthRun};

#[derive(Parser)]
#[command(
    name = "ffnspec",
    version,
    about = "Eigenspectrum diagnostics for FFN activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute metrics and heatmap grids for every (layer, step) cell.
    Analyze(RunArgs),
    /// Percent error of sub-sampled and low-rank runs against the exact run.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Token fractions to evaluate.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        /// Eigensolver ranks to evaluate.
        #[arg(long, value_delimiter = ',')]
        ranks: Vec<usize>,
        /// Optional `step,loss` table for correlation fidelity.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Regime labels and joint-trend signatures per cell.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        /// Trailing window, in logged steps, for trend signatures.
        #[arg(long, default_value_t = 3)]
        window: usize,
    },
    /// Pearson correlation of layer-averaged metrics with the loss.
    Correlate {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        loss: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write Gaussian dumps with prescribed pre/post spectra.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverName {
    Full,
    Randsvd,
    Lanczos,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dump_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1.0)]
    sample_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    solver: SolverName,
    /// Number of leading eigenvalues for randsvd and lanczos.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = ffnspec::eigen::DEFAULT_POWER_ITERS)]
    power_iters: usize,
    /// Lanczos steps; defaults to 8 × rank.
    #[arg(long)]
    lanczos_iters: Option<usize>,
    /// Also compute metrics within N sequence-position groups.
    #[arg(long, value_name = "N")]
    stratify: Option<usize>,
    /// JSON file overriding regime thresholds.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    chunk_rows: usize,
}

impl RunArgs {
    fn manifest(&self) -> Result<RunManifest> {
        let rank = || {
            self.rank
                .ok_or_else(|| Error::Argument("--rank is required for randsvd and lanczos".into()))
        };
        let solver = match self.solver {
            SolverName::Full => Solver::Full,
            SolverName::Randsvd => Solver::RandSvd {
                k: rank()?,
                oversample: ffnspec::eigen::DEFAULT_OVERSAMPLE,
                power_iters: self.power_iters,
            },
            SolverName::Lanczos => {
                let k = rank()?;
                Solver::Lanczos {
                    k,
                    max_iters: self.lanczos_iters.unwrap_or(8 * k),
                }
            }
        };
        let thresholds = match &self.thresholds {
            Some(p) => report::load_thresholds(p)?,
            None => Default::default(),
        };
        let manifest = RunManifest {
            dump_dir: self.dump_dir.clone(),
            layers: self.layers.clone(),
            steps: self.steps.clone(),
            options: AnalysisOptions {
                sample_fraction: self.sample_fraction,
                seed: self.seed,
                solver,
                stratify: self.stratify,
                chunk_rows: self.chunk_rows,
                thresholds,
            },
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: u32,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    steps: Vec<u64>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Sequence length; tokens per dump are batch × seq-len.
    #[arg(long, default_value_t = 400)]
    seq_len: u32,
    #[arg(long, default_value_t = 4)]
    batch: u32,
    /// Pre-activation spectrum family, e.g. `geometric:0.7` or `uniform:4`.
    #[arg(long, default_value = "geometric:0.7")]
    pre: SpectrumFamily,
    #[arg(long, default_value = "linear")]
    post: SpectrumFamily,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store payloads as f32 instead of f64.
    #[arg(long)]
    f32: bool,
}

fn synth(args: &SynthArgs) -> Result<serde_json::Value> {
    let run = SynthRun {
        layers: args.layers,
        steps: args.steps.clone(),
        dim: args.dim,
        batch: args.batch,
        seq_len: args.seq_len,
        pre: args.pre.clone(),
        post: args.post.clone(),
        seed: args.seed,
        dtype: if args.f32 { Dtype::F32 } else { Dtype::F64 },
    };
    let files = run.write(&args.out)?;
    Ok(json!({ "written": files, "out": args.out }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Analyze(a) => {
            let run = report::analyze(&a.manifest()?)?;
            report::write_analysis(&run, &a.out)?;
            Ok(report::summary_json(&run))
        }
        Command::Compare {
            run,
            fractions,
            ranks,
            loss,
        } => {
            if fractions.is_empty() && ranks.is_empty() {
                return Err(Error::Argument("give --fractions and/or --ranks".into()));
            }
            let cmp = report::compare(&run.manifest()?, &fractions, &ranks)?;
            let rows = cmp.rows();
            write(&run.out, "fidelity.csv", &report::fidelity_csv(&rows)?)?;
            if let Some(loss) = loss {
                let json = report::correlation_fidelity_json(&cmp, &report::load_loss(&loss)?);
                write(
                    &run.out,
                    "correlation_fidelity.json",
                    &serde_json::to_string_pretty(&json)?,
                )?;
            }
            Ok(json!({ "configurations": cmp.runs.len(), "rows": rows.len() }))
        }
        Command::Classify { run, window } => {
            let manifest = run.manifest()?;
            let analysis = report::analyze(&manifest)?;
            let regimes = report::classify(&analysis, &manifest.options.thresholds)?;
            let sigs = report::signatures(&analysis, window)?;
            report::write_classification(&regimes, &sigs, &run.out)?;
            Ok(json!({ "regimes": regimes.len(), "signatures": sigs.len() }))
        }
        Command::Correlate { metrics, loss, out } => report::correlate_files(&metrics, &loss, &out),
        Command::Synth(args) => synth(&args),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let write_err = |source| Error::Write {
        path: dir.join(name),
        source,
    };
    std::fs::create_dir_all(dir).map_err(write_err)?;
    std::fs::write(dir.join(name), contents).map_err(write_err)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::from(2)
        }
    }
}
