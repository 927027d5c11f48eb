use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use upaq::compressor::{compress_model_with_workers, CompressionProfile, SearchMode};
use upaq::cost::{AnalyticCost, CostModel, MeasuredCost};
use upaq::format::{self, COMPRESSED_MAGIC, DENSE_MAGIC};
use upaq::harness::{self, EvaluationReport, FixtureArch, REPORT_NOTE};
use upaq::inference::{forward, Activation};
use upaq::{CompressedModel, ModelGraph, UpaqError};

#[derive(Parser)]
#[command(
    name = "upaq",
    version,
    about = "Pattern pruning and mixed-precision quantization for conv nets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostKind {
    Analytic,
    Measured,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded fixture model and its 64 inputs.
    GenFixture {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
        /// Where to write the input batch.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Compress a dense model.
    Compress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "hck")]
        profile: String,
        /// Candidate patterns sampled per group.
        #[arg(long)]
        patterns: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = CostKind::Analytic)]
        cost: CostKind,
        /// Search threads; 0 uses one per core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Try every distinct pattern instead of sampling.
        #[arg(long)]
        exhaustive: bool,
        /// Inputs timed by the measured cost model.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a dense or compressed model on a batch.
    Run {
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a compressed model against its base.
    Evaluate {
        base: PathBuf,
        compressed: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Describe a model file.
    Inspect {
        model: PathBuf,
        /// Print root/leaf groups, one JSON object per line.
        #[arg(long)]
        groups: bool,
    },
}

enum AnyModel {
    Dense(ModelGraph),
    Compressed(CompressedModel),
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path)
        .map_err(UpaqError::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn load_any(path: &Path) -> anyhow::Result<AnyModel> {
    let bytes = read(path)?;
    let ctx = || format!("loading {}", path.display());
    if bytes.starts_with(COMPRESSED_MAGIC) {
        Ok(AnyModel::Compressed(
            format::compressed_from_bytes(&bytes).with_context(ctx)?,
        ))
    } else if bytes.starts_with(DENSE_MAGIC) {
        Ok(AnyModel::Dense(format::model_from_bytes(&bytes).with_context(ctx)?))
    } else {
        Err(UpaqError::Format("unrecognized magic".into())).with_context(ctx)
    }
}

fn load_dense(path: &Path) -> anyhow::Result<ModelGraph> {
    format::model_from_bytes(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_batch(path: &Path) -> anyhow::Result<Vec<Activation>> {
    harness::read_batch(path).with_context(|| format!("reading batch {}", path.display()))
}

fn emit(json: String, path: Option<&Path>) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, json + "\n")
            .map_err(UpaqError::from)
            .with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(std::io::stdout(), "{json}").map_err(UpaqError::from)?,
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenFixture {
            arch,
            seed,
            output,
            inputs,
        } => {
            let arch: FixtureArch = arch.parse()?;
            let (model, batch) = harness::gen_fixture(arch, seed)?;
            format::save_model(&model, &output).with_context(|| format!("writing {}", output.display()))?;
            if let Some(p) = inputs {
                harness::write_batch(&p, &batch).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Compress {
            input,
            output,
            profile,
            patterns,
            seed,
            cost,
            workers,
            exhaustive,
            inputs,
            report,
        } => {
            let model = load_dense(&input)?;
            let mut prof = CompressionProfile::by_name(&profile, seed)?;
            if let Some(p) = patterns {
                prof.candidates = p;
            }
            if exhaustive {
                prof.search = SearchMode::Exhaustive;
            }
            let cost_model: Box<dyn CostModel> = match cost {
                CostKind::Analytic => Box::new(AnalyticCost),
                CostKind::Measured => {
                    let batch = match inputs {
                        Some(p) => load_batch(&p)?,
                        None => harness::fixture_inputs(seed, model.input_shape),
                    };
                    Box::new(MeasuredCost {
                        inputs: batch.into_iter().take(4).collect(),
                        repeats: 1,
                    })
                }
            };
            let compressed = compress_model_with_workers(&model, &prof, cost_model.as_ref(), workers)?;
            format::save_compressed(&compressed, &output).with_context(|| format!("writing {}", output.display()))?;
            let summary = harness::compression_report(&model, &compressed, &prof, cost_model.name())?;
            emit(
                serde_json::to_string_pretty(&summary).map_err(UpaqError::from)?,
                report.as_deref(),
            )?;
        }
        Command::Run { model, inputs, out } => {
            let batch = load_batch(&inputs)?;
            let graph = match load_any(&model)? {
                AnyModel::Dense(m) => m,
                AnyModel::Compressed(c) => c.decompress()?,
            };
            harness::evaluate::check_inputs(graph.input_shape, &batch)?;
            let outputs = batch
                .iter()
                .map(|x| forward(&graph, x))
                .collect::<upaq::Result<Vec<_>>>()?;
            harness::write_batch(&out, &outputs).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Evaluate {
            base,
            compressed,
            inputs,
            output,
        } => {
            let base = load_dense(&base)?;
            let compressed = match load_any(&compressed)? {
                AnyModel::Compressed(c) => c,
                AnyModel::Dense(m) => harness::lossless_copy(&m),
            };
            let batch = load_batch(&inputs)?;
            let fidelity = harness::evaluate_fidelity(&base, &compressed, &batch)?;
            let report = EvaluationReport {
                note: REPORT_NOTE,
                fidelity: &fidelity,
            };
            emit(
                serde_json::to_string_pretty(&report).map_err(UpaqError::from)?,
                output.as_deref(),
            )?;
        }
        Command::Inspect { model, groups } => {
            let (graph, records) = match load_any(&model)? {
                AnyModel::Dense(m) => (m, None),
                AnyModel::Compressed(c) => (c.decompress()?, Some(c.groups)),
            };
            if groups {
                for g in upaq::grouping::find_root_groups(&graph) {
                    emit(serde_json::to_string(&g).map_err(UpaqError::from)?, None)?;
                }
            } else {
                let summary = serde_json::json!({
                    "name": graph.name,
                    "input_shape": graph.input_shape,
                    "layers": graph.layers.iter().map(|l| serde_json::json!({
                        "id": l.id,
                        "kind": l.kind,
                        "inputs": l.inputs,
                        "shape": l.weights.as_ref().map(|w| w.shape()),
                    })).collect::<Vec<_>>(),
                    "parameters": graph.parameter_count(),
                    "checksum": format::checksum(&graph)?,
                    "groups": records,
                });
                emit(serde_json::to_string_pretty(&summary).map_err(UpaqError::from)?, None)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("upaq: {err:#}");
            let code = err.downcast_ref::<UpaqError>().map_or(1, UpaqError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
