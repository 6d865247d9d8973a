use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmtr::data::Benchmark;
use cmtr::training::{write_text, Trainer};
use cmtr::{Result, Scalar};
use cmtr_harness::export::{check_compatible, export_embeddings, ExportSplit};
use cmtr_harness::gradsuite::{self, DEFAULT_SEEDS};
use cmtr_harness::runner::{evaluate_model, run_cell, run_experiment, SPEC_FILE};
use cmtr_harness::spec::{Axis, ExperimentSpec, Precision, ABLATION_ROWS};
use cmtr_harness::table::{ResultTable, RESULTS_FILE};

#[derive(Parser)]
#[command(name = "cmtr", version, about = "Train, evaluate and sweep cross-modality retrieval models on the toy benchmark")]
struct Cli {
    /// Log progress (same as RUST_LOG=info).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML); omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed or comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Sweep value of the spec's axis to apply.
        #[arg(long)]
        value: Option<String>,
    },
    /// Evaluate a checkpoint on the test identities.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every ranked list to rankings.jsonl.
        #[arg(long)]
        rankings: bool,
    },
    /// Run the five-row component grid over the seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Run one sweep axis over the seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Option<Axis>,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Write post-neck features and labels of one split.
    ExportEmbeddings {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: ExportSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every op and loss.
    GradCheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_spec(config: Option<&Path>) -> Result<ExperimentSpec> {
    match config {
        Some(p) => ExperimentSpec::load(p),
        None => Ok(ExperimentSpec::default()),
    }
}

fn apply_common(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = load_spec(common.config.as_deref())?;
    if !common.seed.is_empty() {
        spec.seeds = common.seed.clone();
    }
    if let Some(j) = common.jobs {
        spec.jobs = j;
    }
    Ok(spec)
}

fn print_table(table: &ResultTable) {
    println!("{:<18} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}  status", table.axis, "seed", "R1", "R10", "R20", "mAP", "mINP");
    for row in table.rows() {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        println!(
            "{:<18} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}  {}",
            row.value,
            row.seed,
            pct(row.rank1),
            pct(row.rank10),
            pct(row.rank20),
            pct(row.map),
            pct(row.minp),
            row.status
        );
    }
}

/// Runs the spec and reports; failing cells or invariants give exit code 1.
fn run_grid(spec: &ExperimentSpec, out: &Path) -> Result<ExitCode> {
    let table = run_experiment(spec, Some(out))?;
    print_table(&table);
    println!("wrote {}", out.join(RESULTS_FILE).display());
    let problems = table.check_invariants();
    for p in &problems {
        eprintln!("invariant violated: {}", p);
    }
    if table.failures() > 0 {
        eprintln!("{} cell(s) failed", table.failures());
    }
    Ok(if table.failures() == 0 && problems.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_trainer<T: Scalar>(spec: &ExperimentSpec, checkpoint: &Path) -> Result<(Trainer<T>, Benchmark)> {
    let trainer = Trainer::<T>::load(checkpoint)?;
    check_compatible(&trainer, &spec.benchmark)?;
    Ok((trainer, Benchmark::generate(&spec.benchmark)?))
}

fn eval_checkpoint<T: Scalar>(spec: &ExperimentSpec, checkpoint: &Path, out: &Path, rankings: bool) -> Result<()>
where
    cmtr::model::Cmtr<T>: Sync,
{
    let (trainer, bench) = load_trainer::<T>(spec, checkpoint)?;
    let id = checkpoint.display().to_string();
    let report = evaluate_model(&trainer.model, &trainer.store, &bench, &spec.eval, &id, Some(out), rankings)?;
    print!("{}", report.summary());
    Ok(())
}

fn export<T: Scalar>(spec: &ExperimentSpec, checkpoint: &Path, split: ExportSplit, out: &Path) -> Result<()>
where
    cmtr::model::Cmtr<T>: Sync,
{
    let (trainer, bench) = load_trainer::<T>(spec, checkpoint)?;
    let images = split.images(&bench);
    let features = export_embeddings(&trainer.model, &trainer.store, &images, out)?;
    println!("wrote {} embeddings of dimension {} to {}", features.len(), features.first().map_or(0, Vec::len), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common, value } => {
            let spec = apply_common(&common)?;
            let value = value.unwrap_or_else(|| spec.values()[0].clone());
            let seed = spec.seeds[0];
            if spec.seeds.len() > 1 {
                log::warn!("train uses the first seed ({}); use sweep for several", seed);
            }
            std::fs::create_dir_all(&common.out)?;
            let bench = Benchmark::generate(&spec.benchmark)?;
            let scores = run_cell(&spec, &bench, &value, seed, Some(&common.out))?;
            println!(
                "R1 {:.2}  R10 {:.2}  R20 {:.2}  mAP {:.2}  mINP {:.2}",
                100.0 * scores.rank1,
                100.0 * scores.rank10,
                100.0 * scores.rank20,
                100.0 * scores.map,
                100.0 * scores.minp
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { config, checkpoint, out, rankings } => {
            let spec = load_spec(config.as_deref())?;
            std::fs::create_dir_all(&out)?;
            write_text(&out.join(SPEC_FILE), &spec.to_toml()?)?;
            match spec.precision {
                Precision::F32 => eval_checkpoint::<f32>(&spec, &checkpoint, &out, rankings)?,
                Precision::F64 => eval_checkpoint::<f64>(&spec, &checkpoint, &out, rankings)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { common } => {
            let mut spec = apply_common(&common)?;
            spec.sweep.axis = Axis::Ablation;
            spec.sweep.values = ABLATION_ROWS.iter().map(|s| s.to_string()).collect();
            run_grid(&spec, &common.out)
        }
        Command::Sweep { common, axis, values } => {
            let mut spec = apply_common(&common)?;
            if let Some(axis) = axis {
                if axis != spec.sweep.axis {
                    spec.sweep.values.clear();
                }
                spec.sweep.axis = axis;
            }
            if !values.is_empty() {
                spec.sweep.values = values;
            }
            run_grid(&spec, &common.out)
        }
        Command::ExportEmbeddings { config, checkpoint, split, out } => {
            let spec = load_spec(config.as_deref())?;
            match spec.precision {
                Precision::F32 => export::<f32>(&spec, &checkpoint, split, &out)?,
                Precision::F64 => export::<f64>(&spec, &checkpoint, split, &out)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck { seeds, out } => {
            let results = gradsuite::run_suite(seeds)?;
            let text = gradsuite::format_results(&results);
            print!("{}", text);
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                write_text(&out.join("gradcheck.txt"), &text)?;
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                eprintln!("{} case(s) above tolerance {:e}", failed, gradsuite::TOLERANCE);
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}
