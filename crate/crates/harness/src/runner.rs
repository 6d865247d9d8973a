//! Trains and evaluates sweep cells, each in its own output directory.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cmtr::data::Benchmark;
use cmtr::eval::{run_protocol, write_rankings, EvalProtocol, EvalReport, ModelExtractor};
use cmtr::model::Cmtr;
use cmtr::training::{write_text, TrainConfig, Trainer};
use cmtr::{CmtrError, Result, Scalar};

use crate::spec::{ExperimentSpec, Precision};
use crate::table::{CellResult, Outcome, ResultTable, Scores};

pub const SPEC_FILE: &str = "experiment.toml";
pub const REPORT_FILE: &str = "report.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const RANKINGS_FILE: &str = "rankings.jsonl";

/// Directory-safe form of a sweep value (`me+mac` -> `me_mac`).
pub fn sanitize(value: &str) -> String {
    value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub fn cell_dir(out: &Path, spec: &ExperimentSpec, value: &str, seed: u64) -> PathBuf {
    out.join(format!("{}-{}", spec.sweep.axis, sanitize(value))).join(format!("seed{}", seed))
}

/// The spec that reruns a single cell in isolation.
pub fn cell_spec(spec: &ExperimentSpec, value: &str, seed: u64) -> ExperimentSpec {
    let mut s = spec.clone();
    s.seeds = vec![seed];
    s.jobs = 1;
    s.sweep.values = vec![value.to_string()];
    s
}

/// Evaluates a trained model on the benchmark's test identities, writing
/// `report.txt`, `eval.csv` and optionally the ranked lists under `dir`.
pub fn evaluate_model<T: Scalar>(
    model: &Cmtr<T>,
    store: &cmtr::numerics::ParamStore<T>,
    bench: &Benchmark,
    protocol: &EvalProtocol,
    checkpoint: &str,
    dir: Option<&Path>,
    keep_rankings: bool,
) -> Result<EvalReport>
where
    Cmtr<T>: Sync,
{
    let mut extractor = ModelExtractor::new(model, store);
    extractor.id = checkpoint.to_string();
    let (report, rankings) = run_protocol(&extractor, &bench.test_images(), protocol, keep_rankings)?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        report.save_csv(dir.join(EVAL_FILE))?;
        write_text(&dir.join(REPORT_FILE), &report.summary())?;
        if keep_rankings {
            write_rankings(dir.join(RANKINGS_FILE), &rankings)?;
        }
    }
    Ok(report)
}

fn train_and_eval<T: Scalar>(cfg: TrainConfig, spec: &ExperimentSpec, bench: &Benchmark, dir: Option<&Path>) -> Result<Scores>
where
    Cmtr<T>: Sync,
{
    let mut trainer = Trainer::<T>::new(cfg)?;
    trainer.run(&bench.train, dir)?;
    let id = format!("epoch{}", trainer.epoch);
    let report = evaluate_model(&trainer.model, &trainer.store, bench, &spec.eval, &id, dir, false)?;
    Ok(Scores::from(&report.mean))
}

/// Trains and evaluates one `(value, seed)` cell. With `dir`, the cell's
/// spec, step log, checkpoints and reports are written there.
pub fn run_cell(spec: &ExperimentSpec, bench: &Benchmark, value: &str, seed: u64, dir: Option<&Path>) -> Result<Scores> {
    let cfg = spec.resolve(value, seed)?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        write_text(&dir.join(SPEC_FILE), &cell_spec(spec, value, seed).to_toml()?)?;
    }
    match spec.precision {
        Precision::F32 => train_and_eval::<f32>(cfg, spec, bench, dir),
        Precision::F64 => train_and_eval::<f64>(cfg, spec, bench, dir),
    }
}

/// Runs every `(value, seed)` cell of the spec, `spec.jobs` at a time.
/// Failed cells are marked in the table instead of aborting the sweep.
/// With `out`, writes the resolved spec, per-cell directories and
/// `results.csv`.
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ResultTable> {
    spec.validate()?;
    let bench = Benchmark::generate(&spec.benchmark)?;
    let mut resolved = spec.clone();
    resolved.sweep.values = spec.values();
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_text(&out.join(SPEC_FILE), &resolved.to_toml()?)?;
    }

    let cells: Vec<(String, u64)> =
        resolved.sweep.values.iter().flat_map(|v| spec.seeds.iter().map(move |&s| (v.clone(), s))).collect();
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((value, seed)) = cells.get(i) else { break };
        let dir = out.map(|o| cell_dir(o, &resolved, value, *seed));
        log::info!("cell {}={} seed {} started", resolved.sweep.axis, value, seed);
        let outcome = match catch_unwind(AssertUnwindSafe(|| run_cell(&resolved, &bench, value, *seed, dir.as_deref()))) {
            Ok(Ok(scores)) => Outcome::Ok(scores),
            Ok(Err(e)) => Outcome::Failed(e.to_string()),
            Err(panic) => Outcome::Failed(format!(
                "panic: {}",
                panic.downcast_ref::<String>().map(String::as_str).or(panic.downcast_ref::<&str>().copied()).unwrap_or("?")
            )),
        };
        match &outcome {
            Outcome::Ok(s) => log::info!("cell {}={} seed {}: R1 {:.4} mAP {:.4}", resolved.sweep.axis, value, seed, s.rank1, s.map),
            Outcome::Failed(msg) => log::error!("cell {}={} seed {} failed: {}", resolved.sweep.axis, value, seed, msg),
        }
        let seq_len = resolved.resolve(value, *seed).and_then(|c| ExperimentSpec::seq_len(&c)).unwrap_or(0);
        results.lock().expect("results lock")[i] = Some(CellResult { value: value.clone(), seed: *seed, seq_len, outcome });
    };
    std::thread::scope(|s| {
        for _ in 0..spec.jobs.min(cells.len()) {
            s.spawn(&worker);
        }
    });

    let cells = results.into_inner().map_err(|_| CmtrError::Contract("worker poisoned the results".into()))?;
    let table = ResultTable {
        axis: spec.sweep.axis.to_string(),
        cells: cells.into_iter().map(|c| c.expect("every cell runs")).collect(),
    };
    if let Some(out) = out {
        table.save(out)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_names() {
        assert_eq!(sanitize("me+mac+maid"), "me_mac_maid");
        assert_eq!(sanitize("identity:l1"), "identity_l1");
        assert_eq!(sanitize("0.5"), "0.5");
        let spec = ExperimentSpec::default();
        assert_eq!(cell_dir(Path::new("o"), &spec, "default", 2), Path::new("o/none-default/seed2"));
    }
}
