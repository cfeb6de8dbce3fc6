//! The `pnptune` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baselines::Baseline;
use crate::dataset::{Counters, DatasetError, MachineProfile, MeasurementDb, Task};
use crate::graph::{build_graph, export_graph};
use crate::mir::{parse_named, Family};
use crate::nn::{checkpoint_sidecar, load_checkpoint, save_checkpoint, Checkpoint, NnError};
use crate::par::Execution;
use crate::simulator::SimParams;
use crate::tuner::{
    default_sizes, evaluate_baselines, evaluate_loocv, evaluate_unseen_cap, extras_for, generate_corpus,
    label_dataset, predict, read_corpus, sweep_all, train_on_dataset, write_corpus, Corpus, EvalReport, LabeledDataset,
    TrainConfig, TunerError,
};

#[derive(Debug, Parser)]
#[command(name = "pnptune", version, about = "Graph-based tuning of parallel-region runtime configurations under power caps")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Emit a synthetic MIR corpus.
    Gen {
        /// Comma-separated families, default all.
        #[arg(long, value_delimiter = ',')]
        families: Vec<Family>,
        /// Comma-separated sizes, default 1..5.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Convert one MIR file to the graph interchange format.
    Graph {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate every configuration of every corpus region.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        machine: MachineArg,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive training labels from a measurement database.
    Label {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a labeled dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: Task,
        #[command(flatten)]
        opts: TrainArgs,
        #[arg(long)]
        freeze_gnn: bool,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-application-out evaluation of the model and reference tuners.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        task: Task,
        #[command(flatten)]
        opts: TrainArgs,
        /// Comma-separated reference tuners.
        #[arg(long, value_delimiter = ',')]
        baselines: Vec<Baseline>,
        /// Only evaluate the reference tuners.
        #[arg(long)]
        no_model: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Leave-one-application-out evaluation at a power cap withheld from training.
    EvalUnseenCap {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        hold_out: u32,
        #[command(flatten)]
        opts: TrainArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Choose a configuration for one MIR region.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        /// Default-configuration counters L1,L2,L3,instructions,branch-misses.
        #[arg(long, value_delimiter = ',')]
        counters: Option<Vec<f64>>,
    },
    /// Merge evaluation CSVs into summary tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct MachineArg {
    /// Machine profile JSON, or `skylake` / `haswell` for the shipped ones.
    #[arg(long)]
    machine: String,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[command(flatten)]
    machine: MachineArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    use_counters: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainArgs {
    fn config(&self, task: Task, exec: Execution) -> TrainConfig {
        let base = TrainConfig::new(task, self.seed);
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr.unwrap_or(base.lr),
            use_extras: self.use_counters,
            exec,
            ..base
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<TunerError> for CliError {
    fn from(e: TunerError) -> Self {
        match e {
            TunerError::Nn(NnError::ShapeMismatch(_) | NnError::InvalidSpec(_)) => CliError::Internal(e.to_string()),
            TunerError::ZeroEpochs | TunerError::ZeroBatch | TunerError::ExtrasRequired => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::from(TunerError::from(e))
            }
        }
    )*};
}
data_from!(DatasetError, NnError, crate::mir::MirError, crate::graph::GraphError, serde_json::Error);

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_machine(arg: &MachineArg) -> Result<MachineProfile, CliError> {
    let path = Path::new(&arg.machine);
    match arg.machine.as_str() {
        "skylake" if !path.exists() => Ok(MachineProfile::skylake()),
        "haswell" if !path.exists() => Ok(MachineProfile::haswell()),
        _ => Ok(MachineProfile::load(path)?),
    }
}

fn load_corpus(data: &DataArgs) -> Result<Corpus, CliError> {
    let machine = load_machine(&data.machine)?;
    let graphs = read_corpus(&data.corpus)?;
    let db = MeasurementDb::load(&data.db)?;
    Ok(Corpus::new(machine, graphs, db))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    write(&dir.join("eval.csv"), &report.to_csv()?)?;
    write(&dir.join("summary.json"), report.summary_json()?.as_bytes())
}

fn table<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(TunerError::from)?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Gen { families, sizes, seed, out_dir } => {
            let families = if families.is_empty() { Family::ALL.to_vec() } else { families };
            let sizes = if sizes.is_empty() { default_sizes() } else { sizes };
            let modules = generate_corpus(&families, &sizes, seed)?;
            write_corpus(&out_dir, &modules)?;
        }
        Command::Graph { input, out } => {
            let text = String::from_utf8(read(&input)?).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            let graph = build_graph(&parse_named(&text, &input.display().to_string())?)?;
            let bytes = export_graph(&graph);
            match out {
                Some(p) => write(&p, &bytes)?,
                None => stdout.write_all(&bytes).and_then(|_| writeln!(stdout)).map_err(|e| CliError::Internal(e.to_string()))?,
            }
        }
        Command::Sweep { corpus, machine, noise_sigma, seed, out } => {
            if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                return Err(CliError::Usage(format!("--noise-sigma must be finite and non-negative, got {noise_sigma}")));
            }
            let machine = load_machine(&machine)?;
            let graphs = read_corpus(&corpus)?;
            let params = SimParams { noise_sigma, ..SimParams::default() };
            let db = MeasurementDb::from_rows(sweep_all(&graphs, &machine, &params, seed, exec))?;
            let mut bytes = Vec::new();
            db.write_jsonl(&mut bytes)?;
            write(&out, &bytes)?;
        }
        Command::Label { data, task, out } => {
            let corpus = load_corpus(&data)?;
            let ds = label_dataset(&corpus, task)?;
            write(&out, &serde_json::to_vec(&ds)?)?;
        }
        Command::Train { dataset, task, opts, freeze_gnn, init_checkpoint, out } => {
            let ds: LabeledDataset = serde_json::from_slice(&read(&dataset)?)?;
            if ds.task != task {
                return Err(CliError::Usage(format!("dataset is labeled for {} but --task is {task}", ds.task)));
            }
            let init = match init_checkpoint {
                Some(p) => {
                    let mut params = load_checkpoint(&read(&p)?)?.params;
                    if params.spec.n_classes != ds.n_classes {
                        params.reset_output_layer(ds.n_classes, opts.seed);
                    }
                    Some(params)
                }
                None => None,
            };
            let cfg = TrainConfig { freeze_gnn, ..opts.config(task, exec) };
            let trained = train_on_dataset(&ds, &cfg, init)?;
            let ckpt = Checkpoint { params: trained.params, opt: Some(trained.opt), task, machine: ds.machine };
            let bytes = save_checkpoint(&ckpt);
            let mut sidecar = checkpoint_sidecar(&ckpt, &bytes);
            sidecar["history"] = serde_json::to_value(&trained.history)?;
            write(&out, &bytes)?;
            write(&sidecar_path(&out), (serde_json::to_string_pretty(&sidecar)? + "\n").as_bytes())?;
        }
        Command::Eval { data, task, opts, baselines, no_model, out_dir } => {
            let corpus = load_corpus(&data)?;
            let mut parts = Vec::new();
            if !no_model {
                parts.push(evaluate_loocv(&corpus, &opts.config(task, exec))?);
            }
            parts.push(evaluate_baselines(&corpus, task, &baselines, opts.seed, exec)?);
            write_report(&out_dir, &EvalReport::merge(parts))?;
        }
        Command::EvalUnseenCap { data, hold_out, opts, out_dir } => {
            let corpus = load_corpus(&data)?;
            let task = Task::FastestAtCap(hold_out);
            let cfg = TrainConfig { use_extras: true, ..opts.config(task, exec) };
            write_report(&out_dir, &evaluate_unseen_cap(&corpus, hold_out, &cfg)?)?;
        }
        Command::Predict { checkpoint, input, counters } => {
            let ckpt = load_checkpoint(&read(&checkpoint)?)?;
            let text = String::from_utf8(read(&input)?).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            let graph = build_graph(&parse_named(&text, &input.display().to_string())?)?;
            let counters: Option<Counters> = match counters {
                Some(v) => Some(v.try_into().map_err(|v: Vec<f64>| CliError::Usage(format!("--counters takes 5 values, got {}", v.len())))?),
                None => None,
            };
            let extras = extras_for(&ckpt.params, &ckpt.machine, ckpt.task, counters.as_ref()).map_err(|e| match e {
                TunerError::ExtrasRequired => CliError::Usage("this checkpoint was trained with counters; pass --counters".into()),
                e => e.into(),
            })?;
            let classes = crate::dataset::class_list(&ckpt.machine, ckpt.task)?;
            let config = predict(&ckpt.params, &classes, &graph, &extras)?;
            writeln!(stdout, "{}", config.describe()).map_err(|e| CliError::Internal(e.to_string()))?;
        }
        Command::Report { inputs, out_dir } => {
            let mut parts = Vec::new();
            for p in &inputs {
                parts.push(EvalReport::from_csv(&read(p)?)?);
            }
            let report = EvalReport::merge(parts);
            let aggregates = report.aggregates()?;
            write(&out_dir.join("summary.json"), report.summary_json()?.as_bytes())?;
            write(&out_dir.join("aggregates.csv"), &table(&aggregates)?)?;
            write(&out_dir.join("applications.csv"), &table(&report.per_application()?)?)?;
            let io = |e: io::Error| CliError::Internal(e.to_string());
            writeln!(stdout, "{:<14} {:<12} {:>7} {:>9} {:>9} {:>9} {:>6} {:>6}", "tuner", "task", "regions", "speedup", "greenup", "norm", ">=.95", ">=.80")
                .map_err(io)?;
            for a in &aggregates {
                writeln!(
                    stdout,
                    "{:<14} {:<12} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>6.3} {:>6.3}",
                    a.tuner,
                    a.task.to_string(),
                    a.regions,
                    a.geomean_speedup,
                    a.geomean_greenup,
                    a.geomean_normalized,
                    a.frac_within_095,
                    a.frac_within_080
                )
                .map_err(io)?;
            }
        }
    }
    Ok(())
}

/// `<checkpoint>.json`, the human-readable summary next to a checkpoint.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Parses `argv` (including the program name), runs the subcommand and returns
/// the process exit code. Diagnostics go to standard error.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = panic::catch_unwind(AssertUnwindSafe(|| execute(cli, out)));
    match result {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
        Err(_) => {
            eprintln!("error: internal invariant violated");
            3
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String) {
        let mut out = Vec::new();
        let code = run(std::iter::once("pnptune").chain(args.iter().copied()), &mut out);
        (code, String::from_utf8(out).unwrap())
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_args(&["frobnicate"]).0, 1);
        assert_eq!(run_args(&["label", "--task", "fastest@x"]).0, 1);
        assert_eq!(run_args(&["gen", "--families", "nope", "--out-dir", "x"]).0, 1);
        assert_eq!(run_args(&["--help"]).0, 0);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.mir");
        assert_eq!(run_args(&["graph", missing.to_str().unwrap()]).0, 2);
    }

    #[test]
    fn graph_prints_interchange() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("doall.mir");
        fs::write(&f, include_str!("../fixtures/doall.mir")).unwrap();
        let (code, text) = run_args(&["graph", f.to_str().unwrap()]);
        assert_eq!(code, 0);
        let g = crate::graph::import_graph(text.trim_end().as_bytes()).unwrap();
        assert_eq!(g, build_graph(&crate::mir::parse_mir(include_str!("../fixtures/doall.mir")).unwrap()).unwrap());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("out/model.ckpt")), PathBuf::from("out/model.ckpt.json"));
    }
}
