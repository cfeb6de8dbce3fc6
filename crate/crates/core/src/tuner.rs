//! Training, prediction and the evaluation harnesses: leave-one-application-out
//! cross-validation, counter-augmented and unseen-power-cap runs, and transfer
//! retraining of the dense head on a new machine.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{oracle_best, Baseline, BaselineError};
use crate::dataset::{
    application_of, class_list, default_config, derive_labels, exclude_power_cap, loocv_splits, normalize_extras,
    Config, CounterStats, Counters, DatasetError, Fold, LabeledExample, MachineProfile, MeasurementDb, Task,
};
use crate::graph::{build_graph, GraphError, ProgramGraph};
use crate::metrics::{self, MetricsError};
use crate::mir::{generate_region, parse_named, Family, MirError, MirModule, RegionFamily};
use crate::nn::{
    batch_pass, forward, freeze_gnn, init_model, load_checkpoint, logits_from_pooled, optimizer_step, pooled, argmax,
    Checkpoint, Example, ModelParams, ModelSpec, NnError, OptState, OptVariant, PreparedGraph, Readout, TrainMask,
};
use crate::par::{self, Execution};
use crate::simulator::{sweep, SimParams};

#[derive(Debug, Error)]
pub enum TunerError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mir(#[from] MirError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("no training examples")]
    NoExamples,
    #[error("example for {found} does not match training task {expected}")]
    MixedTasks { expected: Task, found: Task },
    #[error("model has {model} classes but the task has {classes}")]
    ClassMismatch { model: usize, classes: usize },
    #[error("examples carry {found} extra features, expected {expected}")]
    ExtrasMismatch { expected: usize, found: usize },
    #[error("this evaluation needs counter features enabled")]
    ExtrasRequired,
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TunerError + '_ {
    move |source| TunerError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Corpus

/// Seed of one generated region, derived from the corpus seed.
pub fn region_seed(seed: u64, family: Family, size: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((family as u64) << 32 | size as u64)
}

/// Synthetic regions, `family` major then `size`. Regions are dealt round-robin
/// to `ceil(n / 4)` applications named `app00`, `app01`, ...; region ids are
/// `<application>/<family>_s<size>`.
pub fn generate_corpus(families: &[Family], sizes: &[u32], seed: u64) -> Result<Vec<(String, MirModule)>, TunerError> {
    let specs: Vec<RegionFamily> = families
        .iter()
        .flat_map(|&f| sizes.iter().map(move |&s| RegionFamily::new(f, s, region_seed(seed, f, s))))
        .collect();
    let apps = specs.len().div_ceil(4).max(1);
    let mut out = Vec::with_capacity(specs.len());
    for (r, spec) in specs.iter().enumerate() {
        out.push((format!("app{:02}/{}", r % apps, spec.name()), generate_region(spec)?));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn default_sizes() -> Vec<u32> {
    (1..=5).collect()
}

/// Writes `<dir>/<application>/<stem>.mir` per region.
pub fn write_corpus(dir: &Path, regions: &[(String, MirModule)]) -> Result<(), TunerError> {
    for (id, module) in regions {
        let path = dir.join(format!("{id}.mir"));
        let parent = path.parent().expect("region path has a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        fs::write(&path, module.to_text()).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Reads every `<dir>/<application>/<stem>.mir`, sorted by region id.
pub fn read_corpus(dir: &Path) -> Result<Vec<(String, ProgramGraph)>, TunerError> {
    let mut out = Vec::new();
    let mut apps: Vec<_> = fs::read_dir(dir).map_err(io_err(dir))?.collect::<Result<_, _>>().map_err(io_err(dir))?;
    apps.sort_by_key(|e| e.file_name());
    for app in apps {
        let app_path = app.path();
        if !app_path.is_dir() {
            continue;
        }
        let mut files: Vec<_> =
            fs::read_dir(&app_path).map_err(io_err(&app_path))?.collect::<Result<_, _>>().map_err(io_err(&app_path))?;
        files.sort_by_key(|e| e.file_name());
        for f in files {
            let path = f.path();
            if path.extension().is_none_or(|e| e != "mir") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let id = format!(
                "{}/{}",
                app.file_name().to_string_lossy(),
                path.file_stem().expect("file has a stem").to_string_lossy()
            );
            let module = parse_named(&text, &path.display().to_string())?;
            out.push((id, build_graph(&module)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Region graphs of one machine with their complete sweeps.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub machine: MachineProfile,
    pub graphs: Vec<(String, ProgramGraph)>,
    pub db: MeasurementDb,
}

impl Corpus {
    pub fn new(machine: MachineProfile, mut graphs: Vec<(String, ProgramGraph)>, db: MeasurementDb) -> Self {
        graphs.sort_by(|a, b| a.0.cmp(&b.0));
        Corpus { machine, graphs, db }
    }

    /// Simulates every configuration of every region.
    pub fn simulate(
        machine: MachineProfile,
        graphs: Vec<(String, ProgramGraph)>,
        params: &SimParams,
        seed: u64,
        exec: Execution,
    ) -> Result<Self, TunerError> {
        let rows = sweep_all(&graphs, &machine, params, seed, exec);
        let db = MeasurementDb::from_rows(rows)?;
        Ok(Corpus::new(machine, graphs, db))
    }

    /// The default synthetic corpus: every family at sizes 1 to 5.
    pub fn synthetic(machine: MachineProfile, seed: u64, exec: Execution) -> Result<Self, TunerError> {
        let modules = generate_corpus(&Family::ALL, &default_sizes(), seed)?;
        let graphs = modules
            .iter()
            .map(|(id, m)| Ok((id.clone(), build_graph(m)?)))
            .collect::<Result<Vec<_>, TunerError>>()?;
        Corpus::simulate(machine, graphs, &SimParams::default(), seed, exec)
    }

    pub fn region_ids(&self) -> Vec<&str> {
        self.graphs.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn folds(&self) -> Result<Vec<Fold>, TunerError> {
        let apps: Vec<&str> = self.graphs.iter().map(|(id, _)| application_of(id)).collect();
        Ok(loocv_splits(&apps)?)
    }

    /// Counters of the default configuration of `region` at `cap`.
    pub fn default_counters(&self, region: &str, cap: u32) -> Result<Counters, TunerError> {
        let d = default_config(&self.machine, cap)?;
        let row = self.db.require(region, &d)?;
        row.counters.ok_or(TunerError::Dataset(DatasetError::NoCounters))
    }
}

/// Sweeps of every region in order.
pub fn sweep_all(
    graphs: &[(String, ProgramGraph)],
    machine: &MachineProfile,
    params: &SimParams,
    seed: u64,
    exec: Execution,
) -> Vec<crate::dataset::Measurement> {
    graphs.iter().flat_map(|(id, g)| sweep(id, g, machine, params, seed, exec)).collect()
}

/// Number of extra features for `task`: five counters, plus the normalized cap
/// for cap-specific tasks.
pub fn extras_dim(task: Task, use_extras: bool) -> usize {
    match (use_extras, task) {
        (false, _) => 0,
        (true, Task::FastestAtCap(_)) => 6,
        (true, Task::MinEdp) => 5,
    }
}

fn cap_feature(task: Task) -> Option<u32> {
    match task {
        Task::FastestAtCap(c) => Some(c),
        Task::MinEdp => None,
    }
}

/// Attaches normalized default-configuration counters to `ex`.
fn attach_extras(corpus: &Corpus, ex: &mut LabeledExample, stats: &CounterStats) -> Result<(), TunerError> {
    let counters = corpus.default_counters(&ex.region_id, ex.task.counter_cap(&corpus.machine))?;
    ex.extras = normalize_extras(&counters, cap_feature(ex.task), &corpus.machine, stats)?;
    Ok(())
}

/// Counter statistics over `regions` at each of `caps`.
fn fit_stats<'a>(corpus: &Corpus, regions: impl IntoIterator<Item = &'a str>, caps: &[u32]) -> Result<CounterStats, TunerError> {
    let mut samples = Vec::new();
    for r in regions {
        for &c in caps {
            samples.push(corpus.default_counters(r, c)?);
        }
    }
    Ok(CounterStats::fit(&samples)?)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptVariant,
    pub seed: u64,
    /// Stop after this many epochs without a lower training loss.
    pub patience: Option<usize>,
    pub use_extras: bool,
    pub freeze_gnn: bool,
    pub exec: Execution,
}

impl TrainConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        let optimizer = match task {
            Task::FastestAtCap(_) => OptVariant::AdamWAmsgrad,
            Task::MinEdp => OptVariant::Adam,
        };
        TrainConfig {
            task,
            epochs: 300,
            batch_size: 16,
            lr: 1e-3,
            optimizer,
            seed,
            patience: None,
            use_extras: false,
            freeze_gnn: false,
            exec: Execution::default(),
        }
    }

    fn validate(&self) -> Result<(), TunerError> {
        if self.epochs == 0 {
            return Err(TunerError::ZeroEpochs);
        }
        if self.batch_size == 0 {
            return Err(TunerError::ZeroBatch);
        }
        Ok(())
    }

    pub fn tuner_name(&self) -> &'static str {
        if self.use_extras {
            "pnp-counters"
        } else {
            "pnp-static"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    /// Share of examples predicted correctly before their batch's update.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Accuracy of the final model on the training set.
    pub final_accuracy: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub output_layer_reset: bool,
    /// Wall time per epoch; excluded from serialized artifacts.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
    #[serde(skip)]
    pub setup_seconds: f64,
}

impl History {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub opt: OptState,
    pub history: History,
}

/// Minibatch training with a seeded shuffle each epoch. With `freeze_gnn` the
/// pooled graph vectors are computed once and only the dense head trains.
pub fn train(
    examples: &[LabeledExample],
    n_classes: usize,
    cfg: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<Trained, TunerError> {
    cfg.validate()?;
    let first = examples.first().ok_or(TunerError::NoExamples)?;
    let extras_len = first.extras.len();
    for ex in examples {
        if !ex.task.same_kind(cfg.task) {
            return Err(TunerError::MixedTasks { expected: cfg.task, found: ex.task });
        }
        if ex.extras.len() != extras_len {
            return Err(TunerError::ExtrasMismatch { expected: extras_len, found: ex.extras.len() });
        }
        if ex.label >= n_classes {
            return Err(NnError::LabelOutOfRange { label: ex.label, classes: n_classes }.into());
        }
    }
    if cfg.use_extras != (extras_len > 0) {
        return Err(TunerError::ExtrasMismatch { expected: extras_dim(cfg.task, cfg.use_extras), found: extras_len });
    }
    let mut params = match init {
        Some(p) => {
            if p.spec.n_classes != n_classes {
                return Err(TunerError::ClassMismatch { model: p.spec.n_classes, classes: n_classes });
            }
            if p.spec.extras_dim != extras_len {
                return Err(TunerError::ExtrasMismatch { expected: p.spec.extras_dim, found: extras_len });
            }
            p
        }
        None => init_model(ModelSpec::new(n_classes, extras_len), cfg.seed),
    };
    let mask = if cfg.freeze_gnn { freeze_gnn(&params) } else { TrainMask::all(&params) };
    let mut opt = OptState::new(cfg.optimizer, &params);
    opt.lr = cfg.lr;

    let setup = Instant::now();
    let graphs = par::try_map(cfg.exec, examples, |ex| PreparedGraph::new(&ex.graph, &params.spec))?;
    let cached: Option<Vec<Vec<f64>>> = cfg.freeze_gnn.then(|| par::map(cfg.exec, &graphs, |g| pooled(&params, g)));
    let example = |i: usize| Example {
        readout: match &cached {
            Some(c) => Readout::Pooled(&c[i]),
            None => Readout::Graph(&graphs[i]),
        },
        extras: &examples[i].extras,
        label: examples[i].label,
    };
    let setup_seconds = setup.elapsed().as_secs_f64();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0000);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = History {
        epochs: Vec::with_capacity(cfg.epochs),
        final_accuracy: 0.0,
        trainable_params: mask.trainable_count(&params),
        total_params: params.parameter_count(),
        output_layer_reset: false,
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        setup_seconds,
    };
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| example(i)).collect();
            let pass = batch_pass(&params, &batch, cfg.exec)?;
            loss += pass.loss * chunk.len() as f64;
            correct += pass.correct;
            optimizer_step(&mut params, &pass.grads, &mut opt, Some(&mask))?;
        }
        let n = examples.len() as f64;
        history.epochs.push(EpochStats { loss: loss / n, accuracy: correct as f64 / n });
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
        if let Some(p) = cfg.patience {
            if loss / n < best_loss {
                best_loss = loss / n;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    break;
                }
            }
        }
    }
    let hits = par::try_map(cfg.exec, &(0..examples.len()).collect::<Vec<_>>(), |&i| {
        let ex = example(i);
        let logits = match ex.readout {
            Readout::Graph(g) => forward(&params, g, ex.extras)?,
            Readout::Pooled(p) => logits_from_pooled(&params, p, ex.extras)?,
        };
        Ok::<_, NnError>((argmax(&logits) == ex.label) as usize)
    })?;
    history.final_accuracy = hits.iter().sum::<usize>() as f64 / examples.len() as f64;
    Ok(Trained { params, opt, history })
}

/// Class index with the highest logit, lowest index on ties.
pub fn predict_class(params: &ModelParams, graph: &ProgramGraph, extras: &[f64]) -> Result<usize, TunerError> {
    let g = PreparedGraph::new(graph, &params.spec)?;
    Ok(argmax(&forward(params, &g, extras)?))
}

pub fn predict(params: &ModelParams, classes: &[Config], graph: &ProgramGraph, extras: &[f64]) -> Result<Config, TunerError> {
    if classes.len() != params.spec.n_classes {
        return Err(TunerError::ClassMismatch { model: params.spec.n_classes, classes: classes.len() });
    }
    Ok(classes[predict_class(params, graph, extras)?])
}

/// Normalized extras for a region that was run once at the default
/// configuration under `task`'s counter cap.
pub fn extras_for(params: &ModelParams, machine: &MachineProfile, task: Task, counters: Option<&Counters>) -> Result<Vec<f64>, TunerError> {
    match (params.spec.extras_dim, counters) {
        (0, _) => Ok(Vec::new()),
        (_, None) => Err(TunerError::ExtrasRequired),
        (_, Some(c)) => Ok(normalize_extras(c, cap_feature(task), machine, &params.counter_stats)?),
    }
}

// ---------------------------------------------------------------------------
// Reports

/// One tuner's choice for one region, with everything needed to recompute
/// its metrics from the measurement database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub fold: String,
    pub region: String,
    pub tuner: String,
    pub task: Task,
    pub predicted: String,
    pub oracle: String,
    pub default: String,
    pub predicted_time: f64,
    pub predicted_energy: f64,
    pub oracle_time: f64,
    pub oracle_energy: f64,
    pub default_time: f64,
    pub default_energy: f64,
    pub speedup: f64,
    pub greenup: f64,
    pub edp_improvement: f64,
    /// Speedup (cap tasks) or EDP improvement (EDP task) over the oracle's.
    pub normalized: f64,
}

pub fn make_record(corpus: &Corpus, fold: &str, region: &str, tuner: &str, task: Task, predicted: &Config) -> Result<EvalRecord, TunerError> {
    let oracle = oracle_best(&corpus.db, &corpus.machine, region, task)?;
    let default = task.baseline(&corpus.machine)?;
    let p = corpus.db.require(region, predicted)?.outcome();
    let o = corpus.db.require(region, &oracle)?.outcome();
    let d = corpus.db.require(region, &default)?.outcome();
    let speedup = metrics::speedup(d.time, p.time)?;
    let greenup = metrics::greenup(d.energy, p.energy)?;
    let edp_improvement = metrics::edp_improvement((d.energy, d.time), (p.energy, p.time))?;
    let normalized = match task {
        Task::FastestAtCap(_) => metrics::normalized(speedup, metrics::speedup(d.time, o.time)?)?,
        Task::MinEdp => metrics::normalized(edp_improvement, metrics::edp_improvement((d.energy, d.time), (o.energy, o.time))?)?,
    };
    Ok(EvalRecord {
        fold: fold.to_string(),
        region: region.to_string(),
        tuner: tuner.to_string(),
        task,
        predicted: predicted.to_string(),
        oracle: oracle.to_string(),
        default: default.to_string(),
        predicted_time: p.time,
        predicted_energy: p.energy,
        oracle_time: o.time,
        oracle_energy: o.energy,
        default_time: d.time,
        default_energy: d.energy,
        speedup,
        greenup,
        edp_improvement,
        normalized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tuner: String,
    pub task: Task,
    pub regions: usize,
    pub geomean_speedup: f64,
    pub geomean_greenup: f64,
    pub geomean_edp_improvement: f64,
    pub geomean_normalized: f64,
    pub frac_within_095: f64,
    pub frac_within_080: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationSummary {
    pub tuner: String,
    pub task: Task,
    pub application: String,
    pub geomean_speedup: f64,
    pub geomean_normalized: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> EvalReport {
        EvalReport { records: reports.into_iter().flat_map(|r| r.records).collect() }
    }

    pub fn for_tuner(&self, tuner: &str, task: Task) -> Vec<&EvalRecord> {
        self.records.iter().filter(|r| r.tuner == tuner && r.task == task).collect()
    }

    fn groups(&self) -> BTreeMap<(String, String), Vec<&EvalRecord>> {
        let mut g: BTreeMap<(String, String), Vec<&EvalRecord>> = BTreeMap::new();
        for r in &self.records {
            g.entry((r.tuner.clone(), r.task.to_string())).or_default().push(r);
        }
        g
    }

    pub fn aggregates(&self) -> Result<Vec<Aggregate>, TunerError> {
        self.groups()
            .into_values()
            .map(|rs| {
                let col = |f: fn(&EvalRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
                let norm = col(|r| r.normalized);
                Ok(Aggregate {
                    tuner: rs[0].tuner.clone(),
                    task: rs[0].task,
                    regions: rs.len(),
                    geomean_speedup: metrics::geomean(&col(|r| r.speedup))?,
                    geomean_greenup: metrics::geomean(&col(|r| r.greenup))?,
                    geomean_edp_improvement: metrics::geomean(&col(|r| r.edp_improvement))?,
                    geomean_normalized: metrics::geomean(&norm)?,
                    frac_within_095: metrics::frac_within(&norm, 0.95)?,
                    frac_within_080: metrics::frac_within(&norm, 0.8)?,
                })
            })
            .collect()
    }

    pub fn per_application(&self) -> Result<Vec<ApplicationSummary>, TunerError> {
        let mut g: BTreeMap<(String, String, String), Vec<&EvalRecord>> = BTreeMap::new();
        for r in &self.records {
            g.entry((r.tuner.clone(), r.task.to_string(), application_of(&r.region).to_string())).or_default().push(r);
        }
        g.into_iter()
            .map(|((_, _, app), rs)| {
                let s: Vec<f64> = rs.iter().map(|r| r.speedup).collect();
                let n: Vec<f64> = rs.iter().map(|r| r.normalized).collect();
                Ok(ApplicationSummary {
                    tuner: rs[0].tuner.clone(),
                    task: rs[0].task,
                    application: app,
                    geomean_speedup: metrics::geomean(&s)?,
                    geomean_normalized: metrics::geomean(&n)?,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, TunerError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| TunerError::Invalid(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, TunerError> {
        let mut r = csv::Reader::from_reader(bytes);
        let records = r.deserialize().collect::<Result<Vec<EvalRecord>, _>>()?;
        Ok(EvalReport { records })
    }

    pub fn summary_json(&self) -> Result<String, TunerError> {
        let v = serde_json::json!({ "aggregates": self.aggregates()?, "applications": self.per_application()? });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

// ---------------------------------------------------------------------------
// Evaluation harnesses

/// Runs `fit` on every leave-one-application-out fold and scores the
/// predictions it returns for the held-out regions.
pub fn cross_validate<F, P>(corpus: &Corpus, task: Task, tuner: &str, exec: Execution, fit: F) -> Result<EvalReport, TunerError>
where
    F: Fn(&Fold) -> Result<P, TunerError> + Sync,
    P: Fn(usize) -> Result<Config, TunerError>,
{
    cross_validate_folds(corpus, &corpus.folds()?, task, tuner, exec, fit)
}

/// [`cross_validate`] restricted to `folds`.
pub fn cross_validate_folds<F, P>(corpus: &Corpus, folds: &[Fold], task: Task, tuner: &str, exec: Execution, fit: F) -> Result<EvalReport, TunerError>
where
    F: Fn(&Fold) -> Result<P, TunerError> + Sync,
    P: Fn(usize) -> Result<Config, TunerError>,
{
    let parts = par::try_map(exec, folds, |fold| {
        let predictor = fit(fold)?;
        fold.validation
            .iter()
            .map(|&i| make_record(corpus, &fold.application, &corpus.graphs[i].0, tuner, task, &predictor(i)?))
            .collect::<Result<Vec<_>, TunerError>>()
    })?;
    Ok(EvalReport { records: parts.into_iter().flatten().collect() })
}

/// Labeled examples for `regions` under `task`, with extras when requested.
fn fold_examples(corpus: &Corpus, labeled: &[LabeledExample], idx: &[usize], stats: Option<&CounterStats>) -> Result<Vec<LabeledExample>, TunerError> {
    idx.iter()
        .map(|&i| {
            let mut ex = labeled[i].clone();
            if let Some(s) = stats {
                attach_extras(corpus, &mut ex, s)?;
            }
            Ok(ex)
        })
        .collect()
}

/// Leave-one-application-out evaluation of the graph classifier.
pub fn evaluate_loocv(corpus: &Corpus, cfg: &TrainConfig) -> Result<EvalReport, TunerError> {
    evaluate_loocv_folds(corpus, &corpus.folds()?, cfg)
}

/// [`evaluate_loocv`] on a subset of the folds.
pub fn evaluate_loocv_folds(corpus: &Corpus, folds: &[Fold], cfg: &TrainConfig) -> Result<EvalReport, TunerError> {
    cfg.validate()?;
    let task = cfg.task;
    let classes = class_list(&corpus.machine, task)?;
    let labeled = derive_labels(&corpus.db, &corpus.graphs, &corpus.machine, task)?;
    let all: Vec<usize> = (0..labeled.len()).collect();
    cross_validate_folds(corpus, folds, task, cfg.tuner_name(), cfg.exec, |fold| {
        let stats = if cfg.use_extras {
            let regions = fold.train.iter().map(|&i| corpus.graphs[i].0.as_str());
            Some(fit_stats(corpus, regions, &[task.counter_cap(&corpus.machine)])?)
        } else {
            None
        };
        let train_set = fold_examples(corpus, &labeled, &fold.train, stats.as_ref())?;
        let trained = train(&train_set, classes.len(), cfg, None)?;
        let validation = fold_examples(corpus, &labeled, &all, stats.as_ref())?;
        let classes = classes.clone();
        Ok(move |i: usize| predict(&trained.params, &classes, &validation[i].graph, &validation[i].extras))
    })
}

/// Scores reference tuners on every region; the fold column is the region's application.
pub fn evaluate_baselines(corpus: &Corpus, task: Task, baselines: &[Baseline], seed: u64, exec: Execution) -> Result<EvalReport, TunerError> {
    let mut jobs = Vec::new();
    for b in baselines {
        for (id, _) in &corpus.graphs {
            jobs.push((*b, id.as_str()));
        }
    }
    let records = par::try_map(exec, &jobs, |&(b, id)| {
        let c = b.choose(&corpus.db, &corpus.machine, id, task, seed)?;
        make_record(corpus, application_of(id), id, &b.to_string(), task, &c)
    })?;
    Ok(EvalReport { records })
}

/// Training and validation data of one fold of the unseen-cap experiment.
#[derive(Debug, Clone)]
pub struct UnseenCapSplit {
    /// Measurements visible to training: the sweep without the held-out cap.
    pub train_db: MeasurementDb,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub stats: CounterStats,
}

/// Fastest-configuration examples at every cap but `held_out` for the fold's
/// training applications, and examples at `held_out` for its validation
/// application. Class `k` names the same threads/schedule/chunk at every cap.
pub fn unseen_cap_split(corpus: &Corpus, held_out: u32, fold: &Fold) -> Result<UnseenCapSplit, TunerError> {
    let machine = &corpus.machine;
    machine.check_cap(held_out)?;
    let train_db = exclude_power_cap(&corpus.db, held_out)?;
    let caps: Vec<u32> = machine.power_caps.iter().copied().filter(|&c| c != held_out).collect();
    let train_regions: Vec<(String, ProgramGraph)> = fold.train.iter().map(|&i| corpus.graphs[i].clone()).collect();
    let view = Corpus { machine: machine.clone(), graphs: train_regions.clone(), db: train_db };
    let stats = fit_stats(&view, train_regions.iter().map(|(id, _)| id.as_str()), &caps)?;
    let mut train_set = Vec::new();
    for &c in &caps {
        for mut ex in derive_labels(&view.db, &train_regions, machine, Task::FastestAtCap(c))? {
            attach_extras(&view, &mut ex, &stats)?;
            train_set.push(ex);
        }
    }
    let val_regions: Vec<(String, ProgramGraph)> = fold.validation.iter().map(|&i| corpus.graphs[i].clone()).collect();
    let mut validation = derive_labels(&corpus.db, &val_regions, machine, Task::FastestAtCap(held_out))?;
    for ex in &mut validation {
        attach_extras(corpus, ex, &stats)?;
    }
    Ok(UnseenCapSplit { train_db: view.db, train: train_set, validation, stats })
}

/// Leave-one-application-out evaluation at a power cap absent from training.
pub fn evaluate_unseen_cap(corpus: &Corpus, held_out: u32, cfg: &TrainConfig) -> Result<EvalReport, TunerError> {
    cfg.validate()?;
    if !cfg.use_extras {
        return Err(TunerError::ExtrasRequired);
    }
    corpus.machine.check_cap(held_out)?;
    let task = Task::FastestAtCap(held_out);
    let classes = class_list(&corpus.machine, task)?;
    let cfg = TrainConfig { task, ..*cfg };
    cross_validate(corpus, task, cfg.tuner_name(), cfg.exec, |fold| {
        let split = unseen_cap_split(corpus, held_out, fold)?;
        let trained = train(&split.train, classes.len(), &cfg, None)?;
        let classes = classes.clone();
        let validation = split.validation;
        let held = fold.validation.clone();
        Ok(move |i: usize| {
            let ex = &validation[held.iter().position(|&v| v == i).expect("validation region")];
            predict(&trained.params, &classes, &ex.graph, &ex.extras)
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferTiming {
    pub mean_epoch_seconds: f64,
    pub setup_seconds: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

#[derive(Debug, Clone)]
pub struct Transfer {
    pub checkpoint: Checkpoint,
    pub history: History,
    pub timing: TransferTiming,
}

/// Retrains a saved model on another machine's corpus. The output layer is
/// re-initialized when the class count differs.
pub fn transfer_retrain(source: &[u8], corpus: &Corpus, cfg: &TrainConfig) -> Result<Transfer, TunerError> {
    let ckpt = load_checkpoint(source)?;
    let task = cfg.task;
    let classes = class_list(&corpus.machine, task)?;
    let mut labeled = derive_labels(&corpus.db, &corpus.graphs, &corpus.machine, task)?;
    let stats = if cfg.use_extras {
        let s = fit_stats(corpus, corpus.graphs.iter().map(|(id, _)| id.as_str()), &[task.counter_cap(&corpus.machine)])?;
        for ex in &mut labeled {
            attach_extras(corpus, ex, &s)?;
        }
        s
    } else {
        CounterStats::identity()
    };
    let mut params = ckpt.params;
    let reset = params.spec.n_classes != classes.len();
    if reset {
        params.reset_output_layer(classes.len(), cfg.seed);
    }
    let mut trained = train(&labeled, classes.len(), cfg, Some(params))?;
    trained.history.output_layer_reset = reset;
    trained.params.counter_stats = stats;
    let h = &trained.history;
    let timing = TransferTiming {
        mean_epoch_seconds: h.mean_epoch_seconds(),
        setup_seconds: h.setup_seconds,
        trainable_params: h.trainable_params,
        total_params: h.total_params,
    };
    Ok(Transfer {
        checkpoint: Checkpoint { params: trained.params, opt: Some(trained.opt), task, machine: corpus.machine.clone() },
        history: trained.history,
        timing,
    })
}

// ---------------------------------------------------------------------------
// Labeled dataset files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub region_id: String,
    pub label: usize,
    pub config: String,
    /// Default-configuration counters at the task's counter cap.
    pub counters: Option<Counters>,
    pub graph: ProgramGraph,
}

/// Self-contained training data for one task on one machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub machine: MachineProfile,
    pub task: Task,
    pub n_classes: usize,
    pub examples: Vec<DatasetEntry>,
}

pub fn label_dataset(corpus: &Corpus, task: Task) -> Result<LabeledDataset, TunerError> {
    let classes = class_list(&corpus.machine, task)?;
    let labeled = derive_labels(&corpus.db, &corpus.graphs, &corpus.machine, task)?;
    let cap = task.counter_cap(&corpus.machine);
    let examples = labeled
        .into_iter()
        .map(|ex| {
            let d = default_config(&corpus.machine, cap)?;
            Ok(DatasetEntry {
                counters: corpus.db.require(&ex.region_id, &d)?.counters,
                config: classes[ex.label].to_string(),
                region_id: ex.region_id,
                label: ex.label,
                graph: ex.graph,
            })
        })
        .collect::<Result<Vec<_>, TunerError>>()?;
    Ok(LabeledDataset { machine: corpus.machine.clone(), task, n_classes: classes.len(), examples })
}

/// Trains on a labeled dataset; counter statistics are fitted on all of it.
pub fn train_on_dataset(ds: &LabeledDataset, cfg: &TrainConfig, init: Option<ModelParams>) -> Result<Trained, TunerError> {
    let stats = if cfg.use_extras {
        let counters = ds.examples.iter().map(|e| e.counters.ok_or(TunerError::ExtrasRequired)).collect::<Result<Vec<_>, _>>()?;
        CounterStats::fit(&counters)?
    } else {
        CounterStats::identity()
    };
    let examples = ds
        .examples
        .iter()
        .map(|e| {
            let extras = match (cfg.use_extras, &e.counters) {
                (true, Some(c)) => normalize_extras(c, cap_feature(ds.task), &ds.machine, &stats)?,
                _ => Vec::new(),
            };
            Ok(LabeledExample { region_id: e.region_id.clone(), graph: e.graph.clone(), task: ds.task, label: e.label, extras })
        })
        .collect::<Result<Vec<_>, TunerError>>()?;
    let mut trained = train(&examples, ds.n_classes, &TrainConfig { task: ds.task, ..*cfg }, init)?;
    trained.params.counter_stats = stats;
    Ok(trained)
}
