//! Search space, measurement database, label derivation and evaluation splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::graph::ProgramGraph;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid machine profile: {0}")]
    InvalidProfile(String),
    #[error("power cap {0} W is not part of the machine profile")]
    UnknownCap(u32),
    #[error("no measurements at power cap {0} W")]
    CapAbsent(u32),
    #[error("incomplete sweep: region `{region}` has no row for {config}")]
    IncompleteSweep { region: String, config: Config },
    #[error("duplicate row for region `{region}` at {config}")]
    Duplicate { region: String, config: Config },
    #[error("invalid measurement for region `{region}`: {msg}")]
    InvalidMeasurement { region: String, msg: String },
    #[error("leave-one-out needs at least 2 application groups, got {0}")]
    TooFewGroups(usize),
    #[error("counter {index} must be positive, got {value}")]
    NonPositiveCounter { index: usize, value: f64 },
    #[error("cannot fit counter statistics on an empty set")]
    NoCounters,
    #[error("bad task `{0}`: expected fastest@CAP or minedp")]
    BadTask(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const CHUNK_SIZES: [u32; 7] = [1, 8, 32, 64, 128, 256, 512];

/// Simulated stand-in for the compiler-defined default chunk size.
pub const DEFAULT_CHUNK_STANDIN: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub name: String,
    pub power_caps: Vec<u32>,
    pub tdp: u32,
    pub min_power: u32,
    pub thread_counts: Vec<u32>,
    pub p_idle: f64,
    pub t_max: u32,
    pub mem_scal_limit: u32,
    /// Exponent of the power/frequency coupling (3 = cube law).
    pub alpha: f64,
}

const SKYLAKE_JSON: &str = include_str!("../profiles/skylake.json");
const HASWELL_JSON: &str = include_str!("../profiles/haswell.json");

impl MachineProfile {
    pub fn skylake() -> Self {
        Self::from_json(SKYLAKE_JSON).expect("shipped profile is valid")
    }

    pub fn haswell() -> Self {
        Self::from_json(HASWELL_JSON).expect("shipped profile is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let p: MachineProfile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidProfile(format!("{}: {m}", self.name)));
        let ascending = |v: &[u32]| v.windows(2).all(|w| w[0] < w[1]);
        if self.power_caps.is_empty() || !ascending(&self.power_caps) {
            return bad("power_caps must be non-empty and strictly ascending");
        }
        if self.thread_counts.is_empty() || !ascending(&self.thread_counts) || self.thread_counts[0] == 0 {
            return bad("thread_counts must be positive and strictly ascending");
        }
        if Some(&self.tdp) != self.power_caps.last() {
            return bad("tdp must equal the largest power cap");
        }
        if Some(&self.min_power) != self.power_caps.first() {
            return bad("min_power must equal the smallest power cap");
        }
        if Some(&self.t_max) != self.thread_counts.last() {
            return bad("t_max must equal the largest thread count");
        }
        if !(self.p_idle >= 0.0 && self.p_idle < self.tdp as f64) {
            return bad("p_idle must lie in [0, tdp)");
        }
        if self.mem_scal_limit == 0 || !(self.alpha > 0.0) {
            return bad("mem_scal_limit and alpha must be positive");
        }
        Ok(())
    }

    pub fn check_cap(&self, cap: u32) -> Result<(), DatasetError> {
        if self.power_caps.contains(&cap) {
            Ok(())
        } else {
            Err(DatasetError::UnknownCap(cap))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Schedule {
    Static,
    Dynamic,
    Guided,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Static, Schedule::Dynamic, Schedule::Guided];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Static => "STATIC",
            Schedule::Dynamic => "DYNAMIC",
            Schedule::Guided => "GUIDED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Chunk {
    Default,
    Size(u32),
}

impl Chunk {
    /// Chunk size used by the performance model.
    pub fn effective(self) -> u32 {
        match self {
            Chunk::Default => DEFAULT_CHUNK_STANDIN,
            Chunk::Size(n) => n,
        }
    }
}

impl fmt::Display for Chunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Chunk::Default => f.write_str("DEFAULT"),
            Chunk::Size(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Chunk {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Chunk::Default => s.serialize_str("DEFAULT"),
            Chunk::Size(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Chunk {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Chunk::Size(n)),
            Raw::S(s) if s == "DEFAULT" => Ok(Chunk::Default),
            Raw::S(s) => Err(serde::de::Error::custom(format!("bad chunk `{s}`"))),
        }
    }
}

/// One point of the tuning space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Config {
    pub power_cap: u32,
    pub threads: u32,
    pub schedule: Schedule,
    pub chunk: Chunk,
    pub is_default: bool,
}

impl Config {
    /// `key=value` line used on standard output by `predict`.
    pub fn describe(&self) -> String {
        format!(
            "power_cap={} threads={} schedule={} chunk={} is_default={}",
            self.power_cap, self.threads, self.schedule.name(), self.chunk, self.is_default
        )
    }

    /// Whether this config is a member of `machine`'s search space.
    pub fn is_valid_for(&self, machine: &MachineProfile) -> bool {
        if !machine.power_caps.contains(&self.power_cap) {
            return false;
        }
        if self.is_default {
            self.threads == machine.t_max && self.schedule == Schedule::Static && self.chunk == Chunk::Default
        } else {
            machine.thread_counts.contains(&self.threads)
                && matches!(self.chunk, Chunk::Size(n) if CHUNK_SIZES.contains(&n))
        }
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}W:{}:{}:{}", self.power_cap, self.threads, self.schedule.name(), self.chunk)
    }
}

pub fn default_config(machine: &MachineProfile, cap: u32) -> Result<Config, DatasetError> {
    machine.check_cap(cap)?;
    Ok(Config {
        power_cap: cap,
        threads: machine.t_max,
        schedule: Schedule::Static,
        chunk: Chunk::Default,
        is_default: true,
    })
}

fn configs_at(machine: &MachineProfile, cap: u32) -> impl Iterator<Item = Config> + '_ {
    machine.thread_counts.iter().flat_map(move |&threads| {
        Schedule::ALL.into_iter().flat_map(move |schedule| {
            CHUNK_SIZES.into_iter().map(move |n| Config {
                power_cap: cap,
                threads,
                schedule,
                chunk: Chunk::Size(n),
                is_default: false,
            })
        })
    })
}

/// All cap x threads x schedule x chunk combinations in lexicographic order,
/// followed by one default configuration per cap.
pub fn enumerate_search_space(machine: &MachineProfile) -> Vec<Config> {
    let mut out: Vec<Config> = machine.power_caps.iter().flat_map(|&cap| configs_at(machine, cap)).collect();
    out.extend(machine.power_caps.iter().map(|&cap| default_config(machine, cap).expect("cap from profile")));
    out
}

/// The two tuning scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Fastest configuration at a fixed power cap.
    FastestAtCap(u32),
    /// Minimum energy-delay product over every cap and configuration.
    MinEdp,
}

impl Task {
    pub fn same_kind(self, other: Task) -> bool {
        matches!((self, other), (Task::FastestAtCap(_), Task::FastestAtCap(_)) | (Task::MinEdp, Task::MinEdp))
    }

    /// Cap at which default-configuration counters are collected for this task.
    pub fn counter_cap(self, machine: &MachineProfile) -> u32 {
        match self {
            Task::FastestAtCap(c) => c,
            Task::MinEdp => machine.tdp,
        }
    }

    /// Baseline configuration speedups are measured against.
    pub fn baseline(self, machine: &MachineProfile) -> Result<Config, DatasetError> {
        default_config(machine, self.counter_cap(machine))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::FastestAtCap(c) => write!(f, "fastest@{c}"),
            Task::MinEdp => f.write_str("minedp"),
        }
    }
}

impl FromStr for Task {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "minedp" {
            return Ok(Task::MinEdp);
        }
        s.strip_prefix("fastest@")
            .and_then(|c| c.parse().ok())
            .map(Task::FastestAtCap)
            .ok_or_else(|| DatasetError::BadTask(s.to_string()))
    }
}

impl Serialize for Task {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Task {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Configurations a classifier for `task` chooses between, in class order.
pub fn class_list(machine: &MachineProfile, task: Task) -> Result<Vec<Config>, DatasetError> {
    match task {
        Task::FastestAtCap(cap) => {
            let mut v: Vec<Config> = configs_at(machine, machine_cap(machine, cap)?).collect();
            v.push(default_config(machine, cap)?);
            Ok(v)
        }
        Task::MinEdp => Ok(enumerate_search_space(machine)),
    }
}

fn machine_cap(machine: &MachineProfile, cap: u32) -> Result<u32, DatasetError> {
    machine.check_cap(cap).map(|_| cap)
}

/// Hardware counters: L1, L2, L3 misses, instructions, mispredicted branches.
pub type Counters = [f64; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub region_id: String,
    pub config: Config,
    pub time: f64,
    pub energy: f64,
    pub counters: Option<Counters>,
}

impl Measurement {
    pub fn outcome(&self) -> Outcome {
        Outcome { time: self.time, energy: self.energy }
    }

    fn check(&self) -> Result<(), DatasetError> {
        let bad = |msg: &str| Err(DatasetError::InvalidMeasurement { region: self.region_id.clone(), msg: msg.into() });
        if !(self.time > 0.0 && self.time.is_finite()) {
            return bad("time must be positive");
        }
        if !(self.energy > 0.0 && self.energy.is_finite()) {
            return bad("energy must be positive");
        }
        if let Some(c) = &self.counters {
            if c.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad("counters must be non-negative");
            }
        }
        Ok(())
    }
}

/// One JSON-lines row of a measurement database.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasurementRecord {
    region_id: String,
    power_cap: u32,
    threads: u32,
    schedule: Schedule,
    chunk: Chunk,
    is_default: bool,
    time_s: f64,
    energy_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counters: Option<Counters>,
}

impl From<&Measurement> for MeasurementRecord {
    fn from(m: &Measurement) -> Self {
        MeasurementRecord {
            region_id: m.region_id.clone(),
            power_cap: m.config.power_cap,
            threads: m.config.threads,
            schedule: m.config.schedule,
            chunk: m.config.chunk,
            is_default: m.config.is_default,
            time_s: m.time,
            energy_j: m.energy,
            counters: m.counters,
        }
    }
}

impl From<MeasurementRecord> for Measurement {
    fn from(r: MeasurementRecord) -> Self {
        Measurement {
            region_id: r.region_id,
            config: Config {
                power_cap: r.power_cap,
                threads: r.threads,
                schedule: r.schedule,
                chunk: r.chunk,
                is_default: r.is_default,
            },
            time: r.time_s,
            energy: r.energy_j,
            counters: r.counters,
        }
    }
}

/// Immutable table of `(region, config) -> measurement`.
#[derive(Debug, Clone, Default)]
pub struct MeasurementDb {
    rows: Vec<Measurement>,
    index: HashMap<(String, Config), usize>,
}

impl MeasurementDb {
    pub fn from_rows(rows: Vec<Measurement>) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(rows.len());
        for (i, m) in rows.iter().enumerate() {
            m.check()?;
            if index.insert((m.region_id.clone(), m.config), i).is_some() {
                return Err(DatasetError::Duplicate { region: m.region_id.clone(), config: m.config });
            }
        }
        Ok(MeasurementDb { rows, index })
    }

    pub fn rows(&self) -> &[Measurement] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, region: &str, config: &Config) -> Option<&Measurement> {
        // Lookup keyed by owned String; avoid allocating on the hot path where possible.
        self.index.get(&(region.to_string(), *config)).map(|&i| &self.rows[i])
    }

    pub fn require(&self, region: &str, config: &Config) -> Result<&Measurement, DatasetError> {
        self.get(region, config).ok_or_else(|| DatasetError::IncompleteSweep {
            region: region.to_string(),
            config: *config,
        })
    }

    /// Region ids in sorted order.
    pub fn regions(&self) -> Vec<String> {
        self.rows.iter().map(|m| m.region_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn caps(&self) -> BTreeSet<u32> {
        self.rows.iter().map(|m| m.config.power_cap).collect()
    }

    /// Outcomes of `region` for each config in `classes`, in class order.
    pub fn outcomes(&self, region: &str, classes: &[Config]) -> Result<Vec<Outcome>, DatasetError> {
        classes.iter().map(|c| self.require(region, c).map(Measurement::outcome)).collect()
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, DatasetError> {
        let mut rows = Vec::new();
        for (k, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MeasurementRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: k + 1, msg: e.to_string() })?;
            rows.push(rec.into());
        }
        Self::from_rows(rows)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), DatasetError> {
        for m in &self.rows {
            serde_json::to_writer(&mut w, &MeasurementRecord::from(m))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Drops every row measured at `cap`.
pub fn exclude_power_cap(db: &MeasurementDb, cap: u32) -> Result<MeasurementDb, DatasetError> {
    if !db.rows.iter().any(|m| m.config.power_cap == cap) {
        return Err(DatasetError::CapAbsent(cap));
    }
    let rows = db.rows.iter().filter(|m| m.config.power_cap != cap).cloned().collect();
    MeasurementDb::from_rows(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub time: f64,
    pub energy: f64,
}

impl Outcome {
    pub fn edp(&self) -> f64 {
        self.energy * self.time
    }

    /// Value minimized under `task`.
    pub fn objective(&self, task: Task) -> f64 {
        match task {
            Task::FastestAtCap(_) => self.time,
            Task::MinEdp => self.edp(),
        }
    }

    /// Strict "better than" under `task`: objective, then energy.
    /// Remaining ties go to whichever candidate came first.
    pub fn beats(&self, other: &Outcome, task: Task) -> bool {
        let (a, b) = (self.objective(task), other.objective(task));
        a < b || (a == b && self.energy < other.energy)
    }
}

/// Index of the best outcome; ties broken by lower energy, then lower index.
pub fn argmin_class(outcomes: &[Outcome], task: Task) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if best.is_none_or(|b| o.beats(&outcomes[b], task)) {
            best = Some(i);
        }
    }
    best
}

/// Label (class index) of `region` under `task`.
pub fn label_for(db: &MeasurementDb, region: &str, machine: &MachineProfile, task: Task) -> Result<usize, DatasetError> {
    let classes = class_list(machine, task)?;
    let outcomes = db.outcomes(region, &classes)?;
    Ok(argmin_class(&outcomes, task).expect("class lists are never empty"))
}

/// A training/validation example for one region under one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub region_id: String,
    pub graph: ProgramGraph,
    pub task: Task,
    pub label: usize,
    /// Normalized counters (5) plus normalized power cap (6), or empty.
    pub extras: Vec<f64>,
}

/// Labels every region of `graphs` under `task`; extras are left empty.
pub fn derive_labels(
    db: &MeasurementDb,
    graphs: &[(String, ProgramGraph)],
    machine: &MachineProfile,
    task: Task,
) -> Result<Vec<LabeledExample>, DatasetError> {
    let classes = class_list(machine, task)?;
    graphs
        .iter()
        .map(|(region, graph)| {
            let outcomes = db.outcomes(region, &classes)?;
            Ok(LabeledExample {
                region_id: region.clone(),
                graph: graph.clone(),
                task,
                label: argmin_class(&outcomes, task).expect("non-empty"),
                extras: Vec::new(),
            })
        })
        .collect()
}

/// Application a region belongs to: the part of its id before the first `/`.
pub fn application_of(region_id: &str) -> &str {
    region_id.split_once('/').map_or(region_id, |(app, _)| app)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub application: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// One fold per application (sorted by name): that application's items are
/// validation, everything else is training.
pub fn loocv_splits<S: AsRef<str>>(app_ids: &[S]) -> Result<Vec<Fold>, DatasetError> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in app_ids.iter().enumerate() {
        groups.entry(a.as_ref()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(DatasetError::TooFewGroups(groups.len()));
    }
    Ok(groups
        .iter()
        .map(|(app, validation)| Fold {
            application: app.to_string(),
            train: (0..app_ids.len()).filter(|i| app_ids[*i].as_ref() != *app).collect(),
            validation: validation.clone(),
        })
        .collect())
}

/// z-score statistics of log10 counters, fitted on training data only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterStats {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl CounterStats {
    pub fn identity() -> Self {
        CounterStats { mean: [0.0; 5], std: [1.0; 5] }
    }

    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Counters>) -> Result<Self, DatasetError> {
        let logs: Vec<[f64; 5]> = samples.into_iter().map(log_counters).collect::<Result<_, _>>()?;
        if logs.is_empty() {
            return Err(DatasetError::NoCounters);
        }
        let n = logs.len() as f64;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for k in 0..5 {
            mean[k] = logs.iter().map(|l| l[k]).sum::<f64>() / n;
            let var = logs.iter().map(|l| (l[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(CounterStats { mean, std })
    }
}

fn log_counters(c: &Counters) -> Result<[f64; 5], DatasetError> {
    let mut out = [0.0; 5];
    for (k, &v) in c.iter().enumerate() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(DatasetError::NonPositiveCounter { index: k, value: v });
        }
        out[k] = v.log10();
    }
    Ok(out)
}

/// Five z-scored log10 counters, plus `cap / tdp` when `cap` is given.
pub fn normalize_extras(
    counters: &Counters,
    cap: Option<u32>,
    machine: &MachineProfile,
    stats: &CounterStats,
) -> Result<Vec<f64>, DatasetError> {
    let logs = log_counters(counters)?;
    let mut out: Vec<f64> = (0..5).map(|k| (logs[k] - stats.mean[k]) / stats.std[k]).collect();
    if let Some(cap) = cap {
        out.push(cap as f64 / machine.tdp as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_profile(caps: Vec<u32>, threads: Vec<u32>) -> MachineProfile {
        MachineProfile {
            name: "toy".into(),
            tdp: *caps.last().unwrap(),
            min_power: caps[0],
            t_max: *threads.last().unwrap(),
            power_caps: caps,
            thread_counts: threads,
            p_idle: 5.0,
            mem_scal_limit: 8,
            alpha: 3.0,
        }
    }

    #[test]
    fn shipped_profiles() {
        let s = MachineProfile::skylake();
        assert_eq!(s.power_caps, vec![75, 100, 120, 150]);
        assert_eq!(s.thread_counts, vec![1, 4, 8, 16, 32, 64]);
        let h = MachineProfile::haswell();
        assert_eq!(h.power_caps, vec![40, 60, 70, 85]);
        assert_eq!(h.thread_counts, vec![1, 2, 4, 8, 16, 32]);
    }

    #[test]
    fn profile_invariants_are_checked() {
        let mut p = MachineProfile::skylake();
        p.tdp = 140;
        assert!(p.validate().is_err());
        let mut p = MachineProfile::skylake();
        p.thread_counts = vec![4, 1];
        assert!(p.validate().is_err());
    }

    #[test]
    fn search_space_sizes() {
        for m in [MachineProfile::skylake(), MachineProfile::haswell()] {
            let space = enumerate_search_space(&m);
            assert_eq!(space.len(), 508);
            assert_eq!(space.iter().filter(|c| c.is_default).count(), 4);
            assert_eq!(space.iter().collect::<BTreeSet<_>>().len(), 508);
            assert!(space.iter().all(|c| c.is_valid_for(&m)));
        }
        assert_eq!(enumerate_search_space(&toy_profile(vec![10], vec![1, 2])).len(), 43);
    }

    #[test]
    fn search_space_order() {
        let space = enumerate_search_space(&MachineProfile::skylake());
        let non_default = &space[..504];
        assert!(non_default.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(space[504].power_cap, 75);
        assert_eq!(space[507].power_cap, 150);
    }

    #[test]
    fn class_lists() {
        let s = MachineProfile::skylake();
        let at150 = class_list(&s, Task::FastestAtCap(150)).unwrap();
        assert_eq!(at150.len(), 127);
        assert!(at150.iter().all(|c| c.power_cap == 150));
        assert!(at150[126].is_default);
        assert_eq!(class_list(&s, Task::MinEdp).unwrap().len(), 508);
        assert!(matches!(class_list(&s, Task::FastestAtCap(90)), Err(DatasetError::UnknownCap(90))));
    }

    #[test]
    fn toy_argmin() {
        let o = |t: f64, e: f64| Outcome { time: t, energy: e };
        let times = [o(2.0, 1.0), o(1.0, 1.0), o(1.5, 1.0)];
        assert_eq!(argmin_class(&times, Task::FastestAtCap(1)), Some(1));
        let edp = [o(3.0, 2.0), o(5.0, 1.0), o(2.0, 3.0)];
        assert_eq!(argmin_class(&edp, Task::MinEdp), Some(1));
        let tie = [o(1.0, 5.0), o(1.0, 4.0)];
        assert_eq!(argmin_class(&tie, Task::FastestAtCap(1)), Some(1));
        let full_tie = [o(1.0, 4.0), o(1.0, 4.0)];
        assert_eq!(argmin_class(&full_tie, Task::FastestAtCap(1)), Some(0));
    }

    #[test]
    fn task_strings() {
        assert_eq!("fastest@150".parse::<Task>().unwrap(), Task::FastestAtCap(150));
        assert_eq!("minedp".parse::<Task>().unwrap(), Task::MinEdp);
        assert!("fastest@".parse::<Task>().is_err());
        assert_eq!(Task::FastestAtCap(75).to_string(), "fastest@75");
    }

    #[test]
    fn splits() {
        let apps = ["A", "A", "B", "B", "C", "C"];
        let folds = loocv_splits(&apps).unwrap();
        assert_eq!(folds.len(), 3);
        assert!(folds.iter().all(|f| f.validation.len() == 2 && f.train.len() == 4));
        assert_eq!(loocv_splits(&["A", "B", "B", "B"]).unwrap().len(), 2);
        assert!(matches!(loocv_splits(&["A", "A"]), Err(DatasetError::TooFewGroups(1))));
    }

    #[test]
    fn application_ids() {
        assert_eq!(application_of("app03/doall_s2"), "app03");
        assert_eq!(application_of("solo"), "solo");
    }

    fn row(region: &str, config: Config, t: f64, e: f64) -> Measurement {
        Measurement { region_id: region.into(), config, time: t, energy: e, counters: None }
    }

    #[test]
    fn exclusion() {
        let m = toy_profile(vec![10, 20], vec![1, 2]);
        let rows: Vec<_> = enumerate_search_space(&m).into_iter().map(|c| row("r", c, 1.0, 1.0)).collect();
        let db = MeasurementDb::from_rows(rows).unwrap();
        let cut = exclude_power_cap(&db, 20).unwrap();
        assert_eq!(cut.len(), db.len() - 43);
        assert!(cut.rows().iter().all(|r| r.config.power_cap == 10));
        assert!(matches!(exclude_power_cap(&cut, 20), Err(DatasetError::CapAbsent(20))));
    }

    #[test]
    fn duplicates_and_gaps() {
        let m = toy_profile(vec![10], vec![1]);
        let c = enumerate_search_space(&m);
        assert!(matches!(
            MeasurementDb::from_rows(vec![row("r", c[0], 1.0, 1.0), row("r", c[0], 2.0, 1.0)]),
            Err(DatasetError::Duplicate { .. })
        ));
        let db = MeasurementDb::from_rows(vec![row("r", c[0], 1.0, 1.0)]).unwrap();
        let err = label_for(&db, "r", &m, Task::FastestAtCap(10)).unwrap_err();
        assert!(matches!(err, DatasetError::IncompleteSweep { .. }));
        assert!(err.to_string().contains("10W:1:STATIC:8"), "{err}");
        assert!(MeasurementDb::from_rows(vec![row("r", c[0], 0.0, 1.0)]).is_err());
    }

    #[test]
    fn jsonl_format() {
        let m = MachineProfile::skylake();
        let c = default_config(&m, 150).unwrap();
        let mut r = row("app0/x", c, 1.5, 2.25);
        r.counters = Some([1.0, 2.0, 3.0, 4.0, 5.0]);
        let db = MeasurementDb::from_rows(vec![r]).unwrap();
        let mut out = Vec::new();
        db.write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "{\"region_id\":\"app0/x\",\"power_cap\":150,\"threads\":64,\"schedule\":\"STATIC\",\"chunk\":\"DEFAULT\",\"is_default\":true,\"time_s\":1.5,\"energy_j\":2.25,\"counters\":[1.0,2.0,3.0,4.0,5.0]}\n"
        );
        let back = MeasurementDb::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back.rows(), db.rows());
        assert!(matches!(MeasurementDb::read_jsonl("{\"region_id\":1}\n".as_bytes()), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn extras_normalization() {
        let m = MachineProfile::skylake();
        let a = [10.0, 100.0, 1000.0, 1e4, 1e5];
        let b = [1000.0, 1e4, 1e5, 1e6, 1e7];
        let stats = CounterStats::fit([&a, &b]).unwrap();
        let mid = [100.0, 1000.0, 1e4, 1e5, 1e6];
        let f = normalize_extras(&mid, Some(150), &m, &stats).unwrap();
        assert_eq!(f.len(), 6);
        assert!(f[..5].iter().all(|v| v.abs() < 1e-12), "{f:?}");
        assert_eq!(f[5], 1.0);
        assert_eq!(normalize_extras(&mid, Some(75), &m, &stats).unwrap()[5], 0.5);
        assert_eq!(normalize_extras(&mid, None, &m, &stats).unwrap().len(), 5);
        assert!(matches!(
            normalize_extras(&[0.0, 1.0, 1.0, 1.0, 1.0], None, &m, &stats),
            Err(DatasetError::NonPositiveCounter { index: 0, .. })
        ));
    }
}
