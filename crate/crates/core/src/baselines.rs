//! Reference tuners: exhaustive oracle, default configuration, budgeted random
//! sampling and greedy hill climbing.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use crate::dataset::default_config;
use crate::dataset::{
    argmin_class, class_list, enumerate_search_space, Chunk, Config, DatasetError, MachineProfile, MeasurementDb, Outcome,
    Schedule, Task, CHUNK_SIZES,
};
use crate::graph::ProgramGraph;
use crate::simulator::{graph_stats, row_seed, simulate, RegionStats, SimError, SimParams};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("cannot sample {k} distinct configurations from {classes}")]
    BudgetTooLarge { k: usize, classes: usize },
    #[error("unknown tuner {0:?}")]
    UnknownTuner(String),
}

/// Runs a configuration and reports its outcome.
pub trait Evaluator {
    fn evaluate(&mut self, config: &Config) -> Result<Outcome, BaselineError>;
    fn calls(&self) -> usize;
}

/// Looks outcomes up in a complete sweep.
pub struct DbEvaluator<'a> {
    db: &'a MeasurementDb,
    region: &'a str,
    calls: usize,
}

impl<'a> DbEvaluator<'a> {
    pub fn new(db: &'a MeasurementDb, region: &'a str) -> Self {
        DbEvaluator { db, region, calls: 0 }
    }
}

impl Evaluator for DbEvaluator<'_> {
    fn evaluate(&mut self, config: &Config) -> Result<Outcome, BaselineError> {
        self.calls += 1;
        Ok(self.db.require(self.region, config)?.outcome())
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

/// Runs the simulator on demand, with the same per-row seeds as a sweep.
pub struct SimEvaluator<'a> {
    stats: RegionStats,
    region: &'a str,
    machine: &'a MachineProfile,
    params: SimParams,
    seed: u64,
    index: HashMap<Config, usize>,
    calls: usize,
}

impl<'a> SimEvaluator<'a> {
    pub fn new(region: &'a str, graph: &ProgramGraph, machine: &'a MachineProfile, params: SimParams, seed: u64) -> Self {
        let index = enumerate_search_space(machine).into_iter().enumerate().map(|(i, c)| (c, i)).collect();
        SimEvaluator { stats: graph_stats(graph), region, machine, params, seed, index, calls: 0 }
    }
}

impl Evaluator for SimEvaluator<'_> {
    fn evaluate(&mut self, config: &Config) -> Result<Outcome, BaselineError> {
        self.calls += 1;
        let k = *self.index.get(config).ok_or(SimError::OutsideSpace(*config))?;
        let out = simulate(&self.stats, config, self.machine, &self.params, row_seed(self.seed, self.region, k))?;
        Ok(Outcome { time: out.time, energy: out.energy })
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

/// Exhaustive best configuration under `task`, with the labeling tie rules.
pub fn oracle_best(db: &MeasurementDb, machine: &MachineProfile, region: &str, task: Task) -> Result<Config, BaselineError> {
    let classes = class_list(machine, task)?;
    let outcomes = db.outcomes(region, &classes)?;
    Ok(classes[argmin_class(&outcomes, task).expect("class lists are never empty")])
}

/// Best of `k` distinct configurations drawn uniformly from the task's class list.
pub fn random_k(
    eval: &mut impl Evaluator,
    machine: &MachineProfile,
    task: Task,
    k: usize,
    seed: u64,
) -> Result<Config, BaselineError> {
    if k == 0 {
        return Err(BaselineError::ZeroBudget);
    }
    let classes = class_list(machine, task)?;
    if k > classes.len() {
        return Err(BaselineError::BudgetTooLarge { k, classes: classes.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, classes.len(), k).into_vec();
    // Sorting keeps the class-index tie rule of the oracle.
    picks.sort_unstable();
    let mut best: Option<(usize, Outcome)> = None;
    for i in picks {
        let o = eval.evaluate(&classes[i])?;
        if best.as_ref().is_none_or(|(_, b)| o.beats(b, task)) {
            best = Some((i, o));
        }
    }
    Ok(classes[best.expect("k >= 1").0])
}

/// Position of a configuration on the tuning grid. The default configuration
/// sits where its stand-in chunk size would.
fn coords(machine: &MachineProfile, c: &Config) -> (usize, usize, usize, usize) {
    let cap = machine.power_caps.iter().position(|&p| p == c.power_cap).unwrap_or(0);
    let threads = machine.thread_counts.iter().position(|&t| t == c.threads).unwrap_or(0);
    let chunk = CHUNK_SIZES.iter().position(|&s| s == c.chunk.effective()).unwrap_or(0);
    (cap, threads, c.schedule as usize, chunk)
}

/// Single-dimension moves: adjacent thread count, other schedules, adjacent
/// chunk, and adjacent cap when the task spans caps.
fn neighbors(machine: &MachineProfile, c: &Config, task: Task) -> Vec<Config> {
    let (cap, t, s, k) = coords(machine, c);
    let at = |cap: usize, t: usize, s: usize, k: usize| Config {
        power_cap: machine.power_caps[cap],
        threads: machine.thread_counts[t],
        schedule: Schedule::ALL[s],
        chunk: Chunk::Size(CHUNK_SIZES[k]),
        is_default: false,
    };
    let mut out = Vec::new();
    if t > 0 {
        out.push(at(cap, t - 1, s, k));
    }
    if t + 1 < machine.thread_counts.len() {
        out.push(at(cap, t + 1, s, k));
    }
    out.extend((0..Schedule::ALL.len()).filter(|&o| o != s).map(|o| at(cap, t, o, k)));
    if k > 0 {
        out.push(at(cap, t, s, k - 1));
    }
    if k + 1 < CHUNK_SIZES.len() {
        out.push(at(cap, t, s, k + 1));
    }
    if task == Task::MinEdp {
        if cap > 0 {
            out.push(at(cap - 1, t, s, k));
        }
        if cap + 1 < machine.power_caps.len() {
            out.push(at(cap + 1, t, s, k));
        }
    }
    if c.is_default {
        // The stand-in twin is a real configuration, reachable as a move.
        out.push(at(cap, t, s, k));
    }
    out
}

/// Greedy steepest-descent walk from the default configuration. Stops at a
/// local optimum or after `budget` evaluations; returns the best seen.
pub fn hill_climb(
    eval: &mut impl Evaluator,
    machine: &MachineProfile,
    task: Task,
    budget: usize,
    seed: u64,
) -> Result<Config, BaselineError> {
    if budget == 0 {
        return Err(BaselineError::ZeroBudget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = task.baseline(machine)?;
    let mut current_out = eval.evaluate(&current)?;
    let mut used = 1;
    let mut seen: HashMap<Config, Outcome> = HashMap::from([(current, current_out)]);
    let (mut best, mut best_out) = (current, current_out);
    loop {
        let mut moves = neighbors(machine, &current, task);
        moves.shuffle(&mut rng);
        let mut step: Option<(Config, Outcome)> = None;
        let mut exhausted = false;
        for m in moves {
            let out = match seen.get(&m) {
                Some(o) => *o,
                None if used < budget => {
                    used += 1;
                    let o = eval.evaluate(&m)?;
                    seen.insert(m, o);
                    o
                }
                None => {
                    exhausted = true;
                    break;
                }
            };
            if out.beats(&current_out, task) && step.as_ref().is_none_or(|(_, s)| out.beats(s, task)) {
                step = Some((m, out));
            }
            if out.beats(&best_out, task) {
                (best, best_out) = (m, out);
            }
        }
        match step {
            Some((c, o)) if !exhausted => {
                current = c;
                current_out = o;
            }
            _ => return Ok(best),
        }
    }
}

/// A reference tuner as named in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Oracle,
    Default,
    Random(usize),
    HillClimb(usize),
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Oracle => f.write_str("oracle"),
            Baseline::Default => f.write_str("default"),
            Baseline::Random(k) => write!(f, "random{k}"),
            Baseline::HillClimb(k) => write!(f, "hillclimb{k}"),
        }
    }
}

impl FromStr for Baseline {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let budget = |rest: &str| rest.parse::<usize>().ok().filter(|&k| k > 0);
        match s {
            "oracle" => Ok(Baseline::Oracle),
            "default" => Ok(Baseline::Default),
            _ => {
                if let Some(k) = s.strip_prefix("random").and_then(budget) {
                    Ok(Baseline::Random(k))
                } else if let Some(k) = s.strip_prefix("hillclimb").and_then(budget) {
                    Ok(Baseline::HillClimb(k))
                } else {
                    Err(BaselineError::UnknownTuner(s.to_string()))
                }
            }
        }
    }
}

impl Baseline {
    /// The tuner's choice for `region`, evaluated against a complete sweep.
    pub fn choose(self, db: &MeasurementDb, machine: &MachineProfile, region: &str, task: Task, seed: u64) -> Result<Config, BaselineError> {
        let region_seed = row_seed(seed, region, 0);
        match self {
            Baseline::Oracle => oracle_best(db, machine, region, task),
            Baseline::Default => Ok(task.baseline(machine)?),
            Baseline::Random(k) => random_k(&mut DbEvaluator::new(db, region), machine, task, k, region_seed),
            Baseline::HillClimb(k) => hill_climb(&mut DbEvaluator::new(db, region), machine, task, k, region_seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{derive_labels, Measurement};
    use crate::graph::build_graph;
    use crate::mir::{generate_region, Family, RegionFamily};
    use crate::par::Execution;
    use crate::simulator::sweep;

    /// Evaluator over a closure, recording every configuration it ran.
    struct Toy<F: Fn(&Config) -> Outcome> {
        f: F,
        log: Vec<Config>,
    }

    impl<F: Fn(&Config) -> Outcome> Evaluator for Toy<F> {
        fn evaluate(&mut self, config: &Config) -> Result<Outcome, BaselineError> {
            self.log.push(*config);
            Ok((self.f)(config))
        }

        fn calls(&self) -> usize {
            self.log.len()
        }
    }

    fn toy<F: Fn(&Config) -> Outcome>(f: F) -> Toy<F> {
        Toy { f, log: Vec::new() }
    }

    fn corpus_region(family: Family) -> (String, ProgramGraph, MeasurementDb) {
        let m = MachineProfile::skylake();
        let id = format!("app/{family}_s2");
        let g = build_graph(&generate_region(&RegionFamily::new(family, 2, 3)).unwrap()).unwrap();
        let rows = sweep(&id, &g, &m, &SimParams::default(), 0, Execution::Sequential);
        (id, g, MeasurementDb::from_rows(rows).unwrap())
    }

    #[test]
    fn default_configs() {
        let d = default_config(&MachineProfile::skylake(), 150).unwrap();
        assert_eq!((d.threads, d.schedule, d.chunk, d.is_default), (64, Schedule::Static, Chunk::Default, true));
        let h = default_config(&MachineProfile::haswell(), 40).unwrap();
        assert_eq!((h.threads, h.schedule, h.chunk), (32, Schedule::Static, Chunk::Default));
        assert!(default_config(&MachineProfile::skylake(), 90).is_err());
    }

    fn three_row_db(outcomes: [(f64, f64); 3]) -> (MeasurementDb, Vec<Config>) {
        let m = MachineProfile::skylake();
        let configs: Vec<Config> = class_list(&m, Task::FastestAtCap(150)).unwrap()[..3].to_vec();
        let rows = configs
            .iter()
            .zip(outcomes)
            .map(|(c, (e, t))| Measurement { region_id: "a/r".into(), config: *c, time: t, energy: e, counters: None })
            .collect();
        (MeasurementDb::from_rows(rows).unwrap(), configs)
    }

    #[test]
    fn toy_oracles() {
        let (db, configs) = three_row_db([(1.0, 2.0), (1.0, 1.0), (1.0, 3.0)]);
        let classes = &configs;
        let outcomes = db.outcomes("a/r", classes).unwrap();
        assert_eq!(argmin_class(&outcomes, Task::FastestAtCap(150)), Some(1));
        let (db, configs) = three_row_db([(2.0, 3.0), (1.0, 5.0), (4.0, 4.0)]);
        let outcomes = db.outcomes("a/r", &configs[..2]).unwrap();
        assert_eq!(argmin_class(&outcomes, Task::MinEdp), Some(1));
    }

    #[test]
    fn oracle_matches_labels() {
        let m = MachineProfile::skylake();
        let (id, g, db) = corpus_region(Family::Mixed);
        for task in [Task::FastestAtCap(75), Task::FastestAtCap(150), Task::MinEdp] {
            let label = derive_labels(&db, &[(id.clone(), g.clone())], &m, task).unwrap()[0].label;
            assert_eq!(oracle_best(&db, &m, &id, task).unwrap(), class_list(&m, task).unwrap()[label]);
        }
        assert!(oracle_best(&db, &m, "missing/x", Task::MinEdp).is_err());
    }

    #[test]
    fn random_limits() {
        let m = MachineProfile::skylake();
        let (id, g, db) = corpus_region(Family::Streaming);
        let task = Task::FastestAtCap(100);
        let mut ev = DbEvaluator::new(&db, &id);
        assert_eq!(random_k(&mut ev, &m, task, 127, 5).unwrap(), oracle_best(&db, &m, &id, task).unwrap());
        assert_eq!(ev.calls(), 127);
        let mut single = toy(|c: &Config| Outcome { time: c.threads as f64, energy: 1.0 });
        let pick = random_k(&mut single, &m, task, 1, 9).unwrap();
        assert_eq!(single.log, vec![pick]);
        assert!(matches!(random_k(&mut single, &m, task, 128, 9), Err(BaselineError::BudgetTooLarge { k: 128, classes: 127 })));
        assert!(matches!(random_k(&mut single, &m, task, 0, 9), Err(BaselineError::ZeroBudget)));
        let mut sim = SimEvaluator::new(&id, &g, &m, SimParams::default(), 0);
        let mut dbe = DbEvaluator::new(&db, &id);
        assert_eq!(random_k(&mut sim, &m, task, 20, 1).unwrap(), random_k(&mut dbe, &m, task, 20, 1).unwrap());
        assert_eq!(sim.calls(), 20);
    }

    #[test]
    fn random_reports_only_evaluated() {
        let m = MachineProfile::haswell();
        let mut ev = toy(|c: &Config| Outcome { time: 1.0 / c.threads as f64 + c.chunk.effective() as f64, energy: 2.0 });
        for seed in 0..20 {
            ev.log.clear();
            let pick = random_k(&mut ev, &m, Task::MinEdp, 20, seed).unwrap();
            assert!(ev.log.contains(&pick));
            assert_eq!(ev.log.len(), 20);
        }
    }

    #[test]
    fn hill_budget_one_is_default() {
        let m = MachineProfile::skylake();
        let mut ev = toy(|c: &Config| Outcome { time: 1.0 / c.threads as f64, energy: 1.0 });
        let pick = hill_climb(&mut ev, &m, Task::FastestAtCap(120), 1, 0).unwrap();
        assert_eq!(pick, default_config(&m, 120).unwrap());
        assert_eq!(ev.calls(), 1);
        assert!(matches!(hill_climb(&mut ev, &m, Task::MinEdp, 0, 0), Err(BaselineError::ZeroBudget)));
    }

    #[test]
    fn hill_climbs_unimodal_surfaces() {
        let m = MachineProfile::skylake();
        // Faster with more threads: the walk keeps t_max.
        let mut ev = toy(|c: &Config| Outcome { time: 10.0 - c.threads as f64 / 10.0, energy: 1.0 });
        assert_eq!(hill_climb(&mut ev, &m, Task::FastestAtCap(150), 20, 1).unwrap().threads, 64);
        // Faster with larger chunks: 64 -> 128 -> 256 -> 512.
        let mut ev = toy(|c: &Config| Outcome { time: 1.0 / c.chunk.effective() as f64 + c.schedule as usize as f64, energy: 1.0 });
        let pick = hill_climb(&mut ev, &m, Task::FastestAtCap(150), 20, 1).unwrap();
        assert_eq!(pick.chunk, Chunk::Size(512));
        assert!(ev.calls() <= 20);
        assert!(ev.log.contains(&pick));
    }

    #[test]
    fn hill_budget_exhaustion() {
        let m = MachineProfile::skylake();
        // Strictly improving along chunk and threads, never a local optimum within 5 calls.
        let mut ev = toy(|c: &Config| Outcome { time: 1e3 - c.chunk.effective() as f64 - c.threads as f64, energy: 1.0 });
        let pick = hill_climb(&mut ev, &m, Task::MinEdp, 5, 2).unwrap();
        assert_eq!(ev.calls(), 5);
        assert!(ev.log.contains(&pick));
        let best = ev.log.iter().min_by(|a, b| (ev.f)(a).time.total_cmp(&(ev.f)(b).time)).unwrap();
        assert_eq!(&pick, best);
    }

    #[test]
    fn tuner_names() {
        for s in ["oracle", "default", "random20", "hillclimb20"] {
            assert_eq!(s.parse::<Baseline>().unwrap().to_string(), s);
        }
        assert!("random0".parse::<Baseline>().is_err());
        assert!("bliss".parse::<Baseline>().is_err());
    }

    #[test]
    fn oracle_dominates() {
        let m = MachineProfile::skylake();
        let (id, _, db) = corpus_region(Family::Branchy);
        for task in [Task::FastestAtCap(75), Task::MinEdp] {
            let best = db.require(&id, &oracle_best(&db, &m, &id, task).unwrap()).unwrap().outcome().objective(task);
            for b in [Baseline::Default, Baseline::Random(20), Baseline::HillClimb(20)] {
                let c = b.choose(&db, &m, &id, task, 4).unwrap();
                assert!(best <= db.require(&id, &c).unwrap().outcome().objective(task));
            }
        }
    }
}
