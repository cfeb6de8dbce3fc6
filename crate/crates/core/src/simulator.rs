//! Deterministic analytic stand-in for running a region under a power cap.
//!
//! Time follows an Amdahl split: the serial share runs on one core at the
//! per-core frequency factor `phi`, the parallel share splits compute across
//! threads (inflated by a schedule-dependent imbalance/overhead factor) and
//! memory traffic across at most `mem_scal_limit` threads. Per-core dynamic
//! power scales as `phi^alpha`, and `phi` is the largest factor the cap allows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dataset::{enumerate_search_space, Config, Counters, MachineProfile, Measurement, Schedule};
use crate::graph::{NodeKind, ProgramGraph};
use crate::mir::Opcode;
use crate::par::{self, Execution};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("configuration {0} is outside the machine's search space")]
    OutsideSpace(Config),
}

/// Instruction-mix summary of a region graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats {
    /// add, sub, mul, div, fma, cmp, index, phi
    pub compute: u64,
    /// load, store, alloca
    pub memory: u64,
    /// br, condbr
    pub branches: u64,
    pub variables: u64,
    pub parallel_fraction: f64,
    pub imbalance: f64,
}

impl RegionStats {
    pub fn from_counts(compute: u64, memory: u64, branches: u64, variables: u64) -> Self {
        let (c, m, b) = (compute as f64, memory as f64, branches as f64);
        RegionStats {
            compute,
            memory,
            branches,
            variables,
            parallel_fraction: ((c + m) / (c + m + 4.0 * b + 2.0)).min(0.99),
            imbalance: b / (b + c + 1.0),
        }
    }
}

pub fn graph_stats(graph: &ProgramGraph) -> RegionStats {
    let (mut c, mut m, mut b) = (0, 0, 0);
    for op in graph.opcodes() {
        match op {
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Div | Opcode::Fma | Opcode::Cmp | Opcode::Index | Opcode::Phi => c += 1,
            Opcode::Load | Opcode::Store | Opcode::Alloca => m += 1,
            Opcode::Br | Opcode::CondBr => b += 1,
            Opcode::Call | Opcode::Ret => {}
        }
    }
    RegionStats::from_counts(c, m, b, graph.count_kind(NodeKind::Variable) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// seconds per compute instruction
    pub tau_c: f64,
    /// seconds per memory instruction
    pub tau_m: f64,
    pub n_iter: f64,
    /// per-chunk scheduling overhead coefficient
    pub kappa_d: f64,
    pub phi_min: f64,
    pub noise_sigma: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams { tau_c: 1e-9, tau_m: 4e-9, n_iter: 1e4, kappa_d: 0.02, phi_min: 0.3, noise_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOutcome {
    pub time: f64,
    pub energy: f64,
    /// Package power drawn, watts.
    pub power: f64,
    pub phi: f64,
    pub counters: Counters,
}

/// Per-core frequency factor allowed by `cap` with `threads` active cores.
pub fn frequency_factor(machine: &MachineProfile, params: &SimParams, cap: f64, threads: f64) -> f64 {
    let p_core = (machine.tdp as f64 - machine.p_idle) / machine.t_max as f64;
    let budget = ((cap - machine.p_idle) / (threads * p_core)).max(0.0);
    budget.powf(1.0 / machine.alpha).clamp(params.phi_min, 1.0)
}

pub fn simulate(
    stats: &RegionStats,
    config: &Config,
    machine: &MachineProfile,
    params: &SimParams,
    seed: u64,
) -> Result<SimOutcome, SimError> {
    if !config.is_valid_for(machine) {
        return Err(SimError::OutsideSpace(*config));
    }
    let n = params.n_iter;
    let (c, m, b) = (stats.compute as f64, stats.memory as f64, stats.branches as f64);
    let (p, i) = (stats.parallel_fraction, stats.imbalance);
    let t = config.threads as f64;
    let chunk = config.chunk.effective() as f64;

    let phi = frequency_factor(machine, params, config.power_cap as f64, t);
    let p_core = (machine.tdp as f64 - machine.p_idle) / machine.t_max as f64;
    let serial = n * (c * params.tau_c + m * params.tau_m);
    let overhead = params.kappa_d * t / (chunk + 1.0);
    let beta = match config.schedule {
        Schedule::Static => 1.0 + i * (1.0 - 1.0 / t),
        Schedule::Dynamic => 1.0 + overhead,
        Schedule::Guided => 1.0 + 0.5 * i * (1.0 - 1.0 / t) + 0.5 * overhead,
    };
    let mem_threads = t.min(machine.mem_scal_limit as f64);
    let parallel = n * c * params.tau_c / (phi * t) * beta + n * m * params.tau_m / mem_threads;
    let mut time = (1.0 - p) * serial / phi + p * parallel;
    // phi^alpha round trip can land an ulp above a binding cap
    let power = (machine.p_idle + t * p_core * phi.powf(machine.alpha)).min(config.power_cap as f64);
    let mut energy = power * time;

    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_t: f64 = StandardNormal.sample(&mut rng);
        let z_e: f64 = StandardNormal.sample(&mut rng);
        time *= (params.noise_sigma * z_t).exp();
        energy *= (params.noise_sigma * z_e).exp();
    }

    let l1 = n * m * 0.1;
    let l2 = l1 * 0.5;
    let l3 = l2 * (stats.variables as f64 / 32.0).min(1.0);
    let counters = [l1, l2, l3, n * (c + m + b), n * b * i];
    Ok(SimOutcome { time, energy, power, phi, counters })
}

/// Seed of the `index`-th configuration of `region`'s sweep.
pub fn row_seed(seed: u64, region_id: &str, index: usize) -> u64 {
    // FNV-1a over the region id, mixed with the base seed and row index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in region_id.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

/// One measurement per configuration of the search space, in canonical order.
pub fn sweep(
    region_id: &str,
    graph: &ProgramGraph,
    machine: &MachineProfile,
    params: &SimParams,
    seed: u64,
    exec: Execution,
) -> Vec<Measurement> {
    let stats = graph_stats(graph);
    let space: Vec<(usize, Config)> = enumerate_search_space(machine).into_iter().enumerate().collect();
    par::map(exec, &space, |&(k, config)| {
        let out = simulate(&stats, &config, machine, params, row_seed(seed, region_id, k))
            .expect("enumerated configs are in the search space");
        Measurement { region_id: region_id.to_string(), config, time: out.time, energy: out.energy, counters: Some(out.counters) }
    })
}
