use std::collections::BTreeSet;

use proptest::prelude::*;

use pnptune::baselines::{hill_climb, oracle_best, random_k, DbEvaluator, Evaluator};
use pnptune::dataset::{class_list, loocv_splits, MachineProfile, Task};
use pnptune::graph::{build_graph, export_graph, import_graph, Flow, NodeKind};
use pnptune::mir::{generate_region, parse_named, Family, RegionFamily};
use pnptune::nn::{forward, init_model, ModelSpec, PreparedGraph};
use pnptune::par::Execution;
use pnptune::simulator::SimParams;
use pnptune::tuner::Corpus;

fn family() -> impl Strategy<Value = Family> {
    proptest::sample::select(Family::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_modules_round_trip(f in family(), size in 1u32..7, seed in any::<u64>()) {
        let m = generate_region(&RegionFamily::new(f, size, seed)).unwrap();
        prop_assert_eq!(parse_named(&m.to_text(), &m.source_name).unwrap(), m.clone());
        prop_assert_eq!(generate_region(&RegionFamily::new(f, size, seed)).unwrap(), m);
    }

    #[test]
    fn graphs_are_well_formed(f in family(), size in 1u32..7, seed in any::<u64>()) {
        let m = generate_region(&RegionFamily::new(f, size, seed)).unwrap();
        let g = build_graph(&m).unwrap();
        let insts = m.instructions().count();
        prop_assert_eq!(g.count_kind(NodeKind::Instruction), insts);
        prop_assert!(g.edges.iter().all(|e| e.src < g.node_count() && e.dst < g.node_count()));
        // control and call flow stay among instructions
        prop_assert!(g.edges.iter().filter(|e| e.flow != Flow::Data).all(|e| e.src < insts && e.dst < insts));
        // data flow always touches exactly one instruction
        prop_assert!(g.edges.iter().filter(|e| e.flow == Flow::Data).all(|e| (e.src < insts) != (e.dst < insts)));
        prop_assert_eq!(g.count_flow(Flow::Call) > 0, f == Family::Calls);
        prop_assert_eq!(import_graph(&export_graph(&g)).unwrap(), g);
    }

    #[test]
    fn splits_partition(groups in proptest::collection::vec(0u8..5, 2..40)) {
        let ids: Vec<String> = groups.iter().map(|g| format!("app{g}")).collect();
        let distinct: BTreeSet<&String> = ids.iter().collect();
        prop_assume!(distinct.len() >= 2);
        let folds = loocv_splits(&ids).unwrap();
        prop_assert_eq!(folds.len(), distinct.len());
        let mut seen = vec![0; ids.len()];
        for f in &folds {
            for &v in &f.validation {
                seen[v] += 1;
                prop_assert_eq!(&ids[v], &f.application);
            }
            prop_assert!(f.train.iter().all(|&t| ids[t] != f.application));
            prop_assert_eq!(f.train.len() + f.validation.len(), ids.len());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn node_order_does_not_change_logits(f in family(), seed in any::<u64>(), perm_seed in any::<u64>()) {
        let g = build_graph(&generate_region(&RegionFamily::new(f, 2, seed)).unwrap()).unwrap();
        let params = init_model(ModelSpec::new(7, 0), seed);
        let mut perm: Vec<usize> = (0..g.node_count()).collect();
        let mut state = perm_seed;
        for i in (1..perm.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = forward(&params, &PreparedGraph::new(&g, &params.spec).unwrap(), &[]).unwrap();
        let b = forward(&params, &PreparedGraph::new(&g.permuted(&perm), &params.spec).unwrap(), &[]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn searchers_never_beat_the_oracle(seed in any::<u64>(), k in 1usize..40, cap_index in 0usize..5) {
        let corpus = small_corpus();
        let m = &corpus.machine;
        let task = if cap_index == 4 { Task::MinEdp } else { Task::FastestAtCap(m.power_caps[cap_index]) };
        let classes = class_list(m, task).unwrap();
        for (region, _) in &corpus.graphs {
            let best = corpus.db.require(region, &oracle_best(&corpus.db, m, region, task).unwrap()).unwrap().outcome();
            let mut eval = DbEvaluator::new(&corpus.db, region);
            let r = random_k(&mut eval, m, task, k, seed).unwrap();
            prop_assert_eq!(eval.calls(), k);
            let mut eval = DbEvaluator::new(&corpus.db, region);
            let h = hill_climb(&mut eval, m, task, k, seed).unwrap();
            prop_assert!(eval.calls() <= k);
            for c in [r, h] {
                prop_assert!(classes.contains(&c));
                let o = corpus.db.require(region, &c).unwrap().outcome();
                prop_assert!(o.objective(task) >= best.objective(task));
            }
        }
    }
}

fn small_corpus() -> &'static Corpus {
    static C: std::sync::OnceLock<Corpus> = std::sync::OnceLock::new();
    C.get_or_init(|| {
        let graphs = [Family::Doall, Family::Streaming, Family::Nested]
            .iter()
            .map(|&f| {
                let m = generate_region(&RegionFamily::new(f, 2, 9)).unwrap();
                (format!("app0/{}", f), build_graph(&m).unwrap())
            })
            .collect();
        Corpus::simulate(MachineProfile::haswell(), graphs, &SimParams::default(), 0, Execution::Sequential).unwrap()
    })
}
