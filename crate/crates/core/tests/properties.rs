//! Property tests over randomly generated workflows, topologies and plans.

mod common;

use common::oracle::oracle_cost;
use common::{random_plan, random_topology, random_topology_file, random_workflow, rel_close, rng};
use proptest::prelude::*;
use rlsched::cost::aggregate_phi;
use rlsched::search::{best_half, count_gpu_groupings, enumerate_gpu_groupings, enumerate_layouts};
use rlsched::topology::DeviceTopology;
use rlsched::{parse_plan, parse_topology, serialize_plan, CostModel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_agrees_on_random_configs(seed in any::<u64>(), n in 1usize..=8) {
        let mut r = rng(seed);
        let topo = random_topology(&mut r, n);
        let wf = random_workflow(&mut r);
        let plan = random_plan(&mut r, &wf, &topo);
        let got = CostModel::new(&wf, &topo).evaluate(&plan).unwrap();
        let want = oracle_cost(&plan, &wf, &topo);
        prop_assert!(rel_close(got.end_to_end, want.end_to_end, 1e-9));
        prop_assert!(rel_close(got.reshard, want.reshard, 1e-9));
        prop_assert!(rel_close(got.sync, want.sync, 1e-9));
        for (t, (id, o)) in got.tasks.iter().zip(&want.tasks) {
            prop_assert_eq!(t.task, *id);
            for (a, b) in [(t.comp, o.comp), (t.tp, o.tp), (t.pp, o.pp), (t.dp, o.dp), (t.bubble, o.bubble), (t.hbm, o.hbm), (t.total, o.total)] {
                prop_assert!(rel_close(a, b, 1e-9), "task {} {} vs {}", id, a, b);
            }
        }
    }

    #[test]
    fn components_are_finite_and_non_negative(seed in any::<u64>(), n in 1usize..=8) {
        let mut r = rng(seed);
        let topo = random_topology(&mut r, n);
        let wf = random_workflow(&mut r);
        let plan = random_plan(&mut r, &wf, &topo);
        let b = CostModel::new(&wf, &topo).evaluate(&plan).unwrap();
        for t in &b.tasks {
            for v in [t.comp, t.tp, t.pp, t.dp, t.bubble, t.hbm, t.total] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }
        prop_assert!(b.end_to_end.is_finite() && b.end_to_end >= 0.0);
    }

    #[test]
    fn phi_lies_between_max_and_sum(xs in prop::collection::vec(0.0f64..100.0, 1..6), eta in 0.0f64..=1.0) {
        let phi = aggregate_phi(&xs, eta).unwrap();
        let max = xs.iter().cloned().fold(0.0, f64::max);
        let sum: f64 = xs.iter().sum();
        prop_assert!(phi >= max - 1e-9 && phi <= sum + 1e-9);
    }

    #[test]
    fn identical_devices_are_interchangeable(seed in any::<u64>(), n in 2usize..=6) {
        let mut r = rng(seed);
        let mut file = random_topology_file(&mut r, n);
        let template = file.devices[0].clone();
        for (i, d) in file.devices.iter_mut().enumerate() {
            *d = rlsched::topology::Device { id: format!("d{i}"), ..template.clone() };
        }
        let topo = DeviceTopology::from_file(file).unwrap();
        let wf = random_workflow(&mut r);
        let plan = random_plan(&mut r, &wf, &topo);
        let mut shuffled = plan.clone();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut p[..], &mut r);
            p
        };
        for devs in shuffled.assignment.per_task.values_mut() {
            for d in devs.iter_mut() {
                *d = perm[*d];
            }
        }
        let model = CostModel::new(&wf, &topo);
        let a = model.evaluate(&plan).unwrap();
        let b = model.evaluate(&shuffled).unwrap();
        prop_assert!(rel_close(a.end_to_end, b.end_to_end, 1e-12));
    }

    #[test]
    fn plans_and_topologies_round_trip(seed in any::<u64>(), n in 1usize..=8) {
        let mut r = rng(seed);
        let topo = random_topology(&mut r, n);
        let text = topo.to_json().unwrap();
        let back = parse_topology(&text).unwrap();
        prop_assert_eq!(back.to_file(), topo.to_file());
        let wf = random_workflow(&mut r);
        let plan = random_plan(&mut r, &wf, &topo);
        let json = serialize_plan(&plan, &topo, None).unwrap();
        let parsed = parse_plan(&json).unwrap().resolve(&topo).unwrap();
        prop_assert_eq!(parsed, plan);
    }

    #[test]
    fn random_plans_validate(seed in any::<u64>(), n in 1usize..=8) {
        let mut r = rng(seed);
        let topo = random_topology(&mut r, n);
        let wf = random_workflow(&mut r);
        let plan = random_plan(&mut r, &wf, &topo);
        prop_assert!(plan.validate(&wf, &topo).is_ok());
    }

    #[test]
    fn compositions_match_their_count(n in 1usize..=24, k in 1usize..=5, q in 1usize..=4) {
        prop_assume!(k <= n);
        let all = enumerate_gpu_groupings(n, k, q).unwrap();
        prop_assert_eq!(all.len() as f64, count_gpu_groupings(n, k, q));
        for g in &all {
            prop_assert_eq!(g.counts.iter().sum::<usize>(), n);
            prop_assert!(g.counts.iter().all(|&c| c >= 1));
            prop_assert!(g.counts[..k - 1].iter().all(|c| c % q == 0));
        }
    }

    #[test]
    fn layouts_factor_their_group(size in 1usize..=64, layers in 1u32..=40, cap in 1usize..=8) {
        for (dp, pp, tp) in enumerate_layouts(size, layers, cap) {
            prop_assert_eq!(dp * pp * tp, size);
            prop_assert!(pp <= layers as usize && tp <= cap);
        }
    }

    #[test]
    fn best_half_keeps_the_lowest(scores in prop::collection::vec(0u8..10, 1..20)) {
        let arms: Vec<usize> = (0..scores.len()).collect();
        let kept = best_half(&arms, |i| scores[i] as f64);
        prop_assert_eq!(kept.len(), scores.len().div_ceil(2));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let worst_kept = kept.iter().map(|&i| scores[i]).max().unwrap();
        for i in arms.iter().filter(|i| !kept.contains(i)) {
            prop_assert!(scores[*i] >= worst_kept);
        }
    }
}
