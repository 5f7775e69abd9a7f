//! Shared generators for integration tests: random synthetic topologies,
//! workflows and plans, plus the reference cost oracle.

#![allow(dead_code)]

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlsched::plan::{GpuGrouping, Provenance, TaskGrouping, TaskletAssignment};
use rlsched::topology::{Device, LinkDefaults, RegionLink, TopologyFile};
use rlsched::workflow::{Algorithm, BatchConfig, Mode, ModelRole, ModelSpec, RlTask, TaskKind, BF16_BYTES, FP32_BYTES};
use rlsched::{build_workflow, DeviceTopology, ParallelLayout, Plan, WorkflowGraph};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// |a − b| ≤ tol · max(|a|, |b|), exact for zeros.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Synthetic pool of `n` devices over up to three regions and a few nodes.
/// `mem_gb` spans tiny to large so decode batches hit both clamp bounds.
pub fn random_topology_file(rng: &mut impl Rng, n: usize) -> TopologyFile {
    let regions = rng.gen_range(1..=3.min(n));
    let mut devices = Vec::with_capacity(n);
    for d in 0..n {
        let region = rng.gen_range(0..regions);
        let node = rng.gen_range(0..2);
        devices.push(Device {
            id: format!("d{d}"),
            gpu_model: ["X", "Y", "Z"][rng.gen_range(0..3)].to_string(),
            comp_tflops: log_uniform(rng, 1e-9, 1e-3),
            mem_gb: log_uniform(rng, 1e-5, 1.0),
            hbm_gbps: log_uniform(rng, 1e-6, 1e-2),
            intra_node_gbps: log_uniform(rng, 1e-3, 1.0),
            node: format!("n{node}"),
            region: format!("r{region}"),
            edge_bandwidth_gbps: rng.gen_bool(0.15).then(|| log_uniform(rng, 1e-3, 1.0)),
        });
    }
    let mut region_links = Vec::new();
    for a in 0..regions {
        for b in a + 1..regions {
            region_links.push(RegionLink {
                src: format!("r{a}"),
                dst: format!("r{b}"),
                latency_ms: rng.gen_range(0.0..50.0),
                bandwidth_gbps: log_uniform(rng, 1e-3, 1.0),
            });
        }
    }
    TopologyFile {
        devices,
        region_links,
        defaults: LinkDefaults {
            intra_region_latency_ms: rng.gen_range(0.0..2.0),
            intra_region_bandwidth_gbps: log_uniform(rng, 1e-2, 10.0),
        },
    }
}

pub fn random_topology(rng: &mut impl Rng, n: usize) -> DeviceTopology {
    DeviceTopology::from_file(random_topology_file(rng, n)).expect("generated topology is valid")
}

pub fn random_model(rng: &mut impl Rng) -> ModelSpec {
    let h1 = rng.gen_range(2..=32);
    let h2 = rng.gen_range(2..=64);
    let nl = rng.gen_range(1..=6);
    let embed = rng.gen_bool(0.3);
    ModelSpec::with_embeddings(h1, h2, nl, if embed { rng.gen_range(1..=50) } else { 0 }, embed).unwrap()
}

pub fn random_batch(rng: &mut impl Rng) -> BatchConfig {
    BatchConfig {
        global_batch: rng.gen_range(1..=8),
        responses_per_prompt: rng.gen_range(1..=4),
        seq_in: rng.gen_range(1..=32),
        seq_out: rng.gen_range(0..=32),
        micro_batch_size: rng.gen_range(1..=4),
        seqlen_histogram: None,
    }
}

/// PPO, GRPO or a small custom DAG over synthetic models.
pub fn random_workflow(rng: &mut impl Rng) -> WorkflowGraph {
    let mode = if rng.gen_bool(0.5) { Mode::Sync } else { Mode::Async };
    let eta = if rng.gen_bool(0.2) {
        [0.0, 1.0][rng.gen_range(0..2)]
    } else {
        rng.gen_range(0.0..=1.0)
    };
    let batch = random_batch(rng);
    let mut wf = match rng.gen_range(0..3) {
        0 | 1 => {
            let algorithm = if rng.gen_bool(0.5) {
                Algorithm::Ppo
            } else {
                Algorithm::Grpo
            };
            let models: BTreeMap<ModelRole, ModelSpec> = [
                ModelRole::Actor,
                ModelRole::Critic,
                ModelRole::Reward,
                ModelRole::Reference,
            ]
            .into_iter()
            .map(|r| (r, random_model(rng)))
            .collect();
            build_workflow(algorithm, mode, &models, batch, eta).unwrap()
        }
        _ => {
            let n = rng.gen_range(1..=3u8);
            let kinds = [TaskKind::Generation, TaskKind::Inference, TaskKind::Training];
            let roles = [
                ModelRole::Actor,
                ModelRole::Critic,
                ModelRole::Reward,
                ModelRole::Reference,
            ];
            let tasks = (1..=n)
                .map(|id| RlTask {
                    id,
                    kind: *kinds.choose(rng).unwrap(),
                    role: *roles.choose(rng).unwrap(),
                    model: random_model(rng),
                    precision_bytes: if rng.gen_bool(0.8) { BF16_BYTES } else { FP32_BYTES },
                })
                .collect();
            let mut edges = BTreeSet::new();
            for a in 1..=n {
                for b in a + 1..=n {
                    if rng.gen_bool(0.5) {
                        edges.insert((a, b));
                    }
                }
            }
            WorkflowGraph::custom(mode, tasks, edges, batch, eta).unwrap()
        }
    };
    let cm = &mut wf.cost_model;
    cm.recompute = rng.gen_bool(0.7);
    if rng.gen_bool(0.2) {
        cm.decode_batch_size = Some(rng.gen_range(1..=8) as f64);
    }
    if rng.gen_bool(0.2) {
        cm.reshard_cost_s = Some(rng.gen_range(0.0..2.0));
        cm.sync_cost_s = Some(rng.gen_range(0.0..2.0));
    }
    wf
}

/// Uniformly random positive parts of `total` into `k` pieces.
pub fn random_composition(rng: &mut impl Rng, total: usize, k: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..total)
        .collect::<Vec<_>>()
        .choose_multiple(rng, k - 1)
        .copied()
        .collect();
    cuts.sort_unstable();
    let mut parts = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain([total]) {
        parts.push(c - prev);
        prev = c;
    }
    parts
}

/// (dp, pp, tp) with product `size` and pp ≤ `layers`.
pub fn layout_triples(size: usize, layers: u32) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for dp in (1..=size).filter(|d| size.is_multiple_of(*d)) {
        for pp in (1..=size / dp).filter(|p| (size / dp).is_multiple_of(*p) && *p <= layers as usize) {
            out.push((dp, pp, size / dp / pp));
        }
    }
    out
}

/// A random layout over `size` devices with random stage splits and replica weights.
pub fn random_layout(rng: &mut impl Rng, size: usize, layers: u32) -> ParallelLayout {
    let (dp, pp, tp) = *layout_triples(size, layers).choose(rng).unwrap();
    let raw: Vec<f64> = (0..dp).map(|_| rng.gen_range(0.25..2.0)).collect();
    let sum: f64 = raw.iter().sum();
    let weights = if rng.gen_bool(0.5) {
        vec![1.0; dp]
    } else {
        raw.iter().map(|w| w * dp as f64 / sum).collect()
    };
    ParallelLayout {
        dp,
        pp,
        tp,
        stage_layers: random_composition(rng, layers as usize, pp)
            .into_iter()
            .map(|l| l as u32)
            .collect(),
        replica_batch_weights: weights,
        seqlen_assignment: None,
    }
}

/// A structurally valid plan (C1, C2) with random grouping, layouts and placement.
pub fn random_plan(rng: &mut impl Rng, wf: &WorkflowGraph, topo: &DeviceTopology) -> Plan {
    let n = topo.len();
    let ids = wf.task_ids();
    let k = rng.gen_range(1..=ids.len().min(n));
    // random surjection of tasks onto k groups
    let mut labels: Vec<usize> = (0..ids.len())
        .map(|p| if p < k { p } else { rng.gen_range(0..k) })
        .collect();
    labels.shuffle(rng);
    let mut groups = vec![Vec::new(); k];
    for (&t, &l) in ids.iter().zip(&labels) {
        groups[l].push(t);
    }
    let counts = random_composition(rng, n, k);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut layouts = BTreeMap::new();
    let mut per_task = BTreeMap::new();
    let mut at = 0;
    for (g, tasks) in groups.iter().enumerate() {
        let devs = &order[at..at + counts[g]];
        at += counts[g];
        for &t in tasks {
            let layout = random_layout(rng, counts[g], wf.task(t).unwrap().model.num_layers);
            let mut placed = devs.to_vec();
            placed.shuffle(rng);
            layouts.insert(t, layout);
            per_task.insert(t, placed);
        }
    }
    Plan {
        task_grouping: TaskGrouping::new(groups),
        gpu_grouping: GpuGrouping::new(counts),
        layouts,
        assignment: TaskletAssignment { per_task },
        provenance: Provenance::default(),
    }
}
