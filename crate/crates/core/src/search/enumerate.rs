//! Combinatorial enumerations for the coarse search levels: task groupings
//! (set partitions), GPU groupings (integer compositions) and parallel
//! layouts (ordered factorisations).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{GpuGrouping, ParallelLayout, TaskGrouping};
use crate::workflow::{ModelRole, TaskId, TaskKind, WorkflowGraph};

/// Optional pruning of task groupings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level1Filter {
    #[default]
    Off,
    /// Tasks running the same model (actor generation and training, critic
    /// inference and training) share a group, so their weights stay put.
    ColocateModels,
}

/// Every set partition of the workflow's tasks in restricted-growth order.
pub fn enumerate_task_groupings(workflow: &WorkflowGraph) -> Vec<TaskGrouping> {
    enumerate_task_groupings_with(workflow, |_| true)
}

/// Set partitions accepted by `keep`.
pub fn enumerate_task_groupings_with(
    workflow: &WorkflowGraph,
    keep: impl Fn(&TaskGrouping) -> bool,
) -> Vec<TaskGrouping> {
    let ids = workflow.task_ids();
    let mut out = Vec::new();
    let mut labels = vec![0usize; ids.len()];
    fn rec(
        pos: usize,
        max: usize,
        ids: &[TaskId],
        labels: &mut [usize],
        out: &mut Vec<TaskGrouping>,
        keep: &dyn Fn(&TaskGrouping) -> bool,
    ) {
        if pos == ids.len() {
            let mut groups = vec![Vec::new(); max];
            for (&t, &l) in ids.iter().zip(labels.iter()) {
                groups[l].push(t);
            }
            let g = TaskGrouping::new(groups);
            if keep(&g) {
                out.push(g);
            }
            return;
        }
        for l in 0..=max {
            labels[pos] = l;
            rec(pos + 1, max.max(l + 1), ids, labels, out, keep);
        }
    }
    if !ids.is_empty() {
        rec(0, 0, &ids, &mut labels, &mut out, &keep);
    }
    out
}

/// Task groupings after applying `filter`.
pub fn filtered_task_groupings(workflow: &WorkflowGraph, filter: Level1Filter) -> Vec<TaskGrouping> {
    match filter {
        Level1Filter::Off => enumerate_task_groupings(workflow),
        Level1Filter::ColocateModels => {
            let pairs = model_sharing_pairs(workflow);
            enumerate_task_groupings_with(workflow, |g| pairs.iter().all(|&(a, b)| g.group_of(a) == g.group_of(b)))
        }
    }
}

/// Task pairs that run the same model: a generation or inference task and a
/// training task with the same role.
fn model_sharing_pairs(workflow: &WorkflowGraph) -> Vec<(TaskId, TaskId)> {
    let mut pairs = Vec::new();
    for a in &workflow.tasks {
        for b in &workflow.tasks {
            if a.kind != TaskKind::Training
                && b.kind == TaskKind::Training
                && a.role == b.role
                && matches!(a.role, ModelRole::Actor | ModelRole::Critic)
            {
                pairs.push((a.id, b.id));
            }
        }
    }
    pairs
}

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Number of compositions [`enumerate_gpu_groupings`] yields.
pub fn count_gpu_groupings(n: usize, k: usize, quantum: usize) -> f64 {
    if k == 0 || k > n {
        return 0.0;
    }
    if k == 1 {
        return 1.0;
    }
    // first k-1 parts are positive multiples of q leaving at least one GPU
    let units = ((n - 1) / quantum.max(1)) as u64;
    binomial(units, k as u64 - 1)
}

/// All compositions of `n` into `k` positive parts. With `quantum` q > 1 the
/// first k − 1 parts are multiples of q and the last takes the remainder.
pub fn enumerate_gpu_groupings(n: usize, k: usize, quantum: usize) -> Result<Vec<GpuGrouping>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot split {n} GPUs into {k} groups")));
    }
    let q = quantum.max(1);
    let mut out = Vec::new();
    let mut parts = Vec::with_capacity(k);
    fn rec(left: usize, k: usize, q: usize, parts: &mut Vec<usize>, out: &mut Vec<GpuGrouping>) {
        if parts.len() + 1 == k {
            parts.push(left);
            out.push(GpuGrouping::new(parts.clone()));
            parts.pop();
            return;
        }
        let mut c = q;
        while c < left {
            parts.push(c);
            rec(left - c, k, q, parts, out);
            parts.pop();
            c += q;
        }
    }
    rec(n, k, q, &mut parts, &mut out);
    Ok(out)
}

/// Quantum to use for `k` groups of `n` GPUs: `base`, doubled while the
/// composition count exceeds `cap` and a coarser grid still has members.
pub fn effective_quantum(n: usize, k: usize, base: usize, cap: f64) -> usize {
    let mut q = base.max(1);
    while count_gpu_groupings(n, k, q) > cap && count_gpu_groupings(n, k, q * 2) >= 1.0 {
        q *= 2;
    }
    q
}

/// (dp, pp, tp) with dp·pp·tp = `group_size`, pp ≤ `num_layers` and tp ≤ `tp_cap`.
pub fn enumerate_layouts(group_size: usize, num_layers: u32, tp_cap: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for dp in (1..=group_size).filter(|d| group_size.is_multiple_of(*d)) {
        let rest = group_size / dp;
        for pp in (1..=rest).filter(|p| rest.is_multiple_of(*p)) {
            let tp = rest / pp;
            if pp <= num_layers as usize && tp <= tp_cap {
                out.push((dp, pp, tp));
            }
        }
    }
    out
}

/// Layouts of [`enumerate_layouts`] with uniform stage splits and unit weights.
pub fn layout_options(group_size: usize, num_layers: u32, tp_cap: usize) -> Vec<ParallelLayout> {
    enumerate_layouts(group_size, num_layers, tp_cap)
        .into_iter()
        .map(|(dp, pp, tp)| ParallelLayout::uniform(dp, pp, tp, num_layers).expect("filtered triple"))
        .collect()
}
