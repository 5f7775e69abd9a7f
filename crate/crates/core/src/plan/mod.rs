//! Scheduling strategies: task grouping and per-task parallel layouts (the
//! partitioning side) plus the tasklet-to-device map (the assignment side).

mod io;
pub mod memory;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::DeviceTopology;
use crate::workflow::{TaskId, WorkflowGraph};

pub use io::{parse_plan, serialize_plan, PlanFile};
pub use memory::{check_memory, device_usage, DeviceUsage, MemoryModel, MemoryViolation};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskGrouping {
    pub groups: Vec<Vec<TaskId>>,
}

impl TaskGrouping {
    pub fn new(groups: Vec<Vec<TaskId>>) -> Self {
        TaskGrouping { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_of(&self, task: TaskId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&task))
    }

    /// Every workflow task appears in exactly one non-empty group.
    pub fn validate(&self, workflow: &WorkflowGraph) -> Result<()> {
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::invalid("task grouping contains an empty group"));
            }
            for &t in g {
                if workflow.task(t).is_none() {
                    return Err(Error::invalid(format!("task grouping names unknown task {t}")));
                }
                if !seen.insert(t) {
                    return Err(Error::invalid(format!("task {t} appears in more than one group")));
                }
            }
        }
        if seen.len() != workflow.tasks.len() {
            return Err(Error::invalid("task grouping does not cover every task"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GpuGrouping {
    pub counts: Vec<usize>,
}

impl GpuGrouping {
    pub fn new(counts: Vec<usize>) -> Self {
        GpuGrouping { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// One sequence-length bucket routed to a DP replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqlenRoute {
    pub length: u64,
    pub count: u64,
    pub replica: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelLayout {
    pub dp: usize,
    pub pp: usize,
    pub tp: usize,
    /// Layers per pipeline stage.
    pub stage_layers: Vec<u32>,
    /// Share of the batch each replica processes, relative to an even split.
    /// Positive and summing to `dp`.
    pub replica_batch_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seqlen_assignment: Option<Vec<SeqlenRoute>>,
}

/// Splits `layers` into `stages` near-equal parts, earlier stages taking the extra.
pub fn uniform_stage_layers(layers: u32, stages: usize) -> Vec<u32> {
    let base = layers / stages as u32;
    let extra = (layers % stages as u32) as usize;
    (0..stages).map(|j| base + u32::from(j < extra)).collect()
}

impl ParallelLayout {
    pub fn uniform(dp: usize, pp: usize, tp: usize, num_layers: u32) -> Result<Self> {
        if dp == 0 || pp == 0 || tp == 0 {
            return Err(Error::invalid("parallel degrees must be >= 1"));
        }
        if pp > num_layers as usize {
            return Err(Error::invalid(format!("pp {pp} exceeds {num_layers} layers")));
        }
        Ok(ParallelLayout {
            dp,
            pp,
            tp,
            stage_layers: uniform_stage_layers(num_layers, pp),
            replica_batch_weights: vec![1.0; dp],
            seqlen_assignment: None,
        })
    }

    pub fn tasklets(&self) -> usize {
        self.dp * self.pp * self.tp
    }

    /// Flat position of tasklet (i, j, k); shards vary fastest.
    #[inline]
    pub fn index(&self, replica: usize, stage: usize, shard: usize) -> usize {
        (replica * self.pp + stage) * self.tp + shard
    }

    #[inline]
    pub fn weight(&self, replica: usize) -> f64 {
        self.replica_batch_weights.get(replica).copied().unwrap_or(1.0)
    }

    pub fn triple(&self) -> (usize, usize, usize) {
        (self.dp, self.pp, self.tp)
    }

    pub fn validate(&self, task: TaskId, num_layers: u32, group_size: usize) -> Result<()> {
        if self.dp == 0 || self.pp == 0 || self.tp == 0 {
            return Err(Error::layout(task, "parallel degrees must be >= 1"));
        }
        if self.tasklets() != group_size {
            return Err(Error::layout(
                task,
                format!(
                    "dp*pp*tp = {} does not match the group's {} GPUs",
                    self.tasklets(),
                    group_size
                ),
            ));
        }
        if self.pp > num_layers as usize {
            return Err(Error::layout(task, "more pipeline stages than layers"));
        }
        if self.stage_layers.len() != self.pp
            || self.stage_layers.contains(&0)
            || self.stage_layers.iter().map(|&l| l as u64).sum::<u64>() != num_layers as u64
        {
            return Err(Error::layout(
                task,
                "stage_layers must be pp positive counts summing to the layer count",
            ));
        }
        if self.replica_batch_weights.len() != self.dp
            || self.replica_batch_weights.iter().any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::layout(
                task,
                "replica_batch_weights must hold dp positive values",
            ));
        }
        let sum: f64 = self.replica_batch_weights.iter().sum();
        if (sum - self.dp as f64).abs() > 1e-9 * self.dp as f64 {
            return Err(Error::layout(task, "replica_batch_weights must sum to dp"));
        }
        if let Some(routes) = &self.seqlen_assignment {
            if routes.iter().any(|r| r.replica >= self.dp) {
                return Err(Error::layout(task, "seqlen assignment names a missing replica"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tasklet {
    pub task: TaskId,
    pub replica: usize,
    pub stage: usize,
    pub shard: usize,
}

/// Device index per tasklet, stored per task in `ParallelLayout::index` order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskletAssignment {
    pub per_task: BTreeMap<TaskId, Vec<usize>>,
}

impl TaskletAssignment {
    pub fn device(&self, t: &Tasklet, layout: &ParallelLayout) -> Option<usize> {
        self.per_task
            .get(&t.task)
            .and_then(|v| v.get(layout.index(t.replica, t.stage, t.shard)))
            .copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluations: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub task_grouping: TaskGrouping,
    pub gpu_grouping: GpuGrouping,
    pub layouts: BTreeMap<TaskId, ParallelLayout>,
    pub assignment: TaskletAssignment,
    pub provenance: Provenance,
}

impl Plan {
    pub fn layout(&self, task: TaskId) -> Result<&ParallelLayout> {
        self.layouts
            .get(&task)
            .ok_or_else(|| Error::layout(task, "no layout for task"))
    }

    pub fn devices_of(&self, task: TaskId) -> Result<&[usize]> {
        self.assignment
            .per_task
            .get(&task)
            .map(Vec::as_slice)
            .ok_or(Error::Unassigned {
                task,
                replica: 0,
                stage: 0,
                shard: 0,
            })
    }

    /// Sorted device set of task group `g`.
    pub fn group_devices(&self, g: usize) -> Vec<usize> {
        let mut devs: Vec<usize> = self.task_grouping.groups[g]
            .first()
            .and_then(|t| self.assignment.per_task.get(t))
            .cloned()
            .unwrap_or_default();
        devs.sort_unstable();
        devs
    }

    /// Structural checks plus C1 (tasklets per task ≤ |V_D|) and C2 (every
    /// tasklet assigned). Memory (C3) is checked separately.
    pub fn validate(&self, workflow: &WorkflowGraph, topology: &DeviceTopology) -> Result<()> {
        self.task_grouping.validate(workflow)?;
        let counts = &self.gpu_grouping.counts;
        if counts.len() != self.task_grouping.len() {
            return Err(Error::invalid(
                "gpu_counts length differs from the number of task groups",
            ));
        }
        if counts.contains(&0) {
            return Err(Error::invalid("gpu_counts must be positive"));
        }
        if self.gpu_grouping.total() != topology.len() {
            return Err(Error::invalid(format!(
                "gpu_counts sum to {} but the topology has {} devices",
                self.gpu_grouping.total(),
                topology.len()
            )));
        }
        let mut owner: Vec<Option<usize>> = vec![None; topology.len()];
        for (g, tasks) in self.task_grouping.groups.iter().enumerate() {
            let mut group_set: Option<Vec<usize>> = None;
            for &t in tasks {
                let task = workflow.task(t).expect("validated above");
                let layout = self.layout(t)?;
                layout.validate(t, task.model.num_layers, counts[g])?;
                if layout.tasklets() > topology.len() {
                    return Err(Error::layout(t, "more tasklets than devices (C1)"));
                }
                let devs = self.devices_of(t)?;
                if devs.len() != layout.tasklets() {
                    let missing = devs.len().min(layout.tasklets());
                    let replica = missing / (layout.pp * layout.tp);
                    let stage = (missing / layout.tp) % layout.pp;
                    return Err(Error::Unassigned {
                        task: t,
                        replica,
                        stage,
                        shard: missing % layout.tp,
                    });
                }
                if let Some(&bad) = devs.iter().find(|&&d| d >= topology.len()) {
                    return Err(Error::UnknownDevice(format!("index {bad}")));
                }
                let mut sorted = devs.to_vec();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::layout(t, "a device hosts two tasklets of the same task"));
                }
                match &group_set {
                    None => group_set = Some(sorted),
                    Some(s) if *s != sorted => {
                        return Err(Error::layout(t, "colocated tasks must span the same GPU group"))
                    }
                    _ => {}
                }
            }
            for d in group_set.unwrap_or_default() {
                if owner[d].replace(g).is_some() {
                    return Err(Error::invalid(format!(
                        "device `{}` belongs to two GPU groups",
                        topology.device(d).id
                    )));
                }
            }
        }
        for t in self.layouts.keys() {
            if workflow.task(*t).is_none() {
                return Err(Error::layout(*t, "layout for a task not in the workflow"));
            }
        }
        Ok(())
    }
}

/// Enumerates the tasklet coordinates of every task, checking each layout
/// against its group's GPU count.
pub fn expand_tasklets(
    workflow: &WorkflowGraph,
    grouping: &TaskGrouping,
    gpus: &GpuGrouping,
    layouts: &BTreeMap<TaskId, ParallelLayout>,
) -> Result<Vec<Tasklet>> {
    let mut out = Vec::new();
    for task in &workflow.tasks {
        let g = grouping
            .group_of(task.id)
            .ok_or_else(|| Error::invalid(format!("task {} is not grouped", task.id)))?;
        let size = *gpus
            .counts
            .get(g)
            .ok_or_else(|| Error::invalid("gpu grouping is shorter than the task grouping"))?;
        let layout = layouts
            .get(&task.id)
            .ok_or_else(|| Error::layout(task.id, "no layout for task"))?;
        if layout.tasklets() != size {
            return Err(Error::layout(
                task.id,
                format!("dp*pp*tp = {} does not match group size {}", layout.tasklets(), size),
            ));
        }
        for replica in 0..layout.dp {
            for stage in 0..layout.pp {
                for shard in 0..layout.tp {
                    out.push(Tasklet {
                        task: task.id,
                        replica,
                        stage,
                        shard,
                    });
                }
            }
        }
    }
    Ok(out)
}
