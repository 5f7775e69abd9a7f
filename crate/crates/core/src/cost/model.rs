use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ring::min_ring_bottleneck;
use super::{compose_end_to_end, CostBreakdown, TaskCost};
use crate::error::{Error, Result};
use crate::plan::{device_usage, DeviceUsage, ParallelLayout, Plan};
use crate::topology::{DeviceTopology, LinkMatrix};
use crate::workflow::{Mode, ModelRole, RlTask, TaskKind, WorkflowGraph, BF16_BYTES};

/// FLOPs of one transformer layer over `s` tokens:
/// 8·s·h1² + 4·s²·h1 + 6·s·h1·h2.
pub fn c_layer(s: f64, h1: f64, h2: f64) -> f64 {
    8.0 * s * h1 * h1 + 4.0 * s * s * h1 + 6.0 * s * h1 * h2
}

/// Components of one (replica, stage) cell, already maxed over shards.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageCost {
    pub comp: f64,
    pub tp: f64,
    pub pp: f64,
    pub hbm: f64,
}

impl StageCost {
    fn busy(&self) -> f64 {
        self.comp + self.tp + self.pp
    }
}

/// Task-level cost from its per-cell components. Returns (total, bubble),
/// where bubble is the largest per-replica pipeline bubble (training only).
///
/// `grid[i][j]` is replica i, stage j; `nm[i]` that replica's micro-batches.
pub fn compose_task(kind: TaskKind, grid: &[Vec<StageCost>], nm: &[f64], dp_cost: f64) -> (f64, f64) {
    let stage_max = |row: &[StageCost], f: &dyn Fn(&StageCost) -> f64| row.iter().map(f).fold(0.0, f64::max);
    match kind {
        TaskKind::Generation => {
            let total = grid
                .iter()
                .map(|row| stage_max(row, &|c| c.busy() + c.hbm))
                .fold(0.0, f64::max);
            (total, 0.0)
        }
        TaskKind::Inference => (
            grid.iter()
                .map(|row| stage_max(row, &StageCost::busy))
                .fold(0.0, f64::max),
            0.0,
        ),
        TaskKind::Training => {
            let mut total: f64 = 0.0;
            let mut bubble: f64 = 0.0;
            for (row, &n) in grid.iter().zip(nm) {
                let b = row.iter().skip(1).map(StageCost::busy).sum::<f64>() / n;
                bubble = bubble.max(b);
                total = total.max(stage_max(row, &StageCost::busy) + b);
            }
            (total + dp_cost, bubble)
        }
    }
}

/// Evaluator bound to one workflow and topology. Link tables and device
/// rates are computed once, so repeated evaluations are cheap.
#[derive(Debug)]
pub struct CostModel<'a> {
    workflow: &'a WorkflowGraph,
    topology: &'a DeviceTopology,
    links: LinkMatrix,
    comp: Vec<f64>,
    hbm: Vec<f64>,
    mem: Vec<f64>,
    /// Calls to [`CostModel::evaluate`] so far.
    calls: AtomicU64,
}

/// One task's layout and devices, checked for shape.
struct Placed<'p> {
    task: &'p RlTask,
    layout: &'p ParallelLayout,
    devs: &'p [usize],
    nm: f64,
}

impl Placed<'_> {
    fn nm_i(&self, i: usize) -> f64 {
        self.nm * self.layout.weight(i)
    }

    fn dev(&self, i: usize, j: usize, k: usize) -> usize {
        self.devs[self.layout.index(i, j, k)]
    }

    fn bytes(&self) -> f64 {
        self.task.precision_bytes as f64
    }
}

impl<'a> CostModel<'a> {
    pub fn new(workflow: &'a WorkflowGraph, topology: &'a DeviceTopology) -> Self {
        let devices = topology.devices();
        CostModel {
            workflow,
            topology,
            links: topology.link_matrix(),
            comp: devices.iter().map(|d| d.comp()).collect(),
            hbm: devices.iter().map(|d| d.hbm()).collect(),
            mem: devices.iter().map(|d| d.mem()).collect(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn workflow(&self) -> &'a WorkflowGraph {
        self.workflow
    }

    pub fn topology(&self) -> &'a DeviceTopology {
        self.topology
    }

    pub fn links(&self) -> &LinkMatrix {
        &self.links
    }

    /// Number of full evaluations performed by this model.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn placed<'p>(&self, task: &'p RlTask, plan: &'p Plan) -> Result<Placed<'p>> {
        let layout = plan.layout(task.id)?;
        let devs = plan.devices_of(task.id)?;
        if layout.stage_layers.len() != layout.pp {
            return Err(Error::layout(task.id, "stage_layers length differs from pp"));
        }
        if devs.len() < layout.tasklets() {
            let pos = devs.len();
            return Err(Error::Unassigned {
                task: task.id,
                replica: pos / (layout.pp * layout.tp),
                stage: (pos / layout.tp) % layout.pp,
                shard: pos % layout.tp,
            });
        }
        if let Some(&bad) = devs.iter().find(|&&d| d >= self.comp.len()) {
            return Err(Error::UnknownDevice(format!("index {bad}")));
        }
        let nm = self.workflow.num_microbatches(layout.dp as u64, task.kind)? as f64;
        Ok(Placed { task, layout, devs, nm })
    }

    fn task_of(&self, id: u8) -> Result<&'a RlTask> {
        self.workflow
            .task(id)
            .ok_or_else(|| Error::invalid(format!("task {id} is not in the workflow")))
    }

    // ---- components -----------------------------------------------------

    fn tp_cost(&self, p: &Placed, i: usize, j: usize) -> f64 {
        let tp = p.layout.tp;
        if tp == 1 {
            return 0.0;
        }
        let batch = &self.workflow.batch;
        let h1 = p.task.model.hidden_size as f64;
        let cv = p.bytes() * batch.micro_batch_size as f64 * batch.total_seq_len() as f64 * h1 * 2.0 * (tp - 1) as f64
            / tp as f64;
        let ring: Vec<usize> = (0..tp).map(|k| p.dev(i, j, k)).collect();
        let factor = match p.task.kind {
            TaskKind::Training if self.workflow.cost_model.recompute => 6.0,
            TaskKind::Training => 4.0,
            _ => 2.0,
        };
        factor * p.nm_i(i) * p.layout.stage_layers[j] as f64 * min_ring_bottleneck(&ring, cv, &self.links)
    }

    fn pp_cost(&self, p: &Placed, i: usize, j: usize) -> f64 {
        if j + 1 >= p.layout.pp {
            return 0.0;
        }
        let batch = &self.workflow.batch;
        let cv =
            p.bytes() * batch.micro_batch_size as f64 * batch.total_seq_len() as f64 * p.task.model.hidden_size as f64;
        let mut best = f64::INFINITY;
        for k in 0..p.layout.tp {
            for k2 in 0..p.layout.tp {
                best = best.min(self.links.cost(p.dev(i, j, k), p.dev(i, j + 1, k2), cv));
            }
        }
        let factor = if p.task.kind == TaskKind::Training { 2.0 } else { 1.0 };
        factor * p.nm_i(i) * best
    }

    fn dp_cost(&self, p: &Placed, j: usize, k: usize) -> f64 {
        let dp = p.layout.dp;
        if dp == 1 {
            return 0.0;
        }
        let cv = p.bytes() * p.layout.stage_layers[j] as f64 * p.task.model.layer_params() * 2.0 * (dp - 1) as f64
            / (dp as f64 * p.layout.tp as f64);
        let ring: Vec<usize> = (0..dp).map(|i| p.dev(i, j, k)).collect();
        min_ring_bottleneck(&ring, cv, &self.links)
    }

    fn comp_cost(&self, p: &Placed, i: usize, j: usize, k: usize) -> f64 {
        let batch = &self.workflow.batch;
        let s = match p.task.kind {
            TaskKind::Generation => batch.seq_in,
            _ => batch.total_seq_len(),
        } as f64;
        let factor = if p.task.kind == TaskKind::Training { 3.0 } else { 1.0 };
        let flops = c_layer(
            s,
            p.task.model.hidden_size as f64,
            p.task.model.intermediate_size as f64,
        );
        factor * p.nm_i(i) * batch.micro_batch_size as f64 * p.layout.stage_layers[j] as f64 * flops
            / (self.comp[p.dev(i, j, k)] * p.layout.tp as f64)
    }

    /// Concurrent decode sequences on device `d` for stage `j`: the KV cache
    /// fits into memory left after all weights on `d`, clamped to
    /// [1, sequences of the replica].
    fn dbs(&self, p: &Placed, i: usize, j: usize, d: usize, usage: &[DeviceUsage]) -> f64 {
        if let Some(fixed) = self.workflow.cost_model.decode_batch_size {
            return fixed;
        }
        let kv = self
            .workflow
            .cost_model
            .memory
            .kv_bytes_per_seq(p.task, &self.workflow.batch, p.layout, j);
        let free = self.mem[d] - usage[d].weights;
        let upper = (p.nm_i(i) * self.workflow.batch.micro_batch_size as f64).max(1.0);
        (free / kv).floor().clamp(1.0, upper)
    }

    fn hbm_cost(&self, p: &Placed, i: usize, j: usize, k: usize, dbs: f64) -> f64 {
        let batch = &self.workflow.batch;
        let d = p.dev(i, j, k);
        batch.seq_out as f64
            * p.nm_i(i)
            * batch.micro_batch_size as f64
            * (p.bytes() * p.layout.stage_layers[j] as f64 * p.task.model.layer_params())
            / (dbs * self.hbm[d] * p.layout.tp as f64)
    }

    fn stage(&self, p: &Placed, i: usize, j: usize, usage: &[DeviceUsage]) -> StageCost {
        let mut cell = StageCost {
            tp: self.tp_cost(p, i, j),
            pp: self.pp_cost(p, i, j),
            ..StageCost::default()
        };
        for k in 0..p.layout.tp {
            cell.comp = cell.comp.max(self.comp_cost(p, i, j, k));
            if p.task.kind == TaskKind::Generation {
                let dbs = self.dbs(p, i, j, p.dev(i, j, k), usage);
                cell.hbm = cell.hbm.max(self.hbm_cost(p, i, j, k, dbs));
            }
        }
        cell
    }

    // ---- public component API ---------------------------------------------

    /// Tensor-parallel all-reduce cost of replica `i`, stage `j`.
    pub fn tp_comm_cost(&self, plan: &Plan, task: u8, i: usize, j: usize) -> Result<f64> {
        let p = self.placed(self.task_of(task)?, plan)?;
        Ok(self.tp_cost(&p, i, j))
    }

    /// Activation transfer across boundary j → j+1 of replica `i`.
    pub fn pp_comm_cost(&self, plan: &Plan, task: u8, i: usize, j: usize) -> Result<f64> {
        let p = self.placed(self.task_of(task)?, plan)?;
        Ok(self.pp_cost(&p, i, j))
    }

    /// Gradient all-reduce over the DP peers of stage `j`, shard `k`.
    pub fn dp_comm_cost(&self, plan: &Plan, task: u8, j: usize, k: usize) -> Result<f64> {
        let t = self.task_of(task)?;
        if t.kind != TaskKind::Training {
            return Err(Error::Misuse { component: "dp", task });
        }
        let p = self.placed(t, plan)?;
        Ok(self.dp_cost(&p, j, k))
    }

    pub fn compute_cost(&self, plan: &Plan, task: u8, i: usize, j: usize, k: usize) -> Result<f64> {
        let p = self.placed(self.task_of(task)?, plan)?;
        Ok(self.comp_cost(&p, i, j, k))
    }

    /// HBM-bound decode time of tasklet (i, j, k) at decode batch `dbs`.
    pub fn hbm_decode_cost(&self, plan: &Plan, task: u8, i: usize, j: usize, k: usize, dbs: f64) -> Result<f64> {
        let t = self.task_of(task)?;
        if t.kind != TaskKind::Generation {
            return Err(Error::Misuse { component: "hbm", task });
        }
        let p = self.placed(t, plan)?;
        Ok(self.hbm_cost(&p, i, j, k, dbs))
    }

    /// Decode batch the cost model uses for tasklet (i, j, k).
    pub fn decode_batch_size(&self, plan: &Plan, task: u8, i: usize, j: usize, k: usize) -> Result<f64> {
        let p = self.placed(self.task_of(task)?, plan)?;
        let usage = device_usage(plan, self.workflow, self.topology);
        Ok(self.dbs(&p, i, j, p.dev(i, j, k), &usage))
    }

    // ---- task and plan level ---------------------------------------------

    fn grid(&self, p: &Placed, usage: &[DeviceUsage]) -> (Vec<Vec<StageCost>>, Vec<f64>) {
        let grid = (0..p.layout.dp)
            .map(|i| (0..p.layout.pp).map(|j| self.stage(p, i, j, usage)).collect())
            .collect();
        let nm = (0..p.layout.dp).map(|i| p.nm_i(i)).collect();
        (grid, nm)
    }

    fn task_cost_with(&self, task: &RlTask, plan: &Plan, usage: &[DeviceUsage]) -> Result<TaskCost> {
        let p = self.placed(task, plan)?;
        let (grid, nm) = self.grid(&p, usage);
        let dp = if task.kind == TaskKind::Training {
            let mut worst: f64 = 0.0;
            for j in 0..p.layout.pp {
                for k in 0..p.layout.tp {
                    worst = worst.max(self.dp_cost(&p, j, k));
                }
            }
            worst
        } else {
            0.0
        };
        let (total, bubble) = compose_task(task.kind, &grid, &nm, dp);
        let cells = grid.iter().flatten();
        let max_of = |f: fn(&StageCost) -> f64| cells.clone().map(f).fold(0.0, f64::max);
        Ok(TaskCost {
            task: task.id,
            name: task.name().to_string(),
            kind: task.kind,
            comp: max_of(|c| c.comp),
            tp: max_of(|c| c.tp),
            pp: max_of(|c| c.pp),
            dp,
            bubble,
            hbm: max_of(|c| c.hbm),
            total,
        })
    }

    pub fn task_cost(&self, plan: &Plan, task: u8) -> Result<TaskCost> {
        let usage = device_usage(plan, self.workflow, self.topology);
        self.task_cost_with(self.task_of(task)?, plan, &usage)
    }

    /// Per (replica, stage) components of `task` and each replica's micro-batches.
    pub fn stage_costs(&self, plan: &Plan, task: u8) -> Result<(Vec<Vec<StageCost>>, Vec<f64>)> {
        let p = self.placed(self.task_of(task)?, plan)?;
        let usage = device_usage(plan, self.workflow, self.topology);
        Ok(self.grid(&p, &usage))
    }

    /// Time each DP replica of `task` needs, excluding gradient all-reduce.
    pub fn replica_times(&self, plan: &Plan, task: u8) -> Result<Vec<f64>> {
        let t = self.task_of(task)?;
        let p = self.placed(t, plan)?;
        let usage = device_usage(plan, self.workflow, self.topology);
        let (grid, nm) = self.grid(&p, &usage);
        Ok(grid
            .iter()
            .zip(&nm)
            .map(|(row, &n)| compose_task(t.kind, std::slice::from_ref(row), &[n], 0.0).0)
            .collect())
    }

    /// Actor weight transfer from training devices to generation devices:
    /// the cheapest single device pair, zero when the two share a device.
    pub fn weight_transfer_cost(&self, plan: &Plan) -> Result<f64> {
        let tasks = &self.workflow.tasks;
        let gen = tasks.iter().find(|t| t.kind == TaskKind::Generation);
        let train = tasks
            .iter()
            .find(|t| t.kind == TaskKind::Training && t.role == ModelRole::Actor);
        let (Some(gen), Some(train)) = (gen, train) else {
            return Ok(0.0);
        };
        let bytes = gen.model.param_count as f64 * BF16_BYTES as f64;
        let src = plan.devices_of(train.id)?;
        let dst = plan.devices_of(gen.id)?;
        let mut best = f64::INFINITY;
        for &a in src {
            for &b in dst {
                if a == b {
                    return Ok(0.0);
                }
                best = best.min(self.links.cost(a, b, bytes));
            }
        }
        Ok(if best.is_finite() { best } else { 0.0 })
    }

    /// Full breakdown of `plan`. Memory-infeasible plans are still costed and
    /// flagged through `memory_feasible`.
    pub fn evaluate(&self, plan: &Plan) -> Result<CostBreakdown> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let usage = device_usage(plan, self.workflow, self.topology);
        let memory_feasible = usage.iter().zip(&self.mem).all(|(u, &m)| u.required() <= m);
        let mut tasks = Vec::with_capacity(self.workflow.tasks.len());
        let mut totals = BTreeMap::new();
        for task in &self.workflow.tasks {
            let tc = self.task_cost_with(task, plan, &usage)?;
            totals.insert(task.id, tc.total);
            tasks.push(tc);
        }
        let cfg = &self.workflow.cost_model;
        let (reshard, sync) = match self.workflow.mode {
            Mode::Sync => (
                match cfg.reshard_cost_s {
                    Some(c) => c,
                    None => self.weight_transfer_cost(plan)?,
                },
                0.0,
            ),
            Mode::Async => (
                0.0,
                match cfg.sync_cost_s {
                    Some(c) => c,
                    None => self.weight_transfer_cost(plan)?,
                },
            ),
        };
        let end_to_end = compose_end_to_end(self.workflow, &totals, reshard, sync)?;
        Ok(CostBreakdown {
            tasks,
            reshard,
            sync,
            end_to_end,
            memory_feasible,
        })
    }
}
