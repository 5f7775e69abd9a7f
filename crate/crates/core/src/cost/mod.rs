//! Analytic execution-time model. Every value is in seconds.
//!
//! Per-task costs are built from stage components (compute, tensor-parallel
//! and pipeline communication, HBM-bound decoding), pipeline bubbles and
//! gradient all-reduce; task costs are then composed per algorithm and mode.

mod model;
pub mod ring;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use model::{c_layer, compose_task, CostModel, StageCost};
pub use ring::min_ring_bottleneck;

use crate::error::{Error, Result};
use crate::plan::{MemoryModel, Plan};
use crate::topology::DeviceTopology;
use crate::workflow::{Algorithm, Mode, TaskId, TaskKind, WorkflowGraph};

/// Tunables of the cost model, read from the workflow file's `cost_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    /// Training recomputes activations in the backward pass.
    pub recompute: bool,
    /// Fixed resharding cost; derived from the actor size when absent.
    pub reshard_cost_s: Option<f64>,
    /// Fixed weight-sync cost; derived from the actor size when absent.
    pub sync_cost_s: Option<f64>,
    /// Fixed decode batch size for every device; derived from free memory when absent.
    pub decode_batch_size: Option<f64>,
    pub memory: MemoryModel,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            recompute: true,
            reshard_cost_s: None,
            sync_cost_s: None,
            decode_batch_size: None,
            memory: MemoryModel::default(),
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("reshard_cost_s", self.reshard_cost_s),
            ("sync_cost_s", self.sync_cost_s),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid(format!("{name} must be finite and >= 0")));
                }
            }
        }
        if let Some(d) = self.decode_batch_size {
            if !(d.is_finite() && d >= 1.0) {
                return Err(Error::invalid("decode_batch_size must be >= 1"));
            }
        }
        let m = &self.memory;
        for v in [
            m.training_bytes_per_param,
            m.inference_bytes_per_param,
            m.generation_bytes_per_param,
            m.kv_bytes_per_elem,
            m.min_decode_batch,
            m.activation_bytes_per_elem,
            m.activation_factor,
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("memory coefficients must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Components of one task's cost. Stage-level fields hold the maximum over
/// (replica, stage); `total` is the task-level composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCost {
    pub task: TaskId,
    pub name: String,
    pub kind: TaskKind,
    pub comp: f64,
    pub tp: f64,
    pub pp: f64,
    pub dp: f64,
    pub bubble: f64,
    pub hbm: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub tasks: Vec<TaskCost>,
    /// Charged in sync mode only.
    pub reshard: f64,
    /// Charged in async mode only.
    pub sync: f64,
    pub end_to_end: f64,
    pub memory_feasible: bool,
}

impl CostBreakdown {
    pub fn task(&self, id: TaskId) -> Option<&TaskCost> {
        self.tasks.iter().find(|t| t.task == id)
    }

    pub fn totals(&self) -> BTreeMap<TaskId, f64> {
        self.tasks.iter().map(|t| (t.task, t.total)).collect()
    }
}

/// Φ = max + (1 − η)(sum − max).
pub fn aggregate_phi(costs: &[f64], eta: f64) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::invalid("aggregate_phi needs at least one cost"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} is outside [0, 1]")));
    }
    let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = costs.iter().sum();
    Ok(max + (1.0 - eta) * (sum - max))
}

fn pick(costs: &BTreeMap<TaskId, f64>, ids: &[TaskId]) -> Result<Vec<f64>> {
    ids.iter()
        .map(|t| {
            costs
                .get(t)
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing cost for task {t}")))
        })
        .collect()
}

/// End-to-end time from task costs. `reshard` is added in sync mode and
/// `sync` in async mode. Custom workflows compose their dependency levels.
pub fn compose_end_to_end(
    workflow: &WorkflowGraph,
    costs: &BTreeMap<TaskId, f64>,
    reshard: f64,
    sync: f64,
) -> Result<f64> {
    let eta = workflow.eta;
    let (head, tail) = match workflow.algorithm {
        Algorithm::Ppo => {
            let c1 = pick(costs, &[1])?[0];
            let inf = aggregate_phi(&pick(costs, &[2, 3, 4])?, eta)?;
            let train = aggregate_phi(&pick(costs, &[5, 6])?, eta)?;
            (c1, inf + train)
        }
        Algorithm::Grpo => {
            let c1 = pick(costs, &[1])?[0];
            let inf = aggregate_phi(&pick(costs, &[2, 3])?, eta)?;
            (c1, inf + pick(costs, &[6])?[0])
        }
        Algorithm::Custom => {
            let levels = workflow.levels()?;
            let mut phis = Vec::with_capacity(levels.len());
            for level in &levels {
                phis.push(aggregate_phi(&pick(costs, level)?, eta)?);
            }
            (phis[0], phis[1..].iter().sum())
        }
    };
    Ok(match workflow.mode {
        Mode::Sync => head + tail + reshard,
        Mode::Async => head.max(tail) + sync,
    })
}

/// Evaluates `plan` from scratch. Search code should hold a [`CostModel`]
/// instead, which caches the link tables.
pub fn end_to_end_cost(plan: &Plan, workflow: &WorkflowGraph, topology: &DeviceTopology) -> Result<CostBreakdown> {
    CostModel::new(workflow, topology).evaluate(plan)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::workflow::{build_workflow, BatchConfig, ModelRole, ModelSpec, RlTask, BF16_BYTES};

    fn costs(pairs: &[(TaskId, f64)]) -> BTreeMap<TaskId, f64> {
        pairs.iter().copied().collect()
    }

    fn workflow(algorithm: Algorithm, mode: Mode, eta: f64) -> WorkflowGraph {
        let spec = ModelSpec::new(8, 16, 2).unwrap();
        let models = [
            ModelRole::Actor,
            ModelRole::Critic,
            ModelRole::Reward,
            ModelRole::Reference,
        ]
        .into_iter()
        .map(|r| (r, spec.clone()))
        .collect();
        build_workflow(algorithm, mode, &models, BatchConfig::default(), eta).unwrap()
    }

    #[test]
    fn phi_interpolates() {
        assert_eq!(aggregate_phi(&[10.0, 20.0, 30.0], 0.0).unwrap(), 60.0);
        assert_eq!(aggregate_phi(&[10.0, 20.0, 30.0], 1.0).unwrap(), 30.0);
        assert_eq!(aggregate_phi(&[10.0, 20.0, 30.0], 0.5).unwrap(), 45.0);
        assert!(aggregate_phi(&[], 0.5).is_err());
    }

    #[test]
    fn ppo_and_grpo_composition() {
        let c = costs(&[(1, 10.0), (2, 1.0), (3, 1.0), (4, 1.0), (5, 2.0), (6, 3.0)]);
        let sync = workflow(Algorithm::Ppo, Mode::Sync, 0.0);
        assert_eq!(compose_end_to_end(&sync, &c, 0.0, 0.0).unwrap(), 18.0);
        let asynch = workflow(Algorithm::Ppo, Mode::Async, 0.0);
        assert_eq!(compose_end_to_end(&asynch, &c, 0.0, 0.0).unwrap(), 10.0);
        let grpo = workflow(Algorithm::Grpo, Mode::Sync, 0.0);
        assert_eq!(compose_end_to_end(&grpo, &c, 0.0, 0.0).unwrap(), 15.0);
        // the reshard term belongs to sync mode only
        assert_eq!(compose_end_to_end(&sync, &c, 1.0, 7.0).unwrap(), 19.0);
        assert_eq!(compose_end_to_end(&asynch, &c, 1.0, 7.0).unwrap(), 17.0);
    }

    #[test]
    fn custom_composes_levels() {
        let task = |id| RlTask {
            id,
            kind: TaskKind::Inference,
            role: ModelRole::Reward,
            model: ModelSpec::new(4, 8, 1).unwrap(),
            precision_bytes: BF16_BYTES,
        };
        let edges: BTreeSet<_> = [(1, 2), (1, 3)].into_iter().collect();
        let wf = WorkflowGraph::custom(
            Mode::Sync,
            vec![task(1), task(2), task(3)],
            edges.clone(),
            BatchConfig::default(),
            0.0,
        )
        .unwrap();
        let c = costs(&[(1, 4.0), (2, 1.0), (3, 2.0)]);
        assert_eq!(compose_end_to_end(&wf, &c, 0.0, 0.0).unwrap(), 7.0);
        let wf = WorkflowGraph::custom(
            Mode::Async,
            vec![task(1), task(2), task(3)],
            edges,
            BatchConfig::default(),
            1.0,
        )
        .unwrap();
        assert_eq!(compose_end_to_end(&wf, &c, 0.0, 0.5).unwrap(), 4.5);
    }

    #[test]
    fn config_rejects_negative_override() {
        let cfg = CostConfig {
            reshard_cost_s: Some(-1.0),
            ..CostConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(CostConfig::default().validate().is_ok());
    }
}
