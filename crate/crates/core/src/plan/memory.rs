//! Per-device memory accounting for constraint C3:
//! Σ model_memory(l) + max working_mem(l) ≤ mem_d over the tasklets on d.

use serde::{Deserialize, Serialize};

use super::{ParallelLayout, Plan};
use crate::topology::DeviceTopology;
use crate::workflow::{BatchConfig, RlTask, TaskKind, WorkflowGraph};

/// Byte coefficients of the memory model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryModel {
    /// BF16 weights 2 + FP32 master 4 + Adam moments 8 + FP32 grads 4.
    pub training_bytes_per_param: f64,
    pub inference_bytes_per_param: f64,
    pub generation_bytes_per_param: f64,
    pub kv_bytes_per_elem: f64,
    /// Decode sequences per micro-batch slot that the KV cache must hold.
    pub min_decode_batch: f64,
    pub activation_bytes_per_elem: f64,
    pub activation_factor: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel {
            training_bytes_per_param: 18.0,
            inference_bytes_per_param: 2.0,
            generation_bytes_per_param: 2.0,
            kv_bytes_per_elem: 2.0,
            min_decode_batch: 1.0,
            activation_bytes_per_elem: 2.0,
            activation_factor: 4.0,
        }
    }
}

impl MemoryModel {
    /// Parameters held by one tasklet of stage `stage`.
    pub fn stage_params(&self, task: &RlTask, layout: &ParallelLayout, stage: usize) -> f64 {
        let mut p = layout.stage_layers[stage] as f64 * task.model.layer_params();
        if stage == 0 {
            p += task.model.embedding_params() as f64;
        }
        p / layout.tp as f64
    }

    pub fn weight_bytes(&self, task: &RlTask, layout: &ParallelLayout, stage: usize) -> f64 {
        let per_param = match task.kind {
            TaskKind::Training => self.training_bytes_per_param,
            TaskKind::Inference => self.inference_bytes_per_param,
            TaskKind::Generation => self.generation_bytes_per_param,
        };
        self.stage_params(task, layout, stage) * per_param
    }

    /// KV cache bytes one sequence occupies on a tasklet of `stage`.
    pub fn kv_bytes_per_seq(&self, task: &RlTask, batch: &BatchConfig, layout: &ParallelLayout, stage: usize) -> f64 {
        batch.total_seq_len() as f64
            * 2.0
            * task.model.hidden_size as f64
            * layout.stage_layers[stage] as f64
            * self.kv_bytes_per_elem
            / layout.tp as f64
    }

    /// Persistent memory: weights (+ optimizer state), and for generation the
    /// minimum KV cache.
    pub fn model_memory(&self, task: &RlTask, batch: &BatchConfig, layout: &ParallelLayout, stage: usize) -> f64 {
        let mut m = self.weight_bytes(task, layout, stage);
        if task.kind == TaskKind::Generation {
            m += batch.micro_batch_size as f64
                * self.min_decode_batch
                * self.kv_bytes_per_seq(task, batch, layout, stage);
        }
        m
    }

    /// Activation footprint with recomputation.
    pub fn working_mem(&self, task: &RlTask, batch: &BatchConfig, layout: &ParallelLayout, stage: usize) -> f64 {
        batch.micro_batch_size as f64
            * batch.total_seq_len() as f64
            * task.model.hidden_size as f64
            * layout.stage_layers[stage] as f64
            * self.activation_bytes_per_elem
            * self.activation_factor
            / layout.tp as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeviceUsage {
    /// Σ model_memory over tasklets on the device.
    pub resident: f64,
    /// Σ weight bytes only (excludes KV reservations).
    pub weights: f64,
    pub working_max: f64,
}

impl DeviceUsage {
    pub fn required(&self) -> f64 {
        self.resident + self.working_max
    }
}

/// Usage per device index. Tasks or tasklets missing from the plan are skipped.
pub fn device_usage(plan: &Plan, workflow: &WorkflowGraph, topology: &DeviceTopology) -> Vec<DeviceUsage> {
    let mm = &workflow.cost_model.memory;
    let mut usage = vec![DeviceUsage::default(); topology.len()];
    for task in &workflow.tasks {
        let (Some(layout), Some(devs)) = (plan.layouts.get(&task.id), plan.assignment.per_task.get(&task.id)) else {
            continue;
        };
        if layout.stage_layers.len() != layout.pp {
            continue;
        }
        for stage in 0..layout.pp {
            let weights = mm.weight_bytes(task, layout, stage);
            let resident = mm.model_memory(task, &workflow.batch, layout, stage);
            let working = mm.working_mem(task, &workflow.batch, layout, stage);
            for replica in 0..layout.dp {
                for shard in 0..layout.tp {
                    let Some(&d) = devs.get(layout.index(replica, stage, shard)) else {
                        continue;
                    };
                    if d >= usage.len() {
                        continue;
                    }
                    let u = &mut usage[d];
                    u.resident += resident;
                    u.weights += weights;
                    u.working_max = u.working_max.max(working);
                }
            }
        }
    }
    usage
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryViolation {
    pub device: String,
    pub required: f64,
    pub capacity: f64,
}

/// Every device whose footprint exceeds its capacity. Empty means feasible.
pub fn check_memory(plan: &Plan, topology: &DeviceTopology, workflow: &WorkflowGraph) -> Vec<MemoryViolation> {
    device_usage(plan, workflow, topology)
        .iter()
        .enumerate()
        .filter_map(|(d, u)| {
            let capacity = topology.device(d).mem();
            (u.required() > capacity).then(|| MemoryViolation {
                device: topology.device(d).id.clone(),
                required: u.required(),
                capacity,
            })
        })
        .collect()
}
