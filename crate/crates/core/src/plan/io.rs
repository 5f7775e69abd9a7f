use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GpuGrouping, ParallelLayout, Plan, Provenance, TaskGrouping, TaskletAssignment};
use crate::cost::CostBreakdown;
use crate::error::{Error, Result};
use crate::topology::DeviceTopology;
use crate::workflow::TaskId;

/// On-disk plan. Devices are referenced by id; tasklets by `"t,i,j,k"` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub task_groups: Vec<Vec<TaskId>>,
    pub gpu_counts: Vec<usize>,
    pub layouts: BTreeMap<String, ParallelLayout>,
    pub assignment: BTreeMap<String, String>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_cost_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_breakdown: Option<CostBreakdown>,
}

fn parse_key(key: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = key.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Schema(format!("assignment key `{key}` is not t,i,j,k")));
    }
    let mut out = [0usize; 4];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("assignment key `{key}` is not numeric")))?;
    }
    Ok(out)
}

impl Plan {
    pub fn to_file(&self, topology: &DeviceTopology) -> PlanFile {
        let mut assignment = BTreeMap::new();
        for (&t, devs) in &self.assignment.per_task {
            let Some(layout) = self.layouts.get(&t) else { continue };
            for i in 0..layout.dp {
                for j in 0..layout.pp {
                    for k in 0..layout.tp {
                        if let Some(&d) = devs.get(layout.index(i, j, k)) {
                            assignment.insert(format!("{t},{i},{j},{k}"), topology.device(d).id.clone());
                        }
                    }
                }
            }
        }
        PlanFile {
            task_groups: self.task_grouping.groups.clone(),
            gpu_counts: self.gpu_grouping.counts.clone(),
            layouts: self.layouts.iter().map(|(t, l)| (t.to_string(), l.clone())).collect(),
            assignment,
            provenance: self.provenance.clone(),
            estimated_cost_s: None,
            cost_breakdown: None,
        }
    }
}

impl PlanFile {
    /// Binds device ids to `topology`. Fails on unknown devices, malformed
    /// keys, or tasklets without a device.
    pub fn resolve(&self, topology: &DeviceTopology) -> Result<Plan> {
        let mut layouts = BTreeMap::new();
        for (key, layout) in &self.layouts {
            let t: TaskId = key
                .parse()
                .map_err(|_| Error::Schema(format!("layout key `{key}` is not a task id")))?;
            if layout.dp == 0 || layout.pp == 0 || layout.tp == 0 {
                return Err(Error::layout(t, "parallel degrees must be >= 1"));
            }
            layouts.insert(t, layout.clone());
        }
        let mut per_task: BTreeMap<TaskId, Vec<Option<usize>>> =
            layouts.iter().map(|(&t, l)| (t, vec![None; l.tasklets()])).collect();
        for (key, dev) in &self.assignment {
            let [t, i, j, k] = parse_key(key)?;
            let t = TaskId::try_from(t).map_err(|_| Error::Schema(format!("task id in `{key}` out of range")))?;
            let layout = layouts
                .get(&t)
                .ok_or_else(|| Error::Schema(format!("assignment `{key}` names a task without layout")))?;
            if i >= layout.dp || j >= layout.pp || k >= layout.tp {
                return Err(Error::Schema(format!("assignment `{key}` is outside its layout")));
            }
            let d = topology.index_of(dev)?;
            per_task.get_mut(&t).unwrap()[layout.index(i, j, k)] = Some(d);
        }
        let mut assignment = TaskletAssignment::default();
        for (t, slots) in per_task {
            let layout = &layouts[&t];
            let mut devs = Vec::with_capacity(slots.len());
            for (pos, slot) in slots.into_iter().enumerate() {
                let d = slot.ok_or(Error::Unassigned {
                    task: t,
                    replica: pos / (layout.pp * layout.tp),
                    stage: (pos / layout.tp) % layout.pp,
                    shard: pos % layout.tp,
                })?;
                devs.push(d);
            }
            assignment.per_task.insert(t, devs);
        }
        Ok(Plan {
            task_grouping: TaskGrouping::new(self.task_groups.clone()),
            gpu_grouping: GpuGrouping::new(self.gpu_counts.clone()),
            layouts,
            assignment,
            provenance: self.provenance.clone(),
        })
    }
}

pub fn serialize_plan(plan: &Plan, topology: &DeviceTopology, breakdown: Option<&CostBreakdown>) -> Result<String> {
    let mut file = plan.to_file(topology);
    if let Some(b) = breakdown {
        file.estimated_cost_s = Some(b.end_to_end);
        file.cost_breakdown = Some(b.clone());
    }
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn parse_plan(json: &str) -> Result<PlanFile> {
    serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))
}
