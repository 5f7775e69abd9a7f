//! Human- and machine-readable summary of a search run.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::{CostBreakdown, TaskCost};
use crate::plan::Plan;
use crate::search::SearchState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub task_groups: Vec<Vec<u8>>,
    pub gpu_counts: Vec<usize>,
    /// (task, dp, pp, tp) per task.
    pub layouts: Vec<(u8, usize, usize, usize)>,
}

impl PlanSummary {
    pub fn of(plan: &Plan) -> Self {
        PlanSummary {
            task_groups: plan.task_grouping.groups.clone(),
            gpu_counts: plan.gpu_grouping.counts.clone(),
            layouts: plan.layouts.iter().map(|(&t, l)| (t, l.dp, l.pp, l.tp)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub budget: u64,
    pub consumed: u64,
    pub refinement_evaluations: u64,
    /// (evaluations, incumbent cost), non-increasing in cost.
    pub trace: Vec<(u64, f64)>,
    pub plan: PlanSummary,
    pub tasks: Vec<TaskCost>,
    pub estimated_cost_s: f64,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn new(plan: &Plan, breakdown: &CostBreakdown, state: &SearchState, wall_clock_s: f64) -> Self {
        RunReport {
            seed: state.seed,
            budget: state.budget,
            consumed: state.consumed,
            refinement_evaluations: state.refinement_evaluations,
            trace: state.trace.clone(),
            plan: PlanSummary::of(plan),
            tasks: breakdown.tasks.clone(),
            estimated_cost_s: breakdown.end_to_end,
            wall_clock_s,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "estimated cost  {:.6} s", self.estimated_cost_s);
        let _ = writeln!(
            s,
            "evaluations     {} of {} (+{} balancing), seed {}, {:.2} s wall clock",
            self.consumed, self.budget, self.refinement_evaluations, self.seed, self.wall_clock_s
        );
        let _ = writeln!(
            s,
            "task groups     {:?}  gpus {:?}",
            self.plan.task_groups, self.plan.gpu_counts
        );
        s.push_str(&task_table(&self.tasks));
        let _ = writeln!(s, "trace");
        for (e, c) in &self.trace {
            let _ = writeln!(s, "  {e:>8}  {c:.6}");
        }
        s
    }
}

/// Aligned per-task component table.
pub fn task_table(tasks: &[TaskCost]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<4} {:<20} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "task", "name", "comp", "tp", "pp", "dp", "bubble", "hbm", "total"
    );
    for t in tasks {
        let _ = writeln!(
            s,
            "{:<4} {:<20} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            t.task, t.name, t.comp, t.tp, t.pp, t.dp, t.bubble, t.hbm, t.total
        );
    }
    s
}

/// Text rendering of a breakdown.
pub fn breakdown_text(b: &CostBreakdown) -> String {
    let mut s = task_table(&b.tasks);
    let _ = writeln!(s, "reshard {:.6} s  sync {:.6} s", b.reshard, b.sync);
    let _ = writeln!(
        s,
        "end-to-end {:.6} s{}",
        b.end_to_end,
        if b.memory_feasible { "" } else { "  (memory infeasible)" }
    );
    s
}
