//! Brute-force search over every plan of a tiny instance, used as the
//! optimality oracle for the heuristic search.

use std::collections::HashSet;

use super::assign::{ArmSpace, Genome, SearchContext};
use super::enumerate::{enumerate_gpu_groupings, enumerate_task_groupings};
use crate::cost::CostBreakdown;
use crate::error::{Error, Result};
use crate::plan::Plan;
use crate::topology::DeviceTopology;
use crate::workflow::WorkflowGraph;

#[derive(Debug, Clone)]
pub struct ExhaustiveResult {
    pub plan: Plan,
    pub breakdown: CostBreakdown,
    /// Raw candidate count before symmetry reduction.
    pub space: f64,
    /// Distinct candidates after merging interchangeable-device relabellings.
    pub canonical: usize,
    /// Admissible (TP cap and memory) canonical candidates that were costed.
    pub evaluated: usize,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Raw size of the plan space: task groupings × compositions × device
/// partitions × layouts × tasklet permutations.
pub fn estimate_space(workflow: &WorkflowGraph, topology: &DeviceTopology) -> f64 {
    let ctx = SearchContext::new(workflow, topology);
    let n = topology.len();
    let mut total = 0.0;
    for grouping in enumerate_task_groupings(workflow) {
        let Ok(comps) = enumerate_gpu_groupings(n, grouping.len(), 1) else {
            continue;
        };
        for counts in comps {
            let partitions = factorial(n) / counts.counts.iter().map(|&c| factorial(c)).product::<f64>();
            let space = ArmSpace::new(&ctx, grouping.clone(), counts.clone());
            let per_task: f64 = space
                .options
                .iter()
                .zip(&space.task_group)
                .map(|(o, &g)| o.len() as f64 * factorial(counts.counts[g]))
                .product();
            total += partitions * per_task;
        }
    }
    total
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    fn rec(k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == cur.len() {
            out.push(cur.clone());
            return;
        }
        for i in k..cur.len() {
            cur.swap(k, i);
            rec(k + 1, cur, out);
            cur.swap(k, i);
        }
    }
    rec(0, &mut cur, &mut out);
    out
}

/// Device orders whose consecutive chunks of `counts` are every partition
/// of devices into sorted groups.
fn partitions(n: usize, counts: &[usize]) -> Vec<Vec<usize>> {
    fn rec(rest: &[usize], counts: &[usize], prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let Some((&c, tail)) = counts.split_first() else {
            out.push(prefix.clone());
            return;
        };
        let mut pick = Vec::with_capacity(c);
        fn choose(
            rest: &[usize],
            start: usize,
            c: usize,
            pick: &mut Vec<usize>,
            tail: &[usize],
            prefix: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if pick.len() == c {
                let left: Vec<usize> = rest.iter().copied().filter(|d| !pick.contains(d)).collect();
                let len = prefix.len();
                prefix.extend_from_slice(pick);
                rec(&left, tail, prefix, out);
                prefix.truncate(len);
                return;
            }
            for i in start..rest.len() {
                pick.push(rest[i]);
                choose(rest, i + 1, c, pick, tail, prefix, out);
                pick.pop();
            }
        }
        choose(rest, 0, c, &mut pick, tail, prefix, out);
    }
    let all: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    rec(&all, counts, &mut Vec::new(), &mut out);
    out
}

/// Minimum-cost plan over the whole space. Fails with `SpaceTooLarge`
/// before enumerating when the raw space exceeds `cap`.
pub fn exhaustive_search(workflow: &WorkflowGraph, topology: &DeviceTopology, cap: f64) -> Result<ExhaustiveResult> {
    let space_size = estimate_space(workflow, topology);
    if space_size > cap {
        return Err(Error::SpaceTooLarge { size: space_size, cap });
    }
    let ctx = SearchContext::new(workflow, topology);
    let n = topology.len();
    let mut best: Option<(f64, Plan)> = None;
    let mut canonical = 0;
    let mut evaluated = 0;
    for grouping in enumerate_task_groupings(workflow) {
        let Ok(comps) = enumerate_gpu_groupings(n, grouping.len(), 1) else {
            continue;
        };
        for counts in comps {
            let space = ArmSpace::new(&ctx, grouping.clone(), counts.clone());
            if !space.has_layouts() {
                continue;
            }
            let perms: Vec<Vec<Vec<usize>>> = counts.counts.iter().map(|&c| permutations(c)).collect();
            let mut seen = HashSet::new();
            for order in partitions(n, &counts.counts) {
                // odometer over (layout, permutation) per task
                let tasks = space.tasks.len();
                let radix: Vec<usize> = (0..tasks)
                    .flat_map(|p| [space.options[p].len(), perms[space.task_group[p]].len()])
                    .collect();
                let mut digit = vec![0usize; radix.len()];
                loop {
                    let genome = Genome {
                        layout: (0..tasks).map(|p| digit[2 * p]).collect(),
                        order: order.clone(),
                        fine: (0..tasks)
                            .map(|p| perms[space.task_group[p]][digit[2 * p + 1]].clone())
                            .collect(),
                    };
                    if seen.insert(space.canonical_key(&ctx, &genome)) {
                        canonical += 1;
                        let plan = space.to_plan(&ctx, &genome);
                        if space.tp_admissible(&ctx, &genome) && ctx.fits_memory(&plan) {
                            evaluated += 1;
                            let cost = ctx.model.evaluate(&plan)?.end_to_end;
                            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                                best = Some((cost, plan));
                            }
                        }
                    }
                    let mut i = 0;
                    while i < digit.len() {
                        digit[i] += 1;
                        if digit[i] < radix[i] {
                            break;
                        }
                        digit[i] = 0;
                        i += 1;
                    }
                    if i == digit.len() {
                        break;
                    }
                }
            }
        }
    }
    let (_, plan) = best.ok_or(Error::Infeasible)?;
    let breakdown = ctx.model.evaluate(&plan)?;
    Ok(ExhaustiveResult {
        plan,
        breakdown,
        space: space_size,
        canonical,
        evaluated,
    })
}
