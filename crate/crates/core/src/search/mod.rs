//! Plan search: nested successive halving over task groupings (outer arms)
//! and GPU groupings (inner arms), with a genetic search producing the
//! candidates of each arm.

mod assign;
mod enumerate;
mod exhaustive;
mod ga;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use assign::{locality_order, random_fine_assignment, random_medium_assignment, ArmSpace, Genome, SearchContext};
pub use enumerate::{
    count_gpu_groupings, effective_quantum, enumerate_gpu_groupings, enumerate_layouts, enumerate_task_groupings,
    enumerate_task_groupings_with, filtered_task_groupings, layout_options, Level1Filter,
};
pub use exhaustive::{estimate_space, exhaustive_search, ExhaustiveResult};
pub use ga::{Arm, GaKnobs};

use crate::balance::{refine, BalanceToggles};
use crate::cost::CostBreakdown;
use crate::error::{Error, Result};
use crate::plan::{GpuGrouping, Plan, Provenance, TaskGrouping};
use crate::topology::DeviceTopology;
use crate::workflow::WorkflowGraph;

/// Search configuration, readable from a knobs file. Missing fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchKnobs {
    pub budget: u64,
    pub seed: u64,
    pub population: usize,
    pub locality_bias: f64,
    pub quantize_gpu_counts: usize,
    pub level1_filter: Level1Filter,
    pub balance_data: bool,
    pub balance_layers: bool,
    pub balance_seqlen: bool,
    pub swap_trials: usize,
    pub retries: usize,
    /// GPU groupings per task grouping above which the quantum is coarsened.
    pub max_gpu_groupings: f64,
    /// Worker threads; the global pool when absent.
    pub threads: Option<usize>,
    pub exhaustive_cap: f64,
}

impl Default for SearchKnobs {
    fn default() -> Self {
        SearchKnobs {
            budget: 1000,
            seed: 42,
            population: 16,
            locality_bias: 0.8,
            quantize_gpu_counts: 1,
            level1_filter: Level1Filter::Off,
            balance_data: true,
            balance_layers: true,
            balance_seqlen: true,
            swap_trials: 8,
            retries: 16,
            max_gpu_groupings: 1024.0,
            threads: None,
            exhaustive_cap: 1e6,
        }
    }
}

impl SearchKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::invalid("budget must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.locality_bias) {
            return Err(Error::invalid("locality_bias must lie in [0, 1]"));
        }
        if self.quantize_gpu_counts == 0 || self.population == 0 {
            return Err(Error::invalid("quantize_gpu_counts and population must be >= 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be >= 1"));
        }
        Ok(())
    }

    pub fn ga(&self) -> GaKnobs {
        GaKnobs {
            population: self.population,
            swap_trials: self.swap_trials,
            retries: self.retries,
            locality_bias: self.locality_bias,
        }
    }

    pub fn balance(&self) -> BalanceToggles {
        BalanceToggles {
            data: self.balance_data,
            layers: self.balance_layers,
            seqlen: self.balance_seqlen,
        }
    }
}

pub fn parse_knobs(json: &str) -> Result<SearchKnobs> {
    let k: SearchKnobs = serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))?;
    k.validate()?;
    Ok(k)
}

pub fn load_knobs(path: impl AsRef<Path>) -> Result<SearchKnobs> {
    parse_knobs(&std::fs::read_to_string(path)?)
}

/// Budget of one inner round for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerRound {
    pub task_grouping: usize,
    pub n: usize,
    pub surviving: Vec<usize>,
    /// b_{m,n}; zero means arms were served round-robin.
    pub per_arm: u64,
    pub consumed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRound {
    pub m: usize,
    pub surviving: Vec<usize>,
    /// b_m; zero means task groupings were served round-robin.
    pub per_grouping: u64,
    pub inner: Vec<InnerRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub task_grouping: usize,
    pub gpu_grouping: usize,
    pub counts: Vec<usize>,
    pub best_cost: f64,
    pub evaluations: u64,
}

/// Bookkeeping of one nested-SHA run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub budget: u64,
    /// Cost-model evaluations spent by the search proper.
    pub consumed: u64,
    /// Evaluations spent by load balancing on the final plan.
    pub refinement_evaluations: u64,
    /// Cost-model calls counted by the model itself during the search proper.
    pub model_calls: u64,
    pub seed: u64,
    pub task_groupings: Vec<Vec<Vec<u8>>>,
    pub rounds: Vec<OuterRound>,
    /// Every arm that received budget, in (task grouping, GPU grouping) order.
    pub arms: Vec<ArmRecord>,
    /// (evaluations so far, incumbent cost) at each improvement.
    pub trace: Vec<(u64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub plan: Plan,
    pub breakdown: CostBreakdown,
    pub state: SearchState,
}

/// Number of halving rounds for `n` arms: ⌈log2 n⌉, at least one.
pub fn halving_rounds(n: usize) -> usize {
    (usize::BITS - n.saturating_sub(1).leading_zeros()).max(1) as usize
}

/// b_m = ⌊B / (|TG_m| · ⌈log2 |TG|⌉)⌋.
pub fn outer_budget(budget: u64, surviving: usize, total: usize) -> u64 {
    budget / (surviving as u64 * halving_rounds(total) as u64)
}

/// Keeps ⌈n/2⌉ arms with the lowest scores; ties go to the lower index.
/// The result is in index order.
pub fn best_half(arms: &[usize], score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut ranked: Vec<usize> = arms.to_vec();
    ranked.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
    ranked.truncate(arms.len().div_ceil(2));
    ranked.sort_unstable();
    ranked
}

/// Splits `total` as one evaluation each to the least-evaluated arms.
fn round_robin(arms: &[usize], total: u64, evaluations: impl Fn(usize) -> u64) -> Vec<(usize, u64)> {
    let mut order = arms.to_vec();
    order.sort_by_key(|&a| (evaluations(a), a));
    order.into_iter().take(total as usize).map(|a| (a, 1)).collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct GroupingState {
    grouping: TaskGrouping,
    gpu: Vec<GpuGrouping>,
    /// GG_m for this task grouping.
    surviving: Vec<usize>,
    arms: Vec<Option<Arm>>,
}

impl GroupingState {
    fn arm_cost(&self, j: usize) -> f64 {
        self.arms[j].as_ref().map_or(f64::INFINITY, Arm::best_cost)
    }

    fn arm_evals(&self, j: usize) -> u64 {
        self.arms[j].as_ref().map_or(0, |a| a.evaluations)
    }

    fn best_cost(&self) -> f64 {
        (0..self.arms.len())
            .map(|j| self.arm_cost(j))
            .fold(f64::INFINITY, f64::min)
    }

    fn evaluations(&self) -> u64 {
        (0..self.arms.len()).map(|j| self.arm_evals(j)).sum()
    }

    /// One outer round with budget b_m: inner halving over GG_m, then
    /// GG_{m+1} = best_half(GG_m). Returns the inner records and the cost
    /// of every evaluation in logical order.
    fn run_round(
        &mut self,
        tg: usize,
        b_m: u64,
        ctx: &SearchContext,
        knobs: &SearchKnobs,
    ) -> (Vec<InnerRound>, Vec<f64>) {
        let ga = knobs.ga();
        let start = self.surviving.clone();
        if start.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let l2 = (halving_rounds(start.len()) as u64).min(b_m.max(1));
        let mut current = start.clone();
        let mut records = Vec::new();
        let mut history = Vec::new();
        for n in 0..l2 as usize {
            let per = b_m / (current.len() as u64 * l2);
            let jobs: Vec<(usize, u64)> = if per > 0 {
                current.iter().map(|&j| (j, per)).collect()
            } else {
                round_robin(&current, b_m / l2, |j| self.arm_evals(j))
            };
            for &(j, _) in &jobs {
                if self.arms[j].is_none() {
                    let space = ArmSpace::new(ctx, self.grouping.clone(), self.gpu[j].clone());
                    self.arms[j] = Some(Arm::new(space, mix(knobs.seed, tg as u64, j as u64)));
                }
            }
            let mut slots: Vec<(usize, u64, Arm)> = jobs
                .iter()
                .map(|&(j, b)| (j, b, self.arms[j].take().expect("created above")))
                .collect();
            let used: Vec<u64> = slots.par_iter_mut().map(|(_, b, arm)| arm.run(ctx, &ga, *b)).collect();
            let mut consumed = 0;
            for ((j, _, mut arm), u) in slots.into_iter().zip(used) {
                consumed += u;
                history.extend(arm.take_history());
                self.arms[j] = Some(arm);
            }
            records.push(InnerRound {
                task_grouping: tg,
                n,
                surviving: current.clone(),
                per_arm: per,
                consumed,
            });
            current = best_half(&current, |j| self.arm_cost(j));
        }
        self.surviving = best_half(&start, |j| self.arm_cost(j));
        (records, history)
    }
}

/// Nested successive halving with genetic candidate generation.
/// Deterministic for fixed inputs and knobs regardless of thread count.
pub fn nested_sha_search(
    workflow: &WorkflowGraph,
    topology: &DeviceTopology,
    knobs: &SearchKnobs,
) -> Result<SearchOutcome> {
    knobs.validate()?;
    match knobs.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(|| search(workflow, topology, knobs)),
        None => search(workflow, topology, knobs),
    }
}

fn search(workflow: &WorkflowGraph, topology: &DeviceTopology, knobs: &SearchKnobs) -> Result<SearchOutcome> {
    let ctx = SearchContext::new(workflow, topology);
    let n = topology.len();
    let mut groupings: Vec<GroupingState> = filtered_task_groupings(workflow, knobs.level1_filter)
        .into_iter()
        .map(|grouping| {
            let k = grouping.len();
            let gpu = if k <= n {
                let q = effective_quantum(n, k, knobs.quantize_gpu_counts, knobs.max_gpu_groupings);
                enumerate_gpu_groupings(n, k, q).unwrap_or_default()
            } else {
                Vec::new()
            };
            GroupingState {
                grouping,
                surviving: (0..gpu.len()).collect(),
                arms: (0..gpu.len()).map(|_| None).collect(),
                gpu,
            }
        })
        .collect();

    let total = groupings.len();
    let l1 = halving_rounds(total) as u64;
    let mut tg_alive: Vec<usize> = (0..total).collect();
    let mut rounds = Vec::new();
    let mut trace = Vec::new();
    let mut consumed = 0u64;
    let mut incumbent = f64::INFINITY;
    for m in 0..l1 as usize {
        let per = knobs.budget / (tg_alive.len() as u64 * l1);
        let jobs: Vec<(usize, u64)> = if per > 0 {
            tg_alive.iter().map(|&i| (i, per)).collect()
        } else {
            round_robin(&tg_alive, knobs.budget / l1, |i| groupings[i].evaluations())
        };
        let mut budgets = vec![0u64; total];
        for &(i, b) in &jobs {
            budgets[i] = b;
        }
        let results: Vec<(Vec<InnerRound>, Vec<f64>)> = groupings
            .par_iter_mut()
            .enumerate()
            .map(|(i, g)| {
                if budgets[i] == 0 {
                    (Vec::new(), Vec::new())
                } else {
                    g.run_round(i, budgets[i], &ctx, knobs)
                }
            })
            .collect();
        let mut inner = Vec::new();
        for (records, history) in results {
            inner.extend(records);
            for c in history {
                consumed += 1;
                if c < incumbent {
                    incumbent = c;
                    trace.push((consumed, c));
                }
            }
        }
        rounds.push(OuterRound {
            m,
            surviving: tg_alive.clone(),
            per_grouping: per,
            inner,
        });
        tg_alive = best_half(&tg_alive, |i| groupings[i].best_cost());
    }

    let mut best: Option<(f64, usize, usize)> = None;
    let mut arms = Vec::new();
    for (i, g) in groupings.iter().enumerate() {
        for (j, arm) in g.arms.iter().enumerate() {
            let Some(arm) = arm else { continue };
            arms.push(ArmRecord {
                task_grouping: i,
                gpu_grouping: j,
                counts: g.gpu[j].counts.clone(),
                best_cost: arm.best_cost(),
                evaluations: arm.evaluations,
            });
            if arm.best_cost().is_finite() && best.is_none_or(|(c, _, _)| arm.best_cost() < c) {
                best = Some((arm.best_cost(), i, j));
            }
        }
    }
    let model_calls = ctx.model.calls();
    let Some((_, bi, bj)) = best else {
        return Err(Error::Infeasible);
    };
    let plan = groupings[bi].arms[bj]
        .as_ref()
        .expect("recorded")
        .best_plan(&ctx)
        .expect("finite cost");
    let (mut plan, refinement_evaluations) = refine(&ctx.model, plan, knobs.balance())?;
    plan.provenance = Provenance {
        seed: Some(knobs.seed),
        budget: Some(knobs.budget),
        evaluations: Some(consumed),
    };
    let breakdown = ctx.model.evaluate(&plan)?;
    if breakdown.end_to_end < incumbent {
        trace.push((consumed + refinement_evaluations, breakdown.end_to_end));
    }
    let state = SearchState {
        budget: knobs.budget,
        consumed,
        refinement_evaluations,
        model_calls,
        seed: knobs.seed,
        task_groupings: groupings.iter().map(|g| g.grouping.groups.clone()).collect(),
        rounds,
        arms,
        trace,
    };
    Ok(SearchOutcome { plan, breakdown, state })
}
