//! Load balancing of a finished plan, driven by the cost model. Every pass
//! keeps the input unless the end-to-end estimate strictly drops, so none
//! of them can make a plan worse.

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::plan::{device_usage, Plan, SeqlenRoute};
use crate::workflow::{SeqlenBucket, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceToggles {
    pub data: bool,
    pub layers: bool,
    pub seqlen: bool,
}

impl Default for BalanceToggles {
    fn default() -> Self {
        BalanceToggles {
            data: true,
            layers: true,
            seqlen: true,
        }
    }
}

/// A balanced plan and the cost-model evaluations spent finding it.
#[derive(Debug, Clone)]
pub struct Balanced {
    pub plan: Plan,
    pub evaluations: u64,
}

fn fits(model: &CostModel, plan: &Plan) -> bool {
    let topo = model.topology();
    device_usage(plan, model.workflow(), topo)
        .iter()
        .zip(topo.devices())
        .all(|(u, d)| u.required() <= d.mem())
}

/// Scores candidates against an incumbent and keeps the best.
struct Incumbent {
    plan: Plan,
    cost: f64,
    evaluations: u64,
}

impl Incumbent {
    fn new(model: &CostModel, plan: Plan) -> Result<Self> {
        let cost = model.evaluate(&plan)?.end_to_end;
        Ok(Incumbent {
            plan,
            cost,
            evaluations: 1,
        })
    }

    /// True when `candidate` strictly improved and was adopted. A feasible
    /// incumbent is never traded for a memory-infeasible candidate.
    fn offer(&mut self, model: &CostModel, candidate: Plan) -> Result<bool> {
        if fits(model, &self.plan) && !fits(model, &candidate) {
            return Ok(false);
        }
        self.evaluations += 1;
        let cost = model.evaluate(&candidate)?.end_to_end;
        if cost < self.cost {
            self.plan = candidate;
            self.cost = cost;
            return Ok(true);
        }
        Ok(false)
    }

    fn done(self) -> Balanced {
        Balanced {
            plan: self.plan,
            evaluations: self.evaluations,
        }
    }
}

/// Integer shares of `total` proportional to `rates`, each at least one,
/// by largest remainder.
pub(crate) fn apportion(total: u64, rates: &[f64]) -> Vec<u64> {
    let n = rates.len() as u64;
    let sum: f64 = rates.iter().sum();
    let spare = total.saturating_sub(n);
    let exact: Vec<f64> = rates.iter().map(|r| spare as f64 * r / sum).collect();
    let mut shares: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let mut left = spare - shares.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    shares.iter().map(|s| s + 1).collect()
}

/// Replica rates of `task`: micro-batches per second at the current split.
fn replica_rates(model: &CostModel, plan: &Plan, task: u8) -> Result<Vec<f64>> {
    let (_, nm) = model.stage_costs(plan, task)?;
    let times = model.replica_times(plan, task)?;
    Ok(times
        .iter()
        .zip(&nm)
        .map(|(t, n)| if *t > 0.0 { n / t } else { f64::INFINITY })
        .collect())
}

/// Re-splits the generation batch across DP replicas in proportion to each
/// replica's rate, in whole micro-batches.
pub fn balance_data(model: &CostModel, plan: Plan) -> Result<Balanced> {
    let mut inc = Incumbent::new(model, plan)?;
    let wf = model.workflow();
    for task in wf.tasks.iter().filter(|t| t.kind == TaskKind::Generation) {
        let dp = inc.plan.layout(task.id)?.dp;
        if dp < 2 {
            continue;
        }
        let nm = wf.num_microbatches(dp as u64, task.kind)?;
        // rates shift with the decode batch, so iterate a few times
        for _ in 0..3 {
            let rates = replica_rates(model, &inc.plan, task.id)?;
            if rates.iter().any(|r| !r.is_finite()) {
                break;
            }
            let shares = apportion(dp as u64 * nm, &rates);
            let mut candidate = inc.plan.clone();
            let layout = candidate.layouts.get_mut(&task.id).expect("layout checked");
            layout.replica_batch_weights = shares.iter().map(|&s| s as f64 / nm as f64).collect();
            if layout.replica_batch_weights == inc.plan.layouts[&task.id].replica_batch_weights {
                break;
            }
            if !inc.offer(model, candidate)? {
                break;
            }
        }
    }
    Ok(inc.done())
}

/// Every split of `layers` into `stages` positive parts.
fn splits(layers: u32, stages: usize) -> Vec<Vec<u32>> {
    fn rec(left: u32, stages: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if stages == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for c in 1..=left.saturating_sub(stages as u32 - 1) {
            cur.push(c);
            rec(left - c, stages - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(layers, stages, &mut Vec::new(), &mut out);
    out
}

/// Largest pp·nl for which every layer split is tried.
const EXACT_SPLIT_LIMIT: usize = 64;

/// Moves layers between pipeline stages towards equal stage times.
pub fn balance_layers(model: &CostModel, plan: Plan) -> Result<Balanced> {
    let mut inc = Incumbent::new(model, plan)?;
    for task in &model.workflow().tasks {
        let layout = inc.plan.layout(task.id)?.clone();
        let nl = task.model.num_layers;
        if layout.pp < 2 || layout.pp == nl as usize {
            continue;
        }
        if layout.pp * nl as usize <= EXACT_SPLIT_LIMIT {
            for split in splits(nl, layout.pp) {
                if split == inc.plan.layouts[&task.id].stage_layers {
                    continue;
                }
                let mut candidate = inc.plan.clone();
                candidate
                    .layouts
                    .get_mut(&task.id)
                    .expect("layout checked")
                    .stage_layers = split;
                inc.offer(model, candidate)?;
            }
            continue;
        }
        // greedy: shift one layer off the slowest stage to its cheaper neighbour
        for _ in 0..nl as usize * layout.pp {
            let (grid, _) = model.stage_costs(&inc.plan, task.id)?;
            let stage_time: Vec<f64> = (0..layout.pp)
                .map(|j| {
                    grid.iter()
                        .map(|row| row[j].comp + row[j].tp + row[j].pp + row[j].hbm)
                        .fold(0.0, f64::max)
                })
                .collect();
            let layers = &inc.plan.layouts[&task.id].stage_layers;
            let b = (0..layout.pp)
                .max_by(|&x, &y| stage_time[x].total_cmp(&stage_time[y]))
                .expect("pp >= 2");
            if layers[b] <= 1 {
                break;
            }
            let neighbours = [b.checked_sub(1), (b + 1 < layout.pp).then_some(b + 1)];
            let Some(to) = neighbours
                .into_iter()
                .flatten()
                .min_by(|&x, &y| stage_time[x].total_cmp(&stage_time[y]))
            else {
                break;
            };
            let mut candidate = inc.plan.clone();
            let l = &mut candidate
                .layouts
                .get_mut(&task.id)
                .expect("layout checked")
                .stage_layers;
            l[b] -= 1;
            l[to] += 1;
            if !inc.offer(model, candidate)? {
                break;
            }
        }
    }
    Ok(inc.done())
}

/// Longest-processing-time assignment of whole length buckets to replicas:
/// longest bucket first, each to the replica that would finish it soonest
/// given its `rates` (tokens per unit time, relative).
pub fn assign_by_seqlen(histogram: &[SeqlenBucket], rates: &[f64]) -> Result<Vec<SeqlenRoute>> {
    if histogram.is_empty() {
        return Err(Error::invalid("sequence-length histogram is empty"));
    }
    if rates.is_empty() || rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid("replica rates must be positive"));
    }
    let mut buckets: Vec<&SeqlenBucket> = histogram.iter().collect();
    buckets.sort_by(|a, b| b.length.cmp(&a.length).then(b.count.cmp(&a.count)));
    let mut load = vec![0.0; rates.len()];
    let mut routes = Vec::with_capacity(buckets.len());
    for b in buckets {
        let tokens = (b.length * b.count) as f64;
        let replica = (0..rates.len())
            .min_by(|&x, &y| {
                ((load[x] + tokens) / rates[x])
                    .total_cmp(&((load[y] + tokens) / rates[y]))
                    .then(x.cmp(&y))
            })
            .expect("rates non-empty");
        load[replica] += tokens;
        routes.push(SeqlenRoute {
            length: b.length,
            count: b.count,
            replica,
        });
    }
    Ok(routes)
}

/// Token load per replica under `routes`.
pub fn route_loads(routes: &[SeqlenRoute], replicas: usize) -> Vec<f64> {
    let mut load = vec![0.0; replicas];
    for r in routes {
        load[r.replica] += (r.length * r.count) as f64;
    }
    load
}

/// Routes length buckets of inference and training tasks to replicas by
/// speed; the resulting token shares become the replica batch weights.
pub fn balance_seqlen(model: &CostModel, plan: Plan) -> Result<Balanced> {
    let mut inc = Incumbent::new(model, plan)?;
    let wf = model.workflow();
    let Some(histogram) = wf.batch.seqlen_histogram.as_ref().filter(|h| !h.is_empty()) else {
        return Ok(inc.done());
    };
    for task in wf.tasks.iter().filter(|t| t.kind != TaskKind::Generation) {
        let dp = inc.plan.layout(task.id)?.dp;
        if dp < 2 {
            continue;
        }
        let rates = replica_rates(model, &inc.plan, task.id)?;
        let Ok(routes) = assign_by_seqlen(histogram, &rates) else {
            continue;
        };
        let loads = route_loads(&routes, dp);
        let total: f64 = loads.iter().sum();
        if loads.iter().any(|&l| l <= 0.0) {
            continue;
        }
        let mut candidate = inc.plan.clone();
        let layout = candidate.layouts.get_mut(&task.id).expect("layout checked");
        layout.replica_batch_weights = loads.iter().map(|l| dp as f64 * l / total).collect();
        layout.seqlen_assignment = Some(routes);
        inc.offer(model, candidate)?;
    }
    Ok(inc.done())
}

/// Data, layer and sequence-length balancing in turn, as enabled.
pub fn refine(model: &CostModel, plan: Plan, toggles: BalanceToggles) -> Result<(Plan, u64)> {
    let mut plan = plan;
    let mut evaluations = 0;
    type Pass = fn(&CostModel, Plan) -> Result<Balanced>;
    let passes: [(bool, Pass); 3] = [
        (toggles.data, balance_data),
        (toggles.layers, balance_layers),
        (toggles.seqlen, balance_seqlen),
    ];
    for (on, pass) in passes {
        if on {
            let b = pass(model, plan)?;
            plan = b.plan;
            evaluations += b.evaluations;
        }
    }
    Ok((plan, evaluations))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bucket(length: u64, count: u64) -> SeqlenBucket {
        SeqlenBucket { length, count }
    }

    #[test]
    fn apportion_is_exact_and_proportional() {
        assert_eq!(apportion(6, &[2.0, 1.0]), vec![4, 2]);
        assert_eq!(apportion(4, &[1.0, 1.0]), vec![2, 2]);
        assert_eq!(apportion(2, &[100.0, 1.0]), vec![1, 1]);
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]).iter().sum::<u64>(), 7);
    }

    #[test]
    fn seqlen_routes_long_buckets_to_fast_replicas() {
        let routes = assign_by_seqlen(&[bucket(512, 100), bucket(1024, 100)], &[2.0, 1.0]).unwrap();
        let r1024 = routes.iter().find(|r| r.length == 1024).unwrap();
        assert_eq!(r1024.replica, 0);
        let loads = route_loads(&routes, 2);
        assert_eq!(loads[0] / loads[1], 2.0);
    }

    #[test]
    fn seqlen_single_replica_and_errors() {
        let routes = assign_by_seqlen(&[bucket(10, 1), bucket(20, 3)], &[1.0]).unwrap();
        assert!(routes.iter().all(|r| r.replica == 0));
        assert!(assign_by_seqlen(&[], &[1.0]).is_err());
        let even = assign_by_seqlen(&[bucket(8, 2), bucket(8, 2)], &[1.0, 1.0]).unwrap();
        assert_eq!(route_loads(&even, 2), vec![16.0, 16.0]);
    }

    #[test]
    fn layer_splits() {
        assert_eq!(splits(4, 2), vec![vec![1, 3], vec![2, 2], vec![3, 1]]);
        assert_eq!(splits(3, 3), vec![vec![1, 1, 1]]);
    }
}
