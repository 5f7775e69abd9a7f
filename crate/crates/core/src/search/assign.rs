//! Concrete device assignment (Levels 3 and 5) and the candidate encoding
//! the genetic search mutates.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng;

use super::enumerate::layout_options;
use crate::balance::apportion;
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::plan::{device_usage, GpuGrouping, ParallelLayout, Plan, Provenance, TaskGrouping, TaskletAssignment};
use crate::topology::DeviceTopology;
use crate::workflow::{TaskId, TaskKind, WorkflowGraph};

/// Device order grouped by region, then node, with every level shuffled;
/// then each position is swapped with a random later one with probability
/// 1 − `bias`. Bias 1 keeps nodes contiguous, bias 0 is a uniform shuffle.
pub fn locality_order(topology: &DeviceTopology, bias: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut tree: BTreeMap<&str, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (d, dev) in topology.devices().iter().enumerate() {
        tree.entry(&dev.region)
            .or_default()
            .entry(&dev.node)
            .or_default()
            .push(d);
    }
    let mut regions: Vec<Vec<Vec<usize>>> = tree.into_values().map(|nodes| nodes.into_values().collect()).collect();
    regions.shuffle(rng);
    let mut order = Vec::with_capacity(topology.len());
    for nodes in &mut regions {
        nodes.shuffle(rng);
        for devs in nodes.iter_mut() {
            devs.shuffle(rng);
            order.extend_from_slice(devs);
        }
    }
    let n = order.len();
    for pos in 0..n.saturating_sub(1) {
        if rng.gen::<f64>() >= bias {
            let j = rng.gen_range(pos..n);
            order.swap(pos, j);
        }
    }
    order
}

/// Splits a locality order into task-group device sets of the given sizes.
pub fn random_medium_assignment(
    grouping: &GpuGrouping,
    topology: &DeviceTopology,
    bias: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if grouping.total() != topology.len() {
        return Err(Error::invalid("GPU counts do not cover the topology"));
    }
    let order = locality_order(topology, bias, rng);
    let mut out = Vec::with_capacity(grouping.counts.len());
    let mut at = 0;
    for &c in &grouping.counts {
        let mut set = order[at..at + c].to_vec();
        set.sort_unstable();
        out.push(set);
        at += c;
    }
    Ok(out)
}

/// Random permutation of `0..n` made of shuffled blocks of `tp`
/// consecutive positions, each shuffled internally. Applied to a
/// node-ordered device list it keeps every TP group inside a block.
fn block_permutation(n: usize, tp: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut blocks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(tp.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    blocks.shuffle(rng);
    for b in &mut blocks {
        b.shuffle(rng);
    }
    blocks.concat()
}

/// Node-ordered key used to sort group devices before fine assignment.
fn locality_ranks(topology: &DeviceTopology) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..topology.len()).collect();
    idx.sort_by(|&a, &b| {
        let (da, db) = (topology.device(a), topology.device(b));
        (&da.region, &da.node, a).cmp(&(&db.region, &db.node, b))
    });
    let mut rank = vec![0; idx.len()];
    for (r, d) in idx.into_iter().enumerate() {
        rank[d] = r;
    }
    rank
}

/// Tasklet → device bijection per task for one task group. Devices are
/// taken in node order with shards innermost, so TP groups land on one
/// node when the group's nodes allow it; blocks are then shuffled.
pub fn random_fine_assignment(
    layouts: &[&ParallelLayout],
    devices: &[usize],
    topology: &DeviceTopology,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let rank = locality_ranks(topology);
    let mut sorted = devices.to_vec();
    sorted.sort_by_key(|&d| rank[d]);
    layouts
        .iter()
        .map(|l| {
            if l.tasklets() != sorted.len() {
                return Err(Error::invalid(format!(
                    "{} tasklets cannot map one-to-one onto {} devices",
                    l.tasklets(),
                    sorted.len()
                )));
            }
            Ok(block_permutation(sorted.len(), l.tp, rng)
                .into_iter()
                .map(|p| sorted[p])
                .collect())
        })
        .collect()
}

/// Search-wide precomputation shared by all arms.
pub struct SearchContext<'a> {
    pub model: CostModel<'a>,
    pub rank: Vec<usize>,
    pub classes: Vec<usize>,
    pub tp_cap: usize,
    capacity: Vec<f64>,
}

impl<'a> SearchContext<'a> {
    pub fn new(workflow: &'a WorkflowGraph, topology: &'a DeviceTopology) -> Self {
        let all: Vec<usize> = (0..topology.len()).collect();
        SearchContext {
            model: CostModel::new(workflow, topology),
            rank: locality_ranks(topology),
            classes: topology.interchange_classes(),
            tp_cap: topology.max_per_node(&all),
            capacity: topology.devices().iter().map(|d| d.mem()).collect(),
        }
    }

    pub fn workflow(&self) -> &'a WorkflowGraph {
        self.model.workflow()
    }

    pub fn topology(&self) -> &'a DeviceTopology {
        self.model.topology()
    }

    pub fn fits_memory(&self, plan: &Plan) -> bool {
        device_usage(plan, self.workflow(), self.topology())
            .iter()
            .zip(&self.capacity)
            .all(|(u, &m)| u.required() <= m)
    }
}

/// One (task grouping, GPU grouping) arm: the layouts each task may use.
#[derive(Debug, Clone)]
pub struct ArmSpace {
    pub grouping: TaskGrouping,
    pub counts: GpuGrouping,
    /// Task ids in workflow order.
    pub tasks: Vec<TaskId>,
    /// Group index of each task.
    pub task_group: Vec<usize>,
    pub options: Vec<Vec<ParallelLayout>>,
    offsets: Vec<usize>,
}

impl ArmSpace {
    pub fn new(ctx: &SearchContext, grouping: TaskGrouping, counts: GpuGrouping) -> Self {
        let wf = ctx.workflow();
        let tasks = wf.task_ids();
        let task_group: Vec<usize> = tasks
            .iter()
            .map(|&t| grouping.group_of(t).expect("grouping covers tasks"))
            .collect();
        let options = wf
            .tasks
            .iter()
            .zip(&task_group)
            .map(|(t, &g)| layout_options(counts.counts[g], t.model.num_layers, ctx.tp_cap))
            .collect();
        let mut offsets = Vec::with_capacity(counts.counts.len());
        let mut at = 0;
        for &c in &counts.counts {
            offsets.push(at);
            at += c;
        }
        ArmSpace {
            grouping,
            counts,
            tasks,
            task_group,
            options,
            offsets,
        }
    }

    /// False when some task has no layout for its group size.
    pub fn has_layouts(&self) -> bool {
        self.options.iter().all(|o| !o.is_empty())
    }

    fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g] + self.counts.counts[g]
    }

    /// Devices of group `g` under `genome`, in node order.
    pub fn group_devices(&self, ctx: &SearchContext, genome: &Genome, g: usize) -> Vec<usize> {
        let mut devs = genome.order[self.group_range(g)].to_vec();
        devs.sort_by_key(|&d| ctx.rank[d]);
        devs
    }

    pub fn random_genome(&self, ctx: &SearchContext, bias: f64, rng: &mut impl Rng) -> Genome {
        let layout: Vec<usize> = self.options.iter().map(|o| rng.gen_range(0..o.len())).collect();
        let order = locality_order(ctx.topology(), bias, rng);
        let fine = self
            .task_group
            .iter()
            .enumerate()
            .map(|(p, &g)| block_permutation(self.counts.counts[g], self.options[p][layout[p]].tp, rng))
            .collect();
        Genome { layout, order, fine }
    }

    pub fn to_plan(&self, ctx: &SearchContext, genome: &Genome) -> Plan {
        let groups: Vec<Vec<usize>> = (0..self.counts.counts.len())
            .map(|g| self.group_devices(ctx, genome, g))
            .collect();
        let mut layouts = BTreeMap::new();
        let mut per_task = BTreeMap::new();
        for (p, &t) in self.tasks.iter().enumerate() {
            let devs = &groups[self.task_group[p]];
            let placed: Vec<usize> = genome.fine[p].iter().map(|&x| devs[x]).collect();
            let mut layout = self.options[p][genome.layout[p]].clone();
            split_by_speed(ctx, t, &mut layout, &placed);
            layouts.insert(t, layout);
            per_task.insert(t, placed);
        }
        Plan {
            task_grouping: self.grouping.clone(),
            gpu_grouping: self.counts.clone(),
            layouts,
            assignment: TaskletAssignment { per_task },
            provenance: Provenance::default(),
        }
    }

    /// TP groups must fit within one node of the group's devices.
    pub fn tp_admissible(&self, ctx: &SearchContext, genome: &Genome) -> bool {
        let caps: Vec<usize> = (0..self.counts.counts.len())
            .map(|g| ctx.topology().max_per_node(&genome.order[self.group_range(g)]))
            .collect();
        self.task_group
            .iter()
            .enumerate()
            .all(|(p, &g)| self.options[p][genome.layout[p]].tp <= caps[g])
    }

    /// Level-5 move: exchange the devices of two tasklets of one task.
    pub fn swap_fine(&self, genome: &mut Genome, rng: &mut impl Rng) -> bool {
        let movable: Vec<usize> = (0..self.tasks.len()).filter(|&p| genome.fine[p].len() >= 2).collect();
        let Some(&p) = movable.choose(rng) else { return false };
        let n = genome.fine[p].len();
        let a = rng.gen_range(0..n);
        let b = (a + rng.gen_range(1..n)) % n;
        genome.fine[p].swap(a, b);
        true
    }

    /// Level-3 move: exchange one device between two task groups.
    pub fn swap_medium(&self, genome: &mut Genome, rng: &mut impl Rng) -> bool {
        let k = self.counts.counts.len();
        if k < 2 {
            return false;
        }
        let g1 = rng.gen_range(0..k);
        let g2 = (g1 + rng.gen_range(1..k)) % k;
        let a = rng.gen_range(self.group_range(g1));
        let b = rng.gen_range(self.group_range(g2));
        genome.order.swap(a, b);
        true
    }

    /// Picks another layout for one task and redraws its fine assignment.
    pub fn resample_layout(&self, genome: &mut Genome, rng: &mut impl Rng) -> bool {
        let movable: Vec<usize> = (0..self.tasks.len()).filter(|&p| self.options[p].len() >= 2).collect();
        let Some(&p) = movable.choose(rng) else { return false };
        let n = self.options[p].len();
        genome.layout[p] = (genome.layout[p] + rng.gen_range(1..n)) % n;
        let size = genome.fine[p].len();
        genome.fine[p] = block_permutation(size, self.options[p][genome.layout[p]].tp, rng);
        true
    }

    /// Hash that is equal for candidates differing only by a relabelling of
    /// interchangeable devices: per device class, the sorted multiset of
    /// (tasklet per task) profiles.
    pub fn canonical_key(&self, ctx: &SearchContext, genome: &Genome) -> u64 {
        let n = genome.order.len();
        let t = self.tasks.len();
        let mut profile = vec![u32::MAX; n * t];
        for g in 0..self.counts.counts.len() {
            let devs = self.group_devices(ctx, genome, g);
            for (p, _) in self.task_group.iter().enumerate().filter(|(_, &tg)| tg == g) {
                for (flat, &x) in genome.fine[p].iter().enumerate() {
                    profile[devs[x] * t + p] = flat as u32;
                }
            }
        }
        let mut rows: Vec<(usize, &[u32])> = (0..n).map(|d| (ctx.classes[d], &profile[d * t..(d + 1) * t])).collect();
        rows.sort_unstable();
        let mut h = DefaultHasher::new();
        genome.layout.hash(&mut h);
        rows.hash(&mut h);
        h.finish()
    }
}

/// Splits layers across stages in proportion to the slowest device of each
/// stage. Stages of equal speed keep the uniform split.
fn split_by_speed(ctx: &SearchContext, task: TaskId, layout: &mut ParallelLayout, devices: &[usize]) {
    if layout.pp < 2 {
        return;
    }
    let generation = ctx
        .workflow()
        .task(task)
        .is_some_and(|t| t.kind == TaskKind::Generation);
    let topo = ctx.topology();
    let speed: Vec<f64> = (0..layout.pp)
        .map(|j| {
            (0..layout.dp)
                .flat_map(|i| (0..layout.tp).map(move |k| (i, k)))
                .map(|(i, k)| {
                    let d = topo.device(devices[layout.index(i, j, k)]);
                    if generation {
                        d.hbm()
                    } else {
                        d.comp()
                    }
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    if speed.windows(2).all(|w| w[0] == w[1]) {
        return;
    }
    let total: u32 = layout.stage_layers.iter().sum();
    layout.stage_layers = apportion(total as u64, &speed).into_iter().map(|l| l as u32).collect();
}

/// Candidate encoding: a layout choice per task, a device order whose
/// consecutive chunks form the task groups, and per task a permutation
/// mapping tasklet positions onto the group's node-ordered devices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    pub layout: Vec<usize>,
    pub order: Vec<usize>,
    pub fine: Vec<Vec<usize>>,
}
