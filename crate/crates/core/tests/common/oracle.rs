//! Straight-line reference implementation of the analytic cost formulas,
//! kept independent of the library's cost module.

use rlsched::topology::DeviceTopology;
use rlsched::workflow::{Algorithm, Mode, ModelRole, RlTask, TaskKind, WorkflowGraph};
use rlsched::Plan;

/// Per-task components in seconds: comp, tp, pp, dp, bubble, hbm, total.
#[derive(Debug, Clone, Default)]
pub struct OracleTask {
    pub comp: f64,
    pub tp: f64,
    pub pp: f64,
    pub dp: f64,
    pub bubble: f64,
    pub hbm: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct OracleCost {
    pub tasks: Vec<(u8, OracleTask)>,
    pub reshard: f64,
    pub sync: f64,
    pub end_to_end: f64,
}

fn edge(topo: &DeviceTopology, a: usize, b: usize, bytes: f64) -> f64 {
    topo.link(a, b).latency + bytes / topo.link(a, b).bandwidth
}

fn hop(topo: &DeviceTopology, a: usize, b: usize, bytes: f64) -> f64 {
    edge(topo, a, b, bytes).max(edge(topo, b, a, bytes))
}

/// Every cyclic order with the first device fixed.
fn ring(topo: &DeviceTopology, devs: &[usize], bytes: f64) -> f64 {
    if devs.len() < 2 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    permute(&mut devs[1..].to_vec(), 0, &mut |order| {
        let mut cyc = vec![devs[0]];
        cyc.extend_from_slice(order);
        let worst = (0..cyc.len())
            .map(|p| hop(topo, cyc[p], cyc[(p + 1) % cyc.len()], bytes))
            .fold(0.0, f64::max);
        best = best.min(worst);
    });
    best
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        return f(v);
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

fn layer_params(t: &RlTask) -> f64 {
    let (h1, h2) = (t.model.hidden_size as f64, t.model.intermediate_size as f64);
    4.0 * h1 * h1 + 3.0 * h1 * h2
}

/// Weight bytes resident on each device, summed over all tasklets.
fn weight_bytes(plan: &Plan, wf: &WorkflowGraph, n: usize) -> Vec<f64> {
    let mm = &wf.cost_model.memory;
    let mut w = vec![0.0; n];
    for t in &wf.tasks {
        let l = &plan.layouts[&t.id];
        let devs = &plan.assignment.per_task[&t.id];
        let per_param = [
            mm.generation_bytes_per_param,
            mm.inference_bytes_per_param,
            mm.training_bytes_per_param,
        ][t.kind as usize];
        for (pos, &d) in devs.iter().enumerate() {
            let j = (pos / l.tp) % l.pp;
            let embed = if j == 0 { t.model.embedding_params() as f64 } else { 0.0 };
            w[d] += (l.stage_layers[j] as f64 * layer_params(t) + embed) / l.tp as f64 * per_param;
        }
    }
    w
}

fn phi(xs: &[f64], eta: f64) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + (1.0 - eta) * (xs.iter().sum::<f64>() - max)
}

pub fn oracle_cost(plan: &Plan, wf: &WorkflowGraph, topo: &DeviceTopology) -> OracleCost {
    let b = &wf.batch;
    let mbs = b.micro_batch_size as f64;
    let s_tot = (b.seq_in + b.seq_out) as f64;
    let weights = weight_bytes(plan, wf, topo.len());
    let mut tasks = Vec::new();
    for t in &wf.tasks {
        let l = &plan.layouts[&t.id];
        let devs = &plan.assignment.per_task[&t.id];
        let at = |i: usize, j: usize, k: usize| devs[i * l.pp * l.tp + j * l.tp + k];
        let bytes = t.precision_bytes as f64;
        let (h1, lp) = (t.model.hidden_size as f64, layer_params(t));
        let total_seqs = (b.global_batch * b.responses_per_prompt) as f64;
        let nm = (total_seqs / (l.dp as f64 * mbs)).ceil();
        let train = t.kind == TaskKind::Training;
        let s = if t.kind == TaskKind::Generation {
            b.seq_in as f64
        } else {
            s_tot
        };
        let h2 = t.model.intermediate_size as f64;
        let flops = 2.0 * 4.0 * s * h1 * h1 + 2.0 * 2.0 * s * s * h1 + 2.0 * 3.0 * s * h1 * h2;
        let tp_factor = if !train {
            2.0
        } else if wf.cost_model.recompute {
            6.0
        } else {
            4.0
        };
        let cv_tp = bytes * mbs * s_tot * h1 * 2.0 * (l.tp as f64 - 1.0) / l.tp as f64;
        let cv_pp = bytes * mbs * s_tot * h1;
        let mut o = OracleTask::default();
        for i in 0..l.dp {
            let nm_i = nm * l.replica_batch_weights[i];
            let mut busy_max: f64 = 0.0;
            let mut gen_max: f64 = 0.0;
            let mut tail_sum = 0.0;
            for j in 0..l.pp {
                let nl = l.stage_layers[j] as f64;
                let shards: Vec<usize> = (0..l.tp).map(|k| at(i, j, k)).collect();
                let c_tp = tp_factor * nm_i * nl * ring(topo, &shards, cv_tp);
                let pairs = (0..l.tp)
                    .flat_map(|k| (0..l.tp).map(move |k2| (k, k2)))
                    .filter(|_| j + 1 < l.pp);
                let best = pairs
                    .map(|(k, k2)| edge(topo, at(i, j, k), at(i, j + 1, k2), cv_pp))
                    .fold(f64::INFINITY, f64::min);
                let c_pp = if j + 1 < l.pp {
                    (if train { 2.0 } else { 1.0 }) * nm_i * best
                } else {
                    0.0
                };
                let mut c_comp: f64 = 0.0;
                let mut c_hbm: f64 = 0.0;
                for k in 0..l.tp {
                    let d = topo.device(at(i, j, k));
                    let f = if train { 3.0 } else { 1.0 };
                    c_comp = c_comp.max(f * nm_i * mbs * nl * flops / (d.comp_tflops * 1e12 * l.tp as f64));
                    if t.kind == TaskKind::Generation {
                        let kv = s_tot * 2.0 * h1 * nl * wf.cost_model.memory.kv_bytes_per_elem / l.tp as f64;
                        let free = d.mem_gb * 1e9 - weights[at(i, j, k)];
                        let derived = (free / kv).floor().max(1.0).min((nm_i * mbs).max(1.0));
                        let dbs = wf.cost_model.decode_batch_size.unwrap_or(derived);
                        c_hbm = c_hbm.max(
                            b.seq_out as f64 * nm_i * mbs * bytes * nl * lp / (dbs * d.hbm_gbps * 1e9 * l.tp as f64),
                        );
                    }
                }
                let busy = c_comp + c_tp + c_pp;
                o.comp = o.comp.max(c_comp);
                o.tp = o.tp.max(c_tp);
                o.pp = o.pp.max(c_pp);
                o.hbm = o.hbm.max(c_hbm);
                busy_max = busy_max.max(busy);
                gen_max = gen_max.max(busy + c_hbm);
                if j > 0 {
                    tail_sum += busy;
                }
            }
            o.total = o.total.max(match t.kind {
                TaskKind::Generation => gen_max,
                TaskKind::Inference => busy_max,
                TaskKind::Training => {
                    o.bubble = o.bubble.max(tail_sum / nm_i);
                    busy_max + tail_sum / nm_i
                }
            });
        }
        if train && l.dp > 1 {
            for j in 0..l.pp {
                let cv =
                    bytes * l.stage_layers[j] as f64 * lp * 2.0 * (l.dp as f64 - 1.0) / (l.dp as f64 * l.tp as f64);
                for k in 0..l.tp {
                    let peers: Vec<usize> = (0..l.dp).map(|i| at(i, j, k)).collect();
                    o.dp = o.dp.max(ring(topo, &peers, cv));
                }
            }
            o.total += o.dp;
        }
        tasks.push((t.id, o));
    }

    let cost = |id: u8| tasks.iter().find(|(t, _)| *t == id).map(|(_, o)| o.total).unwrap();
    // actor weights moved from training to generation devices
    let gen = wf.tasks.iter().find(|t| t.kind == TaskKind::Generation);
    let train = wf
        .tasks
        .iter()
        .find(|t| t.kind == TaskKind::Training && t.role == ModelRole::Actor);
    let mut transfer = 0.0;
    if let (Some(g), Some(tr)) = (gen, train) {
        let (src, dst) = (&plan.assignment.per_task[&tr.id], &plan.assignment.per_task[&g.id]);
        let pairs = src.iter().flat_map(|&a| dst.iter().map(move |&c| (a, c)));
        let one = |(a, c)| {
            if a == c {
                0.0
            } else {
                edge(topo, a, c, g.model.param_count as f64 * 2.0)
            }
        };
        transfer = pairs.map(one).fold(f64::INFINITY, f64::min);
    }
    let sync_mode = wf.mode == Mode::Sync;
    let reshard = if sync_mode {
        wf.cost_model.reshard_cost_s.unwrap_or(transfer)
    } else {
        0.0
    };
    let sync = if sync_mode {
        0.0
    } else {
        wf.cost_model.sync_cost_s.unwrap_or(transfer)
    };
    let (head, tail) = match wf.algorithm {
        Algorithm::Ppo => (
            cost(1),
            phi(&[cost(2), cost(3), cost(4)], wf.eta) + phi(&[cost(5), cost(6)], wf.eta),
        ),
        Algorithm::Grpo => (cost(1), phi(&[cost(2), cost(3)], wf.eta) + cost(6)),
        Algorithm::Custom => {
            // longest-path depth from the sources
            let mut depth: Vec<(u8, usize)> = wf.tasks.iter().map(|t| (t.id, 0)).collect();
            for _ in 0..wf.tasks.len() {
                for &(a, c) in &wf.dep_edges {
                    let da = depth.iter().find(|x| x.0 == a).unwrap().1;
                    let slot = depth.iter_mut().find(|x| x.0 == c).unwrap();
                    slot.1 = slot.1.max(da + 1);
                }
            }
            let top = depth.iter().map(|x| x.1).max().unwrap();
            let lvl = |l: usize| {
                phi(
                    &depth.iter().filter(|x| x.1 == l).map(|x| cost(x.0)).collect::<Vec<_>>(),
                    wf.eta,
                )
            };
            (lvl(0), (1..=top).map(lvl).sum())
        }
    };
    let end_to_end = if sync_mode {
        head + tail + reshard
    } else {
        head.max(tail) + sync
    };
    OracleCost {
        tasks,
        reshard,
        sync,
        end_to_end,
    }
}
