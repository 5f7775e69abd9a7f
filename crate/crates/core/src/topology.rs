//! Heterogeneous device pool: per-GPU attributes plus the rules that resolve
//! latency and bandwidth for every device pair.
//!
//! Attributes are stored in the units of the profiler file (TFLOPS, GB, GB/s,
//! ms, Gbps) so that serialization round-trips bit-exactly; accessors return
//! SI values. Bandwidths of device *memory* and the intra-node fabric are in
//! gigabytes per second, network bandwidths in gigabits per second.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TFLOPS: f64 = 1e12;
pub const GB: f64 = 1e9;
pub const GBPS_BITS: f64 = 1.25e8;
pub const MS: f64 = 1e-3;

/// Latency charged on same-node links.
pub const INTRA_NODE_LATENCY_S: f64 = 5e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: String,
    pub gpu_model: String,
    pub comp_tflops: f64,
    pub mem_gb: f64,
    /// HBM bandwidth, GB/s.
    pub hbm_gbps: f64,
    /// Intra-node interconnect bandwidth, GB/s.
    pub intra_node_gbps: f64,
    pub node: String,
    pub region: String,
    /// Caps every inter-node link touching this device (edge GPUs), Gbit/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_bandwidth_gbps: Option<f64>,
}

impl Device {
    pub fn comp(&self) -> f64 {
        self.comp_tflops * TFLOPS
    }
    pub fn mem(&self) -> f64 {
        self.mem_gb * GB
    }
    pub fn hbm(&self) -> f64 {
        self.hbm_gbps * GB
    }
    pub fn intra_node_bw(&self) -> f64 {
        self.intra_node_gbps * GB
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    /// Seconds.
    pub latency: f64,
    /// Bytes per second; `f64::INFINITY` on the self link.
    pub bandwidth: f64,
}

impl Link {
    pub const SELF: Link = Link {
        latency: 0.0,
        bandwidth: f64::INFINITY,
    };

    /// Time to move `bytes` over this link.
    pub fn transfer(&self, bytes: f64) -> f64 {
        if self.bandwidth.is_infinite() {
            self.latency
        } else {
            self.latency + bytes / self.bandwidth
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLink {
    pub src: String,
    pub dst: String,
    pub latency_ms: f64,
    pub bandwidth_gbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDefaults {
    pub intra_region_latency_ms: f64,
    pub intra_region_bandwidth_gbps: f64,
}

impl Default for LinkDefaults {
    fn default() -> Self {
        LinkDefaults {
            intra_region_latency_ms: 0.1,
            intra_region_bandwidth_gbps: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub devices: Vec<Device>,
    #[serde(default)]
    pub region_links: Vec<RegionLink>,
    #[serde(default)]
    pub defaults: LinkDefaults,
}

#[derive(Debug, Clone)]
pub struct DeviceTopology {
    file: TopologyFile,
    by_id: HashMap<String, usize>,
    regions: BTreeMap<(String, String), Link>,
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn region_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl DeviceTopology {
    pub fn from_file(file: TopologyFile) -> Result<Self> {
        if file.devices.is_empty() {
            return Err(Error::Schema("devices list is empty".into()));
        }
        let mut by_id = HashMap::new();
        for (i, d) in file.devices.iter().enumerate() {
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate device id `{}`", d.id)));
            }
            for (name, v) in [
                ("comp_tflops", d.comp_tflops),
                ("mem_gb", d.mem_gb),
                ("hbm_gbps", d.hbm_gbps),
                ("intra_node_gbps", d.intra_node_gbps),
            ] {
                if !positive(v) {
                    return Err(Error::invalid(format!("device `{}`: {name} must be > 0", d.id)));
                }
            }
            if let Some(cap) = d.edge_bandwidth_gbps {
                if !positive(cap) {
                    return Err(Error::invalid(format!("device `{}`: edge bandwidth must be > 0", d.id)));
                }
            }
        }
        let dflt = &file.defaults;
        // negated comparisons also reject NaN
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(dflt.intra_region_latency_ms >= 0.0) || !positive(dflt.intra_region_bandwidth_gbps) {
            return Err(Error::invalid(
                "intra-region defaults need latency >= 0 and bandwidth > 0",
            ));
        }
        let mut regions = BTreeMap::new();
        for l in &file.region_links {
            if l.src == l.dst {
                return Err(Error::invalid(format!(
                    "region link {} -> {} is a self loop",
                    l.src, l.dst
                )));
            }
            if l.latency_ms < 0.0 || !l.latency_ms.is_finite() || !positive(l.bandwidth_gbps) {
                return Err(Error::invalid(format!(
                    "region link {} - {} needs latency >= 0 and bandwidth > 0",
                    l.src, l.dst
                )));
            }
            regions.insert(
                region_key(&l.src, &l.dst),
                Link {
                    latency: l.latency_ms * MS,
                    bandwidth: l.bandwidth_gbps * GBPS_BITS,
                },
            );
        }
        let topo = DeviceTopology { file, by_id, regions };
        // every used region pair must resolve
        let mut used: Vec<&str> = topo.file.devices.iter().map(|d| d.region.as_str()).collect();
        used.sort_unstable();
        used.dedup();
        for (i, a) in used.iter().enumerate() {
            for b in &used[i + 1..] {
                if !topo.regions.contains_key(&region_key(a, b)) {
                    let da = topo.file.devices.iter().find(|d| d.region == *a).unwrap();
                    let db = topo.file.devices.iter().find(|d| d.region == *b).unwrap();
                    return Err(Error::UnresolvedLink(da.id.clone(), db.id.clone()));
                }
            }
        }
        Ok(topo)
    }

    pub fn devices(&self) -> &[Device] {
        &self.file.devices
    }

    pub fn len(&self) -> usize {
        self.file.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.file.devices.is_empty()
    }

    pub fn device(&self, idx: usize) -> &Device {
        &self.file.devices[idx]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownDevice(id.to_string()))
    }

    pub fn to_file(&self) -> &TopologyFile {
        &self.file
    }

    /// Link between two device indices.
    pub fn link(&self, a: usize, b: usize) -> Link {
        if a == b {
            return Link::SELF;
        }
        let da = &self.file.devices[a];
        let db = &self.file.devices[b];
        if da.node == db.node && da.region == db.region {
            return Link {
                latency: INTRA_NODE_LATENCY_S,
                bandwidth: da.intra_node_bw().min(db.intra_node_bw()),
            };
        }
        let mut link = if da.region == db.region {
            Link {
                latency: self.file.defaults.intra_region_latency_ms * MS,
                bandwidth: self.file.defaults.intra_region_bandwidth_gbps * GBPS_BITS,
            }
        } else {
            // resolvability is checked at construction
            self.regions[&region_key(&da.region, &db.region)]
        };
        for cap in [da.edge_bandwidth_gbps, db.edge_bandwidth_gbps].into_iter().flatten() {
            link.bandwidth = link.bandwidth.min(cap * GBPS_BITS);
        }
        link
    }

    pub fn effective_link(&self, a: &str, b: &str) -> Result<Link> {
        Ok(self.link(self.index_of(a)?, self.index_of(b)?))
    }

    /// Dense latency and inverse-bandwidth matrices for the cost model.
    pub fn link_matrix(&self) -> LinkMatrix {
        let n = self.len();
        let mut latency = vec![0.0; n * n];
        let mut inv_bw = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let l = self.link(a, b);
                latency[a * n + b] = l.latency;
                inv_bw[a * n + b] = if l.bandwidth.is_infinite() {
                    0.0
                } else {
                    1.0 / l.bandwidth
                };
            }
        }
        LinkMatrix { n, latency, inv_bw }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.file)?)
    }

    /// Largest number of devices sharing one node among `devices`.
    pub fn max_per_node(&self, devices: &[usize]) -> usize {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for &d in devices {
            let dev = &self.file.devices[d];
            *counts.entry((&dev.region, &dev.node)).or_default() += 1;
        }
        counts.values().copied().max().unwrap_or(0)
    }

    /// Equivalence classes of fully interchangeable devices: same node and
    /// identical attributes. Returned as one class id per device.
    pub fn interchange_classes(&self) -> Vec<usize> {
        let mut keys: Vec<String> = Vec::new();
        let mut out = Vec::with_capacity(self.len());
        for d in &self.file.devices {
            let key = format!(
                "{}|{}|{}|{:?}|{:?}|{:?}|{:?}|{:?}",
                d.region,
                d.node,
                d.gpu_model,
                d.comp_tflops,
                d.mem_gb,
                d.hbm_gbps,
                d.intra_node_gbps,
                d.edge_bandwidth_gbps
            );
            let id = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            };
            out.push(id);
        }
        out
    }
}

/// Row-major N×N link tables. The self entries are zero in both tables.
#[derive(Debug, Clone)]
pub struct LinkMatrix {
    pub n: usize,
    pub latency: Vec<f64>,
    pub inv_bw: Vec<f64>,
}

impl LinkMatrix {
    #[inline]
    pub fn cost(&self, a: usize, b: usize, bytes: f64) -> f64 {
        let i = a * self.n + b;
        self.latency[i] + bytes * self.inv_bw[i]
    }
}

pub fn parse_topology(json: &str) -> Result<DeviceTopology> {
    let file: TopologyFile = serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))?;
    DeviceTopology::from_file(file)
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<DeviceTopology> {
    parse_topology(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Built-in GPU catalogue and scenario synthesis

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpuSpec {
    pub name: &'static str,
    pub comp_tflops: f64,
    pub mem_gb: f64,
    pub hbm_gbps: f64,
    pub intra_node_gbps: f64,
}

pub const GPU_CATALOGUE: [GpuSpec; 3] = [
    GpuSpec {
        name: "A100",
        comp_tflops: 312.0,
        mem_gb: 40.0,
        hbm_gbps: 2039.0,
        intra_node_gbps: 600.0,
    },
    GpuSpec {
        name: "L40S",
        comp_tflops: 366.0,
        mem_gb: 48.0,
        hbm_gbps: 864.0,
        intra_node_gbps: 64.0,
    },
    GpuSpec {
        name: "L4",
        comp_tflops: 121.0,
        mem_gb: 24.0,
        hbm_gbps: 300.0,
        intra_node_gbps: 64.0,
    },
];

pub fn gpu_spec(name: &str) -> Result<GpuSpec> {
    GPU_CATALOGUE
        .iter()
        .find(|g| g.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| Error::invalid(format!("unknown GPU model `{name}`")))
}

/// Device counts per GPU model, in declaration order.
pub type Inventory = Vec<(String, usize)>;

pub fn default_inventory() -> Inventory {
    vec![("A100".into(), 24), ("L40S".into(), 24), ("L4".into(), 16)]
}

/// Parses `"24xA100,24xL40S,16xL4"`.
pub fn parse_inventory(s: &str) -> Result<Inventory> {
    let mut inv = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (count, model) = part
            .split_once(['x', 'X', '*'])
            .ok_or_else(|| Error::invalid(format!("bad inventory entry `{part}`, expected NxMODEL")))?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad count in `{part}`")))?;
        let spec = gpu_spec(model.trim())?;
        if count == 0 {
            return Err(Error::invalid(format!("zero count in `{part}`")));
        }
        inv.push((spec.name.to_string(), count));
    }
    if inv.is_empty() {
        return Err(Error::invalid("inventory is empty"));
    }
    Ok(inv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOptions {
    pub gpus_per_node: usize,
    /// Scenario 2: devices of this model in the second region sit at the edge.
    pub edge_model: Option<String>,
    pub edge_bandwidth_gbps: f64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            gpus_per_node: 8,
            edge_model: Some("L4".into()),
            edge_bandwidth_gbps: 1.0,
        }
    }
}

const EUROPE: [&str; 8] = [
    "paris",
    "stockholm",
    "london",
    "ireland",
    "spain",
    "zurich",
    "frankfurt",
    "milan",
];
const EUROPE_US: [&str; 8] = [
    "virginia",
    "ohio",
    "paris",
    "stockholm",
    "london",
    "ireland",
    "frankfurt",
    "milan",
];

struct NodeSpec {
    model: GpuSpec,
    name: String,
    size: usize,
}

fn build_nodes(inventory: &Inventory, per_node: usize) -> Result<Vec<NodeSpec>> {
    let mut nodes = Vec::new();
    // node numbering continues when a model appears more than once
    let mut next: HashMap<&str, usize> = HashMap::new();
    for (model, count) in inventory {
        let spec = gpu_spec(model)?;
        let mut left = *count;
        let k = next.entry(spec.name).or_default();
        while left > 0 {
            let size = left.min(per_node);
            nodes.push(NodeSpec {
                model: spec,
                name: format!("{}-n{}", spec.name.to_lowercase(), k),
                size,
            });
            left -= size;
            *k += 1;
        }
    }
    Ok(nodes)
}

/// Synthesizes one of the four evaluation network environments.
///
/// 1: single region, default intra-region networking.
/// 2: Ohio and Virginia at 10 ms / 5 Gbps; edge GPUs in Virginia capped at 1 Gbps.
/// 3: eight European regions, pairwise 5-30 ms and 1.9-5.0 Gbps.
/// 4: eight regions across Europe and the US, 5-60 ms and 0.9-5.0 Gbps.
pub fn generate_scenario(
    scenario: u32,
    inventory: &Inventory,
    seed: u64,
    opts: &ScenarioOptions,
) -> Result<DeviceTopology> {
    if !(1..=4).contains(&scenario) {
        return Err(Error::invalid(format!("unknown scenario id {scenario}")));
    }
    if opts.gpus_per_node == 0 {
        return Err(Error::invalid("gpus_per_node must be >= 1"));
    }
    let nodes = build_nodes(inventory, opts.gpus_per_node)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_model = inventory.first().map(|(m, _)| m.clone()).unwrap_or_default();
    let single_model = inventory.iter().all(|(m, _)| *m == first_model);

    let region_of = |idx: usize, node: &NodeSpec| -> String {
        match scenario {
            1 => "virginia".into(),
            2 => {
                let ohio = if single_model {
                    idx < nodes.len().div_ceil(2)
                } else {
                    node.model.name == first_model
                };
                if ohio { "ohio" } else { "virginia" }.into()
            }
            3 => EUROPE[idx % EUROPE.len()].into(),
            _ => EUROPE_US[idx % EUROPE_US.len()].into(),
        }
    };

    let mut devices = Vec::new();
    for (idx, node) in nodes.iter().enumerate() {
        let region = region_of(idx, node);
        let edge = scenario == 2
            && region == "virginia"
            && opts
                .edge_model
                .as_deref()
                .is_some_and(|m| m.eq_ignore_ascii_case(node.model.name));
        for g in 0..node.size {
            devices.push(Device {
                id: format!("{}-g{}", node.name, g),
                gpu_model: node.model.name.to_string(),
                comp_tflops: node.model.comp_tflops,
                mem_gb: node.model.mem_gb,
                hbm_gbps: node.model.hbm_gbps,
                intra_node_gbps: node.model.intra_node_gbps,
                node: node.name.clone(),
                region: region.clone(),
                edge_bandwidth_gbps: edge.then_some(opts.edge_bandwidth_gbps),
            });
        }
    }

    let mut region_links = Vec::new();
    match scenario {
        1 => {}
        2 => region_links.push(RegionLink {
            src: "ohio".into(),
            dst: "virginia".into(),
            latency_ms: 10.0,
            bandwidth_gbps: 5.0,
        }),
        _ => {
            let (names, lat_hi, bw_lo): (&[&str], f64, f64) = if scenario == 3 {
                (&EUROPE, 30.0, 1.9)
            } else {
                (&EUROPE_US, 60.0, 0.9)
            };
            for (i, a) in names.iter().enumerate() {
                for b in &names[i + 1..] {
                    region_links.push(RegionLink {
                        src: a.to_string(),
                        dst: b.to_string(),
                        latency_ms: rng.gen_range(5.0..=lat_hi),
                        bandwidth_gbps: rng.gen_range(bw_lo..=5.0),
                    });
                }
            }
        }
    }

    DeviceTopology::from_file(TopologyFile {
        devices,
        region_links,
        defaults: LinkDefaults::default(),
    })
}
