//! RL workflow description: the tasks of one training iteration, the models
//! behind them, batch geometry, and the dataflow edges between tasks.
//!
//! Task ids follow the canonical PPO numbering: 1 actor generation, 2 reward
//! inference, 3 reference inference, 4 critic inference, 5 critic training,
//! 6 actor training. GRPO keeps ids {1, 2, 3, 6}.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostConfig;
use crate::error::{Error, Result};

pub type TaskId = u8;

/// Bytes per BF16 element.
pub const BF16_BYTES: u32 = 2;
pub const FP32_BYTES: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ppo,
    Grpo,
    /// Hand-built task sets; end-to-end cost composes dependency levels.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Generation,
    Inference,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Actor,
    Critic,
    Reward,
    Reference,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Generation => "generation",
            TaskKind::Inference => "inference",
            TaskKind::Training => "training",
        })
    }
}

/// Dense transformer dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden_size: u64,
    pub intermediate_size: u64,
    pub num_layers: u32,
    pub param_count: u64,
    #[serde(default)]
    pub vocab_size: u64,
    #[serde(default)]
    pub include_embeddings: bool,
}

impl ModelSpec {
    pub fn new(hidden_size: u64, intermediate_size: u64, num_layers: u32) -> Result<Self> {
        Self::with_embeddings(hidden_size, intermediate_size, num_layers, 0, false)
    }

    pub fn with_embeddings(
        hidden_size: u64,
        intermediate_size: u64,
        num_layers: u32,
        vocab_size: u64,
        include_embeddings: bool,
    ) -> Result<Self> {
        if hidden_size == 0 || intermediate_size == 0 || num_layers == 0 {
            return Err(Error::invalid("model dimensions must all be >= 1"));
        }
        if include_embeddings && vocab_size == 0 {
            return Err(Error::invalid("include_embeddings requires vocab_size >= 1"));
        }
        let mut spec = ModelSpec {
            hidden_size,
            intermediate_size,
            num_layers,
            param_count: 0,
            vocab_size,
            include_embeddings,
        };
        spec.param_count = spec.derived_param_count();
        Ok(spec)
    }

    /// Parameters in one transformer layer: 4·h1² + 3·h1·h2.
    pub fn layer_params(&self) -> f64 {
        let h1 = self.hidden_size as f64;
        let h2 = self.intermediate_size as f64;
        4.0 * h1 * h1 + 3.0 * h1 * h2
    }

    pub fn embedding_params(&self) -> u64 {
        if self.include_embeddings {
            self.vocab_size * self.hidden_size
        } else {
            0
        }
    }

    pub fn derived_param_count(&self) -> u64 {
        let h1 = self.hidden_size;
        let h2 = self.intermediate_size;
        self.num_layers as u64 * (4 * h1 * h1 + 3 * h1 * h2) + self.embedding_params()
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.intermediate_size == 0 || self.num_layers == 0 {
            return Err(Error::invalid("model dimensions must all be >= 1"));
        }
        if self.param_count == 0 {
            return Err(Error::invalid("param_count must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqlenBucket {
    pub length: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub global_batch: u64,
    pub responses_per_prompt: u64,
    pub seq_in: u64,
    pub seq_out: u64,
    pub micro_batch_size: u64,
    /// Known sequence-length distribution of the training samples, ascending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seqlen_histogram: Option<Vec<SeqlenBucket>>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            global_batch: 1024,
            responses_per_prompt: 8,
            seq_in: 1024,
            seq_out: 1024,
            micro_batch_size: 8,
            seqlen_histogram: None,
        }
    }
}

impl BatchConfig {
    pub fn total_sequences(&self) -> u64 {
        self.global_batch * self.responses_per_prompt
    }

    pub fn total_seq_len(&self) -> u64 {
        self.seq_in + self.seq_out
    }

    fn validate(&self) -> Result<()> {
        if self.global_batch == 0 || self.responses_per_prompt == 0 || self.micro_batch_size == 0 {
            return Err(Error::invalid(
                "global_batch, responses_per_prompt and micro_batch_size must be >= 1",
            ));
        }
        if self.seq_in == 0 {
            return Err(Error::invalid("seq_in must be >= 1"));
        }
        if let Some(hist) = &self.seqlen_histogram {
            if hist.is_empty() {
                return Err(Error::invalid("seqlen_histogram must not be empty"));
            }
            if hist.windows(2).any(|w| w[0].length >= w[1].length) {
                return Err(Error::invalid("seqlen_histogram buckets must be strictly ascending"));
            }
            if hist.iter().any(|b| b.count == 0 || b.length == 0) {
                return Err(Error::invalid(
                    "seqlen_histogram buckets need positive length and count",
                ));
            }
        }
        Ok(())
    }
}

/// Micro-batches per DP replica. Every response is its own sequence, and a
/// short final micro-batch is padded to full size.
pub fn derive_num_microbatches(batch: &BatchConfig, dp_degree: u64, _kind: TaskKind) -> Result<u64> {
    if dp_degree == 0 {
        return Err(Error::invalid("dp_degree must be >= 1"));
    }
    Ok(batch.total_sequences().div_ceil(dp_degree * batch.micro_batch_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlTask {
    pub id: TaskId,
    pub kind: TaskKind,
    pub role: ModelRole,
    pub model: ModelSpec,
    pub precision_bytes: u32,
}

impl RlTask {
    pub fn name(&self) -> &'static str {
        match (self.kind, self.role) {
            (TaskKind::Generation, _) => "actor_generation",
            (TaskKind::Inference, ModelRole::Reward) => "reward_inference",
            (TaskKind::Inference, ModelRole::Reference) => "reference_inference",
            (TaskKind::Inference, ModelRole::Critic) => "critic_inference",
            (TaskKind::Inference, ModelRole::Actor) => "actor_inference",
            (TaskKind::Training, ModelRole::Critic) => "critic_training",
            (TaskKind::Training, _) => "actor_training",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowGraph {
    pub algorithm: Algorithm,
    pub mode: Mode,
    /// Sorted by id.
    pub tasks: Vec<RlTask>,
    pub dep_edges: BTreeSet<(TaskId, TaskId)>,
    pub eta: f64,
    pub batch: BatchConfig,
    pub cost_model: CostConfig,
}

pub const DEFAULT_ETA: f64 = 0.5;

const PPO_TASKS: [(TaskId, TaskKind, ModelRole); 6] = [
    (1, TaskKind::Generation, ModelRole::Actor),
    (2, TaskKind::Inference, ModelRole::Reward),
    (3, TaskKind::Inference, ModelRole::Reference),
    (4, TaskKind::Inference, ModelRole::Critic),
    (5, TaskKind::Training, ModelRole::Critic),
    (6, TaskKind::Training, ModelRole::Actor),
];

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} is outside [0, 1]")));
    }
    Ok(())
}

/// Builds the PPO or GRPO task graph. Generation feeds every inference task
/// and every inference task feeds every training task.
pub fn build_workflow(
    algorithm: Algorithm,
    mode: Mode,
    models: &BTreeMap<ModelRole, ModelSpec>,
    batch: BatchConfig,
    eta: f64,
) -> Result<WorkflowGraph> {
    check_eta(eta)?;
    batch.validate()?;
    let wanted: &[TaskId] = match algorithm {
        Algorithm::Ppo => &[1, 2, 3, 4, 5, 6],
        Algorithm::Grpo => &[1, 2, 3, 6],
        Algorithm::Custom => return Err(Error::invalid("custom workflows are built with WorkflowGraph::custom")),
    };
    let mut tasks = Vec::new();
    for &(id, kind, role) in PPO_TASKS.iter().filter(|(id, ..)| wanted.contains(id)) {
        let model = models
            .get(&role)
            .ok_or_else(|| Error::invalid(format!("missing model spec for role {role:?}")))?;
        model.validate()?;
        tasks.push(RlTask {
            id,
            kind,
            role,
            model: model.clone(),
            precision_bytes: BF16_BYTES,
        });
    }
    let mut dep_edges = BTreeSet::new();
    for a in &tasks {
        for b in &tasks {
            let edge = matches!(
                (a.kind, b.kind),
                (TaskKind::Generation, TaskKind::Inference) | (TaskKind::Inference, TaskKind::Training)
            );
            if edge {
                dep_edges.insert((a.id, b.id));
            }
        }
    }
    Ok(WorkflowGraph {
        algorithm,
        mode,
        tasks,
        dep_edges,
        eta,
        batch,
        cost_model: CostConfig::default(),
    })
}

impl WorkflowGraph {
    /// Arbitrary task set, used for small hand-built instances.
    pub fn custom(
        mode: Mode,
        mut tasks: Vec<RlTask>,
        dep_edges: BTreeSet<(TaskId, TaskId)>,
        batch: BatchConfig,
        eta: f64,
    ) -> Result<Self> {
        check_eta(eta)?;
        batch.validate()?;
        if tasks.is_empty() {
            return Err(Error::invalid("workflow needs at least one task"));
        }
        tasks.sort_by_key(|t| t.id);
        if tasks.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::invalid("duplicate task id"));
        }
        for t in &tasks {
            t.model.validate()?;
        }
        let wf = WorkflowGraph {
            algorithm: Algorithm::Custom,
            mode,
            tasks,
            dep_edges,
            eta,
            batch,
            cost_model: CostConfig::default(),
        };
        for &(a, b) in &wf.dep_edges {
            if wf.task(a).is_none() || wf.task(b).is_none() {
                return Err(Error::invalid(format!("edge ({a},{b}) names an unknown task")));
            }
        }
        wf.levels()?;
        Ok(wf)
    }

    pub fn task(&self, id: TaskId) -> Option<&RlTask> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    /// Groups tasks by longest-path depth from the sources. Errors on cycles.
    pub fn levels(&self) -> Result<Vec<Vec<TaskId>>> {
        let ids = self.task_ids();
        let mut depth: BTreeMap<TaskId, usize> = ids.iter().map(|&t| (t, 0)).collect();
        // Bellman-style relaxation; more than |T| rounds of change means a cycle.
        for round in 0..=ids.len() {
            let mut changed = false;
            for &(a, b) in &self.dep_edges {
                let next = depth[&a] + 1;
                if next > depth[&b] {
                    depth.insert(b, next);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            if round == ids.len() {
                return Err(Error::invalid("dependency edges contain a cycle"));
            }
        }
        let max = depth.values().copied().max().unwrap_or(0);
        let mut levels = vec![Vec::new(); max + 1];
        for (t, d) in depth {
            levels[d].push(t);
        }
        Ok(levels)
    }

    /// True when `dst` is reachable from `src` along dependency edges.
    pub fn reachable(&self, src: TaskId, dst: TaskId) -> bool {
        let mut stack = vec![src];
        let mut seen = BTreeSet::new();
        while let Some(t) = stack.pop() {
            for &(a, b) in &self.dep_edges {
                if a == t && seen.insert(b) {
                    if b == dst {
                        return true;
                    }
                    stack.push(b);
                }
            }
        }
        false
    }

    pub fn num_microbatches(&self, dp_degree: u64, kind: TaskKind) -> Result<u64> {
        derive_num_microbatches(&self.batch, dp_degree, kind)
    }

    pub fn actor_param_count(&self) -> Option<u64> {
        self.tasks
            .iter()
            .find(|t| t.role == ModelRole::Actor)
            .map(|t| t.model.param_count)
    }
}

// ---------------------------------------------------------------------------
// Workflow description file

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpecFile {
    pub hidden_size: u64,
    pub intermediate_size: u64,
    pub num_layers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u64>,
    #[serde(default)]
    pub include_embeddings: bool,
}

impl ModelSpecFile {
    fn into_spec(self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::with_embeddings(
            self.hidden_size,
            self.intermediate_size,
            self.num_layers,
            self.vocab_size.unwrap_or(0),
            self.include_embeddings,
        )?;
        if let Some(p) = self.param_count {
            spec.param_count = p;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkflowFile {
    pub algorithm: Algorithm,
    pub mode: Mode,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub batch: BatchConfig,
    pub models: BTreeMap<ModelRole, ModelSpecFile>,
    #[serde(default)]
    pub cost_model: CostConfig,
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

impl WorkflowFile {
    pub fn into_workflow(self) -> Result<WorkflowGraph> {
        let mut models = BTreeMap::new();
        for (role, m) in self.models {
            models.insert(role, m.into_spec()?);
        }
        let mut wf = build_workflow(self.algorithm, self.mode, &models, self.batch, self.eta)?;
        self.cost_model.validate()?;
        wf.cost_model = self.cost_model;
        Ok(wf)
    }
}

pub fn parse_workflow(json: &str) -> Result<WorkflowGraph> {
    let file: WorkflowFile = serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))?;
    file.into_workflow()
}

pub fn load_workflow(path: impl AsRef<Path>) -> Result<WorkflowGraph> {
    parse_workflow(&std::fs::read_to_string(path)?)
}
