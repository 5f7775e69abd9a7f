//! Scheduling planner for RL post-training workflows on heterogeneous GPU
//! pools: workflow and hardware models, an analytic cost model, and a
//! multi-level plan search with load balancing.

pub mod balance;
pub mod cost;
pub mod error;
pub mod plan;
pub mod report;
pub mod search;
pub mod topology;
pub mod workflow;

pub use cost::{end_to_end_cost, CostBreakdown, CostConfig, CostModel, TaskCost};
pub use error::{Error, Result};
pub use plan::{check_memory, parse_plan, serialize_plan, ParallelLayout, Plan, PlanFile};
pub use search::{exhaustive_search, nested_sha_search, SearchKnobs, SearchOutcome, SearchState};
pub use topology::{generate_scenario, load_topology, parse_topology, DeviceTopology};
pub use workflow::{build_workflow, load_workflow, parse_workflow, WorkflowGraph};
