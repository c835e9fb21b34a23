//! Trainable-parameter accounting: plain per-layer adapters versus shared
//! pools, equivalent-rank solving, and multi-tenant serving memory.

use serde::Serialize;

use crate::error::{MosError, Result};
use crate::pool::LayerTypeSpec;

/// Model dimensions relevant to adapter budgets: one entry per adapted
/// linear-layer type.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetSpec {
    pub layer_types: Vec<LayerTypeSpec>,
}

impl BudgetSpec {
    pub fn new(layer_types: Vec<LayerTypeSpec>) -> Self {
        Self { layer_types }
    }

    /// 7B-class decoder dims: query/key/value/output 4096 -> 4096,
    /// up/gate 4096 -> 11008, down 11008 -> 4096, 32 blocks.
    pub fn llama2_7b() -> Self {
        let mut layer_types = Vec::new();
        for name in ["query", "key", "value", "output"] {
            layer_types.push(LayerTypeSpec::new(name, 4096, 4096, 32));
        }
        for name in ["up", "gate"] {
            layer_types.push(LayerTypeSpec::new(name, 4096, 11008, 32));
        }
        layer_types.push(LayerTypeSpec::new("down", 11008, 4096, 32));
        Self { layer_types }
    }

    /// 70B-class attention projections only: query/key/value/output
    /// 8192 -> 8192, 80 blocks.
    pub fn llama2_70b_attention() -> Self {
        let layer_types = ["query", "key", "value", "output"]
            .into_iter()
            .map(|name| LayerTypeSpec::new(name, 8192, 8192, 80))
            .collect();
        Self { layer_types }
    }

    /// Sum over layer types of L * (h + o): the parameter count per unit of
    /// rank.
    pub fn params_per_rank(&self) -> u64 {
        self.layer_types
            .iter()
            .map(|t| (t.num_blocks * (t.in_dim + t.out_dim)) as u64)
            .sum()
    }
}

/// Trainable parameters of plain rank-r adapters on every layer:
/// sum over layer types of L * r * (h + o).
pub fn lora_param_count(spec: &BudgetSpec, rank: usize) -> u64 {
    rank as u64 * spec.params_per_rank()
}

/// Result of resolving a parameter budget into pool sizings.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalentRank {
    /// Rank whose plain per-layer adapters cost exactly the budget.
    pub e: u64,
    /// Achievable pool rank e*L per layer type.
    pub pool_ranks: Vec<PoolRank>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoolRank {
    pub layer_type: String,
    pub pool_rank: u64,
}

/// Solves budget = e * sum_t L_t (h_t + o_t) for an integral e and reports
/// the pool rank e*L each layer type gains. Non-integral budgets are
/// rejected with the nearest feasible ones.
pub fn solve_equivalent_rank(spec: &BudgetSpec, budget: u64) -> Result<EquivalentRank> {
    let per_rank = spec.params_per_rank();
    if per_rank == 0 {
        return Err(MosError::Config("budget spec has no layer types".into()));
    }
    if budget == 0 || budget % per_rank != 0 {
        let lower = (budget / per_rank) * per_rank;
        return Err(MosError::Budget {
            budget,
            detail: format!("not an integral multiple of params-per-rank {per_rank}"),
            nearest_lower: lower,
            nearest_upper: lower + per_rank,
        });
    }
    let e = budget / per_rank;
    let pool_ranks = spec
        .layer_types
        .iter()
        .map(|t| PoolRank {
            layer_type: t.name.clone(),
            pool_rank: e * t.num_blocks as u64,
        })
        .collect();
    Ok(EquivalentRank { e, pool_ranks })
}

/// Total adapter bytes when `num_tenants` tenants each hold a plain rank-r
/// adapter set: tenants * params * bytes_per_param.
pub fn serving_memory(
    spec: &BudgetSpec,
    rank: usize,
    num_tenants: u64,
    bytes_per_param: u64,
) -> u64 {
    num_tenants * lora_param_count(spec, rank) * bytes_per_param
}
