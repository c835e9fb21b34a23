//! Multi-tenant serving simulator: adapter registry with exact memory
//! accounting, hot swap of composed adapters, and a precompute pipeline
//! with version-based invalidation.
//!
//! The simulator models memory and composition only. Base weights are
//! loaded once and never move; what a swap transfers is one tenant's
//! adapter bytes. Tenants can be accounting-only descriptors (any scale)
//! or live desk-scale states that actually compose and serve forwards.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::budget::{lora_param_count, BudgetSpec};
use crate::composer::{precompose_all, ComposedAdapter};
use crate::error::{MosError, Result};
use crate::pool::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TenantState {
    /// Adapter bytes resident, nothing materialized.
    Registered,
    /// Low-rank matrices gathered and ready to serve.
    Composed,
    /// Folded into base weights; serving needs no extra matmul.
    Merged,
}

/// Accounting-only description of a tenant's adapter set.
#[derive(Debug, Clone, Serialize)]
pub struct AdapterDescriptor {
    pub method: String,
    pub params: u64,
    pub label: String,
}

impl AdapterDescriptor {
    /// Plain rank-r adapters on every layer of `spec`.
    pub fn lora(spec: &BudgetSpec, rank: usize) -> Self {
        Self {
            method: "lora".into(),
            params: lora_param_count(spec, rank),
            label: format!("lora r={rank}"),
        }
    }

    /// Pool-shared adapters sized to a parameter budget; pools cost
    /// exactly the budget.
    pub fn mos_with_budget(budget: u64) -> Self {
        Self {
            method: "mos".into(),
            params: budget,
            label: format!("mos budget={budget}"),
        }
    }
}

/// A tenant's adapter: either a descriptor or a live composable state.
#[derive(Debug, Clone)]
pub enum AdapterHandle {
    Descriptor(AdapterDescriptor),
    Live(Box<ModelState>),
}

impl AdapterHandle {
    pub fn params(&self) -> u64 {
        match self {
            AdapterHandle::Descriptor(d) => d.params,
            AdapterHandle::Live(state) => state.trainable_params(),
        }
    }

    pub fn method(&self) -> &str {
        match self {
            AdapterHandle::Descriptor(d) => &d.method,
            AdapterHandle::Live(state) => state.cfg.variant.name(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TenantRecord {
    pub tenant_id: String,
    pub handle: AdapterHandle,
    pub state: TenantState,
    pub memory_bytes: u64,
    /// Composed matrices per layer type, present while state is Composed.
    pub composed: Option<Vec<Vec<ComposedAdapter>>>,
}

/// What a swap moved.
#[derive(Debug, Clone, Serialize)]
pub struct SwapEvent {
    pub out_id: String,
    pub in_id: String,
    pub bytes_moved: u64,
}

/// Tenant registry with exact adapter-byte accounting. The cached total
/// always equals the sum over tenants, re-checked after every mutation.
#[derive(Debug)]
pub struct Registry {
    tenants: BTreeMap<String, TenantRecord>,
    precision_bytes: u64,
    total_memory: u64,
}

impl Registry {
    pub fn new(precision_bytes: u64) -> Self {
        Self {
            tenants: BTreeMap::new(),
            precision_bytes,
            total_memory: 0,
        }
    }

    pub fn precision_bytes(&self) -> u64 {
        self.precision_bytes
    }

    pub fn len(&self) -> usize {
        self.tenants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tenants.is_empty()
    }

    pub fn total_memory(&self) -> u64 {
        self.total_memory
    }

    /// Ground-truth total, recomputed from scratch.
    pub fn recompute_total(&self) -> u64 {
        self.tenants.values().map(|t| t.memory_bytes).sum()
    }

    pub fn tenant(&self, id: &str) -> Option<&TenantRecord> {
        self.tenants.get(id)
    }

    /// Mutable access to a live tenant's state (training between serves).
    /// Pool writes bump versions, invalidating composed caches.
    pub fn live_state_mut(&mut self, id: &str) -> Result<&mut ModelState> {
        match self.tenants.get_mut(id) {
            Some(TenantRecord {
                handle: AdapterHandle::Live(state),
                ..
            }) => Ok(state),
            Some(_) => Err(MosError::Config(format!(
                "tenant {id:?} is descriptor-only"
            ))),
            None => Err(MosError::UnknownTenant(id.into())),
        }
    }

    pub fn register(&mut self, tenant_id: &str, handle: AdapterHandle) -> Result<&TenantRecord> {
        if self.tenants.contains_key(tenant_id) {
            return Err(MosError::DuplicateTenant(tenant_id.into()));
        }
        let memory_bytes = handle.params() * self.precision_bytes;
        self.tenants.insert(
            tenant_id.to_string(),
            TenantRecord {
                tenant_id: tenant_id.to_string(),
                handle,
                state: TenantState::Registered,
                memory_bytes,
                composed: None,
            },
        );
        self.total_memory += memory_bytes;
        debug_assert_eq!(self.total_memory, self.recompute_total());
        Ok(&self.tenants[tenant_id])
    }

    /// Releases `out_id`'s composed matrices and composes `in_id`. Base
    /// weights are untouched; the bytes moved are the incoming tenant's
    /// adapter bytes. Swapping a tenant with itself is a no-op.
    pub fn swap(&mut self, out_id: &str, in_id: &str) -> Result<SwapEvent> {
        if !self.tenants.contains_key(out_id) {
            return Err(MosError::UnknownTenant(out_id.into()));
        }
        if !self.tenants.contains_key(in_id) {
            return Err(MosError::UnknownTenant(in_id.into()));
        }
        if out_id == in_id {
            return Ok(SwapEvent {
                out_id: out_id.into(),
                in_id: in_id.into(),
                bytes_moved: 0,
            });
        }

        {
            let out = self.tenants.get_mut(out_id).unwrap();
            out.composed = None;
            out.state = TenantState::Registered;
        }
        let composed = {
            let record = self.tenants.get(in_id).unwrap();
            match &record.handle {
                AdapterHandle::Live(state) => Some(compose_state(state)?),
                AdapterHandle::Descriptor(_) => None,
            }
        };
        let incoming = self.tenants.get_mut(in_id).unwrap();
        incoming.composed = composed;
        incoming.state = TenantState::Composed;
        let bytes_moved = incoming.memory_bytes;

        debug_assert_eq!(self.total_memory, self.recompute_total());
        Ok(SwapEvent {
            out_id: out_id.into(),
            in_id: in_id.into(),
            bytes_moved,
        })
    }

    /// Marks a composed tenant as merged into base weights. Accounting is
    /// unchanged: the folded update occupies the base matrix.
    pub fn mark_merged(&mut self, id: &str) -> Result<()> {
        let record = self
            .tenants
            .get_mut(id)
            .ok_or_else(|| MosError::UnknownTenant(id.into()))?;
        if record.state != TenantState::Composed {
            return Err(MosError::Config(format!(
                "tenant {id:?} must be composed before merging"
            )));
        }
        record.state = TenantState::Merged;
        Ok(())
    }
}

/// All layer types of a live state, precomposed in parallel.
fn compose_state(state: &ModelState) -> Result<Vec<Vec<ComposedAdapter>>> {
    state
        .types
        .iter()
        .map(|ty| precompose_all(ty, &state.cfg))
        .collect()
}

/// Composed adapters for one tenant plus the pool versions they were
/// gathered at.
#[derive(Debug, Clone)]
pub struct CachedTenant {
    pub adapters: Vec<Vec<ComposedAdapter>>,
    pool_versions: Vec<(u64, u64)>,
}

/// Version-checked cache of composed adapters, keyed by tenant.
#[derive(Debug, Default)]
pub struct ComposedCache {
    entries: BTreeMap<String, CachedTenant>,
}

impl ComposedCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serves a cache entry only when the tenant's pool versions still
    /// match; a stale entry is an error so callers recompose explicitly.
    pub fn get(&self, registry: &Registry, tenant_id: &str) -> Result<&CachedTenant> {
        let entry = self.entries.get(tenant_id).ok_or_else(|| {
            MosError::StaleCache {
                key: tenant_id.into(),
                cached: 0,
                current: 0,
            }
        })?;
        let record = registry
            .tenant(tenant_id)
            .ok_or_else(|| MosError::UnknownTenant(tenant_id.into()))?;
        if let AdapterHandle::Live(state) = &record.handle {
            for (ty, cached) in state.types.iter().zip(&entry.pool_versions) {
                let current = (ty.pool_a.version(), ty.pool_b.version());
                if current != *cached {
                    return Err(MosError::StaleCache {
                        key: tenant_id.into(),
                        cached: cached.0.max(cached.1),
                        current: current.0.max(current.1),
                    });
                }
            }
        }
        Ok(entry)
    }

    /// Recomposes one tenant's entry from its current pools.
    pub fn refresh(&mut self, registry: &Registry, tenant_id: &str) -> Result<()> {
        let entry = build_entry(registry, tenant_id)?;
        self.entries.insert(tenant_id.to_string(), entry);
        Ok(())
    }
}

fn build_entry(registry: &Registry, tenant_id: &str) -> Result<CachedTenant> {
    let record = registry
        .tenant(tenant_id)
        .ok_or_else(|| MosError::UnknownTenant(tenant_id.into()))?;
    let state = match &record.handle {
        AdapterHandle::Live(state) => state,
        AdapterHandle::Descriptor(_) => {
            return Err(MosError::Config(format!(
                "tenant {tenant_id:?} is descriptor-only and cannot compose"
            )))
        }
    };
    let adapters = compose_state(state)?;
    let pool_versions = state
        .types
        .iter()
        .map(|ty| (ty.pool_a.version(), ty.pool_b.version()))
        .collect();
    Ok(CachedTenant {
        adapters,
        pool_versions,
    })
}

/// Composes the given tenants ahead of any request. Workers run in
/// parallel and read-only; results are identical to sequential
/// composition.
pub fn precompute_pipeline(registry: &Registry, ids: &[String]) -> Result<ComposedCache> {
    let entries: Result<Vec<(String, CachedTenant)>> = ids
        .par_iter()
        .map(|id| build_entry(registry, id).map(|e| (id.clone(), e)))
        .collect();
    let mut cache = ComposedCache::default();
    for (id, entry) in entries? {
        cache.entries.insert(id, entry);
    }
    Ok(cache)
}

/// Memory arithmetic for a fleet of same-config tenants, with the
/// assumptions spelled out.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub method: String,
    pub num_tenants: u64,
    pub per_tenant_params: u64,
    pub per_tenant_bytes: u64,
    pub total_bytes: u64,
    pub total_terabytes: f64,
    pub precision_bytes: u64,
    pub assumptions: Vec<String>,
}

pub fn memory_report(
    descriptor: &AdapterDescriptor,
    num_tenants: u64,
    precision_bytes: u64,
    dims_label: &str,
) -> MemoryReport {
    let per_tenant_bytes = descriptor.params * precision_bytes;
    let total_bytes = per_tenant_bytes * num_tenants;
    MemoryReport {
        method: descriptor.method.clone(),
        num_tenants,
        per_tenant_params: descriptor.params,
        per_tenant_bytes,
        total_bytes,
        total_terabytes: total_bytes as f64 / 1e12,
        precision_bytes,
        assumptions: vec![
            format!("dims: {dims_label}"),
            format!("precision: {precision_bytes} bytes/param"),
            "adapter parameters only; base weights and optimizer state excluded".into(),
            "terabytes are decimal (1e12 bytes)".into(),
        ],
    }
}
