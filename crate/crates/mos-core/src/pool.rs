//! Globally shared shard pools, frozen per-layer index matrices, and all
//! initialization rules.
//!
//! One pool pair (side A, side B) exists per linear-layer type. A pool row
//! is a shard: a contiguous 1/l fraction of an adapter vector. The first
//! `num_public` rows are shared freely across layers; the remaining
//! `num_private` rows are partitioned into contiguous per-layer blocks and
//! referenced exactly once each. Index matrices are l x r tables of pool
//! rows and never change after initialization; only pool data trains.

use serde::Serialize;

use crate::checksum::crc32;
use crate::error::{MosError, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

/// Which half of the low-rank factorization a pool feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Side {
    /// Rows of the r x h down-projection.
    A,
    /// Columns of the o x r up-projection.
    B,
}

impl Side {
    pub fn tag(self) -> u8 {
        match self {
            Side::A => 0,
            Side::B => 1,
        }
    }
}

/// Adapter construction scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Independent per-layer adapters (no sharing). Modeled as a fully
    /// privatized pool: every shard belongs to exactly one layer.
    Lora,
    /// Every layer selects the whole pool in order; updates are identical
    /// across layers.
    PureSharing,
    /// Pure sharing plus frozen per-layer scalars on each vector pair.
    RandomScaling,
    /// Each layer selects a frozen subset of r of the e*L pooled vector
    /// pairs, tied across sides.
    SubsetSelection,
    /// Full mixture of shards: independent A/B routing, l shards per
    /// vector, optional private ranks.
    Mos,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Lora => 0,
            Variant::PureSharing => 1,
            Variant::RandomScaling => 2,
            Variant::SubsetSelection => 3,
            Variant::Mos => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Variant::Lora,
            1 => Variant::PureSharing,
            2 => Variant::RandomScaling,
            3 => Variant::SubsetSelection,
            4 => Variant::Mos,
            other => return Err(MosError::Format(format!("unknown variant tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::PureSharing => "pure_sharing",
            Variant::RandomScaling => "random_scaling",
            Variant::SubsetSelection => "subset_selection",
            Variant::Mos => "mos",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = MosError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lora" => Variant::Lora,
            "pure_sharing" | "pure-sharing" => Variant::PureSharing,
            "random_scaling" | "random-scaling" => Variant::RandomScaling,
            "subset_selection" | "subset-selection" => Variant::SubsetSelection,
            "mos" => Variant::Mos,
            other => return Err(MosError::Config(format!("unknown variant {other:?}"))),
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of one linear-layer type: every one of its `num_blocks` instances
/// maps `in_dim` to `out_dim` and shares the same pool pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerTypeSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub num_blocks: usize,
}

impl LayerTypeSpec {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, num_blocks: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            num_blocks,
        }
    }
}

/// Adapter configuration shared by every layer type of a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MosConfig {
    /// Per-layer rank r: number of vector pairs composing one adapter.
    pub rank: usize,
    /// Shards per vector l: each adapter vector is a concatenation of l
    /// pool shards.
    pub shards_per_vector: usize,
    /// Private rank p: the last p rank positions of every layer are built
    /// from shards referenced by that layer alone.
    pub private_rank: usize,
    /// Equivalent rank e: pools hold l*e*L shards per side, matching the
    /// trainable-parameter count of a rank-e per-layer adapter.
    pub equivalent_rank: usize,
    pub variant: Variant,
    pub alpha: f64,
    pub dropout: f64,
    pub seed: u64,
    /// When true, side B reuses side A's index matrices (ablation of
    /// independent pair routing; implied for the tied variants).
    pub tie_pair_indices: bool,
}

impl MosConfig {
    /// Independent per-layer adapters of rank r.
    pub fn lora(rank: usize) -> Self {
        Self {
            rank,
            shards_per_vector: 1,
            private_rank: rank,
            equivalent_rank: rank,
            variant: Variant::Lora,
            alpha: 16.0,
            dropout: 0.0,
            seed: 0,
            tie_pair_indices: true,
        }
    }

    /// All e*num_blocks pooled pairs shared identically by every layer.
    pub fn pure_sharing(equivalent_rank: usize, num_blocks: usize) -> Self {
        Self {
            rank: equivalent_rank * num_blocks,
            shards_per_vector: 1,
            private_rank: 0,
            equivalent_rank,
            variant: Variant::PureSharing,
            alpha: 16.0,
            dropout: 0.0,
            seed: 0,
            tie_pair_indices: true,
        }
    }

    /// Pure sharing with frozen per-layer standard-normal scalars.
    pub fn random_scaling(equivalent_rank: usize, num_blocks: usize) -> Self {
        Self {
            variant: Variant::RandomScaling,
            ..Self::pure_sharing(equivalent_rank, num_blocks)
        }
    }

    /// Each layer keeps a frozen subset of `rank` of the e*L pooled pairs.
    pub fn subset_selection(equivalent_rank: usize, rank: usize) -> Self {
        Self {
            rank,
            shards_per_vector: 1,
            private_rank: 0,
            equivalent_rank,
            variant: Variant::SubsetSelection,
            alpha: 16.0,
            dropout: 0.0,
            seed: 0,
            tie_pair_indices: true,
        }
    }

    /// Full mixture of shards.
    pub fn mos(
        equivalent_rank: usize,
        rank: usize,
        shards_per_vector: usize,
        private_rank: usize,
    ) -> Self {
        Self {
            rank,
            shards_per_vector,
            private_rank,
            equivalent_rank,
            variant: Variant::Mos,
            alpha: 16.0,
            dropout: 0.0,
            seed: 0,
            tie_pair_indices: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn with_tied_indices(mut self, tie: bool) -> Self {
        self.tie_pair_indices = tie;
        self
    }

    pub fn alpha_over_r(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// (public, private) shard counts per side for one layer type.
    pub fn pool_shard_counts(&self, spec: &LayerTypeSpec) -> (usize, usize) {
        let l = self.shards_per_vector;
        let total = l * self.equivalent_rank * spec.num_blocks;
        let private = l * self.private_rank * spec.num_blocks;
        (total - private, private)
    }

    /// Checks the config against a layer-type shape. Everything downstream
    /// assumes these hold.
    pub fn check_against(&self, spec: &LayerTypeSpec) -> Result<()> {
        let (r, l, p, e) = (
            self.rank,
            self.shards_per_vector,
            self.private_rank,
            self.equivalent_rank,
        );
        let big_l = spec.num_blocks;
        if r < 1 || l < 1 || e < 1 || big_l < 1 || spec.in_dim < 1 || spec.out_dim < 1 {
            return Err(MosError::Config(
                "rank, shards_per_vector, equivalent_rank, and dims must be >= 1".into(),
            ));
        }
        if p > r {
            return Err(MosError::Config(format!(
                "private_rank {p} exceeds rank {r}"
            )));
        }
        if spec.in_dim % l != 0 || spec.out_dim % l != 0 {
            return Err(MosError::Config(format!(
                "dims ({}, {}) of layer type {:?} not divisible by shards_per_vector {l}",
                spec.in_dim, spec.out_dim, spec.name
            )));
        }
        if p > e {
            return Err(MosError::Budget {
                budget: (e * big_l * (spec.in_dim + spec.out_dim)) as u64,
                detail: format!("private_rank {p} exceeds equivalent rank {e}; public shard count would be negative"),
                nearest_lower: (p * big_l * (spec.in_dim + spec.out_dim)) as u64,
                nearest_upper: ((p + 1) * big_l * (spec.in_dim + spec.out_dim)) as u64,
            });
        }
        match self.variant {
            Variant::Lora => {
                if l != 1 || p != r || e != r {
                    return Err(MosError::Config(
                        "lora requires shards_per_vector = 1 and private_rank = equivalent_rank = rank".into(),
                    ));
                }
            }
            Variant::PureSharing | Variant::RandomScaling => {
                if l != 1 || p != 0 || r != e * big_l {
                    return Err(MosError::Config(format!(
                        "{} requires shards_per_vector = 1, private_rank = 0, rank = e*L = {}",
                        self.variant,
                        e * big_l
                    )));
                }
            }
            Variant::SubsetSelection => {
                if l != 1 || p != 0 || r > e * big_l {
                    return Err(MosError::Config(format!(
                        "subset_selection requires shards_per_vector = 1, private_rank = 0, rank <= e*L = {}",
                        e * big_l
                    )));
                }
            }
            Variant::Mos => {
                let (public, _) = self.pool_shard_counts(spec);
                if public < r * l {
                    return Err(MosError::Budget {
                        budget: (e * big_l * (spec.in_dim + spec.out_dim)) as u64,
                        detail: format!(
                            "public shard count {public} < r*l = {}; raise equivalent_rank or lower private_rank",
                            r * l
                        ),
                        nearest_lower: ((e.saturating_sub(1)) * big_l * (spec.in_dim + spec.out_dim)) as u64,
                        nearest_upper: ((e + 1) * big_l * (spec.in_dim + spec.out_dim)) as u64,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Trainable shard storage for one (layer type, side).
#[derive(Debug, Clone, PartialEq)]
pub struct ShardPool {
    side: Side,
    shard_len: usize,
    num_public: usize,
    num_private: usize,
    data: Matrix,
    trainable: bool,
    version: u64,
}

impl ShardPool {
    pub fn side(&self) -> Side {
        self.side
    }

    pub fn shard_len(&self) -> usize {
        self.shard_len
    }

    pub fn num_public(&self) -> usize {
        self.num_public
    }

    pub fn num_private(&self) -> usize {
        self.num_private
    }

    pub fn num_shards(&self) -> usize {
        self.num_public + self.num_private
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn shard(&self, index: usize) -> &[f64] {
        self.data.row(index)
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    /// Mutable access to the shard storage. Bumps the version so composed
    /// caches can detect staleness.
    pub fn data_mut(&mut self) -> &mut Matrix {
        self.version += 1;
        &mut self.data
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> u64 {
        (self.num_shards() * self.shard_len) as u64
    }

    /// Used by the file loader to rebuild a pool verbatim.
    pub(crate) fn from_parts(
        side: Side,
        shard_len: usize,
        num_public: usize,
        num_private: usize,
        data: Matrix,
    ) -> Result<Self> {
        if data.rows() != num_public + num_private || data.cols() != shard_len {
            return Err(MosError::Invariant(format!(
                "pool data {}x{} does not match {} shards of length {}",
                data.rows(),
                data.cols(),
                num_public + num_private,
                shard_len
            )));
        }
        Ok(Self {
            side,
            shard_len,
            num_public,
            num_private,
            data,
            trainable: true,
            version: 0,
        })
    }
}

/// Frozen l x r routing table for one (layer, side). Entry (j, i) names the
/// pool shard occupying concatenation slot j of rank i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    layer_index: usize,
    side: Side,
    shards_per_vector: usize,
    rank: usize,
    entries: Vec<u32>,
    frozen: bool,
}

impl IndexMatrix {
    pub fn new(
        layer_index: usize,
        side: Side,
        shards_per_vector: usize,
        rank: usize,
        entries: Vec<u32>,
    ) -> Result<Self> {
        if entries.len() != shards_per_vector * rank {
            return Err(MosError::Routing(format!(
                "index matrix for layer {layer_index} has {} entries, expected {}x{}",
                entries.len(),
                shards_per_vector,
                rank
            )));
        }
        Ok(Self {
            layer_index,
            side,
            shards_per_vector,
            rank,
            entries,
            frozen: true,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn shards_per_vector(&self) -> usize {
        self.shards_per_vector
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Pool row for concatenation slot `slot` of rank `rank_pos`.
    #[inline]
    pub fn entry(&self, slot: usize, rank_pos: usize) -> u32 {
        self.entries[slot * self.rank + rank_pos]
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }
}

/// Frozen per-layer differentiation values: scalars for random scaling,
/// a boolean selection mask for subset selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVector {
    pub layer_index: usize,
    pub values: ScalingValues,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalingValues {
    Scalars(Vec<f64>),
    Mask(Vec<bool>),
}

impl ScalingVector {
    pub fn scalars(&self) -> Option<&[f64]> {
        match &self.values {
            ScalingValues::Scalars(s) => Some(s),
            ScalingValues::Mask(_) => None,
        }
    }

    pub fn mask(&self) -> Option<&[bool]> {
        match &self.values {
            ScalingValues::Mask(m) => Some(m),
            ScalingValues::Scalars(_) => None,
        }
    }
}

/// Initializes the pool pair for one layer type: side A uniform in
/// [-sqrt(3/h), +sqrt(3/h)] over the full input dimension so reconstructed
/// rows match the variance of a plain Kaiming-uniform rank-r adapter, side
/// B all zeros so every composed update starts at exactly zero.
pub fn init_pools(
    spec: &LayerTypeSpec,
    cfg: &MosConfig,
    rng: &mut SeededRng,
) -> Result<(ShardPool, ShardPool)> {
    cfg.check_against(spec)?;
    let l = cfg.shards_per_vector;
    let (num_public, num_private) = cfg.pool_shard_counts(spec);
    let num_shards = num_public + num_private;

    let shard_len_a = spec.in_dim / l;
    let bound = (3.0 / spec.in_dim as f64).sqrt();
    let data_a = Matrix::from_vec(
        num_shards,
        shard_len_a,
        rng.sample_uniform(num_shards * shard_len_a, bound),
    )?;
    let pool_a = ShardPool {
        side: Side::A,
        shard_len: shard_len_a,
        num_public,
        num_private,
        data: data_a,
        trainable: true,
        version: 0,
    };

    let shard_len_b = spec.out_dim / l;
    let pool_b = ShardPool {
        side: Side::B,
        shard_len: shard_len_b,
        num_public,
        num_private,
        data: Matrix::zeros(num_shards, shard_len_b),
        trainable: true,
        version: 0,
    };
    Ok((pool_a, pool_b))
}

/// Initializes the 2L frozen index matrices for one layer type, ordered
/// layer-major with side A before side B, plus the per-layer scaling
/// vectors the variant calls for.
///
/// Public entries are drawn uniformly with replacement; private shards are
/// assigned by contiguous per-layer blocks to the last `private_rank` rank
/// positions, each shard referenced exactly once model-wide.
pub fn init_routing(
    spec: &LayerTypeSpec,
    cfg: &MosConfig,
    rng: &mut SeededRng,
) -> Result<(Vec<IndexMatrix>, Option<Vec<ScalingVector>>)> {
    cfg.check_against(spec)?;
    let (r, l, p) = (cfg.rank, cfg.shards_per_vector, cfg.private_rank);
    let (num_public, num_private) = cfg.pool_shard_counts(spec);
    if num_private != p * l * spec.num_blocks {
        return Err(MosError::Config(format!(
            "private capacity {num_private} does not match p*l*L = {}",
            p * l * spec.num_blocks
        )));
    }
    let pool_rank = cfg.equivalent_rank * spec.num_blocks;

    let mut indices = Vec::with_capacity(2 * spec.num_blocks);
    let mut scalings: Vec<ScalingVector> = Vec::new();

    for k in 0..spec.num_blocks {
        let (entries_a, entries_b) = match cfg.variant {
            Variant::PureSharing | Variant::RandomScaling => {
                let identity: Vec<u32> = (0..r as u32).collect();
                (identity.clone(), identity)
            }
            Variant::SubsetSelection => {
                let mask_positions = rng.sample_distinct_sorted(pool_rank, r);
                let mut mask = vec![false; pool_rank];
                for &pos in &mask_positions {
                    mask[pos] = true;
                }
                scalings.push(ScalingVector {
                    layer_index: k,
                    values: ScalingValues::Mask(mask),
                });
                let selected: Vec<u32> = mask_positions.iter().map(|&i| i as u32).collect();
                (selected.clone(), selected)
            }
            Variant::Lora | Variant::Mos => {
                let a = sample_routed_entries(r, l, p, num_public, k, rng);
                let b = if cfg.tie_pair_indices {
                    a.clone()
                } else {
                    sample_routed_entries(r, l, p, num_public, k, rng)
                };
                (a, b)
            }
        };
        if cfg.variant == Variant::RandomScaling {
            scalings.push(ScalingVector {
                layer_index: k,
                values: ScalingValues::Scalars(rng.sample_normal(r)),
            });
        }
        indices.push(IndexMatrix::new(k, Side::A, l, r, entries_a)?);
        indices.push(IndexMatrix::new(k, Side::B, l, r, entries_b)?);
    }

    let scalings = match cfg.variant {
        Variant::RandomScaling | Variant::SubsetSelection => Some(scalings),
        _ => None,
    };
    Ok((indices, scalings))
}

/// Spec-facing wrapper returning only the 2L index matrices.
pub fn init_index_matrices(
    spec: &LayerTypeSpec,
    cfg: &MosConfig,
    rng: &mut SeededRng,
) -> Result<Vec<IndexMatrix>> {
    init_routing(spec, cfg, rng).map(|(indices, _)| indices)
}

/// One layer's l x r entries: uniform public draws for the first r-p rank
/// columns, the layer's reserved private block for the last p.
fn sample_routed_entries(
    r: usize,
    l: usize,
    p: usize,
    num_public: usize,
    layer: usize,
    rng: &mut SeededRng,
) -> Vec<u32> {
    let mut entries = vec![0u32; l * r];
    for i in 0..r - p {
        for j in 0..l {
            entries[j * r + i] = rng.index(num_public) as u32;
        }
    }
    for q in 0..p {
        for j in 0..l {
            let shard = num_public + layer * p * l + q * l + j;
            entries[j * r + (r - p + q)] = shard as u32;
        }
    }
    entries
}

/// Pools, index matrices, and scaling vectors for one layer type.
#[derive(Debug, Clone)]
pub struct LayerTypeState {
    pub spec: LayerTypeSpec,
    pub pool_a: ShardPool,
    pub pool_b: ShardPool,
    /// 2L matrices, layer-major, side A before side B.
    pub indices: Vec<IndexMatrix>,
    pub scalings: Option<Vec<ScalingVector>>,
}

impl LayerTypeState {
    pub fn init(spec: LayerTypeSpec, cfg: &MosConfig, rng: &mut SeededRng) -> Result<Self> {
        let (pool_a, pool_b) = init_pools(&spec, cfg, rng)?;
        let (indices, scalings) = init_routing(&spec, cfg, rng)?;
        Ok(Self {
            spec,
            pool_a,
            pool_b,
            indices,
            scalings,
        })
    }

    pub fn index_for(&self, layer: usize, side: Side) -> &IndexMatrix {
        &self.indices[2 * layer + side.tag() as usize]
    }

    pub fn scaling_for(&self, layer: usize) -> Option<&ScalingVector> {
        self.scalings.as_ref().map(|s| &s[layer])
    }

    pub fn pool(&self, side: Side) -> &ShardPool {
        match side {
            Side::A => &self.pool_a,
            Side::B => &self.pool_b,
        }
    }

    pub fn trainable_params(&self) -> u64 {
        self.pool_a.param_count() + self.pool_b.param_count()
    }
}

/// Complete adapter state for a model: one config plus one
/// `LayerTypeState` per linear-layer type.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: MosConfig,
    pub types: Vec<LayerTypeState>,
}

impl ModelState {
    /// Initializes every layer type from the config seed. Each type draws
    /// from its own derived streams so types do not perturb each other.
    pub fn init(specs: Vec<LayerTypeSpec>, cfg: MosConfig) -> Result<Self> {
        let mut types = Vec::with_capacity(specs.len());
        for (t, spec) in specs.into_iter().enumerate() {
            let mut rng = SeededRng::derive(cfg.seed, t as u64);
            types.push(LayerTypeState::init(spec, &cfg, &mut rng)?);
        }
        Ok(Self { cfg, types })
    }

    pub fn trainable_params(&self) -> u64 {
        self.types.iter().map(|t| t.trainable_params()).sum()
    }

    /// Overwrites both pools with `scale`-scaled normal noise. Composed
    /// updates are zero at a fresh init (side B is zero), so tests and
    /// demos that need a nonzero state without training go through here.
    pub fn randomize_pools(&mut self, rng: &mut SeededRng, scale: f64) {
        for ty in &mut self.types {
            for pool in [&mut ty.pool_a, &mut ty.pool_b] {
                let data = pool.data_mut();
                let n = data.rows() * data.cols();
                let noise = rng.sample_normal(n);
                for (d, v) in data.data_mut().iter_mut().zip(noise) {
                    *d = scale * v;
                }
            }
        }
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    /// CRC over the frozen structure (index entries, masks, scalars).
    /// Training must leave this untouched.
    pub fn structure_hash(&self) -> u32 {
        let mut bytes = Vec::new();
        for ty in &self.types {
            for im in &ty.indices {
                bytes.extend_from_slice(&(im.layer_index() as u32).to_le_bytes());
                bytes.push(im.side().tag());
                for &e in im.entries() {
                    bytes.extend_from_slice(&e.to_le_bytes());
                }
            }
            if let Some(scalings) = &ty.scalings {
                for sv in scalings {
                    match &sv.values {
                        ScalingValues::Scalars(s) => {
                            for v in s {
                                bytes.extend_from_slice(&v.to_le_bytes());
                            }
                        }
                        ScalingValues::Mask(m) => {
                            bytes.extend(m.iter().map(|&b| b as u8));
                        }
                    }
                }
            }
        }
        crc32(&bytes)
    }
}

/// One named invariant check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Structured pass/fail list over every structural invariant.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Checks every structural invariant of a state: config coherence, pool
/// shapes and finiteness, index ranges, private-shard exclusivity, scaling
/// constraints, and the budget identity. Failures are reported, never
/// repaired.
pub fn validate(state: &ModelState) -> ValidationReport {
    let mut report = ValidationReport { checks: Vec::new() };
    let cfg = &state.cfg;

    for ty in &state.types {
        let name = &ty.spec.name;
        let l = cfg.shards_per_vector;

        match cfg.check_against(&ty.spec) {
            Ok(()) => report.push(format!("{name}/config"), true, "config coherent"),
            Err(e) => report.push(format!("{name}/config"), false, e.to_string()),
        }

        let (want_public, want_private) = cfg.pool_shard_counts(&ty.spec);
        for (pool, dim, side_name) in [
            (&ty.pool_a, ty.spec.in_dim, "A"),
            (&ty.pool_b, ty.spec.out_dim, "B"),
        ] {
            let shape_ok = pool.data.rows() == pool.num_shards()
                && pool.data.cols() == pool.shard_len
                && pool.shard_len * l == dim
                && pool.num_public == want_public
                && pool.num_private == want_private;
            report.push(
                format!("{name}/pool-{side_name}-shape"),
                shape_ok,
                format!(
                    "{} shards ({} public, {} private) of length {}",
                    pool.num_shards(),
                    pool.num_public,
                    pool.num_private,
                    pool.shard_len
                ),
            );
            report.push(
                format!("{name}/pool-{side_name}-finite"),
                pool.data.all_finite(),
                "all entries finite",
            );
        }

        let index_count_ok = ty.indices.len() == 2 * ty.spec.num_blocks;
        report.push(
            format!("{name}/index-count"),
            index_count_ok,
            format!("{} index matrices", ty.indices.len()),
        );

        let mut range_ok = true;
        let mut shape_ok = true;
        let mut frozen_ok = true;
        let mut private_counts = [
            vec![0usize; ty.pool_a.num_private],
            vec![0usize; ty.pool_b.num_private],
        ];
        for im in &ty.indices {
            let pool = ty.pool(im.side());
            shape_ok &= im.shards_per_vector() == l && im.rank() == cfg.rank;
            frozen_ok &= im.frozen();
            for &e in im.entries() {
                let e = e as usize;
                if e >= pool.num_shards() {
                    range_ok = false;
                } else if e >= pool.num_public {
                    private_counts[im.side().tag() as usize][e - pool.num_public] += 1;
                }
            }
        }
        report.push(
            format!("{name}/index-shape"),
            shape_ok,
            format!("every index matrix is {}x{}", l, cfg.rank),
        );
        report.push(
            format!("{name}/index-range"),
            range_ok,
            "every entry within its pool",
        );
        report.push(format!("{name}/index-frozen"), frozen_ok, "all frozen");

        let exclusivity_ok = private_counts
            .iter()
            .all(|counts| counts.iter().all(|&c| c == 1));
        report.push(
            format!("{name}/private-exclusive"),
            exclusivity_ok,
            "each private shard referenced exactly once",
        );

        let scaling_ok = match (cfg.variant, &ty.scalings) {
            (Variant::RandomScaling, Some(s)) => {
                s.len() == ty.spec.num_blocks
                    && s.iter().enumerate().all(|(k, sv)| {
                        sv.layer_index == k
                            && sv
                                .scalars()
                                .map(|v| v.len() == cfg.rank && v.iter().all(|x| x.is_finite()))
                                .unwrap_or(false)
                    })
            }
            (Variant::SubsetSelection, Some(s)) => {
                let pool_rank = cfg.equivalent_rank * ty.spec.num_blocks;
                s.len() == ty.spec.num_blocks
                    && s.iter().enumerate().all(|(k, sv)| {
                        sv.layer_index == k
                            && sv
                                .mask()
                                .map(|m| {
                                    m.len() == pool_rank
                                        && m.iter().filter(|&&b| b).count() == cfg.rank
                                })
                                .unwrap_or(false)
                    })
            }
            (Variant::RandomScaling | Variant::SubsetSelection, None) => false,
            (_, None) => true,
            (_, Some(_)) => false,
        };
        report.push(
            format!("{name}/scaling"),
            scaling_ok,
            "scaling vectors match the variant",
        );

        let params = ty.trainable_params();
        let expect = (cfg.equivalent_rank * ty.spec.num_blocks * (ty.spec.in_dim + ty.spec.out_dim))
            as u64;
        report.push(
            format!("{name}/budget-identity"),
            params == expect,
            format!("trainable params {params}, canonical e*L*(h+o) = {expect}"),
        );
    }
    report
}
