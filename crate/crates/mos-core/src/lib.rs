//! Desk-scale laboratory for mixture-of-shards (MoS) low-rank adapters.
//!
//! Adapters are not stored per layer. Instead, every (layer type, side)
//! owns a globally shared pool of trainable shards, and each layer carries
//! a frozen index matrix that routes `l` shards per rank into its low-rank
//! matrices. The crate covers the full loop at toy scale: pool and index
//! initialization, adapter composition, exact scatter-accumulated pool
//! gradients with a finite-difference oracle, budget and combinational
//! diversity accounting, a seeded training harness for variant ablations,
//! a multi-tenant serving simulator, and a binary adapter file format.

pub mod adapter_file;
pub mod budget;
pub mod checksum;
pub mod composer;
pub mod diversity;
pub mod error;
pub mod gradient;
pub mod matrix;
pub mod pool;
pub mod rng;
pub mod serving;
pub mod trainer;

pub use error::{MosError, Result};
pub use matrix::{matmul, outer, Matrix};
pub use pool::{
    IndexMatrix, LayerTypeSpec, LayerTypeState, ModelState, MosConfig, ScalingVector, ShardPool,
    Side, Variant,
};
pub use rng::SeededRng;
