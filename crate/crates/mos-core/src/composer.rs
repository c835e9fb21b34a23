//! Materializes per-layer low-rank matrices from pools and index matrices:
//! row/column gathers with concatenation, forward passes, merged weights,
//! and precompute-ahead composition for serving.
//!
//! Composition is a pure gather: it never mutates pools, so adapters for
//! all layers can be prepared concurrently and ahead of any activation.

use rayon::prelude::*;

use crate::error::{MosError, Result};
use crate::matrix::{matmul, Matrix};
use crate::pool::{LayerTypeState, MosConfig, ScalingVector, Side, Variant};
use crate::rng::SeededRng;

/// Materialized low-rank pair for one layer, plus the pool versions it was
/// gathered from so caches can detect staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedAdapter {
    pub layer_index: usize,
    /// r x h; row i is the concatenation of the l side-A shards named by
    /// index column i.
    pub a: Matrix,
    /// o x r; column i is the concatenation of the l side-B shards named by
    /// index column i.
    pub b: Matrix,
    pub alpha_over_r: f64,
    pub variant: Variant,
    /// (side A pool version, side B pool version) at composition time.
    pub pool_versions: (u64, u64),
}

impl ComposedAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// True when the pools have been written since this adapter was built.
    pub fn is_stale(&self, ty: &LayerTypeState) -> bool {
        self.pool_versions != (ty.pool_a.version(), ty.pool_b.version())
    }
}

/// Gathers the raw (unscaled) low-rank pair for layer `k`.
pub fn compose(ty: &LayerTypeState, k: usize, cfg: &MosConfig) -> Result<ComposedAdapter> {
    if k >= ty.spec.num_blocks {
        return Err(MosError::Routing(format!(
            "layer {k} out of range for {} blocks",
            ty.spec.num_blocks
        )));
    }
    let r = cfg.rank;
    let l = cfg.shards_per_vector;
    let im_a = ty.index_for(k, Side::A);
    let im_b = ty.index_for(k, Side::B);

    let slen_a = ty.pool_a.shard_len();
    let mut a = Matrix::zeros(r, ty.spec.in_dim);
    for i in 0..r {
        let row = a.row_mut(i);
        for j in 0..l {
            let idx = im_a.entry(j, i) as usize;
            if idx >= ty.pool_a.num_shards() {
                return Err(MosError::Routing(format!(
                    "layer {k} side A references shard {idx} of {}",
                    ty.pool_a.num_shards()
                )));
            }
            row[j * slen_a..(j + 1) * slen_a].copy_from_slice(ty.pool_a.shard(idx));
        }
    }

    let slen_b = ty.pool_b.shard_len();
    let mut b = Matrix::zeros(ty.spec.out_dim, r);
    for i in 0..r {
        for j in 0..l {
            let idx = im_b.entry(j, i) as usize;
            if idx >= ty.pool_b.num_shards() {
                return Err(MosError::Routing(format!(
                    "layer {k} side B references shard {idx} of {}",
                    ty.pool_b.num_shards()
                )));
            }
            let shard = ty.pool_b.shard(idx);
            for (t, &v) in shard.iter().enumerate() {
                b.set(j * slen_b + t, i, v);
            }
        }
    }

    Ok(ComposedAdapter {
        layer_index: k,
        a,
        b,
        alpha_over_r: cfg.alpha_over_r(),
        variant: cfg.variant,
        pool_versions: (ty.pool_a.version(), ty.pool_b.version()),
    })
}

/// Scales row i of the gathered A by the frozen scalar s_i, equivalent to
/// scaling the i-th outer-product term. The result is the effective adapter
/// of the random-scaling variant and no longer satisfies the raw-gather
/// row invariant.
pub fn apply_random_scaling(
    adapter: &ComposedAdapter,
    scaling: &ScalingVector,
) -> Result<ComposedAdapter> {
    let scalars = scaling.scalars().ok_or_else(|| {
        MosError::Config("apply_random_scaling needs a scalar scaling vector".into())
    })?;
    if scalars.len() != adapter.rank() {
        return Err(MosError::Shape(format!(
            "scaling vector length {} != rank {}",
            scalars.len(),
            adapter.rank()
        )));
    }
    let mut scaled = adapter.clone();
    for (i, &s) in scalars.iter().enumerate() {
        for v in scaled.a.row_mut(i) {
            *v *= s;
        }
    }
    Ok(scaled)
}

/// Raw gather plus whatever per-layer scaling the variant prescribes; the
/// adapter actually used for forward, merge, and serving.
pub fn compose_effective(ty: &LayerTypeState, k: usize, cfg: &MosConfig) -> Result<ComposedAdapter> {
    let adapter = compose(ty, k, cfg)?;
    match (cfg.variant, ty.scaling_for(k)) {
        (Variant::RandomScaling, Some(sv)) => apply_random_scaling(&adapter, sv),
        (Variant::RandomScaling, None) => Err(MosError::Config(
            "random_scaling state is missing its scaling vectors".into(),
        )),
        _ => Ok(adapter),
    }
}

/// Merged weight update (alpha/r) * B * A, shape o x h.
pub fn delta_w(adapter: &ComposedAdapter) -> Result<Matrix> {
    Ok(matmul(&adapter.b, &adapter.a)?.scale(adapter.alpha_over_r))
}

/// Inference forward: W0 x + (alpha/r) * B (A x).
pub fn forward(adapter: &ComposedAdapter, w0: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if w0.rows() != adapter.out_dim() || w0.cols() != adapter.in_dim() {
        return Err(MosError::Shape(format!(
            "W0 is {}x{}, adapter expects {}x{}",
            w0.rows(),
            w0.cols(),
            adapter.out_dim(),
            adapter.in_dim()
        )));
    }
    let mut y = w0.matvec(x)?;
    let u = adapter.a.matvec(x)?;
    let bu = adapter.b.matvec(&u)?;
    for (yi, bi) in y.iter_mut().zip(&bu) {
        *yi += adapter.alpha_over_r * bi;
    }
    Ok(y)
}

/// Per-entry keep scales of an inverted-dropout draw: 0 for dropped
/// entries, 1/(1-rate) for kept ones. Replayed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn sample(len: usize, rate: f64, rng: &mut SeededRng) -> Self {
        if rate <= 0.0 {
            return Self(vec![1.0; len]);
        }
        let keep = 1.0 - rate;
        Self(
            (0..len)
                .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }

    pub fn identity(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.0).map(|(v, m)| v * m).collect()
    }
}

/// Training forward: dropout is applied to the adapter input only, never to
/// the W0 path. Returns the sampled mask for replay in the backward pass.
pub fn forward_training(
    adapter: &ComposedAdapter,
    w0: &Matrix,
    x: &[f64],
    dropout: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, DropoutMask)> {
    let mask = DropoutMask::sample(x.len(), dropout, rng);
    let y = forward_with_mask(adapter, w0, x, &mask)?;
    Ok((y, mask))
}

/// Forward with a fixed dropout mask (the replayable core of training mode).
pub fn forward_with_mask(
    adapter: &ComposedAdapter,
    w0: &Matrix,
    x: &[f64],
    mask: &DropoutMask,
) -> Result<Vec<f64>> {
    if mask.0.len() != x.len() {
        return Err(MosError::Shape(format!(
            "dropout mask length {} != input length {}",
            mask.0.len(),
            x.len()
        )));
    }
    let mut y = w0.matvec(x)?;
    let x_tilde = mask.apply(x);
    let u = adapter.a.matvec(&x_tilde)?;
    let bu = adapter.b.matvec(&u)?;
    for (yi, bi) in y.iter_mut().zip(&bu) {
        *yi += adapter.alpha_over_r * bi;
    }
    Ok(y)
}

/// W0 + delta_w. Inference through the merged matrix equals `forward` with
/// dropout off.
pub fn merge(adapter: &ComposedAdapter, w0: &Matrix) -> Result<Matrix> {
    w0.add(&delta_w(adapter)?)
}

/// Composes the effective adapters of all L layers. Gathers are pure, so
/// the layers are prepared in parallel; results are ordered by layer and
/// identical to sequential per-layer composition.
pub fn precompose_all(ty: &LayerTypeState, cfg: &MosConfig) -> Result<Vec<ComposedAdapter>> {
    (0..ty.spec.num_blocks)
        .into_par_iter()
        .map(|k| compose_effective(ty, k, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::outer;
    use crate::pool::{LayerTypeSpec, ModelState, MosConfig};

    fn toy_state(cfg: MosConfig, seed: u64) -> ModelState {
        let spec = LayerTypeSpec::new("block", 8, 8, 4);
        let mut state = ModelState::init(vec![spec], cfg.with_seed(seed)).unwrap();
        let mut rng = SeededRng::derive(seed, 99);
        state.randomize_pools(&mut rng, 0.5);
        state
    }

    #[test]
    fn pure_sharing_composes_whole_pool() {
        let state = toy_state(MosConfig::pure_sharing(2, 4).with_alpha(8.0), 3);
        let ty = &state.types[0];
        for k in 0..4 {
            let adapter = compose(ty, k, &state.cfg).unwrap();
            // A_k is the pool itself; B_k is the pool transposed.
            assert_eq!(adapter.a, *ty.pool_a.data());
            assert_eq!(adapter.b, ty.pool_b.data().transpose());
            let dw = delta_w(&adapter).unwrap();
            let want = matmul(&ty.pool_b.data().transpose(), ty.pool_a.data())
                .unwrap()
                .scale(state.cfg.alpha_over_r());
            assert_eq!(dw, want);
        }
    }

    #[test]
    fn concatenation_order_is_slot_major() {
        use crate::pool::{IndexMatrix, LayerTypeState, ShardPool};
        // Two shards [1,2] and [3,4] routed to rank 0 concatenate in slot order.
        let pool_a = ShardPool::from_parts(
            Side::A,
            2,
            2,
            0,
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        )
        .unwrap();
        let pool_b = ShardPool::from_parts(
            Side::B,
            1,
            2,
            0,
            Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap(),
        )
        .unwrap();
        let ty = LayerTypeState {
            spec: LayerTypeSpec::new("t", 4, 2, 1),
            pool_a,
            pool_b,
            indices: vec![
                IndexMatrix::new(0, Side::A, 2, 1, vec![0, 1]).unwrap(),
                IndexMatrix::new(0, Side::B, 2, 1, vec![1, 0]).unwrap(),
            ],
            scalings: None,
        };
        let mut cfg = MosConfig::mos(1, 1, 2, 0);
        cfg.alpha = 1.0;
        let adapter = compose(&ty, 0, &cfg).unwrap();
        assert_eq!(adapter.a.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(adapter.b.col(0), vec![6.0, 5.0]);
    }

    #[test]
    fn delta_w_matches_outer_sum_oracle() {
        let state = toy_state(MosConfig::mos(2, 4, 2, 1).with_alpha(4.0), 7);
        let ty = &state.types[0];
        let adapter = compose(ty, 2, &state.cfg).unwrap();
        let dw = delta_w(&adapter).unwrap();
        let mut oracle = Matrix::zeros(8, 8);
        for i in 0..adapter.rank() {
            oracle.add_scaled_in_place(
                &outer(&adapter.b.col(i), adapter.a.row(i)),
                adapter.alpha_over_r,
            );
        }
        for (d, o) in dw.data().iter().zip(oracle.data()) {
            assert!((d - o).abs() < 1e-12);
        }
    }

    #[test]
    fn subset_selection_matches_mask_sum_oracle() {
        let state = toy_state(MosConfig::subset_selection(2, 3).with_alpha(3.0), 11);
        let ty = &state.types[0];
        let pool_rank = ty.pool_a.num_shards();
        for k in 0..4 {
            let adapter = compose_effective(ty, k, &state.cfg).unwrap();
            let dw = delta_w(&adapter).unwrap();
            let mask = ty.scaling_for(k).unwrap().mask().unwrap();
            let mut oracle = Matrix::zeros(8, 8);
            for i in 0..pool_rank {
                if mask[i] {
                    oracle.add_scaled_in_place(
                        &outer(ty.pool_b.shard(i), ty.pool_a.shard(i)),
                        state.cfg.alpha_over_r(),
                    );
                }
            }
            for (d, o) in dw.data().iter().zip(oracle.data()) {
                assert!((d - o).abs() < 1e-12, "layer {k}");
            }
        }
    }

    #[test]
    fn random_scaling_matches_scaled_outer_sum() {
        let state = toy_state(MosConfig::random_scaling(2, 4).with_alpha(8.0), 13);
        let ty = &state.types[0];
        for k in 0..4 {
            let effective = compose_effective(ty, k, &state.cfg).unwrap();
            let dw = delta_w(&effective).unwrap();
            let scalars = ty.scaling_for(k).unwrap().scalars().unwrap();
            let raw = compose(ty, k, &state.cfg).unwrap();
            let mut oracle = Matrix::zeros(8, 8);
            for i in 0..raw.rank() {
                oracle.add_scaled_in_place(
                    &outer(&raw.b.col(i), raw.a.row(i)),
                    scalars[i] * raw.alpha_over_r,
                );
            }
            for (d, o) in dw.data().iter().zip(oracle.data()) {
                assert!((d - o).abs() < 1e-12, "layer {k}");
            }
        }
    }

    #[test]
    fn unit_scalars_reduce_to_pure_sharing() {
        let state = toy_state(MosConfig::random_scaling(2, 4), 17);
        let ty = &state.types[0];
        let raw = compose(ty, 1, &state.cfg).unwrap();
        let ones = ScalingVector {
            layer_index: 1,
            values: crate::pool::ScalingValues::Scalars(vec![1.0; raw.rank()]),
        };
        let scaled = apply_random_scaling(&raw, &ones).unwrap();
        assert_eq!(scaled.a, raw.a);
        assert_eq!(delta_w(&scaled).unwrap(), delta_w(&raw).unwrap());
    }

    #[test]
    fn single_active_scalar_selects_one_pair() {
        let state = toy_state(MosConfig::random_scaling(2, 4).with_alpha(8.0), 19);
        let ty = &state.types[0];
        let raw = compose(ty, 0, &state.cfg).unwrap();
        let mut scalars = vec![0.0; raw.rank()];
        scalars[0] = 2.0;
        let sv = ScalingVector {
            layer_index: 0,
            values: crate::pool::ScalingValues::Scalars(scalars),
        };
        let dw = delta_w(&apply_random_scaling(&raw, &sv).unwrap()).unwrap();
        let want = outer(&raw.b.col(0), raw.a.row(0)).scale(2.0 * raw.alpha_over_r);
        for (d, w) in dw.data().iter().zip(want.data()) {
            assert!((d - w).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_length_mismatch_rejected() {
        let state = toy_state(MosConfig::random_scaling(2, 4), 23);
        let raw = compose(&state.types[0], 0, &state.cfg).unwrap();
        let short = ScalingVector {
            layer_index: 0,
            values: crate::pool::ScalingValues::Scalars(vec![1.0; 3]),
        };
        assert!(apply_random_scaling(&raw, &short).is_err());
    }

    #[test]
    fn forward_zero_w0_at_init_is_zero() {
        let spec = LayerTypeSpec::new("block", 8, 8, 4);
        let state = ModelState::init(vec![spec], MosConfig::mos(2, 4, 2, 1).with_seed(29)).unwrap();
        let adapter = compose_effective(&state.types[0], 0, &state.cfg).unwrap();
        let w0 = Matrix::zeros(8, 8);
        let y = forward(&adapter, &w0, &[1.0; 8]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_equals_merged_matvec() {
        let state = toy_state(MosConfig::mos(2, 4, 2, 1), 31);
        let ty = &state.types[0];
        let mut rng = SeededRng::new(123);
        let w0 = Matrix::from_vec(8, 8, rng.sample_normal(64)).unwrap();
        for k in 0..4 {
            let adapter = compose_effective(ty, k, &state.cfg).unwrap();
            let merged = merge(&adapter, &w0).unwrap();
            for _ in 0..100 {
                let x = rng.sample_normal(8);
                let direct = forward(&adapter, &w0, &x).unwrap();
                let via_merge = merged.matvec(&x).unwrap();
                for (d, m) in direct.iter().zip(&via_merge) {
                    assert!((d - m).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rank_one_forward_expansion() {
        let state = toy_state(MosConfig::mos(2, 1, 2, 0).with_alpha(1.0), 37);
        let ty = &state.types[0];
        let adapter = compose(ty, 0, &state.cfg).unwrap();
        let w0 = Matrix::zeros(8, 8);
        // x = e_j picks out A[0][j] * column 0 of B, times alpha/r.
        for j in 0..8 {
            let mut x = vec![0.0; 8];
            x[j] = 1.0;
            let y = forward(&adapter, &w0, &x).unwrap();
            let want: Vec<f64> = adapter
                .b
                .col(0)
                .iter()
                .map(|&b| adapter.alpha_over_r * adapter.a.get(0, j) * b)
                .collect();
            for (yi, wi) in y.iter().zip(&want) {
                assert!((yi - wi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_at_init_leaves_w0() {
        let spec = LayerTypeSpec::new("block", 8, 8, 4);
        let state = ModelState::init(vec![spec], MosConfig::lora(2).with_seed(41)).unwrap();
        let mut rng = SeededRng::new(5);
        let w0 = Matrix::from_vec(8, 8, rng.sample_normal(64)).unwrap();
        let adapter = compose_effective(&state.types[0], 0, &state.cfg).unwrap();
        assert_eq!(merge(&adapter, &w0).unwrap(), w0);
    }

    #[test]
    fn merge_minus_delta_recovers_w0() {
        let state = toy_state(MosConfig::mos(2, 4, 2, 1), 43);
        let adapter = compose_effective(&state.types[0], 1, &state.cfg).unwrap();
        let mut rng = SeededRng::new(6);
        let w0 = Matrix::from_vec(8, 8, rng.sample_normal(64)).unwrap();
        let recovered = merge(&adapter, &w0)
            .unwrap()
            .sub(&delta_w(&adapter).unwrap())
            .unwrap();
        for (r, w) in recovered.data().iter().zip(w0.data()) {
            assert!((r - w).abs() < 1e-12);
        }
    }

    #[test]
    fn precompose_matches_sequential_and_counts_layers() {
        let state = toy_state(MosConfig::mos(2, 4, 2, 1), 47);
        let ty = &state.types[0];
        let parallel = precompose_all(ty, &state.cfg).unwrap();
        assert_eq!(parallel.len(), 4);
        for (k, adapter) in parallel.iter().enumerate() {
            let sequential = compose_effective(ty, k, &state.cfg).unwrap();
            assert_eq!(*adapter, sequential);
        }
    }

    #[test]
    fn stale_adapter_detected_after_pool_write() {
        let mut state = toy_state(MosConfig::mos(2, 4, 2, 1), 53);
        let adapter = compose_effective(&state.types[0], 0, &state.cfg).unwrap();
        assert!(!adapter.is_stale(&state.types[0]));
        state.types[0].pool_a.data_mut().data_mut()[0] += 0.25;
        assert!(adapter.is_stale(&state.types[0]));
        let fresh = compose_effective(&state.types[0], 0, &state.cfg).unwrap();
        assert_ne!(adapter.a, fresh.a);
    }

    #[test]
    fn dropout_mask_replay_is_exact() {
        let state = toy_state(MosConfig::mos(2, 4, 2, 1).with_dropout(0.4), 59);
        let ty = &state.types[0];
        let adapter = compose_effective(ty, 0, &state.cfg).unwrap();
        let mut rng = SeededRng::new(60);
        let w0 = Matrix::from_vec(8, 8, rng.sample_normal(64)).unwrap();
        let x = rng.sample_normal(8);
        let mut drop_rng = SeededRng::new(61);
        let (y, mask) = forward_training(&adapter, &w0, &x, 0.4, &mut drop_rng).unwrap();
        let replayed = forward_with_mask(&adapter, &w0, &x, &mask).unwrap();
        assert_eq!(y, replayed);
    }
}
