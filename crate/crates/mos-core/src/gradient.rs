//! Analytic backpropagation from a loss on layer outputs into the shared
//! pools. The gradient of an index gather is a scatter-add: every slice of
//! a composed-matrix gradient is accumulated into the pool row that the
//! index matrix named, so a shard referenced t times receives the sum of t
//! contributions. A central finite-difference oracle provides the
//! independent check.
//!
//! Only pool data receives gradients; index matrices, masks, and scalars
//! are frozen by construction and have no gradient path.

use crate::composer::{ComposedAdapter, DropoutMask};
use crate::error::{MosError, Result};
use crate::matrix::{dot, Matrix};
use crate::pool::{IndexMatrix, ShardPool, Side};

/// Gradient buffer congruent to a pool's shard storage. Rows of shards
/// referenced by no index matrix stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGradient {
    pub side: Side,
    pub data: Matrix,
}

impl PoolGradient {
    pub fn zeros_like(pool: &ShardPool) -> Self {
        Self {
            side: pool.side(),
            data: Matrix::zeros(pool.num_shards(), pool.shard_len()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.max_abs()
    }
}

/// Per-layer gradients produced by `backward_layer`. `d_a` and `d_b` are
/// taken with respect to the raw gathered matrices, so they scatter into
/// the pools unchanged.
#[derive(Debug, Clone)]
pub struct LayerBackward {
    /// r x h.
    pub d_a: Matrix,
    /// o x r.
    pub d_b: Matrix,
    /// Gradient through to the layer input, W0 path included.
    pub d_x: Vec<f64>,
}

/// Backpropagates dL/dy through y = W0 x + (alpha/r) * B diag(s) (A x~),
/// where x~ is the dropout-masked input recorded by the training forward
/// (identity when `mask` is None) and s the frozen random-scaling scalars
/// (ones when `scaling` is None). `adapter` must be the raw gather.
pub fn backward_layer(
    adapter: &ComposedAdapter,
    w0: &Matrix,
    x: &[f64],
    dl_dy: &[f64],
    scaling: Option<&[f64]>,
    mask: Option<&DropoutMask>,
) -> Result<LayerBackward> {
    let (r, h, o) = (adapter.rank(), adapter.in_dim(), adapter.out_dim());
    if x.len() != h || dl_dy.len() != o || w0.rows() != o || w0.cols() != h {
        return Err(MosError::Shape(format!(
            "backward_layer: x len {}, dl_dy len {}, W0 {}x{} against adapter with h={h}, o={o}",
            x.len(),
            dl_dy.len(),
            w0.rows(),
            w0.cols()
        )));
    }
    if let Some(s) = scaling {
        if s.len() != r {
            return Err(MosError::Shape(format!(
                "scaling length {} != rank {r}",
                s.len()
            )));
        }
    }
    if let Some(m) = mask {
        if m.0.len() != h {
            return Err(MosError::Shape(format!(
                "dropout mask length {} != input dim {h}",
                m.0.len()
            )));
        }
    }
    let c = adapter.alpha_over_r;
    let scale_at = |i: usize| scaling.map_or(1.0, |s| s[i]);

    let x_tilde: Vec<f64> = match mask {
        Some(m) => m.apply(x),
        None => x.to_vec(),
    };
    // u = A x~ and btg = B^T dL/dy carry everything the chain rule needs.
    let u = adapter.a.matvec(&x_tilde)?;
    let mut btg = vec![0.0; r];
    for (i, b) in btg.iter_mut().enumerate() {
        *b = dot(&adapter.b.col(i), dl_dy);
    }

    let mut d_b = Matrix::zeros(o, r);
    for m in 0..o {
        let g = dl_dy[m];
        for i in 0..r {
            d_b.set(m, i, c * g * scale_at(i) * u[i]);
        }
    }

    let mut d_a = Matrix::zeros(r, h);
    for i in 0..r {
        let coeff = c * scale_at(i) * btg[i];
        for (rv, xv) in d_a.row_mut(i).iter_mut().zip(&x_tilde) {
            *rv = coeff * xv;
        }
    }

    // d_x = W0^T g + mask' .* (c * A^T (s .* btg))
    let mut d_x = vec![0.0; h];
    for m in 0..o {
        let g = dl_dy[m];
        if g == 0.0 {
            continue;
        }
        for (xv, wv) in d_x.iter_mut().zip(w0.row(m)) {
            *xv += g * wv;
        }
    }
    let mut adapter_dx = vec![0.0; h];
    for i in 0..r {
        let coeff = c * scale_at(i) * btg[i];
        for (xv, av) in adapter_dx.iter_mut().zip(adapter.a.row(i)) {
            *xv += coeff * av;
        }
    }
    match mask {
        Some(m) => {
            for ((xv, av), keep) in d_x.iter_mut().zip(&adapter_dx).zip(&m.0) {
                *xv += av * keep;
            }
        }
        None => {
            for (xv, av) in d_x.iter_mut().zip(&adapter_dx) {
                *xv += av;
            }
        }
    }

    Ok(LayerBackward { d_a, d_b, d_x })
}

/// Adds each shard slice of a layer's composed-matrix gradients into the
/// pool-gradient row its index entry names. Accumulation order is fixed
/// (side A before B, rank ascending, slot ascending) so repeated runs are
/// bit-identical; callers iterate layers in ascending order.
pub fn scatter_to_pools(
    d_a: &Matrix,
    d_b: &Matrix,
    im_a: &IndexMatrix,
    im_b: &IndexMatrix,
    grad_a: &mut PoolGradient,
    grad_b: &mut PoolGradient,
) -> Result<()> {
    let r = im_a.rank();
    let l = im_a.shards_per_vector();
    let slen_a = grad_a.data.cols();
    let slen_b = grad_b.data.cols();
    if d_a.rows() != r || d_a.cols() != l * slen_a || d_b.cols() != r || d_b.rows() != l * slen_b {
        return Err(MosError::Shape(format!(
            "scatter: d_a {}x{}, d_b {}x{} against l={l}, r={r}, shard lens {slen_a}/{slen_b}",
            d_a.rows(),
            d_a.cols(),
            d_b.rows(),
            d_b.cols()
        )));
    }
    for i in 0..r {
        for j in 0..l {
            let idx = im_a.entry(j, i) as usize;
            if idx >= grad_a.data.rows() {
                return Err(MosError::Routing(format!(
                    "scatter: side A index {idx} out of range {}",
                    grad_a.data.rows()
                )));
            }
            let src_row = d_a.row(i);
            let src = &src_row[j * slen_a..(j + 1) * slen_a];
            for (d, s) in grad_a.data.row_mut(idx).iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for i in 0..r {
        for j in 0..l {
            let idx = im_b.entry(j, i) as usize;
            if idx >= grad_b.data.rows() {
                return Err(MosError::Routing(format!(
                    "scatter: side B index {idx} out of range {}",
                    grad_b.data.rows()
                )));
            }
            for (t, d) in grad_b.data.row_mut(idx).iter_mut().enumerate() {
                *d += d_b.get(j * slen_b + t, i);
            }
        }
    }
    Ok(())
}

/// Central finite differences of an arbitrary scalar loss over every entry
/// of a pool pair: (loss(th + eps) - loss(th - eps)) / (2 eps).
pub fn finite_diff_oracle<F>(
    pool_a: &ShardPool,
    pool_b: &ShardPool,
    mut loss_fn: F,
    eps: f64,
) -> Result<(PoolGradient, PoolGradient)>
where
    F: FnMut(&ShardPool, &ShardPool) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(MosError::Domain(
            "finite difference step must be > 0".into(),
        ));
    }
    let mut pa = pool_a.clone();
    let mut pb = pool_b.clone();
    let mut grad_a = PoolGradient::zeros_like(pool_a);
    let mut grad_b = PoolGradient::zeros_like(pool_b);

    for idx in 0..pa.data().rows() * pa.data().cols() {
        let orig = pa.data().data()[idx];
        pa.data_mut().data_mut()[idx] = orig + eps;
        let up = loss_fn(&pa, &pb)?;
        pa.data_mut().data_mut()[idx] = orig - eps;
        let down = loss_fn(&pa, &pb)?;
        pa.data_mut().data_mut()[idx] = orig;
        grad_a.data.data_mut()[idx] = (up - down) / (2.0 * eps);
    }
    for idx in 0..pb.data().rows() * pb.data().cols() {
        let orig = pb.data().data()[idx];
        pb.data_mut().data_mut()[idx] = orig + eps;
        let up = loss_fn(&pa, &pb)?;
        pb.data_mut().data_mut()[idx] = orig - eps;
        let down = loss_fn(&pa, &pb)?;
        pb.data_mut().data_mut()[idx] = orig;
        grad_b.data.data_mut()[idx] = (up - down) / (2.0 * eps);
    }
    Ok((grad_a, grad_b))
}

/// Relative disagreement with a floor so structurally-zero entries compare
/// at absolute scale: |a - f| / max(|a|, |f|, floor).
pub fn relative_error(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Outcome of an analytic-vs-finite-difference sweep over every pool entry.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Floor used by `check_pool_gradients` when forming relative errors, so
/// entries whose true gradient is (near) zero are compared at absolute
/// scale instead of dividing by rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares analytic pool gradients against central finite differences for
/// a whole model state under the loss sum_k 0.5 |y_k(x_k) - t_k|^2, with
/// seeded per-layer probes (W0_k, x_k, t_k). Exercises gather, scaling,
/// and scatter for whatever variant the state carries.
pub fn check_pool_gradients(
    state: &crate::pool::ModelState,
    probe_seed: u64,
    eps: f64,
) -> Result<GradientCheck> {
    use crate::composer::{compose, compose_effective, forward};
    use crate::pool::LayerTypeState;
    use crate::rng::SeededRng;

    let mut max_rel_err: f64 = 0.0;
    let mut entries = 0usize;

    for (t_idx, ty) in state.types.iter().enumerate() {
        let (h, o, blocks) = (ty.spec.in_dim, ty.spec.out_dim, ty.spec.num_blocks);
        let mut rng = SeededRng::derive(probe_seed, t_idx as u64);
        let probes: Vec<(Matrix, Vec<f64>, Vec<f64>)> = (0..blocks)
            .map(|_| {
                let w0 = Matrix::from_vec(o, h, rng.sample_normal(o * h)).unwrap();
                (w0, rng.sample_normal(h), rng.sample_normal(o))
            })
            .collect();

        // Analytic: backward through every layer, then scatter in ascending layer order.
        let mut grad_a = PoolGradient::zeros_like(&ty.pool_a);
        let mut grad_b = PoolGradient::zeros_like(&ty.pool_b);
        let mut per_layer = Vec::with_capacity(blocks);
        for (k, (w0, x, target)) in probes.iter().enumerate() {
            let raw = compose(ty, k, &state.cfg)?;
            let effective = compose_effective(ty, k, &state.cfg)?;
            let y = forward(&effective, w0, x)?;
            let dl_dy: Vec<f64> = y.iter().zip(target).map(|(yi, ti)| yi - ti).collect();
            let scaling = ty.scaling_for(k).and_then(|sv| sv.scalars());
            per_layer.push(backward_layer(&raw, w0, x, &dl_dy, scaling, None)?);
        }
        for (k, lb) in per_layer.iter().enumerate() {
            scatter_to_pools(
                &lb.d_a,
                &lb.d_b,
                ty.index_for(k, Side::A),
                ty.index_for(k, Side::B),
                &mut grad_a,
                &mut grad_b,
            )?;
        }

        // Finite differences of the same loss over every pool entry.
        let cfg = state.cfg.clone();
        let spec = ty.spec.clone();
        let indices = ty.indices.clone();
        let scalings = ty.scalings.clone();
        let loss_fn = |pa: &ShardPool, pb: &ShardPool| -> Result<f64> {
            let probe_ty = LayerTypeState {
                spec: spec.clone(),
                pool_a: pa.clone(),
                pool_b: pb.clone(),
                indices: indices.clone(),
                scalings: scalings.clone(),
            };
            let mut loss = 0.0;
            for (k, (w0, x, target)) in probes.iter().enumerate() {
                let adapter = compose_effective(&probe_ty, k, &cfg)?;
                let y = forward(&adapter, w0, x)?;
                loss += 0.5
                    * y.iter()
                        .zip(target)
                        .map(|(yi, ti)| (yi - ti) * (yi - ti))
                        .sum::<f64>();
            }
            Ok(loss)
        };
        let (fd_a, fd_b) = finite_diff_oracle(&ty.pool_a, &ty.pool_b, loss_fn, eps)?;

        for (a, f) in grad_a.data.data().iter().zip(fd_a.data.data()) {
            max_rel_err = max_rel_err.max(relative_error(*a, *f, REL_ERR_FLOOR));
            entries += 1;
        }
        for (a, f) in grad_b.data.data().iter().zip(fd_b.data.data()) {
            max_rel_err = max_rel_err.max(relative_error(*a, *f, REL_ERR_FLOOR));
            entries += 1;
        }
    }
    Ok(GradientCheck {
        max_rel_err,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::compose;
    use crate::pool::{LayerTypeSpec, ModelState, MosConfig};
    use crate::rng::SeededRng;

    fn toy_state(cfg: MosConfig, seed: u64) -> ModelState {
        let spec = LayerTypeSpec::new("block", 8, 8, 4);
        let mut state = ModelState::init(vec![spec], cfg.with_seed(seed)).unwrap();
        let mut rng = SeededRng::derive(seed, 99);
        state.randomize_pools(&mut rng, 0.4);
        state
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let state = toy_state(MosConfig::mos(2, 3, 2, 1), 1);
        let adapter = compose(&state.types[0], 0, &state.cfg).unwrap();
        let w0 = Matrix::zeros(8, 8);
        let lb = backward_layer(&adapter, &w0, &[0.3; 8], &[0.0; 8], None, None).unwrap();
        assert_eq!(lb.d_a.max_abs(), 0.0);
        assert_eq!(lb.d_b.max_abs(), 0.0);
        assert!(lb.d_x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule_by_hand() {
        use crate::pool::{IndexMatrix, LayerTypeState, ShardPool};
        // h = o = 1, r = 1: y = w0 x + c b a x, so db = c g a x, da = c g b x.
        let a_val = 0.7;
        let b_val = -0.4;
        let ty = LayerTypeState {
            spec: LayerTypeSpec::new("t", 1, 1, 1),
            pool_a: ShardPool::from_parts(
                Side::A,
                1,
                1,
                0,
                Matrix::from_vec(1, 1, vec![a_val]).unwrap(),
            )
            .unwrap(),
            pool_b: ShardPool::from_parts(
                Side::B,
                1,
                1,
                0,
                Matrix::from_vec(1, 1, vec![b_val]).unwrap(),
            )
            .unwrap(),
            indices: vec![
                IndexMatrix::new(0, Side::A, 1, 1, vec![0]).unwrap(),
                IndexMatrix::new(0, Side::B, 1, 1, vec![0]).unwrap(),
            ],
            scalings: None,
        };
        let mut cfg = MosConfig::mos(1, 1, 1, 0);
        cfg.alpha = 3.0;
        let c = cfg.alpha_over_r();
        let adapter = compose(&ty, 0, &cfg).unwrap();
        let w0 = Matrix::from_vec(1, 1, vec![0.2]).unwrap();
        let (x, g) = (1.3, 0.9);
        let lb = backward_layer(&adapter, &w0, &[x], &[g], None, None).unwrap();
        assert!((lb.d_b.get(0, 0) - c * g * a_val * x).abs() < 1e-14);
        assert!((lb.d_a.get(0, 0) - c * g * b_val * x).abs() < 1e-14);
        assert!((lb.d_x[0] - (0.2 * g + c * g * b_val * a_val)).abs() < 1e-14);
    }

    #[test]
    fn repeated_shard_in_one_layer_sums_contributions() {
        use crate::pool::{IndexMatrix, LayerTypeState, ShardPool};
        // Both rank positions route to shard 0 on side A.
        let ty = LayerTypeState {
            spec: LayerTypeSpec::new("t", 2, 2, 1),
            pool_a: ShardPool::from_parts(
                Side::A,
                2,
                2,
                0,
                Matrix::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.8]]).unwrap(),
            )
            .unwrap(),
            pool_b: ShardPool::from_parts(
                Side::B,
                2,
                2,
                0,
                Matrix::from_rows(&[vec![0.3, 0.6], vec![-0.7, 0.2]]).unwrap(),
            )
            .unwrap(),
            indices: vec![
                IndexMatrix::new(0, Side::A, 1, 2, vec![0, 0]).unwrap(),
                IndexMatrix::new(0, Side::B, 1, 2, vec![0, 1]).unwrap(),
            ],
            scalings: None,
        };
        let mut cfg = MosConfig::mos(1, 2, 1, 0);
        cfg.alpha = 2.0;
        let adapter = compose(&ty, 0, &cfg).unwrap();
        let w0 = Matrix::zeros(2, 2);
        let lb = backward_layer(&adapter, &w0, &[0.4, -1.1], &[0.9, 0.5], None, None).unwrap();

        let mut grad_a = PoolGradient::zeros_like(&ty.pool_a);
        let mut grad_b = PoolGradient::zeros_like(&ty.pool_b);
        scatter_to_pools(
            &lb.d_a,
            &lb.d_b,
            ty.index_for(0, Side::A),
            ty.index_for(0, Side::B),
            &mut grad_a,
            &mut grad_b,
        )
        .unwrap();
        for t in 0..2 {
            let want = lb.d_a.get(0, t) + lb.d_a.get(1, t);
            assert!((grad_a.data.get(0, t) - want).abs() < 1e-15);
            assert_eq!(grad_a.data.get(1, t), 0.0); // shard 1 unreferenced on side A
        }
        // Finite differences agree that the shared shard sees the summed
        // gradient: use a loss linear in y with the same upstream weights.
        let indices = ty.indices.clone();
        let spec = ty.spec.clone();
        let cfg2 = cfg.clone();
        let loss = move |pa: &ShardPool, pb: &ShardPool| -> crate::error::Result<f64> {
            let ty2 = LayerTypeState {
                spec: spec.clone(),
                pool_a: pa.clone(),
                pool_b: pb.clone(),
                indices: indices.clone(),
                scalings: None,
            };
            let adapter = compose(&ty2, 0, &cfg2)?;
            let w0 = Matrix::zeros(2, 2);
            let y = crate::composer::forward(&adapter, &w0, &[0.4, -1.1])?;
            Ok(0.9 * y[0] + 0.5 * y[1])
        };
        let (fd_a, _) = finite_diff_oracle(&ty.pool_a, &ty.pool_b, loss, 1e-5).unwrap();
        for t in 0..2 {
            assert!(relative_error(grad_a.data.get(0, t), fd_a.data.get(0, t), 1e-6) < 1e-6);
        }
    }

    #[test]
    fn unreferenced_shards_stay_zero() {
        // Subset selection with r = 1 of e*L = 8 leaves most rows untouched.
        let state = toy_state(MosConfig::subset_selection(2, 1), 5);
        let ty = &state.types[0];
        let mut grad_a = PoolGradient::zeros_like(&ty.pool_a);
        let mut grad_b = PoolGradient::zeros_like(&ty.pool_b);
        let mut rng = SeededRng::new(50);
        let w0 = Matrix::from_vec(8, 8, rng.sample_normal(64)).unwrap();
        let mut referenced = vec![false; ty.pool_a.num_shards()];
        for k in 0..4 {
            let adapter = compose(ty, k, &state.cfg).unwrap();
            let x = rng.sample_normal(8);
            let g = rng.sample_normal(8);
            let lb = backward_layer(&adapter, &w0, &x, &g, None, None).unwrap();
            scatter_to_pools(
                &lb.d_a,
                &lb.d_b,
                ty.index_for(k, Side::A),
                ty.index_for(k, Side::B),
                &mut grad_a,
                &mut grad_b,
            )
            .unwrap();
            for &e in ty.index_for(k, Side::A).entries() {
                referenced[e as usize] = true;
            }
        }
        assert!(
            referenced.iter().any(|&r| !r),
            "test needs an unreferenced shard"
        );
        for (i, &r) in referenced.iter().enumerate() {
            if !r {
                assert!(grad_a.data.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn summed_loss_gradient_is_sum_of_per_layer_scatters() {
        let state = toy_state(MosConfig::mos(2, 3, 2, 1), 9);
        let ty = &state.types[0];
        let mut rng = SeededRng::new(90);
        let w0 = Matrix::from_vec(8, 8, rng.sample_normal(64)).unwrap();
        let probes: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
            .map(|_| (rng.sample_normal(8), rng.sample_normal(8)))
            .collect();

        let mut joint_a = PoolGradient::zeros_like(&ty.pool_a);
        let mut joint_b = PoolGradient::zeros_like(&ty.pool_b);
        let mut summed_a = Matrix::zeros(ty.pool_a.num_shards(), ty.pool_a.shard_len());
        for k in 0..4 {
            let adapter = compose(ty, k, &state.cfg).unwrap();
            let lb =
                backward_layer(&adapter, &w0, &probes[k].0, &probes[k].1, None, None).unwrap();
            scatter_to_pools(
                &lb.d_a,
                &lb.d_b,
                ty.index_for(k, Side::A),
                ty.index_for(k, Side::B),
                &mut joint_a,
                &mut joint_b,
            )
            .unwrap();
            let mut solo_a = PoolGradient::zeros_like(&ty.pool_a);
            let mut solo_b = PoolGradient::zeros_like(&ty.pool_b);
            scatter_to_pools(
                &lb.d_a,
                &lb.d_b,
                ty.index_for(k, Side::A),
                ty.index_for(k, Side::B),
                &mut solo_a,
                &mut solo_b,
            )
            .unwrap();
            summed_a.add_scaled_in_place(&solo_a.data, 1.0);
        }
        for (j, s) in joint_a.data.data().iter().zip(summed_a.data()) {
            assert!((j - s).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_oracle_exact_on_quadratic() {
        let state = toy_state(MosConfig::mos(2, 2, 2, 0), 13);
        let ty = &state.types[0];
        let loss = |pa: &ShardPool, _pb: &ShardPool| -> crate::error::Result<f64> {
            Ok(0.5 * pa.data().data()[0] * pa.data().data()[0])
        };
        let (fd_a, fd_b) = finite_diff_oracle(&ty.pool_a, &ty.pool_b, loss, 1e-5).unwrap();
        let want = ty.pool_a.data().data()[0];
        assert!((fd_a.data.data()[0] - want).abs() < 1e-10);
        assert!(fd_a.data.data()[1..].iter().all(|&v| v.abs() < 1e-10));
        assert_eq!(fd_b.data.max_abs(), 0.0);
    }

    #[test]
    fn fd_error_shows_second_order_convergence() {
        let state = toy_state(MosConfig::mos(2, 2, 2, 0), 17);
        let ty = &state.types[0];
        // Cubic in one entry: central-difference error is exactly eps^2.
        let loss = |pa: &ShardPool, _pb: &ShardPool| -> crate::error::Result<f64> {
            let v = pa.data().data()[3];
            Ok(v * v * v)
        };
        let truth = 3.0 * ty.pool_a.data().data()[3].powi(2);
        let (coarse, _) = finite_diff_oracle(&ty.pool_a, &ty.pool_b, loss, 1e-3).unwrap();
        let (fine, _) = finite_diff_oracle(&ty.pool_a, &ty.pool_b, loss, 5e-4).unwrap();
        let err_coarse = (coarse.data.data()[3] - truth).abs();
        let err_fine = (fine.data.data()[3] - truth).abs();
        let ratio = err_coarse / err_fine;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn harness_matches_fd_for_scaled_and_sharded_variants() {
        for (cfg, seed) in [
            (MosConfig::random_scaling(2, 4), 31u64),
            (MosConfig::mos(3, 2, 4, 2), 33),
            (MosConfig::lora(2), 35),
        ] {
            let state = toy_state(cfg, seed);
            let check = check_pool_gradients(&state, 1234, 1e-5).unwrap();
            assert!(
                check.max_rel_err < 1e-5,
                "variant {:?}: max rel err {}",
                state.cfg.variant,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn harness_matches_fd_under_dropout_replay() {
        use crate::composer::{compose, forward_with_mask, DropoutMask};
        use crate::pool::LayerTypeState;
        // With a fixed recorded mask, training-mode gradients are exact too.
        let state = toy_state(MosConfig::mos(2, 3, 2, 1), 37);
        let ty = &state.types[0];
        let mut rng = SeededRng::new(370);
        let w0 = Matrix::from_vec(8, 8, rng.sample_normal(64)).unwrap();
        let x = rng.sample_normal(8);
        let target = rng.sample_normal(8);
        let mut mask_rng = SeededRng::new(371);
        let mask = DropoutMask::sample(8, 0.25, &mut mask_rng);

        let adapter = compose(ty, 0, &state.cfg).unwrap();
        let y = forward_with_mask(&adapter, &w0, &x, &mask).unwrap();
        let dl_dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let lb = backward_layer(&adapter, &w0, &x, &dl_dy, None, Some(&mask)).unwrap();
        let mut grad_a = PoolGradient::zeros_like(&ty.pool_a);
        let mut grad_b = PoolGradient::zeros_like(&ty.pool_b);
        scatter_to_pools(
            &lb.d_a,
            &lb.d_b,
            ty.index_for(0, Side::A),
            ty.index_for(0, Side::B),
            &mut grad_a,
            &mut grad_b,
        )
        .unwrap();

        let cfg = state.cfg.clone();
        let spec = ty.spec.clone();
        let indices = ty.indices.clone();
        let loss = move |pa: &ShardPool, pb: &ShardPool| -> crate::error::Result<f64> {
            let ty2 = LayerTypeState {
                spec: spec.clone(),
                pool_a: pa.clone(),
                pool_b: pb.clone(),
                indices: indices.clone(),
                scalings: None,
            };
            let adapter = compose(&ty2, 0, &cfg)?;
            let y = forward_with_mask(&adapter, &w0, &x, &mask)?;
            Ok(0.5
                * y.iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>())
        };
        let (fd_a, fd_b) = finite_diff_oracle(&ty.pool_a, &ty.pool_b, loss, 1e-5).unwrap();
        for (a, f) in grad_a.data.data().iter().zip(fd_a.data.data()) {
            assert!(relative_error(*a, *f, REL_ERR_FLOOR) < 1e-5);
        }
        for (a, f) in grad_b.data.data().iter().zip(fd_b.data.data()) {
            assert!(relative_error(*a, *f, REL_ERR_FLOOR) < 1e-5);
        }
    }

    #[test]
    fn scatter_accumulation_is_deterministic() {
        let state = toy_state(MosConfig::mos(2, 4, 2, 1), 21);
        let ty = &state.types[0];
        let mut w0_rng = SeededRng::new(210);
        let w0 = Matrix::from_vec(8, 8, w0_rng.sample_normal(64)).unwrap();
        let run = || {
            let mut rng = SeededRng::new(211);
            let mut ga = PoolGradient::zeros_like(&ty.pool_a);
            let mut gb = PoolGradient::zeros_like(&ty.pool_b);
            for k in 0..4 {
                let adapter = compose(ty, k, &state.cfg).unwrap();
                let x = rng.sample_normal(8);
                let g = rng.sample_normal(8);
                let lb = backward_layer(&adapter, &w0, &x, &g, None, None).unwrap();
                scatter_to_pools(
                    &lb.d_a,
                    &lb.d_b,
                    ty.index_for(k, Side::A),
                    ty.index_for(k, Side::B),
                    &mut ga,
                    &mut gb,
                )
                .unwrap();
            }
            (ga, gb)
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data.data(), a2.data.data());
        assert_eq!(b1.data.data(), b2.data.data());
    }
}
