//! Seeded toy-scale training harness. A student model is a stack of
//! `depth` linear blocks, each carrying one adapter-equipped projection of
//! shape width x width; pools are trained on synthetic regression tasks by
//! scatter-accumulated gradients while every frozen structure (indices,
//! masks, scalars) stays untouched.
//!
//! The ablation suite compares the construction variants at one exactly
//! matched trainable-parameter budget over a set of seeds, the way sharing
//! and differentiation schemes have to be compared to mean anything.

use rayon::prelude::*;
use serde::Serialize;

use crate::composer::compose;
use crate::error::{MosError, Result};
use crate::gradient::{scatter_to_pools, PoolGradient};
use crate::matrix::{matmul, Matrix};
use crate::pool::{LayerTypeSpec, ModelState, MosConfig, Side, Variant};
use crate::rng::SeededRng;

/// Synthetic task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TaskKind {
    /// Targets come from a teacher stack W0_k + E_k with a distinct
    /// low-rank perturbation E_k per block; the student shares the same
    /// frozen base W0_k, so the adapters must reproduce the E_k.
    TeacherStudentLinear,
    /// Targets come from a random nonlinear map; no student realizes it
    /// exactly.
    RandomFeatureRegression,
}

impl std::str::FromStr for TaskKind {
    type Err = MosError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "teacher" | "teacher_student_linear" => TaskKind::TeacherStudentLinear,
            "random-features" | "random_feature_regression" => TaskKind::RandomFeatureRegression,
            other => return Err(MosError::Config(format!("unknown task kind {other:?}"))),
        })
    }
}

/// Uniform stack shape: `depth` blocks of width x width projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ToyDims {
    pub width: usize,
    pub depth: usize,
}

/// Rank of the input-direction block every teacher perturbation shares.
pub const TEACHER_SHARED_RANK: usize = 2;
/// Rank of the block-exclusive component of each teacher perturbation.
pub const TEACHER_PRIVATE_RANK: usize = 1;
/// Total rank of one block's teacher perturbation.
pub const TEACHER_RANK: usize = TEACHER_SHARED_RANK + TEACHER_PRIVATE_RANK;

/// Exact low-rank factors of one block's teacher perturbation:
/// E_k = u * v with u width x TEACHER_RANK, v TEACHER_RANK x width.
#[derive(Debug, Clone)]
pub struct TeacherFactors {
    pub u: Matrix,
    pub v: Matrix,
}

/// Frozen synthetic task: base weights, dataset, and targets, all a pure
/// function of the seed.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub dims: ToyDims,
    pub num_samples: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Frozen base weight per block, width x width.
    base: Vec<Matrix>,
    /// Per-block teacher perturbation factors (teacher-student tasks only).
    teacher: Option<Vec<TeacherFactors>>,
    /// width x num_samples.
    inputs: Matrix,
    /// width x num_samples.
    targets: Matrix,
}

impl ToyTask {
    pub fn base(&self) -> &[Matrix] {
        &self.base
    }

    pub fn teacher(&self) -> Option<&[TeacherFactors]> {
        self.teacher.as_deref()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn layer_spec(&self) -> LayerTypeSpec {
        LayerTypeSpec::new("block", self.dims.width, self.dims.width, self.dims.depth)
    }
}

/// Builds a frozen task. Regeneration with the same arguments is
/// bit-identical.
///
/// The teacher-student family stresses exactly what sharing schemes trade
/// off: every block's perturbation reads the same few input directions
/// (shared structure worth pooling), writes block-specific output
/// directions at strongly uneven magnitudes, and carries a small
/// block-exclusive component.
pub fn make_task(
    kind: TaskKind,
    dims: ToyDims,
    num_samples: usize,
    noise_std: f64,
    seed: u64,
) -> Result<ToyTask> {
    if num_samples == 0 {
        return Err(MosError::EmptyTask);
    }
    if dims.width == 0 || dims.depth == 0 {
        return Err(MosError::Config("task dims must be >= 1".into()));
    }
    if kind == TaskKind::TeacherStudentLinear && dims.width % 2 != 0 {
        return Err(MosError::Config(
            "teacher-student tasks need an even width (half-segment library)".into(),
        ));
    }
    let w = dims.width;
    let mut rng = SeededRng::derive(seed, 7_000);

    // Random orthogonal base weights: the chain stays perfectly
    // conditioned at any depth, and the blocks' frames are decorrelated so
    // one shared update cannot serve every block.
    let base: Vec<Matrix> = (0..dims.depth)
        .map(|_| random_orthogonal(w, &mut rng))
        .collect();

    let inputs = Matrix::from_vec(w, num_samples, rng.sample_normal(w * num_samples))?;

    let mut teacher = None;
    let mut targets = match kind {
        TaskKind::TeacherStudentLinear => {
            let (factors, x) = teacher_perturbations(&base, &inputs, w, dims.depth, &mut rng)?;
            teacher = Some(factors);
            x
        }
        TaskKind::RandomFeatureRegression => {
            let f = Matrix::from_vec(w, w, rng.sample_normal(w * w))?.scale(1.0 / (w as f64).sqrt());
            let g = Matrix::from_vec(w, w, rng.sample_normal(w * w))?.scale(1.0 / (w as f64).sqrt());
            let mut feats = matmul(&f, &inputs)?;
            for v in feats.data_mut() {
                *v = v.tanh();
            }
            matmul(&g, &feats)?
        }
    };
    if noise_std > 0.0 {
        let noise = rng.sample_normal(w * num_samples);
        for (t, n) in targets.data_mut().iter_mut().zip(noise) {
            *t += noise_std * n;
        }
    }
    Ok(ToyTask {
        kind,
        dims,
        num_samples,
        noise_std,
        seed,
        base,
        teacher,
        inputs,
        targets,
    })
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Per-block perturbations built from shared direction libraries.
///
/// Input directions come from a library of half-segment concatenations
/// [P_s; Q_t], so blocks reuse segments in different combinations; output
/// directions come from a small shared library; each block pairs inputs to
/// outputs with its own assignment and its own decaying gains; one rank of
/// every block is exclusive to it. Updates that cannot differentiate
/// across blocks (in selection, pairing, segmentation, or exclusivity)
/// leave a floor on this family.
fn teacher_perturbations(
    base: &[Matrix],
    inputs: &Matrix,
    w: usize,
    depth: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<TeacherFactors>, Matrix)> {
    let qs = TEACHER_SHARED_RANK;
    let pert_scale = 1.0;
    let priv_scale = 0.4;
    let half = w / 2;

    // Input-direction library: four unit directions assembled from two
    // left and two right half-segments.
    let p: Vec<Vec<f64>> = (0..2).map(|_| rng.sample_normal(half)).collect();
    let q: Vec<Vec<f64>> = (0..2).map(|_| rng.sample_normal(half)).collect();
    let combos = [(0, 0), (1, 1), (0, 1), (1, 0)];
    let v_lib: Vec<Vec<f64>> = combos
        .iter()
        .map(|&(s, t)| {
            let mut v = p[s].clone();
            v.extend_from_slice(&q[t]);
            unit(v)
        })
        .collect();
    // Output-direction library.
    let u_lib: Vec<Vec<f64>> = (0..4).map(|_| unit(rng.sample_normal(w))).collect();

    let mut factors = Vec::with_capacity(depth);
    let mut x = inputs.clone();
    for (k, w0) in base.iter().enumerate() {
        // Block k pairs its input combos with output directions under a
        // block-specific assignment; gains decay with depth and carry
        // per-direction jitter.
        let jitter = rng.sample_uniform(qs, 0.3);
        let u_priv = unit(rng.sample_normal(w));
        let v_priv = unit(rng.sample_normal(w));

        let mut u = Matrix::zeros(w, qs + 1);
        let mut v = Matrix::zeros(qs + 1, w);
        for d in 0..qs {
            let v_dir = &v_lib[(k + 2 * d) % 4];
            let u_dir = &u_lib[(k + 3 * d + 1) % 4];
            let gain = pert_scale * 0.8_f64.powi(k as i32) * (1.0 + jitter[d]);
            for row in 0..w {
                u.set(row, d, gain * u_dir[row]);
            }
            for col in 0..w {
                v.set(d, col, v_dir[col]);
            }
        }
        for row in 0..w {
            u.set(row, qs, priv_scale * u_priv[row]);
        }
        for col in 0..w {
            v.set(qs, col, v_priv[col]);
        }

        let e = matmul(&u, &v)?;
        let teacher_k = w0.add(&e)?;
        x = matmul(&teacher_k, &x)?;
        factors.push(TeacherFactors { u, v });
    }
    Ok((factors, x))
}

/// Orthonormalizes a random Gaussian matrix by modified Gram-Schmidt over
/// its rows.
fn random_orthogonal(n: usize, rng: &mut SeededRng) -> Matrix {
    let mut m = Matrix::from_vec(n, n, rng.sample_normal(n * n)).unwrap();
    for i in 0..n {
        for j in 0..i {
            let proj = crate::matrix::dot(m.row(i), m.row(j));
            let prev = m.row(j).to_vec();
            for (v, p) in m.row_mut(i).iter_mut().zip(&prev) {
                *v -= proj * p;
            }
        }
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in m.row_mut(i) {
            *v /= norm;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = MosError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sgd" => Optimizer::Sgd,
            "adam" => Optimizer::Adam,
            other => return Err(MosError::Config(format!("unknown optimizer {other:?}"))),
        })
    }
}

/// One seeded training configuration. `seed` governs pool initialization,
/// index sampling, and dropout; the task carries its own seed.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub cfg: MosConfig,
    pub task: ToyTask,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
}

impl TrainRun {
    pub fn new(cfg: MosConfig, task: ToyTask, optimizer: Optimizer, lr: f64, steps: usize, seed: u64) -> Self {
        Self {
            cfg,
            task,
            optimizer,
            lr,
            steps,
            seed,
            loss_trace: Vec::new(),
        }
    }
}

/// A finished run: the loss trace plus the trained state.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run: TrainRun,
    pub state: ModelState,
    pub final_loss: f64,
}

/// Mean squared error (halved) of the student stack on the task, dropout
/// off.
pub fn evaluate_loss(state: &ModelState, task: &ToyTask) -> Result<f64> {
    let (loss, _) = forward_cached(state, task, None)?.into_loss_and_cache();
    Ok(loss)
}

struct LayerCache {
    /// Adapter-path input, width x N (dropout-masked in training mode).
    x_tilde: Matrix,
    /// Dropout keep-scales, width x N, when dropout is active.
    mask: Option<Matrix>,
    /// A_k x~, r x N.
    h: Matrix,
    a: Matrix,
    b: Matrix,
    scaling: Option<Vec<f64>>,
}

struct ForwardPass {
    loss: f64,
    output_residual_over_n: Matrix,
    caches: Vec<LayerCache>,
}

impl ForwardPass {
    fn into_loss_and_cache(self) -> (f64, Vec<LayerCache>) {
        (self.loss, self.caches)
    }
}

/// Runs the student stack over the whole batch, caching what backward
/// needs. `dropout_rng` enables training-mode dropout.
fn forward_cached(
    state: &ModelState,
    task: &ToyTask,
    mut dropout_rng: Option<&mut SeededRng>,
) -> Result<ForwardPass> {
    let ty = &state.types[0];
    let cfg = &state.cfg;
    let c = cfg.alpha_over_r();
    let n = task.num_samples;
    let w = task.dims.width;

    let mut x = task.inputs.clone();
    let mut caches = Vec::with_capacity(task.dims.depth);
    for k in 0..task.dims.depth {
        let adapter = compose(ty, k, cfg)?;
        let scaling = ty
            .scaling_for(k)
            .and_then(|sv| sv.scalars())
            .map(|s| s.to_vec());

        let (x_tilde, mask) = match (cfg.dropout > 0.0, dropout_rng.as_deref_mut()) {
            (true, Some(rng)) => {
                let keep = 1.0 - cfg.dropout;
                let mut mask = Matrix::zeros(w, n);
                for v in mask.data_mut() {
                    *v = if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 };
                }
                let mut masked = x.clone();
                for (m, v) in masked.data_mut().iter_mut().zip(mask.data()) {
                    *m *= v;
                }
                (masked, Some(mask))
            }
            _ => (x.clone(), None),
        };

        let h = matmul(&adapter.a, &x_tilde)?;
        let mut sh = h.clone();
        if let Some(s) = &scaling {
            for (i, &si) in s.iter().enumerate() {
                for v in sh.row_mut(i) {
                    *v *= si;
                }
            }
        }
        let mut y = matmul(&task.base[k], &x)?;
        y.add_scaled_in_place(&matmul(&adapter.b, &sh)?, c);

        caches.push(LayerCache {
            x_tilde,
            mask,
            h,
            a: adapter.a,
            b: adapter.b,
            scaling,
        });
        x = y;
    }

    let residual = x.sub(&task.targets)?;
    let loss = residual.data().iter().map(|v| v * v).sum::<f64>() / (2.0 * n as f64);
    Ok(ForwardPass {
        loss,
        output_residual_over_n: residual.scale(1.0 / n as f64),
        caches,
    })
}

/// One full forward/backward over the batch: loss plus pool gradients,
/// scattered in ascending layer order.
pub fn loss_and_pool_grads(
    state: &ModelState,
    task: &ToyTask,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<(f64, PoolGradient, PoolGradient)> {
    let ty = &state.types[0];
    let cfg = &state.cfg;
    let c = cfg.alpha_over_r();

    let pass = forward_cached(state, task, dropout_rng)?;
    let mut grad = pass.output_residual_over_n;
    let mut per_layer: Vec<(Matrix, Matrix)> = Vec::with_capacity(task.dims.depth);
    for k in (0..task.dims.depth).rev() {
        let cache = &pass.caches[k];
        // sh = diag(s) h
        let mut sh = cache.h.clone();
        if let Some(s) = &cache.scaling {
            for (i, &si) in s.iter().enumerate() {
                for v in sh.row_mut(i) {
                    *v *= si;
                }
            }
        }
        let d_b = matmul(&grad, &sh.transpose())?.scale(c);

        let mut btg = matmul(&cache.b.transpose(), &grad)?;
        if let Some(s) = &cache.scaling {
            for (i, &si) in s.iter().enumerate() {
                for v in btg.row_mut(i) {
                    *v *= si;
                }
            }
        }
        let d_a = matmul(&btg, &cache.x_tilde.transpose())?.scale(c);

        // Gradient to the block input: W0^T grad + mask' .* (c A^T btg)
        let mut d_x = matmul(&task.base[k].transpose(), &grad)?;
        let mut adapter_dx = matmul(&cache.a.transpose(), &btg)?.scale(c);
        if let Some(mask) = &cache.mask {
            for (v, m) in adapter_dx.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
        d_x.add_scaled_in_place(&adapter_dx, 1.0);

        per_layer.push((d_a, d_b));
        grad = d_x;
    }
    per_layer.reverse();

    let mut grad_a = PoolGradient::zeros_like(&ty.pool_a);
    let mut grad_b = PoolGradient::zeros_like(&ty.pool_b);
    for (k, (d_a, d_b)) in per_layer.iter().enumerate() {
        scatter_to_pools(
            d_a,
            d_b,
            ty.index_for(k, Side::A),
            ty.index_for(k, Side::B),
            &mut grad_a,
            &mut grad_b,
        )?;
    }
    Ok((pass.loss, grad_a, grad_b))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powi(t as i32);
        let bc2 = 1.0 - B2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Trains the pools. Deterministic given (cfg, task, seed); aborts with a
/// diagnostic if the loss leaves the finite range.
pub fn train(mut run: TrainRun) -> Result<TrainOutcome> {
    if run.task.dims.width != run.task.layer_spec().in_dim {
        return Err(MosError::Config("task dims inconsistent".into()));
    }
    let cfg = run.cfg.clone().with_seed(run.seed);
    let mut state = ModelState::init(vec![run.task.layer_spec()], cfg)?;
    let mut dropout_rng = SeededRng::derive(run.seed, 8_000);

    let (mut adam_a, mut adam_b) = {
        let ty = &state.types[0];
        (
            AdamState::new(ty.pool_a.data().data().len()),
            AdamState::new(ty.pool_b.data().data().len()),
        )
    };

    run.loss_trace.clear();
    for step in 0..run.steps {
        let dropout = if state.cfg.dropout > 0.0 {
            Some(&mut dropout_rng)
        } else {
            None
        };
        let (loss, grad_a, grad_b) = loss_and_pool_grads(&state, &run.task, dropout)?;
        if !loss.is_finite() {
            return Err(MosError::Divergence { step, loss });
        }
        run.loss_trace.push(loss);

        let ty = &mut state.types[0];
        match run.optimizer {
            Optimizer::Sgd => {
                for (pool, grad) in [(&mut ty.pool_a, &grad_a), (&mut ty.pool_b, &grad_b)] {
                    let data = pool.data_mut().data_mut();
                    for (p, g) in data.iter_mut().zip(grad.data.data()) {
                        *p -= run.lr * g;
                    }
                }
            }
            Optimizer::Adam => {
                let t = step + 1;
                adam_a.step(
                    ty.pool_a.data_mut().data_mut(),
                    grad_a.data.data(),
                    run.lr,
                    t,
                );
                adam_b.step(
                    ty.pool_b.data_mut().data_mut(),
                    grad_b.data.data(),
                    run.lr,
                    t,
                );
            }
        }
    }

    let final_loss = evaluate_loss(&state, &run.task)?;
    Ok(TrainOutcome {
        run,
        state,
        final_loss,
    })
}

/// Labels and configs of the budget-matched comparison group at a given
/// equivalent rank. The three trailing entries ablate one differentiation
/// mechanism each: -sp drops shard privatization, -vs drops vector
/// sharding, -pd drops independent pair routing.
pub fn ablation_configs(equivalent_rank: usize, depth: usize) -> Vec<(String, MosConfig)> {
    let e = equivalent_rank;
    let pool_rank = e * depth;
    let subset_rank = (pool_rank / 2).max(1);
    let mos_rank = e + 1;
    vec![
        ("lora".into(), MosConfig::lora(e)),
        ("pure_sharing".into(), MosConfig::pure_sharing(e, depth)),
        ("random_scaling".into(), MosConfig::random_scaling(e, depth)),
        (
            "subset_selection".into(),
            MosConfig::subset_selection(e, subset_rank),
        ),
        ("mos".into(), MosConfig::mos(e, mos_rank, 2, 1)),
        ("mos-sp".into(), MosConfig::mos(e, mos_rank, 2, 0)),
        ("mos-vs".into(), MosConfig::mos(e, mos_rank, 1, 1)),
        (
            "mos-pd".into(),
            MosConfig::mos(e, mos_rank, 2, 1).with_tied_indices(true),
        ),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationEntry {
    pub label: String,
    pub variant: Variant,
    pub param_count: u64,
    pub final_losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// lhs_mean <= rhs_mean + pooled standard error, for a required
/// "lhs performs at least as well" ordering on losses.
#[derive(Debug, Clone, Serialize)]
pub struct OrderingCheck {
    pub lhs: String,
    pub rhs: String,
    pub lhs_mean: f64,
    pub rhs_mean: f64,
    pub pooled_se: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub budget_params: u64,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub lr: f64,
    pub entries: Vec<AblationEntry>,
    pub orderings: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn entry(&self, label: &str) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn orderings_satisfied(&self) -> bool {
        self.orderings.iter().all(|o| o.satisfied)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains every variant of the comparison group on the same per-seed tasks
/// and reports mean final losses plus the sharing-vs-differentiation
/// ordering checks. Runs are independent and execute in parallel.
pub fn ablation_suite(
    dims: ToyDims,
    equivalent_rank: usize,
    num_samples: usize,
    noise_std: f64,
    seeds: &[u64],
    optimizer: Optimizer,
    lr: f64,
    steps: usize,
) -> Result<AblationReport> {
    if seeds.len() < 8 {
        return Err(MosError::Config(format!(
            "ablation needs >= 8 seeds, got {}",
            seeds.len()
        )));
    }
    let configs = ablation_configs(equivalent_rank, dims.depth);

    let mut jobs = Vec::new();
    for (label, cfg) in &configs {
        for &seed in seeds {
            jobs.push((label.clone(), cfg.clone(), seed));
        }
    }
    let results: Result<Vec<(String, u64, f64)>> = jobs
        .into_par_iter()
        .map(|(label, cfg, seed)| {
            let task = make_task(
                TaskKind::TeacherStudentLinear,
                dims,
                num_samples,
                noise_std,
                seed,
            )?;
            let outcome = train(TrainRun::new(cfg, task, optimizer, lr, steps, seed))?;
            Ok((label, outcome.state.trainable_params(), outcome.final_loss))
        })
        .collect();
    let results = results?;

    let mut entries = Vec::new();
    for (label, cfg) in &configs {
        let mut losses = Vec::new();
        let mut params = 0;
        for (l, p, loss) in &results {
            if l == label {
                losses.push(*loss);
                params = *p;
            }
        }
        let (mean, std) = mean_std(&losses);
        entries.push(AblationEntry {
            label: label.clone(),
            variant: cfg.variant,
            param_count: params,
            final_losses: losses,
            mean,
            std,
        });
    }

    let budget_params = entries[0].param_count;
    if entries.iter().any(|e| e.param_count != budget_params) {
        return Err(MosError::Config(format!(
            "budget mismatch across variants: {:?}",
            entries
                .iter()
                .map(|e| (e.label.clone(), e.param_count))
                .collect::<Vec<_>>()
        )));
    }

    let check = |lhs: &str, rhs: &str, entries: &[AblationEntry]| -> OrderingCheck {
        let le = entries.iter().find(|e| e.label == lhs).unwrap();
        let re = entries.iter().find(|e| e.label == rhs).unwrap();
        let n_l = le.final_losses.len() as f64;
        let n_r = re.final_losses.len() as f64;
        let pooled_se = (le.std * le.std / n_l + re.std * re.std / n_r).sqrt();
        OrderingCheck {
            lhs: lhs.into(),
            rhs: rhs.into(),
            lhs_mean: le.mean,
            rhs_mean: re.mean,
            pooled_se,
            satisfied: le.mean <= re.mean + pooled_se,
        }
    };
    let orderings = vec![
        check("subset_selection", "pure_sharing", &entries),
        check("mos", "mos-sp", &entries),
        check("mos", "mos-vs", &entries),
        check("mos", "mos-pd", &entries),
    ];

    Ok(AblationReport {
        budget_params,
        seeds: seeds.to_vec(),
        steps,
        lr,
        entries,
        orderings,
    })
}
