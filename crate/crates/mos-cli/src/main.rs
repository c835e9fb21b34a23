//! Command-line surface for the mixture-of-shards adapter laboratory.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mos_core::adapter_file;
use mos_core::budget::{lora_param_count, solve_equivalent_rank, BudgetSpec};
use mos_core::composer::{compose_effective, delta_w, forward, merge};
use mos_core::diversity::{diversity, DiversityVariant};
use mos_core::matrix::Matrix;
use mos_core::pool::{LayerTypeSpec, ModelState, MosConfig, Variant};
use mos_core::rng::SeededRng;
use mos_core::serving::{memory_report, AdapterDescriptor, AdapterHandle, Registry};
use mos_core::trainer::{ablation_suite, make_task, train, Optimizer, TaskKind, ToyDims, TrainRun};

#[derive(Parser)]
#[command(name = "mos", version, about = "Mixture-of-shards adapter laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize an adapter state and write it to a file.
    Init(InitArgs),
    /// Train a fresh state on a synthetic task.
    Train(TrainArgs),
    /// Budget-matched comparison of every construction variant.
    Ablate(AblateArgs),
    /// Materialize per-layer low-rank matrices and report their shapes.
    Compose(ComposeArgs),
    /// Verify merged-weight inference equals adapter-path inference.
    Merge(MergeArgs),
    /// Parameter counts and equivalent-rank solving.
    Budget(BudgetArgs),
    /// Combinational diversity counts.
    Diversity(DiversityArgs),
    /// Multi-tenant serving memory accounting.
    SimulateServing(ServeArgs),
    /// Check every structural invariant of an adapter file.
    Validate(ValidateArgs),
    /// Dump an adapter file's structure as JSON.
    Export(ExportArgs),
    /// Load an adapter file and re-save it (round-trip check).
    Import(ImportArgs),
}

#[derive(Args, Clone)]
struct ConfigFlags {
    /// lora | pure_sharing | random_scaling | subset_selection | mos
    #[arg(long, default_value = "mos")]
    variant: String,
    /// Per-layer rank r (composed vector pairs per layer).
    #[arg(long, default_value_t = 3)]
    rank: usize,
    /// Shards per vector l.
    #[arg(long = "shards", default_value_t = 2)]
    shards: usize,
    /// Private rank p (rank positions built from per-layer shards).
    #[arg(long = "private", default_value_t = 1)]
    private: usize,
    /// Equivalent rank e (pools cost the same as rank-e per-layer adapters).
    #[arg(long = "equiv", default_value_t = 2)]
    equiv: usize,
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reuse side A's index matrices for side B.
    #[arg(long)]
    tie_pair_indices: bool,
}

impl ConfigFlags {
    fn to_config(&self, num_blocks: usize) -> Result<MosConfig> {
        let variant = Variant::from_str(&self.variant)?;
        let mut cfg = match variant {
            Variant::Lora => MosConfig::lora(self.rank),
            Variant::PureSharing => MosConfig::pure_sharing(self.equiv, num_blocks),
            Variant::RandomScaling => MosConfig::random_scaling(self.equiv, num_blocks),
            Variant::SubsetSelection => MosConfig::subset_selection(self.equiv, self.rank),
            Variant::Mos => MosConfig::mos(self.equiv, self.rank, self.shards, self.private),
        };
        cfg = cfg
            .with_alpha(self.alpha)
            .with_dropout(self.dropout)
            .with_seed(self.seed);
        if self.tie_pair_indices {
            cfg = cfg.with_tied_indices(true);
        }
        Ok(cfg)
    }
}

/// `name:h:o:L`, e.g. `query:4096:4096:32`.
fn parse_layer(s: &str) -> Result<LayerTypeSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 {
        bail!("layer spec {s:?} must be name:h:o:L");
    }
    Ok(LayerTypeSpec::new(
        parts[0],
        parts[1].parse().context("h")?,
        parts[2].parse().context("o")?,
        parts[3].parse().context("L")?,
    ))
}

fn dims_for(preset: &str, layers: &[String]) -> Result<(BudgetSpec, String)> {
    match preset {
        "7b" => Ok((BudgetSpec::llama2_7b(), "7b (all linear projections)".into())),
        "70b-attn" => Ok((
            BudgetSpec::llama2_70b_attention(),
            "70b-attn (attention projections only)".into(),
        )),
        "custom" => {
            if layers.is_empty() {
                bail!("--dims-preset custom needs at least one --layer name:h:o:L");
            }
            let specs = layers
                .iter()
                .map(|s| parse_layer(s))
                .collect::<Result<Vec<_>>>()?;
            Ok((BudgetSpec::new(specs), "custom".into()))
        }
        other => bail!("unknown dims preset {other:?} (7b, 70b-attn, custom)"),
    }
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn write_json(path: &Option<PathBuf>, value: &impl serde::Serialize) -> Result<()> {
    if let Some(path) = path {
        std::fs::write(path, serde_json::to_string_pretty(value)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Repeatable layer-type spec name:h:o:L.
    #[arg(long = "layer")]
    layers: Vec<String>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let specs = if args.layers.is_empty() {
        vec![LayerTypeSpec::new("block", 16, 16, 4)]
    } else {
        args.layers
            .iter()
            .map(|s| parse_layer(s))
            .collect::<Result<Vec<_>>>()?
    };
    let cfg = args.config.to_config(specs[0].num_blocks)?;
    let state = ModelState::init(specs, cfg)?;
    adapter_file::save(&state, &args.out)?;
    println!(
        "initialized variant={} params={} structure_hash={:#010x}",
        state.cfg.variant,
        state.trainable_params(),
        state.structure_hash()
    );
    for ty in &state.types {
        println!(
            "  type={} dims={}x{} blocks={} pool_shards={}+{} shard_len={}/{}",
            ty.spec.name,
            ty.spec.in_dim,
            ty.spec.out_dim,
            ty.spec.num_blocks,
            ty.pool_a.num_public(),
            ty.pool_a.num_private(),
            ty.pool_a.shard_len(),
            ty.pool_b.shard_len()
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// teacher | random-features
    #[arg(long, default_value = "teacher")]
    task: String,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// sgd | adam
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    /// Trained state file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Machine-readable run summary.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct TrainSummary {
    variant: String,
    task: String,
    width: usize,
    depth: usize,
    samples: usize,
    noise: f64,
    optimizer: String,
    lr: f64,
    steps: usize,
    seed: u64,
    params: u64,
    final_loss: f64,
    loss_trace: Vec<f64>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let kind = TaskKind::from_str(&args.task)?;
    let optimizer = Optimizer::from_str(&args.optimizer)?;
    let dims = ToyDims {
        width: args.width,
        depth: args.depth,
    };
    let task = make_task(kind, dims, args.samples, args.noise, args.task_seed)?;
    let cfg = args.config.to_config(args.depth)?;
    let outcome = train(TrainRun::new(
        cfg,
        task,
        optimizer,
        args.lr,
        args.steps,
        args.config.seed,
    ))?;

    let trace = &outcome.run.loss_trace;
    println!(
        "trained variant={} params={} steps={} first_loss={:.6e} final_loss={:.6e}",
        outcome.state.cfg.variant,
        outcome.state.trainable_params(),
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        outcome.final_loss
    );
    if let Some(out) = &args.out {
        adapter_file::save(&outcome.state, out)?;
        println!("wrote {}", out.display());
    }
    let summary = TrainSummary {
        variant: outcome.state.cfg.variant.name().into(),
        task: args.task.clone(),
        width: args.width,
        depth: args.depth,
        samples: args.samples,
        noise: args.noise,
        optimizer: args.optimizer.clone(),
        lr: args.lr,
        steps: args.steps,
        seed: args.config.seed,
        params: outcome.state.trainable_params(),
        final_loss: outcome.final_loss,
        loss_trace: outcome.run.loss_trace.clone(),
    };
    write_json(&args.trace, &summary)?;
    Ok(())
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long = "equiv", default_value_t = 2)]
    equiv: usize,
    #[arg(long, default_value_t = 8)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let optimizer = Optimizer::from_str(&args.optimizer)?;
    let dims = ToyDims {
        width: args.width,
        depth: args.depth,
    };
    let seeds: Vec<u64> = (args.seed_start..args.seed_start + args.seeds as u64).collect();
    let report = ablation_suite(
        dims,
        args.equiv,
        args.samples,
        args.noise,
        &seeds,
        optimizer,
        args.lr,
        args.steps,
    )?;
    println!(
        "ablation budget_params={} seeds={} steps={} lr={}",
        report.budget_params,
        seeds.len(),
        args.steps,
        args.lr
    );
    println!("  legend: -sp no private shards, -vs no vector sharding, -pd tied pair indices");
    for e in &report.entries {
        println!(
            "variant={} params={} mean_loss={:.6e} std={:.3e}",
            e.label, e.param_count, e.mean, e.std
        );
    }
    for o in &report.orderings {
        println!(
            "ordering {}<={} satisfied={} lhs={:.6e} rhs={:.6e} pooled_se={:.3e}",
            o.lhs, o.rhs, o.satisfied, o.lhs_mean, o.rhs_mean, o.pooled_se
        );
    }
    write_json(&args.out, &report)?;
    if !report.orderings_satisfied() {
        bail!("ordering checks violated beyond one pooled standard error");
    }
    Ok(())
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long, value_name = "FILE")]
    state: PathBuf,
    /// Compose a single layer instead of all.
    #[arg(long)]
    layer: Option<usize>,
}

fn cmd_compose(args: ComposeArgs) -> Result<()> {
    let state = adapter_file::load(&args.state)?;
    for ty in &state.types {
        let layers: Vec<usize> = match args.layer {
            Some(k) => vec![k],
            None => (0..ty.spec.num_blocks).collect(),
        };
        for k in layers {
            let adapter = compose_effective(ty, k, &state.cfg)?;
            let dw = delta_w(&adapter)?;
            println!(
                "type={} layer={} A={}x{} B={}x{} alpha_over_r={:.4} delta_w_fro={:.6e}",
                ty.spec.name,
                k,
                adapter.a.rows(),
                adapter.a.cols(),
                adapter.b.rows(),
                adapter.b.cols(),
                adapter.alpha_over_r,
                dw.frobenius_norm()
            );
        }
    }
    Ok(())
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long, value_name = "FILE")]
    state: PathBuf,
    /// Seed for the synthetic base weights.
    #[arg(long, default_value_t = 0)]
    w0_seed: u64,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let state = adapter_file::load(&args.state)?;
    let mut worst: f64 = 0.0;
    for (t, ty) in state.types.iter().enumerate() {
        let mut rng = SeededRng::derive(args.w0_seed, t as u64);
        let w0 = Matrix::from_vec(
            ty.spec.out_dim,
            ty.spec.in_dim,
            rng.sample_normal(ty.spec.out_dim * ty.spec.in_dim),
        )?;
        for k in 0..ty.spec.num_blocks {
            let adapter = compose_effective(ty, k, &state.cfg)?;
            let merged = merge(&adapter, &w0)?;
            let mut layer_worst: f64 = 0.0;
            for _ in 0..args.probes {
                let x = rng.sample_normal(ty.spec.in_dim);
                let direct = forward(&adapter, &w0, &x)?;
                let via = merged.matvec(&x)?;
                for (d, v) in direct.iter().zip(&via) {
                    layer_worst = layer_worst.max((d - v).abs());
                }
            }
            println!(
                "type={} layer={} max_abs_deviation={:.3e}",
                ty.spec.name, k, layer_worst
            );
            worst = worst.max(layer_worst);
        }
    }
    println!("merge_equivalence max_abs_deviation={worst:.3e} tolerance={:.1e}", args.tolerance);
    if worst >= args.tolerance {
        bail!("merged inference deviates from adapter inference");
    }
    Ok(())
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long = "dims-preset", default_value = "7b")]
    dims_preset: String,
    #[arg(long = "layer")]
    layers: Vec<String>,
    /// Report the trainable-parameter count of this rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Solve this parameter budget for the equivalent rank.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long = "json-out", value_name = "FILE")]
    json_out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct BudgetOutput {
    dims: String,
    rank: Option<usize>,
    params: Option<u64>,
    budget: Option<u64>,
    equivalent_rank: Option<u64>,
    pool_ranks: Vec<(String, u64)>,
}

fn cmd_budget(args: BudgetArgs) -> Result<()> {
    let (spec, label) = dims_for(&args.dims_preset, &args.layers)?;
    let mut output = BudgetOutput {
        dims: label.clone(),
        rank: args.rank,
        params: None,
        budget: args.budget,
        equivalent_rank: None,
        pool_ranks: Vec::new(),
    };
    match (args.rank, args.budget) {
        (Some(rank), None) => {
            let params = lora_param_count(&spec, rank);
            println!(
                "dims={label} rank={rank} trainable_params={params} ({})",
                millions(params)
            );
            output.params = Some(params);
        }
        (None, Some(budget)) => {
            let solved = solve_equivalent_rank(&spec, budget)?;
            println!(
                "dims={label} budget={budget} ({}) equivalent_rank={}",
                millions(budget),
                solved.e
            );
            for p in &solved.pool_ranks {
                println!("  layer_type={} pool_rank={}", p.layer_type, p.pool_rank);
                output.pool_ranks.push((p.layer_type.clone(), p.pool_rank));
            }
            output.equivalent_rank = Some(solved.e);
        }
        _ => bail!("pass exactly one of --rank or --budget"),
    }
    write_json(&args.json_out, &output)?;
    Ok(())
}

#[derive(Args)]
struct DiversityArgs {
    /// pure | subset | dissociation | sharding
    #[arg(long)]
    variant: String,
    #[arg(long = "L")]
    num_blocks: u64,
    #[arg(long = "e")]
    equiv: u64,
    #[arg(long = "r")]
    rank: u64,
    #[arg(long = "l", default_value_t = 1)]
    shards: u64,
}

fn cmd_diversity(args: DiversityArgs) -> Result<()> {
    let variant = DiversityVariant::from_str(&args.variant)?;
    let report = diversity(variant, args.num_blocks, args.equiv, args.rank, args.shards)?;
    println!(
        "variant={} combinations={} formula={}",
        report.variant.name(),
        report.combinations,
        report.formula
    );
    if let (Some(ordered), Some(formula)) =
        (&report.ordered_with_replacement, &report.ordered_formula)
    {
        println!("ordered_with_replacement={ordered} formula={formula}");
    }
    Ok(())
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    tenants: u64,
    /// lora | mos
    #[arg(long)]
    method: String,
    /// Adapter rank (lora method).
    #[arg(long)]
    rank: Option<usize>,
    /// Pool parameter budget (mos method).
    #[arg(long)]
    budget: Option<u64>,
    /// Express the mos budget as "same cost as this lora rank".
    #[arg(long = "budget-rank")]
    budget_rank: Option<usize>,
    #[arg(long = "precision-bytes", default_value_t = 4)]
    precision_bytes: u64,
    #[arg(long = "dims-preset", default_value = "70b-attn")]
    dims_preset: String,
    #[arg(long = "layer")]
    layers: Vec<String>,
    #[arg(long = "json-out", value_name = "FILE")]
    json_out: Option<PathBuf>,
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let (spec, label) = dims_for(&args.dims_preset, &args.layers)?;
    let descriptor = match args.method.as_str() {
        "lora" => {
            let rank = args.rank.context("--method lora needs --rank")?;
            AdapterDescriptor::lora(&spec, rank)
        }
        "mos" => {
            let budget = match (args.budget, args.budget_rank) {
                (Some(b), None) => b,
                (None, Some(r)) => lora_param_count(&spec, r),
                _ => bail!("--method mos needs exactly one of --budget or --budget-rank"),
            };
            AdapterDescriptor::mos_with_budget(budget)
        }
        other => bail!("unknown method {other:?} (lora, mos)"),
    };
    let report = memory_report(&descriptor, args.tenants, args.precision_bytes, &label);

    // Exercise the registry accounting when the fleet is small enough to
    // enumerate.
    if args.tenants > 0 && args.tenants <= 100_000 {
        let mut registry = Registry::new(args.precision_bytes);
        for i in 0..args.tenants {
            registry.register(
                &format!("tenant-{i:06}"),
                AdapterHandle::Descriptor(descriptor.clone()),
            )?;
        }
        anyhow::ensure!(
            registry.total_memory() == report.total_bytes,
            "registry accounting diverged from closed form"
        );
        anyhow::ensure!(
            registry.total_memory() == registry.recompute_total(),
            "registry total out of sync with per-tenant sum"
        );
        println!("registry accounting verified over {} tenants", registry.len());
    }

    println!(
        "method={} tenants={} per_tenant_params={} ({}) per_tenant_bytes={}",
        report.method,
        report.num_tenants,
        report.per_tenant_params,
        millions(report.per_tenant_params),
        report.per_tenant_bytes
    );
    println!(
        "total_bytes={} total_terabytes={:.4}",
        report.total_bytes, report.total_terabytes
    );
    for a in &report.assumptions {
        println!("assumption: {a}");
    }
    write_json(&args.json_out, &report)?;
    Ok(())
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_name = "FILE")]
    state: PathBuf,
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let state = adapter_file::load(&args.state)?;
    let report = state.validate();
    for c in &report.checks {
        println!(
            "check={} status={} {}",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.detail
        );
    }
    if !report.passed() {
        bail!("validation failed");
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_name = "FILE")]
    state: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct ExportDump {
    variant: String,
    rank: usize,
    shards_per_vector: usize,
    private_rank: usize,
    equivalent_rank: usize,
    alpha: f64,
    dropout: f64,
    seed: u64,
    tie_pair_indices: bool,
    trainable_params: u64,
    structure_hash: String,
    layer_types: Vec<ExportType>,
}

#[derive(serde::Serialize)]
struct ExportType {
    name: String,
    in_dim: usize,
    out_dim: usize,
    num_blocks: usize,
    num_public: usize,
    num_private: usize,
    pool_a_fro: f64,
    pool_b_fro: f64,
    index_entries: Vec<Vec<u32>>,
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let state = adapter_file::load(&args.state)?;
    let dump = ExportDump {
        variant: state.cfg.variant.name().into(),
        rank: state.cfg.rank,
        shards_per_vector: state.cfg.shards_per_vector,
        private_rank: state.cfg.private_rank,
        equivalent_rank: state.cfg.equivalent_rank,
        alpha: state.cfg.alpha,
        dropout: state.cfg.dropout,
        seed: state.cfg.seed,
        tie_pair_indices: state.cfg.tie_pair_indices,
        trainable_params: state.trainable_params(),
        structure_hash: format!("{:#010x}", state.structure_hash()),
        layer_types: state
            .types
            .iter()
            .map(|ty| ExportType {
                name: ty.spec.name.clone(),
                in_dim: ty.spec.in_dim,
                out_dim: ty.spec.out_dim,
                num_blocks: ty.spec.num_blocks,
                num_public: ty.pool_a.num_public(),
                num_private: ty.pool_a.num_private(),
                pool_a_fro: ty.pool_a.data().frobenius_norm(),
                pool_b_fro: ty.pool_b.data().frobenius_norm(),
                index_entries: ty.indices.iter().map(|im| im.entries().to_vec()).collect(),
            })
            .collect(),
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&dump)?)?;
    println!("exported {} -> {}", args.state.display(), args.out.display());
    Ok(())
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long, value_name = "FILE")]
    file: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn cmd_import(args: ImportArgs) -> Result<()> {
    let bytes = std::fs::read(&args.file)?;
    let state = mos_core::adapter_file::decode(&bytes)?;
    let reencoded = mos_core::adapter_file::encode(&state);
    std::fs::write(&args.out, &reencoded)?;
    println!(
        "imported {} params={} structure_hash={:#010x} byte_identical={}",
        args.file.display(),
        state.trainable_params(),
        state.structure_hash(),
        reencoded == bytes
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Merge(args) => cmd_merge(args),
        Command::Budget(args) => cmd_budget(args),
        Command::Diversity(args) => cmd_diversity(args),
        Command::SimulateServing(args) => cmd_serve(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Export(args) => cmd_export(args),
        Command::Import(args) => cmd_import(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
