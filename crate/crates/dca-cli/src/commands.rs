//! The six subcommands. Each resolves its settings (flag, else config file,
//! else default), runs the toolkit, and embeds the resolved configuration in
//! everything it writes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::Args;
use dca_metric::{
    embed_dataset, evaluate, finite_difference_check, generate, learning_rate_at, load_checkpoint,
    save_checkpoint, split_queries, train, EvalMode, FdReport, LossConfig, LossVariant, MlpModel,
    PkSpec, SynthSpec, TrainConfig, DEFAULT_LAMBDA, DEFAULT_MARGIN,
};
use log::info;

use crate::config::{echo_lines, read_dataset, write_meta, CliError, Dims, FileConfig, Resolver};

/// Margins swept by `compare`, paired with every loss variant.
const COMPARE_MARGINS: [f64; 3] = [0.5, 0.8, 1.2];

/// Step used by `gradcheck`'s central differences.
const FD_STEP: f64 = 1e-5;

/// Draw budget for finding a smooth, well-conditioned gradcheck batch.
const FD_ATTEMPTS: u64 = 200;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of identities (clusters)
    #[arg(long)]
    identities: Option<String>,
    /// Samples drawn per identity
    #[arg(long)]
    samples: Option<String>,
    /// Feature dimensionality
    #[arg(long)]
    input_dim: Option<String>,
    /// Minimum centroid separation, in units of the noise sigma
    #[arg(long)]
    separation: Option<String>,
    /// Standard deviation of the per-sample noise
    #[arg(long)]
    noise_sigma: Option<String>,
    /// Random seed
    #[arg(long)]
    seed: Option<String>,
    /// Output path for the dataset (binary embeddings format)
    #[arg(long)]
    out: Option<String>,
}

pub fn cmd_synth(file: &FileConfig, args: SynthArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("synth", file);
    let identities = r.value(&args.identities, "identities", 16usize)?;
    let samples = r.value(&args.samples, "samples", 32usize)?;
    let input_dim = r.value(&args.input_dim, "input_dim", 8usize)?;
    let separation = r.value(&args.separation, "separation", 10.0f64)?;
    let noise_sigma = r.value(&args.noise_sigma, "noise_sigma", 1.0f64)?;
    let seed = r.value(&args.seed, "seed", 42u64)?;
    let out = r.path_required(&args.out, "out")?;

    let spec = SynthSpec::new(
        identities,
        samples,
        input_dim,
        separation,
        noise_sigma,
        seed,
    )?;
    let data = generate(&spec);
    dca_metric::write_embeddings(&data, &out)?;
    write_meta(&out, r.echo())?;
    println!(
        "wrote {} rows of dimension {} to {}",
        data.len(),
        data.dim(),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset (.csv or binary embeddings)
    #[arg(long)]
    data: Option<String>,
    /// Loss variant: tri_bh, tri_ba, dca_bh, or dca_ba
    #[arg(long)]
    loss: Option<String>,
    /// Hinge margin
    #[arg(long)]
    margin: Option<String>,
    /// Context blend weight in [0, 1]
    #[arg(long)]
    lambda: Option<String>,
    /// Identities sampled per batch (P)
    #[arg(long)]
    p: Option<String>,
    /// Samples per identity per batch (K)
    #[arg(long)]
    k: Option<String>,
    /// Hidden and output widths, e.g. 32,16
    #[arg(long)]
    dims: Option<String>,
    /// Optimization steps
    #[arg(long)]
    steps: Option<String>,
    /// Base learning rate
    #[arg(long)]
    lr: Option<String>,
    /// Random seed (model init and batch sampling)
    #[arg(long)]
    seed: Option<String>,
    /// Output path for the checkpoint
    #[arg(long)]
    out: Option<String>,
    /// Output path for the loss-history CSV (default: checkpoint path with a
    /// .history.csv extension)
    #[arg(long)]
    history: Option<String>,
}

pub fn cmd_train(file: &FileConfig, args: TrainArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("train", file);
    let data_path = r.path_required(&args.data, "data")?;
    let variant: LossVariant = r.value(&args.loss, "loss", LossVariant::DcaBatchHard)?;
    let margin = r.value(&args.margin, "margin", DEFAULT_MARGIN)?;
    let lambda = r.value(&args.lambda, "lambda", DEFAULT_LAMBDA)?;
    let p = r.value(&args.p, "p", 8usize)?;
    let k = r.value(&args.k, "k", 4usize)?;
    let dims = r.value(&args.dims, "dims", Dims(vec![32, 16]))?;
    let steps = r.value(&args.steps, "steps", 300usize)?;
    let lr = r.value(&args.lr, "lr", 1e-3f64)?;
    let seed = r.value(&args.seed, "seed", 42u64)?;
    let out = r.path_required(&args.out, "out")?;
    let history_path = r.path_value(&args.history, "history", out.with_extension("history.csv"));

    let data = read_dataset(&data_path)?;
    let loss = LossConfig::new(variant)
        .with_margin(margin)
        .with_lambda(lambda);
    let pk = PkSpec::new(p, k, seed)?;
    let config = TrainConfig::new(loss, pk)
        .with_steps(steps)
        .with_learning_rate(lr);
    let model = MlpModel::new(&widths_for(data.dim(), &dims), seed)?;
    info!(
        "training on {} rows with P={p}, K={k} batches for {steps} steps",
        data.len()
    );
    let result = train(&data, model, &config)?;

    save_checkpoint(&result.model, &out)?;
    write_meta(&out, r.echo())?;

    let mut csv = echo_lines(r.echo());
    csv.push_str("step,loss,lr\n");
    for (step, loss) in result.loss_history.iter().enumerate() {
        let rate = learning_rate_at(&config, step);
        let _ = writeln!(csv, "{step},{loss},{rate}");
    }
    fs::write(&history_path, csv)?;

    let final_loss = result.loss_history.last().copied().unwrap_or(0.0);
    println!("trained {steps} steps; final batch loss {final_loss}");
    println!("checkpoint: {}", out.display());
    println!("history: {}", history_path.display());
    Ok(())
}

fn widths_for(input_dim: usize, dims: &Dims) -> Vec<usize> {
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&dims.0);
    widths
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset to embed and score (.csv or binary embeddings)
    #[arg(long)]
    data: Option<String>,
    /// Trained checkpoint
    #[arg(long)]
    model: Option<String>,
    /// Evaluation mode: euclidean or dca_rerank
    #[arg(long)]
    mode: Option<String>,
    /// Context blend weight for dca_rerank mode
    #[arg(long)]
    lambda: Option<String>,
    /// Rows per identity held out as queries
    #[arg(long)]
    queries_per_id: Option<String>,
    /// Output path for the report CSV
    #[arg(long)]
    out: Option<String>,
}

pub fn cmd_eval(file: &FileConfig, args: EvalArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("eval", file);
    let data_path = r.path_required(&args.data, "data")?;
    let model_path = r.path_required(&args.model, "model")?;
    let mode: EvalMode = r.value(&args.mode, "mode", EvalMode::Euclidean)?;
    let lambda = r.value(&args.lambda, "lambda", DEFAULT_LAMBDA)?;
    let queries_per_id = r.value(&args.queries_per_id, "queries_per_id", 2usize)?;
    let out = r.path_required(&args.out, "out")?;
    run_retrieval(
        r,
        &data_path,
        &model_path,
        mode,
        lambda,
        queries_per_id,
        &out,
    )
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    /// Dataset to embed and score (.csv or binary embeddings)
    #[arg(long)]
    data: Option<String>,
    /// Trained checkpoint
    #[arg(long)]
    model: Option<String>,
    /// Context blend weight in [0, 1]
    #[arg(long)]
    lambda: Option<String>,
    /// Rows per identity held out as queries
    #[arg(long)]
    queries_per_id: Option<String>,
    /// Output path for the report CSV
    #[arg(long)]
    out: Option<String>,
}

pub fn cmd_rerank(file: &FileConfig, args: RerankArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("rerank", file);
    let data_path = r.path_required(&args.data, "data")?;
    let model_path = r.path_required(&args.model, "model")?;
    r.fixed("mode", EvalMode::DcaRerank);
    let lambda = r.value(&args.lambda, "lambda", DEFAULT_LAMBDA)?;
    let queries_per_id = r.value(&args.queries_per_id, "queries_per_id", 2usize)?;
    let out = r.path_required(&args.out, "out")?;
    run_retrieval(
        r,
        &data_path,
        &model_path,
        EvalMode::DcaRerank,
        lambda,
        queries_per_id,
        &out,
    )
}

fn run_retrieval(
    r: Resolver<'_>,
    data_path: &Path,
    model_path: &Path,
    mode: EvalMode,
    lambda: f64,
    queries_per_id: usize,
    out: &Path,
) -> Result<(), CliError> {
    let data = read_dataset(data_path)?;
    let model = load_checkpoint(model_path).map_err(|err| {
        CliError::user(format!(
            "cannot load checkpoint {}: {err}",
            model_path.display()
        ))
    })?;
    let embedded = embed_dataset(&model, &data)?;
    let (queries, gallery) = split_queries(&embedded, queries_per_id)?;
    let report = evaluate(&queries.batch()?, &gallery.batch()?, mode, lambda)?;
    fs::write(out, report.to_csv(r.echo()))?;
    print!("{}", report.to_table());
    println!("report: {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Loss variant: tri_bh, tri_ba, dca_bh, or dca_ba
    #[arg(long)]
    loss: Option<String>,
    /// Hinge margin
    #[arg(long)]
    margin: Option<String>,
    /// Context blend weight in [0, 1]
    #[arg(long)]
    lambda: Option<String>,
    /// Identities in the sampled batch (P)
    #[arg(long)]
    p: Option<String>,
    /// Samples per identity in the sampled batch (K)
    #[arg(long)]
    k: Option<String>,
    /// Feature dimensionality of the sampled batch
    #[arg(long)]
    input_dim: Option<String>,
    /// Centroid separation of the sampled clusters
    #[arg(long)]
    separation: Option<String>,
    /// Noise sigma of the sampled clusters
    #[arg(long)]
    noise_sigma: Option<String>,
    /// Random seed for the batch draw
    #[arg(long)]
    seed: Option<String>,
    /// Maximum acceptable relative error
    #[arg(long)]
    threshold: Option<String>,
}

pub fn cmd_gradcheck(file: &FileConfig, args: GradcheckArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("gradcheck", file);
    let variant: LossVariant = r.value(&args.loss, "loss", LossVariant::DcaBatchHard)?;
    let margin = r.value(&args.margin, "margin", DEFAULT_MARGIN)?;
    let lambda = r.value(&args.lambda, "lambda", DEFAULT_LAMBDA)?;
    let p = r.value(&args.p, "p", 4usize)?;
    let k = r.value(&args.k, "k", 3usize)?;
    let input_dim = r.value(&args.input_dim, "input_dim", 6usize)?;
    let separation = r.value(&args.separation, "separation", 4.0f64)?;
    let noise_sigma = r.value(&args.noise_sigma, "noise_sigma", 1.0f64)?;
    let seed = r.value(&args.seed, "seed", 42u64)?;
    let threshold = r.value(&args.threshold, "threshold", 1e-5f64)?;

    let config = LossConfig::new(variant)
        .with_margin(margin)
        .with_lambda(lambda);
    let report = smooth_fd_report(&config, p, k, input_dim, separation, noise_sigma, seed)?;

    print!("{}", echo_lines(r.echo()));
    println!("max relative error: {:e}", report.max_rel_error);
    println!("threshold: {:e}", threshold);
    if report.max_rel_error <= threshold {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(CliError::internal(format!(
            "gradient check failed: max relative error {:e} exceeds threshold {:e}",
            report.max_rel_error, threshold
        )))
    }
}

/// Draws clustered batches until the finite-difference report is
/// trustworthy: away from hinge and selection kinks, well conditioned, and
/// with a loss large enough that relative error means something. The
/// acceptance never looks at the error itself.
fn smooth_fd_report(
    config: &LossConfig,
    p: usize,
    k: usize,
    input_dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<FdReport, CliError> {
    for attempt in 0..FD_ATTEMPTS {
        let spec = SynthSpec::new(
            p,
            k,
            input_dim,
            separation,
            noise_sigma,
            seed.wrapping_add(attempt),
        )?;
        let batch = generate(&spec).batch()?;
        let report = finite_difference_check(&batch, config, FD_STEP)?;
        if !report.touched_kink && report.well_conditioned && report.loss.value > 1e-3 {
            info!(
                "accepted draw {attempt}: loss {}, {} active triplets",
                report.loss.value, report.loss.active_count
            );
            return Ok(report);
        }
    }
    Err(CliError::user(format!(
        "no smooth, well-conditioned batch found in {FD_ATTEMPTS} draws; try another seed or shape"
    )))
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Number of identities in the shared synthetic dataset
    #[arg(long)]
    identities: Option<String>,
    /// Samples per identity in the shared synthetic dataset
    #[arg(long)]
    samples: Option<String>,
    /// Feature dimensionality of the shared synthetic dataset
    #[arg(long)]
    input_dim: Option<String>,
    /// Centroid separation of the shared synthetic dataset
    #[arg(long)]
    separation: Option<String>,
    /// Noise sigma of the shared synthetic dataset
    #[arg(long)]
    noise_sigma: Option<String>,
    /// Base seed; cell i trains with seed + i
    #[arg(long)]
    seed: Option<String>,
    /// Context blend weight used by the dca losses
    #[arg(long)]
    lambda: Option<String>,
    /// Identities sampled per batch (P)
    #[arg(long)]
    p: Option<String>,
    /// Samples per identity per batch (K)
    #[arg(long)]
    k: Option<String>,
    /// Hidden and output widths, e.g. 32,16
    #[arg(long)]
    dims: Option<String>,
    /// Optimization steps per cell
    #[arg(long)]
    steps: Option<String>,
    /// Base learning rate
    #[arg(long)]
    lr: Option<String>,
    /// Rows per identity held out as queries
    #[arg(long)]
    queries_per_id: Option<String>,
    /// Output path for the grid CSV
    #[arg(long)]
    out: Option<String>,
}

pub fn cmd_compare(file: &FileConfig, args: CompareArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("compare", file);
    let identities = r.value(&args.identities, "identities", 16usize)?;
    let samples = r.value(&args.samples, "samples", 32usize)?;
    let input_dim = r.value(&args.input_dim, "input_dim", 8usize)?;
    let separation = r.value(&args.separation, "separation", 10.0f64)?;
    let noise_sigma = r.value(&args.noise_sigma, "noise_sigma", 1.0f64)?;
    let seed = r.value(&args.seed, "seed", 42u64)?;
    let lambda = r.value(&args.lambda, "lambda", DEFAULT_LAMBDA)?;
    let p = r.value(&args.p, "p", 8usize)?;
    let k = r.value(&args.k, "k", 4usize)?;
    let dims = r.value(&args.dims, "dims", Dims(vec![32, 16]))?;
    let steps = r.value(&args.steps, "steps", 300usize)?;
    let lr = r.value(&args.lr, "lr", 1e-3f64)?;
    let queries_per_id = r.value(&args.queries_per_id, "queries_per_id", 2usize)?;
    let out = r.path_required(&args.out, "out")?;
    r.fixed("mode", EvalMode::Euclidean);
    let margin_list = COMPARE_MARGINS.map(|m| m.to_string()).join(",");
    r.fixed("margins", margin_list);

    let spec = SynthSpec::new(
        identities,
        samples,
        input_dim,
        separation,
        noise_sigma,
        seed,
    )?;
    let data = generate(&spec);
    let widths = widths_for(data.dim(), &dims);

    let mut csv = echo_lines(r.echo());
    csv.push_str("variant,margin,map,rank1\n");
    let mut table = String::from("variant  margin  mAP      rank-1\n");
    for (vi, variant) in LossVariant::all().into_iter().enumerate() {
        for (mi, margin) in COMPARE_MARGINS.into_iter().enumerate() {
            let cell = (vi * COMPARE_MARGINS.len() + mi) as u64;
            let cell_seed = seed.wrapping_add(cell);
            let loss = LossConfig::new(variant)
                .with_margin(margin)
                .with_lambda(lambda);
            let pk = PkSpec::new(p, k, cell_seed)?;
            let config = TrainConfig::new(loss, pk)
                .with_steps(steps)
                .with_learning_rate(lr);
            let model = MlpModel::new(&widths, cell_seed)?;
            let result = train(&data, model, &config)?;
            let embedded = embed_dataset(&result.model, &data)?;
            let (queries, gallery) = split_queries(&embedded, queries_per_id)?;
            let report = evaluate(
                &queries.batch()?,
                &gallery.batch()?,
                EvalMode::Euclidean,
                lambda,
            )?;
            info!(
                "cell {cell}: {variant} at margin {margin}: mAP {:.4}, rank-1 {:.4}",
                report.map,
                report.rank1()
            );
            let _ = writeln!(csv, "{variant},{margin},{},{}", report.map, report.rank1());
            let name = variant.to_string();
            let _ = writeln!(
                table,
                "{name:<8} {margin:<7} {:<8.4} {:.4}",
                report.map,
                report.rank1()
            );
        }
    }
    fs::write(&out, csv)?;
    print!("{table}");
    println!("grid: {}", out.display());
    Ok(())
}
