// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use cpd_attention::data::{self, GeneratorConfig, GeneratorKind};
use cpd_attention::losses::{FaSign, LossConfig, LossKind};
use cpd_attention::masks::MaskSpec;
use cpd_attention::metrics::MetricsConfig;
use cpd_attention::model::{load_checkpoint, Model, ModelConfig, ModelKind};
use cpd_attention::report;
use cpd_attention::training::{self, RunConfig, Splits, SweepFamily, TrainConfig};
use cpd_attention::{CpdError, Result};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cpd",
    version,
    about = "Change point detection with masked-attention transformers"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train one configuration and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Sweep the mask size of one mask family.
    Sweep(SweepArgs),
    /// Run every configuration of the comparison table over several seeds.
    Table(TableArgs),
    /// Render run directories, a table or a sweep as Markdown.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = GeneratorKind::MeanShift)]
    kind: GeneratorKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of sequences containing a change.
    #[arg(long, default_value_t = 0.5)]
    balance: f64,
    /// Mean-shift magnitude.
    #[arg(long, default_value_t = 2.0)]
    shift: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    /// Transition length of the morph generator.
    #[arg(long, default_value_t = 4)]
    morph_width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = ModelKind::Transformer)]
    model: ModelKind,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 64)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
}

#[derive(Args, Clone)]
struct LossArgs {
    #[arg(long, default_value_t = LossKind::Cpd)]
    loss: LossKind,
    /// Weight of the false-alarm term.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Last step of the delay window (default: T - 1).
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long, default_value_t = FaSign::Corrected)]
    fa_sign: FaSign,
}

impl LossArgs {
    fn config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            t_max: self.t_max,
            fa_weight: self.c,
            fa_sign: self.fa_sign,
        }
    }
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Global gradient-norm cap.
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Seed for parameters, shuffling and dropout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the 80/10/10 train/validation/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl OptimArgs {
    fn config(&self, loss: LossConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            grad_clip: self.grad_clip,
            patience: self.patience,
            seed: self.seed,
            loss,
            eval_every: self.eval_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct MetricArgs {
    /// Matching margin for F1.
    #[arg(long, default_value_t = 5)]
    margin: usize,
    /// Alarm threshold for F1 and Covering.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Number of thresholds on the detection curve.
    #[arg(long, default_value_t = 100)]
    grid_size: usize,
}

impl MetricArgs {
    fn config(&self) -> MetricsConfig {
        MetricsConfig {
            margin: self.margin,
            grid_size: self.grid_size,
            f1_threshold: self.threshold,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = MaskSpec::None)]
    mask: MaskSpec,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Band,
    Bandwin,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Family::Band)]
    family: Family,
    /// Band width of the `bandwin` family.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    metrics: MetricArgs,
    /// CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    metrics: MetricArgs,
    /// JSON path for the aggregated rows.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, a table `.json`, or a sweep `.csv`.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    format: Format,
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn model_config(args: &ModelArgs, mask: MaskSpec, input_dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        kind: args.model,
        input_dim,
        d_model: args.d_model,
        n_heads: args.n_heads,
        n_layers: args.n_layers,
        ffn_dim: args.ffn_dim,
        mask,
        dropout: args.dropout,
        param_seed: seed,
    }
}

fn load_splits(path: &Path, seed: u64) -> Result<Splits> {
    let ds = data::load(path)?;
    let (train, val, test) = data::split(&ds, [0.8, 0.1, 0.1], seed)?;
    info!(
        "loaded {} sequences (T={}, d={}); split {}/{}/{}",
        ds.sequences.len(),
        ds.length,
        ds.dim,
        train.sequences.len(),
        val.sequences.len(),
        test.sequences.len()
    );
    Ok(Splits { train, val, test })
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, body).map_err(|e| CpdError::io(p, e)),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| CpdError::io("<stdout>", e)),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        kind: a.kind,
        n: a.n,
        length: a.length,
        dim: a.dim,
        seed: a.seed,
        balance: a.balance,
        shift_magnitude: a.shift,
        noise_sigma: a.noise_sigma,
        morph_width: a.morph_width,
    };
    cfg.validate()?;
    let ds = data::generate(&cfg)?;
    data::save(&ds, &a.out)?;
    info!(
        "wrote {} sequences ({} with a change) to {}",
        ds.sequences.len(),
        ds.n_changes(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut mask = a.mask;
    if a.model.model == ModelKind::Recurrent && mask != MaskSpec::None {
        warn!("--mask {mask} is ignored by the recurrent model");
        mask = MaskSpec::None;
    }
    let loss = a.loss.config();
    let train = a.optim.config(loss);
    train.validate()?;
    let metrics = a.metrics.config();
    metrics.validate()?;
    let splits = load_splits(&a.data, a.optim.split_seed)?;
    let cfg = RunConfig {
        model: model_config(&a.model, mask, splits.train.dim, a.optim.seed),
        train,
        metrics,
    };
    cfg.model.validate()?;
    cfg.train.loss.validate(splits.train.length)?;
    let res = training::run(&cfg, &splits, Some(&a.out))?;
    let r = &res.report;
    info!(
        "best epoch {}: test f1 {:.4}, covering {:.4}, area {:.4}",
        res.outcome.best_epoch, r.f1, r.covering, r.area
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let metrics = a.metrics.config();
    metrics.validate()?;
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let model = Model::from_parts(cfg, params)?;
    let ds = data::load(&a.data)?;
    if ds.dim != model.config.input_dim {
        return Err(CpdError::Validation(format!(
            "dataset dimension {} does not match checkpoint input_dim {}",
            ds.dim, model.config.input_dim
        )));
    }
    let report = training::evaluate_model(&model, &ds, &metrics)?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let family = match a.family {
        Family::Band => SweepFamily::Band,
        Family::Bandwin => SweepFamily::BandWindow { k: a.k },
    };
    let loss = a.loss.config();
    let train = a.optim.config(loss.clone());
    train.validate()?;
    let metrics = a.metrics.config();
    metrics.validate()?;
    let splits = load_splits(&a.data, a.optim.split_seed)?;
    for &n in &a.sizes {
        let mask = family.mask(n);
        mask.validate()?;
        cpd_attention::masks::build(&mask, splits.train.length)?;
    }
    let base = model_config(&a.model, MaskSpec::None, splits.train.dim, a.optim.seed);
    base.validate()?;
    loss.validate(splits.train.length)?;
    let rows = training::sweep(family, &a.sizes, &base, &loss, &splits, &train, &metrics, a.runs)?;
    let mut buf = Vec::new();
    training::write_sweep_csv(&rows, &mut buf)?;
    emit(a.out.as_deref(), &String::from_utf8(buf).expect("csv is utf-8"))
}

fn cmd_table(a: TableArgs) -> Result<()> {
    let loss = a.loss.config();
    let train = a.optim.config(loss.clone());
    train.validate()?;
    let metrics = a.metrics.config();
    metrics.validate()?;
    let splits = load_splits(&a.data, a.optim.split_seed)?;
    let base = model_config(&a.model, MaskSpec::None, splits.train.dim, a.optim.seed);
    base.validate()?;
    loss.validate(splits.train.length)?;
    let mut rows = training::table1_rows(&base);
    for r in &mut rows {
        r.loss = LossConfig {
            kind: r.loss.kind,
            ..loss.clone()
        };
    }
    let table = training::multi_run(&rows, &splits, &train, &metrics, a.runs)?;
    let body = serde_json::to_string_pretty(&table)? + "\n";
    fs::write(&a.out, body).map_err(|e| CpdError::io(&a.out, e))?;
    print!("{}", report::render_markdown(&report::rows_from_table(&table)));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let inputs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    let rows = report::load_rows(&inputs)?;
    let body = match a.format {
        Format::Md => report::render_markdown(&rows),
    };
    emit(a.out.as_deref(), &body)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Table(a) => cmd_table(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
