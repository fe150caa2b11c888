use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use synthadapt::adversary::PoolingStrategy;
use synthadapt::config::RunConfig;
use synthadapt::datakit::Split;
use synthadapt::experiments::{self, curve_csv, curve_medians, ToyConfig};
use synthadapt::model::ModelConfig;
use synthadapt::pipeline::{self, GenSynthOptions};
use synthadapt::synthgen::{load_fonts, AugmentConfig, Corpus, Domain};
use synthadapt::trainer::{LambdaKind, TrainMode};

/// Synthetic-to-real writer adaptation for handwritten word recognition.
#[derive(Parser)]
#[command(name = "synthadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic word-image dataset from fonts and a word list.
    Gensynth(GensynthArgs),
    /// Train source-only, adapt without target labels, or fine-tune on labeled target data.
    Train(TrainArgs),
    /// Score one checkpoint, or compare a synthetic and an adapted one.
    Eval(EvalArgs),
    /// Adapt with growing amounts of unlabeled target data and write a CSV.
    Curve(CurveArgs),
    /// Write pooled encoder features as TSV for external plotting.
    ExportEmb(ExportArgs),
    /// Run the built-in toy experiments on system fonts.
    Toy(ToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentPreset {
    Identity,
    Light,
    Heavy,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SourceOnly,
    UnsupAdapt,
    SupAdapt,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SourceOnly => TrainMode::SourceOnly,
            ModeArg::UnsupAdapt => TrainMode::UnsupAdapt,
            ModeArg::SupAdapt => TrainMode::SupAdapt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Cmv,
    Spp,
    Tpp,
    Gru,
}

impl From<PoolingArg> for PoolingStrategy {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Cmv => PoolingStrategy::Cmv,
            PoolingArg::Spp => PoolingStrategy::Spp,
            PoolingArg::Tpp => PoolingStrategy::Tpp,
            PoolingArg::Gru => PoolingStrategy::Gru,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Constant,
    Linear,
    Exponential,
}

impl From<ScheduleArg> for LambdaKind {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Constant => LambdaKind::Constant,
            ScheduleArg::Linear => LambdaKind::Linear,
            ScheduleArg::Exponential => LambdaKind::Exponential,
        }
    }
}

#[derive(Args)]
struct GensynthArgs {
    /// Directory of .ttf/.otf files.
    #[arg(long)]
    fonts: PathBuf,
    /// Word list, one word per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
    /// Canonical image height.
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, value_enum, default_value = "light")]
    augment: AugmentPreset,
    /// TOML file with a full augmentation config; overrides --augment.
    #[arg(long)]
    augment_config: Option<PathBuf>,
    /// Domain tag written into the manifest.
    #[arg(long, value_enum, default_value = "source")]
    domain: DomainArg,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

/// Flags shared by `train` and `curve`; each one overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// Run config TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Model preset: small, vgg19bn-like or toy.
    #[arg(long)]
    model_preset: Option<String>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long, value_enum)]
    lambda_schedule: Option<ScheduleArg>,
    /// Final reversal strength.
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Epochs over which ramped schedules reach their final value.
    #[arg(long)]
    lambda_horizon: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    source_manifest: Option<PathBuf>,
    #[arg(long)]
    target_manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    charset: Option<PathBuf>,
    /// Start from this checkpoint's weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn merged(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(name) = &self.model_preset {
            cfg.model = ModelConfig::preset(name)?;
        }
        let t = &mut cfg.train;
        if let Some(m) = self.mode {
            t.mode = m.into();
        }
        if let Some(p) = self.pooling {
            cfg.model.discriminator.pooling = p.into();
        }
        if let Some(k) = self.lambda_schedule {
            t.lambda.kind = k.into();
        }
        if let Some(v) = self.lambda_max {
            t.lambda.max = v;
        }
        if let Some(v) = self.lambda_horizon {
            t.lambda.horizon = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        let d = &mut cfg.data;
        for (flag, slot) in [
            (&self.source_manifest, &mut d.source_manifest),
            (&self.target_manifest, &mut d.target_manifest),
            (&self.val_manifest, &mut d.val_manifest),
            (&self.charset, &mut d.charset),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if self.init.is_some() {
            cfg.init_checkpoint.clone_from(&self.init);
        }
        if let Some(o) = &self.out {
            cfg.out_dir.clone_from(o);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue a checkpointed run exactly where it stopped.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adapted checkpoint to compare against `--checkpoint`.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Labeled manifest to score on.
    #[arg(long)]
    manifest: PathBuf,
    /// Split to score (default: val if present, else test).
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Include per-writer rows, ranked by improvement when comparing.
    #[arg(long)]
    per_writer: bool,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Target subset sizes.
    #[arg(long, value_delimiter = ',', default_value = "500,1500,3000")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// CSV path (default: <out>/curve.csv).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source_manifest: Option<PathBuf>,
    #[arg(long)]
    target_manifest: Option<PathBuf>,
    /// Pooling to export (default: the checkpoint's).
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long, default_value = "embeddings.tsv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyExperiment {
    /// Source-only versus adapted over several seeds.
    Efficacy,
    /// Adaptation with each pooling strategy.
    Pooling,
    /// Adaptation with growing target sets.
    Curve,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(value_enum)]
    experiment: ToyExperiment,
    /// Toy config TOML; defaults to the built-in protocol.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    adapt_steps: Option<u64>,
    /// Target subset sizes for the curve.
    #[arg(long, value_delimiter = ',', default_value = "500,1500,3000")]
    sizes: Vec<usize>,
    /// Font directory (default: fonts found on this system).
    #[arg(long)]
    fonts: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    out: PathBuf,
}

fn gensynth(a: &GensynthArgs) -> Result<()> {
    let augment = match &a.augment_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| synthadapt::Error::Config(e.to_string()))?
        }
        None => match a.augment {
            AugmentPreset::Identity => AugmentConfig::identity(),
            AugmentPreset::Light => AugmentConfig::light(),
            AugmentPreset::Heavy => AugmentConfig::heavy(),
        },
    };
    let opts = GenSynthOptions {
        n: a.n,
        seed: a.seed,
        height: a.height,
        augment,
        domain: a.domain.into(),
        split: a.split.into(),
    };
    if opts.n == 0 {
        return Err(synthadapt::Error::InvalidArgument("--n must be at least 1".into()).into());
    }
    opts.augment.validate()?;
    let corpus = Corpus::from_file(&a.corpus)?;
    let fonts = load_fonts(&a.fonts)?;
    for w in &fonts.warnings {
        log::warn!("{w}");
    }
    let m = pipeline::gensynth(&corpus, &fonts.fonts, &opts, &a.out)?;
    println!(
        "wrote {} images from {} fonts to {}",
        m.records.len(),
        fonts.fonts.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.run.merged()?;
    let out = pipeline::run_training(&cfg, a.resume.as_deref())?;
    for v in &out.report.validations {
        println!("epoch {:>3} step {:>6}  CER {:6.2}  WER {:6.2}", v.epoch, v.step, v.cer, v.wer);
    }
    println!("{} steps; checkpoint {}", out.steps, out.checkpoint.display());
    if let Some(b) = &out.best {
        println!("best validation weights {}", b.display());
    }
    if cfg.train.mode == TrainMode::UnsupAdapt {
        println!("target label reads: {}", out.target_label_reads);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        bail!("checkpoint {} does not exist", a.checkpoint.display());
    }
    let out = pipeline::evaluate(
        &a.checkpoint,
        a.compare.as_deref(),
        &a.manifest,
        a.split.map(Into::into),
        a.per_writer,
        a.batch_size,
    )?;
    fs::create_dir_all(&a.out)?;
    let (json, table) = match &out.comparison {
        Some((after, cmp)) => (
            serde_json::json!({ "before": out.report, "after": after, "comparison": cmp }),
            cmp.to_table(),
        ),
        None => (serde_json::to_value(&out.report)?, out.report.to_table()),
    };
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&json)?)?;
    fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn curve(a: &CurveArgs) -> Result<()> {
    let mut cfg = a.run.merged()?;
    if a.run.mode.is_none() && a.run.config.is_none() {
        cfg.train.mode = TrainMode::UnsupAdapt;
    }
    let points = pipeline::curve(&cfg, &a.sizes, &a.seeds)?;
    let csv = a.csv.clone().unwrap_or_else(|| cfg.out_dir.join("curve.csv"));
    write_file(&csv, &curve_csv(&points))?;
    for (size, cer) in curve_medians(&points) {
        println!("target {size:>6}: median CER {cer:.2}");
    }
    Ok(())
}

fn export_emb(a: &ExportArgs) -> Result<()> {
    let mut manifests = Vec::new();
    if let Some(p) = &a.source_manifest {
        manifests.push((p.clone(), Domain::Source));
    }
    if let Some(p) = &a.target_manifest {
        manifests.push((p.clone(), Domain::Target));
    }
    if manifests.is_empty() {
        return Err(synthadapt::Error::InvalidArgument("give --source-manifest and/or --target-manifest".into()).into());
    }
    let n = pipeline::export_emb(&a.checkpoint, &manifests, a.pooling.map(Into::into), &a.out)?;
    println!("wrote {n} rows to {}", a.out.display());
    Ok(())
}

fn toy(a: &ToyArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<ToyConfig>(&text).map_err(|e| synthadapt::Error::Config(e.to_string()))?
        }
        None => ToyConfig::default(),
    };
    if let Some(v) = a.pretrain_steps {
        cfg.pretrain_steps = v;
    }
    if let Some(v) = a.adapt_steps {
        cfg.adapt_steps = v;
    }
    if a.seeds.is_empty() {
        return Err(synthadapt::Error::InvalidArgument("--seeds is empty".into()).into());
    }
    let fonts = match &a.fonts {
        Some(dir) => load_fonts(dir)?.fonts,
        None => synthadapt::fonts::discover_fonts(experiments::TOY_ALPHABET)?,
    };
    let data = experiments::build_toy_data(&cfg, &fonts)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("toy_config.toml"), toml::to_string(&cfg)?)?;
    let seeds: &[u64] = match a.experiment {
        ToyExperiment::Pooling => &a.seeds[..1],
        _ => &a.seeds,
    };
    let pre = experiments::pretrain_all(&cfg, &data, seeds)?;
    match a.experiment {
        ToyExperiment::Efficacy => {
            let r = experiments::efficacy(&cfg, &data, &pre)?;
            fs::write(a.out.join("efficacy.json"), serde_json::to_string_pretty(&r)?)?;
            print!("{}", r.to_table());
        }
        ToyExperiment::Pooling => {
            let r = experiments::pooling_ablation(&cfg, &data, &pre[0])?;
            fs::write(a.out.join("pooling.json"), serde_json::to_string_pretty(&r)?)?;
            fs::write(a.out.join("pooling.txt"), r.to_table())?;
            print!("{}", r.to_table());
        }
        ToyExperiment::Curve => {
            let points = experiments::data_curve(&cfg, &data, &pre, &a.sizes)?;
            fs::write(a.out.join("curve.csv"), curve_csv(&points))?;
            for (size, cer) in curve_medians(&points) {
                println!("target {size:>6}: median CER {cer:.2}");
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// 1 for bad input or configuration, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<synthadapt::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gensynth(a) => gensynth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Curve(a) => curve(a),
        Command::ExportEmb(a) => export_emb(a),
        Command::Toy(a) => toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
