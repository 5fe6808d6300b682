use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use csgo_core::cas::extractor_by_name;
use csgo_core::config::{RunConfig, SEED_ENV};
use csgo_core::eval::{ablation_sweep, evaluate, Axis, EvalOptions, ModelStylizer, Stylizer, SweepModels, SweepSpec};
use csgo_core::inference::{generate, GenerationRequest, Mode};
use csgo_core::model::checkpoint;
use csgo_core::pipeline::manifest::{load_samples, manifest_root};
use csgo_core::pipeline::{
    build_dataset, read_manifest, AdapterGenerator, BuildOptions, CandidateGenerator, NamedImage, SyntheticGenerator,
    TemplateCaptioner,
};
use csgo_core::training::{train, TrainOutputs};
use csgo_core::{CsgoModel, Error, Image};

#[derive(Parser, Debug)]
#[command(name = "csgo", version, about = "Content/style decoupled diffusion toolkit")]
struct Cli {
    /// TOML run configuration; missing sections take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config file seed and CSGO_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a triplet manifest from content and style image directories.
    BuildDataset(BuildArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Generate one image.
    Generate(GenerateArgs),
    /// Score a checkpoint on a manifest.
    Evaluate(EvalArgs),
    /// Sweep one injection knob.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    contents: PathBuf,
    #[arg(long)]
    styles: PathBuf,
    /// Manifest path; images are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["synthetic", "adapter"])]
    generator: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Base model for the adapter generator (fresh model when absent).
    #[arg(long)]
    base_ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_parser = ["transfer", "text", "edit"])]
    mode: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// One checkpoint, or one per value for n_style_tokens.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit code: 2 for usage or configuration problems,
/// 1 for everything that goes wrong while running.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Manifest { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} directory {} does not exist", path.display())))
    }
}

fn parent_or_dot(path: &Path) -> PathBuf {
    manifest_root(path)
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            require_file(path, "config file")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(cli.seed, env.as_deref())?;
    Ok(cfg)
}

fn cmd_build(mut cfg: RunConfig, args: &BuildArgs) -> CmdResult {
    require_dir(&args.contents, "contents")?;
    require_dir(&args.styles, "styles")?;
    if let Some(g) = &args.generator {
        cfg.pipeline.generator = g.clone();
    }
    if let Some(n) = args.n {
        cfg.pipeline.n = n;
    }
    if let Some(w) = args.workers {
        cfg.pipeline.workers = w;
    }
    cfg.validate()?;
    let seed = cfg.seed.unwrap_or_default();
    let contents = NamedImage::load_dir(&args.contents)?;
    let styles = NamedImage::load_dir(&args.styles)?;
    if contents.is_empty() || styles.is_empty() {
        return Err(usage("contents and styles directories must each hold at least one PNG"));
    }
    let schedule = cfg.schedule.build()?;
    let generator: Box<dyn CandidateGenerator> = match cfg.pipeline.generator.as_str() {
        "synthetic" => Box::new(SyntheticGenerator::default()),
        "adapter" => {
            let base = match &args.base_ckpt {
                Some(p) => {
                    require_file(p, "base checkpoint")?;
                    checkpoint::load(p, &Device::Cpu)?.0
                }
                None => CsgoModel::new(cfg.model.clone(), seed, DType::F32, &Device::Cpu)?,
            };
            Box::new(AdapterGenerator::new(base, cfg.pipeline.adapter.clone(), schedule))
        }
        other => return Err(usage(format!("unknown generator {other:?}"))),
    };
    let extractor = extractor_by_name(&cfg.pipeline.extractor, cfg.eval.extractor_seed)?;
    let out_dir = parent_or_dot(&args.out);
    let captioner = TemplateCaptioner(cfg.pipeline.caption.clone());
    let outcome = build_dataset(
        &contents,
        &styles,
        generator.as_ref(),
        extractor.as_ref(),
        &BuildOptions {
            n: cfg.pipeline.n,
            seed,
            workers: cfg.pipeline.workers,
            out_dir: &out_dir,
            captioner: &captioner,
        },
    )?;
    let written = out_dir.join("manifest.jsonl");
    if written != args.out {
        std::fs::rename(&written, &args.out).map_err(|e| Error::io(&args.out, e))?;
    }
    cfg.write_resolved(&out_dir)?;
    println!(
        "wrote {} triplets to {} ({} skipped)",
        outcome.manifest.len(),
        args.out.display(),
        outcome.skips.len()
    );
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, args: &TrainArgs) -> CmdResult {
    require_file(&args.manifest, "manifest")?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let manifest = read_manifest(&args.manifest)?;
    if manifest.is_empty() {
        return Err(usage(format!("manifest {} has no triplets", args.manifest.display())));
    }
    let data = load_samples(&manifest, &manifest_root(&args.manifest))?;
    let seed = cfg.seed.unwrap_or_default();
    let model = CsgoModel::new(cfg.model.clone(), seed, DType::F32, &Device::Cpu)?;
    let schedule = cfg.schedule.build()?;
    let stem = args.out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let loss_csv = args.out.with_file_name(format!("{stem}_loss.csv"));
    let report = train(
        &model,
        &data,
        &schedule,
        &cfg.train,
        &TrainOutputs {
            checkpoint: Some(args.out.clone()),
            loss_csv: Some(loss_csv.clone()),
        },
    )?;
    cfg.write_resolved(parent_or_dot(&args.out))?;
    match (report.losses.first(), report.losses.last()) {
        (Some(a), Some(b)) => println!(
            "trained {} steps: loss {a:.5} -> {b:.5}; checkpoint {}, losses {}",
            report.losses.len(),
            args.out.display(),
            loss_csv.display()
        ),
        _ => println!("no steps run; wrote initial checkpoint {}", args.out.display()),
    }
    Ok(())
}

fn cmd_generate(mut cfg: RunConfig, args: &GenerateArgs) -> CmdResult {
    let mode: Mode = args.mode.parse()?;
    match (mode, &args.content) {
        (Mode::TextDriven, Some(_)) => return Err(usage("--content is not allowed with --mode text")),
        (Mode::Transfer | Mode::TextEdit, None) => {
            return Err(usage(format!("--mode {} requires --content", args.mode)))
        }
        _ => {}
    }
    require_file(&args.ckpt, "checkpoint")?;
    require_file(&args.style, "style image")?;
    if let Some(c) = &args.content {
        require_file(c, "content image")?;
    }
    if let Some(s) = args.steps {
        cfg.inference.steps = s;
    }
    cfg.validate()?;
    let (model, _) = checkpoint::load(&args.ckpt, &Device::Cpu)?;
    cfg.inference.injection.n_style_tokens = model.config().n_style_tokens;
    let request = GenerationRequest {
        mode,
        content: args.content.as_ref().map(Image::load).transpose()?,
        style: Image::load(&args.style)?,
        prompt: args.prompt.clone().unwrap_or_else(|| cfg.pipeline.caption.clone()),
        config: cfg.inference,
        seed: cfg.seed.unwrap_or_default(),
    };
    let image = generate(&model, &cfg.schedule.build()?, &request)?;
    image.save(&args.out)?;
    cfg.write_resolved(parent_or_dot(&args.out))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_eval_manifest(path: &Path) -> Result<csgo_core::pipeline::DatasetManifest, Failure> {
    require_file(path, "manifest")?;
    let manifest = read_manifest(path)?;
    if manifest.is_empty() {
        return Err(usage(format!("manifest {} has no triplets", path.display())));
    }
    Ok(manifest)
}

fn cmd_evaluate(cfg: RunConfig, args: &EvalArgs) -> CmdResult {
    require_file(&args.ckpt, "checkpoint")?;
    let manifest = load_eval_manifest(&args.manifest)?;
    let (model, _) = checkpoint::load(&args.ckpt, &Device::Cpu)?;
    let schedule = cfg.schedule.build()?;
    let extractor = extractor_by_name(&cfg.eval.extractor, cfg.eval.extractor_seed)?;
    let mut config = cfg.inference;
    config.injection.n_style_tokens = model.config().n_style_tokens;
    let root = manifest_root(&args.manifest);
    let options = EvalOptions {
        config,
        seed: cfg.seed.unwrap_or_default(),
        extractor: extractor.as_ref(),
        root: &root,
        out_dir: Some(&args.out),
        tag: "eval_".into(),
        checkpoint: args.ckpt.display().to_string(),
    };
    let stylizer = ModelStylizer {
        model: &model,
        schedule: &schedule,
    };
    let report = evaluate(&stylizer, &manifest, &options)?;
    report.write_json(args.out.join("report.json"))?;
    report.write_csv(args.out.join("rows.csv"))?;
    cfg.write_resolved(&args.out)?;
    println!(
        "mean cas {:.6}, mean style distance {:.6}, {} failed",
        report.mean_cas, report.mean_style_distance, report.failed
    );
    Ok(())
}

fn cmd_ablate(cfg: RunConfig, args: &AblateArgs) -> CmdResult {
    let axis: Axis = args.axis.parse()?;
    for c in &args.ckpt {
        require_file(c, "checkpoint")?;
    }
    let manifest = load_eval_manifest(&args.manifest)?;
    let spec = SweepSpec {
        axis,
        values: args.values.clone(),
    };
    spec.validate()?;
    if args.ckpt.len() != 1 && args.ckpt.len() != spec.values.len() {
        return Err(usage("pass one --ckpt, or one per sweep value"));
    }
    let models = args
        .ckpt
        .iter()
        .map(|c| Ok(checkpoint::load(c, &Device::Cpu)?.0))
        .collect::<Result<Vec<_>, Failure>>()?;
    let schedule = cfg.schedule.build()?;
    let stylizers: Vec<ModelStylizer> = models
        .iter()
        .map(|m| ModelStylizer {
            model: m,
            schedule: &schedule,
        })
        .collect();
    let mut config = cfg.inference;
    config.injection.n_style_tokens = models[0].config().n_style_tokens;
    let sweep_models = if stylizers.len() == 1 {
        SweepModels::Shared(&stylizers[0])
    } else {
        SweepModels::PerValue(stylizers.iter().map(|s| s as &dyn Stylizer).collect())
    };
    let extractor = extractor_by_name(&cfg.eval.extractor, cfg.eval.extractor_seed)?;
    let root = manifest_root(&args.manifest);
    let options = EvalOptions {
        config,
        seed: cfg.seed.unwrap_or_default(),
        extractor: extractor.as_ref(),
        root: &root,
        out_dir: Some(&args.out),
        tag: String::new(),
        checkpoint: args
            .ckpt
            .iter()
            .map(|c| c.display().to_string())
            .collect::<Vec<_>>()
            .join(","),
    };
    let table = ablation_sweep(&sweep_models, &spec, &manifest, &options)?;
    cfg.write_resolved(&args.out)?;
    for e in &table.entries {
        match &e.report {
            Some(r) => println!(
                "{}={}: mean cas {:.6}, mean style distance {:.6}",
                axis.name(),
                e.value,
                r.mean_cas,
                r.mean_style_distance
            ),
            None => println!(
                "{}={}: failed: {}",
                axis.name(),
                e.value,
                e.error.as_deref().unwrap_or("")
            ),
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::BuildDataset(a) => cmd_build(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Generate(a) => cmd_generate(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::Ablate(a) => cmd_ablate(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
