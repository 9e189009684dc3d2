use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scoreguide_core::backbone::ArchitectureConfig;
use scoreguide_core::color::{encode_png, load_png, save_png, LabPixel};
use scoreguide_core::engine::{default_model_path, EnhanceRequest, Engine, LabelChoice, ScorePolicy, MODEL_ENV};
use scoreguide_core::lut::cube::write_cube;
use scoreguide_core::mos::{process, RatingTable};
use scoreguide_core::skintone::{kmeans, mean_skin_color, silhouette, Provenance, SkinMask, SkinToneCenters};
use scoreguide_core::trainer::synthetic::{portrait, score_for_shift, B_SHIFTS};
use scoreguide_core::trainer::{
    build_dataset, finetune, load_manifest, synth_perturb, train, write_loss_csv, EpochLog, LabDelta, ModelCheckpoint,
    PerturbMode, TrainConfig, TrainOutcome,
};
use scoreguide_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "scoreguide", version, about = "Quality-score guided LUT color enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized (identity) checkpoint.
    Init(InitArgs),
    /// Train a model from a dataset manifest.
    Train(TrainArgs),
    /// Continue training an existing model on a new manifest.
    Finetune(FinetuneArgs),
    /// Enhance a PNG at one or more quality scores.
    Enhance(EnhanceArgs),
    /// Export the fused 3D LUT predicted for an image as a cube file.
    ExportCube(ExportCubeArgs),
    /// Screen a ratings table and compute normalized MOS.
    Mos(MosArgs),
    /// Cluster mean skin colors into skin-tone centers.
    Cluster(ClusterArgs),
    /// Apply a Lab perturbation to a PNG.
    Perturb(PerturbArgs),
    /// Generate the synthetic portrait fixture with a training manifest.
    Synth(SynthArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ArchArgs {
    /// Backbone input resolution.
    #[arg(long, default_value_t = 256)]
    input_size: usize,
    /// Drop the skin-tone label input.
    #[arg(long)]
    no_label: bool,
    /// Drop the 1D LUT stage.
    #[arg(long)]
    no_1d: bool,
    #[arg(long, default_value_t = 33)]
    lut3d_dim: usize,
    #[arg(long, default_value_t = 33)]
    lut1d_size: usize,
}

impl ArchArgs {
    fn config(&self) -> ArchitectureConfig {
        ArchitectureConfig {
            input_size: self.input_size,
            use_label: !self.no_label,
            use_1d_luts: !self.no_1d,
            lut3d_dim: self.lut3d_dim,
            lut1d_size: self.lut1d_size,
            ..ArchitectureConfig::default()
        }
    }
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    arch: ArchArgs,
    /// Skin-tone centers to store in the checkpoint (default: built-in reference set).
    #[arg(long)]
    centers: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// CSV with `raw_path,target_path,score,label,mask_path`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skin-tone centers for rows without a label (default: built-in reference set).
    #[arg(long)]
    centers: Option<PathBuf>,
    /// Per-epoch loss CSV.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// JSON training config; command-line flags still override epochs, lr and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct ModelInput {
    /// Checkpoint path; falls back to the SCOREGUIDE_MODEL environment variable.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    /// `auto`, `none` or a group number 1..10.
    #[arg(long, default_value = "auto")]
    label: String,
    /// Skin mask PNG for `--label auto` (default: central crop).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Centers file overriding those stored in the checkpoint.
    #[arg(long)]
    centers: Option<PathBuf>,
}

impl ModelInput {
    fn engine(&self) -> Result<Engine> {
        let path = self
            .model
            .clone()
            .or_else(default_model_path)
            .with_context(|| format!("no model given; pass --model or set {MODEL_ENV}"))?;
        let ck = ModelCheckpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let mut engine = Engine::new(ck);
        if let Some(c) = &self.centers {
            engine = engine.with_centers(SkinToneCenters::load(c)?);
        }
        Ok(engine)
    }

    fn label(&self) -> Result<LabelChoice> {
        Ok(match self.label.to_ascii_lowercase().as_str() {
            "auto" => LabelChoice::Auto { mask: self.mask.as_ref().map(SkinMask::load_png).transpose()? },
            "none" => LabelChoice::Absent,
            n => LabelChoice::Fixed(n.parse().with_context(|| format!("invalid label {n:?}"))?),
        })
    }
}

#[derive(Args)]
struct EnhanceArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true, conflicts_with = "scores")]
    score: Option<f64>,
    /// Comma-separated scores for multi-round enhancement, e.g. `1,1`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    scores: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    /// Fail on scores outside [-1, 1] instead of warning.
    #[arg(long)]
    strict_range: bool,
}

#[derive(Args)]
struct ExportCubeArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, allow_hyphen_values = true)]
    score: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MosArgs {
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Images contributing one mean skin color each.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Masks matching `--images` one to one (default: central crop).
    #[arg(long, num_args = 1..)]
    masks: Vec<PathBuf>,
    /// CSV of precomputed Lab points with header `L,a,b`.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Skin,
    Natural,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "skin")]
    mode: ModeArg,
    /// Seed for a random delta when `--delta` is not given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Explicit `L,a,b` delta.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    delta: Option<Vec<f64>>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value = "ratings.csv")]
    ratings: PathBuf,
    /// Save each fine-tuned checkpoint here.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    centers: Option<PathBuf>,
    #[arg(long, default_value_t = scoreguide_service::DEFAULT_MAX_UPLOAD)]
    max_upload: usize,
    #[arg(long, default_value_t = 10)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn centers_or_reference(path: Option<&PathBuf>) -> Result<SkinToneCenters> {
    Ok(match path {
        Some(p) => SkinToneCenters::load(p).with_context(|| format!("loading centers {}", p.display()))?,
        None => SkinToneCenters::monk(),
    })
}

fn progress(log: &EpochLog, _: &ModelCheckpoint) -> ControlFlow<()> {
    log::info!(
        "epoch {}: total {:.6e} recon {:.6e} smooth {:.4e} mono {:.4e}",
        log.epoch,
        log.loss.total,
        log.loss.recon,
        log.loss.smooth,
        log.loss.mono
    );
    ControlFlow::Continue(())
}

fn finish_training(outcome: TrainOutcome, out: &Path, loss_log: Option<&PathBuf>) -> Result<()> {
    outcome.checkpoint.save(out)?;
    if let Some(p) = loss_log {
        write_loss_csv(&outcome.curve, BufWriter::new(File::create(p)?))?;
    }
    let first = outcome.curve.first().map(|l| l.loss.total);
    let last = outcome.curve.last().map(|l| l.loss.total);
    println!("{}", json!({ "checkpoint": out, "epochs": outcome.curve.len() - 1, "initial_loss": first, "final_loss": last }));
    Ok(())
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let mut ck = ModelCheckpoint::init(&a.arch.config(), a.seed)?;
    ck.centers = Some(centers_or_reference(a.centers.as_ref())?);
    ck.save(&a.out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_reader(File::open(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig { arch: a.arch.config(), ..TrainConfig::default() },
    };
    cfg.epochs = a.epochs;
    cfg.lr = a.lr;
    cfg.seed = a.seed;
    let centers = centers_or_reference(a.centers.as_ref())?;
    let pairs = load_manifest(&a.manifest)?;
    let dataset = build_dataset(&pairs, &cfg, Some(&centers))?;
    log::info!("training on {} samples for {} epochs", dataset.len(), cfg.epochs);
    let mut outcome = train(&dataset, &cfg, &mut progress)?;
    outcome.checkpoint.centers = Some(centers);
    finish_training(outcome, &a.out, a.loss_log.as_ref())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let base = ModelCheckpoint::load(&a.model)?;
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, arch: base.arch().clone(), ..TrainConfig::default() };
    let centers = base.centers.clone().unwrap_or_else(SkinToneCenters::monk);
    let pairs = load_manifest(&a.manifest)?;
    let dataset = build_dataset(&pairs, &cfg, Some(&centers))?;
    let outcome = finetune(&base, &dataset, &cfg, &mut progress)?;
    finish_training(outcome, &a.out, a.loss_log.as_ref())
}

fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    let policy = if a.strict_range { ScorePolicy::Reject } else { ScorePolicy::Warn };
    let engine = a.input.engine()?.with_policy(policy);
    let image = load_png(&a.input.input)?;
    let label = a.input.label()?;
    let out = match (a.score, a.scores.is_empty()) {
        (Some(s), true) => engine.enhance(&image, &EnhanceRequest { score: s, label, rounds: a.rounds })?,
        (None, false) => {
            if a.rounds != 1 {
                bail!("--rounds cannot be combined with --scores");
            }
            engine.enhance_multi_round(&image, &a.scores, &label)?
        }
        _ => bail!("pass either --score or --scores"),
    };
    std::fs::write(&a.out, encode_png(&out)?)?;
    Ok(())
}

fn cmd_export_cube(a: ExportCubeArgs) -> Result<()> {
    let engine = a.input.engine()?;
    let image = load_png(&a.input.input)?;
    let label = engine.resolve_label(&image, &a.input.label()?)?;
    let t = engine.checkpoint().transform(&image, a.score, label, true)?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    write_cube(&mut out, &t.lut3d, &format!("score {}", a.score))?;
    if t.luts.is_some() {
        log::warn!("the model's 1D Lab stage is not representable in a cube file and was left out");
    }
    Ok(())
}

fn cmd_mos(a: MosArgs) -> Result<()> {
    let table = RatingTable::load_csv(&a.ratings)?;
    let mos = process(&table)?;
    mos.write_csv(BufWriter::new(File::create(&a.out)?))?;
    if let Some(p) = &a.report {
        mos.report.write_json(BufWriter::new(File::create(p)?))?;
    }
    println!(
        "{}",
        json!({
            "images": mos.entries.len(),
            "rejected_subjects": mos.report.rejected_subjects,
            "removed_fraction": mos.report.removed_fraction(),
        })
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct PointRow {
    #[serde(rename = "L")]
    l: f64,
    a: f64,
    b: f64,
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    if !a.masks.is_empty() && a.masks.len() != a.images.len() {
        bail!("--masks must match --images one to one ({} vs {})", a.masks.len(), a.images.len());
    }
    let mut points = Vec::new();
    for (i, path) in a.images.iter().enumerate() {
        let img = load_png(path).with_context(|| format!("loading {}", path.display()))?;
        let mask = match a.masks.get(i) {
            Some(m) => SkinMask::load_png(m)?,
            None => SkinMask::central(img.width(), img.height()),
        };
        points.push(mean_skin_color(&img, &mask)?);
    }
    if let Some(p) = &a.points {
        for row in csv::Reader::from_path(p)?.deserialize::<PointRow>() {
            let row = row?;
            points.push(LabPixel::new(row.l, row.a, row.b));
        }
    }
    let result = kmeans(&points, a.k, a.seed)?;
    let score = silhouette(&points, &result.assignments)?;
    SkinToneCenters::new(result.centers, Provenance::Clustered)?.save(&a.out)?;
    println!("{}", json!({ "points": points.len(), "k": a.k, "iterations": result.iterations, "silhouette": score }));
    Ok(())
}

fn cmd_perturb(a: PerturbArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Skin => PerturbMode::SkinTone,
        ModeArg::Natural => PerturbMode::Natural,
    };
    let delta = match a.delta.as_deref() {
        Some([l, da, db]) => LabDelta { l: *l, a: *da, b: *db },
        Some(_) => bail!("--delta needs three values L,a,b"),
        None => LabDelta::seeded(a.seed, mode),
    };
    let img = load_png(&a.input)?;
    save_png(&synth_perturb(&img, delta, mode)?, &a.out)?;
    println!("{}", serde_json::to_string(&delta)?);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = csv::Writer::from_path(a.out.join("manifest.csv"))?;
    manifest.write_record(["raw_path", "target_path", "score", "label", "mask_path"])?;
    SkinMask::central(a.size, a.size).save_png(a.out.join("mask.png"))?;
    for i in 0..a.count {
        let skin_l = 35.0 + 40.0 * i as f64 / a.count.max(2).saturating_sub(1) as f64;
        let raw = Arc::new(portrait(a.seed.wrapping_add(i as u64), a.size, skin_l));
        let raw_name = format!("raw_{i}.png");
        save_png(&raw, a.out.join(&raw_name))?;
        for db in B_SHIFTS {
            let target = synth_perturb(&raw, LabDelta { l: 0.0, a: 0.0, b: db }, PerturbMode::SkinTone)?;
            let name = format!("target_{i}_b{db:+}.png");
            save_png(&target, a.out.join(&name))?;
            manifest.write_record([raw_name.as_str(), &name, &score_for_shift(db).to_string(), "", "mask.png"])?;
        }
    }
    manifest.flush()?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let ck = ModelCheckpoint::load(&a.model)?;
    let mut engine = Engine::new(ck);
    if let Some(c) = &a.centers {
        engine = engine.with_centers(SkinToneCenters::load(c)?);
    }
    let mut config = ServiceConfig::new(a.ratings);
    config.checkpoint_out = a.checkpoint_out;
    config.max_upload_bytes = a.max_upload;
    config.finetune_epochs = a.finetune_epochs;
    config.seed = a.seed;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("invalid --host/--port")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(scoreguide_service::serve(AppState::new(engine, config), addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::ExportCube(a) => cmd_export_cube(a),
        Command::Mos(a) => cmd_mos(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": chain.join(": ") }));
            ExitCode::FAILURE
        }
    }
}
