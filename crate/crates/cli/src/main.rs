//! `ps2kit` command-line entry point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ps2kit::datasets::{self, ObjectCapture};
use ps2kit::evaluation;
use ps2kit::imaging::{self, NormalMap};
use ps2kit::lightspace::LightBin;
use ps2kit::model::{self, Checkpoint, Model};
use ps2kit::neural::{AblationConfig, Mode, ModelConfig, PairInputs};
use ps2kit::photometry::{self, Material, SyntheticScene};
use ps2kit::trainer::{Monitor, TrainConfig, Trainer};
use serde::Serialize;
use sha2::{Digest, Sha256};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "ps2kit", version, about = "Two-image photometric stereo toolkit", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square working resolution; data are cropped and resampled to it.
    #[arg(long)]
    res: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` file of defaults for the long flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
enum Shape {
    Sphere,
    Heightfield,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
enum ModeArg {
    Selfsup,
    Frontal,
    Supervised,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Selfsup => Mode::SelfSupervised,
            ModeArg::Frontal => Mode::Frontal,
            ModeArg::Supervised => Mode::Supervised,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Shape::Sphere)]
    shape: Shape,
    /// Specular strength.
    #[arg(long, default_value_t = 0.0)]
    ks: f64,
    #[arg(long, default_value_t = 20.0)]
    shininess: f64,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Object directories (DiLiGenT layout or rendered scenes).
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_iters: Option<u64>,
    #[arg(long)]
    iters_per_epoch: Option<u64>,
    /// Images per object labelled by the least-squares oracle for warm-up.
    #[arg(long)]
    warmup_samples: Option<usize>,
    /// Keep the illumination module fixed after warm-up.
    #[arg(long)]
    freeze_illumination: bool,
    /// Divide every layer width by this.
    #[arg(long, default_value_t = 1)]
    width_div: usize,
    /// Dropout rate in the illumination classifier heads.
    #[arg(long)]
    dropout: Option<f64>,
    /// Disable lighting estimation.
    #[arg(long)]
    no_le: bool,
    /// Disable albedo refinement.
    #[arg(long)]
    no_ar: bool,
    /// Disable the positional encoding of specular cues.
    #[arg(long)]
    no_pe: bool,
    /// Disable the relighting branch.
    #[arg(long)]
    no_ir: bool,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Selfsup)]
    mode: ModeArg,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pairs: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    first: PathBuf,
    #[arg(long)]
    second: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct RelightArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Target light bin as elevation index then azimuth index.
    #[arg(long, num_args = 2, value_names = ["R", "C"], value_parser = clap::value_parser!(u8).range(0..=4), required = true)]
    target_bin: Vec<u8>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene under every bin-centre light.
    RenderSynth(RenderArgs),
    /// Run only the oracle-supervised warm-up phase.
    Warmup(TrainArgs),
    /// Train the full pipeline.
    Train(TrainArgs),
    /// Score a checkpoint and write report.json with panels.
    Eval(EvalArgs),
    /// Estimate normals and albedo for one image pair.
    Infer(InferArgs),
    /// Relight an image to a target bin centre.
    Relight(RelightArgs),
}

enum Failure {
    Usage(String),
    Runtime(ps2kit::Error),
}

impl From<ps2kit::Error> for Failure {
    fn from(e: ps2kit::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

/// Parse a flat `key = value` file. Blank lines and `#` comments are skipped.
fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), k + 1))?;
        out.push((key.trim().replace('_', "-"), value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).map(PathBuf::from)
        } else {
            a.strip_prefix("--config=").map(PathBuf::from)
        }
    })
}

/// Config-file entries become flags placed before the command-line flags so
/// the latter win.
fn expand_args(args: Vec<String>, entries: &[(String, String)]) -> Vec<String> {
    if args.len() < 2 || entries.is_empty() {
        return args;
    }
    let mut out = vec![args[0].clone(), args[1].clone()];
    for (k, v) in entries {
        match v.as_str() {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.extend(v.split_whitespace().map(str::to_owned));
            }
        }
    }
    out.extend(args.into_iter().skip(2));
    out
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    deterministic: bool,
    args: &'a A,
    resolved: serde_json::Value,
    config_file: Option<BTreeMap<String, String>>,
    inputs: BTreeMap<String, String>,
}

fn hash_file(path: &Path) -> Result<String, ps2kit::Error> {
    Ok(hex::encode(Sha256::digest(imaging::read_bytes(path)?)))
}

/// Hashes of files, descending one level into directories.
fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>, ps2kit::Error> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| ps2kit::Error::io(*p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file())
                .collect();
            entries.sort();
            for e in entries {
                out.insert(e.display().to_string(), hash_file(&e)?);
            }
        } else {
            out.insert(p.display().to_string(), hash_file(p)?);
        }
    }
    Ok(out)
}

fn write_manifest<A: Serialize>(
    command: &str,
    common: &Common,
    args: &A,
    resolved: serde_json::Value,
    inputs: &[&Path],
) -> CmdResult {
    std::fs::create_dir_all(&common.out).map_err(|e| ps2kit::Error::io(&common.out, e))?;
    let config_file = match &common.config {
        Some(p) => Some(read_config_file(p).map_err(Failure::Usage)?.into_iter().collect()),
        None => None,
    };
    let manifest = Manifest {
        tool: "ps2kit",
        version: VERSION,
        command,
        seed: common.seed,
        deterministic: std::env::var("PS2KIT_DETERMINISTIC").is_ok_and(|v| v == "1"),
        args,
        resolved,
        config_file,
        inputs: hash_inputs(inputs)?,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(ps2kit::Error::from)?;
    imaging::write_bytes(&common.out.join("manifest.json"), json.as_bytes())?;
    Ok(())
}

fn load_captures(dirs: &[PathBuf], res: Option<usize>) -> Result<Vec<ObjectCapture>, ps2kit::Error> {
    dirs.iter()
        .map(|d| {
            let c = datasets::load_any(d)?;
            match res {
                Some(r) => datasets::resize_capture(&c, r),
                None => Ok(c),
            }
        })
        .collect()
}

fn cmd_render(a: &RenderArgs) -> CmdResult {
    let res = a.common.res.unwrap_or(64);
    let material = Material { specular: a.ks, shininess: a.shininess, noise: a.noise };
    if let Err(e) = material.validate() {
        return Err(Failure::Usage(e.to_string()));
    }
    if res < 2 {
        return Err(Failure::Usage(format!("--res must be at least 2, got {res}")));
    }
    let resolved = serde_json::json!({ "res": res, "material": material });
    write_manifest("render-synth", &a.common, a, resolved, &[])?;
    let scene = match a.shape {
        Shape::Sphere => SyntheticScene::sphere(res, material, a.common.seed)?,
        Shape::Heightfield => SyntheticScene::heightfield(res, material, a.common.seed)?,
    };
    let renders = photometry::render_bin_centers(&scene, &Default::default(), a.common.seed)?;
    photometry::save_scene(&a.common.out, &scene, &renders)?;
    println!("wrote {} images to {}", renders.len(), a.common.out.display());
    Ok(())
}

fn train_setup(a: &TrainArgs) -> Result<(TrainConfig, ModelConfig, AblationConfig), Failure> {
    let mut cfg = TrainConfig { seed: a.common.seed, ..Default::default() };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.warmup_iters {
        cfg.warmup_iters = v;
    }
    if let Some(v) = a.warmup_samples {
        cfg.warmup_samples = v;
    }
    cfg.iters_per_epoch = a.iters_per_epoch;
    cfg.freeze_illumination = a.freeze_illumination;
    let abl = AblationConfig {
        lighting: !a.no_le,
        refinement: !a.no_ar,
        encoding: !a.no_pe && !a.no_ar,
        relighting: !a.no_ir,
        mode: a.mode.into(),
        warmup: !a.no_warmup,
    };
    abl.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut mc = ModelConfig { width_div: a.width_div, ..Default::default() };
    if let Some(p) = a.dropout {
        mc.dropout = p;
    }
    mc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((cfg, mc, abl))
}

fn cmd_train(a: &TrainArgs, warmup_only: bool) -> CmdResult {
    let (mut cfg, mc, abl) = train_setup(a)?;
    if warmup_only && !abl.warmup {
        return Err(Failure::Usage("warmup cannot be combined with --no-warmup".into()));
    }
    let resolved = serde_json::json!({ "train": cfg, "model": mc, "ablation": abl });
    let mut inputs: Vec<&Path> = a.data.iter().map(PathBuf::as_path).collect();
    if let Some(r) = &a.resume {
        inputs.push(r);
    }
    write_manifest(if warmup_only { "warmup" } else { "train" }, &a.common, a, resolved, &inputs)?;
    let captures = load_captures(&a.data, a.common.res)?;
    let total = cfg.total_iterations(captures.len());
    if warmup_only && cfg.warmup_iters > total {
        cfg.iters_per_epoch = Some(cfg.warmup_iters.div_ceil(cfg.epochs as u64));
    } else if a.warmup_iters.is_none() && cfg.warmup_iters > total {
        cfg.warmup_iters = total / 5;
        eprintln!("note: default warm-up exceeds the {total}-iteration schedule; using {} warm-up iterations", cfg.warmup_iters);
    }
    cfg.validate(abl.warmup, captures.len()).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg, Checkpoint::load(p)?, &captures)?,
        None => Trainer::new(cfg, Model::new(mc, abl, a.common.seed)?, &captures)?,
    };
    let monitor = Monitor { captures: captures.clone(), every: trainer.iters_per_epoch(), seed: a.common.seed };
    if warmup_only {
        let path = a.common.out.join("metrics.jsonl");
        let mut log = String::new();
        while trainer.in_warmup() {
            let rec = trainer.step()?;
            log.push_str(&serde_json::to_string(&rec).map_err(ps2kit::Error::from)?);
            log.push('\n');
        }
        imaging::write_bytes(&path, log.as_bytes())?;
        let ckpt = a.common.out.join("warmup.ckpt");
        trainer.checkpoint()?.save(&ckpt)?;
        println!("warm-up finished after {} iterations; wrote {}", trainer.state.iteration, ckpt.display());
        return Ok(());
    }
    let records = trainer.run(Some(&a.common.out), Some(&monitor))?;
    if let Some(last) = records.last() {
        println!("trained {} iterations, final loss {:.5}", last.iter + 1, last.loss_total);
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    if a.pairs == 0 {
        return Err(Failure::Usage("--pairs must be positive".into()));
    }
    let mut inputs: Vec<&Path> = a.data.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.checkpoint);
    let resolved = serde_json::json!({ "pairs": a.pairs, "seed": a.common.seed, "res": a.common.res });
    write_manifest("eval", &a.common, a, resolved.clone(), &inputs)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let captures = load_captures(&a.data, a.common.res)?;
    let config = serde_json::json!({
        "model": ckpt.model.config,
        "ablation": ckpt.model.ablation,
        "eval": resolved,
    });
    let reports = evaluation::emit_report(&ckpt.model, &captures, a.pairs, a.common.seed, config, &a.common.out)?;
    for r in reports {
        let mae = r.mae_mean.map_or("n/a".into(), |m| format!("{m:.2}"));
        println!("{}: mae {mae} ssim_recon {:.3}", r.object, r.ssim_recon);
    }
    Ok(())
}

fn load_image_input(path: &Path, res: Option<usize>) -> Result<imaging::Image, ps2kit::Error> {
    let img = imaging::read_rgb(path)?;
    match res {
        Some(r) if r != img.width || r != img.height => {
            Err(ps2kit::Error::Shape(format!("{} is {}x{}, expected {r}x{r}", path.display(), img.width, img.height)))
        }
        _ => Ok(img),
    }
}

fn cmd_infer(a: &InferArgs) -> CmdResult {
    let inputs: Vec<&Path> = vec![&a.checkpoint, &a.first, &a.second, &a.mask];
    write_manifest("infer", &a.common, a, serde_json::Value::Null, &inputs)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (i1, i2) = (load_image_input(&a.first, a.common.res)?, load_image_input(&a.second, a.common.res)?);
    let mask = imaging::read_mask(&a.mask)?;
    let pred = ckpt.model.predict(&PairInputs {
        first: model::stack_images(&[&i1])?,
        second: model::stack_images(&[&i2])?,
        mask: model::stack_masks(&[&mask])?,
    })?;
    let normals: NormalMap = evaluation::normals_from_tensor(&pred.normals, 0);
    let out = &a.common.out;
    imaging::write_normal_png16(&out.join("normals.png"), &normals)?;
    imaging::write_bytes(&out.join("normals.f32"), &normals.to_f32_bytes())?;
    imaging::write_rgb16(&out.join("albedo_1.png"), &model::unstack(&pred.albedo, 0))?;
    imaging::write_rgb16(&out.join("albedo_2.png"), &model::unstack(&pred.albedo, 1))?;
    if let Some(bins) = &pred.bins {
        let json = serde_json::json!({ "first": bins[0], "second": bins[1] });
        imaging::write_bytes(&out.join("lights.json"), json.to_string().as_bytes())?;
    }
    println!("wrote normals and albedo to {}", out.display());
    Ok(())
}

fn cmd_relight(a: &RelightArgs) -> CmdResult {
    let bin = LightBin { el_idx: a.target_bin[0] as usize, az_idx: a.target_bin[1] as usize };
    let inputs: Vec<&Path> = vec![&a.checkpoint, &a.image, &a.mask];
    write_manifest("relight", &a.common, a, serde_json::json!({ "target_bin": bin }), &inputs)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let grid = ckpt.model.grid();
    let target = grid.direction_of(bin).map_err(|e| Failure::Usage(e.to_string()))?;
    let img = load_image_input(&a.image, a.common.res)?;
    let mask = imaging::read_mask(&a.mask)?;
    let out = ckpt
        .model
        .relight_to(&model::stack_images(&[&img])?, &model::stack_masks(&[&mask])?, &[target])?;
    let path = a.common.out.join("relit.png");
    imaging::write_rgb16(&path, &model::unstack(&out, 0))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match config_path(&raw) {
        Some(p) => match read_config_file(&p) {
            Ok(entries) => expand_args(raw, &entries),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => raw,
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::RenderSynth(a) => cmd_render(a),
        Command::Warmup(a) => cmd_train(a, true),
        Command::Train(a) => cmd_train(a, false),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Relight(a) => cmd_relight(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            let mut cmd = Cli::command();
            let _ = cmd.error(clap::error::ErrorKind::ValueValidation, msg).print();
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
