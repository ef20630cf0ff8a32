use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use srn_core::eval::{self, ACTIVITY_THRESHOLD};
use srn_core::gradcheck;
use srn_core::model::{Checkpoint, Variant};
use srn_core::scenes::{CircleScene, Dataset, SceneConfig, DEFAULT_PALETTE};
use srn_core::tensor::Tensor;
use srn_core::train::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "srn", version, about = "Set refiner network experiments on synthetic circles")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print a machine-readable result object on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for generation and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    image_size: Option<String>,
    #[arg(long, global = true)]
    set_size: Option<usize>,
    #[arg(long, global = true)]
    elem_dim: Option<usize>,
}

impl Common {
    fn image_size(&self) -> Option<usize> {
        self.image_size.as_deref().map(|s| s.parse().expect("validated by clap"))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a circles dataset.
    Gen(GenArgs),
    /// Train a baseline or refiner autoencoder.
    Train(TrainArgs),
    /// Decomposition, IoU and reconstruction metrics for a checkpoint.
    Eval(EvalArgs),
    /// Write the reconstruction and per-slot images of one dataset image.
    Decompose(DecomposeArgs),
    /// Slot activities along an interpolation between two scenes.
    Interpolate(InterpolateArgs),
    /// Latent vectors of active slots of single-circle images as CSV.
    ExportLatents(ExportArgs),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    min_circles: usize,
    #[arg(long, default_value_t = 5)]
    max_circles: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Baseline,
    Srn,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSONL log (default: checkpoint path plus `.log.jsonl`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON file with training fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    truncate_inner_grad: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Divide every convolution width by this factor.
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Replace batch norm with the identity.
    #[arg(long)]
    no_batch_norm: bool,
    #[arg(long)]
    clip_grad_norm: Option<f64>,
    /// Skip the per-epoch decomposition measurement.
    #[arg(long)]
    no_eval_decomposition: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Val,
    Train,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Full JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-image CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// Interpolate between two dataset scenes instead of the default
    /// one-circle left-to-right sweep.
    #[arg(long, requires_all = ["from", "to"])]
    data: Option<PathBuf>,
    #[arg(long)]
    from: Option<usize>,
    #[arg(long)]
    to: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let c = &cli.common;
    match &cli.command {
        Command::Gen(a) => gen(c, a),
        Command::Train(a) => train_cmd(c, a),
        Command::Eval(a) => eval_cmd(c, a),
        Command::Decompose(a) => decompose(c, a),
        Command::Interpolate(a) => interpolate(c, a),
        Command::ExportLatents(a) => export(c, a),
        Command::Gradcheck => gradcheck_cmd(c),
    }
}

fn emit(common: &Common, value: serde_json::Value, human: impl FnOnce()) {
    if common.json {
        println!("{value}");
    } else {
        human();
    }
}

fn gen(c: &Common, a: &GenArgs) -> Result<()> {
    let size = c.image_size().unwrap_or(64);
    let mut cfg = SceneConfig::for_size(size);
    cfg.min_circles = a.min_circles;
    cfg.max_circles = a.max_circles;
    let seed = c.seed.unwrap_or(0);
    let ds = Dataset::generate(seed, a.count, &cfg)?;
    ds.save(&a.out)?;
    emit(c, json!({"out": a.out, "count": ds.len(), "image_size": size, "master_seed": seed}), || {
        println!("wrote {} scenes ({size}x{size}) to {}", ds.len(), a.out.display())
    });
    Ok(())
}

fn train_config(c: &Common, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    } else if a.config.is_none() {
        bail!("--data is required unless --config names a dataset");
    }
    if let Some(p) = &a.checkpoint {
        cfg.checkpoint = p.clone();
    }
    if a.log.is_some() {
        cfg.log = a.log.clone();
    }
    if let Some(m) = a.model {
        cfg.variant = match m {
            ModelArg::Baseline => Variant::Baseline,
            ModelArg::Srn => Variant::Srn,
        };
    }
    if let Some(v) = a.inner_steps {
        cfg.refine.steps = v;
    }
    if let Some(v) = a.inner_lr {
        cfg.refine.inner_lr = v;
    }
    if a.truncate_inner_grad {
        cfg.refine.truncate_grad = true;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.image_size() {
        cfg.model.image_size = v;
    }
    if let Some(v) = c.set_size {
        cfg.model.set_size = v;
    }
    if let Some(v) = c.elem_dim {
        cfg.model.elem_dim = v;
    }
    if let Some(v) = a.width_divisor {
        cfg.model = cfg.model.with_width_divisor(v);
    }
    if a.no_batch_norm {
        cfg.model.batch_norm = false;
    }
    if a.clip_grad_norm.is_some() {
        cfg.clip_grad_norm = a.clip_grad_norm;
    }
    if a.no_eval_decomposition {
        cfg.eval_decomposition = false;
    }
    Ok(cfg)
}

fn train_cmd(c: &Common, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(c, a)?;
    let json = c.json;
    let outcome = train::train(&cfg, |e| {
        if !json {
            eprintln!(
                "epoch {:>3}  train {:.6}  val {:.6}  {:.1}s",
                e.epoch, e.train_loss, e.val_loss, e.seconds
            );
        }
    })?;
    let last = outcome.epochs.last();
    emit(
        c,
        json!({
            "checkpoint": cfg.checkpoint,
            "log": cfg.log_path(),
            "variant": cfg.variant,
            "epochs": outcome.epochs.len(),
            "final_train_loss": last.map(|e| e.train_loss),
            "final_val_loss": last.map(|e| e.val_loss),
            "trainable_parameters": outcome.checkpoint.params.num_trainable(),
        }),
        || println!("checkpoint written to {}", cfg.checkpoint.display()),
    );
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    if ds.image_size() != ck.model.config.image_size {
        bail!(
            "dataset {} has {}px images but checkpoint {} expects {}px",
            data.display(),
            ds.image_size(),
            checkpoint.display(),
            ck.model.config.image_size
        );
    }
    Ok((ck, ds))
}

fn eval_cmd(c: &Common, a: &EvalArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.checkpoint, &a.data)?;
    let (train_idx, val_idx) = ds.split();
    let idx: Vec<usize> = match a.split {
        Split::Val => val_idx,
        Split::Train => train_idx,
        Split::All => (0..ds.len()).collect(),
    };
    let report = eval::evaluate_decomposition(&ck.model, &ck.params, &ds, &idx, a.batch_size)?;
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.csv {
        fs::write(p, report.images_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let by: serde_json::Map<String, serde_json::Value> =
        report.success_by_count.iter().map(|(k, s)| (k.to_string(), json!(s.rate))).collect();
    emit(
        c,
        json!({
            "images": report.images.len(),
            "success_rate": report.success_rate,
            "success_by_count": by,
            "mse": report.mse,
            "iou_overall": report.mean_iou_overall,
            "iou_per_object": report.mean_iou_per_object,
            "inner_loss_initial": report.inner_loss_initial,
            "inner_loss_final": report.inner_loss_final,
        }),
        || {
            println!("images           {}", report.images.len());
            println!("mse              {:.6}", report.mse);
            println!("iou overall      {:.4}", report.mean_iou_overall);
            println!("iou per object   {:.4}", report.mean_iou_per_object);
            if let (Some(i), Some(f)) = (report.inner_loss_initial, report.inner_loss_final) {
                println!("inner loss       {:.4} -> {:.4}", i, f);
            }
            println!("circles  images  decomposed");
            for (k, s) in &report.success_by_count {
                println!("{:>7}  {:>6}  {:>9.1}%", k, s.images, 100.0 * s.rate);
            }
        },
    );
    Ok(())
}

fn decompose(c: &Common, a: &DecomposeArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.checkpoint, &a.data)?;
    if a.index >= ds.len() {
        bail!("index {} out of range for a dataset of {} images", a.index, ds.len());
    }
    let out = eval::run_batch(&ck.model, &ck.params, ds.batch(&[a.index]))?;
    let s = ck.model.config.image_size;
    let n = ck.model.config.set_size;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let input = ds.image(a.index);
    let recon = out.recon.reshape(&[3, s, s])?;
    eval::write_ppm(&a.out.join("input.ppm"), &input)?;
    eval::write_ppm(&a.out.join("recon.ppm"), &recon)?;
    let per = 3 * s * s;
    let mut panels = vec![input, recon];
    for i in 0..n {
        let slot = Tensor::new(vec![3, s, s], out.slots.data()[i * per..(i + 1) * per].to_vec())?;
        eval::write_ppm(&a.out.join(format!("slot_{i:02}.ppm")), &slot)?;
        panels.push(slot);
    }
    let grid = eval::tile_grid(&panels, panels.len())?;
    eval::write_ppm(&a.out.join("grid.ppm"), &grid)?;
    let slots = out.slots.reshape(&[n, 3, s, s])?;
    let activity = eval::slot_activity(&slots);
    let active = eval::count_active(&activity, ACTIVITY_THRESHOLD);
    let circles = ds.manifest.scenes[a.index].circles.len();
    emit(
        c,
        json!({"out": a.out, "circles": circles, "active_slots": active, "activity": activity, "success": active == circles}),
        || println!("{} circles, {} active slots; panels in {}", circles, active, a.out.display()),
    );
    Ok(())
}

fn interpolate(c: &Common, a: &InterpolateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let size = ck.model.config.image_size;
    let (from, to): (CircleScene, CircleScene) = match (&a.data, a.from, a.to) {
        (Some(d), Some(i), Some(j)) => {
            let ds = Dataset::load(d)?;
            let get = |k: usize| {
                ds.manifest.scenes.get(k).cloned().with_context(|| format!("scene {k} out of range"))
            };
            (get(i)?, get(j)?)
        }
        _ => {
            let radius = 8.5 * size as f64 / 64.0;
            eval::horizontal_sweep(size, radius, DEFAULT_PALETTE[0].1)
        }
    };
    let trace = eval::responsibility_trace(&ck.model, &ck.params, &from, &to, a.frames)?;
    if let Some(p) = &a.out {
        fs::write(p, trace.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(
        c,
        json!({
            "frames": trace.frames.len(),
            "handoff_frames": trace.handoff_frames(),
            "single_slot_frames": trace.single_slot_frames(),
            "success_frames": trace.frames.iter().filter(|f| f.success).count(),
        }),
        || {
            println!(
                "{} frames: {} with one active slot, {} with two or more",
                trace.frames.len(),
                trace.single_slot_frames(),
                trace.handoff_frames()
            );
            if a.out.is_none() {
                print!("{}", trace.to_csv());
            }
        },
    );
    Ok(())
}

fn export(c: &Common, a: &ExportArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.checkpoint, &a.data)?;
    let csv = eval::export_latents(&ck.model, &ck.params, &ds, a.batch_size)?;
    fs::write(&a.out, &csv).with_context(|| format!("writing {}", a.out.display()))?;
    let rows = csv.lines().count().saturating_sub(1);
    emit(c, json!({"out": a.out, "rows": rows}), || println!("wrote {rows} latent rows to {}", a.out.display()));
    Ok(())
}

fn gradcheck_cmd(c: &Common) -> Result<()> {
    let entries = gradcheck::standard_suite()?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.report.passed()).map(|e| e.name.as_str()).collect();
    emit(
        c,
        json!({
            "passed": failed.is_empty(),
            "checks": entries.iter().map(|e| json!({
                "name": e.name,
                "max_rel_err": e.report.max_rel_err,
                "max_abs_err": e.report.max_abs_err,
                "coordinates": e.report.checked,
                "tol": e.report.tol,
                "passed": e.report.passed(),
            })).collect::<Vec<_>>(),
        }),
        || {
            println!("{:<40} {:>12} {:>10} {:>7}  status", "check", "max rel err", "tol", "coords");
            for e in &entries {
                let r = &e.report;
                println!(
                    "{:<40} {:>12.3e} {:>10.0e} {:>7}  {}",
                    e.name,
                    r.max_rel_err,
                    r.tol,
                    r.checked,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
        },
    );
    if !failed.is_empty() {
        bail!("gradient checks failed: {}", failed.join(", "));
    }
    Ok(())
}
