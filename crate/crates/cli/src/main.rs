use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowsplat_core::dataset::Dataset;
use flowsplat_core::deform::TimeStamp;
use flowsplat_core::io;
use flowsplat_core::losses::FlowField;
use flowsplat_core::raster::{render_with, RenderOptions};
use flowsplat_core::synth::SceneRecipe;
use flowsplat_core::train::{self, Checkpoint, TrainConfig};
use flowsplat_core::tvr::{refine_dataset, trajectories_to_jsonl, TvrConfig};
use flowsplat_core::{par, Error};
use log::info;

#[derive(Parser)]
#[command(name = "flowsplat", version, about = "Dynamic Gaussian splatting with flow supervision")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset from a scene recipe.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Render frames, velocity and false-color flow from a checkpoint.
    Render(RenderArgs),
    /// Refine Gaussian trajectories against the dataset's flows.
    Refine(RefineArgs),
    /// Evaluate a checkpoint or a rendered dataset against ground truth.
    Eval(EvalArgs),
    /// Convert a .flo file to a false-color PPM.
    Flowviz(FlowvizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Recipe JSON; the built-in desk scene when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Training configuration JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Comma-separated frame indices; every frame when omitted.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Filter configuration JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth dataset.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, conflicts_with = "prediction", required_unless_present = "prediction")]
    checkpoint: Option<PathBuf>,
    /// A dataset directory to score instead of a checkpoint.
    #[arg(long)]
    prediction: Option<PathBuf>,
    /// Comma-separated camera indices.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    cameras: Vec<usize>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlowvizArgs {
    #[arg(long)]
    input: PathBuf,
    /// Flow magnitude mapped to full saturation; the field maximum when omitted.
    #[arg(long)]
    max_radius: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. }
        | Error::SingularJacobian { .. }
        | Error::SingularInnovation
        | Error::BehindCamera { .. }
        | Error::NonPositiveDepth(_) => 3,
        _ => 2,
    }
}

fn read_text(path: &Path) -> flowsplat_core::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn synth(a: SynthArgs) -> flowsplat_core::Result<()> {
    let mut recipe = match &a.config {
        Some(p) => SceneRecipe::from_json(&read_text(p)?)?,
        None => SceneRecipe::desk_default(),
    };
    if let Some(s) = a.seed {
        recipe.seed = s;
    }
    let data = Dataset::synthesize(&recipe)?;
    data.save(&a.out)?;
    fs::write(a.out.join("recipe.json"), recipe.to_json()?)?;
    info!("wrote {} cameras x {} frames to {}", data.cameras.len(), data.n_frames, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> flowsplat_core::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    let out = train::run(&cfg, &a.dataset)?;
    out.checkpoint.save(&a.out)?;
    fs::write(a.out.join("config.json"), cfg.to_json()?)?;
    fs::write(a.out.join("log.csv"), out.log.to_csv())?;
    fs::write(a.out.join("densify.jsonl"), out.log.events_jsonl()?)?;
    if let Some(last) = out.log.rows.last() {
        info!("iteration {}: total loss {:.6}, {} gaussians", last.iteration, last.total, last.n_gaussians);
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> flowsplat_core::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cam = ck
        .cameras
        .get(a.camera)
        .ok_or_else(|| Error::Config(format!("camera {} not in checkpoint ({} cameras)", a.camera, ck.cameras.len())))?;
    let n = ck.n_frames;
    let frames: Vec<usize> = if a.frames.is_empty() { (0..n).collect() } else { a.frames.clone() };
    if let Some(&bad) = frames.iter().find(|&&k| k >= n) {
        return Err(Error::Config(format!("frame {bad} out of range (0..{n})")));
    }
    fs::create_dir_all(&a.out)?;
    let outputs = par::map_slice(&frames, |&k| {
        let opts = RenderOptions {
            velocity: k + 1 < n,
            velocity_back: false,
        };
        (k, render_with(&ck.model.scene, &ck.model.field, TimeStamp::frame(k, n), cam, opts))
    });
    for (k, b) in outputs {
        io::write_ppm(&a.out.join(format!("frame_{k:04}.ppm")), &b.color)?;
        if k + 1 < n {
            let valid = b.alpha.map(|&a| a > 0.0);
            let flow = FlowField::new(b.velocity, valid)?;
            io::write_flo(&a.out.join(format!("velocity_{k:04}.flo")), &flow)?;
            io::write_ppm(&a.out.join(format!("velocity_{k:04}.ppm")), &io::flow_to_color(&flow, None))?;
        }
    }
    info!("rendered {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn refine_cmd(a: RefineArgs) -> flowsplat_core::Result<()> {
    let cfg = match &a.config {
        Some(p) => serde_json::from_str::<TvrConfig>(&read_text(p)?)?,
        None => TvrConfig::default(),
    };
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let traj = refine_dataset(&ck.model.scene, &ck.model.field, &data, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, trajectories_to_jsonl(&traj)?)?;
    let fallbacks: usize = traj.iter().map(|t| t.fallbacks).sum();
    info!("refined {} trajectories ({fallbacks} identity-transition fallbacks)", traj.len());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> flowsplat_core::Result<()> {
    let truth = Dataset::load(&a.dataset)?;
    let report = match (&a.checkpoint, &a.prediction) {
        (Some(c), _) => train::evaluate(&Checkpoint::load(c)?.model, &truth, &a.cameras)?,
        (None, Some(p)) => train::compare_datasets(&Dataset::load(p)?, &truth, &a.cameras)?,
        (None, None) => unreachable!("clap requires one of --checkpoint and --prediction"),
    };
    let text = report.to_json_pretty()?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    Ok(())
}

fn flowviz(a: FlowvizArgs) -> flowsplat_core::Result<()> {
    let flow = io::read_flo(&a.input)?;
    io::write_ppm(&a.out, &io::flow_to_color(&flow, a.max_radius))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = par::with_workers(cli.workers, || match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Flowviz(a) => flowviz(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
