use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evblur_cli::{cmd_eval, cmd_render, cmd_simulate, cmd_train, exit_code, RunConfig, EXIT_CONFIG};
use evblur_core::datagen::DatasetConfig;
use evblur_core::train::{PoseMode, TrainConfig};
use evblur_core::{Error, Result};

#[derive(Parser)]
#[command(name = "evblur", about = "Deblur a radiance field and camera motion from blurry images and events")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Train a field and per-view poses on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint and write a JSON report.
    Eval(EvalArgs),
    /// Render a checkpoint from a list of poses.
    Render(RenderArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 2)]
    novel_views: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value_t = 0.3)]
    theta: f64,
    /// Standard deviation of a per-pixel threshold offset.
    #[arg(long, default_value_t = 0.0)]
    noise_theta: f64,
    #[arg(long, default_value_t = 100)]
    substeps: usize,
    #[arg(long, default_value_t = 0.1)]
    exposure: f64,
    #[arg(long)]
    shake_translation: Option<f64>,
    #[arg(long)]
    shake_rotation: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Load every setting from a run_config.json; other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 0.005)]
    lambda: f64,
    #[arg(long, default_value_t = 0.3)]
    theta: f64,
    /// full, noe, linear, cubic or frozen.
    #[arg(long, default_value = "full")]
    mode: String,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Sum gradients in a fixed order so reruns are bit-identical.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_field: Option<f64>,
    #[arg(long)]
    lr_pose: Option<f64>,
    #[arg(long)]
    hierarchical: bool,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report path (defaults to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text file with 12 numbers (row-major 3x4 camera-to-world) per line.
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = DatasetConfig {
        views: a.views,
        novel_views: a.novel_views,
        width: a.res,
        height: a.res,
        theta: a.theta,
        noise_theta: a.noise_theta,
        substeps: a.substeps,
        exposure: a.exposure,
        seed: a.seed,
        ..DatasetConfig::default()
    };
    if let Some(t) = a.shake_translation {
        cfg.shake.translation = t;
    }
    if let Some(r) = a.shake_rotation {
        cfg.shake.rotation = r;
    }
    let s = cmd_simulate(&a.out, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mode = PoseMode::parse(&a.mode)?;
    let mut c = TrainConfig { p: a.p, lambda: a.lambda, theta: a.theta, mode, iterations: a.iters, seed: a.seed, ..TrainConfig::default() };
    c.field.seed = a.seed;
    c.deterministic = a.deterministic;
    c.hierarchical = a.hierarchical;
    if let Some(n) = a.samples {
        c.samples = n;
    }
    if let Some(b) = a.batch {
        c.batch_rays = b;
    }
    if let Some(lr) = a.lr_field {
        c.lr_field = lr;
    }
    if let Some(lr) = a.lr_pose {
        c.lr_pose = lr;
    }
    if let Some(w) = a.hidden_width {
        c.field.hidden_width = w;
    }
    if let Some(l) = a.hidden_layers {
        c.field.hidden_layers = l;
    }
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let run = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut run: RunConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            run.dataset = a.dataset.clone();
            run.out = a.out.clone();
            run
        }
        None => RunConfig { dataset: a.dataset.clone(), out: a.out.clone(), train: train_config(&a)? },
    };
    let s = cmd_train(&run)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = cmd_eval(&a.checkpoint, &a.dataset, a.samples)?;
    let json = report.to_json()?;
    match a.out {
        Some(p) => std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for p in cmd_render(&a.checkpoint, &a.poses, &a.out, a.samples, None)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: threads: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
