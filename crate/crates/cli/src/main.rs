use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tripose::error::{Error, Result};
use tripose::eval::{self, EvalTask};
use tripose::gradgate::{self, Component};
use tripose::synth::{self, Dataset, GenConfig, Split};
use tripose::trainer::{self, Models, Stage, TrainConfig};

/// Tri-modal pose embedding: synthetic data, staged training, evaluation.
#[derive(Parser, Debug)]
#[command(name = "tripose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        size: usize,
        /// Skeleton joints (3..=17).
        #[arg(long, default_value_t = 17)]
        joints: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image-proxy nuisance amplitude.
        #[arg(long, default_value_t = 0.5)]
        nuisance: f64,
        /// Camera azimuth spread in radians.
        #[arg(long, default_value_t = 0.3)]
        cameras: f64,
        /// Image-proxy feature dimension.
        #[arg(long, default_value_t = 64)]
        feat_dim: usize,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
    },
    /// Run training stages, writing checkpoints and step logs into --out.
    Train {
        /// TOML config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
    },
    /// Evaluate a checkpoint on the test split. Writes JSON to --out and CSV next to it.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a spherical path between the embeddings of two dataset poses.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample index of the first pose (default: first test sample).
        #[arg(long)]
        from: Option<usize>,
        /// Sample index of the second pose (default: second test sample).
        #[arg(long)]
        to: Option<usize>,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        /// CSV of decoded poses (step, t, joint, x, y, z).
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient gate; exits nonzero if any check fails.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ComponentArg::All)]
        component: ComponentArg,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Perturb analytic gradients (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the fully resolved training config as TOML.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Step1,
    Step2,
    Finetune,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    PoseRetrieval,
    ImageRetrieval,
    Hpe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ComponentArg {
    Losses,
    Nn,
    All,
}

enum Failure {
    Lib(Error),
    GateFailed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidState(_) => 4,
        Error::Numerical(_) => 5,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::GateFailed(msg)) => {
            eprintln!("error[gradcheck-failed]: {msg}");
            ExitCode::from(5)
        }
    }
}

fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData {
            out,
            size,
            joints,
            seed,
            nuisance,
            cameras,
            feat_dim,
            test_fraction,
        } => {
            let cfg = GenConfig {
                size,
                joints,
                feat_dim,
                seed,
                nuisance,
                camera_spread: cameras,
                test_fraction,
            };
            gen_data(cfg, &out)?
        }
        Command::Train {
            config,
            data,
            out,
            stage,
        } => train(config.as_deref(), &data, &out, stage)?,
        Command::Eval {
            ckpt,
            data,
            task,
            out,
        } => evaluate(&ckpt, &data, task, &out)?,
        Command::Interpolate {
            ckpt,
            data,
            from,
            to,
            steps,
            out,
        } => interpolate(&ckpt, &data, from, to, steps, &out)?,
        Command::Gradcheck {
            component,
            seeds,
            inject_fault,
        } => return gradcheck(component, seeds, inject_fault),
        Command::ShowConfig { config } => print!("{}", load_config(config.as_deref())?.to_toml_string()),
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn gen_data(cfg: GenConfig, out: &Path) -> Result<()> {
    let ds = Dataset::generate(cfg)?;
    synth::write_dataset(&ds, out)?;
    let test = ds.split_indices(Split::Test).len();
    println!(
        "wrote {}: {} samples ({} train, {} test), joints {}, feat_dim {}, seed {}, checksum {:08x}",
        out.display(),
        ds.len(),
        ds.len() - test,
        test,
        ds.joints(),
        ds.feat_dim(),
        cfg.seed,
        synth::dataset_checksum(&ds)
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, stage: StageArg) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = synth::read_dataset(data)?;
    let stages: &[Stage] = match stage {
        StageArg::Step1 => &[Stage::Step1],
        StageArg::Step2 => &[Stage::Step2],
        StageArg::Finetune => &[Stage::Finetune],
        StageArg::All => &Stage::ALL,
    };
    std::fs::create_dir_all(out)?;
    let result = trainer::run_stages(&cfg, &ds, out, stages)?;
    for log in &result.logs {
        let cos = |c: Option<f64>| c.map_or("-".to_string(), |v| format!("{v:.4}"));
        match log.last() {
            Some(r) => println!(
                "{}: {} steps, loss {:.5} (pair {:.5}, triplet {:.5}, task {:.5}), cos 2d-3d {} img-2d {} img-3d {}, {:.1}s",
                log.stage,
                log.records.len(),
                r.total,
                r.pair,
                r.triplet,
                r.task_2d + r.task_3d,
                cos(r.cos_2d_3d),
                cos(r.cos_img_2d),
                cos(r.cos_img_3d),
                log.wall_clock_secs
            ),
            None => println!("{}: 0 steps", log.stage),
        }
        println!("  checkpoint {}", trainer::checkpoint_path(out, log.stage).display());
    }
    Ok(())
}

fn evaluate(ckpt: &Path, data: &Path, task: TaskArg, out: &Path) -> Result<()> {
    let models = Models::load(ckpt)?;
    let ds = synth::read_dataset(data)?;
    let task = match task {
        TaskArg::PoseRetrieval => EvalTask::PoseRetrieval,
        TaskArg::ImageRetrieval => EvalTask::ImageRetrieval,
        TaskArg::Hpe => EvalTask::Hpe,
    };
    let report = eval::evaluate(&models, &ds, task)?;
    report.write(out)?;
    for m in &report.metrics {
        let base = m.baseline.map_or(String::new(), |b| format!("  (baseline {b:.4})"));
        println!("{:<28} {:.4} {}{base}", m.metric, m.value, m.units);
    }
    Ok(())
}

fn interpolate(
    ckpt: &Path,
    data: &Path,
    from: Option<usize>,
    to: Option<usize>,
    steps: usize,
    out: &Path,
) -> Result<()> {
    let models = Models::load(ckpt)?;
    let ds = synth::read_dataset(data)?;
    let test = ds.split_indices(Split::Test);
    let pick = |given: Option<usize>, nth: usize| {
        given
            .or_else(|| test.get(nth).copied())
            .ok_or_else(|| Error::InvalidInput("no pose index given and the test split is too small".into()))
    };
    let (a, b) = (pick(from, 0)?, pick(to, 1)?);
    let path = eval::eval_interpolation(
        &models,
        ds.skeleton(),
        &ds.sample(a)?.pose3d,
        &ds.sample(b)?.pose3d,
        steps,
    )?;
    path.write_csv(out)?;
    let mean = path.step_displacement.iter().sum::<f64>() / path.step_displacement.len() as f64;
    let max = path.step_displacement.iter().copied().fold(0.0, f64::max);
    println!(
        "{steps} steps from sample {a} to {b}: mean step {mean:.5} m, max step {max:.5} m, max/mean {}, max bone deviation {:.5} m",
        path.smoothness_ratio.map_or("-".to_string(), |r| format!("{r:.3}")),
        path.max_bone_deviation
    );
    Ok(())
}

fn gradcheck(component: ComponentArg, seeds: u64, inject_fault: bool) -> std::result::Result<(), Failure> {
    if seeds == 0 {
        eprintln!("warning: --seeds 0, nothing to check");
        return Ok(());
    }
    let components: &[Component] = match component {
        ComponentArg::Losses => &[Component::Losses],
        ComponentArg::Nn => &[Component::Nn],
        ComponentArg::All => &Component::ALL,
    };
    let mut failed = Vec::new();
    for &c in components {
        let report = gradgate::run_component(c, seeds, inject_fault)?;
        for (name, r) in &report.checks {
            println!(
                "{c}/{name:<20} checked {:>6}  max rel-err {:.3e}  mean {:.3e}",
                r.checked, r.max_rel_err, r.mean_rel_err
            );
        }
        let status = if report.passed() { "ok" } else { "FAIL" };
        println!("{c}: max rel-err {:.3e} over {seeds} seeds [{status}]", report.max_rel_err());
        if !report.passed() {
            failed.push(c.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GateFailed(format!(
            "tolerance exceeded in {}",
            failed.join(", ")
        )))
    }
}
