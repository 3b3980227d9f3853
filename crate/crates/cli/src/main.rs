//! `streamreg`: synthesise phantoms, train the keypoint network, register
//! tractograms and score the result.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use streamreg::io::{
    load_tractogram, save_tractogram, save_transform, write_atomic, write_keypoints_csv,
    TractogramFormat,
};
use streamreg::metrics::DEFAULT_VOXEL_MM;
use streamreg::pipeline::{evaluate, keypoints, register, Matcher, RegisterOptions};
use streamreg::synth::{gen_phantom, make_pair, PhantomConfig, WarpFamily};
use streamreg::train::{load_checkpoint, save_checkpoint, Checkpoint, LogRecord, Trainer};
use streamreg::{Error, TrainConfig, Tractogram};

#[derive(Parser, Debug)]
#[command(name = "streamreg", version, about = "Unsupervised streamline registration")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "STREAMREG_THREADS")]
    threads: Option<usize>,

    /// Accepted for scripting; every reduction already runs in a fixed
    /// order, so results do not depend on it or on the thread count.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom pair (moving, fixed) and its ground truth.
    Synth(SynthArgs),
    /// Train the keypoint network on a directory of tractograms.
    Train(TrainArgs),
    /// Register a moving tractogram onto a fixed one.
    Register(RegisterArgs),
    /// Export detected keypoints as CSV.
    Keypoints(KeypointsArgs),
    /// Per-bundle ABD and weighted Dice of a moved tractogram.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WarpArg {
    Tps,
    Sine,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    bundles: usize,
    #[arg(long, default_value_t = 400)]
    streamlines: usize,
    #[arg(long, default_value_t = 15)]
    points: usize,
    /// Lateral jitter sigma, mm.
    #[arg(long, default_value_t = 1.5)]
    jitter: f64,
    /// Largest ground-truth displacement, mm.
    #[arg(long, default_value_t = 5.0)]
    d_max: f64,
    #[arg(long, value_enum, default_value_t = WarpArg::Tps)]
    warp: WarpArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra warped copies written to `<out>/train/` alongside the phantom.
    #[arg(long, default_value_t = 0)]
    pool: usize,
    /// Write the human-readable text format instead of binary.
    #[arg(long)]
    text: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of training tractograms (`.trgm` or `.txt`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    out: PathBuf,
    /// Config file (TOML sections or flat `section.key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint; its config echo is used, with `--set`
    /// applied on top.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum MatcherArg {
    Network,
    Nn,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Trained checkpoint (required for the network matcher).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Moved tractogram output.
    #[arg(long)]
    out: PathBuf,
    /// Transform output (defaults to `<out>.tps`).
    #[arg(long)]
    transform: Option<PathBuf>,
    /// TPS regularisation (defaults to the checkpoint's inference lambda).
    #[arg(long)]
    lambda: Option<f64>,
    /// Streamlines per subject used for keypoint detection.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    subset_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = MatcherArg::Network)]
    matcher: MatcherArg,
    /// Keypoint count for the nearest-neighbour matcher.
    #[arg(long, default_value_t = 512)]
    keypoints: usize,
    /// Also write both keypoint sets as CSV to this directory.
    #[arg(long)]
    keypoints_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KeypointsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    subset_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    moved: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Voxel edge length for the density maps, mm.
    #[arg(long, default_value_t = DEFAULT_VOXEL_MM)]
    voxel: f64,
    /// Also write the per-bundle CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::IllConditioned { .. } | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn load(path: &Path) -> streamreg::Result<Tractogram> {
    load_tractogram(path, TractogramFormat::from_path(path)).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn save(t: &Tractogram, path: &Path) -> streamreg::Result<()> {
    save_tractogram(t, path, TractogramFormat::from_path(path))
}

fn load_model(path: &Path) -> streamreg::Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("model checkpoint {} not found", path.display()),
        )));
    }
    load_checkpoint(path)
}

fn cmd_synth(a: &SynthArgs) -> streamreg::Result<()> {
    fs::create_dir_all(&a.out)?;
    let ext = if a.text { "txt" } else { "trgm" };
    let phantom = gen_phantom(&PhantomConfig {
        bundles: a.bundles,
        streamlines_per_bundle: a.streamlines,
        points: a.points,
        jitter: a.jitter,
        seed: a.seed,
        ..PhantomConfig::default()
    })?;
    let family = match a.warp {
        WarpArg::Tps => WarpFamily::Tps,
        WarpArg::Sine => WarpFamily::Sinusoidal,
    };
    let (moving, fixed, truth) = make_pair(&phantom, a.d_max, a.seed, family)?;
    save(&fixed, &a.out.join(format!("fixed.{ext}")))?;
    save(&moving, &a.out.join(format!("moving.{ext}")))?;
    if let Some(t) = &truth.transform {
        save_transform(t, &a.out.join("truth.tps"))?;
    }
    truth.write_displacement_csv(&a.out.join("truth_displacements.csv"))?;
    if a.pool > 0 {
        let dir = a.out.join("train");
        fs::create_dir_all(&dir)?;
        save(&phantom, &dir.join(format!("subject_00.{ext}")))?;
        for i in 1..=a.pool {
            // warp seeds disjoint from the evaluation pair's
            let seed = a.seed.wrapping_add(1_000_000 + i as u64);
            let (warped, _, _) = make_pair(&phantom, a.d_max, seed, family)?;
            save(&warped, &dir.join(format!("subject_{i:02}.{ext}")))?;
        }
    }
    println!(
        "wrote {} streamlines per subject to {} (max displacement {:.3} mm)",
        fixed.len(),
        a.out.display(),
        truth.max_displacement()
    );
    Ok(())
}

fn training_files(dir: &Path) -> streamreg::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("trgm" | "txt")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_train(a: &TrainArgs) -> streamreg::Result<()> {
    let files = training_files(&a.data)?;
    if files.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 tractograms in {}, found {}",
            a.data.display(),
            files.len()
        )));
    }
    let pool = files.iter().map(|f| load(f)).collect::<streamreg::Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ck = load_model(path)?;
            if !a.overrides.is_empty() {
                let cfg = TrainConfig::from_toml_with_overrides(&ck.config.to_toml_string(), &a.overrides)?;
                if cfg.model != ck.config.model {
                    return Err(Error::InvalidArgument(
                        "model settings cannot change when resuming".to_string(),
                    ));
                }
                ck.config = cfg;
            }
            info!("resuming at epoch {} from {}", ck.epoch, path.display());
            Trainer::resume(ck, pool)?
        }
        None => {
            let text = match &a.config {
                Some(p) => fs::read_to_string(p)?,
                None => String::new(),
            };
            Trainer::new(TrainConfig::from_toml_with_overrides(&text, &a.overrides)?, pool)?
        }
    };

    let log_path = a.out.join("train_log.csv");
    let fresh = a.resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(log, "{}", LogRecord::HEADER)?;
    }
    let every = trainer.config().train.checkpoint_every.max(1);
    while !trainer.is_finished() {
        let mut lines = String::new();
        let summary = trainer.run_epoch(|r| {
            lines.push_str(&r.to_string());
            lines.push('\n');
        })?;
        log.write_all(lines.as_bytes())?;
        log.flush()?;
        info!(
            "epoch {} mean loss {:.4} mm ({} iterations, {} skipped)",
            summary.epoch, summary.mean_loss, summary.iterations, summary.failed
        );
        if trainer.epoch() % every == 0 {
            let path = a.out.join(format!("checkpoint_epoch{:04}.srck", trainer.epoch()));
            save_checkpoint(&trainer.checkpoint(), &path)?;
        }
    }
    let final_path = a.out.join("model.srck");
    save_checkpoint(&trainer.checkpoint(), &final_path)?;
    println!("trained {} epochs; model at {}", trainer.epoch(), final_path.display());
    Ok(())
}

fn cmd_register(a: &RegisterArgs) -> streamreg::Result<()> {
    let start = Instant::now();
    let model = match (&a.model, a.matcher) {
        (Some(p), _) => Some(load_model(p)?),
        (None, MatcherArg::Network) => {
            return Err(Error::InvalidArgument(
                "--model is required for the network matcher".to_string(),
            ))
        }
        (None, MatcherArg::Nn) => None,
    };
    let defaults = model.as_ref().map(|m| m.config.clone()).unwrap_or_default();
    let opts = RegisterOptions {
        lambda: a.lambda.unwrap_or(defaults.inference.lambda),
        subset: a.subset.unwrap_or(defaults.inference.subset),
        subset_seed: a.subset_seed.unwrap_or(defaults.inference.subset_seed),
        points: defaults.train.points,
        matcher: match a.matcher {
            MatcherArg::Network => Matcher::Network,
            MatcherArg::Nn => Matcher::NearestNeighbor,
        },
        nn_keypoints: a.keypoints,
    };
    let moving = load(&a.moving)?;
    let fixed = load(&a.fixed)?;
    let loaded = Instant::now();
    let reg = register(&moving, &fixed, model.as_ref().map(|m| &m.params), &opts)?;
    let registered = loaded.elapsed();
    save(&reg.moved, &a.out)?;
    let transform_path = a.transform.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".tps");
        PathBuf::from(p)
    });
    save_transform(&reg.transform, &transform_path)?;
    if let Some(dir) = &a.keypoints_dir {
        fs::create_dir_all(dir)?;
        write_keypoints_csv(&dir.join("moving_keypoints.csv"), &reg.moving_keypoints.points)?;
        write_keypoints_csv(&dir.join("fixed_keypoints.csv"), &reg.fixed_keypoints.points)?;
    }
    info!(
        "register: {:.3} s for keypoints, solve and warp; {:.3} s total",
        registered.as_secs_f64(),
        start.elapsed().as_secs_f64()
    );
    println!(
        "moved {} streamlines with lambda {}; wrote {} and {}",
        reg.moved.len(),
        opts.lambda,
        a.out.display(),
        transform_path.display()
    );
    Ok(())
}

fn cmd_keypoints(a: &KeypointsArgs) -> streamreg::Result<()> {
    let model = load_model(&a.model)?;
    let t = load(&a.input)?;
    let opts = RegisterOptions {
        subset: a.subset.unwrap_or(model.config.inference.subset),
        subset_seed: a.subset_seed.unwrap_or(model.config.inference.subset_seed),
        points: model.config.train.points,
        ..RegisterOptions::default()
    };
    let kp = keypoints(&t, &model.params, &opts)?;
    write_keypoints_csv(&a.out, &kp.points)?;
    println!("wrote {} keypoints to {}", kp.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> streamreg::Result<()> {
    let moved = load(&a.moved)?;
    let fixed = load(&a.fixed)?;
    let report = evaluate(&moved, &fixed, a.voxel)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.csv {
        write_atomic(p, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not set thread count: {e}");
        }
    }
    if cli.deterministic {
        info!("deterministic mode: reductions use fixed orders");
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a),
        Command::Keypoints(a) => cmd_keypoints(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
