//! `depthfield` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure during training or inference.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depthfield::pipeline::{
    evaluate, load_checkpoint, query_view, train, Predictor, Protocol, RunConfig, CURVES_HEADER,
};
use depthfield::objective::METRICS_HEADER;
use depthfield::scenedata::{
    dataset_digest, generate_dataset, load_dataset, load_frame, load_intrinsics, load_pose, save_dataset, save_depth,
    save_ppm, DatasetSpec,
};
use depthfield::Error;

#[derive(Parser, Debug)]
#[command(name = "depthfield", version, about = "Multi-view depth estimation with latent depth fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic RGB-D dataset.
    Generate {
        /// Dataset spec (TOML); defaults are used without it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write losses, metrics and a checkpoint.
    Train {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Print the losses every this many steps.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate a checkpoint under one protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must describe the same run as the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// stereo, video, zero-shot, interpolate or extrapolate; defaults to the config.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Overrides `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate the train split instead of the test split.
        #[arg(long)]
        train_split: bool,
        /// Directory for metrics.csv and curves.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode frames of a scene and decode depth and color at a new pose.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory of a dataset.
        #[arg(long)]
        scene: PathBuf,
        /// Frame indices to encode, e.g. `10,20`.
        #[arg(long, value_delimiter = ',', required = true)]
        frames: Vec<usize>,
        /// World-to-camera pose file (16 row-major values).
        #[arg(long)]
        pose: PathBuf,
        /// Output prefix; writes `<out>.depth` and `<out>.ppm`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Error> {
    let mut spec = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })?;
            DatasetSpec::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let dataset = generate_dataset(&spec)?;
    save_dataset(&dataset, out)?;
    let m = &dataset.manifest;
    let frames: usize = m.scenes.iter().map(|s| s.frames).sum();
    println!("dataset   {}", out.display());
    println!("scenes    {} ({} train, {} test)", m.scenes.len(), m.train.len(), m.test.len());
    println!("frames    {frames} at {}x{}", m.width, m.height);
    println!("digest    {}", dataset_digest(out)?);
    Ok(())
}

fn run_train(config: &Path, seed: Option<u64>, data: Option<PathBuf>, out: &Path, log_every: usize) -> Result<(), Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = data {
        cfg.data.dir = d;
    }
    let dataset = load_dataset(&cfg.data.dir)?;
    let outcome = train(&cfg, &dataset, Some(out), |l| {
        if log_every > 0 && (l.step == 1 || l.step % log_every == 0) {
            eprintln!("step {:>6}  loss {:.5}  depth {:.5}  rgb {:.5}", l.step, l.total, l.depth, l.rgb);
        }
    })?;
    println!("{METRICS_HEADER}");
    for (step, label, m) in &outcome.metrics {
        println!("{}", m.csv_row(label, *step));
    }
    println!("checkpoint {}", out.join("checkpoint.dfck").display());
    Ok(())
}

fn run_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    protocol: Option<Protocol>,
    data: Option<PathBuf>,
    train_split: bool,
    out: Option<&Path>,
) -> Result<(), Error> {
    let ck = load_checkpoint(checkpoint)?;
    if let Some(p) = config {
        let given = RunConfig::load(p)?;
        if given.digest() != ck.config.digest() {
            return Err(Error::DigestMismatch { expected: ck.config.digest(), found: given.digest() });
        }
    }
    let mut cfg = ck.config.clone();
    if let Some(d) = data {
        cfg.data.dir = d;
    }
    let protocol = protocol.unwrap_or(cfg.eval.protocol);
    let dataset = load_dataset(&cfg.data.dir)?;
    let pred = Predictor::new(&ck.model, &ck.params);
    let report = evaluate(&pred, &dataset, &cfg, protocol, !train_split)?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    for (label, m) in &report.rows {
        metrics.push_str(&m.csv_row(label, ck.step as usize));
        metrics.push('\n');
    }
    print!("{metrics}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        write_text(&dir.join("metrics.csv"), &metrics)?;
        if !report.curves.is_empty() {
            let mut curves = format!("{CURVES_HEADER}\n");
            for row in &report.curves {
                curves.push_str(&row.csv_row());
                curves.push('\n');
            }
            write_text(&dir.join("curves.csv"), &curves)?;
        }
    }
    Ok(())
}

fn run_query(checkpoint: &Path, scene: &Path, frames: &[usize], pose: &Path, out: &Path) -> Result<(), Error> {
    let ck = load_checkpoint(checkpoint)?;
    let intrinsics = load_intrinsics(&scene.join("intrinsics.txt"))?;
    let records = frames.iter().map(|&i| load_frame(scene, &intrinsics, i)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<_> = records.iter().collect();
    let pose = load_pose(pose)?;
    let pred = Predictor::new(&ck.model, &ck.params);
    let (depth, rgb) = query_view(&pred, &refs, &pose)?;
    let (h, w) = (records[0].height, records[0].width);
    let with_ext = |ext: &str| {
        let mut p = out.as_os_str().to_owned();
        p.push(".");
        p.push(ext);
        PathBuf::from(p)
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    let rgb: Vec<f64> = rgb.iter().map(|c| c.clamp(0.0, 1.0)).collect();
    save_depth(&with_ext("depth"), h, w, &depth)?;
    save_ppm(&with_ext("ppm"), h, w, &rgb)?;
    println!("wrote {} and {}", with_ext("depth").display(), with_ext("ppm").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate { config, seed, out } => generate(config.as_deref(), seed, &out),
        Command::Train { config, seed, data, out, log_every } => run_train(&config, seed, data, &out, log_every),
        Command::Eval { checkpoint, config, protocol, data, train_split, out } => {
            run_eval(&checkpoint, config.as_deref(), protocol, data, train_split, out.as_deref())
        }
        Command::Query { checkpoint, scene, frames, pose, out } => run_query(&checkpoint, &scene, &frames, &pose, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
