//! Command-line front end.
//!
//! Four subcommands cover the batch workflow: `simulate` renders a synthetic
//! scene to disk, `localize` turns a recording into a per-frame azimuth
//! weight map, `track` additionally runs the multi-speaker tracker, and
//! `evaluate` scores a track file against a ground-truth table. Every run
//! drops a `manifest.json` next to its outputs recording what produced them.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aztrack::frontend::{frame_time, AudioBuffer, StftConfig};
use aztrack::io::{self, RunManifest};
use aztrack::metrics::evaluate;
use aztrack::pipeline::{self, PipelineConfig};
use aztrack::simulator;
use aztrack::{Error, Result};

#[derive(Parser)]
#[command(
    name = "aztrack",
    version,
    about = "Online multi-speaker azimuth localization and tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to a multichannel WAV plus ground truth
    Simulate(SimulateArgs),
    /// Compute the per-frame azimuth weight map of a recording
    Localize(RunArgs),
    /// Localize and track; write the weight map and track records
    Track(RunArgs),
    /// Score a track file against a ground-truth table
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description (TOML)
    scene: PathBuf,
    /// Output directory
    #[arg(short, long)]
    output: PathBuf,
    /// Replace the seed from the scene file
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// Input recording (WAV, any rate; resampled internally)
    wav: PathBuf,
    /// Microphone layout file
    #[arg(long)]
    geometry: PathBuf,
    /// Output directory
    #[arg(short, long)]
    output: PathBuf,
    /// Pipeline settings (TOML); defaults fill in any key not present
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stop after this many analysis frames
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Track records produced by `track`
    #[arg(long)]
    tracks: PathBuf,
    /// Ground-truth table
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for the report files
    #[arg(short, long)]
    output: PathBuf,
    /// Matching gate in degrees
    #[arg(long, default_value_t = 15.0)]
    gate: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Localize(args) => process(&args, Mode::Localize),
        Command::Track(args) => process(&args, Mode::Track),
        Command::Evaluate(args) => score(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("aztrack: {err}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Clone, Copy)]
enum Mode {
    Localize,
    Track,
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let manifest = RunManifest {
        mode: "simulate".into(),
        inputs: vec![args.scene.clone()],
        config: None,
        output_dir: args.output.clone(),
        seed: args.seed,
    };
    manifest.validate()?;

    let mut scene = io::read_scene_config(&args.scene)?;
    if let Some(seed) = args.seed {
        scene.seed = seed;
    }
    let stft = StftConfig::for_rate(scene.sample_rate);
    let rendered = simulator::render(&scene, &stft)?;

    fs::create_dir_all(&args.output)?;
    io::write_wav(&args.output.join("audio.wav"), &rendered.audio)?;
    let times: Vec<f64> = (0..rendered.truth.frames.len())
        .map(|t| frame_time(t, stft.hop, stft.window_len, scene.sample_rate))
        .collect();
    io::write_truth(&args.output.join("truth.tsv"), &rendered.truth, &times)?;
    // Echo the scene as resolved (seed override applied) so the output
    // directory is reproducible on its own, and the array layout so the
    // recording can go straight into `localize`/`track`.
    io::write_scene_config(&args.output.join("scene.toml"), &scene)?;
    io::write_geometry(&args.output.join("geometry.txt"), &scene.geometry)?;
    manifest.write(&args.output)?;

    println!(
        "rendered {:.2} s, {} channels -> {}",
        scene.duration_s,
        rendered.audio.n_channels(),
        args.output.display()
    );
    Ok(())
}

fn process(args: &RunArgs, mode: Mode) -> Result<()> {
    let manifest = RunManifest {
        mode: match mode {
            Mode::Localize => "localize",
            Mode::Track => "track",
        }
        .into(),
        inputs: vec![args.wav.clone(), args.geometry.clone()],
        config: args.config.clone(),
        output_dir: args.output.clone(),
        seed: None,
    };
    manifest.validate()?;

    let cfg = load_config(args)?;
    let mut audio = io::read_wav(&args.wav, cfg.sample_rate)?;
    if let Some(n) = args.frames {
        audio = truncate_to_frames(audio, &cfg.stft, n)?;
    }
    let out = pipeline::run(&audio, cfg.clone())?;

    fs::create_dir_all(&args.output)?;
    match mode {
        Mode::Track => io::write_results(&args.output, &out, &cfg)?,
        Mode::Localize => {
            let fp = io::config_fingerprint(&cfg);
            io::write_heatmap(&args.output.join("heatmap.tsv"), &out, &fp)?;
            let cfg_json = serde_json::to_string_pretty(&cfg)
                .map_err(|e| Error::Config(e.to_string()))?;
            fs::write(args.output.join("config.json"), cfg_json)?;
        }
    }
    manifest.write(&args.output)?;

    println!(
        "processed {} frames -> {}",
        out.frame_times.len(),
        args.output.display()
    );
    Ok(())
}

fn score(args: &EvaluateArgs) -> Result<()> {
    let manifest = RunManifest {
        mode: "evaluate".into(),
        inputs: vec![args.tracks.clone(), args.truth.clone()],
        config: None,
        output_dir: args.output.clone(),
        seed: None,
    };
    manifest.validate()?;

    let records = io::read_tracks(&args.tracks)?;
    let (truth, times) = io::read_truth(&args.truth)?;
    let estimates = io::estimates_on_clock(&records, &times);
    let report = evaluate(&estimates, &truth, args.gate);

    io::write_report(&args.output, &report, &io::config_fingerprint(&manifest))?;
    manifest.write(&args.output)?;

    println!("{report}");
    Ok(())
}

/// Resolves the pipeline configuration for a run. The geometry file always
/// wins: a `[geometry]` section in the config file, if any, is replaced by
/// the contents of `--geometry` before deserializing, so config files can
/// stay layout-independent.
fn load_config(args: &RunArgs) -> Result<PipelineConfig> {
    let geometry = io::read_geometry(&args.geometry)?;
    let cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                Error::Parse {
                    file: path.display().to_string(),
                    msg: e.to_string(),
                }
            })?;
            let geom = toml::Value::try_from(&geometry)
                .map_err(|e| Error::Config(e.to_string()))?;
            table.insert("geometry".into(), geom);
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Parse {
                    file: path.display().to_string(),
                    msg: e.to_string(),
                })?
        }
        None => PipelineConfig::new(geometry),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Keeps only the samples covered by the first `n` analysis frames.
fn truncate_to_frames(audio: AudioBuffer, stft: &StftConfig, n: usize) -> Result<AudioBuffer> {
    if n == 0 {
        return Err(Error::Config("--frames must be at least 1".into()));
    }
    let keep = (n - 1) * stft.hop + stft.window_len;
    if keep >= audio.n_samples() {
        return Ok(audio);
    }
    let channels = audio
        .channels()
        .iter()
        .map(|c| c[..keep].to_vec())
        .collect();
    AudioBuffer::new(channels, audio.sample_rate())
}
