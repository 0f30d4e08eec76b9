//! File ingestion and result serialization: WAV audio with resampling,
//! geometry and config files, ground-truth tables, and the delimited output
//! files a run leaves behind.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::frontend::AudioBuffer;
use crate::localizer::ArrayGeometry;
use crate::metrics::{EstimateEntry, EstimateSequence, EvalReport, GroundTruth, TruthEntry};
use crate::pipeline::{PipelineConfig, RunOutput};
use crate::simulator::SceneConfig;
use crate::tracker::TrackReport;
use crate::{Error, Result};

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { file: path.display().to_string(), msg: msg.into() }
}

/// Windowed-sinc rate conversion.
///
/// Each output sample evaluates the ideal lowpass (cut at the narrower of
/// the two Nyquist bands) under a Hann window, 32 input-side taps widened by
/// the decimation ratio when downsampling.
pub fn resample_sinc(input: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    use std::f64::consts::PI;
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    // Cutoff and kernel stretch relative to the input rate.
    let r = ratio.min(1.0);
    let half = (16.0 / r).ceil();
    let n_out = (input.len() as f64 * ratio).floor() as usize;
    (0..n_out)
        .map(|n| {
            let pos = n as f64 / ratio;
            let lo = (pos - half).ceil().max(0.0) as usize;
            let hi = ((pos + half).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let x = pos - k as f64;
                let s = if x == 0.0 { r } else { r * (PI * r * x).sin() / (PI * r * x) };
                let w = 0.5 * (1.0 + (PI * x / half).cos());
                acc += input[k] * s * w;
            }
            acc
        })
        .collect()
}

/// Reads a WAV file, normalizes integer PCM to [-1, 1], and resamples every
/// channel to `target_rate`.
pub fn read_wav(path: &Path, target_rate: u32) -> Result<AudioBuffer> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::Wav(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?
        }
    };
    if interleaved.len() % n_ch != 0 {
        return Err(Error::Wav(format!("{}: truncated sample data", path.display())));
    }
    let n_samples = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(n_samples); n_ch];
    for (k, &v) in interleaved.iter().enumerate() {
        channels[k % n_ch].push(v);
    }
    if spec.sample_rate != target_rate {
        channels = channels
            .into_iter()
            .map(|c| resample_sinc(&c, spec.sample_rate, target_rate))
            .collect();
    }
    AudioBuffer::new(channels, target_rate)
}

/// Writes a multichannel buffer as 32-bit float WAV.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: audio.n_channels() as u16,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    for n in 0..audio.n_samples() {
        for ch in audio.channels() {
            writer
                .write_sample(ch[n] as f32)
                .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
        }
    }
    writer.finalize().map_err(|e| Error::Wav(format!("{}: {e}", path.display())))
}

/// Reads a geometry file: optional `speed_of_sound <m/s>` header, then one
/// `x y z` row per microphone, meters. `#` starts a comment.
pub fn read_geometry(path: &Path) -> Result<ArrayGeometry> {
    let file = fs::File::open(path).map_err(Error::Io)?;
    let mut speed_of_sound = 343.0;
    let mut mic_positions: Vec<[f64; 3]> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::Io)?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields[0] == "speed_of_sound" {
            if fields.len() != 2 {
                return Err(parse_err(path, format!("line {}: bad header", lineno + 1)));
            }
            speed_of_sound = fields[1]
                .parse()
                .map_err(|_| parse_err(path, format!("line {}: bad speed", lineno + 1)))?;
            continue;
        }
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                format!("line {}: expected 'x y z', got {content:?}", lineno + 1),
            ));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f
                .parse()
                .map_err(|_| parse_err(path, format!("line {}: bad coordinate", lineno + 1)))?;
        }
        if mic_positions.contains(&p) {
            return Err(parse_err(path, format!("line {}: duplicate microphone", lineno + 1)));
        }
        mic_positions.push(p);
    }
    let geom = ArrayGeometry { mic_positions, speed_of_sound };
    geom.validate()?;
    Ok(geom)
}

pub fn write_geometry(path: &Path, geom: &ArrayGeometry) -> Result<()> {
    let mut out = String::new();
    out.push_str("# microphone positions, one per row, meters\n");
    out.push_str(&format!("speed_of_sound {}\n", geom.speed_of_sound));
    for p in &geom.mic_positions {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(Error::Io)
}

pub fn read_pipeline_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(Error::Io)?;
    let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_pipeline_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(Error::Io)
}

pub fn read_scene_config(path: &Path) -> Result<SceneConfig> {
    let text = fs::read_to_string(path).map_err(Error::Io)?;
    let cfg: SceneConfig = toml::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_scene_config(path: &Path, cfg: &SceneConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(Error::Io)
}

/// Short stable digest of any serializable config, stamped into every output
/// file so results stay traceable to their settings.
pub fn config_fingerprint<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes ground truth as a delimited table: time, speaker id, azimuth,
/// active flag; one row per speaker per frame.
pub fn write_truth(path: &Path, truth: &GroundTruth, frame_times: &[f64]) -> Result<()> {
    if truth.frames.len() != frame_times.len() {
        return Err(Error::dim(format!(
            "{} truth frames vs {} times",
            truth.frames.len(),
            frame_times.len()
        )));
    }
    let file = fs::File::create(path).map_err(Error::Io)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "time_s\tid\tazimuth_deg\tactive").map_err(Error::Io)?;
    for (frame, time) in truth.frames.iter().zip(frame_times) {
        for e in frame {
            writeln!(
                w,
                "{:.6}\t{}\t{:.4}\t{}",
                time,
                e.id,
                e.azimuth_deg,
                if e.active { 1 } else { 0 }
            )
            .map_err(Error::Io)?;
        }
    }
    Ok(())
}

/// Reads a truth table back; rows sharing a timestamp form one frame.
/// Returns the frames and their times, in file order.
pub fn read_truth(path: &Path) -> Result<(GroundTruth, Vec<f64>)> {
    let file = fs::File::open(path).map_err(Error::Io)?;
    let mut frames: Vec<Vec<TruthEntry>> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::Io)?;
        let content = line.trim();
        if content.is_empty() || content.starts_with('#') || content.starts_with("time_s") {
            continue;
        }
        let fields: Vec<&str> = content.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, format!("line {}: expected 4 columns", lineno + 1)));
        }
        let bad = |what: &str| parse_err(path, format!("line {}: bad {what}", lineno + 1));
        let time: f64 = fields[0].parse().map_err(|_| bad("time"))?;
        let entry = TruthEntry {
            id: fields[1].parse().map_err(|_| bad("id"))?,
            azimuth_deg: fields[2].parse().map_err(|_| bad("azimuth"))?,
            active: fields[3].trim() == "1",
        };
        if times.last() == Some(&time) {
            frames.last_mut().unwrap().push(entry);
        } else {
            times.push(time);
            frames.push(vec![entry]);
        }
    }
    Ok((GroundTruth { frames }, times))
}

/// One row of a tracks file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub time_s: f64,
    pub report: TrackReport,
}

/// Writes per-frame track states as line-delimited records.
pub fn write_tracks(path: &Path, out: &RunOutput) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::Io)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "time_s\tid\tazimuth_deg\tvelocity_rad_per_frame\tactive").map_err(Error::Io)?;
    for (frame, time) in out.frames.iter().zip(&out.frame_times) {
        for t in &frame.tracks {
            writeln!(
                w,
                "{:.6}\t{}\t{:.4}\t{:.6}\t{}",
                time,
                t.id,
                t.azimuth_deg,
                t.velocity,
                if t.active { 1 } else { 0 }
            )
            .map_err(Error::Io)?;
        }
    }
    Ok(())
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let file = fs::File::open(path).map_err(Error::Io)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::Io)?;
        let content = line.trim();
        if content.is_empty() || content.starts_with('#') || content.starts_with("time_s") {
            continue;
        }
        let fields: Vec<&str> = content.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(path, format!("line {}: expected 5 columns", lineno + 1)));
        }
        let bad = |what: &str| parse_err(path, format!("line {}: bad {what}", lineno + 1));
        records.push(TrackRecord {
            time_s: fields[0].parse().map_err(|_| bad("time"))?,
            report: TrackReport {
                id: fields[1].parse().map_err(|_| bad("id"))?,
                azimuth_deg: fields[2].parse().map_err(|_| bad("azimuth"))?,
                velocity: fields[3].parse().map_err(|_| bad("velocity"))?,
                active: fields[4].trim() == "1",
                trace: 0.0,
            },
        });
    }
    Ok(records)
}

/// Groups track records onto a frame clock: each record lands on the nearest
/// clock time, and only records of active tracks become estimates.
pub fn estimates_on_clock(records: &[TrackRecord], clock: &[f64]) -> EstimateSequence {
    let mut frames: Vec<Vec<EstimateEntry>> = vec![Vec::new(); clock.len()];
    for r in records {
        if !r.report.active {
            continue;
        }
        let Some(frame) = clock
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - r.time_s).abs().total_cmp(&(b.1 - r.time_s).abs()))
            .map(|(k, _)| k)
        else {
            continue;
        };
        frames[frame].push(EstimateEntry { id: r.report.id, azimuth_deg: r.report.azimuth_deg });
    }
    EstimateSequence { frames }
}

/// Writes the weight heatmap as a delimited matrix: header row of candidate
/// azimuths, one row per frame led by its timestamp.
pub fn write_heatmap(path: &Path, out: &RunOutput, fingerprint: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::Io)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config {fingerprint}").map_err(Error::Io)?;
    let header: Vec<String> = out.azimuths.iter().map(|a| format!("{a:.4}")).collect();
    writeln!(w, "time_s\t{}", header.join("\t")).map_err(Error::Io)?;
    for (k, time) in out.frame_times.iter().enumerate() {
        let row: Vec<String> =
            out.heatmap.row(k).iter().map(|v| format!("{v:.10}")).collect();
        writeln!(w, "{:.6}\t{}", time, row.join("\t")).map_err(Error::Io)?;
    }
    Ok(())
}

/// Writes the evaluation report: key-value text, a JSON twin, and the
/// per-frame match table.
pub fn write_report(dir: &Path, report: &EvalReport, fingerprint: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::Io)?;
    let text = format!("# config {fingerprint}\n{report}\n");
    fs::write(dir.join("report.txt"), text).map_err(Error::Io)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("report.json"), json).map_err(Error::Io)?;

    let file = fs::File::create(dir.join("report_frames.tsv")).map_err(Error::Io)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config {fingerprint}").map_err(Error::Io)?;
    writeln!(w, "frame\ttruth_id\testimate_id\terror_deg\tmisses\tfalse_alarms")
        .map_err(Error::Io)?;
    for d in &report.detail {
        if d.matches.is_empty() {
            writeln!(w, "{}\t-\t-\t-\t{}\t{}", d.frame, d.misses, d.false_alarms)
                .map_err(Error::Io)?;
        }
        for &(truth_id, est_id, err) in &d.matches {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.4}\t{}\t{}",
                d.frame, truth_id, est_id, err, d.misses, d.false_alarms
            )
            .map_err(Error::Io)?;
        }
    }
    Ok(())
}

/// Writes the full result set of a pipeline run into `dir`.
pub fn write_results(dir: &Path, out: &RunOutput, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::Io)?;
    let fp = config_fingerprint(cfg);
    write_heatmap(&dir.join("heatmap.tsv"), out, &fp)?;
    write_tracks(&dir.join("tracks.tsv"), out)?;
    let cfg_json =
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("config.json"), cfg_json).map_err(Error::Io)?;
    Ok(())
}

/// What a CLI invocation resolved to; written next to the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: String,
    pub inputs: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
}

impl RunManifest {
    /// Checks that every referenced input exists before any work starts.
    pub fn validate(&self) -> Result<()> {
        for p in self.inputs.iter().chain(&self.config) {
            if !p.exists() {
                return Err(Error::Config(format!("input not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::Io)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json).map_err(Error::Io)
    }
}
