//! Synthetic multichannel scene rendering with ground truth.
//!
//! Sources are rendered far-field: each channel receives the dry signal
//! through a time-varying fractional delay given by the plane-wave TDOA of
//! the instantaneous azimuth. Optional reverberation adds an exponentially
//! decaying white tail per channel, scaled to a requested direct-to-reverb
//! ratio, and sensor noise is white at a requested SNR. Everything is a pure
//! function of the config and seed.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::frontend::{frame_time, AudioBuffer, StftConfig};
use crate::localizer::ArrayGeometry;
use crate::metrics::{GroundTruth, TruthEntry};
use crate::{angles, Error, Result};

/// Piecewise-linear azimuth path, control points as (time s, azimuth deg).
///
/// Azimuths outside (-180, 180] are wrapped; times outside the covered range
/// clamp to the nearest endpoint. Interpolation between control points takes
/// the shorter arc.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn static_at(azimuth_deg: f64) -> Self {
        Trajectory { points: vec![(0.0, azimuth_deg)] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::config("trajectory needs at least one control point"));
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("trajectory times must be strictly increasing"));
        }
        Ok(())
    }

    /// Index of the segment containing `t` and the fractional position in it.
    fn segment(&self, t: f64) -> (usize, f64) {
        if self.points.len() == 1 || t <= self.points[0].0 {
            return (0, 0.0);
        }
        let last = self.points.len() - 1;
        if t >= self.points[last].0 {
            return (last - 1, 1.0);
        }
        let k = self.points.partition_point(|p| p.0 <= t) - 1;
        let (t0, _) = self.points[k];
        let (t1, _) = self.points[k + 1];
        (k, (t - t0) / (t1 - t0))
    }

    pub fn azimuth_at(&self, t: f64) -> f64 {
        let (k, frac) = self.segment(t);
        if self.points.len() == 1 {
            return angles::wrap_deg(self.points[0].1);
        }
        let a0 = angles::wrap_deg(self.points[k].1);
        let a1 = angles::wrap_deg(self.points[k + 1].1);
        angles::wrap_deg(a0 + frac * angles::diff_deg(a1, a0))
    }
}

/// What the source emits before spatialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSignal {
    /// Gaussian white noise, unit variance.
    WhiteNoise,
    /// Speech surrogate: per-syllable harmonic combs with a two-formant
    /// spectral envelope, under a 4 Hz raised-cosine envelope with random
    /// syllable drops. Sparse in both time and frequency, so concurrent
    /// talkers mostly own disjoint time-frequency bins the way real voices
    /// do.
    SpeechLike,
    /// Mono WAV file, used as-is (must match the scene sample rate).
    File { path: String },
}

/// One source: where it is, what it emits, and when it is talking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceConfig {
    pub trajectory: Trajectory,
    pub signal: SourceSignal,
    /// Speech intervals as (start s, end s); empty means always on.
    #[serde(default)]
    pub activity: Vec<(f64, f64)>,
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        if self.activity.iter().any(|&(a, b)| b <= a) {
            return Err(Error::config("activity intervals must have start < end"));
        }
        Ok(())
    }

    fn active_at(&self, t: f64) -> bool {
        self.activity.is_empty() || self.activity.iter().any(|&(a, b)| t >= a && t < b)
    }
}

/// Reverberation model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReverbConfig {
    None,
    /// Exponentially decaying white tail, independent per channel.
    Tail { t60_s: f64, drr_db: f64 },
}

fn default_snr() -> f64 {
    f64::INFINITY
}

fn default_sample_rate() -> u32 {
    16_000
}

/// Full scene description; `render` is deterministic given this and nothing
/// else.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub geometry: ArrayGeometry,
    pub sources: Vec<SourceConfig>,
    /// Sensor SNR in dB against the clean (reverberant) render; infinite
    /// disables noise.
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    #[serde(default = "ReverbConfig::none")]
    pub reverb: ReverbConfig,
    pub duration_s: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub seed: u64,
}

impl ReverbConfig {
    fn none() -> Self {
        ReverbConfig::None
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.duration_s <= 0.0 {
            return Err(Error::config("scene duration must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if let ReverbConfig::Tail { t60_s, .. } = self.reverb {
            if t60_s <= 0.0 {
                return Err(Error::config("reverberation time must be positive"));
            }
        }
        for s in &self.sources {
            s.validate()?;
        }
        Ok(())
    }
}

/// Audio plus the truth it was rendered from, on the analysis frame clock.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub audio: AudioBuffer,
    pub truth: GroundTruth,
}

// RNG stream ids; each randomized quantity gets its own ChaCha stream so the
// realization of one never shifts another (same seed, add reverb, sources
// stay bitwise identical).
const STREAM_SOURCE: u64 = 0;
const STREAM_ENVELOPE: u64 = 1;
const STREAM_REVERB: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream_rng(seed: u64, kind: u64, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((kind << 32) | index as u64);
    rng
}

/// Half-width of the interpolation kernel in samples; 32 taps total.
const SINC_HALF: isize = 16;

/// Hann-windowed sinc, zero outside (-16, 16).
fn windowed_sinc(x: f64) -> f64 {
    let half = SINC_HALF as f64;
    if x.abs() >= half {
        return 0.0;
    }
    let s = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    s * 0.5 * (1.0 + (PI * x / half).cos())
}

/// Band-limited read of `signal` at fractional position `pos` (samples);
/// positions off either end see zeros.
fn fractional_read(signal: &[f64], pos: f64) -> f64 {
    let base = pos.floor() as isize;
    let mut acc = 0.0;
    for j in (base - SINC_HALF + 1)..=(base + SINC_HALF) {
        if j < 0 || j >= signal.len() as isize {
            continue;
        }
        acc += signal[j as usize] * windowed_sinc(pos - j as f64);
    }
    acc
}

const SYLLABLE_RATE_HZ: f64 = 4.0;
const SYLLABLE_DROP_PROB: f64 = 0.2;
const SYLLABLE_HARMONICS: usize = 80;
/// Broadband aspiration mixed into each syllable, relative to the comb.
/// Kept well under the partials: aspiration from two concurrent talkers
/// lands in the same bins and would smear the interchannel evidence there.
const ASPIRATION_LEVEL: f64 = 0.08;
/// Pitch registers cycled over source index, Hz. Distinct registers keep
/// concurrent voices on different combs, so each owns its own bins. The
/// floors sit near three analysis bins of the 16 kHz default STFT: a lower
/// fundamental packs partials closer than the window mainlobe, the comb
/// smears into a continuum, and one talker can mask the entire band.
const PITCH_REGISTERS: [(f64, f64); 3] = [(190.0, 250.0), (300.0, 380.0), (240.0, 300.0)];

/// One syllable of the speech surrogate: a pitch-glided harmonic comb
/// shaped by two random formants.
struct Syllable {
    gain: f64,
    f0: f64,
    glide: f64,
    phases: Vec<f64>,
    amps: Vec<f64>,
}

fn draw_syllable(rng: &mut ChaCha20Rng, fs: f64, register: (f64, f64)) -> Syllable {
    let kept = !rng.gen_bool(SYLLABLE_DROP_PROB);
    let z: f64 = StandardNormal.sample(rng);
    let gain = if kept { (0.7 * z).exp() } else { 0.0 };
    let f0 = register.0 * (register.1 / register.0).powf(rng.gen::<f64>());
    let glide = 0.2 * (rng.gen::<f64>() - 0.5);
    let f1 = 300.0 + 600.0 * rng.gen::<f64>();
    let b1 = 80.0 + 80.0 * rng.gen::<f64>();
    let f2 = 1200.0 + 1400.0 * rng.gen::<f64>();
    let b2 = 150.0 + 150.0 * rng.gen::<f64>();
    let phases: Vec<f64> =
        (0..SYLLABLE_HARMONICS).map(|_| 2.0 * PI * rng.gen::<f64>()).collect();
    let f_max = 0.45 * fs;
    let mut amps: Vec<f64> = (0..SYLLABLE_HARMONICS)
        .map(|h| {
            let f = (h + 1) as f64 * f0;
            if f > f_max {
                return 0.0;
            }
            // Gentle high-frequency rolloff plus two formant bumps.
            let tilt = 1.0 / (1.0 + (f / 500.0).powi(2)).sqrt();
            let formants = 3.0
                * ((-(f - f1).powi(2) / (2.0 * b1 * b1)).exp()
                    + (-(f - f2).powi(2) / (2.0 * b2 * b2)).exp());
            tilt * (1.0 + formants)
        })
        .collect();
    let power: f64 = amps.iter().map(|a| a * a / 2.0).sum();
    if power > 0.0 {
        let s = power.sqrt().recip();
        for a in &mut amps {
            *a *= s;
        }
    }
    Syllable { gain, f0, glide, phases, amps }
}

fn dry_signal(
    cfg: &SceneConfig,
    source_idx: usize,
    source: &SourceConfig,
    n_samples: usize,
) -> Result<Vec<f64>> {
    let fs = cfg.sample_rate as f64;
    let mut rng = stream_rng(cfg.seed, STREAM_SOURCE, source_idx);
    let mut samples = match &source.signal {
        SourceSignal::WhiteNoise => {
            (0..n_samples).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
        }
        SourceSignal::SpeechLike => {
            // Each source gets a random envelope phase and per-syllable
            // gains, so concurrent speakers interleave rather than peak in
            // lockstep; the feature chain needs frames where one of them
            // dominates.
            let mut env_rng = stream_rng(cfg.seed, STREAM_ENVELOPE, source_idx);
            let phase_cycles: f64 = env_rng.gen();
            let n_cycles = (n_samples as f64 * SYLLABLE_RATE_HZ / fs).ceil() as usize + 2;
            let register = PITCH_REGISTERS[source_idx % PITCH_REGISTERS.len()];
            let syllables: Vec<Syllable> =
                (0..n_cycles).map(|_| draw_syllable(&mut env_rng, fs, register)).collect();
            (0..n_samples)
                .map(|n| {
                    let pos = SYLLABLE_RATE_HZ * n as f64 / fs + phase_cycles;
                    let syl = &syllables[pos as usize];
                    let white: f64 = StandardNormal.sample(&mut rng);
                    if syl.gain == 0.0 {
                        return 0.0;
                    }
                    let u = pos.fract();
                    let env = 0.5 * (1.0 - (2.0 * PI * pos).cos());
                    // Comb phase advances with a linear pitch glide across
                    // the syllable; phases reset each syllable, which the
                    // zero of the envelope hides.
                    let cycles =
                        syl.f0 * (u / SYLLABLE_RATE_HZ) * (1.0 + 0.5 * syl.glide * u);
                    let mut comb = 0.0;
                    for h in 0..SYLLABLE_HARMONICS {
                        if syl.amps[h] > 0.0 {
                            comb += syl.amps[h]
                                * (syl.phases[h] + 2.0 * PI * (h + 1) as f64 * cycles).sin();
                        }
                    }
                    syl.gain * env * (comb + ASPIRATION_LEVEL * white)
                })
                .collect()
        }
        SourceSignal::File { path } => {
            let mut reader = hound::WavReader::open(path)
                .map_err(|e| Error::Audio(format!("open {path}: {e}")))?;
            let spec = reader.spec();
            if spec.sample_rate != cfg.sample_rate {
                return Err(Error::Audio(format!(
                    "source file {path} is {} Hz, scene wants {}",
                    spec.sample_rate, cfg.sample_rate
                )));
            }
            let scale = match spec.sample_format {
                hound::SampleFormat::Float => 1.0,
                hound::SampleFormat::Int => (1i64 << (spec.bits_per_sample - 1)) as f64,
            };
            let mut out = Vec::with_capacity(n_samples);
            match spec.sample_format {
                hound::SampleFormat::Float => {
                    for (k, s) in reader.samples::<f32>().enumerate() {
                        if k % spec.channels as usize != 0 {
                            continue;
                        }
                        out.push(s.map_err(|e| Error::Audio(e.to_string()))? as f64);
                        if out.len() == n_samples {
                            break;
                        }
                    }
                }
                hound::SampleFormat::Int => {
                    for (k, s) in reader.samples::<i32>().enumerate() {
                        if k % spec.channels as usize != 0 {
                            continue;
                        }
                        out.push(s.map_err(|e| Error::Audio(e.to_string()))? as f64 / scale);
                        if out.len() == n_samples {
                            break;
                        }
                    }
                }
            }
            out.resize(n_samples, 0.0);
            out
        }
    };
    // Hard activity gate; the truth table uses the same intervals.
    if !source.activity.is_empty() {
        for (n, s) in samples.iter_mut().enumerate() {
            if !source.active_at(n as f64 / fs) {
                *s = 0.0;
            }
        }
    }
    Ok(samples)
}

/// Per-sample delay of one channel for this source, in samples.
///
/// The TDOA is sampled every 10 ms along the azimuth path and interpolated
/// linearly in between. Interpolating the TDOA directly between sparse user
/// control points would cut corners badly (the TDOA is a cosine of the
/// azimuth, so widely separated azimuths can share a TDOA), hence the fixed
/// fine grid.
fn delay_track(
    cfg: &SceneConfig,
    traj: &Trajectory,
    channel: usize,
    n_samples: usize,
) -> Vec<f64> {
    let fs = cfg.sample_rate as f64;
    let step = ((0.010 * fs).round() as usize).max(1);
    let n_nodes = n_samples / step + 2;
    let node_tau: Vec<f64> = (0..n_nodes)
        .map(|k| {
            let az = traj.azimuth_at(k as f64 * step as f64 / fs);
            cfg.geometry.tdoa(channel, 0, az) * fs
        })
        .collect();
    (0..n_samples)
        .map(|n| {
            let k = n / step;
            let frac = (n - k * step) as f64 / step as f64;
            node_tau[k] + frac * (node_tau[k + 1] - node_tau[k])
        })
        .collect()
}

/// Linear convolution via FFT, output truncated to the signal length.
fn convolve_truncated(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let full = signal.len() + kernel.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> =
        signal.iter().map(|&x| Complex64::new(x, 0.0)).chain(std::iter::repeat(
            Complex64::new(0.0, 0.0),
        )).take(n).collect();
    let mut b: Vec<Complex64> =
        kernel.iter().map(|&x| Complex64::new(x, 0.0)).chain(std::iter::repeat(
            Complex64::new(0.0, 0.0),
        )).take(n).collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    a.iter().take(signal.len()).map(|c| c.re / n as f64).collect()
}

fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Renders the scene: spatialized sources, optional reverb tail, sensor
/// noise, and ground truth on the frame clock of `stft`.
pub fn render(cfg: &SceneConfig, stft: &StftConfig) -> Result<RenderedScene> {
    cfg.validate()?;
    stft.validate()?;
    let fs = cfg.sample_rate as f64;
    let n_samples = (cfg.duration_s * fs).round() as usize;
    let n_channels = cfg.geometry.n_channels();

    let mut channels = vec![vec![0.0f64; n_samples]; n_channels];
    for (s, source) in cfg.sources.iter().enumerate() {
        let dry = dry_signal(cfg, s, source, n_samples)?;
        for (i, ch) in channels.iter_mut().enumerate() {
            let delays = delay_track(cfg, &source.trajectory, i, n_samples);
            for n in 0..n_samples {
                ch[n] += fractional_read(&dry, n as f64 - delays[n]);
            }
        }
    }

    if let ReverbConfig::Tail { t60_s, drr_db } = cfg.reverb {
        // Amplitude envelope exp(-gamma n) whose energy has dropped 60 dB
        // after t60 seconds.
        let gamma = 3.0 * 10f64.ln() / (t60_s * fs);
        let n_taps = (t60_s * fs).ceil() as usize;
        let target_ratio = 10f64.powf(drr_db / 10.0);
        for (i, ch) in channels.iter_mut().enumerate() {
            let mut rng = stream_rng(cfg.seed, STREAM_REVERB, i);
            // Tap 0 is the direct path and stays out of the tail.
            let kernel: Vec<f64> = (0..n_taps)
                .map(|k| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e * (-gamma * (k + 1) as f64).exp()
                })
                .collect();
            let mut tail = convolve_truncated(ch, &kernel);
            // One dead sample before the tail starts.
            tail.rotate_right(1);
            tail[0] = 0.0;
            let p_direct = mean_square(ch);
            let p_tail = mean_square(&tail);
            if p_tail > 0.0 {
                let scale = (p_direct / (p_tail * target_ratio)).sqrt();
                for (x, r) in ch.iter_mut().zip(&tail) {
                    *x += scale * r;
                }
            }
        }
    }

    if cfg.snr_db.is_finite() {
        let factor = 10f64.powf(cfg.snr_db / 10.0);
        for (i, ch) in channels.iter_mut().enumerate() {
            let p_clean = mean_square(ch);
            let sigma = (p_clean / factor).sqrt();
            let mut rng = stream_rng(cfg.seed, STREAM_NOISE, i);
            for x in ch.iter_mut() {
                let w: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * w;
            }
        }
    }

    let n_frames = if n_samples < stft.window_len {
        0
    } else {
        (n_samples - stft.window_len) / stft.hop + 1
    };
    let frames = (0..n_frames)
        .map(|t| {
            let time = frame_time(t, stft.hop, stft.window_len, cfg.sample_rate);
            cfg.sources
                .iter()
                .enumerate()
                .map(|(s, src)| TruthEntry {
                    id: s as u32,
                    azimuth_deg: src.trajectory.azimuth_at(time),
                    active: src.active_at(time),
                })
                .collect()
        })
        .collect();

    Ok(RenderedScene {
        audio: AudioBuffer::new(channels, cfg.sample_rate)?,
        truth: GroundTruth { frames },
    })
}
