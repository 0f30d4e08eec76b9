//! Multichannel STFT front end: windowed analysis, speech/noise frame
//! classification against a running noise floor, and magnitude-domain
//! spectral subtraction of that floor.
//!
//! The classifier and the subtractor share one state machine so that batch
//! and streaming use produce identical trajectories: the noise floor is only
//! updated on frames labeled noise, and the subtraction removes the floor
//! that was current when the frame arrived.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::{Error, Result};

/// Analysis window shape. All windows are periodic (DFT-even).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hamming,
    Hann,
    Rect,
}

impl WindowKind {
    /// Window samples for a length-`n` periodic window.
    pub fn samples(self, n: usize) -> Vec<f64> {
        let nf = n as f64;
        (0..n)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / nf;
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * phase.cos(),
                    WindowKind::Hann => 0.5 * (1.0 - phase.cos()),
                    WindowKind::Rect => 1.0,
                }
            })
            .collect()
    }
}

/// Short-time analysis parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    /// Analysis window length in samples.
    pub window_len: usize,
    /// Hop between consecutive frames in samples.
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig::for_rate(16_000)
    }
}

impl StftConfig {
    /// 16 ms window, 8 ms hop at the given rate, periodic Hamming.
    pub fn for_rate(sample_rate: u32) -> Self {
        let window_len = (sample_rate as f64 * 0.016).round() as usize;
        StftConfig {
            window_len,
            hop: window_len / 2,
            window: WindowKind::Hamming,
        }
    }

    /// Number of one-sided frequency bins.
    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.window_len % 2 != 0 {
            return Err(Error::config("window length must be even and >= 2"));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::config("hop must be in 1..=window length"));
        }
        Ok(())
    }
}

/// Multichannel time-domain audio. Channels share one length and rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AudioBuffer {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer from per-channel sample vectors.
    ///
    /// Fails unless there are at least two channels of equal length and a
    /// nonzero sample rate.
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::audio("need at least 2 channels"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::audio("channels differ in length"));
        }
        if sample_rate == 0 {
            return Err(Error::audio("sample rate must be nonzero"));
        }
        Ok(AudioBuffer {
            channels,
            sample_rate,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }
}

/// Complex STFT coefficients, laid out `[channel, frame, bin]` (one-sided).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Spectrogram {
    pub data: Array3<Complex64>,
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_bins(&self) -> usize {
        self.data.shape()[2]
    }

    /// Center frequency of a bin in Hz.
    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.window_len as f64
    }

    /// Timestamp of a frame in seconds (center of the analysis window).
    pub fn frame_time(&self, frame: usize) -> f64 {
        frame_time(frame, self.hop, self.window_len, self.sample_rate)
    }

    /// View of one frame across channels, shape `[channel, bin]`.
    pub fn frame(&self, t: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(1), t)
    }
}

/// Timestamp of frame `t`: midpoint of its analysis window, in seconds.
pub fn frame_time(frame: usize, hop: usize, window_len: usize, sample_rate: u32) -> f64 {
    (frame * hop) as f64 / sample_rate as f64 + window_len as f64 / (2.0 * sample_rate as f64)
}

/// Reusable forward FFT for one window length.
pub(crate) struct FftKernel {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    scratch: Vec<Complex64>,
}

impl FftKernel {
    pub(crate) fn new(cfg: &StftConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.window_len);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        FftKernel {
            fft,
            window: cfg.window.samples(cfg.window_len),
            scratch,
        }
    }

    /// Windows `samples` (length = window_len) and returns the one-sided
    /// spectrum.
    pub(crate) fn forward(&mut self, samples: &[f64], out: &mut [Complex64]) {
        let n = self.window.len();
        debug_assert_eq!(samples.len(), n);
        let mut buf: Vec<Complex64> = samples
            .iter()
            .zip(&self.window)
            .map(|(&s, &w)| Complex64::new(s * w, 0.0))
            .collect();
        self.fft.process_with_scratch(&mut buf, &mut self.scratch);
        out.copy_from_slice(&buf[..n / 2 + 1]);
    }
}

/// Computes the one-sided multichannel STFT.
///
/// Frame `t` covers samples `[t*hop, t*hop + window_len)`; only complete
/// frames are produced. Fails when the buffer is shorter than one window.
pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = audio.n_samples();
    if n < cfg.window_len {
        return Err(Error::audio(format!(
            "insufficient samples: {} < window length {}",
            n, cfg.window_len
        )));
    }
    let n_frames = (n - cfg.window_len) / cfg.hop + 1;
    let n_bins = cfg.n_bins();
    let mut kernel = FftKernel::new(cfg);
    let mut data = Array3::default((audio.n_channels(), n_frames, n_bins));
    let mut row = vec![Complex64::default(); n_bins];
    for (i, ch) in audio.channels().iter().enumerate() {
        for t in 0..n_frames {
            let start = t * cfg.hop;
            kernel.forward(&ch[start..start + cfg.window_len], &mut row);
            for (f, &v) in row.iter().enumerate() {
                data[[i, t, f]] = v;
            }
        }
    }
    Ok(Spectrogram {
        data,
        sample_rate: audio.sample_rate(),
        window_len: cfg.window_len,
        hop: cfg.hop,
    })
}

/// Per-(frame, bin) speech flags; `true` means speech.
pub type FrameLabels = Array2<bool>;

/// Tunables for the classifier and the subtractor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    /// Power threshold factor over the squared noise floor.
    pub beta: f64,
    /// Time constant of the noise-floor magnitude EMA, seconds.
    pub floor_time_constant_s: f64,
    /// Initial span treated as noise while the floor bootstraps, seconds.
    pub warmup_s: f64,
    /// Weight of the newest frame in the smoothed-power EMA.
    pub power_smooth: f64,
    /// Scale on the subtracted floor magnitude.
    pub oversubtract: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            beta: 2.0,
            floor_time_constant_s: 1.0,
            warmup_s: 0.5,
            power_smooth: 0.5,
            oversubtract: 1.0,
        }
    }
}

/// Streaming classifier/subtractor state.
///
/// The floor is a per-(channel, bin) magnitude estimate: a running mean over
/// the warm-up span (which is always treated as noise so the estimate can
/// bootstrap), then an EMA updated only on noise-labeled frames. A frame/bin
/// is speech when the smoothed channel-mean power exceeds `beta` times the
/// channel-mean squared floor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontendState {
    cfg: FrontendConfig,
    floors: Array2<f64>,
    smoothed_power: Array1<f64>,
    frames_seen: u64,
    warmup_frames: u64,
    ema_alpha: f64,
}

impl FrontendState {
    pub fn new(cfg: FrontendConfig, n_channels: usize, n_bins: usize, sample_rate: u32, hop: usize) -> Self {
        let hop_s = hop as f64 / sample_rate as f64;
        let warmup_frames = (cfg.warmup_s / hop_s).round() as u64;
        let ema_alpha = 1.0 - (-hop_s / cfg.floor_time_constant_s).exp();
        FrontendState {
            cfg,
            floors: Array2::zeros((n_channels, n_bins)),
            smoothed_power: Array1::zeros(n_bins),
            frames_seen: 0,
            warmup_frames,
            ema_alpha,
        }
    }

    /// Classifies one frame and subtracts the floor from its speech bins.
    ///
    /// `forced_labels`, when given, overrides the classification decision
    /// (the floor then follows the caller's labels instead).
    /// Returns the per-bin speech flags and the processed frame
    /// (`[channel, bin]`). Noise bins pass through unchanged.
    pub fn process_frame(
        &mut self,
        frame: ArrayView2<'_, Complex64>,
        forced_labels: Option<&[bool]>,
    ) -> (Vec<bool>, Array2<Complex64>) {
        let (n_ch, n_bins) = (frame.shape()[0], frame.shape()[1]);
        debug_assert_eq!((n_ch, n_bins), self.floors.dim());
        let in_warmup = self.frames_seen < self.warmup_frames;
        let mut labels = vec![false; n_bins];
        let mut out = frame.to_owned();

        for f in 0..n_bins {
            let inst_power =
                (0..n_ch).map(|i| frame[[i, f]].norm_sqr()).sum::<f64>() / n_ch as f64;
            let s = &mut self.smoothed_power[f];
            *s = if self.frames_seen == 0 {
                inst_power
            } else {
                (1.0 - self.cfg.power_smooth) * *s + self.cfg.power_smooth * inst_power
            };

            let floor_sq =
                (0..n_ch).map(|i| self.floors[[i, f]].powi(2)).sum::<f64>() / n_ch as f64;
            let mut speech = if in_warmup {
                false
            } else {
                *s > self.cfg.beta * floor_sq
            };
            if let Some(forced) = forced_labels {
                speech = forced[f];
            }
            labels[f] = speech;

            if speech {
                for i in 0..n_ch {
                    let mag = frame[[i, f]].norm();
                    let reduced = (mag - self.cfg.oversubtract * self.floors[[i, f]]).max(0.0);
                    out[[i, f]] = if mag > 0.0 {
                        frame[[i, f]] * (reduced / mag)
                    } else {
                        Complex64::default()
                    };
                }
            } else {
                for i in 0..n_ch {
                    let mag = frame[[i, f]].norm();
                    let fl = &mut self.floors[[i, f]];
                    if in_warmup {
                        *fl += (mag - *fl) / (self.frames_seen + 1) as f64;
                    } else {
                        *fl = (1.0 - self.ema_alpha) * *fl + self.ema_alpha * mag;
                    }
                }
            }
        }
        self.frames_seen += 1;
        (labels, out)
    }
}

/// Labels every (frame, bin) of a spectrogram as speech or noise.
pub fn classify_frames(spec: &Spectrogram, cfg: &FrontendConfig) -> FrameLabels {
    let mut state = FrontendState::new(
        *cfg,
        spec.n_channels(),
        spec.n_bins(),
        spec.sample_rate,
        spec.hop,
    );
    let mut labels = Array2::default((spec.n_frames(), spec.n_bins()));
    for t in 0..spec.n_frames() {
        let (row, _) = state.process_frame(spec.frame(t), None);
        for (f, v) in row.into_iter().enumerate() {
            labels[[t, f]] = v;
        }
    }
    labels
}

/// Subtracts the running noise-floor magnitude from speech bins.
///
/// The floor trajectory is driven by `labels`: noise bins update it, speech
/// bins get `max(|x| - floor, 0)` with the phase preserved. Feeding the
/// labels produced by [`classify_frames`] reproduces the classifier's
/// internal floor exactly.
pub fn spectral_subtract(
    spec: &Spectrogram,
    labels: &FrameLabels,
    cfg: &FrontendConfig,
) -> Result<Spectrogram> {
    if labels.dim() != (spec.n_frames(), spec.n_bins()) {
        return Err(Error::dim(format!(
            "labels {:?} vs spectrogram frames x bins ({}, {})",
            labels.dim(),
            spec.n_frames(),
            spec.n_bins()
        )));
    }
    let mut state = FrontendState::new(
        *cfg,
        spec.n_channels(),
        spec.n_bins(),
        spec.sample_rate,
        spec.hop,
    );
    let mut out = spec.clone();
    let mut row = vec![false; spec.n_bins()];
    for t in 0..spec.n_frames() {
        for f in 0..spec.n_bins() {
            row[f] = labels[[t, f]];
        }
        let (_, processed) = state.process_frame(spec.frame(t), Some(&row));
        for i in 0..spec.n_channels() {
            for f in 0..spec.n_bins() {
                out.data[[i, t, f]] = processed[[i, f]];
            }
        }
    }
    Ok(out)
}
