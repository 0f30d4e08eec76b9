//! Candidate-grid localization via online CGMM weight estimation.
//!
//! DP-RTF features are scored against a grid of candidate azimuths whose
//! expected features follow the far-field plane-wave model. Grid weights form
//! a mixture distribution updated once per frame by an exponentiated-gradient
//! step on the entropy-regularized negative log-likelihood; active directions
//! are read off the weights by circular peak picking.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};

use crate::dprtf::Feature;
use crate::{angles, Error, Result};

/// Microphone array layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// One 3-D position per channel, meters.
    pub mic_positions: Vec<[f64; 3]>,
    /// Meters per second.
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
}

fn default_speed_of_sound() -> f64 {
    343.0
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.len() < 2 {
            return Err(Error::Geometry("need at least 2 microphones".into()));
        }
        let p0 = self.mic_positions[0];
        if self.mic_positions.iter().all(|p| *p == p0) {
            return Err(Error::Geometry("all microphone positions coincide".into()));
        }
        if self.speed_of_sound <= 0.0 {
            return Err(Error::Geometry("speed of sound must be positive".into()));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.mic_positions.len()
    }

    /// Largest pairwise mic distance, meters.
    pub fn max_spacing(&self) -> f64 {
        let mut best = 0.0f64;
        for (a, p) in self.mic_positions.iter().enumerate() {
            for q in &self.mic_positions[a + 1..] {
                let d = dist3(p, q);
                best = best.max(d);
            }
        }
        best
    }

    /// Plane-wave TDOA of `channel` versus `reference` for a source at
    /// azimuth `theta_deg` in the horizontal plane, seconds.
    pub fn tdoa(&self, channel: usize, reference: usize, theta_deg: f64) -> f64 {
        let (ux, uy) = angles::unit_vec(theta_deg);
        let p = self.mic_positions[channel];
        let r = self.mic_positions[reference];
        ((p[0] - r[0]) * ux + (p[1] - r[1]) * uy) / self.speed_of_sound
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Frequency band free of spatial aliasing: bins spanning `f_lo_hz` up to
/// c / (2 * max spacing), clamped inside the one-sided spectrum (DC and
/// Nyquist excluded).
pub fn alias_free_band(
    geom: &ArrayGeometry,
    sample_rate: u32,
    window_len: usize,
    f_lo_hz: f64,
) -> (usize, usize) {
    let hz_per_bin = sample_rate as f64 / window_len as f64;
    let f_hi = geom.speed_of_sound / (2.0 * geom.max_spacing());
    let lo = (f_lo_hz / hz_per_bin).ceil() as usize;
    let hi = (f_hi / hz_per_bin).floor() as usize;
    let top = window_len / 2 - 1;
    (lo.clamp(1, top), hi.clamp(1, top))
}

/// Candidate azimuths with precomputed expected DP-RTFs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateGrid {
    /// Degrees, strictly increasing within (-180, 180].
    pub azimuths: Vec<f64>,
    /// Expected features, indexed [candidate, bin, channel slot].
    pub means: Array3<Complex64>,
    pub sample_rate: u32,
    pub window_len: usize,
    pub magnitude: f64,
    pub reference_channel: usize,
    pub n_channels: usize,
}

impl CandidateGrid {
    pub fn n_candidates(&self) -> usize {
        self.azimuths.len()
    }

    /// Expected feature for `channel` (original index, not the reference).
    pub fn mean(&self, candidate: usize, bin: usize, channel: usize) -> Complex64 {
        self.means[[candidate, bin, self.slot(channel)]]
    }

    fn slot(&self, channel: usize) -> usize {
        debug_assert_ne!(channel, self.reference_channel);
        if channel < self.reference_channel {
            channel
        } else {
            channel - 1
        }
    }
}

/// `count` azimuths uniformly spaced with the last at 180 degrees.
pub fn uniform_azimuths(count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| -180.0 + 360.0 * (k + 1) as f64 / count as f64)
        .collect()
}

/// Evaluates the plane-wave model at every (candidate, bin, channel):
/// magnitude `g`, phase -2*pi*f*tdoa.
pub fn precompute_means(
    geom: &ArrayGeometry,
    azimuths: &[f64],
    sample_rate: u32,
    window_len: usize,
    magnitude: f64,
    reference_channel: usize,
) -> Result<CandidateGrid> {
    geom.validate()?;
    if azimuths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("candidate azimuths must be strictly increasing"));
    }
    if let (Some(first), Some(last)) = (azimuths.first(), azimuths.last()) {
        if *first <= -180.0 || *last > 180.0 {
            return Err(Error::config("candidate azimuths must lie in (-180, 180]"));
        }
    }
    let n_ch = geom.n_channels();
    if reference_channel >= n_ch {
        return Err(Error::config("reference channel out of range"));
    }
    for (ch, p) in geom.mic_positions.iter().enumerate() {
        if ch != reference_channel && dist3(p, &geom.mic_positions[reference_channel]) == 0.0 {
            eprintln!(
                "warning: microphone {ch} is colocated with the reference; \
                 its expected features carry no direction information"
            );
        }
    }
    let n_bins = window_len / 2 + 1;
    let hz_per_bin = sample_rate as f64 / window_len as f64;
    let channels: Vec<usize> = (0..n_ch).filter(|&c| c != reference_channel).collect();
    let mut means = Array3::default((azimuths.len(), n_bins, n_ch - 1));
    for (d, &theta) in azimuths.iter().enumerate() {
        for (slot, &ch) in channels.iter().enumerate() {
            let tau = geom.tdoa(ch, reference_channel, theta);
            for bin in 0..n_bins {
                let phase = -2.0 * std::f64::consts::PI * (bin as f64 * hz_per_bin) * tau;
                means[[d, bin, slot]] = Complex64::from_polar(magnitude, phase);
            }
        }
    }
    Ok(CandidateGrid {
        azimuths: azimuths.to_vec(),
        means,
        sample_rate,
        window_len,
        magnitude,
        reference_channel,
        n_channels: n_ch,
    })
}

/// Mixture weights over the candidate grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn uniform(d: usize) -> Self {
        WeightVector(vec![1.0 / d as f64; d])
    }

    pub fn from_vec(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::config("weights must be finite and non-negative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("weights sum to {sum}, expected 1")));
        }
        Ok(WeightVector(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    /// Clamps entries to at least `floor` and renormalizes, keeping the
    /// entropy gradient finite after long stretches of decay.
    pub fn floored(&self, floor: f64) -> WeightVector {
        let mut w: Vec<f64> = self.0.iter().map(|&x| x.max(floor)).collect();
        let sum: f64 = w.iter().sum();
        for x in &mut w {
            *x /= sum;
        }
        WeightVector(w)
    }
}

/// CGMM scoring and update parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    /// Shared circular complex Gaussian variance.
    pub variance: f64,
    /// Exponentiated-gradient step size.
    pub learning_rate: f64,
    /// Entropy regularization factor; positive values sharpen the weights.
    pub entropy_weight: f64,
    /// Constant modulus of the grid means.
    pub magnitude: f64,
    /// Weight floor applied before each gradient evaluation.
    pub weight_floor: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            variance: 0.5,
            learning_rate: 0.07,
            entropy_weight: 0.1,
            magnitude: 1.0,
            weight_floor: 1e-12,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variance <= 0.0 {
            return Err(Error::config("variance must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Log of the circular complex Gaussian density with variance `s2`.
fn log_density(x: Complex64, mean: Complex64, s2: f64) -> f64 {
    -(std::f64::consts::PI * s2).ln() - (x - mean).norm_sqr() / s2
}

/// Per-feature candidate log-densities, [n_features x D].
fn log_density_matrix(features: &[Feature], grid: &CandidateGrid, s2: f64) -> Array2<f64> {
    let d = grid.n_candidates();
    let mut out = Array2::zeros((features.len(), d));
    for (k, f) in features.iter().enumerate() {
        for c in 0..d {
            out[[k, c]] = log_density(f.value, grid.mean(c, f.bin, f.channel), s2);
        }
    }
    out
}

/// Posterior candidate responsibilities for one frame's features.
pub struct Responsibilities {
    /// [n_features x D], rows on the simplex.
    pub rho: Array2<f64>,
    /// Features whose densities all underflowed (row fell back to uniform).
    pub flagged: Vec<bool>,
}

pub fn cgmm_responsibilities(
    features: &[Feature],
    grid: &CandidateGrid,
    w: &WeightVector,
    variance: f64,
) -> Responsibilities {
    let d = grid.n_candidates();
    let logs = log_density_matrix(features, grid, variance);
    let log_w: Vec<f64> = w.as_slice().iter().map(|&x| x.ln()).collect();
    let mut rho = Array2::zeros((features.len(), d));
    let mut flagged = vec![false; features.len()];
    let underflow = f64::MIN_POSITIVE.ln();
    for k in 0..features.len() {
        let row: Vec<f64> = (0..d).map(|c| log_w[c] + logs[[k, c]]).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m < underflow {
            // Direct evaluation of every weighted density would round to
            // zero; report an uninformative posterior.
            flagged[k] = true;
            for c in 0..d {
                rho[[k, c]] = 1.0 / d as f64;
            }
            continue;
        }
        let mut sum = 0.0;
        for c in 0..d {
            let v = (row[c] - m).exp();
            rho[[k, c]] = v;
            sum += v;
        }
        for c in 0..d {
            rho[[k, c]] /= sum;
        }
    }
    Responsibilities { rho, flagged }
}

/// Gradient of the per-frame objective (negative mean log-likelihood minus
/// weighted entropy) with respect to the weights.
///
/// Likelihood part: -(1/K) * density_d / mixture density, summed over
/// features. Entropy part: -gamma * (ln w_d + 1). An empty frame leaves only
/// the entropy term.
pub fn objective_gradient(
    features: &[Feature],
    grid: &CandidateGrid,
    w: &WeightVector,
    cfg: &LocalizerConfig,
) -> Vec<f64> {
    let d = grid.n_candidates();
    let mut grad: Vec<f64> = w
        .as_slice()
        .iter()
        .map(|&x| -cfg.entropy_weight * (x.ln() + 1.0))
        .collect();
    if features.is_empty() {
        return grad;
    }
    let logs = log_density_matrix(features, grid, cfg.variance);
    let log_w: Vec<f64> = w.as_slice().iter().map(|&x| x.ln()).collect();
    let inv_k = 1.0 / features.len() as f64;
    for k in 0..features.len() {
        // log-sum-exp of log(w_d) + log N_d gives the mixture density; the
        // gradient term is N_d over that mixture.
        let row: Vec<f64> = (0..d).map(|c| log_w[c] + logs[[k, c]]).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for c in 0..d {
            grad[c] -= inv_k * (logs[[k, c]] - lse).exp();
        }
    }
    grad
}

/// Multiplicative mirror-descent step: w_d proportional to
/// w_d * exp(-eta * grad_d), renormalized. The exponent is shifted so its
/// largest value is zero, which normalization cancels, so additive gradient
/// shifts cannot overflow or change the result.
pub fn eg_update(w_prev: &WeightVector, gradient: &[f64], eta: f64) -> WeightVector {
    let exps: Vec<f64> = gradient.iter().map(|&g| -eta * g).collect();
    let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = w_prev
        .as_slice()
        .iter()
        .zip(&exps)
        .map(|(&x, &e)| x * (e - m).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    WeightVector(w)
}

/// Circular local maxima of the weights at or above `threshold`, greedily
/// thinned so no two survivors lie within `min_separation_deg`. Returns
/// (azimuth, weight) pairs sorted by weight descending.
pub fn peak_pick(
    w: &WeightVector,
    azimuths: &[f64],
    threshold: f64,
    min_separation_deg: f64,
) -> Vec<(f64, f64)> {
    let d = w.len();
    debug_assert_eq!(d, azimuths.len());
    if d == 0 {
        return Vec::new();
    }
    let ws = w.as_slice();
    let mut candidates: Vec<(f64, f64)> = (0..d)
        .filter(|&k| {
            let prev = ws[(k + d - 1) % d];
            let next = ws[(k + 1) % d];
            ws[k] >= threshold && ws[k] >= prev && ws[k] >= next
        })
        .map(|k| (azimuths[k], ws[k]))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for (az, weight) in candidates {
        if peaks.iter().all(|p| angles::dist_deg(p.0, az) >= min_separation_deg) {
            peaks.push((az, weight));
        }
    }
    peaks
}

/// Sequential per-frame weight estimation over a fixed grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Localizer {
    pub grid: CandidateGrid,
    pub cfg: LocalizerConfig,
    weights: WeightVector,
}

impl Localizer {
    pub fn new(grid: CandidateGrid, cfg: LocalizerConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = WeightVector::uniform(grid.n_candidates());
        Ok(Localizer { grid, cfg, weights })
    }

    pub fn grid(&self) -> &CandidateGrid {
        &self.grid
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    /// Replaces the weight state (snapshot restore).
    pub fn set_weights(&mut self, w: WeightVector) {
        self.weights = w;
    }

    /// One exponentiated-gradient step on this frame's features.
    pub fn step(&mut self, features: &[Feature]) -> &WeightVector {
        let floored = self.weights.floored(self.cfg.weight_floor);
        let grad = objective_gradient(features, &self.grid, &floored, &self.cfg);
        self.weights = eg_update(&floored, &grad, self.cfg.learning_rate);
        &self.weights
    }
}

const GRID_FORMAT_HEADER: &str = "aztrack-grid v1";

impl CandidateGrid {
    /// Writes the grid as a line-oriented text table. Floats use Rust's
    /// shortest round-trip formatting, so import reproduces values exactly.
    pub fn export_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{GRID_FORMAT_HEADER}")?;
        writeln!(out, "sample_rate {}", self.sample_rate)?;
        writeln!(out, "window_len {}", self.window_len)?;
        writeln!(out, "magnitude {}", self.magnitude)?;
        writeln!(out, "reference_channel {}", self.reference_channel)?;
        writeln!(out, "n_channels {}", self.n_channels)?;
        write!(out, "azimuths")?;
        for a in &self.azimuths {
            write!(out, " {a}")?;
        }
        writeln!(out)?;
        let (d, f, s) = self.means.dim();
        writeln!(out, "means {d} {f} {s}")?;
        for dd in 0..d {
            for ff in 0..f {
                for ss in 0..s {
                    let v = self.means[[dd, ff, ss]];
                    writeln!(out, "{} {}", v.re, v.im)?;
                }
            }
        }
        Ok(())
    }

    pub fn import_text<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::config("grid file truncated"))
        };
        let header = next()?;
        if header.trim() != GRID_FORMAT_HEADER {
            return Err(Error::config(format!("unsupported grid format: {header:?}")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = next()?;
            line.strip_prefix(name)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| Error::config(format!("expected {name} line in grid file")))
        };
        let sample_rate: u32 = parse(&field("sample_rate")?)?;
        let window_len: usize = parse(&field("window_len")?)?;
        let magnitude: f64 = parse(&field("magnitude")?)?;
        let reference_channel: usize = parse(&field("reference_channel")?)?;
        let n_channels: usize = parse(&field("n_channels")?)?;
        let azimuths: Vec<f64> = field("azimuths")?
            .split_whitespace()
            .map(parse)
            .collect::<Result<_>>()?;
        let dims: Vec<usize> = field("means")?
            .split_whitespace()
            .map(parse)
            .collect::<Result<_>>()?;
        if dims.len() != 3 || dims[0] != azimuths.len() {
            return Err(Error::config("inconsistent grid dimensions"));
        }
        let mut means = Array3::default((dims[0], dims[1], dims[2]));
        for dd in 0..dims[0] {
            for ff in 0..dims[1] {
                for ss in 0..dims[2] {
                    let line = next()?;
                    let mut parts = line.split_whitespace();
                    let re: f64 = parse(parts.next().unwrap_or(""))?;
                    let im: f64 = parse(parts.next().unwrap_or(""))?;
                    means[[dd, ff, ss]] = Complex64::new(re, im);
                }
            }
        }
        Ok(CandidateGrid {
            azimuths,
            means,
            sample_rate,
            window_len,
            magnitude,
            reference_channel,
            n_channels,
        })
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::config(format!("malformed number {s:?} in grid file")))
}
