//! Multi-speaker tracking over localizer weight vectors.
//!
//! Every frame the candidate grid doubles as an observation set: each
//! candidate contributes its direction unit vector and its current mixture
//! weight. Speakers carry a three-dimensional state (direction components
//! plus angular velocity) propagated by a first-order rotation model, and a
//! variational EM pass alternates soft observation-to-speaker assignment
//! with weighted-data Gaussian state updates. Speakers are born from the
//! background-assigned observation stream when its short-horizon dynamics
//! look like a trajectory rather than noise, fall asleep when their assigned
//! observation mass dries up, wake when it returns, and are dropped after
//! sleeping too long.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::localizer::WeightVector;
use crate::{angles, Error, Result};

/// Tracking parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Hard cap on simultaneous tracks, sleeping ones included.
    pub max_speakers: usize,
    /// Isotropic observation noise variance on direction vectors.
    pub obs_var: f64,
    /// Diagonal of the per-frame dynamics covariance.
    pub dynamics_var: [f64; 3],
    /// Re-estimate the dynamics covariance per speaker each frame.
    pub adaptive_dynamics: bool,
    /// Volume of the observation domain backing the uniform outlier density
    /// (circumference of the unit circle).
    pub domain_volume: f64,
    /// Frames of background evidence evaluated for a birth.
    pub birth_window: usize,
    /// Geometric-mean predictive likelihood a birth sequence must exceed.
    pub birth_threshold: f64,
    /// Minimum windowed observation mass for a speaker to count as active.
    pub activity_threshold: f64,
    /// Frames in the activity window.
    pub activity_window: usize,
    /// Consecutive sleeping frames before a track is dropped.
    pub sleep_timeout: u32,
    /// Variational EM iterations per frame.
    pub vem_iters: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            max_speakers: 3,
            obs_var: 0.03,
            dynamics_var: [1e-4, 1e-4, 1e-5],
            adaptive_dynamics: false,
            domain_volume: 2.0 * PI,
            birth_window: 25,
            birth_threshold: 0.3,
            activity_threshold: 0.05,
            activity_window: 12,
            sleep_timeout: 125,
            vem_iters: 5,
        }
    }
}

impl TrackerConfig {
    pub fn sigma(&self) -> Matrix2<f64> {
        Matrix2::identity() * self.obs_var
    }

    pub fn lambda(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.dynamics_var))
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_speakers == 0 {
            return Err(Error::config("max_speakers must be at least 1"));
        }
        if self.obs_var <= 0.0 || self.dynamics_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::config("tracker covariances must be positive-definite"));
        }
        if self.birth_window < 2 {
            return Err(Error::config("birth_window must span at least 2 frames"));
        }
        Ok(())
    }
}

/// Covariance of a newborn track.
const BIRTH_COV_DIAG: [f64; 3] = [0.05, 0.05, 0.01];
/// Births closer to a live track than this many observation standard
/// deviations are re-detections of that track, not a new speaker.
const BIRTH_EXCLUSION_SIGMAS: f64 = 1.0;
/// Two active tracks this close in azimuth (degrees) with velocities
/// within the tolerance below are a degenerate split of one speaker.
const MERGE_GAP_DEG: f64 = 6.0;
/// Velocity agreement bound for the merge test, radians per frame.
/// Crossing speakers differ by far more and are left alone.
const MERGE_VELOCITY_TOL: f64 = 0.0015;
/// Added to a state information matrix when plain inversion fails.
const INVERSION_REGULARIZATION: f64 = 1e-9;
/// Eigenvalue floor of the adaptive dynamics covariance.
const DYNAMICS_FLOOR: f64 = 1e-6;
/// Acceptable band for the direction norm before renormalization.
const DIRECTION_NORM_BAND: (f64, f64) = (0.5, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Active,
    Sleeping,
}

/// One tracked speaker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerState {
    pub id: u32,
    /// (u_x, u_y, v): direction components and angular velocity in radians
    /// per frame.
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub status: TrackStatus,
    /// Per-speaker dynamics covariance; equals the config value unless the
    /// adaptive mode rewrites it.
    pub dynamics_cov: Matrix3<f64>,
    activity: VecDeque<f64>,
    sleep_frames: u32,
    age: u32,
}

impl SpeakerState {
    pub fn new(id: u32, mean: Vector3<f64>, cov: Matrix3<f64>, dynamics_cov: Matrix3<f64>) -> Self {
        SpeakerState {
            id,
            mean,
            cov,
            status: TrackStatus::Active,
            dynamics_cov,
            activity: VecDeque::new(),
            sleep_frames: 0,
            age: 0,
        }
    }

    pub fn azimuth_deg(&self) -> f64 {
        self.mean[1].atan2(self.mean[0]).to_degrees()
    }

    /// Angular velocity, radians per frame.
    pub fn velocity(&self) -> f64 {
        self.mean[2]
    }

    fn is_valid(&self) -> bool {
        let finite = self.mean.iter().all(|v| v.is_finite())
            && self.cov.iter().all(|v| v.is_finite());
        let norm = self.mean.xy().norm();
        finite && norm >= DIRECTION_NORM_BAND.0 && norm <= DIRECTION_NORM_BAND.1
    }

    fn renormalize_direction(&mut self) {
        let norm = self.mean.xy().norm();
        if norm > 0.0 {
            self.mean[0] /= norm;
            self.mean[1] /= norm;
        }
    }

    fn push_activity(&mut self, mass: f64, window: usize) {
        self.activity.push_back(mass);
        while self.activity.len() > window {
            self.activity.pop_front();
        }
    }

    fn windowed_activity(&self) -> f64 {
        if self.activity.is_empty() {
            return 0.0;
        }
        self.activity.iter().sum::<f64>() / self.activity.len() as f64
    }
}

/// One candidate observation: a direction on the unit circle plus the
/// localizer weight behind it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Observation {
    pub azimuth_deg: f64,
    pub direction: Vector2<f64>,
    pub weight: f64,
}

/// All candidate observations of one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSet(pub Vec<Observation>);

impl ObservationSet {
    pub fn from_weights(azimuths: &[f64], w: &WeightVector) -> Self {
        debug_assert_eq!(azimuths.len(), w.len());
        ObservationSet(
            azimuths
                .iter()
                .zip(w.as_slice())
                .map(|(&az, &weight)| {
                    let (x, y) = angles::unit_vec(az);
                    Observation { azimuth_deg: az, direction: Vector2::new(x, y), weight }
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Soft assignment of observations to background (column 0) and tracks.
#[derive(Debug, Clone)]
pub struct Assignments {
    /// [n_observations x (n_tracks + 1)], rows on the simplex.
    pub alpha: Array2<f64>,
    /// Track ids behind columns 1 and onward.
    pub track_ids: Vec<u32>,
}

impl Assignments {
    fn background_only(n_obs: usize) -> Self {
        Assignments { alpha: Array2::from_elem((n_obs, 1), 1.0), track_ids: Vec::new() }
    }
}

fn m_matrix() -> Matrix2x3<f64> {
    Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
}

/// First-order rotation of the direction by the angular velocity: the third
/// column steers (u_x, u_y) along the tangent at the current azimuth.
pub fn rotation_matrix(theta: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0, 0.0, -theta.sin(),
        0.0, 1.0, theta.cos(),
        0.0, 0.0, 1.0,
    )
}

/// Propagates a posterior one frame forward.
pub fn predict(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    lambda: &Matrix3<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let theta = mean[1].atan2(mean[0]);
    let d = rotation_matrix(theta);
    (d * mean, d * cov * d.transpose() + lambda)
}

/// Expected log observation density of observation `obs` under a speaker's
/// current Gaussian estimate, marginalized over the state uncertainty.
fn speaker_log_term(
    obs: &Observation,
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    sigma_inv: &Matrix2<f64>,
    log_det_sigma: f64,
) -> f64 {
    if obs.weight <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let m = m_matrix();
    let diff = obs.direction - m * mean;
    let quad = diff.dot(&(sigma_inv * diff));
    let spread = (sigma_inv * (m * cov * m.transpose())).trace();
    // Gaussian with covariance Sigma / w, plus the trace correction from
    // taking the expectation over the state estimate.
    obs.weight.ln() - (2.0 * PI).ln() - 0.5 * log_det_sigma
        - 0.5 * obs.weight * quad
        - 0.5 * obs.weight * spread
}

/// Soft-assigns every observation to the tracks and the uniform background.
///
/// `estimates` holds each track's current (mean, covariance) pair. The
/// assignment prior is uniform over columns and cancels in normalization.
pub fn e_z_step(
    obs: &ObservationSet,
    estimates: &[(Vector3<f64>, Matrix3<f64>)],
    track_ids: &[u32],
    cfg: &TrackerConfig,
) -> Assignments {
    let n_obs = obs.len();
    let n_tracks = estimates.len();
    if n_tracks == 0 {
        return Assignments::background_only(n_obs);
    }
    let sigma = cfg.sigma();
    let sigma_inv = sigma.try_inverse().expect("observation covariance invertible");
    let log_det_sigma = sigma.determinant().ln();
    let log_background = -(cfg.domain_volume.ln());
    let mut alpha = Array2::zeros((n_obs, n_tracks + 1));
    for (d, ob) in obs.0.iter().enumerate() {
        let mut logs = Vec::with_capacity(n_tracks + 1);
        logs.push(log_background);
        for (mean, cov) in estimates {
            logs.push(speaker_log_term(ob, mean, cov, &sigma_inv, log_det_sigma));
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (n, &l) in logs.iter().enumerate() {
            let v = (l - m).exp();
            alpha[[d, n]] = v;
            sum += v;
        }
        for n in 0..=n_tracks {
            alpha[[d, n]] /= sum;
        }
    }
    Assignments { alpha, track_ids: track_ids.to_vec() }
}

/// Weighted-data Gaussian state update for one speaker.
///
/// `alpha` is that speaker's assignment column. The previous posterior is
/// the anchor: its prediction supplies the prior inside every VEM iteration.
pub fn e_s_step(
    obs: &ObservationSet,
    alpha: &[f64],
    prev_mean: &Vector3<f64>,
    prev_cov: &Matrix3<f64>,
    lambda: &Matrix3<f64>,
    sigma: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let m = m_matrix();
    let sigma_inv = sigma.try_inverse().expect("observation covariance invertible");
    let (pred_mean, pred_cov) = predict(prev_mean, prev_cov, lambda);
    let pred_info = invert_spd(&pred_cov);
    let mut wsum = 0.0;
    let mut bsum = Vector2::zeros();
    for (ob, &a) in obs.0.iter().zip(alpha) {
        let aw = a * ob.weight;
        wsum += aw;
        bsum += ob.direction * aw;
    }
    let info = m.transpose() * sigma_inv * m * wsum + pred_info;
    let cov = invert_spd(&info);
    let mean = cov * (m.transpose() * (sigma_inv * bsum) + pred_info * pred_mean);
    (mean, 0.5 * (cov + cov.transpose()))
}

fn invert_spd(m: &Matrix3<f64>) -> Matrix3<f64> {
    if let Some(inv) = m.try_inverse() {
        return inv;
    }
    eprintln!("warning: singular state matrix, regularizing");
    (m + Matrix3::identity() * INVERSION_REGULARIZATION)
        .try_inverse()
        .expect("regularized matrix invertible")
}

/// Dynamics covariance re-estimate from one transition: posterior spread at
/// both ends plus the innovation outer product, floored to stay
/// positive-definite.
pub fn m_step(
    post_mean: &Vector3<f64>,
    post_cov: &Matrix3<f64>,
    prev_mean: &Vector3<f64>,
    prev_cov: &Matrix3<f64>,
) -> Matrix3<f64> {
    let theta = prev_mean[1].atan2(prev_mean[0]);
    let d = rotation_matrix(theta);
    let residual = post_mean - d * prev_mean;
    let raw = post_cov + d * prev_cov * d.transpose() + residual * residual.transpose();
    let sym = 0.5 * (raw + raw.transpose());
    let eig = nalgebra::SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(DYNAMICS_FLOOR));
    let recon = &eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    0.5 * (recon + recon.transpose())
}

/// Runs the per-frame variational EM over the given tracks.
///
/// Assignment and state steps alternate `cfg.vem_iters` times. The state
/// step always anchors at the frame-entry posteriors; the assignment step
/// sees the latest estimates, which start at the predictions.
pub fn vem_iterate(
    obs: &ObservationSet,
    tracks: &mut [SpeakerState],
    cfg: &TrackerConfig,
) -> Assignments {
    if tracks.is_empty() {
        return Assignments::background_only(obs.len());
    }
    let sigma = cfg.sigma();
    let anchors: Vec<(Vector3<f64>, Matrix3<f64>)> =
        tracks.iter().map(|t| (t.mean, t.cov)).collect();
    let ids: Vec<u32> = tracks.iter().map(|t| t.id).collect();
    let mut estimates: Vec<(Vector3<f64>, Matrix3<f64>)> = tracks
        .iter()
        .map(|t| predict(&t.mean, &t.cov, &t.dynamics_cov))
        .collect();
    let mut assignments = Assignments::background_only(obs.len());
    for _ in 0..cfg.vem_iters {
        assignments = e_z_step(obs, &estimates, &ids, cfg);
        for (n, track) in tracks.iter_mut().enumerate() {
            let col: Vec<f64> = (0..obs.len()).map(|d| assignments.alpha[[d, n + 1]]).collect();
            let (mean, cov) = e_s_step(
                obs,
                &col,
                &anchors[n].0,
                &anchors[n].1,
                &track.dynamics_cov,
                &sigma,
            );
            estimates[n] = (mean, cov);
            if cfg.adaptive_dynamics {
                track.dynamics_cov = m_step(&mean, &cov, &anchors[n].0, &anchors[n].1);
            }
        }
    }
    for (track, (mean, cov)) in tracks.iter_mut().zip(estimates) {
        track.mean = mean;
        track.cov = cov;
    }
    assignments
}

/// Per-frame filtered likelihood of an observation sequence under the
/// tracking dynamics: the geometric mean of the one-step predictive
/// densities from a Kalman recursion seeded at the first observation.
///
/// Each entry pairs a direction with its weight; the effective observation
/// noise is Sigma / weight.
pub fn window_predictive_score(
    seq: &[(Vector2<f64>, f64)],
    sigma: &Matrix2<f64>,
    lambda: &Matrix3<f64>,
) -> f64 {
    if seq.len() < 2 {
        return 0.0;
    }
    let m = m_matrix();
    let mut mean = Vector3::new(seq[0].0[0], seq[0].0[1], 0.0);
    let mut cov = Matrix3::from_diagonal(&Vector3::from(BIRTH_COV_DIAG));
    let mut log_sum = 0.0;
    for (dir, w) in &seq[1..] {
        let (pm, pc) = predict(&mean, &cov, lambda);
        let r = sigma / w.max(1e-12);
        let s = m * pc * m.transpose() + r;
        let s_inv = s.try_inverse().unwrap_or_else(|| {
            (s + Matrix2::identity() * INVERSION_REGULARIZATION)
                .try_inverse()
                .expect("regularized innovation covariance invertible")
        });
        let innov = dir - m * pm;
        log_sum += -(2.0 * PI).ln() - 0.5 * s.determinant().ln()
            - 0.5 * innov.dot(&(s_inv * innov));
        let gain = pc * m.transpose() * s_inv;
        mean = pm + gain * innov;
        cov = (Matrix3::identity() - gain * m) * pc;
        cov = 0.5 * (cov + cov.transpose());
    }
    (log_sum / (seq.len() - 1) as f64).exp()
}

/// Filtered final state of a birth window under the same recursion as
/// [`window_predictive_score`].
fn window_filtered_state(
    seq: &[(Vector2<f64>, f64)],
    sigma: &Matrix2<f64>,
    lambda: &Matrix3<f64>,
) -> Vector3<f64> {
    let m = m_matrix();
    let mut mean = Vector3::new(seq[0].0[0], seq[0].0[1], 0.0);
    let mut cov = Matrix3::from_diagonal(&Vector3::from(BIRTH_COV_DIAG));
    for (dir, w) in &seq[1..] {
        let (pm, pc) = predict(&mean, &cov, lambda);
        let r = sigma / w.max(1e-12);
        let s = m * pc * m.transpose() + r;
        let s_inv = s.try_inverse().unwrap_or_else(|| {
            (s + Matrix2::identity() * INVERSION_REGULARIZATION)
                .try_inverse()
                .expect("regularized innovation covariance invertible")
        });
        let innov = dir - m * pm;
        let gain = pc * m.transpose() * s_inv;
        mean = pm + gain * innov;
        cov = (Matrix3::identity() - gain * m) * pc;
        cov = 0.5 * (cov + cov.transpose());
    }
    mean
}

/// Reported per-track summary for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub id: u32,
    pub azimuth_deg: f64,
    /// Radians per frame.
    pub velocity: f64,
    pub active: bool,
    /// Trace of the posterior covariance.
    pub trace: f64,
}

/// Everything the tracker emits for one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub tracks: Vec<TrackReport>,
}

/// Sequential multi-speaker tracker over weight-vector frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tracker {
    cfg: TrackerConfig,
    azimuths: Vec<f64>,
    tracks: Vec<SpeakerState>,
    /// Best background-assigned observation per recent frame.
    pool: VecDeque<Option<(f64, Vector2<f64>, f64)>>,
    next_id: u32,
    frame: usize,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, azimuths: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if azimuths.is_empty() {
            return Err(Error::config("tracker needs a candidate azimuth list"));
        }
        Ok(Tracker { cfg, azimuths, tracks: Vec::new(), pool: VecDeque::new(), next_id: 0, frame: 0 })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[SpeakerState] {
        &self.tracks
    }

    /// Advances one frame on the localizer's weight vector.
    pub fn step(&mut self, weights: &WeightVector) -> FrameReport {
        let obs = ObservationSet::from_weights(&self.azimuths, weights);
        self.tracks.retain(|t| t.is_valid());

        // Sleeping tracks coast on pure prediction and are scored against
        // the background for a possible wake-up; only active tracks enter
        // the variational pass.
        let mut active_idx = Vec::new();
        let mut sleeping_idx = Vec::new();
        for (k, t) in self.tracks.iter().enumerate() {
            match t.status {
                TrackStatus::Active => active_idx.push(k),
                TrackStatus::Sleeping => sleeping_idx.push(k),
            }
        }

        let mut active: Vec<SpeakerState> =
            active_idx.iter().map(|&k| self.tracks[k].clone()).collect();
        let assignments = vem_iterate(&obs, &mut active, &self.cfg);
        for (slot, &k) in active_idx.iter().enumerate() {
            self.tracks[k] = active[slot].clone();
        }

        // Activity bookkeeping for the active set.
        for (slot, &k) in active_idx.iter().enumerate() {
            let mass: f64 = (0..obs.len())
                .map(|d| assignments.alpha[[d, slot + 1]] * obs.0[d].weight)
                .sum();
            let t = &mut self.tracks[k];
            t.push_activity(mass, self.cfg.activity_window);
            t.age += 1;
            let grace = t.age < self.cfg.activity_window as u32;
            if !grace && t.windowed_activity() < self.cfg.activity_threshold {
                t.status = TrackStatus::Sleeping;
                t.sleep_frames = 0;
            }
        }

        // Two active tracks riding the same ridge at the same speed are one
        // speaker split in two; the assignment step halves the mass between
        // them forever and never undoes the split. The less supported one
        // goes to sleep, and the background gating below keeps it from
        // reattaching while the survivor owns the mass.
        for i in 0..active_idx.len() {
            for j in (i + 1)..active_idx.len() {
                let (a, b) = (active_idx[i], active_idx[j]);
                if self.tracks[a].status != TrackStatus::Active
                    || self.tracks[b].status != TrackStatus::Active
                {
                    continue;
                }
                let gap =
                    angles::diff_deg(self.tracks[a].azimuth_deg(), self.tracks[b].azimuth_deg())
                        .abs();
                let dv = (self.tracks[a].velocity() - self.tracks[b].velocity()).abs();
                if gap < MERGE_GAP_DEG && dv < MERGE_VELOCITY_TOL {
                    let loser = if self.tracks[a].windowed_activity()
                        < self.tracks[b].windowed_activity()
                    {
                        a
                    } else {
                        b
                    };
                    let t = &mut self.tracks[loser];
                    t.status = TrackStatus::Sleeping;
                    t.sleep_frames = 0;
                    t.activity.clear();
                }
            }
        }

        // Sleeping tracks: coast, score each observation's marginal
        // predictive density against the background, wake when the windowed
        // mass recovers. The marginal (not the variational expected-log
        // form) is used here because a long coast inflates the covariance,
        // which should spread the density rather than collapse it.
        let sigma = self.cfg.sigma();
        let log_background = -(self.cfg.domain_volume.ln());
        let m = m_matrix();
        for &k in &sleeping_idx {
            let t = &mut self.tracks[k];
            let (pm, pc) = predict(&t.mean, &t.cov, &t.dynamics_cov);
            t.mean = pm;
            t.cov = pc;
            let spread = m * pc * m.transpose();
            let mut mass = 0.0;
            for (d, ob) in obs.0.iter().enumerate() {
                if ob.weight <= 0.0 {
                    continue;
                }
                let s = sigma / ob.weight + spread;
                let Some(s_inv) = s.try_inverse() else { continue };
                let innov = ob.direction - m * pm;
                let l = -(2.0 * PI).ln() - 0.5 * s.determinant().ln()
                    - 0.5 * innov.dot(&(s_inv * innov));
                let top = l.max(log_background);
                let num = (l - top).exp();
                let den = num + (log_background - top).exp();
                // Only mass the active set left to the background can wake
                // a sleeper; without this gate a coasting track parked near
                // a live one would reattach to the same ridge and
                // resurrect the duplicate the merge above just removed.
                mass += num / den * ob.weight * assignments.alpha[[d, 0]];
            }
            t.push_activity(mass, self.cfg.activity_window);
            t.age += 1;
            t.sleep_frames += 1;
            if t.windowed_activity() >= self.cfg.activity_threshold {
                t.status = TrackStatus::Active;
                t.sleep_frames = 0;
            }
        }
        let timeout = self.cfg.sleep_timeout;
        self.tracks
            .retain(|t| t.status == TrackStatus::Active || t.sleep_frames < timeout);

        for t in &mut self.tracks {
            t.renormalize_direction();
        }

        self.update_birth_pool(&obs, &assignments);
        self.maybe_spawn();

        self.frame += 1;
        FrameReport {
            frame: self.frame - 1,
            tracks: self
                .tracks
                .iter()
                .map(|t| TrackReport {
                    id: t.id,
                    azimuth_deg: t.azimuth_deg(),
                    velocity: t.velocity(),
                    active: t.status == TrackStatus::Active,
                    trace: t.cov.trace(),
                })
                .collect(),
        }
    }

    /// Records the strongest observation whose row maximum is the
    /// background column.
    fn update_birth_pool(&mut self, obs: &ObservationSet, assignments: &Assignments) {
        let n_cols = assignments.alpha.ncols();
        let mut best: Option<(f64, Vector2<f64>, f64)> = None;
        for (d, ob) in obs.0.iter().enumerate() {
            let bg = assignments.alpha[[d, 0]];
            let is_bg_max = (1..n_cols).all(|n| assignments.alpha[[d, n]] <= bg);
            if is_bg_max && best.map_or(true, |(_, _, w)| ob.weight > w) {
                best = Some((ob.azimuth_deg, ob.direction, ob.weight));
            }
        }
        self.pool.push_back(best);
        while self.pool.len() > self.cfg.birth_window {
            self.pool.pop_front();
        }
    }

    fn maybe_spawn(&mut self) {
        if self.pool.len() < self.cfg.birth_window || self.tracks.len() >= self.cfg.max_speakers {
            return;
        }
        let window: Option<Vec<(f64, Vector2<f64>, f64)>> = self.pool.iter().cloned().collect();
        let Some(window) = window else { return };
        let seq: Vec<(Vector2<f64>, f64)> = window.iter().map(|&(_, d, w)| (d, w)).collect();
        let sigma = self.cfg.sigma();
        let lambda = self.cfg.lambda();
        let score = window_predictive_score(&seq, &sigma, &lambda);
        if score <= self.cfg.birth_threshold {
            return;
        }
        let mut mean = window_filtered_state(&seq, &sigma, &lambda);
        // The pool only sees per-frame background maxima, so a track that
        // briefly loses its observation mass leaves its own neighborhood
        // full of birth candidates. Spawning there would duplicate the
        // track; such evidence belongs to the existing speaker.
        let birth_az = mean[1].atan2(mean[0]).to_degrees();
        let exclusion = (BIRTH_EXCLUSION_SIGMAS * self.cfg.obs_var.sqrt()).to_degrees();
        if self
            .tracks
            .iter()
            .any(|t| angles::diff_deg(birth_az, t.azimuth_deg()).abs() < exclusion)
        {
            return;
        }
        // Velocity from the mean observed angular increment, radians per
        // frame; the filtered recursion starts at zero velocity and is slow
        // to pick it up over one window.
        let mut increments = 0.0;
        for pair in window.windows(2) {
            increments += angles::diff_deg(pair[1].0, pair[0].0).to_radians();
        }
        mean[2] = increments / (window.len() - 1) as f64;
        let mut track = SpeakerState::new(
            self.next_id,
            mean,
            Matrix3::from_diagonal(&Vector3::from(BIRTH_COV_DIAG)),
            lambda,
        );
        track.renormalize_direction();
        self.next_id += 1;
        self.tracks.push(track);
        // Spent evidence cannot justify a second birth.
        self.pool.clear();
    }
}
