//! Tracking evaluation: angular error, miss and false-alarm rates, identity
//! switches.
//!
//! Per frame, estimated azimuths are matched to active ground-truth speakers
//! by a minimum-cost assignment on circular angular distance, with pairs
//! beyond the gate forbidden. Misses and false alarms are the unmatched
//! leftovers; rates are percentages of the total active speaker-frame count.

use serde::{Deserialize, Serialize};

use crate::angles;

/// One ground-truth speaker at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub id: u32,
    pub azimuth_deg: f64,
    /// Whether the speaker is emitting speech in this frame.
    pub active: bool,
}

/// Frame-aligned ground truth.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<Vec<TruthEntry>>,
}

impl GroundTruth {
    /// Resamples timestamped truth onto the estimator's frame clock by
    /// nearest neighbor.
    pub fn from_timed(samples: &[(f64, Vec<TruthEntry>)], frame_times: &[f64]) -> Self {
        let frames = frame_times
            .iter()
            .map(|&t| {
                samples
                    .iter()
                    .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
                    .map(|(_, entries)| entries.clone())
                    .unwrap_or_default()
            })
            .collect();
        GroundTruth { frames }
    }
}

/// One reported track position at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateEntry {
    pub id: u32,
    pub azimuth_deg: f64,
}

/// Frame-aligned estimates (active tracks only).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EstimateSequence {
    pub frames: Vec<Vec<EstimateEntry>>,
}

/// Result of matching one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatching {
    /// (estimate index, truth index, absolute circular error in degrees).
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_estimates: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

/// Cost standing in for a forbidden pairing; large enough that any number of
/// real matches is preferred over one forbidden one.
const FORBIDDEN: f64 = 1e6;

/// Minimum-cost assignment on a rectangular cost matrix, returning for each
/// row the assigned column. Shortest-augmenting-path formulation with dual
/// potentials.
fn assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m, "assignment expects rows <= columns");
    // 1-based arrays; p[j] is the row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimally pairs estimates with truth azimuths under the gate.
///
/// The assignment minimizes total circular error over admissible pairs;
/// anything the optimum leaves outside the gate becomes a miss or a false
/// alarm.
pub fn match_frame(estimates: &[f64], truth: &[f64], gate_deg: f64) -> FrameMatching {
    let ne = estimates.len();
    let nt = truth.len();
    if ne == 0 || nt == 0 {
        return FrameMatching {
            pairs: Vec::new(),
            unmatched_estimates: (0..ne).collect(),
            unmatched_truth: (0..nt).collect(),
        };
    }
    // Rows are the smaller side so the solver sees rows <= columns.
    let est_rows = ne <= nt;
    let (rows, cols): (&[f64], &[f64]) =
        if est_rows { (estimates, truth) } else { (truth, estimates) };
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&a| {
            cols.iter()
                .map(|&b| {
                    let d = angles::dist_deg(a, b);
                    if d <= gate_deg {
                        d
                    } else {
                        FORBIDDEN
                    }
                })
                .collect()
        })
        .collect();
    let row_to_col = assignment(&cost);
    let mut pairs = Vec::new();
    let mut est_used = vec![false; ne];
    let mut truth_used = vec![false; nt];
    for (r, &c) in row_to_col.iter().enumerate() {
        if cost[r][c] >= FORBIDDEN {
            continue;
        }
        let (e, t) = if est_rows { (r, c) } else { (c, r) };
        pairs.push((e, t, cost[r][c]));
        est_used[e] = true;
        truth_used[t] = true;
    }
    FrameMatching {
        pairs,
        unmatched_estimates: (0..ne).filter(|&e| !est_used[e]).collect(),
        unmatched_truth: (0..nt).filter(|&t| !truth_used[t]).collect(),
    }
}

/// Per-frame matching detail retained in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDetail {
    pub frame: usize,
    /// (truth id, estimate id, error in degrees).
    pub matches: Vec<(u32, u32, f64)>,
    pub misses: u32,
    pub false_alarms: u32,
}

/// Aggregate evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean absolute circular error over matched pairs; absent when nothing
    /// matched.
    pub mae_deg: Option<f64>,
    /// Percent of active speaker-frames missed; absent when no speaker was
    /// ever active.
    pub md_rate_percent: Option<f64>,
    /// False alarms as a percent of active speaker-frames; same domain.
    pub fa_rate_percent: Option<f64>,
    pub id_switches: u64,
    pub total_active_truth: u64,
    pub total_misses: u64,
    pub total_false_alarms: u64,
    pub total_matched: u64,
    pub detail: Vec<FrameDetail>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.3}"),
            None => "n/a".to_string(),
        };
        writeln!(f, "mae_deg {}", opt(self.mae_deg))?;
        writeln!(f, "md_rate_percent {}", opt(self.md_rate_percent))?;
        writeln!(f, "fa_rate_percent {}", opt(self.fa_rate_percent))?;
        writeln!(f, "id_switches {}", self.id_switches)?;
        writeln!(f, "active_truth_frames {}", self.total_active_truth)?;
        writeln!(f, "misses {}", self.total_misses)?;
        writeln!(f, "false_alarms {}", self.total_false_alarms)?;
        write!(f, "matched {}", self.total_matched)
    }
}

/// Runs the frame matcher over aligned sequences and aggregates.
///
/// Identity switches count, per truth speaker, every matched frame whose
/// estimate id differs from that speaker's previously matched id (gaps do
/// not reset the memory).
pub fn evaluate(estimates: &EstimateSequence, truth: &GroundTruth, gate_deg: f64) -> EvalReport {
    let n_frames = estimates.frames.len().max(truth.frames.len());
    let empty_est: Vec<EstimateEntry> = Vec::new();
    let empty_truth: Vec<TruthEntry> = Vec::new();
    let mut total_active = 0u64;
    let mut total_md = 0u64;
    let mut total_fa = 0u64;
    let mut total_matched = 0u64;
    let mut err_sum = 0.0f64;
    let mut switches = 0u64;
    let mut last_identity: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    let mut detail = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        let est = estimates.frames.get(frame).unwrap_or(&empty_est);
        let tru_all = truth.frames.get(frame).unwrap_or(&empty_truth);
        let tru: Vec<&TruthEntry> = tru_all.iter().filter(|t| t.active).collect();
        let est_az: Vec<f64> = est.iter().map(|e| e.azimuth_deg).collect();
        let tru_az: Vec<f64> = tru.iter().map(|t| t.azimuth_deg).collect();
        let m = match_frame(&est_az, &tru_az, gate_deg);
        total_active += tru.len() as u64;
        total_md += m.unmatched_truth.len() as u64;
        total_fa += m.unmatched_estimates.len() as u64;
        total_matched += m.pairs.len() as u64;
        let mut matches = Vec::with_capacity(m.pairs.len());
        for &(e, t, err) in &m.pairs {
            err_sum += err;
            let truth_id = tru[t].id;
            let est_id = est[e].id;
            if let Some(&prev) = last_identity.get(&truth_id) {
                if prev != est_id {
                    switches += 1;
                }
            }
            last_identity.insert(truth_id, est_id);
            matches.push((truth_id, est_id, err));
        }
        detail.push(FrameDetail {
            frame,
            matches,
            misses: m.unmatched_truth.len() as u32,
            false_alarms: m.unmatched_estimates.len() as u32,
        });
    }
    EvalReport {
        mae_deg: (total_matched > 0).then(|| err_sum / total_matched as f64),
        md_rate_percent: (total_active > 0).then(|| 100.0 * total_md as f64 / total_active as f64),
        fa_rate_percent: (total_active > 0).then(|| 100.0 * total_fa as f64 / total_active as f64),
        id_switches: switches,
        total_active_truth: total_active,
        total_misses: total_md,
        total_false_alarms: total_fa,
        total_matched,
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn truth_frame(entries: &[(u32, f64, bool)]) -> Vec<TruthEntry> {
        entries
            .iter()
            .map(|&(id, azimuth_deg, active)| TruthEntry { id, azimuth_deg, active })
            .collect()
    }

    fn est_frame(entries: &[(u32, f64)]) -> Vec<EstimateEntry> {
        entries.iter().map(|&(id, azimuth_deg)| EstimateEntry { id, azimuth_deg }).collect()
    }

    #[test]
    fn identical_sets_match_exactly() {
        let m = match_frame(&[-10.0, 50.0], &[50.0, -10.0], 15.0);
        assert_eq!(m.pairs.len(), 2);
        assert!(m.unmatched_estimates.is_empty());
        assert!(m.unmatched_truth.is_empty());
        let total: f64 = m.pairs.iter().map(|p| p.2).sum();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn gate_violation_gives_miss_and_false_alarm() {
        let m = match_frame(&[20.0], &[0.0], 15.0);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_estimates, vec![0]);
        assert_eq!(m.unmatched_truth, vec![0]);
    }

    #[test]
    fn gate_boundary_is_inclusive() {
        let m = match_frame(&[15.0], &[0.0], 15.0);
        assert_eq!(m.pairs.len(), 1);
        assert_relative_eq!(m.pairs[0].2, 15.0, epsilon = 1e-12);
        let m = match_frame(&[15.0001], &[0.0], 15.0);
        assert!(m.pairs.is_empty());
    }

    #[test]
    fn optimal_matching_beats_greedy_crossing() {
        // Truth {0, 30}, estimates {29, 1}: the optimum pairs 0 with 1 and
        // 30 with 29 for a total error of 2 degrees. A greedy matcher
        // scanning estimate 29 first would cross the pairs.
        let m = match_frame(&[29.0, 1.0], &[0.0, 30.0], 15.0);
        assert_eq!(m.pairs.len(), 2);
        let total: f64 = m.pairs.iter().map(|p| p.2).sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-12);
        for &(e, t, _) in &m.pairs {
            match t {
                0 => assert_eq!(e, 1),
                1 => assert_eq!(e, 0),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn matching_wraps_around_circle() {
        let m = match_frame(&[-179.0], &[179.0], 15.0);
        assert_eq!(m.pairs.len(), 1);
        assert_relative_eq!(m.pairs[0].2, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn unequal_cardinalities() {
        // More estimates than truth: one must go unmatched even in range.
        let m = match_frame(&[0.0, 5.0], &[2.0], 15.0);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.unmatched_estimates.len(), 1);
        assert!(m.unmatched_truth.is_empty());
        // The closer estimate wins.
        assert_eq!(m.pairs[0].0, 0);
    }

    #[test]
    fn perfect_tracking_report() {
        let truth = GroundTruth {
            frames: (0..50)
                .map(|_| truth_frame(&[(1, -30.0, true), (2, 60.0, true)]))
                .collect(),
        };
        let est = EstimateSequence {
            frames: (0..50).map(|_| est_frame(&[(10, -30.0), (11, 60.0)])).collect(),
        };
        let r = evaluate(&est, &truth, 15.0);
        assert_eq!(r.mae_deg, Some(0.0));
        assert_eq!(r.md_rate_percent, Some(0.0));
        assert_eq!(r.fa_rate_percent, Some(0.0));
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.total_active_truth, 100);
    }

    #[test]
    fn miss_rate_from_partial_detection() {
        // One speaker active for 100 frames, detected in the last 75.
        let truth = GroundTruth {
            frames: (0..100).map(|_| truth_frame(&[(1, 10.0, true)])).collect(),
        };
        let est = EstimateSequence {
            frames: (0..100)
                .map(|f| if f < 25 { Vec::new() } else { est_frame(&[(4, 10.0)]) })
                .collect(),
        };
        let r = evaluate(&est, &truth, 15.0);
        assert_eq!(r.md_rate_percent, Some(25.0));
        assert_eq!(r.fa_rate_percent, Some(0.0));
        assert_eq!(r.total_misses, 25);
    }

    #[test]
    fn false_alarms_counted_against_active_truth() {
        let truth = GroundTruth {
            frames: (0..40)
                .map(|f| truth_frame(&[(1, 0.0, f < 20)]))
                .collect(),
        };
        // Estimate far away from truth for the first 10 frames.
        let est = EstimateSequence {
            frames: (0..40)
                .map(|f| if f < 10 { est_frame(&[(9, 120.0)]) } else { Vec::new() })
                .collect(),
        };
        let r = evaluate(&est, &truth, 15.0);
        // 20 active truth frames, all missed; 10 false alarms.
        assert_eq!(r.total_active_truth, 20);
        assert_eq!(r.md_rate_percent, Some(100.0));
        assert_eq!(r.fa_rate_percent, Some(50.0));
    }

    #[test]
    fn identity_switch_counting() {
        // Truth speaker 1 is matched by estimate id 5, then after a gap by
        // id 7: exactly one switch, counted at the re-acquisition frame.
        let truth = GroundTruth {
            frames: (0..30).map(|_| truth_frame(&[(1, 0.0, true)])).collect(),
        };
        let est = EstimateSequence {
            frames: (0..30)
                .map(|f| {
                    if f < 10 {
                        est_frame(&[(5, 0.0)])
                    } else if f < 15 {
                        Vec::new()
                    } else {
                        est_frame(&[(7, 1.0)])
                    }
                })
                .collect(),
        };
        let r = evaluate(&est, &truth, 15.0);
        assert_eq!(r.id_switches, 1);
        assert_eq!(r.total_misses, 5);
    }

    #[test]
    fn inactive_truth_is_ignored() {
        let truth = GroundTruth {
            frames: (0..10).map(|_| truth_frame(&[(1, 0.0, false)])).collect(),
        };
        let est = EstimateSequence { frames: (0..10).map(|_| Vec::new()).collect() };
        let r = evaluate(&est, &truth, 15.0);
        assert_eq!(r.total_active_truth, 0);
        assert_eq!(r.md_rate_percent, None);
        assert_eq!(r.fa_rate_percent, None);
        assert_eq!(r.mae_deg, None);
    }

    #[test]
    fn mae_ignores_gate_failures() {
        let truth = GroundTruth {
            frames: (0..2).map(|_| truth_frame(&[(1, 0.0, true)])).collect(),
        };
        let est = EstimateSequence {
            frames: vec![est_frame(&[(3, 5.0)]), est_frame(&[(3, 90.0)])],
        };
        let r = evaluate(&est, &truth, 15.0);
        assert_eq!(r.mae_deg, Some(5.0));
        assert_eq!(r.total_misses, 1);
        assert_eq!(r.total_false_alarms, 1);
    }

    #[test]
    fn timed_truth_resamples_to_frame_clock() {
        let samples = vec![
            (0.0, truth_frame(&[(1, 0.0, true)])),
            (1.0, truth_frame(&[(1, 10.0, true)])),
            (2.0, truth_frame(&[(1, 20.0, true)])),
        ];
        let gt = GroundTruth::from_timed(&samples, &[0.1, 0.9, 1.6]);
        assert_eq!(gt.frames[0][0].azimuth_deg, 0.0);
        assert_eq!(gt.frames[1][0].azimuth_deg, 10.0);
        assert_eq!(gt.frames[2][0].azimuth_deg, 20.0);
    }

    #[test]
    fn report_display_format() {
        let truth = GroundTruth { frames: vec![truth_frame(&[(1, 0.0, true)])] };
        let est = EstimateSequence { frames: vec![est_frame(&[(2, 3.0)])] };
        let r = evaluate(&est, &truth, 15.0);
        let text = r.to_string();
        assert!(text.contains("mae_deg 3.000"));
        assert!(text.contains("md_rate_percent 0.000"));
        assert!(text.contains("matched 1"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Exhaustive minimum over all injective pairings, same gating
        /// semantics as the production matcher.
        fn brute_force_total(est: &[f64], truth: &[f64], gate: f64) -> (usize, f64) {
            fn rec(
                e: usize,
                est: &[f64],
                truth: &[f64],
                gate: f64,
                used: &mut Vec<bool>,
                pairs: usize,
                total: f64,
                best: &mut (usize, f64),
            ) {
                if e == est.len() {
                    if pairs > best.0 || (pairs == best.0 && total < best.1) {
                        *best = (pairs, total);
                    }
                    return;
                }
                rec(e + 1, est, truth, gate, used, pairs, total, best);
                for t in 0..truth.len() {
                    if used[t] {
                        continue;
                    }
                    let d = crate::angles::dist_deg(est[e], truth[t]);
                    if d > gate {
                        continue;
                    }
                    used[t] = true;
                    rec(e + 1, est, truth, gate, used, pairs + 1, total + d, best);
                    used[t] = false;
                }
            }
            let mut best = (0usize, f64::INFINITY);
            let mut used = vec![false; truth.len()];
            rec(0, est, truth, gate, &mut used, 0, 0.0, &mut best);
            if best.0 == 0 {
                best.1 = 0.0;
            }
            best
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn matcher_is_optimal(
                est in proptest::collection::vec(-180.0f64..180.0, 0..5),
                truth in proptest::collection::vec(-180.0f64..180.0, 0..5),
            ) {
                let m = match_frame(&est, &truth, 15.0);
                let total: f64 = m.pairs.iter().map(|p| p.2).sum();
                let (best_pairs, best_total) = brute_force_total(&est, &truth, 15.0);
                prop_assert_eq!(m.pairs.len(), best_pairs);
                prop_assert!((total - best_total).abs() < 1e-9,
                    "matcher total {} vs brute force {}", total, best_total);
            }

            #[test]
            fn evaluate_ignores_estimate_order(
                seed in 0u64..1000,
            ) {
                use rand::prelude::*;
                use rand_chacha::ChaCha20Rng;
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let truth = GroundTruth {
                    frames: (0..20).map(|_| {
                        (0..rng.gen_range(0..4)).map(|k| TruthEntry {
                            id: k,
                            azimuth_deg: rng.gen_range(-180.0..180.0),
                            active: rng.gen_bool(0.8),
                        }).collect()
                    }).collect(),
                };
                let est = EstimateSequence {
                    frames: (0..20).map(|_| {
                        (0..rng.gen_range(0..4)).map(|k| EstimateEntry {
                            id: 100 + k,
                            azimuth_deg: rng.gen_range(-180.0..180.0),
                        }).collect()
                    }).collect(),
                };
                let shuffled = EstimateSequence {
                    frames: est.frames.iter().map(|f| {
                        let mut f = f.clone();
                        f.shuffle(&mut rng);
                        f
                    }).collect(),
                };
                let a = evaluate(&est, &truth, 15.0);
                let b = evaluate(&shuffled, &truth, 15.0);
                prop_assert_eq!(a.total_misses, b.total_misses);
                prop_assert_eq!(a.total_false_alarms, b.total_false_alarms);
                prop_assert_eq!(a.total_matched, b.total_matched);
                let ma = a.mae_deg.unwrap_or(0.0);
                let mb = b.mae_deg.unwrap_or(0.0);
                prop_assert!((ma - mb).abs() < 1e-9);
            }
        }
    }
}
