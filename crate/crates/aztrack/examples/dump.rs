use aztrack::frontend::StftConfig;
use aztrack::io;
use aztrack::localizer::{cgmm_responsibilities, precompute_means, WeightVector};
use aztrack::pipeline::{Pipeline, PipelineConfig};
use aztrack::simulator::render;

// Per-frame evidence census against ground truth: soft responsibility mass
// (uniform weights) and live EG weight mass within 10 degrees of each
// speaker, and elsewhere.
fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/demo/sc_clean/scene.toml".into());
    let scene = io::read_scene_config(std::path::Path::new(&path)).unwrap();
    let stft = StftConfig::for_rate(scene.sample_rate);
    let rendered = render(&scene, &stft).unwrap();
    let mut cfg = PipelineConfig::new(scene.geometry.clone());
    let num = |k: usize| std::env::args().nth(k).and_then(|s| s.parse::<f64>().ok());
    if let Some(v) = num(2) {
        cfg.localizer.variance = v;
    }
    if let Some(v) = num(3) {
        cfg.localizer.learning_rate = v;
    }
    if let Some(v) = num(4) {
        cfg.localizer.weight_floor = v;
    }
    if let Some(v) = num(5) {
        cfg.localizer.entropy_weight = v;
    }
    if let Some(v) = num(6) {
        cfg.band_low_hz = v;
    }
    if let Some(v) = num(7) {
        cfg.peak_threshold_factor = v;
    }
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    let audio = &rendered.audio;
    let hop = cfg.stft.hop;
    let n = audio.n_samples() / hop;
    let azimuths = cfg.candidate_azimuths();
    let d_n = azimuths.len();
    let uniform = WeightVector::uniform(d_n);
    let grid = precompute_means(
        &scene.geometry,
        &azimuths,
        cfg.sample_rate,
        cfg.stft.window_len,
        cfg.localizer.magnitude,
        cfg.ctf.reference_channel,
    )
    .unwrap();
    let wrap = |x: f64| {
        let mut d = x % 360.0;
        if d > 180.0 {
            d -= 360.0;
        }
        if d < -180.0 {
            d += 360.0;
        }
        d
    };
    for k in 0..n {
        let chunk: Vec<Vec<f64>> = audio
            .channels()
            .iter()
            .map(|c| c[k * hop..(k + 1) * hop].to_vec())
            .collect();
        if let Some(out) = p.step(&chunk).unwrap() {
            let t = out.time_s;
            let a_true = -60.0 + 12.0 * t;
            let b_true = 60.0 - 12.0 * t;
            let kf = out.features.features.len();
            // Evidence field: responsibilities under uniform weights, summed
            // over features, normalized to a distribution over candidates.
            let mut ev = vec![0.0f64; d_n];
            if kf > 0 {
                let resp = cgmm_responsibilities(
                    &out.features.features,
                    &grid,
                    &uniform,
                    cfg.localizer.variance,
                );
                for f in 0..kf {
                    for d in 0..d_n {
                        ev[d] += resp.rho[[f, d]] / kf as f64;
                    }
                }
            }
            let bucket = |mass: &[f64]| {
                let mut a = 0.0;
                let mut b = 0.0;
                let mut junk = 0.0;
                for (d, &m) in mass.iter().enumerate() {
                    let az = azimuths[d];
                    if wrap(az - a_true).abs() <= 10.0 {
                        a += m;
                    } else if wrap(az - b_true).abs() <= 10.0 {
                        b += m;
                    } else {
                        junk += m;
                    }
                }
                (a, b, junk)
            };
            let (ea, eb, ej) = bucket(&ev);
            let (wa, wb, wj) = bucket(out.weights.as_slice());
            let top = |mass: &[f64]| {
                let mut bi = 0;
                for d in 0..d_n {
                    if mass[d] > mass[bi] {
                        bi = d;
                    }
                }
                (azimuths[bi], mass[bi])
            };
            let (az_w, w_max) = top(out.weights.as_slice());
            let (az_e, e_max) = top(&ev);
            let (p1a, p1w) = out.peaks.first().copied().unwrap_or((999.0, 0.0));
            let (p2a, p2w) = out.peaks.get(1).copied().unwrap_or((999.0, 0.0));
            // Attribute each feature to the nearer true-speaker model.
            let hz_per_bin = cfg.sample_rate as f64 / cfg.stft.window_len as f64;
            let model = |theta: f64, bin: usize, ch: usize| {
                let tau = scene.geometry.tdoa(ch, cfg.ctf.reference_channel, theta);
                num_complex::Complex64::from_polar(
                    1.0,
                    -2.0 * std::f64::consts::PI * bin as f64 * hz_per_bin * tau,
                )
            };
            let (mut ka, mut kb) = (0usize, 0usize);
            let (mut ra, mut rb) = (0.0f64, 0.0f64);
            for f in &out.features.features {
                let da = (f.value - model(a_true, f.bin, f.channel)).norm_sqr();
                let db = (f.value - model(b_true, f.bin, f.channel)).norm_sqr();
                if da < db {
                    ka += 1;
                    ra += da;
                } else {
                    kb += 1;
                    rb += db;
                }
            }
            let ra = if ka > 0 { ra / ka as f64 } else { -1.0 };
            let rb = if kb > 0 { rb / kb as f64 } else { -1.0 };
            println!(
                "{t:.3} {kf} {ea:.4} {eb:.4} {ej:.4} {wa:.4} {wb:.4} {wj:.4} \
                 {az_w:.0} {w_max:.3} {az_e:.0} {e_max:.4} {p1a:.0} {p1w:.3} {p2a:.0} {p2w:.3} \
                 {ka} {ra:.4} {kb} {rb:.4}"
            );
            if let Ok(win) = std::env::var("AZ_FEAT") {
                let mut it = win.split(',').map(|s| s.parse::<f64>().unwrap());
                let (t1, t2) = (it.next().unwrap(), it.next().unwrap());
                if t >= t1 && t < t2 {
                    for f in &out.features.features {
                        println!("F {t:.3} {} {} {} {}", f.bin, f.channel, f.value.re, f.value.im);
                    }
                }
            }
            if std::env::var("AZ_FULL").is_ok() {
                let fmt = |v: &[f64]| {
                    v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" ")
                };
                println!("E {}", fmt(&ev));
                println!("W {}", fmt(out.weights.as_slice()));
            }
        }
    }
}
