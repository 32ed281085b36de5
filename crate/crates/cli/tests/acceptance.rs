//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rankcfar::clutter::ClutterModel;
use rankcfar::detectors::{Detector, DetectorConfig, DetectorKind, ShapeMode};
use rankcfar::metrics::{calibrate, evaluate, Ellipse, GroundTruth, MeasuredScene};
use rankcfar::rank::{build_distribution, cached_distribution};
use rankcfar::sim::{binomial_band, build_scene, run_pd_curve, run_pfa_regulation, TrialSpec};
use rankcfar::window::{derive_geometry, run_detector_lenient, DetectionMap, PixelState, Raster, WindowGeometry};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn regulation_families() -> Vec<ClutterModel> {
    vec![
        ClutterModel::gaussian(10.0, 1.0).unwrap(),
        ClutterModel::weibull(1.2, 1.0).unwrap(),
        ClutterModel::gamma(3.33, 1.0).unwrap(),
        ClutterModel::rayleigh(1.0).unwrap(),
        ClutterModel::k(3.0, 1.0).unwrap(),
    ]
}

/// Mann-Whitney counts of all placements of `m` test among `m + n` values.
fn enumerate(m: usize, n: usize) -> Vec<u64> {
    let total = m + n;
    let mut counts = vec![0u64; m * n + 1];
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let (mut below, mut u) = (0, 0);
        for pos in 0..total {
            if mask & (1 << pos) != 0 {
                u += below;
            } else {
                below += 1;
            }
        }
        counts[u] += 1;
    }
    counts
}

fn exact_distribution() -> Outcome {
    let start = Instant::now();
    let mut cases = 0;
    for total in 1..=12 {
        for m in 0..=total {
            let n = total - m;
            let dp: Vec<u64> =
                build_distribution(m, n).unwrap().counts().iter().map(|c| u64::try_from(c).unwrap()).collect();
            if dp != enumerate(m, n) {
                return Err(format!("counts differ at m={m} n={n}"));
            }
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("{cases} (m, n) pairs equal enumeration in {secs:.2} s"))
}

fn closed_form_moments() -> Outcome {
    for (m, n) in [(1usize, 248usize), (4, 780), (4, 1500), (1, 488)] {
        let d = build_distribution(m, n).unwrap();
        let (bm, bn, big_n) = (BigInt::from(m), BigInt::from(n), BigInt::from(m + n));
        let mean = BigRational::new(&bm * (&big_n + 1), BigInt::from(2));
        let var = BigRational::new(&bm * &bn * (&big_n + 1), BigInt::from(12));
        if d.mean_exact() != mean || d.variance_exact() != var {
            return Err(format!("m={m} n={n}: mean {} var {}", d.mean_exact(), d.variance_exact()));
        }
    }
    Ok("mean and variance exact for (1,248) (4,780) (4,1500) (1,488)".into())
}

fn geometry_identities() -> Outcome {
    let got: Vec<usize> =
        [(2, 30, 3), (1, 30, 1), (2, 60, 3), (1, 60, 1)].iter().map(|&(t, g, q)| derive_geometry(t, g, q).2).collect();
    check(got == [780, 248, 1500, 488], format!("reference counts {got:?}"))
}

fn threshold_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let m = rng.random_range(1..=4);
        let n = rng.random_range(1..=1500);
        let p = 10f64.powf(rng.random_range(1e-9f64.log10()..=0.5f64.log10()));
        let d = cached_distribution(m, n).unwrap();
        let t = d.threshold_for_pfa(p).unwrap().t_w as i64;
        if !(d.tail_probability(t) <= p && p < d.tail_probability(t - 1)) {
            return Err(format!("m={m} n={n} p={p}: t_w={t}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("100 random triples hold in {secs:.2} s"))
}

fn distribution_free_regulation() -> Outcome {
    let geom = WindowGeometry::new(2, 30, 3, 1).unwrap();
    let config = DetectorConfig::new(DetectorKind::Wilcoxon, 1e-3);
    let rows = run_pfa_regulation(&regulation_families(), &config, &geom, 1e-3, 1_000_000, 5, 0.99)
        .map_err(|e| e.to_string())?;
    let (lo, hi) = binomial_band(rows[0].achieved_pfa, 1_000_000, 0.99);
    let rates: Vec<String> = rows.iter().map(|r| format!("{}={:.4e}", r.family.family(), r.measured_pfa)).collect();
    let ok = rows.iter().all(|r| lo <= r.measured_pfa && r.measured_pfa <= hi && r.skipped == 0);
    check(ok, format!("achieved {:.4e}, band [{lo:.4e}, {hi:.4e}]: {}", rows[0].achieved_pfa, rates.join(" ")))
}

fn parametric_fragility() -> Outcome {
    let geom = WindowGeometry::new(1, 30, 1, 1).unwrap();
    let family = [ClutterModel::weibull(1.2, 1.0).unwrap()];
    let config = DetectorConfig::new(DetectorKind::TwoParameter, 1e-3);
    let r = &run_pfa_regulation(&family, &config, &geom, 1e-3, 1_000_000, 6, 0.99).map_err(|e| e.to_string())?[0];
    check(r.measured_pfa >= 2e-3, format!("two_parameter on weibull:1.2 measures {:.4e} at design 1e-3", r.measured_pfa))
}

fn pd_ordering() -> Outcome {
    let scr: Vec<f64> = (0..=15).map(|k| 2.0 * k as f64).collect();
    let curve = |kind, t, q| {
        run_pd_curve(&TrialSpec {
            clutter: ClutterModel::weibull(2.0, 1.0).unwrap(),
            detector: DetectorConfig::new(kind, 1e-5),
            geometry: WindowGeometry::new(t, 30, q, 1).unwrap(),
            scr_db: scr.clone(),
            trials: 100_000,
            seed: 7,
        })
        .map_err(|e| e.to_string())
    };
    let w = curve(DetectorKind::Wilcoxon, 2, 3)?;
    let p = curve(DetectorKind::Weibull, 1, 1)?;
    let mut compared = Vec::new();
    for (a, b) in w.rows.iter().zip(&p.rows) {
        let inside = |x: f64| x > 0.1 && x < 0.9;
        if inside(a.p_d) || inside(b.p_d) {
            compared.push(format!("{}dB {:.3}/{:.3}", a.scr_db, a.p_d, b.p_d));
            if a.p_d < b.p_d {
                return Err(format!("weibull ahead at {} dB: {} < {}", a.scr_db, a.p_d, b.p_d));
            }
        }
    }
    check(!compared.is_empty(), format!("wilcoxon/weibull {}", compared.join(", ")))
}

fn false_alarm_anchor() -> Outcome {
    let ships = vec![
        Ellipse::new(200.0, 200.0, 50.0, 40.0, 0.0).unwrap(),
        Ellipse::new(700.0, 600.0, 4.0, 3.8, 0.0).unwrap(),
    ];
    let truth = GroundTruth::new(1001, 901, ships).unwrap();
    let mut map = DetectionMap::from_states(1001, 901, vec![PixelState::Clear; 1001 * 901]).unwrap();
    for k in 0..26 {
        map.mark(10 + 30 * k, 850, PixelState::Detected);
    }
    let r = evaluate(&map, &truth).unwrap();
    check(
        truth.ship_area() == 1583 && r.n_c == 900_318 && r.p_fa == 26.0 / 900_318.0,
        format!("sum N_s {} N_c {} P_fa {:e}", truth.ship_area(), r.n_c, r.p_fa),
    )
}

fn detect_map(raster: &Raster, geom: &WindowGeometry, config: DetectorConfig) -> DetectionMap {
    let d = Detector::new(config, geom.test_count(), geom.reference_count()).unwrap();
    run_detector_lenient(raster, geom, |t, r| d.decide(t, r), |e| e.is_recoverable()).unwrap().0
}

fn weibull_raster(w: usize, h: usize, seed: u64) -> Raster {
    Raster::new(w, h, ClutterModel::weibull(1.2, 1.0).unwrap().sample(w * h, seed)).unwrap()
}

fn invariance() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 20, failure_persistence: None, ..Config::default() });
    let transforms = (0u64..1000, 0u8..4, 0.1f64..3.0, 0.0f64..5.0);
    runner
        .run(&transforms, |(seed, kind, a, b)| {
            let raster = weibull_raster(60, 50, seed);
            let f = move |x: f64| match kind {
                0 => a * x + b,
                1 => x.powf(0.5 + a),
                2 => (1.0 + a * x).ln() + b,
                _ => x.atan() * a + x,
            };
            let moved = raster.map(f).unwrap();
            let geom = WindowGeometry::new(2, 3, 2, 1).unwrap();
            let config = DetectorConfig::new(DetectorKind::Wilcoxon, 2e-2);
            prop_assert_eq!(detect_map(&raster, &geom, config), detect_map(&moved, &geom, config));
            Ok(())
        })
        .map_err(|e| format!("monotone transform: {e}"))?;
    runner
        .run(&(0u64..1000, -3.0f64..3.0), |(seed, log_alpha)| {
            let raster = weibull_raster(50, 40, seed);
            let scaled = raster.map(|v| v * 10f64.powf(log_alpha)).unwrap();
            let geom = WindowGeometry::new(1, 3, 2, 1).unwrap();
            for kind in DetectorKind::ALL.into_iter().filter(|k| k.is_parametric()) {
                let config = DetectorConfig { shape: ShapeMode::Fixed(0.6), ..DetectorConfig::new(kind, 2e-2) };
                prop_assert_eq!(detect_map(&raster, &geom, config), detect_map(&scaled, &geom, config), "{}", kind);
            }
            Ok(())
        })
        .map_err(|e| format!("scaling: {e}"))?;
    Ok("20 increasing transforms and 20 scalings leave maps bit-identical".into())
}

fn weak_target_advantage() -> Outcome {
    let clutter = ClutterModel::weibull(1.2, 1.0).unwrap();
    let rules = [
        (DetectorKind::Wilcoxon, (2, 60, 3)),
        (DetectorKind::TwoParameter, (1, 60, 1)),
        (DetectorKind::Weibull, (1, 60, 1)),
        (DetectorKind::TruncatedGamma, (1, 60, 1)),
        (DetectorKind::TrimmedRayleigh, (1, 0, 61)),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 1..=5u64 {
        let centers = [(200.0, 200.0), (440.0, 200.0), (200.0, 440.0), (440.0, 440.0)];
        let ships: Vec<(Ellipse, f64)> = centers
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (Ellipse::new(x, y, 50.0, 16.0, (37 * seed + 45 * i as u64) as f64 % 180.0).unwrap(), 6.0))
            .collect();
        let (raster, truth) = build_scene(640, 640, &clutter, &ships, seed).map_err(|e| e.to_string())?;
        let mut pds = Vec::new();
        for (kind, (t, g, q)) in rules {
            let geom = WindowGeometry::new(t, g, q, 1).unwrap();
            let mut config = DetectorConfig::new(kind, 1e-4);
            if kind == DetectorKind::TruncatedGamma {
                config = config.resolve_shape(raster.data()).map_err(|e| e.to_string())?;
            }
            let d = Detector::new(config, geom.test_count(), geom.reference_count()).map_err(|e| e.to_string())?;
            let scene = MeasuredScene::measure(&raster, &geom, d).map_err(|e| e.to_string())?;
            let row = calibrate(&scene, &truth, 1e-4).map_err(|e| e.to_string())?;
            let p_fa = row.eval.p_fa;
            let p_d = row.eval.aggregate_p_d.unwrap_or(0.0);
            ok &= (0.8e-4..=1.2e-4).contains(&p_fa);
            pds.push(p_d);
            lines.push(format!("s{seed} {kind} P_fa {p_fa:.3e} P_d {p_d:.4}"));
        }
        ok &= pds[1..].iter().all(|&p| pds[0] > p);
    }
    check(ok, lines.join("; "))
}

fn quantile_accuracy() -> Outcome {
    let mut families = regulation_families();
    families.extend([
        ClutterModel::weibull(0.6, 2.5).unwrap(),
        ClutterModel::gamma(0.5, 3.0).unwrap(),
        ClutterModel::k(0.8, 1.5).unwrap(),
    ]);
    let mut ps: Vec<f64> = (0..=80).map(|k| 10f64.powf(-8.0 + k as f64 * (8.0 - 0.5f64.log10().abs()) / 80.0)).collect();
    ps.extend(ps.clone().iter().map(|p| 1.0 - p));
    let mut worst = 0.0f64;
    for f in &families {
        for &p in &ps {
            let err = (f.cdf(f.quantile(p)) - p).abs();
            if err.is_nan() || err >= 1e-8 {
                return Err(format!("{f} at p={p}: error {err:e}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("{} families x {} levels, worst error {worst:.2e}", families.len(), ps.len()))
}

fn rankcfar(workers: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rankcfar"))
        .arg("--workers")
        .arg(workers.to_string())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |name: &str| tmp.path().join(name).to_str().unwrap().to_owned();
    let (image, truth) = (d("scene/scene.raw"), d("scene/truth.txt"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("scene", vec!["simulate", "scene", "--width", "200", "--height", "160", "--ship", "100,80,40,12,30,9", "--seed", "3"]
            .into_iter().map(String::from).collect()),
        ("detect", ["detect", "--image", &image, "--truth", &truth, "--pfa", "1e-3", "--g", "14"]
            .map(String::from).to_vec()),
        ("gamma", ["detect", "--image", &image, "--detector", "truncated_gamma", "--pfa", "1e-3", "--g", "14"]
            .map(String::from).to_vec()),
        ("fit", ["fit", "--image", &image, "--mask-truth", &truth].map(String::from).to_vec()),
        ("evaluate", ["evaluate", "--mask", &d("detect/mask.pgm"), "--truth", &truth].map(String::from).to_vec()),
        ("roc", ["roc", "--image", &image, "--truth", &truth, "--detector", "wilcoxon@2,14,2,1", "--detector",
            "weibull@1,14,1,1", "--pfa-grid", "1e-6:1e-2:5", "--match-pfa", "1e-3"].map(String::from).to_vec()),
        ("pd", ["simulate", "pd", "--detector", "weibull", "--pfa", "1e-3", "--g", "2", "--scr", "0:12:4",
            "--trials", "3000", "--seed", "9"].map(String::from).to_vec()),
        ("pfa", ["simulate", "pfa", "--pfa", "1e-2", "--g", "1", "--q", "1", "--trials", "20000", "--seed", "9"]
            .map(String::from).to_vec()),
    ];
    let mut compared = 0;
    for (name, args) in &runs {
        let first = d(name);
        let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
        full.extend(["--out", &first]);
        rankcfar(1, &full)?;
        let expected = dir_bytes(Path::new(&first));
        let manifest = Path::new(&first).join("run.json");
        for workers in [1, 3] {
            let again = d(&format!("{name}_replay{workers}"));
            rankcfar(workers, &["replay", "--manifest", manifest.to_str().unwrap(), "--out", &again])?;
            if dir_bytes(Path::new(&again)) != expected {
                return Err(format!("{name} replay at {workers} workers differs"));
            }
            compared += expected.len();
        }
    }
    Ok(format!("{} manifests replayed at 1 and 3 workers, {compared} files byte-identical", runs.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("exact distribution", exact_distribution),
        ("closed-form moments", closed_form_moments),
        ("geometry identities", geometry_identities),
        ("threshold contract", threshold_contract),
        ("distribution-free regulation", distribution_free_regulation),
        ("parametric fragility", parametric_fragility),
        ("detection ordering", pd_ordering),
        ("false-alarm arithmetic", false_alarm_anchor),
        ("scale and monotone invariance", invariance),
        ("weak-target advantage", weak_target_advantage),
        ("quantile accuracy", quantile_accuracy),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name} [{secs:.1} s]: {detail}", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
