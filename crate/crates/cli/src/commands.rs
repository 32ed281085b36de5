//! Subcommand arguments, manifests and execution.
//!
//! Every argument struct doubles as the manifest body: a run writes its
//! resolved arguments to `run.json`, and `replay` feeds them back. The
//! output directory and worker count are left out so a replay elsewhere, or
//! with another pool size, writes the same bytes.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use rankcfar::clutter::{histogram_report, ClutterModel, FitMethod, DEFAULT_BINS};
use rankcfar::detectors::{Detector, DetectorConfig, DetectorKind, ShapeMode};
use rankcfar::metrics::{calibrate, ellipse_mask, roc_sweep, write_eval_csv, Ellipse, Evaluator, GroundTruth, MeasuredScene, RocRow};
use rankcfar::rank::cached_distribution;
use rankcfar::sim::{build_scene, run_pd_curve, run_pfa_regulation, write_regulation_csv, TrialSpec};
use rankcfar::window::{PixelState, Raster, WindowGeometry};

use crate::io::{self, RasterFormat};

pub const MANIFEST: &str = "run.json";

/// Invalid arguments; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "rankcfar", version, about = "Rank-based and parametric CFAR ship detection")]
pub struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact rank threshold for m test and n reference samples.
    Threshold(ThresholdArgs),
    /// Run one detector over an image.
    Detect(DetectArgs),
    /// Histogram and distribution fits of clutter pixels.
    Fit(FitArgs),
    /// Monte Carlo experiments and synthetic scenes.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Score a detection mask against ground truth.
    Evaluate(EvaluateArgs),
    /// Detection against false-alarm rate over a design-rate grid.
    Roc(RocArgs),
    /// Re-run a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Detection probability against signal-to-clutter ratio.
    Pd(PdArgs),
    /// Measured false-alarm rate on pure clutter of several families.
    Pfa(PfaArgs),
    /// Synthetic clutter image with elliptical ships.
    Scene(SceneArgs),
}

/// A manifest body: one resolved command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Run {
    Detect(DetectArgs),
    Fit(FitArgs),
    SimulatePd(PdArgs),
    SimulatePfa(PfaArgs),
    SimulateScene(SceneArgs),
    Evaluate(EvaluateArgs),
    Roc(RocArgs),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub run: Run,
}

#[derive(Debug, Clone, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub pfa: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DetectorArgs {
    /// wilcoxon, two_parameter, weibull, truncated_gamma or trimmed_rayleigh.
    #[arg(long, default_value = "wilcoxon")]
    pub detector: String,
    /// Design false-alarm probability.
    #[arg(long, default_value_t = 1e-6)]
    pub pfa: f64,
    /// Fraction of reference samples truncated by truncated_gamma.
    #[arg(long, default_value_t = 0.10)]
    pub truncation_ratio: f64,
    /// Trimming factor of trimmed_rayleigh.
    #[arg(long, default_value_t = 2.0)]
    pub trim_factor: f64,
    /// Gamma shape for truncated_gamma: enl, ml or a number.
    #[arg(long, default_value = "enl")]
    pub shape: String,
}

impl DetectorArgs {
    pub fn config(&self) -> Result<DetectorConfig> {
        let kind: DetectorKind = self.detector.parse().map_err(|e| usage(format!("{e}")))?;
        detector_config(kind, self.pfa, self.truncation_ratio, self.trim_factor, &self.shape)
    }
}

fn detector_config(kind: DetectorKind, pfa: f64, truncation: f64, trim: f64, shape: &str) -> Result<DetectorConfig> {
    let shape = match shape {
        "enl" => ShapeMode::Enl,
        "ml" => ShapeMode::Ml,
        s => ShapeMode::Fixed(s.parse().map_err(|_| usage(format!("shape {s:?} is not enl, ml or a number")))?),
    };
    let config = DetectorConfig { kind, design_pfa: pfa, truncation_ratio: truncation, trim_factor: trim, shape };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

/// Window geometry; omitted fields take the detector's default.
#[derive(Debug, Clone, Copy, Default, Args, Serialize, Deserialize)]
pub struct GeometryArgs {
    /// Test block side.
    #[arg(long)]
    pub t: Option<usize>,
    /// Guard width.
    #[arg(long)]
    pub g: Option<usize>,
    /// Reference ring thickness.
    #[arg(long)]
    pub q: Option<usize>,
    /// Sliding step.
    #[arg(long)]
    pub stride: Option<usize>,
}

/// `(t, g, q, s)`: the rank detector slides a 2x2 block by 2 inside a
/// 68-pixel window, the parametric rules test single pixels in a 63-pixel
/// window, the trimmed-Rayleigh rule without a guard.
pub fn default_geometry(kind: DetectorKind) -> (usize, usize, usize, usize) {
    match kind {
        DetectorKind::Wilcoxon => (2, 30, 3, 2),
        DetectorKind::TrimmedRayleigh => (1, 0, 31, 1),
        _ => (1, 30, 1, 1),
    }
}

impl GeometryArgs {
    pub fn resolve(&self, kind: DetectorKind) -> Result<(GeometryArgs, WindowGeometry)> {
        let (t, g, q, s) = default_geometry(kind);
        let r = GeometryArgs {
            t: Some(self.t.unwrap_or(t)),
            g: Some(self.g.unwrap_or(g)),
            q: Some(self.q.unwrap_or(q)),
            stride: Some(self.stride.unwrap_or(s)),
        };
        let geometry = WindowGeometry::new(r.t.unwrap(), r.g.unwrap(), r.q.unwrap(), r.stride.unwrap())
            .map_err(|e| usage(e.to_string()))?;
        if kind.is_parametric() && geometry.t != 1 {
            return Err(usage(format!("{kind} tests single pixels and needs --t 1, got {}", geometry.t)));
        }
        Ok((r, geometry))
    }
}

fn echo_geometry(g: &WindowGeometry) {
    eprintln!(
        "geometry: t={} g={} q={} stride={} l={} m={} n={}",
        g.t,
        g.g,
        g.q,
        g.s,
        g.side(),
        g.test_count(),
        g.reference_count()
    );
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DetectArgs {
    /// PGM or raw_f32 image.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub geometry: GeometryArgs,
    /// Ground-truth ellipses; adds eval.csv.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Ground-truth ellipses whose pixels are left out of the fit.
    #[arg(long)]
    pub mask_truth: Option<PathBuf>,
    /// Comma-separated fit methods.
    #[arg(long, default_value = "gaussian,weibull,gamma,rayleigh,k")]
    pub families: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PdArgs {
    /// Clutter model `family[:p1[:p2]]`.
    #[arg(long, default_value = "weibull:2:1")]
    pub clutter: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub geometry: GeometryArgs,
    /// SCR grid in dB: `start:stop:step` or a comma list.
    #[arg(long, default_value = "0:30:2")]
    pub scr: String,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PfaArgs {
    /// Comma-separated clutter models.
    #[arg(long, default_value = "gaussian,weibull,gamma,rayleigh,k")]
    pub families: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value_t = 1_000_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Two-sided level of the Wilson interval.
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SceneArgs {
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    #[arg(long, default_value = "weibull:1.2:1")]
    pub clutter: String,
    /// `cx,cy,a,b,theta_deg,scr_db`; repeat for more ships.
    #[arg(long = "ship")]
    pub ships: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// raw_f32, pgm16 or pgm8.
    #[arg(long, default_value = "raw_f32")]
    pub format: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Detection mask PGM (255 detected, 128 not evaluated, 0 clear).
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RocArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// `kind[@t,g,q,stride]`; repeat to compare detectors.
    #[arg(long = "detector", default_value = "wilcoxon")]
    pub detectors: Vec<String>,
    /// Design rates: `lo:hi:count` log-spaced, or a comma list.
    #[arg(long, default_value = "1e-10:1e-2:17")]
    pub pfa_grid: String,
    /// Also calibrate every detector to this measured false-alarm rate.
    #[arg(long)]
    pub match_pfa: Option<f64>,
    #[arg(long, default_value_t = 0.10)]
    pub truncation_ratio: f64,
    #[arg(long, default_value_t = 2.0)]
    pub trim_factor: f64,
    #[arg(long, default_value = "enl")]
    pub shape: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses the command line, runs it inside a pool of `--workers` threads.
pub fn run_cli(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().context("starting worker pool")?;
    pool.install(|| match cli.command {
        Command::Threshold(a) => threshold(&a),
        Command::Replay(a) => replay(&a.manifest, &a.out),
        Command::Detect(a) => execute(Run::Detect(a)),
        Command::Fit(a) => execute(Run::Fit(a)),
        Command::Simulate(SimulateCommand::Pd(a)) => execute(Run::SimulatePd(a)),
        Command::Simulate(SimulateCommand::Pfa(a)) => execute(Run::SimulatePfa(a)),
        Command::Simulate(SimulateCommand::Scene(a)) => execute(Run::SimulateScene(a)),
        Command::Evaluate(a) => execute(Run::Evaluate(a)),
        Command::Roc(a) => execute(Run::Roc(a)),
    })
}

pub fn threshold(a: &ThresholdArgs) -> Result<()> {
    if !(a.pfa > 0.0 && a.pfa < 1.0) {
        return Err(usage(format!("--pfa {} is outside (0, 1)", a.pfa)));
    }
    if a.m == 0 || a.n == 0 {
        return Err(usage("--m and --n must be positive"));
    }
    let dist = cached_distribution(a.m, a.n)?;
    let th = dist.threshold_for_pfa(a.pfa)?;
    let below = dist.tail_probability(th.t_w as i64 - 1);
    if !(th.achieved_pfa <= a.pfa && (below > a.pfa || th.t_mw == 0)) {
        bail!("threshold {} violates the tail contract at P_FA {}", th.t_w, a.pfa);
    }
    println!("t_w,t_mw,achieved_pfa");
    println!("{},{},{}", th.t_w, th.t_mw, th.achieved_pfa);
    Ok(())
}

pub fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?;
    let mut run = m.run;
    *run.out_mut() = out.to_path_buf();
    execute(run)
}

impl Run {
    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Run::Detect(a) => &mut a.out,
            Run::Fit(a) => &mut a.out,
            Run::SimulatePd(a) => &mut a.out,
            Run::SimulatePfa(a) => &mut a.out,
            Run::SimulateScene(a) => &mut a.out,
            Run::Evaluate(a) => &mut a.out,
            Run::Roc(a) => &mut a.out,
        }
    }
}

fn write_manifest(out: &Path, run: &Run) -> Result<()> {
    let m = Manifest { tool: "rankcfar".into(), version: env!("CARGO_PKG_VERSION").into(), run: run.clone() };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    let path = out.join(MANIFEST);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs a resolved command, writing its outputs and manifest to its
/// output directory.
pub fn execute(mut run: Run) -> Result<()> {
    let out = run.out_mut().clone();
    if out.as_os_str().is_empty() {
        return Err(usage("--out is required"));
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match &mut run {
        Run::Detect(a) => detect(a, &out)?,
        Run::Fit(a) => fit(a, &out)?,
        Run::SimulatePd(a) => simulate_pd(a, &out)?,
        Run::SimulatePfa(a) => simulate_pfa(a, &out)?,
        Run::SimulateScene(a) => simulate_scene(a, &out)?,
        Run::Evaluate(a) => evaluate_mask(a, &out)?,
        Run::Roc(a) => roc(a, &out)?,
    }
    write_manifest(&out, &run)
}

fn read_truth(path: &Path, raster_w: usize, raster_h: usize) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    GroundTruth::parse(&text, raster_w, raster_h).with_context(|| format!("parsing {}", path.display()))
}

/// Fixes an estimated Gamma shape from the positive pixels of the image.
fn resolve_on_image(config: DetectorConfig, raster: &Raster) -> Result<DetectorConfig> {
    if config.kind != DetectorKind::TruncatedGamma {
        return Ok(config);
    }
    let resolved = config.resolve_shape(raster.data()).context("estimating the Gamma shape")?;
    if let ShapeMode::Fixed(k) = resolved.shape {
        info!("gamma shape {k}");
    }
    Ok(resolved)
}

fn measure(raster: &Raster, config: DetectorConfig, geometry: &WindowGeometry) -> Result<MeasuredScene> {
    let config = resolve_on_image(config, raster)?;
    let detector = Detector::new(config, geometry.test_count(), geometry.reference_count())?;
    let scene = MeasuredScene::measure(raster, geometry, detector)?;
    let skipped = scene.skipped();
    if skipped > 0 {
        warn!("{}: {skipped} of {} windows had degenerate references and were marked clear", config.kind, scene.grid.values.len());
    }
    Ok(scene)
}

fn detect(a: &mut DetectArgs, out: &Path) -> Result<()> {
    let config = a.detector.config()?;
    let (resolved, geometry) = a.geometry.resolve(config.kind)?;
    a.geometry = resolved;
    echo_geometry(&geometry);
    let raster = io::read_raster(&a.image)?;
    let truth = a.truth.as_ref().map(|p| read_truth(p, raster.width(), raster.height())).transpose()?;
    let scene = measure(&raster, config, &geometry)?;
    let map = scene.map_at(config.design_pfa)?;
    info!("{} detections", map.count(PixelState::Detected));
    io::write_mask(&out.join("mask.pgm"), &map)?;
    io::write_detections(&out.join("detections.csv"), &map)?;
    if let Some(truth) = truth {
        let e = Evaluator::new(&truth).evaluate(&map)?;
        io::write_with(&out.join("eval.csv"), |w| write_eval_csv(w, &[(Some(config.design_pfa), &e)]))?;
    }
    Ok(())
}

fn fit(a: &FitArgs, out: &Path) -> Result<()> {
    let families = a
        .families
        .split(',')
        .map(|f| f.parse::<FitMethod>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let raster = io::read_raster(&a.image)?;
    let mut keep = vec![true; raster.data().len()];
    if let Some(p) = &a.mask_truth {
        let truth = read_truth(p, raster.width(), raster.height())?;
        for i in ellipse_mask(&truth).into_iter().flatten() {
            keep[i] = false;
        }
    }
    let samples: Vec<f64> = raster.data().iter().zip(&keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
    info!("fitting {} clutter pixels", samples.len());
    let report = histogram_report(&samples, a.bins, &families)?;
    for f in &report.fits {
        if let Err(e) = &f.model {
            warn!("{:?} fit failed: {e}", f.method);
        }
    }
    io::write_with(&out.join("histogram_body.csv"), |w| report.write_body_csv(w))?;
    io::write_with(&out.join("histogram_tail.csv"), |w| report.write_tail_csv(w))?;
    io::write_with(&out.join("fits.csv"), |w| report.write_fits_csv(w))?;
    Ok(())
}

/// `start:stop:step` (inclusive) or a comma list.
pub fn parse_scr_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || usage(format!("bad SCR grid {s:?}"));
    let nums = |sep: char| s.split(sep).map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>();
    if s.contains(':') {
        let v = nums(':')?;
        let [start, stop, step] = v[..] else { return Err(bad()) };
        if !(step > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| start + step * i as f64).collect())
    } else {
        nums(',')
    }
}

/// `lo:hi:count` log-spaced (inclusive) or a comma list.
pub fn parse_pfa_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || usage(format!("bad design-rate grid {s:?}"));
    let grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, count] = parts[..] else { return Err(bad()) };
        let (lo, hi): (f64, f64) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
        let count: usize = count.parse().map_err(|_| bad())?;
        if count < 2 || !(lo > 0.0 && hi > lo) {
            return Err(bad());
        }
        let (a, b) = (lo.log10(), hi.log10());
        (0..count).map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)).collect()
    } else {
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
    };
    if grid.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(bad());
    }
    Ok(grid)
}

fn parse_model(s: &str) -> Result<ClutterModel> {
    s.parse::<ClutterModel>().map_err(|e| usage(format!("clutter {s:?}: {e}")))
}

fn simulate_pd(a: &mut PdArgs, out: &Path) -> Result<()> {
    let config = a.detector.config()?;
    let (resolved, geometry) = a.geometry.resolve(config.kind)?;
    a.geometry = resolved;
    echo_geometry(&geometry);
    let spec = TrialSpec {
        clutter: parse_model(&a.clutter)?,
        detector: config,
        geometry,
        scr_db: parse_scr_grid(&a.scr)?,
        trials: a.trials,
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let curve = run_pd_curve(&spec)?;
    info!("{} achieved P_FA {}", curve.detector, curve.achieved_pfa);
    io::write_with(&out.join("pd.csv"), |w| curve.write_csv(w))
}

fn simulate_pfa(a: &mut PfaArgs, out: &Path) -> Result<()> {
    let config = a.detector.config()?;
    let (resolved, geometry) = a.geometry.resolve(config.kind)?;
    a.geometry = resolved;
    echo_geometry(&geometry);
    let families = a.families.split(',').map(parse_model).collect::<Result<Vec<_>>>()?;
    let rows = run_pfa_regulation(&families, &config, &geometry, config.design_pfa, a.trials, a.seed, a.confidence)?;
    for r in &rows {
        info!("{}: {} of {} fired, achieved P_FA {}", r.family, r.fired, r.trials, r.achieved_pfa);
    }
    io::write_with(&out.join("pfa.csv"), |w| write_regulation_csv(w, &rows))
}

pub fn parse_ship(s: &str) -> Result<(Ellipse, f64)> {
    let v = s
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("ship {s:?} is not cx,cy,a,b,theta_deg,scr_db")))?;
    let [cx, cy, a, b, theta, scr] = v[..] else {
        return Err(usage(format!("ship {s:?} needs 6 numbers")));
    };
    Ok((Ellipse::new(cx, cy, a, b, theta).map_err(|e| usage(e.to_string()))?, scr))
}

pub fn scene_file(format: RasterFormat) -> &'static str {
    match format {
        RasterFormat::RawF32 => "scene.raw",
        _ => "scene.pgm",
    }
}

fn simulate_scene(a: &SceneArgs, out: &Path) -> Result<()> {
    let clutter = parse_model(&a.clutter)?;
    let format: RasterFormat = a.format.parse().map_err(usage)?;
    let ships = a.ships.iter().map(|s| parse_ship(s)).collect::<Result<Vec<_>>>()?;
    let (raster, truth) = build_scene(a.width, a.height, &clutter, &ships, a.seed)?;
    io::write_raster(&out.join(scene_file(format)), &raster, format)?;
    fs::write(out.join("truth.txt"), truth.to_text()).context("writing truth.txt")?;
    Ok(())
}

fn evaluate_mask(a: &EvaluateArgs, out: &Path) -> Result<()> {
    let map = io::read_mask(&a.mask)?;
    let truth = read_truth(&a.truth, map.width(), map.height())?;
    let e = Evaluator::new(&truth).evaluate(&map)?;
    io::write_with(&out.join("eval.csv"), |w| write_eval_csv(w, &[(None, &e)]))
}

/// `kind[@t,g,q,stride]` with omitted geometry taken from the defaults.
pub fn parse_detector_spec(s: &str) -> Result<(DetectorKind, GeometryArgs)> {
    let (kind, geom) = s.split_once('@').map_or((s, None), |(k, g)| (k, Some(g)));
    let kind: DetectorKind = kind.parse().map_err(|e| usage(format!("{e}")))?;
    let mut g = GeometryArgs::default();
    if let Some(text) = geom {
        let v = text
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| usage(format!("bad geometry in {s:?}")))?;
        let [t, gg, q, st] = v[..] else {
            return Err(usage(format!("{s:?} needs kind@t,g,q,stride")));
        };
        g = GeometryArgs { t: Some(t), g: Some(gg), q: Some(q), stride: Some(st) };
    }
    Ok((kind, g))
}

fn write_roc_row<W: std::io::Write>(w: &mut W, kind: DetectorKind, g: &WindowGeometry, r: &RocRow) -> std::io::Result<()> {
    let p_d = r.eval.aggregate_p_d.map(|p| p.to_string()).unwrap_or_default();
    writeln!(
        w,
        "{kind},{},{},{},{},{},{},{},{},{},{p_d}",
        g.t, g.g, g.q, g.s, r.design_pfa, r.achieved_pfa, r.eval.n_fa, r.eval.n_c, r.eval.p_fa
    )
}

const ROC_HEADER: &str = "detector,t,g,q,stride,design_pfa,achieved_pfa,n_fa,n_c,measured_pfa,p_d";

fn roc(a: &mut RocArgs, out: &Path) -> Result<()> {
    let grid = parse_pfa_grid(&a.pfa_grid)?;
    if let Some(p) = a.match_pfa {
        if !(p > 0.0 && p < 1.0) {
            return Err(usage(format!("--match-pfa {p} is outside (0, 1)")));
        }
    }
    let mut specs = Vec::new();
    for s in &a.detectors {
        let (kind, g) = parse_detector_spec(s)?;
        let (resolved, geometry) = g.resolve(kind)?;
        let config = detector_config(kind, grid[0], a.truncation_ratio, a.trim_factor, &a.shape)?;
        specs.push((config, resolved, geometry));
    }
    a.detectors = specs
        .iter()
        .map(|(c, g, _)| format!("{}@{},{},{},{}", c.kind, g.t.unwrap(), g.g.unwrap(), g.q.unwrap(), g.stride.unwrap()))
        .collect();
    let raster = io::read_raster(&a.image)?;
    let truth = read_truth(&a.truth, raster.width(), raster.height())?;
    let mut rows = Vec::new();
    let mut matched = Vec::new();
    for (config, _, geometry) in &specs {
        echo_geometry(geometry);
        let scene = measure(&raster, *config, geometry)?;
        for r in roc_sweep(&scene, &truth, &grid)? {
            rows.push((config.kind, *geometry, r));
        }
        if let Some(target) = a.match_pfa {
            let r = calibrate(&scene, &truth, target)?;
            info!("{} matched at design {}: measured {} P_d {:?}", config.kind, r.design_pfa, r.eval.p_fa, r.eval.aggregate_p_d);
            matched.push((config.kind, *geometry, r));
        }
    }
    let write = |name: &str, rows: &[(DetectorKind, WindowGeometry, RocRow)]| {
        io::write_with(&out.join(name), |w| {
            writeln!(w, "{ROC_HEADER}")?;
            for (k, g, r) in rows {
                write_roc_row(w, *k, g, r)?;
            }
            Ok(())
        })
    };
    write("roc.csv", &rows)?;
    if a.match_pfa.is_some() {
        write("matched.csv", &matched)?;
    }
    Ok(())
}
