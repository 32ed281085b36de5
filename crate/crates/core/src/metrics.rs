//! Pixel-level scoring against elliptical ship ground truth, ROC sweeps and
//! false-alarm calibration.
//!
//! Ship `i` has the analytic area `N_s(i) = round(pi a b / 4)` with full axes
//! `a >= b`. The measured false-alarm rate is `N_fa / N_c` with
//! `N_c = W H - sum N_s(i)`, less any unevaluated border pixels outside the
//! ships. Pixel membership is decided by the ellipse itself, so a ship may
//! hold slightly more or fewer pixels than `N_s(i)`; `P_d` is capped at 1.

use std::f64::consts::PI;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::detectors::{DetectError, Detector, WindowStat};
use crate::window::{map_windows, DetectionMap, PixelState, Raster, WindowError, WindowGeometry, WindowGrid};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ellipse axes must satisfy a >= b > 0 with a rounded area of at least one pixel (a = {a}, b = {b})")]
    BadAxes { a: f64, b: f64 },
    #[error("ellipse {index} centered at ({cx}, {cy}) extends outside the {width}x{height} image")]
    OutOfBounds { index: usize, cx: f64, cy: f64, width: usize, height: usize },
    #[error("ellipse has a non-finite field")]
    NonFinite,
    #[error("detection map is {0}x{1} but ground truth is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("design list is empty")]
    EmptyDesign,
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// A ship outline: center in pixel coordinates, full major and minor axes,
/// and the major-axis direction in degrees from +x toward +y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta_deg: f64,
}

impl Ellipse {
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta_deg: f64) -> Result<Self, MetricsError> {
        if ![cx, cy, a, b, theta_deg].iter().all(|v| v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        let e = Self { cx, cy, a, b, theta_deg };
        if !(a >= b && b > 0.0) || e.area_pixels() < 1 {
            return Err(MetricsError::BadAxes { a, b });
        }
        Ok(e)
    }

    /// `N_s = round(pi a b / 4)`.
    pub fn area_pixels(&self) -> u64 {
        (PI * self.a * self.b / 4.0).round() as u64
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta_deg.to_radians().sin_cos();
        let (ra, rb) = (0.5 * self.a, 0.5 * self.b);
        (((ra * c).powi(2) + (rb * s).powi(2)).sqrt(), ((ra * s).powi(2) + (rb * c).powi(2)).sqrt())
    }

    /// Whether the pixel center `(x, y)` lies strictly inside.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / (0.5 * self.a);
        let v = (-dx * s + dy * c) / (0.5 * self.b);
        u * u + v * v < 1.0
    }

    /// Row-major indices of the pixels whose centers are inside.
    pub fn pixels(&self, width: usize, height: usize) -> Vec<usize> {
        let (ex, ey) = self.half_extents();
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0) as usize;
        let (x0, x1) = (clamp((self.cx - ex).floor(), width), clamp((self.cx + ex).ceil(), width));
        let (y0, y1) = (clamp((self.cy - ey).floor(), height), clamp((self.cy + ey).ceil(), height));
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(x as f64, y as f64) {
                    out.push(y * width + x);
                }
            }
        }
        out
    }

    /// Whether two ellipses share any point, tested on a fine sampling of
    /// both outlines and interiors.
    pub fn overlaps(&self, other: &Ellipse) -> bool {
        self.samples_inside(other) || other.samples_inside(self)
    }

    fn samples_inside(&self, other: &Ellipse) -> bool {
        let (s, c) = self.theta_deg.to_radians().sin_cos();
        let steps = 720;
        for i in 0..steps {
            let phi = 2.0 * PI * i as f64 / steps as f64;
            for r in [1.0, 0.75, 0.5, 0.25, 0.0] {
                let (u, v) = (0.5 * self.a * r * phi.cos(), 0.5 * self.b * r * phi.sin());
                let (x, y) = (self.cx + u * c - v * s, self.cy + u * s + v * c);
                if other.contains(x, y) {
                    return true;
                }
            }
        }
        false
    }
}

/// Image size and ship outlines.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub ships: Vec<Ellipse>,
}

impl GroundTruth {
    /// Validates that every ellipse lies within the pixel extent
    /// `[-0.5, W - 0.5] x [-0.5, H - 0.5]`.
    pub fn new(width: usize, height: usize, ships: Vec<Ellipse>) -> Result<Self, MetricsError> {
        for (index, e) in ships.iter().enumerate() {
            let (ex, ey) = e.half_extents();
            let inside = e.cx - ex >= -0.5
                && e.cy - ey >= -0.5
                && e.cx + ex <= width as f64 - 0.5
                && e.cy + ey <= height as f64 - 0.5;
            if !inside {
                return Err(MetricsError::OutOfBounds { index, cx: e.cx, cy: e.cy, width, height });
            }
        }
        Ok(Self { width, height, ships })
    }

    /// Parses `ellipse <cx> <cy> <a> <b> <theta_deg>` lines; blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str, width: usize, height: usize) -> Result<Self, MetricsError> {
        let mut ships = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| MetricsError::Parse { line: i + 1, message };
            let mut fields = line.split_whitespace();
            if fields.next() != Some("ellipse") {
                return Err(err(format!("expected `ellipse cx cy a b theta_deg`, got {line:?}")));
            }
            let vals: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number {f:?}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != 5 {
                return Err(err(format!("expected 5 numbers, got {}", vals.len())));
            }
            let e = Ellipse::new(vals[0], vals[1], vals[2], vals[3], vals[4]).map_err(|e| err(e.to_string()))?;
            ships.push(e);
        }
        Self::new(width, height, ships)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# ellipse cx cy a b theta_deg\n");
        for e in &self.ships {
            s.push_str(&format!("ellipse {} {} {} {} {}\n", e.cx, e.cy, e.a, e.b, e.theta_deg));
        }
        s
    }

    /// `sum N_s(i)`.
    pub fn ship_area(&self) -> u64 {
        self.ships.iter().map(Ellipse::area_pixels).sum()
    }
}

/// Pixel indices inside each ship, in ship order.
pub fn ellipse_mask(truth: &GroundTruth) -> Vec<Vec<usize>> {
    truth.ships.iter().map(|e| e.pixels(truth.width, truth.height)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShipScore {
    pub n_d: u64,
    pub n_s: u64,
    pub p_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub n_fa: u64,
    pub n_c: u64,
    pub p_fa: f64,
    pub ships: Vec<ShipScore>,
    /// Detected pixels inside any ship.
    pub n_detected_in_ships: u64,
    /// `sum min(N_d, N_s) / sum N_s`; `None` without ships.
    pub aggregate_p_d: Option<f64>,
}

/// Scores a detection map against ground truth.
pub fn evaluate(map: &DetectionMap, truth: &GroundTruth) -> Result<EvalResult, MetricsError> {
    Evaluator::new(truth).evaluate(map)
}

/// Reusable scorer with precomputed ship masks.
#[derive(Debug, Clone)]
pub struct Evaluator {
    width: usize,
    height: usize,
    masks: Vec<Vec<usize>>,
    in_ship: Vec<bool>,
    areas: Vec<u64>,
}

impl Evaluator {
    pub fn new(truth: &GroundTruth) -> Self {
        let masks = ellipse_mask(truth);
        let mut in_ship = vec![false; truth.width * truth.height];
        for &i in masks.iter().flatten() {
            in_ship[i] = true;
        }
        let areas = truth.ships.iter().map(Ellipse::area_pixels).collect();
        Self { width: truth.width, height: truth.height, masks, in_ship, areas }
    }

    pub fn masks(&self) -> &[Vec<usize>] {
        &self.masks
    }

    pub fn evaluate(&self, map: &DetectionMap) -> Result<EvalResult, MetricsError> {
        if (map.width(), map.height()) != (self.width, self.height) {
            return Err(MetricsError::DimensionMismatch(map.width(), map.height(), self.width, self.height));
        }
        let states = map.states();
        let (mut n_fa, mut unevaluated, mut inside) = (0u64, 0u64, 0u64);
        for (&s, &ship) in states.iter().zip(&self.in_ship) {
            match (s, ship) {
                (PixelState::Detected, false) => n_fa += 1,
                (PixelState::Detected, true) => inside += 1,
                (PixelState::NotEvaluated, false) => unevaluated += 1,
                _ => {}
            }
        }
        let total = (self.width * self.height) as i64;
        let area: u64 = self.areas.iter().sum();
        let n_c = (total - area as i64 - unevaluated as i64).max(0) as u64;
        let p_fa = if n_c == 0 { if n_fa > 0 { 1.0 } else { 0.0 } } else { (n_fa as f64 / n_c as f64).min(1.0) };
        let ships: Vec<ShipScore> = self
            .masks
            .iter()
            .zip(&self.areas)
            .map(|(mask, &n_s)| {
                let n_d = mask.iter().filter(|&&i| states[i] == PixelState::Detected).count() as u64;
                ShipScore { n_d, n_s, p_d: (n_d as f64 / n_s as f64).min(1.0) }
            })
            .collect();
        let aggregate_p_d =
            (area > 0).then(|| ships.iter().map(|s| s.n_d.min(s.n_s)).sum::<u64>() as f64 / area as f64);
        Ok(EvalResult { n_fa, n_c, p_fa, ships, n_detected_in_ships: inside, aggregate_p_d })
    }
}

/// Window statistics measured once, re-thresholded at any design rate.
/// Windows whose estimator fails recoverably hold `None` and never fire.
#[derive(Debug, Clone)]
pub struct MeasuredScene {
    pub detector: Detector,
    pub grid: WindowGrid<Option<WindowStat>>,
}

impl MeasuredScene {
    pub fn measure(raster: &Raster, geometry: &WindowGeometry, detector: Detector) -> Result<Self, MetricsError> {
        let grid = map_windows(raster, geometry, |test, reference| match detector.measure(test, reference) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.is_recoverable() => Ok(None),
            Err(e) => Err(e),
        })?;
        Ok(Self { detector, grid })
    }

    /// Windows whose estimator failed.
    pub fn skipped(&self) -> usize {
        self.grid.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn map_at(&self, design_pfa: f64) -> Result<DetectionMap, MetricsError> {
        let d = self.detector.with_design_pfa(design_pfa)?;
        Ok(self.grid.paint(|s| s.as_ref().is_some_and(|s| d.fires(s))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocRow {
    pub design_pfa: f64,
    /// Exact rate for the Wilcoxon threshold, the design rate otherwise.
    pub achieved_pfa: f64,
    pub eval: EvalResult,
}

/// Evaluates the scene at every design rate; rows come back sorted by
/// design rate.
pub fn roc_sweep(
    scene: &MeasuredScene,
    truth: &GroundTruth,
    design_pfas: &[f64],
) -> Result<Vec<RocRow>, MetricsError> {
    if design_pfas.is_empty() {
        return Err(MetricsError::EmptyDesign);
    }
    let mut designs = design_pfas.to_vec();
    designs.sort_by(f64::total_cmp);
    let evaluator = Evaluator::new(truth);
    designs
        .par_iter()
        .map(|&p| {
            let eval = evaluator.evaluate(&scene.map_at(p)?)?;
            let achieved_pfa = scene.detector.with_design_pfa(p)?.achieved_pfa();
            Ok(RocRow { design_pfa: p, achieved_pfa, eval })
        })
        .collect()
}

/// Design rate whose measured false-alarm rate is closest to `target` in
/// log ratio, found by bisection on `log10(design)` over `[1e-300, 0.5]`.
/// Measured rate is monotone in the design rate, but piecewise constant,
/// so the best bracketing point is returned. The floor is far below any
/// useful design rate because a parametric rule on clutter heavier than
/// its model may need one to bring the measured rate down.
pub fn calibrate(scene: &MeasuredScene, truth: &GroundTruth, target: f64) -> Result<RocRow, MetricsError> {
    let evaluator = Evaluator::new(truth);
    let eval_at = |log_p: f64| -> Result<RocRow, MetricsError> {
        let p = 10f64.powf(log_p);
        let eval = evaluator.evaluate(&scene.map_at(p)?)?;
        Ok(RocRow { design_pfa: p, achieved_pfa: scene.detector.with_design_pfa(p)?.achieved_pfa(), eval })
    };
    let score = |r: &RocRow| {
        if r.eval.p_fa > 0.0 {
            (r.eval.p_fa / target).ln().abs()
        } else {
            f64::INFINITY
        }
    };
    let (mut lo, mut hi) = (-300.0f64, 0.5f64.log10());
    let mut best = eval_at(hi)?;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let row = eval_at(mid)?;
        if row.eval.p_fa < target {
            lo = mid;
        } else {
            hi = mid;
        }
        let better = score(&row) < score(&best)
            || (score(&row) == score(&best) && row.design_pfa < best.design_pfa);
        if better {
            best = row;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    Ok(best)
}

/// `design_pfa,measured_pfa,n_fa,n_c,ship_id,n_d,n_s,p_d`, one line per
/// ship per row, or one line with empty ship fields when there are none.
pub fn write_eval_csv<W: Write>(mut w: W, rows: &[(Option<f64>, &EvalResult)]) -> io::Result<()> {
    writeln!(w, "design_pfa,measured_pfa,n_fa,n_c,ship_id,n_d,n_s,p_d")?;
    for (design, e) in rows {
        let d = design.map(|p| p.to_string()).unwrap_or_default();
        if e.ships.is_empty() {
            writeln!(w, "{d},{},{},{},,,,", e.p_fa, e.n_fa, e.n_c)?;
        }
        for (i, s) in e.ships.iter().enumerate() {
            writeln!(w, "{d},{},{},{},{i},{},{},{}", e.p_fa, e.n_fa, e.n_c, s.n_d, s.n_s, s.p_d)?;
        }
    }
    Ok(())
}
