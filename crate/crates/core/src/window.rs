//! Sliding-window geometry, sample extraction and detection-map assembly.
//!
//! A window is an `l x l` square, `l = t + 2g + 2q`. The central `t x t`
//! block holds the test cells, a `g`-wide guard band surrounds it, and the
//! outer `q`-deep ring holds the reference cells:
//!
//! ```text
//! +-----------------+
//! | reference (q)   |
//! |  +-----------+  |
//! |  | guard (g) |  |
//! |  |  +-----+  |  |
//! |  |  |  t  |  |  |
//! |  |  +-----+  |  |
//! |  +-----------+  |
//! +-----------------+
//! ```

use std::error::Error as StdError;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("invalid window geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("raster has {got} samples, expected {width}x{height}")]
    SizeMismatch { width: usize, height: usize, got: usize },
    #[error("sample at ({x}, {y}) is {value}; samples must be finite and nonnegative")]
    InvalidSample { x: usize, y: usize, value: f64 },
    #[error("raster {width}x{height} cannot hold a {side}x{side} window")]
    RasterTooSmall { width: usize, height: usize, side: usize },
    #[error("window anchored at ({x}, {y}) overruns the raster")]
    OutOfBounds { x: usize, y: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("window anchored at ({x}, {y}): {source}")]
    Rule {
        x: usize,
        y: usize,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

/// Test size `t`, guard width `g`, reference depth `q` and stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowGeometry {
    pub t: usize,
    pub g: usize,
    pub q: usize,
    pub s: usize,
}

impl WindowGeometry {
    pub fn new(t: usize, g: usize, q: usize, s: usize) -> Result<Self, WindowError> {
        if t == 0 {
            return Err(WindowError::InvalidGeometry("test size t must be at least 1"));
        }
        if q == 0 {
            return Err(WindowError::InvalidGeometry("reference depth q must be at least 1"));
        }
        if s == 0 {
            return Err(WindowError::InvalidGeometry("stride s must be at least 1"));
        }
        Ok(Self { t, g, q, s })
    }

    /// Window side `l = t + 2g + 2q`.
    pub fn side(&self) -> usize {
        self.t + 2 * self.g + 2 * self.q
    }

    /// Test cell count `m = t^2`.
    pub fn test_count(&self) -> usize {
        self.t * self.t
    }

    /// Reference cell count `n = l^2 - (l - 2q)^2`.
    pub fn reference_count(&self) -> usize {
        let l = self.side();
        let inner = l - 2 * self.q;
        l * l - inner * inner
    }

    /// Offset from a window's top-left corner to its test block.
    pub fn margin(&self) -> usize {
        self.g + self.q
    }
}

/// `(l, m, n)` for a test size, guard width and reference depth.
pub fn derive_geometry(t: usize, g: usize, q: usize) -> (usize, usize, usize) {
    let w = WindowGeometry { t, g, q, s: 1 };
    (w.side(), w.test_count(), w.reference_count())
}

/// Row-major grid of finite, nonnegative amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, WindowError> {
        if data.len() != width * height {
            return Err(WindowError::SizeMismatch { width, height, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(WindowError::InvalidSample { x: i % width, y: i / width, value: data[i] });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, WindowError> {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Applies `f` to every sample; the result is validated again.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, WindowError> {
        Self::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Top-left pixel of a window's test block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Anchor {
    pub x: usize,
    pub y: usize,
}

fn check_fits(raster: &Raster, geometry: &WindowGeometry, anchor: Anchor) -> Result<(), WindowError> {
    let (a, t) = (geometry.margin(), geometry.t);
    if anchor.x < a || anchor.y < a || anchor.x + t + a > raster.width || anchor.y + t + a > raster.height {
        return Err(WindowError::OutOfBounds { x: anchor.x, y: anchor.y });
    }
    Ok(())
}

/// Test block and reference ring of the window at `anchor`, both in
/// row-major order. Guard cells are skipped.
pub fn extract(
    raster: &Raster,
    geometry: &WindowGeometry,
    anchor: Anchor,
) -> Result<(Vec<f64>, Vec<f64>), WindowError> {
    let mut test = Vec::with_capacity(geometry.test_count());
    let mut reference = Vec::with_capacity(geometry.reference_count());
    check_fits(raster, geometry, anchor)?;
    extract_into(raster, geometry, anchor, &mut test, &mut reference);
    Ok((test, reference))
}

/// Unchecked [`extract`] into reusable buffers.
fn extract_into(raster: &Raster, geometry: &WindowGeometry, anchor: Anchor, test: &mut Vec<f64>, reference: &mut Vec<f64>) {
    let (t, q, l) = (geometry.t, geometry.q, geometry.side());
    let x0 = anchor.x - geometry.margin();
    let y0 = anchor.y - geometry.margin();
    test.clear();
    reference.clear();
    for dy in 0..l {
        let row = &raster.row(y0 + dy)[x0..x0 + l];
        if dy < q || dy >= l - q {
            reference.extend_from_slice(row);
        } else {
            reference.extend_from_slice(&row[..q]);
            reference.extend_from_slice(&row[l - q..]);
        }
    }
    for dy in 0..t {
        test.extend_from_slice(&raster.row(anchor.y + dy)[anchor.x..anchor.x + t]);
    }
}

/// Per-pixel outcome. The ordering is the OR-merge order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[repr(u8)]
pub enum PixelState {
    #[default]
    NotEvaluated = 0,
    Clear = 1,
    Detected = 2,
}

/// Detection outcome per raster pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionMap {
    width: usize,
    height: usize,
    states: Vec<PixelState>,
}

impl DetectionMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, states: vec![PixelState::NotEvaluated; width * height] }
    }

    pub fn from_states(width: usize, height: usize, states: Vec<PixelState>) -> Result<Self, WindowError> {
        if states.len() != width * height {
            return Err(WindowError::SizeMismatch { width, height, got: states.len() });
        }
        Ok(Self { width, height, states })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn states(&self) -> &[PixelState] {
        &self.states
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> PixelState {
        self.states[y * self.width + x]
    }

    /// Raises the state at `(x, y)` to at least `state`.
    #[inline]
    pub fn mark(&mut self, x: usize, y: usize, state: PixelState) {
        let s = &mut self.states[y * self.width + x];
        *s = (*s).max(state);
    }

    /// Pixel-wise OR-merge with another map of the same size.
    pub fn merge(&mut self, other: &DetectionMap) -> Result<(), WindowError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(WindowError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        for (a, &b) in self.states.iter_mut().zip(&other.states) {
            *a = (*a).max(b);
        }
        Ok(())
    }

    pub fn count(&self, state: PixelState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    /// `(x, y)` of every detected pixel in row-major order.
    pub fn detections(&self) -> Vec<(usize, usize)> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == PixelState::Detected)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }
}

/// Values computed at every anchor of the stride lattice, row-major.
#[derive(Debug, Clone)]
pub struct WindowGrid<T> {
    pub geometry: WindowGeometry,
    pub width: usize,
    pub height: usize,
    /// Anchors per lattice row and number of lattice rows.
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<T>,
}

impl<T> WindowGrid<T> {
    pub fn anchor(&self, index: usize) -> Anchor {
        let a = self.geometry.margin();
        Anchor { x: a + (index % self.nx) * self.geometry.s, y: a + (index / self.nx) * self.geometry.s }
    }

    /// Paints a detection map: every window marks its test block detected
    /// where `fires` holds and clear otherwise, OR-merged across overlaps.
    pub fn paint(&self, fires: impl Fn(&T) -> bool) -> DetectionMap {
        let mut map = DetectionMap::new(self.width, self.height);
        let t = self.geometry.t;
        for (i, v) in self.values.iter().enumerate() {
            let state = if fires(v) { PixelState::Detected } else { PixelState::Clear };
            let a = self.anchor(i);
            for y in a.y..a.y + t {
                for x in a.x..a.x + t {
                    map.mark(x, y, state);
                }
            }
        }
        map
    }
}

/// Lattice size `(nx, ny)` of valid anchors.
pub fn anchor_lattice(width: usize, height: usize, geometry: &WindowGeometry) -> (usize, usize) {
    let l = geometry.side();
    let count = |len: usize| if len >= l { (len - l) / geometry.s + 1 } else { 0 };
    (count(width), count(height))
}

/// Evaluates `f(test, reference)` at every anchor of the stride lattice.
///
/// Lattice rows run in parallel; the first failing window in row-major
/// order is reported, so errors are deterministic too.
pub fn map_windows<T, E, F>(raster: &Raster, geometry: &WindowGeometry, f: F) -> Result<WindowGrid<T>, WindowError>
where
    T: Send,
    E: StdError + Send + Sync + 'static,
    F: Fn(&[f64], &[f64]) -> Result<T, E> + Sync,
{
    let (nx, ny) = anchor_lattice(raster.width, raster.height, geometry);
    if nx == 0 || ny == 0 {
        return Err(WindowError::RasterTooSmall { width: raster.width, height: raster.height, side: geometry.side() });
    }
    let a = geometry.margin();
    let rows: Vec<Result<Vec<T>, WindowError>> = (0..ny)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(geometry.test_count()), Vec::with_capacity(geometry.reference_count())),
            |(test, reference), j| {
                let y = a + j * geometry.s;
                (0..nx)
                    .map(|i| {
                        let anchor = Anchor { x: a + i * geometry.s, y };
                        extract_into(raster, geometry, anchor, test, reference);
                        f(test, reference).map_err(|e| WindowError::Rule { x: anchor.x, y, source: Box::new(e) })
                    })
                    .collect()
            },
        )
        .collect();
    let mut values = Vec::with_capacity(nx * ny);
    for row in rows {
        values.extend(row?);
    }
    Ok(WindowGrid { geometry: *geometry, width: raster.width, height: raster.height, nx, ny, values })
}

/// Runs a decision rule over the raster and assembles the detection map.
pub fn run_detector<E, F>(raster: &Raster, geometry: &WindowGeometry, decide: F) -> Result<DetectionMap, WindowError>
where
    E: StdError + Send + Sync + 'static,
    F: Fn(&[f64], &[f64]) -> Result<bool, E> + Sync,
{
    Ok(map_windows(raster, geometry, decide)?.paint(|&d| d))
}

/// Window counts from [`run_detector_lenient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub windows: usize,
    pub fired: usize,
    /// Windows whose rule error was absorbed and marked clear.
    pub skipped: usize,
}

/// [`run_detector`] that marks a window clear instead of failing when
/// `skip` accepts its error.
pub fn run_detector_lenient<E, F, S>(
    raster: &Raster,
    geometry: &WindowGeometry,
    decide: F,
    skip: S,
) -> Result<(DetectionMap, RunStats), WindowError>
where
    E: StdError + Send + Sync + 'static,
    F: Fn(&[f64], &[f64]) -> Result<bool, E> + Sync,
    S: Fn(&E) -> bool + Sync,
{
    let grid = map_windows(raster, geometry, |test, reference| match decide(test, reference) {
        Ok(d) => Ok(Some(d)),
        Err(e) if skip(&e) => Ok(None),
        Err(e) => Err(e),
    })?;
    let stats = RunStats {
        windows: grid.values.len(),
        fired: grid.values.iter().filter(|v| **v == Some(true)).count(),
        skipped: grid.values.iter().filter(|v| v.is_none()).count(),
    };
    Ok((grid.paint(|v| *v == Some(true)), stats))
}
