//! Raster, mask and detection file formats.
//!
//! Binary PGM (`P5`) is read with its maxval deciding the sample width: one
//! byte up to 255, two big-endian bytes above. Sample values are taken as
//! amplitudes without rescaling. `raw_f32` is a headerless little-endian
//! payload next to a `<path>.hdr` text sidecar.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rankcfar::window::{DetectionMap, PixelState, Raster};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterFormat {
    Pgm8,
    Pgm16,
    RawF32,
}

impl FromStr for RasterFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pgm8" => Ok(Self::Pgm8),
            "pgm16" => Ok(Self::Pgm16),
            "raw_f32" | "raw" => Ok(Self::RawF32),
            _ => Err(format!("unknown raster format {s:?} (expected pgm8, pgm16 or raw_f32)")),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Reads a PGM or a raw_f32 raster, chosen by the `P5` magic.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let raster = if bytes.starts_with(b"P5") {
        parse_pgm(&bytes).map(|(_, r)| r)
    } else {
        let hdr = sidecar_path(path);
        let text = fs::read_to_string(&hdr)
            .with_context(|| format!("{} is not a PGM and its sidecar {} is unreadable", path.display(), hdr.display()))?;
        parse_raw_f32(&text, &bytes)
    };
    raster.with_context(|| format!("parsing {}", path.display()))
}

fn pgm_header(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    let mut fields = [0usize; 3];
    let mut pos = 2;
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => bail!("truncated PGM header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            bail!("malformed PGM header at byte {start}");
        }
        *field = std::str::from_utf8(&bytes[start..pos])?.parse()?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        bail!("PGM header must end in a single whitespace byte");
    }
    Ok((fields, pos + 1))
}

/// Parses a binary PGM, returning the format implied by its maxval.
pub fn parse_pgm(bytes: &[u8]) -> Result<(RasterFormat, Raster)> {
    let ([width, height, maxval], offset) = pgm_header(bytes)?;
    if !(1..=65535).contains(&maxval) {
        bail!("PGM maxval {maxval} outside 1..=65535");
    }
    let wide = maxval > 255;
    let count = width * height;
    let need = count * if wide { 2 } else { 1 };
    let payload = &bytes[offset..];
    if payload.len() != need {
        bail!("PGM payload has {} bytes, {width}x{height} needs {need}", payload.len());
    }
    let data: Vec<f64> = if wide {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
    } else {
        payload.iter().map(|&v| v as f64).collect()
    };
    if let Some(v) = data.iter().find(|&&v| v > maxval as f64) {
        bail!("PGM sample {v} exceeds maxval {maxval}");
    }
    let format = if wide { RasterFormat::Pgm16 } else { RasterFormat::Pgm8 };
    Ok((format, Raster::new(width, height, data)?))
}

pub fn parse_raw_f32(header: &str, payload: &[u8]) -> Result<Raster> {
    let (mut width, mut height) = (None, None);
    for line in header.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| anyhow!("bad header line {line:?}"))?;
        let value = value.trim();
        match key {
            "width" => width = Some(value.parse::<usize>().context("width")?),
            "height" => height = Some(value.parse::<usize>().context("height")?),
            "dtype" if value == "f32" => {}
            "endian" if value == "little" => {}
            "dtype" | "endian" => bail!("unsupported {key} {value:?}"),
            _ => bail!("unknown header key {key:?}"),
        }
    }
    let (w, h) = width.zip(height).ok_or_else(|| anyhow!("header needs width and height"))?;
    if payload.len() != w * h * 4 {
        bail!("payload has {} bytes, {w}x{h} f32 needs {}", payload.len(), w * h * 4);
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Raster::new(w, h, data)?)
}

/// Writes `raster` in `format`. PGM samples are rounded to the nearest
/// integer and must fit the sample width.
pub fn write_raster(path: &Path, raster: &Raster, format: RasterFormat) -> Result<()> {
    let (w, h) = (raster.width(), raster.height());
    let mut out = Vec::new();
    match format {
        RasterFormat::Pgm8 | RasterFormat::Pgm16 => {
            let maxval: u32 = if format == RasterFormat::Pgm8 { 255 } else { 65535 };
            write!(out, "P5\n{w} {h}\n{maxval}\n")?;
            for &v in raster.data() {
                let r = v.round();
                if r > maxval as f64 {
                    bail!("sample {v} does not fit {maxval}");
                }
                if maxval == 255 {
                    out.push(r as u8);
                } else {
                    out.extend_from_slice(&(r as u16).to_be_bytes());
                }
            }
        }
        RasterFormat::RawF32 => {
            for &v in raster.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let hdr = sidecar_path(path);
            fs::write(&hdr, format!("width {w}\nheight {h}\ndtype f32\nendian little\n"))
                .with_context(|| format!("writing {}", hdr.display()))?;
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// The raster as it reads back after a round trip through `format`.
pub fn quantize(raster: &Raster, format: RasterFormat) -> Result<Raster> {
    Ok(match format {
        RasterFormat::RawF32 => raster.map(|v| v as f32 as f64)?,
        _ => raster.map(f64::round)?,
    })
}

fn state_byte(s: PixelState) -> u8 {
    match s {
        PixelState::Detected => 255,
        PixelState::NotEvaluated => 128,
        PixelState::Clear => 0,
    }
}

pub fn write_mask(path: &Path, map: &DetectionMap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.states().iter().map(|&s| state_byte(s)));
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_mask(path: &Path) -> Result<DetectionMap> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_mask(&bytes).with_context(|| format!("parsing mask {}", path.display()))
}

pub fn parse_mask(bytes: &[u8]) -> Result<DetectionMap> {
    if !bytes.starts_with(b"P5") {
        bail!("mask must be a binary PGM");
    }
    let ([width, height, maxval], offset) = pgm_header(bytes)?;
    if maxval != 255 {
        bail!("mask maxval must be 255, got {maxval}");
    }
    let payload = &bytes[offset..];
    if payload.len() != width * height {
        bail!("mask payload has {} bytes, {width}x{height} needs {}", payload.len(), width * height);
    }
    let states = payload
        .iter()
        .map(|&b| match b {
            255 => Ok(PixelState::Detected),
            128 => Ok(PixelState::NotEvaluated),
            0 => Ok(PixelState::Clear),
            _ => Err(anyhow!("mask value {b} is not 0, 128 or 255")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionMap::from_states(width, height, states)?)
}

pub fn write_detections(path: &Path, map: &DetectionMap) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "x,y")?;
    for (x, y) in map.detections() {
        writeln!(w, "{x},{y}")?;
    }
    w.flush()?;
    Ok(())
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn write_with<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
{
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm8_with_comment() {
        let mut bytes = b"P5\n# made by hand\n3 2\n# max\n255\n".to_vec();
        bytes.extend([0, 1, 2, 250, 251, 255]);
        let (f, r) = parse_pgm(&bytes).unwrap();
        assert_eq!(f, RasterFormat::Pgm8);
        assert_eq!((r.width(), r.height()), (3, 2));
        assert_eq!(r.data(), &[0.0, 1.0, 2.0, 250.0, 251.0, 255.0]);
    }

    #[test]
    fn pgm16_is_big_endian() {
        let mut bytes = b"P5 2 1 1000\n".to_vec();
        bytes.extend([0x01, 0x02, 0x03, 0xe8]);
        let (f, r) = parse_pgm(&bytes).unwrap();
        assert_eq!(f, RasterFormat::Pgm16);
        assert_eq!(r.data(), &[258.0, 1000.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x00\x00").is_err());
        assert!(parse_pgm(b"P5\n1 1\n100\n\xc8").is_err());
        assert!(parse_pgm(b"P5\n1 1\n0\n\x00").is_err());
        assert!(parse_pgm(b"P5\n1").is_err());
    }

    #[test]
    fn raw_header_checks() {
        let payload: Vec<u8> = [1.5f32, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let r = parse_raw_f32("width 2\nheight 1\ndtype f32\nendian little\n", &payload).unwrap();
        assert_eq!(r.data(), &[1.5, 2.0]);
        assert!(parse_raw_f32("width 2\nheight 1\ndtype f64\n", &payload).is_err());
        assert!(parse_raw_f32("width 2\nheight 2\n", &payload).is_err());
        assert!(parse_raw_f32("width 2\n", &payload).is_err());
    }

    #[test]
    fn mask_bytes() {
        let mut m = DetectionMap::new(3, 1);
        m.mark(0, 0, PixelState::Clear);
        m.mark(2, 0, PixelState::Detected);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_mask(&p, &m).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n3 1\n255\n\x00\x80\xff");
        assert_eq!(read_mask(&p).unwrap(), m);
        assert!(parse_mask(b"P5\n1 1\n255\n\x07").is_err());
    }

    #[test]
    fn raster_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::new(3, 2, vec![0.1, 2.0, 3.7, 400.2, 5.0, 65535.0]).unwrap();
        for f in [RasterFormat::RawF32, RasterFormat::Pgm16] {
            let p = dir.path().join(format!("r_{f:?}"));
            write_raster(&p, &r, f).unwrap();
            assert_eq!(read_raster(&p).unwrap(), quantize(&r, f).unwrap());
        }
        assert!(write_raster(&dir.path().join("x"), &r, RasterFormat::Pgm8).is_err());
    }
}
