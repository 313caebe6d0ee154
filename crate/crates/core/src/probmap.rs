//! Per-cell category probability grids and their binary file format.
//!
//! File layout, all little-endian:
//!
//! ```text
//! "PGRD"  version:u16  grid_w:u32  grid_h:u32  cell_stride:u32  num_classes:u16
//! grid_w * grid_h * num_classes f32 values, row-major cell order
//! ```
//!
//! A JSON sidecar (`<file>.json`) repeats the header fields.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{cell_span, cells_along, Window};

pub const MAGIC: &[u8; 4] = b"PGRD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
/// In-memory maps must be stochastic to this tolerance.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-6;
/// Imported rows may deviate this much from unit sum before rejection.
pub const IMPORT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ProbabilityError {
    #[error("malformed probability grid: {0}")]
    MalformedHeader(String),
    #[error("grid {grid_w}x{grid_h} at stride {stride} does not tile a {width}x{height} raster")]
    DimensionMismatch {
        grid_w: usize,
        grid_h: usize,
        stride: usize,
        width: usize,
        height: usize,
    },
    #[error("cell {cell} is not a probability vector (sum {sum})")]
    NonStochasticRow { cell: usize, sum: f64 },
    #[error("invalid probability map: {0}")]
    InvalidShape(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = ProbabilityError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    grid_w: usize,
    grid_h: usize,
    cell_stride: usize,
    num_classes: usize,
    probs: Vec<f32>,
}

/// Header fields, also the JSON sidecar schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridHeader {
    pub magic: String,
    pub version: u16,
    pub grid_w: u32,
    pub grid_h: u32,
    pub cell_stride: u32,
    pub num_classes: u16,
}

fn check_rows(probs: &[f32], num_classes: usize, tol: f64) -> Result<()> {
    for (cell, row) in probs.chunks_exact(num_classes).enumerate() {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        let valid = row.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !valid || !((sum - 1.0).abs() <= tol) {
            return Err(ProbabilityError::NonStochasticRow { cell, sum });
        }
    }
    Ok(())
}

impl ProbabilityMap {
    pub fn new(
        grid_w: usize,
        grid_h: usize,
        cell_stride: usize,
        num_classes: usize,
        probs: Vec<f32>,
    ) -> Result<Self> {
        let pm = Self::unchecked(grid_w, grid_h, cell_stride, num_classes, probs)?;
        check_rows(&pm.probs, num_classes, STOCHASTIC_TOLERANCE)?;
        Ok(pm)
    }

    /// Shape checks only; rows are validated by the caller.
    fn unchecked(
        grid_w: usize,
        grid_h: usize,
        cell_stride: usize,
        num_classes: usize,
        probs: Vec<f32>,
    ) -> Result<Self> {
        if grid_w == 0 || grid_h == 0 || cell_stride == 0 || num_classes == 0 {
            return Err(ProbabilityError::InvalidShape(format!(
                "grid {grid_w}x{grid_h}, stride {cell_stride}, {num_classes} classes"
            )));
        }
        if probs.len() != grid_w * grid_h * num_classes {
            return Err(ProbabilityError::InvalidShape(format!(
                "{} values for {grid_w}x{grid_h}x{num_classes}",
                probs.len()
            )));
        }
        Ok(ProbabilityMap {
            grid_w,
            grid_h,
            cell_stride,
            num_classes,
            probs,
        })
    }

    /// Builds a map from f64 rows, renormalizing each to unit sum.
    pub fn from_rows(
        grid_w: usize,
        grid_h: usize,
        cell_stride: usize,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let num_classes = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(rows.len() * num_classes);
        for (cell, r) in rows.iter().enumerate() {
            let sum: f64 = r.iter().sum();
            if r.len() != num_classes || !(sum > 0.0) {
                return Err(ProbabilityError::NonStochasticRow { cell, sum });
            }
            probs.extend(r.iter().map(|v| (v / sum) as f32));
        }
        Self::new(grid_w, grid_h, cell_stride, num_classes, probs)
    }

    /// One-hot map at stride 1 from a label mask with labels in `1..=C`.
    pub fn one_hot(mask: &crate::raster::LabelMask) -> Result<Self> {
        let c = mask.num_classes() as usize;
        let mut probs = vec![0f32; mask.labels().len() * c];
        for (i, &l) in mask.labels().iter().enumerate() {
            if l == 0 {
                return Err(ProbabilityError::InvalidShape(format!(
                    "pixel {i} is unknown"
                )));
            }
            probs[i * c + l as usize - 1] = 1.0;
        }
        Self::new(mask.width(), mask.height(), 1, c, probs)
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn cell_stride(&self) -> usize {
        self.cell_stride
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    #[inline]
    pub fn cell(&self, index: usize) -> &[f32] {
        &self.probs[index * self.num_classes..(index + 1) * self.num_classes]
    }

    #[inline]
    pub fn cell_at(&self, col: usize, row: usize) -> &[f32] {
        self.cell(row * self.grid_w + col)
    }

    /// Category (1-based) with the largest probability; ties go to the lower id.
    pub fn argmax(&self, index: usize) -> u8 {
        argmax(self.cell(index))
    }

    /// Whether the grid tiles a `width x height` raster exactly.
    pub fn covers(&self, width: usize, height: usize) -> bool {
        cells_along(width, self.cell_stride) == self.grid_w
            && cells_along(height, self.cell_stride) == self.grid_h
    }

    pub fn check_extent(&self, width: usize, height: usize) -> Result<()> {
        if self.covers(width, height) {
            Ok(())
        } else {
            Err(ProbabilityError::DimensionMismatch {
                grid_w: self.grid_w,
                grid_h: self.grid_h,
                stride: self.cell_stride,
                width,
                height,
            })
        }
    }

    /// Pixels owned by cell `(col, row)` in a `width x height` raster.
    pub fn cell_window(&self, col: usize, row: usize, width: usize, height: usize) -> Window {
        let (x0, x1) = cell_span(col, self.cell_stride, width);
        let (y0, y1) = cell_span(row, self.cell_stride, height);
        Window {
            x: x0,
            y: y0,
            size: self.cell_stride,
            width: x1 - x0,
            height: y1 - y0,
            undersized: false,
        }
    }

    /// Multiplies every value by `factor` without renormalizing. Used to
    /// check argmax invariance; the result skips the stochastic check.
    pub fn scaled(&self, factor: f32) -> Self {
        ProbabilityMap {
            probs: self.probs.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            magic: String::from_utf8_lossy(MAGIC).into_owned(),
            version: VERSION,
            grid_w: self.grid_w as u32,
            grid_h: self.grid_h as u32,
            cell_stride: self.cell_stride as u32,
            num_classes: self.num_classes as u16,
        }
    }
}

#[inline]
pub fn argmax(v: &[f32]) -> u8 {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best as u8 + 1
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(pm: &ProbabilityMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + pm.probs.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.write_u16::<LittleEndian>(VERSION).unwrap();
    buf.write_u32::<LittleEndian>(pm.grid_w as u32).unwrap();
    buf.write_u32::<LittleEndian>(pm.grid_h as u32).unwrap();
    buf.write_u32::<LittleEndian>(pm.cell_stride as u32)
        .unwrap();
    buf.write_u16::<LittleEndian>(pm.num_classes as u16)
        .unwrap();
    for &v in &pm.probs {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<ProbabilityMap> {
    let bad = |m: String| ProbabilityError::MalformedHeader(m);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "{} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = LittleEndian::read_u16(&bytes[4..6]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let grid_w = LittleEndian::read_u32(&bytes[6..10]) as usize;
    let grid_h = LittleEndian::read_u32(&bytes[10..14]) as usize;
    let stride = LittleEndian::read_u32(&bytes[14..18]) as usize;
    let classes = LittleEndian::read_u16(&bytes[18..20]) as usize;
    if grid_w == 0 || grid_h == 0 || stride == 0 || classes == 0 {
        return Err(bad(format!(
            "zero field in header ({grid_w}x{grid_h}, stride {stride}, {classes} classes)"
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = grid_w
        .checked_mul(grid_h)
        .and_then(|n| n.checked_mul(classes))
        .and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(bad(format!(
            "header advertises {grid_w}x{grid_h}x{classes} values, payload has {} bytes",
            payload.len()
        )));
    }
    let mut probs = vec![0f32; payload.len() / 4];
    LittleEndian::read_f32_into(payload, &mut probs);
    check_rows(&probs, classes, IMPORT_TOLERANCE)?;
    ProbabilityMap::unchecked(grid_w, grid_h, stride, classes, probs)
}

/// Writes the binary grid and its JSON sidecar.
pub fn export_probabilities(pm: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| ProbabilityError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&encode(pm)).map_err(io)?;
    w.flush().map_err(io)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&pm.header()).expect("header serializes");
    fs::write(&side, json).map_err(|source| ProbabilityError::Io { path: side, source })
}

/// Reads a binary grid, optionally checking that it tiles `extent`.
pub fn import_probabilities(
    path: impl AsRef<Path>,
    extent: Option<(usize, usize)>,
) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ProbabilityError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let pm = decode(&bytes)?;
    if let Some((w, h)) = extent {
        pm.check_extent(w, h)?;
    }
    Ok(pm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> ProbabilityMap {
        ProbabilityMap::new(2, 1, 8, 2, vec![0.25, 0.75, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn argmax_prefers_lower_id() {
        assert_eq!(argmax(&[0.5, 0.5, 0.0, 0.0, 0.0]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 3);
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample_map());
        assert_eq!(&b[..4], b"PGRD");
        assert_eq!(b.len(), HEADER_LEN + 16);
        assert_eq!(LittleEndian::read_u32(&b[6..10]), 2);
        assert_eq!(LittleEndian::read_u16(&b[18..20]), 2);
        assert_eq!(decode(&b).unwrap(), sample_map());
    }

    #[test]
    fn rejects_short_rows() {
        // header claims 5 classes, payload carries rows of 4
        let pm = ProbabilityMap::new(1, 1, 4, 4, vec![0.25; 4]).unwrap();
        let mut b = encode(&pm);
        b[18] = 5;
        assert!(matches!(
            decode(&b),
            Err(ProbabilityError::MalformedHeader(_))
        ));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = encode(&sample_map());
        assert!(matches!(
            decode(&b[..10]),
            Err(ProbabilityError::MalformedHeader(_))
        ));
        b[0] = b'X';
        assert!(matches!(
            decode(&b),
            Err(ProbabilityError::MalformedHeader(_))
        ));
    }

    #[test]
    fn rejects_half_mass() {
        let mut b = encode(&sample_map());
        LittleEndian::write_f32(&mut b[HEADER_LEN..], 0.0);
        LittleEndian::write_f32(&mut b[HEADER_LEN + 4..], 0.5);
        assert!(matches!(
            decode(&b),
            Err(ProbabilityError::NonStochasticRow { cell: 0, .. })
        ));
    }

    #[test]
    fn import_tolerates_small_drift() {
        let mut b = encode(&sample_map());
        LittleEndian::write_f32(&mut b[HEADER_LEN + 4..], 0.7505);
        assert!(decode(&b).is_ok());
    }

    #[test]
    fn extent_check() {
        let pm = sample_map();
        assert!(pm.covers(16, 8));
        assert!(pm.covers(9, 1));
        assert!(!pm.covers(17, 8));
        assert!(matches!(
            pm.check_extent(24, 8),
            Err(ProbabilityError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cell_windows_follow_ownership() {
        let pm = sample_map();
        let w = pm.cell_window(1, 0, 13, 5);
        assert_eq!((w.x, w.y, w.width, w.height), (8, 0, 5, 5));
    }
}
