//! Raster and label-mask types, file I/O and band preprocessing.
//!
//! Rasters are row-major and band-interleaved: sample `(x, y, b)` lives at
//! `(y * width + x) * bands + b`. The pipeline works on 8-bit rasters; 16-bit
//! inputs are carried as [`DynRaster::U16`] until [`preprocess`] requantizes
//! them.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use thiserror::Error;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::colortype::{self, ColorType as TiffColorType};
use tiff::encoder::TiffEncoder;
use tiff::tags::{PhotometricInterpretation, SampleFormat};

pub const MAX_BANDS: usize = 4;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unsupported raster format: {0}")]
    UnsupportedFormat(String),
    #[error("band index {index} out of range for a {bands}-band raster")]
    BandIndexOutOfRange { index: usize, bands: usize },
    #[error("color {color:?} at ({x}, {y}) is not in the palette")]
    UnknownColor { color: [u8; 3], x: usize, y: usize },
    #[error("label {0} has no palette entry")]
    UnmappedLabel(u8),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid palette: {0}")]
    InvalidPalette(String),
    #[error("expected 8-bit samples, found 16-bit")]
    NotEightBit,
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// Sample types a raster can hold.
pub trait Sample: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    /// Largest representable value; the nominal source range is `0..=MAX`.
    const MAX: u16;
    fn to_u16(self) -> u16;
}

impl Sample for u8 {
    const MAX: u16 = u8::MAX as u16;
    fn to_u16(self) -> u16 {
        self as u16
    }
}

impl Sample for u16 {
    const MAX: u16 = u16::MAX;
    fn to_u16(self) -> u16 {
        self
    }
}

/// Multi-band image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T = u8> {
    width: usize,
    height: usize,
    bands: usize,
    samples: Vec<T>,
}

impl<T: Sample> Raster<T> {
    pub fn new(width: usize, height: usize, bands: usize, samples: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidShape(format!(
                "{width}x{height} raster"
            )));
        }
        if bands == 0 || bands > MAX_BANDS {
            return Err(RasterError::InvalidShape(format!("{bands} bands")));
        }
        if samples.len() != width * height * bands {
            return Err(RasterError::InvalidShape(format!(
                "{} samples for {width}x{height}x{bands}",
                samples.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            bands,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, bands: usize, value: T) -> Result<Self> {
        Self::new(width, height, bands, vec![value; width * height * bands])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(width * height * bands);
        for y in 0..height {
            for x in 0..width {
                for b in 0..bands {
                    samples.push(f(x, y, b));
                }
            }
        }
        Self::new(width, height, bands, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.bands;
        &self.samples[i..i + self.bands]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, band: usize) -> T {
        self.samples[(y * self.width + x) * self.bands + band]
    }

    /// Samples of one row, band-interleaved.
    pub fn row(&self, y: usize) -> &[T] {
        let w = self.width * self.bands;
        &self.samples[y * w..(y + 1) * w]
    }
}

/// A raster as loaded from disk, before requantization.
#[derive(Debug, Clone, PartialEq)]
pub enum DynRaster {
    U8(Raster<u8>),
    U16(Raster<u16>),
}

impl DynRaster {
    pub fn width(&self) -> usize {
        match self {
            DynRaster::U8(r) => r.width(),
            DynRaster::U16(r) => r.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            DynRaster::U8(r) => r.height(),
            DynRaster::U16(r) => r.height(),
        }
    }

    pub fn bands(&self) -> usize {
        match self {
            DynRaster::U8(r) => r.bands(),
            DynRaster::U16(r) => r.bands(),
        }
    }

    pub fn bit_depth(&self) -> u8 {
        match self {
            DynRaster::U8(_) => 8,
            DynRaster::U16(_) => 16,
        }
    }

    pub fn into_u8(self) -> Result<Raster<u8>> {
        match self {
            DynRaster::U8(r) => Ok(r),
            DynRaster::U16(_) => Err(RasterError::NotEightBit),
        }
    }
}

impl From<Raster<u8>> for DynRaster {
    fn from(r: Raster<u8>) -> Self {
        DynRaster::U8(r)
    }
}

impl From<Raster<u16>> for DynRaster {
    fn from(r: Raster<u16>) -> Self {
        DynRaster::U16(r)
    }
}

/// Maps a sample from its nominal source range onto `0..=255`.
#[inline]
pub fn requantize_sample<T: Sample>(v: T) -> u8 {
    let max = T::MAX as u32;
    // round(v * 255 / max) in integer arithmetic
    ((v.to_u16() as u32 * 255 * 2 + max) / (2 * max)) as u8
}

fn select_bands<T: Sample, U: Sample>(
    r: &Raster<T>,
    keep_bands: &[usize],
    map: impl Fn(T) -> U,
) -> Result<Raster<U>> {
    if keep_bands.is_empty() || keep_bands.len() > MAX_BANDS {
        return Err(RasterError::InvalidShape(format!(
            "{} bands selected",
            keep_bands.len()
        )));
    }
    if let Some(&index) = keep_bands.iter().find(|&&b| b >= r.bands()) {
        return Err(RasterError::BandIndexOutOfRange {
            index,
            bands: r.bands(),
        });
    }
    let mut out = Vec::with_capacity(r.pixel_count() * keep_bands.len());
    for px in r.samples().chunks_exact(r.bands()) {
        out.extend(keep_bands.iter().map(|&b| map(px[b])));
    }
    Raster::new(r.width(), r.height(), keep_bands.len(), out)
}

/// Keeps `keep_bands` in the given order and optionally requantizes every
/// band linearly from its nominal range to 8 bits.
pub fn preprocess(r: &DynRaster, keep_bands: &[usize], requantize: bool) -> Result<DynRaster> {
    Ok(match (r, requantize) {
        (DynRaster::U8(r), _) => DynRaster::U8(select_bands(r, keep_bands, |v| v)?),
        (DynRaster::U16(r), true) => DynRaster::U8(select_bands(r, keep_bands, requantize_sample)?),
        (DynRaster::U16(r), false) => DynRaster::U16(select_bands(r, keep_bands, |v| v)?),
    })
}

enum FileKind {
    Png,
    Tiff,
}

fn sniff(path: &Path) -> Result<FileKind> {
    let unreadable = |reason: String| RasterError::UnreadableFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut head = [0u8; 8];
    let mut f = File::open(path).map_err(|e| unreadable(e.to_string()))?;
    let mut n = 0;
    while n < head.len() {
        match f.read(&mut head[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) => return Err(unreadable(e.to_string())),
        }
    }
    if n < 4 {
        return Err(unreadable(format!("file too short ({n} bytes)")));
    }
    if n == 8 && head == *b"\x89PNG\r\n\x1a\n" {
        Ok(FileKind::Png)
    } else if head[..4] == *b"II*\0" || head[..4] == *b"MM\0*" {
        Ok(FileKind::Tiff)
    } else {
        Err(RasterError::UnsupportedFormat(format!(
            "{} is neither PNG nor TIFF",
            path.display()
        )))
    }
}

/// Loads a PNG or TIFF raster with 1 to 4 channels of 8- or 16-bit samples.
pub fn load_raster(path: impl AsRef<Path>) -> Result<DynRaster> {
    let path = path.as_ref();
    match sniff(path)? {
        FileKind::Png => load_png(path),
        FileKind::Tiff => load_tiff(path),
    }
}

fn load_png(path: &Path) -> Result<DynRaster> {
    use image::DynamicImage as D;
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::Unsupported(u) => RasterError::UnsupportedFormat(u.to_string()),
        other => RasterError::UnreadableFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bands = img.color().channel_count() as usize;
    match img {
        D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageRgb8(_) | D::ImageRgba8(_) => {
            Ok(Raster::new(w, h, bands, img.into_bytes())?.into())
        }
        D::ImageLuma16(b) => Ok(Raster::new(w, h, bands, b.into_raw())?.into()),
        D::ImageLumaA16(b) => Ok(Raster::new(w, h, bands, b.into_raw())?.into()),
        D::ImageRgb16(b) => Ok(Raster::new(w, h, bands, b.into_raw())?.into()),
        D::ImageRgba16(b) => Ok(Raster::new(w, h, bands, b.into_raw())?.into()),
        other => Err(RasterError::UnsupportedFormat(format!(
            "PNG color type {:?}",
            other.color()
        ))),
    }
}

fn load_tiff(path: &Path) -> Result<DynRaster> {
    use tiff::ColorType as C;
    let map_err = |e: tiff::TiffError| match e {
        tiff::TiffError::UnsupportedError(u) => RasterError::UnsupportedFormat(u.to_string()),
        other => RasterError::UnreadableFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let file = File::open(path).map_err(|e| RasterError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(map_err)?;
    let (w, h) = dec.dimensions().map_err(map_err)?;
    let (bits, bands) = match dec.colortype().map_err(map_err)? {
        C::Gray(b) => (b, 1),
        C::GrayA(b) => (b, 2),
        C::RGB(b) => (b, 3),
        C::RGBA(b) | C::CMYK(b) => (b, 4),
        C::Multiband {
            bit_depth,
            num_samples,
        } => (bit_depth, num_samples as usize),
        other => {
            return Err(RasterError::UnsupportedFormat(format!(
                "TIFF color type {other:?}"
            )))
        }
    };
    if bands == 0 || bands > MAX_BANDS {
        return Err(RasterError::UnsupportedFormat(format!(
            "{bands} channels (at most {MAX_BANDS} supported)"
        )));
    }
    if bits != 8 && bits != 16 {
        return Err(RasterError::UnsupportedFormat(format!(
            "{bits}-bit samples"
        )));
    }
    let (w, h) = (w as usize, h as usize);
    match dec.read_image().map_err(map_err)? {
        DecodingResult::U8(buf) => Ok(Raster::new(w, h, bands, buf)?.into()),
        DecodingResult::U16(buf) => Ok(Raster::new(w, h, bands, buf)?.into()),
        _ => Err(RasterError::UnsupportedFormat(
            "non-integer TIFF samples".into(),
        )),
    }
}

macro_rules! two_band_colortype {
    ($name:ident, $inner:ty, $bits:expr) => {
        struct $name;
        impl TiffColorType for $name {
            type Inner = $inner;
            const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
            const BITS_PER_SAMPLE: &'static [u16] = &[$bits, $bits];
            const SAMPLE_FORMAT: &'static [SampleFormat] =
                &[SampleFormat::Uint, SampleFormat::Uint];
            fn horizontal_predict(row: &[$inner], result: &mut Vec<$inner>) {
                result.extend_from_slice(&row[..2.min(row.len())]);
                result.extend(
                    row.iter()
                        .zip(row.iter().skip(2))
                        .map(|(p, c)| c.wrapping_sub(*p)),
                );
            }
        }
    };
}

two_band_colortype!(TwoBand8, u8, 8);
two_band_colortype!(TwoBand16, u16, 16);

/// Writes an uncompressed TIFF.
pub fn save_tiff(r: &DynRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let werr = |reason: String| RasterError::Write {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::create(path).map_err(|e| werr(e.to_string()))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| werr(e.to_string()))?;
    let (w, h) = (r.width() as u32, r.height() as u32);
    let res = match r {
        DynRaster::U8(r) => match r.bands() {
            1 => enc.write_image::<colortype::Gray8>(w, h, r.samples()),
            2 => enc.write_image::<TwoBand8>(w, h, r.samples()),
            3 => enc.write_image::<colortype::RGB8>(w, h, r.samples()),
            _ => enc.write_image::<colortype::RGBA8>(w, h, r.samples()),
        },
        DynRaster::U16(r) => match r.bands() {
            1 => enc.write_image::<colortype::Gray16>(w, h, r.samples()),
            2 => enc.write_image::<TwoBand16>(w, h, r.samples()),
            3 => enc.write_image::<colortype::RGB16>(w, h, r.samples()),
            _ => enc.write_image::<colortype::RGBA16>(w, h, r.samples()),
        },
    };
    res.map_err(|e| werr(e.to_string()))
}

/// Writes an 8-bit raster as PNG (1 to 4 channels).
pub fn save_png(r: &Raster<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match r.bands() {
        1 => image::ExtendedColorType::L8,
        2 => image::ExtendedColorType::La8,
        3 => image::ExtendedColorType::Rgb8,
        _ => image::ExtendedColorType::Rgba8,
    };
    image::save_buffer_with_format(
        path,
        r.samples(),
        r.width() as u32,
        r.height() as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| RasterError::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Per-pixel category ids; 0 is unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(RasterError::InvalidShape(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > num_classes) {
            return Err(RasterError::InvalidShape(format!(
                "label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(LabelMask {
            width,
            height,
            num_classes,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, num_classes: u8, label: u8) -> Result<Self> {
        Self::new(width, height, num_classes, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per label, indexed `0..=num_classes`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes as usize + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

pub const LAND_COVER_CLASSES: [&str; 5] = ["built-up", "farmland", "forest", "meadow", "waters"];

/// Category id to RGB color; id 0 (unknown) is always black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    colors: Vec<[u8; 3]>,
}

impl ClassPalette {
    /// `colors[0]` must be black and no color may repeat.
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.first() != Some(&[0, 0, 0]) {
            return Err(RasterError::InvalidPalette("entry 0 must be black".into()));
        }
        if colors.len() > 256 {
            return Err(RasterError::InvalidPalette("more than 256 entries".into()));
        }
        let mut seen = HashMap::new();
        for (i, c) in colors.iter().enumerate() {
            if let Some(j) = seen.insert(*c, i) {
                return Err(RasterError::InvalidPalette(format!(
                    "classes {j} and {i} share color {c:?}"
                )));
            }
        }
        Ok(ClassPalette { colors })
    }

    /// Built-up red, farmland green, forest cyan, meadow yellow, waters blue.
    pub fn land_cover() -> Self {
        ClassPalette {
            colors: vec![
                [0, 0, 0],
                [255, 0, 0],
                [0, 255, 0],
                [0, 255, 255],
                [255, 255, 0],
                [0, 0, 255],
            ],
        }
    }

    pub fn num_classes(&self) -> u8 {
        (self.colors.len() - 1) as u8
    }

    pub fn color(&self, label: u8) -> Option<[u8; 3]> {
        self.colors.get(label as usize).copied()
    }

    pub fn label_of(&self, color: [u8; 3]) -> Option<u8> {
        self.colors
            .iter()
            .position(|&c| c == color)
            .map(|i| i as u8)
    }
}

impl Default for ClassPalette {
    fn default() -> Self {
        Self::land_cover()
    }
}

/// Renders a mask through the palette as an RGB raster.
pub fn colorize(m: &LabelMask, p: &ClassPalette) -> Result<Raster<u8>> {
    let mut out = Vec::with_capacity(m.labels.len() * 3);
    for &l in &m.labels {
        out.extend_from_slice(&p.color(l).ok_or(RasterError::UnmappedLabel(l))?);
    }
    Raster::new(m.width, m.height, 3, out)
}

pub fn save_mask(m: &LabelMask, p: &ClassPalette, path: impl AsRef<Path>) -> Result<()> {
    save_png(&colorize(m, p)?, path)
}

pub fn load_mask(path: impl AsRef<Path>, p: &ClassPalette) -> Result<LabelMask> {
    let rgb = match load_raster(path.as_ref())? {
        DynRaster::U8(r) if r.bands() >= 3 => r,
        other => {
            return Err(RasterError::UnsupportedFormat(format!(
                "label masks are 8-bit RGB, found {}-bit with {} bands",
                other.bit_depth(),
                other.bands()
            )))
        }
    };
    let lookup: HashMap<[u8; 3], u8> = (0..=p.num_classes())
        .filter_map(|l| p.color(l).map(|c| (c, l)))
        .collect();
    let mut labels = Vec::with_capacity(rgb.pixel_count());
    for y in 0..rgb.height() {
        for x in 0..rgb.width() {
            let px = rgb.pixel(x, y);
            let color = [px[0], px[1], px[2]];
            let label = *lookup
                .get(&color)
                .ok_or(RasterError::UnknownColor { color, x, y })?;
            labels.push(label);
        }
    }
    LabelMask::new(rgb.width(), rgb.height(), p.num_classes(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requantize_endpoints_and_midpoint() {
        assert_eq!(requantize_sample(65535u16), 255);
        assert_eq!(requantize_sample(0u16), 0);
        // 32768 * 255 / 65535 = 127.50195 -> 128
        assert_eq!(requantize_sample(32768u16), 128);
        assert_eq!(requantize_sample(200u8), 200);
    }

    #[test]
    fn keep_first_three_of_four_bands() {
        let r = Raster::<u8>::from_fn(3, 2, 4, |x, y, b| (10 * b + x + y) as u8).unwrap();
        let out = preprocess(&r.clone().into(), &[0, 1, 2], false)
            .unwrap()
            .into_u8()
            .unwrap();
        assert_eq!(out.bands(), 3);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(out.pixel(x, y), &r.pixel(x, y)[..3]);
            }
        }
        let swapped = preprocess(&r.clone().into(), &[2, 0], false)
            .unwrap()
            .into_u8()
            .unwrap();
        assert_eq!(swapped.pixel(1, 1), &[22, 2]);
    }

    #[test]
    fn band_index_out_of_range() {
        let r: DynRaster = Raster::<u8>::filled(2, 2, 4, 0).unwrap().into();
        assert!(matches!(
            preprocess(&r, &[4], false),
            Err(RasterError::BandIndexOutOfRange { index: 4, bands: 4 })
        ));
    }

    #[test]
    fn sixteen_bit_stays_sixteen_without_requantize() {
        let r: DynRaster = Raster::<u16>::filled(2, 2, 4, 1000).unwrap().into();
        let kept = preprocess(&r, &[0, 1, 2], false).unwrap();
        assert_eq!(kept.bit_depth(), 16);
        let q = preprocess(&r, &[0, 1, 2], true).unwrap().into_u8().unwrap();
        assert_eq!(q.samples()[0], 4); // 1000*255/65535 = 3.89
    }

    #[test]
    fn raster_shape_is_checked() {
        assert!(Raster::<u8>::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(Raster::<u8>::new(0, 2, 1, vec![]).is_err());
        assert!(Raster::<u8>::new(1, 1, 5, vec![0; 5]).is_err());
    }

    #[test]
    fn palette_rules() {
        assert!(ClassPalette::new(vec![[1, 0, 0]]).is_err());
        assert!(ClassPalette::new(vec![[0, 0, 0], [9, 9, 9], [9, 9, 9]]).is_err());
        let p = ClassPalette::land_cover();
        assert_eq!(p.num_classes(), 5);
        assert_eq!(p.label_of([0, 0, 255]), Some(5));
        assert_eq!(p.color(0), Some([0, 0, 0]));
    }

    #[test]
    fn mask_rejects_out_of_range_labels() {
        assert!(LabelMask::new(2, 1, 2, vec![1, 3]).is_err());
        let m = LabelMask::new(2, 1, 2, vec![0, 2]).unwrap();
        assert_eq!(m.histogram(), vec![1, 0, 1]);
    }
}
