//! Per-patch descriptors: color histogram, GLCM statistics, uniform LBP
//! histogram, and L2-normalized concatenation of several descriptors.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;
use crate::sampling::{self, Window};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("no offset yields a valid pixel pair in a {width}x{height} patch")]
    DegeneratePatch { width: usize, height: usize },
    #[error("LBP needs at least 3x3 pixels, got {width}x{height}")]
    PatchTooSmall { width: usize, height: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("feature recipe enables no descriptor")]
    EmptyRecipe,
    #[error(transparent)]
    Sampling(#[from] sampling::SamplingError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Named sub-vector of a [`FeatureVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub blocks: Vec<Block>,
}

impl FeatureVector {
    pub fn single(name: &str, values: Vec<f64>) -> Self {
        let len = values.len();
        FeatureVector {
            values,
            blocks: vec![Block {
                name: name.to_string(),
                offset: 0,
                len,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.offset..b.offset + b.len])
    }
}

/// Rounded unweighted mean of the bands of every pixel.
pub fn to_gray(img: &Raster<u8>) -> Vec<u8> {
    let bands = img.bands() as u32;
    img.samples()
        .chunks_exact(img.bands())
        .map(|px| {
            let sum: u32 = px.iter().map(|&v| v as u32).sum();
            ((2 * sum + bands) / (2 * bands)) as u8
        })
        .collect()
}

/// Per-band equal-width histograms over `[0, 256)`, each L1-normalized.
pub fn color_histogram(img: &Raster<u8>, bins_per_band: usize) -> Result<FeatureVector> {
    if bins_per_band == 0 || bins_per_band > 256 {
        return Err(FeatureError::InvalidParameter(format!(
            "{bins_per_band} histogram bins"
        )));
    }
    let bands = img.bands();
    let mut counts = vec![0usize; bands * bins_per_band];
    for px in img.samples().chunks_exact(bands) {
        for (b, &v) in px.iter().enumerate() {
            counts[b * bins_per_band + v as usize * bins_per_band / 256] += 1;
        }
    }
    let n = img.pixel_count() as f64;
    Ok(FeatureVector::single(
        "ch",
        counts.into_iter().map(|c| c as f64 / n).collect(),
    ))
}

/// Gray image quantized to `levels` equal-width bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedGray {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub values: Vec<u16>,
}

impl QuantizedGray {
    pub fn from_raster(img: &Raster<u8>, levels: usize) -> Result<Self> {
        if !(2..=256).contains(&levels) {
            return Err(FeatureError::InvalidParameter(format!(
                "{levels} GLCM levels"
            )));
        }
        Ok(QuantizedGray {
            width: img.width(),
            height: img.height(),
            levels,
            values: to_gray(img)
                .into_iter()
                .map(|g| (g as usize * levels / 256) as u16)
                .collect(),
        })
    }
}

/// Symmetric co-occurrence counts for one displacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glcm {
    pub levels: usize,
    /// `levels x levels`, row-major; each unordered pixel pair counted in both
    /// `(i, j)` and `(j, i)`.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Glcm {
    /// Co-occurrences at displacement `(drow, dcol)`; `None` when the patch
    /// has no pixel pair at that displacement.
    pub fn compute(q: &QuantizedGray, offset: (isize, isize)) -> Option<Glcm> {
        let (dr, dc) = offset;
        let (w, h) = (q.width as isize, q.height as isize);
        let mut counts = vec![0u64; q.levels * q.levels];
        let mut total = 0;
        let (r0, r1) = (0.max(-dr), h.min(h - dr));
        let (c0, c1) = (0.max(-dc), w.min(w - dc));
        for r in r0..r1 {
            for c in c0..c1 {
                let i = q.values[(r * w + c) as usize] as usize;
                let j = q.values[((r + dr) * w + c + dc) as usize] as usize;
                counts[i * q.levels + j] += 1;
                counts[j * q.levels + i] += 1;
                total += 2;
            }
        }
        (total > 0).then_some(Glcm {
            levels: q.levels,
            counts,
            total,
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Contrast, energy, homogeneity and correlation of a normalized GLCM.
/// Correlation is 0 when either marginal has zero variance.
pub fn haralick(p: &[f64], levels: usize) -> [f64; 4] {
    let (mut contrast, mut energy, mut homogeneity) = (0.0, 0.0, 0.0);
    let (mut mu_i, mut mu_j) = (0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let v = p[i * levels + j];
            let d = i as f64 - j as f64;
            contrast += d * d * v;
            energy += v * v;
            homogeneity += v / (1.0 + d.abs());
            mu_i += i as f64 * v;
            mu_j += j as f64 * v;
        }
    }
    let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let v = p[i * levels + j];
            let (di, dj) = (i as f64 - mu_i, j as f64 - mu_j);
            var_i += di * di * v;
            var_j += dj * dj * v;
            cov += di * dj * v;
        }
    }
    let correlation = if var_i <= 0.0 || var_j <= 0.0 {
        0.0
    } else {
        cov / (var_i.sqrt() * var_j.sqrt())
    };
    [contrast, energy, homogeneity, correlation]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlcmParams {
    pub levels: usize,
    /// `(row, column)` displacements.
    pub offsets: Vec<(isize, isize)>,
}

impl Default for GlcmParams {
    fn default() -> Self {
        GlcmParams {
            levels: 32,
            offsets: vec![(0, 1), (1, 0), (1, 1), (1, -1)],
        }
    }
}

/// Haralick statistics averaged over every offset with at least one pair.
pub fn glcm_features(img: &Raster<u8>, params: &GlcmParams) -> Result<FeatureVector> {
    if params.offsets.is_empty() {
        return Err(FeatureError::InvalidParameter("no GLCM offsets".into()));
    }
    let q = QuantizedGray::from_raster(img, params.levels)?;
    let mut acc = [0.0; 4];
    let mut used = 0;
    for &off in &params.offsets {
        if let Some(m) = Glcm::compute(&q, off) {
            let f = haralick(&m.probabilities(), m.levels);
            acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
            used += 1;
        }
    }
    if used == 0 {
        return Err(FeatureError::DegeneratePatch {
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(FeatureVector::single(
        "glcm",
        acc.iter().map(|a| a / used as f64).collect(),
    ))
}

pub const LBP_BINS: usize = 59;

/// Clockwise from top-left, as (dx, dy).
pub const LBP_NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

/// 8-neighbor radius-1 code; the first neighbor (top-left) is the most
/// significant bit, set when the neighbor is `>=` the center.
#[inline]
pub fn lbp_code(gray: &[u8], width: usize, x: usize, y: usize) -> u8 {
    let c = gray[y * width + x];
    let mut code = 0u8;
    for &(dx, dy) in &LBP_NEIGHBORS {
        let n = gray[(y as isize + dy) as usize * width + (x as isize + dx) as usize];
        code = (code << 1) | (n >= c) as u8;
    }
    code
}

/// Circular 0/1 transitions in an 8-bit code.
pub fn transitions(code: u8) -> u32 {
    (code ^ code.rotate_left(1)).count_ones()
}

/// u2 mapping: the 58 uniform codes take bins 0..58 in ascending code order,
/// every other code falls into bin 58.
pub fn uniform_bins() -> &'static [u8; 256] {
    static TABLE: OnceLock<[u8; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [(LBP_BINS - 1) as u8; 256];
        let mut next = 0u8;
        for code in 0..=255u8 {
            if transitions(code) <= 2 {
                t[code as usize] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next as usize, LBP_BINS - 1);
        t
    })
}

/// L1-normalized uniform-LBP histogram over interior pixels.
pub fn lbp_histogram(img: &Raster<u8>) -> Result<FeatureVector> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(FeatureError::PatchTooSmall {
            width: w,
            height: h,
        });
    }
    let gray = to_gray(img);
    let table = uniform_bins();
    let mut counts = [0usize; LBP_BINS];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            counts[table[lbp_code(&gray, w, x, y) as usize] as usize] += 1;
        }
    }
    let n = ((w - 2) * (h - 2)) as f64;
    Ok(FeatureVector::single(
        "lbp",
        counts.iter().map(|&c| c as f64 / n).collect(),
    ))
}

/// Scales each vector to unit L2 norm (zero vectors stay zero) and
/// concatenates them, keeping every input block.
pub fn fuse(features: &[FeatureVector]) -> Result<FeatureVector> {
    if features.is_empty() {
        return Err(FeatureError::InvalidParameter("nothing to fuse".into()));
    }
    let mut values = Vec::with_capacity(features.iter().map(|f| f.len()).sum());
    let mut blocks = Vec::new();
    for f in features {
        let norm = f.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let base = values.len();
        if norm > 0.0 {
            values.extend(f.values.iter().map(|v| v / norm));
        } else {
            values.extend(std::iter::repeat_n(0.0, f.len()));
        }
        blocks.extend(f.blocks.iter().map(|b| Block {
            name: b.name.clone(),
            offset: base + b.offset,
            len: b.len,
        }));
    }
    Ok(FeatureVector { values, blocks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogramParams {
    pub bins: usize,
}

/// Which descriptors to compute, and the canonical patch side every window
/// is warped to before featurization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureRecipe {
    pub color_histogram: Option<ColorHistogramParams>,
    pub glcm: Option<GlcmParams>,
    pub lbp: bool,
    pub patch_size: usize,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        FeatureRecipe {
            color_histogram: Some(ColorHistogramParams { bins: 32 }),
            glcm: Some(GlcmParams::default()),
            lbp: true,
            patch_size: 224,
        }
    }
}

impl FeatureRecipe {
    pub fn color_only(bins: usize) -> Self {
        FeatureRecipe {
            color_histogram: Some(ColorHistogramParams { bins }),
            glcm: None,
            lbp: false,
            ..Default::default()
        }
    }

    pub fn glcm_only(params: GlcmParams) -> Self {
        FeatureRecipe {
            color_histogram: None,
            glcm: Some(params),
            lbp: false,
            ..Default::default()
        }
    }

    pub fn lbp_only() -> Self {
        FeatureRecipe {
            color_histogram: None,
            glcm: None,
            lbp: true,
            ..Default::default()
        }
    }

    pub fn with_patch_size(mut self, size: usize) -> Self {
        self.patch_size = size;
        self
    }

    pub fn block_count(&self) -> usize {
        self.color_histogram.is_some() as usize + self.glcm.is_some() as usize + self.lbp as usize
    }

    /// Each enabled descriptor, unnormalized, in CH/GLCM/LBP order.
    pub fn descriptors(&self, img: &Raster<u8>) -> Result<Vec<FeatureVector>> {
        let mut out = Vec::with_capacity(3);
        if let Some(ch) = &self.color_histogram {
            out.push(color_histogram(img, ch.bins)?);
        }
        if let Some(g) = &self.glcm {
            out.push(glcm_features(img, g)?);
        }
        if self.lbp {
            out.push(lbp_histogram(img)?);
        }
        if out.is_empty() {
            return Err(FeatureError::EmptyRecipe);
        }
        Ok(out)
    }

    /// A single descriptor is returned as is; several are fused.
    pub fn extract(&self, img: &Raster<u8>) -> Result<FeatureVector> {
        let mut d = self.descriptors(img)?;
        if d.len() == 1 {
            Ok(d.pop().expect("one descriptor"))
        } else {
            fuse(&d)
        }
    }

    /// Cuts `window` out of `r`, warps it to `patch_size` and featurizes it.
    pub fn featurize_window(&self, r: &Raster<u8>, window: &Window) -> Result<FeatureVector> {
        let patch = sampling::extract(r, window)?;
        let warped = sampling::resize_image(&patch.image, self.patch_size)?;
        self.extract(&warped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gray(w: usize, h: usize, v: &[u8]) -> Raster<u8> {
        Raster::new(w, h, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn histogram_examples() {
        let c = color_histogram(&gray(4, 4, &[0; 16]), 8).unwrap();
        assert_eq!(c.values, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut half = vec![0u8; 8];
        half.extend([255u8; 8]);
        assert_eq!(
            color_histogram(&gray(4, 4, &half), 2).unwrap().values,
            vec![0.5, 0.5]
        );
        let rgb = Raster::<u8>::filled(3, 3, 3, 9).unwrap();
        assert_eq!(color_histogram(&rgb, 32).unwrap().len(), 96);
    }

    #[test]
    fn glcm_two_by_two() {
        // levels 0 and 1 after quantizing 0 and 255 to 2 levels
        let q = QuantizedGray::from_raster(&gray(2, 2, &[0, 0, 255, 255]), 2).unwrap();
        assert_eq!(q.values, vec![0, 0, 1, 1]);
        let m = Glcm::compute(&q, (0, 1)).unwrap();
        assert_eq!(m.probabilities(), vec![0.5, 0.0, 0.0, 0.5]);
        let f = haralick(&m.probabilities(), 2);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.5);
    }

    #[test]
    fn glcm_constant_patch() {
        let f = glcm_features(&gray(5, 5, &[140; 25]), &GlcmParams::default()).unwrap();
        assert_eq!(f.values, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn glcm_degenerate() {
        let p = GlcmParams {
            levels: 8,
            offsets: vec![(1, 0)],
        };
        assert_eq!(
            glcm_features(&gray(4, 1, &[1, 2, 3, 4]), &p),
            Err(FeatureError::DegeneratePatch {
                width: 4,
                height: 1
            })
        );
        // horizontal pairs still exist
        assert!(glcm_features(&gray(4, 1, &[1, 2, 3, 4]), &GlcmParams::default()).is_ok());
    }

    #[test]
    fn glcm_is_symmetric() {
        let img =
            Raster::<u8>::from_fn(9, 7, 1, |x, y, _| ((x * 37 + y * 91) % 256) as u8).unwrap();
        let q = QuantizedGray::from_raster(&img, 8).unwrap();
        for off in GlcmParams::default().offsets {
            let m = Glcm::compute(&q, off).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(m.counts[i * 8 + j], m.counts[j * 8 + i]);
                }
            }
        }
    }

    #[test]
    fn uniform_table_has_58_codes() {
        let t = uniform_bins();
        assert_eq!(t.iter().filter(|&&b| b < 58).count(), 58);
        assert_eq!(t[0], 0);
        assert_eq!(t[255], 57);
        assert_eq!(t[0b0101_0101], 58);
    }

    #[test]
    fn lbp_examples() {
        let all_ones = lbp_histogram(&gray(5, 5, &[9; 25])).unwrap();
        assert_eq!(all_ones.values[uniform_bins()[255] as usize], 1.0);
        let mut v = [0u8; 9];
        v[4] = 100;
        let zeros = lbp_histogram(&gray(3, 3, &v)).unwrap();
        assert_eq!(zeros.values[uniform_bins()[0] as usize], 1.0);
        assert_eq!(
            lbp_histogram(&gray(2, 2, &[0; 4])),
            Err(FeatureError::PatchTooSmall {
                width: 2,
                height: 2
            })
        );
    }

    #[test]
    fn lbp_bit_order() {
        // only the top-left neighbor is >= center
        let img = gray(3, 3, &[200, 0, 0, 0, 100, 0, 0, 0, 0]);
        assert_eq!(lbp_code(&to_gray(&img), 3, 1, 1), 0b1000_0000);
    }

    #[test]
    fn fuse_examples() {
        let img =
            Raster::<u8>::from_fn(16, 16, 3, |x, y, b| (x * 13 + y * 7 + b * 50) as u8).unwrap();
        let fused = FeatureRecipe::default().extract(&img).unwrap();
        assert_eq!(fused.len(), 159);
        for b in &fused.blocks {
            let n: f64 = fused.values[b.offset..b.offset + b.len]
                .iter()
                .map(|v| v * v)
                .sum();
            assert_relative_eq!(n.sqrt(), 1.0, epsilon = 1e-12);
        }
        let unit = FeatureVector::single("x", vec![0.6, 0.8]);
        assert_eq!(fuse(std::slice::from_ref(&unit)).unwrap(), unit);
        let zero = FeatureVector::single("z", vec![0.0; 3]);
        assert_eq!(fuse(std::slice::from_ref(&zero)).unwrap(), zero);
    }

    #[test]
    fn gray_rounds_half_up() {
        let img = Raster::new(1, 1, 2, vec![0u8, 1]).unwrap();
        assert_eq!(to_gray(&img), vec![1]);
        let img = Raster::new(1, 1, 3, vec![0u8, 0, 1]).unwrap();
        assert_eq!(to_gray(&img), vec![0]);
    }
}
