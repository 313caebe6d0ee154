//! Tiling, stratified center sampling, window extraction and warping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LabelMask, Raster};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("category {category} has {available} labeled pixels, {requested} requested")]
    InsufficientSamples {
        category: u8,
        available: usize,
        requested: usize,
    },
    #[error("center ({x}, {y}) lies outside a {width}x{height} image")]
    CenterOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("window {0:?} exceeds the raster extent")]
    WindowOutOfBounds(Window),
    #[error("invalid size {0}")]
    InvalidSize(usize),
}

pub type Result<T, E = SamplingError> = std::result::Result<T, E>;

/// Square window of nominal side `size`, clamped into an image.
///
/// When the image is smaller than `size` along an axis the window spans the
/// whole image along that axis and `undersized` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub width: usize,
    pub height: usize,
    pub undersized: bool,
}

impl Window {
    /// An unclamped square window.
    pub fn square(x: usize, y: usize, size: usize) -> Self {
        Window {
            x,
            y,
            size,
            width: size,
            height: size,
            undersized: false,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.x + self.width <= width
            && self.y + self.height <= height
    }
}

/// Places a `size`-long span starting at `start` inside `0..extent`.
/// Returns (start, length, undersized).
fn clamp_span(start: isize, size: usize, extent: usize) -> (usize, usize, bool) {
    if size > extent {
        (0, extent, true)
    } else {
        let max_start = (extent - size) as isize;
        (start.clamp(0, max_start) as usize, size, false)
    }
}

fn clamped(x: isize, y: isize, size: usize, width: usize, height: usize) -> Window {
    let (x, w, ux) = clamp_span(x, size, width);
    let (y, h, uy) = clamp_span(y, size, height);
    Window {
        x,
        y,
        size,
        width: w,
        height: h,
        undersized: ux || uy,
    }
}

/// Number of grid cells along an axis for the given stride.
pub fn cells_along(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

/// Pixel span `[start, end)` owned by cell `index` along an axis.
pub fn cell_span(index: usize, stride: usize, extent: usize) -> (usize, usize) {
    let start = index * stride;
    (start, ((index + 1) * stride).min(extent))
}

/// Row-major tiling with stride `size`; the last row and column are shifted
/// inward so every window lies inside the image.
pub fn grid_windows(width: usize, height: usize, size: usize) -> Result<Vec<Window>> {
    if size == 0 {
        return Err(SamplingError::InvalidSize(size));
    }
    let (gw, gh) = (cells_along(width, size), cells_along(height, size));
    let mut out = Vec::with_capacity(gw * gh);
    for r in 0..gh {
        for c in 0..gw {
            out.push(clamped(
                (c * size) as isize,
                (r * size) as isize,
                size,
                width,
                height,
            ));
        }
    }
    Ok(out)
}

/// Window of side `scale` centered at `center` (top-left at
/// `center - scale / 2`), moved inside the image.
pub fn window_at(
    center: (usize, usize),
    scale: usize,
    width: usize,
    height: usize,
) -> Result<Window> {
    if scale == 0 {
        return Err(SamplingError::InvalidSize(scale));
    }
    let (cx, cy) = center;
    if cx >= width || cy >= height {
        return Err(SamplingError::CenterOutOfBounds {
            x: cx,
            y: cy,
            width,
            height,
        });
    }
    let half = (scale / 2) as isize;
    Ok(clamped(
        cx as isize - half,
        cy as isize - half,
        scale,
        width,
        height,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Center {
    pub x: usize,
    pub y: usize,
    pub label: u8,
}

/// Draws `per_class` distinct pixels of every category present in `mask`,
/// uniformly without replacement. Output is grouped by ascending category.
pub fn sample_centers(mask: &LabelMask, per_class: usize, rng_seed: u64) -> Result<Vec<Center>> {
    if per_class == 0 {
        return Err(SamplingError::InvalidSize(per_class));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); mask.num_classes() as usize + 1];
    for (i, &l) in mask.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::new();
    for (category, pixels) in by_class.iter().enumerate().skip(1) {
        if pixels.is_empty() {
            continue;
        }
        if pixels.len() < per_class {
            return Err(SamplingError::InsufficientSamples {
                category: category as u8,
                available: pixels.len(),
                requested: per_class,
            });
        }
        for k in rand::seq::index::sample(&mut rng, pixels.len(), per_class) {
            let p = pixels[k];
            out.push(Center {
                x: p % mask.width(),
                y: p / mask.width(),
                label: category as u8,
            });
        }
    }
    Ok(out)
}

/// Pixel-exact copy of an image window.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Raster<u8>,
    pub source: Window,
}

pub fn extract(r: &Raster<u8>, w: &Window) -> Result<Patch> {
    if !w.fits(r.width(), r.height()) {
        return Err(SamplingError::WindowOutOfBounds(*w));
    }
    let bands = r.bands();
    let mut samples = Vec::with_capacity(w.width * w.height * bands);
    for y in w.y..w.y + w.height {
        let row = r.row(y);
        samples.extend_from_slice(&row[w.x * bands..(w.x + w.width) * bands]);
    }
    let image = Raster::new(w.width, w.height, bands, samples)
        .expect("window inside a valid raster has a valid shape");
    Ok(Patch { image, source: *w })
}

/// Source coordinate sampled by output index `i` under corner alignment.
#[inline]
fn corner_aligned(i: usize, target: usize, source: usize) -> f64 {
    if target <= 1 {
        0.0
    } else {
        i as f64 * (source - 1) as f64 / (target - 1) as f64
    }
}

/// Bilinear, corner-aligned warp of an image to `target x target`.
pub fn resize_image(img: &Raster<u8>, target: usize) -> Result<Raster<u8>> {
    if target == 0 {
        return Err(SamplingError::InvalidSize(target));
    }
    if img.width() == target && img.height() == target {
        return Ok(img.clone());
    }
    let (sw, sh, bands) = (img.width(), img.height(), img.bands());
    // per-column source taps, shared across rows
    let taps: Vec<(usize, usize, f64)> = (0..target)
        .map(|i| {
            let u = corner_aligned(i, target, sw);
            let x0 = (u.floor() as usize).min(sw - 1);
            (x0, (x0 + 1).min(sw - 1), u - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(target * target * bands);
    for j in 0..target {
        let v = corner_aligned(j, target, sh);
        let y0 = (v.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let fy = v - y0 as f64;
        for &(x0, x1, fx) in &taps {
            for b in 0..bands {
                let top = img.get(x0, y0, b) as f64 * (1.0 - fx) + img.get(x1, y0, b) as f64 * fx;
                let bot = img.get(x0, y1, b) as f64 * (1.0 - fx) + img.get(x1, y1, b) as f64 * fx;
                let val = top * (1.0 - fy) + bot * fy;
                out.push(val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(Raster::new(target, target, bands, out).expect("target shape is valid"))
}

/// Warps a patch to a uniform square size, keeping its source window.
pub fn resize(p: &Patch, target: usize) -> Result<Patch> {
    Ok(Patch {
        image: resize_image(&p.image, target)?,
        source: p.source,
    })
}
