//! Graph-based over-segmentation followed by greedy hierarchical merging of
//! adjacent regions under color/texture/size/fill similarity.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Raster, RasterError};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("cannot merge down to {target} regions from {current}")]
    InfeasibleTarget { target: usize, current: usize },
    #[error("{0} regions do not fit a 16-bit region map")]
    RegionOverflow(usize),
    #[error("invalid segmentation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = SegmentError> = std::result::Result<T, E>;

/// Per-pixel region ids with region sizes and 4-adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    sizes: Vec<usize>,
    adjacency: BTreeSet<(u32, u32)>,
}

impl RegionPartition {
    /// Relabels arbitrary ids densely in order of first appearance (raster
    /// scan) and derives sizes and adjacency. Connectivity is not checked;
    /// see [`RegionPartition::validate`].
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(SegmentError::InvalidPartition(format!(
                "{} labels for {width}x{height}",
                labels.len()
            )));
        }
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut sizes = Vec::new();
        let ids: Vec<u32> = labels
            .into_iter()
            .map(|l| {
                let next = remap.len() as u32;
                let id = *remap.entry(l).or_insert(next);
                if id as usize == sizes.len() {
                    sizes.push(0);
                }
                sizes[id as usize] += 1;
                id
            })
            .collect();
        let mut adjacency = BTreeSet::new();
        for y in 0..height {
            for x in 0..width {
                let a = ids[y * width + x];
                if x + 1 < width {
                    let b = ids[y * width + x + 1];
                    if a != b {
                        adjacency.insert((a.min(b), a.max(b)));
                    }
                }
                if y + 1 < height {
                    let b = ids[(y + 1) * width + x];
                    if a != b {
                        adjacency.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        Ok(RegionPartition {
            width,
            height,
            ids,
            sizes,
            adjacency,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_regions(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn region_ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn region_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// Unordered adjacent pairs `(a, b)` with `a < b`.
    pub fn adjacency(&self) -> &BTreeSet<(u32, u32)> {
        &self.adjacency
    }

    /// Checks dense ids, size bookkeeping, 4-connectivity of every region
    /// and adjacency symmetry.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let r = self.sizes.len();
        let mut counted = vec![0usize; r];
        for &id in &self.ids {
            if id as usize >= r {
                return Err(format!("id {id} not below region count {r}"));
            }
            counted[id as usize] += 1;
        }
        if counted != self.sizes {
            return Err("sizes disagree with pixel counts".into());
        }
        if counted.contains(&0) {
            return Err("ids are not dense".into());
        }
        if self.sizes.iter().sum::<usize>() != self.width * self.height {
            return Err("sizes do not sum to the pixel count".into());
        }
        let mut seen = vec![false; self.ids.len()];
        let mut visited_regions = vec![false; r];
        let mut queue = VecDeque::new();
        for start in 0..self.ids.len() {
            if seen[start] {
                continue;
            }
            let id = self.ids[start];
            if visited_regions[id as usize] {
                return Err(format!("region {id} is not 4-connected"));
            }
            visited_regions[id as usize] = true;
            seen[start] = true;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                let (x, y) = (p % self.width, p / self.width);
                let mut visit = |q: usize| {
                    if !seen[q] && self.ids[q] == id {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < self.width {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - self.width);
                }
                if y + 1 < self.height {
                    visit(p + self.width);
                }
            }
        }
        let rebuilt = Self::from_labels(self.width, self.height, self.ids.clone())
            .map_err(|e| e.to_string())?;
        if rebuilt.adjacency != self.adjacency {
            return Err("adjacency does not match pixel neighbors".into());
        }
        Ok(())
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Largest edge weight inside each component's spanning forest.
    internal: Vec<f32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    /// Joins two roots; returns the new root.
    fn union(&mut self, a: u32, b: u32, weight: f32) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = weight;
        big
    }
}

/// Separable Gaussian blur per band with clamped borders.
fn smooth(r: &Raster<u8>, sigma: f64) -> Vec<f32> {
    let (w, h, bands) = (r.width(), r.height(), r.bands());
    let src: Vec<f32> = r.samples().iter().map(|&v| v as f32).collect();
    if sigma <= 0.0 {
        return src;
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for b in 0..bands {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = clamp(x as isize + k as isize - radius, w);
                    acc += kv * src[(y * w + xx) * bands + b];
                }
                tmp[(y * w + x) * bands + b] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for b in 0..bands {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = clamp(y as isize + k as isize - radius, h);
                    acc += kv * tmp[(yy * w + x) * bands + b];
                }
                out[(y * w + x) * bands + b] = acc;
            }
        }
    }
    out
}

/// Graph-based segmentation on the 4-connected pixel grid. Edges are visited
/// by nondecreasing Euclidean band distance; two components join when the
/// edge is no heavier than `min(Int(C) + k / |C|)` over both. Components
/// below `min_size` are then absorbed across their lightest edges.
pub fn initial_segmentation(
    r: &Raster<u8>,
    k: f64,
    sigma: f64,
    min_size: usize,
) -> Result<RegionPartition> {
    if !(k > 0.0) || !(sigma >= 0.0) || min_size == 0 {
        return Err(SegmentError::InvalidParams(format!(
            "k {k}, sigma {sigma}, min_size {min_size}"
        )));
    }
    let (w, h, bands) = (r.width(), r.height(), r.bands());
    let img = smooth(r, sigma);
    let dist = |p: usize, q: usize| -> f32 {
        let (a, b) = (
            &img[p * bands..(p + 1) * bands],
            &img[q * bands..(q + 1) * bands],
        );
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            .sqrt()
    };
    let mut edges: Vec<(f32, u32, u32)> = Vec::with_capacity(2 * w * h);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((dist(p, p + 1), p as u32, (p + 1) as u32));
            }
            if y + 1 < h {
                edges.push((dist(p, p + w), p as u32, (p + w) as u32));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut ds = DisjointSet::new(w * h);
    let kf = k as f32;
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra as usize] + kf / ds.size[ra as usize] as f32;
        let tb = ds.internal[rb as usize] + kf / ds.size[rb as usize] as f32;
        if wt <= ta.min(tb) {
            ds.union(ra, rb, wt);
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb
            && ((ds.size[ra as usize] as usize) < min_size
                || (ds.size[rb as usize] as usize) < min_size)
        {
            let keep = ds.internal[ra as usize].max(ds.internal[rb as usize]);
            ds.union(ra, rb, keep);
        }
    }
    let labels = (0..w * h).map(|p| ds.find(p as u32)).collect();
    RegionPartition::from_labels(w, h, labels)
}

pub const COLOR_BINS: usize = 25;
pub const ORIENTATION_BINS: usize = 8;
pub const MAGNITUDE_BINS: usize = 10;
pub const TEXTURE_BINS: usize = ORIENTATION_BINS * MAGNITUDE_BINS;
/// Largest central-difference gradient magnitude on 8-bit data.
const MAX_GRADIENT: f64 = 180.31222920256963; // 127.5 * sqrt(2)

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn union(&self, o: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    /// `COLOR_BINS` per band, L1-normalized over all bands.
    pub color: Vec<f64>,
    /// `ORIENTATION_BINS x MAGNITUDE_BINS` per band, L1-normalized.
    pub texture: Vec<f64>,
    pub size: usize,
    pub bbox: BoundingBox,
}

impl RegionStats {
    /// Size-weighted average of histograms; sizes add, boxes union.
    pub fn merge(a: &RegionStats, b: &RegionStats) -> RegionStats {
        let size = a.size + b.size;
        let (wa, wb) = (a.size as f64, b.size as f64);
        let avg = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p * wa + q * wb) / size as f64)
                .collect()
        };
        RegionStats {
            color: avg(&a.color, &b.color),
            texture: avg(&a.texture, &b.texture),
            size,
            bbox: a.bbox.union(&b.bbox),
        }
    }
}

/// Orientation and magnitude bin of the central-difference gradient of each
/// pixel in every band.
fn gradient_bins(r: &Raster<u8>) -> Vec<u16> {
    let (w, h, bands) = (r.width(), r.height(), r.bands());
    let mut out = Vec::with_capacity(w * h * bands);
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for b in 0..bands {
                let gx = (r.get(xr, y, b) as f64 - r.get(xl, y, b) as f64) / 2.0;
                let gy = (r.get(x, yd, b) as f64 - r.get(x, yu, b) as f64) / 2.0;
                let theta = gy.atan2(gx) + std::f64::consts::PI;
                let o = ((theta / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize)
                    % ORIENTATION_BINS;
                let m = ((gx.hypot(gy) / MAX_GRADIENT * MAGNITUDE_BINS as f64) as usize)
                    .min(MAGNITUDE_BINS - 1);
                out.push((o * MAGNITUDE_BINS + m) as u16);
            }
        }
    }
    out
}

/// Color/texture histograms, sizes and bounding boxes of every region.
pub fn region_stats(r: &Raster<u8>, p: &RegionPartition) -> Result<Vec<RegionStats>> {
    if r.width() != p.width() || r.height() != p.height() {
        return Err(SegmentError::InvalidPartition(format!(
            "{}x{} partition over a {}x{} raster",
            p.width(),
            p.height(),
            r.width(),
            r.height()
        )));
    }
    let bands = r.bands();
    let grads = gradient_bins(r);
    let mut stats: Vec<RegionStats> = (0..p.num_regions())
        .map(|_| RegionStats {
            color: vec![0.0; COLOR_BINS * bands],
            texture: vec![0.0; TEXTURE_BINS * bands],
            size: 0,
            bbox: BoundingBox {
                x0: usize::MAX,
                y0: usize::MAX,
                x1: 0,
                y1: 0,
            },
        })
        .collect();
    for y in 0..p.height() {
        for x in 0..p.width() {
            let s = &mut stats[p.region_at(x, y) as usize];
            s.size += 1;
            s.bbox.x0 = s.bbox.x0.min(x);
            s.bbox.y0 = s.bbox.y0.min(y);
            s.bbox.x1 = s.bbox.x1.max(x);
            s.bbox.y1 = s.bbox.y1.max(y);
            let px = r.pixel(x, y);
            let g = &grads[(y * r.width() + x) * bands..][..bands];
            for b in 0..bands {
                s.color[b * COLOR_BINS + px[b] as usize * COLOR_BINS / 256] += 1.0;
                s.texture[b * TEXTURE_BINS + g[b] as usize] += 1.0;
            }
        }
    }
    for s in &mut stats {
        let n = (s.size * bands) as f64;
        s.color.iter_mut().for_each(|v| *v /= n);
        s.texture.iter_mut().for_each(|v| *v /= n);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub color: f64,
    pub texture: f64,
    pub size: f64,
    pub fill: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights {
            color: 1.0,
            texture: 1.0,
            size: 1.0,
            fill: 1.0,
        }
    }
}

impl SimilarityWeights {
    pub fn total(&self) -> f64 {
        self.color + self.texture + self.size + self.fill
    }
}

fn intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Weighted sum of histogram intersections, a small-size preference and a
/// bounding-box fill term, clipped to `[0, total weight]`.
pub fn similarity(
    a: &RegionStats,
    b: &RegionStats,
    image_size: usize,
    w: &SimilarityWeights,
) -> f64 {
    let n = image_size as f64;
    let joint = (a.size + b.size) as f64;
    let fill_gap = a.bbox.union(&b.bbox).area() as f64 - joint;
    let s = w.color * intersection(&a.color, &b.color)
        + w.texture * intersection(&a.texture, &b.texture)
        + w.size * (1.0 - joint / n)
        + w.fill * (1.0 - fill_gap / n);
    s.clamp(0.0, w.total().max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stop {
    TargetRegions(usize),
    MinSimilarity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    sim: f64,
    size: usize,
    a: u32,
    b: u32,
    gen_a: u32,
    gen_b: u32,
}

impl Candidate {
    /// Higher similarity, then smaller joint size, then smaller id pair.
    fn rank(&self, o: &Self) -> Ordering {
        self.sim
            .total_cmp(&o.sim)
            .then_with(|| o.size.cmp(&self.size))
            .then_with(|| (o.a, o.b).cmp(&(self.a, self.b)))
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.rank(o)
    }
}

/// Incremental greedy merger. Each step merges the best adjacent pair; the
/// survivor keeps the smaller id. Heap entries carry per-region generation
/// stamps and are discarded lazily once either side has changed.
pub struct Merger {
    width: usize,
    height: usize,
    initial: Vec<u32>,
    weights: SimilarityWeights,
    stats: Vec<Option<RegionStats>>,
    neighbors: Vec<BTreeSet<u32>>,
    generation: Vec<u32>,
    owner: Vec<u32>,
    heap: BinaryHeap<Candidate>,
    alive: usize,
}

impl Merger {
    pub fn new(
        p: &RegionPartition,
        stats: Vec<RegionStats>,
        weights: SimilarityWeights,
    ) -> Result<Self> {
        let r = p.num_regions();
        if stats.len() != r {
            return Err(SegmentError::InvalidPartition(format!(
                "{} stats for {r} regions",
                stats.len()
            )));
        }
        let mut neighbors = vec![BTreeSet::new(); r];
        for &(a, b) in p.adjacency() {
            neighbors[a as usize].insert(b);
            neighbors[b as usize].insert(a);
        }
        let mut m = Merger {
            width: p.width(),
            height: p.height(),
            initial: p.region_ids().to_vec(),
            weights,
            stats: stats.into_iter().map(Some).collect(),
            neighbors,
            generation: vec![0; r],
            owner: (0..r as u32).collect(),
            heap: BinaryHeap::new(),
            alive: r,
        };
        for &(a, b) in p.adjacency() {
            let c = m.candidate(a, b);
            m.heap.push(c);
        }
        Ok(m)
    }

    fn candidate(&self, a: u32, b: u32) -> Candidate {
        let (a, b) = (a.min(b), a.max(b));
        let sa = self.stats[a as usize].as_ref().expect("live region");
        let sb = self.stats[b as usize].as_ref().expect("live region");
        Candidate {
            sim: similarity(sa, sb, self.width * self.height, &self.weights),
            size: sa.size + sb.size,
            a,
            b,
            gen_a: self.generation[a as usize],
            gen_b: self.generation[b as usize],
        }
    }

    fn is_current(&self, c: &Candidate) -> bool {
        self.stats[c.a as usize].is_some()
            && self.stats[c.b as usize].is_some()
            && self.generation[c.a as usize] == c.gen_a
            && self.generation[c.b as usize] == c.gen_b
    }

    pub fn region_count(&self) -> usize {
        self.alive
    }

    /// Best pending pair and its similarity, dropping stale entries.
    pub fn peek(&mut self) -> Option<(u32, u32, f64)> {
        while let Some(top) = self.heap.peek() {
            if self.is_current(top) {
                return Some((top.a, top.b, top.sim));
            }
            self.heap.pop();
        }
        None
    }

    /// Merges the best pair; returns `(survivor, absorbed)`.
    pub fn step(&mut self) -> Option<(u32, u32)> {
        self.peek()?;
        let c = self.heap.pop().expect("peeked");
        let (a, b) = (c.a, c.b);
        let merged = RegionStats::merge(
            self.stats[a as usize].as_ref().expect("live"),
            self.stats[b as usize].as_ref().expect("live"),
        );
        self.stats[a as usize] = Some(merged);
        self.stats[b as usize] = None;
        self.owner[b as usize] = a;
        self.generation[a as usize] += 1;
        let moved = std::mem::take(&mut self.neighbors[b as usize]);
        for &n in &moved {
            self.neighbors[n as usize].remove(&b);
            if n != a {
                self.neighbors[n as usize].insert(a);
                self.neighbors[a as usize].insert(n);
            }
        }
        self.neighbors[a as usize].remove(&b);
        self.alive -= 1;
        let ns: Vec<u32> = self.neighbors[a as usize].iter().copied().collect();
        for n in ns {
            let c = self.candidate(a, n);
            self.heap.push(c);
        }
        Some((a, b))
    }

    fn resolve(&mut self, mut r: u32) -> u32 {
        let start = r;
        while self.owner[r as usize] != r {
            r = self.owner[r as usize];
        }
        self.owner[start as usize] = r;
        r
    }

    /// Current partition, densely relabeled in raster order.
    pub fn partition(&mut self) -> RegionPartition {
        let labels: Vec<u32> = (0..self.initial.len())
            .map(|p| {
                let r = self.initial[p];
                self.resolve(r)
            })
            .collect();
        RegionPartition::from_labels(self.width, self.height, labels)
            .expect("merger keeps a full-size label grid")
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub partition: RegionPartition,
    /// `(survivor, absorbed)` in input region ids, in merge order.
    pub merges: Vec<(u32, u32)>,
}

/// Greedily merges adjacent regions until `stop` is met.
pub fn hierarchical_merge(
    p: &RegionPartition,
    stats: Vec<RegionStats>,
    stop: Stop,
    weights: SimilarityWeights,
) -> Result<MergeOutcome> {
    if let Stop::TargetRegions(t) = stop {
        if t == 0 || t > p.num_regions() {
            return Err(SegmentError::InfeasibleTarget {
                target: t,
                current: p.num_regions(),
            });
        }
    }
    let mut m = Merger::new(p, stats, weights)?;
    let mut merges = Vec::new();
    loop {
        let go = match stop {
            Stop::TargetRegions(t) => m.region_count() > t && m.peek().is_some(),
            Stop::MinSimilarity(tau) => m.peek().is_some_and(|(_, _, s)| s >= tau),
        };
        if !go {
            break;
        }
        merges.push(m.step().expect("peeked a pair"));
    }
    Ok(MergeOutcome {
        partition: m.partition(),
        merges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub k: f64,
    pub sigma: f64,
    pub min_size: usize,
    pub stop: Stop,
    #[serde(default)]
    pub weights: SimilarityWeights,
}

/// Initial segmentation followed by hierarchical merging.
pub fn segment(r: &Raster<u8>, params: &SegmentParams) -> Result<RegionPartition> {
    let initial = initial_segmentation(r, params.k, params.sigma, params.min_size)?;
    let stats = region_stats(r, &initial)?;
    Ok(hierarchical_merge(&initial, stats, params.stop, params.weights)?.partition)
}

/// Writes region ids as a 16-bit grayscale PNG.
pub fn save_region_map(p: &RegionPartition, path: impl AsRef<Path>) -> Result<()> {
    if p.num_regions() > 1 << 16 {
        return Err(SegmentError::RegionOverflow(p.num_regions()));
    }
    let path = path.as_ref();
    let words: Vec<u16> = p.region_ids().iter().map(|&id| id as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        p.width() as u32,
        p.height() as u32,
        words,
    )
    .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| {
            SegmentError::Raster(RasterError::Write {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
}

pub fn load_region_map(path: impl AsRef<Path>) -> Result<RegionPartition> {
    match crate::raster::load_raster(path)? {
        crate::raster::DynRaster::U16(r) if r.bands() == 1 => RegionPartition::from_labels(
            r.width(),
            r.height(),
            r.into_samples().into_iter().map(u32::from).collect(),
        ),
        other => Err(SegmentError::InvalidPartition(format!(
            "region maps are 16-bit single-band, found {}-bit with {} bands",
            other.bit_depth(),
            other.bands()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves() -> Raster<u8> {
        Raster::from_fn(16, 16, 1, |x, _, _| if x < 8 { 0 } else { 255 }).unwrap()
    }

    #[test]
    fn constant_raster_is_one_region() {
        let r = Raster::<u8>::filled(20, 13, 3, 90).unwrap();
        for k in [0.1, 10.0, 1e6] {
            assert_eq!(
                initial_segmentation(&r, k, 0.8, 1).unwrap().num_regions(),
                1
            );
        }
    }

    #[test]
    fn two_halves() {
        // intra-half weights are 0; the cross edges weigh 255 > 0 + 10/128
        let p = initial_segmentation(&halves(), 10.0, 0.0, 1).unwrap();
        assert_eq!(p.num_regions(), 2);
        assert_eq!(p.sizes(), &[128, 128]);
        p.validate().unwrap();
    }

    #[test]
    fn huge_k_gives_one_region() {
        let r = Raster::<u8>::from_fn(12, 9, 1, |x, y, _| ((x * 97 + y * 31) % 256) as u8).unwrap();
        let k = 255.0 * 12.0 * 9.0;
        assert_eq!(
            initial_segmentation(&r, k, 0.0, 1).unwrap().num_regions(),
            1
        );
    }

    #[test]
    fn min_size_respected() {
        let r = Raster::<u8>::from_fn(40, 30, 3, |x, y, b| ((x * 31 + y * 17 + b * 7) % 256) as u8)
            .unwrap();
        let p = initial_segmentation(&r, 50.0, 0.5, 20).unwrap();
        assert!(p.num_regions() == 1 || p.sizes().iter().all(|&s| s >= 20));
        p.validate().unwrap();
    }

    fn stats(color: Vec<f64>, size: usize, bbox: BoundingBox) -> RegionStats {
        RegionStats {
            color,
            texture: vec![1.0],
            size,
            bbox,
        }
    }

    #[test]
    fn similarity_terms() {
        let bb = BoundingBox {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0,
        };
        let only = |c, t, s, f| SimilarityWeights {
            color: c,
            texture: t,
            size: s,
            fill: f,
        };
        let a = stats(vec![0.3, 0.7], 10, bb);
        let b = stats(vec![0.3, 0.7], 20, bb);
        assert!((similarity(&a, &b, 100, &only(1.0, 0.0, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((similarity(&a, &b, 100, &only(0.0, 0.0, 1.0, 0.0)) - 0.7).abs() < 1e-12);
        // two 2x1 regions exactly tiling a 2x2 box
        let top = stats(
            vec![1.0],
            2,
            BoundingBox {
                x0: 0,
                y0: 0,
                x1: 1,
                y1: 0,
            },
        );
        let bot = stats(
            vec![1.0],
            2,
            BoundingBox {
                x0: 0,
                y0: 1,
                x1: 1,
                y1: 1,
            },
        );
        assert_eq!(similarity(&top, &bot, 16, &only(0.0, 0.0, 0.0, 1.0)), 1.0);
    }

    #[test]
    fn merged_histogram_is_size_weighted() {
        let bb = BoundingBox {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0,
        };
        let m = RegionStats::merge(&stats(vec![1.0, 0.0], 1, bb), &stats(vec![0.0, 1.0], 3, bb));
        assert_eq!(m.color, vec![0.25, 0.75]);
        assert_eq!(m.size, 4);
    }

    fn checker(n: usize) -> (Raster<u8>, RegionPartition) {
        let r =
            Raster::<u8>::from_fn(n, n, 1, |x, y, _| ((x / 2 + y / 2) * 40 % 256) as u8).unwrap();
        let p = initial_segmentation(&r, 1.0, 0.0, 1).unwrap();
        (r, p)
    }

    #[test]
    fn merge_to_one_and_to_current() {
        let (r, p) = checker(8);
        let s = region_stats(&r, &p).unwrap();
        let one =
            hierarchical_merge(&p, s.clone(), Stop::TargetRegions(1), Default::default()).unwrap();
        assert_eq!(one.partition.num_regions(), 1);
        assert_eq!(one.merges.len(), p.num_regions() - 1);
        let same = hierarchical_merge(
            &p,
            s.clone(),
            Stop::TargetRegions(p.num_regions()),
            Default::default(),
        )
        .unwrap();
        assert_eq!(same.partition, p);
        assert!(matches!(
            hierarchical_merge(
                &p,
                s,
                Stop::TargetRegions(p.num_regions() + 1),
                Default::default()
            ),
            Err(SegmentError::InfeasibleTarget { .. })
        ));
    }

    #[test]
    fn stats_bbox_and_normalization() {
        let (r, p) = checker(6);
        for (i, s) in region_stats(&r, &p).unwrap().iter().enumerate() {
            assert!((s.color.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((s.texture.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for y in 0..6 {
                for x in 0..6 {
                    if p.region_at(x, y) as usize == i {
                        assert!(s.bbox.contains(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn validate_catches_disconnected_regions() {
        let p = RegionPartition::from_labels(3, 1, vec![0, 1, 0]).unwrap();
        assert!(p.validate().is_err());
        let p = RegionPartition::from_labels(3, 1, vec![7, 7, 2]).unwrap();
        assert_eq!(p.region_ids(), &[0, 0, 1]);
        p.validate().unwrap();
    }
}
