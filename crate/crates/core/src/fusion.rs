//! Painting probability grids to masks, multi-scale summation and
//! per-region majority voting.

use thiserror::Error;

use crate::exec::Execution;
use crate::probmap::{ProbabilityError, ProbabilityMap};
use crate::raster::LabelMask;
use crate::segment::RegionPartition;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("probability grid {grid_w}x{grid_h} at stride {stride} does not match a {width}x{height} extent")]
    ExtentMismatch {
        grid_w: usize,
        grid_h: usize,
        stride: usize,
        width: usize,
        height: usize,
    },
    #[error("probability maps disagree on grid shape, stride or class count")]
    GridMismatch,
    #[error("no probability maps to combine")]
    NoMaps,
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

fn check_extent(pm: &ProbabilityMap, width: usize, height: usize) -> Result<()> {
    if pm.covers(width, height) {
        Ok(())
    } else {
        Err(FusionError::ExtentMismatch {
            grid_w: pm.grid_w(),
            grid_h: pm.grid_h(),
            stride: pm.cell_stride(),
            width,
            height,
        })
    }
}

/// Owning cell index of every pixel, row-major.
fn pixel_cells(
    pm: &ProbabilityMap,
    width: usize,
    height: usize,
) -> impl Iterator<Item = usize> + '_ {
    let s = pm.cell_stride();
    let gw = pm.grid_w();
    (0..height).flat_map(move |y| (0..width).map(move |x| (y / s) * gw + x / s))
}

/// Paints every pixel with the argmax of its owning cell.
pub fn rasterize(pm: &ProbabilityMap, width: usize, height: usize) -> Result<LabelMask> {
    check_extent(pm, width, height)?;
    let cell_labels: Vec<u8> = (0..pm.num_cells()).map(|c| pm.argmax(c)).collect();
    let labels = pixel_cells(pm, width, height)
        .map(|c| cell_labels[c])
        .collect();
    Ok(
        LabelMask::new(width, height, pm.num_classes() as u8, labels)
            .expect("argmax labels are within 1..=C"),
    )
}

/// Per-cell mean of several maps on the same grid.
pub fn sum_scales(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or(FusionError::NoMaps)?;
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let same = |m: &ProbabilityMap| {
        m.grid_w() == first.grid_w()
            && m.grid_h() == first.grid_h()
            && m.cell_stride() == first.cell_stride()
            && m.num_classes() == first.num_classes()
    };
    if !maps.iter().all(same) {
        return Err(FusionError::GridMismatch);
    }
    let k = maps.len() as f64;
    let probs = (0..first.probs().len())
        .map(|i| (maps.iter().map(|m| m.probs()[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    Ok(ProbabilityMap::new(
        first.grid_w(),
        first.grid_h(),
        first.cell_stride(),
        first.num_classes(),
        probs,
    )?)
}

/// Per-region pixel vote counts and summed probability mass.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTally {
    pub num_classes: usize,
    /// `num_regions x C`, row-major.
    pub counts: Vec<u64>,
    pub mass: Vec<f64>,
}

impl VoteTally {
    pub fn counts(&self, region: usize) -> &[u64] {
        &self.counts[region * self.num_classes..(region + 1) * self.num_classes]
    }

    pub fn mass(&self, region: usize) -> &[f64] {
        &self.mass[region * self.num_classes..(region + 1) * self.num_classes]
    }

    /// Most votes, then larger mass, then lower id. 1-based.
    pub fn winner(&self, region: usize) -> u8 {
        let (c, m) = (self.counts(region), self.mass(region));
        let mut best = 0;
        for k in 1..self.num_classes {
            if c[k] > c[best] || (c[k] == c[best] && m[k] > m[best]) {
                best = k;
            }
        }
        best as u8 + 1
    }
}

/// Tallies each pixel's argmax label into its region. Work is split into
/// row strips whose partial tallies are added together.
pub fn tally(
    partition: &RegionPartition,
    pm: &ProbabilityMap,
    exec: Execution,
) -> Result<VoteTally> {
    let (w, h) = (partition.width(), partition.height());
    check_extent(pm, w, h)?;
    let c = pm.num_classes();
    let r = partition.num_regions();
    let s = pm.cell_stride();
    let gw = pm.grid_w();
    let cell_labels: Vec<u8> = (0..pm.num_cells()).map(|k| pm.argmax(k)).collect();
    let strip = 64;
    let partials = exec.map(h.div_ceil(strip), |k| {
        let mut counts = vec![0u64; r * c];
        let mut mass = vec![0f64; r * c];
        for y in k * strip..((k + 1) * strip).min(h) {
            for x in 0..w {
                let region = partition.region_at(x, y) as usize;
                let cell = (y / s) * gw + x / s;
                counts[region * c + cell_labels[cell] as usize - 1] += 1;
                for (m, &p) in mass[region * c..(region + 1) * c]
                    .iter_mut()
                    .zip(pm.cell(cell))
                {
                    *m += p as f64;
                }
            }
        }
        (counts, mass)
    });
    let mut counts = vec![0u64; r * c];
    let mut mass = vec![0f64; r * c];
    for (pc, pmass) in partials {
        counts.iter_mut().zip(pc).for_each(|(a, b)| *a += b);
        mass.iter_mut().zip(pmass).for_each(|(a, b)| *a += b);
    }
    Ok(VoteTally {
        num_classes: c,
        counts,
        mass,
    })
}

/// Relabels every region with its modal pixel label.
pub fn vote(partition: &RegionPartition, pm: &ProbabilityMap) -> Result<LabelMask> {
    vote_with(partition, pm, Execution::default())
}

pub fn vote_with(
    partition: &RegionPartition,
    pm: &ProbabilityMap,
    exec: Execution,
) -> Result<LabelMask> {
    let t = tally(partition, pm, exec)?;
    let winners: Vec<u8> = (0..partition.num_regions()).map(|r| t.winner(r)).collect();
    let labels = partition
        .region_ids()
        .iter()
        .map(|&r| winners[r as usize])
        .collect();
    Ok(LabelMask::new(
        partition.width(),
        partition.height(),
        pm.num_classes() as u8,
        labels,
    )
    .expect("winners are within 1..=C"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_grid(gw: usize, gh: usize, stride: usize, c: usize, label: usize) -> ProbabilityMap {
        let mut p = vec![0f32; gw * gh * c];
        for cell in 0..gw * gh {
            p[cell * c + label - 1] = 1.0;
        }
        ProbabilityMap::new(gw, gh, stride, c, p).unwrap()
    }

    #[test]
    fn rasterize_uniform() {
        let pm = one_hot_grid(2, 2, 4, 5, 3);
        let m = rasterize(&pm, 8, 7).unwrap();
        assert!(m.labels().iter().all(|&l| l == 3));
    }

    #[test]
    fn rasterize_tie_goes_low() {
        let pm = ProbabilityMap::new(1, 1, 2, 5, vec![0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(rasterize(&pm, 2, 2).unwrap().labels(), &[1, 1, 1, 1]);
    }

    #[test]
    fn rasterize_extent_mismatch() {
        let pm = one_hot_grid(2, 2, 4, 5, 1);
        assert!(matches!(
            rasterize(&pm, 9, 8),
            Err(FusionError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn rasterize_follows_cell_ownership() {
        let pm = ProbabilityMap::new(2, 1, 3, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(rasterize(&pm, 5, 1).unwrap().labels(), &[1, 1, 1, 2, 2]);
    }

    #[test]
    fn three_scale_sum() {
        let m = |a: f32, b: f32| ProbabilityMap::new(1, 1, 4, 2, vec![a, b]).unwrap();
        let s = sum_scales(&[m(0.2, 0.8), m(0.5, 0.5), m(0.6, 0.4)]).unwrap();
        assert!((s.cell(0)[0] - 1.3 / 3.0).abs() < 1e-6);
        assert!((s.cell(0)[1] - 1.7 / 3.0).abs() < 1e-6);
        assert_eq!(s.argmax(0), 2);
        assert_eq!(sum_scales(&[m(0.2, 0.8)]).unwrap(), m(0.2, 0.8));
    }

    #[test]
    fn stride_mismatch() {
        let a = one_hot_grid(2, 2, 4, 2, 1);
        let b = one_hot_grid(2, 2, 5, 2, 1);
        assert!(matches!(
            sum_scales(&[a, b]),
            Err(FusionError::GridMismatch)
        ));
        assert!(matches!(sum_scales(&[]), Err(FusionError::NoMaps)));
    }

    #[test]
    fn winner_tie_breaks() {
        let t = VoteTally {
            num_classes: 5,
            counts: vec![0, 4, 4, 0, 0],
            mass: vec![0.0, 3.1, 3.4, 0.0, 0.0],
        };
        assert_eq!(t.winner(0), 3);
        let t = VoteTally {
            num_classes: 3,
            counts: vec![2, 0, 2],
            mass: vec![1.0, 0.0, 1.0],
        };
        assert_eq!(t.winner(0), 1);
        let t = VoteTally {
            num_classes: 5,
            counts: vec![5, 0, 0, 0, 3],
            mass: vec![1.0, 0.0, 0.0, 0.0, 7.0],
        };
        assert_eq!(t.winner(0), 1);
    }

    #[test]
    fn majority_vote_on_a_region() {
        // one 8-pixel region: 5 pixels vote built-up (1), 3 vote waters (5)
        let part = RegionPartition::from_labels(8, 1, vec![0; 8]).unwrap();
        let mut p = Vec::new();
        for i in 0..8 {
            let mut v = vec![0f32; 5];
            v[if i < 5 { 0 } else { 4 }] = 1.0;
            p.extend(v);
        }
        let pm = ProbabilityMap::new(8, 1, 1, 5, p).unwrap();
        assert_eq!(vote(&part, &pm).unwrap().labels(), &[1; 8]);
    }
}
