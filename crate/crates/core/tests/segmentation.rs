use landcover::segment::{
    self, hierarchical_merge, initial_segmentation, region_stats, similarity, Merger,
    RegionPartition, SegmentError, SimilarityWeights, Stop,
};
use landcover::Raster;
use proptest::prelude::*;

fn blocks(w: usize, h: usize, cell: usize, levels: &[u8]) -> Raster<u8> {
    Raster::from_fn(w, h, 3, |x, y, b| {
        let i = (x / cell + 3 * (y / cell)) % levels.len();
        levels[i].wrapping_add(b as u8 * 20)
    })
    .unwrap()
}

fn small_raster() -> impl Strategy<Value = Raster<u8>> {
    (4usize..14, 4usize..14, 1usize..4).prop_flat_map(|(w, h, b)| {
        prop::collection::vec(prop::sample::select(vec![0u8, 60, 130, 250]), w * h * b)
            .prop_map(move |s| Raster::new(w, h, b, s).unwrap())
    })
}

#[test]
fn huge_k_scales_with_band_count() {
    for bands in 1..=3 {
        let r = Raster::from_fn(12, 10, bands, |x, y, _| ((x * 37 + y * 91) % 256) as u8).unwrap();
        let k = 255.0 * (bands as f64).sqrt() * 120.0;
        assert_eq!(
            initial_segmentation(&r, k, 0.0, 1).unwrap().num_regions(),
            1
        );
    }
}

#[test]
fn region_map_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("segments.png");
    let r = blocks(40, 30, 5, &[10, 90, 170, 240]);
    let p = initial_segmentation(&r, 1.0, 0.0, 1).unwrap();
    assert!(p.num_regions() > 20);
    segment::save_region_map(&p, &path).unwrap();
    assert_eq!(segment::load_region_map(&path).unwrap(), p);
}

#[test]
fn eight_bit_image_is_not_a_region_map() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgb.png");
    landcover::raster::save_png(&blocks(4, 4, 2, &[1, 2]), &path).unwrap();
    assert!(matches!(
        segment::load_region_map(&path),
        Err(SegmentError::InvalidPartition(_))
    ));
}

#[test]
fn infeasible_targets() {
    let r = blocks(12, 12, 4, &[0, 200]);
    let p = initial_segmentation(&r, 1.0, 0.0, 1).unwrap();
    let n = p.num_regions();
    for t in [0, n + 1] {
        let stats = region_stats(&r, &p).unwrap();
        assert!(matches!(
            hierarchical_merge(
                &p,
                stats,
                Stop::TargetRegions(t),
                SimilarityWeights::default()
            ),
            Err(SegmentError::InfeasibleTarget { .. })
        ));
    }
}

#[test]
fn high_threshold_merges_nothing() {
    let r = blocks(12, 12, 4, &[0, 200, 90]);
    let p = initial_segmentation(&r, 1.0, 0.0, 1).unwrap();
    let stats = region_stats(&r, &p).unwrap();
    let out = hierarchical_merge(
        &p,
        stats,
        Stop::MinSimilarity(4.01),
        SimilarityWeights::default(),
    )
    .unwrap();
    assert!(out.merges.is_empty());
    assert_eq!(out.partition, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn initial_partition_is_valid(r in small_raster(), k in 1.0f64..500.0, min_size in 1usize..8) {
        let p = initial_segmentation(&r, k, 0.5, min_size).unwrap();
        prop_assert_eq!(p.validate(), Ok(()));
        if r.width() * r.height() >= min_size {
            prop_assert!(p.sizes().iter().all(|&s| s >= min_size));
        }
    }

    #[test]
    fn merging_keeps_partitions_valid(r in small_raster()) {
        let p = initial_segmentation(&r, 5.0, 0.0, 1).unwrap();
        let stats = region_stats(&r, &p).unwrap();
        let n = (r.width() * r.height()) as f64;
        let w = SimilarityWeights::default();
        for a in 0..stats.len() {
            for b in 0..stats.len() {
                let s = similarity(&stats[a], &stats[b], n as usize, &w);
                prop_assert!((0.0..=w.total()).contains(&s));
                prop_assert_eq!(s, similarity(&stats[b], &stats[a], n as usize, &w));
            }
        }
        let mut m = Merger::new(&p, stats, w).unwrap();
        let mut regions = m.region_count();
        while let Some((a, b)) = m.step() {
            prop_assert!(a < b);
            prop_assert_eq!(m.region_count(), regions - 1);
            regions -= 1;
            let q = m.partition();
            prop_assert_eq!(q.validate(), Ok(()));
            prop_assert_eq!(q.num_regions(), regions);
        }
        prop_assert_eq!(regions, 1);
    }

    #[test]
    fn target_regions_is_hit_exactly(r in small_raster(), frac in 0.0f64..1.0) {
        let p = initial_segmentation(&r, 5.0, 0.0, 1).unwrap();
        let target = 1 + ((p.num_regions() - 1) as f64 * frac) as usize;
        let stats = region_stats(&r, &p).unwrap();
        let out = hierarchical_merge(&p, stats, Stop::TargetRegions(target), SimilarityWeights::default()).unwrap();
        prop_assert_eq!(out.partition.num_regions(), target);
        prop_assert_eq!(out.merges.len(), p.num_regions() - target);
    }

    #[test]
    fn relabeling_is_dense_and_order_preserving(labels in prop::collection::vec(0u32..6, 1..60)) {
        let w = labels.len();
        let p = RegionPartition::from_labels(w, 1, labels.clone()).unwrap();
        let mut seen = Vec::new();
        for (&raw, &id) in labels.iter().zip(p.region_ids()) {
            match seen.iter().position(|&s| s == raw) {
                Some(i) => prop_assert_eq!(id as usize, i),
                None => {
                    prop_assert_eq!(id as usize, seen.len());
                    seen.push(raw);
                }
            }
        }
        prop_assert_eq!(p.sizes().iter().sum::<usize>(), w);
    }
}
