//! Random forest and patch-grid classification of whole rasters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::features::{FeatureError, FeatureRecipe, FeatureVector};
use crate::fusion::{self, FusionError};
use crate::probmap::{ProbabilityError, ProbabilityMap};
use crate::raster::Raster;
use crate::sampling::{self, cells_along, SamplingError};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training features have zero dimensions")]
    SingleFeatureDimensionZero,
    #[error("expected {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} at sample {index} is outside 1..={num_classes}")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

pub type Result<T, E = ClassifyError> = std::result::Result<T, E>;

/// Row-major `n x d` feature matrix with labels in `1..=num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    num_features: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl TrainingSet {
    pub fn new(
        num_features: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(ClassifyError::EmptyTrainingSet);
        }
        if num_features == 0 {
            return Err(ClassifyError::SingleFeatureDimensionZero);
        }
        if features.len() != labels.len() * num_features {
            return Err(ClassifyError::DimensionMismatch {
                expected: labels.len() * num_features,
                found: features.len(),
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l == 0 || l as usize > num_classes)
        {
            return Err(ClassifyError::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(TrainingSet {
            num_features,
            num_classes,
            features,
            labels,
        })
    }

    pub fn from_vectors(
        vectors: &[FeatureVector],
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self> {
        let d = vectors.first().map_or(0, FeatureVector::len);
        if vectors.is_empty() {
            return Err(ClassifyError::EmptyTrainingSet);
        }
        let mut features = Vec::with_capacity(vectors.len() * d);
        for v in vectors {
            if v.len() != d {
                return Err(ClassifyError::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
            features.extend_from_slice(&v.values);
        }
        Self::new(d, num_classes, features, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    #[inline]
    fn value(&self, i: usize, f: usize) -> f64 {
        self.features[i * self.num_features + f]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features per split; `floor(sqrt(d))` when unset.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 16,
            min_leaf: 2,
            max_features: None,
        }
    }
}

impl ForestParams {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_leaf == 0 {
            return Err(ClassifyError::InvalidParams(format!(
                "n_trees {}, max_depth {}, min_leaf {} must all be >= 1",
                self.n_trees, self.max_depth, self.min_leaf
            )));
        }
        if self.max_features == Some(0) {
            return Err(ClassifyError::InvalidParams("max_features = 0".into()));
        }
        Ok(())
    }

    pub fn candidates_for(&self, d: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (d as f64).sqrt().floor() as usize)
            .clamp(1, d)
    }
}

/// How a node picks the features it may split on.
#[derive(Debug, Clone)]
pub enum CandidateFeatures {
    /// `count` features drawn uniformly without replacement at every node.
    Random { count: usize },
    /// Always the same set, in the given order.
    Fixed(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        distribution: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

struct Grower<'a> {
    ts: &'a TrainingSet,
    max_depth: usize,
    min_leaf: usize,
    candidates: &'a CandidateFeatures,
    nodes: Vec<Node>,
    scratch: Vec<(f64, u8)>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

/// Sum of per-child `n * gini`; lower is better.
#[inline]
fn weighted_gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    n as f64 - sq / n as f64
}

impl Grower<'_> {
    fn leaf(&mut self, counts: &[usize], n: usize) -> usize {
        let distribution = counts.iter().map(|&c| c as f64 / n as f64).collect();
        self.nodes.push(Node::Leaf { distribution });
        self.nodes.len() - 1
    }

    fn best_split(
        &mut self,
        idx: &[usize],
        parent: &[usize],
        features: &[usize],
    ) -> Option<BestSplit> {
        let n = idx.len();
        let c = self.ts.num_classes;
        let mut best: Option<BestSplit> = None;
        let mut left = vec![0usize; c];
        for &f in features {
            self.scratch.clear();
            self.scratch.extend(
                idx.iter()
                    .map(|&i| (self.ts.value(i, f), self.ts.labels[i])),
            );
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            left.iter_mut().for_each(|v| *v = 0);
            let mut right = parent.to_vec();
            for k in 0..n - 1 {
                let (v, l) = self.scratch[k];
                left[l as usize - 1] += 1;
                right[l as usize - 1] -= 1;
                let next = self.scratch[k + 1].0;
                let nl = k + 1;
                if nl < self.min_leaf || n - nl < self.min_leaf || v >= next {
                    continue;
                }
                let imp = weighted_gini(&left, nl) + weighted_gini(&right, n - nl);
                if best.as_ref().is_none_or(|b| imp < b.impurity) {
                    let mid = v + (next - v) / 2.0;
                    best = Some(BestSplit {
                        feature: f,
                        threshold: if mid < next { mid } else { v },
                        impurity: imp,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let mut counts = vec![0usize; self.ts.num_classes];
        for &i in idx.iter() {
            counts[self.ts.labels[i] as usize - 1] += 1;
        }
        let pure = counts.contains(&n);
        if pure || depth >= self.max_depth || n < 2 * self.min_leaf {
            return self.leaf(&counts, n);
        }
        let features = match self.candidates {
            CandidateFeatures::Random { count } => {
                rand::seq::index::sample(rng, self.ts.num_features, *count).into_vec()
            }
            CandidateFeatures::Fixed(f) => f.clone(),
        };
        let parent_imp = weighted_gini(&counts, n);
        let split = match self.best_split(idx, &counts, &features) {
            Some(s) if s.impurity < parent_imp - 1e-12 => s,
            _ => return self.leaf(&counts, n),
        };
        let mut mid = 0;
        for k in 0..n {
            if self.ts.value(idx[k], split.feature) <= split.threshold {
                idx.swap(k, mid);
                mid += 1;
            }
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            distribution: Vec::new(),
        });
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        at
    }
}

impl DecisionTree {
    /// Grows a CART tree on `sample` (indices into `ts`, repeats allowed)
    /// with Gini splits at midpoints between consecutive distinct values.
    pub fn fit(
        ts: &TrainingSet,
        sample: &[usize],
        max_depth: usize,
        min_leaf: usize,
        candidates: &CandidateFeatures,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut g = Grower {
            ts,
            max_depth,
            min_leaf,
            candidates,
            nodes: Vec::new(),
            scratch: Vec::with_capacity(sample.len()),
        };
        let mut idx = sample.to_vec();
        g.grow(&mut idx, 0, rng);
        DecisionTree { nodes: g.nodes }
    }

    pub fn leaf_distribution(&self, x: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { distribution } => return distribution,
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn from_nodes(nodes: Vec<Node>) -> Self {
        DecisionTree { nodes }
    }
}

/// Anything that maps a feature vector to category probabilities.
pub trait ProbabilisticClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn num_features(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub seed: u64,
    num_features: usize,
    num_classes: usize,
    trees: Vec<DecisionTree>,
}

impl ForestModel {
    pub fn from_trees(
        params: ForestParams,
        num_features: usize,
        num_classes: usize,
        trees: Vec<DecisionTree>,
    ) -> Self {
        ForestModel {
            params,
            seed: 0,
            num_features,
            num_classes,
            trees,
        }
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }
}

/// Deterministic per-tree generator: same master seed, one stream per tree.
pub fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

/// Bagged Gini trees. Tree `t` draws its bootstrap and candidate features
/// from [`tree_rng`]`(seed, t)`, so the result does not depend on `exec`.
pub fn train_forest(
    ts: &TrainingSet,
    params: &ForestParams,
    seed: u64,
    exec: Execution,
) -> Result<ForestModel> {
    params.validate()?;
    let n = ts.len();
    let candidates = CandidateFeatures::Random {
        count: params.candidates_for(ts.num_features),
    };
    let trees = exec.map(params.n_trees, |t| {
        let mut rng = tree_rng(seed, t);
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        DecisionTree::fit(
            ts,
            &sample,
            params.max_depth,
            params.min_leaf,
            &candidates,
            &mut rng,
        )
    });
    Ok(ForestModel {
        params: params.clone(),
        seed,
        num_features: ts.num_features,
        num_classes: ts.num_classes,
        trees,
    })
}

impl ProbabilisticClassifier for ForestModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn num_features(&self) -> usize {
        self.num_features
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.num_features {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.num_features,
                found: x.len(),
            });
        }
        let mut acc = vec![0.0; self.num_classes];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.leaf_distribution(x)) {
                *a += p;
            }
        }
        let k = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }
}

/// Fraction of training rows whose argmax prediction matches the label.
pub fn accuracy<M: ProbabilisticClassifier + ?Sized>(m: &M, ts: &TrainingSet) -> Result<f64> {
    let mut hits = 0;
    for i in 0..ts.len() {
        let p = m.predict_proba(ts.row(i))?;
        let pred = p
            .iter()
            .enumerate()
            .fold(0, |b, (k, v)| if *v > p[b] { k } else { b });
        hits += (pred + 1 == ts.labels[i] as usize) as usize;
    }
    Ok(hits as f64 / ts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub scales: Vec<usize>,
    /// Grid stride; the smallest scale when unset.
    pub base_stride: Option<usize>,
    #[serde(default)]
    pub execution: Execution,
}

impl ClassifyOptions {
    pub fn new(scales: Vec<usize>) -> Self {
        ClassifyOptions {
            scales,
            base_stride: None,
            execution: Execution::default(),
        }
    }

    pub fn with_execution(mut self, e: Execution) -> Self {
        self.execution = e;
        self
    }

    pub fn stride(&self) -> Result<usize> {
        let s = match self.base_stride {
            Some(s) => s,
            None => *self
                .scales
                .iter()
                .min()
                .ok_or_else(|| ClassifyError::InvalidParams("no scales".into()))?,
        };
        if s == 0 || self.scales.contains(&0) {
            return Err(ClassifyError::InvalidParams("zero scale or stride".into()));
        }
        Ok(s)
    }
}

/// Center of the pixels owned by cell `(col, row)`.
pub fn cell_center(
    col: usize,
    row: usize,
    stride: usize,
    width: usize,
    height: usize,
) -> (usize, usize) {
    let (x0, x1) = sampling::cell_span(col, stride, width);
    let (y0, y1) = sampling::cell_span(row, stride, height);
    (x0 + (x1 - x0) / 2, y0 + (y1 - y0) / 2)
}

/// One probability map per scale, all on the same base-stride grid.
pub fn classify_raster_per_scale<M: ProbabilisticClassifier + ?Sized>(
    r: &Raster<u8>,
    model: &M,
    recipe: &FeatureRecipe,
    opts: &ClassifyOptions,
) -> Result<Vec<ProbabilityMap>> {
    let stride = opts.stride()?;
    let (w, h) = (r.width(), r.height());
    let (gw, gh) = (cells_along(w, stride), cells_along(h, stride));
    let scales = &opts.scales;
    // cell-major: rows[cell][scale]
    let rows = opts
        .execution
        .try_map(gw * gh, |cell| -> Result<Vec<Vec<f64>>> {
            let center = cell_center(cell % gw, cell / gw, stride, w, h);
            scales
                .iter()
                .map(|&s| {
                    let win = sampling::window_at(center, s, w, h)?;
                    let f = recipe.featurize_window(r, &win)?;
                    model.predict_proba(&f.values)
                })
                .collect()
        })?;
    (0..scales.len())
        .map(|k| {
            let per_scale: Vec<Vec<f64>> = rows.iter().map(|c| c[k].clone()).collect();
            Ok(ProbabilityMap::from_rows(gw, gh, stride, &per_scale)?)
        })
        .collect()
}

/// Per-cell probabilities averaged over `opts.scales`.
pub fn classify_raster<M: ProbabilisticClassifier + ?Sized>(
    r: &Raster<u8>,
    model: &M,
    recipe: &FeatureRecipe,
    opts: &ClassifyOptions,
) -> Result<ProbabilityMap> {
    let maps = classify_raster_per_scale(r, model, recipe, opts)?;
    Ok(fusion::sum_scales(&maps)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u8 + 1;
            let off = if c == 1 { -2.0 } else { 2.0 };
            f.push(off + rng.random_range(-1.0..1.0));
            f.push(rng.random_range(-1.0..1.0));
            l.push(c);
        }
        TrainingSet::new(2, 2, f, l).unwrap()
    }

    #[test]
    fn training_set_validation() {
        assert!(matches!(
            TrainingSet::new(2, 2, vec![], vec![]),
            Err(ClassifyError::EmptyTrainingSet)
        ));
        assert!(matches!(
            TrainingSet::new(0, 2, vec![], vec![1]),
            Err(ClassifyError::SingleFeatureDimensionZero)
        ));
        assert!(matches!(
            TrainingSet::new(1, 2, vec![0.0], vec![3]),
            Err(ClassifyError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn single_category_is_one_hot() {
        let ts = TrainingSet::new(1, 3, vec![0.0, 1.0, 2.0, 3.0], vec![2; 4]).unwrap();
        let m = train_forest(&ts, &ForestParams::default(), 1, Execution::Sequential).unwrap();
        for t in m.trees() {
            assert_eq!(t.nodes().len(), 1);
        }
        assert_eq!(m.predict_proba(&[1.5]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_tree_average() {
        let leaf = |d: Vec<f64>| DecisionTree::from_nodes(vec![Node::Leaf { distribution: d }]);
        let m = ForestModel::from_trees(
            ForestParams::default(),
            1,
            2,
            vec![leaf(vec![1.0, 0.0]), leaf(vec![0.0, 1.0])],
        );
        assert_eq!(m.predict_proba(&[0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            m.predict_proba(&[0.0, 1.0]),
            Err(ClassifyError::DimensionMismatch {
                expected: 1,
                found: 2
            })
        ));
    }

    #[test]
    fn seeded_training_is_reproducible_and_exec_independent() {
        let ts = blobs(200, 4);
        let p = ForestParams {
            n_trees: 10,
            ..Default::default()
        };
        let a = train_forest(&ts, &p, 9, Execution::Sequential).unwrap();
        let b = train_forest(&ts, &p, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = train_forest(&ts, &p, 10, Execution::Sequential).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn separable_blobs_fit() {
        let ts = blobs(400, 11);
        let p = ForestParams {
            n_trees: 50,
            max_depth: 10,
            ..Default::default()
        };
        let m = train_forest(&ts, &p, 5, Execution::Parallel).unwrap();
        assert!(accuracy(&m, &ts).unwrap() >= 0.99);
    }

    #[test]
    fn thresholds_are_midpoints() {
        let ts = TrainingSet::new(1, 2, vec![1.0, 2.0, 4.0, 8.0], vec![1, 1, 2, 2]).unwrap();
        let mut rng = tree_rng(0, 0);
        let t = DecisionTree::fit(
            &ts,
            &[0, 1, 2, 3],
            4,
            1,
            &CandidateFeatures::Fixed(vec![0]),
            &mut rng,
        );
        match &t.nodes()[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 3.0),
            n => panic!("expected split, got {n:?}"),
        }
    }

    #[test]
    fn invalid_params() {
        let ts = blobs(10, 0);
        let p = ForestParams {
            n_trees: 0,
            ..Default::default()
        };
        assert!(matches!(
            train_forest(&ts, &p, 0, Execution::Sequential),
            Err(ClassifyError::InvalidParams(_))
        ));
    }

    #[test]
    fn cell_centers() {
        assert_eq!(cell_center(0, 0, 56, 512, 512), (28, 28));
        // last cell owns 504..512
        assert_eq!(cell_center(9, 9, 56, 512, 512), (508, 508));
    }
}
