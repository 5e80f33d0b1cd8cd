//! Pixel-based random forest baseline over VNIR band vectors.
//!
//! Training data is split into contiguous shards after a seeded shuffle;
//! each shard is trained by its own batch of information-gain trees on
//! bootstrap resamples, and all trees are pooled into one voting classifier.
//! The batching is a data-sharding device (a memory workaround), not
//! boosting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Raster, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{Labels, FORMAT_VERSION, IGNORE_LABEL};

pub const FEATURE_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfConfig {
    pub batches: usize,
    pub trees_per_batch: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: usize,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> RfConfig {
        // Only tree count, batching, and the gain criterion are dictated;
        // the rest are conventional defaults, overridable from the CLI.
        RfConfig {
            batches: 8,
            trees_per_batch: 400,
            max_depth: 20,
            min_leaf: 5,
            features_per_split: 2, // ceil(sqrt(3))
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Split { band: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
    Leaf { histogram: [u64; NUM_CLASSES] },
}

impl TreeNode {
    fn leaf_for(&self, x: &[f64]) -> &[u64; NUM_CLASSES] {
        match self {
            TreeNode::Leaf { histogram } => histogram,
            TreeNode::Split { band, threshold, left, right } => {
                if x[*band] <= *threshold {
                    left.leaf_for(x)
                } else {
                    right.leaf_for(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub class_count: usize,
    pub feature_count: usize,
    pub config: RfConfig,
    pub trees: Vec<TreeNode>,
    /// Set when training saw a single class and produced a constant
    /// classifier.
    pub degenerate: bool,
}

impl ForestModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("forest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ForestModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ForestModel = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if model.version != FORMAT_VERSION {
            return Err(Error::FormatError {
                offset: 0,
                message: format!("forest version {} unsupported, expected {FORMAT_VERSION}", model.version),
            });
        }
        Ok(model)
    }

    /// Per-pixel vote: each tree contributes its leaf's class distribution
    /// (histogram normalized to unit mass, so no tree outweighs another);
    /// argmax of the summed votes with lowest-index tie-break. A pure
    /// per-pixel map — no spatial context.
    pub fn predict_pixels<T: Scalar>(&self, raster: &Raster<T>) -> Result<Labels> {
        if raster.bands.channels() != self.feature_count {
            return Err(Error::BandCountMismatch {
                expected: self.feature_count,
                found: raster.bands.channels(),
            });
        }
        let (h, w) = (raster.height(), raster.width());
        let mut out = Labels::filled(1, h, w, 0);
        let mut x = vec![0.0f64; self.feature_count];
        for y in 0..h {
            for col in 0..w {
                for (b, xb) in x.iter_mut().enumerate() {
                    *xb = raster.bands.at(0, b, y, col).to_f64();
                }
                out.data[y * w + col] = self.vote(&x) as u8;
            }
        }
        Ok(out)
    }

    pub fn vote(&self, x: &[f64]) -> usize {
        let mut votes = [0.0f64; NUM_CLASSES];
        for tree in &self.trees {
            let hist = tree.leaf_for(x);
            let total: u64 = hist.iter().sum();
            if total == 0 {
                continue;
            }
            for (v, &h) in votes.iter_mut().zip(hist) {
                *v += h as f64 / total as f64;
            }
        }
        let mut best = 0usize;
        for k in 1..NUM_CLASSES {
            if votes[k] > votes[best] {
                best = k;
            }
        }
        best
    }
}

/// Shannon entropy of a class histogram, in bits.
pub fn entropy_bits(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in hist {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// Information gain of a candidate split, in bits:
/// H(parent) − |L|/|P|·H(L) − |R|/|P|·H(R). An empty child yields `None`
/// (candidate rejected, not an error).
pub fn info_gain(parent: &[u64], left: &[u64], right: &[u64]) -> Option<f64> {
    let np: u64 = parent.iter().sum();
    let nl: u64 = left.iter().sum();
    let nr: u64 = right.iter().sum();
    if nl == 0 || nr == 0 {
        return None;
    }
    debug_assert_eq!(np, nl + nr);
    let wl = nl as f64 / np as f64;
    let wr = nr as f64 / np as f64;
    Some(entropy_bits(parent) - wl * entropy_bits(left) - wr * entropy_bits(right))
}

struct TreeBuilder<'a> {
    features: &'a [[f64; FEATURE_COUNT]],
    labels: &'a [u8],
    cfg: &'a RfConfig,
}

impl TreeBuilder<'_> {
    fn histogram(&self, idx: &[u32]) -> [u64; NUM_CLASSES] {
        let mut hist = [0u64; NUM_CLASSES];
        for &i in idx {
            hist[self.labels[i as usize] as usize] += 1;
        }
        hist
    }

    fn build(&self, idx: &mut Vec<u32>, depth: usize, rng: &mut CounterRng) -> TreeNode {
        let hist = self.histogram(idx);
        let classes_present = hist.iter().filter(|&&c| c > 0).count();
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf || classes_present <= 1 {
            return TreeNode::Leaf { histogram: hist };
        }

        // Sample features without replacement for this node.
        let mut bands: Vec<usize> = (0..FEATURE_COUNT).collect();
        rng.shuffle(&mut bands);
        bands.truncate(self.cfg.features_per_split.min(FEATURE_COUNT));
        bands.sort_unstable(); // fixed evaluation order for determinism

        let mut best: Option<(f64, usize, f64)> = None; // (gain, band, threshold)
        for &band in &bands {
            let mut vals: Vec<f64> = idx.iter().map(|&i| self.features[i as usize][band]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            if vals.len() < 2 {
                continue;
            }
            // candidate thresholds: midpoints between consecutive distinct
            // values (exact search; only 3 features exist)
            for pair in vals.windows(2) {
                let thr = 0.5 * (pair[0] + pair[1]);
                let mut left = [0u64; NUM_CLASSES];
                let mut right = [0u64; NUM_CLASSES];
                for &i in idx.iter() {
                    let cls = self.labels[i as usize] as usize;
                    if self.features[i as usize][band] <= thr {
                        left[cls] += 1;
                    } else {
                        right[cls] += 1;
                    }
                }
                if left.iter().sum::<u64>() < self.cfg.min_leaf as u64
                    || right.iter().sum::<u64>() < self.cfg.min_leaf as u64
                {
                    continue;
                }
                if let Some(gain) = info_gain(&hist, &left, &right) {
                    if best.map_or(gain > 1e-12, |(g, _, _)| gain > g) {
                        best = Some((gain, band, thr));
                    }
                }
            }
        }

        let Some((_, band, thr)) = best else {
            return TreeNode::Leaf { histogram: hist };
        };
        let (mut li, mut ri): (Vec<u32>, Vec<u32>) =
            idx.iter().partition(|&&i| self.features[i as usize][band] <= thr);
        idx.clear();
        idx.shrink_to_fit();
        let left = self.build(&mut li, depth + 1, rng);
        let right = self.build(&mut ri, depth + 1, rng);
        TreeNode::Split { band, threshold: thr, left: Box::new(left), right: Box::new(right) }
    }
}

/// Flatten a scene into per-pixel (VNIR band vector, label) training rows,
/// skipping unlabeled pixels. `max_pixels` caps the row count with a
/// seeded uniform subsample.
pub fn scene_pixels<T: Scalar>(
    scene: &crate::data::ScenePair<T>,
    max_pixels: Option<usize>,
    rng: &mut CounterRng,
) -> Result<(Vec<[f64; FEATURE_COUNT]>, Vec<u8>)> {
    if scene.vnir.bands.channels() != FEATURE_COUNT {
        return Err(Error::BandCountMismatch {
            expected: FEATURE_COUNT,
            found: scene.vnir.bands.channels(),
        });
    }
    let (h, w) = (scene.vnir.height(), scene.vnir.width());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = scene.labels.at(0, y, x);
            if l == IGNORE_LABEL {
                continue;
            }
            let mut row = [0.0f64; FEATURE_COUNT];
            for (b, v) in row.iter_mut().enumerate() {
                *v = scene.vnir.bands.at(0, b, y, x).to_f64();
            }
            features.push(row);
            labels.push(l);
        }
    }
    if let Some(cap) = max_pixels {
        if features.len() > cap {
            let mut order: Vec<u32> = (0..features.len() as u32).collect();
            rng.shuffle(&mut order);
            order.truncate(cap);
            order.sort_unstable();
            features = order.iter().map(|&i| features[i as usize]).collect();
            labels = order.iter().map(|&i| labels[i as usize]).collect();
        }
    }
    Ok((features, labels))
}

/// Train a pooled forest: seeded shuffle, contiguous shards, bootstrap
/// resample per tree, exact information-gain split search.
pub fn train_forest(
    features: &[[f64; FEATURE_COUNT]],
    labels: &[u8],
    cfg: &RfConfig,
) -> Result<ForestModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::DegenerateData(format!(
            "{} feature vectors vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut hist = [0u64; NUM_CLASSES];
    for &l in labels {
        if l as usize >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { label: l, classes: NUM_CLASSES });
        }
        hist[l as usize] += 1;
    }
    let classes_present = hist.iter().filter(|&&c| c > 0).count();

    let mut rng = CounterRng::new(cfg.seed);
    let mut model = ForestModel {
        version: FORMAT_VERSION,
        class_count: NUM_CLASSES,
        feature_count: FEATURE_COUNT,
        config: cfg.clone(),
        trees: Vec::new(),
        degenerate: classes_present < 2,
    };

    if model.degenerate {
        // Single-class data: a constant classifier, flagged for the caller
        // to warn about.
        model.trees.push(TreeNode::Leaf { histogram: hist });
        return Ok(model);
    }

    let mut order: Vec<u32> = (0..features.len() as u32).collect();
    rng.shuffle(&mut order);

    let builder = TreeBuilder { features, labels, cfg };
    let shard_size = features.len().div_ceil(cfg.batches);
    for shard in order.chunks(shard_size) {
        let mut tree_rng = rng.split(model.trees.len() as u64 + 1);
        for _ in 0..cfg.trees_per_batch {
            let mut boot: Vec<u32> =
                (0..shard.len()).map(|_| shard[tree_rng.below(shard.len())]).collect();
            model.trees.push(builder.build(&mut boot, 0, &mut tree_rng));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small_cfg(seed: u64) -> RfConfig {
        RfConfig { batches: 2, trees_per_batch: 10, seed, ..Default::default() }
    }

    #[test]
    fn info_gain_hand_examples() {
        // pure parent: every split has zero gain
        let g = info_gain(&[8, 0], &[5, 0], &[3, 0]).unwrap();
        assert!(g.abs() < 1e-12);
        // 50/50 parent into pure children: 1 bit
        let g = info_gain(&[4, 4], &[4, 0], &[0, 4]).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        // parent (3,1) -> (2,0)+(1,1): 0.8113 - 0.5 = 0.3113 bits
        let g = info_gain(&[3, 1], &[2, 0], &[1, 1]).unwrap();
        assert!((g - 0.3112781244591328).abs() < 1e-10, "{g}");
        // empty child rejected
        assert_eq!(info_gain(&[3, 1], &[3, 1], &[0, 0]), None);
    }

    #[test]
    fn separable_data_trains_to_perfect_accuracy() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        // two clusters with a margin between them
        for i in 0..100 {
            features.push([i as f64 / 100.0, 0.0, 0.0]);
            labels.push(0);
            features.push([1.5 + i as f64 / 100.0, 0.0, 0.0]);
            labels.push(1);
        }
        // min_leaf 1: the boundary sample must be separable exactly
        let cfg = RfConfig { min_leaf: 1, ..small_cfg(1) };
        let model = train_forest(&features, &labels, &cfg).unwrap();
        let correct = features
            .iter()
            .zip(&labels)
            .filter(|(x, &l)| model.vote(&x[..]) == l as usize)
            .count();
        assert_eq!(correct, 200);
        assert!(!model.degenerate);
    }

    #[test]
    fn tree_count_matches_config() {
        let mut rng = CounterRng::new(2);
        let features: Vec<[f64; 3]> =
            (0..400).map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        let labels: Vec<u8> = (0..400).map(|_| rng.below(4) as u8).collect();
        let cfg = RfConfig { batches: 8, trees_per_batch: 25, max_depth: 4, seed: 2, ..Default::default() };
        let model = train_forest(&features, &labels, &cfg).unwrap();
        assert_eq!(model.trees.len(), 200);
        assert!(model.trees.iter().all(|t| t.depth() <= 4));
    }

    #[test]
    fn random_labels_stay_near_chance() {
        // labels independent of features -> held-out accuracy near the
        // majority-class share (60/40 prior)
        let mut rng = CounterRng::new(3);
        let gen = |rng: &mut CounterRng, n: usize| -> (Vec<[f64; 3]>, Vec<u8>) {
            let f = (0..n)
                .map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)])
                .collect();
            let l = (0..n).map(|_| u8::from(rng.uniform(0.0, 1.0) > 0.6)).collect();
            (f, l)
        };
        let (train_f, train_l) = gen(&mut rng, 3000);
        let (test_f, test_l) = gen(&mut rng, 3000);
        let cfg = RfConfig { batches: 4, trees_per_batch: 25, max_depth: 8, seed: 3, ..Default::default() };
        let model = train_forest(&train_f, &train_l, &cfg).unwrap();
        let correct = test_f
            .iter()
            .zip(&test_l)
            .filter(|(x, &l)| model.vote(&x[..]) == l as usize)
            .count();
        let acc = correct as f64 / 3000.0;
        assert!((acc - 0.6).abs() < 0.05, "chance-level accuracy {acc}");
    }

    #[test]
    fn degenerate_single_class_is_constant() {
        let features = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.2, 0.9]];
        let labels = vec![2u8, 2, 2];
        let model = train_forest(&features, &labels, &small_cfg(4)).unwrap();
        assert!(model.degenerate);
        assert_eq!(model.vote(&[9.0, 9.0, 9.0]), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = CounterRng::new(5);
        let features: Vec<[f64; 3]> =
            (0..300).map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        let labels: Vec<u8> = features.iter().map(|f| u8::from(f[0] + f[1] > 1.0)).collect();
        let a = train_forest(&features, &labels, &small_cfg(6)).unwrap();
        let b = train_forest(&features, &labels, &small_cfg(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_is_pixelwise() {
        let mut rng = CounterRng::new(7);
        let features: Vec<[f64; 3]> =
            (0..300).map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        let labels: Vec<u8> = features.iter().map(|f| u8::from(f[2] > 0.5) + 1).collect();
        let model = train_forest(&features, &labels, &small_cfg(8)).unwrap();

        // two pixels with identical band vectors always get identical labels
        let mut bands = Tensor::<f32>::zeros(1, 3, 2, 3);
        for b in 0..3 {
            for x in 0..3 {
                let v = rng.uniform(0.0, 1.0) as f32;
                bands.set(0, b, 0, x, v);
                bands.set(0, b, 1, 2 - x, v); // second row is the first, reversed
            }
        }
        let raster = Raster::new(bands, 5.0).unwrap();
        let out = model.predict_pixels(&raster).unwrap();
        for x in 0..3 {
            assert_eq!(out.at(0, 0, x), out.at(0, 1, 2 - x));
        }

        // band count mismatch rejected
        let bad = Raster::new(Tensor::<f32>::zeros(1, 2, 2, 2), 5.0).unwrap();
        assert!(matches!(
            model.predict_pixels(&bad),
            Err(Error::BandCountMismatch { .. })
        ));
    }

    #[test]
    fn forest_serialization_round_trips() {
        let features = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0],
                            [0.2, 0.3, 0.0], [0.9, 0.8, 0.0], [0.1, 0.9, 0.0], [0.8, 0.1, 0.0]];
        let labels = vec![0u8, 1, 0, 1, 0, 1, 0, 1];
        let cfg = RfConfig { batches: 1, trees_per_batch: 5, min_leaf: 1, seed: 9, ..Default::default() };
        let model = train_forest(&features, &labels, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.json");
        model.save(&path).unwrap();
        assert_eq!(ForestModel::load(&path).unwrap(), model);

        // version mismatch refused
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":3");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(ForestModel::load(&path), Err(Error::FormatError { .. })));
    }

    #[test]
    fn extra_agreeing_trees_do_not_flip_confident_votes() {
        let mut rng = CounterRng::new(10);
        let features: Vec<[f64; 3]> =
            (0..400).map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        let labels: Vec<u8> = features.iter().map(|f| u8::from(f[0] > 0.5) * 3).collect();
        let small = train_forest(&features, &labels, &small_cfg(11)).unwrap();
        let big_cfg = RfConfig { batches: 2, trees_per_batch: 30, seed: 11, ..Default::default() };
        let big = train_forest(&features, &labels, &big_cfg).unwrap();
        // deep inside each region both models agree with the labels
        for x in [[0.05, 0.5, 0.5], [0.95, 0.5, 0.5]] {
            let want = usize::from(x[0] > 0.5) * 3;
            assert_eq!(small.vote(&x), want);
            assert_eq!(big.vote(&x), want);
        }
    }
}
