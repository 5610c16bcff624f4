//! Random-forest regression from scratch: bagged CART trees grown by
//! exhaustive variance-reduction split search over midpoint thresholds.
//!
//! The split rule is deliberately pinned so that independent implementations
//! can reproduce a tree bit for bit:
//!
//! * candidate thresholds are midpoints between consecutive distinct sorted
//!   values of a feature; samples with `x <= threshold` go left;
//! * the split score is `sum_l^2/n_l + sum_r^2/n_r`, with `sum_l` accumulated
//!   over samples sorted by `(value, row)` and `sum_r = total - sum_l`, the
//!   total taken over the node's rows in their incoming order;
//! * ties break toward the lowest feature index, then the lowest threshold
//!   (strictly-greater comparison while scanning features and thresholds in
//!   ascending order);
//! * recursion stops at `max_depth`, when no split leaves both children with
//!   `min_samples_leaf` rows, or when the node's labels are constant.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::featureset::{Dataset, FeatureConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot fit on an empty dataset")]
    EmptyDataset,
    #[error("invalid hyperparameter {name}: {reason}")]
    BadHyperparam { name: &'static str, reason: String },
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file error: {0}")]
    Format(String),
}

/// Forest hyperparameters. `mtry = None` resolves to `ceil(p / 3)` features
/// per split for `p` masked features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestHyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestHyperparams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 25,
            min_samples_leaf: 5,
            mtry: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestHyperparams {
    fn validate(&self, p: usize) -> Result<usize, ModelError> {
        if self.n_trees < 1 {
            return Err(ModelError::BadHyperparam {
                name: "n_trees",
                reason: "must be at least 1".into(),
            });
        }
        if self.min_samples_leaf < 1 {
            return Err(ModelError::BadHyperparam {
                name: "min_samples_leaf",
                reason: "must be at least 1".into(),
            });
        }
        let mtry = self.mtry.unwrap_or_else(|| p.div_ceil(3));
        if mtry < 1 || mtry > p {
            return Err(ModelError::BadHyperparam {
                name: "mtry",
                reason: format!("must lie in 1..={p}, got {mtry}"),
            });
        }
        Ok(mtry)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
    Leaf { mean: f64, n: u32 },
}

/// A CART regression tree stored as a flat node array with the root at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { mean, .. } => return *mean,
                Node::Split { feature, threshold, left, right } => {
                    idx = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    y: &'a [f64],
    p: usize,
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    rng: ChaCha12Rng,
    nodes: Vec<Node>,
}

impl<'a> TreeBuilder<'a> {
    /// Grow a tree over `rows` (a multiset of dataset row indices). `sorted`
    /// holds, per feature, the same multiset ordered by `(value, row)`.
    fn build(&mut self, rows: Vec<u32>, sorted: Vec<Vec<u32>>, depth: usize) -> u32 {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| self.y[r as usize]).sum();

        let make_leaf = |nodes: &mut Vec<Node>| {
            nodes.push(Node::Leaf { mean: total / n as f64, n: n as u32 });
            (nodes.len() - 1) as u32
        };

        if depth >= self.max_depth || n < 2 * self.min_leaf || self.labels_constant(&rows) {
            return make_leaf(&mut self.nodes);
        }

        let candidates = self.sample_features();
        let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, score)
        for &f in &candidates {
            let list = &sorted[f];
            let mut sum_l = 0.0;
            for i in 0..n - 1 {
                let row = list[i] as usize;
                sum_l += self.y[row];
                let v = self.x[row * self.p + f];
                let v_next = self.x[list[i + 1] as usize * self.p + f];
                if v == v_next {
                    continue;
                }
                let n_l = i + 1;
                let n_r = n - n_l;
                if n_l < self.min_leaf || n_r < self.min_leaf {
                    continue;
                }
                let sum_r = total - sum_l;
                let score = sum_l * sum_l / n_l as f64 + sum_r * sum_r / n_r as f64;
                if best.map_or(true, |(_, _, s)| score > s) {
                    best = Some((f, 0.5 * (v + v_next), score));
                }
            }
        }

        let Some((feature, threshold, _)) = best else {
            return make_leaf(&mut self.nodes);
        };

        // Stable partition of every per-feature list and of the canonical
        // row list, preserving their internal orders.
        let goes_left =
            |r: u32| self.x[r as usize * self.p + feature] <= threshold;
        let (rows_l, rows_r): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| goes_left(r));
        let mut sorted_l = Vec::with_capacity(self.p);
        let mut sorted_r = Vec::with_capacity(self.p);
        for list in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = list.iter().partition(|&&r| goes_left(r));
            sorted_l.push(l);
            sorted_r.push(r);
        }

        let idx = self.nodes.len() as u32;
        self.nodes.push(Node::Split { feature: feature as u32, threshold, left: 0, right: 0 });
        let left = self.build(rows_l, sorted_l, depth + 1);
        let right = self.build(rows_r, sorted_r, depth + 1);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[idx as usize] {
            *l = left;
            *r = right;
        }
        idx
    }

    fn labels_constant(&self, rows: &[u32]) -> bool {
        let first = self.y[rows[0] as usize];
        rows.iter().all(|&r| self.y[r as usize] == first)
    }

    /// `mtry` distinct feature indices, ascending.
    fn sample_features(&mut self) -> Vec<usize> {
        if self.mtry == self.p {
            return (0..self.p).collect();
        }
        let mut picked = rand::seq::index::sample(&mut self.rng, self.p, self.mtry).into_vec();
        picked.sort_unstable();
        picked
    }
}

fn fit_tree(
    x: &[f64],
    y: &[f64],
    p: usize,
    rows: Vec<u32>,
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    rng: ChaCha12Rng,
) -> RegressionTree {
    let mut sorted = Vec::with_capacity(p);
    for f in 0..p {
        let mut list = rows.clone();
        list.sort_unstable_by(|&a, &b| {
            let va = x[a as usize * p + f];
            let vb = x[b as usize * p + f];
            va.total_cmp(&vb).then_with(|| a.cmp(&b))
        });
        sorted.push(list);
    }
    let mut builder =
        TreeBuilder { x, y, p, max_depth, min_leaf, mtry, rng, nodes: Vec::new() };
    builder.build(rows, sorted, 0);
    RegressionTree { nodes: builder.nodes }
}

/// Provenance of a trained forest. The timestamp is the time span of the
/// training data itself, which keeps model files reproducible run to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub dataset_sha256: String,
    pub n_samples: usize,
    pub t_first_s: f64,
    pub t_last_s: f64,
    pub scenario_ids: Vec<String>,
    pub oob_mae: Option<f64>,
}

/// A trained random forest for one feature configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
    pub feature_config: FeatureConfig,
    pub hyperparams: ForestHyperparams,
    pub manifest: TrainingManifest,
}

fn dataset_sha256(ds: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for v in &ds.x {
        hasher.update(v.to_le_bytes());
    }
    for v in &ds.y {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Train a forest on a (projected) dataset: each tree fits a bootstrap
/// resample with per-node feature subsampling. Tree randomness derives from
/// the master seed by tree index, so the result is independent of the
/// parallel training schedule.
pub fn fit(train: &Dataset, hp: &ForestHyperparams) -> Result<Forest, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let p = train.width();
    let mtry = hp.validate(p)?;
    if train.x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("features"));
    }
    if train.y.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("labels"));
    }
    let n = train.len();

    let trees: Vec<RegressionTree> = (0..hp.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha12Rng::seed_from_u64(hp.seed);
            rng.set_stream(t as u64 + 1);
            let rows: Vec<u32> = if hp.bootstrap {
                (0..n).map(|_| rng.random_range(0..n) as u32).collect()
            } else {
                (0..n as u32).collect()
            };
            fit_tree(&train.x, &train.y, p, rows, hp.max_depth, hp.min_samples_leaf, mtry, rng)
        })
        .collect();

    // Out-of-bag error, informational only. Requires replaying the bootstrap
    // draws, which is cheap next to the tree growing itself.
    let oob_mae = if hp.bootstrap {
        let mut sums = vec![0.0f64; n];
        let mut hits = vec![0u32; n];
        for (t, tree) in trees.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(hp.seed);
            rng.set_stream(t as u64 + 1);
            let mut in_bag = vec![false; n];
            for _ in 0..n {
                in_bag[rng.random_range(0..n)] = true;
            }
            for i in 0..n {
                if !in_bag[i] {
                    sums[i] += tree.predict(train.row(i));
                    hits[i] += 1;
                }
            }
        }
        let mut err = 0.0;
        let mut covered = 0usize;
        for i in 0..n {
            if hits[i] > 0 {
                err += (sums[i] / hits[i] as f64 - train.y[i]).abs();
                covered += 1;
            }
        }
        (covered > 0).then(|| err / covered as f64)
    } else {
        None
    };

    let t_first = train.meta.first().map_or(0.0, |m| m.t_s);
    let t_last = train.meta.last().map_or(0.0, |m| m.t_s);
    let mut scenario_ids = train.scenario_ids.clone();
    scenario_ids.sort();
    Ok(Forest {
        trees,
        feature_config: train.config.clone(),
        hyperparams: hp.clone(),
        manifest: TrainingManifest {
            dataset_sha256: dataset_sha256(train),
            n_samples: n,
            t_first_s: t_first,
            t_last_s: t_last,
            scenario_ids,
            oob_mae,
        },
    })
}

impl Forest {
    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        let expected = self.feature_config.width();
        if x.len() != expected {
            return Err(ModelError::DimensionMismatch { expected, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("prediction input"));
        }
        Ok(())
    }

    /// Mean of the per-tree leaf means.
    pub fn predict(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_input(x)?;
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_per_tree(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        Ok(self.trees.iter().map(|t| t.predict(x)).collect())
    }

    /// Sample standard deviation of the per-tree predictions; 0 for a
    /// single-tree forest.
    pub fn predict_spread(&self, x: &[f64]) -> Result<f64, ModelError> {
        let per_tree = self.predict_per_tree(x)?;
        let k = per_tree.len();
        if k < 2 {
            return Ok(0.0);
        }
        let mean = per_tree.iter().sum::<f64>() / k as f64;
        let var = per_tree.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        Ok(var.sqrt())
    }

    pub fn predict_batch(&self, ds: &Dataset) -> Result<Vec<f64>, ModelError> {
        (0..ds.len()).map(|i| self.predict(ds.row(i))).collect()
    }
}

// ---------------------------------------------------------------------------
// Versioned JSON persistence
// ---------------------------------------------------------------------------

/// Flat node encoding: splits are `[feature, threshold, left, right]`, leaves
/// `[-1, mean, n, 0]`.
type NodeRow = (i64, f64, u32, u32);

#[derive(Serialize, Deserialize)]
struct ForestFile {
    format_version: u32,
    hyperparams: ForestHyperparams,
    feature_config: FeatureConfigFile,
    num_cells: usize,
    manifest: TrainingManifest,
    trees: Vec<Vec<NodeRow>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FeatureConfigFile {
    Preset(String),
    Mask { mask: Vec<bool> },
}

const FOREST_FORMAT_VERSION: u32 = 1;

impl Forest {
    pub fn save_json(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        }
        let trees = self
            .trees
            .iter()
            .map(|t| {
                t.nodes
                    .iter()
                    .map(|n| match n {
                        Node::Split { feature, threshold, left, right } => {
                            (*feature as i64, *threshold, *left, *right)
                        }
                        Node::Leaf { mean, n } => (-1, *mean, *n, 0),
                    })
                    .collect()
            })
            .collect();
        let file = ForestFile {
            format_version: FOREST_FORMAT_VERSION,
            hyperparams: self.hyperparams.clone(),
            feature_config: if self.feature_config.id == "custom" {
                FeatureConfigFile::Mask { mask: self.feature_config.mask() }
            } else {
                FeatureConfigFile::Preset(self.feature_config.id.clone())
            },
            num_cells: self.feature_config.layout.num_cells,
            manifest: self.manifest.clone(),
            trees,
        };
        let body =
            serde_json::to_string(&file).map_err(|e| ModelError::Format(e.to_string()))?;
        fs::write(path, body).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load_json(path: &Path) -> Result<Forest, ModelError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        let file: ForestFile =
            serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format_version != FOREST_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format_version {} (expected {FOREST_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let layout = crate::featureset::FeatureLayout::new(file.num_cells);
        let feature_config = match &file.feature_config {
            FeatureConfigFile::Preset(name) => FeatureConfig::preset(name, layout)
                .map_err(|e| ModelError::Format(e.to_string()))?,
            FeatureConfigFile::Mask { mask } => FeatureConfig::custom(mask, layout)
                .map_err(|e| ModelError::Format(e.to_string()))?,
        };
        let p = feature_config.width();
        let mut trees = Vec::with_capacity(file.trees.len());
        for rows in &file.trees {
            let mut nodes = Vec::with_capacity(rows.len());
            for &(tag, val, a, b) in rows {
                let node = if tag < 0 {
                    Node::Leaf { mean: val, n: a }
                } else {
                    if tag as usize >= p
                        || a as usize >= rows.len()
                        || b as usize >= rows.len()
                    {
                        return Err(ModelError::Format("node index out of range".into()));
                    }
                    Node::Split { feature: tag as u32, threshold: val, left: a, right: b }
                };
                nodes.push(node);
            }
            if nodes.is_empty() {
                return Err(ModelError::Format("empty tree".into()));
            }
            trees.push(RegressionTree { nodes });
        }
        Ok(Forest {
            trees,
            feature_config,
            hyperparams: file.hyperparams,
            manifest: file.manifest,
        })
    }

    /// Short content id for logs and prediction outputs.
    pub fn model_id(&self) -> String {
        format!(
            "rf-{}-{}t-{}",
            self.feature_config.id,
            self.hyperparams.n_trees,
            &self.manifest.dataset_sha256[..8.min(self.manifest.dataset_sha256.len())]
        )
    }
}
