use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::stable_mean;
use super::tree::{Criterion, Node, TreeBuilder};
use super::{ModelError, TabularDataset};
use crate::impl_settings;
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried at each split; `None` tries all of them.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 200, max_depth: 8, max_features: None, bootstrap: true }
    }
}

impl_settings!(ForestConfig, "forest", [n_trees, max_depth, max_features, bootstrap]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestTree {
    pub seed: u64,
    pub root: Node,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub config: ForestConfig,
    pub seed: u64,
    pub n_features: usize,
    pub trees: Vec<ForestTree>,
    /// Total squared-error decrease per feature over all trees.
    pub importance: Vec<f64>,
}

impl ForestModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        stable_mean(self.trees.iter().map(|t| t.root.predict(x)))
    }
}

/// Bagged variance-reduction trees. Tree `i` draws its bootstrap sample and
/// feature subsets from `derive_seed(seed, i)`.
pub fn train_random_forest(data: &TabularDataset, cfg: &ForestConfig, seed: u64) -> Result<ForestModel, ModelError> {
    if data.len() < 2 {
        return Err(ModelError::EmptyData);
    }
    if cfg.n_trees == 0 {
        return Err(ModelError::InvalidConfig("forest needs at least one tree".into()));
    }
    let n = data.len();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut importance = vec![0.0; data.n_features()];
    for t in 0..cfg.n_trees {
        let tree_seed = derive_seed(seed, t as u64);
        let mut rng = rng_from(tree_seed);
        let mut idx: Vec<usize> = if cfg.bootstrap { (0..n).map(|_| rng.gen_range(0..n)).collect() } else { (0..n).collect() };
        let mut builder = TreeBuilder::new(data, &data.y, Criterion::Variance, cfg.max_depth);
        builder.max_features = cfg.max_features;
        builder.rng = Some(&mut rng);
        let root = builder.build(&mut idx);
        for (acc, v) in importance.iter_mut().zip(&builder.importance) {
            *acc += v;
        }
        trees.push(ForestTree { seed: tree_seed, root });
    }
    Ok(ForestModel { config: cfg.clone(), seed, n_features: data.n_features(), trees, importance })
}
