use serde::{Deserialize, Serialize};

use super::linear::stable_mean;
use super::tree::{Criterion, Node, TreeBuilder};
use super::{ModelError, TabularDataset};
use crate::impl_settings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L1 penalty on leaf gradient sums.
    pub alpha: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self { rounds: 200, max_depth: 5, learning_rate: 0.05, alpha: 0.5, lambda: 2.0 }
    }
}

impl_settings!(GbtConfig, "gbt", [rounds, max_depth, learning_rate, alpha, lambda]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub config: GbtConfig,
    pub n_features: usize,
    pub base: f64,
    pub trees: Vec<Node>,
    /// Training MSE before the first round.
    pub initial_loss: f64,
    /// Training MSE after each round.
    pub loss_log: Vec<f64>,
    /// Total split gain per feature.
    pub importance: Vec<f64>,
}

impl GbtModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base + self.config.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}

/// Squared-loss boosting with unit hessians: gradient `g = ŷ − y`, leaf
/// weight `−soft(G, α) / (H + λ)`. Stops early once a round can no longer
/// change the fit.
pub fn train_gbt(data: &TabularDataset, cfg: &GbtConfig) -> Result<GbtModel, ModelError> {
    if data.len() < 2 {
        return Err(ModelError::EmptyData);
    }
    if !(cfg.learning_rate > 0.0) || cfg.alpha < 0.0 || cfg.lambda < 0.0 {
        return Err(ModelError::InvalidConfig("gbt needs learning_rate > 0, alpha >= 0, lambda >= 0".into()));
    }
    let n = data.len();
    let base = stable_mean(data.y.iter().copied());
    let mut pred = vec![base; n];
    let criterion = Criterion::Regularized { alpha: cfg.alpha, lambda: cfg.lambda };
    let mut trees = Vec::with_capacity(cfg.rounds);
    let mut loss_log = Vec::with_capacity(cfg.rounds);
    let mut importance = vec![0.0; data.n_features()];
    let initial_loss = mse(&pred, &data.y);
    for _ in 0..cfg.rounds {
        let grad: Vec<f64> = pred.iter().zip(&data.y).map(|(p, y)| p - y).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut builder = TreeBuilder::new(data, &grad, criterion, cfg.max_depth);
        let tree = builder.build(&mut idx);
        if matches!(tree, Node::Leaf { value } if value == 0.0) {
            break;
        }
        for (acc, v) in importance.iter_mut().zip(&builder.importance) {
            *acc += v;
        }
        for (i, p) in pred.iter_mut().enumerate() {
            *p += cfg.learning_rate * tree.predict(data.row(i));
        }
        loss_log.push(mse(&pred, &data.y));
        trees.push(tree);
    }
    Ok(GbtModel {
        config: cfg.clone(),
        n_features: data.n_features(),
        base,
        trees,
        initial_loss,
        loss_log,
        importance,
    })
}
