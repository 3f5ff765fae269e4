//! Regressors mapping per-cycle inputs to FCF, plus persistence and
//! feature importance.

pub mod cnn;
pub mod forest;
pub mod gbt;
pub mod linear;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycles::{FeatureFamily, FeatureMode, TrialFeatures, N_FEATURES};
use crate::config::{ConfigValue, Settings};
use crate::spectral::SpectrogramSample;

pub use cnn::{train_cnn, CnnConfig, CnnModel};
pub use forest::{train_random_forest, ForestConfig, ForestModel};
pub use gbt::{train_gbt, GbtConfig, GbtModel};
pub use linear::{train_ols, LinearModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("underdetermined: {samples} samples, need at least {needed}")]
    Underdetermined { samples: usize, needed: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("no training data")]
    EmptyData,
    #[error("too few samples: {got}, need at least {needed}")]
    TooFewSamples { got: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model is untrained or has no usable importance")]
    Untrained,
    #[error("unsupported for {0} models: {1}")]
    Unsupported(ModelFamily, &'static str),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Linear,
    Forest,
    Gbt,
    Cnn,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [ModelFamily::Linear, ModelFamily::Forest, ModelFamily::Gbt, ModelFamily::Cnn];

    pub fn is_tabular(self) -> bool {
        self != ModelFamily::Cnn
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Linear => "linear",
            ModelFamily::Forest => "forest",
            ModelFamily::Gbt => "gbt",
            ModelFamily::Cnn => "cnn",
        })
    }
}

impl FromStr for ModelFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| format!("unknown model family '{s}' (expected linear, forest, gbt or cnn)"))
    }
}

/// Samples × features matrix with FCF targets and the trial of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    x: Vec<f64>,
    n_features: usize,
    pub y: Vec<f64>,
    pub groups: Vec<String>,
    pub feature_names: Vec<String>,
}

impl TabularDataset {
    pub fn new(rows: Vec<Vec<f64>>, y: Vec<f64>, groups: Vec<String>, feature_names: Vec<String>) -> Result<Self, ModelError> {
        let p = feature_names.len();
        if rows.len() != y.len() || groups.len() != y.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} rows, {} targets, {} group labels",
                rows.len(),
                y.len(),
                groups.len()
            )));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
            return Err(ModelError::ShapeMismatch(format!("row {i} has {} values, expected {p}", r.len())));
        }
        if rows.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(ModelError::Numerical("non-finite value in dataset".into()));
        }
        Ok(Self { x: rows.concat(), n_features: p, y, groups, feature_names })
    }

    /// One row per cycle of every trial, in the given order.
    pub fn from_trials(trials: &[TrialFeatures], mode: FeatureMode) -> Result<Self, ModelError> {
        let (mut rows, mut y, mut groups) = (Vec::new(), Vec::new(), Vec::new());
        for t in trials {
            for (f, label) in t.features(mode).iter().zip(&t.fcf) {
                rows.push(f.to_vec());
                y.push(*label);
                groups.push(t.trial.clone());
            }
        }
        Self::new(rows, y, groups, crate::cycles::feature_names())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Rows whose index satisfies `keep`.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            x: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            n_features: self.n_features,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Every feature multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { x: self.x.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

/// Clamped FCF estimate alongside the raw model output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
}

impl Prediction {
    pub fn from_raw(raw: f64) -> Self {
        let value = raw.clamp(0.0, 1.0);
        Self { value, raw, clamped: value != raw }
    }
}

/// Family plus hyperparameters; everything needed to fit a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub mode: FeatureMode,
    pub forest: ForestConfig,
    pub gbt: GbtConfig,
    pub cnn: CnnConfig,
}

impl ModelSpec {
    pub fn new(family: ModelFamily) -> Self {
        Self {
            family,
            mode: FeatureMode::default(),
            forest: ForestConfig::default(),
            gbt: GbtConfig::default(),
            cnn: CnnConfig::default(),
        }
    }

    /// Fits on every cycle of `trials`.
    pub fn fit(&self, trials: &[TrialFeatures], seed: u64) -> Result<Model, ModelError> {
        if self.family == ModelFamily::Cnn {
            let samples = spectrogram_samples(trials)?;
            return Ok(Model::Cnn(Box::new(train_cnn(&samples, &self.cnn, seed)?)));
        }
        let data = TabularDataset::from_trials(trials, self.mode)?;
        Ok(match self.family {
            ModelFamily::Linear => Model::Linear(train_ols(&data)?),
            ModelFamily::Forest => Model::Forest(train_random_forest(&data, &self.forest, seed)?),
            ModelFamily::Gbt => Model::Gbt(train_gbt(&data, &self.gbt)?),
            ModelFamily::Cnn => unreachable!(),
        })
    }

    /// Settings that influence this family, as `section.field` pairs.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("model.family".to_string(), self.family.to_string());
        let fields = match self.family {
            ModelFamily::Linear => vec![],
            ModelFamily::Forest => prefixed(&self.forest),
            ModelFamily::Gbt => prefixed(&self.gbt),
            ModelFamily::Cnn => prefixed(&self.cnn),
        };
        out.extend(fields);
        if self.family.is_tabular() {
            out.insert("model.features".to_string(), self.mode.render());
        }
        out
    }
}

fn prefixed<S: Settings>(s: &S) -> Vec<(String, String)> {
    s.echo().into_iter().map(|(k, v)| (format!("{}.{k}", S::SECTION), v)).collect()
}

fn spectrogram_samples(trials: &[TrialFeatures]) -> Result<Vec<SpectrogramSample>, ModelError> {
    let mut out = Vec::new();
    for t in trials {
        out.extend(t.spectrogram_samples().ok_or_else(|| ModelError::MissingInput(format!("trial {} has no spectrograms", t.trial)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Forest(ForestModel),
    Gbt(GbtModel),
    Cnn(Box<CnnModel>),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "family", content = "model", rename_all = "lowercase")]
enum TabularBody {
    Linear(LinearModel),
    Forest(ForestModel),
    Gbt(GbtModel),
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: TabularBody,
}

const JSON_FORMAT: &str = "fcf-model";
const JSON_VERSION: u32 = 1;

impl Model {
    pub fn family(&self) -> ModelFamily {
        match self {
            Model::Linear(_) => ModelFamily::Linear,
            Model::Forest(_) => ModelFamily::Forest,
            Model::Gbt(_) => ModelFamily::Gbt,
            Model::Cnn(_) => ModelFamily::Cnn,
        }
    }

    pub fn n_features(&self) -> Option<usize> {
        match self {
            Model::Linear(m) => Some(m.weights.len()),
            Model::Forest(m) => Some(m.n_features),
            Model::Gbt(m) => Some(m.n_features),
            Model::Cnn(_) => None,
        }
    }

    /// Prediction from a feature row (tabular families).
    pub fn predict(&self, x: &[f64]) -> Result<Prediction, ModelError> {
        let p = self.n_features().ok_or(ModelError::Unsupported(ModelFamily::Cnn, "feature rows"))?;
        if x.len() != p {
            return Err(ModelError::ShapeMismatch(format!("{} features, model expects {p}", x.len())));
        }
        let raw = match self {
            Model::Linear(m) => m.predict_row(x),
            Model::Forest(m) => m.predict_row(x),
            Model::Gbt(m) => m.predict_row(x),
            Model::Cnn(_) => unreachable!(),
        };
        Ok(Prediction::from_raw(raw))
    }

    pub fn predict_dataset(&self, data: &TabularDataset) -> Result<Vec<Prediction>, ModelError> {
        (0..data.len()).map(|i| self.predict(data.row(i))).collect()
    }

    /// Predictions from per-cycle spectrograms (CNN family).
    pub fn predict_spectrograms(&self, samples: &[SpectrogramSample]) -> Result<Vec<Prediction>, ModelError> {
        match self {
            Model::Cnn(m) => Ok(m.predict_raw(samples)?.into_iter().map(Prediction::from_raw).collect()),
            other => Err(ModelError::Unsupported(other.family(), "spectrogram input")),
        }
    }

    /// One prediction per cycle of the trial.
    pub fn predict_trial(&self, trial: &TrialFeatures, mode: FeatureMode) -> Result<Vec<Prediction>, ModelError> {
        match self {
            Model::Cnn(_) => self.predict_spectrograms(&spectrogram_samples(std::slice::from_ref(trial))?),
            _ => trial.features(mode).iter().map(|row| self.predict(row)).collect(),
        }
    }

    /// Tabular models as versioned JSON; the CNN as a binary container.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let body = match self {
            Model::Cnn(m) => return m.write_to(w),
            Model::Linear(m) => TabularBody::Linear(m.clone()),
            Model::Forest(m) => TabularBody::Forest(m.clone()),
            Model::Gbt(m) => TabularBody::Gbt(m.clone()),
        };
        let saved = SavedModel { format: JSON_FORMAT.into(), version: JSON_VERSION, body };
        serde_json::to_writer(&mut w, &saved).map_err(|e| ModelError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.starts_with(cnn::CNN_MAGIC) {
            return Ok(Model::Cnn(Box::new(CnnModel::read_from(&bytes[..])?)));
        }
        let saved: SavedModel = serde_json::from_slice(&bytes).map_err(|e| ModelError::Format(e.to_string()))?;
        if saved.format != JSON_FORMAT || saved.version != JSON_VERSION {
            return Err(ModelError::Format(format!("unsupported model file {} v{}", saved.format, saved.version)));
        }
        Ok(match saved.body {
            TabularBody::Linear(m) => Model::Linear(m),
            TabularBody::Forest(m) => Model::Forest(m),
            TabularBody::Gbt(m) => Model::Gbt(m),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Canonical bytes of the saved form.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShare {
    pub feature: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyShare {
    pub family: FeatureFamily,
    pub share: f64,
}

/// Normalized importance, ranked descending (ties keep column order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub features: Vec<FeatureShare>,
    /// Empty unless the columns are the 16 per-cycle features.
    pub families: Vec<FamilyShare>,
}

impl Importance {
    pub fn top_family(&self) -> Option<FeatureFamily> {
        self.families.first().map(|f| f.family)
    }
}

/// Forest: impurity decrease per feature; gbt: split gain per feature.
/// Normalized to sum to one, in column order.
pub fn importance_shares(model: &Model) -> Result<Vec<f64>, ModelError> {
    let raw = match model {
        Model::Forest(m) => &m.importance,
        Model::Gbt(m) => &m.importance,
        other => return Err(ModelError::Unsupported(other.family(), "feature importance")),
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(ModelError::Untrained);
    }
    Ok(raw.iter().map(|v| v / total).collect())
}

impl Importance {
    /// Ranks column-ordered shares; families are filled for the 16
    /// per-cycle features.
    pub fn from_shares(shares: &[f64], names: &[String]) -> Result<Self, ModelError> {
        if names.len() != shares.len() {
            return Err(ModelError::ShapeMismatch(format!("{} names for {} features", names.len(), shares.len())));
        }
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| shares[b].total_cmp(&shares[a]));
        let features = order.iter().map(|&j| FeatureShare { feature: names[j].clone(), share: shares[j] }).collect();
        let mut families = Vec::new();
        if shares.len() == N_FEATURES {
            let mut fam = [0.0; 4];
            for (j, s) in shares.iter().enumerate() {
                fam[(j % 8) / 2] += s;
            }
            families = FeatureFamily::ALL.into_iter().zip(fam).map(|(family, share)| FamilyShare { family, share }).collect();
            families.sort_by(|a, b| b.share.total_cmp(&a.share));
        }
        Ok(Self { features, families })
    }
}

pub fn feature_importance(model: &Model, names: &[String]) -> Result<Importance, ModelError> {
    Importance::from_shares(&importance_shares(model)?, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, seed: u64, target: impl Fn(&[f64]) -> f64) -> TabularDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.gen_range(-30.0..30.0)).collect()).collect();
        let y = rows.iter().map(|r| target(r)).collect();
        TabularDataset::new(rows, y, vec!["t".into(); n], crate::cycles::feature_names()).unwrap()
    }

    #[test]
    fn dataset_validation() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(TabularDataset::new(vec![vec![1.0]], vec![0.0], vec!["t".into()], names.clone()).is_err());
        assert!(TabularDataset::new(vec![vec![1.0, f64::NAN]], vec![0.0], vec!["t".into()], names.clone()).is_err());
        assert!(TabularDataset::new(vec![vec![1.0, 2.0]], vec![0.0, 1.0], vec!["t".into()], names).is_err());
    }

    #[test]
    fn linear_prediction_and_clamp() {
        let m = Model::Linear(LinearModel { weights: vec![0.0; 16], intercept: 0.3, jittered: false });
        assert_eq!(m.predict(&[5.0; 16]).unwrap(), Prediction { value: 0.3, raw: 0.3, clamped: false });
        let p = Prediction::from_raw(1.07);
        assert_eq!((p.value, p.clamped), (1.0, true));
        assert!(matches!(m.predict(&[0.0; 3]), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let d = random_data(60, 1, |r| (r[0] / 60.0 + 0.5).clamp(0.0, 1.0));
        let models = [
            Model::Linear(train_ols(&d).unwrap()),
            Model::Forest(train_random_forest(&d, &ForestConfig { n_trees: 10, ..Default::default() }, 2).unwrap()),
            Model::Gbt(train_gbt(&d, &GbtConfig { rounds: 20, ..Default::default() }).unwrap()),
        ];
        for m in models {
            let back = Model::read_from(&m.to_bytes()[..]).unwrap();
            assert_eq!(back, m);
            for i in 0..d.len() {
                assert_eq!(back.predict(d.row(i)).unwrap().raw.to_bits(), m.predict(d.row(i)).unwrap().raw.to_bits());
            }
            assert_eq!(back.to_bytes(), m.to_bytes());
        }
    }

    #[test]
    fn importance_single_feature() {
        let d = random_data(150, 3, |r| if r[0] > 0.0 { 0.8 } else { 0.2 } + r[0] / 300.0);
        for m in [
            Model::Forest(train_random_forest(&d, &ForestConfig { n_trees: 30, ..Default::default() }, 4).unwrap()),
            Model::Gbt(train_gbt(&d, &GbtConfig::default()).unwrap()),
        ] {
            let imp = feature_importance(&m, &d.feature_names).unwrap();
            assert_eq!(imp.features[0].feature, "ch1_mnf_min");
            assert!(imp.features[0].share > 0.9, "{}", imp.features[0].share);
            assert!((imp.features.iter().map(|f| f.share).sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((imp.families.iter().map(|f| f.share).sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(imp.top_family(), Some(FeatureFamily::MNF));
        }
    }

    #[test]
    fn importance_argmax_scale_invariant() {
        let d = random_data(100, 5, |r| (0.5 + r[5] / 70.0 + r[9] / 200.0).clamp(0.0, 1.0));
        let cfg = ForestConfig { n_trees: 20, ..Default::default() };
        let a = feature_importance(&Model::Forest(train_random_forest(&d, &cfg, 6).unwrap()), &d.feature_names).unwrap();
        let b = feature_importance(&Model::Forest(train_random_forest(&d.scaled(37.5), &cfg, 6).unwrap()), &d.feature_names)
            .unwrap();
        assert_eq!(a.features[0].feature, b.features[0].feature);
    }

    #[test]
    fn importance_errors() {
        let d = random_data(30, 7, |_| 0.4);
        let m = Model::Forest(train_random_forest(&d, &ForestConfig { n_trees: 3, ..Default::default() }, 1).unwrap());
        assert!(matches!(feature_importance(&m, &d.feature_names), Err(ModelError::Untrained)));
        let lin = Model::Linear(train_ols(&d).unwrap());
        assert!(matches!(feature_importance(&lin, &d.feature_names), Err(ModelError::Unsupported(..))));
    }

    #[test]
    fn family_parse() {
        assert_eq!("gbt".parse::<ModelFamily>().unwrap(), ModelFamily::Gbt);
        assert!("svm".parse::<ModelFamily>().is_err());
    }
}
