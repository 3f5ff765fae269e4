//! Metrics and evaluation harnesses: leave-one-trial-out, cross-task and
//! SRF/FCF agreement, with JSON/CSV reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cycles::{FeatureMode, TaskKind, TrialFeatures};
use crate::dsp::Muscle;
use crate::models::{importance_shares, Importance, Model, ModelError, ModelFamily, ModelSpec, Prediction};
use crate::rng::derive_named;

/// Cross-task RMSE (percent) above which a model is flagged as failing to
/// regress.
pub const FAILURE_TO_REGRESS: f64 = 100.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {pred} predictions vs {truth} targets")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("empty input")]
    Empty,
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("need at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error("trials span several subjects: {0:?}")]
    MixedSubjects(Vec<String>),
    #[error("channel mismatch: model has {model}, trial {trial} has {got}")]
    ChannelMismatch { trial: String, model: usize, got: usize },
    #[error("trial {0} has no SRF scores")]
    MissingSrf(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Root mean squared error in percent of the FCF range.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    check_lengths(pred, truth)?;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(100.0 * mse.sqrt())
}

pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    check_lengths(pred, truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if !(ss_tot > 0.0) {
        return Err(EvalError::ZeroVariance("targets"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, min: 0.0, max: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, std, min, max, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub cycle: usize,
    pub truth: f64,
    pub predicted: f64,
    pub raw: f64,
    pub clamped: bool,
}

/// Scores on one held-out (or cross-task test) trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub trial: String,
    pub task: TaskKind,
    /// Percent, from clamped predictions.
    pub rmse: f64,
    /// Percent, from raw model outputs.
    pub rmse_raw: f64,
    pub r_squared: Option<f64>,
    pub clamped: usize,
    pub train_trials: Vec<String>,
    /// SHA-256 of the serialized model used for this trial.
    pub model_digest: String,
    pub predictions: Vec<PredictionPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Loto,
    CrossTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub subject: String,
    pub family: ModelFamily,
    pub train_task: TaskKind,
    pub test_task: TaskKind,
    pub seed: u64,
    /// Fold seeds (LOTO) or the training seed (cross-task), by trial.
    pub seeds: BTreeMap<String, u64>,
    pub config: BTreeMap<String, String>,
    pub folds: Vec<TrialScore>,
    pub rmse: Summary,
    pub rmse_raw: Summary,
    pub r_squared: Summary,
    pub clamped: usize,
    pub n_predictions: usize,
    pub importance: Option<Importance>,
    pub failed_to_regress: bool,
    pub notes: Vec<String>,
}

impl EvalReport {
    fn assemble(
        kind: ReportKind,
        head: ReportHead,
        folds: Vec<TrialScore>,
        importance: Option<Importance>,
        mut notes: Vec<String>,
    ) -> Self {
        let rm: Vec<f64> = folds.iter().map(|f| f.rmse).collect();
        let raw: Vec<f64> = folds.iter().map(|f| f.rmse_raw).collect();
        let r2: Vec<f64> = folds.iter().filter_map(|f| f.r_squared).collect();
        let rmse = Summary::of(&rm);
        let rmse_raw = Summary::of(&raw);
        let failed_to_regress = kind == ReportKind::CrossTask && rmse_raw.mean > FAILURE_TO_REGRESS;
        if failed_to_regress {
            notes.push(format!("failed to regress: mean raw RMSE {:.1}% exceeds {FAILURE_TO_REGRESS}%", rmse_raw.mean));
        }
        Self {
            kind,
            subject: head.subject,
            family: head.family,
            train_task: head.train_task,
            test_task: head.test_task,
            seed: head.seed,
            seeds: head.seeds,
            config: head.config,
            clamped: folds.iter().map(|f| f.clamped).sum(),
            n_predictions: folds.iter().map(|f| f.predictions.len()).sum(),
            folds,
            rmse,
            rmse_raw,
            r_squared: Summary::of(&r2),
            importance,
            failed_to_regress,
            notes,
        }
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| EvalError::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        serde_json::from_str(s).map_err(|e| EvalError::Format(e.to_string()))
    }

    /// One row per prediction: `trial,cycle,truth,predicted,raw,clamped`.
    pub fn write_predictions_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| EvalError::Format(e.to_string());
        out.write_record(["trial", "cycle", "truth", "predicted", "raw", "clamped"]).map_err(err)?;
        for f in &self.folds {
            for p in &f.predictions {
                out.write_record([
                    f.trial.clone(),
                    p.cycle.to_string(),
                    p.truth.to_string(),
                    p.predicted.to_string(),
                    p.raw.to_string(),
                    p.clamped.to_string(),
                ])
                .map_err(err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

struct ReportHead {
    subject: String,
    family: ModelFamily,
    train_task: TaskKind,
    test_task: TaskKind,
    seed: u64,
    seeds: BTreeMap<String, u64>,
    config: BTreeMap<String, String>,
}

pub fn model_digest(model: &Model) -> String {
    let d = Sha256::digest(model.to_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn score_trial(model: &Model, trial: &TrialFeatures, mode: FeatureMode, train_trials: Vec<String>) -> Result<TrialScore, EvalError> {
    let preds: Vec<Prediction> = model.predict_trial(trial, mode)?;
    let values: Vec<f64> = preds.iter().map(|p| p.value).collect();
    let raw: Vec<f64> = preds.iter().map(|p| p.raw).collect();
    let predictions = preds
        .iter()
        .zip(&trial.fcf)
        .enumerate()
        .map(|(k, (p, t))| PredictionPair { cycle: k + 1, truth: *t, predicted: p.value, raw: p.raw, clamped: p.clamped })
        .collect();
    Ok(TrialScore {
        trial: trial.trial.clone(),
        task: trial.task,
        rmse: rmse(&values, &trial.fcf)?,
        rmse_raw: rmse(&raw, &trial.fcf)?,
        r_squared: r_squared(&values, &trial.fcf).ok(),
        clamped: preds.iter().filter(|p| p.clamped).count(),
        train_trials,
        model_digest: model_digest(model),
        predictions,
    })
}

fn single_subject(trials: &[TrialFeatures]) -> Result<String, EvalError> {
    let subjects: BTreeSet<&str> = trials.iter().map(|t| t.subject.as_str()).collect();
    match subjects.len() {
        0 => Err(EvalError::TooFewTrials(0)),
        1 => Ok(subjects.into_iter().next().unwrap().to_string()),
        _ => Err(EvalError::MixedSubjects(subjects.into_iter().map(String::from).collect())),
    }
}

fn sorted(trials: &[TrialFeatures]) -> Vec<&TrialFeatures> {
    let mut v: Vec<&TrialFeatures> = trials.iter().collect();
    v.sort_by(|a, b| a.trial.cmp(&b.trial));
    v
}

fn mean_importance(shares: &[Vec<f64>]) -> Option<Importance> {
    let first = shares.first()?;
    let mean: Vec<f64> = (0..first.len()).map(|j| shares.iter().map(|s| s[j]).sum::<f64>() / shares.len() as f64).collect();
    Importance::from_shares(&mean, &crate::cycles::feature_names()).ok()
}

/// Seed of the fold that holds out `trial`.
pub fn fold_seed(seed: u64, trial: &str) -> u64 {
    derive_named(seed, &format!("fold/{trial}"))
}

/// Leave-one-trial-out on one subject: each fold trains on every other
/// trial and scores the held-out one. Trials are processed in id order.
pub fn loto_cv(trials: &[TrialFeatures], spec: &ModelSpec, seed: u64) -> Result<EvalReport, EvalError> {
    if trials.len() < 2 {
        return Err(EvalError::TooFewTrials(trials.len()));
    }
    let subject = single_subject(trials)?;
    let ordered = sorted(trials);
    let tasks: BTreeSet<TaskKind> = ordered.iter().map(|t| t.task).collect();
    let task = *tasks.iter().next().unwrap();
    let mut notes = Vec::new();
    if tasks.len() > 1 {
        notes.push(format!("trials mix tasks {tasks:?}"));
    }
    let mut folds = Vec::with_capacity(ordered.len());
    let mut seeds = BTreeMap::new();
    let mut shares = Vec::new();
    for (k, held) in ordered.iter().enumerate() {
        let train: Vec<TrialFeatures> =
            ordered.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, t)| (*t).clone()).collect();
        let s = fold_seed(seed, &held.trial);
        seeds.insert(held.trial.clone(), s);
        let model = spec.fit(&train, s)?;
        log::info!("fold {}/{} ({}) trained", k + 1, ordered.len(), held.trial);
        if let Ok(v) = importance_shares(&model) {
            shares.push(v);
        }
        let names = train.iter().map(|t| t.trial.clone()).collect();
        folds.push(score_trial(&model, held, spec.mode, names)?);
    }
    let head = ReportHead { subject, family: spec.family, train_task: task, test_task: task, seed, seeds, config: spec.echo() };
    Ok(EvalReport::assemble(ReportKind::Loto, head, folds, mean_importance(&shares), notes))
}

/// Where a cross-task model came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOrigin {
    pub subject: String,
    pub task: TaskKind,
    pub channels: [Muscle; 2],
    pub trials: Vec<String>,
    pub seed: u64,
}

/// Applies a fitted model, unchanged, to every trial of another task.
pub fn cross_task_eval(
    model: &Model,
    spec: &ModelSpec,
    origin: &ModelOrigin,
    test: &[TrialFeatures],
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::TooFewTrials(0));
    }
    let expected = match model {
        Model::Cnn(m) => m.input_shape().0,
        _ => origin.channels.len(),
    };
    let mut notes = Vec::new();
    let mut mapped = BTreeSet::new();
    for t in test {
        let got = match (model, &t.spectrograms) {
            (Model::Cnn(_), Some(specs)) => specs.first().map_or(0, |s| s.len()),
            _ => t.channels.len(),
        };
        if got != expected {
            return Err(EvalError::ChannelMismatch { trial: t.trial.clone(), model: expected, got });
        }
        for (c, (a, b)) in origin.channels.iter().zip(&t.channels).enumerate() {
            if a != b {
                mapped.insert(format!("channel {}: {a:?} stands in for {b:?}", c + 1));
            }
        }
    }
    notes.extend(mapped);
    let ordered = sorted(test);
    let test_task = ordered[0].task;
    let digest = model_digest(model);
    let mut folds = Vec::with_capacity(ordered.len());
    let mut seeds = BTreeMap::new();
    for t in &ordered {
        let score = score_trial(model, t, spec.mode, origin.trials.clone())?;
        debug_assert_eq!(score.model_digest, digest);
        seeds.insert(t.trial.clone(), origin.seed);
        folds.push(score);
    }
    let importance = importance_shares(model).ok().and_then(|s| mean_importance(&[s]));
    let head = ReportHead {
        subject: origin.subject.clone(),
        family: spec.family,
        train_task: origin.task,
        test_task,
        seed: origin.seed,
        seeds,
        config: spec.echo(),
    };
    Ok(EvalReport::assemble(ReportKind::CrossTask, head, folds, importance, notes))
}

/// Fits on `train` (one subject, one task) and evaluates on `test`.
pub fn train_and_cross(train: &[TrialFeatures], test: &[TrialFeatures], spec: &ModelSpec, seed: u64) -> Result<EvalReport, EvalError> {
    let subject = single_subject(train)?;
    let ordered: Vec<TrialFeatures> = sorted(train).into_iter().cloned().collect();
    let model = spec.fit(&ordered, seed)?;
    let origin = ModelOrigin {
        subject,
        task: ordered[0].task,
        channels: ordered[0].channels,
        trials: ordered.iter().map(|t| t.trial.clone()).collect(),
        seed,
    };
    cross_task_eval(&model, spec, &origin, test)
}

/// Least-squares line `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit, EvalError> {
    check_lengths(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) {
        return Err(EvalError::ZeroVariance("FCF"));
    }
    if !(syy > 0.0) {
        return Err(EvalError::ZeroVariance("SRF"));
    }
    let slope = sxy / sxx;
    Ok(LinearFit { slope, intercept: my - slope * mx, r_squared: sxy * sxy / (sxx * syy), n: x.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrfCorrelation {
    pub pooled: LinearFit,
    pub per_trial: BTreeMap<String, LinearFit>,
}

/// Fits normalized SRF (percent) against FCF (percent), pooled over all
/// cycles of all trials and per trial.
pub fn srf_fcf_correlation(trials: &[TrialFeatures]) -> Result<SrfCorrelation, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut per_trial = BTreeMap::new();
    for t in trials {
        let srf = t.srf_percent.as_ref().ok_or_else(|| EvalError::MissingSrf(t.trial.clone()))?;
        let x: Vec<f64> = t.fcf.iter().map(|v| 100.0 * v).collect();
        per_trial.insert(t.trial.clone(), linear_fit(&x, srf)?);
        xs.extend(x);
        ys.extend(srf.iter().copied());
    }
    Ok(SrfCorrelation { pooled: linear_fit(&xs, &ys)?, per_trial })
}
