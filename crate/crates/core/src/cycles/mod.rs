//! Trial data model, cycle segmentation, per-cycle feature vectors and the
//! FCF / SRF labels.

mod extract;
pub mod io;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, ConditionedTrace, DspError, Muscle, RawTrace};
use crate::spectral::{self, SpectralError};

pub use extract::{extract_trial, FeatureConfig, FeatureMode, TrialFeatures};

/// Position and force sampling rate.
pub const KINEMATIC_RATE: f64 = 500.0;
/// EMG sampling rate.
pub const EMG_RATE: f64 = 2000.0;
pub const N_FEATURES: usize = 16;

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("no complete cycle found")]
    NoCycles,
    #[error("cycle window too short: {len} EMG samples, need {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("interval table has {got} intervals x {channels} channels, expected 3 x 2")]
    IncompleteIntervals { got: usize, channels: usize },
    #[error("first-cycle feature {feature} is {value:e}, cannot form relative change")]
    DegenerateBaseline { feature: String, value: f64 },
    #[error("SRF score {value} at cycle {cycle} outside [0, 10] or final score is not 10")]
    OutOfRange { cycle: usize, value: f64 },
    #[error("{labels} SRF labels for {cycles} cycles")]
    SrfLength { labels: usize, cycles: usize },
    #[error("invalid trial: {0}")]
    InvalidTrial(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Lateral,
    Vertical,
    Circular,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Lateral, TaskKind::Vertical, TaskKind::Circular];

    /// Muscle pair recorded for the task: LD+PD, except LD+AD for vertical.
    pub fn muscles(self) -> [Muscle; 2] {
        match self {
            TaskKind::Lateral | TaskKind::Circular => [Muscle::LD, Muscle::PD],
            TaskKind::Vertical => [Muscle::LD, Muscle::AD],
        }
    }

    /// Cartesian axis carrying the motion of a linear task.
    pub fn axis(self) -> Option<usize> {
        match self {
            TaskKind::Lateral => Some(0),
            TaskKind::Vertical => Some(2),
            TaskKind::Circular => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Lateral => "lateral",
            TaskKind::Vertical => "vertical",
            TaskKind::Circular => "circular",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lateral" => Ok(TaskKind::Lateral),
            "vertical" => Ok(TaskKind::Vertical),
            "circular" => Ok(TaskKind::Circular),
            other => Err(format!("unknown task '{other}' (expected lateral, vertical or circular)")),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub trial: String,
    pub subject: String,
    pub task: TaskKind,
    /// Admittance damping (kg/s).
    pub b: f64,
    /// Admittance mass (kg).
    pub m: f64,
    pub mvc1: f64,
    pub mvc2: f64,
    pub ch1: Muscle,
    pub ch2: Muscle,
    /// Generator settings echoed for provenance; empty for recorded data.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub generator: BTreeMap<String, String>,
}

impl TrialMeta {
    pub fn mvc(&self) -> [f64; 2] {
        [self.mvc1, self.mvc2]
    }

    pub fn channels(&self) -> [Muscle; 2] {
        [self.ch1, self.ch2]
    }
}

/// One recorded (or synthesized) trial: kinematics at 500 Hz, two EMG
/// channels at 2 kHz and optional per-cycle Borg scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub meta: TrialMeta,
    /// x, y, z in metres.
    pub position: [Vec<f64>; 3],
    /// x, y, z in newtons.
    pub force: [Vec<f64>; 3],
    pub emg: [RawTrace; 2],
    pub srf: Option<Vec<f64>>,
}

impl Trial {
    pub fn validate(&self) -> Result<(), CycleError> {
        let n = self.position[0].len();
        if n == 0 {
            return Err(CycleError::InvalidTrial("empty position trace".into()));
        }
        if self.position.iter().chain(&self.force).any(|a| a.len() != n) {
            return Err(CycleError::InvalidTrial("position/force axes differ in length".into()));
        }
        let kin_secs = n as f64 / KINEMATIC_RATE;
        for e in &self.emg {
            let emg_secs = e.len() as f64 / e.fs();
            if (emg_secs - kin_secs).abs() > 1.0 / KINEMATIC_RATE + 1e-12 {
                return Err(CycleError::InvalidTrial(format!(
                    "EMG lasts {emg_secs:.4} s but kinematics {kin_secs:.4} s"
                )));
            }
        }
        if self.emg[0].len() != self.emg[1].len() {
            return Err(CycleError::InvalidTrial("EMG channels differ in length".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.position[0].len() as f64 / KINEMATIC_RATE
    }
}

/// A cycle as a half-open range of kinematic samples, with the matching
/// EMG range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleWindow {
    pub start: usize,
    pub end: usize,
    pub emg_start: usize,
    pub emg_end: usize,
}

impl CycleWindow {
    fn from_kinematic(start: usize, end: usize, emg_ratio: f64) -> Self {
        Self {
            start,
            end,
            emg_start: (start as f64 * emg_ratio).round() as usize,
            emg_end: (end as f64 * emg_ratio).round() as usize,
        }
    }
}

/// Hysteresis as a fraction of the motion amplitude.
const HYSTERESIS: f64 = 0.1;

/// Splits a trial into complete movement cycles.
///
/// Linear tasks: a boundary is each upward crossing of the midline on the
/// task axis, armed only after the position has dropped 10 % of the
/// amplitude below it. Circular task: a boundary each time the unwrapped
/// angle around the path centre passes a multiple of 2π. Leading and
/// trailing partial cycles are dropped.
pub fn segment_cycles(trial: &Trial) -> Result<Vec<CycleWindow>, CycleError> {
    let emg_ratio = trial.emg[0].fs() / KINEMATIC_RATE;
    let boundaries = match trial.meta.task.axis() {
        Some(axis) => linear_boundaries(&trial.position[axis]),
        None => circular_boundaries(&trial.position[0], &trial.position[1]),
    };
    let windows: Vec<CycleWindow> = boundaries
        .windows(2)
        .map(|w| CycleWindow::from_kinematic(w[0], w[1], emg_ratio))
        .collect();
    if windows.is_empty() {
        return Err(CycleError::NoCycles);
    }
    Ok(windows)
}

fn range_of(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn linear_boundaries(u: &[f64]) -> Vec<usize> {
    if u.len() < 2 {
        return Vec::new();
    }
    let (lo, hi) = range_of(u);
    let amp = (hi - lo) / 2.0;
    if !(amp > 1e-9) {
        return Vec::new();
    }
    let mid = (hi + lo) / 2.0;
    let arm_level = mid - HYSTERESIS * amp;
    let mut armed = u[0] < arm_level;
    let mut events = Vec::new();
    for (i, &v) in u.iter().enumerate().skip(1) {
        if v < arm_level {
            armed = true;
        } else if armed && v >= mid {
            events.push(i);
            armed = false;
        }
    }
    events
}

fn circular_boundaries(x: &[f64], y: &[f64]) -> Vec<usize> {
    if x.len() < 2 {
        return Vec::new();
    }
    let (x_lo, x_hi) = range_of(x);
    let (y_lo, y_hi) = range_of(y);
    if !((x_hi - x_lo) > 1e-9 && (y_hi - y_lo) > 1e-9) {
        return Vec::new();
    }
    let (cx, cy) = ((x_hi + x_lo) / 2.0, (y_hi + y_lo) / 2.0);
    let mut angle = Vec::with_capacity(x.len());
    let mut prev = (y[0] - cy).atan2(x[0] - cx);
    let mut acc = prev;
    angle.push(acc);
    for (&xi, &yi) in x.iter().zip(y).skip(1) {
        let a = (yi - cy).atan2(xi - cx);
        let mut d = a - prev;
        if d > PI {
            d -= 2.0 * PI;
        } else if d < -PI {
            d += 2.0 * PI;
        }
        acc += d;
        angle.push(acc);
        prev = a;
    }
    // Clockwise motion is mirrored so cycles always advance positively.
    if angle[angle.len() - 1] < angle[0] {
        for a in &mut angle {
            *a = -*a;
        }
    }
    let turn = 2.0 * PI;
    let mut k = (angle[0] / turn).floor() + 1.0;
    let mut events = Vec::new();
    for (i, &a) in angle.iter().enumerate() {
        if a >= k * turn {
            events.push(i);
            k += 1.0;
        }
    }
    events
}

/// Per-interval features; `values[interval][channel] = [MNF, MDF, TP, RMS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTable {
    pub values: Vec<Vec<[f64; 4]>>,
}

/// Feature family order inside a per-channel block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureFamily {
    MNF,
    MDF,
    TP,
    RMS,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 4] = [FeatureFamily::MNF, FeatureFamily::MDF, FeatureFamily::TP, FeatureFamily::RMS];

    fn key(self) -> &'static str {
        match self {
            FeatureFamily::MNF => "mnf",
            FeatureFamily::MDF => "mdf",
            FeatureFamily::TP => "tp",
            FeatureFamily::RMS => "rms",
        }
    }

    /// Family of a column name such as `ch2_tp_max` or `rel_ch1_mnf_min`.
    pub fn of_name(name: &str) -> Option<FeatureFamily> {
        name.split('_').find_map(|part| Self::ALL.into_iter().find(|f| f.key() == part))
    }
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Column index of a (channel, family, max?) entry in the 16-vector.
pub fn feature_index(channel: usize, family: FeatureFamily, is_max: bool) -> usize {
    let fam = FeatureFamily::ALL.iter().position(|f| *f == family).expect("known family");
    channel * 8 + fam * 2 + usize::from(is_max)
}

/// Names of the 16 columns, e.g. `ch1_mnf_min`.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_FEATURES);
    for ch in 1..=2 {
        for fam in FeatureFamily::ALL {
            for mm in ["min", "max"] {
                names.push(format!("ch{ch}_{}_{mm}", fam.key()));
            }
        }
    }
    names
}

/// Splits the cycle into 3 equal intervals and computes MNF, MDF and TP from
/// the normalized signal and RMS from its rectified version, per channel.
pub fn interval_features(
    window: &CycleWindow,
    emg: &[ConditionedTrace],
    seg_len: usize,
    overlap: f64,
) -> Result<IntervalTable, CycleError> {
    let len = window.emg_end.saturating_sub(window.emg_start);
    let needed = 3 * seg_len;
    if len < needed {
        return Err(CycleError::TooShort { len, needed });
    }
    if let Some(short) = emg.iter().find(|t| t.len() < window.emg_end) {
        return Err(CycleError::TooShort { len: short.len(), needed: window.emg_end });
    }
    let part = len / 3;
    let mut values = Vec::with_capacity(3);
    for i in 0..3 {
        let range = window.emg_start + i * part..window.emg_start + (i + 1) * part;
        let mut per_channel = Vec::with_capacity(emg.len());
        for trace in emg {
            let seg = trace.slice(range.clone());
            let psd = spectral::psd_welch(seg.samples(), seg.fs(), seg_len, overlap)?;
            let rect = dsp::rectify(&seg)?;
            per_channel.push([
                spectral::mnf(&psd)?,
                spectral::mdf(&psd)?,
                spectral::total_power(&psd),
                dsp::rms(rect.samples())?,
            ]);
        }
        values.push(per_channel);
    }
    Ok(IntervalTable { values })
}

/// The 16-feature per-cycle sample: min and max over the 3 intervals of each
/// (channel, feature) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleFeatureVector {
    pub trial: String,
    /// 1-based cycle index.
    pub cycle: usize,
    pub values: [f64; N_FEATURES],
}

pub fn cycle_feature_vector(
    table: &IntervalTable,
    trial: &str,
    cycle: usize,
) -> Result<CycleFeatureVector, CycleError> {
    let channels = table.values.first().map_or(0, |r| r.len());
    if table.values.len() != 3 || table.values.iter().any(|r| r.len() != 2) {
        return Err(CycleError::IncompleteIntervals { got: table.values.len(), channels });
    }
    let mut values = [0.0; N_FEATURES];
    for ch in 0..2 {
        for (f, fam) in FeatureFamily::ALL.into_iter().enumerate() {
            let (lo, hi) = table
                .values
                .iter()
                .map(|row| row[ch][f])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            values[feature_index(ch, fam, false)] = lo;
            values[feature_index(ch, fam, true)] = hi;
        }
    }
    Ok(CycleFeatureVector { trial: trial.to_string(), cycle, values })
}

/// Percent change of every feature relative to the first cycle.
pub fn relative_change(samples: &[CycleFeatureVector]) -> Result<Vec<[f64; N_FEATURES]>, CycleError> {
    let first = samples.first().ok_or(CycleError::NoCycles)?;
    let names = feature_names();
    for (j, &v) in first.values.iter().enumerate() {
        if !(v.abs() > 1e-12) {
            return Err(CycleError::DegenerateBaseline { feature: names[j].clone(), value: v });
        }
    }
    Ok(samples
        .iter()
        .map(|s| {
            let mut row = [0.0; N_FEATURES];
            for (j, r) in row.iter_mut().enumerate() {
                *r = 100.0 * (s.values[j] - first.values[j]) / first.values[j];
            }
            row
        })
        .collect())
}

/// Fraction of cycles to fatigue: `k / n` for `k = 1..=n`.
pub fn fcf_labels(n_cycles: usize) -> Vec<f64> {
    (1..=n_cycles).map(|k| k as f64 / n_cycles as f64).collect()
}

/// Borg CR10 scores to percent, with plateaus (repeated scores) linearly
/// interpolated between the onset of the plateau and the onset of the next
/// distinct score. A trailing plateau stays flat.
pub fn srf_normalize(borg: &[f64], n_cycles: usize) -> Result<Vec<f64>, CycleError> {
    if borg.len() != n_cycles {
        return Err(CycleError::SrfLength { labels: borg.len(), cycles: n_cycles });
    }
    if let Some((i, &v)) = borg.iter().enumerate().find(|(_, &v)| !(0.0..=10.0).contains(&v)) {
        return Err(CycleError::OutOfRange { cycle: i + 1, value: v });
    }
    match borg.last() {
        Some(&last) if last == 10.0 => {}
        Some(&last) => return Err(CycleError::OutOfRange { cycle: borg.len(), value: last }),
        None => return Ok(Vec::new()),
    }
    let percent: Vec<f64> = borg.iter().map(|s| 10.0 * s).collect();
    let mut onsets = vec![0usize];
    for i in 1..percent.len() {
        if percent[i] != percent[i - 1] {
            onsets.push(i);
        }
    }
    let mut out = percent.clone();
    for w in onsets.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (i, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let frac = (i - a) as f64 / (b - a) as f64;
            *o = percent[a] + frac * (percent[b] - percent[a]);
        }
    }
    Ok(out)
}
