use serde::{Deserialize, Serialize};

use super::{
    cycle_feature_vector, fcf_labels, interval_features, relative_change, segment_cycles, srf_normalize,
    CycleError, CycleFeatureVector, CycleWindow, TaskKind, Trial, N_FEATURES,
};
use crate::config::{parse_field, ConfigError, ConfigValue, Settings};
use crate::dsp::{self, BandpassSpec, ConditionedTrace, Muscle};
use crate::spectral::{self, RawSpectrogram, SpectrogramSample, StftParams};

/// Which feature matrix the tabular models consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Percent change against the first cycle of the same trial.
    #[default]
    Relative,
    /// Raw min/max values, for ablation.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub low_cut: f64,
    pub high_cut: f64,
    pub order: usize,
    /// Zero-phase (forward-backward) or causal filtering.
    pub zero_phase: bool,
    pub psd_seg_len: usize,
    pub psd_overlap: f64,
    pub stft: StftParams,
    pub spectrograms: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            low_cut: 5.0,
            high_cut: 500.0,
            order: 4,
            zero_phase: true,
            psd_seg_len: 1024,
            psd_overlap: 0.5,
            stft: StftParams::default(),
            spectrograms: false,
        }
    }
}

impl FeatureConfig {
    pub fn bandpass(&self, fs: f64) -> BandpassSpec {
        BandpassSpec { low_cut: self.low_cut, high_cut: self.high_cut, order: self.order, fs }
    }
}

impl Settings for FeatureConfig {
    const SECTION: &'static str = "extract";

    fn set(&mut self, field: &str, value: &str) -> Result<(), ConfigError> {
        match field {
            "low_cut" => self.low_cut = parse_field(field, value)?,
            "high_cut" => self.high_cut = parse_field(field, value)?,
            "order" => self.order = parse_field(field, value)?,
            "zero_phase" => self.zero_phase = parse_field(field, value)?,
            "psd_seg_len" => self.psd_seg_len = parse_field(field, value)?,
            "psd_overlap" => self.psd_overlap = parse_field(field, value)?,
            "stft_window" => self.stft.window = parse_field(field, value)?,
            "stft_overlap" => self.stft.overlap = parse_field(field, value)?,
            "stft_low" => self.stft.band_low = parse_field(field, value)?,
            "stft_high" => self.stft.band_high = parse_field(field, value)?,
            "spectrograms" => self.spectrograms = parse_field(field, value)?,
            _ => return Err(ConfigError::UnknownKey(field.to_string())),
        }
        Ok(())
    }

    fn echo(&self) -> Vec<(String, String)> {
        [
            ("low_cut", self.low_cut.render()),
            ("high_cut", self.high_cut.render()),
            ("order", self.order.render()),
            ("zero_phase", self.zero_phase.render()),
            ("psd_seg_len", self.psd_seg_len.render()),
            ("psd_overlap", self.psd_overlap.render()),
            ("stft_window", self.stft.window.render()),
            ("stft_overlap", self.stft.overlap.render()),
            ("stft_low", self.stft.band_low.render()),
            ("stft_high", self.stft.band_high.render()),
            ("spectrograms", self.spectrograms.render()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Everything the models need from one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFeatures {
    pub trial: String,
    pub subject: String,
    pub task: TaskKind,
    pub channels: [Muscle; 2],
    /// Empty when loaded from a feature CSV.
    pub windows: Vec<CycleWindow>,
    pub raw: Vec<CycleFeatureVector>,
    pub relative: Vec<[f64; N_FEATURES]>,
    pub fcf: Vec<f64>,
    /// Interpolated SRF in percent, when scores were recorded.
    pub srf_percent: Option<Vec<f64>>,
    /// Per cycle, one raw spectrogram per channel.
    pub spectrograms: Option<Vec<Vec<RawSpectrogram>>>,
}

impl TrialFeatures {
    pub fn n_cycles(&self) -> usize {
        self.raw.len()
    }

    pub fn features(&self, mode: FeatureMode) -> Vec<[f64; N_FEATURES]> {
        match mode {
            FeatureMode::Relative => self.relative.clone(),
            FeatureMode::Raw => self.raw.iter().map(|r| r.values).collect(),
        }
    }

    pub fn spectrogram_samples(&self) -> Option<Vec<SpectrogramSample>> {
        let specs = self.spectrograms.as_ref()?;
        Some(
            specs
                .iter()
                .zip(&self.fcf)
                .enumerate()
                .map(|(k, (channels, &fcf))| SpectrogramSample {
                    trial: self.trial.clone(),
                    cycle: k + 1,
                    fcf,
                    channels: channels.clone(),
                })
                .collect(),
        )
    }
}

/// Conditions both EMG channels over the whole trial (band-pass, MVC
/// normalization), segments the cycles and builds features and labels.
pub fn extract_trial(trial: &Trial, cfg: &FeatureConfig) -> Result<TrialFeatures, CycleError> {
    trial.validate()?;
    let fs = trial.emg[0].fs();
    let coeffs = dsp::design_bandpass(&cfg.bandpass(fs))?;
    let mvc = trial.meta.mvc();
    let normalized = trial
        .emg
        .iter()
        .zip(mvc)
        .map(|(raw, m)| {
            let filtered = if cfg.zero_phase {
                dsp::filter_zero_phase(raw, &coeffs)?
            } else {
                dsp::filter_causal(raw, &coeffs)
            };
            dsp::normalize_mvc(&filtered, m)
        })
        .collect::<Result<Vec<ConditionedTrace>, _>>()?;

    let windows = segment_cycles(trial)?;
    let raw = windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let table = interval_features(w, &normalized, cfg.psd_seg_len, cfg.psd_overlap)?;
            cycle_feature_vector(&table, &trial.meta.trial, k + 1)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let relative = relative_change(&raw)?;
    let n = windows.len();
    let srf_percent = trial.srf.as_ref().map(|s| srf_normalize(s, n)).transpose()?;

    let spectrograms = if cfg.spectrograms {
        let mut per_cycle = Vec::with_capacity(n);
        for w in &windows {
            let chans = normalized
                .iter()
                .map(|t| spectral::stft_spectrogram(&t.slice(w.emg_start..w.emg_end), &cfg.stft))
                .collect::<Result<Vec<_>, _>>()?;
            per_cycle.push(chans);
        }
        Some(per_cycle)
    } else {
        None
    };

    Ok(TrialFeatures {
        trial: trial.meta.trial.clone(),
        subject: trial.meta.subject.clone(),
        task: trial.meta.task,
        channels: trial.meta.channels(),
        windows,
        raw,
        relative,
        fcf: fcf_labels(n),
        srf_percent,
        spectrograms,
    })
}
