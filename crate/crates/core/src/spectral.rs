//! Power spectral density (Welch) with the spectral fatigue indicators MNF,
//! MDF and total power, plus the STFT spectrograms used as CNN input.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{ConditionedTrace, Muscle};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("segment too short: {len} samples, need {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("spectrum has zero total power")]
    ZeroPower,
    #[error("normalization statistics are degenerate (std = {0:e})")]
    DegenerateStats(f64),
    #[error("spectrogram shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spectrogram container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Offset added to magnitudes before the log.
pub const LOG_EPSILON: f64 = 1e-8;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub df: f64,
}

impl Psd {
    fn power_sum(&self) -> f64 {
        self.power.iter().sum()
    }
}

/// Welch estimate: Hann-windowed segments of `seg_len` samples with the given
/// fractional overlap, density-scaled so that `Σ P·df` is the windowed
/// mean-square of the input.
pub fn psd_welch(segment: &[f64], fs: f64, seg_len: usize, overlap: f64) -> Result<Psd, SpectralError> {
    if seg_len < 2 {
        return Err(SpectralError::InvalidParam(format!("seg_len {seg_len}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(SpectralError::InvalidParam(format!("overlap {overlap}")));
    }
    if !(fs > 0.0) {
        return Err(SpectralError::InvalidParam(format!("fs {fs}")));
    }
    if segment.len() < seg_len {
        return Err(SpectralError::TooShort { len: segment.len(), needed: seg_len });
    }
    let step = ((seg_len as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let n_segs = (segment.len() - seg_len) / step + 1;
    let window = hann(seg_len);
    let w_energy: f64 = window.iter().map(|w| w * w).sum();
    let scale = 1.0 / (fs * w_energy);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg_len);
    let n_bins = seg_len / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); seg_len];
    for s in 0..n_segs {
        let chunk = &segment[s * step..s * step + seg_len];
        for ((b, x), w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf) {
            *a += c.norm_sqr();
        }
    }
    let nyquist_bin = if seg_len % 2 == 0 { Some(seg_len / 2) } else { None };
    let power = acc
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let one_sided = if k == 0 || Some(k) == nyquist_bin { 1.0 } else { 2.0 };
            one_sided * p * scale / n_segs as f64
        })
        .collect();
    let df = fs / seg_len as f64;
    Ok(Psd { freqs: (0..n_bins).map(|k| k as f64 * df).collect(), power, df })
}

/// Mean power frequency, `Σ f·P / Σ P`.
pub fn mnf(psd: &Psd) -> Result<f64, SpectralError> {
    let total = psd.power_sum();
    if !(total > 0.0) {
        return Err(SpectralError::ZeroPower);
    }
    let weighted: f64 = psd.freqs.iter().zip(&psd.power).map(|(f, p)| f * p).sum();
    Ok(weighted / total)
}

/// Median power frequency. The cumulative power is treated as piecewise
/// linear between bin centres and the half-power crossing is interpolated.
pub fn mdf(psd: &Psd) -> Result<f64, SpectralError> {
    let total = psd.power_sum();
    if !(total > 0.0) {
        return Err(SpectralError::ZeroPower);
    }
    let half = 0.5 * total;
    let mut cum = 0.0;
    for (i, (&f, &p)) in psd.freqs.iter().zip(&psd.power).enumerate() {
        let next = cum + p;
        if next >= half {
            if i == 0 || p <= 0.0 {
                return Ok(f);
            }
            let prev_f = psd.freqs[i - 1];
            return Ok(prev_f + (half - cum) / p * (f - prev_f));
        }
        cum = next;
    }
    Ok(*psd.freqs.last().expect("non-empty psd"))
}

/// Total power, `Σ P·df`.
pub fn total_power(psd: &Psd) -> f64 {
    psd.power_sum() * psd.df
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub window: usize,
    pub overlap: usize,
    pub band_low: f64,
    pub band_high: f64,
}

impl Default for StftParams {
    fn default() -> Self {
        Self { window: 400, overlap: 300, band_low: 10.0, band_high: 250.0 }
    }
}

impl StftParams {
    pub fn hop(&self) -> usize {
        self.window - self.overlap
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop() + 1
        }
    }

    /// FFT bins whose centre frequency lies in the closed band.
    pub fn bins(&self, fs: f64) -> std::ops::RangeInclusive<usize> {
        let df = fs / self.window as f64;
        let tol = 1e-9 * df;
        let lo = ((self.band_low - tol) / df).ceil().max(0.0) as usize;
        let hi = ((self.band_high + tol) / df).floor().min((self.window / 2) as f64) as usize;
        lo..=hi
    }

    fn validate(&self) -> Result<(), SpectralError> {
        if self.window < 2 || self.overlap >= self.window {
            return Err(SpectralError::InvalidParam(format!(
                "window {} / overlap {}",
                self.window, self.overlap
            )));
        }
        if !(self.band_low >= 0.0 && self.band_low < self.band_high) {
            return Err(SpectralError::InvalidParam(format!(
                "band [{}, {}]",
                self.band_low, self.band_high
            )));
        }
        Ok(())
    }
}

/// STFT magnitudes before log/z-score, frequency-major: `values[f * n_time + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpectrogram {
    pub freqs: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub channel: Muscle,
}

impl RawSpectrogram {
    pub fn n_freq(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_time(&self) -> usize {
        self.times.len()
    }

    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.n_time() + t]
    }
}

/// Hann-windowed STFT magnitude restricted to the band in `params`.
pub fn stft_spectrogram(trace: &ConditionedTrace, params: &StftParams) -> Result<RawSpectrogram, SpectralError> {
    params.validate()?;
    let x = trace.samples();
    let fs = trace.fs();
    if x.len() < params.window {
        return Err(SpectralError::TooShort { len: x.len(), needed: params.window });
    }
    let n_time = params.frame_count(x.len());
    let bins = params.bins(fs);
    let n_freq = bins.clone().count();
    let df = fs / params.window as f64;
    let window = hann(params.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.window);
    let mut buf = vec![Complex::new(0.0, 0.0); params.window];
    let mut values = vec![0.0; n_freq * n_time];
    for t in 0..n_time {
        let start = t * params.hop();
        for ((b, v), w) in buf.iter_mut().zip(&x[start..start + params.window]).zip(&window) {
            *b = Complex::new(v * w, 0.0);
        }
        fft.process(&mut buf);
        for (row, k) in bins.clone().enumerate() {
            values[row * n_time + t] = buf[k].norm();
        }
    }
    Ok(RawSpectrogram {
        freqs: bins.map(|k| k as f64 * df).collect(),
        times: (0..n_time)
            .map(|t| (t * params.hop()) as f64 / fs + params.window as f64 / (2.0 * fs))
            .collect(),
        values,
        channel: trace.channel(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One mean/std over every entry of every training spectrogram.
    Global,
    /// One mean/std per frequency row.
    PerBin,
}

/// Log-magnitude normalization statistics fitted on training spectrograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub scope: NormScope,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit<'a, I>(spectrograms: I, scope: NormScope) -> Result<Self, SpectralError>
    where
        I: IntoIterator<Item = &'a RawSpectrogram>,
    {
        let specs: Vec<&RawSpectrogram> = spectrograms.into_iter().collect();
        let n_freq = specs.first().map(|s| s.n_freq()).ok_or_else(|| {
            SpectralError::InvalidParam("no spectrograms to fit statistics on".into())
        })?;
        if specs.iter().any(|s| s.n_freq() != n_freq) {
            return Err(SpectralError::ShapeMismatch("frequency rows differ".into()));
        }
        let groups = match scope {
            NormScope::Global => 1,
            NormScope::PerBin => n_freq,
        };
        let mut sum = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        for s in &specs {
            for f in 0..n_freq {
                let g = if groups == 1 { 0 } else { f };
                for t in 0..s.n_time() {
                    sum[g] += (s.at(f, t) + LOG_EPSILON).ln();
                }
                count[g] += s.n_time();
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect();
        let mut sq = vec![0.0; groups];
        for s in &specs {
            for f in 0..n_freq {
                let g = if groups == 1 { 0 } else { f };
                for t in 0..s.n_time() {
                    sq[g] += ((s.at(f, t) + LOG_EPSILON).ln() - mean[g]).powi(2);
                }
            }
        }
        let std: Vec<f64> = sq.iter().zip(&count).map(|(s, &c)| (s / c.max(1) as f64).sqrt()).collect();
        if let Some(&bad) = std.iter().find(|&&s| !(s >= 1e-12)) {
            return Err(SpectralError::DegenerateStats(bad));
        }
        Ok(Self { scope, mean, std })
    }

    fn for_row(&self, f: usize) -> (f64, f64) {
        match self.scope {
            NormScope::Global => (self.mean[0], self.std[0]),
            NormScope::PerBin => (self.mean[f], self.std[f]),
        }
    }
}

/// Log-transformed, z-scored spectrogram ready for the CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub freqs: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub channel: Muscle,
}

impl Spectrogram {
    pub fn n_freq(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_time(&self) -> usize {
        self.times.len()
    }
}

pub fn log_zscore(raw: &RawSpectrogram, stats: &NormStats) -> Result<Spectrogram, SpectralError> {
    if let Some(&bad) = stats.std.iter().find(|&&s| !(s >= 1e-12)) {
        return Err(SpectralError::DegenerateStats(bad));
    }
    if stats.scope == NormScope::PerBin && stats.mean.len() != raw.n_freq() {
        return Err(SpectralError::ShapeMismatch(format!(
            "stats cover {} rows, spectrogram has {}",
            stats.mean.len(),
            raw.n_freq()
        )));
    }
    let n_time = raw.n_time();
    let values = raw
        .values
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (mu, sd) = stats.for_row(i / n_time.max(1));
            ((m + LOG_EPSILON).ln() - mu) / sd
        })
        .collect();
    Ok(Spectrogram {
        freqs: raw.freqs.clone(),
        times: raw.times.clone(),
        values,
        channel: raw.channel,
    })
}

/// One cycle's multi-channel raw spectrogram with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramSample {
    pub trial: String,
    pub cycle: usize,
    pub fcf: f64,
    /// One raw spectrogram per EMG channel, same shape.
    pub channels: Vec<RawSpectrogram>,
}

/// Header-plus-samples binary container for raw per-cycle spectrograms.
///
/// Layout (little endian): magic `FCFSPEC\0`, version u32, fs f64, window u32,
/// overlap u32, band low/high f64, n_freq u32, n_channels u32, stats flag u8
/// (then scope u8, len u32, means, stds as f64), sample count u32; each sample
/// is trial id (u32 length + UTF-8), cycle u32, fcf f64, channel labels
/// (u8 each), n_time u32, then `n_channels × n_freq × n_time` f32 magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramArchive {
    pub fs: f64,
    pub params: StftParams,
    pub stats: Option<NormStats>,
    pub samples: Vec<SpectrogramSample>,
}

const ARCHIVE_MAGIC: &[u8; 8] = b"FCFSPEC\0";
const ARCHIVE_VERSION: u32 = 1;

fn muscle_code(m: Muscle) -> u8 {
    match m {
        Muscle::LD => 0,
        Muscle::PD => 1,
        Muscle::AD => 2,
    }
}

fn muscle_from_code(c: u8) -> Result<Muscle, SpectralError> {
    match c {
        0 => Ok(Muscle::LD),
        1 => Ok(Muscle::PD),
        2 => Ok(Muscle::AD),
        _ => Err(SpectralError::Format(format!("bad muscle code {c}"))),
    }
}

impl SpectrogramArchive {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SpectralError> {
        let n_freq = self.params.bins(self.fs).count();
        let n_channels = self.samples.first().map_or(0, |s| s.channels.len());
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
        w.write_f64::<LittleEndian>(self.fs)?;
        w.write_u32::<LittleEndian>(self.params.window as u32)?;
        w.write_u32::<LittleEndian>(self.params.overlap as u32)?;
        w.write_f64::<LittleEndian>(self.params.band_low)?;
        w.write_f64::<LittleEndian>(self.params.band_high)?;
        w.write_u32::<LittleEndian>(n_freq as u32)?;
        w.write_u32::<LittleEndian>(n_channels as u32)?;
        match &self.stats {
            None => w.write_u8(0)?,
            Some(st) => {
                w.write_u8(1)?;
                w.write_u8(match st.scope {
                    NormScope::Global => 0,
                    NormScope::PerBin => 1,
                })?;
                w.write_u32::<LittleEndian>(st.mean.len() as u32)?;
                for v in st.mean.iter().chain(&st.std) {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
        }
        w.write_u32::<LittleEndian>(self.samples.len() as u32)?;
        for s in &self.samples {
            if s.channels.len() != n_channels || s.channels.iter().any(|c| c.n_freq() != n_freq) {
                return Err(SpectralError::ShapeMismatch(format!(
                    "sample {}#{} does not match archive shape",
                    s.trial, s.cycle
                )));
            }
            let n_time = s.channels[0].n_time();
            if s.channels.iter().any(|c| c.n_time() != n_time) {
                return Err(SpectralError::ShapeMismatch("channels differ in frame count".into()));
            }
            w.write_u32::<LittleEndian>(s.trial.len() as u32)?;
            w.write_all(s.trial.as_bytes())?;
            w.write_u32::<LittleEndian>(s.cycle as u32)?;
            w.write_f64::<LittleEndian>(s.fcf)?;
            for c in &s.channels {
                w.write_u8(muscle_code(c.channel))?;
            }
            w.write_u32::<LittleEndian>(n_time as u32)?;
            for c in &s.channels {
                for v in &c.values {
                    w.write_f32::<LittleEndian>(*v as f32)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SpectralError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(SpectralError::Format("not a spectrogram archive".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != ARCHIVE_VERSION {
            return Err(SpectralError::Format(format!("unsupported version {version}")));
        }
        let fs = r.read_f64::<LittleEndian>()?;
        let params = StftParams {
            window: r.read_u32::<LittleEndian>()? as usize,
            overlap: r.read_u32::<LittleEndian>()? as usize,
            band_low: r.read_f64::<LittleEndian>()?,
            band_high: r.read_f64::<LittleEndian>()?,
        };
        params.validate()?;
        let n_freq = r.read_u32::<LittleEndian>()? as usize;
        if n_freq != params.bins(fs).count() {
            return Err(SpectralError::Format("frequency row count disagrees with header".into()));
        }
        let freqs: Vec<f64> = params.bins(fs).map(|k| k as f64 * fs / params.window as f64).collect();
        let n_channels = r.read_u32::<LittleEndian>()? as usize;
        let stats = match r.read_u8()? {
            0 => None,
            1 => {
                let scope = match r.read_u8()? {
                    0 => NormScope::Global,
                    1 => NormScope::PerBin,
                    c => return Err(SpectralError::Format(format!("bad scope {c}"))),
                };
                let len = r.read_u32::<LittleEndian>()? as usize;
                let mut read_vec = |n: usize| -> Result<Vec<f64>, SpectralError> {
                    (0..n).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect()
                };
                let mean = read_vec(len)?;
                let std = read_vec(len)?;
                Some(NormStats { scope, mean, std })
            }
            c => return Err(SpectralError::Format(format!("bad stats flag {c}"))),
        };
        let n_samples = r.read_u32::<LittleEndian>()? as usize;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let trial = String::from_utf8(id).map_err(|e| SpectralError::Format(e.to_string()))?;
            let cycle = r.read_u32::<LittleEndian>()? as usize;
            let fcf = r.read_f64::<LittleEndian>()?;
            let labels = (0..n_channels)
                .map(|_| muscle_from_code(r.read_u8()?))
                .collect::<Result<Vec<_>, _>>()?;
            let n_time = r.read_u32::<LittleEndian>()? as usize;
            let times: Vec<f64> = (0..n_time)
                .map(|t| (t * params.hop()) as f64 / fs + params.window as f64 / (2.0 * fs))
                .collect();
            let mut channels = Vec::with_capacity(n_channels);
            for channel in labels {
                let values = (0..n_freq * n_time)
                    .map(|_| Ok(r.read_f32::<LittleEndian>()? as f64))
                    .collect::<Result<Vec<_>, SpectralError>>()?;
                channels.push(RawSpectrogram { freqs: freqs.clone(), times: times.clone(), values, channel });
            }
            samples.push(SpectrogramSample { trial, cycle, fcf, channels });
        }
        Ok(Self { fs, params, stats, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Stage;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sine(freq: f64, fs: f64, secs: f64, amp: f64) -> Vec<f64> {
        let n = (fs * secs) as usize;
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn white(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn trace(samples: Vec<f64>) -> ConditionedTrace {
        ConditionedTrace::from_parts(samples, 2000.0, Muscle::LD, Stage::Normalized, Some(1.0)).unwrap()
    }

    #[test]
    fn sine_psd_concentrates_and_integrates_to_half() {
        let psd = psd_welch(&sine(100.0, 2000.0, 4.0, 1.0), 2000.0, 1024, 0.5).unwrap();
        assert!((total_power(&psd) - 0.5).abs() / 0.5 < 0.02);
        let peak = psd
            .power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!((psd.freqs[peak] - 100.0).abs() <= psd.df);
        assert!((mnf(&psd).unwrap() - 100.0).abs() <= psd.df);
        assert!((mdf(&psd).unwrap() - 100.0).abs() <= psd.df);
    }

    #[test]
    fn zero_signal_zero_psd() {
        let psd = psd_welch(&[0.0; 4096], 2000.0, 1024, 0.5).unwrap();
        assert!(psd.power.iter().all(|&p| p == 0.0));
        assert_eq!(total_power(&psd), 0.0);
        assert!(matches!(mnf(&psd), Err(SpectralError::ZeroPower)));
        assert!(matches!(mdf(&psd), Err(SpectralError::ZeroPower)));
    }

    #[test]
    fn white_noise_is_flat_with_mnf_mdf_at_quarter_fs() {
        let sigma = 0.7;
        let x = white(60 * 2000, sigma, 11);
        let psd = psd_welch(&x, 2000.0, 1024, 0.5).unwrap();
        assert!((total_power(&psd) - sigma * sigma).abs() / (sigma * sigma) < 0.05);
        assert!((mnf(&psd).unwrap() - 500.0).abs() / 500.0 < 0.02);
        assert!((mdf(&psd).unwrap() - 500.0).abs() / 500.0 < 0.02);
        // Flat: mean density in the low and high halves agree.
        let half = psd.power.len() / 2;
        let lo: f64 = psd.power[1..half].iter().sum::<f64>() / (half - 1) as f64;
        let hi: f64 = psd.power[half..psd.power.len() - 1].iter().sum::<f64>() / (psd.power.len() - 1 - half) as f64;
        assert!((lo / hi - 1.0).abs() < 0.05);
    }

    #[test]
    fn two_tones_split_the_median() {
        let x: Vec<f64> = sine(50.0, 2000.0, 8.0, 1.0)
            .iter()
            .zip(sine(150.0, 2000.0, 8.0, 1.0))
            .map(|(a, b)| a + b)
            .collect();
        let psd = psd_welch(&x, 2000.0, 1024, 0.5).unwrap();
        assert!((mnf(&psd).unwrap() - 100.0).abs() <= psd.df);
        let m = mdf(&psd).unwrap();
        assert!((50.0..=150.0).contains(&m), "{m}");
    }

    #[test]
    fn welch_parameter_errors() {
        assert!(matches!(psd_welch(&[1.0; 100], 2000.0, 1024, 0.5), Err(SpectralError::TooShort { .. })));
        assert!(psd_welch(&[1.0; 2000], 2000.0, 1024, 1.0).is_err());
    }

    #[test]
    fn mdf_tone_in_dc_bin_stays_in_range() {
        let psd = Psd { freqs: vec![0.0, 1.0, 2.0], power: vec![5.0, 0.0, 0.0], df: 1.0 };
        assert_eq!(mdf(&psd).unwrap(), 0.0);
        assert_eq!(mnf(&psd).unwrap(), 0.0);
    }

    #[test]
    fn spectrogram_shape_for_ten_second_cycle() {
        let s = stft_spectrogram(&trace(vec![0.0; 20000]), &StftParams::default()).unwrap();
        assert_eq!(s.n_time(), 197);
        assert_eq!(s.n_freq(), 49);
        assert_eq!(s.freqs[0], 10.0);
        assert_eq!(*s.freqs.last().unwrap(), 250.0);
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectrogram_tone_lands_in_bin_twenty() {
        let s = stft_spectrogram(&trace(sine(100.0, 2000.0, 1.0, 1.0)), &StftParams::default()).unwrap();
        let row = s.freqs.iter().position(|&f| f == 100.0).unwrap();
        assert_eq!(row, 18); // bin 20, first row is bin 2
        for t in 0..s.n_time() {
            let best = (0..s.n_freq()).max_by(|&a, &b| s.at(a, t).partial_cmp(&s.at(b, t)).unwrap()).unwrap();
            assert_eq!(best, row);
        }
    }

    #[test]
    fn spectrogram_too_short() {
        assert!(matches!(
            stft_spectrogram(&trace(vec![0.0; 399]), &StftParams::default()),
            Err(SpectralError::TooShort { .. })
        ));
    }

    #[test]
    fn zscore_self_normalizes() {
        let s = stft_spectrogram(&trace(white(20000, 1.0, 3)), &StftParams::default()).unwrap();
        let stats = NormStats::fit([&s], NormScope::Global).unwrap();
        let z = log_zscore(&s, &stats).unwrap();
        let n = z.values.len() as f64;
        let mean = z.values.iter().sum::<f64>() / n;
        let sd = (z.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01);
        assert!((0.99..=1.01).contains(&sd));

        let per_bin = NormStats::fit([&s], NormScope::PerBin).unwrap();
        assert_eq!(per_bin.mean.len(), 49);
        let z = log_zscore(&s, &per_bin).unwrap();
        let row0: Vec<f64> = z.values[..z.n_time()].to_vec();
        assert!((row0.iter().sum::<f64>() / row0.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn constant_magnitudes_are_degenerate() {
        let raw = RawSpectrogram {
            freqs: vec![10.0, 15.0],
            times: vec![0.1, 0.2],
            values: vec![3.0; 4],
            channel: Muscle::LD,
        };
        assert!(matches!(NormStats::fit([&raw], NormScope::Global), Err(SpectralError::DegenerateStats(_))));
    }

    #[test]
    fn doubling_shifts_by_log_two_over_std() {
        let s = stft_spectrogram(&trace(white(8000, 1.0, 5)), &StftParams::default()).unwrap();
        let stats = NormStats::fit([&s], NormScope::Global).unwrap();
        let doubled = RawSpectrogram { values: s.values.iter().map(|v| 2.0 * v).collect(), ..s.clone() };
        let a = log_zscore(&s, &stats).unwrap();
        let b = log_zscore(&doubled, &stats).unwrap();
        let shift = 2f64.ln() / stats.std[0];
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_abs_diff_eq!(y - x, shift, epsilon = 1e-6);
        }
    }

    #[test]
    fn scaling_invariance_of_mnf_mdf() {
        let x = white(20000, 1.0, 9);
        let y: Vec<f64> = x.iter().map(|v| -3.5 * v).collect();
        let px = psd_welch(&x, 2000.0, 1024, 0.5).unwrap();
        let py = psd_welch(&y, 2000.0, 1024, 0.5).unwrap();
        assert_abs_diff_eq!(mnf(&px).unwrap(), mnf(&py).unwrap(), epsilon = 1e-9);
        assert_abs_diff_eq!(mdf(&px).unwrap(), mdf(&py).unwrap(), epsilon = 1e-9);
        assert_abs_diff_eq!(total_power(&py) / total_power(&px), 12.25, epsilon = 1e-9);
    }

    #[test]
    fn time_stretch_lowers_mnf_and_mdf() {
        // Band-limited noise, then a 1.25x slower resampling of the same realization.
        let base = white(40000, 1.0, 21);
        let smooth: Vec<f64> = base.windows(4).map(|w| w.iter().sum::<f64>() / 4.0).collect();
        let r = 1.25;
        let n_out = ((smooth.len() - 1) as f64 * r) as usize;
        let stretched: Vec<f64> = (0..n_out)
            .map(|i| {
                let pos = i as f64 / r;
                let j = pos.floor() as usize;
                let frac = pos - j as f64;
                smooth[j] * (1.0 - frac) + smooth[(j + 1).min(smooth.len() - 1)] * frac
            })
            .collect();
        let a = psd_welch(&smooth, 2000.0, 1024, 0.5).unwrap();
        let b = psd_welch(&stretched, 2000.0, 1024, 0.5).unwrap();
        assert!(mnf(&b).unwrap() < mnf(&a).unwrap());
        assert!(mdf(&b).unwrap() < mdf(&a).unwrap());
    }

    #[test]
    fn archive_round_trip() {
        let s = stft_spectrogram(&trace(white(4000, 1.0, 1)), &StftParams::default()).unwrap();
        let mut pd = s.clone();
        pd.channel = Muscle::PD;
        let stats = NormStats::fit([&s], NormScope::Global).unwrap();
        let archive = SpectrogramArchive {
            fs: 2000.0,
            params: StftParams::default(),
            stats: Some(stats),
            samples: vec![SpectrogramSample { trial: "s01_t1".into(), cycle: 3, fcf: 0.25, channels: vec![s, pd] }],
        };
        let mut buf = Vec::new();
        archive.write_to(&mut buf).unwrap();
        let back = SpectrogramArchive::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.stats, archive.stats);
        assert_eq!(back.samples[0].trial, "s01_t1");
        assert_eq!(back.samples[0].channels[1].channel, Muscle::PD);
        for (a, b) in back.samples[0].channels[0].values.iter().zip(&archive.samples[0].channels[0].values) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(SpectrogramArchive::read_from(&b"garbage!"[..]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn frame_count_matches_closed_form(len in 400usize..30000) {
            let p = StftParams::default();
            let s = stft_spectrogram(&trace(vec![0.0; len]), &p).unwrap();
            proptest::prop_assert_eq!(s.n_time(), (len - 400) / 100 + 1);
            proptest::prop_assert_eq!(s.n_freq(), 49);
        }
    }
}
