//! EMG signal conditioning: Butterworth band-pass design, zero-phase and
//! causal filtering, MVC normalization, full-wave rectification and RMS.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("invalid band-pass spec: {0}")]
    InvalidSpec(String),
    #[error("trace too short: {len} samples, need more than {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("MVC value must be positive, got {0}")]
    NonPositiveMvc(f64),
    #[error("operation requires stage {expected:?}, trace is {actual:?}")]
    WrongStage { expected: Stage, actual: Stage },
    #[error("empty segment")]
    EmptySegment,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

/// Monitored shoulder muscle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Muscle {
    /// Lateral deltoid.
    LD,
    /// Posterior deltoid.
    PD,
    /// Anterior deltoid.
    AD,
}

impl fmt::Display for Muscle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Muscle::LD => "LD",
            Muscle::PD => "PD",
            Muscle::AD => "AD",
        };
        f.write_str(s)
    }
}

impl FromStr for Muscle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LD" => Ok(Muscle::LD),
            "PD" => Ok(Muscle::PD),
            "AD" => Ok(Muscle::AD),
            other => Err(format!("unknown muscle label '{other}'")),
        }
    }
}

/// Raw EMG channel in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrace {
    samples: Vec<f64>,
    fs: f64,
    channel: Muscle,
}

impl RawTrace {
    pub fn new(samples: Vec<f64>, fs: f64, channel: Muscle) -> Result<Self, DspError> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(DspError::InvalidTrace(format!("sampling rate {fs}")));
        }
        if samples.is_empty() {
            return Err(DspError::InvalidTrace("no samples".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(DspError::InvalidTrace(format!("non-finite sample at {i}")));
        }
        Ok(Self { samples, fs, channel })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn channel(&self) -> Muscle {
        self.channel
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Filtered,
    Normalized,
    Rectified,
}

/// EMG channel after one or more conditioning steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedTrace {
    samples: Vec<f64>,
    fs: f64,
    channel: Muscle,
    stage: Stage,
    /// Product of all MVC values this trace has been divided by.
    mvc: Option<f64>,
}

impl ConditionedTrace {
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn channel(&self) -> Muscle {
        self.channel
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn mvc(&self) -> Option<f64> {
        self.mvc
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Builds a trace at an arbitrary stage, e.g. for data already conditioned
    /// elsewhere. Rectified input must be nonnegative.
    pub fn from_parts(
        samples: Vec<f64>,
        fs: f64,
        channel: Muscle,
        stage: Stage,
        mvc: Option<f64>,
    ) -> Result<Self, DspError> {
        if !(fs > 0.0) {
            return Err(DspError::InvalidTrace(format!("sampling rate {fs}")));
        }
        if stage == Stage::Rectified && samples.iter().any(|&x| x < 0.0) {
            return Err(DspError::InvalidTrace("rectified trace has negative samples".into()));
        }
        Ok(Self { samples, fs, channel, stage, mvc })
    }

    /// Contiguous sub-range of the trace, same stage and metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ConditionedTrace {
        ConditionedTrace { samples: self.samples[range].to_vec(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> ConditionedTrace {
        ConditionedTrace {
            samples: Vec::new(),
            fs: self.fs,
            channel: self.channel,
            stage: self.stage,
            mvc: self.mvc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub low_cut: f64,
    pub high_cut: f64,
    /// Total band-pass order; half of it goes to each band edge.
    pub order: usize,
    pub fs: f64,
}

impl BandpassSpec {
    /// 5-500 Hz, 4th order, at the 2 kHz EMG rate.
    pub fn emg_default(fs: f64) -> Self {
        Self { low_cut: 5.0, high_cut: 500.0, order: 4, fs }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let nyq = self.fs / 2.0;
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(DspError::InvalidSpec(format!("fs = {}", self.fs)));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(DspError::InvalidSpec(format!(
                "order must be a positive even number, got {}",
                self.order
            )));
        }
        if !(self.low_cut > 0.0 && self.low_cut < self.high_cut && self.high_cut < nyq) {
            return Err(DspError::InvalidSpec(format!(
                "need 0 < low_cut ({}) < high_cut ({}) < fs/2 ({nyq})",
                self.low_cut, self.high_cut
            )));
        }
        Ok(())
    }

    /// Upper edge actually used by the design, pulled below 0.495·fs.
    pub fn effective_high_cut(&self) -> f64 {
        self.high_cut.min(0.495 * self.fs)
    }
}

/// Second-order section, `a[0]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Highpass,
    Lowpass,
}

impl Biquad {
    /// Complex gain at frequency `f` for sampling rate `fs`.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * f / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z1 * self.a[1] + z2 * self.a[2];
        num / den
    }

    /// Roots of z² + a1·z + a2.
    pub fn poles(&self) -> [Complex64; 2] {
        let (a1, a2) = (self.a[1], self.a[2]);
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub fs: f64,
    pub order: usize,
    pub low_cut: f64,
    pub high_cut: f64,
    pub sections: Vec<(SectionKind, Biquad)>,
}

impl FilterCoefficients {
    pub fn response(&self, f: f64) -> Complex64 {
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, (_, s)| acc * s.response(f, self.fs))
    }

    pub fn gain_db(&self, f: f64) -> f64 {
        20.0 * self.response(f).norm().log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .all(|(_, s)| s.poles().iter().all(|p| p.norm() < 1.0))
    }

    /// Per-section initial state for a unit step held since -inf.
    fn steady_state(&self) -> Vec<[f64; 2]> {
        let mut level = 1.0;
        self.sections
            .iter()
            .map(|(_, s)| {
                let g = s.dc_gain();
                let z1 = level * (g - s.b[0]);
                let z2 = level * (s.b[2] - s.a[2] * g);
                level *= g;
                [z1, z2]
            })
            .collect()
    }
}

/// Analog Butterworth prototype poles (unit cutoff) for the given order.
fn prototype_poles(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

/// Butterworth sections for one band edge, with the analog cutoff prewarped
/// so the digital -3 dB point lands on `cutoff`.
fn edge_sections(kind: SectionKind, order: usize, cutoff: f64, fs: f64) -> Vec<(SectionKind, Biquad)> {
    let warped = 2.0 * fs * (PI * cutoff / fs).tan();
    let mut sections = Vec::new();
    for p in prototype_poles(order) {
        // Upper half-plane representative of each conjugate pair, plus the real pole.
        if p.im < -1e-12 {
            continue;
        }
        let analog = match kind {
            SectionKind::Lowpass => p * warped,
            SectionKind::Highpass => warped / p,
        };
        let zd = bilinear(analog, fs);
        let zero_sign = match kind {
            SectionKind::Lowpass => 1.0,
            SectionKind::Highpass => -1.0,
        };
        let (mut b, a) = if p.im.abs() <= 1e-12 {
            ([1.0, zero_sign, 0.0], [1.0, -zd.re, 0.0])
        } else {
            ([1.0, 2.0 * zero_sign, 1.0], [1.0, -2.0 * zd.re, zd.norm_sqr()])
        };
        // Unity gain at DC (low-pass) or Nyquist (high-pass).
        let gain = match kind {
            SectionKind::Lowpass => a.iter().sum::<f64>() / b.iter().sum::<f64>(),
            SectionKind::Highpass => (a[0] - a[1] + a[2]) / (b[0] - b[1] + b[2]),
        };
        for c in &mut b {
            *c *= gain;
        }
        sections.push((kind, Biquad { b, a }));
    }
    sections
}

/// Butterworth band-pass as a high-pass cascade at `low_cut` followed by a
/// low-pass cascade at the (clamped) `high_cut`, each of order `order / 2`.
pub fn design_bandpass(spec: &BandpassSpec) -> Result<FilterCoefficients, DspError> {
    spec.validate()?;
    let per_edge = spec.order / 2;
    let high = spec.effective_high_cut();
    let mut sections = edge_sections(SectionKind::Highpass, per_edge, spec.low_cut, spec.fs);
    sections.extend(edge_sections(SectionKind::Lowpass, per_edge, high, spec.fs));
    Ok(FilterCoefficients {
        fs: spec.fs,
        order: spec.order,
        low_cut: spec.low_cut,
        high_cut: high,
        sections,
    })
}

fn run_cascade(coeffs: &FilterCoefficients, x: &mut [f64], init: Option<f64>) {
    let zi = init.map(|x0| {
        coeffs
            .steady_state()
            .into_iter()
            .map(|[a, b]| [a * x0, b * x0])
            .collect::<Vec<_>>()
    });
    for (i, (_, s)) in coeffs.sections.iter().enumerate() {
        let [mut z1, mut z2] = zi.as_ref().map_or([0.0, 0.0], |z| z[i]);
        let [b0, b1, b2] = s.b;
        let [_, a1, a2] = s.a;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Causal single-pass filtering from rest, for streaming use.
pub fn filter_causal(trace: &RawTrace, coeffs: &FilterCoefficients) -> ConditionedTrace {
    let mut y = trace.samples.clone();
    run_cascade(coeffs, &mut y, None);
    ConditionedTrace { samples: y, fs: trace.fs, channel: trace.channel, stage: Stage::Filtered, mvc: None }
}

/// Forward-backward filtering with odd reflection padding of `3 × order`
/// samples at each end and steady-state initial conditions.
pub fn filter_zero_phase(trace: &RawTrace, coeffs: &FilterCoefficients) -> Result<ConditionedTrace, DspError> {
    let y = filtfilt(&trace.samples, coeffs)?;
    Ok(ConditionedTrace { samples: y, fs: trace.fs, channel: trace.channel, stage: Stage::Filtered, mvc: None })
}

pub fn filtfilt(x: &[f64], coeffs: &FilterCoefficients) -> Result<Vec<f64>, DspError> {
    let pad = 3 * coeffs.order;
    let n = x.len();
    if n <= pad {
        return Err(DspError::TooShort { len: n, needed: pad });
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let x0 = ext[0];
    run_cascade(coeffs, &mut ext, Some(x0));
    ext.reverse();
    let y0 = ext[0];
    run_cascade(coeffs, &mut ext, Some(y0));
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Divides every sample by `mvc_value`. Applying this twice composes the
/// MVC values multiplicatively.
pub fn normalize_mvc(trace: &ConditionedTrace, mvc_value: f64) -> Result<ConditionedTrace, DspError> {
    if !(mvc_value > 0.0) || !mvc_value.is_finite() {
        return Err(DspError::NonPositiveMvc(mvc_value));
    }
    if trace.stage == Stage::Rectified {
        return Err(DspError::WrongStage { expected: Stage::Normalized, actual: trace.stage });
    }
    Ok(ConditionedTrace {
        samples: trace.samples.iter().map(|x| x / mvc_value).collect(),
        fs: trace.fs,
        channel: trace.channel,
        stage: Stage::Normalized,
        mvc: Some(trace.mvc.unwrap_or(1.0) * mvc_value),
    })
}

/// Full-wave rectification. Rectifying an already rectified trace is a no-op.
pub fn rectify(trace: &ConditionedTrace) -> Result<ConditionedTrace, DspError> {
    match trace.stage {
        Stage::Normalized | Stage::Rectified => Ok(ConditionedTrace {
            samples: trace.samples.iter().map(|x| x.abs()).collect(),
            stage: Stage::Rectified,
            ..trace.clone_meta()
        }),
        Stage::Filtered => Err(DspError::WrongStage { expected: Stage::Normalized, actual: trace.stage }),
    }
}

pub fn rms(segment: &[f64]) -> Result<f64, DspError> {
    if segment.is_empty() {
        return Err(DspError::EmptySegment);
    }
    let ss: f64 = segment.iter().map(|x| x * x).sum();
    Ok((ss / segment.len() as f64).sqrt())
}

/// MVC reference: the largest 250 ms moving-window RMS of a filtered
/// maximal-contraction recording.
pub fn mvc_value(filtered_mvc_trial: &[f64], fs: f64) -> Result<f64, DspError> {
    if filtered_mvc_trial.is_empty() {
        return Err(DspError::EmptySegment);
    }
    let win = ((0.25 * fs).round() as usize).clamp(1, filtered_mvc_trial.len());
    let mut acc: f64 = filtered_mvc_trial[..win].iter().map(|x| x * x).sum();
    let mut best = acc;
    for i in win..filtered_mvc_trial.len() {
        acc += filtered_mvc_trial[i].powi(2) - filtered_mvc_trial[i - win].powi(2);
        best = best.max(acc);
    }
    let value = (best.max(0.0) / win as f64).sqrt();
    if value > 0.0 {
        Ok(value)
    } else {
        Err(DspError::NonPositiveMvc(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sine(freq: f64, fs: f64, secs: f64, amp: f64) -> Vec<f64> {
        let n = (fs * secs) as usize;
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn spec(low: f64, high: f64) -> BandpassSpec {
        BandpassSpec { low_cut: low, high_cut: high, order: 4, fs: 2000.0 }
    }

    fn normalized(samples: Vec<f64>) -> ConditionedTrace {
        ConditionedTrace::from_parts(samples, 2000.0, Muscle::LD, Stage::Normalized, Some(1.0)).unwrap()
    }

    #[test]
    fn passband_and_dc() {
        let c = design_bandpass(&spec(5.0, 495.0)).unwrap();
        assert!(c.gain_db(50.0).abs() < 1.0);
        // Exactly zero at DC: every high-pass numerator sums to zero.
        for (kind, s) in &c.sections {
            if *kind == SectionKind::Highpass {
                assert_eq!(s.b.iter().sum::<f64>(), 0.0);
            }
        }
        assert_eq!(c.response(0.0).norm(), 0.0);
        let center = (5.0f64 * 495.0).sqrt();
        assert!(c.gain_db(center).abs() < 0.1);
    }

    #[test]
    fn cutoff_points_are_minus_three_db() {
        let c = design_bandpass(&spec(20.0, 300.0)).unwrap();
        // Each edge is a 2nd-order Butterworth; the other edge contributes a little.
        assert!((c.gain_db(20.0) + 3.01).abs() < 0.1, "{}", c.gain_db(20.0));
        assert!((c.gain_db(300.0) + 3.01).abs() < 0.1, "{}", c.gain_db(300.0));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(design_bandpass(&spec(5.0, 1000.0)), Err(DspError::InvalidSpec(_))));
        assert!(matches!(design_bandpass(&spec(0.0, 100.0)), Err(DspError::InvalidSpec(_))));
        assert!(matches!(design_bandpass(&spec(200.0, 100.0)), Err(DspError::InvalidSpec(_))));
        let odd = BandpassSpec { order: 3, ..spec(5.0, 400.0) };
        assert!(matches!(design_bandpass(&odd), Err(DspError::InvalidSpec(_))));
    }

    #[test]
    fn emg_band_is_legal_and_clamped_only_near_nyquist() {
        let c = design_bandpass(&BandpassSpec::emg_default(2000.0)).unwrap();
        assert_eq!(c.high_cut, 500.0);
        let near = design_bandpass(&spec(5.0, 999.0)).unwrap();
        assert_abs_diff_eq!(near.high_cut, 990.0, epsilon = 1e-9);
    }

    #[test]
    fn all_poles_inside_unit_circle() {
        for order in [2, 4, 6, 8] {
            for (lo, hi) in [(5.0, 500.0), (1.0, 990.0), (10.0, 20.0)] {
                let c = design_bandpass(&BandpassSpec { low_cut: lo, high_cut: hi, order, fs: 2000.0 }).unwrap();
                assert!(c.is_stable(), "order {order} band {lo}-{hi}");
            }
        }
    }

    #[test]
    fn zero_phase_tone_gains() {
        let c = design_bandpass(&spec(5.0, 495.0)).unwrap();
        let tone = sine(100.0, 2000.0, 10.0, 1.0);
        let raw = RawTrace::new(tone.clone(), 2000.0, Muscle::LD).unwrap();
        let y = filter_zero_phase(&raw, &c).unwrap();
        let ratio = rms(y.samples()).unwrap() / rms(&tone).unwrap();
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");

        let low = sine(1.0, 2000.0, 10.0, 1.0);
        let raw = RawTrace::new(low.clone(), 2000.0, Muscle::LD).unwrap();
        let y = filter_zero_phase(&raw, &c).unwrap();
        let att = 20.0 * (rms(y.samples()).unwrap() / rms(&low).unwrap()).log10();
        assert!(att <= -20.0, "{att}");
    }

    #[test]
    fn zero_in_zero_out_and_length_preserved() {
        let c = design_bandpass(&spec(5.0, 495.0)).unwrap();
        let raw = RawTrace::new(vec![0.0; 500], 2000.0, Muscle::PD).unwrap();
        let y = filter_zero_phase(&raw, &c).unwrap();
        assert_eq!(y.len(), 500);
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_for_padding() {
        let c = design_bandpass(&spec(5.0, 495.0)).unwrap();
        let raw = RawTrace::new(vec![1.0; 12], 2000.0, Muscle::PD).unwrap();
        assert!(matches!(filter_zero_phase(&raw, &c), Err(DspError::TooShort { .. })));
        let raw = RawTrace::new(vec![1.0; 13], 2000.0, Muscle::PD).unwrap();
        assert!(filter_zero_phase(&raw, &c).is_ok());
    }

    #[test]
    fn impulse_response_is_symmetric() {
        let c = design_bandpass(&spec(5.0, 495.0)).unwrap();
        let n = 20001;
        let mid = n / 2;
        let mut x = vec![0.0; n];
        x[mid] = 1.0;
        let y = filtfilt(&x, &c).unwrap();
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 1..mid {
            let d = (y[mid + k] - y[mid - k]).abs() / peak;
            assert!(d <= 1e-9, "k={k} rel={d}");
        }
    }

    #[test]
    fn causal_mode_delays_the_signal() {
        let c = design_bandpass(&spec(5.0, 495.0)).unwrap();
        let tone = sine(100.0, 2000.0, 2.0, 1.0);
        let raw = RawTrace::new(tone, 2000.0, Muscle::LD).unwrap();
        let zp = filter_zero_phase(&raw, &c).unwrap();
        let causal = filter_causal(&raw, &c);
        assert_eq!(causal.len(), zp.len());
        let diff: f64 = zp.samples()[2000..3000]
            .iter()
            .zip(&causal.samples()[2000..3000])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1.0);
    }

    #[test]
    fn normalize_examples() {
        let t = ConditionedTrace::from_parts(vec![0.2, -0.4], 2000.0, Muscle::LD, Stage::Filtered, None).unwrap();
        let n = normalize_mvc(&t, 0.4).unwrap();
        assert_abs_diff_eq!(n.samples()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(n.samples()[1], -1.0, epsilon = 1e-15);
        assert_eq!(n.mvc(), Some(0.4));
        assert_eq!(normalize_mvc(&t, 0.0), Err(DspError::NonPositiveMvc(0.0)));
        let z = ConditionedTrace::from_parts(vec![0.0; 4], 2000.0, Muscle::LD, Stage::Filtered, None).unwrap();
        assert!(normalize_mvc(&z, 1.0).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rectify_examples() {
        let r = rectify(&normalized(vec![-1.0, 0.5, 0.0])).unwrap();
        assert_eq!(r.samples(), &[1.0, 0.5, 0.0]);
        assert_eq!(r.stage(), Stage::Rectified);
        let pos = normalized(vec![0.1, 0.2, 3.0]);
        assert_eq!(rectify(&pos).unwrap().samples(), pos.samples());

        let filtered = ConditionedTrace::from_parts(vec![1.0], 2000.0, Muscle::LD, Stage::Filtered, None).unwrap();
        assert!(matches!(rectify(&filtered), Err(DspError::WrongStage { .. })));
    }

    #[test]
    fn rectified_sine_mean_is_two_a_over_pi() {
        let a = 1.7;
        let r = rectify(&normalized(sine(47.3, 2000.0, 20.0, a))).unwrap();
        let mean = r.samples().iter().sum::<f64>() / r.len() as f64;
        assert_abs_diff_eq!(mean, 2.0 * a / PI, epsilon = 1e-3);
    }

    #[test]
    fn rms_examples() {
        assert_abs_diff_eq!(rms(&[3.0, 4.0]).unwrap(), 12.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(rms(&[-2.5; 7]).unwrap(), 2.5, epsilon = 1e-15);
        assert_eq!(rms(&[]), Err(DspError::EmptySegment));
        // 100 Hz over exactly 10 periods.
        let s = sine(100.0, 2000.0, 0.1, 1.0);
        assert_abs_diff_eq!(rms(&s).unwrap(), 1.0 / 2f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn mvc_picks_loudest_window() {
        let mut x = vec![0.1; 4000];
        for v in &mut x[1000..1500] {
            *v = 2.0;
        }
        assert_abs_diff_eq!(mvc_value(&x, 2000.0).unwrap(), 2.0, epsilon = 1e-9);
        assert!(mvc_value(&[0.0; 100], 2000.0).is_err());
    }

    proptest! {
        #[test]
        fn rectify_idempotent(xs in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let once = rectify(&normalized(xs)).unwrap();
            let twice = rectify(&once).unwrap();
            prop_assert_eq!(once.samples(), twice.samples());
        }

        #[test]
        fn rms_homogeneous(xs in prop::collection::vec(-10.0f64..10.0, 1..64), k in -5.0f64..5.0) {
            let scaled: Vec<f64> = xs.iter().map(|x| k * x).collect();
            let lhs = rms(&scaled).unwrap();
            let rhs = k.abs() * rms(&xs).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn normalization_composes(xs in prop::collection::vec(-10.0f64..10.0, 1..64),
                                  m1 in 0.01f64..10.0, m2 in 0.01f64..10.0) {
            let t = ConditionedTrace::from_parts(xs, 2000.0, Muscle::PD, Stage::Filtered, None).unwrap();
            let two = normalize_mvc(&normalize_mvc(&t, m1).unwrap(), m2).unwrap();
            let one = normalize_mvc(&t, m1 * m2).unwrap();
            for (a, b) in two.samples().iter().zip(one.samples()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            prop_assert!((two.mvc().unwrap() - m1 * m2).abs() <= 1e-12 * m1 * m2);
        }
    }
}
