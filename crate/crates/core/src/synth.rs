//! Synthetic trials: an admittance-controlled cyclic task driven by a PD
//! "human", two EMG channels whose spectrum compresses and amplitude grows
//! with the fraction of cycles to fatigue, and Borg scores.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Settings;
use crate::cycles::{self, CycleError, TaskKind, Trial, TrialMeta, KINEMATIC_RATE};
use crate::dsp::{self, BandpassSpec, DspError, Muscle, RawTrace};
use crate::impl_settings;
use crate::rng::{derive_named, derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] CycleError),
}

/// Generator knobs. Defaults follow the nominal protocol: 0.1 Hz cycles,
/// 20 cm half-excursion, 10 cm radius, m = 10 kg, b in {275, 300} kg/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frequency: f64,
    pub amplitude: f64,
    pub radius: f64,
    pub mass: f64,
    pub dampings: Vec<f64>,
    pub cycles_mean: f64,
    pub cycles_sd: f64,
    /// Spread of the cycle count between trials at the same damping.
    pub trial_cycles_sd: f64,
    pub cycles_min: usize,
    pub cycles_max: usize,
    pub kp: f64,
    pub kd: f64,
    /// Standard deviation of the human force noise (N).
    pub force_noise: f64,
    pub f_low: f64,
    pub f_high: f64,
    pub delta_mnf: f64,
    pub gamma_rms: f64,
    /// Relative spread of subject and trial drift rates.
    pub drift_jitter: f64,
    /// Log-sd of the per-cycle activation level.
    pub amp_jitter: f64,
    /// White noise floor as a fraction of the activation gain.
    pub noise_floor: f64,
    /// Depth of the phase-locked activation modulation.
    pub activation_depth: f64,
    pub borg_sigma: f64,
    /// MVC contraction level relative to the task activation gain.
    pub mvc_ratio: f64,
    pub mvc_duration: f64,
    pub emg_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frequency: 0.1,
            amplitude: 0.2,
            radius: 0.1,
            mass: 10.0,
            dampings: vec![275.0, 300.0],
            cycles_mean: 23.3,
            cycles_sd: 6.9,
            trial_cycles_sd: 1.5,
            cycles_min: 6,
            cycles_max: 60,
            kp: 15000.0,
            kd: 200.0,
            force_noise: 0.5,
            f_low: 60.0,
            f_high: 120.0,
            delta_mnf: 0.2,
            gamma_rms: 0.5,
            drift_jitter: 0.05,
            amp_jitter: 0.2,
            noise_floor: 0.02,
            activation_depth: 0.3,
            borg_sigma: 0.4,
            mvc_ratio: 4.0,
            mvc_duration: 5.0,
            emg_rate: 2000.0,
        }
    }
}

impl_settings!(
    SynthConfig,
    "synth",
    [
        frequency,
        amplitude,
        radius,
        mass,
        dampings,
        cycles_mean,
        cycles_sd,
        trial_cycles_sd,
        cycles_min,
        cycles_max,
        kp,
        kd,
        force_noise,
        f_low,
        f_high,
        delta_mnf,
        gamma_rms,
        drift_jitter,
        amp_jitter,
        noise_floor,
        activation_depth,
        borg_sigma,
        mvc_ratio,
        mvc_duration,
        emg_rate,
    ]
);

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParam(m.to_string()));
        if !(self.frequency > 0.0 && self.amplitude > 0.0 && self.radius > 0.0) {
            return bad("frequency, amplitude and radius must be positive");
        }
        if !(self.mass > 0.0) || self.dampings.is_empty() || self.dampings.iter().any(|b| !(*b > 0.0)) {
            return bad("mass and dampings must be positive");
        }
        if !(self.delta_mnf > 0.0 && self.delta_mnf < 1.0) || !(self.gamma_rms > 0.0) {
            return bad("need 0 < delta_mnf < 1 and gamma_rms > 0");
        }
        if !(self.f_low > 0.0 && self.f_high > 0.0) || self.f_high >= self.emg_rate / 2.0 {
            return bad("spectral shape frequencies out of range");
        }
        if self.cycles_min == 0 || self.cycles_min > self.cycles_max {
            return bad("need 1 <= cycles_min <= cycles_max");
        }
        if self.emg_rate <= 0.0 || (self.emg_rate / KINEMATIC_RATE).fract() != 0.0 {
            return bad("emg_rate must be a positive multiple of 500 Hz");
        }
        Ok(())
    }
}

/// Admittance `Y(s) = 1 / (m s + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmittanceParams {
    pub m: f64,
    pub b: f64,
    pub control_rate: f64,
}

impl AdmittanceParams {
    pub fn new(m: f64, b: f64) -> Result<Self, SynthError> {
        let p = Self { m, b, control_rate: KINEMATIC_RATE };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.m > 0.0 && self.b > 0.0 && self.control_rate > 0.0 {
            Ok(())
        } else {
            Err(SynthError::InvalidParam(format!("admittance m={}, b={}", self.m, self.b)))
        }
    }

    pub fn alpha(&self) -> f64 {
        (-self.b / (self.m * self.control_rate)).exp()
    }
}

/// One admittance-controlled axis, exact for force held over each tick.
#[derive(Debug, Clone, Copy)]
pub struct AdmittanceAxis {
    alpha: f64,
    b: f64,
    dt: f64,
    pub x: f64,
    pub v: f64,
}

impl AdmittanceAxis {
    pub fn new(params: &AdmittanceParams, x: f64, v: f64) -> Self {
        Self { alpha: params.alpha(), b: params.b, dt: 1.0 / params.control_rate, x, v }
    }

    pub fn step(&mut self, force: f64) {
        let v_next = self.alpha * self.v + (1.0 - self.alpha) * force / self.b;
        self.x += 0.5 * self.dt * (self.v + v_next);
        self.v = v_next;
    }
}

/// Velocity after each of `ticks` ticks of constant `force` from rest.
pub fn step_response(params: &AdmittanceParams, force: f64, ticks: usize) -> Vec<f64> {
    let mut axis = AdmittanceAxis::new(params, 0.0, 0.0);
    (0..ticks)
        .map(|_| {
            axis.step(force);
            axis.v
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Half-excursion for linear tasks, radius for the circular task (m).
    pub amplitude: f64,
    pub frequency: f64,
    pub n_cycles: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, n_cycles: usize, cfg: &SynthConfig) -> Self {
        let amplitude = if kind == TaskKind::Circular { cfg.radius } else { cfg.amplitude };
        Self { kind, amplitude, frequency: cfg.frequency, n_cycles }
    }

    /// Commanded cycles plus a quarter-cycle lead-in and lead-out.
    pub fn duration(&self) -> f64 {
        (self.n_cycles as f64 + 0.5) / self.frequency
    }

    /// Cycle phase; integer values are cycle boundaries, 0 is the first.
    pub fn phase(&self, t: f64) -> f64 {
        t * self.frequency - 0.25
    }

    /// Reference position and velocity at time `t`.
    pub fn reference(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let w = 2.0 * PI * self.frequency;
        let a = 2.0 * PI * self.phase(t);
        let (s, c) = a.sin_cos();
        let amp = self.amplitude;
        match self.kind {
            TaskKind::Lateral => ([amp * s, 0.0, 0.0], [amp * w * c, 0.0, 0.0]),
            TaskKind::Vertical => ([0.0, 0.0, amp * s], [0.0, 0.0, amp * w * c]),
            TaskKind::Circular => ([amp * c, amp * s, 0.0], [-amp * w * s, amp * w * c, 0.0]),
        }
    }

    fn active_axes(&self) -> [bool; 3] {
        match self.kind {
            TaskKind::Lateral => [true, false, false],
            TaskKind::Vertical => [false, false, true],
            TaskKind::Circular => [true, true, false],
        }
    }
}

/// PD tracker of the reference cursor, plus Gaussian force noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanModel {
    pub kp: f64,
    pub kd: f64,
    pub force_noise: f64,
}

impl HumanModel {
    pub fn from_config(cfg: &SynthConfig) -> Self {
        Self { kp: cfg.kp, kd: cfg.kd, force_noise: cfg.force_noise }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub position: [Vec<f64>; 3],
    pub velocity: [Vec<f64>; 3],
    pub force: [Vec<f64>; 3],
}

/// Runs the task at the control rate. Axes not used by the task are held
/// (their admittance disabled), so only force noise shows up there.
pub fn simulate_admittance(
    task: &TaskSpec,
    params: &AdmittanceParams,
    human: &HumanModel,
    rng: &mut ChaCha8Rng,
) -> Result<Kinematics, SynthError> {
    params.validate()?;
    if !(task.amplitude > 0.0 && task.frequency > 0.0 && task.n_cycles >= 1) {
        return Err(SynthError::InvalidParam("task amplitude, frequency and cycle count".into()));
    }
    let n = (task.duration() * params.control_rate).round() as usize;
    let dt = 1.0 / params.control_rate;
    let active = task.active_axes();
    let (x0, v0) = task.reference(0.0);
    let mut axes: [AdmittanceAxis; 3] = std::array::from_fn(|i| AdmittanceAxis::new(params, x0[i], v0[i]));
    let mut out = Kinematics {
        position: std::array::from_fn(|_| Vec::with_capacity(n)),
        velocity: std::array::from_fn(|_| Vec::with_capacity(n)),
        force: std::array::from_fn(|_| Vec::with_capacity(n)),
    };
    for k in 0..n {
        let (xr, vr) = task.reference(k as f64 * dt);
        for i in 0..3 {
            let noise: f64 = human.force_noise * rng.sample::<f64, _>(StandardNormal);
            let ax = &mut axes[i];
            let f = if active[i] { human.kp * (xr[i] - ax.x) + human.kd * (vr[i] - ax.v) + noise } else { noise };
            out.position[i].push(ax.x);
            out.velocity[i].push(ax.v);
            out.force[i].push(f);
            if active[i] {
                ax.step(f);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct FirstOrder {
    b0: f64,
    b1: f64,
    a1: f64,
    x1: f64,
    y1: f64,
}

impl FirstOrder {
    /// Bilinear transform of `s / (s + w)` (high) or `w / (s + w)` (low).
    fn design(w: f64, k: f64, high: bool) -> Self {
        let d = k + w;
        let (b0, b1) = if high { (k / d, -k / d) } else { (w / d, w / d) };
        Self { b0, b1, a1: (w - k) / d, x1: 0.0, y1: 0.0 }
    }

    fn retune(&mut self, other: &FirstOrder) {
        self.b0 = other.b0;
        self.b1 = other.b1;
        self.a1 = other.a1;
    }

    fn run(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b1 * self.x1 - self.a1 * self.y1;
        self.x1 = x;
        self.y1 = y;
        y
    }
}

/// Gaussian noise shaped by `s / ((s + wl)(s + wh)^2)` and scaled to unit
/// variance. `set_scale(c)` moves both corner frequencies to `c` times their
/// base values, compressing the spectrum when `c < 1`.
#[derive(Debug, Clone)]
pub struct ShapedNoise {
    f_low: f64,
    f_high: f64,
    fs: f64,
    scale: f64,
    sections: [FirstOrder; 3],
    gain: f64,
}

impl ShapedNoise {
    pub fn new(f_low: f64, f_high: f64, fs: f64) -> Self {
        let mut s = Self {
            f_low,
            f_high,
            fs,
            scale: f64::NAN,
            sections: [FirstOrder::design(1.0, 1.0, true); 3],
            gain: 1.0,
        };
        s.set_scale(1.0);
        s
    }

    fn design(&self, c: f64) -> [FirstOrder; 3] {
        let k = 2.0 * self.fs;
        let wl = 2.0 * PI * self.f_low * c;
        let wh = 2.0 * PI * self.f_high * c;
        [FirstOrder::design(wl, k, true), FirstOrder::design(wh, k, false), FirstOrder::design(wh, k, false)]
    }

    pub fn set_scale(&mut self, c: f64) {
        if c == self.scale {
            return;
        }
        let fresh = self.design(c);
        let mut probe = fresh;
        let mut energy = 0.0;
        for i in 0..(4.0 * self.fs) as usize {
            let mut y = if i == 0 { 1.0 } else { 0.0 };
            for s in &mut probe {
                y = s.run(y);
            }
            energy += y * y;
            // The tail decays geometrically; stop before it turns subnormal.
            if i > 16 && probe.iter().all(|s| s.y1.abs() < 1e-20 && s.x1.abs() < 1e-20) {
                break;
            }
        }
        for (s, f) in self.sections.iter_mut().zip(&fresh) {
            s.retune(f);
        }
        self.gain = 1.0 / energy.sqrt();
        self.scale = c;
    }

    /// Filters one white input sample.
    pub fn next(&mut self, white: f64) -> f64 {
        let mut y = white;
        for s in &mut self.sections {
            y = s.run(y);
        }
        y * self.gain
    }

    /// Power spectral shape `|H(f)|^2` at the current scale (unit variance).
    pub fn power_at(&self, f: f64) -> f64 {
        let z = num_complex::Complex64::from_polar(1.0, -2.0 * PI * f / self.fs);
        let h = self.sections.iter().fold(num_complex::Complex64::new(self.gain, 0.0), |acc, s| {
            acc * (s.b0 + s.b1 * z) / (1.0 + s.a1 * z)
        });
        h.norm_sqr()
    }

    /// Mean frequency of the shaped spectrum at scale `c`.
    pub fn expected_mnf(&self, c: f64) -> f64 {
        let mut probe = self.clone();
        probe.set_scale(c);
        let n = 4000;
        let df = self.fs / 2.0 / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 1..n {
            let f = i as f64 * df;
            let p = probe.power_at(f);
            num += f * p;
            den += p;
        }
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuscleProfile {
    pub f_low: f64,
    pub f_high: f64,
    /// Activation standard deviation (mV) at the start of the trial.
    pub gain: f64,
    /// Phase of peak activation within the cycle (rad).
    pub phase_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: String,
    pub ld: MuscleProfile,
    pub pd: MuscleProfile,
    pub ad: MuscleProfile,
    pub delta_mnf: f64,
    pub gamma_rms: f64,
    pub noise_floor: f64,
    pub amp_jitter: f64,
    pub activation_depth: f64,
    pub borg_sigma: f64,
    pub mvc_ratio: f64,
    /// Cycles to fatigue per damping level, as `(b, N)`.
    pub cycles_to_fatigue: Vec<(f64, usize)>,
}

impl SubjectProfile {
    /// Profile at the configured defaults with no subject variation.
    pub fn nominal(cfg: &SynthConfig, id: &str) -> Self {
        let muscle = |gain, phase_offset, shift: f64| MuscleProfile {
            f_low: cfg.f_low * shift,
            f_high: cfg.f_high * shift,
            gain,
            phase_offset,
        };
        Self {
            id: id.to_string(),
            ld: muscle(0.12, 0.0, 1.0),
            pd: muscle(0.08, PI, 1.0),
            ad: muscle(0.10, 0.5 * PI, 1.15),
            delta_mnf: cfg.delta_mnf,
            gamma_rms: cfg.gamma_rms,
            noise_floor: cfg.noise_floor,
            amp_jitter: cfg.amp_jitter,
            activation_depth: cfg.activation_depth,
            borg_sigma: cfg.borg_sigma,
            mvc_ratio: cfg.mvc_ratio,
            cycles_to_fatigue: cfg
                .dampings
                .iter()
                .map(|&b| (b, cfg.cycles_mean.round().clamp(cfg.cycles_min as f64, cfg.cycles_max as f64) as usize))
                .collect(),
        }
    }

    /// Draws a subject around the nominal profile.
    pub fn draw(cfg: &SynthConfig, id: &str, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut p = Self::nominal(cfg, id);
        for m in [&mut p.ld, &mut p.pd, &mut p.ad] {
            m.f_low *= rng.gen_range(0.9..1.1);
            m.f_high *= rng.gen_range(0.9..1.1);
            m.gain *= rng.gen_range(0.8..1.25);
        }
        let jitter = Normal::new(1.0, cfg.drift_jitter).expect("finite sd");
        p.delta_mnf = (cfg.delta_mnf * jitter.sample(&mut rng)).clamp(0.01, 0.9);
        p.gamma_rms = (cfg.gamma_rms * jitter.sample(&mut rng)).max(0.01);
        let n_dist = Normal::new(cfg.cycles_mean, cfg.cycles_sd).expect("finite sd");
        for entry in &mut p.cycles_to_fatigue {
            let n: f64 = n_dist.sample(&mut rng);
            entry.1 = n.round().clamp(cfg.cycles_min as f64, cfg.cycles_max as f64) as usize;
        }
        p
    }

    pub fn muscle(&self, m: Muscle) -> &MuscleProfile {
        match m {
            Muscle::LD => &self.ld,
            Muscle::PD => &self.pd,
            Muscle::AD => &self.ad,
        }
    }

    pub fn cycles_for(&self, b: f64) -> usize {
        self.cycles_to_fatigue
            .iter()
            .min_by(|x, y| (x.0 - b).abs().total_cmp(&(y.0 - b).abs()))
            .map_or(1, |e| e.1)
    }
}

/// Per-sample phase and fatigue fraction driving the EMG model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgSchedule {
    pub fs: f64,
    pub phase: Vec<f64>,
    pub fcf: Vec<f64>,
}

impl EmgSchedule {
    /// `fcf = clamp(phase / N, 0, 1)` over the whole task.
    pub fn for_task(task: &TaskSpec, fs: f64, n_samples: usize) -> Self {
        let n = task.n_cycles as f64;
        let phase: Vec<f64> = (0..n_samples).map(|i| task.phase(i as f64 / fs)).collect();
        let fcf = phase.iter().map(|p| (p / n).clamp(0.0, 1.0)).collect();
        Self { fs, phase, fcf }
    }
}

/// Drift rates actually applied to one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub delta_mnf: f64,
    pub gamma_rms: f64,
}

const SHAPE_CHUNK_SECS: f64 = 0.25;

/// One EMG channel: phase-locked activation growing as `1 + γ·fcf`, per-cycle
/// log-normal level jitter, spectrum compressed by `1 − δ·fcf`, plus a white
/// noise floor.
pub fn synth_emg_channel(
    schedule: &EmgSchedule,
    muscle: &MuscleProfile,
    profile: &SubjectProfile,
    drift: Drift,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = schedule.phase.len();
    let n_slots = schedule.phase.iter().fold(0.0f64, |m, p| m.max(*p)).floor().max(0.0) as usize + 2;
    let level = Normal::new(0.0, profile.amp_jitter.max(0.0)).expect("finite sd");
    let jitter: Vec<f64> = (0..n_slots).map(|_| level.sample(rng).exp()).collect();
    let mut shaped = ShapedNoise::new(muscle.f_low, muscle.f_high, schedule.fs);
    let chunk = ((SHAPE_CHUNK_SECS * schedule.fs) as usize).max(1);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let mid = schedule.fcf[(start + end) / 2];
        shaped.set_scale(1.0 - drift.delta_mnf * mid);
        for i in start..end {
            let phase = schedule.phase[i];
            let slot = ((phase.floor() + 1.0).max(0.0) as usize).min(n_slots - 1);
            let activation = 1.0 + profile.activation_depth * (2.0 * PI * phase + muscle.phase_offset).sin();
            let amp = muscle.gain * activation * (1.0 + drift.gamma_rms * schedule.fcf[i]) * jitter[slot];
            let w: f64 = rng.sample(StandardNormal);
            let floor: f64 = rng.sample(StandardNormal);
            out.push(amp * shaped.next(w) + muscle.gain * profile.noise_floor * floor);
        }
    }
    out
}

/// Two-channel EMG for the given muscles.
pub fn synth_emg(
    schedule: &EmgSchedule,
    profile: &SubjectProfile,
    muscles: [Muscle; 2],
    drift: Drift,
    seed: u64,
) -> [Vec<f64>; 2] {
    std::array::from_fn(|c| {
        let mut rng = rng_from(derive_named(seed, &format!("emg{}", c + 1)));
        synth_emg_channel(schedule, profile.muscle(muscles[c]), profile, drift, &mut rng)
    })
}

/// MVC value from a synthesized maximal contraction of the muscle.
pub fn synth_mvc(profile: &SubjectProfile, muscle: Muscle, duration: f64, fs: f64, seed: u64) -> Result<f64, SynthError> {
    let m = profile.muscle(muscle);
    let mut rng = rng_from(seed);
    let mut shaped = ShapedNoise::new(m.f_low, m.f_high, fs);
    let n = (duration * fs).round() as usize;
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            let floor: f64 = rng.sample(StandardNormal);
            m.gain * profile.mvc_ratio * shaped.next(w) + m.gain * profile.noise_floor * floor
        })
        .collect();
    let raw = RawTrace::new(samples, fs, muscle)?;
    let coeffs = dsp::design_bandpass(&BandpassSpec::emg_default(fs))?;
    let filtered = dsp::filter_zero_phase(&raw, &coeffs)?;
    Ok(dsp::mvc_value(filtered.samples(), fs)?)
}

/// Borg score per cycle: `clamp(round(10 k/N + noise), 0, 10)`, with the last
/// cycle at 10.
pub fn borg_scores(n_cycles: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sd");
    let mut s: Vec<f64> = (1..=n_cycles)
        .map(|k| {
            let e: f64 = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (10.0 * k as f64 / n_cycles as f64 + e).round().clamp(0.0, 10.0)
        })
        .collect();
    if let Some(last) = s.last_mut() {
        *last = 10.0;
    }
    s
}

/// Hidden labels of a synthetic trial.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub n_cycles: usize,
    /// Kinematic sample index of each commanded cycle boundary (N + 1 values).
    pub boundaries: Vec<usize>,
    pub drift: Drift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrial {
    pub trial: Trial,
    pub truth: GroundTruth,
}

/// Generates one trial. Every random stream is derived from `seed`.
pub fn synth_trial(
    cfg: &SynthConfig,
    profile: &SubjectProfile,
    task: &TaskSpec,
    params: &AdmittanceParams,
    trial_id: &str,
    seed: u64,
) -> Result<SynthTrial, SynthError> {
    cfg.validate()?;
    let human = HumanModel::from_config(cfg);
    let kin = simulate_admittance(task, params, &human, &mut rng_from(derive_named(seed, "force")))?;
    let n_kin = kin.position[0].len();
    let ratio = (cfg.emg_rate / params.control_rate).round() as usize;
    let schedule = EmgSchedule::for_task(task, cfg.emg_rate, n_kin * ratio);

    let mut drift_rng = rng_from(derive_named(seed, "drift"));
    let jitter = Normal::new(1.0, cfg.drift_jitter).expect("finite sd");
    let drift = Drift {
        delta_mnf: (profile.delta_mnf * jitter.sample(&mut drift_rng)).clamp(0.01, 0.9),
        gamma_rms: (profile.gamma_rms * jitter.sample(&mut drift_rng)).max(0.01),
    };
    let muscles = task.kind.muscles();
    let [e1, e2] = synth_emg(&schedule, profile, muscles, drift, seed);
    let mvc1 = synth_mvc(profile, muscles[0], cfg.mvc_duration, cfg.emg_rate, derive_named(seed, "mvc1"))?;
    let mvc2 = synth_mvc(profile, muscles[1], cfg.mvc_duration, cfg.emg_rate, derive_named(seed, "mvc2"))?;
    let srf = borg_scores(task.n_cycles, profile.borg_sigma, &mut rng_from(derive_named(seed, "borg")));

    let mut generator: BTreeMap<String, String> = cfg.echo().into_iter().collect();
    generator.insert("seed".into(), seed.to_string());
    let meta = TrialMeta {
        trial: trial_id.to_string(),
        subject: profile.id.clone(),
        task: task.kind,
        b: params.b,
        m: params.m,
        mvc1,
        mvc2,
        ch1: muscles[0],
        ch2: muscles[1],
        generator,
    };
    let trial = Trial {
        meta,
        position: kin.position,
        force: kin.force,
        emg: [
            RawTrace::new(e1, cfg.emg_rate, muscles[0])?,
            RawTrace::new(e2, cfg.emg_rate, muscles[1])?,
        ],
        srf: Some(srf),
    };
    let boundaries = (0..=task.n_cycles)
        .map(|k| ((k as f64 + 0.25) / task.frequency * params.control_rate - 1e-9).ceil() as usize)
        .collect();
    Ok(SynthTrial { trial, truth: GroundTruth { n_cycles: task.n_cycles, boundaries, drift } })
}

/// A trial scheduled by [`plan_dataset`], generated on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrial {
    pub id: String,
    pub profile: SubjectProfile,
    pub task: TaskSpec,
    pub params: AdmittanceParams,
    pub seed: u64,
}

impl PlannedTrial {
    pub fn generate(&self, cfg: &SynthConfig) -> Result<SynthTrial, SynthError> {
        synth_trial(cfg, &self.profile, &self.task, &self.params, &self.id, self.seed)
    }
}

/// Subject profiles and per-trial settings for a dataset. Trial `t` of a
/// subject uses damping `dampings[t % len]`; its cycle count varies around
/// the subject's cycles-to-fatigue at that damping.
pub fn plan_dataset(
    cfg: &SynthConfig,
    n_subjects: usize,
    trials_per_subject: usize,
    tasks: &[TaskKind],
    seed: u64,
) -> Result<Vec<PlannedTrial>, SynthError> {
    cfg.validate()?;
    if n_subjects == 0 || trials_per_subject == 0 || tasks.is_empty() {
        return Err(SynthError::InvalidParam("subject, trial and task counts must be at least 1".into()));
    }
    let mut plan = Vec::new();
    for s in 0..n_subjects {
        let subject_seed = derive_seed(seed, s as u64);
        let id = format!("s{:02}", s + 1);
        let profile = SubjectProfile::draw(cfg, &id, derive_named(subject_seed, "profile"));
        for &task in tasks {
            let task_seed = derive_named(subject_seed, &task.to_string());
            for t in 0..trials_per_subject {
                let trial_seed = derive_seed(task_seed, t as u64);
                let b = cfg.dampings[t % cfg.dampings.len()];
                let mut rng = rng_from(derive_named(trial_seed, "cycles"));
                let spread = Normal::new(0.0, cfg.trial_cycles_sd.max(0.0)).expect("finite sd");
                let n = (profile.cycles_for(b) as f64 + spread.sample(&mut rng))
                    .round()
                    .clamp(cfg.cycles_min as f64, cfg.cycles_max as f64) as usize;
                plan.push(PlannedTrial {
                    id: format!("{id}_{task}_t{:02}", t + 1),
                    profile: profile.clone(),
                    task: TaskSpec::new(task, n, cfg),
                    params: AdmittanceParams::new(cfg.mass, b)?,
                    seed: trial_seed,
                });
            }
        }
    }
    Ok(plan)
}

/// Writes one trial directory per planned trial under `out`, in plan order.
pub fn synth_dataset(
    cfg: &SynthConfig,
    n_subjects: usize,
    trials_per_subject: usize,
    tasks: &[TaskKind],
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, SynthError> {
    let plan = plan_dataset(cfg, n_subjects, trials_per_subject, tasks, seed)?;
    let mut dirs = Vec::with_capacity(plan.len());
    for p in &plan {
        let st = p.generate(cfg)?;
        let dir = out.join(&p.id);
        cycles::io::write_trial(&dir, &st.trial)?;
        log::info!("wrote {} ({} cycles)", dir.display(), st.truth.n_cycles);
        dirs.push(dir);
    }
    Ok(dirs)
}
