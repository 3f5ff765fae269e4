//! Spectrogram regressor: training loop, model wrapper and weight container.

mod net;

use std::collections::BTreeSet;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

pub use net::{mse_loss, Adam, CnnArch, CnnNet, Real, BN_EPS, BN_MOMENTUM};

use super::ModelError;
use crate::impl_settings;
use crate::rng::{derive_named, derive_seed, rng_from};
use crate::spectral::{log_zscore, NormScope, NormStats, RawSpectrogram, SpectrogramSample};

pub const MIN_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub dropout: f64,
    pub filters: Vec<usize>,
    pub dense: Vec<usize>,
    /// Frame count every spectrogram is cropped or padded to.
    pub frames: usize,
    pub norm_scope: NormScope,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            patience: 40,
            max_epochs: 300,
            val_fraction: 0.2,
            dropout: 0.3,
            filters: vec![32, 64, 128],
            dense: vec![128, 64],
            frames: 197,
            norm_scope: NormScope::Global,
        }
    }
}

impl_settings!(
    CnnConfig,
    "cnn",
    [learning_rate, batch_size, patience, max_epochs, val_fraction, dropout, filters, dense, frames, norm_scope]
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub train_trials: Vec<String>,
    pub val_trials: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub config: CnnConfig,
    pub seed: u64,
    pub stats: NormStats,
    pub net: CnnNet<f32>,
    pub log: TrainingLog,
}

/// Crops (centred) or zero-pads the frame axis of a freq-major matrix.
pub fn fit_frames(values: &[f64], n_freq: usize, n_time: usize, frames: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_freq * frames];
    let (src0, dst0, len) = if n_time >= frames {
        ((n_time - frames) / 2, 0, frames)
    } else {
        (0, (frames - n_time) / 2, n_time)
    };
    for f in 0..n_freq {
        out[f * frames + dst0..f * frames + dst0 + len].copy_from_slice(&values[f * n_time + src0..f * n_time + src0 + len]);
    }
    out
}

fn check_shapes(samples: &[SpectrogramSample]) -> Result<(usize, usize), ModelError> {
    let first = samples.first().ok_or(ModelError::EmptyData)?;
    let n_ch = first.channels.len();
    let n_freq = first.channels.first().map_or(0, |c| c.n_freq());
    if n_ch == 0 || n_freq == 0 {
        return Err(ModelError::ShapeMismatch("empty spectrogram".into()));
    }
    for s in samples {
        if s.channels.len() != n_ch || s.channels.iter().any(|c| c.n_freq() != n_freq || c.n_time() == 0) {
            return Err(ModelError::ShapeMismatch(format!(
                "{}#{}: expected {n_ch} channels of {n_freq} rows",
                s.trial, s.cycle
            )));
        }
    }
    Ok((n_ch, n_freq))
}

fn encode(s: &SpectrogramSample, stats: &NormStats, frames: usize) -> Result<Vec<f32>, ModelError> {
    let mut out = Vec::new();
    for c in &s.channels {
        let z = log_zscore(c, stats).map_err(|e| ModelError::Numerical(e.to_string()))?;
        out.extend(fit_frames(&z.values, z.n_freq(), z.n_time(), frames).iter().map(|v| *v as f32));
    }
    Ok(out)
}

/// Splits trial ids into (train, validation). Validation takes
/// `ceil(fraction * trials)` whole trials when there are at least two.
fn split_trials(samples: &[SpectrogramSample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>, TrainingLog) {
    let trials: Vec<String> = samples.iter().map(|s| s.trial.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = rng_from(derive_named(seed, "cnn-split"));
    let mut log = TrainingLog::default();
    if trials.len() >= 2 {
        let k = ((fraction * trials.len() as f64).ceil() as usize).clamp(1, trials.len() - 1);
        let mut pick = index::sample(&mut rng, trials.len(), k).into_vec();
        pick.sort_unstable();
        let val: BTreeSet<&str> = pick.iter().map(|&i| trials[i].as_str()).collect();
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for (i, s) in samples.iter().enumerate() {
            if val.contains(s.trial.as_str()) {
                va.push(i)
            } else {
                tr.push(i)
            }
        }
        log.val_trials = val.iter().map(|s| s.to_string()).collect();
        log.train_trials = trials.iter().filter(|t| !val.contains(t.as_str())).cloned().collect();
        (tr, va, log)
    } else {
        let n = samples.len();
        let k = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        let mut va = index::sample(&mut rng, n, k).into_vec();
        va.sort_unstable();
        let tr = (0..n).filter(|i| va.binary_search(i).is_err()).collect();
        log.train_trials = trials.clone();
        log.val_trials = trials;
        (tr, va, log)
    }
}

/// Batch boundaries over `n` items; a trailing batch of one joins the
/// previous batch so batch-norm statistics are always defined.
fn batches(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size.max(1)).map(|s| (s, (s + size).min(n))).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.1 - b.0 == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().1 = last.1;
    }
    out
}

fn gather(x: &[f32], dim: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&x[i * dim..(i + 1) * dim]);
    }
    out
}

fn eval_loss(net: &CnnNet<f32>, x: &[f32], y: &[f32], dim: usize, batch: usize) -> f64 {
    let mut sse = 0.0;
    for (a, b) in batches(y.len(), batch) {
        let out = net.predict(&x[a * dim..b * dim], b - a);
        sse += out.iter().zip(&y[a..b]).map(|(o, t)| ((o - t) as f64).powi(2)).sum::<f64>();
    }
    sse / y.len() as f64
}

/// Trains on per-cycle spectrograms labelled with FCF. Normalization
/// statistics come from the training portion only; the best-validation
/// weights are restored at the end.
pub fn train_cnn(samples: &[SpectrogramSample], cfg: &CnnConfig, seed: u64) -> Result<CnnModel, ModelError> {
    if samples.len() < MIN_SAMPLES {
        return Err(ModelError::TooFewSamples { got: samples.len(), needed: MIN_SAMPLES });
    }
    let (n_ch, n_freq) = check_shapes(samples)?;
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(ModelError::InvalidConfig("cnn needs learning_rate > 0, batch_size > 0, val_fraction in [0, 1)".into()));
    }
    let arch = CnnArch {
        in_channels: n_ch,
        height: n_freq,
        width: cfg.frames,
        filters: cfg.filters.clone(),
        dense: cfg.dense.clone(),
        dropout: cfg.dropout,
    };
    arch.validate().map_err(ModelError::InvalidConfig)?;

    let (train_idx, val_idx, mut log) = split_trials(samples, cfg.val_fraction, seed);
    let train_specs: Vec<&RawSpectrogram> = train_idx.iter().flat_map(|&i| samples[i].channels.iter()).collect();
    let stats = NormStats::fit(train_specs, cfg.norm_scope).map_err(|e| ModelError::Numerical(e.to_string()))?;

    let dim = arch.input_len();
    let mut x = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        x.extend(encode(s, &stats, cfg.frames)?);
    }
    let y: Vec<f32> = samples.iter().map(|s| s.fcf as f32).collect();
    let x_val = gather(&x, dim, &val_idx);
    let y_val: Vec<f32> = val_idx.iter().map(|&i| y[i]).collect();

    let mut net = CnnNet::<f32>::new(arch, &mut rng_from(derive_named(seed, "cnn-init")));
    let mean_y = train_idx.iter().map(|&i| samples[i].fcf).sum::<f64>() / train_idx.len() as f64;
    *net.output_bias_mut() = mean_y as f32;
    let mut adam = Adam::new(net.params.len(), cfg.learning_rate);
    let mut order = train_idx.clone();
    let mut best = net.clone();
    log.best_val_loss = eval_loss(&net, &x_val, &y_val, dim, cfg.batch_size);
    let mut wait = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_from(derive_seed(derive_named(seed, "cnn-epoch"), epoch as u64));
        order.shuffle(&mut rng);
        let (mut sse, mut count) = (0.0, 0usize);
        for (a, b) in batches(order.len(), cfg.batch_size) {
            let xb = gather(&x, dim, &order[a..b]);
            let yb: Vec<f32> = order[a..b].iter().map(|&i| y[i]).collect();
            let (out, cache) = net.forward_train(&xb, b - a, Some(&mut rng));
            let (loss, dout) = mse_loss(&out, &yb);
            let grad = net.backward(&cache, &dout);
            adam.step(&mut net.params, &grad);
            net.update_running_stats(&cache);
            sse += loss * (b - a) as f64;
            count += b - a;
        }
        let val_loss = eval_loss(&net, &x_val, &y_val, dim, cfg.batch_size);
        log.epochs.push(EpochRecord { epoch, train_loss: sse / count as f64, val_loss });
        log::debug!("cnn epoch {epoch}: train {:.5} val {:.5}", sse / count as f64, val_loss);
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = net.clone();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok(CnnModel { config: cfg.clone(), seed, stats, net: best, log })
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: CnnConfig,
    seed: u64,
    arch: CnnArch,
    stats: NormStats,
    log: TrainingLog,
}

pub const CNN_MAGIC: &[u8; 8] = b"FCFCNN\0\0";
const CNN_VERSION: u32 = 1;

impl CnnModel {
    pub fn input_shape(&self) -> (usize, usize) {
        (self.net.arch.in_channels, self.net.arch.height)
    }

    /// Raw network outputs, one per sample.
    pub fn predict_raw(&self, samples: &[SpectrogramSample]) -> Result<Vec<f64>, ModelError> {
        let (n_ch, n_freq) = self.input_shape();
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            if s.channels.len() != n_ch || s.channels.iter().any(|c| c.n_freq() != n_freq) {
                return Err(ModelError::ShapeMismatch(format!(
                    "{}#{}: model expects {n_ch} channels of {n_freq} rows",
                    s.trial, s.cycle
                )));
            }
            let x = encode(s, &self.stats, self.config.frames)?;
            out.push(self.net.predict(&x, 1)[0] as f64);
        }
        Ok(out)
    }

    /// Magic, version, JSON header length and header, then parameters and
    /// running statistics as little-endian f32 arrays with u32 lengths.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            arch: self.net.arch.clone(),
            stats: self.stats.clone(),
            log: self.log.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        let io = |e: std::io::Error| ModelError::Format(e.to_string());
        w.write_all(CNN_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CNN_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(json.len() as u32).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for v in [&self.net.params, &self.net.running_mean, &self.net.running_var] {
            w.write_u32::<LittleEndian>(v.len() as u32).map_err(io)?;
            for x in v.iter() {
                w.write_f32::<LittleEndian>(*x).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let io = |e: std::io::Error| ModelError::Format(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CNN_MAGIC {
            return Err(ModelError::Format("not a CNN weight file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CNN_VERSION {
            return Err(ModelError::Format(format!("unsupported CNN file version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut arrays = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let v: Vec<f32> = (0..n).map(|_| r.read_f32::<LittleEndian>()).collect::<Result<_, _>>().map_err(io)?;
            arrays.push(v);
        }
        let var = arrays.pop().unwrap();
        let mean = arrays.pop().unwrap();
        let params = arrays.pop().unwrap();
        let net = CnnNet::from_parts(h.arch, params, mean, var).map_err(ModelError::Format)?;
        Ok(Self { config: h.config, seed: h.seed, stats: h.stats, net, log: h.log })
    }
}
