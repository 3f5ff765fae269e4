//! Trial directories and feature CSV files.
//!
//! A trial directory holds `position.csv`, `force.csv` (`t,x,y,z` at 500 Hz),
//! `emg.csv` (`t,ch1,ch2` at 2 kHz), optional `srf.csv` (`cycle,score`) and
//! `meta.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    feature_names, CycleError, CycleFeatureVector, TaskKind, Trial, TrialFeatures, TrialMeta, EMG_RATE,
    KINEMATIC_RATE, N_FEATURES,
};
use crate::dsp::{Muscle, RawTrace};
use crate::spectral::SpectrogramSample;

fn file_err(path: &Path, message: impl Into<String>) -> CycleError {
    CycleError::File { path: path.to_path_buf(), message: message.into() }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CycleError> {
    fs::write(path, contents).map_err(|e| file_err(path, e.to_string()))
}

/// Writes `columns` sampled at `fs` with a leading time column.
fn format_table(header: &str, fs: f64, columns: &[&[f64]], decimals: usize) -> String {
    let n = columns.first().map_or(0, |c| c.len());
    let mut out = String::with_capacity(n * (12 + columns.len() * (decimals + 6)));
    out.push_str(header);
    out.push('\n');
    for i in 0..n {
        write!(out, "{:.6}", i as f64 / fs).unwrap();
        for c in columns {
            write!(out, ",{:.*}", decimals, c[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_trial(dir: &Path, trial: &Trial) -> Result<(), CycleError> {
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e.to_string()))?;
    let p = &trial.position;
    let f = &trial.force;
    write_file(
        &dir.join("position.csv"),
        &format_table("t,x,y,z", KINEMATIC_RATE, &[&p[0], &p[1], &p[2]], 6),
    )?;
    write_file(&dir.join("force.csv"), &format_table("t,x,y,z", KINEMATIC_RATE, &[&f[0], &f[1], &f[2]], 4))?;
    let fs = trial.emg[0].fs();
    write_file(
        &dir.join("emg.csv"),
        &format_table("t,ch1,ch2", fs, &[trial.emg[0].samples(), trial.emg[1].samples()], 6),
    )?;
    if let Some(srf) = &trial.srf {
        let mut out = String::from("cycle,score\n");
        for (k, s) in srf.iter().enumerate() {
            writeln!(out, "{},{}", k + 1, s).unwrap();
        }
        write_file(&dir.join("srf.csv"), &out)?;
    }
    let meta = serde_json::to_string_pretty(&trial.meta).map_err(|e| file_err(dir, e.to_string()))?;
    write_file(&dir.join("meta.json"), &(meta + "\n"))
}

/// Reads numeric columns after the header; `expected` names the header.
fn read_table(path: &Path, expected: &[&str]) -> Result<Vec<Vec<f64>>, CycleError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| file_err(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| file_err(path, e.to_string()))?.clone();
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(file_err(path, format!("header {:?}, expected {:?}", header, expected)));
    }
    let mut cols = vec![Vec::new(); expected.len()];
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| file_err(path, e.to_string()))?;
        if rec.len() != expected.len() {
            return Err(file_err(path, format!("line {}: {} fields", line + 2, rec.len())));
        }
        for (c, field) in cols.iter_mut().zip(rec.iter()) {
            let v: f64 = field
                .parse()
                .map_err(|_| file_err(path, format!("line {}: bad number '{field}'", line + 2)))?;
            if !v.is_finite() {
                return Err(file_err(path, format!("line {}: non-finite value", line + 2)));
            }
            c.push(v);
        }
    }
    if cols[0].is_empty() {
        return Err(file_err(path, "no samples"));
    }
    Ok(cols)
}

fn xyz(mut cols: Vec<Vec<f64>>) -> [Vec<f64>; 3] {
    let z = cols.pop().unwrap();
    let y = cols.pop().unwrap();
    let x = cols.pop().unwrap();
    [x, y, z]
}

/// Loads a trial directory. `srf.csv` is optional.
pub fn read_trial(dir: &Path) -> Result<Trial, CycleError> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| file_err(&meta_path, e.to_string()))?;
    let meta: TrialMeta = serde_json::from_str(&meta_text).map_err(|e| file_err(&meta_path, e.to_string()))?;

    let position = xyz(read_table(&dir.join("position.csv"), &["t", "x", "y", "z"])?);
    let force = xyz(read_table(&dir.join("force.csv"), &["t", "x", "y", "z"])?);
    let emg_path = dir.join("emg.csv");
    let mut emg_cols = read_table(&emg_path, &["t", "ch1", "ch2"])?;
    let fs = if emg_cols[0].len() > 1 {
        let dt = emg_cols[0][1] - emg_cols[0][0];
        if dt > 0.0 {
            (1.0 / dt).round()
        } else {
            return Err(file_err(&emg_path, "time column not increasing"));
        }
    } else {
        EMG_RATE
    };
    let ch2 = emg_cols.pop().unwrap();
    let ch1 = emg_cols.pop().unwrap();
    let trace = |s, m: Muscle| RawTrace::new(s, fs, m).map_err(|e| file_err(&emg_path, e.to_string()));
    let emg = [trace(ch1, meta.ch1)?, trace(ch2, meta.ch2)?];

    let srf_path = dir.join("srf.csv");
    let srf = if srf_path.exists() {
        let cols = read_table(&srf_path, &["cycle", "score"])?;
        for (i, &c) in cols[0].iter().enumerate() {
            if c != (i + 1) as f64 {
                return Err(file_err(&srf_path, format!("cycle column out of order at row {}", i + 1)));
            }
        }
        Some(cols[1].clone())
    } else {
        None
    };

    let trial = Trial { meta, position, force, emg, srf };
    trial.validate().map_err(|e| file_err(dir, e.to_string()))?;
    Ok(trial)
}

/// Trial directories directly under `root` (those holding `meta.json`),
/// sorted by name.
pub fn list_trial_dirs(root: &Path) -> Result<Vec<PathBuf>, CycleError> {
    let entries = fs::read_dir(root).map_err(|e| file_err(root, e.to_string()))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| file_err(root, e.to_string()))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

const ID_COLUMNS: [&str; 6] = ["trial", "subject", "task", "ch1", "ch2", "cycle"];

pub fn feature_csv_header() -> Vec<String> {
    let names = feature_names();
    let mut h: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend(names.iter().cloned());
    h.extend(names.iter().map(|n| format!("rel_{n}")));
    h.push("fcf".into());
    h.push("srf".into());
    h
}

/// One row per cycle: ids, 16 raw features, 16 relative-change features, FCF
/// and SRF percent (empty when absent). Numbers use shortest round-trip form.
pub fn write_feature_csv<W: std::io::Write>(w: W, trials: &[TrialFeatures]) -> Result<(), CycleError> {
    let io_err = |e: csv::Error| CycleError::File { path: PathBuf::from("<features>"), message: e.to_string() };
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(feature_csv_header()).map_err(io_err)?;
    for t in trials {
        for (k, raw) in t.raw.iter().enumerate() {
            let mut row = vec![
                t.trial.clone(),
                t.subject.clone(),
                t.task.to_string(),
                t.channels[0].to_string(),
                t.channels[1].to_string(),
                raw.cycle.to_string(),
            ];
            row.extend(raw.values.iter().map(|v| v.to_string()));
            row.extend(t.relative[k].iter().map(|v| v.to_string()));
            row.push(t.fcf[k].to_string());
            row.push(t.srf_percent.as_ref().map_or(String::new(), |s| s[k].to_string()));
            writer.write_record(&row).map_err(io_err)?;
        }
    }
    writer.flush().map_err(|e| CycleError::File { path: PathBuf::from("<features>"), message: e.to_string() })
}

/// Inverse of [`write_feature_csv`]; rows are grouped by trial in file order.
pub fn read_feature_csv(path: &Path) -> Result<Vec<TrialFeatures>, CycleError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| file_err(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| file_err(path, e.to_string()))?.clone();
    let expected = feature_csv_header();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(file_err(path, "unexpected feature CSV header"));
    }
    let mut out: Vec<TrialFeatures> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let line = line + 2;
        let rec = rec.map_err(|e| file_err(path, e.to_string()))?;
        let num = |i: usize| -> Result<f64, CycleError> {
            rec[i].parse::<f64>().map_err(|_| file_err(path, format!("line {line}: bad number '{}'", &rec[i])))
        };
        let task: TaskKind = rec[2].parse().map_err(|e: String| file_err(path, format!("line {line}: {e}")))?;
        let muscle = |i: usize| -> Result<Muscle, CycleError> {
            rec[i].parse().map_err(|e: String| file_err(path, format!("line {line}: {e}")))
        };
        let cycle: usize =
            rec[5].parse().map_err(|_| file_err(path, format!("line {line}: bad cycle '{}'", &rec[5])))?;
        let base = ID_COLUMNS.len();
        let mut raw = [0.0; N_FEATURES];
        let mut rel = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            raw[j] = num(base + j)?;
            rel[j] = num(base + N_FEATURES + j)?;
        }
        let fcf = num(base + 2 * N_FEATURES)?;
        let srf_field = &rec[base + 2 * N_FEATURES + 1];
        let srf = if srf_field.is_empty() { None } else { Some(num(base + 2 * N_FEATURES + 1)?) };

        if out.last().map_or(true, |t| t.trial != rec[0]) {
            if out.iter().any(|t| t.trial == rec[0]) {
                return Err(file_err(path, format!("line {line}: rows of trial '{}' not contiguous", &rec[0])));
            }
            out.push(TrialFeatures {
                trial: rec[0].to_string(),
                subject: rec[1].to_string(),
                task,
                channels: [muscle(3)?, muscle(4)?],
                windows: Vec::new(),
                raw: Vec::new(),
                relative: Vec::new(),
                fcf: Vec::new(),
                srf_percent: srf.map(|_| Vec::new()),
                spectrograms: None,
            });
        }
        let t = out.last_mut().unwrap();
        t.raw.push(CycleFeatureVector { trial: t.trial.clone(), cycle, values: raw });
        t.relative.push(rel);
        t.fcf.push(fcf);
        match (&mut t.srf_percent, srf) {
            (Some(v), Some(s)) => v.push(s),
            (None, None) => {}
            _ => return Err(file_err(path, format!("line {line}: SRF present for only some cycles"))),
        }
    }
    Ok(out)
}

/// Moves archived per-cycle spectrograms onto the matching trials. Every
/// trial must receive exactly one sample per cycle, in cycle order.
pub fn attach_spectrograms(trials: &mut [TrialFeatures], samples: Vec<SpectrogramSample>) -> Result<(), CycleError> {
    let mut by_trial: BTreeMap<String, Vec<SpectrogramSample>> = BTreeMap::new();
    for s in samples {
        by_trial.entry(s.trial.clone()).or_default().push(s);
    }
    for t in trials.iter_mut() {
        let mut got = by_trial.remove(&t.trial).unwrap_or_default();
        got.sort_by_key(|s| s.cycle);
        let cycles: Vec<usize> = got.iter().map(|s| s.cycle).collect();
        if cycles != (1..=t.n_cycles()).collect::<Vec<_>>() {
            return Err(CycleError::InvalidTrial(format!(
                "trial {}: spectrograms cover cycles {cycles:?}, expected 1..={}",
                t.trial,
                t.n_cycles()
            )));
        }
        t.spectrograms = Some(got.into_iter().map(|s| s.channels).collect());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycles::TrialMeta;
    use std::collections::BTreeMap;

    fn small_trial() -> Trial {
        let n = 50;
        let pos: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin() * 0.2).collect();
        let emg: Vec<f64> = (0..4 * n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.01).collect();
        Trial {
            meta: TrialMeta {
                trial: "s01_t01".into(),
                subject: "s01".into(),
                task: TaskKind::Lateral,
                b: 275.0,
                m: 10.0,
                mvc1: 0.5,
                mvc2: 0.25,
                ch1: Muscle::LD,
                ch2: Muscle::PD,
                generator: BTreeMap::from([("seed".to_string(), "7".to_string())]),
            },
            position: [pos.clone(), vec![0.0; n], vec![0.0; n]],
            force: [vec![1.5; n], vec![0.0; n], vec![0.0; n]],
            emg: [
                RawTrace::new(emg.clone(), EMG_RATE, Muscle::LD).unwrap(),
                RawTrace::new(emg, EMG_RATE, Muscle::PD).unwrap(),
            ],
            srf: Some(vec![1.0, 4.0, 10.0]),
        }
    }

    #[test]
    fn trial_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = small_trial();
        write_trial(dir.path(), &t).unwrap();
        let back = read_trial(dir.path()).unwrap();
        assert_eq!(back.meta, t.meta);
        assert_eq!(back.srf, t.srf);
        assert_eq!(back.emg[0].fs(), EMG_RATE);
        for (a, b) in back.position[0].iter().zip(&t.position[0]) {
            assert!((a - b).abs() <= 5e-7);
        }
        for (a, b) in back.emg[1].samples().iter().zip(t.emg[1].samples()) {
            assert!((a - b).abs() <= 5e-7);
        }
    }

    #[test]
    fn missing_srf_is_none_and_corrupt_emg_names_file() {
        let dir = tempfile::tempdir().unwrap();
        write_trial(dir.path(), &small_trial()).unwrap();
        fs::remove_file(dir.path().join("srf.csv")).unwrap();
        assert!(read_trial(dir.path()).unwrap().srf.is_none());

        let emg = dir.path().join("emg.csv");
        let text = fs::read_to_string(&emg).unwrap().replacen("0.000500,", "0.000500,abc", 1);
        fs::write(&emg, text).unwrap();
        let err = read_trial(dir.path()).unwrap_err().to_string();
        assert!(err.contains("emg.csv"), "{err}");
    }

    #[test]
    fn feature_csv_round_trip_is_exact() {
        let raw: Vec<CycleFeatureVector> = (1..=3)
            .map(|k| CycleFeatureVector {
                trial: "a".into(),
                cycle: k,
                values: std::array::from_fn(|j| 1.0 / (j as f64 + k as f64 + 0.3)),
            })
            .collect();
        let relative = crate::cycles::relative_change(&raw).unwrap();
        let tf = TrialFeatures {
            trial: "a".into(),
            subject: "s".into(),
            task: TaskKind::Vertical,
            channels: [Muscle::LD, Muscle::AD],
            windows: Vec::new(),
            raw,
            relative,
            fcf: crate::cycles::fcf_labels(3),
            srf_percent: Some(vec![10.0, 55.0, 100.0]),
            spectrograms: None,
        };
        let mut no_srf = tf.clone();
        no_srf.trial = "b".into();
        no_srf.srf_percent = None;
        for r in &mut no_srf.raw {
            r.trial = "b".into();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_feature_csv(fs::File::create(&path).unwrap(), &[tf.clone(), no_srf.clone()]).unwrap();
        let back = read_feature_csv(&path).unwrap();
        assert_eq!(back, vec![tf, no_srf]);
    }
}
