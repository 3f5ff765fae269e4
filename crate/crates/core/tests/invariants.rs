use fatigue_core::config::KvConfig;
use fatigue_core::cycles::{
    extract_trial, fcf_labels, relative_change, segment_cycles, CycleFeatureVector, FeatureConfig, TaskKind, TrialFeatures,
    N_FEATURES,
};
use fatigue_core::dsp::{normalize_mvc, rectify, BandpassSpec, ConditionedTrace, Muscle, RawTrace, Stage};
use fatigue_core::eval::loto_cv;
use fatigue_core::models::{train_ols, train_random_forest, ForestConfig, ModelFamily, ModelSpec, TabularDataset};
use fatigue_core::spectral::{log_zscore, psd_welch, stft_spectrogram, NormScope, NormStats, StftParams};
use fatigue_core::synth::{plan_dataset, AdmittanceParams, SynthConfig};
use proptest::prelude::*;

fn small_synth() -> SynthConfig {
    SynthConfig { frequency: 0.5, cycles_mean: 4.0, cycles_sd: 1.0, cycles_min: 2, cycles_max: 6, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raw_trace_accepts_only_finite_nonempty(xs in prop::collection::vec(-1e3f64..1e3, 0..32), fs in -10.0f64..5000.0, bad in 0usize..3) {
        let mut xs = xs;
        if bad == 1 && !xs.is_empty() {
            xs[0] = f64::NAN;
        }
        let ok = !xs.is_empty() && fs > 0.0 && xs.iter().all(|v| v.is_finite());
        prop_assert_eq!(RawTrace::new(xs, fs, Muscle::LD).is_ok(), ok);
    }

    #[test]
    fn bandpass_validation_matches_band_rule(low in -10.0f64..1200.0, high in -10.0f64..1200.0, fs in 100.0f64..4000.0) {
        let spec = BandpassSpec { low_cut: low, high_cut: high, order: 4, fs };
        prop_assert_eq!(spec.validate().is_ok(), 0.0 < low && low < high && high < fs / 2.0);
        prop_assert!(spec.effective_high_cut() < fs / 2.0);
    }

    #[test]
    fn rectified_is_nonnegative_and_mvc_must_be_positive(xs in prop::collection::vec(-5.0f64..5.0, 1..64), mvc in -2.0f64..2.0) {
        let t = ConditionedTrace::from_parts(xs.clone(), 2000.0, Muscle::PD, Stage::Filtered, None).unwrap();
        match normalize_mvc(&t, mvc) {
            Ok(n) => {
                prop_assert!(mvc > 0.0);
                for (a, b) in n.samples().iter().zip(&xs) {
                    prop_assert!((a - b / mvc).abs() <= 1e-12 * (1.0 + (b / mvc).abs()));
                }
                let r = rectify(&n).unwrap();
                prop_assert_eq!(r.stage(), Stage::Rectified);
                prop_assert!(r.samples().iter().all(|&v| v >= 0.0));
            }
            Err(_) => prop_assert!(!(mvc > 0.0)),
        }
    }

    #[test]
    fn psd_shapes_and_nonnegative(xs in prop::collection::vec(-1.0f64..1.0, 256..3000)) {
        let psd = psd_welch(&xs, 2000.0, 256, 0.5).unwrap();
        prop_assert_eq!(psd.freqs.len(), psd.power.len());
        prop_assert!(psd.df > 0.0);
        prop_assert!(psd.power.iter().all(|&p| p >= 0.0 && p.is_finite()));
    }

    #[test]
    fn fcf_labels_are_k_over_n(n in 1usize..200) {
        let l = fcf_labels(n);
        prop_assert_eq!(l.len(), n);
        prop_assert_eq!(*l.last().unwrap(), 1.0);
        prop_assert!(l.windows(2).all(|w| w[1] > w[0]));
        for (k, v) in l.iter().enumerate() {
            prop_assert_eq!(*v, (k + 1) as f64 / n as f64);
        }
    }

    #[test]
    fn dataset_rejects_ragged_or_nonfinite(n in 1usize..10, p in 1usize..5, poison in 0usize..3) {
        let mut rows = vec![vec![1.0; p]; n];
        let mut y = vec![0.5; n];
        match poison {
            1 => rows[n - 1].push(0.0),
            2 => y[0] = f64::INFINITY,
            _ => {}
        }
        let names = (0..p).map(|j| format!("x{j}")).collect();
        prop_assert_eq!(TabularDataset::new(rows, y, vec!["t".into(); n], names).is_ok(), poison == 0);
    }

    #[test]
    fn admittance_needs_positive_mass_and_damping(m in -5.0f64..20.0, b in -50.0f64..400.0) {
        prop_assert_eq!(AdmittanceParams::new(m, b).is_ok(), m > 0.0 && b > 0.0);
    }

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z]{1,12}") {
        let known = ["n_trees", "max_depth", "max_features", "bootstrap"];
        let mut kv = KvConfig::default();
        kv.insert(&format!("forest.{key}"), "3");
        let mut cfg = ForestConfig::default();
        let res = kv.apply(&mut cfg);
        prop_assert_eq!(res.is_ok(), known.contains(&key.as_str()) && key != "bootstrap");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spectrogram_bins_in_band_and_zscore_normalizes(seed in 0u64..1000, len in 400usize..4000) {
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let xs: Vec<f64> = (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let t = ConditionedTrace::from_parts(xs, 2000.0, Muscle::LD, Stage::Normalized, Some(1.0)).unwrap();
        let params = StftParams::default();
        let raw = stft_spectrogram(&t, &params).unwrap();
        prop_assert!(raw.freqs.iter().all(|&f| (params.band_low..=params.band_high).contains(&f)));
        prop_assert!(raw.values.iter().all(|v| v.is_finite()));
        let stats = NormStats::fit([&raw], NormScope::Global).unwrap();
        let z = log_zscore(&raw, &stats).unwrap();
        let n = z.values.len() as f64;
        let mean = z.values.iter().sum::<f64>() / n;
        let var = z.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() <= 0.01);
        prop_assert!((0.99..=1.01).contains(&var));
    }

    #[test]
    fn ols_coefficients_finite(seed in 0u64..1000, dup in any::<bool>()) {
        let mut state = seed + 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let n = 30;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r: Vec<f64> = (0..4).map(|_| next() * 100.0 - 50.0).collect();
                if dup {
                    r[3] = r[0];
                }
                r
            })
            .collect();
        let y = (0..n).map(|_| next()).collect();
        let names = (0..4).map(|j| format!("x{j}")).collect();
        let m = train_ols(&TabularDataset::new(rows, y, vec!["t".into(); n], names).unwrap()).unwrap();
        prop_assert!(m.weights.iter().all(|w| w.is_finite()) && m.intercept.is_finite());
    }

    #[test]
    fn forest_leaves_are_target_means(seed in 0u64..1000, depth in 1usize..6) {
        let mut state = seed + 7;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| next()).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| next()).collect();
        let names = (0..3).map(|j| format!("x{j}")).collect();
        let d = TabularDataset::new(rows.clone(), y.clone(), vec!["t".into(); n], names).unwrap();
        let cfg = ForestConfig { n_trees: 1, max_depth: depth, max_features: None, bootstrap: false };
        let m = train_random_forest(&d, &cfg, seed).unwrap();
        prop_assert_eq!(m.trees.len(), 1);
        // Group rows by leaf value; each group's prediction is its own mean.
        let preds: Vec<f64> = rows.iter().map(|r| m.predict_row(r)).collect();
        let mut leaves: Vec<f64> = preds.clone();
        leaves.sort_by(f64::total_cmp);
        leaves.dedup();
        for leaf in leaves {
            let members: Vec<f64> = preds.iter().zip(&y).filter(|(p, _)| **p == leaf).map(|(_, t)| *t).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            prop_assert!((mean - leaf).abs() <= 1e-12);
        }
        let full = train_random_forest(&d, &ForestConfig::default(), seed).unwrap();
        prop_assert_eq!(full.trees.len(), 200);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn windows_contiguous_and_features_ordered(seed in 0u64..10_000, task in 0usize..3) {
        let cfg = small_synth();
        let kind = TaskKind::ALL[task];
        let plan = plan_dataset(&cfg, 1, 1, &[kind], seed).unwrap();
        let st = plan[0].generate(&cfg).unwrap();
        let kin_dur = st.trial.position[0].len() as f64 / 500.0;
        let emg_dur = st.trial.emg[0].len() as f64 / st.trial.emg[0].fs();
        prop_assert!((kin_dur - emg_dur).abs() <= 1.0 / 500.0);
        let w = segment_cycles(&st.trial).unwrap();
        prop_assert!(w.iter().all(|c| c.end > c.start));
        prop_assert!(w.windows(2).all(|p| p[0].end == p[1].start));
        let f = extract_trial(&st.trial, &FeatureConfig::default()).unwrap();
        prop_assert_eq!(f.srf_percent.as_ref().map(|s| s.len()), Some(f.n_cycles()));
        for c in &f.raw {
            prop_assert!(c.values.iter().all(|v| v.is_finite()));
            for pair in c.values.chunks(2) {
                prop_assert!(pair[0] <= pair[1]);
            }
        }
    }

    #[test]
    fn loto_summary_matches_folds(n_trials in 2usize..5, n_cycles in 20usize..30, shift in 0.0f64..3.0) {
        let trials: Vec<TrialFeatures> = (0..n_trials)
            .map(|t| {
                let fcf = fcf_labels(n_cycles);
                let raw: Vec<CycleFeatureVector> = fcf
                    .iter()
                    .enumerate()
                    .map(|(k, f)| {
                        let mut values = [1.0; N_FEATURES];
                        values[0] = 100.0 - 20.0 * f + shift * t as f64;
                        values[5] = 1.0 + (k % 3) as f64;
                        CycleFeatureVector { trial: format!("tr{t}"), cycle: k + 1, values }
                    })
                    .collect();
                TrialFeatures {
                    trial: format!("tr{t}"),
                    subject: "s01".into(),
                    task: TaskKind::Lateral,
                    channels: [Muscle::LD, Muscle::PD],
                    windows: vec![],
                    relative: relative_change(&raw).unwrap(),
                    raw,
                    srf_percent: None,
                    fcf,
                    spectrograms: None,
                }
            })
            .collect();
        let r = loto_cv(&trials, &ModelSpec::new(ModelFamily::Linear), 1).unwrap();
        prop_assert_eq!(r.folds.len(), n_trials);
        let xs: Vec<f64> = r.folds.iter().map(|f| f.rmse).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        prop_assert!((r.rmse.mean - mean).abs() <= 1e-9);
        prop_assert!((r.rmse.std - std).abs() <= 1e-9);
    }
}
