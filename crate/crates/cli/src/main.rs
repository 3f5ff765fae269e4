use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use fatigue_core::config::{KvConfig, Settings};
use fatigue_core::cycles::io::{attach_spectrograms, list_trial_dirs, read_feature_csv, read_trial, write_feature_csv};
use fatigue_core::cycles::{extract_trial, FeatureConfig, FeatureFamily, TaskKind, TrialFeatures};
use fatigue_core::eval::{self, EvalReport, ModelOrigin};
use fatigue_core::impl_settings;
use fatigue_core::models::{feature_importance, Model, ModelFamily, ModelSpec};
use fatigue_core::spectral::SpectrogramArchive;
use fatigue_core::synth::{synth_dataset, SynthConfig};
use serde_json::json;
use sha2::{Digest, Sha256};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fcf", version, about = "Fatigue (FCF) estimation from sEMG: synthesize, extract, train, evaluate")]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Flat `section.key = value` file with parameter overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Exit with code 3 when an acceptance threshold fails.
    #[arg(long, global = true)]
    check: bool,
    /// Output path (directory for `synth`, file otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of trial directories.
    Synth {
        #[arg(long, default_value_t = 1)]
        subjects: usize,
        /// Trials per subject and task.
        #[arg(long, default_value_t = 6)]
        trials: usize,
        /// Task(s), comma separated.
        #[arg(long, value_delimiter = ',', default_value = "lateral")]
        task: Vec<TaskKind>,
    },
    /// Per-cycle features (and optionally spectrograms) from trial directories.
    Extract {
        /// Dataset root holding trial directories.
        #[arg(long)]
        input: PathBuf,
        /// Also write per-cycle spectrograms to this file.
        #[arg(long)]
        spectrograms: Option<PathBuf>,
    },
    /// Fit a model on every selected trial.
    Train(Selection),
    /// Leave-one-trial-out evaluation.
    Eval {
        #[command(flatten)]
        sel: Selection,
        /// Accepted for clarity; LOTO is the only protocol.
        #[arg(long)]
        loto: bool,
        /// Write (truth, predicted) pairs to this CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train on one task, test on another without retraining.
    Cross {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        family: ModelFamily,
        #[arg(long)]
        train_task: TaskKind,
        #[arg(long)]
        test_task: TaskKind,
        #[arg(long)]
        subject: Option<String>,
        /// Use this trained model instead of fitting one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Feature-family importance of a forest or gbt model.
    Importance(Selection),
    /// SRF/FCF agreement and a summary of evaluation reports.
    Report {
        /// Feature CSV with SRF columns.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Evaluation reports to summarize.
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Feature CSV written by `extract`.
    #[arg(long)]
    features: PathBuf,
    /// Spectrogram file written by `extract` (needed for cnn).
    #[arg(long)]
    spectrograms: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Selection {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    family: ModelFamily,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    subject: Option<String>,
}

/// Thresholds applied in `--check` mode.
#[derive(Debug, Clone, PartialEq)]
struct CheckConfig {
    loto_linear: f64,
    loto_forest: f64,
    loto_gbt: f64,
    loto_cnn: f64,
    cross_margin: f64,
    srf_r2: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { loto_linear: 30.0, loto_forest: 15.0, loto_gbt: 15.0, loto_cnn: 30.0, cross_margin: 10.0, srf_r2: 0.95 }
    }
}

impl_settings!(CheckConfig, "check", [loto_linear, loto_forest, loto_gbt, loto_cnn, cross_margin, srf_r2]);

impl CheckConfig {
    fn loto_limit(&self, f: ModelFamily) -> f64 {
        match f {
            ModelFamily::Linear => self.loto_linear,
            ModelFamily::Forest => self.loto_forest,
            ModelFamily::Gbt => self.loto_gbt,
            ModelFamily::Cnn => self.loto_cnn,
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

struct Setup {
    synth: SynthConfig,
    extract: FeatureConfig,
    spec_defaults: ModelSpec,
    check: CheckConfig,
}

fn load_settings(path: Option<&Path>) -> Result<Setup> {
    let kv = match path {
        Some(p) => KvConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => KvConfig::default(),
    };
    kv.check_sections(&["synth", "extract", "forest", "gbt", "cnn", "check", "model"]).map_err(|e| usage(e.to_string()))?;
    let mut s = Setup {
        synth: SynthConfig::default(),
        extract: FeatureConfig::default(),
        spec_defaults: ModelSpec::new(ModelFamily::Linear),
        check: CheckConfig::default(),
    };
    let bad = |e: fatigue_core::config::ConfigError| usage(e.to_string());
    kv.apply(&mut s.synth).map_err(bad)?;
    kv.apply(&mut s.extract).map_err(bad)?;
    kv.apply(&mut s.spec_defaults.forest).map_err(bad)?;
    kv.apply(&mut s.spec_defaults.gbt).map_err(bad)?;
    kv.apply(&mut s.spec_defaults.cnn).map_err(bad)?;
    kv.apply(&mut s.check).map_err(bad)?;
    for (k, v) in kv.iter() {
        match k {
            "model.features" => {
                s.spec_defaults.mode = fatigue_core::config::parse_field(k, v).map_err(bad)?;
            }
            _ if k.starts_with("model.") => return Err(usage(format!("unknown config key '{k}'"))),
            _ => {}
        }
    }
    Ok(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(EXIT_CHECK)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

/// Runs the command; `Ok(false)` means a check failed.
fn run(cli: &Cli) -> Result<bool> {
    let settings = load_settings(cli.config.as_deref())?;
    let started = Instant::now();
    let passed = match &cli.command {
        Command::Synth { subjects, trials, task } => cmd_synth(cli, &settings, *subjects, *trials, task)?,
        Command::Extract { input, spectrograms } => cmd_extract(cli, &settings, input, spectrograms.as_deref())?,
        Command::Train(sel) => cmd_train(cli, &settings, sel)?,
        Command::Eval { sel, predictions, .. } => cmd_eval(cli, &settings, sel, predictions.as_deref())?,
        Command::Cross { data, family, train_task, test_task, subject, model, predictions } => cmd_cross(
            cli,
            &settings,
            CrossArgs {
                data,
                family: *family,
                train_task: *train_task,
                test_task: *test_task,
                subject: subject.as_deref(),
                model: model.as_deref(),
                predictions: predictions.as_deref(),
            },
        )?,
        Command::Importance(sel) => cmd_importance(cli, &settings, sel)?,
        Command::Report { features, reports } => cmd_report(cli, &settings, features.as_deref(), reports)?,
    };
    if let Some(out) = &cli.out {
        write_sidecar(out, started)?;
    }
    Ok(passed)
}

/// Wall-clock details go next to the primary output so that the output
/// itself stays byte-identical across runs.
fn write_sidecar(out: &Path, started: Instant) -> Result<()> {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let side = json!({
        "finished_unix": unix,
        "elapsed_secs": started.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    let path = out.with_file_name(name);
    fs::write(&path, serde_json::to_string_pretty(&side)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| usage("--out is required for this command"))
}

fn write_output(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_synth(cli: &Cli, s: &Setup, subjects: usize, trials: usize, tasks: &[TaskKind]) -> Result<bool> {
    let out = require_out(cli)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dirs = synth_dataset(&s.synth, subjects, trials, tasks, cli.seed, out)?;
    let mut entries = Vec::new();
    for d in &dirs {
        let mut files = serde_json::Map::new();
        let mut names: Vec<PathBuf> = fs::read_dir(d)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        names.sort();
        for f in names {
            let name = f.file_name().unwrap().to_string_lossy().to_string();
            files.insert(name, json!(sha256_hex(&fs::read(&f)?)));
        }
        entries.push(json!({ "trial": d.file_name().unwrap().to_string_lossy(), "files": files }));
    }
    let manifest = json!({
        "seed": cli.seed,
        "subjects": subjects,
        "trials_per_subject": trials,
        "tasks": tasks.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
        "synth": s.synth.echo().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
        "trials": entries,
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(out.join("manifest.json"), &text)?;
    println!("{} trial directories in {} (seed {})", dirs.len(), out.display(), cli.seed);
    println!("manifest sha256 {}", sha256_hex(text.as_bytes()));
    Ok(true)
}

fn cmd_extract(cli: &Cli, s: &Setup, input: &Path, spectrograms: Option<&Path>) -> Result<bool> {
    let out = require_out(cli)?;
    let dirs = list_trial_dirs(input)?;
    if dirs.is_empty() {
        bail!("no trial directories under {}", input.display());
    }
    let mut cfg = s.extract.clone();
    cfg.spectrograms |= spectrograms.is_some();
    let mut all = Vec::with_capacity(dirs.len());
    let mut fs_rate = None;
    for d in &dirs {
        let trial = read_trial(d)?;
        if trial.srf.is_none() {
            log::warn!("{}: no srf.csv, SRF column left empty", d.display());
        }
        fs_rate.get_or_insert(trial.emg[0].fs());
        let f = extract_trial(&trial, &cfg).with_context(|| format!("extracting {}", d.display()))?;
        log::info!("{}: {} cycles", f.trial, f.n_cycles());
        all.push(f);
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_feature_csv(std::io::BufWriter::new(file), &all)?;
    let rows: usize = all.iter().map(|t| t.n_cycles()).sum();
    println!("{rows} cycles from {} trials -> {}", all.len(), out.display());
    if let Some(path) = spectrograms {
        let samples = all.iter().flat_map(|t| t.spectrogram_samples().unwrap_or_default()).collect();
        let archive = SpectrogramArchive { fs: fs_rate.unwrap_or(2000.0), params: cfg.stft, stats: None, samples };
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        archive.write_to(std::io::BufWriter::new(file))?;
        println!("spectrograms -> {}", path.display());
    }
    Ok(true)
}

fn load_trials(data: &DataArgs, family: ModelFamily) -> Result<Vec<TrialFeatures>> {
    let mut trials = read_feature_csv(&data.features)?;
    if family == ModelFamily::Cnn {
        let path = data.spectrograms.as_ref().ok_or_else(|| usage("the cnn family needs --spectrograms"))?;
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let archive = SpectrogramArchive::read_from(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        attach_spectrograms(&mut trials, archive.samples)?;
    }
    Ok(trials)
}

/// Trials of one task and one subject; the subject may be implied.
fn select(trials: &[TrialFeatures], task: Option<TaskKind>, subject: Option<&str>) -> Result<Vec<TrialFeatures>> {
    let picked: Vec<TrialFeatures> =
        trials.iter().filter(|t| task.map_or(true, |k| t.task == k)).filter(|t| subject.map_or(true, |s| t.subject == s)).cloned().collect();
    if picked.is_empty() {
        return Err(usage("no trials match the task/subject selection"));
    }
    let subjects: std::collections::BTreeSet<&str> = picked.iter().map(|t| t.subject.as_str()).collect();
    if subjects.len() > 1 {
        return Err(usage(format!("trials from several subjects {subjects:?}; pass --subject")));
    }
    let tasks: std::collections::BTreeSet<TaskKind> = picked.iter().map(|t| t.task).collect();
    if tasks.len() > 1 {
        return Err(usage(format!("trials from several tasks {tasks:?}; pass --task")));
    }
    Ok(picked)
}

fn spec_for(s: &Setup, family: ModelFamily) -> ModelSpec {
    ModelSpec { family, ..s.spec_defaults.clone() }
}

fn cmd_train(cli: &Cli, s: &Setup, sel: &Selection) -> Result<bool> {
    let out = require_out(cli)?;
    let trials = select(&load_trials(&sel.data, sel.family)?, sel.task, sel.subject.as_deref())?;
    let spec = spec_for(s, sel.family);
    let mut sorted = trials.clone();
    sorted.sort_by(|a, b| a.trial.cmp(&b.trial));
    let model = spec.fit(&sorted, cli.seed)?;
    model.save(out)?;
    println!(
        "{} model on {} trials ({} cycles) -> {} [sha256 {}]",
        sel.family,
        sorted.len(),
        sorted.iter().map(|t| t.n_cycles()).sum::<usize>(),
        out.display(),
        eval::model_digest(&model)
    );
    Ok(true)
}

fn print_summary(r: &EvalReport) {
    println!(
        "{} {:?} {}->{}: RMSE {:.2} ± {:.2} % over {} trials (raw {:.2} %, {} clamped of {}), seed {}",
        r.family,
        r.kind,
        r.train_task,
        r.test_task,
        r.rmse.mean,
        r.rmse.std,
        r.folds.len(),
        r.rmse_raw.mean,
        r.clamped,
        r.n_predictions,
        r.seed
    );
    for f in &r.folds {
        println!("  {:<24} {:7.2} %", f.trial, f.rmse);
    }
    for n in &r.notes {
        println!("  note: {n}");
    }
}

fn write_predictions(r: &EvalReport, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        r.write_predictions_csv(std::io::BufWriter::new(f))?;
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, s: &Setup, sel: &Selection, predictions: Option<&Path>) -> Result<bool> {
    let trials = select(&load_trials(&sel.data, sel.family)?, sel.task, sel.subject.as_deref())?;
    let report = eval::loto_cv(&trials, &spec_for(s, sel.family), cli.seed)?;
    write_predictions(&report, predictions)?;
    if cli.out.is_some() {
        print_summary(&report);
    }
    write_output(cli, &report.to_json()?)?;
    if cli.check {
        let limit = s.check.loto_limit(sel.family);
        let ok = report.rmse.mean <= limit;
        eprintln!("check: LOTO RMSE {:.2} % <= {limit} % ... {}", report.rmse.mean, if ok { "pass" } else { "FAIL" });
        return Ok(ok);
    }
    Ok(true)
}

struct CrossArgs<'a> {
    data: &'a DataArgs,
    family: ModelFamily,
    train_task: TaskKind,
    test_task: TaskKind,
    subject: Option<&'a str>,
    model: Option<&'a Path>,
    predictions: Option<&'a Path>,
}

fn cmd_cross(cli: &Cli, s: &Setup, a: CrossArgs<'_>) -> Result<bool> {
    let all = load_trials(a.data, a.family)?;
    let train = select(&all, Some(a.train_task), a.subject)?;
    let subject = train[0].subject.clone();
    let test = select(&all, Some(a.test_task), Some(&subject))?;
    let spec = spec_for(s, a.family);
    let report = match a.model {
        None => eval::train_and_cross(&train, &test, &spec, cli.seed)?,
        Some(path) => {
            let model = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
            if model.family() != a.family {
                return Err(usage(format!("{} holds a {} model, not {}", path.display(), model.family(), a.family)));
            }
            let mut names: Vec<String> = train.iter().map(|t| t.trial.clone()).collect();
            names.sort();
            let origin = ModelOrigin { subject, task: a.train_task, channels: train[0].channels, trials: names, seed: cli.seed };
            eval::cross_task_eval(&model, &spec, &origin, &test)?
        }
    };
    write_predictions(&report, a.predictions)?;
    if cli.out.is_some() {
        print_summary(&report);
    }
    write_output(cli, &report.to_json()?)?;
    if cli.check && a.family != ModelFamily::Linear {
        let loto = eval::loto_cv(&train, &spec, cli.seed)?;
        let limit = loto.rmse.mean + s.check.cross_margin;
        let ok = report.rmse.mean <= limit;
        eprintln!(
            "check: cross RMSE {:.2} % <= LOTO {:.2} % + {} ... {}",
            report.rmse.mean,
            loto.rmse.mean,
            s.check.cross_margin,
            if ok { "pass" } else { "FAIL" }
        );
        return Ok(ok);
    }
    Ok(true)
}

fn cmd_importance(cli: &Cli, s: &Setup, sel: &Selection) -> Result<bool> {
    if !matches!(sel.family, ModelFamily::Forest | ModelFamily::Gbt) {
        return Err(usage("importance is defined for the forest and gbt families"));
    }
    let mut trials = select(&load_trials(&sel.data, sel.family)?, sel.task, sel.subject.as_deref())?;
    trials.sort_by(|a, b| a.trial.cmp(&b.trial));
    let model = spec_for(s, sel.family).fit(&trials, cli.seed)?;
    let imp = feature_importance(&model, &fatigue_core::cycles::feature_names())?;
    let doc = json!({
        "family": sel.family,
        "seed": cli.seed,
        "trials": trials.iter().map(|t| t.trial.clone()).collect::<Vec<_>>(),
        "importance": imp,
    });
    write_output(cli, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    if cli.out.is_some() {
        for f in &imp.families {
            println!("{:<4} {:.3}", f.family.to_string(), f.share);
        }
    }
    if cli.check {
        let ok = imp.top_family() == Some(FeatureFamily::MNF);
        eprintln!("check: top family {:?} is MNF ... {}", imp.top_family(), if ok { "pass" } else { "FAIL" });
        return Ok(ok);
    }
    Ok(true)
}

fn cmd_report(cli: &Cli, s: &Setup, features: Option<&Path>, reports: &[PathBuf]) -> Result<bool> {
    if features.is_none() && reports.is_empty() {
        return Err(usage("report needs --features and/or --reports"));
    }
    let mut ok = true;
    let mut doc = serde_json::Map::new();
    if let Some(path) = features {
        let trials = read_feature_csv(path)?;
        let c = eval::srf_fcf_correlation(&trials)?;
        if cli.check {
            let pass = c.pooled.r_squared >= s.check.srf_r2;
            eprintln!("check: pooled SRF/FCF R2 {:.4} >= {} ... {}", c.pooled.r_squared, s.check.srf_r2, if pass { "pass" } else { "FAIL" });
            ok &= pass;
        }
        doc.insert("srf_fcf".into(), serde_json::to_value(&c)?);
    }
    let mut rows = Vec::new();
    for p in reports {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r = EvalReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))?;
        rows.push(json!({
            "file": p.display().to_string(),
            "kind": r.kind,
            "family": r.family,
            "subject": r.subject,
            "train_task": r.train_task,
            "test_task": r.test_task,
            "rmse_mean": r.rmse.mean,
            "rmse_std": r.rmse.std,
            "rmse_raw_mean": r.rmse_raw.mean,
            "failed_to_regress": r.failed_to_regress,
            "top_family": r.importance.as_ref().and_then(|i| i.top_family()),
        }));
    }
    if !rows.is_empty() {
        doc.insert("reports".into(), json!(rows));
    }
    write_output(cli, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(ok)
}
