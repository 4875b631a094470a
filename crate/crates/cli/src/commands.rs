use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use motionauth::authenticator::AuthMode;
use motionauth::authenticator::{score_split, train_classifier, AuthModel, ClassifierTrainReport, Pipeline};
use motionauth::checkpoint::{load_auth_model, load_forecaster, save_auth_model, save_forecaster};
use motionauth::data::{
    build_split, generate_synthetic_dataset, load_sessions, read_manifest, session_path, users, write_dataset,
    DatasetSplit, Day, LabeledWindow, Session, SessionFormat, SplitOptions, SyntheticUserParams, WindowSpec,
    MANIFEST_FILE, SESSIONS_PER_DAY,
};
use motionauth::eval::{
    compute_eer, emit_report, read_scores, read_summary, run_overlap_sweep, run_sweep, score_sets_by_user,
    timing_benchmark, write_scores, EerSummary, Report, ScoreRow, ScoreSet, SweepDefinition, SweepOptions,
    TOOL_VERSION,
};
use motionauth::experiment::{train_global_forecaster, ExperimentConfig, ForecasterScope, JobSeeds};
use motionauth::forecaster::{evaluate_forecaster_mse, train_forecaster, ForecastSpec, Forecaster};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// One command invocation: its resolved config, output directory and the
/// artifacts it has written so far.
pub struct Run {
    pub command: &'static str,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub out: PathBuf,
    artifacts: Vec<PathBuf>,
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl Run {
    pub fn new(command: &'static str, argv: Vec<String>, config: RunConfig, out: PathBuf) -> Self {
        Run { command, argv, config, out, artifacts: Vec::new() }
    }

    fn record(&mut self, path: PathBuf) {
        let rel = path.strip_prefix(&self.out).map(Path::to_path_buf).unwrap_or(path);
        self.artifacts.push(rel);
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        self.record(path.clone());
        Ok(path)
    }

    /// Writes `config.toml` and `run.json`. Re-running the same command
    /// with `--config <out>/config.toml` replays the run.
    pub fn finish(mut self) -> Result<()> {
        let toml = self.config.to_toml()?;
        self.write("config.toml", &toml)?;
        let manifest = json!({
            "tool": "motionauth",
            "version": TOOL_VERSION,
            "command": self.command,
            "argv": self.argv,
            "config_hash": self.config.hash()?,
            "seed": self.config.seed,
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "artifacts": self.artifacts,
        });
        let path = self.out.join("run.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        self.config.experiment()
    }

    fn data_root(&self) -> Result<&Path> {
        self.config
            .data
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset: pass --data DIR or set data in the config file".into()))
    }

    fn sessions(&self) -> Result<Vec<Session>> {
        Ok(load_sessions(self.data_root()?, &SessionFormat::default())?)
    }

    fn users(&self, sessions: &[Session]) -> Result<Vec<String>> {
        let all = users(sessions);
        if self.config.users.is_empty() {
            return Ok(all);
        }
        if let Some(missing) = self.config.users.iter().find(|u| !all.contains(u)) {
            return Err(CliError::Data(format!("user {missing} is not in the corpus ({} users found)", all.len())));
        }
        Ok(self.config.users.clone())
    }

    fn split(
        &self,
        sessions: &[Session],
        user: &str,
        exp: &ExperimentConfig,
        seeds: &JobSeeds,
    ) -> Result<DatasetSplit> {
        Ok(build_split(
            sessions,
            WindowSpec::new(self.config.window_size, exp.stride)?,
            user,
            SplitOptions { validation_fraction: exp.validation_fraction, seed: seeds.split },
        )?)
    }

    fn cell_tag(&self, horizon: usize) -> String {
        format!("ws{}_h{}", self.config.window_size, horizon)
    }

    fn forecaster_name(&self, user: &str, horizon: usize) -> String {
        format!("forecaster_{user}_{}.ckpt", self.cell_tag(horizon))
    }

    fn auth_name(&self, user: &str, horizon: usize) -> String {
        format!("auth_{user}_{}_{}.ckpt", self.config.variant, self.cell_tag(horizon))
    }
}

fn genuine(windows: &[LabeledWindow]) -> Vec<&LabeledWindow> {
    windows.iter().filter(|w| w.label.is_genuine()).collect()
}

pub fn synth(run: &mut Run) -> Result<()> {
    let n = run.config.synth_users;
    if n < 2 {
        return Err(CliError::Config("synth needs at least 2 users (impostors come from other users)".into()));
    }
    let params: Vec<SyntheticUserParams> = (0..n).map(|i| SyntheticUserParams::sample(run.config.seed, i)).collect();
    let sessions = generate_synthetic_dataset(&params)?;
    let extra = BTreeMap::from([
        ("generator".to_string(), "synthetic".to_string()),
        ("seed".to_string(), run.config.seed.to_string()),
    ]);
    let count = write_dataset(&run.out, &sessions, extra)?;
    for s in &sessions {
        run.record(session_path(&run.out, &s.user_id, s.day, s.session_index));
    }
    run.record(run.out.join(MANIFEST_FILE));
    println!("wrote {count} sessions for {n} users to {}", run.out.display());
    Ok(())
}

pub fn validate_data(run: &mut Run) -> Result<()> {
    let root = run.data_root()?.to_path_buf();
    let manifest = read_manifest(&root)?;
    let sessions = run.sessions()?;
    let found = users(&sessions);
    if manifest.users != found {
        return Err(CliError::Data(format!(
            "{} lists users {:?} but the directory holds {:?}",
            root.join(MANIFEST_FILE).display(),
            manifest.users,
            found
        )));
    }
    let mut text = String::from("user,day1_sessions,day2_sessions\n");
    let mut short = Vec::new();
    for user in &found {
        let count = |d: Day| sessions.iter().filter(|s| &s.user_id == user && s.day == d).count();
        let (d1, d2) = (count(Day::One), count(Day::Two));
        if d1 == 0 || d2 == 0 {
            return Err(CliError::Data(format!("user {user} needs sessions on both days (day1 {d1}, day2 {d2})")));
        }
        if d1 != SESSIONS_PER_DAY || d2 != SESSIONS_PER_DAY {
            short.push(user.clone());
        }
        text.push_str(&format!("{user},{d1},{d2}\n"));
    }
    run.write("validation.csv", &text)?;
    for user in &short {
        log::warn!("user {user} does not have {SESSIONS_PER_DAY} sessions per day");
    }
    println!(
        "{}: {} users, {} sessions, schema version {}: ok",
        root.display(),
        found.len(),
        sessions.len(),
        manifest.schema_version
    );
    Ok(())
}

pub fn train_forecaster_cmd(run: &mut Run) -> Result<()> {
    let h = run.config.effective_horizon()?;
    if h == 0 {
        return Err(CliError::Config("train-forecaster needs mode = \"with_forecast\" and horizon > 0".into()));
    }
    let exp = run.experiment()?;
    let spec = exp.forecast_spec(run.config.window_size, h)?;
    let sessions = run.sessions()?;
    let users = run.users(&sessions)?;
    let global = match exp.scope {
        ForecasterScope::Global => {
            let f = train_global_forecaster(&sessions, &exp, &spec)?;
            let name = run.forecaster_name("global", h);
            let seed = JobSeeds::global_forecaster(exp.master_seed, spec.l_window, h);
            save_forecaster(&run.out.join(&name), &f, json!({ "scope": "global", "seed": seed, "spec": spec }))?;
            run.record(run.out.join(name));
            Some(f)
        }
        ForecasterScope::PerUser => None,
    };
    let mut text = String::from("user,window_size,horizon,overlap,epochs,final_loss,day2_mse\n");
    for user in &users {
        let seeds = JobSeeds::new(exp.master_seed, user, spec.l_window, h);
        let split = run.split(&sessions, user, &exp, &seeds)?;
        let (f, final_loss) = match &global {
            Some(f) => (f.clone(), None),
            None => {
                let mut f = Forecaster::new(exp.forecaster_model, seeds.forecaster)?;
                let settings = exp.forecaster_training(seeds.forecaster);
                let report = train_forecaster(&mut f, &split, &spec, &settings)?;
                let name = run.forecaster_name(user, h);
                let manifest = json!({
                    "user": user,
                    "seed": seeds.forecaster,
                    "master_seed": exp.master_seed,
                    "spec": spec,
                    "epochs": settings.epochs,
                    "loss_trace": report.loss_trace,
                    "config_hash": run.config.hash()?,
                });
                save_forecaster(&run.out.join(&name), &f, manifest)?;
                run.record(run.out.join(name));
                (f, report.loss_trace.last().copied())
            }
        };
        let mse = evaluate_forecaster_mse(&f, &genuine(&split.test), &spec)?;
        log::info!("forecaster {user} ({}, +{h}): day-2 MSE {mse:.6}", spec.l_window);
        let loss = final_loss.map_or(String::new(), |l| l.to_string());
        text.push_str(&format!(
            "{user},{},{h},{},{},{loss},{mse}\n",
            spec.l_window, spec.l_overlap, exp.forecaster_epochs
        ));
    }
    run.write("forecaster_metrics.csv", &text)?;
    println!("trained forecasters for {} users at ({}, +{h})", users.len(), spec.l_window);
    Ok(())
}

fn training_rows(user: &str, report: &ClassifierTrainReport, text: &mut String) {
    for (e, loss) in report.loss_trace.iter().enumerate() {
        let eer = report.validation_eer.get(e).map_or(String::new(), |v| v.to_string());
        text.push_str(&format!("{user},{},{loss},{eer}\n", e + 1));
    }
}

pub fn train_auth(run: &mut Run) -> Result<()> {
    let h = run.config.effective_horizon()?;
    let exp = run.experiment()?;
    let ws = run.config.window_size;
    let sessions = run.sessions()?;
    let users = run.users(&sessions)?;
    let spec = if h > 0 { Some(exp.forecast_spec(ws, h)?) } else { None };
    let shared = match (&run.config.forecaster_checkpoint, spec, exp.scope) {
        (Some(path), _, _) => Some(load_forecaster(path)?.0),
        (None, Some(spec), ForecasterScope::Global) => Some(train_global_forecaster(&sessions, &exp, &spec)?),
        _ => None,
    };
    let mut text = String::from("user,epoch,loss,validation_eer\n");
    for user in &users {
        let seeds = JobSeeds::new(exp.master_seed, user, ws, h);
        let split = run.split(&sessions, user, &exp, &seeds)?;
        let mut model = AuthModel::new(user.as_str(), exp.classifier_config(ws + h), seeds.classifier_init)?;
        let training = exp.classifier_training(seeds.classifier_train);
        let report = match spec {
            None => train_classifier(&mut model, &split, Pipeline::NoForecast, &training)?,
            Some(spec) => {
                let mut f = match &shared {
                    Some(f) => f.clone(),
                    None => {
                        let mut f = Forecaster::new(exp.forecaster_model, seeds.forecaster)?;
                        train_forecaster(&mut f, &split, &spec, &exp.forecaster_training(seeds.forecaster))?;
                        f
                    }
                };
                let report = if exp.joint {
                    train_classifier(&mut model, &split, Pipeline::Joint { forecaster: &mut f, spec }, &training)?
                } else {
                    train_classifier(&mut model, &split, Pipeline::Staged { forecaster: &f, spec }, &training)?
                };
                let name = run.forecaster_name(user, h);
                save_forecaster(
                    &run.out.join(&name),
                    &f,
                    json!({ "user": user, "seed": seeds.forecaster, "spec": spec }),
                )?;
                run.record(run.out.join(name));
                report
            }
        };
        training_rows(user, &report, &mut text);
        let name = run.auth_name(user, h);
        let manifest = json!({ "user": user, "seeds": format!("{seeds:?}"), "config_hash": run.config.hash()? });
        save_auth_model(&run.out.join(&name), &model, manifest)?;
        run.record(run.out.join(name));
    }
    run.write("training.csv", &text)?;
    println!("trained {} classifiers ({}, ws {ws}, +{h})", users.len(), run.config.variant);
    Ok(())
}

fn write_eers(run: &mut Run, per_user: BTreeMap<String, (f64, Option<f64>)>) -> Result<()> {
    let mut text = String::from("user,eer,threshold\n");
    for (user, (eer, threshold)) in &per_user {
        text.push_str(&format!("{user},{eer},{}\n", threshold.map_or(String::new(), |t| t.to_string())));
    }
    let summary = EerSummary::from_subjects(per_user.into_iter().map(|(u, (e, _))| (u, e)).collect())?;
    run.write("eer.csv", &text)?;
    println!("mean EER over {} users: {:.4}", summary.per_subject.len(), summary.mean_eer);
    Ok(())
}

pub fn eval(run: &mut Run, scores: Option<PathBuf>) -> Result<()> {
    if let Some(path) = scores {
        let rows = read_scores(&path)?;
        let mut per_user = BTreeMap::new();
        for (user, set) in score_sets_by_user(&rows)? {
            let point = compute_eer(&set)?;
            per_user.insert(user, (point.eer, Some(point.threshold)));
        }
        return write_eers(run, per_user);
    }
    let h = run.config.effective_horizon()?;
    let exp = run.experiment()?;
    let ws = run.config.window_size;
    let sessions = run.sessions()?;
    let users = run.users(&sessions)?;
    if run.config.auth_checkpoint.is_some() && users.len() != 1 {
        return Err(CliError::Config("auth_checkpoint names one model; select its user with --user".into()));
    }
    let models = run.config.models_dir.clone().unwrap_or_else(|| run.out.clone());
    let spec = if h > 0 { Some(exp.forecast_spec(ws, h)?) } else { None };
    let mut rows: Vec<ScoreRow> = Vec::new();
    let mut per_user = BTreeMap::new();
    for user in &users {
        let auth_path = run.config.auth_checkpoint.clone().unwrap_or_else(|| models.join(run.auth_name(user, h)));
        if !auth_path.exists() {
            return Err(CliError::Data(format!("no classifier at {} (run train-auth first)", auth_path.display())));
        }
        let (model, _) = load_auth_model(&auth_path)?;
        let forecaster = match spec {
            None => None,
            Some(_) => {
                let path = run
                    .config
                    .forecaster_checkpoint
                    .clone()
                    .unwrap_or_else(|| models.join(run.forecaster_name(user, h)));
                Some(load_forecaster(&path)?.0)
            }
        };
        let seeds = JobSeeds::new(exp.master_seed, user, ws, h);
        let split = run.split(&sessions, user, &exp, &seeds)?;
        let fc = forecaster.as_ref().zip(spec.as_ref());
        let scores = score_split(&model, &split.test, fc, exp.forecast_impostors)?;
        let set = ScoreSet::from_labeled(
            split.test.iter().map(|w| w.label).zip(scores.iter().map(|s| s.genuine_probability)),
        );
        let point = compute_eer(&set)?;
        log::info!("eval {user}: EER {:.4} at threshold {:.4}", point.eer, point.threshold);
        per_user.insert(user.clone(), (point.eer, Some(point.threshold)));
        rows.extend(split.test.iter().zip(&scores).enumerate().map(|(i, (w, s))| ScoreRow {
            user: user.clone(),
            window_id: i,
            label: w.label.value() as u8,
            genuine_probability: s.genuine_probability,
        }));
    }
    let path = run.out.join("scores.csv");
    write_scores(&path, &rows)?;
    run.record(path);
    write_eers(run, per_user)
}

pub fn sweep(run: &mut Run) -> Result<()> {
    let exp = run.experiment()?;
    let mode = run.config.mode()?;
    let mut definition = match mode {
        AuthMode::NoForecast => SweepDefinition::no_forecast(),
        AuthMode::WithForecast => SweepDefinition::forecast(),
    };
    if !run.config.window_sizes.is_empty() {
        definition.window_sizes = run.config.window_sizes.clone();
    }
    if !run.config.horizons.is_empty() {
        if mode == AuthMode::NoForecast && run.config.horizons != [0] {
            return Err(CliError::Config("mode no_forecast sweeps only horizon 0".into()));
        }
        definition.horizons = run.config.horizons.clone();
    }
    let sessions = run.sessions()?;
    let options = SweepOptions {
        cache_dir: Some(run.out.join("cache")),
        workers: run.config.workers,
        users: (!run.config.users.is_empty()).then(|| run.config.users.clone()),
    };
    let outcome = run_sweep(&sessions, &definition, &exp, &options)?;
    let mut report = Report {
        master_seed: Some(exp.master_seed),
        config: Some(serde_json::to_value(&exp).expect("config serializes")),
        cells: outcome.cells,
        ..Report::default()
    };
    match mode {
        AuthMode::NoForecast => {
            println!("{}", outcome.eer.to_text("Mean EER, no forecasting", 3));
            report.no_forecast_eer = Some(outcome.eer);
        }
        AuthMode::WithForecast => {
            println!("{}", outcome.eer.to_text("Mean EER by horizon", 3));
            report.forecast_eer = Some(outcome.eer);
            report.forecast_mse = Some(outcome.mse);
        }
    }
    if run.config.overlap_sweep {
        let h = run.config.horizon;
        if h == 0 {
            return Err(CliError::Config("overlap_sweep needs horizon > 0".into()));
        }
        let series = run_overlap_sweep(&sessions, run.config.window_size, h, None, &exp, &options)?;
        if let Some(spread) = series.spread() {
            println!("overlap sweep ({}, +{h}): MSE spread {spread:.6}", run.config.window_size);
        }
        report.overlap.push(series);
    }
    for path in emit_report(&run.out, &report)? {
        run.record(path);
    }
    Ok(())
}

pub fn bench(run: &mut Run) -> Result<()> {
    let exp = run.experiment()?;
    let h = run.config.effective_horizon()?;
    let ws = run.config.window_size;
    let model = match &run.config.auth_checkpoint {
        Some(p) => load_auth_model(p)?.0,
        None => AuthModel::new("bench", exp.classifier_config(ws + h), run.config.seed)?,
    };
    let forecaster = match (&run.config.forecaster_checkpoint, h) {
        (_, 0) => None,
        (Some(p), _) => Some(load_forecaster(p)?.0),
        (None, _) => Some(Forecaster::new(exp.forecaster_model, run.config.seed)?),
    };
    let spec: Option<ForecastSpec> = if h > 0 { Some(exp.forecast_spec(ws, h)?) } else { None };
    let session = match &run.config.data {
        Some(_) => run.sessions()?.swap_remove(0),
        None => {
            let params: Vec<_> = (0..2).map(|i| SyntheticUserParams::sample(run.config.seed, i)).collect();
            generate_synthetic_dataset(&params)?.swap_remove(0)
        }
    };
    if ws > session.len() {
        return Err(CliError::Config(format!("window_size {ws} exceeds the session length {}", session.len())));
    }
    let window = session.samples.slice(ndarray::s![..ws, ..]);
    let stats =
        timing_benchmark(forecaster.as_ref().zip(spec.as_ref()), &model, window, 0, run.config.bench_repetitions)?;
    println!("{}", stats.to_text());
    let report = Report { timing: Some(stats), master_seed: Some(run.config.seed), ..Report::default() };
    for path in emit_report(&run.out, &report)? {
        run.record(path);
    }
    Ok(())
}

pub fn report(run: &mut Run, from: &[PathBuf]) -> Result<()> {
    let mut merged = Report::default();
    for source in from {
        let path = if source.is_dir() { source.join("summary.json") } else { source.clone() };
        let r = read_summary(&path)?.report;
        merged.no_forecast_eer = r.no_forecast_eer.or(merged.no_forecast_eer);
        merged.forecast_eer = r.forecast_eer.or(merged.forecast_eer);
        merged.forecast_mse = r.forecast_mse.or(merged.forecast_mse);
        merged.timing = r.timing.or(merged.timing);
        merged.master_seed = r.master_seed.or(merged.master_seed);
        merged.config = r.config.or(merged.config);
        merged.overlap.extend(r.overlap);
        merged.cells.extend(r.cells);
    }
    for path in emit_report(&run.out, &merged)? {
        if path.ends_with("reduction.txt") {
            print!("{}", fs::read_to_string(&path).map_err(|e| io_error(&path, e))?);
        }
        run.record(path);
    }
    println!("merged {} summaries into {}", from.len(), run.out.display());
    Ok(())
}
