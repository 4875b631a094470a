//! Grid sweeps. Each (window size, horizon) cell trains and scores every
//! user; finished cells are written to the cache directory and picked up
//! again on a rerun with the same configuration.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{SweepDefinition, SweepGrid};
use super::metrics::mean;
use super::scores::{write_scores, ScoreRow};
use crate::data::{build_split, users, LabeledWindow, Session, SplitOptions, WindowSpec};
use crate::error::{CoreError, Result};
use crate::experiment::{run_user, train_global_forecaster, ExperimentConfig, ForecasterScope, JobSeeds};
use crate::forecaster::{evaluate_forecaster_mse, overlap_grid, train_forecaster, ForecastSpec, Forecaster};
use crate::seed;

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; 0 means one per logical core.
    pub workers: usize,
    /// Restrict to these users (default: all).
    pub users: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user: String,
    pub eer: f64,
    pub threshold: f64,
    pub best_epoch: Option<usize>,
    pub forecast_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub window_size: usize,
    pub horizon: usize,
    pub fingerprint: u64,
    pub users: Vec<UserSummary>,
    /// Mean of the per-user EERs.
    pub mean_eer: f64,
    pub mean_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub definition: SweepDefinition,
    pub eer: SweepGrid,
    pub mse: SweepGrid,
    pub cells: Vec<CellRecord>,
}

fn cell_name(w: usize, h: usize) -> String {
    format!("cell_ws{w}_h{h}")
}

fn cell_fingerprint(config: &ExperimentConfig, users: &[String]) -> u64 {
    let labels: Vec<u64> = users.iter().map(|u| seed::label(u)).collect();
    seed::derive(config.fingerprint(), &labels)
}

fn load_cached(dir: &Path, w: usize, h: usize, fingerprint: u64) -> Option<CellRecord> {
    let text = fs::read_to_string(dir.join(format!("{}.json", cell_name(w, h)))).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.fingerprint == fingerprint && rec.window_size == w && rec.horizon == h).then_some(rec)
}

fn store_cell(dir: &Path, rec: &CellRecord, scores: &[ScoreRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write_scores(&dir.join(format!("scores_ws{}_h{}.csv", rec.window_size, rec.horizon)), scores)?;
    // Write-then-rename so an interrupted run never leaves a half cell.
    let path = dir.join(format!("{}.json", cell_name(rec.window_size, rec.horizon)));
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(rec).expect("cell serializes");
    fs::write(&tmp, text).map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| CoreError::io(&path, e))
}

/// Trains and scores every user for one cell.
pub fn run_cell(
    sessions: &[Session],
    users: &[String],
    window_size: usize,
    horizon: usize,
    config: &ExperimentConfig,
) -> Result<(CellRecord, Vec<ScoreRow>)> {
    let shared = match (horizon, config.scope) {
        (h, ForecasterScope::Global) if h > 0 => {
            Some(train_global_forecaster(sessions, config, &config.forecast_spec(window_size, horizon)?)?)
        }
        _ => None,
    };
    let mut summaries = Vec::with_capacity(users.len());
    let mut scores = Vec::new();
    for user in users {
        let run = run_user(sessions, user, window_size, horizon, config, shared.as_ref())?;
        info!("cell ({window_size}, +{horizon}) user {user}: EER {:.4}", run.eer);
        summaries.push(UserSummary {
            user: run.user,
            eer: run.eer,
            threshold: run.threshold,
            best_epoch: run.best_epoch,
            forecast_mse: run.forecast_mse,
        });
        scores.extend(run.scores);
    }
    let eers: Vec<f64> = summaries.iter().map(|s| s.eer).collect();
    let mses: Vec<f64> = summaries.iter().filter_map(|s| s.forecast_mse).collect();
    let rec = CellRecord {
        window_size,
        horizon,
        fingerprint: cell_fingerprint(config, users),
        mean_eer: mean(&eers).ok_or_else(|| CoreError::Evaluation("cell has no users".into()))?,
        mean_mse: if horizon > 0 { mean(&mses) } else { None },
        users: summaries,
    };
    Ok((rec, scores))
}

fn selected_users(sessions: &[Session], options: &SweepOptions) -> Result<Vec<String>> {
    let all = users(sessions);
    match &options.users {
        None => Ok(all),
        Some(list) => {
            if let Some(missing) = list.iter().find(|u| !all.contains(u)) {
                return Err(CoreError::Data(format!("user {missing} is not in the corpus")));
            }
            Ok(list.clone())
        }
    }
}

pub fn run_sweep(
    sessions: &[Session],
    definition: &SweepDefinition,
    config: &ExperimentConfig,
    options: &SweepOptions,
) -> Result<SweepOutcome> {
    config.validate()?;
    let users = selected_users(sessions, options)?;
    let fingerprint = cell_fingerprint(config, &users);
    let cells = definition.cells();
    let mut done: Vec<Option<CellRecord>> = cells
        .iter()
        .map(|&(w, h)| options.cache_dir.as_deref().and_then(|d| load_cached(d, w, h, fingerprint)))
        .collect();
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| done[i].is_none()).collect();
    info!("sweep: {} cells, {} cached, {} to run", cells.len(), cells.len() - pending.len(), pending.len());

    let workers = if options.workers == 0 { rayon::current_num_threads() } else { options.workers };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.clamp(1, pending.len().max(1)))
        .build()
        .map_err(|e| CoreError::Config(format!("worker pool: {e}")))?;
    let fresh: Vec<(usize, CellRecord)> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| {
                let (w, h) = cells[i];
                let (rec, scores) = run_cell(sessions, &users, w, h, config)?;
                if let Some(dir) = &options.cache_dir {
                    store_cell(dir, &rec, &scores)?;
                }
                Ok((i, rec))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for (i, rec) in fresh {
        done[i] = Some(rec);
    }

    let mut eer = definition.empty_grid();
    let mut mse = definition.empty_grid();
    let mut records = Vec::with_capacity(cells.len());
    for rec in done.into_iter().map(|r| r.expect("every cell ran")) {
        eer.set(rec.window_size, rec.horizon, rec.mean_eer)?;
        if let Some(m) = rec.mean_mse {
            mse.set(rec.window_size, rec.horizon, m)?;
        }
        records.push(rec);
    }
    Ok(SweepOutcome { definition: definition.clone(), eer, mse, cells: records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSeries {
    pub l_window: usize,
    pub l_forecasting: usize,
    /// `(l_overlap, mean day-2 position MSE)`.
    pub points: Vec<(usize, f64)>,
}

impl OverlapSeries {
    /// Max minus min MSE across overlaps.
    pub fn spread(&self) -> Option<f64> {
        let it = self.points.iter().map(|p| p.1);
        let max = it.clone().reduce(f64::max)?;
        let min = it.reduce(f64::min)?;
        Some(max - min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("l_overlap,mse\n");
        for (o, m) in &self.points {
            out.push_str(&format!("{o},{m}\n"));
        }
        out
    }
}

/// Forecaster MSE against the overlap length for one (window, horizon) pair.
pub fn run_overlap_sweep(
    sessions: &[Session],
    l_window: usize,
    l_forecasting: usize,
    overlaps: Option<Vec<usize>>,
    config: &ExperimentConfig,
    options: &SweepOptions,
) -> Result<OverlapSeries> {
    let users = selected_users(sessions, options)?;
    let overlaps = overlaps.unwrap_or_else(|| overlap_grid(l_window));
    let mut points = Vec::with_capacity(overlaps.len());
    for o in overlaps {
        let spec = ForecastSpec::new(l_window, o, l_forecasting)?;
        let mut per_user = Vec::with_capacity(users.len());
        for user in &users {
            let seeds = JobSeeds::new(config.master_seed, user, l_window, l_forecasting);
            let split = build_split(
                sessions,
                WindowSpec::new(l_window, config.stride)?,
                user,
                SplitOptions { validation_fraction: config.validation_fraction, seed: seeds.split },
            )?;
            let mut f = Forecaster::new(config.forecaster_model, seeds.forecaster)?;
            train_forecaster(&mut f, &split, &spec, &config.forecaster_training(seeds.forecaster))?;
            let genuine: Vec<&LabeledWindow> = split.test.iter().filter(|w| w.label.is_genuine()).collect();
            per_user.push(evaluate_forecaster_mse(&f, &genuine, &spec)?);
        }
        let m = mean(&per_user).ok_or_else(|| CoreError::Evaluation("no users".into()))?;
        info!("overlap sweep ({l_window}, +{l_forecasting}) overlap {o}: MSE {m:.6}");
        points.push((o, m));
    }
    Ok(OverlapSeries { l_window, l_forecasting, points })
}
