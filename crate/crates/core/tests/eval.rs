use std::collections::BTreeMap;
use std::fs;

use motionauth::authenticator::{AuthModel, ClassifierVariant};
use motionauth::data::{generate_synthetic_dataset, Session, SyntheticUserParams};
use motionauth::eval::{
    compute_eer, compute_far_frr, emit_report, read_scores, read_summary, reduction_percentage, run_overlap_sweep,
    run_sweep, score_sets_by_user, timing_benchmark, write_scores, EerSummary, ReductionStats, Report, ScoreRow,
    ScoreSet, SweepDefinition, SweepGrid, SweepOptions,
};
use motionauth::experiment::ExperimentConfig;
use motionauth::forecaster::{ForecastSpec, Forecaster};
use motionauth::nn::ModelConfig;
use motionauth::CoreError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scans 10,001 evenly spaced thresholds and returns the FAR/FRR midpoint
/// where |FAR - FRR| is smallest.
fn dense_oracle(set: &ScoreSet) -> f64 {
    let rate =
        |v: &[f64], t: f64, accept: bool| v.iter().filter(|&&s| (s >= t) == accept).count() as f64 / v.len() as f64;
    (0..=10_000)
        .map(|k| {
            let t = k as f64 / 10_000.0;
            let far = rate(&set.impostor, t, true);
            let frr = rate(&set.genuine, t, false);
            ((far - frr).abs(), (far + frr) / 2.0)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> ScoreSet {
    let shift: f64 = rng.gen_range(0.0..0.4);
    let g = (0..n).map(|_| (rng.gen::<f64>() * 0.8 + shift).min(1.0)).collect();
    let i = (0..n).map(|_| rng.gen::<f64>() * 0.8).collect();
    ScoreSet::new(g, i)
}

#[test]
fn far_frr_hand_counts() {
    let set = ScoreSet::new(vec![0.9, 0.6, 0.4], vec![0.7, 0.3, 0.1]);
    let (far, frr) = compute_far_frr(&set, 0.5).unwrap();
    assert!((far - 1.0 / 3.0).abs() < 1e-15 && (frr - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(compute_far_frr(&set, 0.0).unwrap(), (1.0, 0.0));
    assert_eq!(compute_far_frr(&ScoreSet::new(vec![1.0, 1.0], vec![0.0, 0.0]), 0.5).unwrap(), (0.0, 0.0));
    assert!(matches!(compute_far_frr(&ScoreSet::new(vec![], vec![0.1]), 0.5), Err(CoreError::Evaluation(_))));
    assert!(compute_eer(&ScoreSet::new(vec![0.2], vec![])).is_err());
}

#[test]
fn eer_closed_forms() {
    assert_eq!(compute_eer(&ScoreSet::new(vec![0.8, 0.9, 1.0], vec![0.1, 0.2, 0.3])).unwrap().eer, 0.0);
    let same = vec![0.1, 0.4, 0.4, 0.7, 0.9];
    assert_eq!(compute_eer(&ScoreSet::new(same.clone(), same)).unwrap().eer, 0.5);
    assert_eq!(compute_eer(&ScoreSet::new(vec![0.1, 0.2], vec![0.8, 0.9])).unwrap().eer, 1.0);
}

#[test]
fn eer_matches_dense_threshold_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let set = random_set(&mut rng, 200);
        let fast = compute_eer(&set).unwrap();
        let slow = dense_oracle(&set);
        assert!((fast.eer - slow).abs() <= 0.005, "{} vs {slow}", fast.eer);
        assert!((0.0..=1.0).contains(&fast.eer));
    }
}

#[test]
fn eer_threshold_balances_far_and_frr() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let set = random_set(&mut rng, 200);
        let p = compute_eer(&set).unwrap();
        let (far, frr) = compute_far_frr(&set, p.threshold).unwrap();
        // One score step of slack on either rate around the interpolated point.
        assert!((far - frr).abs() <= 2.0 / 200.0 + 1e-12, "far {far} frr {frr}");
    }
}

proptest! {
    #[test]
    fn eer_is_a_rank_statistic(
        g in prop::collection::vec(0.0f64..1.0, 1..60),
        i in prop::collection::vec(0.0f64..1.0, 1..60),
    ) {
        let set = ScoreSet::new(g, i);
        let base = compute_eer(&set).unwrap().eer;
        prop_assert_eq!(compute_eer(&set.map(|s| s.powi(3))).unwrap().eer, base);
        prop_assert_eq!(compute_eer(&set.map(|s| 1.0 / (1.0 + (-8.0 * (s - 0.5)).exp()))).unwrap().eer, base);
        prop_assert_eq!(compute_eer(&set.map(|s| 2.0 * s + 3.0)).unwrap().eer, base);
    }

    #[test]
    fn far_and_frr_are_monotone(
        g in prop::collection::vec(0.0f64..1.0, 1..40),
        i in prop::collection::vec(0.0f64..1.0, 1..40),
        mut ts in prop::collection::vec(0.0f64..1.0, 2..20),
    ) {
        let set = ScoreSet::new(g, i);
        ts.sort_by(f64::total_cmp);
        let rates: Vec<_> = ts.iter().map(|&t| compute_far_frr(&set, t).unwrap()).collect();
        for w in rates.windows(2) {
            prop_assert!(w[1].0 <= w[0].0);
            prop_assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn grid_csv_round_trips(values in prop::collection::vec(prop::option::of(0.0f64..1.0), 64)) {
        let def = SweepDefinition::forecast();
        let mut grid = def.empty_grid();
        for (k, (w, h)) in def.cells().into_iter().enumerate() {
            if let Some(v) = values[k % values.len()] {
                grid.set(w, h, v).unwrap();
            }
        }
        prop_assert_eq!(SweepGrid::from_csv(&grid.to_csv()).unwrap(), grid);
    }
}

#[test]
fn mean_of_subject_eers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sets: BTreeMap<String, ScoreSet> = (0..41).map(|u| (format!("u{u:02}"), random_set(&mut rng, 50))).collect();
    let summary = EerSummary::from_score_sets(&sets).unwrap();
    let mut eers: Vec<f64> = sets.values().map(|s| compute_eer(s).unwrap().eer).collect();
    let forward = eers.iter().sum::<f64>() / 41.0;
    eers.reverse();
    let backward = eers.iter().sum::<f64>() / 41.0;
    assert!((summary.mean_eer - forward).abs() < 1e-12);
    assert!((summary.mean_eer - backward).abs() < 1e-12);
    assert_eq!(summary.per_subject.len(), 41);
    assert!(EerSummary::from_subjects(BTreeMap::new()).is_err());
}

#[test]
fn reduction_arithmetic() {
    assert_eq!(reduction_percentage(0.07, 0.07).unwrap(), 0.0);
    assert!((reduction_percentage(0.083, 0.053).unwrap() - 36.14).abs() < 0.005);
    assert!((reduction_percentage(0.121, 0.082).unwrap() - 32.23).abs() < 0.005);
    assert!(matches!(reduction_percentage(0.0, 0.1), Err(CoreError::Evaluation(_))));
}

fn table(rows: &[[f64; 8]]) -> SweepGrid {
    let def = SweepDefinition::forecast();
    let mut g = def.empty_grid();
    for (r, &w) in def.window_sizes.iter().enumerate() {
        for (c, &h) in def.horizons.iter().enumerate() {
            if def.in_envelope(w, h) {
                g.set(w, h, rows[r][c]).unwrap();
            }
        }
    }
    g
}

const NA: f64 = f64::NAN;

#[test]
fn reduction_statistics_on_published_tables() {
    let fcn = table(&[
        [0.121, 0.099, 0.093, 0.089, 0.084, 0.082, 0.086, 0.083],
        [0.101, 0.085, 0.082, 0.077, 0.072, 0.067, 0.073, NA],
        [0.082, 0.079, 0.070, 0.069, 0.061, 0.063, NA, NA],
        [0.082, 0.068, 0.063, 0.057, 0.055, NA, NA, NA],
        [0.075, 0.063, 0.058, 0.052, NA, NA, NA, NA],
        [0.062, 0.060, 0.059, NA, NA, NA, NA, NA],
        [0.071, 0.066, NA, NA, NA, NA, NA, NA],
    ]);
    let tf = table(&[
        [0.115, 0.097, 0.091, 0.086, 0.080, 0.081, 0.081, 0.084],
        [0.097, 0.080, 0.075, 0.070, 0.068, 0.064, 0.065, NA],
        [0.083, 0.069, 0.064, 0.061, 0.054, 0.053, NA, NA],
        [0.072, 0.062, 0.057, 0.054, 0.049, NA, NA, NA],
        [0.064, 0.057, 0.053, 0.048, NA, NA, NA, NA],
        [0.057, 0.055, 0.051, NA, NA, NA, NA, NA],
        [0.064, 0.055, NA, NA, NA, NA, NA, NA],
    ]);
    let f = ReductionStats::from_grid(&fcn).unwrap();
    let t = ReductionStats::from_grid(&tf).unwrap();
    assert!((t.max_reduction.unwrap() - 36.14).abs() < 0.01);
    assert_eq!(t.rows.iter().find(|r| r.window_size == 45).unwrap().best_horizon, 50);
    assert!((f.mean_per_ws_best.unwrap() - 23.85).abs() < 0.01);
    assert_eq!(f.rows.len(), 7);
    assert!(f.mean_all_cells.unwrap() < f.mean_per_ws_best.unwrap());
    assert!(t.to_text().contains("36.14%"));
}

#[test]
fn grid_shapes_and_markers() {
    let nf = SweepDefinition::no_forecast();
    assert_eq!(nf.cells().len(), 15);
    let f = SweepDefinition::forecast();
    let row65: Vec<usize> = f.cells().into_iter().filter(|&(w, h)| w == 65 && h > 0).map(|c| c.1).collect();
    assert_eq!(row65, vec![10, 20, 30]);
    assert_eq!(f.cells().len(), 7 + 7 + 6 + 5 + 4 + 3 + 2 + 1);

    let empty = SweepGrid::new(vec![], vec![0]);
    assert_eq!(empty.to_csv().lines().count(), 1);
    let mut g = f.empty_grid();
    g.set(85, 10, 0.2).unwrap();
    let csv = g.to_csv();
    let row85 = csv.lines().find(|l| l.starts_with("85,")).unwrap();
    assert_eq!(row85, "85,--,0.2,--,--,--,--,--,--");
}

#[test]
fn scores_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        ScoreRow { user: "u00".into(), window_id: 0, label: 1, genuine_probability: 0.875 },
        ScoreRow { user: "u00".into(), window_id: 1, label: 0, genuine_probability: 0.125 },
        ScoreRow { user: "u01".into(), window_id: 0, label: 1, genuine_probability: 0.1 + 0.2 },
        ScoreRow { user: "u01".into(), window_id: 1, label: 0, genuine_probability: 0.6 },
    ];
    let path = dir.path().join("scores.csv");
    write_scores(&path, &rows).unwrap();
    assert!(fs::read_to_string(&path).unwrap().starts_with("user,window_id,label,genuine_probability\n"));
    assert_eq!(read_scores(&path).unwrap(), rows);
    let sets = score_sets_by_user(&rows).unwrap();
    assert_eq!(compute_eer(&sets["u00"]).unwrap().eer, 0.0);
    assert_eq!(compute_eer(&sets["u01"]).unwrap().eer, 1.0);
}

fn corpus(n: usize, seed: u64) -> Vec<Session> {
    let params: Vec<_> = (0..n).map(|i| SyntheticUserParams::sample(seed, i)).collect();
    generate_synthetic_dataset(&params).unwrap()
}

fn tiny_config() -> ExperimentConfig {
    let m = ModelConfig {
        d_model: 8,
        n_head: 2,
        d_q: 4,
        d_k: 4,
        d_v: 4,
        d_hidden: 16,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        dropout_rate: 0.0,
    };
    ExperimentConfig {
        forecaster_model: m,
        classifier_transformer: ModelConfig { n_decoder_layers: 0, ..m },
        fcn_filters: [4, 8, 4],
        forecaster_epochs: 2,
        classifier_epochs: 2,
        stride: 10,
        master_seed: 3,
        ..ExperimentConfig::reduced(ClassifierVariant::Fcn)
    }
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn resumed_sweep_is_bit_identical() {
    let sessions = corpus(3, 21);
    let config = tiny_config();
    let full_def = SweepDefinition { window_sizes: vec![45, 55], horizons: vec![0, 10], envelope: 95 };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = |d: &std::path::Path, workers| SweepOptions { cache_dir: Some(d.to_path_buf()), workers, users: None };

    let straight = run_sweep(&sessions, &full_def, &config, &opts(a.path(), 1)).unwrap();
    let half = SweepDefinition { window_sizes: vec![45], ..full_def.clone() };
    run_sweep(&sessions, &half, &config, &opts(b.path(), 1)).unwrap();
    assert_eq!(dir_bytes(b.path()).len(), 4);
    let resumed = run_sweep(&sessions, &full_def, &config, &opts(b.path(), 2)).unwrap();

    assert_eq!(straight, resumed);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert!(straight.eer.get(55, 10).is_some());
    assert!(straight.mse.get(45, 0).is_none() && straight.mse.get(45, 10).is_some());

    let other = ExperimentConfig { master_seed: 4, ..config };
    let changed = run_sweep(&sessions, &full_def, &other, &opts(b.path(), 1)).unwrap();
    assert_ne!(changed.cells[0].fingerprint, straight.cells[0].fingerprint);
}

#[test]
fn sweep_rejects_unknown_users() {
    let sessions = corpus(2, 22);
    let def = SweepDefinition { window_sizes: vec![45], horizons: vec![0], envelope: 95 };
    let opts = SweepOptions { cache_dir: None, workers: 1, users: Some(vec!["u99".into()]) };
    assert!(matches!(run_sweep(&sessions, &def, &tiny_config(), &opts), Err(CoreError::Data(_))));
}

#[test]
fn overlap_series_and_report_files() {
    let sessions = corpus(2, 23);
    let opts = SweepOptions { cache_dir: None, workers: 1, users: Some(vec!["u00".into()]) };
    let series = run_overlap_sweep(&sessions, 25, 20, None, &tiny_config(), &opts).unwrap();
    assert_eq!(series.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    assert!(series.spread().unwrap() >= 0.0);

    let def = SweepDefinition::forecast();
    let mut eer = def.empty_grid();
    let mut mse = def.empty_grid();
    for (w, h) in def.cells() {
        eer.set(w, h, 0.1 - h as f64 / 1000.0).unwrap();
        if h > 0 {
            mse.set(w, h, h as f64 / 100.0).unwrap();
        }
    }
    let report = Report {
        no_forecast_eer: Some(SweepDefinition::no_forecast().empty_grid()),
        forecast_eer: Some(eer.clone()),
        forecast_mse: Some(mse),
        overlap: vec![series.clone()],
        master_seed: Some(7),
        ..Report::default()
    };
    let dir = tempfile::tempdir().unwrap();
    emit_report(dir.path(), &report).unwrap();
    let files = dir_bytes(dir.path());
    for name in [
        "eer_forecast.csv",
        "eer_forecast.txt",
        "reduction.txt",
        "mse_forecast.csv",
        "summary.json",
        "overlap_ws25_h20.csv",
    ] {
        assert!(files.contains_key(name), "{name} missing");
    }
    let csv = String::from_utf8(files["eer_forecast.csv"].clone()).unwrap();
    assert_eq!(SweepGrid::from_csv(&csv).unwrap(), eer);
    let mse_csv = String::from_utf8(files["mse_forecast.csv"].clone()).unwrap();
    assert!(mse_csv.starts_with("window_size,+10,"));
    assert_eq!(mse_csv.lines().last().unwrap(), "85,0.1,--,--,--,--,--,--");
    let overlap = String::from_utf8(files["overlap_ws25_h20.csv"].clone()).unwrap();
    assert_eq!(overlap.lines().count(), 5);
    let summary = read_summary(&dir.path().join("summary.json")).unwrap();
    assert_eq!(summary.report, report);
    assert!(summary.reduction.unwrap().max_reduction.is_some());
}

#[test]
fn latency_within_budget() {
    let config = ExperimentConfig::reduced(ClassifierVariant::Fcn);
    let spec = ForecastSpec::with_median_overlap(45, 30).unwrap();
    let f = Forecaster::<f32>::new(config.forecaster_model, 1).unwrap();
    let model = AuthModel::new("u00", config.classifier_config(75), 1).unwrap();
    let sessions = corpus(2, 24);
    let window = sessions[0].samples.slice(ndarray::s![..45, ..]);
    let stats = timing_benchmark(Some((&f, &spec)), &model, window, 0, 100).unwrap();
    assert!(stats.min_ms > 0.0 && stats.max_ms.is_finite());
    assert!(stats.min_ms <= stats.median_ms && stats.median_ms <= stats.max_ms);
    assert!(stats.median_ms < 50.0, "median {} ms", stats.median_ms);
    assert!(stats.to_text().contains("22.22"));
    assert!(timing_benchmark(None, &model, window, 0, 10).is_err());
}

// Full-size TF (forecast plus a 512-wide classifier) sits above the ceiling
// on a single core, so only the FCN pipeline is held to it at full size.
// The raw matrix products alone take 25-50 ms on a shared single-core host,
// so this only means something on an otherwise idle machine.
#[test]
#[ignore = "wall-clock bound at full size; run with --ignored on an idle machine"]
fn latency_at_full_size() {
    let config = ExperimentConfig::paper(ClassifierVariant::Fcn);
    let spec = ForecastSpec::with_median_overlap(45, 30).unwrap();
    let f = Forecaster::<f32>::new(config.forecaster_model, 1).unwrap();
    let model = AuthModel::new("u00", config.classifier_config(75), 1).unwrap();
    let sessions = corpus(2, 25);
    let window = sessions[0].samples.slice(ndarray::s![..45, ..]);
    let stats = timing_benchmark(Some((&f, &spec)), &model, window, 0, 100).unwrap();
    assert!(stats.median_ms < 50.0, "median {} ms", stats.median_ms);
}
