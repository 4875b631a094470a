use std::collections::{BTreeMap, HashMap};

use motionauth::data::{
    build_split, generate_synthetic_dataset, load_sessions, read_session_csv, sample_impostors, slide_windows, users,
    write_dataset, write_session_csv, Day, Label, LabeledWindow, Session, SessionFormat, SplitOptions,
    SyntheticUserParams, WindowSpec, SESSION_LEN,
};
use motionauth::seed;
use motionauth::CoreError;
use ndarray::{s, Array2};
use proptest::prelude::*;

fn corpus(n_users: usize, seed: u64) -> Vec<Session> {
    let params: Vec<_> = (0..n_users).map(|i| SyntheticUserParams::sample(seed, i)).collect();
    generate_synthetic_dataset(&params).unwrap()
}

#[test]
fn window_counts_on_grid() {
    let sessions = corpus(2, 1);
    for n in (25..=95).step_by(5).chain([1, 135]) {
        for l in [1, 2, 3, 5, 7, 10, 50] {
            let got = slide_windows(&sessions[0], WindowSpec::new(n, l).unwrap()).unwrap();
            assert_eq!(got.len(), (SESSION_LEN - n) / l + 1, "n={n} l={l}");
            assert_eq!(got[0].0, 0);
            assert!(got.windows(2).all(|p| p[1].0 - p[0].0 == l));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stride_one_windows_reconstruct_session(n in 1usize..=135, seed in 0u64..1000) {
        let sessions = corpus(2, seed);
        let s = &sessions[3];
        let windows = slide_windows(s, WindowSpec::new(n, 1).unwrap()).unwrap();
        let mut rebuilt = Array2::<f64>::from_elem((SESSION_LEN, 4), f64::NAN);
        for (start, w) in windows {
            for (r, row) in w.rows().into_iter().enumerate() {
                let t = start + r;
                if rebuilt[[t, 0]].is_nan() {
                    rebuilt.row_mut(t).assign(&row);
                } else {
                    prop_assert_eq!(rebuilt.row(t), row);
                }
            }
        }
        prop_assert_eq!(rebuilt, s.samples.clone());
    }
}

#[test]
fn impostors_from_forced_other_user() {
    let sessions = corpus(2, 4);
    let split = build_split(&sessions, WindowSpec::new(25, 5).unwrap(), "u00", SplitOptions::default()).unwrap();
    for w in split.train.iter().chain(&split.validation).chain(&split.test) {
        match w.label {
            Label::Genuine => assert_eq!(w.source_user, "u00"),
            Label::Impostor => assert_eq!(w.source_user, "u01"),
        }
    }
}

#[test]
fn impostor_rows_match_genuine_time_span() {
    let sessions = corpus(3, 5);
    let g = sessions.iter().find(|s| s.user_id == "u00" && s.day == Day::One).unwrap();
    let genuine = vec![LabeledWindow::from_session(g, 40, 25, Label::Genuine, 0).unwrap()];
    let imp = sample_impostors(&genuine, &sessions, "u00", &mut seed::rng(9)).unwrap();
    assert_eq!(imp.len(), 1);
    let i = &imp[0];
    assert_eq!((i.start_timestamp, i.len(), i.label, i.matched_to()), (40, 25, Label::Impostor, Some(0)));
    let src = sessions
        .iter()
        .find(|s| s.user_id == i.source_user && s.day == i.source_day && s.session_index == i.source_session)
        .unwrap();
    assert_ne!(src.user_id, "u00");
    assert_eq!(src.day, Day::One);
    assert_eq!(i.values, src.samples.slice(s![40..65, ..]));
}

#[test]
fn impostor_user_frequency_is_uniform() {
    let sessions = corpus(41, 6);
    let g = sessions.iter().find(|s| s.user_id == "u00" && s.day == Day::Two).unwrap();
    let genuine: Vec<LabeledWindow> =
        (0..1000).map(|_| LabeledWindow::from_session(g, 10, 30, Label::Genuine, 0).unwrap()).collect();
    let imp = sample_impostors(&genuine, &sessions, "u00", &mut seed::rng(77)).unwrap();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &imp {
        assert_eq!(w.source_day, Day::Two);
        *counts.entry(w.source_user.as_str()).or_default() += 1;
    }
    assert_eq!(counts.len(), 40);
    assert!(!counts.contains_key("u00"));
    let p: f64 = 1.0 / 40.0;
    let se = (p * (1.0 - p) / 1000.0).sqrt();
    for (u, c) in counts {
        let f = c as f64 / 1000.0;
        assert!((f - p).abs() <= 3.0 * se, "{u}: {f}");
    }
}

#[test]
fn single_user_cannot_sample() {
    let sessions: Vec<Session> = corpus(2, 1).into_iter().filter(|s| s.user_id == "u00").collect();
    let g = &sessions[0];
    let err = sample_impostors(
        &[LabeledWindow::from_session(g, 0, 25, Label::Genuine, 0).unwrap()],
        &sessions,
        "u00",
        &mut seed::rng(1),
    );
    assert!(matches!(err, Err(CoreError::Data(_))));
}

#[test]
fn split_contracts() {
    let sessions = corpus(5, 8);
    let spec = WindowSpec::new(25, 5).unwrap();
    let a = build_split(&sessions, spec, "u02", SplitOptions { validation_fraction: 0.2, seed: 3 }).unwrap();
    let b = build_split(&sessions, spec, "u02", SplitOptions { validation_fraction: 0.2, seed: 3 }).unwrap();
    assert_eq!(a, b);
    let c = build_split(&sessions, spec, "u02", SplitOptions { validation_fraction: 0.2, seed: 4 }).unwrap();
    assert_ne!(a, c);

    assert_eq!((a.train.len() + a.validation.len()) / 2, 230);
    assert_eq!(a.validation.len() / 2, 46);
    for list in [&a.train, &a.validation, &a.test] {
        let g = list.iter().filter(|w| w.label == Label::Genuine).count();
        assert_eq!(2 * g, list.len());
        for pair in list.chunks(2) {
            assert_eq!(pair[0].label, Label::Genuine);
            assert_eq!(pair[1].matched_to(), Some(pair[0].pair_id));
            assert_eq!(pair[0].start_timestamp, pair[1].start_timestamp);
            assert_eq!(pair[0].source_day, pair[1].source_day);
        }
    }
    assert!(a.train.iter().chain(&a.validation).all(|w| w.source_day == Day::One));
    assert!(a.test.iter().all(|w| w.source_day == Day::Two));
    assert!(a.train.iter().chain(&a.test).filter(|w| w.label == Label::Genuine).all(|w| w.source_user == "u02"));

    let full = build_split(&sessions, spec, "u02", SplitOptions { validation_fraction: 0.0, seed: 3 }).unwrap();
    assert!(full.validation.is_empty());
    assert_eq!(full.train.len(), 460);
}

#[test]
fn train_and_test_impostor_orders_differ() {
    let sessions = corpus(10, 2);
    let split = build_split(
        &sessions,
        WindowSpec::new(45, 5).unwrap(),
        "u00",
        SplitOptions { validation_fraction: 0.0, seed: 1 },
    )
    .unwrap();
    let order = |l: &[LabeledWindow]| -> Vec<(String, usize)> {
        l.iter().filter(|w| w.label == Label::Impostor).map(|w| (w.source_user.clone(), w.source_session)).collect()
    };
    assert_ne!(order(&split.train), order(&split.test));
}

#[test]
fn missing_day_is_a_data_error() {
    let sessions: Vec<Session> =
        corpus(3, 1).into_iter().filter(|s| !(s.user_id == "u01" && s.day == Day::Two)).collect();
    let err = build_split(&sessions, WindowSpec::new(25, 5).unwrap(), "u01", SplitOptions::default());
    assert!(matches!(err, Err(CoreError::Data(_))));
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = corpus(2, 11);
    assert_eq!(write_dataset(dir.path(), &sessions, BTreeMap::new()).unwrap(), 40);
    let loaded = load_sessions(dir.path(), &SessionFormat::default()).unwrap();
    assert_eq!(loaded, sessions);
    let manifest = motionauth::data::read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.users, users(&sessions));
}

fn write_raw(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("session00.csv");
    std::fs::write(&p, body).unwrap();
    p
}

fn valid_rows(n: usize) -> String {
    let mut s = String::from("t,x,y,z,trigger\n");
    for t in 0..n {
        s.push_str(&format!("{t},0.1,1.2,0.3,0.5\n"));
    }
    s
}

#[test]
fn loader_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let fmt = SessionFormat::default();
    let ok = write_raw(dir.path(), &valid_rows(135));
    assert_eq!(read_session_csv(&ok, "u", Day::One, 0, &fmt).unwrap().samples.dim(), (135, 4));

    let short = write_raw(dir.path(), &valid_rows(134));
    let e = read_session_csv(&short, "u", Day::One, 0, &fmt).unwrap_err();
    assert!(matches!(&e, CoreError::File { file, .. } if file == &short), "{e}");

    let mut text = valid_rows(135);
    text = text.replacen("5,0.1,1.2,0.3,0.5", "5,0.1,abc,0.3,0.5", 1);
    let p = write_raw(dir.path(), &text);
    match read_session_csv(&p, "u", Day::One, 0, &fmt).unwrap_err() {
        CoreError::File { row, .. } => assert_eq!(row, 7),
        e => panic!("{e}"),
    }

    let text = valid_rows(135).replacen("9,0.1,1.2,0.3,0.5", "9,0.1,1.2,0.3,1.5", 1);
    let p = write_raw(dir.path(), &text);
    assert!(read_session_csv(&p, "u", Day::One, 0, &fmt).unwrap_err().to_string().contains("trigger"));

    let text = valid_rows(135).replacen("3,0.1,1.2,0.3,0.5", "3,0.1,1.2,0.5", 1);
    let p = write_raw(dir.path(), &text);
    assert!(read_session_csv(&p, "u", Day::One, 0, &fmt).unwrap_err().to_string().contains("columns"));
}

#[test]
fn writer_and_reader_share_schema() {
    let dir = tempfile::tempdir().unwrap();
    let s = &corpus(2, 3)[0];
    let p = dir.path().join("x.csv");
    write_session_csv(&p, s).unwrap();
    let back = read_session_csv(&p, &s.user_id, s.day, s.session_index, &SessionFormat::default()).unwrap();
    assert_eq!(&back, s);
}

#[test]
fn zero_noise_sessions_are_identical() {
    let mut p = SyntheticUserParams::sample(1, 0);
    p.noise_sigma = [0.0; 3];
    let q = SyntheticUserParams::sample(1, 1);
    let sessions = generate_synthetic_dataset(&[p, q]).unwrap();
    let u0: Vec<&Session> = sessions.iter().filter(|s| s.user_id == "u00").collect();
    assert_eq!(u0.len(), 20);
    assert!(u0.iter().all(|s| s.samples == u0[0].samples));
    let u1: Vec<&Session> = sessions.iter().filter(|s| s.user_id == "u01").collect();
    assert_ne!(u1[0].samples, u1[1].samples);
}

#[test]
fn trigger_has_one_high_segment() {
    for s in corpus(6, 12) {
        let trig: Vec<f64> = s.samples.column(3).to_vec();
        assert!(trig.iter().all(|&v| v == 0.0 || v == 1.0));
        let rises = trig.windows(2).filter(|w| w[0] == 0.0 && w[1] == 1.0).count() + usize::from(trig[0] == 1.0);
        assert_eq!(rises, 1);
    }
}

#[test]
fn nearest_centroid_separates_distant_apexes() {
    let a = SyntheticUserParams::sample(5, 0);
    let mut b = a.clone();
    b.rng_seed ^= 0xABCD;
    b.apex[0] += 0.5;
    let sessions = generate_synthetic_dataset(&[a, b]).unwrap();
    let spec = WindowSpec::new(45, 5).unwrap();
    let windows = |user: &str, day: Day| -> Vec<Array2<f64>> {
        sessions
            .iter()
            .filter(|s| s.user_id == user && s.day == day)
            .flat_map(|s| slide_windows(s, spec).unwrap().into_iter().map(|(_, w)| w.to_owned()))
            .collect()
    };
    let centroid = |ws: &[Array2<f64>]| ws.iter().fold(Array2::zeros((45, 4)), |acc, w| acc + w) / ws.len() as f64;
    let (c0, c1) = (centroid(&windows("u00", Day::One)), centroid(&windows("u01", Day::One)));
    let dist = |x: &Array2<f64>, c: &Array2<f64>| (x - c).mapv(|v| v * v).sum();
    let (mut right, mut total) = (0, 0);
    for (user, c_own, c_other) in [("u00", &c0, &c1), ("u01", &c1, &c0)] {
        for w in windows(user, Day::Two) {
            total += 1;
            right += usize::from(dist(&w, c_own) < dist(&w, c_other));
        }
    }
    assert!(right as f64 / total as f64 >= 0.95, "{right}/{total}");
}
