use motionauth::authenticator::{
    authenticate, classify_window, concat_forecast, prepare_inputs, score_split, train_classifier, AuthModel,
    AuthScore, Classifier, ClassifierConfig, ClassifierTraining, ClassifierVariant, Decision, Pipeline,
};
use motionauth::checkpoint::{load_auth_model, load_forecaster, save_auth_model, save_forecaster};
use motionauth::data::{
    build_split, generate_synthetic_dataset, DatasetSplit, Label, LabeledWindow, Session, SplitOptions,
    SyntheticUserParams, WindowSpec,
};
use motionauth::forecaster::{ForecastOutput, ForecastSpec, Forecaster};
use motionauth::nn::{Ctx, Graph, LossWeights, ModelConfig, BCE_EPS};
use motionauth::CoreError;
use ndarray::{s, Array2};
use serde_json::json;

fn corpus(n: usize, seed: u64) -> Vec<Session> {
    let params: Vec<_> = (0..n).map(|i| SyntheticUserParams::sample(seed, i)).collect();
    generate_synthetic_dataset(&params).unwrap()
}

fn split(sessions: &[Session], ws: usize, user: &str) -> DatasetSplit {
    build_split(sessions, WindowSpec::new(ws, 5).unwrap(), user, SplitOptions { validation_fraction: 0.2, seed: 11 })
        .unwrap()
}

fn small_tf() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_head: 2,
        d_q: 8,
        d_k: 8,
        d_v: 8,
        d_hidden: 32,
        n_encoder_layers: 2,
        n_decoder_layers: 0,
        dropout_rate: 0.0,
    }
}

fn config(variant: ClassifierVariant, len: usize) -> ClassifierConfig {
    ClassifierConfig {
        fcn_filters: [8, 16, 8],
        transformer: small_tf(),
        learning_rate: 1e-3,
        ..ClassifierConfig::new(variant, len)
    }
}

fn tiny_forecaster() -> Forecaster<f32> {
    let cfg = ModelConfig { n_encoder_layers: 1, n_decoder_layers: 1, ..small_tf() };
    Forecaster::new(cfg, 4).unwrap()
}

fn settings(epochs: usize) -> ClassifierTraining {
    ClassifierTraining { epochs, batch_size: 16, seed: 5, ..ClassifierTraining::default() }
}

#[test]
fn paper_defaults() {
    let c = ClassifierConfig::new(ClassifierVariant::Fcn, 75);
    assert_eq!((c.fcn_filters, c.fcn_kernels, c.learning_rate), ([128, 256, 128], [8, 5, 3], 1e-3));
    let t = ClassifierConfig::new(ClassifierVariant::Transformer, 75);
    assert_eq!(t.learning_rate, 1e-4);
    assert_eq!((t.transformer.d_model, t.transformer.n_encoder_layers, t.transformer.n_head), (512, 2, 8));
    assert_eq!("tf".parse::<ClassifierVariant>().unwrap(), ClassifierVariant::Transformer);
    assert!("rnn".parse::<ClassifierVariant>().is_err());
}

#[test]
fn concat_layout() {
    let window = Array2::from_shape_fn((45, 4), |(r, c)| (r * 4 + c) as f64);
    let forecast = ForecastOutput {
        positions: Array2::from_shape_fn((30, 3), |(r, c)| -((r * 3 + c) as f64)),
        trigger: (0..30).map(|r| r as f64 / 30.0).collect(),
    };
    let joined = concat_forecast(window.view(), &forecast).unwrap();
    assert_eq!(joined.dim(), (75, 4));
    assert_eq!(joined.slice(s![..45, ..]), window);
    assert_eq!(joined.slice(s![45.., ..3]), forecast.positions);
    assert_eq!(joined[[47, 3]], 2.0 / 30.0);

    assert_eq!(concat_forecast(window.view(), &ForecastOutput::empty()).unwrap(), window);
    let narrow = Array2::<f64>::zeros((45, 3));
    assert!(matches!(concat_forecast(narrow.view(), &forecast), Err(CoreError::Shape(_))));
}

#[test]
fn ground_truth_forecast_reproduces_the_session() {
    let sessions = corpus(2, 1);
    let s0 = &sessions[0];
    let window = s0.samples.slice(s![..45, ..]);
    let truth = s0.samples.slice(s![45..75, ..]);
    let oracle = ForecastOutput { positions: truth.slice(s![.., ..3]).to_owned(), trigger: truth.column(3).to_vec() };
    assert_eq!(concat_forecast(window, &oracle).unwrap(), s0.samples.slice(s![..75, ..]));
}

#[test]
fn softmax_outputs_and_untrained_band() {
    let sessions = corpus(3, 2);
    for variant in [ClassifierVariant::Fcn, ClassifierVariant::Transformer] {
        let model = AuthModel::new("u00", config(variant, 45), 3).unwrap();
        for w in split(&sessions, 45, "u00").test.iter().take(10) {
            let score = classify_window(&model, w.values.view()).unwrap();
            assert!((score.genuine_probability + score.impostor_probability - 1.0).abs() < 1e-6);
            assert!(score.genuine_probability > 0.3 && score.genuine_probability < 0.7, "{variant}: {score:?}");
        }
        let wrong = Array2::<f64>::zeros((44, 4));
        assert!(matches!(classify_window(&model, wrong.view()), Err(CoreError::Shape(_))));
    }
}

#[test]
fn authenticate_thresholds() {
    let s = |p: f64| AuthScore { genuine_probability: p, impostor_probability: 1.0 - p };
    for p in [0.0, 0.3, 1.0] {
        assert_eq!(authenticate(&s(p), 0.0), Decision::Accept);
    }
    assert_eq!(authenticate(&s(1.0), 1.0), Decision::Accept);
    assert_eq!(authenticate(&s(0.999_999), 1.0), Decision::Reject);
    assert_eq!(s(0.5).decision(0.5), Decision::Accept);
}

fn memorization_split(sessions: &[Session]) -> DatasetSplit {
    let mut sp = split(sessions, 45, "u01");
    sp.train.truncate(20);
    sp.validation.clear();
    assert_eq!(sp.train.iter().filter(|w| w.label.is_genuine()).count(), 10);
    sp
}

#[test]
fn classifiers_memorize_twenty_windows() {
    let sessions = corpus(4, 3);
    let sp = memorization_split(&sessions);
    for (variant, epochs) in [(ClassifierVariant::Fcn, 150), (ClassifierVariant::Transformer, 300)] {
        let mut model = AuthModel::new("u01", config(variant, 45), 1).unwrap();
        let report = train_classifier(
            &mut model,
            &sp,
            Pipeline::NoForecast,
            &ClassifierTraining { batch_size: 20, ..settings(epochs) },
        )
        .unwrap();
        assert_eq!(report.best_epoch, None);
        assert!(report.validation_eer.is_empty());
        let scores = score_split(&model, &sp.train, None, true).unwrap();
        let correct = sp
            .train
            .iter()
            .zip(&scores)
            .filter(|(w, s)| (s.genuine_probability >= 0.5) == w.label.is_genuine())
            .count();
        assert_eq!(correct, 20, "{variant}: final loss {:?}", report.loss_trace.last());
    }
}

#[test]
fn fcn_inference_ignores_batch_composition() {
    let sessions = corpus(3, 4);
    let sp = split(&sessions, 45, "u00");
    let mut model = AuthModel::new("u00", config(ClassifierVariant::Fcn, 45), 2).unwrap();
    train_classifier(&mut model, &sp, Pipeline::NoForecast, &settings(2)).unwrap();
    let views: Vec<_> = sp.test.iter().map(|w| w.values.view()).collect();
    let all = model.classifier.predict(&views).unwrap();
    for (i, v) in views.iter().enumerate().step_by(7) {
        let alone = model.classifier.predict(&[*v]).unwrap()[0];
        let mixed = model.classifier.predict(&[views[0], *v, views[views.len() - 1]]).unwrap()[1];
        for k in 0..2 {
            assert!((alone[k] - all[i][k]).abs() < 1e-6);
            assert!((mixed[k] - all[i][k]).abs() < 1e-6);
        }
    }
}

#[test]
fn transformer_is_sensitive_to_row_order() {
    let sessions = corpus(2, 5);
    let model = AuthModel::new("u00", config(ClassifierVariant::Transformer, 45), 9).unwrap();
    let w = sessions[0].samples.slice(s![..45, ..]).to_owned();
    let base = classify_window(&model, w.view()).unwrap().genuine_probability;
    let reversed = w.slice(s![..;-1, ..]).to_owned();
    let mut rolled = w.clone();
    rolled.slice_mut(s![..5, ..]).assign(&w.slice(s![40.., ..]));
    rolled.slice_mut(s![5.., ..]).assign(&w.slice(s![..40, ..]));
    let differs =
        [reversed, rolled].iter().any(|p| classify_window(&model, p.view()).unwrap().genuine_probability != base);
    assert!(differs);
}

#[test]
fn training_is_bit_reproducible() {
    let sessions = corpus(3, 6);
    let sp = split(&sessions, 45, "u02");
    for variant in [ClassifierVariant::Fcn, ClassifierVariant::Transformer] {
        let run = || {
            let mut m = AuthModel::new("u02", config(variant, 45), 7).unwrap();
            let r = train_classifier(&mut m, &sp, Pipeline::NoForecast, &settings(3)).unwrap();
            (r, m.classifier.store.entries().to_vec(), m.metadata)
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.0.best_epoch.is_some());
        assert_eq!(a.0.validation_eer.len(), 3);
    }
}

#[test]
fn no_forecast_loss_is_plain_bce() {
    let sessions = corpus(3, 7);
    let sp = split(&sessions, 45, "u00");
    let full = ClassifierTraining { epochs: 1, batch_size: sp.train.len(), ..settings(1) };
    let initial = AuthModel::new("u00", config(ClassifierVariant::Fcn, 45), 8).unwrap();

    let mut g = Graph::<f32>::new();
    let batch: Vec<f32> = sp.train.iter().flat_map(|w| w.values.iter().map(|&v| v as f32)).collect();
    let x = g.constant(motionauth::nn::Tensor::new(&[sp.train.len(), 45, 4], batch).unwrap());
    let (probs, _) = initial.classifier.forward(&mut g, x, &mut Ctx::train_no_dropout()).unwrap();
    let p = g.value(probs).data().to_vec();
    let eps = BCE_EPS;
    let oracle = -sp
        .train
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let q = (p[2 * i + 1] as f64).clamp(eps, 1.0 - eps);
            let y = w.label.value();
            y * q.ln() + (1.0 - y) * (1.0 - q).ln()
        })
        .sum::<f64>()
        / sp.train.len() as f64;

    let mut traces = Vec::new();
    for weights in [LossWeights { lambda_f: 0.0, lambda_t: 0.0 }, LossWeights { lambda_f: 5.0, lambda_t: 3.0 }] {
        let mut m = initial.clone();
        let r = train_classifier(&mut m, &sp, Pipeline::NoForecast, &ClassifierTraining { weights, ..full }).unwrap();
        traces.push(r.loss_trace);
    }
    assert_eq!(traces[0], traces[1]);
    assert!((traces[0][0] - oracle).abs() < 1e-5, "{} vs {oracle}", traces[0][0]);
}

#[test]
fn zero_horizon_pipeline_matches_no_forecast() {
    let sessions = corpus(3, 8);
    let sp = split(&sessions, 45, "u01");
    let f = tiny_forecaster();
    let spec = ForecastSpec::new(45, 20, 0).unwrap();
    let inputs = prepare_inputs(&sp.test, Some((&f, &spec)), true).unwrap();
    assert!(inputs.iter().zip(&sp.test).all(|(x, w)| *x == w.values));

    let train = |pipeline| {
        let mut m = AuthModel::new("u01", config(ClassifierVariant::Fcn, 45), 3).unwrap();
        let r = train_classifier(&mut m, &sp, pipeline, &settings(2)).unwrap();
        (r, m.classifier.store.entries().to_vec())
    };
    assert_eq!(train(Pipeline::NoForecast), train(Pipeline::Staged { forecaster: &f, spec }));
}

#[test]
fn staged_and_joint_training_run() {
    let sessions = corpus(3, 9);
    let sp = split(&sessions, 45, "u00");
    let spec = ForecastSpec::new(45, 20, 10).unwrap();
    let mut f = tiny_forecaster();
    let before = f.store.entries().to_vec();
    let mut m = AuthModel::new("u00", config(ClassifierVariant::Fcn, 55), 1).unwrap();
    let r = train_classifier(&mut m, &sp, Pipeline::Staged { forecaster: &f, spec }, &settings(2)).unwrap();
    assert!(r.loss_trace.iter().all(|l| l.is_finite()));
    assert_eq!(f.store.entries(), &before[..], "staged training leaves the forecaster frozen");

    let mut m = AuthModel::new("u00", config(ClassifierVariant::Fcn, 55), 1).unwrap();
    let r = train_classifier(&mut m, &sp, Pipeline::Joint { forecaster: &mut f, spec }, &settings(2)).unwrap();
    assert!(r.loss_trace.iter().all(|l| l.is_finite()));
    assert_ne!(f.store.entries(), &before[..]);

    let mut wrong_len = AuthModel::new("u00", config(ClassifierVariant::Fcn, 45), 1).unwrap();
    let err = train_classifier(&mut wrong_len, &sp, Pipeline::Staged { forecaster: &f, spec }, &settings(1));
    assert!(matches!(err, Err(CoreError::Config(_))));
}

#[test]
fn impostor_continuation_flag() {
    let sessions = corpus(3, 10);
    let sp = split(&sessions, 45, "u00");
    let f = tiny_forecaster();
    let spec = ForecastSpec::new(45, 20, 10).unwrap();
    let forecasted = prepare_inputs(&sp.test, Some((&f, &spec)), true).unwrap();
    let truthful = prepare_inputs(&sp.test, Some((&f, &spec)), false).unwrap();
    for ((w, a), b) in sp.test.iter().zip(&forecasted).zip(&truthful) {
        match (w.label, w.future(10)) {
            (Label::Impostor, Some(truth)) => {
                assert_eq!(b.slice(s![45.., ..]), truth);
                assert_ne!(a, b);
            }
            _ => assert_eq!(a, b),
        }
    }
}

#[test]
fn degenerate_split_is_rejected() {
    let sessions = corpus(3, 11);
    let mut sp = split(&sessions, 45, "u00");
    sp.train.retain(|w| w.label.is_genuine());
    let mut m = AuthModel::new("u00", config(ClassifierVariant::Fcn, 45), 1).unwrap();
    assert!(matches!(train_classifier(&mut m, &sp, Pipeline::NoForecast, &settings(1)), Err(CoreError::Training(_))));
}

#[test]
fn per_user_isolation() {
    let sessions = corpus(4, 12);
    for user in ["u00", "u03"] {
        let sp = split(&sessions, 45, user);
        for w in sp.train.iter().chain(&sp.validation).chain(&sp.test) {
            assert_eq!(w.label.is_genuine(), w.source_user == user);
        }
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = corpus(3, 13);
    let sp = split(&sessions, 45, "u00");
    for variant in [ClassifierVariant::Fcn, ClassifierVariant::Transformer] {
        let mut m = AuthModel::new("u00", config(variant, 45), 2).unwrap();
        train_classifier(&mut m, &sp, Pipeline::NoForecast, &settings(1)).unwrap();
        let path = dir.path().join(format!("{variant}.ckpt"));
        save_auth_model(&path, &m, json!({"seed": 2})).unwrap();
        let (back, manifest) = load_auth_model(&path).unwrap();
        assert_eq!(manifest["seed"], 2);
        assert_eq!(back.classifier.store.entries(), m.classifier.store.entries());
        assert_eq!(back.metadata, m.metadata);
        assert_eq!(score_split(&back, &sp.test, None, true).unwrap(), score_split(&m, &sp.test, None, true).unwrap());
        assert!(load_forecaster(&path).is_err());
    }

    let f = tiny_forecaster();
    let path = dir.path().join("f.ckpt");
    save_forecaster(&path, &f, json!({})).unwrap();
    let (back, _) = load_forecaster(&path).unwrap();
    assert_eq!(back.store.entries(), f.store.entries());
    let spec = ForecastSpec::new(45, 20, 30).unwrap();
    let w: &LabeledWindow = &sp.test[0];
    assert_eq!(back.forecast(w.values.view(), 0, &spec).unwrap(), f.forecast(w.values.view(), 0, &spec).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_forecaster(&path), Err(CoreError::Checkpoint(_))));
    std::fs::write(&path, &std::fs::read(dir.path().join("fcn.ckpt")).unwrap()[..40]).unwrap();
    assert!(load_forecaster(&path).is_err());
}

#[test]
fn classifier_rejects_wrong_input_shape() {
    let c = Classifier::<f32>::new(config(ClassifierVariant::Fcn, 45), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(motionauth::nn::Tensor::new(&[1, 40, 4], vec![0.0f32; 160]).unwrap());
    assert!(c.forward(&mut g, x, &mut Ctx::eval()).is_err());
}
