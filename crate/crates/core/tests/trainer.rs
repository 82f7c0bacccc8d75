use tgt_core::autodiff::Tensor;
use tgt_core::data::{prepare, PrepareConfig, Sample};
use tgt_core::model::{init_params, ModelConfig};
use tgt_core::rng::Rng;
use tgt_core::synth::{generate, SynthConfig};
use tgt_core::train::*;

fn random_samples(rng: &mut Rng, count: usize, c: usize, n: usize, m: usize) -> Vec<Sample> {
    (0..count)
        .map(|_| Sample {
            apps: (0..m).map(|_| 1 + rng.below(c - 1)).collect(),
            durations: (0..m).map(|_| rng.uniform_range(-1.5, 1.5)).collect(),
            user: rng.below(n),
            hour: rng.below(24) as u8,
            label: 1 + rng.below(c - 1),
            timestamp: 0,
        })
        .collect()
}

fn tiny_model(c: usize, n: usize, m: usize) -> ModelConfig {
    let mut mc = ModelConfig::new(c, n);
    mc.d = 16;
    mc.layers = 1;
    mc.heads = 2;
    mc.dropout = 0.0;
    mc.window = m;
    mc
}

#[test]
fn adam_first_step_closed_form() {
    let cfg = TrainConfig::default();
    let mut params = vec![Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0])];
    let g = [0.3, -1e-3, 7.0, 0.0];
    let grads = vec![Tensor::new(vec![4], g.to_vec())];
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &grads, &mut state, &cfg, 1).unwrap();
    let before = [1.0, -2.0, 0.5, 3.0];
    for j in 0..4 {
        // After bias correction m̂ = g and v̂ = g².
        let expected = before[j] - cfg.learning_rate * g[j] / (g[j].abs() + cfg.eps);
        assert!((params[0].data[j] - expected).abs() < 1e-15, "{j}");
    }
}

#[test]
fn adam_zero_gradient_is_noop() {
    let cfg = TrainConfig::default();
    let mut params = vec![Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4])];
    let before = params.clone();
    let grads = vec![Tensor::zeros(&[2, 2])];
    let mut state = AdamState::new(&params);
    for t in 1..=3 {
        adam_step(&mut params, &grads, &mut state, &cfg, t).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn adam_rejects_bad_input() {
    let cfg = TrainConfig::default();
    let mut params = vec![Tensor::zeros(&[3])];
    let mut state = AdamState::new(&params);
    assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, &cfg, 0).is_err());
    assert!(adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, &cfg, 1).is_err());
}

#[test]
fn training_is_deterministic() {
    let mut rng = Rng::new(1);
    let samples = random_samples(&mut rng, 40, 8, 3, 4);
    let mut mc = tiny_model(8, 3, 4);
    mc.dropout = 0.1;
    let cfg = TrainConfig { batch_size: 8, max_epochs: 3, patience: 3, seed: 9, ..TrainConfig::default() };
    let (a, ra) = train_samples(&samples, &samples, &mc, &cfg).unwrap();
    let (b, rb) = train_samples(&samples, &samples, &mc, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epochs, rb.epochs);
    let (c, _) = train_samples(&samples, &samples, &mc, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn patience_one_stops_after_second_epoch() {
    // Training pushes every prediction towards app 1 while validation asks
    // for app 2, so validation loss rises every epoch.
    let mut rng = Rng::new(2);
    let mut train = random_samples(&mut rng, 32, 6, 2, 3);
    train.iter_mut().for_each(|s| s.label = 1);
    let mut validation = train.clone();
    validation.iter_mut().for_each(|s| s.label = 2);
    let mc = tiny_model(6, 2, 3);
    let cfg = TrainConfig { batch_size: 4, learning_rate: 1e-2, max_epochs: 20, patience: 1, ..TrainConfig::default() };
    let (_, report) = train_samples(&train, &validation, &mc, &cfg).unwrap();
    assert!(report.epochs[1].validation_loss >= report.epochs[0].validation_loss);
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(report.stop_reason, StopReason::Patience);
    assert_eq!(report.best_epoch, 1);
}

#[test]
fn report_tracks_best_epoch() {
    let mut rng = Rng::new(3);
    let train = random_samples(&mut rng, 48, 8, 3, 4);
    let validation = random_samples(&mut rng, 16, 8, 3, 4);
    let mc = tiny_model(8, 3, 4);
    let cfg = TrainConfig { batch_size: 8, max_epochs: 6, patience: 2, ..TrainConfig::default() };
    let (params, report) = train_samples(&train, &validation, &mc, &cfg).unwrap();
    assert!(report.epochs.iter().enumerate().all(|(i, e)| e.epoch == i + 1));
    assert!(report.epochs.iter().all(|e| e.train_loss.is_finite() && e.validation_loss.is_finite()));
    let best = &report.epochs[report.best_epoch - 1];
    assert!(report.epochs[..report.best_epoch].iter().all(|e| best.validation_loss <= e.validation_loss));
    let (loss, hr1) = loss_and_hr1(&params, &mc, &validation).unwrap();
    assert_eq!((loss, hr1), (best.validation_loss, best.validation_hr1));
    let json = report.to_json().unwrap();
    assert!(json.contains("\"best_epoch\"") && json.contains(&report.model_fingerprint));
}

#[test]
fn first_steps_decrease_loss_on_fixed_batch() {
    let mut rng = Rng::new(4);
    let samples = random_samples(&mut rng, 16, 8, 2, 4);
    let batch: Vec<&Sample> = samples.iter().collect();
    let mc = tiny_model(8, 2, 4);
    let cfg = TrainConfig::default();
    let mut params = init_params(&mc, &mut Rng::new(0)).unwrap();
    let mut state = AdamState::new(params.tensors());
    let mut losses = Vec::new();
    for t in 1..=6 {
        let (loss, grads) = loss_and_grads(&params, &mc, &batch, &mut Rng::new(0), false).unwrap();
        losses.push(loss);
        adam_step(params.tensors_mut(), &grads, &mut state, &cfg, t).unwrap();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn memorises_small_sample_set() {
    let mut rng = Rng::new(7);
    let samples = random_samples(&mut rng, 64, 10, 4, 5);
    let mc = tiny_model(10, 4, 5);
    let cfg = TrainConfig { batch_size: 8, max_epochs: 200, patience: 200, ..TrainConfig::default() };
    let (params, _) = train_samples(&samples, &samples, &mc, &cfg).unwrap();
    let (_, hr1) = loss_and_hr1(&params, &mc, &samples).unwrap();
    assert!(hr1 >= 0.99, "{hr1}");
}

#[test]
fn empty_training_set_is_an_error() {
    let mut rng = Rng::new(5);
    let v = random_samples(&mut rng, 4, 6, 2, 3);
    assert!(train_samples(&[], &v, &tiny_model(6, 2, 3), &TrainConfig::default()).is_err());
}

fn small_bundle() -> tgt_core::data::SplitBundle {
    let synth = SynthConfig::new(6, 6, 4, 3);
    prepare(generate(&synth).unwrap(), &PrepareConfig::default()).unwrap()
}

#[test]
fn grid_two_by_two_gives_four_rows() {
    let bundle = small_bundle();
    let mut mc = ModelConfig::new(bundle.n_apps(), bundle.n_users());
    mc.d = 8;
    mc.layers = 1;
    mc.heads = 2;
    mc.window = bundle.window;
    let cfg = TrainConfig { batch_size: 64, max_epochs: 2, patience: 2, ..TrainConfig::default() };
    let grid = vec![
        ("d".to_string(), vec!["8".to_string(), "16".to_string()]),
        ("learning_rate".to_string(), vec!["0.001".to_string(), "0.01".to_string()]),
    ];
    let result = grid_search(&bundle, &mc, &cfg, &grid).unwrap();
    assert_eq!(result.rows.len(), 4);
    let cells: Vec<Vec<&str>> =
        result.rows.iter().map(|r| r.settings.iter().map(|(_, v)| v.as_str()).collect()).collect();
    assert_eq!(cells, [["8", "0.001"], ["8", "0.01"], ["16", "0.001"], ["16", "0.01"]]);
    // The selected row has the highest HR@1 in the table.
    let top = result.rows.iter().map(|r| r.validation_hr1).fold(f64::MIN, f64::max);
    assert_eq!(result.rows[result.best].validation_hr1, top);
    let csv = result.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("d,learning_rate,validation_hr1"));
}

#[test]
fn grid_singleton_matches_plain_training() {
    let bundle = small_bundle();
    let mut mc = ModelConfig::new(bundle.n_apps(), bundle.n_users());
    mc.d = 8;
    mc.layers = 1;
    mc.heads = 2;
    mc.window = bundle.window;
    let cfg = TrainConfig { batch_size: 64, max_epochs: 2, patience: 2, ..TrainConfig::default() };
    let result = grid_search(&bundle, &mc, &cfg, &[("d".to_string(), vec!["8".to_string()])]).unwrap();
    let (_, report) = train(&bundle, &mc, &cfg).unwrap();
    let rec = &report.epochs[report.best_epoch - 1];
    assert_eq!(result.rows.len(), 1);
    assert_eq!((result.rows[0].validation_hr1, result.rows[0].validation_loss), (rec.validation_hr1, rec.validation_loss));
}

#[test]
fn selection_tie_breaks() {
    let row = |hr1: f64, loss: f64, d: usize, layers: usize| GridRow {
        settings: vec![],
        validation_hr1: hr1,
        validation_loss: loss,
        d,
        layers,
        best_epoch: 1,
    };
    assert_eq!(select_best(&[row(0.4, 1.0, 8, 1), row(0.5, 2.0, 8, 1)]), Some(1));
    assert_eq!(select_best(&[row(0.5, 1.5, 8, 1), row(0.5, 1.0, 32, 2)]), Some(1));
    assert_eq!(select_best(&[row(0.5, 1.0, 32, 1), row(0.5, 1.0, 16, 2)]), Some(1));
    assert_eq!(select_best(&[row(0.5, 1.0, 16, 1), row(0.5, 1.0, 16, 2)]), Some(0));
    assert_eq!(select_best(&[]), None);
}

#[test]
fn train_config_key_values() {
    let cfg = TrainConfig { batch_size: 32, learning_rate: 0.005, clip_norm: Some(1.0), ..TrainConfig::default() };
    let mut back = TrainConfig::default();
    back.apply(&cfg.to_key_values()).unwrap();
    assert_eq!(back, cfg);
    let mut kv = tgt_core::config::KeyValues::new();
    kv.set("batch_sise", 3);
    assert!(TrainConfig::default().apply(&kv).is_err());
}
