use tgt_core::autodiff::Tape;
use tgt_core::config::KeyValues;
use tgt_core::data::{Sample, PAD_APP};
use tgt_core::model::*;
use tgt_core::rng::Rng;
use tgt_core::train::{loss_and_grads, loss_and_hr1};

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::new(5, 3);
    c.d = 8;
    c.window = 3;
    c.layers = 1;
    c.heads = 2;
    c.dropout = 0.0;
    c
}

fn random_samples(rng: &mut Rng, config: &ModelConfig, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let pad = rng.below(config.window);
            let apps: Vec<usize> = (0..config.window).map(|i| if i < pad { PAD_APP } else { 1 + rng.below(config.n_apps - 1) }).collect();
            let durations = apps.iter().map(|&a| if a == PAD_APP { 0.0 } else { rng.uniform_range(-2.0, 2.0) }).collect();
            Sample {
                apps,
                durations,
                user: rng.below(config.n_users),
                hour: rng.below(24) as u8,
                label: 1 + rng.below(config.n_apps - 1),
                timestamp: 0,
            }
        })
        .collect()
}

fn loss(params: &TgtParameters, config: &ModelConfig, samples: &[Sample]) -> f64 {
    loss_and_hr1(params, config, samples).unwrap().0
}

/// Worst relative error between tape gradients and central differences of
/// the batch loss over every parameter coordinate. Parameters are jittered
/// off their initial values so that zero biases do not sit ReLU inputs on
/// the kink. The denominator is floored at 1e-6: below that, central
/// differences of an O(1) loss at ε = 1e-5 are dominated by roundoff
/// (about 1e-11 absolute).
fn full_model_grad_error(config: &ModelConfig, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut params = init_params(config, &mut rng).unwrap();
    for t in params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.uniform_range(-0.1, 0.1));
    }
    let samples = random_samples(&mut rng, config, 4);
    let refs: Vec<&Sample> = samples.iter().collect();
    let (_, grads) = loss_and_grads(&params, config, &refs, &mut Rng::new(0), false).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        for i in 0..params.tensors()[p].data.len() {
            let orig = params.tensors()[p].data[i];
            params.tensors_mut()[p].data[i] = orig + eps;
            let up = loss(&params, config, &samples);
            params.tensors_mut()[p].data[i] = orig - eps;
            let down = loss(&params, config, &samples);
            params.tensors_mut()[p].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[p].data[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let config = tiny_config();
    for seed in 0..10 {
        let err = full_model_grad_error(&config, seed);
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn ablation_gradients_match_finite_differences() {
    let mut variants = Vec::new();
    let mut c = tiny_config();
    c.feature_encoding = FeatureEncoding::Mlp;
    variants.push(c);
    let mut c = tiny_config();
    c.hour_encoding = HourEncoding::OneHot;
    c.mask_padding = true;
    variants.push(c);
    let mut c = tiny_config();
    c.use_gating = false;
    c.user_agnostic = true;
    variants.push(c);
    for (i, c) in variants.iter().enumerate() {
        let err = full_model_grad_error(c, 100 + i as u64);
        assert!(err <= 1e-4, "variant {i}: {err:e}");
    }
}

#[test]
fn hour_encoding_identities() {
    for dim in [4usize, 8, 128] {
        for h in 0..24u64 {
            let v = hour_encode(h, dim).unwrap();
            let norm: f64 = v.iter().map(|x| x * x).sum();
            assert!((norm - dim as f64 / 2.0).abs() <= 1e-9);
            let shifted = hour_encode(h + dim as u64, dim).unwrap();
            assert!(v.iter().zip(&shifted).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
    assert_eq!(hour_encode(0, 4).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    assert_eq!(hour_encode(1, 4).unwrap(), vec![-1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn token_positions_are_distinct() {
    let dim = 16;
    let m = 16;
    let rows = token_position_encode(m, dim).unwrap();
    for i in 0..m {
        for j in i + 1..m {
            let (a, b) = (&rows[i * dim..(i + 1) * dim], &rows[j * dim..(j + 1) * dim]);
            assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9), "rows {i} and {j}");
        }
    }
    assert_eq!(token_position_encode(1, 8).unwrap(), hour_encode(0, 8).unwrap());
}

#[test]
fn probabilities_are_normalised_and_initial_loss_near_uniform() {
    let mut c = ModelConfig::new(21, 4);
    c.d = 16;
    c.dropout = 0.0;
    let mut rng = Rng::new(1);
    let params = init_params(&c, &mut rng).unwrap();
    let samples = random_samples(&mut rng, &c, 200);
    let probs = predict_probs(&params, &c, &samples).unwrap();
    for row in probs.data.chunks(c.n_apps) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
    let l = loss(&params, &c, &samples);
    assert!((l - (c.n_apps as f64).ln()).abs() < 0.5, "{l}");
}

#[test]
fn gating_off_ignores_hour() {
    let mut c = tiny_config();
    c.use_gating = false;
    let mut rng = Rng::new(2);
    let params = init_params(&c, &mut rng).unwrap();
    let samples = random_samples(&mut rng, &c, 6);
    let mut shifted = samples.clone();
    shifted.iter_mut().for_each(|s| s.hour = (s.hour + 7) % 24);
    assert_eq!(predict_probs(&params, &c, &samples).unwrap(), predict_probs(&params, &c, &shifted).unwrap());
    c.use_gating = true;
    let params = init_params(&c, &mut Rng::new(2)).unwrap();
    assert_ne!(predict_probs(&params, &c, &samples).unwrap(), predict_probs(&params, &c, &shifted).unwrap());
}

#[test]
fn user_agnostic_ignores_user() {
    let mut c = tiny_config();
    c.user_agnostic = true;
    let mut rng = Rng::new(3);
    let params = init_params(&c, &mut rng).unwrap();
    let samples = random_samples(&mut rng, &c, 6);
    let mut moved = samples.clone();
    moved.iter_mut().for_each(|s| s.user = (s.user + 1) % c.n_users);
    assert_eq!(predict_probs(&params, &c, &samples).unwrap(), predict_probs(&params, &c, &moved).unwrap());
    // An unknown user is fine without identity, an error with it.
    moved.iter_mut().for_each(|s| s.user = 99);
    assert!(predict_probs(&params, &c, &moved).is_ok());
    c.user_agnostic = false;
    assert!(predict_probs(&params, &c, &moved).is_err());
}

#[test]
fn disabled_feature_columns_are_ignored() {
    let mut c = tiny_config();
    c.use_duration = false;
    let mut rng = Rng::new(4);
    let params = init_params(&c, &mut rng).unwrap();
    let samples = random_samples(&mut rng, &c, 5);
    let mut other = samples.clone();
    other.iter_mut().for_each(|s| s.durations.iter_mut().for_each(|d| *d += 1.5));
    assert_eq!(predict_probs(&params, &c, &samples).unwrap(), predict_probs(&params, &c, &other).unwrap());
    let mut c = tiny_config();
    c.use_app = false;
    let params = init_params(&c, &mut rng).unwrap();
    let mut other = samples.clone();
    other.iter_mut().for_each(|s| s.apps.iter_mut().for_each(|a| *a = (*a % 4) + 1));
    assert_eq!(predict_probs(&params, &c, &samples).unwrap(), predict_probs(&params, &c, &other).unwrap());
}

#[test]
fn without_positions_window_order_is_irrelevant() {
    let mut c = tiny_config();
    c.token_positions = false;
    let mut rng = Rng::new(5);
    let params = init_params(&c, &mut rng).unwrap();
    let samples = random_samples(&mut rng, &c, 5);
    let mut reversed = samples.clone();
    for s in &mut reversed {
        s.apps.reverse();
        s.durations.reverse();
    }
    let a = predict_probs(&params, &c, &samples).unwrap();
    let b = predict_probs(&params, &c, &reversed).unwrap();
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-12));
    c.token_positions = true;
    let a = predict_probs(&params, &c, &samples).unwrap();
    let b = predict_probs(&params, &c, &reversed).unwrap();
    assert!(a.data.iter().zip(&b.data).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn zero_gate_weights_give_half() {
    let c = tiny_config();
    let mut rng = Rng::new(6);
    let mut params = init_params(&c, &mut rng).unwrap();
    params.get_mut("gate.w").unwrap().data.iter_mut().for_each(|w| *w = 0.0);
    let samples = random_samples(&mut rng, &c, 3);
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &params, false).unwrap();
    let out = forward(&mut tape, &b, &c, &samples, &mut rng, false).unwrap();
    let trace = out.trace(&tape);
    assert!(trace.gates.unwrap().iter().flatten().all(|&g| g == 0.5));
}

#[test]
fn gate_is_injective_over_hours() {
    let mut c = tiny_config();
    c.d = 48;
    c.heads = 4;
    let mut rng = Rng::new(7);
    let params = init_params(&c, &mut rng).unwrap();
    let mut samples = random_samples(&mut rng, &c, 24);
    for (h, s) in samples.iter_mut().enumerate() {
        s.hour = h as u8;
    }
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &params, false).unwrap();
    let gates = forward(&mut tape, &b, &c, &samples, &mut rng, false).unwrap().trace(&tape).gates.unwrap();
    for i in 0..24 {
        assert!(gates[i].iter().all(|&g| g > 0.0 && g < 1.0));
        for j in i + 1..24 {
            assert_ne!(gates[i], gates[j], "hours {i} and {j}");
        }
    }
}

#[test]
fn dropout_only_in_training() {
    let mut c = tiny_config();
    c.dropout = 0.5;
    let mut rng = Rng::new(8);
    let params = init_params(&c, &mut rng).unwrap();
    let samples = random_samples(&mut rng, &c, 4);
    let refs: Vec<&Sample> = samples.iter().collect();
    let (a, _) = loss_and_grads(&params, &c, &refs, &mut Rng::new(1), false).unwrap();
    let (b, _) = loss_and_grads(&params, &c, &refs, &mut Rng::new(2), false).unwrap();
    assert_eq!(a, b);
    let (x, _) = loss_and_grads(&params, &c, &refs, &mut Rng::new(1), true).unwrap();
    let (y, _) = loss_and_grads(&params, &c, &refs, &mut Rng::new(2), true).unwrap();
    assert_ne!(x, y);
}

#[test]
fn wrong_window_is_rejected() {
    let c = tiny_config();
    let mut rng = Rng::new(9);
    let params = init_params(&c, &mut rng).unwrap();
    let mut samples = random_samples(&mut rng, &c, 2);
    samples[1].apps.push(1);
    samples[1].durations.push(0.0);
    assert!(predict_probs(&params, &c, &samples).is_err());
    let mut bad = random_samples(&mut rng, &c, 1);
    bad[0].hour = 24;
    assert!(predict_probs(&params, &c, &bad).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut c = tiny_config();
    c.hour_encoding = HourEncoding::OneHot;
    c.ln_eps = 1.0 / 3.0 * 1e-5;
    let params = init_params(&c, &mut Rng::new(10)).unwrap();
    let mut meta = KeyValues::new();
    meta.set("seed", 10);
    let bytes = encode_checkpoint(&c, &params, &meta);
    let (c2, p2, m2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(c2, c);
    assert_eq!(m2.get("seed"), Some("10"));
    for (a, b) in params.tensors().iter().zip(p2.tensors()) {
        assert_eq!(a.shape, b.shape);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(encode_checkpoint(&c2, &p2, &m2), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &c, &params, &meta).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap().1, params);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = tiny_config();
    let params = init_params(&c, &mut Rng::new(11)).unwrap();
    let bytes = encode_checkpoint(&c, &params, &KeyValues::new());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_checkpoint(&magic).is_err());
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(decode_checkpoint(&nan).is_err());
}

#[test]
fn config_files_round_trip_and_reject_unknown_keys() {
    let mut c = tiny_config();
    c.feature_encoding = FeatureEncoding::Mlp;
    let kv = c.to_key_values();
    let mut back = ModelConfig::new(2, 1);
    back.apply(&kv).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.fingerprint(), c.fingerprint());
    let bad = KeyValues::parse("dd = 3\n", std::path::Path::new("m.txt")).unwrap();
    assert!(ModelConfig::new(2, 1).apply(&bad).is_err());
    let odd = KeyValues::parse("d = 7\n", std::path::Path::new("m.txt")).unwrap();
    assert!(ModelConfig::new(2, 1).apply(&odd).is_err());
}

#[test]
fn parameter_layout_matches_shapes() {
    let c = tiny_config();
    let params = init_params(&c, &mut Rng::new(12)).unwrap();
    let shapes = parameter_shapes(&c);
    assert_eq!(params.len(), shapes.len());
    for ((name, t), (want, shape)) in params.iter().zip(&shapes) {
        assert_eq!(name, want);
        assert_eq!(&t.shape, shape);
    }
    assert_eq!(params.get("out.w").unwrap().shape, vec![5, 16]);
}
