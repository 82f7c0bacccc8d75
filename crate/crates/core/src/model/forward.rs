use std::borrow::Borrow;

use super::{hour_of_day_encode, token_position_encode, FeatureEncoding, HourEncoding, ModelConfig, TgtParameters};
use crate::autodiff::{Tape, Tensor, Value};
use crate::data::{Sample, PAD_APP};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Parameters placed on a tape, as leaves (trainable) or constants.
pub struct Bound<'a> {
    params: &'a TgtParameters,
    values: Vec<Value>,
}

impl<'a> Bound<'a> {
    pub fn bind(tape: &mut Tape, params: &'a TgtParameters, trainable: bool) -> Result<Self> {
        let mut values = Vec::with_capacity(params.len());
        for t in params.tensors() {
            values.push(if trainable { tape.leaf(t.clone())? } else { tape.constant(t.clone())? });
        }
        Ok(Self { params, values })
    }

    /// Handles in parameter order.
    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Result<Value> {
        self.params
            .index_of(name)
            .map(|i| self.values[i])
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }
}

/// `[n·M, 2]` raw token features: `(app / C, normalised duration)`, with a
/// disabled column zeroed.
pub fn raw_features<S: Borrow<Sample>>(samples: &[S], config: &ModelConfig) -> Result<Tensor> {
    let m = config.window;
    let mut data = Vec::with_capacity(samples.len() * m * 2);
    for s in samples {
        let s = s.borrow();
        if s.apps.len() != m || s.durations.len() != m {
            return Err(Error::Model(format!("window width {} does not match M = {m}", s.apps.len())));
        }
        for (&a, &t) in s.apps.iter().zip(&s.durations) {
            if a >= config.n_apps {
                return Err(Error::Model(format!("app index {a} outside vocabulary of {}", config.n_apps)));
            }
            data.push(if config.use_app { a as f64 / config.n_apps as f64 } else { 0.0 });
            data.push(if config.use_duration { t } else { 0.0 });
        }
    }
    Ok(Tensor::new(vec![samples.len() * m, 2], data))
}

/// `[rows, 2] -> [rows, 2d]`: `[sin(W₁s + b₁) ∥ cos(W₂s + b₂)]`, or the
/// relu MLP in the ablation mode.
pub fn feature_encode(tape: &mut Tape, b: &Bound, config: &ModelConfig, raw: Value) -> Result<Value> {
    if tape.shape(raw).len() != 2 || tape.shape(raw)[1] != 2 {
        return Err(Error::Model(format!("feature input must be rows × 2, got {:?}", tape.shape(raw))));
    }
    Ok(match config.feature_encoding {
        FeatureEncoding::Fourier => {
            let z1 = tape.matmul_nt(raw, b.get("feat.w1")?)?;
            let z1 = tape.add(z1, b.get("feat.b1")?)?;
            let s = tape.sin(z1)?;
            let z2 = tape.matmul_nt(raw, b.get("feat.w2")?)?;
            let z2 = tape.add(z2, b.get("feat.b2")?)?;
            let c = tape.cos(z2)?;
            tape.concat_last(s, c)?
        }
        FeatureEncoding::Mlp => {
            let h = tape.matmul_nt(raw, b.get("feat.mlp_w1")?)?;
            let h = tape.add(h, b.get("feat.mlp_b1")?)?;
            let h = tape.relu(h)?;
            let o = tape.matmul_nt(h, b.get("feat.mlp_w2")?)?;
            tape.add(o, b.get("feat.mlp_b2")?)?
        }
    })
}

fn linear(tape: &mut Tape, x: Value, w: Value, bias: Option<Value>) -> Result<Value> {
    let y = tape.matmul_nt(x, w)?;
    Ok(match bias {
        Some(bv) => tape.add(y, bv)?,
        None => y,
    })
}

/// Post-norm encoder over `[batch·M, 2d]` tokens, then per-sample mean
/// pooling and the `2d → d` projection. Returns `[batch, d]`.
///
/// `pad_keys`, when given, marks padding tokens (row-major `batch·M`) to be
/// excluded as attention keys.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    tape: &mut Tape,
    b: &Bound,
    config: &ModelConfig,
    tokens: Value,
    batch: usize,
    pad_keys: Option<&[bool]>,
    rng: &mut Rng,
    training: bool,
) -> Result<Value> {
    let (m, dm, heads) = (config.window, config.d_model(), config.heads);
    let hd = dm / heads;
    let mask = match pad_keys {
        Some(pad) if config.layers > 0 => {
            let mut data = vec![0.0; batch * heads * m * m];
            for s in 0..batch {
                for h in 0..heads {
                    for q in 0..m {
                        for k in 0..m {
                            if pad[s * m + k] {
                                data[((s * heads + h) * m + q) * m + k] = -1e9;
                            }
                        }
                    }
                }
            }
            Some(tape.constant(Tensor::new(vec![batch * heads, m, m], data))?)
        }
        _ => None,
    };
    let mut x = tokens;
    for l in 0..config.layers {
        let p = |n: &str| b.get(&format!("enc{l}.{n}"));
        let q = linear(tape, x, p("wq")?, None)?;
        let k = linear(tape, x, p("wk")?, None)?;
        let v = linear(tape, x, p("wv")?, None)?;
        let q = tape.split_heads(q, batch, m, heads)?;
        let k = tape.split_heads(k, batch, m, heads)?;
        let v = tape.split_heads(v, batch, m, heads)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let mut scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        if let Some(mk) = mask {
            scores = tape.add(scores, mk)?;
        }
        let att = tape.softmax_rows(scores)?;
        let ctx = tape.batch_matmul(att, v, false)?;
        let ctx = tape.merge_heads(ctx, batch, heads)?;
        let a = linear(tape, ctx, p("wo")?, None)?;
        let a = tape.dropout(a, config.dropout, rng, training)?;
        let r = tape.add(x, a)?;
        x = tape.layer_norm(r, p("ln1_g")?, p("ln1_b")?, config.ln_eps)?;

        let f = linear(tape, x, p("ff1_w")?, Some(p("ff1_b")?))?;
        let f = tape.relu(f)?;
        let f = linear(tape, f, p("ff2_w")?, Some(p("ff2_b")?))?;
        let f = tape.dropout(f, config.dropout, rng, training)?;
        let r = tape.add(x, f)?;
        x = tape.layer_norm(r, p("ln2_g")?, p("ln2_b")?, config.ln_eps)?;
    }
    let pooled = tape.mean_row_groups(x, m)?;
    linear(tape, pooled, b.get("pool.w")?, None)
}

/// `relu(pooled ∥ Û)` followed by dropout, `[batch, d] -> [batch, 2d]`.
pub fn fuse_user(
    tape: &mut Tape,
    b: &Bound,
    config: &ModelConfig,
    pooled: Value,
    users: &[usize],
    rng: &mut Rng,
    training: bool,
) -> Result<Value> {
    let u = if config.uses_fallback_user() {
        let zeros = tape.constant(Tensor::zeros(&[users.len(), config.d]))?;
        tape.add(zeros, b.get("user.fallback")?)?
    } else {
        if let Some(&bad) = users.iter().find(|&&u| u >= config.n_users) {
            return Err(Error::Model(format!("user index {bad} unknown (N = {})", config.n_users)));
        }
        tape.gather_rows(b.get("user.table")?, users)?
    };
    let x = tape.concat_last(pooled, u)?;
    let x = tape.relu(x)?;
    Ok(tape.dropout(x, config.dropout, rng, training)?)
}

/// Hour encodings for a batch: `[batch, d]` sinusoidal or `[batch, 24]`
/// one-hot rows.
fn hour_inputs(config: &ModelConfig, hours: &[u8]) -> Result<Tensor> {
    let width = match config.hour_encoding {
        HourEncoding::Sinusoidal => config.d,
        HourEncoding::OneHot => 24,
    };
    let mut data = Vec::with_capacity(hours.len() * width);
    for &h in hours {
        match config.hour_encoding {
            HourEncoding::Sinusoidal => data.extend(hour_of_day_encode(h, config.d)?),
            HourEncoding::OneHot => {
                if h > 23 {
                    return Err(Error::Model(format!("hour {h} outside 0..=23")));
                }
                let mut row = vec![0.0; 24];
                row[h as usize] = 1.0;
                data.extend(row);
            }
        }
    }
    Ok(Tensor::new(vec![hours.len(), width], data))
}

/// `g = σ(W_h P_h)`, `X_o = X_app ⊙ g`. With gating off, `X_o = X_app` and
/// no gate is returned.
pub fn temporal_gate(
    tape: &mut Tape,
    b: &Bound,
    config: &ModelConfig,
    x_app: Value,
    hours: &[u8],
) -> Result<(Value, Option<Value>)> {
    if !config.use_gating {
        return Ok((x_app, None));
    }
    let p = tape.constant(hour_inputs(config, hours)?)?;
    let p = match config.hour_encoding {
        HourEncoding::Sinusoidal => p,
        HourEncoding::OneHot => tape.matmul_nt(p, b.get("gate.onehot")?)?,
    };
    let z = tape.matmul_nt(p, b.get("gate.w")?)?;
    let g = tape.sigmoid(z)?;
    let x_o = tape.mul(x_app, g)?;
    Ok((x_o, Some(g)))
}

/// `W_o X_o + b_o`, `[batch, 2d] -> [batch, C]`.
pub fn classify(tape: &mut Tape, b: &Bound, x_o: Value) -> Result<Value> {
    linear(tape, x_o, b.get("out.w")?, Some(b.get("out.b")?))
}

pub struct ForwardOutput {
    pub probs: Value,
    pub logits: Value,
    pub pooled: Value,
    pub gated: Value,
    pub gate: Option<Value>,
}

/// Per-sample intermediate values read back from a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub gates: Option<Vec<Vec<f64>>>,
    pub pooled: Vec<Vec<f64>>,
    pub gated: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

fn rows(tape: &Tape, v: Value) -> Vec<Vec<f64>> {
    let w = *tape.shape(v).last().unwrap_or(&1);
    tape.data(v).chunks(w.max(1)).map(<[f64]>::to_vec).collect()
}

impl ForwardOutput {
    pub fn trace(&self, tape: &Tape) -> ForwardTrace {
        ForwardTrace {
            gates: self.gate.map(|g| rows(tape, g)),
            pooled: rows(tape, self.pooled),
            gated: rows(tape, self.gated),
            logits: rows(tape, self.logits),
        }
    }
}

/// Full composition on a batch. Probabilities are `[n, C]`.
pub fn forward<S: Borrow<Sample>>(
    tape: &mut Tape,
    b: &Bound,
    config: &ModelConfig,
    samples: &[S],
    rng: &mut Rng,
    training: bool,
) -> Result<ForwardOutput> {
    if samples.is_empty() {
        return Err(Error::Model("forward needs a nonempty batch".into()));
    }
    let n = samples.len();
    let raw = tape.constant(raw_features(samples, config)?)?;
    let mut tokens = feature_encode(tape, b, config, raw)?;
    if config.token_positions {
        let pos = token_position_encode(config.window, config.d_model())?;
        let tiled: Vec<f64> = pos.iter().copied().cycle().take(pos.len() * n).collect();
        let pos = tape.constant(Tensor::new(vec![n * config.window, config.d_model()], tiled))?;
        tokens = tape.add(tokens, pos)?;
    }
    let pad: Option<Vec<bool>> =
        config.mask_padding.then(|| samples.iter().flat_map(|s| s.borrow().apps.iter().map(|&a| a == PAD_APP)).collect());
    let pooled = encoder_forward(tape, b, config, tokens, n, pad.as_deref(), rng, training)?;
    let users: Vec<usize> = samples.iter().map(|s| s.borrow().user).collect();
    let x_app = fuse_user(tape, b, config, pooled, &users, rng, training)?;
    let hours: Vec<u8> = samples.iter().map(|s| s.borrow().hour).collect();
    let (gated, gate) = temporal_gate(tape, b, config, x_app, &hours)?;
    let logits = classify(tape, b, gated)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(ForwardOutput { probs, logits, pooled, gated, gate })
}

/// Inference-mode probabilities `[n, C]`, computed in chunks.
pub fn predict_probs<S: Borrow<Sample>>(params: &TgtParameters, config: &ModelConfig, samples: &[S]) -> Result<Tensor> {
    const CHUNK: usize = 1024;
    let mut data = Vec::with_capacity(samples.len() * config.n_apps);
    let mut rng = Rng::new(0);
    for chunk in samples.chunks(CHUNK) {
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, params, false)?;
        let out = forward(&mut tape, &b, config, chunk, &mut rng, false)?;
        data.extend_from_slice(tape.data(out.probs));
    }
    Ok(Tensor::new(vec![samples.len(), config.n_apps], data))
}
