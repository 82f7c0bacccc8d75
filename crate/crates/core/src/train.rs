//! Mini-batch Adam training with early stopping on validation loss.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::config::KeyValues;
use crate::data::{Sample, SplitBundle, PAD_APP};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, predict_probs, Bound, ModelConfig, TgtParameters};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Progress lines on standard error.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            clip_norm: None,
            verbose: false,
        }
    }
}

pub const TRAIN_KEYS: &[&str] =
    &["batch_size", "learning_rate", "beta1", "beta2", "eps", "max_epochs", "patience", "seed", "clip_norm", "verbose"];

impl TrainConfig {
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(TRAIN_KEYS, "train config")?;
        self.batch_size = kv.parse_or("batch_size", self.batch_size)?;
        self.learning_rate = kv.parse_or("learning_rate", self.learning_rate)?;
        self.beta1 = kv.parse_or("beta1", self.beta1)?;
        self.beta2 = kv.parse_or("beta2", self.beta2)?;
        self.eps = kv.parse_or("eps", self.eps)?;
        self.max_epochs = kv.parse_or("max_epochs", self.max_epochs)?;
        self.patience = kv.parse_or("patience", self.patience)?;
        self.seed = kv.parse_or("seed", self.seed)?;
        match kv.get("clip_norm") {
            None => {}
            Some("none" | "off") => self.clip_norm = None,
            Some(_) => self.clip_norm = Some(kv.parse_or("clip_norm", 0.0)?),
        }
        self.verbose = kv.parse_or("verbose", self.verbose)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", self.learning_rate);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("max_epochs", self.max_epochs);
        kv.set("patience", self.patience);
        kv.set("seed", self.seed);
        kv.set("clip_norm", self.clip_norm.map_or("none".to_string(), |c| c.to_string()));
        kv
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self { m: params.iter().map(|t| vec![0.0; t.len()]).collect(), v: params.iter().map(|t| vec![0.0; t.len()]).collect() }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("Adam step counter starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Model("Adam: parameter, gradient and state counts differ".into()));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape != g.shape || state.m[i].len() != p.len() {
            return Err(Error::Model(format!("Adam: shape mismatch {:?} vs {:?}", p.shape, g.shape)));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p.data[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_hr1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub steps: u64,
    pub seed: u64,
    pub model_fingerprint: String,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Index of the largest probability among real apps, lowest index on ties.
pub fn top1(row: &[f64]) -> usize {
    let mut best = PAD_APP + 1;
    for a in PAD_APP + 2..row.len() {
        if row[a] > row[best] {
            best = a;
        }
    }
    best
}

/// Mean cross-entropy and HR@1 without dropout.
pub fn loss_and_hr1(params: &TgtParameters, config: &ModelConfig, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let probs = predict_probs(params, config, samples)?;
    let c = config.n_apps;
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (s, row) in samples.iter().zip(probs.data.chunks(c)) {
        loss -= row[s.label].max(f64::MIN_POSITIVE).ln();
        hits += usize::from(top1(row) == s.label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Loss and gradients (in parameter order) on one batch.
pub fn loss_and_grads(
    params: &TgtParameters,
    config: &ModelConfig,
    batch: &[&Sample],
    rng: &mut Rng,
    training: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, params, true)?;
    let out = forward(&mut tape, &b, config, batch, rng, training)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let loss = tape.cross_entropy(out.probs, &labels)?;
    tape.backward(loss)?;
    let grads = b.values().iter().map(|&v| tape.grad_tensor(v)).collect();
    Ok((tape.item(loss), grads))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|x| *x *= s);
    }
}

/// Train from a fresh initialisation on `train`, monitoring `validation`.
pub fn train_samples(
    train: &[Sample],
    validation: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TgtParameters, TrainReport)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let params = init_params(model, &mut root.derive_named("init"))?;
    train_from(params, train, validation, model, cfg)
}

/// Train starting from `params`.
pub fn train_from(
    mut params: TgtParameters,
    train: &[Sample],
    validation: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TgtParameters, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if validation.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    cfg.validate()?;
    model.validate()?;
    let start = Instant::now();
    let root = Rng::new(cfg.seed);
    let mut state = AdamState::new(params.tensors());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, TgtParameters)> = None;
    let mut epochs = Vec::new();
    let mut step = 0u64;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        root.derive_named("shuffle").derive(epoch as u64).shuffle(&mut order);
        let mut dropout_rng = root.derive_named("dropout").derive(epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = loss_and_grads(&params, model, &batch, &mut dropout_rng, true)?;
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            step += 1;
            adam_step(params.tensors_mut(), &grads, &mut state, cfg, step)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let (validation_loss, validation_hr1) = loss_and_hr1(&params, model, validation)?;
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(Error::Model(format!("non-finite loss at epoch {epoch}")));
        }
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:3}  train {train_loss:.5}  val {validation_loss:.5}  val HR@1 {validation_hr1:.4}  ({:.1}s)",
                start.elapsed().as_secs_f64()
            );
        }
        epochs.push(EpochRecord { epoch, train_loss, validation_loss, validation_hr1 });
        let improved = best.as_ref().is_none_or(|(l, _, _)| validation_loss < *l);
        if improved {
            best = Some((validation_loss, epoch, params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    let report = TrainReport {
        epochs,
        best_epoch,
        stop_reason,
        steps: step,
        seed: cfg.seed,
        model_fingerprint: model.fingerprint(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((best_params, report))
}

/// Train on a prepared bundle.
pub fn train(bundle: &SplitBundle, model: &ModelConfig, cfg: &TrainConfig) -> Result<(TgtParameters, TrainReport)> {
    if model.n_apps != bundle.n_apps() || model.n_users != bundle.n_users().max(1) || model.window != bundle.window {
        return Err(Error::Config(format!(
            "model config (C={}, N={}, M={}) does not match bundle (C={}, N={}, M={})",
            model.n_apps,
            model.n_users,
            model.window,
            bundle.n_apps(),
            bundle.n_users(),
            bundle.window
        )));
    }
    train_samples(&bundle.train, &bundle.validation, model, cfg)
}

/// One cell of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub settings: Vec<(String, String)>,
    pub validation_hr1: f64,
    pub validation_loss: f64,
    pub d: usize,
    pub layers: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the selected cell.
    pub best: usize,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut keys: Vec<&str> = self.rows.first().map(|r| r.settings.iter().map(|(k, _)| k.as_str()).collect()).unwrap_or_default();
        keys.extend(["validation_hr1", "validation_loss", "best_epoch", "selected"]);
        let mut out = keys.join(",") + "\n";
        for (i, r) in self.rows.iter().enumerate() {
            let mut cells: Vec<String> = r.settings.iter().map(|(_, v)| v.clone()).collect();
            cells.push(format!("{:.6}", r.validation_hr1));
            cells.push(format!("{:.6}", r.validation_loss));
            cells.push(r.best_epoch.to_string());
            cells.push(u8::from(i == self.best).to_string());
            out += &(cells.join(",") + "\n");
        }
        out
    }
}

/// Better-than under the selection rule: higher HR@1, then lower loss, then
/// smaller d, then fewer layers.
fn better(a: &GridRow, b: &GridRow) -> bool {
    use std::cmp::Ordering::*;
    match a.validation_hr1.total_cmp(&b.validation_hr1) {
        Greater => return true,
        Less => return false,
        Equal => {}
    }
    match a.validation_loss.total_cmp(&b.validation_loss) {
        Less => return true,
        Greater => return false,
        Equal => {}
    }
    (a.d, a.layers) < (b.d, b.layers)
}

/// Pick the best row under the selection rule.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.is_none_or(|b| better(r, &rows[b])) {
            best = Some(i);
        }
    }
    best
}

/// Cartesian product over `grid` (each axis a model or train key with its
/// candidate values). Every cell trains with the same seed.
pub fn grid_search(
    bundle: &SplitBundle,
    model: &ModelConfig,
    cfg: &TrainConfig,
    grid: &[(String, Vec<String>)],
) -> Result<GridResult> {
    if grid.is_empty() || grid.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Config("grid needs at least one axis with at least one value".into()));
    }
    let mut rows = Vec::new();
    let mut idx = vec![0usize; grid.len()];
    loop {
        let settings: Vec<(String, String)> = grid.iter().zip(&idx).map(|((k, vs), &i)| (k.clone(), vs[i].clone())).collect();
        let (mut mkv, mut tkv) = (KeyValues::new(), KeyValues::new());
        for (k, v) in &settings {
            if TRAIN_KEYS.contains(&k.as_str()) {
                tkv.set(k, v);
            } else {
                mkv.set(k, v);
            }
        }
        let (mut m, mut t) = (model.clone(), cfg.clone());
        m.apply(&mkv)?;
        t.apply(&tkv)?;
        let (_, report) = train(bundle, &m, &t)?;
        let rec = &report.epochs[report.best_epoch - 1];
        rows.push(GridRow {
            settings,
            validation_hr1: rec.validation_hr1,
            validation_loss: rec.validation_loss,
            d: m.d,
            layers: m.layers,
            best_epoch: report.best_epoch,
        });
        // Odometer increment, last axis fastest.
        let mut axis = grid.len();
        loop {
            if axis == 0 {
                let best = select_best(&rows).expect("nonempty");
                return Ok(GridResult { rows, best });
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < grid[axis].1.len() {
                break;
            }
            idx[axis] = 0;
        }
    }
}
