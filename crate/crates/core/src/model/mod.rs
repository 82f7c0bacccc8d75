//! The temporal-gating transformer.
//!
//! Pipeline per sample: Fourier feature encoding of each `(app, duration)`
//! token, plus a sinusoidal token-order encoding, then a post-norm
//! transformer encoder, mean pooling and a `2d → d` projection, then
//! concatenation with the user vector (relu), then an hour-conditioned
//! sigmoid gate, then a linear classifier with softmax.
//!
//! All weights live in [`TgtParameters`], addressed by name. Linear weights
//! are stored `out × in`.

mod checkpoint;
mod encode;
mod forward;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encode::{hour_encode, hour_of_day_encode, token_position_encode};
pub use forward::{
    classify, encoder_forward, feature_encode, forward, fuse_user, predict_probs, raw_features, temporal_gate, Bound,
    ForwardOutput, ForwardTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeatureEncoding {
    Fourier,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HourEncoding {
    Sinusoidal,
    OneHot,
}

impl FromStr for FeatureEncoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fourier" => Ok(Self::Fourier),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Config(format!("feature_encoding must be fourier or mlp, got {s:?}"))),
        }
    }
}

impl fmt::Display for FeatureEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fourier => "fourier",
            Self::Mlp => "mlp",
        })
    }
}

impl FromStr for HourEncoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(Self::Sinusoidal),
            "onehot" => Ok(Self::OneHot),
            _ => Err(Error::Config(format!("hour_encoding must be sinusoidal or onehot, got {s:?}"))),
        }
    }
}

impl fmt::Display for HourEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sinusoidal => "sinusoidal",
            Self::OneHot => "onehot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Hidden size; tokens inside the encoder are `2d` wide.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Window length M.
    pub window: usize,
    /// App count C, padding included.
    pub n_apps: usize,
    /// User count N.
    pub n_users: usize,
    pub use_app: bool,
    pub use_duration: bool,
    pub use_user: bool,
    pub use_gating: bool,
    pub feature_encoding: FeatureEncoding,
    pub hour_encoding: HourEncoding,
    /// Replace every user with the shared fallback vector.
    pub user_agnostic: bool,
    pub token_positions: bool,
    /// Exclude padding keys from attention.
    pub mask_padding: bool,
    pub ln_eps: f64,
    /// Half-width of the uniform init of the Fourier input weights, in
    /// radians per unit input. Zero selects the plain fan-in rule.
    pub fourier_init: f64,
}

const MODEL_KEYS: &[&str] = &[
    "d",
    "layers",
    "heads",
    "dropout",
    "window",
    "n_apps",
    "n_users",
    "use_app",
    "use_duration",
    "use_user",
    "use_gating",
    "feature_encoding",
    "hour_encoding",
    "user_agnostic",
    "token_positions",
    "mask_padding",
    "ln_eps",
    "fourier_init",
];

impl ModelConfig {
    pub fn new(n_apps: usize, n_users: usize) -> Self {
        Self {
            d: 128,
            layers: 2,
            heads: 4,
            dropout: 0.2,
            window: crate::data::DEFAULT_WINDOW,
            n_apps,
            n_users,
            use_app: true,
            use_duration: true,
            use_user: true,
            use_gating: true,
            feature_encoding: FeatureEncoding::Fourier,
            hour_encoding: HourEncoding::Sinusoidal,
            user_agnostic: false,
            token_positions: true,
            mask_padding: false,
            ln_eps: 1e-5,
            fourier_init: 0.0,
        }
    }

    pub fn d_model(&self) -> usize {
        2 * self.d
    }

    /// User vector comes from the shared fallback rather than the table.
    pub fn uses_fallback_user(&self) -> bool {
        self.user_agnostic || !self.use_user
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d % 2 != 0 {
            return bad(format!("d must be even and positive, got {}", self.d));
        }
        if self.heads == 0 || self.d_model() % self.heads != 0 {
            return bad(format!("2d = {} must be divisible by heads = {}", self.d_model(), self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.window == 0 || self.n_apps < 2 || self.n_users == 0 {
            return bad("window, n_users must be positive and n_apps ≥ 2".into());
        }
        if !(self.ln_eps > 0.0) || !(self.fourier_init >= 0.0) {
            return bad("ln_eps must be positive and fourier_init non-negative".into());
        }
        Ok(())
    }

    /// Overlay keys from `kv` on `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(MODEL_KEYS, "model config")?;
        self.d = kv.parse_or("d", self.d)?;
        self.layers = kv.parse_or("layers", self.layers)?;
        self.heads = kv.parse_or("heads", self.heads)?;
        self.dropout = kv.parse_or("dropout", self.dropout)?;
        self.window = kv.parse_or("window", self.window)?;
        self.n_apps = kv.parse_or("n_apps", self.n_apps)?;
        self.n_users = kv.parse_or("n_users", self.n_users)?;
        self.use_app = kv.parse_or("use_app", self.use_app)?;
        self.use_duration = kv.parse_or("use_duration", self.use_duration)?;
        self.use_user = kv.parse_or("use_user", self.use_user)?;
        self.use_gating = kv.parse_or("use_gating", self.use_gating)?;
        self.feature_encoding = kv.parse_or("feature_encoding", self.feature_encoding)?;
        self.hour_encoding = kv.parse_or("hour_encoding", self.hour_encoding)?;
        self.user_agnostic = kv.parse_or("user_agnostic", self.user_agnostic)?;
        self.token_positions = kv.parse_or("token_positions", self.token_positions)?;
        self.mask_padding = kv.parse_or("mask_padding", self.mask_padding)?;
        self.ln_eps = kv.parse_or("ln_eps", self.ln_eps)?;
        self.fourier_init = kv.parse_or("fourier_init", self.fourier_init)?;
        self.validate()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("d", self.d);
        kv.set("layers", self.layers);
        kv.set("heads", self.heads);
        kv.set("dropout", self.dropout);
        kv.set("window", self.window);
        kv.set("n_apps", self.n_apps);
        kv.set("n_users", self.n_users);
        kv.set("use_app", self.use_app);
        kv.set("use_duration", self.use_duration);
        kv.set("use_user", self.use_user);
        kv.set("use_gating", self.use_gating);
        kv.set("feature_encoding", self.feature_encoding);
        kv.set("hour_encoding", self.hour_encoding);
        kv.set("user_agnostic", self.user_agnostic);
        kv.set("token_positions", self.token_positions);
        kv.set("mask_padding", self.mask_padding);
        kv.set("ln_eps", format!("{:e}", self.ln_eps));
        kv.set("fourier_init", self.fourier_init);
        kv
    }

    pub fn fingerprint(&self) -> String {
        crate::config::fingerprint(&self.to_key_values().render())
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±√(1/fan_in)`, fan-in = last extent.
    FanIn,
    /// Uniform in `±w`.
    Uniform(f64),
    Zeros,
    Ones,
}

/// Every learnable tensor, in a fixed order, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TgtParameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl TgtParameters {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        Self { names, tensors }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Names, shapes and init rules for `config`.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, dm, c) = (config.d, config.d_model(), config.n_apps);
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| v.push((name.to_string(), shape, init));
    match config.feature_encoding {
        FeatureEncoding::Fourier => {
            let w = if config.fourier_init > 0.0 { Init::Uniform(config.fourier_init) } else { Init::FanIn };
            push("feat.w1", vec![d, 2], w);
            push("feat.b1", vec![d], Init::Zeros);
            push("feat.w2", vec![d, 2], w);
            push("feat.b2", vec![d], Init::Zeros);
        }
        FeatureEncoding::Mlp => {
            push("feat.mlp_w1", vec![dm, 2], Init::FanIn);
            push("feat.mlp_b1", vec![dm], Init::Zeros);
            push("feat.mlp_w2", vec![dm, dm], Init::FanIn);
            push("feat.mlp_b2", vec![dm], Init::Zeros);
        }
    }
    for l in 0..config.layers {
        for m in ["wq", "wk", "wv", "wo"] {
            push(&format!("enc{l}.{m}"), vec![dm, dm], Init::FanIn);
        }
        push(&format!("enc{l}.ln1_g"), vec![dm], Init::Ones);
        push(&format!("enc{l}.ln1_b"), vec![dm], Init::Zeros);
        push(&format!("enc{l}.ff1_w"), vec![4 * dm, dm], Init::FanIn);
        push(&format!("enc{l}.ff1_b"), vec![4 * dm], Init::Zeros);
        push(&format!("enc{l}.ff2_w"), vec![dm, 4 * dm], Init::FanIn);
        push(&format!("enc{l}.ff2_b"), vec![dm], Init::Zeros);
        push(&format!("enc{l}.ln2_g"), vec![dm], Init::Ones);
        push(&format!("enc{l}.ln2_b"), vec![dm], Init::Zeros);
    }
    push("pool.w", vec![d, dm], Init::FanIn);
    push("user.table", vec![config.n_users, d], Init::Uniform(0.05));
    push("user.fallback", vec![d], Init::Uniform(0.05));
    if config.hour_encoding == HourEncoding::OneHot {
        push("gate.onehot", vec![d, 24], Init::FanIn);
    }
    push("gate.w", vec![dm, d], Init::FanIn);
    push("out.w", vec![c, dm], Init::FanIn);
    push("out.b", vec![c], Init::Zeros);
    v
}

/// Expected `(name, shape)` list for `config`.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<TgtParameters> {
    config.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, init) in layout(config) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn => {
                let w = (1.0 / *shape.last().unwrap() as f64).sqrt();
                (0..n).map(|_| rng.uniform_range(-w, w)).collect()
            }
            Init::Uniform(w) => (0..n).map(|_| rng.uniform_range(-w, w)).collect(),
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data));
    }
    Ok(TgtParameters { names, tensors })
}
