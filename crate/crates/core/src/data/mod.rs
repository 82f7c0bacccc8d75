//! Usage-log ingestion and sample construction.
//!
//! The pipeline runs `load_events → filter_inactive → derive_durations →
//! segment_sessions → windowize → split_* → normalize_durations`; [`prepare`]
//! chains the steps with a [`PrepareConfig`].

mod bundle;
mod load;
mod preprocess;
mod session;
mod split;

use serde::{Deserialize, Serialize};

pub use bundle::{read_bundle, summary, write_bundle, BUNDLE_FORMAT, BUNDLE_VERSION};
pub use load::{load_events, parse_timestamp, read_events, write_events_csv, FormatSpec, TimeFormat};
pub use preprocess::{derive_durations, filter_inactive, FilterThresholds};
pub use session::{hour_of_day, segment_sessions, windowize, PAD_APP};
pub use split::{normalize_durations, split_cold_start, split_standard, split_time_based, DurationNorm};

use crate::error::Result;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DEFAULT_IDLE_GAP: i64 = 300;
pub const DEFAULT_WINDOW: usize = 5;

/// One raw log row, timestamps in UTC epoch seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub user_id: String,
    pub timestamp: i64,
    pub app_id: String,
    pub duration: Option<f64>,
}

/// A maximal run of one user's events without an idle gap above Δt.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub user: usize,
    /// `(app index, duration seconds)` in time order.
    pub events: Vec<(usize, f64)>,
    pub timestamps: Vec<i64>,
    pub end_hour: u8,
}

/// A window of `M` `(app, duration)` pairs with its context and next-app label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub apps: Vec<usize>,
    pub durations: Vec<f64>,
    pub user: usize,
    /// Hour of day (UTC) of the last event in the window.
    pub hour: u8,
    pub label: usize,
    /// Timestamp of the label event.
    pub timestamp: i64,
}

/// Dense app and user indices. App index 0 is the padding token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub apps: Vec<String>,
    pub users: Vec<String>,
}

impl Vocab {
    pub const PAD_NAME: &'static str = "<pad>";

    /// Build from the distinct ids in `events`, sorted lexicographically.
    pub fn from_events(events: &[UsageEvent]) -> Self {
        let mut apps: Vec<String> = events.iter().map(|e| e.app_id.clone()).collect();
        apps.sort();
        apps.dedup();
        apps.insert(0, Self::PAD_NAME.to_string());
        let mut users: Vec<String> = events.iter().map(|e| e.user_id.clone()).collect();
        users.sort();
        users.dedup();
        Self { apps, users }
    }

    /// Number of app classes including padding.
    pub fn n_apps(&self) -> usize {
        self.apps.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn app_index(&self, id: &str) -> Option<usize> {
        self.apps[1..].binary_search_by(|a| a.as_str().cmp(id)).ok().map(|i| i + 1)
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitProtocol {
    Standard,
    ColdStart { train_user_fraction: f64 },
    TimeBased,
}

impl SplitProtocol {
    pub fn tag(&self) -> &'static str {
        match self {
            SplitProtocol::Standard => "standard",
            SplitProtocol::ColdStart { .. } => "cold",
            SplitProtocol::TimeBased => "time",
        }
    }

    pub fn is_cold_start(&self) -> bool {
        matches!(self, SplitProtocol::ColdStart { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub protocol: SplitProtocol,
    pub window: usize,
    pub idle_gap: i64,
    pub vocab: Vocab,
    pub norm: Option<DurationNorm>,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Free-form provenance notes (duration semantics, windowing rules, seed).
    pub metadata: Vec<(String, String)>,
}

impl SplitBundle {
    pub fn n_apps(&self) -> usize {
        self.vocab.n_apps()
    }

    pub fn n_users(&self) -> usize {
        self.vocab.n_users()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.metadata.push((key.to_string(), value.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareConfig {
    pub idle_gap: i64,
    pub window: usize,
    pub protocol: SplitProtocol,
    pub thresholds: FilterThresholds,
    /// Fill missing durations from inter-event gaps.
    pub derive_durations: bool,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            idle_gap: DEFAULT_IDLE_GAP,
            window: DEFAULT_WINDOW,
            protocol: SplitProtocol::Standard,
            thresholds: FilterThresholds::default(),
            derive_durations: true,
            seed: 0,
        }
    }
}

/// Run the whole preprocessing chain on already-loaded events.
pub fn prepare(events: Vec<UsageEvent>, cfg: &PrepareConfig) -> Result<SplitBundle> {
    let had_durations = events.iter().all(|e| e.duration.is_some());
    let events = filter_inactive(events, &cfg.thresholds);
    let events = if cfg.derive_durations { derive_durations(events, cfg.idle_gap) } else { events };
    let vocab = Vocab::from_events(&events);
    let sessions = segment_sessions(&events, &vocab, cfg.idle_gap)?;
    let samples = windowize(&sessions, cfg.window);
    let mut bundle = match cfg.protocol {
        SplitProtocol::Standard => split_standard(samples, vocab, cfg.window)?,
        SplitProtocol::ColdStart { train_user_fraction } => {
            split_cold_start(samples, vocab, cfg.window, train_user_fraction, cfg.seed)?
        }
        SplitProtocol::TimeBased => split_time_based(samples, vocab, cfg.window)?,
    };
    bundle.idle_gap = cfg.idle_gap;
    let durations = if had_durations {
        "explicit"
    } else if cfg.derive_durations {
        "derived: min(gap to next event, idle gap); last event per user = median"
    } else {
        "missing: zero"
    };
    bundle.set_meta("durations", durations);
    bundle.set_meta("windowing", "stride 1; sessions shorter than M+1 left-padded with app 0, duration 0; single-event sessions skipped");
    bundle.set_meta("sample_hour", "hour of day (UTC) of the last window event");
    bundle.set_meta("seed", cfg.seed);
    bundle.set_meta("filter", format!("users >= {} events, apps >= {} occurrences", cfg.thresholds.min_user_events, cfg.thresholds.min_app_events));
    normalize_durations(&mut bundle)?;
    Ok(bundle)
}
