//! Most-frequently-used and most-recently-used reference predictors.
//!
//! Usage counts come from the labels of training samples, so each training
//! event after a session's first is counted once.

use std::str::FromStr;

use crate::data::{Sample, SplitBundle, PAD_APP};
use crate::error::{Error, Result};
use crate::eval::{score_rankings, MetricsReport};

/// Apps with positive count by descending count, ties by ascending index.
pub fn mfu_rank(counts: &[u64], k: usize) -> Vec<usize> {
    let mut apps: Vec<usize> = (0..counts.len()).filter(|&a| a != PAD_APP && counts[a] > 0).collect();
    apps.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    apps.truncate(k);
    apps
}

/// Distinct window apps from most recent backwards, then `fill` in order.
pub fn mru_rank(window: &[usize], fill: &[usize], k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for &a in window.iter().rev().chain(fill) {
        if out.len() == k {
            break;
        }
        if a != PAD_APP && !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Mfu,
    Mru,
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfu" => Ok(Baseline::Mfu),
            "mru" => Ok(Baseline::Mru),
            _ => Err(Error::Config(format!("unknown baseline {s:?} (expected mfu or mru)"))),
        }
    }
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mfu => "mfu",
            Baseline::Mru => "mru",
        }
    }
}

/// Label counts from the training samples: global and per user.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageCounts {
    pub global: Vec<u64>,
    pub per_user: Vec<Vec<u64>>,
}

impl UsageCounts {
    pub fn from_samples(train: &[Sample], n_apps: usize, n_users: usize) -> Self {
        let mut global = vec![0; n_apps];
        let mut per_user = vec![vec![0; n_apps]; n_users];
        for s in train {
            global[s.label] += 1;
            per_user[s.user][s.label] += 1;
        }
        Self { global, per_user }
    }
}

/// Rank `samples` with a baseline fitted on the bundle's training portion.
/// MFU uses per-user counts, or global counts under the cold-start split.
pub fn baseline_rankings(which: Baseline, bundle: &SplitBundle, samples: &[Sample], k: usize) -> Vec<Vec<usize>> {
    let counts = UsageCounts::from_samples(&bundle.train, bundle.n_apps(), bundle.n_users());
    let global_order = mfu_rank(&counts.global, usize::MAX);
    let cold = bundle.protocol.is_cold_start();
    samples
        .iter()
        .map(|s| match which {
            Baseline::Mfu if cold => global_order.iter().copied().take(k).collect(),
            Baseline::Mfu => mfu_rank(&counts.per_user[s.user], k),
            Baseline::Mru => mru_rank(&s.apps, &global_order, k),
        })
        .collect()
}

/// Evaluate a baseline on the bundle's test samples.
pub fn evaluate_baseline(which: Baseline, bundle: &SplitBundle, ks: &[usize]) -> Result<MetricsReport> {
    if bundle.test.is_empty() {
        return Err(Error::Eval("bundle has no test samples".into()));
    }
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let rankings = baseline_rankings(which, bundle, &bundle.test, k_max);
    let truths: Vec<usize> = bundle.test.iter().map(|s| s.label).collect();
    let mfu_scope = if bundle.protocol.is_cold_start() { "global train counts" } else { "per-user train counts" };
    Ok(MetricsReport {
        model: which.name().into(),
        fingerprint: crate::config::fingerprint(which.name()),
        seed: None,
        split: bundle.protocol.tag().into(),
        n_samples: truths.len(),
        metrics: score_rankings(&rankings, &truths, ks)?,
        notes: vec![
            ("ties".into(), "ascending app index".into()),
            ("padding".into(), "excluded from rankings".into()),
            ("outside_top_k".into(), "contributes 0".into()),
            (
                "ranking".into(),
                match which {
                    Baseline::Mfu => format!("{mfu_scope}; apps never seen are not ranked"),
                    Baseline::Mru => "recency list, then global train frequency".into(),
                },
            ),
        ],
    })
}
