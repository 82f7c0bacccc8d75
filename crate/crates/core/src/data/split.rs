use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Sample, SplitBundle, SplitProtocol, Vocab, PAD_APP, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// z-score statistics of `ln(1 + duration)`, fitted on training windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationNorm {
    pub mean: f64,
    pub std: f64,
    /// Set when the training durations had zero variance; `std` is then 1.
    pub zero_variance: bool,
}

impl DurationNorm {
    pub fn apply(&self, seconds: f64) -> f64 {
        (seconds.ln_1p() - self.mean) / self.std
    }
}

fn sort_chronological(samples: &mut [Sample]) {
    samples.sort_by(|a, b| a.user.cmp(&b.user).then(a.timestamp.cmp(&b.timestamp)));
}

fn bundle(protocol: SplitProtocol, vocab: Vocab, window: usize, train: Vec<Sample>, validation: Vec<Sample>, test: Vec<Sample>) -> SplitBundle {
    SplitBundle {
        protocol,
        window,
        idle_gap: super::DEFAULT_IDLE_GAP,
        vocab,
        norm: None,
        train,
        validation,
        test,
        metadata: Vec::new(),
    }
}

/// Move the chronologically last 10% of `train` into a validation set.
fn carve_validation(mut train: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    train.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.user.cmp(&b.user)));
    let n_val = train.len() / 10;
    let mut val = train.split_off(train.len() - n_val);
    sort_chronological(&mut train);
    sort_chronological(&mut val);
    (train, val)
}

/// Re-index apps by those observed in training samples. Evaluation samples
/// whose label never occurs in training are dropped; unseen window entries
/// become padding.
fn restrict_to_train_vocab(b: &mut SplitBundle) {
    let mut seen = BTreeSet::new();
    for s in &b.train {
        seen.extend(s.apps.iter().copied().filter(|&a| a != PAD_APP));
        seen.insert(s.label);
    }
    let mut remap = vec![None; b.vocab.n_apps()];
    remap[PAD_APP] = Some(PAD_APP);
    let mut apps = vec![Vocab::PAD_NAME.to_string()];
    for &old in &seen {
        remap[old] = Some(apps.len());
        apps.push(b.vocab.apps[old].clone());
    }
    let mut dropped = 0usize;
    let mut apply = |samples: &mut Vec<Sample>| {
        samples.retain_mut(|s| {
            let Some(label) = remap[s.label] else {
                dropped += 1;
                return false;
            };
            s.label = label;
            for (a, d) in s.apps.iter_mut().zip(s.durations.iter_mut()) {
                match remap[*a] {
                    Some(n) => *a = n,
                    None => {
                        *a = PAD_APP;
                        *d = 0.0;
                    }
                }
            }
            true
        });
    };
    apply(&mut b.train);
    apply(&mut b.validation);
    apply(&mut b.test);
    b.vocab.apps = apps;
    b.set_meta("eval_samples_dropped_unseen_label", dropped);
}

/// Per-user chronological 70/10/20 split. Boundaries are
/// `floor(0.7 n)` and `floor(0.1 n)`; the remainder goes to test. Users with
/// fewer than three samples go entirely to training.
pub fn split_standard(mut samples: Vec<Sample>, vocab: Vocab, window: usize) -> Result<SplitBundle> {
    sort_chronological(&mut samples);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    while start < samples.len() {
        let user = samples[start].user;
        let end = start + samples[start..].iter().take_while(|s| s.user == user).count();
        let n = end - start;
        let group = &samples[start..end];
        if n < 3 {
            train.extend_from_slice(group);
        } else {
            let n_train = 7 * n / 10;
            let n_val = n / 10;
            train.extend_from_slice(&group[..n_train]);
            val.extend_from_slice(&group[n_train..n_train + n_val]);
            test.extend_from_slice(&group[n_train + n_val..]);
        }
        start = end;
    }
    if train.is_empty() {
        return Err(Error::Data("standard split produced an empty training set".into()));
    }
    let mut b = bundle(SplitProtocol::Standard, vocab, window, train, val, test);
    restrict_to_train_vocab(&mut b);
    Ok(b)
}

/// User-level split: a seeded shuffle of users, `round(fraction · n)` of them
/// (at least one on each side) for training. The app vocabulary is shared by
/// both sides; validation is the chronologically last 10% of training.
pub fn split_cold_start(mut samples: Vec<Sample>, vocab: Vocab, window: usize, train_user_fraction: f64, seed: u64) -> Result<SplitBundle> {
    if !(train_user_fraction > 0.0 && train_user_fraction < 1.0) {
        return Err(Error::Config(format!("train user fraction must lie in (0, 1), got {train_user_fraction}")));
    }
    let mut users: Vec<usize> = samples.iter().map(|s| s.user).collect::<BTreeSet<_>>().into_iter().collect();
    if users.len() < 2 {
        return Err(Error::Data(format!("cold-start split needs at least 2 users, got {}", users.len())));
    }
    Rng::new(seed).derive_named("cold-start-users").shuffle(&mut users);
    let n_train = ((train_user_fraction * users.len() as f64).round() as usize).clamp(1, users.len() - 1);
    let mut is_train = vec![false; vocab.n_users().max(users.iter().max().map_or(0, |m| m + 1))];
    for &u in &users[..n_train] {
        is_train[u] = true;
    }
    sort_chronological(&mut samples);
    let (train, mut test): (Vec<Sample>, Vec<Sample>) = samples.into_iter().partition(|s| is_train[s.user]);
    if train.is_empty() {
        return Err(Error::Data("cold-start split produced an empty training set".into()));
    }
    let (train, val) = carve_validation(train);
    sort_chronological(&mut test);
    let protocol = SplitProtocol::ColdStart { train_user_fraction };
    let mut b = bundle(protocol, vocab, window, train, val, test);
    b.set_meta("user_agnostic", "true");
    b.set_meta("train_users", n_train);
    b.set_meta("test_users", users.len() - n_train);
    Ok(b)
}

/// Days 1–6 (counted from the UTC midnight at or before the earliest label)
/// train, day 7 tests; later days are discarded. Validation is the
/// chronologically last 10% of training.
pub fn split_time_based(samples: Vec<Sample>, vocab: Vocab, window: usize) -> Result<SplitBundle> {
    let first = samples.iter().map(|s| s.timestamp).min().ok_or_else(|| Error::Data("no samples to split".into()))?;
    let last = samples.iter().map(|s| s.timestamp).max().unwrap_or(first);
    let origin = first.div_euclid(SECONDS_PER_DAY) * SECONDS_PER_DAY;
    let day = |ts: i64| (ts - origin).div_euclid(SECONDS_PER_DAY);
    if day(last) < 6 {
        return Err(Error::Data(format!("time-based split needs 7 calendar days, data spans {}", day(last) + 1)));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut discarded = 0usize;
    for s in samples {
        match day(s.timestamp) {
            0..=5 => train.push(s),
            6 => test.push(s),
            _ => discarded += 1,
        }
    }
    if train.is_empty() {
        return Err(Error::Data("time-based split produced an empty training set".into()));
    }
    let (train, val) = carve_validation(train);
    sort_chronological(&mut test);
    let mut b = bundle(SplitProtocol::TimeBased, vocab, window, train, val, test);
    b.set_meta("day_origin", origin);
    b.set_meta("samples_after_day_7", discarded);
    restrict_to_train_vocab(&mut b);
    Ok(b)
}

/// Replace raw durations with the z-score of `ln(1 + seconds)`, using
/// statistics fitted on non-padding training entries. Padding stays 0.
pub fn normalize_durations(b: &mut SplitBundle) -> Result<()> {
    if b.train.is_empty() {
        return Err(Error::Data("cannot fit duration statistics on an empty training set".into()));
    }
    if b.norm.is_some() {
        return Err(Error::Data("durations are already normalised".into()));
    }
    let values: Vec<f64> = b
        .train
        .iter()
        .flat_map(|s| s.apps.iter().zip(&s.durations).filter(|(a, _)| **a != PAD_APP).map(|(_, d)| d.ln_1p()))
        .collect();
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let zero_variance = var.sqrt() <= 1e-12;
    // A constant column maps exactly to zero instead of to rounding noise.
    let mean = if zero_variance { values.first().copied().unwrap_or(mean) } else { mean };
    let norm = DurationNorm { mean, std: if zero_variance { 1.0 } else { var.sqrt() }, zero_variance };
    for s in b.train.iter_mut().chain(b.validation.iter_mut()).chain(b.test.iter_mut()) {
        for (a, d) in s.apps.iter().zip(s.durations.iter_mut()) {
            *d = if *a == PAD_APP { 0.0 } else { norm.apply(*d) };
        }
    }
    if zero_variance {
        b.set_meta("warning", "zero-variance durations; std set to 1");
    }
    b.norm = Some(norm);
    Ok(())
}
