//! Seeded synthetic usage logs with planted hour-of-day and Markov structure.
//!
//! Each event's app is drawn from the mixture
//! `λ · transition[prev] + (1 − λ) · hour_profile[hour]`, where `prev` is the
//! user's previous app (across sessions) and `hour` the event's UTC hour.
//!
//! Timeline per user and day: a Poisson number of sessions starts at times
//! drawn from `hour_activity` (hour, then a uniform offset), sorted. The
//! session count has mean `events_per_user_day / ℓ`, with `ℓ` the expected
//! session length, so days average `events_per_user_day` events. A session's
//! first app uses the hour of its start; every later app uses the hour of
//! the event before it. After an event of app `p` the session ends with
//! probability `break_prob[p]`; otherwise the next app `a` is drawn and
//! follows after a gap `Exp(within_gap_mean · gap_scale[a])`, rounded and
//! clamped to `[1, idle_gap]`. A session start is pushed later if needed so
//! that it follows the previous session by more than
//! `idle_gap + Exp(between_gap_mean)`. An event's duration is its gap to the
//! next event in the session; a session's last event gets an unscaled draw.

use std::path::Path;

use crate::config::KeyValues;
use crate::data::{hour_of_day, UsageEvent, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const HOURS: usize = 24;

const SYNTH_KEYS: &[&str] = &[
    "preset",
    "n_users",
    "n_apps",
    "days",
    "seed",
    "events_per_user_day",
    "mix_weight",
    "within_gap_mean",
    "between_gap_mean",
    "session_break_prob",
    "idle_gap",
    "start_epoch",
    "break_prob",
    "gap_scale",
    "hour_activity",
    "hour_profiles",
    "transition",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_apps: usize,
    pub days: usize,
    pub events_per_user_day: f64,
    /// 24 × n_apps, row-stochastic.
    pub hour_profiles: Vec<Vec<f64>>,
    /// n_apps × n_apps, row-stochastic.
    pub transition: Vec<Vec<f64>>,
    /// λ: weight of the transition term.
    pub mix_weight: f64,
    pub within_gap_mean: f64,
    pub between_gap_mean: f64,
    pub session_break_prob: f64,
    /// Per-app session-end probability; `session_break_prob` for all when
    /// `None`.
    pub break_prob: Option<Vec<f64>>,
    /// Per-app multiplier on the mean gap leading into that app; 1 for all
    /// when `None`.
    pub gap_scale: Option<Vec<f64>>,
    /// Relative session-start intensity per hour.
    pub hour_activity: [f64; HOURS],
    pub idle_gap: i64,
    pub start_epoch: i64,
    pub seed: u64,
}

pub fn uniform_rows(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / cols as f64; cols]; rows]
}

/// Hour `h` puts all mass on app `h mod n_apps`.
pub fn one_hot_hours(n_apps: usize) -> Vec<Vec<f64>> {
    (0..HOURS)
        .map(|h| {
            let mut row = vec![0.0; n_apps];
            row[h % n_apps] = 1.0;
            row
        })
        .collect()
}

impl SynthConfig {
    /// Small defaults: uniform rhythms and transitions.
    pub fn new(n_users: usize, n_apps: usize, days: usize, seed: u64) -> Self {
        Self {
            n_users,
            n_apps,
            days,
            events_per_user_day: 40.0,
            hour_profiles: uniform_rows(HOURS, n_apps),
            transition: uniform_rows(n_apps, n_apps),
            mix_weight: 0.5,
            within_gap_mean: 40.0,
            between_gap_mean: 1800.0,
            session_break_prob: 0.25,
            break_prob: None,
            gap_scale: None,
            hour_activity: [1.0; HOURS],
            idle_gap: crate::data::DEFAULT_IDLE_GAP,
            start_epoch: 1_704_067_200, // 2024-01-01T00:00:00Z
            seed,
        }
    }

    /// Benchmark for the hour gate: 50 users, 20 apps, about 50k events,
    /// `λ = 0.3`. Hours 8 to 23 fall into four blocks of four hours, each
    /// dominated by one of apps 0 to 3. Those apps always end their session,
    /// so they never precede a label and the window alone does not reveal
    /// the hour. Hours 0 to 7 are uniform and busier. The other apps form a
    /// quick group and a slow group by gap scale; every transition row puts
    /// 0.45 on one app of each group, so only the gap into the label tells
    /// them apart. Activity peaks at hours 10 and 16.
    pub fn gating_benchmark(seed: u64) -> Self {
        let n = 20;
        let blocks = 4;
        let mut c = SynthConfig::new(50, n, 25, seed);
        c.mix_weight = 0.3;
        c.between_gap_mean = 120.0;
        c.session_break_prob = 0.1;
        for h in 0..HOURS {
            if h >= 8 {
                let mut row = vec![0.1 / n as f64; n];
                row[(h - 8) * blocks / 16] += 0.9;
                c.hour_profiles[h] = row;
            }
            c.hour_activity[h] = if h < 8 { 2.5 } else { 1.0 };
        }
        c.hour_activity[10] = 3.0;
        c.hour_activity[16] = 3.0;
        let quick: Vec<usize> = (blocks..n).step_by(2).collect();
        let slow: Vec<usize> = (blocks + 1..n).step_by(2).collect();
        for a in 0..n {
            let mut row = vec![0.1 / n as f64; n];
            // Apps of either gap group reach every target, so a window's gap
            // pattern alone says nothing about which targets follow.
            row[quick[(3 * (a / 2) + 1) % quick.len()]] += 0.45;
            row[slow[(5 * (a / 2) + 2) % slow.len()]] += 0.45;
            c.transition[a] = row;
        }
        let mut scale = vec![0.3; n];
        slow.iter().for_each(|&a| scale[a] = 3.0);
        c.gap_scale = Some(scale);
        let mut b = vec![0.1; n];
        b[..blocks].iter_mut().for_each(|v| *v = 1.0);
        c.break_prob = Some(b);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_apps == 0 || self.days == 0 {
            return bad("n_users, n_apps and days must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return bad(format!("mix_weight must lie in [0, 1], got {}", self.mix_weight));
        }
        for (name, v) in [
            ("events_per_user_day", self.events_per_user_day),
            ("within_gap_mean", self.within_gap_mean),
            ("between_gap_mean", self.between_gap_mean),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.session_break_prob) {
            return bad("session_break_prob must lie in [0, 1]".into());
        }
        if let Some(b) = &self.break_prob {
            if b.len() != self.n_apps || b.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("break_prob needs {} values in [0, 1]", self.n_apps));
            }
        }
        if let Some(g) = &self.gap_scale {
            if g.len() != self.n_apps || g.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad(format!("gap_scale needs {} positive values", self.n_apps));
            }
        }
        if self.idle_gap <= 0 {
            return bad("idle_gap must be positive".into());
        }

        let check = |name: &str, m: &[Vec<f64>], rows: usize| -> Result<()> {
            if m.len() != rows || m.iter().any(|r| r.len() != self.n_apps) {
                return Err(Error::Config(format!("{name} must be {rows}×{}", self.n_apps)));
            }
            for (i, r) in m.iter().enumerate() {
                if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("{name} row {i} is not stochastic")));
                }
            }
            Ok(())
        };
        check("hour_profiles", &self.hour_profiles, HOURS)?;
        check("transition", &self.transition, self.n_apps)?;
        if self.hour_activity.iter().any(|v| !(*v >= 0.0)) || self.hour_activity.iter().sum::<f64>() <= 0.0 {
            return bad("hour_activity must be non-negative with positive sum".into());
        }
        if !(self.mean_session_length() < 1e9) {
            return bad("sessions never end: break probabilities are zero on reachable apps".into());
        }
        Ok(())
    }

    /// Read a `key = value` file. Matrices are rows separated by `;` with
    /// comma-separated entries; `hour_profiles` also accepts `uniform` or
    /// `onehot`, and `transition` accepts `uniform`.
    ///
    /// `preset = gating` starts from [`SynthConfig::gating_benchmark`];
    /// changing `n_apps` away from the base resets the per-app tables.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(SYNTH_KEYS, "synth config")?;
        let seed = kv.parse_or("seed", 0u64)?;
        let mut c = match kv.get("preset") {
            None => SynthConfig::new(10, 8, 7, seed),
            Some("gating") => SynthConfig::gating_benchmark(seed),
            Some(other) => return Err(Error::Config(format!("unknown synth preset {other:?} (expected gating)"))),
        };
        c.n_users = kv.parse_or("n_users", c.n_users)?;
        c.days = kv.parse_or("days", c.days)?;
        let n_apps = kv.parse_or("n_apps", c.n_apps)?;
        if n_apps != c.n_apps {
            c.n_apps = n_apps;
            c.hour_profiles = uniform_rows(HOURS, n_apps);
            c.transition = uniform_rows(n_apps, n_apps);
            c.break_prob = None;
            c.gap_scale = None;
        }
        c.events_per_user_day = kv.parse_or("events_per_user_day", c.events_per_user_day)?;
        c.mix_weight = kv.parse_or("mix_weight", c.mix_weight)?;
        c.within_gap_mean = kv.parse_or("within_gap_mean", c.within_gap_mean)?;
        c.between_gap_mean = kv.parse_or("between_gap_mean", c.between_gap_mean)?;
        c.session_break_prob = kv.parse_or("session_break_prob", c.session_break_prob)?;
        c.idle_gap = kv.parse_or("idle_gap", c.idle_gap)?;
        c.start_epoch = kv.parse_or("start_epoch", c.start_epoch)?;
        if let Some(v) = kv.floats("break_prob")? {
            c.break_prob = Some(v);
        }
        if let Some(v) = kv.floats("gap_scale")? {
            c.gap_scale = Some(v);
        }
        if let Some(a) = kv.floats("hour_activity")? {
            c.hour_activity = a.try_into().map_err(|_| Error::Config("hour_activity needs 24 values".into()))?;
        }
        let matrix = |key: &str| -> Result<Option<Vec<Vec<f64>>>> {
            let Some(v) = kv.get(key) else { return Ok(None) };
            match v {
                "uniform" => Ok(Some(Vec::new())),
                "onehot" if key == "hour_profiles" => Ok(Some(one_hot_hours(n_apps))),
                _ => v
                    .split(';')
                    .map(|row| {
                        row.split(',')
                            .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("{key}: bad number {x:?}"))))
                            .collect()
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()
                    .map(Some),
            }
        };
        if let Some(m) = matrix("hour_profiles")? {
            c.hour_profiles = if m.is_empty() { uniform_rows(HOURS, n_apps) } else { m };
        }
        if let Some(m) = matrix("transition")? {
            c.transition = if m.is_empty() { uniform_rows(n_apps, n_apps) } else { m };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    /// Every field as key-values; [`SynthConfig::from_key_values`] reads
    /// it back unchanged.
    pub fn to_key_values(&self) -> KeyValues {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let matrix = |m: &[Vec<f64>]| m.iter().map(|r| list(r)).collect::<Vec<_>>().join(";");
        let mut kv = KeyValues::new();
        kv.set("n_users", self.n_users);
        kv.set("n_apps", self.n_apps);
        kv.set("days", self.days);
        kv.set("seed", self.seed);
        kv.set("events_per_user_day", self.events_per_user_day);
        kv.set("mix_weight", self.mix_weight);
        kv.set("within_gap_mean", self.within_gap_mean);
        kv.set("between_gap_mean", self.between_gap_mean);
        kv.set("session_break_prob", self.session_break_prob);
        kv.set("idle_gap", self.idle_gap);
        kv.set("start_epoch", self.start_epoch);
        if let Some(b) = &self.break_prob {
            kv.set("break_prob", list(b));
        }
        if let Some(g) = &self.gap_scale {
            kv.set("gap_scale", list(g));
        }
        kv.set("hour_activity", list(&self.hour_activity));
        kv.set("hour_profiles", matrix(&self.hour_profiles));
        kv.set("transition", matrix(&self.transition));
        kv
    }

    pub fn fingerprint(&self) -> String {
        crate::config::fingerprint(&self.to_key_values().render())
    }

    /// Distribution of the next app given the previous app and the hour.
    pub fn next_app_law(&self, prev: Option<usize>, hour: usize) -> Vec<f64> {
        let h = &self.hour_profiles[hour];
        match prev {
            None => h.clone(),
            Some(p) => self.transition[p].iter().zip(h).map(|(t, h)| self.mix_weight * t + (1.0 - self.mix_weight) * h).collect(),
        }
    }

    fn draw_app(&self, rng: &mut Rng, prev: Option<usize>, hour: usize) -> usize {
        match prev {
            Some(p) if rng.bernoulli(self.mix_weight) => rng.categorical(&self.transition[p]),
            _ => rng.categorical(&self.hour_profiles[hour]),
        }
    }
}

pub fn user_name(u: usize) -> String {
    format!("u{u:04}")
}

pub fn app_name(a: usize) -> String {
    format!("app{a:03}")
}

/// Generate events sorted by `(user, timestamp)`.
pub fn generate(config: &SynthConfig) -> Result<Vec<UsageEvent>> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let draw_gap = |rng: &mut Rng, scale: f64| {
        (rng.exponential(config.within_gap_mean * scale).round() as i64).clamp(1, config.idle_gap)
    };
    let sessions_per_day = config.events_per_user_day / config.mean_session_length();
    let mut events = Vec::new();
    for u in 0..config.n_users {
        let mut rng = root.derive(u as u64);
        let mut prev: Option<usize> = None;
        let mut last: Option<i64> = None;
        for day in 0..config.days {
            let day_start = config.start_epoch + day as i64 * SECONDS_PER_DAY;
            let k = rng.poisson(sessions_per_day) as usize;
            let mut starts: Vec<i64> = (0..k)
                .map(|_| day_start + rng.categorical(&config.hour_activity) as i64 * 3600 + rng.below(3600) as i64)
                .collect();
            starts.sort_unstable();
            for start in starts {
                let mut t = match last {
                    Some(l) => start.max(l + config.idle_gap + 1 + rng.exponential(config.between_gap_mean) as i64),
                    None => start,
                };
                let mut app = config.draw_app(&mut rng, prev, hour_of_day(t) as usize);
                loop {
                    prev = Some(app);
                    last = Some(t);
                    if rng.bernoulli(config.break_after(app)) {
                        let d = draw_gap(&mut rng, 1.0);
                        events.push(UsageEvent { user_id: user_name(u), timestamp: t, app_id: app_name(app), duration: Some(d as f64) });
                        break;
                    }
                    let next = config.draw_app(&mut rng, prev, hour_of_day(t) as usize);
                    let gap = draw_gap(&mut rng, config.gap_scale_of(next));
                    events.push(UsageEvent { user_id: user_name(u), timestamp: t, app_id: app_name(app), duration: Some(gap as f64) });
                    t += gap;
                    app = next;
                }
            }
        }
    }
    Ok(events)
}

/// Stationary distribution of the previous app for events in hour `h`,
/// treating the hour as fixed: the fixed point of
/// `π = λ π T + (1 − λ) H[h]`, or the stationary law of `T` when `λ = 1`.
pub fn stationary_prev(config: &SynthConfig, hour: usize) -> Vec<f64> {
    let n = config.n_apps;
    let lambda = config.mix_weight;
    let mut pi = if lambda < 1.0 { config.hour_profiles[hour].clone() } else { vec![1.0 / n as f64; n] };
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for (p, &w) in pi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, t) in config.transition[p].iter().enumerate() {
                next[a] += lambda * w * t;
            }
        }
        for (a, h) in config.hour_profiles[hour].iter().enumerate() {
            next[a] += (1.0 - lambda) * h;
        }
        // Damped update for λ = 1 keeps periodic chains from oscillating.
        if lambda >= 1.0 {
            next.iter_mut().zip(&pi).for_each(|(x, p)| *x = 0.5 * (*x + p));
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

impl SynthConfig {
    /// Session-end probability after app `a`.
    pub fn break_after(&self, a: usize) -> f64 {
        self.break_prob.as_ref().map_or(self.session_break_prob, |b| b[a])
    }

    pub fn gap_scale_of(&self, a: usize) -> f64 {
        self.gap_scale.as_ref().map_or(1.0, |g| g[a])
    }

    /// Law of the integer gap leading into app `a`, over `1..=idle_gap`
    /// (index 0 is gap 1).
    pub fn gap_pmf(&self, a: usize) -> Vec<f64> {
        let m = self.within_gap_mean * self.gap_scale_of(a);
        let tail = |x: f64| (-x / m).exp();
        let n = self.idle_gap as usize;
        (1..=n)
            .map(|k| {
                let lo = if k == 1 { 1.0 } else { tail(k as f64 - 0.5) };
                let hi = if k == n { 0.0 } else { tail(k as f64 + 0.5) };
                lo - hi
            })
            .collect()
    }

    /// Expected events per session started in hour `h`.
    fn session_length_at(&self, h: usize) -> f64 {
        let end: f64 = stationary_prev(self, h).iter().enumerate().map(|(a, p)| p * self.break_after(a)).sum();
        1.0 / end
    }

    /// Expected events per session over `hour_activity`.
    pub fn mean_session_length(&self) -> f64 {
        let total: f64 = self.hour_activity.iter().sum();
        (0..HOURS).filter(|&h| self.hour_activity[h] > 0.0).map(|h| self.hour_activity[h] / total * self.session_length_at(h)).sum()
    }

    /// Weight of `(hour, prev)` among labelled events: an event is a label
    /// only when its predecessor did not end the session.
    pub fn label_weights(&self) -> Vec<(usize, Vec<f64>)> {
        let total: f64 = self.hour_activity.iter().sum();
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        for h in 0..HOURS {
            let w = self.hour_activity[h] / total;
            if w == 0.0 {
                continue;
            }
            let pi = stationary_prev(self, h);
            let len = self.session_length_at(h);
            out.push((h, pi.iter().enumerate().map(|(p, pp)| w * len * pp * (1.0 - self.break_after(p))).collect()));
        }
        let z: f64 = out.iter().flat_map(|(_, r)| r.iter()).sum();
        for (_, r) in &mut out {
            r.iter_mut().for_each(|v| *v /= z);
        }
        out
    }
}

/// Expected top-1 accuracy of the Bayes predictor over labelled events. With
/// uniform gap scales this is `argmax_a λ T[prev, a] + (1 − λ) H[hour, a]`
/// summed over hours (weighted by `hour_activity` times the expected session
/// length) and the stationary previous-app law, each previous app weighted by
/// its probability of continuing the session. Otherwise the gap leading into
/// the label is informative and is conditioned on as well.
pub fn bayes_hr1(config: &SynthConfig) -> Result<f64> {
    oracle_hr1(config, Observed { prev: true, hour: true, duration: true })
}

/// Which of the label's predictors an oracle may look at: the previous app,
/// its hour and its duration (the gap leading into the label).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observed {
    pub prev: bool,
    pub hour: bool,
    pub duration: bool,
}

/// Expected top-1 accuracy of the best predictor that sees only the
/// `observed` parts of `(prev, hour, duration)`, by exact enumeration over
/// the labelled-event law.
pub fn oracle_hr1(config: &SynthConfig, observed: Observed) -> Result<f64> {
    config.validate()?;
    let n = config.n_apps;
    let scales: Vec<f64> = (0..n).map(|a| config.gap_scale_of(a)).collect();
    // With one gap law for every app the duration says nothing about the label.
    let use_duration = observed.duration && scales.iter().any(|&s| s != scales[0]);
    let n_gaps = if use_duration { config.idle_gap as usize } else { 1 };
    let pmf: Vec<Vec<f64>> = if use_duration { (0..n).map(|a| config.gap_pmf(a)).collect() } else { vec![vec![1.0]; n] };
    let n_hours = if observed.hour { HOURS } else { 1 };
    let n_prev = if observed.prev { n } else { 1 };
    let mut score = vec![0.0; n_hours * n_prev * n_gaps * n];
    for (h, row) in config.label_weights() {
        for (p, &wp) in row.iter().enumerate() {
            if wp == 0.0 {
                continue;
            }
            let law = config.next_app_law(Some(p), h);
            let key = (if observed.hour { h } else { 0 }) * n_prev + if observed.prev { p } else { 0 };
            for d in 0..n_gaps {
                let cell = &mut score[(key * n_gaps + d) * n..][..n];
                for a in 0..n {
                    cell[a] += wp * law[a] * pmf[a][d];
                }
            }
        }
    }
    Ok(score.chunks(n).map(|c| c.iter().copied().fold(0.0, f64::max)).sum())
}

/// Expected frequency of each app among labelled events.
pub fn app_frequencies(config: &SynthConfig) -> Vec<f64> {
    let mut freq = vec![0.0; config.n_apps];
    for (h, row) in config.label_weights() {
        for (p, &wp) in row.iter().enumerate() {
            for (a, q) in config.next_app_law(Some(p), h).iter().enumerate() {
                freq[a] += wp * q;
            }
        }
    }
    freq
}
