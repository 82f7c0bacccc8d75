use super::{Sample, Session, UsageEvent, Vocab, SECONDS_PER_DAY};
use crate::error::{Error, Result};

/// Reserved app index for left padding.
pub const PAD_APP: usize = 0;

pub fn hour_of_day(timestamp: i64) -> u8 {
    (timestamp.rem_euclid(SECONDS_PER_DAY) / 3600) as u8
}

/// Split each user's stream into sessions. A gap strictly greater than
/// `idle_gap` starts a new session; a gap of exactly `idle_gap` does not.
///
/// Expects events sorted by `(user, timestamp)`.
pub fn segment_sessions(events: &[UsageEvent], vocab: &Vocab, idle_gap: i64) -> Result<Vec<Session>> {
    if idle_gap <= 0 {
        return Err(Error::Config(format!("idle gap must be positive, got {idle_gap}")));
    }
    let mut sessions: Vec<Session> = Vec::new();
    let mut prev: Option<&UsageEvent> = None;
    for e in events {
        let user = vocab.user_index(&e.user_id).ok_or_else(|| Error::Data(format!("user {:?} not in vocabulary", e.user_id)))?;
        let app = vocab.app_index(&e.app_id).ok_or_else(|| Error::Data(format!("app {:?} not in vocabulary", e.app_id)))?;
        let continues = prev.is_some_and(|p| p.user_id == e.user_id && e.timestamp - p.timestamp <= idle_gap);
        if !continues {
            sessions.push(Session { user, events: Vec::new(), timestamps: Vec::new(), end_hour: 0 });
        }
        let s = sessions.last_mut().expect("session exists");
        s.events.push((app, e.duration.unwrap_or(0.0)));
        s.timestamps.push(e.timestamp);
        s.end_hour = hour_of_day(e.timestamp);
        prev = Some(e);
    }
    Ok(sessions)
}

/// Turn sessions into fixed-length samples.
///
/// Sessions with at least `M + 1` events yield every stride-1 window of `M`
/// events followed by its label. Shorter sessions with at least two events
/// yield one left-padded sample per label position. Single-event sessions
/// yield nothing.
pub fn windowize(sessions: &[Session], window: usize) -> Vec<Sample> {
    assert!(window >= 1, "window length must be at least 1");
    let mut out = Vec::new();
    for s in sessions {
        let n = s.events.len();
        if n < 2 {
            continue;
        }
        let make = |start: usize, end: usize| {
            // Real events occupy [start, end); label sits at `end`.
            let pad = window - (end - start);
            let mut apps = vec![PAD_APP; pad];
            let mut durations = vec![0.0; pad];
            for &(a, d) in &s.events[start..end] {
                apps.push(a);
                durations.push(d);
            }
            Sample {
                apps,
                durations,
                user: s.user,
                hour: hour_of_day(s.timestamps[end - 1]),
                label: s.events[end].0,
                timestamp: s.timestamps[end],
            }
        };
        if n > window {
            for start in 0..n - window {
                out.push(make(start, start + window));
            }
        } else {
            for end in 1..n {
                out.push(make(0, end));
            }
        }
    }
    out
}
