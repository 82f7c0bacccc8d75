use std::collections::HashMap;

use super::UsageEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterThresholds {
    pub min_user_events: usize,
    pub min_app_events: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self { min_user_events: 50, min_app_events: 10 }
    }
}

/// Drop users with fewer than `min_user_events` records and apps with fewer
/// than `min_app_events` occurrences, alternating the two filters until
/// neither removes anything.
pub fn filter_inactive(mut events: Vec<UsageEvent>, t: &FilterThresholds) -> Vec<UsageEvent> {
    loop {
        let before = events.len();

        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *per_user.entry(e.user_id.as_str()).or_default() += 1;
        }
        let keep_user: Vec<bool> = events.iter().map(|e| per_user[e.user_id.as_str()] >= t.min_user_events).collect();
        let mut it = keep_user.into_iter();
        events.retain(|_| it.next().unwrap());

        let mut per_app: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *per_app.entry(e.app_id.as_str()).or_default() += 1;
        }
        let keep_app: Vec<bool> = events.iter().map(|e| per_app[e.app_id.as_str()] >= t.min_app_events).collect();
        let mut it = keep_app.into_iter();
        events.retain(|_| it.next().unwrap());

        if events.len() == before {
            return events;
        }
    }
}

/// Fill missing durations with `min(next timestamp − timestamp, idle_gap)`.
/// A user's final event takes the lower median of that user's derived values.
/// Events that already carry a duration are left untouched.
///
/// Expects events sorted by `(user, timestamp)`.
pub fn derive_durations(mut events: Vec<UsageEvent>, idle_gap: i64) -> Vec<UsageEvent> {
    let mut start = 0;
    while start < events.len() {
        let mut end = start + 1;
        while end < events.len() && events[end].user_id == events[start].user_id {
            end += 1;
        }
        let mut derived = Vec::new();
        for i in start..end - 1 {
            if events[i].duration.is_none() {
                let gap = (events[i + 1].timestamp - events[i].timestamp).clamp(0, idle_gap) as f64;
                events[i].duration = Some(gap);
                derived.push(gap);
            }
        }
        if events[end - 1].duration.is_none() {
            derived.sort_by(f64::total_cmp);
            let median = if derived.is_empty() { 0.0 } else { derived[(derived.len() - 1) / 2] };
            events[end - 1].duration = Some(median);
        }
        start = end;
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, ts: i64, app: &str) -> UsageEvent {
        UsageEvent { user_id: user.into(), timestamp: ts, app_id: app.into(), duration: None }
    }

    #[test]
    fn user_threshold_is_inclusive() {
        let mut events = Vec::new();
        for i in 0..50 {
            events.push(ev("keep", i, "a"));
        }
        for i in 0..49 {
            events.push(ev("drop", i, "a"));
        }
        let out = filter_inactive(events, &FilterThresholds::default());
        assert_eq!(out.len(), 50);
        assert!(out.iter().all(|e| e.user_id == "keep"));
    }

    #[test]
    fn rare_app_removed() {
        let mut events = Vec::new();
        for i in 0..60 {
            events.push(ev("u", i, if i < 9 { "rare" } else { "common" }));
        }
        let out = filter_inactive(events, &FilterThresholds::default());
        assert_eq!(out.len(), 51);
        assert!(out.iter().all(|e| e.app_id == "common"));
    }

    #[test]
    fn filters_iterate_to_fixpoint() {
        // Removing the rare app pushes the user below 50 events.
        let mut events = Vec::new();
        for i in 0..45 {
            events.push(ev("u1", i, "common"));
        }
        for i in 0..5 {
            events.push(ev("u1", 100 + i, "rare"));
        }
        for i in 0..60 {
            events.push(ev("u2", i, "common"));
        }
        let out = filter_inactive(events, &FilterThresholds::default());
        assert!(out.iter().all(|e| e.user_id == "u2"));
        assert_eq!(out.len(), 60);
    }

    #[test]
    fn all_pass_is_unchanged() {
        let events: Vec<_> = (0..100).map(|i| ev("u", i, if i % 2 == 0 { "a" } else { "b" })).collect();
        assert_eq!(filter_inactive(events.clone(), &FilterThresholds::default()), events);
    }

    #[test]
    fn durations_clamp_and_median() {
        let events = vec![ev("u", 0, "a"), ev("u", 100, "b"), ev("u", 500, "c")];
        let out = derive_durations(events, 300);
        let d: Vec<f64> = out.iter().map(|e| e.duration.unwrap()).collect();
        assert_eq!(d, vec![100.0, 300.0, 100.0]);
    }

    #[test]
    fn explicit_durations_untouched() {
        let mut events = vec![ev("u", 0, "a"), ev("u", 100, "b")];
        events[0].duration = Some(7.0);
        events[1].duration = Some(9.0);
        assert_eq!(derive_durations(events.clone(), 300), events);
    }
}
