use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use tgt_core::data::*;
use tgt_core::rng::Rng;
use tgt_core::synth::{generate, SynthConfig};
use tgt_core::Error;

fn ev(user: &str, ts: i64, app: &str) -> UsageEvent {
    UsageEvent { user_id: user.into(), timestamp: ts, app_id: app.into(), duration: None }
}

fn synth_bundle(protocol: SplitProtocol, days: usize, seed: u64) -> SplitBundle {
    let mut c = SynthConfig::new(12, 6, days, seed);
    c.events_per_user_day = 30.0;
    let events = generate(&c).unwrap();
    let cfg = PrepareConfig { protocol, seed, ..PrepareConfig::default() };
    prepare(events, &cfg).unwrap()
}

#[test]
fn loads_presets_and_sorts() {
    let text = "user_id,timestamp,app_id\nb,20160421061830,x\na,2016-04-21T06:18:40Z,y\na,20160421061820,z\n";
    let events = read_events(Cursor::new(text), &FormatSpec::tsinghua(), Path::new("t.csv")).unwrap();
    let order: Vec<(&str, &str)> = events.iter().map(|e| (e.user_id.as_str(), e.app_id.as_str())).collect();
    assert_eq!(order, vec![("a", "z"), ("a", "y"), ("b", "x")]);
    assert_eq!(events[1].timestamp - events[0].timestamp, 20);
    assert!(events.iter().all(|e| e.duration.is_none()));

    let text = "user_id,timestamp,app_name\nu1,2019-05-02 10:00:00,Chrome\n";
    let events = read_events(Cursor::new(text), &FormatSpec::lsapp(), Path::new("l.csv")).unwrap();
    assert_eq!(events[0].app_id, "Chrome");
    assert_eq!(hour_of_day(events[0].timestamp), 10);
}

#[test]
fn bad_timestamp_reports_line() {
    let text = "user_id,timestamp,app_id,duration\nu,10,a,1\nu,oops,a,1\n";
    let err = read_events(Cursor::new(text), &FormatSpec::synth(), Path::new("bad.csv")).unwrap_err();
    match err {
        Error::Parse { line, ref path, .. } => {
            assert_eq!(line, 3);
            assert_eq!(path, Path::new("bad.csv"));
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("bad.csv, line 3"));
}

#[test]
fn missing_column_and_file_are_errors() {
    let text = "user,timestamp,app_id\nu,1,a\n";
    assert!(read_events(Cursor::new(text), &FormatSpec::synth(), Path::new("x.csv")).is_err());
    let err = load_events(Path::new("/nonexistent/log.csv"), &FormatSpec::synth()).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/log.csv"));
}

#[test]
fn csv_round_trip() {
    let c = SynthConfig::new(3, 4, 1, 2);
    let events = generate(&c).unwrap();
    let mut buf = Vec::new();
    write_events_csv(&mut buf, &events).unwrap();
    let back = read_events(Cursor::new(buf), &FormatSpec::synth(), Path::new("mem")).unwrap();
    assert_eq!(back, events);
}

#[test]
fn derived_durations_use_gaps_and_lower_median() {
    let events = vec![ev("u", 0, "a"), ev("u", 10, "a"), ev("u", 40, "a"), ev("u", 1000, "a"), ev("u", 1001, "a")];
    let out = derive_durations(events, 300);
    let d: Vec<f64> = out.iter().map(|e| e.duration.unwrap()).collect();
    // gaps 10, 30, 300 (clamped), 1; sorted [1, 10, 30, 300], lower median 10
    assert_eq!(d, vec![10.0, 30.0, 300.0, 1.0, 10.0]);
}

#[test]
fn filters_alternate_until_stable() {
    let t = FilterThresholds { min_user_events: 3, min_app_events: 2 };
    // u2 has 3 events but one is a rare app; dropping it leaves u2 with 2.
    let events = vec![
        ev("u1", 0, "a"),
        ev("u1", 1, "a"),
        ev("u1", 2, "b"),
        ev("u1", 3, "b"),
        ev("u2", 0, "a"),
        ev("u2", 1, "b"),
        ev("u2", 2, "rare"),
    ];
    let out = filter_inactive(events, &t);
    assert!(out.iter().all(|e| e.user_id == "u1"));
    assert_eq!(out.len(), 4);
}

/// Quadratic reference: two events share a session iff they belong to the
/// same user and every consecutive gap between them is at most `gap`.
fn reference_partition(events: &[UsageEvent], gap: i64) -> Vec<Vec<usize>> {
    let n = events.len();
    let same = |i: usize, j: usize| {
        let (lo, hi) = (i.min(j), i.max(j));
        (lo..hi).all(|k| events[k].user_id == events[k + 1].user_id && events[k + 1].timestamp - events[k].timestamp <= gap)
    };
    let mut assigned = vec![false; n];
    let mut parts = Vec::new();
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let part: Vec<usize> = (0..n).filter(|&j| same(i, j)).collect();
        for &j in &part {
            assigned[j] = true;
        }
        parts.push(part);
    }
    parts
}

#[test]
fn segmentation_matches_quadratic_reference() {
    let mut rng = Rng::new(99);
    for _ in 0..1000 {
        let n_users = 1 + rng.below(3);
        let mut events = Vec::new();
        for u in 0..n_users {
            let mut t = rng.below(1000) as i64;
            for _ in 0..rng.below(12) {
                events.push(ev(&format!("u{u}"), t, &format!("a{}", rng.below(4))));
                // Hit the boundary Δt exactly now and then.
                t += match rng.below(4) {
                    0 => 300,
                    1 => 301,
                    _ => rng.below(700) as i64,
                };
            }
        }
        if events.is_empty() {
            continue;
        }
        let vocab = Vocab::from_events(&events);
        let sessions = segment_sessions(&events, &vocab, 300).unwrap();
        let mut next = 0;
        let ours: Vec<Vec<usize>> = sessions
            .iter()
            .map(|s| {
                let ids: Vec<usize> = (next..next + s.events.len()).collect();
                next += s.events.len();
                ids
            })
            .collect();
        assert_eq!(ours, reference_partition(&events, 300));
    }
}

#[test]
fn idle_gap_example() {
    let events = vec![ev("u", 0, "a"), ev("u", 120, "b"), ev("u", 500, "c")];
    let vocab = Vocab::from_events(&events);
    let sessions = segment_sessions(&events, &vocab, 300).unwrap();
    assert_eq!(sessions.len(), 2);
    assert_eq!(sessions[0].events.len(), 2);
}

fn session_of(n: usize) -> Session {
    Session {
        user: 0,
        events: (0..n).map(|i| (i + 1, i as f64)).collect(),
        timestamps: (0..n as i64).map(|i| i * 10).collect(),
        end_hour: 0,
    }
}

#[test]
fn windowing_counts_and_padding() {
    let samples = windowize(&[session_of(7)], 5);
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[1].apps, vec![2, 3, 4, 5, 6]);
    assert_eq!(samples[1].label, 7);

    let samples = windowize(&[session_of(3)], 5);
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0].apps, vec![PAD_APP, PAD_APP, PAD_APP, PAD_APP, 1]);
    assert_eq!(samples[0].durations, vec![0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(samples[1].apps, vec![PAD_APP, PAD_APP, PAD_APP, 1, 2]);

    assert!(windowize(&[session_of(1)], 5).is_empty());
    for s in windowize(&[session_of(9), session_of(2)], 4) {
        assert_eq!(s.apps.len(), 4);
        assert!(s.label >= 1);
    }
}

#[test]
fn standard_split_is_per_user_chronological() {
    let b = synth_bundle(SplitProtocol::Standard, 3, 4);
    for u in 0..b.n_users() {
        let max_train = b.train.iter().filter(|s| s.user == u).map(|s| s.timestamp).max();
        let min_val = b.validation.iter().filter(|s| s.user == u).map(|s| s.timestamp).min();
        let min_test = b.test.iter().filter(|s| s.user == u).map(|s| s.timestamp).min();
        if let (Some(a), Some(t)) = (max_train, min_test) {
            assert!(a <= t, "user {u}");
        }
        if let (Some(v), Some(t)) = (min_val, min_test) {
            assert!(v <= t);
        }
    }
    // Every evaluation label is known from training.
    let seen: BTreeSet<usize> = b.train.iter().map(|s| s.label).chain(b.train.iter().flat_map(|s| s.apps.clone())).collect();
    assert!(b.test.iter().all(|s| seen.contains(&s.label)));
}

#[test]
fn cold_start_users_are_disjoint() {
    let b = synth_bundle(SplitProtocol::ColdStart { train_user_fraction: 0.75 }, 2, 5);
    let train: BTreeSet<usize> = b.train.iter().chain(&b.validation).map(|s| s.user).collect();
    let test: BTreeSet<usize> = b.test.iter().map(|s| s.user).collect();
    assert!(!test.is_empty());
    assert!(train.is_disjoint(&test));
    assert_eq!(b.meta("user_agnostic"), Some("true"));
}

#[test]
fn time_split_tests_only_day_seven() {
    let b = synth_bundle(SplitProtocol::TimeBased, 9, 6);
    let origin: i64 = b.meta("day_origin").unwrap().parse().unwrap();
    let day = |t: i64| (t - origin).div_euclid(SECONDS_PER_DAY);
    assert!(!b.test.is_empty());
    assert!(b.test.iter().all(|s| day(s.timestamp) == 6));
    assert!(b.train.iter().chain(&b.validation).all(|s| day(s.timestamp) < 6));
    let short = synth_bundle(SplitProtocol::Standard, 3, 6);
    let samples: Vec<Sample> = short.train.into_iter().chain(short.test).collect();
    assert!(split_time_based(samples, short.vocab, 5).is_err());
}

#[test]
fn normalisation_fits_training_windows() {
    let b = synth_bundle(SplitProtocol::Standard, 3, 7);
    let norm = b.norm.expect("prepare normalises");
    let vals: Vec<f64> =
        b.train.iter().flat_map(|s| s.apps.iter().zip(&s.durations).filter(|(a, _)| **a != PAD_APP).map(|(_, d)| *d)).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    assert!(mean.abs() < 1e-9, "{mean}");
    assert!((var.sqrt() - 1.0).abs() < 1e-6 || norm.zero_variance);
    for s in b.train.iter().chain(&b.test) {
        for (a, d) in s.apps.iter().zip(&s.durations) {
            if *a == PAD_APP {
                assert_eq!(*d, 0.0);
            }
        }
    }
}

#[test]
fn bundle_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth_bundle(SplitProtocol::Standard, 2, 8);
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_bundle(&p1, &b).unwrap();
    let back = read_bundle(&p1).unwrap();
    assert_eq!(back, b);
    write_bundle(&p2, &synth_bundle(SplitProtocol::Standard, 2, 8)).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(summary(&b).contains("protocol: standard"));
}

#[test]
fn corrupted_bundle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.jsonl");
    write_bundle(&p, &synth_bundle(SplitProtocol::Standard, 2, 9)).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    std::fs::write(&p, truncated).unwrap();
    assert!(read_bundle(&p).is_err());
}
