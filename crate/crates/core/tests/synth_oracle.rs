use tgt_core::config::KeyValues;
use tgt_core::data::{hour_of_day, UsageEvent, DEFAULT_IDLE_GAP};
use tgt_core::rng::Rng;
use tgt_core::synth::*;

fn app(e: &UsageEvent) -> usize {
    e.app_id.trim_start_matches("app").parse().unwrap()
}

/// Consecutive same-session pairs `(prev, hour of prev, gap, next)`.
fn labelled(events: &[UsageEvent], idle_gap: i64) -> Vec<(usize, usize, usize, usize)> {
    events
        .windows(2)
        .filter(|w| w[0].user_id == w[1].user_id && w[1].timestamp - w[0].timestamp <= idle_gap)
        .map(|w| {
            let gap = (w[1].timestamp - w[0].timestamp) as usize;
            (app(&w[0]), hour_of_day(w[0].timestamp) as usize, gap, app(&w[1]))
        })
        .collect()
}

fn random_rows(rng: &mut Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..cols).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn one_hot_hours_fix_every_app() {
    let mut c = SynthConfig::new(4, 5, 3, 1);
    c.mix_weight = 0.0;
    c.hour_profiles = one_hot_hours(5);
    let events = generate(&c).unwrap();
    assert!(events.len() > 100);
    // A session's first app follows its own hour, later apps the hour of
    // the event before them.
    for (i, e) in events.iter().enumerate() {
        let anchor = match i.checked_sub(1).map(|j| &events[j]) {
            Some(p) if p.user_id == e.user_id && e.timestamp - p.timestamp <= c.idle_gap => p,
            _ => e,
        };
        assert_eq!(app(e), hour_of_day(anchor.timestamp) as usize % 5);
    }
    assert!((bayes_hr1(&c).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_four_apps_bayes_quarter() {
    let mut c = SynthConfig::new(1, 4, 1, 0);
    c.mix_weight = 0.0;
    assert!((bayes_hr1(&c).unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn pure_markov_counts_match_transition() {
    let mut rng = Rng::new(3);
    let n = 4;
    let mut c = SynthConfig::new(20, n, 130, 11);
    c.mix_weight = 1.0;
    c.transition = random_rows(&mut rng, n, n);
    let events = generate(&c).unwrap();
    assert!(events.len() >= 100_000, "{}", events.len());
    // λ = 1 chains continue across sessions, so use every consecutive pair.
    let mut counts = vec![vec![0.0; n]; n];
    for w in events.windows(2).filter(|w| w[0].user_id == w[1].user_id) {
        counts[app(&w[0])][app(&w[1])] += 1.0;
    }
    for (p, row) in counts.iter().enumerate() {
        let total: f64 = row.iter().sum();
        for a in 0..n {
            assert!((row[a] / total - c.transition[p][a]).abs() <= 0.02, "T[{p}][{a}]");
        }
    }
}

#[test]
fn hour_marginals_converge() {
    let mut rng = Rng::new(4);
    let n = 8;
    let mut c = SynthConfig::new(25, n, 110, 12);
    c.mix_weight = 0.0;
    c.hour_profiles = random_rows(&mut rng, HOURS, n);
    let events = generate(&c).unwrap();
    assert!(events.len() >= 100_000);
    let mut counts = vec![vec![0.0; n]; HOURS];
    for e in &events {
        counts[hour_of_day(e.timestamp) as usize][app(e)] += 1.0;
    }
    for h in 0..HOURS {
        let total: f64 = counts[h].iter().sum();
        let tv: f64 = (0..n).map(|a| (counts[h][a] / total - c.hour_profiles[h][a]).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.03, "hour {h}: {tv}");
    }
}

#[test]
fn seed_determinism() {
    let c = SynthConfig::gating_benchmark(5);
    assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
    let mut other = c.clone();
    other.seed = 6;
    assert_ne!(generate(&c).unwrap(), generate(&other).unwrap());
}

/// Empirical accuracy of the Bayes rule on simulated labelled events.
fn simulated_bayes(c: &SynthConfig) -> f64 {
    let events = generate(c).unwrap();
    let pairs = labelled(&events, c.idle_gap);
    let pmf: Vec<Vec<f64>> = (0..c.n_apps).map(|a| c.gap_pmf(a)).collect();
    let hits = pairs
        .iter()
        .filter(|&&(p, h, d, y)| {
            let law = c.next_app_law(Some(p), h);
            let score: Vec<f64> = (0..c.n_apps).map(|a| law[a] * pmf[a][d - 1]).collect();
            let best = (0..c.n_apps).fold(0, |b, a| if score[a] > score[b] { a } else { b });
            best == y
        })
        .count();
    hits as f64 / pairs.len() as f64
}

#[test]
fn bayes_matches_simulation_mixed() {
    let mut rng = Rng::new(5);
    let n = 6;
    let mut c = SynthConfig::new(40, n, 40, 13);
    c.mix_weight = 0.4;
    c.transition = random_rows(&mut rng, n, n);
    c.hour_profiles = random_rows(&mut rng, HOURS, n);
    c.between_gap_mean = 300.0;
    let exact = bayes_hr1(&c).unwrap();
    let sim = simulated_bayes(&c);
    assert!((exact - sim).abs() <= 0.01, "exact {exact} simulated {sim}");
}

#[test]
fn bayes_matches_simulation_with_gap_scales() {
    let mut rng = Rng::new(8);
    let n = 5;
    let mut c = SynthConfig::new(40, n, 40, 17);
    c.mix_weight = 0.5;
    c.transition = random_rows(&mut rng, n, n);
    c.hour_profiles = random_rows(&mut rng, HOURS, n);
    c.gap_scale = Some(vec![0.3, 0.3, 1.0, 3.0, 3.0]);
    let exact = bayes_hr1(&c).unwrap();
    let sim = simulated_bayes(&c);
    assert!((exact - sim).abs() <= 0.01, "exact {exact} simulated {sim}");
    let blind = oracle_hr1(&c, Observed { prev: true, hour: true, duration: false }).unwrap();
    assert!(blind < exact - 0.01, "{blind} {exact}");
}

#[test]
fn uniform_gap_scales_leave_bayes_unchanged() {
    let mut rng = Rng::new(9);
    let n = 4;
    let mut c = SynthConfig::new(3, n, 3, 1);
    c.transition = random_rows(&mut rng, n, n);
    c.hour_profiles = random_rows(&mut rng, HOURS, n);
    let plain = bayes_hr1(&c).unwrap();
    c.gap_scale = Some(vec![2.0; n]);
    assert_eq!(bayes_hr1(&c).unwrap(), plain);
    // Reference: the closed form over hour-weighted stationary labels.
    let mut reference = 0.0;
    for (h, row) in c.label_weights() {
        for (p, &w) in row.iter().enumerate() {
            let law = c.next_app_law(Some(p), h);
            reference += w * law.iter().copied().fold(0.0, f64::max);
        }
    }
    assert!((plain - reference).abs() < 1e-12);
}

#[test]
fn oracles_are_ordered() {
    let c = SynthConfig::gating_benchmark(4);
    let o = |prev, hour, duration| oracle_hr1(&c, Observed { prev, hour, duration }).unwrap();
    let full = o(true, true, true);
    for (p, h, d) in [(false, true, true), (true, false, true), (true, true, false), (false, false, false)] {
        assert!(o(p, h, d) <= full + 1e-12);
    }
    assert!(o(false, false, false) <= o(true, false, false) + 1e-12);
}

#[test]
fn bayes_matches_simulation_gating_benchmark() {
    let c = SynthConfig::gating_benchmark(2);
    let exact = bayes_hr1(&c).unwrap();
    let sim = simulated_bayes(&c);
    assert!((exact - sim).abs() <= 0.01, "exact {exact} simulated {sim}");
}

#[test]
fn label_frequencies_match_simulation() {
    let c = SynthConfig::gating_benchmark(3);
    let freq = app_frequencies(&c);
    assert!((freq.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let pairs = labelled(&generate(&c).unwrap(), c.idle_gap);
    let mut counts = vec![0.0; c.n_apps];
    for &(_, _, _, y) in &pairs {
        counts[y] += 1.0;
    }
    for a in 0..c.n_apps {
        assert!((counts[a] / pairs.len() as f64 - freq[a]).abs() < 0.01, "app {a}");
    }
}

#[test]
fn gating_benchmark_shape() {
    let c = SynthConfig::gating_benchmark(1);
    c.validate().unwrap();
    assert_eq!((c.n_users, c.n_apps, c.mix_weight), (50, 20, 0.3));
    let events = generate(&c).unwrap();
    assert!((45_000..55_000).contains(&events.len()), "{}", events.len());
    let mut peaks: Vec<usize> = (0..HOURS).collect();
    peaks.sort_by(|&a, &b| c.hour_activity[b].total_cmp(&c.hour_activity[a]));
    assert_eq!(&peaks[..2], &[10, 16]);
    // Hour-dominant apps always end their session, so they never precede a label.
    let pairs = labelled(&events, DEFAULT_IDLE_GAP);
    assert!(pairs.iter().all(|&(p, _, _, _)| p >= 4));
    // Each input carries information the others cannot replace.
    let o = |prev, hour, duration| oracle_hr1(&c, Observed { prev, hour, duration }).unwrap();
    let bayes = o(true, true, true);
    assert!(o(true, false, true) <= bayes - 0.05);
    assert!(o(true, true, false) <= bayes - 0.05);
    assert!(o(false, true, true) < o(true, true, false));
}

#[test]
fn gaps_stay_inside_sessions() {
    let mut c = SynthConfig::new(5, 4, 3, 9);
    c.gap_scale = Some(vec![1.0, 2.0, 10.0, 0.5]);
    let events = generate(&c).unwrap();
    for w in events.windows(2).filter(|w| w[0].user_id == w[1].user_id) {
        let gap = w[1].timestamp - w[0].timestamp;
        assert!(gap >= 1);
        let d = w[0].duration.unwrap();
        assert!((1.0..=c.idle_gap as f64).contains(&d));
        if gap <= c.idle_gap {
            assert_eq!(gap as f64, d);
        }
    }
}

#[test]
fn invalid_configs_rejected() {
    let mut c = SynthConfig::new(2, 3, 1, 0);
    c.break_prob = Some(vec![0.5, 0.5]);
    assert!(c.validate().is_err());
    let mut c = SynthConfig::new(2, 3, 1, 0);
    c.session_break_prob = 0.0;
    assert!(c.validate().is_err());
    let mut c = SynthConfig::new(2, 3, 1, 0);
    c.hour_activity = [0.0; HOURS];
    assert!(c.validate().is_err());
}

#[test]
fn key_value_extensions_parse() {
    let text = "n_users = 2\nn_apps = 3\nbreak_prob = 1, 0.2, 0.2\ngap_scale = 1,1,3\nhour_activity = 1,1,1,1,1,1,1,1,1,1,5,1,1,1,1,1,5,1,1,1,1,1,1,1\n";
    let kv = KeyValues::parse(text, std::path::Path::new("s.txt")).unwrap();
    let c = SynthConfig::from_key_values(&kv).unwrap();
    assert_eq!(c.break_prob, Some(vec![1.0, 0.2, 0.2]));
    assert_eq!(c.hour_activity[10], 5.0);
    let bad = KeyValues::parse("n_apps = 3\nhour_activity = 1,2\n", std::path::Path::new("s.txt")).unwrap();
    assert!(SynthConfig::from_key_values(&bad).is_err());
}

#[test]
fn key_values_round_trip_and_preset() {
    let c = SynthConfig::gating_benchmark(4);
    let back = SynthConfig::from_key_values(&c.to_key_values()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.fingerprint(), c.fingerprint());
    let kv = KeyValues::parse("preset = gating\nseed = 4\n", std::path::Path::new("p.txt")).unwrap();
    assert_eq!(SynthConfig::from_key_values(&kv).unwrap(), c);
    let kv = KeyValues::parse("preset = gating\ndays = 3\n", std::path::Path::new("p.txt")).unwrap();
    assert_eq!(SynthConfig::from_key_values(&kv).unwrap().days, 3);
    let kv = KeyValues::parse("n_user = 3\n", std::path::Path::new("p.txt")).unwrap();
    assert!(SynthConfig::from_key_values(&kv).is_err());
    let mut other = c.clone();
    other.seed = 5;
    assert_ne!(other.fingerprint(), c.fingerprint());
}
