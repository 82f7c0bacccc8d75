//! Top-K ranking metrics, model evaluation, per-hour gate reports and the
//! category-overlap case study.
//!
//! Rankings order apps by descending score with ties broken by ascending app
//! index. The padding index never appears in a ranking. A truth outside the
//! top K contributes 0 to every metric.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Sample, PAD_APP};
use crate::error::{Error, Result};
use crate::model::{forward, Bound, ModelConfig, TgtParameters};
use crate::rng::Rng;
use crate::synth::HOURS;

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Eval("K must be at least 1".into()));
    }
    Ok(())
}

/// 1-based position of `truth` in `ranked`.
fn position(ranked: &[usize], truth: usize) -> Option<usize> {
    ranked.iter().position(|&a| a == truth).map(|i| i + 1)
}

pub fn hr_at_k(ranked: &[usize], truth: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match position(ranked, truth) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

pub fn mrr_at_k(ranked: &[usize], truth: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match position(ranked, truth) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    })
}

/// Single-relevant NDCG: `1 / log2(rank + 1)` inside the top K.
pub fn ndcg_at_k(ranked: &[usize], truth: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match position(ranked, truth) {
        Some(r) if r <= k => 1.0 / (r as f64 + 1.0).log2(),
        _ => 0.0,
    })
}

/// Graded NDCG with gain `2^rel − 1`. `relevance[a]` is app `a`'s grade;
/// missing entries count as 0. Returns 0 when nothing is relevant.
pub fn ndcg_graded(ranked: &[usize], relevance: &[f64], k: usize) -> Result<f64> {
    check_k(k)?;
    let gain = |rel: f64| rel.exp2() - 1.0;
    let rel = |a: usize| relevance.get(a).copied().unwrap_or(0.0);
    let dcg: f64 = ranked.iter().take(k).enumerate().map(|(i, &a)| gain(rel(a)) / (i as f64 + 2.0).log2()).sum();
    let mut ideal: Vec<f64> = relevance.iter().copied().filter(|&r| r > 0.0).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &r)| gain(r) / (i as f64 + 2.0).log2()).sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Real apps (index ≥ 1) by descending score, ties by ascending index.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&a| a != PAD_APP).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of `truth` under [`rank_scores`] without sorting.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    1 + (0..scores.len())
        .filter(|&a| a != PAD_APP && a != truth && (scores[a] > t || (scores[a] == t && a < truth)))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub hr: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// What produced the rankings, e.g. `tgt`, `mfu`.
    pub model: String,
    pub fingerprint: String,
    pub seed: Option<u64>,
    pub split: String,
    pub n_samples: usize,
    pub metrics: Vec<KMetrics>,
    pub notes: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn get(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.get(k).map(|m| m.hr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn standard_notes() -> Vec<(String, String)> {
    vec![
        ("ties".into(), "ascending app index".into()),
        ("padding".into(), "excluded from rankings".into()),
        ("outside_top_k".into(), "contributes 0".into()),
    ]
}

fn check_ks(ks: &[usize], n_real: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Eval("no K values given".into()));
    }
    for &k in ks {
        check_k(k)?;
        if k > n_real {
            return Err(Error::Eval(format!("K = {k} exceeds the {n_real} rankable apps")));
        }
    }
    Ok(())
}

/// Average metrics over samples given each sample's 1-based truth rank
/// (`None` when the truth is not ranked at all).
fn aggregate(ranks: &[Option<usize>], ks: &[usize]) -> Vec<KMetrics> {
    let n = ranks.len() as f64;
    ks.iter()
        .map(|&k| {
            let (mut hr, mut mrr, mut ndcg) = (0.0, 0.0, 0.0);
            for r in ranks.iter().flatten().filter(|&&r| r <= k) {
                hr += 1.0;
                mrr += 1.0 / *r as f64;
                ndcg += 1.0 / (*r as f64 + 1.0).log2();
            }
            KMetrics { k, hr: hr / n, mrr: mrr / n, ndcg: ndcg / n }
        })
        .collect()
}

/// Metrics from explicit ranked lists, one per truth.
pub fn score_rankings(rankings: &[Vec<usize>], truths: &[usize], ks: &[usize]) -> Result<Vec<KMetrics>> {
    if rankings.is_empty() || rankings.len() != truths.len() {
        return Err(Error::Eval("need one ranking per truth and at least one sample".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    let ranks: Vec<Option<usize>> = rankings.iter().zip(truths).map(|(r, &t)| position(r, t)).collect();
    Ok(aggregate(&ranks, ks))
}

/// Metrics from a `[n, C]` score matrix.
pub fn score_matrix(scores: &[f64], n_apps: usize, truths: &[usize], ks: &[usize]) -> Result<Vec<KMetrics>> {
    if truths.is_empty() || scores.len() != truths.len() * n_apps {
        return Err(Error::Eval("score matrix does not match the sample count".into()));
    }
    check_ks(ks, n_apps - 1)?;
    let ranks: Vec<Option<usize>> = scores.chunks(n_apps).zip(truths).map(|(row, &t)| Some(rank_of(row, t))).collect();
    Ok(aggregate(&ranks, ks))
}

/// Evaluate a trained model without dropout. The split tag and seed are
/// left for the caller to fill.
pub fn evaluate(params: &TgtParameters, config: &ModelConfig, samples: &[Sample], ks: &[usize]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    let probs = crate::model::predict_probs(params, config, samples)?;
    let truths: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(MetricsReport {
        model: "tgt".into(),
        fingerprint: config.fingerprint(),
        seed: None,
        split: String::new(),
        n_samples: samples.len(),
        metrics: score_matrix(&probs.data, config.n_apps, &truths, ks)?,
        notes: standard_notes(),
    })
}

/// Mean gate per sample hour.
#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub width: usize,
    /// `None` for hours without samples.
    pub rows: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
    pub fingerprint: String,
    pub seed: Option<u64>,
}

impl GateReport {
    /// Mean over gate components per hour.
    pub fn scalar(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64)).collect()
    }

    /// Present hours by descending scalar gate, ties by ascending hour.
    pub fn top_hours(&self, n: usize) -> Vec<usize> {
        let s = self.scalar();
        let mut hours: Vec<usize> = (0..HOURS).filter(|&h| s[h].is_some()).collect();
        hours.sort_by(|&a, &b| s[b].unwrap().total_cmp(&s[a].unwrap()).then(a.cmp(&b)));
        hours.truncate(n);
        hours
    }

    /// One row per hour: `hour,count,scalar,g0,…`. Absent hours leave the
    /// value cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# fingerprint={} seed={}\n", self.fingerprint, self.seed.map_or("none".into(), |s| s.to_string()));
        out.push_str("hour,count,scalar");
        for i in 0..self.width {
            out.push_str(&format!(",g{i}"));
        }
        out.push('\n');
        let scalar = self.scalar();
        for h in 0..HOURS {
            out.push_str(&format!("{h},{}", self.counts[h]));
            match &self.rows[h] {
                Some(row) => {
                    out.push_str(&format!(",{}", scalar[h].unwrap()));
                    for v in row {
                        out.push_str(&format!(",{v}"));
                    }
                }
                None => out.push_str(&",".repeat(self.width + 1)),
            }
            out.push('\n');
        }
        out
    }
}

/// Run traced forward passes and average the gate by sample hour.
pub fn gate_report(params: &TgtParameters, config: &ModelConfig, samples: &[Sample]) -> Result<GateReport> {
    if !config.use_gating {
        return Err(Error::Eval("gate report needs a model with gating enabled".into()));
    }
    let width = config.d_model();
    let mut sums = vec![vec![0.0; width]; HOURS];
    let mut counts = vec![0usize; HOURS];
    let mut rng = Rng::new(0);
    for chunk in samples.chunks(1024) {
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, params, false)?;
        let out = forward(&mut tape, &b, config, chunk, &mut rng, false)?;
        let gates = out.trace(&tape).gates.expect("gating enabled");
        for (s, g) in chunk.iter().zip(gates) {
            let h = s.hour as usize;
            counts[h] += 1;
            sums[h].iter_mut().zip(&g).for_each(|(acc, v)| *acc += v);
        }
    }
    let rows = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &c)| (c > 0).then(|| row.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    Ok(GateReport { width, rows, counts, fingerprint: config.fingerprint(), seed: None })
}

/// App id to category, read from a two-column CSV (`app_id,category`,
/// header optional).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryMap {
    map: BTreeMap<String, String>,
}

impl CategoryMap {
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        Self { map: pairs.into_iter().collect() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if rec.len() != 2 {
                return Err(Error::Parse { path: path.into(), line: i as u64 + 1, message: "expected app_id,category".into() });
            }
            if i == 0 && rec[0].eq_ignore_ascii_case("app_id") {
                continue;
            }
            map.insert(rec[0].to_string(), rec[1].to_string());
        }
        Ok(Self { map })
    }

    pub fn category(&self, app: &str) -> Result<&str> {
        self.map.get(app).map(String::as_str).ok_or_else(|| Error::Eval(format!("no category for app {app:?}")))
    }

    pub fn categories<'a, I: IntoIterator<Item = &'a str>>(&self, apps: I) -> Result<BTreeSet<String>> {
        apps.into_iter().map(|a| self.category(a).map(str::to_string)).collect()
    }
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard_case(top: &BTreeSet<String>, recent: &BTreeSet<String>) -> f64 {
    let union = top.union(recent).count();
    if union == 0 {
        return 1.0;
    }
    top.intersection(recent).count() as f64 / union as f64
}
