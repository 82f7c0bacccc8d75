//! Versioned JSON-lines container for a [`SplitBundle`].
//!
//! Line 1 is a header object (`format`, `version`, protocol, window, idle gap,
//! vocabulary, normalisation, metadata, per-split counts). Every following
//! line is one sample tagged with its split. Serialisation is field-ordered
//! and uses no hash maps, so equal bundles produce identical bytes.

use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DurationNorm, Sample, SplitBundle, SplitProtocol, Vocab, SECONDS_PER_DAY};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT: &str = "tgt-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    protocol: SplitProtocol,
    window: usize,
    idle_gap: i64,
    vocab: Vocab,
    norm: Option<DurationNorm>,
    metadata: Vec<(String, String)>,
    counts: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct Row {
    split: String,
    #[serde(flatten)]
    sample: Sample,
}

pub fn write_bundle(path: &Path, b: &SplitBundle) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        protocol: b.protocol,
        window: b.window,
        idle_gap: b.idle_gap,
        vocab: b.vocab.clone(),
        norm: b.norm,
        metadata: b.metadata.clone(),
        counts: [b.train.len(), b.validation.len(), b.test.len()],
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for (tag, samples) in [("train", &b.train), ("validation", &b.validation), ("test", &b.test)] {
        for s in samples {
            serde_json::to_writer(&mut w, &Row { split: tag.into(), sample: s.clone() })?;
            w.write_all(b"\n").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_bundle(path: &Path) -> Result<SplitBundle> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let first = lines.next().ok_or_else(|| parse_err(1, "empty bundle".into()))?.map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != BUNDLE_FORMAT {
        return Err(parse_err(1, format!("not a bundle (format {:?})", header.format)));
    }
    if header.version != BUNDLE_VERSION {
        return Err(parse_err(1, format!("unsupported bundle version {}", header.version)));
    }
    let mut b = SplitBundle {
        protocol: header.protocol,
        window: header.window,
        idle_gap: header.idle_gap,
        vocab: header.vocab,
        norm: header.norm,
        train: Vec::with_capacity(header.counts[0]),
        validation: Vec::with_capacity(header.counts[1]),
        test: Vec::with_capacity(header.counts[2]),
        metadata: header.metadata,
    };
    for (i, line) in lines.enumerate() {
        let line_no = i as u64 + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let s = row.sample;
        if s.apps.len() != b.window || s.durations.len() != b.window || s.label >= b.vocab.n_apps() {
            return Err(parse_err(line_no, "sample inconsistent with header".into()));
        }
        match row.split.as_str() {
            "train" => b.train.push(s),
            "validation" => b.validation.push(s),
            "test" => b.test.push(s),
            other => return Err(parse_err(line_no, format!("unknown split {other:?}"))),
        }
    }
    let counts = [b.train.len(), b.validation.len(), b.test.len()];
    if counts != header.counts {
        return Err(parse_err(1, format!("header counts {:?} disagree with rows {counts:?}", header.counts)));
    }
    Ok(b)
}

/// Human-readable overview of a bundle.
pub fn summary(b: &SplitBundle) -> String {
    let mut s = String::new();
    let all = || b.train.iter().chain(&b.validation).chain(&b.test);
    let first = all().map(|x| x.timestamp).min();
    let last = all().map(|x| x.timestamp).max();
    let _ = writeln!(s, "protocol: {}", b.protocol.tag());
    if let SplitProtocol::ColdStart { train_user_fraction } = b.protocol {
        let _ = writeln!(s, "train user fraction: {train_user_fraction}");
    }
    let _ = writeln!(s, "window (M): {}", b.window);
    let _ = writeln!(s, "idle gap (s): {}", b.idle_gap);
    let _ = writeln!(s, "apps (C, incl. padding): {}", b.n_apps());
    let _ = writeln!(s, "users (N): {}", b.n_users());
    let _ = writeln!(s, "samples: train {} / validation {} / test {}", b.train.len(), b.validation.len(), b.test.len());
    if let (Some(f), Some(l)) = (first, last) {
        let _ = writeln!(s, "label time span: {f} .. {l} ({:.2} days)", (l - f) as f64 / SECONDS_PER_DAY as f64);
    }
    if let Some(n) = b.norm {
        let _ = writeln!(s, "duration log1p mean {:.6}, std {:.6}{}", n.mean, n.std, if n.zero_variance { " (zero variance)" } else { "" });
    }
    for (k, v) in &b.metadata {
        let _ = writeln!(s, "{k}: {v}");
    }
    s
}
