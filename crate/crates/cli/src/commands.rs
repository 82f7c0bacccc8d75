use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tgt_core::baselines::{evaluate_baseline, Baseline};
use tgt_core::config::{fingerprint, KeyValues};
use tgt_core::data::{
    load_events, prepare as prepare_bundle, read_bundle, summary, write_bundle, write_events_csv, FilterThresholds, FormatSpec,
    PrepareConfig, Sample, SplitBundle, SplitProtocol, UsageEvent,
};
use tgt_core::eval::{evaluate as evaluate_model, gate_report, MetricsReport};
use tgt_core::model::{read_checkpoint, write_checkpoint, FeatureEncoding, HourEncoding, ModelConfig, TgtParameters};
use tgt_core::rng::Rng;
use tgt_core::synth::{bayes_hr1, generate, SynthConfig};
use tgt_core::train::{grid_search, train as train_model, TrainConfig, TRAIN_KEYS};
use tgt_core::Error;

use crate::{
    AblateArgs, Axis, BaselineArgs, BaselineKind, DataArgs, EvaluateArgs, Format, GatesArgs, ModelArgs, PrepareArgs, SplitKind,
    SplitName, SweepArgs, SynthArgs, TrainArgs, Variant,
};

pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn make_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// A directory argument resolves to the conventional file inside it.
fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn stamp(fp: &str, seed: u64) -> String {
    format!("# fingerprint={fp} seed={seed}\n")
}

pub fn synth(a: SynthArgs) -> Outcome {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    let config = SynthConfig::from_key_values(&kv)?;
    let events = generate(&config)?;
    let fp = config.fingerprint();
    make_dir(&a.out)?;
    let mut csv = stamp(&fp, config.seed).into_bytes();
    write_events_csv(&mut csv, &events)?;
    write_file(&a.out.join("events.csv"), csv)?;
    let mut oracle = KeyValues::new();
    oracle.set("bayes_hr1", bayes_hr1(&config)?);
    oracle.set("events", events.len());
    oracle.set("fingerprint", &fp);
    oracle.set("seed", config.seed);
    write_file(&a.out.join("oracle.txt"), oracle.render())?;
    write_file(&a.out.join("synth.conf"), config.to_key_values().render())?;
    eprintln!("{} events, bayes HR@1 {:.4}", events.len(), bayes_hr1(&config)?);
    Ok(())
}

fn format_spec(format: Format, mapping: Option<&Path>) -> Result<FormatSpec, Error> {
    let spec = FormatSpec::preset(match format {
        Format::Tsinghua => "tsinghua",
        Format::Lsapp => "lsapp",
        Format::Synth => "synth",
    })?;
    match mapping {
        Some(p) => spec.with_overrides(&KeyValues::load(p)?),
        None => Ok(spec),
    }
}

fn load_data(d: &DataArgs) -> Result<(Vec<UsageEvent>, String), Error> {
    let spec = format_spec(d.format, d.mapping.as_deref())?;
    let mut events = load_events(&d.input, &spec)?;
    if let Some(n) = d.max_rows {
        events.truncate(n);
    }
    let raw = std::fs::read(&d.input).map_err(|e| io_err(&d.input, e))?;
    Ok((events, fingerprint(&String::from_utf8_lossy(&raw))))
}

fn prepare_config(d: &DataArgs, seed: u64) -> PrepareConfig {
    PrepareConfig {
        idle_gap: d.dt,
        window: d.m,
        protocol: match d.split {
            SplitKind::Standard => SplitProtocol::Standard,
            SplitKind::Cold => SplitProtocol::ColdStart { train_user_fraction: d.train_users },
            SplitKind::Time => SplitProtocol::TimeBased,
        },
        thresholds: FilterThresholds { min_user_events: d.min_user_events, min_app_events: d.min_app_events },
        derive_durations: true,
        seed,
    }
}

fn build_bundle(d: &DataArgs, seed: u64) -> Result<SplitBundle, Error> {
    let (events, input_fp) = load_data(d)?;
    let cfg = prepare_config(d, seed);
    let mut bundle = prepare_bundle(events, &cfg)?;
    let canonical = format!(
        "input={input_fp}\nformat={:?}\nsplit={}\ndt={}\nm={}\ntrain_users={}\nmin_user_events={}\nmin_app_events={}\nmax_rows={:?}\nseed={seed}\n",
        d.format,
        cfg.protocol.tag(),
        d.dt,
        d.m,
        d.train_users,
        d.min_user_events,
        d.min_app_events,
        d.max_rows
    );
    bundle.set_meta("fingerprint", fingerprint(&canonical));
    Ok(bundle)
}

pub fn prepare(a: PrepareArgs) -> Outcome {
    let seed = a.seed.unwrap_or(0);
    let bundle = build_bundle(&a.data, seed)?;
    make_dir(&a.out)?;
    write_bundle(&a.out.join("bundle.jsonl"), &bundle)?;
    let text = summary(&bundle);
    write_file(&a.out.join("summary.txt"), &text)?;
    eprint!("{text}");
    Ok(())
}

fn load_bundle(path: &Path) -> Result<SplitBundle, Error> {
    read_bundle(&resolve(path, "bundle.jsonl"))
}

fn bundle_seed(b: &SplitBundle) -> u64 {
    b.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn split_overrides(items: &[String]) -> std::result::Result<(KeyValues, KeyValues), Failure> {
    let (mut model, mut train) = (KeyValues::new(), KeyValues::new());
    for item in items {
        let Some((k, v)) = item.split_once('=') else {
            return Err(Failure::Usage(format!("--set expects KEY=VALUE, got {item:?}")));
        };
        let (k, v) = (k.trim(), v.trim());
        if TRAIN_KEYS.contains(&k) {
            train.set(k, v);
        } else {
            model.set(k, v);
        }
    }
    Ok((model, train))
}

/// Defaults, then files, then command-line overrides.
fn build_configs(bundle: &SplitBundle, m: &ModelArgs) -> std::result::Result<(ModelConfig, TrainConfig), Failure> {
    let mut mc = ModelConfig::new(bundle.n_apps(), bundle.n_users().max(1));
    mc.window = bundle.window;
    mc.user_agnostic = bundle.protocol.is_cold_start();
    let mut tc = TrainConfig::default();
    if let Some(p) = &m.model_config {
        mc.apply(&KeyValues::load(p)?)?;
    }
    if let Some(p) = &m.train_config {
        tc.apply(&KeyValues::load(p)?)?;
    }
    let (mkv, tkv) = split_overrides(&m.overrides)?;
    mc.apply(&mkv)?;
    tc.apply(&tkv)?;
    if let Some(e) = m.max_epochs {
        tc.max_epochs = e;
    }
    if let Some(s) = m.seed {
        tc.seed = s;
    }
    tc.verbose |= m.verbose;
    tc.validate()?;
    Ok((mc, tc))
}

fn run_fingerprint(bundle: &SplitBundle, mc: &ModelConfig, tc: &TrainConfig) -> String {
    fingerprint(&format!(
        "bundle={}\n{}{}",
        bundle.meta("fingerprint").unwrap_or_default(),
        mc.to_key_values().render(),
        tc.to_key_values().render()
    ))
}

fn parse_grid(items: &[String]) -> std::result::Result<Vec<(String, Vec<String>)>, Failure> {
    items
        .iter()
        .map(|item| {
            let (k, vs) =
                item.split_once('=').ok_or_else(|| Failure::Usage(format!("--grid expects KEY=V1,V2,..., got {item:?}")))?;
            let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(Failure::Usage(format!("--grid {k}: no values")));
            }
            Ok((k.trim().to_string(), values))
        })
        .collect()
}

pub fn train(a: TrainArgs) -> Outcome {
    let bundle = load_bundle(&a.bundle)?;
    let (mut mc, mut tc) = build_configs(&bundle, &a.model)?;
    make_dir(&a.out)?;
    if !a.grid.is_empty() {
        let grid = parse_grid(&a.grid)?;
        let result = grid_search(&bundle, &mc, &tc, &grid)?;
        let header = stamp(&run_fingerprint(&bundle, &mc, &tc), tc.seed);
        write_file(&a.out.join("grid.csv"), header + &result.to_csv())?;
        let (mkv, tkv) = split_overrides(
            &result.rows[result.best].settings.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>(),
        )?;
        mc.apply(&mkv)?;
        tc.apply(&tkv)?;
    }
    let (params, report) = train_model(&bundle, &mc, &tc)?;
    let mut meta = KeyValues::new();
    meta.set("seed", tc.seed);
    meta.set("bundle_fingerprint", bundle.meta("fingerprint").unwrap_or_default());
    meta.set("run_fingerprint", run_fingerprint(&bundle, &mc, &tc));
    meta.set("best_epoch", report.best_epoch);
    write_checkpoint(&a.out.join("checkpoint.tgt"), &mc, &params, &meta)?;
    write_file(&a.out.join("train_report.json"), report.to_json()?)?;
    write_file(&a.out.join("model.conf"), mc.to_key_values().render())?;
    write_file(&a.out.join("train.conf"), tc.to_key_values().render())?;
    let best = &report.epochs[report.best_epoch - 1];
    eprintln!(
        "best epoch {} of {}: validation loss {:.5}, HR@1 {:.4}",
        report.best_epoch,
        report.epochs.len(),
        best.validation_loss,
        best.validation_hr1
    );
    Ok(())
}

fn samples_of(bundle: &SplitBundle, on: SplitName) -> &[Sample] {
    match on {
        SplitName::Train => &bundle.train,
        SplitName::Validation => &bundle.validation,
        SplitName::Test => &bundle.test,
    }
}

fn split_label(bundle: &SplitBundle, on: SplitName) -> String {
    let part = match on {
        SplitName::Train => "train",
        SplitName::Validation => "validation",
        SplitName::Test => "test",
    };
    format!("{}/{part}", bundle.protocol.tag())
}

fn load_checkpoint(path: &Path, bundle: &SplitBundle) -> Result<(ModelConfig, TgtParameters, u64), Error> {
    let (mc, params, meta) = read_checkpoint(&resolve(path, "checkpoint.tgt"))?;
    if mc.n_apps != bundle.n_apps() || mc.window != bundle.window {
        return Err(Error::Config(format!(
            "checkpoint expects C={} and M={}, bundle has C={} and M={}",
            mc.n_apps,
            mc.window,
            bundle.n_apps(),
            bundle.window
        )));
    }
    let seed = meta.parse_or("seed", 0u64)?;
    Ok((mc, params, seed))
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let bundle = load_bundle(&a.bundle)?;
    let (mc, params, seed) = load_checkpoint(&a.checkpoint, &bundle)?;
    let mut report = evaluate_model(&params, &mc, samples_of(&bundle, a.on), &a.ks)?;
    report.split = split_label(&bundle, a.on);
    report.seed = Some(seed);
    write_file(&a.out, report.to_json()?)?;
    eprint!("{}", brief(&report));
    Ok(())
}

fn brief(r: &MetricsReport) -> String {
    let mut s = String::new();
    for m in &r.metrics {
        let _ = writeln!(s, "{} @{}: HR {:.4}  MRR {:.4}  NDCG {:.4}", r.model, m.k, m.hr, m.mrr, m.ndcg);
    }
    s
}

fn metric_header(ks: &[usize]) -> String {
    let mut cols = Vec::new();
    for name in ["hr", "mrr", "ndcg"] {
        cols.extend(ks.iter().map(|k| format!("{name}@{k}")));
    }
    cols.join(",")
}

fn metric_cells(r: &MetricsReport) -> String {
    let mut cells = Vec::new();
    cells.extend(r.metrics.iter().map(|m| format!("{:.6}", m.hr)));
    cells.extend(r.metrics.iter().map(|m| format!("{:.6}", m.mrr)));
    cells.extend(r.metrics.iter().map(|m| format!("{:.6}", m.ndcg)));
    cells.join(",")
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::App => "no-app",
        Variant::Duration => "no-duration",
        Variant::User => "no-user",
        Variant::Gating => "no-gating",
        Variant::FeatMlp => "feat-mlp",
        Variant::HourOnehot => "hour-onehot",
    }
}

fn apply_variant(mc: &mut ModelConfig, v: Variant) {
    match v {
        Variant::Full => {}
        Variant::App => mc.use_app = false,
        Variant::Duration => mc.use_duration = false,
        Variant::User => mc.use_user = false,
        Variant::Gating => mc.use_gating = false,
        Variant::FeatMlp => mc.feature_encoding = FeatureEncoding::Mlp,
        Variant::HourOnehot => mc.hour_encoding = HourEncoding::OneHot,
    }
}

/// Train on the bundle and score its test split.
fn fit_and_score(bundle: &SplitBundle, mc: &ModelConfig, tc: &TrainConfig, ks: &[usize]) -> Result<(MetricsReport, usize), Error> {
    let (params, report) = train_model(bundle, mc, tc)?;
    let mut metrics = evaluate_model(&params, mc, &bundle.test, ks)?;
    metrics.split = split_label(bundle, SplitName::Test);
    metrics.seed = Some(tc.seed);
    Ok((metrics, report.best_epoch))
}

pub fn ablate(a: AblateArgs) -> Outcome {
    let bundle = load_bundle(&a.bundle)?;
    let (base, tc) = build_configs(&bundle, &a.model)?;
    make_dir(&a.out)?;
    let mut table = stamp(&run_fingerprint(&bundle, &base, &tc), tc.seed);
    table += &format!("variant,best_epoch,{}\n", metric_header(&a.ks));
    for &v in &a.which {
        let mut mc = base.clone();
        apply_variant(&mut mc, v);
        mc.validate()?;
        let (mut report, best_epoch) = fit_and_score(&bundle, &mc, &tc, &a.ks)?;
        report.model = match v {
            Variant::Full => "tgt".into(),
            _ => format!("tgt-{}", variant_name(v)),
        };
        write_file(&a.out.join(format!("{}.json", variant_name(v))), report.to_json()?)?;
        table += &format!("{},{best_epoch},{}\n", variant_name(v), metric_cells(&report));
        eprint!("{}", brief(&report));
    }
    write_file(&a.out.join("ablation.csv"), table)?;
    Ok(())
}

fn sweep_data(a: &SweepArgs) -> Option<DataArgs> {
    a.input.as_ref().map(|input| DataArgs {
        input: input.clone(),
        format: a.format,
        mapping: a.mapping.clone(),
        split: a.split,
        dt: a.dt,
        m: a.m,
        train_users: a.train_users,
        min_user_events: a.min_user_events,
        min_app_events: a.min_app_events,
        max_rows: a.max_rows,
    })
}

fn parse_value<T: std::str::FromStr>(axis: &str, v: &str) -> std::result::Result<T, Failure> {
    v.parse().map_err(|_| Failure::Usage(format!("--values: {v:?} is not a valid {axis} value")))
}

/// Keep the training (and validation) samples of a seeded `fraction` of all
/// users, drawn from the bundle's training users. The test split is untouched.
fn subsample_train_users(bundle: &SplitBundle, fraction: f64, seed: u64) -> Result<SplitBundle, Error> {
    let mut users: Vec<usize> = bundle.train.iter().map(|s| s.user).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let all = users.len() + bundle.test.iter().map(|s| s.user).collect::<std::collections::BTreeSet<_>>().len();
    let keep = (fraction * all as f64).round() as usize;
    if keep == 0 || keep > users.len() {
        return Err(Error::Config(format!(
            "train fraction {fraction} needs {keep} training users, bundle has {} of {all}",
            users.len()
        )));
    }
    Rng::new(seed).derive_named("train-frac").shuffle(&mut users);
    users.truncate(keep);
    let kept: std::collections::BTreeSet<usize> = users.into_iter().collect();
    let mut b = bundle.clone();
    b.train.retain(|s| kept.contains(&s.user));
    let validation: Vec<Sample> = b.validation.iter().filter(|s| kept.contains(&s.user)).cloned().collect();
    if !validation.is_empty() {
        b.validation = validation;
    }
    b.set_meta("train_users", keep);
    Ok(b)
}

pub fn sweep(a: SweepArgs) -> Outcome {
    let seed = a.model.seed.unwrap_or(0);
    let data = sweep_data(&a);
    let needs_raw = matches!(a.axis, Axis::Seqlen | Axis::Dt | Axis::TrainFrac);
    if needs_raw && data.is_none() {
        return Err(Failure::Usage("this sweep axis re-prepares the data; pass --input".into()));
    }
    let fixed = match (&a.bundle, &data) {
        (Some(p), _) => Some(load_bundle(p)?),
        (None, Some(d)) if !needs_raw => Some(build_bundle(d, seed)?),
        (None, Some(d)) if a.axis == Axis::TrainFrac => {
            let top = a.values.iter().map(|v| parse_value::<f64>("train-frac", v)).collect::<std::result::Result<Vec<_>, _>>()?;
            let max = top.iter().copied().fold(f64::MIN, f64::max);
            let d = DataArgs { split: SplitKind::Cold, train_users: max, ..d.clone() };
            Some(build_bundle(&d, seed)?)
        }
        (None, Some(_)) => None,
        (None, None) => return Err(Failure::Usage("pass --bundle or --input".into())),
    };
    let axis_name = match a.axis {
        Axis::Layers => "layers",
        Axis::Seqlen => "seqlen",
        Axis::Dropout => "dropout",
        Axis::Dt => "dt",
        Axis::TrainFrac => "train-frac",
    };
    let mut rows = String::new();
    let mut fp_parts = String::new();
    let mut seed_used = seed;
    for v in &a.values {
        let bundle = match a.axis {
            Axis::Layers | Axis::Dropout => fixed.clone().expect("bundle loaded"),
            Axis::Seqlen => build_bundle(&DataArgs { m: parse_value(axis_name, v)?, ..data.clone().unwrap() }, seed)?,
            Axis::Dt => build_bundle(&DataArgs { dt: parse_value(axis_name, v)?, ..data.clone().unwrap() }, seed)?,
            Axis::TrainFrac => subsample_train_users(fixed.as_ref().unwrap(), parse_value(axis_name, v)?, seed)?,
        };
        let (mut mc, tc) = build_configs(&bundle, &a.model)?;
        match a.axis {
            Axis::Layers => mc.layers = parse_value(axis_name, v)?,
            Axis::Dropout => mc.dropout = parse_value(axis_name, v)?,
            _ => {}
        }
        mc.validate()?;
        seed_used = tc.seed;
        fp_parts += &run_fingerprint(&bundle, &mc, &tc);
        let (report, best_epoch) = fit_and_score(&bundle, &mc, &tc, &a.ks)?;
        rows += &format!("{v},{},{},{best_epoch},{}\n", bundle.train.len(), bundle.test.len(), metric_cells(&report));
        eprint!("{axis_name}={v}\n{}", brief(&report));
    }
    let mut out = stamp(&fingerprint(&fp_parts), seed_used);
    out += &format!("{axis_name},n_train,n_test,best_epoch,{}\n", metric_header(&a.ks));
    out += &rows;
    write_file(&a.out, out)?;
    Ok(())
}

pub fn gates(a: GatesArgs) -> Outcome {
    let bundle = load_bundle(&a.bundle)?;
    let (mc, params, seed) = load_checkpoint(&a.checkpoint, &bundle)?;
    let mut report = gate_report(&params, &mc, samples_of(&bundle, a.on))?;
    report.seed = Some(seed);
    write_file(&a.out, report.to_csv())?;
    eprintln!("top hours by mean gate: {:?}", report.top_hours(3));
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> Outcome {
    let bundle = load_bundle(&a.bundle)?;
    let which = match a.which {
        BaselineKind::Mfu => Baseline::Mfu,
        BaselineKind::Mru => Baseline::Mru,
    };
    let mut report = evaluate_baseline(which, &bundle, &a.ks)?;
    report.fingerprint = fingerprint(&format!("{}\nbundle={}", which.name(), bundle.meta("fingerprint").unwrap_or_default()));
    report.split = split_label(&bundle, SplitName::Test);
    report.seed = Some(bundle_seed(&bundle));
    let json = report.to_json()?;
    match &a.out {
        Some(p) => {
            write_file(p, json)?;
            eprint!("{}", brief(&report));
        }
        None => print!("{json}"),
    }
    Ok(())
}
