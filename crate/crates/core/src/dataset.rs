//! Windowed training examples built from records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{encode, event_centroid, Assembly, TargetVector, WindowSpan};
use crate::error::{invalid, Error, Result};
use crate::record::{expected_len, resample_channel, Annotation, EventFamily, EventLabel, Record};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Analysis window length in seconds.
    pub window_s: f64,
    /// Context added on each side of the window, in seconds.
    pub context_s: f64,
    pub rate_hz: f64,
    pub assembly: Assembly,
    pub channel_names: Vec<String>,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(assembly: Assembly, channel_names: Vec<String>) -> Self {
        DatasetConfig {
            window_s: 30.0,
            context_s: 60.0,
            rate_hz: 100.0,
            assembly,
            channel_names,
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Samples per channel in one input tensor.
    pub fn input_len(&self) -> usize {
        expected_len(2.0 * self.context_s + self.window_s, self.rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(invalid!("window length must be positive"));
        }
        if !(self.context_s >= 0.0 && self.context_s.is_finite()) {
            return Err(invalid!("context must be non-negative"));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(invalid!("rate must be positive"));
        }
        if self.channel_names.is_empty() {
            return Err(invalid!("at least one input channel is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Row-major `D x L` input tensor.
    pub input: Vec<f32>,
    pub target: TargetVector,
    pub span: WindowSpan,
    pub record_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub epochs: usize,
    /// Windows without a stage label; no example is produced for them.
    pub skipped_epochs: usize,
    /// Same-family events that lost the longest-duration tie-break.
    pub dropped_ties: usize,
    /// Events whose centroid lies in a skipped or partial trailing window.
    pub unowned_events: usize,
}

impl BuildStats {
    fn absorb(&mut self, other: &BuildStats) {
        self.epochs += other.epochs;
        self.skipped_epochs += other.skipped_epochs;
        self.dropped_ties += other.dropped_ties;
        self.unowned_events += other.unowned_events;
    }
}

/// Events assigned to each window after ownership and tie-breaking.
#[derive(Debug, Clone, Default)]
pub struct Ownership {
    pub owned: BTreeMap<usize, Vec<Annotation>>,
    pub dropped_ties: usize,
    pub unowned: usize,
}

/// Assigns every event to the window containing its midpoint. When one
/// window receives several events of the same family the longest wins.
pub fn assign_events(
    annotations: &[Annotation],
    window_s: f64,
    n_windows: usize,
    assembly: Assembly,
) -> Ownership {
    let mut best: BTreeMap<(usize, u8), &Annotation> = BTreeMap::new();
    let mut out = Ownership::default();
    for a in annotations {
        let family = a.label.family();
        if family == EventFamily::Stage || !assembly.includes(family) {
            continue;
        }
        let idx = (event_centroid(a) / window_s).floor();
        if idx < 0.0 || idx as usize >= n_windows {
            out.unowned += 1;
            continue;
        }
        let key = (idx as usize, family as u8);
        match best.get(&key) {
            None => {
                best.insert(key, a);
            }
            Some(cur) => {
                out.dropped_ties += 1;
                let longer = a.duration_s > cur.duration_s
                    || (a.duration_s == cur.duration_s && a.onset_s < cur.onset_s);
                if longer {
                    best.insert(key, a);
                }
            }
        }
    }
    for ((idx, _), a) in best {
        out.owned.entry(idx).or_default().push(a.clone());
    }
    out
}

/// Stage covering the middle of a window, if any.
fn window_stage(annotations: &[Annotation], span: &WindowSpan) -> Option<EventLabel> {
    let mid = (span.start_s + span.end_s) / 2.0;
    annotations
        .iter()
        .find(|a| a.label.is_stage() && mid >= a.onset_s && mid < a.end_s())
        .map(|a| a.label)
}

/// Extracts the `D x L` context window around `span`, zero-padding outside
/// the record and standardizing each row over its non-padded samples.
pub fn extract_input(resampled: &[Vec<f64>], span: &WindowSpan, cfg: &DatasetConfig) -> Vec<f32> {
    let len = cfg.input_len();
    let first = ((span.start_s - cfg.context_s) * cfg.rate_hz).round() as i64;
    let mut out = Vec::with_capacity(resampled.len() * len);
    let mut row = vec![0.0f64; len];
    for samples in resampled {
        let lo = (-first).clamp(0, len as i64) as usize;
        let hi = (samples.len() as i64 - first).clamp(0, len as i64) as usize;
        row.iter_mut().for_each(|v| *v = 0.0);
        if hi > lo {
            let src = (first + lo as i64) as usize;
            row[lo..hi].copy_from_slice(&samples[src..src + (hi - lo)]);
            crate::record::standardize(&mut row[lo..hi]);
        }
        out.extend(row.iter().map(|&v| v as f32));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltExamples {
    pub examples: Vec<Example>,
    pub stats: BuildStats,
}

/// One example per fully covered window that carries a stage label.
pub fn build_examples(record: &Record, cfg: &DatasetConfig) -> Result<BuiltExamples> {
    cfg.validate()?;
    if record.duration_s < cfg.window_s {
        return Err(invalid!(
            "record {} is shorter ({} s) than one window",
            record.id,
            record.duration_s
        ));
    }
    let mut resampled = Vec::with_capacity(cfg.channels());
    for name in &cfg.channel_names {
        let ch = record
            .channel(name)
            .ok_or_else(|| invalid!("record {} has no channel {name:?}", record.id))?;
        resampled.push(resample_channel(ch, cfg.rate_hz)?.samples);
    }

    let n_windows = (record.duration_s / cfg.window_s + 1e-9).floor() as usize;
    let ownership = assign_events(&record.annotations, cfg.window_s, n_windows, cfg.assembly);
    let mut stats = BuildStats {
        epochs: n_windows,
        dropped_ties: ownership.dropped_ties,
        unowned_events: ownership.unowned,
        ..Default::default()
    };
    let mut examples = Vec::with_capacity(n_windows);
    for idx in 0..n_windows {
        let span = WindowSpan::nth(idx, cfg.window_s);
        let owned = ownership.owned.get(&idx).map(Vec::as_slice).unwrap_or(&[]);
        let Some(stage) = window_stage(&record.annotations, &span) else {
            stats.skipped_epochs += 1;
            stats.unowned_events += owned.len();
            continue;
        };
        let target = encode(span, stage, owned, cfg.assembly)?;
        examples.push(Example {
            input: extract_input(&resampled, &span, cfg),
            target,
            span,
            record_id: record.id.clone(),
        });
    }
    if stats.skipped_epochs > 0 {
        log::warn!(
            "record {}: skipped {} unscored windows",
            record.id,
            stats.skipped_epochs
        );
    }
    if stats.dropped_ties > 0 {
        log::warn!(
            "record {}: dropped {} same-family events in favour of longer ones",
            record.id,
            stats.dropped_ties
        );
    }
    Ok(BuiltExamples { examples, stats })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 80/20 test split followed by an 80/20 train/validation split of
/// the remainder.
pub fn split(n_examples: usize, seed: u64) -> Result<SplitSpec> {
    if n_examples < 5 {
        return Err(invalid!("need at least 5 examples to split, got {n_examples}"));
    }
    let mut idx: Vec<usize> = (0..n_examples).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (0.2 * n_examples as f64).round() as usize;
    let rest = n_examples - n_test;
    let n_val = (0.2 * rest as f64).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut validation = idx[n_test..n_test + n_val].to_vec();
    let mut train = idx[n_test + n_val..].to_vec();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(SplitSpec {
        train,
        validation,
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub examples: Vec<Example>,
    pub split: SplitSpec,
    pub stats: BuildStats,
}

impl Dataset {
    /// Builds examples from every record (in order) and splits them with
    /// `config.seed`.
    pub fn build(records: &[Record], config: DatasetConfig) -> Result<Dataset> {
        let built = crate::par::map_collect(records, |r| build_examples(r, &config));
        let mut examples = Vec::new();
        let mut stats = BuildStats::default();
        for b in built {
            let b = b?;
            stats.absorb(&b.stats);
            examples.extend(b.examples);
        }
        let split = split(examples.len(), config.seed)?;
        Ok(Dataset {
            config,
            examples,
            split,
            stats,
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&Example> {
        indices.iter().map(|&i| &self.examples[i]).collect()
    }

    /// SHA-256 over input tensors and targets.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for ex in &self.examples {
            for v in &ex.input {
                h.update(v.to_le_bytes());
            }
            for v in &ex.target.values {
                h.update(v.to_le_bytes());
            }
            h.update(ex.span.start_s.to_le_bytes());
            h.update(ex.record_id.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: DatasetConfig,
    seed: u64,
    examples: usize,
    channels: usize,
    input_len: usize,
    target_len: usize,
    stats: BuildStats,
    content_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetRow {
    index: usize,
    record_id: String,
    span: WindowSpan,
    target: Vec<f64>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: DATASET_FORMAT_VERSION,
        config: ds.config.clone(),
        seed: ds.config.seed,
        examples: ds.examples.len(),
        channels: ds.config.channels(),
        input_len: ds.config.input_len(),
        target_len: ds.config.assembly.len(),
        stats: ds.stats.clone(),
        content_hash: ds.content_hash(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("split.json"), &ds.split)?;

    let inputs_path = dir.join("inputs.f32");
    let file = fs::File::create(&inputs_path).map_err(|e| Error::io(&inputs_path, e))?;
    let mut w = BufWriter::new(file);
    for ex in &ds.examples {
        let bytes = crate::record::f32_le_bytes(ex.input.iter().copied());
        w.write_all(&bytes).map_err(|e| Error::io(&inputs_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&inputs_path, e))?;

    let targets_path = dir.join("targets.jsonl");
    let file = fs::File::create(&targets_path).map_err(|e| Error::io(&targets_path, e))?;
    let mut w = BufWriter::new(file);
    for (index, ex) in ds.examples.iter().enumerate() {
        let row = TargetRow {
            index,
            record_id: ex.record_id.clone(),
            span: ex.span,
            target: ex.target.values.clone(),
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::json("target row", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&targets_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&targets_path, e))
}

/// Loads a dataset directory. When `expected` is given its configuration
/// must match the manifest exactly.
pub fn load_dataset(dir: &Path, expected: Option<&DatasetConfig>) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(Error::Mismatch(format!(
            "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.version
        )));
    }
    let cfg = manifest.config;
    if let Some(exp) = expected {
        if exp.channels() != cfg.channels() {
            return Err(Error::Mismatch(format!(
                "dataset has D={} channels, expected {}",
                cfg.channels(),
                exp.channels()
            )));
        }
        if *exp != cfg {
            return Err(Error::Mismatch("dataset config differs from expected".into()));
        }
    }
    if manifest.channels != cfg.channels()
        || manifest.input_len != cfg.input_len()
        || manifest.target_len != cfg.assembly.len()
    {
        return Err(Error::Mismatch("manifest counts disagree with its config".into()));
    }

    let split: SplitSpec = read_json(&dir.join("split.json"))?;
    let per_example = cfg.channels() * cfg.input_len();
    let raw = crate::record::read_f32_file(&dir.join("inputs.f32"))?;
    if raw.len() != per_example * manifest.examples {
        return Err(Error::Mismatch(format!(
            "inputs.f32 holds {} values, expected {}",
            raw.len(),
            per_example * manifest.examples
        )));
    }

    let targets_path = dir.join("targets.jsonl");
    let file = fs::File::open(&targets_path).map_err(|e| Error::io(&targets_path, e))?;
    let mut examples = Vec::with_capacity(manifest.examples);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&targets_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TargetRow =
            serde_json::from_str(&line).map_err(|e| Error::json(format!("targets.jsonl:{}", i + 1), e))?;
        if row.target.len() != cfg.assembly.len() {
            return Err(Error::Mismatch(format!(
                "target {} has length {}, assembly {} needs {}",
                row.index,
                row.target.len(),
                cfg.assembly,
                cfg.assembly.len()
            )));
        }
        if row.index != examples.len() || row.index >= manifest.examples {
            return Err(Error::Mismatch(format!("unexpected target index {}", row.index)));
        }
        let start = row.index * per_example;
        examples.push(Example {
            input: raw[start..start + per_example].to_vec(),
            target: TargetVector {
                assembly: cfg.assembly,
                values: row.target,
            },
            span: row.span,
            record_id: row.record_id,
        });
    }
    if examples.len() != manifest.examples {
        return Err(Error::Mismatch(format!(
            "targets.jsonl has {} rows, manifest says {}",
            examples.len(),
            manifest.examples
        )));
    }
    let n = examples.len();
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.validation).chain(&split.test) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Mismatch(format!("split index {i} invalid or repeated")));
        }
    }
    Ok(Dataset {
        config: cfg,
        examples,
        split,
        stats: manifest.stats,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{mean_std, Channel};

    fn record(duration_s: f64, annotations: Vec<Annotation>) -> Record {
        let n = (duration_s * 100.0) as usize;
        let mk = |name: &str, k: f64| Channel {
            name: name.into(),
            sample_rate_hz: 100.0,
            samples: (0..n).map(|i| (i as f64 * k).sin() + 0.1 * k).collect(),
        };
        let mut ann: Vec<Annotation> = (0..(duration_s / 30.0) as usize)
            .map(|i| Annotation::new(i as f64 * 30.0, 30.0, EventLabel::N2))
            .collect();
        ann.extend(annotations);
        Record {
            id: "rec".into(),
            duration_s,
            channels: vec![mk("a", 0.05), mk("b", 0.13)],
            annotations: ann,
        }
    }

    fn cfg(assembly: Assembly) -> DatasetConfig {
        DatasetConfig::new(assembly, vec!["a".into(), "b".into()])
    }

    #[test]
    fn tiles_windows() {
        let b = build_examples(&record(90.0, vec![]), &cfg(Assembly::S)).unwrap();
        let spans: Vec<(f64, f64)> = b.examples.iter().map(|e| (e.span.start_s, e.span.end_s)).collect();
        assert_eq!(spans, vec![(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)]);
        assert_eq!(b.examples[0].input.len(), 2 * 15000);
    }

    #[test]
    fn centroid_decides_owner() {
        let r = record(90.0, vec![Annotation::new(29.0, 4.0, EventLabel::Arousal)]);
        let b = build_examples(&r, &cfg(Assembly::SA)).unwrap();
        assert_eq!(b.examples[0].target.values[5], 0.0);
        assert_eq!(b.examples[1].target.values[5], 1.0);
        assert!((b.examples[1].target.values[6] - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn longer_event_wins() {
        let r = record(
            120.0,
            vec![
                Annotation::new(35.0, 20.0, EventLabel::Apnea),
                Annotation::new(27.5, 35.0, EventLabel::Hypopnea),
            ],
        );
        let b = build_examples(&r, &cfg(Assembly::SR)).unwrap();
        let t = &b.examples[1].target.values;
        assert_eq!(t[5], 1.0);
        assert_eq!((t[6], t[7]), (0.0, 1.0));
        assert!((t[9] - 35.0 / 30.0).abs() < 1e-12);
        assert_eq!(b.stats.dropped_ties, 1);
    }

    #[test]
    fn unscored_windows_skipped() {
        let mut r = record(90.0, vec![Annotation::new(40.0, 10.0, EventLabel::Apnea)]);
        r.annotations.retain(|a| a.onset_s != 30.0);
        let b = build_examples(&r, &cfg(Assembly::SR)).unwrap();
        assert_eq!(b.examples.len(), 2);
        assert_eq!(b.stats.skipped_epochs, 1);
        assert_eq!(b.stats.unowned_events, 1);
    }

    #[test]
    fn missing_channel_is_error() {
        let mut c = cfg(Assembly::S);
        c.channel_names.push("zz".into());
        assert!(build_examples(&record(60.0, vec![]), &c).is_err());
        assert!(build_examples(&record(60.0, vec![]), &{
            let mut c = cfg(Assembly::S);
            c.window_s = 90.0;
            c
        })
        .is_err());
    }

    #[test]
    fn rows_standardized_over_valid_part() {
        let b = build_examples(&record(300.0, vec![]), &cfg(Assembly::S)).unwrap();
        for ex in &b.examples {
            let first = ((ex.span.start_s - 60.0) * 100.0) as i64;
            let lo = (-first).max(0) as usize;
            let hi = ((30000 - first).min(15000)) as usize;
            for row in ex.input.chunks(15000) {
                let valid: Vec<f64> = row[lo..hi].iter().map(|&v| f64::from(v)).collect();
                let (m, s) = mean_std(&valid);
                assert!(m.abs() < 1e-6, "{m}");
                assert!((s - 1.0).abs() < 1e-6, "{s}");
                assert!(row[..lo].iter().chain(&row[hi..]).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn split_sizes() {
        let s = split(100, 7).unwrap();
        assert_eq!((s.test.len(), s.validation.len(), s.train.len()), (20, 16, 64));
        assert_eq!(s, split(100, 7).unwrap());
        assert_ne!(s, split(100, 8).unwrap());
        let s = split(5, 1).unwrap();
        assert_eq!((s.test.len(), s.validation.len(), s.train.len()), (1, 1, 3));
        assert!(split(4, 1).is_err());
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_round_trip_and_mismatch() {
        let r = record(300.0, vec![Annotation::new(100.0, 12.0, EventLabel::Apnea)]);
        let ds = Dataset::build(&[r], cfg(Assembly::SAR)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), Some(&ds.config)).unwrap();
        assert_eq!(loaded, ds);

        let mut other = ds.config.clone();
        other.channel_names.pop();
        let err = load_dataset(dir.path(), Some(&other)).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)), "{err}");

        let text = fs::read_to_string(dir.path().join("targets.jsonl")).unwrap();
        let mut rows: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        for r in &mut rows {
            r["target"].as_array_mut().unwrap().truncate(10);
        }
        let body: String = rows.iter().map(|r| r.to_string() + "\n").collect();
        fs::write(dir.path().join("targets.jsonl"), body).unwrap();
        let err = load_dataset(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("length 10"), "{err}");
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let r = record(300.0, vec![Annotation::new(100.0, 12.0, EventLabel::Apnea)]);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&Dataset::build(&[r.clone()], cfg(Assembly::SR)).unwrap(), a.path()).unwrap();
        save_dataset(&Dataset::build(&[r], cfg(Assembly::SR)).unwrap(), b.path()).unwrap();
        for f in ["manifest.json", "inputs.f32", "targets.jsonl", "split.json"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
