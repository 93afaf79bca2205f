//! Multichannel record container and its on-disk directory format.
//!
//! A record directory holds `record.json` (header), one raw little-endian
//! `f32` payload per channel and `annotations.jsonl`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Length of a clinical scoring epoch in seconds.
pub const EPOCH_S: f64 = 30.0;

const TIME_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventLabel {
    W,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
    #[serde(rename = "arousal")]
    Arousal,
    #[serde(rename = "apnea")]
    Apnea,
    #[serde(rename = "hypopnea")]
    Hypopnea,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventFamily {
    Stage,
    Arousal,
    Respiratory,
}

impl EventLabel {
    pub const STAGES: [EventLabel; 5] = [
        EventLabel::W,
        EventLabel::N1,
        EventLabel::N2,
        EventLabel::N3,
        EventLabel::Rem,
    ];

    pub fn family(self) -> EventFamily {
        match self {
            EventLabel::W | EventLabel::N1 | EventLabel::N2 | EventLabel::N3 | EventLabel::Rem => {
                EventFamily::Stage
            }
            EventLabel::Arousal => EventFamily::Arousal,
            EventLabel::Apnea | EventLabel::Hypopnea => EventFamily::Respiratory,
        }
    }

    pub fn is_stage(self) -> bool {
        self.family() == EventFamily::Stage
    }

    /// Position of a stage label in the W, N1, N2, N3, REM order.
    pub fn stage_index(self) -> Option<usize> {
        Self::STAGES.iter().position(|&s| s == self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventLabel::W => "W",
            EventLabel::N1 => "N1",
            EventLabel::N2 => "N2",
            EventLabel::N3 => "N3",
            EventLabel::Rem => "REM",
            EventLabel::Arousal => "arousal",
            EventLabel::Apnea => "apnea",
            EventLabel::Hypopnea => "hypopnea",
        }
    }
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "W" => EventLabel::W,
            "N1" => EventLabel::N1,
            "N2" => EventLabel::N2,
            "N3" => EventLabel::N3,
            "REM" => EventLabel::Rem,
            "arousal" => EventLabel::Arousal,
            "apnea" => EventLabel::Apnea,
            "hypopnea" => EventLabel::Hypopnea,
            other => return Err(invalid!("unknown label {other:?}")),
        })
    }
}

/// A scored interval. Decoded detections carry a confidence, expert
/// annotations do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset_s: f64,
    pub duration_s: f64,
    pub label: EventLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Annotation {
    pub fn new(onset_s: f64, duration_s: f64, label: EventLabel) -> Self {
        Annotation {
            onset_s,
            duration_s,
            label,
            confidence: None,
        }
    }

    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }

    pub fn validate(&self, record_duration_s: f64) -> Result<()> {
        if !(self.onset_s.is_finite() && self.duration_s.is_finite()) {
            return Err(invalid!("non-finite annotation time"));
        }
        if self.duration_s <= 0.0 {
            return Err(invalid!(
                "non-positive duration {} for {} at {} s",
                self.duration_s,
                self.label,
                self.onset_s
            ));
        }
        if self.onset_s < 0.0 {
            return Err(invalid!("negative onset {} for {}", self.onset_s, self.label));
        }
        if self.end_s() > record_duration_s + TIME_EPS {
            return Err(invalid!(
                "{} annotation [{}, {}] extends past record end {}",
                self.label,
                self.onset_s,
                self.end_s(),
                record_duration_s
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
}

impl Channel {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub duration_s: f64,
    pub channels: Vec<Channel>,
    pub annotations: Vec<Annotation>,
}

impl Record {
    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Checks the invariants every loaded or generated record must satisfy.
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(invalid!("record {} has non-positive duration", self.id));
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.name.as_str()) {
                return Err(invalid!("duplicate channel {:?}", ch.name));
            }
            if !(ch.sample_rate_hz.is_finite() && ch.sample_rate_hz > 0.0) {
                return Err(invalid!("channel {:?} has non-positive sample rate", ch.name));
            }
            let expected = expected_len(self.duration_s, ch.sample_rate_hz);
            if ch.samples.len() != expected {
                return Err(invalid!(
                    "channel {:?} payload length {} != expected {}",
                    ch.name,
                    ch.samples.len(),
                    expected
                ));
            }
            if let Some(i) = ch.samples.iter().position(|v| !v.is_finite()) {
                return Err(invalid!("channel {:?} has non-finite sample at {i}", ch.name));
            }
        }
        for a in &self.annotations {
            a.validate(self.duration_s)?;
        }
        validate_stage_grid(&self.annotations)
    }

    /// Stage labels per 30 s epoch; `None` where the epoch is unscored.
    pub fn hypnogram(&self) -> Vec<Option<EventLabel>> {
        let n = (self.duration_s / EPOCH_S + TIME_EPS).floor() as usize;
        let mut out = vec![None; n];
        for a in self.annotations.iter().filter(|a| a.label.is_stage()) {
            let idx = (a.onset_s / EPOCH_S).round() as usize;
            if idx < n {
                out[idx] = Some(a.label);
            }
        }
        out
    }
}

/// Stage annotations must sit on the 30 s grid, last exactly one epoch and
/// never overlap. Unscored gaps are allowed.
fn validate_stage_grid(annotations: &[Annotation]) -> Result<()> {
    let mut epochs = HashSet::new();
    for a in annotations.iter().filter(|a| a.label.is_stage()) {
        let idx = (a.onset_s / EPOCH_S).round();
        if (a.onset_s - idx * EPOCH_S).abs() > TIME_EPS || (a.duration_s - EPOCH_S).abs() > TIME_EPS
        {
            return Err(invalid!(
                "stage annotation {} at {} s (duration {}) is not a 30 s grid epoch",
                a.label,
                a.onset_s,
                a.duration_s
            ));
        }
        if !epochs.insert(idx as i64) {
            return Err(invalid!("overlapping stage annotations at {} s", a.onset_s));
        }
    }
    Ok(())
}

pub fn expected_len(duration_s: f64, rate_hz: f64) -> usize {
    (duration_s * rate_hz).round() as usize
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    id: String,
    duration_s: f64,
    channels: Vec<ChannelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChannelEntry {
    name: String,
    sample_rate_hz: f64,
    file: String,
}

fn payload_file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("ch{index:02}_{clean}.f32")
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(invalid!(
            "{} length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn f32_le_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

/// Loads a record directory, validating every invariant of [`Record`].
pub fn load_record(dir: &Path) -> Result<Record> {
    let header_path = dir.join("record.json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::json(header_path.display().to_string(), e))?;

    let mut names = HashSet::new();
    let mut channels = Vec::with_capacity(header.channels.len());
    for entry in &header.channels {
        if !names.insert(entry.name.as_str()) {
            return Err(invalid!("duplicate channel {:?} in header", entry.name));
        }
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(invalid!(
                "missing channel payload {:?} for channel {:?}",
                entry.file,
                entry.name
            ));
        }
        let raw = read_f32_file(&path)?;
        let expected = expected_len(header.duration_s, entry.sample_rate_hz);
        if raw.len() != expected {
            return Err(invalid!(
                "payload length mismatch for channel {:?}: {} samples, expected {}",
                entry.name,
                raw.len(),
                expected
            ));
        }
        if let Some(i) = raw.iter().position(|v| v.is_nan()) {
            return Err(invalid!("NaN sample at index {i} in channel {:?}", entry.name));
        }
        channels.push(Channel {
            name: entry.name.clone(),
            sample_rate_hz: entry.sample_rate_hz,
            samples: raw.into_iter().map(f64::from).collect(),
        });
    }

    let ann_path = dir.join("annotations.jsonl");
    let mut annotations = read_annotations(&ann_path)?;
    annotations.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));

    let record = Record {
        id: header.id,
        duration_s: header.duration_s,
        channels,
        annotations,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Deserialize)]
struct RawAnnotation {
    onset_s: f64,
    duration_s: f64,
    label: String,
    #[serde(default)]
    confidence: Option<f64>,
}

/// Reads a JSON-lines annotation file. Blank lines are skipped.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnnotation = serde_json::from_str(&line)
            .map_err(|e| invalid!("malformed annotation line {}: {e}", lineno + 1))?;
        let label: EventLabel = raw
            .label
            .parse()
            .map_err(|e| invalid!("annotation line {}: {e}", lineno + 1))?;
        out.push(Annotation {
            onset_s: raw.onset_s,
            duration_s: raw.duration_s,
            label,
            confidence: raw.confidence,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        let line = serde_json::to_string(a).map_err(|e| Error::json("annotation", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a record directory. Samples are stored as `f32`.
pub fn save_record(record: &Record, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(record.channels.len());
    for (i, ch) in record.channels.iter().enumerate() {
        let file = payload_file_name(i, &ch.name);
        let path = dir.join(&file);
        let bytes = f32_le_bytes(ch.samples.iter().map(|&v| v as f32));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ChannelEntry {
            name: ch.name.clone(),
            sample_rate_hz: ch.sample_rate_hz,
            file,
        });
    }
    let header = Header {
        id: record.id.clone(),
        duration_s: record.duration_s,
        channels: entries,
    };
    let header_path = dir.join("record.json");
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json("record header", e))?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    write_annotations(&dir.join("annotations.jsonl"), &record.annotations)
}

/// Linear interpolation onto a new rate; the last source value is held past
/// the final source instant.
pub fn resample_channel(ch: &Channel, target_hz: f64) -> Result<Channel> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(invalid!("target rate must be positive, got {target_hz}"));
    }
    if ch.samples.is_empty() {
        return Err(invalid!("cannot resample empty channel {:?}", ch.name));
    }
    if ch.sample_rate_hz == target_hz {
        return Ok(ch.clone());
    }
    let n_out = expected_len(ch.duration_s(), target_hz);
    let src = &ch.samples;
    let last = src.len() - 1;
    let samples = (0..n_out)
        .map(|j| {
            let pos = j as f64 * ch.sample_rate_hz / target_hz;
            let i0 = pos.floor() as usize;
            if i0 >= last {
                return src[last];
            }
            let frac = pos - i0 as f64;
            if frac == 0.0 {
                src[i0]
            } else {
                src[i0] + (src[i0 + 1] - src[i0]) * frac
            }
        })
        .collect();
    Ok(Channel {
        name: ch.name.clone(),
        sample_rate_hz: target_hz,
        samples,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes in place to zero mean and unit population standard
/// deviation. Constant input (up to rounding) becomes all zeros.
pub fn standardize(values: &mut [f64]) {
    let (mean, std) = mean_std(values);
    if std <= 1e-12 * (1.0 + mean.abs()) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

pub fn normalize_channel(ch: &Channel) -> Channel {
    let mut samples = ch.samples.clone();
    standardize(&mut samples);
    Channel {
        name: ch.name.clone(),
        sample_rate_hz: ch.sample_rate_hz,
        samples,
    }
}
