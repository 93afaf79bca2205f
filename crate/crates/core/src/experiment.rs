//! Pipeline orchestration behind the command-line front end: synthesize,
//! build, train, infer, score, and the ten-experiment grid.
//!
//! Every step reads and writes plain directories so that each can be run on
//! its own. Outputs depend only on inputs and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, postprocess, Assembly, PostprocessConfig, WindowSpan};
use crate::dataset::{
    assign_events, extract_input, load_dataset, read_json, save_dataset, write_json, Dataset,
    DatasetConfig,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::{score_windows, Family, MetricReport, RunMetadata, WindowLabels};
use crate::model::{forward, init_params, load_params, save_params, ModelConfig, ModelParams};
use crate::record::{load_record, resample_channel, Annotation, EventLabel, Record};
use crate::synth::{montage, write_synthetic, SynthConfig};
use crate::trainer::{train, write_trainlog, TrainConfig, TrainLog};

pub const CONFIG_VERSION: u32 = 1;

/// The (D, assembly) pairs of the experiment grid.
pub const GRID: [(usize, Assembly); 10] = [
    (4, Assembly::S),
    (4, Assembly::SA),
    (4, Assembly::SR),
    (4, Assembly::SAR),
    (6, Assembly::SA),
    (6, Assembly::SR),
    (6, Assembly::SAR),
    (8, Assembly::SA),
    (8, Assembly::SR),
    (8, Assembly::SAR),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub records: usize,
    pub duration_s: f64,
    pub arousals_per_hour: f64,
    pub respiratory_per_hour: f64,
    pub apnea_fraction: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let base = SynthConfig::new(0, 8.0 * 3600.0, 8);
        SynthSettings {
            records: 2,
            duration_s: base.duration_s,
            arousals_per_hour: base.arousals_per_hour,
            respiratory_per_hour: base.respiratory_per_hour,
            apnea_fraction: base.apnea_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub window_s: f64,
    pub context_s: f64,
    pub rate_hz: f64,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        DatasetSettings {
            window_s: 30.0,
            context_s: 60.0,
            rate_hz: 100.0,
        }
    }
}

/// Architecture knobs; input shape and head size follow from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub segments: usize,
    pub kernel: usize,
    pub filters: Vec<usize>,
    pub pool_width: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub lstm_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::new(1, Assembly::S);
        ModelSettings {
            segments: m.segments,
            kernel: m.kernel,
            filters: m.filters,
            pool_width: m.pool_width,
            dense_units: m.dense_units,
            dropout_rate: m.dropout_rate,
            lstm_hidden: m.lstm_hidden,
        }
    }
}

/// Experiment manifest, read from a JSON file with a `version` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub synth: SynthSettings,
    pub dataset: DatasetSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub postprocess: PostprocessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            synth: SynthSettings::default(),
            dataset: DatasetSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A desk-scale variant that runs the whole grid in seconds: 10 Hz
    /// inputs, a narrow network and two epochs.
    pub fn small() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.records = 1;
        cfg.synth.duration_s = 40.0 * 30.0;
        cfg.synth.arousals_per_hour = 40.0;
        cfg.synth.respiratory_per_hour = 40.0;
        cfg.dataset.rate_hz = 10.0;
        cfg.model = ModelSettings {
            segments: 5,
            kernel: 10,
            filters: vec![2, 4, 4],
            pool_width: 3,
            dense_units: 8,
            dropout_rate: 0.5,
            lstm_hidden: 8,
        };
        cfg.train.max_epochs = 2;
        cfg.train.batch_size = 10;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(invalid!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.synth.records == 0 {
            return Err(invalid!("at least one synthetic record is required"));
        }
        self.train.validate()
    }

    pub fn synth_config(&self, channels: usize, seed: u64) -> SynthConfig {
        let mut s = SynthConfig::new(seed, self.synth.duration_s, channels);
        s.arousals_per_hour = self.synth.arousals_per_hour;
        s.respiratory_per_hour = self.synth.respiratory_per_hour;
        s.apnea_fraction = self.synth.apnea_fraction;
        s
    }

    pub fn dataset_config(&self, channel_names: Vec<String>, assembly: Assembly) -> DatasetConfig {
        DatasetConfig {
            window_s: self.dataset.window_s,
            context_s: self.dataset.context_s,
            rate_hz: self.dataset.rate_hz,
            assembly,
            channel_names,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, ds: &DatasetConfig) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            channels: ds.channels(),
            input_len: ds.input_len(),
            segments: m.segments,
            kernel: m.kernel,
            filters: m.filters.clone(),
            pool_width: m.pool_width,
            dense_units: m.dense_units,
            dropout_rate: m.dropout_rate,
            lstm_hidden: m.lstm_hidden,
            assembly: ds.assembly,
            seed: self.seed,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `cfg.synth.records` synthetic records under `out/record_NNN`.
/// Record `i` uses seed `seed + i`.
pub fn synth_records(cfg: &ExperimentConfig, channels: usize, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut dirs = Vec::with_capacity(cfg.synth.records);
    for i in 0..cfg.synth.records {
        let dir = out.join(format!("record_{i:03}"));
        write_synthetic(&cfg.synth_config(channels, cfg.seed + i as u64), &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn build_dataset(record_dirs: &[PathBuf], config: DatasetConfig, out: &Path) -> Result<Dataset> {
    let records = record_dirs
        .iter()
        .map(|d| load_record(d))
        .collect::<Result<Vec<Record>>>()?;
    let ds = Dataset::build(&records, config)?;
    save_dataset(&ds, out)?;
    Ok(ds)
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const DATASET_CONFIG_FILE: &str = "dataset_config.json";

/// Trains on the dataset's train split with its validation split for early
/// stopping. Writes the checkpoint, `trainlog.jsonl` and the dataset
/// configuration needed to run inference later.
pub fn train_dataset(ds: &Dataset, cfg: &ExperimentConfig, out: &Path) -> Result<(ModelParams<f32>, TrainLog)> {
    create_dir(out)?;
    let model_cfg = cfg.model_config(&ds.config);
    let init = init_params::<f32>(&model_cfg, cfg.seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.shuffle_seed = cfg.seed;
    let (params, log) = train(
        init,
        &ds.subset(&ds.split.train),
        &ds.subset(&ds.split.validation),
        &train_cfg,
    )?;
    save_params(&params, &[cfg.seed, ds.config.seed], &out.join(CHECKPOINT_FILE))?;
    write_trainlog(&out.join("trainlog.jsonl"), &log)?;
    write_json(&out.join(DATASET_CONFIG_FILE), &ds.config)?;
    Ok((params, log))
}

/// Which dataset examples to run inference on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
    All,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitPart::Train),
            "validation" | "val" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            "all" => Ok(SplitPart::All),
            _ => Err(invalid!("unknown split {s:?}")),
        }
    }
}

fn split_indices(ds: &Dataset, part: SplitPart) -> Vec<usize> {
    match part {
        SplitPart::Train => ds.split.train.clone(),
        SplitPart::Validation => ds.split.validation.clone(),
        SplitPart::Test => ds.split.test.clone(),
        SplitPart::All => (0..ds.examples.len()).collect(),
    }
}

fn is_dataset_dir(dir: &Path) -> bool {
    dir.join("manifest.json").is_file()
}

/// One window of model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowActivation {
    pub record_id: String,
    pub start_s: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypnogramEntry {
    pub record_id: String,
    pub start_s: f64,
    pub stage: EventLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypnogram {
    pub window_s: f64,
    pub assembly: Assembly,
    pub windows: Vec<HypnogramEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub record_id: String,
    #[serde(flatten)]
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub activations: Vec<WindowActivation>,
    pub hypnogram: Hypnogram,
    pub events: Vec<PredictedEvent>,
}

fn load_model(checkpoint: &Path) -> Result<(ModelParams<f32>, DatasetConfig)> {
    let (params, _) = load_params(checkpoint, None)?;
    let cfg_path = checkpoint.with_file_name(DATASET_CONFIG_FILE);
    let ds_cfg: DatasetConfig = read_json(&cfg_path)?;
    check_model_data(&params.config, &ds_cfg)?;
    Ok((params, ds_cfg))
}

fn check_model_data(model: &ModelConfig, ds: &DatasetConfig) -> Result<()> {
    if model.channels != ds.channels() || model.input_len != ds.input_len() || model.assembly != ds.assembly {
        return Err(Error::Mismatch(format!(
            "model expects D={}, L={}, assembly {} but data has D={}, L={}, assembly {}",
            model.channels,
            model.input_len,
            model.assembly,
            ds.channels(),
            ds.input_len(),
            ds.assembly
        )));
    }
    Ok(())
}

/// Runs the model over every full window of a record, scored or not.
fn record_windows(record: &Record, cfg: &DatasetConfig) -> Result<Vec<(WindowSpan, Vec<f32>)>> {
    let mut resampled = Vec::with_capacity(cfg.channels());
    for name in &cfg.channel_names {
        let ch = record
            .channel(name)
            .ok_or_else(|| invalid!("record {} has no channel {name:?}", record.id))?;
        resampled.push(resample_channel(ch, cfg.rate_hz)?.samples);
    }
    let n = (record.duration_s / cfg.window_s + 1e-9).floor() as usize;
    if n == 0 {
        return Err(invalid!("record {} is shorter than one window", record.id));
    }
    Ok((0..n)
        .map(|i| {
            let span = WindowSpan::nth(i, cfg.window_s);
            (span, extract_input(&resampled, &span, cfg))
        })
        .collect())
}

/// Inference on a record directory (every window) or a dataset directory
/// (the examples of `part`).
pub fn infer(
    checkpoint: &Path,
    input: &Path,
    part: SplitPart,
    post: PostprocessConfig,
) -> Result<Inference> {
    let (params, mut ds_cfg) = load_model(checkpoint)?;
    // (record id, span, input, record duration)
    let mut windows: Vec<(String, WindowSpan, Vec<f32>)> = Vec::new();
    let mut durations: BTreeMap<String, f64> = BTreeMap::new();
    if is_dataset_dir(input) {
        let ds = load_dataset(input, None)?;
        check_model_data(&params.config, &ds.config)?;
        ds_cfg = ds.config.clone();
        for i in split_indices(&ds, part) {
            let ex = &ds.examples[i];
            let d = durations.entry(ex.record_id.clone()).or_insert(0.0);
            *d = d.max(ex.span.end_s);
            windows.push((ex.record_id.clone(), ex.span, ex.input.clone()));
        }
    } else {
        let record = load_record(input)?;
        durations.insert(record.id.clone(), record.duration_s);
        for (span, x) in record_windows(&record, &ds_cfg)? {
            windows.push((record.id.clone(), span, x));
        }
    }
    let outputs = crate::par::map_collect(&windows, |(_, _, x)| forward(&params, x));
    let assembly = ds_cfg.assembly;
    let mut activations = Vec::with_capacity(windows.len());
    let mut decoded: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for ((record_id, span, _), out) in windows.iter().zip(outputs) {
        let values: Vec<f64> = out?.iter().map(|&v| f64::from(v)).collect();
        decoded
            .entry(record_id.clone())
            .or_default()
            .push(decode(&values, *span, assembly)?);
        activations.push(WindowActivation {
            record_id: record_id.clone(),
            start_s: span.start_s,
            values,
        });
    }
    let mut hyp = Vec::new();
    let mut events = Vec::new();
    for (record_id, wins) in &decoded {
        let cfg = PostprocessConfig {
            record_duration_s: durations.get(record_id).copied(),
            ..post
        };
        let (evs, stages) = postprocess(wins, &cfg);
        for (w, stage) in wins.iter().zip(stages) {
            hyp.push(HypnogramEntry {
                record_id: record_id.clone(),
                start_s: w.span.start_s,
                stage,
            });
        }
        events.extend(evs.into_iter().map(|annotation| PredictedEvent {
            record_id: record_id.clone(),
            annotation,
        }));
    }
    Ok(Inference {
        activations,
        hypnogram: Hypnogram {
            window_s: ds_cfg.window_s,
            assembly,
            windows: hyp,
        },
        events,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut body = String::new();
    for r in rows {
        body.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e)))
        .collect()
}

pub fn write_inference(inf: &Inference, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_jsonl(&out.join("events.jsonl"), &inf.events)?;
    write_json(&out.join("hypnogram.json"), &inf.hypnogram)?;
    write_jsonl(&out.join("activations.jsonl"), &inf.activations)
}

pub fn read_inference(dir: &Path) -> Result<Inference> {
    let activations_path = dir.join("activations.jsonl");
    Ok(Inference {
        hypnogram: read_json(&dir.join("hypnogram.json"))?,
        events: read_jsonl(&dir.join("events.jsonl"))?,
        activations: if activations_path.is_file() {
            read_jsonl(&activations_path)?
        } else {
            Vec::new()
        },
    })
}

/// Reference windows: record id, span and encoded target.
fn reference_windows(reference: &Path, window_s: f64, assembly: Assembly) -> Result<(Vec<(String, WindowSpan, Vec<f64>)>, String)> {
    if is_dataset_dir(reference) {
        let ds = load_dataset(reference, None)?;
        if ds.config.assembly != assembly {
            return Err(Error::Mismatch(format!(
                "predictions use assembly {} but reference dataset uses {}",
                assembly, ds.config.assembly
            )));
        }
        let hash = ds.content_hash();
        let rows = ds
            .examples
            .into_iter()
            .map(|e| (e.record_id, e.span, e.target.values))
            .collect();
        return Ok((rows, hash));
    }
    let record = load_record(reference)?;
    let n = (record.duration_s / window_s + 1e-9).floor() as usize;
    let owned = assign_events(&record.annotations, window_s, n, assembly).owned;
    let mut rows = Vec::new();
    for i in 0..n {
        let span = WindowSpan::nth(i, window_s);
        let mid = span.start_s + window_s / 2.0;
        let Some(stage) = record
            .annotations
            .iter()
            .find(|a| a.label.is_stage() && mid >= a.onset_s && mid < a.end_s())
            .map(|a| a.label)
        else {
            continue;
        };
        let evs = owned.get(&i).map(Vec::as_slice).unwrap_or(&[]);
        rows.push((record.id.clone(), span, encode(span, stage, evs, assembly)?.values));
    }
    Ok((rows, String::new()))
}

fn window_key(record_id: &str, start_s: f64) -> (String, i64) {
    (record_id.to_string(), (start_s * 1000.0).round() as i64)
}

/// Scores predictions (hypnogram plus cleaned events) against a reference
/// record or dataset. Only reference windows that were predicted are
/// scored when `predicted_only` is set (e.g. a held-out split); otherwise
/// every reference window must have a prediction.
pub fn score(pred: &Inference, reference: &Path, predicted_only: bool, mut metadata: RunMetadata) -> Result<MetricReport> {
    let window_s = pred.hypnogram.window_s;
    let assembly = pred.hypnogram.assembly;
    let (refs, hash) = reference_windows(reference, window_s, assembly)?;

    // Predicted window labels from the hypnogram and midpoint ownership of
    // the cleaned events, per record.
    let mut labels: BTreeMap<(String, i64), WindowLabels> = BTreeMap::new();
    let mut by_record: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for e in &pred.events {
        by_record.entry(&e.record_id).or_default().push(e.annotation.clone());
    }
    let mut hyp_by_record: BTreeMap<&str, Vec<&HypnogramEntry>> = BTreeMap::new();
    for h in &pred.hypnogram.windows {
        hyp_by_record.entry(&h.record_id).or_default().push(h);
    }
    for (rid, entries) in hyp_by_record {
        let n = entries
            .iter()
            .map(|h| (h.start_s / window_s).round() as usize + 1)
            .max()
            .unwrap_or(0);
        let evs = by_record.get(rid).map(Vec::as_slice).unwrap_or(&[]);
        let owned = assign_events(evs, window_s, n, assembly).owned;
        for h in entries {
            let idx = (h.start_s / window_s).round() as usize;
            let win = owned.get(&idx).map(Vec::as_slice).unwrap_or(&[]);
            labels.insert(
                window_key(rid, h.start_s),
                WindowLabels {
                    stage: h.stage,
                    arousal: win.iter().any(|a| a.label == EventLabel::Arousal),
                    respiratory: win
                        .iter()
                        .find(|a| matches!(a.label, EventLabel::Apnea | EventLabel::Hypopnea))
                        .map(|a| a.label),
                },
            );
        }
    }
    let acts: BTreeMap<(String, i64), &Vec<f64>> = pred
        .activations
        .iter()
        .map(|a| (window_key(&a.record_id, a.start_s), &a.values))
        .collect();

    let mut predicted = Vec::new();
    let mut reference_labels = Vec::new();
    let mut pred_acts = Vec::new();
    let mut targets = Vec::new();
    for (rid, span, target) in refs {
        let key = window_key(&rid, span.start_s);
        let Some(p) = labels.get(&key) else {
            if predicted_only {
                continue;
            }
            return Err(invalid!("no prediction for window {} s of record {rid}", span.start_s));
        };
        predicted.push(*p);
        reference_labels.push(WindowLabels::from_vector(&target, assembly)?);
        if let Some(a) = acts.get(&key) {
            pred_acts.push((*a).clone());
        }
        targets.push(target);
    }
    let with_mae = !pred_acts.is_empty() && pred_acts.len() == targets.len();
    if metadata.dataset_hash.is_empty() {
        metadata.dataset_hash = hash;
    }
    score_windows(
        &predicted,
        &reference_labels,
        with_mae.then_some((pred_acts.as_slice(), targets.as_slice())),
        assembly,
        metadata,
    )
}

/// Result of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub channels: usize,
    pub assembly: Assembly,
    pub epochs_run: usize,
    pub report: MetricReport,
}

pub fn experiment_dir_name(channels: usize, assembly: Assembly) -> String {
    format!("D{channels}_{assembly}")
}

/// Runs one (D, assembly) experiment on pre-generated records: build,
/// train, infer on the test split, score. Everything lands in `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    channels: usize,
    assembly: Assembly,
    record_dirs: &[PathBuf],
    out: &Path,
) -> Result<GridRow> {
    create_dir(out)?;
    let ds_dir = out.join("dataset");
    let ds = build_dataset(record_dirs, cfg.dataset_config(montage(channels), assembly), &ds_dir)?;
    let model_dir = out.join("model");
    let (_, log) = train_dataset(&ds, cfg, &model_dir)?;
    let inf = infer(&model_dir.join(CHECKPOINT_FILE), &ds_dir, SplitPart::Test, cfg.postprocess)?;
    let pred_dir = out.join("predictions");
    write_inference(&inf, &pred_dir)?;
    let meta = RunMetadata {
        channels,
        seeds: vec![cfg.seed],
        dataset_hash: ds.content_hash(),
        ..Default::default()
    };
    let report = score(&inf, &ds_dir, true, meta)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(GridRow {
        channels,
        assembly,
        epochs_run: log.epochs_run,
        report,
    })
}

/// Runs the ten-experiment grid. Records are generated once with the full
/// montage; each experiment selects its first `D` channels.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let records = synth_records(cfg, 8, &out.join("records"))?;
    let mut rows = Vec::with_capacity(GRID.len());
    for (d, a) in GRID {
        log::info!("grid experiment D={d} assembly {a}");
        rows.push(run_experiment(cfg, d, a, &records, &out.join(experiment_dir_name(d, a)))?);
    }
    write_json(&out.join("summary.json"), &rows)?;
    fs::write(out.join("summary.md"), summary_table(&rows)).map_err(|e| Error::io(out.join("summary.md"), e))?;
    Ok(rows)
}

/// Markdown table with one row per experiment and kappa / F1 / MAE columns
/// per event family.
pub fn summary_table(rows: &[GridRow]) -> String {
    let fams = [Family::Stages, Family::Arousals, Family::Respiratory];
    let mut s = String::from("| D | Assembly |");
    let mut rule = String::from("|---|---|");
    for f in fams {
        for col in ["kappa", "F1", "MAE c", "MAE bw"] {
            s.push_str(&format!(" {} {col} |", f.name()));
            rule.push_str("---|");
        }
    }
    s.push_str(" global MAE |\n");
    rule.push_str("---|\n");
    s.push_str(&rule);
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for r in rows {
        s.push_str(&format!("| {} | {} |", r.channels, r.assembly));
        for f in fams {
            let m = r.report.family(f);
            for v in [
                m.map(|m| m.kappa),
                m.map(|m| m.f1_macro),
                m.and_then(|m| m.mae_c),
                m.and_then(|m| m.mae_bw),
            ] {
                s.push_str(&format!(" {} |", cell(v)));
            }
        }
        s.push_str(&format!(" {} |\n", cell(r.report.global_mae)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        write_json(&p, &ExperimentConfig::small()).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap(), ExperimentConfig::small());
        fs::write(&p, r#"{"version": 7}"#).unwrap();
        assert!(ExperimentConfig::load(&p).is_err());
        fs::write(&p, r#"{"version": 1, "bogus": 3}"#).unwrap();
        assert!(ExperimentConfig::load(&p).is_err());
        fs::write(&p, r#"{"version": 1, "train": {"batch_size": 7}}"#).unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.train.batch_size, 7);
        assert_eq!(c.train.learning_rate, 0.001);
    }

    #[test]
    fn grid_pairs() {
        assert_eq!(GRID.len(), 10);
        assert!(!GRID.contains(&(6, Assembly::S)));
        assert!(!GRID.contains(&(8, Assembly::S)));
    }

    #[test]
    fn identical_annotations_score_perfectly() {
        let cfg = ExperimentConfig::small();
        let dir = tempfile::tempdir().unwrap();
        let recs = synth_records(&cfg, 6, dir.path()).unwrap();
        let record = load_record(&recs[0]).unwrap();
        // Predictions that restate the reference annotations.
        let hyp = record
            .hypnogram()
            .iter()
            .enumerate()
            .map(|(i, s)| HypnogramEntry {
                record_id: record.id.clone(),
                start_s: i as f64 * 30.0,
                stage: s.unwrap(),
            })
            .collect();
        let events = record
            .annotations
            .iter()
            .filter(|a| !a.label.is_stage())
            .map(|a| PredictedEvent {
                record_id: record.id.clone(),
                annotation: a.clone(),
            })
            .collect();
        let inf = Inference {
            activations: Vec::new(),
            hypnogram: Hypnogram {
                window_s: 30.0,
                assembly: Assembly::SAR,
                windows: hyp,
            },
            events,
        };
        let out = dir.path().join("pred");
        write_inference(&inf, &out).unwrap();
        let back = read_inference(&out).unwrap();
        assert_eq!(back, inf);
        let rep = score(&back, &recs[0], false, RunMetadata::default()).unwrap();
        for f in &rep.families {
            assert_eq!(f.kappa, 1.0, "{:?}", f.family);
            assert_eq!(f.f1_macro, 1.0, "{:?}", f.family);
        }
    }
}
