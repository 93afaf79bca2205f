//! Agreement metrics: Cohen's kappa, F1 and mean absolute errors, scored at
//! the level of 30 s windows.

use serde::{Deserialize, Serialize};

use crate::codec::{argmax, decode, Assembly, DecodedWindow, Layout, WindowSpan, PRESENCE_THRESHOLD};
use crate::dataset::assign_events;
use crate::error::{invalid, Result};
use crate::record::{Annotation, EventLabel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[reference][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: &[&str]) -> Self {
        ConfusionMatrix {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            counts: vec![vec![0; labels.len()]; labels.len()],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        ConfusionMatrix {
            labels: (0..counts.len()).map(|i| i.to_string()).collect(),
            counts,
        }
    }

    pub fn add(&mut self, reference: usize, predicted: usize) {
        self.counts[reference][predicted] += 1;
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

/// Chance-corrected agreement. When chance agreement is 1 the result is 1
/// for perfect observed agreement and 0 otherwise.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(invalid!("cannot compute kappa of an empty confusion matrix"));
    }
    let n = n as f64;
    let observed = (0..cm.k()).map(|i| cm.counts[i][i]).sum::<u64>() as f64 / n;
    let chance = (0..cm.k())
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (n * n);
    if chance >= 1.0 {
        return Ok(if observed >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((observed - chance) / (1.0 - chance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    /// Mean over classes that occur in the reference or the prediction.
    pub macro_f1: f64,
    /// Classes never predicted and never true (scored 0, excluded from the
    /// macro average).
    pub absent_classes: Vec<usize>,
}

pub fn f1_scores(cm: &ConfusionMatrix) -> F1Report {
    let mut per_class = Vec::with_capacity(cm.k());
    let mut absent = Vec::new();
    for i in 0..cm.k() {
        let tp = cm.counts[i][i] as f64;
        let predicted = cm.col_sum(i) as f64;
        let actual = cm.row_sum(i) as f64;
        if predicted == 0.0 && actual == 0.0 {
            absent.push(i);
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        per_class.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    let scored: Vec<f64> = (0..cm.k())
        .filter(|i| !absent.contains(i))
        .map(|i| per_class[i])
        .collect();
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    F1Report {
        per_class,
        macro_f1,
        absent_classes: absent,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Stages,
    Arousals,
    Respiratory,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Stages => "stages",
            Family::Arousals => "arousals",
            Family::Respiratory => "respiratory",
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Family::Stages => &["W", "N1", "N2", "N3", "REM"],
            Family::Arousals => &["absent", "present"],
            Family::Respiratory => &["none", "apnea", "hypopnea"],
        }
    }

    pub fn in_assembly(self, assembly: Assembly) -> bool {
        match self {
            Family::Stages => true,
            Family::Arousals => assembly.has_arousal(),
            Family::Respiratory => assembly.has_respiratory(),
        }
    }

    /// Classification/presence components and coordinate components.
    fn slots(self, layout: &Layout) -> (Vec<usize>, Vec<usize>) {
        match self {
            Family::Stages => (layout.stage().collect(), Vec::new()),
            Family::Arousals => layout
                .arousal
                .map(|a| (vec![a.presence], vec![a.x, a.w]))
                .unwrap_or_default(),
            Family::Respiratory => layout
                .respiratory
                .map(|r| (vec![r.presence, r.apnea, r.hypopnea], vec![r.x, r.w]))
                .unwrap_or_default(),
        }
    }

    fn presence_slot(self, layout: &Layout) -> Option<usize> {
        match self {
            Family::Stages => None,
            Family::Arousals => layout.arousal.map(|a| a.presence),
            Family::Respiratory => layout.respiratory.map(|r| r.presence),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMae {
    pub mae_c: f64,
    /// Absent when no reference window contains the event.
    pub mae_bw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub families: Vec<(Family, FamilyMae)>,
    pub global_mae: f64,
}

impl MaeReport {
    pub fn family(&self, f: Family) -> Option<FamilyMae> {
        self.families.iter().find(|(g, _)| *g == f).map(|(_, m)| *m)
    }
}

fn mean_abs(pairs: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        sum += (a - b).abs();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Componentwise MAE between activations and targets, per family and over
/// every component.
pub fn mae_components(preds: &[Vec<f64>], targets: &[Vec<f64>], assembly: Assembly) -> Result<MaeReport> {
    let layout = assembly.layout();
    if preds.len() != targets.len() {
        return Err(invalid!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        ));
    }
    if preds.is_empty() {
        return Err(invalid!("no windows to score"));
    }
    if let Some(bad) = preds.iter().chain(targets).find(|v| v.len() != layout.len) {
        return Err(invalid!(
            "vector of length {} does not match assembly {assembly}",
            bad.len()
        ));
    }
    let rows = || preds.iter().zip(targets);
    let mut families = Vec::new();
    for fam in [Family::Stages, Family::Arousals, Family::Respiratory] {
        if !fam.in_assembly(assembly) {
            continue;
        }
        let (cls, coords) = fam.slots(&layout);
        let mae_c = mean_abs(rows().flat_map(|(p, t)| cls.iter().map(move |&i| (p[i], t[i])))).unwrap_or(0.0);
        let mae_bw = fam.presence_slot(&layout).and_then(|ps| {
            mean_abs(
                rows()
                    .filter(|(_, t)| t[ps] >= PRESENCE_THRESHOLD)
                    .flat_map(|(p, t)| coords.iter().map(move |&i| (p[i], t[i]))),
            )
        });
        families.push((fam, FamilyMae { mae_c, mae_bw }));
    }
    let global_mae = mean_abs(rows().flat_map(|(p, t)| p.iter().copied().zip(t.iter().copied()))).unwrap_or(0.0);
    Ok(MaeReport {
        families,
        global_mae,
    })
}

/// Categorical outcome of one window for every family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLabels {
    pub stage: EventLabel,
    pub arousal: bool,
    pub respiratory: Option<EventLabel>,
}

impl WindowLabels {
    pub fn from_decoded(w: &DecodedWindow) -> Self {
        WindowLabels {
            stage: w.stage,
            arousal: w.arousal.is_some(),
            respiratory: w.respiratory.map(|(_, l)| l),
        }
    }

    /// Labels implied by an encoded (or predicted) vector.
    pub fn from_vector(v: &[f64], assembly: Assembly) -> Result<Self> {
        decode(v, WindowSpan::nth(0, 30.0), assembly).map(|d| Self::from_decoded(&d))
    }

    fn class(&self, fam: Family) -> usize {
        match fam {
            Family::Stages => self.stage.stage_index().unwrap_or(0),
            Family::Arousals => usize::from(self.arousal),
            Family::Respiratory => match self.respiratory {
                None => 0,
                Some(EventLabel::Apnea) => 1,
                Some(_) => 2,
            },
        }
    }
}

/// Window labels from a hypnogram and an event list, using midpoint
/// ownership for events.
pub fn labels_from_annotations(
    hypnogram: &[EventLabel],
    events: &[Annotation],
    window_s: f64,
    assembly: Assembly,
) -> Vec<WindowLabels> {
    let owned = assign_events(events, window_s, hypnogram.len(), assembly).owned;
    hypnogram
        .iter()
        .enumerate()
        .map(|(i, &stage)| {
            let evs = owned.get(&i).map(Vec::as_slice).unwrap_or(&[]);
            WindowLabels {
                stage,
                arousal: evs.iter().any(|a| a.label == EventLabel::Arousal),
                respiratory: evs
                    .iter()
                    .find(|a| matches!(a.label, EventLabel::Apnea | EventLabel::Hypopnea))
                    .map(|a| a.label),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub family: Family,
    pub kappa: f64,
    pub f1_macro: f64,
    pub per_class_f1: Vec<(String, f64)>,
    pub mae_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_bw: Option<f64>,
    pub counts: FamilyCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCounts {
    pub windows: u64,
    pub confusion: ConfusionMatrix,
    pub absent_classes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub channels: usize,
    pub assembly: Option<Assembly>,
    pub seeds: Vec<u64>,
    pub dataset_hash: String,
    pub unit: String,
    pub f1_average: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub families: Vec<FamilyMetrics>,
    pub global_mae: Option<f64>,
    pub metadata: RunMetadata,
}

impl MetricReport {
    pub fn family(&self, f: Family) -> Option<&FamilyMetrics> {
        self.families.iter().find(|m| m.family == f)
    }
}

/// Scores predicted window labels against reference labels. Raw activations
/// and target vectors, when both are supplied, add the MAE columns.
pub fn score_windows(
    predicted: &[WindowLabels],
    reference: &[WindowLabels],
    activations: Option<(&[Vec<f64>], &[Vec<f64>])>,
    assembly: Assembly,
    mut metadata: RunMetadata,
) -> Result<MetricReport> {
    if predicted.len() != reference.len() {
        return Err(invalid!(
            "misaligned windows: {} predicted vs {} reference",
            predicted.len(),
            reference.len()
        ));
    }
    if predicted.is_empty() {
        return Err(invalid!("no windows to score"));
    }
    let mae = match activations {
        Some((p, t)) => {
            if p.len() != predicted.len() {
                return Err(invalid!("activation count differs from window count"));
            }
            Some(mae_components(p, t, assembly)?)
        }
        None => None,
    };
    let mut families = Vec::new();
    for fam in [Family::Stages, Family::Arousals, Family::Respiratory] {
        if !fam.in_assembly(assembly) {
            continue;
        }
        let labels = fam.labels();
        let mut cm = ConfusionMatrix::new(labels);
        for (p, r) in predicted.iter().zip(reference) {
            cm.add(r.class(fam), p.class(fam));
        }
        let f1 = f1_scores(&cm);
        let fm = mae.as_ref().and_then(|m| m.family(fam));
        families.push(FamilyMetrics {
            family: fam,
            kappa: cohen_kappa(&cm)?,
            f1_macro: f1.macro_f1,
            per_class_f1: labels
                .iter()
                .map(|s| s.to_string())
                .zip(f1.per_class.iter().copied())
                .collect(),
            mae_c: fm.map(|m| m.mae_c),
            mae_bw: fm.and_then(|m| m.mae_bw),
            counts: FamilyCounts {
                windows: cm.total(),
                absent_classes: f1.absent_classes.iter().map(|&i| labels[i].to_string()).collect(),
                confusion: cm,
            },
        });
    }
    metadata.assembly = Some(assembly);
    metadata.unit = "window".into();
    metadata.f1_average = "macro".into();
    Ok(MetricReport {
        families,
        global_mae: mae.map(|m| m.global_mae),
        metadata,
    })
}

/// Scores raw model activations against encoded targets.
pub fn score_run(
    preds: &[Vec<f64>],
    targets: &[Vec<f64>],
    assembly: Assembly,
    metadata: RunMetadata,
) -> Result<MetricReport> {
    let to_labels = |vs: &[Vec<f64>]| -> Result<Vec<WindowLabels>> {
        vs.iter().map(|v| WindowLabels::from_vector(v, assembly)).collect()
    };
    score_windows(
        &to_labels(preds)?,
        &to_labels(targets)?,
        Some((preds, targets)),
        assembly,
        metadata,
    )
}

/// Stage accuracy of activations against targets.
pub fn stage_accuracy(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| argmax(&p[..Layout::STAGE_LEN]) == argmax(&t[..Layout::STAGE_LEN]))
        .count();
    hits as f64 / preds.len() as f64
}
