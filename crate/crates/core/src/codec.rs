//! Bounding-window target vectors and their inverse.
//!
//! Each 30 s analysis window owns a fixed-length vector. Full layout:
//!
//! ```text
//! [ cW cN1 cN2 cN3 cREM | c_a x_a w_a | p_r c_apnea c_hypopnea x_r w_r ]
//! ```
//!
//! Assemblies drop the arousal and/or respiratory blocks. `x` is the event
//! midpoint relative to the window start and `w` its duration, both in units
//! of the window length. Absent events are zero-filled.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::record::{Annotation, EventFamily, EventLabel};

/// Activation level at or above which a presence unit counts as "present".
pub const PRESENCE_THRESHOLD: f64 = 0.5;
/// Arousals shorter than this are discarded after decoding.
pub const MIN_AROUSAL_S: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assembly {
    S,
    SA,
    SR,
    SAR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArousalSlots {
    pub presence: usize,
    pub x: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RespiratorySlots {
    pub presence: usize,
    pub apnea: usize,
    pub hypopnea: usize,
    pub x: usize,
    pub w: usize,
}

/// Component indices of one assembly's vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub len: usize,
    pub arousal: Option<ArousalSlots>,
    pub respiratory: Option<RespiratorySlots>,
}

impl Layout {
    pub const STAGE_LEN: usize = 5;

    pub fn stage(&self) -> std::ops::Range<usize> {
        0..Self::STAGE_LEN
    }

    /// Indices of location coordinates (linear outputs).
    pub fn coordinate_slots(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(a) = self.arousal {
            out.extend([a.x, a.w]);
        }
        if let Some(r) = self.respiratory {
            out.extend([r.x, r.w]);
        }
        out
    }

    /// Indices of sigmoid presence units.
    pub fn presence_slots(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(a) = self.arousal {
            out.push(a.presence);
        }
        if let Some(r) = self.respiratory {
            out.push(r.presence);
        }
        out
    }

    /// Softmax groups: the stage block and, when present, the respiratory
    /// class pair.
    pub fn softmax_groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = vec![self.stage()];
        if let Some(r) = self.respiratory {
            out.push(r.apnea..r.hypopnea + 1);
        }
        out
    }
}

impl Assembly {
    pub const ALL: [Assembly; 4] = [Assembly::S, Assembly::SA, Assembly::SR, Assembly::SAR];

    pub fn has_arousal(self) -> bool {
        matches!(self, Assembly::SA | Assembly::SAR)
    }

    pub fn has_respiratory(self) -> bool {
        matches!(self, Assembly::SR | Assembly::SAR)
    }

    pub fn includes(self, family: EventFamily) -> bool {
        match family {
            EventFamily::Stage => true,
            EventFamily::Arousal => self.has_arousal(),
            EventFamily::Respiratory => self.has_respiratory(),
        }
    }

    pub fn len(self) -> usize {
        self.layout().len
    }

    pub fn layout(self) -> Layout {
        let mut next = Layout::STAGE_LEN;
        let arousal = self.has_arousal().then(|| {
            let s = ArousalSlots {
                presence: next,
                x: next + 1,
                w: next + 2,
            };
            next += 3;
            s
        });
        let respiratory = self.has_respiratory().then(|| {
            let s = RespiratorySlots {
                presence: next,
                apnea: next + 1,
                hypopnea: next + 2,
                x: next + 3,
                w: next + 4,
            };
            next += 5;
            s
        });
        Layout {
            len: next,
            arousal,
            respiratory,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Assembly::S => "S",
            Assembly::SA => "SA",
            Assembly::SR => "SR",
            Assembly::SAR => "SAR",
        }
    }
}

impl fmt::Display for Assembly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Assembly {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '+' | ' '))
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "S" => Ok(Assembly::S),
            "SA" => Ok(Assembly::SA),
            "SR" => Ok(Assembly::SR),
            "SAR" => Ok(Assembly::SAR),
            _ => Err(invalid!("unknown assembly {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub assembly: Assembly,
    pub values: Vec<f64>,
}

impl TargetVector {
    pub fn zeros(assembly: Assembly) -> Self {
        TargetVector {
            assembly,
            values: vec![0.0; assembly.len()],
        }
    }

    pub fn stage_index(&self) -> usize {
        argmax(&self.values[..Layout::STAGE_LEN])
    }
}

/// Normalized location of an event inside its owning window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingWindow {
    pub center_norm: f64,
    pub width_norm: f64,
}

/// One N-second analysis window in absolute record time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl WindowSpan {
    pub fn nth(index: usize, window_s: f64) -> Self {
        let start_s = index as f64 * window_s;
        WindowSpan {
            start_s,
            end_s: start_s + window_s,
        }
    }

    pub fn len_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s
    }

    pub fn bounding_window(&self, a: &Annotation) -> BoundingWindow {
        let n = self.len_s();
        BoundingWindow {
            center_norm: (event_centroid(a) - self.start_s) / n,
            width_norm: a.duration_s / n,
        }
    }

    /// Inverse of [`WindowSpan::bounding_window`]: absolute (onset, duration).
    pub fn absolute(&self, bw: BoundingWindow) -> (f64, f64) {
        let n = self.len_s();
        (
            self.start_s + (bw.center_norm - bw.width_norm / 2.0) * n,
            bw.width_norm * n,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedEvent {
    pub onset_s: f64,
    pub duration_s: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedWindow {
    pub span: WindowSpan,
    pub stage: EventLabel,
    pub arousal: Option<DetectedEvent>,
    /// Detected respiratory event with its class (apnea or hypopnea).
    pub respiratory: Option<(DetectedEvent, EventLabel)>,
}

/// Temporal midpoint of an annotation.
pub fn event_centroid(a: &Annotation) -> f64 {
    a.onset_s + a.duration_s / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn intersection_len(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

/// Intersection over union along the time axis.
pub fn iou_1d(a: Interval, b: Interval) -> f64 {
    let inter = a.intersection_len(&b);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Builds the target vector for one window from its stage and the
/// annotations it owns (at most one per event family).
pub fn encode(
    span: WindowSpan,
    stage: EventLabel,
    owned: &[Annotation],
    assembly: Assembly,
) -> Result<TargetVector> {
    let stage_idx = stage
        .stage_index()
        .ok_or_else(|| invalid!("window stage must be a sleep stage, got {stage}"))?;
    let layout = assembly.layout();
    let mut v = TargetVector::zeros(assembly);
    v.values[stage_idx] = 1.0;

    let mut have_arousal = false;
    let mut have_resp = false;
    for a in owned {
        let centroid = event_centroid(a);
        if !span.contains(centroid) {
            return Err(invalid!(
                "{} with centroid {centroid} s is not owned by window [{}, {})",
                a.label,
                span.start_s,
                span.end_s
            ));
        }
        if a.duration_s <= 0.0 {
            return Err(invalid!("non-positive duration for owned {}", a.label));
        }
        let bw = span.bounding_window(a);
        match a.label.family() {
            EventFamily::Stage => {
                return Err(invalid!("stage label {} passed as an owned event", a.label))
            }
            EventFamily::Arousal => {
                let slots = layout
                    .arousal
                    .ok_or_else(|| invalid!("assembly {assembly} excludes arousals"))?;
                if std::mem::replace(&mut have_arousal, true) {
                    return Err(invalid!("two arousals owned by one window"));
                }
                v.values[slots.presence] = 1.0;
                v.values[slots.x] = bw.center_norm;
                v.values[slots.w] = bw.width_norm;
            }
            EventFamily::Respiratory => {
                let slots = layout
                    .respiratory
                    .ok_or_else(|| invalid!("assembly {assembly} excludes respiratory events"))?;
                if std::mem::replace(&mut have_resp, true) {
                    return Err(invalid!("two respiratory events owned by one window"));
                }
                v.values[slots.presence] = 1.0;
                let class = if a.label == EventLabel::Apnea {
                    slots.apnea
                } else {
                    slots.hypopnea
                };
                v.values[class] = 1.0;
                v.values[slots.x] = bw.center_norm;
                v.values[slots.w] = bw.width_norm;
            }
        }
    }
    Ok(v)
}

/// Turns activations (or an encoded vector) back into window-level
/// categorical decisions and absolute-time events.
pub fn decode(values: &[f64], span: WindowSpan, assembly: Assembly) -> Result<DecodedWindow> {
    let layout = assembly.layout();
    if values.len() != layout.len {
        return Err(invalid!(
            "vector length {} does not match assembly {assembly} ({})",
            values.len(),
            layout.len
        ));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite activation at component {i}")));
    }
    let stage = EventLabel::STAGES[argmax(&values[layout.stage()])];

    let arousal = layout.arousal.and_then(|s| {
        let conf = values[s.presence];
        (conf >= PRESENCE_THRESHOLD).then(|| {
            let (onset_s, duration_s) = span.absolute(BoundingWindow {
                center_norm: values[s.x],
                width_norm: values[s.w],
            });
            DetectedEvent {
                onset_s,
                duration_s,
                confidence: conf,
            }
        })
    });
    let respiratory = layout.respiratory.and_then(|s| {
        let conf = values[s.presence];
        (conf >= PRESENCE_THRESHOLD).then(|| {
            let (onset_s, duration_s) = span.absolute(BoundingWindow {
                center_norm: values[s.x],
                width_norm: values[s.w],
            });
            let label = if values[s.hypopnea] > values[s.apnea] {
                EventLabel::Hypopnea
            } else {
                EventLabel::Apnea
            };
            (
                DetectedEvent {
                    onset_s,
                    duration_s,
                    confidence: conf,
                },
                label,
            )
        })
    });
    Ok(DecodedWindow {
        span,
        stage,
        arousal,
        respiratory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub interval: Interval,
    pub confidence: f64,
    pub label: EventLabel,
}

impl Candidate {
    fn from_annotation(a: &Annotation) -> Self {
        Candidate {
            interval: Interval::new(a.onset_s, a.end_s()),
            confidence: a.confidence.unwrap_or(1.0),
            label: a.label,
        }
    }

    fn into_annotation(self) -> Annotation {
        Annotation {
            onset_s: self.interval.start,
            duration_s: self.interval.len(),
            label: self.label,
            confidence: Some(self.confidence),
        }
    }
}

/// Total order used for greedy selection: confidence descending, then
/// onset, end and label ascending.
fn selection_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.interval.start.total_cmp(&b.interval.start))
        .then(a.interval.end.total_cmp(&b.interval.end))
        .then(a.label.cmp(&b.label))
}

/// Per-label greedy non-maximum suppression. A candidate is dropped when it
/// overlaps an already kept candidate of the same label with IOU > `lambda`.
pub fn nms(candidates: &[Candidate], lambda: f64) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(selection_order);
    let mut kept: Vec<Candidate> = Vec::with_capacity(sorted.len());
    for c in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.label == c.label && iou_1d(k.interval, c.interval) > lambda);
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    /// NMS overlap threshold.
    pub lambda: f64,
    pub min_arousal_s: f64,
    /// Decoded events are clipped to `[0, record_duration_s]` when set.
    pub record_duration_s: Option<f64>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            lambda: 0.0,
            min_arousal_s: MIN_AROUSAL_S,
            record_duration_s: None,
        }
    }
}

/// Merges same-label events whose intervals intersect with positive length
/// into their union, keeping the highest confidence.
pub fn merge_overlapping(events: &[Annotation]) -> Vec<Annotation> {
    let mut sorted = events.to_vec();
    sorted.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then(a.onset_s.total_cmp(&b.onset_s))
            .then(a.end_s().total_cmp(&b.end_s()))
    });
    let mut out: Vec<Annotation> = Vec::with_capacity(sorted.len());
    for ev in sorted {
        match out.last_mut() {
            Some(cur) if cur.label == ev.label && ev.onset_s < cur.end_s() => {
                let end = cur.end_s().max(ev.end_s());
                cur.duration_s = end - cur.onset_s;
                cur.confidence = match (cur.confidence, ev.confidence) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
            }
            _ => out.push(ev),
        }
    }
    sort_events(&mut out);
    out
}

fn sort_events(events: &mut [Annotation]) {
    events.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.label.cmp(&b.label))
            .then(a.duration_s.total_cmp(&b.duration_s))
    });
}

/// Event-list cleanup shared by [`postprocess`]: short-arousal removal,
/// same-class merging, then NMS.
pub fn clean_events(events: &[Annotation], cfg: &PostprocessConfig) -> Vec<Annotation> {
    let filtered: Vec<Annotation> = events
        .iter()
        .filter(|a| !(a.label == EventLabel::Arousal && a.duration_s < cfg.min_arousal_s))
        .cloned()
        .collect();
    let merged = merge_overlapping(&filtered);
    let candidates: Vec<Candidate> = merged.iter().map(Candidate::from_annotation).collect();
    let mut out: Vec<Annotation> = nms(&candidates, cfg.lambda)
        .into_iter()
        .map(Candidate::into_annotation)
        .collect();
    sort_events(&mut out);
    out
}

/// Converts decoded windows into a cleaned event list and a hypnogram.
pub fn postprocess(
    windows: &[DecodedWindow],
    cfg: &PostprocessConfig,
) -> (Vec<Annotation>, Vec<EventLabel>) {
    let mut raw = Vec::new();
    let mut push = |ev: &DetectedEvent, label: EventLabel| {
        let mut start = ev.onset_s;
        let mut end = ev.onset_s + ev.duration_s;
        if let Some(limit) = cfg.record_duration_s {
            start = start.clamp(0.0, limit);
            end = end.clamp(0.0, limit);
        }
        if end > start {
            raw.push(Annotation {
                onset_s: start,
                duration_s: end - start,
                label,
                confidence: Some(ev.confidence),
            });
        }
    };
    for w in windows {
        if let Some(ev) = &w.arousal {
            push(ev, EventLabel::Arousal);
        }
        if let Some((ev, label)) = &w.respiratory {
            push(ev, *label);
        }
    }
    let hypnogram = windows.iter().map(|w| w.stage).collect();
    (clean_events(&raw, cfg), hypnogram)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn layout_lengths() {
        assert_eq!(Assembly::S.len(), 5);
        assert_eq!(Assembly::SA.len(), 8);
        assert_eq!(Assembly::SR.len(), 10);
        assert_eq!(Assembly::SAR.len(), 13);
        let l = Assembly::SAR.layout();
        assert_eq!(l.arousal.unwrap().presence, 5);
        assert_eq!(l.respiratory.unwrap().presence, 8);
        assert_eq!(l.respiratory.unwrap().w, 12);
        assert_eq!("s+a+r".parse::<Assembly>().unwrap(), Assembly::SAR);
    }

    #[test]
    fn centroid_examples() {
        let c = |o, d| event_centroid(&Annotation::new(o, d, EventLabel::Apnea));
        assert_eq!(c(95.0, 10.0), 100.0);
        assert_eq!(c(0.0, 30.0), 15.0);
        assert_eq!(c(42.0, 0.5), 42.25);
    }

    #[test]
    fn iou_examples() {
        let i = Interval::new;
        assert_eq!(iou_1d(i(0.0, 10.0), i(0.0, 10.0)), 1.0);
        assert_eq!(iou_1d(i(0.0, 10.0), i(20.0, 30.0)), 0.0);
        assert!((iou_1d(i(25.0, 75.0), i(35.0, 85.0)) - 40.0 / 60.0).abs() < 1e-15);
        assert_eq!(iou_1d(i(3.0, 3.0), i(3.0, 3.0)), 0.0);
    }

    #[test]
    fn encode_arousal_sa() {
        let span = WindowSpan::nth(3, 30.0);
        let v = encode(
            span,
            EventLabel::N2,
            &[Annotation::new(100.0, 10.0, EventLabel::Arousal)],
            Assembly::SA,
        )
        .unwrap();
        assert!(close(
            &v.values,
            &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 1.0 / 3.0],
            1e-12
        ));
    }

    #[test]
    fn encode_empty_sar() {
        let v = encode(WindowSpan::nth(0, 30.0), EventLabel::W, &[], Assembly::SAR).unwrap();
        let mut expected = vec![0.0; 13];
        expected[0] = 1.0;
        assert_eq!(v.values, expected);
    }

    #[test]
    fn encode_long_apnea_sr() {
        let v = encode(
            WindowSpan::nth(10, 30.0),
            EventLabel::N3,
            &[Annotation::new(290.0, 50.0, EventLabel::Apnea)],
            Assembly::SR,
        )
        .unwrap();
        assert!(close(
            &v.values,
            &[0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.5, 50.0 / 30.0],
            1e-12
        ));
    }

    #[test]
    fn encode_errors() {
        let span = WindowSpan::nth(0, 30.0);
        let ar = Annotation::new(5.0, 4.0, EventLabel::Arousal);
        assert!(encode(span, EventLabel::Arousal, &[], Assembly::SA).is_err());
        assert!(encode(span, EventLabel::W, &[ar.clone(), ar.clone()], Assembly::SA).is_err());
        assert!(encode(span, EventLabel::W, &[ar.clone()], Assembly::SR).is_err());
        let outside = Annotation::new(40.0, 4.0, EventLabel::Arousal);
        assert!(encode(span, EventLabel::W, &[outside], Assembly::SA).is_err());
    }

    #[test]
    fn decode_threshold_and_argmax() {
        let span = WindowSpan::nth(0, 30.0);
        let v = [0.1, 0.2, 0.4, 0.2, 0.1, 0.49, 0.5, 0.3];
        let d = decode(&v, span, Assembly::SA).unwrap();
        assert_eq!(d.stage, EventLabel::N2);
        assert!(d.arousal.is_none());
        let mut v2 = v;
        v2[5] = 0.5;
        let d2 = decode(&v2, span, Assembly::SA).unwrap();
        let ev = d2.arousal.unwrap();
        assert!((ev.onset_s - 10.5).abs() < 1e-12);
        assert!((ev.duration_s - 9.0).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_bad_input() {
        let span = WindowSpan::nth(0, 30.0);
        assert!(decode(&[0.2; 5], span, Assembly::SA).is_err());
        let mut v = [0.2; 5];
        v[1] = f64::NAN;
        assert!(matches!(
            decode(&v, span, Assembly::S),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn decode_respiratory_class() {
        let span = WindowSpan::nth(2, 30.0);
        let mut v = vec![0.0; 10];
        v[4] = 1.0;
        v[5] = 0.8;
        v[6] = 0.3;
        v[7] = 0.7;
        v[8] = 0.5;
        v[9] = 0.5;
        let d = decode(&v, span, Assembly::SR).unwrap();
        assert_eq!(d.stage, EventLabel::Rem);
        let (ev, label) = d.respiratory.unwrap();
        assert_eq!(label, EventLabel::Hypopnea);
        assert!((ev.onset_s - 67.5).abs() < 1e-12);
        assert_eq!(ev.confidence, 0.8);
    }

    fn cand(s: f64, e: f64, conf: f64, label: EventLabel) -> Candidate {
        Candidate {
            interval: Interval::new(s, e),
            confidence: conf,
            label,
        }
    }

    #[test]
    fn nms_examples() {
        let a = cand(0.0, 10.0, 0.9, EventLabel::Apnea);
        let b = cand(1.0, 11.0, 0.8, EventLabel::Apnea);
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        assert_eq!(nms(&[b, a], 0.9), vec![a, b]);
        let h = cand(0.0, 10.0, 0.8, EventLabel::Hypopnea);
        assert_eq!(nms(&[a, h], 0.0).len(), 2);
    }

    fn window(idx: usize, ar: Option<(f64, f64)>, resp: Option<(f64, f64, EventLabel)>) -> DecodedWindow {
        DecodedWindow {
            span: WindowSpan::nth(idx, 30.0),
            stage: EventLabel::N2,
            arousal: ar.map(|(o, d)| DetectedEvent {
                onset_s: o,
                duration_s: d,
                confidence: 0.9,
            }),
            respiratory: resp.map(|(o, d, l)| {
                (
                    DetectedEvent {
                        onset_s: o,
                        duration_s: d,
                        confidence: 0.7,
                    },
                    l,
                )
            }),
        }
    }

    #[test]
    fn postprocess_examples() {
        let cfg = PostprocessConfig::default();
        let (ev, hyp) = postprocess(&[window(0, Some((10.0, 2.9)), None)], &cfg);
        assert!(ev.is_empty());
        assert_eq!(hyp, vec![EventLabel::N2]);

        let ws = [
            window(3, None, Some((100.0, 25.0, EventLabel::Apnea))),
            window(4, None, Some((120.0, 20.0, EventLabel::Apnea))),
        ];
        let (ev, hyp) = postprocess(&ws, &cfg);
        assert_eq!(hyp.len(), 2);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].onset_s, ev[0].end_s()), (100.0, 140.0));

        let ws = [
            window(0, None, Some((0.0, 15.0, EventLabel::Hypopnea))),
            window(1, None, Some((50.0, 15.0, EventLabel::Hypopnea))),
        ];
        let (ev, _) = postprocess(&ws, &cfg);
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].onset_s, ev[0].duration_s), (0.0, 15.0));
        assert_eq!((ev[1].onset_s, ev[1].duration_s), (50.0, 15.0));
    }

    #[test]
    fn postprocess_clips_to_record() {
        let cfg = PostprocessConfig {
            record_duration_s: Some(60.0),
            ..Default::default()
        };
        let (ev, _) = postprocess(&[window(0, None, Some((-5.0, 20.0, EventLabel::Apnea)))], &cfg);
        assert_eq!((ev[0].onset_s, ev[0].duration_s), (0.0, 15.0));
        let (ev, _) = postprocess(&[window(1, None, Some((30.0, -1.0, EventLabel::Apnea)))], &cfg);
        assert!(ev.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn interval() -> impl Strategy<Value = Interval> {
            (-50.0f64..50.0, 0.0f64..40.0).prop_map(|(s, l)| Interval::new(s, s + l))
        }

        proptest! {
            #[test]
            fn iou_symmetric_bounded(a in interval(), b in interval()) {
                let x = iou_1d(a, b);
                prop_assert_eq!(x, iou_1d(b, a));
                prop_assert!((0.0..=1.0).contains(&x));
                if a.intersection_len(&b) == 0.0 {
                    prop_assert_eq!(x, 0.0);
                }
            }

            #[test]
            fn nms_order_independent(
                items in prop::collection::vec((interval(), 0.0f64..1.0, prop::bool::ANY), 0..12),
                lambda in 0.0f64..1.0,
                rot in 0usize..12,
            ) {
                let cands: Vec<Candidate> = items.iter().map(|(iv, c, ap)| Candidate {
                    interval: *iv,
                    confidence: *c,
                    label: if *ap { EventLabel::Apnea } else { EventLabel::Hypopnea },
                }).collect();
                let mut rotated = cands.clone();
                if !rotated.is_empty() {
                    let k = rot % rotated.len();
                    rotated.rotate_left(k);
                    rotated.reverse();
                }
                prop_assert_eq!(nms(&cands, lambda), nms(&rotated, lambda));
            }

            #[test]
            fn clean_is_idempotent(
                items in prop::collection::vec((0.0f64..300.0, 0.5f64..40.0, 0u8..3, 0.0f64..1.0), 0..15),
            ) {
                let labels = [EventLabel::Arousal, EventLabel::Apnea, EventLabel::Hypopnea];
                let events: Vec<Annotation> = items.iter().map(|(o, d, l, c)| Annotation {
                    onset_s: *o,
                    duration_s: *d,
                    label: labels[*l as usize],
                    confidence: Some(*c),
                }).collect();
                let cfg = PostprocessConfig::default();
                let once = clean_events(&events, &cfg);
                prop_assert_eq!(clean_events(&once, &cfg), once);
            }
        }
    }
}
