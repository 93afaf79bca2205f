//! Deterministic synthetic polysomnography.
//!
//! Each stage has an exaggerated spectral signature so that it survives
//! per-window standardization:
//!
//! | stage | EEG                         | EOG               | EMG      |
//! |-------|-----------------------------|-------------------|----------|
//! | W     | 10 Hz alpha + beta          | blinks            | high     |
//! | N1    | 6 Hz theta                  | slow rolling      | medium   |
//! | N2    | 5 Hz theta + 13 Hz spindles | quiet             | low      |
//! | N3    | large 1 Hz delta            | quiet             | low      |
//! | REM   | theta + 20 Hz beta          | rapid saccades    | atonic   |
//!
//! Arousals are 22 Hz EEG surges with an EMG burst. Apneas cut airflow and
//! both effort belts by at least 90 %, hypopneas by 40-80 %; saturation dips
//! start a fixed 10 s after the event onset.

use std::f64::consts::TAU;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::write_json;
use crate::error::{invalid, Result};
use crate::record::{save_record, Annotation, Channel, EventLabel, Record, EPOCH_S};

pub const SATURATION_LAG_S: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Montage size: 4, 6 or 8 channels.
    pub channels: usize,
    pub rate_hz: f64,
    pub arousals_per_hour: f64,
    pub respiratory_per_hour: f64,
    /// Fraction of respiratory events that are apneas.
    pub apnea_fraction: f64,
    /// Minimum quiet time after an event before the next one of the same
    /// family.
    pub min_gap_s: f64,
    /// Row-stochastic transition matrix over W, N1, N2, N3, REM.
    pub transitions: [[f64; 5]; 5],
}

impl SynthConfig {
    pub fn new(seed: u64, duration_s: f64, channels: usize) -> Self {
        SynthConfig {
            seed,
            duration_s,
            channels,
            rate_hz: 100.0,
            arousals_per_hour: 20.0,
            respiratory_per_hour: 20.0,
            apnea_fraction: 0.5,
            min_gap_s: 30.0,
            transitions: [
                [0.85, 0.10, 0.03, 0.00, 0.02],
                [0.08, 0.60, 0.30, 0.00, 0.02],
                [0.03, 0.03, 0.84, 0.06, 0.04],
                [0.02, 0.00, 0.12, 0.86, 0.00],
                [0.04, 0.03, 0.05, 0.00, 0.88],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 4 | 6 | 8) {
            return Err(invalid!("montage must have 4, 6 or 8 channels, got {}", self.channels));
        }
        if !(self.duration_s >= EPOCH_S) {
            return Err(invalid!(
                "duration {} s is too short for one 30 s epoch",
                self.duration_s
            ));
        }
        if !(self.rate_hz > 0.0) {
            return Err(invalid!("sample rate must be positive"));
        }
        if !(self.arousals_per_hour >= 0.0 && self.respiratory_per_hour >= 0.0) {
            return Err(invalid!("event rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.apnea_fraction) || !(self.min_gap_s >= 0.0) {
            return Err(invalid!("invalid apnea fraction or gap"));
        }
        for row in &self.transitions {
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(invalid!("transition rows must be non-negative and sum to 1"));
            }
        }
        Ok(())
    }
}

/// Channel names for a 4, 6 or 8 channel montage.
pub fn montage(channels: usize) -> Vec<String> {
    ["EEG C3", "EEG C4", "EOG", "EMG", "SpO2", "Airflow", "Abdomen", "Thorax"]
        .iter()
        .take(channels)
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub onset_s: f64,
    pub duration_s: f64,
    pub label: EventLabel,
    /// Fraction by which airflow is reduced (respiratory events only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attenuation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub hypnogram: Vec<EventLabel>,
    pub events: Vec<PlantedEvent>,
}

fn draw_hypnogram(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<EventLabel> {
    let n = (cfg.duration_s / EPOCH_S).floor() as usize;
    let mut out = Vec::with_capacity(n);
    let mut state = 0usize;
    for _ in 0..n {
        out.push(EventLabel::STAGES[state]);
        let u: f64 = rng.gen();
        let row = &cfg.transitions[state];
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        state = next;
    }
    out
}

/// Non-overlapping events placed by a Poisson process, restricted to onsets
/// in sleep (non-W) epochs.
fn draw_events(
    rate_per_hour: f64,
    duration_s: f64,
    min_gap_s: f64,
    durations: Uniform<f64>,
    hypnogram: &[EventLabel],
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if rate_per_hour <= 0.0 {
        return out;
    }
    let gap = Exp::new(rate_per_hour / 3600.0).expect("positive rate");
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        let d = durations.sample(rng);
        if t + d > duration_s {
            break;
        }
        let epoch = ((t + d / 2.0) / EPOCH_S) as usize;
        if hypnogram.get(epoch).is_some_and(|&s| s != EventLabel::W) {
            out.push((t, d));
            t += d + min_gap_s;
        }
    }
    out
}

struct Gen {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl Gen {
    fn n(&mut self) -> f64 {
        self.noise.sample(&mut self.rng)
    }

    fn phase(&mut self) -> f64 {
        self.rng.gen::<f64>() * TAU
    }
}

fn raised_window(t: f64, start: f64, end: f64, ramp: f64) -> f64 {
    if t < start || t > end {
        0.0
    } else {
        ((t - start) / ramp).min((end - t) / ramp).min(1.0)
    }
}

pub fn generate_record(cfg: &SynthConfig) -> Result<(Record, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hypnogram = draw_hypnogram(cfg, &mut rng);
    let duration_s = hypnogram.len() as f64 * EPOCH_S;

    let arousals = draw_events(
        cfg.arousals_per_hour,
        duration_s,
        cfg.min_gap_s,
        Uniform::new_inclusive(3.0, 15.0),
        &hypnogram,
        &mut rng,
    );
    let resp_spans = draw_events(
        cfg.respiratory_per_hour,
        duration_s,
        cfg.min_gap_s,
        Uniform::new_inclusive(10.0, 60.0),
        &hypnogram,
        &mut rng,
    );
    let mut events: Vec<PlantedEvent> = arousals
        .iter()
        .map(|&(onset_s, duration_s)| PlantedEvent {
            onset_s,
            duration_s,
            label: EventLabel::Arousal,
            attenuation: None,
        })
        .collect();
    for &(onset_s, dur) in &resp_spans {
        let apnea = rng.gen::<f64>() < cfg.apnea_fraction;
        let attenuation = if apnea {
            rng.gen_range(0.95..=1.0)
        } else {
            rng.gen_range(0.4..=0.8)
        };
        events.push(PlantedEvent {
            onset_s,
            duration_s: dur,
            label: if apnea { EventLabel::Apnea } else { EventLabel::Hypopnea },
            attenuation: Some(attenuation),
        });
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.label.cmp(&b.label)));

    let names = montage(cfg.channels);
    let n = (duration_s * cfg.rate_hz).round() as usize;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5167_0000_0001),
        noise: Normal::new(0.0, 1.0).unwrap(),
    };
    let stage_at = |i: usize| -> EventLabel {
        let e = ((i as f64 / cfg.rate_hz) / EPOCH_S) as usize;
        hypnogram[e.min(hypnogram.len() - 1)]
    };
    let time = |i: usize| i as f64 / cfg.rate_hz;
    let arousal_level = |t: f64| -> f64 {
        events
            .iter()
            .filter(|e| e.label == EventLabel::Arousal)
            .map(|e| raised_window(t, e.onset_s, e.onset_s + e.duration_s, 0.5))
            .fold(0.0, f64::max)
    };

    let mut channels = Vec::with_capacity(cfg.channels);
    for name in &names {
        let samples = match name.as_str() {
            "EEG C3" | "EEG C4" => eeg(&mut g, n, &stage_at, &time, &arousal_level),
            "EOG" => eog(&mut g, n, &stage_at, &time),
            "EMG" => emg(&mut g, n, &stage_at, &time, &arousal_level),
            "SpO2" => saturation(&mut g, n, &time, &events),
            _ => respiration(&mut g, n, &time, &events),
        };
        channels.push(Channel {
            name: name.clone(),
            sample_rate_hz: cfg.rate_hz,
            samples,
        });
    }

    let mut annotations: Vec<Annotation> = hypnogram
        .iter()
        .enumerate()
        .map(|(i, &s)| Annotation::new(i as f64 * EPOCH_S, EPOCH_S, s))
        .collect();
    annotations.extend(
        events
            .iter()
            .map(|e| Annotation::new(e.onset_s, e.duration_s, e.label)),
    );
    annotations.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));

    let record = Record {
        id: format!("synth-{}", cfg.seed),
        duration_s,
        channels,
        annotations,
    };
    record.validate()?;
    let truth = SynthTruth {
        config: cfg.clone(),
        hypnogram,
        events,
    };
    Ok((record, truth))
}

/// Generates a record and writes it with its `synth_truth.json`.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<Record> {
    let (record, truth) = generate_record(cfg)?;
    save_record(&record, dir)?;
    write_json(&dir.join("synth_truth.json"), &truth)?;
    Ok(record)
}

fn eeg(
    g: &mut Gen,
    n: usize,
    stage_at: &dyn Fn(usize) -> EventLabel,
    time: &dyn Fn(usize) -> f64,
    arousal_level: &dyn Fn(f64) -> f64,
) -> Vec<f64> {
    let (pa, pt, pb, pd, ps, pr) = (g.phase(), g.phase(), g.phase(), g.phase(), g.phase(), g.phase());
    let spindle_period = 4.0;
    let spindle_offset = g.rng.gen::<f64>() * spindle_period;
    (0..n)
        .map(|i| {
            let t = time(i);
            let alpha = (TAU * 10.0 * t + pa).sin();
            let theta = (TAU * 6.0 * t + pt).sin();
            let beta = (TAU * 20.0 * t + pb).sin();
            let delta = (TAU * 1.0 * t + pd).sin();
            let base = match stage_at(i) {
                EventLabel::W => 1.0 * alpha + 0.3 * beta,
                EventLabel::N1 => 1.0 * theta + 0.2 * alpha,
                EventLabel::N2 => {
                    let th5 = (TAU * 5.0 * t + pt).sin();
                    let phase = (t + spindle_offset) % spindle_period;
                    let env = if phase < 1.0 { (std::f64::consts::PI * phase).sin() } else { 0.0 };
                    0.7 * th5 + 2.0 * env * (TAU * 13.0 * t + ps).sin()
                }
                EventLabel::N3 => 3.0 * delta + 0.2 * theta,
                _ => 0.6 * theta + 0.6 * beta,
            };
            let surge = 2.5 * arousal_level(t) * (TAU * 22.0 * t + pr).sin();
            base + surge + 0.3 * g.n()
        })
        .collect()
}

fn eog(g: &mut Gen, n: usize, stage_at: &dyn Fn(usize) -> EventLabel, time: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let pr = g.phase();
    let mut out = Vec::with_capacity(n);
    let mut pulse_left = 0usize;
    let mut level = 0.0f64;
    for i in 0..n {
        let t = time(i);
        let stage = stage_at(i);
        let v = match stage {
            EventLabel::W => {
                if pulse_left == 0 && g.rng.gen::<f64>() < 0.25 / 100.0 {
                    pulse_left = 30;
                }
                let blink = if pulse_left > 0 {
                    pulse_left -= 1;
                    3.0 * (std::f64::consts::PI * pulse_left as f64 / 30.0).sin()
                } else {
                    0.0
                };
                blink
            }
            EventLabel::N1 => 2.0 * (TAU * 0.3 * t + pr).sin(),
            EventLabel::Rem => {
                if g.rng.gen::<f64>() < 0.7 / 100.0 {
                    level = if level > 0.0 { -3.0 } else { 3.0 };
                }
                level *= 0.995;
                level
            }
            _ => 0.0,
        };
        out.push(v + 0.3 * g.n());
    }
    out
}

fn emg(
    g: &mut Gen,
    n: usize,
    stage_at: &dyn Fn(usize) -> EventLabel,
    time: &dyn Fn(usize) -> f64,
    arousal_level: &dyn Fn(f64) -> f64,
) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let tone = match stage_at(i) {
                EventLabel::W => 1.0,
                EventLabel::N1 => 0.6,
                EventLabel::N2 => 0.4,
                EventLabel::N3 => 0.3,
                _ => 0.05,
            };
            let amp = tone * (1.0 + 2.0 * arousal_level(time(i)));
            amp * g.n() + 0.02 * g.n()
        })
        .collect()
}

/// Multiplicative airflow factor at time `t` (1 = normal breathing).
fn flow_factor(t: f64, events: &[PlantedEvent]) -> f64 {
    let mut f = 1.0f64;
    for e in events {
        if let Some(att) = e.attenuation {
            let w = raised_window(t, e.onset_s, e.onset_s + e.duration_s, 0.5);
            f = f.min(1.0 - att * w);
        }
    }
    f
}

fn respiration(g: &mut Gen, n: usize, time: &dyn Fn(usize) -> f64, events: &[PlantedEvent]) -> Vec<f64> {
    let phase = g.phase();
    (0..n)
        .map(|i| {
            let t = time(i);
            flow_factor(t, events) * (TAU * 0.25 * t + phase).sin() + 0.02 * g.n()
        })
        .collect()
}

fn saturation(g: &mut Gen, n: usize, time: &dyn Fn(usize) -> f64, events: &[PlantedEvent]) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = time(i);
            let mut dip = 0.0f64;
            for e in events {
                let Some(att) = e.attenuation else { continue };
                let start = e.onset_s + SATURATION_LAG_S;
                let end = e.onset_s + e.duration_s + SATURATION_LAG_S;
                dip = dip.max(6.0 * att * raised_window(t, start, end, 5.0));
            }
            96.0 - dip + 0.1 * g.n()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Assembly;
    use crate::dataset::{build_examples, DatasetConfig};
    use crate::record::mean_std;

    #[test]
    fn deterministic_in_seed() {
        let cfg = SynthConfig::new(3, 600.0, 8);
        let (a, ta) = generate_record(&cfg).unwrap();
        let (b, tb) = generate_record(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_record(&SynthConfig::new(4, 600.0, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_rates_only_stages() {
        let mut cfg = SynthConfig::new(1, 900.0, 6);
        cfg.arousals_per_hour = 0.0;
        cfg.respiratory_per_hour = 0.0;
        let (r, _) = generate_record(&cfg).unwrap();
        assert!(r.annotations.iter().all(|a| a.label.is_stage()));
        assert_eq!(r.annotations.len(), 30);
    }

    #[test]
    fn montage_names() {
        assert_eq!(montage(4), vec!["EEG C3", "EEG C4", "EOG", "EMG"]);
        assert_eq!(montage(8).len(), 8);
        assert!(generate_record(&SynthConfig::new(1, 600.0, 5)).is_err());
        assert!(generate_record(&SynthConfig::new(1, 20.0, 4)).is_err());
    }

    #[test]
    fn planted_events_survive_dataset_build() {
        let cfg = SynthConfig::new(21, 2.0 * 3600.0, 8);
        let (r, truth) = generate_record(&cfg).unwrap();
        assert!(!truth.events.is_empty());
        let tiled: f64 = r.annotations.iter().filter(|a| a.label.is_stage()).map(|a| a.duration_s).sum();
        assert_eq!(tiled, r.duration_s);
        let mut dc = DatasetConfig::new(Assembly::SAR, montage(8));
        dc.context_s = 0.0;
        let built = build_examples(&r, &dc).unwrap();
        assert_eq!(built.stats.dropped_ties, 0);
        assert_eq!(built.stats.unowned_events, 0);
        let owned: usize = built
            .examples
            .iter()
            .map(|e| (e.target.values[5] == 1.0) as usize + (e.target.values[8] == 1.0) as usize)
            .sum();
        assert_eq!(owned, truth.events.len());
    }

    #[test]
    fn apnea_flattens_airflow() {
        let mut cfg = SynthConfig::new(5, 3.0 * 3600.0, 6);
        cfg.apnea_fraction = 1.0;
        let (r, truth) = generate_record(&cfg).unwrap();
        let flow = &r.channel("Airflow").unwrap().samples;
        let (_, base_std) = mean_std(&flow[..]);
        let mut checked = 0;
        for e in truth.events.iter().filter(|e| e.label == EventLabel::Apnea) {
            let lo = ((e.onset_s + 0.5) * 100.0) as usize;
            let hi = ((e.onset_s + e.duration_s - 0.5) * 100.0) as usize;
            let (_, s) = mean_std(&flow[lo..hi]);
            assert!(s * s <= 0.1 * base_std * base_std, "{} vs {}", s * s, base_std * base_std);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn hypnogram_follows_transition_matrix() {
        let cfg = SynthConfig::new(8, 8.0 * 3600.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hyp = draw_hypnogram(&cfg, &mut rng);
        let mut counts = [[0.0f64; 5]; 5];
        for w in hyp.windows(2) {
            counts[w[0].stage_index().unwrap()][w[1].stage_index().unwrap()] += 1.0;
        }
        let total: f64 = counts.iter().flatten().sum();
        let mut weighted_tv = 0.0;
        for (i, row) in counts.iter().enumerate() {
            let n: f64 = row.iter().sum();
            if n == 0.0 {
                continue;
            }
            let tv: f64 = row
                .iter()
                .zip(&cfg.transitions[i])
                .map(|(c, p)| (c / n - p).abs())
                .sum::<f64>()
                / 2.0;
            weighted_tv += n / total * tv;
        }
        assert!(weighted_tv < 0.1, "{weighted_tv}");
    }
}
