//! Loss, SGD with momentum and the early-stopped training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Assembly, Layout};
use crate::dataset::Example;
use crate::error::{invalid, Error, Result};
use crate::model::{backward_into, forward, forward_trace, ModelParams, Scalar};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Categorical CE + binary CE + coordinate MSE, summed unweighted.
    Multi,
    /// MSE over the whole output vector.
    Single,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Multi => "multi",
            LossMode::Single => "single",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(LossMode::Multi),
            "single" => Ok(LossMode::Single),
            _ => Err(invalid!("unknown loss mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyLoss {
    pub stage: f64,
    pub arousal: f64,
    pub respiratory: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub categorical_ce: f64,
    pub binary_ce: f64,
    pub mse: f64,
    /// Each family's contribution to `total`.
    pub per_family: FamilyLoss,
}

impl LossReport {
    fn add_scaled(&mut self, other: &LossReport, w: f64) {
        self.total += w * other.total;
        self.categorical_ce += w * other.categorical_ce;
        self.binary_ce += w * other.binary_ce;
        self.mse += w * other.mse;
        self.per_family.stage += w * other.per_family.stage;
        self.per_family.arousal += w * other.per_family.arousal;
        self.per_family.respiratory += w * other.per_family.respiratory;
    }

    /// Example-weighted mean of per-example reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let mut out = LossReport::default();
        if reports.is_empty() {
            return out;
        }
        let w = 1.0 / reports.len() as f64;
        for r in reports {
            out.add_scaled(r, w);
        }
        out
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// Loss of one example and its gradient with respect to the activated
/// outputs. Absent-event components are scored against their zero targets.
pub fn loss_and_grad<T: Scalar>(
    pred: &[T],
    target: &[f64],
    assembly: Assembly,
    mode: LossMode,
) -> Result<(LossReport, Vec<T>)> {
    let layout = assembly.layout();
    if pred.len() != layout.len || target.len() != layout.len {
        return Err(invalid!(
            "prediction/target lengths {}/{} do not match assembly {assembly}",
            pred.len(),
            target.len()
        ));
    }
    let p: Vec<f64> = pred.iter().map(|v| v.to_f64().unwrap()).collect();
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite activation at component {i}")));
    }
    let mut grad = vec![0.0f64; layout.len];
    let mut rep = LossReport::default();

    match mode {
        LossMode::Single => {
            let n = layout.len as f64;
            for i in 0..layout.len {
                let d = p[i] - target[i];
                rep.mse += d * d / n;
                grad[i] = 2.0 * d / n;
            }
            rep.total = rep.mse;
            rep.per_family = family_split_single(&layout, &p, target);
        }
        LossMode::Multi => {
            let (stage_ce, cls_ce) = categorical_terms(&layout, &p, target, &mut grad);
            rep.categorical_ce = stage_ce + cls_ce;
            rep.per_family.stage = stage_ce;
            rep.per_family.respiratory += cls_ce;

            let presence = layout.presence_slots();
            let n_bin = presence.len() as f64;
            for &i in &presence {
                let (q, clamped) = clamp_prob(p[i]);
                let t = target[i];
                let l = -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()) / n_bin;
                rep.binary_ce += l;
                *family_slot(&layout, &mut rep.per_family, i) += l;
                if !clamped {
                    grad[i] = (-t / q + (1.0 - t) / (1.0 - q)) / n_bin;
                }
            }

            let coords = layout.coordinate_slots();
            let n_coord = coords.len() as f64;
            for &i in &coords {
                let d = p[i] - target[i];
                let l = d * d / n_coord;
                rep.mse += l;
                *family_slot(&layout, &mut rep.per_family, i) += l;
                grad[i] = 2.0 * d / n_coord;
            }
            rep.total = rep.categorical_ce + rep.binary_ce + rep.mse;
        }
    }
    if !rep.total.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((rep, grad.into_iter().map(|g| T::from_f64(g).unwrap()).collect()))
}

/// Loss only.
pub fn loss<T: Scalar>(pred: &[T], target: &[f64], assembly: Assembly, mode: LossMode) -> Result<LossReport> {
    loss_and_grad(pred, target, assembly, mode).map(|(r, _)| r)
}

fn categorical_terms(layout: &Layout, p: &[f64], t: &[f64], grad: &mut [f64]) -> (f64, f64) {
    let mut terms = [0.0; 2];
    for (gi, group) in layout.softmax_groups().into_iter().enumerate() {
        for i in group {
            if t[i] == 0.0 {
                continue;
            }
            let (q, clamped) = clamp_prob(p[i]);
            terms[gi] -= t[i] * q.ln();
            if !clamped {
                grad[i] = -t[i] / q;
            }
        }
    }
    (terms[0], terms[1])
}

fn family_slot<'a>(layout: &Layout, fam: &'a mut FamilyLoss, index: usize) -> &'a mut f64 {
    match layout.arousal {
        Some(a) if [a.presence, a.x, a.w].contains(&index) => &mut fam.arousal,
        _ if index < Layout::STAGE_LEN => &mut fam.stage,
        _ => &mut fam.respiratory,
    }
}

fn family_split_single(layout: &Layout, p: &[f64], t: &[f64]) -> FamilyLoss {
    let mut fam = FamilyLoss::default();
    let n = layout.len as f64;
    for i in 0..layout.len {
        *family_slot(layout, &mut fam, i) += (p[i] - t[i]).powi(2) / n;
    }
    fam
}

/// Classical momentum: `v <- momentum * v - lr * g; p <- p + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(invalid!("parameter, gradient and velocity sizes differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
    }
    let lr = T::from_f64(lr).unwrap();
    let mu = T::from_f64(momentum).unwrap();
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss_mode: LossMode,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            max_epochs: 100,
            patience: Some(5),
            learning_rate: 0.001,
            momentum: 0.9,
            loss_mode: LossMode::Multi,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == Some(0) {
            return Err(invalid!("batch size, epochs and patience must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossReport,
    pub validation: LossReport,
    /// Window-level stage accuracy on the validation examples.
    pub validation_stage_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records `loss` for 1-based `epoch`. Returns (improved, should_stop).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.patience.is_some_and(|p| self.since_best >= p))
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Summary of running the model over a set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossReport,
    pub stage_accuracy: f64,
    pub outputs: Vec<Vec<f64>>,
}

/// Inference over `examples` (dropout off).
pub fn evaluate(params: &ModelParams<f32>, examples: &[&Example], mode: LossMode) -> Result<Evaluation> {
    let assembly = params.config.assembly;
    let results = crate::par::map_collect(examples, |ex| -> Result<(LossReport, Vec<f64>)> {
        let out = forward(params, &ex.input)?;
        let rep = loss(&out, &ex.target.values, assembly, mode)?;
        Ok((rep, out.iter().map(|&v| f64::from(v)).collect()))
    });
    let mut reports = Vec::with_capacity(examples.len());
    let mut outputs = Vec::with_capacity(examples.len());
    let mut correct = 0usize;
    for (r, ex) in results.into_iter().zip(examples) {
        let (rep, out) = r?;
        if crate::codec::argmax(&out[..Layout::STAGE_LEN]) == ex.target.stage_index() {
            correct += 1;
        }
        reports.push(rep);
        outputs.push(out);
    }
    Ok(Evaluation {
        loss: LossReport::mean(&reports),
        stage_accuracy: if examples.is_empty() {
            0.0
        } else {
            correct as f64 / examples.len() as f64
        },
        outputs,
    })
}

fn dropout_seed(shuffle_seed: u64, epoch: usize, position: usize) -> u64 {
    shuffle_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(position as u64)
}

/// Mean loss and mean gradient over one batch.
pub fn batch_gradient(
    params: &ModelParams<f32>,
    batch: &[&Example],
    mode: LossMode,
    seeds: &[u64],
) -> Result<(LossReport, ModelParams<f32>)> {
    let assembly = params.config.assembly;
    let scale = 1.0 / batch.len() as f32;
    let one = |ex: &Example, seed: u64, grads: &mut ModelParams<f32>| -> Result<LossReport> {
        let trace = forward_trace(params, &ex.input, true, seed)?;
        let (rep, mut dy) = loss_and_grad(&trace.outputs, &ex.target.values, assembly, mode)?;
        dy.iter_mut().for_each(|d| *d *= scale);
        backward_into(params, &trace, &dy, grads)?;
        Ok(rep)
    };
    let mut total = params.zeros_like();
    let mut reports = Vec::with_capacity(batch.len());
    if crate::par::is_parallel() {
        let pairs: Vec<(&Example, u64)> = batch.iter().copied().zip(seeds.iter().copied()).collect();
        let per_example = crate::par::map_collect(&pairs, |(ex, seed)| {
            let mut g = params.zeros_like();
            one(ex, *seed, &mut g).map(|r| (r, g))
        });
        for r in per_example {
            let (rep, g) = r?;
            for (a, b) in total.data.iter_mut().zip(&g.data) {
                *a += *b;
            }
            reports.push(rep);
        }
    } else {
        // Accumulating per example into a zeroed scratch buffer keeps the
        // summation order identical to the parallel path.
        let mut g = params.zeros_like();
        for (ex, &seed) in batch.iter().zip(seeds) {
            g.data.iter_mut().for_each(|v| *v = 0.0);
            reports.push(one(ex, seed, &mut g)?);
            for (a, b) in total.data.iter_mut().zip(&g.data) {
                *a += *b;
            }
        }
    }
    Ok((LossReport::mean(&reports), total))
}

/// Trains from `init`, evaluating on `validation` after every epoch.
/// `on_epoch` sees each epoch's log and may return `false` to stop early.
pub fn train_with(
    init: ModelParams<f32>,
    train_set: &[&Example],
    validation: &[&Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> bool,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(invalid!("training and validation sets must be non-empty"));
    }
    let mut params = init;
    let mut velocity = vec![0.0f32; params.data.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(train_set.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| train_set[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|k| dropout_seed(cfg.shuffle_seed, epoch, b * cfg.batch_size + k))
                .collect();
            let (rep, grads) = batch_gradient(&params, &batch, cfg.loss_mode, &seeds).map_err(|e| {
                Error::Numeric(format!("epoch {epoch}, batch {b}: {e}"))
            })?;
            sgd_step(&mut params.data, &grads.data, &mut velocity, cfg.learning_rate, cfg.momentum)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            for _ in 0..chunk.len() {
                reports.push(rep);
            }
        }
        let eval = evaluate(&params, validation, cfg.loss_mode)?;
        if !eval.loss.total.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: non-finite validation loss")));
        }
        let log = EpochLog {
            epoch,
            train: LossReport::mean(&reports),
            validation: eval.loss,
            validation_stage_accuracy: eval.stage_accuracy,
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} (stage {:.4} arousal {:.4} respiratory {:.4}) stage acc {:.3}",
            log.train.total,
            log.validation.total,
            log.validation.per_family.stage,
            log.validation.per_family.arousal,
            log.validation.per_family.respiratory,
            log.validation_stage_accuracy
        );
        let (improved, stop) = stopper.observe(epoch, eval.loss.total);
        if improved {
            best = params.clone();
        }
        let keep_going = on_epoch(&log);
        epochs.push(log);
        if stop {
            stopped_early = true;
            break;
        }
        if !keep_going {
            break;
        }
    }
    let log = TrainLog {
        epochs_run: epochs.len(),
        epochs,
        stopped_early,
        best_epoch: stopper.best_epoch(),
        best_validation_loss: stopper.best_loss(),
    };
    Ok((best, log))
}

pub fn train(
    init: ModelParams<f32>,
    train_set: &[&Example],
    validation: &[&Example],
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    train_with(init, train_set, validation, cfg, |_| true)
}

pub fn write_trainlog(path: &std::path::Path, log: &TrainLog) -> Result<()> {
    let mut body = String::new();
    for e in &log.epochs {
        body.push_str(&serde_json::to_string(e).map_err(|e| Error::json("epoch log", e))?);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
