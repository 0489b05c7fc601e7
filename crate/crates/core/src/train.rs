//! Training loop: SGD with momentum on a step-decayed learning rate, focal
//! loss, evaluation after every epoch and best-macro-F1 model selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::loss::{focal_loss_batch, FocalLossParams};
use crate::metrics::{self, MetricsReport};
use crate::model::FusionNet;
use crate::nn::{Mode, Parameterized};

/// Focal-loss settings. Without an explicit `alpha`, the class factors are
/// the normalized inverse class frequencies of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: None,
        }
    }
}

impl LossConfig {
    pub fn resolve(&self, class_counts: &[usize]) -> Result<FocalLossParams> {
        match &self.alpha {
            Some(alpha) => {
                let params = FocalLossParams {
                    gamma: self.gamma,
                    alpha: alpha.clone(),
                };
                params.validate(class_counts.len())?;
                Ok(params)
            }
            None => FocalLossParams::inverse_frequency(self.gamma, class_counts),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    /// The learning rate is multiplied by `decay_factor` after each of these
    /// epochs, i.e. the decayed rate applies from the following epoch on.
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub batch_cases: usize,
    pub image_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// The published protocol: 200 epochs at 800 px.
    pub fn paper() -> Self {
        Self {
            epochs: 200,
            lr0: 1e-3,
            decay_factor: 0.1,
            decay_epochs: vec![20, 40, 60, 80],
            momentum: 0.9,
            batch_cases: 16,
            image_size: 800,
            seed: 0,
            loss: LossConfig::default(),
        }
    }

    /// Same structure scaled to a desktop: 30 epochs at 64 px.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            decay_epochs: vec![10, 20],
            image_size: 64,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::config(
                "preset",
                format!("unknown preset `{name}` (paper or desk)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be finite and non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay_epochs", "must be strictly increasing"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_cases == 0 {
            return Err(Error::config("batch_cases", "must be at least 1"));
        }
        if self.image_size < 32 {
            return Err(Error::config("image_size", "must be at least 32 pixels"));
        }
        if !self.loss.gamma.is_finite() || self.loss.gamma < 0.0 {
            return Err(Error::config(
                "loss.gamma",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let decays = config.decay_epochs.iter().filter(|&&d| d < epoch).count();
    config.lr0 * config.decay_factor.powi(decays as i32)
}

/// Heavy-ball SGD: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to every learnable parameter from its gradient.
    pub fn step(&mut self, model: &mut impl Parameterized, lr: f64) {
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        let mut idx = 0;
        model.visit_params_mut("", &mut |_, p| {
            if !p.learnable {
                return;
            }
            if velocity.len() <= idx {
                velocity.push(vec![0.0; p.len()]);
            }
            let v = &mut velocity[idx];
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
            idx += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: MetricsReport,
    /// Seconds spent on the epoch. Not part of the serialized record, so a
    /// history file is identical across runs of the same configuration.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn wall_time(&self) -> f64 {
        self.records.iter().map(|r| r.wall_time).sum()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainingHistory,
    /// Weights of the epoch with the highest test macro-F1 (earliest on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_report: MetricsReport,
    pub final_report: MetricsReport,
}

/// Trains `model` in place; on return it holds the final-epoch weights.
/// `on_epoch` sees every record as soon as it is complete.
pub fn train_model(
    model: &mut FusionNet,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let loss = config.loss.resolve(&train.class_counts())?;
    let mut sgd = Sgd::new(config.momentum);
    let mut history = TrainingHistory::default();
    let mut best: Option<(usize, MetricsReport, Checkpoint)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, config);
        let mut total = 0.0;
        let mut seen = 0;
        for (b, indices) in make_batches(train.len(), config.batch_cases, config.seed, epoch, true)
            .into_iter()
            .enumerate()
        {
            let batch = train.batch(&indices)?;
            model.zero_grad();
            let logits = model.forward(&batch.examined, &batch.auxiliary, Mode::Train)?;
            let non_finite = |value| Error::NonFiniteLoss {
                epoch,
                batch: b + 1,
                value,
            };
            if let Some(&bad) = logits.data().iter().find(|v| !v.is_finite()) {
                return Err(non_finite(bad));
            }
            let (value, grad) = focal_loss_batch(&logits, &batch.labels, &loss)?;
            if !value.is_finite() {
                return Err(non_finite(value));
            }
            model.backward(&grad)?;
            sgd.step(model, lr);
            total += value * indices.len() as f64;
            seen += indices.len();
        }
        let report = evaluate(model, test, config.batch_cases)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / seen as f64,
            eval: report.clone(),
            wall_time: start.elapsed().as_secs_f64(),
        };
        if best
            .as_ref()
            .is_none_or(|(_, r, _)| report.macro_f1 > r.macro_f1)
        {
            best = Some((epoch, report, Checkpoint::capture(model, String::new())));
        }
        on_epoch(&record);
        history.records.push(record);
    }

    let final_report = match history.records.last() {
        Some(r) => r.eval.clone(),
        None => evaluate(model, test, config.batch_cases)?,
    };
    let (best_epoch, best_report, best) = best.unwrap_or_else(|| {
        (
            0,
            final_report.clone(),
            Checkpoint::capture(model, String::new()),
        )
    });
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        best_report,
        final_report,
    })
}

/// Positive-class scores and predictions for every case, in eval mode.
pub fn predict(
    model: &mut FusionNet,
    data: &Dataset,
    batch_cases: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let mut scores = Vec::with_capacity(data.len());
    let mut preds = Vec::with_capacity(data.len());
    for indices in make_batches(data.len(), batch_cases.max(1), 0, 0, false) {
        let batch = data.batch(&indices)?;
        let logits = model.forward(&batch.examined, &batch.auxiliary, Mode::Eval)?;
        FusionNet::ensure_batch_logits(&logits)?;
        let (s, p) = FusionNet::predict(&logits);
        scores.extend(s);
        preds.extend(p);
    }
    Ok((scores, preds))
}

pub fn evaluate(
    model: &mut FusionNet,
    data: &Dataset,
    batch_cases: usize,
) -> Result<MetricsReport> {
    let (scores, preds) = predict(model, data, batch_cases)?;
    metrics::report(&preds, &scores, &data.labels())
}
