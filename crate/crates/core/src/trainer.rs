//! Few-shot training with Adam on softmax cross-entropy.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{self, DataError, TrainingSplits};
use crate::metrics::{self, BinaryMetric, MetricError};
use crate::models::{self, classification_loss, ModelError, ModelParams, ModelSpec, Network};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss diverged to {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("validation: {0}")]
    Metric(#[from] MetricError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    LastEpoch,
    BestVal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub per_class: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub selection: Selection,
    /// Evaluate the validation split after every epoch.
    pub validate: bool,
    pub binary_metric: BinaryMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            per_class: 50,
            batch_size: 16,
            epochs: 23,
            seeds: vec![3, 5, 7, 11, 13],
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            selection: Selection::LastEpoch,
            validate: true,
            binary_metric: BinaryMetric::Auc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.per_class == 0 {
            return fail("batch_size and per_class must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.selection == Selection::BestVal && !self.validate {
            return fail("best_val selection needs validate = true");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub selected_epoch: usize,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps }
    }
}

/// One bias-corrected Adam update; parameters without a gradient are skipped.
pub fn adam_step(params: &mut ModelParams, grads: &BTreeMap<String, Tensor<f32>>, state: &mut AdamState, h: AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let n = p.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = f64::from(gi);
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let update = h.lr * (*mi / c1) / ((*vi / c2).sqrt() + h.eps);
            *w = (f64::from(*w) - update) as f32;
        }
    }
}

/// Loss and parameter gradients for one mini-batch.
pub fn loss_and_grads(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &data::ImageBatch,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>), TrainError> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(batch.images().clone());
    let logits = models::forward(spec, &mut tape, &bound, x, &Default::default())?;
    let loss = classification_loss(&mut tape, logits, batch.labels())?;
    let value = f64::from(tape.value(loss).item());
    let names: Vec<(String, _)> = bound.iter().map(|(n, v)| (n.to_string(), v)).collect();
    let mut grads = tape.backward(loss).map_err(ModelError::from)?;
    let grads = names.into_iter().filter_map(|(n, v)| grads.take(v).map(|g| (n, g))).collect();
    Ok((value, grads))
}

/// Trains a fresh model for one seed.
///
/// The seed feeds three independent streams: parameter init, the few-shot
/// subset draw and per-epoch shuffles.
pub fn train(spec: &ModelSpec, splits: TrainingSplits<'_>, cfg: &TrainConfig, seed: u64) -> Result<(ModelParams, TrainLog), TrainError> {
    cfg.validate()?;
    let mut params = models::build(spec, seed)?;
    let subset = data::fewshot_subset(&splits, cfg.per_class, seed)?;
    let shuffle_seed = rng::derive_seed(seed, &["shuffle"]);
    let hyper = AdamHyper::from(cfg);
    let mut state = AdamState::default();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = data::batches(&subset, cfg.batch_size, shuffle_seed, epoch)?;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = loss_and_grads(spec, &params, batch)?;
            if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(TrainError::Divergence { epoch, batch: b, loss });
            }
            adam_step(&mut params, &grads, &mut state, hyper);
            total += loss;
        }
        let val_metric = if cfg.validate {
            let net = Network::new(spec, &params);
            let r = metrics::evaluate(&net, splits.val, splits.name.task(), splits.name.num_classes(), cfg.binary_metric)?;
            Some(r.value)
        } else {
            None
        };
        let train_loss = total / batches.len() as f64;
        log::debug!("{} {} seed {seed} epoch {epoch}: loss {train_loss:.4} val {val_metric:?}", spec.arch, splits.name);
        log.epochs.push(EpochLog { epoch, train_loss, val_metric });
        if cfg.selection == Selection::BestVal {
            let v = val_metric.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, params.clone()));
                log.selected_epoch = epoch;
            }
        }
    }
    match best {
        Some((_, p)) => Ok((p, log)),
        None => {
            log.selected_epoch = cfg.epochs;
            Ok((params, log))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f32) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    fn grad(v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    const H: AdamHyper = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    #[test]
    fn defaults_match_the_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.per_class, c.batch_size, c.epochs), (50, 16, 23));
        assert_eq!(c.seeds, vec![3, 5, 7, 11, 13]);
        assert_eq!(c.selection, Selection::LastEpoch);
        c.validate().unwrap();
        assert!(TrainConfig { epochs: 0, ..c }.validate().is_err());
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = scalar_params(0.5);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad(0.0), &mut s, H);
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);
        assert_eq!(s.m["w"], vec![0.0]);
        assert_eq!(s.v["w"], vec![0.0]);
    }

    #[test]
    fn two_hand_computed_steps() {
        // step 1, g = 2: m = 0.2, v = 0.004, m̂ = 2, v̂ = 4 → Δ = 0.1·2/(2+1e-8)
        // step 2, g = −1: m = 0.08, v = 0.004996,
        //   m̂ = 0.08/0.19, v̂ = 0.004996/0.001999
        let mut p = scalar_params(1.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad(2.0), &mut s, H);
        let w1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((f64::from(p.get("w").unwrap().data()[0]) - w1).abs() < 1e-7);
        adam_step(&mut p, &grad(-1.0), &mut s, H);
        let (mh, vh) = (0.08 / 0.19, 0.004996 / (1.0 - 0.999f64.powi(2)));
        let w2 = w1 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((f64::from(p.get("w").unwrap().data()[0]) - w2).abs() < 1e-6);
        assert!((s.m["w"][0] - 0.08).abs() < 1e-12);
        assert!((s.v["w"][0] - 0.004996).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::default();
        let h = AdamHyper { lr: 1e-3, ..H };
        let mut prev = 0.0f64;
        for _ in 0..200 {
            adam_step(&mut p, &grad(0.37), &mut s, h);
            let now = f64::from(p.get("w").unwrap().data()[0]);
            let step = prev - now;
            assert!((step - 1e-3).abs() < 1e-5, "{step}");
            prev = now;
        }
    }

    #[test]
    fn log_is_json_lines() {
        let log = TrainLog {
            epochs: vec![
                EpochLog { epoch: 1, train_loss: 0.5, val_metric: Some(0.6) },
                EpochLog { epoch: 2, train_loss: 0.25, val_metric: None },
            ],
            selected_epoch: 2,
        };
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], r#"{"epoch":1,"train_loss":0.5,"val_metric":0.6}"#);
        assert_eq!(lines[1], r#"{"epoch":2,"train_loss":0.25,"val_metric":null}"#);
    }
}
