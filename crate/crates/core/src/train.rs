//! Objective assembly, the optimisation loop, and run manifests.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{reject, Error, Result};
use crate::lmhead::HeadMode;
use crate::model::{noise_seed, LossTerms, LossWeights, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig, OneCycle};
use crate::params::{rng_for, GradBuffer};
use crate::scalar::Scalar;
use crate::synthdata::Sample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Full,
    NoCue,
    /// Binary question, no style branch.
    NoStyle,
    /// Classification heads instead of the frozen language model.
    ClsHead,
}

impl ModelVariant {
    /// Applies the variant's toggles on top of `cfg`.
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Self::Full => {}
            Self::NoCue => c.cue = false,
            Self::NoStyle => {
                c.binary_mode = true;
                c.style_branch = false;
            }
            Self::ClsHead => c.head_mode = HeadMode::ClsHead,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_frac: f64,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub model_variant: ModelVariant,
    /// Abort when the total loss stays above this multiple of the first step's loss...
    pub divergence_factor: f64,
    /// ...for this many consecutive steps.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 32,
            base_lr: 4e-4,
            peak_lr: 2e-3,
            final_lr: 1e-6,
            warmup_frac: 0.3,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            model_variant: ModelVariant::Full,
            divergence_factor: 10.0,
            divergence_patience: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return reject("epochs and batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.peak_lr >= self.base_lr) {
            return reject(format!("need 0 < base_lr <= peak_lr, got {} and {}", self.base_lr, self.peak_lr));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub total: f64,
}

/// Batch objective: per-term means over the batch and their weighted sum. With
/// `grads` the weighted objective is also back-propagated into it.
pub fn total_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[&Sample],
    weights: &LossWeights,
    step: u64,
    seed: u64,
    mut grads: Option<&mut GradBuffer<T>>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return reject("empty batch");
    }
    let inv = 1.0 / batch.len() as f64;
    let mut sums = LossTerms::default();
    for (i, s) in batch.iter().enumerate() {
        let mut g = model.graph();
        let (_, vars) = model.sample_losses(&mut g, s, noise_seed(seed, step, (s.index as u64) << 8 | i as u64))?;
        let t = vars.values(&g);
        for (name, v) in [("L_c", t.content), ("L_s", t.style), ("L_cls", t.cls), ("L_cue", t.cue)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name });
            }
        }
        sums.content += t.content;
        sums.style += t.style;
        sums.cls += t.cls;
        sums.cue += t.cue;
        if let Some(buf) = grads.as_deref_mut() {
            if let Some(obj) = vars.weighted(&mut g, weights, inv) {
                let gr = g.backward(obj);
                g.accumulate(&gr, buf, None);
            }
        }
    }
    let terms = LossTerms {
        content: sums.content * inv,
        style: sums.style * inv,
        cls: sums.cls * inv,
        cue: sums.cue * inv,
    };
    Ok(LossReport { step: step as usize, lr: 0.0, terms, total: weights.combine(&terms) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub trace: Vec<LossReport>,
    pub steps: usize,
    pub lm_hash_before: Option<String>,
    pub lm_hash_after: Option<String>,
}

/// Trains `model` in place on `data`.
pub fn fit<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut Model<T>,
    data: &[Sample],
    seed: u64,
    mut on_step: impl FnMut(&LossReport),
) -> Result<FitSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return reject("training split is empty");
    }
    if model.cfg.uses_lm() && model.lm.is_none() {
        return reject("frozen_lm head mode needs a pretrained language model");
    }
    let lm_hash_before = model.lm_store().map(|s| s.content_hash());
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = OneCycle::new(cfg.base_lr, cfg.peak_lr, cfg.final_lr.min(cfg.peak_lr), total_steps, cfg.warmup_frac)?;
    let mut opt = AdamW::new(&model.store, cfg.optimizer.clone());
    let mut rng = rng_for(seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = model.zero_grads();
    let mut trace = Vec::with_capacity(total_steps);
    let mut initial = None;
    let mut over = 0usize;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            grads.zero();
            let mut report = total_loss(model, &batch, &cfg.weights, step as u64, seed, Some(&mut grads))?;
            let lr = schedule.lr(step);
            report.lr = lr;
            opt.step(&mut model.store, &grads, lr);
            let init: f64 = *initial.get_or_insert(report.total);
            if report.total > cfg.divergence_factor * init {
                over += 1;
                if over >= cfg.divergence_patience {
                    return Err(Error::Diverged(format!(
                        "total loss {:.4} stayed above {}× the initial {:.4} for {over} steps (step {step}, lr {lr:.2e})",
                        report.total, cfg.divergence_factor, init
                    )));
                }
            } else {
                over = 0;
            }
            on_step(&report);
            trace.push(report);
            step += 1;
        }
    }
    let lm_hash_after = model.lm_store().map(|s| s.content_hash());
    if lm_hash_before != lm_hash_after {
        return Err(Error::Training("frozen language model changed during training".into()));
    }
    Ok(FitSummary { trace, steps: step, lm_hash_before, lm_hash_after })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over every sample's labels and pixels.
pub fn data_hash(data: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in data {
        h.update([s.content_label, s.style.index() as u8]);
        h.update(s.seed.to_le_bytes());
        for v in &s.image {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub lm_hash: Option<String>,
    pub model_hash: String,
    pub steps: usize,
    pub final_loss: LossReport,
    pub metrics: serde_json::Value,
}
