//! Run configuration: one nested section per module, unknown keys rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalkit::{EvalConfig, HterPolicy};
use crate::fusion::FusionConfig;
use crate::lmhead::{HeadMode, LmConfig, PretrainConfig};
use crate::model::ModelConfig;
use crate::qformer::QFormerConfig;
use crate::synthdata::DomainSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub meta: DomainSpec,
    pub meta_samples: usize,
    /// In-domain evaluation split drawn from the meta domain with its own seed.
    pub heldout_samples: usize,
    pub target_domains: usize,
    pub target_samples: usize,
    /// Share of real faces in each target split; spoof types stay balanced.
    pub target_live_fraction: f64,
    pub balanced: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            meta: DomainSpec::default(),
            meta_samples: 2000,
            heldout_samples: 440,
            target_domains: 4,
            target_samples: 440,
            target_live_fraction: 0.5,
            balanced: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Style questions asked, in illumination, environment, camera order.
    pub style_questions: usize,
    /// Single yes/no question instead of the content question; needs the style branch off.
    pub binary_mode: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { style_questions: 3, binary_mode: false }
    }
}

/// Component toggles; `train.model_variant` is applied on top of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentConfig {
    pub content_branch: bool,
    pub style_branch: bool,
    pub cue: bool,
    pub head_mode: HeadMode,
}

impl Default for ComponentConfig {
    fn default() -> Self {
        Self { content_branch: true, style_branch: true, cue: true, head_mode: HeadMode::FrozenLm }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Independent training replicates; replicate `r` uses seed `seed + r`.
    pub replicates: usize,
    pub data: DataConfig,
    pub text: TextConfig,
    pub components: ComponentConfig,
    pub backbone: EncoderConfig,
    pub qformer: QFormerConfig,
    pub lm: LmConfig,
    pub lm_pretrain: PretrainConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            replicates: 3,
            data: DataConfig::default(),
            text: TextConfig::default(),
            components: ComponentConfig::default(),
            backbone: EncoderConfig::default(),
            qformer: QFormerConfig::default(),
            lm: LmConfig::default(),
            lm_pretrain: PretrainConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn at(path: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Rejected(message) => Error::Config { path: path.into(), message },
        other => other,
    })
}

fn check(ok: bool, path: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config { path: path.into(), message: message.into() })
    }
}

impl RunConfig {
    /// Architecture after component toggles and the model variant.
    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig {
            encoder: self.backbone.clone(),
            qformer: self.qformer.clone(),
            lm: self.lm.clone(),
            fusion: self.fusion.clone(),
            content_branch: self.components.content_branch,
            style_branch: self.components.style_branch,
            cue: self.components.cue,
            head_mode: self.components.head_mode,
            binary_mode: self.text.binary_mode,
            style_questions: self.text.style_questions,
            granularity: self.data.meta.label_granularity,
        };
        self.train.model_variant.apply(&base)
    }

    /// Semantic checks; errors carry the offending key path.
    pub fn validate(&self) -> Result<()> {
        at("data.meta", self.data.meta.validate())?;
        check(self.data.meta_samples > 0, "data.meta_samples", "must be positive")?;
        check(self.data.target_domains > 0, "data.target_domains", "must be positive")?;
        check(self.data.target_samples > 0, "data.target_samples", "must be positive")?;
        check(
            self.data.target_live_fraction > 0.0 && self.data.target_live_fraction < 1.0,
            "data.target_live_fraction",
            "must lie strictly between 0 and 1",
        )?;
        check(self.data.heldout_samples > 0, "data.heldout_samples", "must be positive")?;
        check(
            self.backbone.image_size == self.data.meta.image_size,
            "backbone.image_size",
            format!("must equal data.meta.image_size ({})", self.data.meta.image_size),
        )?;
        check(self.replicates > 0, "replicates", "must be at least 1")?;
        check((1..=3).contains(&self.text.style_questions), "text.style_questions", "must be 1, 2 or 3")?;
        at("backbone", self.backbone.validate())?;
        at("qformer", self.qformer.validate(self.backbone.width))?;
        at("lm", self.lm.validate())?;
        at("fusion", self.fusion.validate(self.backbone.width))?;
        at("train", self.train.validate())?;
        check(self.lm_pretrain.max_steps > 0 && self.lm_pretrain.batch_size > 0, "lm_pretrain.max_steps", "steps and batch must be positive")?;
        check(self.lm_pretrain.eval_every > 0, "lm_pretrain.eval_every", "must be positive")?;
        check(
            self.eval.target_fpr > 0.0 && self.eval.target_fpr < 1.0,
            "eval.target_fpr",
            "must lie strictly between 0 and 1",
        )?;
        if let HterPolicy::Fixed(t) = self.eval.hter_policy {
            check(t.is_finite(), "eval.hter_policy.tau", "must be finite")?;
        }
        let m = self.model_config();
        check(
            !(m.binary_mode && m.style_branch),
            "text.binary_mode",
            "binary mode asks no style questions; disable components.style_branch or use train.model_variant = \"no_style\"",
        )?;
        at("model", m.validate())
    }

    /// Seeds of the training replicates.
    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

/// Every leaf key of the default configuration as `(dotted.path, default)`.
pub fn config_keys() -> Vec<(String, String)> {
    let v = serde_json::to_value(RunConfig::default()).expect("config serialises");
    let mut out = Vec::new();
    flatten("", &v, &mut out);
    out
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) if !map.is_empty() && !is_tagged_enum(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn is_tagged_enum(map: &serde_json::Map<String, serde_json::Value>) -> bool {
    map.contains_key("kind")
}
