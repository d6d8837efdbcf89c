//! The assembled detector: encoder, content and style branches, answer heads, fusion,
//! classifier and cue generator, with per-sample loss terms.

use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderConfig, FeatureBundle};
use crate::error::{reject, Error, Result};
use crate::fusion::{cue_loss, fake_score, Fusion, FusionConfig};
use crate::graph::{Graph, Var};
use crate::lmhead::{argmax, match_option, ClsHeads, DecodedAnswer, HeadMode, LmConfig, TinyLm};
use crate::params::{mix64, GradBuffer, Init, ParamStore, StoreKind};
use crate::qformer::{Branch, BranchId, BranchOutput, QFormerConfig};
use crate::scalar::Scalar;
use crate::synthdata::Sample;
use crate::tensor::Mat;
use crate::textproto::{build_question_at, QuestionType, TokenSeq, Vocabulary};

/// Architecture and component toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub qformer: QFormerConfig,
    pub lm: LmConfig,
    pub fusion: FusionConfig,
    pub content_branch: bool,
    pub style_branch: bool,
    pub cue: bool,
    pub head_mode: HeadMode,
    /// Ask the single yes/no question in the content branch; requires no style branch.
    pub binary_mode: bool,
    /// How many style questions (illumination, environment, camera in that order) to ask.
    pub style_questions: usize,
    /// Content label granularity the content question uses.
    pub granularity: u8,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            qformer: QFormerConfig::default(),
            lm: LmConfig::default(),
            fusion: FusionConfig::default(),
            content_branch: true,
            style_branch: true,
            cue: true,
            head_mode: HeadMode::FrozenLm,
            binary_mode: false,
            style_questions: 3,
            granularity: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.qformer.validate(self.encoder.width)?;
        self.lm.validate()?;
        self.fusion.validate(self.encoder.width)?;
        if self.binary_mode && self.style_branch {
            return reject("binary_mode removes the style branch; set style_branch = false");
        }
        if self.style_branch && !(1..=3).contains(&self.style_questions) {
            return reject(format!("style_questions must be 1..=3, got {}", self.style_questions));
        }
        if !(1..=3).contains(&self.granularity) {
            return reject(format!("granularity must be 1..=3, got {}", self.granularity));
        }
        if self.binary_mode && self.granularity != 3 {
            return reject("binary_mode does not use content granularity");
        }
        Ok(())
    }

    pub fn content_question(&self) -> QuestionType {
        if self.binary_mode {
            QuestionType::Binary
        } else {
            QuestionType::Content
        }
    }

    /// Style questions asked, in order.
    pub fn style_question_list(&self) -> Vec<QuestionType> {
        if self.style_branch {
            QuestionType::STYLE[..self.style_questions].to_vec()
        } else {
            Vec::new()
        }
    }

    /// Every question the branches answer, content first.
    pub fn questions(&self) -> Vec<QuestionType> {
        let mut q = Vec::new();
        if self.content_branch {
            q.push(self.content_question());
        }
        q.extend(self.style_question_list());
        q
    }

    pub fn uses_lm(&self) -> bool {
        self.head_mode == HeadMode::FrozenLm && (self.content_branch || self.style_branch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub cls: f64,
    pub cue: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { content: 0.4, style: 0.4, cls: 0.15, cue: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.content, self.style, self.cls, self.cue];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return reject("loss weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn combine(&self, t: &LossTerms) -> f64 {
        self.content * t.content + self.style * t.style + self.cls * t.cls + self.cue * t.cue
    }
}

/// Per-term losses. Disabled terms are exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub content: f64,
    pub style: f64,
    pub cls: f64,
    pub cue: f64,
}

/// Tokenised question text per question type.
#[derive(Clone, Debug)]
pub struct Prompt {
    pub qtype: QuestionType,
    pub tokens: TokenSeq,
}

/// Graph nodes of one forward pass.
pub struct Forward {
    pub features: FeatureBundle,
    pub content: Option<BranchOutput>,
    pub style: Vec<(QuestionType, BranchOutput)>,
    pub logits: Var,
    pub cue: Option<Var>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub content: Option<Branch>,
    pub style: Option<Branch>,
    pub fusion: Fusion,
    pub cls_heads: Option<ClsHeads>,
    /// Frozen language model; absent in classification-head mode and in LLM-free exports.
    pub lm: Option<(TinyLm, ParamStore<T>)>,
    prompts: Vec<Prompt>,
}

/// Everything the inference path reports for one image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub fake_score: f64,
    pub cue_map: Option<Vec<f64>>,
    pub answers: Vec<(QuestionType, DecodedAnswer)>,
}

impl<T: Scalar> Model<T> {
    /// Builds a fresh model. Parameter values depend only on `seed` and parameter names.
    pub fn new(cfg: &ModelConfig, vocab: &Vocabulary, lm: Option<(TinyLm, ParamStore<T>)>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(StoreKind::Model);
        let width = cfg.encoder.width;
        let mut init = Init::new(&mut store, seed, "");
        let encoder = Encoder::new(&mut init, &cfg.encoder)?;
        let lm_width = cfg.lm.width;
        let content = if cfg.content_branch {
            Some(Branch::new(&mut init, BranchId::Content, &cfg.qformer, width, vocab.len(), lm_width)?)
        } else {
            None
        };
        let style = if cfg.style_branch {
            Some(Branch::new(&mut init, BranchId::Style, &cfg.qformer, width, vocab.len(), lm_width)?)
        } else {
            None
        };
        let fusion = Fusion::new(&mut init, width, cfg.qformer.num_queries, &cfg.fusion, cfg.cue, cfg.content_branch, cfg.style_branch)?;
        let cls_heads = if cfg.head_mode == HeadMode::ClsHead {
            let qs: Vec<(QuestionType, usize)> = cfg.questions().iter().map(|&q| (q, q.num_options(cfg.granularity))).collect();
            Some(ClsHeads::new(&mut init, width, &qs))
        } else {
            None
        };
        if let Some((lm, lm_store)) = &lm {
            if lm.cfg != cfg.lm {
                return reject("language model configuration does not match the model configuration");
            }
            if !lm_store.is_frozen() {
                return reject("language model must be frozen before main training");
            }
        }
        let lm = if cfg.uses_lm() { lm } else { None };
        let prompts = QuestionType::ALL
            .iter()
            .map(|&q| {
                let (text, _) = build_question_at(q, cfg.granularity);
                Ok(Prompt { qtype: q, tokens: vocab.tokenize(&text)? })
            })
            .collect::<Result<Vec<_>>>()?;
        for p in &prompts {
            if cfg.qformer.num_queries + p.tokens.len() + cfg.lm.max_answer_len > cfg.lm.max_len {
                return reject("lm.max_len is too small for the soft prompt and answer");
            }
        }
        Ok(Self { cfg: cfg.clone(), vocab: vocab.clone(), store, encoder, content, style, fusion, cls_heads, lm, prompts })
    }

    pub fn prompt(&self, q: QuestionType) -> &[u32] {
        &self.prompts.iter().find(|p| p.qtype == q).expect("prompt for every question").tokens
    }

    pub fn lm_store(&self) -> Option<&ParamStore<T>> {
        self.lm.as_ref().map(|(_, s)| s)
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.store, self.lm_store())
    }

    /// Drops the language model in place; the score path is unaffected.
    pub fn strip_lm(&mut self) {
        self.lm = None;
    }

    /// Shared forward up to the classifier logits and cue map.
    pub fn forward(&self, g: &mut Graph<'_, T>, image: &Mat<T>, training: bool, noise_seed: u64) -> Result<Forward> {
        let img = g.constant(image.clone());
        self.forward_var(g, img, training, noise_seed)
    }

    /// As [`Model::forward`] with the image already a graph node.
    pub fn forward_var(&self, g: &mut Graph<'_, T>, img: Var, training: bool, noise_seed: u64) -> Result<Forward> {
        let features = self.encoder.features(g, img)?;
        let content = match &self.content {
            Some(b) => {
                let t = b.instruction(g, self.prompt(self.cfg.content_question()))?;
                Some(b.forward(g, t, features.f_c)?)
            }
            None => None,
        };
        let mut style = Vec::new();
        if let Some(b) = &self.style {
            for q in self.cfg.style_question_list() {
                let t = b.instruction(g, self.prompt(q))?;
                style.push((q, b.forward(g, t, features.f_s)?));
            }
        }
        let qc = match &content {
            Some(o) => o.processed_queries,
            None => g.param(self.fusion.content_placeholder.expect("placeholder for a disabled content branch")),
        };
        let qs = if style.is_empty() {
            g.param(self.fusion.style_placeholder.expect("placeholder for a disabled style branch"))
        } else {
            let parts: Vec<Var> = style.iter().map(|(_, o)| o.processed_queries).collect();
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = g.add(acc, p);
            }
            g.scale(acc, T::of(1.0 / parts.len() as f64))
        };
        let fused = self.fusion.fuse(g, qc, qs, features.f_c)?;
        let logits = self.fusion.classify(g, fused.t_cls);
        let cue = match &self.fusion.cue {
            Some(c) => Some(c.forward(g, fused.t_cue, training, noise_seed, self.cfg.fusion.cue_noise)?),
            None => None,
        };
        Ok(Forward { features, content, style, logits, cue })
    }

    /// Answer loss of one branch output for question `q` and gold option `label`.
    pub fn branch_loss(&self, g: &mut Graph<'_, T>, branch: &Branch, out: &BranchOutput, q: QuestionType, label: usize) -> Result<Var> {
        match self.cfg.head_mode {
            HeadMode::ClsHead => {
                let heads = self.cls_heads.as_ref().expect("heads in cls_head mode");
                heads.loss(g, out.processed_queries, label, q)
            }
            HeadMode::FrozenLm => {
                let (lm, _) = self.lm.as_ref().ok_or_else(|| Error::Rejected("frozen_lm mode needs a language model".into()))?;
                let lq = lm.embed_tokens(g, self.prompt(q))?;
                let prefix = branch.soft_prompt(g, out.processed_queries, lq);
                let (_, options) = build_question_at(q, self.cfg.granularity);
                let answer = self.vocab.tokenize(&options[label])?;
                lm.answer_loss(g, prefix, &answer)
            }
        }
    }

    /// Builds all enabled loss terms for one sample. Returns the term nodes, each `1×1`.
    pub fn sample_losses(&self, g: &mut Graph<'_, T>, sample: &Sample, noise_seed: u64) -> Result<(Forward, SampleLossVars)> {
        let image = self.encoder.image_matrix::<T>(&sample.image)?;
        let fwd = self.forward(g, &image, true, noise_seed)?;
        let mut vars = SampleLossVars::default();
        if let (Some(branch), Some(out)) = (&self.content, &fwd.content) {
            let q = self.cfg.content_question();
            vars.content = Some(self.branch_loss(g, branch, out, q, q.label_of(sample, self.cfg.granularity))?);
        }
        if let Some(branch) = &self.style {
            let mut total = None;
            for (q, out) in &fwd.style {
                let l = self.branch_loss(g, branch, out, *q, q.label_of(sample, self.cfg.granularity))?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l),
                });
            }
            vars.style = total;
        }
        vars.cls = Some(g.cross_entropy(fwd.logits, &[usize::from(sample.is_spoof())]));
        if let Some(cue) = fwd.cue {
            let beta = self.cfg.fusion.cue_beta;
            vars.cue = Some(cue_loss(g, cue, sample.is_spoof(), beta, self.cfg.fusion.cue_smooth_continuous)?);
        }
        Ok((fwd, vars))
    }

    /// Score path only: encoder, branches with fixed prompts, fusion, classifier.
    pub fn score(&self, image: &[f32]) -> Result<f64> {
        let mut g = self.graph();
        let x = self.encoder.image_matrix::<T>(image)?;
        let f = self.forward(&mut g, &x, false, 0)?;
        Ok(fake_score(&g.value(f.logits).data))
    }

    /// Fake score, cue map and (when an answer head is available) one decoded answer
    /// per configured question.
    pub fn predict(&self, image: &[f32], with_answers: bool) -> Result<Prediction> {
        let mut g = self.graph();
        let x = self.encoder.image_matrix::<T>(image)?;
        let f = self.forward(&mut g, &x, false, 0)?;
        let score = fake_score(&g.value(f.logits).data);
        let cue_map = f.cue.map(|c| g.value(c).data.iter().map(|v| v.f64()).collect());
        let mut answers = Vec::new();
        if with_answers {
            if let (Some(b), Some(o)) = (&self.content, &f.content) {
                let q = self.cfg.content_question();
                answers.push((q, self.decode(&mut g, b, o, q)?));
            }
            if let Some(b) = &self.style {
                for (q, o) in &f.style {
                    answers.push((*q, self.decode(&mut g, b, o, *q)?));
                }
            }
        }
        Ok(Prediction { fake_score: score, cue_map, answers })
    }

    fn decode(&self, g: &mut Graph<'_, T>, branch: &Branch, out: &BranchOutput, q: QuestionType) -> Result<DecodedAnswer> {
        let gran = self.cfg.granularity;
        match self.cfg.head_mode {
            HeadMode::ClsHead => {
                let heads = self.cls_heads.as_ref().expect("heads in cls_head mode");
                let logits = heads.logits(g, out.processed_queries, q)?;
                let i = argmax(&g.value(logits).data);
                let (_, options) = build_question_at(q, gran);
                Ok(DecodedAnswer { text: options[i].clone(), option: Some(i) })
            }
            HeadMode::FrozenLm => {
                let (lm, lm_store) = self.lm.as_ref().ok_or_else(|| Error::Rejected("answers need the language model".into()))?;
                let lq = lm.embed_tokens(g, self.prompt(q))?;
                let prefix = branch.soft_prompt(g, out.processed_queries, lq);
                let prefix = g.value(prefix).clone();
                let seq = lm.greedy(&self.store, lm_store, &prefix)?;
                Ok(match_option(&self.vocab, q, gran, &seq))
            }
        }
    }

    pub fn zero_grads(&self) -> GradBuffer<T> {
        GradBuffer::zeros_like(&self.store)
    }
}

/// Loss term nodes for one sample; `None` for disabled terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleLossVars {
    pub content: Option<Var>,
    pub style: Option<Var>,
    pub cls: Option<Var>,
    pub cue: Option<Var>,
}

impl SampleLossVars {
    pub fn values<T: Scalar>(&self, g: &Graph<'_, T>) -> LossTerms {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item().f64()).unwrap_or(0.0);
        LossTerms { content: v(self.content), style: v(self.style), cls: v(self.cls), cue: v(self.cue) }
    }

    /// `Σ w_i · term_i · scale` as one node, or `None` when every enabled weight is zero.
    pub fn weighted<T: Scalar>(&self, g: &mut Graph<'_, T>, w: &LossWeights, scale: f64) -> Option<Var> {
        let mut total: Option<Var> = None;
        for (term, weight) in [(self.content, w.content), (self.style, w.style), (self.cls, w.cls), (self.cue, w.cue)] {
            if let Some(t) = term {
                if weight == 0.0 {
                    continue;
                }
                let s = g.scale(t, T::of(weight * scale));
                total = Some(match total {
                    None => s,
                    Some(acc) => g.add(acc, s),
                });
            }
        }
        total
    }
}

/// Seed for the cue noise of a given (run, step, sample) triple.
pub fn noise_seed(seed: u64, step: u64, sample: u64) -> u64 {
    mix64(mix64(seed ^ 0xc0e5) ^ mix64(step.wrapping_mul(0x9e37_79b9) ^ sample))
}
