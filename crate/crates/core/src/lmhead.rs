//! Answer prediction: a tiny causal decoder pretrained on text-only question/answer
//! pairs and then frozen, plus the per-question classification heads used instead of
//! it in the classification-head variant.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{reject, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{EncoderBlock, LayerNorm, Linear};
use crate::optim::{AdamW, AdamWConfig, OneCycle};
use crate::params::{rng_for, GradBuffer, Init, ParamId, ParamStore, StoreKind};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::textproto::{
    embed, number_option, QuestionType, TokenSeq, Vocabulary, BOS, EOS, INSTRUCTION_PREFIX,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    FrozenLm,
    ClsHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Longest prefix-plus-answer sequence the positional table covers.
    pub max_len: usize,
    pub max_answer_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { width: 64, depth: 2, heads: 4, ffn_mult: 2, max_len: 48, max_answer_len: 12 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width % self.heads != 0 || self.ffn_mult == 0 {
            return reject("language model needs depth >= 1 and a width divisible by heads");
        }
        if self.max_answer_len < 2 || self.max_len <= self.max_answer_len {
            return reject("language model max_len must exceed max_answer_len >= 2");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Gaussian noise added to the context rows during training.
    pub context_noise: f64,
    pub eval_every: usize,
    pub target_accuracy: f64,
    /// Also teach the coarse content option lists (granularity 1 and 2).
    pub coarse_options: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            batch_size: 16,
            peak_lr: 3e-3,
            warmup_frac: 0.1,
            context_noise: 0.1,
            eval_every: 100,
            target_accuracy: 0.99,
            coarse_options: false,
        }
    }
}

/// Decoder-only transformer over `prefix rows ⊕ answer tokens`.
#[derive(Clone, Debug)]
pub struct TinyLm {
    pub cfg: LmConfig,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl TinyLm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &LmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if store.kind() != StoreKind::Lm {
            return reject("language model parameters belong in the Lm store");
        }
        let mut init = Init::new(store, seed, "lm");
        let d = cfg.width;
        let tok_embed = init.normal("tok_embed", vocab_size, d, 0.5, false);
        let pos_embed = init.normal("pos_embed", cfg.max_len, d, 0.1, false);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&mut init, &format!("block{i}"), d, cfg.heads, cfg.ffn_mult))
            .collect();
        let ln_f = LayerNorm::new(&mut init, "ln_f", d);
        let head = Linear::new(&mut init, "head", d, vocab_size, true);
        Ok(Self { cfg: cfg.clone(), tok_embed, pos_embed, blocks, ln_f, head })
    }

    pub fn embed_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: &[u32]) -> Result<Var> {
        embed(g, self.tok_embed, tokens)
    }

    /// Next-token logits at each of the `answer_in` positions, `len(answer_in)×V`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, prefix: Var, answer_in: &[u32]) -> Result<Var> {
        let (p, w) = g.shape(prefix);
        if w != self.cfg.width {
            return reject(format!("prefix width {w} does not match the language model width {}", self.cfg.width));
        }
        let total = p + answer_in.len();
        if total > self.cfg.max_len {
            return reject(format!("sequence of {total} exceeds the language model max_len {}", self.cfg.max_len));
        }
        let a = self.embed_tokens(g, answer_in)?;
        let x = g.concat_rows(&[prefix, a]);
        let pos = g.param(self.pos_embed);
        let pos = g.slice_rows(pos, 0, total);
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, x, true);
        }
        let x = g.slice_rows(x, p, answer_in.len());
        let x = self.ln_f.forward(g, x);
        Ok(self.head.forward(g, x))
    }

    /// Teacher-forced mean cross-entropy over the answer positions after BOS.
    pub fn answer_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, prefix: Var, answer: &[u32]) -> Result<Var> {
        if answer.len() < 2 || answer[0] != BOS {
            return reject("answer tokens must start with BOS and contain at least one target");
        }
        let logits = self.logits(g, prefix, &answer[..answer.len() - 1])?;
        let targets: Vec<usize> = answer[1..].iter().map(|&t| t as usize).collect();
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Greedy decoding from BOS; returns the generated tokens including BOS and, if
    /// produced, EOS.
    pub fn greedy<T: Scalar>(
        &self,
        model: &ParamStore<T>,
        lm: &ParamStore<T>,
        prefix: &Mat<T>,
    ) -> Result<TokenSeq> {
        let mut seq = vec![BOS];
        while seq.len() < self.cfg.max_answer_len {
            let mut g = Graph::new(model, Some(lm));
            let p = g.constant(prefix.clone());
            let logits = self.logits(&mut g, p, &seq)?;
            let lv = g.value(logits);
            let last = lv.row(lv.rows - 1);
            let next = argmax(last) as u32;
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(seq)
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Decoded answer text and the option it names, if any.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedAnswer {
    pub text: String,
    pub option: Option<usize>,
}

impl DecodedAnswer {
    pub fn is_malformed(&self) -> bool {
        self.option.is_none()
    }
}

/// Matches generated tokens against the option list of `qtype`.
pub fn match_option(vocab: &Vocabulary, qtype: QuestionType, granularity: u8, tokens: &[u32]) -> DecodedAnswer {
    let text = vocab.detokenize(tokens);
    let body: Vec<u32> = tokens.iter().copied().filter(|&t| t != BOS && t != EOS).collect();
    let terminated = tokens.last() == Some(&EOS);
    let option = qtype.option_texts(granularity).iter().enumerate().find_map(|(i, t)| {
        let want = vocab.words(&number_option(i, t)).ok()?;
        (terminated && want == body).then_some(i)
    });
    DecodedAnswer { text, option }
}

/// One text-only pretraining example.
#[derive(Clone, Debug)]
pub struct LmExample {
    pub qtype: QuestionType,
    pub granularity: u8,
    pub option: usize,
    pub variant: usize,
    /// Token ids whose embeddings form the context rows.
    pub context: Vec<u32>,
    pub question: TokenSeq,
    pub answer: TokenSeq,
    pub held_out: bool,
}

pub const LM_VARIANTS: usize = 8;

/// Question text for a pretraining variant: wording × instruction prefix on/off.
fn variant_question(qtype: QuestionType, variant: usize) -> String {
    let wording = if variant & 1 == 0 { qtype.question() } else { qtype.paraphrase() };
    if variant & 2 == 0 {
        format!("{INSTRUCTION_PREFIX} {wording}")
    } else {
        wording.to_string()
    }
}

/// Context token ids for an option, cycled or truncated to `k` rows.
/// Fill mode 0 uses the option words; mode 1 leads with the option number.
pub fn context_tokens(vocab: &Vocabulary, option_text: &str, number: usize, k: usize, mode: usize) -> Result<Vec<u32>> {
    let mut words = vocab.words(option_text)?;
    if mode == 1 {
        words.insert(0, vocab.words(&(number + 1).to_string())?[0]);
    }
    Ok((0..k).map(|i| words[i % words.len()]).collect())
}

/// The canonical context used to teach the question format: fill mode 0.
pub fn canonical_context(vocab: &Vocabulary, qtype: QuestionType, granularity: u8, option: usize, k: usize) -> Result<Vec<u32>> {
    context_tokens(vocab, qtype.option_texts(granularity)[option], option, k, 0)
}

/// Every (question type, option) pair in eight variants; one variant per pair is held out.
pub fn lm_corpus(vocab: &Vocabulary, k: usize, coarse_options: bool) -> Result<Vec<LmExample>> {
    let mut out = Vec::new();
    let mut pairs: Vec<(QuestionType, u8)> = QuestionType::ALL.iter().map(|&q| (q, 3)).collect();
    if coarse_options {
        pairs.push((QuestionType::Content, 1));
        pairs.push((QuestionType::Content, 2));
    }
    for (qi, &(qtype, gran)) in pairs.iter().enumerate() {
        for (oi, text) in qtype.option_texts(gran).iter().enumerate() {
            let answer = vocab.tokenize(&number_option(oi, text))?;
            let held = (qi + oi) % LM_VARIANTS;
            for variant in 0..LM_VARIANTS {
                out.push(LmExample {
                    qtype,
                    granularity: gran,
                    option: oi,
                    variant,
                    context: context_tokens(vocab, text, oi, k, variant >> 2)?,
                    question: vocab.tokenize(&variant_question(qtype, variant))?,
                    answer: answer.clone(),
                    held_out: variant == held,
                });
            }
        }
    }
    Ok(out)
}

/// Pretraining outcome and diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub heldout_token_accuracy: f64,
    pub decode_exact: usize,
    pub decode_total: usize,
    pub final_loss: f64,
    pub corpus_size: usize,
    pub context_rows: usize,
    pub lm_hash: String,
}

fn prefix_var<T: Scalar>(g: &mut Graph<'_, T>, lm: &TinyLm, ex: &LmExample, noise: Option<&Mat<T>>) -> Result<Var> {
    let mut ctx = lm.embed_tokens(g, &ex.context)?;
    if let Some(n) = noise {
        let n = g.constant(n.clone());
        ctx = g.add(ctx, n);
    }
    let q = lm.embed_tokens(g, &ex.question)?;
    Ok(g.concat_rows(&[ctx, q]))
}

/// Teacher-forced token accuracy and exact greedy decodes on `examples`.
pub fn evaluate_lm<T: Scalar>(
    lm: &TinyLm,
    store: &ParamStore<T>,
    examples: &[&LmExample],
    vocab: &Vocabulary,
) -> Result<(f64, usize)> {
    let empty = ParamStore::<T>::new(StoreKind::Model);
    let (mut correct, mut total, mut exact) = (0usize, 0usize, 0usize);
    for ex in examples {
        let mut g = Graph::new(&empty, Some(store));
        let p = prefix_var(&mut g, lm, ex, None)?;
        let logits = lm.logits(&mut g, p, &ex.answer[..ex.answer.len() - 1])?;
        let lv = g.value(logits);
        for (r, &t) in ex.answer[1..].iter().enumerate() {
            total += 1;
            correct += usize::from(argmax(lv.row(r)) == t as usize);
        }
        let prefix = g.value(p).clone();
        drop(g);
        let seq = lm.greedy(&empty, store, &prefix)?;
        let d = match_option(vocab, ex.qtype, ex.granularity, &seq);
        exact += usize::from(d.option == Some(ex.option));
    }
    Ok((correct as f64 / total.max(1) as f64, exact))
}

/// Trains the decoder on the text corpus until held-out token accuracy reaches the
/// target and every held-out pair decodes exactly, then freezes it.
pub fn pretrain_tiny_lm<T: Scalar>(
    vocab: &Vocabulary,
    cfg: &LmConfig,
    pcfg: &PretrainConfig,
    context_rows: usize,
    seed: u64,
) -> Result<(TinyLm, ParamStore<T>, PretrainReport)> {
    let mut store = ParamStore::<T>::new(StoreKind::Lm);
    let lm = TinyLm::new(&mut store, cfg, vocab.len(), seed)?;
    let corpus = lm_corpus(vocab, context_rows, pcfg.coarse_options)?;
    let train: Vec<&LmExample> = corpus.iter().filter(|e| !e.held_out).collect();
    let held: Vec<&LmExample> = corpus.iter().filter(|e| e.held_out).collect();
    let schedule = OneCycle::new(pcfg.peak_lr / 10.0, pcfg.peak_lr, pcfg.peak_lr / 100.0, pcfg.max_steps, pcfg.warmup_frac)?;
    let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut rng = rng_for(seed, "lm-pretrain");
    let empty = ParamStore::<T>::new(StoreKind::Model);
    let mut grads = GradBuffer::zeros_like(&store);
    let mut scratch = GradBuffer::zeros_like(&empty);
    let (mut acc, mut exact, mut last_loss) = (0.0, 0, f64::NAN);
    let mut steps = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    while steps < pcfg.max_steps {
        grads.zero();
        let mut loss_sum = 0.0;
        for _ in 0..pcfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = train[order[cursor]];
            cursor += 1;
            let noise = Mat::from_vec(
                context_rows,
                cfg.width,
                (0..context_rows * cfg.width)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::of(z * pcfg.context_noise * rng.gen_range(0.0..2.0))
                    })
                    .collect(),
            );
            let mut g = Graph::new(&empty, Some(&store));
            let p = prefix_var(&mut g, &lm, ex, Some(&noise))?;
            let loss = lm.answer_loss(&mut g, p, &ex.answer)?;
            let lv = g.value(loss).item().f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite { term: "lm_pretrain" });
            }
            loss_sum += lv;
            let gr = g.backward(loss);
            g.accumulate(&gr, &mut scratch, Some(&mut grads));
        }
        grads.scale(T::of(1.0 / pcfg.batch_size as f64));
        opt.step(&mut store, &grads, schedule.lr(steps));
        last_loss = loss_sum / pcfg.batch_size as f64;
        steps += 1;
        if steps % pcfg.eval_every == 0 || steps == pcfg.max_steps {
            (acc, exact) = evaluate_lm(&lm, &store, &held, vocab)?;
            log::debug!("lm pretrain step {steps}: loss {last_loss:.4}, held-out acc {acc:.4}, exact {exact}/{}", held.len());
            if acc >= pcfg.target_accuracy && exact == held.len() {
                break;
            }
        }
    }
    if acc < pcfg.target_accuracy || exact < held.len() {
        return Err(Error::Training(format!(
            "language model reached {:.2}% held-out token accuracy and {exact}/{} exact decodes after {steps} steps (loss {last_loss:.4}); target {:.0}%",
            acc * 100.0,
            held.len(),
            pcfg.target_accuracy * 100.0
        )));
    }
    store.freeze_all();
    let report = PretrainReport {
        steps,
        heldout_token_accuracy: acc,
        decode_exact: exact,
        decode_total: held.len(),
        final_loss: last_loss,
        corpus_size: corpus.len(),
        context_rows,
        lm_hash: store.content_hash(),
    };
    Ok((lm, store, report))
}

/// Classification heads: mean-pooled queries → linear → softmax, one per question type.
#[derive(Clone, Debug)]
pub struct ClsHeads {
    pub heads: Vec<(QuestionType, Linear)>,
}

impl ClsHeads {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, width: usize, questions: &[(QuestionType, usize)]) -> Self {
        let mut sub = init.sub("cls_heads");
        let heads = questions.iter().map(|&(q, n)| (q, Linear::new(&mut sub, q.short_name(), width, n, true))).collect();
        Self { heads }
    }

    fn head(&self, qtype: QuestionType) -> Result<&Linear> {
        self.heads
            .iter()
            .find(|(q, _)| *q == qtype)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::Rejected(format!("no classification head for question `{qtype}`")))
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, processed: Var, qtype: QuestionType) -> Result<Var> {
        let head = self.head(qtype)?;
        let pooled = g.mean_rows(processed);
        Ok(head.forward(g, pooled))
    }

    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, processed: Var, label: usize, qtype: QuestionType) -> Result<Var> {
        let logits = self.logits(g, processed, qtype)?;
        let n = g.shape(logits).1;
        if label >= n {
            return reject(format!("label {label} out of range for {n} options"));
        }
        Ok(g.cross_entropy(logits, &[label]))
    }
}
