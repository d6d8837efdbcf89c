//! Instruction templates, option lists, and a closed-vocabulary word tokenizer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::synthdata::{coarsen_label, Sample};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const INSTRUCTION_PREFIX: &str = "Choose the correct option for the following question:";

pub const CONTENT_OPTIONS: [&str; 11] = [
    "Real face",
    "Photo",
    "Poster",
    "A4-paper",
    "2D face mask",
    "2D upper-body mask",
    "2D region mask",
    "PC screen",
    "Pad screen",
    "Phone screen",
    "3D mask",
];
/// Content options after collapsing every spoof family to one label.
pub const CONTENT_OPTIONS_G1: [&str; 5] = ["Real face", "Print", "Replay", "2D mask", "3D mask"];
/// Content options keeping two sub-labels per family (last two merged).
pub const CONTENT_OPTIONS_G2: [&str; 8] = [
    "Real face",
    "Photo",
    "Poster or A4-paper",
    "2D face mask",
    "2D upper-body or region mask",
    "PC screen",
    "Pad or Phone screen",
    "3D mask",
];
pub const ILLUMINATION_OPTIONS: [&str; 4] = ["Normal", "Strong", "Back", "Dark"];
pub const ENVIRONMENT_OPTIONS: [&str; 2] = ["Indoor", "Outdoor"];
pub const CAMERA_OPTIONS: [&str; 3] = ["Low", "Medium", "High"];
pub const BINARY_OPTIONS: [&str; 2] = ["Yes", "No"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Content,
    Style1Illumination,
    Style2Environment,
    Style3Camera,
    Binary,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::Content,
        QuestionType::Style1Illumination,
        QuestionType::Style2Environment,
        QuestionType::Style3Camera,
        QuestionType::Binary,
    ];
    pub const STYLE: [QuestionType; 3] =
        [QuestionType::Style1Illumination, QuestionType::Style2Environment, QuestionType::Style3Camera];

    pub fn is_style(self) -> bool {
        matches!(self, Self::Style1Illumination | Self::Style2Environment | Self::Style3Camera)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Content => "content",
            Self::Style1Illumination => "style1",
            Self::Style2Environment => "style2",
            Self::Style3Camera => "style3",
            Self::Binary => "binary",
        }
    }

    /// The bare question as listed alongside its options.
    pub fn question(self) -> &'static str {
        match self {
            Self::Content => "Which type of spoof is in this image?",
            Self::Style1Illumination => "What is the illumination condition in this image?",
            Self::Style2Environment => "What is the environment in this image?",
            Self::Style3Camera => "What is the camera quality in this image?",
            Self::Binary => "Is this a real face?",
        }
    }

    /// Alternative wording, used only to vary language-model pretraining text.
    pub fn paraphrase(self) -> &'static str {
        match self {
            Self::Content => "Which spoof type is in this image?",
            Self::Style1Illumination => "Which illumination condition does this image show?",
            Self::Style2Environment => "Which environment does this image show?",
            Self::Style3Camera => "Which camera quality does this image show?",
            Self::Binary => "Does this image show a real face?",
        }
    }

    /// Option texts without the `(i)` numbering. Content options depend on label granularity.
    pub fn option_texts(self, granularity: u8) -> &'static [&'static str] {
        match self {
            Self::Content => match granularity {
                1 => &CONTENT_OPTIONS_G1,
                2 => &CONTENT_OPTIONS_G2,
                _ => &CONTENT_OPTIONS,
            },
            Self::Style1Illumination => &ILLUMINATION_OPTIONS,
            Self::Style2Environment => &ENVIRONMENT_OPTIONS,
            Self::Style3Camera => &CAMERA_OPTIONS,
            Self::Binary => &BINARY_OPTIONS,
        }
    }

    pub fn num_options(self, granularity: u8) -> usize {
        self.option_texts(granularity).len()
    }

    /// Label index of `sample` for this question.
    pub fn label_of(self, sample: &Sample, granularity: u8) -> usize {
        match self {
            Self::Content => coarsen_label(sample.content_label, granularity).expect("validated granularity") as usize,
            Self::Style1Illumination => sample.style.illumination as usize,
            Self::Style2Environment => sample.style.environment as usize,
            Self::Style3Camera => sample.style.camera_quality as usize,
            Self::Binary => usize::from(sample.content_label != 0),
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

pub fn number_option(i: usize, text: &str) -> String {
    format!("({}) {}", i + 1, text)
}

/// The prefixed question text and its numbered options.
pub fn build_question(qtype: QuestionType) -> (String, Vec<String>) {
    build_question_at(qtype, 3)
}

pub fn build_question_at(qtype: QuestionType, granularity: u8) -> (String, Vec<String>) {
    let text = format!("{} {}", INSTRUCTION_PREFIX, qtype.question());
    let options = qtype.option_texts(granularity).iter().enumerate().map(|(i, t)| number_option(i, t)).collect();
    (text, options)
}

pub fn answer_for(qtype: QuestionType, sample: &Sample) -> String {
    answer_for_at(qtype, sample, 3)
}

pub fn answer_for_at(qtype: QuestionType, sample: &Sample, granularity: u8) -> String {
    let idx = qtype.label_of(sample, granularity);
    number_option(idx, qtype.option_texts(granularity)[idx])
}

pub type TokenSeq = Vec<u32>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub qtype: QuestionType,
    pub question_text: String,
    pub options: Vec<String>,
    pub answer_text: String,
    pub question_tokens: TokenSeq,
    pub answer_tokens: TokenSeq,
}

impl InstructionRecord {
    pub fn new(vocab: &Vocabulary, qtype: QuestionType, sample: &Sample, granularity: u8) -> Result<Self> {
        let (question_text, options) = build_question_at(qtype, granularity);
        let answer_text = answer_for_at(qtype, sample, granularity);
        Ok(Self {
            question_tokens: vocab.tokenize(&question_text)?,
            answer_tokens: vocab.tokenize(&answer_text)?,
            qtype,
            question_text,
            options,
            answer_text,
        })
    }
}

/// Splits text into lowercase word and single-character punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Every text the model or the language model can ever be shown.
pub fn template_universe() -> Vec<String> {
    let mut texts = vec![INSTRUCTION_PREFIX.to_string()];
    for q in QuestionType::ALL {
        texts.push(q.question().to_string());
        texts.push(q.paraphrase().to_string());
        for g in 1..=3u8 {
            let (_, options) = build_question_at(q, g);
            texts.extend(options);
        }
    }
    texts
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Specials at 0..4, then every template token in sorted order.
    pub fn build() -> Self {
        let words: BTreeSet<String> = template_universe().iter().flat_map(|t| split_words(t)).collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Strict tokenization: `[BOS, words..., EOS]`; unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let mut out = vec![BOS];
        for w in split_words(text) {
            match self.id(&w) {
                Some(id) => out.push(id),
                None => return Err(Error::Rejected(format!("token {w:?} is outside the vocabulary"))),
            }
        }
        out.push(EOS);
        Ok(out)
    }

    /// Lenient tokenization mapping unknown words to UNK.
    pub fn tokenize_lossy(&self, text: &str) -> TokenSeq {
        let mut out = vec![BOS];
        out.extend(split_words(text).iter().map(|w| self.id(w).unwrap_or(UNK)));
        out.push(EOS);
        out
    }

    /// Word tokens only, without framing.
    pub fn words(&self, text: &str) -> Result<TokenSeq> {
        let t = self.tokenize(text)?;
        Ok(t[1..t.len() - 1].to_vec())
    }

    /// Canonical text: specials dropped, no space inside parentheses or before
    /// closing punctuation, hyphens joined.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = false;
        for &id in tokens {
            if id < UNK {
                continue;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            let glue_prev = matches!(tok, ")" | "?" | ":" | "," | "." | "-");
            if !out.is_empty() && !glue_prev && !glue_next {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = matches!(tok, "(" | "-");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        serde_json::to_string_pretty(&map).expect("vocabulary serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Rejected(format!("vocabulary id {id} is not dense")))?;
            *slot = t;
        }
        if tokens.iter().any(String::is_empty) {
            return Err(Error::Rejected("vocabulary ids are not dense".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    }
}

/// Looks up rows of a trainable `V×d` embedding table.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, table: ParamId, tokens: &[u32]) -> Result<Var> {
    let t = g.param(table);
    let v = g.shape(t).0;
    if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= v) {
        return Err(Error::Rejected(format!("token id {bad} is outside a vocabulary of {v}")));
    }
    let ids: Vec<usize> = tokens.iter().map(|&i| i as usize).collect();
    Ok(g.gather_rows(t, &ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Environment, StyleSpec};

    #[test]
    fn option_counts_match_question_types() {
        let counts: Vec<usize> = QuestionType::ALL.iter().map(|q| build_question(*q).1.len()).collect();
        assert_eq!(counts, vec![11, 4, 2, 3, 2]);
    }

    #[test]
    fn content_and_environment_option_lists() {
        let (text, opts) = build_question(QuestionType::Content);
        assert!(text.starts_with(INSTRUCTION_PREFIX));
        assert!(text.ends_with("Which type of spoof is in this image?"));
        assert_eq!(opts[0], "(1) Real face");
        assert_eq!(opts[10], "(11) 3D mask");
        assert_eq!(build_question(QuestionType::Style2Environment).1, vec!["(1) Indoor", "(2) Outdoor"]);
        assert_eq!(build_question(QuestionType::Binary).1, vec!["(1) Yes", "(2) No"]);
    }

    #[test]
    fn answers_follow_labels() {
        let mut s = Sample::blank(2, StyleSpec::default());
        assert_eq!(answer_for(QuestionType::Content, &s), "(3) Poster");
        s.style.illumination = crate::synthdata::Illumination::Back;
        assert_eq!(answer_for(QuestionType::Style1Illumination, &s), "(3) Back");
        s.style.environment = Environment::Outdoor;
        assert_eq!(answer_for(QuestionType::Style2Environment, &s), "(2) Outdoor");
        assert_eq!(answer_for(QuestionType::Binary, &s), "(2) No");
        s.content_label = 0;
        assert_eq!(answer_for(QuestionType::Binary, &s), "(1) Yes");
    }

    #[test]
    fn answer_for_is_a_bijection_per_question() {
        let vocab = Vocabulary::build();
        for q in QuestionType::ALL {
            let (_, options) = build_question(q);
            let mut seen = BTreeSet::new();
            for label in 0..=10u8 {
                for style in StyleSpec::all() {
                    let s = Sample::blank(label, style);
                    let a = answer_for(q, &s);
                    assert!(options.contains(&a), "{a} not an option of {q}");
                    seen.insert(a);
                    assert!(!vocab.tokenize(&answer_for(q, &s)).unwrap().contains(&UNK));
                }
            }
            assert_eq!(seen.len(), options.len(), "{q} does not reach every option");
        }
    }

    #[test]
    fn empty_text_is_framing_only() {
        assert_eq!(Vocabulary::build().tokenize("").unwrap(), vec![BOS, EOS]);
    }

    #[test]
    fn vocabulary_is_closed_and_deterministic() {
        let a = Vocabulary::build();
        let b = Vocabulary::build();
        assert_eq!(a, b);
        assert_eq!(a.token(0), Some("<pad>"));
        assert_eq!(a.token(3), Some("<unk>"));
        let words: Vec<&str> = (4..a.len() as u32).map(|i| a.token(i).unwrap()).collect();
        let mut sorted = words.clone();
        sorted.sort();
        assert_eq!(words, sorted);
        for text in template_universe() {
            assert!(!a.tokenize(&text).unwrap().contains(&UNK));
        }
    }

    #[test]
    fn template_tokens_round_trip() {
        let v = Vocabulary::build();
        for text in template_universe() {
            let t = v.tokenize(&text).unwrap();
            assert_eq!(v.tokenize(&v.detokenize(&t)).unwrap(), t);
        }
        let t = v.tokenize("(8) PC screen").unwrap();
        assert_eq!(v.detokenize(&t), "(8) pc screen");
        let t = v.tokenize("(6) 2D upper-body mask").unwrap();
        assert_eq!(v.detokenize(&t), "(6) 2d upper-body mask");
    }

    #[test]
    fn strict_mode_rejects_unknown_words() {
        let v = Vocabulary::build();
        assert!(v.tokenize("a banana").is_err());
        assert_eq!(v.tokenize_lossy("banana"), vec![BOS, UNK, EOS]);
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = Vocabulary::build();
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }
}
