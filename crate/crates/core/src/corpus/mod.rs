//! Word-definition corpus handling: ingest, prompt rendering, and the
//! clean/typo/split triplet machinery.
//!
//! A sample is a word plus its definition. Prompts embed the definition in a
//! fixed question template and end with the answer word wrapped in
//! apostrophes; the closing apostrophe doubles as the generation stop token,
//! and the opening one is the delimiter position the neuron scorer marks.

mod build;
mod synth;

pub use build::{
    apply_injections, build_triplets, evaluate_instance, importance_rank, inject_typos,
    likelihood, make_split, mark_positions, render_clean, select_answerable, token_spans,
    BuildOptions, DroppedSample, Injection, SelectionOutcome, TrainingSet, TripletDataset,
    TripletMeta, TripletSample, WordImportance,
};
pub use synth::generate_corpus;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

/// Characters eligible for typo insertion.
pub const TYPO_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Default prompt shape. The definition is preceded by a space so its first
/// word carries a leading-space token like every other definition word;
/// quote-hugged first words often cannot be re-segmented to match a typo
/// variant's token count, which would needlessly drop split samples.
pub const DEFAULT_TEMPLATE: &str = "Q. Which word means {definition}? A. This is '{word}'";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus is empty after parsing")]
    Empty,
    #[error("invalid template: {0}")]
    Template(String),
    #[error("word {word:?}: no segmentation of {region:?} into {target_len} tokens")]
    NoMatchingSegmentation { word: String, region: String, target_len: usize },
    #[error("definition has {have} words, need {need} for typo injection")]
    NotEnoughWords { have: usize, need: usize },
    #[error("invalid build options: {0}")]
    Options(String),
    #[error("token span misaligned for {what} in {text:?}")]
    SpanMisaligned { what: &'static str, text: String },
    #[error("dataset file: {0}")]
    DatasetFormat(String),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordDef {
    pub word: String,
    pub definition: String,
}

impl WordDef {
    pub fn validate(&self) -> Result<(), String> {
        if self.word.is_empty() || self.definition.is_empty() {
            return Err("word and definition must be nonempty".into());
        }
        for (field, value) in [("word", &self.word), ("definition", &self.definition)] {
            if value.contains('\'') {
                return Err(format!("{field} contains an apostrophe, which delimits answers"));
            }
            if value.chars().any(|c| c.is_control()) {
                return Err(format!("{field} contains control characters"));
            }
        }
        if self.word.contains(char::is_whitespace) {
            return Err("word must be a single token of text (no whitespace)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clean,
    Typo,
    Split,
}

/// A fully prepared prompt: text, tokens (BOS first), and the index ranges
/// the scorer cares about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub variant: Variant,
    pub text: String,
    /// `[BOS, ...]`; decode(tokens) == text.
    pub tokens: Vec<TokenId>,
    /// Token indices of the answer word (excludes the closing apostrophe).
    pub answer_span: Range<usize>,
    /// Marked positions: tokens of the perturbation-selected words, the
    /// delimiter token immediately before the answer, and the answer tokens.
    /// Sorted, deduplicated.
    pub marked: Vec<usize>,
}

/// Prompt template with `{definition}` and `{word}` placeholders. The word
/// must sit in terminal `'{word}'` quotes: evaluation stops generation at the
/// closing apostrophe and scoring marks the opening one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    raw: String,
}

impl TryFrom<String> for PromptTemplate {
    type Error = CorpusError;
    fn try_from(raw: String) -> Result<Self, CorpusError> {
        PromptTemplate::new(&raw)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.raw
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl PromptTemplate {
    pub fn new(raw: &str) -> Result<Self, CorpusError> {
        let def_count = raw.matches("{definition}").count();
        if def_count != 1 {
            return Err(CorpusError::Template(format!(
                "expected exactly one {{definition}} placeholder, found {def_count}"
            )));
        }
        if raw.matches("{word}").count() != 1 {
            return Err(CorpusError::Template(
                "expected exactly one {word} placeholder".into(),
            ));
        }
        if !raw.ends_with("'{word}'") {
            return Err(CorpusError::Template(
                "template must end with '{word}' (apostrophes delimit the answer)".into(),
            ));
        }
        let def_at = raw.find("{definition}").unwrap();
        let word_at = raw.find("'{word}'").unwrap();
        if def_at > word_at {
            return Err(CorpusError::Template(
                "{definition} must precede {word}".into(),
            ));
        }
        Ok(PromptTemplate { raw: raw.to_string() })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// Substitutes a definition and answer, returning the text and the byte
    /// spans of both.
    pub fn render(&self, definition: &str, word: &str) -> Rendered {
        let def_at = self.raw.find("{definition}").expect("validated");
        let mut text = String::with_capacity(self.raw.len() + definition.len() + word.len());
        text.push_str(&self.raw[..def_at]);
        let def_span = text.len()..text.len() + definition.len();
        text.push_str(definition);
        let rest = &self.raw[def_at + "{definition}".len()..];
        let word_at = rest.find("'{word}'").expect("validated");
        text.push_str(&rest[..word_at + 1]); // through the opening apostrophe
        let answer_span = text.len()..text.len() + word.len();
        text.push_str(word);
        text.push('\'');
        Rendered { text, def_span, answer_span }
    }
}

/// Rendered prompt text with byte spans of the definition and the answer.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub text: String,
    pub def_span: Range<usize>,
    pub answer_span: Range<usize>,
}

impl Rendered {
    /// Byte spans of whitespace-separated definition words, in order.
    pub fn def_words(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let base = self.def_span.start;
        let def = &self.text[self.def_span.clone()];
        let mut start = None;
        for (i, c) in def.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    out.push(base + s..base + i);
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            out.push(base + s..base + def.len());
        }
        out
    }
}

/// Reads word definitions from a TSV (`word<TAB>definition`) or JSONL
/// (`{"word": ..., "definition": ...}`) file, chosen by extension.
/// Duplicate words keep the first occurrence.
pub fn read_word_defs(path: &Path) -> Result<Vec<WordDef>, CorpusError> {
    let raw = std::fs::read_to_string(path)?;
    let is_jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json") | Some("ndjson")
    );
    if is_jsonl {
        parse_jsonl(&raw)
    } else {
        parse_tsv(&raw)
    }
}

pub fn parse_tsv(raw: &str) -> Result<Vec<WordDef>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((word, definition)) = line.split_once('\t') else {
            return Err(CorpusError::Parse {
                line: i + 1,
                reason: "expected word<TAB>definition".into(),
            });
        };
        let def = WordDef { word: word.trim().to_string(), definition: definition.trim().to_string() };
        def.validate().map_err(|reason| CorpusError::Parse { line: i + 1, reason })?;
        out.push(def);
    }
    finish_ingest(out)
}

pub fn parse_jsonl(raw: &str) -> Result<Vec<WordDef>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let def: WordDef = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        def.validate().map_err(|reason| CorpusError::Parse { line: i + 1, reason })?;
        out.push(def);
    }
    finish_ingest(out)
}

fn finish_ingest(mut defs: Vec<WordDef>) -> Result<Vec<WordDef>, CorpusError> {
    let mut seen = std::collections::HashSet::new();
    defs.retain(|d| seen.insert(d.word.clone()));
    if defs.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(defs)
}
