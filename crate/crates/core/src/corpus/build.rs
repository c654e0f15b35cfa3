//! Triplet construction: render, evaluate, rank, inject, split.
//!
//! Per sample the pipeline renders the clean prompt, ranks definition words
//! by input-gradient importance, injects one random character into each of
//! the top-t words, then re-segments those words' regions in the clean text
//! so the split variant matches the typo variant's token count without
//! changing a byte. All randomness flows from per-sample seeds, so builds
//! replay bit-exactly and samples are order-independent.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    CorpusError, PromptInstance, PromptTemplate, Rendered, Variant, WordDef, TYPO_ALPHABET,
};
use crate::derive_seed;
use crate::model::{answer_log_likelihood, AblationMask, Model, Scalar, TrainData};
use crate::tokenizer::{TokenId, TokenizerError, Vocab, BOS_ID};

/// Split-variant candidate segmentations are enumerated up to this many per
/// word region; the uniform draw is over the enumerated list. Regions are
/// single short words, which stay far below the cap in practice.
const SPLIT_ENUM_CAP: usize = 512;

/// Byte span of each token in the decoded text, in order. `<bos>` occupies a
/// zero-width span.
pub fn token_spans(vocab: &Vocab, tokens: &[TokenId]) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut pos = 0usize;
    for &t in tokens {
        let len = if t == BOS_ID {
            0
        } else {
            vocab.token_bytes(t).map(|b| b.len()).unwrap_or(0)
        };
        out.push(pos..pos + len);
        pos += len;
    }
    out
}

/// Token indices whose spans overlap `bytes`. Spans are contiguous and
/// ordered, so the result is a contiguous range (empty when nothing overlaps).
fn intersecting_tokens(spans: &[Range<usize>], bytes: &Range<usize>) -> Range<usize> {
    let mut start = spans.len();
    let mut end = 0usize;
    for (i, s) in spans.iter().enumerate() {
        if s.start < bytes.end && s.end > bytes.start {
            start = start.min(i);
            end = i + 1;
        }
    }
    if start < end {
        start..end
    } else {
        0..0
    }
}

/// Like `intersecting_tokens`, but requires the tokens to cover `bytes`
/// exactly, boundary to boundary.
fn aligned_tokens(spans: &[Range<usize>], bytes: &Range<usize>) -> Option<Range<usize>> {
    let r = intersecting_tokens(spans, bytes);
    (r.start < r.end && spans[r.start].start == bytes.start && spans[r.end - 1].end == bytes.end)
        .then_some(r)
}

/// Extends a word span to include its leading space when present; the
/// pre-tokenizer attaches that space to the word's first chunk.
fn attach_leading_space(text: &str, span: &Range<usize>) -> Range<usize> {
    if span.start > 0 && text.as_bytes()[span.start - 1] == b' ' {
        span.start - 1..span.end
    } else {
        span.clone()
    }
}

/// Marked positions for one variant: tokens of the selected definition words
/// (in this variant's own segmentation), the answer tokens, and the delimiter
/// token immediately before the answer. Sorted and deduplicated.
pub fn mark_positions(
    spans: &[Range<usize>],
    word_spans: &[Range<usize>],
    selected: &[usize],
    answer: &Range<usize>,
) -> Vec<usize> {
    let mut marked = BTreeSet::new();
    marked.extend(answer.clone());
    marked.insert(answer.start - 1);
    for &w in selected {
        marked.extend(intersecting_tokens(spans, &word_spans[w]));
    }
    marked.into_iter().collect()
}

/// Renders the clean prompt instance for one word definition. The returned
/// marks cover only the answer and its delimiter; `build_triplets` re-marks
/// once the perturbed words are known.
pub fn render_clean(
    vocab: &Vocab,
    template: &PromptTemplate,
    def: &WordDef,
) -> Result<(PromptInstance, Rendered), CorpusError> {
    let rendered = template.render(&def.definition, &def.word);
    let seg = vocab.encode(&rendered.text)?;
    let mut tokens = Vec::with_capacity(seg.ids.len() + 1);
    tokens.push(BOS_ID);
    tokens.extend_from_slice(&seg.ids);
    let spans = token_spans(vocab, &tokens);
    let answer_span =
        aligned_tokens(&spans, &rendered.answer_span).ok_or_else(|| CorpusError::SpanMisaligned {
            what: "answer",
            text: rendered.text.clone(),
        })?;
    let marked = mark_positions(&spans, &[], &[], &answer_span);
    let inst = PromptInstance {
        variant: Variant::Clean,
        text: rendered.text.clone(),
        tokens,
        answer_span,
        marked,
    };
    Ok((inst, rendered))
}

/// Greedy-decodes the answer from the prompt prefix and checks it against
/// the expected word: generation stops at the closing apostrophe, and the
/// decoded text must match exactly after whitespace trimming. Undecodable
/// output counts as wrong, not as an error.
pub fn evaluate_instance<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    inst: &PromptInstance,
    mask: &AblationMask,
) -> Result<bool, CorpusError> {
    let stop = vocab.token_id(b"'");
    let prefix = &inst.tokens[..inst.answer_span.start];
    let expected = vocab.decode(&inst.tokens[inst.answer_span.clone()])?;
    let max_new = inst.answer_span.len() + 4;
    let got = model.generate_greedy(prefix, max_new, stop, mask)?;
    Ok(match vocab.decode(&got) {
        Ok(text) => text.trim() == expected.trim(),
        Err(_) => false,
    })
}

/// Total log-probability of the answer tokens given their prefix.
pub fn likelihood<S: Scalar>(
    model: &Model<S>,
    inst: &PromptInstance,
    mask: &AblationMask,
) -> Result<f64, CorpusError> {
    let mean = answer_log_likelihood(model, &inst.tokens, inst.answer_span.clone(), mask)?;
    Ok(mean * inst.answer_span.len() as f64)
}

/// Result of filtering a corpus down to what the model can actually answer.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    /// The k highest-likelihood answerable definitions, best first.
    pub selected: Vec<WordDef>,
    pub answerable: usize,
    pub total: usize,
    pub requested: usize,
}

impl SelectionOutcome {
    /// True when fewer definitions were answerable than requested; the
    /// selection then holds everything answerable.
    pub fn insufficient(&self) -> bool {
        self.answerable < self.requested
    }
}

/// Keeps only definitions the model answers correctly under greedy decoding,
/// then returns the `k` with the highest answer log-likelihood (ties broken
/// by corpus order). By construction the selection re-evaluates to accuracy
/// 1.0.
pub fn select_answerable<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    template: &PromptTemplate,
    defs: &[WordDef],
    k: usize,
) -> Result<SelectionOutcome, CorpusError> {
    let mask = AblationMask::none();
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (i, def) in defs.iter().enumerate() {
        let (inst, _) = render_clean(vocab, template, def)?;
        if evaluate_instance(model, vocab, &inst, &mask)? {
            scored.push((likelihood(model, &inst, &mask)?, i));
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
    });
    let answerable = scored.len();
    let selected = scored.iter().take(k).map(|&(_, i)| defs[i].clone()).collect();
    Ok(SelectionOutcome { selected, answerable, total: defs.len(), requested: k })
}

/// One definition word's gradient importance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordImportance {
    /// Index into the definition's whitespace-separated words.
    pub word: usize,
    /// Max over the word's tokens of the input-gradient L2 norm.
    pub score: f64,
}

/// Ranks every definition word by how strongly the answer log-likelihood
/// responds to its input embeddings: one backward pass from the answer
/// positions, word score = max over its tokens of the gradient row norm.
/// Descending score, ties to the earlier word.
pub fn importance_rank<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    inst: &PromptInstance,
    rendered: &Rendered,
) -> Result<Vec<WordImportance>, CorpusError> {
    let input_grads = model.answer_input_gradients(&inst.tokens, inst.answer_span.clone())?;

    let spans = token_spans(vocab, &inst.tokens);
    let mut out = Vec::new();
    for (w, wspan) in rendered.def_words().iter().enumerate() {
        let mut best = 0.0f64;
        for t in intersecting_tokens(&spans, wspan) {
            let norm2: f64 = input_grads
                .row(t)
                .iter()
                .map(|&g| {
                    let g = g.to_f64();
                    g * g
                })
                .sum();
            best = best.max(norm2.sqrt());
        }
        out.push(WordImportance { word: w, score: best });
    }
    out.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.word.cmp(&b.word))
    });
    Ok(out)
}

/// One injected character: `ch` goes before the `offset`-th character of
/// definition word `word` (offsets run 0..word length, so an insertion never
/// lands immediately before a space).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub word: usize,
    pub offset: usize,
    pub ch: char,
}

/// Applies injections to `text` given the clean word spans. Pure insertion
/// arithmetic: output length grows by one character per injection.
pub fn apply_injections(
    text: &str,
    word_spans: &[Range<usize>],
    injections: &[Injection],
) -> String {
    let mut positions: Vec<(usize, char)> = injections
        .iter()
        .map(|inj| {
            let span = &word_spans[inj.word];
            let word = &text[span.clone()];
            let byte = word
                .char_indices()
                .nth(inj.offset)
                .map(|(i, _)| i)
                .unwrap_or(word.len());
            (span.start + byte, inj.ch)
        })
        .collect();
    // Right-to-left so earlier insertion points stay valid.
    positions.sort_by(|a, b| b.0.cmp(&a.0));
    let mut out = text.to_string();
    for (pos, ch) in positions {
        out.insert(pos, ch);
    }
    out
}

/// Word spans in the typo text: spans shift right past earlier injections and
/// grow by one character where a word received one.
fn shifted_word_spans(clean: &[Range<usize>], injections: &[Injection]) -> Vec<Range<usize>> {
    clean
        .iter()
        .enumerate()
        .map(|(w, span)| {
            let before: usize =
                injections.iter().filter(|i| i.word < w).map(|i| i.ch.len_utf8()).sum();
            let inside: usize =
                injections.iter().filter(|i| i.word == w).map(|i| i.ch.len_utf8()).sum();
            span.start + before..span.end + before + inside
        })
        .collect()
}

/// Builds the typo variant: one random character from `alphabet` into each of
/// the top-t ranked words, at a uniformly random in-word offset. `t = 0`
/// reproduces the clean tokens under the typo tag.
pub fn inject_typos(
    vocab: &Vocab,
    rendered: &Rendered,
    ranked: &[WordImportance],
    t: usize,
    alphabet: &str,
    seed: u64,
) -> Result<(PromptInstance, Vec<Injection>), CorpusError> {
    let word_spans = rendered.def_words();
    if word_spans.len() < t {
        return Err(CorpusError::NotEnoughWords { have: word_spans.len(), need: t });
    }
    let chars: Vec<char> = alphabet.chars().collect();
    if chars.is_empty() {
        return Err(CorpusError::Options("typo alphabet is empty".into()));
    }

    let mut selected: Vec<usize> = ranked.iter().take(t).map(|w| w.word).collect();
    selected.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut injections = Vec::with_capacity(t);
    for &w in &selected {
        let word = &rendered.text[word_spans[w].clone()];
        let offset = rng.gen_range(0..word.chars().count());
        let ch = chars[rng.gen_range(0..chars.len())];
        injections.push(Injection { word: w, offset, ch });
    }

    let text = apply_injections(&rendered.text, &word_spans, &injections);
    let seg = vocab.encode(&text)?;
    let mut tokens = Vec::with_capacity(seg.ids.len() + 1);
    tokens.push(BOS_ID);
    tokens.extend_from_slice(&seg.ids);
    let spans = token_spans(vocab, &tokens);
    let shift: usize = injections.iter().map(|i| i.ch.len_utf8()).sum();
    let answer_bytes = rendered.answer_span.start + shift..rendered.answer_span.end + shift;
    let answer_span = aligned_tokens(&spans, &answer_bytes).ok_or_else(|| {
        CorpusError::SpanMisaligned { what: "typo answer", text: text.clone() }
    })?;
    let typo_word_spans = shifted_word_spans(&word_spans, &injections);
    let marked = mark_positions(&spans, &typo_word_spans, &selected, &answer_span);
    let inst = PromptInstance { variant: Variant::Typo, text, tokens, answer_span, marked };
    Ok((inst, injections))
}

/// Builds the split variant: the clean text with each perturbed word's region
/// re-segmented to the token count that region has in the typo variant, so
/// the pair differs only in segmentation, never in bytes. Regions whose
/// counts already match keep their canonical tokens.
pub fn make_split(
    vocab: &Vocab,
    rendered: &Rendered,
    clean: &PromptInstance,
    typo: &PromptInstance,
    injections: &[Injection],
    seed: u64,
) -> Result<PromptInstance, CorpusError> {
    let word_spans = rendered.def_words();
    let typo_word_spans = shifted_word_spans(&word_spans, injections);
    let clean_spans = token_spans(vocab, &clean.tokens);
    let typo_spans = token_spans(vocab, &typo.tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Replacements in clean token space, ascending and disjoint: injections
    // target distinct words and regions never share a chunk.
    let mut patches: Vec<(Range<usize>, Vec<TokenId>)> = Vec::new();
    for inj in injections {
        let w = inj.word;
        let clean_region = attach_leading_space(&clean.text, &word_spans[w]);
        let typo_region = attach_leading_space(&typo.text, &typo_word_spans[w]);
        let clean_r = aligned_tokens(&clean_spans, &clean_region).ok_or_else(|| {
            CorpusError::SpanMisaligned { what: "clean word region", text: clean.text.clone() }
        })?;
        let typo_r = aligned_tokens(&typo_spans, &typo_region).ok_or_else(|| {
            CorpusError::SpanMisaligned { what: "typo word region", text: typo.text.clone() }
        })?;
        let target = typo_r.len();
        if target == clean_r.len() {
            continue;
        }
        let region_text = &clean.text[clean_region.clone()];
        let cands = vocab
            .enumerate_segmentations(region_text, target, SPLIT_ENUM_CAP)
            .map_err(|e| match e {
                TokenizerError::NoSegmentation { .. } => CorpusError::NoMatchingSegmentation {
                    word: rendered.text[word_spans[w].clone()].to_string(),
                    region: region_text.to_string(),
                    target_len: target,
                },
                other => CorpusError::Tokenizer(other),
            })?;
        let pick = rng.gen_range(0..cands.len());
        patches.push((clean_r, cands[pick].ids.clone()));
    }

    let mut tokens = Vec::with_capacity(typo.tokens.len());
    let mut cursor = 0usize;
    for (r, ids) in &patches {
        tokens.extend_from_slice(&clean.tokens[cursor..r.start]);
        tokens.extend_from_slice(ids);
        cursor = r.end;
    }
    tokens.extend_from_slice(&clean.tokens[cursor..]);
    debug_assert_eq!(tokens.len(), typo.tokens.len());

    let spans = token_spans(vocab, &tokens);
    let answer_span = aligned_tokens(&spans, &rendered.answer_span).ok_or_else(|| {
        CorpusError::SpanMisaligned { what: "split answer", text: clean.text.clone() }
    })?;
    let selected: Vec<usize> = injections.iter().map(|i| i.word).collect();
    let marked = mark_positions(&spans, &word_spans, &selected, &answer_span);
    Ok(PromptInstance {
        variant: Variant::Split,
        text: clean.text.clone(),
        tokens,
        answer_span,
        marked,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildOptions {
    /// How many of the most important definition words receive a typo.
    pub t: usize,
    pub seed: u64,
    pub alphabet: String,
    pub template: PromptTemplate,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            t: 1,
            seed: 0,
            alphabet: TYPO_ALPHABET.to_string(),
            template: PromptTemplate::default(),
        }
    }
}

impl BuildOptions {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.alphabet.is_empty() || !self.alphabet.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(CorpusError::Options(
                "typo alphabet must be nonempty ASCII letters or digits".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletSample {
    /// Position in the input definition list.
    pub index: usize,
    pub seed: u64,
    pub word: String,
    pub definition: String,
    /// Definition word indices that received a typo, ascending.
    pub selected_words: Vec<usize>,
    pub injections: Vec<Injection>,
    pub clean: PromptInstance,
    pub typo: PromptInstance,
    pub split: PromptInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSample {
    pub index: usize,
    pub word: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub seed: u64,
    pub t: usize,
    pub alphabet: String,
    pub template: String,
    pub requested: usize,
    pub built: usize,
    pub dropped: Vec<DroppedSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletDataset {
    pub meta: TripletMeta,
    pub samples: Vec<TripletSample>,
}

/// Builds aligned clean/typo/split triplets for every definition. Samples
/// whose definitions are too short for `t` typos or whose split variant has
/// no matching segmentation are dropped and recorded in the metadata; the
/// build is otherwise a pure function of (definitions, model, options).
pub fn build_triplets<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    defs: &[WordDef],
    opts: &BuildOptions,
) -> Result<TripletDataset, CorpusError> {
    opts.validate()?;
    let mut samples = Vec::with_capacity(defs.len());
    let mut dropped = Vec::new();
    for (i, def) in defs.iter().enumerate() {
        let sample_seed = derive_seed(opts.seed, i as u64);
        let (mut clean, rendered) = render_clean(vocab, &opts.template, def)?;
        let ranked = importance_rank(model, vocab, &clean, &rendered)?;
        let typo_seed = derive_seed(sample_seed, 1);
        let (typo, injections) =
            match inject_typos(vocab, &rendered, &ranked, opts.t, &opts.alphabet, typo_seed) {
                Ok(v) => v,
                Err(CorpusError::NotEnoughWords { have, need }) => {
                    dropped.push(DroppedSample {
                        index: i,
                        word: def.word.clone(),
                        reason: format!("{have} definition words, need {need}"),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
        let split_seed = derive_seed(sample_seed, 2);
        let split = match make_split(vocab, &rendered, &clean, &typo, &injections, split_seed) {
            Ok(v) => v,
            Err(CorpusError::NoMatchingSegmentation { word, region, target_len }) => {
                dropped.push(DroppedSample {
                    index: i,
                    word: def.word.clone(),
                    reason: format!(
                        "no segmentation of {region:?} into {target_len} tokens (word {word:?})"
                    ),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let selected: Vec<usize> = injections.iter().map(|j| j.word).collect();
        let clean_spans = token_spans(vocab, &clean.tokens);
        clean.marked =
            mark_positions(&clean_spans, &rendered.def_words(), &selected, &clean.answer_span);
        samples.push(TripletSample {
            index: i,
            seed: sample_seed,
            word: def.word.clone(),
            definition: def.definition.clone(),
            selected_words: selected,
            injections,
            clean,
            typo,
            split,
        });
    }
    let meta = TripletMeta {
        seed: opts.seed,
        t: opts.t,
        alphabet: opts.alphabet.clone(),
        template: opts.template.as_str().to_string(),
        requested: defs.len(),
        built: samples.len(),
        dropped,
    };
    Ok(TripletDataset { meta, samples })
}

impl TripletDataset {
    /// Borrows one variant of every sample, in sample order.
    pub fn instances(&self, variant: Variant) -> Vec<&PromptInstance> {
        self.samples
            .iter()
            .map(|s| match variant {
                Variant::Clean => &s.clean,
                Variant::Typo => &s.typo,
                Variant::Split => &s.split,
            })
            .collect()
    }

    /// JSONL encoding: the metadata line followed by one line per sample.
    /// Field order is fixed by the struct definitions, so equal datasets
    /// serialize to identical bytes.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.meta).expect("metadata serializes");
        for s in &self.samples {
            out.push('\n');
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        }
        out.push('\n');
        out
    }

    pub fn from_jsonl(raw: &str) -> Result<Self, CorpusError> {
        let mut lines = raw.lines();
        let meta_line = lines
            .next()
            .ok_or_else(|| CorpusError::DatasetFormat("empty dataset file".into()))?;
        let meta: TripletMeta = serde_json::from_str(meta_line)
            .map_err(|e| CorpusError::DatasetFormat(format!("metadata line: {e}")))?;
        let mut samples = Vec::with_capacity(meta.built);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(line).map_err(|e| {
                CorpusError::DatasetFormat(format!("sample line {}: {e}", i + 2))
            })?);
        }
        if samples.len() != meta.built {
            return Err(CorpusError::DatasetFormat(format!(
                "metadata promises {} samples, file holds {}",
                meta.built,
                samples.len()
            )));
        }
        Ok(TripletDataset { meta, samples })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// Language-model training data over rendered clean prompts, with two
/// augmentations drawn per (epoch, sample): re-segmenting one definition
/// word (teaches segmentation invariance, which the split control relies
/// on) and injecting one random typo (teaches typo robustness). Exactly one
/// or neither applies per draw.
pub struct TrainingSet {
    vocab: Vocab,
    samples: Vec<TrainSample>,
    stop: TokenId,
    seg_dropout: f64,
    typo_noise: f64,
    alphabet: Vec<char>,
}

struct TrainSample {
    text: String,
    tokens: Vec<TokenId>,
    word_spans: Vec<Range<usize>>,
    /// Token index where the answer starts; the probe prefix ends here.
    answer_start: usize,
    answer: Vec<TokenId>,
}

impl TrainingSet {
    pub fn new(
        vocab: Vocab,
        template: &PromptTemplate,
        defs: &[WordDef],
    ) -> Result<Self, CorpusError> {
        let stop = vocab.token_id(b"'").expect("byte tokens are always present");
        let mut samples = Vec::with_capacity(defs.len());
        for def in defs {
            let (inst, rendered) = render_clean(&vocab, template, def)?;
            samples.push(TrainSample {
                text: inst.text,
                word_spans: rendered.def_words(),
                answer_start: inst.answer_span.start,
                answer: inst.tokens[inst.answer_span.clone()].to_vec(),
                tokens: inst.tokens,
            });
        }
        Ok(TrainingSet {
            vocab,
            samples,
            stop,
            seg_dropout: 0.25,
            typo_noise: 0.15,
            alphabet: TYPO_ALPHABET.chars().collect(),
        })
    }

    /// Overrides the augmentation rates. The two draws are exclusive, so
    /// their sum must stay within 1.
    pub fn with_augmentation(mut self, seg_dropout: f64, typo_noise: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&(seg_dropout + typo_noise))
                && seg_dropout >= 0.0
                && typo_noise >= 0.0
        );
        self.seg_dropout = seg_dropout;
        self.typo_noise = typo_noise;
        self
    }
}

impl TrainData for TrainingSet {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sequence(&self, epoch: usize, idx: usize, seed: u64) -> Vec<TokenId> {
        let s = &self.samples[idx];
        let stream = ((epoch as u64) << 32) ^ idx as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        let roll: f64 = rng.gen();
        if s.word_spans.is_empty() {
            return s.tokens.clone();
        }
        if roll < self.typo_noise {
            let w = rng.gen_range(0..s.word_spans.len());
            let word = &s.text[s.word_spans[w].clone()];
            let inj = Injection {
                word: w,
                offset: rng.gen_range(0..word.chars().count()),
                ch: self.alphabet[rng.gen_range(0..self.alphabet.len())],
            };
            let text = apply_injections(&s.text, &s.word_spans, std::slice::from_ref(&inj));
            match self.vocab.encode(&text) {
                Ok(seg) => {
                    let mut tokens = Vec::with_capacity(seg.ids.len() + 1);
                    tokens.push(BOS_ID);
                    tokens.extend_from_slice(&seg.ids);
                    tokens
                }
                Err(_) => s.tokens.clone(),
            }
        } else if roll < self.typo_noise + self.seg_dropout {
            let w = rng.gen_range(0..s.word_spans.len());
            let region = attach_leading_space(&s.text, &s.word_spans[w]);
            let spans = token_spans(&self.vocab, &s.tokens);
            let Some(r) = aligned_tokens(&spans, &region) else {
                return s.tokens.clone();
            };
            match self.vocab.enumerate_segmentations(&s.text[region], r.len() + 1, 64) {
                Ok(cands) if !cands.is_empty() => {
                    let pick = rng.gen_range(0..cands.len());
                    let mut tokens = Vec::with_capacity(s.tokens.len() + 1);
                    tokens.extend_from_slice(&s.tokens[..r.start]);
                    tokens.extend_from_slice(&cands[pick].ids);
                    tokens.extend_from_slice(&s.tokens[r.end..]);
                    tokens
                }
                _ => s.tokens.clone(),
            }
        } else {
            s.tokens.clone()
        }
    }

    fn probe(&self, idx: usize) -> (Vec<TokenId>, Vec<TokenId>, Option<TokenId>) {
        let s = &self.samples[idx];
        (s.tokens[..s.answer_start].to_vec(), s.answer.clone(), Some(self.stop))
    }

    fn probe_len(&self) -> usize {
        self.samples.len()
    }
}
