//! Byte-level BPE tokenizer.
//!
//! The vocabulary is a flat list of byte strings. Id 0 is the `<bos>` marker,
//! ids 1..=256 are the 256 single bytes (so every input is encodable), and
//! everything above that was learned by pair merging. A token's id doubles as
//! its merge rank: encoding repeatedly fuses the adjacent pair whose
//! concatenation is the lowest-id vocabulary entry, which reproduces the
//! training-order merge sequence without storing a separate merge table.
//!
//! Encoding never crosses pre-tokenizer chunk boundaries. A chunk is either a
//! whitespace run or an optional single leading space followed by a run of one
//! character class (letters, digits, or punctuation), the usual byte-BPE
//! convention that gives " word" tokens and keeps digits split from letters.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// Begin-of-sequence marker. Never produced by `encode`, skipped by `decode`.
pub const BOS_ID: TokenId = 0;

/// Token text used for the begin-of-sequence entry in vocab files.
pub const BOS_TOKEN: &str = "<bos>";

/// Number of reserved entries before learned merges: `<bos>` plus 256 bytes.
pub const BASE_ENTRIES: usize = 257;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot encode empty input")]
    EmptyInput,
    #[error("token id {id} is out of range (vocab size {size})")]
    InvalidTokenId { id: TokenId, size: usize },
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("no segmentation of {text:?} into exactly {target_len} tokens")]
    NoSegmentation { text: String, target_len: usize },
    #[error("vocab size {requested} is below the minimum {minimum} (bos + 256 bytes)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab file line {line}: {reason}")]
    FileFormat { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A tokenization of a specific string. `decode(ids) == text` always holds
/// for values produced by this module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub ids: Vec<TokenId>,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, TokenId>,
    max_token_len: usize,
}

impl Vocab {
    /// Builds a vocabulary from an explicit entry list. Entry 0 must be
    /// `<bos>`, entries 1..=256 must be the single bytes in order, and all
    /// entries must be distinct.
    pub fn from_entries(entries: Vec<Vec<u8>>) -> Result<Self, TokenizerError> {
        if entries.len() < BASE_ENTRIES {
            return Err(TokenizerError::VocabTooSmall {
                requested: entries.len(),
                minimum: BASE_ENTRIES,
            });
        }
        if entries[0] != BOS_TOKEN.as_bytes() {
            return Err(TokenizerError::FileFormat {
                line: 0,
                reason: format!("first entry must be {BOS_TOKEN}"),
            });
        }
        for b in 0..=255u8 {
            if entries[1 + b as usize] != [b] {
                return Err(TokenizerError::FileFormat {
                    line: 1 + b as usize,
                    reason: format!("entry must be the single byte 0x{b:02x}"),
                });
            }
        }
        let mut lookup = HashMap::with_capacity(entries.len());
        let mut max_token_len = 1;
        for (id, entry) in entries.iter().enumerate() {
            if id == BOS_ID as usize {
                continue;
            }
            if entry.is_empty() {
                return Err(TokenizerError::FileFormat {
                    line: id,
                    reason: "empty token".into(),
                });
            }
            if lookup.insert(entry.clone(), id as TokenId).is_some() {
                return Err(TokenizerError::FileFormat {
                    line: id,
                    reason: "duplicate token".into(),
                });
            }
            max_token_len = max_token_len.max(entry.len());
        }
        Ok(Vocab { entries, lookup, max_token_len })
    }

    /// Trains a vocabulary of `size` total entries on the corpus lines.
    ///
    /// Merge selection is fully deterministic: highest pair count wins, ties
    /// broken by smaller left id, then smaller right id. Training stops early
    /// if no adjacent pair occurs at least twice, in which case the vocab is
    /// smaller than requested.
    pub fn train(corpus: &[String], size: usize) -> Result<Self, TokenizerError> {
        if size < BASE_ENTRIES {
            return Err(TokenizerError::VocabTooSmall {
                requested: size,
                minimum: BASE_ENTRIES,
            });
        }
        if corpus.iter().all(|line| line.is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }

        // Chunk frequencies; merges never cross chunk boundaries, so each
        // distinct chunk is processed once with a weight.
        let mut chunk_freq: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for (start, end) in pre_tokenize(line) {
                *chunk_freq.entry(&line[start..end]).or_insert(0) += 1;
            }
        }
        let mut chunks: Vec<(Vec<TokenId>, u64)> = chunk_freq
            .into_iter()
            .map(|(text, freq)| (text.bytes().map(byte_id).collect(), freq))
            .collect();
        // HashMap iteration order must not leak into the result; the pair
        // counts below are order-free sums, but sort anyway so debugging a
        // training run is reproducible.
        chunks.sort_unstable();

        let mut entries: Vec<Vec<u8>> = Vec::with_capacity(size);
        entries.push(BOS_TOKEN.as_bytes().to_vec());
        for b in 0..=255u8 {
            entries.push(vec![b]);
        }

        while entries.len() < size {
            let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
            for (seq, freq) in &chunks {
                for pair in seq.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_insert(0) += freq;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, count)| count >= 2)
                .max_by_key(|&((left, right), count)| {
                    (count, std::cmp::Reverse(left), std::cmp::Reverse(right))
                });
            let Some(((left, right), _)) = best else { break };

            let merged_id = entries.len() as TokenId;
            let mut merged = entries[left as usize].clone();
            merged.extend_from_slice(&entries[right as usize]);
            entries.push(merged);

            for (seq, _) in &mut chunks {
                let mut write = 0;
                let mut read = 0;
                while read < seq.len() {
                    if read + 1 < seq.len() && seq[read] == left && seq[read + 1] == right {
                        seq[write] = merged_id;
                        read += 2;
                    } else {
                        seq[write] = seq[read];
                        read += 1;
                    }
                    write += 1;
                }
                seq.truncate(write);
            }
        }

        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.lookup.get(bytes).copied()
    }

    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8], TokenizerError> {
        self.entries
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(TokenizerError::InvalidTokenId { id, size: self.entries.len() })
    }

    /// Lossy printable form of a token, for reports and plots.
    pub fn token_display(&self, id: TokenId) -> String {
        match self.entries.get(id as usize) {
            Some(bytes) => escape_token(bytes),
            None => format!("<invalid:{id}>"),
        }
    }

    /// Canonical tokenization: per pre-tokenizer chunk, repeatedly merge the
    /// adjacent pair whose concatenation has the lowest vocabulary id.
    pub fn encode(&self, text: &str) -> Result<Segmentation, TokenizerError> {
        if text.is_empty() {
            return Err(TokenizerError::EmptyInput);
        }
        let mut ids = Vec::with_capacity(text.len() / 2 + 1);
        for (start, end) in pre_tokenize(text) {
            self.encode_chunk(text[start..end].as_bytes(), &mut ids);
        }
        Ok(Segmentation { ids, text: text.to_string() })
    }

    fn encode_chunk(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut seq: Vec<TokenId> = bytes.iter().copied().map(byte_id).collect();
        let mut scratch = Vec::with_capacity(self.max_token_len);
        loop {
            let mut best: Option<(TokenId, usize)> = None;
            for pos in 0..seq.len().saturating_sub(1) {
                scratch.clear();
                scratch.extend_from_slice(&self.entries[seq[pos] as usize]);
                scratch.extend_from_slice(&self.entries[seq[pos + 1] as usize]);
                if let Some(&merged) = self.lookup.get(&scratch) {
                    if best.map_or(true, |(b, _)| merged < b) {
                        best = Some((merged, pos));
                    }
                }
            }
            let Some((merged, pos)) = best else { break };
            seq[pos] = merged;
            seq.remove(pos + 1);
        }
        out.extend_from_slice(&seq);
    }

    /// Concatenates token bytes, skipping `<bos>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == BOS_ID {
                continue;
            }
            bytes.extend_from_slice(self.token_bytes(id)?);
        }
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }

    /// All tokenizations of `text` into exactly `target_len` tokens, in a
    /// deterministic order (depth-first, shorter first token first), capped
    /// at `max_candidates`. Errors if none exist.
    pub fn enumerate_segmentations(
        &self,
        text: &str,
        target_len: usize,
        max_candidates: usize,
    ) -> Result<Vec<Segmentation>, TokenizerError> {
        if text.is_empty() {
            return Err(TokenizerError::EmptyInput);
        }
        let bytes = text.as_bytes();
        let n = bytes.len();
        if target_len == 0 || target_len > n || max_candidates == 0 {
            return Err(TokenizerError::NoSegmentation {
                text: text.to_string(),
                target_len,
            });
        }

        // matches[i] lists (end, id) for every token equal to bytes[i..end],
        // end ascending. Token strings are unique, so each (i, end) yields at
        // most one id.
        let mut matches: Vec<Vec<(usize, TokenId)>> = Vec::with_capacity(n);
        for i in 0..n {
            let hi = n.min(i + self.max_token_len);
            let mut row = Vec::new();
            for end in i + 1..=hi {
                if let Some(&id) = self.lookup.get(&bytes[i..end]) {
                    row.push((end, id));
                }
            }
            matches.push(row);
        }

        // feasible[i][k]: suffix starting at i splits into exactly k tokens.
        let mut feasible = vec![vec![false; target_len + 1]; n + 1];
        feasible[n][0] = true;
        for i in (0..n).rev() {
            for k in 1..=target_len {
                feasible[i][k] = matches[i].iter().any(|&(end, _)| feasible[end][k - 1]);
            }
        }
        if !feasible[0][target_len] {
            return Err(TokenizerError::NoSegmentation {
                text: text.to_string(),
                target_len,
            });
        }

        let mut out = Vec::new();
        let mut stack: Vec<TokenId> = Vec::with_capacity(target_len);
        self.dfs_segmentations(
            text,
            &matches,
            &feasible,
            0,
            target_len,
            &mut stack,
            &mut out,
            max_candidates,
        );
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs_segmentations(
        &self,
        text: &str,
        matches: &[Vec<(usize, TokenId)>],
        feasible: &[Vec<bool>],
        i: usize,
        remaining: usize,
        stack: &mut Vec<TokenId>,
        out: &mut Vec<Segmentation>,
        cap: usize,
    ) {
        if out.len() >= cap {
            return;
        }
        if remaining == 0 {
            if i == text.len() {
                out.push(Segmentation { ids: stack.clone(), text: text.to_string() });
            }
            return;
        }
        for &(end, id) in &matches[i] {
            if feasible[end][remaining - 1] {
                stack.push(id);
                self.dfs_segmentations(text, matches, feasible, end, remaining - 1, stack, out, cap);
                stack.pop();
                if out.len() >= cap {
                    return;
                }
            }
        }
    }

    /// Writes one token per line, id = line number. Bytes outside printable
    /// ASCII are written as `\xNN`; backslash as `\\`.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut body = String::new();
        for (id, entry) in self.entries.iter().enumerate() {
            if id == BOS_ID as usize {
                body.push_str(BOS_TOKEN);
            } else {
                body.push_str(&escape_token(entry));
            }
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let raw = std::fs::read_to_string(path)?;
        let mut lines: Vec<&str> = raw.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        let mut entries = Vec::with_capacity(lines.len());
        for (line_no, line) in lines.iter().enumerate() {
            if line_no == 0 {
                if *line != BOS_TOKEN {
                    return Err(TokenizerError::FileFormat {
                        line: 0,
                        reason: format!("expected {BOS_TOKEN}, found {line:?}"),
                    });
                }
                entries.push(BOS_TOKEN.as_bytes().to_vec());
                continue;
            }
            entries.push(unescape_token(line).map_err(|reason| {
                TokenizerError::FileFormat { line: line_no, reason }
            })?);
        }
        Self::from_entries(entries)
    }
}

fn byte_id(b: u8) -> TokenId {
    b as TokenId + 1
}

fn escape_token(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            0x20..=0x7e => out.push(b as char),
            _ => {
                let _ = write!(out, "\\x{b:02x}");
            }
        }
    }
    out
}

fn unescape_token(line: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(line.len());
    let mut chars = line.bytes();
    while let Some(b) = chars.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match chars.next() {
            Some(b'\\') => out.push(b'\\'),
            Some(b'x') => {
                let hi = chars.next().ok_or("truncated \\x escape")?;
                let lo = chars.next().ok_or("truncated \\x escape")?;
                let hex = [hi, lo];
                let hex = std::str::from_utf8(&hex).map_err(|_| "bad \\x escape")?;
                let value =
                    u8::from_str_radix(hex, 16).map_err(|_| format!("bad \\x escape {hex:?}"))?;
                out.push(value);
            }
            other => return Err(format!("unknown escape \\{:?}", other.map(|c| c as char))),
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Punct,
}

fn char_class(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Punct
    }
}

/// Splits text into byte ranges that BPE merges may not cross: whitespace
/// runs, and class runs (letters/digits/punctuation) with an optional single
/// leading space. Ranges are contiguous and cover the input exactly.
pub fn pre_tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = text.len();
    let mut i = 0; // index into chars
    while i < chars.len() {
        let start = chars[i].0;
        if chars[i].1.is_whitespace() {
            let mut j = i;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            // A single trailing space joins the following class run
            // (the " word" convention); the rest stays its own chunk.
            if j < chars.len() && chars[j - 1].1 == ' ' {
                if j - 1 > i {
                    out.push((start, chars[j - 1].0));
                }
                let class = char_class(chars[j].1);
                let mut k = j;
                while k < chars.len()
                    && !chars[k].1.is_whitespace()
                    && char_class(chars[k].1) == class
                {
                    k += 1;
                }
                out.push((chars[j - 1].0, end_offset(&chars, k, n)));
                i = k;
            } else {
                out.push((start, end_offset(&chars, j, n)));
                i = j;
            }
        } else {
            let class = char_class(chars[i].1);
            let mut k = i;
            while k < chars.len() && !chars[k].1.is_whitespace() && char_class(chars[k].1) == class
            {
                k += 1;
            }
            out.push((start, end_offset(&chars, k, n)));
            i = k;
        }
    }
    out
}

fn end_offset(chars: &[(usize, char)], idx: usize, len: usize) -> usize {
    chars.get(idx).map_or(len, |&(pos, _)| pos)
}
