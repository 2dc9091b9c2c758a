//! Mixed tokenization: CJK codepoints are atomic tokens, Latin-script words
//! go through byte-pair encoding, and everything else falls back to
//! single-character tokens.
//!
//! Specials occupy fixed ids 0–4 and are never produced by text
//! segmentation. Decoding is the inverse of encoding up to single-space
//! normalization around Latin words.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const BLANK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<unk>", "<blank>"];

/// End-of-word marker used by the BPE symbol stream. It starts as its own
/// symbol after the letters of a word; merges may fuse it into pieces.
pub const END_OF_WORD: &str = "</w>";

/// Vocabulary accounting of the full-scale configuration this codebase is
/// shaped after: 1,000 BPE tokens + 6,827 characters + 5 specials = 7,832.
/// Kept as constants so the arithmetic itself stays under test.
pub const FULL_SCALE_BPE_TOKENS: usize = 1000;
pub const FULL_SCALE_CHAR_TOKENS: usize = 6827;
pub const FULL_SCALE_VOCAB_SIZE: usize = 7832;

/// CJK ideograph detection by Unicode block. Used to pick character tokens
/// when generating text; segmentation itself treats every non-Latin
/// character as atomic, CJK or not.
pub fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'   // CJK Unified Ideographs
        | '\u{3400}'..='\u{4DBF}' // Extension A
        | '\u{F900}'..='\u{FAFF}' // Compatibility Ideographs
    )
}

/// Latin-script letters are the only characters that join into words.
pub fn is_latin(c: char) -> bool {
    c.is_ascii_alphabetic()
}

/// One segment of raw text: a Latin word (for BPE) or a single atomic
/// character (CJK, digit, punctuation, anything else).
enum Segment {
    Word(String),
    Char(char),
}

fn segment(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_latin(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(Segment::Word(std::mem::take(&mut word)));
        }
        if !c.is_whitespace() {
            out.push(Segment::Char(c));
        }
    }
    if !word.is_empty() {
        out.push(Segment::Word(word));
    }
    out
}

/// Ordered list of byte-pair merges over Latin words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learn `num_merges` merges by greedy highest-frequency pair fusion.
    /// Ties break toward the lexicographically smallest pair. Stops early if
    /// nothing is left to merge.
    pub fn train(corpus: &[String], num_merges: usize) -> Result<Self> {
        let mut word_freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for line in corpus {
            for seg in segment(line) {
                if let Segment::Word(w) = seg {
                    let mut symbols: Vec<String> =
                        w.chars().map(|c| c.to_string()).collect();
                    symbols.push(END_OF_WORD.to_string());
                    *word_freq.entry(symbols).or_insert(0) += 1;
                }
            }
        }
        if word_freq.is_empty() {
            // A corpus without Latin words is fine when no merges were asked
            // for (pure-CJK corpora take the character path exclusively).
            if num_merges == 0 {
                return Ok(BpeModel { merges: Vec::new() });
            }
            return Err(Error::Tokenizer(
                "BPE training corpus has no Latin-script words".into(),
            ));
        }
        let mut merges = Vec::with_capacity(num_merges);
        for _ in 0..num_merges {
            let mut pair_counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (symbols, freq) in &word_freq {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].as_str(), pair[1].as_str()))
                        .or_insert(0) += freq;
                }
            }
            // Highest count; BTreeMap order already yields the smallest pair
            // among equals because `>` keeps the earlier (smaller) key.
            let Some(best) = pair_counts
                .iter()
                .fold(None::<(&(&str, &str), u64)>, |acc, (pair, &count)| {
                    match acc {
                        Some((_, c)) if c >= count => acc,
                        _ => Some((pair, count)),
                    }
                })
                .map(|(pair, _)| (pair.0.to_string(), pair.1.to_string()))
            else {
                break;
            };
            let rebuilt: BTreeMap<Vec<String>, u64> = word_freq
                .into_iter()
                .map(|(symbols, freq)| (fuse(&symbols, &best), freq))
                .collect();
            word_freq = rebuilt;
            merges.push(best);
        }
        Ok(BpeModel { merges })
    }

    /// Split one Latin word into BPE pieces (the last piece carries or is the
    /// end-of-word marker).
    pub fn apply(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        symbols.push(END_OF_WORD.to_string());
        for merge in &self.merges {
            symbols = fuse(&symbols, merge);
        }
        symbols
    }

    /// One merge pair per line, space-separated, in merge order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    /// Inverse of [`BpeModel::to_text`]; `origin` labels error messages.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((a, b)) = line.split_once(' ') else {
                return Err(Error::Tokenizer(format!(
                    "{origin}:{}: expected two space-separated symbols",
                    lineno + 1
                )));
            };
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(BpeModel { merges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Self::from_text(&content, &path.display().to_string())
    }
}

/// Replace non-overlapping left-to-right occurrences of the pair.
fn fuse(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Immutable id<->token bijection with fixed specials at ids 0–4.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    num_char_tokens: usize,
    num_bpe_tokens: usize,
}

impl Vocabulary {
    /// Build from a corpus: atomic character tokens (every non-whitespace,
    /// non-Latin character seen) plus the BPE piece inventory of every Latin
    /// word, each sorted for a reproducible id assignment.
    pub fn build(corpus: &[String], bpe: &BpeModel) -> Result<Self> {
        let mut chars: BTreeSet<char> = BTreeSet::new();
        let mut pieces: BTreeSet<String> = BTreeSet::new();
        for line in corpus {
            for seg in segment(line) {
                match seg {
                    Segment::Char(c) => {
                        chars.insert(c);
                    }
                    Segment::Word(w) => {
                        pieces.extend(bpe.apply(&w));
                    }
                }
            }
        }
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(chars.iter().map(|c| c.to_string()));
        id_to_token.extend(pieces.iter().cloned());
        Self::from_tokens(id_to_token, chars.len(), pieces.len())
    }

    fn from_tokens(
        id_to_token: Vec<String>,
        num_char_tokens: usize,
        num_bpe_tokens: usize,
    ) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { id_to_token, token_to_id, num_char_tokens, num_bpe_tokens })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn num_char_tokens(&self) -> usize {
        self.num_char_tokens
    }

    pub fn num_bpe_tokens(&self) -> usize {
        self.num_bpe_tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Inverse of [`Vocabulary::to_text`]; `origin` labels error messages.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let id_to_token: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if id_to_token.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Tokenizer(format!(
                "{origin}: vocabulary too small ({} tokens)",
                id_to_token.len()
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token[i] != *want {
                return Err(Error::Tokenizer(format!(
                    "{origin}: token {i} must be {want}, found {:?}",
                    id_to_token[i]
                )));
            }
        }
        // Count kinds back from shape: single non-Latin char = char token,
        // the rest are BPE pieces.
        let body = &id_to_token[SPECIAL_TOKENS.len()..];
        let num_char_tokens = body
            .iter()
            .filter(|t| {
                let mut cs = t.chars();
                matches!((cs.next(), cs.next()), (Some(c), None) if !is_latin(c))
            })
            .count();
        let num_bpe_tokens = body.len() - num_char_tokens;
        Self::from_tokens(id_to_token, num_char_tokens, num_bpe_tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Self::from_text(&content, &path.display().to_string())
    }
}

/// Vocabulary plus BPE model: the full encode/decode interface.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub bpe: BpeModel,
}

impl Tokenizer {
    /// Train BPE and build the vocabulary from one corpus.
    pub fn train(corpus: &[String], num_merges: usize) -> Result<Self> {
        let bpe = BpeModel::train(corpus, num_merges)?;
        let vocab = Vocabulary::build(corpus, &bpe)?;
        Ok(Tokenizer { vocab, bpe })
    }

    /// Segment and map to ids. Unknown symbols become `unk`; specials are
    /// never produced.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for seg in segment(text) {
            match seg {
                Segment::Char(c) => {
                    ids.push(self.vocab.id(&c.to_string()).unwrap_or(UNK));
                }
                Segment::Word(w) => {
                    for piece in self.bpe.apply(&w) {
                        ids.push(self.vocab.id(&piece).unwrap_or(UNK));
                    }
                }
            }
        }
        ids
    }

    /// Map ids back to text. `eos` and everything after it are dropped;
    /// `pad`, `sos`, and `blank` are skipped. Latin words come out separated
    /// from their surroundings by single spaces.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let first_piece_id = SPECIAL_TOKENS.len() + self.vocab.num_char_tokens();
        let mut out = String::new();
        let mut mid_word = false;
        for (pos, &id) in ids.iter().enumerate() {
            if id == EOS {
                break;
            }
            if id == PAD || id == SOS || id == BLANK {
                continue;
            }
            let Some(token) = self.vocab.token(id) else {
                return Err(Error::Tokenizer(format!(
                    "id {id} out of range at position {pos}"
                )));
            };
            let is_word_piece = id as usize >= first_piece_id;
            if is_word_piece && !mid_word && !out.is_empty() && !out.ends_with(' ') {
                out.push(' ');
            }
            match token.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    out.push_str(stem);
                    out.push(' ');
                    mid_word = false;
                }
                None => {
                    out.push_str(token);
                    mid_word = is_word_piece;
                }
            }
        }
        Ok(out.trim_end().to_string())
    }
}
