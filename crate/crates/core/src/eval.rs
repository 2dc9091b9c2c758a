//! Error-rate scoring: CER/WER, benchmark-table aggregation, and relative
//! error reduction.
//!
//! All internal arithmetic is full-precision `f64`; rounding happens only at
//! display time, half-up, so published-style tables reproduce exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par;

/// Version tag of the text-normalization rules below. Scores are only
/// comparable when produced under the same version.
pub const NORMALIZATION_VERSION: &str = "v1";

/// Non-ASCII punctuation removed by normalization (ASCII punctuation is
/// removed via `char::is_ascii_punctuation`).
const PUNCT_EXTRA: &[char] = &[
    '，', '。', '、', '！', '？', '；', '：', '（', '）', '【', '】', '《', '》', '「', '」',
    '『', '』', '〈', '〉', '〔', '〕', '…', '—', '～', '·', '‧', '・', '“', '”', '‘', '’',
    '－', '％', '＆', '＋', '＝', '｜',
];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || PUNCT_EXTRA.contains(&c)
}

/// Scoring unit: characters for CER, words for WER.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Char,
    Word,
}

/// Normalization v1, character mode: drop whitespace and punctuation, keep
/// every remaining Unicode scalar value as one unit.
pub fn normalize_chars(text: &str) -> Vec<char> {
    text.chars()
        .filter(|c| !c.is_whitespace() && !is_punct(*c))
        .collect()
}

/// Normalization v1, word mode: lowercase, remove punctuation, split on
/// whitespace, drop empty tokens.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !is_punct(*c)).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Edit operation counts from an optimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

/// Minimal-edit-distance counts between reference and hypothesis sequences.
///
/// When several optimal alignments exist, ties are broken preferring
/// substitution over deletion over insertion, so counts are reproducible.
pub fn edit_distance<U: Eq>(reference: &[U], hypothesis: &[U]) -> EditCounts {
    let (rl, hl) = (reference.len(), hypothesis.len());
    // dp[j] holds the best counts for (i, j); rolled by rows over i.
    let mut prev: Vec<EditCounts> = (0..=hl)
        .map(|j| EditCounts { sub: 0, del: 0, ins: j })
        .collect();
    let mut cur = vec![EditCounts::default(); hl + 1];
    for i in 1..=rl {
        cur[0] = EditCounts { sub: 0, del: i, ins: 0 };
        for j in 1..=hl {
            if reference[i - 1] == hypothesis[j - 1] {
                cur[j] = prev[j - 1];
                continue;
            }
            let sub = EditCounts { sub: prev[j - 1].sub + 1, ..prev[j - 1] };
            let del = EditCounts { del: prev[j].del + 1, ..prev[j] };
            let ins = EditCounts { ins: cur[j - 1].ins + 1, ..cur[j - 1] };
            // Candidate order encodes the tie preference.
            let mut best = sub;
            if del.total() < best.total() {
                best = del;
            }
            if ins.total() < best.total() {
                best = ins;
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hl]
}

/// One scored utterance.
#[derive(Clone, Debug)]
pub struct ScoredPair {
    pub reference: String,
    pub hypothesis: String,
    pub counts: EditCounts,
    pub ref_len: usize,
    pub unit: Unit,
}

/// Normalize and score a single reference/hypothesis pair.
pub fn score_pair(reference: &str, hypothesis: &str, unit: Unit) -> ScoredPair {
    let (counts, ref_len) = match unit {
        Unit::Char => {
            let r = normalize_chars(reference);
            let h = normalize_chars(hypothesis);
            (edit_distance(&r, &h), r.len())
        }
        Unit::Word => {
            let r = normalize_words(reference);
            let h = normalize_words(hypothesis);
            (edit_distance(&r, &h), r.len())
        }
    };
    ScoredPair {
        reference: reference.to_string(),
        hypothesis: hypothesis.to_string(),
        counts,
        ref_len,
        unit,
    }
}

/// Score a whole corpus of (reference, hypothesis) texts; pairs are
/// independent, so they are scored in parallel.
pub fn score_corpus(pairs: &[(String, String)], unit: Unit) -> Vec<ScoredPair> {
    par::map_slice(pairs, |(r, h)| score_pair(r, h, unit))
}

/// Corpus error rate: `100 · Σ(sub+del+ins) / Σ|ref|`.
pub fn error_rate(pairs: &[ScoredPair]) -> Result<f64> {
    let ref_total: usize = pairs.iter().map(|p| p.ref_len).sum();
    if ref_total == 0 {
        return Err(Error::Eval("total reference length is zero".into()));
    }
    let edits: usize = pairs.iter().map(|p| p.counts.total()).sum();
    Ok(100.0 * edits as f64 / ref_total as f64)
}

/// Arithmetic mean of per-set rates (full precision; round at display).
pub fn average_n(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::Eval("average of empty rate list".into()));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Relative error-rate reduction `100 · (baseline - ours) / baseline`.
pub fn cerr(baseline: f64, ours: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::Eval(format!(
            "relative reduction undefined for baseline {baseline}"
        )));
    }
    Ok(100.0 * (baseline - ours) / baseline)
}

/// Round half-up at `decimals` places, returning the scaled integer.
///
/// Values within 1e-9 of a true half (in scaled units) count as halves, so
/// quantities like 3.045 that have no exact binary representation still round
/// up the way their decimal spelling demands.
fn round_scaled(x: f64, decimals: u32) -> i64 {
    let scale = 10f64.powi(decimals as i32);
    let y = x * scale;
    let floor = y.floor();
    let frac = y - floor;
    let up = frac > 0.5 || (frac - 0.5).abs() < 1e-9;
    floor as i64 + i64::from(up)
}

/// Half-up display rounding as a number (e.g. for further comparison).
pub fn round_display(x: f64, decimals: u32) -> f64 {
    round_scaled(x, decimals) as f64 / 10f64.powi(decimals as i32)
}

/// Half-up display rounding as a string with exactly `decimals` places.
pub fn format_rate(x: f64, decimals: u32) -> String {
    let scaled = round_scaled(x, decimals);
    if decimals == 0 {
        return scaled.to_string();
    }
    let base = 10i64.pow(decimals);
    let sign = if scaled < 0 { "-" } else { "" };
    let mag = scaled.abs();
    format!(
        "{sign}{}.{:0width$}",
        mag / base,
        mag % base,
        width = decimals as usize
    )
}

/// A benchmark table: named test sets with their error rates.
#[derive(Clone, Debug, Default)]
pub struct BenchmarkTable {
    pub rows: Vec<(String, f64)>,
}

impl BenchmarkTable {
    pub fn push(&mut self, name: impl Into<String>, rate: f64) {
        self.rows.push((name.into(), rate));
    }

    pub fn average(&self) -> Result<f64> {
        let rates: Vec<f64> = self.rows.iter().map(|(_, r)| *r).collect();
        average_n(&rates)
    }

    /// Human-readable table with the display-rounded average row appended.
    pub fn render_text(&self) -> Result<String> {
        let width = self
            .rows
            .iter()
            .map(|(n, _)| n.chars().count())
            .chain([9])
            .max()
            .unwrap();
        let mut out = String::new();
        for (name, rate) in &self.rows {
            let pad = width - name.chars().count();
            out.push_str(&format!("{name}{:pad$}  {}\n", "", format_rate(*rate, 2)));
        }
        let label = format!("Average-{}", self.rows.len());
        let pad = width.saturating_sub(label.chars().count());
        out.push_str(&format!(
            "{label}{:pad$}  {}\n",
            "",
            format_rate(self.average()?, 2)
        ));
        Ok(out)
    }

    /// Machine-readable form: raw rates plus display strings.
    pub fn render_json(&self) -> Result<serde_json::Value> {
        let avg = self.average()?;
        Ok(serde_json::json!({
            "normalization": NORMALIZATION_VERSION,
            "sets": self.rows.iter().map(|(name, rate)| serde_json::json!({
                "name": name,
                "rate": rate,
                "display": format_rate(*rate, 2),
            })).collect::<Vec<_>>(),
            "average": avg,
            "average_display": format_rate(avg, 2),
        }))
    }
}

/// Read a transcription file: one `utt_id<TAB>text` per line, UTF-8.
/// Blank lines are skipped; a duplicate id or a line without a tab is an
/// error naming the line number.
pub fn read_trn(path: &Path) -> Result<BTreeMap<String, String>> {
    let content = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(Error::Eval(format!(
                "{}:{}: expected utt_id<TAB>text",
                path.display(),
                lineno + 1
            )));
        };
        if out.insert(id.to_string(), text.to_string()).is_some() {
            return Err(Error::Eval(format!(
                "{}:{}: duplicate utterance id {id}",
                path.display(),
                lineno + 1
            )));
        }
    }
    Ok(out)
}

/// Pair up reference and hypothesis maps by utterance id. The id sets must
/// match exactly; a mismatch names the first offending id.
pub fn align_by_id(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
) -> Result<Vec<(String, String)>> {
    for id in refs.keys() {
        if !hyps.contains_key(id) {
            return Err(Error::Eval(format!("no hypothesis for utterance {id}")));
        }
    }
    for id in hyps.keys() {
        if !refs.contains_key(id) {
            return Err(Error::Eval(format!("hypothesis for unknown utterance {id}")));
        }
    }
    Ok(refs
        .iter()
        .map(|(id, r)| (r.clone(), hyps[id].clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rate_of(reference: &str, hypothesis: &str, unit: Unit) -> f64 {
        error_rate(&[score_pair(reference, hypothesis, unit)]).unwrap()
    }

    #[test]
    fn identical_sequences_have_zero_distance() {
        let r: Vec<char> = "abcd".chars().collect();
        assert_eq!(edit_distance(&r, &r), EditCounts::default());
    }

    #[test]
    fn single_substitution() {
        let r: Vec<char> = "abcd".chars().collect();
        let h: Vec<char> = "abxd".chars().collect();
        assert_eq!(edit_distance(&r, &h), EditCounts { sub: 1, del: 0, ins: 0 });
    }

    #[test]
    fn single_deletion_cer_example() {
        let rate = rate_of("今天天气好", "今天气好", Unit::Char);
        assert_eq!(format_rate(rate, 2), "20.00");
        let pair = score_pair("今天天气好", "今天气好", Unit::Char);
        assert_eq!(pair.counts, EditCounts { sub: 0, del: 1, ins: 0 });
        assert_eq!(pair.ref_len, 5);
    }

    #[test]
    fn identical_corpus_scores_zero() {
        let pairs = score_corpus(
            &[
                ("今天天气好".into(), "今天天气好".into()),
                ("你好 世界".into(), "你好，世界".into()),
            ],
            Unit::Char,
        );
        assert_eq!(format_rate(error_rate(&pairs).unwrap(), 2), "0.00");
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let rate = rate_of("今天天气好", "", Unit::Char);
        assert_eq!(format_rate(rate, 2), "100.00");
    }

    #[test]
    fn empty_reference_corpus_is_an_error() {
        assert!(error_rate(&[score_pair("", "abc", Unit::Char)]).is_err());
    }

    #[test]
    fn tie_preference_counts_substitutions_first() {
        // "ab" vs "ba": one optimal alignment uses 2 substitutions, another
        // uses delete+insert; both cost 2, and the tie rule picks subs.
        let r: Vec<char> = "ab".chars().collect();
        let h: Vec<char> = "ba".chars().collect();
        assert_eq!(edit_distance(&r, &h), EditCounts { sub: 2, del: 0, ins: 0 });
    }

    #[test]
    fn averages_match_published_rows() {
        // Four-set means from the comparison table; 3.045 must display as
        // 3.05 despite its inexact binary representation.
        let llm = average_n(&[0.76, 2.15, 4.60, 4.67]).unwrap();
        assert_eq!(format_rate(llm, 2), "3.05");
        let aed = average_n(&[0.55, 2.52, 4.88, 4.76]).unwrap();
        assert_eq!(format_rate(aed, 2), "3.18");
        let single = average_n(&[4.67]).unwrap();
        assert_eq!(format_rate(single, 2), "4.67");
    }

    #[test]
    fn relative_reduction_matches_published_claims() {
        let cases = [
            (3.33, 3.05, "8.4"),
            (4.56, 3.48, "23.7"),
            (5.80, 3.48, "40.0"),
            (14.16, 7.05, "50.2"),
            (3.29, 3.05, "7.3"),
            (3.79, 3.56, "6.1"),
            (2.98, 2.86, "4.0"),
        ];
        for (baseline, ours, want) in cases {
            let got = format_rate(cerr(baseline, ours).unwrap(), 1);
            assert_eq!(got, want, "cerr({baseline}, {ours})");
        }
        assert_eq!(format_rate(cerr(5.0, 5.0).unwrap(), 1), "0.0");
        assert!(cerr(0.0, 1.0).is_err());
    }

    #[test]
    fn word_mode_lowercases_and_splits() {
        let rate = rate_of("Hello World", "hello  world", Unit::Word);
        assert_eq!(format_rate(rate, 2), "0.00");
        let pair = score_pair("the cat sat", "the hat sat down", Unit::Word);
        assert_eq!(pair.counts, EditCounts { sub: 1, del: 0, ins: 1 });
        assert_eq!(pair.ref_len, 3);
    }

    #[test]
    fn table_renders_with_average_row() {
        let mut t = BenchmarkTable::default();
        t.push("aishell1", 0.76);
        t.push("aishell2", 2.15);
        t.push("ws_net", 4.60);
        t.push("ws_meeting", 4.67);
        let text = t.render_text().unwrap();
        assert!(text.contains("Average-4"), "{text}");
        assert!(text.contains("3.05"), "{text}");
        let json = t.render_json().unwrap();
        assert_eq!(json["average_display"], "3.05");
        assert_eq!(json["sets"][0]["display"], "0.76");
    }

    #[test]
    fn rounding_is_half_up_at_display_only() {
        assert_eq!(format_rate(3.044, 2), "3.04");
        assert_eq!(format_rate(3.0449999, 2), "3.04");
        assert_eq!(format_rate(12.18 / 4.0, 2), "3.05");
        assert_eq!(format_rate(2.5, 0), "3");
        assert_eq!(format_rate(0.125, 2), "0.13");
        assert_eq!(round_display(12.18 / 4.0, 2), 3.05);
    }
}
