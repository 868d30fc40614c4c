//! Corpus statistics over generated captions: character, word, and
//! sentence counts, approximate part-of-speech fractions, OCR coverage,
//! and optional engine-driven category classification.
//!
//! Counting rules are deterministic and documented rather than
//! linguistically perfect: sentences are terminator groups with a
//! decimal guard, and the built-in tagger is a lexicon-plus-suffix
//! heuristic. Published corpus figures derived from other tokenizers
//! are context for sanity checks, not targets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioner::{CaptionRecord, EngineClient};
use crate::experts::AnnotationBundle;

/// Closed category list used for classification; replies are matched
/// against these by case-insensitive containment.
pub const CATEGORIES: [&str; 6] = [
    "photo",
    "visual art",
    "commercial design",
    "infographic",
    "poster",
    "powerpoint",
];

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("cannot aggregate an empty record stream")]
    EmptyInput,
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("engine request failed: {detail}")]
    Engine { detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Adj,
    Adv,
    Verb,
    Num,
    /// Function words, punctuation-only tokens, and anything else that
    /// counts toward no category.
    Other,
}

/// Token-level coarse tagger. The corpus fractions divide tagged counts
/// by the full word count, so anything mapped to [`PosTag::Other`]
/// lowers every fraction.
pub trait PosTagger: Sync {
    fn tag(&self, token: &str) -> PosTag;
}

const CLOSED_WORDS: [&str; 48] = [
    "a", "an", "the", "and", "or", "but", "nor", "so", "yet", "of", "in", "on", "at", "to",
    "from", "by", "with", "for", "as", "into", "onto", "over", "under", "above", "below",
    "between", "through", "is", "are", "was", "were", "be", "been", "being", "am", "it", "its",
    "this", "that", "these", "those", "there", "which", "who", "whose", "what", "while", "when",
];

const VERB_LEXICON: [&str; 24] = [
    "run", "runs", "ran", "walk", "walks", "sit", "sits", "sat", "stand", "stands", "stood",
    "hold", "holds", "held", "show", "shows", "depict", "depicts", "feature", "features",
    "contain", "contains", "appear", "appears",
];

const ADJ_SUFFIXES: [&str; 9] = [
    "ous", "ful", "ive", "able", "ible", "less", "ish", "ic", "al",
];

/// Deterministic approximate tagger: closed-word lexicon, numeral
/// detection, then suffix rules, defaulting alphabetic tokens to noun.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTagger;

fn strip_token(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

fn is_numeric_token(token: &str) -> bool {
    let mut digits = 0usize;
    for c in token.chars() {
        if c.is_ascii_digit() {
            digits += 1;
        } else if !matches!(c, '.' | ',' | '-' | '%' | '/') {
            return false;
        }
    }
    digits > 0
}

impl PosTagger for HeuristicTagger {
    fn tag(&self, token: &str) -> PosTag {
        let bare = strip_token(token);
        if bare.is_empty() {
            return PosTag::Other;
        }
        let lower = bare.to_lowercase();
        if CLOSED_WORDS.contains(&lower.as_str()) {
            return PosTag::Other;
        }
        if is_numeric_token(&lower) {
            return PosTag::Num;
        }
        if lower.len() > 2 && lower.ends_with("ly") {
            return PosTag::Adv;
        }
        if ADJ_SUFFIXES.iter().any(|s| lower.len() > s.len() + 1 && lower.ends_with(s)) {
            return PosTag::Adj;
        }
        if VERB_LEXICON.contains(&lower.as_str())
            || (lower.len() > 4 && (lower.ends_with("ing") || lower.ends_with("ed")))
        {
            return PosTag::Verb;
        }
        if lower.chars().all(|c| c.is_alphabetic()) {
            return PosTag::Noun;
        }
        PosTag::Other
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PosFractions {
    pub noun: f64,
    pub adj: f64,
    pub adv: f64,
    pub verb: f64,
    pub num: f64,
}

impl PosFractions {
    pub fn sum(&self) -> f64 {
        self.noun + self.adj + self.adv + self.verb + self.num
    }
}

/// Integer tag counts, the exact intermediate that corpus aggregation
/// sums before dividing once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TagCounts {
    pub noun: u64,
    pub adj: u64,
    pub adv: u64,
    pub verb: u64,
    pub num: u64,
}

impl TagCounts {
    fn add(&mut self, other: &TagCounts) {
        self.noun += other.noun;
        self.adj += other.adj;
        self.adv += other.adv;
        self.verb += other.verb;
        self.num += other.num;
    }

    fn fractions(&self, word_count: u64) -> PosFractions {
        if word_count == 0 {
            return PosFractions::default();
        }
        let d = word_count as f64;
        PosFractions {
            noun: self.noun as f64 / d,
            adj: self.adj as f64 / d,
            adv: self.adv as f64 / d,
            verb: self.verb as f64 / d,
            num: self.num as f64 / d,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub char_count: u64,
    pub word_count: u64,
    pub sentence_count: u64,
    pub pos_fractions: PosFractions,
}

/// Counts Unicode scalar values, whitespace-delimited words, and
/// sentence terminator groups. A terminator group is a maximal run of
/// `.`, `!`, `?` followed by whitespace or end of text; a `.` directly
/// between two digits is a decimal point, not a terminator. Character
/// counts include whitespace. Never fails; empty input is all zeros.
pub fn count_stats(caption: &str) -> CaptionStats {
    let chars: Vec<char> = caption.chars().collect();
    let char_count = chars.len() as u64;
    let word_count = caption.split_whitespace().count() as u64;

    let is_terminator = |i: usize| -> bool {
        match chars[i] {
            '!' | '?' => true,
            '.' => {
                let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
                let next_digit = i + 1 < chars.len() && chars[i + 1].is_ascii_digit();
                !(prev_digit && next_digit)
            }
            _ => false,
        }
    };

    let mut sentence_count = 0u64;
    let mut i = 0;
    while i < chars.len() {
        if !is_terminator(i) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && is_terminator(j) {
            j += 1;
        }
        if j >= chars.len() || chars[j].is_whitespace() {
            sentence_count += 1;
        }
        i = j;
    }

    CaptionStats {
        char_count,
        word_count,
        sentence_count,
        pos_fractions: PosFractions::default(),
    }
}

/// Raw tag counts for one caption under the given tagger.
pub fn pos_tag_counts(caption: &str, tagger: &dyn PosTagger) -> TagCounts {
    let mut counts = TagCounts::default();
    for token in caption.split_whitespace() {
        match tagger.tag(token) {
            PosTag::Noun => counts.noun += 1,
            PosTag::Adj => counts.adj += 1,
            PosTag::Adv => counts.adv += 1,
            PosTag::Verb => counts.verb += 1,
            PosTag::Num => counts.num += 1,
            PosTag::Other => {}
        }
    }
    counts
}

/// Per-caption fractions: tagged count over word count per category.
pub fn pos_fractions(caption: &str, tagger: &dyn PosTagger) -> PosFractions {
    let words = caption.split_whitespace().count() as u64;
    pos_tag_counts(caption, tagger).fractions(words)
}

/// Full per-caption stats including fractions.
pub fn caption_stats(caption: &str, tagger: &dyn PosTagger) -> CaptionStats {
    let mut stats = count_stats(caption);
    stats.pos_fractions = pos_tag_counts(caption, tagger).fractions(stats.word_count);
    stats
}

/// Maps an engine reply onto the closed category list by
/// case-insensitive containment, longest category first so that a
/// reply mentioning a multi-word category is not claimed by a shorter
/// one. No match yields "unknown".
pub fn match_category(reply: &str) -> String {
    let folded = reply.to_lowercase();
    let mut ranked: Vec<&str> = CATEGORIES.to_vec();
    ranked.sort_by_key(|c| std::cmp::Reverse(c.len()));
    for category in ranked {
        if folded.contains(category) {
            return category.to_string();
        }
    }
    "unknown".to_string()
}

fn classification_prompt() -> String {
    format!(
        "Classify the image into exactly one of the following categories: {}. \
         Reply with the category name only.",
        CATEGORIES.join(", ")
    )
}

/// Asks the engine to classify one image into the closed category
/// list. Transport and HTTP failures surface as errors after the
/// client's retry budget, exactly as in caption generation; a reply
/// matching no category is "unknown", not an error.
pub async fn classify_category(
    client: &EngineClient,
    image_uri: &str,
) -> Result<String, StatsError> {
    let prompt = classification_prompt();
    match client.complete_with_retries(&prompt, image_uri).await {
        Ok((reply, _, _)) => Ok(match_category(&reply)),
        Err((_, detail, attempts)) => Err(StatsError::Engine {
            detail: format!("{detail} after {attempts} attempts"),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub sample_count: usize,
    pub mean_char_count: f64,
    pub mean_word_count: f64,
    pub mean_sentence_count: f64,
    /// Corpus-level fractions: total tagged tokens over total words.
    pub pos_fractions: PosFractions,
    /// Fraction of captioned images whose annotation bundle has at
    /// least one OCR line.
    pub ocr_coverage: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_histogram: Option<BTreeMap<String, usize>>,
}

/// Aggregates per-caption counts into corpus means. Counting is
/// parallel per caption; the merge is integer summation, so the result
/// is identical for any thread count or record order.
pub fn aggregate(
    captions: &[CaptionRecord],
    bundles: &[AnnotationBundle],
    tagger: &(dyn PosTagger + Sync),
    categories: Option<&HashMap<String, String>>,
) -> Result<CorpusReport, StatsError> {
    if captions.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let per_caption: Vec<(CaptionStats, TagCounts)> = captions
        .par_iter()
        .map(|r| (count_stats(&r.caption), pos_tag_counts(&r.caption, tagger)))
        .collect();

    let mut chars = 0u64;
    let mut words = 0u64;
    let mut sentences = 0u64;
    let mut tags = TagCounts::default();
    for (stats, counts) in &per_caption {
        chars += stats.char_count;
        words += stats.word_count;
        sentences += stats.sentence_count;
        tags.add(counts);
    }

    let sample_count = captions.len();
    let captioned: HashSet<&str> = captions.iter().map(|r| r.image_id.as_str()).collect();
    let with_ocr = bundles
        .iter()
        .filter(|b| captioned.contains(b.image_id.as_str()) && !b.ocr.is_empty())
        .count();

    let category_histogram = categories.map(|map| {
        let mut hist = BTreeMap::new();
        for record in captions {
            let label = map
                .get(&record.image_id)
                .cloned()
                .unwrap_or_else(|| "unknown".to_string());
            *hist.entry(label).or_insert(0) += 1;
        }
        hist
    });

    let n = sample_count as f64;
    Ok(CorpusReport {
        sample_count,
        mean_char_count: chars as f64 / n,
        mean_word_count: words as f64 / n,
        mean_sentence_count: sentences as f64 / n,
        pos_fractions: tags.fractions(words),
        ocr_coverage: with_ocr as f64 / n,
        category_histogram,
    })
}

/// Writes the report as one pretty-printed JSON document.
pub fn write_report(report: &CorpusReport, path: &Path) -> Result<(), StatsError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|source| StatsError::Io {
        path: path.display().to_string(),
        source,
    })
}
