//! Rare/frequent concept pairs, prompt templates and the `BREAK`/`AND`
//! prompt-sequence grammar.
//!
//! A [`PromptPlan`] is the original prompt cut into literal text and one slot
//! per concept pair. Rendering a slot as "rare" reproduces the original span
//! verbatim; rendering it as "frequent" splices the frequent phrase in, with its
//! leading letter case adjusted to the span it replaces.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separates the frequent and rare phrase of one clause.
pub const BREAK_TOKEN: &str = "BREAK";
/// Separates clauses (and attribute contexts) of a multi-concept sequence.
pub const AND_TOKEN: &str = "AND";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConceptError {
    #[error("prompt sequence is empty")]
    EmptySequence,
    #[error("clause {clause} has no BREAK token")]
    MissingBreak { clause: usize },
    #[error("clause {clause} has more than one BREAK token")]
    ExtraBreak { clause: usize },
    #[error("clause {clause} is empty")]
    EmptyClause { clause: usize },
    #[error("sequence has {clauses} clauses but context has {contexts}")]
    CountMismatch { clauses: usize, contexts: usize },
    #[error("pair {index}: rare and frequent phrases are identical")]
    DegeneratePair { index: usize },
    #[error("pair {index}: {which} phrase is empty")]
    EmptyPhrase { index: usize, which: &'static str },
    #[error("pair {index}: phrase contains reserved token {token}")]
    ReservedToken { index: usize, token: &'static str },
    #[error("phrase {phrase:?} not found in prompt")]
    PhraseNotFound { phrase: String },
    #[error("phrase {phrase:?} occurs {occurrences} times in prompt")]
    AmbiguousPhrase { phrase: String, occurrences: usize },
    #[error("phrases of pairs {first} and {second} overlap in prompt")]
    OverlappingPhrases { first: usize, second: usize },
    #[error("slot {index} out of range 1..={m}")]
    SlotOutOfRange { index: usize, m: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

impl ConceptError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptySequence => "EmptySequence",
            Self::MissingBreak { .. } => "MissingBreak",
            Self::ExtraBreak { .. } => "ExtraBreak",
            Self::EmptyClause { .. } => "EmptyClause",
            Self::CountMismatch { .. } => "CountMismatch",
            Self::DegeneratePair { .. } => "DegeneratePair",
            Self::EmptyPhrase { .. } => "EmptyPhrase",
            Self::ReservedToken { .. } => "ReservedToken",
            Self::PhraseNotFound { .. } => "PhraseNotFound",
            Self::AmbiguousPhrase { .. } => "AmbiguousPhrase",
            Self::OverlappingPhrases { .. } => "OverlappingPhrases",
            Self::SlotOutOfRange { .. } => "SlotOutOfRange",
            Self::InvalidPlan(_) => "InvalidPlan",
        }
    }
}

/// One rare concept with its frequent surrogate and attribute context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptPair {
    index: usize,
    rare_phrase: String,
    frequent_phrase: String,
    attribute_text: String,
}

impl ConceptPair {
    pub fn new(
        index: usize,
        rare_phrase: &str,
        frequent_phrase: &str,
        attribute_text: &str,
    ) -> Result<Self, ConceptError> {
        let rare = normalize_ws(rare_phrase);
        let frequent = normalize_ws(frequent_phrase);
        if index == 0 {
            return Err(ConceptError::InvalidPlan("pair index is 1-based".into()));
        }
        if rare.is_empty() {
            return Err(ConceptError::EmptyPhrase { index, which: "rare" });
        }
        if frequent.is_empty() {
            return Err(ConceptError::EmptyPhrase {
                index,
                which: "frequent",
            });
        }
        for phrase in [&rare, &frequent] {
            for token in phrase.split(' ') {
                if token == BREAK_TOKEN {
                    return Err(ConceptError::ReservedToken {
                        index,
                        token: BREAK_TOKEN,
                    });
                }
                if token == AND_TOKEN {
                    return Err(ConceptError::ReservedToken {
                        index,
                        token: AND_TOKEN,
                    });
                }
            }
        }
        if rare.to_lowercase() == frequent.to_lowercase() {
            return Err(ConceptError::DegeneratePair { index });
        }
        Ok(Self {
            index,
            rare_phrase: rare,
            frequent_phrase: frequent,
            attribute_text: normalize_ws(attribute_text),
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn rare_phrase(&self) -> &str {
        &self.rare_phrase
    }

    pub fn frequent_phrase(&self) -> &str {
        &self.frequent_phrase
    }

    /// Empty when the pair carries no attribute context.
    pub fn attribute_text(&self) -> &str {
        &self.attribute_text
    }

    fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    /// `span` is the exact text of the original prompt covered by the slot.
    Slot { index: usize, span: String },
}

/// Original prompt, its slot template and the concept pairs bound to slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ConceptMap", into = "ConceptMap")]
pub struct PromptPlan {
    original_prompt: String,
    segments: Vec<Segment>,
    pairs: Vec<ConceptPair>,
}

impl PromptPlan {
    fn from_parts(
        original_prompt: String,
        segments: Vec<Segment>,
        pairs: Vec<ConceptPair>,
    ) -> Result<Self, ConceptError> {
        let m = pairs.len();
        for (i, pair) in pairs.iter().enumerate() {
            if pair.index != i + 1 {
                return Err(ConceptError::InvalidPlan(format!(
                    "pair at position {} has index {}",
                    i + 1,
                    pair.index
                )));
            }
        }
        let mut seen = vec![false; m];
        for seg in &segments {
            if let Segment::Slot { index, .. } = seg {
                if *index == 0 || *index > m {
                    return Err(ConceptError::SlotOutOfRange { index: *index, m });
                }
                if std::mem::replace(&mut seen[index - 1], true) {
                    return Err(ConceptError::InvalidPlan(format!(
                        "slot {index} appears twice"
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ConceptError::InvalidPlan(format!(
                "pair {} has no slot",
                missing + 1
            )));
        }
        Ok(Self {
            original_prompt,
            segments,
            pairs,
        })
    }

    /// A plan with no concept pairs: every rendering is the prompt itself.
    pub fn common(original_prompt: &str) -> Self {
        let segments = if original_prompt.is_empty() {
            Vec::new()
        } else {
            vec![Segment::Literal(original_prompt.to_string())]
        };
        Self {
            original_prompt: original_prompt.to_string(),
            segments,
            pairs: Vec::new(),
        }
    }

    pub fn original_prompt(&self) -> &str {
        &self.original_prompt
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn pairs(&self) -> &[ConceptPair] {
        &self.pairs
    }

    /// Number of concept pairs.
    pub fn m(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, index: usize) -> Option<&ConceptPair> {
        index.checked_sub(1).and_then(|i| self.pairs.get(i))
    }

    /// Renders the template with slots in `rare_selection` as rare and all
    /// others as frequent.
    pub fn reconstruct(&self, rare_selection: &BTreeSet<usize>) -> Result<String, ConceptError> {
        let m = self.m();
        if let Some(&bad) = rare_selection.iter().find(|&&i| i == 0 || i > m) {
            return Err(ConceptError::SlotOutOfRange { index: bad, m });
        }
        Ok(self.render(|i| rare_selection.contains(&i)))
    }

    /// All slots rare.
    pub fn target(&self) -> String {
        self.render(|_| true)
    }

    /// All slots frequent.
    pub fn frequent(&self) -> String {
        self.render(|_| false)
    }

    /// Slots `1..=count` rare, the rest frequent.
    pub fn progressive(&self, count: usize) -> String {
        self.render(|i| i <= count)
    }

    /// Byte range of each slot inside the rendered text, keyed by slot index.
    pub fn render_with_spans(
        &self,
        rare_selection: &BTreeSet<usize>,
    ) -> (String, Vec<(usize, std::ops::Range<usize>)>) {
        let mut out = String::new();
        let mut spans = Vec::with_capacity(self.m());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot { index, span } => {
                    let start = out.len();
                    self.push_slot(&mut out, *index, span, rare_selection.contains(index));
                    spans.push((*index, start..out.len()));
                }
            }
        }
        (out, spans)
    }

    fn render(&self, is_rare: impl Fn(usize) -> bool) -> String {
        let mut out = String::with_capacity(self.original_prompt.len() + 16);
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot { index, span } => {
                    self.push_slot(&mut out, *index, span, is_rare(*index))
                }
            }
        }
        out
    }

    fn push_slot(&self, out: &mut String, index: usize, span: &str, rare: bool) {
        if rare {
            out.push_str(span);
        } else {
            let phrase = &self.pairs[index - 1].frequent_phrase;
            out.push_str(&match_leading_case(phrase, span));
        }
    }

    pub fn to_concept_map(&self) -> ConceptMap {
        ConceptMap {
            original_prompt: self.original_prompt.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|p| ConceptMapPair {
                    index: p.index,
                    rare: p.rare_phrase.clone(),
                    frequent: p.frequent_phrase.clone(),
                    attribute: p.attribute_text.clone(),
                })
                .collect(),
        }
    }

    /// Template string with `[slotN]` markers, for diagnostics.
    pub fn template(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot { index, .. } => {
                    out.push_str(&format!("[slot{index}]"));
                }
            }
        }
        out
    }
}

impl fmt::Display for PromptPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.template())
    }
}

/// On-disk concept-map document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptMap {
    pub original_prompt: String,
    pub pairs: Vec<ConceptMapPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptMapPair {
    pub index: usize,
    pub rare: String,
    pub frequent: String,
    #[serde(default)]
    pub attribute: String,
}

impl TryFrom<ConceptMap> for PromptPlan {
    type Error = ConceptError;

    fn try_from(map: ConceptMap) -> Result<Self, Self::Error> {
        let mut entries = map.pairs;
        entries.sort_by_key(|p| p.index);
        let pairs = entries
            .iter()
            .map(|p| ConceptPair::new(p.index, &p.rare, &p.frequent, &p.attribute))
            .collect::<Result<Vec<_>, _>>()?;
        bind_template_or_whole(&map.original_prompt, pairs)
    }
}

impl From<PromptPlan> for ConceptMap {
    fn from(plan: PromptPlan) -> Self {
        plan.to_concept_map()
    }
}

/// Parses `F1 BREAK R1 [AND F2 BREAK R2 ...]` with contexts `C1 [AND C2 ...]`.
///
/// The returned plan is unbound: its template is the rare phrases joined by
/// `" and "`. Use [`bind_template`] to attach the pairs to a real prompt.
pub fn parse_prompt_sequence(
    sequence_text: &str,
    context_text: &str,
) -> Result<PromptPlan, ConceptError> {
    let tokens: Vec<&str> = sequence_text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(ConceptError::EmptySequence);
    }
    let clauses: Vec<&[&str]> = tokens.split(|t| *t == AND_TOKEN).collect();

    let context_tokens: Vec<&str> = context_text.split_whitespace().collect();
    let contexts: Vec<String> = if context_tokens.is_empty() {
        vec![String::new(); clauses.len()]
    } else {
        context_tokens
            .split(|t| *t == AND_TOKEN)
            .map(|c| c.join(" "))
            .collect()
    };
    if contexts.len() != clauses.len() {
        return Err(ConceptError::CountMismatch {
            clauses: clauses.len(),
            contexts: contexts.len(),
        });
    }

    let mut pairs = Vec::with_capacity(clauses.len());
    for (i, (clause, context)) in clauses.iter().zip(&contexts).enumerate() {
        let index = i + 1;
        if clause.is_empty() {
            return Err(ConceptError::EmptyClause { clause: index });
        }
        let parts: Vec<&[&str]> = clause.split(|t| *t == BREAK_TOKEN).collect();
        match parts.len() {
            1 => return Err(ConceptError::MissingBreak { clause: index }),
            2 => {}
            _ => return Err(ConceptError::ExtraBreak { clause: index }),
        }
        if parts[0].is_empty() || parts[1].is_empty() {
            return Err(ConceptError::EmptyClause { clause: index });
        }
        pairs.push(ConceptPair::new(
            index,
            &parts[1].join(" "),
            &parts[0].join(" "),
            context,
        )?);
    }

    let mut segments = Vec::with_capacity(pairs.len() * 2);
    for pair in &pairs {
        if pair.index > 1 {
            segments.push(Segment::Literal(" and ".into()));
        }
        segments.push(Segment::Slot {
            index: pair.index,
            span: pair.rare_phrase.clone(),
        });
    }
    let original = segments
        .iter()
        .map(|s| match s {
            Segment::Literal(t) | Segment::Slot { span: t, .. } => t.as_str(),
        })
        .collect::<String>();
    PromptPlan::from_parts(original, segments, pairs)
}

/// Locates each pair's rare phrase inside `original_prompt` and cuts the
/// prompt into literal text and slots.
///
/// Matching folds case and collapses whitespace, and only accepts matches
/// on word boundaries.
pub fn bind_template(
    original_prompt: &str,
    pairs: Vec<ConceptPair>,
) -> Result<PromptPlan, ConceptError> {
    let pairs: Vec<ConceptPair> = pairs
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.with_index(i + 1))
        .collect();
    if pairs.is_empty() {
        return Ok(PromptPlan::common(original_prompt));
    }
    let folded = Folded::new(original_prompt);
    let mut ranges: Vec<(std::ops::Range<usize>, usize)> = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let needle = Folded::new(&pair.rare_phrase).chars;
        let hits = folded.find_all(&needle);
        match hits.len() {
            0 => {
                return Err(ConceptError::PhraseNotFound {
                    phrase: pair.rare_phrase.clone(),
                })
            }
            1 => ranges.push((hits[0].clone(), pair.index)),
            n => {
                return Err(ConceptError::AmbiguousPhrase {
                    phrase: pair.rare_phrase.clone(),
                    occurrences: n,
                })
            }
        }
    }
    ranges.sort_by_key(|(r, _)| r.start);
    for w in ranges.windows(2) {
        if w[1].0.start < w[0].0.end {
            let (a, b) = (w[0].1.min(w[1].1), w[0].1.max(w[1].1));
            return Err(ConceptError::OverlappingPhrases {
                first: a,
                second: b,
            });
        }
    }

    let mut segments = Vec::with_capacity(ranges.len() * 2 + 1);
    let mut cursor = 0;
    for (range, index) in ranges {
        if range.start > cursor {
            segments.push(Segment::Literal(original_prompt[cursor..range.start].into()));
        }
        segments.push(Segment::Slot {
            index,
            span: original_prompt[range.clone()].into(),
        });
        cursor = range.end;
    }
    if cursor < original_prompt.len() {
        segments.push(Segment::Literal(original_prompt[cursor..].into()));
    }
    PromptPlan::from_parts(original_prompt.to_string(), segments, pairs)
}

/// [`bind_template`], except that a single pair whose phrase cannot be
/// located takes the whole prompt as its slot.
pub fn bind_template_or_whole(
    original_prompt: &str,
    pairs: Vec<ConceptPair>,
) -> Result<PromptPlan, ConceptError> {
    let single = pairs.len() == 1;
    match bind_template(original_prompt, pairs.clone()) {
        Err(ConceptError::PhraseNotFound { .. }) if single && !original_prompt.trim().is_empty() => {
            let pair = pairs.into_iter().next().expect("one pair").with_index(1);
            PromptPlan::from_parts(
                original_prompt.to_string(),
                vec![Segment::Slot {
                    index: 1,
                    span: original_prompt.to_string(),
                }],
                vec![pair],
            )
        }
        other => other,
    }
}

/// Renders the plan back into sequence/context grammar.
pub fn render_prompt_sequence(plan: &PromptPlan) -> (String, String) {
    let sequence = plan
        .pairs
        .iter()
        .map(|p| format!("{} {BREAK_TOKEN} {}", p.frequent_phrase, p.rare_phrase))
        .collect::<Vec<_>>()
        .join(&format!(" {AND_TOKEN} "));
    let context = if plan.pairs.iter().all(|p| p.attribute_text.is_empty()) {
        String::new()
    } else {
        plan.pairs
            .iter()
            .map(|p| p.attribute_text.as_str())
            .collect::<Vec<_>>()
            .join(&format!(" {AND_TOKEN} "))
    };
    (sequence, context)
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn match_leading_case(phrase: &str, span: &str) -> String {
    let (Some(p0), Some(s0)) = (phrase.chars().next(), span.chars().next()) else {
        return phrase.to_string();
    };
    if !p0.is_alphabetic() || !s0.is_alphabetic() {
        return phrase.to_string();
    }
    let rest = &phrase[p0.len_utf8()..];
    if s0.is_lowercase() && p0.is_uppercase() {
        p0.to_lowercase().chain(rest.chars()).collect()
    } else if s0.is_uppercase() && p0.is_lowercase() {
        p0.to_uppercase().chain(rest.chars()).collect()
    } else {
        phrase.to_string()
    }
}

/// Case-folded, whitespace-collapsed view of a string with a map back to
/// byte offsets of the source.
struct Folded {
    chars: Vec<char>,
    starts: Vec<usize>,
    ends: Vec<usize>,
}

impl Folded {
    fn new(s: &str) -> Self {
        let mut out = Self {
            chars: Vec::with_capacity(s.len()),
            starts: Vec::with_capacity(s.len()),
            ends: Vec::with_capacity(s.len()),
        };
        let mut pending_ws: Option<(usize, usize)> = None;
        for (i, c) in s.char_indices() {
            let end = i + c.len_utf8();
            if c.is_whitespace() {
                if !out.chars.is_empty() {
                    pending_ws = Some(match pending_ws {
                        Some((st, _)) => (st, end),
                        None => (i, end),
                    });
                }
                continue;
            }
            if let Some((st, en)) = pending_ws.take() {
                out.chars.push(' ');
                out.starts.push(st);
                out.ends.push(en);
            }
            for lc in c.to_lowercase() {
                out.chars.push(lc);
                out.starts.push(i);
                out.ends.push(end);
            }
        }
        out
    }

    fn find_all(&self, needle: &[char]) -> Vec<std::ops::Range<usize>> {
        let n = needle.len();
        if n == 0 || n > self.chars.len() {
            return Vec::new();
        }
        let is_word = |c: char| c.is_alphanumeric();
        (0..=self.chars.len() - n)
            .filter(|&i| self.chars[i..i + n] == *needle)
            .filter(|&i| i == 0 || !is_word(self.chars[i - 1]) || !is_word(needle[0]))
            .filter(|&i| {
                i + n == self.chars.len() || !is_word(self.chars[i + n]) || !is_word(needle[n - 1])
            })
            // a folded char may come from a multi-char lowercase expansion;
            // only accept matches aligned to source character boundaries
            .filter(|&i| i == 0 || self.starts[i] != self.starts[i - 1])
            .filter(|&i| i + n == self.chars.len() || self.starts[i + n] != self.starts[i + n - 1])
            .map(|i| self.starts[i]..self.ends[i + n - 1])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sel(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    fn two_pair_plan() -> PromptPlan {
        let seq = parse_prompt_sequence(
            "A horned animal BREAK A horned lion AND A hairy animal BREAK A hairy frog",
            "horned AND a hairy",
        )
        .unwrap();
        bind_template("A horned lion and a hairy frog", seq.pairs().to_vec()).unwrap()
    }

    #[test]
    fn parses_single_clause_fixture() {
        let plan = parse_prompt_sequence(
            "A pink sphere made of glass BREAK A peach made of glass",
            "made of glass",
        )
        .unwrap();
        assert_eq!(plan.m(), 1);
        let p = &plan.pairs()[0];
        assert_eq!(p.frequent_phrase(), "A pink sphere made of glass");
        assert_eq!(p.rare_phrase(), "A peach made of glass");
        assert_eq!(p.attribute_text(), "made of glass");
    }

    #[test]
    fn parses_two_clause_fixture() {
        let plan = parse_prompt_sequence(
            "A horned animal BREAK A horned lion AND A hairy animal BREAK A hairy frog",
            "horned AND a hairy",
        )
        .unwrap();
        assert_eq!(plan.m(), 2);
        let p = plan.pair(2).unwrap();
        assert_eq!(p.frequent_phrase(), "A hairy animal");
        assert_eq!(p.rare_phrase(), "A hairy frog");
        assert_eq!(p.attribute_text(), "a hairy");
        assert_eq!(plan.pair(1).unwrap().attribute_text(), "horned");
    }

    #[test]
    fn rejects_degenerate_pair() {
        assert_eq!(
            parse_prompt_sequence("X BREAK X", ""),
            Err(ConceptError::DegeneratePair { index: 1 })
        );
        assert_eq!(
            parse_prompt_sequence("a Cat BREAK A cat", ""),
            Err(ConceptError::DegeneratePair { index: 1 })
        );
    }

    #[test]
    fn grammar_errors() {
        assert_eq!(
            parse_prompt_sequence("A cat", ""),
            Err(ConceptError::MissingBreak { clause: 1 })
        );
        assert_eq!(
            parse_prompt_sequence("A BREAK B BREAK C", ""),
            Err(ConceptError::ExtraBreak { clause: 1 })
        );
        assert_eq!(
            parse_prompt_sequence("A BREAK B AND", ""),
            Err(ConceptError::EmptyClause { clause: 2 })
        );
        assert_eq!(
            parse_prompt_sequence("BREAK B", ""),
            Err(ConceptError::EmptyClause { clause: 1 })
        );
        assert_eq!(
            parse_prompt_sequence("A BREAK B AND C BREAK D", "x"),
            Err(ConceptError::CountMismatch {
                clauses: 2,
                contexts: 1
            })
        );
        assert_eq!(parse_prompt_sequence("  \n ", ""), Err(ConceptError::EmptySequence));
    }

    #[test]
    fn lowercase_break_is_plain_text() {
        let plan = parse_prompt_sequence("a break b BREAK c", "").unwrap();
        assert_eq!(plan.pairs()[0].frequent_phrase(), "a break b");
    }

    #[test]
    fn binds_two_slots() {
        let plan = two_pair_plan();
        assert_eq!(plan.template(), "[slot1] and [slot2]");
    }

    #[test]
    fn binds_whole_prompt_slot() {
        let pair = ConceptPair::new(1, "A hairy frog", "A hairy animal", "").unwrap();
        let plan = bind_template("A hairy frog", vec![pair]).unwrap();
        assert_eq!(plan.template(), "[slot1]");
    }

    #[test]
    fn bind_errors() {
        let pair = ConceptPair::new(1, "A hairy frog", "A hairy animal", "").unwrap();
        assert_eq!(
            bind_template("A frog", vec![pair.clone()]),
            Err(ConceptError::PhraseNotFound {
                phrase: "A hairy frog".into()
            })
        );
        assert_eq!(
            bind_template("a hairy frog meets a hairy frog", vec![pair]),
            Err(ConceptError::AmbiguousPhrase {
                phrase: "A hairy frog".into(),
                occurrences: 2
            })
        );
        let p1 = ConceptPair::new(1, "hairy frog", "hairy animal", "").unwrap();
        let p2 = ConceptPair::new(2, "frog on a", "cat on a", "").unwrap();
        assert_eq!(
            bind_template("a hairy frog on a log", vec![p1, p2]),
            Err(ConceptError::OverlappingPhrases {
                first: 1,
                second: 2
            })
        );
    }

    #[test]
    fn bind_respects_word_boundaries() {
        let pair = ConceptPair::new(1, "a cat", "a dog", "").unwrap();
        assert!(matches!(
            bind_template("a caterpillar", vec![pair.clone()]),
            Err(ConceptError::PhraseNotFound { .. })
        ));
        assert!(bind_template("look, a cat!", vec![pair]).is_ok());
    }

    #[test]
    fn bind_normalizes_whitespace_and_case() {
        let pair = ConceptPair::new(1, "A Hairy  Frog", "a hairy animal", "").unwrap();
        let plan = bind_template("Look at  a hairy\tfrog here", vec![pair]).unwrap();
        assert_eq!(plan.template(), "Look at  [slot1] here");
        assert_eq!(plan.target(), "Look at  a hairy\tfrog here");
        assert_eq!(plan.frequent(), "Look at  a hairy animal here");
    }

    #[test]
    fn whole_prompt_fallback_for_single_pair() {
        let pair = ConceptPair::new(1, "A clown made of steel", "A metallic humanoid figure", "made of steel")
            .unwrap();
        let plan = bind_template_or_whole("a steel clown", vec![pair.clone()]).unwrap();
        assert_eq!(plan.template(), "[slot1]");
        assert_eq!(plan.target(), "a steel clown");
        assert_eq!(plan.frequent(), "a metallic humanoid figure");

        let other = ConceptPair::new(2, "x y", "z w", "").unwrap();
        assert!(bind_template_or_whole("a steel clown", vec![pair, other]).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let plan = two_pair_plan();
        assert_eq!(
            plan.reconstruct(&sel(&[1, 2])).unwrap(),
            "A horned lion and a hairy frog"
        );
        assert_eq!(
            plan.reconstruct(&sel(&[])).unwrap(),
            "A horned animal and a hairy animal"
        );
        assert_eq!(
            plan.reconstruct(&sel(&[1])).unwrap(),
            "A horned lion and a hairy animal"
        );
        assert_eq!(
            plan.reconstruct(&sel(&[3])),
            Err(ConceptError::SlotOutOfRange { index: 3, m: 2 })
        );
    }

    #[test]
    fn common_plan_renders_prompt() {
        let plan = bind_template("A cat on a mat", vec![]).unwrap();
        assert_eq!(plan.m(), 0);
        assert_eq!(plan.target(), "A cat on a mat");
        assert_eq!(plan.frequent(), "A cat on a mat");
    }

    #[test]
    fn concept_map_json_round_trip() {
        let plan = two_pair_plan();
        let json = serde_json::to_string(&plan).unwrap();
        let back: PromptPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["pairs"][1]["rare"], "A hairy frog");
        assert_eq!(value["pairs"][1]["attribute"], "a hairy");
    }

    #[test]
    fn render_sequence_round_trip() {
        let plan = two_pair_plan();
        let (seq, ctx) = render_prompt_sequence(&plan);
        assert_eq!(
            seq,
            "A horned animal BREAK A horned lion AND A hairy animal BREAK A hairy frog"
        );
        assert_eq!(ctx, "horned AND a hairy");
        let reparsed = parse_prompt_sequence(&seq, &ctx).unwrap();
        assert_eq!(reparsed.pairs(), plan.pairs());
    }

    #[test]
    fn reserved_tokens_rejected_in_pairs() {
        assert_eq!(
            ConceptPair::new(1, "cats AND dogs", "pets", ""),
            Err(ConceptError::ReservedToken {
                index: 1,
                token: "AND"
            })
        );
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-z]{2,6}"
    }

    proptest! {
        #[test]
        fn selections_differ_exactly_on_difference(
            words in prop::collection::vec(word(), 3),
            a in prop::collection::btree_set(1usize..=3, 0..=3),
            extra in prop::collection::btree_set(1usize..=3, 0..=3),
        ) {
            let pairs = words
                .iter()
                .enumerate()
                .map(|(i, w)| ConceptPair::new(i + 1, &format!("rare{i}{w}"), &format!("freq{i}{w}"), "").unwrap())
                .collect::<Vec<_>>();
            let prompt = format!("rare0{} with rare1{} near rare2{}", words[0], words[1], words[2]);
            let plan = bind_template(&prompt, pairs).unwrap();
            prop_assert_eq!(plan.target(), prompt);

            let b: BTreeSet<usize> = a.union(&extra).copied().collect();
            let (_, spans_a) = plan.render_with_spans(&a);
            let (text_a, _) = plan.render_with_spans(&a);
            let (text_b, spans_b) = plan.render_with_spans(&b);
            for ((ia, ra), (_, rb)) in spans_a.iter().zip(&spans_b) {
                let differs = text_a[ra.clone()] != text_b[rb.clone()];
                prop_assert_eq!(differs, b.contains(ia) && !a.contains(ia));
            }
            prop_assert_eq!(plan.reconstruct(&a).unwrap(), plan.reconstruct(&a).unwrap());
        }
    }
}
