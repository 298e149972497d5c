//! Sentence detection and tokenization.
//!
//! All offsets are byte offsets into UTF-8 text and always fall on character
//! boundaries.

use serde::{Deserialize, Serialize};

/// Periods terminating these never end a sentence. Matching is
/// case-sensitive and requires a word boundary before the abbreviation.
pub const ABBREVIATIONS: &[&str] = &[
    "mp", "bp", "e.g", "i.e", "Fig", "fig", "No", "approx", "et al", "etc",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    fn from_span(source: &str, start: usize, end: usize) -> Self {
        Token {
            text: source[start..end].to_string(),
            start,
            end,
        }
    }
}

/// A sentence with its span in the parent document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Chemical tokenizer rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleConfig {
    /// Punctuation that may stay inside a chemical token.
    pub no_split: Vec<char>,
    /// A chunk whose alphanumeric core ends in one of these counts as
    /// chemical even without digits. Compared case-insensitively.
    pub suffixes: Vec<String>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            no_split: vec!['-', ',', '.', '(', ')', '[', ']'],
            suffixes: ["yl", "ol", "ane", "ene", "ide", "ate", "ium"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TokenizerKind {
    #[default]
    General,
    Chemical(RuleConfig),
}

impl TokenizerKind {
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        match self {
            TokenizerKind::General => tokenize_general(text),
            TokenizerKind::Chemical(rules) => tokenize_chemical(text, rules),
        }
    }
}

fn is_boundary_punct(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn ends_with_abbreviation(before: &str) -> bool {
    ABBREVIATIONS.iter().any(|abbr| {
        before.ends_with(abbr) && {
            let head = &before[..before.len() - abbr.len()];
            head.chars().next_back().is_none_or(|c| !c.is_alphanumeric())
        }
    })
}

/// Splits a document after `.`, `!` or `?` when followed by whitespace and
/// then an uppercase letter or digit, unless the period closes a known
/// abbreviation or the mark sits inside parentheses or brackets.
pub fn split_sentences(document: &str) -> Vec<Sentence> {
    let mut sentences = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let chars: Vec<(usize, char)> = document.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            _ => {}
        }
        if !is_boundary_punct(c) || depth > 0 {
            continue;
        }
        let mut j = k + 1;
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        if j == k + 1 || j == chars.len() {
            continue;
        }
        let next = chars[j].1;
        if !(next.is_uppercase() || next.is_numeric()) {
            continue;
        }
        if c == '.' && ends_with_abbreviation(&document[..i]) {
            continue;
        }
        push_trimmed(&mut sentences, document, start, i + c.len_utf8());
        start = chars[j].0;
    }
    push_trimmed(&mut sentences, document, start, document.len());
    sentences
}

fn push_trimmed(out: &mut Vec<Sentence>, document: &str, start: usize, end: usize) {
    let slice = &document[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if trimmed.is_empty() {
        return;
    }
    let s = start + lead;
    out.push(Sentence {
        text: trimmed.to_string(),
        start: s,
        end: s + trimmed.len(),
    });
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else {
        Class::Other
    }
}

/// Maximal letter runs, maximal digit runs, and single punctuation
/// characters; whitespace separates and is dropped.
pub fn tokenize_general(text: &str) -> Vec<Token> {
    general_in(text, 0, text.len())
}

fn general_in(text: &str, from: usize, to: usize) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut iter = text[from..to].char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_whitespace() {
            continue;
        }
        let start = from + i;
        let mut end = start + c.len_utf8();
        let cls = class(c);
        if cls != Class::Other {
            while let Some(&(j, d)) = iter.peek() {
                if d.is_whitespace() || class(d) != cls {
                    break;
                }
                end = from + j + d.len_utf8();
                iter.next();
            }
        }
        tokens.push(Token::from_span(text, start, end));
    }
    tokens
}

/// General tokenization, except that inside a whitespace-delimited chunk
/// that looks chemical (has a digit, or ends in a configured suffix) the
/// configured punctuation does not split when it has alphanumeric material
/// on both sides within the same run, and brackets stay only when balanced.
/// Each merged run must itself pass the chemical test.
pub fn tokenize_chemical(text: &str, rules: &RuleConfig) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    for chunk in text.split_whitespace() {
        let start = pos + text[pos..].find(chunk).expect("chunk comes from text");
        let end = start + chunk.len();
        pos = end;
        if is_chemical_chunk(chunk, rules) {
            tokens.extend(merge_chunk(text, start, end, rules));
        } else {
            tokens.extend(general_in(text, start, end));
        }
    }
    tokens
}

fn is_chemical_chunk(chunk: &str, rules: &RuleConfig) -> bool {
    if chunk.chars().any(char::is_numeric) {
        return true;
    }
    let core = chunk.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    !core.is_empty() && rules.suffixes.iter().any(|s| core.ends_with(&s.to_lowercase()))
}

fn merge_chunk(text: &str, start: usize, end: usize, rules: &RuleConfig) -> Vec<Token> {
    let chars: Vec<(usize, char)> = text[start..end]
        .char_indices()
        .map(|(i, c)| (start + i, c))
        .collect();
    let joiner = |c: char| rules.no_split.contains(&c);
    let alnum = |c: char| c.is_alphanumeric();
    // `single[i]` marks characters emitted as standalone tokens
    let mut single: Vec<bool> = chars.iter().map(|&(_, c)| !alnum(c) && !joiner(c)).collect();
    loop {
        let mut changed = false;
        let mut a = 0;
        while a < chars.len() {
            if single[a] {
                a += 1;
                continue;
            }
            let mut b = a;
            while b < chars.len() && !single[b] {
                b += 1;
            }
            for p in unmatched_brackets(&chars[a..b]) {
                single[a + p] = true;
                changed = true;
            }
            if !changed {
                let first_alnum = (a..b).find(|&i| alnum(chars[i].1));
                let last_alnum = (a..b).rev().find(|&i| alnum(chars[i].1));
                for i in a..b {
                    if alnum(chars[i].1) {
                        continue;
                    }
                    let flanked = matches!((first_alnum, last_alnum), (Some(f), Some(l)) if f < i && i < l);
                    if !flanked {
                        single[i] = true;
                        changed = true;
                    }
                }
            }
            a = b;
        }
        if !changed {
            break;
        }
    }

    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let s = chars[i].0;
        if single[i] {
            tokens.push(Token::from_span(text, s, s + chars[i].1.len_utf8()));
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !single[j] {
            j += 1;
        }
        let e = chars[j - 1].0 + chars[j - 1].1.len_utf8();
        // the chemical test applies to each surviving run, so a run cut off
        // from the chunk's digits falls back to general splitting
        if is_chemical_chunk(&text[s..e], rules) {
            tokens.push(Token::from_span(text, s, e));
        } else {
            tokens.extend(general_in(text, s, e));
        }
        i = j;
    }
    tokens
}

/// Positions of brackets without a partner inside `run`.
fn unmatched_brackets(run: &[(usize, char)]) -> Vec<usize> {
    let mut stack: Vec<(usize, char)> = Vec::new();
    let mut bad = Vec::new();
    for (i, &(_, c)) in run.iter().enumerate() {
        match c {
            '(' | '[' => stack.push((i, c)),
            ')' | ']' => {
                let open = if c == ')' { '(' } else { '[' };
                match stack.last() {
                    Some(&(_, o)) if o == open => {
                        stack.pop();
                    }
                    _ => bad.push(i),
                }
            }
            _ => {}
        }
    }
    bad.extend(stack.into_iter().map(|(i, _)| i));
    bad
}
