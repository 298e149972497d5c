//! Annotated corpora: BIO label schemes, the two-column file format,
//! document-level splitting, vocabulary construction, and long-token
//! normalization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::spans_from_bio;
use crate::textproc::Token;

/// Marks the start of a new document in the column format.
pub const DOCSTART: &str = "-DOCSTART-";
/// Replacement text for over-long tokens.
pub const LONG_TOKEN: &str = "Long_Token";
/// Tokens with more characters than this are replaced by [`LONG_TOKEN`].
pub const DEFAULT_MAX_TOKEN_CHARS: usize = 25;

/// Entity labels and the BIO tag set derived from them.
///
/// Tag ids: `0` is `O`; label `i` has `B-` at `1 + 2i` and `I-` at `2 + 2i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelScheme {
    labels: Vec<String>,
}

impl TryFrom<Vec<String>> for LabelScheme {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelScheme::new(labels)
    }
}

impl From<LabelScheme> for Vec<String> {
    fn from(s: LabelScheme) -> Self {
        s.labels
    }
}

impl LabelScheme {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(Error::Scheme(format!("invalid label `{l}`")));
            }
            if !seen.insert(l) {
                return Err(Error::Scheme(format!("duplicate label `{l}`")));
            }
        }
        Ok(LabelScheme { labels })
    }

    /// Collects labels from tag strings in order of first appearance.
    pub fn infer<'a>(tags: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        for tag in tags {
            if tag == "O" {
                continue;
            }
            let label = tag
                .strip_prefix("B-")
                .or_else(|| tag.strip_prefix("I-"))
                .ok_or_else(|| Error::Scheme(format!("`{tag}` is not a BIO tag")))?;
            if !labels.iter().any(|l| l == label) {
                labels.push(label.to_string());
            }
        }
        LabelScheme::new(labels)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_tags(&self) -> usize {
        2 * self.labels.len() + 1
    }

    pub fn begin_tag(&self, label: usize) -> usize {
        1 + 2 * label
    }

    pub fn inside_tag(&self, label: usize) -> usize {
        2 + 2 * label
    }

    /// Entity label index of a tag; `None` for `O`.
    pub fn label_of(&self, tag: usize) -> Option<usize> {
        (tag > 0).then(|| (tag - 1) / 2)
    }

    pub fn is_begin(&self, tag: usize) -> bool {
        tag > 0 && tag % 2 == 1
    }

    /// Label index when `tag` is an `I-` tag.
    pub fn inside_label(&self, tag: usize) -> Option<usize> {
        (tag > 0 && tag.is_multiple_of(2)).then(|| tag / 2 - 1)
    }

    pub fn tag_name(&self, tag: usize) -> String {
        match self.label_of(tag) {
            None => "O".to_string(),
            Some(l) if self.is_begin(tag) => format!("B-{}", self.labels[l]),
            Some(l) => format!("I-{}", self.labels[l]),
        }
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        if tag == "O" {
            return Some(0);
        }
        let (begin, label) = if let Some(l) = tag.strip_prefix("B-") {
            (true, l)
        } else {
            (false, tag.strip_prefix("I-")?)
        };
        let idx = self.labels.iter().position(|l| l == label)?;
        Some(if begin {
            self.begin_tag(idx)
        } else {
            self.inside_tag(idx)
        })
    }
}

/// Tokens with aligned tag ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<Token>,
    pub tags: Vec<usize>,
    pub document_id: String,
}

impl TaggedSentence {
    /// Builds a sentence from bare words, synthesizing offsets as if the
    /// words were joined by single spaces.
    pub fn from_words<S: AsRef<str>>(words: &[S], tags: Vec<usize>, document_id: &str) -> Self {
        let mut tokens = Vec::with_capacity(words.len());
        let mut pos = 0;
        for w in words {
            let w = w.as_ref();
            tokens.push(Token {
                text: w.to_string(),
                start: pos,
                end: pos + w.len(),
            });
            pos += w.len() + 1;
        }
        TaggedSentence {
            tokens,
            tags,
            document_id: document_id.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    pub fn text(&self) -> String {
        self.words().collect::<Vec<_>>().join(" ")
    }
}

/// Converts every dangling `I-ℓ` (at sentence start, after `O`, or after a
/// different label) into `B-ℓ`. Returns the number of repairs.
pub fn repair_bio(tags: &mut [usize], scheme: &LabelScheme) -> usize {
    let mut repairs = 0;
    for t in 0..tags.len() {
        if let Some(label) = scheme.inside_label(tags[t]) {
            let continues = t > 0 && scheme.label_of(tags[t - 1]) == Some(label);
            if !continues {
                tags[t] = scheme.begin_tag(label);
                repairs += 1;
            }
        }
    }
    repairs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnCorpus {
    pub sentences: Vec<TaggedSentence>,
    pub repairs: usize,
}

/// Reads a two-column corpus and repairs BIO violations.
pub fn read_column_corpus(path: &Path, scheme: &LabelScheme) -> Result<ColumnCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_column_corpus(&text, scheme, true)
}

/// Parses the two-column format: `token <TAB> tag` per line, blank lines
/// between sentences, `-DOCSTART-` lines between documents. Fields may also
/// be separated by spaces; exactly two fields are required.
pub fn parse_column_corpus(text: &str, scheme: &LabelScheme, repair: bool) -> Result<ColumnCorpus> {
    let mut sentences = Vec::new();
    let mut repairs = 0;
    let mut doc_index = 0usize;
    let mut doc_has_content = false;
    let mut words: Vec<String> = Vec::new();
    let mut tags: Vec<usize> = Vec::new();

    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<usize>, doc: usize, repairs: &mut usize| {
        if words.is_empty() {
            return;
        }
        if repair {
            *repairs += repair_bio(tags, scheme);
        }
        sentences.push(TaggedSentence::from_words(
            words,
            std::mem::take(tags),
            &format!("doc{doc}"),
        ));
        words.clear();
    };

    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut words, &mut tags, doc_index, &mut repairs);
            continue;
        }
        if trimmed.starts_with(DOCSTART) {
            flush(&mut words, &mut tags, doc_index, &mut repairs);
            if doc_has_content {
                doc_index += 1;
                doc_has_content = false;
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected 2 columns, found {}: `{trimmed}`", fields.len()),
            });
        }
        let tag = scheme.tag_id(fields[1]).ok_or_else(|| Error::Schema {
            line: line_no,
            tag: fields[1].to_string(),
        })?;
        words.push(fields[0].to_string());
        tags.push(tag);
        doc_has_content = true;
    }
    flush(&mut words, &mut tags, doc_index, &mut repairs);
    Ok(ColumnCorpus { sentences, repairs })
}

/// Labels used in a column file, in order of first appearance.
pub fn infer_scheme(text: &str) -> Result<LabelScheme> {
    let tags = text.lines().filter_map(|line| {
        let t = line.trim();
        if t.is_empty() || t.starts_with(DOCSTART) {
            return None;
        }
        t.split_whitespace().nth(1)
    });
    LabelScheme::infer(tags)
}

/// Serializes sentences back to the column format, starting each document
/// with a `-DOCSTART-` line.
pub fn write_column_corpus(sentences: &[TaggedSentence], scheme: &LabelScheme) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for s in sentences {
        if current != Some(s.document_id.as_str()) {
            out.push_str(DOCSTART);
            out.push_str("\n\n");
            current = Some(&s.document_id);
        }
        for (tok, &tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(&tok.text);
            out.push('\t');
            out.push_str(&scheme.tag_name(tag));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Document-level partition of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<TaggedSentence>,
    pub dev: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
    pub seed: u64,
}

fn document_order(sentences: &[TaggedSentence]) -> Vec<String> {
    let mut seen = HashSet::new();
    sentences
        .iter()
        .filter(|s| seen.insert(s.document_id.as_str()))
        .map(|s| s.document_id.clone())
        .collect()
}

/// Document counts for `(train, dev, test)`: floors of the ratios, then the
/// remainder handed out one at a time in the order train, test, dev, with
/// splits that are still empty served first.
pub fn split_counts(documents: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let n = documents as f64;
    let floor = |r: f64| (n * r + 1e-9).floor() as usize;
    let mut counts = [floor(ratios.0), floor(ratios.1), floor(ratios.2)];
    let mut remainder = documents.saturating_sub(counts.iter().sum());
    let order = [0, 2, 1];
    for &i in &order {
        if remainder > 0 && counts[i] == 0 {
            counts[i] += 1;
            remainder -= 1;
        }
    }
    for k in 0..remainder {
        counts[order[k % 3]] += 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Shuffles documents with a seeded generator and partitions them by the
/// given ratios. Sentences keep their corpus order within each split.
pub fn split_dataset(
    sentences: &[TaggedSentence],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if [ratios.0, ratios.1, ratios.2].iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let mut docs = document_order(sentences);
    if docs.len() < 3 {
        return Err(Error::Data(format!(
            "splitting needs at least 3 documents, found {}",
            docs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    docs.shuffle(&mut rng);
    let (n_train, n_dev, _) = split_counts(docs.len(), ratios);
    let mut assignment: HashMap<&str, u8> = HashMap::new();
    for (i, d) in docs.iter().enumerate() {
        let part = if i < n_train {
            0
        } else if i < n_train + n_dev {
            1
        } else {
            2
        };
        assignment.insert(d.as_str(), part);
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for s in sentences {
        match assignment[s.document_id.as_str()] {
            0 => split.train.push(s.clone()),
            1 => split.dev.push(s.clone()),
            _ => split.test.push(s.clone()),
        }
    }
    Ok(split)
}

/// Word and character indices.
///
/// Word ids `0, 1, 2` are the padding, unknown and long-token symbols;
/// character ids `0, 1` are padding and unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyData", into = "VocabularyData")]
pub struct Vocabulary {
    words: Vec<String>,
    chars: Vec<char>,
    min_count: usize,
    word_to_id: HashMap<String, usize>,
    char_to_id: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyData {
    words: Vec<String>,
    chars: String,
    min_count: usize,
}

impl From<VocabularyData> for Vocabulary {
    fn from(d: VocabularyData) -> Self {
        Vocabulary::from_parts(d.words, d.chars.chars().collect(), d.min_count)
    }
}

impl From<Vocabulary> for VocabularyData {
    fn from(v: Vocabulary) -> Self {
        VocabularyData {
            words: v.words,
            chars: v.chars.into_iter().collect(),
            min_count: v.min_count,
        }
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const LONG_TOKEN: usize = 2;
    pub const PAD_CHAR: usize = 0;
    pub const UNK_CHAR: usize = 1;
    /// Default count threshold: a word must occur more than three times.
    pub const DEFAULT_MIN_COUNT: usize = 4;

    const PAD_TEXT: &'static str = "<pad>";
    const UNK_TEXT: &'static str = "<unk>";
    // private-use code points stand in for the special character slots
    const PAD_CHAR_TEXT: char = '\u{E000}';
    const UNK_CHAR_TEXT: char = '\u{E001}';

    fn from_parts(words: Vec<String>, chars: Vec<char>, min_count: usize) -> Self {
        let mut word_to_id = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            word_to_id.entry(w.clone()).or_insert(i);
        }
        let mut char_to_id = HashMap::new();
        for (i, &c) in chars.iter().enumerate().skip(2) {
            char_to_id.entry(c).or_insert(i);
        }
        Vocabulary {
            words,
            chars,
            min_count,
            word_to_id,
            char_to_id,
        }
    }

    fn empty(min_count: usize) -> Self {
        Vocabulary::from_parts(
            vec![
                Self::PAD_TEXT.to_string(),
                Self::UNK_TEXT.to_string(),
                LONG_TOKEN.to_string(),
            ],
            vec![Self::PAD_CHAR_TEXT, Self::UNK_CHAR_TEXT],
            min_count,
        )
    }

    fn push_word(&mut self, w: &str) {
        if !self.word_to_id.contains_key(w) {
            self.word_to_id.insert(w.to_string(), self.words.len());
            self.words.push(w.to_string());
        }
    }

    fn push_char(&mut self, c: char) {
        if let std::collections::hash_map::Entry::Vacant(e) = self.char_to_id.entry(c) {
            e.insert(self.chars.len());
            self.chars.push(c);
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    /// Exact lookup, then a lowercased lookup, then the unknown id.
    pub fn word_id(&self, word: &str) -> usize {
        if let Some(&id) = self.word_to_id.get(word) {
            return id;
        }
        self.word_to_id
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(Self::UNK)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(Self::UNK_CHAR)
    }

    pub fn char_ids(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.char_id(c)).collect()
    }
}

/// Builds the vocabulary: the special symbols, every pre-trained word (in
/// the given order), then words occurring at least `min_count` times in
/// train and dev, in order of first occurrence. Characters come from train
/// and dev.
pub fn build_vocabulary_with(
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    pretrained: &[String],
    min_count: usize,
) -> Vocabulary {
    let mut vocab = Vocabulary::empty(min_count);
    for w in pretrained {
        vocab.push_word(w);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for s in train.iter().chain(dev) {
        for w in s.words() {
            let c = counts.entry(w).or_insert(0);
            if *c == 0 {
                order.push(w);
            }
            *c += 1;
            for ch in w.chars() {
                vocab.push_char(ch);
            }
        }
    }
    for w in order {
        if counts[w] >= min_count {
            vocab.push_word(w);
        }
    }
    vocab
}

pub fn build_vocabulary(
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    pretrained: &[String],
) -> Vocabulary {
    build_vocabulary_with(train, dev, pretrained, Vocabulary::DEFAULT_MIN_COUNT)
}

/// The text a token is replaced with when longer than `max_len` characters.
pub fn normalize_token(text: &str, max_len: usize) -> &str {
    if text.chars().count() > max_len {
        LONG_TOKEN
    } else {
        text
    }
}

/// Replaces the text of tokens longer than `max_len` characters with
/// [`LONG_TOKEN`]; offsets and tags are unchanged.
pub fn normalize_long_tokens(sentence: &TaggedSentence, max_len: usize) -> TaggedSentence {
    let mut out = sentence.clone();
    for tok in &mut out.tokens {
        if tok.text.chars().count() > max_len {
            tok.text = LONG_TOKEN.to_string();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub sentences: usize,
    pub tokens: usize,
    /// Gold entity spans per label, in scheme order.
    pub entities: BTreeMap<String, usize>,
}

pub fn corpus_stats(sentences: &[TaggedSentence], scheme: &LabelScheme) -> CorpusStats {
    let mut stats = CorpusStats {
        documents: document_order(sentences).len(),
        sentences: sentences.len(),
        tokens: sentences.iter().map(TaggedSentence::len).sum(),
        entities: scheme.labels().iter().map(|l| (l.clone(), 0)).collect(),
    };
    for s in sentences {
        for span in spans_from_bio(&s.tags, scheme) {
            *stats
                .entities
                .get_mut(&scheme.labels()[span.label])
                .expect("label in scheme") += 1;
        }
    }
    stats
}
