//! Pre-trained and baseline word embedding tables.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub dim: usize,
    pub trainable: bool,
    pub source_name: String,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Wraps the table as a parameter whose padding row never updates.
    pub fn into_parameter(self, name: &str) -> Parameter {
        Parameter::new(name, self.matrix, self.trainable).with_pinned_rows(vec![Vocabulary::PAD])
    }
}

/// Words and their vectors as read from a text embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEmbeddings {
    pub words: Vec<String>,
    /// `(words.len(), dim)`
    pub vectors: Tensor,
    pub dim: usize,
}

fn format_err(line: usize, detail: impl Into<String>) -> Error {
    Error::EmbeddingFormat {
        line,
        detail: detail.into(),
    }
}

/// Reads the text format: a `<count> <dim>` header, then `word v1 .. vdim`
/// per line. When `keep` is given only accepted words are retained, though
/// every line is still validated.
pub fn read_embedding_text<R: BufRead>(
    reader: R,
    keep: Option<&dyn Fn(&str) -> bool>,
) -> Result<LoadedEmbeddings> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| format_err(1, e.to_string()))?,
        None => return Err(format_err(1, "missing `<count> <dim>` header")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse = |s: &str| s.parse::<usize>().ok();
    let (count, dim) = match fields.as_slice() {
        [c, d] => match (parse(c), parse(d)) {
            (Some(c), Some(d)) => (c, d),
            _ => return Err(format_err(1, format!("bad header `{header}`"))),
        },
        _ => return Err(format_err(1, format!("bad header `{header}`"))),
    };
    let mut words = Vec::new();
    let mut data = Vec::new();
    let mut seen = 0usize;
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line.map_err(|e| format_err(line_no, e.to_string()))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        seen += 1;
        if seen > count {
            return Err(format_err(line_no, format!("more rows than the declared {count}")));
        }
        let mut parts = line.split(' ');
        let word = parts.next().unwrap_or_default();
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(format_err(
                line_no,
                format!("expected {dim} components, found {}", values.len()),
            ));
        }
        let retain = keep.is_none_or(|k| k(word));
        for v in values {
            let x: f64 = v
                .parse()
                .map_err(|_| format_err(line_no, format!("non-numeric component `{v}`")))?;
            if !x.is_finite() {
                return Err(format_err(line_no, format!("non-finite component `{v}`")));
            }
            if retain {
                data.push(x);
            }
        }
        if retain {
            words.push(word.to_string());
        }
    }
    if seen != count {
        return Err(format_err(
            seen + 2,
            format!("header declares {count} rows but file has {seen}"),
        ));
    }
    let vectors = Tensor::new(&[words.len(), dim], data)?;
    Ok(LoadedEmbeddings {
        words,
        vectors,
        dim,
    })
}

pub fn load_embedding_text(path: &Path) -> Result<LoadedEmbeddings> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embedding_text(std::io::BufReader::new(file), None)
}

/// Loads only rows whose word satisfies `keep`.
pub fn load_embedding_text_filtered(
    path: &Path,
    keep: &dyn Fn(&str) -> bool,
) -> Result<LoadedEmbeddings> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embedding_text(std::io::BufReader::new(file), Some(keep))
}

fn normal(dim: usize) -> Normal<f64> {
    Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive standard deviation")
}

/// Builds a frozen table over `vocab`: file vectors are copied verbatim,
/// other rows drawn from `N(0, 1/sqrt(dim))`, and the padding row is zero.
pub fn align_to_vocab(loaded: &LoadedEmbeddings, vocab: &Vocabulary, seed: u64) -> EmbeddingTable {
    let dim = loaded.dim;
    let index: HashMap<&str, usize> = loaded
        .words
        .iter()
        .enumerate()
        .rev()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = normal(dim.max(1));
    let mut matrix = Tensor::zeros(&[vocab.len(), dim]);
    for (id, word) in vocab.words().iter().enumerate() {
        if id == Vocabulary::PAD {
            continue;
        }
        let row = matrix.row_mut(id);
        match index.get(word.as_str()) {
            Some(&src) => row.copy_from_slice(loaded.vectors.row(src)),
            None => row.iter_mut().for_each(|v| *v = dist.sample(&mut rng)),
        }
    }
    EmbeddingTable {
        matrix,
        dim,
        trainable: false,
        source_name: "pretrained".into(),
    }
}

/// A trainable table drawn from `N(0, 1/sqrt(dim))` with a zero padding row.
pub fn init_baseline(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = normal(dim);
    let mut matrix = Tensor::zeros(&[vocab.len(), dim]);
    for id in 0..vocab.len() {
        if id != Vocabulary::PAD {
            matrix
                .row_mut(id)
                .iter_mut()
                .for_each(|v| *v = dist.sample(&mut rng));
        }
    }
    Ok(EmbeddingTable {
        matrix,
        dim,
        trainable: true,
        source_name: "baseline".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, TaggedSentence};

    fn parse(text: &str) -> Result<LoadedEmbeddings> {
        read_embedding_text(text.as_bytes(), None)
    }

    fn vocab(pretrained: &[&str]) -> Vocabulary {
        let s = TaggedSentence::from_words(&["acid"; 4], vec![0; 4], "d");
        let words: Vec<String> = pretrained.iter().map(|w| w.to_string()).collect();
        build_vocabulary(&[s], &[], &words)
    }

    #[test]
    fn parses_two_rows() {
        let e = parse("2 3\na 1 0 0\nb 0 1 0\n").unwrap();
        assert_eq!(e.words, ["a", "b"]);
        assert_eq!(e.vectors.shape(), &[2, 3]);
        assert_eq!(e.vectors.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn format_errors_carry_lines() {
        assert!(matches!(
            parse("1 3\na 1 0\n"),
            Err(Error::EmbeddingFormat { line: 2, .. })
        ));
        assert!(matches!(
            parse("2 1\na 1\n"),
            Err(Error::EmbeddingFormat { .. })
        ));
        assert!(matches!(
            parse("1 1\na x\n"),
            Err(Error::EmbeddingFormat { line: 2, .. })
        ));
        assert!(matches!(parse("three 1\n"), Err(Error::EmbeddingFormat { line: 1, .. })));
    }

    #[test]
    fn empty_table() {
        let e = parse("0 5\n").unwrap();
        assert!(e.words.is_empty());
        assert_eq!(e.dim, 5);
        assert_eq!(e.vectors.shape(), &[0, 5]);
    }

    #[test]
    fn filtered_load_keeps_selected_rows() {
        let keep = |w: &str| w == "b";
        let e = read_embedding_text("2 2\na 1 2\nb 3 4\n".as_bytes(), Some(&keep)).unwrap();
        assert_eq!(e.words, ["b"]);
        assert_eq!(e.vectors.data(), &[3.0, 4.0]);
    }

    #[test]
    fn alignment_copies_and_pads() {
        let e = parse("2 3\nwater 0.25 -1 3\nzzz 1 1 1\n").unwrap();
        let v = vocab(&["water"]);
        let t = align_to_vocab(&e, &v, 5);
        assert!(!t.trainable);
        assert_eq!(t.matrix.row(v.word_id("water")), &[0.25, -1.0, 3.0]);
        assert!(t.matrix.row(Vocabulary::PAD).iter().all(|&x| x == 0.0));
        assert!(t.matrix.row(Vocabulary::UNK).iter().any(|&x| x != 0.0));
        assert_eq!(align_to_vocab(&e, &v, 5), t);
    }

    #[test]
    fn baseline_shape_and_determinism() {
        let v = vocab(&["a", "b", "c", "d", "e", "f"]);
        assert_eq!(v.len(), 10);
        let t = init_baseline(&v, 200, 1).unwrap();
        assert!(t.trainable);
        assert_eq!(t.matrix.shape(), &[10, 200]);
        assert!(t.matrix.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(init_baseline(&v, 200, 1).unwrap(), t);
        assert_ne!(init_baseline(&v, 200, 2).unwrap(), t);
        let std = (t.matrix.data()[200..].iter().map(|x| x * x).sum::<f64>() / 1800.0).sqrt();
        assert!((std - 1.0 / 200f64.sqrt()).abs() < 0.01);
        assert!(init_baseline(&v, 0, 1).is_err());
    }
}
