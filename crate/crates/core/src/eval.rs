//! Entity-level exact-match scoring, confusion matrices and error listings.

use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{LabelScheme, TaggedSentence};
use crate::error::{Error, Result};

/// Half-open token range `[start, end)` carrying a label index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// Extracts spans: each `B-ℓ` opens a span that runs through consecutive
/// `I-ℓ`. An `I-ℓ` that does not continue a span of the same label opens a
/// new one.
pub fn spans_from_bio(tags: &[usize], scheme: &LabelScheme) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (t, &tag) in tags.iter().enumerate() {
        let label = scheme.label_of(tag);
        let continues = match (&open, label) {
            (Some(s), Some(l)) => !scheme.is_begin(tag) && s.label == l,
            _ => false,
        };
        if continues {
            if let Some(s) = open.as_mut() {
                s.end = t + 1;
            }
            continue;
        }
        spans.extend(open.take());
        open = label.map(|l| EntitySpan {
            start: t,
            end: t + 1,
            label: l,
        });
    }
    spans.extend(open);
    spans
}

/// Precision, recall and F1 with `0/0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelScore {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gold: usize,
    pub scores: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_label: Vec<LabelScore>,
    pub micro: Prf,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalReport {
    pub fn micro_f1(&self) -> f64 {
        self.micro.f1
    }

    /// Per-label rows followed by the micro average, as percentages.
    pub fn to_table(&self) -> String {
        let width = self
            .per_label
            .iter()
            .map(|l| l.label.len())
            .max()
            .unwrap_or(0)
            .max("Micro Avg.".len());
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9}  {:>9}  {:>9}\n",
            "Label", "Gold", "TP", "FP", "Precision", "Recall", "F1"
        );
        let row = |out: &mut String, name: &str, gold: usize, tp: usize, fp: usize, s: &Prf| {
            let _ = writeln!(
                out,
                "{name:<width$}  {gold:>6}  {tp:>6}  {fp:>6}  {:>9.2}  {:>9.2}  {:>9.2}",
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1
            );
        };
        for l in &self.per_label {
            row(&mut out, &l.label, l.gold, l.tp, l.fp, &l.scores);
        }
        row(
            &mut out,
            "Micro Avg.",
            self.tp + self.fn_,
            self.tp,
            self.fp,
            &self.micro,
        );
        out
    }
}

fn gold_tags(gold: &[TaggedSentence]) -> Vec<&[usize]> {
    gold.iter().map(|s| s.tags.as_slice()).collect()
}

fn check_alignment<G: AsRef<[usize]>>(gold: &[G], pred: &[Vec<usize>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Alignment {
            sentence: gold.len().min(pred.len()),
            detail: format!("{} gold sentences but {} predictions", gold.len(), pred.len()),
        });
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.as_ref().len() != p.len() {
            return Err(Error::Alignment {
                sentence: i,
                detail: format!("{} gold tags but {} predicted", g.as_ref().len(), p.len()),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Fn,
}

fn match_spans(gold: &[EntitySpan], pred: &[EntitySpan]) -> Vec<(EntitySpan, Outcome)> {
    let mut out = Vec::new();
    for p in pred {
        out.push((*p, if gold.contains(p) { Outcome::Tp } else { Outcome::Fp }));
    }
    for g in gold {
        if !pred.contains(g) {
            out.push((*g, Outcome::Fn));
        }
    }
    out
}

/// Exact-match (boundaries and label) entity scoring.
pub fn evaluate(
    gold: &[TaggedSentence],
    pred: &[Vec<usize>],
    scheme: &LabelScheme,
) -> Result<EvalReport> {
    evaluate_tags(&gold_tags(gold), pred, scheme)
}

/// [`evaluate`] over bare gold tag sequences.
pub fn evaluate_tags<G: AsRef<[usize]>>(
    gold: &[G],
    pred: &[Vec<usize>],
    scheme: &LabelScheme,
) -> Result<EvalReport> {
    check_alignment(gold, pred)?;
    let n = scheme.labels().len();
    let mut counts = vec![(0usize, 0usize, 0usize); n];
    for (g, p) in gold.iter().zip(pred) {
        let gs = spans_from_bio(g.as_ref(), scheme);
        let ps = spans_from_bio(p, scheme);
        for (span, outcome) in match_spans(&gs, &ps) {
            let c = &mut counts[span.label];
            match outcome {
                Outcome::Tp => c.0 += 1,
                Outcome::Fp => c.1 += 1,
                Outcome::Fn => c.2 += 1,
            }
        }
    }
    let per_label = scheme
        .labels()
        .iter()
        .zip(&counts)
        .map(|(label, &(tp, fp, fn_))| LabelScore {
            label: label.clone(),
            tp,
            fp,
            fn_,
            gold: tp + fn_,
            scores: Prf::from_counts(tp, fp, fn_),
        })
        .collect();
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(EvalReport {
        per_label,
        micro: Prf::from_counts(tp, fp, fn_),
        tp,
        fp,
        fn_,
    })
}

/// Token-level confusion over label classes. Class `0` is `O`, class
/// `1 + i` is label `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[gold][pred]`
    pub counts: Vec<Vec<usize>>,
    /// Per class, diagonal tokens whose B/I prefix differs.
    pub prefix_mismatch: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Comma-separated grid with a header row; diagonal cells are written
    /// as `count/prefix_mismatch`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (g, row) in self.counts.iter().enumerate() {
            out.push_str(&self.classes[g]);
            for (p, &v) in row.iter().enumerate() {
                if g == p {
                    let _ = write!(out, ",{v}/{}", self.prefix_mismatch[g]);
                } else {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(
    gold: &[TaggedSentence],
    pred: &[Vec<usize>],
    scheme: &LabelScheme,
) -> Result<ConfusionMatrix> {
    check_alignment(&gold_tags(gold), pred)?;
    let n = scheme.labels().len() + 1;
    let class = |tag: usize| scheme.label_of(tag).map_or(0, |l| l + 1);
    let mut m = ConfusionMatrix {
        classes: std::iter::once("O".to_string())
            .chain(scheme.labels().iter().cloned())
            .collect(),
        counts: vec![vec![0; n]; n],
        prefix_mismatch: vec![0; n],
    };
    for (g, p) in gold.iter().zip(pred) {
        for (&gt, &pt) in g.tags.iter().zip(p) {
            let (gc, pc) = (class(gt), class(pt));
            m.counts[gc][pc] += 1;
            if gc == pc && gt != pt {
                m.prefix_mismatch[gc] += 1;
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotatedSpan {
    pub span: EntitySpan,
    pub label: String,
    /// One of `TP`, `FP`, `FN`.
    pub kind: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorEntry {
    pub sentence: usize,
    pub document_id: String,
    pub errors: usize,
    pub spans: Vec<AnnotatedSpan>,
    /// Sentence text with spans bracketed, e.g. `[FN:M 2-butanol]`.
    pub rendered: String,
}

/// Sentences containing at least one false positive or false negative,
/// most errors first (stable on ties), at most `limit` entries.
pub fn error_listing(
    gold: &[TaggedSentence],
    pred: &[Vec<usize>],
    scheme: &LabelScheme,
    limit: usize,
) -> Result<Vec<ErrorEntry>> {
    check_alignment(&gold_tags(gold), pred)?;
    let mut entries = Vec::new();
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        let mut matched = match_spans(&spans_from_bio(&g.tags, scheme), &spans_from_bio(p, scheme));
        let errors = matched.iter().filter(|(_, o)| *o != Outcome::Tp).count();
        if errors == 0 {
            continue;
        }
        matched.sort_by_key(|(s, o)| (s.start, s.end, *o as u8));
        let spans: Vec<AnnotatedSpan> = matched
            .into_iter()
            .map(|(span, o)| AnnotatedSpan {
                span,
                label: scheme.labels()[span.label].clone(),
                kind: match o {
                    Outcome::Tp => "TP",
                    Outcome::Fp => "FP",
                    Outcome::Fn => "FN",
                },
            })
            .collect();
        entries.push(ErrorEntry {
            sentence: i,
            document_id: g.document_id.clone(),
            errors,
            rendered: render(g, &spans),
            spans,
        });
    }
    entries.sort_by_key(|e| std::cmp::Reverse(e.errors));
    entries.truncate(limit);
    Ok(entries)
}

fn render(sentence: &TaggedSentence, spans: &[AnnotatedSpan]) -> String {
    let words: Vec<&str> = sentence.words().collect();
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    // spans may overlap (FP against FN), so annotate by token boundaries
    for s in spans {
        out[s.span.start].insert_str(0, &format!("[{}:{} ", s.kind, s.label));
        out[s.span.end - 1].push(']');
    }
    out.join(" ")
}
