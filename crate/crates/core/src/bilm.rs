//! A small bidirectional language model over character-encoded tokens, and
//! the scalar mixing of its layers into contextual token features.
//!
//! Each token is encoded from its characters (embedding, convolution with
//! max-pooling, `tanh`, linear projection). A learned boundary vector is
//! placed before and after the sentence. The forward stack reads left to
//! right and predicts the next token (the closing boundary after the last
//! token); the backward stack mirrors it. Both share one softmax over the
//! vocabulary plus a boundary class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocabulary_with, normalize_token, TaggedSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{normal_tensor, uniform_tensor, ParamStore, Parameter, Tape, Tensor, Var};
use crate::training::checkpoint::RawCheckpoint;
use crate::training::{adam_step, clip_gradients, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiLmConfig {
    pub char_embed_dim: usize,
    /// `(width, count)` per filter bank.
    pub char_filters: Vec<(usize, usize)>,
    pub token_projection_dim: usize,
    pub num_layers: usize,
    /// Hidden size per direction.
    pub layer_dim: usize,
    pub max_token_len: usize,
    /// Output vocabulary threshold.
    pub min_count: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for BiLmConfig {
    fn default() -> Self {
        BiLmConfig {
            char_embed_dim: 16,
            char_filters: vec![(3, 32)],
            token_projection_dim: 64,
            num_layers: 2,
            layer_dim: 64,
            max_token_len: crate::corpus::DEFAULT_MAX_TOKEN_CHARS,
            min_count: 1,
            learning_rate: 0.01,
            batch_size: 8,
            clip_norm: 5.0,
        }
    }
}

impl BiLmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("char_embed_dim", self.char_embed_dim),
            ("token_projection_dim", self.token_projection_dim),
            ("num_layers", self.num_layers),
            ("layer_dim", self.layer_dim),
            ("max_token_len", self.max_token_len),
            ("min_count", self.min_count),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("bilm {name} must be positive")));
        }
        if self.char_filters.is_empty() || self.char_filters.iter().any(|&(w, n)| w == 0 || n == 0) {
            return Err(Error::Config("bilm char_filters need positive widths and counts".into()));
        }
        if self.token_projection_dim != self.layer_dim {
            return Err(Error::Config(format!(
                "bilm token_projection_dim ({}) must equal layer_dim ({}) so that layer 0 \
                 can be duplicated to the width of the recurrent layers",
                self.token_projection_dim, self.layer_dim
            )));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("bilm learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Width of each contextual layer: both directions side by side.
    pub fn output_dim(&self) -> usize {
        2 * self.layer_dim
    }

    fn char_padding(&self) -> usize {
        self.char_filters.iter().map(|&(w, _)| w).max().unwrap_or(1) / 2
    }
}

/// Character ids for a run of tokens, each padded with `pad` padding
/// characters on both sides, and the `(start, len)` segment of each token.
/// Empty tokens get an empty segment.
pub(crate) fn char_layout(
    vocab: &Vocabulary,
    tokens: &[&str],
    pad: usize,
    max_token_len: usize,
) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let start = ids.len();
        if !tok.is_empty() {
            ids.extend(std::iter::repeat_n(Vocabulary::PAD_CHAR, pad));
            ids.extend(vocab.char_ids(normalize_token(tok, max_token_len)));
            ids.extend(std::iter::repeat_n(Vocabulary::PAD_CHAR, pad));
        }
        segments.push((start, ids.len() - start));
    }
    (ids, segments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLm {
    pub config: BiLmConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// Serializable description of a biLM without its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLmMeta {
    pub config: BiLmConfig,
    pub vocab: Vocabulary,
}

struct Stacks {
    inputs: Var,
    forward: Vec<Var>,
    backward: Vec<Var>,
}

impl BiLm {
    pub fn new(config: BiLmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = config.char_embed_dim;
        let mut chars = normal_tensor(&mut rng, &[vocab.num_chars(), e], 1.0 / (e as f64).sqrt());
        chars.row_mut(Vocabulary::PAD_CHAR).fill(0.0);
        p.add(Parameter::new("char_embed", chars, true).with_pinned_rows(vec![Vocabulary::PAD_CHAR]))?;
        let mut conv_out = 0;
        for (i, &(w, n)) in config.char_filters.iter().enumerate() {
            let bound = 1.0 / ((w * e) as f64).sqrt();
            p.add(Parameter::new(format!("conv{i}.w"), uniform_tensor(&mut rng, &[n, w * e], bound), true))?;
            p.add(Parameter::new(format!("conv{i}.b"), Tensor::zeros(&[n]), true))?;
            conv_out += n;
        }
        let proj = config.token_projection_dim;
        let bound = 1.0 / (conv_out as f64).sqrt();
        p.add(Parameter::new("proj.w", uniform_tensor(&mut rng, &[proj, conv_out], bound), true))?;
        p.add(Parameter::new("proj.b", Tensor::zeros(&[proj]), true))?;
        p.add(Parameter::new(
            "boundary",
            normal_tensor(&mut rng, &[1, proj], 1.0 / (proj as f64).sqrt()),
            true,
        ))?;
        let h = config.layer_dim;
        for dir in ["fwd", "bwd"] {
            for l in 0..config.num_layers {
                let input = if l == 0 { proj } else { h };
                for (name, t) in lstm_init(&mut rng, input, h) {
                    p.add(Parameter::new(format!("{dir}{l}.{name}"), t, true))?;
                }
            }
        }
        let classes = vocab.len() + 1;
        let bound = 1.0 / (h as f64).sqrt();
        p.add(Parameter::new("softmax.w", uniform_tensor(&mut rng, &[classes, h], bound), true))?;
        p.add(Parameter::new("softmax.b", Tensor::zeros(&[classes]), true))?;
        Ok(BiLm {
            config,
            vocab,
            params: p,
        })
    }

    /// Output class used for the sentence boundary.
    pub fn boundary_class(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    fn var(&self, tape: &mut Tape<'_>, name: &str) -> Result<Var> {
        Ok(tape.param(self.params.id(name)?))
    }

    /// Context-independent token vectors, `T × token_projection_dim`.
    fn token_inputs(&self, tape: &mut Tape<'_>, tokens: &[&str]) -> Result<Var> {
        let (ids, segments) =
            char_layout(&self.vocab, tokens, self.config.char_padding(), self.config.max_token_len);
        let table = self.var(tape, "char_embed")?;
        let embedded = tape.embedding(table, &ids)?;
        let mut banks = Vec::new();
        for (i, &(w, _)) in self.config.char_filters.iter().enumerate() {
            let f = self.var(tape, &format!("conv{i}.w"))?;
            let b = self.var(tape, &format!("conv{i}.b"))?;
            banks.push(tape.conv_maxpool(embedded, f, b, &segments, w)?);
        }
        let pooled = if banks.len() == 1 { banks[0] } else { tape.concat_cols(&banks)? };
        let activated = tape.tanh(pooled);
        let w = self.var(tape, "proj.w")?;
        let b = self.var(tape, "proj.b")?;
        tape.linear(activated, w, Some(b))
    }

    fn stacks(&self, tape: &mut Tape<'_>, tokens: &[&str]) -> Result<Stacks> {
        let t = tokens.len();
        let x = self.token_inputs(tape, tokens)?;
        let boundary = self.var(tape, "boundary")?;
        let inputs = tape.concat_rows(&[boundary, x, boundary])?;
        let mut fwd_mask = vec![true; t + 2];
        fwd_mask[t + 1] = false;
        let mut bwd_mask = vec![true; t + 2];
        bwd_mask[0] = false;
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        for (dir, mask, reverse, out) in [
            ("fwd", &fwd_mask, false, &mut forward),
            ("bwd", &bwd_mask, true, &mut backward),
        ] {
            let mut input = inputs;
            for l in 0..self.config.num_layers {
                let w_ih = self.var(tape, &format!("{dir}{l}.w_ih"))?;
                let w_hh = self.var(tape, &format!("{dir}{l}.w_hh"))?;
                let b = self.var(tape, &format!("{dir}{l}.b"))?;
                input = tape.lstm_scan(input, w_ih, w_hh, b, mask, reverse)?;
                out.push(input);
            }
        }
        Ok(Stacks {
            inputs,
            forward,
            backward,
        })
    }

    fn targets(&self, tokens: &[&str]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.vocab.word_id(normalize_token(t, self.config.max_token_len)))
            .collect()
    }

    /// Next-token logits of both directions, each `(T+1) × (V+1)`. Forward
    /// row `t` predicts token `t` (0-based) from tokens before it, with the
    /// last row predicting the closing boundary. Backward row `t` predicts
    /// token `t-1` from tokens from `t` on, with row 0 predicting the
    /// opening boundary.
    fn logits(&self, tape: &mut Tape<'_>, tokens: &[&str]) -> Result<(Var, Var)> {
        let t = tokens.len();
        let s = self.stacks(tape, tokens)?;
        let top_f = *s.forward.last().expect("at least one layer");
        let top_b = *s.backward.last().expect("at least one layer");
        let rows_f = tape.slice_rows(top_f, 0, t + 1)?;
        let rows_b = tape.slice_rows(top_b, 1, t + 2)?;
        let w = self.var(tape, "softmax.w")?;
        let b = self.var(tape, "softmax.b")?;
        Ok((tape.linear(rows_f, w, Some(b))?, tape.linear(rows_b, w, Some(b))?))
    }

    pub fn direction_logits(&self, tokens: &[&str]) -> Result<(Tensor, Tensor)> {
        if tokens.is_empty() {
            return Err(Error::Data("language model input is empty".into()));
        }
        let mut tape = Tape::with_params(&self.params);
        let (f, b) = self.logits(&mut tape, tokens)?;
        Ok((tape.value(f).clone(), tape.value(b).clone()))
    }

    /// Summed negative log-likelihood of both directions over one sentence,
    /// and the number of predictions it covers.
    pub fn sentence_nll(&self, tape: &mut Tape<'_>, tokens: &[&str]) -> Result<(Var, usize)> {
        if tokens.is_empty() {
            return Err(Error::Data("language model input is empty".into()));
        }
        let (lf, lb) = self.logits(tape, tokens)?;
        let ids = self.targets(tokens);
        let boundary = self.boundary_class();
        let fwd_targets: Vec<usize> = ids.iter().copied().chain([boundary]).collect();
        let bwd_targets: Vec<usize> = [boundary].into_iter().chain(ids.iter().copied()).collect();
        let mut totals = Vec::new();
        for (logits, targets) in [(lf, fwd_targets), (lb, bwd_targets)] {
            let lse = tape.logsumexp(logits);
            let picked = tape.gather(logits, &targets)?;
            let neg = tape.scale(picked, -1.0);
            let diff = tape.add(lse, neg)?;
            totals.push(tape.sum(diff));
        }
        Ok((tape.add(totals[0], totals[1])?, 2 * (tokens.len() + 1)))
    }

    /// Per-prediction perplexity over a corpus, both directions pooled.
    pub fn perplexity(&self, sentences: &[Vec<String>]) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0;
        for s in sentences.iter().filter(|s| !s.is_empty()) {
            let tokens: Vec<&str> = s.iter().map(String::as_str).collect();
            let mut tape = Tape::with_params(&self.params);
            let (v, n) = self.sentence_nll(&mut tape, &tokens)?;
            nll += tape.value(v).item();
            count += n;
        }
        if count == 0 {
            return Err(Error::Data("perplexity of an empty corpus".into()));
        }
        Ok((nll / count as f64).exp())
    }

    /// Layer representations of a sentence: `L + 1` tensors of shape
    /// `T × 2·layer_dim`. Layer 0 is the token projection repeated twice;
    /// layer `l` joins the forward and backward hidden states of depth `l`.
    pub fn contextualize(&self, tokens: &[&str]) -> Result<Vec<Tensor>> {
        let t = tokens.len();
        let width = self.config.output_dim();
        if t == 0 {
            return Ok(vec![Tensor::zeros(&[0, width]); self.config.num_layers + 1]);
        }
        let mut tape = Tape::with_params(&self.params);
        let s = self.stacks(&mut tape, tokens)?;
        let inner = |tape: &mut Tape<'_>, v: Var| tape.slice_rows(v, 1, t + 1);
        let x = inner(&mut tape, s.inputs)?;
        let mut layers = vec![tape.concat_cols(&[x, x])?];
        for (f, b) in s.forward.iter().zip(&s.backward) {
            let f = inner(&mut tape, *f)?;
            let b = inner(&mut tape, *b)?;
            layers.push(tape.concat_cols(&[f, b])?);
        }
        Ok(layers.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub fn meta(&self) -> BiLmMeta {
        BiLmMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        }
    }

    /// Tensors named `prefix + parameter name`, in store order.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
            .collect()
    }

    /// Rebuilds a biLM from its description and parameter values.
    pub fn from_parts<'a>(
        meta: BiLmMeta,
        tensors: impl Iterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        let mut bilm = BiLm::new(meta.config, meta.vocab, 0)?;
        load_values(&mut bilm.params, tensors, "bilm")?;
        Ok(bilm)
    }

    pub fn to_raw(&self) -> Result<RawCheckpoint> {
        let metadata = serde_json::to_string(&serde_json::json!({
            "kind": "bilm",
            "bilm": self.meta(),
        }))
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(RawCheckpoint {
            metadata,
            tensors: self.named_tensors("bilm."),
        })
    }

    pub fn from_raw(raw: &RawCheckpoint) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            kind: String,
            bilm: BiLmMeta,
        }
        let doc: Doc = serde_json::from_str(&raw.metadata).map_err(|e| Error::Checkpoint {
            offset: 0,
            detail: format!("biLM metadata: {e}"),
        })?;
        if doc.kind != "bilm" {
            return Err(Error::Checkpoint {
                offset: 0,
                detail: format!("expected a biLM checkpoint, found `{}`", doc.kind),
            });
        }
        BiLm::from_parts(doc.bilm, raw.with_prefix("bilm."))
    }
}

/// Fresh LSTM weights: uniform in `±1/sqrt(hidden)`, forget-gate bias 1.
pub(crate) fn lstm_init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> [(&'static str, Tensor); 3] {
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].fill(1.0);
    [
        ("w_ih", uniform_tensor(rng, &[4 * hidden, input], bound)),
        ("w_hh", uniform_tensor(rng, &[4 * hidden, hidden], bound)),
        ("b", b),
    ]
}

/// Overwrites every parameter value from `tensors`, which must cover the
/// store exactly with matching shapes.
pub(crate) fn load_values<'a>(
    store: &mut ParamStore,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor)>,
    what: &str,
) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        let id = store.find(name).ok_or_else(|| Error::Checkpoint {
            offset: 0,
            detail: format!("unexpected {what} tensor `{name}`"),
        })?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Checkpoint {
                offset: 0,
                detail: format!(
                    "{what} tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = t.clone();
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &store.iter().nth(i).expect("index in range").name;
        return Err(Error::Checkpoint {
            offset: 0,
            detail: format!("missing {what} tensor `{name}`"),
        });
    }
    Ok(())
}

/// `gamma · Σ_j softmax(s)_j · layers[j]` on the tape.
pub fn mix_layers(tape: &mut Tape<'_>, layers: &[Tensor], s: Var, gamma: Var) -> Result<Var> {
    let Some(first) = layers.first() else {
        return Err(Error::shape("mix_layers", "no layers to mix"));
    };
    if tape.value(s).len() != layers.len() {
        return Err(Error::shape(
            "mix_layers",
            format!("{} mixing scalars for {} layers", tape.value(s).len(), layers.len()),
        ));
    }
    let shape = first.shape().to_vec();
    if let Some(bad) = layers.iter().find(|l| l.shape() != shape.as_slice()) {
        return Err(Error::shape(
            "mix_layers",
            format!("layer shape {:?} differs from {:?}", bad.shape(), shape),
        ));
    }
    let n = first.len();
    let mut stacked = Vec::with_capacity(n * layers.len());
    for l in layers {
        stacked.extend_from_slice(l.data());
    }
    let stacked = tape.constant(Tensor::new(&[layers.len(), n], stacked)?);
    let weights = tape.softmax(s);
    let row = tape.reshape(weights, &[1, layers.len()])?;
    let mixed = tape.matmul(row, stacked)?;
    let mixed = tape.reshape(mixed, &shape)?;
    tape.scale_by(mixed, gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLmTraining {
    pub bilm: BiLm,
    /// Corpus perplexity after each epoch.
    pub perplexities: Vec<f64>,
}

/// Trains a biLM from scratch. Sentences should already have long tokens
/// normalized; the vocabulary is built from them with `config.min_count`.
pub fn train_bilm(
    sentences: &[Vec<String>],
    config: BiLmConfig,
    epochs: usize,
    seed: u64,
) -> Result<BiLmTraining> {
    let corpus: Vec<&Vec<String>> = sentences.iter().filter(|s| !s.is_empty()).collect();
    if corpus.is_empty() {
        return Err(Error::Data("cannot train a language model on an empty corpus".into()));
    }
    config.validate()?;
    let tagged: Vec<TaggedSentence> = corpus
        .iter()
        .map(|s| {
            let words: Vec<&str> = s.iter().map(|w| normalize_token(w, config.max_token_len)).collect();
            TaggedSentence::from_words(&words, vec![0; words.len()], "lm")
        })
        .collect();
    let vocab = build_vocabulary_with(&tagged, &[], &[], config.min_count);
    let mut bilm = BiLm::new(config, vocab, seed)?;
    let adam = AdamConfig {
        learning_rate: bilm.config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&bilm.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let owned: Vec<Vec<String>> = corpus.iter().map(|s| (*s).clone()).collect();
    let mut perplexities = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(bilm.config.batch_size) {
            bilm.params.zero_grad();
            let grads = {
                let mut tape = Tape::with_params(&bilm.params);
                let mut total = None;
                let mut count = 0;
                for &i in batch {
                    let tokens: Vec<&str> = corpus[i].iter().map(String::as_str).collect();
                    let (v, n) = bilm.sentence_nll(&mut tape, &tokens)?;
                    count += n;
                    total = Some(match total {
                        None => v,
                        Some(acc) => tape.add(acc, v)?,
                    });
                }
                let loss = tape.scale(total.expect("non-empty batch"), 1.0 / count as f64);
                if !tape.value(loss).is_finite() {
                    return Err(Error::NonFinite("language model loss".into()));
                }
                tape.backward(loss, None)?
            };
            grads.accumulate_into(&mut bilm.params);
            clip_gradients(&mut bilm.params, bilm.config.clip_norm);
            adam_step(&mut bilm.params, &mut state, &adam)?;
        }
        perplexities.push(bilm.perplexity(&owned)?);
    }
    Ok(BiLmTraining { bilm, perplexities })
}
