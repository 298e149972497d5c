//! The tagger: word, character and contextual token features, a stacked
//! bidirectional LSTM encoder, a linear emission layer and a CRF head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilm::{char_layout, lstm_init, mix_layers, BiLm};
use crate::corpus::{normalize_token, LabelScheme, TaggedSentence, Vocabulary};
use crate::crf::{nll_on_tape, viterbi, BioMask, CrfParams};
use crate::embeddings::{init_baseline, EmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::{dropout_mask, normal_tensor, uniform_tensor, ParamStore, Parameter, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub use_words: bool,
    /// Frozen pre-trained word vectors instead of a trainable baseline table.
    pub use_pretrained_words: bool,
    pub pretrained_source: Option<String>,
    pub use_char_cnn: bool,
    pub use_contextual: bool,
    pub word_dim: usize,
    pub char_embed_dim: usize,
    pub char_filter_width: usize,
    pub char_filter_count: usize,
    pub char_output_dim: usize,
    pub lstm_layers: usize,
    /// Hidden size per direction.
    pub lstm_hidden: usize,
    /// Dropout rate on the input of each recurrent layer.
    pub dropout: Vec<f64>,
    pub bio_constraints: bool,
    pub max_token_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_words: true,
            use_pretrained_words: false,
            pretrained_source: None,
            use_char_cnn: true,
            use_contextual: true,
            word_dim: 200,
            char_embed_dim: 50,
            char_filter_width: 3,
            char_filter_count: 30,
            char_output_dim: 30,
            lstm_layers: 2,
            lstm_hidden: 250,
            dropout: vec![0.25, 0.25],
            bio_constraints: false,
            max_token_len: crate::corpus::DEFAULT_MAX_TOKEN_CHARS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_words || self.use_char_cnn || self.use_contextual) {
            return Err(Error::Config("at least one token feature source must be enabled".into()));
        }
        let positive = [
            ("word_dim", self.word_dim),
            ("char_embed_dim", self.char_embed_dim),
            ("char_filter_width", self.char_filter_width),
            ("char_filter_count", self.char_filter_count),
            ("char_output_dim", self.char_output_dim),
            ("lstm_layers", self.lstm_layers),
            ("lstm_hidden", self.lstm_hidden),
            ("max_token_len", self.max_token_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.dropout.len() != self.lstm_layers {
            return Err(Error::Config(format!(
                "{} dropout rates for {} recurrent layers",
                self.dropout.len(),
                self.lstm_layers
            )));
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if self.use_pretrained_words && !self.use_words {
            return Err(Error::Config("pre-trained words requested with word features disabled".into()));
        }
        Ok(())
    }
}

/// A sentence turned into model inputs once, so that frozen contextual
/// layers are computed a single time.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSentence {
    pub word_ids: Vec<usize>,
    /// Long-token normalized texts.
    pub texts: Vec<String>,
    /// `L + 1` layers of `T × width` when contextual features are on.
    pub context: Option<Vec<Tensor>>,
    /// Gold tags; empty when unknown.
    pub tags: Vec<usize>,
}

impl PreparedSentence {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub scheme: LabelScheme,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub bilm: Option<Arc<BiLm>>,
}

/// Serializable description of a model without its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub labels: LabelScheme,
    pub vocab: Vocabulary,
}

impl Model {
    /// Builds a freshly initialized model. Without `word_table` a trainable
    /// baseline table is drawn; `bilm` is required for contextual features.
    pub fn new(
        config: ModelConfig,
        scheme: LabelScheme,
        vocab: Vocabulary,
        word_table: Option<EmbeddingTable>,
        bilm: Option<Arc<BiLm>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let bilm = if config.use_contextual {
            Some(bilm.ok_or_else(|| {
                Error::Config("contextual features need a trained language model".into())
            })?)
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        if config.use_words {
            let table = match word_table {
                Some(t) => t,
                None if config.use_pretrained_words => {
                    return Err(Error::Config("pre-trained word vectors were not supplied".into()))
                }
                None => init_baseline(&vocab, config.word_dim, seed)?,
            };
            if table.matrix.shape() != [vocab.len(), config.word_dim] {
                return Err(Error::Config(format!(
                    "word table {:?} does not match vocabulary {} × word_dim {}",
                    table.matrix.shape(),
                    vocab.len(),
                    config.word_dim
                )));
            }
            p.add(table.into_parameter("word.embed"))?;
        }
        if config.use_char_cnn {
            let (e, w, n, o) = (
                config.char_embed_dim,
                config.char_filter_width,
                config.char_filter_count,
                config.char_output_dim,
            );
            let mut chars = normal_tensor(&mut rng, &[vocab.num_chars(), e], 1.0 / (e as f64).sqrt());
            chars.row_mut(Vocabulary::PAD_CHAR).fill(0.0);
            p.add(Parameter::new("char.embed", chars, true).with_pinned_rows(vec![Vocabulary::PAD_CHAR]))?;
            let b = 1.0 / ((w * e) as f64).sqrt();
            p.add(Parameter::new("char.conv.w", uniform_tensor(&mut rng, &[n, w * e], b), true))?;
            p.add(Parameter::new("char.conv.b", Tensor::zeros(&[n]), true))?;
            let b = 1.0 / (n as f64).sqrt();
            p.add(Parameter::new("char.proj.w", uniform_tensor(&mut rng, &[o, n], b), true))?;
            p.add(Parameter::new("char.proj.b", Tensor::zeros(&[o]), true))?;
        }
        if let Some(lm) = &bilm {
            p.add(Parameter::new("mix.s", Tensor::zeros(&[lm.num_layers() + 1]), true))?;
            p.add(Parameter::new("mix.gamma", Tensor::scalar(1.0), true))?;
        }
        let h = config.lstm_hidden;
        let mut input = feature_dim(&config, bilm.as_deref());
        for l in 0..config.lstm_layers {
            for dir in ["fwd", "bwd"] {
                for (name, t) in lstm_init(&mut rng, input, h) {
                    p.add(Parameter::new(format!("lstm{l}.{dir}.{name}"), t, true))?;
                }
            }
            input = 2 * h;
        }
        let k = scheme.num_tags();
        let b = 1.0 / ((2 * h) as f64).sqrt();
        p.add(Parameter::new("emit.w", uniform_tensor(&mut rng, &[k, 2 * h], b), true))?;
        p.add(Parameter::new("emit.b", Tensor::zeros(&[k]), true))?;
        let crf = CrfParams::zeros(k);
        p.add(Parameter::new("crf.transitions", crf.transitions, true))?;
        p.add(Parameter::new("crf.start", crf.start, true))?;
        p.add(Parameter::new("crf.stop", crf.stop, true))?;
        Ok(Model {
            config,
            scheme,
            vocab,
            params: p,
            bilm,
        })
    }

    /// Width of the concatenated token features.
    pub fn feature_dim(&self) -> usize {
        feature_dim(&self.config, self.bilm.as_deref())
    }

    pub fn num_tags(&self) -> usize {
        self.scheme.num_tags()
    }

    fn var(&self, tape: &mut Tape<'_>, name: &str) -> Result<Var> {
        Ok(tape.param(self.params.id(name)?))
    }

    pub fn prepare_tokens(&self, tokens: &[&str]) -> Result<PreparedSentence> {
        let texts: Vec<String> = tokens
            .iter()
            .map(|t| normalize_token(t, self.config.max_token_len).to_string())
            .collect();
        let word_ids = texts.iter().map(|t| self.vocab.word_id(t)).collect();
        let context = match &self.bilm {
            Some(lm) => {
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                Some(lm.contextualize(&refs)?)
            }
            None => None,
        };
        Ok(PreparedSentence {
            word_ids,
            texts,
            context,
            tags: Vec::new(),
        })
    }

    pub fn prepare(&self, sentence: &TaggedSentence) -> Result<PreparedSentence> {
        if sentence.tags.len() != sentence.tokens.len() {
            return Err(Error::Data(format!(
                "{} tokens but {} tags",
                sentence.tokens.len(),
                sentence.tags.len()
            )));
        }
        if let Some(&bad) = sentence.tags.iter().find(|&&t| t >= self.num_tags()) {
            return Err(Error::Data(format!("tag id {bad} outside the label scheme")));
        }
        let tokens: Vec<&str> = sentence.words().collect();
        let mut p = self.prepare_tokens(&tokens)?;
        p.tags = sentence.tags.clone();
        Ok(p)
    }

    pub fn prepare_all(&self, sentences: &[TaggedSentence]) -> Result<Vec<PreparedSentence>> {
        sentences.iter().map(|s| self.prepare(s)).collect()
    }

    /// Character features, `texts.len() × char_output_dim`. Each token is
    /// padded with `width / 2` padding characters per side, convolved,
    /// max-pooled over time and projected; empty texts give zero rows.
    pub fn encode_chars(&self, tape: &mut Tape<'_>, texts: &[&str]) -> Result<Var> {
        let c = &self.config;
        let (ids, segments) = char_layout(&self.vocab, texts, c.char_filter_width / 2, c.max_token_len);
        let table = self.var(tape, "char.embed")?;
        let embedded = tape.embedding(table, &ids)?;
        let f = self.var(tape, "char.conv.w")?;
        let fb = self.var(tape, "char.conv.b")?;
        let pooled = tape.conv_maxpool(embedded, f, fb, &segments, c.char_filter_width)?;
        let w = self.var(tape, "char.proj.w")?;
        let b = self.var(tape, "char.proj.b")?;
        let projected = tape.linear(pooled, w, Some(b))?;
        if texts.iter().all(|t| !t.is_empty()) {
            return Ok(projected);
        }
        let mut keep = Tensor::zeros(&[texts.len(), c.char_output_dim]);
        for (i, t) in texts.iter().enumerate() {
            if !t.is_empty() {
                keep.row_mut(i).fill(1.0);
            }
        }
        let keep = tape.constant(keep);
        tape.mul(projected, keep)
    }

    /// Token features padded to `rows`: word, character and contextual
    /// parts side by side, in that order.
    pub fn embed_tokens(&self, tape: &mut Tape<'_>, s: &PreparedSentence, rows: usize) -> Result<Var> {
        if rows < s.len() {
            return Err(Error::shape("embed_tokens", format!("{} tokens in {rows} rows", s.len())));
        }
        let mut parts = Vec::new();
        if self.config.use_words {
            let mut ids = s.word_ids.clone();
            ids.resize(rows, Vocabulary::PAD);
            let table = self.var(tape, "word.embed")?;
            parts.push(tape.embedding(table, &ids)?);
        }
        if self.config.use_char_cnn {
            let mut texts: Vec<&str> = s.texts.iter().map(String::as_str).collect();
            texts.resize(rows, "");
            parts.push(self.encode_chars(tape, &texts)?);
        }
        if let Some(lm) = &self.bilm {
            let layers = s.context.as_ref().ok_or_else(|| {
                Error::Config("contextual layers missing from a prepared sentence".into())
            })?;
            if layers.len() != lm.num_layers() + 1 {
                return Err(Error::shape("embed_tokens", "wrong number of contextual layers"));
            }
            let width = lm.config.output_dim();
            let padded: Vec<Tensor> = layers
                .iter()
                .map(|l| {
                    let mut data = l.data().to_vec();
                    data.resize(rows * width, 0.0);
                    Tensor::new(&[rows, width], data)
                })
                .collect::<Result<_>>()?;
            let s_var = self.var(tape, "mix.s")?;
            let gamma = self.var(tape, "mix.gamma")?;
            parts.push(mix_layers(tape, &padded, s_var, gamma)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    /// Stacked bidirectional encoder over `features (rows × D)`; rows where
    /// `valid` is false are skipped by both directions and output zeros.
    /// With `rng`, inverted dropout is applied to each layer's input.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        features: Var,
        valid: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut x = features;
        for l in 0..self.config.lstm_layers {
            if let Some(rng) = rng.as_deref_mut() {
                let rate = self.config.dropout[l];
                if rate > 0.0 {
                    let mask = dropout_mask(rng, tape.value(x).shape(), rate);
                    x = tape.dropout(x, mask)?;
                }
            }
            let mut outs = Vec::with_capacity(2);
            for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                let w_ih = self.var(tape, &format!("lstm{l}.{dir}.w_ih"))?;
                let w_hh = self.var(tape, &format!("lstm{l}.{dir}.w_hh"))?;
                let b = self.var(tape, &format!("lstm{l}.{dir}.b"))?;
                outs.push(tape.lstm_scan(x, w_ih, w_hh, b, valid, reverse)?);
            }
            x = tape.concat_cols(&outs)?;
        }
        Ok(x)
    }

    pub fn emissions(&self, tape: &mut Tape<'_>, encoded: Var) -> Result<Var> {
        let w = self.var(tape, "emit.w")?;
        let b = self.var(tape, "emit.b")?;
        tape.linear(encoded, w, Some(b))
    }

    fn sentence_emissions(
        &self,
        tape: &mut Tape<'_>,
        s: &PreparedSentence,
        rows: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let features = self.embed_tokens(tape, s, rows)?;
        let valid: Vec<bool> = (0..rows).map(|i| i < s.len()).collect();
        let encoded = self.encode(tape, features, &valid, rng)?;
        self.emissions(tape, encoded)
    }

    fn crf_vars(&self, tape: &mut Tape<'_>) -> Result<(Var, Var, Var)> {
        let mut trans = self.var(tape, "crf.transitions")?;
        let mut start = self.var(tape, "crf.start")?;
        let stop = self.var(tape, "crf.stop")?;
        if self.config.bio_constraints {
            let (pt, ps) = BioMask::new(&self.scheme).penalties();
            let pt = tape.constant(pt);
            let ps = tape.constant(ps);
            trans = tape.add(trans, pt)?;
            start = tape.add(start, ps)?;
        }
        Ok((trans, start, stop))
    }

    /// Mean CRF negative log-likelihood of a batch. Sentences are padded to
    /// the longest one and padded positions are masked out. A dropout seed
    /// switches on training mode.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&PreparedSentence],
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let (trans, start, stop) = self.crf_vars(tape)?;
        let mut total: Option<Var> = None;
        for s in batch {
            if s.is_empty() {
                return Err(Error::Data("cannot score an empty sentence".into()));
            }
            if s.tags.len() != s.len() {
                return Err(Error::Data("sentence has no gold tags".into()));
            }
            let em = self.sentence_emissions(tape, s, rows, rng.as_mut())?;
            let nll = nll_on_tape(tape, em, trans, start, stop, &s.tags)?;
            total = Some(match total {
                None => nll,
                Some(acc) => tape.add(acc, nll)?,
            });
        }
        Ok(tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64))
    }

    /// Loss value only.
    pub fn loss(&self, batch: &[&PreparedSentence], dropout_seed: Option<u64>) -> Result<f64> {
        let mut tape = Tape::with_params(&self.params);
        let v = self.loss_on_tape(&mut tape, batch, dropout_seed)?;
        Ok(tape.value(v).item())
    }

    /// Adds the batch-loss gradient into the parameter buffers and returns
    /// the loss.
    pub fn accumulate_gradients(
        &mut self,
        batch: &[&PreparedSentence],
        dropout_seed: Option<u64>,
    ) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = Tape::with_params(&self.params);
            let v = self.loss_on_tape(&mut tape, batch, dropout_seed)?;
            let loss = tape.value(v).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            (loss, tape.backward(v, None)?)
        };
        grads.accumulate_into(&mut self.params);
        Ok(loss)
    }

    /// CRF parameters as used for decoding, constraints included.
    pub fn crf_params(&self) -> Result<CrfParams> {
        let get = |n: &str| -> Result<Tensor> { Ok(self.params.get(self.params.id(n)?).value.clone()) };
        let mut p = CrfParams {
            transitions: get("crf.transitions")?,
            start: get("crf.start")?,
            stop: get("crf.stop")?,
        };
        if self.config.bio_constraints {
            let (pt, ps) = BioMask::new(&self.scheme).penalties();
            p.transitions.add_assign(&pt);
            p.start.add_assign(&ps);
        }
        Ok(p)
    }

    /// Emission scores of one sentence in evaluation mode, `T × K`.
    pub fn sentence_scores(&self, s: &PreparedSentence) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let em = self.sentence_emissions(&mut tape, s, s.len(), None)?;
        Ok(tape.value(em).clone())
    }

    /// Viterbi tags in evaluation mode.
    pub fn predict(&self, s: &PreparedSentence) -> Result<Vec<usize>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        let em = self.sentence_scores(s)?;
        Ok(viterbi(&em, &self.crf_params()?)?.0)
    }

    pub fn predict_all(&self, sentences: &[PreparedSentence]) -> Result<Vec<Vec<usize>>> {
        let crf = self.crf_params()?;
        sentences
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Ok(Vec::new())
                } else {
                    Ok(viterbi(&self.sentence_scores(s)?, &crf)?.0)
                }
            })
            .collect()
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config.clone(),
            labels: self.scheme.clone(),
            vocab: self.vocab.clone(),
        }
    }

    /// Rebuilds a model from its description and parameter values.
    pub fn from_parts<'a>(
        meta: ModelMeta,
        tensors: impl Iterator<Item = (&'a str, &'a Tensor)>,
        bilm: Option<Arc<BiLm>>,
    ) -> Result<Self> {
        let word_table = (meta.config.use_words).then(|| EmbeddingTable {
            matrix: Tensor::zeros(&[meta.vocab.len(), meta.config.word_dim]),
            dim: meta.config.word_dim,
            trainable: !meta.config.use_pretrained_words,
            source_name: "checkpoint".into(),
        });
        let mut model = Model::new(meta.config, meta.labels, meta.vocab, word_table, bilm, 0)?;
        crate::bilm::load_values(&mut model.params, tensors, "model")?;
        Ok(model)
    }
}

fn feature_dim(config: &ModelConfig, bilm: Option<&BiLm>) -> usize {
    let mut d = 0;
    if config.use_words {
        d += config.word_dim;
    }
    if config.use_char_cnn {
        d += config.char_output_dim;
    }
    if config.use_contextual {
        d += bilm.map_or(0, |lm| lm.config.output_dim());
    }
    d
}
