//! Linear-chain CRF over per-token emission scores.
//!
//! Emissions are a `T × K` tensor (token by tag). The structured potentials
//! are a `K × K` transition table, where entry `(i, j)` scores tag `j`
//! following tag `i`, plus start and stop scores for the first and last tag.

use serde::{Deserialize, Serialize};

use crate::corpus::LabelScheme;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, CustomOp, Tape, Tensor, Var};

/// Score given to forbidden transitions under BIO masking.
pub const FORBIDDEN: f64 = -1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub transitions: Tensor,
    pub start: Tensor,
    pub stop: Tensor,
}

impl CrfParams {
    pub fn zeros(num_tags: usize) -> Self {
        CrfParams {
            transitions: Tensor::zeros(&[num_tags, num_tags]),
            start: Tensor::zeros(&[num_tags]),
            stop: Tensor::zeros(&[num_tags]),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    fn check(&self, emissions: &Tensor) -> Result<(usize, usize)> {
        let k = self.num_tags();
        if self.transitions.shape() != [k, k] || self.stop.len() != k {
            return Err(Error::shape(
                "crf",
                format!(
                    "transitions {:?}, start {:?}, stop {:?}",
                    self.transitions.shape(),
                    self.start.shape(),
                    self.stop.shape()
                ),
            ));
        }
        if emissions.ndim() != 2 || emissions.cols() != k {
            return Err(Error::shape(
                "crf",
                format!("emissions {:?} for {k} tags", emissions.shape()),
            ));
        }
        if emissions.rows() == 0 {
            return Err(Error::Data("CRF needs at least one token".into()));
        }
        Ok((emissions.rows(), k))
    }

    /// Copy with BIO-invalid transitions and start tags set to [`FORBIDDEN`].
    pub fn masked(&self, mask: &BioMask) -> CrfParams {
        let mut out = self.clone();
        for (v, &allowed) in out.transitions.data_mut().iter_mut().zip(&mask.transitions) {
            if !allowed {
                *v = FORBIDDEN;
            }
        }
        for (v, &allowed) in out.start.data_mut().iter_mut().zip(&mask.start) {
            if !allowed {
                *v = FORBIDDEN;
            }
        }
        out
    }
}

/// Which transitions a BIO tag sequence may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioMask {
    /// Row-major `K × K`; `transitions[i * K + j]` allows `j` after `i`.
    pub transitions: Vec<bool>,
    pub start: Vec<bool>,
}

impl BioMask {
    pub fn new(scheme: &LabelScheme) -> Self {
        let k = scheme.num_tags();
        let mut transitions = vec![true; k * k];
        let mut start = vec![true; k];
        for next in 0..k {
            let Some(label) = scheme.inside_label(next) else { continue };
            start[next] = false;
            for prev in 0..k {
                if scheme.label_of(prev) != Some(label) {
                    transitions[prev * k + next] = false;
                }
            }
        }
        BioMask { transitions, start }
    }

    pub fn allows(&self, prev: usize, next: usize) -> bool {
        self.transitions[prev * self.start.len() + next]
    }

    /// Additive penalties: `(K × K transitions, K start)`.
    pub fn penalties(&self) -> (Tensor, Tensor) {
        let k = self.start.len();
        let f = |ok: &bool| if *ok { 0.0 } else { FORBIDDEN };
        (
            Tensor::new(&[k, k], self.transitions.iter().map(f).collect()).expect("k×k"),
            Tensor::vector(self.start.iter().map(f).collect()),
        )
    }
}

/// `start[y₁] + Σ emissions[t, yₜ] + Σ transitions[yₜ₋₁, yₜ] + stop[y_T]`.
pub fn score_sequence(emissions: &Tensor, tags: &[usize], params: &CrfParams) -> Result<f64> {
    let (t_len, k) = params.check(emissions)?;
    if tags.len() != t_len {
        return Err(Error::Data(format!(
            "{} tags for {t_len} emission rows",
            tags.len()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("tag id {bad} out of range for {k} tags")));
    }
    let tr = &params.transitions;
    // association mirrors the forward recursion so single-path sums agree bitwise
    let mut score = params.start.data()[tags[0]] + emissions.at(0, tags[0]);
    for t in 1..t_len {
        score = emissions.at(t, tags[t]) + (score + tr.at(tags[t - 1], tags[t]));
    }
    Ok(score + params.stop.data()[tags[t_len - 1]])
}

fn forward_table(emissions: &Tensor, params: &CrfParams, t_len: usize, k: usize) -> Vec<f64> {
    let tr = &params.transitions;
    let mut alpha = vec![0.0; t_len * k];
    for j in 0..k {
        alpha[j] = params.start.data()[j] + emissions.at(0, j);
    }
    let mut scratch = vec![0.0; k];
    for t in 1..t_len {
        for j in 0..k {
            for i in 0..k {
                scratch[i] = alpha[(t - 1) * k + i] + tr.at(i, j);
            }
            alpha[t * k + j] = emissions.at(t, j) + log_sum_exp(&scratch);
        }
    }
    alpha
}

fn final_scores(alpha: &[f64], params: &CrfParams, t_len: usize, k: usize) -> Vec<f64> {
    (0..k)
        .map(|j| alpha[(t_len - 1) * k + j] + params.stop.data()[j])
        .collect()
}

/// Log of the sum of exponentiated scores over all `K^T` tag sequences.
pub fn log_partition(emissions: &Tensor, params: &CrfParams) -> Result<f64> {
    let (t_len, k) = params.check(emissions)?;
    let alpha = forward_table(emissions, params, t_len, k);
    Ok(log_sum_exp(&final_scores(&alpha, params, t_len, k)))
}

/// Negative log-likelihood of `tags`; non-negative by construction.
pub fn nll(emissions: &Tensor, tags: &[usize], params: &CrfParams) -> Result<f64> {
    let gold = score_sequence(emissions, tags, params)?;
    Ok(log_partition(emissions, params)? - gold)
}

/// Posterior quantities from the forward-backward recursions.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub log_partition: f64,
    /// `T × K` probabilities of each tag at each position.
    pub unary: Tensor,
    /// `K × K` expected transition counts summed over positions.
    pub pairwise: Tensor,
}

pub fn marginals(emissions: &Tensor, params: &CrfParams) -> Result<Marginals> {
    let (t_len, k) = params.check(emissions)?;
    let tr = &params.transitions;
    let alpha = forward_table(emissions, params, t_len, k);
    let log_z = log_sum_exp(&final_scores(&alpha, params, t_len, k));

    let mut beta = vec![0.0; t_len * k];
    beta[(t_len - 1) * k..].copy_from_slice(params.stop.data());
    let mut scratch = vec![0.0; k];
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                scratch[j] = tr.at(i, j) + emissions.at(t + 1, j) + beta[(t + 1) * k + j];
            }
            beta[t * k + i] = log_sum_exp(&scratch);
        }
    }

    let mut unary = Tensor::zeros(&[t_len, k]);
    for t in 0..t_len {
        for j in 0..k {
            unary.set(t, j, (alpha[t * k + j] + beta[t * k + j] - log_z).exp());
        }
    }
    let mut pairwise = Tensor::zeros(&[k, k]);
    for t in 1..t_len {
        for i in 0..k {
            for j in 0..k {
                let lp = alpha[(t - 1) * k + i] + tr.at(i, j) + emissions.at(t, j)
                    + beta[t * k + j]
                    - log_z;
                let cell = pairwise.at(i, j) + lp.exp();
                pairwise.set(i, j, cell);
            }
        }
    }
    Ok(Marginals {
        log_partition: log_z,
        unary,
        pairwise,
    })
}

/// Highest-scoring tag sequence and its score. Ties prefer the lower tag id,
/// both for the final tag and for each backpointer.
pub fn viterbi(emissions: &Tensor, params: &CrfParams) -> Result<(Vec<usize>, f64)> {
    let (t_len, k) = params.check(emissions)?;
    let tr = &params.transitions;
    let mut delta: Vec<f64> = (0..k)
        .map(|j| params.start.data()[j] + emissions.at(0, j))
        .collect();
    let mut back = vec![0usize; t_len * k];
    for t in 1..t_len {
        let mut next = vec![0.0; k];
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, d) in delta.iter().enumerate() {
                let s = d + tr.at(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = emissions.at(t, j) + best;
            back[t * k + j] = arg;
        }
        delta = next;
    }
    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for j in 0..k {
        let s = delta[j] + params.stop.data()[j];
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut tags = vec![0; t_len];
    tags[t_len - 1] = last;
    for t in (1..t_len).rev() {
        tags[t - 1] = back[t * k + tags[t]];
    }
    let score = score_sequence(emissions, &tags, params)?;
    Ok((tags, score))
}

/// Tape primitive for the CRF negative log-likelihood of one sentence.
///
/// Inputs are emissions (possibly padded beyond `length` rows), transitions,
/// start and stop. Padded rows receive zero gradient.
struct CrfNll {
    tags: Vec<usize>,
    length: usize,
}

impl CrfNll {
    fn params(inputs: &[&Tensor]) -> CrfParams {
        CrfParams {
            transitions: inputs[1].clone(),
            start: inputs[2].clone(),
            stop: inputs[3].clone(),
        }
    }

    fn active(&self, emissions: &Tensor) -> Result<Tensor> {
        let k = emissions.cols();
        Tensor::new(&[self.length, k], emissions.data()[..self.length * k].to_vec())
    }
}

impl CustomOp for CrfNll {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let params = Self::params(inputs);
        let em = self.active(inputs[0])?;
        let m = marginals(&em, &params)?;
        let g = grad.item();
        let k = params.num_tags();
        let mut d_em = Tensor::zeros(inputs[0].shape());
        let mut d_tr = m.pairwise.clone();
        let mut d_start = Tensor::vector(m.unary.row(0).to_vec());
        let mut d_stop = Tensor::vector(m.unary.row(self.length - 1).to_vec());
        for t in 0..self.length {
            d_em.row_mut(t).copy_from_slice(m.unary.row(t));
            let gold = self.tags[t];
            let v = d_em.at(t, gold) - 1.0;
            d_em.set(t, gold, v);
            if t > 0 {
                let prev = self.tags[t - 1];
                let v = d_tr.at(prev, gold) - 1.0;
                d_tr.set(prev, gold, v);
            }
        }
        d_start.data_mut()[self.tags[0]] -= 1.0;
        d_stop.data_mut()[self.tags[self.length - 1]] -= 1.0;
        debug_assert_eq!(d_tr.len(), k * k);
        for t in [&mut d_em, &mut d_tr, &mut d_start, &mut d_stop] {
            t.scale_assign(g);
        }
        Ok(vec![d_em, d_tr, d_start, d_stop])
    }
}

/// Records the CRF negative log-likelihood of `tags` over the first
/// `tags.len()` rows of `emissions`.
pub fn nll_on_tape(
    tape: &mut Tape<'_>,
    emissions: Var,
    transitions: Var,
    start: Var,
    stop: Var,
    tags: &[usize],
) -> Result<Var> {
    let length = tags.len();
    let em = tape.value(emissions);
    if length == 0 || length > em.rows() {
        return Err(Error::shape(
            "crf_nll",
            format!("{length} tags for emissions {:?}", em.shape()),
        ));
    }
    let op = CrfNll {
        tags: tags.to_vec(),
        length,
    };
    let inputs = [emissions, transitions, start, stop];
    let values: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
    let params = CrfNll::params(&values);
    let value = nll(&op.active(values[0])?, tags, &params)?;
    Ok(tape.custom(&inputs, Tensor::scalar(value), Box::new(op)))
}
