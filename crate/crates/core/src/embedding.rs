//! Skip-gram word embeddings trained with negative sampling.
//!
//! Each center token's input vector is trained to score its observed
//! context tokens' output vectors high and sampled negatives low:
//!
//! ```text
//! loss = -ln σ(u_ctx · v_c) - Σ_k ln σ(-u_k · v_c)
//! ```
//!
//! Negatives are drawn from the unigram distribution raised to 0.75.
//! Training has two modes. Deterministic mode is single-threaded and
//! bit-reproducible for a given seed. Parallel mode splits each batch of
//! sentences across workers that train against a shared snapshot and merge
//! their deltas afterwards; its result depends on the job count and differs
//! from the deterministic result.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::scalar::{dot, is_finite_slice, norm, Scalar};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("invalid embedding config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of {len}")]
    InvalidId { id: usize, len: usize },
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("entities missing from the embedding model: {}", .0.join(", "))]
    MissingEntities(Vec<String>),
    #[error("embedding file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    /// Context half-width in tokens.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Worker count for parallel mode; ignored when `deterministic`.
    pub jobs: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
            deterministic: true,
            jobs: 1,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let fail = |m: &str| Err(EmbeddingError::Config(m.to_string()));
        if self.dim == 0 {
            return fail("dim must be at least 1");
        }
        if self.window == 0 {
            return fail("window must be at least 1");
        }
        if self.negatives == 0 {
            return fail("negatives must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Input vectors for every trained token, plus the output vectors when the
/// model came straight from training.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel<T> {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<T>,
    output: Option<Array2<T>>,
}

impl<T: Scalar> EmbeddingModel<T> {
    pub fn new(tokens: Vec<String>, vectors: Array2<T>) -> Self {
        assert_eq!(tokens.len(), vectors.nrows(), "one row per token");
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            vectors,
            output: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Array2<T> {
        &self.vectors
    }

    pub fn output_vectors(&self) -> Option<&Array2<T>> {
        self.output.as_ref()
    }

    pub fn vector(&self, token: &str) -> Option<&[T]> {
        self.index
            .get(token)
            .map(|&i| self.vectors.row(i).to_slice().expect("standard layout"))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Gathers the vectors of `entities` in order into an `n × dim` matrix.
    pub fn matrix_for<S: AsRef<str>>(&self, entities: &[S]) -> Result<Array2<T>, EmbeddingError> {
        let missing: Vec<String> = entities
            .iter()
            .filter(|e| !self.contains(e.as_ref()))
            .map(|e| e.as_ref().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(EmbeddingError::MissingEntities(missing));
        }
        let mut out = Array2::zeros((entities.len(), self.dim()));
        for (i, e) in entities.iter().enumerate() {
            let row = self.index[e.as_ref()];
            out.row_mut(i).assign(&self.vectors.row(row));
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|x| x.is_finite())
    }
}

/// Stable `-ln σ(x)`.
fn neg_log_sigmoid<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Parameters touched by one skip-gram pair.
pub struct SkipGramParams<'a, T> {
    pub input: &'a Array2<T>,
    pub output: &'a Array2<T>,
}

/// Loss and gradients of one positive pair and its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients<T> {
    pub loss: T,
    /// Gradient with respect to the center's input vector.
    pub center: Vec<T>,
    /// Gradients with respect to output vectors, one entry per distinct id,
    /// context first then negatives in first-seen order.
    pub outputs: Vec<(usize, Vec<T>)>,
}

/// Evaluates the negative-sampling objective for `(center, context)` with
/// the given negatives and returns its gradients without updating anything.
pub fn skipgram_step<T: Scalar>(
    center: usize,
    context: usize,
    negative_ids: &[usize],
    params: &SkipGramParams<'_, T>,
) -> Result<StepGradients<T>, EmbeddingError> {
    let rows = params.input.nrows();
    for &id in std::iter::once(&center)
        .chain(std::iter::once(&context))
        .chain(negative_ids)
    {
        if id >= rows || id >= params.output.nrows() {
            return Err(EmbeddingError::InvalidId { id, len: rows });
        }
    }
    let dim = params.input.ncols();
    let v_c = params.input.row(center);
    let v_c = v_c.as_slice().expect("standard layout");
    let mut loss = T::zero();
    let mut d_center = vec![T::zero(); dim];
    let mut outputs: Vec<(usize, Vec<T>)> = Vec::new();
    let targets = std::iter::once((context, true)).chain(negative_ids.iter().map(|&n| (n, false)));
    for (target, positive) in targets {
        let u = params.output.row(target);
        let u = u.as_slice().expect("standard layout");
        let f = dot(v_c, u);
        let (term, g) = if positive {
            (neg_log_sigmoid(f), sigmoid(f) - T::one())
        } else {
            (neg_log_sigmoid(-f), sigmoid(f))
        };
        loss += term;
        for (d, &x) in d_center.iter_mut().zip(u) {
            *d += g * x;
        }
        let slot = match outputs.iter().position(|(id, _)| *id == target) {
            Some(p) => p,
            None => {
                outputs.push((target, vec![T::zero(); dim]));
                outputs.len() - 1
            }
        };
        for (d, &x) in outputs[slot].1.iter_mut().zip(v_c) {
            *d += g * x;
        }
    }
    Ok(StepGradients {
        loss,
        center: d_center,
        outputs,
    })
}

/// Mutable access to output-vector rows by id.
trait RowStore<T> {
    fn row_slice(&mut self, id: usize) -> &mut [T];
}

impl<T: Scalar> RowStore<T> for Array2<T> {
    fn row_slice(&mut self, id: usize) -> &mut [T] {
        self.row_mut(id).into_slice().expect("standard layout")
    }
}

/// One SGD update in place; `scratch` must have length `dim`. Returns the
/// pair's loss before the update.
fn sgd_pair<T: Scalar, S: RowStore<T>>(
    v_c: &mut [T],
    outputs: &mut S,
    context: usize,
    negatives: &[usize],
    lr: T,
    scratch: &mut [T],
) -> T {
    scratch.iter_mut().for_each(|x| *x = T::zero());
    let mut loss = T::zero();
    let targets = std::iter::once((context, true)).chain(negatives.iter().map(|&n| (n, false)));
    for (target, positive) in targets {
        let u = outputs.row_slice(target);
        let f = dot(v_c, u);
        let (term, g) = if positive {
            (neg_log_sigmoid(f), sigmoid(f) - T::one())
        } else {
            (neg_log_sigmoid(-f), sigmoid(f))
        };
        loss += term;
        for ((s, u), &v) in scratch.iter_mut().zip(u.iter_mut()).zip(v_c.iter()) {
            *s += g * *u;
            *u -= lr * g * v;
        }
    }
    for (v, &g) in v_c.iter_mut().zip(scratch.iter()) {
        *v -= lr * g;
    }
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean pair loss per epoch; the first entry is the initial loss.
    pub epoch_losses: Vec<f64>,
    pub pairs_per_epoch: usize,
    /// Vocabulary tokens with zero corpus count, which receive no vector.
    pub excluded: Vec<String>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

struct NegativeSampler {
    dist: WeightedIndex<f64>,
}

impl NegativeSampler {
    fn new(counts: &[u64]) -> Self {
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
        Self {
            dist: WeightedIndex::new(weights).expect("positive counts"),
        }
    }

    fn fill<R: Rng>(&self, rng: &mut R, context: usize, out: &mut Vec<usize>, k: usize) {
        out.clear();
        for _ in 0..k {
            let s = self.dist.sample(rng);
            if s != context {
                out.push(s);
            }
        }
    }
}

fn learning_rate(base: f64, processed: usize, total: usize) -> f64 {
    let frac = processed as f64 / total.max(1) as f64;
    base * (1.0 - frac).max(1e-4)
}

/// Trains embeddings for every vocabulary token with a non-zero count.
/// `sentences` are id-encoded token streams.
pub fn train<T: Scalar>(
    sentences: &[Vec<usize>],
    vocabulary: &Vocabulary,
    config: &EmbeddingConfig,
) -> Result<(EmbeddingModel<T>, TrainReport), EmbeddingError> {
    config.validate()?;
    let v = vocabulary.observed_len();
    for &id in sentences.iter().flatten() {
        if id >= v {
            return Err(EmbeddingError::InvalidId { id, len: v });
        }
    }
    let pairs_per_epoch: usize = sentences
        .iter()
        .map(|s| {
            let n = s.len();
            (0..n)
                .map(|i| i.min(config.window) + (n - 1 - i).min(config.window))
                .sum::<usize>()
        })
        .sum();
    if v == 0 || pairs_per_epoch == 0 {
        return Err(EmbeddingError::EmptyCorpus);
    }

    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = 0.5 / dim as f64;
    let mut input = Array2::from_shape_simple_fn((v, dim), || T::lit(rng.random_range(-half..half)));
    let mut output = Array2::<T>::zeros((v, dim));
    let sampler = NegativeSampler::new(&vocabulary.counts()[..v]);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let total = pairs_per_epoch * config.epochs;
    let mut processed = 0usize;
    let parallel = !config.deterministic && config.jobs > 1;
    for epoch in 0..config.epochs {
        let loss = if parallel {
            train_epoch_parallel(
                sentences, &mut input, &mut output, &sampler, config, epoch, &mut processed, total,
            )
        } else {
            train_epoch_sequential(
                sentences, &mut input, &mut output, &sampler, config, &mut rng, &mut processed,
                total,
            )
        };
        let mean = loss / pairs_per_epoch as f64;
        log::debug!("epoch {epoch}: mean pair loss {mean:.6}");
        epoch_losses.push(mean);
    }

    let tokens = vocabulary.tokens()[..v].to_vec();
    let excluded = vocabulary.tokens()[v..].to_vec();
    let mut model = EmbeddingModel::new(tokens, input);
    model.output = Some(output);
    Ok((
        model,
        TrainReport {
            epoch_losses,
            pairs_per_epoch,
            excluded,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn train_epoch_sequential<T: Scalar>(
    sentences: &[Vec<usize>],
    input: &mut Array2<T>,
    output: &mut Array2<T>,
    sampler: &NegativeSampler,
    config: &EmbeddingConfig,
    rng: &mut ChaCha8Rng,
    processed: &mut usize,
    total: usize,
) -> f64 {
    let dim = config.dim;
    let mut scratch = vec![T::zero(); dim];
    let mut negatives = Vec::with_capacity(config.negatives);
    let mut loss_sum = 0.0;
    for sentence in sentences {
        for (pos, &center) in sentence.iter().enumerate() {
            let lo = pos.saturating_sub(config.window);
            let hi = (pos + config.window + 1).min(sentence.len());
            for (cpos, &context) in sentence.iter().enumerate().take(hi).skip(lo) {
                if cpos == pos {
                    continue;
                }
                let lr = T::lit(learning_rate(config.learning_rate, *processed, total));
                sampler.fill(rng, context, &mut negatives, config.negatives);
                let v_c = input.row_mut(center).into_slice().expect("standard layout");
                loss_sum += sgd_pair(v_c, output, context, &negatives, lr, &mut scratch)
                    .to_f64_lossy();
                *processed += 1;
            }
        }
    }
    loss_sum
}

const PARALLEL_BATCH_SENTENCES: usize = 64;

/// Rows copied from the batch snapshot on first touch. Each entry keeps the
/// snapshot value next to the worker's current value so the delta can be
/// merged back.
struct Overlay<'a, T> {
    base: &'a Array2<T>,
    rows: HashMap<usize, (Vec<T>, Vec<T>)>,
}

impl<'a, T: Scalar> Overlay<'a, T> {
    fn new(base: &'a Array2<T>) -> Self {
        Self {
            base,
            rows: HashMap::new(),
        }
    }

}

/// Adds `current - snapshot` for every touched row into `target`, in
/// ascending row order. Rows touched by several workers accumulate all of
/// their deltas.
fn merge_rows<T: Scalar>(target: &mut Array2<T>, rows: &HashMap<usize, (Vec<T>, Vec<T>)>) {
    let mut ids: Vec<usize> = rows.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        let (orig, cur) = &rows[&id];
        for ((t, &o), &c) in target.row_mut(id).iter_mut().zip(orig).zip(cur) {
            *t += c - o;
        }
    }
}

impl<T: Scalar> RowStore<T> for Overlay<'_, T> {
    fn row_slice(&mut self, id: usize) -> &mut [T] {
        let base = self.base;
        &mut self
            .rows
            .entry(id)
            .or_insert_with(|| {
                let r = base.row(id).to_vec();
                (r.clone(), r)
            })
            .1
    }
}

#[allow(clippy::too_many_arguments)]
fn train_epoch_parallel<T: Scalar>(
    sentences: &[Vec<usize>],
    input: &mut Array2<T>,
    output: &mut Array2<T>,
    sampler: &NegativeSampler,
    config: &EmbeddingConfig,
    epoch: usize,
    processed: &mut usize,
    total: usize,
) -> f64 {
    let jobs = config.jobs.max(1);
    let batch = PARALLEL_BATCH_SENTENCES * jobs;
    let mut loss_sum = 0.0;
    for (batch_idx, chunk) in sentences.chunks(batch).enumerate() {
        let shard_len = chunk.len().div_ceil(jobs);
        let start = *processed;
        let snapshot_in = &*input;
        let snapshot_out = &*output;
        let results: Vec<_> = chunk
            .par_chunks(shard_len.max(1))
            .enumerate()
            .map(|(shard, shard_sentences)| {
                let seed = config
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((epoch as u64) << 40) ^ ((batch_idx as u64) << 8) ^ shard as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut ins = Overlay::new(snapshot_in);
                let mut outs = Overlay::new(snapshot_out);
                let mut scratch = vec![T::zero(); config.dim];
                let mut negatives = Vec::with_capacity(config.negatives);
                let mut loss = 0.0;
                let mut count = 0usize;
                for sentence in shard_sentences {
                    for (pos, &center) in sentence.iter().enumerate() {
                        let lo = pos.saturating_sub(config.window);
                        let hi = (pos + config.window + 1).min(sentence.len());
                        for (cpos, &context) in sentence.iter().enumerate().take(hi).skip(lo) {
                            if cpos == pos {
                                continue;
                            }
                            let lr = T::lit(learning_rate(config.learning_rate, start + count, total));
                            sampler.fill(&mut rng, context, &mut negatives, config.negatives);
                            let v_c = ins.row_slice(center);
                            loss += sgd_pair(v_c, &mut outs, context, &negatives, lr, &mut scratch)
                                .to_f64_lossy();
                            count += 1;
                        }
                    }
                }
                (ins.rows, outs.rows, loss, count)
            })
            .collect();
        for (ins, outs, loss, count) in results {
            merge_rows(input, &ins);
            merge_rows(output, &outs);
            loss_sum += loss;
            *processed += count;
        }
    }
    loss_sum
}

// ---------------------------------------------------------------------------
// Similarity

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T, EmbeddingError> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == T::zero() || nv == T::zero() || !is_finite_slice(u) || !is_finite_slice(v) {
        return Err(EmbeddingError::ZeroVector);
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Pairwise cosine similarities of the rows of `vectors`, unit diagonal.
/// Each unordered pair is computed once so the result is exactly symmetric.
pub fn similarity_from_vectors<T: Scalar>(vectors: &Array2<T>) -> Result<Array2<T>, EmbeddingError> {
    let n = vectors.nrows();
    let normalized = normalize_rows(vectors)?;
    let mut s = Array2::<T>::zeros((n, n));
    for i in 0..n {
        s[[i, i]] = T::one();
        let ri = normalized.row(i);
        let ri = ri.as_slice().expect("standard layout");
        for j in (i + 1)..n {
            let rj = normalized.row(j);
            let c = dot(ri, rj.as_slice().expect("standard layout"))
                .max(-T::one())
                .min(T::one());
            s[[i, j]] = c;
            s[[j, i]] = c;
        }
    }
    Ok(s)
}

/// Similarity matrix for `entities` in the given order.
pub fn similarity_matrix<T: Scalar, S: AsRef<str>>(
    entities: &[S],
    model: &EmbeddingModel<T>,
) -> Result<Array2<T>, EmbeddingError> {
    similarity_from_vectors(&model.matrix_for(entities)?)
}

/// Scales each row to unit length; a zero row is an error.
pub fn normalize_rows<T: Scalar>(vectors: &Array2<T>) -> Result<Array2<T>, EmbeddingError> {
    let mut out = vectors.clone();
    for mut row in out.rows_mut() {
        let n = norm(row.as_slice().expect("standard layout"));
        if n == T::zero() || !n.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Text format

/// Encodes a token for the whitespace-separated text format: `\` becomes
/// `\\`, `_` becomes `\_`, and spaces become `_`.
pub fn encode_token(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '_' => out.push_str("\\_"),
            ' ' => out.push('_'),
            c => out.push(c),
        }
    }
    out
}

pub fn decode_token(encoded: &str) -> String {
    let mut out = String::with_capacity(encoded.len());
    let mut chars = encoded.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(next) => out.push(next),
                None => out.push('\\'),
            },
            '_' => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

/// Writes `V dim` then one `token v1 … vdim` line per token.
pub fn write_text<T: Scalar, W: Write>(model: &EmbeddingModel<T>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{} {}", model.len(), model.dim())?;
    for (token, row) in model.tokens.iter().zip(model.vectors.rows()) {
        write!(w, "{}", encode_token(token))?;
        for x in row {
            write!(w, " {x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_text<T: Scalar, R: BufRead>(r: R) -> Result<EmbeddingModel<T>, EmbeddingError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(EmbeddingError::Parse {
        line: 1,
        message: "missing header".into(),
    })??;
    let parse_usize = |s: Option<&str>, what: &str| {
        s.and_then(|x| x.parse::<usize>().ok())
            .ok_or_else(|| EmbeddingError::Parse {
                line: 1,
                message: format!("bad {what} in header"),
            })
    };
    let mut parts = header.split_whitespace();
    let v = parse_usize(parts.next(), "vocabulary size")?;
    let dim = parse_usize(parts.next(), "dimension")?;
    let mut tokens = Vec::with_capacity(v);
    let mut data = Vec::with_capacity(v * dim);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        let before = data.len();
        for f in fields {
            let x = f.parse::<T>().map_err(|_| EmbeddingError::Parse {
                line: line_no,
                message: format!("bad float `{f}`"),
            })?;
            data.push(x);
        }
        if data.len() - before != dim {
            return Err(EmbeddingError::Parse {
                line: line_no,
                message: format!("expected {dim} values, found {}", data.len() - before),
            });
        }
        tokens.push(decode_token(token));
    }
    if tokens.len() != v {
        return Err(EmbeddingError::Parse {
            line: tokens.len() + 1,
            message: format!("header declares {v} tokens, found {}", tokens.len()),
        });
    }
    let vectors = Array2::from_shape_vec((v, dim), data).expect("shape checked");
    Ok(EmbeddingModel::new(tokens, vectors))
}
