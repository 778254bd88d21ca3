//! Training regime: Adam at lr 0.001 with one parameter update per
//! instance, a single epoch by default, trainable embeddings, and the
//! fixed-context / multi-objective-loss variants. Also owns embedding
//! loading and the binary checkpoint format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{predict, ApaNorm, ModelParams, Variant};
use crate::autodiff::{AdError, Tensor};
use crate::baseline::LogRegParams;
use crate::corpus::{CommentOrder, Corpus, Thread, Vocab};
use crate::encoders::LstmParams;
use crate::eval;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at instance {thread_id}")]
    Diverged { thread_id: String },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGrad { param: String },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("embedding file: {0}")]
    Embedding(String),
    #[error("embedding dimension {found} does not match configured {expected}")]
    EmbeddingDim { found: usize, expected: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which model a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hlstm,
    Upa,
    Ppa,
    Apa,
    Logreg,
}

impl ModelKind {
    pub fn neural(&self) -> Option<Variant> {
        match self {
            ModelKind::Hlstm => Some(Variant::Hlstm),
            ModelKind::Upa => Some(Variant::Upa),
            ModelKind::Ppa => Some(Variant::Ppa),
            ModelKind::Apa => Some(Variant::Apa),
            ModelKind::Logreg => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Hlstm => "hlstm",
            ModelKind::Upa => "upa",
            ModelKind::Ppa => "ppa",
            ModelKind::Apa => "apa",
            ModelKind::Logreg => "logreg",
        }
    }
}

/// Basis for the length used when binning recall by thread length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LengthBasis {
    /// Student posts the model consumed (post-truncation).
    #[default]
    Model,
    /// Pre-truncation post count.
    Raw,
}

fn default_lr() -> f64 {
    0.001
}
fn default_epochs() -> usize {
    1
}
fn default_hidden() -> usize {
    128
}
fn default_embed() -> usize {
    300
}
fn default_min_count() -> usize {
    2
}
fn default_embeddings() -> String {
    "random".to_string()
}
fn default_workers() -> usize {
    1
}
fn default_variant() -> ModelKind {
    ModelKind::Upa
}
fn default_l2() -> f64 {
    1.0
}
fn default_logreg_iters() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_variant")]
    pub variant: ModelKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_embed")]
    pub embed: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Keep only the last k posts of every training thread.
    #[serde(default)]
    pub context_truncation: Option<usize>,
    /// Extra cross-entropy terms computed on the thread truncated to the
    /// last k posts, summed with the full-context loss.
    #[serde(default)]
    pub multi_loss_lengths: Option<Vec<usize>>,
    /// "random" or a path to a word2vec/GloVe-style text file.
    #[serde(default = "default_embeddings")]
    pub embeddings: String,
    #[serde(default)]
    pub apa_norm: ApaNorm,
    /// Off unless set; rescales each parameter tensor's gradient to this
    /// L2 norm when it exceeds it.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Decoupled weight decay; off by default.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub length_bin_basis: LengthBasis,
    #[serde(default)]
    pub comment_order: CommentOrder,
    #[serde(default)]
    pub agreement_norm: crate::baseline::AgreementNorm,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_logreg_iters")]
    pub logreg_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config populates every default")
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<TrainConfig, toml::de::Error> {
        toml::from_str(text)
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Per-parameter first/second moment state with a shared step counter.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            u: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    /// One bias-corrected update: θ ← θ − lr·m̂/(√û + ε).
    pub fn step(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        grad_clip: Option<f64>,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        for (name, p) in params {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NonFiniteGrad { param: name.clone() });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter().enumerate() {
            let (m, u) = (&mut self.m[i], &mut self.u[i]);
            let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
            p.update(|data, grad| {
                let scale = match grad_clip {
                    Some(max_norm) => {
                        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                        if norm > max_norm {
                            max_norm / norm
                        } else {
                            1.0
                        }
                    }
                    None => 1.0,
                };
                for j in 0..data.len() {
                    let g = grad[j] * scale;
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                    u[j] = beta2 * u[j] + (1.0 - beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let u_hat = u[j] / bc2;
                    data[j] -= lr * m_hat / (u_hat.sqrt() + eps);
                    if weight_decay > 0.0 {
                        data[j] -= lr * weight_decay * data[j];
                    }
                }
            });
        }
        Ok(())
    }
}

// ── training loops ──────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// One loss value per parameter update, in update order.
    pub loss_log: Vec<f64>,
}

fn last_k_posts(posts: &[Vec<usize>], k: usize) -> Vec<Vec<usize>> {
    let start = posts.len().saturating_sub(k);
    posts[start..].to_vec()
}

fn instance_loss(
    params: &ModelParams,
    posts: &[Vec<usize>],
    label: usize,
    multi_loss_lengths: Option<&[usize]>,
) -> Result<Tensor, AdError> {
    let mut loss = predict(params, posts)?.logits.cross_entropy(label)?;
    if let Some(lengths) = multi_loss_lengths {
        for &k in lengths {
            let truncated = last_k_posts(posts, k);
            let extra = predict(params, &truncated)?.logits.cross_entropy(label)?;
            loss = loss.add(&extra)?;
        }
    }
    Ok(loss)
}

/// Train one neural variant on an already-tokenized corpus. Threads are
/// visited in a freshly seeded shuffle order each epoch; parameters are
/// updated after every instance.
pub fn train(
    config: &TrainConfig,
    train_corpus: &Corpus,
    embedding_rows: Vec<f64>,
) -> Result<TrainOutcome, TrainError> {
    let variant = config
        .variant
        .neural()
        .expect("neural training requires a neural variant");
    if train_corpus.threads.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let vocab_size = train_corpus.vocab.len();
    assert_eq!(
        embedding_rows.len(),
        vocab_size * config.embed,
        "embedding matrix does not match vocab"
    );

    let mut init_rng = ChaCha20Rng::seed_from_u64(config.seed);
    let params = ModelParams::init(
        variant,
        embedding_rows,
        vocab_size,
        config.embed,
        config.hidden,
        config.apa_norm,
        &mut init_rng,
    );
    let named = params.named_tensors();
    let mut adam = AdamState::new(&named);
    let mut loss_log = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_corpus.threads.len()).collect();
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(100 + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        for idx in order {
            let thread = &train_corpus.threads[idx];
            let mut posts: Vec<Vec<usize>> =
                thread.posts.iter().map(|p| p.tokens.clone()).collect();
            if let Some(k) = config.context_truncation {
                posts = last_k_posts(&posts, k.max(1));
            }
            params.zero_grads();
            let loss = instance_loss(
                &params,
                &posts,
                thread.label as usize,
                config.multi_loss_lengths.as_deref(),
            )
            .map_err(|e| match e {
                // Any non-finite forward state means the run diverged.
                AdError::NonFinite { .. } => TrainError::Diverged {
                    thread_id: thread.thread_id.clone(),
                },
                other => TrainError::Ad(other),
            })?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    thread_id: thread.thread_id.clone(),
                });
            }
            loss.backward()?;
            adam.step(&named, config.lr, config.grad_clip, config.weight_decay)?;
            loss_log.push(loss_value);
        }
    }
    Ok(TrainOutcome { params, loss_log })
}

// ── embeddings ──────────────────────────────────────────────────────

/// Build the initial embedding matrix. Every row starts as a seeded
/// uniform(−0.05, 0.05) draw; rows found in the file (word2vec text with
/// optional header, or headerless GloVe) overwrite the random ones.
pub fn load_embeddings(
    path: Option<&Path>,
    vocab: &Vocab,
    dim: usize,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut rows: Vec<f64> = (0..vocab.len() * dim)
        .map(|_| rng.gen_range(-0.05..0.05))
        .collect();

    let Some(path) = path else {
        return Ok(rows);
    };
    let reader = BufReader::new(fs::File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
            continue; // word2vec header: "<count> <dim>"
        }
        if values.is_empty() {
            continue;
        }
        if values.len() != dim {
            return Err(TrainError::EmbeddingDim {
                found: values.len(),
                expected: dim,
            });
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        for (j, v) in values.iter().enumerate() {
            rows[id * dim + j] = v.parse::<f64>().map_err(|e| {
                TrainError::Embedding(format!("line {}: bad float: {e}", i + 1))
            })?;
        }
    }
    Ok(rows)
}

// ── checkpoints ─────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &str = "INETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorBlob {
    fn of(t: &Tensor) -> TensorBlob {
        TensorBlob {
            shape: t.shape(),
            data: t.value(),
        }
    }

    fn to_param(&self) -> Tensor {
        Tensor::param(self.data.clone(), &self.shape).expect("blob shape consistent")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LstmBlob {
    pub w_x: TensorBlob,
    pub w_h: TensorBlob,
    pub b: TensorBlob,
    pub hidden: usize,
    pub input: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NeuralBlob {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub apa_norm: ApaNorm,
    pub embeddings: TensorBlob,
    pub lstm_post: LstmBlob,
    pub lstm_ctx: LstmBlob,
    pub attention: Option<[TensorBlob; 3]>, // w, b, v
    pub classifier_w: TensorBlob,
    pub classifier_b: TensorBlob,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ModelBlob {
    Neural(NeuralBlob),
    Logreg(LogRegParams),
}

/// Self-describing training artifact: version tag, configuration, the
/// training vocabulary with its hash, and every parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub model: ModelBlob,
}

impl ModelParams {
    pub fn to_blob(&self) -> NeuralBlob {
        NeuralBlob {
            variant: self.variant,
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            apa_norm: self.apa_norm,
            embeddings: TensorBlob::of(&self.embeddings),
            lstm_post: LstmBlob {
                w_x: TensorBlob::of(&self.lstm_post.w_x),
                w_h: TensorBlob::of(&self.lstm_post.w_h),
                b: TensorBlob::of(&self.lstm_post.b),
                hidden: self.lstm_post.hidden,
                input: self.lstm_post.input,
            },
            lstm_ctx: LstmBlob {
                w_x: TensorBlob::of(&self.lstm_ctx.w_x),
                w_h: TensorBlob::of(&self.lstm_ctx.w_h),
                b: TensorBlob::of(&self.lstm_ctx.b),
                hidden: self.lstm_ctx.hidden,
                input: self.lstm_ctx.input,
            },
            attention: self.attention.as_ref().map(|a| {
                [
                    TensorBlob::of(&a.w),
                    TensorBlob::of(&a.b),
                    TensorBlob::of(&a.v),
                ]
            }),
            classifier_w: TensorBlob::of(&self.classifier.w),
            classifier_b: TensorBlob::of(&self.classifier.b),
        }
    }

    pub fn from_blob(blob: &NeuralBlob) -> ModelParams {
        ModelParams {
            variant: blob.variant,
            vocab_size: blob.vocab_size,
            embed_dim: blob.embed_dim,
            hidden: blob.hidden,
            apa_norm: blob.apa_norm,
            embeddings: blob.embeddings.to_param(),
            lstm_post: LstmParams {
                w_x: blob.lstm_post.w_x.to_param(),
                w_h: blob.lstm_post.w_h.to_param(),
                b: blob.lstm_post.b.to_param(),
                hidden: blob.lstm_post.hidden,
                input: blob.lstm_post.input,
            },
            lstm_ctx: LstmParams {
                w_x: blob.lstm_ctx.w_x.to_param(),
                w_h: blob.lstm_ctx.w_h.to_param(),
                b: blob.lstm_ctx.b.to_param(),
                hidden: blob.lstm_ctx.hidden,
                input: blob.lstm_ctx.input,
            },
            attention: blob.attention.as_ref().map(|[w, b, v]| {
                crate::attention::AttentionParams {
                    w: w.to_param(),
                    b: b.to_param(),
                    v: v.to_param(),
                }
            }),
            classifier: crate::attention::ClassifierParams {
                w: blob.classifier_w.to_param(),
                b: blob.classifier_b.to_param(),
            },
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let writer = BufWriter::new(fs::File::create(path)?);
    bincode::serialize_into(writer, ckpt).map_err(|e| TrainError::Checkpoint(e.to_string()))
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    bincode::serialize(ckpt).expect("checkpoint serialization cannot fail")
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let ckpt: Checkpoint =
        bincode::deserialize_from(reader).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if ckpt.magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad magic {:?}",
            ckpt.magic
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {}",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

/// Evaluate predictions for already-tokenized threads, optionally fanning
/// out across worker threads. The frozen parameters cross thread
/// boundaries as plain data; each worker rebuilds its own graph-side
/// copy. Results are merged in thread order, so worker count never
/// changes the output.
pub fn predict_corpus(
    blob: &NeuralBlob,
    corpus: &Corpus,
    workers: usize,
) -> Result<Vec<(u8, Vec<crate::attention::TracePair>)>, TrainError> {
    let jobs: Vec<(usize, Vec<Vec<usize>>)> = corpus
        .threads
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.posts.iter().map(|p| p.tokens.clone()).collect()))
        .collect();
    let workers = workers.max(1).min(jobs.len().max(1));

    let mut results: Vec<Option<(u8, Vec<crate::attention::TracePair>)>> =
        vec![None; jobs.len()];
    if workers == 1 {
        let params = ModelParams::from_blob(blob);
        for (i, posts) in &jobs {
            results[*i] = Some(predict_one(&params, posts)?);
        }
    } else {
        let chunks: Vec<&[(usize, Vec<Vec<usize>>)]> =
            jobs.chunks(jobs.len().div_ceil(workers)).collect();
        let outputs = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        let params = ModelParams::from_blob(blob);
                        chunk
                            .iter()
                            .map(|(i, posts)| Ok((*i, predict_one(&params, posts)?)))
                            .collect::<Result<Vec<_>, TrainError>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect::<Result<Vec<_>, TrainError>>()
        })?;
        for chunk in outputs {
            for (i, r) in chunk {
                results[i] = Some(r);
            }
        }
    }
    Ok(results.into_iter().map(|r| r.unwrap()).collect())
}

fn predict_one(
    params: &ModelParams,
    posts: &[Vec<usize>],
) -> Result<(u8, Vec<crate::attention::TracePair>), TrainError> {
    let pred = predict(params, posts)?;
    let logits = pred.logits.value();
    let predicted = u8::from(logits[1] > logits[0]);
    Ok((predicted, pred.pairs))
}

/// Convenience used by tests and the pipeline: outcomes for a tokenized
/// corpus under a frozen model.
pub fn outcomes_for(
    blob: &NeuralBlob,
    corpus: &Corpus,
    workers: usize,
) -> Result<(Vec<eval::ThreadOutcome>, Vec<eval::TraceRecord>), TrainError> {
    let preds = predict_corpus(blob, corpus, workers)?;
    let mut outcomes = Vec::with_capacity(preds.len());
    let mut traces = Vec::with_capacity(preds.len());
    for (thread, (predicted, pairs)) in corpus.threads.iter().zip(preds) {
        outcomes.push(thread_outcome(thread, predicted));
        if !pairs.is_empty() {
            traces.push(eval::TraceRecord {
                thread_id: thread.thread_id.clone(),
                variant: blob.variant.name().to_string(),
                pairs,
                predicted,
                label: thread.label,
            });
        }
    }
    Ok((outcomes, traces))
}

pub fn thread_outcome(thread: &Thread, predicted: u8) -> eval::ThreadOutcome {
    eval::ThreadOutcome {
        thread_id: thread.thread_id.clone(),
        course_id: thread.course_id.clone(),
        predicted,
        label: thread.label,
        length: thread.posts.len(),
        raw_length: thread.original_length,
    }
}
