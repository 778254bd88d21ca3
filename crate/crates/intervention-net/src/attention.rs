//! The four thread classifiers: plain hierarchical LSTM (hLSTM) and the
//! three context-attention variants.
//!
//! All variants share the same encoding front end. With m = n−1 student
//! posts and contexts C_1..C_m:
//!
//! * hLSTM — classifier on the final context C_m, no attention.
//! * UPA   — the last post vector queries all contexts C_1..C_m,
//!   including the snapshot of itself.
//! * PPA   — same query, but restricted to C_1..C_{m−1}; a 1-post thread
//!   falls back to the single context C_1.
//! * APA   — every post P_i (i ≥ 2) queries the context C_{i−1} it
//!   replied to; the m−1 pair scores are normalised jointly.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack, AdError, Tensor};
use crate::encoders::{encode_contexts, encode_post, ContextSet, LstmParams, PostVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hlstm,
    Upa,
    Ppa,
    Apa,
}

impl Variant {
    pub fn uses_attention(&self) -> bool {
        !matches!(self, Variant::Hlstm)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Hlstm => "hlstm",
            Variant::Upa => "upa",
            Variant::Ppa => "ppa",
            Variant::Apa => "apa",
        }
    }
}

/// How APA turns its per-pair scores into weights. `Joint` is the primary
/// reading (one softmax across all query–context pairs). `PerQueryAverage`
/// normalises per query and averages; with exactly one context per query
/// that reduces to uniform weights, so it is kept only as a secondary
/// switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ApaNorm {
    #[default]
    Joint,
    PerQueryAverage,
}

/// Additive attention scorer: a = v·tanh(W[query; context] + b).
#[derive(Debug)]
pub struct AttentionParams {
    pub w: Tensor, // [h × 2h]
    pub b: Tensor, // [h]
    pub v: Tensor, // [h]
}

impl AttentionParams {
    pub fn init(hidden: usize, rng: &mut ChaCha20Rng) -> AttentionParams {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        AttentionParams {
            w: Tensor::param(draw(hidden * 2 * hidden), &[hidden, 2 * hidden]).unwrap(),
            b: Tensor::param(vec![0.0; hidden], &[hidden]).unwrap(),
            v: Tensor::param(draw(hidden), &[hidden]).unwrap(),
        }
    }
}

/// Fully connected 2-way head; softmax is deferred to the loss.
#[derive(Debug)]
pub struct ClassifierParams {
    pub w: Tensor, // [2 × h]
    pub b: Tensor, // [2]
}

impl ClassifierParams {
    pub fn init(hidden: usize, rng: &mut ChaCha20Rng) -> ClassifierParams {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w: Vec<f64> = (0..2 * hidden).map(|_| rng.gen_range(-bound..bound)).collect();
        ClassifierParams {
            w: Tensor::param(w, &[2, hidden]).unwrap(),
            b: Tensor::param(vec![0.0; 2], &[2]).unwrap(),
        }
    }
}

pub fn classify(params: &ClassifierParams, rep: &Tensor) -> Result<Tensor, AdError> {
    params.w.matvec(rep)?.add(&params.b)
}

/// Everything trainable for one model variant.
#[derive(Debug)]
pub struct ModelParams {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub embeddings: Tensor, // [V × embed_dim]
    pub lstm_post: LstmParams,
    pub lstm_ctx: LstmParams,
    pub attention: Option<AttentionParams>,
    pub classifier: ClassifierParams,
    pub apa_norm: ApaNorm,
}

impl ModelParams {
    /// Fresh parameters. The draw order is fixed (embeddings, lstm_post,
    /// lstm_ctx, attention, classifier) so a seed pins every weight.
    pub fn init(
        variant: Variant,
        embedding_rows: Vec<f64>,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        apa_norm: ApaNorm,
        rng: &mut ChaCha20Rng,
    ) -> ModelParams {
        assert_eq!(embedding_rows.len(), vocab_size * embed_dim);
        let embeddings = Tensor::param(embedding_rows, &[vocab_size, embed_dim]).unwrap();
        let lstm_post = LstmParams::init(embed_dim, hidden, rng);
        let lstm_ctx = LstmParams::init(hidden, hidden, rng);
        let attention = variant.uses_attention().then(|| AttentionParams::init(hidden, rng));
        let classifier = ClassifierParams::init(hidden, rng);
        ModelParams {
            variant,
            vocab_size,
            embed_dim,
            hidden,
            embeddings,
            lstm_post,
            lstm_ctx,
            attention,
            classifier,
            apa_norm,
        }
    }

    /// Stable (name, tensor) listing used by the optimizer and grad checks.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embeddings".to_string(), self.embeddings.clone())];
        out.extend(self.lstm_post.named("lstm_post"));
        out.extend(self.lstm_ctx.named("lstm_ctx"));
        if let Some(attn) = &self.attention {
            out.push(("attention.w".to_string(), attn.w.clone()));
            out.push(("attention.b".to_string(), attn.b.clone()));
            out.push(("attention.v".to_string(), attn.v.clone()));
        }
        out.push(("classifier.w".to_string(), self.classifier.w.clone()));
        out.push(("classifier.b".to_string(), self.classifier.b.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }
}

/// One attention weight with its 1-based query and context post indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePair {
    pub query: usize,
    pub context: usize,
    pub weight: f64,
}

/// Forward output: 2-way logits plus the attention weights (empty for
/// hLSTM).
#[derive(Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub pairs: Vec<TracePair>,
}

fn score(attn: &AttentionParams, query: &Tensor, ctx: &Tensor) -> Result<Tensor, AdError> {
    let joined = query.concat(ctx)?;
    let hidden = attn.w.matvec(&joined)?.add(&attn.b)?.tanh()?;
    attn.v.mul(&hidden)?.sum()
}

fn weighted_sum(alpha: &Tensor, values: &[Tensor]) -> Result<Tensor, AdError> {
    let mut acc = values[0].mul(&alpha.index(0)?)?;
    for (i, v) in values.iter().enumerate().skip(1) {
        acc = acc.add(&v.mul(&alpha.index(i)?)?)?;
    }
    Ok(acc)
}

/// Encode a thread's token-index posts and run the requested variant.
/// `posts` must hold at least one post with at least one token each.
pub fn predict(params: &ModelParams, posts: &[Vec<usize>]) -> Result<Prediction, AdError> {
    assert!(!posts.is_empty(), "thread has no posts");
    let post_vectors: Vec<PostVector> = posts
        .iter()
        .map(|tokens| {
            let embedded: Result<Vec<Tensor>, AdError> =
                tokens.iter().map(|&t| params.embeddings.row(t)).collect();
            encode_post(&params.lstm_post, &embedded?)
        })
        .collect::<Result<_, _>>()?;
    let ctx = encode_contexts(&params.lstm_ctx, &post_vectors)?;
    let m = ctx.contexts.len();

    match params.variant {
        Variant::Hlstm => {
            let logits = classify(&params.classifier, &ctx.contexts[m - 1])?;
            Ok(Prediction {
                logits,
                pairs: Vec::new(),
            })
        }
        Variant::Upa => {
            let query = &post_vectors[m - 1].values;
            attend_with_query(params, query, m, &ctx.contexts[..m])
        }
        Variant::Ppa => {
            // A 1-post thread has no prior context; fall back to C_1.
            let take = if m >= 2 { m - 1 } else { 1 };
            let query = &post_vectors[m - 1].values;
            attend_with_query(params, query, m, &ctx.contexts[..take])
        }
        Variant::Apa => apa_predict(params, &post_vectors, &ctx, m),
    }
}

fn attend_with_query(
    params: &ModelParams,
    query: &Tensor,
    query_index: usize,
    contexts: &[Tensor],
) -> Result<Prediction, AdError> {
    let attn = params
        .attention
        .as_ref()
        .expect("attention variant without attention params");
    let scores: Vec<Tensor> = contexts
        .iter()
        .map(|c| score(attn, query, c))
        .collect::<Result<_, _>>()?;
    let alpha = stack(&scores)?.softmax()?;
    let rep = weighted_sum(&alpha, contexts)?;
    let logits = classify(&params.classifier, &rep)?;
    let weights = alpha.value();
    let pairs = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| TracePair {
            query: query_index,
            context: i + 1,
            weight: w,
        })
        .collect();
    Ok(Prediction { logits, pairs })
}

fn apa_predict(
    params: &ModelParams,
    post_vectors: &[PostVector],
    ctx: &ContextSet,
    m: usize,
) -> Result<Prediction, AdError> {
    if m == 1 {
        // No (query, previous-context) pair exists; use C_1 outright.
        let one = Tensor::scalar(1.0);
        let rep = ctx.contexts[0].mul(&one)?;
        let logits = classify(&params.classifier, &rep)?;
        return Ok(Prediction {
            logits,
            pairs: vec![TracePair {
                query: 1,
                context: 1,
                weight: 1.0,
            }],
        });
    }
    // Pairs (P_i, C_{i−1}) for i = 2..=m; the weight attaches to C_{i−1}.
    let values: Vec<Tensor> = ctx.contexts[..m - 1].to_vec();
    match params.apa_norm {
        ApaNorm::Joint => {
            let attn = params
                .attention
                .as_ref()
                .expect("attention variant without attention params");
            let scores: Vec<Tensor> = (2..=m)
                .map(|i| score(attn, &post_vectors[i - 1].values, &ctx.contexts[i - 2]))
                .collect::<Result<_, _>>()?;
            let alpha = stack(&scores)?.softmax()?;
            let rep = weighted_sum(&alpha, &values)?;
            let logits = classify(&params.classifier, &rep)?;
            let weights = alpha.value();
            let pairs = weights
                .iter()
                .enumerate()
                .map(|(j, &w)| TracePair {
                    query: j + 2,
                    context: j + 1,
                    weight: w,
                })
                .collect();
            Ok(Prediction { logits, pairs })
        }
        ApaNorm::PerQueryAverage => {
            // Each query scores a single context, so its softmax is 1 and
            // the average over queries is uniform.
            let w = 1.0 / (m - 1) as f64;
            let uniform = Tensor::scalar(w);
            let mut rep = values[0].mul(&uniform)?;
            for v in &values[1..] {
                rep = rep.add(&v.mul(&uniform)?)?;
            }
            let logits = classify(&params.classifier, &rep)?;
            let pairs = (2..=m)
                .map(|i| TracePair {
                    query: i,
                    context: i - 1,
                    weight: w,
                })
                .collect();
            Ok(Prediction { logits, pairs })
        }
    }
}
