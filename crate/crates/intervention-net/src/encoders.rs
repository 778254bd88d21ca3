//! Hierarchical thread encoding: a word-level LSTM produces one vector per
//! post, and a post-level LSTM produces context snapshots of the thread
//! after each post.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{AdError, Tensor};

/// Weights of a single-layer unidirectional LSTM. The four gates are packed
/// row-wise into `w_x`/`w_h`/`b` in the order input, forget, output,
/// candidate.
#[derive(Debug)]
pub struct LstmParams {
    pub w_x: Tensor, // [4h × d]
    pub w_h: Tensor, // [4h × h]
    pub b: Tensor,   // [4h]
    pub hidden: usize,
    pub input: usize,
}

impl LstmParams {
    /// Uniform(−1/√h, 1/√h) weights, forget-gate bias +1, other biases 0.
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha20Rng) -> LstmParams {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w_x = Tensor::param(draw(4 * hidden * input), &[4 * hidden, input]).unwrap();
        let w_h = Tensor::param(draw(4 * hidden * hidden), &[4 * hidden, hidden]).unwrap();
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let b = Tensor::param(bias, &[4 * hidden]).unwrap();
        LstmParams {
            w_x,
            w_h,
            b,
            hidden,
            input,
        }
    }

    /// All-zero weights and biases (tests and closed-form checks).
    pub fn zeroed(input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_x: Tensor::param(vec![0.0; 4 * hidden * input], &[4 * hidden, input]).unwrap(),
            w_h: Tensor::param(vec![0.0; 4 * hidden * hidden], &[4 * hidden, hidden]).unwrap(),
            b: Tensor::param(vec![0.0; 4 * hidden], &[4 * hidden]).unwrap(),
            hidden,
            input,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w_x"), self.w_x.clone()),
            (format!("{prefix}.w_h"), self.w_h.clone()),
            (format!("{prefix}.b"), self.b.clone()),
        ]
    }
}

/// Final hidden state of the word-level LSTM over one post's tokens.
#[derive(Debug)]
pub struct PostVector {
    pub values: Tensor,
}

/// Context snapshots C_1..C_m: hidden states of the post-level LSTM after
/// each post prefix.
#[derive(Debug)]
pub struct ContextSet {
    pub contexts: Vec<Tensor>,
}

/// One LSTM cell step: c = f⊙c_prev + i⊙g, h = o⊙tanh(c).
pub fn lstm_step(
    params: &LstmParams,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<(Tensor, Tensor), AdError> {
    let h = params.hidden;
    let z = params
        .w_x
        .matvec(x)?
        .add(&params.w_h.matvec(h_prev)?)?
        .add(&params.b)?;
    let i = z.slice(0, h)?.sigmoid()?;
    let f = z.slice(h, h)?.sigmoid()?;
    let o = z.slice(2 * h, h)?.sigmoid()?;
    let g = z.slice(3 * h, h)?.tanh()?;
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h_new = o.mul(&c.tanh()?)?;
    if h_new.value().iter().any(|v| !v.is_finite()) || c.value().iter().any(|v| !v.is_finite()) {
        return Err(AdError::NonFinite { op: "lstm_step" });
    }
    Ok((h_new, c))
}

/// Run the word-level LSTM over token embeddings from a zero initial state
/// and return the final hidden state as the post representation.
pub fn encode_post(params: &LstmParams, token_embeddings: &[Tensor]) -> Result<PostVector, AdError> {
    assert!(!token_embeddings.is_empty(), "post has no tokens");
    let mut h = Tensor::zeros(&[params.hidden]);
    let mut c = Tensor::zeros(&[params.hidden]);
    for x in token_embeddings {
        let (h2, c2) = lstm_step(params, x, &h, &c)?;
        h = h2;
        c = c2;
    }
    Ok(PostVector { values: h })
}

/// Run the post-level LSTM over post vectors and keep every hidden state:
/// contexts[i] depends only on posts 0..=i.
pub fn encode_contexts(params: &LstmParams, posts: &[PostVector]) -> Result<ContextSet, AdError> {
    assert!(!posts.is_empty(), "thread has no posts");
    let mut h = Tensor::zeros(&[params.hidden]);
    let mut c = Tensor::zeros(&[params.hidden]);
    let mut contexts = Vec::with_capacity(posts.len());
    for p in posts {
        let (h2, c2) = lstm_step(params, &p.values, &h, &c)?;
        h = h2;
        c = c2;
        contexts.push(h.clone());
    }
    Ok(ContextSet { contexts })
}
