//! Deterministic synthetic corpora with a plantable lexical signal.
//!
//! Intervened threads carry the signal tokens in one post chosen by
//! `signal_position`; non-intervened threads stay signal-free except for
//! optional distractor placements in non-final posts, which let
//! order-sensitivity experiments separate position from mere presence.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, ForumType, Post, Role, Thread, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalPosition {
    First,
    Last,
    UniformRandom,
    FixedK,
}

fn default_length_min() -> usize {
    1
}
fn default_length_max() -> usize {
    5
}
fn default_post_tokens_min() -> usize {
    3
}
fn default_post_tokens_max() -> usize {
    8
}
fn default_course_id() -> String {
    "synth".to_string()
}
fn default_signal_tokens() -> Vec<String> {
    vec!["signalword".to_string()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_threads: usize,
    /// Ratio of intervened to non-intervened threads.
    pub intervention_ratio: f64,
    pub vocab_size: usize,
    #[serde(default = "default_signal_tokens")]
    pub signal_tokens: Vec<String>,
    pub signal_position: SignalPosition,
    /// 1-based post index used when `signal_position = fixed-k`.
    #[serde(default)]
    pub signal_fixed_k: usize,
    /// Probability of flipping a thread's label after content generation.
    #[serde(default)]
    pub noise_rate: f64,
    pub seed: u64,
    /// Thread length in posts: categorical over `length_weights` (index i
    /// is length i+1) when given, else uniform over
    /// `length_min..=length_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_weights: Option<Vec<f64>>,
    #[serde(default = "default_length_min")]
    pub length_min: usize,
    #[serde(default = "default_length_max")]
    pub length_max: usize,
    #[serde(default = "default_post_tokens_min")]
    pub post_tokens_min: usize,
    #[serde(default = "default_post_tokens_max")]
    pub post_tokens_max: usize,
    /// Fraction of non-intervened threads (length ≥ 2) that receive the
    /// signal tokens in a random non-final post.
    #[serde(default)]
    pub distractor_rate: f64,
    #[serde(default = "default_course_id")]
    pub course_id: String,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        let fail = |msg: String| Err(CorpusError::BadSpec(msg));
        if self.n_threads == 0 {
            return fail("n_threads must be positive".into());
        }
        if !self.intervention_ratio.is_finite() || self.intervention_ratio < 0.0 {
            return fail(format!(
                "intervention_ratio {} must be finite and non-negative",
                self.intervention_ratio
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.signal_tokens.is_empty() {
            return fail("signal_tokens must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.distractor_rate)
        {
            return fail("noise_rate and distractor_rate must lie in [0, 1]".into());
        }
        match &self.length_weights {
            Some(w) => {
                if w.is_empty() || w.iter().any(|x| *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                    return fail("length_weights must be non-negative with positive sum".into());
                }
            }
            None => {
                if self.length_min == 0 || self.length_min > self.length_max {
                    return fail(format!(
                        "bad length range {}..={}",
                        self.length_min, self.length_max
                    ));
                }
            }
        }
        if self.post_tokens_min == 0 || self.post_tokens_min > self.post_tokens_max {
            return fail("bad post token range".into());
        }
        if self.signal_position == SignalPosition::FixedK && self.signal_fixed_k == 0 {
            return fail("signal_fixed_k must be at least 1".into());
        }
        Ok(())
    }

    fn draw_length(&self, rng: &mut ChaCha20Rng) -> usize {
        match &self.length_weights {
            Some(weights) => {
                let total: f64 = weights.iter().sum();
                let mut roll = rng.gen_range(0.0..total);
                for (i, w) in weights.iter().enumerate() {
                    if roll < *w {
                        return i + 1;
                    }
                    roll -= w;
                }
                weights.len()
            }
            None => rng.gen_range(self.length_min..=self.length_max),
        }
    }

    fn signal_index(&self, length: usize, rng: &mut ChaCha20Rng) -> usize {
        match self.signal_position {
            SignalPosition::First => 0,
            SignalPosition::Last => length - 1,
            SignalPosition::UniformRandom => rng.gen_range(0..length),
            SignalPosition::FixedK => (self.signal_fixed_k - 1).min(length - 1),
        }
    }
}

/// Generate a corpus. The same spec always yields byte-identical output;
/// draws happen in a fixed order (labels, then per thread: length, forum,
/// post tokens, placements, noise).
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let r = spec.intervention_ratio;
    let n_pos = ((spec.n_threads as f64) * r / (1.0 + r)).round() as usize;
    let mut labels = vec![1u8; n_pos];
    labels.resize(spec.n_threads, 0);
    labels.shuffle(&mut rng);

    let base_vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("tok{i:03}")).collect();

    let mut threads = Vec::with_capacity(spec.n_threads);
    for (t, &content_label) in labels.iter().enumerate() {
        let length = spec.draw_length(&mut rng);
        let forum_type = *ForumType::ALL.as_slice().choose(&mut rng).unwrap();
        let mut posts: Vec<Vec<String>> = (0..length)
            .map(|_| {
                let k = rng.gen_range(spec.post_tokens_min..=spec.post_tokens_max);
                (0..k)
                    .map(|_| base_vocab.choose(&mut rng).unwrap().clone())
                    .collect()
            })
            .collect();

        let mut signal_post = None;
        if content_label == 1 {
            let idx = spec.signal_index(length, &mut rng);
            posts[idx].extend(spec.signal_tokens.iter().cloned());
            signal_post = Some(idx + 1);
        } else if length >= 2 && rng.gen_range(0.0..1.0) < spec.distractor_rate {
            let idx = rng.gen_range(0..length - 1);
            posts[idx].extend(spec.signal_tokens.iter().cloned());
        }

        let label = if spec.noise_rate > 0.0 && rng.gen_range(0.0..1.0) < spec.noise_rate {
            1 - content_label
        } else {
            content_label
        };

        threads.push(Thread {
            thread_id: format!("synth-{t:05}"),
            course_id: spec.course_id.clone(),
            forum_raw: spec.course_id.clone() + "-" + forum_type.name(),
            forum_type,
            posts: posts
                .into_iter()
                .enumerate()
                .map(|(p, tokens)| Post {
                    post_id: format!("synth-{t:05}-p{p}"),
                    author_role: Role::Student,
                    text: tokens.join(" "),
                    is_comment: false,
                    tokens: Vec::new(),
                })
                .collect(),
            label,
            // The instructor reply that would have followed counts toward
            // the pre-truncation length.
            original_length: length + usize::from(content_label == 1),
            signal_post,
        });
    }
    Ok(Corpus {
        threads,
        vocab: Vocab::default(),
    })
}
