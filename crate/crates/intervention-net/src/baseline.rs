//! Feature-rich logistic-regression baseline: unigram bag-of-words,
//! thread length, normalized agreement counts, non-lexical reference
//! counts and the forum type, trained with full-batch gradient descent
//! and backtracking line search.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Thread, Vocab};

pub const DEFAULT_AGREEMENT_LEXICON: [&str; 7] =
    ["agree", "+1", "thanks", "thank you", "yes", "exactly", "me too"];

/// Denominator for the agreement-count feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AgreementNorm {
    #[default]
    Posts,
    Tokens,
}

/// Whole-word (or whole-phrase) matcher over a fixed agreement lexicon.
pub struct AgreementLexicon {
    patterns: Vec<Regex>,
}

impl Default for AgreementLexicon {
    fn default() -> Self {
        static DEFAULT: OnceLock<Vec<Regex>> = OnceLock::new();
        let patterns = DEFAULT.get_or_init(|| {
            DEFAULT_AGREEMENT_LEXICON
                .iter()
                .map(|e| entry_pattern(e))
                .collect()
        });
        AgreementLexicon {
            patterns: patterns.clone(),
        }
    }
}

fn entry_pattern(entry: &str) -> Regex {
    // Bounded by start/whitespace on the left and a word boundary,
    // whitespace or end on the right, so "agree" does not fire inside
    // "disagree" while "+1" still matches.
    let escaped = regex::escape(&entry.to_lowercase());
    Regex::new(&format!(r"(?:^|\s){escaped}(?:\b|\s|$)")).unwrap()
}

impl AgreementLexicon {
    pub fn new(entries: &[String]) -> AgreementLexicon {
        AgreementLexicon {
            patterns: entries.iter().map(|e| entry_pattern(e)).collect(),
        }
    }

    /// Total lexicon matches in one post text.
    pub fn count(&self, text: &str) -> usize {
        let lower = text.to_lowercase();
        self.patterns
            .iter()
            .map(|p| p.find_iter(&lower).count())
            .sum()
    }
}

/// Sparse feature map keyed by feature id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub features: BTreeMap<String, f64>,
}

impl FeatureVector {
    pub fn get(&self, key: &str) -> f64 {
        self.features.get(key).copied().unwrap_or(0.0)
    }

    /// Sparse text export: `feature-id:value` pairs, space separated.
    pub fn to_sparse_text(&self) -> String {
        self.features
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Deterministic feature extraction for one preprocessed thread.
pub fn extract_features(
    thread: &Thread,
    vocab: &Vocab,
    lexicon: &AgreementLexicon,
    norm: AgreementNorm,
) -> FeatureVector {
    let mut features: BTreeMap<String, f64> = BTreeMap::new();

    let mut token_total = 0usize;
    let mut agreement = 0usize;
    for post in &thread.posts {
        agreement += lexicon.count(&post.text);
        for tok in tokenize(&post.text) {
            token_total += 1;
            match tok.as_str() {
                "<URL>" => *features.entry("ref:url".into()).or_insert(0.0) += 1.0,
                "<MATH>" => *features.entry("ref:math".into()).or_insert(0.0) += 1.0,
                "<TIMEREF>" => *features.entry("ref:timeref".into()).or_insert(0.0) += 1.0,
                _ => {}
            }
            let key = if vocab.contains(&tok) {
                format!("bow:{tok}")
            } else {
                "bow:<UNK>".to_string()
            };
            *features.entry(key).or_insert(0.0) += 1.0;
        }
    }

    features.insert("len".into(), thread.posts.len() as f64);
    let denom = match norm {
        AgreementNorm::Posts => thread.posts.len(),
        AgreementNorm::Tokens => token_total,
    }
    .max(1) as f64;
    features.insert("agree".into(), agreement as f64 / denom);
    features.insert(format!("forum:{}", thread.forum_type), 1.0);

    FeatureVector { features }
}

// ── logistic regression ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct LogRegParams {
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub iters: usize,
    pub final_grad_norm: f64,
    pub warning: Option<String>,
}

fn dot(params: &LogRegParams, fv: &FeatureVector) -> f64 {
    fv.features
        .iter()
        .map(|(k, v)| params.weights.get(k).copied().unwrap_or(0.0) * v)
        .sum::<f64>()
        + params.bias
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Probability of the positive class.
pub fn predict_logreg(params: &LogRegParams, fv: &FeatureVector) -> f64 {
    sigmoid(dot(params, fv))
}

/// Class decision at threshold 0.5.
pub fn classify_logreg(params: &LogRegParams, fv: &FeatureVector) -> u8 {
    u8::from(predict_logreg(params, fv) > 0.5)
}

fn mean_loss(params: &LogRegParams, data: &[(FeatureVector, u8)], l2: f64) -> f64 {
    let n = data.len() as f64;
    let ce: f64 = data
        .iter()
        .map(|(fv, y)| {
            let z = dot(params, fv);
            // log(1 + e^{-z·sign}) computed stably.
            let margin = if *y == 1 { z } else { -z };
            if margin > 0.0 {
                (-margin).exp().ln_1p()
            } else {
                -margin + margin.exp().ln_1p()
            }
        })
        .sum::<f64>()
        / n;
    let reg: f64 = params.weights.values().map(|w| w * w).sum::<f64>() * l2 / (2.0 * n);
    ce + reg
}

/// L2-regularized logistic regression (bias unregularized) fit by
/// full-batch gradient descent with Armijo backtracking. Stops at
/// gradient norm 1e-6 or `iters`. Single-class data yields a bias-only
/// prior model with a warning.
pub fn train_logreg(
    data: &[(FeatureVector, u8)],
    l2: f64,
    iters: usize,
) -> (LogRegParams, FitSummary) {
    let n = data.len();
    let positives = data.iter().filter(|(_, y)| *y == 1).count();
    if n == 0 || positives == 0 || positives == n {
        let prior = if n == 0 {
            0.5
        } else {
            (positives as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6)
        };
        let params = LogRegParams {
            weights: BTreeMap::new(),
            bias: (prior / (1.0 - prior)).ln(),
        };
        return (
            params,
            FitSummary {
                iters: 0,
                final_grad_norm: 0.0,
                warning: Some("degenerate single-class training data; bias-only model".into()),
            },
        );
    }

    // Weight slots for every feature seen in training.
    let mut params = LogRegParams::default();
    for (fv, _) in data {
        for k in fv.features.keys() {
            params.weights.entry(k.clone()).or_insert(0.0);
        }
    }

    let nf = n as f64;
    let mut loss = mean_loss(&params, data, l2);
    let mut grad_norm = f64::INFINITY;
    let mut used_iters = 0;
    for it in 0..iters {
        let mut grad_w: BTreeMap<&str, f64> = BTreeMap::new();
        let mut grad_b = 0.0;
        for (fv, y) in data {
            let err = sigmoid(dot(&params, fv)) - f64::from(*y);
            grad_b += err;
            for (k, v) in &fv.features {
                *grad_w.entry(k.as_str()).or_insert(0.0) += err * v;
            }
        }
        grad_b /= nf;
        for (k, g) in grad_w.iter_mut() {
            *g = *g / nf + l2 * params.weights[*k] / nf;
        }
        grad_norm =
            (grad_w.values().map(|g| g * g).sum::<f64>() + grad_b * grad_b).sqrt();
        used_iters = it + 1;
        if grad_norm < 1e-6 {
            break;
        }

        // Backtracking line search on the full-batch objective.
        let mut step = 1.0;
        let descent = grad_norm * grad_norm;
        loop {
            let mut trial = params.clone();
            for (k, g) in &grad_w {
                *trial.weights.get_mut(*k).unwrap() -= step * g;
            }
            trial.bias -= step * grad_b;
            let trial_loss = mean_loss(&trial, data, l2);
            if trial_loss <= loss - 1e-4 * step * descent || step < 1e-12 {
                params = trial;
                loss = trial_loss;
                break;
            }
            step *= 0.5;
        }
    }
    (
        params,
        FitSummary {
            iters: used_iters,
            final_grad_norm: grad_norm,
            warning: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ForumType, Post, Role, Vocab};

    fn thread_of(texts: &[&str], forum: ForumType) -> Thread {
        Thread {
            thread_id: "t".into(),
            course_id: "c".into(),
            forum_raw: forum.name().into(),
            forum_type: forum,
            posts: texts
                .iter()
                .enumerate()
                .map(|(i, text)| Post {
                    post_id: format!("p{i}"),
                    author_role: Role::Student,
                    text: text.to_string(),
                    is_comment: false,
                    tokens: vec![],
                })
                .collect(),
            label: 0,
            original_length: texts.len(),
            signal_post: None,
        }
    }

    fn tiny_vocab() -> Vocab {
        let mut tokens: Vec<String> = crate::corpus::SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .collect();
        for t in ["thanks", "i", "agree", "ok", "hello", "world"] {
            tokens.push(t.to_string());
        }
        Vocab::from_tokens(tokens)
    }

    #[test]
    fn length_and_forum_features() {
        let t = thread_of(&["hello", "world"], ForumType::Homework);
        let fv = extract_features(&t, &tiny_vocab(), &AgreementLexicon::default(), AgreementNorm::Posts);
        assert_eq!(fv.get("len"), 2.0);
        assert_eq!(fv.get("forum:homework"), 1.0);
        assert_eq!(fv.get("forum:exam"), 0.0);
        assert_eq!(fv.get("bow:hello"), 1.0);
    }

    #[test]
    fn url_counts() {
        let t = thread_of(&["<URL> and <URL> again"], ForumType::Lecture);
        let fv = extract_features(&t, &tiny_vocab(), &AgreementLexicon::default(), AgreementNorm::Posts);
        assert_eq!(fv.get("ref:url"), 2.0);
    }

    #[test]
    fn agreement_count_hand_case() {
        // "thanks, I agree" has two lexicon hits; two posts → 2/2 = 1.0.
        let t = thread_of(&["thanks, I agree", "ok"], ForumType::Quiz);
        let fv = extract_features(&t, &tiny_vocab(), &AgreementLexicon::default(), AgreementNorm::Posts);
        assert_eq!(fv.get("agree"), 1.0);
    }

    #[test]
    fn agreement_whole_word_only() {
        let lex = AgreementLexicon::default();
        assert_eq!(lex.count("i disagree strongly"), 0);
        assert_eq!(lex.count("i agree!"), 1);
        assert_eq!(lex.count("+1 from me"), 1);
        assert_eq!(lex.count("thank you so much"), 1);
    }

    #[test]
    fn identical_threads_yield_identical_features() {
        let a = thread_of(&["thanks for this", "me too"], ForumType::Exam);
        let b = thread_of(&["thanks for this", "me too"], ForumType::Exam);
        let v = tiny_vocab();
        let lex = AgreementLexicon::default();
        assert_eq!(
            extract_features(&a, &v, &lex, AgreementNorm::Posts),
            extract_features(&b, &v, &lex, AgreementNorm::Posts)
        );
    }

    fn fv(pairs: &[(&str, f64)]) -> FeatureVector {
        FeatureVector {
            features: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn separable_toy_set_fits_perfectly() {
        let data = vec![
            (fv(&[("x", 0.0)]), 0),
            (fv(&[("x", 0.2)]), 0),
            (fv(&[("x", 0.8)]), 1),
            (fv(&[("x", 1.0)]), 1),
        ];
        let (params, summary) = train_logreg(&data, 0.01, 500);
        assert!(summary.warning.is_none());
        for (x, y) in &data {
            assert_eq!(classify_logreg(&params, x), *y);
        }
    }

    #[test]
    fn huge_l2_shrinks_weights_to_prior() {
        // As l2 grows the weights vanish and the unregularized bias is
        // left to fit the class prior (3/4 here).
        let data = vec![
            (fv(&[("x", 1.0)]), 1),
            (fv(&[("x", 0.9)]), 1),
            (fv(&[("x", 1.1)]), 1),
            (fv(&[("x", 0.1)]), 0),
        ];
        let (params, _) = train_logreg(&data, 200.0, 5000);
        assert!(params.weights["x"].abs() < 0.02, "w = {}", params.weights["x"]);
        let p = predict_logreg(&params, &fv(&[("x", 0.5)]));
        assert!((p - 0.75).abs() < 0.05, "p = {p} should approach prior 0.75");
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![
            (fv(&[("a", 1.0), ("b", 0.2)]), 1),
            (fv(&[("a", 0.1)]), 0),
            (fv(&[("b", 0.9)]), 1),
            (fv(&[("a", 0.3), ("b", 0.1)]), 0),
        ];
        let (p1, _) = train_logreg(&data, 1.0, 200);
        let (p2, _) = train_logreg(&data, 1.0, 200);
        assert_eq!(p1.weights, p2.weights);
        assert_eq!(p1.bias, p2.bias);
    }

    #[test]
    fn degenerate_single_class_gives_bias_only() {
        let data = vec![(fv(&[("x", 1.0)]), 0), (fv(&[("x", 0.5)]), 0)];
        let (params, summary) = train_logreg(&data, 1.0, 100);
        assert!(summary.warning.is_some());
        assert!(params.weights.is_empty());
        assert!(predict_logreg(&params, &fv(&[("x", 3.0)])) < 0.01);
    }

    #[test]
    fn predict_closed_forms() {
        let zero = LogRegParams::default();
        assert_eq!(predict_logreg(&zero, &fv(&[("x", 5.0)])), 0.5);
        let mut params = LogRegParams::default();
        params.weights.insert("x".into(), 3.0f64.ln());
        // w·x + b = ln 3 → p = 0.75
        let p = predict_logreg(&params, &fv(&[("x", 1.0)]));
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_positive_weight() {
        let mut params = LogRegParams::default();
        params.weights.insert("x".into(), 0.7);
        let mut last = 0.0;
        for i in 0..10 {
            let p = predict_logreg(&params, &fv(&[("x", i as f64)]));
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn gd_loss_decreases_monotonically() {
        let data = vec![
            (fv(&[("a", 1.0)]), 1),
            (fv(&[("a", 0.8), ("b", 0.3)]), 1),
            (fv(&[("b", 1.0)]), 0),
            (fv(&[("a", 0.1), ("b", 0.7)]), 0),
        ];
        // Re-run training step by step and watch the objective.
        let mut prev = f64::INFINITY;
        for iters in 1..=20 {
            let (params, _) = train_logreg(&data, 1.0, iters);
            let loss = mean_loss(&params, &data, 1.0);
            assert!(loss <= prev + 1e-12, "loss rose at iter {iters}");
            prev = loss;
        }
    }

    #[test]
    fn sparse_text_export_shape() {
        let v = fv(&[("bow:hello", 2.0), ("len", 3.0)]);
        assert_eq!(v.to_sparse_text(), "bow:hello:2 len:3");
    }
}
