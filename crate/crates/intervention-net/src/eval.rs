//! Positive-class metrics, per-course aggregation, recall binned by
//! thread length, and attention-trace introspection.
//!
//! Aggregated F1 (macro and weighted macro) is the harmonic mean of the
//! aggregated precision and recall — per-course F1 values are never
//! averaged directly. This is the scheme that reproduces the reference
//! per-course result table's average rows; weighted aggregation weights
//! courses by their thread counts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::TracePair;
use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no per-course rows to aggregate")]
    NoRows,
    #[error("weights ({weights}) do not match rows ({rows})")]
    WeightMismatch { weights: usize, rows: usize },
    #[error("weights must be positive")]
    BadWeights,
    #[error("trace references unknown thread {0}")]
    UnknownThread(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_pr(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

/// Positive-class precision/recall/F1 with 0/0 → 0 conventions.
pub fn compute_prf(preds: &[u8], labels: &[u8]) -> Result<(Prf, Confusion), EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 1) => c.false_neg += 1,
            _ => c.true_neg += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg);
    Ok((Prf::from_pr(precision, recall), c))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CourseRow {
    pub course_id: String,
    pub threads: usize,
    pub i_ratio: f64,
    pub prf: Prf,
    pub confusion: Confusion,
}

/// Unweighted mean of per-course precision and recall; F1 is their
/// harmonic mean.
pub fn macro_average(rows: &[CourseRow]) -> Result<Prf, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::NoRows);
    }
    let n = rows.len() as f64;
    let p = rows.iter().map(|r| r.prf.precision).sum::<f64>() / n;
    let r = rows.iter().map(|r| r.prf.recall).sum::<f64>() / n;
    Ok(Prf::from_pr(p, r))
}

/// Weight-proportional mean of per-course precision and recall; F1 is the
/// harmonic mean of the weighted means.
pub fn weighted_macro_average(rows: &[CourseRow], weights: &[f64]) -> Result<Prf, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::NoRows);
    }
    if rows.len() != weights.len() {
        return Err(EvalError::WeightMismatch {
            weights: weights.len(),
            rows: rows.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w <= 0.0) || total <= 0.0 {
        return Err(EvalError::BadWeights);
    }
    let p = rows
        .iter()
        .zip(weights)
        .map(|(r, w)| r.prf.precision * w)
        .sum::<f64>()
        / total;
    let r = rows
        .iter()
        .zip(weights)
        .map(|(r, w)| r.prf.recall * w)
        .sum::<f64>()
        / total;
    Ok(Prf::from_pr(p, r))
}

/// One evaluated thread.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThreadOutcome {
    pub thread_id: String,
    pub course_id: String,
    pub predicted: u8,
    pub label: u8,
    /// Student posts available to the model (post-truncation).
    pub length: usize,
    /// Pre-truncation post count.
    pub raw_length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<CourseRow>,
    pub macro_avg: Prf,
    pub weighted_macro_avg: Prf,
    pub confusion: Confusion,
}

/// Group outcomes by course (order of first appearance) and aggregate.
/// Weighted aggregation uses each course's evaluated thread count.
pub fn metrics_report(outcomes: &[ThreadOutcome]) -> Result<MetricsReport, EvalError> {
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<&ThreadOutcome>> = HashMap::new();
    for o in outcomes {
        let entry = grouped.entry(o.course_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(o.course_id.as_str());
        }
        entry.push(o);
    }
    let mut rows = Vec::with_capacity(order.len());
    for course in order {
        let group = &grouped[course];
        let preds: Vec<u8> = group.iter().map(|o| o.predicted).collect();
        let labels: Vec<u8> = group.iter().map(|o| o.label).collect();
        let (prf, confusion) = compute_prf(&preds, &labels)?;
        let pos = labels.iter().filter(|&&y| y == 1).count();
        let neg = labels.len() - pos;
        rows.push(CourseRow {
            course_id: course.to_string(),
            threads: group.len(),
            i_ratio: if neg == 0 {
                f64::INFINITY
            } else {
                pos as f64 / neg as f64
            },
            prf,
            confusion,
        });
    }
    let macro_avg = macro_average(&rows)?;
    let weights: Vec<f64> = rows.iter().map(|r| r.threads as f64).collect();
    let weighted_macro_avg = weighted_macro_average(&rows, &weights)?;
    let preds: Vec<u8> = outcomes.iter().map(|o| o.predicted).collect();
    let labels: Vec<u8> = outcomes.iter().map(|o| o.label).collect();
    let (_, confusion) = compute_prf(&preds, &labels)?;
    Ok(MetricsReport {
        rows,
        macro_avg,
        weighted_macro_avg,
        confusion,
    })
}

// ── recall binned by thread length ──────────────────────────────────

pub const LENGTH_BINS: usize = 8; // 1..=7 and >7

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthBin {
    pub label: String,
    pub support: usize,
    /// Absent when the bin holds no positive threads.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthBinReport {
    pub bins: Vec<LengthBin>,
}

/// Recall of the positive class within thread-length bins 1..7 and >7.
pub fn bin_recall_by_length(
    preds: &[u8],
    labels: &[u8],
    lengths: &[usize],
) -> Result<LengthBinReport, EvalError> {
    if preds.len() != labels.len() || preds.len() != lengths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len().min(lengths.len()),
        });
    }
    let mut support = [0usize; LENGTH_BINS];
    let mut recalled = [0usize; LENGTH_BINS];
    for ((&p, &y), &len) in preds.iter().zip(labels).zip(lengths) {
        if y != 1 {
            continue;
        }
        let bin = if len > 7 { 7 } else { len.saturating_sub(1) };
        support[bin] += 1;
        if p == 1 {
            recalled[bin] += 1;
        }
    }
    let bins = (0..LENGTH_BINS)
        .map(|b| LengthBin {
            label: if b == 7 {
                ">7".to_string()
            } else {
                (b + 1).to_string()
            },
            support: support[b],
            recall: (support[b] > 0).then(|| recalled[b] as f64 / support[b] as f64),
        })
        .collect();
    Ok(LengthBinReport { bins })
}

// ── attention introspection ─────────────────────────────────────────

/// Exported trace line: which contexts a prediction attended to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub thread_id: String,
    pub variant: String,
    pub pairs: Vec<TracePair>,
    pub predicted: u8,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrospectRow {
    pub thread_id: String,
    pub predicted: u8,
    pub label: u8,
    pub top_context: usize,
    pub top_weight: f64,
    pub snippet: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionHistogram {
    pub first: usize,
    pub middle: usize,
    pub last: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrospectionReport {
    pub rows: Vec<IntrospectRow>,
    pub argmax_position: PositionHistogram,
    /// Mean attention mass on the final context C_{n−1}, over threads.
    pub mean_final_context_mass: f64,
    /// Mean of 1/(n−1): the mass a uniform attention would give it.
    pub mean_uniform_baseline: f64,
    /// Mean mass on contexts containing the planted signal post, when the
    /// corpus records signal positions.
    pub mean_signal_mass: Option<f64>,
}

fn snippet(text: &str) -> String {
    const LIMIT: usize = 60;
    if text.chars().count() <= LIMIT {
        text.to_string()
    } else {
        let cut: String = text.chars().take(LIMIT).collect();
        format!("{cut}…")
    }
}

/// Summarize traces against their corpus: per-thread top context with a
/// text snippet, an argmax-position histogram, and attention-mass
/// statistics used by the planted-signal experiments.
pub fn introspect(
    traces: &[TraceRecord],
    corpus: &Corpus,
) -> Result<IntrospectionReport, EvalError> {
    let by_id: HashMap<&str, &crate::corpus::Thread> = corpus
        .threads
        .iter()
        .map(|t| (t.thread_id.as_str(), t))
        .collect();

    let mut rows = Vec::with_capacity(traces.len());
    let mut hist = PositionHistogram::default();
    let mut final_mass_sum = 0.0;
    let mut uniform_sum = 0.0;
    let mut signal_mass_sum = 0.0;
    let mut signal_count = 0usize;

    for trace in traces {
        let thread = by_id
            .get(trace.thread_id.as_str())
            .ok_or_else(|| EvalError::UnknownThread(trace.thread_id.clone()))?;
        let m = thread.posts.len();

        let top = trace
            .pairs
            .iter()
            .max_by(|a, b| a.weight.partial_cmp(&b.weight).unwrap())
            .expect("trace without pairs");
        let max_ctx = trace.pairs.iter().map(|p| p.context).max().unwrap();
        if top.context == 1 {
            hist.first += 1;
        } else if top.context == max_ctx {
            hist.last += 1;
        } else {
            hist.middle += 1;
        }

        // C_{n−1} corresponds to the full prefix, context index m.
        let final_mass: f64 = trace
            .pairs
            .iter()
            .filter(|p| p.context == m)
            .map(|p| p.weight)
            .sum();
        final_mass_sum += final_mass;
        uniform_sum += 1.0 / m as f64;

        if let Some(s) = thread.signal_post {
            // Contexts i ≥ s are the prefixes containing the signal post.
            let mass: f64 = trace
                .pairs
                .iter()
                .filter(|p| p.context >= s)
                .map(|p| p.weight)
                .sum();
            signal_mass_sum += mass;
            signal_count += 1;
        }

        let snippet_text = thread
            .posts
            .get(top.context - 1)
            .map(|p| snippet(&p.text))
            .unwrap_or_default();
        rows.push(IntrospectRow {
            thread_id: trace.thread_id.clone(),
            predicted: trace.predicted,
            label: trace.label,
            top_context: top.context,
            top_weight: top.weight,
            snippet: snippet_text,
        });
    }

    let n = traces.len().max(1) as f64;
    Ok(IntrospectionReport {
        rows,
        argmax_position: hist,
        mean_final_context_mass: final_mass_sum / n,
        mean_uniform_baseline: uniform_sum / n,
        mean_signal_mass: (signal_count > 0).then(|| signal_mass_sum / signal_count as f64),
    })
}

// ── report rendering ────────────────────────────────────────────────

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

/// Aligned-column text table: one row per course plus the two average
/// rows.
pub fn render_metrics_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>8} {:>8} {:>6} {:>6} {:>6}\n",
        "Course", "Threads", "i.ratio", "P", "R", "F1"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<22} {:>8} {:>8} {:>6} {:>6} {:>6}\n",
            row.course_id,
            row.threads,
            if row.i_ratio.is_finite() {
                fmt2(row.i_ratio)
            } else {
                "inf".to_string()
            },
            fmt2(row.prf.precision),
            fmt2(row.prf.recall),
            fmt2(row.prf.f1),
        ));
    }
    out.push_str(&format!(
        "{:<22} {:>8} {:>8} {:>6} {:>6} {:>6}\n",
        "Macro Avg.",
        "",
        "",
        fmt2(report.macro_avg.precision),
        fmt2(report.macro_avg.recall),
        fmt2(report.macro_avg.f1),
    ));
    out.push_str(&format!(
        "{:<22} {:>8} {:>8} {:>6} {:>6} {:>6}\n",
        "Weighted Macro Avg",
        "",
        "",
        fmt2(report.weighted_macro_avg.precision),
        fmt2(report.weighted_macro_avg.recall),
        fmt2(report.weighted_macro_avg.f1),
    ));
    out
}

/// Machine-readable report: one JSON record per course row, then the
/// aggregate rows.
pub fn render_metrics_jsonl(report: &MetricsReport) -> String {
    let mut out = String::new();
    for row in &report.rows {
        out.push_str(&serde_json::to_string(row).unwrap());
        out.push('\n');
    }
    let aggregates = serde_json::json!({
        "macro_avg": report.macro_avg,
        "weighted_macro_avg": report.weighted_macro_avg,
        "confusion": report.confusion,
    });
    out.push_str(&aggregates.to_string());
    out.push('\n');
    out
}

/// CSV with one row per length bin: `bin,support,recall` (recall empty
/// when the bin is unpopulated).
pub fn render_bins_csv(report: &LengthBinReport) -> String {
    let mut out = String::from("bin,support,recall\n");
    for bin in &report.bins {
        out.push_str(&format!(
            "{},{},{}\n",
            bin.label,
            bin.support,
            bin.recall.map(|r| format!("{r:.4}")).unwrap_or_default()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(course: &str, threads: usize, p: f64, r: f64, f1: f64) -> CourseRow {
        CourseRow {
            course_id: course.to_string(),
            threads,
            i_ratio: 1.0,
            prf: Prf {
                precision: p,
                recall: r,
                f1,
            },
            confusion: Confusion::default(),
        }
    }

    #[test]
    fn prf_all_correct() {
        let (prf, _) = compute_prf(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn prf_no_positive_predictions_is_all_zero() {
        let (prf, c) = compute_prf(&[0, 0, 0], &[1, 1, 0]).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
        assert_eq!(c.false_neg, 2);
        assert_eq!(c.true_neg, 1);
    }

    #[test]
    fn prf_hand_counts() {
        // tp=3, fp=1, fn=2 → P=0.75, R=0.6, F1=2/3
        let preds = [1, 1, 1, 1, 0, 0, 0];
        let labels = [1, 1, 1, 0, 1, 1, 0];
        let (prf, c) = compute_prf(&preds, &labels).unwrap();
        assert_eq!((c.true_pos, c.false_pos, c.false_neg), (3, 1, 2));
        assert!((prf.precision - 0.75).abs() < 1e-12);
        assert!((prf.recall - 0.6).abs() < 1e-12);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn prf_rejects_length_mismatch() {
        assert!(compute_prf(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn macro_average_single_course_is_identity() {
        let rows = vec![row("a", 10, 0.8, 0.5, 0.6154)];
        let avg = macro_average(&rows).unwrap();
        assert!((avg.precision - 0.8).abs() < 1e-12);
        assert!((avg.recall - 0.5).abs() < 1e-12);
        assert!((avg.f1 - 2.0 * 0.8 * 0.5 / 1.3).abs() < 1e-12);
    }

    #[test]
    fn weighted_equals_macro_for_equal_weights() {
        let rows = vec![row("a", 5, 0.9, 0.3, 0.45), row("b", 5, 0.5, 0.7, 0.58)];
        let m = macro_average(&rows).unwrap();
        let w = weighted_macro_average(&rows, &[2.0, 2.0]).unwrap();
        assert!((m.precision - w.precision).abs() < 1e-12);
        assert!((m.recall - w.recall).abs() < 1e-12);
        assert!((m.f1 - w.f1).abs() < 1e-12);
    }

    #[test]
    fn weighted_hand_case() {
        // (P=1, w=3) and (P=0, w=1) → weighted P = 0.75
        let rows = vec![row("a", 3, 1.0, 1.0, 1.0), row("b", 1, 0.0, 0.0, 0.0)];
        let w = weighted_macro_average(&rows, &[3.0, 1.0]).unwrap();
        assert!((w.precision - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bin_recall_hand_case() {
        // lengths [2,2,9], recalled [yes,no,yes]
        let report = bin_recall_by_length(&[1, 0, 1], &[1, 1, 1], &[2, 2, 9]).unwrap();
        let bin2 = &report.bins[1];
        assert_eq!(bin2.support, 2);
        assert!((bin2.recall.unwrap() - 0.5).abs() < 1e-12);
        let over7 = &report.bins[7];
        assert_eq!(over7.support, 1);
        assert!((over7.recall.unwrap() - 1.0).abs() < 1e-12);
        let total: usize = report.bins.iter().map(|b| b.support).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn bin_recall_all_length_one() {
        let report = bin_recall_by_length(&[1, 1], &[1, 1], &[1, 1]).unwrap();
        assert_eq!(report.bins[0].support, 2);
        assert!((report.bins[0].recall.unwrap() - 1.0).abs() < 1e-12);
        for b in &report.bins[1..] {
            assert_eq!(b.support, 0);
            assert!(b.recall.is_none());
        }
    }

    #[test]
    fn per_row_f1_is_harmonic_mean_of_its_p_and_r() {
        let outcomes: Vec<ThreadOutcome> = (0..20)
            .map(|i| ThreadOutcome {
                thread_id: format!("t{i}"),
                course_id: format!("c{}", i % 2),
                predicted: u8::from(i % 3 == 0),
                label: u8::from(i % 2 == 0),
                length: 1 + i % 4,
                raw_length: 1 + i % 4,
            })
            .collect();
        let report = metrics_report(&outcomes).unwrap();
        for row in &report.rows {
            let expect = if row.prf.precision + row.prf.recall > 0.0 {
                2.0 * row.prf.precision * row.prf.recall / (row.prf.precision + row.prf.recall)
            } else {
                0.0
            };
            assert!((row.prf.f1 - expect).abs() < 1e-12);
        }
    }

    fn trace(id: &str, pairs: &[(usize, usize, f64)], predicted: u8, label: u8) -> TraceRecord {
        TraceRecord {
            thread_id: id.to_string(),
            variant: "upa".to_string(),
            pairs: pairs
                .iter()
                .map(|&(q, c, w)| TracePair {
                    query: q,
                    context: c,
                    weight: w,
                })
                .collect(),
            predicted,
            label,
        }
    }

    fn single_course_corpus(lengths: &[usize]) -> Corpus {
        use crate::corpus::{ForumType, Post, Role, Thread, Vocab};
        Corpus {
            threads: lengths
                .iter()
                .enumerate()
                .map(|(i, &len)| Thread {
                    thread_id: format!("t{i}"),
                    course_id: "c".to_string(),
                    forum_raw: "Homework".to_string(),
                    forum_type: ForumType::Homework,
                    posts: (0..len)
                        .map(|p| Post {
                            post_id: format!("t{i}-p{p}"),
                            author_role: Role::Student,
                            text: format!("text of post {p} in thread {i}"),
                            is_comment: false,
                            tokens: vec![],
                        })
                        .collect(),
                    label: 1,
                    original_length: len,
                    signal_post: Some(len),
                })
                .collect(),
            vocab: Vocab::default(),
        }
    }

    #[test]
    fn introspection_single_post_threads_concentrate_on_first() {
        let corpus = single_course_corpus(&[1, 1, 1]);
        let traces: Vec<TraceRecord> = (0..3)
            .map(|i| trace(&format!("t{i}"), &[(1, 1, 1.0)], 1, 1))
            .collect();
        let report = introspect(&traces, &corpus).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.argmax_position.first, 3);
        assert_eq!(report.argmax_position.middle + report.argmax_position.last, 0);
        assert!((report.mean_final_context_mass - 1.0).abs() < 1e-12);
        assert!((report.mean_uniform_baseline - 1.0).abs() < 1e-12);
    }

    #[test]
    fn introspection_final_mass_and_signal_mass() {
        let corpus = single_course_corpus(&[3]);
        let traces = vec![trace("t0", &[(3, 1, 0.1), (3, 2, 0.2), (3, 3, 0.7)], 1, 1)];
        let report = introspect(&traces, &corpus).unwrap();
        assert!((report.mean_final_context_mass - 0.7).abs() < 1e-12);
        assert!((report.mean_uniform_baseline - 1.0 / 3.0).abs() < 1e-12);
        // signal_post = 3 → only context 3 contains it.
        assert!((report.mean_signal_mass.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(report.rows[0].top_context, 3);
    }

    #[test]
    fn introspection_rejects_unknown_thread() {
        let corpus = single_course_corpus(&[1]);
        let traces = vec![trace("missing", &[(1, 1, 1.0)], 0, 0)];
        assert!(matches!(
            introspect(&traces, &corpus),
            Err(EvalError::UnknownThread(_))
        ));
    }

    #[test]
    fn renders_are_stable_shapes() {
        let outcomes: Vec<ThreadOutcome> = (0..10)
            .map(|i| ThreadOutcome {
                thread_id: format!("t{i}"),
                course_id: "c".to_string(),
                predicted: u8::from(i % 2 == 0),
                label: u8::from(i % 2 == 0),
                length: 1 + i % 3,
                raw_length: 1 + i % 3,
            })
            .collect();
        let report = metrics_report(&outcomes).unwrap();
        let text = render_metrics_text(&report);
        assert!(text.contains("Macro Avg."));
        assert!(text.contains("Weighted Macro Avg"));
        let jsonl = render_metrics_jsonl(&report);
        assert_eq!(jsonl.lines().count(), report.rows.len() + 1);
        let bins = bin_recall_by_length(
            &outcomes.iter().map(|o| o.predicted).collect::<Vec<_>>(),
            &outcomes.iter().map(|o| o.label).collect::<Vec<_>>(),
            &outcomes.iter().map(|o| o.length).collect::<Vec<_>>(),
        )
        .unwrap();
        let csv = render_bins_csv(&bins);
        assert_eq!(csv.lines().count(), 9); // header + 8 bins
    }
}
