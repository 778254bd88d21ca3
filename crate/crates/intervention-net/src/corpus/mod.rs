//! Discussion-thread corpus handling: the newline-delimited interchange
//! format, sub-forum normalization, token replacement, truncation at the
//! first instructor post, train/test splitting, and vocabulary building.
//!
//! A corpus file carries one JSON record per line. Raw records hold only
//! `thread_id`, `course_id`, `forum` and `posts`; preprocessing adds
//! `forum_type`, `label` and `original_length`, and rewriting a processed
//! file is byte-stable, so rerunning `preprocess` on its own output is a
//! no-op.

pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed thread record: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corpus too small to split: need at least {need} threads, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("invalid synthetic corpus spec: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Instructor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForumType {
    Lecture,
    Homework,
    Quiz,
    Exam,
}

impl ForumType {
    pub const ALL: [ForumType; 4] = [
        ForumType::Lecture,
        ForumType::Homework,
        ForumType::Quiz,
        ForumType::Exam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ForumType::Lecture => "lecture",
            ForumType::Homework => "homework",
            ForumType::Quiz => "quiz",
            ForumType::Exam => "exam",
        }
    }
}

impl fmt::Display for ForumType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ── interchange records ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PostRecord {
    pub post_id: String,
    pub author_role: Role,
    pub text: String,
    #[serde(default)]
    pub is_comment: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThreadRecord {
    pub thread_id: String,
    pub course_id: String,
    pub forum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forum_type: Option<ForumType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_post: Option<usize>,
    pub posts: Vec<PostRecord>,
}

// ── domain types ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Post {
    pub post_id: String,
    pub author_role: Role,
    pub text: String,
    pub is_comment: bool,
    /// Vocabulary indices; filled by [`Corpus::encode_tokens`].
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thread {
    pub thread_id: String,
    pub course_id: String,
    pub forum_raw: String,
    pub forum_type: ForumType,
    pub posts: Vec<Post>,
    /// 1 iff the raw thread contained at least one instructor post.
    pub label: u8,
    /// Post count before truncation.
    pub original_length: usize,
    /// 1-based index of the planted-signal post (synthetic corpora only).
    pub signal_post: Option<usize>,
}

impl Thread {
    pub fn to_record(&self) -> ThreadRecord {
        ThreadRecord {
            thread_id: self.thread_id.clone(),
            course_id: self.course_id.clone(),
            forum: self.forum_raw.clone(),
            forum_type: Some(self.forum_type),
            label: Some(self.label),
            original_length: Some(self.original_length),
            signal_post: self.signal_post,
            posts: self
                .posts
                .iter()
                .map(|p| PostRecord {
                    post_id: p.post_id.clone(),
                    author_role: p.author_role,
                    text: p.text.clone(),
                    is_comment: p.is_comment,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub threads: Vec<Thread>,
    pub vocab: Vocab,
}

impl Corpus {
    /// Ratio of intervened to non-intervened threads (Inf when nothing is
    /// non-intervened, 0 for an empty corpus).
    pub fn intervention_ratio(&self) -> f64 {
        let pos = self.threads.iter().filter(|t| t.label == 1).count();
        let neg = self.threads.len() - pos;
        if neg == 0 {
            if pos == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            pos as f64 / neg as f64
        }
    }

    /// Fill every post's token-index list using `vocab`.
    pub fn encode_tokens(&mut self, vocab: &Vocab) {
        for thread in &mut self.threads {
            for post in &mut thread.posts {
                post.tokens = tokenize(&post.text)
                    .iter()
                    .map(|t| vocab.id(t))
                    .collect();
            }
        }
    }
}

// ── forum normalization ─────────────────────────────────────────────

/// Result of classifying a raw sub-forum name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForumNorm {
    Standard(ForumType),
    /// Social or chit-chat forum named in the exclusion table.
    Social,
    /// No rule covers the name.
    Unknown,
}

/// Case-insensitive alias table mapping raw sub-forum names onto the four
/// standard types, plus an explicit exclusion list for social forums.
#[derive(Debug, Clone)]
pub struct ForumAliases {
    aliases: Vec<(String, ForumType)>,
    social: Vec<String>,
}

impl Default for ForumAliases {
    fn default() -> Self {
        let aliases = [
            ("lecture", ForumType::Lecture),
            ("lectures", ForumType::Lecture),
            ("video lectures", ForumType::Lecture),
            ("lecture discussions", ForumType::Lecture),
            ("homework", ForumType::Homework),
            ("homeworks", ForumType::Homework),
            ("assignment", ForumType::Homework),
            ("assignments", ForumType::Homework),
            ("problem set", ForumType::Homework),
            ("problem sets", ForumType::Homework),
            ("programming assignments", ForumType::Homework),
            ("quiz", ForumType::Quiz),
            ("quizzes", ForumType::Quiz),
            ("exam", ForumType::Exam),
            ("exams", ForumType::Exam),
            ("final exam", ForumType::Exam),
            ("midterm", ForumType::Exam),
            ("midterm exam", ForumType::Exam),
            ("test", ForumType::Exam),
            ("tests", ForumType::Exam),
        ];
        let social = [
            "general discussion",
            "general",
            "meet and greet",
            "introductions",
            "social",
            "study groups",
            "study group",
            "off topic",
            "course feedback",
            "technical issues",
        ];
        ForumAliases {
            aliases: aliases
                .iter()
                .map(|(n, t)| (n.to_string(), *t))
                .collect(),
            social: social.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ForumAliases {
    pub fn with_alias(mut self, name: &str, ty: ForumType) -> Self {
        self.aliases.push((name.to_lowercase(), ty));
        self
    }

    pub fn normalize(&self, raw_name: &str) -> ForumNorm {
        let key = raw_name.trim().to_lowercase();
        if let Some((_, ty)) = self.aliases.iter().find(|(n, _)| *n == key) {
            return ForumNorm::Standard(*ty);
        }
        if self.social.iter().any(|s| *s == key) {
            ForumNorm::Social
        } else {
            ForumNorm::Unknown
        }
    }
}

/// Normalize a raw sub-forum name with the default alias table.
pub fn normalize_forum(raw_name: &str) -> ForumNorm {
    static DEFAULT: OnceLock<ForumAliases> = OnceLock::new();
    DEFAULT.get_or_init(ForumAliases::default).normalize(raw_name)
}

// ── token replacement and tokenization ──────────────────────────────

fn regexes() -> &'static (Regex, Regex, Regex, Regex) {
    static RE: OnceLock<(Regex, Regex, Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        let url = Regex::new(r"(?:[A-Za-z][A-Za-z0-9+.-]*://|www\.)\S+").unwrap();
        let math_span = Regex::new(r"\$[^$]+\$|\\\(.*?\\\)|\\\[.*?\\\]").unwrap();
        let token_run = Regex::new(r"\S+").unwrap();
        let timeref = Regex::new(r"\b\d{1,2}:\d{2}(?::\d{2})?\b").unwrap();
        (url, math_span, token_run, timeref)
    })
}

/// Number of math markers (=, ^, _, \frac, ∑) inside one whitespace token.
fn math_marker_count(token: &str) -> usize {
    let chars = token.chars().filter(|c| matches!(c, '=' | '^' | '_' | '∑')).count();
    chars + token.matches("\\frac").count()
}

/// Replace URLs, math spans and lecture-video timestamps with the
/// placeholder tokens `<URL>`, `<MATH>` and `<TIMEREF>`. Idempotent.
pub fn replace_tokens(text: &str) -> String {
    let (url, math_span, token_run, timeref) = regexes();
    let step1 = url.replace_all(text, "<URL>");
    let step2 = math_span.replace_all(&step1, "<MATH>");
    // A token dense in math markers is treated as an inline formula.
    let step3 = token_run.replace_all(&step2, |caps: &regex::Captures| {
        let tok = caps.get(0).unwrap().as_str();
        if math_marker_count(tok) >= 2 {
            "<MATH>".to_string()
        } else {
            tok.to_string()
        }
    });
    timeref.replace_all(&step3, "<TIMEREF>").into_owned()
}

pub const SPECIAL_TOKENS: [&str; 5] = ["<URL>", "<MATH>", "<TIMEREF>", "<EMPTY>", "<UNK>"];

/// Lowercase word tokens split at whitespace and punctuation; placeholder
/// tokens stay atomic. An empty result becomes the single token `<EMPTY>`.
pub fn tokenize(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"<URL>|<MATH>|<TIMEREF>|<EMPTY>|<UNK>|[\p{Alphabetic}\p{Nd}]+").unwrap()
    });
    let tokens: Vec<String> = re
        .find_iter(text)
        .map(|m| {
            let s = m.as_str();
            if s.starts_with('<') {
                s.to_string()
            } else {
                s.to_lowercase()
            }
        })
        .collect();
    if tokens.is_empty() {
        vec!["<EMPTY>".to_string()]
    } else {
        tokens
    }
}

// ── loading and preprocessing ───────────────────────────────────────

/// Counters and rejected-record notes collected while ingesting a file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct PreprocessReport {
    pub records: usize,
    pub kept: usize,
    pub excluded_social_forum: usize,
    pub excluded_unknown_forum: usize,
    pub excluded_instructor_first: usize,
    pub excluded_empty: usize,
    pub truncated: usize,
    pub rejected: Vec<RejectedRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RejectedRecord {
    pub thread_id: String,
    pub reason: String,
}

/// How one-level comments are arranged in the linear post sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CommentOrder {
    /// Keep file order (assumed chronological).
    #[default]
    Chronological,
    /// Group each comment run directly after the nearest preceding
    /// top-level post.
    AfterParent,
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessOptions {
    pub aliases: Option<ForumAliases>,
    pub comment_order: CommentOrder,
}

#[derive(Debug)]
pub struct LoadResult {
    pub corpus: Corpus,
    pub report: PreprocessReport,
}

/// Parse an interchange file into threads. Forum names are normalized and
/// labels derived from author roles; texts are left untouched (run
/// [`preprocess`] for truncation and token replacement). Malformed lines
/// abort with their line number; threads in social or unknown forums are
/// dropped and counted in the report.
pub fn load_threads(path: &Path) -> Result<LoadResult, CorpusError> {
    load_threads_with(path, &PreprocessOptions::default())
}

pub fn load_threads_with(
    path: &Path,
    opts: &PreprocessOptions,
) -> Result<LoadResult, CorpusError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let default_aliases = ForumAliases::default();
    let aliases = opts.aliases.as_ref().unwrap_or(&default_aliases);

    let mut report = PreprocessReport::default();
    let mut threads = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let record: ThreadRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let forum_type = match record.forum_type {
            Some(ft) => ft,
            None => match aliases.normalize(&record.forum) {
                ForumNorm::Standard(ft) => ft,
                ForumNorm::Social => {
                    report.excluded_social_forum += 1;
                    report.rejected.push(RejectedRecord {
                        thread_id: record.thread_id.clone(),
                        reason: format!("social forum \"{}\"", record.forum),
                    });
                    continue;
                }
                ForumNorm::Unknown => {
                    report.excluded_unknown_forum += 1;
                    report.rejected.push(RejectedRecord {
                        thread_id: record.thread_id.clone(),
                        reason: format!("unknown forum \"{}\"", record.forum),
                    });
                    continue;
                }
            },
        };
        if record.posts.is_empty() {
            report.excluded_empty += 1;
            report.rejected.push(RejectedRecord {
                thread_id: record.thread_id.clone(),
                reason: "no posts".to_string(),
            });
            continue;
        }
        let computed_label = record
            .posts
            .iter()
            .any(|p| p.author_role == Role::Instructor) as u8;
        threads.push(Thread {
            thread_id: record.thread_id,
            course_id: record.course_id,
            forum_raw: record.forum,
            forum_type,
            label: record.label.unwrap_or(computed_label),
            original_length: record.original_length.unwrap_or(record.posts.len()),
            signal_post: record.signal_post,
            posts: record
                .posts
                .into_iter()
                .map(|p| Post {
                    post_id: p.post_id,
                    author_role: p.author_role,
                    text: p.text,
                    is_comment: p.is_comment,
                    tokens: Vec::new(),
                })
                .collect(),
        });
    }
    report.kept = threads.len();
    Ok(LoadResult {
        corpus: Corpus {
            threads,
            vocab: Vocab::default(),
        },
        report,
    })
}

fn reorder_comments(posts: Vec<Post>, order: CommentOrder) -> Vec<Post> {
    match order {
        CommentOrder::Chronological => posts,
        CommentOrder::AfterParent => {
            // Attach each comment to the nearest preceding top-level post.
            let mut groups: Vec<(Post, Vec<Post>)> = Vec::new();
            let mut orphans: Vec<Post> = Vec::new();
            for post in posts {
                if post.is_comment {
                    match groups.last_mut() {
                        Some((_, comments)) => comments.push(post),
                        None => orphans.push(post),
                    }
                } else {
                    groups.push((post, Vec::new()));
                }
            }
            let mut out = orphans;
            for (parent, comments) in groups {
                out.push(parent);
                out.extend(comments);
            }
            out
        }
    }
}

/// Truncation outcome for one thread.
pub enum Truncation {
    Kept(Thread),
    /// Started by an instructor (announcement-style); not an intervention.
    ExcludedInstructorFirst,
}

/// Set the label from raw roles and drop the first instructor post and
/// everything after it. Threads that open with an instructor post are
/// excluded entirely.
pub fn truncate_at_intervention(mut thread: Thread) -> Truncation {
    let first_instructor = thread
        .posts
        .iter()
        .position(|p| p.author_role == Role::Instructor);
    match first_instructor {
        Some(0) => Truncation::ExcludedInstructorFirst,
        Some(idx) => {
            thread.label = 1;
            thread.posts.truncate(idx);
            Truncation::Kept(thread)
        }
        None => Truncation::Kept(thread),
    }
}

/// Full preprocessing pass: comment ordering, truncation/exclusion, and
/// token replacement. Running it on already-processed threads is a no-op.
pub fn preprocess(corpus: Corpus, opts: &PreprocessOptions) -> (Corpus, PreprocessReport) {
    let mut report = PreprocessReport {
        records: corpus.threads.len(),
        ..Default::default()
    };
    let mut threads = Vec::with_capacity(corpus.threads.len());
    for mut thread in corpus.threads {
        thread.posts = reorder_comments(thread.posts, opts.comment_order);
        let had_instructor = thread
            .posts
            .iter()
            .any(|p| p.author_role == Role::Instructor);
        let thread_id = thread.thread_id.clone();
        let mut thread = match truncate_at_intervention(thread) {
            Truncation::Kept(t) => t,
            Truncation::ExcludedInstructorFirst => {
                report.excluded_instructor_first += 1;
                report.rejected.push(RejectedRecord {
                    thread_id,
                    reason: "started by instructor".to_string(),
                });
                continue;
            }
        };
        if had_instructor {
            report.truncated += 1;
        }
        for post in &mut thread.posts {
            post.text = replace_tokens(&post.text);
        }
        threads.push(thread);
    }
    report.kept = threads.len();
    (
        Corpus {
            threads,
            vocab: corpus.vocab,
        },
        report,
    )
}

/// Write a corpus in the interchange format, one JSON record per line.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for thread in &corpus.threads {
        let line = serde_json::to_string(&thread.to_record())
            .expect("thread record serialization cannot fail");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Corpus serialized to the interchange format as an in-memory string.
pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut s = String::new();
    for thread in &corpus.threads {
        s.push_str(&serde_json::to_string(&thread.to_record()).unwrap());
        s.push('\n');
    }
    s
}

// ── train/test split ────────────────────────────────────────────────

/// Deterministic seeded 80/20 split by thread count, stratified on the
/// label within each course whenever both classes have at least five
/// instances there. Thread order within each part follows corpus order.
pub fn split_train_test(corpus: &Corpus, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    if corpus.threads.len() < 5 {
        return Err(CorpusError::TooSmall {
            need: 5,
            got: corpus.threads.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Courses in order of first appearance.
    let mut course_order: Vec<&str> = Vec::new();
    let mut by_course: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, t) in corpus.threads.iter().enumerate() {
        let entry = by_course.entry(t.course_id.as_str()).or_default();
        if entry.is_empty() {
            course_order.push(t.course_id.as_str());
        }
        entry.push(i);
    }

    let mut in_train = vec![false; corpus.threads.len()];
    let mark_split = |indices: &mut Vec<usize>, rng: &mut ChaCha20Rng, train: &mut [bool]| {
        indices.shuffle(rng);
        let n_train = (indices.len() as f64 * 0.8).round() as usize;
        for &i in indices.iter().take(n_train) {
            train[i] = true;
        }
    };
    for course in course_order {
        let indices = &by_course[course];
        let mut pos: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| corpus.threads[i].label == 1)
            .collect();
        let mut neg: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| corpus.threads[i].label == 0)
            .collect();
        if pos.len() >= 5 && neg.len() >= 5 {
            mark_split(&mut neg, &mut rng, &mut in_train);
            mark_split(&mut pos, &mut rng, &mut in_train);
        } else {
            let mut all = indices.clone();
            mark_split(&mut all, &mut rng, &mut in_train);
        }
    }

    let pick = |keep: bool| Corpus {
        threads: corpus
            .threads
            .iter()
            .enumerate()
            .filter(|(i, _)| in_train[*i] == keep)
            .map(|(_, t)| t.clone())
            .collect(),
        vocab: Vocab::default(),
    };
    Ok((pick(true), pick(false)))
}

// ── vocabulary ──────────────────────────────────────────────────────

/// Dense token→index map. The five placeholder tokens always occupy
/// indices 0..=4; everything else is ordered by descending train-corpus
/// frequency with ties broken alphabetically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect())
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn unk_id(&self) -> usize {
        self.index["<UNK>"]
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the newline-joined token list, hex-encoded. Ties a
    /// checkpoint to the training vocabulary.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Count tokens over the train corpus and keep those above `min_count`.
/// Built from the training split only, so test-only tokens encode to
/// `<UNK>`.
pub fn build_vocab(train: &Corpus, min_count: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for thread in &train.threads {
        for post in &thread.posts {
            for tok in tokenize(&post.text) {
                if !SPECIAL_TOKENS.contains(&tok.as_str()) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn student(id: &str, text: &str) -> String {
        format!(r#"{{"post_id":"{id}","author_role":"student","text":"{text}","is_comment":false}}"#)
    }

    fn instructor(id: &str, text: &str) -> String {
        format!(
            r#"{{"post_id":"{id}","author_role":"instructor","text":"{text}","is_comment":false}}"#
        )
    }

    fn raw_thread(id: &str, forum: &str, posts: &[String]) -> String {
        format!(
            r#"{{"thread_id":"{id}","course_id":"c1","forum":"{forum}","posts":[{}]}}"#,
            posts.join(",")
        )
    }

    #[test]
    fn load_single_thread_without_instructor() {
        let f = write_lines(&[&raw_thread(
            "t1",
            "Homework",
            &[student("p1", "hello"), student("p2", "world")],
        )]);
        let loaded = load_threads(f.path()).unwrap();
        assert_eq!(loaded.corpus.threads.len(), 1);
        assert_eq!(loaded.corpus.threads[0].label, 0);
        assert_eq!(loaded.corpus.threads[0].forum_type, ForumType::Homework);
    }

    #[test]
    fn load_labels_instructor_thread() {
        let f = write_lines(&[&raw_thread(
            "t1",
            "Quiz",
            &[
                student("p1", "a"),
                student("p2", "b"),
                instructor("p3", "answer"),
            ],
        )]);
        let loaded = load_threads(f.path()).unwrap();
        let t = &loaded.corpus.threads[0];
        assert_eq!(t.label, 1);
        assert_eq!(t.original_length, 3);
    }

    #[test]
    fn load_normalizes_assignments_to_homework() {
        let f = write_lines(&[&raw_thread("t1", "Assignments", &[student("p1", "x")])]);
        let loaded = load_threads(f.path()).unwrap();
        assert_eq!(loaded.corpus.threads[0].forum_type, ForumType::Homework);
    }

    #[test]
    fn load_rejects_malformed_line_with_number() {
        let f = write_lines(&[
            &raw_thread("t1", "Exam", &[student("p1", "x")]),
            "{not json",
        ]);
        let err = load_threads(f.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn normalize_forum_cases() {
        assert_eq!(
            normalize_forum("Assignments"),
            ForumNorm::Standard(ForumType::Homework)
        );
        assert_eq!(normalize_forum("Exam"), ForumNorm::Standard(ForumType::Exam));
        assert_eq!(normalize_forum("Meet and Greet"), ForumNorm::Social);
        assert_eq!(normalize_forum("Random Nonsense"), ForumNorm::Unknown);
        assert_eq!(
            normalize_forum("  LECTURE "),
            ForumNorm::Standard(ForumType::Lecture)
        );
    }

    #[test]
    fn replace_tokens_url() {
        assert_eq!(
            replace_tokens("see https://x.y/z for details"),
            "see <URL> for details"
        );
        assert_eq!(replace_tokens("at www.example.com now"), "at <URL> now");
    }

    #[test]
    fn replace_tokens_time_and_math() {
        assert_eq!(
            replace_tokens("at 12:34 the slide says $x^2+1$"),
            "at <TIMEREF> the slide says <MATH>"
        );
        assert_eq!(replace_tokens("equation x^2=y_1 holds"), "equation <MATH> holds");
        assert_eq!(replace_tokens("see 1:02:03 in the video"), "see <TIMEREF> in the video");
    }

    #[test]
    fn replace_tokens_idempotent() {
        let samples = [
            "<URL>",
            "see https://x.y/z at 12:34 where $a=b$",
            "plain text stays",
            "x^2=1 and \\(y\\) and \\[z\\]",
        ];
        for s in samples {
            let once = replace_tokens(s);
            assert_eq!(replace_tokens(&once), once, "not idempotent on {s:?}");
        }
    }

    #[test]
    fn tokenize_splits_and_lowercases() {
        assert_eq!(
            tokenize("Hello, World! <URL> x2"),
            vec!["hello", "world", "<URL>", "x2"]
        );
        assert_eq!(tokenize("...!!!"), vec!["<EMPTY>"]);
    }

    fn thread_with_roles(roles: &[Role]) -> Thread {
        Thread {
            thread_id: "t".into(),
            course_id: "c".into(),
            forum_raw: "Homework".into(),
            forum_type: ForumType::Homework,
            posts: roles
                .iter()
                .enumerate()
                .map(|(i, r)| Post {
                    post_id: format!("p{i}"),
                    author_role: *r,
                    text: format!("post {i}"),
                    is_comment: false,
                    tokens: vec![],
                })
                .collect(),
            label: 0,
            original_length: roles.len(),
            signal_post: None,
        }
    }

    #[test]
    fn truncation_rules() {
        use Role::*;
        let t = thread_with_roles(&[Student, Student, Instructor, Student]);
        match truncate_at_intervention(t) {
            Truncation::Kept(t) => {
                assert_eq!(t.posts.len(), 2);
                assert_eq!(t.label, 1);
            }
            _ => panic!("expected kept"),
        }
        let t = thread_with_roles(&[Student, Student]);
        match truncate_at_intervention(t) {
            Truncation::Kept(t) => {
                assert_eq!(t.posts.len(), 2);
                assert_eq!(t.label, 0);
            }
            _ => panic!("expected kept"),
        }
        let t = thread_with_roles(&[Instructor, Student, Student]);
        assert!(matches!(
            truncate_at_intervention(t),
            Truncation::ExcludedInstructorFirst
        ));
    }

    #[test]
    fn preprocess_leaves_no_instructor_posts() {
        use Role::*;
        let corpus = Corpus {
            threads: vec![
                thread_with_roles(&[Student, Instructor, Student]),
                thread_with_roles(&[Student, Student]),
                thread_with_roles(&[Instructor, Student]),
            ],
            vocab: Vocab::default(),
        };
        let (processed, report) = preprocess(corpus, &PreprocessOptions::default());
        assert_eq!(processed.threads.len(), 2);
        assert_eq!(report.excluded_instructor_first, 1);
        assert_eq!(report.truncated, 1);
        for t in &processed.threads {
            assert!(t.posts.iter().all(|p| p.author_role == Role::Student));
        }
        assert_eq!(processed.threads[0].label, 1);
        assert_eq!(processed.threads[1].label, 0);
    }

    #[test]
    fn comment_reordering_groups_after_parent() {
        let mut t = thread_with_roles(&[Role::Student, Role::Student, Role::Student]);
        t.posts[1].is_comment = true; // comment on p0
        let reordered = reorder_comments(t.posts.clone(), CommentOrder::AfterParent);
        let ids: Vec<&str> = reordered.iter().map(|p| p.post_id.as_str()).collect();
        assert_eq!(ids, vec!["p0", "p1", "p2"]);

        let mut t2 = thread_with_roles(&[Role::Student, Role::Student, Role::Student, Role::Student]);
        t2.posts[2].is_comment = true; // comment arrives late, belongs to p1
        let mut swapped = t2.posts.clone();
        swapped.swap(2, 3); // chronological: p0 p1 p3 p2(comment)
        let reordered = reorder_comments(swapped, CommentOrder::AfterParent);
        let ids: Vec<&str> = reordered.iter().map(|p| p.post_id.as_str()).collect();
        assert_eq!(ids, vec!["p0", "p1", "p3", "p2"]);
    }

    #[test]
    fn split_is_deterministic_and_eighty_twenty() {
        let threads: Vec<Thread> = (0..100)
            .map(|i| {
                let mut t = thread_with_roles(&[Role::Student, Role::Student]);
                t.thread_id = format!("t{i}");
                t.label = u8::from(i < 20);
                t
            })
            .collect();
        let corpus = Corpus {
            threads,
            vocab: Vocab::default(),
        };
        let (train, test) = split_train_test(&corpus, 7).unwrap();
        assert_eq!(train.threads.len(), 80);
        assert_eq!(test.threads.len(), 20);
        let train_pos = train.threads.iter().filter(|t| t.label == 1).count();
        let test_pos = test.threads.iter().filter(|t| t.label == 1).count();
        assert_eq!(train_pos, 16);
        assert_eq!(test_pos, 4);

        let (train2, test2) = split_train_test(&corpus, 7).unwrap();
        let ids = |c: &Corpus| c.threads.iter().map(|t| t.thread_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
        assert_eq!(ids(&test), ids(&test2));

        let (train3, _) = split_train_test(&corpus, 8).unwrap();
        assert_ne!(ids(&train), ids(&train3), "different seeds should differ");
    }

    #[test]
    fn split_rejects_tiny_corpus() {
        let corpus = Corpus {
            threads: vec![thread_with_roles(&[Role::Student])],
            vocab: Vocab::default(),
        };
        assert!(matches!(
            split_train_test(&corpus, 1),
            Err(CorpusError::TooSmall { .. })
        ));
    }

    fn text_corpus(texts: &[&str]) -> Corpus {
        Corpus {
            threads: texts
                .iter()
                .enumerate()
                .map(|(i, text)| {
                    let mut t = thread_with_roles(&[Role::Student]);
                    t.thread_id = format!("t{i}");
                    t.posts[0].text = text.to_string();
                    t
                })
                .collect(),
            vocab: Vocab::default(),
        }
    }

    #[test]
    fn vocab_respects_min_count() {
        let corpus = text_corpus(&["a b", "b c"]);
        let v1 = build_vocab(&corpus, 1);
        assert!(v1.contains("a") && v1.contains("b") && v1.contains("c"));
        let v2 = build_vocab(&corpus, 2);
        assert!(v2.contains("b"));
        assert!(!v2.contains("a") && !v2.contains("c"));
        assert_eq!(v2.id("a"), v2.unk_id());
    }

    #[test]
    fn vocab_specials_always_present() {
        let v = build_vocab(&text_corpus(&[]), 2);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
    }

    #[test]
    fn test_only_token_encodes_to_unk() {
        let train = text_corpus(&["known words here", "known words again"]);
        let vocab = build_vocab(&train, 1);
        let mut test = text_corpus(&["unseen mystery"]);
        test.encode_tokens(&vocab);
        let toks = &test.threads[0].posts[0].tokens;
        assert!(toks.iter().all(|&t| t == vocab.unk_id()));
    }

    #[test]
    fn corpus_roundtrip_is_byte_identical() {
        let f = write_lines(&[
            &raw_thread(
                "t1",
                "Homework",
                &[student("p1", "see https://x.y at 12:34"), instructor("p2", "ok")],
            ),
            &raw_thread("t2", "Lecture", &[student("p1", "plain")]),
        ]);
        let loaded = load_threads(f.path()).unwrap();
        let (processed, _) = preprocess(loaded.corpus, &PreprocessOptions::default());
        let first = corpus_to_string(&processed);

        let mut f2 = tempfile::NamedTempFile::new().unwrap();
        f2.write_all(first.as_bytes()).unwrap();
        f2.flush().unwrap();
        let reloaded = load_threads(f2.path()).unwrap();
        let second = corpus_to_string(&reloaded.corpus);
        assert_eq!(first, second);
    }

    #[test]
    fn preprocess_is_idempotent_on_its_own_output() {
        use Role::*;
        let corpus = Corpus {
            threads: vec![thread_with_roles(&[Student, Instructor])],
            vocab: Vocab::default(),
        };
        let (once, _) = preprocess(corpus, &PreprocessOptions::default());
        let first = corpus_to_string(&once);
        let (twice, report) = preprocess(once, &PreprocessOptions::default());
        assert_eq!(corpus_to_string(&twice), first);
        assert_eq!(report.excluded_instructor_first, 0);
    }

    #[test]
    fn intervention_ratio_from_labels() {
        let mut threads: Vec<Thread> = Vec::new();
        for i in 0..30 {
            let mut t = thread_with_roles(&[Role::Student]);
            t.thread_id = format!("t{i}");
            t.label = u8::from(i < 10);
            threads.push(t);
        }
        let corpus = Corpus {
            threads,
            vocab: Vocab::default(),
        };
        assert!((corpus.intervention_ratio() - 0.5).abs() < 1e-12);
    }
}
