//! End-to-end orchestration shared by the CLI and the test suites:
//! split a corpus 80/20, build the vocabulary from the training split,
//! tokenize, train (neural or logistic-regression), and evaluate a frozen
//! checkpoint on the held-out split.

use thiserror::Error;

use crate::baseline::{
    classify_logreg, extract_features, train_logreg, AgreementLexicon, LogRegParams,
};
use crate::corpus::{build_vocab, split_train_test, Corpus, CorpusError, Vocab};
use crate::eval::{
    self, bin_recall_by_length, metrics_report, EvalError, IntrospectionReport, LengthBinReport,
    MetricsReport, ThreadOutcome, TraceRecord,
};
use crate::train::{
    self, load_checkpoint, load_embeddings, outcomes_for, save_checkpoint, Checkpoint,
    LengthBasis, ModelBlob, ModelKind, TrainConfig, TrainError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(
        "vocab hash mismatch: checkpoint {checkpoint} vs corpus train split {corpus}; \
         refusing to evaluate against a different corpus"
    )]
    VocabHashMismatch { checkpoint: String, corpus: String },
    #[error("model kind does not support this operation: {0}")]
    UnsupportedModel(String),
}

/// Deterministic corpus preparation: 80/20 split, vocabulary from the
/// training split only, tokens encoded on both sides.
#[derive(Debug)]
pub struct Prepared {
    pub train: Corpus,
    pub test: Corpus,
    pub vocab: Vocab,
}

pub fn prepare(corpus: &Corpus, config: &TrainConfig) -> Result<Prepared, PipelineError> {
    let (mut train, mut test) = split_train_test(corpus, config.seed)?;
    let vocab = build_vocab(&train, config.min_count);
    train.encode_tokens(&vocab);
    test.encode_tokens(&vocab);
    train.vocab = vocab.clone();
    test.vocab = vocab.clone();
    Ok(Prepared { train, test, vocab })
}

#[derive(Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    /// Per-update training loss for neural models; empty for logreg.
    pub loss_log: Vec<f64>,
}

/// Train on the 80% split and wrap the result in a checkpoint tied to the
/// training vocabulary by hash.
pub fn train_model(config: &TrainConfig, corpus: &Corpus) -> Result<Trained, PipelineError> {
    train_model_with_embeddings(config, corpus, None)
}

pub fn train_model_with_embeddings(
    config: &TrainConfig,
    corpus: &Corpus,
    embedding_path: Option<&std::path::Path>,
) -> Result<Trained, PipelineError> {
    let prepared = prepare(corpus, config)?;
    let (model, loss_log) = match config.variant.neural() {
        Some(_) => {
            let rows =
                load_embeddings(embedding_path, &prepared.vocab, config.embed, config.seed)?;
            let outcome = train::train(config, &prepared.train, rows)?;
            (
                ModelBlob::Neural(outcome.params.to_blob()),
                outcome.loss_log,
            )
        }
        None => {
            let params = fit_logreg(config, &prepared.train);
            (ModelBlob::Logreg(params), Vec::new())
        }
    };
    Ok(Trained {
        checkpoint: Checkpoint {
            magic: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            vocab: prepared.vocab.clone(),
            vocab_hash: prepared.vocab.hash(),
            model,
        },
        loss_log,
    })
}

fn fit_logreg(config: &TrainConfig, train: &Corpus) -> LogRegParams {
    let lexicon = AgreementLexicon::default();
    let data: Vec<_> = train
        .threads
        .iter()
        .map(|t| {
            (
                extract_features(t, &train.vocab, &lexicon, config.agreement_norm),
                t.label,
            )
        })
        .collect();
    let (params, summary) = train_logreg(&data, config.l2, config.logreg_iters);
    if let Some(w) = summary.warning {
        eprintln!("warning: {w}");
    }
    params
}

/// Everything `eval` emits for one (checkpoint, corpus) pair.
#[derive(Debug)]
pub struct Evaluation {
    pub outcomes: Vec<ThreadOutcome>,
    pub report: MetricsReport,
    pub bins: LengthBinReport,
    pub traces: Vec<TraceRecord>,
}

/// Re-derive the held-out split from the checkpoint's seed, verify the
/// vocabulary hash, and evaluate the frozen model on the test threads.
pub fn evaluate(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    workers: usize,
) -> Result<Evaluation, PipelineError> {
    let prepared = prepare(corpus, &checkpoint.config)?;
    let corpus_hash = prepared.vocab.hash();
    if corpus_hash != checkpoint.vocab_hash {
        return Err(PipelineError::VocabHashMismatch {
            checkpoint: checkpoint.vocab_hash.clone(),
            corpus: corpus_hash,
        });
    }

    let (outcomes, traces) = match &checkpoint.model {
        ModelBlob::Neural(blob) => outcomes_for(blob, &prepared.test, workers)?,
        ModelBlob::Logreg(params) => {
            let lexicon = AgreementLexicon::default();
            let outcomes = prepared
                .test
                .threads
                .iter()
                .map(|t| {
                    let fv = extract_features(
                        t,
                        &prepared.vocab,
                        &lexicon,
                        checkpoint.config.agreement_norm,
                    );
                    train::thread_outcome(t, classify_logreg(params, &fv))
                })
                .collect();
            (outcomes, Vec::new())
        }
    };

    let report = metrics_report(&outcomes)?;
    let lengths: Vec<usize> = outcomes
        .iter()
        .map(|o| match checkpoint.config.length_bin_basis {
            LengthBasis::Model => o.length,
            LengthBasis::Raw => o.raw_length,
        })
        .collect();
    let preds: Vec<u8> = outcomes.iter().map(|o| o.predicted).collect();
    let labels: Vec<u8> = outcomes.iter().map(|o| o.label).collect();
    let bins = bin_recall_by_length(&preds, &labels, &lengths)?;
    Ok(Evaluation {
        outcomes,
        report,
        bins,
        traces,
    })
}

/// Introspection over the held-out split; requires an attention variant.
pub fn introspect_model(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    workers: usize,
) -> Result<IntrospectionReport, PipelineError> {
    match checkpoint.config.variant {
        ModelKind::Logreg | ModelKind::Hlstm => {
            return Err(PipelineError::UnsupportedModel(format!(
                "{} produces no attention traces",
                checkpoint.config.variant.name()
            )))
        }
        _ => {}
    }
    let prepared = prepare(corpus, &checkpoint.config)?;
    let evaluation = evaluate(checkpoint, corpus, workers)?;
    Ok(eval::introspect(&evaluation.traces, &prepared.test)?)
}

/// Train/eval convenience for tests: returns the evaluation of a freshly
/// trained model on its own held-out split.
pub fn train_and_evaluate(
    config: &TrainConfig,
    corpus: &Corpus,
) -> Result<(Trained, Evaluation), PipelineError> {
    let trained = train_model(config, corpus)?;
    let evaluation = evaluate(&trained.checkpoint, corpus, config.workers)?;
    Ok((trained, evaluation))
}

/// Round-trip a checkpoint through disk (used by the CLI and determinism
/// checks).
pub fn save_and_reload(
    checkpoint: &Checkpoint,
    path: &std::path::Path,
) -> Result<Checkpoint, PipelineError> {
    save_checkpoint(checkpoint, path)?;
    Ok(load_checkpoint(path)?)
}
