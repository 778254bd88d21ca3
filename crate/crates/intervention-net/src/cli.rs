//! Single-binary command surface: `synth`, `preprocess`, `train`, `eval`
//! and `introspect`. Every command writes a run manifest next to its main
//! output with input/output hashes, the seed, the configuration snapshot
//! and wall-clock timings. Exit codes: 0 ok, 2 usage, 3 data error,
//! 4 numeric error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdError;
use crate::baseline::{extract_features, AgreementLexicon};
use crate::corpus::{self, load_threads, preprocess, CorpusError, PreprocessOptions};
use crate::eval::{render_bins_csv, render_metrics_jsonl, render_metrics_text};
use crate::pipeline::{self, PipelineError};
use crate::train::{load_checkpoint, ModelKind, TrainConfig, TrainError};

pub const ENV_SEED: &str = "INTERVENTION_NET_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn data_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: message.into(),
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        data_err(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        data_err(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGrad { .. } | TrainError::Ad(_) => {
                EXIT_NUMERIC
            }
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<AdError> for CliError {
    fn from(e: AdError) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Corpus(c) => c.into(),
            PipelineError::Train(t) => t.into(),
            PipelineError::Eval(ev) => data_err(ev.to_string()),
            PipelineError::VocabHashMismatch { .. } | PipelineError::UnsupportedModel(_) => {
                data_err(e.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Hlstm,
    Upa,
    Ppa,
    Apa,
    Logreg,
}

impl From<VariantArg> for ModelKind {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Hlstm => ModelKind::Hlstm,
            VariantArg::Upa => ModelKind::Upa,
            VariantArg::Ppa => ModelKind::Ppa,
            VariantArg::Apa => ModelKind::Apa,
            VariantArg::Logreg => ModelKind::Logreg,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "intervention-net",
    version,
    about = "Train and inspect instructor-intervention predictors for forum threads"
)]
pub struct Cli {
    /// Seed override; falls back to INTERVENTION_NET_SEED, then the
    /// config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file (flat keys); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize, truncate and token-replace a raw corpus.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a model variant on the 80% split of a corpus.
    Train {
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        corpus: PathBuf,
        /// "random" or a path to pretrained word vectors.
        #[arg(long)]
        embeddings: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out 20% split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for metrics.txt / metrics.jsonl / length_bins.csv /
        /// traces.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Also export per-thread sparse feature vectors.
        #[arg(long)]
        export_features: Option<PathBuf>,
    },
    /// Summarize attention traces of a checkpoint on the held-out split.
    Introspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// ── run manifest ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
    pub started_unix_ms: u128,
    pub duration_ms: u128,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FileStamp {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn stamp(path: &Path) -> Result<FileStamp, CliError> {
    Ok(FileStamp {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

struct ManifestBuilder {
    command: String,
    seed: u64,
    config: TrainConfig,
    inputs: Vec<FileStamp>,
    started: Instant,
    started_unix_ms: u128,
}

impl ManifestBuilder {
    fn new(command: &str, seed: u64, config: &TrainConfig) -> ManifestBuilder {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config: config.clone(),
            inputs: Vec::new(),
            started: Instant::now(),
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(stamp(path)?);
        Ok(())
    }

    fn write(self, outputs: &[&Path], beside: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: outputs
                .iter()
                .map(|p| stamp(p))
                .collect::<Result<_, _>>()?,
            started_unix_ms: self.started_unix_ms,
            duration_ms: self.started.elapsed().as_millis(),
        };
        let path = beside.with_extension(match beside.extension() {
            Some(ext) => format!("{}.manifest.json", ext.to_string_lossy()),
            None => "manifest.json".to_string(),
        });
        fs::write(path, serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(())
    }
}

// ── command dispatch ────────────────────────────────────────────────

/// Resolve the effective config: file, then env seed, then flags.
fn resolve_config(cli: &Cli) -> Result<TrainConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            TrainConfig::from_toml(&text)
                .map_err(|e| data_err(format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Ok(env_seed) = std::env::var(ENV_SEED) {
        config.seed = env_seed
            .parse()
            .map_err(|_| data_err(format!("{ENV_SEED} must be an integer, got {env_seed:?}")))?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(&config, &spec, &out),
        Command::Preprocess { input, out, report } => {
            cmd_preprocess(&config, &input, &out, report.as_deref())
        }
        Command::Train {
            variant,
            corpus,
            embeddings,
            out,
        } => cmd_train(config, variant, &corpus, embeddings, &out),
        Command::Eval {
            model,
            corpus,
            out,
            workers,
            export_features,
        } => cmd_eval(
            &config,
            &model,
            &corpus,
            out.as_deref(),
            workers,
            export_features.as_deref(),
        ),
        Command::Introspect { model, corpus, out } => {
            cmd_introspect(&config, &model, &corpus, out.as_deref())
        }
    }
}

fn cmd_synth(config: &TrainConfig, spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("synth", config.seed, config);
    manifest.input(spec_path)?;
    let text = fs::read_to_string(spec_path)?;
    let spec: corpus::synth::SynthSpec =
        toml::from_str(&text).map_err(|e| data_err(format!("spec: {e}")))?;
    let generated = corpus::synth::synth_generate(&spec)?;
    corpus::write_corpus(&generated, out)?;
    let pos = generated.threads.iter().filter(|t| t.label == 1).count();
    println!(
        "wrote {} threads ({} intervened, i.ratio {:.2}) to {}",
        generated.threads.len(),
        pos,
        generated.intervention_ratio(),
        out.display()
    );
    manifest.write(&[out], out)
}

fn cmd_preprocess(
    config: &TrainConfig,
    input: &Path,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("preprocess", config.seed, config);
    manifest.input(input)?;
    let opts = PreprocessOptions {
        aliases: None,
        comment_order: config.comment_order,
    };
    let loaded = corpus::load_threads_with(input, &opts)?;
    let (processed, mut report) = preprocess(loaded.corpus, &opts);
    report.records = loaded.report.records;
    report.excluded_social_forum = loaded.report.excluded_social_forum;
    report.excluded_unknown_forum = loaded.report.excluded_unknown_forum;
    report.excluded_empty = loaded.report.excluded_empty;
    report.rejected.extend(loaded.report.rejected);
    corpus::write_corpus(&processed, out)?;
    println!(
        "kept {}/{} threads ({} truncated, {} instructor-first, {} social, {} unknown forum)",
        report.kept,
        report.records,
        report.truncated,
        report.excluded_instructor_first,
        report.excluded_social_forum,
        report.excluded_unknown_forum,
    );
    let mut outputs: Vec<&Path> = vec![out];
    if let Some(rp) = report_path {
        fs::write(rp, serde_json::to_string_pretty(&report).unwrap())?;
        outputs.push(rp);
    }
    manifest.write(&outputs, out)
}

fn cmd_train(
    mut config: TrainConfig,
    variant: Option<VariantArg>,
    corpus_path: &Path,
    embeddings: Option<String>,
    out: &Path,
) -> Result<(), CliError> {
    if let Some(v) = variant {
        config.variant = v.into();
    }
    if let Some(e) = embeddings {
        config.embeddings = e;
    }
    let mut manifest = ManifestBuilder::new("train", config.seed, &config);
    manifest.input(corpus_path)?;

    let loaded = load_threads(corpus_path)?;
    let embedding_path = match config.embeddings.as_str() {
        "random" => None,
        path => Some(PathBuf::from(path)),
    };
    if let Some(p) = &embedding_path {
        manifest.input(p)?;
    }
    let trained = pipeline::train_model_with_embeddings(
        &config,
        &loaded.corpus,
        embedding_path.as_deref(),
    )?;
    crate::train::save_checkpoint(&trained.checkpoint, out)?;
    let mean_loss = if trained.loss_log.is_empty() {
        f64::NAN
    } else {
        trained.loss_log.iter().sum::<f64>() / trained.loss_log.len() as f64
    };
    println!(
        "trained {} on {} ({} updates, mean loss {:.4}); checkpoint {}",
        config.variant.name(),
        corpus_path.display(),
        trained.loss_log.len(),
        mean_loss,
        out.display()
    );
    manifest.write(&[out], out)
}

fn cmd_eval(
    config: &TrainConfig,
    model: &Path,
    corpus_path: &Path,
    out_dir: Option<&Path>,
    workers: Option<usize>,
    export_features: Option<&Path>,
) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("eval", config.seed, config);
    manifest.input(model)?;
    manifest.input(corpus_path)?;

    let checkpoint = load_checkpoint(model)?;
    let loaded = load_threads(corpus_path)?;
    let workers = workers.unwrap_or(checkpoint.config.workers);
    let evaluation = pipeline::evaluate(&checkpoint, &loaded.corpus, workers)?;

    let text = render_metrics_text(&evaluation.report);
    print!("{text}");

    let mut written: Vec<PathBuf> = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let files = [
            ("metrics.txt", text.clone()),
            ("metrics.jsonl", render_metrics_jsonl(&evaluation.report)),
            ("length_bins.csv", render_bins_csv(&evaluation.bins)),
            (
                "traces.jsonl",
                evaluation
                    .traces
                    .iter()
                    .map(|t| serde_json::to_string(t).unwrap() + "\n")
                    .collect::<String>(),
            ),
        ];
        for (name, content) in files {
            let path = dir.join(name);
            fs::write(&path, content)?;
            written.push(path);
        }
    }
    if let Some(features_path) = export_features {
        let prepared = pipeline::prepare(&loaded.corpus, &checkpoint.config)?;
        let lexicon = AgreementLexicon::default();
        let mut content = String::new();
        for t in &prepared.test.threads {
            let fv = extract_features(
                t,
                &prepared.vocab,
                &lexicon,
                checkpoint.config.agreement_norm,
            );
            content.push_str(&format!("{} {}\n", t.thread_id, fv.to_sparse_text()));
        }
        fs::write(features_path, content)?;
        written.push(features_path.to_path_buf());
    }
    let beside = out_dir
        .map(|d| d.join("metrics.txt"))
        .unwrap_or_else(|| model.to_path_buf());
    let outputs: Vec<&Path> = written.iter().map(|p| p.as_path()).collect();
    manifest.write(&outputs, &beside)
}

fn cmd_introspect(
    config: &TrainConfig,
    model: &Path,
    corpus_path: &Path,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("introspect", config.seed, config);
    manifest.input(model)?;
    manifest.input(corpus_path)?;

    let checkpoint = load_checkpoint(model)?;
    let loaded = load_threads(corpus_path)?;
    let report = pipeline::introspect_model(&checkpoint, &loaded.corpus, checkpoint.config.workers)?;

    println!(
        "threads: {}  argmax position: first {} / middle {} / last {}",
        report.rows.len(),
        report.argmax_position.first,
        report.argmax_position.middle,
        report.argmax_position.last
    );
    println!(
        "mean final-context mass {:.4} vs uniform baseline {:.4}",
        report.mean_final_context_mass, report.mean_uniform_baseline
    );
    if let Some(mass) = report.mean_signal_mass {
        println!("mean mass on signal-bearing contexts {mass:.4}");
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&report).unwrap())?;
        manifest.write(&[path], path)?;
    }
    Ok(())
}
