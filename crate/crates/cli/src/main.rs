use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use docqa::bench::{self, ReportFormat};
use docqa::config::{PipelineConfig, QueryOverrides};
use docqa::corpus::{ingest_dir, load_chunks, save_chunks};
use docqa::datagen::{
    self, LlmLabeler, PositiveMode, ReferenceLabeler, RelevanceLabeler, RerankQuestion, TermList,
};
use docqa::generation::{CannedClient, ChatClient};
use docqa::http::HttpTransport;
use docqa::lexical::LexicalEngine;
use docqa::losses::{evaluate_loss_json, LossKind};
use docqa::pipeline::{generator_from_config, Pipeline};
use docqa_service::QueryRequest;

#[derive(Parser)]
#[command(
    name = "docqa",
    version,
    about = "Retrieval-augmented QA over tool documentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `paths.chunks`.
    #[arg(long)]
    chunks: Option<PathBuf>,
    /// Overrides `paths.index_dir`.
    #[arg(long)]
    index_dir: Option<PathBuf>,
    /// Overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(c) = &self.chunks {
            cfg.paths.chunks = Some(c.clone());
        }
        if let Some(d) = &self.index_dir {
            cfg.paths.index_dir = Some(d.clone());
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline::from_config(self.load()?)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split a markdown tree into section chunks.
    Ingest {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = docqa::corpus::DEFAULT_MAX_DEPTH)]
        max_depth: usize,
    },
    /// Build and persist the lexical index and vector store.
    Index {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question and print the response as JSON.
    Query(QueryArgs),
    /// Benchmark runs and dataset import.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Build training datasets.
    Datagen {
        #[command(subcommand)]
        command: DatagenCommand,
    },
    /// Loss calculators.
    Loss {
        #[command(subcommand)]
        command: LossCommand,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Allowed console origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    question: String,
    #[arg(long)]
    lexical_k: Option<usize>,
    #[arg(long)]
    semantic_k: Option<usize>,
    #[arg(long)]
    rerank_k: Option<usize>,
    #[arg(long)]
    rrf_const: Option<f64>,
    #[arg(long, value_enum)]
    lexical_engine: Option<Engine>,
    #[arg(long)]
    rerank_backend: Option<String>,
    #[arg(long)]
    token_budget: Option<usize>,
    /// Print a single line instead of pretty JSON.
    #[arg(long)]
    compact: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Bm25,
    Tfidf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Report path; the extension picks json, csv or md.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// recall@k of lexical, semantic and hybrid retrieval.
    Retrieval {
        #[command(flatten)]
        args: BenchArgs,
        #[arg(long, value_delimiter = ',', default_values_t = bench::RETRIEVAL_K)]
        k: Vec<usize>,
    },
    /// recall@k after reranking the hybrid pool.
    Rerank {
        #[command(flatten)]
        args: BenchArgs,
        /// Backend name; `oracle` scores the dataset's references first.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, value_delimiter = ',', default_values_t = bench::RERANK_K)]
        k: Vec<usize>,
    },
    /// BLEU, ROUGE-L and judge consistency of generated answers.
    E2e {
        #[command(flatten)]
        args: BenchArgs,
    },
    /// Convert a published ORD-QA file into the benchmark dataset format.
    Import {
        #[arg(long)]
        input: PathBuf,
        /// Chunk store used to resolve reference passages to chunk ids.
        #[arg(long)]
        chunks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding `canned.json`, a canned client transcript used
    /// instead of the configured generator.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DatagenCommand {
    /// Contrastive (query, positive, negative) triplets by term substitution.
    Triplets {
        #[command(flatten)]
        args: DatagenArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Term list, one per line; the bundled list when omitted.
        #[arg(long)]
        terms: Option<PathBuf>,
        /// Use only the first N terms.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Answer)]
        positive: Mode,
    },
    /// Positive/negative chunk partitions of the hybrid pool.
    Reranker {
        #[command(flatten)]
        args: DatagenArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Benchmark-format dataset whose questions are labelled.
        #[arg(long)]
        questions: PathBuf,
        /// `reference` marks the dataset's references relevant without an LLM.
        #[arg(long, value_enum, default_value_t = Labels::Llm)]
        labels: Labels,
        #[arg(long, default_value_t = datagen::RERANK_POOL_K)]
        lexical_k: usize,
        #[arg(long, default_value_t = datagen::RERANK_POOL_K)]
        semantic_k: usize,
    },
    /// (question, references, answer) triplets from random chunk pools.
    Instruct {
        #[command(flatten)]
        args: DatagenArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long, default_value_t = datagen::INSTRUCT_POOL_SIZE)]
        pool_size: usize,
        #[arg(long, default_value_t = datagen::DEFAULT_REASKS)]
        max_reasks: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Answer,
    Paraphrase,
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    Llm,
    Reference,
}

#[derive(Subcommand)]
enum LossCommand {
    /// Evaluate a loss, its gradient and a finite-difference check.
    Eval {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Embedding,
    Reranker,
    Nll,
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            docs,
            out,
            max_depth,
        } => {
            let seg = ingest_dir(&docs, max_depth)?;
            for w in &seg.warnings {
                log::warn!("{w}");
            }
            save_chunks(&seg.chunks, &out)?;
            log::info!("wrote {} chunks to {}", seg.chunks.len(), out.display());
        }
        Command::Index { cfg, out } => {
            let cfg = cfg.load()?;
            let path = cfg
                .paths
                .chunks
                .clone()
                .context("no chunk store: pass --chunks or set paths.chunks")?;
            let chunks = load_chunks(&path)?;
            let n = chunks.len();
            let pipeline = Pipeline::builder(cfg, chunks).build()?;
            pipeline.save_indexes(&out)?;
            log::info!("indexed {n} chunks into {}", out.display());
        }
        Command::Query(q) => {
            let pipeline = q.cfg.pipeline()?;
            let req = QueryRequest {
                question: q.question,
                overrides: QueryOverrides {
                    lexical_k: q.lexical_k,
                    semantic_k: q.semantic_k,
                    rerank_k: q.rerank_k,
                    rrf_const: q.rrf_const,
                    lexical_engine: q.lexical_engine.map(|e| match e {
                        Engine::Bm25 => LexicalEngine::Bm25,
                        Engine::Tfidf => LexicalEngine::Tfidf,
                    }),
                    rerank_backend: q.rerank_backend,
                    token_budget: q.token_budget,
                },
            };
            let resp = docqa_service::answer(&pipeline, &req)?;
            let text = if q.compact {
                serde_json::to_string(&resp)?
            } else {
                serde_json::to_string_pretty(&resp)?
            };
            emit(&text)?;
        }
        Command::Bench { command } => bench_cmd(command)?,
        Command::Datagen { command } => datagen_cmd(command)?,
        Command::Loss {
            command: LossCommand::Eval { kind, input },
        } => {
            let bytes =
                std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let kind = match kind {
                Kind::Embedding => LossKind::Embedding,
                Kind::Reranker => LossKind::Reranker,
                Kind::Nll => LossKind::Nll,
            };
            let report = evaluate_loss_json(kind, &bytes)?;
            emit(&serde_json::to_string_pretty(&report)?)?;
        }
        Command::Serve {
            cfg,
            bind,
            cors_origin,
        } => {
            let pipeline = Arc::new(cfg.pipeline()?);
            log::info!(
                "loaded {} chunks, config {}",
                pipeline.chunks().len(),
                pipeline.config().hash()
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(docqa_service::serve(
                pipeline,
                &bind,
                cors_origin.as_deref(),
            ))?;
        }
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn report_format(out: &Path) -> Result<ReportFormat> {
    ReportFormat::from_path(out).with_context(|| {
        format!(
            "cannot tell report format from `{}`; use .json, .csv or .md",
            out.display()
        )
    })
}

fn bench_cmd(command: BenchCommand) -> Result<()> {
    let (args, report) = match command {
        BenchCommand::Import { input, chunks, out } => {
            let bytes =
                std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let chunks = chunks.map(|p| load_chunks(&p)).transpose()?;
            let imported = bench::import_ordqa(&bytes, chunks.as_deref())?;
            for w in &imported.warnings {
                log::warn!("{w}");
            }
            imported.dataset.save(&out)?;
            let counts = imported.dataset.category_counts();
            log::info!(
                "imported {} records {:?} to {}",
                imported.dataset.len(),
                counts,
                out.display()
            );
            return Ok(());
        }
        BenchCommand::Retrieval { args, k } => {
            let format = report_format(&args.out)?;
            let pipeline = args.cfg.pipeline()?;
            let ds = bench::load_dataset(&args.dataset)?;
            let r = bench::eval_retrieval(&pipeline, &ds, &k)?;
            (args, (format, r))
        }
        BenchCommand::Rerank { args, backend, k } => {
            let format = report_format(&args.out)?;
            let ds = bench::load_dataset(&args.dataset)?;
            let cfg = args.cfg.load()?;
            let backend = backend.unwrap_or_else(|| cfg.rerank.backend.clone());
            let pipeline = if backend == "oracle" {
                let chunks_path = cfg
                    .paths
                    .chunks
                    .clone()
                    .context("no chunk store configured")?;
                let chunks = load_chunks(&chunks_path)?;
                let mut b = Pipeline::builder(cfg.clone(), chunks)
                    .reranker("oracle", Arc::new(bench::oracle_reranker(&ds)));
                if let Some(dir) = &cfg.paths.index_dir {
                    if let Ok(i) = docqa::lexical::InvertedIndex::load(
                        &dir.join(docqa::pipeline::LEXICAL_INDEX_FILE),
                    ) {
                        b = b.index(i);
                    }
                    if let Ok(s) = docqa::vector::VectorStore::load(
                        &dir.join(docqa::pipeline::VECTOR_STORE_FILE),
                    ) {
                        b = b.store(s);
                    }
                }
                b.build()?
            } else {
                Pipeline::from_config(cfg)?
            };
            let r = bench::eval_rerank(&pipeline, &ds, &backend, &k)?;
            (args, (format, r))
        }
        BenchCommand::E2e { args } => {
            let format = report_format(&args.out)?;
            let pipeline = args.cfg.pipeline()?;
            let ds = bench::load_dataset(&args.dataset)?;
            let r = bench::eval_end_to_end(&pipeline, &ds)?;
            (args, (format, r))
        }
    };
    let (format, report) = report;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    bench::emit_report(&report, format, &args.out)?;
    log::info!(
        "{} records ({} failed), report written to {}",
        report.overall.records,
        report.overall.failed,
        args.out.display()
    );
    Ok(())
}

fn chat_client(args: &DatagenArgs, cfg: &PipelineConfig) -> Result<Arc<dyn ChatClient>> {
    Ok(match &args.fixture {
        Some(dir) => Arc::new(CannedClient::load(&dir.join("canned.json"))?),
        None => generator_from_config(
            cfg,
            Arc::new(HttpTransport::new(Duration::from_millis(cfg.timeout_ms))),
        )?,
    })
}

fn log_rejections(rejected: &[datagen::Rejection]) {
    for r in rejected {
        log::warn!("rejected {}: {}", r.item, r.reason);
    }
}

fn datagen_cmd(command: DatagenCommand) -> Result<()> {
    match command {
        DatagenCommand::Triplets {
            args,
            cfg,
            terms,
            limit,
            positive,
        } => {
            let cfg = cfg.load()?;
            let terms = match terms {
                Some(p) => TermList::load(&p)?,
                None => TermList::builtin(),
            };
            let mut selected = terms.terms().to_vec();
            if let Some(n) = limit {
                selected.truncate(n);
            }
            let mode = match positive {
                Mode::Answer => PositiveMode::Answer,
                Mode::Paraphrase => PositiveMode::Paraphrase,
            };
            let client = chat_client(&args, &cfg)?;
            let report =
                datagen::build_triplets(&selected, &terms, client.as_ref(), mode, args.seed);
            log_rejections(&report.rejected);
            datagen::write_jsonl(&report.records, &args.out)?;
            log::info!(
                "{} triplets, {} rejected",
                report.records.len(),
                report.rejected.len()
            );
        }
        DatagenCommand::Reranker {
            args,
            cfg,
            questions,
            labels,
            lexical_k,
            semantic_k,
        } => {
            let pipeline = cfg.pipeline()?;
            let ds = bench::load_dataset(&questions)?;
            let qs: Vec<RerankQuestion> = ds
                .records
                .iter()
                .map(|r| RerankQuestion {
                    id: r.id.clone(),
                    question: r.question.clone(),
                    reference_chunk_ids: r.reference_chunk_ids.clone(),
                })
                .collect();
            let client;
            let llm;
            let labeler: &dyn RelevanceLabeler = match labels {
                Labels::Reference => &ReferenceLabeler,
                Labels::Llm => {
                    client = chat_client(&args, pipeline.config())?;
                    llm = LlmLabeler::new(client.as_ref());
                    &llm
                }
            };
            let run =
                datagen::build_reranker_dataset(&pipeline, &qs, labeler, lexical_k, semantic_k)?;
            log_rejections(&run.rejected);
            if run.transport_failures > 0 {
                log::warn!(
                    "{} questions skipped: labeller unreachable",
                    run.transport_failures
                );
            }
            datagen::write_jsonl(&run.records, &args.out)?;
            log::info!(
                "{} examples, {} rejected, {} without positives",
                run.records.len(),
                run.rejected.len(),
                run.no_positive
            );
        }
        DatagenCommand::Instruct {
            args,
            cfg,
            rounds,
            pool_size,
            max_reasks,
        } => {
            let cfg = cfg.load()?;
            let path = cfg
                .paths
                .chunks
                .clone()
                .context("no chunk store: pass --chunks or set paths.chunks")?;
            let chunks = load_chunks(&path)?;
            let client = chat_client(&args, &cfg)?;
            let report = datagen::build_instruction_dataset(
                &chunks,
                client.as_ref(),
                rounds,
                pool_size,
                max_reasks,
                args.seed,
            )?;
            log_rejections(&report.rejected);
            datagen::write_jsonl(&report.records, &args.out)?;
            log::info!(
                "{} triplets, {} rejected",
                report.records.len(),
                report.rejected.len()
            );
        }
    }
    Ok(())
}
