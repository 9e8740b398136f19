use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use qm_cli::router;
use qm_core::config::EngineConfig;
use qm_core::engine::{DocumentMeta, Engine, QueryOptions, StrategyChoice, TagFilter};
use qm_core::evalkit::{self, Fixtures};
use qm_core::knowledge_index::RetrievalMode;
use qm_core::knowledge_model::Facet;

#[derive(Parser)]
#[command(
    name = "qm",
    version,
    about = "Knowledge engine for research documents"
)]
struct Cli {
    /// TOML configuration file. `QM_*` environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, summarize, tag and index a document.
    Ingest {
        path: PathBuf,
        /// Defaults to the file path.
        #[arg(long)]
        uri: Option<String>,
        #[arg(long)]
        effective_date: NaiveDate,
        #[arg(long)]
        doc_id: Option<String>,
    },
    /// Answer a question and print the cited answer.
    Ask(QueryArgs),
    /// Answer a question and print the answer with its retrieval trace as JSON.
    Query(QueryArgs),
    /// Inspect the stored index.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Evaluation utilities.
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Subcommand)]
enum IndexAction {
    Stats,
    /// Check internal consistency; exits non-zero on problems.
    Verify,
}

#[derive(Subcommand)]
enum EvalAction {
    /// Recompute the evaluation's descriptive statistics from the raw tables.
    Reproduce {
        /// Directory holding the CSV tables; the built-in copies are used otherwise.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct QueryArgs {
    question: String,
    #[arg(long, default_value = "auto")]
    strategy: StrategyChoice,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    as_of: Option<NaiveDate>,
    /// Repeatable `facet=tag` filter, e.g. `primary_area=factor-investing`.
    #[arg(long = "tag", value_parser = parse_tag)]
    tags: Vec<TagFilter>,
    #[arg(long, value_parser = parse_mode, default_value = "semantic")]
    mode: RetrievalMode,
}

impl QueryArgs {
    fn options(&self) -> QueryOptions {
        QueryOptions {
            strategy: self.strategy,
            k: self.k,
            as_of: self.as_of,
            tags: self.tags.clone(),
            mode: self.mode,
        }
    }
}

fn parse_tag(s: &str) -> Result<TagFilter, String> {
    let (f, t) = s.split_once('=').ok_or("expected facet=tag")?;
    let facet = Facet::parse(f).ok_or_else(|| format!("unknown facet `{f}`"))?;
    Ok(TagFilter {
        facet,
        tag: t.to_string(),
    })
}

fn parse_mode(s: &str) -> Result<RetrievalMode, String> {
    match s {
        "semantic" => Ok(RetrievalMode::Semantic),
        "lexical" => Ok(RetrievalMode::Lexical),
        "hybrid" => Ok(RetrievalMode::Hybrid),
        other => Err(format!("unknown mode `{other}`")),
    }
}

fn open(cli: &Cli) -> anyhow::Result<Engine> {
    let config = EngineConfig::from_env(cli.config.as_deref())?;
    Ok(Engine::open(config)?)
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(
            EnvFilter::try_from_env("QM_LOG").unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();

    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest {
            path,
            uri,
            effective_date,
            doc_id,
        } => {
            let engine = open(&cli)?;
            let content =
                std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let meta = DocumentMeta {
                uri: uri.clone().unwrap_or_else(|| path.display().to_string()),
                effective_date: *effective_date,
                doc_id: doc_id.clone(),
            };
            print_json(&engine.ingest(&content, &meta)?)
        }
        Command::Ask(args) => {
            let engine = open(&cli)?;
            let res = engine.query(&args.question, &args.options())?;
            println!("{}", res.answer.answer_text);
            if !res.answer.flags.is_empty() {
                println!("\nflags: {:?}", res.answer.flags);
            }
            println!();
            for (i, c) in res.answer.citations.iter().enumerate() {
                let unit = engine.unit(c.unit_id.as_str())?;
                println!(
                    "[{}] {} ({} bytes {}..{}, effective {})",
                    i + 1,
                    c.unit_id,
                    unit.provenance.uri,
                    unit.provenance.span.byte_start,
                    unit.provenance.span.byte_end,
                    unit.provenance.effective_date
                );
            }
            println!("trace: {}", res.trace.query_id);
            Ok(())
        }
        Command::Query(args) => {
            let engine = open(&cli)?;
            print_json(&engine.query(&args.question, &args.options())?)
        }
        Command::Index { action } => {
            let engine = open(&cli)?;
            match action {
                IndexAction::Stats => print_json(&engine.index().stats()),
                IndexAction::Verify => {
                    let problems = engine.index().verify();
                    if problems.is_empty() {
                        println!("ok: {} units", engine.index().len());
                        Ok(())
                    } else {
                        for p in &problems {
                            println!("{p}");
                        }
                        bail!("{} problems found", problems.len())
                    }
                }
            }
        }
        Command::Eval {
            action: EvalAction::Reproduce { fixtures, json },
        } => {
            let fx = match fixtures {
                Some(dir) => Fixtures::load_dir(dir)?,
                None => Fixtures::embedded()?,
            };
            let table = evalkit::reproduce(&fx)?;
            if *json {
                print_json(&table)
            } else {
                print!("{}", table.render());
                Ok(())
            }
        }
        Command::Serve { addr } => {
            let engine = Arc::new(open(&cli)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!(addr = %listener.local_addr()?, "listening");
                axum::serve(listener, router(engine)).await?;
                anyhow::Ok(())
            })
        }
    }
}
