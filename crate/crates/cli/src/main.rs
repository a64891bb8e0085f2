use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use citeweave::evaluation::{load_dataset, Metric};
use citeweave::exec::ExecMode;
use citeweave::llm::ChatBackend;
use citeweave::pipeline::{http_backend, mock_backend, open_corpus, Engine, EngineConfig, RunTrace};
use citeweave::reasoning::{FinalSelection, StageOutput};
use citeweave::retrieval_tree::node_path;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::sync::Arc;

/// Answer literature questions over a local corpus with cited, tree-structured retrieval.
#[derive(Parser)]
#[command(name = "citeweave", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question and write answer.md plus trace.json.
    Answer(AnswerArgs),
    /// Run a dataset through the pipeline and score the answers.
    Bench(BenchArgs),
    /// Print the reasoning record of trace nodes.
    Trace(TraceArgs),
    /// Load a corpus, embed every snippet and save the embedding cache.
    Index(IndexArgs),
}

#[derive(Args, Clone)]
struct RunOpts {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Offline fixture directory used instead of the HTTP backend.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Corpus file (JSON lines); overrides the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run every fan-out on the calling thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct AnswerArgs {
    #[arg(long, short = 'q')]
    question: String,
    #[arg(long)]
    max_depth: Option<usize>,
    #[command(flatten)]
    run: RunOpts,
    /// Output directory for answer.md and trace.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset file, one JSON object per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated: citation_f1, exact_match, rouge_l, hallucination.
    #[arg(long, default_value = "citation_f1,exact_match,rouge_l,hallucination")]
    metrics: String,
    /// A depth, or an inclusive range such as 0..4 for a sweep.
    #[arg(long)]
    max_depth: Option<String>,
    #[command(flatten)]
    run: RunOpts,
    /// Output directory; a sweep writes one depth-N/report.json per depth.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Also write each item's trace next to its report.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    file: PathBuf,
    #[arg(long, conflicts_with = "path_prefix")]
    node: Option<String>,
    /// Select nodes whose "a -> b" path starts with this text.
    #[arg(long)]
    path_prefix: Option<String>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    Ok(match path {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    })
}

fn build_engine(opts: &RunOpts, max_depth: Option<usize>) -> Result<Engine> {
    let mut config = load_config(opts.config.as_deref())?;
    if let Some(d) = max_depth {
        config.tree.max_depth = d;
    }
    if opts.serial {
        config.mode = ExecMode::Serial;
    }
    if let Some(c) = &opts.corpus {
        config.corpus_path = Some(c.clone());
    }
    if config.corpus_path.is_none() {
        config.corpus_path = opts.mock.as_ref().map(|m| m.join("corpus.jsonl"));
    }
    config.validate()?;
    let Some(corpus) = config.corpus_path.clone() else {
        bail!("no corpus: pass --corpus or set corpus_path in the config");
    };
    let backend: Arc<dyn ChatBackend> = match &opts.mock {
        Some(dir) => mock_backend(dir)?,
        None => Arc::new(http_backend(&config.backend)?),
    };
    let store = open_corpus(&config, &corpus)?;
    Ok(Engine::new(config, backend, store)?)
}

fn cmd_answer(args: AnswerArgs) -> Result<()> {
    let engine = build_engine(&args.run, args.max_depth)?;
    let trace_path = engine.config().trace_path.clone();
    let result = engine.answer(&args.question);
    engine.persist_embeddings()?;
    match result {
        Ok(artifact) => {
            let (trace, _) = artifact.write(&args.out, trace_path.as_deref())?;
            print!("{}", artifact.final_text.as_deref().unwrap_or_default());
            let u = artifact.usage;
            println!(
                "\n-- {} nodes, {} calls, {} prompt + {} completion tokens, ${:.4}, {} ms; trace: {}",
                artifact.trace.nodes.len(),
                u.calls,
                u.prompt_tokens,
                u.completion_tokens,
                u.cost_usd,
                u.wall_ms,
                trace.display()
            );
            for w in &artifact.trace.warnings {
                log::warn!("{w}");
            }
            Ok(())
        }
        Err(failure) => {
            let (trace, _) = failure.artifact.write(&args.out, trace_path.as_deref())?;
            eprintln!("partial trace written to {}", trace.display());
            Err(failure.error.into())
        }
    }
}

fn parse_depths(spec: Option<&str>) -> Result<Option<Vec<usize>>> {
    let Some(spec) = spec else { return Ok(None) };
    let parse = |s: &str| s.trim().parse::<usize>().with_context(|| format!("bad depth {s:?}"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
        if a > b {
            bail!("empty depth range {spec}");
        }
        return Ok(Some((a..=b).collect()));
    }
    Ok(Some(vec![parse(spec)?]))
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let metrics = Metric::parse_list(&args.metrics).map_err(anyhow::Error::msg)?;
    if metrics.is_empty() {
        bail!("no metrics selected");
    }
    let (items, skipped) = load_dataset(&args.dataset).with_context(|| format!("reading {}", args.dataset.display()))?;
    for s in &skipped {
        log::warn!("dataset line {}: {}", s.line, s.reason);
    }
    let depths = parse_depths(args.max_depth.as_deref())?;
    let sweep = depths.as_ref().is_some_and(|d| d.len() > 1);
    let runs: Vec<Option<usize>> = match depths {
        Some(d) => d.into_iter().map(Some).collect(),
        None => vec![None],
    };
    for depth in runs {
        let engine = build_engine(&args.run, depth)?;
        let dir = match depth {
            Some(d) if sweep => args.out.join(format!("depth-{d}")),
            _ => args.out.clone(),
        };
        let (report, artifacts) = engine.benchmark(&items, skipped.clone(), &metrics);
        engine.persist_embeddings()?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("report.json");
        fs::write(&path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
        if args.traces {
            let traces = dir.join("traces");
            fs::create_dir_all(&traces)?;
            for (line, a) in &artifacts {
                fs::write(traces.join(format!("line-{line}.json")), a.trace.to_json())?;
            }
        }
        let agg = &report.aggregate;
        let means: Vec<String> = agg.means.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!(
            "depth {}: {} scored, {} skipped, {} calls, ${:.4}, {} ms; {}; report: {}",
            engine.config().tree.max_depth,
            agg.scored,
            agg.skipped,
            agg.usage.calls,
            agg.usage.cost_usd,
            agg.usage.wall_ms,
            means.join(" "),
            path.display()
        );
    }
    Ok(())
}

/// One node in the key layout of the reasoning snapshot.
#[derive(Serialize)]
struct NodeView<'a> {
    query: &'a str,
    path: String,
    papers_count: usize,
    step1_analysis: Option<&'a StageOutput>,
    step2_relationships: Option<&'a StageOutput>,
    step3_analysis: Option<&'a str>,
    step3_final_selection: Option<&'a FinalSelection>,
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let raw = fs::read_to_string(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    let trace = RunTrace::from_json(&raw).with_context(|| format!("parsing {}", args.file.display()))?;
    let nodes = trace.select(args.node.as_deref(), args.path_prefix.as_deref());
    if nodes.is_empty() {
        let available: Vec<String> = trace
            .select(None, None)
            .iter()
            .map(|n| format!("  {}  {}", n.node_id, node_path(n)))
            .collect();
        bail!("no node matches the selector; available nodes:\n{}", available.join("\n"));
    }
    if !trace.complete {
        eprintln!("note: partial trace ({})", trace.error.as_deref().unwrap_or("run stopped early"));
    }
    for node in nodes {
        let r = node.reasoning.as_ref();
        let view = NodeView {
            query: &node.query,
            path: node_path(node),
            papers_count: r.map_or(node.evidence.len(), |r| r.papers_count),
            step1_analysis: r.and_then(|r| r.step1_analysis.as_ref()),
            step2_relationships: r.and_then(|r| r.step2_relationships.as_ref()),
            step3_analysis: r.and_then(|r| r.step3_analysis.as_deref()),
            step3_final_selection: r.and_then(|r| r.step3_final_selection.as_ref()),
        };
        println!("# {} (depth {})", node.node_id, node.depth);
        println!("{}", serde_json::to_string_pretty(&view)?);
    }
    Ok(())
}

fn cmd_index(args: IndexArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let store = open_corpus(&config, &args.corpus)?;
    store.precompute()?;
    let cache = store.cache();
    match config.embedding_cache_path() {
        Some(p) => {
            cache.save(&p)?;
            log::info!("embedding cache saved to {}", p.display());
        }
        None => log::warn!("no cache_dir configured; embeddings were not saved"),
    }
    let r = store.report();
    println!(
        "{}",
        serde_json::json!({
            "papers": r.papers,
            "snippets": r.snippets,
            "dropped_edges": r.dropped_edges,
            "embed_dim": config.embed_dim,
            "cache_hits": cache.hits(),
            "cache_misses": cache.misses(),
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Answer(a) => cmd_answer(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Index(a) => cmd_index(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
