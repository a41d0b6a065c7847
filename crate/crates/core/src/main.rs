//! Command-line entry point. Every subcommand reads one key=value config
//! file (flags override it), runs one pipeline stage, and is byte-identical
//! on rerun with unchanged inputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 failed report
//! check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusearch::config::ExperimentConfig;
use fusearch::index::RankedList;
use fusearch::methods::Method;
use fusearch::metrics::format_table;
use fusearch::pipeline;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fusearch",
    about = "Entity-grounded multi-modal retrieval testbed",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// key=value experiment config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the worker thread cap
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus file pair and a generation report
    Gen,
    /// Run the query-cleaning pipeline over the generated corpus
    Filter,
    /// Build and persist the sparse headline and dense image indexes
    Index {
        /// BM25 k1
        #[arg(long)]
        k1: Option<f64>,
        /// BM25 length normalization
        #[arg(long)]
        b: Option<f64>,
    },
    /// Train the fused candidate encoder and write its checkpoint
    Train,
    /// Resolve score-fusion weights (grid search unless pinned)
    Tune {
        /// Selection metric: r@K, map, or ndcg
        #[arg(long)]
        metric: Option<String>,
        /// Split to tune on
        #[arg(long)]
        split: Option<String>,
    },
    /// Evaluate the configured methods and write reports plus run files
    Eval {
        /// Comma-separated method names, or "all"
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated protocols (distractor, full)
        #[arg(long)]
        protocols: Option<String>,
        /// Split to evaluate on
        #[arg(long)]
        split: Option<String>,
        /// First-stage depth for the rerank method
        #[arg(long)]
        first_stage_k: Option<usize>,
    },
    /// Rank candidates for an ad-hoc text query or a stored query id
    Query {
        /// Whitespace-tokenized text; scored with BM25 over headlines
        #[arg(long)]
        text: Option<String>,
        /// Id of a corpus query; scored with --method
        #[arg(long)]
        query_id: Option<u64>,
        /// Method for --query-id lookups
        #[arg(long, default_value = "bm25")]
        method: String,
        #[arg(long, default_value_t = 10)]
        topk: usize,
    },
    /// Print the saved evaluation table; --check verifies its invariants
    Report {
        /// Fail (exit 3) if the report violates structural expectations
        #[arg(long)]
        check: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Render clap's message but keep our exit-code contract.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS // --help / --version
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig, pipeline::PipelineError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &global.config {
        cfg.merge_file(path)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = global.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn usage(message: &str) -> ExitCode {
    eprintln!("usage error: {message}");
    ExitCode::from(EXIT_USAGE)
}

fn print_ranked(list: &RankedList) {
    for (rank0, (cid, score)) in list.entries.iter().enumerate() {
        println!("{:>4}  {:>12}  {:.6}", rank0 + 1, cid, score);
    }
}

fn run(cli: Cli) -> Result<ExitCode, pipeline::PipelineError> {
    let mut cfg = load_config(&cli.global)?;

    match cli.command {
        Command::Gen => {
            let report = pipeline::cmd_gen(&cfg)?;
            println!(
                "generated {} queries ({} train / {} val / {} test), {} candidates, {} judgments",
                report.n_queries,
                report.n_train,
                report.n_val,
                report.n_test,
                report.n_candidates,
                report.n_judgments
            );
            println!(
                "label mix: score1 {:.3}, score2 {:.3}, score3 {:.3}",
                report.frac_score1, report.frac_score2, report.frac_score3
            );
        }
        Command::Filter => {
            let report = pipeline::cmd_filter(&cfg)?;
            for stage in &report.stages {
                println!(
                    "{:<16} in {:>6}  out {:>6}  removed {:>6}",
                    stage.stage, stage.n_in, stage.n_out, stage.n_removed
                );
            }
            if let Some(c) = &report.consensus {
                println!(
                    "consensus: {} tasks, {} accepted, {} discarded, conformity {:.4}",
                    c.n_tasks, c.n_accepted, c.n_discarded, c.conformity_rate
                );
            }
        }
        Command::Index { k1, b } => {
            if let Some(k1) = k1 {
                cfg.k1 = k1;
            }
            if let Some(b) = b {
                cfg.b = b;
            }
            let (n_sparse, n_dense) = pipeline::cmd_index(&cfg)?;
            println!(
                "indexed {n_sparse} headlines -> {}, {n_dense} image vectors -> {}",
                cfg.inverted_index_path().display(),
                cfg.dense_index_path().display()
            );
        }
        Command::Train => {
            let summary = pipeline::cmd_train(&cfg)?;
            println!(
                "trained {} epochs on {} pairs ({} dropped), final loss {:.6}, kept epoch {}",
                summary.epochs,
                summary.n_pairs,
                summary.n_dropped_pairs,
                summary.final_loss,
                summary.selected_epoch
            );
        }
        Command::Tune { metric, split } => {
            if let Some(metric) = metric {
                match metric.parse() {
                    Ok(m) => cfg.tune_metric = m,
                    Err(e) => return Ok(usage(&e)),
                }
            }
            if let Some(split) = split {
                match split.parse() {
                    Ok(s) => cfg.tune_split = s,
                    Err(e) => return Ok(usage(&e)),
                }
            }
            let (weights, value) = pipeline::cmd_tune(&cfg)?;
            println!(
                "tuned weights: w_image {:.3}, w_text {:.3} ({} {:.4} on {})",
                weights.w_image, weights.w_text, cfg.tune_metric, value, cfg.tune_split
            );
        }
        Command::Eval { methods, protocols, split, first_stage_k } => {
            if let Some(methods) = methods {
                if methods == "all" {
                    cfg.methods = Method::ALL.to_vec();
                } else {
                    let parsed: Result<Vec<Method>, _> =
                        methods.split(',').map(|s| s.trim().parse()).collect();
                    match parsed {
                        Ok(m) if !m.is_empty() => cfg.methods = m,
                        Ok(_) => return Ok(usage("empty method list")),
                        Err(e) => return Ok(usage(&e.to_string())),
                    }
                }
            }
            if let Some(protocols) = protocols {
                let parsed: Result<Vec<_>, _> =
                    protocols.split(',').map(|s| s.trim().parse()).collect();
                match parsed {
                    Ok(p) if !p.is_empty() => cfg.protocols = p,
                    Ok(_) => return Ok(usage("empty protocol list")),
                    Err(e) => return Ok(usage(&e)),
                }
            }
            if let Some(split) = split {
                match split.parse() {
                    Ok(s) => cfg.eval_split = s,
                    Err(e) => return Ok(usage(&e)),
                }
            }
            if let Some(k) = first_stage_k {
                cfg.first_stage_k = k;
            }
            let reports = pipeline::cmd_eval(&cfg)?;
            print!("{}", format_table(&reports));
            println!("wrote {}", cfg.reports_path().display());
        }
        Command::Query { text, query_id, method, topk } => match (text, query_id) {
            (Some(_), Some(_)) => {
                return Ok(usage("--text and --query-id are mutually exclusive"));
            }
            (None, None) => {
                return Ok(usage("pass --text or --query-id"));
            }
            (Some(text), None) => {
                if method != Method::Bm25.name() {
                    return Ok(usage("--text queries support only the bm25 method"));
                }
                let hits = pipeline::query_text(&cfg, &text, topk)?;
                print_ranked(&hits);
            }
            (None, Some(query_id)) => {
                let method: Method = match method.parse() {
                    Ok(m) => m,
                    Err(e) => return Ok(usage(&e.to_string())),
                };
                let hits = pipeline::query_by_id(&cfg, query_id, method, topk)?;
                print_ranked(&hits);
            }
        },
        Command::Report { check } => {
            let reports = pipeline::load_report_file(&cfg)?;
            print!("{}", format_table(&reports));
            if check {
                let violations = pipeline::check_reports(&reports);
                if violations.is_empty() {
                    println!("report checks passed");
                } else {
                    for v in &violations {
                        eprintln!("check failed: {v}");
                    }
                    return Ok(ExitCode::from(EXIT_CHECK));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
