use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use memematch::config::RunConfig;
use memematch::corpus::generate_corpus;
use memematch::pipeline::{self, exit_code, CacheStatus};
use memematch::{Error, Result};

/// Meme-to-reference similarity pipeline.
///
/// Exit codes: 0 ok, 1 usage or config error, 2 i/o, 3 missing input,
/// 4 stale cache, 5 incomplete cache, 6 too little data.
#[derive(Parser, Debug)]
#[command(name = "memematch", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (the corpus root for corpus-gen).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus root to read from.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic reference library, memes, manifest and blank set.
    CorpusGen,
    /// Compute the feature cache for every manifest pair.
    Featurize {
        /// Recompute even when the cache was built with another config.
        #[arg(long)]
        force: bool,
    },
    /// Train the blank-segment filter.
    TrainBlank {
        /// Labelled segment JSONL (default: <corpus>/blank_train/labels.jsonl).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Evaluate every (task, measure) and write report.json and report.csv.
    Evaluate {
        /// Comma-separated measure names.
        #[arg(long)]
        measures: Option<String>,
        #[arg(long)]
        n_splits: Option<usize>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let g = &cli.global;
    let mut o: Vec<(String, String)> = Vec::new();
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set `{kv}`: expected key=value")))?;
        o.push((k.trim().into(), v.into()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.into(), v));
        }
    };
    push("seed", g.seed.map(|v| v.to_string()));
    push("jobs", g.jobs.map(|v| v.to_string()));
    push("corpus", g.corpus.as_ref().map(|p| p.display().to_string()));
    let corpus_gen = matches!(cli.cmd, Command::CorpusGen);
    push(if corpus_gen { "corpus" } else { "out" }, g.out.as_ref().map(|p| p.display().to_string()));
    match &cli.cmd {
        Command::TrainBlank { folds, .. } => push("folds", folds.map(|v| v.to_string())),
        Command::Evaluate {
            measures,
            n_splits,
            test_fraction,
        } => {
            push("measures", measures.clone());
            push("n_splits", n_splits.map(|v| v.to_string()));
            push("test_fraction", test_fraction.map(|v| v.to_string()));
        }
        _ => {}
    }
    Ok(o)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides(cli)?)?;
    info!("effective config: {:?}", cfg.entries());
    pipeline::with_jobs(cfg.jobs, || match &cli.cmd {
        Command::CorpusGen => {
            let s = generate_corpus(&cfg.corpus, &cfg.corpus_params)?;
            println!("references: {}", s.references);
            println!("MM pairs: {} ({} related)", s.pairs_mm, s.related_mm);
            println!("TM pairs: {} ({} related)", s.pairs_tm, s.related_tm);
            println!("blank-training segments: {}", s.blank_segments);
            if s.files_written == 0 {
                println!("corpus identical, nothing rewritten ({} files)", s.files_unchanged);
            } else {
                println!("files written: {}, unchanged: {}", s.files_written, s.files_unchanged);
            }
            Ok(())
        }
        Command::Featurize { force } => {
            let s = pipeline::featurize(&cfg, *force)?;
            match s.status {
                CacheStatus::UpToDate => println!("feature cache up to date ({} rows), nothing recomputed", s.rows),
                CacheStatus::Computed => println!("featurized {} images, {} pairs, {} rows", s.images, s.pairs, s.rows),
            }
            println!("fingerprint: {}", s.fingerprint);
            Ok(())
        }
        Command::TrainBlank { labels, .. } => {
            let s = pipeline::train_blank(&cfg, labels.as_deref())?;
            println!("segments: {} ({} blank)", s.segments, s.blank);
            println!("alpha: {}", s.alpha);
            println!("cv non-blank precision: {:.4}", s.cv_precision);
            println!("leaves: {}", s.leaves);
            println!("model: {}", s.model.display());
            Ok(())
        }
        Command::Evaluate { .. } => {
            let r = pipeline::evaluate(&cfg)?;
            for d in &r.distributions {
                println!(
                    "{} {:<10} mean {:.4} median {:.4} std {:.4} undefined {}",
                    d.task,
                    d.measure.as_str(),
                    d.mean,
                    d.median,
                    d.std,
                    d.undefined_count
                );
            }
            for m in &r.mann_whitney {
                println!("{}: U = {} p = {:.3e}", m.comparison, m.u, m.p_value);
            }
            for w in &r.wilcoxon {
                println!("{}: W+ = {} p = {:.3e}", w.comparison, w.w_plus, w.p_value);
            }
            println!("report: {}", cfg.out.join(pipeline::REPORT_JSON).display());
            Ok(())
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
