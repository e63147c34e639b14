use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afcc::config::RunConfig;
use afcc::corpus::{self, Corpus};
use afcc::features::FilterbankConfig;
use afcc::pipeline::{self, EvalSettings, PreparedWord, Scale};
use afcc::scales::WarpFunction;
use afcc::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

#[derive(Debug, Parser)]
#[command(name = "afcc", version, about = "Adaptive frequency cepstral coefficient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Write per-utterance features for one scale.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Word to process; all words when omitted.
        #[arg(long)]
        word: Option<String>,
        /// linear, mel, htk_mel or adaptive (knot from a finished optimize run).
        #[arg(long, default_value = "mel")]
        scale: Scale,
    },
    /// Evaluate fixed frequency scales.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        word: Option<String>,
        /// One of linear, mel, htk_mel; all three when omitted.
        #[arg(long)]
        scale: Option<Scale>,
    },
    /// Search the adaptive warp knot.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        word: Option<String>,
    },
    /// Collect finished runs into report.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Restrict the table to these words.
        #[arg(long)]
        word: Vec<String>,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg.resolved())
    }
}

fn sha256_hex(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, Error> {
    let path = cfg.manifest_path();
    tracing::info!(manifest = %path.display(), "loading corpus");
    Ok(corpus::load(&path, &cfg.audio)?)
}

fn words(corpus: &Corpus, word: &Option<String>) -> Vec<String> {
    match word {
        Some(w) => vec![w.clone()],
        None => corpus.words(),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<(), Error> {
    let (path, corpus) = corpus::synthesize(&cfg.synth, &cfg.audio, &cfg.corpus_dir())?;
    println!("manifest\t{}", path.display());
    println!("sha256\t{}", sha256_hex(&path)?);
    println!("entries\t{}", corpus.manifest.entries.len());
    Ok(())
}

fn cmd_extract(cfg: &RunConfig, word: &Option<String>, scale: Scale) -> Result<(), Error> {
    let corpus = load_corpus(cfg)?;
    for w in words(&corpus, word) {
        let prepared = PreparedWord::new(&corpus, &w, &cfg.frame)?;
        let fbc = match scale.fixed_filterbank(cfg.audio, cfg.filterbank.num_filters, cfg.filterbank.normalization) {
            Some(fbc) => fbc,
            None => {
                let record = pipeline::read_run_rate(&cfg.output_dir, &w, Scale::Adaptive)?;
                let knot = record
                    .knot()
                    .ok_or_else(|| Error::Data(format!("optimize run for {w} has no knot")))?;
                FilterbankConfig {
                    num_filters: cfg.filterbank.num_filters,
                    normalization: cfg.filterbank.normalization,
                    warp: WarpFunction::pchp(knot, cfg.audio)?,
                }
            }
        };
        let n = pipeline::run_extract(&prepared, &fbc, &cfg.frame, &cfg.output_dir, scale)?;
        println!("{w}\t{scale}\t{n} utterances");
    }
    Ok(())
}

fn cmd_baseline(cfg: &RunConfig, word: &Option<String>, scale: Option<Scale>) -> Result<(), Error> {
    let scales = match scale {
        Some(Scale::Adaptive) => {
            return Err(Error::Usage("baseline takes linear, mel or htk_mel; use optimize for adaptive".into()))
        }
        Some(s) => vec![s],
        None => Scale::BASELINES.to_vec(),
    };
    let corpus = load_corpus(cfg)?;
    let settings = EvalSettings::from_config(cfg);
    for w in words(&corpus, word) {
        let prepared = PreparedWord::new(&corpus, &w, &cfg.frame)?;
        for &s in &scales {
            let run = pipeline::run_baseline(&prepared, s, &settings, &cfg.output_dir)?;
            println!("{w}\t{s}\t{}", run.evaluation.summary.rate);
        }
    }
    Ok(())
}

fn cmd_optimize(cfg: &RunConfig, word: &Option<String>) -> Result<(), Error> {
    let corpus = load_corpus(cfg)?;
    let settings = EvalSettings::from_config(cfg);
    for w in words(&corpus, word) {
        let prepared = PreparedWord::new(&corpus, &w, &cfg.frame)?;
        let run = pipeline::run_optimize(&prepared, &settings, &cfg.search, &cfg.output_dir)?;
        let p = run.outcome.best_point;
        println!(
            "{w}\tadaptive\t{}\tknot=({:.1} Hz, {:.1} Hz)\titerations={}{}",
            run.evaluation.summary.rate,
            p.x,
            p.y,
            run.outcome.trace.len(),
            if run.outcome.truncated { "\ttruncated" } else { "" }
        );
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, word: &[String]) -> Result<(), Error> {
    let words = if word.is_empty() { pipeline::discover_words(&cfg.output_dir) } else { word.to_vec() };
    let table = pipeline::collect_report(&cfg.output_dir, &words)?;
    let path = pipeline::write_report(&cfg.output_dir, &table)?;
    println!("scale\t{}", table.words.join("\t"));
    for (scale, values) in &table.rows {
        println!("{scale}\t{}", values.join("\t"));
    }
    println!("report\t{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { common } => cmd_synth(&common.load()?),
        Command::Extract { common, word, scale } => cmd_extract(&common.load()?, &word, scale),
        Command::Baseline { common, word, scale } => cmd_baseline(&common.load()?, &word, scale),
        Command::Optimize { common, word } => cmd_optimize(&common.load()?, &word),
        Command::Report { common, word } => cmd_report(&common.load()?, &word),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
