use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covr_forge::mtg::{MtgMode, SelectStrategy};
use covr_forge::pipeline::{
    Pipeline, PipelineConfig, PipelineError, RunOptions, Stage, StageOutcome, ANNOTATION_POOL, DECISION_LOG,
};
use covr_forge_annotate::{ServiceConfig, ServiceError};

const MTG_URL_ENV: &str = "COVR_FORGE_MTG_URL";

#[derive(Debug, Parser)]
#[command(name = "covr-forge", version, about = "Composed video retrieval triplets: mine, filter, generate, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Find caption pairs one token edit apart.
    Mine(StageArgs),
    /// Apply the caption-pair filters.
    FilterPairs(StageArgs),
    /// Generate modification texts for kept pairs.
    GenText(StageArgs),
    /// Pick the most similar video pairs per caption pair.
    FilterVideos(StageArgs),
    /// Assemble triplets and train/val/test splits.
    BuildTriplets(StageArgs),
    /// Dataset statistics and histograms.
    Stats(StageArgs),
    /// Train the fusion head with HN-NCE.
    Train(StageArgs),
    /// Recall report on the test split.
    Eval(StageArgs),
    /// Candidate pools for validation and annotation from the held-out corpus.
    MakeEvalSet(StageArgs),
    /// Every stage from mine to eval.
    All(StageArgs),
    /// Serve the annotation pool over HTTP.
    ServeAnnotate(ServeArgs),
    /// Write a small synthetic corpus, embeddings, lexicon and config.
    MakeToyCorpus {
        /// Directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Rerun even when the stage manifest matches.
    #[arg(long)]
    force: bool,
    /// Fail when an artifact differs from what its stage recorded.
    #[arg(long)]
    strict: bool,
    /// Generation service base URL (overrides the environment and config).
    #[arg(long, env = MTG_URL_ENV)]
    mtg_url: Option<String>,
    #[arg(long)]
    mtg_mode: Option<MtgMode>,
    /// Candidate texts generated per edit.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    select: Option<SelectStrategy>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    lease_seconds: Option<i64>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    frames_dir: Option<PathBuf>,
}

fn load_config(args: &StageArgs) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(url) = &args.mtg_url {
        cfg.mtg.url = Some(url.clone());
    }
    if let Some(mode) = args.mtg_mode {
        cfg.mtg.mode = mode;
    }
    if let Some(n) = args.candidates {
        cfg.mtg.n_candidates = n;
    }
    if let Some(s) = args.select {
        cfg.mtg.select = s;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: Stage, outcome: &StageOutcome) {
    let m = outcome.manifest();
    let verb = if outcome.skipped() { "up to date" } else { "done" };
    let counts = serde_json::to_string(&m.counts).unwrap_or_default();
    println!("{stage}: {verb} {counts}");
}

fn run_stages(args: &StageArgs, stage: Option<Stage>) -> Result<(), PipelineError> {
    let cfg = load_config(args)?;
    let pipeline = Pipeline::new(cfg, RunOptions { force: args.force, strict: args.strict })?;
    match stage {
        Some(s) => report(s, &pipeline.run(s)?),
        None => {
            for (s, o) in pipeline.run_all()? {
                report(s, &o);
            }
        }
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<(), u8> {
    let cfg = PipelineConfig::load(&args.config).map_err(|e| {
        eprintln!("error: {e}");
        e.exit_code() as u8
    })?;
    let out = |name: &str| cfg.paths.output_dir.join(name);
    let a = &cfg.annotate;
    let svc = ServiceConfig {
        pool: args.pool.clone().or_else(|| a.pool.clone()).unwrap_or_else(|| out(ANNOTATION_POOL)),
        log: args.log.clone().or_else(|| a.log.clone()).unwrap_or_else(|| out(DECISION_LOG)),
        lease_seconds: args.lease_seconds.unwrap_or(a.lease_seconds),
        frames_dir: args.frames_dir.clone().or_else(|| a.frames_dir.clone()),
    };
    if svc.lease_seconds <= 0 {
        eprintln!("error: lease seconds must be positive");
        return Err(2);
    }
    if !svc.pool.exists() {
        eprintln!("error: missing artifact {} (run make-eval-set first)", svc.pool.display());
        return Err(3);
    }
    covr_forge_annotate::run(&svc, args.port.unwrap_or(a.port)).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            ServiceError::Pool { .. } | ServiceError::Log { .. } => 1,
            _ => 4,
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (args, stage) = match &cli.command {
        Command::Mine(a) => (a, Some(Stage::Mine)),
        Command::FilterPairs(a) => (a, Some(Stage::FilterPairs)),
        Command::GenText(a) => (a, Some(Stage::GenText)),
        Command::FilterVideos(a) => (a, Some(Stage::FilterVideos)),
        Command::BuildTriplets(a) => (a, Some(Stage::BuildTriplets)),
        Command::Stats(a) => (a, Some(Stage::Stats)),
        Command::Train(a) => (a, Some(Stage::Train)),
        Command::Eval(a) => (a, Some(Stage::Eval)),
        Command::MakeEvalSet(a) => (a, Some(Stage::MakeEvalSet)),
        Command::All(a) => (a, None),
        Command::ServeAnnotate(a) => {
            return match serve(a) {
                Ok(()) => ExitCode::SUCCESS,
                Err(code) => ExitCode::from(code),
            }
        }
        Command::MakeToyCorpus { out, seed } => {
            return match covr_forge::synth::write_toy_project(out, *seed) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    };
    match run_stages(args, stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
