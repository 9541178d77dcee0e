use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Axis;

use motionrag::corpus::{
    generate_corpus_in, read_frames, write_frames, Corpus, RenderDims, Vocabulary,
};
use motionrag::encoders::Encoders;
use motionrag::generator::ImageCondition;
use motionrag::pipeline::{
    ablate, ablation_strategies, build_index, evaluate, load_stage1, load_stage2,
    AdaptationStrategy, EvalReport, FeatureStore, MotionRag, RunConfig, Workspace,
};
use motionrag::retrieval::{HashingEmbedder, Query, RetrievalIndex};

#[derive(Parser)]
#[command(
    name = "motionrag",
    version,
    about = "Retrieval-augmented motion adaptation on synthetic moving shapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VocabArg {
    Standard,
    Alternate,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory; overrides the configuration.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(c) = &self.corpus {
            cfg.corpus = c.clone();
        }
        Ok(cfg)
    }
}

#[derive(clap::Args)]
struct SystemArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    stage1: PathBuf,
    /// Needed by the MCT strategies.
    #[arg(long)]
    stage2: Option<PathBuf>,
    /// Retrieval index; overrides the configuration.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Corpus holding the videos named by the index, when it is not the
    /// training corpus (database swap).
    #[arg(long)]
    database_corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration.
    Config,
    /// Render a synthetic corpus.
    BuildCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, value_enum, default_value = "standard")]
        vocabulary: VocabArg,
    },
    /// Index captions of the training split (or of every video with `--all`).
    BuildIndex {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        all: bool,
    },
    /// Top-k caption search.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 9)]
        k: usize,
    },
    TrainStage1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    TrainStage2 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate one video from an image and a prompt.
    Infer {
        #[command(flatten)]
        system: SystemArgs,
        /// Frames file whose first frame is the input image, or a corpus id.
        #[arg(long)]
        image: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "MCT-9")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate strategies on the held-out split.
    Eval {
        #[command(flatten)]
        system: SystemArgs,
        /// Comma-separated strategy names, e.g. `NoMotion,Top-1,MCT-9`.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "NoMotion,Top-1,Avg-9,MCT-9,Oracle"
        )]
        strategies: Vec<String>,
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Every ablation row at k in {1, 5, 9}.
    Ablate {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    motionrag::tune_allocator();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn progress(label: &'static str, total: usize) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if step % 100 == 0 || step == total {
            eprintln!("{label} step {step}/{total} loss {loss:.6}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config => print!("{}", RunConfig::default().to_toml()),
        Command::BuildCorpus {
            out,
            count,
            seed,
            frames,
            height,
            width,
            vocabulary,
        } => {
            let vocabulary = match vocabulary {
                VocabArg::Standard => Vocabulary::Standard,
                VocabArg::Alternate => Vocabulary::Alternate,
            };
            let dims = RenderDims {
                frames,
                height,
                width,
            };
            let manifest = generate_corpus_in(vocabulary, seed, count, dims, &out)?;
            println!("wrote {} videos to {}", manifest.len(), out.display());
        }
        Command::BuildIndex { run, out, all } => {
            let cfg = run.load()?;
            let out = out.unwrap_or_else(|| cfg.index.clone());
            let index = if all {
                let corpus = Corpus::open(&cfg.corpus)?;
                let embedder = HashingEmbedder {
                    dim: cfg.embedding_dim,
                };
                RetrievalIndex::from_captions(
                    corpus
                        .manifest
                        .entries
                        .iter()
                        .map(|e| (e.id.as_str(), e.caption.as_str())),
                    &embedder,
                )?
            } else {
                Workspace::open(&cfg)?.training_index()?
            };
            index.save(&out)?;
            println!("indexed {} captions into {}", index.len(), out.display());
        }
        Command::Query { index, text, k } => {
            let index = RetrievalIndex::load(&index)?;
            for hit in index.retrieve_top_k(&Query::new(text, k), None)? {
                println!(
                    "{:.6}\t{}\t{}",
                    hit.similarity, hit.record.id, hit.record.caption
                );
            }
        }
        Command::TrainStage1 { run, out, steps } => {
            let mut cfg = run.load()?;
            if let Some(s) = steps {
                cfg.stage1.steps = s;
            }
            let ws = Workspace::open(&cfg)?;
            let trainer = ws.train_stage1(progress("stage1", cfg.stage1.steps))?;
            trainer.checkpoint().save(&out)?;
            println!("stage-1 checkpoint written to {}", out.display());
        }
        Command::TrainStage2 {
            run,
            stage1,
            index,
            out,
            steps,
        } => {
            let mut cfg = run.load()?;
            if let Some(s) = steps {
                cfg.stage2.steps = s;
            }
            if let Some(i) = index {
                cfg.index = i;
            }
            let ws = Workspace::open(&cfg)?;
            let stage1 = ws.load_stage1(&stage1)?;
            let index = ws.load_index()?;
            let (trainer, _) =
                ws.train_stage2(&stage1, &index, progress("stage2", cfg.stage2.steps))?;
            trainer.verify_frozen(&stage1)?;
            trainer.checkpoint().save(&out)?;
            println!("stage-2 checkpoint written to {}", out.display());
        }
        Command::Infer {
            system,
            image,
            prompt,
            strategy,
            seed,
            out,
        } => {
            let strategy: AdaptationStrategy = strategy.parse()?;
            let (cfg, rag) = open_system(&system)?;
            let condition = load_condition(&cfg, &image)?;
            let key = format!("input:{image}");
            let output = rag.infer(&condition, &prompt, &key, &strategy, None, None, seed)?;
            write_frames(&out, &output.video)?;
            println!("examples: {}", output.examples.join(" "));
            println!("adaptation seconds: {:.6}", output.adaptation_seconds);
            println!("video written to {}", out.display());
        }
        Command::Eval {
            system,
            strategies,
            jsonl,
        } => {
            let strategies: Vec<AdaptationStrategy> = strategies
                .iter()
                .map(|s| s.parse())
                .collect::<motionrag::Result<_>>()?;
            let (ws, rag) = open_workspace_system(&system)?;
            let report = evaluate(&rag, &strategies, &ws.store, &ws.heldout, ws.dims)?;
            emit(&report, None, jsonl.as_deref())?;
        }
        Command::Ablate {
            system,
            report,
            jsonl,
        } => {
            let (ws, rag) = open_workspace_system(&system)?;
            let result = ablate(&rag, &ws.store, &ws.heldout, ws.dims)?;
            let expected = ablation_strategies(ws.config.seed).len();
            if result.rows.len() != expected {
                bail!(
                    "ablation produced {} rows, expected {expected}",
                    result.rows.len()
                );
            }
            emit(&result, report.as_deref(), jsonl.as_deref())?;
        }
    }
    Ok(())
}

fn emit(report: &EvalReport, text: Option<&Path>, jsonl: Option<&Path>) -> Result<()> {
    let table = report.to_text();
    print!("{table}");
    eprintln!(
        "slowest retrieve+adapt step: {:.6} s",
        report.max_adaptation_seconds
    );
    if let Some(p) = text {
        fs::write(p, &table).with_context(|| p.display().to_string())?;
    }
    if let Some(p) = jsonl {
        fs::write(p, report.to_jsonl()).with_context(|| p.display().to_string())?;
    }
    Ok(())
}

fn with_system_overrides(system: &SystemArgs) -> Result<RunConfig> {
    let mut cfg = system.run.load()?;
    if let Some(i) = &system.index {
        cfg.index = i.clone();
    }
    Ok(cfg)
}

/// Loads both stages and a database, without the held-out split.
fn open_system(system: &SystemArgs) -> Result<(RunConfig, MotionRag)> {
    let cfg = with_system_overrides(system)?;
    let db_corpus = system.database_corpus.as_ref().unwrap_or(&cfg.corpus);
    let corpus = Corpus::open(db_corpus)?;
    let store = FeatureStore::build(&corpus, &Encoders::new(&cfg.encoder), cfg.generator.patch)?;
    let index = load_index(&cfg)?;
    let stage1 = load_stage1(&cfg, &system.stage1)?;
    let stage2 = system
        .stage2
        .as_ref()
        .map(|p| load_stage2(&cfg, p, &stage1))
        .transpose()?;
    let rag = MotionRag::new(cfg.clone(), stage1, stage2, &store, index)?;
    Ok((cfg, rag))
}

/// Loads the training workspace for held-out evaluation. The database comes
/// from `--database-corpus` when given.
fn open_workspace_system(system: &SystemArgs) -> Result<(Workspace, MotionRag)> {
    let cfg = with_system_overrides(system)?;
    let ws = Workspace::open(&cfg)?;
    let stage1 = ws.load_stage1(&system.stage1)?;
    let stage2 = system
        .stage2
        .as_ref()
        .map(|p| ws.load_stage2(p, &stage1))
        .transpose()?;
    let index = match &system.index {
        Some(_) => load_index(&cfg)?,
        None if cfg.index.exists() => load_index(&cfg)?,
        None => build_index(&ws.store, &ws.train, cfg.embedding_dim)?,
    };
    let rag = match &system.database_corpus {
        Some(dir) => {
            let corpus = Corpus::open(dir)?;
            let store =
                FeatureStore::build(&corpus, &Encoders::new(&cfg.encoder), cfg.generator.patch)?;
            MotionRag::new(cfg.clone(), stage1, stage2, &store, index)?
        }
        None => ws.system(stage1, stage2, index)?,
    };
    Ok((ws, rag))
}

fn load_index(cfg: &RunConfig) -> Result<RetrievalIndex> {
    if !cfg.index.exists() {
        return Err(motionrag::Error::IndexMissing(cfg.index.display().to_string()).into());
    }
    Ok(RetrievalIndex::load(&cfg.index)?)
}

/// First frame of a frames file, or of the corpus video with that id.
fn load_condition(cfg: &RunConfig, image: &str) -> Result<ImageCondition> {
    let g = &cfg.generator;
    let path = Path::new(image);
    let frames = if path.is_file() {
        let bytes = fs::read(path).with_context(|| image.to_string())?;
        if bytes.len() < 16 {
            bail!("{image} is not a frames file");
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into()?) as usize;
        read_frames(
            path,
            image,
            RenderDims {
                frames,
                height: g.height,
                width: g.width,
            },
        )?
    } else {
        let corpus = Corpus::open(&cfg.corpus)?;
        let i = corpus
            .manifest
            .position(image)
            .with_context(|| format!("{image} is neither a file nor a corpus id"))?;
        corpus.frames(i)?
    };
    let frame = frames.index_axis(Axis(0), 0).to_owned();
    let features = Encoders::new(&cfg.encoder)
        .image
        .encode(frame.view())?
        .tokens;
    Ok(ImageCondition { frame, features })
}
