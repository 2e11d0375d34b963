use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use polyglot::checkpoint::{file_hash, Checkpoint, Provenance};
use polyglot::leap::run_leap;
use polyglot::metrics::MetricsWriter;
use polyglot::pipeline::{self, Data, RunConfig};
use polyglot::ssl::run_ssl_pretrain;
use polyglot::synth::Utterance;

#[derive(Parser)]
#[command(name = "polyglot", version, about = "Multilingual transducer training on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test corpora.
    GenData(Common),
    /// Contrastive pretraining of the encoder.
    PretrainSsl {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; defaults to the seeded initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Meta-learn an initialization across languages.
    Leap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Supervised transducer training with early stopping.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Greedy-decode the test set and report WER.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every enabled stage and evaluate.
    Recipe(Common),
    /// Language-ID x initialization grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds to run; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render JSONL metrics to SVG and CSV.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<polyglot::Error>()) {
        Some(p) if p.is_input() => 2,
        Some(p) if p.is_numeric() => 3,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default().resolve()?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let Some(out) = common.out.clone().or_else(|| cfg.out_dir.clone()) else {
        return Err(polyglot::Error::Usage("no output directory: pass --out or set out_dir".into()).into());
    };
    cfg.out_dir = Some(out.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("resolved_config.json"), cfg.to_json()?)?;
    Ok((cfg, out))
}

fn starting_point(cfg: &RunConfig, init: Option<&Path>) -> Result<(Checkpoint, Option<PathBuf>)> {
    match init {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ckpt.config != cfg.model {
                return Err(polyglot::Error::Input(format!(
                    "checkpoint {} was built for a different model configuration",
                    p.display()
                ))
                .into());
            }
            Ok((ckpt, Some(p.to_path_buf())))
        }
        None => Ok((Checkpoint::init(cfg.model.clone(), cfg.stage_seed("init"))?, None)),
    }
}

/// Saves `ckpt` as `out/name` with lineage pointing at `parent`.
fn save_stage(
    mut ckpt: Checkpoint,
    cfg: &RunConfig,
    stage: &str,
    parent: Option<&Path>,
    out: &Path,
    name: &str,
) -> Result<()> {
    let (parent_file, parent_hash) = match parent {
        Some(p) => {
            let co_located = p.parent().map(|d| d.canonicalize().ok()) == Some(out.canonicalize().ok());
            let file = co_located.then(|| p.file_name().map(|f| f.to_string_lossy().into_owned())).flatten();
            (file, Some(file_hash(p)?))
        }
        None => (None, None),
    };
    ckpt.provenance = Some(Provenance { stage: stage.into(), parent_file, parent_hash, config_hash: cfg.hash()? });
    let path = out.join(name);
    ckpt.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => {
            let (cfg, out) = load_config(&common)?;
            let (train, test) = pipeline::gen_data(&cfg, &out)?;
            println!("train counts {:?}, test counts {:?} in {}", train.counts, test.counts, out.display());
        }
        Command::PretrainSsl { common, init } => {
            let (cfg, out) = load_config(&common)?;
            let data = Data::prepare(&cfg)?;
            let (train, _) = data.split(&cfg)?;
            let (start, parent) = starting_point(&cfg, init.as_deref())?;
            let mut m = MetricsWriter::create(&out.join("ssl_metrics.jsonl"))?;
            let ckpt = run_ssl_pretrain(&start, &train, &cfg.ssl, cfg.stage_seed("ssl"), cfg.profile, &mut m)?;
            m.finish()?;
            save_stage(ckpt, &cfg, "ssl", parent.as_deref(), &out, "ssl.ckpt")?;
        }
        Command::Leap { common, init } => {
            let (cfg, out) = load_config(&common)?;
            let data = Data::prepare(&cfg)?;
            let (train, _) = data.split(&cfg)?;
            let (start, parent) = starting_point(&cfg, init.as_deref())?;
            let by_language = pipeline::group(&train, cfg.corpus.num_languages);
            let mut m = MetricsWriter::create(&out.join("leap_metrics.jsonl"))?;
            let ckpt =
                run_leap(&start, &by_language, &cfg.leap, cfg.batch_size, cfg.stage_seed("leap"), cfg.profile, &mut m)?;
            m.finish()?;
            save_stage(ckpt, &cfg, "leap", parent.as_deref(), &out, "leap.ckpt")?;
        }
        Command::Finetune { common, init } => {
            let (cfg, out) = load_config(&common)?;
            let data = Data::prepare(&cfg)?;
            let (train, val) = data.split(&cfg)?;
            let (start, parent) = starting_point(&cfg, init.as_deref())?;
            let mut m = MetricsWriter::create(&out.join("finetune_metrics.jsonl"))?;
            let (ckpt, summary) = pipeline::finetune(
                &start,
                &train,
                &val,
                &cfg.finetune,
                cfg.batch_size,
                cfg.stage_seed("finetune"),
                cfg.profile,
                &mut m,
            )?;
            m.finish()?;
            println!(
                "{} updates, validation loss {:.4} -> {:.4} (best at update {})",
                summary.updates, summary.initial_val_loss, summary.best_val_loss, summary.best_step
            );
            save_stage(ckpt, &cfg, "finetune", parent.as_deref(), &out, "final.ckpt")?;
        }
        Command::Evaluate { common, checkpoint } => {
            let (cfg, out) = load_config(&common)?;
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = Data::prepare(&cfg)?;
            let test: Vec<&Utterance> = data.test.utterances.iter().collect();
            let report = pipeline::evaluate(&ckpt, &test, cfg.max_symbols_per_frame)?;
            fs::write(out.join("wer.csv"), report.to_csv())?;
            fs::write(out.join("wer.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.to_csv());
            println!("overall,{:.2}", report.overall);
        }
        Command::Recipe(common) => {
            let (cfg, out) = load_config(&common)?;
            let report = pipeline::run_recipe(&cfg, &out)?;
            print!("{}", report.wer.to_csv());
            println!("overall,{:.2}", report.wer.overall);
        }
        Command::Ablate { common, seeds } => {
            let (cfg, out) = load_config(&common)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let rows = pipeline::ablate(&cfg, &seeds, &out)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
        Command::Plot { inputs, out } => {
            if inputs.is_empty() {
                bail!("no inputs");
            }
            for p in pipeline::plot_metrics(&inputs, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
