//! Command-line entry points: corpus generation/validation, training with
//! loss logs and periodic checkpoints, synthesis, evaluation, ablations,
//! alignment search over CSV score matrices, and representation dumps.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{durations_from_alignment, mas_search, ScoreMatrix};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_config, TrainingConfig};
use crate::corpus::{generate_corpus, load_corpus, save_corpus, SyntheticCorpusSpec};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{InferenceMode, InferenceRequest};
use crate::trainer::{ablation_run, AblationVariant, Trainer, LOSS_CSV_HEADER, loss_csv_row};

/// Environment variable holding the default config file path.
pub const CONFIG_ENV: &str = "MLTTS_CONFIG";

#[derive(Parser)]
#[command(name = "mltts", version, about = "Desk-scale multilingual TTS training framework")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate synthetic corpora.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Train a model, writing a loss CSV and periodic checkpoints.
    Train(TrainArgs),
    /// Synthesize durations and frames from a checkpoint.
    Synth(SynthArgs),
    /// Evaluate a checkpoint against a corpus and emit a JSON report.
    Eval(EvalArgs),
    /// Train and compare configuration variants side by side.
    Ablate(AblateArgs),
    /// Run monotonic alignment search on a CSV score matrix.
    Mas(MasArgs),
    /// Dump hidden speaker representations with language labels as CSV.
    Dump(DumpArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (flat key = value). Falls back to $MLTTS_CONFIG, then
    /// built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set total_steps=50. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainingConfig> {
        let path = self
            .config
            .clone()
            .or_else(|| std::env::var(CONFIG_ENV).ok().map(PathBuf::from));
        let mut cfg = match path {
            Some(p) => parse_config(&fs::read_to_string(&p)?)?,
            None => TrainingConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                Error::config(format!("--set expects KEY=VALUE, got {s:?}"))
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Generate a synthetic corpus file.
    Generate {
        /// Output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        languages: usize,
        #[arg(long, default_value_t = 4)]
        speakers_per_language: usize,
        #[arg(long, default_value_t = 8)]
        phonemes_per_language: usize,
        #[arg(long, default_value_t = 25)]
        utterances_per_speaker: usize,
        #[arg(long, default_value_t = 8)]
        frame_dim: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Disable frame noise (exact template + offset recovery).
        #[arg(long)]
        no_noise: bool,
    },
    /// Validate an existing corpus file.
    Validate {
        path: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file to train on.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for losses.csv and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Shorthand for --set total_steps=N.
    #[arg(long)]
    steps: Option<usize>,
    /// Resume from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated phoneme ids, e.g. "3,4,5".
    #[arg(long)]
    phonemes: String,
    #[arg(long)]
    language: usize,
    #[arg(long)]
    speaker: usize,
    /// auto | force-intralingual | force-crosslingual
    #[arg(long, default_value = "auto")]
    mode: String,
    #[arg(long)]
    out_durations: PathBuf,
    #[arg(long)]
    out_frames: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Variant spec "label:key=value,key=value" (overrides may be empty).
    /// Repeatable.
    #[arg(long = "variant", value_name = "LABEL:OVERRIDES")]
    variants: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct MasArgs {
    /// CSV score matrix, one row per phoneme.
    #[arg(long)]
    scores: PathBuf,
    /// Output CSV of per-phoneme durations (single line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Run the CLI against parsed arguments; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/usage itself; use its exit code (2 on misuse).
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus { command } => match command {
            CorpusCommand::Generate {
                out,
                languages,
                speakers_per_language,
                phonemes_per_language,
                utterances_per_speaker,
                frame_dim,
                seed,
                no_noise,
            } => {
                let spec = SyntheticCorpusSpec {
                    num_languages: languages,
                    speakers_per_language,
                    phonemes_per_language,
                    utterances_per_speaker,
                    frame_dim,
                    seed,
                    noise_amplitude: if no_noise { 0.0 } else { 0.01 },
                };
                let corpus = generate_corpus(&spec)?;
                save_corpus(&corpus, &out)?;
                println!("wrote {} utterances to {}", corpus.len(), out.display());
                Ok(())
            }
            CorpusCommand::Validate { path } => {
                let corpus = load_corpus(&path)?;
                println!(
                    "ok: {} utterances, {} languages, {} speakers",
                    corpus.len(),
                    corpus.spec.num_languages,
                    corpus.spec.num_speakers()
                );
                Ok(())
            }
        },
        Command::Train(args) => cmd_train(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Mas(args) => cmd_mas(args),
        Command::Dump(args) => cmd_dump(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(steps) = args.steps {
        cfg.set("total_steps", &steps.to_string())?;
    }
    let corpus = load_corpus(&args.corpus)?;
    fs::create_dir_all(&args.out_dir)?;

    let mut trainer = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let mut t = ckpt.into_trainer(corpus)?;
            if let Some(steps) = args.steps {
                t.model.config.set("total_steps", &steps.to_string())?;
            }
            t
        }
        None => Trainer::new(&cfg, corpus)?,
    };

    let csv_path = args.out_dir.join("losses.csv");
    let mut csv = String::new();
    csv.push_str(LOSS_CSV_HEADER);
    csv.push('\n');

    let every = trainer.model.config.checkpoint_every.max(1);
    let out_dir = args.out_dir.clone();
    let total = trainer.model.config.total_steps;
    while trainer.step < total {
        let step = trainer.step;
        let b = trainer.train_step()?;
        csv.push_str(&loss_csv_row(step, &b));
        csv.push('\n');
        if trainer.step % every == 0 && trainer.step < total {
            save_checkpoint(&trainer, &periodic_checkpoint_path(&out_dir, trainer.step))?;
        }
    }
    fs::write(&csv_path, csv.as_bytes())?;

    let final_path = periodic_checkpoint_path(&out_dir, trainer.step);
    save_checkpoint(&trainer, &final_path)?;
    let latest = out_dir.join("final.ckpt");
    save_checkpoint(&trainer, &latest)?;
    println!(
        "trained to step {}; losses at {}, checkpoint at {}",
        trainer.step,
        csv_path.display(),
        latest.display()
    );
    Ok(())
}

fn parse_phonemes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad phoneme id {p:?}")))
        })
        .collect()
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.into_model()?;
    let request = InferenceRequest {
        phoneme_ids: parse_phonemes(&args.phonemes)?,
        language_id: args.language,
        speaker_id: args.speaker,
        mode: args.mode.parse::<InferenceMode>()?,
    };
    let out = model.infer(&request)?;
    let durations_line = out
        .durations
        .0
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    fs::write(&args.out_durations, format!("{durations_line}\n"))?;

    let mut frames_csv = String::new();
    for t in 0..out.num_frames {
        let row: Vec<String> = (0..out.frame_dim)
            .map(|j| out.frames[t * out.frame_dim + j].to_string())
            .collect();
        frames_csv.push_str(&row.join(","));
        frames_csv.push('\n');
    }
    fs::write(&args.out_frames, frames_csv)?;
    println!(
        "synthesized {} frames ({}) for speaker {} in language {}",
        out.num_frames,
        if out.intralingual { "intralingual" } else { "cross-lingual" },
        args.speaker,
        args.language
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.into_model()?;
    let corpus = load_corpus(&args.corpus)?;
    let report = evaluate(&model, &corpus)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match args.out {
        Some(path) => fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn parse_variant(s: &str) -> Result<AblationVariant> {
    let (label, rest) = s.split_once(':').ok_or_else(|| {
        Error::config(format!("--variant expects LABEL:k=v,k=v (got {s:?})"))
    })?;
    let mut overrides = Vec::new();
    for kv in rest.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::config(format!("variant override {kv:?} is not key=value"))
        })?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(AblationVariant { label: label.trim().to_string(), overrides })
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let corpus = load_corpus(&args.corpus)?;
    let variants: Vec<AblationVariant> = if args.variants.is_empty() {
        vec![
            AblationVariant { label: "base".into(), overrides: vec![] },
            AblationVariant {
                label: "no_reg".into(),
                overrides: vec![("enable_reg_loss".into(), "false".into())],
            },
            AblationVariant {
                label: "no_dat".into(),
                overrides: vec![("enable_dat".into(), "false".into())],
            },
        ]
    } else {
        args.variants
            .iter()
            .map(|s| parse_variant(s))
            .collect::<Result<_>>()?
    };
    let report = ablation_run(&cfg, &corpus, &variants)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match args.out {
        Some(path) => fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Parse a CSV score matrix: one row per phoneme, comma-separated columns.
fn parse_score_csv(path: &Path) -> Result<ScoreMatrix> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse { line: i + 1, message: format!("bad score {v:?}") })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("row has {} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::contract("score matrix file is empty".to_string()));
    }
    let p = rows.len();
    let t = rows[0].len();
    ScoreMatrix::new(p, t, rows.concat())
}

fn cmd_mas(args: MasArgs) -> Result<()> {
    let scores = parse_score_csv(&args.scores)?;
    let alignment = mas_search(&scores)?;
    let durations = durations_from_alignment(&alignment);
    let line = durations
        .0
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    fs::write(&args.out, format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.into_model()?;
    let h = model.dims.hidden_dim;
    let mut csv = String::new();
    csv.push_str("speaker_id,language_id");
    for j in 0..h {
        csv.push_str(&format!(",h{j}"));
    }
    csv.push('\n');
    for s in 0..model.meta.num_speakers() {
        let rep = model.hidden_speaker_representation(s)?;
        let mut row = format!("{s},{}", model.meta.native_language(s));
        for v in rep {
            row.push_str(&format!(",{v}"));
        }
        csv.push_str(&row);
        csv.push('\n');
    }
    fs::write(&args.out, csv)?;
    Ok(())
}

/// Write checkpoints at `checkpoint_every` intervals during a training run.
/// Used by `cmd_train` via the trainer callback.
pub(crate) fn periodic_checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("step{step:06}.ckpt"))
}
