//! Command-line interface over the library.
//!
//! Seven subcommands cover the full experiment workflow, each writing its
//! artifacts under `--out` (default `out/`):
//!
//! ```text
//! lana simgen            # synthesize an interaction log with known ground truth
//! lana rasch             # fit per-student abilities and per-question difficulties
//! lana train             # train the base network
//! lana leveled-finetune  # clone the base model per ability layer and fine-tune
//! lana eval              # AUC of a model or ensemble on a dataset
//! lana predict           # per-position probabilities as CSV
//! lana export-features   # features entering the final feed-forward block
//! ```
//!
//! Every run is reproducible: settings plus seeds fully determine all
//! outputs, and numbers are written in their shortest round-trip form so a
//! repeated run produces byte-identical files.
//!
//! # Settings files
//!
//! Model-building subcommands accept `--config FILE`: a flat `key = value`
//! file, one pair per line, with `#` starting a comment. Command-line flags
//! override file values, which override the built-in defaults. Unknown and
//! duplicate keys are rejected. The full key list with defaults and meanings
//! is [`CONFIG_KEYS`].
//!
//! Two seeds appear on purpose: `seed` drives parameter initialization,
//! batch shuffling, and per-layer fine-tuning, while `split_seed` drives
//! only the train/validation partition. Varying `seed` across repetitions
//! therefore re-trains on the *same* data split.
//!
//! # Exit codes
//!
//! `0` success; `1` runtime failure (diagnostic on stderr); `2` usage error
//! (unknown subcommand or flag, missing required argument).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::dataio::{parse_interactions, split_by_student, windows, write_interactions, Interaction, Window};
use crate::error::{Error, Result};
use crate::leveled::{
    finetune_layers, fit_rasch, layer_gaussians, read_abilities_csv, read_manifest,
    write_abilities_csv, write_difficulties_csv, write_manifest, FinetuneConfig, FinetuneScope,
    LayerEnsemble, RaschFit,
};
use crate::model::{bind, model_forward, AblationFlags, Batch, LanaHyper, LanaParams};
use crate::simgen::{describe, generate, write_ground_truth, SimConfig};
use crate::tensor::Tape;
use crate::training::{
    evaluate, load_checkpoint, predict, save_checkpoint, train, write_history, CheckpointMeta,
    LayerMeta, TrainConfig,
};


/// Every settings-file key with its default value and meaning.
///
/// The same table backs default resolution and unknown-key rejection, so the
/// documentation cannot drift from the behavior.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    // Paths.
    ("data", "", "interactions CSV path (flags override)"),
    ("out", "out", "output directory"),
    // Reproducibility.
    ("seed", "0", "parameter init, shuffling, and fine-tuning seed"),
    ("split_seed", "0", "train/validation partition seed"),
    ("valid_fraction", "0.2", "fraction of students held out for validation"),
    // Architecture.
    ("d_model", "64", "model width"),
    ("n_heads", "4", "attention heads"),
    ("n_encoder_layers", "2", "encoder depth"),
    ("n_decoder_layers", "2", "decoder depth"),
    ("seq_len", "100", "window length"),
    ("d_piv", "8", "performance feature width for pivot weights"),
    ("n_questions", "0", "question vocabulary; 0 infers max id + 1 from data"),
    ("dropout", "0", "dropout rate in [0, 1)"),
    // Optimizer.
    ("lr", "0.0005", "learning rate"),
    ("weight_decay", "0.01", "decoupled weight decay"),
    ("clip_norm", "1", "global gradient norm cap; 0 disables"),
    ("batch_size", "64", "windows per step"),
    ("epochs", "1", "training epochs"),
    ("shuffle", "true", "shuffle training windows each epoch"),
    // Leveled learning.
    ("n_layers", "4", "ability layers"),
    ("tau", "1", "spacing between adjacent layer means"),
    ("topk", "2", "layers fused per student at evaluation"),
    ("threshold", "0.01", "membership cutoff for a layer's training windows"),
    ("workers", "1", "threads for per-layer fine-tuning"),
    ("scope", "full", "fine-tuning scope: full or encoder"),
    // Rasch fitting.
    ("rasch_iterations", "200", "ascent iterations"),
    ("rasch_l2", "0.01", "L2 penalty on abilities and difficulties"),
    ("rasch_step", "0.05", "ascent step size"),
    // Ablation.
    ("no_bm", "false", "plain summed input embeddings"),
    ("no_pma", "false", "standard cross-attention without decay"),
    ("no_pcffn", "false", "plain feed-forward instead of pivot-conditioned"),
    ("no_ll", "false", "single-layer fine-tuning (no leveling)"),
];

/// Runs the CLI on raw process arguments (including the program name) and
/// returns the exit code: 0 on success, 1 for runtime failures, 2 for usage
/// errors.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

#[derive(Parser)]
#[command(
    name = "lana",
    version,
    about = "Knowledge tracing with decay-aware attention, pivot weights, and leveled learning",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log with known ground truth.
    Simgen(SimgenArgs),
    /// Fit per-student abilities and per-question difficulties.
    Rasch(RaschArgs),
    /// Train the base network and save a checkpoint.
    Train(TrainArgs),
    /// Clone a checkpoint per ability layer and fine-tune each clone.
    #[command(name = "leveled-finetune")]
    LeveledFinetune(FinetuneArgs),
    /// Score a checkpoint or ensemble on a dataset.
    Eval(EvalArgs),
    /// Write per-position probabilities for a dataset.
    Predict(PredictArgs),
    /// Dump the features entering the final feed-forward block, one row per
    /// window at its last valid position.
    #[command(name = "export-features")]
    ExportFeatures(ExportArgs),
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simgen(args) => run_simgen(args),
        Command::Rasch(args) => run_rasch(args),
        Command::Train(args) => run_train(args),
        Command::LeveledFinetune(args) => run_finetune(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::ExportFeatures(args) => run_export(args),
    }
}

// ---------------------------------------------------------------------------
// Settings resolution
// ---------------------------------------------------------------------------

/// Defaults from [`CONFIG_KEYS`] overlaid with one optional settings file.
#[derive(Debug)]
struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Settings> {
        let mut values: BTreeMap<&'static str, String> = CONFIG_KEYS
            .iter()
            .map(|(key, default, _)| (*key, (*default).to_string()))
            .collect();
        let Some(path) = path else {
            return Ok(Settings { values });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut seen = BTreeSet::new();
        for (index, raw) in text.lines().enumerate() {
            let line_no = index + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    line_no,
                    format!("expected `key = value`, got {raw:?}"),
                ));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some((canonical, ..)) = CONFIG_KEYS.iter().find(|(k, ..)| *k == key) else {
                return Err(Error::parse(line_no, format!("unknown config key {key:?}")));
            };
            if !seen.insert(*canonical) {
                return Err(Error::parse(line_no, format!("duplicate config key {key:?}")));
            }
            values.insert(canonical, value.to_string());
        }
        Ok(Settings { values })
    }

    /// The effective value of `key`, parsed as `T`.
    fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = &self.values[key];
        raw.parse()
            .map_err(|e| Error::contract(format!("config key {key} = {raw:?}: {e}")))
    }

    /// A flag wins over the settings file, which wins over the default.
    fn over<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(value) => Ok(value),
            None => self.parsed(key),
        }
    }

    /// A boolean that a bare flag can switch on but not off.
    fn enabled(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.parsed::<bool>(key)?)
    }

    /// A required path from a flag or a non-empty config value.
    fn required_path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        if let Some(path) = flag {
            return Ok(path);
        }
        let raw = &self.values[key];
        if raw.is_empty() {
            return Err(Error::contract(format!(
                "no {key} path given: pass --{key} or set `{key}` in the config file"
            )));
        }
        Ok(PathBuf::from(raw))
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        let dir = match flag {
            Some(path) => path,
            None => PathBuf::from(&self.values["out"]),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(dir)
    }

    fn ablation(&self, no_bm: bool, no_pma: bool, no_pcffn: bool) -> Result<AblationFlags> {
        Ok(AblationFlags {
            no_bm: self.enabled(no_bm, "no_bm")?,
            no_pma: self.enabled(no_pma, "no_pma")?,
            no_pcffn: self.enabled(no_pcffn, "no_pcffn")?,
        })
    }

    fn hyper(
        &self,
        inferred_questions: usize,
        d_model: Option<usize>,
        seq_len: Option<usize>,
    ) -> Result<LanaHyper> {
        let configured: usize = self.parsed("n_questions")?;
        Ok(LanaHyper {
            d_model: self.over(d_model, "d_model")?,
            n_heads: self.parsed("n_heads")?,
            n_encoder_layers: self.parsed("n_encoder_layers")?,
            n_decoder_layers: self.parsed("n_decoder_layers")?,
            seq_len: self.over(seq_len, "seq_len")?,
            d_piv: self.parsed("d_piv")?,
            n_questions: if configured == 0 {
                inferred_questions
            } else {
                configured
            },
            dropout: self.parsed("dropout")?,
        })
    }

    fn train_config(
        &self,
        epochs: Option<usize>,
        batch_size: Option<usize>,
        lr: Option<f64>,
        seed: Option<u64>,
    ) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.over(epochs, "epochs")?,
            batch_size: self.over(batch_size, "batch_size")?,
            lr: self.over(lr, "lr")?,
            weight_decay: self.parsed("weight_decay")?,
            clip_norm: self.parsed("clip_norm")?,
            seed: self.over(seed, "seed")?,
            shuffle: self.parsed("shuffle")?,
        })
    }
}

/// Question vocabulary implied by a dataset: highest id plus one.
fn infer_questions(records: &[Interaction]) -> usize {
    records
        .iter()
        .map(|r| r.question_id as usize)
        .max()
        .map_or(1, |max| max + 1)
}

/// Which side of the seeded student split a subcommand consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    /// The whole file, unsplit.
    All,
    /// The training side of the split.
    Train,
    /// The held-out validation side.
    Valid,
}

fn select_split(
    records: Vec<Interaction>,
    choice: SplitChoice,
    settings: &Settings,
    valid_fraction: Option<f64>,
    split_seed: Option<u64>,
) -> Result<Vec<Interaction>> {
    if choice == SplitChoice::All {
        return Ok(records);
    }
    let fraction = settings.over(valid_fraction, "valid_fraction")?;
    let seed = settings.over(split_seed, "split_seed")?;
    let (train_side, valid_side) = split_by_student(&records, fraction, seed)?;
    Ok(match choice {
        SplitChoice::Train => train_side,
        SplitChoice::Valid => valid_side,
        SplitChoice::All => unreachable!(),
    })
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(out, "{header}").map_err(io_err)?;
    for row in rows {
        writeln!(out, "{row}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

// ---------------------------------------------------------------------------
// simgen
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimgenArgs {
    /// Output directory for interactions.csv and truth.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = SimConfig::default().n_students)]
    students: u32,
    #[arg(long, default_value_t = SimConfig::default().n_questions)]
    questions: u32,
    /// Mean interactions per student.
    #[arg(long, default_value_t = SimConfig::default().interactions_mean)]
    interactions_mean: u32,
    /// Per-student counts vary uniformly by up to this much around the mean.
    #[arg(long, default_value_t = SimConfig::default().interactions_jitter)]
    interactions_jitter: u32,
    /// Mean of the student ability distribution.
    #[arg(long, default_value_t = SimConfig::default().ability_mean)]
    ability_mean: f64,
    /// Ability gained per 100 answered questions.
    #[arg(long, default_value_t = SimConfig::default().drift_per_100)]
    drift_per_100: f64,
    /// Number of question parts.
    #[arg(long, default_value_t = SimConfig::default().n_parts)]
    parts: u8,
    /// Same-part memory boost amplitude, in logits.
    #[arg(long, default_value_t = SimConfig::default().beta)]
    beta: f64,
    /// Guess floor in [0, 0.5).
    #[arg(long, default_value_t = SimConfig::default().guess)]
    guess: f64,
    /// Mean minutes between a student's consecutive interactions.
    #[arg(long, default_value_t = SimConfig::default().gap_mean_min)]
    gap_mean_min: f64,
    #[arg(long, default_value_t = SimConfig::default().seed)]
    seed: u64,
}

fn run_simgen(args: SimgenArgs) -> Result<()> {
    let config = SimConfig {
        n_students: args.students,
        n_questions: args.questions,
        interactions_mean: args.interactions_mean,
        interactions_jitter: args.interactions_jitter,
        ability_mean: args.ability_mean,
        drift_per_100: args.drift_per_100,
        n_parts: args.parts,
        beta: args.beta,
        guess: args.guess,
        gap_mean_min: args.gap_mean_min,
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let records = generate(&config)?;
    let truth = describe(&config)?;

    let data_path = args.out.join("interactions.csv");
    let truth_path = args.out.join("truth.csv");
    write_interactions(&data_path, &records)?;
    write_ground_truth(&truth_path, &truth)?;

    println!(
        "generated {} interactions for {} students over {} questions (seed {})",
        records.len(),
        config.n_students,
        config.n_questions,
        config.seed
    );
    println!("wrote {}", data_path.display());
    println!("wrote {}", truth_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// rasch
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RaschArgs {
    /// Settings file; see the crate documentation for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interactions CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for abilities.csv and difficulties.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ascent iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// L2 penalty on abilities and difficulties.
    #[arg(long)]
    l2: Option<f64>,
    /// Ascent step size.
    #[arg(long)]
    step: Option<f64>,
}

fn run_rasch(args: RaschArgs) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let data = settings.required_path(args.data, "data")?;
    let out = settings.out_dir(args.out)?;
    let records = parse_interactions(&data)?;

    let iterations = settings.over(args.iterations, "rasch_iterations")?;
    let l2 = settings.over(args.l2, "rasch_l2")?;
    let step = settings.over(args.step, "rasch_step")?;
    let fit = fit_rasch(&records, iterations, l2, step)?;

    let abilities_path = out.join("abilities.csv");
    let difficulties_path = out.join("difficulties.csv");
    write_abilities_csv(&abilities_path, &fit.abilities)?;
    write_difficulties_csv(&difficulties_path, &fit.difficulties)?;

    println!(
        "fitted {} students and {} questions over {} interactions in {iterations} iterations",
        fit.abilities.len(),
        fit.difficulties.len(),
        records.len()
    );
    println!(
        "log-likelihood {} | mean ability {}",
        fit.log_likelihood,
        fit.mean_ability()
    );
    println!("wrote {}", abilities_path.display());
    println!("wrote {}", difficulties_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Settings file; see the crate documentation for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interactions CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for model.ckpt and history.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parameter initialization and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Windows per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Model width.
    #[arg(long)]
    d_model: Option<usize>,
    /// Window length.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Fraction of students held out for validation.
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Seed of the train/validation partition (independent of --seed).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Sum input embeddings instead of concatenating and projecting.
    #[arg(long)]
    no_bm: bool,
    /// Standard cross-attention without memory decay.
    #[arg(long)]
    no_pma: bool,
    /// Plain feed-forward blocks instead of pivot-conditioned ones.
    #[arg(long)]
    no_pcffn: bool,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let data = settings.required_path(args.data, "data")?;
    let out = settings.out_dir(args.out)?;
    let records = parse_interactions(&data)?;

    let hyper = settings.hyper(infer_questions(&records), args.d_model, args.seq_len)?;
    let flags = settings.ablation(args.no_bm, args.no_pma, args.no_pcffn)?;
    let cfg = settings.train_config(args.epochs, args.batch_size, args.lr, args.seed)?;

    let fraction = settings.over(args.valid_fraction, "valid_fraction")?;
    let split_seed = settings.over(args.split_seed, "split_seed")?;
    let (train_records, valid_records) = split_by_student(&records, fraction, split_seed)?;
    let train_windows = windows(&train_records, hyper.seq_len)?;
    let valid_windows = windows(&valid_records, hyper.seq_len)?;

    println!(
        "training on {} windows ({} validation) | d_model {} seq_len {} seed {}",
        train_windows.len(),
        valid_windows.len(),
        hyper.d_model,
        hyper.seq_len,
        cfg.seed
    );
    let mut params = LanaParams::init(&hyper, &flags, cfg.seed)?;
    let history = train(
        &mut params,
        &hyper,
        &flags,
        &train_windows,
        None,
        &valid_windows,
        &cfg,
        |_| true,
    )?;
    for stats in &history {
        println!(
            "epoch {}/{} | train loss {:.6} | valid AUC {:.4} | skipped steps {}",
            stats.epoch,
            history.len(),
            stats.train_loss,
            stats.valid_auc,
            stats.skipped_steps
        );
    }

    let model_path = out.join("model.ckpt");
    let history_path = out.join("history.csv");
    let meta = CheckpointMeta {
        hyper,
        flags,
        layer: None,
    };
    save_checkpoint(&params, &meta, &model_path)?;
    write_history(&history_path, &history)?;
    println!("wrote {}", model_path.display());
    println!("wrote {}", history_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// leveled-finetune
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeChoice {
    /// Fine-tune every parameter.
    Full,
    /// Fine-tune only encoder-side parameters.
    Encoder,
}

impl ScopeChoice {
    fn into_scope(self) -> FinetuneScope {
        match self {
            ScopeChoice::Full => FinetuneScope::Full,
            ScopeChoice::Encoder => FinetuneScope::EncoderOnly,
        }
    }
}

fn parse_scope(raw: &str) -> Result<FinetuneScope> {
    match raw {
        "full" => Ok(FinetuneScope::Full),
        "encoder" => Ok(FinetuneScope::EncoderOnly),
        other => Err(Error::contract(format!(
            "config key scope must be `full` or `encoder`, got {other:?}"
        ))),
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Settings file; see the crate documentation for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interactions CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pretrained base checkpoint.
    #[arg(long, required = true)]
    checkpoint: PathBuf,
    /// Per-student abilities CSV from `lana rasch`.
    #[arg(long, required = true)]
    abilities: PathBuf,
    /// Output directory for layer checkpoints and ensemble.manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of ability layers.
    #[arg(long)]
    n_layers: Option<usize>,
    /// Spacing between adjacent layer means.
    #[arg(long)]
    tau: Option<f64>,
    /// Membership cutoff for a layer's training windows.
    #[arg(long)]
    threshold: Option<f64>,
    /// Fine-tuning epochs per layer.
    #[arg(long)]
    epochs: Option<usize>,
    /// Windows per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Shuffling seed; layer i fine-tunes with seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Threads fine-tuning layers concurrently (result is thread-count
    /// independent).
    #[arg(long)]
    workers: Option<usize>,
    /// Fine-tuning scope.
    #[arg(long)]
    scope: Option<ScopeChoice>,
    /// Which side of the student split to fine-tune on.
    #[arg(long, value_enum, default_value_t = SplitChoice::Train)]
    split: SplitChoice,
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Seed of the train/validation partition (independent of --seed).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Skip leveling: one layer holding every student, which continues
    /// plain training on the whole fine-tuning set.
    #[arg(long)]
    no_ll: bool,
}

fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let data = settings.required_path(args.data, "data")?;
    let out = settings.out_dir(args.out)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let abilities = read_abilities_csv(&args.abilities)?;

    let mean = abilities.values().sum::<f64>() / abilities.len() as f64;
    let variance = abilities
        .values()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / abilities.len() as f64;
    let fit = RaschFit::from_abilities(abilities)?;

    let no_ll = settings.enabled(args.no_ll, "no_ll")?;
    let (n_layers, tau) = if no_ll {
        println!("leveling disabled: fine-tuning a single layer on every student");
        (1, 0.0)
    } else {
        (
            settings.over(args.n_layers, "n_layers")?,
            settings.over(args.tau, "tau")?,
        )
    };
    let spec = layer_gaussians(mean, variance, n_layers, tau)?;

    let records = parse_interactions(&data)?;
    let records = select_split(
        records,
        args.split,
        &settings,
        args.valid_fraction,
        args.split_seed,
    )?;
    let tune_windows = windows(&records, checkpoint.meta.hyper.seq_len)?;

    let scope = match args.scope {
        Some(choice) => choice.into_scope(),
        None => parse_scope(&settings.values["scope"])?,
    };
    let cfg = FinetuneConfig {
        train: settings.train_config(args.epochs, args.batch_size, args.lr, args.seed)?,
        threshold: settings.over(args.threshold, "threshold")?,
        scope,
        workers: settings.over(args.workers, "workers")?,
    };

    println!(
        "fine-tuning {} layer(s) (tau {}) on {} windows with {} worker(s)",
        n_layers,
        tau,
        tune_windows.len(),
        cfg.workers
    );
    let threshold = cfg.threshold;
    let ensemble = finetune_layers(
        &checkpoint.params,
        &checkpoint.meta.hyper,
        &checkpoint.meta.flags,
        &spec,
        &fit,
        &tune_windows,
        &cfg,
    )?;

    // Per-layer report: training windows above the cutoff and students whose
    // strongest membership lands on the layer.
    let students: BTreeSet<u32> = tune_windows.iter().map(|w| w.student_id).collect();
    let mut window_counts = vec![0u64; n_layers];
    let mut top_counts = vec![0u64; n_layers];
    let mut memberships: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &student in &students {
        memberships.insert(student, ensemble.membership(student)?);
    }
    for window in &tune_windows {
        let probs = &memberships[&window.student_id];
        for (layer, &p) in probs.iter().enumerate() {
            if p >= threshold {
                window_counts[layer] += 1;
            }
        }
    }
    for probs in memberships.values() {
        let top = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        top_counts[top] += 1;
    }

    let mut model_paths = Vec::new();
    for (i, params) in ensemble.models.iter().enumerate() {
        let name = format!("layer{i}.ckpt");
        let meta = CheckpointMeta {
            hyper: checkpoint.meta.hyper.clone(),
            flags: checkpoint.meta.flags,
            layer: Some(LayerMeta {
                index: i,
                mu: spec.mu[i],
                sigma_sq: spec.sigma_sq[i],
            }),
        };
        save_checkpoint(params, &meta, &out.join(&name))?;
        model_paths.push(PathBuf::from(name));
    }
    let manifest_path = out.join("ensemble.manifest");
    write_manifest(&manifest_path, &spec, &model_paths)?;

    let layers_path = out.join("layers.csv");
    write_csv(
        &layers_path,
        "layer,mu,sigma_sq,train_windows,top_students",
        (0..n_layers).map(|i| {
            format!(
                "{i},{},{},{},{}",
                spec.mu[i], spec.sigma_sq[i], window_counts[i], top_counts[i]
            )
        }),
    )?;
    for i in 0..n_layers {
        println!(
            "layer {i}: mu {:.4} | {} training windows | {} students route here first",
            spec.mu[i], window_counts[i], top_counts[i]
        );
    }
    for name in &model_paths {
        println!("wrote {}", out.join(name).display());
    }
    println!("wrote {}", manifest_path.display());
    println!("wrote {}", layers_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / predict
// ---------------------------------------------------------------------------

/// Loads an ensemble back from its manifest, layer checkpoints, and the
/// abilities table, verifying that every layer checkpoint matches the
/// manifest's architecture and layer stamps.
fn load_ensemble(manifest_path: &Path, abilities_path: &Path) -> Result<LayerEnsemble> {
    let manifest = read_manifest(manifest_path)?;
    let abilities = read_abilities_csv(abilities_path)?;
    let fit = RaschFit::from_abilities(abilities)?;

    let mut models: Vec<LanaParams> = Vec::new();
    let mut shared: Option<(LanaHyper, AblationFlags)> = None;
    for (i, path) in manifest.model_paths.iter().enumerate() {
        let ckpt = load_checkpoint(path)?;
        match &ckpt.meta.layer {
            Some(layer)
                if layer.index == i
                    && layer.mu == manifest.spec.mu[i]
                    && layer.sigma_sq == manifest.spec.sigma_sq[i] => {}
            Some(layer) => {
                return Err(Error::contract(format!(
                    "{} is stamped layer {} (mu {}, sigma_sq {}) but the manifest expects \
                     layer {i} (mu {}, sigma_sq {})",
                    path.display(),
                    layer.index,
                    layer.mu,
                    layer.sigma_sq,
                    manifest.spec.mu[i],
                    manifest.spec.sigma_sq[i],
                )));
            }
            None => {
                return Err(Error::contract(format!(
                    "{} is a base checkpoint, not a layer model",
                    path.display()
                )));
            }
        }
        match &shared {
            None => shared = Some((ckpt.meta.hyper.clone(), ckpt.meta.flags)),
            Some((hyper, flags)) => {
                if *hyper != ckpt.meta.hyper || *flags != ckpt.meta.flags {
                    return Err(Error::contract(format!(
                        "{} disagrees with the other layers on architecture",
                        path.display()
                    )));
                }
            }
        }
        models.push(ckpt.params);
    }
    let (hyper, flags) = shared.expect("manifest lists at least one model");
    Ok(LayerEnsemble {
        hyper,
        flags,
        spec: manifest.spec,
        fit,
        models,
    })
}

/// Flags shared by `eval` and `predict`: the dataset, the model source
/// (exactly one of a base checkpoint or an ensemble manifest), and scoring
/// settings.
#[derive(Args)]
#[command(group(ArgGroup::new("model").required(true).args(["checkpoint", "manifest"])))]
struct ScoreArgs {
    /// Settings file; see the crate documentation for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interactions CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ensemble manifest from `lana leveled-finetune` (needs --abilities).
    #[arg(long, requires = "abilities")]
    manifest: Option<PathBuf>,
    /// Per-student abilities CSV, for routing ensemble predictions.
    #[arg(long)]
    abilities: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Layers fused per student (ensembles only).
    #[arg(long)]
    topk: Option<usize>,
    /// Windows scored per forward pass.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Which side of the student split to score.
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    split: SplitChoice,
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Seed of the train/validation partition.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    score: ScoreArgs,
}

enum Model {
    Single(Box<crate::training::Checkpoint>),
    Ensemble(Box<LayerEnsemble>, usize),
}

impl Model {
    fn seq_len(&self) -> usize {
        match self {
            Model::Single(ckpt) => ckpt.meta.hyper.seq_len,
            Model::Ensemble(ensemble, _) => ensemble.hyper.seq_len,
        }
    }
}

/// Resolves the model source and the windows a scoring subcommand works on.
fn scoring_inputs(args: &ScoreArgs, settings: &Settings) -> Result<(Model, Vec<Window>)> {
    let model = match (&args.checkpoint, &args.manifest) {
        (Some(path), None) => Model::Single(Box::new(load_checkpoint(path)?)),
        (None, Some(path)) => {
            let abilities = args
                .abilities
                .as_ref()
                .expect("clap enforces --abilities with --manifest");
            let ensemble = load_ensemble(path, abilities)?;
            let topk = settings.over(args.topk, "topk")?;
            Model::Ensemble(Box::new(ensemble), topk)
        }
        _ => unreachable!("clap enforces exactly one model source"),
    };
    let data = settings.required_path(args.data.clone(), "data")?;
    let records = parse_interactions(&data)?;
    let records = select_split(
        records,
        args.split,
        settings,
        args.valid_fraction,
        args.split_seed,
    )?;
    let wins = windows(&records, model.seq_len())?;
    Ok((model, wins))
}

/// Writes the per-layer membership summary for the students under
/// evaluation and prints one line per layer.
fn report_memberships(
    ensemble: &LayerEnsemble,
    wins: &[Window],
    path: &Path,
) -> Result<()> {
    let students: BTreeSet<u32> = wins.iter().map(|w| w.student_id).collect();
    let n_layers = ensemble.n_layers();
    let mut top_counts = vec![0u64; n_layers];
    let mut sums = vec![0.0f64; n_layers];
    for &student in &students {
        let probs = ensemble.membership(student)?;
        let top = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        top_counts[top] += 1;
        for (layer, p) in probs.iter().enumerate() {
            sums[layer] += p;
        }
    }
    let n_students = students.len() as f64;
    write_csv(
        path,
        "layer,mu,students_top,membership_mean",
        (0..n_layers).map(|i| {
            format!(
                "{i},{},{},{}",
                ensemble.spec.mu[i],
                top_counts[i],
                sums[i] / n_students
            )
        }),
    )?;
    for i in 0..n_layers {
        println!(
            "layer {i}: mu {:.4} | top choice of {} students | mean membership {:.4}",
            ensemble.spec.mu[i],
            top_counts[i],
            sums[i] / n_students
        );
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let settings = Settings::load(args.score.config.as_deref())?;
    let out = settings.out_dir(args.score.out.clone())?;
    let batch_size = settings.over(args.score.batch_size, "batch_size")?;
    let (model, wins) = scoring_inputs(&args.score, &settings)?;

    let (auc, preds, detail) = match &model {
        Model::Single(ckpt) => {
            let (auc, preds) = evaluate(
                &ckpt.params,
                &ckpt.meta.hyper,
                &ckpt.meta.flags,
                &wins,
                batch_size,
            )?;
            (auc, preds, String::from("single model"))
        }
        Model::Ensemble(ensemble, topk) => {
            let (auc, preds) = ensemble.evaluate(&wins, *topk, batch_size)?;
            (
                auc,
                preds,
                format!("{} layers, top-{topk} fusion", ensemble.n_layers()),
            )
        }
    };

    println!(
        "AUC {auc:.4} over {} predictions from {} windows ({detail})",
        preds.len(),
        wins.len()
    );
    println!("auc {auc}");

    let eval_path = out.join("eval.csv");
    write_csv(
        &eval_path,
        "metric,value",
        [
            format!("auc,{auc}"),
            format!("predictions,{}", preds.len()),
            format!("windows,{}", wins.len()),
        ]
        .into_iter(),
    )?;
    println!("wrote {}", eval_path.display());

    if let Model::Ensemble(ensemble, _) = &model {
        let memberships_path = out.join("memberships.csv");
        report_memberships(ensemble, &wins, &memberships_path)?;
        println!("wrote {}", memberships_path.display());
    }
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let settings = Settings::load(args.score.config.as_deref())?;
    let out = settings.out_dir(args.score.out.clone())?;
    let batch_size = settings.over(args.score.batch_size, "batch_size")?;
    let (model, wins) = scoring_inputs(&args.score, &settings)?;

    let preds = match &model {
        Model::Single(ckpt) => predict(
            &ckpt.params,
            &ckpt.meta.hyper,
            &ckpt.meta.flags,
            &wins,
            batch_size,
        )?,
        Model::Ensemble(ensemble, topk) => ensemble.predict(&wins, *topk, batch_size)?,
    };

    let path = out.join("predictions.csv");
    write_csv(
        &path,
        "student_id,window_index,position,prob,target",
        preds.iter().map(|p| {
            format!(
                "{},{},{},{},{}",
                p.student_id, p.window_index, p.position, p.prob, p.target
            )
        }),
    )?;
    println!(
        "wrote {} predictions from {} windows to {}",
        preds.len(),
        wins.len(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// export-features
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ExportArgs {
    /// Settings file; see the crate documentation for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interactions CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long, required = true)]
    checkpoint: PathBuf,
    /// Output directory for features.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Windows processed per forward pass.
    #[arg(long)]
    batch_size: Option<usize>,
}

fn run_export(args: ExportArgs) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let data = settings.required_path(args.data, "data")?;
    let out = settings.out_dir(args.out)?;
    let batch_size: usize = settings.over(args.batch_size, "batch_size")?;
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let hyper = &ckpt.meta.hyper;
    let records = parse_interactions(&data)?;
    let wins = windows(&records, hyper.seq_len)?;

    let mut header = String::from("student_id,window_index");
    for j in 0..hyper.d_model {
        header.push_str(&format!(",f{j}"));
    }
    let mut rows: Vec<String> = Vec::with_capacity(wins.len());
    for chunk in wins.chunks(batch_size) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let batch = Batch::build(&refs, None, hyper)?;
        let tape = Tape::new();
        let bound = bind(&tape, &ckpt.params, |_| false);
        let fwd = model_forward(&tape, &bound, hyper, &ckpt.meta.flags, &batch, None)?;
        let features = fwd
            .ffn_input
            .ok_or_else(|| {
                Error::contract("this model has no decoder layers, so there are no features")
            })?
            .data();
        let (seq_len, d) = (batch.seq_len, hyper.d_model);
        for (wi, window) in chunk.iter().enumerate() {
            let last_valid = (0..seq_len)
                .rev()
                .find(|&t| batch.valid[wi * seq_len + t])
                .ok_or_else(|| Error::contract("window has no valid positions"))?;
            let mut row = format!("{},{}", window.student_id, window.index);
            let base = (wi * seq_len + last_valid) * d;
            for j in 0..d {
                row.push_str(&format!(",{}", features[base + j]));
            }
            rows.push(row);
        }
    }

    let path = out.join("features.csv");
    write_csv(&path, &header, rows.into_iter())?;
    println!(
        "wrote {} rows with {} feature columns to {}",
        wins.len(),
        hyper.d_model,
        path.display()
    );
    Ok(())
}
