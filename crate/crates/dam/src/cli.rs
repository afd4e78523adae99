//! Command-line surface: dataset generation, training, evaluation,
//! decoding, gate tracing, and the gradient check, with reproducible
//! runs.
//!
//! Configuration precedence is flags over a JSON config file over the
//! `DAM_SEED` environment variable over built-in defaults. Every JSON
//! artifact carries a `schema` field and embeds the resolved
//! configuration or its hash.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 IO or parse
//! error, 3 gradient-check tolerance exceeded.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{detokenize, generate_dataset, load_dataset, save_dataset};
use crate::decoder::UnitConfig;
use crate::encoder::EncoderVariant;
use crate::error::{DamError, Result};
use crate::eval::{decode_rounds, evaluate, EvalOptions};
use crate::gradcheck::decoder_suite;
use crate::train::{load_checkpoint, load_checkpoint_as, save_checkpoint, train, TrainConfig};

pub const METRICS_SCHEMA: &str = "dam-metrics/1";
pub const LOSS_LOG_SCHEMA: &str = "dam-losslog/1";
pub const DECODE_SCHEMA: &str = "dam-decode/1";

#[derive(Parser)]
#[command(
    name = "dam",
    version,
    about = "Gated two-level decoder for visual dialogue: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grid-world dialogue dataset
    GenData(GenDataArgs),
    /// Train a model on a dataset and write a checkpoint plus loss log
    Train(TrainArgs),
    /// Rank candidates and write the metrics report
    Eval(EvalArgs),
    /// Greedy-decode responses for every round
    Decode(DecodeArgs),
    /// Export per-step memory-gate ratios as CSV
    GateTrace(GateTraceArgs),
    /// Verify analytic gradients against central finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// JSON config file; explicit flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder variant: lf, mn, dualvd
    #[arg(long)]
    encoder: Option<String>,
    /// Unit configuration: 2lstm, 2l-m, 2l-dm, 2l-dam
    #[arg(long)]
    units: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    /// Global gradient-norm clip
    #[arg(long)]
    clip: Option<f64>,
    /// Vocabulary keeps tokens with frequency strictly above this
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Length-normalize candidate log-likelihoods before ranking
    #[arg(long)]
    length_normalize: bool,
    /// Use separate encoder/decoder embedding tables
    #[arg(long)]
    unshare_embedding: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss log path; defaults to `<out>.loss.json`
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GateTraceArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Teacher-forced decode steps per check
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

// ── Resolved configuration ───────────────────────────────────────────

/// Flags merged over config file over `DAM_SEED` over defaults. This is
/// what output artifacts embed.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderVariant,
    pub units: UnitConfig,
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub grad_clip_norm: f64,
    pub min_freq: usize,
    pub max_len: usize,
    pub share_embedding: bool,
    pub length_normalize: bool,
    pub images: usize,
    pub rounds: usize,
    pub candidates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    encoder: Option<String>,
    units: Option<String>,
    hidden: Option<usize>,
    embed_dim: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr_init: Option<f64>,
    lr_final: Option<f64>,
    grad_clip_norm: Option<f64>,
    min_freq: Option<usize>,
    max_len: Option<usize>,
    share_embedding: Option<bool>,
    length_normalize: Option<bool>,
    images: Option<usize>,
    rounds: Option<usize>,
    candidates: Option<usize>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DAM_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| DamError::Config(format!("DAM_SEED must be an integer, got {text:?}"))),
        Err(_) => Ok(None),
    }
}

fn resolve(flags: &ConfigFlags) -> Result<RunConfig> {
    let file: FileConfig = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| DamError::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?
        }
        None => FileConfig::default(),
    };
    let defaults = TrainConfig::default();

    let encoder = match flags.encoder.as_deref().or(file.encoder.as_deref()) {
        Some(text) => text.parse()?,
        None => defaults.encoder,
    };
    let units = match flags.units.as_deref().or(file.units.as_deref()) {
        Some(text) => text.parse()?,
        None => defaults.units,
    };
    Ok(RunConfig {
        seed: flags
            .seed
            .or(file.seed)
            .or(env_seed()?)
            .unwrap_or(defaults.seed),
        encoder,
        units,
        hidden: flags.hidden.or(file.hidden).unwrap_or(defaults.hidden),
        embed_dim: flags.embed.or(file.embed_dim).unwrap_or(defaults.embed_dim),
        epochs: flags.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: flags.batch.or(file.batch_size).unwrap_or(defaults.batch_size),
        lr_init: flags.lr_init.or(file.lr_init).unwrap_or(defaults.lr_init),
        lr_final: flags.lr_final.or(file.lr_final).unwrap_or(defaults.lr_final),
        grad_clip_norm: flags
            .clip
            .or(file.grad_clip_norm)
            .unwrap_or(defaults.grad_clip_norm),
        min_freq: flags.min_freq.or(file.min_freq).unwrap_or(defaults.min_freq),
        max_len: flags.max_len.or(file.max_len).unwrap_or(defaults.max_len),
        share_embedding: if flags.unshare_embedding {
            false
        } else {
            file.share_embedding.unwrap_or(defaults.share_embedding)
        },
        length_normalize: flags.length_normalize
            || file.length_normalize.unwrap_or(defaults.length_normalize),
        images: file.images.unwrap_or(64),
        rounds: file.rounds.unwrap_or(3),
        candidates: file.candidates.unwrap_or(20),
        data: None,
        out: None,
        ckpt: None,
    })
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            grad_clip_norm: self.grad_clip_norm,
            seed: self.seed,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            encoder: self.encoder,
            units: self.units,
            min_freq: self.min_freq,
            max_len: self.max_len,
            share_embedding: self.share_embedding,
            length_normalize: self.length_normalize,
        }
    }

    fn from_train(config: &TrainConfig) -> RunConfig {
        RunConfig {
            seed: config.seed,
            encoder: config.encoder,
            units: config.units,
            hidden: config.hidden,
            embed_dim: config.embed_dim,
            epochs: config.epochs,
            batch_size: config.batch_size,
            lr_init: config.lr_init,
            lr_final: config.lr_final,
            grad_clip_norm: config.grad_clip_norm,
            min_freq: config.min_freq,
            max_len: config.max_len,
            share_embedding: config.share_embedding,
            length_normalize: config.length_normalize,
            images: 0,
            rounds: 0,
            candidates: 0,
            data: None,
            out: None,
            ckpt: None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serialization cannot fail")
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("run config serialization cannot fail");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ── Entry points ─────────────────────────────────────────────────────

/// Parses arguments and runs one command, returning the process exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &DamError) -> i32 {
    match e {
        DamError::Io(_)
        | DamError::Parse { .. }
        | DamError::Data(_)
        | DamError::Checkpoint(_) => 2,
        DamError::Config(_)
        | DamError::InvalidArgument(_)
        | DamError::ShapeMismatch { .. }
        | DamError::TokenOutOfRange { .. }
        | DamError::NonFinite(_) => 1,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Decode(args) => cmd_decode(args),
        Command::GateTrace(args) => cmd_gate_trace(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let mut config = resolve(&args.flags)?;
    if let Some(v) = args.images {
        config.images = v;
    }
    if let Some(v) = args.rounds {
        config.rounds = v;
    }
    if let Some(v) = args.candidates {
        config.candidates = v;
    }
    config.out = Some(args.out.display().to_string());

    let dataset = generate_dataset(config.seed, config.images, config.rounds, config.candidates)?;
    save_dataset(&args.out, &dataset, Some(config.to_json()))?;
    println!("wrote {} ({dataset})", args.out.display());
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut config = resolve(&args.flags)?;
    config.data = Some(args.data.display().to_string());
    config.out = Some(args.out.display().to_string());

    let dataset = load_dataset(&args.data)?;
    let train_config = config.train_config();
    let run = train(&dataset, &train_config)?;
    save_checkpoint(&args.out, &run.model, &train_config)?;

    let loss_path = args
        .loss_log
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.json", args.out.display())));
    let log = serde_json::json!({
        "schema": LOSS_LOG_SCHEMA,
        "config": config.to_json(),
        "losses": run.loss_log,
    });
    std::fs::write(&loss_path, serde_json::to_string_pretty(&log).expect("json"))?;

    let first = run.loss_log.first().copied().unwrap_or(f64::NAN);
    let last = run.loss_log.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs: loss {first:.4} -> {last:.4}; wrote {} and {}",
        train_config.epochs,
        args.out.display(),
        loss_path.display()
    );
    Ok(0)
}

/// Loads a checkpoint, honoring explicit structural flag overrides so a
/// mismatched request fails loudly instead of silently reinterpreting
/// the tensors.
fn load_model_for(
    flags: &ConfigFlags,
    ckpt: &Path,
) -> Result<(crate::model::Model<f32>, TrainConfig)> {
    let (model, stored) = load_checkpoint(ckpt)?;
    let mut wanted = stored.clone();
    if let Some(text) = flags.encoder.as_deref() {
        wanted.encoder = text.parse()?;
    }
    if let Some(text) = flags.units.as_deref() {
        wanted.units = text.parse()?;
    }
    if let Some(h) = flags.hidden {
        wanted.hidden = h;
    }
    if let Some(e) = flags.embed {
        wanted.embed_dim = e;
    }
    if wanted != stored {
        let model = load_checkpoint_as(ckpt, &wanted)?;
        return Ok((model, wanted));
    }
    Ok((model, stored))
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let dataset = load_dataset(&args.data)?;
    let (model, stored) = load_model_for(&args.flags, &args.ckpt)?;
    let mut config = RunConfig::from_train(&stored);
    if let Some(v) = args.flags.max_len {
        config.max_len = v;
    }
    config.length_normalize = config.length_normalize || args.flags.length_normalize;
    config.data = Some(args.data.display().to_string());
    config.ckpt = Some(args.ckpt.display().to_string());
    config.out = Some(args.out.display().to_string());

    let opts = EvalOptions {
        max_len: config.max_len,
        length_normalize: config.length_normalize,
    };
    let (report, _) = evaluate(&model, &dataset, &opts)?;

    let mut doc = serde_json::to_value(&report).expect("report serialization cannot fail");
    let obj = doc.as_object_mut().expect("report is an object");
    obj.insert("schema".into(), METRICS_SCHEMA.into());
    obj.insert("seed".into(), config.seed.into());
    obj.insert("config_hash".into(), config.hash().into());
    std::fs::write(&args.out, serde_json::to_string_pretty(&doc).expect("json"))?;
    println!(
        "mrr {:.4}  r@1 {:.4}  r@5 {:.4}  r@10 {:.4}  mean {:.4}  ndcg {:.4}",
        report.mrr, report.r_at_1, report.r_at_5, report.r_at_10, report.mean_rank, report.ndcg
    );
    println!(
        "repetition {:.4}  distinct-1 {:.4}  distinct-2 {:.4}; wrote {}",
        report.repetition_rate,
        report.distinct_1,
        report.distinct_2,
        args.out.display()
    );
    Ok(0)
}

fn cmd_decode(args: DecodeArgs) -> Result<i32> {
    let dataset = load_dataset(&args.data)?;
    let (model, stored) = load_model_for(&args.flags, &args.ckpt)?;
    let mut config = RunConfig::from_train(&stored);
    if let Some(v) = args.flags.max_len {
        config.max_len = v;
    }
    config.data = Some(args.data.display().to_string());
    config.ckpt = Some(args.ckpt.display().to_string());
    config.out = Some(args.out.display().to_string());

    let rounds = decode_rounds(&model, &dataset, config.max_len)?;
    let responses: Vec<serde_json::Value> = rounds
        .iter()
        .map(|r| {
            let tokens = model.vocab().decode(&r.tokens);
            serde_json::json!({
                "dialogue": r.dialogue,
                "round": r.round,
                "tokens": tokens,
                "text": detokenize(&tokens),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "schema": DECODE_SCHEMA,
        "config": config.to_json(),
        "responses": responses,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&doc).expect("json"))?;
    println!("decoded {} rounds; wrote {}", rounds.len(), args.out.display());
    Ok(0)
}

fn cmd_gate_trace(args: GateTraceArgs) -> Result<i32> {
    let dataset = load_dataset(&args.data)?;
    let (model, stored) = load_model_for(&args.flags, &args.ckpt)?;
    if !stored.units.memory {
        return Err(DamError::Config(
            "gate tracing requires the memory unit; the 2lstm configuration has no memory gate"
                .into(),
        ));
    }
    let max_len = args.flags.max_len.unwrap_or(stored.max_len);

    let rounds = decode_rounds(&model, &dataset, max_len)?;
    let mut writer = csv::Writer::from_path(&args.out).map_err(csv_error)?;
    writer
        .write_record([
            "dialogue_id",
            "round",
            "step",
            "token",
            "ratio_rsl",
            "ratio_wdl",
            "mean_gate_q",
            "mean_gate_a",
            "mean_gate_m",
        ])
        .map_err(csv_error)?;
    let mut rows = 0usize;
    for r in &rounds {
        for (step, trace) in r.traces.iter().enumerate() {
            let token = trace
                .token
                .map(|t| model.vocab().token(t).to_string())
                .unwrap_or_default();
            writer
                .write_record([
                    r.dialogue.to_string(),
                    r.round.to_string(),
                    step.to_string(),
                    token,
                    float_cell(trace.ratio_rsl),
                    float_cell(trace.ratio_wdl),
                    float_cell(mean_of(&trace.question_gate)),
                    float_cell(mean_of(&trace.abandon_gate)),
                    float_cell(mean_of(&trace.memory_gate)),
                ])
                .map_err(csv_error)?;
            rows += 1;
        }
    }
    writer.flush()?;
    println!("wrote {rows} trace rows to {}", args.out.display());
    Ok(0)
}

fn mean_of(values: &Option<Vec<f64>>) -> Option<f64> {
    values
        .as_ref()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn float_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> DamError {
    DamError::Data(format!("csv write failed: {e}"))
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<i32> {
    let config = resolve(&args.flags)?;
    let hidden = args.flags.hidden.unwrap_or(8);
    let suite = decoder_suite(hidden, config.seed, args.steps)?;
    let mut failed = false;
    for entry in &suite {
        for line in &entry.report.entries {
            let ok = line.rel_error < args.tolerance;
            failed |= !ok;
            println!(
                "{} [{}] {:<40} rel_error {:.3e}{}",
                if ok { "ok  " } else { "FAIL" },
                entry.label,
                line.name,
                line.rel_error,
                if ok { "" } else { " exceeds tolerance" }
            );
        }
    }
    let worst = suite
        .iter()
        .filter_map(|e| e.report.worst().map(|w| (e.label.clone(), w.name.clone(), w.rel_error)))
        .max_by(|a, b| a.2.total_cmp(&b.2));
    if let Some((label, name, err)) = worst {
        println!("worst: [{label}] {name} rel_error {err:.3e} (tolerance {:.1e})", args.tolerance);
    }
    if failed {
        println!("gradient check FAILED");
        Ok(3)
    } else {
        println!("gradient check passed");
        Ok(0)
    }
}
