//! `vsam` command-line driver: train, eval, gradcheck, inspect, stats.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
//! failure.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use vsam_core::checkpoint::{format_pairs, Checkpoint};
use vsam_core::data::{encode_examples, SYNTHETIC_TOPICS};
use vsam_core::embeddings::{embed, load_pretrained, tokenize, PretrainedEmbeddings};
use vsam_core::tensor::{BackwardFault, OpKind};
use vsam_core::train::{batch_loss, StepOptions};
use vsam_core::{
    class_stats, evaluate, finite_difference_check, load_fnc1, make_synthetic, predict_all,
    synthetic_embeddings, Dataset, EncodedExample, Error, NoiseGenerator, Split, Stance, Trainer,
    VsamParameters,
};

pub use config::{PredictModeKind, RunConfig};

/// Largest widths `gradcheck` accepts; finite differences scale with the
/// parameter count.
pub const GRADCHECK_MAX_N: usize = 8;
pub const GRADCHECK_MAX_LATENT: usize = 4;
pub const GRADCHECK_MAX_HIDDEN: usize = 8;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Numerical(_) => CliError::Numerical(msg),
            Error::Contract(_) | Error::ConfigMismatch(_) | Error::Shape { .. } => CliError::Config(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "vsam", version, about = "Variational self-attention stance detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint after every epoch.
    Train(CommonArgs),
    /// Score a checkpoint on a dataset.
    Eval(CommonArgs),
    /// Compare every parameter gradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Corrupt one backward rule (tanh, matmul, exp, mul, add, softmax, log-softmax).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Show attention weights and the prediction for one headline/body pair.
    Inspect {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        headline: String,
        #[arg(long)]
        body: String,
    },
    /// Per-class counts and percentages for each split.
    Stats(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    stances: Option<PathBuf>,
    #[arg(long)]
    bodies: Option<PathBuf>,
    #[arg(long)]
    test_stances: Option<PathBuf>,
    #[arg(long)]
    test_bodies: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    /// mean | det-attn | vsam
    #[arg(long)]
    baseline: Option<String>,
    /// mean | sample
    #[arg(long)]
    predict_mode: Option<String>,
    /// Monte-Carlo samples at evaluation time.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl CommonArgs {
    fn resolve(&self, mut base: RunConfig) -> Result<RunConfig, CliError> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            base.apply_file_text(&text)?;
        }
        let path = |p: &PathBuf| p.display().to_string();
        let flags: Vec<(&str, Option<String>)> = vec![
            ("seed", self.seed.map(|s| s.to_string())),
            ("embeddings", self.embeddings.as_ref().map(path)),
            ("stances", self.stances.as_ref().map(path)),
            ("bodies", self.bodies.as_ref().map(path)),
            ("test_stances", self.test_stances.as_ref().map(path)),
            ("test_bodies", self.test_bodies.as_ref().map(path)),
            ("checkpoint", self.checkpoint.as_ref().map(path)),
            ("synthetic", self.synthetic.then(|| "true".to_string())),
            ("baseline", self.baseline.clone()),
            ("predict_mode", self.predict_mode.clone()),
            ("samples", self.samples.map(|s| s.to_string())),
            ("epochs", self.epochs.map(|s| s.to_string())),
            ("out", self.out.as_ref().map(path)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                base.set(k, &v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            base.set(k.trim(), v)?;
        }
        base.apply_synthetic_defaults();
        base.validate()?;
        Ok(base)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => a.resolve(RunConfig::default()).and_then(|c| cmd_train(&c, out)),
        Command::Eval(a) => a.resolve(RunConfig::default()).and_then(|c| cmd_eval(&c, out)),
        Command::Gradcheck { common, inject_fault } => common
            .resolve(RunConfig::gradcheck_defaults())
            .and_then(|c| cmd_gradcheck(&c, inject_fault.as_deref(), out)),
        Command::Inspect { common, headline, body } => common.resolve(RunConfig::default()).and_then(|mut c| {
            c.set("headline", headline)?;
            c.set("body", body)?;
            cmd_inspect(&c, out)
        }),
        Command::Stats(a) => a.resolve(RunConfig::default()).and_then(|c| cmd_stats(&c, out)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", p.display())))
    }
}

fn validate_paths(cfg: &RunConfig) -> Result<(), CliError> {
    let inputs = [&cfg.embeddings, &cfg.stances, &cfg.bodies, &cfg.test_stances, &cfg.test_bodies];
    for p in inputs.into_iter().flatten() {
        require_file(p)?;
    }
    Ok(())
}

/// Training and test splits for the configured source.
fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    if cfg.synthetic {
        let all = make_synthetic(cfg.synthetic_examples, cfg.synthetic_vocab, cfg.seed)?;
        let (train, test) = all.split_at(cfg.synthetic_train);
        let test = (!test.is_empty()).then_some(test);
        return Ok((train, test));
    }
    let (Some(s), Some(b)) = (&cfg.stances, &cfg.bodies) else {
        return Err(CliError::Config("give --synthetic or --stances/--bodies".into()));
    };
    let train = load_fnc1(s, b, Split::Train)?;
    let test = match (&cfg.test_stances, &cfg.test_bodies) {
        (Some(s), Some(b)) => Some(load_fnc1(s, b, Split::Test)?),
        _ => None,
    };
    Ok((train, test))
}

fn load_embeddings(cfg: &RunConfig, dim: usize) -> Result<PretrainedEmbeddings, CliError> {
    match &cfg.embeddings {
        Some(p) => Ok(load_pretrained(p, dim)?),
        None if cfg.synthetic => Ok(synthetic_embeddings(cfg.synthetic_vocab, dim, cfg.seed)?),
        None => Err(CliError::Config("--embeddings is required for file-based data".into())),
    }
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Config("--checkpoint is required".into()))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = checkpoint_path(cfg)?;
    require_file(path)?;
    let ckpt = Checkpoint::load(path)?;
    let conflicts = cfg.conflicts_with(ckpt.params.config());
    if !conflicts.is_empty() {
        return Err(CliError::Config(format!(
            "checkpoint disagrees with requested {}",
            conflicts.join(", ")
        )));
    }
    Ok(ckpt)
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(CliError::from)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    validate_paths(cfg)?;
    let ckpt_path = checkpoint_path(cfg)?.to_path_buf();
    let (train, _) = load_splits(cfg)?;
    let emb = load_embeddings(cfg, cfg.embed_dim)?;
    let model_cfg = cfg.model_config(emb.matrix.vocab_size());
    let encoded = encode_examples(&train, &emb.vocab, &emb.matrix, &model_cfg)?;
    let params = VsamParameters::init(model_cfg, cfg.seed, Some(&emb.matrix))?;

    let echo_path = PathBuf::from(format!("{}.config", ckpt_path.display()));
    std::fs::write(&echo_path, format_pairs(&cfg.to_pairs()))?;
    emit(
        out,
        format_args!(
            "model={} parameters={} train_examples={}",
            params.kind(),
            params.num_scalars(),
            encoded.len()
        ),
    )?;

    let mut trainer = Trainer::new(params, cfg.train_config(), &encoded)?;
    let echo = cfg.checkpoint_echo();
    let mut log_lines = Vec::new();
    trainer.fit(&encoded, |log, params| {
        let _ = writeln!(out, "{log}");
        log_lines.push(log.to_string());
        Checkpoint::new(params.clone(), echo.clone()).save(&ckpt_path)
    })?;
    if let Some(p) = &cfg.out {
        std::fs::write(p, log_lines.join("\n") + "\n")?;
    }
    Ok(())
}

fn eval_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let (train, test) = load_splits(cfg)?;
    match cfg.eval_split {
        Split::Train => Ok(train),
        Split::Test if cfg.synthetic => {
            test.ok_or_else(|| CliError::Data("synthetic test split is empty".into()))
        }
        // with files, --stances/--bodies are the evaluation set unless a test pair is given
        Split::Test => Ok(test.unwrap_or(train)),
    }
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    validate_paths(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    let model_cfg = ckpt.params.config().clone();
    let data = eval_data(cfg)?;
    let emb = load_embeddings(cfg, model_cfg.embed_dim)?;
    if model_cfg.fine_tune_embeddings && emb.matrix.vocab_size() != model_cfg.vocab_size {
        return Err(Error::ConfigMismatch("embedding vocabulary differs from checkpoint".into()).into());
    }
    let encoded = encode_examples(&data, &emb.vocab, &emb.matrix, &model_cfg)?;
    let preds = predict_all(&ckpt.params, &encoded, cfg.predict_mode(), cfg.seed)?;
    let pred: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let gold: Vec<usize> = encoded.iter().map(|e| e.label).collect();
    let report = evaluate(&pred, &gold)?;
    let text = report.to_key_value();
    write!(out, "{text}")?;
    if let Some(p) = &cfg.out {
        std::fs::write(p, &text)?;
        std::fs::write(p.with_extension("json"), report.to_json()?)?;
    }
    Ok(())
}

fn parse_fault(name: &str) -> Result<OpKind, CliError> {
    Ok(match name {
        "tanh" => OpKind::Tanh,
        "matmul" => OpKind::MatMul,
        "exp" => OpKind::Exp,
        "mul" => OpKind::Mul,
        "add" => OpKind::Add,
        "softmax" => OpKind::MaskedSoftmax,
        "log-softmax" => OpKind::LogSoftmax,
        _ => return Err(CliError::Config(format!("unknown fault target {name:?}"))),
    })
}

pub fn cmd_gradcheck(cfg: &RunConfig, inject_fault: Option<&str>, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.n_max_headline > GRADCHECK_MAX_N
        || cfg.n_max_body > GRADCHECK_MAX_N
        || cfg.latent_dim > GRADCHECK_MAX_LATENT
        || cfg.hidden_dim > GRADCHECK_MAX_HIDDEN
        || cfg.pi_dim > GRADCHECK_MAX_HIDDEN
    {
        return Err(CliError::Config(format!(
            "gradcheck needs n_max <= {GRADCHECK_MAX_N}, latent_dim <= {GRADCHECK_MAX_LATENT} and \
             hidden_dim, pi_dim <= {GRADCHECK_MAX_HIDDEN}; finite differences grow with every \
             parameter, so shrink the model with --set"
        )));
    }
    let fault = inject_fault.map(parse_fault).transpose()?;
    let vocab = 4 * SYNTHETIC_TOPICS;
    let emb = synthetic_embeddings(vocab, cfg.embed_dim, cfg.seed)?;
    let data = make_synthetic(4, vocab, cfg.seed)?;
    let model_cfg = cfg.model_config(emb.matrix.vocab_size());
    let encoded = encode_examples(&data, &emb.vocab, &emb.matrix, &model_cfg)?;
    let batch: Vec<&EncodedExample> = encoded.iter().take(2).collect();
    let params = VsamParameters::init(model_cfg, cfg.seed, Some(&emb.matrix))?;
    let opts = StepOptions {
        samples: 2,
        kl_weight: 1.0,
        class_weights: None,
    };

    let mut worst = 0.0f64;
    let mut failed = 0;
    let names: Vec<String> = params.names().iter().map(|s| s.to_string()).collect();
    for name in &names {
        let point = params.get(name).expect("listed parameter").clone();
        let err = finite_difference_check(
            |tape, x| {
                if let Some(op) = fault {
                    tape.inject_backward_fault(BackwardFault { op, factor: 1.5 });
                }
                let b = params.bind_with(tape, Some((name, x)))?;
                let mut noise = NoiseGenerator::new(cfg.seed);
                Ok(batch_loss(&params, tape, &b, &batch, opts, &mut noise)?.loss)
            },
            &point,
            1e-6,
        )?;
        let pass = err < GRADCHECK_TOLERANCE;
        if !pass {
            failed += 1;
        }
        worst = worst.max(err);
        emit(
            out,
            format_args!(
                "param={name} shape={:?} max_rel_error={err:.3e} status={}",
                point.shape(),
                if pass { "pass" } else { "fail" }
            ),
        )?;
    }
    emit(
        out,
        format_args!(
            "gradcheck tensors={} passed={} max_rel_error={worst:.3e}",
            names.len(),
            names.len() - failed
        ),
    )?;
    if failed > 0 {
        return Err(CliError::Numerical(format!(
            "{failed} tensor(s) exceed relative error {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

pub fn cmd_inspect(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    validate_paths(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    let model_cfg = ckpt.params.config().clone();
    let emb = load_embeddings(cfg, model_cfg.embed_dim)?;
    let headline = tokenize(cfg.headline.as_deref().unwrap_or(""));
    let body = tokenize(cfg.body.as_deref().unwrap_or(""));
    let h = embed(&headline, &emb.vocab, &emb.matrix, model_cfg.n_max_headline)?;
    let b = embed(&body, &emb.vocab, &emb.matrix, model_cfg.n_max_body)?;
    let mut noise = NoiseGenerator::new(cfg.seed);
    let pred = ckpt.params.predict(&h, &b, cfg.predict_mode(), &mut noise)?;

    for (side, tokens, weights) in [
        ("headline", &headline, &pred.attention_headline),
        ("body", &body, &pred.attention_body),
    ] {
        emit(out, format_args!("[{side}]"))?;
        let mut total = 0.0;
        for (tok, w) in tokens.iter().zip(weights.iter()) {
            emit(out, format_args!("{tok:<24} {w:.6}"))?;
            total += w;
        }
        emit(out, format_args!("attention_sum.{side}={total:.3}"))?;
    }
    let class = Stance::from_index(pred.class).expect("four classes");
    emit(out, format_args!("prediction={class}"))?;
    for (c, p) in Stance::ALL.iter().zip(&pred.probs) {
        emit(out, format_args!("prob.{c}={p:.6}"))?;
    }
    emit(out, format_args!("prob_sum={:.3}", pred.probs.iter().sum::<f64>()))?;
    Ok(())
}

fn stats_row(out: &mut dyn Write, d: &Dataset) -> Result<(), CliError> {
    let s = class_stats(d)?;
    let mut line = format!("{:<6}{:>8}", d.split.to_string(), s.total);
    for c in Stance::ALL {
        let cell = format!("{} ({}%)", s.counts[c.index()], s.percent(c));
        line.push_str(&format!("  {cell:>16}"));
    }
    emit(out, line)
}

pub fn cmd_stats(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    validate_paths(cfg)?;
    let (train, test) = load_splits(cfg)?;
    let mut header = format!("{:<6}{:>8}", "split", "total");
    for c in Stance::ALL {
        header.push_str(&format!("  {:>16}", c.name()));
    }
    emit(out, header)?;
    stats_row(out, &train)?;
    if let Some(t) = &test {
        stats_row(out, t)?;
    }
    for d in std::iter::once(&train).chain(test.as_ref()) {
        let r = d.rejected;
        emit(
            out,
            format_args!(
                "rejected.{} unknown_stance={} unresolved_body={} empty_text={}",
                d.split, r.unknown_stance, r.unresolved_body, r.empty_text
            ),
        )?;
    }
    Ok(())
}
