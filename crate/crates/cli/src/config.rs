//! Flat `key=value` run configuration with flag > file > default layering.

use std::collections::BTreeSet;
use std::path::PathBuf;

use vsam_core::checkpoint::parse_pairs;
use vsam_core::variational::{LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use vsam_core::{ModelConfig, ModelKind, PredictMode, Split, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictModeKind {
    Mean,
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub kl_warmup_steps: Option<usize>,
    pub class_weights: bool,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub pi_dim: usize,
    pub latent_dim: usize,
    pub n_max_headline: usize,
    pub n_max_body: usize,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    pub fine_tune_embeddings: bool,
    pub baseline: ModelKind,

    pub embeddings: Option<PathBuf>,
    pub stances: Option<PathBuf>,
    pub bodies: Option<PathBuf>,
    pub test_stances: Option<PathBuf>,
    pub test_bodies: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub synthetic: bool,
    pub synthetic_examples: usize,
    pub synthetic_train: usize,
    pub synthetic_vocab: usize,

    pub predict_mode: PredictModeKind,
    pub samples: usize,
    pub eval_split: Split,

    pub headline: Option<String>,
    pub body: Option<String>,

    explicit: BTreeSet<String>,
}

/// Keys never echoed into a checkpoint: they name outputs or one-off inputs,
/// not the trained model.
const OUTPUT_KEYS: &[&str] = &["checkpoint", "out", "headline", "body", "predict_mode", "samples", "eval_split"];

const MODEL_KEYS: &[&str] = &[
    "embed_dim",
    "hidden_dim",
    "pi_dim",
    "latent_dim",
    "n_max_headline",
    "n_max_body",
    "log_sigma_min",
    "log_sigma_max",
    "fine_tune_embeddings",
    "baseline",
];

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: t.seed,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            train_samples: t.samples,
            kl_warmup_steps: t.kl_warmup_steps,
            class_weights: t.class_weights,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            pi_dim: m.pi_dim,
            latent_dim: m.latent_dim,
            n_max_headline: m.n_max_headline,
            n_max_body: m.n_max_body,
            log_sigma_min: m.log_sigma_min,
            log_sigma_max: m.log_sigma_max,
            fine_tune_embeddings: m.fine_tune_embeddings,
            baseline: m.kind,
            embeddings: None,
            stances: None,
            bodies: None,
            test_stances: None,
            test_bodies: None,
            checkpoint: None,
            out: None,
            synthetic: false,
            synthetic_examples: 2500,
            synthetic_train: 2000,
            synthetic_vocab: 64,
            predict_mode: PredictModeKind::Mean,
            samples: 100,
            eval_split: Split::Test,
            headline: None,
            body: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Small dimensions suitable for finite-difference checking.
    pub fn gradcheck_defaults() -> Self {
        let tiny = ModelConfig::tiny();
        RunConfig {
            embed_dim: tiny.embed_dim,
            hidden_dim: tiny.hidden_dim,
            pi_dim: tiny.pi_dim,
            latent_dim: tiny.latent_dim,
            n_max_headline: tiny.n_max_headline,
            n_max_body: tiny.n_max_body,
            ..Default::default()
        }
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_samples" => self.train_samples = parse(key, v)?,
            "kl_warmup_steps" => {
                self.kl_warmup_steps = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "class_weights" => self.class_weights = parse_bool(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "pi_dim" => self.pi_dim = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "n_max_headline" => self.n_max_headline = parse(key, v)?,
            "n_max_body" => self.n_max_body = parse(key, v)?,
            "log_sigma_min" => self.log_sigma_min = parse(key, v)?,
            "log_sigma_max" => self.log_sigma_max = parse(key, v)?,
            "fine_tune_embeddings" => self.fine_tune_embeddings = parse_bool(key, v)?,
            "baseline" => {
                self.baseline = v
                    .parse()
                    .map_err(|_| CliError::Config(format!("baseline must be mean, det-attn or vsam, got {v:?}")))?
            }
            "embeddings" => self.embeddings = opt_path(v),
            "stances" => self.stances = opt_path(v),
            "bodies" => self.bodies = opt_path(v),
            "test_stances" => self.test_stances = opt_path(v),
            "test_bodies" => self.test_bodies = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "out" => self.out = opt_path(v),
            "synthetic" => self.synthetic = parse_bool(key, v)?,
            "synthetic_examples" => self.synthetic_examples = parse(key, v)?,
            "synthetic_train" => self.synthetic_train = parse(key, v)?,
            "synthetic_vocab" => self.synthetic_vocab = parse(key, v)?,
            "predict_mode" => {
                self.predict_mode = match v {
                    "mean" => PredictModeKind::Mean,
                    "sample" => PredictModeKind::Sample,
                    _ => return Err(CliError::Config(format!("predict_mode must be mean or sample, got {v:?}"))),
                }
            }
            "samples" => self.samples = parse(key, v)?,
            "eval_split" => {
                self.eval_split = match v {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(CliError::Config(format!("eval_split must be train or test, got {v:?}"))),
                }
            }
            "headline" => self.headline = Some(value.to_string()),
            "body" => self.body = Some(value.to_string()),
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies a config file's `key=value` lines.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), CliError> {
        let pairs = parse_pairs(text).map_err(|e| CliError::Config(e.to_string()))?;
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Fills unset model widths with values sized for the synthetic corpus.
    pub fn apply_synthetic_defaults(&mut self) {
        if !self.synthetic {
            return;
        }
        for (key, value) in [("embed_dim", 16), ("n_max_headline", 8), ("n_max_body", 16)] {
            if !self.is_explicit(key) {
                match key {
                    "embed_dim" => self.embed_dim = value,
                    "n_max_headline" => self.n_max_headline = value,
                    _ => self.n_max_body = value,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let has_files = self.stances.is_some() || self.bodies.is_some();
        if self.synthetic && has_files {
            return Err(CliError::Config("--synthetic cannot be combined with --stances/--bodies".into()));
        }
        if self.stances.is_some() != self.bodies.is_some() {
            return Err(CliError::Config("--stances and --bodies must be given together".into()));
        }
        if self.test_stances.is_some() != self.test_bodies.is_some() {
            return Err(CliError::Config("test_stances and test_bodies must be given together".into()));
        }
        if self.synthetic && self.synthetic_train > self.synthetic_examples {
            return Err(CliError::Config("synthetic_train exceeds synthetic_examples".into()));
        }
        let bounds = LOG_SIGMA_MIN..=LOG_SIGMA_MAX;
        if !bounds.contains(&self.log_sigma_min) || !bounds.contains(&self.log_sigma_max) {
            return Err(CliError::Config("log_sigma bounds must lie in [-8, 8]".into()));
        }
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.samples == 0 {
            return Err(CliError::Config("samples must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            kind: self.baseline,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            pi_dim: self.pi_dim,
            latent_dim: self.latent_dim,
            n_max_headline: self.n_max_headline,
            n_max_body: self.n_max_body,
            n_classes: 4,
            log_sigma_min: self.log_sigma_min,
            log_sigma_max: self.log_sigma_max,
            fine_tune_embeddings: self.fine_tune_embeddings,
            vocab_size: if self.fine_tune_embeddings { vocab_size } else { 0 },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            samples: self.train_samples,
            seed: self.seed,
            kl_warmup_steps: self.kl_warmup_steps,
            class_weights: self.class_weights,
        }
    }

    pub fn predict_mode(&self) -> PredictMode {
        match self.predict_mode {
            PredictModeKind::Mean => PredictMode::Mean,
            PredictModeKind::Sample => PredictMode::Sample(self.samples),
        }
    }

    /// Model-shape keys set explicitly that disagree with a loaded checkpoint.
    pub fn conflicts_with(&self, model: &ModelConfig) -> Vec<String> {
        let own = self.model_config(model.vocab_size);
        let mut out = Vec::new();
        for key in MODEL_KEYS.iter().filter(|k| self.is_explicit(k)) {
            let same = match *key {
                "embed_dim" => own.embed_dim == model.embed_dim,
                "hidden_dim" => own.hidden_dim == model.hidden_dim,
                "pi_dim" => own.pi_dim == model.pi_dim,
                "latent_dim" => own.latent_dim == model.latent_dim,
                "n_max_headline" => own.n_max_headline == model.n_max_headline,
                "n_max_body" => own.n_max_body == model.n_max_body,
                "log_sigma_min" => own.log_sigma_min == model.log_sigma_min,
                "log_sigma_max" => own.log_sigma_max == model.log_sigma_max,
                "fine_tune_embeddings" => own.fine_tune_embeddings == model.fine_tune_embeddings,
                _ => own.kind == model.kind,
            };
            if !same {
                out.push(key.to_string());
            }
        }
        out
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("seed", self.seed.to_string()),
            p("learning_rate", format!("{:?}", self.learning_rate)),
            p("epochs", self.epochs.to_string()),
            p("batch_size", self.batch_size.to_string()),
            p("train_samples", self.train_samples.to_string()),
            p("kl_warmup_steps", self.kl_warmup_steps.map_or("auto".into(), |s| s.to_string())),
            p("class_weights", self.class_weights.to_string()),
            p("embed_dim", self.embed_dim.to_string()),
            p("hidden_dim", self.hidden_dim.to_string()),
            p("pi_dim", self.pi_dim.to_string()),
            p("latent_dim", self.latent_dim.to_string()),
            p("n_max_headline", self.n_max_headline.to_string()),
            p("n_max_body", self.n_max_body.to_string()),
            p("log_sigma_min", format!("{:?}", self.log_sigma_min)),
            p("log_sigma_max", format!("{:?}", self.log_sigma_max)),
            p("fine_tune_embeddings", self.fine_tune_embeddings.to_string()),
            p("baseline", self.baseline.name().to_string()),
            p("embeddings", show_path(&self.embeddings)),
            p("stances", show_path(&self.stances)),
            p("bodies", show_path(&self.bodies)),
            p("test_stances", show_path(&self.test_stances)),
            p("test_bodies", show_path(&self.test_bodies)),
            p("checkpoint", show_path(&self.checkpoint)),
            p("out", show_path(&self.out)),
            p("synthetic", self.synthetic.to_string()),
            p("synthetic_examples", self.synthetic_examples.to_string()),
            p("synthetic_train", self.synthetic_train.to_string()),
            p("synthetic_vocab", self.synthetic_vocab.to_string()),
            p(
                "predict_mode",
                match self.predict_mode {
                    PredictModeKind::Mean => "mean".into(),
                    PredictModeKind::Sample => "sample".into(),
                },
            ),
            p("samples", self.samples.to_string()),
            p("eval_split", self.eval_split.to_string()),
        ]
    }

    /// Pairs describing how a checkpoint was trained, without output paths.
    pub fn checkpoint_echo(&self) -> Vec<(String, String)> {
        self.to_pairs()
            .into_iter()
            .filter(|(k, _)| !OUTPUT_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (format!("run.{k}"), v))
            .collect()
    }
}
