//! The variational self-attention encoder, its deterministic baselines, and
//! the ELBO objective.
//!
//! Every sentence `H` (`[D, n]`) is pooled and fed to two Gaussian networks:
//! the prior `p(z | H)` and the inference network `q(z | H, y)`. A latent
//! sample `z` becomes attention weights `a = softmax(tanh(W^z z))` over the
//! token positions, the sentence vector is `s = H a`, and a headline/body pair
//! is classified from `[s_h ; s_b ; s_h ⊙ s_b]`.
//!
//! Two forward paths exist. The tape path is differentiable and drives
//! training and gradient checks; the plain path evaluates the same function
//! on raw `f64` slices and is used for prediction and Monte-Carlo estimates.
//! Tests pin them to each other.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{EmbeddedSentence, EmbeddingMatrix, PAD};
use crate::error::{Error, Result};
use crate::tensor::masked_softmax_values;
use crate::tensor::{Tape, Tensor, Var};
use crate::variational::{
    kl_divergence, reparameterize, DiagonalGaussian, Gaussian, NoiseSource, LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
};

/// Which sentence encoder a parameter set implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Latent-variable attention trained on the ELBO.
    Vsam,
    /// Same attention with `z = mu_prior(H)`, trained by cross-entropy.
    DetAttention,
    /// Mean of the token vectors, trained by cross-entropy.
    MeanEmbedding,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vsam => "vsam",
            ModelKind::DetAttention => "det-attn",
            ModelKind::MeanEmbedding => "mean",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vsam" => Ok(ModelKind::Vsam),
            "det-attn" => Ok(ModelKind::DetAttention),
            "mean" => Ok(ModelKind::MeanEmbedding),
            other => Err(Error::Contract(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// `D`, the word-vector dimension.
    pub embed_dim: usize,
    /// Hidden width of the Gaussian networks.
    pub hidden_dim: usize,
    /// Width of the joint representation `pi`.
    pub pi_dim: usize,
    /// `d_z`.
    pub latent_dim: usize,
    pub n_max_headline: usize,
    pub n_max_body: usize,
    pub n_classes: usize,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    pub fine_tune_embeddings: bool,
    /// Only consulted when `fine_tune_embeddings` is set.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Vsam,
            embed_dim: 50,
            hidden_dim: 32,
            pi_dim: 32,
            latent_dim: 16,
            n_max_headline: 32,
            n_max_body: 128,
            n_classes: 4,
            log_sigma_min: LOG_SIGMA_MIN,
            log_sigma_max: LOG_SIGMA_MAX,
            fine_tune_embeddings: false,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    /// Small enough for exhaustive finite-difference checking.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            hidden_dim: 8,
            pi_dim: 8,
            latent_dim: 4,
            n_max_headline: 8,
            n_max_body: 8,
            ..Default::default()
        }
    }

    /// Rows of `W^z`: one per position of the widest field.
    pub fn attention_width(&self) -> usize {
        self.n_max_headline.max(self.n_max_body)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("pi_dim", self.pi_dim),
            ("latent_dim", self.latent_dim),
            ("n_max_headline", self.n_max_headline),
            ("n_max_body", self.n_max_body),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("{name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::Contract("need at least two classes".into()));
        }
        if self.log_sigma_min.is_nan() || self.log_sigma_max.is_nan() || self.log_sigma_min > self.log_sigma_max {
            return Err(Error::Contract("log_sigma_min exceeds log_sigma_max".into()));
        }
        if self.fine_tune_embeddings && self.vocab_size < 2 {
            return Err(Error::Contract("fine-tuning needs the vocabulary size".into()));
        }
        Ok(())
    }

    fn net_shapes(&self, prefix: &str, input: usize, with_sigma: bool) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![
            (format!("{prefix}.fc1.weight"), vec![self.hidden_dim, input]),
            (format!("{prefix}.fc1.bias"), vec![self.hidden_dim]),
            (format!("{prefix}.fc2.weight"), vec![self.pi_dim, self.hidden_dim]),
            (format!("{prefix}.fc2.bias"), vec![self.pi_dim]),
            (format!("{prefix}.mu.weight"), vec![self.latent_dim, self.pi_dim]),
            (format!("{prefix}.mu.bias"), vec![self.latent_dim]),
        ];
        if with_sigma {
            v.push((format!("{prefix}.log_sigma.weight"), vec![self.latent_dim, self.pi_dim]));
            v.push((format!("{prefix}.log_sigma.bias"), vec![self.latent_dim]));
        }
        v
    }

    /// Names and shapes of every trainable tensor, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut v = Vec::new();
        if self.fine_tune_embeddings {
            v.push(("embedding.weight".to_string(), vec![d, self.vocab_size]));
        }
        match self.kind {
            ModelKind::Vsam => {
                v.extend(self.net_shapes("prior", d, true));
                v.extend(self.net_shapes("posterior", d + self.n_classes, true));
                v.push(("attention.weight".into(), vec![self.attention_width(), self.latent_dim]));
            }
            ModelKind::DetAttention => {
                v.extend(self.net_shapes("prior", d, false));
                v.push(("attention.weight".into(), vec![self.attention_width(), self.latent_dim]));
            }
            ModelKind::MeanEmbedding => {}
        }
        v.push(("classifier.weight".into(), vec![self.n_classes, 3 * d]));
        v.push(("classifier.bias".into(), vec![self.n_classes]));
        v
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("model.kind".into(), self.kind.name().into()),
            ("model.embed_dim".into(), self.embed_dim.to_string()),
            ("model.hidden_dim".into(), self.hidden_dim.to_string()),
            ("model.pi_dim".into(), self.pi_dim.to_string()),
            ("model.latent_dim".into(), self.latent_dim.to_string()),
            ("model.n_max_headline".into(), self.n_max_headline.to_string()),
            ("model.n_max_body".into(), self.n_max_body.to_string()),
            ("model.n_classes".into(), self.n_classes.to_string()),
            ("model.log_sigma_min".into(), format!("{:?}", self.log_sigma_min)),
            ("model.log_sigma_max".into(), format!("{:?}", self.log_sigma_max)),
            ("model.fine_tune_embeddings".into(), self.fine_tune_embeddings.to_string()),
            ("model.vocab_size".into(), self.vocab_size.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn field<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = pairs
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing config key {key}")))?;
            raw.parse()
                .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for {key}")))
        }
        let kind: String = field(pairs, "model.kind")?;
        let cfg = ModelConfig {
            kind: kind.parse()?,
            embed_dim: field(pairs, "model.embed_dim")?,
            hidden_dim: field(pairs, "model.hidden_dim")?,
            pi_dim: field(pairs, "model.pi_dim")?,
            latent_dim: field(pairs, "model.latent_dim")?,
            n_max_headline: field(pairs, "model.n_max_headline")?,
            n_max_body: field(pairs, "model.n_max_body")?,
            n_classes: field(pairs, "model.n_classes")?,
            log_sigma_min: field(pairs, "model.log_sigma_min")?,
            log_sigma_max: field(pairs, "model.log_sigma_max")?,
            fine_tune_embeddings: field(pairs, "model.fine_tune_embeddings")?,
            vocab_size: field(pairs, "model.vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A headline/body pair ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub headline: EmbeddedSentence,
    pub body: EmbeddedSentence,
    pub label: usize,
}

/// Per-example (or batch-mean) decomposition of the variational bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboReport {
    /// `reconstruction − kl`.
    pub elbo: f64,
    /// Monte-Carlo mean of `log p(y | z)` over `samples` draws.
    pub reconstruction: f64,
    pub kl: f64,
    pub samples: usize,
    /// Standard error of the reconstruction estimate (0 for a single draw).
    pub std_error: f64,
}

/// Objective pieces recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    /// `reconstruction − kl_weight · kl`; maximized during training.
    pub objective: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PredictMode {
    /// `z = mu_prior(H)`.
    Mean,
    /// Average class probabilities over `L` prior samples.
    Sample(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
    pub attention_headline: Vec<f64>,
    pub attention_body: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct GaussianNet {
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
    mu_w: Var,
    mu_b: Var,
    ls: Option<(Var, Var)>,
}

/// Parameters recorded as leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<(String, Var)>,
    prior: Option<GaussianNet>,
    posterior: Option<GaussianNet>,
    attention: Option<Var>,
    cls_w: Var,
    cls_b: Var,
    embedding: Option<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }
}

/// Every trainable tensor of one encoder + classifier, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct VsamParameters {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

fn affine(tape: &mut Tape, w: Var, x: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(w, x)?;
    tape.add(y, b)
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    w.data()
        .chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn affine_values(w: &Tensor, x: &[f64], b: &Tensor) -> Vec<f64> {
    let mut y = matvec(w, x);
    y.iter_mut().zip(b.data()).for_each(|(v, c)| *v += c);
    y
}

fn mean_pool_values(h: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Degenerate("sentence has no valid tokens".into()));
    }
    let cols = h.cols();
    Ok(h.data()
        .chunks_exact(cols)
        .map(|row| {
            row.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum::<f64>() / valid as f64
        })
        .collect())
}

fn log_softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl VsamParameters {
    /// Random initialization: weights `U(±1/√fan_in)`, biases zero, and
    /// `log_sigma` biases at −1 so training starts near-deterministic.
    pub fn init(config: ModelConfig, seed: u64, embeddings: Option<&EmbeddingMatrix>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let tensor = if name == "embedding.weight" {
                let emb = embeddings.ok_or_else(|| {
                    Error::Contract("fine-tuning needs initial embeddings".into())
                })?;
                if emb.weights().shape() != shape.as_slice() {
                    return Err(Error::shape("embedding.weight", &shape, emb.weights().shape()));
                }
                emb.weights().clone()
            } else if name.ends_with(".bias") {
                let fill = if name.ends_with("log_sigma.bias") { -1.0 } else { 0.0 };
                let n = shape.iter().product();
                Tensor::new(shape, vec![fill; n])?
            } else {
                let bound = 1.0 / (shape[1] as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            };
            tensors.push((name, tensor.with_requires_grad(true)));
        }
        Ok(VsamParameters { config, tensors })
    }

    /// All-zero parameters (useful for symmetry checks).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s).with_requires_grad(true)))
            .collect();
        Ok(VsamParameters { config, tensors })
    }

    /// Rebuilds a parameter set, checking names and shapes against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::ConfigMismatch(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            ordered.push((name, t.with_requires_grad(true)));
        }
        Ok(VsamParameters {
            config,
            tensors: ordered,
        })
    }

    /// Copies the subset of tensors another encoder kind uses.
    pub fn restricted_to(&self, kind: ModelKind) -> Result<Self> {
        let config = ModelConfig {
            kind,
            ..self.config.clone()
        };
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, _)| {
                self.get(&name)
                    .cloned()
                    .map(|t| (name.clone(), t))
                    .ok_or_else(|| Error::ConfigMismatch(format!("{name} not present")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn req(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing for {}", self.kind())))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Inference-network tensors; everything else belongs to the generative side.
    pub fn is_inference_param(name: &str) -> bool {
        name.starts_with("posterior.")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.all_finite())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.bind_with(tape, None)
    }

    /// Like [`bind`](Self::bind), but substitutes `override_var` for the named tensor.
    pub fn bind_with(&self, tape: &mut Tape, override_var: Option<(&str, Var)>) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let v = match override_var {
                Some((o, v)) if o == name => {
                    if tape.shape(v) != t.shape() {
                        return Err(Error::shape("parameter override", t.shape(), tape.shape(v)));
                    }
                    v
                }
                _ => tape.leaf(t.clone()),
            };
            vars.push((name.clone(), v));
        }
        let find = |name: &str| -> Option<Var> { vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v) };
        let net = |prefix: &str| -> Option<GaussianNet> {
            Some(GaussianNet {
                fc1_w: find(&format!("{prefix}.fc1.weight"))?,
                fc1_b: find(&format!("{prefix}.fc1.bias"))?,
                fc2_w: find(&format!("{prefix}.fc2.weight"))?,
                fc2_b: find(&format!("{prefix}.fc2.bias"))?,
                mu_w: find(&format!("{prefix}.mu.weight"))?,
                mu_b: find(&format!("{prefix}.mu.bias"))?,
                ls: find(&format!("{prefix}.log_sigma.weight"))
                    .zip(find(&format!("{prefix}.log_sigma.bias"))),
            })
        };
        let bound = Bound {
            prior: net("prior"),
            posterior: net("posterior"),
            attention: find("attention.weight"),
            cls_w: find("classifier.weight").expect("classifier always present"),
            cls_b: find("classifier.bias").expect("classifier always present"),
            embedding: find("embedding.weight"),
            vars,
        };
        Ok(bound)
    }

    /// Adds the tape gradients of every bound leaf into the stored tensors.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for ((name, t), (bname, v)) in self.tensors.iter_mut().zip(&bound.vars) {
            debug_assert_eq!(name, bname);
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    // ---- tape path -------------------------------------------------------

    /// `H` for one sentence, gathered from the trainable table when fine-tuning.
    pub fn sentence_input(&self, tape: &mut Tape, b: &Bound, sent: &EmbeddedSentence) -> Result<Var> {
        match b.embedding {
            Some(w) => tape.gather_columns(w, &sent.indices, Some(PAD)),
            None => {
                if sent.matrix.rows() != self.config.embed_dim {
                    return Err(Error::shape(
                        "sentence matrix",
                        &[self.config.embed_dim, sent.width()],
                        sent.matrix.shape(),
                    ));
                }
                Ok(tape.constant(sent.matrix.clone()))
            }
        }
    }

    fn net_forward(&self, tape: &mut Tape, net: &GaussianNet, input: Var) -> Result<(Var, Option<Var>)> {
        let h1 = affine(tape, net.fc1_w, input, net.fc1_b)?;
        let h1 = tape.tanh(h1);
        let pi = affine(tape, net.fc2_w, h1, net.fc2_b)?;
        let pi = tape.tanh(pi);
        let mu = affine(tape, net.mu_w, pi, net.mu_b)?;
        let ls = match net.ls {
            Some((w, bias)) => Some(affine(tape, w, pi, bias)?),
            None => None,
        };
        Ok((mu, ls))
    }

    fn gaussian(&self, tape: &mut Tape, mu: Var, raw_ls: Option<Var>) -> Result<DiagonalGaussian> {
        let raw = raw_ls.ok_or_else(|| Error::Contract("network has no log_sigma head".into()))?;
        DiagonalGaussian::from_raw(tape, mu, raw, self.config.log_sigma_min, self.config.log_sigma_max)
    }

    /// Prior `p(z | H)` from the mean-pooled sentence.
    pub fn prior_params(&self, tape: &mut Tape, b: &Bound, h: Var, mask: &[bool]) -> Result<DiagonalGaussian> {
        let net = b.prior.ok_or_else(|| Error::Contract("no prior network".into()))?;
        let pooled = tape.mean_pool_columns(h, mask)?;
        let (mu, ls) = self.net_forward(tape, &net, pooled)?;
        self.gaussian(tape, mu, ls)
    }

    /// Prior mean only; the deterministic-attention latent.
    pub fn prior_mean(&self, tape: &mut Tape, b: &Bound, h: Var, mask: &[bool]) -> Result<Var> {
        let net = b.prior.ok_or_else(|| Error::Contract("no prior network".into()))?;
        let pooled = tape.mean_pool_columns(h, mask)?;
        Ok(self.net_forward(tape, &net, pooled)?.0)
    }

    /// Inference network `q(z | H, y)` over `[pooled H ; one-hot(y)]`.
    pub fn posterior_params(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: Var,
        mask: &[bool],
        label: usize,
    ) -> Result<DiagonalGaussian> {
        if label >= self.config.n_classes {
            return Err(Error::Contract(format!(
                "class index {label} out of range for {} classes",
                self.config.n_classes
            )));
        }
        let net = b.posterior.ok_or_else(|| Error::Contract("no inference network".into()))?;
        let pooled = tape.mean_pool_columns(h, mask)?;
        let mut one_hot = vec![0.0; self.config.n_classes];
        one_hot[label] = 1.0;
        let y = tape.constant(Tensor::vector(one_hot));
        let input = tape.concat(&[pooled, y])?;
        let (mu, ls) = self.net_forward(tape, &net, input)?;
        self.gaussian(tape, mu, ls)
    }

    /// `a = masked_softmax(tanh(W^z z))` over the sentence's positions.
    pub fn attention_weights(&self, tape: &mut Tape, b: &Bound, z: Var, mask: &[bool]) -> Result<Var> {
        let w = b.attention.ok_or_else(|| Error::Contract("no attention projection".into()))?;
        let width = self.config.attention_width();
        if mask.len() > width {
            return Err(Error::shape("attention_weights", &[width], &[mask.len()]));
        }
        let mut logits = tape.matmul(w, z)?;
        if mask.len() < width {
            logits = tape.slice(logits, 0, mask.len())?;
        }
        let squashed = tape.tanh(logits);
        tape.masked_softmax(squashed, mask)
    }

    /// `s = H a`.
    pub fn sentence_embedding(&self, tape: &mut Tape, h: Var, a: Var) -> Result<Var> {
        tape.matmul(h, a)
    }

    /// `[s_h ; s_b ; s_h ⊙ s_b]`.
    pub fn pair_features(&self, tape: &mut Tape, s_h: Var, s_b: Var) -> Result<Var> {
        let prod = tape.mul(s_h, s_b)?;
        tape.concat(&[s_h, s_b, prod])
    }

    pub fn classify_logits(&self, tape: &mut Tape, b: &Bound, features: Var) -> Result<Var> {
        affine(tape, b.cls_w, features, b.cls_b)
    }

    /// Class probabilities `p(y | s_h, s_b)`.
    pub fn classify(&self, tape: &mut Tape, b: &Bound, features: Var) -> Result<Var> {
        let logits = self.classify_logits(tape, b, features)?;
        tape.softmax(logits)
    }

    fn log_likelihood(&self, tape: &mut Tape, b: &Bound, s_h: Var, s_b: Var, label: usize) -> Result<Var> {
        let f = self.pair_features(tape, s_h, s_b)?;
        let logits = self.classify_logits(tape, b, f)?;
        let lp = tape.log_softmax(logits)?;
        tape.pick(lp, label)
    }

    /// Training objective for one example.
    ///
    /// For the latent model this is the ELBO with `samples` reparameterized
    /// draws from `q` per side and an analytic KL against the prior; the
    /// baselines reduce to the log-likelihood with `kl = 0`. Noise is drawn
    /// headline-then-body for each sample.
    pub fn objective(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ex: &EncodedExample,
        samples: usize,
        noise: &mut dyn NoiseSource,
        kl_weight: f64,
    ) -> Result<ObjectiveVars> {
        if samples < 1 {
            return Err(Error::Contract("need at least one sample".into()));
        }
        let hh = self.sentence_input(tape, b, &ex.headline)?;
        let hb = self.sentence_input(tape, b, &ex.body)?;
        let (mh, mb) = (&ex.headline.mask, &ex.body.mask);
        match self.config.kind {
            ModelKind::Vsam => {
                let p_h = self.prior_params(tape, b, hh, mh)?;
                let p_b = self.prior_params(tape, b, hb, mb)?;
                let q_h = self.posterior_params(tape, b, hh, mh, ex.label)?;
                let q_b = self.posterior_params(tape, b, hb, mb, ex.label)?;
                let dz = self.config.latent_dim;
                let mut total: Option<Var> = None;
                for _ in 0..samples {
                    let eh = noise.draw(dz);
                    let eb = noise.draw(dz);
                    let z_h = reparameterize(tape, &q_h, &eh)?;
                    let z_b = reparameterize(tape, &q_b, &eb)?;
                    let a_h = self.attention_weights(tape, b, z_h, mh)?;
                    let a_b = self.attention_weights(tape, b, z_b, mb)?;
                    let s_h = self.sentence_embedding(tape, hh, a_h)?;
                    let s_b = self.sentence_embedding(tape, hb, a_b)?;
                    let ll = self.log_likelihood(tape, b, s_h, s_b, ex.label)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, ll)?,
                        None => ll,
                    });
                }
                let reconstruction = tape.scale(total.expect("samples >= 1"), 1.0 / samples as f64);
                let kl_h = kl_divergence(tape, &q_h, &p_h)?;
                let kl_b = kl_divergence(tape, &q_b, &p_b)?;
                let kl = tape.add(kl_h, kl_b)?;
                let weighted = tape.scale(kl, kl_weight);
                let objective = tape.sub(reconstruction, weighted)?;
                Ok(ObjectiveVars {
                    objective,
                    reconstruction,
                    kl,
                })
            }
            ModelKind::DetAttention => {
                let z_h = self.prior_mean(tape, b, hh, mh)?;
                let z_b = self.prior_mean(tape, b, hb, mb)?;
                let a_h = self.attention_weights(tape, b, z_h, mh)?;
                let a_b = self.attention_weights(tape, b, z_b, mb)?;
                let s_h = self.sentence_embedding(tape, hh, a_h)?;
                let s_b = self.sentence_embedding(tape, hb, a_b)?;
                let ll = self.log_likelihood(tape, b, s_h, s_b, ex.label)?;
                let kl = tape.scalar(0.0);
                Ok(ObjectiveVars {
                    objective: ll,
                    reconstruction: ll,
                    kl,
                })
            }
            ModelKind::MeanEmbedding => {
                let s_h = tape.mean_pool_columns(hh, mh)?;
                let s_b = tape.mean_pool_columns(hb, mb)?;
                let ll = self.log_likelihood(tape, b, s_h, s_b, ex.label)?;
                let kl = tape.scalar(0.0);
                Ok(ObjectiveVars {
                    objective: ll,
                    reconstruction: ll,
                    kl,
                })
            }
        }
    }

    /// ELBO report for one example, evaluated on a fresh tape.
    pub fn elbo(
        &self,
        ex: &EncodedExample,
        samples: usize,
        noise: &mut dyn NoiseSource,
        kl_weight: f64,
    ) -> Result<ElboReport> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape)?;
        let o = self.objective(&mut tape, &b, ex, samples, noise, kl_weight)?;
        let reconstruction = tape.item(o.reconstruction)?;
        let kl = tape.item(o.kl)?;
        Ok(ElboReport {
            elbo: reconstruction - kl,
            reconstruction,
            kl,
            samples,
            std_error: 0.0,
        })
    }

    // ---- plain path ------------------------------------------------------

    fn plain_matrix<'a>(&'a self, sent: &'a EmbeddedSentence) -> Result<Cow<'a, Tensor>> {
        match self.get("embedding.weight") {
            Some(w) => {
                let (d, n_vocab) = (w.rows(), w.cols());
                let n = sent.width();
                let mut data = vec![0.0; d * n];
                for (j, &idx) in sent.indices.iter().enumerate() {
                    if idx != PAD && sent.mask[j] {
                        for r in 0..d {
                            data[r * n + j] = w.data()[r * n_vocab + idx];
                        }
                    }
                }
                Ok(Cow::Owned(Tensor::matrix(d, n, data)?))
            }
            None => {
                if sent.matrix.rows() != self.config.embed_dim {
                    return Err(Error::shape(
                        "sentence matrix",
                        &[self.config.embed_dim, sent.width()],
                        sent.matrix.shape(),
                    ));
                }
                Ok(Cow::Borrowed(&sent.matrix))
            }
        }
    }

    fn net_values(&self, prefix: &str, input: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let p = |s: &str| self.req(&format!("{prefix}.{s}"));
        let h1: Vec<f64> = affine_values(p("fc1.weight")?, input, p("fc1.bias")?)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let pi: Vec<f64> = affine_values(p("fc2.weight")?, &h1, p("fc2.bias")?)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let mu = affine_values(p("mu.weight")?, &pi, p("mu.bias")?);
        let ls = match (p("log_sigma.weight"), p("log_sigma.bias")) {
            (Ok(w), Ok(b)) => Some(
                affine_values(w, &pi, b)
                    .into_iter()
                    .map(|x| x.clamp(self.config.log_sigma_min, self.config.log_sigma_max))
                    .collect(),
            ),
            _ => None,
        };
        Ok((mu, ls))
    }

    /// Prior `p(z | H)` as plain values.
    pub fn prior_values(&self, sent: &EmbeddedSentence) -> Result<Gaussian> {
        let h = self.plain_matrix(sent)?;
        let pooled = mean_pool_values(&h, &sent.mask)?;
        let (mu, ls) = self.net_values("prior", &pooled)?;
        let log_sigma = ls.ok_or_else(|| Error::Contract("no prior log_sigma head".into()))?;
        Ok(Gaussian { mu, log_sigma })
    }

    /// Inference network `q(z | H, y)` as plain values.
    pub fn posterior_values(&self, sent: &EmbeddedSentence, label: usize) -> Result<Gaussian> {
        if label >= self.config.n_classes {
            return Err(Error::Contract(format!("class index {label} out of range")));
        }
        let h = self.plain_matrix(sent)?;
        let mut input = mean_pool_values(&h, &sent.mask)?;
        input.extend((0..self.config.n_classes).map(|c| if c == label { 1.0 } else { 0.0 }));
        let (mu, ls) = self.net_values("posterior", &input)?;
        let log_sigma = ls.ok_or_else(|| Error::Contract("no posterior log_sigma head".into()))?;
        Ok(Gaussian { mu, log_sigma })
    }

    fn attention_values(&self, z: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        let w = self.req("attention.weight")?;
        if mask.len() > w.rows() {
            return Err(Error::shape("attention_weights", &[w.rows()], &[mask.len()]));
        }
        let logits: Vec<f64> = matvec(w, z).into_iter().take(mask.len()).map(f64::tanh).collect();
        masked_softmax_values(&logits, mask)
    }

    fn weighted_columns(h: &Tensor, a: &[f64]) -> Vec<f64> {
        matvec(h, a)
    }

    fn class_log_probs(&self, s_h: &[f64], s_b: &[f64]) -> Result<Vec<f64>> {
        let mut f = Vec::with_capacity(3 * s_h.len());
        f.extend_from_slice(s_h);
        f.extend_from_slice(s_b);
        f.extend(s_h.iter().zip(s_b).map(|(a, b)| a * b));
        let logits = affine_values(self.req("classifier.weight")?, &f, self.req("classifier.bias")?);
        Ok(log_softmax_values(&logits))
    }

    /// Log class probabilities for fixed latents on both sides.
    fn log_probs_given_latents(
        &self,
        h_h: &Tensor,
        m_h: &[bool],
        h_b: &Tensor,
        m_b: &[bool],
        z_h: &[f64],
        z_b: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let a_h = self.attention_values(z_h, m_h)?;
        let a_b = self.attention_values(z_b, m_b)?;
        let s_h = Self::weighted_columns(h_h, &a_h);
        let s_b = Self::weighted_columns(h_b, &a_b);
        Ok((self.class_log_probs(&s_h, &s_b)?, a_h, a_b))
    }

    /// Class prediction for a headline/body pair.
    ///
    /// The latent model uses the prior network; the inference network is
    /// never consulted at prediction time. Returned attention vectors are
    /// averaged over samples in sampling mode.
    pub fn predict(
        &self,
        headline: &EmbeddedSentence,
        body: &EmbeddedSentence,
        mode: PredictMode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Prediction> {
        let h_h = self.plain_matrix(headline)?;
        let h_b = self.plain_matrix(body)?;
        let (m_h, m_b) = (&headline.mask, &body.mask);
        let finish = |probs: Vec<f64>, a_h: Vec<f64>, a_b: Vec<f64>| Prediction {
            class: argmax(&probs),
            probs,
            attention_headline: a_h,
            attention_body: a_b,
        };
        match (self.config.kind, mode) {
            (ModelKind::MeanEmbedding, _) => {
                let s_h = mean_pool_values(&h_h, m_h)?;
                let s_b = mean_pool_values(&h_b, m_b)?;
                let uniform = |m: &[bool]| masked_softmax_values(&vec![0.0; m.len()], m);
                let probs = self.class_log_probs(&s_h, &s_b)?.iter().map(|x| x.exp()).collect();
                Ok(finish(probs, uniform(m_h)?, uniform(m_b)?))
            }
            (ModelKind::DetAttention, _) | (ModelKind::Vsam, PredictMode::Mean) => {
                let z_h = self.net_values("prior", &mean_pool_values(&h_h, m_h)?)?.0;
                let z_b = self.net_values("prior", &mean_pool_values(&h_b, m_b)?)?.0;
                let (lp, a_h, a_b) = self.log_probs_given_latents(&h_h, m_h, &h_b, m_b, &z_h, &z_b)?;
                Ok(finish(lp.iter().map(|x| x.exp()).collect(), a_h, a_b))
            }
            (ModelKind::Vsam, PredictMode::Sample(l)) => {
                if l == 0 {
                    return Err(Error::Contract("sampling mode needs L >= 1".into()));
                }
                let p_h = self.prior_values(headline)?;
                let p_b = self.prior_values(body)?;
                let dz = self.config.latent_dim;
                let c = self.config.n_classes;
                let mut probs = vec![0.0; c];
                let mut acc_h = vec![0.0; m_h.len()];
                let mut acc_b = vec![0.0; m_b.len()];
                for _ in 0..l {
                    let z_h = p_h.sample(noise.draw(dz).eps.data());
                    let z_b = p_b.sample(noise.draw(dz).eps.data());
                    let (lp, a_h, a_b) =
                        self.log_probs_given_latents(&h_h, m_h, &h_b, m_b, &z_h, &z_b)?;
                    probs.iter_mut().zip(&lp).for_each(|(p, x)| *p += x.exp());
                    acc_h.iter_mut().zip(&a_h).for_each(|(p, x)| *p += x);
                    acc_b.iter_mut().zip(&a_b).for_each(|(p, x)| *p += x);
                }
                let inv = 1.0 / l as f64;
                for v in probs.iter_mut().chain(acc_h.iter_mut()).chain(acc_b.iter_mut()) {
                    *v *= inv;
                }
                Ok(finish(probs, acc_h, acc_b))
            }
        }
    }

    /// Monte-Carlo ELBO with `samples` draws from `q`, without a tape.
    ///
    /// Consumes noise in the same order as [`objective`](Self::objective), so
    /// both paths agree exactly for a shared seed.
    pub fn elbo_estimate(
        &self,
        ex: &EncodedExample,
        samples: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<ElboReport> {
        if self.config.kind != ModelKind::Vsam {
            return Err(Error::Contract("ELBO is defined for the latent model only".into()));
        }
        if samples < 1 {
            return Err(Error::Contract("need at least one sample".into()));
        }
        let h_h = self.plain_matrix(&ex.headline)?;
        let h_b = self.plain_matrix(&ex.body)?;
        let (m_h, m_b) = (&ex.headline.mask, &ex.body.mask);
        let q_h = self.posterior_values(&ex.headline, ex.label)?;
        let q_b = self.posterior_values(&ex.body, ex.label)?;
        let kl = q_h.kl(&self.prior_values(&ex.headline)?) + q_b.kl(&self.prior_values(&ex.body)?);
        let dz = self.config.latent_dim;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let z_h = q_h.sample(noise.draw(dz).eps.data());
            let z_b = q_b.sample(noise.draw(dz).eps.data());
            let (lp, _, _) = self.log_probs_given_latents(&h_h, m_h, &h_b, m_b, &z_h, &z_b)?;
            let ll = lp[ex.label];
            sum += ll;
            sum_sq += ll * ll;
        }
        let n = samples as f64;
        let reconstruction = sum / n;
        let std_error = if samples > 1 {
            ((sum_sq / n - reconstruction * reconstruction).max(0.0) / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(ElboReport {
            elbo: reconstruction - kl,
            reconstruction,
            kl,
            samples,
            std_error,
        })
    }

    /// `log p(y | H)` estimated as `log mean_m p(y | z_m)` with `z_m` drawn
    /// from the prior on both sides.
    pub fn log_evidence_estimate(
        &self,
        ex: &EncodedExample,
        samples: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<f64> {
        if self.config.kind != ModelKind::Vsam || samples == 0 {
            return Err(Error::Contract("log-evidence needs the latent model and samples >= 1".into()));
        }
        let h_h = self.plain_matrix(&ex.headline)?;
        let h_b = self.plain_matrix(&ex.body)?;
        let (m_h, m_b) = (&ex.headline.mask, &ex.body.mask);
        let p_h = self.prior_values(&ex.headline)?;
        let p_b = self.prior_values(&ex.body)?;
        let dz = self.config.latent_dim;
        // streaming log-sum-exp
        let (mut max, mut acc) = (f64::NEG_INFINITY, 0.0);
        for _ in 0..samples {
            let z_h = p_h.sample(noise.draw(dz).eps.data());
            let z_b = p_b.sample(noise.draw(dz).eps.data());
            let (lp, _, _) = self.log_probs_given_latents(&h_h, m_h, &h_b, m_b, &z_h, &z_b)?;
            let x = lp[ex.label];
            if x > max {
                acc = acc * (max - x).exp() + 1.0;
                max = x;
            } else {
                acc += (x - max).exp();
            }
        }
        Ok(max + (acc / samples as f64).ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use crate::variational::{NoiseGenerator, ZeroNoise};
    use approx::assert_abs_diff_eq;

    fn sentence(d: usize, width: usize, valid: usize, rng: &mut ChaCha8Rng) -> EmbeddedSentence {
        let mut data = vec![0.0; d * width];
        for r in 0..d {
            for j in 0..valid {
                data[r * width + j] = rng.random_range(-1.0..1.0);
            }
        }
        EmbeddedSentence {
            indices: (0..width).map(|j| if j < valid { 2 + j } else { PAD }).collect(),
            mask: (0..width).map(|j| j < valid).collect(),
            matrix: Tensor::matrix(d, width, data).unwrap(),
        }
    }

    fn example(cfg: &ModelConfig, seed: u64) -> EncodedExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncodedExample {
            headline: sentence(cfg.embed_dim, cfg.n_max_headline, 3, &mut rng),
            body: sentence(cfg.embed_dim, cfg.n_max_body, 5, &mut rng),
            label: 2,
        }
    }

    #[test]
    fn parameter_names_per_kind() {
        let cfg = ModelConfig::tiny();
        let names: Vec<_> = cfg.parameter_shapes().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 8 + 8 + 1 + 2);
        let det = ModelConfig {
            kind: ModelKind::DetAttention,
            ..cfg.clone()
        };
        assert_eq!(det.parameter_shapes().len(), 6 + 1 + 2);
        let mean = ModelConfig {
            kind: ModelKind::MeanEmbedding,
            ..cfg
        };
        assert_eq!(mean.parameter_shapes().len(), 2);
    }

    #[test]
    fn zero_weights_give_bias_mean_and_uniform_outputs() {
        let cfg = ModelConfig::tiny();
        let mut p = VsamParameters::zeros(cfg.clone()).unwrap();
        p.get_mut("prior.mu.bias").unwrap().data_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let ex = example(&cfg, 1);
        let prior = p.prior_values(&ex.headline).unwrap();
        assert_eq!(prior.mu, vec![0.1, 0.2, 0.3, 0.4]);
        let pred = p.predict(&ex.headline, &ex.body, PredictMode::Mean, &mut ZeroNoise).unwrap();
        assert_eq!(pred.probs, vec![0.25; 4]);
        // W^z = 0 → uniform attention over the valid positions
        for (j, a) in pred.attention_headline.iter().enumerate() {
            let expect = if j < 3 { 1.0 / 3.0 } else { 0.0 };
            assert_abs_diff_eq!(*a, expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn prior_is_invariant_to_column_permutation() {
        let cfg = ModelConfig::tiny();
        let p = VsamParameters::init(cfg.clone(), 5, None).unwrap();
        let ex = example(&cfg, 2);
        let mut permuted = ex.body.clone();
        let d = cfg.embed_dim;
        let w = permuted.width();
        let order = [3, 0, 4, 1, 2];
        for r in 0..d {
            for (j, &src) in order.iter().enumerate() {
                permuted.matrix.data_mut()[r * w + j] = ex.body.matrix.at(r, src);
            }
        }
        let a = p.prior_values(&ex.body).unwrap();
        let b = p.prior_values(&permuted).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu).chain(a.log_sigma.iter().zip(&b.log_sigma)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_depends_on_label_only_through_label_weights() {
        let cfg = ModelConfig::tiny();
        let mut p = VsamParameters::init(cfg.clone(), 6, None).unwrap();
        let ex = example(&cfg, 3);
        let q0 = p.posterior_values(&ex.body, 0).unwrap();
        let q1 = p.posterior_values(&ex.body, 1).unwrap();
        assert!(q0.mu.iter().zip(&q1.mu).any(|(a, b)| (a - b).abs() > 1e-6));

        let d = cfg.embed_dim;
        let w = p.get_mut("posterior.fc1.weight").unwrap();
        let cols = w.cols();
        for r in 0..w.rows() {
            for c in d..cols {
                w.data_mut()[r * cols + c] = 0.0;
            }
        }
        let base = p.posterior_values(&ex.body, 0).unwrap();
        for y in 1..4 {
            assert_eq!(p.posterior_values(&ex.body, y).unwrap(), base);
        }
        assert!(p.posterior_values(&ex.body, 4).is_err());
        let mut tape = Tape::new();
        let b = p.bind(&mut tape).unwrap();
        let h = p.sentence_input(&mut tape, &b, &ex.body).unwrap();
        assert!(matches!(
            p.posterior_params(&mut tape, &b, h, &ex.body.mask, 7),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let cfg = ModelConfig::tiny();
        let p = VsamParameters::init(cfg.clone(), 9, None).unwrap();
        let ex = example(&cfg, 4);
        let tape_report = p.elbo(&ex, 3, &mut NoiseGenerator::new(77), 1.0).unwrap();
        let plain = p.elbo_estimate(&ex, 3, &mut NoiseGenerator::new(77)).unwrap();
        assert_abs_diff_eq!(tape_report.reconstruction, plain.reconstruction, epsilon = 1e-12);
        assert_abs_diff_eq!(tape_report.kl, plain.kl, epsilon = 1e-12);

        let mut tape = Tape::new();
        let b = p.bind(&mut tape).unwrap();
        let hh = p.sentence_input(&mut tape, &b, &ex.headline).unwrap();
        let prior = p.prior_params(&mut tape, &b, hh, &ex.headline.mask).unwrap();
        assert_eq!(prior.values(&tape), p.prior_values(&ex.headline).unwrap());
    }

    #[test]
    fn attention_single_position_and_validity() {
        let cfg = ModelConfig::tiny();
        let p = VsamParameters::init(cfg.clone(), 10, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = sentence(cfg.embed_dim, cfg.n_max_headline, 1, &mut rng);
        let body = sentence(cfg.embed_dim, cfg.n_max_body, 6, &mut rng);
        let pred = p
            .predict(&one, &body, PredictMode::Sample(5), &mut NoiseGenerator::new(1))
            .unwrap();
        assert_abs_diff_eq!(pred.attention_headline[0], 1.0, epsilon = 1e-15);
        assert!(pred.attention_headline[1..].iter().all(|&a| a == 0.0));
        assert!(pred.attention_body.iter().all(|&a| a >= 0.0));
        assert_abs_diff_eq!(pred.attention_body.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(pred.attention_body[6..].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn attention_gradient_through_tanh_softmax() {
        let cfg = ModelConfig::tiny();
        let p = VsamParameters::init(cfg.clone(), 11, None).unwrap();
        let mask: Vec<bool> = (0..cfg.n_max_body).map(|j| j < 5).collect();
        let z = Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]);
        let probe: Vec<f64> = (0..cfg.n_max_body).map(|j| (j as f64 * 0.37).sin()).collect();
        let err = finite_difference_check(
            |t, z| {
                let b = p.bind(t)?;
                let a = p.attention_weights(t, &b, z, &mask)?;
                let w = t.constant(Tensor::vector(probe.clone()));
                let y = t.mul(a, w)?;
                Ok(t.sum(y))
            },
            &z,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sentence_embedding_selection_and_midpoint() {
        let mut t = Tape::new();
        let p = VsamParameters::zeros(ModelConfig::tiny()).unwrap();
        // columns u = [1, 2], v = [3, 6], w = [5, 0]
        let h = t.constant(Tensor::matrix(2, 3, vec![1., 3., 5., 2., 6., 0.]).unwrap());
        let a = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let s = p.sentence_embedding(&mut t, h, a).unwrap();
        assert_eq!(t.data(s), &[3.0, 6.0]);
        let a = t.constant(Tensor::vector(vec![0.5, 0.5, 0.0]));
        let s = p.sentence_embedding(&mut t, h, a).unwrap();
        assert_eq!(t.data(s), &[2.0, 4.0]);
        let bad = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(p.sentence_embedding(&mut t, h, bad).is_err());
    }

    #[test]
    fn classifier_zero_weights_uniform_and_bias_shift() {
        let cfg = ModelConfig::tiny();
        let mut p = VsamParameters::zeros(cfg.clone()).unwrap();
        let mut t = Tape::new();
        let feats = t.constant(Tensor::vector((0..24).map(|i| (i as f64).cos()).collect()));
        let b = p.bind(&mut t).unwrap();
        let probs = p.classify(&mut t, &b, feats).unwrap();
        assert_eq!(t.data(probs), &[0.25; 4]);

        p.get_mut("classifier.bias").unwrap().data_mut()[3] = 2.0;
        let mut t = Tape::new();
        let feats = t.constant(Tensor::vector(vec![0.5; 24]));
        let b = p.bind(&mut t).unwrap();
        let probs = p.classify(&mut t, &b, feats).unwrap();
        assert_eq!(argmax(t.data(probs)), 3);
        assert_abs_diff_eq!(t.data(probs).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn elbo_rejects_zero_samples_and_kl_identity() {
        let cfg = ModelConfig::tiny();
        let mut p = VsamParameters::init(cfg.clone(), 12, None).unwrap();
        let ex = example(&cfg, 5);
        assert!(p.elbo(&ex, 0, &mut ZeroNoise, 1.0).is_err());
        let r = p.elbo(&ex, 2, &mut NoiseGenerator::new(3), 1.0).unwrap();
        assert!(r.kl >= 0.0 && r.elbo <= r.reconstruction);

        // share the prior's outputs with q: zero label weights and copy the rest
        let d = cfg.embed_dim;
        for suffix in ["fc1.bias", "fc2.weight", "fc2.bias", "mu.weight", "mu.bias", "log_sigma.weight", "log_sigma.bias"] {
            let src = p.get(&format!("prior.{suffix}")).unwrap().clone();
            *p.get_mut(&format!("posterior.{suffix}")).unwrap() = src;
        }
        let prior_fc1 = p.get("prior.fc1.weight").unwrap().clone();
        let post_fc1 = p.get_mut("posterior.fc1.weight").unwrap();
        let cols = post_fc1.cols();
        for r in 0..post_fc1.rows() {
            for c in 0..cols {
                post_fc1.data_mut()[r * cols + c] = if c < d { prior_fc1.at(r, c) } else { 0.0 };
            }
        }
        let r = p.elbo(&ex, 2, &mut NoiseGenerator::new(3), 1.0).unwrap();
        assert!(r.kl.abs() < 1e-12);
        assert_eq!(r.elbo, r.reconstruction - r.kl);
    }

    #[test]
    fn zero_noise_sample_equals_mean_mode() {
        let cfg = ModelConfig::tiny();
        let p = VsamParameters::init(cfg.clone(), 13, None).unwrap();
        let ex = example(&cfg, 6);
        let a = p.predict(&ex.headline, &ex.body, PredictMode::Mean, &mut ZeroNoise).unwrap();
        let b = p.predict(&ex.headline, &ex.body, PredictMode::Sample(1), &mut ZeroNoise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn det_baseline_matches_vsam_mean_mode() {
        let cfg = ModelConfig::tiny();
        let p = VsamParameters::init(cfg.clone(), 14, None).unwrap();
        let det = p.restricted_to(ModelKind::DetAttention).unwrap();
        let ex = example(&cfg, 7);
        let a = p.predict(&ex.headline, &ex.body, PredictMode::Mean, &mut ZeroNoise).unwrap();
        let b = det.predict(&ex.headline, &ex.body, PredictMode::Mean, &mut ZeroNoise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_baseline_single_token_and_permutation() {
        let cfg = ModelConfig {
            kind: ModelKind::MeanEmbedding,
            ..ModelConfig::tiny()
        };
        let p = VsamParameters::init(cfg.clone(), 15, None).unwrap();
        let ex = example(&cfg, 8);
        let base = p.predict(&ex.headline, &ex.body, PredictMode::Mean, &mut ZeroNoise).unwrap();
        let mut rev = ex.body.clone();
        let w = rev.width();
        for r in 0..cfg.embed_dim {
            for j in 0..5 {
                rev.matrix.data_mut()[r * w + j] = ex.body.matrix.at(r, 4 - j);
            }
        }
        let other = p.predict(&ex.headline, &rev, PredictMode::Mean, &mut ZeroNoise).unwrap();
        for (a, b) in base.probs.iter().zip(&other.probs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(base.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        // one-token sentences classify the raw token vectors
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h1 = sentence(cfg.embed_dim, cfg.n_max_headline, 1, &mut rng);
        let b1 = sentence(cfg.embed_dim, cfg.n_max_body, 1, &mut rng);
        let pred = p.predict(&h1, &b1, PredictMode::Mean, &mut ZeroNoise).unwrap();
        let (u, v) = (h1.matrix.column(0), b1.matrix.column(0));
        let lp = p.class_log_probs(&u, &v).unwrap();
        for (a, b) in pred.probs.iter().zip(&lp) {
            assert_abs_diff_eq!(*a, b.exp(), epsilon = 1e-15);
        }
    }

    #[test]
    fn from_tensors_validates_shapes() {
        let cfg = ModelConfig::tiny();
        let p = VsamParameters::init(cfg.clone(), 1, None).unwrap();
        let mut tensors: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert!(VsamParameters::from_tensors(cfg.clone(), tensors.clone()).is_ok());
        tensors[0].1 = Tensor::zeros(vec![1, 1]);
        assert!(matches!(
            VsamParameters::from_tensors(cfg.clone(), tensors.clone()),
            Err(Error::ConfigMismatch(_))
        ));
        tensors.pop();
        assert!(VsamParameters::from_tensors(cfg, tensors).is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let cfg = ModelConfig {
            log_sigma_max: -8.0,
            ..ModelConfig::tiny()
        };
        let map: BTreeMap<_, _> = cfg.to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), cfg);
    }
}
