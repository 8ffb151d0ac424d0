//! Diagonal Gaussians, reparameterized sampling and the closed-form KL term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 8.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `N(mu, diag(exp(log_sigma)^2))` recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DiagonalGaussian {
    pub mu: Var,
    pub log_sigma: Var,
}

impl DiagonalGaussian {
    pub fn new(tape: &Tape, mu: Var, log_sigma: Var) -> Result<Self> {
        let (a, b) = (tape.shape(mu), tape.shape(log_sigma));
        if a.len() != 1 || a != b {
            return Err(Error::shape("diagonal gaussian", a, b));
        }
        Ok(DiagonalGaussian { mu, log_sigma })
    }

    /// Builds the Gaussian from raw network outputs, clamping `log_sigma`.
    pub fn from_raw(tape: &mut Tape, mu: Var, raw_log_sigma: Var, lo: f64, hi: f64) -> Result<Self> {
        let log_sigma = tape.clamp(raw_log_sigma, lo, hi);
        Self::new(tape, mu, log_sigma)
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mu).numel()
    }

    pub fn values(&self, tape: &Tape) -> Gaussian {
        Gaussian {
            mu: tape.data(self.mu).to_vec(),
            log_sigma: tape.data(self.log_sigma).to_vec(),
        }
    }
}

/// Plain-value diagonal Gaussian for sampling-heavy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl Gaussian {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eps)
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(z)
            .map(|((m, ls), x)| {
                let u = (x - m) * (-ls).exp();
                -HALF_LN_2PI - ls - 0.5 * u * u
            })
            .sum()
    }

    /// `KL(self ‖ p)` in closed form.
    pub fn kl(&self, p: &Gaussian) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(p.mu.iter().zip(&p.log_sigma))
            .map(|((mq, lq), (mp, lp))| {
                let var_q = (2.0 * lq).exp();
                let d = mq - mp;
                (lp - lq) + (var_q + d * d) / (2.0 * (2.0 * lp).exp()) - 0.5
            })
            .sum()
    }
}

/// Where a noise vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseProvenance {
    pub seed: u64,
    pub index: u64,
}

/// Standard-normal noise `ϵ` paired with one reparameterized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub eps: Tensor,
    pub provenance: NoiseProvenance,
}

pub trait NoiseSource {
    fn draw(&mut self, dim: usize) -> NoiseDraw;
}

/// Seedable i.i.d. `N(0, 1)` generator.
#[derive(Clone, Debug)]
pub struct NoiseGenerator {
    rng: ChaCha8Rng,
    seed: u64,
    draws: u64,
}

impl NoiseGenerator {
    pub fn new(seed: u64) -> Self {
        NoiseGenerator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            draws: 0,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for x in out {
            *x = StandardNormal.sample(&mut self.rng);
        }
    }
}

impl NoiseSource for NoiseGenerator {
    fn draw(&mut self, dim: usize) -> NoiseDraw {
        let mut eps = vec![0.0; dim];
        self.fill(&mut eps);
        let provenance = NoiseProvenance {
            seed: self.seed,
            index: self.draws,
        };
        self.draws += 1;
        NoiseDraw {
            eps: Tensor::vector(eps),
            provenance,
        }
    }
}

/// Always returns `ϵ = 0`, collapsing every sample onto the mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, dim: usize) -> NoiseDraw {
        NoiseDraw {
            eps: Tensor::vector(vec![0.0; dim]),
            provenance: NoiseProvenance { seed: 0, index: 0 },
        }
    }
}

pub fn draw_noise(dim: usize, source: &mut dyn NoiseSource) -> NoiseDraw {
    source.draw(dim)
}

/// `z = mu + exp(log_sigma) ⊙ ϵ`; `ϵ` is a constant on the tape.
pub fn reparameterize(tape: &mut Tape, g: &DiagonalGaussian, noise: &NoiseDraw) -> Result<Var> {
    let d = g.dim(tape);
    if noise.eps.numel() != d {
        return Err(Error::shape("reparameterize", &[d], noise.eps.shape()));
    }
    let sigma = tape.exp(g.log_sigma);
    let eps = tape.constant(noise.eps.clone());
    let scaled = tape.mul(sigma, eps)?;
    tape.add(g.mu, scaled)
}

/// Closed-form `KL(q ‖ p)` summed over dimensions.
pub fn kl_divergence(tape: &mut Tape, q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<Var> {
    let (dq, dp) = (q.dim(tape), p.dim(tape));
    if dq != dp {
        return Err(Error::shape("kl_divergence", &[dq], &[dp]));
    }
    let log_ratio = tape.sub(p.log_sigma, q.log_sigma)?;
    let two_lq = tape.scale(q.log_sigma, 2.0);
    let var_q = tape.exp(two_lq);
    let diff = tape.sub(q.mu, p.mu)?;
    let diff_sq = tape.mul(diff, diff)?;
    let num = tape.add(var_q, diff_sq)?;
    let neg_two_lp = tape.scale(p.log_sigma, -2.0);
    let inv_var_p = tape.exp(neg_two_lp);
    let ratio = tape.mul(num, inv_var_p)?;
    let half_ratio = tape.scale(ratio, 0.5);
    let terms = tape.add(log_ratio, half_ratio)?;
    let total = tape.sum(terms);
    let offset = tape.scalar(-0.5 * dq as f64);
    tape.add(total, offset)
}

/// `log N(z | mu, diag(sigma^2))`.
pub fn log_density(tape: &mut Tape, g: &DiagonalGaussian, z: Var) -> Result<Var> {
    let d = g.dim(tape);
    if tape.shape(z) != [d] {
        return Err(Error::shape("log_density", &[d], tape.shape(z)));
    }
    let diff = tape.sub(z, g.mu)?;
    let neg_ls = tape.scale(g.log_sigma, -1.0);
    let inv_sigma = tape.exp(neg_ls);
    let u = tape.mul(diff, inv_sigma)?;
    let u2 = tape.mul(u, u)?;
    let half_u2 = tape.scale(u2, -0.5);
    let terms = tape.add(half_u2, neg_ls)?;
    let total = tape.sum(terms);
    let offset = tape.scalar(-HALF_LN_2PI * d as f64);
    tape.add(total, offset)
}
