//! Stochastic gradient Langevin dynamics for drawing negative samples from
//! the energy head.
//!
//! One update is `x' = x - (step_size / 2) * dE/dx + noise_std * eta` with
//! `eta ~ N(0, I)`. Setting `noise_std = sqrt(step_size)` gives the textbook
//! sampler whose stationary law is `exp(-E)`. The training default decouples
//! the two: a large gradient step with small noise.
//!
//! Chains start from a diagonal Gaussian mixture fitted to the training data
//! and are re-drawn for every outer training step (no replay buffer).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::ModelState;
use crate::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const DIVERGENCE_BOUND: f64 = 1e2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Informative,
    UniformNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgldConfig {
    /// Outer updates per chain.
    pub steps: usize,
    pub step_size: f64,
    pub noise_std: f64,
    pub init_mode: InitMode,
    /// Freeze the gradient above the first layer for `yopo_inner_steps`
    /// first-layer-only updates per outer step.
    pub yopo: bool,
    pub yopo_inner_steps: usize,
    /// Keep particles inside [-1, 1]^D.
    pub clamp: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            steps: 20,
            step_size: 2.0,
            noise_std: 0.01,
            init_mode: InitMode::Informative,
            yopo: false,
            yopo_inner_steps: 1,
            clamp: false,
        }
    }
}

impl SgldConfig {
    /// The matched-noise sampler, `noise_std = sqrt(step_size)`.
    pub fn matched(step_size: f64, steps: usize) -> Self {
        SgldConfig {
            steps,
            step_size,
            noise_std: step_size.sqrt(),
            ..Default::default()
        }
    }

    /// Full configuration check used when a run is configured.
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::validation("sgld steps must be at least 1"));
        }
        self.validate_update()
    }

    /// Checks only the update rule; a zero-step chain is a valid no-op.
    pub fn validate_update(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::validation("sgld step_size must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::validation("sgld noise_std must be non-negative"));
        }
        if self.yopo && self.yopo_inner_steps < 1 {
            return Err(Error::validation("yopo_inner_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Something with an energy and an input gradient that SGLD can walk on.
///
/// `freeze` / `first_layer_grad` split the input gradient at the first
/// layer: the full gradient must equal `first_layer_grad(x, freeze(x))`
/// bit for bit.
pub trait EnergySurface: Sync {
    fn dim(&self) -> usize;
    fn energy(&self, x: &[f64]) -> Result<f64>;
    fn energy_grad(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn freeze(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn first_layer_grad(&self, x: &[f64], frozen: &[f64]) -> Result<Vec<f64>>;
}

impl EnergySurface for ModelState {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        ModelState::energy(self, x)
    }

    fn energy_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.grad_energy_input(x)
    }

    fn freeze(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.frozen_upper_grad(x)
    }

    fn first_layer_grad(&self, x: &[f64], frozen: &[f64]) -> Result<Vec<f64>> {
        self.first_layer_input_grad(x, frozen)
    }
}

/// Diagonal Gaussian mixture used to start chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureInit {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Fits per-class moments when labels are given, otherwise one component.
/// Classes with no samples get no component; weights are empirical class
/// frequencies.
pub fn fit_informative_init(
    features: &[&[f64]],
    labels: Option<&[usize]>,
) -> Result<GaussianMixtureInit> {
    let first = features
        .first()
        .ok_or_else(|| Error::validation("cannot fit an initialisation to zero samples"))?;
    let d = first.len();
    let groups: Vec<Vec<&[f64]>> = match labels {
        Some(labels) => {
            if labels.len() != features.len() {
                return Err(Error::validation("one label per sample is required"));
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut groups = vec![Vec::new(); k];
            for (x, &y) in features.iter().zip(labels) {
                groups[y].push(*x);
            }
            groups.retain(|g| !g.is_empty());
            groups
        }
        None => vec![features.to_vec()],
    };

    let n = features.len() as f64;
    let mut mixture = GaussianMixtureInit {
        means: Vec::with_capacity(groups.len()),
        variances: Vec::with_capacity(groups.len()),
        weights: Vec::with_capacity(groups.len()),
    };
    for group in groups {
        let count = group.len() as f64;
        let mut mean = vec![0.0; d];
        for x in &group {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for x in &group {
            for ((s, v), m) in var.iter_mut().zip(x.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / count).max(VARIANCE_FLOOR));
        mixture.means.push(mean);
        mixture.variances.push(var);
        mixture.weights.push(count / n);
    }
    Ok(mixture)
}

impl GaussianMixtureInit {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for (m, w) in self.means.iter().zip(&self.weights) {
            for (a, b) in mean.iter_mut().zip(m) {
                *a += w * b;
            }
        }
        mean
    }
}

/// One Langevin update. Always draws `x.len()` normals so the random stream
/// does not depend on `noise_std`.
pub fn sgld_step<R: Rng + ?Sized>(
    x: &[f64],
    grad_energy: &[f64],
    step_size: f64,
    noise_std: f64,
    clamp: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if grad_energy.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite energy gradient in sgld step"));
    }
    let half = 0.5 * step_size;
    Ok(x.iter()
        .zip(grad_energy)
        .map(|(xi, gi)| {
            let eta: f64 = StandardNormal.sample(rng);
            let v = xi - half * gi + noise_std * eta;
            if clamp {
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect())
}

fn check_divergence(x: &[f64], clamp: bool, step: usize) -> Result<()> {
    if !clamp && x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
        return Err(Error::numeric(format!("sgld chain diverged at step {step}")));
    }
    Ok(())
}

/// Runs a single chain from `start`.
pub fn run_single_chain<E: EnergySurface + ?Sized, R: Rng + ?Sized>(
    surface: &E,
    config: &SgldConfig,
    start: Vec<f64>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x = start;
    let mut step = 0;
    for _ in 0..config.steps {
        if config.yopo {
            let frozen = surface.freeze(&x)?;
            for _ in 0..config.yopo_inner_steps {
                let grad = surface.first_layer_grad(&x, &frozen)?;
                x = sgld_step(&x, &grad, config.step_size, config.noise_std, config.clamp, rng)?;
                step += 1;
                check_divergence(&x, config.clamp, step)?;
            }
        } else {
            let grad = surface.energy_grad(&x)?;
            x = sgld_step(&x, &grad, config.step_size, config.noise_std, config.clamp, rng)?;
            step += 1;
            check_divergence(&x, config.clamp, step)?;
        }
    }
    Ok(x)
}

/// Draws a starting point according to `config.init_mode`.
pub fn init_particle<R: Rng + ?Sized>(
    config: &SgldConfig,
    init: &GaussianMixtureInit,
    dim: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut x = match config.init_mode {
        InitMode::Informative => init.sample(rng),
        InitMode::UniformNoise => (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
    };
    if config.clamp {
        x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    x
}

/// Produces `batch` negative samples. Each chain owns an rng stream seeded
/// from `rng`, so results do not depend on thread scheduling.
pub fn run_chains<E: EnergySurface + ?Sized, R: RngCore + ?Sized>(
    surface: &E,
    config: &SgldConfig,
    init: &GaussianMixtureInit,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let seeds: Vec<u64> = (0..batch).map(|_| rng.next_u64()).collect();
    let dim = surface.dim();
    seeds
        .into_par_iter()
        .map(|seed| {
            let mut chain_rng = ChaCha8Rng::seed_from_u64(seed);
            let start = init_particle(config, init, dim, &mut chain_rng);
            run_single_chain(surface, config, start, &mut chain_rng)
        })
        .collect()
}

/// Convenience wrapper sampling negatives from a model.
pub fn run_chain<R: RngCore + ?Sized>(
    state: &ModelState,
    config: &SgldConfig,
    init: &GaussianMixtureInit,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    config.validate_update()?;
    if init.dim() != state.input_dim() && config.init_mode == InitMode::Informative {
        return Err(Error::validation("initialisation dimension does not match the model input"));
    }
    run_chains(state, config, init, batch, rng)
}
