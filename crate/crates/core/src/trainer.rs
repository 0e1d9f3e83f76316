//! Joint training of the classifier and energy heads.
//!
//! The objective over labeled samples `L` and all pool samples `A` is
//!
//! ```text
//! CE(L) + gen_weight * NLL(A)
//! ```
//!
//! The NLL gradient is estimated contrastively as
//! `mean dE/dθ over A - mean dE/dθ over SGLD negatives`. The reported scalar
//! replaces the intractable NLL with the energy gap, so it is a surrogate.
//!
//! Augmentation only ever touches labeled batches for the cross-entropy
//! term; pool batches feeding the likelihood term are used as stored.
//! With `gen_weight = 0` no chain is run and the update is exactly the
//! softmax-classifier update.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageShape, PoolPartition};
use crate::model::{energy_grad_logits, log_density_unnorm, posterior, ModelState};
use crate::sgld::{fit_informative_init, run_chain, GaussianMixtureInit, SgldConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub batch_labeled: usize,
    pub batch_all: usize,
    pub epochs_per_round: usize,
    pub warm_start: bool,
    /// Weight of the likelihood term. Zero gives the softmax baseline.
    pub gen_weight: f64,
    pub augmentation: bool,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            momentum: 0.0,
            batch_labeled: 64,
            batch_all: 64,
            epochs_per_round: 10,
            warm_start: true,
            gen_weight: 1.0,
            augmentation: false,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.batch_labeled < 1 || self.batch_all < 1 {
            return Err(Error::validation("batch sizes must be at least 1"));
        }
        if !(self.gen_weight >= 0.0) {
            return Err(Error::validation("gen_weight must be non-negative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::validation("grad_clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrad {
    /// `ce + gen_weight * energy_gap`.
    pub loss: f64,
    pub ce: f64,
    /// Mean energy of positives minus mean energy of negatives.
    pub energy_gap: f64,
    pub energy_pos: f64,
    pub energy_neg: f64,
    pub grad: Vec<f64>,
}

fn per_sample<F>(state: &ModelState, xs: &[&[f64]], f: F) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: Fn(&[f64], usize) -> (f64, Vec<f64>) + Sync,
{
    xs.par_iter()
        .enumerate()
        .map(|(i, x)| {
            let trace = state.forward(x)?;
            let (value, grad_logits) = f(trace.logits(), i);
            let mut g = vec![0.0; state.params.len()];
            state.accumulate_param_grad(&trace, &grad_logits, &mut g);
            Ok((value, g))
        })
        .collect()
}

fn add_scaled(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += scale * b;
    }
}

/// Loss surrogate and parameter gradient of the joint objective for one
/// step. `negatives` are treated as constants.
pub fn joint_loss_and_grads(
    state: &ModelState,
    labeled_x: &[&[f64]],
    labeled_y: &[usize],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    gen_weight: f64,
) -> Result<JointGrad> {
    if labeled_x.len() != labeled_y.len() {
        return Err(Error::validation("one label per labeled sample is required"));
    }
    let mut grad = vec![0.0; state.params.len()];
    let mut ce = 0.0;

    if !labeled_x.is_empty() {
        let k = state.classes();
        if let Some(y) = labeled_y.iter().find(|&&y| y >= k) {
            return Err(Error::validation(format!("label {} outside 1..={k}", y + 1)));
        }
        let rows = per_sample(state, labeled_x, |logits, i| {
            let y = labeled_y[i];
            let mut g = posterior(logits);
            g[y] -= 1.0;
            (log_density_unnorm(logits) - logits[y], g)
        })?;
        let scale = 1.0 / labeled_x.len() as f64;
        for (loss, g) in &rows {
            ce += loss;
            add_scaled(&mut grad, g, scale);
        }
        ce *= scale;
    }

    let (mut energy_pos, mut energy_neg) = (0.0, 0.0);
    if gen_weight > 0.0 {
        if positives.is_empty() {
            return Err(Error::validation("likelihood term needs a non-empty pool batch"));
        }
        if negatives.is_empty() {
            return Err(Error::validation("likelihood term needs negative samples"));
        }
        let energy = |logits: &[f64], _| (-log_density_unnorm(logits), energy_grad_logits(logits));
        let pos = per_sample(state, positives, energy)?;
        let neg = per_sample(state, negatives, energy)?;
        let sp = gen_weight / positives.len() as f64;
        let sn = gen_weight / negatives.len() as f64;
        for (e, g) in &pos {
            energy_pos += e;
            add_scaled(&mut grad, g, sp);
        }
        for (e, g) in &neg {
            energy_neg += e;
            add_scaled(&mut grad, g, -sn);
        }
        energy_pos /= positives.len() as f64;
        energy_neg /= negatives.len() as f64;
    }

    let energy_gap = energy_pos - energy_neg;
    let loss = ce + gen_weight * energy_gap;
    if !loss.is_finite() {
        return Err(Error::numeric("joint loss is not finite"));
    }
    Ok(JointGrad {
        loss,
        ce,
        energy_gap,
        energy_pos,
        energy_neg,
        grad,
    })
}

#[derive(Debug, Clone)]
enum Optimizer {
    Sgd { lr: f64, momentum: f64, velocity: Vec<f64> },
    Adam { lr: f64, t: i32, m: Vec<f64>, v: Vec<f64> },
}

impl Optimizer {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: cfg.learning_rate,
                momentum: cfg.momentum,
                velocity: vec![0.0; n],
            },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: cfg.learning_rate,
                t: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr, momentum, velocity } => {
                if *momentum == 0.0 {
                    for (p, g) in params.iter_mut().zip(grad) {
                        *p -= *lr * g;
                    }
                } else {
                    for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                        *v = *momentum * *v + g;
                        *p -= *lr * *v;
                    }
                }
            }
            Optimizer::Adam { lr, t, m, v } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (((p, g), mi), vi) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = B1 * *mi + (1.0 - B1) * g;
                    *vi = B2 * *vi + (1.0 - B2) * g * g;
                    *p -= *lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Rescales `grad` to norm `max_norm` if it is longer; returns the norm
/// before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub energy_gap: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub ce: f64,
    pub energy_gap: f64,
    pub grad_norm: f64,
    /// Mean energy of pool samples and of SGLD negatives.
    pub energy_pos: f64,
    pub energy_neg: f64,
    pub steps: usize,
    /// Samples augmented on the classification path.
    pub augmented_classification: usize,
    /// Samples augmented on the likelihood path. Always zero.
    pub augmented_likelihood: usize,
}

/// Random 4-pixel crop-pad (padding with -1) plus horizontal flip.
pub fn augment_image<R: Rng + ?Sized>(x: &[f64], shape: ImageShape, rng: &mut R) -> Vec<f64> {
    const PAD: i64 = 4;
    let dy = rng.random_range(-PAD..=PAD) as isize;
    let dx = rng.random_range(-PAD..=PAD) as isize;
    let flip = rng.random_bool(0.5);
    let (h, w, c) = (shape.height as isize, shape.width as isize, shape.channels);
    let mut out = vec![-1.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let sy = y + dy;
            let sx0 = xx + dx;
            let sx = if flip { w - 1 - sx0 } else { sx0 };
            if sy < 0 || sy >= h || sx0 < 0 || sx0 >= w {
                continue;
            }
            let src = ((sy * w + sx) as usize) * c;
            let dst = ((y * w + xx) as usize) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

#[derive(Default)]
struct AugmentCounter {
    classification: usize,
    likelihood: usize,
}

#[derive(Clone, Copy)]
enum BatchPath {
    Classification,
    Likelihood,
}

fn materialise<R: Rng + ?Sized>(
    dataset: &Dataset,
    ids: &[usize],
    augment: bool,
    path: BatchPath,
    counter: &mut AugmentCounter,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            let x = dataset.sample(id);
            match (augment, dataset.image) {
                (true, Some(shape)) => {
                    match path {
                        BatchPath::Classification => counter.classification += 1,
                        BatchPath::Likelihood => counter.likelihood += 1,
                    }
                    augment_image(x, shape, rng)
                }
                _ => x.to_vec(),
            }
        })
        .collect()
}

/// Draws the labeled minibatch. Small pools are used whole; pools under
/// `10 * K` samples are drawn class-round-robin so every class appears.
fn labeled_batch<R: Rng + ?Sized>(
    labeled: &[(usize, usize)],
    batch: usize,
    classes: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if labeled.len() <= batch {
        let mut all = labeled.to_vec();
        all.shuffle(rng);
        return all;
    }
    if labeled.len() < 10 * classes {
        let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); classes];
        for &(id, y) in labeled {
            by_class[y].push((id, y));
        }
        for group in &mut by_class {
            group.shuffle(rng);
        }
        let mut out = Vec::with_capacity(batch);
        let mut depth = 0;
        while out.len() < batch {
            for group in &by_class {
                if let Some(&item) = group.get(depth) {
                    if out.len() < batch {
                        out.push(item);
                    }
                }
            }
            depth += 1;
        }
        return out;
    }
    index::sample(rng, labeled.len(), batch)
        .into_iter()
        .map(|i| labeled[i])
        .collect()
}

/// Mixture fitted to the labeled pool per class, or to all pool samples
/// when nothing is labeled yet.
pub fn informative_init_for(dataset: &Dataset, pools: &PoolPartition) -> Result<GaussianMixtureInit> {
    if pools.labeled.is_empty() {
        let ids = pools.training_ids();
        let feats: Vec<&[f64]> = ids.iter().map(|&i| dataset.sample(i)).collect();
        fit_informative_init(&feats, None)
    } else {
        let feats: Vec<&[f64]> = pools.labeled.keys().map(|&i| dataset.sample(i)).collect();
        let labels: Vec<usize> = pools.labeled.values().copied().collect();
        fit_informative_init(&feats, Some(&labels))
    }
}

/// Trains for `epochs_per_round` passes over `D_l ∪ D_u`.
///
/// On a non-finite loss the round is abandoned with a numeric error and the
/// caller keeps its previous state.
pub fn train_round<R: Rng>(
    state: &ModelState,
    pools: &PoolPartition,
    dataset: &Dataset,
    cfg: &TrainConfig,
    sgld: &SgldConfig,
    rng: &mut R,
) -> Result<(ModelState, RoundMetrics)> {
    cfg.validate()?;
    let mut state = if cfg.warm_start {
        state.clone()
    } else {
        ModelState::init(state.arch.clone(), rng.next_u64())
    };
    let mut metrics = RoundMetrics::default();
    let all_ids = pools.training_ids();
    if cfg.epochs_per_round == 0 || all_ids.is_empty() {
        return Ok((state, metrics));
    }
    let use_likelihood = cfg.gen_weight > 0.0;
    if use_likelihood {
        sgld.validate()?;
    }
    let init = if use_likelihood {
        Some(informative_init_for(dataset, pools)?)
    } else {
        None
    };
    let labeled: Vec<(usize, usize)> = pools.labeled.iter().map(|(&i, &y)| (i, y)).collect();
    let mut optimizer = Optimizer::new(cfg, state.params.len());
    let mut counter = AugmentCounter::default();
    let steps_per_epoch = all_ids.len().div_ceil(cfg.batch_all);
    let mut order = all_ids;
    let mut totals = (0.0, 0.0, 0.0, 0.0, 0.0);

    for epoch in 0..cfg.epochs_per_round {
        order.shuffle(rng);
        let mut epoch_sums = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_all).enumerate() {
            let lab = if labeled.is_empty() {
                Vec::new()
            } else {
                labeled_batch(&labeled, cfg.batch_labeled, dataset.num_classes, rng)
            };
            let lab_ids: Vec<usize> = lab.iter().map(|&(i, _)| i).collect();
            let lab_y: Vec<usize> = lab.iter().map(|&(_, y)| y).collect();
            let lab_x = materialise(dataset, &lab_ids, cfg.augmentation, BatchPath::Classification, &mut counter, rng);
            let lab_refs: Vec<&[f64]> = lab_x.iter().map(Vec::as_slice).collect();

            let (pos_x, neg_x) = match &init {
                Some(init) => {
                    let pos = materialise(dataset, chunk, false, BatchPath::Likelihood, &mut counter, rng);
                    let neg = run_chain(&state, sgld, init, chunk.len(), rng)?;
                    (pos, neg)
                }
                None => (Vec::new(), Vec::new()),
            };
            let pos_refs: Vec<&[f64]> = pos_x.iter().map(Vec::as_slice).collect();
            let neg_refs: Vec<&[f64]> = neg_x.iter().map(Vec::as_slice).collect();

            if lab_refs.is_empty() && !use_likelihood {
                continue;
            }
            let mut jg = joint_loss_and_grads(&state, &lab_refs, &lab_y, &pos_refs, &neg_refs, cfg.gen_weight)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::numeric(format!("{msg} (epoch {epoch}, step {step})")),
                    other => other,
                })?;
            let norm = clip_grad_norm(&mut jg.grad, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient (epoch {epoch}, step {step})")));
            }
            optimizer.step(&mut state.params, &jg.grad);
            if state.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::numeric(format!("parameters diverged (epoch {epoch}, step {step})")));
            }
            epoch_sums.0 += jg.ce;
            epoch_sums.1 += jg.energy_gap;
            epoch_sums.2 += norm;
            totals.3 += jg.energy_pos;
            totals.4 += jg.energy_neg;
            metrics.steps += 1;
        }
        let n = steps_per_epoch as f64;
        let row = EpochMetrics {
            epoch,
            ce: epoch_sums.0 / n,
            energy_gap: epoch_sums.1 / n,
            grad_norm: epoch_sums.2 / n,
        };
        totals.0 += row.ce;
        totals.1 += row.energy_gap;
        totals.2 += row.grad_norm;
        metrics.epochs.push(row);
    }

    let epochs = cfg.epochs_per_round as f64;
    metrics.ce = totals.0 / epochs;
    metrics.energy_gap = totals.1 / epochs;
    metrics.grad_norm = totals.2 / epochs;
    if metrics.steps > 0 {
        metrics.energy_pos = totals.3 / metrics.steps as f64;
        metrics.energy_neg = totals.4 / metrics.steps as f64;
    }
    metrics.augmented_classification = counter.classification;
    metrics.augmented_likelihood = counter.likelihood;
    Ok((state, metrics))
}

/// Softmax-only training on a fixed labeled set: the joint trainer with the
/// likelihood term switched off and no unlabeled pool.
pub fn train_baseline<R: Rng>(
    state: &ModelState,
    labeled: &BTreeMap<usize, usize>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ModelState, RoundMetrics)> {
    let pools = PoolPartition {
        labeled: labeled.clone(),
        unlabeled: BTreeSet::new(),
        eval: Vec::new(),
        seed: 0,
    };
    let cfg = TrainConfig {
        gen_weight: 0.0,
        ..cfg.clone()
    };
    train_round(state, &pools, dataset, &cfg, &SgldConfig::default(), rng)
}
