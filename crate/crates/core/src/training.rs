//! Barrier-penalised training of the denoiser with Adam.
//!
//! The loss for one clean/noisy pair is
//!
//! ```text
//! L(θ) = ‖D_θ(noisy) − clean‖² + α Σ_{n ≥ 2} Σ_ij max(0, −W_n[i, j])²
//! ```
//!
//! The barrier covers the weights of layers `n ≥ 2` only. After training,
//! [`clamp_negative_weights`] zeroes whatever negative entries remain and
//! marks those layers certified.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::{ParamGrads, Tape};
use crate::denoiser::Denoiser;
use crate::error::{check_dim, Error, Result};
use crate::{ActivationSpec, Layer, Matrix, Network, Vector};

/// Learning rate `rate` for epochs `first..=last` (1-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSegment {
    pub first: usize,
    pub last: usize,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha_barrier: f64,
    pub schedule: Vec<LrSegment>,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Calls the checkpoint hook every this many epochs; 0 disables it.
    pub checkpoint_every: usize,
}

pub const FIRST_PHASE_RATE: f64 = 1e-4;
pub const SECOND_PHASE_RATE: f64 = 2.5e-6;

impl TrainConfig {
    /// Two-phase schedule: 80% of the epochs at `1e-4`, the rest at `2.5e-6`.
    pub fn two_phase_schedule(epochs: usize) -> Vec<LrSegment> {
        if epochs == 0 {
            return Vec::new();
        }
        let split = ((epochs * 4) / 5).max(1);
        let mut out = vec![LrSegment {
            first: 1,
            last: split,
            rate: FIRST_PHASE_RATE,
        }];
        if split < epochs {
            out.push(LrSegment {
                first: split + 1,
                last: epochs,
                rate: SECOND_PHASE_RATE,
            });
        }
        out
    }

    /// Single rate for all epochs.
    pub fn constant_schedule(epochs: usize, rate: f64) -> Vec<LrSegment> {
        if epochs == 0 {
            Vec::new()
        } else {
            vec![LrSegment {
                first: 1,
                last: epochs,
                rate,
            }]
        }
    }

    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            alpha_barrier: 1.0,
            schedule: TrainConfig::two_phase_schedule(epochs),
            epochs,
            batch_size: 16,
            noise_sigma: 0.05,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_barrier.is_finite() && self.alpha_barrier >= 0.0) {
            return Err(Error::Invalid("alpha_barrier must be ≥ 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Invalid("noise_sigma must be ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Invalid("Adam needs β₁, β₂ in [0, 1) and ε > 0".into()));
        }
        let mut next = 1;
        for seg in &self.schedule {
            if !(seg.rate.is_finite() && seg.rate > 0.0) {
                return Err(Error::Invalid(format!("learning rate must be positive, got {}", seg.rate)));
            }
            if seg.first != next || seg.last < seg.first {
                return Err(Error::Invalid(format!(
                    "schedule segments must partition 1..={} in order",
                    self.epochs
                )));
            }
            next = seg.last + 1;
        }
        if next != self.epochs + 1 {
            return Err(Error::Invalid(format!(
                "schedule covers 1..{} but there are {} epochs",
                next, self.epochs
            )));
        }
        Ok(())
    }

    pub fn rate_for(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .find(|s| (s.first..=s.last).contains(&epoch))
            .map(|s| s.rate)
            .expect("validated schedule covers every epoch")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_dim("Adam parameters", self.first_moment.len(), params.len())?;
        check_dim("Adam gradient", self.first_moment.len(), grad.len())?;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            self.second_moment[i] = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    state: &AdamState,
    grad: &[f64],
    params: &[f64],
    lr: f64,
) -> Result<(AdamState, Vec<f64>)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.step(&mut params, grad, lr)?;
    Ok((state, params))
}

/// `α Σ max(0, −w)²` over the weights of layers `n ≥ 2`.
pub fn barrier(net: &Network, alpha: f64) -> f64 {
    alpha
        * constrained_weights(net)
            .map(|w| w.min(0.0).powi(2))
            .sum::<f64>()
}

/// `Σ max(0, −w)` over the weights of layers `n ≥ 2`.
pub fn negative_weight_mass(net: &Network) -> f64 {
    constrained_weights(net).map(|w| (-w).max(0.0)).sum()
}

/// Negative mass divided by total absolute mass, over layers `n ≥ 2`.
pub fn negative_weight_fraction(net: &Network) -> f64 {
    let total: f64 = constrained_weights(net).map(f64::abs).sum();
    if total == 0.0 {
        0.0
    } else {
        negative_weight_mass(net) / total
    }
}

fn constrained_weights(net: &Network) -> impl Iterator<Item = f64> + '_ {
    net.layers()
        .iter()
        .filter(|l| l.nonneg_required())
        .flat_map(|l| l.weight().iter().copied())
}

fn check_pair(net: &Network, clean: &Vector, noisy: &Vector, alpha: f64) -> Result<()> {
    check_dim("clean sample", net.input_dim(), clean.len())?;
    check_dim("noisy sample", net.input_dim(), noisy.len())?;
    if !(alpha >= 0.0) {
        return Err(Error::Invalid(format!("alpha must be ≥ 0, got {alpha}")));
    }
    Ok(())
}

pub fn loss_eval(net: &Network, clean: &Vector, noisy: &Vector, alpha: f64) -> Result<f64> {
    check_pair(net, clean, noisy, alpha)?;
    let residual = net.apply(noisy)? - clean;
    Ok(residual.norm_squared() + barrier(net, alpha))
}

/// Gradient of the data term only, with its value.
fn data_gradient(net: &Network, clean: &Vector, noisy: &Vector) -> (f64, ParamGrads) {
    let mut tape = Tape::new(net);
    let (out, _) = tape.record_denoiser(noisy.clone());
    let residual = tape.value(out) - clean;
    let adj = tape.backward(out, 2.0 * &residual, true);
    (residual.norm_squared(), adj.params.expect("requested"))
}

fn add_barrier_gradient(net: &Network, alpha: f64, grads: &mut ParamGrads) {
    if alpha == 0.0 {
        return;
    }
    for (layer, g) in net.layers().iter().zip(grads.weights.iter_mut()) {
        if layer.nonneg_required() {
            g.zip_apply(layer.weight(), |gi, w| *gi += 2.0 * alpha * w.min(0.0));
        }
    }
}

/// Exact gradient of [`loss_eval`], in [`Network::params`] order.
pub fn loss_gradient(net: &Network, clean: &Vector, noisy: &Vector, alpha: f64) -> Result<Vec<f64>> {
    check_pair(net, clean, noisy, alpha)?;
    let (_, mut grads) = data_gradient(net, clean, noisy);
    add_barrier_gradient(net, alpha, &mut grads);
    Ok(grads.flatten())
}

/// Zeroes negative weights of layers `n ≥ 2` and marks those layers
/// certified.
pub fn clamp_negative_weights(mut net: Network) -> Network {
    for layer in net.layers_mut() {
        if layer.nonneg_required() {
            if layer.weight().iter().any(|&w| w < 0.0) {
                layer.weight_mut().apply(|w| *w = w.max(0.0));
            }
            layer.set_certified(true);
        }
    }
    net
}

/// Two-layer image denoiser that starts close to a scaled identity.
///
/// Layer 1 (`hidden × d0`, sReLU with `γ = 1`) holds `I_{d0}` in its first
/// `d0` rows and small signed random rows below. Layer 2 (`top × hidden`,
/// sReLU with `γ = 0.1`) sums hidden unit `h` into output `h mod top` with
/// weight `0.2`. For inputs in `[0, 1]` every layer-1 unit starts in its
/// quadratic piece, so the initial map is affine and well conditioned.
pub fn warm_start(d0: usize, hidden: usize, top: usize, seed: u64) -> Result<Network> {
    if hidden < d0 || top == 0 || top > hidden {
        return Err(Error::Invalid(format!(
            "warm start needs d0 ≤ hidden and 1 ≤ top ≤ hidden, got {d0}, {hidden}, {top}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 0.3 / (d0 as f64).sqrt();
    let w1 = Matrix::from_fn(hidden, d0, |i, j| {
        if i < d0 {
            f64::from(u8::from(i == j))
        } else {
            rng.random_range(-s..=s)
        }
    });
    let w2 = Matrix::from_fn(top, hidden, |o, h| if h % top == o { 0.2 } else { 0.0 });
    Network::new(
        vec![
            Layer::new(w1, Vector::zeros(hidden), ActivationSpec::srelu(1.0)?)?,
            Layer::new(w2, Vector::zeros(top), ActivationSpec::srelu(0.1)?)?,
        ],
        None,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of (mean data term + barrier).
    pub mean_loss: f64,
    pub barrier: f64,
    pub negative_mass: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,barrier,negative_mass\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e},{:e}", r.epoch, r.mean_loss, r.barrier, r.negative_mass);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub log: TrainingLog,
}

/// [`train_with_checkpoints`] without a checkpoint hook.
pub fn train(config: &TrainConfig, dataset: &[Vector], net: Network) -> Result<TrainOutcome> {
    train_with_checkpoints(config, dataset, net, |_, _| Ok(()))
}

/// Minibatch Adam on the barrier loss.
///
/// Each epoch shuffles the dataset and draws fresh noise for every sample.
/// Per-sample gradients run in parallel and are summed in sample order, so
/// the result is bitwise reproducible for a given seed regardless of thread
/// count. `checkpoint(epoch, net)` runs every `config.checkpoint_every`
/// epochs.
pub fn train_with_checkpoints(
    config: &TrainConfig,
    dataset: &[Vector],
    mut net: Network,
    mut checkpoint: impl FnMut(usize, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    for x in dataset {
        check_dim("training image", net.input_dim(), x.len())?;
    }
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome { net, log });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = (config.noise_sigma > 0.0).then(|| Normal::new(0.0, config.noise_sigma).expect("σ > 0"));
    let mut params = net.params();
    let mut adam = AdamState::new(params.len(), config.adam);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=config.epochs {
        let lr = config.rate_for(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let noisy: Vec<Vector> = batch
                .iter()
                .map(|&i| {
                    let x = &dataset[i];
                    match &noise {
                        Some(n) => x.map(|v| v + n.sample(&mut rng)),
                        None => x.clone(),
                    }
                })
                .collect();
            let per_sample: Vec<(f64, ParamGrads)> = batch
                .par_iter()
                .zip(noisy.par_iter())
                .map(|(&i, y)| data_gradient(&net, &dataset[i], y))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut data = 0.0;
            let mut grads = ParamGrads::zeros(&net);
            for (l, g) in &per_sample {
                data += l;
                grads.add_assign(g);
            }
            let loss = data * scale + barrier(&net, config.alpha_barrier);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch.to_vec(),
                });
            }
            grads.weights.iter_mut().for_each(|w| *w *= scale);
            grads.biases.iter_mut().for_each(|b| *b *= scale);
            add_barrier_gradient(&net, config.alpha_barrier, &mut grads);
            adam.step(&mut params, &grads.flatten(), lr)?;
            net.set_params(&params)?;
            loss_sum += loss;
            batches += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            barrier: barrier(&net, config.alpha_barrier),
            negative_mass: negative_weight_mass(&net),
        });
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            checkpoint(epoch, &net)?;
        }
    }
    Ok(TrainOutcome { net, log })
}
