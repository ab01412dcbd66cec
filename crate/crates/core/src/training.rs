//! Losses and the minibatch training loop for Gaussian augmentation,
//! SmoothAdv and SmoothMix.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{l2_project, smoothadv_pgd, smoothmix_attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::{accumulate_ce_grad, cross_entropy_unchecked, Gradients, Network, OptimizerState, SoftLabel};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::smoothing::{check_sigma, sample_noise, soft_smoothed_predict, NoiseBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gaussian,
    #[serde(rename = "smoothadv")]
    SmoothAdv,
    #[serde(rename = "smoothmix")]
    SmoothMix,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gaussian => "gaussian",
            Method::SmoothAdv => "smoothadv",
            Method::SmoothMix => "smoothmix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothMixConfig {
    pub sigma: f64,
    pub eta: f64,
    pub attack: AttackConfig,
    pub m: usize,
    /// Replace the clean anchor by the first attack iterate.
    pub use_one_step: bool,
    /// Projects the one-step anchor onto this l2 ball around `x`.
    pub one_step_cap: Option<f64>,
}

impl SmoothMixConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Domain {
                name: "eta",
                value: self.eta,
                domain: "(0, inf)",
            });
        }
        check_m(self.m)?;
        if let Some(cap) = self.one_step_cap {
            if !(cap > 0.0) {
                return Err(Error::Domain {
                    name: "one_step_cap",
                    value: cap,
                    domain: "(0, inf)",
                });
            }
        }
        self.attack.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothAdvConfig {
    pub sigma: f64,
    pub m: usize,
    pub epsilon: f64,
    pub steps: usize,
    /// Epochs over which epsilon ramps up linearly.
    pub warmup_epochs: usize,
}

impl SmoothAdvConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        check_m(self.m)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Domain {
                name: "epsilon",
                value: self.epsilon,
                domain: "(0, inf)",
            });
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("smoothadv needs attack_steps >= 1".into()));
        }
        Ok(())
    }

    /// `epsilon * (e + 1) / warmup` before the warm-up boundary, `epsilon` after.
    pub fn epsilon_at(&self, epoch: usize) -> f64 {
        if epoch + 1 >= self.warmup_epochs {
            self.epsilon
        } else {
            self.epsilon * (epoch + 1) as f64 / self.warmup_epochs as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    Gaussian {
        sigma: f64,
        m: usize,
    },
    #[serde(rename = "smoothadv")]
    SmoothAdv(SmoothAdvConfig),
    #[serde(rename = "smoothmix")]
    SmoothMix(SmoothMixConfig),
}

impl MethodConfig {
    pub fn method(&self) -> Method {
        match self {
            MethodConfig::Gaussian { .. } => Method::Gaussian,
            MethodConfig::SmoothAdv(_) => Method::SmoothAdv,
            MethodConfig::SmoothMix(_) => Method::SmoothMix,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            MethodConfig::Gaussian { sigma, .. } => *sigma,
            MethodConfig::SmoothAdv(c) => c.sigma,
            MethodConfig::SmoothMix(c) => c.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::Gaussian { sigma, m } => {
                check_sigma(*sigma)?;
                check_m(*m)
            }
            MethodConfig::SmoothAdv(c) => c.validate(),
            MethodConfig::SmoothMix(c) => c.validate(),
        }
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be >= 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            lr_milestones: vec![10, 20],
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("lr_milestones must be strictly increasing".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(Error::Domain {
                name: "lr_gamma",
                value: self.lr_gamma,
                domain: "(0, inf)",
            });
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain {
                name: "lr",
                value: self.lr,
                domain: "[0, inf)",
            });
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_gamma.powi(decays as i32)
    }
}

/// `(1/m) sum_i CE(F(x + delta_i), onehot(y))`.
pub fn gaussian_loss<S: Scalar>(net: &Network<S>, x: &[S], y: usize, noise: &NoiseBatch<S>) -> Result<S> {
    let target = SoftLabel::one_hot(y, net.class_count())?;
    noisy_ce(net, x, &target, noise)
}

fn noisy_ce<S: Scalar>(net: &Network<S>, x: &[S], target: &SoftLabel<S>, noise: &NoiseBatch<S>) -> Result<S> {
    check_dim("loss input", net.input_dim(), x.len())?;
    check_dim("noise dimension", net.input_dim(), noise.dim())?;
    check_dim("target", net.class_count(), target.len())?;
    let total: S = (0..noise.len())
        .map(|i| cross_entropy_unchecked(&net.logits(&noise.perturb(x, i)), target.probs()))
        .sum();
    Ok(total / S::of(noise.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixPair<S> {
    pub x_mix: Vec<S>,
    pub y_mix: SoftLabel<S>,
    pub lambda: f64,
}

/// `x_mix = (1 - lambda) x_base + lambda x_adv`,
/// `y_mix = (1 - lambda) fhat_base + lambda / C`.
pub fn make_mix_pair<S: Scalar>(
    x_base: &[S],
    fhat_base: &SoftLabel<S>,
    x_adv: &[S],
    lambda: f64,
    classes: usize,
) -> Result<MixPair<S>> {
    if !(0.0..=0.5).contains(&lambda) {
        return Err(Error::Domain {
            name: "lambda",
            value: lambda,
            domain: "[0, 1/2]",
        });
    }
    check_dim("adversarial point", x_base.len(), x_adv.len())?;
    check_dim("smoothed prediction", classes, fhat_base.len())?;
    let l = S::of(lambda);
    let keep = S::one() - l;
    let x_mix = x_base.iter().zip(x_adv).map(|(a, b)| keep * *a + l * *b).collect();
    let u = l / S::of(classes as f64);
    let y_mix = fhat_base.probs().iter().map(|p| keep * *p + u).collect();
    Ok(MixPair {
        x_mix,
        y_mix: SoftLabel::from_raw(y_mix),
        lambda,
    })
}

/// `(1/m) sum_i CE(F(x_mix + delta_i), y_mix)` with `y_mix` held fixed.
pub fn smoothmix_loss<S: Scalar>(net: &Network<S>, pair: &MixPair<S>, noise: &NoiseBatch<S>) -> Result<S> {
    noisy_ce(net, &pair.x_mix, &pair.y_mix, noise)
}

/// Everything needed to recompute one SmoothMix loss by hand.
#[derive(Debug, Clone)]
pub struct SmoothMixDiagnostics<S> {
    pub lambda: f64,
    /// `J(x~(t))` for `t = 0..T-1`.
    pub objective: Vec<S>,
    pub loss_nat: S,
    pub loss_mix: S,
    /// Point used by the natural term and as the mixup base.
    pub anchor: Vec<S>,
    pub x_adv: Vec<S>,
    /// Soft-smoothed prediction at the anchor (the frozen mixup target).
    pub fhat_anchor: SoftLabel<S>,
    pub pair: MixPair<S>,
    pub noise: NoiseBatch<S>,
}

fn smoothmix_parts<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    y: usize,
    cfg: &SmoothMixConfig,
    stream: &Stream,
) -> Result<SmoothMixDiagnostics<S>> {
    cfg.validate()?;
    check_dim("training input", net.input_dim(), x.len())?;
    let noise = sample_noise::<S>(cfg.sigma, x.len(), cfg.m, &stream.child("noise", 0))?;
    let lambda: f64 = stream.child("lambda", 0).rng().random_range(0.0..=0.5);
    let traj = smoothmix_attack(net, x, y, &noise, &cfg.attack)?;
    let x_adv = traj.last().to_vec();
    let (anchor, fhat_anchor) = if cfg.use_one_step && traj.steps() >= 1 {
        let mut a = traj.points[1].clone();
        if let Some(cap) = cfg.one_step_cap {
            a = l2_project(&a, x, cap)?;
        }
        let f = soft_smoothed_predict(net, &a, &noise)?;
        (a, f)
    } else {
        (x.to_vec(), traj.fhat_at_start.clone())
    };
    let objective = traj.objective.clone();
    let pair = make_mix_pair(&anchor, &fhat_anchor, &x_adv, lambda, net.class_count())?;
    Ok(SmoothMixDiagnostics {
        lambda,
        objective,
        loss_nat: S::zero(),
        loss_mix: S::zero(),
        anchor,
        x_adv,
        fhat_anchor,
        pair,
        noise,
    })
}

/// One SmoothMix example end to end: noise and `lambda` from `stream`, the
/// attack, the mixup pair and `L = L_nat + eta * L_mix`.
pub fn smoothmix_batch_loss<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    y: usize,
    cfg: &SmoothMixConfig,
    stream: &Stream,
) -> Result<(S, SmoothMixDiagnostics<S>)> {
    let mut d = smoothmix_parts(net, x, y, cfg, stream)?;
    d.loss_nat = gaussian_loss(net, &d.anchor, y, &d.noise)?;
    d.loss_mix = smoothmix_loss(net, &d.pair, &d.noise)?;
    Ok((d.loss_nat + S::of(cfg.eta) * d.loss_mix, d))
}

/// Per-example loss terms reported by [`example_gradient`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub nat: f64,
    pub mix: f64,
}

/// Parameter gradient of one example's loss under `method`, scaled by
/// `weight` and added into `grads`. `epoch` only matters for the SmoothAdv
/// warm-up.
pub fn example_gradient<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    y: usize,
    method: &MethodConfig,
    epoch: usize,
    stream: &Stream,
    weight: S,
    grads: &mut Gradients<S>,
) -> Result<LossTerms> {
    let c = net.class_count();
    let onehot = SoftLabel::<S>::one_hot(y, c)?;
    let sum_ce = |point: &[S], target: &[S], noise: &NoiseBatch<S>, w: S, grads: &mut Gradients<S>| {
        let wm = w / S::of(noise.len() as f64);
        (0..noise.len())
            .map(|i| accumulate_ce_grad(net, &noise.perturb(point, i), target, wm, grads))
            .sum::<S>()
            / S::of(noise.len() as f64)
    };
    match method {
        MethodConfig::Gaussian { sigma, m } => {
            check_dim("training input", net.input_dim(), x.len())?;
            let noise = sample_noise::<S>(*sigma, x.len(), *m, &stream.child("noise", 0))?;
            let nat = sum_ce(x, onehot.probs(), &noise, weight, grads);
            Ok(LossTerms {
                nat: nat.f64(),
                mix: 0.0,
            })
        }
        MethodConfig::SmoothAdv(cfg) => {
            check_dim("training input", net.input_dim(), x.len())?;
            let noise = sample_noise::<S>(cfg.sigma, x.len(), cfg.m, &stream.child("noise", 0))?;
            let eps = cfg.epsilon_at(epoch);
            let step = 2.0 * eps / cfg.steps as f64;
            let x_adv = smoothadv_pgd(net, x, y, &noise, cfg.steps, step, eps)?;
            let nat = sum_ce(&x_adv, onehot.probs(), &noise, weight, grads);
            Ok(LossTerms {
                nat: nat.f64(),
                mix: 0.0,
            })
        }
        MethodConfig::SmoothMix(cfg) => {
            let d = smoothmix_parts(net, x, y, cfg, stream)?;
            let nat = sum_ce(&d.anchor, onehot.probs(), &d.noise, weight, grads);
            let mix = sum_ce(
                &d.pair.x_mix,
                d.pair.y_mix.probs(),
                &d.noise,
                weight * S::of(cfg.eta),
                grads,
            );
            Ok(LossTerms {
                nat: nat.f64(),
                mix: mix.f64(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_nat: f64,
    pub loss_mix: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Stream for example `index` in `epoch`; independent of batching and scheduling.
pub fn example_stream(seed: u64, epoch: usize, index: usize) -> Stream {
    Stream::new(seed, "train", epoch as u64).child("example", index as u64)
}

/// Minibatch SGD with Nesterov momentum over the loss selected by `method`.
///
/// Each epoch visits the data in a seeded permutation. Per-example gradients
/// may be computed in parallel but are summed in batch order, so the result
/// does not depend on the number of worker threads.
pub fn train<S: Scalar>(
    mut net: Network<S>,
    data: &Dataset<S>,
    run: &TrainRunConfig,
    method: &MethodConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Network<S>, Vec<EpochLog>)> {
    run.validate()?;
    method.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    check_dim("dataset dimension", net.input_dim(), data.dim())?;
    check_dim("dataset classes", net.class_count(), data.class_count)?;

    let mut opt = OptimizerState::new(&net, run.lr, run.momentum, run.weight_decay)?;
    let mut log = Vec::with_capacity(run.epochs);
    for epoch in 0..run.epochs {
        let start = Instant::now();
        opt.lr = run.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut Stream::new(run.seed, "shuffle", epoch as u64).rng());
        let (mut nat_sum, mut mix_sum) = (0.0, 0.0);
        for batch in order.chunks(run.batch_size) {
            let weight = S::one() / S::of(batch.len() as f64);
            let per_example: Vec<(Gradients<S>, LossTerms)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Gradients::zeros_like(&net);
                    let terms = example_gradient(
                        &net,
                        &data.inputs[i],
                        data.labels[i],
                        method,
                        epoch,
                        &example_stream(run.seed, epoch, i),
                        weight,
                        &mut g,
                    )?;
                    Ok((g, terms))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(&net);
            for (g, t) in &per_example {
                grads.add_assign(g);
                nat_sum += t.nat;
                mix_sum += t.mix;
            }
            opt.step(&mut net, &grads)?;
        }
        if !net.is_finite() {
            return Err(Error::NonFinite("network parameters after an epoch"));
        }
        let entry = EpochLog {
            epoch,
            loss_nat: nat_sum / data.len() as f64,
            loss_mix: mix_sum / data.len() as f64,
            lr: opt.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((net, log))
}
