//! Gaussian randomized smoothing: noise sampling, smoothed predictions and
//! Monte Carlo certification.
//!
//! Noisy inputs `x + delta` are never clipped to the data range.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{argmax, softmax, Network, SoftLabel};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::stats::{certified_radius, clopper_pearson_lower, std_normal_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    /// Samples used to pick the top class.
    pub n0: u64,
    /// Samples used to bound its probability.
    pub n: u64,
    pub alpha_cert: f64,
}

impl Default for SmoothingConfig {
    /// Desk-scale defaults: n = 1000 rather than 100,000, so radii are capped
    /// at [`SmoothingConfig::max_radius`].
    fn default() -> Self {
        Self {
            sigma: 0.5,
            n0: 100,
            n: 1000,
            alpha_cert: 0.001,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if self.n0 == 0 || self.n < self.n0 {
            return Err(Error::InvalidConfig(format!(
                "need n >= n0 >= 1, got n0={} n={}",
                self.n0, self.n
            )));
        }
        if !(self.alpha_cert > 0.0 && self.alpha_cert < 1.0) {
            return Err(Error::Domain {
                name: "alpha_cert",
                value: self.alpha_cert,
                domain: "(0, 1)",
            });
        }
        Ok(())
    }

    /// Largest radius CERTIFY can return with `n` samples (all of them on the
    /// top class): `sigma * Phi^-1(alpha^(1/n))`.
    pub fn max_radius(&self) -> f64 {
        let p = self.alpha_cert.powf(1.0 / self.n as f64);
        self.sigma * std_normal_quantile(p).unwrap_or(f64::INFINITY)
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            name: "sigma",
            value: sigma,
            domain: "(0, inf)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CertifyOutcome {
    Certified {
        predicted_class: usize,
        radius: f64,
        p_lower: f64,
    },
    Abstain,
}

impl CertifyOutcome {
    pub fn predicted(&self) -> Option<usize> {
        match self {
            CertifyOutcome::Certified { predicted_class, .. } => Some(*predicted_class),
            CertifyOutcome::Abstain => None,
        }
    }

    /// Radius, with abstentions counted as 0.
    pub fn radius(&self) -> f64 {
        match self {
            CertifyOutcome::Certified { radius, .. } => *radius,
            CertifyOutcome::Abstain => 0.0,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, CertifyOutcome::Abstain)
    }
}

/// `m` i.i.d. draws of `N(0, sigma^2 I)` in `R^d`, reproducible from `stream`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch<S> {
    sigma: f64,
    dim: usize,
    deltas: Vec<S>,
    stream: Stream,
}

impl<S: Scalar> NoiseBatch<S> {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.deltas.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn delta(&self, i: usize) -> &[S] {
        &self.deltas[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[S]> {
        self.deltas.chunks_exact(self.dim)
    }

    /// `x + delta_i`
    pub fn perturb(&self, x: &[S], i: usize) -> Vec<S> {
        x.iter().zip(self.delta(i)).map(|(a, b)| *a + *b).collect()
    }

    /// Same draws in a different order; provenance is kept.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidConfig("not a permutation".into()));
            }
        }
        check_dim("permutation length", self.len(), order.len())?;
        let deltas = order.iter().flat_map(|&i| self.delta(i).iter().copied()).collect();
        Ok(Self { deltas, ..*self })
    }
}

pub fn sample_noise<S: Scalar>(sigma: f64, d: usize, m: usize, stream: &Stream) -> Result<NoiseBatch<S>> {
    check_sigma(sigma)?;
    if m == 0 || d == 0 {
        return Err(Error::InvalidConfig("noise batch needs m >= 1 and d >= 1".into()));
    }
    let mut rng = stream.rng();
    let deltas = (0..m * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            S::of(sigma * z)
        })
        .collect();
    Ok(NoiseBatch {
        sigma,
        dim: d,
        deltas,
        stream: *stream,
    })
}

/// Monte Carlo estimate of `E_delta[softmax(F(x + delta))]` over the batch.
pub fn soft_smoothed_predict<S: Scalar>(net: &Network<S>, x: &[S], noise: &NoiseBatch<S>) -> Result<SoftLabel<S>> {
    check_dim("smoothed input", net.input_dim(), x.len())?;
    check_dim("noise dimension", net.input_dim(), noise.dim())?;
    let c = net.class_count();
    let mut acc = vec![S::zero(); c];
    for i in 0..noise.len() {
        let p = softmax(&net.logits(&noise.perturb(x, i)));
        for (a, q) in acc.iter_mut().zip(p.probs()) {
            *a += *q;
        }
    }
    let m = S::of(noise.len() as f64);
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(SoftLabel::from_raw(acc))
}

/// Counts of `f(x + delta)` over `count` fresh noise draws. Ties inside one
/// forward pass go to the lowest class index.
pub fn hard_class_counts<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    count: u64,
    sigma: f64,
    stream: &Stream,
) -> Result<Vec<u64>> {
    check_dim("smoothed input", net.input_dim(), x.len())?;
    check_sigma(sigma)?;
    if count == 0 {
        return Err(Error::InvalidConfig("count must be >= 1".into()));
    }
    let mut rng = stream.rng();
    let mut counts = vec![0u64; net.class_count()];
    let mut noisy = vec![S::zero(); x.len()];
    for _ in 0..count {
        for (n, xi) in noisy.iter_mut().zip(x) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *n = *xi + S::of(sigma * z);
        }
        counts[argmax(&net.logits(&noisy))] += 1;
    }
    Ok(counts)
}

/// CERTIFY: pick the top class from `n0` draws, lower-bound its probability
/// from `n` independent draws, and certify `sigma * Phi^-1(p_lower)` when the
/// bound exceeds 1/2.
pub fn certify<S: Scalar>(net: &Network<S>, x: &[S], cfg: &SmoothingConfig, stream: &Stream) -> Result<CertifyOutcome> {
    cfg.validate()?;
    let selection = hard_class_counts(net, x, cfg.n0, cfg.sigma, &stream.child("select", 0))?;
    let top = argmax(&selection);
    let estimation = hard_class_counts(net, x, cfg.n, cfg.sigma, &stream.child("estimate", 0))?;
    let p_lower = clopper_pearson_lower(estimation[top], cfg.n, cfg.alpha_cert)?;
    match certified_radius(p_lower, cfg.sigma) {
        Ok(radius) => Ok(CertifyOutcome::Certified {
            predicted_class: top,
            radius,
            p_lower,
        }),
        Err(Error::NotCertifiable { .. }) => Ok(CertifyOutcome::Abstain),
        Err(e) => Err(e),
    }
}
