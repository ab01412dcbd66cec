//! Monte Carlo check of the `C / d` decay of the worst-case retained
//! probability under input-dependent noise scales.
//!
//! The simulated quantity is the probability of the chi-square-interval event
//! `|tau delta + z|^2 / d in [sigma^2 - k, sigma^2 + k]`, which upper-bounds
//! the infimum over classifiers. It is not a search for the worst classifier,
//! so the estimates should be read as upper bounds on that worst case.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Trials per independently seeded chunk.
pub const CHUNK: usize = 8192;

/// Zero-mean, unit-variance coordinate distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    Rademacher,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    UniformPm,
}

impl NoiseFamily {
    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Rademacher => "rademacher",
            NoiseFamily::UniformPm => "uniform_pm",
        }
    }

    /// `E[r^4]`.
    pub fn fourth_moment(self) -> f64 {
        match self {
            NoiseFamily::Gaussian => 3.0,
            NoiseFamily::Rademacher => 1.0,
            NoiseFamily::UniformPm => 1.8,
        }
    }

    #[inline]
    pub fn sample(self, rng: &mut StreamRng) -> f64 {
        match self {
            NoiseFamily::Gaussian => StandardNormal.sample(rng),
            NoiseFamily::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseFamily::UniformPm => rng.random_range(-SQRT_3..SQRT_3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheorySimConfig {
    pub d: usize,
    pub sigma: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub p: f64,
    pub family: NoiseFamily,
    pub trials: usize,
}

impl TheorySimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain {
                    name,
                    value: v,
                    domain: "(0, inf)",
                });
            }
        }
        if self.sigma == self.tau {
            return Err(Error::InvalidConfig("sigma and tau must differ".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(Error::Domain {
                name: "epsilon",
                value: self.epsilon,
                domain: "(0, 1/2]",
            });
        }
        if !(self.p > 0.5 && self.p < 1.0) {
            return Err(Error::Domain {
                name: "p",
                value: self.p,
                domain: "(1/2, 1)",
            });
        }
        if self.d == 0 || self.trials == 0 {
            return Err(Error::InvalidConfig("d and trials must be positive".into()));
        }
        Ok(())
    }

    pub fn kurtosis_e4(&self) -> f64 {
        self.family.fourth_moment()
    }

    /// `sqrt(E[r^4] - 1)`.
    pub fn eta_kurt(&self) -> f64 {
        (self.kurtosis_e4() - 1.0).sqrt()
    }
}

fn chunks(trials: usize) -> impl IndexedParallelIterator<Item = (u64, usize)> {
    let n = trials.div_ceil(CHUNK);
    (0..n).into_par_iter().map(move |c| (c as u64, CHUNK.min(trials - c * CHUNK)))
}

/// Empirical `p`-quantile of `| |sigma delta|^2 / d - sigma^2 |` over `cfg.trials` draws.
pub fn interval_halfwidth_k(cfg: &TheorySimConfig, stream: &Stream) -> Result<f64> {
    cfg.validate()?;
    let s2 = cfg.sigma * cfg.sigma;
    let d = cfg.d;
    let mut dev: Vec<f64> = chunks(cfg.trials)
        .flat_map_iter(|(c, len)| {
            let mut rng = stream.child("k", c).rng();
            (0..len)
                .map(|_| {
                    let sq: f64 = (0..d).map(|_| cfg.family.sample(&mut rng).powi(2)).sum();
                    (s2 * sq / d as f64 - s2).abs()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let rank = ((cfg.p * dev.len() as f64).ceil() as usize).clamp(1, dev.len()) - 1;
    let (_, k, _) = dev.select_nth_unstable_by(rank, f64::total_cmp);
    Ok(*k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub hits: u64,
    pub trials: u64,
}

/// Frequency of `|tau delta + z|^2 / d in [sigma^2 - k, sigma^2 + k]` with
/// `z = epsilon * direction / |direction|`.
pub fn worst_case_prob(cfg: &TheorySimConfig, k: f64, direction: &[f64], stream: &Stream) -> Result<ProbEstimate> {
    cfg.validate()?;
    if direction.len() != cfg.d {
        return Err(Error::DimensionMismatch {
            context: "z direction",
            expected: cfg.d,
            actual: direction.len(),
        });
    }
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidConfig("z direction must be a nonzero finite vector".into()));
    }
    let z: Vec<f64> = direction.iter().map(|v| cfg.epsilon * v / norm).collect();
    let s2 = cfg.sigma * cfg.sigma;
    let (lo, hi) = (s2 - k, s2 + k);
    let d = cfg.d as f64;
    let hits: u64 = chunks(cfg.trials)
        .map(|(c, len)| {
            let mut rng = stream.child("prob", c).rng();
            let mut hits = 0u64;
            for _ in 0..len {
                let sq: f64 = z
                    .iter()
                    .map(|zi| {
                        let v = cfg.tau * cfg.family.sample(&mut rng) + zi;
                        v * v
                    })
                    .sum();
                let r = sq / d;
                if r >= lo && r <= hi {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let n = cfg.trials as f64;
    let p = hits as f64 / n;
    Ok(ProbEstimate {
        estimate: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        hits,
        trials: cfg.trials as u64,
    })
}

/// `z = epsilon * e_1`.
pub fn first_axis(d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    if d > 0 {
        v[0] = 1.0;
    }
    v
}

/// The three terms whose maximum is the lemma constant `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaConstant {
    pub first: f64,
    pub second: f64,
    pub third: f64,
}

impl LemmaConstant {
    pub fn c(&self) -> f64 {
        self.first.max(self.second).max(self.third)
    }

    /// Smallest dimension for which the `C / d` bound is claimed.
    pub fn threshold(&self) -> f64 {
        self.first.max(self.second)
    }
}

/// ```text
/// C = max{ 4 s^4 h^2 / ((t^2 - s^2)^2 (1 - p)),
///          6 e^2 / (s^2 + t^2),
///          (36 t^4 h^2 + 144 t^2 e^2) / (s^2 + t^2)^2 }
/// ```
/// with `s = sigma`, `t = tau`, `e = epsilon`, `h = eta_kurt`.
pub fn lemma_constant_c(cfg: &TheorySimConfig) -> Result<LemmaConstant> {
    cfg.validate()?;
    let (s2, t2, e2) = (cfg.sigma.powi(2), cfg.tau.powi(2), cfg.epsilon.powi(2));
    let h2 = cfg.kurtosis_e4() - 1.0;
    Ok(LemmaConstant {
        first: 4.0 * s2 * s2 * h2 / ((t2 - s2).powi(2) * (1.0 - cfg.p)),
        second: 6.0 * e2 / (s2 + t2),
        third: (36.0 * t2 * t2 * h2 + 144.0 * t2 * e2) / (s2 + t2).powi(2),
    })
}

/// Chebyshev upper bound `sigma^2 eta_kurt / sqrt(d (1 - p))` on `k`.
pub fn chebyshev_k_bound(cfg: &TheorySimConfig) -> f64 {
    cfg.sigma.powi(2) * cfg.eta_kurt() / (cfg.d as f64 * (1.0 - cfg.p)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub d: usize,
    pub k: f64,
    pub chebyshev_k: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub bound_c_over_d: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub family: NoiseFamily,
    pub constant: LemmaConstant,
    pub rows: Vec<DecayRow>,
}

impl DecayReport {
    /// Every estimate within `C / d + 3 SE`.
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Runs the simulation at each dimension of `dims` using `template` for
/// everything else, with `z` along the first axis.
pub fn verify_decay(template: &TheorySimConfig, dims: &[usize], stream: &Stream) -> Result<DecayReport> {
    template.validate()?;
    if dims.is_empty() || dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("dims must be nonempty and strictly increasing".into()));
    }
    let constant = lemma_constant_c(template)?;
    if let Some(&d) = dims.iter().find(|&&d| (d as f64) < constant.threshold()) {
        return Err(Error::BelowThreshold {
            d,
            threshold: constant.threshold(),
        });
    }
    let c = constant.c();
    let rows = dims
        .iter()
        .map(|&d| {
            let cfg = TheorySimConfig { d, ..*template };
            let s = stream.child(template.family.name(), d as u64);
            let k = interval_halfwidth_k(&cfg, &s)?;
            let est = worst_case_prob(&cfg, k, &first_axis(d), &s)?;
            let bound = c / d as f64;
            Ok(DecayRow {
                d,
                k,
                chebyshev_k: chebyshev_k_bound(&cfg),
                estimate: est.estimate,
                std_error: est.std_error,
                bound_c_over_d: bound,
                pass: est.estimate <= bound + 3.0 * est.std_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecayReport {
        family: template.family,
        constant,
        rows,
    })
}
