//! Certification over datasets, ACR and certified accuracy curves, and the
//! calibration diagnostics (equal-confidence mixing ratio, off-class confidence).

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::smoothadv_pgd;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, Network};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::smoothing::{certify, check_sigma, hard_class_counts, sample_noise, soft_smoothed_predict, CertifyOutcome, NoiseBatch, SmoothingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedRow {
    pub idx: usize,
    pub label: usize,
    pub outcome: CertifyOutcome,
    pub seconds: f64,
}

impl CertifiedRow {
    pub fn correct(&self) -> bool {
        self.outcome.predicted() == Some(self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedResultSet {
    pub rows: Vec<CertifiedRow>,
    pub smoothing: SmoothingConfig,
    pub model_id: String,
    pub seed: u64,
}

impl CertifiedResultSet {
    pub fn new(rows: Vec<CertifiedRow>, smoothing: SmoothingConfig, model_id: impl Into<String>, seed: u64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("certified result set is empty".into()));
        }
        if let Some(r) = rows.iter().find(|r| !(r.outcome.radius() >= 0.0)) {
            return Err(Error::Schema(format!("row {} has a negative radius", r.idx)));
        }
        Ok(Self {
            rows,
            smoothing,
            model_id: model_id.into(),
            seed,
        })
    }
}

/// Stream used to certify point `idx`; the same for any worker count.
pub fn point_stream(seed: u64, idx: usize) -> Stream {
    Stream::new(seed, "certify", idx as u64)
}

/// Runs CERTIFY on every point of `data` (in parallel on the current rayon pool).
pub fn certify_dataset<S: Scalar>(
    net: &Network<S>,
    data: &Dataset<S>,
    cfg: &SmoothingConfig,
    seed: u64,
    model_id: &str,
) -> Result<CertifiedResultSet> {
    cfg.validate()?;
    let rows = (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let start = Instant::now();
            let outcome = certify(net, &data.inputs[idx], cfg, &point_stream(seed, idx))?;
            Ok(CertifiedRow {
                idx,
                label: data.labels[idx],
                outcome,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CertifiedResultSet::new(rows, *cfg, model_id, seed)
}

/// Mean over all rows of the certified radius, counting abstentions and
/// misclassifications as zero.
pub fn acr(results: &CertifiedResultSet) -> f64 {
    let total: f64 = results
        .rows
        .iter()
        .filter(|r| r.correct())
        .map(|r| r.outcome.radius())
        .sum();
    total / results.rows.len() as f64
}

/// Fraction of rows certified correctly with radius `>= r`, for each `r`.
pub fn certified_accuracy_curve(results: &CertifiedResultSet, radii: &[f64]) -> Result<Vec<f64>> {
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("radius thresholds must be nondecreasing".into()));
    }
    let n = results.rows.len() as f64;
    Ok(radii
        .iter()
        .map(|&r| {
            results
                .rows
                .iter()
                .filter(|row| row.correct() && row.outcome.radius() >= r)
                .count() as f64
                / n
        })
        .collect())
}

/// Resolution of the mixing-ratio scan.
pub const MIX_GRID_POINTS: usize = 101;

/// Smallest `lambda` on a 101-point grid of `[0, 1]` at which the
/// soft-smoothed prediction at `(1 - lambda) x + lambda x_adv` leaves `y`.
///
/// `x_adv` comes from `pgd_steps` of projected ascent inside the
/// `pgd_eps`-ball; the attack and the scan draw separate noise batches of size
/// `estimation_m` from `stream`. `None` when `x` is not classified `y` or the
/// prediction never changes.
pub fn equal_confidence_mixing_ratio<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    y: usize,
    sigma: f64,
    pgd_steps: usize,
    pgd_eps: f64,
    estimation_m: usize,
    stream: &Stream,
) -> Result<Option<f64>> {
    let attack_noise = sample_noise::<S>(sigma, x.len(), estimation_m, &stream.child("attack", 0))?;
    let scan_noise = sample_noise::<S>(sigma, x.len(), estimation_m, &stream.child("scan", 0))?;
    if soft_smoothed_predict(net, x, &scan_noise)?.argmax() != y {
        return Ok(None);
    }
    let x_adv = smoothadv_pgd(net, x, y, &attack_noise, pgd_steps, 2.0 * pgd_eps / pgd_steps.max(1) as f64, pgd_eps)?;
    mixing_ratio_scan(net, x, &x_adv, y, &scan_noise)
}

/// Grid scan along the segment from `x` to `x_adv` with a fixed noise batch.
pub fn mixing_ratio_scan<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    x_adv: &[S],
    y: usize,
    noise: &NoiseBatch<S>,
) -> Result<Option<f64>> {
    for k in 0..MIX_GRID_POINTS {
        let lambda = k as f64 / (MIX_GRID_POINTS - 1) as f64;
        let l = S::of(lambda);
        let point: Vec<S> = x
            .iter()
            .zip(x_adv)
            .map(|(a, b)| (S::one() - l) * *a + l * *b)
            .collect();
        if soft_smoothed_predict(net, &point, noise)?.argmax() != y {
            return Ok(Some(lambda));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    /// Mean of the estimated `P(f(x + delta) = y)`.
    pub true_class: f64,
    /// Mean of the estimated `max_{c != y} P(f(x + delta) = c)`.
    pub max_off_class: f64,
}

/// Monte Carlo hard-prediction frequencies with `m` draws per point, averaged over points.
pub fn confidence_stats<S: Scalar>(
    net: &Network<S>,
    points: &[(Vec<S>, usize)],
    sigma: f64,
    m: u64,
    stream: &Stream,
) -> Result<ConfidenceStats> {
    check_sigma(sigma)?;
    if points.is_empty() {
        return Err(Error::InvalidConfig("no points for confidence statistics".into()));
    }
    let per_point = points
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let counts = hard_class_counts(net, x, m, sigma, &stream.child("confidence", i as u64))?;
            let true_c = counts[*y] as f64 / m as f64;
            let off = counts
                .iter()
                .enumerate()
                .filter(|(c, _)| c != y)
                .map(|(_, &k)| k)
                .max()
                .unwrap_or(0) as f64
                / m as f64;
            Ok((true_c, off))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_point.len() as f64;
    Ok(ConfidenceStats {
        true_class: per_point.iter().map(|p| p.0).sum::<f64>() / n,
        max_off_class: per_point.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub epsilon: f64,
    pub stats: ConfidenceStats,
}

/// Confidence statistics at PGD points for each radius in `eps_grid`
/// (`0` keeps the clean points). The attack uses `attack_m` noise draws per
/// point and `steps` normalized steps of size `2 eps / steps`.
pub fn pgd_confidence_table<S: Scalar>(
    net: &Network<S>,
    points: &[(Vec<S>, usize)],
    sigma: f64,
    eps_grid: &[f64],
    steps: usize,
    attack_m: usize,
    m: u64,
    stream: &Stream,
) -> Result<Vec<ConfidenceRow>> {
    eps_grid
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let adv = if eps == 0.0 {
                points.to_vec()
            } else {
                points
                    .par_iter()
                    .enumerate()
                    .map(|(i, (x, y))| {
                        let noise = sample_noise::<S>(sigma, x.len(), attack_m, &stream.child("pgd", i as u64))?;
                        let xa = smoothadv_pgd(net, x, *y, &noise, steps, 2.0 * eps / steps.max(1) as f64, eps)?;
                        Ok((xa, *y))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let stats = confidence_stats(net, &adv, sigma, m, &stream.child("table", k as u64))?;
            Ok(ConfidenceRow { epsilon: eps, stats })
        })
        .collect()
}

/// Median of the found ratios; `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Majority vote of the base classifier, used to sanity check predictions.
pub fn base_accuracy<S: Scalar>(net: &Network<S>, data: &Dataset<S>) -> f64 {
    let hits = data
        .iter()
        .filter(|(x, y)| argmax(&net.logits(x)) == *y)
        .count();
    hits as f64 / data.len().max(1) as f64
}
