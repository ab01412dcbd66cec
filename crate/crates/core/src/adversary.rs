//! Adversarial search against the soft-smoothed classifier.
//!
//! Both attacks ascend `J(x) = -log((1/m) sum_i F_y(x + delta_i))` over a fixed
//! noise batch with normalized steps `x <- x + alpha * grad J / |grad J|`. The
//! SmoothMix attack is unrestricted unless `epsilon_cap` is set; SmoothAdv
//! projects every iterate onto the `epsilon`-ball around the clean input.
//!
//! The l2 penalty `beta * |x' - x|^2` of the unrestricted objective is not
//! implemented: a finite `alpha * steps` already bounds how far the search can
//! go, playing the role of the constraint that the penalty would dualize.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{log_softmax, Network, SoftLabel};
use crate::scalar::{axpy, l2_distance, l2_norm, Scalar};
use crate::smoothing::NoiseBatch;

/// Mean probabilities below this are clamped when evaluating `J`.
pub const PROB_FLOOR: f64 = 1e-300;

/// Gradients with smaller l2 norm do not move the iterate.
pub const ZERO_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub alpha_step: f64,
    pub steps: usize,
    /// Hard l2 cap around the clean input; `None` is unrestricted.
    pub epsilon_cap: Option<f64>,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_step > 0.0 && self.alpha_step.is_finite()) {
            return Err(Error::Domain {
                name: "alpha_step",
                value: self.alpha_step,
                domain: "(0, inf)",
            });
        }
        if let Some(eps) = self.epsilon_cap {
            if !(eps > 0.0) {
                return Err(Error::Domain {
                    name: "epsilon_cap",
                    value: eps,
                    domain: "(0, inf)",
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue<S> {
    pub value: S,
    /// `(1/m) sum_i F_y(x + delta_i)` before clamping.
    pub mean_prob: S,
    /// Set when `mean_prob` fell below [`PROB_FLOOR`] and `value` was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct AttackTrajectory<'a, S> {
    /// `x~(0) = x, .., x~(T)`.
    pub points: Vec<Vec<S>>,
    /// Soft-smoothed prediction at the start point.
    pub fhat_at_start: SoftLabel<S>,
    /// `J(x~(t))` for `t = 0..T-1`, the values each step ascended from.
    pub objective: Vec<S>,
    /// Steps skipped because the gradient vanished.
    pub skipped_steps: usize,
    /// The batch shared by every step.
    pub noise: &'a NoiseBatch<S>,
}

impl<S: Scalar> AttackTrajectory<'_, S> {
    pub fn last(&self) -> &[S] {
        self.points.last().expect("trajectory is never empty")
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }
}

struct Evaluation<S> {
    objective: ObjectiveValue<S>,
    fhat: SoftLabel<S>,
    grad: Option<Vec<S>>,
}

fn check_args<S: Scalar>(net: &Network<S>, x: &[S], y: usize, noise: &NoiseBatch<S>) -> Result<()> {
    check_dim("attack input", net.input_dim(), x.len())?;
    check_dim("noise dimension", net.input_dim(), noise.dim())?;
    if y >= net.class_count() {
        return Err(Error::Domain {
            name: "label",
            value: y as f64,
            domain: "[0, C)",
        });
    }
    if noise.is_empty() {
        return Err(Error::InvalidConfig("empty noise batch".into()));
    }
    Ok(())
}

/// Evaluates `J`, `F^(x)` and optionally `grad_x J`.
///
/// With `w_i = F_y(x + delta_i) / sum_j F_y(x + delta_j)` (computed in log space),
/// `dJ / dlogits_i = w_i * (softmax_i - e_y)`, so the gradient is exact through
/// the Monte Carlo average.
fn evaluate<S: Scalar>(net: &Network<S>, x: &[S], y: usize, noise: &NoiseBatch<S>, want_grad: bool) -> Evaluation<S> {
    let m = noise.len();
    let c = net.class_count();
    let mut log_fy = Vec::with_capacity(m);
    let mut probs = Vec::with_capacity(m);
    let mut traces = Vec::with_capacity(if want_grad { m } else { 0 });
    let mut fhat = vec![S::zero(); c];
    for i in 0..m {
        let xi = noise.perturb(x, i);
        let logits = if want_grad {
            let t = net.trace(&xi);
            let l = t.logits.clone();
            traces.push(t);
            l
        } else {
            net.logits(&xi)
        };
        let ls = log_softmax(&logits);
        let p: Vec<S> = ls.iter().map(|v| v.exp()).collect();
        for (f, q) in fhat.iter_mut().zip(&p) {
            *f += *q;
        }
        log_fy.push(ls[y]);
        probs.push(p);
    }
    let ms = S::of(m as f64);
    fhat.iter_mut().for_each(|f| *f /= ms);

    let max = log_fy.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + log_fy.iter().map(|l| (*l - max).exp()).sum::<S>().ln();
    let log_mean = lse - ms.ln();
    let floor = S::of(PROB_FLOOR).max(S::min_positive_value());
    let clamped = log_mean < floor.ln();
    let objective = ObjectiveValue {
        value: if clamped { -floor.ln() } else { -log_mean },
        mean_prob: log_mean.exp(),
        clamped,
    };

    let grad = want_grad.then(|| {
        let mut g = vec![S::zero(); x.len()];
        for ((trace, p), l) in traces.iter().zip(&probs).zip(&log_fy) {
            let w = (*l - lse).exp();
            let mut dlogits: Vec<S> = p.iter().map(|q| w * *q).collect();
            dlogits[y] -= w;
            let gi = net.backward(trace, &dlogits, None, true).expect("input gradient requested");
            axpy(S::one(), &gi, &mut g);
        }
        g
    });
    Evaluation {
        objective,
        fhat: SoftLabel::from_raw(fhat),
        grad,
    }
}

/// `J(x) = -log((1/m) sum_i F_y(x + delta_i))`.
pub fn attack_objective<S: Scalar>(net: &Network<S>, x: &[S], y: usize, noise: &NoiseBatch<S>) -> Result<ObjectiveValue<S>> {
    check_args(net, x, y, noise)?;
    Ok(evaluate(net, x, y, noise, false).objective)
}

/// `grad_x J` together with the objective value.
pub fn objective_gradient<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    y: usize,
    noise: &NoiseBatch<S>,
) -> Result<(ObjectiveValue<S>, Vec<S>)> {
    check_args(net, x, y, noise)?;
    let e = evaluate(net, x, y, noise, true);
    Ok((e.objective, e.grad.expect("gradient requested")))
}

/// T-step normalized gradient ascent on `J` from `x`, reusing `noise` at every step.
pub fn smoothmix_attack<'a, S: Scalar>(
    net: &Network<S>,
    x: &[S],
    y: usize,
    noise: &'a NoiseBatch<S>,
    cfg: &AttackConfig,
) -> Result<AttackTrajectory<'a, S>> {
    cfg.validate()?;
    check_args(net, x, y, noise)?;
    let alpha = S::of(cfg.alpha_step);
    let mut points = Vec::with_capacity(cfg.steps + 1);
    points.push(x.to_vec());
    let mut objective = Vec::with_capacity(cfg.steps);
    let mut fhat_at_start = None;
    let mut skipped_steps = 0;
    for _ in 0..cfg.steps {
        let cur = points.last().expect("nonempty");
        let e = evaluate(net, cur, y, noise, true);
        fhat_at_start.get_or_insert(e.fhat);
        objective.push(e.objective.value);
        let g = e.grad.expect("gradient requested");
        let norm = l2_norm(&g);
        let mut next = cur.clone();
        if norm.f64() < ZERO_GRAD_NORM {
            skipped_steps += 1;
        } else {
            axpy(alpha / norm, &g, &mut next);
            if let Some(eps) = cfg.epsilon_cap {
                next = l2_project(&next, x, eps)?;
            }
        }
        points.push(next);
    }
    let fhat_at_start = match fhat_at_start {
        Some(f) => f,
        None => evaluate(net, x, y, noise, false).fhat,
    };
    Ok(AttackTrajectory {
        points,
        fhat_at_start,
        objective,
        skipped_steps,
        noise,
    })
}

/// Projected gradient ascent on `J` inside the l2 ball of radius `epsilon`
/// around `x`, using the same normalized step rule as [`smoothmix_attack`].
pub fn smoothadv_pgd<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    y: usize,
    noise: &NoiseBatch<S>,
    steps: usize,
    step_size: f64,
    epsilon: f64,
) -> Result<Vec<S>> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain {
            name: "epsilon",
            value: epsilon,
            domain: "(0, inf)",
        });
    }
    let cfg = AttackConfig {
        alpha_step: step_size,
        steps,
        epsilon_cap: Some(epsilon),
    };
    Ok(smoothmix_attack(net, x, y, noise, &cfg)?.last().to_vec())
}

/// Euclidean projection onto the ball `{p : |p - center| <= radius}`.
pub fn l2_project<S: Scalar>(point: &[S], center: &[S], radius: f64) -> Result<Vec<S>> {
    check_dim("projection center", point.len(), center.len())?;
    if !(radius > 0.0) {
        return Err(Error::Domain {
            name: "radius",
            value: radius,
            domain: "(0, inf)",
        });
    }
    let dist = l2_distance(point, center);
    let r = S::of(radius);
    if dist <= r {
        return Ok(point.to_vec());
    }
    let scale = r / dist;
    Ok(center
        .iter()
        .zip(point)
        .map(|(c, p)| *c + scale * (*p - *c))
        .collect())
}
