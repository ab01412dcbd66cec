//! Dense ReLU classifier with exact gradients.
//!
//! The network maps an input `x` of length `d` to `C` logits. Hidden layers
//! apply ReLU (with subgradient 0 at 0); the last layer is affine. Weights are
//! row-major `(out_dim, in_dim)`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{check_dim, Error, Result};
use crate::rng::Stream;
use crate::scalar::{axpy, dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<S>,
    bias: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<S>, bias: Vec<S>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("layer dims must be positive".into()));
        }
        check_dim("layer weight length", in_dim * out_dim, weight.len())?;
        check_dim("layer bias length", out_dim, bias.len())?;
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![S::zero(); in_dim * out_dim],
            bias: vec![S::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[S] {
        &self.weight
    }

    pub fn bias(&self) -> &[S] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [S] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [S] {
        &mut self.bias
    }

    fn apply(&self, x: &[S], out: &mut Vec<S>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| dot(row, x) + *b),
        );
    }
}

/// The base classifier: logits `F` before softmax, `f = argmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    layers: Vec<Dense<S>>,
    activation: Activation,
    init_seed: Option<u64>,
}

impl<S: Scalar> Network<S> {
    pub fn new(layers: Vec<Dense<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].out_dim, pair[1].in_dim)?;
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
            init_seed: None,
        })
    }

    /// He-uniform weights and zero biases; `dims = [d, h1, .., C]`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer dims {dims:?}")));
        }
        let mut rng = Stream::new(seed, "init", 0).rng();
        let layers = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                let dist = Uniform::new(-limit, limit).expect("finite bounds");
                let weight = (0..w[0] * w[1]).map(|_| S::of(dist.sample(&mut rng))).collect();
                Dense::new(w[0], w[1], weight, vec![S::zero(); w[1]])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::new(layers)?;
        net.init_seed = Some(seed);
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<S>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    pub fn set_init_seed(&mut self, seed: Option<u64>) {
        self.init_seed = seed;
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        check_dim("forward input", self.input_dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input"));
        }
        Ok(self.logits(x))
    }

    /// Forward pass without argument checks; `x.len()` must equal `input_dim()`.
    pub fn logits(&self, x: &[S]) -> Vec<S> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                relu(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Hard prediction `f(x)`; ties go to the lowest class index.
    pub fn predict(&self, x: &[S]) -> usize {
        argmax(&self.logits(x))
    }

    pub(crate) fn trace(&self, x: &[S]) -> Trace<S> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.out_dim);
            layer.apply(&cur, &mut next);
            if i < last {
                relu(&mut next);
            }
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Trace {
            inputs,
            logits: cur,
        }
    }

    /// Backpropagates `dlogits` through a recorded pass. Parameter gradients
    /// are accumulated into `grads` scaled by `weight`; the input gradient is
    /// returned when `want_input` is set.
    pub(crate) fn backward(
        &self,
        trace: &Trace<S>,
        dlogits: &[S],
        mut grads: Option<(&mut Gradients<S>, S)>,
        want_input: bool,
    ) -> Option<Vec<S>> {
        let mut delta = dlogits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &trace.inputs[li];
            if let Some((g, w)) = grads.as_mut() {
                let (gw, gb) = g.layer_mut(li);
                for (o, d) in delta.iter().enumerate() {
                    let scaled = *d * *w;
                    if scaled != S::zero() {
                        gb[o] += scaled;
                        axpy(scaled, input, &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim]);
                    }
                }
            }
            if li == 0 && !want_input {
                return None;
            }
            let mut prev = vec![S::zero(); layer.in_dim];
            for (row, d) in layer.weight.chunks_exact(layer.in_dim).zip(&delta) {
                if *d != S::zero() {
                    axpy(*d, row, &mut prev);
                }
            }
            if li > 0 {
                // ReLU mask: the stored input of this layer is the previous activation.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= S::zero() {
                        *p = S::zero();
                    }
                }
            }
            delta = prev;
        }
        Some(delta)
    }

    /// `theta <- theta + scale * g`
    pub fn add_scaled(&mut self, scale: S, g: &Gradients<S>) -> Result<()> {
        g.check_shape(self)?;
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&g.layers) {
            axpy(scale, gw, &mut layer.weight);
            axpy(scale, gb, &mut layer.bias);
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weight: l.weight.iter().map(|v| T::of(v.f64())).collect(),
                    bias: l.bias.iter().map(|v| T::of(v.f64())).collect(),
                })
                .collect(),
            activation: self.activation,
            init_seed: self.init_seed,
        }
    }
}

pub(crate) struct Trace<S> {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<S>>,
    pub(crate) logits: Vec<S>,
}

fn relu<S: Scalar>(v: &mut [S]) {
    for x in v {
        if *x <= S::zero() {
            *x = S::zero();
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: PartialOrd + Copy>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradient (or velocity) buffer with the shape of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    layers: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(net: &Network<S>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![S::zero(); l.weight.len()], vec![S::zero(); l.bias.len()]))
                .collect(),
        }
    }

    pub fn layer(&self, i: usize) -> (&[S], &[S]) {
        let (w, b) = &self.layers[i];
        (w, b)
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut [S], &mut [S]) {
        let (w, b) = &mut self.layers[i];
        (w, b)
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.layers.iter_mut().flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn scale(&mut self, s: S) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += *b;
        }
    }

    pub fn check_shape(&self, net: &Network<S>) -> Result<()> {
        check_dim("gradient layer count", net.layers.len(), self.layers.len())?;
        for (l, (w, b)) in net.layers.iter().zip(&self.layers) {
            check_dim("gradient weight shape", l.weight.len(), w.len())?;
            check_dim("gradient bias shape", l.bias.len(), b.len())?;
        }
        Ok(())
    }
}

/// Probability vector on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel<S>(Vec<S>);

impl<S: Scalar> SoftLabel<S> {
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidConfig("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < S::zero() || *p > S::one()) {
            return Err(Error::Domain {
                name: "probability entry",
                value: probs.iter().map(|p| p.f64()).fold(f64::NAN, f64::max),
                domain: "[0, 1]",
            });
        }
        let total: f64 = probs.iter().map(|p| p.f64()).sum();
        if (total - 1.0).abs() > S::simplex_tol(probs.len()) {
            return Err(Error::Domain {
                name: "probability sum",
                value: total,
                domain: "1 within tolerance",
            });
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_raw(probs: Vec<S>) -> Self {
        Self(probs)
    }

    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Domain {
                name: "class index",
                value: class as f64,
                domain: "[0, C)",
            });
        }
        let mut v = vec![S::zero(); classes];
        v[class] = S::one();
        Ok(Self(v))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![S::one() / S::of(classes as f64); classes])
    }

    pub fn probs(&self) -> &[S] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn entropy(&self) -> S {
        -self
            .0
            .iter()
            .filter(|p| **p > S::zero())
            .map(|p| *p * p.ln())
            .sum::<S>()
    }
}

pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + logits.iter().map(|z| (*z - max).exp()).sum::<S>().ln();
    logits.iter().map(|z| *z - lse).collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<S: Scalar>(logits: &[S]) -> SoftLabel<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut e: Vec<S> = logits.iter().map(|z| (*z - max).exp()).collect();
    let total: S = e.iter().copied().sum();
    e.iter_mut().for_each(|v| *v /= total);
    SoftLabel(e)
}

/// `-sum_c target_c * log softmax(logits)_c`
pub fn cross_entropy<S: Scalar>(logits: &[S], target: &SoftLabel<S>) -> Result<S> {
    check_dim("cross-entropy target", logits.len(), target.len())?;
    Ok(cross_entropy_unchecked(logits, target.probs()))
}

pub(crate) fn cross_entropy_unchecked<S: Scalar>(logits: &[S], target: &[S]) -> S {
    let ls = log_softmax(logits);
    -target
        .iter()
        .zip(&ls)
        .filter(|(t, _)| **t != S::zero())
        .map(|(t, l)| *t * *l)
        .sum::<S>()
}

fn check_input<S: Scalar>(net: &Network<S>, x: &[S], target: &SoftLabel<S>) -> Result<()> {
    check_dim("input", net.input_dim(), x.len())?;
    check_dim("target", net.class_count(), target.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input"));
    }
    Ok(())
}

/// Accumulates `weight * d CE(F(x), target) / d theta` into `grads`; returns the loss.
pub(crate) fn accumulate_ce_grad<S: Scalar>(
    net: &Network<S>,
    x: &[S],
    target: &[S],
    weight: S,
    grads: &mut Gradients<S>,
) -> S {
    let trace = net.trace(x);
    let p = softmax(&trace.logits).0;
    let loss = cross_entropy_unchecked(&trace.logits, target);
    let dlogits: Vec<S> = p.iter().zip(target).map(|(pi, ti)| *pi - *ti).collect();
    net.backward(&trace, &dlogits, Some((grads, weight)), false);
    loss
}

/// Mean cross-entropy gradient over a batch of `(x, soft target)` pairs.
pub fn grad_params<S: Scalar>(net: &Network<S>, batch: &[(Vec<S>, SoftLabel<S>)]) -> Result<Gradients<S>> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(net);
    let w = S::one() / S::of(batch.len() as f64);
    for (x, t) in batch {
        check_input(net, x, t)?;
        accumulate_ce_grad(net, x, t.probs(), w, &mut grads);
    }
    Ok(grads)
}

/// Gradient of `CE(F(x), target)` with respect to the input.
pub fn grad_input<S: Scalar>(net: &Network<S>, x: &[S], target: &SoftLabel<S>) -> Result<Vec<S>> {
    check_input(net, x, target)?;
    let trace = net.trace(x);
    let p = softmax(&trace.logits).0;
    let dlogits: Vec<S> = p.iter().zip(target.probs()).map(|(pi, ti)| *pi - *ti).collect();
    Ok(net
        .backward(&trace, &dlogits, None, true)
        .expect("input gradient requested"))
}

/// SGD with Nesterov momentum, no dampening.
///
/// With `g' = g + weight_decay * theta`:
///
/// ```text
/// v     <- momentum * v + g'
/// theta <- theta - lr * (g' + momentum * v)
/// ```
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(net: &Network<S>, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Domain {
                name: "lr",
                value: lr,
                domain: "[0, inf)",
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Domain {
                name: "momentum",
                value: momentum,
                domain: "[0, 1)",
            });
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Domain {
                name: "weight_decay",
                value: weight_decay,
                domain: "[0, inf)",
            });
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(net),
        })
    }

    pub fn velocity(&self) -> &Gradients<S> {
        &self.velocity
    }

    pub fn step(&mut self, net: &mut Network<S>, grads: &Gradients<S>) -> Result<()> {
        grads.check_shape(net)?;
        self.velocity.check_shape(net)?;
        let lr = S::of(self.lr);
        let mu = S::of(self.momentum);
        let wd = S::of(self.weight_decay);
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = grads.layer(li);
            let (vw, vb) = self.velocity.layer_mut(li);
            for (theta, (g, v)) in layer
                .weight
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .zip(gw.iter().chain(gb).zip(vw.iter_mut().chain(vb.iter_mut())))
            {
                let g = *g + wd * *theta;
                *v = mu * *v + g;
                *theta -= lr * (g + mu * *v);
            }
        }
        Ok(())
    }
}

/// Uniform random input in `[-scale, scale]^d`.
pub fn random_input<S: Scalar, R: Rng>(d: usize, scale: f64, rng: &mut R) -> Vec<S> {
    let dist = Uniform::new_inclusive(-scale, scale).expect("finite bounds");
    (0..d).map(|_| S::of(dist.sample(rng))).collect()
}
