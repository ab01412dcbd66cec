#![allow(dead_code)]

use rand::Rng;
use smoothmix::nn::{Dense, Network, SoftLabel};
use smoothmix::rng::StreamRng;

/// Random ReLU net with `d` inputs, `hidden` widths and `c` outputs.
pub fn random_net(d: usize, hidden: &[usize], c: usize, rng: &mut StreamRng) -> Network<f64> {
    let mut dims = vec![d];
    dims.extend_from_slice(hidden);
    dims.push(c);
    let layers = dims
        .windows(2)
        .map(|w| {
            let weight = (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            Dense::new(w[0], w[1], weight, bias).unwrap()
        })
        .collect();
    Network::new(layers).unwrap()
}

pub fn random_vec(d: usize, scale: f64, rng: &mut StreamRng) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_label(c: usize, rng: &mut StreamRng) -> SoftLabel<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    SoftLabel::new(raw.iter().map(|v| v / total).collect()).unwrap()
}

/// Smallest |pre-activation| over hidden units, recomputed from public weights.
pub fn min_hidden_preactivation(net: &Network<f64>, x: &[f64]) -> f64 {
    let mut cur = x.to_vec();
    let mut min = f64::INFINITY;
    let last = net.layers().len() - 1;
    for (i, l) in net.layers().iter().enumerate() {
        let mut next: Vec<f64> = l
            .weight()
            .chunks_exact(l.in_dim())
            .zip(l.bias())
            .map(|(row, b)| row.iter().zip(&cur).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        if i < last {
            for v in &mut next {
                min = min.min(v.abs());
                *v = v.max(0.0);
            }
        }
        cur = next;
    }
    min
}

/// Compares an analytic gradient with central differences of `f`.
///
/// Coordinates whose magnitude exceeds `floor` must agree to relative error
/// `rel`; the rest to absolute error `floor * rel`.
pub fn assert_gradient_close(analytic: &[f64], numeric: &[f64], rel: f64, floor: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale > floor {
            assert!((a - n).abs() / scale < rel, "{what}[{i}]: analytic {a} numeric {n}");
        } else {
            assert!((a - n).abs() < floor * rel, "{what}[{i}]: analytic {a} numeric {n}");
        }
    }
}

fn param(n: &mut Network<f64>, li: usize, bias: bool, j: usize) -> &mut f64 {
    let l = &mut n.layers_mut()[li];
    if bias {
        &mut l.bias_mut()[j]
    } else {
        &mut l.weight_mut()[j]
    }
}

/// Central difference of `f` at every coordinate of the network's parameters,
/// ordered layer by layer, weights then biases.
pub fn numeric_param_grad(net: &Network<f64>, h: f64, f: impl Fn(&Network<f64>) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut work = net.clone();
    for li in 0..net.layers().len() {
        for bias in [false, true] {
            let len = if bias {
                net.layers()[li].bias().len()
            } else {
                net.layers()[li].weight().len()
            };
            for j in 0..len {
                let orig = *param(&mut work, li, bias, j);
                *param(&mut work, li, bias, j) = orig + h;
                let up = f(&work);
                *param(&mut work, li, bias, j) = orig - h;
                let down = f(&work);
                *param(&mut work, li, bias, j) = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
    }
    out
}

/// Flattens gradients in the same order as [`numeric_param_grad`].
pub fn flatten(g: &smoothmix::nn::Gradients<f64>, layers: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for li in 0..layers {
        let (w, b) = g.layer(li);
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    out
}

pub fn numeric_input_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
