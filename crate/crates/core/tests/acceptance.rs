//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails.
//!
//! `ACCEPTANCE_ONLY=4,7` restricts the run to the listed criteria.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use smoothmix::adversary::{smoothadv_pgd, smoothmix_attack, AttackConfig};
use smoothmix::checkpoint::save_checkpoint;
use smoothmix::config::{DatasetKind, RunConfig};
use smoothmix::data::{read_idx, write_idx, Dataset, IDX_IMAGES_MAGIC};
use smoothmix::evaluation::{
    acr, certified_accuracy_curve, certify_dataset, equal_confidence_mixing_ratio, median, pgd_confidence_table,
    CertifiedResultSet,
};
use smoothmix::nn::{cross_entropy, grad_input, grad_params, softmax, Dense, Network, SoftLabel};
use smoothmix::smoothing::{certify, sample_noise, CertifyOutcome, SmoothingConfig};
use smoothmix::stats::clopper_pearson_lower;
use smoothmix::theory::{verify_decay, NoiseFamily, TheorySimConfig};
use smoothmix::training::{make_mix_pair, smoothmix_batch_loss, train, MethodConfig, SmoothMixConfig, TrainRunConfig};
use smoothmix::{Mlp, Stream};
use statrs::function::beta::beta_reg;

const SEEDS: [u64; 3] = [0, 1, 2];
const SIGMA: f64 = 0.5;
const RADII: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn say(line: &str) {
    // Written straight to the handle so the lines show without --nocapture.
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, fn() -> Outcome); 9] = [
        (1, gradient_correctness),
        (2, clopper_pearson_oracle),
        (3, linear_certification),
        (4, smoothmix_beats_gaussian),
        (5, eta_monotonicity),
        (6, alpha_t_flatness),
        (7, miscalibration_direction),
        (8, decay_bound),
        (9, invariants),
    ];
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for (id, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let line = format!(
            "criterion {id}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        say(&line);
        lines.push(line);
        if !o.pass {
            failed.push(id);
        }
    }
    say("acceptance summary:");
    for l in &lines {
        say(&format!("  {l}"));
    }
    if !failed.is_empty() {
        say(&format!("failed criteria: {failed:?}"));
        std::process::exit(1);
    }
}

// Criterion 1

fn gradient_correctness() -> Outcome {
    let mut rng = Stream::new(1, "acceptance-fd", 0).rng();
    let (mut checked, mut worst) = (0, 0.0_f64);
    while checked < 100 {
        let d = rng.random_range(2..7);
        let c = rng.random_range(2..6);
        let hidden: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(3..8)).collect();
        let net = common::random_net(d, &hidden, c, &mut rng);
        let x = common::random_vec(d, 1.0, &mut rng);
        if common::min_hidden_preactivation(&net, &x) < 1e-3 {
            continue;
        }
        let t = common::random_label(c, &mut rng);
        let analytic = common::flatten(&grad_params(&net, &[(x.clone(), t.clone())]).unwrap(), net.layers().len());
        let numeric = common::numeric_param_grad(&net, 1e-6, |n| cross_entropy(&n.logits(&x), &t).unwrap());
        worst = worst.max(max_rel_error(&analytic, &numeric, 1e-6));
        let gi = grad_input(&net, &x, &t).unwrap();
        let ni = common::numeric_input_grad(&x, 1e-6, |p| cross_entropy(&net.logits(p), &t).unwrap());
        worst = worst.max(max_rel_error(&gi, &ni, 1e-6));
        checked += 1;
    }
    outcome(worst < 1e-4, format!("{checked} triples, max relative error {worst:.2e} (limit 1e-4)"))
}

fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.abs().max(y.abs()) > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

// Criterion 2

fn beta_oracle(k: u64, n: u64, alpha: f64) -> f64 {
    // P(Bin(n, p) >= k) = I_p(k, n - k + 1), increasing in p.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(k as f64, (n - k + 1) as f64, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn clopper_pearson_oracle() -> Outcome {
    let alpha = 0.001;
    let mut worst = 0.0_f64;
    let mut closed = true;
    let mut cases = 0;
    for n in [10u64, 100, 1000] {
        let ks: Vec<u64> = if n <= 50 {
            (0..=n).collect()
        } else {
            (0..50).map(|i| i * n / 49).collect()
        };
        for k in ks {
            let got = clopper_pearson_lower(k, n, alpha).unwrap();
            cases += 1;
            match k {
                0 => closed &= got == 0.0,
                k if k == n => closed &= (got - alpha.powf(1.0 / n as f64)).abs() <= 1e-12,
                _ => worst = worst.max((got - beta_oracle(k, n, alpha)).abs()),
            }
        }
    }
    outcome(
        worst <= 1e-9 && closed,
        format!("{cases} cases, max |bisection - beta oracle| {worst:.2e}, closed forms exact: {closed}"),
    )
}

// Criterion 3

fn linear_certification() -> Outcome {
    let d = 10;
    let mut rng = Stream::new(3, "acceptance-linear", 0).rng();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = 0.3;
    let mut weight = vec![0.0; d];
    weight.extend(&w);
    let net = Network::new(vec![Dense::new(d, 2, weight, vec![0.0, b]).unwrap()]).unwrap();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cfg = SmoothingConfig {
        sigma: SIGMA,
        n0: 100,
        n: 10_000,
        alpha_cert: 0.001,
    };
    let (mut ok, mut certified) = (0, 0);
    for i in 0..200 {
        let x = common::random_vec(d, 1.5, &mut rng);
        let score = w.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b;
        let margin = score.abs() / norm;
        let truth = usize::from(score > 0.0);
        let sound = match certify(&net, &x, &cfg, &Stream::new(3, "acceptance-linear-point", i)).unwrap() {
            CertifyOutcome::Abstain => true,
            CertifyOutcome::Certified {
                predicted_class,
                radius,
                ..
            } => {
                certified += 1;
                predicted_class == truth && radius <= margin
            }
        };
        ok += usize::from(sound);
    }
    outcome(ok >= 199, format!("{ok}/200 radii within the analytic margin ({certified} certified)"))
}

// Shared two-moons models

fn moons_data() -> &'static (Dataset<f64>, Dataset<f64>) {
    static DATA: std::sync::OnceLock<(Dataset<f64>, Dataset<f64>)> = std::sync::OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = RunConfig {
            dataset: DatasetKind::TwoMoons,
            n_train: 2000,
            n_test: 500,
            noise_std: 0.15,
            ..RunConfig::default()
        };
        cfg.datasets().unwrap()
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Recipe {
    Gaussian,
    Mix { eta: f64, alpha: f64, steps: usize },
}

impl Recipe {
    const DEFAULT_MIX: Recipe = Recipe::Mix {
        eta: 5.0,
        alpha: 1.0,
        steps: 4,
    };

    fn key(self) -> String {
        match self {
            Recipe::Gaussian => "gaussian".into(),
            Recipe::Mix { eta, alpha, steps } => format!("smoothmix-eta{eta}-a{alpha}-t{steps}"),
        }
    }

    fn method(self) -> MethodConfig {
        match self {
            Recipe::Gaussian => MethodConfig::Gaussian { sigma: SIGMA, m: 4 },
            Recipe::Mix { eta, alpha, steps } => MethodConfig::SmoothMix(SmoothMixConfig {
                sigma: SIGMA,
                eta,
                attack: AttackConfig {
                    alpha_step: alpha,
                    steps,
                    epsilon_cap: None,
                },
                m: 4,
                use_one_step: false,
                one_step_cap: None,
            }),
        }
    }
}

struct Trained {
    net: Mlp,
    results: CertifiedResultSet,
}

fn train_and_certify(train_set: &Dataset<f64>, test: &Dataset<f64>, hidden: usize, epochs: usize, recipe: Recipe, seed: u64) -> Trained {
    let net = Mlp::init(&[train_set.dim(), hidden, hidden, train_set.class_count], seed).unwrap();
    let run = TrainRunConfig {
        epochs,
        batch_size: 32,
        lr: 0.05,
        lr_milestones: vec![epochs / 2, 3 * epochs / 4],
        seed,
        ..TrainRunConfig::default()
    };
    let (net, _) = train(net, train_set, &run, &recipe.method(), |_| {}).unwrap();
    let cfg = SmoothingConfig {
        sigma: SIGMA,
        ..SmoothingConfig::default()
    };
    let results = certify_dataset(&net, test, &cfg, 1000 + seed, &recipe.key()).unwrap();
    Trained { net, results }
}

fn moons_model(recipe: Recipe, seed: u64) -> &'static Trained {
    static CACHE: Mutex<Option<HashMap<(String, u64), &'static Trained>>> = Mutex::new(None);
    let key = (recipe.key(), seed);
    if let Some(t) = CACHE.lock().unwrap().get_or_insert_with(HashMap::new).get(&key) {
        return t;
    }
    let (train_set, test) = moons_data();
    let t: &'static Trained = Box::leak(Box::new(train_and_certify(train_set, test, 64, 30, recipe, seed)));
    CACHE.lock().unwrap().as_mut().unwrap().insert(key, t);
    t
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// Criterion 4

fn paired_acr(label: &str, mut run: impl FnMut(Recipe, u64) -> f64) -> (bool, String) {
    let mut gauss = Vec::new();
    let mut mix = Vec::new();
    for seed in SEEDS {
        gauss.push(run(Recipe::Gaussian, seed));
        mix.push(run(Recipe::DEFAULT_MIX, seed));
    }
    let wins = gauss.iter().zip(&mix).all(|(g, m)| m > g);
    let gain = mean(&mix) / mean(&gauss) - 1.0;
    (
        wins && gain >= 0.05,
        format!("{label}: gaussian {gauss:.4?} smoothmix {mix:.4?} mean gain {:+.1}%", 100.0 * gain),
    )
}

fn mnist_data() -> (Dataset<f64>, Dataset<f64>) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let cfg = RunConfig {
        dataset: DatasetKind::Mnist,
        n_train: 2000,
        n_test: 200,
        mnist_train_images: root.join("train-images-idx3-ubyte.gz"),
        mnist_train_labels: root.join("train-labels-idx1-ubyte.gz"),
        mnist_test_images: root.join("t10k-images-idx3-ubyte.gz"),
        mnist_test_labels: root.join("t10k-labels-idx1-ubyte.gz"),
        ..RunConfig::default()
    };
    cfg.datasets().unwrap()
}

fn smoothmix_beats_gaussian() -> Outcome {
    let (moons_ok, moons) = paired_acr("two-moons", |r, s| acr(&moons_model(r, s).results));
    let (train_set, test) = mnist_data();
    let (mnist_ok, mnist) = paired_acr("mnist", |r, s| acr(&train_and_certify(&train_set, &test, 256, 15, r, s).results));
    outcome(moons_ok && mnist_ok, format!("{moons}; {mnist}"))
}

// Criterion 5

fn eta_monotonicity() -> Outcome {
    let last = RADII.len() - 1;
    let mut robust = Vec::new();
    let mut clean = Vec::new();
    for eta in [1.0, 4.0, 16.0] {
        let curves: Vec<Vec<f64>> = SEEDS
            .iter()
            .map(|&s| {
                let recipe = Recipe::Mix { eta, alpha: 1.0, steps: 4 };
                certified_accuracy_curve(&moons_model(recipe, s).results, &RADII).unwrap()
            })
            .collect();
        robust.push(mean(&curves.iter().map(|c| c[last]).collect::<Vec<_>>()));
        clean.push(mean(&curves.iter().map(|c| c[0]).collect::<Vec<_>>()));
    }
    let up = robust.windows(2).all(|w| w[1] >= w[0]);
    let down = clean.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        up && down,
        format!(
            "eta 1/4/16: certified acc at r={} {robust:.4?} (nondecreasing: {up}), clean {clean:.4?} (nonincreasing: {down})",
            RADII[last]
        ),
    )
}

// Criterion 6

fn alpha_t_flatness() -> Outcome {
    let means: Vec<f64> = [(2.0, 4), (4.0, 2), (8.0, 1)]
        .iter()
        .map(|&(alpha, steps)| {
            let recipe = Recipe::Mix { eta: 5.0, alpha, steps };
            mean(&SEEDS.map(|s| acr(&moons_model(recipe, s).results)))
        })
        .collect();
    let hi = means.iter().cloned().fold(f64::MIN, f64::max);
    let lo = means.iter().cloned().fold(f64::MAX, f64::min);
    let spread = (hi - lo) / mean(&means);
    outcome(
        spread < 0.10,
        format!("(2,4)/(4,2)/(8,1) mean ACR {means:.4?}, relative spread {:.1}%", 100.0 * spread),
    )
}

// Criterion 7

const CONFIDENCE_EPS: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];
const CONFIDENCE_M: u64 = 1000;

fn miscalibration_direction() -> Outcome {
    let (_, test) = moons_data();
    let points: Vec<(Vec<f64>, usize)> = test.take(200).iter().map(|(x, y)| (x.to_vec(), y)).collect();
    let ratio = |net: &Mlp| {
        let found: Vec<f64> = points
            .iter()
            .enumerate()
            .filter_map(|(i, (x, y))| {
                equal_confidence_mixing_ratio(net, x, *y, SIGMA, 50, 8.0, 64, &Stream::new(7, "mixratio", i as u64))
                    .unwrap()
            })
            .collect();
        (median(&found).unwrap_or(0.0), found.len())
    };
    let (g_med, g_found) = ratio(&moons_model(Recipe::Gaussian, 0).net);
    let (m_med, m_found) = ratio(&moons_model(Recipe::DEFAULT_MIX, 0).net);

    let table = pgd_confidence_table(
        &moons_model(Recipe::Gaussian, 0).net,
        &points,
        SIGMA,
        &CONFIDENCE_EPS,
        50,
        16,
        CONFIDENCE_M,
        &Stream::new(7, "confidence", 0),
    )
    .unwrap();
    let off: Vec<f64> = table.iter().map(|r| r.stats.max_off_class).collect();
    // Each mean averages 200 frequencies with variance at most 1/(4m).
    let se = 1.0 / (2.0 * ((CONFIDENCE_M as f64) * points.len() as f64).sqrt());
    let diff_se = std::f64::consts::SQRT_2 * se;
    let increasing = off.windows(2).all(|w| w[1] - w[0] > 3.0 * diff_se);
    outcome(
        m_med > g_med && increasing,
        format!(
            "median mixing ratio smoothmix {m_med:.2} ({m_found} found) vs gaussian {g_med:.2} ({g_found} found); \
             gaussian max off-class over eps {CONFIDENCE_EPS:?}: {off:.4?} (SE {se:.4})"
        ),
    )
}

// Criterion 8

fn decay_bound() -> Outcome {
    let dims = [64, 256, 1024, 4096];
    let mut pass = true;
    let mut parts = Vec::new();
    for family in [NoiseFamily::Gaussian, NoiseFamily::UniformPm] {
        let template = TheorySimConfig {
            d: dims[0],
            sigma: 1.0,
            tau: 1.5,
            epsilon: 0.5,
            p: 0.8,
            family,
            trials: 1_000_000,
        };
        let report = verify_decay(&template, &dims, &Stream::new(8, "acceptance-theory", 0)).unwrap();
        let c = report.constant.c();
        let scaled: Vec<f64> = report.rows.iter().map(|r| r.estimate * r.d as f64).collect();
        let ok = report.pass() && scaled.iter().all(|&s| s <= c);
        pass &= ok;
        parts.push(format!(
            "{}: C={c:.4}, estimates {:?}, estimate*d {scaled:.3?}",
            family.name(),
            report.rows.iter().map(|r| format!("{:.2e}", r.estimate)).collect::<Vec<_>>()
        ));
    }
    outcome(pass, parts.join("; "))
}

// Criterion 9

fn invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let mut rng = Stream::new(9, "acceptance-invariants", 0).rng();

    // Softmax lands on the simplex even for extreme logits.
    let mut soft_ok = true;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..rng.random_range(2..10)).map(|_| rng.random_range(-500.0..500.0)).collect();
        let p = softmax(&z);
        soft_ok &= SoftLabel::new(p.into_inner()).is_ok();
    }
    check("softmax validity", soft_ok);

    let mut mix_ok = true;
    for _ in 0..200 {
        let x = common::random_vec(4, 2.0, &mut rng);
        let adv = common::random_vec(4, 2.0, &mut rng);
        let fhat = common::random_label(3, &mut rng);
        let pair = make_mix_pair(&x, &fhat, &adv, 0.0, 3).unwrap();
        mix_ok &= pair.x_mix == x && pair.y_mix == fhat;
    }
    check("mixup identity at lambda 0", mix_ok);

    check("lambda ks test", lambda_ks_statistic() < 1.95 / (10_000f64).sqrt());

    let (mut step_ok, mut ball_ok) = (true, true);
    for case in 0..100 {
        let net = common::random_net(3, &[8], 3, &mut rng);
        let x = common::random_vec(3, 1.0, &mut rng);
        let alpha = rng.random_range(0.05..2.0);
        let noise = sample_noise::<f64>(0.5, 3, 4, &Stream::new(9, "noise", case)).unwrap();
        let cfg = AttackConfig {
            alpha_step: alpha,
            steps: 4,
            epsilon_cap: None,
        };
        let traj = smoothmix_attack(&net, &x, case as usize % 3, &noise, &cfg).unwrap();
        for w in traj.points.windows(2) {
            let step = dist(&w[0], &w[1]);
            step_ok &= step == 0.0 || (step - alpha).abs() < 1e-9;
        }
        let eps = rng.random_range(0.05..1.5);
        let adv = smoothadv_pgd(&net, &x, 0, &noise, 10, 0.4, eps).unwrap();
        ball_ok &= dist(&adv, &x) <= eps + 1e-9;
    }
    check("attack step norm", step_ok);
    check("smoothadv ball containment", ball_ok);

    let results = &moons_model(Recipe::Gaussian, 0).results;
    let radii: Vec<f64> = (0..=30).map(|k| k as f64 * 0.05).collect();
    let curve = certified_accuracy_curve(results, &radii).unwrap();
    check("curve monotonicity", curve.windows(2).all(|w| w[1] <= w[0]));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("round.idx");
    let bytes: Vec<u8> = (0..3 * 5 * 4).map(|_| rng.random()).collect();
    write_idx(&path, IDX_IMAGES_MAGIC, &[3, 5, 4], &bytes).unwrap();
    let back = read_idx(&path, IDX_IMAGES_MAGIC).unwrap();
    check("idx round trip", back.dims == [3, 5, 4] && back.data == bytes);

    check("global determinism", determinism(dir.path()));

    let pass = failures.is_empty();
    outcome(
        pass,
        if pass {
            "softmax, mixup identity, lambda KS, step norm, ball containment, curves, IDX, determinism".into()
        } else {
            format!("failed: {failures:?}")
        },
    )
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

/// Kolmogorov–Smirnov distance between sampled mixup weights and U[0, 1/2].
fn lambda_ks_statistic() -> f64 {
    let net = Mlp::init(&[2, 4, 2], 0).unwrap();
    let cfg = SmoothMixConfig {
        sigma: SIGMA,
        eta: 1.0,
        attack: AttackConfig {
            alpha_step: 0.1,
            steps: 1,
            epsilon_cap: None,
        },
        m: 1,
        use_one_step: false,
        one_step_cap: None,
    };
    let mut lambdas: Vec<f64> = (0..10_000)
        .map(|i| {
            smoothmix_batch_loss(&net, &[0.1, 0.2], 0, &cfg, &Stream::new(9, "lambda-ks", i))
                .unwrap()
                .1
                .lambda
        })
        .collect();
    lambdas.sort_by(f64::total_cmp);
    let n = lambdas.len() as f64;
    lambdas
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let cdf = (2.0 * l).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

/// Two identical runs, one of them on a different thread count, give
/// byte-identical checkpoints and certification CSVs.
fn determinism(dir: &std::path::Path) -> bool {
    let run_once = |tag: &str, threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (train_set, test) = moons_data();
            let small = train_set.take(200);
            let net = Mlp::init(&[2, 16, 2], 5).unwrap();
            let run = TrainRunConfig {
                epochs: 3,
                seed: 5,
                ..TrainRunConfig::default()
            };
            let (net, _) = train(net, &small, &run, &Recipe::DEFAULT_MIX.method(), |_| {}).unwrap();
            let ckpt = dir.join(format!("{tag}.json"));
            save_checkpoint(&net, &ckpt).unwrap();
            let results = certify_dataset(&net, &test.take(50), &SmoothingConfig::default(), 5, "det").unwrap();
            let mut csv = Vec::new();
            smoothmix::report::write_certification(&mut csv, &results.rows, true).unwrap();
            (std::fs::read(ckpt).unwrap(), csv)
        })
    };
    let a = run_once("a", 1);
    let b = run_once("b", 3);
    a == b
}
