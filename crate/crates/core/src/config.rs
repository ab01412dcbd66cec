//! Flat TOML run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackConfig;
use crate::data::{gen_gaussian_blobs, gen_two_moons, load_mnist_idx, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::splitmix64;
use crate::smoothing::SmoothingConfig;
use crate::theory::{NoiseFamily, TheorySimConfig};
use crate::training::{Method, MethodConfig, SmoothAdvConfig, SmoothMixConfig, TrainRunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Mnist,
}

/// Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub sigma: f64,
    pub eta: f64,
    pub alpha_step: f64,
    pub attack_steps: usize,
    pub m: usize,
    pub use_one_step: bool,
    pub one_step_cap: Option<f64>,
    /// SmoothAdv ball radius and warm-up length.
    pub epsilon: f64,
    pub warmup_epochs: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,

    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
    pub mnist_train_images: PathBuf,
    pub mnist_train_labels: PathBuf,
    pub mnist_test_images: PathBuf,
    pub mnist_test_labels: PathBuf,

    pub n0: u64,
    pub n: u64,
    pub alpha_cert: f64,
    /// Radius thresholds reported by `evaluate`.
    pub radii: Vec<f64>,

    pub pgd_steps: usize,
    pub pgd_eps: f64,
    pub estimation_m: usize,
    /// Test points used by `mixratio`.
    pub mix_points: usize,
    /// PGD radii for the off-class confidence table; 0 means clean points.
    pub confidence_eps: Vec<f64>,

    pub theory_families: Vec<NoiseFamily>,
    pub tau: f64,
    pub theory_sigma: f64,
    pub theory_epsilon: f64,
    pub p: f64,
    pub trials: usize,
    pub dims: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Gaussian,
            sigma: 0.5,
            eta: 5.0,
            alpha_step: 1.0,
            attack_steps: 4,
            m: 4,
            use_one_step: false,
            one_step_cap: None,
            epsilon: 0.5,
            warmup_epochs: 10,
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            lr_milestones: vec![10, 20],
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            hidden: vec![64, 64],
            dataset: DatasetKind::TwoMoons,
            data_seed: 0,
            n_train: 2000,
            n_test: 500,
            noise_std: 0.15,
            centers: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            spread: 0.5,
            mnist_train_images: "data/mnist/train-images-idx3-ubyte.gz".into(),
            mnist_train_labels: "data/mnist/train-labels-idx1-ubyte.gz".into(),
            mnist_test_images: "data/mnist/t10k-images-idx3-ubyte.gz".into(),
            mnist_test_labels: "data/mnist/t10k-labels-idx1-ubyte.gz".into(),
            n0: 100,
            n: 1000,
            alpha_cert: 0.001,
            radii: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
            pgd_steps: 50,
            pgd_eps: 8.0,
            estimation_m: 64,
            mix_points: 200,
            confidence_eps: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            theory_families: vec![NoiseFamily::Gaussian, NoiseFamily::UniformPm],
            tau: 1.5,
            theory_sigma: 1.0,
            theory_epsilon: 0.5,
            p: 0.8,
            trials: 1_000_000,
            dims: vec![64, 256, 1024, 4096],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))
    }

    /// Reads a config file; relative MNIST paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.mnist_train_images,
                &mut cfg.mnist_train_labels,
                &mut cfg.mnist_test_images,
                &mut cfg.mnist_test_labels,
            ] {
                if p.is_relative() && !p.exists() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn smoothing(&self) -> SmoothingConfig {
        SmoothingConfig {
            sigma: self.sigma,
            n0: self.n0,
            n: self.n,
            alpha_cert: self.alpha_cert,
        }
    }

    pub fn train_run(&self) -> TrainRunConfig {
        TrainRunConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_milestones: self.lr_milestones.clone(),
            lr_gamma: self.lr_gamma,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn method_config(&self) -> MethodConfig {
        match self.method {
            Method::Gaussian => MethodConfig::Gaussian {
                sigma: self.sigma,
                m: self.m,
            },
            Method::SmoothAdv => MethodConfig::SmoothAdv(SmoothAdvConfig {
                sigma: self.sigma,
                m: self.m,
                epsilon: self.epsilon,
                steps: self.attack_steps,
                warmup_epochs: self.warmup_epochs,
            }),
            Method::SmoothMix => MethodConfig::SmoothMix(SmoothMixConfig {
                sigma: self.sigma,
                eta: self.eta,
                attack: AttackConfig {
                    alpha_step: self.alpha_step,
                    steps: self.attack_steps,
                    epsilon_cap: None,
                },
                m: self.m,
                use_one_step: self.use_one_step,
                one_step_cap: self.one_step_cap,
            }),
        }
    }

    pub fn theory(&self, family: NoiseFamily) -> TheorySimConfig {
        TheorySimConfig {
            d: self.dims.first().copied().unwrap_or(1),
            sigma: self.theory_sigma,
            tau: self.tau,
            epsilon: self.theory_epsilon,
            p: self.p,
            family,
            trials: self.trials,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.train_run().validate()?;
        self.method_config().validate()?;
        self.smoothing().validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig("n_train and n_test must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths for inputs of dimension `d` with `classes` outputs.
    pub fn layer_dims(&self, d: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![d];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    /// Train and test splits described by the dataset keys.
    pub fn datasets(&self) -> Result<(Dataset<f64>, Dataset<f64>)> {
        let test_seed = splitmix64(self.data_seed ^ 0x7e57);
        let (train, mut test) = match self.dataset {
            DatasetKind::TwoMoons => (
                gen_two_moons(self.n_train, self.noise_std, self.data_seed)?,
                gen_two_moons(self.n_test, self.noise_std, test_seed)?,
            ),
            DatasetKind::Blobs => (
                gen_gaussian_blobs(self.n_train, &self.centers, self.spread, self.data_seed)?,
                gen_gaussian_blobs(self.n_test, &self.centers, self.spread, test_seed)?,
            ),
            DatasetKind::Mnist => (
                load_mnist_idx(&self.mnist_train_images, &self.mnist_train_labels, Some(self.n_train), self.data_seed)?,
                load_mnist_idx(&self.mnist_test_images, &self.mnist_test_labels, Some(self.n_test), self.data_seed)?,
            ),
        };
        test.split = Split::Test;
        Ok((train, test))
    }
}
