//! Synthetic benchmarks and the MNIST IDX loader.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How a dataset was produced; enough to rebuild it bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    TwoMoons {
        n: usize,
        noise_std: f64,
        seed: u64,
    },
    Blobs {
        n: usize,
        centers: Vec<Vec<f64>>,
        spread: f64,
        seed: u64,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        images_sha256: String,
        labels_sha256: String,
        subsample: Option<usize>,
        seed: u64,
    },
}

impl Provenance {
    /// Rebuilds the dataset. File-backed sources are checked against their recorded hashes.
    pub fn regenerate(&self, split: Split) -> Result<Dataset<f64>> {
        let mut ds = match self {
            Provenance::TwoMoons { n, noise_std, seed } => gen_two_moons(*n, *noise_std, *seed)?,
            Provenance::Blobs {
                n,
                centers,
                spread,
                seed,
            } => gen_gaussian_blobs(*n, centers, *spread, *seed)?,
            Provenance::Mnist {
                images,
                labels,
                images_sha256,
                labels_sha256,
                subsample,
                seed,
            } => {
                let ds = load_mnist_idx(images, labels, *subsample, *seed)?;
                if let Provenance::Mnist {
                    images_sha256: a,
                    labels_sha256: b,
                    ..
                } = &ds.provenance
                {
                    if a != images_sha256 || b != labels_sha256 {
                        return Err(Error::InvalidConfig("IDX files changed since the dataset was recorded".into()));
                    }
                }
                ds
            }
        };
        ds.split = split;
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub inputs: Vec<Vec<S>>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
    pub provenance: Provenance,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(inputs: Vec<Vec<S>>, labels: Vec<usize>, class_count: usize, split: Split, provenance: Provenance) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain {
                name: "label",
                value: bad as f64,
                domain: "[0, C)",
            });
        }
        let dim = inputs.first().map_or(0, Vec::len);
        if inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::InvalidConfig("inputs have ragged dimensions".into()));
        }
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            split,
            class_count,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[S], usize)> {
        self.inputs.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    /// First `n` points (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            inputs: self
                .inputs
                .iter()
                .map(|x| x.iter().map(|v| T::of(v.f64())).collect())
                .collect(),
            labels: self.labels.clone(),
            split: self.split,
            class_count: self.class_count,
            provenance: self.provenance.clone(),
        }
    }
}

/// Two interleaved half circles. Class 0 is the upper arc centred at the
/// origin, class 1 the lower arc centred at `(1, 0.5)`; class 0 gets `n / 2`
/// points. Points are shuffled after jitter.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset<f64>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Domain {
            name: "noise_std",
            value: noise_std,
            domain: "[0, inf)",
        });
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let arc = |k: usize, count: usize| if count > 1 { PI * k as f64 / (count - 1) as f64 } else { 0.0 };
    let mut points: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for k in 0..n_out {
        let t = arc(k, n_out);
        points.push((vec![t.cos(), t.sin()], 0));
    }
    for k in 0..n_in {
        let t = arc(k, n_in);
        points.push((vec![1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = Stream::new(seed, "two_moons", 0).rng();
    if noise_std > 0.0 {
        for (p, _) in &mut points {
            for v in p.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_std * z;
            }
        }
    }
    points.shuffle(&mut rng);
    let (inputs, labels) = points.into_iter().unzip();
    Dataset::new(inputs, labels, 2, Split::Train, Provenance::TwoMoons { n, noise_std, seed })
}

/// Isotropic Gaussian clusters; point `i` belongs to center `i mod k`.
pub fn gen_gaussian_blobs(n: usize, centers: &[Vec<f64>], spread: f64, seed: u64) -> Result<Dataset<f64>> {
    if centers.len() < 2 {
        return Err(Error::InvalidConfig("blobs need at least two centers".into()));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidConfig("blob centers must share a positive dimension".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Domain {
            name: "spread",
            value: spread,
            domain: "[0, inf)",
        });
    }
    let mut rng = Stream::new(seed, "blobs", 0).rng();
    let k = centers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = &centers[i % k];
        inputs.push(
            c.iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + spread * z
                })
                .collect(),
        );
        labels.push(i % k);
    }
    Dataset::new(
        inputs,
        labels,
        k,
        Split::Train,
        Provenance::Blobs {
            n,
            centers: centers.to_vec(),
            spread,
            seed,
        },
    )
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    Ok(hex::encode(Sha256::digest(&raw)))
}

/// Parsed IDX file: dimension sizes and the unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Reads an unsigned-byte IDX file (optionally gzip-compressed) and checks its magic.
pub fn read_idx(path: &Path, expected_magic: u32) -> Result<Idx> {
    let bytes = read_bytes(path)?;
    let truncated = |expected: usize| Error::TruncatedPayload {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            expected: expected_magic,
            actual: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: payload,
            actual: bytes.len() - header,
        });
    }
    Ok(Idx {
        dims,
        data: bytes[header..header + payload].to_vec(),
    })
}

/// Writes an uncompressed unsigned-byte IDX file. `magic`'s low byte must equal `dims.len()`.
pub fn write_idx(path: &Path, magic: u32, dims: &[usize], data: &[u8]) -> Result<()> {
    if (magic & 0xff) as usize != dims.len() || dims.iter().product::<usize>() != data.len() {
        return Err(Error::InvalidConfig("IDX header does not describe the payload".into()));
    }
    let mut f = File::create(path)?;
    f.write_all(&magic.to_be_bytes())?;
    for &d in dims {
        f.write_all(&(d as u32).to_be_bytes())?;
    }
    f.write_all(data)?;
    Ok(())
}

/// Loads an MNIST-style image/label pair with pixels scaled to `[0, 1]`.
///
/// With `subsample = Some(s)`, `s` points are drawn without replacement with
/// per-class quotas within one of `s * n_c / n` (largest-remainder rounding),
/// deterministic per `seed`, and returned in file order.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, subsample: Option<usize>, seed: u64) -> Result<Dataset<f64>> {
    let images = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let labels = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    let count = images.dims[0];
    if count != labels.dims[0] {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.dims[0],
        });
    }
    let pixels: usize = images.dims[1..].iter().product();
    let labels_u: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let class_count = labels_u.iter().max().map_or(0, |m| m + 1).max(10);

    let keep = match subsample {
        Some(s) if s < count => stratified_indices(&labels_u, class_count, s, seed),
        _ => (0..count).collect(),
    };
    let inputs = keep
        .iter()
        .map(|&i| {
            images.data[i * pixels..(i + 1) * pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    let labels_kept = keep.iter().map(|&i| labels_u[i]).collect();
    Dataset::new(
        inputs,
        labels_kept,
        class_count,
        Split::Train,
        Provenance::Mnist {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
            images_sha256: sha256_hex(images_path)?,
            labels_sha256: sha256_hex(labels_path)?,
            subsample,
            seed,
        },
    )
}

/// Per-class quotas by largest remainder (ties to the lower class), then a
/// seeded shuffle inside each class. Returned indices are sorted.
pub fn stratified_indices(labels: &[usize], class_count: usize, size: usize, seed: u64) -> Vec<usize> {
    let total = labels.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let exact: Vec<f64> = by_class
        .iter()
        .map(|v| size as f64 * v.len() as f64 / total as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut rest = size - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..class_count).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in &order {
        if rest == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            rest -= 1;
        }
    }
    let mut keep = Vec::with_capacity(size);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let mut rng = Stream::new(seed, "stratify", c as u64).rng();
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..quota[c]]);
    }
    keep.sort_unstable();
    keep
}
