//! Dataset generation, label corruption, and desk-scale ingestion.

mod cifar;
mod container;
mod idx;

pub use cifar::{load_cifar_binary, CIFAR_CHANNEL_MEAN, CIFAR_CHANNEL_STD};
pub use container::{read_snld, write_snld};
pub use idx::load_idx;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, stream_rng, streams};

/// How class labels are encoded in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelEncoding {
    /// Binary labels in {−1, +1}; used by scalar-output models.
    SignedBinary,
    /// Class indices in `0..num_classes`.
    ClassIndex { num_classes: usize },
}

impl LabelEncoding {
    pub fn num_classes(&self) -> usize {
        match self {
            LabelEncoding::SignedBinary => 2,
            LabelEncoding::ClassIndex { num_classes } => *num_classes,
        }
    }

    fn check_label(&self, label: i64) -> Result<()> {
        let ok = match self {
            LabelEncoding::SignedBinary => label == 1 || label == -1,
            LabelEncoding::ClassIndex { num_classes } => {
                label >= 0 && (label as usize) < *num_classes
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLabel {
                label,
                expected: match self {
                    LabelEncoding::SignedBinary => "±1 (signed binary)".to_string(),
                    LabelEncoding::ClassIndex { num_classes } => {
                        format!("class index in 0..{num_classes}")
                    }
                },
            })
        }
    }
}

/// A fixed design matrix with observed (possibly corrupted) targets, the
/// underlying true targets, and the clean/noisy mask derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>, // row-major n×d
    n: usize,
    d: usize,
    observed: Vec<i64>,
    truth: Vec<i64>,
    clean: Vec<bool>,
    encoding: LabelEncoding,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<f64>,
        n: usize,
        d: usize,
        observed: Vec<i64>,
        truth: Vec<i64>,
        encoding: LabelEncoding,
    ) -> Result<Self> {
        if inputs.len() != n * d {
            return Err(Error::DimMismatch {
                what: "dataset inputs",
                expected: n * d,
                got: inputs.len(),
            });
        }
        if observed.len() != n || truth.len() != n {
            return Err(Error::DimMismatch {
                what: "dataset targets",
                expected: n,
                got: observed.len().min(truth.len()),
            });
        }
        for &t in observed.iter().chain(truth.iter()) {
            encoding.check_label(t)?;
        }
        let clean = observed
            .iter()
            .zip(&truth)
            .map(|(o, t)| o == t)
            .collect();
        Ok(Self {
            inputs,
            n,
            d,
            observed,
            truth,
            clean,
            encoding,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn encoding(&self) -> LabelEncoding {
        self.encoding
    }

    pub fn num_classes(&self) -> usize {
        self.encoding.num_classes()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    pub fn inputs_flat(&self) -> &[f64] {
        &self.inputs
    }

    pub fn observed(&self, i: usize) -> i64 {
        self.observed[i]
    }

    pub fn truth(&self, i: usize) -> i64 {
        self.truth[i]
    }

    pub fn observed_all(&self) -> &[i64] {
        &self.observed
    }

    pub fn truth_all(&self) -> &[i64] {
        &self.truth
    }

    pub fn is_clean(&self, i: usize) -> bool {
        self.clean[i]
    }

    pub fn clean_mask(&self) -> &[bool] {
        &self.clean
    }

    pub fn n_noisy(&self) -> usize {
        self.clean.iter().filter(|&&c| !c).count()
    }

    pub fn n_clean(&self) -> usize {
        self.n - self.n_noisy()
    }

    /// Replace the observed targets (e.g. after corruption); the clean mask
    /// is re-derived.
    pub fn with_observed(&self, observed: Vec<i64>) -> Result<Self> {
        Self::new(
            self.inputs.clone(),
            self.n,
            self.d,
            observed,
            self.truth.clone(),
            self.encoding,
        )
    }
}

/// Two-cluster toy distribution: the first coordinate carries the signal
/// `y·B`, the remaining `d−1` coordinates are isotropic Gaussian noise with
/// per-coordinate variance `γ²/(d−1)`, and a `noise_rate` fraction of the
/// training targets is sign-flipped.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ToyDataConfig {
    pub signal_b: f64,
    pub gamma: f64,
    pub dim: usize,
    pub noise_rate: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    /// The desk-scale defaults: Δ=0.4, B=2, γ=1, d=1000, 500 train / 1000
    /// test points.
    fn default() -> Self {
        Self {
            signal_b: 2.0,
            gamma: 1.0,
            dim: 1000,
            noise_rate: 0.4,
            n_train: 500,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl ToyDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "toy dim must be ≥ 2, got {}",
                self.dim
            )));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::InvalidConfig(format!(
                "noise_rate must lie in [0, 0.5) so the clean majority dominates, got {}",
                self.noise_rate
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be finite and ≥ 0, got {}",
                self.gamma
            )));
        }
        if !self.signal_b.is_finite() {
            return Err(Error::InvalidConfig("signal_b must be finite".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig(
                "n_train and n_test must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sample the toy distribution. Train targets carry exactly
/// `round(noise_rate · n_train)` sign flips; test targets are noiseless.
///
/// Labels, input noise, and corruption use three independent RNG streams of
/// `seed`, so changing `noise_rate` never changes the inputs.
pub fn sample_toy(cfg: &ToyDataConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let mut label_rng = stream_rng(cfg.seed, streams::TOY_LABELS);
    let mut noise_rng = stream_rng(cfg.seed, streams::TOY_NOISE);

    let coord_std = if cfg.dim > 1 {
        cfg.gamma / ((cfg.dim - 1) as f64).sqrt()
    } else {
        0.0
    };

    let mut sample_split = |n: usize| -> (Vec<f64>, Vec<i64>) {
        let mut inputs = Vec::with_capacity(n * cfg.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y: i64 = if label_rng.gen::<bool>() { 1 } else { -1 };
            let yf = y as f64;
            inputs.push(yf * cfg.signal_b);
            for _ in 1..cfg.dim {
                let z: f64 = noise_rng.sample(StandardNormal);
                inputs.push(yf * coord_std * z);
            }
            labels.push(y);
        }
        (inputs, labels)
    };

    let (train_inputs, train_truth) = sample_split(cfg.n_train);
    let (test_inputs, test_truth) = sample_split(cfg.n_test);

    let (train_observed, _) = corrupt_labels(
        &train_truth,
        2,
        cfg.noise_rate,
        mix_seed(cfg.seed, streams::CORRUPT),
    )?;

    let train = LabeledDataset::new(
        train_inputs,
        cfg.n_train,
        cfg.dim,
        train_observed,
        train_truth,
        LabelEncoding::SignedBinary,
    )?;
    let test = LabeledDataset::new(
        test_inputs,
        cfg.n_test,
        cfg.dim,
        test_truth.clone(),
        test_truth,
        LabelEncoding::SignedBinary,
    )?;
    Ok((train, test))
}

/// Corrupt exactly `round(delta · n)` labels, chosen uniformly without
/// replacement (seeded shuffle prefix). Binary ±1 labels are sign-flipped;
/// class indices are replaced by a uniform draw over the `K−1` wrong classes
/// (index mapped around the true class, no rejection loop).
///
/// Returns the corrupted labels and the clean mask (`corrupted == original`).
pub fn corrupt_labels(
    targets: &[i64],
    num_classes: usize,
    delta: f64,
    seed: u64,
) -> Result<(Vec<i64>, Vec<bool>)> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "corruption needs at least 2 classes, got {num_classes}"
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidConfig(format!(
            "corruption rate must lie in [0, 1], got {delta}"
        )));
    }
    let signed = num_classes == 2 && targets.iter().any(|&t| t < 0);
    let encoding = if signed {
        LabelEncoding::SignedBinary
    } else {
        LabelEncoding::ClassIndex { num_classes }
    };
    for &t in targets {
        encoding.check_label(t)?;
    }

    let n = targets.len();
    let k_corrupt = (delta * n as f64).round() as usize;
    let mut rng = stream_rng(seed, streams::CORRUPT);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut corrupted = targets.to_vec();
    for &i in order.iter().take(k_corrupt) {
        corrupted[i] = if signed {
            -targets[i]
        } else {
            // uniform over the wrong classes: draw in 0..K−1, skip the truth
            let j = rng.gen_range(0..num_classes - 1) as i64;
            if j < targets[i] {
                j
            } else {
                j + 1
            }
        };
    }
    let mask = corrupted
        .iter()
        .zip(targets)
        .map(|(c, t)| c == t)
        .collect();
    Ok((corrupted, mask))
}

/// Gaussian class-mixture generator for desk-scale multiclass runs.
///
/// Class means are random directions of length `separation`, confined to the
/// first `signal_dims` coordinates. Within-class noise is axis-aligned:
/// signal coordinates have std `intra_std`; the remaining coordinates decay
/// as `intra_std · (j+2)^(−spectrum_decay/2)` (indexing from the first tail
/// coordinate). The low-variance tail carries no class signal, so fitting a
/// corrupted label has to use it — the memorization channel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
    pub intra_std: f64,
    pub spectrum_decay: f64,
    /// Class means live in the first `signal_dims` coordinates (0 = all of
    /// them); the remaining low-variance coordinates carry no signal and are
    /// what label memorization has to use.
    #[serde(default)]
    pub signal_dims: usize,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            n_train: 3000,
            n_test: 2000,
            separation: 1.0,
            intra_std: 1.0,
            spectrum_decay: 1.0,
            signal_dims: 0,
            seed: 0,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("mixture needs ≥ 2 classes".into()));
        }
        if self.dim == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig(
                "mixture dim and sample counts must be positive".into(),
            ));
        }
        if !(self.separation.is_finite() && self.intra_std.is_finite() && self.separation >= 0.0 && self.intra_std >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "mixture separation and intra_std must be finite and ≥ 0".into(),
            ));
        }
        if self.signal_dims > self.dim {
            return Err(Error::InvalidConfig(format!(
                "signal_dims {} exceeds dim {}",
                self.signal_dims, self.dim
            )));
        }
        Ok(())
    }
}

/// Sample the class mixture; both splits come back uncorrupted (apply
/// [`corrupt_labels`] to the train split for label-noise runs).
pub fn sample_mixture(cfg: &MixtureConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let mut means_rng = stream_rng(cfg.seed, streams::MIXTURE_MEANS);
    let mut label_rng = stream_rng(cfg.seed, streams::MIXTURE_LABELS);
    let mut noise_rng = stream_rng(cfg.seed, streams::MIXTURE_NOISE);

    let signal_dims = if cfg.signal_dims == 0 {
        cfg.dim
    } else {
        cfg.signal_dims
    };
    let mut means = vec![0.0f64; cfg.num_classes * cfg.dim];
    for k in 0..cfg.num_classes {
        let row = &mut means[k * cfg.dim..(k + 1) * cfg.dim];
        let mut norm = 0.0;
        for m in row.iter_mut().take(signal_dims) {
            *m = means_rng.sample(StandardNormal);
            norm += *m * *m;
        }
        let norm = norm.sqrt();
        if norm > 0.0 {
            for m in row.iter_mut() {
                *m *= cfg.separation / norm;
            }
        }
    }

    let coord_std: Vec<f64> = (0..cfg.dim)
        .map(|j| {
            if j < signal_dims {
                cfg.intra_std
            } else {
                cfg.intra_std
                    * ((j - signal_dims + 2) as f64).powf(-cfg.spectrum_decay / 2.0)
            }
        })
        .collect();

    let mut sample_split = |n: usize| -> (Vec<f64>, Vec<i64>) {
        let mut inputs = Vec::with_capacity(n * cfg.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = label_rng.gen_range(0..cfg.num_classes);
            let mu = &means[y * cfg.dim..(y + 1) * cfg.dim];
            for j in 0..cfg.dim {
                let z: f64 = noise_rng.sample(StandardNormal);
                inputs.push(mu[j] + coord_std[j] * z);
            }
            labels.push(y as i64);
        }
        (inputs, labels)
    };

    let (train_inputs, train_truth) = sample_split(cfg.n_train);
    let (test_inputs, test_truth) = sample_split(cfg.n_test);
    let enc = LabelEncoding::ClassIndex {
        num_classes: cfg.num_classes,
    };
    let train = LabeledDataset::new(
        train_inputs,
        cfg.n_train,
        cfg.dim,
        train_truth.clone(),
        train_truth,
        enc,
    )?;
    let test = LabeledDataset::new(
        test_inputs,
        cfg.n_test,
        cfg.dim,
        test_truth.clone(),
        test_truth,
        enc,
    )?;
    Ok((train, test))
}
