//! Experiment runner: config → data → training loop → metric traces → files.
//!
//! A run trains one model per seed and evaluates at epoch boundaries. Traces
//! go to one CSV per (rule, hyperparameters, seed); a `summary.json` with the
//! best test accuracy per run is written atomically (write-then-rename), so a
//! killed run never leaves a partial summary behind.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_epoch, EvalSettings, MetricTrace};
use crate::models::{Activation, Dln2Model, LinearModel, MlpModel, Model, ModelFamily};
use crate::optim::{step, OptimConfig, Rule};
use crate::rng::{mix_seed, stream_rng, streams};
use crate::synthdata::{
    corrupt_labels, load_cifar_binary, load_idx, read_snld, sample_mixture, sample_toy,
    LabelEncoding, LabeledDataset, MixtureConfig, ToyDataConfig,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSpec {
    /// Toy Gaussian distribution; corruption rate lives in the config.
    Toy(ToyDataConfig),
    /// Gaussian class mixture with a separate corruption rate for the train
    /// split.
    Mixture {
        #[serde(flatten)]
        config: MixtureConfig,
        #[serde(default)]
        corrupt: f64,
    },
    /// Pre-generated SNLD containers.
    File {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        corrupt: f64,
    },
    /// IDX image/label pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        corrupt: f64,
    },
    /// CIFAR-10 binary batches.
    Cifar {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        normalize: bool,
        #[serde(default)]
        corrupt: f64,
    },
}

impl DataSpec {
    /// Load or generate the `(train, test)` pair for one run seed.
    ///
    /// Generated data is re-drawn per seed (the config seed is mixed with
    /// the run seed); file-backed data is fixed, with only the corruption
    /// varying by seed.
    fn realize(&self, run_seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let corrupt_seed = mix_seed(run_seed, streams::CORRUPT);
        match self {
            DataSpec::Toy(cfg) => {
                let cfg = ToyDataConfig {
                    seed: mix_seed(cfg.seed, run_seed),
                    ..*cfg
                };
                sample_toy(&cfg)
            }
            DataSpec::Mixture { config, corrupt } => {
                let cfg = MixtureConfig {
                    seed: mix_seed(config.seed, run_seed),
                    ..*config
                };
                let (train, test) = sample_mixture(&cfg)?;
                Ok((apply_corruption(train, *corrupt, corrupt_seed)?, test))
            }
            DataSpec::File { train, test, corrupt } => {
                let tr = read_snld(train)?;
                let te = read_snld(test)?;
                Ok((apply_corruption(tr, *corrupt, corrupt_seed)?, te))
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                corrupt,
            } => {
                let tr = load_idx(train_images, train_labels)?;
                let te = load_idx(test_images, test_labels)?;
                Ok((apply_corruption(tr, *corrupt, corrupt_seed)?, te))
            }
            DataSpec::Cifar {
                train,
                test,
                normalize,
                corrupt,
            } => {
                let tr = load_cifar_binary(train, *normalize)?;
                let te = load_cifar_binary(test, *normalize)?;
                Ok((apply_corruption(tr, *corrupt, corrupt_seed)?, te))
            }
        }
    }
}

fn apply_corruption(data: LabeledDataset, corrupt: f64, seed: u64) -> Result<LabeledDataset> {
    if corrupt == 0.0 {
        return Ok(data);
    }
    let (observed, _) = corrupt_labels(data.truth_all(), data.num_classes(), corrupt, seed)?;
    data.with_observed(observed)
}

fn default_hidden() -> usize {
    500
}

fn default_init_std() -> f64 {
    0.01
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub zero_init: bool,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(family: ModelFamily) -> Self {
        Self {
            family,
            hidden: default_hidden(),
            init_std: default_init_std(),
            zero_init: false,
            activation: default_activation(),
        }
    }

    pub fn build(&self, data: &LabeledDataset, run_seed: u64) -> Result<Model> {
        let d = data.dim();
        let binary = data.encoding() == LabelEncoding::SignedBinary;
        let classes = data.num_classes();
        let mut rng = stream_rng(run_seed, streams::MODEL_INIT);
        let model = match self.family {
            ModelFamily::Linear => {
                if !binary {
                    return Err(Error::InvalidConfig(
                        "linear models need signed binary targets".into(),
                    ));
                }
                if self.zero_init {
                    Model::Linear(LinearModel::zeros(d))
                } else {
                    Model::Linear(LinearModel::random(d, self.init_std, &mut rng))
                }
            }
            ModelFamily::Dln2 => {
                if !binary {
                    return Err(Error::InvalidConfig(
                        "2-layer deep linear (scalar output) needs signed binary targets; \
                         use an identity-activation mlp for multiclass"
                            .into(),
                    ));
                }
                if self.zero_init {
                    Model::Dln2(Dln2Model::zeros(self.hidden, d))
                } else {
                    Model::Dln2(Dln2Model::random(self.hidden, d, self.init_std, &mut rng))
                }
            }
            ModelFamily::Mlp => {
                let k = if binary { 1 } else { classes };
                if self.zero_init {
                    Model::Mlp(MlpModel::zeros(self.hidden, d, k, self.activation))
                } else {
                    Model::Mlp(MlpModel::random(
                        self.hidden,
                        d,
                        k,
                        self.activation,
                        self.init_std,
                        &mut rng,
                    ))
                }
            }
        };
        Ok(model)
    }
}

fn default_eval_every() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_probe() -> usize {
    1000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub optim: OptimConfig,
    pub epochs: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Ratio metrics run on a fixed seeded subsample of this many train
    /// examples.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    /// Output directory; `None` keeps everything in memory.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be ≥ 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::InvalidConfig("probe_size must be ≥ 1".into()));
        }
        self.optim.validate()?;
        if let DataSpec::Toy(cfg) = &self.data {
            cfg.validate()?;
        }
        if let DataSpec::Mixture { config, corrupt } = &self.data {
            config.validate()?;
            if !(0.0..=1.0).contains(corrupt) {
                return Err(Error::InvalidConfig("corrupt must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| Error::InvalidConfig(format!("config JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Outcome of one (seed, rule, hyperparameters) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub rule: Rule,
    pub rho: f64,
    pub lr: f64,
    pub gamma_z: f64,
    pub gamma_v: f64,
    pub best_test_acc: f64,
    pub best_epoch: usize,
    pub final_test_acc: f64,
    pub trace_file: Option<String>,
}

fn trace_filename(cfg: &OptimConfig, seed: u64) -> String {
    match cfg.rule {
        Rule::RegSgd => format!(
            "regsgd_gz{}_gv{}_seed{}.csv",
            cfg.gamma_z, cfg.gamma_v, seed
        ),
        rule => format!("{}_rho{}_seed{}.csv", rule.name(), cfg.rho, seed),
    }
}

/// Write-then-rename so readers never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn probe_indices(n: usize, probe_size: usize, run_seed: u64) -> Vec<usize> {
    if probe_size >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(run_seed, streams::PROBE));
    idx.truncate(probe_size);
    idx.sort_unstable();
    idx
}

fn epoch_batches(n: usize, batch_size: Option<usize>, run_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    match batch_size {
        None => vec![(0..n).collect()],
        Some(b) => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream_rng(
                run_seed,
                streams::SHUFFLE_BASE + epoch as u64,
            ));
            idx.chunks(b).map(|c| c.to_vec()).collect()
        }
    }
}

/// Train one model for one seed and collect its trace.
fn run_single(cfg: &ExperimentConfig, run_seed: u64) -> Result<MetricTrace> {
    let (train, test) = cfg.data.realize(run_seed)?;
    let mut model = cfg.model.build(&train, run_seed)?;
    let probe = probe_indices(train.len(), cfg.probe_size, run_seed);
    let toy = match &cfg.data {
        DataSpec::Toy(t) => Some(*t),
        _ => None,
    };
    let settings = EvalSettings {
        optim: &cfg.optim,
        probe: &probe,
        toy: toy.as_ref(),
    };

    let mut trace = MetricTrace::new(cfg.optim.rule, cfg.optim.rho, cfg.optim.lr, run_seed);
    trace.push(evaluate_epoch(&model, &train, &test, 0, &settings)?);

    for epoch in 1..=cfg.epochs {
        for batch in epoch_batches(train.len(), cfg.optim.batch_size, run_seed, epoch) {
            model = step(&cfg.optim, &model, &train, &batch)?;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let record = evaluate_epoch(&model, &train, &test, epoch, &settings)?;
            let finite = record.test_acc.is_finite()
                && record.train_loss_clean.map_or(true, f64::is_finite)
                && record.train_loss_noisy.map_or(true, f64::is_finite)
                && model.params().iter().all(|p| p.is_finite());
            if !finite {
                return Err(Error::NonFiniteLoss { epoch });
            }
            trace.push(record);
        }
    }
    Ok(trace)
}

/// Run the experiment for every seed. Returns `(result, trace)` per seed and,
/// when an output directory is configured, writes one CSV per run plus
/// `summary.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<(RunResult, MetricTrace)>> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let trace = run_single(cfg, seed)?;
        let (best_epoch, best_test_acc) = trace.best().expect("trace has records");
        let final_test_acc = trace.records.last().expect("trace has records").test_acc;

        let trace_file = if let Some(dir) = &cfg.out {
            let name = trace_filename(&cfg.optim, seed);
            write_atomic(&dir.join(&name), trace.to_csv_string().as_bytes())?;
            Some(name)
        } else {
            None
        };

        out.push((
            RunResult {
                seed,
                rule: cfg.optim.rule,
                rho: cfg.optim.rho,
                lr: cfg.optim.lr,
                gamma_z: cfg.optim.gamma_z,
                gamma_v: cfg.optim.gamma_v,
                best_test_acc,
                best_epoch,
                final_test_acc,
                trace_file,
            },
            trace,
        ));
    }

    if let Some(dir) = &cfg.out {
        let results: Vec<&RunResult> = out.iter().map(|(r, _)| r).collect();
        let json = serde_json::to_string_pretty(&serde_json::json!({ "runs": results }))
            .expect("summary serializes");
        write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SweepGrid {
    Rho(Vec<f64>),
    /// `(gamma_z, gamma_v)` pairs.
    Gamma(Vec<(f64, f64)>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub mean_best_test_acc: f64,
    pub std_best_test_acc: f64,
    pub per_seed_best: Vec<f64>,
}

/// One run per grid point per seed. Grid-point outputs land in
/// subdirectories of `cfg.out`; the summary table goes to `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let points: Vec<(String, OptimConfig)> = match grid {
        SweepGrid::Rho(values) => {
            if values.is_empty() {
                return Err(Error::InvalidConfig("empty rho grid".into()));
            }
            values
                .iter()
                .map(|&rho| {
                    let mut o = cfg.optim;
                    o.rho = rho;
                    (format!("{rho}"), o)
                })
                .collect()
        }
        SweepGrid::Gamma(values) => {
            if values.is_empty() {
                return Err(Error::InvalidConfig("empty gamma grid".into()));
            }
            values
                .iter()
                .map(|&(gz, gv)| {
                    let mut o = cfg.optim;
                    o.gamma_z = gz;
                    o.gamma_v = gv;
                    (format!("{gz}:{gv}"), o)
                })
                .collect()
        }
    };

    let mut summary = Vec::with_capacity(points.len());
    for (label, optim) in points {
        let mut point_cfg = cfg.clone();
        point_cfg.optim = optim;
        if let Some(dir) = &cfg.out {
            point_cfg.out = Some(dir.join(sweep_dir_name(grid, &label)));
        }
        let runs = run(&point_cfg)?;
        let best: Vec<f64> = runs.iter().map(|(r, _)| r.best_test_acc).collect();
        summary.push(SweepPoint {
            label,
            mean_best_test_acc: crate::math::mean(&best),
            std_best_test_acc: crate::math::std_dev(&best),
            per_seed_best: best,
        });
    }

    if let Some(dir) = &cfg.out {
        let mut csv = String::from("value,mean_best_test_acc,std_best_test_acc,n_seeds\n");
        for p in &summary {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                p.label,
                p.mean_best_test_acc,
                p.std_best_test_acc,
                p.per_seed_best.len()
            ));
        }
        write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
    }
    Ok(summary)
}

fn sweep_dir_name(grid: &SweepGrid, label: &str) -> String {
    match grid {
        SweepGrid::Rho(_) => format!("rho{label}"),
        SweepGrid::Gamma(_) => format!("gamma{}", label.replace(':', "_")),
    }
}
