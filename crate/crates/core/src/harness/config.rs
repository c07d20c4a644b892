//! Experiment configuration.
//!
//! An experiment is described by one TOML file with four sections:
//! where the data comes from (`[data]`), how the classifier is built
//! (`[model]`), the attack parameters (`[attack]`), and what to run
//! (`[eval]`). The last two are optional, with every field defaulted.
//! Unknown keys are rejected everywhere so that a typo cannot silently
//! fall back to a default.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attack::{AttackConfig, AttackMode, GuideHeuristic, ObjectiveKind};
use crate::dataset::{filter_binary, gen_gaussian_blobs, gen_moons, load_csv, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::features::{AffineMap, FeatureMap, LayerHandle, Mlp};
use crate::knn::{KnnModel, Metric, ModelLayer};

/// Top-level experiment description.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub attack: AttackParams,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Where the train and test sets come from.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic Gaussian blobs; the test set reuses the centers with
    /// the seed bumped by one.
    Blobs {
        seed: u64,
        centers: Vec<Vec<f64>>,
        std: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// Two interleaved half-moons.
    Moons {
        seed: u64,
        noise_std: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// CSV files, one sample per line, label last. Both files must use
    /// the same dense `0..c` label set.
    Csv { train: PathBuf, test: PathBuf },
    /// IDX image/label file pairs, optionally reduced to a balanced
    /// two-class subset.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Divide pixel bytes by 255; on unless the bytes are already
        /// zeros and ones.
        #[serde(default = "default_scale")]
        scale: bool,
        #[serde(default)]
        filter: Option<FilterSpec>,
    },
}

/// Balanced two-class reduction of a labeled set: keep the first
/// `per_class` samples of each of the two original labels, remapped to
/// 0 and 1.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub a: usize,
    pub b: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

fn default_scale() -> bool {
    true
}

impl DataConfig {
    /// Materializes the (train, test) pair.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Blobs {
                seed,
                centers,
                std,
                train_per_class,
                test_per_class,
            } => {
                let train = gen_gaussian_blobs(*seed, centers, *std, *train_per_class)?;
                let test =
                    gen_gaussian_blobs(seed.wrapping_add(1), centers, *std, *test_per_class)?;
                Ok((train, test))
            }
            DataConfig::Moons {
                seed,
                noise_std,
                train_per_class,
                test_per_class,
            } => {
                let train = gen_moons(*seed, *noise_std, *train_per_class)?;
                let test = gen_moons(seed.wrapping_add(1), *noise_std, *test_per_class)?;
                Ok((train, test))
            }
            DataConfig::Csv { train, test } => {
                let train = load_csv(train)?;
                let test = load_csv(test)?;
                if train.num_classes() != test.num_classes() {
                    return Err(Error::Config(format!(
                        "train has {} classes but test has {}; both files must \
                         cover the same label set",
                        train.num_classes(),
                        test.num_classes()
                    )));
                }
                Ok((train, test))
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                scale,
                filter,
            } => {
                let mut train = load_idx(train_images, train_labels, *scale)?;
                let mut test = load_idx(test_images, test_labels, *scale)?;
                if let Some(f) = filter {
                    train = filter_binary(&train, f.a, f.b, f.train_per_class)?;
                    test = filter_binary(&test, f.a, f.b, f.test_per_class)?;
                }
                Ok((train, test))
            }
        }
    }
}

/// How to assemble the classifier.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// Feature network file; raw inputs when absent.
    #[serde(default)]
    pub mlp: Option<PathBuf>,
    /// Pooled-PCA map file; requires `mlp`.
    #[serde(default)]
    pub affine: Option<PathBuf>,
    /// Which layers to vote over; sensible defaults per feature map.
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

/// One voting layer; the metric defaults to the model metric.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub index: usize,
    #[serde(default)]
    pub pre_activation: bool,
    #[serde(default)]
    pub metric: Option<Metric>,
}

fn default_metric() -> Metric {
    Metric::Euclidean
}

impl ModelConfig {
    /// Loads any referenced model files and builds the classifier over
    /// `train`.
    pub fn build(&self, train: Dataset) -> Result<KnnModel> {
        let map = match (&self.mlp, &self.affine) {
            (None, None) => FeatureMap::identity(train.dim()),
            (Some(mlp), None) => FeatureMap::Mlp(Mlp::load(mlp)?),
            (Some(mlp), Some(affine)) => FeatureMap::Affine {
                mlp: Mlp::load(mlp)?,
                map: AffineMap::load(affine)?,
            },
            (None, Some(_)) => {
                return Err(Error::Config(
                    "an affine map needs the mlp it was fitted over".into(),
                ));
            }
        };
        let layers = match &self.layers {
            Some(specs) => specs
                .iter()
                .map(|s| ModelLayer {
                    handle: LayerHandle {
                        index: s.index,
                        pre_activation: s.pre_activation,
                    },
                    metric: s.metric.unwrap_or(self.metric),
                })
                .collect(),
            None => map
                .default_layers()
                .into_iter()
                .map(|handle| ModelLayer {
                    handle,
                    metric: self.metric,
                })
                .collect::<Vec<_>>(),
        };
        KnnModel::new(train, map, layers, self.k)
    }
}

/// Attack parameters; every field has the library default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    /// Guide count; derived from k when absent.
    pub m: Option<usize>,
    pub refresh_period: usize,
    pub restarts: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub rms_decay: f64,
    pub margin: f64,
    pub bs_steps: usize,
    pub c_init: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    pub noise_std: f64,
    pub check_period: usize,
    pub heuristic: GuideHeuristic,
    pub objective: ObjectiveKind,
    /// Force this class instead of any wrong class.
    pub target_class: Option<usize>,
    /// Require the winning class to take at least this vote fraction.
    pub min_vote_fraction: Option<f64>,
}

impl Default for AttackParams {
    fn default() -> Self {
        let base = AttackConfig::default();
        AttackParams {
            m: None,
            refresh_period: base.refresh_period,
            restarts: base.restarts,
            max_steps: base.max_steps,
            lr: base.lr,
            rms_decay: base.rms_decay,
            margin: base.margin,
            bs_steps: base.bs_steps,
            c_init: base.c_init,
            c_lo: base.c_lo,
            c_hi: base.c_hi,
            noise_std: base.noise_std,
            check_period: base.check_period,
            heuristic: base.heuristic,
            objective: base.objective,
            target_class: None,
            min_vote_fraction: None,
        }
    }
}

impl AttackParams {
    pub fn mode(&self) -> Result<AttackMode> {
        match (self.target_class, self.min_vote_fraction) {
            (Some(_), Some(_)) => Err(Error::Config(
                "target_class and min_vote_fraction are mutually exclusive".into(),
            )),
            (Some(t), None) => Ok(AttackMode::Targeted(t)),
            (None, Some(f)) => Ok(AttackMode::Credibility(f)),
            (None, None) => Ok(AttackMode::Untargeted),
        }
    }

    /// The main attack configuration for a model with the given k.
    pub fn to_config(&self, k: usize, seed: u64) -> Result<AttackConfig> {
        Ok(AttackConfig {
            m: self.m.unwrap_or_else(|| AttackConfig::for_k(k).m),
            refresh_period: self.refresh_period,
            restarts: self.restarts,
            max_steps: self.max_steps,
            lr: self.lr,
            rms_decay: self.rms_decay,
            margin: self.margin,
            bs_steps: self.bs_steps,
            c_init: self.c_init,
            c_lo: self.c_lo,
            c_hi: self.c_hi,
            noise_std: self.noise_std,
            check_period: self.check_period,
            heuristic: self.heuristic,
            objective: self.objective,
            mode: self.mode()?,
            seed,
        })
    }

    /// The reference attack configuration: its own optimizer defaults,
    /// but the same search budget and mode as the main attack.
    pub fn to_baseline_config(&self, k: usize, seed: u64) -> Result<AttackConfig> {
        Ok(AttackConfig {
            max_steps: self.max_steps,
            bs_steps: self.bs_steps,
            c_init: self.c_init,
            c_lo: self.c_lo,
            c_hi: self.c_hi,
            mode: self.mode()?,
            seed,
            ..AttackConfig::sw_baseline(k)
        })
    }
}

/// What to evaluate and how.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed from which all per-sample seeds are derived.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; results do not depend on the count.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Cap on the number of test samples; all of them when absent.
    #[serde(default)]
    pub num_samples: Option<usize>,
    /// Also run the reference attack on every sample.
    #[serde(default)]
    pub with_baseline: bool,
    /// Also run the exhaustive search on every sample (plain euclidean
    /// models only).
    #[serde(default)]
    pub with_oracle: bool,
    /// Include wall-clock fields in the report. Off by default so that
    /// reports are byte-identical across runs.
    #[serde(default)]
    pub record_timing: bool,
}

fn default_workers() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: default_workers(),
            num_samples: None,
            with_baseline: false,
            with_oracle: false,
            record_timing: false,
        }
    }
}

/// Parses an experiment description from TOML text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.eval.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    Ok(cfg)
}

/// Reads and parses an experiment description file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    parse_config(&text)
}
