//! Datasets, experiment configuration files, and report serialization.
//!
//! Configs are single JSON documents parsed strictly: unknown keys are
//! rejected and every violation is reported with its key path. All loaders
//! are deterministic; config validation always completes before any training
//! compute or file output starts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Aggregation, LabelBatch, Reduction};
use crate::model::{load_checkpoint, NetworkParams};
use crate::optim::{OptimizerConfig, OptimizerKind, Schedule};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use crate::trainer::{
    CohortConfig, DistillRuntime, ExperimentReport, MemberSpec, Mode, UpdateRule,
};
use crate::Real;

/// A classification dataset split into train and test.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_x: Tensor,
    pub train_y: LabelBatch,
    pub test_x: Tensor,
    pub test_y: LabelBatch,
    pub provenance: String,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train_x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.train_y.num_classes()
    }

    pub fn n_train(&self) -> usize {
        self.train_x.rows()
    }

    pub fn n_test(&self) -> usize {
        self.test_x.rows()
    }
}

/// One split of features and labels, e.g. from a pair of IDX files.
#[derive(Clone, Debug)]
pub struct DatasetHalf {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Synthetic dataset families.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian clusters at seeded random centers.
    Blobs,
    /// Interleaved 2-D spiral arms with angular noise.
    Spiral,
}

// Spiral geometry: each arm winds SPIRAL_TURN radians between the inner
// radius and 1. Arms of adjacent classes are offset by 2*pi/classes, so
// angular noise creates genuine class overlap near the center.
const SPIRAL_TURN: Real = 11.0;
const SPIRAL_INNER: Real = 0.08;

fn balanced_counts(total: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| total / classes + usize::from(c < total % classes))
        .collect()
}

/// Generates a balanced synthetic dataset, deterministic in `seed`.
///
/// Per class, train and test points are drawn from one pool and split by a
/// seeded shuffle, so the two sides are disjoint by construction. Features
/// are standardized per dimension with train-split statistics.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n_train: usize,
    n_test: usize,
    classes: usize,
    noise_std: Real,
    seed: u64,
) -> Result<Dataset> {
    gen_synthetic_dim(kind, n_train, n_test, classes, noise_std, seed, 2)
}

/// [`gen_synthetic`] with an explicit feature dimension (blobs only; the
/// spiral is inherently 2-D).
pub fn gen_synthetic_dim(
    kind: SyntheticKind,
    n_train: usize,
    n_test: usize,
    classes: usize,
    noise_std: Real,
    seed: u64,
    dim: usize,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "dataset.params.classes: need >= 2, got {classes}"
        )));
    }
    if n_train < classes || n_test < classes {
        return Err(Error::InvalidArgument(format!(
            "dataset.params: each split needs at least one sample per class \
             (train {n_train}, test {n_test}, classes {classes})"
        )));
    }
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument(
            "dataset.params.noise_std: must be >= 0".into(),
        ));
    }
    let dim = match kind {
        SyntheticKind::Spiral => 2,
        SyntheticKind::Blobs => {
            if dim < 1 {
                return Err(Error::InvalidArgument(
                    "dataset.params.dim: must be >= 1".into(),
                ));
            }
            dim
        }
    };

    let centers: Vec<Vec<Real>> = match kind {
        SyntheticKind::Blobs => {
            let mut rng = rng_from(&[seed, 0xB10B5]);
            (0..classes)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect()
        }
        SyntheticKind::Spiral => Vec::new(),
    };

    let train_counts = balanced_counts(n_train, classes);
    let test_counts = balanced_counts(n_test, classes);
    let mut train_pts: Vec<(Vec<Real>, usize)> = Vec::with_capacity(n_train);
    let mut test_pts: Vec<(Vec<Real>, usize)> = Vec::with_capacity(n_test);

    for c in 0..classes {
        let total = train_counts[c] + test_counts[c];
        let mut rng = rng_from(&[seed, c as u64, 0x90147]);
        let mut points: Vec<Vec<Real>> = Vec::with_capacity(total);
        match kind {
            SyntheticKind::Spiral => {
                let base_angle =
                    2.0 * std::f64::consts::PI as Real * c as Real / classes as Real;
                for i in 0..total {
                    let frac = (i as Real + 0.5) / total as Real;
                    let radius = SPIRAL_INNER + (1.0 - SPIRAL_INNER) * frac;
                    let eps: Real = StandardNormal.sample(&mut rng);
                    let angle = base_angle + frac * SPIRAL_TURN + noise_std * eps;
                    points.push(vec![radius * angle.cos(), radius * angle.sin()]);
                }
            }
            SyntheticKind::Blobs => {
                let normal = Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
                for _ in 0..total {
                    points.push(
                        centers[c]
                            .iter()
                            .map(|&ctr| {
                                if noise_std == 0.0 {
                                    ctr
                                } else {
                                    ctr + normal.sample(&mut rng)
                                }
                            })
                            .collect(),
                    );
                }
            }
        }
        let mut split_rng = rng_from(&[seed, c as u64, 0x5417]);
        points.shuffle(&mut split_rng);
        for (i, p) in points.into_iter().enumerate() {
            if i < train_counts[c] {
                train_pts.push((p, c));
            } else {
                test_pts.push((p, c));
            }
        }
    }

    // Interleave classes deterministically so mini-batches before the first
    // shuffle are not class-sorted.
    let mut order_rng = rng_from(&[seed, 0x0D0E]);
    train_pts.shuffle(&mut order_rng);
    test_pts.shuffle(&mut order_rng);

    let to_tensors = |pts: &[(Vec<Real>, usize)]| -> (Vec<Real>, Vec<usize>) {
        let mut xs = Vec::with_capacity(pts.len() * dim);
        let mut ys = Vec::with_capacity(pts.len());
        for (p, c) in pts {
            xs.extend_from_slice(p);
            ys.push(*c);
        }
        (xs, ys)
    };
    let (mut train_xs, train_ys) = to_tensors(&train_pts);
    let (mut test_xs, test_ys) = to_tensors(&test_pts);

    // Standardize with train statistics.
    for d in 0..dim {
        let n = train_pts.len();
        let mean: Real = train_xs.iter().skip(d).step_by(dim).sum::<Real>() / n as Real;
        let var: Real = train_xs
            .iter()
            .skip(d)
            .step_by(dim)
            .map(|&x| (x - mean) * (x - mean))
            .sum::<Real>()
            / n as Real;
        let std = var.sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        for x in train_xs.iter_mut().skip(d).step_by(dim) {
            *x = (*x - mean) * scale;
        }
        for x in test_xs.iter_mut().skip(d).step_by(dim) {
            *x = (*x - mean) * scale;
        }
    }

    let kind_name = match kind {
        SyntheticKind::Blobs => "blobs",
        SyntheticKind::Spiral => "spiral",
    };
    Ok(Dataset {
        train_x: Tensor::matrix(train_pts.len(), dim, train_xs),
        train_y: LabelBatch::new(train_ys, classes)?,
        test_x: Tensor::matrix(test_pts.len(), dim, test_xs),
        test_y: LabelBatch::new(test_ys, classes)?,
        provenance: format!(
            "{kind_name} classes={classes} n={n_train}/{n_test} noise={noise_std} seed={seed} standardized"
        ),
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.display().to_string(),
            expected: off + 4,
            got: bytes.len(),
        })
}

/// Loads one split from an IDX image/label file pair.
///
/// Images must carry magic `0x00000803` (u8, 3 dims), labels `0x00000801`
/// (u8, 1 dim), with big-endian dimension sizes. Images are flattened
/// row-major to `rows*cols` features, scaled by 1/255 when `normalize`.
pub fn load_idx(images_path: &Path, labels_path: &Path, normalize: bool) -> Result<DatasetHalf> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let img_magic = idx_u32(&img, 0, images_path)?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            path: images_path.display().to_string(),
            found: img_magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = idx_u32(&img, 4, images_path)? as usize;
    let rows = idx_u32(&img, 8, images_path)? as usize;
    let cols = idx_u32(&img, 12, images_path)? as usize;
    let expected_img = 16 + n * rows * cols;
    if img.len() < expected_img {
        return Err(Error::IdxTruncated {
            path: images_path.display().to_string(),
            expected: expected_img,
            got: img.len(),
        });
    }
    if img.len() > expected_img {
        return Err(Error::InvalidArgument(format!(
            "idx: {} has {} trailing bytes",
            images_path.display(),
            img.len() - expected_img
        )));
    }

    let lab_magic = idx_u32(&lab, 0, labels_path)?;
    if lab_magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            path: labels_path.display().to_string(),
            found: lab_magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_lab = idx_u32(&lab, 4, labels_path)? as usize;
    let expected_lab = 8 + n_lab;
    if lab.len() < expected_lab {
        return Err(Error::IdxTruncated {
            path: labels_path.display().to_string(),
            expected: expected_lab,
            got: lab.len(),
        });
    }
    if lab.len() > expected_lab {
        return Err(Error::InvalidArgument(format!(
            "idx: {} has {} trailing bytes",
            labels_path.display(),
            lab.len() - expected_lab
        )));
    }
    if n != n_lab {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: n_lab,
        });
    }

    let scale: Real = if normalize { 1.0 / 255.0 } else { 1.0 };
    let features: Vec<Real> = img[16..].iter().map(|&b| Real::from(b) * scale).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    Ok(DatasetHalf {
        features: Tensor::matrix(n, rows * cols, features),
        labels,
    })
}

/// Combines two IDX halves into a dataset; the class count is the largest
/// label seen plus one.
pub fn dataset_from_idx(train: DatasetHalf, test: DatasetHalf, note: String) -> Result<Dataset> {
    if train.features.cols() != test.features.cols() {
        return Err(Error::ShapeMismatch {
            op: "idx_dataset",
            lhs: train.features.shape().to_vec(),
            rhs: test.features.shape().to_vec(),
        });
    }
    let m = train
        .labels
        .iter()
        .chain(&test.labels)
        .max()
        .map(|&v| v + 1)
        .unwrap_or(0);
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "idx dataset needs >= 2 classes, found {m}"
        )));
    }
    Ok(Dataset {
        train_y: LabelBatch::new(train.labels, m)?,
        train_x: train.features,
        test_y: LabelBatch::new(test.labels, m)?,
        test_x: test.features,
        provenance: note,
    })
}

// ---------------------------------------------------------------------------
// Experiment configuration files
// ---------------------------------------------------------------------------

fn default_true() -> bool {
    true
}

fn default_batch_size() -> usize {
    64
}

fn default_epochs() -> u32 {
    200
}

fn default_out_dir() -> String {
    "out".into()
}

fn default_opt_kind() -> String {
    "sgd_nesterov".into()
}

fn default_temperature() -> Real {
    1.0
}

fn default_sigmas() -> Vec<Real> {
    vec![0.01, 0.02, 0.05, 0.1]
}

fn default_trials() -> usize {
    100
}

fn default_topk() -> usize {
    5
}

/// Optimizer section of the config file. Which optional fields are legal
/// depends on `kind`; [`FileOptimizer::resolve`] enforces that.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileOptimizer {
    #[serde(default = "default_opt_kind")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<Real>,
}

impl Default for FileOptimizer {
    fn default() -> Self {
        FileOptimizer {
            kind: default_opt_kind(),
            lr: None,
            momentum: None,
            beta1: None,
            beta2: None,
            eps: None,
            weight_decay: None,
        }
    }
}

impl FileOptimizer {
    fn resolve(&self) -> Result<OptimizerConfig> {
        let reject = |field: &str| -> Result<()> {
            Err(Error::Config(format!(
                "optimizer.{field}: not valid for optimizer kind \"{}\"",
                self.kind
            )))
        };
        let kind = match self.kind.as_str() {
            "sgd_nesterov" => {
                if self.beta1.is_some() {
                    reject("beta1")?;
                }
                if self.beta2.is_some() {
                    reject("beta2")?;
                }
                if self.eps.is_some() {
                    reject("eps")?;
                }
                OptimizerKind::SgdNesterov {
                    momentum: self.momentum.unwrap_or(0.9),
                }
            }
            "adam" => {
                if self.momentum.is_some() {
                    reject("momentum")?;
                }
                OptimizerKind::Adam {
                    beta1: self.beta1.unwrap_or(0.5),
                    beta2: self.beta2.unwrap_or(0.999),
                    eps: self.eps.unwrap_or(1e-8),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "optimizer.kind: unknown kind \"{other}\", expected \"sgd_nesterov\" or \"adam\""
                )))
            }
        };
        let lr = self.lr.unwrap_or(match kind {
            OptimizerKind::SgdNesterov { .. } => 0.1,
            OptimizerKind::Adam { .. } => 2e-4,
        });
        if !(lr > 0.0) {
            return Err(Error::Config("optimizer.lr: must be positive".into()));
        }
        Ok(OptimizerConfig {
            kind,
            lr,
            weight_decay: self.weight_decay.unwrap_or(0.0),
        })
    }

    fn fill(&mut self) -> Result<()> {
        let resolved = self.resolve()?;
        self.lr = Some(resolved.lr);
        self.weight_decay = Some(resolved.weight_decay);
        match resolved.kind {
            OptimizerKind::SgdNesterov { momentum } => self.momentum = Some(momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.beta1 = Some(beta1);
                self.beta2 = Some(beta2);
                self.eps = Some(eps);
            }
        }
        Ok(())
    }
}

/// Spiral dataset parameters; defaults are the canonical spiral-3 split.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiralParams {
    #[serde(default = "SpiralParams::default_n")]
    pub n_train: usize,
    #[serde(default = "SpiralParams::default_n")]
    pub n_test: usize,
    #[serde(default = "SpiralParams::default_classes")]
    pub classes: usize,
    #[serde(default = "SpiralParams::default_noise")]
    pub noise_std: Real,
    #[serde(default = "SpiralParams::default_seed")]
    pub seed: u64,
}

impl SpiralParams {
    fn default_n() -> usize {
        1500
    }
    fn default_classes() -> usize {
        3
    }
    fn default_noise() -> Real {
        0.2
    }
    fn default_seed() -> u64 {
        7
    }
}

impl Default for SpiralParams {
    fn default() -> Self {
        SpiralParams {
            n_train: 1500,
            n_test: 1500,
            classes: 3,
            noise_std: 0.2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsParams {
    #[serde(default = "BlobsParams::default_n")]
    pub n_train: usize,
    #[serde(default = "BlobsParams::default_n")]
    pub n_test: usize,
    #[serde(default = "SpiralParams::default_classes")]
    pub classes: usize,
    #[serde(default = "BlobsParams::default_noise")]
    pub noise_std: Real,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "BlobsParams::default_dim")]
    pub dim: usize,
}

impl BlobsParams {
    fn default_n() -> usize {
        500
    }
    fn default_noise() -> Real {
        0.5
    }
    fn default_dim() -> usize {
        2
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxParams {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

/// Dataset section: a kind plus kind-specific parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: String,
    #[serde(default = "empty_object")]
    pub params: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(serde_json::Map::new())
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "spiral".into(),
            params: empty_object(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillFileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_ckpt: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: Real,
    /// Teacher architecture for flows that pretrain their own teacher
    /// (`compare`); defaults to the first member's hidden widths doubled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_hidden: Option<Vec<usize>>,
}

impl Default for DistillFileConfig {
    fn default() -> Self {
        DistillFileConfig {
            teacher_ckpt: None,
            temperature: 1.0,
            teacher_hidden: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmlEFileConfig {
    #[serde(default)]
    pub aggregation: Aggregation,
}

/// Settings for the `analyze` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<Real>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "default_topk")]
    pub topk: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sigmas: default_sigmas(),
            trials: default_trials(),
            noise_seed: 0,
            topk: default_topk(),
        }
    }
}

/// The on-disk experiment configuration (strict schema).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Mode,
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub optimizer: FileOptimizer,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillFileConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dml_e: Option<DmlEFileConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisConfig>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

/// A parsed and validated configuration plus the directory relative paths
/// are resolved against.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub file: FileConfig,
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Strict deserialization with key paths in error messages, followed by
    /// semantic validation and default filling.
    pub fn from_value(
        value: serde_json::Value,
        base_dir: Option<PathBuf>,
    ) -> Result<ExperimentConfig> {
        let mut file: FileConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        file.optimizer.fill()?;
        let cfg = ExperimentConfig { file, base_dir };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(json: &str) -> Result<ExperimentConfig> {
        let value: serde_json::Value = serde_json::from_str(json)?;
        Self::from_value(value, None)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, path.parent().map(PathBuf::from))
    }

    fn validate(&self) -> Result<()> {
        let f = &self.file;
        if f.members.is_empty() {
            return Err(Error::Config("members: at least one member required".into()));
        }
        if f.members.iter().any(|m| m.hidden.iter().any(|&h| h == 0)) {
            return Err(Error::Config(
                "members.hidden: layer widths must be >= 1".into(),
            ));
        }
        let k = f.members.len();
        if matches!(f.mode, Mode::Dml | Mode::DmlE) && k < 2 {
            return Err(Error::Config(format!(
                "mode: {} needs K >= 2 members, got {k}",
                f.mode.as_str()
            )));
        }
        if k >= 2 {
            let mut seeds: Vec<u64> = f.members.iter().map(|m| m.seed).collect();
            seeds.sort_unstable();
            if let Some(w) = seeds.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Config(format!(
                    "members.seed: duplicate init seed {} (seeds must be pairwise distinct)",
                    w[0]
                )));
            }
        }
        if f.batch_size < 1 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        if !(f.schedule.factor > 0.0) {
            return Err(Error::Config("schedule.factor: must be positive".into()));
        }
        f.optimizer.resolve()?;
        if let Some(d) = &f.distill {
            if !(d.temperature > 0.0) {
                return Err(Error::Config("distill.temperature: must be positive".into()));
            }
        }
        if f.mode == Mode::Distill && f.distill.as_ref().and_then(|d| d.teacher_ckpt.as_ref()).is_none()
        {
            return Err(Error::Config(
                "distill.teacher_ckpt: required in distill mode".into(),
            ));
        }
        if let Some(a) = &f.analysis {
            if a.trials == 0 {
                return Err(Error::Config("analysis.trials: must be >= 1".into()));
            }
            if a.sigmas.iter().any(|&s| s < 0.0) {
                return Err(Error::Config("analysis.sigmas: must be >= 0".into()));
            }
        }
        // Dataset params parse strictly now, before any compute.
        self.dataset_params_check()?;
        Ok(())
    }

    fn dataset_params_check(&self) -> Result<()> {
        let d = &self.file.dataset;
        let parse = |v: serde_json::Value| -> Result<()> {
            match d.kind.as_str() {
                "spiral" => {
                    parse_params::<SpiralParams>(v)?;
                }
                "blobs" => {
                    parse_params::<BlobsParams>(v)?;
                }
                "idx" => {
                    parse_params::<IdxParams>(v)?;
                }
                other => {
                    return Err(Error::Config(format!(
                        "dataset.kind: unknown kind \"{other}\", expected \"blobs\", \"spiral\" or \"idx\""
                    )))
                }
            }
            Ok(())
        };
        parse(d.params.clone())
    }

    /// Config with every default materialized, for echoing into reports.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(&self.file).expect("config serializes")
    }

    fn resolve_path(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        match (&self.base_dir, path.is_relative()) {
            (Some(base), true) => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Materializes the dataset this config names.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let d = &self.file.dataset;
        match d.kind.as_str() {
            "spiral" => {
                let p: SpiralParams = parse_params(d.params.clone())?;
                gen_synthetic(
                    SyntheticKind::Spiral,
                    p.n_train,
                    p.n_test,
                    p.classes,
                    p.noise_std,
                    p.seed,
                )
            }
            "blobs" => {
                let p: BlobsParams = parse_params(d.params.clone())?;
                gen_synthetic_dim(
                    SyntheticKind::Blobs,
                    p.n_train,
                    p.n_test,
                    p.classes,
                    p.noise_std,
                    p.seed,
                    p.dim,
                )
            }
            "idx" => {
                let p: IdxParams = parse_params(d.params.clone())?;
                let train = load_idx(
                    &self.resolve_path(&p.train_images),
                    &self.resolve_path(&p.train_labels),
                    p.normalize,
                )?;
                let test = load_idx(
                    &self.resolve_path(&p.test_images),
                    &self.resolve_path(&p.test_labels),
                    p.normalize,
                )?;
                dataset_from_idx(
                    train,
                    test,
                    format!("idx {} / {}", p.train_images, p.test_images),
                )
            }
            other => Err(Error::Config(format!(
                "dataset.kind: unknown kind \"{other}\""
            ))),
        }
    }

    /// Runtime training config; loads the frozen teacher in distill mode.
    pub fn cohort_config(&self) -> Result<CohortConfig> {
        let f = &self.file;
        let distill = match (&f.mode, &f.distill) {
            (Mode::Distill, Some(d)) => {
                let path = d.teacher_ckpt.as_ref().ok_or_else(|| {
                    Error::Config("distill.teacher_ckpt: required in distill mode".into())
                })?;
                let resolved = self.resolve_path(path);
                let bytes = fs::read(&resolved).map_err(|e| {
                    Error::Config(format!(
                        "distill.teacher_ckpt: cannot read {}: {e}",
                        resolved.display()
                    ))
                })?;
                Some(DistillRuntime {
                    teacher: load_checkpoint(&bytes)?,
                    temperature: d.temperature,
                })
            }
            _ => None,
        };
        Ok(CohortConfig {
            mode: f.mode,
            members: f.members.clone(),
            optimizer: f.optimizer.resolve()?,
            schedule: f.schedule.clone(),
            batch_size: f.batch_size,
            epochs: f.epochs,
            reduction: f.reduction,
            dml_e_aggregation: f.dml_e.clone().unwrap_or_default().aggregation,
            distill,
            data_seed: f.data_seed,
            update_rule: UpdateRule::RoundRobin,
        })
    }

    pub fn analysis(&self) -> AnalysisConfig {
        self.file.analysis.clone().unwrap_or_default()
    }
}

fn parse_params<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(v)
        .map_err(|e| Error::Config(format!("dataset.params.{}: {}", e.path(), e.inner())))
}

/// Applies one `--set key=value` override onto the raw config JSON.
///
/// Dotted segments address object keys; numeric segments index arrays.
/// Missing intermediate objects are created; the strict schema parse decides
/// whether the final document is legal.
pub fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    use serde_json::Value;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let segments: Vec<&str> = key.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("--set: malformed key \"{key}\"")));
    }
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = cur.as_array_mut().ok_or_else(|| {
                Error::Config(format!(
                    "--set {key}: segment \"{seg}\" indexes a non-array"
                ))
            })?;
            if idx >= arr.len() {
                return Err(Error::Config(format!(
                    "--set {key}: index {idx} out of range (len {})",
                    arr.len()
                )));
            }
            if last {
                arr[idx] = parsed;
                return Ok(());
            }
            cur = &mut arr[idx];
        } else {
            let obj = cur.as_object_mut().ok_or_else(|| {
                Error::Config(format!(
                    "--set {key}: segment \"{seg}\" addresses a non-object"
                ))
            })?;
            if last {
                obj.insert((*seg).to_string(), parsed);
                return Ok(());
            }
            cur = obj
                .entry((*seg).to_string())
                .or_insert_with(|| Value::Object(serde_json::Map::new()));
        }
    }
    unreachable!("loop returns on the last segment")
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Formats metric rows as the canonical CSV.
pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("epoch,member,train_loss,test_acc,entropy\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.member, r.train_loss, r.test_acc, r.entropy
        ));
    }
    out
}

/// Writes `report.json` and `metrics.csv` (deterministic), plus `meta.json`
/// holding wall-clock time so timing never touches the primary outputs.
pub fn write_report(report: &ExperimentReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(out_dir.join("report.json"), json)?;
    fs::write(out_dir.join("metrics.csv"), metrics_csv(report))?;
    let meta = serde_json::json!({ "wall_clock_secs": report.wall_clock_secs });
    fs::write(out_dir.join("meta.json"), format!("{meta}\n"))?;
    Ok(())
}

/// Reads back a report written by [`write_report`].
pub fn read_report(out_dir: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(out_dir.join("report.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Saves member checkpoints as `member_<k>.ckpt`; returns the file names.
pub fn write_checkpoints(members: &[NetworkParams], out_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    let mut names = Vec::with_capacity(members.len());
    for (k, params) in members.iter().enumerate() {
        let name = format!("member_{k}.ckpt");
        fs::write(out_dir.join(&name), crate::model::save_checkpoint(params))?;
        names.push(name);
    }
    Ok(names)
}

/// SHA-256 of the canonical config echo; workers compare these in their
/// round-0 handshake.
pub fn config_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_string(&cfg.echo()).expect("config serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.finalize().into()
}
