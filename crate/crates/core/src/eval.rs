//! Localization of whole frames, accuracy reports and the end-to-end
//! pipeline steps shared by the command line and the acceptance runs.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{pose_error, CameraIntrinsics, RigidPose};
use crate::hierarchy::{HierarchyError, LabelTree, TreeBuildOptions};
use crate::network::{predict_coordinates, CoordinateMap, HscNet, HscNetConfig, NetworkError};
use crate::pose_solver::{estimate_pose, CorrespondenceSet, PoseEstimate, RansacConfig, SolverError};
use crate::scene_sim::{Frame, FrameSample, SceneError};
use crate::training::{normalize_image, AugmentSpec, LossRecord, LossWeights, TrainError, TrainOptions, TrainSchedule};

/// Translation bound of the accuracy metric, meters.
pub const ACCURACY_TRANSLATION_M: f64 = 0.05;
/// Rotation bound of the accuracy metric, degrees.
pub const ACCURACY_ROTATION_DEG: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame {id}: {source}")]
    Localize { id: String, source: SolverError },
    #[error("{estimates} estimates for {truths} ground-truth poses")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("image is {got:?}, network expects {expected:?}")]
    ImageSize { expected: [usize; 3], got: Vec<usize> },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full-resolution pixel used for grid cell `(gy, gx)`.
pub fn cell_pixel(gx: usize, gy: usize, stride: usize) -> Vector2<f64> {
    Vector2::new((gx * stride + stride / 2) as f64, (gy * stride + stride / 2) as f64)
}

/// Correspondences for every valid, finite grid position of a coordinate map.
pub fn grid_correspondences(map: &CoordinateMap, valid: Option<&[bool]>, stride: usize) -> CorrespondenceSet {
    let mut set = CorrespondenceSet::default();
    for gy in 0..map.height {
        for gx in 0..map.width {
            let i = gy * map.width + gx;
            let y = map.coords[i];
            if valid.is_none_or(|v| v[i]) && y.iter().all(|c| c.is_finite()) {
                set.pixels.push(cell_pixel(gx, gy, stride));
                set.coords.push(y);
            }
        }
    }
    set
}

/// Pose from a predicted coordinate map.
pub fn localize_map(
    map: &CoordinateMap,
    valid: Option<&[bool]>,
    stride: usize,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, SolverError> {
    estimate_pose(&grid_correspondences(map, valid, stride), k, cfg)
}

/// Forward pass in test mode followed by robust pose estimation.
/// `image` holds 8-bit intensities, `(3, H, W)`.
pub fn localize_frame(
    image: &crate::tensor::Tensor,
    net: &HscNet,
    tree: &LabelTree,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<(PoseEstimate, CoordinateMap), EvalError> {
    if image.shape() != net.input_shape() {
        return Err(EvalError::ImageSize { expected: net.input_shape(), got: image.shape().to_vec() });
    }
    let out = net.forward(&normalize_image(image), None)?;
    let map = predict_coordinates(&out, tree)?;
    let est = localize_map(&map, None, net.config().output_stride, k, cfg)
        .map_err(|source| EvalError::Localize { id: String::new(), source })?;
    Ok((est, map))
}

mod inf_as_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Errors of one frame. Unlocalized frames carry infinite errors, stored as
/// `null` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub id: String,
    #[serde(with = "inf_as_null")]
    pub t_err_m: f64,
    #[serde(with = "inf_as_null")]
    pub r_err_deg: f64,
    pub localized: bool,
}

impl FrameResult {
    pub fn accurate(&self) -> bool {
        self.t_err_m < ACCURACY_TRANSLATION_M && self.r_err_deg < ACCURACY_ROTATION_DEG
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameResult>,
    /// Lower median over localized frames; `null` when none localized.
    #[serde(with = "inf_as_null")]
    pub median_t_m: f64,
    #[serde(with = "inf_as_null")]
    pub median_r_deg: f64,
    /// Fraction of all frames within 5 cm and 5 degrees.
    pub acc_5cm5deg: f64,
    pub n: usize,
    /// Unlocalized frames, excluded from the medians.
    pub n_failed: usize,
}

fn lower_median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameResult>) -> Self {
        let localized: Vec<&FrameResult> = frames.iter().filter(|f| f.localized).collect();
        let n = frames.len();
        let accurate = frames.iter().filter(|f| f.accurate()).count();
        Self {
            median_t_m: lower_median(localized.iter().map(|f| f.t_err_m).collect()),
            median_r_deg: lower_median(localized.iter().map(|f| f.r_err_deg).collect()),
            acc_5cm5deg: if n == 0 { 0.0 } else { accurate as f64 / n as f64 },
            n,
            n_failed: n - localized.len(),
            frames,
        }
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        Ok(std::fs::write(path, self.to_json()? + "\n")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Plain-text table of the per-frame errors and the summary.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>10} {:>10} {:>9}\n", "frame", "t_err_m", "r_err_deg", "localized");
        for f in &self.frames {
            s += &format!("{:<16} {:>10.4} {:>10.3} {:>9}\n", f.id, f.t_err_m, f.r_err_deg, f.localized);
        }
        s += &format!(
            "median {:.4} m / {:.3} deg, accuracy (5 cm, 5 deg) {:.1}% over {} frames, {} unlocalized\n",
            self.median_t_m,
            self.median_r_deg,
            100.0 * self.acc_5cm5deg,
            self.n,
            self.n_failed
        );
        s
    }
}

/// Compares aligned estimated and ground-truth poses; `None` marks a frame
/// that could not be localized.
pub fn evaluate(ids: &[String], estimates: &[Option<RigidPose>], truths: &[RigidPose]) -> Result<EvalReport, EvalError> {
    if estimates.len() != truths.len() || ids.len() != truths.len() {
        return Err(EvalError::LengthMismatch { estimates: estimates.len(), truths: truths.len() });
    }
    let frames = ids
        .iter()
        .zip(estimates)
        .zip(truths)
        .map(|((id, est), gt)| match est {
            Some(est) => {
                let e = pose_error(est, gt);
                FrameResult { id: id.clone(), t_err_m: e.translation_m, r_err_deg: e.rotation_deg, localized: true }
            }
            None => FrameResult { id: id.clone(), t_err_m: f64::INFINITY, r_err_deg: f64::INFINITY, localized: false },
        })
        .collect();
    Ok(EvalReport::from_frames(frames))
}

/// Localizes every frame (in parallel) and reports against the stored poses.
/// Solver failures mark the frame unlocalized.
pub fn evaluate_frames(
    net: &HscNet,
    tree: &LabelTree,
    frames: &[Frame],
    cfg: &RansacConfig,
) -> Result<(EvalReport, Vec<Option<PoseEstimate>>), EvalError> {
    let results: Vec<Result<Option<PoseEstimate>, EvalError>> = frames
        .par_iter()
        .map(|f| match localize_frame(&f.sample.image, net, tree, &f.sample.intrinsics, cfg) {
            Ok((est, _)) => Ok(Some(est)),
            Err(EvalError::Localize { source, .. }) => {
                log::warn!("frame {}: {source}", f.id);
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect();
    let estimates = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = frames.iter().map(|f| f.id.clone()).collect();
    let poses: Vec<Option<RigidPose>> = estimates.iter().map(|e| e.as_ref().map(|e| e.pose)).collect();
    let truths: Vec<RigidPose> = frames.iter().map(|f| f.sample.pose).collect();
    Ok((evaluate(&ids, &poses, &truths)?, estimates))
}

/// Valid ground-truth coordinates of all frames, in frame order.
pub fn training_points<'a>(frames: impl IntoIterator<Item = &'a FrameSample>) -> Vec<Vector3<f64>> {
    frames
        .into_iter()
        .flat_map(|f| f.gt_coords.iter().zip(&f.valid).filter(|(_, &v)| v).map(|(p, _)| *p))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSettings {
    pub branching: Vec<usize>,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for TreeSettings {
    fn default() -> Self {
        Self { branching: vec![4, 4], restarts: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: usize,
    pub lr0: f64,
    pub seed: u64,
    pub augment: bool,
    /// Regression weight; defaults by tree kind when absent.
    pub w_reg: Option<f64>,
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { iterations: 20_000, lr0: 1e-4, seed: 0, augment: true, w_reg: None, log_every: 1000 }
    }
}

impl TrainSettings {
    /// Optimizer options for a network with `levels` classification levels;
    /// `merged` selects the multi-scene regression weight.
    pub fn options(&self, levels: usize, merged: bool) -> TrainOptions {
        let mut weights = if merged { LossWeights::merged_scenes(levels) } else { LossWeights::single_scene(levels) };
        if let Some(w) = self.w_reg {
            weights.w_reg = w;
        }
        let mut schedule = TrainSchedule::new(self.iterations, self.lr0, self.seed);
        schedule.log_every = self.log_every;
        TrainOptions {
            schedule,
            weights,
            augment: if self.augment { AugmentSpec::default() } else { AugmentSpec::disabled() },
        }
    }
}

/// Paths and settings of one experiment, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset roots; more than one trains against a merged tree.
    pub datasets: Vec<PathBuf>,
    pub tree: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub network: HscNetConfig,
    pub ransac: RansacConfig,
    pub tree_build: TreeSettings,
    pub training: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            tree: "tree.json".into(),
            checkpoint: "model.ckpt".into(),
            report: "report.json".into(),
            network: HscNetConfig::desk(),
            ransac: RansacConfig::default(),
            tree_build: TreeSettings::default(),
            training: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.network.validate()?;
        cfg.ransac.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, EvalError> {
        toml::to_string_pretty(self).map_err(|e| EvalError::Config(e.to_string()))
    }

    /// Parses the file and checks that every dataset root exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(missing) = cfg.datasets.iter().find(|d| !d.join("scene.json").is_file()) {
            return Err(EvalError::Config(format!("dataset {} has no scene.json", missing.display())));
        }
        Ok(cfg)
    }
}

/// Builds one tree per scene and merges them when there are several.
pub fn build_scene_tree(scenes: &[Vec<Vector3<f64>>], settings: &TreeSettings) -> Result<LabelTree, EvalError> {
    let opts = TreeBuildOptions { seed: settings.seed, restarts: settings.restarts };
    let trees = scenes
        .iter()
        .map(|pts| LabelTree::build(pts, &settings.branching, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(if trees.len() == 1 { trees.into_iter().next().unwrap() } else { LabelTree::merge(&trees)? })
}

/// Single-cluster tree over all points, the anchor of the regression-only baseline.
pub fn baseline_tree(points: &[Vector3<f64>], settings: &TreeSettings) -> Result<LabelTree, EvalError> {
    Ok(LabelTree::build(points, &[1], &TreeBuildOptions { seed: settings.seed, restarts: 1 })?)
}

/// Network configuration whose label counts follow `tree`.
pub fn network_for_tree(base: &HscNetConfig, tree: &LabelTree) -> HscNetConfig {
    let counts = tree.label_counts();
    let mut cfg = base.clone();
    if base.levels() == counts.len() {
        cfg.labels_per_level = counts;
    }
    cfg
}

/// Creates a network and trains it on `frames`.
pub fn train_model(
    cfg: &HscNetConfig,
    frames: &[FrameSample],
    tree: &LabelTree,
    opts: &TrainOptions,
) -> Result<(HscNet, Vec<LossRecord>), EvalError> {
    let mut net = HscNet::new(cfg.clone())?;
    let history = crate::training::train(&mut net, frames, tree, opts)?;
    Ok((net, history))
}
