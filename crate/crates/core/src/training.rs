//! Losses, data augmentation and the teacher-forced optimization loop.

use std::path::Path;

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelTree;
use crate::network::{HscNet, LabelMap, NetworkError, NetworkOutput, OutputGrads};
use crate::scene_sim::FrameSample;
use crate::tensor::{adam_step, log_softmax, log_softmax_backward, AdamConfig, AdamState, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("tree label counts {tree:?} do not fit network levels {network:?}")]
    TreeMismatch { tree: Vec<usize>, network: Vec<usize> },
    #[error("frame is {got:?}, network expects {expected:?}")]
    FrameSize { expected: (usize, usize), got: (usize, usize) },
    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFinite { iteration: usize, breakdown: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// One weight per classification level.
    pub w_class: Vec<f64>,
    pub w_reg: f64,
}

impl LossWeights {
    /// Unit classification weights, regression weight 10.
    pub fn single_scene(levels: usize) -> Self {
        Self { w_class: vec![1.0; levels], w_reg: 10.0 }
    }

    /// Weighting used with trees merged from several scenes.
    pub fn merged_scenes(levels: usize) -> Self {
        Self { w_class: vec![1.0; levels], w_reg: 100_000.0 }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.w_class.iter().chain([&self.w_reg]).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(TrainError::Invalid(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Weighted sum of already computed terms.
    pub fn combine(&self, class_terms: &[f64], regression: Option<f64>) -> f64 {
        let class: f64 = class_terms.iter().zip(&self.w_class).map(|(l, w)| w * l).sum();
        class + regression.map_or(0.0, |r| self.w_reg * r)
    }
}

/// Sum of Euclidean distances between predicted and target vectors over
/// valid positions, with its gradient w.r.t. `pred`.
///
/// `pred` is `(3, H, W)`; `target` and `mask` are row-major over `H x W`.
pub fn euclidean_loss(pred: &Tensor, target: &[Vector3<f64>], mask: &[bool]) -> Result<(f64, Tensor), TrainError> {
    let (c, h, w) = pred.chw()?;
    let n = h * w;
    if c != 3 || target.len() != n || mask.len() != n {
        return Err(TrainError::Invalid(format!(
            "euclidean_loss: prediction {:?}, {} targets, {} mask entries",
            pred.shape(),
            target.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        log::warn!("euclidean_loss: no valid positions");
    }
    let p = pred.data();
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for i in (0..n).filter(|&i| mask[i]) {
        let d = Vector3::new(p[i] - target[i].x, p[n + i] - target[i].y, p[2 * n + i] - target[i].z);
        let norm = d.norm();
        loss += norm;
        if norm > 0.0 {
            for k in 0..3 {
                grad.data_mut()[k * n + i] = d[k] / norm;
            }
        }
    }
    Ok((loss, grad))
}

/// Sum over valid positions of the negative log-probability of the true
/// class, with its gradient w.r.t. `logits`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &LabelMap, mask: &[bool]) -> Result<(f64, Tensor), TrainError> {
    let (k, h, w) = logits.chw()?;
    let n = h * w;
    if (labels.height, labels.width) != (h, w) || mask.len() != n {
        return Err(TrainError::Invalid(format!(
            "cross_entropy_loss: logits {:?}, labels {}x{}, {} mask entries",
            logits.shape(),
            labels.height,
            labels.width,
            mask.len()
        )));
    }
    if let Some(&l) = labels.labels.iter().zip(mask).find(|(&l, &m)| m && l >= k).map(|(l, _)| l) {
        return Err(TrainError::Invalid(format!("label {l} out of range for {k} classes")));
    }
    if !mask.iter().any(|&m| m) {
        log::warn!("cross_entropy_loss: no valid positions");
    }
    let logp = log_softmax(logits, 0)?;
    let mut dlogp = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for i in (0..n).filter(|&i| mask[i]) {
        let at = labels.labels[i] * n + i;
        loss -= logp.data()[at];
        dlogp.data_mut()[at] = -1.0;
    }
    let grad = log_softmax_backward(&logp, &dlogp, 0)?;
    Ok((loss, grad))
}

/// Per-grid-position training targets derived from a frame and a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTargets {
    /// One map per tree level; invalid positions hold label 0.
    pub labels: Vec<LabelMap>,
    /// Offset from the assigned leaf center, zero where invalid.
    pub offsets: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
}

/// Samples the ground truth at the center pixel of every `stride x stride`
/// cell and maps it through the tree.
pub fn grid_targets(sample: &FrameSample, tree: &LabelTree, stride: usize) -> GridTargets {
    let (w, h) = (sample.width(), sample.height());
    let (gw, gh) = (w / stride, h / stride);
    let depth = tree.depth();
    let mut labels = vec![vec![0; gw * gh]; depth];
    let mut offsets = vec![Vector3::zeros(); gw * gh];
    let mut mask = vec![false; gw * gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let px = (gy * stride + stride / 2) * w + gx * stride + stride / 2;
            if !sample.valid[px] {
                continue;
            }
            let g = gy * gw + gx;
            let y = sample.gt_coords[px];
            let (path, leaf) = tree.assign_with_leaf(&y);
            for (l, &label) in path.labels().iter().enumerate() {
                labels[l][g] = label;
            }
            offsets[g] = y - tree.leaves()[leaf].center;
            mask[g] = true;
        }
    }
    GridTargets { labels: labels.into_iter().map(|l| LabelMap::new(gh, gw, l)).collect(), offsets, mask }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: Vec<f64>,
    pub regression: Option<f64>,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total {:.6}", self.total)?;
        for (l, c) in self.class.iter().enumerate() {
            write!(f, ", class{l} {c:.6}")?;
        }
        if let Some(r) = self.regression {
            write!(f, ", regression {r:.6}")?;
        }
        Ok(())
    }
}

/// Weighted loss over all heads and the upstream gradients for backward.
/// Heads with zero weight receive no gradient.
pub fn total_loss(
    out: &NetworkOutput,
    targets: &GridTargets,
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads), TrainError> {
    if weights.w_class.len() != out.class_logits.len() {
        return Err(TrainError::Invalid(format!(
            "{} class weights for {} levels",
            weights.w_class.len(),
            out.class_logits.len()
        )));
    }
    let mut class = Vec::new();
    let mut grads = OutputGrads::default();
    for (l, logits) in out.class_logits.iter().enumerate() {
        let (loss, g) = cross_entropy_loss(logits, &targets.labels[l], &targets.mask)?;
        class.push(loss);
        let w = weights.w_class[l];
        grads.class_logits.push((w != 0.0).then(|| g.map(|v| w * v)));
    }
    let regression = match &out.regression {
        Some(pred) => {
            let (loss, g) = euclidean_loss(pred, &targets.offsets, &targets.mask)?;
            let w = weights.w_reg;
            grads.regression = (w != 0.0).then(|| g.map(|v| w * v));
            Some(loss)
        }
        None => None,
    };
    let total = weights.combine(&class, regression);
    Ok((LossBreakdown { total, class, regression }, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub enabled: bool,
    /// Maximum shift as a fraction of the image size.
    pub translate: f64,
    pub rotate_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear_deg: f64,
    /// Maximum additive intensity change (8-bit units).
    pub brightness: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            translate: 0.2,
            rotate_deg: 30.0,
            scale_min: 0.7,
            scale_max: 1.5,
            shear_deg: 10.0,
            brightness: 20.0,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

/// Image-plane affine map about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    /// Shift in pixels.
    pub translate: Vector2<f64>,
    pub rotate_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Self { translate: Vector2::zeros(), rotate_deg: 0.0, scale: 1.0, shear_deg: 0.0 }
    }

    pub fn sample(spec: &AugmentSpec, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let tx = sym(rng, spec.translate) * width as f64;
        let ty = sym(rng, spec.translate) * height as f64;
        Self {
            translate: Vector2::new(tx, ty),
            rotate_deg: sym(rng, spec.rotate_deg),
            scale: if spec.scale_max > spec.scale_min { rng.gen_range(spec.scale_min..=spec.scale_max) } else { spec.scale_min },
            shear_deg: sym(rng, spec.shear_deg),
        }
    }

    /// Linear part: rotation * shear * scale.
    pub fn linear(&self) -> Matrix2<f64> {
        let (s, c) = self.rotate_deg.to_radians().sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let shear = Matrix2::new(1.0, self.shear_deg.to_radians().tan(), 0.0, 1.0);
        rot * shear * self.scale
    }

    /// Source position of output pixel `p` for an image with center `center`.
    pub fn source_of(&self, p: &Vector2<f64>, center: &Vector2<f64>) -> Vector2<f64> {
        let inv = self.linear().try_inverse().expect("scale > 0");
        center + inv * (p - center - self.translate)
    }
}

/// Warps a frame by `affine`: bilinear for the image, nearest neighbor for
/// depth, coordinates and validity (out-of-frame sources become invalid),
/// then adds `brightness` and clamps to [0, 255]. Pose and intrinsics stay.
pub fn augment_with(sample: &FrameSample, affine: &Affine, brightness: f64) -> FrameSample {
    let (w, h) = (sample.width(), sample.height());
    let n = w * h;
    let center = Vector2::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src_img = sample.image.data();
    let mut image = Tensor::zeros(&[3, h, w]);
    let mut depth = vec![0.0; n];
    let mut coords = vec![Vector3::from_element(f64::NAN); n];
    let mut valid = vec![false; n];
    let clampi = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = affine.source_of(&Vector2::new(x as f64, y as f64), &center);
            if s.x > -1.0 && s.y > -1.0 && s.x < w as f64 && s.y < h as f64 {
                let (x0, y0) = (s.x.floor(), s.y.floor());
                let (fx, fy) = (s.x - x0, s.y - y0);
                let (xa, xb) = (clampi(x0, w), clampi(x0 + 1.0, w));
                let (ya, yb) = (clampi(y0, h), clampi(y0 + 1.0, h));
                let wts = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
                let idx = [ya * w + xa, ya * w + xb, yb * w + xa, yb * w + xb];
                for c in 0..3 {
                    let plane = &src_img[c * n..(c + 1) * n];
                    image.data_mut()[c * n + i] = wts.iter().zip(&idx).filter(|(wt, _)| **wt != 0.0).map(|(wt, &j)| wt * plane[j]).sum();
                }
            }
            let (nx, ny) = (s.x.round(), s.y.round());
            if nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64 {
                let j = ny as usize * w + nx as usize;
                if sample.valid[j] {
                    depth[i] = sample.depth[j];
                    coords[i] = sample.gt_coords[j];
                    valid[i] = true;
                }
            }
        }
    }
    if brightness != 0.0 {
        image.data_mut().iter_mut().for_each(|v| *v = (*v + brightness).clamp(0.0, 255.0));
    }
    FrameSample { image, depth, gt_coords: coords, valid, pose: sample.pose, intrinsics: sample.intrinsics }
}

/// Random affine warp and global brightness shift.
pub fn augment(sample: &FrameSample, spec: &AugmentSpec, rng: &mut impl Rng) -> FrameSample {
    if !spec.enabled {
        return sample.clone();
    }
    let affine = Affine::sample(spec, sample.width(), sample.height(), rng);
    let brightness = if spec.brightness > 0.0 { rng.gen_range(-spec.brightness..=spec.brightness) } else { 0.0 };
    augment_with(sample, &affine, brightness)
}

/// Maps 8-bit intensities to [-0.5, 0.5].
pub fn normalize_image(image: &Tensor) -> Tensor {
    image.map(|v| v / 255.0 - 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_iterations: usize,
    pub lr0: f64,
    /// First iteration at reduced learning rate.
    pub halving_start: usize,
    /// The rate halves at `halving_start` and every this many iterations after.
    pub halving_interval: usize,
    pub seed: u64,
    /// Iterations between log lines (0 disables).
    #[serde(default)]
    pub log_every: usize,
}

impl TrainSchedule {
    /// Constant rate for the first third, then halving every sixth of the run.
    pub fn new(total_iterations: usize, lr0: f64, seed: u64) -> Self {
        Self {
            total_iterations,
            lr0,
            halving_start: total_iterations / 3,
            halving_interval: (total_iterations / 6).max(1),
            seed,
            log_every: 0,
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.halving_start {
            return self.lr0;
        }
        let halvings = (iteration - self.halving_start) / self.halving_interval.max(1) + 1;
        self.lr0 * 0.5f64.powi(halvings.min(1000) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub augment: AugmentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Checks that a tree's levels line up with the network's classification levels.
pub fn check_tree(net: &HscNet, tree: &LabelTree) -> Result<(), TrainError> {
    let counts = tree.label_counts();
    let net_counts = &net.config().labels_per_level;
    let ok = if net_counts.is_empty() { counts.iter().all(|&k| k == 1) } else { &counts == net_counts };
    if !ok {
        return Err(TrainError::TreeMismatch { tree: counts, network: net_counts.clone() });
    }
    Ok(())
}

/// Mutable optimizer state of a run.
pub struct Trainer {
    adam: Vec<AdamState>,
    cfg: AdamConfig,
    step: u64,
}

impl Trainer {
    pub fn new(net: &HscNet) -> Self {
        let adam = (0..net.params().len()).map(|i| AdamState::new(net.params().get(i).len())).collect();
        Self { adam, cfg: AdamConfig::default(), step: 0 }
    }

    /// One forward/backward/update on a single (already augmented) frame.
    pub fn step(
        &mut self,
        net: &mut HscNet,
        sample: &FrameSample,
        tree: &LabelTree,
        weights: &LossWeights,
        lr: f64,
    ) -> Result<LossBreakdown, TrainError> {
        let cfg = net.config();
        if (sample.height(), sample.width()) != (cfg.input_height, cfg.input_width) {
            return Err(TrainError::FrameSize {
                expected: (cfg.input_height, cfg.input_width),
                got: (sample.height(), sample.width()),
            });
        }
        let targets = grid_targets(sample, tree, cfg.output_stride);
        let levels = cfg.levels();
        let input = normalize_image(&sample.image);
        let (out, cache) = net.forward_cached(&input, Some(&targets.labels[..levels]))?;
        let (loss, grads_out) = total_loss(&out, &targets, weights)?;
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite { iteration: self.step as usize, breakdown: loss.to_string() });
        }
        let grads = net.backward(&cache, &grads_out)?;
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            adam_step(net.params_mut().get_mut(i).data_mut(), g.data(), &mut self.adam[i], lr, &self.cfg, self.step);
        }
        Ok(loss)
    }
}

/// Trains `net` in place and returns the per-iteration loss history.
pub fn train(
    net: &mut HscNet,
    frames: &[FrameSample],
    tree: &LabelTree,
    opts: &TrainOptions,
) -> Result<Vec<LossRecord>, TrainError> {
    train_with(net, frames, tree, opts, |_, _, _| Ok(()))
}

/// [`train`] with a hook called after every iteration.
pub fn train_with(
    net: &mut HscNet,
    frames: &[FrameSample],
    tree: &LabelTree,
    opts: &TrainOptions,
    mut hook: impl FnMut(usize, &HscNet, &LossRecord) -> Result<(), TrainError>,
) -> Result<Vec<LossRecord>, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if opts.schedule.total_iterations == 0 {
        return Err(TrainError::Invalid("total_iterations must be at least 1".into()));
    }
    opts.weights.validate()?;
    check_tree(net, tree)?;
    if opts.weights.w_class.len() != net.config().levels() {
        return Err(TrainError::Invalid(format!(
            "{} class weights for {} levels",
            opts.weights.w_class.len(),
            net.config().levels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.schedule.seed);
    let mut trainer = Trainer::new(net);
    let mut history = Vec::with_capacity(opts.schedule.total_iterations);
    for it in 0..opts.schedule.total_iterations {
        let frame = &frames[rng.gen_range(0..frames.len())];
        let augmented;
        let sample = if opts.augment.enabled {
            augmented = augment(frame, &opts.augment, &mut rng);
            &augmented
        } else {
            frame
        };
        let lr = opts.schedule.lr_at(it);
        let loss = trainer.step(net, sample, tree, &opts.weights, lr).map_err(|e| match e {
            TrainError::NonFinite { breakdown, .. } => TrainError::NonFinite { iteration: it, breakdown },
            e => e,
        })?;
        let record = LossRecord { iteration: it, lr, loss };
        if opts.schedule.log_every > 0 && (it + 1) % opts.schedule.log_every == 0 {
            log::info!("iteration {} lr {:.3e} {}", it + 1, lr, record.loss);
        }
        hook(it, net, &record)?;
        history.push(record);
    }
    Ok(history)
}

/// Writes `iteration, lr, total, class0.., regression` rows.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    let levels = history.first().map_or(0, |r| r.loss.class.len());
    let has_reg = history.first().is_some_and(|r| r.loss.regression.is_some());
    let mut header = vec!["iteration".to_string(), "lr".into(), "total".into()];
    header.extend((0..levels).map(|l| format!("class{l}")));
    if has_reg {
        header.push("regression".into());
    }
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![r.iteration.to_string(), format!("{:e}", r.lr), r.loss.total.to_string()];
        row.extend(r.loss.class.iter().map(|c| c.to_string()));
        if let Some(reg) = r.loss.regression {
            row.push(reg.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a loss CSV back as (header, rows).
pub fn read_history_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>), TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| TrainError::Invalid(format!("bad CSV value {v}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::hierarchy::TreeBuildOptions;
    use crate::network::HscNetConfig;
    use crate::scene_sim::{look_at, make_room, render_frame};
    use crate::tensor::grad_check_at;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-r..r))
    }

    #[test]
    fn euclidean_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let target: Vec<Vector3<f64>> = (0..6).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let mut pred = Tensor::zeros(&[3, 2, 3]);
        for (i, t) in target.iter().enumerate() {
            for k in 0..3 {
                pred.data_mut()[k * 6 + i] = t[k];
            }
        }
        assert_eq!(euclidean_loss(&pred, &target, &[true; 6]).unwrap().0, 0.0);
        let shifted = Tensor::from_fn(&[3, 2, 3], |j| pred.data()[j] + if j < 6 { 1.0 } else { 0.0 });
        assert!((euclidean_loss(&shifted, &target, &[true; 6]).unwrap().0 - 6.0).abs() < 1e-12);
        for _ in 0..100 {
            let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let n = h * w;
            let pred = rand_tensor(&mut rng, &[3, h, w], 2.0);
            let tgt: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            let mut expected = 0.0;
            for i in 0..n {
                if mask[i] {
                    let dx = pred.data()[i] - tgt[i].x;
                    let dy = pred.data()[n + i] - tgt[i].y;
                    let dz = pred.data()[2 * n + i] - tgt[i].z;
                    expected += (dx * dx + dy * dy + dz * dz).sqrt();
                }
            }
            let (loss, grad) = euclidean_loss(&pred, &tgt, &mask).unwrap();
            assert!((loss - expected).abs() < 1e-12);
            for i in (0..n).filter(|&i| !mask[i]) {
                assert!((0..3).all(|k| grad.data()[k * n + i] == 0.0));
            }
        }
    }

    #[test]
    fn cross_entropy_examples_and_oracle() {
        let confident = Tensor::from_vec(&[2, 1, 2], vec![800.0, -800.0, 0.0, 0.0]).unwrap();
        let labels = LabelMap::new(1, 2, vec![0, 1]);
        assert_eq!(cross_entropy_loss(&confident, &labels, &[true, true]).unwrap().0, 0.0);
        let uniform = Tensor::zeros(&[5, 2, 3]);
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 0]);
        let (l, _) = cross_entropy_loss(&uniform, &labels, &[true, true, false, true, true, true]).unwrap();
        assert!((l - 5.0 * 5f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (k, h, w) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
            let n = h * w;
            let logits = rand_tensor(&mut rng, &[k, h, w], 5.0);
            let labels = LabelMap::new(h, w, (0..n).map(|_| rng.gen_range(0..k)).collect());
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            let mut expected = 0.0;
            for i in (0..n).filter(|&i| mask[i]) {
                let z: f64 = (0..k).map(|c| logits.data()[c * n + i].exp()).sum();
                expected -= (logits.data()[labels.labels[i] * n + i].exp() / z).ln();
            }
            let (loss, grad) = cross_entropy_loss(&logits, &labels, &mask).unwrap();
            assert!((loss - expected).abs() < 1e-10);
            let probe = |t: &Tensor| cross_entropy_loss(t, &labels, &mask).unwrap().0;
            assert!(crate::tensor::grad_check(probe, &grad, &logits, 1e-5).max_rel_error < 1e-6);
            for i in (0..n).filter(|&i| !mask[i]) {
                assert!((0..k).all(|c| grad.data()[c * n + i] == 0.0));
            }
        }
        let bad = LabelMap::new(1, 1, vec![3]);
        assert!(cross_entropy_loss(&Tensor::zeros(&[3, 1, 1]), &bad, &[true]).is_err());
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::single_scene(2);
        assert_eq!(w.combine(&[2.0, 3.0], Some(0.5)), 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let terms: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..10.0)).collect();
            let wts: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..10.0)).collect();
            let reg = rng.gen_range(0.0..10.0);
            let w = LossWeights { w_class: wts.clone(), w_reg: rng.gen_range(0.0..100.0) };
            let dot: f64 = terms.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>() + w.w_reg * reg;
            assert!((w.combine(&terms, Some(reg)) - dot).abs() < 1e-9);
        }
        assert!(LossWeights { w_class: vec![-1.0], w_reg: 1.0 }.validate().is_err());
    }

    fn flat_frame(w: usize, h: usize) -> FrameSample {
        let n = w * h;
        let k = CameraIntrinsics { fx: 10.0, fy: 10.0, cx: 0.0, cy: 0.0, width: w, height: h };
        FrameSample {
            image: Tensor::from_fn(&[3, h, w], |i| (i % 251) as f64),
            depth: vec![1.0; n],
            gt_coords: (0..n).map(|i| Vector3::new((i % w) as f64, (i / w) as f64, 7.0)).collect(),
            valid: (0..n).map(|i| i % 7 != 3).collect(),
            pose: crate::geometry::RigidPose::identity(),
            intrinsics: k,
        }
    }

    #[test]
    fn identity_augment_is_noop() {
        let f = flat_frame(16, 12);
        let a = augment_with(&f, &Affine::identity(), 0.0);
        assert_eq!(a.image, f.image);
        assert_eq!(a.valid, f.valid);
        for i in (0..f.valid.len()).filter(|&i| f.valid[i]) {
            assert_eq!(a.gt_coords[i], f.gt_coords[i]);
        }
        assert_eq!(augment(&f, &AugmentSpec::disabled(), &mut ChaCha8Rng::seed_from_u64(0)), f);
    }

    #[test]
    fn translation_shifts_one_cell() {
        let f = flat_frame(16, 16);
        let s = 4;
        let a = augment_with(&f, &Affine { translate: Vector2::new(s as f64, 0.0), ..Affine::identity() }, 0.0);
        for y in 0..16 {
            for x in 0..16 {
                let i = y * 16 + x;
                if x < s {
                    assert!(!a.valid[i]);
                } else {
                    assert_eq!(a.valid[i], f.valid[i - s]);
                    if a.valid[i] {
                        assert_eq!(a.gt_coords[i], f.gt_coords[i - s]);
                    }
                }
            }
        }
    }

    #[test]
    fn random_warps_follow_inverse_map() {
        let f = flat_frame(20, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let center = Vector2::new(9.5, 7.5);
        for _ in 0..100 {
            let affine = Affine::sample(&AugmentSpec::default(), 20, 16, &mut rng);
            let b = rng.gen_range(-20.0..20.0);
            let a = augment_with(&f, &affine, b);
            for i in 0..320 {
                let p = Vector2::new((i % 20) as f64, (i / 20) as f64);
                let s = affine.source_of(&p, &center);
                let (sx, sy) = (s.x.round(), s.y.round());
                let inside = sx >= 0.0 && sy >= 0.0 && sx < 20.0 && sy < 16.0;
                if a.valid[i] {
                    assert!(inside);
                    let j = sy as usize * 20 + sx as usize;
                    assert!(f.valid[j]);
                    assert_eq!(a.gt_coords[i], f.gt_coords[j]);
                } else if inside {
                    assert!(!f.valid[sy as usize * 20 + sx as usize]);
                }
            }
            assert!(a.image.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn lr_schedule() {
        let s = TrainSchedule::new(300_000, 1e-4, 0);
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(99_999), 1e-4);
        assert_eq!(s.lr_at(100_000), 5e-5);
        assert_eq!(s.lr_at(149_999), 5e-5);
        assert_eq!(s.lr_at(150_000), 2.5e-5);
        assert_eq!(s.lr_at(299_999), 1e-4 / 16.0);
    }

    fn rendered_frame(k: &CameraIntrinsics, seed: u64) -> FrameSample {
        let scene = make_room(4.0, 1500.0, seed).unwrap();
        let pose = look_at(&Vector3::new(0.2, -0.3, 0.1), &Vector3::new(2.0, 0.5, -0.4));
        render_frame(&scene, &pose, k)
    }

    fn tree_from(frames: &[&FrameSample], branching: &[usize]) -> LabelTree {
        let pts: Vec<_> = frames.iter().flat_map(|f| f.gt_coords.iter().zip(&f.valid).filter(|(_, &v)| v).map(|(p, _)| *p)).collect();
        LabelTree::build(&pts, branching, &TreeBuildOptions { seed: 0, restarts: 2 }).unwrap()
    }

    #[test]
    fn full_network_gradient_check() {
        let cfg = HscNetConfig::tiny(vec![2, 2]);
        let k = CameraIntrinsics { fx: 14.0, fy: 14.0, cx: 7.5, cy: 7.5, width: 16, height: 16 };
        let frame = rendered_frame(&k, 4);
        let tree = tree_from(&[&frame], &[2, 2]);
        let mut net = HscNet::new(cfg.clone()).unwrap();
        let targets = grid_targets(&frame, &tree, cfg.output_stride);
        let input = normalize_image(&frame.image);
        let weights = LossWeights::single_scene(2);
        let loss_of = |net: &HscNet| {
            let out = net.forward(&input, Some(&targets.labels)).unwrap();
            total_loss(&out, &targets, &weights).unwrap().0.total
        };
        let (out, cache) = net.forward_cached(&input, Some(&targets.labels)).unwrap();
        let (_, up) = total_loss(&out, &targets, &weights).unwrap();
        let grads = net.backward(&cache, &up).unwrap();
        let mut worst: f64 = 0.0;
        for p in 0..net.params().len() {
            let x = net.params().get(p).clone();
            let idx: Vec<usize> = (0..x.len()).collect();
            let check = grad_check_at(
                |t| {
                    let saved = std::mem::replace(net.params_mut().get_mut(p), t.clone());
                    let l = loss_of(&net);
                    *net.params_mut().get_mut(p) = saved;
                    l
                },
                &grads[p],
                &x,
                1e-4,
                &idx,
            );
            worst = worst.max(check.max_rel_error);
            assert!(check.max_rel_error < 1e-4, "{}: {check:?}", net.params().name(p));
        }
        assert!(worst > 0.0);
    }

    #[test]
    fn zero_class_weights_freeze_classification_heads() {
        let cfg = HscNetConfig::tiny(vec![2, 2]);
        let k = CameraIntrinsics { fx: 14.0, fy: 14.0, cx: 7.5, cy: 7.5, width: 16, height: 16 };
        let frame = rendered_frame(&k, 5);
        let tree = tree_from(&[&frame], &[2, 2]);
        let mut net = HscNet::new(cfg).unwrap();
        let before = net.params().clone();
        let opts = TrainOptions {
            schedule: TrainSchedule::new(5, 1e-3, 0),
            weights: LossWeights { w_class: vec![0.0, 0.0], w_reg: 1.0 },
            augment: AugmentSpec::disabled(),
        };
        train(&mut net, &[frame], &tree, &opts).unwrap();
        for i in 0..before.len() {
            let name = before.name(i);
            let same = before.get(i) == net.params().get(i);
            assert_eq!(same, name.starts_with("level"), "{name}");
        }
    }

    #[test]
    fn training_is_deterministic_and_checks_inputs() {
        let cfg = HscNetConfig::tiny(vec![2, 2]);
        let k = CameraIntrinsics { fx: 14.0, fy: 14.0, cx: 7.5, cy: 7.5, width: 16, height: 16 };
        let frames = vec![rendered_frame(&k, 6), rendered_frame(&k, 7)];
        let tree = tree_from(&frames.iter().collect::<Vec<_>>(), &[2, 2]);
        let opts = TrainOptions {
            schedule: TrainSchedule::new(20, 1e-3, 9),
            weights: LossWeights::single_scene(2),
            augment: AugmentSpec::default(),
        };
        let run = || {
            let mut net = HscNet::new(cfg.clone()).unwrap();
            let h = train(&mut net, &frames, &tree, &opts).unwrap();
            (h, net.params().clone())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        let mut net = HscNet::new(cfg.clone()).unwrap();
        assert!(matches!(train(&mut net, &[], &tree, &opts), Err(TrainError::EmptyDataset)));
        let wrong_tree = tree_from(&frames.iter().collect::<Vec<_>>(), &[3, 2]);
        assert!(matches!(train(&mut net, &frames, &wrong_tree, &opts), Err(TrainError::TreeMismatch { .. })));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_history_csv(&path, &h1).unwrap();
        let (header, rows) = read_history_csv(&path).unwrap();
        assert_eq!(header, ["iteration", "lr", "total", "class0", "class1", "regression"]);
        assert_eq!(rows.len(), 20);
        assert_eq!(rows[3][2], h1[3].loss.total);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = HscNetConfig::tiny(vec![2, 2]);
        let k = CameraIntrinsics { fx: 14.0, fy: 14.0, cx: 7.5, cy: 7.5, width: 16, height: 16 };
        let frame = rendered_frame(&k, 8);
        let tree = tree_from(&[&frame], &[2, 2]);
        let mut net = HscNet::new(cfg).unwrap();
        net.params_mut().get_mut(0).data_mut()[0] = f64::NAN;
        let opts = TrainOptions {
            schedule: TrainSchedule::new(3, 1e-3, 0),
            weights: LossWeights::single_scene(2),
            augment: AugmentSpec::disabled(),
        };
        match train(&mut net, &[frame], &tree, &opts) {
            Err(TrainError::NonFinite { iteration: 0, breakdown }) => assert!(breakdown.contains("class0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overfits_a_single_frame() {
        let cfg = HscNetConfig::desk();
        let frame = rendered_frame(&crate::scene_sim::desk_intrinsics(), 9);
        let tree = tree_from(&[&frame], &[4, 4]);
        let mut net = HscNet::new(cfg).unwrap();
        let opts = TrainOptions {
            schedule: TrainSchedule { halving_start: usize::MAX, ..TrainSchedule::new(500, 1e-3, 0) },
            weights: LossWeights::single_scene(2),
            augment: AugmentSpec::disabled(),
        };
        let h = train(&mut net, &[frame], &tree, &opts).unwrap();
        assert!(h[499].loss.total < h[10].loss.total, "{} vs {}", h[499].loss.total, h[10].loss.total);
    }
}
