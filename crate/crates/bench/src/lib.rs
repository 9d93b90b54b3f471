//! Deterministic inputs shared by the benchmarks.

use hscnet_core::geometry::{backproject, CameraIntrinsics, RigidPose};
use hscnet_core::pose_solver::CorrespondenceSet;
use hscnet_core::Tensor;
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| Vector3::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0))).collect()
}

pub fn vga() -> CameraIntrinsics {
    CameraIntrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 }
}

/// `n` correspondences seen from `pose`, a fraction of them replaced by
/// random scene points.
pub fn correspondences(n: usize, outlier_fraction: f64, pose: &RigidPose, seed: u64) -> CorrespondenceSet {
    let k = vga();
    let mut r = rng(seed);
    let mut set = CorrespondenceSet::default();
    for _ in 0..n {
        let px = Vector2::new(r.gen_range(0.0..639.0), r.gen_range(0.0..479.0));
        let mut y = backproject(&px, r.gen_range(1.0..6.0), pose, &k).expect("positive depth");
        if r.gen_bool(outlier_fraction) {
            y = pose.transform_point(&Vector3::new(r.gen_range(-4.0..4.0), r.gen_range(-3.0..3.0), r.gen_range(1.0..6.0)));
        }
        set.pixels.push(px);
        set.coords.push(y);
    }
    set
}
