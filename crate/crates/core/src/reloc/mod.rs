//! Per-sub-scene camera relocalisers.
//!
//! A relocaliser is trained online from posed frames of its own sub-scene and
//! later asked for the pose of an arbitrary image in that sub-scene.

mod baseline;
mod kdtree;
mod oracle;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, ColorImage, DepthImage};
use crate::se3::RigidTransform;

pub use baseline::{BaselineConfig, BaselineRelocaliser, DESCRIPTOR_LEN};
pub use kdtree::KdTree;
pub use oracle::{GroundTruth, OracleConfig, OracleRelocaliser};

pub type SceneId = usize;

/// Where a query image came from. Only evaluation harnesses (the oracle) look
/// at this; real relocalisers use the pixels alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuerySource {
    pub scene: SceneId,
    pub frame_index: u64,
    /// Camera-to-world pose of the query in the source scene.
    pub pose_in_source: RigidTransform,
}

#[derive(Debug, Clone, Copy)]
pub struct RelocQuery<'a> {
    pub color: &'a ColorImage,
    pub depth: &'a DepthImage,
    pub intrinsics: &'a CameraIntrinsics,
    pub source: Option<QuerySource>,
}

pub trait Relocaliser: Send + Sync {
    /// Adds a frame with known camera-to-world pose in this sub-scene.
    fn train(
        &mut self,
        color: &ColorImage,
        depth: &DepthImage,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
    );

    /// Estimated camera-to-world pose of the query in this sub-scene.
    fn relocalise(&self, query: &RelocQuery<'_>) -> Option<RigidTransform>;

    fn is_trained(&self) -> bool;

    /// Frees training-only buffers. Nothing to free for the implementations here.
    fn release_training_data(&mut self) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RelocaliserKind {
    #[default]
    Oracle,
    Baseline,
}

impl std::str::FromStr for RelocaliserKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "baseline" => Ok(Self::Baseline),
            _ => Err(format!(
                "unknown relocaliser '{s}' (expected oracle or baseline)"
            )),
        }
    }
}

/// Least-squares rigid transform mapping `src` onto `dst`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (p - cs) * (q - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    if !r.iter().all(|x| x.is_finite()) {
        return None;
    }
    let t = cd - r * cs;
    Some(RigidTransform::from_rotation_matrix(&r, t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    /// Minimal samples whose triangle area falls below this are skipped.
    pub min_triangle_area: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 0.05,
            min_triangle_area: 1e-8,
        }
    }
}

fn count_inliers(
    t: &RigidTransform,
    corr: &[(Vector3<f64>, Vector3<f64>)],
    thresh: f64,
    out: &mut Vec<usize>,
) {
    out.clear();
    let r = t.rotation_matrix();
    let tr = t.translation();
    for (i, (p, q)) in corr.iter().enumerate() {
        if (r * p + tr - q).norm() < thresh {
            out.push(i);
        }
    }
}

/// RANSAC over three-point minimal samples with a Kabsch refit on the best
/// consensus set. Correspondences are `(source, target)` pairs; the result
/// maps source points onto target points. Returns `None` with fewer than three
/// correspondences or when every minimal sample was degenerate.
pub fn kabsch_ransac<R: Rng + ?Sized>(
    corr: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &RansacConfig,
    rng: &mut R,
) -> Option<(RigidTransform, usize)> {
    let n = corr.len();
    if n < 3 {
        return None;
    }
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    let mut inliers = Vec::with_capacity(n);
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for m in [i.min(j), i.max(j)] {
            if k >= m {
                k += 1;
            }
        }
        let idx = [i, j, k];
        let src: Vec<_> = idx.iter().map(|&x| corr[x].0).collect();
        let dst: Vec<_> = idx.iter().map(|&x| corr[x].1).collect();
        let area = |p: &[Vector3<f64>]| 0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        if area(&src) < cfg.min_triangle_area || area(&dst) < cfg.min_triangle_area {
            continue;
        }
        let Some(t) = kabsch(&src, &dst) else {
            continue;
        };
        count_inliers(&t, corr, cfg.inlier_threshold, &mut inliers);
        if best.as_ref().is_none_or(|(_, b)| inliers.len() > b.len()) {
            best = Some((t, inliers.clone()));
        }
    }
    let (t, set) = best?;
    if set.len() >= 3 {
        let src: Vec<_> = set.iter().map(|&x| corr[x].0).collect();
        let dst: Vec<_> = set.iter().map(|&x| corr[x].1).collect();
        if let Some(refit) = kabsch(&src, &dst) {
            count_inliers(&refit, corr, cfg.inlier_threshold, &mut inliers);
            if inliers.len() >= set.len() {
                return Some((refit, inliers.len()));
            }
        }
    }
    Some((t, set.len()))
}
