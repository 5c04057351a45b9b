use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{QuerySource, RelocQuery, Relocaliser, SceneId};
use crate::camera::{CameraIntrinsics, ColorImage, DepthImage};
use crate::se3::RigidTransform;

/// Supplies the true pose of a query frame in a target scene.
pub trait GroundTruth: Send + Sync {
    fn pose_in_scene(&self, target: SceneId, source: &QuerySource) -> Option<RigidTransform>;
}

/// Ground truth from each scene's transform into a common world frame.
impl GroundTruth for Vec<RigidTransform> {
    fn pose_in_scene(&self, target: SceneId, source: &QuerySource) -> Option<RigidTransform> {
        let to_world_target = self.get(target)?;
        let to_world_source = self.get(source.scene)?;
        Some(
            to_world_target
                .inverse()
                .compose(to_world_source)
                .compose(&source.pose_in_source),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub inlier_noise_m: f64,
    pub inlier_noise_deg: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude_m: f64,
    pub outlier_magnitude_deg: f64,
    pub failure_rate: f64,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            inlier_noise_m: 0.0,
            inlier_noise_deg: 0.0,
            outlier_rate: 0.0,
            outlier_magnitude_m: 0.5,
            outlier_magnitude_deg: 30.0,
            failure_rate: 0.0,
            rng_seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("outlier_rate", self.outlier_rate),
            ("failure_rate", self.failure_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("inlier_noise_m", self.inlier_noise_m),
            ("inlier_noise_deg", self.inlier_noise_deg),
            ("outlier_magnitude_m", self.outlier_magnitude_m),
            ("outlier_magnitude_deg", self.outlier_magnitude_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Answers with the ground-truth pose, optionally corrupted by noise, gross
/// outliers or outright failure.
pub struct OracleRelocaliser {
    scene: SceneId,
    config: OracleConfig,
    truth: Arc<dyn GroundTruth>,
    trained_frames: usize,
    rng: Mutex<ChaCha8Rng>,
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

impl OracleRelocaliser {
    pub fn new(scene: SceneId, config: OracleConfig, truth: Arc<dyn GroundTruth>) -> Self {
        let seed = config
            .rng_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(scene as u64);
        Self {
            scene,
            config,
            truth,
            trained_frames: 0,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn trained_frames(&self) -> usize {
        self.trained_frames
    }

    /// Right-multiplies a camera-frame perturbation.
    fn perturb<R: Rng + ?Sized>(
        pose: &RigidTransform,
        rng: &mut R,
        sigma_m: f64,
        sigma_deg: f64,
        fixed: bool,
    ) -> RigidTransform {
        let draw = |rng: &mut R, s: f64| -> f64 {
            if fixed || s == 0.0 {
                s
            } else {
                Normal::new(0.0, s).map_or(0.0, |n| n.sample(rng))
            }
        };
        let axis = random_unit(rng);
        let angle = draw(rng, sigma_deg).to_radians();
        let dir = random_unit(rng);
        let len = draw(rng, sigma_m);
        let delta = RigidTransform::from_axis_angle(&axis, angle).with_translation(dir * len);
        pose.compose(&delta)
    }
}

impl Relocaliser for OracleRelocaliser {
    fn train(&mut self, _: &ColorImage, _: &DepthImage, _: &RigidTransform, _: &CameraIntrinsics) {
        self.trained_frames += 1;
    }

    fn relocalise(&self, query: &RelocQuery<'_>) -> Option<RigidTransform> {
        if self.trained_frames == 0 {
            return None;
        }
        let source = query.source?;
        let truth = self.truth.pose_in_scene(self.scene, &source)?;
        let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
        let c = &self.config;
        if rng.random::<f64>() < c.failure_rate {
            return None;
        }
        if rng.random::<f64>() < c.outlier_rate {
            return Some(Self::perturb(
                &truth,
                &mut *rng,
                c.outlier_magnitude_m,
                c.outlier_magnitude_deg,
                true,
            ));
        }
        if c.inlier_noise_m == 0.0 && c.inlier_noise_deg == 0.0 {
            return Some(truth);
        }
        Some(Self::perturb(
            &truth,
            &mut *rng,
            c.inlier_noise_m,
            c.inlier_noise_deg,
            false,
        ))
    }

    fn is_trained(&self) -> bool {
        self.trained_frames > 0
    }
}
