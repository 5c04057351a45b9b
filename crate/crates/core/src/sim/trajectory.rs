//! Camera paths for simulated agents with known inter-agent transforms.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::se3::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Yaw swept by each agent, degrees.
    pub arc_deg: f64,
    /// Yaw increment between frames, degrees.
    pub step_deg: f64,
    /// Downward tilt of the camera, degrees.
    pub pitch_deg: f64,
    /// Radius of the disc around the room centre the agents start in.
    pub start_radius: f64,
    /// Distance each agent drifts over its sweep.
    pub drift: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            arc_deg: 150.0,
            step_deg: 4.0,
            pitch_deg: 12.0,
            start_radius: 0.25,
            drift: 0.2,
        }
    }
}

/// One agent's camera path.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSequence {
    /// Maps the agent's local coordinates into scene coordinates; equal to
    /// its first camera pose.
    pub to_world: RigidTransform,
    /// Camera-to-local poses, 5 Hz spacing. The first is the identity.
    pub poses: Vec<RigidTransform>,
}

impl AgentSequence {
    pub fn world_pose(&self, i: usize) -> RigidTransform {
        self.to_world.compose(&self.poses[i])
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Ground-truth `T_ab` mapping agent b's local coordinates into agent a's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTruth {
    pub a: usize,
    pub b: usize,
    pub transform: RigidTransform,
}

pub fn relative_truth(agents: &[AgentSequence], a: usize, b: usize) -> RigidTransform {
    agents[a].to_world.inverse().compose(&agents[b].to_world)
}

/// Yaw sweeps from near the room centre. Consecutive agents start
/// `arc * (1 - overlap_fraction)` apart, so neighbours share that fraction
/// of their sweep.
pub fn make_overlapping_sequences(
    scene: &SyntheticScene,
    n_agents: usize,
    overlap_fraction: f64,
    seed: u64,
) -> (Vec<AgentSequence>, Vec<PairTruth>) {
    make_overlapping_sequences_with(
        scene,
        n_agents,
        overlap_fraction,
        seed,
        &TrajectoryConfig::default(),
    )
}

pub fn make_overlapping_sequences_with(
    scene: &SyntheticScene,
    n_agents: usize,
    overlap_fraction: f64,
    seed: u64,
    cfg: &TrajectoryConfig,
) -> (Vec<AgentSequence>, Vec<PairTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let overlap = overlap_fraction.clamp(1e-6, 1.0);
    let centre = (scene.room_min + scene.room_max) / 2.0;
    let base_yaw: f64 = rng.random_range(0.0..360.0);
    let frames = ((cfg.arc_deg / cfg.step_deg).round() as usize).max(1) + 1;
    let mut agents = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let r = cfg.start_radius * rng.random::<f64>().sqrt();
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let start =
            centre + Vector3::new(r * phi.cos(), rng.random_range(-0.3..-0.1), r * phi.sin());
        let drift_dir = {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Vector3::new(a.cos(), 0.0, a.sin())
        };
        let yaw0 = base_yaw + i as f64 * cfg.arc_deg * (1.0 - overlap);
        let roll = rng.random_range(-3.0..3.0);
        let world: Vec<RigidTransform> = (0..frames)
            .map(|f| {
                let s = f as f64 / (frames - 1).max(1) as f64;
                let yaw = yaw0 + s * cfg.arc_deg;
                let pitch = -cfg.pitch_deg + 4.0 * (s * std::f64::consts::PI * 2.0).sin();
                let rot = RigidTransform::rotate_y(yaw)
                    .compose(&RigidTransform::rotate_x(pitch))
                    .compose(&RigidTransform::rotate_z(roll));
                rot.with_translation(start + drift_dir * (cfg.drift * s))
            })
            .collect();
        let to_world = world[0];
        let inv = to_world.inverse();
        let poses = world.iter().map(|p| inv.compose(p)).collect();
        agents.push(AgentSequence { to_world, poses });
    }
    let mut truths = Vec::new();
    for a in 0..n_agents {
        for b in a + 1..n_agents {
            truths.push(PairTruth {
                a,
                b,
                transform: relative_truth(&agents, a, b),
            });
        }
    }
    (agents, truths)
}

/// Per-frame tracking flags with the given failure probability.
pub fn tracking_flags(n: usize, failure_rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7AC4);
    (0..n)
        .map(|_| rng.random::<f64>() >= failure_rate)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::pose_distance;

    #[test]
    fn single_agent_has_no_truths() {
        let scene = SyntheticScene::generate(0);
        let (agents, truths) = make_overlapping_sequences(&scene, 1, 0.5, 1);
        assert_eq!(agents.len(), 1);
        assert!(truths.is_empty());
    }

    #[test]
    fn local_frames_start_at_identity_and_move_smoothly() {
        let scene = SyntheticScene::generate(0);
        let (agents, _) = make_overlapping_sequences(&scene, 3, 0.5, 2);
        for a in &agents {
            let d0 = pose_distance(&a.poses[0], &RigidTransform::identity());
            assert!(d0.translation_m < 1e-12 && d0.angle_deg < 1e-9, "{d0:?}");
            for w in a.poses.windows(2) {
                let d = pose_distance(&w[0], &w[1]);
                assert!(d.is_within(0.1, 10.0), "{d:?}");
            }
        }
    }

    #[test]
    fn cycle_is_consistent() {
        let scene = SyntheticScene::generate(0);
        let (_, t) = make_overlapping_sequences(&scene, 3, 0.5, 3);
        let get = |a, b| t.iter().find(|p| p.a == a && p.b == b).unwrap().transform;
        let cycle = get(0, 1).compose(&get(1, 2)).compose(&get(0, 2).inverse());
        let d = pose_distance(&cycle, &RigidTransform::identity());
        assert!(d.translation_m < 1e-12 && d.angle_deg < 1e-10, "{d:?}");
    }

    #[test]
    fn tracking_failures_follow_rate() {
        let flags = tracking_flags(10_000, 0.1, 4);
        let ok = flags.iter().filter(|f| **f).count();
        assert!((ok as f64 / 10_000.0 - 0.9).abs() < 0.02);
        assert_eq!(flags, tracking_flags(10_000, 0.1, 4));
    }
}
