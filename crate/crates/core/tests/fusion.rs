use std::collections::BTreeMap;
use std::sync::Arc;

use collabmap_core::camera::{register_color, CameraIntrinsics, DepthImage};
use collabmap_core::server::{fuse_global, SimulationConfig};
use collabmap_core::sim::{
    make_overlapping_sequences_with, FrameSource, SyntheticScene, SyntheticSource, TrajectoryConfig,
};
use collabmap_core::{extract_mesh, RigidTransform, TsdfVolume};

const VOXEL: f64 = 0.02;

fn agreement(reference: &DepthImage, raycast: &DepthImage, tol: f64) -> (usize, f64) {
    let mut both = 0usize;
    let mut close = 0usize;
    for (a, b) in reference.data.iter().zip(&raycast.data) {
        if *a > 0.0 && *b > 0.0 {
            both += 1;
            if ((a - b).abs() as f64) < tol {
                close += 1;
            }
        }
    }
    (both, close as f64 / both.max(1) as f64)
}

fn integrate_all(src: &mut SyntheticSource, frames: usize) -> TsdfVolume {
    let mut vol = TsdfVolume::new(SimulationConfig::volume(VOXEL)).unwrap();
    let (dk, ck) = (src.depth_intrinsics(), src.color_intrinsics());
    for i in 0..frames {
        let f = src.frame(i).unwrap();
        let color = register_color(&f.depth, &dk, &f.color, &ck).unwrap();
        vol.integrate(&f.depth, &color, &f.pose, &dk).unwrap();
    }
    vol
}

fn single_agent(arc_deg: f64, step_deg: f64) -> SyntheticSource {
    let scene = Arc::new(SyntheticScene::generate(4));
    let cfg = TrajectoryConfig {
        arc_deg,
        step_deg,
        ..TrajectoryConfig::default()
    };
    let (mut agents, _) = make_overlapping_sequences_with(&scene, 1, 1.0, 4, &cfg);
    SyntheticSource::new(scene, agents.remove(0))
}

#[test]
fn hundred_frames_raycast_matches_input_depth() {
    let mut src = single_agent(198.0, 2.0);
    assert_eq!(src.len(), 100);
    let vol = integrate_all(&mut src, 100);
    let k = src.depth_intrinsics();
    for i in (0..100).step_by(11) {
        let f = src.frame(i).unwrap();
        let (d, _) = vol.raycast(&f.pose, &k);
        let (both, frac) = agreement(&f.depth, &d, VOXEL);
        assert!(
            both > f.depth.valid_count() / 2,
            "frame {i}: only {both} co-valid pixels"
        );
        assert!(frac >= 0.90, "frame {i}: {frac:.3} within a voxel");
    }
}

#[test]
fn analytic_render_matches_raycast_between_training_poses() {
    let mut src = single_agent(100.0, 2.0);
    assert_eq!(src.len(), 51);
    let vol = integrate_all(&mut src, 50);
    let k = CameraIntrinsics::default_depth();
    for i in [5usize, 20, 35] {
        let a = src.agent.poses[i];
        let b = src.agent.poses[i + 1];
        let mid = a
            .compose(&RigidTransform::rotate_y(1.0))
            .with_translation((a.translation() + b.translation()) / 2.0);
        let (analytic, _) = src.scene.render(&src.agent.to_world.compose(&mid), &k);
        let (ray, _) = vol.raycast(&mid, &k);
        let (both, frac) = agreement(&analytic, &ray, VOXEL);
        assert!(both > analytic.valid_count() / 2);
        assert!(frac >= 0.90, "pose {i}+: {frac:.3} within a voxel");
    }
}

fn surface_rms(scene: &SyntheticScene, to_world: &RigidTransform, vol: &TsdfVolume) -> f64 {
    let mesh = extract_mesh(vol);
    assert!(!mesh.is_empty());
    let sum: f64 = mesh
        .vertices
        .iter()
        .map(|v| scene.sdf(&to_world.transform_point(v)).powi(2))
        .sum();
    (sum / mesh.vertices.len() as f64).sqrt()
}

fn two_agent_fusion(offset: RigidTransform) -> f64 {
    let sim = SimulationConfig {
        agents: 2,
        scene_seed: 2,
        trajectory_seed: 5,
        ..SimulationConfig::default()
    };
    let (scene, agents) = sim.agents_to_world();
    let w0 = agents[0].to_world;
    let mut poses = BTreeMap::new();
    poses.insert(0, RigidTransform::identity());
    poses.insert(
        1,
        offset.compose(&w0.inverse().compose(&agents[1].to_world)),
    );
    let mut sources: Vec<(usize, Box<dyn FrameSource>)> = agents
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            (
                i,
                Box::new(SyntheticSource::new(scene.clone(), a)) as Box<dyn FrameSource>,
            )
        })
        .collect();
    let vol = fuse_global(SimulationConfig::volume(VOXEL), &mut sources, &poses).unwrap();
    surface_rms(&scene, &w0, &vol)
}

#[test]
fn fused_two_agent_mesh_follows_room_geometry() {
    let good = two_agent_fusion(RigidTransform::identity());
    assert!(good < 2.0 * VOXEL, "rms {good}");
    let bad = two_agent_fusion(RigidTransform::from_translation(0.5, 0.0, 0.0));
    assert!(bad >= good + 0.1, "wrong pose rms {bad} vs {good}");
}
