use std::sync::Arc;

use collabmap_core::alignment::FrameRef;
use collabmap_core::camera::{register_color, CameraIntrinsics};
use collabmap_core::pipeline::{
    attempt_relocalisation, is_correct, AttemptLog, RelocCandidate, Verdict,
};
use collabmap_core::reloc::{
    BaselineConfig, BaselineRelocaliser, OracleConfig, OracleRelocaliser, RelocQuery, Relocaliser,
};
use collabmap_core::se3::pose_distance;
use collabmap_core::server::SimulationConfig;
use collabmap_core::sim::{
    make_overlapping_sequences_with, relative_truth, AgentSequence, FrameSource, SyntheticScene,
    SyntheticSource, TrajectoryConfig,
};
use collabmap_core::{RigidTransform, TsdfVolume};

#[test]
fn baseline_relocalises_held_out_frames() {
    let scene = SyntheticScene::generate(9);
    let cfg = TrajectoryConfig {
        arc_deg: 118.0,
        step_deg: 2.0,
        ..TrajectoryConfig::default()
    };
    let (agents, _) = make_overlapping_sequences_with(&scene, 1, 1.0, 9, &cfg);
    let agent = &agents[0];
    assert_eq!(agent.len(), 60);
    let k = CameraIntrinsics::default_depth();
    let frames: Vec<_> = (0..agent.len())
        .map(|i| scene.render(&agent.world_pose(i), &k))
        .collect();

    let mut hits = 0;
    for trial in 0..50u64 {
        let mut reloc = BaselineRelocaliser::new(BaselineConfig {
            seed: trial,
            ..BaselineConfig::default()
        });
        for i in (0..60).step_by(2) {
            let (d, c) = &frames[i];
            reloc.train(c, d, &agent.poses[i], &k);
        }
        let held_out = 2 * (trial as usize % 30) + 1;
        let (d, c) = &frames[held_out];
        let query = RelocQuery {
            color: c,
            depth: d,
            intrinsics: &k,
            source: None,
        };
        if let Some(p) = reloc.relocalise(&query) {
            if pose_distance(&p, &agent.poses[held_out]).is_within(0.05, 5.0) {
                hits += 1;
            }
        }
    }
    assert!(hits >= 40, "{hits} of 50 trials within 5cm/5°");
}

fn sub_scene(scene: &Arc<SyntheticScene>, agent: &AgentSequence) -> TsdfVolume {
    let mut src = SyntheticSource::new(scene.clone(), agent.clone());
    let (dk, ck) = (src.depth_intrinsics(), src.color_intrinsics());
    let mut vol = TsdfVolume::new(SimulationConfig::volume(0.025)).unwrap();
    for i in 0..src.len() {
        let f = src.frame(i).unwrap();
        let color = register_color(&f.depth, &dk, &f.color, &ck).unwrap();
        vol.integrate(&f.depth, &color, &f.pose, &dk).unwrap();
    }
    vol
}

#[test]
fn accepted_samples_recover_the_known_offset() {
    let sim = SimulationConfig {
        agents: 2,
        scene_seed: 3,
        trajectory_seed: 8,
        ..SimulationConfig::default()
    };
    let (scene, agents) = sim.agents_to_world();
    let offset = relative_truth(&agents, 0, 1);
    assert!(offset.translation().norm() > 0.05 || offset.angle_deg() > 5.0);
    let va = sub_scene(&scene, &agents[0]);
    let vb = sub_scene(&scene, &agents[1]);
    let k = CameraIntrinsics::default_depth();

    let truth: Arc<Vec<RigidTransform>> = Arc::new(agents.iter().map(|a| a.to_world).collect());
    let mut oracle = OracleRelocaliser::new(
        0,
        OracleConfig {
            inlier_noise_m: 0.005,
            inlier_noise_deg: 0.5,
            rng_seed: 3,
            ..OracleConfig::default()
        },
        truth,
    );
    let (d0, c0) = scene.render(&agents[0].world_pose(0), &k);
    oracle.train(&c0, &d0, &agents[0].poses[0], &k);

    let mut baseline = BaselineRelocaliser::new(BaselineConfig::default());
    for i in 0..agents[0].len() {
        let (d, c) = scene.render(&agents[0].world_pose(i), &k);
        baseline.train(&c, &d, &agents[0].poses[i], &k);
    }

    let mut log = AttemptLog::new();
    let mut oracle_accepted = 0;
    let mut baseline_accepted = 0;
    let mut baseline_correct = 0;
    for i in 0..10 {
        let candidate = RelocCandidate {
            target: 0,
            source: FrameRef {
                scene: 1,
                frame_index: i,
            },
            source_pose: agents[1].poses[i as usize],
        };
        let out = attempt_relocalisation(&candidate, &va, &vb, &oracle, &k, &mut log);
        if out.verdict() == Some(Verdict::Accepted) {
            oracle_accepted += 1;
            let d = pose_distance(&out.sample.unwrap().transform, &offset);
            assert!(d.is_within(0.02, 2.0), "frame {i}: {d:?}");
        }
        let out = attempt_relocalisation(&candidate, &va, &vb, &baseline, &k, &mut log);
        if out.verdict() == Some(Verdict::Accepted) {
            baseline_accepted += 1;
            if is_correct(&out.sample.unwrap().transform, &offset) {
                baseline_correct += 1;
            }
        }
    }
    assert!(
        oracle_accepted >= 5,
        "only {oracle_accepted} of 10 accepted"
    );
    assert!(baseline_accepted > 0);
    assert!(
        2 * baseline_correct > baseline_accepted,
        "baseline: {baseline_correct} of {baseline_accepted} accepted samples correct"
    );
    assert_eq!(log.len(), 20);
}

#[test]
fn exact_oracle_accepts_every_shared_viewpoint() {
    let sim = SimulationConfig {
        agents: 1,
        scene_seed: 5,
        trajectory_seed: 5,
        ..SimulationConfig::default()
    };
    let (scene, agents) = sim.agents_to_world();
    let a = agents[0].clone();
    let rebase = a.poses[a.len() / 2];
    let b = AgentSequence {
        to_world: a.to_world.compose(&rebase),
        poses: a
            .poses
            .iter()
            .map(|p| rebase.inverse().compose(p))
            .collect(),
    };
    let offset = relative_truth(&[a.clone(), b.clone()], 0, 1);
    let va = sub_scene(&scene, &a);
    let vb = sub_scene(&scene, &b);
    let k = CameraIntrinsics::default_depth();
    let truth: Arc<Vec<RigidTransform>> = Arc::new(vec![a.to_world, b.to_world]);
    let mut oracle = OracleRelocaliser::new(0, OracleConfig::default(), truth);
    let (d0, c0) = scene.render(&a.world_pose(0), &k);
    oracle.train(&c0, &d0, &a.poses[0], &k);

    let mut log = AttemptLog::new();
    let mut first: Option<RigidTransform> = None;
    for (i, pose) in b.poses.iter().enumerate() {
        let candidate = RelocCandidate {
            target: 0,
            source: FrameRef {
                scene: 1,
                frame_index: i as u64,
            },
            source_pose: *pose,
        };
        let out = attempt_relocalisation(&candidate, &va, &vb, &oracle, &k, &mut log);
        assert_eq!(
            out.verdict(),
            Some(Verdict::Accepted),
            "frame {i}: {:?}",
            out.report
        );
        let s = out.sample.unwrap();
        let recomposed = s.transform.compose(pose);
        assert!(pose_distance(&recomposed, &out.proposal.unwrap()).is_within(1e-9, 1e-7));
        assert!(pose_distance(&s.transform, &offset).is_within(1e-6, 1e-6));
        let f = *first.get_or_insert(s.transform);
        assert!(pose_distance(&s.transform, &f).is_within(1e-6, 1e-6));
    }
}
