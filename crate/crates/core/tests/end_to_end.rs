use collabmap_core::pipeline::{ScheduleMode, Verdict};
use collabmap_core::se3::pose_distance;
use collabmap_core::server::{
    run_synthetic_batch, BatchOutput, ServerConfig, SimulationConfig, StopReason,
};
use collabmap_core::sim::TrajectoryConfig;
use collabmap_core::RigidTransform;

fn server(mode: ScheduleMode) -> ServerConfig {
    ServerConfig {
        mode,
        volume: SimulationConfig::volume(0.025),
        seed: 3,
        ..ServerConfig::default()
    }
}

fn published(out: &BatchOutput, id: usize) -> RigidTransform {
    RigidTransform::from_array(&out.report.poses[&id]).unwrap()
}

#[test]
fn two_overlapping_scenes_exact_oracle() {
    let sim = SimulationConfig {
        agents: 2,
        scene_seed: 1,
        trajectory_seed: 1,
        ..SimulationConfig::default()
    };
    let out = run_synthetic_batch(&sim, server(ScheduleMode::Batch)).unwrap();
    assert_eq!(out.report.stop_reason, Some(StopReason::AllPairsConfident));
    assert_eq!(out.report.poses.len(), 2);
    assert_eq!(published(&out, 0), RigidTransform::identity());
    let d = pose_distance(&published(&out, 1), &out.truth_global[&1]);
    assert!(d.translation_m < 1e-6 && d.angle_deg < 1e-6, "{d:?}");
    for t in &out.transmissions {
        assert_eq!(t.discarded, 0);
        assert!(t.error.is_none());
    }
    assert_eq!(
        out.report.frames_fused[&0],
        out.transmissions[0].sent as usize
    );
    for r in out
        .records
        .iter()
        .filter(|r| r.verdict == Some(Verdict::Accepted))
    {
        assert_eq!(r.correct, Some(true), "attempt {}", r.attempt);
    }
}

#[test]
fn chain_of_three_scenes_is_posed_transitively() {
    let sim = SimulationConfig {
        agents: 3,
        scene_seed: 6,
        trajectory_seed: 2,
        overlap: 0.1,
        trajectory: TrajectoryConfig {
            arc_deg: 80.0,
            ..TrajectoryConfig::default()
        },
        ..SimulationConfig::default()
    };
    let out = run_synthetic_batch(&sim, server(ScheduleMode::Batch)).unwrap();
    let pair = |a, b| {
        out.report
            .pairs
            .iter()
            .find(|p| p.a == a && p.b == b)
            .unwrap()
    };
    assert!(pair(0, 1).confident);
    assert!(pair(1, 2).confident);
    assert_eq!(pair(0, 2).accepted, 0, "{:?}", pair(0, 2));
    assert_eq!(out.report.stop_reason, Some(StopReason::FailuresExhausted));
    assert_eq!(out.report.poses.len(), 3);
    for id in 1..3 {
        let d = pose_distance(&published(&out, id), &out.truth_global[&id]);
        assert!(
            d.translation_m < 1e-6 && d.angle_deg < 1e-6,
            "scene {id}: {d:?}"
        );
    }
}

#[test]
fn interactive_run_relocalises_while_streaming() {
    let sim = SimulationConfig {
        agents: 2,
        scene_seed: 1,
        trajectory_seed: 1,
        ..SimulationConfig::default()
    };
    let out = run_synthetic_batch(&sim, server(ScheduleMode::Interactive)).unwrap();
    assert_eq!(out.report.mode, ScheduleMode::Interactive);
    assert_eq!(out.report.stop_reason, Some(StopReason::StreamsEnded));
    let fused: usize = out.report.frames_fused.values().sum();
    assert!(
        out.report.attempts <= fused / 50,
        "{} attempts over {fused} frames",
        out.report.attempts
    );
    assert!(out.report.poses.contains_key(&0));
}
