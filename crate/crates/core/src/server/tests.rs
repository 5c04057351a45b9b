use super::*;
use crate::wire::FrameMessage;
use nalgebra::Vector3;

fn small_k() -> CameraIntrinsics {
    CameraIntrinsics::new(40.0, 40.0, 23.5, 17.5, 48, 36).unwrap()
}

fn config(mode: ScheduleMode) -> ServerConfig {
    ServerConfig {
        mode,
        volume: VolumeConfig::centred([48, 48, 48], 0.05),
        feedback_intrinsics: small_k(),
        ..ServerConfig::default()
    }
}

fn state(n: usize, mode: ScheduleMode) -> ServerState {
    let truth: Arc<Vec<RigidTransform>> = Arc::new(vec![RigidTransform::identity(); n]);
    let mut s = ServerState::new(config(mode), Some(truth)).unwrap();
    for i in 0..n {
        s.add_client(i, &format!("c{i}"), small_k(), small_k())
            .unwrap();
    }
    s
}

fn wall_frame(index: u64, depth_m: f32) -> FrameMessage {
    let k = small_k();
    let depth =
        DepthImage::from_data(k.width, k.height, vec![depth_m; k.width * k.height]).unwrap();
    let color = ColorImage::filled(k.width, k.height, [200, 100, 50]);
    FrameMessage::encode(index, &RigidTransform::identity(), &depth, &color, 90).unwrap()
}

#[test]
fn oracle_requires_truth() {
    assert!(ServerState::new(config(ScheduleMode::Batch), None).is_err());
    let cfg = ServerConfig {
        reloc: RelocaliserKind::Baseline,
        ..config(ScheduleMode::Batch)
    };
    assert!(ServerState::new(cfg, None).is_ok());
}

#[test]
fn first_frame_builds_trajectory_and_volume() {
    let mut s = state(1, ScheduleMode::Batch);
    assert_eq!(
        s.ingest_frame(0, &wall_frame(3, 1.0)).unwrap(),
        IngestOutcome::Fused
    );
    let c = &s.components[&0];
    assert_eq!(c.trajectory.len(), 1);
    assert!(!c.volume.is_empty());
    assert!(c.relocaliser.is_trained());
}

#[test]
fn out_of_order_frames_are_dropped() {
    let mut s = state(1, ScheduleMode::Batch);
    s.ingest_frame(0, &wall_frame(5, 1.0)).unwrap();
    for idx in [5, 4] {
        assert_eq!(
            s.ingest_frame(0, &wall_frame(idx, 1.0)).unwrap(),
            IngestOutcome::DroppedOutOfOrder
        );
    }
    assert_eq!(s.components[&0].trajectory.len(), 1);
    assert_eq!(s.components[&0].frames_dropped, 2);
    assert!(matches!(
        s.ingest_frame(7, &wall_frame(0, 1.0)),
        Err(ServerError::UnknownClient(7))
    ));
}

#[test]
fn first_agent_is_always_published_as_identity() {
    let s = state(3, ScheduleMode::Batch);
    let snap = s.publisher().snapshot();
    assert_eq!(snap.len(), 1);
    assert_eq!(snap[&0], RigidTransform::identity());
}

#[test]
fn single_client_never_schedules() {
    let mut s = state(1, ScheduleMode::Interactive);
    for i in 0..120 {
        s.ingest_frame(0, &wall_frame(i, 1.0)).unwrap();
        assert!(s.relocalisation_step().is_none());
    }
    assert!(s.attempts.is_empty());
}

#[test]
fn interactive_attempts_are_fifty_frames_apart() {
    let mut s = state(2, ScheduleMode::Interactive);
    let mut fused_at_attempt = Vec::new();
    let mut fused = 0;
    for i in 0..200u64 {
        for c in 0..2 {
            s.ingest_frame(c, &wall_frame(i, 1.0)).unwrap();
            fused += 1;
            if s.relocalisation_step().is_some() {
                fused_at_attempt.push(fused);
            }
        }
    }
    assert!(fused_at_attempt.len() >= 7, "{fused_at_attempt:?}");
    assert!(fused_at_attempt[0] >= 50);
    assert!(fused_at_attempt.windows(2).all(|w| w[1] - w[0] >= 50));
}

#[test]
fn batch_waits_for_streams() {
    let mut s = state(2, ScheduleMode::Batch);
    for c in 0..2 {
        s.ingest_frame(c, &wall_frame(0, 1.0)).unwrap();
    }
    s.mark_finished(0);
    assert!(s.relocalisation_step().is_none());
    s.mark_finished(1);
    assert!(s.relocalisation_step().is_some());
}

#[test]
fn identical_scenes_become_posed() {
    let mut s = state(2, ScheduleMode::Batch);
    for i in 0..3 {
        for c in 0..2 {
            s.ingest_frame(c, &wall_frame(i, 1.0)).unwrap();
        }
    }
    s.mark_finished(0);
    s.mark_finished(1);
    let reason = s.run_batch_relocalisation();
    assert_eq!(reason, StopReason::AllPairsConfident);
    let snap = s.publisher().snapshot();
    assert!(pose_distance(&snap[&1], &RigidTransform::identity()).is_within(1e-6, 1e-4));
    let rep = s.last_optimisation.clone().unwrap();
    assert!((s.graph.as_ref().unwrap().residual(1.0) - rep.final_residual).abs() < 1e-12);
    let report = s.report(Some(reason));
    assert_eq!(report.pairs.len(), 1);
    assert!(report.pairs[0].confident);
    assert_eq!(report.attempts, s.records.len());
}

use crate::se3::pose_distance;

#[test]
fn budget_bounds_attempts() {
    let mut cfg = config(ScheduleMode::Batch);
    cfg.budget = 7;
    cfg.oracle.failure_rate = 1.0;
    let truth: Arc<Vec<RigidTransform>> = Arc::new(vec![RigidTransform::identity(); 2]);
    let mut s = ServerState::new(cfg, Some(truth)).unwrap();
    for c in 0..2 {
        s.add_client(c, "x", small_k(), small_k()).unwrap();
        s.ingest_frame(c, &wall_frame(0, 1.0)).unwrap();
        s.mark_finished(c);
    }
    assert_eq!(s.run_batch_relocalisation(), StopReason::BudgetExhausted);
    assert_eq!(s.attempts.len(), 7);
}

#[test]
fn consecutive_failures_stop_batch() {
    let mut cfg = config(ScheduleMode::Batch);
    cfg.max_consecutive_failures = 4;
    cfg.oracle.failure_rate = 1.0;
    let truth: Arc<Vec<RigidTransform>> = Arc::new(vec![RigidTransform::identity(); 2]);
    let mut s = ServerState::new(cfg, Some(truth)).unwrap();
    for c in 0..2 {
        s.add_client(c, "x", small_k(), small_k()).unwrap();
        s.ingest_frame(c, &wall_frame(0, 1.0)).unwrap();
        s.mark_finished(c);
    }
    assert_eq!(s.run_batch_relocalisation(), StopReason::FailuresExhausted);
    assert_eq!(s.attempts.len(), 4);
}

#[test]
fn feedback_is_round_robin_and_latest_only() {
    let mut f = FeedbackScheduler::default();
    assert!(f.take_next().is_none());
    let p = |x: f64| RigidTransform::from_translation(x, 0.0, 0.0);
    let mut served = Vec::new();
    for round in 0..2 {
        f.request(0, p(round as f64));
        f.request(1, p(round as f64));
        served.push(f.take_next().unwrap().0);
        served.push(f.take_next().unwrap().0);
    }
    assert_eq!(served, vec![0, 1, 0, 1]);
    for i in 0..5 {
        f.request(2, p(i as f64));
    }
    let (id, pose) = f.take_next().unwrap();
    assert_eq!((id, pose), (2, p(4.0)));
    assert!(f.take_next().is_none());
}

#[test]
fn round_robin_wraps_past_the_last_served() {
    let mut f = FeedbackScheduler::default();
    let i = RigidTransform::identity();
    f.request(0, i);
    f.request(1, i);
    f.request(2, i);
    assert_eq!(f.take_next().unwrap().0, 0);
    f.request(0, i);
    assert_eq!(f.take_next().unwrap().0, 1);
    assert_eq!(f.take_next().unwrap().0, 2);
    assert_eq!(f.take_next().unwrap().0, 0);
}

#[test]
fn feedback_step_renders_requested_view() {
    let mut s = state(1, ScheduleMode::Interactive);
    s.ingest_frame(0, &wall_frame(0, 1.0)).unwrap();
    s.feedback.request(0, RigidTransform::identity());
    let (client, img) = s.feedback_step().unwrap();
    assert_eq!(client, 0);
    let col = codec::decode_color_jpeg(&img.jpeg).unwrap();
    assert_eq!((col.width, col.height), (48, 36));
    let centre = col.get(24, 18);
    assert!(centre[0] > 150 && centre[2] < 100, "{centre:?}");
    assert!(s.feedback_step().is_none());
}

#[test]
fn single_agent_render_matches_raycast() {
    let mut s = state(1, ScheduleMode::Batch);
    s.ingest_frame(0, &wall_frame(0, 1.0)).unwrap();
    let k = small_k();
    let r = s.render_global(&RigidTransform::identity(), &k).unwrap();
    let (d, c) = s.components[&0]
        .volume
        .raycast(&RigidTransform::identity(), &k);
    assert_eq!(r.color, c);
    assert_eq!(r.depth, d);
}

#[test]
fn unposed_agents_are_excluded() {
    let mut s = state(2, ScheduleMode::Batch);
    s.ingest_frame(1, &wall_frame(0, 1.0)).unwrap();
    let r = s
        .render_global(&RigidTransform::identity(), &small_k())
        .unwrap();
    assert_eq!(r.agents.len(), 1);
    assert!(r.winner.iter().all(Option::is_none));
}

fn image(
    k: &CameraIntrinsics,
    f: impl Fn(usize, usize) -> f32,
    rgb: [u8; 3],
) -> (DepthImage, ColorImage) {
    let mut d = DepthImage::new(k.width, k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            d.set(x, y, f(x, y));
        }
    }
    (d, ColorImage::filled(k.width, k.height, rgb))
}

#[test]
fn disjoint_masks_form_a_union() {
    let k = small_k();
    let (d0, c0) = image(&k, |x, _| if x < 20 { 1.0 } else { 0.0 }, [255, 0, 0]);
    let (d1, c1) = image(&k, |x, _| if x >= 30 { 2.0 } else { 0.0 }, [0, 255, 0]);
    let r = composite(vec![(1, d1, c1), (0, d0, c0)], &k);
    for y in 0..k.height {
        for x in 0..k.width {
            let p = y * k.width + x;
            let want = if x < 20 {
                Some(0)
            } else if x >= 30 {
                Some(1)
            } else {
                None
            };
            assert_eq!(r.winner[p], want);
            if want.is_none() {
                assert_eq!(r.color.data[p], [0, 0, 0]);
            }
        }
    }
}

#[test]
fn nearest_surface_wins_with_ties_to_lower_id() {
    let k = small_k();
    let (d0, c0) = image(
        &k,
        |x, y| 1.0 + ((x * 7 + y * 3) % 5) as f32 * 0.1,
        [255, 0, 0],
    );
    let (d1, c1) = image(
        &k,
        |x, y| 1.0 + ((x * 3 + y * 5) % 5) as f32 * 0.1,
        [0, 0, 255],
    );
    let r = composite(vec![(0, d0.clone(), c0), (1, d1.clone(), c1)], &k);
    let mut ties = 0;
    for p in 0..d0.data.len() {
        let (a, b) = (d0.data[p], d1.data[p]);
        let want = if b < a { 1 } else { 0 };
        ties += usize::from(a == b);
        assert_eq!(r.winner[p], Some(want));
        assert_eq!(r.depth.data[p], a.min(b));
    }
    assert!(ties > 0);
}

#[test]
fn publisher_swaps_whole_sets() {
    let p = Arc::new(PosePublisher::default());
    let writer = {
        let p = p.clone();
        std::thread::spawn(move || {
            for i in 0..2000 {
                let v = i as f64;
                let t = RigidTransform::from_translation(v, 0.0, 0.0);
                p.publish((0..4).map(|k| (k, t)).collect());
            }
        })
    };
    for _ in 0..2000 {
        let snap = p.snapshot();
        let xs: Vec<f64> = snap.values().map(|t| t.translation().x).collect();
        assert!(xs.windows(2).all(|w| w[0] == w[1]));
    }
    writer.join().unwrap();
}

#[test]
fn fusing_one_scene_reproduces_its_volume() {
    let k = small_k();
    let mut s = state(1, ScheduleMode::Batch);
    let poses: Vec<RigidTransform> = (0..3)
        .map(|i| {
            RigidTransform::rotate_y(i as f64 * 5.0).with_translation(Vector3::new(
                0.05 * i as f64,
                0.0,
                0.0,
            ))
        })
        .collect();
    let mut frames = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        let (d, c) = image(&k, |x, _| 1.0 + x as f32 * 0.005, [90, 120, 150]);
        let mut msg = FrameMessage::encode(i as u64, p, &d, &c, 90).unwrap();
        msg.local_pose = *p;
        s.ingest_frame(0, &msg).unwrap();
        frames.push((msg.depth().unwrap(), msg.color().unwrap(), *p));
    }
    struct Replay {
        frames: Vec<(DepthImage, ColorImage, RigidTransform)>,
        k: CameraIntrinsics,
    }
    impl FrameSource for Replay {
        fn depth_intrinsics(&self) -> CameraIntrinsics {
            self.k
        }
        fn color_intrinsics(&self) -> CameraIntrinsics {
            self.k
        }
        fn len(&self) -> usize {
            self.frames.len()
        }
        fn tracked(&self, _: usize) -> bool {
            true
        }
        fn frame(&mut self, i: usize) -> Result<crate::sim::SourceFrame, String> {
            let (d, c, p) = self.frames[i].clone();
            Ok(crate::sim::SourceFrame {
                index: i as u64,
                depth: d,
                color: c,
                pose: p,
                tracked: true,
            })
        }
    }
    let mut sources: Vec<(SceneId, Box<dyn FrameSource>)> =
        vec![(0, Box::new(Replay { frames, k }))];
    let poses = BTreeMap::from([(0, RigidTransform::identity())]);
    let fused = fuse_global(s.config.volume, &mut sources, &poses).unwrap();
    let view = RigidTransform::rotate_y(3.0);
    assert_eq!(
        fused.raycast(&view, &k),
        s.components[&0].volume.raycast(&view, &k)
    );
}

#[test]
fn spooled_frames_fuse_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(ScheduleMode::Batch);
    cfg.spool_dir = Some(dir.path().to_path_buf());
    let truth: Arc<Vec<RigidTransform>> = Arc::new(vec![RigidTransform::identity()]);
    let mut s = ServerState::new(cfg, Some(truth)).unwrap();
    s.add_client(0, "x", small_k(), small_k()).unwrap();
    for i in [2u64, 5, 9] {
        s.ingest_frame(0, &wall_frame(i, 1.0 + i as f32 * 0.01))
            .unwrap();
    }
    let poses = BTreeMap::from([(0, RigidTransform::identity())]);
    let fused = fuse_from_disk(s.config.volume, dir.path(), &poses).unwrap();
    let k = small_k();
    let id = RigidTransform::identity();
    assert_eq!(
        fused.raycast(&id, &k),
        s.components[&0].volume.raycast(&id, &k)
    );

    let missing = BTreeMap::from([(0, id), (3, id)]);
    assert!(fuse_from_disk(s.config.volume, dir.path(), &missing).is_err());
    std::fs::remove_file(dir.path().join("scene-000/frame-000001.pose.txt")).unwrap();
    let err = fuse_from_disk(s.config.volume, dir.path(), &poses).unwrap_err();
    assert!(err.to_string().contains("gap"), "{err}");
}

#[test]
fn scene_ids_parse_from_directory_names() {
    assert_eq!(scene_id_of(Path::new("/x/scene-012")), Some(12));
    assert_eq!(scene_id_of(Path::new("/x/other")), None);
}
