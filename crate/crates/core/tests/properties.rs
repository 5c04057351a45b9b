use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use collabmap_core::alignment::{
    optimise, FrameRef, PairClusterSet, PoseGraph, PoseGraphEdge, RelativeTransformSample,
    CONFIDENCE_THRESHOLD,
};
use collabmap_core::camera::{CameraIntrinsics, ColorImage, DepthImage};
use collabmap_core::pipeline::{
    generate_candidates, score_candidate, verify_depth, AttemptLog, SceneTrack, SchedulerView,
    Verdict,
};
use collabmap_core::reloc::{
    BaselineConfig, BaselineRelocaliser, OracleConfig, OracleRelocaliser, QuerySource, RelocQuery,
    Relocaliser,
};
use collabmap_core::se3::{dqb_blend, error_vector, pose_distance};
use collabmap_core::sim::SyntheticScene;
use collabmap_core::volume::ray_box_interval;
use collabmap_core::wire::codec::{decode_depth_png_mm, encode_depth_png};
use collabmap_core::wire::{
    read_message, write_message, FrameMessage, Message, OverflowPolicy, PooledQueue,
};
use collabmap_core::{extract_mesh, RigidTransform, TsdfVolume, VolumeConfig};

fn transform() -> impl Strategy<Value = RigidTransform> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        -3.1f64..3.1,
        prop::array::uniform3(-5.0f64..5.0),
    )
        .prop_filter("axis must be non-degenerate", |(axis, _, _)| {
            Vector3::from(*axis).norm() > 1e-3
        })
        .prop_map(|(axis, angle, t)| {
            RigidTransform::from_axis_angle(&Vector3::from(axis), angle)
                .with_translation(Vector3::from(t))
        })
}

fn small_transform(max_m: f64, max_deg: f64) -> impl Strategy<Value = RigidTransform> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.0f64..1.0,
        prop::array::uniform3(-1.0f64..1.0),
    )
        .prop_filter("axis must be non-degenerate", |(axis, _, _)| {
            Vector3::from(*axis).norm() > 1e-3
        })
        .prop_map(move |(axis, s, t)| {
            let t = Vector3::from(t);
            let t = if t.norm() > 1.0 { t / t.norm() } else { t };
            RigidTransform::from_axis_angle(&Vector3::from(axis), s * max_deg.to_radians())
                .with_translation(t * max_m)
        })
}

fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
    let d = pose_distance(a, b);
    d.translation_m < tol && d.angle_deg.to_radians() < tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn right_multiplication_preserves_relative_angle(a in transform(), b in transform(), t in transform()) {
        let before = pose_distance(&a, &b).angle_deg;
        let after = pose_distance(&a.compose(&t), &b.compose(&t)).angle_deg;
        prop_assert!((before - after).abs() < 1e-6, "{before} vs {after}");
    }

    #[test]
    fn blend_ignores_uniform_weight_scale(
        ts in prop::collection::vec(small_transform(0.5, 40.0), 1..6),
        ws in prop::collection::vec(0.1f64..10.0, 6),
        scale in 0.01f64..100.0,
    ) {
        let w = &ws[..ts.len()];
        let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
        let a = dqb_blend(&ts, Some(w)).unwrap();
        let b = dqb_blend(&ts, Some(&scaled)).unwrap();
        prop_assert!(close(&a, &b, 1e-12), "{a:?} vs {b:?}");
    }

    #[test]
    fn error_vector_vanishes_only_at_identity(t in transform()) {
        let e = error_vector(&t).norm();
        let is_identity = t.translation().norm() < 1e-9 && t.angle_deg().to_radians() < 1e-9;
        prop_assert_eq!(e < 1e-9, is_identity);
        prop_assert!(error_vector(&t.compose(&t.inverse())).norm() < 1e-9);
    }

    #[test]
    fn compose_invert_round_trips(a in transform(), b in transform()) {
        prop_assert!(close(&a.inverse().inverse(), &a, 1e-9));
        prop_assert!(close(&a.compose(&b).compose(&b.inverse()), &a, 1e-9));
        prop_assert!(close(&a.inverse().compose(&a.compose(&b)), &b, 1e-9));
        let bytes = RigidTransform::from_le_bytes(&a.to_le_bytes()).unwrap();
        prop_assert_eq!(bytes, a);
        let text = RigidTransform::parse_text(&a.to_text()).unwrap();
        prop_assert!(close(&text, &a, 1e-9));
    }
}

fn plane_volume(distance: f32, tilt: RigidTransform) -> TsdfVolume {
    let k = CameraIntrinsics::default_depth();
    let mut cfg = VolumeConfig::centred([64, 64, 64], 0.04);
    cfg.origin[2] = 0.4;
    let mut vol = TsdfVolume::new(cfg).unwrap();
    let depth = DepthImage::from_data(k.width, k.height, vec![distance; k.pixel_count()]).unwrap();
    let color = ColorImage::filled(k.width, k.height, [90, 120, 150]);
    vol.integrate(&depth, &color, &tilt, &k).unwrap();
    vol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn raycast_mask_lies_inside_the_bounding_box(
        distance in 1.0f32..2.5,
        tilt in small_transform(0.2, 15.0),
        view in transform(),
    ) {
        let vol = plane_volume(distance, tilt);
        let k = CameraIntrinsics::default_depth();
        let (lo, hi) = vol.config().bounds();
        for pose in [tilt, view] {
            let (depth, _) = vol.raycast(&pose, &k);
            let rot = pose.rotation_matrix();
            for y in 0..k.height {
                for x in 0..k.width {
                    if depth.get(x, y) > 0.0 {
                        let dir = rot * k.ray(x as f64, y as f64);
                        prop_assert!(ray_box_interval(pose.translation(), &dir, &lo, &hi).is_some());
                    }
                }
            }
        }
    }

    #[test]
    fn meshes_are_finite_and_non_degenerate(distance in 1.0f32..2.5, tilt in small_transform(0.2, 20.0)) {
        let vol = plane_volume(distance, tilt);
        let mesh = extract_mesh(&vol);
        prop_assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            prop_assert!(v.iter().all(|c| c.is_finite()));
        }
        for f in &mesh.faces {
            prop_assert!(mesh.triangle_area(f) > 1e-12);
        }
    }
}

fn depth_pair() -> impl Strategy<Value = (DepthImage, DepthImage)> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        let px = || prop_oneof![Just(0.0f32), 0.3f32..4.0];
        (
            prop::collection::vec(px(), w * h),
            prop::collection::vec(px(), w * h),
        )
            .prop_map(move |(a, b)| {
                (
                    DepthImage::from_data(w, h, a).unwrap(),
                    DepthImage::from_data(w, h, b).unwrap(),
                )
            })
    })
}

fn reference_verdict(da: &DepthImage, db: &DepthImage) -> Verdict {
    let valid = |d: f32| d.is_finite() && d > 0.0;
    let covered = da.data.iter().filter(|d| valid(**d)).count();
    if covered as f64 / da.data.len() as f64 <= 0.5 {
        return Verdict::RejectedCoverage;
    }
    let diffs: Vec<f64> = da
        .data
        .iter()
        .zip(&db.data)
        .filter(|(a, b)| valid(**a) && valid(**b))
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
        .collect();
    if diffs.is_empty() {
        Verdict::RejectedEmptyOverlap
    } else if diffs.iter().sum::<f64>() / (diffs.len() as f64) < 0.05 {
        Verdict::Accepted
    } else {
        Verdict::RejectedDepthDiff
    }
}

proptest! {
    #[test]
    fn verdict_depends_only_on_the_pixel_pairs((da, db) in depth_pair(), shift in 0usize..1000) {
        let first = verify_depth(&da, &db).unwrap();
        prop_assert_eq!(verify_depth(&da, &db).unwrap(), first);
        prop_assert_eq!(first.verdict, reference_verdict(&da, &db));
        let n = da.data.len();
        let mut ra = da.data.clone();
        let mut rb = db.data.clone();
        ra.rotate_left(shift % n);
        rb.rotate_left(shift % n);
        let ra = DepthImage::from_data(da.width, da.height, ra).unwrap();
        let rb = DepthImage::from_data(db.width, db.height, rb).unwrap();
        let rotated = verify_depth(&ra, &rb).unwrap();
        prop_assert_eq!(rotated.verdict, first.verdict);
        prop_assert_eq!((rotated.omega_a, rotated.omega_b, rotated.omega_ab), (first.omega_a, first.omega_b, first.omega_ab));
    }

    #[test]
    fn score_total_is_the_signed_sum(
        seed in any::<u64>(),
        n_scenes in 2usize..5,
        posed_mask in any::<u8>(),
        cluster_sizes in prop::collection::vec(0usize..6, 10),
        repeats in prop::collection::vec(any::<bool>(), 10),
    ) {
        let trajectories: Vec<Vec<(u64, RigidTransform)>> = (0..n_scenes)
            .map(|s| (0..4u64).map(|i| (i, RigidTransform::from_translation(s as f64, i as f64 * 0.2, 0.0))).collect())
            .collect();
        let scenes: Vec<SceneTrack> = trajectories
            .iter()
            .enumerate()
            .map(|(id, t)| SceneTrack { id, trajectory: t })
            .collect();
        let posed: BTreeSet<usize> = (0..n_scenes).filter(|i| posed_mask & (1 << i) != 0).collect();
        let mut clusters = BTreeMap::new();
        let mut k = 0;
        for a in 0..n_scenes {
            for b in a + 1..n_scenes {
                let mut set = PairClusterSet::new(a, b);
                for i in 0..cluster_sizes[k % 10] {
                    set.add_sample(RelativeTransformSample {
                        a,
                        b,
                        transform: RigidTransform::identity(),
                        frame: FrameRef { scene: b, frame_index: i as u64 },
                    }).unwrap();
                }
                clusters.insert((a, b), set);
                k += 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let candidates = generate_candidates(&scenes, &mut rng);
        let mut attempts = AttemptLog::new();
        for (c, r) in candidates.iter().zip(&repeats) {
            if *r {
                attempts.record(c.target, c.source.scene, c.source_pose);
            }
        }
        let view = SchedulerView { scenes: &scenes, posed: &posed, clusters: &clusters, attempts: &attempts };
        for c in &candidates {
            let s = score_candidate(c, &view);
            prop_assert_eq!(s.total, s.phi_new - s.phi_conf - s.phi_homog);
            let expect_new = posed.contains(&c.target) != posed.contains(&c.source.scene);
            prop_assert_eq!(s.phi_new, if expect_new { 1.0 } else { 0.0 });
            let pair = (c.target.min(c.source.scene), c.target.max(c.source.scene));
            let largest = clusters[&pair].largest_size();
            prop_assert_eq!(s.phi_conf, largest.saturating_sub(CONFIDENCE_THRESHOLD) as f64);
            prop_assert!(s.phi_homog == 0.0 || s.phi_homog == 5.0);
        }
    }
}

fn sample(i: usize, t: RigidTransform) -> RelativeTransformSample {
    RelativeTransformSample {
        a: 0,
        b: 1,
        transform: t,
        frame: FrameRef {
            scene: 1,
            frame_index: i as u64,
        },
    }
}

proptest! {
    #[test]
    fn clusters_partition_the_stream(stream in prop::collection::vec(small_transform(0.4, 60.0), 1..40)) {
        let build = || {
            let mut set = PairClusterSet::new(0, 1);
            for (i, t) in stream.iter().enumerate() {
                set.add_sample(sample(i, *t)).unwrap();
            }
            set
        };
        let set = build();
        let mut seen = HashSet::new();
        for c in &set.clusters {
            for m in &c.members {
                prop_assert!(seen.insert(m.frame.frame_index), "sample in two clusters");
            }
        }
        prop_assert_eq!(seen.len(), stream.len());
        prop_assert_eq!(set.sample_count(), stream.len());
        prop_assert_eq!(build(), set);
    }

    #[test]
    fn residual_is_gauge_invariant(
        truth in prop::collection::vec(transform(), 3),
        noise in prop::collection::vec(small_transform(0.05, 5.0), 3),
        gauge in transform(),
    ) {
        let edges: Vec<PoseGraphEdge> = [(0usize, 1usize), (1, 2), (0, 2)]
            .iter()
            .zip(&noise)
            .map(|(&(a, b), n)| PoseGraphEdge {
                a,
                b,
                transform: truth[a].inverse().compose(&truth[b]).compose(n),
                support: 2,
            })
            .collect();
        let graph = PoseGraph::from_edges(0, edges).unwrap();
        let (solved, report) = optimise(&graph).unwrap();
        prop_assert!(report.final_residual <= report.initial_residual);
        prop_assert_eq!(solved.poses[&0], RigidTransform::identity());
        let mut moved = solved.clone();
        for p in moved.poses.values_mut() {
            *p = gauge.compose(p);
        }
        let (a, b) = (solved.residual(1.0), moved.residual(1.0));
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a), "{a} vs {b}");
    }
}

#[derive(Debug, Clone)]
enum Op {
    Push,
    Pop,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(prop_oneof![Just(Op::Push), Just(Op::Pop)], 0..400)
}

proptest! {
    #[test]
    fn queue_counters_balance(
        capacity in 1usize..8,
        policy in prop_oneof![Just(OverflowPolicy::Discard), Just(OverflowPolicy::ReplaceRandom)],
        script in ops(),
    ) {
        let q = PooledQueue::with_seed(capacity, policy, 5, || 0u64);
        let mut next = 0u64;
        let mut last_popped: Option<u64> = None;
        for op in &script {
            match op {
                Op::Push => {
                    if let Some(mut slot) = q.begin_push() {
                        *slot = next;
                        slot.end_push();
                    }
                    next += 1;
                }
                Op::Pop => {
                    if let Some(v) = q.pop() {
                        prop_assert!(last_popped.is_none_or(|l| *v > l), "reordered");
                        last_popped = Some(*v);
                    }
                }
            }
            let c = q.counters();
            prop_assert!(c.queued <= capacity);
            prop_assert!(c.allocated <= capacity);
            prop_assert_eq!(c.queued + c.pooled + c.checked_out, capacity);
        }
        let c = q.counters();
        prop_assert_eq!(c.pushed, c.popped + c.discarded + c.queued as u64);
    }

    #[test]
    fn stream_order_survives_the_wire(indices in prop::collection::btree_set(0u64..10_000, 0..30)) {
        let pose = RigidTransform::identity();
        let depth = DepthImage::new(4, 3);
        let color = ColorImage::new(4, 3);
        let mut bytes = Vec::new();
        for &i in &indices {
            let msg = FrameMessage::encode(i, &pose, &depth, &color, 90).unwrap();
            write_message(&mut bytes, &Message::Frame(msg)).unwrap();
        }
        let mut reader = std::io::Cursor::new(bytes);
        let mut got = Vec::new();
        while let Some(Message::Frame(f)) = read_message(&mut reader).unwrap() {
            got.push(f.frame_index);
        }
        prop_assert_eq!(got, indices.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn depth_png_round_trip_is_bit_exact(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mm: Vec<u16> = (0..w * h).map(|_| if rng.random_bool(0.2) { 0 } else { rng.random() }).collect();
        let depth = DepthImage::from_millimetres(w, h, &mm);
        let (bw, bh, back) = decode_depth_png_mm(&encode_depth_png(&depth).unwrap()).unwrap();
        prop_assert_eq!((bw as usize, bh as usize), (w, h));
        prop_assert_eq!(back, mm);
    }
}

fn oracle_answers(cfg: OracleConfig, queries: &[RigidTransform]) -> Vec<Option<RigidTransform>> {
    let truth: Arc<Vec<RigidTransform>> = Arc::new(vec![
        RigidTransform::identity(),
        RigidTransform::from_translation(0.3, 0.0, -0.2).compose(&RigidTransform::rotate_y(25.0)),
    ]);
    let mut o = OracleRelocaliser::new(0, cfg, truth);
    let k = CameraIntrinsics::new(200.0, 200.0, 4.0, 3.0, 8, 6).unwrap();
    let depth = DepthImage::from_data(8, 6, vec![1.0; 48]).unwrap();
    let color = ColorImage::new(8, 6);
    o.train(&color, &depth, &RigidTransform::identity(), &k);
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            o.relocalise(&RelocQuery {
                color: &color,
                depth: &depth,
                intrinsics: &k,
                source: Some(QuerySource {
                    scene: 1,
                    frame_index: i as u64,
                    pose_in_source: *q,
                }),
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_is_deterministic(
        seed in any::<u64>(),
        outlier_rate in 0.0f64..1.0,
        failure_rate in 0.0f64..0.9,
        queries in prop::collection::vec(transform(), 1..20),
    ) {
        let cfg = OracleConfig {
            inlier_noise_m: 0.01,
            inlier_noise_deg: 1.0,
            outlier_rate,
            failure_rate,
            rng_seed: seed,
            ..OracleConfig::default()
        };
        prop_assert_eq!(oracle_answers(cfg, &queries), oracle_answers(cfg, &queries));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn baseline_never_answers_below_minimum_support(seed in any::<u64>(), extra in 1usize..100) {
        let scene = SyntheticScene::generate(seed % 8);
        let k = CameraIntrinsics::default_depth();
        let centre = (scene.room_min + scene.room_max) / 2.0;
        let pose = RigidTransform::rotate_y((seed % 360) as f64).with_translation(centre);
        let (d, c) = scene.render(&pose, &k);
        let cfg = BaselineConfig { seed, ..BaselineConfig::default() };
        let mut reloc = BaselineRelocaliser::new(BaselineConfig { min_inliers: cfg.samples_per_frame + extra, ..cfg });
        reloc.train(&c, &d, &RigidTransform::identity(), &k);
        let query = RelocQuery { color: &c, depth: &d, intrinsics: &k, source: None };
        prop_assert!(reloc.relocalise(&query).is_none());
        let mut loose = BaselineRelocaliser::new(cfg);
        loose.train(&c, &d, &RigidTransform::identity(), &k);
        prop_assert!(loose.relocalise(&query).is_some());
    }
}

#[test]
fn queue_reference_schedule_of_a_hundred_thousand_events() {
    use rand::Rng;
    let capacity = 6;
    let q = PooledQueue::with_seed(capacity, OverflowPolicy::Discard, 1, || 0u64);
    let mut reference: VecDeque<u64> = VecDeque::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut discarded = 0u64;
    for i in 0..100_000u64 {
        if rng.random_bool(0.55) {
            match q.begin_push() {
                Some(mut slot) => {
                    *slot = i;
                    slot.end_push();
                    reference.push_back(i);
                }
                None => discarded += 1,
            }
        } else {
            assert_eq!(q.pop().map(|v| *v), reference.pop_front());
        }
        assert!(q.len() <= capacity);
    }
    let c = q.counters();
    assert_eq!(c.discarded, discarded);
    assert_eq!(c.pushed, c.popped + c.discarded + c.queued as u64);
    assert_eq!(c.allocated, capacity);
}
