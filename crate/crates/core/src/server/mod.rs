//! Server-side mapping: one sub-scene per client, inter-agent relocalisation,
//! pose publication, global rendering and offline fusion.

mod runtime;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{build_pose_graph, optimise, OptimisationReport, PairClusterSet, PoseGraph};
use crate::camera::{register_color, CameraIntrinsics, ColorImage, DepthImage};
use crate::pipeline::{
    attempt_relocalisation, schedule_attempt, AttemptLog, AttemptRecord, SceneTrack, ScheduleGate,
    ScheduleMode, SchedulerView, Verdict,
};
use crate::reloc::{
    BaselineConfig, BaselineRelocaliser, GroundTruth, OracleConfig, OracleRelocaliser, QuerySource,
    Relocaliser, RelocaliserKind, SceneId,
};
use crate::se3::RigidTransform;
use crate::sim::dataset::{self, DatasetError};
use crate::sim::{DatasetSource, FrameSource};
use crate::volume::{TsdfVolume, VolumeConfig, VolumeError};
use crate::wire::{codec, FrameMessage, OverflowPolicy, RenderedImage};

pub use runtime::{
    run_server, run_synthetic_batch, serve_tcp, BatchOutput, Connection, SimulationConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown client {0}")]
    UnknownClient(SceneId),
    #[error("client {0} registered twice")]
    DuplicateClient(SceneId),
    #[error("frame {index} of client {scene}: {reason}")]
    Decode {
        scene: SceneId,
        index: u64,
        reason: String,
    },
    #[error("no agent has a published global pose")]
    NoPosedAgents,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("replaying scene {scene}: {reason}")]
    Replay { scene: SceneId, reason: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub mode: ScheduleMode,
    pub volume: VolumeConfig,
    pub reloc: RelocaliserKind,
    pub oracle: OracleConfig,
    pub baseline: BaselineConfig,
    /// Maximum relocalisation attempts in batch mode.
    pub budget: usize,
    /// Batch mode gives up on a pair after this many consecutive failures.
    pub max_consecutive_failures: usize,
    pub feedback_intrinsics: CameraIntrinsics,
    pub jpeg_quality: u8,
    pub seed: u64,
    /// Where received frames are written for later fusion.
    pub spool_dir: Option<PathBuf>,
    pub ingest_queue_capacity: usize,
    pub ingest_policy: OverflowPolicy,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Batch,
            volume: VolumeConfig::default(),
            reloc: RelocaliserKind::Oracle,
            oracle: OracleConfig::default(),
            baseline: BaselineConfig::default(),
            budget: 500,
            max_consecutive_failures: 50,
            feedback_intrinsics: CameraIntrinsics::feedback(),
            jpeg_quality: codec::DEFAULT_JPEG_QUALITY,
            seed: 0,
            spool_dir: None,
            ingest_queue_capacity: 16,
            ingest_policy: OverflowPolicy::Discard,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        self.volume.validate()?;
        self.oracle.validate().map_err(ServerError::Config)?;
        self.feedback_intrinsics
            .validate()
            .map_err(|e| ServerError::Config(e.to_string()))?;
        if self.max_consecutive_failures == 0 {
            return Err(ServerError::Config(
                "max_consecutive_failures must be positive".into(),
            ));
        }
        if self.ingest_queue_capacity == 0 {
            return Err(ServerError::Config(
                "ingest_queue_capacity must be positive".into(),
            ));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(ServerError::Config(
                "jpeg_quality must lie in 1..=100".into(),
            ));
        }
        Ok(())
    }
}

/// Global poses replaced wholesale, so readers never see a partial update.
#[derive(Debug, Default)]
pub struct PosePublisher {
    current: RwLock<Arc<BTreeMap<SceneId, RigidTransform>>>,
}

impl PosePublisher {
    pub fn publish(&self, poses: BTreeMap<SceneId, RigidTransform>) {
        let next = Arc::new(poses);
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = next;
    }

    pub fn snapshot(&self) -> Arc<BTreeMap<SceneId, RigidTransform>> {
        self.current
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

/// One client's sub-scene.
pub struct MappingComponent {
    pub scene: SceneId,
    pub name: String,
    pub volume: TsdfVolume,
    /// Frame indices and camera-to-local poses, indices strictly increasing.
    pub trajectory: Vec<(u64, RigidTransform)>,
    pub relocaliser: Box<dyn Relocaliser>,
    pub frames_fused: usize,
    pub frames_dropped: usize,
    pub depth_intrinsics: CameraIntrinsics,
    pub color_intrinsics: CameraIntrinsics,
    pub finished: bool,
    spool: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Fused,
    DroppedOutOfOrder,
}

/// Picks clients with pending render requests in turn. Only the latest pose
/// per client is kept.
#[derive(Debug, Clone, Default)]
pub struct FeedbackScheduler {
    pending: BTreeMap<SceneId, RigidTransform>,
    last_served: Option<SceneId>,
}

impl FeedbackScheduler {
    pub fn request(&mut self, client: SceneId, pose: RigidTransform) {
        self.pending.insert(client, pose);
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Next client after the last one served, wrapping round.
    pub fn take_next(&mut self) -> Option<(SceneId, RigidTransform)> {
        let id = match self.last_served {
            Some(last) => self
                .pending
                .range(last + 1..)
                .next()
                .or_else(|| self.pending.iter().next())
                .map(|(k, _)| *k),
            None => self.pending.keys().next().copied(),
        }?;
        let pose = self.pending.remove(&id)?;
        self.last_served = Some(id);
        Some((id, pose))
    }
}

/// Colour from whichever posed agent sees the nearest surface at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRender {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub winner: Vec<Option<SceneId>>,
    /// Per-agent raycasts, in scene order.
    pub agents: Vec<(SceneId, DepthImage, ColorImage)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AllPairsConfident,
    BudgetExhausted,
    FailuresExhausted,
    StreamsEnded,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairReport {
    pub a: SceneId,
    pub b: SceneId,
    pub attempts: usize,
    pub accepted: usize,
    pub rejected_coverage: usize,
    pub rejected_depth_diff: usize,
    pub rejected_empty_overlap: usize,
    pub relocalisation_failed: usize,
    pub largest_cluster: usize,
    pub clusters: usize,
    pub confident: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: ScheduleMode,
    pub attempts: usize,
    pub stop_reason: Option<StopReason>,
    pub frames_fused: BTreeMap<SceneId, usize>,
    pub frames_dropped: BTreeMap<SceneId, usize>,
    pub pairs: Vec<PairReport>,
    pub final_residual: Option<f64>,
    pub optimisation: Option<OptimisationReport>,
    /// Published global poses as `w x y z tx ty tz`.
    pub poses: BTreeMap<SceneId, [f64; 7]>,
}

pub struct ServerState {
    pub config: ServerConfig,
    pub components: BTreeMap<SceneId, MappingComponent>,
    pub clusters: BTreeMap<(SceneId, SceneId), PairClusterSet>,
    pub attempts: AttemptLog,
    pub records: Vec<AttemptRecord>,
    pub feedback: FeedbackScheduler,
    pub graph: Option<PoseGraph>,
    pub last_optimisation: Option<OptimisationReport>,
    publisher: Arc<PosePublisher>,
    truth: Option<Arc<dyn GroundTruth>>,
    frames_since_attempt: usize,
    consecutive_failures: BTreeMap<(SceneId, SceneId), usize>,
    pair_stats: BTreeMap<(SceneId, SceneId), PairReport>,
    rng: ChaCha8Rng,
}

fn canonical(a: SceneId, b: SceneId) -> (SceneId, SceneId) {
    (a.min(b), a.max(b))
}

impl ServerState {
    /// `truth` drives the oracle relocaliser and labels attempt records; it
    /// is required for the oracle.
    pub fn new(
        config: ServerConfig,
        truth: Option<Arc<dyn GroundTruth>>,
    ) -> Result<Self, ServerError> {
        config.validate()?;
        if config.reloc == RelocaliserKind::Oracle && truth.is_none() {
            return Err(ServerError::Config(
                "the oracle relocaliser needs ground truth".into(),
            ));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            components: BTreeMap::new(),
            clusters: BTreeMap::new(),
            attempts: AttemptLog::new(),
            records: Vec::new(),
            feedback: FeedbackScheduler::default(),
            graph: None,
            last_optimisation: None,
            publisher: Arc::new(PosePublisher::default()),
            truth,
            frames_since_attempt: 0,
            consecutive_failures: BTreeMap::new(),
            pair_stats: BTreeMap::new(),
        })
    }

    pub fn publisher(&self) -> Arc<PosePublisher> {
        self.publisher.clone()
    }

    /// The lowest scene id anchors the global frame.
    pub fn first_agent(&self) -> Option<SceneId> {
        self.components.keys().next().copied()
    }

    pub fn add_client(
        &mut self,
        scene: SceneId,
        name: &str,
        depth_k: CameraIntrinsics,
        color_k: CameraIntrinsics,
    ) -> Result<(), ServerError> {
        if self.components.contains_key(&scene) {
            return Err(ServerError::DuplicateClient(scene));
        }
        for k in [&depth_k, &color_k] {
            k.validate()
                .map_err(|e| ServerError::Config(e.to_string()))?;
        }
        let relocaliser: Box<dyn Relocaliser> = match self.config.reloc {
            RelocaliserKind::Oracle => {
                let truth = self.truth.clone().ok_or_else(|| {
                    ServerError::Config("the oracle relocaliser needs ground truth".into())
                })?;
                Box::new(OracleRelocaliser::new(scene, self.config.oracle, truth))
            }
            RelocaliserKind::Baseline => {
                let mut cfg = self.config.baseline;
                cfg.seed = cfg.seed.wrapping_add(scene as u64);
                Box::new(BaselineRelocaliser::new(cfg))
            }
        };
        let spool = match &self.config.spool_dir {
            Some(root) => {
                let dir = root.join(dataset::scene_dir_name(scene));
                dataset::create_sequence(&dir, &depth_k, &color_k)?;
                Some(dir)
            }
            None => None,
        };
        self.components.insert(
            scene,
            MappingComponent {
                scene,
                name: name.to_string(),
                volume: TsdfVolume::new(self.config.volume)?,
                trajectory: Vec::new(),
                relocaliser,
                frames_fused: 0,
                frames_dropped: 0,
                depth_intrinsics: depth_k,
                color_intrinsics: color_k,
                finished: false,
                spool,
            },
        );
        self.republish();
        Ok(())
    }

    pub fn mark_finished(&mut self, scene: SceneId) {
        if let Some(c) = self.components.get_mut(&scene) {
            c.finished = true;
        }
    }

    pub fn streams_finished(&self) -> bool {
        self.components.values().all(|c| c.finished)
    }

    pub fn ingest_frame(
        &mut self,
        scene: SceneId,
        msg: &FrameMessage,
    ) -> Result<IngestOutcome, ServerError> {
        let comp = self
            .components
            .get(&scene)
            .ok_or(ServerError::UnknownClient(scene))?;
        if comp
            .trajectory
            .last()
            .is_some_and(|(i, _)| msg.frame_index <= *i)
        {
            log::warn!(
                "client {scene}: dropping frame {} received out of order",
                msg.frame_index
            );
            self.components
                .get_mut(&scene)
                .expect("checked")
                .frames_dropped += 1;
            return Ok(IngestOutcome::DroppedOutOfOrder);
        }
        let decode = |reason: String| ServerError::Decode {
            scene,
            index: msg.frame_index,
            reason,
        };
        let depth = msg.depth().map_err(|e| decode(e.to_string()))?;
        let color = msg.color().map_err(|e| decode(e.to_string()))?;
        let spool = comp.spool.clone();
        let spool_index = comp.frames_fused;
        self.fuse_decoded(scene, msg.frame_index, &msg.local_pose, &depth, &color)?;
        if let Some(dir) = spool {
            dataset::write_frame_encoded(
                &dir,
                spool_index,
                &msg.depth_png,
                &msg.color_jpeg,
                &msg.local_pose,
            )?;
        }
        Ok(IngestOutcome::Fused)
    }

    /// Integrates and trains on an already decoded frame.
    pub fn fuse_decoded(
        &mut self,
        scene: SceneId,
        index: u64,
        pose: &RigidTransform,
        depth: &DepthImage,
        color: &ColorImage,
    ) -> Result<IngestOutcome, ServerError> {
        let comp = self
            .components
            .get_mut(&scene)
            .ok_or(ServerError::UnknownClient(scene))?;
        if comp.trajectory.last().is_some_and(|(i, _)| index <= *i) {
            comp.frames_dropped += 1;
            return Ok(IngestOutcome::DroppedOutOfOrder);
        }
        let registered =
            register_color(depth, &comp.depth_intrinsics, color, &comp.color_intrinsics).map_err(
                |e| ServerError::Decode {
                    scene,
                    index,
                    reason: e.to_string(),
                },
            )?;
        comp.volume
            .integrate(depth, &registered, pose, &comp.depth_intrinsics)?;
        comp.relocaliser
            .train(&registered, depth, pose, &comp.depth_intrinsics);
        comp.trajectory.push((index, *pose));
        comp.frames_fused += 1;
        self.frames_since_attempt += 1;
        Ok(IngestOutcome::Fused)
    }

    /// Scenes with a published pose.
    pub fn posed(&self) -> BTreeSet<SceneId> {
        self.publisher.snapshot().keys().copied().collect()
    }

    fn republish(&mut self) {
        let mut poses = BTreeMap::new();
        if let Some(first) = self.first_agent() {
            poses.insert(first, RigidTransform::identity());
        }
        if let Some(g) = &self.graph {
            for (id, p) in &g.poses {
                poses.insert(*id, *p);
            }
        }
        self.publisher.publish(poses);
    }

    /// Rebuilds the pose graph from the confident pairs, optimises it and
    /// publishes the result.
    pub fn optimise_and_publish(&mut self) -> Option<OptimisationReport> {
        let first = self.first_agent()?;
        let scenes: Vec<SceneId> = self.components.keys().copied().collect();
        let sets: Vec<PairClusterSet> = self.clusters.values().cloned().collect();
        let graph = build_pose_graph(&sets, &scenes, first)?;
        let (graph, report) = optimise(&graph).ok()?;
        self.graph = Some(graph);
        self.last_optimisation = Some(report.clone());
        self.republish();
        Some(report)
    }

    pub fn frames_since_attempt(&self) -> usize {
        self.frames_since_attempt
    }

    fn relative_truth(&self, a: SceneId, b: SceneId) -> Option<RigidTransform> {
        self.truth.as_ref()?.pose_in_scene(
            a,
            &QuerySource {
                scene: b,
                frame_index: 0,
                pose_in_source: RigidTransform::identity(),
            },
        )
    }

    /// Runs one scheduled attempt if the gate allows. Returns the verdict,
    /// `Some(None)` for a relocaliser failure.
    pub fn relocalisation_step(&mut self) -> Option<Option<Verdict>> {
        let gate = ScheduleGate {
            frames_since_last: self.frames_since_attempt,
            streams_finished: self.streams_finished(),
        };
        let posed = self.posed();
        let tracks: Vec<SceneTrack<'_>> = self
            .components
            .values()
            .map(|c| SceneTrack {
                id: c.scene,
                trajectory: &c.trajectory,
            })
            .collect();
        let view = SchedulerView {
            scenes: &tracks,
            posed: &posed,
            clusters: &self.clusters,
            attempts: &self.attempts,
        };
        let (cand, score) = schedule_attempt(&view, self.config.mode, gate, &mut self.rng)?;
        drop(tracks);
        self.frames_since_attempt = 0;
        let (a, b) = (cand.target, cand.source.scene);
        let ca = &self.components[&a];
        let cb = &self.components[&b];
        let outcome = attempt_relocalisation(
            &cand,
            &ca.volume,
            &cb.volume,
            ca.relocaliser.as_ref(),
            &cb.depth_intrinsics,
            &mut self.attempts,
        );
        let truth = self.relative_truth(a, b);
        let record = AttemptRecord::new(self.records.len(), &outcome, score, truth.as_ref());
        self.records.push(record);
        let key = canonical(a, b);
        let stats = self.pair_stats.entry(key).or_insert_with(|| PairReport {
            a: key.0,
            b: key.1,
            ..Default::default()
        });
        stats.attempts += 1;
        match outcome.verdict() {
            None => stats.relocalisation_failed += 1,
            Some(Verdict::Accepted) => stats.accepted += 1,
            Some(Verdict::RejectedCoverage) => stats.rejected_coverage += 1,
            Some(Verdict::RejectedDepthDiff) => stats.rejected_depth_diff += 1,
            Some(Verdict::RejectedEmptyOverlap) => stats.rejected_empty_overlap += 1,
        }
        if let Some(sample) = outcome.sample {
            self.consecutive_failures.insert(key, 0);
            let set = self
                .clusters
                .entry(key)
                .or_insert_with(|| PairClusterSet::new(key.0, key.1));
            match set.add_sample(sample) {
                Ok(true) => {
                    self.optimise_and_publish();
                }
                Ok(false) => {}
                Err(e) => log::warn!("discarding sample: {e}"),
            }
        } else {
            *self.consecutive_failures.entry(key).or_insert(0) += 1;
        }
        Some(outcome.verdict())
    }

    fn scene_pairs(&self) -> Vec<(SceneId, SceneId)> {
        let ids: Vec<SceneId> = self
            .components
            .values()
            .filter(|c| !c.trajectory.is_empty())
            .map(|c| c.scene)
            .collect();
        let mut out = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                out.push((*a, *b));
            }
        }
        out
    }

    pub fn is_confident(&self, a: SceneId, b: SceneId) -> bool {
        self.clusters
            .get(&canonical(a, b))
            .is_some_and(PairClusterSet::is_confident)
    }

    /// Batch termination rule.
    pub fn batch_stop_reason(&self) -> Option<StopReason> {
        let open: Vec<(SceneId, SceneId)> = self
            .scene_pairs()
            .into_iter()
            .filter(|(a, b)| !self.is_confident(*a, *b))
            .collect();
        if open.is_empty() {
            return Some(StopReason::AllPairsConfident);
        }
        if self.attempts.len() >= self.config.budget {
            return Some(StopReason::BudgetExhausted);
        }
        let limit = self.config.max_consecutive_failures;
        if open
            .iter()
            .all(|p| self.consecutive_failures.get(p).copied().unwrap_or(0) >= limit)
        {
            return Some(StopReason::FailuresExhausted);
        }
        None
    }

    /// Relocalises until the batch stop rule fires.
    pub fn run_batch_relocalisation(&mut self) -> StopReason {
        loop {
            if let Some(r) = self.batch_stop_reason() {
                return r;
            }
            if self.relocalisation_step().is_none() {
                return StopReason::StreamsEnded;
            }
        }
    }

    /// Raycasts every posed agent from the global camera pose `t_g` and keeps
    /// the nearest surface per pixel, preferring the lower id on ties.
    pub fn render_global(
        &self,
        t_g: &RigidTransform,
        k: &CameraIntrinsics,
    ) -> Result<GlobalRender, ServerError> {
        let poses = self.publisher.snapshot();
        let mut agents = Vec::new();
        for (id, g) in poses.iter() {
            if let Some(c) = self.components.get(id) {
                let local = g.inverse().compose(t_g);
                let (d, col) = c.volume.raycast(&local, k);
                agents.push((*id, d, col));
            }
        }
        if agents.is_empty() {
            return Err(ServerError::NoPosedAgents);
        }
        Ok(composite(agents, k))
    }

    /// Serves the next pending render request.
    pub fn feedback_step(&mut self) -> Option<(SceneId, RenderedImage)> {
        let (client, pose) = self.feedback.take_next()?;
        let k = self.config.feedback_intrinsics;
        // Clients not yet placed in the global frame see their own sub-scene.
        let render = match self.global_pose(client) {
            Some(g) => self.render_global(&g.compose(&pose), &k).ok()?,
            None => {
                let c = self.components.get(&client)?;
                let (d, col) = c.volume.raycast(&pose, &k);
                composite(vec![(client, d, col)], &k)
            }
        };
        let jpeg = codec::encode_color_jpeg(&render.color, self.config.jpeg_quality).ok()?;
        Some((
            client,
            RenderedImage {
                client_id: client as u32,
                pose,
                width: k.width as u32,
                height: k.height as u32,
                jpeg,
            },
        ))
    }

    pub fn global_pose(&self, scene: SceneId) -> Option<RigidTransform> {
        self.publisher.snapshot().get(&scene).copied()
    }

    pub fn report(&self, stop_reason: Option<StopReason>) -> RunReport {
        let mut pairs: BTreeMap<(SceneId, SceneId), PairReport> = self.pair_stats.clone();
        for p in self.scene_pairs() {
            pairs.entry(p).or_insert_with(|| PairReport {
                a: p.0,
                b: p.1,
                ..Default::default()
            });
        }
        for (key, rep) in pairs.iter_mut() {
            if let Some(set) = self.clusters.get(key) {
                rep.largest_cluster = set.largest_size();
                rep.clusters = set.clusters.len();
                rep.confident = set.is_confident();
            }
        }
        RunReport {
            mode: self.config.mode,
            attempts: self.attempts.len(),
            stop_reason,
            frames_fused: self
                .components
                .iter()
                .map(|(k, c)| (*k, c.frames_fused))
                .collect(),
            frames_dropped: self
                .components
                .iter()
                .map(|(k, c)| (*k, c.frames_dropped))
                .collect(),
            pairs: pairs.into_values().collect(),
            final_residual: self.last_optimisation.as_ref().map(|r| r.final_residual),
            optimisation: self.last_optimisation.clone(),
            poses: self
                .publisher
                .snapshot()
                .iter()
                .map(|(k, p)| (*k, p.to_array()))
                .collect(),
        }
    }
}

/// Per-pixel nearest valid depth across agents, lower id on ties.
#[allow(clippy::needless_range_loop)]
pub fn composite(
    agents: Vec<(SceneId, DepthImage, ColorImage)>,
    k: &CameraIntrinsics,
) -> GlobalRender {
    let n = k.width * k.height;
    let mut depth = DepthImage::new(k.width, k.height);
    let mut color = ColorImage::new(k.width, k.height);
    let mut winner = vec![None; n];
    let mut sorted = agents;
    sorted.sort_by_key(|(id, _, _)| *id);
    for (id, d, c) in &sorted {
        for p in 0..n {
            let v = d.data[p];
            if v > 0.0 && v.is_finite() && (winner[p].is_none() || v < depth.data[p]) {
                depth.data[p] = v;
                color.data[p] = c.data[p];
                winner[p] = Some(*id);
            }
        }
    }
    GlobalRender {
        color,
        depth,
        winner,
        agents: sorted,
    }
}

/// Integrates every tracked frame of every posed scene into one volume, at
/// the scene's global pose composed with the frame's local pose.
pub fn fuse_global(
    config: VolumeConfig,
    sources: &mut [(SceneId, Box<dyn FrameSource>)],
    poses: &BTreeMap<SceneId, RigidTransform>,
) -> Result<TsdfVolume, ServerError> {
    let mut vol = TsdfVolume::new(config)?;
    for (scene, src) in sources.iter_mut() {
        let Some(g) = poses.get(scene) else {
            continue;
        };
        let (dk, ck) = (src.depth_intrinsics(), src.color_intrinsics());
        for i in 0..src.len() {
            if !src.tracked(i) {
                continue;
            }
            let replay = |reason: String| ServerError::Replay {
                scene: *scene,
                reason,
            };
            let f = src.frame(i).map_err(replay)?;
            let color =
                register_color(&f.depth, &dk, &f.color, &ck).map_err(|e| replay(e.to_string()))?;
            vol.integrate(&f.depth, &color, &g.compose(&f.pose), &dk)?;
        }
    }
    Ok(vol)
}

/// Scene id from a `scene-NNN` directory name.
pub fn scene_id_of(dir: &Path) -> Option<SceneId> {
    dir.file_name()?
        .to_str()?
        .strip_prefix("scene-")?
        .parse()
        .ok()
}

/// Fuses spooled scene directories. Every posed scene must have a complete
/// directory.
pub fn fuse_from_disk(
    config: VolumeConfig,
    root: &Path,
    poses: &BTreeMap<SceneId, RigidTransform>,
) -> Result<TsdfVolume, ServerError> {
    let mut sources: Vec<(SceneId, Box<dyn FrameSource>)> = Vec::new();
    for dir in dataset::list_scene_dirs(root)? {
        let Some(id) = scene_id_of(&dir) else {
            continue;
        };
        if poses.contains_key(&id) {
            let sequence = dataset::load_sequence(&dir)?;
            sources.push((id, Box::new(DatasetSource { sequence })));
        }
    }
    for id in poses.keys() {
        if !sources.iter().any(|(s, _)| s == id) {
            return Err(ServerError::Replay {
                scene: *id,
                reason: format!(
                    "no {} directory under {}",
                    dataset::scene_dir_name(*id),
                    root.display()
                ),
            });
        }
    }
    fuse_global(config, &mut sources, poses)
}

#[cfg(test)]
mod tests;
