//! Inter-agent relocalisation: candidate scheduling, synthetic queries and
//! depth-based verification.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{FrameRef, PairClusterSet, RelativeTransformSample, CONFIDENCE_THRESHOLD};
use crate::camera::{CameraIntrinsics, DepthImage};
use crate::reloc::{QuerySource, RelocQuery, Relocaliser, SceneId};
use crate::se3::{pose_distance, RigidTransform};
use crate::volume::TsdfVolume;

pub const CANDIDATE_COUNT: usize = 10;
pub const HOMOG_PENALTY: f64 = 5.0;
pub const HOMOG_TRANSLATION_M: f64 = 0.05;
pub const HOMOG_ANGLE_DEG: f64 = 5.0;
pub const INTERACTIVE_INTERVAL: usize = 50;
pub const COVERAGE_THRESHOLD: f64 = 0.5;
pub const DEPTH_DIFF_THRESHOLD: f64 = 0.05;
/// Tolerance for labelling a proposal correct against ground truth.
pub const CORRECT_TRANSLATION_M: f64 = 0.05;
pub const CORRECT_ANGLE_DEG: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("depth images differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    #[default]
    Batch,
    Interactive,
}

impl std::str::FromStr for ScheduleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(Self::Batch),
            "interactive" => Ok(Self::Interactive),
            _ => Err(format!(
                "unknown mode '{s}' (expected batch or interactive)"
            )),
        }
    }
}

/// Relocalise frame `source` of scene `source.scene` against scene `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelocCandidate {
    pub target: SceneId,
    pub source: FrameRef,
    /// Camera-to-local pose of the source frame in its own scene.
    pub source_pose: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub phi_new: f64,
    pub phi_conf: f64,
    pub phi_homog: f64,
    pub total: f64,
}

impl CandidateScore {
    pub fn new(phi_new: f64, phi_conf: f64, phi_homog: f64) -> Self {
        Self {
            phi_new,
            phi_conf,
            phi_homog,
            total: phi_new - phi_conf - phi_homog,
        }
    }
}

/// Source poses already tried, per ordered (target, source) pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttemptLog {
    tried: BTreeMap<(SceneId, SceneId), Vec<RigidTransform>>,
    total: usize,
}

impl AttemptLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, target: SceneId, source: SceneId, pose: RigidTransform) {
        self.tried.entry((target, source)).or_default().push(pose);
        self.total += 1;
    }

    pub fn tried(&self, target: SceneId, source: SceneId) -> &[RigidTransform] {
        self.tried.get(&(target, source)).map_or(&[], Vec::as_slice)
    }

    /// True if a pose strictly within 5 cm and 5 degrees was already tried.
    pub fn is_repeat(&self, target: SceneId, source: SceneId, pose: &RigidTransform) -> bool {
        self.tried(target, source)
            .iter()
            .any(|p| pose_distance(p, pose).is_within(HOMOG_TRANSLATION_M, HOMOG_ANGLE_DEG))
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// A sub-scene's trajectory as seen by the scheduler.
#[derive(Debug, Clone, Copy)]
pub struct SceneTrack<'a> {
    pub id: SceneId,
    pub trajectory: &'a [(u64, RigidTransform)],
}

/// Everything scoring looks at.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerView<'a> {
    pub scenes: &'a [SceneTrack<'a>],
    pub posed: &'a BTreeSet<SceneId>,
    pub clusters: &'a BTreeMap<(SceneId, SceneId), PairClusterSet>,
    pub attempts: &'a AttemptLog,
}

/// Ten independent draws: a uniform unordered pair, a uniform direction, then
/// a uniform frame of the source scene.
pub fn generate_candidates<R: Rng + ?Sized>(
    scenes: &[SceneTrack<'_>],
    rng: &mut R,
) -> Vec<RelocCandidate> {
    let usable: Vec<&SceneTrack<'_>> = scenes.iter().filter(|s| !s.trajectory.is_empty()).collect();
    let mut pairs = Vec::new();
    for i in 0..usable.len() {
        for j in i + 1..usable.len() {
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Vec::new();
    }
    (0..CANDIDATE_COUNT)
        .map(|_| {
            let (i, j) = pairs[rng.random_range(0..pairs.len())];
            let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            let src = usable[b];
            let (frame_index, source_pose) =
                src.trajectory[rng.random_range(0..src.trajectory.len())];
            RelocCandidate {
                target: usable[a].id,
                source: FrameRef {
                    scene: src.id,
                    frame_index,
                },
                source_pose,
            }
        })
        .collect()
}

pub fn score_candidate(k: &RelocCandidate, view: &SchedulerView<'_>) -> CandidateScore {
    let (a, b) = (k.target, k.source.scene);
    let phi_new = if view.posed.contains(&a) != view.posed.contains(&b) {
        1.0
    } else {
        0.0
    };
    let phi_conf =
        view.clusters
            .get(&(a.min(b), a.max(b)))
            .map_or(0, |s| s.largest_size().saturating_sub(CONFIDENCE_THRESHOLD)) as f64;
    let phi_homog = if view.attempts.is_repeat(a, b, &k.source_pose) {
        HOMOG_PENALTY
    } else {
        0.0
    };
    CandidateScore::new(phi_new, phi_conf, phi_homog)
}

/// Highest-scoring candidate, earliest on ties.
pub fn best_candidate(
    candidates: &[RelocCandidate],
    view: &SchedulerView<'_>,
) -> Option<(RelocCandidate, CandidateScore)> {
    let mut best: Option<(RelocCandidate, CandidateScore)> = None;
    for k in candidates {
        let s = score_candidate(k, view);
        if best.is_none_or(|(_, b)| s.total > b.total) {
            best = Some((*k, s));
        }
    }
    best
}

/// Whether an attempt may run now.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleGate {
    /// Frames fused across all clients since the last attempt.
    pub frames_since_last: usize,
    pub streams_finished: bool,
}

impl ScheduleGate {
    pub fn is_open(&self, mode: ScheduleMode) -> bool {
        match mode {
            ScheduleMode::Batch => self.streams_finished,
            ScheduleMode::Interactive => self.frames_since_last >= INTERACTIVE_INTERVAL,
        }
    }
}

pub fn schedule_attempt<R: Rng + ?Sized>(
    view: &SchedulerView<'_>,
    mode: ScheduleMode,
    gate: ScheduleGate,
    rng: &mut R,
) -> Option<(RelocCandidate, CandidateScore)> {
    if !gate.is_open(mode) {
        return None;
    }
    best_candidate(&generate_candidates(view.scenes, rng), view)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    RejectedCoverage,
    RejectedDepthDiff,
    RejectedEmptyOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub omega_size: usize,
    pub omega_a: usize,
    pub omega_b: usize,
    pub omega_ab: usize,
    pub coverage_ratio: f64,
    pub mu: Option<f64>,
    pub verdict: Verdict,
}

fn is_valid(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

/// Compares the target raycast `da` at the proposed pose with the source
/// raycast `db`.
pub fn verify_depth(da: &DepthImage, db: &DepthImage) -> Result<VerificationReport, PipelineError> {
    if (da.width, da.height) != (db.width, db.height) {
        return Err(PipelineError::DimensionMismatch(
            da.width, da.height, db.width, db.height,
        ));
    }
    let omega_size = da.data.len();
    let (mut omega_a, mut omega_b, mut omega_ab) = (0usize, 0usize, 0usize);
    let mut sum = 0.0f64;
    for (&a, &b) in da.data.iter().zip(&db.data) {
        let (va, vb) = (is_valid(a), is_valid(b));
        omega_a += va as usize;
        omega_b += vb as usize;
        if va && vb {
            omega_ab += 1;
            sum += (f64::from(a) - f64::from(b)).abs();
        }
    }
    let mu = (omega_ab > 0).then(|| sum / omega_ab as f64);
    let coverage_ratio = if omega_size == 0 {
        0.0
    } else {
        omega_a as f64 / omega_size as f64
    };
    let verdict = if coverage_ratio <= COVERAGE_THRESHOLD {
        Verdict::RejectedCoverage
    } else {
        match mu {
            None => Verdict::RejectedEmptyOverlap,
            Some(m) if m < DEPTH_DIFF_THRESHOLD => Verdict::Accepted,
            Some(_) => Verdict::RejectedDepthDiff,
        }
    };
    Ok(VerificationReport {
        omega_size,
        omega_a,
        omega_b,
        omega_ab,
        coverage_ratio,
        mu,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptOutcome {
    pub candidate: RelocCandidate,
    /// Camera-to-local pose of the source frame in the target scene.
    pub proposal: Option<RigidTransform>,
    pub report: Option<VerificationReport>,
    pub sample: Option<RelativeTransformSample>,
}

impl AttemptOutcome {
    /// Target-from-source transform implied by the proposal, accepted or not.
    pub fn relative(&self) -> Option<RigidTransform> {
        self.proposal
            .map(|p| p.compose(&self.candidate.source_pose.inverse()))
    }

    pub fn verdict(&self) -> Option<Verdict> {
        self.report.map(|r| r.verdict)
    }
}

/// Renders the source frame from scene b, relocalises it in scene a,
/// renders a at the proposal and verifies. Always logs the attempt.
pub fn attempt_relocalisation(
    k: &RelocCandidate,
    volume_a: &TsdfVolume,
    volume_b: &TsdfVolume,
    relocaliser_a: &dyn Relocaliser,
    intrinsics: &CameraIntrinsics,
    log: &mut AttemptLog,
) -> AttemptOutcome {
    log.record(k.target, k.source.scene, k.source_pose);
    let (db, cb) = volume_b.raycast(&k.source_pose, intrinsics);
    let query = RelocQuery {
        color: &cb,
        depth: &db,
        intrinsics,
        source: Some(QuerySource {
            scene: k.source.scene,
            frame_index: k.source.frame_index,
            pose_in_source: k.source_pose,
        }),
    };
    let mut out = AttemptOutcome {
        candidate: *k,
        proposal: None,
        report: None,
        sample: None,
    };
    let Some(proposal) = relocaliser_a.relocalise(&query) else {
        log::debug!(
            "relocalising frame {} of scene {} in scene {} failed",
            k.source.frame_index,
            k.source.scene,
            k.target
        );
        return out;
    };
    out.proposal = Some(proposal);
    let (da, _) = volume_a.raycast(&proposal, intrinsics);
    let report = verify_depth(&da, &db).expect("raycasts share intrinsics");
    out.report = Some(report);
    if report.verdict == Verdict::Accepted {
        out.sample = Some(RelativeTransformSample {
            a: k.target,
            b: k.source.scene,
            transform: proposal.compose(&k.source_pose.inverse()),
            frame: k.source,
        });
    }
    out
}

/// Confusion counts for the verifier. Ratios are NaN when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

impl VerifierMetrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self {
            tp,
            fp,
            tn,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
        }
    }
}

/// Accepted proposals are positives; correctness comes from ground truth.
pub fn verifier_metrics(records: &[(Verdict, bool)]) -> VerifierMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (v, correct) in records {
        match (*v == Verdict::Accepted, *correct) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    VerifierMetrics::from_counts(tp, fp, tn, fn_)
}

/// Whether a relative transform is within 5 cm and 5 degrees of the truth.
pub fn is_correct(estimate: &RigidTransform, truth: &RigidTransform) -> bool {
    pose_distance(estimate, truth).is_within_inclusive(CORRECT_TRANSLATION_M, CORRECT_ANGLE_DEG)
}

/// One line of the attempt log export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub target: SceneId,
    pub source_scene: SceneId,
    pub frame_index: u64,
    pub score: CandidateScore,
    pub verdict: Option<Verdict>,
    pub mu: Option<f64>,
    pub coverage: Option<f64>,
    /// Target-from-source transform as `w x y z tx ty tz`, present whenever
    /// the relocaliser proposed a pose.
    pub transform: Option<[f64; 7]>,
    /// Agreement with ground truth, when known.
    pub correct: Option<bool>,
}

impl AttemptRecord {
    pub fn new(
        attempt: usize,
        outcome: &AttemptOutcome,
        score: CandidateScore,
        truth: Option<&RigidTransform>,
    ) -> Self {
        let rel = outcome.relative();
        Self {
            attempt,
            target: outcome.candidate.target,
            source_scene: outcome.candidate.source.scene,
            frame_index: outcome.candidate.source.frame_index,
            score,
            verdict: outcome.verdict(),
            mu: outcome.report.and_then(|r| r.mu),
            coverage: outcome.report.map(|r| r.coverage_ratio),
            transform: rel.map(|t| t.to_array()),
            correct: rel.zip(truth).map(|(r, t)| is_correct(&r, t)),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialise")
    }
}

/// Parses a JSON-lines attempt log, skipping blank lines.
pub fn parse_attempt_records(text: &str) -> Result<Vec<AttemptRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
