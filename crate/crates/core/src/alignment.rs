//! Sample clustering, the confident-edge pose graph and global pose
//! optimisation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::reloc::SceneId;
use crate::se3::{dqb_blend, error_vector, pose_distance, RigidTransform, Se3Error};

/// Samples needed in a cluster before a pair counts as confident.
pub const CONFIDENCE_THRESHOLD: usize = 2;
pub const CLUSTER_TRANSLATION_M: f64 = 0.10;
pub const CLUSTER_ANGLE_DEG: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("sample for pair ({got_a}, {got_b}) added to set for ({want_a}, {want_b})")]
    PairMismatch {
        got_a: SceneId,
        got_b: SceneId,
        want_a: SceneId,
        want_b: SceneId,
    },
    #[error("cluster set is empty")]
    EmptySet,
    #[error("pose graph is not connected: scene {0} unreachable from the anchor")]
    Disconnected(SceneId),
    #[error("pose graph has no edges")]
    NoEdges,
    #[error(transparent)]
    Se3(#[from] Se3Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// A frame of a sub-scene's trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub scene: SceneId,
    pub frame_index: u64,
}

/// One verified estimate of `aT_b`, the transform taking scene b's
/// coordinates into scene a's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeTransformSample {
    pub a: SceneId,
    pub b: SceneId,
    pub transform: RigidTransform,
    pub frame: FrameRef,
}

impl RelativeTransformSample {
    /// Swaps the pair into `a <= b` order, inverting the transform if needed.
    pub fn canonical(self) -> Self {
        if self.a <= self.b {
            self
        } else {
            Self {
                a: self.b,
                b: self.a,
                transform: self.transform.inverse(),
                frame: self.frame,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCluster {
    pub members: Vec<RelativeTransformSample>,
    pub blended: RigidTransform,
}

impl SampleCluster {
    fn new(s: RelativeTransformSample) -> Self {
        Self {
            blended: s.transform,
            members: vec![s],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn accepts(&self, t: &RigidTransform) -> bool {
        self.members.iter().any(|m| {
            pose_distance(&m.transform, t).is_within(CLUSTER_TRANSLATION_M, CLUSTER_ANGLE_DEG)
        })
    }

    fn push(&mut self, s: RelativeTransformSample) -> Result<(), Se3Error> {
        self.members.push(s);
        let ts: Vec<RigidTransform> = self.members.iter().map(|m| m.transform).collect();
        self.blended = dqb_blend(&ts, None)?;
        Ok(())
    }
}

/// Single-linkage clusters of the samples for one scene pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairClusterSet {
    pub a: SceneId,
    pub b: SceneId,
    pub clusters: Vec<SampleCluster>,
    pub threshold: usize,
}

impl PairClusterSet {
    pub fn new(a: SceneId, b: SceneId) -> Self {
        Self {
            a: a.min(b),
            b: a.max(b),
            clusters: Vec::new(),
            threshold: CONFIDENCE_THRESHOLD,
        }
    }

    /// Inserts a sample. Returns true when the receiving cluster has reached
    /// the confidence threshold.
    pub fn add_sample(&mut self, s: RelativeTransformSample) -> Result<bool, AlignError> {
        let s = s.canonical();
        if (s.a, s.b) != (self.a, self.b) {
            return Err(AlignError::PairMismatch {
                got_a: s.a,
                got_b: s.b,
                want_a: self.a,
                want_b: self.b,
            });
        }
        let size = match self.clusters.iter_mut().find(|c| c.accepts(&s.transform)) {
            Some(c) => {
                c.push(s)?;
                c.len()
            }
            None => {
                self.clusters.push(SampleCluster::new(s));
                1
            }
        };
        Ok(size >= self.threshold)
    }

    /// Largest cluster, earliest on ties.
    pub fn largest(&self) -> Option<(usize, &SampleCluster)> {
        let mut best: Option<(usize, &SampleCluster)> = None;
        for (i, c) in self.clusters.iter().enumerate() {
            if best.is_none_or(|(_, b)| c.len() > b.len()) {
                best = Some((i, c));
            }
        }
        best
    }

    pub fn largest_size(&self) -> usize {
        self.largest().map_or(0, |(_, c)| c.len())
    }

    pub fn is_confident(&self) -> bool {
        self.largest_size() >= self.threshold
    }

    pub fn sample_count(&self) -> usize {
        self.clusters.iter().map(SampleCluster::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyMargin {
    pub correct_size: usize,
    pub largest_incorrect_size: usize,
    pub margin: i64,
}

/// Size of the largest cluster against the largest cluster that disagrees
/// with it by more than the clustering tolerance.
///
/// When `truth` is given, the result also says whether the largest cluster's
/// blend lies within the clustering tolerance of it.
pub fn safety_margin(
    set: &PairClusterSet,
    truth: Option<&RigidTransform>,
) -> Result<(SafetyMargin, Option<bool>), AlignError> {
    let (ci, correct) = set.largest().ok_or(AlignError::EmptySet)?;
    let incorrect = set
        .clusters
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            *i != ci
                && !pose_distance(&c.blended, &correct.blended)
                    .is_within_inclusive(CLUSTER_TRANSLATION_M, CLUSTER_ANGLE_DEG)
        })
        .map(|(_, c)| c.len())
        .max()
        .unwrap_or(0);
    let agrees = truth.map(|t| {
        pose_distance(&correct.blended, t)
            .is_within_inclusive(CLUSTER_TRANSLATION_M, CLUSTER_ANGLE_DEG)
    });
    Ok((
        SafetyMargin {
            correct_size: correct.len(),
            largest_incorrect_size: incorrect,
            margin: correct.len() as i64 - incorrect as i64,
        },
        agrees,
    ))
}

/// Edge storing `aT_b` for `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGraphEdge {
    pub a: SceneId,
    pub b: SceneId,
    pub transform: RigidTransform,
    pub support: usize,
}

/// One edge per confident pair, from the blend of its largest cluster.
pub fn candidate_edges(sets: &[PairClusterSet]) -> Vec<PoseGraphEdge> {
    let mut edges: Vec<PoseGraphEdge> = sets
        .iter()
        .filter(|s| s.a != s.b)
        .filter_map(|s| {
            let (_, c) = s.largest()?;
            (c.len() >= s.threshold).then_some(PoseGraphEdge {
                a: s.a,
                b: s.b,
                transform: c.blended,
                support: c.len(),
            })
        })
        .collect();
    edges.sort_by_key(|e| (e.a, e.b));
    edges.dedup_by_key(|e| (e.a, e.b));
    edges
}

/// Global poses map each sub-scene's coordinates into the anchor's.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub anchor: SceneId,
    pub nodes: Vec<SceneId>,
    pub edges: Vec<PoseGraphEdge>,
    pub poses: BTreeMap<SceneId, RigidTransform>,
}

impl PoseGraph {
    /// Builds a graph over the edges and initialises poses breadth-first from
    /// the anchor. Fails if any edge endpoint is unreachable.
    pub fn from_edges(anchor: SceneId, edges: Vec<PoseGraphEdge>) -> Result<Self, AlignError> {
        if edges.is_empty() {
            return Err(AlignError::NoEdges);
        }
        let mut poses = BTreeMap::new();
        poses.insert(anchor, RigidTransform::identity());
        let mut queue = VecDeque::from([anchor]);
        while let Some(n) = queue.pop_front() {
            let gn = poses[&n];
            for e in &edges {
                let (other, g) = if e.a == n {
                    (e.b, gn.compose(&e.transform))
                } else if e.b == n {
                    (e.a, gn.compose(&e.transform.inverse()))
                } else {
                    continue;
                };
                if let std::collections::btree_map::Entry::Vacant(v) = poses.entry(other) {
                    v.insert(g);
                    queue.push_back(other);
                }
            }
        }
        for e in &edges {
            for n in [e.a, e.b] {
                if !poses.contains_key(&n) {
                    return Err(AlignError::Disconnected(n));
                }
            }
        }
        Ok(Self {
            anchor,
            nodes: poses.keys().copied().collect(),
            edges,
            poses,
        })
    }

    /// Sum over edges of the residual norm.
    pub fn residual(&self, rotation_weight: f64) -> f64 {
        residual_of(&self.edges, &self.poses, rotation_weight)
    }
}

fn edge_residual(e: &PoseGraphEdge, poses: &BTreeMap<SceneId, RigidTransform>) -> RigidTransform {
    poses[&e.b]
        .inverse()
        .compose(&poses[&e.a])
        .compose(&e.transform)
}

fn residual_of(
    edges: &[PoseGraphEdge],
    poses: &BTreeMap<SceneId, RigidTransform>,
    rotation_weight: f64,
) -> f64 {
    edges
        .iter()
        .map(|e| error_vector(&edge_residual(e, poses)).weighted_norm(rotation_weight))
        .sum()
}

/// Confident-edge graph restricted to the component holding `first_agent`.
/// `None` when that component has no edges.
pub fn build_pose_graph(
    sets: &[PairClusterSet],
    scenes: &[SceneId],
    first_agent: SceneId,
) -> Option<PoseGraph> {
    let known: BTreeSet<SceneId> = scenes.iter().copied().collect();
    let edges: Vec<PoseGraphEdge> = candidate_edges(sets)
        .into_iter()
        .filter(|e| known.contains(&e.a) && known.contains(&e.b))
        .collect();
    let mut reach = BTreeSet::from([first_agent]);
    let mut queue = VecDeque::from([first_agent]);
    while let Some(n) = queue.pop_front() {
        for e in &edges {
            let other = if e.a == n {
                e.b
            } else if e.b == n {
                e.a
            } else {
                continue;
            };
            if reach.insert(other) {
                queue.push_back(other);
            }
        }
    }
    let component: Vec<PoseGraphEdge> =
        edges.into_iter().filter(|e| reach.contains(&e.a)).collect();
    PoseGraph::from_edges(first_agent, component).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimiserConfig {
    pub initial_damping: f64,
    pub max_iterations: usize,
    pub min_step: f64,
    pub min_relative_decrease: f64,
    pub rotation_weight: f64,
}

impl Default for OptimiserConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-4,
            max_iterations: 100,
            min_step: 1e-8,
            min_relative_decrease: 1e-10,
            rotation_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimisationReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual after the initial guess and after each accepted step.
    pub history: Vec<f64>,
}

fn increment(pose: &RigidTransform, d: &[f64]) -> RigidTransform {
    let step = RigidTransform::from_rotation_vector(&Vector3::new(d[0], d[1], d[2]))
        .with_translation(Vector3::new(d[3], d[4], d[5]));
    pose.compose(&step)
}

fn apply(
    poses: &BTreeMap<SceneId, RigidTransform>,
    free: &[SceneId],
    delta: &DVector<f64>,
) -> BTreeMap<SceneId, RigidTransform> {
    let mut out = poses.clone();
    for (i, n) in free.iter().enumerate() {
        let p = out[n];
        out.insert(*n, increment(&p, &delta.as_slice()[6 * i..6 * i + 6]));
    }
    out
}

fn stacked_residuals(
    edges: &[PoseGraphEdge],
    poses: &BTreeMap<SceneId, RigidTransform>,
    rotation_weight: f64,
) -> DVector<f64> {
    let mut r = DVector::zeros(6 * edges.len());
    for (i, e) in edges.iter().enumerate() {
        let v = error_vector(&edge_residual(e, poses));
        for k in 0..3 {
            r[6 * i + k] = rotation_weight * v.qvec[k];
            r[6 * i + 3 + k] = v.tvec[k];
        }
    }
    r
}

/// Levenberg-Marquardt on the sum of edge residual norms, with the anchor
/// held fixed. Each iteration solves an iteratively reweighted least-squares
/// problem whose weights are the inverse residual norms.
pub fn optimise(graph: &PoseGraph) -> Result<(PoseGraph, OptimisationReport), AlignError> {
    optimise_with(graph, &OptimiserConfig::default())
}

pub fn optimise_with(
    graph: &PoseGraph,
    cfg: &OptimiserConfig,
) -> Result<(PoseGraph, OptimisationReport), AlignError> {
    for n in &graph.nodes {
        if !graph.poses.contains_key(n) {
            return Err(AlignError::Disconnected(*n));
        }
    }
    let free: Vec<SceneId> = graph
        .nodes
        .iter()
        .copied()
        .filter(|n| *n != graph.anchor)
        .collect();
    let edges = &graph.edges;
    let w_rot = cfg.rotation_weight;
    let mut poses = graph.poses.clone();
    poses.insert(graph.anchor, RigidTransform::identity());
    let mut eps = residual_of(edges, &poses, w_rot);
    let mut report = OptimisationReport {
        initial_residual: eps,
        final_residual: eps,
        iterations: 0,
        converged: false,
        history: vec![eps],
    };
    let np = 6 * free.len();
    let mut lambda = cfg.initial_damping;
    let h = 1e-7;
    while report.iterations < cfg.max_iterations {
        if eps < 1e-14 || np == 0 {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let r = stacked_residuals(edges, &poses, w_rot);
        let mut jac = DMatrix::zeros(r.len(), np);
        for p in 0..np {
            let mut d = DVector::zeros(np);
            d[p] = h;
            let plus = stacked_residuals(edges, &apply(&poses, &free, &d), w_rot);
            d[p] = -h;
            let minus = stacked_residuals(edges, &apply(&poses, &free, &d), w_rot);
            jac.set_column(p, &((plus - minus) / (2.0 * h)));
        }
        let mut weighted = jac.clone();
        let mut wr = r.clone();
        for e in 0..edges.len() {
            let norm = r.rows(6 * e, 6).norm().max(1e-12);
            let s = 1.0 / norm.sqrt();
            weighted.rows_mut(6 * e, 6).scale_mut(s);
            wr.rows_mut(6 * e, 6).scale_mut(s);
        }
        let hess = weighted.transpose() * &weighted;
        let grad = weighted.transpose() * &wr;
        let mut accepted = None;
        while lambda < 1e16 {
            let mut damped = hess.clone();
            for i in 0..np {
                damped[(i, i)] += lambda * hess[(i, i)].max(1e-12);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = -chol.solve(&grad);
                let candidate = apply(&poses, &free, &delta);
                let eps_new = residual_of(edges, &candidate, w_rot);
                if eps_new < eps {
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = Some((candidate, eps_new, delta.norm()));
                    break;
                }
            }
            lambda *= 10.0;
        }
        let Some((candidate, eps_new, step)) = accepted else {
            report.converged = true;
            break;
        };
        let decrease = (eps - eps_new) / eps;
        poses = candidate;
        eps = eps_new;
        report.history.push(eps);
        if step < cfg.min_step || decrease < cfg.min_relative_decrease {
            report.converged = true;
            break;
        }
    }
    report.final_residual = eps;
    let mut out = graph.clone();
    out.poses = poses;
    Ok((out, report))
}

/// One line per scene: `scene_id w x y z tx ty tz`.
pub fn format_global_poses(poses: &BTreeMap<SceneId, RigidTransform>) -> String {
    poses
        .iter()
        .map(|(id, p)| format!("{id} {}\n", p.to_text()))
        .collect()
}

pub fn parse_global_poses(text: &str) -> Result<BTreeMap<SceneId, RigidTransform>, AlignError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line
            .split_once(char::is_whitespace)
            .ok_or(AlignError::Parse {
                line: i + 1,
                reason: "expected a scene id followed by seven numbers".into(),
            })?;
        let id: SceneId = id.parse().map_err(|_| AlignError::Parse {
            line: i + 1,
            reason: format!("bad scene id '{id}'"),
        })?;
        let pose = RigidTransform::parse_text(rest).map_err(|e| AlignError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if out.insert(id, pose).is_some() {
            return Err(AlignError::Parse {
                line: i + 1,
                reason: format!("scene {id} listed twice"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(a: SceneId, b: SceneId, t: RigidTransform) -> RelativeTransformSample {
        RelativeTransformSample {
            a,
            b,
            transform: t,
            frame: FrameRef {
                scene: b,
                frame_index: 0,
            },
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng, t_scale: f64) -> RigidTransform {
        let w = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        RigidTransform::from_rotation_vector(&w).with_translation(Vector3::new(
            rng.random_range(-t_scale..t_scale),
            rng.random_range(-t_scale..t_scale),
            rng.random_range(-t_scale..t_scale),
        ))
    }

    fn edge(a: SceneId, b: SceneId, t: RigidTransform) -> PoseGraphEdge {
        PoseGraphEdge {
            a,
            b,
            transform: t,
            support: 2,
        }
    }

    #[test]
    fn first_sample_founds_cluster_without_trigger() {
        let mut set = PairClusterSet::new(0, 1);
        assert!(!set
            .add_sample(sample(0, 1, RigidTransform::identity()))
            .unwrap());
        assert_eq!(set.clusters.len(), 1);
    }

    #[test]
    fn duplicate_sample_triggers() {
        let t = RigidTransform::from_translation(0.3, 0.1, 0.0);
        let mut set = PairClusterSet::new(0, 1);
        set.add_sample(sample(0, 1, t)).unwrap();
        assert!(set.add_sample(sample(0, 1, t)).unwrap());
        assert_eq!(set.clusters[0].len(), 2);
        assert!(set.is_confident());
    }

    #[test]
    fn far_sample_founds_new_cluster() {
        let mut set = PairClusterSet::new(0, 1);
        set.add_sample(sample(0, 1, RigidTransform::identity()))
            .unwrap();
        let far = RigidTransform::rotate_x(90.0).with_translation(Vector3::new(0.5, 0.0, 0.0));
        assert!(!set.add_sample(sample(0, 1, far)).unwrap());
        assert_eq!(set.clusters.len(), 2);
    }

    #[test]
    fn reversed_samples_are_inverted() {
        let t = RigidTransform::rotate_y(30.0).with_translation(Vector3::new(1.0, 0.0, 0.5));
        let mut set = PairClusterSet::new(1, 0);
        set.add_sample(sample(0, 1, t)).unwrap();
        assert!(set.add_sample(sample(1, 0, t.inverse())).unwrap());
        assert!(pose_distance(&set.clusters[0].blended, &t).is_within(1e-9, 1e-7));
        assert!(set.add_sample(sample(0, 2, t)).is_err());
    }

    #[test]
    fn cluster_membership_is_strict_at_tolerance() {
        let mut set = PairClusterSet::new(0, 1);
        set.add_sample(sample(0, 1, RigidTransform::identity()))
            .unwrap();
        set.add_sample(sample(
            0,
            1,
            RigidTransform::from_translation(0.1, 0.0, 0.0),
        ))
        .unwrap();
        assert_eq!(set.clusters.len(), 2);
        set.add_sample(sample(
            0,
            1,
            RigidTransform::from_translation(0.0999, 0.0, 0.0),
        ))
        .unwrap();
        assert_eq!(set.clusters[0].len(), 2);
    }

    #[test]
    fn blend_tracks_members() {
        let mut set = PairClusterSet::new(0, 1);
        set.add_sample(sample(
            0,
            1,
            RigidTransform::from_translation(0.0, 0.0, 0.0),
        ))
        .unwrap();
        set.add_sample(sample(
            0,
            1,
            RigidTransform::from_translation(0.04, 0.0, 0.0),
        ))
        .unwrap();
        let t = set.clusters[0].blended.translation().x;
        assert!((t - 0.02).abs() < 1e-12, "{t}");
    }

    fn set_with_sizes(sizes: &[usize]) -> PairClusterSet {
        let mut set = PairClusterSet::new(0, 1);
        for (ci, &n) in sizes.iter().enumerate() {
            let t = RigidTransform::from_translation(ci as f64, 0.0, 0.0);
            for _ in 0..n {
                set.add_sample(sample(0, 1, t)).unwrap();
            }
        }
        set
    }

    #[test]
    fn safety_margin_counts() {
        let (m, _) = safety_margin(&set_with_sizes(&[1317, 18, 3]), None).unwrap();
        assert_eq!(
            (m.correct_size, m.largest_incorrect_size, m.margin),
            (1317, 18, 1299)
        );
        let (m, _) = safety_margin(&set_with_sizes(&[5]), None).unwrap();
        assert_eq!(m.margin, 5);
        assert!(safety_margin(&PairClusterSet::new(0, 1), None).is_err());
    }

    #[test]
    fn safety_margin_reports_truth_agreement() {
        let set = set_with_sizes(&[3, 2]);
        let (_, ok) = safety_margin(&set, Some(&RigidTransform::identity())).unwrap();
        assert_eq!(ok, Some(true));
        let (_, ok) =
            safety_margin(&set, Some(&RigidTransform::from_translation(1.0, 0.0, 0.0))).unwrap();
        assert_eq!(ok, Some(false));
    }

    fn confident(a: SceneId, b: SceneId, t: RigidTransform) -> PairClusterSet {
        let mut s = PairClusterSet::new(a, b);
        s.add_sample(sample(a, b, t)).unwrap();
        s.add_sample(sample(a, b, t)).unwrap();
        s
    }

    #[test]
    fn no_confident_pairs_gives_no_graph() {
        let mut s = PairClusterSet::new(0, 1);
        s.add_sample(sample(0, 1, RigidTransform::identity()))
            .unwrap();
        assert!(build_pose_graph(&[s], &[0, 1], 0).is_none());
    }

    #[test]
    fn chain_is_connected() {
        let i = RigidTransform::identity();
        let g = build_pose_graph(&[confident(0, 1, i), confident(1, 2, i)], &[0, 1, 2], 0).unwrap();
        assert_eq!(g.nodes, vec![0, 1, 2]);
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn other_component_is_excluded() {
        let i = RigidTransform::identity();
        let g =
            build_pose_graph(&[confident(0, 1, i), confident(2, 3, i)], &[0, 1, 2, 3], 0).unwrap();
        assert_eq!(g.nodes, vec![0, 1]);
        assert!(build_pose_graph(&[confident(2, 3, i)], &[0, 1, 2, 3], 0).is_none());
    }

    #[test]
    fn two_nodes_are_solved_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng, 2.0);
        let g = PoseGraph::from_edges(0, vec![edge(0, 1, t)]).unwrap();
        let (g, rep) = optimise(&g).unwrap();
        assert!(rep.final_residual < 1e-10);
        assert!(pose_distance(&g.poses[&1], &t).is_within(1e-9, 1e-7));
    }

    fn ground_truth_graph(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (Vec<RigidTransform>, Vec<PoseGraphEdge>) {
        let mut truth = vec![RigidTransform::identity()];
        truth.extend((1..n).map(|_| random_pose(rng, 2.0)));
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if b == a + 1 || rng.random_bool(0.5) {
                    edges.push(edge(a, b, truth[a].inverse().compose(&truth[b])));
                }
            }
        }
        (truth, edges)
    }

    #[test]
    fn consistent_graphs_reach_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 2..=8 {
            let (truth, edges) = ground_truth_graph(&mut rng, n);
            let g = PoseGraph::from_edges(0, edges).unwrap();
            let (g, rep) = optimise(&g).unwrap();
            assert!(rep.final_residual < 1e-10, "{n}: {rep:?}");
            assert!(rep.iterations <= 100);
            for (i, t) in truth.iter().enumerate() {
                assert!(pose_distance(&g.poses[&i], t).is_within(1e-8, 1e-6));
            }
        }
    }

    #[test]
    fn bad_initial_guess_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (truth, edges) = ground_truth_graph(&mut rng, 5);
        let mut g = PoseGraph::from_edges(0, edges).unwrap();
        for n in 1..5 {
            let p = g.poses[&n].compose(
                &RigidTransform::rotate_z(5.0).with_translation(Vector3::new(0.05, 0.0, 0.0)),
            );
            g.poses.insert(n, p);
        }
        let (g, rep) = optimise(&g).unwrap();
        assert!(rep.final_residual < 1e-6 * rep.initial_residual, "{rep:?}");
        for (i, t) in truth.iter().enumerate() {
            assert!(pose_distance(&g.poses[&i], t).is_within(1e-4, 1e-2));
        }
    }

    #[test]
    fn perturbed_triangle_stays_close_and_near_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (truth, mut edges) = ground_truth_graph(&mut rng, 3);
        if edges.len() < 3 {
            edges.push(edge(0, 2, truth[0].inverse().compose(&truth[2])));
        }
        let i12 = edges.iter().position(|e| (e.a, e.b) == (1, 2)).unwrap();
        let bump = RigidTransform::from_translation(0.02, 0.0, 0.0);
        edges[i12].transform = edges[i12].transform.compose(&bump);
        let g = PoseGraph::from_edges(0, edges).unwrap();
        let (out, rep) = optimise(&g).unwrap();
        assert!(rep.final_residual <= rep.initial_residual);
        for (i, t) in truth.iter().enumerate() {
            assert!(pose_distance(&out.poses[&i], t).is_within(0.02, 2.0));
        }
        // Grid over node 2's translation along the bump direction.
        let dir = truth[1].rotation() * Vector3::x();
        let best = (-40..=40)
            .map(|s| {
                let mut p = g.poses.clone();
                let shifted =
                    p[&2].with_translation(p[&2].translation() + dir * (s as f64 * 0.001));
                p.insert(2, shifted);
                residual_of(&g.edges, &p, 1.0)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            rep.final_residual <= best + 1e-9,
            "{} vs {best}",
            rep.final_residual
        );
    }

    #[test]
    fn accepted_steps_never_increase_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (_, mut edges) = ground_truth_graph(&mut rng, 5);
            for e in &mut edges {
                let noise = RigidTransform::from_rotation_vector(&Vector3::new(
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                ))
                .with_translation(Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                ));
                e.transform = e.transform.compose(&noise);
            }
            let g = PoseGraph::from_edges(0, edges).unwrap();
            let (out, rep) = optimise(&g).unwrap();
            assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
            assert!((out.residual(1.0) - rep.final_residual).abs() < 1e-12);
            assert_eq!(out.poses[&0], RigidTransform::identity());
        }
    }

    #[test]
    fn global_pose_text_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poses: BTreeMap<_, _> = (0..4).map(|i| (i, random_pose(&mut rng, 3.0))).collect();
        let text = format_global_poses(&poses);
        assert_eq!(parse_global_poses(&text).unwrap(), poses);
        assert!(parse_global_poses("0 1 0 0").is_err());
        assert!(parse_global_poses("x 1 0 0 0 0 0 0").is_err());
    }
}
