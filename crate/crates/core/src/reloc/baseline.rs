use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::{kabsch_ransac, RansacConfig, RelocQuery, Relocaliser};
use crate::camera::{CameraIntrinsics, ColorImage, DepthImage};
use crate::se3::RigidTransform;

const DEPTH_FEATURES: usize = 16;
pub const DESCRIPTOR_LEN: usize = DEPTH_FEATURES + 3;
type Descriptor = [f32; DESCRIPTOR_LEN];

/// Offsets in pixel-metres; divided by the centre depth before use so the
/// footprint is roughly constant in world units.
const OFFSETS: [[f32; 2]; DEPTH_FEATURES] = [
    [12.0, 0.0],
    [0.0, 12.0],
    [-12.0, 0.0],
    [0.0, -12.0],
    [25.0, 25.0],
    [-25.0, 25.0],
    [-25.0, -25.0],
    [25.0, -25.0],
    [45.0, 10.0],
    [-10.0, 45.0],
    [-45.0, -10.0],
    [10.0, -45.0],
    [60.0, -35.0],
    [35.0, 60.0],
    [-60.0, 35.0],
    [-35.0, -60.0],
];

/// Cap on a single depth difference, metres. Invalid neighbours read as this.
const MAX_DIFF: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub samples_per_frame: usize,
    pub capacity: usize,
    pub min_inliers: usize,
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            samples_per_frame: 512,
            capacity: 200_000,
            min_inliers: 20,
            ransac_iterations: 200,
            inlier_threshold: 0.05,
            min_depth: 0.1,
            max_depth: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    world: Vector3<f32>,
    descriptor: Descriptor,
}

/// Scene-coordinate relocaliser built from depth-difference descriptors,
/// nearest-neighbour matching and RANSAC.
pub struct BaselineRelocaliser {
    config: BaselineConfig,
    store: Vec<Entry>,
    seen: u64,
    train_rng: ChaCha8Rng,
    query_rng: Mutex<ChaCha8Rng>,
    index: Mutex<Option<Arc<KdTree<DESCRIPTOR_LEN>>>>,
}

/// Pixel positions on a jittered grid with about `n` cells.
fn jittered_grid<R: Rng + ?Sized>(
    w: usize,
    h: usize,
    n: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if n == 0 || w == 0 || h == 0 {
        return Vec::new();
    }
    let aspect = w as f64 / h as f64;
    let cols = ((n as f64 * aspect).sqrt().round() as usize).clamp(1, w);
    let rows = (n / cols).clamp(1, h);
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        let (y0, y1) = (r * h / rows, (r + 1) * h / rows);
        for c in 0..cols {
            let (x0, x1) = (c * w / cols, (c + 1) * w / cols);
            if x1 > x0 && y1 > y0 {
                out.push((rng.random_range(x0..x1), rng.random_range(y0..y1)));
            }
        }
    }
    out
}

fn descriptor(depth: &DepthImage, color: &ColorImage, x: usize, y: usize) -> Descriptor {
    let d = depth.get(x, y);
    let mut out = [0f32; DESCRIPTOR_LEN];
    for (o, slot) in OFFSETS.iter().zip(out.iter_mut()) {
        let u = (x as f32 + o[0] / d).round();
        let v = (y as f32 + o[1] / d).round();
        let diff =
            if u >= 0.0 && v >= 0.0 && (u as usize) < depth.width && (v as usize) < depth.height {
                let dn = depth.get(u as usize, v as usize);
                if dn > 0.0 {
                    (dn - d).clamp(-MAX_DIFF, MAX_DIFF)
                } else {
                    MAX_DIFF
                }
            } else {
                MAX_DIFF
            };
        *slot = diff;
    }
    let c = color.get(x, y);
    for ch in 0..3 {
        out[DEPTH_FEATURES + ch] = f32::from(c[ch]) / 255.0;
    }
    out
}

impl BaselineRelocaliser {
    pub fn new(config: BaselineConfig) -> Self {
        Self {
            config,
            store: Vec::new(),
            seen: 0,
            train_rng: ChaCha8Rng::seed_from_u64(config.seed),
            query_rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0FC0_FFEE)),
            index: Mutex::new(None),
        }
    }

    pub fn store_len(&self) -> usize {
        self.store.len()
    }

    pub fn world_points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.store.iter().map(|e| e.world.cast())
    }

    fn valid(&self, d: f32) -> bool {
        let d = f64::from(d);
        d > 0.0 && d >= self.config.min_depth && d <= self.config.max_depth
    }

    fn tree(&self) -> Arc<KdTree<DESCRIPTOR_LEN>> {
        let mut guard = self.index.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .get_or_insert_with(|| {
                Arc::new(KdTree::build(
                    self.store.iter().map(|e| e.descriptor).collect(),
                ))
            })
            .clone()
    }

    fn insert(&mut self, e: Entry) {
        self.seen += 1;
        if self.store.len() < self.config.capacity {
            self.store.push(e);
        } else {
            let j = self.train_rng.random_range(0..self.seen);
            if (j as usize) < self.config.capacity {
                self.store[j as usize] = e;
            }
        }
    }
}

impl Relocaliser for BaselineRelocaliser {
    fn train(
        &mut self,
        color: &ColorImage,
        depth: &DepthImage,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
    ) {
        if depth.check_dims(k).is_err() || color.check_dims(k).is_err() {
            return;
        }
        let pixels = jittered_grid(
            k.width,
            k.height,
            self.config.samples_per_frame,
            &mut self.train_rng,
        );
        let mut added = false;
        for (x, y) in pixels {
            let d = depth.get(x, y);
            if !self.valid(d) {
                continue;
            }
            let world = pose.transform_point(&k.backproject(x as f64, y as f64, f64::from(d)));
            if !world.iter().all(|v| v.is_finite()) {
                continue;
            }
            self.insert(Entry {
                world: world.cast(),
                descriptor: descriptor(depth, color, x, y),
            });
            added = true;
        }
        if added {
            *self.index.get_mut().unwrap_or_else(|e| e.into_inner()) = None;
        }
    }

    fn relocalise(&self, query: &RelocQuery<'_>) -> Option<RigidTransform> {
        if self.store.is_empty() {
            return None;
        }
        let (depth, color, k) = (query.depth, query.color, query.intrinsics);
        depth.check_dims(k).ok()?;
        color.check_dims(k).ok()?;
        let tree = self.tree();
        let mut rng = self.query_rng.lock().unwrap_or_else(|e| e.into_inner());
        let pixels = jittered_grid(k.width, k.height, self.config.samples_per_frame, &mut *rng);
        let mut corr = Vec::with_capacity(pixels.len());
        for (x, y) in pixels {
            let d = depth.get(x, y);
            if !self.valid(d) {
                continue;
            }
            let desc = descriptor(depth, color, x, y);
            let Some((i, _)) = tree.nearest(&desc) else {
                continue;
            };
            let cam = k.backproject(x as f64, y as f64, f64::from(d));
            corr.push((cam, self.store[i].world.cast()));
        }
        let cfg = RansacConfig {
            iterations: self.config.ransac_iterations,
            inlier_threshold: self.config.inlier_threshold,
            ..RansacConfig::default()
        };
        let (pose, inliers) = kabsch_ransac(&corr, &cfg, &mut *rng)?;
        (inliers >= self.config.min_inliers).then_some(pose)
    }

    fn is_trained(&self) -> bool {
        !self.store.is_empty()
    }
}
