//! Dense truncated signed-distance voxel grid.
//!
//! Voxel `(i, j, k)` sits at `origin + (i, j, k) * voxel_size`. TSDF values
//! are stored as `i16` scaled by 32767 and weights as integer counts, with a
//! running-average colour alongside.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraError, CameraIntrinsics, ColorImage, DepthImage};
use crate::se3::RigidTransform;

const TSDF_SCALE: f32 = 32767.0;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CMTSDF01";
pub const CHECKPOINT_HEADER_BYTES: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("invalid volume configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    /// Truncation distance in metres.
    pub truncation: f64,
    pub max_weight: u16,
    /// Depth band accepted by integration, metres.
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self::centred([256, 256, 256], 0.02)
    }
}

impl VolumeConfig {
    /// A grid of the given size centred on the coordinate origin.
    pub fn centred(dims: [usize; 3], voxel_size: f64) -> Self {
        let half = |n: usize| -(n as f64 - 1.0) * voxel_size / 2.0;
        Self {
            dims,
            voxel_size,
            origin: [half(dims[0]), half(dims[1]), half(dims[2])],
            truncation: 4.0 * voxel_size,
            max_weight: 128,
            min_depth: 0.1,
            max_depth: 5.0,
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let err = |m: &str| Err(VolumeError::Config(m.to_string()));
        if self.dims.iter().any(|d| *d < 2) {
            return err("every dimension needs at least 2 voxels");
        }
        let count = self
            .dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d));
        if count.is_none_or(|n| n > 1 << 30) {
            return err("volume too large");
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return err("voxel size must be positive");
        }
        if !(self.truncation.is_finite() && self.truncation > 0.0) {
            return err("truncation must be positive");
        }
        if self.max_weight == 0 {
            return err("max weight must be positive");
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return err("origin must be finite");
        }
        if !(self.min_depth >= 0.0 && self.max_depth > self.min_depth) {
            return err("depth band is empty");
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn origin_vec(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }

    /// World-space corners of the grid-point bounding box.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let lo = self.origin_vec();
        let hi = lo
            + Vector3::new(
                (self.dims[0] - 1) as f64,
                (self.dims[1] - 1) as f64,
                (self.dims[2] - 1) as f64,
            ) * self.voxel_size;
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub voxels_updated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    config: VolumeConfig,
    tsdf: Vec<i16>,
    weight: Vec<u16>,
    color: Vec<[u8; 3]>,
}

/// Parameter interval `[t0, t1]` over which `origin + t * dir` lies inside the
/// box, or `None` if it misses.
pub fn ray_box_interval(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut n, mut f) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if n > f {
            std::mem::swap(&mut n, &mut f);
        }
        t0 = t0.max(n);
        t1 = t1.min(f);
    }
    (t0 <= t1).then_some((t0, t1))
}

struct Sample {
    tsdf: f32,
    color: [f32; 3],
}

impl TsdfVolume {
    pub fn new(config: VolumeConfig) -> Result<Self, VolumeError> {
        config.validate()?;
        let n = config.voxel_count();
        Ok(Self {
            config,
            tsdf: vec![TSDF_SCALE as i16; n],
            weight: vec![0; n],
            color: vec![[0; 3]; n],
        })
    }

    pub fn config(&self) -> &VolumeConfig {
        &self.config
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.config.dims[0] * (j + self.config.dims[1] * k)
    }

    pub fn voxel_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.config.origin_vec()
            + Vector3::new(i as f64, j as f64, k as f64) * self.config.voxel_size
    }

    /// TSDF value of an observed voxel.
    pub fn tsdf_at(&self, i: usize, j: usize, k: usize) -> Option<f32> {
        let idx = self.index(i, j, k);
        (self.weight[idx] > 0).then(|| f32::from(self.tsdf[idx]) / TSDF_SCALE)
    }

    pub fn weight_at(&self, i: usize, j: usize, k: usize) -> u16 {
        self.weight[self.index(i, j, k)]
    }

    pub fn color_at(&self, i: usize, j: usize, k: usize) -> [u8; 3] {
        self.color[self.index(i, j, k)]
    }

    pub fn is_empty(&self) -> bool {
        self.weight.iter().all(|w| *w == 0)
    }

    pub fn observed_voxels(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0).count()
    }

    pub fn world_to_grid(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.config.origin_vec()) / self.config.voxel_size
    }

    /// Fuses one posed depth/colour frame. `pose` maps camera to world.
    ///
    /// Every voxel whose centre projects onto a pixel with depth inside the
    /// configured band and whose signed distance exceeds `-truncation` takes
    /// a running weighted average of the truncated distance and colour.
    pub fn integrate(
        &mut self,
        depth: &DepthImage,
        color: &ColorImage,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
    ) -> Result<IntegrationStats, VolumeError> {
        k.validate()?;
        depth.check_dims(k)?;
        color.check_dims(k)?;
        let cfg = self.config;
        let Some((lo, hi)) = self.frustum_bounds(depth, pose, k) else {
            return Ok(IntegrationStats::default());
        };

        let world_to_cam = pose.inverse();
        let rot = world_to_cam.rotation_matrix();
        let trans = *world_to_cam.translation();
        let step_x = rot.column(0) * cfg.voxel_size;
        let trunc = cfg.truncation;
        let max_w = cfg.max_weight;
        let (w, h) = (k.width as f64, k.height as f64);
        let mut updated = 0usize;

        for kz in lo[2]..=hi[2] {
            for jy in lo[1]..=hi[1] {
                let start = self.voxel_position(lo[0], jy, kz);
                let mut pc = rot * start + trans;
                let row = self.index(0, jy, kz);
                for ix in lo[0]..=hi[0] {
                    let p = pc;
                    pc += step_x;
                    if p.z <= 0.0 {
                        continue;
                    }
                    let u = (k.fx * p.x / p.z + k.cx + 0.5).floor();
                    let v = (k.fy * p.y / p.z + k.cy + 0.5).floor();
                    if u < 0.0 || v < 0.0 || u >= w || v >= h {
                        continue;
                    }
                    let pix = v as usize * k.width + u as usize;
                    let d = f64::from(depth.data[pix]);
                    if d <= 0.0 || d < cfg.min_depth || d > cfg.max_depth {
                        continue;
                    }
                    let sdf = d - p.z;
                    if sdf <= -trunc {
                        continue;
                    }
                    let t = (sdf / trunc).min(1.0) as f32;
                    let idx = row + ix;
                    let w_old = self.weight[idx];
                    let wf = f32::from(w_old);
                    let old = f32::from(self.tsdf[idx]) / TSDF_SCALE;
                    let fused = if w_old == 0 {
                        t
                    } else {
                        (old * wf + t) / (wf + 1.0)
                    };
                    self.tsdf[idx] = (fused.clamp(-1.0, 1.0) * TSDF_SCALE).round() as i16;
                    let c_new = color.data[pix];
                    let c_old = self.color[idx];
                    let mut c = [0u8; 3];
                    for ch in 0..3 {
                        let v = (f32::from(c_old[ch]) * wf + f32::from(c_new[ch])) / (wf + 1.0);
                        c[ch] = v.round().clamp(0.0, 255.0) as u8;
                    }
                    self.color[idx] = c;
                    self.weight[idx] = (w_old + 1).min(max_w);
                    updated += 1;
                }
            }
        }
        Ok(IntegrationStats {
            voxels_updated: updated,
        })
    }

    /// Voxel index range that can be touched by a frame: the box around the
    /// camera centre and every valid depth point pushed out by the truncation.
    fn frustum_bounds(
        &self,
        depth: &DepthImage,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
    ) -> Option<([usize; 3], [usize; 3])> {
        let cfg = &self.config;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let mut any = false;
        for y in 0..depth.height {
            for x in 0..depth.width {
                let d = f64::from(depth.get(x, y));
                if d <= 0.0 || d < cfg.min_depth || d > cfg.max_depth {
                    continue;
                }
                let ray = k.ray(x as f64, y as f64);
                let p = ray * (d + cfg.truncation);
                let pw = pose.transform_point(&p);
                lo = lo.inf(&pw);
                hi = hi.sup(&pw);
                any = true;
            }
        }
        if !any {
            return None;
        }
        let c = pose.translation();
        lo = lo.inf(c);
        hi = hi.sup(c);
        let pad = Vector3::repeat(cfg.voxel_size);
        let glo = self.world_to_grid(&(lo - pad));
        let ghi = self.world_to_grid(&(hi + pad));
        let mut out_lo = [0usize; 3];
        let mut out_hi = [0usize; 3];
        for a in 0..3 {
            let n = cfg.dims[a] as f64 - 1.0;
            if ghi[a] < 0.0 || glo[a] > n {
                return None;
            }
            out_lo[a] = glo[a].floor().clamp(0.0, n) as usize;
            out_hi[a] = ghi[a].ceil().clamp(0.0, n) as usize;
        }
        Some((out_lo, out_hi))
    }

    /// Trilinear TSDF/colour sample; `None` unless all eight corners are observed.
    #[inline]
    fn sample(&self, p: &Vector3<f64>) -> Option<Sample> {
        let g = self.world_to_grid(p);
        let dims = self.config.dims;
        let (fx, fy, fz) = (g.x.floor(), g.y.floor(), g.z.floor());
        if fx < 0.0 || fy < 0.0 || fz < 0.0 {
            return None;
        }
        let (i, j, k) = (fx as usize, fy as usize, fz as usize);
        if i + 1 >= dims[0] || j + 1 >= dims[1] || k + 1 >= dims[2] {
            return None;
        }
        let (tx, ty, tz) = ((g.x - fx) as f32, (g.y - fy) as f32, (g.z - fz) as f32);
        let sx = 1;
        let sy = dims[0];
        let sz = dims[0] * dims[1];
        let base = self.index(i, j, k);
        let mut tsdf = 0.0f32;
        let mut color = [0.0f32; 3];
        for (c, off) in [0, sx, sy, sx + sy, sz, sx + sz, sy + sz, sx + sy + sz]
            .into_iter()
            .enumerate()
        {
            let idx = base + off;
            if self.weight[idx] == 0 {
                return None;
            }
            let wx = if c & 1 == 1 { tx } else { 1.0 - tx };
            let wy = if c & 2 == 2 { ty } else { 1.0 - ty };
            let wz = if c & 4 == 4 { tz } else { 1.0 - tz };
            let wgt = wx * wy * wz;
            tsdf += wgt * f32::from(self.tsdf[idx]) / TSDF_SCALE;
            let col = self.color[idx];
            for ch in 0..3 {
                color[ch] += wgt * f32::from(col[ch]);
            }
        }
        Some(Sample { tsdf, color })
    }

    #[inline]
    fn sample_tsdf(&self, p: &Vector3<f64>) -> Option<f32> {
        self.sample(p).map(|s| s.tsdf)
    }

    /// Renders depth (camera z, metres) and colour from a camera-to-world pose.
    ///
    /// Rays march from the near plane in half-voxel steps (larger steps in
    /// confidently empty space), stop at the first positive-to-negative TSDF
    /// crossing, refine it by bisection and interpolate linearly.
    pub fn raycast(&self, pose: &RigidTransform, k: &CameraIntrinsics) -> (DepthImage, ColorImage) {
        let mut depth = DepthImage::new(k.width, k.height);
        let mut color = ColorImage::new(k.width, k.height);
        if self.is_empty() {
            return (depth, color);
        }
        let (lo, hi) = self.config.bounds();
        let rot = pose.rotation_matrix();
        let origin = *pose.translation();
        for y in 0..k.height {
            for x in 0..k.width {
                let ray_c = k.ray(x as f64, y as f64);
                let dir = rot * ray_c;
                if let Some((z, rgb)) = self.march(&origin, &dir, &lo, &hi) {
                    depth.set(x, y, z as f32);
                    color.set(x, y, rgb);
                }
            }
        }
        (depth, color)
    }

    fn march(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        lo: &Vector3<f64>,
        hi: &Vector3<f64>,
    ) -> Option<(f64, [u8; 3])> {
        let (t0, t1) = ray_box_interval(origin, dir, lo, hi)?;
        let cfg = &self.config;
        let len = dir.norm();
        let fine = 0.5 * cfg.voxel_size / len;
        let unobserved = cfg.voxel_size / len;
        let mut t = t0.max(cfg.min_depth);
        let mut prev: Option<(f64, f32)> = None;
        while t <= t1 {
            let p = origin + dir * t;
            match self.sample_tsdf(&p) {
                None => {
                    prev = None;
                    t += unobserved;
                }
                Some(v) => {
                    if let Some((tp, vp)) = prev {
                        if vp > 0.0 && v <= 0.0 {
                            return Some(self.refine(origin, dir, tp, vp, t, v));
                        }
                    }
                    prev = Some((t, v));
                    t += if v > 0.0 {
                        (0.8 * f64::from(v) * cfg.truncation / len).max(fine)
                    } else {
                        fine
                    };
                }
            }
        }
        None
    }

    fn refine(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        mut ta: f64,
        mut va: f32,
        mut tb: f64,
        mut vb: f32,
    ) -> (f64, [u8; 3]) {
        for _ in 0..6 {
            let tm = 0.5 * (ta + tb);
            match self.sample_tsdf(&(origin + dir * tm)) {
                Some(vm) if vm > 0.0 => {
                    ta = tm;
                    va = vm;
                }
                Some(vm) => {
                    tb = tm;
                    vb = vm;
                }
                None => break,
            }
        }
        let denom = f64::from(va - vb);
        let t = if denom > 1e-12 {
            ta + (tb - ta) * f64::from(va) / denom
        } else {
            0.5 * (ta + tb)
        };
        let rgb = self
            .sample(&(origin + dir * t))
            .or_else(|| self.sample(&(origin + dir * tb)))
            .map_or([0; 3], |s| {
                s.color.map(|c| c.round().clamp(0.0, 255.0) as u8)
            });
        (t, rgb)
    }

    /// Writes a 64-byte header followed by the raw voxel arrays.
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<(), VolumeError> {
        let cfg = &self.config;
        let mut header = [0u8; CHECKPOINT_HEADER_BYTES];
        header[..8].copy_from_slice(CHECKPOINT_MAGIC);
        for a in 0..3 {
            header[8 + 4 * a..12 + 4 * a].copy_from_slice(&(cfg.dims[a] as u32).to_le_bytes());
        }
        header[20..28].copy_from_slice(&cfg.voxel_size.to_le_bytes());
        for a in 0..3 {
            header[28 + 8 * a..36 + 8 * a].copy_from_slice(&cfg.origin[a].to_le_bytes());
        }
        header[52..60].copy_from_slice(&cfg.truncation.to_le_bytes());
        header[60..62].copy_from_slice(&cfg.max_weight.to_le_bytes());
        w.write_all(&header)?;
        let mut body = Vec::with_capacity(self.tsdf.len() * 7);
        for v in &self.tsdf {
            body.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.weight {
            body.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.color {
            body.extend_from_slice(c);
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Self, VolumeError> {
        let mut header = [0u8; CHECKPOINT_HEADER_BYTES];
        r.read_exact(&mut header)?;
        if &header[..8] != CHECKPOINT_MAGIC {
            return Err(VolumeError::Checkpoint("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let dims = [u32_at(8), u32_at(12), u32_at(16)];
        let mut config = VolumeConfig::centred(dims, f64_at(20));
        config.origin = [f64_at(28), f64_at(36), f64_at(44)];
        config.truncation = f64_at(52);
        config.max_weight = u16::from_le_bytes([header[60], header[61]]);
        let mut vol = Self::new(config)?;
        let n = vol.tsdf.len();
        let mut body = vec![0u8; n * 7];
        r.read_exact(&mut body)?;
        let (t, rest) = body.split_at(2 * n);
        let (wt, col) = rest.split_at(2 * n);
        for (dst, b) in vol.tsdf.iter_mut().zip(t.chunks_exact(2)) {
            *dst = i16::from_le_bytes([b[0], b[1]]);
        }
        for (dst, b) in vol.weight.iter_mut().zip(wt.chunks_exact(2)) {
            *dst = u16::from_le_bytes([b[0], b[1]]);
        }
        for (dst, b) in vol.color.iter_mut().zip(col.chunks_exact(3)) {
            *dst = [b[0], b[1], b[2]];
        }
        Ok(vol)
    }
}
