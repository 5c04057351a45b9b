//! Pinhole intrinsics and the depth/colour image containers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("dimension mismatch: {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("{0}")]
    InvalidPixels(String),
}

/// Pinhole camera model. Pixel `(i, j)` has its centre at `u = i`, `v = j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Depth sensor defaults: 224x172.
    pub fn default_depth() -> Self {
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: 112.0,
            cy: 86.0,
            width: 224,
            height: 172,
        }
    }

    /// Colour sensor defaults: 480x270, covering the depth field of view.
    pub fn default_color() -> Self {
        Self {
            fx: 300.0,
            fy: 300.0,
            cx: 240.0,
            cy: 135.0,
            width: 480,
            height: 270,
        }
    }

    /// Feedback render resolution, 320x240.
    pub fn feedback() -> Self {
        Self {
            fx: 280.0,
            fy: 280.0,
            cx: 160.0,
            cy: 120.0,
            width: 320,
            height: 240,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |msg: &str| Err(CameraError::InvalidIntrinsics(msg.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie inside the image");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie inside the image");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a camera-space point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Nearest pixel for a camera-space point, if it lands inside the image.
    #[inline]
    pub fn project_to_pixel(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        let (u, v) = self.project(p)?;
        let (i, j) = ((u + 0.5).floor(), (v + 0.5).floor());
        if i < 0.0 || j < 0.0 || i >= self.width as f64 || j >= self.height as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    /// Camera-space ray through pixel centre `(u, v)`, scaled to unit depth.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.ray(u, v) * depth
    }
}

/// Depth in metres; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self, CameraError> {
        if data.len() != width * height {
            return Err(CameraError::InvalidPixels(format!(
                "{} depth values for a {width}x{height} image",
                data.len()
            )));
        }
        if data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(CameraError::InvalidPixels(
                "depth values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        self.data[y * self.width + x] = d;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.valid_count() as f64 / self.data.len() as f64
    }

    /// Quantises to whole millimetres, saturating at `u16::MAX`.
    pub fn to_millimetres(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|d| (f64::from(*d) * 1000.0).round().clamp(0.0, 65535.0) as u16)
            .collect()
    }

    pub fn from_millimetres(width: usize, height: usize, mm: &[u16]) -> Self {
        Self {
            width,
            height,
            data: mm.iter().map(|v| (f64::from(*v) / 1000.0) as f32).collect(),
        }
    }

    /// Rounds every pixel to the nearest millimetre.
    pub fn quantized(&self) -> Self {
        Self::from_millimetres(self.width, self.height, &self.to_millimetres())
    }

    pub fn check_dims(&self, k: &CameraIntrinsics) -> Result<(), CameraError> {
        check_dims("depth image", self.width, self.height, k.width, k.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![rgb; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.data[y * self.width + x] = rgb;
    }

    pub fn as_bytes(&self) -> Vec<u8> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, CameraError> {
        if bytes.len() != width * height * 3 {
            return Err(CameraError::InvalidPixels(format!(
                "{} colour bytes for a {width}x{height} image",
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn check_dims(&self, k: &CameraIntrinsics) -> Result<(), CameraError> {
        check_dims("colour image", self.width, self.height, k.width, k.height)
    }
}

fn check_dims(
    what: &'static str,
    got_w: usize,
    got_h: usize,
    want_w: usize,
    want_h: usize,
) -> Result<(), CameraError> {
    if got_w != want_w || got_h != want_h {
        return Err(CameraError::DimensionMismatch {
            what,
            got_w,
            got_h,
            want_w,
            want_h,
        });
    }
    Ok(())
}

/// Resamples a colour image onto the depth image's pixel grid.
///
/// Both sensors are assumed to share an optical centre and orientation; each
/// valid depth pixel is back-projected and looked up in the colour image.
/// Pixels without depth take the colour along the unit-depth ray.
pub fn register_color(
    depth: &DepthImage,
    depth_k: &CameraIntrinsics,
    color: &ColorImage,
    color_k: &CameraIntrinsics,
) -> Result<ColorImage, CameraError> {
    depth.check_dims(depth_k)?;
    color.check_dims(color_k)?;
    if depth_k == color_k {
        return Ok(color.clone());
    }
    let mut out = ColorImage::new(depth.width, depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = f64::from(depth.get(x, y));
            let p = depth_k.backproject(x as f64, y as f64, if d > 0.0 { d } else { 1.0 });
            if let Some((i, j)) = color_k.project_to_pixel(&p) {
                out.set(x, y, color.get(i, j));
            }
        }
    }
    Ok(out)
}

/// A posed RGB-D frame with colour registered to the depth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u64,
    pub depth: DepthImage,
    pub color: ColorImage,
    pub pose: crate::se3::RigidTransform,
}
