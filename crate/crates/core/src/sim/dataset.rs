//! On-disk sequence layout:
//!
//! ```text
//! calib.txt               fx fy cx cy width height   (depth, then colour)
//! frame-000000.depth.png  16-bit millimetres
//! frame-000000.color.jpg
//! frame-000000.pose.txt   w x y z tx ty tz
//! global_pose.txt         optional
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::{CameraIntrinsics, ColorImage, DepthImage};
use crate::se3::RigidTransform;
use crate::wire::codec;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{dir}: gap at index {index}")]
    Gap { dir: PathBuf, index: usize },
    #[error("{dir}: no frames")]
    Empty { dir: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, reason: impl ToString) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn frame_stem(i: usize) -> String {
    format!("frame-{i:06}")
}

pub fn scene_dir_name(i: usize) -> String {
    format!("scene-{i:03}")
}

pub fn format_calib(depth: &CameraIntrinsics, color: &CameraIntrinsics) -> String {
    let line = |k: &CameraIntrinsics| {
        format!(
            "{} {} {} {} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        )
    };
    format!("{}{}", line(depth), line(color))
}

pub fn parse_calib(
    text: &str,
    path: &Path,
) -> Result<(CameraIntrinsics, CameraIntrinsics), DatasetError> {
    let mut ks = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(parse_err(
                path,
                format!("expected 6 fields, got {}", f.len()),
            ));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(path, e));
        let int = |s: &str| s.parse::<usize>().map_err(|e| parse_err(path, e));
        let k = CameraIntrinsics::new(
            num(f[0])?,
            num(f[1])?,
            num(f[2])?,
            num(f[3])?,
            int(f[4])?,
            int(f[5])?,
        )
        .map_err(|e| parse_err(path, e))?;
        ks.push(k);
    }
    match ks.as_slice() {
        [d, c] => Ok((*d, *c)),
        _ => Err(parse_err(
            path,
            format!("expected 2 calibration lines, got {}", ks.len()),
        )),
    }
}

fn read_pose(path: &Path) -> Result<RigidTransform, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    RigidTransform::parse_text(&text).map_err(|e| parse_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes the calibration file and prepares `dir` for frames.
pub fn create_sequence(
    dir: &Path,
    depth_k: &CameraIntrinsics,
    color_k: &CameraIntrinsics,
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_text(&dir.join("calib.txt"), &format_calib(depth_k, color_k))
}

pub fn write_frame(
    dir: &Path,
    index: usize,
    depth: &DepthImage,
    color: &ColorImage,
    pose: &RigidTransform,
    jpeg_quality: u8,
) -> Result<(), DatasetError> {
    let stem = dir.join(frame_stem(index));
    let dpath = stem.with_extension("depth.png");
    let png = codec::encode_depth_png(depth).map_err(|e| parse_err(&dpath, e))?;
    fs::write(&dpath, png).map_err(io_err(&dpath))?;
    let cpath = stem.with_extension("color.jpg");
    let jpg = codec::encode_color_jpeg(color, jpeg_quality).map_err(|e| parse_err(&cpath, e))?;
    fs::write(&cpath, jpg).map_err(io_err(&cpath))?;
    write_text(
        &stem.with_extension("pose.txt"),
        &format!("{}\n", pose.to_text()),
    )
}

/// Writes already-compressed payloads, as received over the wire.
pub fn write_frame_encoded(
    dir: &Path,
    index: usize,
    depth_png: &[u8],
    color_jpeg: &[u8],
    pose: &RigidTransform,
) -> Result<(), DatasetError> {
    let stem = dir.join(frame_stem(index));
    let dpath = stem.with_extension("depth.png");
    fs::write(&dpath, depth_png).map_err(io_err(&dpath))?;
    let cpath = stem.with_extension("color.jpg");
    fs::write(&cpath, color_jpeg).map_err(io_err(&cpath))?;
    write_text(
        &stem.with_extension("pose.txt"),
        &format!("{}\n", pose.to_text()),
    )
}

pub fn write_global_pose(dir: &Path, pose: &RigidTransform) -> Result<(), DatasetError> {
    write_text(
        &dir.join("global_pose.txt"),
        &format!("{}\n", pose.to_text()),
    )
}

/// Saves a whole sequence.
pub fn save_sequence<'a, I>(
    dir: &Path,
    depth_k: &CameraIntrinsics,
    color_k: &CameraIntrinsics,
    frames: I,
    global_pose: Option<&RigidTransform>,
    jpeg_quality: u8,
) -> Result<usize, DatasetError>
where
    I: IntoIterator<Item = (&'a DepthImage, &'a ColorImage, &'a RigidTransform)>,
{
    create_sequence(dir, depth_k, color_k)?;
    let mut n = 0;
    for (i, (d, c, p)) in frames.into_iter().enumerate() {
        write_frame(dir, i, d, c, p, jpeg_quality)?;
        n += 1;
    }
    if let Some(g) = global_pose {
        write_global_pose(dir, g)?;
    }
    Ok(n)
}

/// A sequence directory whose frames are read on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSequence {
    pub dir: PathBuf,
    pub depth_intrinsics: CameraIntrinsics,
    pub color_intrinsics: CameraIntrinsics,
    pub len: usize,
    pub global_pose: Option<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub index: usize,
    pub depth: DepthImage,
    pub color: ColorImage,
    pub pose: RigidTransform,
}

/// Opens a sequence, checking that frames are contiguous from 0 and that every
/// frame has all three files.
pub fn load_sequence(dir: &Path) -> Result<DatasetSequence, DatasetError> {
    let calib = dir.join("calib.txt");
    let text = fs::read_to_string(&calib).map_err(io_err(&calib))?;
    let (depth_intrinsics, color_intrinsics) = parse_calib(&text, &calib)?;
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry.map_err(io_err(dir))?.file_name();
        let name = name.to_string_lossy();
        for suffix in [".pose.txt", ".depth.png", ".color.jpg"] {
            if let Some(num) = name
                .strip_prefix("frame-")
                .and_then(|s| s.strip_suffix(suffix))
            {
                if let Ok(i) = num.parse::<usize>() {
                    indices.push(i);
                }
            }
        }
    }
    indices.sort_unstable();
    indices.dedup();
    for (expect, got) in indices.iter().enumerate() {
        if *got != expect {
            return Err(DatasetError::Gap {
                dir: dir.to_path_buf(),
                index: expect,
            });
        }
    }
    for &i in &indices {
        let stem = dir.join(frame_stem(i));
        for ext in ["depth.png", "color.jpg", "pose.txt"] {
            if !stem.with_extension(ext).exists() {
                return Err(DatasetError::Gap {
                    dir: dir.to_path_buf(),
                    index: i,
                });
            }
        }
    }
    if indices.is_empty() {
        return Err(DatasetError::Empty {
            dir: dir.to_path_buf(),
        });
    }
    let gp = dir.join("global_pose.txt");
    let global_pose = if gp.exists() {
        Some(read_pose(&gp)?)
    } else {
        None
    };
    Ok(DatasetSequence {
        dir: dir.to_path_buf(),
        depth_intrinsics,
        color_intrinsics,
        len: indices.len(),
        global_pose,
    })
}

impl DatasetSequence {
    pub fn pose(&self, index: usize) -> Result<RigidTransform, DatasetError> {
        read_pose(&self.dir.join(frame_stem(index)).with_extension("pose.txt"))
    }

    pub fn frame(&self, index: usize) -> Result<DatasetFrame, DatasetError> {
        let stem = self.dir.join(frame_stem(index));
        let dpath = stem.with_extension("depth.png");
        let bytes = fs::read(&dpath).map_err(io_err(&dpath))?;
        let depth = codec::decode_depth_png(&bytes).map_err(|e| parse_err(&dpath, e))?;
        depth
            .check_dims(&self.depth_intrinsics)
            .map_err(|e| parse_err(&dpath, e))?;
        let cpath = stem.with_extension("color.jpg");
        let bytes = fs::read(&cpath).map_err(io_err(&cpath))?;
        let color = codec::decode_color_jpeg(&bytes).map_err(|e| parse_err(&cpath, e))?;
        color
            .check_dims(&self.color_intrinsics)
            .map_err(|e| parse_err(&cpath, e))?;
        Ok(DatasetFrame {
            index,
            depth,
            color,
            pose: self.pose(index)?,
        })
    }
}

/// Sequence directories (`scene-XXX`) under a root, in name order.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.is_dir() && path.join("calib.txt").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
