//! Run configuration shared by every subcommand, stored as TOML.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use collabmap_core::alignment::parse_global_poses;
use collabmap_core::reloc::{OracleConfig, SceneId};
use collabmap_core::server::{ServerConfig, SimulationConfig};
use collabmap_core::RigidTransform;

pub const DEFAULT_VOXEL_SIZE: f64 = 0.025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Address `serve` listens on.
    pub listen: String,
    /// Address `simulate` connects to.
    pub connect: String,
    /// Connections `serve` accepts before it stops listening.
    pub clients: usize,
    /// Spool directory for `serve` and `batch`, input for `fuse`.
    pub scenes_dir: Option<PathBuf>,
    /// Ground-truth global poses, needed by the oracle relocaliser in `serve`.
    pub truth: Option<PathBuf>,
    /// Where `serve` and `batch` write poses, metrics and attempts.
    pub out_dir: PathBuf,
    pub server: ServerConfig,
    pub simulation: SimulationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            connect: "127.0.0.1:7878".into(),
            clients: 3,
            scenes_dir: None,
            truth: None,
            out_dir: PathBuf::from("out"),
            server: ServerConfig {
                volume: SimulationConfig::volume(DEFAULT_VOXEL_SIZE),
                oracle: OracleConfig {
                    inlier_noise_m: 0.005,
                    inlier_noise_deg: 0.5,
                    outlier_rate: 0.2,
                    ..OracleConfig::default()
                },
                ..ServerConfig::default()
            },
            simulation: SimulationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Sets every seed from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.server.seed = seed;
        self.server.oracle.rng_seed = seed;
        self.server.baseline.seed = seed;
        self.simulation.scene_seed = seed;
        self.simulation.trajectory_seed = seed;
    }

    pub fn set_voxel_size(&mut self, voxel_size: f64) -> Result<()> {
        if !(voxel_size.is_finite() && voxel_size >= 0.005) {
            bail!("voxel size must be at least 0.005 m");
        }
        self.server.volume = SimulationConfig::volume(voxel_size);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.server.validate()?;
        self.simulation.validate()?;
        for (name, addr) in [("listen", &self.listen), ("connect", &self.connect)] {
            addr.parse::<SocketAddr>()
                .with_context(|| format!("{name} address '{addr}' is not host:port"))?;
        }
        if self.clients == 0 {
            bail!("clients must be positive");
        }
        Ok(())
    }
}

/// Reads a global-pose file as the per-scene transforms the oracle needs.
/// Scene ids must run from 0 without gaps.
pub fn load_truth(path: &Path) -> Result<Vec<RigidTransform>> {
    let poses = load_poses(path)?;
    poses
        .iter()
        .enumerate()
        .map(|(i, (id, p))| {
            if *id != i {
                bail!("{}: scene {i} is missing", path.display());
            }
            Ok(*p)
        })
        .collect()
}

pub fn load_poses(path: &Path) -> Result<BTreeMap<SceneId, RigidTransform>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_global_poses(&text).with_context(|| format!("parsing {}", path.display()))
}
