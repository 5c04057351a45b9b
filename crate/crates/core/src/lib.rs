pub mod alignment;
pub mod camera;
pub mod evaluation;
pub mod mesh;
pub mod pipeline;
pub mod reloc;
pub mod se3;
pub mod server;
pub mod sim;
pub mod volume;
pub mod wire;

pub use camera::{CameraIntrinsics, ColorImage, DepthImage, Frame};
pub use mesh::{extract_mesh, TriangleMesh};
pub use se3::{PoseDistance, PoseResidual, RigidTransform};
pub use volume::{TsdfVolume, VolumeConfig};
