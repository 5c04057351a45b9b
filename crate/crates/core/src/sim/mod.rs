//! Synthetic test bed: procedural rooms, camera paths, streaming clients and
//! dataset directories.

pub mod client;
pub mod dataset;
pub mod scene;
pub mod trajectory;

pub use client::{
    run_client, ClientConfig, DatasetSource, FrameSource, SourceFrame, SyntheticSource,
    TransmissionReport,
};
pub use dataset::{load_sequence, save_sequence, DatasetError, DatasetFrame, DatasetSequence};
pub use scene::{Primitive, SyntheticScene};
pub use trajectory::{
    make_overlapping_sequences, make_overlapping_sequences_with, relative_truth, tracking_flags,
    AgentSequence, PairTruth, TrajectoryConfig,
};
