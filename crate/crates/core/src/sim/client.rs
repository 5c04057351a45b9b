//! Streaming client: a producer thread fills a pooled queue with tracked
//! frames and a sender thread compresses and transmits them.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSequence;
use super::scene::SyntheticScene;
use super::trajectory::AgentSequence;
use crate::camera::{CameraIntrinsics, ColorImage, DepthImage};
use crate::se3::RigidTransform;
use crate::wire::{
    read_message, write_message, FrameMessage, Hello, Message, OverflowPolicy, PooledQueue,
    RenderRequest,
};

/// One frame as produced by a source, before transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFrame {
    pub index: u64,
    pub depth: DepthImage,
    pub color: ColorImage,
    pub pose: RigidTransform,
    pub tracked: bool,
}

pub trait FrameSource: Send {
    fn depth_intrinsics(&self) -> CameraIntrinsics;
    fn color_intrinsics(&self) -> CameraIntrinsics;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn tracked(&self, i: usize) -> bool;
    fn frame(&mut self, i: usize) -> Result<SourceFrame, String>;
}

/// Renders an agent's trajectory on demand.
pub struct SyntheticSource {
    pub scene: Arc<SyntheticScene>,
    pub agent: AgentSequence,
    pub depth_k: CameraIntrinsics,
    pub color_k: CameraIntrinsics,
    pub tracked: Vec<bool>,
}

impl SyntheticSource {
    pub fn new(scene: Arc<SyntheticScene>, agent: AgentSequence) -> Self {
        let n = agent.len();
        Self {
            scene,
            agent,
            depth_k: CameraIntrinsics::default_depth(),
            color_k: CameraIntrinsics::default_color(),
            tracked: vec![true; n],
        }
    }

    pub fn render(&self, i: usize) -> (DepthImage, ColorImage) {
        let world = self.agent.world_pose(i);
        let (depth, _) = self.scene.render(&world, &self.depth_k);
        let (_, color) = self.scene.render(&world, &self.color_k);
        (depth, color)
    }
}

impl FrameSource for SyntheticSource {
    fn depth_intrinsics(&self) -> CameraIntrinsics {
        self.depth_k
    }
    fn color_intrinsics(&self) -> CameraIntrinsics {
        self.color_k
    }
    fn len(&self) -> usize {
        self.agent.len()
    }
    fn tracked(&self, i: usize) -> bool {
        self.tracked.get(i).copied().unwrap_or(true)
    }
    fn frame(&mut self, i: usize) -> Result<SourceFrame, String> {
        let (depth, color) = self.render(i);
        Ok(SourceFrame {
            index: i as u64,
            depth,
            color,
            pose: self.agent.poses[i],
            tracked: self.tracked(i),
        })
    }
}

/// Replays a dataset directory.
pub struct DatasetSource {
    pub sequence: DatasetSequence,
}

impl FrameSource for DatasetSource {
    fn depth_intrinsics(&self) -> CameraIntrinsics {
        self.sequence.depth_intrinsics
    }
    fn color_intrinsics(&self) -> CameraIntrinsics {
        self.sequence.color_intrinsics
    }
    fn len(&self) -> usize {
        self.sequence.len
    }
    fn tracked(&self, _: usize) -> bool {
        true
    }
    fn frame(&mut self, i: usize) -> Result<SourceFrame, String> {
        let f = self.sequence.frame(i).map_err(|e| e.to_string())?;
        Ok(SourceFrame {
            index: i as u64,
            depth: f.depth,
            color: f.color,
            pose: f.pose,
            tracked: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub name: String,
    pub queue_capacity: usize,
    pub policy: OverflowPolicy,
    pub jpeg_quality: u8,
    /// Pause between produced frames; zero streams as fast as possible.
    pub frame_interval_ms: u64,
    /// Send a render request at the current pose every this many frames.
    pub render_request_every: Option<usize>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            name: "client".into(),
            queue_capacity: 8,
            policy: OverflowPolicy::Discard,
            jpeg_quality: crate::wire::DEFAULT_JPEG_QUALITY,
            frame_interval_ms: 0,
            render_request_every: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransmissionReport {
    pub frames_total: usize,
    pub sent: u64,
    pub discarded: u64,
    pub skipped_untracked: u64,
    pub bytes_sent: u64,
    pub raw_bytes: u64,
    pub sent_indices: Vec<u64>,
    pub rendered_images_received: u64,
    pub error: Option<String>,
}

struct Slot {
    index: u64,
    pose: RigidTransform,
    depth: DepthImage,
    color: ColorImage,
}

/// Streams every tracked frame of `source` over `writer`. If `reader` is
/// given, messages coming back from the server are drained on a third thread
/// and rendered images counted.
pub fn run_client<S, W, R>(
    mut source: S,
    mut writer: W,
    reader: Option<R>,
    config: &ClientConfig,
) -> TransmissionReport
where
    S: FrameSource + 'static,
    W: Write + Send + 'static,
    R: Read + Send + 'static,
{
    let depth_k = source.depth_intrinsics();
    let color_k = source.color_intrinsics();
    let queue = Arc::new(PooledQueue::new(
        config.queue_capacity.max(1),
        config.policy,
        move || Slot {
            index: 0,
            pose: RigidTransform::identity(),
            depth: DepthImage::new(depth_k.width, depth_k.height),
            color: ColorImage::new(color_k.width, color_k.height),
        },
    ));
    let mut report = TransmissionReport {
        frames_total: source.len(),
        ..Default::default()
    };

    let received = Arc::new(AtomicU64::new(0));
    let receiver = reader.map(|mut r| {
        let received = received.clone();
        std::thread::spawn(move || {
            while let Ok(Some(msg)) = read_message(&mut r) {
                match msg {
                    Message::RenderedImage(_) => {
                        received.fetch_add(1, Ordering::SeqCst);
                    }
                    Message::Bye => break,
                    _ => {}
                }
            }
        })
    });

    let sender = {
        let queue = queue.clone();
        let quality = config.jpeg_quality;
        let hello = Message::Hello(Hello {
            name: config.name.clone(),
            depth_intrinsics: depth_k,
            color_intrinsics: color_k,
        });
        let every = config.render_request_every;
        std::thread::spawn(move || {
            let mut out = SenderOutcome::default();
            if let Err(e) = write_message(&mut writer, &hello) {
                out.error = Some(e.to_string());
                queue.close();
                return out;
            }
            while let Some(slot) = queue.pop_blocking() {
                let msg = match FrameMessage::encode(
                    slot.index,
                    &slot.pose,
                    &slot.depth,
                    &slot.color,
                    quality,
                ) {
                    Ok(m) => m,
                    Err(e) => {
                        out.error = Some(e.to_string());
                        break;
                    }
                };
                out.raw_bytes += msg.raw_bytes() as u64;
                let bytes = Message::Frame(msg).to_bytes();
                if let Err(e) = writer.write_all(&bytes).and_then(|_| writer.flush()) {
                    out.error = Some(e.to_string());
                    break;
                }
                out.bytes_sent += bytes.len() as u64;
                out.sent.push(slot.index);
                if let Some(n) = every {
                    if n > 0 && out.sent.len() % n == 0 {
                        let req = Message::RenderRequest(RenderRequest {
                            client_id: 0,
                            pose: slot.pose,
                        });
                        if let Err(e) = write_message(&mut writer, &req) {
                            out.error = Some(e.to_string());
                            break;
                        }
                    }
                }
            }
            if out.error.is_some() {
                queue.close();
            } else if let Err(e) = write_message(&mut writer, &Message::Bye) {
                out.error = Some(e.to_string());
            }
            out
        })
    };

    let interval = Duration::from_millis(config.frame_interval_ms);
    let mut producer_error = None;
    for i in 0..source.len() {
        if queue.is_closed() {
            report.discarded += 1;
            continue;
        }
        if !source.tracked(i) {
            report.skipped_untracked += 1;
            continue;
        }
        let Some(mut slot) = queue.begin_push() else {
            continue;
        };
        match source.frame(i) {
            Ok(f) => {
                slot.index = f.index;
                slot.pose = f.pose;
                slot.depth.clone_from(&f.depth);
                slot.color.clone_from(&f.color);
                slot.end_push();
            }
            Err(e) => {
                producer_error = Some(e);
                drop(slot);
                break;
            }
        }
        if !interval.is_zero() {
            std::thread::sleep(interval);
        }
    }
    queue.close();
    let out = sender.join().unwrap_or_else(|_| SenderOutcome {
        error: Some("sender thread panicked".into()),
        ..Default::default()
    });
    if let Some(h) = receiver {
        let _ = h.join();
    }
    let c = queue.counters();
    report.discarded += c.discarded;
    report.sent = out.sent.len() as u64;
    report.sent_indices = out.sent;
    report.bytes_sent = out.bytes_sent;
    report.raw_bytes = out.raw_bytes;
    report.rendered_images_received = received.load(Ordering::SeqCst);
    report.error = producer_error.or(out.error);
    report
}

#[derive(Default)]
struct SenderOutcome {
    sent: Vec<u64>,
    bytes_sent: u64,
    raw_bytes: u64,
    error: Option<String>,
}
