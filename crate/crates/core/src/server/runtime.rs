//! Threads around [`ServerState`]: per-client readers feeding pooled queues,
//! the mapping loop, the relocalisation worker and the feedback renderer.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{RunReport, ServerConfig, ServerError, ServerState, StopReason};
use crate::camera::CameraIntrinsics;
use crate::pipeline::{AttemptRecord, ScheduleMode};
use crate::reloc::SceneId;
use crate::se3::RigidTransform;
use crate::sim::{
    make_overlapping_sequences_with, run_client, tracking_flags, ClientConfig, SyntheticScene,
    SyntheticSource, TrajectoryConfig, TransmissionReport,
};
use crate::volume::VolumeConfig;
use crate::wire::{
    memory_pipe, read_message, write_message, FrameMessage, Message, OverflowPolicy, PooledQueue,
};

/// A client link: messages in from the client, messages out to it.
pub struct Connection {
    pub reader: Box<dyn Read + Send>,
    pub writer: Box<dyn Write + Send>,
}

type Shared = Arc<Mutex<ServerState>>;
type Writers = Arc<Mutex<BTreeMap<SceneId, Box<dyn Write + Send>>>>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn empty_frame() -> FrameMessage {
    FrameMessage {
        frame_index: 0,
        local_pose: RigidTransform::identity(),
        depth_width: 0,
        depth_height: 0,
        color_width: 0,
        color_height: 0,
        depth_png: Vec::new(),
        color_jpeg: Vec::new(),
    }
}

struct ClientSlot {
    scene: SceneId,
    queue: Arc<PooledQueue<FrameMessage>>,
    reader: Option<JoinHandle<()>>,
}

fn spawn_reader(
    scene: SceneId,
    mut reader: Box<dyn Read + Send>,
    state: Shared,
    queue: Arc<PooledQueue<FrameMessage>>,
) -> JoinHandle<()> {
    thread::spawn(move || {
        match read_message(&mut reader) {
            Ok(Some(Message::Hello(h))) => {
                let added =
                    lock(&state).add_client(scene, &h.name, h.depth_intrinsics, h.color_intrinsics);
                if let Err(e) = added {
                    log::error!("client {scene}: {e}");
                    queue.close();
                    return;
                }
                log::info!("client {scene} ({}) connected", h.name);
            }
            other => {
                log::error!("client {scene}: expected hello, got {other:?}");
                queue.close();
                return;
            }
        }
        loop {
            match read_message(&mut reader) {
                Ok(Some(Message::Frame(f))) => {
                    if let Some(mut slot) = queue.begin_push() {
                        *slot = f;
                        slot.end_push();
                    }
                }
                Ok(Some(Message::RenderRequest(r))) => lock(&state).feedback.request(scene, r.pose),
                Ok(Some(Message::Bye)) | Ok(None) => break,
                Ok(Some(other)) => {
                    log::warn!("client {scene}: ignoring {:?}", other.message_type())
                }
                Err(e) => {
                    log::warn!("client {scene}: {e}");
                    break;
                }
            }
        }
        queue.close();
    })
}

fn spawn_feedback(state: Shared, writers: Writers, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            let served = lock(&state).feedback_step();
            match served {
                Some((client, img)) => {
                    if let Some(w) = lock(&writers).get_mut(&client) {
                        if let Err(e) = write_message(w, &Message::RenderedImage(img)) {
                            log::warn!("client {client}: feedback not delivered: {e}");
                        }
                    }
                }
                None => thread::sleep(Duration::from_millis(2)),
            }
        }
    })
}

fn spawn_relocaliser(state: Shared, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            let ran = lock(&state).relocalisation_step().is_some();
            if !ran {
                thread::sleep(Duration::from_millis(2));
            }
        }
    })
}

/// Serves connections until the channel is closed and every client has
/// finished. Batch mode then relocalises until its stop rule fires;
/// interactive mode relocalises in the background while frames arrive.
pub fn run_server(
    state: ServerState,
    incoming: Receiver<Connection>,
) -> Result<(ServerState, RunReport), ServerError> {
    let mode = state.config.mode;
    let capacity = state.config.ingest_queue_capacity;
    let policy = state.config.ingest_policy;
    let state: Shared = Arc::new(Mutex::new(state));
    let writers: Writers = Arc::new(Mutex::new(BTreeMap::new()));
    let stop = Arc::new(AtomicBool::new(false));
    let mut workers = vec![spawn_feedback(state.clone(), writers.clone(), stop.clone())];
    if mode == ScheduleMode::Interactive {
        workers.push(spawn_relocaliser(state.clone(), stop.clone()));
    }

    let mut clients: Vec<ClientSlot> = Vec::new();
    let mut incoming_open = true;
    loop {
        while incoming_open {
            match incoming.try_recv() {
                Ok(conn) => {
                    let scene = clients.len();
                    let queue = Arc::new(PooledQueue::new(capacity, policy, empty_frame));
                    lock(&writers).insert(scene, conn.writer);
                    let reader = spawn_reader(scene, conn.reader, state.clone(), queue.clone());
                    clients.push(ClientSlot {
                        scene,
                        queue,
                        reader: Some(reader),
                    });
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => incoming_open = false,
            }
        }
        let mut busy = false;
        let mut all_done = true;
        for c in &mut clients {
            if let Some(frame) = c.queue.pop() {
                busy = true;
                all_done = false;
                let mut s = lock(&state);
                if let Err(e) = s.ingest_frame(c.scene, &frame) {
                    log::warn!("{e}");
                }
            } else if c.queue.is_closed() {
                if let Some(h) = c.reader.take() {
                    let _ = h.join();
                    lock(&state).mark_finished(c.scene);
                }
            } else {
                all_done = false;
            }
        }
        if !incoming_open && all_done {
            break;
        }
        if !busy {
            thread::sleep(Duration::from_millis(1));
        }
    }

    let stop_reason = match mode {
        ScheduleMode::Batch => Some(lock(&state).run_batch_relocalisation()),
        ScheduleMode::Interactive => Some(StopReason::StreamsEnded),
    };
    stop.store(true, Ordering::SeqCst);
    for w in workers {
        let _ = w.join();
    }
    for (_, mut w) in std::mem::take(&mut *lock(&writers)) {
        let _ = write_message(&mut w, &Message::Bye);
    }

    let state = Arc::try_unwrap(state)
        .map_err(|_| ServerError::Config("server state still shared after shutdown".into()))?
        .into_inner()
        .unwrap_or_else(|e| e.into_inner());
    let report = state.report(stop_reason);
    Ok((state, report))
}

/// Accepts `clients` TCP connections in arrival order, then runs the server.
pub fn serve_tcp<A: ToSocketAddrs>(
    state: ServerState,
    addr: A,
    clients: usize,
) -> Result<(ServerState, RunReport), ServerError> {
    let listener = TcpListener::bind(addr)?;
    log::info!("listening on {}", listener.local_addr()?);
    let (tx, rx) = mpsc::channel();
    let acceptor = thread::spawn(move || -> std::io::Result<()> {
        for _ in 0..clients {
            let (stream, peer) = listener.accept()?;
            log::info!("connection from {peer}");
            stream.set_nodelay(true)?;
            let writer = stream.try_clone()?;
            if tx
                .send(Connection {
                    reader: Box::new(stream),
                    writer: Box::new(writer),
                })
                .is_err()
            {
                break;
            }
        }
        Ok(())
    });
    let out = run_server(state, rx);
    acceptor
        .join()
        .map_err(|_| ServerError::Config("accept thread panicked".into()))??;
    out
}

/// Agents sweeping one synthetic room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub agents: usize,
    pub scene_seed: u64,
    pub trajectory_seed: u64,
    pub overlap: f64,
    pub trajectory: TrajectoryConfig,
    pub tracking_failure_rate: f64,
    pub depth_intrinsics: CameraIntrinsics,
    pub color_intrinsics: CameraIntrinsics,
    pub client: ClientConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            agents: 3,
            scene_seed: 0,
            trajectory_seed: 0,
            overlap: 0.5,
            trajectory: TrajectoryConfig::default(),
            tracking_failure_rate: 0.0,
            depth_intrinsics: CameraIntrinsics::default_depth(),
            color_intrinsics: CameraIntrinsics::default_color(),
            client: ClientConfig {
                policy: OverflowPolicy::Wait,
                ..ClientConfig::default()
            },
        }
    }
}

impl SimulationConfig {
    /// A grid covering the room from any agent's local frame.
    pub fn volume(voxel_size: f64) -> VolumeConfig {
        let extent = [4.8, 3.2, 4.8];
        let dims = extent.map(|e: f64| (e / voxel_size).ceil() as usize);
        VolumeConfig::centred(dims, voxel_size)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        if self.agents == 0 {
            return Err(ServerError::Config("at least one agent is needed".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(ServerError::Config("overlap must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.tracking_failure_rate) {
            return Err(ServerError::Config(
                "tracking_failure_rate must lie in [0, 1)".into(),
            ));
        }
        for k in [&self.depth_intrinsics, &self.color_intrinsics] {
            k.validate()
                .map_err(|e| ServerError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Each agent's local-to-room transform.
    pub fn agents_to_world(&self) -> (Arc<SyntheticScene>, Vec<crate::sim::AgentSequence>) {
        let scene = Arc::new(SyntheticScene::generate(self.scene_seed));
        let (agents, _) = make_overlapping_sequences_with(
            &scene,
            self.agents,
            self.overlap,
            self.trajectory_seed,
            &self.trajectory,
        );
        (scene, agents)
    }

    pub fn sources(&self) -> (Vec<SyntheticSource>, Vec<RigidTransform>) {
        let (scene, agents) = self.agents_to_world();
        let truth = agents.iter().map(|a| a.to_world).collect();
        let sources = agents
            .into_iter()
            .enumerate()
            .map(|(i, agent)| {
                let n = agent.len();
                let mut s = SyntheticSource::new(scene.clone(), agent);
                s.depth_k = self.depth_intrinsics;
                s.color_k = self.color_intrinsics;
                if self.tracking_failure_rate > 0.0 {
                    s.tracked = tracking_flags(
                        n,
                        self.tracking_failure_rate,
                        self.trajectory_seed ^ i as u64,
                    );
                }
                s
            })
            .collect();
        (sources, truth)
    }
}

pub struct BatchOutput {
    pub report: RunReport,
    pub records: Vec<AttemptRecord>,
    /// Each agent's local-to-room transform.
    pub truth: Vec<RigidTransform>,
    /// True global poses relative to the first agent.
    pub truth_global: BTreeMap<SceneId, RigidTransform>,
    pub transmissions: Vec<TransmissionReport>,
    pub state: ServerState,
}

/// Server and simulated clients in one process, linked by in-memory pipes
/// carrying the wire protocol.
pub fn run_synthetic_batch(
    sim: &SimulationConfig,
    mut server: ServerConfig,
) -> Result<BatchOutput, ServerError> {
    sim.validate()?;
    if server.mode == ScheduleMode::Batch {
        server.ingest_policy = OverflowPolicy::Wait;
    }
    let (sources, truth) = sim.sources();
    let gt: Arc<Vec<RigidTransform>> = Arc::new(truth.clone());
    let state = ServerState::new(server, Some(gt))?;
    let (tx, rx) = mpsc::channel();
    let mut handles = Vec::new();
    for (i, src) in sources.into_iter().enumerate() {
        let (client_w, server_r) = memory_pipe(64);
        let (server_w, client_r) = memory_pipe(64);
        tx.send(Connection {
            reader: Box::new(server_r),
            writer: Box::new(server_w),
        })
        .map_err(|_| ServerError::Config("server stopped accepting".into()))?;
        let cfg = ClientConfig {
            name: format!("agent-{i}"),
            ..sim.client.clone()
        };
        handles.push(thread::spawn(move || {
            run_client(src, client_w, Some(client_r), &cfg)
        }));
    }
    drop(tx);
    let (state, report) = run_server(state, rx)?;
    let transmissions = handles
        .into_iter()
        .map(|h| {
            h.join().unwrap_or_else(|_| TransmissionReport {
                error: Some("client thread panicked".into()),
                ..Default::default()
            })
        })
        .collect();
    let inv0 = truth
        .first()
        .map(RigidTransform::inverse)
        .unwrap_or_default();
    let truth_global = truth
        .iter()
        .enumerate()
        .map(|(i, t)| (i, inv0.compose(t)))
        .collect();
    Ok(BatchOutput {
        report,
        records: state.records.clone(),
        truth,
        truth_global,
        transmissions,
        state,
    })
}
