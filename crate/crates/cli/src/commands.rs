use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use collabmap_core::alignment::format_global_poses;
use collabmap_core::evaluation::{evaluate_records, format_table, Evaluation};
use collabmap_core::pipeline::{parse_attempt_records, AttemptRecord, ScheduleMode};
use collabmap_core::reloc::{GroundTruth, SceneId};
use collabmap_core::se3::pose_distance;
use collabmap_core::server::{
    fuse_from_disk, run_synthetic_batch, serve_tcp, RunReport, ServerState,
};
use collabmap_core::sim::dataset::{
    self, create_sequence, list_scene_dirs, scene_dir_name, write_frame,
};
use collabmap_core::sim::{
    run_client, ClientConfig, DatasetSource, FrameSource, TransmissionReport,
};
use collabmap_core::{extract_mesh, RigidTransform};

use crate::config::{load_poses, load_truth, RunConfig};

#[derive(Debug, Serialize)]
struct PoseError {
    translation_m: f64,
    angle_deg: f64,
}

#[derive(Debug, Serialize)]
struct Metrics<'a> {
    report: &'a RunReport,
    evaluation: &'a Evaluation,
    /// Published pose against ground truth, when truth is known.
    pose_errors: BTreeMap<SceneId, PoseError>,
}

fn published(report: &RunReport) -> Result<BTreeMap<SceneId, RigidTransform>> {
    report
        .poses
        .iter()
        .map(|(id, a)| Ok((*id, RigidTransform::from_array(a)?)))
        .collect()
}

fn write_outputs(
    cfg: &RunConfig,
    report: &RunReport,
    records: &[AttemptRecord],
    truth: Option<&BTreeMap<SceneId, RigidTransform>>,
) -> Result<()> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let poses = published(report)?;
    fs::write(dir.join("poses.txt"), format_global_poses(&poses))?;

    let mut jsonl = BufWriter::new(File::create(dir.join("attempts.jsonl"))?);
    for r in records {
        writeln!(jsonl, "{}", r.to_json_line())?;
    }
    jsonl.flush()?;

    let evaluation = evaluate_records(records, truth)?;
    let pose_errors = truth
        .map(|t| {
            poses
                .iter()
                .filter_map(|(id, p)| {
                    let d = pose_distance(p, t.get(id)?);
                    Some((
                        *id,
                        PoseError {
                            translation_m: d.translation_m,
                            angle_deg: d.angle_deg,
                        },
                    ))
                })
                .collect()
        })
        .unwrap_or_default();
    let metrics = Metrics {
        report,
        evaluation: &evaluation,
        pose_errors,
    };
    let mut text = serde_json::to_string_pretty(&metrics)?;
    text.push('\n');
    fs::write(dir.join("metrics.json"), text)?;
    print!("{}", format_table(&evaluation));
    println!(
        "stop: {:?}, attempts: {}, posed: {}/{}",
        report.stop_reason,
        report.attempts,
        poses.len(),
        report.frames_fused.len()
    );
    Ok(())
}

/// Batch runs succeed only when every scene received a global pose.
fn check_posed(report: &RunReport) -> Result<()> {
    if report.mode == ScheduleMode::Batch {
        let unposed: Vec<_> = report
            .frames_fused
            .keys()
            .filter(|id| !report.poses.contains_key(id))
            .collect();
        if !unposed.is_empty() {
            bail!(
                "scenes {unposed:?} were never aligned ({:?})",
                report.stop_reason
            );
        }
    }
    if report.poses.is_empty() {
        bail!("no global poses were published");
    }
    Ok(())
}

pub fn serve(cfg: &RunConfig) -> Result<()> {
    let mut server = cfg.server.clone();
    server.spool_dir = cfg.scenes_dir.clone();
    let truth = cfg.truth.as_deref().map(load_truth).transpose()?;
    let gt = truth.map(|t| Arc::new(t) as Arc<dyn GroundTruth>);
    let state = ServerState::new(server, gt)?;
    let (state, report) = serve_tcp(state, cfg.listen.as_str(), cfg.clients)?;
    let globals = cfg.truth.as_deref().map(load_poses).transpose()?;
    write_outputs(cfg, &report, &state.records, globals.as_ref())?;
    check_posed(&report)
}

fn stream_all<S: FrameSource + 'static>(
    cfg: &RunConfig,
    sources: Vec<S>,
) -> Result<Vec<TransmissionReport>> {
    // Connect in order so the server numbers scenes like the sources.
    let mut links = Vec::new();
    for _ in &sources {
        let stream = TcpStream::connect(&cfg.connect)
            .with_context(|| format!("connecting to {}", cfg.connect))?;
        stream.set_nodelay(true)?;
        links.push(stream);
    }
    let handles: Vec<_> = sources
        .into_iter()
        .zip(links)
        .enumerate()
        .map(|(i, (src, stream))| {
            let client = ClientConfig {
                name: format!("agent-{i}"),
                ..cfg.simulation.client.clone()
            };
            let reader = stream.try_clone();
            thread::spawn(move || -> Result<TransmissionReport> {
                Ok(run_client(src, stream, Some(reader?), &client))
            })
        })
        .collect();
    handles
        .into_iter()
        .map(|h| {
            h.join()
                .map_err(|_| anyhow::anyhow!("client thread panicked"))?
        })
        .collect()
}

pub fn simulate(
    cfg: &RunConfig,
    dataset_dir: Option<&Path>,
    truth_out: Option<&Path>,
) -> Result<()> {
    let reports = match dataset_dir {
        Some(root) => {
            let mut sources = Vec::new();
            for dir in list_scene_dirs(root)? {
                sources.push(DatasetSource {
                    sequence: dataset::load_sequence(&dir)?,
                });
            }
            if sources.is_empty() {
                bail!("no scene directories under {}", root.display());
            }
            stream_all(cfg, sources)?
        }
        None => {
            let (sources, truth) = cfg.simulation.sources();
            if let Some(path) = truth_out {
                fs::write(path, format_global_poses(&relative_to_first(&truth)))?;
            }
            stream_all(cfg, sources)?
        }
    };
    let mut failed = false;
    for (i, r) in reports.iter().enumerate() {
        println!(
            "agent {i}: sent {}/{} frames, discarded {}, {} of {} raw bytes",
            r.sent, r.frames_total, r.discarded, r.bytes_sent, r.raw_bytes
        );
        if let Some(e) = &r.error {
            eprintln!("agent {i}: {e}");
            failed = true;
        }
    }
    if failed {
        bail!("a client stream failed");
    }
    Ok(())
}

fn relative_to_first(to_world: &[RigidTransform]) -> BTreeMap<SceneId, RigidTransform> {
    let inv0 = to_world
        .first()
        .map(RigidTransform::inverse)
        .unwrap_or_default();
    to_world
        .iter()
        .enumerate()
        .map(|(i, t)| match i {
            0 => (0, RigidTransform::identity()),
            _ => (i, inv0.compose(t)),
        })
        .collect()
}

pub fn batch(cfg: &RunConfig) -> Result<()> {
    let mut server = cfg.server.clone();
    server.spool_dir = cfg.scenes_dir.clone();
    let out = run_synthetic_batch(&cfg.simulation, server)?;
    write_outputs(cfg, &out.report, &out.records, Some(&out.truth_global))?;
    check_posed(&out.report)
}

pub fn fuse(cfg: &RunConfig, poses_path: &Path, out: &Path) -> Result<()> {
    let Some(root) = &cfg.scenes_dir else {
        bail!("fuse needs --scenes-dir");
    };
    let poses = load_poses(poses_path)?;
    let vol = fuse_from_disk(cfg.server.volume, root, &poses)?;
    let mesh = extract_mesh(&vol);
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    mesh.write_ply(&mut w)?;
    w.flush()?;
    println!(
        "{} vertices, {} triangles from {} scenes",
        mesh.vertices.len(),
        mesh.faces.len(),
        poses.len()
    );
    Ok(())
}

pub fn evaluate(records_path: &Path, gt: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(records_path)
        .with_context(|| format!("reading {}", records_path.display()))?;
    let records = parse_attempt_records(&text)
        .with_context(|| format!("parsing {}", records_path.display()))?;
    let globals = gt.map(load_poses).transpose()?;
    let evaluation = evaluate_records(&records, globals.as_ref())?;
    let to_stdout = json.is_some_and(|p| p == Path::new("-"));
    if to_stdout {
        println!("{}", serde_json::to_string_pretty(&evaluation)?);
        return Ok(());
    }
    print!("{}", format_table(&evaluation));
    if let Some(path) = json {
        let mut text = serde_json::to_string_pretty(&evaluation)?;
        text.push('\n');
        fs::write(path, text)?;
    }
    Ok(())
}

pub fn dataset_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (sources, truth) = cfg.simulation.sources();
    let globals = relative_to_first(&truth);
    fs::create_dir_all(out)?;
    let quality = cfg.simulation.client.jpeg_quality;
    for (i, mut src) in sources.into_iter().enumerate() {
        let dir = out.join(scene_dir_name(i));
        let (dk, ck) = (src.depth_intrinsics(), src.color_intrinsics());
        create_sequence(&dir, &dk, &ck)?;
        let mut written = 0;
        for f in 0..src.len() {
            if !src.tracked(f) {
                continue;
            }
            let frame = src.frame(f).map_err(anyhow::Error::msg)?;
            write_frame(
                &dir,
                written,
                &frame.depth,
                &frame.color,
                &frame.pose,
                quality,
            )?;
            written += 1;
        }
        dataset::write_global_pose(&dir, &globals[&i])?;
        println!("{}: {written} frames", dir.display());
    }
    fs::write(out.join("truth.txt"), format_global_poses(&globals))?;
    Ok(())
}
