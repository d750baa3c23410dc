//! JSON-in/JSON-out operations behind the browser page. Each `*_json`
//! function is plain Rust; the `#[wasm_bindgen]` wrappers only turn errors
//! into JS strings.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use quest_core::channel::{apply_dropout, decode_packet, encode_packet, packet_bytes, ChannelConfig, BOX_RECORD_FLOATS};
use quest_core::geometry::{bev_iou, footprint_intersection, transform_point, BBox3D, Pose};
use quest_core::pipeline::{detect_both, link_seed, visibility_info, ModelBundle, SimConfig};
use quest_core::query::{select_by_requirement, Requirement};
use quest_core::scenario::generate_scene;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("bad input: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] quest_core::Error),
}

type Result<T> = std::result::Result<T, DemoError>;

/// A footprint as the page describes it.
#[derive(Debug, Clone, Copy, Deserialize)]
pub struct BoxInput {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl BoxInput {
    fn bbox(&self) -> Result<BBox3D> {
        Ok(BBox3D::new([self.cx, self.cy, 0.0], [self.length, self.width, 1.0], self.yaw, 0)?)
    }
}

#[derive(Debug, Serialize)]
pub struct IouOutput {
    pub iou: f64,
    pub a: Vec<[f64; 2]>,
    pub b: Vec<[f64; 2]>,
    pub intersection: Vec<[f64; 2]>,
    pub intersection_area: f64,
}

pub fn iou(a: &BoxInput, b: &BoxInput) -> Result<IouOutput> {
    let (ba, bb) = (a.bbox()?, b.bbox()?);
    let intersection = footprint_intersection(&ba, &bb);
    Ok(IouOutput {
        iou: bev_iou(&ba, &bb),
        a: ba.footprint().to_vec(),
        b: bb.footprint().to_vec(),
        intersection_area: quest_core::geometry::polygon_area(&intersection),
        intersection,
    })
}

/// `{"a": box, "b": box}` → IoU, both footprints and the clipped overlap.
pub fn iou_json(input: &str) -> Result<String> {
    #[derive(Deserialize)]
    struct Pair {
        a: BoxInput,
        b: BoxInput,
    }
    let p: Pair = serde_json::from_str(input)?;
    Ok(serde_json::to_string(&iou(&p.a, &p.b)?)?)
}

#[derive(Debug, Serialize)]
pub struct ObjectView {
    pub id: u32,
    pub footprint: Vec<[f64; 2]>,
    pub veh_visible: bool,
    pub inf_visible: bool,
}

#[derive(Debug, Serialize)]
pub struct QueryView {
    /// World-frame reference point.
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub real: bool,
    pub selected: bool,
    pub delivered: bool,
}

#[derive(Debug, Serialize)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub fov_deg: f64,
    pub max_range: f64,
}

#[derive(Debug, Serialize)]
pub struct SceneOutput {
    pub vehicle: AgentPose,
    pub infrastructure: AgentPose,
    pub objects: Vec<ObjectView>,
    pub infra_queries: Vec<QueryView>,
    pub selected: usize,
    pub delivered: usize,
    pub query_bytes: usize,
    pub box_bytes: usize,
    pub all_query_bytes: usize,
}

fn agent(pose: &Pose, fov_deg: f64, max_range: f64) -> AgentPose {
    AgentPose { x: pose.translation[0], y: pose.translation[1], yaw: pose.yaw(), fov_deg, max_range }
}

/// One scene seen from both agents, with the infrastructure queries that
/// survive the confidence threshold and the lossy link.
pub fn scene(seed: u64, threshold: f64, dropout: f64) -> Result<SceneOutput> {
    let sim = SimConfig::default();
    Requirement::threshold(threshold).validate()?;
    let channel = ChannelConfig { dropout_ratio: dropout, seed: 0 };
    channel.validate()?;
    let scene = generate_scene(&sim.scene, seed)?;
    // query confidences come from the detector simulation, not the networks
    let model = ModelBundle::init(&Default::default(), &Default::default(), 0)?;
    let (_, inf) = detect_both(&scene, &model, &sim)?;
    let vis = visibility_info(&scene, &sim);
    let selected = select_by_requirement(&inf.batch, &Requirement::threshold(threshold), &scene.veh_pose);
    let (delivered, report) = apply_dropout(&selected, &ChannelConfig { seed: link_seed(&channel, &scene), ..channel });

    let sel_ids: Vec<u32> = selected.queries.iter().map(|q| q.query_id).collect();
    let del_ids: Vec<u32> = delivered.queries.iter().map(|q| q.query_id).collect();
    let infra_queries = inf
        .batch
        .queries
        .iter()
        .zip(&inf.sources)
        .map(|(q, src)| {
            let p = transform_point(&inf.batch.pose, q.ref_point);
            QueryView {
                x: p[0],
                y: p[1],
                confidence: q.confidence,
                real: src.is_some(),
                selected: sel_ids.contains(&q.query_id),
                delivered: del_ids.contains(&q.query_id),
            }
        })
        .collect();
    let objects = scene
        .objects
        .iter()
        .map(|o| ObjectView {
            id: o.id,
            footprint: o.bbox.footprint().to_vec(),
            veh_visible: vis.veh_visible.contains(&o.id),
            inf_visible: vis.inf_visible.contains(&o.id),
        })
        .collect();
    let dim = inf.batch.feature_dim().unwrap_or(0);
    Ok(SceneOutput {
        vehicle: agent(&scene.veh_pose, sim.veh_vis.fov_deg, sim.veh_vis.max_range),
        infrastructure: agent(&scene.inf_pose, sim.inf_vis.fov_deg, sim.inf_vis.max_range),
        objects,
        infra_queries,
        selected: selected.len(),
        delivered: report.queries_sent,
        query_bytes: report.bytes_sent,
        box_bytes: packet_bytes(report.queries_sent, BOX_RECORD_FLOATS),
        all_query_bytes: packet_bytes(inf.batch.len(), dim),
    })
}

pub fn scene_json(seed: u64, threshold: f64, dropout: f64) -> Result<String> {
    Ok(serde_json::to_string(&scene(seed, threshold, dropout)?)?)
}

#[derive(Debug, Serialize)]
pub struct PacketOutput {
    pub bytes: usize,
    pub queries: usize,
    pub feature_dim: usize,
    /// First 74 bytes in hex.
    pub head_hex: String,
    pub flipped_bit: Option<usize>,
    /// `"ok"` or the decode error name.
    pub decode: String,
    pub message: String,
}

/// Encodes the scene's selected infrastructure queries, optionally flips
/// one bit, and reports what the decoder makes of it.
pub fn packet(seed: u64, threshold: f64, flip_bit: Option<usize>) -> Result<PacketOutput> {
    let sim = SimConfig::default();
    Requirement::threshold(threshold).validate()?;
    let scene = generate_scene(&sim.scene, seed)?;
    let model = ModelBundle::init(&Default::default(), &Default::default(), 0)?;
    let (_, inf) = detect_both(&scene, &model, &sim)?;
    let selected = select_by_requirement(&inf.batch, &Requirement::threshold(threshold), &scene.veh_pose);
    let mut bytes = encode_packet(&selected)?;
    let flipped_bit = flip_bit.map(|b| b % (bytes.len() * 8));
    if let Some(b) = flipped_bit {
        bytes[b / 8] ^= 1 << (b % 8);
    }
    let (decode, message) = match decode_packet(&bytes) {
        Ok(batch) => ("ok".to_string(), format!("{} queries decoded", batch.len())),
        Err(e) => (e.name().to_string(), e.to_string()),
    };
    Ok(PacketOutput {
        bytes: bytes.len(),
        queries: selected.len(),
        feature_dim: selected.feature_dim().unwrap_or(0),
        head_hex: bytes.iter().take(74).map(|b| format!("{b:02x}")).collect(),
        flipped_bit,
        decode,
        message,
    })
}

/// `flip_bit < 0` leaves the packet intact.
pub fn packet_json(seed: u64, threshold: f64, flip_bit: i64) -> Result<String> {
    let flip = usize::try_from(flip_bit).ok();
    Ok(serde_json::to_string(&packet(seed, threshold, flip)?)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = boxIou)]
pub fn box_iou(input: &str) -> std::result::Result<String, JsValue> {
    js(iou_json(input))
}

#[wasm_bindgen(js_name = sceneView)]
pub fn scene_view(seed: u32, threshold: f64, dropout: f64) -> std::result::Result<String, JsValue> {
    js(scene_json(seed as u64, threshold, dropout))
}

#[wasm_bindgen(js_name = inspectPacket)]
pub fn inspect_packet(seed: u32, threshold: f64, flip_bit: i32) -> std::result::Result<String, JsValue> {
    js(packet_json(seed as u64, threshold, flip_bit as i64))
}
