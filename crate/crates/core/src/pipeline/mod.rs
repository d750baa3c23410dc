//! End-to-end assembly: the learnable model bundle, the query decoder head,
//! and one-frame inference for each cooperation mode.

mod train;

pub use train::{bundle_grad_check, train_scene_seeds, GRAD_CHECK_FLOOR, scene_loss, train, LossBreakdown, TrainConfig, TrainOutcome};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::channel::{apply_dropout, decode_packet, encode_packet, encode_request, decode_request, ChannelConfig, TransmissionReport, BOX_RECORD_FLOATS};
use crate::error::{Error, Result};
use crate::evaluation::{Prediction, VisibilityInfo};
use crate::geometry::{bev_iou, transform_box, wrap_angle, BBox3D, PerceptionRange, Vec3};
use crate::interaction::{interact, relative_pose, InteractionConfig, InteractionNets};
use crate::nn::{init_net, sigmoid, Activation, DenseNet, ParamVector, Rng};
use crate::query::{select_by_requirement, ObjectQuery, QueryBatch, Requirement};
use crate::scenario::{
    simulate_detections, visible_objects, AgentView, Detections, DetectorNoise, Scene, SceneConfig, VisibilityConfig,
    DESCRIPTOR_DIM, INFRA_AGENT_ID, VEHICLE_AGENT_ID,
};

/// Raw head outputs: center offset (3), log dims (3), heading (sin, cos),
/// confidence logit.
pub const HEAD_OUTPUTS: usize = 9;
const LOG_DIM_CLAMP: f64 = 20.0;
pub const NMS_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    VehicleOnly,
    ResultCoop,
    QuestF,
    Quest,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::VehicleOnly, Mode::ResultCoop, Mode::QuestF, Mode::Quest];

    pub fn name(self) -> &'static str {
        match self {
            Mode::VehicleOnly => "vehicle_only",
            Mode::ResultCoop => "result_coop",
            Mode::QuestF => "quest_f",
            Mode::Quest => "quest",
        }
    }

    pub fn is_query_mode(self) -> bool {
        matches!(self, Mode::Quest | Mode::QuestF)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub det_hidden: usize,
    pub embed_hidden: usize,
    pub align_hidden: usize,
    pub weight_hidden: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { feature_dim: 32, det_hidden: 64, embed_hidden: 128, align_hidden: 128, weight_hidden: 16, head_hidden: 128 }
    }
}

/// Every learnable network of the system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub det_encoder: DenseNet,
    pub embed_encoder: DenseNet,
    pub align_net: DenseNet,
    pub weight_net: DenseNet,
    pub decoder_head: DenseNet,
}

pub const BUNDLE_NETS: [&str; 5] = ["det_encoder", "embed_encoder", "align_net", "weight_net", "decoder_head"];

impl ModelBundle {
    pub fn init(cfg: &ModelConfig, icfg: &InteractionConfig, seed: u64) -> Result<Self> {
        use Activation::{Identity, Relu, Sigmoid};
        let d = cfg.feature_dim;
        let mut rng = Rng::new(seed);
        let mut next = || rng.next_u64();
        let bundle = ModelBundle {
            det_encoder: init_net(&[DESCRIPTOR_DIM, cfg.det_hidden, d], &[Relu, Identity], next())?,
            embed_encoder: init_net(&[icfg.grid_len() + d, cfg.embed_hidden, icfg.embedding_dim], &[Relu, Identity], next())?,
            align_net: init_net(&[d + 9, cfg.align_hidden, d], &[Relu, Identity], next())?,
            weight_net: init_net(&[1, cfg.weight_hidden, 1], &[Relu, Sigmoid], next())?,
            decoder_head: init_net(&[d + 3, cfg.head_hidden, HEAD_OUTPUTS], &[Relu, Identity], next())?,
        };
        bundle.validate(icfg)?;
        Ok(bundle)
    }

    pub fn feature_dim(&self) -> usize {
        self.det_encoder.out_dim()
    }

    /// Checks that the networks chain through detection, interaction and
    /// decoding.
    pub fn validate(&self, icfg: &InteractionConfig) -> Result<()> {
        let d = self.feature_dim();
        let checks = [
            (self.det_encoder.in_dim(), DESCRIPTOR_DIM),
            (self.embed_encoder.in_dim(), icfg.grid_len() + d),
            (self.embed_encoder.out_dim(), icfg.embedding_dim),
            (self.align_net.in_dim(), d + 9),
            (self.align_net.out_dim(), d),
            (self.weight_net.in_dim(), 1),
            (self.weight_net.out_dim(), 1),
            (self.decoder_head.in_dim(), d + 3),
            (self.decoder_head.out_dim(), HEAD_OUTPUTS),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(Error::DimMismatch { expected, actual });
            }
        }
        if self.weight_net.layers.last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::Invalid("weight net must end in a sigmoid".into()));
        }
        Ok(())
    }

    pub fn nets(&self) -> [&DenseNet; 5] {
        [&self.det_encoder, &self.embed_encoder, &self.align_net, &self.weight_net, &self.decoder_head]
    }

    pub fn nets_mut(&mut self) -> [&mut DenseNet; 5] {
        [&mut self.det_encoder, &mut self.embed_encoder, &mut self.align_net, &mut self.weight_net, &mut self.decoder_head]
    }

    pub fn interaction_nets(&self) -> InteractionNets<'_> {
        InteractionNets { embed: &self.embed_encoder, align: &self.align_net, weight: &self.weight_net }
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// All parameters, nets in bundle order.
    pub fn params(&self) -> ParamVector {
        ParamVector(self.nets().iter().flat_map(|n| n.params().0).collect())
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::LengthMismatch { left: self.param_count(), right: p.len() });
        }
        let mut off = 0;
        for net in self.nets_mut() {
            let n = net.param_count();
            net.set_params(&ParamVector(p.0[off..off + n].to_vec()))?;
            off += n;
        }
        Ok(())
    }

    /// Checkpoint body: the five parameter vectors back to back, each
    /// length-prefixed.
    pub fn to_qcp(&self) -> Vec<u8> {
        self.nets().iter().flat_map(|n| n.params().to_bytes()).collect()
    }

    /// Loads parameters into a bundle whose architecture is already known
    /// (typically rebuilt from the manifest).
    pub fn load_qcp(&mut self, bytes: &[u8]) -> Result<()> {
        let mut off = 0;
        for net in self.nets_mut() {
            let (p, used) = ParamVector::from_bytes(&bytes[off..])?;
            net.set_params(&p)?;
            off += used;
        }
        if off != bytes.len() {
            return Err(Error::LengthMismatch { left: off, right: bytes.len() });
        }
        Ok(())
    }
}

/// Decoder input: feature ⊕ normalized reference point.
pub fn head_input(q: &ObjectQuery, range: &PerceptionRange) -> Vec<f64> {
    let mut input = q.feature.clone();
    input.extend_from_slice(&range.normalize(q.ref_point));
    input
}

/// Interprets raw head outputs relative to a reference point.
pub fn decode_raw(raw: &[f64], ref_point: Vec3, class_id: u16) -> Result<Prediction> {
    if raw.len() != HEAD_OUTPUTS {
        return Err(Error::DimMismatch { expected: HEAD_OUTPUTS, actual: raw.len() });
    }
    let center = [ref_point[0] + raw[0], ref_point[1] + raw[1], ref_point[2] + raw[2]];
    let dims = [
        raw[3].clamp(-LOG_DIM_CLAMP, LOG_DIM_CLAMP).exp(),
        raw[4].clamp(-LOG_DIM_CLAMP, LOG_DIM_CLAMP).exp(),
        raw[5].clamp(-LOG_DIM_CLAMP, LOG_DIM_CLAMP).exp(),
    ];
    // atan2(0, 0) = 0
    let yaw = raw[6].atan2(raw[7]);
    let bbox = BBox3D::new(center, dims, wrap_angle(yaw), class_id)?;
    Ok(Prediction { bbox, score: sigmoid(raw[8]) })
}

pub fn decode_head(q: &ObjectQuery, head: &DenseNet, range: &PerceptionRange) -> Result<Prediction> {
    let input = head_input(q, range);
    if input.len() != head.in_dim() {
        return Err(Error::DimMismatch { expected: head.in_dim(), actual: input.len() });
    }
    decode_raw(&head.eval(&input)?, q.ref_point, q.class_id)
}

pub fn decode_batch(batch: &QueryBatch, head: &DenseNet, range: &PerceptionRange) -> Result<Vec<Prediction>> {
    batch.queries.iter().map(|q| decode_head(q, head, range)).collect()
}

/// Greedy NMS: higher scores first, anything overlapping a kept box at
/// `iou_thr` or more is dropped.
pub fn nms(preds: &[Prediction], iou_thr: f64) -> Vec<Prediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| preds[*b].score.partial_cmp(&preds[*a].score).unwrap_or(Ordering::Equal).then(a.cmp(b)));
    let mut kept: Vec<Prediction> = Vec::new();
    for i in order {
        if kept.iter().all(|k| bev_iou(&k.bbox, &preds[i].bbox) < iou_thr) {
            kept.push(preds[i]);
        }
    }
    kept
}

/// Scene, sensing and detector-noise settings of the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scene: SceneConfig,
    pub veh_vis: VisibilityConfig,
    pub inf_vis: VisibilityConfig,
    pub veh_noise: DetectorNoise,
    pub inf_noise: DetectorNoise,
    pub range: PerceptionRange,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scene: SceneConfig::default(),
            veh_vis: VisibilityConfig { fov_deg: 120.0, max_range: 100.0, occlusion_enabled: true },
            // an elevated roadside camera looks over the traffic, so 2D
            // occlusion is not applied on that side
            inf_vis: VisibilityConfig { fov_deg: 170.0, max_range: 250.0, occlusion_enabled: false },
            veh_noise: DetectorNoise {
                pos_sigma: 0.2,
                depth_sigma_rate: 0.03,
                yaw_sigma: 0.05,
                dim_sigma: 0.05,
                miss_rate_base: 0.05,
                conf_noise_sigma: 0.05,
                background_queries: 50,
                background_conf_max: 0.2,
                ghost_queries: 10,
                ghost_max_range: 0.0,
            },
            inf_noise: DetectorNoise {
                pos_sigma: 0.15,
                depth_sigma_rate: 0.01,
                yaw_sigma: 0.03,
                dim_sigma: 0.03,
                miss_rate_base: 0.05,
                conf_noise_sigma: 0.05,
                background_queries: 15,
                background_conf_max: 0.2,
                ghost_queries: 10,
                ghost_max_range: 100.0,
            },
            range: PerceptionRange::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.veh_vis.validate()?;
        self.inf_vis.validate()?;
        self.veh_noise.validate()?;
        self.inf_noise.validate()?;
        self.range.validate()
    }

    pub fn veh_view(&self, scene: &Scene) -> AgentView {
        AgentView { agent_id: VEHICLE_AGENT_ID, pose: scene.veh_pose, vis: self.veh_vis }
    }

    pub fn inf_view(&self, scene: &Scene) -> AgentView {
        AgentView { agent_id: INFRA_AGENT_ID, pose: scene.inf_pose, vis: self.inf_vis }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut r = Rng::new(a ^ b.rotate_left(32) ^ 0x5851_F42D_4C95_7F2D);
    r.next_u64()
}

/// Per-scene seed of an agent's detector noise, shared by every mode so
/// they see identical detections.
pub fn detector_seed(scene: &Scene, agent_id: u32) -> u64 {
    mix(scene.seed, 0x1000 + agent_id as u64)
}

/// Per-scene seed of the lossy link.
pub fn link_seed(channel: &ChannelConfig, scene: &Scene) -> u64 {
    mix(channel.seed, scene.seed)
}

pub fn detect_both(scene: &Scene, model: &ModelBundle, sim: &SimConfig) -> Result<(Detections, Detections)> {
    let veh = simulate_detections(
        scene,
        &sim.veh_view(scene),
        &sim.veh_noise,
        &model.det_encoder,
        &mut Rng::new(detector_seed(scene, VEHICLE_AGENT_ID)),
        scene.seed,
    )?;
    let inf = simulate_detections(
        scene,
        &sim.inf_view(scene),
        &sim.inf_noise,
        &model.det_encoder,
        &mut Rng::new(detector_seed(scene, INFRA_AGENT_ID)),
        scene.seed,
    )?;
    Ok((veh, inf))
}

pub fn visibility_info(scene: &Scene, sim: &SimConfig) -> VisibilityInfo {
    VisibilityInfo { veh_visible: visible_objects(scene, &sim.veh_view(scene)), inf_visible: visible_objects(scene, &sim.inf_view(scene)) }
}

/// Everything `run_frame` needs besides the scene and model.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub sim: SimConfig,
    pub interaction: InteractionConfig,
    pub channel: ChannelConfig,
    pub requirement: Requirement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub predictions: Vec<Prediction>,
    pub report: TransmissionReport,
}

/// Runs one frame of the requested mode and reports the bytes put on the
/// link.
pub fn run_frame(scene: &Scene, model: &ModelBundle, mode: Mode, cfg: &FrameConfig) -> Result<FrameOutput> {
    let (veh, inf) = detect_both(scene, model, &cfg.sim)?;
    run_frame_with(scene, model, mode, cfg, &veh.batch, &inf.batch)
}

/// `run_frame` on precomputed detections.
pub fn run_frame_with(
    scene: &Scene,
    model: &ModelBundle,
    mode: Mode,
    cfg: &FrameConfig,
    veh: &QueryBatch,
    inf: &QueryBatch,
) -> Result<FrameOutput> {
    let range = &cfg.sim.range;
    let head = &model.decoder_head;
    if mode == Mode::VehicleOnly {
        return Ok(FrameOutput { predictions: decode_batch(veh, head, range)?, report: TransmissionReport::default() });
    }

    // the vehicle's request travels over the wire as well; the infrastructure
    // answers what it decoded
    let request = decode_request(&encode_request(&cfg.requirement, VEHICLE_AGENT_ID, scene.seed))?;
    let selected = select_by_requirement(inf, &request.requirement, &scene.veh_pose);
    let link = ChannelConfig { dropout_ratio: cfg.channel.dropout_ratio, seed: link_seed(&cfg.channel, scene) };

    match mode {
        Mode::Quest | Mode::QuestF => {
            let (survivors, report) = apply_dropout(&selected, &link);
            let bytes = encode_packet(&survivors)?;
            let received = decode_packet(&bytes)?;
            let report = TransmissionReport { bytes_sent: bytes.len(), ..report };
            let icfg = InteractionConfig { complementation: mode == Mode::Quest, ..cfg.interaction };
            let coop = interact(veh, &received, &icfg, model.interaction_nets())?;
            Ok(FrameOutput { predictions: decode_batch(&coop, head, range)?, report })
        }
        Mode::ResultCoop => {
            let mut predictions = decode_batch(veh, head, range)?;
            let to_veh = relative_pose(&scene.veh_pose, &scene.inf_pose);
            let mut boxes = QueryBatch::new(selected.agent_id, selected.frame_id, selected.pose);
            for q in &selected.queries {
                let local = decode_head(q, head, range)?;
                let b = transform_box(&to_veh, &local.bbox)?;
                boxes.queries.push(ObjectQuery {
                    feature: vec![b.center[0], b.center[1], b.center[2], b.dims[0], b.dims[1], b.dims[2], b.yaw],
                    ref_point: b.center,
                    confidence: local.score,
                    class_id: b.class_id,
                    query_id: q.query_id,
                });
            }
            let (survivors, report) = apply_dropout(&boxes, &link);
            let bytes = encode_packet(&survivors)?;
            let received = decode_packet(&bytes)?;
            for r in &received.queries {
                debug_assert_eq!(r.feature.len(), BOX_RECORD_FLOATS);
                let f = &r.feature;
                let bbox = BBox3D::new([f[0], f[1], f[2]], [f[3], f[4], f[5]], f[6], r.class_id)?;
                predictions.push(Prediction { bbox, score: r.confidence });
            }
            let report = TransmissionReport { bytes_sent: bytes.len(), ..report };
            Ok(FrameOutput { predictions: nms(&predictions, NMS_IOU), report })
        }
        Mode::VehicleOnly => unreachable!(),
    }
}

/// Bytes a result-cooperation link needs for `n` boxes.
pub fn box_packet_bytes(n: usize) -> usize {
    crate::channel::packet_bytes(n, BOX_RECORD_FLOATS)
}
