//! Training: the per-scene loss with gradients flowing through decoder,
//! complementation, fusion, matching embeddings, alignment and the detector
//! encoder, and the SGD loop on top of it.

use serde::{Deserialize, Serialize};

use super::{detect_both, head_input, Mode, ModelBundle, SimConfig, HEAD_OUTPUTS, LOG_DIM_CLAMP};
use crate::error::{Error, Result};
use crate::geometry::{inverse_pose, transform_box, transform_point, BBox3D, PerceptionRange, Vec3};
use crate::interaction::{complement_plan, embedding_input, match_vectors, relative_pose, InteractionConfig, Slot};
use crate::nn::{sgd_step, sigmoid, ParamVector, Rng, Tape};
use crate::query::ObjectQuery;
use crate::scenario::{generate_scene, Detections, Scene};

const DET: usize = 0;
const EMB: usize = 1;
const ALN: usize = 2;
const WGT: usize = 3;
const HEAD: usize = 4;

pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Fresh scenes drawn per epoch.
    pub scenes_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: Mode,
    pub freeze_detectors: bool,
    /// Weight of the contrastive term on matching embeddings; 0 disables it.
    pub embed_loss_weight: f64,
    /// Non-matching pairs are pushed at least this far apart, in units of
    /// the distance gate.
    pub embed_margin: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Infrastructure queries below this confidence are not used in training.
    pub train_min_confidence: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            scenes_per_epoch: 100,
            lr: 0.03,
            seed: 0,
            mode: Mode::Quest,
            freeze_detectors: false,
            embed_loss_weight: 1.0,
            embed_margin: 2.0,
            grad_clip: 5.0,
            train_min_confidence: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.scenes_per_epoch == 0 {
            return Err(Error::Invalid("scenes_per_epoch must be at least 1".into()));
        }
        if self.embed_loss_weight < 0.0 || self.embed_margin < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Invalid("loss weights, margin and clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub box_loss: f64,
    pub score_loss: f64,
    pub embed_loss: f64,
    /// Queries seen by the decoder.
    pub decoded: usize,
    /// Cross-agent pairs formed by matching.
    pub matched: usize,
    /// Decoded queries carrying a fused pair.
    pub fused: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    /// Mean scene loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Where a decoded query's feature came from.
#[derive(Debug, Clone, Copy)]
enum Route {
    /// Vehicle query, optionally fused with aligned incoming query `pair.0`.
    Veh { k: usize, pair: Option<usize> },
    /// Aligned incoming query inserted by complementation.
    Aligned(usize),
    /// Raw infrastructure query decoded in its own frame.
    InfRaw(usize),
}

struct Fused {
    j: usize,
    w: f64,
    dist: f64,
    tape: Tape,
}

/// Loss terms for one decoded query and their gradient with respect to the
/// raw head outputs.
fn head_loss(raw: &[f64], ref_point: Vec3, target: Option<&BBox3D>, box_scale: f64, score_scale: f64) -> (f64, f64, Vec<f64>) {
    let mut g = vec![0.0; HEAD_OUTPUTS];
    let mut box_loss = 0.0;
    if let Some(t) = target {
        for a in 0..3 {
            let diff = ref_point[a] + raw[a] - t.center[a];
            box_loss += diff.abs();
            g[a] = diff.signum() * box_scale;
        }
        for a in 0..3 {
            let ld = raw[3 + a];
            let dim = ld.clamp(-LOG_DIM_CLAMP, LOG_DIM_CLAMP).exp();
            let diff = dim - t.dims[a];
            box_loss += diff.abs();
            if ld.abs() < LOG_DIM_CLAMP {
                g[3 + a] = diff.signum() * dim * box_scale;
            }
        }
        let (s, c) = (raw[6], raw[7]);
        let delta = s.atan2(c) - t.yaw;
        box_loss += 1.0 - delta.cos();
        let r2 = s * s + c * c;
        if r2 > 1e-12 {
            let dyaw = delta.sin() * box_scale;
            g[6] = dyaw * c / r2;
            g[7] = -dyaw * s / r2;
        }
    }
    let z = raw[8];
    let y = if target.is_some() { 1.0 } else { 0.0 };
    let bce = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    g[8] = (sigmoid(z) - y) * score_scale;
    (box_loss * box_scale, bce * score_scale, g)
}

fn add_into(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += scale * b;
    }
}

fn frame_targets(scene: &Scene, det: &Detections, frame_of: &crate::geometry::Pose) -> Result<Vec<Option<BBox3D>>> {
    let to_frame = inverse_pose(frame_of);
    det.sources
        .iter()
        .map(|s| match s {
            Some(id) => {
                let obj = scene.object(*id).ok_or_else(|| Error::Invalid(format!("detection of unknown object {id}")))?;
                transform_box(&to_frame, &obj.bbox).map(Some)
            }
            None => Ok(None),
        })
        .collect()
}

/// Loss of one scene under `mode`, and when `want_grads` is set the
/// gradient with respect to every bundle parameter (flattened in bundle
/// order).
#[allow(clippy::too_many_arguments)]
pub fn scene_loss(
    model: &ModelBundle,
    mode: Mode,
    scene: &Scene,
    veh: &Detections,
    inf: &Detections,
    icfg: &InteractionConfig,
    tcfg: &TrainConfig,
    range: &PerceptionRange,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<ParamVector>)> {
    let d = model.feature_dim();
    let nets = model.nets();
    let mut grads: Vec<Vec<f64>> = nets.iter().map(|n| vec![0.0; n.param_count()]).collect();

    // detector features with tapes
    let forward_all = |det: &Detections, keep: &[usize]| -> Result<Vec<(Vec<f64>, Tape)>> {
        keep.iter().map(|i| model.det_encoder.forward(&det.descriptors[*i])).collect()
    };
    let veh_idx: Vec<usize> = (0..veh.batch.len()).collect();
    let veh_f = forward_all(veh, &veh_idx)?;
    let veh_targets = frame_targets(scene, veh, &veh.batch.pose)?;

    let inf_idx: Vec<usize> = if mode == Mode::VehicleOnly {
        Vec::new()
    } else {
        (0..inf.batch.len()).filter(|i| inf.batch.queries[*i].confidence >= tcfg.train_min_confidence).collect()
    };
    let inf_f = forward_all(inf, &inf_idx)?;

    // decoded stream: (feature, ref point, target, route)
    let mut stream: Vec<(Vec<f64>, Vec3, Option<BBox3D>, Route)> = Vec::new();
    let mut aligned: Vec<(Vec<f64>, Tape, Vec3)> = Vec::new();
    let mut emb_veh: Vec<(Vec<f64>, Tape)> = Vec::new();
    let mut emb_inf: Vec<(Vec<f64>, Tape)> = Vec::new();
    let mut fused: Vec<Option<Fused>> = Vec::new();
    let mut inf_targets_veh: Vec<Option<BBox3D>> = Vec::new();
    let mut matched = 0;

    match mode {
        Mode::VehicleOnly => {
            for (k, (f, _)) in veh_f.iter().enumerate() {
                stream.push((f.clone(), veh.batch.queries[k].ref_point, veh_targets[k], Route::Veh { k, pair: None }));
            }
        }
        Mode::ResultCoop => {
            for (k, (f, _)) in veh_f.iter().enumerate() {
                stream.push((f.clone(), veh.batch.queries[k].ref_point, veh_targets[k], Route::Veh { k, pair: None }));
            }
            let inf_targets = frame_targets(scene, inf, &inf.batch.pose)?;
            for (j, &i) in inf_idx.iter().enumerate() {
                stream.push((inf_f[j].0.clone(), inf.batch.queries[i].ref_point, inf_targets[i], Route::InfRaw(j)));
            }
        }
        Mode::Quest | Mode::QuestF => {
            let rel = relative_pose(&veh.batch.pose, &inf.batch.pose);
            let rot = rel.rotation_row_major();
            let all_inf_targets = frame_targets(scene, inf, &veh.batch.pose)?;
            for (j, &i) in inf_idx.iter().enumerate() {
                let mut input = inf_f[j].0.clone();
                input.extend_from_slice(&rot);
                let (a, tape) = model.align_net.forward(&input)?;
                aligned.push((a, tape, transform_point(&rel, inf.batch.queries[i].ref_point)));
                inf_targets_veh.push(all_inf_targets[i]);
            }
            let embed = |feature: &[f64], at: Vec3| -> Result<(Vec<f64>, Tape)> {
                let q = ObjectQuery { feature: feature.to_vec(), ref_point: at, confidence: 0.0, class_id: 0, query_id: 0 };
                model.embed_encoder.forward(&embedding_input(&q, icfg)?)
            };
            if !aligned.is_empty() {
                for (k, (f, _)) in veh_f.iter().enumerate() {
                    emb_veh.push(embed(f, veh.batch.queries[k].ref_point)?);
                }
                for (a, _, at) in &aligned {
                    emb_inf.push(embed(a, *at)?);
                }
            }
            let ev: Vec<&[f64]> = emb_veh.iter().map(|e| e.0.as_slice()).collect();
            let ei: Vec<&[f64]> = emb_inf.iter().map(|e| e.0.as_slice()).collect();
            let m = match_vectors(&ev, &ei, icfg.distance_gate);
            matched = m.pairs.len();

            fused = (0..veh_f.len()).map(|_| None).collect();
            for &(k, j, dist) in &m.pairs {
                let (w, tape) = model.weight_net.forward(&[dist])?;
                fused[k] = Some(Fused { j, w: w[0], dist, tape });
            }
            let local_conf: Vec<f64> = veh.batch.queries.iter().map(|q| q.confidence).collect();
            let local_ids: Vec<u32> = veh.batch.queries.iter().map(|q| q.query_id).collect();
            let leftovers: Vec<usize> = if mode == Mode::Quest { m.unmatched_inf.clone() } else { Vec::new() };
            let inc_conf: Vec<f64> = leftovers.iter().map(|j| inf.batch.queries[inf_idx[*j]].confidence).collect();
            let inc_ids: Vec<u32> = leftovers.iter().map(|j| inf.batch.queries[inf_idx[*j]].query_id).collect();
            for slot in complement_plan(&local_conf, &local_ids, &inc_conf, &inc_ids, icfg.capacity) {
                match slot {
                    Slot::Local(k) => {
                        let mut f = veh_f[k].0.clone();
                        let pair = fused[k].as_ref().map(|p| {
                            add_into(&mut f, &aligned[p.j].0, p.w);
                            p.j
                        });
                        stream.push((f, veh.batch.queries[k].ref_point, veh_targets[k], Route::Veh { k, pair }));
                    }
                    Slot::Incoming(u) => {
                        let j = leftovers[u];
                        stream.push((aligned[j].0.clone(), aligned[j].2, inf_targets_veh[j], Route::Aligned(j)));
                    }
                }
            }
        }
    }

    if stream.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_real = stream.iter().filter(|s| s.2.is_some()).count();
    let box_scale = if n_real > 0 { 1.0 / n_real as f64 } else { 0.0 };
    let score_scale = 1.0 / stream.len() as f64;

    let fused_decoded = stream.iter().filter(|s| matches!(s.3, Route::Veh { pair: Some(_), .. })).count();
    let mut out = LossBreakdown { decoded: stream.len(), matched, fused: fused_decoded, ..Default::default() };
    let mut d_feat: Vec<Vec<f64>> = Vec::with_capacity(stream.len());
    for (feature, at, target, _) in &stream {
        let q = ObjectQuery { feature: feature.clone(), ref_point: *at, confidence: 0.0, class_id: 0, query_id: 0 };
        let (raw, tape) = model.decoder_head.forward(&head_input(&q, range))?;
        let (bl, sl, g) = head_loss(&raw, *at, target.as_ref(), box_scale, score_scale);
        out.box_loss += bl;
        out.score_loss += sl;
        if want_grads {
            let dx = model.decoder_head.backward_accumulate(&tape, &g, &mut grads[HEAD])?;
            d_feat.push(dx[..d].to_vec());
        }
    }

    // contrastive term on matching embeddings
    let mut d_emb_veh = vec![vec![0.0; icfg.embedding_dim]; emb_veh.len()];
    let mut d_emb_inf = vec![vec![0.0; icfg.embedding_dim]; emb_inf.len()];
    if tcfg.embed_loss_weight > 0.0 && !emb_veh.is_empty() && !emb_inf.is_empty() {
        let margin = tcfg.embed_margin * icfg.distance_gate;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for k in 0..emb_veh.len() {
            for j in 0..emb_inf.len() {
                let same = veh.sources[k].is_some() && veh.sources[k] == inf.sources[inf_idx[j]];
                if same {
                    pos.push((k, j));
                } else {
                    neg.push((k, j));
                }
            }
        }
        let mut term = |pairs: &[(usize, usize)], positive: bool| {
            let dist = |k: usize, j: usize| {
                emb_veh[k].0.iter().zip(&emb_inf[j].0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            };
            // negatives are averaged over the pairs inside the margin only, so
            // the few confusable pairs are not drowned out by easy ones
            let active: Vec<(usize, usize, f64)> = pairs
                .iter()
                .map(|&(k, j)| (k, j, dist(k, j)))
                .filter(|(_, _, d)| positive || *d < margin)
                .collect();
            if active.is_empty() {
                return 0.0;
            }
            let scale = tcfg.embed_loss_weight / active.len() as f64;
            let mut sum = 0.0;
            for (k, j, d) in active {
                let diff: Vec<f64> = emb_veh[k].0.iter().zip(&emb_inf[j].0).map(|(a, b)| a - b).collect();
                // gradient of the term with respect to e_veh; e_inf gets the negative
                let coef = if positive {
                    sum += d * d;
                    2.0
                } else {
                    sum += (margin - d).powi(2);
                    if d > 1e-12 {
                        -2.0 * (margin - d) / d
                    } else {
                        0.0
                    }
                };
                if want_grads && coef != 0.0 {
                    add_into(&mut d_emb_veh[k], &diff, coef * scale);
                    add_into(&mut d_emb_inf[j], &diff, -coef * scale);
                }
            }
            sum * scale
        };
        out.embed_loss = term(&pos, true) + term(&neg, false);
    }
    out.total = out.box_loss + out.score_loss + out.embed_loss;
    if !want_grads {
        return Ok((out, None));
    }

    // back through interaction
    let mut d_veh_f = vec![vec![0.0; d]; veh_f.len()];
    let mut d_aligned = vec![vec![0.0; d]; aligned.len()];
    let mut d_inf_f = vec![vec![0.0; d]; inf_f.len()];
    for ((_, _, _, route), g) in stream.iter().zip(&d_feat) {
        match *route {
            Route::Veh { k, pair } => {
                add_into(&mut d_veh_f[k], g, 1.0);
                if let Some(j) = pair {
                    let p = fused[k].as_ref().expect("pair recorded");
                    add_into(&mut d_aligned[j], g, p.w);
                    let dw: f64 = g.iter().zip(&aligned[j].0).map(|(a, b)| a * b).sum();
                    let dd = model.weight_net.backward_accumulate(&p.tape, &[dw], &mut grads[WGT])?[0];
                    if p.dist > 1e-12 {
                        let unit: Vec<f64> = emb_veh[k].0.iter().zip(&emb_inf[j].0).map(|(a, b)| (a - b) / p.dist).collect();
                        add_into(&mut d_emb_veh[k], &unit, dd);
                        add_into(&mut d_emb_inf[j], &unit, -dd);
                    }
                }
            }
            Route::Aligned(j) => add_into(&mut d_aligned[j], g, 1.0),
            Route::InfRaw(j) => add_into(&mut d_inf_f[j], g, 1.0),
        }
    }
    let grid = icfg.grid_len();
    for (k, de) in d_emb_veh.iter().enumerate() {
        if de.iter().any(|v| *v != 0.0) {
            let dx = model.embed_encoder.backward_accumulate(&emb_veh[k].1, de, &mut grads[EMB])?;
            add_into(&mut d_veh_f[k], &dx[grid..], 1.0);
        }
    }
    for (j, de) in d_emb_inf.iter().enumerate() {
        if de.iter().any(|v| *v != 0.0) {
            let dx = model.embed_encoder.backward_accumulate(&emb_inf[j].1, de, &mut grads[EMB])?;
            add_into(&mut d_aligned[j], &dx[grid..], 1.0);
        }
    }
    for (j, da) in d_aligned.iter().enumerate() {
        let dx = model.align_net.backward_accumulate(&aligned[j].1, da, &mut grads[ALN])?;
        add_into(&mut d_inf_f[j], &dx[..d], 1.0);
    }
    for (k, df) in d_veh_f.iter().enumerate() {
        model.det_encoder.backward_accumulate(&veh_f[k].1, df, &mut grads[DET])?;
    }
    for (j, df) in d_inf_f.iter().enumerate() {
        model.det_encoder.backward_accumulate(&inf_f[j].1, df, &mut grads[DET])?;
    }
    Ok((out, Some(ParamVector(grads.concat()))))
}

/// Seeds of the fresh training scenes drawn for `epoch`.
pub fn train_scene_seeds(tcfg: &TrainConfig, epoch: usize) -> Vec<u64> {
    let mut rng = Rng::new(tcfg.seed ^ 0x7472_6169_6E00_0000).fork(epoch as u64);
    (0..tcfg.scenes_per_epoch).map(|_| rng.next_u64()).collect()
}

/// Trains `init` with one SGD step per scene.
pub fn train(init: ModelBundle, sim: &SimConfig, icfg: &InteractionConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    tcfg.validate()?;
    icfg.validate()?;
    sim.validate()?;
    init.validate(icfg)?;
    let det_params = init.det_encoder.param_count();
    let mut model = init;
    let mut loss_trace = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut sum = 0.0;
        for seed in train_scene_seeds(tcfg, epoch) {
            let scene = &generate_scene(&sim.scene, seed)?;
            let (veh, inf) = detect_both(scene, &model, sim)?;
            let (loss, grads) = scene_loss(&model, tcfg.mode, scene, &veh, &inf, icfg, tcfg, &sim.range, true)?;
            let mut grads = grads.expect("gradients requested");
            if !loss.total.is_finite() || grads.0.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss { epoch, value: loss.total });
            }
            if tcfg.freeze_detectors {
                grads.0[..det_params].iter_mut().for_each(|g| *g = 0.0);
            }
            if tcfg.grad_clip > 0.0 {
                let norm = grads.0.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > tcfg.grad_clip {
                    let s = tcfg.grad_clip / norm;
                    grads.0.iter_mut().for_each(|g| *g *= s);
                }
            }
            let next = sgd_step(&model.params(), &grads, tcfg.lr)?;
            model.set_params(&next)?;
            sum += loss.total;
        }
        let mean = sum / tcfg.scenes_per_epoch as f64;
        if !mean.is_finite() {
            return Err(Error::DivergedLoss { epoch, value: mean });
        }
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { model, loss_trace })
}

/// Largest relative disagreement between central differences and the
/// backpropagated bundle gradient of one scene's loss. Detections are held
/// fixed while parameters are perturbed. Denominators are floored at
/// `GRAD_CHECK_FLOOR` so parameters with (near) zero gradient compare by
/// absolute error instead of amplifying round-off.
#[allow(clippy::too_many_arguments)]
pub fn bundle_grad_check(
    model: &ModelBundle,
    mode: Mode,
    scene: &Scene,
    sim: &SimConfig,
    icfg: &InteractionConfig,
    tcfg: &TrainConfig,
    h: f64,
) -> Result<f64> {
    let (veh, inf) = detect_both(scene, model, sim)?;
    let (_, bp) = scene_loss(model, mode, scene, &veh, &inf, icfg, tcfg, &sim.range, true)?;
    let bp = bp.expect("gradients requested");
    let base = model.params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p.0[i] = base.0[i] + h;
        probe.set_params(&p)?;
        let up = scene_loss(&probe, mode, scene, &veh, &inf, icfg, tcfg, &sim.range, false)?.0.total;
        p.0[i] = base.0[i] - h;
        probe.set_params(&p)?;
        let down = scene_loss(&probe, mode, scene, &veh, &inf, icfg, tcfg, &sim.range, false)?.0.total;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - bp.0[i]).abs() / (fd.abs() + bp.0[i].abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
