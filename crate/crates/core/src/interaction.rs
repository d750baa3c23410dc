//! Cross-agent query interaction: dual-space embedding, rotation-conditioned
//! alignment, mutual-nearest-neighbour matching, attentive fusion and
//! confidence-based complementation.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_pose, inverse_pose, location_grid, normalize_grid, transform_point, PerceptionRange, Pose};
use crate::nn::DenseNet;
use crate::query::{ObjectQuery, QueryBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct DualSpaceEmbedding {
    pub vector: Vec<f64>,
    pub source_query_id: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(vehicle index, infrastructure index, embedding distance)`
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_inf: Vec<usize>,
    pub unmatched_veh: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConfig {
    pub grid_size: usize,
    pub grid_spacing: f64,
    pub embedding_dim: usize,
    /// Maximum embedding distance for a mutual-nearest pair.
    pub distance_gate: f64,
    /// Maximum number of queries handed to the decoder.
    pub capacity: usize,
    /// When false, unmatched incoming queries are discarded instead of
    /// complementing the local stream (fusion-only variant).
    #[serde(default = "default_true")]
    pub complementation: bool,
    /// Bounds used to normalize grid coordinates.
    #[serde(default)]
    pub grid_range: PerceptionRange,
}

fn default_true() -> bool {
    true
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig {
            grid_size: 3,
            grid_spacing: 1.0,
            embedding_dim: 64,
            distance_gate: 1.0,
            capacity: 300,
            complementation: true,
            grid_range: PerceptionRange::default(),
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_gate > 0.0) {
            return Err(Error::Invalid(format!("distance gate must be positive, got {}", self.distance_gate)));
        }
        if self.capacity == 0 {
            return Err(Error::Invalid("capacity must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        location_grid([0.0; 3], self.grid_size, self.grid_spacing)?;
        self.grid_range.validate()
    }

    /// Length of the normalized grid block, `3·G³`.
    pub fn grid_len(&self) -> usize {
        3 * self.grid_size.pow(3)
    }
}

/// The three learnable interaction networks.
#[derive(Debug, Clone, Copy)]
pub struct InteractionNets<'a> {
    pub embed: &'a DenseNet,
    pub align: &'a DenseNet,
    pub weight: &'a DenseNet,
}

/// Grid block ⊕ semantic block fed to the embedding encoder.
pub fn embedding_input(q: &ObjectQuery, cfg: &InteractionConfig) -> Result<Vec<f64>> {
    let grid = location_grid(q.ref_point, cfg.grid_size, cfg.grid_spacing)?;
    let mut input = normalize_grid(&grid, &cfg.grid_range);
    input.extend_from_slice(&q.feature);
    Ok(input)
}

pub fn embed_query(q: &ObjectQuery, cfg: &InteractionConfig, encoder: &DenseNet) -> Result<DualSpaceEmbedding> {
    let input = embedding_input(q, cfg)?;
    if input.len() != encoder.in_dim() {
        return Err(Error::DimMismatch { expected: encoder.in_dim(), actual: input.len() });
    }
    Ok(DualSpaceEmbedding { vector: encoder.eval(&input)?, source_query_id: q.query_id })
}

/// Relative transform taking the sender's frame into the receiver's.
pub fn relative_pose(receiver_pose: &Pose, sender_pose: &Pose) -> Pose {
    compose_pose(&inverse_pose(receiver_pose), sender_pose)
}

pub fn alignment_input(feature: &[f64], relative: &Pose) -> Vec<f64> {
    let mut input = feature.to_vec();
    input.extend_from_slice(&relative.rotation_row_major());
    input
}

/// Re-expresses an incoming batch in the receiver's frame: features through
/// the rotation-conditioned alignment net, reference points through the rigid
/// transform.
pub fn align_queries(inf: &QueryBatch, veh_pose: &Pose, align_net: &DenseNet) -> Result<QueryBatch> {
    let rel = relative_pose(veh_pose, &inf.pose);
    let queries = inf
        .queries
        .iter()
        .map(|q| {
            let input = alignment_input(&q.feature, &rel);
            if input.len() != align_net.in_dim() {
                return Err(Error::DimMismatch { expected: align_net.in_dim(), actual: input.len() });
            }
            Ok(ObjectQuery {
                feature: align_net.eval(&input)?,
                ref_point: transform_point(&rel, q.ref_point),
                confidence: q.confidence,
                class_id: q.class_id,
                query_id: q.query_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryBatch { agent_id: inf.agent_id, frame_id: inf.frame_id, pose: *veh_pose, queries })
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mutual nearest neighbours on L2 distance, gated by `gate`. Ties in the
/// argmin go to the lower index.
pub fn match_vectors(veh: &[&[f64]], inf: &[&[f64]], gate: f64) -> MatchResult {
    let n = veh.len();
    let m = inf.len();
    if n == 0 || m == 0 {
        return MatchResult { pairs: Vec::new(), unmatched_inf: (0..m).collect(), unmatched_veh: (0..n).collect() };
    }
    let dist: Vec<Vec<f64>> = veh.iter().map(|v| inf.iter().map(|u| l2_distance(v, u)).collect()).collect();
    let argmin = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold((usize::MAX, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best }).0
    };
    let best_inf: Vec<usize> = dist.iter().map(|row| argmin(&mut row.iter().copied().enumerate())).collect();
    let best_veh: Vec<usize> = (0..m).map(|j| argmin(&mut (0..n).map(|i| (i, dist[i][j])))).collect();

    let mut pairs = Vec::new();
    let mut veh_used = vec![false; n];
    let mut inf_used = vec![false; m];
    for i in 0..n {
        let j = best_inf[i];
        if j < m && best_veh[j] == i && dist[i][j] <= gate {
            pairs.push((i, j, dist[i][j]));
            veh_used[i] = true;
            inf_used[j] = true;
        }
    }
    MatchResult {
        pairs,
        unmatched_inf: (0..m).filter(|j| !inf_used[*j]).collect(),
        unmatched_veh: (0..n).filter(|i| !veh_used[*i]).collect(),
    }
}

pub fn match_queries(emb_veh: &[DualSpaceEmbedding], emb_inf: &[DualSpaceEmbedding], gate: f64) -> MatchResult {
    let v: Vec<&[f64]> = emb_veh.iter().map(|e| e.vector.as_slice()).collect();
    let i: Vec<&[f64]> = emb_inf.iter().map(|e| e.vector.as_slice()).collect();
    match_vectors(&v, &i, gate)
}

pub fn fusion_weight(e_v: &DualSpaceEmbedding, e_i: &DualSpaceEmbedding, weight_net: &DenseNet) -> Result<f64> {
    if e_v.vector.len() != e_i.vector.len() {
        return Err(Error::DimMismatch { expected: e_v.vector.len(), actual: e_i.vector.len() });
    }
    if weight_net.in_dim() != 1 || weight_net.out_dim() != 1 {
        return Err(Error::DimMismatch { expected: 1, actual: weight_net.in_dim().max(weight_net.out_dim()) });
    }
    Ok(weight_net.eval(&[l2_distance(&e_v.vector, &e_i.vector)])?[0])
}

/// Weighted summation of an aligned incoming query into a local one; every
/// non-feature field comes from the local query.
pub fn fuse_pair(q_veh: &ObjectQuery, q_inf_aligned: &ObjectQuery, w: f64) -> Result<ObjectQuery> {
    if q_veh.feature.len() != q_inf_aligned.feature.len() {
        return Err(Error::DimMismatch { expected: q_veh.feature.len(), actual: q_inf_aligned.feature.len() });
    }
    let feature = q_veh.feature.iter().zip(&q_inf_aligned.feature).map(|(a, b)| a + w * b).collect();
    Ok(ObjectQuery { feature, ..q_veh.clone() })
}

/// Where each query of a complemented stream comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Local(usize),
    Incoming(usize),
}

fn by_confidence(confidence: &[f64], ids: &[u32], a: usize, b: usize) -> Ordering {
    confidence[a].partial_cmp(&confidence[b]).unwrap_or(Ordering::Equal).then(ids[a].cmp(&ids[b]))
}

/// Index-level complementation plan: the `m = min(|incoming|, |local|)`
/// lowest-confidence local slots are taken over by the `m` most confident
/// incoming queries (most confident incoming into the least confident slot),
/// and leftovers are appended, most confident first, while the stream holds
/// fewer than `capacity` queries.
pub fn complement_plan(
    local_conf: &[f64],
    local_ids: &[u32],
    incoming_conf: &[f64],
    incoming_ids: &[u32],
    capacity: usize,
) -> Vec<Slot> {
    let n = local_conf.len();
    let mut slots: Vec<Slot> = (0..n).map(Slot::Local).collect();
    if incoming_conf.is_empty() {
        return trim_to_capacity(slots, local_conf, local_ids, incoming_conf, incoming_ids, capacity);
    }
    let mut local_order: Vec<usize> = (0..n).collect();
    local_order.sort_by(|a, b| by_confidence(local_conf, local_ids, *a, *b));
    let mut incoming_order: Vec<usize> = (0..incoming_conf.len()).collect();
    incoming_order.sort_by(|a, b| by_confidence(incoming_conf, incoming_ids, *b, *a));

    let m = n.min(incoming_conf.len());
    for k in 0..m {
        slots[local_order[k]] = Slot::Incoming(incoming_order[k]);
    }
    for &j in &incoming_order[m..] {
        if slots.len() >= capacity {
            break;
        }
        slots.push(Slot::Incoming(j));
    }
    trim_to_capacity(slots, local_conf, local_ids, incoming_conf, incoming_ids, capacity)
}

fn trim_to_capacity(
    slots: Vec<Slot>,
    local_conf: &[f64],
    local_ids: &[u32],
    incoming_conf: &[f64],
    incoming_ids: &[u32],
    capacity: usize,
) -> Vec<Slot> {
    if slots.len() <= capacity {
        return slots;
    }
    // local stream was already over capacity: keep the most confident slots
    let key = |s: &Slot| match *s {
        Slot::Local(i) => (local_conf[i], local_ids[i]),
        Slot::Incoming(j) => (incoming_conf[j], incoming_ids[j]),
    };
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by(|a, b| {
        let (ca, ia) = key(&slots[*a]);
        let (cb, ib) = key(&slots[*b]);
        cb.partial_cmp(&ca).unwrap_or(Ordering::Equal).then(ia.cmp(&ib))
    });
    let mut keep = vec![false; slots.len()];
    for &i in order.iter().take(capacity) {
        keep[i] = true;
    }
    slots.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect()
}

/// Ids of inserted queries are kept unless they collide with an id already in
/// the stream, in which case fresh ids past the current maximum are used.
fn assign_ids(queries: &mut [ObjectQuery], slots: &[Slot]) {
    let mut used: HashSet<u32> =
        slots.iter().zip(queries.iter()).filter(|(s, _)| matches!(s, Slot::Local(_))).map(|(_, q)| q.query_id).collect();
    let mut next = queries.iter().map(|q| q.query_id).max().map_or(0, |m| m.saturating_add(1));
    for (s, q) in slots.iter().zip(queries.iter_mut()) {
        if matches!(s, Slot::Incoming(_)) {
            if !used.insert(q.query_id) {
                while used.contains(&next) {
                    next = next.saturating_add(1);
                }
                q.query_id = next;
                used.insert(next);
            }
        }
    }
}

pub fn apply_slots(local: &[ObjectQuery], incoming: &[ObjectQuery], slots: &[Slot]) -> Vec<ObjectQuery> {
    let mut out: Vec<ObjectQuery> = slots
        .iter()
        .map(|s| match *s {
            Slot::Local(i) => local[i].clone(),
            Slot::Incoming(j) => incoming[j].clone(),
        })
        .collect();
    assign_ids(&mut out, slots);
    out
}

/// Replacement-style complementation of the local stream with incoming
/// (already aligned) queries.
pub fn complement(veh: &QueryBatch, incoming: &[ObjectQuery], capacity: usize) -> QueryBatch {
    let lc: Vec<f64> = veh.queries.iter().map(|q| q.confidence).collect();
    let li: Vec<u32> = veh.queries.iter().map(|q| q.query_id).collect();
    let ic: Vec<f64> = incoming.iter().map(|q| q.confidence).collect();
    let ii: Vec<u32> = incoming.iter().map(|q| q.query_id).collect();
    let slots = complement_plan(&lc, &li, &ic, &ii, capacity);
    QueryBatch { agent_id: veh.agent_id, frame_id: veh.frame_id, pose: veh.pose, queries: apply_slots(&veh.queries, incoming, &slots) }
}

/// Intermediate results of one interaction, exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTrace {
    pub aligned: QueryBatch,
    pub matches: MatchResult,
    pub weights: Vec<f64>,
}

pub fn interact(veh: &QueryBatch, inf: &QueryBatch, cfg: &InteractionConfig, nets: InteractionNets<'_>) -> Result<QueryBatch> {
    interact_traced(veh, inf, cfg, nets).map(|(b, _)| b)
}

pub fn interact_traced(
    veh: &QueryBatch,
    inf: &QueryBatch,
    cfg: &InteractionConfig,
    nets: InteractionNets<'_>,
) -> Result<(QueryBatch, InteractionTrace)> {
    let aligned = align_queries(inf, &veh.pose, nets.align)?;
    if aligned.is_empty() {
        let trace = InteractionTrace {
            aligned,
            matches: MatchResult { unmatched_veh: (0..veh.len()).collect(), ..Default::default() },
            weights: Vec::new(),
        };
        return Ok((veh.clone(), trace));
    }
    let emb_veh = veh.queries.iter().map(|q| embed_query(q, cfg, nets.embed)).collect::<Result<Vec<_>>>()?;
    let emb_inf = aligned.queries.iter().map(|q| embed_query(q, cfg, nets.embed)).collect::<Result<Vec<_>>>()?;
    let matches = match_queries(&emb_veh, &emb_inf, cfg.distance_gate);

    let mut fused = veh.clone();
    let mut weights = Vec::with_capacity(matches.pairs.len());
    for &(i, j, _) in &matches.pairs {
        let w = fusion_weight(&emb_veh[i], &emb_inf[j], nets.weight)?;
        fused.queries[i] = fuse_pair(&veh.queries[i], &aligned.queries[j], w)?;
        weights.push(w);
    }
    let out = if cfg.complementation {
        let leftovers: Vec<ObjectQuery> = matches.unmatched_inf.iter().map(|j| aligned.queries[*j].clone()).collect();
        complement(&fused, &leftovers, cfg.capacity)
    } else {
        complement(&fused, &[], cfg.capacity)
    };
    Ok((out, InteractionTrace { aligned, matches, weights }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_net, Activation, ParamVector};

    fn q(id: u32, conf: f64, feature: Vec<f64>, at: [f64; 3]) -> ObjectQuery {
        ObjectQuery { feature, ref_point: at, confidence: conf, class_id: 0, query_id: id }
    }

    fn emb(v: Vec<f64>) -> DualSpaceEmbedding {
        DualSpaceEmbedding { vector: v, source_query_id: 0 }
    }

    #[test]
    fn embedding_is_deterministic_and_zero_encoder_is_zero() {
        let cfg = InteractionConfig::default();
        let enc = init_net(&[81 + 2, 16, 4], &[Activation::Relu, Activation::Identity], 5).unwrap();
        let a = q(0, 0.5, vec![0.3, -0.2], [20.0, 3.0, 0.0]);
        let b = q(9, 0.1, vec![0.3, -0.2], [20.0, 3.0, 0.0]);
        assert_eq!(embed_query(&a, &cfg, &enc).unwrap().vector, embed_query(&b, &cfg, &enc).unwrap().vector);

        let zero = enc.with_params(&ParamVector::zeros(enc.param_count())).unwrap();
        assert_eq!(embed_query(&a, &cfg, &zero).unwrap().vector, vec![0.0; 4]);

        let wrong = init_net(&[10, 4], &[Activation::Identity], 0).unwrap();
        assert!(matches!(embed_query(&a, &cfg, &wrong), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn matching_examples() {
        let r = match_queries(&[emb(vec![1.0, 2.0])], &[emb(vec![1.0, 2.0])], 1.0);
        assert_eq!(r.pairs, vec![(0, 0, 0.0)]);

        let r = match_queries(&[emb(vec![0.0])], &[emb(vec![5.0]), emb(vec![6.0])], 1.0);
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_veh, vec![0]);
        assert_eq!(r.unmatched_inf, vec![0, 1]);
    }

    #[test]
    fn matching_is_mutual() {
        // veh 0 and veh 1 both prefer inf 0; only the closer one gets it
        let v = [emb(vec![0.0]), emb(vec![0.3])];
        let i = [emb(vec![0.4]), emb(vec![3.0])];
        let r = match_queries(&v, &i, 10.0);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!((r.pairs[0].0, r.pairs[0].1), (1, 0));
        assert_eq!(r.unmatched_veh, vec![0]);
        assert_eq!(r.unmatched_inf, vec![1]);
    }

    #[test]
    fn fuse_examples() {
        let v = q(1, 0.8, vec![1.0, 2.0], [1.0, 2.0, 3.0]);
        let i = q(7, 0.2, vec![3.0, 4.0], [9.0, 9.0, 9.0]);
        assert_eq!(fuse_pair(&v, &i, 0.0).unwrap(), v);
        assert_eq!(fuse_pair(&v, &i, 0.5).unwrap().feature, vec![2.5, 4.0]);
        let s = fuse_pair(&v, &i, 1.0).unwrap();
        assert_eq!(s.feature, vec![4.0, 6.0]);
        assert_eq!((s.ref_point, s.confidence, s.query_id), (v.ref_point, v.confidence, v.query_id));
        assert!(fuse_pair(&v, &q(0, 0.1, vec![1.0], [0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn complement_examples() {
        let mut veh = QueryBatch::new(0, 0, Pose::identity());
        veh.queries = [0.9, 0.7, 0.1, 0.05].iter().enumerate().map(|(i, c)| q(i as u32, *c, vec![0.0], [0.0; 3])).collect();
        assert_eq!(complement(&veh, &[], 300), veh);

        let incoming = vec![q(50, 0.6, vec![1.0], [1.0; 3]), q(51, 0.4, vec![2.0], [2.0; 3])];
        let out = complement(&veh, &incoming, 300);
        assert_eq!(out.len(), 4);
        let confs: Vec<f64> = out.queries.iter().map(|q| q.confidence).collect();
        // most confident incoming lands in the least confident slot
        assert_eq!(confs, vec![0.9, 0.7, 0.4, 0.6]);
        assert_eq!(out.queries[3].query_id, 50);

        let many: Vec<ObjectQuery> = (0..10).map(|k| q(100 + k, 0.5, vec![0.0], [0.0; 3])).collect();
        assert_eq!(complement(&veh, &many, 4).len(), 4);
        assert_eq!(complement(&veh, &many, 8).len(), 8);
        assert_eq!(complement(&veh, &many, 300).len(), 10);
    }

    #[test]
    fn complement_renumbers_collisions() {
        let mut veh = QueryBatch::new(0, 0, Pose::identity());
        veh.queries =
            vec![q(0, 0.9, vec![0.0], [0.0; 3]), q(1, 0.1, vec![0.0], [0.0; 3]), q(2, 0.2, vec![0.0], [0.0; 3])];
        let incoming = vec![q(0, 0.5, vec![0.0], [0.0; 3]), q(3, 0.4, vec![0.0], [0.0; 3])];
        let out = complement(&veh, &incoming, 300);
        out.validate().unwrap();
        assert_eq!(out.queries.iter().map(|q| q.query_id).collect::<Vec<_>>(), vec![0, 4, 3]);
    }
}
