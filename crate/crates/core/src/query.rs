//! Object queries, per-agent query batches and the requirement-driven
//! selection that shunts the outgoing stream.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_pose, inverse_pose, transform_point, PerceptionRange, Pose, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectQuery {
    pub feature: Vec<f64>,
    /// Reference point in the owning batch's frame, meters.
    pub ref_point: Vec3,
    pub confidence: f64,
    pub class_id: u16,
    pub query_id: u32,
}

impl ObjectQuery {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.feature.len() != feature_dim {
            return Err(Error::DimMismatch { expected: feature_dim, actual: self.feature.len() });
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Invalid(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if self.feature.iter().chain(&self.ref_point).any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("query {} has non-finite values", self.query_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub agent_id: u32,
    pub frame_id: u64,
    /// Agent frame → world.
    pub pose: Pose,
    pub queries: Vec<ObjectQuery>,
}

impl QueryBatch {
    pub fn new(agent_id: u32, frame_id: u64, pose: Pose) -> Self {
        QueryBatch { agent_id, frame_id, pose, queries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Feature dimension shared by the queries, if any.
    pub fn feature_dim(&self) -> Option<usize> {
        self.queries.first().map(|q| q.feature.len())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.queries.len());
        let dim = self.feature_dim().unwrap_or(0);
        for q in &self.queries {
            q.validate(dim)?;
            if !seen.insert(q.query_id) {
                return Err(Error::Invalid(format!("duplicate query id {}", q.query_id)));
            }
        }
        Ok(())
    }

    fn with_queries(&self, queries: Vec<ObjectQuery>) -> QueryBatch {
        QueryBatch { agent_id: self.agent_id, frame_id: self.frame_id, pose: self.pose, queries }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub min_confidence: f64,
    /// Region of interest in the requester's frame.
    #[serde(default)]
    pub region_mask: Option<PerceptionRange>,
}

impl Default for Requirement {
    fn default() -> Self {
        Requirement { min_confidence: 0.0, region_mask: None }
    }
}

impl Requirement {
    pub fn threshold(min_confidence: f64) -> Self {
        Requirement { min_confidence, region_mask: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Invalid(format!("min_confidence {} outside [0, 1]", self.min_confidence)));
        }
        if let Some(m) = &self.region_mask {
            m.validate()?;
        }
        Ok(())
    }
}

/// Keeps the queries meeting the requester's confidence threshold and, when a
/// mask is present, whose reference point falls inside it once expressed in
/// the requester's frame. Order is preserved.
pub fn select_by_requirement(batch: &QueryBatch, req: &Requirement, requester_pose: &Pose) -> QueryBatch {
    let to_requester = compose_pose(&inverse_pose(requester_pose), &batch.pose);
    let kept = batch
        .queries
        .iter()
        .filter(|q| q.confidence >= req.min_confidence)
        .filter(|q| match &req.region_mask {
            None => true,
            Some(mask) => {
                let p = transform_point(&to_requester, q.ref_point);
                mask.contains_xy(p) && p[2] >= mask.z_min && p[2] <= mask.z_max
            }
        })
        .cloned()
        .collect();
    batch.with_queries(kept)
}

/// Stable confidence sort; equal confidences fall back to ascending query id.
pub fn sort_by_confidence(batch: &QueryBatch, ascending: bool) -> QueryBatch {
    let mut queries = batch.queries.clone();
    queries.sort_by(|a, b| {
        let by_conf = a.confidence.partial_cmp(&b.confidence).unwrap_or(Ordering::Equal);
        let by_conf = if ascending { by_conf } else { by_conf.reverse() };
        by_conf.then(a.query_id.cmp(&b.query_id))
    });
    batch.with_queries(queries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: u32, conf: f64, at: Vec3) -> ObjectQuery {
        ObjectQuery { feature: vec![id as f64, 1.0], ref_point: at, confidence: conf, class_id: 0, query_id: id }
    }

    fn batch(confs: &[f64]) -> QueryBatch {
        let mut b = QueryBatch::new(1, 7, Pose::identity());
        b.queries = confs.iter().enumerate().map(|(i, c)| q(i as u32, *c, [i as f64, 0.0, 0.0])).collect();
        b
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let b = batch(&[0.9, 0.0, 0.4]);
        assert_eq!(select_by_requirement(&b, &Requirement::default(), &Pose::identity()), b);
    }

    #[test]
    fn threshold_filters_in_order() {
        let b = batch(&[0.9, 0.5, 0.2]);
        let s = select_by_requirement(&b, &Requirement::threshold(0.3), &Pose::identity());
        assert_eq!(s.queries.iter().map(|q| q.query_id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn threshold_chain_is_nested() {
        let confs: Vec<f64> = (0..40).map(|i| ((i * 37) % 40) as f64 / 40.0).collect();
        let b = batch(&confs);
        let mut prev: Option<HashSet<u32>> = None;
        for t in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8] {
            let ids: HashSet<u32> = select_by_requirement(&b, &Requirement::threshold(t), &Pose::identity())
                .queries
                .iter()
                .map(|q| q.query_id)
                .collect();
            if let Some(p) = &prev {
                assert!(ids.is_subset(p));
                assert!(ids.len() < p.len());
            }
            prev = Some(ids);
        }
    }

    #[test]
    fn region_mask_uses_requester_frame() {
        // sender sits 40 m ahead, facing back toward the requester
        let sender = Pose::from_yaw(std::f64::consts::PI, [40.0, 0.0, 0.0]);
        let mut b = QueryBatch::new(2, 0, sender);
        b.queries = vec![q(0, 0.9, [10.0, 0.0, 0.0]), q(1, 0.9, [-10.0, 0.0, 0.0])];
        let mask = PerceptionRange { x_min: 0.0, y_min: -5.0, x_max: 45.0, y_max: 5.0, z_min: -3.0, z_max: 5.0 };
        let req = Requirement { min_confidence: 0.0, region_mask: Some(mask) };
        let s = select_by_requirement(&b, &req, &Pose::identity());
        // query 0 is at x = 30 for the requester, query 1 at x = 50
        assert_eq!(s.queries.iter().map(|q| q.query_id).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn sort_cases() {
        let b = batch(&[0.2, 0.9, 0.5]);
        let s = sort_by_confidence(&b, true);
        assert_eq!(s.queries.iter().map(|q| q.confidence).collect::<Vec<_>>(), vec![0.2, 0.5, 0.9]);
        assert_eq!(sort_by_confidence(&s, true), s);

        let ties = batch(&[0.5, 0.5, 0.5]);
        assert_eq!(sort_by_confidence(&ties, true), ties);
        assert_eq!(sort_by_confidence(&ties, false), ties);
    }

    #[test]
    fn validate_rejects_duplicates() {
        let mut b = batch(&[0.5, 0.6]);
        b.queries[1].query_id = 0;
        assert!(b.validate().is_err());
        let mut b = batch(&[0.5]);
        b.queries[0].confidence = 1.5;
        assert!(b.validate().is_err());
    }
}
