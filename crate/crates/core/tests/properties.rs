use std::collections::BTreeSet;

use proptest::prelude::*;
use quest_core::channel::{apply_dropout, decode_packet, encode_packet, packet_bytes, ChannelConfig};
use quest_core::evaluation::{average_precision, evaluate, match_predictions, Prediction, VisibilityInfo};
use quest_core::geometry::{
    bev_iou, compose_pose, inverse_pose, location_grid, normalize_grid, transform_box, transform_point, BBox3D,
    PerceptionRange, Pose,
};
use quest_core::interaction::{fuse_pair, interact, InteractionConfig};
use quest_core::nn::{init_net, sgd_step, Activation, ParamVector};
use quest_core::pipeline::{ModelBundle, ModelConfig};
use quest_core::query::{select_by_requirement, sort_by_confidence, ObjectQuery, QueryBatch, Requirement};
use quest_core::scenario::{generate_scene, SceneConfig};

fn pose() -> impl Strategy<Value = Pose> {
    (-3.2f64..3.2, -500.0f64..500.0, -500.0f64..500.0, -10.0f64..10.0).prop_map(|(y, a, b, c)| Pose::from_yaw(y, [a, b, c]))
}

fn bbox() -> impl Strategy<Value = BBox3D> {
    (-5.0f64..5.0, -5.0f64..5.0, 0.3f64..6.0, 0.3f64..3.0, -3.2f64..3.2)
        .prop_map(|(x, y, l, w, yaw)| BBox3D::new([x, y, 0.5], [l, w, 1.5], yaw, 0).unwrap())
}

fn query(dim: usize) -> impl Strategy<Value = ObjectQuery> {
    (prop::collection::vec(-1e3f64..1e3, dim), prop::array::uniform3(-200.0f64..200.0), 0.0f64..=1.0, 0u16..4)
        .prop_map(|(feature, ref_point, confidence, class_id)| ObjectQuery { feature, ref_point, confidence, class_id, query_id: 0 })
}

fn batch(max_n: usize, dim: usize) -> impl Strategy<Value = QueryBatch> {
    (prop::collection::vec(query(dim), 0..max_n), pose(), any::<u32>(), any::<u64>()).prop_map(|(mut qs, pose, agent, frame)| {
        for (i, q) in qs.iter_mut().enumerate() {
            q.query_id = i as u32;
        }
        QueryBatch { agent_id: agent, frame_id: frame, pose, queries: qs }
    })
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

proptest! {
    #[test]
    fn pose_round_trip(p in pose(), q in pose(), x in prop::array::uniform3(-300.0f64..300.0)) {
        let back = transform_point(&inverse_pose(&p), transform_point(&p, x));
        let pq = compose_pose(&p, &q);
        let back2 = transform_point(&inverse_pose(&pq), transform_point(&pq, x));
        for k in 0..3 {
            prop_assert!((back[k] - x[k]).abs() < 1e-9);
            prop_assert!((back2[k] - x[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_symmetric_bounded_and_reflexive(a in bbox(), b in bbox()) {
        let ab = bev_iou(&a, &b);
        prop_assert!((ab - bev_iou(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_invariant_under_shared_pose(a in bbox(), b in bbox(), p in pose()) {
        let ta = transform_box(&p, &a).unwrap();
        let tb = transform_box(&p, &b).unwrap();
        prop_assert!((bev_iou(&ta, &tb) - bev_iou(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn grid_shift_is_exact(c in prop::array::uniform3(-100.0f64..100.0), d in prop::array::uniform3(-8.0f64..8.0), g in prop::sample::select(vec![1usize, 3, 5])) {
        // integer-valued shifts and centers keep every sum exact
        let c = c.map(f64::round);
        let d = d.map(f64::round);
        let base = location_grid(c, g, 1.0).unwrap();
        let moved = location_grid([c[0] + d[0], c[1] + d[1], c[2] + d[2]], g, 1.0).unwrap();
        for (p, q) in base.points.iter().zip(&moved.points) {
            for k in 0..3 {
                prop_assert_eq!(q[k], p[k] + d[k]);
            }
        }
    }

    #[test]
    fn normalized_grid_moves_by_delta_over_span(c in prop::array::uniform3(-30.0f64..30.0), delta in -1.0f64..1.0, axis in 0usize..2) {
        let range = PerceptionRange::default();
        let c = [c[0] + 50.0, c[1], c[2].clamp(-1.0, 1.0)];
        let g0 = normalize_grid(&location_grid(c, 3, 1.0).unwrap(), &range);
        prop_assert_eq!(&g0, &normalize_grid(&location_grid(c, 3, 1.0).unwrap(), &range));
        let mut moved = c;
        moved[axis] += delta;
        let g1 = normalize_grid(&location_grid(moved, 3, 1.0).unwrap(), &range);
        let span = range.spans()[axis];
        for (i, (a, b)) in g0.iter().zip(&g1).enumerate() {
            let expected = if i % 3 == axis { delta / span } else { 0.0 };
            prop_assert!((b - a - expected).abs() < 1e-12, "component {} moved {} not {}", i, b - a, expected);
        }
    }

    #[test]
    fn selection_monotone_and_idempotent(b in batch(40, 3), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let id = Pose::identity();
        let s_lo = select_by_requirement(&b, &Requirement::threshold(lo), &id);
        let s_hi = select_by_requirement(&b, &Requirement::threshold(hi), &id);
        let ids = |s: &QueryBatch| s.queries.iter().map(|q| q.query_id).collect::<BTreeSet<_>>();
        prop_assert!(ids(&s_hi).is_subset(&ids(&s_lo)));
        prop_assert!(s_hi.len() <= s_lo.len());
        prop_assert_eq!(select_by_requirement(&s_lo, &Requirement::threshold(lo), &id), s_lo.clone());
        // bytes law: fewer queries, never more bytes
        prop_assert!(packet_bytes(s_hi.len(), 3) <= packet_bytes(s_lo.len(), 3));
    }

    #[test]
    fn sort_is_a_permutation(b in batch(40, 2), asc in any::<bool>()) {
        let s = sort_by_confidence(&b, asc);
        let key = |q: &ObjectQuery| (q.query_id, q.confidence.to_bits());
        let mut x: Vec<_> = b.queries.iter().map(key).collect();
        let mut y: Vec<_> = s.queries.iter().map(key).collect();
        x.sort();
        y.sort();
        prop_assert_eq!(x, y);
        let ordered = s.queries.windows(2).all(|w| if asc { w[0].confidence <= w[1].confidence } else { w[0].confidence >= w[1].confidence });
        prop_assert!(ordered);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trip(b in batch(12, 6)) {
        let bytes = encode_packet(&b).unwrap();
        prop_assert_eq!(bytes.len(), packet_bytes(b.len(), b.feature_dim().unwrap_or(0)));
        let d = decode_packet(&bytes).unwrap();
        prop_assert_eq!(d.agent_id, b.agent_id);
        prop_assert_eq!(d.frame_id, b.frame_id);
        prop_assert_eq!(d.len(), b.len());
        for (x, y) in d.queries.iter().zip(&b.queries) {
            prop_assert_eq!(x.class_id, y.class_id);
            prop_assert_eq!(x.confidence, q32(y.confidence));
            prop_assert_eq!(x.ref_point.map(q32), x.ref_point);
            prop_assert_eq!(x.ref_point, y.ref_point.map(q32));
            prop_assert_eq!(x.feature.clone(), y.feature.iter().map(|v| q32(*v)).collect::<Vec<_>>());
        }
    }
}

proptest! {
    #[test]
    fn dropout_keeps_a_deterministic_subsequence(b in batch(60, 2), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let cfg = ChannelConfig { dropout_ratio: p, seed };
        let (kept, report) = apply_dropout(&b, &cfg);
        prop_assert_eq!(apply_dropout(&b, &cfg), (kept.clone(), report));
        let mut it = b.queries.iter();
        for q in &kept.queries {
            prop_assert!(it.any(|x| x == q), "survivors out of order");
        }
        prop_assert_eq!(report.queries_sent + report.queries_dropped, b.len());
        prop_assert_eq!(report.bytes_sent, packet_bytes(kept.len(), b.feature_dim().unwrap_or(0)));
    }

    #[test]
    fn fusion_at_zero_weight_is_identity(q in query(5), a in query(5)) {
        prop_assert_eq!(fuse_pair(&q, &a, 0.0).unwrap(), q);
    }

    #[test]
    fn interact_bounds_and_empty_identity(seed in any::<u64>(), nv in 0usize..25, ni in 0usize..25, capacity in 1usize..40) {
        let mcfg = ModelConfig { feature_dim: 4, det_hidden: 8, embed_hidden: 8, align_hidden: 8, weight_hidden: 4, head_hidden: 8 };
        let icfg = InteractionConfig { embedding_dim: 4, capacity, distance_gate: 3.0, ..Default::default() };
        let model = ModelBundle::init(&mcfg, &icfg, seed).unwrap();
        let mk = |n: usize, agent: u32, pose: Pose, salt: u64| {
            let mut b = QueryBatch::new(agent, 1, pose);
            b.queries = (0..n).map(|i| {
                let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
                let f = |k: u64| ((h >> (k * 8)) & 0xFF) as f64 / 25.5 - 5.0;
                ObjectQuery { feature: (0..4).map(f).collect(), ref_point: [f(4) * 8.0 + 40.0, f(5) * 6.0, 0.0], confidence: f(6) / 10.0 + 0.5, class_id: 0, query_id: i as u32 }
            }).collect();
            b
        };
        let veh = mk(nv, 0, Pose::identity(), seed);
        let inf = mk(ni, 1, Pose::from_yaw(std::f64::consts::PI, [40.0, 0.0, 6.0]), seed.rotate_left(17));
        let out = interact(&veh, &inf, &icfg, model.interaction_nets()).unwrap();
        prop_assert!(out.len() <= capacity.max(nv));
        if nv <= capacity {
            prop_assert!(out.len() <= capacity);
            prop_assert!(out.len() >= nv);
        }
        prop_assert_eq!(interact(&veh, &inf, &icfg, model.interaction_nets()).unwrap(), out);
        let empty = QueryBatch::new(1, 1, inf.pose);
        prop_assert_eq!(interact(&veh, &empty, &icfg, model.interaction_nets()).unwrap(), veh);
    }

    #[test]
    fn sgd_runs_are_bit_identical(seed in any::<u64>(), steps in 1usize..20) {
        let net = init_net(&[3, 5, 2], &[Activation::Relu, Activation::Sigmoid], seed).unwrap();
        let run = || {
            let mut n = net.clone();
            for s in 0..steps {
                let x = [s as f64 * 0.1, -0.3, 0.7];
                let (y, tape) = n.forward(&x).unwrap();
                let (g, _) = n.backward(&tape, &y).unwrap();
                n.set_params(&sgd_step(&n.params(), &g, 0.05).unwrap()).unwrap();
            }
            n.params()
        };
        let (a, b): (ParamVector, ParamVector) = (run(), run());
        prop_assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let net = init_net(&[4, 6, 3], &[Activation::Relu, Activation::Identity], seed).unwrap();
        let (y1, _) = net.forward(&x).unwrap();
        let (y2, _) = net.forward(&x).unwrap();
        prop_assert_eq!(&y1, &y2);
        prop_assert_eq!(net.eval(&x).unwrap(), y1);
    }
}

fn pred(b: BBox3D, score: f64) -> Prediction {
    Prediction { bbox: b, score }
}

proptest! {
    #[test]
    fn ap_monotone_in_prediction_quality(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let num_gt = flags.iter().filter(|f| **f).count() + extra + 1;
        let base = average_precision(&flags, num_gt);
        let mut top = vec![true];
        top.extend(&flags);
        prop_assert!(average_precision(&top, num_gt) >= base - 1e-12);
        let mut bottom = flags.clone();
        bottom.push(false);
        prop_assert!(average_precision(&bottom, num_gt) <= base + 1e-12);
    }

    #[test]
    fn stricter_iou_never_raises_ap(gts in prop::collection::vec(bbox(), 1..6), noise in prop::collection::vec((bbox(), 0.0f64..1.0), 0..10)) {
        let preds: Vec<Prediction> = noise.iter().map(|(b, s)| pred(*b, *s)).collect();
        let ap = |t: f64| {
            let f = match_predictions(&preds, &gts, t);
            average_precision(&f.ranked_flags(), gts.len())
        };
        prop_assert!(ap(0.5) <= ap(0.3) + 1e-12);
    }

    #[test]
    fn pooled_evaluation_ignores_scene_order(seed in any::<u64>(), rot in 0usize..4) {
        let cfg = SceneConfig { min_objects: 3, max_objects: 5, ..Default::default() };
        let scenes: Vec<_> = (0..4).map(|i| generate_scene(&cfg, seed.wrapping_add(i)).unwrap()).collect();
                let preds: Vec<Vec<Prediction>> = scenes.iter().enumerate().map(|(k, s)| {
            s.objects.iter().enumerate().map(|(j, o)| {
                let mut b = o.bbox;
                b.center[0] += 0.3 * ((j + k) % 3) as f64;
                // distinct scores: tie order would legitimately depend on scene order
                pred(b, 0.1 + 0.8 * ((k * 31 + j) as f64 * 0.618_033_988_7).fract())
            }).collect()
        }).collect();
        let vis = vec![VisibilityInfo::default(); 4];
        let range = PerceptionRange { x_min: -1e4, x_max: 1e4, y_min: -1e4, y_max: 1e4, ..Default::default() };
        let a = evaluate(&preds, &scenes, &[0.3, 0.5], &vis, &range).unwrap();
        let mut s2 = scenes.clone();
        let mut p2 = preds.clone();
        s2.rotate_left(rot);
        p2.rotate_left(rot);
        let b = evaluate(&p2, &s2, &[0.3, 0.5], &vis, &range).unwrap();
        prop_assert_eq!(a.num_gt, b.num_gt);
        for ((_, x), (_, y)) in a.ap_bev.iter().zip(&b.ap_bev) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
