use quest_demo::{iou, iou_json, packet, packet_json, scene, scene_json, BoxInput};

#[test]
fn iou_of_identical_and_disjoint_boxes() {
    let a = BoxInput { cx: 0.0, cy: 0.0, length: 4.0, width: 2.0, yaw: 0.3 };
    let same = iou(&a, &a).unwrap();
    assert!((same.iou - 1.0).abs() < 1e-9);
    assert!((same.intersection_area - 8.0).abs() < 1e-9);
    let far = iou(&a, &BoxInput { cx: 20.0, ..a }).unwrap();
    assert_eq!(far.iou, 0.0);
    assert!(far.intersection.is_empty());
}

#[test]
fn iou_json_round_trip_and_bad_input() {
    let out = iou_json(r#"{"a":{"cx":0,"cy":0,"length":4,"width":2,"yaw":0},"b":{"cx":2,"cy":0,"length":4,"width":2,"yaw":0}}"#).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["iou"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-9);
    assert_eq!(v["a"].as_array().unwrap().len(), 4);
    assert!(iou_json("{}").is_err());
    assert!(iou_json(r#"{"a":{"cx":0,"cy":0,"length":-1,"width":2,"yaw":0},"b":{"cx":0,"cy":0,"length":1,"width":1,"yaw":0}}"#).is_err());
}

#[test]
fn scene_threshold_and_dropout_shrink_the_stream() {
    let loose = scene(7, 0.0, 0.0).unwrap();
    let strict = scene(7, 0.6, 0.0).unwrap();
    assert_eq!(loose.selected, loose.infra_queries.len());
    assert!(strict.selected <= loose.selected);
    assert!(strict.query_bytes <= loose.query_bytes);
    assert!(strict.infra_queries.iter().all(|q| q.selected == (q.confidence >= 0.6)));
    let lossy = scene(7, 0.0, 1.0).unwrap();
    assert_eq!(lossy.delivered, 0);
    assert_eq!(lossy.query_bytes, 74);
    assert!(loose.box_bytes < loose.query_bytes);
    assert!(scene(7, 1.5, 0.0).is_err());
    assert!(scene_json(7, 0.3, 2.0).is_err());
    assert!(scene_json(7, 0.3, 0.5).unwrap().contains("\"objects\""));
}

#[test]
fn packet_flip_is_detected() {
    let clean = packet(3, 0.3, None).unwrap();
    assert_eq!(clean.decode, "ok");
    assert_eq!(clean.bytes, 74 + clean.queries * (18 + 4 * clean.feature_dim));
    for bit in [0, 40, 9 * 8 + 1, clean.bytes * 8 - 1] {
        let hit = packet(3, 0.3, Some(bit)).unwrap();
        assert_ne!(hit.decode, "ok", "bit {bit}");
    }
    let v: serde_json::Value = serde_json::from_str(&packet_json(3, 0.3, -1).unwrap()).unwrap();
    assert_eq!(v["flipped_bit"], serde_json::Value::Null);
}
