use hybridkv_web::{quantize, quantize_js, retrieve, retrieve_js, timeline, timeline_js};

#[test]
fn quantize_groups_and_bounds() {
    let v = quantize("0, 1, 2, 3, -4 4", 2, 4).unwrap();
    assert_eq!(v.groups.len(), 2);
    assert_eq!(v.groups[0].codes, vec![0, 1, 2, 3]);
    assert_eq!(v.groups[0].dequantized, vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(v.groups[1].dequantized, vec![-4.0, 4.0]);
    // codes 0,1,2,3 | 0,3 packed two bits each, least significant first
    assert_eq!(v.packed_hex, "e40c");
    assert!(v.groups.iter().all(|g| g.max_error <= g.bound));
    assert_eq!(v.fp16_bytes, 12);
}

#[test]
fn quantize_rejects_bad_input() {
    assert!(quantize("1, x", 1, 4).is_err());
    assert!(quantize("", 1, 4).is_err());
    assert!(quantize("1 2", 3, 4).is_err());
    assert!(quantize_js("1, nan", 1, 4).contains("\"error\""));
}

#[test]
fn retrieval_finds_planted_tokens() {
    let v = retrieve(7, 256, 0.95, 16, 8, 8).unwrap();
    assert_eq!(v.seq_len, 257);
    assert_eq!(v.selected.len(), 16 + 8);
    assert!(v.selected_mass >= 0.95 - 1e-9, "{}", v.selected_mass);
    assert!(v.cosine > 0.99);
    assert!((v.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let json: serde_json::Value = serde_json::from_str(&retrieve_js(7, 256, 0.95, 16, 8, 8)).unwrap();
    assert_eq!(json["seq_len"], 257);
    assert!(retrieve_js(7, 256, 0.95, 16, 8, 99).contains("\"error\""));
}

#[test]
fn timeline_view() {
    let v = timeline("QSSS", 8192, 4.0, 1).unwrap();
    assert!(v.summary.total >= v.summary.critical_path);
    assert!(v.events.iter().any(|e| e.label == "fetch_topk"));
    assert!(v.footprint.iter().any(|r| r.method == "hybrid-total"));
    let fast = timeline("QSSS", 8192, 32.0, 1).unwrap();
    assert!(fast.summary.total <= v.summary.total);
    assert!(timeline_js("QXS", 8192, 4.0, 1).contains("\"error\""));
    assert!(timeline_js("QS", 8192, f64::NAN, 1).contains("\"error\""));
}
