use sga_core::analysis::{
    entries_to_jsonl, layer_stats, probe_dense, read_attention_dump, rotation_consistency, stats_to_csv, topk_entries,
    write_attention_dump, ProbeOptions, RotationMode, DEFAULT_TOP_K,
};
use sga_core::model::{init_tokens, make_model, ModelConfig, TokenLayout};

fn setup() -> (sga_core::model::Model, sga_core::model::TokenBatch) {
    let m = make_model(ModelConfig { num_blocks: 6, embed_dim: 16, num_heads: 2, seed: 1, ..ModelConfig::new(TokenLayout::VggtStyle) }).unwrap();
    let b = init_tokens(m.config(), 1, 3, 3, 4, 2).unwrap();
    (m, b)
}

#[test]
fn dump_round_trip_and_sidecar() {
    let (m, b) = setup();
    let a = probe_dense(&m, &b, 1, &ProbeOptions::default()).unwrap().restricted();
    let dir = tempfile::tempdir().unwrap();
    write_attention_dump(dir.path(), 1, &a).unwrap();
    let back = read_attention_dump(&dir.path().join("layer_01.f32"), 3, b.grid()).unwrap();
    assert!(back.values.max_abs_diff(&a.values) < 1e-7);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("layer_01.json")).unwrap()).unwrap();
    assert_eq!(sidecar["N"], 3);
    assert_eq!(sidecar["n_h"], 3);
    assert_eq!(sidecar["n_w"], 4);
    assert_eq!(sidecar["heads_averaged"], true);
}

#[test]
fn stats_cover_every_global_layer() {
    let (m, b) = setup();
    let stats = layer_stats(&m, &b, DEFAULT_TOP_K, 0, &ProbeOptions::default()).unwrap();
    assert_eq!(stats.len(), 3);
    let max_entropy = ((3 * (12 + 5)) as f64).ln();
    for s in &stats {
        assert!(s.entropy > 0.0 && s.entropy <= max_entropy + 1e-9);
        assert!(s.max_weight > 0.0 && s.max_weight <= 1.0);
        assert!(s.self_fraction + s.aligned_fraction <= 1.0);
    }
    let csv = String::from_utf8(stats_to_csv(&stats).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn topk_lines_and_rotation_report() {
    let (m, b) = setup();
    let a = probe_dense(&m, &b, 2, &ProbeOptions::default()).unwrap().restricted();
    let top = topk_entries(&a, 50);
    let text = String::from_utf8(entries_to_jsonl(&top).unwrap()).unwrap();
    assert_eq!(text.lines().count(), 50);
    let r = rotation_consistency(&m, &b, 2, 200, 50, RotationMode::ReEncode, &ProbeOptions::default()).unwrap();
    assert!((0.0..=1.0).contains(&r.overlap_fraction));
    assert!(r.original.len() <= 50);
    assert!(rotation_consistency(&m, &b, 2, 10, 50, RotationMode::ReEncode, &ProbeOptions::default()).is_err());
}
