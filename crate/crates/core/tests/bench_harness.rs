use sga_core::bench::{records_to_csv, run_benchmark, BenchConfig, BenchFixture, Phase, CSV_HEADER};
use std::sync::Mutex;

use sga_core::model::TokenLayout;

// Timed tests must not overlap.
static SERIAL: Mutex<()> = Mutex::new(());

fn config() -> BenchConfig {
    BenchConfig {
        layout: TokenLayout::Pi3Style,
        frames: 16,
        n_h: 8,
        n_w: 8,
        dim: 64,
        heads: 4,
        num_blocks: Some(4),
        t_early: 0,
        repeats: 7,
        warmups: 2,
        ..BenchConfig::default()
    }
}

#[test]
fn sigma_one_matches_dense_speed() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    // Wall-clock noise on a shared machine: a real overhead fails every attempt.
    let mut seen = Vec::new();
    for _ in 0..3 {
        let r = run_benchmark(&BenchConfig { sigma: 1, ..config() }).unwrap();
        assert!(r.environment.contains("workers="));
        let ratio = r.dense.min_s / r.timing.min_s;
        seen.push(ratio);
        if (0.9..=1.1).contains(&ratio) {
            return;
        }
    }
    panic!("speedups {seen:?}");
}

#[test]
fn record_csv_row_matches_header() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = run_benchmark(&BenchConfig { sigma: 4, repeats: 3, warmups: 1, ..config() }).unwrap();
    assert!(r.timing.min_s <= r.timing.median_s && r.timing.median_s <= r.timing.max_s);
    assert!(r.speedup > 1.0);
    let csv = String::from_utf8(records_to_csv(&[r]).unwrap()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert_eq!(lines[1].split(',').count(), CSV_HEADER.len());
    assert!(lines[1].contains(",attn_layer,"));
}

#[test]
fn benchmark_does_not_touch_inputs() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let c = BenchConfig { phase: Phase::Forward, sigma: 2, repeats: 3, warmups: 0, frames: 3, n_h: 4, n_w: 4, ..config() };
    let fixture = BenchFixture::new(&c).unwrap();
    let (x, batch) = (fixture.x.clone(), fixture.batch.clone());
    let dense = fixture.time_dense(Phase::Forward, 0, 3).unwrap();
    fixture.record(&c, dense).unwrap();
    assert_eq!(fixture.x, x);
    assert_eq!(fixture.batch, batch);
}
