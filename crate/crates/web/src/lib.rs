//! Browser bindings for a few roadseq operations. Every export has a plain
//! Rust twin returning `Result<_, String>` so it can be tested natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use roadseq::cnn::FrameClassifier;
use roadseq::data::{synth_corridor, SynthConfig};
use roadseq::eval::{weighted_avg_f_values, EvalReport};
use roadseq::geo::{sample_points, RoadNetwork};
use roadseq::lstm::{apply_threshold, bptt_train, predict_corridor, LstmConfig, LstmMode, SequenceModel};
use roadseq::seed::stage_rng;
use roadseq::train::TrainConfig;

const DEMO_WINDOW: usize = 20;
const DEMO_HIDDEN: usize = 8;

/// Samples every LineString of a GeoJSON FeatureCollection at `interval_m`
/// and returns the points as a JSON array.
pub fn sample_geojson(geojson: &str, interval_m: f64) -> Result<String, String> {
    let net = RoadNetwork::from_geojson(geojson).map_err(|e| e.to_string())?;
    let points = sample_points(&net, interval_m).map_err(|e| e.to_string())?;
    let rows: Vec<Value> = points
        .iter()
        .map(|p| {
            json!({
                "edge_id": p.edge_id,
                "seq_index": p.seq_index,
                "chainage_m": p.chainage_m,
                "lat": p.location.lat,
                "lon": p.location.lon,
                "heading_deg": p.heading_deg,
            })
        })
        .collect();
    Ok(Value::Array(rows).to_string())
}

/// Support-weighted mean of per-class F scores.
pub fn weighted_f(f: [f64; 3], counts: [u32; 3]) -> Result<f64, String> {
    if let Some(bad) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("F scores must lie in [0, 1], got {bad}"));
    }
    weighted_avg_f_values(f, counts.map(|c| c as usize)).map_err(|e| e.to_string())
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Generates a training and a test corridor, fits a frame-only head and a
/// small shared LSTM, and returns both probability tracks for the test
/// corridor with the ground truth and their average F.
pub fn corridor_demo(seed: u32, n_points: usize, epochs: usize) -> Result<String, String> {
    if !(DEMO_WINDOW * 3..=3000).contains(&n_points) {
        return Err(format!("n_points must be in [{}, 3000], got {n_points}", DEMO_WINDOW * 3));
    }
    if !(1..=20).contains(&epochs) {
        return Err(format!("epochs must be in [1, 20], got {epochs}"));
    }
    let seed = u64::from(seed);
    let err = |e: roadseq::Error| e.to_string();
    let sc = SynthConfig {
        n_points,
        ..SynthConfig::default()
    };
    let train = synth_corridor(&sc, seed).map_err(err)?;
    let test = synth_corridor(&sc, seed + 1000).map_err(err)?;
    let truth: Vec<_> = test.iter().map(|r| r.labels).collect();

    let mut frame = FrameClassifier::new(sc.feature_dim, &mut stage_rng(seed, "frame-init"));
    frame
        .train(&train, &TrainConfig { lr: 1e-2, batch_size: 32, epochs: 30, seed })
        .map_err(err)?;
    let frame_p = frame.predict(&test).map_err(err)?;

    let cfg = LstmConfig {
        hidden: DEMO_HIDDEN,
        ..LstmConfig::new(sc.feature_dim)
    };
    let mut model = SequenceModel::new(LstmMode::Shared, cfg, seed).map_err(err)?;
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 1,
        epochs,
        seed,
    };
    bptt_train(&mut model, &train, None, DEMO_WINDOW, 1, &tc).map_err(err)?;
    let seq_p = predict_corridor(&model, &test, DEMO_WINDOW).map_err(err)?;

    let score = |p: &[[f64; 3]]| EvalReport::evaluate(&apply_threshold(p, 0.5), &truth).map(|r| r.avg_f);
    let track = |p: &[[f64; 3]]| -> Vec<[f64; 3]> { p.iter().map(|v| v.map(round4)).collect() };
    let doc = json!({
        "interval_m": sc.interval_m,
        "truth": truth.iter().map(|l| l.map(u8::from)).collect::<Vec<_>>(),
        "frame": track(&frame_p),
        "sequence": track(&seq_p),
        "frame_avg_f": score(&frame_p).map_err(err)?,
        "sequence_avg_f": score(&seq_p).map_err(err)?,
    });
    Ok(doc.to_string())
}

#[wasm_bindgen(js_name = samplePolylines)]
pub fn sample_polylines_js(geojson: &str, interval_m: f64) -> Result<String, JsValue> {
    sample_geojson(geojson, interval_m).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = weightedF)]
pub fn weighted_f_js(f_rs: f64, f_mcb: f64, f_cb: f64, n_rs: u32, n_mcb: u32, n_cb: u32) -> Result<f64, JsValue> {
    weighted_f([f_rs, f_mcb, f_cb], [n_rs, n_mcb, n_cb]).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = corridorDemo)]
pub fn corridor_demo_js(seed: u32, n_points: usize, epochs: usize) -> Result<String, JsValue> {
    corridor_demo(seed, n_points, epochs).map_err(|e| JsValue::from_str(&e))
}
