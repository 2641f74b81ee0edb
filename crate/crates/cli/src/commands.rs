use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use roadseq::cnn::{cnn_train, predict_frames, CnnConfig, CnnModel};
use roadseq::config::PipelineConfig;
use roadseq::data::{
    attach_features, attach_pixels, feature_dim, load_labels, render_frames, save_features, save_labels,
    save_pixels, synth_corridor, synth_corruption_mask, ImageRecord, SynthConfig,
};
use roadseq::eval::EvalReport;
use roadseq::geo::{
    export_prediction_geojson, read_sample_points, sample_points, streetview_request_url, write_sample_points,
    RoadNetwork, SamplePoint,
};
use roadseq::lstm::{apply_threshold, bptt_train, combined_history, predict_corridor, LstmConfig, LstmMode, SequenceModel};
use roadseq::seed::stage_rng;
use roadseq::train::{write_history, EpochLoss, TrainConfig};
use roadseq::Error;

use crate::predictions::{self, Prediction};
use crate::{EvaluateArgs, ExportArgs, ExtractArgs, PredictArgs, SampleArgs, SynthArgs, TrainCnnArgs, TrainLstmArgs, UrlGenArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                Error::Config(_) => "config",
                Error::Io { .. } => "io",
                Error::Parse { .. } => "parse",
                Error::DuplicateKey { .. } => "duplicate_key",
                Error::Container(_) => "container",
                Error::InvalidInput(_) => "invalid_input",
                Error::ShapeMismatch { .. } => "shape_mismatch",
                Error::DimensionMismatch { .. } => "dimension_mismatch",
                Error::LengthMismatch { .. } => "length_mismatch",
                Error::UnknownIds(_) => "unknown_ids",
                Error::MissingFeatures(_) => "missing_features",
                Error::MissingPixels(_) => "missing_pixels",
                Error::NonFinite(_) => "non_finite",
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "parse" | "duplicate_key" | "container" | "invalid_input" => 5,
            "shape_mismatch" | "dimension_mismatch" | "length_mismatch" | "unknown_ids" | "missing_features"
            | "missing_pixels" => 6,
            "non_finite" => 7,
            _ => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub struct Context {
    pub cfg: PipelineConfig,
}

impl Context {
    /// Defaults, then the config file, then `--set` overrides, then `--seed`.
    pub fn resolve(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> CliResult<Self> {
        let mut cfg = match config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        Ok(Context { cfg })
    }

    /// Validates the final configuration and logs it with the seed.
    fn start(&self, command: &str) -> CliResult {
        self.cfg.validate()?;
        eprintln!("roadseq: command {command}");
        eprintln!("roadseq: seed {}", self.cfg.seed);
        for line in self.cfg.to_text().lines() {
            eprintln!("roadseq: config {line}");
        }
        Ok(())
    }
}

fn pick(flag: Option<PathBuf>, slot: &mut Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, key: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (or `{key}` in the config)")))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Refuses any output that would overwrite one of the inputs.
fn guard(inputs: &[&Path], outputs: &[&Path]) -> CliResult {
    for o in outputs {
        if let Some(i) = inputs.iter().find(|i| same_file(i, o)) {
            return Err(CliError::Usage(format!(
                "output {} would overwrite input {}",
                o.display(),
                i.display()
            )));
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| io_err(path, e))?))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

fn log_history(label: &str, history: &[EpochLoss]) {
    for h in history {
        match h.val_loss {
            Some(v) => eprintln!("roadseq: {label} epoch {} train_loss {:.6} val_loss {:.6}", h.epoch, h.train_loss, v),
            None => eprintln!("roadseq: {label} epoch {} train_loss {:.6}", h.epoch, h.train_loss),
        }
    }
}

fn save_history(path: Option<&Path>, history: &[EpochLoss]) -> CliResult {
    if let Some(p) = path {
        write_history(history, create(p)?)?;
    }
    Ok(())
}

pub fn sample(mut ctx: Context, a: SampleArgs) -> CliResult {
    pick(a.network, &mut ctx.cfg.network);
    pick(a.points, &mut ctx.cfg.points);
    if let Some(i) = a.interval {
        ctx.cfg.interval_m = i;
    }
    ctx.start("sample")?;
    let network = require(&ctx.cfg.network, "network", "network")?;
    let out = require(&ctx.cfg.points, "points", "points")?;
    guard(&[network], &[out])?;
    let text = std::fs::read_to_string(network).map_err(|e| io_err(network, e))?;
    let net = RoadNetwork::from_geojson(&text)?;
    let points = sample_points(&net, ctx.cfg.interval_m)?;
    write_sample_points(&points, create(out)?)?;
    eprintln!(
        "roadseq: sampled {} points on {} edges into {}",
        points.len(),
        net.edges().len(),
        out.display()
    );
    Ok(())
}

fn parse_size(s: &str) -> CliResult<(u32, u32)> {
    let bad = || CliError::Usage(format!("--size expects WxH with positive integers, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: u32 = w.parse().map_err(|_| bad())?;
    let h: u32 = h.parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

pub fn url_gen(mut ctx: Context, a: UrlGenArgs) -> CliResult {
    pick(a.points, &mut ctx.cfg.points);
    ctx.start("url-gen")?;
    let points_path = require(&ctx.cfg.points, "points", "points")?;
    if let Some(out) = &a.out {
        guard(&[points_path], &[out])?;
    }
    let size = parse_size(&a.size)?;
    let points = read_sample_points(open(points_path)?, &points_path.display().to_string())?;
    let mut text = String::new();
    for p in &points {
        text.push_str(&streetview_request_url(p.location, p.heading_deg, size, &a.key)?);
        text.push('\n');
    }
    match &a.out {
        Some(out) => {
            write_text(out, &text)?;
            eprintln!("roadseq: wrote {} urls to {}", points.len(), out.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn synth(mut ctx: Context, a: SynthArgs) -> CliResult {
    pick(a.labels, &mut ctx.cfg.labels);
    pick(a.features, &mut ctx.cfg.features);
    pick(a.manifest, &mut ctx.cfg.manifest);
    if let Some(n) = a.n_points {
        ctx.cfg.n_points = n;
    }
    ctx.start("synth")?;
    let cfg = &ctx.cfg;
    let labels = require(&cfg.labels, "labels", "labels")?;
    let features = require(&cfg.features, "features", "features")?;
    let sc = SynthConfig {
        n_points: cfg.n_points,
        feature_dim: cfg.feature_dim,
        interval_m: cfg.interval_m,
        ..SynthConfig::default()
    };
    let mut records = synth_corridor(&sc, cfg.seed)?;
    save_labels(&records, labels)?;
    save_features(&records, features)?;
    if let Some(manifest) = &cfg.manifest {
        let mask = synth_corruption_mask(&sc, cfg.seed)?;
        render_frames(&mut records, cfg.image_size, Some(&mask), cfg.seed)?;
        let stem = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = manifest.with_file_name(format!("{stem}_frames"));
        ensure_parent(manifest)?;
        save_pixels(&records, &dir, manifest)?;
        eprintln!("roadseq: rendered {} frames into {}", records.len(), dir.display());
    }
    eprintln!(
        "roadseq: wrote {} records to {} and {}",
        records.len(),
        labels.display(),
        features.display()
    );
    Ok(())
}

fn train_config(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size,
        epochs,
        seed,
    }
}

pub fn train_cnn(mut ctx: Context, a: TrainCnnArgs) -> CliResult {
    pick(a.labels, &mut ctx.cfg.labels);
    pick(a.manifest, &mut ctx.cfg.manifest);
    pick(a.cnn_model, &mut ctx.cfg.cnn_model);
    pick(a.history, &mut ctx.cfg.history);
    if let Some(e) = a.epochs {
        ctx.cfg.cnn_epochs = e;
    }
    ctx.start("train-cnn")?;
    let cfg = &ctx.cfg;
    let labels = require(&cfg.labels, "labels", "labels")?;
    let manifest = require(&cfg.manifest, "manifest", "manifest")?;
    let model_path = require(&cfg.cnn_model, "model", "cnn_model")?;
    let mut outputs = vec![model_path];
    outputs.extend(cfg.history.as_deref());
    guard(&[labels, manifest], &outputs)?;

    let mut records = load_labels(labels)?;
    attach_pixels(&mut records, manifest)?;
    let cnn_cfg = CnnConfig {
        image_size: cfg.image_size,
        feature_dim: cfg.feature_dim,
        ..CnnConfig::default()
    };
    let mut model = CnnModel::new(cnn_cfg, &mut stage_rng(cfg.seed, "init-cnn"))?;
    let tc = train_config(cfg.cnn_lr, cfg.cnn_batch, cfg.cnn_epochs, cfg.seed);
    let history = cnn_train(&mut model, &records, None, &tc)?;
    log_history("cnn", &history);
    model.save(create(model_path)?, cfg.seed)?;
    save_history(cfg.history.as_deref(), &history)?;
    eprintln!("roadseq: saved cnn model to {}", model_path.display());
    Ok(())
}

fn load_cnn(path: &Path) -> CliResult<CnnModel> {
    Ok(CnnModel::load(open(path)?)?.0)
}

fn load_lstm(path: &Path) -> CliResult<SequenceModel> {
    Ok(SequenceModel::load(open(path)?)?.0)
}

pub fn extract_features(mut ctx: Context, a: ExtractArgs) -> CliResult {
    pick(a.cnn_model, &mut ctx.cfg.cnn_model);
    pick(a.labels, &mut ctx.cfg.labels);
    pick(a.manifest, &mut ctx.cfg.manifest);
    pick(a.features, &mut ctx.cfg.features);
    ctx.start("extract-features")?;
    let cfg = &ctx.cfg;
    let model_path = require(&cfg.cnn_model, "cnn-model", "cnn_model")?;
    let labels = require(&cfg.labels, "labels", "labels")?;
    let manifest = require(&cfg.manifest, "manifest", "manifest")?;
    let out = require(&cfg.features, "features", "features")?;
    guard(&[model_path, labels, manifest], &[out])?;
    let model = load_cnn(model_path)?;
    let mut records = load_labels(labels)?;
    attach_pixels(&mut records, manifest)?;
    roadseq::cnn::extract_features(&model, &mut records)?;
    save_features(&records, out)?;
    eprintln!(
        "roadseq: wrote {} feature vectors of dimension {} to {}",
        records.len(),
        model.config().feature_dim,
        out.display()
    );
    Ok(())
}

fn records_with_features(labels: &Path, features: &Path, dim: usize) -> CliResult<Vec<ImageRecord>> {
    let mut records = load_labels(labels)?;
    attach_features(&mut records, features, Some(dim))?;
    Ok(records)
}

pub fn train_lstm(mut ctx: Context, a: TrainLstmArgs) -> CliResult {
    pick(a.labels, &mut ctx.cfg.labels);
    pick(a.features, &mut ctx.cfg.features);
    pick(a.lstm_model, &mut ctx.cfg.lstm_model);
    pick(a.history, &mut ctx.cfg.history);
    if let Some(e) = a.epochs {
        ctx.cfg.lstm_epochs = e;
    }
    let mode: LstmMode = a.mode.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    ctx.start("train-lstm")?;
    eprintln!("roadseq: mode {mode}");
    let cfg = &ctx.cfg;
    let labels = require(&cfg.labels, "labels", "labels")?;
    let features = require(&cfg.features, "features", "features")?;
    let model_path = require(&cfg.lstm_model, "model", "lstm_model")?;
    let mut inputs = vec![labels, features];
    inputs.extend(a.val_labels.as_deref());
    inputs.extend(a.val_features.as_deref());
    let mut outputs = vec![model_path];
    outputs.extend(cfg.history.as_deref());
    guard(&inputs, &outputs)?;

    let records = records_with_features(labels, features, cfg.feature_dim)?;
    let val = match (&a.val_labels, &a.val_features) {
        (Some(l), Some(f)) => Some(records_with_features(l, f, cfg.feature_dim)?),
        _ => None,
    };
    let lc = LstmConfig {
        input_dim: feature_dim(&records)?,
        hidden: cfg.hidden,
        dense: cfg.dense,
        dropout: cfg.dropout,
    };
    let mut model = SequenceModel::new(mode, lc, cfg.seed)?;
    let tc = train_config(cfg.lstm_lr, cfg.lstm_batch, cfg.lstm_epochs, cfg.seed);
    let groups = bptt_train(&mut model, &records, val.as_deref(), cfg.window, cfg.stride, &tc)?;
    for g in &groups {
        log_history(&format!("lstm[{}]", g.group), &g.history);
    }
    model.save(create(model_path)?, cfg.seed)?;
    save_history(cfg.history.as_deref(), &combined_history(&groups))?;
    eprintln!("roadseq: saved {mode} lstm model to {}", model_path.display());
    Ok(())
}

pub fn predict(mut ctx: Context, a: PredictArgs) -> CliResult {
    pick(a.labels, &mut ctx.cfg.labels);
    pick(a.features, &mut ctx.cfg.features);
    pick(a.manifest, &mut ctx.cfg.manifest);
    pick(a.predictions, &mut ctx.cfg.predictions);
    let (lstm_path, cnn_path) = match (a.lstm_model, a.cnn_model) {
        (Some(l), None) => (Some(l), None),
        (None, Some(c)) => (None, Some(c)),
        _ => (ctx.cfg.lstm_model.clone(), None),
    };
    ctx.start("predict")?;
    let cfg = &ctx.cfg;
    let labels = require(&cfg.labels, "labels", "labels")?;
    let out = require(&cfg.predictions, "predictions", "predictions")?;
    let mut records = load_labels(labels)?;
    let probs = match (&lstm_path, &cnn_path) {
        (Some(model_path), _) => {
            let features = require(&cfg.features, "features", "features")?;
            guard(&[labels, features, model_path], &[out])?;
            let model = load_lstm(model_path)?;
            attach_features(&mut records, features, Some(model.config().input_dim))?;
            eprintln!("roadseq: predicting with {} lstm, window {}", model.mode(), cfg.window);
            predict_corridor(&model, &records, cfg.window)?
        }
        (None, Some(model_path)) => {
            let manifest = require(&cfg.manifest, "manifest", "manifest")?;
            guard(&[labels, manifest, model_path], &[out])?;
            let model = load_cnn(model_path)?;
            attach_pixels(&mut records, manifest)?;
            eprintln!("roadseq: predicting with cnn frames");
            predict_frames(&model, &records)?
        }
        (None, None) => {
            return Err(CliError::Usage(
                "missing --lstm-model or --cnn-model (or `lstm_model` in the config)".into(),
            ))
        }
    };
    let preds = predictions::from_records(&records, &probs);
    predictions::write(&preds, create(out)?)?;
    eprintln!("roadseq: wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

fn read_predictions(path: &Path) -> CliResult<Vec<Prediction>> {
    Ok(predictions::read(open(path)?, &path.display().to_string())?)
}

pub fn evaluate(mut ctx: Context, a: EvaluateArgs) -> CliResult {
    pick(a.predictions, &mut ctx.cfg.predictions);
    pick(a.labels, &mut ctx.cfg.labels);
    pick(a.metrics, &mut ctx.cfg.metrics);
    ctx.start("evaluate")?;
    let cfg = &ctx.cfg;
    let pred_path = require(&cfg.predictions, "predictions", "predictions")?;
    let labels = require(&cfg.labels, "labels", "labels")?;
    if let Some(m) = &cfg.metrics {
        guard(&[pred_path, labels], &[m])?;
    }
    let preds = read_predictions(pred_path)?;
    let truth = load_labels(labels)?;
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left_name: "predictions",
            left: preds.len(),
            right_name: "truth",
            right: truth.len(),
        }
        .into());
    }
    let unmatched: Vec<String> = preds
        .iter()
        .zip(&truth)
        .filter(|(p, t)| p.image_id != t.image_id || p.edge_id != t.edge_id || p.seq_index != t.seq_index)
        .map(|(p, _)| p.image_id.clone())
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnknownIds(unmatched).into());
    }
    let probs: Vec<[f64; 3]> = preds.iter().map(|p| p.probs).collect();
    let predicted = apply_threshold(&probs, cfg.threshold);
    let truth_labels: Vec<_> = truth.iter().map(|r| r.labels).collect();
    let report = EvalReport::evaluate(&predicted, &truth_labels)?;
    for w in report.warnings() {
        eprintln!("roadseq: warning: {w}");
    }
    print!("{}", report.to_table());
    if let Some(m) = &cfg.metrics {
        write_text(m, &report.to_json())?;
        eprintln!("roadseq: wrote metrics to {}", m.display());
    }
    Ok(())
}

pub fn export_map(mut ctx: Context, a: ExportArgs) -> CliResult {
    pick(a.predictions, &mut ctx.cfg.predictions);
    pick(a.map, &mut ctx.cfg.map);
    ctx.start("export-map")?;
    let cfg = &ctx.cfg;
    let pred_path = require(&cfg.predictions, "predictions", "predictions")?;
    let out = require(&cfg.map, "map", "map")?;
    guard(&[pred_path], &[out])?;
    let preds = read_predictions(pred_path)?;
    let points: Vec<SamplePoint> = preds
        .iter()
        .map(|p| SamplePoint {
            edge_id: p.edge_id.clone(),
            seq_index: p.seq_index,
            chainage_m: p.seq_index as f64 * cfg.interval_m,
            location: p.location,
            heading_deg: 0.0,
        })
        .collect();
    let probs: Vec<[f64; 3]> = preds.iter().map(|p| p.probs).collect();
    let doc = export_prediction_geojson(&points, &probs, cfg.threshold)?;
    write_text(out, &doc)?;
    eprintln!("roadseq: wrote {} map points to {}", points.len(), out.display());
    Ok(())
}
