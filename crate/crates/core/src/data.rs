//! Labelled image records, their on-disk formats, sliding-window sequence
//! construction, class counts and the synthetic corridor generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{destination, LatLon};
use crate::nn::Tensor;
use crate::{Class, Labels};

/// One geo-referenced observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub edge_id: String,
    pub seq_index: u64,
    pub location: LatLon,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub pixels: Option<Tensor>,
    pub features: Option<Vec<f64>>,
    /// Indexed by [`Class::index`]: rumble strips, metal crash barrier, concrete barrier.
    pub labels: Labels,
}

impl ImageRecord {
    pub fn key(&self) -> (&str, u64) {
        (&self.edge_id, self.seq_index)
    }

    /// Labels as `0.0`/`1.0` targets.
    pub fn targets(&self) -> [f64; 3] {
        self.labels.map(|b| if b { 1.0 } else { 0.0 })
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Label file

pub const LABEL_HEADER: [&str; 8] = ["image_id", "edge_id", "seq_index", "lat", "lon", "rs", "mcb", "cb"];

/// Reads a label CSV (`image_id,edge_id,seq_index,lat,lon,rs,mcb,cb`).
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    parse_labels(open(path)?, &path.display().to_string())
}

/// Parses label CSV text; `source` names the input in error messages.
/// Records come back sorted by `(edge_id, seq_index)`.
pub fn parse_labels<R: Read>(reader: R, source: &str) -> Result<Vec<ImageRecord>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != LABEL_HEADER {
        return Err(parse_err(
            1,
            format!("expected header `{}`", LABEL_HEADER.join(",")),
        ));
    }
    let mut records = Vec::new();
    let mut lines: HashMap<(String, u64), usize> = HashMap::new();
    let mut ids = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(i).unwrap_or("");
        let number = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("{} is not a number: {:?}", LABEL_HEADER[i], field(i))))
        };
        let label = |i: usize| -> Result<bool> {
            match field(i) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(
                    line,
                    format!("{} must be 0 or 1, got {other:?}", LABEL_HEADER[i]),
                )),
            }
        };
        let image_id = field(0).to_string();
        let edge_id = field(1).to_string();
        if image_id.is_empty() || edge_id.is_empty() {
            return Err(parse_err(line, "image_id and edge_id must be non-empty".into()));
        }
        let seq_index = field(2)
            .parse::<u64>()
            .map_err(|_| parse_err(line, format!("seq_index is not a nonnegative integer: {:?}", field(2))))?;
        let location = LatLon::new(number(3)?, number(4)?).map_err(|e| parse_err(line, e.to_string()))?;
        let labels = [label(5)?, label(6)?, label(7)?];
        if let Some(&first) = lines.get(&(edge_id.clone(), seq_index)) {
            return Err(Error::DuplicateKey {
                edge_id,
                seq_index,
                line: if first == 0 { line } else { line.max(first) },
            });
        }
        if !ids.insert(image_id.clone()) {
            return Err(parse_err(line, format!("duplicate image_id {image_id}")));
        }
        lines.insert((edge_id.clone(), seq_index), line);
        records.push(ImageRecord {
            image_id,
            edge_id,
            seq_index,
            location,
            pixels: None,
            features: None,
            labels,
        });
    }
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [ImageRecord]) {
    records.sort_by(|a, b| a.edge_id.cmp(&b.edge_id).then(a.seq_index.cmp(&b.seq_index)));
}

pub fn write_labels<W: Write>(records: &[ImageRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::invalid(format!("writing labels: {e}"));
    w.write_record(LABEL_HEADER).map_err(err)?;
    for r in records {
        let b = |v: bool| if v { "1" } else { "0" };
        w.write_record([
            r.image_id.as_str(),
            r.edge_id.as_str(),
            &r.seq_index.to_string(),
            &format!("{:.6}", r.location.lat),
            &format!("{:.6}", r.location.lon),
            b(r.labels[0]),
            b(r.labels[1]),
            b(r.labels[2]),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing labels: {e}")))
}

pub fn save_labels(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    write_labels(records, create(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Feature file (JSON lines)

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    image_id: String,
    features: Vec<f64>,
}

/// Parses `{"image_id": ..., "features": [...]}` lines. Blank lines are skipped.
pub fn parse_features<R: BufRead>(reader: R, source: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FeatureLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: source.to_string(),
                line: line_no,
                message: format!("non-finite feature for {}", parsed.image_id),
            });
        }
        out.push((parsed.image_id, parsed.features));
    }
    Ok(out)
}

/// Attaches feature vectors from a JSON-lines file, matching by `image_id`.
///
/// With `dim = None` the dimension is taken from the first line. Fails on
/// unknown ids, on any vector of the wrong dimension and on records left
/// without features (all offending ids are listed).
pub fn attach_features(
    records: &mut [ImageRecord],
    path: impl AsRef<Path>,
    dim: Option<usize>,
) -> Result<usize> {
    let path = path.as_ref();
    let lines = parse_features(BufReader::new(open(path)?), &path.display().to_string())?;
    attach_feature_vectors(records, lines, dim)
}

/// In-memory form of [`attach_features`]. Returns the feature dimension.
pub fn attach_feature_vectors(
    records: &mut [ImageRecord],
    vectors: Vec<(String, Vec<f64>)>,
    dim: Option<usize>,
) -> Result<usize> {
    let index: HashMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.clone(), i))
        .collect();
    let expected = match dim.or_else(|| vectors.first().map(|(_, v)| v.len())) {
        Some(d) if d > 0 => d,
        Some(_) => return Err(Error::invalid("feature dimension must be positive")),
        None if records.is_empty() => return Ok(dim.unwrap_or(0)),
        None => {
            return Err(Error::MissingFeatures(
                records.iter().map(|r| r.image_id.clone()).collect(),
            ))
        }
    };
    let unknown: Vec<String> = vectors
        .iter()
        .filter(|(id, _)| !index.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownIds(unknown));
    }
    if let Some((id, v)) = vectors.iter().find(|(_, v)| v.len() != expected) {
        return Err(Error::DimensionMismatch {
            context: format!("features for {id}"),
            expected,
            found: v.len(),
        });
    }
    let mut seen = HashSet::new();
    for (id, v) in vectors {
        if !seen.insert(id.clone()) {
            return Err(Error::invalid(format!("duplicate features for {id}")));
        }
        records[index[&id]].features = Some(v);
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.features.is_none())
        .map(|r| r.image_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }
    Ok(expected)
}

pub fn write_features<W: Write>(records: &[ImageRecord], mut writer: W) -> Result<()> {
    for r in records {
        let features = r
            .features
            .clone()
            .ok_or_else(|| Error::MissingFeatures(vec![r.image_id.clone()]))?;
        let line = serde_json::to_string(&FeatureLine {
            image_id: r.image_id.clone(),
            features,
        })
        .expect("finite floats serialize");
        writeln!(writer, "{line}").map_err(|e| Error::invalid(format!("writing features: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::invalid(format!("writing features: {e}")))
}

pub fn save_features(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    write_features(records, create(path.as_ref())?)
}

/// Checks that every record carries features of one common dimension and
/// returns it.
pub fn feature_dim(records: &[ImageRecord]) -> Result<usize> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.features.is_none())
        .map(|r| r.image_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }
    let dim = records
        .first()
        .and_then(|r| r.features.as_ref())
        .map_or(0, Vec::len);
    for r in records {
        let n = r.features.as_ref().map_or(0, Vec::len);
        if n != dim {
            return Err(Error::DimensionMismatch {
                context: format!("features for {}", r.image_id),
                expected: dim,
                found: n,
            });
        }
    }
    Ok(dim)
}

// ---------------------------------------------------------------------------
// Pixel images: binary PPM (P6) plus a manifest CSV `image_id,path`

/// Parses a binary PPM (P6, maxval <= 255) into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::invalid("not a binary PPM (P6)"));
    }
    let mut num = || -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::invalid("bad PPM header number"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::invalid(format!("unsupported PPM {w}x{h} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let raster = bytes
        .get(data_start..data_start + 3 * w * h)
        .ok_or_else(|| Error::invalid("truncated PPM raster"))?;
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            d[c * h * w + i] = f64::from(px[c]) / maxval as f64;
        }
    }
    Ok(t)
}

/// Encodes a `[3, H, W]` tensor (values clamped to `[0, 1]`) as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_rank(3)?;
    if image.shape()[0] != 3 {
        return Err(Error::DimensionMismatch {
            context: "PPM channels".into(),
            expected: 3,
            found: image.shape()[0],
        });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Attaches pixels listed in a manifest CSV (`image_id,path`, paths relative
/// to the manifest's directory). Every record must be listed.
pub fn attach_pixels(records: &mut [ImageRecord], manifest: impl AsRef<Path>) -> Result<()> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::Reader::from_reader(open(manifest)?);
    let mut paths: HashMap<String, PathBuf> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            path: manifest.display().to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let (Some(id), Some(p)) = (row.get(0), row.get(1)) else {
            return Err(Error::Parse {
                path: manifest.display().to_string(),
                line: row.position().map_or(0, |p| p.line() as usize),
                message: "expected image_id,path".into(),
            });
        };
        paths.insert(id.to_string(), base.join(p));
    }
    let known: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut unknown: Vec<String> = paths
        .keys()
        .filter(|id| !known.contains(id.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(Error::UnknownIds(unknown));
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !paths.contains_key(&r.image_id))
        .map(|r| r.image_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPixels(missing));
    }
    for r in records.iter_mut() {
        let p = &paths[&r.image_id];
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        r.pixels = Some(decode_ppm(&bytes).map_err(|e| Error::Parse {
            path: p.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?);
    }
    Ok(())
}

/// Writes one PPM per record into `dir` and a manifest CSV at `manifest`.
pub fn save_pixels(records: &[ImageRecord], dir: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let manifest = manifest.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_writer(create(manifest)?);
    let err = |e: csv::Error| Error::invalid(format!("writing manifest: {e}"));
    w.write_record(["image_id", "path"]).map_err(err)?;
    for r in records {
        let pixels = r
            .pixels
            .as_ref()
            .ok_or_else(|| Error::MissingPixels(vec![r.image_id.clone()]))?;
        let file = dir.join(format!("{}.ppm", r.image_id));
        std::fs::write(&file, encode_ppm(pixels)?).map_err(|e| Error::io(&file, e))?;
        let rel = file.strip_prefix(base).unwrap_or(&file);
        w.write_record([r.image_id.as_str(), &rel.display().to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing manifest: {e}")))
}

// ---------------------------------------------------------------------------
// Sequences

/// A window of consecutive records on one edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSequence {
    pub edge_id: String,
    pub start_seq_index: u64,
    /// Positions of the window's records in the sorted record slice.
    pub range: Range<usize>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn records<'a>(&self, all: &'a [ImageRecord]) -> &'a [ImageRecord] {
        &all[self.range.clone()]
    }
}

fn check_sorted(records: &[ImageRecord]) -> Result<()> {
    for (k, w) in records.windows(2).enumerate() {
        if w[0].key() >= w[1].key() {
            return Err(Error::invalid(format!(
                "records must be sorted by (edge_id, seq_index) without duplicates; \
                 position {} ({}#{}) is followed by ({}#{})",
                k, w[0].edge_id, w[0].seq_index, w[1].edge_id, w[1].seq_index
            )));
        }
    }
    Ok(())
}

/// Maximal runs of gapless `seq_index` on one edge, as ranges into `records`.
pub fn runs(records: &[ImageRecord]) -> Result<Vec<Range<usize>>> {
    check_sorted(records)?;
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        let breaks = i == records.len()
            || records[i].edge_id != records[i - 1].edge_id
            || records[i].seq_index != records[i - 1].seq_index + 1;
        if breaks {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    Ok(out)
}

/// Number of windows a run of `n` records yields: `max(0, floor((n-W)/S) + 1)`.
pub fn window_count(n: usize, window: usize, stride: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / stride + 1
    }
}

/// Sliding windows of length `window`, advancing by `stride`, inside each
/// gapless run. Runs shorter than the window yield nothing.
pub fn build_sequences(records: &[ImageRecord], window: usize, stride: usize) -> Result<Vec<FeatureSequence>> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "window and stride must be >= 1, got window={window}, stride={stride}"
        )));
    }
    let mut out = Vec::new();
    for run in runs(records)? {
        for k in 0..window_count(run.len(), window, stride) {
            let start = run.start + k * stride;
            out.push(FeatureSequence {
                edge_id: records[start].edge_id.clone(),
                start_seq_index: records[start].seq_index,
                range: start..start + window,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Class distribution

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub n_images: usize,
    pub rs_n: usize,
    pub mcb_n: usize,
    pub cb_n: usize,
}

impl ClassDistribution {
    pub fn new(n_images: usize, rs_n: usize, mcb_n: usize, cb_n: usize) -> Result<Self> {
        if rs_n > n_images || mcb_n > n_images || cb_n > n_images {
            return Err(Error::invalid(format!(
                "class counts ({rs_n}, {mcb_n}, {cb_n}) exceed image count {n_images}"
            )));
        }
        Ok(ClassDistribution {
            n_images,
            rs_n,
            mcb_n,
            cb_n,
        })
    }

    pub fn count(&self, class: Class) -> usize {
        match class {
            Class::Rs => self.rs_n,
            Class::Mcb => self.mcb_n,
            Class::Cb => self.cb_n,
        }
    }
}

pub fn class_distribution<'a>(labels: impl IntoIterator<Item = &'a Labels>) -> ClassDistribution {
    labels.into_iter().fold(ClassDistribution::default(), |mut d, l| {
        d.n_images += 1;
        d.rs_n += usize::from(l[0]);
        d.mcb_n += usize::from(l[1]);
        d.cb_n += usize::from(l[2]);
        d
    })
}

pub fn record_distribution(records: &[ImageRecord]) -> ClassDistribution {
    class_distribution(records.iter().map(|r| &r.labels))
}

// ---------------------------------------------------------------------------
// Synthetic corridor

/// Mean lengths (in records) of the presence and absence runs of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunLengths {
    pub on_mean: f64,
    pub off_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_points: usize,
    pub feature_dim: usize,
    /// Indexed by [`Class::index`].
    pub runs: [RunLengths; 3],
    /// Distance between the absent and present means of an informative coordinate.
    pub separation: f64,
    pub noise_sd: f64,
    /// Probability that a record's features are replaced by label-free noise.
    pub corruption_rate: f64,
    pub edge_id: String,
    pub origin: LatLon,
    pub bearing_deg: f64,
    pub interval_m: f64,
}

impl Default for SynthConfig {
    /// Long rumble-strip runs, short guardrail runs, medium concrete barrier
    /// runs (means of 100 / 10 / 40 records at 20 m spacing).
    fn default() -> Self {
        SynthConfig {
            n_points: 2000,
            feature_dim: 16,
            runs: [
                RunLengths { on_mean: 100.0, off_mean: 20.0 },
                RunLengths { on_mean: 10.0, off_mean: 40.0 },
                RunLengths { on_mean: 40.0, off_mean: 60.0 },
            ],
            separation: 1.0,
            noise_sd: 0.9,
            corruption_rate: 0.05,
            edge_id: "synth".into(),
            origin: LatLon { lat: 33.6, lon: -85.8 },
            bearing_deg: 90.0,
            interval_m: 20.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("synth config: {m}")));
        if self.n_points == 0 {
            return bad("n_points must be positive".into());
        }
        if self.feature_dim < 3 {
            return bad(format!("feature_dim must be >= 3, got {}", self.feature_dim));
        }
        for (c, r) in Class::ALL.iter().zip(&self.runs) {
            if !(r.on_mean >= 1.0 && r.off_mean >= 1.0 && r.on_mean.is_finite() && r.off_mean.is_finite()) {
                return bad(format!("{c} run-length means must be >= 1, got {r:?}"));
            }
        }
        if !(self.corruption_rate.is_finite() && (0.0..1.0).contains(&self.corruption_rate)) {
            return bad(format!("corruption_rate must be in [0, 1), got {}", self.corruption_rate));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise_sd must be >= 0, got {}", self.noise_sd));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return bad(format!("separation must be positive, got {}", self.separation));
        }
        if !(self.interval_m.is_finite() && self.interval_m > 0.0) {
            return bad(format!("interval_m must be positive, got {}", self.interval_m));
        }
        if self.edge_id.is_empty() || !self.origin.is_valid() {
            return bad("edge_id must be non-empty and origin a valid coordinate".into());
        }
        Ok(())
    }

    /// Which class coordinate `j` informs: coordinates are dealt round-robin
    /// to the three classes; the remainder past the last full triple is pure
    /// noise.
    pub fn informs(&self, j: usize) -> Option<Class> {
        if j < self.feature_dim / 3 * 3 {
            Some(Class::ALL[j % 3])
        } else {
            None
        }
    }
}

/// Two-state run-length process: each step leaves the current state with
/// probability `1 / mean` of that state, so run lengths are geometric.
fn run_length_labels<R: Rng + ?Sized>(n: usize, runs: RunLengths, rng: &mut R) -> Vec<bool> {
    let p_on = runs.on_mean / (runs.on_mean + runs.off_mean);
    let mut state = rng.random::<f64>() < p_on;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(state);
        let mean = if state { runs.on_mean } else { runs.off_mean };
        if rng.random::<f64>() < 1.0 / mean {
            state = !state;
        }
    }
    out
}

/// Corruption mask: each record is corrupted with probability `rate`, never
/// two in a row, so every corrupted record is isolated.
fn corruption_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    let mut out = Vec::with_capacity(n);
    let mut prev = false;
    for _ in 0..n {
        let draw = rng.random::<f64>() < rate;
        let c = draw && !prev;
        out.push(c);
        prev = c;
    }
    out
}

/// Generates a straight synthetic corridor of `n_points` records spaced
/// `interval_m` apart, with run-length labels per class and label-dependent
/// Gaussian features. A `corruption_rate` fraction of (isolated) records get
/// features carrying no label information, mimicking an occluded view.
pub fn synth_corridor(config: &SynthConfig, seed: u64) -> Result<Vec<ImageRecord>> {
    config.validate()?;
    let mut rng = crate::seed::stage_rng(seed, "synth-corridor");
    let n = config.n_points;
    let labels: Vec<Vec<bool>> = config
        .runs
        .iter()
        .map(|&r| run_length_labels(n, r, &mut rng))
        .collect();
    let corrupted = corruption_mask(n, config.corruption_rate, &mut rng);
    let noise = Normal::new(0.0, config.noise_sd).expect("validated noise_sd");
    let half = config.separation / 2.0;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let l = [labels[0][i], labels[1][i], labels[2][i]];
        let features = (0..config.feature_dim)
            .map(|j| {
                let mean = match config.informs(j) {
                    Some(c) if !corrupted[i] => {
                        if l[c.index()] {
                            half
                        } else {
                            -half
                        }
                    }
                    _ => 0.0,
                };
                mean + noise.sample(&mut rng)
            })
            .collect();
        records.push(ImageRecord {
            image_id: format!("{}-{i:06}", config.edge_id),
            edge_id: config.edge_id.clone(),
            seq_index: i as u64,
            location: destination(config.origin, config.bearing_deg, i as f64 * config.interval_m),
            pixels: None,
            features: Some(features),
            labels: l,
        });
    }
    Ok(records)
}

/// Indices of records whose features were corrupted, recovered from the
/// generator's stream (same config and seed as [`synth_corridor`]).
pub fn synth_corruption_mask(config: &SynthConfig, seed: u64) -> Result<Vec<bool>> {
    config.validate()?;
    let mut rng = crate::seed::stage_rng(seed, "synth-corridor");
    for &r in &config.runs {
        run_length_labels(config.n_points, r, &mut rng);
    }
    Ok(corruption_mask(config.n_points, config.corruption_rate, &mut rng))
}

/// Renders a synthetic `[3, size, size]` frame whose content depends on the
/// labels: horizontal stripes in the lower band of channel 0 (rumble
/// strips), a bright bar across the right half of channel 1 (metal
/// barrier), a solid block on the left of channel 2 (concrete barrier).
/// `occluded` paints a dark box over the middle of the frame.
pub fn render_frame<R: Rng + ?Sized>(labels: Labels, size: usize, occluded: bool, rng: &mut R) -> Tensor {
    let s = size;
    let mut t = Tensor::zeros(&[3, s, s]);
    let d = t.data_mut();
    for v in d.iter_mut() {
        *v = 0.35 + 0.1 * rng.random::<f64>();
    }
    let at = |c: usize, y: usize, x: usize| (c * s + y) * s + x;
    if labels[0] {
        for y in (s * 3 / 4)..s {
            if (y - s * 3 / 4) % 2 == 0 {
                for x in 0..s {
                    d[at(0, y, x)] = 0.9;
                }
            }
        }
    }
    if labels[1] {
        for y in (s / 2)..(s / 2 + s / 8).max(s / 2 + 1) {
            for x in (s / 2)..s {
                d[at(1, y, x)] = 0.95;
            }
        }
    }
    if labels[2] {
        for y in (s / 4)..(s * 3 / 4) {
            for x in 0..(s / 3).max(1) {
                d[at(2, y, x)] = 0.85;
            }
        }
    }
    if occluded {
        for c in 0..3 {
            for y in (s / 8)..(s * 7 / 8) {
                for x in (s / 8)..(s * 7 / 8) {
                    d[at(c, y, x)] = 0.05;
                }
            }
        }
    }
    t
}

/// Attaches rendered frames to every record. Records flagged in `occluded`
/// get the occlusion box.
pub fn render_frames(records: &mut [ImageRecord], size: usize, occluded: Option<&[bool]>, seed: u64) -> Result<()> {
    if size < 4 || size % 4 != 0 {
        return Err(Error::invalid(format!("frame size must be a positive multiple of 4, got {size}")));
    }
    if let Some(o) = occluded {
        if o.len() != records.len() {
            return Err(Error::LengthMismatch {
                left_name: "records",
                left: records.len(),
                right_name: "occlusion mask",
                right: o.len(),
            });
        }
    }
    let mut rng = crate::seed::stage_rng(seed, "synth-frames");
    for (i, r) in records.iter_mut().enumerate() {
        let occ = occluded.is_some_and(|o| o[i]);
        r.pixels = Some(render_frame(r.labels, size, occ, &mut rng));
    }
    Ok(())
}

/// Lengths of maximal constant runs of `value` in `labels`, excluding runs
/// touching either end (those are censored).
pub fn interior_run_lengths(labels: &[bool], value: bool) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        if labels[i] == value && i > 0 && j < labels.len() {
            out.push(j - i);
        }
        i = j;
    }
    out
}

/// Groups records by edge id, preserving order, for reporting.
pub fn edges(records: &[ImageRecord]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.edge_id.as_str()).or_insert(0) += 1;
    }
    m
}
