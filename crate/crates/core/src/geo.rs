//! Road networks, haversine geometry, equal-interval sampling, street-level
//! imagery request URLs and GeoJSON prediction maps.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Chainages within this many meters past the edge end still count as on-grid.
const GRID_SLACK_M: f64 = 1e-6;

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = LatLon { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::invalid(format!(
                "coordinate out of range: lat={lat}, lon={lon}"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial bearing from `a` towards `b`, degrees clockwise from north in [0, 360).
pub fn initial_bearing_deg(a: LatLon, b: LatLon) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    normalize_heading(y.atan2(x).to_degrees())
}

/// Point reached by travelling `distance_m` along a great circle from `start`.
pub fn destination(start: LatLon, bearing_deg: f64, distance_m: f64) -> LatLon {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let phi1 = start.lat.to_radians();
    let lambda1 = start.lon.to_radians();
    let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos()).asin();
    let lambda2 = lambda1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
    let lon = (lambda2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    LatLon {
        lat: phi2.to_degrees(),
        lon,
    }
}

fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// A road segment between two intersections, stored as a polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadEdge {
    id: String,
    from: usize,
    to: usize,
    polyline: Vec<LatLon>,
    /// Cumulative haversine length at each vertex; last entry is the edge length.
    cumulative_m: Vec<f64>,
}

impl RoadEdge {
    fn new(id: String, from: usize, to: usize, polyline: Vec<LatLon>) -> Result<Self> {
        if polyline.len() < 2 {
            return Err(Error::invalid(format!(
                "edge {id}: polyline needs at least 2 vertices, got {}",
                polyline.len()
            )));
        }
        if let Some(p) = polyline.iter().find(|p| !p.is_valid()) {
            return Err(Error::invalid(format!(
                "edge {id}: coordinate out of range: lat={}, lon={}",
                p.lat, p.lon
            )));
        }
        let mut cumulative_m = Vec::with_capacity(polyline.len());
        let mut acc = 0.0;
        cumulative_m.push(0.0);
        for w in polyline.windows(2) {
            acc += haversine_m(w[0], w[1]);
            cumulative_m.push(acc);
        }
        Ok(RoadEdge {
            id,
            from,
            to,
            polyline,
            cumulative_m,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Index of the start node in [`RoadNetwork::nodes`].
    pub fn from_node(&self) -> usize {
        self.from
    }

    /// Index of the end node in [`RoadNetwork::nodes`].
    pub fn to_node(&self) -> usize {
        self.to
    }

    pub fn polyline(&self) -> &[LatLon] {
        &self.polyline
    }

    pub fn length_m(&self) -> f64 {
        *self.cumulative_m.last().expect("polyline has >= 2 vertices")
    }

    /// Location and direction of travel at `chainage_m` meters from the edge
    /// start, interpolating linearly in latitude/longitude within a segment.
    /// Chainages outside `[0, length]` are clamped.
    pub fn locate(&self, chainage_m: f64) -> (LatLon, f64) {
        let ch = chainage_m.clamp(0.0, self.length_m());
        // Last segment whose start chainage is <= ch, skipping zero-length segments.
        let mut seg = self
            .cumulative_m
            .partition_point(|&c| c <= ch)
            .saturating_sub(1)
            .min(self.polyline.len() - 2);
        while seg > 0 && self.cumulative_m[seg + 1] - self.cumulative_m[seg] <= 0.0 {
            seg -= 1;
        }
        let (a, b) = (self.polyline[seg], self.polyline[seg + 1]);
        let seg_len = self.cumulative_m[seg + 1] - self.cumulative_m[seg];
        let t = if seg_len > 0.0 {
            ((ch - self.cumulative_m[seg]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let loc = LatLon {
            lat: a.lat + t * (b.lat - a.lat),
            lon: a.lon + t * (b.lon - a.lon),
        };
        (loc, initial_bearing_deg(a, b))
    }
}

/// Road graph whose nodes are intersections and whose edges are polylines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoadNetwork {
    nodes: Vec<LatLon>,
    edges: Vec<RoadEdge>,
}

impl RoadNetwork {
    /// Builds a network from `(edge id, polyline)` pairs. Polyline endpoints
    /// with identical coordinates are merged into one node.
    pub fn from_polylines<I, S>(polylines: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<LatLon>)>,
        S: Into<String>,
    {
        let mut nodes: Vec<LatLon> = Vec::new();
        let node_of = |p: LatLon, nodes: &mut Vec<LatLon>| -> usize {
            match nodes.iter().position(|n| n.lat == p.lat && n.lon == p.lon) {
                Some(i) => i,
                None => {
                    nodes.push(p);
                    nodes.len() - 1
                }
            }
        };
        let mut edges = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (id, polyline) in polylines {
            let id = id.into();
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate edge id {id}")));
            }
            if polyline.len() < 2 {
                return Err(Error::invalid(format!(
                    "edge {id}: polyline needs at least 2 vertices, got {}",
                    polyline.len()
                )));
            }
            let from = node_of(polyline[0], &mut nodes);
            let to = node_of(*polyline.last().unwrap(), &mut nodes);
            edges.push(RoadEdge::new(id, from, to, polyline)?);
        }
        Ok(RoadNetwork { nodes, edges })
    }

    /// Parses a GeoJSON FeatureCollection of LineString features, each
    /// carrying an `id` property (string or integer).
    pub fn from_geojson(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("road network GeoJSON: {e}")))?;
        if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(Error::invalid(
                "road network GeoJSON: expected a FeatureCollection",
            ));
        }
        let features = doc
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::invalid("road network GeoJSON: missing features array"))?;
        let mut polylines = Vec::with_capacity(features.len());
        for (k, feature) in features.iter().enumerate() {
            let ctx = |msg: &str| Error::invalid(format!("road network feature {k}: {msg}"));
            let id = match feature.pointer("/properties/id") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => return Err(ctx("missing \"id\" property")),
            };
            let geometry = feature
                .get("geometry")
                .ok_or_else(|| ctx("missing geometry"))?;
            if geometry.get("type").and_then(Value::as_str) != Some("LineString") {
                return Err(ctx("geometry is not a LineString"));
            }
            let coords = geometry
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or_else(|| ctx("missing coordinates"))?;
            let mut line = Vec::with_capacity(coords.len());
            for c in coords {
                let pair = c
                    .as_array()
                    .filter(|a| a.len() >= 2)
                    .ok_or_else(|| ctx("coordinate is not a [lon, lat] pair"))?;
                let lon = pair[0].as_f64().ok_or_else(|| ctx("non-numeric lon"))?;
                let lat = pair[1].as_f64().ok_or_else(|| ctx("non-numeric lat"))?;
                line.push(LatLon::new(lat, lon)?);
            }
            polylines.push((id, line));
        }
        Self::from_polylines(polylines)
    }

    pub fn nodes(&self) -> &[LatLon] {
        &self.nodes
    }

    pub fn edges(&self) -> &[RoadEdge] {
        &self.edges
    }
}

/// An equally spaced point along one road edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub edge_id: String,
    pub seq_index: u64,
    pub chainage_m: f64,
    pub location: LatLon,
    /// Local direction of travel, degrees clockwise from north.
    pub heading_deg: f64,
}

fn check_interval(interval_m: f64) -> Result<()> {
    if interval_m.is_finite() && interval_m > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "sampling interval must be positive, got {interval_m}"
        )))
    }
}

/// Number of on-grid chainages `0, interval, 2*interval, ...` not past `length_m`.
pub fn grid_count(length_m: f64, interval_m: f64) -> u64 {
    ((length_m + GRID_SLACK_M) / interval_m).floor() as u64 + 1
}

/// Samples one edge at chainages `0, interval, 2*interval, ...`.
pub fn sample_edge(edge: &RoadEdge, interval_m: f64) -> Result<Vec<SamplePoint>> {
    check_interval(interval_m)?;
    let n = grid_count(edge.length_m(), interval_m);
    Ok((0..n)
        .map(|k| {
            let chainage_m = k as f64 * interval_m;
            let (location, heading_deg) = edge.locate(chainage_m);
            SamplePoint {
                edge_id: edge.id.clone(),
                seq_index: k,
                chainage_m,
                location,
                heading_deg,
            }
        })
        .collect())
}

/// Samples every edge independently; output is ordered by edge, then chainage.
pub fn sample_points(network: &RoadNetwork, interval_m: f64) -> Result<Vec<SamplePoint>> {
    check_interval(interval_m)?;
    let mut out = Vec::new();
    for edge in &network.edges {
        out.extend(sample_edge(edge, interval_m)?);
    }
    Ok(out)
}

const STREETVIEW_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/streetview";

/// Builds a Street View Static API request for one sample location. No
/// network I/O is performed.
pub fn streetview_request_url(
    location: LatLon,
    heading_deg: f64,
    image_size: (u32, u32),
    key: &str,
) -> Result<String> {
    if key.is_empty() {
        return Err(Error::invalid("streetview API key is empty"));
    }
    if !location.is_valid() {
        return Err(Error::invalid(format!(
            "coordinate out of range: lat={}, lon={}",
            location.lat, location.lon
        )));
    }
    if !(heading_deg.is_finite() && (0.0..360.0).contains(&heading_deg)) {
        return Err(Error::invalid(format!(
            "heading must be in [0, 360), got {heading_deg}"
        )));
    }
    let (w, h) = image_size;
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!("image size must be positive, got {w}x{h}")));
    }
    let key: String = url::form_urlencoded::byte_serialize(key.as_bytes()).collect();
    Ok(format!(
        "{STREETVIEW_ENDPOINT}?size={w}x{h}&location={:.6},{:.6}&heading={}&key={key}",
        location.lat,
        location.lon,
        format_heading(heading_deg)
    ))
}

/// Heading with at most two decimals and no trailing zeros (`90`, `45.5`).
fn format_heading(deg: f64) -> String {
    let s = format!("{:.2}", deg);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

pub(crate) fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Writes a prediction map: a FeatureCollection of Point features carrying
/// per-class probabilities and thresholded labels.
///
/// Coordinates, chainages and probabilities are rounded to 6 decimals, keys
/// are sorted, and labels are derived from the rounded probabilities
/// (`p > threshold`), so re-exporting a parsed map reproduces it byte for
/// byte.
pub fn export_prediction_geojson(
    points: &[SamplePoint],
    probabilities: &[[f64; 3]],
    threshold: f64,
) -> Result<String> {
    if points.len() != probabilities.len() {
        return Err(Error::LengthMismatch {
            left_name: "points",
            left: points.len(),
            right_name: "probabilities",
            right: probabilities.len(),
        });
    }
    if !(threshold.is_finite() && (0.0..=1.0).contains(&threshold)) {
        return Err(Error::invalid(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let mut features = Vec::with_capacity(points.len());
    for (p, probs) in points.iter().zip(probabilities) {
        if let Some(bad) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "probability {bad} outside [0, 1] at {}#{}",
                p.edge_id, p.seq_index
            )));
        }
        let mut props = Map::new();
        props.insert("edge_id".into(), json!(p.edge_id));
        props.insert("seq_index".into(), json!(p.seq_index));
        props.insert("chainage_m".into(), json!(round6(p.chainage_m)));
        for class in crate::Class::ALL {
            let prob = round6(probs[class.index()]);
            props.insert(format!("p_{}", class.key()), json!(prob));
            props.insert(class.key().into(), json!(prob > threshold));
        }
        features.push(json!({
            "type": "Feature",
            "geometry": {
                "type": "Point",
                "coordinates": [round6(p.location.lon), round6(p.location.lat)],
            },
            "properties": Value::Object(props),
        }));
    }
    let doc = json!({
        "type": "FeatureCollection",
        "threshold": threshold,
        "features": features,
    });
    Ok(serde_json::to_string(&doc).expect("JSON values always serialize"))
}

/// A parsed prediction map.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub threshold: f64,
    pub points: Vec<SamplePoint>,
    pub probabilities: Vec<[f64; 3]>,
    pub labels: Vec<crate::Labels>,
}

/// Parses a document written by [`export_prediction_geojson`].
pub fn parse_prediction_geojson(text: &str) -> Result<PredictionMap> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| Error::invalid(format!("prediction GeoJSON: {e}")))?;
    let threshold = doc
        .get("threshold")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::invalid("prediction GeoJSON: missing threshold"))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::invalid("prediction GeoJSON: missing features"))?;
    let mut map = PredictionMap {
        threshold,
        points: Vec::with_capacity(features.len()),
        probabilities: Vec::with_capacity(features.len()),
        labels: Vec::with_capacity(features.len()),
    };
    for (k, f) in features.iter().enumerate() {
        let ctx = |what: &str| Error::invalid(format!("prediction feature {k}: bad {what}"));
        let props: BTreeMap<String, Value> = f
            .get("properties")
            .and_then(Value::as_object)
            .map(|m| m.clone().into_iter().collect())
            .ok_or_else(|| ctx("properties"))?;
        let num = |key: &str| props.get(key).and_then(Value::as_f64).ok_or_else(|| ctx(key));
        let coords = f
            .pointer("/geometry/coordinates")
            .and_then(Value::as_array)
            .filter(|c| c.len() == 2)
            .ok_or_else(|| ctx("coordinates"))?;
        let lon = coords[0].as_f64().ok_or_else(|| ctx("lon"))?;
        let lat = coords[1].as_f64().ok_or_else(|| ctx("lat"))?;
        map.points.push(SamplePoint {
            edge_id: props
                .get("edge_id")
                .and_then(Value::as_str)
                .ok_or_else(|| ctx("edge_id"))?
                .to_string(),
            seq_index: props
                .get("seq_index")
                .and_then(Value::as_u64)
                .ok_or_else(|| ctx("seq_index"))?,
            chainage_m: num("chainage_m")?,
            location: LatLon::new(lat, lon)?,
            heading_deg: 0.0,
        });
        let mut probs = [0.0; 3];
        let mut labels = [false; 3];
        for class in crate::Class::ALL {
            probs[class.index()] = num(&format!("p_{}", class.key()))?;
            labels[class.index()] = props
                .get(class.key())
                .and_then(Value::as_bool)
                .ok_or_else(|| ctx(class.key()))?;
        }
        map.probabilities.push(probs);
        map.labels.push(labels);
    }
    Ok(map)
}

/// Writes sample points as CSV: `edge_id,seq_index,chainage_m,lat,lon,heading_deg`.
pub fn write_sample_points<W: Write>(points: &[SamplePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::invalid(format!("writing sample points: {e}"));
    w.write_record(["edge_id", "seq_index", "chainage_m", "lat", "lon", "heading_deg"])
        .map_err(to_err)?;
    for p in points {
        w.write_record([
            p.edge_id.clone(),
            p.seq_index.to_string(),
            format!("{:.6}", p.chainage_m),
            format!("{:.6}", p.location.lat),
            format!("{:.6}", p.location.lon),
            format!("{:.2}", p.heading_deg),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("writing sample points: {e}")))
}

/// Reads the CSV written by [`write_sample_points`].
pub fn read_sample_points<R: Read>(reader: R, source: &str) -> Result<Vec<SamplePoint>> {
    #[derive(Deserialize)]
    struct Row {
        edge_id: String,
        seq_index: u64,
        chainage_m: f64,
        lat: f64,
        lon: f64,
        heading_deg: f64,
    }
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (k, row) in r.deserialize::<Row>().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::Parse {
            path: source.to_string(),
            line,
            message: e.to_string(),
        })?;
        let location = LatLon::new(row.lat, row.lon).map_err(|e| Error::Parse {
            path: source.to_string(),
            line,
            message: e.to_string(),
        })?;
        out.push(SamplePoint {
            edge_id: row.edge_id,
            seq_index: row.seq_index,
            chainage_m: row.chainage_m,
            location,
            heading_deg: normalize_heading(row.heading_deg),
        });
    }
    Ok(out)
}
