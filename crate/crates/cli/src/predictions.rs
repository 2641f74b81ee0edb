//! Per-image probability files:
//! `image_id,edge_id,seq_index,lat,lon,p_rs,p_mcb,p_cb`.

use std::io::{Read, Write};

use roadseq::data::ImageRecord;
use roadseq::geo::LatLon;
use roadseq::{Error, Result};

pub const HEADER: [&str; 8] = ["image_id", "edge_id", "seq_index", "lat", "lon", "p_rs", "p_mcb", "p_cb"];

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub edge_id: String,
    pub seq_index: u64,
    pub location: LatLon,
    pub probs: [f64; 3],
}

pub fn from_records(records: &[ImageRecord], probs: &[[f64; 3]]) -> Vec<Prediction> {
    records
        .iter()
        .zip(probs)
        .map(|(r, p)| Prediction {
            image_id: r.image_id.clone(),
            edge_id: r.edge_id.clone(),
            seq_index: r.seq_index,
            location: r.location,
            probs: *p,
        })
        .collect()
}

pub fn write<W: Write>(preds: &[Prediction], writer: W) -> Result<()> {
    let err = |e: csv::Error| Error::InvalidInput(format!("writing predictions: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER).map_err(err)?;
    for p in preds {
        w.write_record([
            p.image_id.clone(),
            p.edge_id.clone(),
            p.seq_index.to_string(),
            p.location.lat.to_string(),
            p.location.lon.to_string(),
            p.probs[0].to_string(),
            p.probs[1].to_string(),
            p.probs[2].to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidInput(format!("writing predictions: {e}")))
}

pub fn read<R: Read>(reader: R, source: &str) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(parse_err(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if row.len() != HEADER.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", HEADER.len(), row.len())));
        }
        let f = |k: usize| -> Result<f64> {
            row[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("{} is not a finite number: {:?}", HEADER[k], &row[k])))
        };
        let probs = [f(5)?, f(6)?, f(7)?];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(parse_err(line, format!("probabilities must lie in [0, 1], got {probs:?}")));
        }
        let seq_index = row[2]
            .parse()
            .map_err(|_| parse_err(line, format!("seq_index is not an integer: {:?}", &row[2])))?;
        let location = LatLon::new(f(3)?, f(4)?).map_err(|e| parse_err(line, e.to_string()))?;
        out.push(Prediction {
            image_id: row[0].to_string(),
            edge_id: row[1].to_string(),
            seq_index,
            location,
            probs,
        });
    }
    out.sort_by(|a, b| (&a.edge_id, a.seq_index).cmp(&(&b.edge_id, b.seq_index)));
    Ok(out)
}
