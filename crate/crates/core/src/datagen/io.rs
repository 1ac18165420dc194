use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detections::{query_features, DetectionSample};
use super::BevExtent;
use crate::scene::{Centerline, Lane, SceneGraph, TrafficElement};

pub const FORMAT_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    /// Echo of the configuration that produced the file.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectedElementRecord {
    bbox: [f64; 4],
    category: crate::scene::ElementCategory,
    confidence: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsRecord {
    centerlines: Vec<Centerline>,
    assignment: Vec<Option<usize>>,
    feature_seed: u64,
    feature_dim: usize,
    traffic_elements: Vec<DetectedElementRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene_id: String,
    extent: [f64; 2],
    lanes: Vec<Lane>,
    edges: Vec<[usize; 2]>,
    traffic_elements: Vec<TrafficElement>,
    detections: DetectionsRecord,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is empty: missing header line")]
    MissingHeader,
    #[error("unsupported dataset format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("line {line}: cannot decode field `{field}`: {message}")]
    Decode {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

impl From<&DetectionSample> for Record {
    fn from(s: &DetectionSample) -> Self {
        Record {
            scene_id: s.scene_id.clone(),
            extent: [s.extent.x_range, s.extent.y_range],
            lanes: s.scene.lanes.clone(),
            edges: s.scene.edges.iter().map(|&(i, j)| [i, j]).collect(),
            traffic_elements: s.traffic_elements.clone(),
            detections: DetectionsRecord {
                centerlines: s.pred_centerlines.clone(),
                assignment: s.assignment.clone(),
                feature_seed: s.feature_seed,
                feature_dim: s.feature_dim(),
                traffic_elements: s
                    .detected_elements
                    .iter()
                    .map(|(e, c)| DetectedElementRecord {
                        bbox: e.bbox,
                        category: e.category,
                        confidence: *c,
                    })
                    .collect(),
            },
        }
    }
}

fn into_sample(r: Record, line: usize) -> Result<DetectionSample, DatasetError> {
    let invalid = |message: String| DatasetError::Invalid { line, message };
    let d = r.detections;
    if d.assignment.len() != d.centerlines.len() {
        return Err(invalid(format!(
            "detections.assignment has {} entries for {} centerlines",
            d.assignment.len(),
            d.centerlines.len()
        )));
    }
    if let Some(g) = d.assignment.iter().flatten().find(|&&g| g >= r.lanes.len()) {
        return Err(invalid(format!("detections.assignment refers to missing lane {g}")));
    }
    let width = d.centerlines.first().map_or(0, Centerline::len);
    if d.centerlines.iter().any(|c| c.len() != width || c.is_empty()) {
        return Err(invalid("detections.centerlines have unequal point counts".into()));
    }
    let extent = BevExtent {
        x_range: r.extent[0],
        y_range: r.extent[1],
    };
    let queries = query_features(&d.centerlines, &extent, d.feature_seed, d.feature_dim);
    Ok(DetectionSample {
        scene_id: r.scene_id,
        scene: SceneGraph::new(
            r.lanes,
            r.edges.into_iter().map(|[i, j]| (i, j)).collect::<BTreeSet<_>>(),
        ),
        traffic_elements: r.traffic_elements,
        extent,
        queries,
        pred_centerlines: d.centerlines,
        assignment: d.assignment,
        detected_elements: d
            .traffic_elements
            .into_iter()
            .map(|e| {
                (
                    TrafficElement {
                        bbox: e.bbox,
                        category: e.category,
                    },
                    e.confidence,
                )
            })
            .collect(),
        feature_seed: d.feature_seed,
    })
}

/// Writes a header line followed by one JSON record per sample.
pub fn write_dataset(
    samples: &[DetectionSample],
    config: &serde_json::Value,
    path: &Path,
) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        config: config.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut w, &Record::from(s)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn decode<T: serde::de::DeserializeOwned>(text: &str, line: usize) -> Result<T, DatasetError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| DatasetError::Decode {
        line,
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn parse_header(text: &str) -> Result<DatasetHeader, DatasetError> {
    // Check the version before anything else so old files fail clearly.
    let raw: serde_json::Value = decode(text, 1)?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| DatasetError::Decode {
            line: 1,
            field: "format_version".into(),
            message: "missing or not an integer".into(),
        })?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(DatasetError::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    decode(text, 1)
}

pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let first = reader.lines().next().ok_or(DatasetError::MissingHeader)??;
    parse_header(&first)
}

/// Reads every record; errors carry the 1-based line number and the JSON
/// path of the offending field.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DetectionSample>), DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = parse_header(&lines.next().ok_or(DatasetError::MissingHeader)??)?;
    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Record = decode(&text, line_no)?;
        samples.push(into_sample(record, line_no)?);
    }
    Ok((header, samples))
}
