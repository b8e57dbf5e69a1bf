//! File formats: raw volumes and images with a JSON sidecar header, pose
//! records, point sets, 16-bit PGM export and result CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::pipeline::{ErrorStats, Summary, SCATTER_CLIP_MM};
use crate::projector::Image2D;
use crate::volume::{SurfacePointSet, Volume};

pub const POSE_FRAME: &str = "camera_from_volume";

/// Formats with 17 significant digits, enough for an exact f64 roundtrip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    dims: Vec<usize>,
    spacing: Option<[f64; 3]>,
    origin: Option<[f64; 3]>,
    dtype: String,
    byte_order: String,
    payload: String,
}

fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn parse_header(path: &Path, dtype: &str, rank: usize) -> Result<(RawHeader, PathBuf)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let header: RawHeader = serde_json::from_slice(&read(path)?).map_err(|e| malformed(e.to_string()))?;
    if header.byte_order != "little" {
        return Err(Error::ByteOrderMismatch {
            path: path.to_path_buf(),
            found: header.byte_order,
        });
    }
    if header.dtype != dtype {
        return Err(malformed(format!("dtype '{}' (expected '{dtype}')", header.dtype)));
    }
    if header.dims.len() != rank || header.dims.contains(&0) {
        return Err(malformed(format!("dims must be {rank} positive integers")));
    }
    let payload = path.parent().unwrap_or(Path::new("")).join(&header.payload);
    Ok((header, payload))
}

fn check_payload_len(path: &Path, expected: usize, actual: usize) -> Result<()> {
    if actual < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::DimensionMismatch {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes the JSON header to `path` and the little-endian f32 payload next
/// to it with the extension `.raw`.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let payload = payload_path(path);
    let header = RawHeader {
        dims: v.dims().to_vec(),
        spacing: Some(v.spacing()),
        origin: Some(v.origin().into()),
        dtype: "f32".into(),
        byte_order: "little".into(),
        payload: file_name(&payload),
    };
    let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write(&payload, &bytes)?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    write(path, text.as_bytes())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = parse_header(path, "f32", 3)?;
    let (Some(spacing), Some(origin)) = (header.spacing, header.origin) else {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "spacing and origin are required".into(),
        });
    };
    let dims = [header.dims[0], header.dims[1], header.dims[2]];
    let bytes = read(&payload)?;
    check_payload_len(&payload, 4 * dims.iter().product::<usize>(), bytes.len())?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, spacing, Vector3::from(origin), data)
}

/// Same layout as volumes, two dims and f64 samples.
pub fn save_image(path: &Path, img: &Image2D) -> Result<()> {
    let payload = payload_path(path);
    let header = RawHeader {
        dims: vec![img.width(), img.height()],
        spacing: None,
        origin: None,
        dtype: "f64".into(),
        byte_order: "little".into(),
        payload: file_name(&payload),
    };
    let bytes: Vec<u8> = img.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write(&payload, &bytes)?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    write(path, text.as_bytes())
}

pub fn load_image(path: &Path) -> Result<Image2D> {
    let (header, payload) = parse_header(path, "f64", 2)?;
    let (w, h) = (header.dims[0], header.dims[1]);
    let bytes = read(&payload)?;
    check_payload_len(&payload, 8 * w * h, bytes.len())?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Image2D::new(w, h, data)
}

fn json_array(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|x| fmt_f64(*x)).collect();
    format!("[{}]", items.join(","))
}

/// Single-line JSON object for a pose: frame tag, row-major rotation and
/// translation (mm), every number with 17 significant digits.
pub fn pose_to_json(t: &RigidTransform) -> String {
    let r = t.rotation();
    let rotation: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
    let translation: Vec<f64> = t.translation().iter().copied().collect();
    format!(
        "{{\"frame\":\"{POSE_FRAME}\",\"rotation\":{},\"translation\":{}}}",
        json_array(&rotation),
        json_array(&translation)
    )
}

/// Parses the object written by [`pose_to_json`]; `path` is only used in
/// error messages.
pub fn pose_from_value(value: &Value, path: &Path) -> Result<RigidTransform> {
    let malformed = |reason: &str| Error::MalformedPose {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if value.get("frame").and_then(Value::as_str) != Some(POSE_FRAME) {
        return Err(malformed("frame must be \"camera_from_volume\""));
    }
    let numbers = |key: &str, n: usize| -> Result<Vec<f64>> {
        let arr = value
            .get(key)
            .and_then(Value::as_array)
            .filter(|a| a.len() == n)
            .ok_or_else(|| malformed(&format!("{key} must be an array of {n} numbers")))?;
        arr.iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed(&format!("{key} holds a non-number"))))
            .collect()
    };
    let r = numbers("rotation", 9)?;
    let t = numbers("translation", 3)?;
    RigidTransform::new(Matrix3::from_row_slice(&r), Vector3::from_column_slice(&t))
        .map_err(|e| malformed(&e.to_string()))
}

pub fn write_pose(path: &Path, t: &RigidTransform) -> Result<()> {
    write(path, format!("{}\n", pose_to_json(t)).as_bytes())
}

pub fn read_pose(path: &Path) -> Result<RigidTransform> {
    let value: Value = serde_json::from_slice(&read(path)?).map_err(|e| Error::MalformedPose {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    pose_from_value(&value, path)
}

#[derive(Serialize, Deserialize)]
struct PointSetFile {
    points: Vec<[f64; 3]>,
    gradients: Vec<[f64; 3]>,
}

pub fn save_point_set(path: &Path, s: &SurfacePointSet) -> Result<()> {
    let file = PointSetFile {
        points: s.points().iter().map(|p| (*p).into()).collect(),
        gradients: s.gradients().iter().map(|g| (*g).into()).collect(),
    };
    write(path, serde_json::to_string(&file).expect("point set serializes").as_bytes())
}

pub fn load_point_set(path: &Path) -> Result<SurfacePointSet> {
    let file: PointSetFile = serde_json::from_slice(&read(path)?).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    SurfacePointSet::new(
        file.points.into_iter().map(Vector3::from).collect(),
        file.gradients.into_iter().map(Vector3::from).collect(),
    )
}

/// Binary 16-bit PGM with values min-max scaled to [0, 65535]; a constant
/// image maps to 0.
pub fn export_image_pgm(img: &Image2D, path: &Path) -> Result<()> {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let mut bytes = format!("P5 {} {} 65535\n", img.width(), img.height()).into_bytes();
    for &x in img.data() {
        let v = if range > 0.0 {
            ((x - lo) / range * 65535.0).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write(path, &bytes)
}

pub const SUMMARY_HEADER: &str = "name,p50,p75,p95,mtre_mean,mtre_std,rf_mean,rf_std";
pub const SAMPLES_HEADER: &str =
    "sample_id,view_id,seed,mtre_before,mtre_after_clipped50,mtre_after_raw";

/// Identifiers of one evaluated sample, aligned with `Summary::pairs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleKey {
    pub sample_id: usize,
    pub view_id: usize,
    pub seed: u64,
}

fn stats_fields(s: &ErrorStats) -> String {
    [s.p50, s.p75, s.p95, s.mean, s.std]
        .iter()
        .map(|x| fmt_f64(*x))
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes the summary table (an `initial` row and a row named `name`) and
/// the per-sample scatter table.
pub fn export_results_csv(
    name: &str,
    summary: &Summary,
    keys: &[SampleKey],
    summary_path: &Path,
    samples_path: &Path,
) -> Result<()> {
    if keys.len() != summary.pairs.len() {
        return Err(Error::InvalidArgument("one sample key per result pair is required".into()));
    }
    let text = format!(
        "{SUMMARY_HEADER}\ninitial,{},,\n{name},{},{},{}\n",
        stats_fields(&summary.initial),
        stats_fields(&summary.final_mtre),
        fmt_f64(summary.reduction_mean),
        fmt_f64(summary.reduction_std),
    );
    write(summary_path, text.as_bytes())?;
    let mut rows = format!("{SAMPLES_HEADER}\n");
    for (k, &(before, after)) in keys.iter().zip(&summary.pairs) {
        rows.push_str(&format!(
            "{},{},{},{},{},{}\n",
            k.sample_id,
            k.view_id,
            k.seed,
            fmt_f64(before),
            fmt_f64(after.min(SCATTER_CLIP_MM)),
            fmt_f64(after),
        ));
    }
    write(samples_path, rows.as_bytes())
}
