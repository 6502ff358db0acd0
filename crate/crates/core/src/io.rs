//! File formats: JSON observation streams, calibration results, rig specs,
//! pipeline configs and ground truth, plus the CSV sweep table.
//!
//! JSON floats are written with 17 significant digits so that a
//! write, read, write cycle reproduces the same bytes.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{orthonormality_residual, CameraIntrinsics, Extrinsics, Line2D};
use crate::pipeline::{CalibrationReport, LineObservation, Termination, TraceEntry};
use crate::simulator::SweepCell;

/// Orthonormality tolerance enforced on calibration files.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON at byte offset {offset} (line {line}, column {column}): {message}")]
    Syntax { offset: usize, line: usize, column: usize, message: String },
    #[error("schema error in {}field `{field}`: {message}", record.map(|r| format!("record {r}, ")).unwrap_or_default())]
    Schema { field: String, record: Option<usize>, message: String },
}

impl IoError {
    fn schema(field: impl Into<String>, record: Option<usize>, message: impl ToString) -> Self {
        Self::Schema { field: field.into(), record, message: message.to_string() }
    }
}

/// Pretty printer with fixed 17-significant-digit floats.
#[derive(Default)]
pub struct CanonicalFormatter {
    inner: PrettyFormatter<'static>,
}

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Serialize to canonical JSON bytes (trailing newline included).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter::default());
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    out.push(b'\n');
    out
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Parse JSON text, reporting syntax errors with their byte offset.
pub fn parse_json(text: &str) -> Result<Value, IoError> {
    serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        IoError::Syntax { offset: byte_offset(text, line, column), line, column, message: e.to_string() }
    })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

fn field<'a>(obj: &'a Value, name: &str, record: Option<usize>) -> Result<&'a Value, IoError> {
    obj.get(name).ok_or_else(|| IoError::schema(name, record, "missing"))
}

fn typed<T: DeserializeOwned>(value: &Value, name: &str, record: Option<usize>) -> Result<T, IoError> {
    T::deserialize(value).map_err(|e| IoError::schema(name, record, e))
}

/// Deserialize a whole document with serde defaults, mapping errors.
pub fn from_json_text<T: DeserializeOwned>(text: &str, what: &str) -> Result<T, IoError> {
    let value = parse_json(text)?;
    typed(&value, what, None)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, IoError> {
    from_json_text(&read_text(path)?, what)
}

// ---------------------------------------------------------------- observations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Segment2D {
    endpoints: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObservationRecord {
    id: u64,
    target_2d: Segment2D,
    source_2d: Segment2D,
    target_samples: Option<Vec<[f64; 3]>>,
    source_samples: Vec<[f64; 3]>,
}

#[derive(Serialize)]
struct ObservationFileRef<'a> {
    target_intrinsics: &'a CameraIntrinsics,
    source_intrinsics: &'a CameraIntrinsics,
    observations: Vec<ObservationRecord>,
}

/// Parsed observation file.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFile {
    pub target_intrinsics: CameraIntrinsics,
    pub source_intrinsics: CameraIntrinsics,
    pub observations: Vec<LineObservation>,
}

fn segment(l: &Line2D) -> Segment2D {
    let [a, b] = l.endpoints();
    Segment2D { endpoints: [[a.x, a.y], [b.x, b.y]] }
}

fn arr3(p: &Vector3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

impl ObservationFile {
    pub fn to_json(&self) -> Vec<u8> {
        let observations = self
            .observations
            .iter()
            .map(|o| ObservationRecord {
                id: o.id,
                target_2d: segment(&o.target_2d),
                source_2d: segment(&o.source_2d),
                target_samples: o.target_samples.as_ref().map(|s| s.iter().map(arr3).collect()),
                source_samples: o.source_samples.iter().map(arr3).collect(),
            })
            .collect();
        to_canonical_json(&ObservationFileRef {
            target_intrinsics: &self.target_intrinsics,
            source_intrinsics: &self.source_intrinsics,
            observations,
        })
    }

    /// Parse and validate; schema errors name the field and record index.
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let doc = parse_json(text)?;
        let intrinsics = |name: &str| -> Result<CameraIntrinsics, IoError> {
            let k: CameraIntrinsics = typed(field(&doc, name, None)?, name, None)?;
            k.validate().map_err(|e| IoError::schema(name, None, e))?;
            Ok(k)
        };
        let target_intrinsics = intrinsics("target_intrinsics")?;
        let source_intrinsics = intrinsics("source_intrinsics")?;
        let records = field(&doc, "observations", None)?
            .as_array()
            .ok_or_else(|| IoError::schema("observations", None, "expected an array"))?;
        let mut observations = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let r = Some(i);
            let id: u64 = typed(field(rec, "id", r)?, "id", r)?;
            let line = |name: &str| -> Result<Line2D, IoError> {
                let seg: Segment2D = typed(field(rec, name, r)?, name, r)?;
                let [a, b] = seg.endpoints.map(|p| Vector2::new(p[0], p[1]));
                Line2D::from_endpoints(a, b).map_err(|e| IoError::schema(format!("{name}.endpoints"), r, e))
            };
            let target_2d = line("target_2d")?;
            let source_2d = line("source_2d")?;
            let samples = |name: &str, v: &Value| -> Result<Vec<Vector3<f64>>, IoError> {
                let pts: Vec<[f64; 3]> = typed(v, name, r)?;
                if pts.len() < 2 {
                    return Err(IoError::schema(name, r, format!("{} samples, need at least 2", pts.len())));
                }
                Ok(pts.into_iter().map(Vector3::from).collect())
            };
            let source_samples = samples("source_samples", field(rec, "source_samples", r)?)?;
            let target_samples = match rec.get("target_samples") {
                None | Some(Value::Null) => None,
                Some(v) => Some(samples("target_samples", v)?),
            };
            observations.push(LineObservation { id, target_2d, source_2d, target_samples, source_samples });
        }
        Ok(Self { target_intrinsics, source_intrinsics, observations })
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::from_json(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        write_bytes(path, &self.to_json())
    }
}

// ---------------------------------------------------------------- calibration

/// Serialized calibration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub rotation: [[f64; 3]; 3],
    pub translation_m: [f64; 3],
    pub cgr: Option<[f64; 3]>,
    pub final_cost: Option<f64>,
    pub termination: Termination,
    pub accepted_pair_count: usize,
    pub voting_inlier_count: usize,
    pub inlier_ids: Vec<u64>,
    pub trace: Vec<TraceEntry>,
}

impl CalibrationFile {
    pub fn from_report(rep: &CalibrationReport) -> Self {
        let r = rep.extrinsics.rotation();
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation_m: arr3(rep.extrinsics.translation()),
            cgr: rep.cgr.map(|s| arr3(&s.0)),
            final_cost: rep.final_cost,
            termination: rep.termination,
            accepted_pair_count: rep.accepted_pair_count,
            voting_inlier_count: rep.voting_inlier_count,
            inlier_ids: rep.inlier_ids.clone(),
            trace: rep.trace.clone(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn extrinsics(&self) -> Result<Extrinsics, IoError> {
        self.check_rotation()?;
        Extrinsics::new(self.rotation_matrix(), Vector3::from(self.translation_m))
            .map_err(|e| IoError::schema("rotation", None, e))
    }

    fn check_rotation(&self) -> Result<(), IoError> {
        let r = self.rotation_matrix();
        let residual = orthonormality_residual(&r);
        if !(residual <= ROTATION_TOLERANCE) || !((r.determinant() - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(IoError::schema(
                "rotation",
                None,
                format!("not a rotation (orthonormality residual {residual:e}, det {})", r.determinant()),
            ));
        }
        Ok(())
    }

    /// Canonical JSON; refuses to emit a non-orthonormal rotation.
    pub fn to_json(&self) -> Result<Vec<u8>, IoError> {
        self.check_rotation()?;
        Ok(to_canonical_json(self))
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let file: Self = from_json_text(text, "calibration")?;
        file.check_rotation()?;
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::from_json(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        write_bytes(path, &self.to_json()?)
    }
}

// ---------------------------------------------------------------- sweep table

pub const SWEEP_CSV_HEADER: &str = "rotation_deg,baseline_m,seed,rot_err_deg,trans_err_mm,converged";

/// CSV table of sweep cells; missing errors are left empty.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.rotation_deg,
            c.baseline_m,
            c.seed,
            opt(c.rot_err_deg),
            opt(c.trans_err_mm),
            c.converged
        ));
    }
    out
}
