//! Sensor calibration metadata.
//!
//! A [`SensorIntrinsics`] carries exactly what scan assembly and projection
//! need: per-beam altitude/azimuth tables, the optics offset of the emitter
//! from the sensor origin, per-row destagger shifts and the raw range unit.
//! Row 0 of every image is beam 0.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Default tolerance on the dome altitude range `[0°, 90°]`.
pub const DEFAULT_ALTITUDE_SLACK_DEG: f64 = 5.0;

const REQUIRED_FIELDS: [&str; 8] = [
    "beam_count",
    "scan_width",
    "beam_altitude_deg",
    "beam_azimuth_deg",
    "origin_to_optics_x_mm",
    "origin_to_optics_z_mm",
    "pixel_shift_by_row",
    "range_unit_mm",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetadataError {
    #[error("malformed metadata document: {0}")]
    Malformed(String),
    #[error("schema violation in `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("invariant violated by `{field}`: {reason}")]
    InvariantViolation { field: String, reason: String },
}

impl MetadataError {
    /// Name of the offending field, if the error concerns one.
    pub fn field(&self) -> Option<&str> {
        match self {
            MetadataError::Malformed(_) => None,
            MetadataError::SchemaViolation { field, .. }
            | MetadataError::InvariantViolation { field, .. } => Some(field),
        }
    }

    fn invariant(field: &str, reason: impl Into<String>) -> Self {
        MetadataError::InvariantViolation {
            field: field.to_owned(),
            reason: reason.into(),
        }
    }
}

/// Per-beam angles, optics offsets and scan geometry of a dome sensor.
///
/// Immutable once validated; share freely across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorIntrinsics {
    pub beam_count: usize,
    pub scan_width: usize,
    pub beam_altitude_deg: Vec<f64>,
    pub beam_azimuth_deg: Vec<f64>,
    pub origin_to_optics_x_mm: f64,
    pub origin_to_optics_z_mm: f64,
    pub pixel_shift_by_row: Vec<i32>,
    pub range_unit_mm: f64,
}

impl SensorIntrinsics {
    /// A dome with altitudes spaced `90 / beam_count` degrees apart, beam 0 at
    /// the zenith, no azimuth corrections, no optics offset and no destagger
    /// shifts.
    pub fn uniform_dome(beam_count: usize, scan_width: usize) -> Self {
        let step = 90.0 / beam_count as f64;
        Self {
            beam_count,
            scan_width,
            beam_altitude_deg: (0..beam_count).map(|b| 90.0 - b as f64 * step).collect(),
            beam_azimuth_deg: vec![0.0; beam_count],
            origin_to_optics_x_mm: 0.0,
            origin_to_optics_z_mm: 0.0,
            pixel_shift_by_row: vec![0; beam_count],
            range_unit_mm: 1.0,
        }
    }

    /// `|n| = sqrt(x_n² + z_n²)`, the emitter distance from the sensor origin
    /// in millimeters.
    pub fn optics_offset_mm(&self) -> f64 {
        self.origin_to_optics_x_mm.hypot(self.origin_to_optics_z_mm)
    }

    pub fn validate(&self) -> Result<(), MetadataError> {
        self.validate_with(DEFAULT_ALTITUDE_SLACK_DEG)
    }

    pub fn validate_with(&self, altitude_slack_deg: f64) -> Result<(), MetadataError> {
        if self.beam_count == 0 || self.beam_count > u16::MAX as usize {
            return Err(MetadataError::invariant(
                "beam_count",
                format!("{} not in 1..=65535", self.beam_count),
            ));
        }
        // measurement ids travel as u16
        if self.scan_width == 0 || self.scan_width > u16::MAX as usize + 1 {
            return Err(MetadataError::invariant(
                "scan_width",
                format!("{} not in 1..=65536", self.scan_width),
            ));
        }
        let tables: [(&str, usize); 3] = [
            ("beam_altitude_deg", self.beam_altitude_deg.len()),
            ("beam_azimuth_deg", self.beam_azimuth_deg.len()),
            ("pixel_shift_by_row", self.pixel_shift_by_row.len()),
        ];
        for (field, len) in tables {
            if len != self.beam_count {
                return Err(MetadataError::invariant(
                    field,
                    format!("{len} entries, beam_count is {}", self.beam_count),
                ));
            }
        }
        let lo = -altitude_slack_deg;
        let hi = 90.0 + altitude_slack_deg;
        if let Some((b, a)) = self
            .beam_altitude_deg
            .iter()
            .enumerate()
            .find(|(_, a)| !a.is_finite() || **a < lo || **a > hi)
        {
            return Err(MetadataError::invariant(
                "beam_altitude_deg",
                format!("beam {b} altitude {a} outside [{lo}, {hi}]"),
            ));
        }
        if let Some((b, a)) = self
            .beam_azimuth_deg
            .iter()
            .enumerate()
            .find(|(_, a)| !a.is_finite())
        {
            return Err(MetadataError::invariant(
                "beam_azimuth_deg",
                format!("beam {b} azimuth {a} is not finite"),
            ));
        }
        if let Some((b, s)) = self
            .pixel_shift_by_row
            .iter()
            .enumerate()
            .find(|(_, s)| s.unsigned_abs() as usize >= self.scan_width)
        {
            return Err(MetadataError::invariant(
                "pixel_shift_by_row",
                format!("row {b} shift {s} not below scan width {}", self.scan_width),
            ));
        }
        for (field, v) in [
            ("origin_to_optics_x_mm", self.origin_to_optics_x_mm),
            ("origin_to_optics_z_mm", self.origin_to_optics_z_mm),
        ] {
            if !v.is_finite() {
                return Err(MetadataError::invariant(field, "not finite"));
            }
        }
        if !(self.range_unit_mm.is_finite() && self.range_unit_mm > 0.0) {
            return Err(MetadataError::invariant(
                "range_unit_mm",
                format!("{} is not a positive number", self.range_unit_mm),
            ));
        }
        Ok(())
    }

    /// Canonical document form: pretty JSON with keys in schema order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("intrinsics always serialize")
    }
}

/// Parses and validates a metadata document with the default altitude slack.
pub fn parse_metadata(text: &str) -> Result<SensorIntrinsics, MetadataError> {
    parse_metadata_with(text, DEFAULT_ALTITUDE_SLACK_DEG)
}

pub fn parse_metadata_with(
    text: &str,
    altitude_slack_deg: f64,
) -> Result<SensorIntrinsics, MetadataError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| MetadataError::Malformed(e.to_string()))?;
    let Value::Object(mut obj) = doc else {
        return Err(MetadataError::SchemaViolation {
            field: "<root>".into(),
            reason: "expected a JSON object".into(),
        });
    };
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(MetadataError::SchemaViolation {
                field: field.into(),
                reason: "missing".into(),
            });
        }
    }
    let unknown: Vec<String> = obj
        .keys()
        .filter(|k| !REQUIRED_FIELDS.contains(&k.as_str()))
        .cloned()
        .collect();
    for key in &unknown {
        log::warn!("ignoring unknown metadata field `{key}`");
        obj.remove(key);
    }
    // Deserialize field by field so a type error names its field.
    for field in REQUIRED_FIELDS {
        check_type(field, &obj[field])?;
    }
    let intr: SensorIntrinsics = serde_json::from_value(Value::Object(obj))
        .map_err(|e| MetadataError::Malformed(e.to_string()))?;
    intr.validate_with(altitude_slack_deg)?;
    Ok(intr)
}

fn check_type(field: &str, value: &Value) -> Result<(), MetadataError> {
    let ok = match field {
        "beam_count" | "scan_width" => value.as_u64().is_some(),
        "beam_altitude_deg" | "beam_azimuth_deg" => value
            .as_array()
            .is_some_and(|a| a.iter().all(Value::is_number)),
        "pixel_shift_by_row" => value.as_array().is_some_and(|a| {
            a.iter()
                .all(|v| v.as_i64().is_some_and(|s| i32::try_from(s).is_ok()))
        }),
        _ => value.is_number(),
    };
    if ok {
        Ok(())
    } else {
        Err(MetadataError::SchemaViolation {
            field: field.into(),
            reason: format!("unexpected value {}", truncate_value(value)),
        })
    }
}

fn truncate_value(value: &Value) -> String {
    let mut s = value.to_string();
    if s.len() > 40 {
        s.truncate(40);
        s.push_str("...");
    }
    s
}

/// Re-emits a document in canonical form (parse then serialize).
pub fn canonicalize(text: &str) -> Result<String, MetadataError> {
    parse_metadata(text).map(|i| i.to_json())
}
