//! Range image to Euclidean point image.
//!
//! For measurement id `i` of a scan `w` columns wide and beam `b`:
//!
//! ```text
//! θ_enc = 2π (1 − i / w)      θ_azi = −2π α_b / 360      φ = 2π β_b / 360
//! |n|   = sqrt(x_n² + z_n²)
//!
//! x = (r − |n|) cos(θ_enc + θ_azi) cos φ + x_n cos θ_enc
//! y = (r − |n|) sin(θ_enc + θ_azi) cos φ + x_n sin θ_enc     (Standard)
//! y = (r − |n|) sin(θ_enc + θ_azi) sin φ + x_n cos θ_enc     (Printed)
//! z = (r − |n|) sin φ + z_n
//! ```
//!
//! `Standard` is the spherical form and keeps every point within `|n|` of
//! the measured radius. `Printed` keeps the alternative y row (sine of the
//! altitude, cosine of the encoder angle) so both can run on the same data.
//!
//! A destaggered pixel `(b, col)` was fired at measurement id
//! `i = (col − shift_b) mod w`; that is the `i` used above.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError, Tensor, TensorData};
use crate::ingest::LidarScan;
use crate::intrinsics::SensorIntrinsics;

/// Default positional-channel scale `R_pos` in meters.
pub const DEFAULT_POSITION_SCALE_M: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("{what} index {index} out of range 0..{bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    #[default]
    Standard,
    Printed,
}

impl FromStr for ProjectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "paper" | "printed" => Ok(Self::Printed),
            other => Err(format!(
                "unknown projection mode `{other}` (standard|paper)"
            )),
        }
    }
}

/// The three angles of one pixel, in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamAngles {
    pub encoder: f64,
    pub azimuth: f64,
    pub altitude: f64,
}

/// `θ_enc = 2π (1 − i/w)`; defined for `i ∈ [0, w]`.
pub fn encoder_angle(measurement_id: usize, scan_width: usize) -> f64 {
    2.0 * PI * (1.0 - measurement_id as f64 / scan_width as f64)
}

/// `θ_azi = −2π α/360`.
pub fn azimuth_angle(azimuth_deg: f64) -> f64 {
    -2.0 * PI * (azimuth_deg / 360.0)
}

/// `φ = 2π β/360`.
pub fn altitude_angle(altitude_deg: f64) -> f64 {
    2.0 * PI * (altitude_deg / 360.0)
}

pub fn angles(
    measurement_id: usize,
    beam: usize,
    intr: &SensorIntrinsics,
) -> Result<BeamAngles, ProjectionError> {
    if measurement_id >= intr.scan_width {
        return Err(ProjectionError::IndexOutOfRange {
            what: "measurement id",
            index: measurement_id,
            bound: intr.scan_width,
        });
    }
    if beam >= intr.beam_count {
        return Err(ProjectionError::IndexOutOfRange {
            what: "beam",
            index: beam,
            bound: intr.beam_count,
        });
    }
    Ok(BeamAngles {
        encoder: encoder_angle(measurement_id, intr.scan_width),
        azimuth: azimuth_angle(intr.beam_azimuth_deg[beam]),
        altitude: altitude_angle(intr.beam_altitude_deg[beam]),
    })
}

/// Geometry of one pixel: the point at range `r` (meters) is
/// `origin + (r − |n|) · gradient`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRay {
    pub origin: [f64; 3],
    pub gradient: [f64; 3],
}

impl PixelRay {
    pub fn new(angles: BeamAngles, x_n: f64, z_n: f64, mode: ProjectionMode) -> Self {
        let BeamAngles {
            encoder,
            azimuth,
            altitude,
        } = angles;
        let heading = encoder + azimuth;
        match mode {
            ProjectionMode::Standard => Self {
                origin: [x_n * encoder.cos(), x_n * encoder.sin(), z_n],
                gradient: [
                    heading.cos() * altitude.cos(),
                    heading.sin() * altitude.cos(),
                    altitude.sin(),
                ],
            },
            ProjectionMode::Printed => Self {
                origin: [x_n * encoder.cos(), x_n * encoder.cos(), z_n],
                gradient: [
                    heading.cos() * altitude.cos(),
                    heading.sin() * altitude.sin(),
                    altitude.sin(),
                ],
            },
        }
    }

    #[inline]
    pub fn point(&self, excess_m: f64) -> [f64; 3] {
        [
            excess_m * self.gradient[0] + self.origin[0],
            excess_m * self.gradient[1] + self.origin[1],
            excess_m * self.gradient[2] + self.origin[2],
        ]
    }
}

/// H×W×3 coordinates in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointImage {
    pub frame_id: u16,
    pub points: Array3<f64>,
    pub valid: Array2<bool>,
    pub mode: ProjectionMode,
}

impl PointImage {
    pub fn zeros(frame_id: u16, height: usize, width: usize, mode: ProjectionMode) -> Self {
        Self {
            frame_id,
            points: Array3::zeros((height, width, 3)),
            valid: Array2::from_elem((height, width), false),
            mode,
        }
    }

    pub fn height(&self) -> usize {
        self.valid.nrows()
    }

    pub fn width(&self) -> usize {
        self.valid.ncols()
    }

    pub fn point(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.points[(row, col, 0)],
            self.points[(row, col, 1)],
            self.points[(row, col, 2)],
        ]
    }

    /// Container records: f32 `[3, H, W]` channel-first coordinates and u8
    /// `[H, W]` validity. Coordinates are narrowed to f32.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let (h, w) = (self.height(), self.width());
        let mut xyz = Vec::with_capacity(3 * h * w);
        for axis in 0..3 {
            xyz.extend(
                self.points
                    .index_axis(ndarray::Axis(2), axis)
                    .iter()
                    .map(|&v| v as f32),
            );
        }
        vec![
            Tensor::new(vec![3, h as u32, w as u32], TensorData::F32(xyz)),
            Tensor::new(
                vec![h as u32, w as u32],
                TensorData::U8(self.valid.iter().map(|&v| v as u8).collect()),
            ),
        ]
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        container::write_tensors(path, &self.to_tensors())
    }
}

/// Per-pixel ray table for one set of intrinsics and mode. Building it costs
/// the trigonometry once; [`Projector::project`] is then a multiply-add per
/// coordinate.
#[derive(Debug, Clone)]
pub struct Projector {
    height: usize,
    width: usize,
    optics_offset_m: f64,
    mode: ProjectionMode,
    rays: Vec<PixelRay>,
}

impl Projector {
    pub fn new(intr: &SensorIntrinsics, mode: ProjectionMode) -> Self {
        let (h, w) = (intr.beam_count, intr.scan_width);
        let x_n = intr.origin_to_optics_x_mm / 1000.0;
        let z_n = intr.origin_to_optics_z_mm / 1000.0;
        let mut rays = Vec::with_capacity(h * w);
        for b in 0..h {
            let shift = (intr.pixel_shift_by_row[b] as i64).rem_euclid(w as i64) as usize;
            for col in 0..w {
                let i = (col + w - shift) % w;
                let a = angles(i, b, intr).expect("indices within intrinsics");
                rays.push(PixelRay::new(a, x_n, z_n, mode));
            }
        }
        Self {
            height: h,
            width: w,
            optics_offset_m: intr.optics_offset_mm() / 1000.0,
            mode,
            rays,
        }
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    /// `|n|` in meters.
    pub fn optics_offset_m(&self) -> f64 {
        self.optics_offset_m
    }

    pub fn ray(&self, row: usize, col: usize) -> &PixelRay {
        &self.rays[row * self.width + col]
    }

    pub fn project(&self, scan: &LidarScan) -> Result<PointImage, ProjectionError> {
        if scan.height() != self.height || scan.width() != self.width {
            return Err(ProjectionError::DimensionMismatch(format!(
                "scan is {}×{}, intrinsics describe {}×{}",
                scan.height(),
                scan.width(),
                self.height,
                self.width
            )));
        }
        let mut out = PointImage::zeros(scan.frame_id, self.height, self.width, self.mode);
        out.valid.assign(&scan.valid);
        let points = out
            .points
            .as_slice_mut()
            .expect("freshly allocated arrays are contiguous");
        let ranges = scan.range_mm.iter();
        let valid = scan.valid.iter();
        for ((ray, (&range, &ok)), dst) in self
            .rays
            .iter()
            .zip(ranges.zip(valid))
            .zip(points.chunks_exact_mut(3))
        {
            if ok {
                let p = ray.point(range as f64 / 1000.0 - self.optics_offset_m);
                dst.copy_from_slice(&p);
            }
        }
        Ok(out)
    }
}

/// Projects a scan with freshly built ray tables.
pub fn project(
    scan: &LidarScan,
    intr: &SensorIntrinsics,
    mode: ProjectionMode,
) -> Result<PointImage, ProjectionError> {
    Projector::new(intr, mode).project(scan)
}

/// Channel-first `[3, H, W]` planes `clamp(v / scale, −1, 1)`; invalid pixels
/// stay 0.
pub fn positional_channels(points: &PointImage, scale_m: f64) -> Array3<f32> {
    let (h, w) = (points.height(), points.width());
    let mut out = Array3::zeros((3, h, w));
    for ((r, c), &ok) in points.valid.indexed_iter() {
        if ok {
            for axis in 0..3 {
                out[(axis, r, c)] = (points.points[(r, c, axis)] / scale_m).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn scan_with(h: usize, w: usize, f: impl Fn(usize, usize) -> u32) -> LidarScan {
        let mut s = LidarScan::empty(0, h, w);
        for ((r, c), v) in s.range_mm.indexed_iter_mut() {
            *v = f(r, c);
        }
        s.valid = s.range_mm.mapv(|v| v != 0);
        s
    }

    fn norm(p: [f64; 3]) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn encoder_angle_values() {
        assert_eq!(encoder_angle(0, 512), TAU);
        assert_eq!(encoder_angle(512, 512), 0.0);
        assert!((encoder_angle(128, 512) - 3.0 * PI / 2.0).abs() < 1e-15);
        assert!((encoder_angle(128, 512) - 4.712389).abs() < 1e-6);
    }

    #[test]
    fn beam_angle_substitution() {
        assert_eq!(azimuth_angle(90.0), -PI / 2.0);
        assert_eq!(altitude_angle(45.0), PI / 4.0);
        let mut intr = SensorIntrinsics::uniform_dome(2, 512);
        intr.beam_azimuth_deg[1] = 90.0;
        intr.beam_altitude_deg[1] = 45.0;
        let a = angles(3, 1, &intr).unwrap();
        assert_eq!((a.azimuth, a.altitude), (-PI / 2.0, PI / 4.0));
        assert!(matches!(
            angles(512, 0, &intr),
            Err(ProjectionError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            angles(0, 2, &intr),
            Err(ProjectionError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn horizon_beam_at_column_zero_points_along_x() {
        let mut intr = SensorIntrinsics::uniform_dome(1, 512);
        intr.beam_altitude_deg[0] = 0.0;
        let scan = scan_with(1, 512, |_, c| if c == 0 { 2000 } else { 0 });
        let p = project(&scan, &intr, ProjectionMode::Standard).unwrap();
        let [x, y, z] = p.point(0, 0);
        assert!((x - 2.0).abs() < 1e-12);
        assert!(y.abs() < 1e-12);
        assert_eq!(z, 0.0);
        assert_eq!(p.point(0, 1), [0.0; 3]);
        assert!(!p.valid[(0, 1)]);
    }

    #[test]
    fn zenith_beam_points_straight_up() {
        let intr = SensorIntrinsics::uniform_dome(1, 64);
        assert_eq!(intr.beam_altitude_deg[0], 90.0);
        let scan = scan_with(1, 64, |_, _| 3000);
        let p = project(&scan, &intr, ProjectionMode::Standard).unwrap();
        for c in 0..64 {
            let [x, y, z] = p.point(0, c);
            assert!((z - 3.0).abs() < 1e-12);
            assert!(x * x + y * y < 1e-24);
        }
    }

    #[test]
    fn printed_mode_differs_only_in_y() {
        let mut intr = SensorIntrinsics::uniform_dome(4, 64);
        intr.origin_to_optics_x_mm = 27.0;
        intr.origin_to_optics_z_mm = 10.0;
        let scan = scan_with(4, 64, |r, c| 1500 + 10 * (r * 64 + c) as u32);
        let a = project(&scan, &intr, ProjectionMode::Standard).unwrap();
        let b = project(&scan, &intr, ProjectionMode::Printed).unwrap();
        assert_eq!(b.mode, ProjectionMode::Printed);
        for r in 0..4 {
            for c in 0..64 {
                let (pa, pb) = (a.point(r, c), b.point(r, c));
                assert_eq!(pa[0], pb[0]);
                assert_eq!(pa[2], pb[2]);
                // printed y by hand
                let ang = angles(c, r, &intr).unwrap();
                let s = scan.range_mm[(r, c)] as f64 / 1000.0 - intr.optics_offset_mm() / 1000.0;
                let y = s * (ang.encoder + ang.azimuth).sin() * ang.altitude.sin()
                    + 0.027 * ang.encoder.cos();
                assert!((pb[1] - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn destaggered_pixel_uses_its_firing_id() {
        let mut intr = SensorIntrinsics::uniform_dome(2, 16);
        intr.beam_altitude_deg = vec![10.0, 20.0];
        intr.pixel_shift_by_row = vec![0, 3];
        let proj = Projector::new(&intr, ProjectionMode::Standard);
        let plain = Projector::new(
            &SensorIntrinsics {
                pixel_shift_by_row: vec![0, 0],
                ..intr.clone()
            },
            ProjectionMode::Standard,
        );
        for c in 0..16 {
            assert_eq!(proj.ray(1, (c + 3) % 16), plain.ray(1, c));
            assert_eq!(proj.ray(0, c), plain.ray(0, c));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let intr = SensorIntrinsics::uniform_dome(4, 64);
        let scan = LidarScan::empty(0, 4, 32);
        assert!(matches!(
            project(&scan, &intr, ProjectionMode::Standard),
            Err(ProjectionError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn positional_channel_mapping() {
        let mut p = PointImage::zeros(0, 1, 3, ProjectionMode::Standard);
        p.valid[(0, 0)] = true;
        p.valid[(0, 2)] = true;
        for (axis, v) in [5.0, -5.0, 2.5].into_iter().enumerate() {
            p.points[(0, 0, axis)] = v;
            p.points[(0, 1, axis)] = 1.0;
            p.points[(0, 2, axis)] = 40.0 * if axis == 1 { -1.0 } else { 1.0 };
        }
        let ch = positional_channels(&p, DEFAULT_POSITION_SCALE_M);
        assert_eq!(
            (ch[(0, 0, 0)], ch[(1, 0, 0)], ch[(2, 0, 0)]),
            (0.5, -0.5, 0.25)
        );
        assert_eq!(
            (ch[(0, 0, 1)], ch[(1, 0, 1)], ch[(2, 0, 1)]),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(
            (ch[(0, 0, 2)], ch[(1, 0, 2)], ch[(2, 0, 2)]),
            (1.0, -1.0, 1.0)
        );
    }

    #[test]
    fn neighbours_crowd_towards_the_axis() {
        let mut intr = SensorIntrinsics::uniform_dome(2, 512);
        intr.beam_altitude_deg = vec![80.0, 10.0];
        let scan = scan_with(2, 512, |_, _| 5000);
        let p = project(&scan, &intr, ProjectionMode::Standard).unwrap();
        let gap = |r: usize| {
            let (a, b) = (p.point(r, 10), p.point(r, 11));
            norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
        };
        assert!(gap(0) < gap(1));
        let bound = 5.0 * TAU / 512.0 * (1.0 + 1e-9);
        assert!(gap(0) <= bound && gap(1) <= bound);
    }

    proptest! {
        #[test]
        fn encoder_angle_strictly_decreasing(w in 1usize..5000, i in 0usize..5000) {
            prop_assume!(i < w);
            prop_assert!(encoder_angle(i + 1, w) < encoder_angle(i, w));
        }

        #[test]
        fn radius_is_exact_without_offsets(
            alt in prop::collection::vec(0.0f64..90.0, 3),
            az in prop::collection::vec(-10.0f64..10.0, 3),
            ranges in prop::collection::vec(1u32..100_000, 3 * 32),
        ) {
            let mut intr = SensorIntrinsics::uniform_dome(3, 32);
            intr.beam_altitude_deg = alt;
            intr.beam_azimuth_deg = az;
            let scan = scan_with(3, 32, |r, c| ranges[r * 32 + c]);
            let p = project(&scan, &intr, ProjectionMode::Standard).unwrap();
            for r in 0..3 {
                for c in 0..32 {
                    let expect = scan.range_mm[(r, c)] as f64 / 1000.0;
                    prop_assert!((norm(p.point(r, c)) - expect).abs() <= 1e-6 * expect);
                }
            }
        }

        #[test]
        fn radius_stays_within_optics_offset(
            alt in prop::collection::vec(0.0f64..90.0, 2),
            az in prop::collection::vec(-10.0f64..10.0, 2),
            x_n in 0.0f64..50.0,
            z_n in 0.0f64..50.0,
            ranges in prop::collection::vec(1u32..60_000, 2 * 16),
        ) {
            let mut intr = SensorIntrinsics::uniform_dome(2, 16);
            intr.beam_altitude_deg = alt;
            intr.beam_azimuth_deg = az;
            intr.origin_to_optics_x_mm = x_n;
            intr.origin_to_optics_z_mm = z_n;
            let n = intr.optics_offset_mm() / 1000.0;
            let scan = scan_with(2, 16, |r, c| ranges[r * 16 + c]);
            let p = project(&scan, &intr, ProjectionMode::Standard).unwrap();
            for r in 0..2 {
                for c in 0..16 {
                    let rr = scan.range_mm[(r, c)] as f64 / 1000.0;
                    let d = norm(p.point(r, c));
                    prop_assert!(d >= (rr - n - 1e-3).max(0.0) && d <= rr + n + 1e-3);
                }
            }
        }

        #[test]
        fn positional_channels_stay_in_unit_box(
            ranges in prop::collection::vec(0u32..200_000, 4 * 16),
            scale in 0.5f64..20.0,
        ) {
            let intr = SensorIntrinsics::uniform_dome(4, 16);
            let scan = scan_with(4, 16, |r, c| ranges[r * 16 + c]);
            let p = project(&scan, &intr, ProjectionMode::Standard).unwrap();
            let ch = positional_channels(&p, scale);
            prop_assert!(ch.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn projection_is_deterministic(ranges in prop::collection::vec(0u32..50_000, 2 * 8)) {
            let mut intr = SensorIntrinsics::uniform_dome(2, 8);
            intr.origin_to_optics_x_mm = 12.5;
            let scan = scan_with(2, 8, |r, c| ranges[r * 8 + c]);
            let a = project(&scan, &intr, ProjectionMode::Standard).unwrap();
            let b = project(&scan, &intr, ProjectionMode::Standard).unwrap();
            let bits = |p: &PointImage| p.points.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }
}
