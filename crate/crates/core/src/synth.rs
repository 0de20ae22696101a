//! Ray-cast synthetic scans with exact ground truth.
//!
//! Each pixel's ray starts at the projection origin and runs along the
//! projection gradient for the selected mode, so a rendered scan projects
//! back onto the hit points up to range quantization.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationSet, Class, Instance, Task};
use crate::ingest::{scale_range, LidarScan};
use crate::intrinsics::SensorIntrinsics;
use crate::projection::{PixelRay, PointImage, ProjectionMode, Projector};
use crate::wire::{self, BeamRecord, LidarPacket, MeasurementBlock, BLOCKS_PER_PACKET};

/// Rotation period used for packet timestamps.
pub const FRAME_PERIOD_NS: u64 = 100_000_000;

const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("scene file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    #[serde(default = "default_signal")]
    pub signal: u16,
    #[serde(default = "default_reflectivity")]
    pub reflectivity: u16,
    #[serde(default = "default_nir")]
    pub nir: u16,
}

fn default_signal() -> u16 {
    200
}
fn default_reflectivity() -> u16 {
    80
}
fn default_nir() -> u16 {
    300
}

impl Default for Emission {
    fn default() -> Self {
        Self {
            signal: default_signal(),
            reflectivity: default_reflectivity(),
            nir: default_nir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned.
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Vertical, from `base` up to `base.z + height`.
    Cylinder {
        base: [f64; 3],
        radius: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Class>,
    #[serde(flatten)]
    pub emission: Emission,
    /// Displacement per frame in meters.
    #[serde(default)]
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Horizontal ground plane height.
    #[serde(default)]
    pub ground_z: Option<f64>,
    /// Radius of an infinite vertical wall around the sensor.
    #[serde(default)]
    pub wall_radius: Option<f64>,
    #[serde(flatten)]
    pub emission: Emission,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub background: Background,
}

fn translate(p: [f64; 3], d: [f64; 3]) -> [f64; 3] {
    [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
}

fn rotate_z(p: [f64; 3], (s, c): (f64, f64)) -> [f64; 3] {
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

impl Shape {
    fn map_points(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Shape {
        match *self {
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: f(center),
                radius,
            },
            Shape::Box { min, max } => {
                let (a, b) = (f(min), f(max));
                Shape::Box {
                    min: [a[0].min(b[0]), a[1].min(b[1]), a[2].min(b[2])],
                    max: [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])],
                }
            }
            Shape::Cylinder {
                base,
                radius,
                height,
            } => Shape::Cylinder {
                base: f(base),
                radius,
                height,
            },
        }
    }

    /// Distance along the unit direction `d` to the first surface point in
    /// front of `o`.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > EPS)
            }
            Shape::Box { min, max } => {
                let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[k] - o[k]) / d[k];
                    let t2 = (max[k] - o[k]) / d[k];
                    near = near.max(t1.min(t2));
                    far = far.min(t1.max(t2));
                }
                if near > far || far <= EPS {
                    None
                } else if near > EPS {
                    Some(near)
                } else {
                    Some(far)
                }
            }
            Shape::Cylinder {
                base,
                radius,
                height,
            } => {
                let (z0, z1) = (base[2], base[2] + height);
                let inside_xy = |t: f64| {
                    let x = o[0] + t * d[0] - base[0];
                    let y = o[1] + t * d[1] - base[1];
                    x * x + y * y <= radius * radius
                };
                let within_z = |t: f64| {
                    let z = o[2] + t * d[2];
                    (z0..=z1).contains(&z)
                };
                let mut best = f64::INFINITY;
                for t in circle_roots(o, d, [base[0], base[1]], radius) {
                    if t > EPS && within_z(t) {
                        best = best.min(t);
                    }
                }
                if d[2] != 0.0 {
                    for z in [z0, z1] {
                        let t = (z - o[2]) / d[2];
                        if t > EPS && inside_xy(t) {
                            best = best.min(t);
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }

    fn check(&self) -> Result<(), String> {
        let ok = match *self {
            Shape::Sphere { radius, .. } => radius > 0.0,
            Shape::Box { min, max } => (0..3).all(|k| max[k] > min[k]),
            Shape::Cylinder { radius, height, .. } => radius > 0.0 && height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("non-positive size in {self:?}"))
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Ray parameters where the xy-projection crosses a circle, ascending.
fn circle_roots(o: [f64; 3], d: [f64; 3], center: [f64; 2], radius: f64) -> Vec<f64> {
    let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a == 0.0 {
        return Vec::new();
    }
    let b = ox * d[0] + oy * d[1];
    let c = ox * ox + oy * oy - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    vec![(-b - s) / a, (-b + s) / a]
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Sizes positive and labels from a single task vocabulary.
    pub fn validate(&self) -> Result<(), SynthError> {
        for p in &self.primitives {
            p.shape.check().map_err(SynthError::InvalidScene)?;
        }
        if let Some(task) = self.task() {
            if let Some(c) = self.labels().find(|c| c.task() != task) {
                return Err(SynthError::InvalidScene(format!(
                    "label {c} mixes task vocabularies"
                )));
            }
        }
        if self.background.wall_radius.is_some_and(|r| r <= 0.0) {
            return Err(SynthError::InvalidScene(
                "wall radius must be positive".into(),
            ));
        }
        Ok(())
    }

    fn labels(&self) -> impl Iterator<Item = Class> + '_ {
        self.primitives.iter().filter_map(|p| p.label)
    }

    /// Task of the first labeled primitive.
    pub fn task(&self) -> Option<Task> {
        self.labels().next().map(Class::task)
    }

    /// The scene after `frame` steps of every primitive's velocity.
    pub fn at_frame(&self, frame: usize) -> Scene {
        let mut out = self.clone();
        for p in &mut out.primitives {
            let d = p.velocity.map(|v| v * frame as f64);
            p.shape = p.shape.map_points(|q| translate(q, d));
        }
        out
    }

    /// Mirror across the x–z plane.
    pub fn mirrored_y(&self) -> Scene {
        let mut out = self.clone();
        for p in &mut out.primitives {
            p.shape = p.shape.map_points(|q| [q[0], -q[1], q[2]]);
            p.velocity[1] = -p.velocity[1];
        }
        out
    }

    /// Rotation about the z-axis. Boxes stay axis-aligned only under quarter
    /// turns, so other angles are rejected when the scene has boxes.
    pub fn rotated_z(&self, angle: f64) -> Result<Scene, SynthError> {
        let quarter = (angle / FRAC_PI_2).round();
        let has_box = self
            .primitives
            .iter()
            .any(|p| matches!(p.shape, Shape::Box { .. }));
        if has_box && (angle - quarter * FRAC_PI_2).abs() > 1e-12 {
            return Err(SynthError::InvalidScene(
                "boxes only rotate by quarter turns".into(),
            ));
        }
        let sc = angle.sin_cos();
        let mut out = self.clone();
        for p in &mut out.primitives {
            p.shape = p.shape.map_points(|q| rotate_z(q, sc));
            p.velocity = rotate_z(p.velocity, sc);
        }
        Ok(out)
    }

    /// Random primitives around the sensor, labeled from `task` (about one in
    /// four left unlabeled), over a ground plane and far wall.
    pub fn random(rng: &mut impl Rng, count: usize, task: Task) -> Scene {
        let vocab = task.vocabulary();
        let primitives = (0..count)
            .map(|_| {
                let dist = rng.random_range(1.5..8.0);
                let az = rng.random_range(0.0..std::f64::consts::TAU);
                let c = [
                    dist * az.cos(),
                    dist * az.sin(),
                    rng.random_range(-0.5..2.5),
                ];
                let size = rng.random_range(0.15..0.8);
                let shape = match rng.random_range(0..3) {
                    0 => Shape::Sphere {
                        center: c,
                        radius: size,
                    },
                    1 => {
                        let half = [size, rng.random_range(0.1..0.8), rng.random_range(0.1..0.8)];
                        Shape::Box {
                            min: [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
                            max: [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
                        }
                    }
                    _ => Shape::Cylinder {
                        base: [c[0], c[1], -1.5],
                        radius: size * 0.5,
                        height: rng.random_range(0.8..1.9),
                    },
                };
                let label = if rng.random_bool(0.75) {
                    Some(vocab[rng.random_range(0..vocab.len())])
                } else {
                    None
                };
                Primitive {
                    shape,
                    label,
                    emission: Emission {
                        signal: rng.random_range(1..2000),
                        reflectivity: rng.random_range(1..255),
                        nir: rng.random_range(1..3000),
                    },
                    velocity: [0.0; 3],
                }
            })
            .collect();
        Scene {
            primitives,
            background: Background {
                ground_z: Some(-1.5),
                wall_radius: Some(14.0),
                emission: Emission::default(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    /// Standard deviation of Gaussian range noise in mm; 0 disables it.
    pub noise_std_mm: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub scan: LidarScan,
    pub annotations: AnnotationSet,
    pub ground_truth: PointImage,
}

#[derive(Clone, Copy)]
enum Hit {
    Primitive(usize),
    Background,
}

fn cast(scene: &Scene, ray: &PixelRay) -> Option<(f64, f64, Hit)> {
    let g = ray.gradient;
    let norm = dot(g, g).sqrt();
    if norm == 0.0 {
        return None;
    }
    let d = g.map(|v| v / norm);
    let o = ray.origin;
    let mut best: Option<(f64, Hit)> = None;
    let mut offer = |t: f64, h: Hit| {
        if best.is_none_or(|(b, _)| t < b) {
            best = Some((t, h));
        }
    };
    for (k, p) in scene.primitives.iter().enumerate() {
        if let Some(t) = p.shape.intersect(o, d) {
            offer(t, Hit::Primitive(k));
        }
    }
    if let Some(z) = scene.background.ground_z {
        if d[2] != 0.0 {
            let t = (z - o[2]) / d[2];
            if t > EPS {
                offer(t, Hit::Background);
            }
        }
    }
    if let Some(r) = scene.background.wall_radius {
        if let Some(t) = circle_roots(o, d, [0.0, 0.0], r)
            .into_iter()
            .find(|&t| t > EPS)
        {
            offer(t, Hit::Background);
        }
    }
    best.map(|(t, h)| (t, norm, h))
}

pub fn render(scene: &Scene, intr: &SensorIntrinsics, mode: ProjectionMode) -> Rendered {
    render_with(
        scene,
        &Projector::new(intr, mode),
        intr,
        RenderOptions::default(),
    )
}

/// Renders with a prebuilt projector (which must match `intr`).
pub fn render_with(
    scene: &Scene,
    projector: &Projector,
    intr: &SensorIntrinsics,
    options: RenderOptions,
) -> Rendered {
    let (h, w) = (intr.beam_count, intr.scan_width);
    let hits: Vec<Option<(f64, f64, Hit)>> = (0..h * w)
        .into_par_iter()
        .map(|px| cast(scene, projector.ray(px / w, px % w)))
        .collect();

    let mut scan = LidarScan::empty(0, h, w);
    scan.received_columns = w;
    let mut truth = PointImage::zeros(0, h, w, projector.mode());
    let mut owner: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    let offset_m = projector.optics_offset_m();
    let unit = intr.range_unit_mm;
    let mut noise = (options.noise_std_mm > 0.0).then(|| {
        (
            ChaCha8Rng::seed_from_u64(options.seed),
            Normal::new(0.0, options.noise_std_mm).expect("positive std"),
        )
    });
    for (px, hit) in hits.into_iter().enumerate() {
        let Some((t, norm, what)) = hit else { continue };
        let (b, c) = (px / w, px % w);
        let mut r_mm = (offset_m + t / norm) * 1000.0;
        if let Some((rng, dist)) = noise.as_mut() {
            r_mm += dist.sample(rng);
        }
        let raw = (r_mm / unit).round();
        if !(1.0..=u32::MAX as f64).contains(&raw) {
            continue;
        }
        let range = scale_range(raw as u32, unit);
        if range == 0 {
            continue;
        }
        let emission = match what {
            Hit::Primitive(k) => {
                owner[(b, c)] = Some(k);
                scene.primitives[k].emission
            }
            Hit::Background => scene.background.emission,
        };
        scan.range_mm[(b, c)] = range;
        scan.signal[(b, c)] = emission.signal;
        scan.reflectivity[(b, c)] = emission.reflectivity;
        scan.nir[(b, c)] = emission.nir;
        scan.valid[(b, c)] = true;
        let ray = projector.ray(b, c);
        let p = ray.point(t / norm);
        truth.points[(b, c, 0)] = p[0];
        truth.points[(b, c, 1)] = p[1];
        truth.points[(b, c, 2)] = p[2];
        truth.valid[(b, c)] = true;
    }

    let mut annotations = AnnotationSet::new(0, h, w);
    for (k, p) in scene.primitives.iter().enumerate() {
        let Some(class) = p.label else { continue };
        let mask = owner.map(|&o| o == Some(k));
        if mask.iter().any(|&m| m) {
            annotations.instances.push(Instance { class, mask });
        }
    }
    Rendered {
        scan,
        annotations,
        ground_truth: truth,
    }
}

/// Appends the packets of one scan, re-applying the per-row column stagger.
/// When the width is not a multiple of the block count the last packet wraps
/// around and repeats the first measurement ids.
pub fn encode_scan(scan: &LidarScan, intr: &SensorIntrinsics, frame_index: u64, out: &mut Vec<u8>) {
    let (h, w) = (scan.height(), scan.width());
    let shifts: Vec<usize> = intr
        .pixel_shift_by_row
        .iter()
        .map(|&s| (s as i64).rem_euclid(w as i64) as usize)
        .collect();
    let unit = intr.range_unit_mm;
    let base = frame_index * FRAME_PERIOD_NS;
    let column_ns = FRAME_PERIOD_NS / w as u64;
    for first in (0..w).step_by(BLOCKS_PER_PACKET) {
        let blocks = (0..BLOCKS_PER_PACKET)
            .map(|j| {
                let m = (first + j) % w;
                MeasurementBlock {
                    measurement_id: m as u16,
                    frame_id: scan.frame_id,
                    timestamp_ns: base + m as u64 * column_ns,
                    beams: (0..h)
                        .map(|b| {
                            let px = (b, (m + shifts[b]) % w);
                            let range = scan.range_mm[px];
                            BeamRecord {
                                range_raw: if unit == 1.0 {
                                    range
                                } else {
                                    (range as f64 / unit).round() as u32
                                },
                                signal: scan.signal[px],
                                reflectivity: scan.reflectivity[px],
                                nir: scan.nir[px],
                            }
                        })
                        .collect(),
                }
            })
            .collect();
        let packet = LidarPacket {
            version: wire::VERSION,
            beam_count: h as u16,
            blocks,
        };
        wire::encode_packet_into(&packet, out).expect("generated packets are well formed");
    }
}

/// Renders each scene as one frame (ids 0, 1, …) and encodes the packets.
pub fn make_stream(scenes: &[Scene], intr: &SensorIntrinsics, mode: ProjectionMode) -> Vec<u8> {
    let projector = Projector::new(intr, mode);
    let mut out = Vec::new();
    for (k, scene) in scenes.iter().enumerate() {
        let mut r = render_with(scene, &projector, intr, RenderOptions::default());
        r.scan.frame_id = k as u16;
        encode_scan(&r.scan, intr, k as u64, &mut out);
    }
    out
}

/// Encodes `count` copies of one scan with consecutive frame ids.
pub fn repeat_stream(scan: &LidarScan, intr: &SensorIntrinsics, count: usize) -> Vec<u8> {
    let mut frame = scan.clone();
    let mut out = Vec::new();
    for k in 0..count {
        frame.frame_id = k as u16;
        encode_scan(&frame, intr, k as u64, &mut out);
    }
    out
}
