//! Model-facing multi-channel images.
//!
//! Channels, in this fixed order: NIR, reflectivity, signal, reversed range,
//! and optionally the three positional planes. Reversed range works as an
//! opacity: near returns are close to 1, far or missing returns are 0.
//! Every numeric choice (divisors, maximum range, positional scale) lives in
//! [`RepresentationConfig`] and is carried in the manifest of each output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError, Tensor, TensorData};
use crate::ingest::LidarScan;
use crate::projection::{positional_channels, PointImage, DEFAULT_POSITION_SCALE_M};

#[derive(Debug, Error)]
pub enum RepresentationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("positional channels requested but no point image given")]
    MissingPoints,
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("channel {0} is not part of this representation")]
    AbsentChannel(Channel),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Nir,
    Reflectivity,
    Signal,
    RevRange,
    PosX,
    PosY,
    PosZ,
}

impl Channel {
    pub const BASE: [Channel; 4] = [
        Channel::Nir,
        Channel::Reflectivity,
        Channel::Signal,
        Channel::RevRange,
    ];
    pub const POSITIONAL: [Channel; 3] = [Channel::PosX, Channel::PosY, Channel::PosZ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Nir => "nir",
            Channel::Reflectivity => "reflectivity",
            Channel::Signal => "signal",
            Channel::RevRange => "revrange",
            Channel::PosX => "posx",
            Channel::PosY => "posy",
            Channel::PosZ => "posz",
        }
    }

    pub fn is_positional(self) -> bool {
        Self::POSITIONAL.contains(&self)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = RepresentationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "nir" => Channel::Nir,
            "refl" | "reflectivity" => Channel::Reflectivity,
            "signal" => Channel::Signal,
            "range" | "revrange" => Channel::RevRange,
            "posx" => Channel::PosX,
            "posy" => Channel::PosY,
            "posz" => Channel::PosZ,
            _ => return Err(RepresentationError::UnknownChannel(s.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationConfig {
    /// Append the three positional planes.
    pub positional: bool,
    pub nir_divisor: f64,
    pub signal_divisor: f64,
    pub reflectivity_divisor: f64,
    pub range_max_mm: f64,
    pub position_scale_m: f64,
    /// Channels dropped from the output; survivors keep their order.
    #[serde(default)]
    pub excluded: Vec<Channel>,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            positional: false,
            nir_divisor: 1024.0,
            signal_divisor: 1024.0,
            reflectivity_divisor: 255.0,
            range_max_mm: 15_000.0,
            position_scale_m: DEFAULT_POSITION_SCALE_M,
            excluded: Vec::new(),
        }
    }
}

impl RepresentationConfig {
    pub fn with_positional(mut self, positional: bool) -> Self {
        self.positional = positional;
        self
    }

    /// Channels produced under this configuration, in output order.
    pub fn channels(&self) -> Vec<Channel> {
        let all = Channel::BASE.iter().chain(if self.positional {
            Channel::POSITIONAL.iter()
        } else {
            [].iter()
        });
        all.copied()
            .filter(|c| !self.excluded.contains(c))
            .collect()
    }

    /// Parses a `nir,refl,signal,revrange[,pos]` selection; base channels
    /// not listed become exclusions.
    pub fn select(mut self, list: &str) -> Result<Self, RepresentationError> {
        let mut keep = Vec::new();
        self.positional = false;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item.eq_ignore_ascii_case("pos") {
                self.positional = true;
            } else {
                keep.push(item.parse::<Channel>()?);
            }
        }
        self.excluded = Channel::BASE
            .iter()
            .copied()
            .filter(|c| !keep.contains(c))
            .collect();
        Ok(self)
    }
}

/// Everything needed to reproduce or interpret a representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelManifest {
    pub channels: Vec<Channel>,
    pub config: RepresentationConfig,
    /// Source `(height, width)` if the image was resized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resized_from: Option<(usize, usize)>,
}

/// Channel-first `C×H×W` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRepresentation {
    pub frame_id: u32,
    pub data: Array3<f32>,
    pub manifest: ChannelManifest,
}

impl FrameRepresentation {
    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn channel_index(&self, channel: Channel) -> Option<usize> {
        self.manifest.channels.iter().position(|&c| c == channel)
    }

    pub fn plane(&self, channel: Channel) -> Option<ndarray::ArrayView2<'_, f32>> {
        self.channel_index(channel)
            .map(|k| self.data.index_axis(Axis(0), k))
    }

    /// Drops one channel, keeping the order of the rest.
    pub fn without(&self, channel: Channel) -> Result<Self, RepresentationError> {
        let k = self
            .channel_index(channel)
            .ok_or(RepresentationError::AbsentChannel(channel))?;
        let keep: Vec<usize> = (0..self.channels()).filter(|&i| i != k).collect();
        let mut manifest = self.manifest.clone();
        manifest.channels.remove(k);
        manifest.config.excluded.push(channel);
        Ok(Self {
            frame_id: self.frame_id,
            data: self.data.select(Axis(0), &keep),
            manifest,
        })
    }

    /// Bit pattern of the payload, for exact comparisons.
    pub fn bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let dims = self.data.shape().iter().map(|&d| d as u32).collect();
        let data = self.data.as_standard_layout().iter().copied().collect();
        Tensor::new(dims, TensorData::F32(data))
    }

    pub fn from_tensor(
        tensor: Tensor,
        frame_id: u32,
        manifest: ChannelManifest,
    ) -> Result<Self, RepresentationError> {
        let (dims, data) = tensor.expect_f32(0)?;
        if dims.len() != 3 || dims[0] != manifest.channels.len() {
            return Err(RepresentationError::DimensionMismatch(format!(
                "tensor dims {dims:?} for {} manifest channels",
                manifest.channels.len()
            )));
        }
        Ok(Self {
            frame_id,
            data: Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
                .expect("dims checked against payload"),
            manifest,
        })
    }
}

/// Writes the payload as a single-record container file.
pub fn write_tensor(
    rep: &FrameRepresentation,
    path: impl AsRef<Path>,
) -> Result<(), RepresentationError> {
    container::write_tensor(path, &rep.to_tensor())?;
    Ok(())
}

pub fn read_tensor(
    path: impl AsRef<Path>,
    frame_id: u32,
    manifest: ChannelManifest,
) -> Result<FrameRepresentation, RepresentationError> {
    FrameRepresentation::from_tensor(container::read_tensor(path)?, frame_id, manifest)
}

#[inline]
fn unit(v: f64, divisor: f64) -> f32 {
    (v / divisor).clamp(0.0, 1.0) as f32
}

/// Reversed range of a valid return: `clamp(1 − range/range_max, 0, 1)`.
#[inline]
pub fn reversed_range(range_mm: u32, range_max_mm: f64) -> f32 {
    (1.0 - range_mm as f64 / range_max_mm).clamp(0.0, 1.0) as f32
}

pub fn build_representation(
    scan: &LidarScan,
    points: Option<&PointImage>,
    config: &RepresentationConfig,
) -> Result<FrameRepresentation, RepresentationError> {
    let (h, w) = (scan.height(), scan.width());
    let channels = config.channels();
    let positional = if config.positional {
        let points = points.ok_or(RepresentationError::MissingPoints)?;
        if points.height() != h || points.width() != w {
            return Err(RepresentationError::DimensionMismatch(format!(
                "scan is {h}×{w}, point image {}×{}",
                points.height(),
                points.width()
            )));
        }
        Some(positional_channels(points, config.position_scale_m))
    } else {
        None
    };
    let mut data = Array3::<f32>::zeros((channels.len(), h, w));
    for (k, &channel) in channels.iter().enumerate() {
        let mut plane = data.index_axis_mut(Axis(0), k);
        let plane = plane.as_slice_mut().expect("contiguous plane");
        match channel {
            Channel::Nir | Channel::Reflectivity | Channel::Signal => {
                let (src, divisor) = match channel {
                    Channel::Nir => (&scan.nir, config.nir_divisor),
                    Channel::Reflectivity => (&scan.reflectivity, config.reflectivity_divisor),
                    _ => (&scan.signal, config.signal_divisor),
                };
                for ((dst, &v), &ok) in plane.iter_mut().zip(src.iter()).zip(scan.valid.iter()) {
                    if ok {
                        *dst = unit(v as f64, divisor);
                    }
                }
            }
            Channel::RevRange => {
                for ((dst, &r), &ok) in plane
                    .iter_mut()
                    .zip(scan.range_mm.iter())
                    .zip(scan.valid.iter())
                {
                    if ok {
                        *dst = reversed_range(r, config.range_max_mm);
                    }
                }
            }
            Channel::PosX | Channel::PosY | Channel::PosZ => {
                let axis = channel as usize - Channel::PosX as usize;
                let pos = positional.as_ref().expect("positional config checked");
                plane.copy_from_slice(
                    pos.index_axis(Axis(0), axis)
                        .as_slice()
                        .expect("contiguous plane"),
                );
            }
        }
    }
    Ok(FrameRepresentation {
        frame_id: scan.frame_id as u32,
        data,
        manifest: ChannelManifest {
            channels,
            config: config.clone(),
            resized_from: None,
        },
    })
}

/// Source sampling for one output coordinate under half-pixel alignment:
/// lower index, upper index and the weight of the upper one.
fn taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

#[inline]
fn lerp(a: f32, b: f32, t: f64) -> f32 {
    // exact when a == b
    a + ((b - a) as f64 * t) as f32
}

/// Bilinear resize to `(height, width)`. A reversed-range output pixel is 0
/// whenever any source pixel with non-zero weight is 0, so no return is ever
/// interpolated into existence.
pub fn resize(rep: &FrameRepresentation, target: (usize, usize)) -> FrameRepresentation {
    let (th, tw) = target;
    assert!(th > 0 && tw > 0, "resize target must be positive");
    let (sh, sw) = (rep.height(), rep.width());
    let rows: Vec<_> = (0..th).map(|y| taps(y, th, sh)).collect();
    let cols: Vec<_> = (0..tw).map(|x| taps(x, tw, sw)).collect();
    let rev = rep.channel_index(Channel::RevRange);
    let mut data = Array3::<f32>::zeros((rep.channels(), th, tw));
    for k in 0..rep.channels() {
        let src = rep.data.index_axis(Axis(0), k);
        let mut dst = data.index_axis_mut(Axis(0), k);
        for (y, &(y0, y1, ty)) in rows.iter().enumerate() {
            for (x, &(x0, x1, tx)) in cols.iter().enumerate() {
                let (a, b, c, d) = (src[(y0, x0)], src[(y0, x1)], src[(y1, x0)], src[(y1, x1)]);
                if Some(k) == rev {
                    let hole = a == 0.0
                        || (tx > 0.0 && b == 0.0)
                        || (ty > 0.0 && c == 0.0)
                        || (tx > 0.0 && ty > 0.0 && d == 0.0);
                    if hole {
                        continue;
                    }
                }
                dst[(y, x)] = lerp(lerp(a, b, tx), lerp(c, d, tx), ty);
            }
        }
    }
    let mut manifest = rep.manifest.clone();
    if (th, tw) != (sh, sw) {
        manifest.resized_from.get_or_insert((sh, sw));
    }
    FrameRepresentation {
        frame_id: rep.frame_id,
        data,
        manifest,
    }
}

/// Reverses every plane's columns; the positional y plane is also negated,
/// which is what a left-right flip of the scan means in sensor space.
pub fn flip_horizontal(rep: &FrameRepresentation) -> FrameRepresentation {
    let mut data = rep.data.slice(s![.., .., ..;-1]).to_owned();
    if let Some(k) = rep.channel_index(Channel::PosY) {
        data.index_axis_mut(Axis(0), k).mapv_inplace(|v| -v);
    }
    FrameRepresentation {
        frame_id: rep.frame_id,
        data,
        manifest: rep.manifest.clone(),
    }
}
