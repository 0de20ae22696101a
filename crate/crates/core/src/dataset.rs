//! Annotated frame datasets.
//!
//! On disk:
//!
//! ```text
//! root/manifest.json               DatasetManifest
//! root/meta.json                   sensor intrinsics
//! root/frames/frame_<id>.ldt       raw scans
//! root/annotations/<id>.json       instances, masks as RLE integer arrays
//! root/splits.json                 train/val/test assignment
//! ```
//!
//! Masks are run-length encoded row-major as alternating runs of 0 and 1
//! pixels, always starting with a (possibly empty) run of 0s.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{IngestError, LidarScan};
use crate::intrinsics::{parse_metadata, MetadataError, SensorIntrinsics};
use crate::projection::{ProjectionError, ProjectionMode, Projector};
use crate::representation::{
    build_representation, flip_horizontal, write_tensor, Channel, ChannelManifest,
    FrameRepresentation, RepresentationConfig, RepresentationError,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("split needs at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {0} listed twice")]
    DuplicateFrame(u32),
    #[error("run lengths sum to {actual}, mask has {expected} pixels")]
    RleLength { expected: usize, actual: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("class {class} does not belong to the {task} task")]
    WrongTask { class: Class, task: Task },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_owned(),
        source,
    }
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Json {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("dataset types serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Person,
    Action,
}

impl Task {
    pub fn vocabulary(self) -> &'static [Class] {
        match self {
            Task::Person => &[Class::Person],
            Task::Action => &[Class::Sitting, Class::Walking, Class::Waving],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Person => "person",
            Task::Action => "action",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "person" => Ok(Task::Person),
            "action" => Ok(Task::Action),
            other => Err(format!("unknown task `{other}` (person|action)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Person,
    Sitting,
    Walking,
    Waving,
}

impl Class {
    pub fn task(self) -> Task {
        match self {
            Class::Person => Task::Person,
            _ => Task::Action,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Person => "person",
            Class::Sitting => "sitting",
            Class::Walking => "walking",
            Class::Waving => "waving",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "person" => Ok(Class::Person),
            "sitting" => Ok(Class::Sitting),
            "walking" => Ok(Class::Walking),
            "waving" => Ok(Class::Waving),
            other => Err(DatasetError::UnknownClass(other.to_owned())),
        }
    }
}

pub fn encode_rle(mask: &Array2<bool>) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &px in mask.iter() {
        if px != current {
            counts.push(run);
            current = px;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn decode_rle(
    counts: &[u32],
    height: usize,
    width: usize,
) -> Result<Array2<bool>, DatasetError> {
    let expected = height * width;
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != expected as u64 {
        return Err(DatasetError::RleLength {
            expected,
            actual: total,
        });
    }
    let mut bits = Vec::with_capacity(expected);
    for (k, &run) in counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(k % 2 == 1, run as usize));
    }
    Ok(Array2::from_shape_vec((height, width), bits).expect("length checked"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class: Class,
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub frame_id: u32,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    class: Class,
    rle: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    frame_id: u32,
    height: usize,
    width: usize,
    instances: Vec<InstanceRecord>,
}

impl AnnotationSet {
    pub fn new(frame_id: u32, height: usize, width: usize) -> Self {
        Self {
            frame_id,
            height,
            width,
            instances: Vec::new(),
        }
    }

    /// Checks mask shapes and that every class belongs to `task`.
    pub fn validate(&self, task: Task) -> Result<(), DatasetError> {
        for inst in &self.instances {
            if inst.mask.dim() != (self.height, self.width) {
                return Err(DatasetError::DimensionMismatch(format!(
                    "mask {:?} in a {}×{} frame",
                    inst.mask.dim(),
                    self.height,
                    self.width
                )));
            }
            if inst.class.task() != task {
                return Err(DatasetError::WrongTask {
                    class: inst.class,
                    task,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let rec = AnnotationRecord {
            frame_id: self.frame_id,
            height: self.height,
            width: self.width,
            instances: self
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    class: i.class,
                    rle: encode_rle(&i.mask),
                })
                .collect(),
        };
        serde_json::to_string(&rec).expect("annotations serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let rec: AnnotationRecord = serde_json::from_str(text).map_err(|e| DatasetError::Json {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        let instances = rec
            .instances
            .into_iter()
            .map(|i| {
                Ok(Instance {
                    class: i.class,
                    mask: decode_rle(&i.rle, rec.height, rec.width)?,
                })
            })
            .collect::<Result<_, DatasetError>>()?;
        Ok(Self {
            frame_id: rec.frame_id,
            height: rec.height,
            width: rec.width,
            instances,
        })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            DatasetError::Json { message, .. } => DatasetError::Json {
                path: path.to_owned(),
                message,
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    pub fn flipped(&self) -> Self {
        Self {
            instances: self
                .instances
                .iter()
                .map(|i| Instance {
                    class: i.class,
                    mask: i.mask.slice(s![.., ..;-1]).to_owned(),
                })
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitAssignment {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn get(&self, name: &str) -> Option<&[u32]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Seeded 70/15/15 split.
///
/// Frame ids are sorted, then shuffled with a Fisher–Yates pass driven by
/// `ChaCha8Rng::seed_from_u64(seed)`: for `i` from `n−1` down to 1 the swap
/// partner is `(next_u64() · (i+1)) >> 64`. The first `⌊70N/100⌋` shuffled
/// ids form train, the next `⌊15N/100⌋` val, the rest test; each list is
/// returned sorted.
pub fn split(frames: &[u32], seed: u64) -> Result<SplitAssignment, DatasetError> {
    let n = frames.len();
    if n < 3 {
        return Err(DatasetError::TooFewFrames(n));
    }
    let mut ids = frames.to_vec();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(DatasetError::DuplicateFrame(w[0]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        ids.swap(i, j);
    }
    let train = 70 * n / 100;
    let val = 15 * n / 100;
    let mut out = SplitAssignment {
        train: ids[..train].to_vec(),
        val: ids[train..train + val].to_vec(),
        test: ids[train + val..].to_vec(),
    };
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Horizontal flip of a representation together with its annotations.
pub fn hflip(
    rep: &FrameRepresentation,
    ann: &AnnotationSet,
) -> Result<(FrameRepresentation, AnnotationSet), DatasetError> {
    if (rep.height(), rep.width()) != (ann.height, ann.width) {
        return Err(DatasetError::DimensionMismatch(format!(
            "representation {}×{}, annotations {}×{}",
            rep.height(),
            rep.width(),
            ann.height,
            ann.width
        )));
    }
    Ok((flip_horizontal(rep), ann.flipped()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Chance of flipping each training frame.
    pub hflip_probability: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            hflip_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub frames: Vec<u32>,
    pub channels: RepresentationConfig,
    pub projection: ProjectionMode,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            frames: Vec::new(),
            channels: RepresentationConfig::default(),
            projection: ProjectionMode::Standard,
            augmentation: AugmentationPolicy::default(),
            seed: 0,
        }
    }
}

/// A dataset directory opened for reading and writing.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub intrinsics: SensorIntrinsics,
    pub split: Option<SplitAssignment>,
}

impl Dataset {
    pub fn create(
        root: impl Into<PathBuf>,
        manifest: DatasetManifest,
        intrinsics: SensorIntrinsics,
    ) -> Result<Self, DatasetError> {
        let root = root.into();
        for sub in ["frames", "annotations"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let ds = Self {
            root,
            manifest,
            intrinsics,
            split: None,
        };
        ds.save()?;
        Ok(ds)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let root = root.into();
        let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
        let meta = root.join("meta.json");
        let intrinsics = parse_metadata(&fs::read_to_string(&meta).map_err(io_err(&meta))?)?;
        let splits = root.join("splits.json");
        let split = if splits.exists() {
            Some(read_json(&splits)?)
        } else {
            None
        };
        Ok(Self {
            root,
            manifest,
            intrinsics,
            split,
        })
    }

    pub fn save(&self) -> Result<(), DatasetError> {
        write_json(&self.root.join("manifest.json"), &self.manifest)?;
        let meta = self.root.join("meta.json");
        fs::write(&meta, self.intrinsics.to_json() + "\n").map_err(io_err(&meta))?;
        if let Some(split) = &self.split {
            write_json(&self.root.join("splits.json"), split)?;
        }
        Ok(())
    }

    pub fn frame_path(&self, id: u32) -> PathBuf {
        self.root.join("frames").join(format!("frame_{id}.ldt"))
    }

    pub fn annotation_path(&self, id: u32) -> PathBuf {
        self.root.join("annotations").join(format!("{id}.json"))
    }

    /// Stores a scan and its annotations under `id` and lists the frame in
    /// the manifest (call [`save`](Self::save) to persist the manifest).
    pub fn add_frame(
        &mut self,
        id: u32,
        scan: &LidarScan,
        ann: &AnnotationSet,
    ) -> Result<(), DatasetError> {
        if (scan.height(), scan.width()) != (ann.height, ann.width) {
            return Err(DatasetError::DimensionMismatch(format!(
                "scan {}×{}, annotations {}×{}",
                scan.height(),
                scan.width(),
                ann.height,
                ann.width
            )));
        }
        ann.validate(self.manifest.task)?;
        scan.write(self.frame_path(id))?;
        let mut ann = ann.clone();
        ann.frame_id = id;
        ann.write(&self.annotation_path(id))?;
        if !self.manifest.frames.contains(&id) {
            self.manifest.frames.push(id);
        }
        Ok(())
    }

    pub fn load_scan(&self, id: u32) -> Result<LidarScan, DatasetError> {
        Ok(LidarScan::read(self.frame_path(id))?)
    }

    pub fn load_annotations(&self, id: u32) -> Result<AnnotationSet, DatasetError> {
        let ann = AnnotationSet::read(&self.annotation_path(id))?;
        ann.validate(self.manifest.task)?;
        Ok(ann)
    }

    pub fn assign_split(&mut self, seed: u64) -> Result<&SplitAssignment, DatasetError> {
        let split = split(&self.manifest.frames, seed)?;
        self.manifest.seed = seed;
        self.split = Some(split);
        self.save()?;
        Ok(self.split.as_ref().unwrap())
    }

    /// Builds the representation of one frame under `config`.
    pub fn representation(
        &self,
        id: u32,
        projector: &Projector,
        config: &RepresentationConfig,
    ) -> Result<FrameRepresentation, DatasetError> {
        let scan = self.load_scan(id)?;
        let points = if config.positional {
            Some(projector.project(&scan)?)
        } else {
            None
        };
        let mut rep = build_representation(&scan, points.as_ref(), config)?;
        rep.frame_id = id;
        Ok(rep)
    }
}

/// Source of annotated frames stored elsewhere. Recordings in a foreign
/// layout get an adapter that implements this trait.
pub trait FrameImporter {
    fn frame_ids(&self) -> Result<Vec<u32>, DatasetError>;
    fn load(&self, id: u32) -> Result<(LidarScan, AnnotationSet), DatasetError>;
}

impl FrameImporter for Dataset {
    fn frame_ids(&self) -> Result<Vec<u32>, DatasetError> {
        Ok(self.manifest.frames.clone())
    }

    fn load(&self, id: u32) -> Result<(LidarScan, AnnotationSet), DatasetError> {
        Ok((self.load_scan(id)?, self.load_annotations(id)?))
    }
}

impl Dataset {
    /// Copies every frame of `source` into this dataset, keeping ids, and
    /// saves the manifest. Returns the number of frames imported.
    pub fn import(&mut self, source: &dyn FrameImporter) -> Result<usize, DatasetError> {
        let ids = source.frame_ids()?;
        for &id in &ids {
            let (scan, ann) = source.load(id)?;
            self.add_frame(id, &scan, &ann)?;
        }
        self.save()?;
        Ok(ids.len())
    }
}

/// Manifest written next to exported tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub source: PathBuf,
    pub task: Task,
    pub projection: ProjectionMode,
    pub channels: ChannelManifest,
    pub excluded: Option<Channel>,
    pub frames: Vec<u32>,
}

impl ExportManifest {
    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        read_json(&dir.join("manifest.json"))
    }
}

/// The channel-ablation grid: no exclusion and each base channel excluded,
/// without then with positional channels.
pub fn ablation_grid() -> Vec<(Option<Channel>, bool)> {
    [false, true]
        .into_iter()
        .flat_map(|pos| {
            std::iter::once(None)
                .chain(Channel::BASE.into_iter().map(Some))
                .map(move |c| (c, pos))
        })
        .collect()
}

/// Exports every frame with the dataset's channel configuration minus
/// `excluded` into `out/frames/frame_<id>.ldt`, plus `out/manifest.json`.
/// Annotations and splits are copied so the export is self-contained.
pub fn ablation_export(
    dataset: &Dataset,
    excluded: Option<&str>,
    positional: Option<bool>,
    out: &Path,
) -> Result<ExportManifest, DatasetError> {
    let mut config = dataset.manifest.channels.clone();
    if let Some(pos) = positional {
        config.positional = pos;
    }
    let excluded = match excluded {
        None => None,
        Some(name) => {
            let ch: Channel = name
                .parse()
                .map_err(|_| DatasetError::UnknownChannel(name.to_owned()))?;
            if !config.channels().contains(&ch) {
                return Err(DatasetError::UnknownChannel(name.to_owned()));
            }
            config.excluded.push(ch);
            Some(ch)
        }
    };
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let ann_dir = out.join("annotations");
    fs::create_dir_all(&ann_dir).map_err(io_err(&ann_dir))?;
    let projector = Projector::new(&dataset.intrinsics, dataset.manifest.projection);
    dataset
        .manifest
        .frames
        .par_iter()
        .try_for_each(|&id| -> Result<(), DatasetError> {
            let rep = dataset.representation(id, &projector, &config)?;
            write_tensor(&rep, frames_dir.join(format!("frame_{id}.ldt")))?;
            let src = dataset.annotation_path(id);
            let dst = ann_dir.join(format!("{id}.json"));
            fs::copy(&src, &dst).map_err(io_err(&src))?;
            Ok(())
        })?;
    if let Some(split) = &dataset.split {
        write_json(&out.join("splits.json"), split)?;
    }
    let manifest = ExportManifest {
        source: dataset.root.clone(),
        task: dataset.manifest.task,
        projection: dataset.manifest.projection,
        channels: ChannelManifest {
            channels: config.channels(),
            config,
            resized_from: None,
        },
        excluded,
        frames: dataset.manifest.frames.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub frame_id: u32,
    pub flipped: bool,
}

/// Applies the seeded random horizontal flip to every training frame (all
/// frames when no split exists) and writes representations plus matching
/// annotations to `out`, with `out/augment.json` listing the decisions.
pub fn augment(
    dataset: &Dataset,
    out: &Path,
    seed: u64,
    flip: bool,
) -> Result<Vec<AugmentRecord>, DatasetError> {
    let ids: Vec<u32> = match &dataset.split {
        Some(split) => split.train.clone(),
        None => dataset.manifest.frames.clone(),
    };
    let p = dataset.manifest.augmentation.hflip_probability;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // decisions drawn in id order so they do not depend on scheduling
    let records: Vec<AugmentRecord> = ids
        .iter()
        .map(|&frame_id| AugmentRecord {
            frame_id,
            flipped: flip && unit_draw(&mut rng) < p,
        })
        .collect();
    let frames_dir = out.join("frames");
    let ann_dir = out.join("annotations");
    for dir in [&frames_dir, &ann_dir] {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let config = &dataset.manifest.channels;
    let projector = Projector::new(&dataset.intrinsics, dataset.manifest.projection);
    records
        .par_iter()
        .try_for_each(|rec| -> Result<(), DatasetError> {
            let rep = dataset.representation(rec.frame_id, &projector, config)?;
            let ann = dataset.load_annotations(rec.frame_id)?;
            let (rep, ann) = if rec.flipped {
                hflip(&rep, &ann)?
            } else {
                (rep, ann)
            };
            write_tensor(&rep, frames_dir.join(format!("frame_{}.ldt", rec.frame_id)))?;
            ann.write(&ann_dir.join(format!("{}.json", rec.frame_id)))
        })?;
    let manifest = ExportManifest {
        source: dataset.root.clone(),
        task: dataset.manifest.task,
        projection: dataset.manifest.projection,
        channels: ChannelManifest {
            channels: config.channels(),
            config: config.clone(),
            resized_from: None,
        },
        excluded: None,
        frames: ids,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("augment.json"), &records)?;
    Ok(records)
}

/// Uniform draw in `[0, 1)` from the top 53 bits.
fn unit_draw(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Per-class instance counts of a set of annotations.
pub fn class_histogram<'a>(
    sets: impl IntoIterator<Item = &'a AnnotationSet>,
) -> BTreeMap<Class, usize> {
    let mut out = BTreeMap::new();
    for set in sets {
        for inst in &set.instances {
            *out.entry(inst.class).or_default() += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(r, c)| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn rle_convention() {
        let m = mask_from(&["#..", ".##"]);
        assert_eq!(encode_rle(&m), vec![0, 1, 3, 2]);
        assert_eq!(decode_rle(&[0, 1, 3, 2], 2, 3).unwrap(), m);
        assert_eq!(encode_rle(&mask_from(&["..", ".."])), vec![4]);
        assert_eq!(encode_rle(&mask_from(&["##", "##"])), vec![0, 4]);
        assert!(matches!(
            decode_rle(&[1, 2], 2, 2),
            Err(DatasetError::RleLength {
                expected: 4,
                actual: 3
            })
        ));
    }

    #[test]
    fn split_counts() {
        let frames: Vec<u32> = (0..442).collect();
        assert_eq!(split(&frames, 7).unwrap().counts(), (309, 66, 67));
        let frames: Vec<u32> = (100..120).collect();
        assert_eq!(split(&frames, 7).unwrap().counts(), (14, 3, 3));
        assert_eq!(split(&[1, 2, 3], 0).unwrap().counts(), (2, 0, 1));
        assert!(matches!(
            split(&[1, 2], 0),
            Err(DatasetError::TooFewFrames(2))
        ));
        assert!(matches!(
            split(&[1, 2, 2], 0),
            Err(DatasetError::DuplicateFrame(2))
        ));
    }

    #[test]
    fn split_is_deterministic_and_order_independent() {
        let frames: Vec<u32> = (0..50).map(|i| i * 3).collect();
        let a = split(&frames, 99).unwrap();
        let mut rev = frames.clone();
        rev.reverse();
        assert_eq!(a, split(&rev, 99).unwrap());
        assert_ne!(a, split(&frames, 100).unwrap());
    }

    proptest! {
        #[test]
        fn rle_round_trip(h in 1usize..12, w in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
            let m = Array2::from_shape_fn((h, w), |(r, c)| bits[r * 12 + c]);
            let counts = encode_rle(&m);
            prop_assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), h * w);
            prop_assert_eq!(decode_rle(&counts, h, w).unwrap(), m);
        }

        #[test]
        fn split_partitions(n in 3u32..400, seed in any::<u64>()) {
            let frames: Vec<u32> = (0..n).collect();
            let s = split(&frames, seed).unwrap();
            let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, frames);
            prop_assert_eq!(s.train.len(), (70 * n / 100) as usize);
            prop_assert_eq!(s.val.len(), (15 * n / 100) as usize);
        }

        #[test]
        fn flip_keeps_pixel_counts(bits in prop::collection::vec(any::<bool>(), 4 * 9)) {
            let mut ann = AnnotationSet::new(1, 4, 9);
            ann.instances.push(Instance { class: Class::Waving, mask: Array2::from_shape_vec((4, 9), bits).unwrap() });
            let f = ann.flipped();
            let count = |a: &AnnotationSet| a.instances[0].mask.iter().filter(|&&b| b).count();
            prop_assert_eq!(count(&f), count(&ann));
            prop_assert_eq!(f.flipped(), ann);
        }
    }

    #[test]
    fn single_pixel_flip() {
        let mut ann = AnnotationSet::new(1, 2, 10);
        let mut mask = Array2::from_elem((2, 10), false);
        mask[(1, 3)] = true;
        ann.instances.push(Instance {
            class: Class::Person,
            mask,
        });
        let f = ann.flipped();
        assert!(f.instances[0].mask[(1, 6)]);
        assert_eq!(f.instances[0].mask.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn annotation_json_and_task_checks() {
        let mut ann = AnnotationSet::new(5, 2, 3);
        ann.instances.push(Instance {
            class: Class::Sitting,
            mask: mask_from(&["##.", "..."]),
        });
        let back = AnnotationSet::from_json(&ann.to_json()).unwrap();
        assert_eq!(back, ann);
        assert!(ann.validate(Task::Action).is_ok());
        assert!(matches!(
            ann.validate(Task::Person),
            Err(DatasetError::WrongTask { .. })
        ));
        assert!(ann.to_json().contains("\"rle\":[0,2,4]"));
    }

    #[test]
    fn ablation_grid_has_ten_rows() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 10);
        assert_eq!(grid[0], (None, false));
        assert_eq!(grid[4], (Some(Channel::RevRange), false));
        assert_eq!(grid[5], (None, true));
    }

    #[test]
    fn unit_draw_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let v = unit_draw(&mut rng);
            assert!((0.0..1.0).contains(&v));
        }
    }
}
