use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use domescan_core::container;
use domescan_core::dataset::{
    self, ablation_export, Dataset, DatasetError, DatasetManifest, ExportManifest, Task,
};
use domescan_core::representation::Channel;
use domescan_core::synth::{self, Scene};
use domescan_core::{ProjectionMode, SensorIntrinsics};

fn build(root: &std::path::Path, frames: u32) -> Dataset {
    let intr = SensorIntrinsics::uniform_dome(16, 128);
    let mut ds = Dataset::create(root, DatasetManifest::new(Task::Person), intr.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for id in 0..frames {
        let r = synth::render(
            &Scene::random(&mut rng, 5, Task::Person),
            &intr,
            ProjectionMode::Standard,
        );
        ds.add_frame(100 + id, &r.scan, &r.annotations).unwrap();
    }
    ds.save().unwrap();
    ds
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = build(dir.path(), 20);
    ds.assign_split(3).unwrap();
    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(reopened.manifest, ds.manifest);
    assert_eq!(reopened.split, ds.split);
    assert_eq!(reopened.split.as_ref().unwrap().counts(), (14, 3, 3));
    for &id in &ds.manifest.frames {
        assert!(reopened.load_scan(id).is_ok());
        assert_eq!(reopened.load_annotations(id).unwrap().frame_id, id);
    }
}

#[test]
fn ablation_export_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build(&dir.path().join("ds"), 4);
    let out = dir.path().join("no_nir");
    let m = ablation_export(&ds, Some("nir"), Some(false), &out).unwrap();
    assert_eq!(
        m.channels.channels,
        vec![Channel::Reflectivity, Channel::Signal, Channel::RevRange]
    );
    let t = container::read_tensor(out.join("frames/frame_100.ldt")).unwrap();
    assert_eq!(t.dims, vec![3, 16, 128]);
    assert_eq!(ExportManifest::read(&out).unwrap(), m);

    let m = ablation_export(&ds, Some("range"), Some(true), &dir.path().join("no_range")).unwrap();
    assert_eq!(m.channels.channels.len(), 6);
    assert!(m.channels.channels.contains(&Channel::PosY));

    assert!(matches!(
        ablation_export(&ds, Some("depth"), None, &dir.path().join("x")),
        Err(DatasetError::UnknownChannel(_))
    ));
    assert!(matches!(
        ablation_export(&ds, Some("posx"), Some(false), &dir.path().join("y")),
        Err(DatasetError::UnknownChannel(_))
    ));
}

#[test]
fn augmentation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = build(&dir.path().join("ds"), 30);
    ds.assign_split(9).unwrap();
    let a = dataset::augment(&ds, &dir.path().join("a"), 5, true).unwrap();
    let b = dataset::augment(&ds, &dir.path().join("b"), 5, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 21);
    assert!(a.iter().any(|r| r.flipped) && a.iter().any(|r| !r.flipped));
    for r in &a {
        let name = format!("frames/frame_{}.ldt", r.frame_id);
        assert_eq!(
            std::fs::read(dir.path().join("a").join(&name)).unwrap(),
            std::fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
    let none = dataset::augment(&ds, &dir.path().join("c"), 5, false).unwrap();
    assert!(none.iter().all(|r| !r.flipped));
}

#[test]
fn import_copies_frames() {
    let dir = tempfile::tempdir().unwrap();
    let src = build(&dir.path().join("src"), 3);
    let mut dst = Dataset::create(
        dir.path().join("dst"),
        DatasetManifest::new(Task::Person),
        src.intrinsics.clone(),
    )
    .unwrap();
    assert_eq!(dst.import(&src).unwrap(), 3);
    let reopened = Dataset::open(dir.path().join("dst")).unwrap();
    assert_eq!(reopened.manifest.frames, vec![100, 101, 102]);
    assert_eq!(
        reopened.load_scan(101).unwrap(),
        src.load_scan(101).unwrap()
    );
}
