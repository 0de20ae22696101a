use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use domescan_core::dataset::{self, ablation_grid, AnnotationSet, Dataset, DatasetManifest, Task};
use domescan_core::evaluation::{
    self, ablation_rows, ablation_table, match_all, parse_predictions, AblationRow, MatchParams,
    PredictionSet,
};
use domescan_core::ingest::{self, BenchConfig, ListenConfig, Listener};
use domescan_core::intrinsics::{parse_metadata, SensorIntrinsics};
use domescan_core::projection::{ProjectionMode, Projector};
use domescan_core::representation::{
    build_representation, resize, write_tensor, RepresentationConfig,
};
use domescan_core::synth::{self, RenderOptions, Scene};
use domescan_core::LidarScan;

#[derive(Parser)]
#[command(name = "domescan", version, about = "Hemisphere LiDAR scan pipeline")]
struct Cli {
    /// Sensor metadata JSON.
    #[arg(long, global = true, env = "DOMESCAN_META")]
    meta: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for per-frame stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a recorded packet stream into scan files.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Receive packets over UDP and write assembled scans.
    Listen {
        #[arg(long, default_value = "0.0.0.0:7502")]
        bind: SocketAddr,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many scans.
        #[arg(long)]
        frames: Option<usize>,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = ingest::DEFAULT_QUEUE_CAPACITY)]
        queue: usize,
    },
    /// Send a recorded stream to a UDP endpoint.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: SocketAddr,
        /// Pause between datagrams in microseconds.
        #[arg(long, default_value_t = 100)]
        gap_us: u64,
        /// Fraction of datagrams to drop.
        #[arg(long, default_value_t = 0.0)]
        loss: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Project scan files to point images.
    Project {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Build model-ready representation tensors from scan files.
    Export {
        /// Scan files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated channels; `pos` adds the positional planes.
        #[arg(long, default_value = "nir,refl,signal,revrange")]
        channels: String,
        /// Resize to HxW, e.g. 64x512.
        #[arg(long)]
        resize: Option<String>,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Assign the seeded train/val/test split of a dataset.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Write flip-augmented training tensors.
    Augment {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Apply the random horizontal flip.
        #[arg(long)]
        flip: bool,
    },
    /// Export tensors with one channel excluded, or the whole ablation grid.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Channel to exclude (nir, refl, signal, range, posx, posy, posz).
        #[arg(long, conflicts_with = "grid")]
        exclude: Option<String>,
        /// Force positional channels on or off.
        #[arg(long)]
        pos: Option<bool>,
        /// Export all ten configurations into subdirectories.
        #[arg(long)]
        grid: bool,
    },
    /// Score predictions against ground-truth annotations.
    Eval {
        /// Dataset or export directory (or a directory of annotation files).
        #[arg(long)]
        gt: PathBuf,
        /// JSON-lines predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = evaluation::DEFAULT_IOU_THRESHOLD)]
        iou: f64,
        #[arg(long, default_value_t = evaluation::DEFAULT_SCORE_THRESHOLD)]
        score: f64,
        #[arg(long)]
        task: Option<Task>,
        /// Split to score (default: test when a split exists, else all).
        #[arg(long)]
        split: Option<String>,
    },
    /// Render the channel-ablation table from a JSON list of rows.
    Table {
        #[arg(long)]
        input: PathBuf,
    },
    /// Render synthetic scenes into a packet stream.
    Synth {
        /// Scene JSON; omit to generate random scenes.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a dataset with scans and annotations here.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Primitives per random scene.
        #[arg(long, default_value_t = 8)]
        primitives: usize,
        /// Task vocabulary for random scenes.
        #[arg(long, default_value = "person")]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian range noise in mm.
        #[arg(long, default_value_t = 0.0)]
        noise_mm: f64,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Time assemble → project → represent over a recorded stream.
    Bench {
        #[arg(long)]
        input: PathBuf,
        /// Include positional channels.
        #[arg(long)]
        pos: bool,
        #[arg(long, default_value_t = 100)]
        min_frames: usize,
        #[command(flatten)]
        mode: ModeArg,
    },
}

#[derive(Args, Clone, Copy)]
struct ModeArg {
    /// Projection equations: standard, or paper for the printed y variant.
    #[arg(long = "mode", default_value = "standard")]
    mode: ProjectionMode,
}

/// A usage problem detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n\nRun `domescan --help` for usage.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn intrinsics(cli: &Cli) -> Result<SensorIntrinsics> {
    let path = cli
        .meta
        .as_ref()
        .ok_or_else(|| Usage("--meta (or DOMESCAN_META) is required".into()))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_metadata(&text).with_context(|| format!("metadata {}", path.display()))
}

fn emit(cli: &Cli, value: serde_json::Value, text: impl FnOnce() -> String) {
    if cli.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&value).expect("json values serialize")
        );
    } else {
        println!("{}", text());
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Expands directories to their `.ldt` files, sorted by name.
fn scan_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ldt"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Usage(format!("--resize expects HxW, got `{s}`")))?;
    let h = h
        .parse()
        .map_err(|_| Usage(format!("bad height in `{s}`")))?;
    let w = w
        .parse()
        .map_err(|_| Usage(format!("bad width in `{s}`")))?;
    Ok((h, w))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Decode { input, out } => decode(cli, input, out),
        Command::Listen {
            bind,
            out,
            frames,
            duration,
            queue,
        } => listen(cli, *bind, out, *frames, *duration, *queue),
        Command::Replay {
            input,
            target,
            gap_us,
            loss,
            seed,
        } => replay(cli, input, *target, *gap_us, *loss, *seed),
        Command::Project { input, out, mode } => project(cli, input, out, mode.mode),
        Command::Export {
            input,
            out,
            channels,
            resize,
            mode,
        } => export(cli, input, out, channels, resize.as_deref(), mode.mode),
        Command::Split { dataset, seed } => split(cli, dataset, *seed),
        Command::Augment {
            dataset,
            out,
            seed,
            flip,
        } => augment(cli, dataset, out, *seed, *flip),
        Command::Ablate {
            dataset,
            out,
            exclude,
            pos,
            grid,
        } => ablate(cli, dataset, out, exclude.as_deref(), *pos, *grid),
        Command::Eval {
            gt,
            pred,
            iou,
            score,
            task,
            split,
        } => eval(cli, gt, pred, *iou, *score, *task, split.as_deref()),
        Command::Table { input } => table(cli, input),
        Command::Synth {
            scene,
            frames,
            out,
            dataset,
            primitives,
            task,
            seed,
            noise_mm,
            mode,
        } => synthesize(
            cli,
            SynthArgs {
                scene: scene.as_deref(),
                frames: *frames,
                out,
                dataset: dataset.as_deref(),
                primitives: *primitives,
                task: *task,
                seed: *seed,
                noise_mm: *noise_mm,
                mode: mode.mode,
            },
        ),
        Command::Bench {
            input,
            pos,
            min_frames,
            mode,
        } => bench(cli, input, *pos, *min_frames, mode.mode),
    }
}

fn write_scans(out: &Path, scans: &[LidarScan]) -> Result<()> {
    create_dir(out)?;
    for scan in scans {
        let path = out.join(scan.file_name());
        scan.write(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn decode(cli: &Cli, input: &Path, out: &Path) -> Result<()> {
    let intr = intrinsics(cli)?;
    let data = read_bytes(input)?;
    let (scans, stats) = ingest::assemble(&data, &intr)?;
    write_scans(out, &scans)?;
    let frames: Vec<_> = scans
        .iter()
        .map(|s| json!({"frame_id": s.frame_id, "completeness": s.completeness()}))
        .collect();
    emit(cli, json!({"stats": stats, "frames": frames}), || {
        let mut t = format!(
            "{} scans from {} packets ({} decode errors, {} late)",
            scans.len(),
            stats.packets,
            stats.decode_errors,
            stats.late_packets
        );
        for s in &scans {
            t.push_str(&format!(
                "\n  frame {:>5}  completeness {:.4}",
                s.frame_id,
                s.completeness()
            ));
        }
        t
    });
    Ok(())
}

fn listen(
    cli: &Cli,
    bind: SocketAddr,
    out: &Path,
    frames: Option<usize>,
    duration: Option<f64>,
    queue: usize,
) -> Result<()> {
    if frames.is_none() && duration.is_none() {
        return Err(Usage("listen needs --frames or --duration".into()).into());
    }
    let intr = intrinsics(cli)?;
    create_dir(out)?;
    let config = ListenConfig {
        queue_capacity: queue.max(1),
        ..ListenConfig::default()
    };
    let listener = Listener::bind(bind, &intr, config)?;
    log::info!("listening on {}", listener.local_addr());
    let deadline = duration.map(|s| Instant::now() + Duration::from_secs_f64(s));
    let mut written = 0usize;
    let save = |scan: LidarScan| -> Result<()> {
        let path = out.join(scan.file_name());
        scan.write(&path)
            .with_context(|| format!("writing {}", path.display()))
    };
    while frames.is_none_or(|n| written < n) && deadline.is_none_or(|d| Instant::now() < d) {
        if let Some(scan) = listener.recv_timeout(Duration::from_millis(100)) {
            save(scan)?;
            written += 1;
        }
    }
    let (rest, stats) = listener.stop()?;
    for scan in rest {
        if frames.is_some_and(|n| written >= n) {
            break;
        }
        save(scan)?;
        written += 1;
    }
    emit(cli, json!({"scans": written, "stats": stats}), || {
        format!(
            "{written} scans written ({} packets, {} decode errors, {} late, {} dropped)",
            stats.packets, stats.decode_errors, stats.late_packets, stats.dropped_scans
        )
    });
    Ok(())
}

fn replay(
    cli: &Cli,
    input: &Path,
    target: SocketAddr,
    gap_us: u64,
    loss: f64,
    seed: u64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&loss) {
        return Err(Usage(format!("--loss must lie in [0, 1], got {loss}")).into());
    }
    let data = read_bytes(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = 0usize;
    let sent = ingest::replay(&data, target, Duration::from_micros(gap_us), |_| {
        let keep = loss == 0.0 || rng.random::<f64>() >= loss;
        dropped += !keep as usize;
        keep
    })?;
    emit(cli, json!({"sent": sent, "dropped": dropped}), || {
        format!("{sent} datagrams sent, {dropped} dropped")
    });
    Ok(())
}

fn project(cli: &Cli, input: &Path, out: &Path, mode: ProjectionMode) -> Result<()> {
    let intr = intrinsics(cli)?;
    let scan = LidarScan::read(input).with_context(|| format!("reading {}", input.display()))?;
    let points = Projector::new(&intr, mode).project(&scan)?;
    points
        .write(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let valid = points.valid.iter().filter(|&&v| v).count();
    emit(
        cli,
        json!({"frame_id": scan.frame_id, "valid_points": valid, "mode": mode, "out": out}),
        || {
            format!(
                "frame {}: {valid} points -> {}",
                scan.frame_id,
                out.display()
            )
        },
    );
    Ok(())
}

fn export(
    cli: &Cli,
    inputs: &[PathBuf],
    out: &Path,
    channels: &str,
    size: Option<&str>,
    mode: ProjectionMode,
) -> Result<()> {
    use rayon::prelude::*;

    let intr = intrinsics(cli)?;
    let config = RepresentationConfig::default()
        .select(channels)
        .map_err(|e| Usage(e.to_string()))?;
    let size = size.map(parse_size).transpose()?;
    let files = scan_inputs(inputs)?;
    create_dir(out)?;
    let projector = Projector::new(&intr, mode);
    let written: Vec<String> = files
        .par_iter()
        .map(|path| -> Result<String> {
            let scan =
                LidarScan::read(path).with_context(|| format!("reading {}", path.display()))?;
            let points = if config.positional {
                Some(projector.project(&scan)?)
            } else {
                None
            };
            let mut rep = build_representation(&scan, points.as_ref(), &config)?;
            if let Some(s) = size {
                rep = resize(&rep, s);
            }
            let name = scan.file_name();
            write_tensor(&rep, out.join(&name))?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    let manifest =
        json!({"channels": config.channels(), "config": config, "resized_to": size, "mode": mode});
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    emit(
        cli,
        json!({"written": written, "manifest": manifest}),
        || format!("{} tensors -> {}", written.len(), out.display()),
    );
    Ok(())
}

fn split(cli: &Cli, root: &Path, seed: u64) -> Result<()> {
    let mut ds = Dataset::open(root)?;
    let counts = ds.assign_split(seed)?.counts();
    emit(
        cli,
        json!({"seed": seed, "train": counts.0, "val": counts.1, "test": counts.2}),
        || {
            format!(
                "split seed {seed}: train {} / val {} / test {}",
                counts.0, counts.1, counts.2
            )
        },
    );
    Ok(())
}

fn augment(cli: &Cli, root: &Path, out: &Path, seed: u64, flip: bool) -> Result<()> {
    let ds = Dataset::open(root)?;
    let records = dataset::augment(&ds, out, seed, flip)?;
    let flipped = records.iter().filter(|r| r.flipped).count();
    emit(
        cli,
        json!({"frames": records.len(), "flipped": flipped}),
        || {
            format!(
                "{} frames written, {flipped} flipped -> {}",
                records.len(),
                out.display()
            )
        },
    );
    Ok(())
}

fn ablate(
    cli: &Cli,
    root: &Path,
    out: &Path,
    exclude: Option<&str>,
    pos: Option<bool>,
    grid: bool,
) -> Result<()> {
    let ds = Dataset::open(root)?;
    let runs: Vec<(Option<String>, Option<bool>, PathBuf)> = if grid {
        ablation_grid()
            .into_iter()
            .map(|(ch, p)| {
                let name = format!(
                    "{}_{}",
                    ch.map_or("none", |c| c.name()),
                    if p { "pos" } else { "nopos" }
                );
                (ch.map(|c| c.name().to_owned()), Some(p), out.join(name))
            })
            .collect()
    } else {
        vec![(exclude.map(str::to_owned), pos, out.to_owned())]
    };
    let mut summary = Vec::new();
    for (ch, p, dir) in runs {
        let m = dataset::ablation_export(&ds, ch.as_deref(), p, &dir)?;
        summary.push(json!({
            "dir": dir,
            "excluded": m.excluded,
            "channels": m.channels.channels,
            "frames": m.frames.len(),
        }));
    }
    emit(cli, json!(summary), || {
        summary
            .iter()
            .map(|s| {
                format!(
                    "{} -> {} channels, {} frames",
                    s["dir"].as_str().unwrap_or(""),
                    s["channels"].as_array().map_or(0, Vec::len),
                    s["frames"]
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(())
}

/// Loads annotations keyed by frame id from a dataset or export directory.
fn load_ground_truth(dir: &Path, split: Option<&str>) -> Result<BTreeMap<u32, AnnotationSet>> {
    let ann_dir = if dir.join("annotations").is_dir() {
        dir.join("annotations")
    } else {
        dir.to_owned()
    };
    let mut gt = BTreeMap::new();
    for entry in fs::read_dir(&ann_dir).with_context(|| format!("listing {}", ann_dir.display()))? {
        let path = entry?.path();
        if path.extension().is_none_or(|x| x != "json") {
            continue;
        }
        let ann = AnnotationSet::read(&path)?;
        gt.insert(ann.frame_id, ann);
    }
    let splits = dir.join("splits.json");
    let name = match split {
        Some(name) => Some(name),
        None if splits.exists() => Some("test"),
        None => None,
    };
    if let Some(name) = name.filter(|&n| n != "all") {
        if !splits.exists() {
            bail!(
                "--split {name} requested but {} is missing",
                splits.display()
            );
        }
        let assignment: dataset::SplitAssignment =
            serde_json::from_str(&fs::read_to_string(&splits)?).context("parsing splits.json")?;
        let keep = assignment
            .get(name)
            .ok_or_else(|| Usage(format!("unknown split `{name}` (train|val|test|all)")))?;
        gt.retain(|id, _| keep.contains(id));
    }
    Ok(gt)
}

fn eval(
    cli: &Cli,
    gt_dir: &Path,
    pred: &Path,
    iou: f64,
    score: f64,
    task: Option<Task>,
    split: Option<&str>,
) -> Result<()> {
    for (name, v) in [("--iou", iou), ("--score", score)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Usage(format!("{name} must lie in [0, 1], got {v}")).into());
        }
    }
    let gt = load_ground_truth(gt_dir, split)?;
    let text = fs::read_to_string(pred).with_context(|| format!("reading {}", pred.display()))?;
    let records =
        parse_predictions(&text).with_context(|| format!("predictions {}", pred.display()))?;
    if let Some(task) = task {
        for ann in gt.values() {
            ann.validate(task)?;
        }
    }
    let frames: Vec<(AnnotationSet, PredictionSet)> = gt
        .values()
        .map(|ann| {
            let set = PredictionSet::from_records(ann.frame_id, &records, ann.height, ann.width)?;
            Ok((ann.clone(), set))
        })
        .collect::<Result<_>>()?;
    let params = MatchParams {
        iou_threshold: iou,
        score_threshold: score,
    };
    let counts = match_all(&frames, params)?;
    let report = evaluation::report(&counts, task, params);
    emit(
        cli,
        json!({"frames": frames.len(), "report": report}),
        || format!("{} frames\n{}", frames.len(), report.to_table()),
    );
    Ok(())
}

fn table(cli: &Cli, input: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let rows: Vec<AblationRow> = serde_json::from_str(&text).context("parsing ablation rows")?;
    if rows.is_empty() {
        bail!("no ablation rows in {}", input.display());
    }
    let pairs: Vec<_> = rows.iter().map(|r| (r.key, r.metrics)).collect();
    emit(cli, json!(ablation_rows(pairs.clone())), || {
        ablation_table(pairs)
    });
    Ok(())
}

struct SynthArgs<'a> {
    scene: Option<&'a Path>,
    frames: usize,
    out: &'a Path,
    dataset: Option<&'a Path>,
    primitives: usize,
    task: Task,
    seed: u64,
    noise_mm: f64,
    mode: ProjectionMode,
}

fn synthesize(cli: &Cli, args: SynthArgs<'_>) -> Result<()> {
    let intr = intrinsics(cli)?;
    if args.frames == 0 {
        return Err(Usage("--frames must be at least 1".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let base = args
        .scene
        .map(|p| Scene::read(p).with_context(|| format!("scene {}", p.display())))
        .transpose()?;
    let task = base.as_ref().and_then(Scene::task).unwrap_or(args.task);
    let projector = Projector::new(&intr, args.mode);
    let mut ds = args
        .dataset
        .map(|root| {
            let mut manifest = DatasetManifest::new(task);
            manifest.projection = args.mode;
            Dataset::create(root, manifest, intr.clone())
        })
        .transpose()?;
    let mut stream = Vec::new();
    let mut valid = 0usize;
    for k in 0..args.frames {
        let scene = match &base {
            Some(s) => s.at_frame(k),
            None => Scene::random(&mut rng, args.primitives, task),
        };
        let options = RenderOptions {
            noise_std_mm: args.noise_mm,
            seed: args.seed.wrapping_add(k as u64),
        };
        let mut r = synth::render_with(&scene, &projector, &intr, options);
        r.scan.frame_id = k as u16;
        valid += r.scan.valid_count();
        synth::encode_scan(&r.scan, &intr, k as u64, &mut stream);
        if let Some(ds) = ds.as_mut() {
            ds.add_frame(k as u32, &r.scan, &r.annotations)?;
        }
    }
    if let Some(ds) = &ds {
        ds.save()?;
    }
    fs::write(args.out, &stream).with_context(|| format!("writing {}", args.out.display()))?;
    emit(
        cli,
        json!({"frames": args.frames, "bytes": stream.len(), "valid_pixels": valid, "dataset": args.dataset}),
        || {
            format!(
                "{} frames, {} bytes -> {}",
                args.frames,
                stream.len(),
                args.out.display()
            )
        },
    );
    Ok(())
}

fn bench(
    cli: &Cli,
    input: &Path,
    pos: bool,
    min_frames: usize,
    mode: ProjectionMode,
) -> Result<()> {
    let intr = intrinsics(cli)?;
    let data = read_bytes(input)?;
    let config = BenchConfig {
        mode,
        representation: RepresentationConfig::default().with_positional(pos),
        min_frames,
    };
    let report = ingest::bench(&data, &intr, &config)?;
    emit(cli, json!(report), || {
        format!(
            "{} scans of {}×{} ({} channels): {:.1} scans/s, mean {:.2} ms, p99 {:.2} ms",
            report.frames,
            report.width,
            report.height,
            report.channels,
            report.scans_per_second,
            report.mean_latency_ms,
            report.p99_latency_ms
        )
    });
    Ok(())
}
