//! Scan assembly from packet streams, UDP ingest and the throughput bench.
//!
//! Columns are destaggered on insertion: the block with measurement id `m`
//! writes beam `b` into image column `(m + pixel_shift_by_row[b]) mod W`.
//!
//! Frames close on frame id change. The assembler keeps at most two frames
//! open so packets straddling a frame boundary still land in the right scan:
//! when a newer frame starts, the previous one is emitted right away if it is
//! complete, otherwise it waits until the next frame starts or the source
//! ends. Packets for frames that were already emitted are counted as late and
//! dropped.

use std::collections::VecDeque;
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::container::{self, ContainerError, Tensor, TensorData};
use crate::intrinsics::SensorIntrinsics;
use crate::projection::{ProjectionMode, Projector};
use crate::representation::{build_representation, RepresentationConfig};
use crate::wire::{self, LidarPacket, PacketSlices, WireError};

/// How far behind the newest frame id a packet may be and still count as
/// late rather than as a stream discontinuity.
const LATE_WINDOW: i16 = 16;

pub const DEFAULT_QUEUE_CAPACITY: usize = 4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("packet carries {found} beams, intrinsics expect {expected}")]
    BeamCountMismatch { expected: usize, found: usize },
    #[error("cannot bind UDP socket on {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("bench needs at least {required} full frames, source holds {found}")]
    InsufficientFrames { required: usize, found: usize },
    #[error("scan grids disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One destaggered H×W scan of raw channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub frame_id: u16,
    pub range_mm: Array2<u32>,
    pub signal: Array2<u16>,
    pub reflectivity: Array2<u16>,
    pub nir: Array2<u16>,
    pub valid: Array2<bool>,
    /// Distinct measurement ids received for this frame.
    pub received_columns: usize,
}

impl LidarScan {
    /// A scan with every column received and no returns.
    pub fn empty(frame_id: u16, height: usize, width: usize) -> Self {
        Self {
            frame_id,
            range_mm: Array2::zeros((height, width)),
            signal: Array2::zeros((height, width)),
            reflectivity: Array2::zeros((height, width)),
            nir: Array2::zeros((height, width)),
            valid: Array2::from_elem((height, width), false),
            received_columns: width,
        }
    }

    pub fn height(&self) -> usize {
        self.range_mm.nrows()
    }

    pub fn width(&self) -> usize {
        self.range_mm.ncols()
    }

    /// Fraction of the scan's columns that were received.
    pub fn completeness(&self) -> f64 {
        self.received_columns as f64 / self.width() as f64
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Container records: u32 `[4, H, W]` (range, signal, reflectivity, nir),
    /// u8 `[H, W]` validity, u32 `[2]` (frame id, received columns).
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let mut grids = Vec::with_capacity(4 * self.range_mm.len());
        grids.extend(self.range_mm.iter().copied());
        for g in [&self.signal, &self.reflectivity, &self.nir] {
            grids.extend(g.iter().map(|&v| v as u32));
        }
        vec![
            Tensor::new(vec![4, h, w], TensorData::U32(grids)),
            Tensor::new(
                vec![h, w],
                TensorData::U8(self.valid.iter().map(|&v| v as u8).collect()),
            ),
            Tensor::new(
                vec![2],
                TensorData::U32(vec![self.frame_id as u32, self.received_columns as u32]),
            ),
        ]
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, IngestError> {
        if tensors.len() != 3 {
            return Err(ContainerError::RecordCount {
                expected: 3,
                found: tensors.len(),
            }
            .into());
        }
        let mut it = tensors.into_iter();
        let (gdims, grids) = it.next().unwrap().expect_u32(0)?;
        let (vdims, valid) = it.next().unwrap().expect_u8(1)?;
        let (_, info) = it.next().unwrap().expect_u32(2)?;
        if gdims.len() != 3 || gdims[0] != 4 || vdims != gdims[1..] || info.len() != 2 {
            return Err(IngestError::Shape(format!(
                "grids {gdims:?}, validity {vdims:?}, info length {}",
                info.len()
            )));
        }
        let (h, w) = (gdims[1], gdims[2]);
        let n = h * w;
        let narrow = |k: usize| -> Result<Array2<u16>, IngestError> {
            let v = grids[k * n..(k + 1) * n]
                .iter()
                .map(|&x| {
                    u16::try_from(x).map_err(|_| {
                        IngestError::Shape(format!("channel {k} value {x} exceeds u16"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Array2::from_shape_vec((h, w), v).unwrap())
        };
        Ok(Self {
            frame_id: u16::try_from(info[0])
                .map_err(|_| IngestError::Shape(format!("frame id {}", info[0])))?,
            range_mm: Array2::from_shape_vec((h, w), grids[..n].to_vec()).unwrap(),
            signal: narrow(1)?,
            reflectivity: narrow(2)?,
            nir: narrow(3)?,
            valid: Array2::from_shape_vec((h, w), valid.iter().map(|&v| v != 0).collect()).unwrap(),
            received_columns: info[1] as usize,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), IngestError> {
        container::write_tensors(path, &self.to_tensors())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        Self::from_tensors(container::read_tensors(path)?)
    }

    /// Conventional file name, `frame_<id>.ldt`.
    pub fn file_name(&self) -> String {
        format!("frame_{}.ldt", self.frame_id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub packets: u64,
    pub decode_errors: u64,
    pub late_packets: u64,
    pub emitted_scans: u64,
    /// Scans discarded because the hand-over queue was full.
    pub dropped_scans: u64,
}

struct FrameBuffer {
    scan: LidarScan,
    received: Vec<bool>,
}

impl FrameBuffer {
    fn new(frame_id: u16, height: usize, width: usize) -> Self {
        let mut scan = LidarScan::empty(frame_id, height, width);
        scan.received_columns = 0;
        Self {
            scan,
            received: vec![false; width],
        }
    }

    fn is_complete(&self) -> bool {
        self.scan.received_columns == self.received.len()
    }

    fn into_scan(mut self, shifts: &[usize]) -> LidarScan {
        let w = self.received.len();
        for ((b, col), valid) in self.scan.valid.indexed_iter_mut() {
            let m = (col + w - shifts[b]) % w;
            *valid = self.received[m] && self.scan.range_mm[(b, col)] != 0;
        }
        self.scan
    }
}

/// Incremental packet-to-scan assembler.
pub struct Assembler {
    height: usize,
    width: usize,
    /// Per-row shift reduced to `[0, W)`.
    shifts: Vec<usize>,
    range_unit_mm: f64,
    open: VecDeque<FrameBuffer>,
    stats: IngestStats,
}

impl Assembler {
    pub fn new(intr: &SensorIntrinsics) -> Self {
        let w = intr.scan_width as i64;
        Self {
            height: intr.beam_count,
            width: intr.scan_width,
            shifts: intr
                .pixel_shift_by_row
                .iter()
                .map(|&s| (s as i64).rem_euclid(w) as usize)
                .collect(),
            range_unit_mm: intr.range_unit_mm,
            open: VecDeque::with_capacity(2),
            stats: IngestStats::default(),
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    /// Decodes and inserts one packet. Decode failures are counted and the
    /// packet dropped; only a beam-count mismatch is an error.
    pub fn push_bytes(&mut self, bytes: &[u8]) -> Result<Vec<LidarScan>, IngestError> {
        match wire::decode_packet(bytes) {
            Ok(p) => self.push_packet(&p),
            Err(e) => {
                self.record_decode_error(&e);
                Ok(Vec::new())
            }
        }
    }

    pub fn record_decode_error(&mut self, err: &WireError) {
        log::debug!("dropping packet: {err}");
        self.stats.packets += 1;
        self.stats.decode_errors += 1;
    }

    pub fn push_packet(&mut self, packet: &LidarPacket) -> Result<Vec<LidarScan>, IngestError> {
        if packet.beam_count as usize != self.height {
            return Err(IngestError::BeamCountMismatch {
                expected: self.height,
                found: packet.beam_count as usize,
            });
        }
        if let Err(e) = packet.check_against(self.width) {
            self.record_decode_error(&e);
            return Ok(Vec::new());
        }
        self.stats.packets += 1;
        let frame_id = packet.frame_id();
        let mut emitted = Vec::new();
        let idx = match self.open.iter().position(|f| f.scan.frame_id == frame_id) {
            Some(idx) => idx,
            None => {
                if let Some(newest) = self.open.back() {
                    let delta = frame_id.wrapping_sub(newest.scan.frame_id) as i16;
                    if (-LATE_WINDOW..0).contains(&delta) {
                        self.stats.late_packets += 1;
                        return Ok(emitted);
                    }
                }
                if self.open.len() == 2 {
                    emitted.push(self.emit_front());
                }
                if self.open.front().is_some_and(FrameBuffer::is_complete) {
                    emitted.push(self.emit_front());
                }
                self.open
                    .push_back(FrameBuffer::new(frame_id, self.height, self.width));
                self.open.len() - 1
            }
        };
        let (width, unit) = (self.width, self.range_unit_mm);
        let shifts = &self.shifts;
        let frame = &mut self.open[idx];
        for block in &packet.blocks {
            let m = block.measurement_id as usize;
            if !frame.received[m] {
                frame.received[m] = true;
                frame.scan.received_columns += 1;
            }
            for (b, beam) in block.beams.iter().enumerate() {
                let col = (m + shifts[b]) % width;
                let px = (b, col);
                frame.scan.range_mm[px] = scale_range(beam.range_raw, unit);
                frame.scan.signal[px] = beam.signal;
                frame.scan.reflectivity[px] = beam.reflectivity;
                frame.scan.nir[px] = beam.nir;
            }
        }
        Ok(emitted)
    }

    fn emit_front(&mut self) -> LidarScan {
        self.stats.emitted_scans += 1;
        let frame = self.open.pop_front().expect("caller checked");
        frame.into_scan(&self.shifts)
    }

    /// Emits every frame still open, oldest first.
    pub fn finish(&mut self) -> Vec<LidarScan> {
        let mut out = Vec::with_capacity(self.open.len());
        while !self.open.is_empty() {
            out.push(self.emit_front());
        }
        out
    }
}

pub(crate) fn scale_range(raw: u32, unit_mm: f64) -> u32 {
    if unit_mm == 1.0 {
        raw
    } else {
        (raw as f64 * unit_mm).round().min(u32::MAX as f64) as u32
    }
}

/// Lazily assembles scans from a recorded stream.
pub struct ScanStream<'a> {
    slices: PacketSlices<'a>,
    assembler: Assembler,
    pending: VecDeque<LidarScan>,
    finished: bool,
    failed: bool,
}

impl<'a> ScanStream<'a> {
    pub fn new(data: &'a [u8], intr: &SensorIntrinsics) -> Self {
        Self {
            slices: PacketSlices::new(data),
            assembler: Assembler::new(intr),
            pending: VecDeque::new(),
            finished: false,
            failed: false,
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.assembler.stats()
    }
}

impl Iterator for ScanStream<'_> {
    type Item = Result<LidarScan, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(scan) = self.pending.pop_front() {
                return Some(Ok(scan));
            }
            if self.finished || self.failed {
                return None;
            }
            match self.slices.next() {
                Some(Ok(bytes)) => match self.assembler.push_bytes(bytes) {
                    Ok(scans) => self.pending.extend(scans),
                    Err(e) => {
                        self.failed = true;
                        return Some(Err(e));
                    }
                },
                Some(Err(e)) => self.assembler.record_decode_error(&e),
                None => {
                    self.finished = true;
                    self.pending.extend(self.assembler.finish());
                }
            }
        }
    }
}

/// Assembles a whole recorded stream.
pub fn assemble(
    data: &[u8],
    intr: &SensorIntrinsics,
) -> Result<(Vec<LidarScan>, IngestStats), IngestError> {
    let mut stream = ScanStream::new(data, intr);
    let scans = stream.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((scans, stream.stats()))
}

/// Bounded hand-over queue; a push into a full queue evicts the oldest scan.
struct ScanQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

struct QueueState {
    items: VecDeque<LidarScan>,
    capacity: usize,
    closed: bool,
    evicted: u64,
}

impl ScanQueue {
    fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                capacity: capacity.max(1),
                closed: false,
                evicted: 0,
            }),
            ready: Condvar::new(),
        }
    }

    fn push(&self, scan: LidarScan) {
        let mut st = self.state.lock().unwrap();
        if st.items.len() == st.capacity {
            st.items.pop_front();
            st.evicted += 1;
        }
        st.items.push_back(scan);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    fn pop(&self, timeout: Option<Duration>) -> Option<LidarScan> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(scan) = st.items.pop_front() {
                return Some(scan);
            }
            if st.closed {
                return None;
            }
            st = match deadline {
                None => self.ready.wait(st).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return None;
                    }
                    self.ready.wait_timeout(st, d - now).unwrap().0
                }
            };
        }
    }

    fn evicted(&self) -> u64 {
        self.state.lock().unwrap().evicted
    }
}

#[derive(Debug, Clone)]
pub struct ListenConfig {
    pub queue_capacity: usize,
    /// Socket poll interval; bounds how long [`Listener::stop`] waits.
    pub poll_interval: Duration,
    /// Requested kernel receive buffer; the OS may clamp it.
    pub recv_buffer_bytes: usize,
}

impl Default for ListenConfig {
    fn default() -> Self {
        Self {
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            poll_interval: Duration::from_millis(20),
            recv_buffer_bytes: 8 << 20,
        }
    }
}

/// Live UDP ingest. One worker thread owns the socket and the assembler;
/// finished scans are handed over through a bounded queue.
pub struct Listener {
    local_addr: SocketAddr,
    queue: Arc<ScanQueue>,
    stats: Arc<Mutex<IngestStats>>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<Result<(), IngestError>>>,
}

impl Listener {
    pub fn bind(
        addr: SocketAddr,
        intr: &SensorIntrinsics,
        config: ListenConfig,
    ) -> Result<Self, IngestError> {
        let socket =
            bind_udp(addr, &config).map_err(|source| IngestError::BindFailure { addr, source })?;
        let local_addr = socket.local_addr()?;
        let queue = Arc::new(ScanQueue::new(config.queue_capacity));
        let stats = Arc::new(Mutex::new(IngestStats::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let worker = {
            let (queue, stats, stop) = (queue.clone(), stats.clone(), stop.clone());
            let mut assembler = Assembler::new(intr);
            std::thread::Builder::new()
                .name("domescan-ingest".into())
                .spawn(move || {
                    let result = run_worker(&socket, &mut assembler, &queue, &stats, &stop);
                    for scan in assembler.finish() {
                        queue.push(scan);
                    }
                    publish_stats(&stats, &assembler, &queue);
                    queue.close();
                    result
                })?
        };
        Ok(Self {
            local_addr,
            queue,
            stats,
            stop,
            worker: Some(worker),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Blocks until a scan is available; `None` once the worker has stopped
    /// and the queue is drained.
    pub fn recv(&self) -> Option<LidarScan> {
        self.queue.pop(None)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<LidarScan> {
        self.queue.pop(Some(timeout))
    }

    pub fn stats(&self) -> IngestStats {
        *self.stats.lock().unwrap()
    }

    /// Stops the worker, flushes frames still being assembled and returns
    /// every scan left in the queue.
    pub fn stop(mut self) -> Result<(Vec<LidarScan>, IngestStats), IngestError> {
        self.stop.store(true, Ordering::Relaxed);
        let result = self
            .worker
            .take()
            .expect("worker joined once")
            .join()
            .expect("ingest worker panicked");
        let mut rest = Vec::new();
        while let Some(scan) = self.queue.pop(Some(Duration::ZERO)) {
            rest.push(scan);
        }
        result.map(|()| (rest, self.stats()))
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn bind_udp(addr: SocketAddr, config: &ListenConfig) -> std::io::Result<UdpSocket> {
    use socket2::{Domain, Protocol, Socket, Type};
    let socket = Socket::new(Domain::for_address(addr), Type::DGRAM, Some(Protocol::UDP))?;
    if let Err(e) = socket.set_recv_buffer_size(config.recv_buffer_bytes) {
        log::warn!("could not enlarge receive buffer: {e}");
    }
    socket.bind(&addr.into())?;
    let socket: UdpSocket = socket.into();
    socket.set_read_timeout(Some(config.poll_interval))?;
    Ok(socket)
}

fn run_worker(
    socket: &UdpSocket,
    assembler: &mut Assembler,
    queue: &ScanQueue,
    stats: &Mutex<IngestStats>,
    stop: &AtomicBool,
) -> Result<(), IngestError> {
    let mut buf = vec![0u8; 65_536];
    while !stop.load(Ordering::Relaxed) {
        let len = match socket.recv(&mut buf) {
            Ok(len) => len,
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                continue
            }
            Err(e) => return Err(e.into()),
        };
        for scan in assembler.push_bytes(&buf[..len])? {
            queue.push(scan);
        }
        publish_stats(stats, assembler, queue);
    }
    Ok(())
}

fn publish_stats(stats: &Mutex<IngestStats>, assembler: &Assembler, queue: &ScanQueue) {
    let mut s = assembler.stats();
    s.dropped_scans = queue.evicted();
    *stats.lock().unwrap() = s;
}

/// Sends every packet of a recorded stream as one datagram each.
///
/// `keep(k)` decides whether the `k`-th packet is sent (loss injection);
/// `gap` is slept after each datagram. Returns the number sent.
pub fn replay(
    data: &[u8],
    target: SocketAddr,
    gap: Duration,
    mut keep: impl FnMut(usize) -> bool,
) -> std::io::Result<usize> {
    let bind: SocketAddr = if target.is_ipv4() {
        "0.0.0.0:0".parse().unwrap()
    } else {
        "[::]:0".parse().unwrap()
    };
    let socket = UdpSocket::bind(bind)?;
    let mut sent = 0;
    for (k, slice) in PacketSlices::new(data).enumerate() {
        let Ok(bytes) = slice else { continue };
        if !keep(k) {
            continue;
        }
        socket.send_to(bytes, target)?;
        sent += 1;
        if !gap.is_zero() {
            std::thread::sleep(gap);
        }
    }
    Ok(sent)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: ProjectionMode,
    pub representation: RepresentationConfig,
    pub min_frames: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mode: ProjectionMode::Standard,
            representation: RepresentationConfig::default(),
            min_frames: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub scans_per_second: f64,
}

/// Times assemble → project → build_representation per scan over a recorded
/// stream. Per-scan latency runs from the first packet read for the scan to
/// its finished representation.
pub fn bench(
    data: &[u8],
    intr: &SensorIntrinsics,
    config: &BenchConfig,
) -> Result<BenchReport, IngestError> {
    let projector = Projector::new(intr, config.mode);
    let mut stream = ScanStream::new(data, intr);
    let mut latencies = Vec::new();
    let mut full_frames = 0;
    let mut channels = 0;
    let started = Instant::now();
    loop {
        let t0 = Instant::now();
        let Some(scan) = stream.next() else { break };
        let scan = scan?;
        let points = config
            .representation
            .positional
            .then(|| projector.project(&scan))
            .transpose()
            .map_err(|e| IngestError::Shape(e.to_string()))?;
        let rep = build_representation(&scan, points.as_ref(), &config.representation)
            .map_err(|e| IngestError::Shape(e.to_string()))?;
        latencies.push(t0.elapsed().as_secs_f64());
        channels = rep.channels();
        if scan.received_columns == scan.width() {
            full_frames += 1;
        }
        std::hint::black_box(&rep);
    }
    let total = started.elapsed().as_secs_f64();
    if full_frames < config.min_frames {
        return Err(IngestError::InsufficientFrames {
            required: config.min_frames,
            found: full_frames,
        });
    }
    let n = latencies.len();
    let mean = latencies.iter().sum::<f64>() / n as f64;
    latencies.sort_by(f64::total_cmp);
    let p99 = latencies[((n as f64 * 0.99).ceil() as usize).clamp(1, n) - 1];
    Ok(BenchReport {
        frames: n,
        height: intr.beam_count,
        width: intr.scan_width,
        channels,
        mean_latency_ms: mean * 1e3,
        p99_latency_ms: p99 * 1e3,
        scans_per_second: n as f64 / total,
    })
}
