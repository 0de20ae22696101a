//! Binary lidar packet format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! header  : magic "DOME" | version u8 (=1) | beam_count u16 | reserved u8
//! block×16: measurement_id u16 | frame_id u16 | timestamp_ns u64
//!           beam_count × { range_raw u32 | signal u16 | reflectivity u16 | nir u16 }
//! ```
//!
//! A recorded stream is packets concatenated back to back; each packet's
//! length follows from its header.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DOME";
pub const VERSION: u8 = 1;
pub const BLOCKS_PER_PACKET: usize = 16;
pub const HEADER_LEN: usize = 8;
pub const BLOCK_HEADER_LEN: usize = 12;
pub const BEAM_RECORD_LEN: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported packet version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated packet: expected {expected} bytes, got {actual}")]
    TruncatedPacket { expected: usize, actual: usize },
    #[error("packet invariant violated: {0}")]
    InvariantViolation(String),
}

/// Encoded size of a packet carrying `beam_count` beams per block.
pub const fn packet_len(beam_count: usize) -> usize {
    HEADER_LEN + BLOCKS_PER_PACKET * (BLOCK_HEADER_LEN + beam_count * BEAM_RECORD_LEN)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BeamRecord {
    /// Range counts; 0 means no return.
    pub range_raw: u32,
    pub signal: u16,
    pub reflectivity: u16,
    pub nir: u16,
}

/// One firing column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementBlock {
    pub measurement_id: u16,
    pub frame_id: u16,
    pub timestamp_ns: u64,
    pub beams: Vec<BeamRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LidarPacket {
    pub version: u8,
    pub beam_count: u16,
    pub blocks: Vec<MeasurementBlock>,
}

impl LidarPacket {
    pub fn frame_id(&self) -> u16 {
        self.blocks.first().map_or(0, |b| b.frame_id)
    }

    /// Checks the structural invariants that need no sensor metadata: block
    /// count, per-block beam count, a shared frame id, and consecutive
    /// measurement ids (a drop back to 0 is taken as the wrap at scan width).
    pub fn check(&self) -> Result<(), WireError> {
        if self.beam_count == 0 {
            return Err(WireError::InvariantViolation("beam_count is zero".into()));
        }
        if self.blocks.len() != BLOCKS_PER_PACKET {
            return Err(WireError::InvariantViolation(format!(
                "{} blocks, expected {BLOCKS_PER_PACKET}",
                self.blocks.len()
            )));
        }
        let frame_id = self.blocks[0].frame_id;
        for (k, block) in self.blocks.iter().enumerate() {
            if block.beams.len() != self.beam_count as usize {
                return Err(WireError::InvariantViolation(format!(
                    "block {k} carries {} beams, header says {}",
                    block.beams.len(),
                    self.beam_count
                )));
            }
            if block.frame_id != frame_id {
                return Err(WireError::InvariantViolation(format!(
                    "block {k} frame id {} differs from {frame_id}",
                    block.frame_id
                )));
            }
        }
        for (k, pair) in self.blocks.windows(2).enumerate() {
            let (prev, next) = (pair[0].measurement_id, pair[1].measurement_id);
            if next != prev.wrapping_add(1) && next != 0 {
                return Err(WireError::InvariantViolation(format!(
                    "measurement id {next} at block {} does not follow {prev}",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    /// Like [`check`](Self::check), plus every measurement id below the scan
    /// width and wraps occurring exactly at it.
    pub fn check_against(&self, scan_width: usize) -> Result<(), WireError> {
        self.check()?;
        for pair in self.blocks.windows(2) {
            let (prev, next) = (
                pair[0].measurement_id as usize,
                pair[1].measurement_id as usize,
            );
            if next != (prev + 1) % scan_width {
                return Err(WireError::InvariantViolation(format!(
                    "measurement id {next} does not follow {prev} modulo {scan_width}"
                )));
            }
        }
        if let Some(b) = self
            .blocks
            .iter()
            .find(|b| b.measurement_id as usize >= scan_width)
        {
            return Err(WireError::InvariantViolation(format!(
                "measurement id {} not below scan width {scan_width}",
                b.measurement_id
            )));
        }
        Ok(())
    }
}

pub fn encode_packet(packet: &LidarPacket) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(packet_len(packet.beam_count as usize));
    encode_packet_into(packet, &mut out)?;
    Ok(out)
}

/// Appends the encoded packet to `out`.
pub fn encode_packet_into(packet: &LidarPacket, out: &mut Vec<u8>) -> Result<(), WireError> {
    packet.check()?;
    if packet.version != VERSION {
        return Err(WireError::UnsupportedVersion(packet.version));
    }
    out.reserve(packet_len(packet.beam_count as usize));
    out.extend_from_slice(&MAGIC);
    out.push(packet.version);
    out.extend_from_slice(&packet.beam_count.to_le_bytes());
    out.push(0);
    for block in &packet.blocks {
        out.extend_from_slice(&block.measurement_id.to_le_bytes());
        out.extend_from_slice(&block.frame_id.to_le_bytes());
        out.extend_from_slice(&block.timestamp_ns.to_le_bytes());
        for beam in &block.beams {
            out.extend_from_slice(&beam.range_raw.to_le_bytes());
            out.extend_from_slice(&beam.signal.to_le_bytes());
            out.extend_from_slice(&beam.reflectivity.to_le_bytes());
            out.extend_from_slice(&beam.nir.to_le_bytes());
        }
    }
    Ok(())
}

/// Validates the header and returns the total packet length it announces.
/// Only the header bytes present in `bytes` are inspected.
pub fn peek_packet_len(bytes: &[u8]) -> Result<usize, WireError> {
    let prefix = &bytes[..bytes.len().min(MAGIC.len())];
    if prefix != &MAGIC[..prefix.len()] {
        return Err(WireError::BadMagic(prefix.to_vec()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(WireError::TruncatedPacket {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[4]));
    }
    let beam_count = u16::from_le_bytes([bytes[5], bytes[6]]);
    if beam_count == 0 {
        return Err(WireError::InvariantViolation("beam_count is zero".into()));
    }
    Ok(packet_len(beam_count as usize))
}

/// Decodes exactly one packet; `bytes` must hold the whole packet and
/// nothing else.
pub fn decode_packet(bytes: &[u8]) -> Result<LidarPacket, WireError> {
    let expected = peek_packet_len(bytes)?;
    if bytes.len() != expected {
        return Err(WireError::TruncatedPacket {
            expected,
            actual: bytes.len(),
        });
    }
    let beam_count = u16::from_le_bytes([bytes[5], bytes[6]]);
    let mut reader = Reader::new(&bytes[HEADER_LEN..]);
    let mut blocks = Vec::with_capacity(BLOCKS_PER_PACKET);
    for _ in 0..BLOCKS_PER_PACKET {
        let measurement_id = reader.u16();
        let frame_id = reader.u16();
        let timestamp_ns = reader.u64();
        let beams = (0..beam_count)
            .map(|_| BeamRecord {
                range_raw: reader.u32(),
                signal: reader.u16(),
                reflectivity: reader.u16(),
                nir: reader.u16(),
            })
            .collect();
        blocks.push(MeasurementBlock {
            measurement_id,
            frame_id,
            timestamp_ns,
            beams,
        });
    }
    let packet = LidarPacket {
        version: VERSION,
        beam_count,
        blocks,
    };
    packet.check()?;
    Ok(packet)
}

/// Fixed-size little-endian reads over a slice whose length was checked up
/// front.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N]
            .try_into()
            .expect("length checked before decoding");
        self.pos += N;
        out
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
}

/// Splits a recorded stream into packet-sized slices.
///
/// On a corrupt header the iterator yields the error once, then skips ahead
/// to the next occurrence of the magic bytes.
pub struct PacketSlices<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> PacketSlices<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn resync(&mut self) {
        let start = self.pos + 1;
        self.pos = self.data[start.min(self.data.len())..]
            .windows(MAGIC.len())
            .position(|w| w == MAGIC)
            .map_or(self.data.len(), |p| start + p);
    }
}

impl<'a> Iterator for PacketSlices<'a> {
    type Item = Result<&'a [u8], WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.data.len() {
            return None;
        }
        let rest = &self.data[self.pos..];
        match peek_packet_len(rest) {
            Ok(len) if len <= rest.len() => {
                self.pos += len;
                Some(Ok(&rest[..len]))
            }
            Ok(len) => {
                self.pos = self.data.len();
                Some(Err(WireError::TruncatedPacket {
                    expected: len,
                    actual: rest.len(),
                }))
            }
            Err(e) => {
                self.resync();
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample_packet(beam_count: u16, first_id: u16, scan_width: u16) -> LidarPacket {
        LidarPacket {
            version: VERSION,
            beam_count,
            blocks: (0..BLOCKS_PER_PACKET as u16)
                .map(|k| MeasurementBlock {
                    measurement_id: (first_id + k) % scan_width,
                    frame_id: 7,
                    timestamp_ns: 1_000 * k as u64,
                    beams: (0..beam_count)
                        .map(|b| BeamRecord {
                            range_raw: 1000 + b as u32,
                            signal: b,
                            reflectivity: 2 * b,
                            nir: 3 * b,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn encoded_lengths() {
        let p64 = encode_packet(&sample_packet(64, 0, 512)).unwrap();
        assert_eq!(p64.len(), 10_440);
        let p128 = encode_packet(&sample_packet(128, 0, 512)).unwrap();
        assert_eq!(p128.len(), 20_680);
        assert_eq!(packet_len(64), 8 + 16 * 652);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode_packet(&sample_packet(2, 3, 512)).unwrap();
        assert_eq!(&bytes[..8], &[0x44, 0x4F, 0x4D, 0x45, 1, 2, 0, 0]);
        // first block: id 3, frame 7, ts 0
        assert_eq!(&bytes[8..20], &[3, 0, 7, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        // first beam: range 1000, signal 0, refl 0, nir 0
        assert_eq!(&bytes[20..30], &[0xE8, 0x03, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn decode_errors_are_distinguishable() {
        let bytes = encode_packet(&sample_packet(4, 0, 512)).unwrap();
        assert_eq!(decode_packet(&bytes).unwrap(), sample_packet(4, 0, 512));

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(decode_packet(&bad), Err(WireError::BadMagic(_))));

        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(
            decode_packet(short),
            Err(WireError::TruncatedPacket { .. })
        ));

        let mut version = bytes.clone();
        version[4] = 9;
        assert_eq!(
            decode_packet(&version),
            Err(WireError::UnsupportedVersion(9))
        );

        let mut mixed = bytes.clone();
        // frame id of block 1
        let off = HEADER_LEN + BLOCK_HEADER_LEN + 4 * BEAM_RECORD_LEN + 2;
        mixed[off] = 8;
        assert!(matches!(
            decode_packet(&mixed),
            Err(WireError::InvariantViolation(_))
        ));
    }

    #[test]
    fn wrap_inside_packet_is_accepted() {
        let p = sample_packet(2, 504, 512);
        assert_eq!(p.blocks[8].measurement_id, 0);
        assert!(p.check_against(512).is_ok());
        assert!(p.check_against(1024).is_err());
        assert_eq!(decode_packet(&encode_packet(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn encode_rejects_invalid_packets() {
        let mut p = sample_packet(2, 0, 512);
        p.blocks.pop();
        assert!(matches!(
            encode_packet(&p),
            Err(WireError::InvariantViolation(_))
        ));
        let mut p = sample_packet(2, 0, 512);
        p.blocks[3].beams.pop();
        assert!(encode_packet(&p).is_err());
    }

    #[test]
    fn packet_slices_resync_after_garbage() {
        let a = encode_packet(&sample_packet(3, 0, 512)).unwrap();
        let b = encode_packet(&sample_packet(3, 16, 512)).unwrap();
        let mut stream = a.clone();
        stream.extend_from_slice(b"garbage!");
        stream.extend_from_slice(&b);
        stream.extend_from_slice(&a[..20]);
        let items: Vec<_> = PacketSlices::new(&stream).collect();
        assert_eq!(items.len(), 4);
        assert_eq!(items[0].as_ref().unwrap(), &a.as_slice());
        assert!(matches!(items[1], Err(WireError::BadMagic(_))));
        assert_eq!(items[2].as_ref().unwrap(), &b.as_slice());
        assert!(matches!(items[3], Err(WireError::TruncatedPacket { .. })));
    }

    fn arb_packet() -> impl Strategy<Value = LidarPacket> {
        (1u16..20, 1u16..=2048, any::<u16>(), any::<u64>())
            .prop_flat_map(|(beam_count, width, frame_id, ts)| {
                let beams = prop::collection::vec(
                    (any::<u32>(), any::<u16>(), any::<u16>(), any::<u16>()),
                    BLOCKS_PER_PACKET * beam_count as usize,
                );
                (
                    Just(beam_count),
                    Just(width),
                    0..width,
                    Just(frame_id),
                    Just(ts),
                    beams,
                )
            })
            .prop_map(
                |(beam_count, width, first, frame_id, ts, beams)| LidarPacket {
                    version: VERSION,
                    beam_count,
                    blocks: beams
                        .chunks(beam_count as usize)
                        .enumerate()
                        .map(|(k, chunk)| MeasurementBlock {
                            measurement_id: ((first as usize + k) % width as usize) as u16,
                            frame_id,
                            timestamp_ns: ts.wrapping_add(k as u64),
                            beams: chunk
                                .iter()
                                .map(|&(range_raw, signal, reflectivity, nir)| BeamRecord {
                                    range_raw,
                                    signal,
                                    reflectivity,
                                    nir,
                                })
                                .collect(),
                        })
                        .collect(),
                },
            )
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(p in arb_packet()) {
            let bytes = encode_packet(&p).unwrap();
            prop_assert_eq!(bytes.len(), packet_len(p.beam_count as usize));
            prop_assert_eq!(decode_packet(&bytes).unwrap(), p);
        }

        #[test]
        fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
            let _ = decode_packet(&bytes);
            for item in PacketSlices::new(&bytes) {
                let _ = item;
            }
        }

        #[test]
        fn random_bodies_behind_valid_header_never_panic(
            beam_count in 1u16..4,
            body in prop::collection::vec(any::<u8>(), 0..900),
        ) {
            let mut bytes = MAGIC.to_vec();
            bytes.push(VERSION);
            bytes.extend_from_slice(&beam_count.to_le_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&body);
            match decode_packet(&bytes) {
                Ok(p) => prop_assert_eq!(encode_packet(&p).unwrap(), bytes),
                Err(WireError::TruncatedPacket { .. } | WireError::InvariantViolation(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
