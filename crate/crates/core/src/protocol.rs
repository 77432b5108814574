//! Depth-camera serial frame codec.
//!
//! Wire layout of one frame:
//!
//! ```text
//! 0x00 0xFF | LEN (u16 LE) = 16 + rows*cols | 16-byte header | payload | CHECKSUM | 0xDD
//! ```
//!
//! The header is `[cmd, output_mode, reserved, frame_id, rows, cols,
//! isp_version, reserved, exposure_us (u32 LE), error_code, 3 x reserved]`.
//! `CHECKSUM` is the byte sum, modulo 256, of everything from the first sync
//! byte through the last payload byte.
//!
//! Resolution is read from every header; nothing assumes 100x100 or 25x25.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const SYNC0: u8 = 0x00;
pub const SYNC1: u8 = 0xFF;
pub const TAIL: u8 = 0xDD;
pub const HEADER_LEN: usize = 16;
pub const MAX_SIDE: usize = 100;
pub const ISP_VERSION: u8 = 0x01;
/// Sync + LEN + checksum + tail around `LEN` bytes of header and payload.
pub const FRAME_OVERHEAD: usize = 6;
/// Upper bound on bytes the decoder holds between `feed` calls.
pub const MAX_BUFFERED: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SensorConfig {
    /// Millimetres per pixel count.
    pub unit_mm: u32,
    pub min_range_mm: u32,
    pub max_range_mm: u32,
    pub fov_azimuth_deg: f64,
    pub fov_elevation_deg: f64,
    pub fps: u32,
    pub baud: u32,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            unit_mm: 10,
            min_range_mm: 200,
            max_range_mm: 2500,
            fov_azimuth_deg: 70.0,
            fov_elevation_deg: 60.0,
            fps: 20,
            baud: 115_200,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unit_mm == 0 {
            return Err(Error::InvalidConfig("unit_mm must be positive"));
        }
        if self.min_range_mm >= self.max_range_mm {
            return Err(Error::InvalidConfig("min_range_mm must be below max_range_mm"));
        }
        if 255 * self.unit_mm < self.max_range_mm {
            return Err(Error::InvalidConfig("max_range_mm exceeds 255 * unit_mm"));
        }
        Ok(())
    }

    /// Largest depth a pixel can express.
    pub fn max_representable_mm(&self) -> u32 {
        255 * self.unit_mm
    }
}

/// One decoded depth image: 8-bit pixels in sensor units, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DepthFrame {
    pub frame_id: u8,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub timestamp_us: u64,
}

impl DepthFrame {
    pub fn new(frame_id: u8, rows: usize, cols: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(rows, cols)?;
        if pixels.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pixels", rows * cols),
                found: format!("{} pixels", pixels.len()),
            });
        }
        Ok(Self { frame_id, rows, cols, pixels, timestamp_us: 0 })
    }

    pub fn filled(rows: usize, cols: usize, value: u8) -> Self {
        Self { frame_id: 0, rows, cols, pixels: alloc::vec![value; rows * cols], timestamp_us: 0 }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.cols + col]
    }
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || rows > MAX_SIDE || cols > MAX_SIDE {
        return Err(Error::DimensionOutOfRange { rows, cols });
    }
    Ok(())
}

fn byte_sum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0u8, |acc, &b| acc.wrapping_add(b))
}

/// Serializes a frame with an unknown (zero) exposure.
pub fn encode_frame(frame: &DepthFrame) -> Result<Vec<u8>> {
    encode_frame_with_exposure(frame, 0)
}

pub fn encode_frame_with_exposure(frame: &DepthFrame, exposure_us: u32) -> Result<Vec<u8>> {
    check_dims(frame.rows, frame.cols)?;
    let n = frame.rows * frame.cols;
    if frame.pixels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} pixels"),
            found: format!("{} pixels", frame.pixels.len()),
        });
    }
    let len = (HEADER_LEN + n) as u16;
    let mut out = Vec::with_capacity(n + HEADER_LEN + FRAME_OVERHEAD);
    out.extend_from_slice(&[SYNC0, SYNC1]);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&[
        0x00, // cmd
        0x00, // output mode
        0x00,
        frame.frame_id,
        frame.rows as u8,
        frame.cols as u8,
        ISP_VERSION,
        0x00,
    ]);
    out.extend_from_slice(&exposure_us.to_le_bytes());
    out.extend_from_slice(&[0x00, 0x00, 0x00, 0x00]); // error code + reserved
    out.extend_from_slice(&frame.pixels);
    out.push(byte_sum(&out));
    out.push(TAIL);
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecodeStats {
    pub frames_ok: u64,
    pub checksum_failures: u64,
    /// Candidates dropped for a bad tail, an inconsistent LEN or bad dimensions.
    pub malformed: u64,
    pub resyncs: u64,
    pub bytes_discarded: u64,
}

impl DecodeStats {
    /// Candidates whose sync and LEN were read, whatever their fate.
    pub fn candidates(&self) -> u64 {
        self.frames_ok + self.checksum_failures + self.malformed
    }
}

enum Candidate {
    NeedMore,
    Frame(DepthFrame),
    Rejected { checksum: bool },
}

/// Incremental decoder for the frame stream. Feed bytes in any chunking; the
/// frames produced are the same.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: VecDeque<u8>,
    stats: DecodeStats,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> DecodeStats {
        self.stats
    }

    /// Bytes currently held waiting for the rest of a candidate.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Appends `bytes` and returns every frame completed by them.
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<DepthFrame> {
        let mut out = Vec::new();
        self.feed_into(bytes, &mut out);
        out
    }

    pub fn feed_into(&mut self, mut bytes: &[u8], out: &mut Vec<DepthFrame>) {
        while !bytes.is_empty() {
            let room = MAX_BUFFERED - self.buf.len();
            let take = room.min(bytes.len());
            self.buf.extend(&bytes[..take]);
            bytes = &bytes[take..];
            while let Some(frame) = self.next_frame() {
                out.push(frame);
            }
        }
    }

    /// Pulls the next complete frame out of the buffered bytes, if any.
    pub fn next_frame(&mut self) -> Option<DepthFrame> {
        loop {
            if !self.seek_sync() {
                return None;
            }
            match self.parse_candidate() {
                Candidate::NeedMore => return None,
                Candidate::Frame(frame) => {
                    self.stats.frames_ok += 1;
                    return Some(frame);
                }
                Candidate::Rejected { checksum } => {
                    if checksum {
                        self.stats.checksum_failures += 1;
                    } else {
                        self.stats.malformed += 1;
                    }
                    self.stats.resyncs += 1;
                    self.buf.pop_front();
                    self.stats.bytes_discarded += 1;
                }
            }
        }
    }

    /// Drops bytes until the buffer starts with `SYNC0 SYNC1`. Returns false
    /// when no full sync word is buffered yet.
    fn seek_sync(&mut self) -> bool {
        let mut skip = 0;
        let n = self.buf.len();
        while skip + 1 < n {
            if self.buf[skip] == SYNC0 && self.buf[skip + 1] == SYNC1 {
                break;
            }
            skip += 1;
        }
        let found = skip + 1 < n;
        if !found && n > 0 && self.buf[n - 1] != SYNC0 {
            // No partial sync to keep.
            skip = n;
        }
        self.buf.drain(..skip);
        self.stats.bytes_discarded += skip as u64;
        found
    }

    fn parse_candidate(&mut self) -> Candidate {
        if self.buf.len() < 4 {
            return Candidate::NeedMore;
        }
        let len = u16::from_le_bytes([self.buf[2], self.buf[3]]) as usize;
        if len <= HEADER_LEN || len > HEADER_LEN + MAX_SIDE * MAX_SIDE {
            return Candidate::Rejected { checksum: false };
        }
        let total = len + FRAME_OVERHEAD;
        if self.buf.len() < total {
            return Candidate::NeedMore;
        }
        let bytes = self.buf.make_contiguous();
        let frame_bytes = &bytes[..total];
        let header = &frame_bytes[4..4 + HEADER_LEN];
        let (rows, cols) = (header[4] as usize, header[5] as usize);
        if check_dims(rows, cols).is_err() || len != HEADER_LEN + rows * cols {
            return Candidate::Rejected { checksum: false };
        }
        if frame_bytes[total - 1] != TAIL {
            return Candidate::Rejected { checksum: false };
        }
        if byte_sum(&frame_bytes[..total - 2]) != frame_bytes[total - 2] {
            return Candidate::Rejected { checksum: true };
        }
        let frame = DepthFrame {
            frame_id: header[3],
            rows,
            cols,
            pixels: frame_bytes[4 + HEADER_LEN..total - 2].to_vec(),
            timestamp_us: 0,
        };
        self.buf.drain(..total);
        Candidate::Frame(frame)
    }
}

/// Decodes a complete byte buffer in one go.
pub fn decode_stream(bytes: &[u8]) -> (Vec<DepthFrame>, DecodeStats) {
    let mut dec = StreamDecoder::new();
    let frames = dec.feed(bytes);
    (frames, dec.stats())
}

/// Linear-mode depth in millimetres; `None` for the invalid pixel 0.
pub fn depth_mm(pixel: u8, cfg: &SensorConfig) -> Option<u32> {
    match pixel {
        0 => None,
        p => Some(p as u32 * cfg.unit_mm),
    }
}

/// 4x4 binning of a 100x100 frame to 25x25 using the rounded mean of the
/// valid (non-zero) pixels of each block.
pub fn bin_4x4(frame: &DepthFrame) -> Result<DepthFrame> {
    if frame.rows != 100 || frame.cols != 100 || frame.pixels.len() != 100 * 100 {
        return Err(Error::DimensionMismatch {
            expected: "100x100".into(),
            found: format!("{}x{}", frame.rows, frame.cols),
        });
    }
    let mut pixels = Vec::with_capacity(25 * 25);
    for by in 0..25 {
        for bx in 0..25 {
            let (mut sum, mut count) = (0u32, 0u32);
            for y in by * 4..by * 4 + 4 {
                for x in bx * 4..bx * 4 + 4 {
                    let p = frame.pixels[y * 100 + x] as u32;
                    if p != 0 {
                        sum += p;
                        count += 1;
                    }
                }
            }
            let v = if count == 0 { 0 } else { (2 * sum + count) / (2 * count) };
            pixels.push(v as u8);
        }
    }
    Ok(DepthFrame { frame_id: frame.frame_id, rows: 25, cols: 25, pixels, timestamp_us: frame.timestamp_us })
}
