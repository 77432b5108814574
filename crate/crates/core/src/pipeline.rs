//! Turning recorded drives into training windows, and the live frame ring
//! the control loop feeds.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ControlCommand, INPUT_LEN, INPUT_SIDE, WINDOW_LEN};
use crate::protocol::{DepthFrame, SensorConfig};
use crate::tensor::Tensor;

/// Side of the binned sensor frame.
pub const FRAME_SIDE: usize = 25;
pub const FRAME_PIXELS: usize = INPUT_SIDE * INPUT_SIDE;
pub const DEFAULT_SPLIT: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: DepthFrame,
    pub command: ControlCommand,
    pub timestamp_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sensor: SensorConfig,
    pub samples: Vec<Sample>,
    /// Track or world the drive came from.
    pub source: String,
}

impl Recording {
    pub fn new(source: impl Into<String>) -> Self {
        Self { sensor: SensorConfig::default(), samples: Vec::new(), source: source.into() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.samples.windows(2).enumerate() {
            if pair[1].timestamp_us <= pair[0].timestamp_us {
                return Err(Error::NonMonotonicTimestamps { index: i + 1 });
            }
        }
        if let Some(first) = self.samples.first() {
            let (r, c) = (first.frame.rows, first.frame.cols);
            if let Some(bad) = self.samples.iter().find(|s| s.frame.rows != r || s.frame.cols != c) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{r}x{c}"),
                    found: format!("{}x{}", bad.frame.rows, bad.frame.cols),
                });
            }
        }
        Ok(())
    }
}

/// Clockwise rotation applied to every frame before cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Rotation {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            _ => Err(Error::InvalidConfig("rotation must be 0, 90, 180 or 270")),
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    /// Source `(row, col)` for destination `(row, col)` in an `n x n` image.
    #[inline]
    fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        match self {
            Rotation::R0 => (r, c),
            Rotation::R90 => (n - 1 - c, r),
            Rotation::R180 => (n - 1 - r, n - 1 - c),
            Rotation::R270 => (c, n - 1 - r),
        }
    }
}

/// Rotates a square frame.
pub fn rotate(frame: &DepthFrame, rotation: Rotation) -> Result<DepthFrame> {
    if frame.rows != frame.cols {
        return Err(Error::DimensionMismatch {
            expected: "square frame".into(),
            found: format!("{}x{}", frame.rows, frame.cols),
        });
    }
    let n = frame.rows;
    let mut pixels = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = rotation.source(r, c, n);
            pixels.push(frame.pixels[sr * n + sc]);
        }
    }
    Ok(DepthFrame { pixels, ..frame.clone() })
}

/// Rotates a 25x25 frame and crops it to the top-left 24x24, keeping raw
/// pixel values.
pub fn preprocess_pixels(frame: &DepthFrame, rotation: Rotation) -> Result<Vec<u8>> {
    if frame.rows != FRAME_SIDE || frame.cols != FRAME_SIDE || frame.pixels.len() != FRAME_SIDE * FRAME_SIDE {
        return Err(Error::DimensionMismatch {
            expected: "25x25".into(),
            found: format!("{}x{}", frame.rows, frame.cols),
        });
    }
    let mut out = Vec::with_capacity(FRAME_PIXELS);
    for r in 0..INPUT_SIDE {
        for c in 0..INPUT_SIDE {
            let (sr, sc) = rotation.source(r, c, FRAME_SIDE);
            out.push(frame.pixels[sr * FRAME_SIDE + sc]);
        }
    }
    Ok(out)
}

/// [`preprocess_pixels`] scaled into `[0, 1]`.
pub fn preprocess_frame(frame: &DepthFrame, rotation: Rotation) -> Result<Vec<f64>> {
    Ok(preprocess_pixels(frame, rotation)?.into_iter().map(|p| p as f64 / 255.0).collect())
}

/// Interleaves 20 preprocessed 24x24 frames (oldest first) into a
/// channel-last window.
pub fn stack_frames<F: AsRef<[u8]>>(frames: &[F]) -> Result<Vec<u8>> {
    if frames.len() != WINDOW_LEN {
        return Err(Error::LengthMismatch { left: frames.len(), right: WINDOW_LEN });
    }
    let mut out = alloc::vec![0u8; INPUT_LEN];
    for (c, f) in frames.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != FRAME_PIXELS {
            return Err(Error::LengthMismatch { left: f.len(), right: FRAME_PIXELS });
        }
        for (p, &v) in f.iter().enumerate() {
            out[p * WINDOW_LEN + c] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Provenance {
    pub recording: u32,
    pub end_index: u32,
    pub flipped: bool,
}

/// Twenty stacked frames (channel-last, oldest channel first) labelled with
/// the command issued at the newest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    /// Raw pixels, `24 x 24 x 20`.
    pub pixels: Vec<u8>,
    pub label: ControlCommand,
    pub provenance: Provenance,
}

impl FrameWindow {
    pub fn to_tensor(&self) -> Tensor {
        crate::model::normalize_pixels(&self.pixels).expect("window holds 24x24x20 pixels")
    }

    /// Pixel of channel `c` at `(row, col)`.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize, c: usize) -> u8 {
        self.pixels[(row * INPUT_SIDE + col) * WINDOW_LEN + c]
    }
}

/// One window per end index `19..len`; windows never cross recordings.
pub fn build_windows(rec: &Recording, recording_id: u32, rotation: Rotation) -> Result<Vec<FrameWindow>> {
    if rec.len() < WINDOW_LEN {
        return Err(Error::TooShortRecording { len: rec.len(), needed: WINDOW_LEN });
    }
    rec.validate()?;
    let frames = rec.samples.iter().map(|s| preprocess_pixels(&s.frame, rotation)).collect::<Result<Vec<_>>>()?;
    (WINDOW_LEN - 1..rec.len())
        .map(|end| {
            Ok(FrameWindow {
                pixels: stack_frames(&frames[end + 1 - WINDOW_LEN..=end])?,
                label: rec.samples[end].command,
                provenance: Provenance { recording: recording_id, end_index: end as u32, flipped: false },
            })
        })
        .collect()
}

/// Mirrors every channel left-right and negates the steering label.
pub fn augment_flip(w: &FrameWindow) -> FrameWindow {
    let mut pixels = alloc::vec![0u8; INPUT_LEN];
    for r in 0..INPUT_SIDE {
        for c in 0..INPUT_SIDE {
            let src = (r * INPUT_SIDE + (INPUT_SIDE - 1 - c)) * WINDOW_LEN;
            let dst = (r * INPUT_SIDE + c) * WINDOW_LEN;
            pixels[dst..dst + WINDOW_LEN].copy_from_slice(&w.pixels[src..src + WINDOW_LEN]);
        }
    }
    FrameWindow {
        pixels,
        label: ControlCommand { steering: -w.label.steering, throttle: w.label.throttle },
        provenance: Provenance { flipped: !w.provenance.flipped, ..w.provenance },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<FrameWindow>,
    pub test: Vec<FrameWindow>,
    pub seed: u64,
    pub ratio: f64,
}

/// Shuffles with a seeded permutation, puts the first `floor(ratio * n)`
/// windows in train and the rest in test. With `flip_train`, every train
/// window gains a mirrored copy; test windows are never mirrored.
pub fn shuffle_split(mut windows: Vec<FrameWindow>, seed: u64, ratio: f64, flip_train: bool) -> Result<SplitDataset> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("shuffle_split needs windows"));
    }
    if windows.len() < 2 {
        return Err(Error::EmptyInput("shuffle_split needs at least two windows"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig("split ratio must be in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows.shuffle(&mut rng);
    let n_train = ((windows.len() as f64) * ratio + 1e-9) as usize;
    let test = windows.split_off(n_train);
    let mut train = windows;
    if flip_train {
        let flipped: Vec<_> = train.iter().map(augment_flip).collect();
        train.extend(flipped);
    }
    Ok(SplitDataset { train, test, seed, ratio })
}

/// Fixed-capacity ring holding the most recent [`WINDOW_LEN`] frames.
#[derive(Debug, Clone)]
pub struct WindowRing<T> {
    slots: Vec<T>,
    next: usize,
    pushed: u64,
}

impl<T: Clone> Default for WindowRing<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone> WindowRing<T> {
    pub fn new() -> Self {
        Self { slots: Vec::with_capacity(WINDOW_LEN), next: 0, pushed: 0 }
    }

    pub fn push(&mut self, frame: T) {
        if self.slots.len() < WINDOW_LEN {
            self.slots.push(frame);
        } else {
            self.slots[self.next] = frame;
        }
        self.next = (self.next + 1) % WINDOW_LEN;
        self.pushed += 1;
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn is_ready(&self) -> bool {
        self.slots.len() == WINDOW_LEN
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.next = 0;
        self.pushed = 0;
    }

    /// The last 20 frames, oldest first.
    pub fn snapshot(&self) -> Result<Vec<T>> {
        if !self.is_ready() {
            return Err(Error::NotReady { pushed: self.slots.len(), needed: WINDOW_LEN });
        }
        Ok(self.iter_ordered().cloned().collect())
    }

    fn iter_ordered(&self) -> impl Iterator<Item = &T> {
        self.slots[self.next..].iter().chain(&self.slots[..self.next])
    }
}

impl<T: AsRef<[u8]> + Clone> WindowRing<T> {
    /// Snapshot stacked into a channel-last model input.
    pub fn window_pixels(&self) -> Result<Vec<u8>> {
        if !self.is_ready() {
            return Err(Error::NotReady { pushed: self.slots.len(), needed: WINDOW_LEN });
        }
        let frames: Vec<&T> = self.iter_ordered().collect();
        let refs: Vec<&[u8]> = frames.iter().map(|f| (*f).as_ref()).collect();
        stack_frames(&refs)
    }
}
