//! Binary containers for decoded frames (`.tnd`), float weights (`.tnwt`),
//! quantized models (`.tnqt`), window datasets (`.tnds`) and drive
//! recordings (`.tnrec`). All integers and reals are little-endian.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use tinynav_core::model::{LayerSpec, ModelMeta, INPUT_LEN, INPUT_SIDE, MODEL_SPEC, WINDOW_LEN};
use tinynav_core::pipeline::{FrameWindow, Provenance, Recording, Sample, SplitDataset, DEFAULT_SPLIT};
use tinynav_core::quant::{QuantKind, QuantLayer, QuantModel, QuantParams};
use tinynav_core::tensor::{ConvSpec, Tensor};
use tinynav_core::{ControlCommand, DepthFrame, FloatModel};

use crate::error::{Error, FormatError, Result};

pub const TND_MAGIC: [u8; 4] = *b"TND1";
pub const TNWT_MAGIC: [u8; 4] = *b"TNW1";
pub const TNQT_MAGIC: [u8; 4] = *b"TNQ1";
pub const TNDS_MAGIC: [u8; 4] = *b"TDS1";
pub const TNREC_MAGIC: [u8; 4] = *b"TRC1";
pub const VERSION: u8 = 0x01;

const KIND_CONV: u8 = 1;
const KIND_DENSE: u8 = 2;

type Decoded<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Decoded<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Decoded<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Decoded<u8> {
        Ok(self.take(1)?[0])
    }

    fn i8(&mut self) -> Decoded<i8> {
        Ok(self.u8()? as i8)
    }

    fn u16(&mut self) -> Decoded<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Decoded<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Decoded<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Decoded<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Decoded<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Decoded<()> {
        let n = 4.min(self.bytes.len());
        if self.bytes[..n] != expected[..n] || n < 4 {
            // A short file whose prefix matches is truncated, not foreign.
            if self.bytes[..n] == expected[..n] {
                return Err(FormatError::Truncated { offset: n, needed: 4 - n });
            }
            return Err(FormatError::BadMagic { expected, found: self.bytes[..n].to_vec() });
        }
        self.pos = 4;
        Ok(())
    }

    fn version(&mut self) -> Decoded<()> {
        match self.u8()? {
            VERSION => Ok(()),
            v => Err(FormatError::UnsupportedVersion(v)),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn finish(&self) -> Decoded<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---- .tnd ----

pub fn encode_tnd(frames: &[DepthFrame]) -> Decoded<Vec<u8>> {
    let mut out = TND_MAGIC.to_vec();
    for f in frames {
        if f.rows == 0 || f.cols == 0 || f.rows > 255 || f.cols > 255 || f.pixels.len() != f.rows * f.cols {
            return Err(FormatError::Invalid(format!("frame {}x{} with {} pixels", f.rows, f.cols, f.pixels.len())));
        }
        out.extend([f.rows as u8, f.cols as u8, f.frame_id]);
        out.extend(f.timestamp_us.to_le_bytes());
        out.extend(&f.pixels);
    }
    Ok(out)
}

pub fn decode_tnd(bytes: &[u8]) -> Decoded<Vec<DepthFrame>> {
    let mut r = Reader::new(bytes);
    r.magic(TND_MAGIC)?;
    let mut frames = Vec::new();
    while r.remaining() > 0 {
        let rows = r.u8()? as usize;
        let cols = r.u8()? as usize;
        let frame_id = r.u8()?;
        let timestamp_us = r.u64()?;
        if rows == 0 || cols == 0 {
            return Err(FormatError::Invalid(format!("frame dimensions {rows}x{cols}")));
        }
        let pixels = r.take(rows * cols)?.to_vec();
        frames.push(DepthFrame { frame_id, rows, cols, pixels, timestamp_us });
    }
    Ok(frames)
}

pub fn save_tnd(path: impl AsRef<Path>, frames: &[DepthFrame]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tnd(frames).map_err(|e| Error::format(path, e))?;
    write_file(path, &bytes)
}

pub fn load_tnd(path: impl AsRef<Path>) -> Result<Vec<DepthFrame>> {
    let path = path.as_ref();
    decode_tnd(&read_file(path)?).map_err(|e| Error::format(path, e))
}

// ---- layer headers shared by .tnwt and .tnqt ----

fn push_layer_header(out: &mut Vec<u8>, spec: &LayerSpec) {
    let dims: Vec<usize> = match *spec {
        LayerSpec::Conv(c) => {
            out.push(KIND_CONV);
            c.weight_dims().to_vec()
        }
        LayerSpec::Dense { inputs, outputs } => {
            out.push(KIND_DENSE);
            vec![inputs, outputs]
        }
    };
    for d in dims {
        out.extend((d as u16).to_le_bytes());
    }
}

/// Reads a kind byte and dims, checking them against layer `index` of the
/// reference network (strides are implied by the architecture).
fn read_layer_header(r: &mut Reader, index: usize) -> Decoded<LayerSpec> {
    let kind = r.u8()?;
    let expected = MODEL_SPEC[index];
    let found = match kind {
        KIND_CONV => {
            let d = [r.u16()?, r.u16()?, r.u16()?, r.u16()?].map(usize::from);
            if d[0] != d[1] {
                return Err(FormatError::ShapeMismatch(format!("layer {index}: non-square kernel {}x{}", d[0], d[1])));
            }
            let stride = match expected {
                LayerSpec::Conv(c) => c.stride,
                LayerSpec::Dense { .. } => 1,
            };
            LayerSpec::Conv(ConvSpec::new(d[0], stride, d[2], d[3]))
        }
        KIND_DENSE => LayerSpec::Dense { inputs: r.u16()? as usize, outputs: r.u16()? as usize },
        k => return Err(FormatError::Invalid(format!("layer {index}: unknown kind byte {k}"))),
    };
    if found != expected {
        return Err(FormatError::ShapeMismatch(format!("layer {index}: found {found:?}, expected {expected:?}")));
    }
    Ok(found)
}

fn layer_count(r: &mut Reader) -> Decoded<()> {
    let n = r.u8()? as usize;
    if n != MODEL_SPEC.len() {
        return Err(FormatError::ShapeMismatch(format!("{n} layers, the reference model has {}", MODEL_SPEC.len())));
    }
    Ok(())
}

// ---- .tnwt ----

/// Weights are stored as `f32`; loading widens them back to `f64`.
pub fn encode_weights(model: &FloatModel) -> Vec<u8> {
    let mut out = TNWT_MAGIC.to_vec();
    out.push(VERSION);
    out.push(MODEL_SPEC.len() as u8);
    for (spec, (w, b)) in MODEL_SPEC.iter().zip(model.param_layers()) {
        push_layer_header(&mut out, spec);
        for v in w.data().iter().chain(b.data()) {
            out.extend((*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Decoded<FloatModel> {
    let mut r = Reader::new(bytes);
    r.magic(TNWT_MAGIC)?;
    r.version()?;
    layer_count(&mut r)?;
    let template = FloatModel::init(0);
    let mut params = Vec::with_capacity(MODEL_SPEC.len());
    for (i, (w0, b0)) in template.param_layers().into_iter().enumerate() {
        read_layer_header(&mut r, i)?;
        let mut read = |t: &Tensor| -> Decoded<Tensor> {
            let data = (0..t.len()).map(|_| r.f32().map(f64::from)).collect::<Decoded<Vec<_>>>()?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::Invalid(format!("layer {i}: non-finite parameter")));
            }
            Ok(Tensor::new(t.dims(), data).expect("template dims"))
        };
        let w = read(w0)?;
        let b = read(b0)?;
        params.push((w, b));
    }
    r.finish()?;
    FloatModel::from_layers(params, ModelMeta::default()).map_err(|e| FormatError::ShapeMismatch(e.to_string()))
}

pub fn save_weights(path: impl AsRef<Path>, model: &FloatModel) -> Result<()> {
    write_file(path.as_ref(), &encode_weights(model))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<FloatModel> {
    let path = path.as_ref();
    decode_weights(&read_file(path)?).map_err(|e| Error::format(path, e))
}

// ---- .tnqt ----

fn push_params(out: &mut Vec<u8>, p: &QuantParams) {
    out.extend(p.scale.to_le_bytes());
    out.push(p.zero_point as u8);
}

fn read_params(r: &mut Reader) -> Decoded<QuantParams> {
    Ok(QuantParams { scale: r.f32()?, zero_point: r.i8()? })
}

pub fn encode_quant(qm: &QuantModel) -> Vec<u8> {
    let mut out = TNQT_MAGIC.to_vec();
    out.push(VERSION);
    out.push(qm.layers.len() as u8);
    for (spec, layer) in MODEL_SPEC.iter().zip(&qm.layers) {
        push_layer_header(&mut out, spec);
        out.extend(layer.weights.iter().map(|&w| w as u8));
        for s in &layer.weight_scales {
            out.extend(s.to_le_bytes());
        }
        for b in &layer.bias {
            out.extend(b.to_le_bytes());
        }
        push_params(&mut out, &layer.output);
    }
    push_params(&mut out, &qm.input);
    out
}

pub fn decode_quant(bytes: &[u8]) -> Decoded<QuantModel> {
    let mut r = Reader::new(bytes);
    r.magic(TNQT_MAGIC)?;
    r.version()?;
    layer_count(&mut r)?;
    let mut layers = Vec::with_capacity(MODEL_SPEC.len());
    for i in 0..MODEL_SPEC.len() {
        let kind = match read_layer_header(&mut r, i)? {
            LayerSpec::Conv(c) => QuantKind::Conv(c),
            LayerSpec::Dense { inputs, outputs } => QuantKind::Dense { inputs, outputs },
        };
        let weights = r.take(kind.weight_len())?.iter().map(|&b| b as i8).collect();
        let n = kind.outputs();
        let weight_scales = (0..n).map(|_| r.f32()).collect::<Decoded<_>>()?;
        let bias = (0..n).map(|_| r.i32()).collect::<Decoded<_>>()?;
        let output = read_params(&mut r)?;
        layers.push(QuantLayer { kind, weights, weight_scales, bias, output });
    }
    let input = read_params(&mut r)?;
    r.finish()?;
    QuantModel::from_parts(layers, input).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn save_quant(path: impl AsRef<Path>, qm: &QuantModel) -> Result<()> {
    write_file(path.as_ref(), &encode_quant(qm))
}

pub fn load_quant(path: impl AsRef<Path>) -> Result<QuantModel> {
    let path = path.as_ref();
    decode_quant(&read_file(path)?).map_err(|e| Error::format(path, e))
}

// ---- .tnds ----

pub fn encode_dataset(windows: &[FrameWindow]) -> Decoded<Vec<u8>> {
    let mut out = TNDS_MAGIC.to_vec();
    out.push(VERSION);
    out.extend([INPUT_SIDE as u8, INPUT_SIDE as u8, WINDOW_LEN as u8]);
    out.extend(
        u32::try_from(windows.len()).map_err(|_| FormatError::Invalid("too many windows".into()))?.to_le_bytes(),
    );
    out.reserve(windows.len() * (INPUT_LEN + 9));
    for w in windows {
        if w.pixels.len() != INPUT_LEN {
            return Err(FormatError::Invalid(format!("window with {} pixels", w.pixels.len())));
        }
        out.extend(&w.pixels);
        out.extend((w.label.steering as f32).to_le_bytes());
        out.extend((w.label.throttle as f32).to_le_bytes());
        out.push(w.provenance.flipped as u8);
    }
    Ok(out)
}

/// Windows come back in file order; the provenance end index is the
/// position in the file.
pub fn decode_dataset(bytes: &[u8]) -> Decoded<Vec<FrameWindow>> {
    let mut r = Reader::new(bytes);
    r.magic(TNDS_MAGIC)?;
    r.version()?;
    let dims = r.array::<3>()?;
    if dims != [INPUT_SIDE as u8, INPUT_SIDE as u8, WINDOW_LEN as u8] {
        return Err(FormatError::ShapeMismatch(format!("window dims {dims:?}, expected [24, 24, 20]")));
    }
    let count = r.u32()? as usize;
    let mut windows = Vec::with_capacity(count.min(r.remaining() / INPUT_LEN + 1));
    for i in 0..count {
        let pixels = r.take(INPUT_LEN)?.to_vec();
        let label = ControlCommand { steering: r.f32()? as f64, throttle: r.f32()? as f64 };
        if !label.in_range() {
            return Err(FormatError::Invalid(format!("window {i}: label {label:?} out of range")));
        }
        let flipped = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(FormatError::Invalid(format!("window {i}: flipped flag {b}"))),
        };
        windows.push(FrameWindow {
            pixels,
            label,
            provenance: Provenance { recording: 0, end_index: i as u32, flipped },
        });
    }
    r.finish()?;
    Ok(windows)
}

pub fn save_dataset(path: impl AsRef<Path>, windows: &[FrameWindow]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(windows).map_err(|e| Error::format(path, e))?;
    write_file(path, &bytes)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<FrameWindow>> {
    let path = path.as_ref();
    decode_dataset(&read_file(path)?).map_err(|e| Error::format(path, e))
}

/// File order for a split: train windows first (mirrored copies included),
/// then test windows.
pub fn split_file_order(split: &SplitDataset) -> Vec<FrameWindow> {
    split.train.iter().chain(&split.test).cloned().collect()
}

/// Inverse of [`split_file_order`]. Among the unmirrored windows, the first
/// 60% are train and the rest test; every mirrored window belongs to train.
pub fn split_from_file(windows: Vec<FrameWindow>, seed: u64) -> Result<SplitDataset> {
    let plain = windows.iter().filter(|w| !w.provenance.flipped).count();
    if plain < 2 {
        return Err(tinynav_core::Error::EmptyInput("dataset needs at least two unmirrored windows").into());
    }
    let n_train = ((plain as f64) * DEFAULT_SPLIT + 1e-9) as usize;
    let mirrored = windows.len() - plain;
    if mirrored != 0 && mirrored != n_train {
        return Err(Error::Other(format!("{mirrored} mirrored windows do not match {n_train} train windows")));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut seen = 0;
    for w in windows {
        if w.provenance.flipped {
            train.push(w);
        } else {
            if seen < n_train {
                train.push(w);
            } else {
                test.push(w);
            }
            seen += 1;
        }
    }
    Ok(SplitDataset { train, test, seed, ratio: DEFAULT_SPLIT })
}

// ---- .tnrec ----

fn sample_bytes(rows: usize, cols: usize) -> usize {
    8 + rows * cols + 8
}

pub fn encode_recording(rec: &Recording) -> Decoded<Vec<u8>> {
    let (rows, cols) = rec.samples.first().map(|s| (s.frame.rows, s.frame.cols)).unwrap_or((25, 25));
    let mut out = recording_header(rows, cols)?;
    for s in &rec.samples {
        push_sample(&mut out, s, rows, cols)?;
    }
    Ok(out)
}

fn recording_header(rows: usize, cols: usize) -> Decoded<Vec<u8>> {
    if rows == 0 || cols == 0 || rows > 255 || cols > 255 {
        return Err(FormatError::Invalid(format!("sensor dims {rows}x{cols}")));
    }
    let mut out = TNREC_MAGIC.to_vec();
    out.extend([rows as u8, cols as u8]);
    Ok(out)
}

fn push_sample(out: &mut Vec<u8>, s: &Sample, rows: usize, cols: usize) -> Decoded<()> {
    if s.frame.rows != rows || s.frame.cols != cols || s.frame.pixels.len() != rows * cols {
        return Err(FormatError::Invalid(format!(
            "sample frame {}x{} in a {rows}x{cols} recording",
            s.frame.rows, s.frame.cols
        )));
    }
    out.extend(s.timestamp_us.to_le_bytes());
    out.extend(&s.frame.pixels);
    out.extend((s.command.steering as f32).to_le_bytes());
    out.extend((s.command.throttle as f32).to_le_bytes());
    Ok(())
}

/// Samples run to the end of the file. Frame ids are the sample index
/// modulo 256.
pub fn decode_recording(bytes: &[u8], source: &str) -> Decoded<Recording> {
    let mut r = Reader::new(bytes);
    r.magic(TNREC_MAGIC)?;
    let rows = r.u8()? as usize;
    let cols = r.u8()? as usize;
    if rows == 0 || cols == 0 {
        return Err(FormatError::Invalid(format!("sensor dims {rows}x{cols}")));
    }
    let mut rec = Recording::new(source);
    while r.remaining() > 0 {
        if r.remaining() < sample_bytes(rows, cols) {
            return Err(FormatError::Truncated { offset: r.pos, needed: sample_bytes(rows, cols) - r.remaining() });
        }
        let timestamp_us = r.u64()?;
        let pixels = r.take(rows * cols)?.to_vec();
        let command = ControlCommand { steering: r.f32()? as f64, throttle: r.f32()? as f64 };
        let frame_id = rec.samples.len() as u8;
        rec.samples.push(Sample {
            frame: DepthFrame { frame_id, rows, cols, pixels, timestamp_us },
            command,
            timestamp_us,
        });
    }
    Ok(rec)
}

pub fn save_recording(path: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_recording(rec).map_err(|e| Error::format(path, e))?;
    write_file(path, &bytes)
}

/// Loads a recording, tagging it with the file stem.
pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_recording(&read_file(path)?, &source).map_err(|e| Error::format(path, e))
}

/// Append-only `.tnrec` writer; every sample is flushed as it arrives.
pub struct RecordingWriter {
    out: BufWriter<File>,
    rows: usize,
    cols: usize,
    samples: usize,
    path: std::path::PathBuf,
}

impl RecordingWriter {
    pub fn create(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let header = recording_header(rows, cols).map_err(|e| Error::format(&path, e))?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out, rows, cols, samples: 0, path })
    }

    pub fn append(&mut self, sample: &Sample) -> Result<()> {
        let mut buf = Vec::with_capacity(sample_bytes(self.rows, self.cols));
        push_sample(&mut buf, sample, self.rows, self.cols).map_err(|e| Error::format(&self.path, e))?;
        self.out.write_all(&buf).and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))?;
        self.samples += 1;
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.samples)
    }
}

// ---- portable graymap ----

/// Binary PGM (P5) of a square map with values in `[0, 1]`.
pub fn encode_pgm(side: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
