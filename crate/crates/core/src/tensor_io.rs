//! Frame directories and the `CVT1` tensor container.
//!
//! `CVT1` layout, little-endian throughout:
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `b"CVT1"`                         |
//! | 4      | 1         | dtype: 0 = f32, 1 = f64, 2 = u8         |
//! | 5      | 1         | ndim                                    |
//! | 6      | 8 * ndim  | dims as u64                             |
//! | ...    | remainder | row-major payload, `prod(dims) * size`  |

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::volume::{FrameSequence, Image};

pub const MAGIC: &[u8; 4] = b"CVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional row-major array as stored in a `CVT1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "dims {:?} hold {} values but payload has {}",
                dims,
                expected,
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("too many dimensions: {}", dims.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(dims, TensorData::F64(data))
    }

    /// Values widened to f64 regardless of stored dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(6 + 8 * self.dims.len() + self.data.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Format("file shorter than header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let header = 6 + 8 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("truncated dims".into()));
        }
        let mut dims = Vec::with_capacity(ndim);
        for chunk in bytes[6..header].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        let payload = &bytes[header..];
        let expected = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload size overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {:?} need {}",
                payload.len(),
                dims,
                expected
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

/// Frame sequence as a `(T, H, W)` f64 tensor.
pub fn sequence_to_tensor(seq: &FrameSequence) -> Tensor {
    Tensor {
        dims: vec![seq.frames, seq.height, seq.width],
        data: TensorData::F64(seq.data.clone()),
    }
}

pub fn sequence_from_tensor(t: &Tensor) -> Result<FrameSequence> {
    match t.dims.as_slice() {
        &[frames, height, width] => FrameSequence::from_vec(width, height, frames, t.to_f64()),
        other => Err(Error::Format(format!("expected (T,H,W) tensor, got dims {other:?}"))),
    }
}

pub fn image_to_tensor(img: &Image) -> Tensor {
    Tensor {
        dims: vec![img.height, img.width],
        data: TensorData::F64(img.data.clone()),
    }
}

pub fn image_from_tensor(t: &Tensor) -> Result<Image> {
    match t.dims.as_slice() {
        &[height, width] => Image::from_vec(width, height, t.to_f64()),
        other => Err(Error::Format(format!("expected (H,W) tensor, got dims {other:?}"))),
    }
}

/// Frame files in `dir` named `frame_<digits>.{png,pgm}`, sorted by index.
fn frame_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png") | Some("pgm")) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some(digits) = stem.strip_prefix("frame_") else {
            continue;
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let idx: u64 = digits
            .parse()
            .map_err(|_| Error::Ingest(format!("bad frame index in {}", path.display())))?;
        files.push((idx, path));
    }
    files.sort();
    Ok(files)
}

/// Decodes one lossless grayscale (or color, converted by Rec. 709 luminance)
/// image into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (0.2126 * r as f64 + 0.7152 * g as f64 + 0.0722 * b as f64).clamp(0.0, 1.0)
            })
            .collect(),
    };
    Image::from_vec(w, h, data)
}

/// Loads `frame_NNNN` images from `dir`, normalized to `[0, 1]`.
pub fn load_frames(dir: impl AsRef<Path>, expected: Option<usize>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Ingest(format!("{} is not a directory", dir.display())));
    }
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::Ingest(format!("no frame_NNNN images in {}", dir.display())));
    }
    if let Some(n) = expected {
        if files.len() < n {
            return Err(Error::Ingest(format!(
                "{} holds {} frames, expected at least {}",
                dir.display(),
                files.len(),
                n
            )));
        }
    }
    let mut images = Vec::with_capacity(files.len());
    for (_, path) in &files {
        let img = load_image(path)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if img.width != first.width || img.height != first.height {
                return Err(Error::Ingest(format!(
                    "{} is {}x{}, earlier frames are {}x{}",
                    path.display(),
                    img.width,
                    img.height,
                    first.width,
                    first.height
                )));
            }
        }
        images.push(img);
    }
    FrameSequence::from_images(&images).map_err(|e| Error::Ingest(e.to_string()))
}

/// Clamp to `[0, 1]` and quantize with round-half-up.
pub fn quantize(v: f64, max_code: u32) -> u32 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * max_code as f64 + 0.5).floor() as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::param(format!("bit depth must be 8 or 16, got {other}"))),
        }
    }

    pub fn max_code(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Writes one image as a grayscale PNG.
pub fn save_image(img: &Image, path: &Path, depth: BitDepth) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255) as u8).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw)
                .expect("buffer sized from image")
                .save_with_format(path, ImageFormat::Png)
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = img.data.iter().map(|&v| quantize(v, 65535) as u16).collect();
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw)
                .expect("buffer sized from image")
                .save_with_format(path, ImageFormat::Png)
        }
    };
    res.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

/// Writes `frame_0000.png`, `frame_0001.png`, ... into `dir`, creating it if needed.
pub fn save_frames(seq: &FrameSequence, dir: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..seq.frames {
        let path = dir.join(format!("frame_{t:04}.png"));
        save_image(&seq.frame_image(t), &path, depth)?;
    }
    Ok(())
}
