//! Dense 2D images and 3D frame stacks.
//!
//! Storage is frame-major with `x` fastest: sample `(x, y, t)` lives at
//! `(t * height + y) * width + x`, so each frame is one contiguous slice.

use crate::error::{Error, Result};

/// A single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("image dimensions must be at least 1"));
        }
        if data.len() != width * height {
            return Err(Error::param(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Separable Gaussian blur, truncated at 3 sigma, edge pixels replicated.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= ksum);
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = Image::zeros(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let xx = (x + i as isize - radius).clamp(0, w - 1);
                    acc += kv * self.data[(y * w + xx) as usize];
                }
                tmp.data[(y * w + x) as usize] = acc;
            }
        }
        let mut out = Image::zeros(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let yy = (y + i as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp.data[(yy * w + x) as usize];
                }
                out.data[(y * w + x) as usize] = acc;
            }
        }
        out
    }
}

/// A grayscale video volume of `frames` images of `width x height`.
///
/// Values read from disk are normalized to `[0, 1]`; intermediate volumes
/// (adjoint outputs, unclamped reconstructions) may hold any finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl FrameSequence {
    pub fn zeros(width: usize, height: usize, frames: usize) -> Self {
        FrameSequence {
            width,
            height,
            frames,
            data: vec![0.0; width * height * frames],
        }
    }

    pub fn from_vec(width: usize, height: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || frames == 0 {
            return Err(Error::param("frame sequence dimensions must be at least 1"));
        }
        if data.len() != width * height * frames {
            return Err(Error::param(format!(
                "frame data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                frames
            )));
        }
        Ok(FrameSequence {
            width,
            height,
            frames,
            data,
        })
    }

    /// Stacks equally sized images into a sequence.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::param("cannot build a sequence from zero frames"))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(w * h * images.len());
        for (i, img) in images.iter().enumerate() {
            if img.width != w || img.height != h {
                return Err(Error::param(format!(
                    "frame {} is {}x{}, expected {}x{}",
                    i, img.width, img.height, w, h
                )));
            }
            data.extend_from_slice(&img.data);
        }
        FrameSequence::from_vec(w, h, images.len(), data)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, t: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, t: usize) -> f64 {
        self.data[self.index(x, y, t)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, t: usize, v: f64) {
        let i = self.index(x, y, t);
        self.data[i] = v;
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn frame_image(&self, t: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.frame(t).to_vec(),
        }
    }

    /// The first `count` frames.
    pub fn truncated(&self, count: usize) -> FrameSequence {
        let count = count.min(self.frames);
        FrameSequence {
            width: self.width,
            height: self.height,
            frames: count,
            data: self.data[..count * self.pixels()].to_vec(),
        }
    }

    pub fn clamped(&self) -> FrameSequence {
        FrameSequence {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FrameSequence) -> bool {
        self.width == other.width && self.height == other.height && self.frames == other.frames
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}
