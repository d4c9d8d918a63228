//! Pixel-wise coded exposure: single-bump shutter functions, the coded image
//! they produce, and the measurement operator with its adjoint.
//!
//! Each pixel opens exactly once for `bump` consecutive frames. Bump starts are
//! uniform over the non-wrapping positions `0..=frames - bump`, so boundary
//! frames are sampled less often than interior ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_io::{Tensor, TensorData};
use crate::volume::{FrameSequence, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct ShutterFunction {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub bump: usize,
    /// Seed the shutter was drawn with; `None` when loaded from a mask.
    pub seed: Option<u64>,
    /// First open frame of each pixel, row-major.
    starts: Vec<usize>,
}

/// Per-frame and overall fraction of open pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingStats {
    pub per_frame: Vec<f64>,
    pub overall: f64,
}

/// A coded image together with the shutter parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedImage {
    pub image: Image,
    pub bump: usize,
    pub shutter_seed: Option<u64>,
}

/// Draws a shutter with one contiguous bump of length `bump` per pixel.
///
/// Pixels are visited in row-major order from a single ChaCha8 stream, so the
/// same arguments always reproduce the same mask.
pub fn generate_shutter(
    width: usize,
    height: usize,
    frames: usize,
    bump: usize,
    seed: u64,
) -> Result<ShutterFunction> {
    if width == 0 || height == 0 || frames == 0 {
        return Err(Error::param("shutter dimensions must be at least 1"));
    }
    if bump == 0 || bump > frames {
        return Err(Error::param(format!(
            "bump length {bump} must satisfy 1 <= L <= T = {frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = frames - bump;
    let starts = (0..width * height)
        .map(|_| rng.random_range(0..=last))
        .collect();
    Ok(ShutterFunction {
        width,
        height,
        frames,
        bump,
        seed: Some(seed),
        starts,
    })
}

impl ShutterFunction {
    /// Builds a shutter from explicit per-pixel bump starts.
    pub fn from_starts(
        width: usize,
        height: usize,
        frames: usize,
        bump: usize,
        starts: Vec<usize>,
    ) -> Result<Self> {
        if bump == 0 || bump > frames {
            return Err(Error::param("bump length must satisfy 1 <= L <= T"));
        }
        if starts.len() != width * height {
            return Err(Error::param("one bump start per pixel required"));
        }
        if starts.iter().any(|&s| s + bump > frames) {
            return Err(Error::param("bump start places the bump past the last frame"));
        }
        Ok(ShutterFunction {
            width,
            height,
            frames,
            bump,
            seed: None,
            starts,
        })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn start(&self, pixel: usize) -> usize {
        self.starts[pixel]
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    #[inline]
    pub fn is_open(&self, pixel: usize, t: usize) -> bool {
        let s = self.starts[pixel];
        t >= s && t < s + self.bump
    }

    /// Binary mask in `(T, H, W)` order.
    pub fn mask(&self) -> Vec<u8> {
        let n = self.pixels();
        let mut m = vec![0u8; n * self.frames];
        for (p, &s) in self.starts.iter().enumerate() {
            for t in s..s + self.bump {
                m[t * n + p] = 1;
            }
        }
        m
    }

    /// Restricts the shutter to a spatial window.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ShutterFunction> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::param("crop window outside shutter"));
        }
        let mut starts = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                starts.push(self.starts[y * self.width + x]);
            }
        }
        Ok(ShutterFunction {
            width: w,
            height: h,
            frames: self.frames,
            bump: self.bump,
            seed: self.seed,
            starts,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.frames, self.height, self.width],
            data: TensorData::U8(self.mask()),
        }
    }

    /// Recovers a shutter from a stored binary mask, checking the single-bump
    /// structure and that every pixel shares one bump length.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[frames, height, width] = t.dims.as_slice() else {
            return Err(Error::Format(format!(
                "shutter must be a (T,H,W) tensor, got {:?}",
                t.dims
            )));
        };
        let TensorData::U8(mask) = &t.data else {
            return Err(Error::Format("shutter mask must be uint8".into()));
        };
        let n = width * height;
        let mut starts = Vec::with_capacity(n);
        let mut bump = None;
        for p in 0..n {
            let open: Vec<usize> = (0..frames).filter(|&tt| mask[tt * n + p] != 0).collect();
            if mask.iter().skip(p).step_by(n).any(|&v| v > 1) {
                return Err(Error::Format("shutter mask must be binary".into()));
            }
            let (Some(&first), Some(&last)) = (open.first(), open.last()) else {
                return Err(Error::Format(format!("pixel {p} is never exposed")));
            };
            let len = last - first + 1;
            if len != open.len() {
                return Err(Error::Format(format!("pixel {p} has more than one bump")));
            }
            match bump {
                None => bump = Some(len),
                Some(l) if l != len => {
                    return Err(Error::Format(format!(
                        "pixel {p} has bump length {len}, expected {l}"
                    )))
                }
                _ => {}
            }
            starts.push(first);
        }
        let bump = bump.ok_or_else(|| Error::Format("empty shutter".into()))?;
        ShutterFunction::from_starts(width, height, frames, bump, starts)
            .map_err(|e| Error::Format(e.to_string()))
    }

    fn check_volume(&self, v: &FrameSequence) -> Result<()> {
        if v.width != self.width || v.height != self.height || v.frames != self.frames {
            return Err(Error::param(format!(
                "volume {}x{}x{} does not match shutter {}x{}x{}",
                v.width, v.height, v.frames, self.width, self.height, self.frames
            )));
        }
        Ok(())
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.width != self.width || img.height != self.height {
            return Err(Error::param(format!(
                "image {}x{} does not match shutter {}x{}",
                img.width, img.height, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Forward operator: `out(x,y) = sum_t S(x,y,t) v(x,y,t)`.
pub fn apply_measurement(volume: &FrameSequence, shutter: &ShutterFunction) -> Result<Image> {
    shutter.check_volume(volume)?;
    let n = shutter.pixels();
    let data = (0..n)
        .map(|p| {
            let s = shutter.starts[p];
            (s..s + shutter.bump).map(|t| volume.data[t * n + p]).sum()
        })
        .collect();
    Image::from_vec(shutter.width, shutter.height, data)
}

/// Adjoint operator: `out(x,y,t) = S(x,y,t) image(x,y)`.
pub fn apply_measurement_adjoint(image: &Image, shutter: &ShutterFunction) -> Result<FrameSequence> {
    shutter.check_image(image)?;
    let n = shutter.pixels();
    let mut out = FrameSequence::zeros(shutter.width, shutter.height, shutter.frames);
    for p in 0..n {
        let s = shutter.starts[p];
        for t in s..s + shutter.bump {
            out.data[t * n + p] = image.data[p];
        }
    }
    Ok(out)
}

/// Forms the coded image of a frame sequence. No normalization is applied,
/// so values lie in `[0, L]` for inputs in `[0, 1]`.
pub fn code_exposure(seq: &FrameSequence, shutter: &ShutterFunction) -> Result<CodedImage> {
    Ok(CodedImage {
        image: apply_measurement(seq, shutter)?,
        bump: shutter.bump,
        shutter_seed: shutter.seed,
    })
}

/// Baseline estimate: the coded image divided by `L`, repeated for all
/// `frames` frames.
pub fn zero_order(coded: &CodedImage, frames: usize) -> FrameSequence {
    let img = &coded.image;
    let scale = 1.0 / coded.bump as f64;
    let mut out = FrameSequence::zeros(img.width, img.height, frames);
    for t in 0..frames {
        for (o, &v) in out.frame_mut(t).iter_mut().zip(&img.data) {
            *o = v * scale;
        }
    }
    out
}

pub fn sampling_stats(shutter: &ShutterFunction) -> SamplingStats {
    let n = shutter.pixels();
    let mut counts = vec![0usize; shutter.frames];
    for &s in &shutter.starts {
        for c in &mut counts[s..s + shutter.bump] {
            *c += 1;
        }
    }
    let total: usize = counts.iter().sum();
    SamplingStats {
        per_frame: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        overall: total as f64 / (n * shutter.frames) as f64,
    }
}
