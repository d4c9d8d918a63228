//! Run-directory layout: artifact paths, metadata and loaders.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsvideo::csc::FilterBank;
use hsvideo::shutter::{CodedImage, ShutterFunction};
use hsvideo::tensor_io::{
    image_from_tensor, image_to_tensor, load_frames, read_tensor, save_frames, save_image,
    sequence_from_tensor, sequence_to_tensor, write_tensor, BitDepth,
};
use hsvideo::{FrameSequence, Image};

use crate::config::{RunConfig, RUN_SECTION};

pub const FRAMES_DIR: &str = "frames";
pub const FRAMES_RAW: &str = "frames.cvt";
pub const CODED: &str = "coded.cvt";
pub const CODED_DISPLAY: &str = "coded.png";
pub const SHUTTER: &str = "shutter.cvt";
pub const REPORT: &str = "report.csv";
pub const OBJECTIVE: &str = "objective.csv";
pub const META: &str = "meta.txt";
pub const MOSAIC: &str = "filters.png";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    /// 16-bit PNG frames plus the lossless f64 tensor.
    pub fn write_frames(&self, seq: &FrameSequence) -> Result<()> {
        save_frames(&seq.clamped(), self.path(FRAMES_DIR), BitDepth::Sixteen)?;
        write_tensor(self.path(FRAMES_RAW), &sequence_to_tensor(seq))?;
        Ok(())
    }

    /// Raw coded sum, its display image scaled by `1/L`, and the shutter.
    pub fn write_capture(&self, coded: &CodedImage, shutter: &ShutterFunction) -> Result<()> {
        write_tensor(self.path(CODED), &image_to_tensor(&coded.image))?;
        let mut display = coded.image.clone();
        display.data.iter_mut().for_each(|v| *v /= coded.bump as f64);
        save_image(&display, &self.path(CODED_DISPLAY), BitDepth::Sixteen)?;
        write_tensor(self.path(SHUTTER), &shutter.to_tensor())?;
        Ok(())
    }

    pub fn write_meta(&self, command: &str, cfg: &RunConfig, run: &[(String, String)]) -> Result<()> {
        let mut text = format!(
            "command={command}\nversion={}\n{}{RUN_SECTION}\n",
            env!("CARGO_PKG_VERSION"),
            cfg.render()
        );
        for (k, v) in run {
            text += &format!("{k}={v}\n");
        }
        self.write_text(META, &text)
    }
}

/// A frame sequence from a `.cvt` file, a run directory (`frames.cvt` or
/// `frames/`) or a plain directory of `frame_NNNN` images.
pub fn load_sequence(path: &Path) -> Result<FrameSequence> {
    if path.is_file() {
        return Ok(sequence_from_tensor(&read_tensor(path)?)?);
    }
    if !path.is_dir() {
        bail!("{} does not exist", path.display());
    }
    let raw = path.join(FRAMES_RAW);
    if raw.is_file() {
        return Ok(sequence_from_tensor(&read_tensor(&raw)?)?);
    }
    let sub = path.join(FRAMES_DIR);
    let dir = if sub.is_dir() { sub } else { path.to_path_buf() };
    Ok(load_frames(&dir, None)?)
}

/// Coded image and shutter from explicit files, or from a simulate run.
pub fn load_capture(
    run: Option<&Path>,
    coded: Option<&Path>,
    shutter: Option<&Path>,
) -> Result<(CodedImage, ShutterFunction)> {
    let (coded, shutter) = match (run, coded, shutter) {
        (Some(r), None, None) => (r.join(CODED), r.join(SHUTTER)),
        (None, Some(c), Some(s)) => (c.to_path_buf(), s.to_path_buf()),
        _ => bail!("give either --input RUN_DIR or both --coded and --shutter"),
    };
    let shutter = ShutterFunction::from_tensor(&read_tensor(&shutter)?)?;
    let image = image_from_tensor(&read_tensor(&coded)?)?;
    if (image.width, image.height) != (shutter.width, shutter.height) {
        bail!(
            "coded image is {}x{} but the shutter is {}x{}",
            image.width,
            image.height,
            shutter.width,
            shutter.height
        );
    }
    Ok((
        CodedImage {
            image,
            bump: shutter.bump,
            shutter_seed: shutter.seed,
        },
        shutter,
    ))
}

/// Filters tiled on a gray background, each scaled by its own peak magnitude.
pub fn filter_mosaic(bank: &FilterBank) -> Image {
    let k = bank.count();
    let s = bank.size;
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let cell = s + 1;
    let mut img = Image::zeros(cols * cell + 1, rows * cell + 1);
    img.data.iter_mut().for_each(|v| *v = 0.5);
    for i in 0..k {
        let f = bank.filter(i);
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let (x0, y0) = (1 + (i % cols) * cell, 1 + (i / cols) * cell);
        for y in 0..s {
            for x in 0..s {
                img.set(x0 + x, y0 + y, 0.5 + 0.5 * f[y * s + x] / peak);
            }
        }
    }
    img
}
