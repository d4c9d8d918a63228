//! Image quality: PSNR and multi-scale SSIM.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{FrameSequence, Image};

/// Per-scale exponents of the standard five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const MIN_SCALE_SIZE: usize = 16;
pub const MIN_MS_SSIM_SIZE: usize = 32;

/// PSNR in dB for unit peak. Identical inputs yield `f64::INFINITY`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr(pub f64);

impl Psnr {
    pub fn is_infinite(&self) -> bool {
        self.0.is_infinite()
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{:.6}", self.0)
        }
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::param(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`.
pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    check_same(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr(f64::INFINITY));
    }
    Ok(Psnr(10.0 * (1.0 / mse).log10()))
}

/// Number of scales used for an image whose shorter side is `min_side`.
pub fn ms_ssim_scales(min_side: usize) -> usize {
    let mut n = 0;
    while n < 5 && min_side >> n >= MIN_SCALE_SIZE {
        n += 1;
    }
    n
}

fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(img: &[f64], w: usize, h: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean luminance and contrast-structure terms of single-scale SSIM.
fn ssim_terms(a: &[f64], b: &[f64], w: usize, h: usize, g: &[f64]) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(a, w, h, g);
    let (mu_b, _, _) = filter_valid(b, w, h, g);
    let (e_aa, _, _) = filter_valid(&aa, w, h, g);
    let (e_bb, _, _) = filter_valid(&bb, w, h, g);
    let (e_ab, _, _) = filter_valid(&ab, w, h, g);
    let n = (ow * oh) as f64;
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (lum / n, cs / n)
}

/// 2x2 box average followed by decimation.
fn downsample(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (img[i] + img[i + 1] + img[i + w] + img[i + w + 1]);
        }
    }
    (out, ow, oh)
}

/// Multi-scale SSIM with the standard window, stabilizers and exponents.
///
/// Images smaller than 256 px use fewer than five scales (coarsest side
/// at least 16 px); the retained exponents are rescaled to the five-scale
/// total. Negative contrast-structure means are clamped to zero so the score
/// stays in `[0, 1]`.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let min_side = a.width.min(a.height);
    if min_side < MIN_MS_SSIM_SIZE {
        return Err(Error::param(format!(
            "MS-SSIM needs images of at least {MIN_MS_SSIM_SIZE} px, got {}x{}",
            a.width, a.height
        )));
    }
    let scales = ms_ssim_scales(min_side);
    let total: f64 = MS_SSIM_WEIGHTS.iter().sum();
    let partial: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let g = gaussian_window();

    let (mut ca, mut cb) = (a.data.clone(), b.data.clone());
    let (mut w, mut h) = (a.width, a.height);
    let mut score = 1.0;
    for s in 0..scales {
        let (lum, cs) = ssim_terms(&ca, &cb, w, h, &g);
        let weight = MS_SSIM_WEIGHTS[s] * total / partial;
        score *= cs.max(0.0).powf(weight);
        if s + 1 == scales {
            score *= lum.max(0.0).powf(weight);
        } else {
            let (na, nw, nh) = downsample(&ca, w, h);
            let (nb, _, _) = downsample(&cb, w, h);
            ca = na;
            cb = nb;
            w = nw;
            h = nh;
        }
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub psnr: Vec<Psnr>,
    /// Mean over frames with finite PSNR; infinite when every frame is exact.
    pub mean_psnr: Psnr,
    pub ms_ssim: Vec<f64>,
    pub mean_ms_ssim: f64,
    pub scales: usize,
}

impl QualityReport {
    /// `frame_index,psnr_db,ms_ssim` rows with `inf` for exact frames.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,psnr_db,ms_ssim\n");
        for (i, (p, m)) in self.psnr.iter().zip(&self.ms_ssim).enumerate() {
            let _ = writeln!(out, "{i},{p},{m:.6}");
        }
        out
    }
}

/// Per-frame PSNR and MS-SSIM of `estimate` against `reference`.
pub fn report(reference: &FrameSequence, estimate: &FrameSequence) -> Result<QualityReport> {
    if !reference.same_shape(estimate) {
        return Err(Error::param(format!(
            "sequences differ in shape: {}x{}x{} vs {}x{}x{}",
            reference.width,
            reference.height,
            reference.frames,
            estimate.width,
            estimate.height,
            estimate.frames
        )));
    }
    let mut psnrs = Vec::with_capacity(reference.frames);
    let mut ssims = Vec::with_capacity(reference.frames);
    for t in 0..reference.frames {
        let a = reference.frame_image(t);
        let b = estimate.frame_image(t);
        psnrs.push(psnr(&a, &b)?);
        ssims.push(ms_ssim(&a, &b)?);
    }
    let finite: Vec<f64> = psnrs.iter().map(|p| p.0).filter(|v| v.is_finite()).collect();
    let mean_psnr = if finite.is_empty() {
        Psnr(f64::INFINITY)
    } else {
        Psnr(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    let mean_ms_ssim = ssims.iter().sum::<f64>() / ssims.len() as f64;
    Ok(QualityReport {
        psnr: psnrs,
        mean_psnr,
        ms_ssim: ssims,
        mean_ms_ssim,
        scales: ms_ssim_scales(reference.width.min(reference.height)),
    })
}

/// Mean MS-SSIM over frames.
pub fn mean_ms_ssim(reference: &FrameSequence, estimate: &FrameSequence) -> Result<f64> {
    Ok(report(reference, estimate)?.mean_ms_ssim)
}

/// PSNR of the whole volume (one MSE over every sample).
pub fn volume_psnr(reference: &FrameSequence, estimate: &FrameSequence) -> Result<Psnr> {
    if !reference.same_shape(estimate) {
        return Err(Error::param("sequences differ in shape"));
    }
    let a = Image::from_vec(reference.width, reference.height * reference.frames, reference.data.clone())?;
    let b = Image::from_vec(estimate.width, estimate.height * estimate.frames, estimate.data.clone())?;
    psnr(&a, &b)
}
