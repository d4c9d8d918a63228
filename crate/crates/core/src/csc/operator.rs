use num_complex::Complex64;

use super::{temporal_diff, temporal_diff_adjoint_add, FeatureMaps, FilterBank};
use crate::error::{Error, Result};
use crate::fourier::{FftScratch, RealFft2};
use crate::volume::FrameSequence;

/// The sum-of-convolutions operator `D` for one frame size, with filter
/// spectra cached.
pub struct ConvOperator {
    pub width: usize,
    pub height: usize,
    pub filters: usize,
    fft: RealFft2,
    spectra: Vec<Complex64>,
    /// `sum_k |d_k(w)|^2` per frequency.
    energy: Vec<f64>,
}

/// Inverse Thomas pivots of the tridiagonal `I + grad^T grad + shift I`
/// along time, whose off-diagonal entries are all `-1`.
fn inverse_pivots(frames: usize, shift: f64, out: &mut [f64]) {
    let mut prev: Option<f64> = None;
    for t in 0..frames {
        let neighbours = usize::from(t > 0) + usize::from(t + 1 < frames);
        let diag = 1.0 + neighbours as f64 + shift;
        let pivot = match prev {
            Some(p) => diag - p,
            None => diag,
        };
        out[t] = 1.0 / pivot;
        prev = Some(out[t]);
    }
}

/// Solves the tridiagonal system in place for all bins of a `frames x bins`
/// stack, given the inverse pivot of each (frame, bin).
fn thomas(x: &mut [Complex64], bins: usize, inv: impl Fn(usize, usize) -> f64) {
    let frames = x.len() / bins;
    for (w, v) in x[..bins].iter_mut().enumerate() {
        *v *= inv(0, w);
    }
    for t in 1..frames {
        let (done, rest) = x.split_at_mut(t * bins);
        for (w, (v, pv)) in rest[..bins].iter_mut().zip(&done[(t - 1) * bins..]).enumerate() {
            *v = (*v + pv) * inv(t, w);
        }
    }
    for t in (0..frames.saturating_sub(1)).rev() {
        let (head, tail) = x.split_at_mut((t + 1) * bins);
        for (w, (v, nv)) in head[t * bins..].iter_mut().zip(&tail[..bins]).enumerate() {
            *v += nv * inv(t, w);
        }
    }
}

/// Source of the right side and sink of the solution of the quadratic
/// solve, one `T x H x W` filter block at a time.
pub trait MapBlocks {
    fn fill(&mut self, k: usize, out: &mut [f64]);
    fn accept(&mut self, k: usize, x: &[f64]);
}

struct InPlace<'a> {
    maps: &'a mut FeatureMaps,
    block: usize,
}

impl MapBlocks for InPlace<'_> {
    fn fill(&mut self, k: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.maps.data[k * self.block..(k + 1) * self.block]);
    }

    fn accept(&mut self, k: usize, x: &[f64]) {
        self.maps.data[k * self.block..(k + 1) * self.block].copy_from_slice(x);
    }
}

/// Buffers for the exact quadratic solve at a fixed frame count.
pub struct DirectWorkspace {
    frames: usize,
    /// Per filter, `M^-1` applied to the transformed map part of the right side.
    maps: Vec<Complex64>,
    /// Per frame, the synthesis of `maps`.
    coupling: Vec<Complex64>,
    /// Transformed data part, reused for the per-frame correction.
    data: Vec<Complex64>,
    shifted: Vec<Complex64>,
    spec: Vec<Complex64>,
    block: Vec<f64>,
    /// Pivots of `M`, one per frame.
    pivots: Vec<f64>,
    /// Pivots of `M + E(w)`, per frame and bin.
    shifted_pivots: Vec<f64>,
    scratch: FftScratch,
    loaded: bool,
}

impl ConvOperator {
    pub fn new(bank: &FilterBank, width: usize, height: usize) -> Result<Self> {
        let s = bank.size;
        if s > width || s > height {
            return Err(Error::param(format!(
                "filters of size {s} do not fit {width}x{height} frames"
            )));
        }
        let fft = RealFft2::new(width, height);
        let mut scratch = fft.scratch();
        let m = fft.spectrum_len();
        let kk = bank.count();
        let c = (s / 2) as isize;
        let mut spectra = vec![Complex64::default(); kk * m];
        let mut frame = vec![0.0; width * height];
        for k in 0..kk {
            frame.iter_mut().for_each(|v| *v = 0.0);
            let f = bank.filter(k);
            for i in 0..s {
                for j in 0..s {
                    let y = (i as isize - c).rem_euclid(height as isize) as usize;
                    let x = (j as isize - c).rem_euclid(width as isize) as usize;
                    frame[y * width + x] += f[i * s + j];
                }
            }
            fft.forward(&frame, &mut spectra[k * m..(k + 1) * m], &mut scratch);
        }
        let mut energy = vec![0.0; m];
        for k in 0..kk {
            for (e, d) in energy.iter_mut().zip(&spectra[k * m..(k + 1) * m]) {
                *e += d.norm_sqr();
            }
        }
        Ok(ConvOperator {
            width,
            height,
            filters: kk,
            fft,
            spectra,
            energy,
        })
    }

    fn spectrum(&self, k: usize) -> &[Complex64] {
        let m = self.fft.spectrum_len();
        &self.spectra[k * m..(k + 1) * m]
    }

    /// Largest squared singular value of `D`, i.e. `max_w sum_k |d_k(w)|^2`.
    pub fn norm_sq(&self) -> f64 {
        self.energy.iter().cloned().fold(0.0, f64::max)
    }

    fn check_maps(&self, maps: &FeatureMaps) {
        assert_eq!(maps.filters, self.filters, "filter count mismatch");
        assert_eq!((maps.width, maps.height), (self.width, self.height), "frame size mismatch");
    }

    pub fn workspace(&self, frames: usize) -> DirectWorkspace {
        let m = self.fft.spectrum_len();
        let mut pivots = vec![0.0; frames];
        inverse_pivots(frames, 0.0, &mut pivots);
        let mut shifted_pivots = vec![0.0; frames * m];
        let mut column = vec![0.0; frames];
        for (w, &e) in self.energy.iter().enumerate() {
            inverse_pivots(frames, e, &mut column);
            for (t, &p) in column.iter().enumerate() {
                shifted_pivots[t * m + w] = p;
            }
        }
        DirectWorkspace {
            frames,
            maps: vec![Complex64::default(); self.filters * frames * m],
            coupling: vec![Complex64::default(); frames * m],
            data: vec![Complex64::default(); frames * m],
            shifted: vec![Complex64::default(); frames * m],
            spec: vec![Complex64::default(); m],
            block: vec![0.0; frames * self.width * self.height],
            pivots,
            shifted_pivots,
            scratch: self.fft.scratch(),
            loaded: false,
        }
    }

    /// `sum_k d_k(w) z_k^t(w)` for frame `t`.
    fn synthesize_spectrum(&self, maps: &FeatureMaps, t: usize, acc: &mut [Complex64], tmp: &mut [Complex64], s: &mut FftScratch) {
        acc.iter_mut().for_each(|v| *v = Complex64::default());
        for k in 0..self.filters {
            self.fft.forward(maps.map(k, t), tmp, s);
            for ((a, d), z) in acc.iter_mut().zip(self.spectrum(k)).zip(tmp.iter()) {
                *a += d * z;
            }
        }
    }

    /// Writes `IFFT(conj(d_k) v)` into every map of frame `t`.
    fn scatter_adjoint(&self, v: &[Complex64], t: usize, out: &mut FeatureMaps, tmp: &mut [Complex64], s: &mut FftScratch) {
        for k in 0..self.filters {
            for ((o, d), vv) in tmp.iter_mut().zip(self.spectrum(k)).zip(v) {
                *o = d.conj() * vv;
            }
            self.fft.inverse(tmp, out.map_mut(k, t), s);
        }
    }

    /// `D z`: frame `t` is `sum_k d_k * z_k^t`.
    pub fn apply(&self, maps: &FeatureMaps) -> FrameSequence {
        self.check_maps(maps);
        let m = self.fft.spectrum_len();
        let mut s = self.fft.scratch();
        let mut acc = vec![Complex64::default(); m];
        let mut tmp = vec![Complex64::default(); m];
        let mut out = FrameSequence::zeros(self.width, self.height, maps.frames);
        for t in 0..maps.frames {
            self.synthesize_spectrum(maps, t, &mut acc, &mut tmp, &mut s);
            self.fft.inverse(&mut acc, out.frame_mut(t), &mut s);
        }
        out
    }

    /// `D^T v`: map `k` of frame `t` is the correlation of `v_t` with `d_k`.
    pub fn adjoint(&self, frames: &FrameSequence) -> FeatureMaps {
        assert_eq!((frames.width, frames.height), (self.width, self.height));
        let m = self.fft.spectrum_len();
        let mut s = self.fft.scratch();
        let mut out = FeatureMaps::zeros(self.filters, self.width, self.height, frames.frames);
        let mut v = vec![Complex64::default(); m];
        let mut tmp = vec![Complex64::default(); m];
        for t in 0..frames.frames {
            self.fft.forward(frames.frame(t), &mut v, &mut s);
            self.scatter_adjoint(&v, t, &mut out, &mut tmp, &mut s);
        }
        out
    }

    /// `(D^T D + I + grad^T grad) u`.
    pub fn normal_apply(&self, u: &FeatureMaps) -> FeatureMaps {
        self.check_maps(u);
        let m = self.fft.spectrum_len();
        let mut s = self.fft.scratch();
        let mut acc = vec![Complex64::default(); m];
        let mut tmp = vec![Complex64::default(); m];
        let mut out = FeatureMaps::zeros(self.filters, self.width, self.height, u.frames);
        for t in 0..u.frames {
            self.synthesize_spectrum(u, t, &mut acc, &mut tmp, &mut s);
            self.scatter_adjoint(&acc, t, &mut out, &mut tmp, &mut s);
        }
        for (o, &v) in out.data.iter_mut().zip(&u.data) {
            *o += v;
        }
        let diff = temporal_diff(u);
        temporal_diff_adjoint_add(&diff, &mut out);
        out
    }

    /// Exact solution of `(D^T D + I + grad^T grad) u = D^T data + maps`.
    /// Returns `u` and `D u`.
    pub fn solve_direct(&self, data: &FrameSequence, maps: FeatureMaps) -> (FeatureMaps, FrameSequence) {
        self.check_maps(&maps);
        assert_eq!(data.frames, maps.frames);
        let block = maps.frames * maps.pixels();
        let mut u = maps;
        let mut du = FrameSequence::zeros(self.width, self.height, data.frames);
        let mut ws = self.workspace(data.frames);
        let mut blocks = InPlace { maps: &mut u, block };
        self.load(&mut ws, &mut blocks);
        self.solve_loaded(&mut ws, &data.data, &mut blocks, &mut du.data, false);
        (u, du)
    }

    /// Takes in the map part of the right side, `blocks.fill(k)` for every
    /// filter.
    pub fn load(&self, ws: &mut DirectWorkspace, blocks: &mut impl MapBlocks) {
        ws.coupling.iter_mut().for_each(|v| *v = Complex64::default());
        for k in 0..self.filters {
            blocks.fill(k, &mut ws.block);
            self.load_block(ws, k);
        }
        ws.loaded = true;
    }

    /// Transforms `ws.block` for filter `k`, applies `M^-1` along time and
    /// adds its synthesis to the coupling.
    fn load_block(&self, ws: &mut DirectWorkspace, k: usize) {
        let (n, m, tt) = (self.width * self.height, self.fft.spectrum_len(), ws.frames);
        let d = self.spectrum(k);
        let y = &mut ws.maps[k * tt * m..(k + 1) * tt * m];
        // forward sweep as each frame is transformed
        for t in 0..tt {
            let (done, rest) = y.split_at_mut(t * m);
            let yt = &mut rest[..m];
            self.fft.forward(&ws.block[t * n..(t + 1) * n], yt, &mut ws.scratch);
            let p = ws.pivots[t];
            if t == 0 {
                yt.iter_mut().for_each(|r| *r *= p);
            } else {
                for (r, pv) in yt.iter_mut().zip(&done[(t - 1) * m..]) {
                    *r = (*r + pv) * p;
                }
            }
        }
        for t in (0..tt).rev() {
            let (head, tail) = y.split_at_mut((t + 1) * m);
            let yt = &mut head[t * m..];
            let c = &mut ws.coupling[t * m..(t + 1) * m];
            if t + 1 < tt {
                let p = ws.pivots[t];
                for (((r, nv), cv), dv) in yt.iter_mut().zip(&tail[..m]).zip(c.iter_mut()).zip(d) {
                    *r += nv * p;
                    *cv += dv * *r;
                }
            } else {
                for ((r, cv), dv) in yt.iter().zip(c.iter_mut()).zip(d) {
                    *cv += dv * r;
                }
            }
        }
    }

    /// Finishes the solve for the loaded right side plus `D^T data`, writing
    /// `D u` to `du` and handing each block of `u` to `blocks.accept(k)`.
    /// With `reload`, `blocks.fill(k)` runs right after each accept and the
    /// result is loaded for the next solve while it is still in cache.
    ///
    /// Per spatial frequency the system is `I (x) M + a a^H (x) I` over
    /// (filter, frame), with `a = conj(d(w))` and `M = I + grad^T grad`
    /// tridiagonal. By Woodbury, with `y_k = M^-1 r_k` and
    /// `s = sum_k d_k y_k`, the solution is `y_k - a_k v` where
    /// `(M + |a|^2) v = s`; its synthesis is `s - |a|^2 v`. The data part
    /// contributes `a_k h` to every `y_k`, `h = M^-1 FFT(data)`.
    pub fn solve_loaded(
        &self,
        ws: &mut DirectWorkspace,
        data: &[f64],
        blocks: &mut impl MapBlocks,
        du: &mut [f64],
        reload: bool,
    ) {
        let (n, m, tt) = (self.width * self.height, self.fft.spectrum_len(), ws.frames);
        assert!(ws.loaded, "right side not loaded");
        assert_eq!(data.len(), tt * n);
        assert_eq!(du.len(), tt * n);
        let DirectWorkspace {
            coupling,
            data: h,
            shifted: v,
            spec,
            pivots,
            shifted_pivots,
            scratch,
            ..
        } = &mut *ws;
        for t in 0..tt {
            self.fft.forward(&data[t * n..(t + 1) * n], &mut h[t * m..(t + 1) * m], scratch);
        }
        thomas(h, m, |t, _| pivots[t]);
        for t in 0..tt {
            let range = t * m..(t + 1) * m;
            for (((s, c), hv), e) in v[range.clone()].iter_mut().zip(&coupling[range.clone()]).zip(&h[range]).zip(&self.energy) {
                *s = c + hv * e;
            }
        }
        // coupling keeps s for the synthesis below; v becomes the solution
        coupling.copy_from_slice(v);
        thomas(v, m, |t, w| shifted_pivots[t * m + w]);
        for t in 0..tt {
            let range = t * m..(t + 1) * m;
            for ((o, s), (vv, e)) in spec.iter_mut().zip(&coupling[range.clone()]).zip(v[range].iter().zip(&self.energy)) {
                *o = s - vv * e;
            }
            self.fft.inverse(spec, &mut du[t * n..(t + 1) * n], scratch);
        }
        // per-frame correction h - v, shared by all filters through a_k
        for (hv, vv) in h.iter_mut().zip(v.iter()) {
            *hv -= vv;
        }
        ws.loaded = false;
        if reload {
            ws.coupling.iter_mut().for_each(|v| *v = Complex64::default());
        }
        for k in 0..self.filters {
            let d = self.spectrum(k);
            let y = &ws.maps[k * tt * m..(k + 1) * tt * m];
            for t in 0..tt {
                let c = &ws.data[t * m..(t + 1) * m];
                for ((o, yv), (dv, cv)) in ws.spec.iter_mut().zip(&y[t * m..]).zip(d.iter().zip(c)) {
                    *o = yv + dv.conj() * cv;
                }
                self.fft.inverse(&mut ws.spec, &mut ws.block[t * n..(t + 1) * n], &mut ws.scratch);
            }
            blocks.accept(k, &ws.block);
            if reload {
                blocks.fill(k, &mut ws.block);
                self.load_block(ws, k);
            }
        }
        ws.loaded = reload;
    }
}
