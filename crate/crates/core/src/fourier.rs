//! 2D DFTs of real frames, keeping half the spectrum.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// 2D DFT of real `width x height` row-major frames, keeping the
/// non-redundant half of the spectrum.
///
/// Spectra hold `(width / 2 + 1) * height` bins, stored column-major: bin
/// `(kx, ky)` sits at `kx * height + ky`. Every pointwise spectral product
/// only needs the layout to be consistent, so it is never transposed back.
/// The inverse is scaled by `1 / (width * height)`.
///
/// Rows are transformed two at a time as the real and imaginary parts of
/// one complex row, all rows in a single batched call.
pub struct RealFft2 {
    pub width: usize,
    pub height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// Work buffers for one [`RealFft2`]; reuse across calls.
pub struct FftScratch {
    rows: Vec<Complex64>,
    fft: Vec<Complex64>,
}

impl RealFft2 {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        RealFft2 {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    /// Number of stored bins.
    pub fn spectrum_len(&self) -> usize {
        (self.width / 2 + 1) * self.height
    }

    fn row_pairs(&self) -> usize {
        self.height.div_ceil(2)
    }

    pub fn scratch(&self) -> FftScratch {
        let need = [&self.row_fwd, &self.row_inv, &self.col_fwd, &self.col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        FftScratch {
            rows: vec![Complex64::default(); self.row_pairs() * self.width],
            fft: vec![Complex64::default(); need],
        }
    }

    pub fn forward(&self, input: &[f64], out: &mut [Complex64], s: &mut FftScratch) {
        let (w, h) = (self.width, self.height);
        debug_assert_eq!(input.len(), w * h);
        debug_assert_eq!(out.len(), self.spectrum_len());
        for (j, z) in s.rows.chunks_exact_mut(w).enumerate() {
            let re = &input[2 * j * w..(2 * j + 1) * w];
            if 2 * j + 1 < h {
                let im = &input[(2 * j + 1) * w..(2 * j + 2) * w];
                for ((zv, &a), &b) in z.iter_mut().zip(re).zip(im) {
                    *zv = Complex64::new(a, b);
                }
            } else {
                for (zv, &a) in z.iter_mut().zip(re) {
                    *zv = Complex64::new(a, 0.0);
                }
            }
        }
        self.row_fwd.process_with_scratch(&mut s.rows, &mut s.fft);
        for (j, z) in s.rows.chunks_exact(w).enumerate() {
            let y = 2 * j;
            if y + 1 < h {
                // split the spectra of the two real rows
                for kx in 0..=w / 2 {
                    let p = z[kx];
                    let q = z[(w - kx) % w].conj();
                    out[kx * h + y] = (p + q) * 0.5;
                    let d = (p - q) * 0.5;
                    out[kx * h + y + 1] = Complex64::new(d.im, -d.re);
                }
            } else {
                for kx in 0..=w / 2 {
                    out[kx * h + y] = z[kx];
                }
            }
        }
        if h > 1 {
            self.col_fwd.process_with_scratch(out, &mut s.fft);
        }
    }

    /// Real frame from a half spectrum; `spec` is destroyed.
    pub fn inverse(&self, spec: &mut [Complex64], out: &mut [f64], s: &mut FftScratch) {
        let (w, h) = (self.width, self.height);
        debug_assert_eq!(spec.len(), self.spectrum_len());
        debug_assert_eq!(out.len(), w * h);
        if h > 1 {
            self.col_inv.process_with_scratch(spec, &mut s.fft);
        }
        let half = w / 2;
        // bins that must be real for a real row; drops rounding residue
        let real_bin = |kx: usize, v: Complex64| {
            if kx == 0 || 2 * kx == w {
                Complex64::new(v.re, 0.0)
            } else {
                v
            }
        };
        for (j, z) in s.rows.chunks_exact_mut(w).enumerate() {
            let y = 2 * j;
            let pair = y + 1 < h;
            for kx in 0..=half {
                let a = real_bin(kx, spec[kx * h + y]);
                let b = if pair {
                    real_bin(kx, spec[kx * h + y + 1])
                } else {
                    Complex64::default()
                };
                // a + i b, and its mirror built from the Hermitian halves
                z[kx] = Complex64::new(a.re - b.im, a.im + b.re);
                if kx > 0 && kx < w - kx {
                    z[w - kx] = Complex64::new(a.re + b.im, b.re - a.im);
                }
            }
        }
        self.row_inv.process_with_scratch(&mut s.rows, &mut s.fft);
        let scale = 1.0 / (w * h) as f64;
        for (j, z) in s.rows.chunks_exact(w).enumerate() {
            let y = 2 * j;
            for (o, v) in out[y * w..(y + 1) * w].iter_mut().zip(z) {
                *o = v.re * scale;
            }
            if y + 1 < h {
                for (o, v) in out[(y + 1) * w..(y + 2) * w].iter_mut().zip(z) {
                    *o = v.im * scale;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(a: &[f64], w: usize, h: usize, kx: usize, ky: usize) -> Complex64 {
        let mut acc = Complex64::default();
        for y in 0..h {
            for x in 0..w {
                let ph = -2.0 * PI * (kx as f64 * x as f64 / w as f64 + ky as f64 * y as f64 / h as f64);
                acc += a[y * w + x] * Complex64::from_polar(1.0, ph);
            }
        }
        acc
    }

    #[test]
    fn forward_matches_naive_dft_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (w, h) in [(6, 5), (5, 6), (1, 4), (4, 1), (8, 8)] {
            let a: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>() - 0.5).collect();
            let fft = RealFft2::new(w, h);
            let mut s = fft.scratch();
            let mut spec = vec![Complex64::default(); fft.spectrum_len()];
            fft.forward(&a, &mut spec, &mut s);
            for kx in 0..=w / 2 {
                for ky in 0..h {
                    assert!((spec[kx * h + ky] - naive_dft(&a, w, h, kx, ky)).norm() < 1e-10);
                }
            }
            let mut back = vec![0.0; w * h];
            fft.inverse(&mut spec, &mut back, &mut s);
            for (x, y) in back.iter().zip(&a) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
