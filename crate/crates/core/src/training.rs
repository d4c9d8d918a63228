//! Learning a 2D convolutional filter bank by alternating minimization.
//!
//! Each alternation codes every training image with the current filters
//! (ADMM with an identity measurement and no temporal term), then refits the
//! filters by least squares over their `s x s` support with the maps fixed,
//! and finally projects each filter onto the unit ball.

use log::info;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::csc::{CscParams, FeatureMaps, FilterBank, QuadSolver};
use crate::csc::{run_admm, ConvOperator};
use crate::error::{Error, Result};
use crate::fourier::{FftScratch, RealFft2};
use crate::shutter::ShutterFunction;
use crate::volume::{dot, norm_sq, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct CscTrainConfig {
    pub filters: usize,
    pub size: usize,
    /// L1 weight of the coding step, relative to a unit data weight.
    pub sparsity: f64,
    pub alternations: usize,
    /// ADMM iterations per coding step.
    pub code_iters: usize,
    /// CG iterations per filter update.
    pub filter_iters: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Default for CscTrainConfig {
    fn default() -> Self {
        CscTrainConfig {
            filters: 100,
            size: 11,
            sparsity: 1.0,
            alternations: 15,
            code_iters: 30,
            filter_iters: 20,
            rho: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedBank {
    pub bank: FilterBank,
    /// Training objective `sum_i 1/2 ||x_i - D z_i||^2 + sparsity ||z_i||_1`
    /// after each alternation.
    pub history: Vec<f64>,
}

/// Rescales `d` onto the unit L2 ball; kernels already inside are unchanged.
pub fn project_filter(d: &[f64]) -> Vec<f64> {
    let n = norm_sq(d).sqrt();
    if n > 1.0 {
        d.iter().map(|v| v / n).collect()
    } else {
        d.to_vec()
    }
}

/// Subtracts a Gaussian low-pass and scales to unit standard deviation.
///
/// This is the same split the reconstruction uses: the low-pass part is
/// carried separately, filters only model what remains.
pub fn contrast_normalize(img: &Image, sigma: f64) -> Image {
    let low = img.gaussian_blur(sigma);
    let mut out = img.clone();
    for (v, l) in out.data.iter_mut().zip(&low.data) {
        *v -= l;
    }
    let mean = out.mean();
    out.data.iter_mut().for_each(|v| *v -= mean);
    let std = (norm_sq(&out.data) / out.len() as f64).sqrt();
    if std > 0.0 {
        out.data.iter_mut().for_each(|v| *v /= std);
    }
    out
}

fn random_bank(cfg: &CscTrainConfig) -> FilterBank {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let area = cfg.size * cfg.size;
    let mut data: Vec<f64> = (0..cfg.filters * area)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for f in data.chunks_mut(area) {
        let n = norm_sq(f).sqrt();
        f.iter_mut().for_each(|v| *v /= n);
    }
    FilterBank {
        size: cfg.size,
        data,
    }
}

/// Least-squares filter update for fixed maps, as an operator on the
/// `K x s x s` filter coefficients.
struct FilterSystem<'a> {
    size: usize,
    filters: usize,
    images: &'a [Image],
    ffts: Vec<RealFft2>,
    /// Per image, the `K` map spectra.
    map_spectra: Vec<Vec<Complex64>>,
}

impl<'a> FilterSystem<'a> {
    fn new(images: &'a [Image], maps: &[FeatureMaps], size: usize) -> Self {
        let filters = maps[0].filters;
        let mut ffts = Vec::with_capacity(images.len());
        let mut map_spectra = Vec::with_capacity(images.len());
        for (img, z) in images.iter().zip(maps) {
            let fft = RealFft2::new(img.width, img.height);
            let mut s = fft.scratch();
            let m = fft.spectrum_len();
            let mut spec = vec![Complex64::default(); filters * m];
            for k in 0..filters {
                fft.forward(z.map(k, 0), &mut spec[k * m..(k + 1) * m], &mut s);
            }
            ffts.push(fft);
            map_spectra.push(spec);
        }
        FilterSystem {
            size,
            filters,
            images,
            ffts,
            map_spectra,
        }
    }

    fn offset(&self, i: usize, j: usize, w: usize, h: usize) -> usize {
        let c = (self.size / 2) as isize;
        let y = (i as isize - c).rem_euclid(h as isize) as usize;
        let x = (j as isize - c).rem_euclid(w as isize) as usize;
        y * w + x
    }

    fn embed(&self, d: &[f64], w: usize, h: usize, out: &mut [f64]) {
        let s = self.size;
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..s {
            for j in 0..s {
                out[self.offset(i, j, w, h)] += d[i * s + j];
            }
        }
    }

    fn crop_add(&self, full: &[f64], w: usize, h: usize, out: &mut [f64]) {
        let s = self.size;
        for i in 0..s {
            for j in 0..s {
                out[i * s + j] += full[self.offset(i, j, w, h)];
            }
        }
    }

    /// `sum_i Z_i^T v_i` restricted to the support, where `v_i` is given by spectrum.
    fn correlate(&self, i: usize, v: &[Complex64], out: &mut [f64], buf: &mut [Complex64], frame: &mut [f64], s: &mut FftScratch) {
        let (w, h) = (self.images[i].width, self.images[i].height);
        let m = self.ffts[i].spectrum_len();
        let area = self.size * self.size;
        for k in 0..self.filters {
            let z = &self.map_spectra[i][k * m..(k + 1) * m];
            for ((b, zv), vv) in buf.iter_mut().zip(z).zip(v) {
                *b = zv.conj() * vv;
            }
            self.ffts[i].inverse(buf, frame, s);
            self.crop_add(frame, w, h, &mut out[k * area..(k + 1) * area]);
        }
    }

    fn rhs(&self) -> Vec<f64> {
        let area = self.size * self.size;
        let mut out = vec![0.0; self.filters * area];
        for (i, img) in self.images.iter().enumerate() {
            let fft = &self.ffts[i];
            let mut s = fft.scratch();
            let m = fft.spectrum_len();
            let mut v = vec![Complex64::default(); m];
            let mut buf = vec![Complex64::default(); m];
            let mut frame = vec![0.0; img.len()];
            fft.forward(&img.data, &mut v, &mut s);
            self.correlate(i, &v, &mut out, &mut buf, &mut frame, &mut s);
        }
        out
    }

    fn apply(&self, d: &[f64]) -> Vec<f64> {
        let area = self.size * self.size;
        let mut out = vec![0.0; self.filters * area];
        for (i, img) in self.images.iter().enumerate() {
            let (w, h) = (img.width, img.height);
            let fft = &self.ffts[i];
            let m = fft.spectrum_len();
            let mut s = fft.scratch();
            let mut acc = vec![Complex64::default(); m];
            let mut buf = vec![Complex64::default(); m];
            let mut frame = vec![0.0; w * h];
            for k in 0..self.filters {
                self.embed(&d[k * area..(k + 1) * area], w, h, &mut frame);
                fft.forward(&frame, &mut buf, &mut s);
                let z = &self.map_spectra[i][k * m..(k + 1) * m];
                for ((a, zv), dv) in acc.iter_mut().zip(z).zip(&buf) {
                    *a += zv * dv;
                }
            }
            self.correlate(i, &acc, &mut out, &mut buf, &mut frame, &mut s);
        }
        out
    }

    /// Upper bound on the largest eigenvalue of the normal operator:
    /// per image, the peak over frequencies of `sum_k |z_k(w)|^2`.
    fn lipschitz(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.images.len() {
            let m = self.ffts[i].spectrum_len();
            let mut peak: f64 = 0.0;
            for w in 0..m {
                let e: f64 = (0..self.filters).map(|k| self.map_spectra[i][k * m + w].norm_sqr()).sum();
                peak = peak.max(e);
            }
            total += peak;
        }
        total.max(f64::MIN_POSITIVE)
    }

    /// CG on the filter normal equations, warm-started at `d0`.
    fn solve(&self, d0: &[f64], iters: usize) -> Vec<f64> {
        let b = self.rhs();
        let mut x = d0.to_vec();
        let ax = self.apply(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut p = r.clone();
        let mut rr = norm_sq(&r);
        let stop = 1e-10 * norm_sq(&b).sqrt();
        for _ in 0..iters {
            if rr.sqrt() <= stop {
                break;
            }
            let ap = self.apply(&p);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rr / pap;
            for ((xi, pi), (ri, api)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
                *xi += alpha * pi;
                *ri -= alpha * api;
            }
            let rr_new = norm_sq(&r);
            let beta = rr_new / rr;
            rr = rr_new;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
        }
        x
    }
}

fn image_objective(op: &ConvOperator, img: &Image, z: &FeatureMaps, sparsity: f64) -> f64 {
    let x = op.apply(z);
    let res: f64 = img.data.iter().zip(&x.data).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * res + sparsity * z.l1_norm()
}

fn training_objective(bank: &FilterBank, images: &[Image], maps: &[FeatureMaps], sparsity: f64) -> Result<f64> {
    let mut total = 0.0;
    for (img, z) in images.iter().zip(maps) {
        let op = ConvOperator::new(bank, img.width, img.height)?;
        total += image_objective(&op, img, z, sparsity);
    }
    Ok(total)
}

fn set_filters(bank: &mut FilterBank, coeffs: &[f64]) {
    let area = bank.size * bank.size;
    for (k, f) in coeffs.chunks(area).enumerate() {
        bank.filter_mut(k).copy_from_slice(&project_filter(f));
    }
}

pub fn train_filters(images: &[Image], cfg: &CscTrainConfig) -> Result<TrainedBank> {
    if images.is_empty() {
        return Err(Error::param("no training images"));
    }
    if cfg.filters == 0 || cfg.size == 0 || cfg.size % 2 == 0 {
        return Err(Error::param("need at least one filter of odd size"));
    }
    if cfg.alternations == 0 || cfg.code_iters == 0 {
        return Err(Error::param("iteration counts must be at least 1"));
    }
    if let Some(img) = images.iter().find(|i| i.width < cfg.size || i.height < cfg.size) {
        return Err(Error::param(format!(
            "training image {}x{} is smaller than the {}x{} filters",
            img.width, img.height, cfg.size, cfg.size
        )));
    }
    let params = CscParams {
        beta_d: 1.0,
        beta_1: cfg.sparsity,
        beta_2: 0.0,
        rho: cfg.rho,
        outer_iters: cfg.code_iters,
        stop_tol: 0.0,
        quad_solver: QuadSolver::Direct,
        background_sigma: None,
        ..CscParams::default()
    };
    let shutters: Vec<ShutterFunction> = images
        .iter()
        .map(|img| ShutterFunction::from_starts(img.width, img.height, 1, 1, vec![0; img.len()]))
        .collect::<Result<_>>()?;

    let mut bank = random_bank(cfg);
    let mut maps: Vec<FeatureMaps> = images
        .iter()
        .map(|img| FeatureMaps::zeros(cfg.filters, img.width, img.height, 1))
        .collect();
    let mut history = Vec::with_capacity(cfg.alternations);
    for alt in 0..cfg.alternations {
        // coding step; a run that ends above its starting point is discarded
        for (i, img) in images.iter().enumerate() {
            let op = ConvOperator::new(&bank, img.width, img.height)?;
            let before = image_objective(&op, img, &maps[i], cfg.sparsity);
            let state = run_admm(&op, img, &shutters[i], &params, Some(maps[i].clone()))?;
            // the split copy is exactly sparse and often the better code
            let (u, w2) = (state.u, state.w2);
            let (fu, fw) = (image_objective(&op, img, &u, cfg.sparsity), image_objective(&op, img, &w2, cfg.sparsity));
            let (best, value) = if fw <= fu { (w2, fw) } else { (u, fu) };
            if value < before {
                maps[i] = best;
            }
        }

        // filter step: projected least squares, or projected gradient from
        // the current bank if projecting the least-squares fit does not help
        let current = training_objective(&bank, images, &maps, cfg.sparsity)?;
        let system = FilterSystem::new(images, &maps, cfg.size);
        let mut candidate = bank.clone();
        set_filters(&mut candidate, &system.solve(&bank.data, cfg.filter_iters));
        let mut value = training_objective(&candidate, images, &maps, cfg.sparsity)?;
        if value > current {
            candidate = bank.clone();
            let step = 1.0 / system.lipschitz();
            let rhs = system.rhs();
            for _ in 0..cfg.filter_iters {
                let grad = system.apply(&candidate.data);
                let moved: Vec<f64> = candidate
                    .data
                    .iter()
                    .zip(grad.iter().zip(&rhs))
                    .map(|(d, (g, r))| d - step * (g - r))
                    .collect();
                set_filters(&mut candidate, &moved);
            }
            value = training_objective(&candidate, images, &maps, cfg.sparsity)?;
        }
        if value <= current {
            bank = candidate;
        } else {
            value = current;
        }
        info!("alternation {}/{}: objective {:.6e}", alt + 1, cfg.alternations, value);
        history.push(value);
    }
    Ok(TrainedBank { bank, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn projection_cases() {
        assert_eq!(project_filter(&[0.0; 9]), vec![0.0; 9]);
        let d = [2.0, 0.0, 0.0, 0.0];
        assert_eq!(project_filter(&d), vec![1.0, 0.0, 0.0, 0.0]);
        let d = [0.3, 0.4, 0.0, 0.0];
        assert_eq!(project_filter(&d), d.to_vec());
        let d = [1.2, -1.6];
        let p = project_filter(&d);
        assert!((norm_sq(&p).sqrt() - 1.0).abs() < 1e-15);
        assert!((p[0] / p[1] - d[0] / d[1]).abs() < 1e-15);
    }

    #[test]
    fn filter_system_adjoint_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images: Vec<Image> = (0..2)
            .map(|_| Image::from_vec(8, 7, (0..56).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let maps: Vec<FeatureMaps> = (0..2)
            .map(|_| {
                let mut m = FeatureMaps::zeros(3, 8, 7, 1);
                m.data.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
                m
            })
            .collect();
        let sys = FilterSystem::new(&images, &maps, 3);
        let d: Vec<f64> = (0..27).map(|_| rng.random::<f64>() - 0.5).collect();
        let e: Vec<f64> = (0..27).map(|_| rng.random::<f64>() - 0.5).collect();
        // symmetric positive semidefinite
        let a = dot(&sys.apply(&d), &e);
        let b = dot(&d, &sys.apply(&e));
        assert!((a - b).abs() < 1e-9);
        assert!(dot(&sys.apply(&d), &d) >= 0.0);
        // ||Z d||^2 computed by synthesis equals d^T (Z^T Z) d
        let bank = FilterBank { size: 3, data: d.clone() };
        let mut energy = 0.0;
        for z in &maps {
            let op = ConvOperator::new(&bank, 8, 7).unwrap();
            energy += norm_sq(&op.apply(z).data);
        }
        assert!((energy - dot(&sys.apply(&d), &d)).abs() < 1e-9);
    }

    #[test]
    fn image_smaller_than_filter_rejected() {
        let cfg = CscTrainConfig {
            size: 11,
            ..CscTrainConfig::default()
        };
        let img = Image::zeros(10, 20);
        assert!(matches!(train_filters(&[img], &cfg), Err(Error::Param(_))));
        assert!(matches!(train_filters(&[], &cfg), Err(Error::Param(_))));
    }

    #[test]
    fn contrast_normalized_is_zero_mean_unit_std() {
        let img = crate::synthetic::dead_leaves(48, 3);
        let n = contrast_normalize(&img, 2.0);
        assert!(n.mean().abs() < 1e-12);
        assert!(((norm_sq(&n.data) / n.len() as f64).sqrt() - 1.0).abs() < 1e-12);
    }

    /// Largest absolute normalized correlation of `a` with any circular shift
    /// of `b` (the sign is shared with the maps, so it is not identifiable).
    fn best_shift_correlation(a: &[f64], b: &[f64], s: usize) -> f64 {
        let (na, nb) = (norm_sq(a).sqrt(), norm_sq(b).sqrt());
        let mut best: f64 = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                let mut acc = 0.0;
                for y in 0..s {
                    for x in 0..s {
                        acc += a[y * s + x] * b[((y + dy) % s) * s + (x + dx) % s];
                    }
                }
                best = best.max((acc / (na * nb)).abs());
            }
        }
        best
    }

    #[test]
    fn planted_single_atom() {
        let s = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut patch: Vec<f64> = (0..s * s).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm_sq(&patch).sqrt();
        patch.iter_mut().for_each(|v| *v /= n);
        let img = Image::from_vec(s, s, patch.clone()).unwrap();
        let cfg = CscTrainConfig {
            filters: 1,
            size: s,
            sparsity: 0.2,
            alternations: 30,
            code_iters: 30,
            filter_iters: 30,
            seed: 3,
            ..CscTrainConfig::default()
        };
        let trained = train_filters(&[img], &cfg).unwrap();
        let corr = best_shift_correlation(trained.bank.filter(0), &patch, s);
        assert!(corr >= 0.99, "correlation {corr}");
    }

    #[test]
    fn trained_bank_respects_constraints() {
        let images: Vec<Image> = (0..2)
            .map(|i| contrast_normalize(&crate::synthetic::dead_leaves(32, i), 2.0))
            .collect();
        let cfg = CscTrainConfig {
            filters: 6,
            size: 5,
            alternations: 5,
            code_iters: 10,
            filter_iters: 10,
            ..CscTrainConfig::default()
        };
        let trained = train_filters(&images, &cfg).unwrap();
        assert_eq!(trained.history.len(), 5);
        for k in 0..6 {
            assert!(norm_sq(trained.bank.filter(k)).sqrt() <= 1.0 + 1e-9);
        }
        assert!(trained.history.last().unwrap() <= trained.history.first().unwrap());
        // same seed, same bank
        assert_eq!(train_filters(&images, &cfg).unwrap().bank, trained.bank);
    }
}
