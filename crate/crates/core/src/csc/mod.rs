//! Convolutional sparse coding of video with a temporal-gradient penalty.
//!
//! A frame sequence is modeled per frame as `x_t = sum_k d_k * z_k^t` with
//! small 2D filters `d_k` and full-size 2D feature maps `z_k^t`. Recovery from
//! a coded image minimizes
//!
//! ```text
//! 1/2 beta_d ||b - Phi D z||^2 + beta_1 sum_k ||z_k||_1 + beta_2 sum_k ||grad_t z_k||_1
//! ```
//!
//! with ADMM over the splitting `K_1 = D`, `K_2 = I`, `K_3 = grad_t`.

mod admm;
mod operator;
mod prox;

pub use admm::{
    lowpass_background, reconstruct_csc, solve_quadratic, AdmmState, CscReconstruction,
};
pub use admm::run_admm;
pub use operator::{ConvOperator, DirectWorkspace, MapBlocks};
pub use prox::{prox_data, prox_data_pixel, prox_l1, soft_threshold};

use crate::error::{Error, Result};
use crate::shutter::{apply_measurement, CodedImage, ShutterFunction};
use crate::tensor_io::{Tensor, TensorData};
use crate::volume::FrameSequence;

/// `count` square filters of odd side `size`, each row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub size: usize,
    pub data: Vec<f64>,
}

pub const FILTER_NORM_SLACK: f64 = 1e-9;

impl FilterBank {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::param(format!("filter size {size} must be odd")));
        }
        let area = size * size;
        if data.is_empty() || data.len() % area != 0 {
            return Err(Error::param(format!(
                "filter data length {} is not a positive multiple of {area}",
                data.len()
            )));
        }
        let bank = FilterBank { size, data };
        for k in 0..bank.count() {
            let n = bank.filter(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || n > 1.0 + FILTER_NORM_SLACK {
                return Err(Error::param(format!("filter {k} has norm {n} > 1")));
            }
        }
        Ok(bank)
    }

    /// One filter that is a centered unit impulse.
    pub fn identity(size: usize) -> Self {
        let mut data = vec![0.0; size * size];
        data[(size / 2) * size + size / 2] = 1.0;
        FilterBank { size, data }
    }

    pub fn count(&self) -> usize {
        self.data.len() / (self.size * self.size)
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let a = self.size * self.size;
        &self.data[k * a..(k + 1) * a]
    }

    pub fn filter_mut(&mut self, k: usize) -> &mut [f64] {
        let a = self.size * self.size;
        &mut self.data[k * a..(k + 1) * a]
    }

    /// Stored as a `(K, s, s)` f64 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.count(), self.size, self.size],
            data: TensorData::F64(self.data.clone()),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[_, s1, s2] if s1 == s2 => FilterBank::new(s1, t.to_f64()),
            other => Err(Error::param(format!(
                "filter bank must be a (K, s, s) tensor, got dims {other:?}"
            ))),
        }
    }
}

/// Sparse maps `z_k^t`, laid out as `((k * frames + t) * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub filters: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl FeatureMaps {
    pub fn zeros(filters: usize, width: usize, height: usize, frames: usize) -> Self {
        FeatureMaps {
            filters,
            width,
            height,
            frames,
            data: vec![0.0; filters * width * height * frames],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn map(&self, k: usize, t: usize) -> &[f64] {
        let n = self.pixels();
        let i = (k * self.frames + t) * n;
        &self.data[i..i + n]
    }

    pub fn map_mut(&mut self, k: usize, t: usize) -> &mut [f64] {
        let n = self.pixels();
        let i = (k * self.frames + t) * n;
        &mut self.data[i..i + n]
    }

    pub fn same_shape(&self, other: &FeatureMaps) -> bool {
        self.filters == other.filters
            && self.width == other.width
            && self.height == other.height
            && self.frames == other.frames
    }

    /// Stored as a `(K, T, H, W)` f64 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.filters, self.frames, self.height, self.width],
            data: TensorData::F64(self.data.clone()),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[filters, frames, height, width] => Ok(FeatureMaps {
                filters,
                width,
                height,
                frames,
                data: t.to_f64(),
            }),
            other => Err(Error::param(format!(
                "feature maps must be a (K, T, H, W) tensor, got dims {other:?}"
            ))),
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }
}

/// How the quadratic `(D^T D + I + grad^T grad) u = rhs` step is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadSolver {
    /// Exact: per spatial frequency the system is tridiagonal in time plus a
    /// rank-1 filter coupling, handled by Thomas sweeps and Woodbury.
    Direct,
    /// Conjugate gradient on the normal equations, operators applied via FFT.
    ConjugateGradient,
}

impl std::fmt::Display for QuadSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuadSolver::Direct => write!(f, "direct"),
            QuadSolver::ConjugateGradient => write!(f, "cg"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CscParams {
    pub beta_d: f64,
    pub beta_1: f64,
    pub beta_2: f64,
    pub rho: f64,
    pub outer_iters: usize,
    /// Relative residual target for the CG quadratic solver.
    pub quad_tol: f64,
    pub quad_max_iters: usize,
    /// Stop early once `||u_new - u_old|| / ||u_old||` drops below this; 0 disables.
    pub stop_tol: f64,
    pub quad_solver: QuadSolver,
    /// Gaussian width of the low-pass background removed before coding and
    /// restored after synthesis; `None` solves on the raw coded image.
    pub background_sigma: Option<f64>,
}

impl Default for CscParams {
    fn default() -> Self {
        CscParams {
            beta_d: 100.0,
            beta_1: 10.0,
            beta_2: 1.0,
            rho: 1.0,
            outer_iters: 30,
            quad_tol: 1e-6,
            quad_max_iters: 50,
            stop_tol: 1e-4,
            quad_solver: QuadSolver::Direct,
            background_sigma: Some(2.0),
        }
    }
}

impl CscParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.beta_d, self.beta_1, self.beta_2];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::param("beta weights must be finite and non-negative"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::param("rho must be positive"));
        }
        if self.outer_iters == 0 || self.quad_max_iters == 0 {
            return Err(Error::param("iteration counts must be at least 1"));
        }
        if !(self.quad_tol > 0.0) || self.stop_tol < 0.0 {
            return Err(Error::param("tolerances must be positive"));
        }
        if let Some(s) = self.background_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param("background sigma must be positive"));
            }
        }
        Ok(())
    }
}

/// Value of each objective term and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub data: f64,
    pub sparsity: f64,
    pub temporal: f64,
    pub total: f64,
}

/// `x_t = sum_k d_k * z_k^t` with circular boundaries. Not clamped.
pub fn synthesize(bank: &FilterBank, maps: &FeatureMaps) -> Result<FrameSequence> {
    if bank.count() != maps.filters {
        return Err(Error::param(format!(
            "{} filters but {} map stacks",
            bank.count(),
            maps.filters
        )));
    }
    let op = ConvOperator::new(bank, maps.width, maps.height)?;
    Ok(op.apply(maps))
}

/// Backward differences along time: slice `t - 1` holds `z^t - z^{t-1}`.
/// Layout `((k * (T-1) + t) * H + y) * W + x`; empty when `T < 2`.
pub fn temporal_diff(maps: &FeatureMaps) -> Vec<f64> {
    let (kk, tt, n) = (maps.filters, maps.frames, maps.pixels());
    if tt < 2 {
        return Vec::new();
    }
    let mut out = vec![0.0; kk * (tt - 1) * n];
    for k in 0..kk {
        for t in 1..tt {
            let dst = &mut out[(k * (tt - 1) + t - 1) * n..(k * (tt - 1) + t) * n];
            let cur = maps.map(k, t);
            let prev = maps.map(k, t - 1);
            for ((d, &c), &p) in dst.iter_mut().zip(cur).zip(prev) {
                *d = c - p;
            }
        }
    }
    out
}

/// Adjoint of [`temporal_diff`], accumulated into `out`.
pub fn temporal_diff_adjoint_add(diff: &[f64], out: &mut FeatureMaps) {
    let (kk, tt, n) = (out.filters, out.frames, out.pixels());
    if tt < 2 {
        return;
    }
    debug_assert_eq!(diff.len(), kk * (tt - 1) * n);
    for k in 0..kk {
        for t in 1..tt {
            let src = &diff[(k * (tt - 1) + t - 1) * n..(k * (tt - 1) + t) * n];
            let base = k * tt * n;
            let (before, after) = out.data[base..base + tt * n].split_at_mut(t * n);
            let prev = &mut before[(t - 1) * n..];
            let cur = &mut after[..n];
            for ((c, p), &s) in cur.iter_mut().zip(prev.iter_mut()).zip(src) {
                *c += s;
                *p -= s;
            }
        }
    }
}

pub fn temporal_diff_adjoint(
    diff: &[f64],
    filters: usize,
    width: usize,
    height: usize,
    frames: usize,
) -> FeatureMaps {
    let mut out = FeatureMaps::zeros(filters, width, height, frames);
    temporal_diff_adjoint_add(diff, &mut out);
    out
}

pub(crate) fn check_problem(
    bank: &FilterBank,
    coded: &CodedImage,
    shutter: &ShutterFunction,
) -> Result<()> {
    if coded.image.width != shutter.width || coded.image.height != shutter.height {
        return Err(Error::param(format!(
            "coded image {}x{} does not match shutter {}x{}",
            coded.image.width, coded.image.height, shutter.width, shutter.height
        )));
    }
    if bank.size > shutter.width || bank.size > shutter.height {
        return Err(Error::param(format!(
            "filters of size {} do not fit {}x{} frames",
            bank.size, shutter.width, shutter.height
        )));
    }
    Ok(())
}

/// Terms of the coding objective evaluated from an already synthesized `D z`.
pub(crate) fn objective_from_parts(
    synthesized: &FrameSequence,
    maps: &FeatureMaps,
    coded: &[f64],
    shutter: &ShutterFunction,
    beta_d: f64,
    beta_1: f64,
    beta_2: f64,
) -> Result<ObjectiveTerms> {
    let measured = apply_measurement(synthesized, shutter)?;
    let res: f64 = coded
        .iter()
        .zip(&measured.data)
        .map(|(b, m)| (b - m) * (b - m))
        .sum();
    let data = 0.5 * beta_d * res;
    let sparsity = beta_1 * maps.l1_norm();
    let temporal = beta_2 * temporal_l1(maps);
    Ok(ObjectiveTerms {
        data,
        sparsity,
        temporal,
        total: data + sparsity + temporal,
    })
}

fn temporal_l1(maps: &FeatureMaps) -> f64 {
    let n = maps.pixels();
    let mut acc = 0.0;
    for k in 0..maps.filters {
        for t in 1..maps.frames {
            let base = (k * maps.frames + t) * n;
            for i in 0..n {
                acc += (maps.data[base + i] - maps.data[base - n + i]).abs();
            }
        }
    }
    acc
}

/// The coding objective for maps `z` against coded image `b`.
pub fn objective(
    maps: &FeatureMaps,
    bank: &FilterBank,
    coded: &CodedImage,
    shutter: &ShutterFunction,
    params: &CscParams,
) -> Result<ObjectiveTerms> {
    check_problem(bank, coded, shutter)?;
    if maps.width != shutter.width || maps.height != shutter.height || maps.frames != shutter.frames
    {
        return Err(Error::param("feature maps do not match the shutter"));
    }
    let synth = synthesize(bank, maps)?;
    objective_from_parts(
        &synth,
        maps,
        &coded.image.data,
        shutter,
        params.beta_d,
        params.beta_1,
        params.beta_2,
    )
}
