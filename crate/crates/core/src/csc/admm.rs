use log::{debug, warn};

use super::operator::{ConvOperator, MapBlocks};
use super::prox::{prox_data_inplace, soft_threshold};
use super::{
    check_problem, objective_from_parts, temporal_diff, temporal_diff_adjoint_add, CscParams,
    FeatureMaps, FilterBank, ObjectiveTerms, QuadSolver,
};
use crate::error::{Error, Result};
use crate::shutter::{apply_measurement_adjoint, CodedImage, ShutterFunction};
use crate::volume::{dot, norm_sq, FrameSequence, Image};

/// ADMM iterate for the three-way splitting `(D, I, grad_t)` with scaled duals.
pub struct AdmmState {
    /// Primal feature maps.
    pub u: FeatureMaps,
    /// Cached `D u`.
    pub synthesized: FrameSequence,
    pub w1: FrameSequence,
    pub w2: FeatureMaps,
    pub w3: Vec<f64>,
    pub lambda1: FrameSequence,
    pub lambda2: FeatureMaps,
    pub lambda3: Vec<f64>,
    pub iteration: usize,
    pub history: Vec<ObjectiveTerms>,
    /// Quadratic solves that stopped at `quad_max_iters` above tolerance.
    pub quad_warnings: usize,
    /// Relative residual of the last iterative quadratic solve.
    pub last_quad_residual: Option<f64>,
}

impl AdmmState {
    /// Consistent state at primal point `u`: `w_j = K_j u`, zero duals.
    pub fn at(u: FeatureMaps, op: &ConvOperator) -> Self {
        let synthesized = op.apply(&u);
        Self::with_synthesized(u, synthesized)
    }

    fn with_synthesized(u: FeatureMaps, synthesized: FrameSequence) -> Self {
        let w3 = temporal_diff(&u);
        let zeros_frames = FrameSequence::zeros(u.width, u.height, u.frames);
        let zeros_maps = FeatureMaps::zeros(u.filters, u.width, u.height, u.frames);
        AdmmState {
            lambda3: vec![0.0; w3.len()],
            w1: synthesized.clone(),
            w2: u.clone(),
            w3,
            lambda1: zeros_frames,
            lambda2: zeros_maps,
            u,
            synthesized,
            iteration: 0,
            history: Vec::new(),
            quad_warnings: 0,
            last_quad_residual: None,
        }
    }
}

/// Output of [`reconstruct_csc`].
#[derive(Debug, Clone)]
pub struct CscReconstruction {
    pub frames: FrameSequence,
    pub maps: FeatureMaps,
    /// Objective terms after each iteration's quadratic step.
    pub history: Vec<ObjectiveTerms>,
    pub iterations: usize,
    pub quad_warnings: usize,
    /// Low-pass image added back to every frame, if background removal ran.
    pub background: Option<Image>,
}

/// Solves `(D^T D + I + grad^T grad) u = D^T (w1 - l1) + (w2 - l2) + grad^T (w3 - l3)`
/// for the current state and returns the new maps, caching `D u` in the state.
pub fn solve_quadratic(
    state: &mut AdmmState,
    op: &ConvOperator,
    params: &CscParams,
) -> FeatureMaps {
    let mut a1 = state.w1.clone();
    for (a, l) in a1.data.iter_mut().zip(&state.lambda1.data) {
        *a -= l;
    }
    let mut rhs = state.w2.clone();
    for (r, l) in rhs.data.iter_mut().zip(&state.lambda2.data) {
        *r -= l;
    }
    let a3: Vec<f64> = state.w3.iter().zip(&state.lambda3).map(|(w, l)| w - l).collect();
    temporal_diff_adjoint_add(&a3, &mut rhs);
    drop(a3);

    let (u, du) = match params.quad_solver {
        QuadSolver::Direct => op.solve_direct(&a1, rhs),
        QuadSolver::ConjugateGradient => {
            let adj = op.adjoint(&a1);
            for (r, a) in rhs.data.iter_mut().zip(&adj.data) {
                *r += a;
            }
            drop(adj);
            let (u, residual, converged) =
                conjugate_gradient(op, &rhs, &state.u, params.quad_tol, params.quad_max_iters);
            state.last_quad_residual = Some(residual);
            if !converged {
                state.quad_warnings += 1;
                warn!(
                    "quadratic step stopped at {} iterations with relative residual {:.3e}",
                    params.quad_max_iters, residual
                );
            }
            let du = op.apply(&u);
            (u, du)
        }
    };
    state.synthesized = du;
    u
}

/// CG on a symmetric positive definite operator, warm-started at `x0`.
/// Returns the iterate, its relative residual and whether `tol` was met.
fn conjugate_gradient(
    op: &ConvOperator,
    rhs: &FeatureMaps,
    x0: &FeatureMaps,
    tol: f64,
    max_iters: usize,
) -> (FeatureMaps, f64, bool) {
    let rhs_norm = norm_sq(&rhs.data).sqrt();
    if rhs_norm == 0.0 {
        let zero = FeatureMaps::zeros(rhs.filters, rhs.width, rhs.height, rhs.frames);
        return (zero, 0.0, true);
    }
    let mut x = x0.clone();
    let ax = op.normal_apply(&x);
    let mut r: Vec<f64> = rhs.data.iter().zip(&ax.data).map(|(b, a)| b - a).collect();
    let mut p = FeatureMaps {
        data: r.clone(),
        ..x.clone()
    };
    let mut rr = norm_sq(&r);
    for _ in 0..max_iters {
        if rr.sqrt() <= tol * rhs_norm {
            break;
        }
        let ap = op.normal_apply(&p);
        let alpha = rr / dot(&p.data, &ap.data);
        for ((xi, pi), (ri, api)) in x.data.iter_mut().zip(&p.data).zip(r.iter_mut().zip(&ap.data)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        let rr_new = norm_sq(&r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.data.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    let rel = rr.sqrt() / rhs_norm;
    (x, rel, rel <= tol)
}

/// Gaussian low-pass of the per-pixel exposure mean `b / L`: the slowly
/// varying part of the scene that zero-mean filters cannot carry.
pub fn lowpass_background(coded: &Image, bump: usize, sigma: f64) -> Image {
    let mut mean = coded.clone();
    mean.data.iter_mut().for_each(|v| *v /= bump as f64);
    mean.gaussian_blur(sigma)
}

/// Recovers a frame sequence from one coded image by ADMM on the
/// temporally regularized convolutional coding objective.
pub fn reconstruct_csc(
    coded: &CodedImage,
    shutter: &ShutterFunction,
    bank: &FilterBank,
    params: &CscParams,
) -> Result<CscReconstruction> {
    params.validate()?;
    check_problem(bank, coded, shutter)?;
    if coded.bump != shutter.bump {
        return Err(Error::param(format!(
            "coded image was taken with bump {}, shutter has {}",
            coded.bump, shutter.bump
        )));
    }
    let (w, h, tt) = (shutter.width, shutter.height, shutter.frames);
    let n = w * h;
    let bump = shutter.bump as f64;

    let background = params
        .background_sigma
        .map(|sigma| lowpass_background(&coded.image, shutter.bump, sigma));
    let mut target = coded.image.clone();
    if let Some(bg) = &background {
        for (b, m) in target.data.iter_mut().zip(&bg.data) {
            *b -= bump * m;
        }
    }

    let op = ConvOperator::new(bank, w, h)?;
    let state = run_admm(&op, &target, shutter, params, None)?;

    let mut frames = state.synthesized;
    if let Some(bg) = &background {
        for t in 0..tt {
            for (v, m) in frames.data[t * n..(t + 1) * n].iter_mut().zip(&bg.data) {
                *v += m;
            }
        }
    }
    Ok(CscReconstruction {
        frames,
        maps: state.u,
        history: state.history,
        iterations: state.iteration,
        quad_warnings: state.quad_warnings,
        background,
    })
}

/// Runs the ADMM iterations against `target` (already background-corrected)
/// starting from `init`, or from the data-consistent warm start when `None`.
pub fn run_admm(
    op: &ConvOperator,
    target: &Image,
    shutter: &ShutterFunction,
    params: &CscParams,
    init: Option<FeatureMaps>,
) -> Result<AdmmState> {
    let (w, h, tt, kk) = (shutter.width, shutter.height, shutter.frames, op.filters);
    let bump = shutter.bump as f64;
    let mut state = match init {
        Some(u) => {
            if u.filters != kk || u.width != w || u.height != h || u.frames != tt {
                return Err(Error::param("initial maps do not match the problem"));
            }
            AdmmState::at(u, op)
        }
        None => {
            // maps whose synthesis best matches the zero-order volume
            let mut seed = apply_measurement_adjoint(target, shutter)?;
            seed.data.iter_mut().for_each(|v| *v /= bump);
            let (u0, du0) = match params.quad_solver {
                QuadSolver::Direct => op.solve_direct(&seed, FeatureMaps::zeros(kk, w, h, tt)),
                QuadSolver::ConjugateGradient => {
                    let rhs = op.adjoint(&seed);
                    let zero = FeatureMaps::zeros(kk, w, h, tt);
                    let (u, _, _) =
                        conjugate_gradient(op, &rhs, &zero, params.quad_tol, params.quad_max_iters);
                    let du = op.apply(&u);
                    (u, du)
                }
            };
            AdmmState::with_synthesized(u0, du0)
        }
    };

    match params.quad_solver {
        QuadSolver::Direct => direct_loop(&mut state, op, target, shutter, params),
        QuadSolver::ConjugateGradient => generic_loop(&mut state, op, target, shutter, params)?,
    }
    Ok(state)
}

fn is_converged(it: usize, change: f64, old_norm: f64, tol: f64) -> bool {
    // the first quadratic step reproduces a consistent start, so it says
    // nothing about convergence
    it > 0 && tol > 0.0 && old_norm > 0.0 && (change / old_norm).sqrt() < tol
}

/// `w1 <- prox_data(D u + l1)`, `l1 <- l1 + D u - w1`.
fn update_data_split(state: &mut AdmmState, target: &Image, shutter: &ShutterFunction, params: &CscParams) {
    for ((wv, lv), dv) in state
        .w1
        .data
        .iter_mut()
        .zip(&state.lambda1.data)
        .zip(&state.synthesized.data)
    {
        *wv = dv + lv;
    }
    prox_data_inplace(&mut state.w1.data, &target.data, shutter, params.beta_d, params.rho);
    for ((lv, dv), wv) in state
        .lambda1
        .data
        .iter_mut()
        .zip(&state.synthesized.data)
        .zip(&state.w1.data)
    {
        *lv += dv - wv;
    }
}

fn data_term(synthesized: &FrameSequence, target: &Image, shutter: &ShutterFunction, beta_d: f64) -> f64 {
    let n = shutter.pixels();
    let mut res = 0.0;
    for (p, &b) in target.data.iter().enumerate() {
        let s0 = shutter.start(p);
        let m: f64 = (s0..s0 + shutter.bump).map(|t| synthesized.data[t * n + p]).sum();
        res += (b - m) * (b - m);
    }
    0.5 * beta_d * res
}

/// Feeds the ADMM right side into the exact solver and applies the splitting
/// updates to each filter block of the new iterate as it comes out.
///
/// For the two l1 splits only the prox argument `p = K u + lambda` needs
/// storing, since `w = S(p)` and the updated dual is `p - S(p)`. Once a
/// block is accepted, the `w2` and `w3` buffers hold `p` and the dual
/// buffers are stale until [`unfold`] runs. The flags say which form each
/// side finds.
struct AdmmBlocks<'a> {
    state: &'a mut AdmmState,
    fill_folded: bool,
    accept_folded: bool,
    frames: usize,
    pixels: usize,
    t1: f64,
    t2: f64,
    change: f64,
    old_norm: f64,
    l1: f64,
    tv: f64,
}

impl<'a> AdmmBlocks<'a> {
    fn new(state: &'a mut AdmmState, fill_folded: bool, accept_folded: bool, t1: f64, t2: f64) -> Self {
        let (frames, pixels) = (state.u.frames, state.u.pixels());
        AdmmBlocks {
            state,
            fill_folded,
            accept_folded,
            frames,
            pixels,
            t1,
            t2,
            change: 0.0,
            old_norm: 0.0,
            l1: 0.0,
            tv: 0.0,
        }
    }
}

/// `w - lambda` from the folded argument: `S(p) - (p - S(p))`.
#[inline]
fn folded_difference(p: f64, tau: f64) -> f64 {
    2.0 * soft_threshold(p, tau) - p
}

/// The dual part of a folded argument, `p` clipped to `[-tau, tau]`.
#[inline]
fn clip(p: f64, tau: f64) -> f64 {
    p.clamp(-tau, tau)
}

impl MapBlocks for AdmmBlocks<'_> {
    fn fill(&mut self, k: usize, r: &mut [f64]) {
        let (tt, n) = (self.frames, self.pixels);
        let s = &*self.state;
        let range = k * tt * n..(k + 1) * tt * n;
        let (t1, t2) = (self.t1, self.t2);
        if self.fill_folded {
            for (rv, &p) in r.iter_mut().zip(&s.w2.data[range]) {
                *rv = folded_difference(p, t1);
            }
        } else {
            for ((rv, w), l) in r.iter_mut().zip(&s.w2.data[range.clone()]).zip(&s.lambda2.data[range]) {
                *rv = w - l;
            }
        }
        // grad^T (w3 - l3); difference t sits between frames t and t + 1
        let base = k * (tt - 1) * n;
        for t in 0..tt - 1 {
            let off = base + t * n;
            let (w3, l3) = (&s.w3[off..off + n], &s.lambda3[off..off + n]);
            let (before, after) = r.split_at_mut((t + 1) * n);
            let pairs = after[..n].iter_mut().zip(&mut before[t * n..]);
            if self.fill_folded {
                for ((c, p), &w) in pairs.zip(w3) {
                    let a = folded_difference(w, t2);
                    *c += a;
                    *p -= a;
                }
            } else {
                for (((c, p), w), l) in pairs.zip(w3).zip(l3) {
                    let a = w - l;
                    *c += a;
                    *p -= a;
                }
            }
        }
    }

    fn accept(&mut self, k: usize, x: &[f64]) {
        let (tt, n) = (self.frames, self.pixels);
        let s = &mut *self.state;
        let range = k * tt * n..(k + 1) * tt * n;
        let (t1, t2) = (self.t1, self.t2);
        let (mut change, mut old_norm, mut l1) = (0.0, 0.0, 0.0);
        for (o, &v) in s.u.data[range.clone()].iter_mut().zip(x) {
            change += (v - *o) * (v - *o);
            old_norm += *o * *o;
            l1 += v.abs();
            *o = v;
        }
        let w2 = &mut s.w2.data[range.clone()];
        if self.accept_folded {
            for (p, &uv) in w2.iter_mut().zip(x) {
                *p = uv + clip(*p, t1);
            }
        } else {
            for ((p, &l), &uv) in w2.iter_mut().zip(&s.lambda2.data[range]).zip(x) {
                *p = uv + l;
            }
        }
        let mut tv = 0.0;
        let base = k * (tt - 1) * n;
        for t in 0..tt - 1 {
            let off = base + t * n;
            let w3 = &mut s.w3[off..off + n];
            let grads = x[t * n..(t + 1) * n].iter().zip(&x[(t + 1) * n..]).map(|(a, b)| b - a);
            if self.accept_folded {
                for (p, g) in w3.iter_mut().zip(grads) {
                    tv += g.abs();
                    *p = g + clip(*p, t2);
                }
            } else {
                for ((p, &l), g) in w3.iter_mut().zip(&s.lambda3[off..off + n]).zip(grads) {
                    tv += g.abs();
                    *p = g + l;
                }
            }
        }
        self.change += change;
        self.old_norm += old_norm;
        self.l1 += l1;
        self.tv += tv;
    }
}

/// Splits folded arguments back into `w = S(p)` and `lambda = p - S(p)`.
fn unfold(w: &mut [f64], lambda: &mut [f64], tau: f64) {
    for (wv, lv) in w.iter_mut().zip(lambda) {
        let p = *wv;
        *wv = soft_threshold(p, tau);
        *lv = p - *wv;
    }
}

/// The exact-solve iteration with every buffer allocated once. Each
/// filter block of the right side for the next solve is built as soon as the
/// block of the current iterate is updated.
fn direct_loop(
    state: &mut AdmmState,
    op: &ConvOperator,
    target: &Image,
    shutter: &ShutterFunction,
    params: &CscParams,
) {
    let (tt, n) = (state.u.frames, state.u.pixels());
    let (t1, t2) = (params.beta_1 / params.rho, params.beta_2 / params.rho);
    let mut ws = op.workspace(tt);
    let mut data = vec![0.0; tt * n];
    let mut synthesized = vec![0.0; tt * n];
    op.load(&mut ws, &mut AdmmBlocks::new(state, false, false, t1, t2));
    for it in 0..params.outer_iters {
        for ((d, w), l) in data.iter_mut().zip(&state.w1.data).zip(&state.lambda1.data) {
            *d = w - l;
        }
        let mut b = AdmmBlocks::new(state, true, it > 0, t1, t2);
        let reload = it + 1 < params.outer_iters;
        op.solve_loaded(&mut ws, &data, &mut b, &mut synthesized, reload);
        let AdmmBlocks {
            change,
            old_norm,
            l1,
            tv,
            ..
        } = b;
        state.synthesized.data.copy_from_slice(&synthesized);
        state.iteration = it + 1;

        let data_term = data_term(&state.synthesized, target, shutter, params.beta_d);
        let (sparsity, temporal) = (params.beta_1 * l1, params.beta_2 * tv);
        let terms = ObjectiveTerms {
            data: data_term,
            sparsity,
            temporal,
            total: data_term + sparsity + temporal,
        };
        log_terms(it, &terms);
        state.history.push(terms);
        update_data_split(state, target, shutter, params);

        if is_converged(it, change, old_norm, params.stop_tol) {
            debug!("relative change below {:e} after {} iterations", params.stop_tol, it + 1);
            break;
        }
    }
    if state.iteration > 0 {
        unfold(&mut state.w2.data, &mut state.lambda2.data, t1);
        unfold(&mut state.w3, &mut state.lambda3, t2);
    }
}

fn log_terms(it: usize, terms: &ObjectiveTerms) {
    debug!(
        "iter {:3}: total {:.6e} (data {:.4e}, l1 {:.4e}, temporal {:.4e})",
        it + 1,
        terms.total,
        terms.data,
        terms.sparsity,
        terms.temporal
    );
}

fn generic_loop(
    state: &mut AdmmState,
    op: &ConvOperator,
    target: &Image,
    shutter: &ShutterFunction,
    params: &CscParams,
) -> Result<()> {
    let rho = params.rho;
    let t1 = params.beta_1 / rho;
    let t2 = params.beta_2 / rho;
    for it in 0..params.outer_iters {
        let u_new = solve_quadratic(state, op, params);
        let old_norm = norm_sq(&state.u.data);
        let change: f64 = state
            .u
            .data
            .iter()
            .zip(&u_new.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        state.u = u_new;
        state.iteration = it + 1;

        let terms = objective_from_parts(
            &state.synthesized,
            &state.u,
            &target.data,
            shutter,
            params.beta_d,
            params.beta_1,
            params.beta_2,
        )?;
        log_terms(it, &terms);
        state.history.push(terms);

        update_data_split(state, target, shutter, params);

        for ((wv, lv), uv) in state
            .w2
            .data
            .iter_mut()
            .zip(state.lambda2.data.iter_mut())
            .zip(&state.u.data)
        {
            *wv = soft_threshold(uv + *lv, t1);
            *lv += uv - *wv;
        }

        let grad = temporal_diff(&state.u);
        for ((wv, lv), gv) in state.w3.iter_mut().zip(state.lambda3.iter_mut()).zip(&grad) {
            *wv = soft_threshold(gv + *lv, t2);
            *lv += gv - *wv;
        }

        if is_converged(it, change, old_norm, params.stop_tol) {
            debug!("relative change below {:e} after {} iterations", params.stop_tol, it + 1);
            break;
        }
    }
    Ok(())
}
