use crate::error::{Error, Result};
use crate::shutter::ShutterFunction;
use crate::volume::{FrameSequence, Image};

#[inline]
pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Elementwise `sign(v) max(|v| - tau, 0)`.
pub fn prox_l1(v: &[f64], tau: f64) -> Vec<f64> {
    v.iter().map(|&x| soft_threshold(x, tau)).collect()
}

/// Proximal step of `1/2 beta_d (b - s^T xi)^2` at `v` with penalty `rho`
/// for one pixel whose temporal shutter column is `mask`.
///
/// `beta_d s s^T + rho I` is a rank-1 update of a scaled identity, so
/// `xi = r / rho - s beta_d (s^T r) / (rho (rho + beta_d |s|^2))` with
/// `r = rho v + beta_d s b`.
pub fn prox_data_pixel(v: &[f64], mask: &[bool], b: f64, beta_d: f64, rho: f64) -> Vec<f64> {
    assert_eq!(v.len(), mask.len());
    let ones = mask.iter().filter(|&&m| m).count() as f64;
    let r: Vec<f64> = v
        .iter()
        .zip(mask)
        .map(|(&vi, &m)| rho * vi + if m { beta_d * b } else { 0.0 })
        .collect();
    let s_r: f64 = r.iter().zip(mask).filter(|(_, &m)| m).map(|(ri, _)| ri).sum();
    let coef = beta_d * s_r / (rho * (rho + beta_d * ones));
    r.iter()
        .zip(mask)
        .map(|(&ri, &m)| ri / rho - if m { coef } else { 0.0 })
        .collect()
}

/// In-place [`prox_data_pixel`] over a volume, using each pixel's bump window.
pub(crate) fn prox_data_inplace(
    v: &mut [f64],
    coded: &[f64],
    shutter: &ShutterFunction,
    beta_d: f64,
    rho: f64,
) {
    let n = shutter.pixels();
    let l = shutter.bump as f64;
    let denom = rho * (rho + beta_d * l);
    for (p, &b) in coded.iter().enumerate() {
        let s0 = shutter.start(p);
        let window = (s0..s0 + shutter.bump).map(|t| t * n + p);
        let sum_v: f64 = window.clone().map(|i| v[i]).sum();
        let s_r = rho * sum_v + beta_d * l * b;
        // inside the window: (rho v + beta_d b) / rho - beta_d s_r / denom
        let shift = beta_d * b / rho - beta_d * s_r / denom;
        for i in window {
            v[i] += shift;
        }
    }
}

/// `argmin_xi 1/2 beta_d ||b - Phi xi||^2 + rho/2 ||xi - v||^2`.
pub fn prox_data(
    v: &FrameSequence,
    coded: &Image,
    shutter: &ShutterFunction,
    beta_d: f64,
    rho: f64,
) -> Result<FrameSequence> {
    if !(rho > 0.0) {
        return Err(Error::param("rho must be positive"));
    }
    if v.width != shutter.width || v.height != shutter.height || v.frames != shutter.frames {
        return Err(Error::param("volume does not match shutter"));
    }
    if coded.width != shutter.width || coded.height != shutter.height {
        return Err(Error::param("coded image does not match shutter"));
    }
    let mut out = v.clone();
    prox_data_inplace(&mut out.data, &coded.data, shutter, beta_d, rho);
    Ok(out)
}
