//! Procedural test content: short motion videos with known ground truth and
//! dead-leaves images with natural-image-like statistics.
//!
//! Everything is rendered with 4x4 supersampling so edges are anti-aliased.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{FrameSequence, Image};

const SUPERSAMPLE: usize = 4;

/// The motion videos used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionVideo {
    /// Textured square drifting diagonally over a shaded background.
    MovingSquare,
    /// Soft-edged stripes and a ramp translating horizontally.
    TranslatingGradient,
    /// Bright bar rotating about the frame center.
    RotatingBar,
}

impl MotionVideo {
    pub const ALL: [MotionVideo; 3] = [
        MotionVideo::MovingSquare,
        MotionVideo::TranslatingGradient,
        MotionVideo::RotatingBar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionVideo::MovingSquare => "moving_square",
            MotionVideo::TranslatingGradient => "translating_gradient",
            MotionVideo::RotatingBar => "rotating_bar",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        MotionVideo::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Renders `frames` frames of `size x size` pixels.
    pub fn render(self, size: usize, frames: usize) -> FrameSequence {
        let s = size as f64;
        let mut out = FrameSequence::zeros(size, size, frames);
        for t in 0..frames {
            let tf = t as f64;
            let img = render_supersampled(size, size, |x, y| match self {
                MotionVideo::MovingSquare => {
                    let bg = 0.25 + 0.2 * (x / s) + 0.1 * (2.0 * PI * y / s).sin();
                    let side = 0.375 * s;
                    let x0 = 0.15 * s + tf * s / 64.0;
                    let y0 = 0.2 * s + tf * s / 96.0;
                    if x >= x0 && x < x0 + side && y >= y0 && y < y0 + side {
                        let (u, v) = (x - x0, y - y0);
                        let checker = ((u / (side / 4.0)).floor() + (v / (side / 4.0)).floor()) as i64 % 2;
                        0.55 + 0.3 * checker as f64 + 0.08 * (2.0 * PI * u / (side / 2.0)).cos()
                    } else {
                        bg
                    }
                }
                MotionVideo::TranslatingGradient => {
                    let xs = x - tf * s / 64.0;
                    let ramp = 0.2 + 0.35 * (y / s);
                    let period = s / 4.0;
                    let phase = (xs / period).rem_euclid(1.0);
                    let stripe = smoothstep(0.3, 0.36, phase) - smoothstep(0.64, 0.7, phase);
                    ramp + 0.4 * stripe
                }
                MotionVideo::RotatingBar => {
                    let (cx, cy) = (s / 2.0, s / 2.0);
                    let angle = tf * PI / 60.0;
                    let (dx, dy) = (x - cx, y - cy);
                    let along = dx * angle.cos() + dy * angle.sin();
                    let across = -dx * angle.sin() + dy * angle.cos();
                    let r2 = (dx * dx + dy * dy) / (s * s);
                    let bg = 0.2 + 0.25 * (1.0 - 2.0 * r2).max(0.0);
                    if along.abs() < 0.4 * s && across.abs() < 0.06 * s {
                        0.85 - 0.15 * (along / (0.4 * s)).abs()
                    } else {
                        bg
                    }
                }
            });
            out.frame_mut(t).copy_from_slice(&img.data);
        }
        out
    }
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render_supersampled(w: usize, h: usize, f: impl Fn(f64, f64) -> f64) -> Image {
    let mut img = Image::zeros(w, h);
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    acc += f(
                        x as f64 + (sx as f64 + 0.5) * step,
                        y as f64 + (sy as f64 + 0.5) * step,
                    );
                }
            }
            img.set(x, y, (acc * norm).clamp(0.0, 1.0));
        }
    }
    img
}

/// Dead-leaves image: occluding discs with power-law radii and random gray
/// levels, plus a faint shading gradient.
pub fn dead_leaves(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (r_min, r_max) = (s / 48.0, s / 4.0);
    let mut discs: Vec<(f64, f64, f64, f64)> = Vec::new();
    // painter's order: later discs sit on top
    for _ in 0..(size * size / 24).max(40) {
        let u: f64 = rng.random();
        // density ~ 1/r^3 between r_min and r_max
        let inv = 1.0 / (r_min * r_min) - u * (1.0 / (r_min * r_min) - 1.0 / (r_max * r_max));
        let r = 1.0 / inv.sqrt();
        discs.push((rng.random::<f64>() * s, rng.random::<f64>() * s, r, rng.random::<f64>()));
    }
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    render_supersampled(size, size, |x, y| {
        let base = discs
            .iter()
            .rev()
            .find(|(cx, cy, r, _)| (x - cx).powi(2) + (y - cy).powi(2) < r * r)
            .map(|d| d.3)
            .unwrap_or(0.5);
        0.1 + 0.8 * base + gx * (x / s - 0.5) + gy * (y / s - 0.5)
    })
}

/// A window panning across a larger dead-leaves scene at a random constant
/// velocity of up to 1.5 px per frame, sampled bilinearly. Training material
/// that shares no content with [`MotionVideo`].
pub fn panning_leaves(size: usize, frames: usize, seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let span = (1.5 * frames as f64).ceil() as usize + 2;
    let canvas = size + 2 * span;
    let scene = dead_leaves(canvas, seed);
    let (vx, vy): (f64, f64) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let mut out = FrameSequence::zeros(size, size, frames);
    for t in 0..frames {
        let (ox, oy) = (span as f64 + vx * t as f64, span as f64 + vy * t as f64);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + ox, y as f64 + oy);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                let v = (1.0 - ay) * ((1.0 - ax) * scene.get(x0, y0) + ax * scene.get(x0 + 1, y0))
                    + ay * ((1.0 - ax) * scene.get(x0, y0 + 1) + ax * scene.get(x0 + 1, y0 + 1));
                out.set(x, y, t, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn videos_are_in_range_and_move() {
        for v in MotionVideo::ALL {
            let seq = v.render(64, 20);
            assert_eq!((seq.width, seq.height, seq.frames), (64, 64, 20));
            assert!(seq.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let diff: f64 = seq
                .frame(0)
                .iter()
                .zip(seq.frame(19))
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 10.0, "{} barely moves", v.name());
            assert_eq!(MotionVideo::from_name(v.name()), Some(v));
        }
    }

    #[test]
    fn dead_leaves_deterministic() {
        let a = dead_leaves(32, 5);
        assert_eq!(a, dead_leaves(32, 5));
        assert_ne!(a, dead_leaves(32, 6));
        assert!(a.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn panning_leaves_translate() {
        let v = panning_leaves(24, 6, 3);
        assert_eq!((v.width, v.height, v.frames), (24, 24, 6));
        assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(v, panning_leaves(24, 6, 3));
        assert_ne!(v.frame(0), v.frame(5));
    }
}
