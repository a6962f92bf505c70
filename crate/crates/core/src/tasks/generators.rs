//! Procedural image generators.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Adds a Gaussian spot centred at `(cy, cx)` (pixel units) to a plane.
fn splat(plane: &mut [f32], h: usize, w: usize, cy: f32, cx: f32, radius: f32, amp: f32) {
    let inv = 1.0 / (2.0 * radius * radius);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            plane[y * w + x] += amp * (-d2 * inv).exp();
        }
    }
}

fn add_noise<R: Rng + ?Sized>(img: &mut [f32], sigma: f32, rng: &mut R) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        img.iter_mut().for_each(|v| *v += n.sample(rng));
    }
}

/// Per-channel gains so channels are not exact copies.
fn channel_gain(c: usize) -> f32 {
    1.0 - 0.2 * c as f32
}

pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn broadcast(&self, plane: &[f32], out: &mut [f32]) {
        for c in 0..self.channels {
            let g = channel_gain(c);
            out[c * self.plane()..(c + 1) * self.plane()].iter_mut().zip(plane).for_each(|(o, p)| *o = g * p);
        }
    }
}

/// One blob at a class-specific location with jittered position.
pub(crate) fn blob<R: Rng + ?Sized>(g: &Geometry, class: usize, classes: usize, spread: f32, jitter: f32, noise: f32, rng: &mut R, out: &mut [f32]) {
    let side = g.height.min(g.width) as f32;
    let angle = std::f32::consts::TAU * class as f32 / classes as f32 + 0.3;
    let (cy, cx) = ((g.height as f32 - 1.0) / 2.0, (g.width as f32 - 1.0) / 2.0);
    let r = spread * side;
    let jy: f32 = rng.sample(StandardNormal);
    let jx: f32 = rng.sample(StandardNormal);
    let mut plane = vec![0.0; g.plane()];
    splat(&mut plane, g.height, g.width, cy + r * angle.sin() + jitter * jy, cx + r * angle.cos() + jitter * jx, 0.12 * side, 1.0);
    g.broadcast(&plane, out);
    add_noise(out, noise, rng);
}

/// A point on one arm of a `classes`-armed spiral.
pub(crate) fn spiral<R: Rng + ?Sized>(g: &Geometry, class: usize, classes: usize, turns: f32, jitter: f32, noise: f32, rng: &mut R, out: &mut [f32]) {
    let side = g.height.min(g.width) as f32;
    let t: f32 = rng.random_range(0.2..1.0);
    let angle = std::f32::consts::TAU * (class as f32 / classes as f32 + turns * t);
    let radius = 0.42 * side * t;
    let (cy, cx) = ((g.height as f32 - 1.0) / 2.0, (g.width as f32 - 1.0) / 2.0);
    let jy: f32 = rng.sample(StandardNormal);
    let jx: f32 = rng.sample(StandardNormal);
    let mut plane = vec![0.0; g.plane()];
    splat(&mut plane, g.height, g.width, cy + radius * angle.sin() + jitter * jy, cx + radius * angle.cos() + jitter * jx, 0.08 * side, 1.0);
    g.broadcast(&plane, out);
    add_noise(out, noise, rng);
}

/// Number of distinct texture classes.
pub const TEXTURE_CLASSES: usize = 6;

/// An oriented grating. Classes pair three orientations with two spatial
/// frequencies; phase, amplitude and small angle/frequency jitter are
/// random.
pub(crate) fn texture<R: Rng + ?Sized>(g: &Geometry, class: usize, noise: f32, rng: &mut R, out: &mut [f32]) {
    let orientation = (class % 3) as f32 * std::f32::consts::PI / 3.0 + rng.random_range(-0.12..0.12);
    let cycles = if class / 3 == 0 { 1.5 } else { 3.5 } * rng.random_range(0.9..1.1);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let amp = rng.random_range(0.25..0.4);
    let (s, c) = orientation.sin_cos();
    let side = g.height.min(g.width) as f32;
    let mut plane = vec![0.0; g.plane()];
    for y in 0..g.height {
        for x in 0..g.width {
            let u = (x as f32 * c + y as f32 * s) / side;
            plane[y * g.width + x] = 0.5 + amp * (std::f32::consts::TAU * cycles * u + phase).sin();
        }
    }
    g.broadcast(&plane, out);
    add_noise(out, noise, rng);
}

/// Fixed linear embedder: message bits to an image-shaped residual.
pub(crate) struct Embedder {
    bits: usize,
    /// `[pixels][bits]`, row-major.
    weights: Vec<f32>,
    strength: f32,
}

impl Embedder {
    pub fn new<R: Rng + ?Sized>(g: &Geometry, bits: usize, strength: f32, rng: &mut R) -> Self {
        let scale = 1.0 / (bits as f32).sqrt();
        let weights = (0..g.len() * bits).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect();
        Self { bits, weights, strength }
    }

    /// Adds `strength · tanh(W · (2m − 1))` to `img`.
    pub fn embed(&self, message: &[f32], img: &mut [f32]) {
        for (p, v) in img.iter_mut().enumerate() {
            let row = &self.weights[p * self.bits..(p + 1) * self.bits];
            let s: f32 = row.iter().zip(message).map(|(w, m)| w * (2.0 * m - 1.0)).sum();
            *v += self.strength * s.tanh();
        }
    }
}
