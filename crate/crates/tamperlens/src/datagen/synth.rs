//! Procedural pristine-frame synthesis.
//!
//! Training corpora and splice sources need photographic-ish content with
//! texture, gradients and distinct objects, but no real footage is available
//! in CI. These generators layer color gradients, sinusoidal texture, soft
//! blobs and grain into deterministic pseudo-scenes.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One random pseudo-scene as an `(H, W, 3)` RGB frame in `[0, 1]`.
pub fn synth_pristine_frame<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
) -> Array3<f64> {
    // Smooth two-corner color gradient.
    let top: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let bottom: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut frame = Array3::from_shape_fn((height, width, 3), |(r, c, ch)| {
        let v = r as f64 / height.max(1) as f64;
        let u = c as f64 / width.max(1) as f64;
        0.5 * (top[ch] * (1.0 - v) + bottom[ch] * v) + 0.5 * (top[ch] * (1.0 - u) + bottom[ch] * u)
    });

    // Two layers of oriented sinusoidal texture per channel.
    for _ in 0..2 {
        let fy = rng.gen_range(0.02..0.35);
        let fx = rng.gen_range(0.02..0.35);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.03..0.12);
        let weights: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for ((r, c, ch), v) in frame.indexed_iter_mut() {
            *v += amp * weights[ch] * (fy * r as f64 + fx * c as f64 + phase).sin();
        }
    }

    // A handful of soft elliptical blobs acting as scene objects.
    let blobs = rng.gen_range(3..7);
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let ry = rng.gen_range(0.08..0.30) * height as f64;
        let rx = rng.gen_range(0.08..0.30) * width as f64;
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let strength = rng.gen_range(0.3..0.8);
        for ((r, c, ch), v) in frame.indexed_iter_mut() {
            let dy = (r as f64 - cy) / ry;
            let dx = (c as f64 - cx) / rx;
            let d2 = dy * dy + dx * dx;
            if d2 < 1.0 {
                let w = strength * (1.0 - d2);
                *v = *v * (1.0 - w) + color[ch] * w;
            }
        }
    }

    // Fine grain so every scene carries high-frequency content.
    let grain = Normal::new(0.0, 0.01).expect("fixed std");
    frame.mapv_inplace(|v| (v + grain.sample(rng)).clamp(0.0, 1.0));
    frame
}

/// Rounds a frame onto the 8-bit lattice used by the image files on disk, so
/// in-memory values match what a save/load round trip produces.
pub fn quantize8(frame: &Array3<f64>) -> Array3<f64> {
    frame.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
