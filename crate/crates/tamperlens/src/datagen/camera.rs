//! Simulated camera-signature classes for forensic pretraining.
//!
//! Real camera-sourced footage is unavailable here, so each "camera model"
//! is a distinct processing signature: a demosaic-like 3×3 filter, a sensor
//! noise level, and an output quantization depth. Applying different
//! signatures to a shared pristine pool yields a labeled classification set
//! whose classes differ only in processing history — the same kind of trace
//! the forensic extractor must learn to pick up.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::ops;
use crate::datagen::synth::synth_pristine_frame;
use crate::error::{Error, Result};
use crate::geometry::{plan_grid, tile_frame_chw, FrameTensor, PadMode};

/// One simulated camera model's processing signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraClass {
    /// 3×3 demosaic-like filter applied to every channel.
    pub filter: [[f64; 3]; 3],
    /// Sensor noise standard deviation.
    pub noise_std: f64,
    /// Output quantization levels (256 = full 8-bit).
    pub levels: u32,
}

fn blend(identity_weight: f64, pattern: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    let psum: f64 = pattern.iter().flatten().sum();
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = pattern[r][c] / psum * (1.0 - identity_weight);
        }
    }
    out[1][1] += identity_weight;
    out
}

/// Builds `n` distinct signatures. The first four use quantization depths
/// 256, 224, 128 and 64; filters cycle through box, horizontal, vertical and
/// plus-shaped smoothing patterns with varying noise.
pub fn camera_classes(n: usize) -> Result<Vec<CameraClass>> {
    if n < 2 {
        return Err(Error::invalid("need at least two camera classes"));
    }
    let patterns: [[[f64; 3]; 3]; 4] = [
        [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]], // box
        [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]], // horizontal
        [[0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]], // vertical
        [[0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]], // plus
    ];
    let levels = [256u32, 224, 128, 64, 192, 96, 48, 32];
    Ok((0..n)
        .map(|i| CameraClass {
            filter: blend(0.65, patterns[i % patterns.len()]),
            noise_std: 0.002 + 0.003 * (i % 4) as f64,
            levels: levels[i % levels.len()],
        })
        .collect())
}

/// Runs a frame through one signature: filter, noise, quantize.
pub fn apply_camera_signature<R: Rng + ?Sized>(
    frame: &Array3<f64>,
    class: &CameraClass,
    rng: &mut R,
) -> Array3<f64> {
    let kernel = Array2::from_shape_fn((3, 3), |(r, c)| class.filter[r][c]);
    let mut out = ops::convolve_frame(frame, &kernel);
    let noise = Normal::new(0.0, class.noise_std).expect("fixed std");
    let q = (class.levels - 1) as f64;
    out.mapv_inplace(|v| {
        let noisy = (v + noise.sample(rng)).clamp(0.0, 1.0);
        (noisy * q).round() / q
    });
    out
}

/// A labeled block set for signature classification.
pub struct CameraBlockSet {
    /// `(3, block, block)` channel-first blocks.
    pub blocks: Vec<Array3<f64>>,
    /// Class index per block.
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Generates at least `per_class` labeled blocks for each of `num_classes`
/// signatures by tiling signature-processed copies of a shared pristine pool.
/// Blocks are interleaved class-by-class so any prefix stays balanced.
pub fn generate_camera_blocks(
    num_classes: usize,
    per_class: usize,
    block_size: usize,
    seed: u64,
) -> Result<CameraBlockSet> {
    if per_class == 0 {
        return Err(Error::invalid("need at least one block per class"));
    }
    let classes = camera_classes(num_classes)?;
    // Frames hold a 2×3 grid of blocks each.
    let (fh, fw) = (2 * block_size, 3 * block_size);
    let grid = plan_grid(fh, fw, block_size)?;
    let frames_needed = per_class.div_ceil(grid.num_blocks());

    let mut pool_rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Array3<f64>> = (0..frames_needed)
        .map(|_| synth_pristine_frame(fh, fw, &mut pool_rng))
        .collect();

    let mut per_class_blocks: Vec<Vec<Array3<f64>>> = Vec::with_capacity(num_classes);
    for (ci, class) in classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + ci as u64);
        let mut blocks = Vec::with_capacity(per_class);
        'outer: for frame in &pool {
            let shot = apply_camera_signature(frame, class, &mut rng);
            let tensor = FrameTensor::new(shot, format!("cam{ci}"), "pool")?;
            for block in tile_frame_chw(&tensor, &grid, PadMode::Replicate)? {
                blocks.push(block);
                if blocks.len() == per_class {
                    break 'outer;
                }
            }
        }
        per_class_blocks.push(blocks);
    }

    let mut blocks = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for i in 0..per_class {
        for (ci, class_blocks) in per_class_blocks.iter().enumerate() {
            blocks.push(class_blocks[i].clone());
            labels.push(ci);
        }
    }
    Ok(CameraBlockSet {
        blocks,
        labels,
        num_classes,
    })
}
