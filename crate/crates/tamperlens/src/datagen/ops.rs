//! In-place editing operations, splicing, and difference masks.
//!
//! Frames are `(H, W, 3)` RGB arrays with values in `[0, 1]`. In-place edits
//! transform a working copy of the whole frame (op by op, in the fixed order
//! brightness → contrast → saturation → hue → gaussian blur → motion blur →
//! box blur → noise), then composite the result back under the mask, so only
//! masked pixels ever change.
//!
//! Two strength profiles are supported: a perceptually visible one and a
//! low-strength, perceptually invisible one (which has no hue op). Each op
//! carries an application probability; a sampled in-place recipe always
//! applies at least one op.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ForgeryMask;

/// Block side used when deriving a mask from a frame difference.
pub const DIFF_BLOCK: usize = 16;
/// Default threshold on normalized block differences.
pub const DIFF_THRESHOLD: f64 = 0.1;

/// Manipulation strength profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisibilityProfile {
    Visible,
    Invisible,
}

/// How a fake frame is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManipulationKind {
    Splice,
    InPlace,
}

/// One editing operation with its drawn parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ManipOp {
    /// Multiplies all channels by `factor`.
    Brightness { factor: f64 },
    /// Blends each pixel toward the region's mean luminance:
    /// `out = factor·in + (1−factor)·mean`.
    Contrast { factor: f64 },
    /// Blends each pixel toward its own luminance gray:
    /// `out = gray + factor·(in − gray)`.
    Saturation { factor: f64 },
    /// Rotates hue by `shift` full turns in HSV space.
    Hue { shift: f64 },
    /// Convolves with a normalized Gaussian kernel.
    GaussianBlur { kernel: usize, sigma: f64 },
    /// Convolves with a rotated, direction-weighted line kernel.
    MotionBlur {
        kernel: usize,
        angle_deg: f64,
        direction: f64,
    },
    /// Convolves with a uniform kernel.
    BoxBlur { kernel: usize },
    /// Adds zero-mean Gaussian noise with the given standard deviation.
    GaussianNoise { std: f64 },
}

/// One slot of a recipe: the drawn op, its application probability, and
/// whether the application coin landed on "apply".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpDraw {
    #[serde(flatten)]
    pub op: ManipOp,
    pub probability: f64,
    pub applied: bool,
}

/// Full record of how a fake frame is made from its authentic source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationRecipe {
    pub kind: ManipulationKind,
    /// Strength profile for in-place edits; absent for splices.
    pub profile: Option<VisibilityProfile>,
    /// Ordered op draws for in-place edits; empty for splices.
    pub ops: Vec<OpDraw>,
}

impl ManipulationRecipe {
    pub fn splice() -> Self {
        ManipulationRecipe {
            kind: ManipulationKind::Splice,
            profile: None,
            ops: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ManipulationKind::Splice => {
                if !self.ops.is_empty() || self.profile.is_some() {
                    return Err(Error::invalid("splice recipes carry no ops or profile"));
                }
                Ok(())
            }
            ManipulationKind::InPlace => {
                let profile = self
                    .profile
                    .ok_or_else(|| Error::invalid("in-place recipes need a profile"))?;
                if !self.ops.iter().any(|o| o.applied) {
                    return Err(Error::invalid(
                        "in-place recipes must apply at least one op",
                    ));
                }
                for draw in &self.ops {
                    check_against_profile(profile, &draw.op)?;
                    if !(0.0..=1.0).contains(&draw.probability) {
                        return Err(Error::invalid("op probability must lie in [0, 1]"));
                    }
                }
                Ok(())
            }
        }
    }
}

struct OpSpec {
    probability: f64,
    kernel: usize,
    sigma: f64,
    noise_std: f64,
    factor_range: (f64, f64),
    angle_range: (f64, f64),
}

fn profile_spec(profile: VisibilityProfile) -> OpSpec {
    match profile {
        VisibilityProfile::Visible => OpSpec {
            probability: 1.0,
            kernel: 5,
            sigma: 2.0,
            noise_std: 0.05,
            factor_range: (0.0, 0.0), // per-op, see below
            angle_range: (-25.0, 25.0),
        },
        VisibilityProfile::Invisible => OpSpec {
            probability: 0.9,
            kernel: 3,
            sigma: 1.2,
            noise_std: 0.006,
            factor_range: (0.95, 1.05),
            angle_range: (-20.0, 20.0),
        },
    }
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&v)
}

/// Validates one op's parameters against the profile's allowed table.
fn check_against_profile(profile: VisibilityProfile, op: &ManipOp) -> Result<()> {
    let spec = profile_spec(profile);
    let visible = profile == VisibilityProfile::Visible;
    let ok = match *op {
        ManipOp::Brightness { factor } => {
            if visible {
                in_range(factor, 0.8, 1.6)
            } else {
                in_range(factor, 0.95, 1.05)
            }
        }
        ManipOp::Contrast { factor } => {
            if visible {
                in_range(factor, 0.7, 1.3)
            } else {
                in_range(factor, 0.95, 1.05)
            }
        }
        ManipOp::Saturation { factor } => {
            if visible {
                in_range(factor, 0.8, 1.1)
            } else {
                in_range(factor, 0.95, 1.05)
            }
        }
        ManipOp::Hue { shift } => {
            if visible {
                in_range(shift, -0.2, 0.2)
            } else {
                return Err(Error::invalid(
                    "hue is not part of the low-strength profile",
                ));
            }
        }
        ManipOp::GaussianBlur { kernel, sigma } => {
            kernel == spec.kernel && (sigma - spec.sigma).abs() < 1e-12
        }
        ManipOp::MotionBlur {
            kernel,
            angle_deg,
            direction,
        } => {
            kernel == spec.kernel
                && in_range(angle_deg, spec.angle_range.0, spec.angle_range.1)
                && in_range(direction, -1.0, 1.0)
        }
        ManipOp::BoxBlur { kernel } => kernel == spec.kernel,
        ManipOp::GaussianNoise { std } => (std - spec.noise_std).abs() < 1e-12,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{op:?} is outside the {profile:?} profile's parameter table"
        )))
    }
}

/// Draws an in-place recipe for the profile: parameters from the strength
/// table, each op applied with its table probability, redrawn until at least
/// one op applies.
pub fn sample_inplace_recipe<R: Rng + ?Sized>(
    profile: VisibilityProfile,
    rng: &mut R,
) -> Result<ManipulationRecipe> {
    let spec = profile_spec(profile);
    let visible = profile == VisibilityProfile::Visible;
    for _ in 0..100 {
        let mut ops = Vec::new();
        let color_p = spec.probability;
        let factor = |rng: &mut R, lo: f64, hi: f64| rng.gen_range(lo..=hi);
        let (blo, bhi) = if visible { (0.8, 1.6) } else { spec.factor_range };
        ops.push(OpDraw {
            op: ManipOp::Brightness {
                factor: factor(rng, blo, bhi),
            },
            probability: color_p,
            applied: rng.gen_bool(color_p),
        });
        let (clo, chi) = if visible { (0.7, 1.3) } else { spec.factor_range };
        ops.push(OpDraw {
            op: ManipOp::Contrast {
                factor: factor(rng, clo, chi),
            },
            probability: color_p,
            applied: rng.gen_bool(color_p),
        });
        let (slo, shi) = if visible { (0.8, 1.1) } else { spec.factor_range };
        ops.push(OpDraw {
            op: ManipOp::Saturation {
                factor: factor(rng, slo, shi),
            },
            probability: color_p,
            applied: rng.gen_bool(color_p),
        });
        if visible {
            ops.push(OpDraw {
                op: ManipOp::Hue {
                    shift: factor(rng, -0.2, 0.2),
                },
                probability: color_p,
                applied: rng.gen_bool(color_p),
            });
        }
        ops.push(OpDraw {
            op: ManipOp::GaussianBlur {
                kernel: spec.kernel,
                sigma: spec.sigma,
            },
            probability: 0.7,
            applied: rng.gen_bool(0.7),
        });
        ops.push(OpDraw {
            op: ManipOp::MotionBlur {
                kernel: spec.kernel,
                angle_deg: factor(rng, spec.angle_range.0, spec.angle_range.1),
                direction: factor(rng, -1.0, 1.0),
            },
            probability: 0.7,
            applied: rng.gen_bool(0.7),
        });
        ops.push(OpDraw {
            op: ManipOp::BoxBlur { kernel: spec.kernel },
            probability: 0.7,
            applied: rng.gen_bool(0.7),
        });
        ops.push(OpDraw {
            op: ManipOp::GaussianNoise {
                std: spec.noise_std,
            },
            probability: spec.probability,
            applied: rng.gen_bool(spec.probability),
        });
        let recipe = ManipulationRecipe {
            kind: ManipulationKind::InPlace,
            profile: Some(profile),
            ops,
        };
        if recipe.ops.iter().any(|o| o.applied) {
            recipe.validate()?;
            return Ok(recipe);
        }
    }
    Err(Error::Generation(
        "no op applied after 100 recipe draws".to_string(),
    ))
}

fn check_frame(frame: &Array3<f64>) -> Result<()> {
    if frame.dim().2 != 3 {
        return Err(Error::invalid("frames must have 3 channels"));
    }
    Ok(())
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp01(frame: &mut Array3<f64>) {
    frame.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Convolves each channel with `kernel`, replicating border pixels.
pub(crate) fn convolve_frame(frame: &Array3<f64>, kernel: &Array2<f64>) -> Array3<f64> {
    let (h, w, chans) = frame.dim();
    let (kh, kw) = kernel.dim();
    let (ch, cw) = (kh as i64 / 2, kw as i64 / 2);
    Array3::from_shape_fn((h, w, chans), |(r, c, ch_idx)| {
        let mut acc = 0.0;
        for kr in 0..kh {
            for kc in 0..kw {
                let sr = (r as i64 + kr as i64 - ch).clamp(0, h as i64 - 1) as usize;
                let sc = (c as i64 + kc as i64 - cw).clamp(0, w as i64 - 1) as usize;
                acc += frame[[sr, sc, ch_idx]] * kernel[[kr, kc]];
            }
        }
        acc
    })
}

pub(crate) fn gaussian_kernel(kernel: usize, sigma: f64) -> Array2<f64> {
    let c = (kernel as f64 - 1.0) / 2.0;
    let mut k = Array2::from_shape_fn((kernel, kernel), |(r, cc)| {
        let dy = r as f64 - c;
        let dx = cc as f64 - c;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

pub(crate) fn box_kernel(kernel: usize) -> Array2<f64> {
    Array2::from_elem((kernel, kernel), 1.0 / (kernel * kernel) as f64)
}

/// Catmull-Rom cubic weight (the classic a = −0.5 bicubic kernel).
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t < 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic sample of a small image at fractional coordinates, zero outside.
fn bicubic_sample(src: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = src.dim();
    let y0 = y.floor() as i64;
    let x0 = x.floor() as i64;
    let mut acc = 0.0;
    for dy in -1i64..=2 {
        for dx in -1i64..=2 {
            let sy = y0 + dy;
            let sx = x0 + dx;
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                continue;
            }
            let wy = cubic_weight(y - sy as f64);
            let wx = cubic_weight(x - sx as f64);
            acc += src[[sy as usize, sx as usize]] * wy * wx;
        }
    }
    acc
}

/// Direction-weighted line kernel rotated to `angle_deg` by bicubic
/// resampling, clipped to non-negative and normalized to sum 1.
pub(crate) fn motion_kernel(kernel: usize, angle_deg: f64, direction: f64) -> Array2<f64> {
    let c = (kernel as f64 - 1.0) / 2.0;
    let mut line = Array2::<f64>::zeros((kernel, kernel));
    for j in 0..kernel {
        let lin = if kernel == 1 {
            0.0
        } else {
            -1.0 + 2.0 * j as f64 / (kernel as f64 - 1.0)
        };
        line[[c as usize, j]] = 1.0 + direction * lin;
    }
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut rotated = Array2::from_shape_fn((kernel, kernel), |(r, cc)| {
        let dy = r as f64 - c;
        let dx = cc as f64 - c;
        // Inverse-rotate the target coordinate into the source kernel.
        let sy = -sin * dx + cos * dy + c;
        let sx = cos * dx + sin * dy + c;
        bicubic_sample(&line, sy, sx).max(0.0)
    });
    let sum = rotated.sum();
    rotated.mapv_inplace(|v| v / sum);
    rotated
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Applies one op to a whole frame. `region_mean` is the mean luminance of
/// the manipulated region, used as the contrast blend target.
fn apply_op<R: Rng + ?Sized>(
    frame: &Array3<f64>,
    op: &ManipOp,
    region_mean: f64,
    rng: &mut R,
) -> Array3<f64> {
    match *op {
        ManipOp::Brightness { factor } => frame.mapv(|v| v * factor),
        ManipOp::Contrast { factor } => {
            frame.mapv(|v| v * factor + (1.0 - factor) * region_mean)
        }
        ManipOp::Saturation { factor } => {
            let (h, w, _) = frame.dim();
            Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
                let gray = luminance(frame[[r, c, 0]], frame[[r, c, 1]], frame[[r, c, 2]]);
                gray + factor * (frame[[r, c, ch]] - gray)
            })
        }
        ManipOp::Hue { shift } => {
            let (h, w, _) = frame.dim();
            let mut out = Array3::zeros((h, w, 3));
            for r in 0..h {
                for c in 0..w {
                    let (hh, ss, vv) =
                        rgb_to_hsv(frame[[r, c, 0]], frame[[r, c, 1]], frame[[r, c, 2]]);
                    let (nr, ng, nb) = hsv_to_rgb(hh + shift, ss, vv);
                    out[[r, c, 0]] = nr;
                    out[[r, c, 1]] = ng;
                    out[[r, c, 2]] = nb;
                }
            }
            out
        }
        ManipOp::GaussianBlur { kernel, sigma } => convolve_frame(frame, &gaussian_kernel(kernel, sigma)),
        ManipOp::MotionBlur {
            kernel,
            angle_deg,
            direction,
        } => convolve_frame(frame, &motion_kernel(kernel, angle_deg, direction)),
        ManipOp::BoxBlur { kernel } => convolve_frame(frame, &box_kernel(kernel)),
        ManipOp::GaussianNoise { std } => {
            let normal = Normal::new(0.0, std).expect("validated std");
            frame.mapv(|v| v + normal.sample(rng))
        }
    }
}

/// Applies an in-place recipe to the masked region of a frame. Pixels with
/// mask 0 are returned bit-exactly unchanged; masked pixels go through every
/// applied op in order and are clamped to `[0, 1]`.
pub fn apply_inplace<R: Rng + ?Sized>(
    frame: &Array3<f64>,
    mask: &ForgeryMask,
    recipe: &ManipulationRecipe,
    rng: &mut R,
) -> Result<Array3<f64>> {
    check_frame(frame)?;
    if recipe.kind != ManipulationKind::InPlace {
        return Err(Error::invalid("apply_inplace requires an in-place recipe"));
    }
    recipe.validate()?;
    let (h, w, _) = frame.dim();
    if mask.height() != h || mask.width() != w {
        return Err(Error::invalid(format!(
            "mask {}×{} does not match frame {h}×{w}",
            mask.height(),
            mask.width()
        )));
    }

    // Contrast blends toward the manipulated region's mean luminance.
    let mut sum = 0.0;
    let mut count = 0u64;
    for r in 0..h {
        for c in 0..w {
            if mask.values()[[r, c]] == 1.0 {
                sum += luminance(frame[[r, c, 0]], frame[[r, c, 1]], frame[[r, c, 2]]);
                count += 1;
            }
        }
    }
    let region_mean = if count > 0 { sum / count as f64 } else { 0.5 };

    let mut work = frame.clone();
    for draw in recipe.ops.iter().filter(|d| d.applied) {
        work = apply_op(&work, &draw.op, region_mean, rng);
        clamp01(&mut work);
    }

    Ok(Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
        if mask.values()[[r, c]] == 1.0 {
            work[[r, c, ch]]
        } else {
            frame[[r, c, ch]]
        }
    }))
}

/// Pixel-select splice: `out = source·mask + dest·(1 − mask)`.
pub fn apply_splice(
    dest: &Array3<f64>,
    source: &Array3<f64>,
    mask: &ForgeryMask,
) -> Result<Array3<f64>> {
    check_frame(dest)?;
    check_frame(source)?;
    if dest.dim() != source.dim() {
        return Err(Error::invalid("splice frames must share dimensions"));
    }
    let (h, w, _) = dest.dim();
    if mask.height() != h || mask.width() != w {
        return Err(Error::invalid("splice mask must match frame dimensions"));
    }
    Ok(Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
        let m = mask.values()[[r, c]];
        source[[r, c, ch]] * m + dest[[r, c, ch]] * (1.0 - m)
    }))
}

/// Per-block mean absolute channel difference over a 16×16 partition,
/// min–max normalized to `[0, 1]`. Edge blocks may be partial.
pub fn diff_block_values(
    original: &Array3<f64>,
    manipulated: &Array3<f64>,
) -> Result<Array2<f64>> {
    check_frame(original)?;
    if original.dim() != manipulated.dim() {
        return Err(Error::invalid("difference frames must share dimensions"));
    }
    let (h, w, _) = original.dim();
    let rows = h.div_ceil(DIFF_BLOCK);
    let cols = w.div_ceil(DIFF_BLOCK);
    let mut blocks = Array2::<f64>::zeros((rows, cols));
    for br in 0..rows {
        for bc in 0..cols {
            let r1 = ((br + 1) * DIFF_BLOCK).min(h);
            let c1 = ((bc + 1) * DIFF_BLOCK).min(w);
            let mut acc = 0.0;
            let mut n = 0u64;
            for r in br * DIFF_BLOCK..r1 {
                for c in bc * DIFF_BLOCK..c1 {
                    for ch in 0..3 {
                        acc += (original[[r, c, ch]] - manipulated[[r, c, ch]]).abs();
                        n += 1;
                    }
                }
            }
            blocks[[br, bc]] = acc / n as f64;
        }
    }
    let min = blocks.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = blocks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        // Uniform difference: all tampered if nonzero, else untouched.
        let v = if max > 0.0 { 1.0 } else { 0.0 };
        blocks.fill(v);
    } else {
        blocks.mapv_inplace(|v| (v - min) / (max - min));
    }
    Ok(blocks)
}

/// Difference-derived tamper mask: normalized block differences thresholded
/// at `threshold` and projected onto every member pixel.
pub fn diff_mask(
    original: &Array3<f64>,
    manipulated: &Array3<f64>,
    threshold: f64,
) -> Result<ForgeryMask> {
    let blocks = diff_block_values(original, manipulated)?;
    let (h, w, _) = original.dim();
    let values = Array2::from_shape_fn((h, w), |(r, c)| {
        if blocks[[r / DIFF_BLOCK, c / DIFF_BLOCK]] >= threshold {
            1.0
        } else {
            0.0
        }
    });
    ForgeryMask::binary(values)
}
