//! Frame/mask image files and video encoding.
//!
//! Frames are stored as 8-bit RGB PNGs and masks as 8-bit single-channel
//! PNGs (0/255). Video items can additionally be passed through an external
//! H.264 encoder (CRF 23, 30 FPS by default) and decoded back, so training
//! sees compression artifacts; a lossless mode skips the codec entirely for
//! byte-reproducible, dependency-free runs.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ForgeryMask;

/// How generated video frames are materialized on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EncodeSettings {
    /// PNG frames only; bit-exact round trip.
    Lossless,
    /// External H.264 encode/decode round trip.
    H264 { crf: u8, fps: u32 },
}

impl EncodeSettings {
    pub fn h264_default() -> Self {
        EncodeSettings::H264 { crf: 23, fps: 30 }
    }

    /// Stable settings string recorded in the manifest.
    pub fn settings_string(&self) -> String {
        match self {
            EncodeSettings::Lossless => "lossless".to_string(),
            EncodeSettings::H264 { crf, fps } => format!("crf={crf},fps={fps}"),
        }
    }
}

fn io_at(path: &Path, source: std::io::Error) -> Error {
    Error::io(path, source)
}

/// Writes a `[0,1]` RGB frame as an 8-bit PNG.
pub fn save_frame_rgb(path: impl AsRef<Path>, frame: &Array3<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::invalid("frames must have 3 channels"));
    }
    let mut bytes = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for cc in 0..w {
            for ch in 0..3 {
                bytes.push((frame[[r, cc, ch]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::save_buffer(
        path,
        &bytes,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Generation(format!("writing {}: {e}", path.display())))
}

/// Distinguishes unreadable files (an IO error callers may choose to skip)
/// from undecodable content.
fn read_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Generation(format!("decoding {}: {other}", path.display())),
    }
}

/// Reads an RGB PNG back into a `[0,1]` frame.
pub fn load_frame_rgb(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| read_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(r, c, ch)| img.get_pixel(c as u32, r as u32).0[ch] as f64 / 255.0,
    ))
}

/// Writes a binary mask as an 8-bit single-channel PNG (0/255).
pub fn save_mask_png(path: impl AsRef<Path>, mask: &ForgeryMask) -> Result<()> {
    let path = path.as_ref();
    if !mask.is_binarized() {
        return Err(Error::invalid("only binary masks are written to disk"));
    }
    let bytes: Vec<u8> = mask
        .values()
        .iter()
        .map(|&v| if v == 1.0 { 255u8 } else { 0u8 })
        .collect();
    image::save_buffer(
        path,
        &bytes,
        mask.width() as u32,
        mask.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Generation(format!("writing {}: {e}", path.display())))
}

/// Reads a mask PNG back (any value ≥ 128 counts as tampered).
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<ForgeryMask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| read_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let values = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        if img.get_pixel(c as u32, r as u32).0[0] >= 128 {
            1.0
        } else {
            0.0
        }
    });
    ForgeryMask::binary(values)
}

/// Peak signal-to-noise ratio between two frames, in dB.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let mse: f64 =
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// True when the external video encoder responds to `-version`.
pub fn encoder_available() -> bool {
    Command::new("ffmpeg")
        .arg("-version")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Result of materializing one video item.
pub struct EncodedVideo {
    /// Per-frame PNG paths (decoded-back frames for the codec path).
    pub frame_paths: Vec<PathBuf>,
    /// The H.264 container, when one was produced.
    pub container: Option<PathBuf>,
    /// Frames as training will see them (identical to the input for
    /// lossless, compression-distorted for the codec path).
    pub decoded: Vec<Array3<f64>>,
}

fn run_encoder(args: &[String]) -> Result<()> {
    let output = Command::new("ffmpeg")
        .args(args)
        .output()
        .map_err(|e| Error::Environment(format!("video encoder unavailable: {e}")))?;
    if !output.status.success() {
        return Err(Error::Environment(format!(
            "encoder exited with {}: ffmpeg {} | stderr: {}",
            output.status,
            args.join(" "),
            String::from_utf8_lossy(&output.stderr)
                .lines()
                .rev()
                .take(4)
                .collect::<Vec<_>>()
                .join(" / ")
        )));
    }
    Ok(())
}

/// Writes `frames` under `dir` with filenames `{stem}_f{idx:03}.png`.
///
/// In lossless mode that is all; in H.264 mode the PNGs are encoded into
/// `{stem}.mp4` and decoded back over the same PNG files, so the stored
/// frames always match `decoded`.
pub fn encode_video(
    frames: &[Array3<f64>],
    settings: EncodeSettings,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<EncodedVideo> {
    let dir = dir.as_ref();
    if frames.is_empty() {
        return Err(Error::invalid("cannot encode an empty frame list"));
    }
    std::fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    let frame_path = |idx: usize| dir.join(format!("{stem}_f{idx:03}.png"));
    for (idx, frame) in frames.iter().enumerate() {
        save_frame_rgb(frame_path(idx), frame)?;
    }
    match settings {
        EncodeSettings::Lossless => {
            let paths: Vec<PathBuf> = (0..frames.len()).map(frame_path).collect();
            let decoded = paths
                .iter()
                .map(load_frame_rgb)
                .collect::<Result<Vec<_>>>()?;
            Ok(EncodedVideo {
                frame_paths: paths,
                container: None,
                decoded,
            })
        }
        EncodeSettings::H264 { crf, fps } => {
            let container = dir.join(format!("{stem}.mp4"));
            let pattern = dir.join(format!("{stem}_f%03d.png"));
            let encode_args: Vec<String> = [
                "-y",
                "-loglevel",
                "error",
                "-framerate",
                &fps.to_string(),
                "-start_number",
                "0",
                "-i",
                &pattern.to_string_lossy(),
                "-c:v",
                "libx264",
                "-crf",
                &crf.to_string(),
                "-pix_fmt",
                "yuv420p",
                &container.to_string_lossy(),
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            run_encoder(&encode_args)?;
            let decode_args: Vec<String> = [
                "-y",
                "-loglevel",
                "error",
                "-i",
                &container.to_string_lossy(),
                "-start_number",
                "0",
                &pattern.to_string_lossy(),
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            run_encoder(&decode_args)?;
            let paths: Vec<PathBuf> = (0..frames.len()).map(frame_path).collect();
            let decoded = paths
                .iter()
                .map(load_frame_rgb)
                .collect::<Result<Vec<_>>>()?;
            Ok(EncodedVideo {
                frame_paths: paths,
                container: Some(container),
                decoded,
            })
        }
    }
}
