//! Frame padding, tiling into fixed-size analysis blocks, and soft
//! block-level labels derived from pixel masks.
//!
//! Frames of arbitrary size are padded on the bottom/right edges to the next
//! multiple of the block size, then traversed in row-major order. Padded
//! pixels replicate the frame edge by default and count as unmanipulated
//! when labels are computed.

use ndarray::{Array2, Array3, ArrayView3, s};

use crate::error::{Error, Result};

/// Default analysis block edge length in pixels.
pub const DEFAULT_BLOCK_SIZE: usize = 128;

/// One decoded video frame: `H x W x 3` values in `[0, 1]` plus source metadata.
#[derive(Debug, Clone)]
pub struct FrameTensor {
    pub pixels: Array3<f64>,
    pub frame_id: String,
    pub source_id: String,
}

impl FrameTensor {
    /// Wraps pixel data, validating the value range and non-empty dimensions.
    pub fn new(pixels: Array3<f64>, frame_id: impl Into<String>, source_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("frame must be at least 1x1, got {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::invalid(format!("frame must have 3 channels, got {c}")));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("frame values must lie within [0, 1]"));
        }
        Ok(FrameTensor {
            pixels,
            frame_id: frame_id.into(),
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// How padded pixels are filled during tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Replicate the nearest edge pixel.
    #[default]
    Replicate,
    /// Fill with zeros.
    Zero,
}

/// Deterministic tiling of a padded frame into non-overlapping blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl BlockGrid {
    /// Total number of blocks `M * N`.
    pub fn num_blocks(&self) -> usize {
        self.rows * self.cols
    }

    /// Padded frame height `M * block_size`.
    pub fn padded_height(&self) -> usize {
        self.rows * self.block_size
    }

    /// Padded frame width `N * block_size`.
    pub fn padded_width(&self) -> usize {
        self.cols * self.block_size
    }

    /// Original (pre-padding) frame height.
    pub fn frame_height(&self) -> usize {
        self.padded_height() - self.pad_bottom
    }

    /// Original (pre-padding) frame width.
    pub fn frame_width(&self) -> usize {
        self.padded_width() - self.pad_right
    }

    /// Row-major block index for `(row, col)`.
    pub fn index_of(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    /// Inverse of [`index_of`](Self::index_of).
    pub fn position_of(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.num_blocks());
        (index / self.cols, index % self.cols)
    }
}

/// Plans the block grid for a frame of the given dimensions.
///
/// `M = ceil(height / block_size)`, `N = ceil(width / block_size)`; the
/// remainder is padded on the bottom/right.
pub fn plan_grid(height: usize, width: usize, block_size: usize) -> Result<BlockGrid> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("frame dimensions must be positive, got {height}x{width}")));
    }
    if block_size < 8 {
        return Err(Error::invalid(format!("block size must be at least 8, got {block_size}")));
    }
    let rows = height.div_ceil(block_size);
    let cols = width.div_ceil(block_size);
    Ok(BlockGrid {
        block_size,
        rows,
        cols,
        pad_bottom: rows * block_size - height,
        pad_right: cols * block_size - width,
    })
}

fn check_grid_matches(grid: &BlockGrid, height: usize, width: usize) -> Result<()> {
    if grid.frame_height() != height || grid.frame_width() != width {
        return Err(Error::invalid(format!(
            "grid planned for {}x{} does not match frame {}x{}",
            grid.frame_height(),
            grid.frame_width(),
            height,
            width
        )));
    }
    Ok(())
}

/// Pads a frame to the grid's dimensions using the given fill mode.
pub fn pad_frame(frame: &FrameTensor, grid: &BlockGrid, mode: PadMode) -> Result<Array3<f64>> {
    check_grid_matches(grid, frame.height(), frame.width())?;
    let (h, w, _) = frame.pixels.dim();
    let (ph, pw) = (grid.padded_height(), grid.padded_width());
    let mut padded = Array3::<f64>::zeros((ph, pw, 3));
    padded.slice_mut(s![..h, ..w, ..]).assign(&frame.pixels);
    if mode == PadMode::Replicate {
        for i in h..ph {
            let row = frame.pixels.slice(s![h - 1, .., ..]).to_owned();
            padded.slice_mut(s![i, ..w, ..]).assign(&row);
        }
        for j in w..pw {
            let col = padded.slice(s![.., w - 1, ..]).to_owned();
            padded.slice_mut(s![.., j, ..]).assign(&col);
        }
    }
    Ok(padded)
}

/// Splits a frame into `M * N` blocks of `block_size^2 x 3` pixels in
/// row-major order, filling padded pixels per `mode`.
pub fn tile_frame(frame: &FrameTensor, grid: &BlockGrid, mode: PadMode) -> Result<Vec<Array3<f64>>> {
    let padded = pad_frame(frame, grid, mode)?;
    let b = grid.block_size;
    let mut blocks = Vec::with_capacity(grid.num_blocks());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let block = padded
                .slice(s![r * b..(r + 1) * b, c * b..(c + 1) * b, ..])
                .to_owned();
            blocks.push(block);
        }
    }
    Ok(blocks)
}

/// Reassembles blocks into a frame of `out_h x out_w`, cropping the padding.
///
/// Inverse of [`tile_frame`] on the original pixel region.
pub fn untile_frame(blocks: &[ArrayView3<f64>], grid: &BlockGrid, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    if blocks.len() != grid.num_blocks() {
        return Err(Error::invalid(format!(
            "expected {} blocks, got {}",
            grid.num_blocks(),
            blocks.len()
        )));
    }
    check_grid_matches(grid, out_h, out_w)?;
    let b = grid.block_size;
    let mut frame = Array3::<f64>::zeros((out_h, out_w, 3));
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let block = &blocks[grid.index_of(r, c)];
            if block.dim() != (b, b, 3) {
                return Err(Error::invalid(format!("block {} has shape {:?}, expected ({b}, {b}, 3)", grid.index_of(r, c), block.dim())));
            }
            let h_take = b.min(out_h.saturating_sub(r * b));
            let w_take = b.min(out_w.saturating_sub(c * b));
            if h_take == 0 || w_take == 0 {
                continue;
            }
            frame
                .slice_mut(s![r * b..r * b + h_take, c * b..c * b + w_take, ..])
                .assign(&block.slice(s![..h_take, ..w_take, ..]));
        }
    }
    Ok(frame)
}

/// Converts an `(H, W, 3)` pixel block to the `(3, H, W)` channel-first
/// layout consumed by the convolutional extractors.
pub fn block_to_chw(block: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = block.dim();
    debug_assert_eq!(c, 3);
    Array3::from_shape_fn((3, h, w), |(ch, r, col)| block[[r, col, ch]])
}

/// Tiles a frame and converts every block to channel-first layout.
pub fn tile_frame_chw(
    frame: &FrameTensor,
    grid: &BlockGrid,
    mode: PadMode,
) -> Result<Vec<Array3<f64>>> {
    Ok(tile_frame(frame, grid, mode)?.iter().map(block_to_chw).collect())
}

/// Pixel-level tamper mask, soft (`[0, 1]`) or binarized (`{0, 1}`).
#[derive(Debug, Clone)]
pub struct ForgeryMask {
    values: Array2<f64>,
    binarized: bool,
}

impl ForgeryMask {
    /// Wraps soft mask values in `[0, 1]`.
    pub fn soft(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("mask values must lie within [0, 1]"));
        }
        Ok(ForgeryMask { values, binarized: false })
    }

    /// Wraps strictly binary mask values.
    pub fn binary(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("binary mask values must be exactly 0 or 1"));
        }
        Ok(ForgeryMask { values, binarized: true })
    }

    /// All-zero binary mask for an authentic frame.
    pub fn zeros(height: usize, width: usize) -> Self {
        ForgeryMask {
            values: Array2::zeros((height, width)),
            binarized: true,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_binarized(&self) -> bool {
        self.binarized
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    /// Fraction of pixels marked as tampered.
    pub fn area_fraction(&self) -> f64 {
        let n = self.values.len();
        if n == 0 {
            return 0.0;
        }
        self.values.iter().filter(|&&v| v >= 0.5).count() as f64 / n as f64
    }

    /// Thresholds soft values into a binary mask (`value >= threshold` marks tampered).
    pub fn binarize(&self, threshold: f64) -> ForgeryMask {
        ForgeryMask {
            values: self.values.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
            binarized: true,
        }
    }

    /// True if any pixel is marked tampered.
    pub fn any_tampered(&self) -> bool {
        self.values.iter().any(|&v| v > 0.0)
    }
}

/// Soft per-block tamper-ratio labels over a grid, row-major.
#[derive(Debug, Clone)]
pub struct BlockLabelField {
    pub z: Vec<f64>,
}

/// Computes per-block labels: the fraction of tampered pixels in each block,
/// counting padded pixels as unmanipulated.
pub fn block_labels(mask: &ForgeryMask, grid: &BlockGrid) -> Result<BlockLabelField> {
    if !mask.is_binarized() {
        return Err(Error::invalid("block labels require a binarized mask"));
    }
    check_grid_matches(grid, mask.height(), mask.width())?;
    let b = grid.block_size;
    let block_area = (b * b) as f64;
    let values = mask.values();
    let mut z = vec![0.0f64; grid.num_blocks()];
    for r in 0..grid.rows {
        let y0 = r * b;
        let y1 = (y0 + b).min(mask.height());
        for c in 0..grid.cols {
            let x0 = c * b;
            let x1 = (x0 + b).min(mask.width());
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let sum: f64 = values.slice(s![y0..y1, x0..x1]).sum();
            z[grid.index_of(r, c)] = sum / block_area;
        }
    }
    debug_assert!(z.iter().all(|&v| (0.0..=1.0).contains(&v)));
    Ok(BlockLabelField { z })
}
