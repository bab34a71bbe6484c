//! Rasters, the frozen patch-embedding stub, and patch pooling.

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Square grayscale raster with integer pixel values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub size: usize,
    /// Row-major pixel intensities, 0 = background.
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(size: usize) -> Self {
        Raster {
            size,
            pixels: vec![0; size * size],
        }
    }

    pub fn set(&mut self, x: i64, y: i64) -> Result<()> {
        if x < 0 || y < 0 || x as usize >= self.size || y as usize >= self.size {
            return Err(Error::InvalidArgument(format!(
                "pixel ({x},{y}) outside {0}x{0} canvas",
                self.size
            )));
        }
        self.pixels[y as usize * self.size + x as usize] = 255;
        Ok(())
    }

    /// Draw a 1-pixel-wide segment between integer endpoints (Bresenham).
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) -> Result<()> {
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y)?;
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
        Ok(())
    }

    /// Number of pixels where the two rasters differ.
    pub fn diff_count(&self, other: &Raster) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// True when every lit pixel of `other` is lit here too.
    pub fn is_superset_of(&self, other: &Raster) -> bool {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .all(|(a, b)| *b == 0 || *a != 0)
    }
}

/// Frozen patch-embedding transform. Its two parameters live in the model's
/// `ParamStore` with `trainable = false` and never receive gradient in any
/// stage.
#[derive(Debug, Clone, Copy)]
pub struct VisualStub {
    pub patch_size: usize,
    pub d_vis: usize,
}

pub const STUB_WEIGHT: &str = "stub.weight";
pub const STUB_BIAS: &str = "stub.bias";

impl VisualStub {
    /// Per-raster patch count for a given raster extent.
    pub fn patch_count(&self, raster_size: usize) -> usize {
        let g = raster_size / self.patch_size;
        g * g
    }

    /// Map a raster to `[P, d_vis]` patch features. Deterministic; patches
    /// are row-major.
    pub fn encode_image(&self, params: &ParamStore, raster: &Raster) -> Result<Tensor> {
        if raster.size % self.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "raster extent {} not divisible by patch size {}",
                raster.size, self.patch_size
            )));
        }
        let grid = raster.size / self.patch_size;
        let pp = self.patch_size * self.patch_size;
        let p = grid * grid;
        let mut patches = Vec::with_capacity(p * pp);
        for pr in 0..grid {
            for pc in 0..grid {
                for dy in 0..self.patch_size {
                    for dx in 0..self.patch_size {
                        let y = pr * self.patch_size + dy;
                        let x = pc * self.patch_size + dx;
                        patches.push(raster.pixels[y * raster.size + x] as f64 / 255.0);
                    }
                }
            }
        }
        let x = Tensor::new(vec![p, pp], patches)?;
        let w = &params
            .get(STUB_WEIGHT)
            .ok_or_else(|| Error::InvalidArgument("visual stub weights missing".into()))?
            .value;
        let b = &params
            .get(STUB_BIAS)
            .ok_or_else(|| Error::InvalidArgument("visual stub bias missing".into()))?
            .value;
        let mut out = x.matmul(w)?;
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % cols];
        }
        Ok(out)
    }
}

/// Average contiguous row-major bins of `features [P, d]` down to `K` rows.
/// The first `P mod K` bins hold one extra row.
pub fn pool_patches(features: &Tensor, k: usize) -> Result<Tensor> {
    let p = features.rows();
    let d = features.cols();
    if k == 0 || p < k {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {p} patches into {k} bins"
        )));
    }
    let base = p / k;
    let extra = p % k;
    let mut out = Vec::with_capacity(k * d);
    let mut row = 0usize;
    for bin in 0..k {
        let size = base + usize::from(bin < extra);
        let mut acc = vec![0.0; d];
        for _ in 0..size {
            for (a, v) in acc.iter_mut().zip(features.row(row)) {
                *a += v;
            }
            row += 1;
        }
        for a in &mut acc {
            *a /= size as f64;
        }
        out.extend(acc);
    }
    Tensor::new(vec![k, d], out)
}
