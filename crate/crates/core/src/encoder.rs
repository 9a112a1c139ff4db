//! Two-scale toy backbone producing 1/8 (coarse) and 1/2 (fine) feature
//! grids from a grayscale image.
//!
//! ```text
//! image ─ conv s2 ─ relu ─┬─ conv s2 ─ relu ─ conv s2 ─ relu ─ conv s1 ─► coarse (1/8, d_c)
//!        (1/2, stem)      │                                      │
//!                         └─ 1×1 lateral ──── + ◄── 1×1, ×4 nearest upsample
//!                                             │
//!                                             ▼
//!                                        fine (1/2, d_f)
//! ```

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 1/8 of the image resolution.
    Coarse,
    /// 1/2 of the image resolution.
    Fine,
}

impl Scale {
    pub fn factor(self) -> usize {
        match self {
            Scale::Coarse => 8,
            Scale::Fine => 2,
        }
    }
}

/// A grid of feature vectors; `values` is `[height·width × channels]`,
/// row-major over cells.
#[derive(Debug, Clone, Copy)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub scale: Scale,
    pub values: Var,
}

impl FeatureGrid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_coarse: usize,
    pub d_fine: usize,
    pub stem: usize,
    pub mid: usize,
}

impl EncoderDims {
    pub fn new(d_coarse: usize, d_fine: usize) -> Self {
        Self {
            d_coarse,
            d_fine,
            stem: 16,
            mid: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub dims: EncoderDims,
    stage1: Conv2d,
    stage2: Conv2d,
    stage3: Conv2d,
    stage3_refine: Conv2d,
    lateral_fine: Linear,
    lateral_coarse: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dims: EncoderDims) -> Self {
        let stage1 = Conv2d::new(store, rng, "encoder.stage1", 1, dims.stem, 3, 2, 1);
        let stage2 = Conv2d::new(store, rng, "encoder.stage2", dims.stem, dims.mid, 3, 2, 1);
        let stage3 = Conv2d::new(store, rng, "encoder.stage3", dims.mid, dims.d_coarse, 3, 2, 1);
        let stage3_refine = Conv2d::new(
            store,
            rng,
            "encoder.stage3_refine",
            dims.d_coarse,
            dims.d_coarse,
            3,
            1,
            1,
        );
        let lateral_fine = Linear::new(store, rng, "encoder.lateral_fine", dims.stem, dims.d_fine, true);
        let lateral_coarse = Linear::new(
            store,
            rng,
            "encoder.lateral_coarse",
            dims.d_coarse,
            dims.d_fine,
            false,
        );
        Self {
            dims,
            stage1,
            stage2,
            stage3,
            stage3_refine,
            lateral_fine,
            lateral_coarse,
        }
    }

    /// Encodes an `H×W` image (any shape holding `H·W` values).
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        image: Var,
        height: usize,
        width: usize,
    ) -> Result<(FeatureGrid, FeatureGrid)> {
        if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
            return Err(Error::InputShape(alloc::format!(
                "image {height}×{width} is not divisible by 8"
            )));
        }
        if g.value(image).len() != height * width {
            return Err(Error::InputShape(alloc::format!(
                "image buffer holds {} values, expected {height}×{width}",
                g.value(image).len()
            )));
        }
        let (s1, h2, w2) = self.stage1.forward(g, p, image, height, width)?;
        let s1 = g.relu(s1);
        let (s2, h4, w4) = self.stage2.forward(g, p, s1, h2, w2)?;
        let s2 = g.relu(s2);
        let (s3, h8, w8) = self.stage3.forward(g, p, s2, h4, w4)?;
        let s3 = g.relu(s3);
        let (coarse, _, _) = self.stage3_refine.forward(g, p, s3, h8, w8)?;

        let lat = self.lateral_fine.forward(g, p, s1)?;
        let top = self.lateral_coarse.forward(g, p, coarse)?;
        let up_idx = upsample_index(h8, w8, 4);
        let top_up = g.gather_rows(top, &up_idx)?;
        let fine = g.add(lat, top_up)?;

        Ok((
            FeatureGrid {
                height: h8,
                width: w8,
                channels: self.dims.d_coarse,
                scale: Scale::Coarse,
                values: coarse,
            },
            FeatureGrid {
                height: h2,
                width: w2,
                channels: self.dims.d_fine,
                scale: Scale::Fine,
                values: fine,
            },
        ))
    }
}

/// Row map for nearest-neighbour upsampling of an `h×w` grid by `factor`.
fn upsample_index(h: usize, w: usize, factor: usize) -> Vec<usize> {
    let (uh, uw) = (h * factor, w * factor);
    (0..uh * uw)
        .map(|i| (i / uw / factor) * w + (i % uw) / factor)
        .collect()
}

/// The fixed 2-D sinusoidal code of one cell. Channels come in groups of
/// four: `sin(x·ω_k), cos(x·ω_k), sin(y·ω_k), cos(y·ω_k)` with
/// `ω_k = 10000^(-2k/(d/2))`.
pub fn sinusoid_code(row: usize, col: usize, channels: usize) -> Vec<f64> {
    let half = (channels / 2) as f64;
    let mut out = alloc::vec![0.0; channels];
    for k in 0..channels / 4 {
        let omega = math::exp(-(2.0 * k as f64) * math::ln(10000.0) / half);
        let (x, y) = (col as f64 * omega, row as f64 * omega);
        out[4 * k] = math::sin(x);
        out[4 * k + 1] = math::cos(x);
        out[4 * k + 2] = math::sin(y);
        out[4 * k + 3] = math::cos(y);
    }
    out
}

pub fn positional_table(height: usize, width: usize, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(height * width * channels);
    for r in 0..height {
        for c in 0..width {
            data.extend(sinusoid_code(r, c, channels));
        }
    }
    Tensor::from_parts(alloc::vec![height * width, channels], data)
}

/// Adds the sinusoidal position code to a coarse grid.
pub fn positional_encoding(g: &mut Graph, grid: FeatureGrid) -> Result<FeatureGrid> {
    if grid.scale != Scale::Coarse {
        return Err(Error::Scale("positional encoding applies to the coarse grid only"));
    }
    if grid.channels % 4 != 0 {
        return Err(Error::param("channels", "positional encoding needs a multiple of 4"));
    }
    let table = g.input(positional_table(grid.height, grid.width, grid.channels));
    let values = g.add(grid.values, table)?;
    Ok(FeatureGrid { values, ..grid })
}
