//! Tile, patch and sub-patch arithmetic plus the scale-adaptive positional encoding.
//!
//! Tiles are squares of side `S` meters split into `(S/P)²` patches of side
//! `P`. A modality with resolution `R` meters per pixel sees each patch as a
//! `P/R` pixel square, which is further cut into sub-patches of `δ` pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EPS: f64 = 1e-9;

/// `a / b` as an integer when it is one (up to floating-point noise).
pub fn exact_ratio(a: f64, b: f64) -> Option<usize> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return None;
    }
    let q = a / b;
    let r = q.round();
    if r >= 1.0 && (q - r).abs() <= EPS * q.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

/// Patch grid over one tile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub tile_size: f64,
    pub patch_size: f64,
    pub per_axis: usize,
}

impl TileGeometry {
    pub fn new(tile_size: f64, patch_size: f64) -> Result<Self> {
        let per_axis = exact_ratio(tile_size, patch_size)
            .ok_or(Error::Divisibility { s: tile_size, p: patch_size })?;
        Ok(TileGeometry { tile_size, patch_size, per_axis })
    }

    pub fn total(&self) -> usize {
        self.per_axis * self.per_axis
    }

    /// `(pos_x, pos_y)` of a row-major patch index, origin top-left.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index % self.per_axis, index / self.per_axis)
    }

    pub fn index(&self, pos_x: usize, pos_y: usize) -> usize {
        pos_y * self.per_axis + pos_x
    }

    pub fn contains(&self, index: usize) -> bool {
        index < self.total()
    }
}

/// Shorthand for [`TileGeometry::new`].
pub fn patch_grid(tile_size: f64, patch_size: f64) -> Result<TileGeometry> {
    TileGeometry::new(tile_size, patch_size)
}

/// How one modality's view of a patch is cut into sub-patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPatchLayout {
    pub resolution: f64,
    pub delta: usize,
    pub delta_eff: usize,
    pub pixels_per_patch: usize,
    pub per_axis: usize,
}

impl SubPatchLayout {
    pub fn count(&self) -> usize {
        self.per_axis * self.per_axis
    }

    /// Side of one sub-patch in meters, the unit of its positional encoding.
    pub fn subpatch_meters(&self) -> f64 {
        self.resolution * self.delta_eff as f64
    }
}

/// Sub-patch layout for patch side `patch_size` at `resolution` m/px with a
/// requested sub-patch side of `delta` pixels, clamped to the patch.
pub fn subpatch_layout(patch_size: f64, resolution: f64, delta: usize) -> Result<SubPatchLayout> {
    if delta == 0 {
        return Err(Error::Layout(format!("sub-patch size must be positive (P={patch_size}, R={resolution})")));
    }
    let pixels = exact_ratio(patch_size, resolution).ok_or_else(|| {
        Error::Layout(format!("P/R = {patch_size}/{resolution} is not a positive integer pixel count"))
    })?;
    let delta_eff = delta.min(pixels);
    if pixels % delta_eff != 0 {
        return Err(Error::Layout(format!(
            "{pixels} pixels per patch (P={patch_size}, R={resolution}) not divisible by sub-patch size {delta_eff}"
        )));
    }
    Ok(SubPatchLayout { resolution, delta, delta_eff, pixels_per_patch: pixels, per_axis: pixels / delta_eff })
}

/// Parameters of the sinusoidal encoding for one token level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosEncodingSpec {
    pub width: usize,
    /// Reference length in meters.
    pub reference: f64,
    /// Size in meters of one unit step of the encoded index.
    pub unit: f64,
}

impl PosEncodingSpec {
    pub fn new(width: usize, unit: f64) -> Result<Self> {
        Self::with_reference(width, unit, 1.0)
    }

    pub fn with_reference(width: usize, unit: f64, reference: f64) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::Config(format!("positional encoding width must be even and positive, got {width}")));
        }
        if !(unit > 0.0) || !(reference > 0.0) {
            return Err(Error::Config(format!("positional encoding lengths must be positive (g={unit}, G={reference})")));
        }
        Ok(PosEncodingSpec { width, reference, unit })
    }

    /// One half of the encoding: `sin((g/G)·pos/10000^(i/E) + (π/2)·(i mod 2))`.
    pub fn axis(&self, pos: f64, i: usize) -> f64 {
        let e = self.width as f64;
        let phase = if i % 2 == 1 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
        ((self.unit / self.reference) * pos / 10000f64.powf(i as f64 / e) + phase).sin()
    }
}

/// Encoding of grid position `(pos_x, pos_y)`: the x half followed by the y half.
pub fn pos_encoding(pos_x: usize, pos_y: usize, spec: &PosEncodingSpec) -> Vec<f64> {
    let half = spec.width / 2;
    let mut out = Vec::with_capacity(spec.width);
    out.extend((0..half).map(|i| spec.axis(pos_x as f64, i)));
    out.extend((0..half).map(|i| spec.axis(pos_y as f64, i)));
    out
}

/// Row-major encodings of every cell of an `n × n` grid, flattened to `n²·E`.
pub fn grid_encoding(n: usize, spec: &PosEncodingSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n * spec.width);
    for y in 0..n {
        for x in 0..n {
            out.extend(pos_encoding(x, y, spec));
        }
    }
    out
}
