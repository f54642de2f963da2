//! Feature bundles, crop pooling and cosine similarity.
//!
//! A [`FeatureBundle`] is everything the engine knows about one image: a
//! dense [`PatchGrid`] of cell embeddings, the global image embedding, the
//! initial proposal boxes and the class text bank. Crop embeddings are never
//! produced by an encoder here; they are pooled from the grid with
//! [`pool_crop_embedding`].

mod format;

pub use format::{
    decode_bundle, encode_bundle, load_bundle, load_manifest, manifest_path, save_bundle,
    BundleHeader, BUNDLE_EXTENSION, Manifest, FLAG_GROUND_TRUTH, FLAG_TEMPLATES, MAGIC,
};

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};
use crate::geometry::BoundingBox;
use crate::math;
use crate::textbank::ClassTextBank;

/// Tolerance used when checking that a stored vector has unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A dense embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    /// Unit-normalized copy of `values`.
    pub fn unit(values: &[f64]) -> Result<Self> {
        math::normalized(values)
            .map(Embedding)
            .ok_or(LagoError::DegenerateVector("cannot normalize a zero vector"))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        math::l2_norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Rounds every component through `f32`, the on-disk precision.
    pub fn to_storage_precision(&self) -> Self {
        Embedding(self.0.iter().map(|&v| v as f32 as f64).collect())
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Cosine similarity `dot(u, v) / (|u| |v|)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(LagoError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = math::l2_norm(u);
    let nv = math::l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(LagoError::DegenerateVector("cosine of a zero vector"));
    }
    Ok((math::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// An `H x W` grid of `d`-dimensional cell embeddings, stored row-major with
/// the components of each cell contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    dim: usize,
    cells: Vec<f64>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, dim: usize, cells: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(LagoError::InvalidBundle(format!(
                "patch grid must be non-empty, got {height}x{width}x{dim}"
            )));
        }
        if cells.len() != height * width * dim {
            return Err(LagoError::DimensionMismatch {
                expected: height * width * dim,
                found: cells.len(),
            });
        }
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(LagoError::InvalidBundle("non-finite cell value".into()));
        }
        Ok(PatchGrid {
            height,
            width,
            dim,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.cells[start..start + self.dim]
    }

    fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for cell in self.cells.chunks_exact(self.dim) {
            for (a, v) in acc.iter_mut().zip(cell) {
                *a += v;
            }
        }
        acc
    }
}

/// Overlap of `[lo, hi)` with each of `n` equal cells on `[0, 1)`, as
/// `(index, length)` pairs for the covered cells only.
fn axis_overlaps(lo: f64, hi: f64, n: usize) -> Vec<(usize, f64)> {
    let nf = n as f64;
    let first = ((lo * nf).floor().max(0.0) as usize).min(n - 1);
    let last = ((hi * nf).ceil().max(1.0) as usize).min(n);
    (first..last)
        .filter_map(|i| {
            let cell_lo = i as f64 / nf;
            let cell_hi = (i + 1) as f64 / nf;
            let len = hi.min(cell_hi) - lo.max(cell_lo);
            (len > 0.0).then_some((i, len))
        })
        .collect()
}

/// Area-weighted mean of the cells a box covers, L2-normalized.
///
/// Each cell contributes in proportion to its overlap area with `b`, so the
/// pooled vector varies continuously with the box edges. When the weighted
/// mean is the zero vector the normalized mean of the whole grid is returned
/// instead.
pub fn pool_crop_embedding(grid: &PatchGrid, b: &BoundingBox) -> Result<Embedding> {
    let cols = axis_overlaps(b.x, b.right(), grid.width);
    let rows = axis_overlaps(b.y, b.bottom(), grid.height);
    let mut acc = vec![0.0; grid.dim];
    for &(r, oy) in &rows {
        for &(c, ox) in &cols {
            let weight = ox * oy;
            for (a, v) in acc.iter_mut().zip(grid.cell(r, c)) {
                *a += weight * v;
            }
        }
    }
    match math::normalized(&acc) {
        Some(v) => Ok(Embedding(v)),
        None => full_image_embedding(grid),
    }
}

/// Normalized mean of every cell in the grid.
pub fn full_image_embedding(grid: &PatchGrid) -> Result<Embedding> {
    Embedding::unit(&grid.mean())
}

/// The engine's complete per-image input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image_id: String,
    pub grid: PatchGrid,
    pub full_embedding: Embedding,
    pub proposals: Vec<BoundingBox>,
    pub text_bank: ClassTextBank,
    pub ground_truth: Option<usize>,
}

impl FeatureBundle {
    /// Checks dimensions, norms and proposal placement.
    pub fn validate(&self) -> Result<()> {
        let d = self.grid.dim();
        if self.full_embedding.dim() != d {
            return Err(LagoError::DimensionMismatch {
                expected: d,
                found: self.full_embedding.dim(),
            });
        }
        if self.text_bank.dim() != d {
            return Err(LagoError::DimensionMismatch {
                expected: d,
                found: self.text_bank.dim(),
            });
        }
        if !self.full_embedding.is_finite() || !self.full_embedding.is_unit() {
            return Err(LagoError::InvalidBundle(
                "full-image embedding must be finite with unit norm".into(),
            ));
        }
        if self.proposals.is_empty() {
            return Err(LagoError::InvalidBundle("bundle has no proposals".into()));
        }
        for p in &self.proposals {
            p.validate()?;
            if !p.is_clamped(1e-6) {
                return Err(LagoError::InvalidBundle(format!(
                    "proposal {p:?} lies outside the image"
                )));
            }
        }
        self.text_bank.validate()?;
        if let Some(gt) = self.ground_truth {
            if gt >= self.text_bank.num_classes() {
                return Err(LagoError::InvalidBundle(format!(
                    "ground truth {gt} out of range for {} classes",
                    self.text_bank.num_classes()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.text_bank.num_classes()
    }

    /// Cosine similarity of `embedding` against every class prototype.
    pub fn class_similarities(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.text_bank.similarities(embedding)
    }
}
