//! Core value types shared by every pipeline stage.
//!
//! A dataset is a list of [`ImageRecord`]s; each record carries the bounding
//! boxes and precomputed feature vectors of its region proposals. Geometry
//! helpers ([`region_center`], [`region_scale`]) feed the pyramid cell
//! assignment and the coordinate augmentation. All types are immutable after
//! construction and safe to share across worker threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One region proposal: a bounding box plus its dense feature vector.
///
/// Boxes are stored as (left, top, width, height) in continuous pixel
/// coordinates; fractional boxes from upstream proposal tools are accepted.
/// Coordinates and features are `f32` (their on-disk precision); all
/// arithmetic on them accumulates in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptor {
    /// Left edge in pixels, >= 0.
    pub x: f32,
    /// Top edge in pixels, >= 0.
    pub y: f32,
    /// Width in pixels, > 0.
    pub w: f32,
    /// Height in pixels, > 0.
    pub h: f32,
    /// Dense descriptor; its length must equal the dataset's declared
    /// dimension for every region in a dataset.
    pub features: Vec<f32>,
}

impl RegionDescriptor {
    pub fn new(x: f32, y: f32, w: f32, h: f32, features: Vec<f32>) -> Self {
        Self { x, y, w, h, features }
    }
}

/// One image: id, pixel dimensions, and its region proposals.
///
/// The region list may include a region equal to the full image frame.
/// Validity against the frame is checked by [`validate_image`], not at
/// construction, so that readers can surface every problem in a foreign
/// file at once.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Unique within a dataset; opaque UTF-8.
    pub id: String,
    /// Frame width in pixels.
    pub width: u32,
    /// Frame height in pixels.
    pub height: u32,
    pub regions: Vec<RegionDescriptor>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, width: u32, height: u32, regions: Vec<RegionDescriptor>) -> Self {
        Self { id: id.into(), width, height, regions }
    }
}

/// Center of a region's bounding box: `(x + w/2, y + h/2)`.
pub fn region_center(r: &RegionDescriptor) -> (f64, f64) {
    (r.x as f64 + r.w as f64 / 2.0, r.y as f64 + r.h as f64 / 2.0)
}

/// Scale of a region: the geometric-mean side length `sqrt(w * h)`.
///
/// For a region covering the whole frame this equals `sqrt(W * H)`, which
/// makes the log-scale term of the coordinate augmentation vanish.
pub fn region_scale(r: &RegionDescriptor) -> f64 {
    (r.w as f64 * r.h as f64).sqrt()
}

/// A single invariant violation found by [`validate_image`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Frame width or height is zero.
    EmptyFrame,
    /// The record has no regions at all.
    NoRegions,
    NonPositiveWidth { region: usize },
    NonPositiveHeight { region: usize },
    NegativeOrigin { region: usize },
    /// Box exceeds the frame beyond the half-pixel slack for float boxes.
    OutOfFrame { region: usize },
    FeatureDimMismatch { region: usize, expected: usize, found: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyFrame => write!(f, "non-positive frame dimensions"),
            Violation::NoRegions => write!(f, "record has no regions"),
            Violation::NonPositiveWidth { region } => {
                write!(f, "non-positive width at region {region}")
            }
            Violation::NonPositiveHeight { region } => {
                write!(f, "non-positive height at region {region}")
            }
            Violation::NegativeOrigin { region } => {
                write!(f, "negative box origin at region {region}")
            }
            Violation::OutOfFrame { region } => {
                write!(f, "box exceeds image frame at region {region}")
            }
            Violation::FeatureDimMismatch { region, expected, found } => write!(
                f,
                "feature dimension mismatch at region {region}: expected {expected}, found {found}"
            ),
        }
    }
}

/// Checks a record against every invariant and returns all violations.
///
/// An empty return value means the record is valid for a dataset with
/// descriptor dimension `dim`. Boxes get half a pixel of slack at the right
/// and bottom edges to tolerate float rounding from upstream proposal tools.
/// The comparisons are written so that NaN coordinates are flagged too.
pub fn validate_image(rec: &ImageRecord, dim: usize) -> Vec<Violation> {
    let mut violations = Vec::new();
    if rec.width == 0 || rec.height == 0 {
        violations.push(Violation::EmptyFrame);
    }
    if rec.regions.is_empty() {
        violations.push(Violation::NoRegions);
    }
    let (fw, fh) = (rec.width as f64, rec.height as f64);
    for (i, r) in rec.regions.iter().enumerate() {
        if r.w.is_nan() || r.w <= 0.0 {
            violations.push(Violation::NonPositiveWidth { region: i });
        }
        if r.h.is_nan() || r.h <= 0.0 {
            violations.push(Violation::NonPositiveHeight { region: i });
        }
        if !(r.x >= 0.0 && r.y >= 0.0) {
            violations.push(Violation::NegativeOrigin { region: i });
        }
        if !(r.x as f64 + r.w as f64 <= fw + 0.5 && r.y as f64 + r.h as f64 <= fh + 0.5) {
            violations.push(Violation::OutOfFrame { region: i });
        }
        if r.features.len() != dim {
            violations.push(Violation::FeatureDimMismatch {
                region: i,
                expected: dim,
                found: r.features.len(),
            });
        }
    }
    violations
}

/// Depth of the spatial pyramid: how many grid levels an encoding spans.
///
/// Level 1 is the whole frame (1 cell). Level 2 adds a 2x2 grid (5 cells
/// total). Level 3 adds a 3x1 left/middle/right split (8 cells total).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec(u8);

impl PyramidSpec {
    pub fn new(level: u8) -> Result<Self> {
        if (1..=3).contains(&level) {
            Ok(Self(level))
        } else {
            Err(Error::InvalidInput(format!(
                "pyramid level must be 1, 2, or 3, got {level}"
            )))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// Total number of cells across all levels up to and including this one.
    pub fn cell_count(self) -> usize {
        match self.0 {
            1 => 1,
            2 => 5,
            _ => 8,
        }
    }
}

/// Location of one cell's slice inside an encoded vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSlot {
    /// Grid level this cell belongs to (1, 2, or 3).
    pub level: u8,
    /// Cell index within its level.
    pub cell: u8,
    /// Start of the cell's slice in the flat vector.
    pub offset: usize,
    /// Slice length; always `k * dim`.
    pub len: usize,
}

/// Final flat representation of one image plus the layout that produced it.
///
/// The vector is the concatenation of one normalized VLAD block per pyramid
/// cell, in fixed order: level 1, then level-2 cells 0-3 (row-major), then
/// level-3 cells 0-2 (left to right). Each per-cell slice has Euclidean
/// norm 1, or is all zeros when no region fell in the cell. Values are `f32`,
/// the precision they are stored at.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRepresentation {
    pub image_id: String,
    pub spec: PyramidSpec,
    /// Codebook size used for the VLAD blocks.
    pub k: usize,
    /// Descriptor dimension entering VLAD (after PCA, plus 3 if augmented).
    pub dim: usize,
    pub vector: Vec<f32>,
    pub layout: Vec<CellSlot>,
}

impl EncodedRepresentation {
    /// Expected vector length for a given shape: `cells * k * dim`.
    pub fn expected_len(spec: PyramidSpec, k: usize, dim: usize) -> usize {
        spec.cell_count() * k * dim
    }

    /// Cell slots in concatenation order for a given shape.
    pub fn layout_for(spec: PyramidSpec, k: usize, dim: usize) -> Vec<CellSlot> {
        let len = k * dim;
        let mut slots = Vec::with_capacity(spec.cell_count());
        let mut offset = 0;
        for level in 1..=spec.level() {
            let cells = match level {
                1 => 1,
                2 => 4,
                _ => 3,
            };
            for cell in 0..cells {
                slots.push(CellSlot { level, cell, offset, len });
                offset += len;
            }
        }
        slots
    }

    /// The slice for one cell, or `None` if the cell is not in the layout.
    pub fn cell_slice(&self, level: u8, cell: u8) -> Option<&[f32]> {
        self.layout
            .iter()
            .find(|s| s.level == level && s.cell == cell)
            .map(|s| &self.vector[s.offset..s.offset + s.len])
    }
}
