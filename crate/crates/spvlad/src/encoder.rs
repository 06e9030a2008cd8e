//! VLAD aggregation over a spatial pyramid.
//!
//! One image encodes as follows: every region descriptor is PCA-projected,
//! each pyramid cell gathers the regions whose box center falls inside it
//! (level 1 takes all of them), each cell sums descriptor-minus-centroid
//! residuals per codeword ([`vlad_raw`]), the per-cell vector is normalized
//! ([`normalize_ssr`] by default), and the cells concatenate in fixed order:
//! level 1, level-2 cells 0..3 (row-major), level-3 cells 0..2 (left to
//! right).
//!
//! Everything here is a pure function over immutable models, so encoding
//! distinct images is embarrassingly parallel ([`encode_records`]). Within
//! one cell the residuals are summed in a canonical descriptor order, which
//! makes every output bit-identical under permutation of the region list.

use rayon::prelude::*;

use crate::codebook::{assign, Codebook};
use crate::datamodel::{
    region_center, region_scale, EncodedRepresentation, ImageRecord, PyramidSpec,
    RegionDescriptor,
};
use crate::error::{Error, Result};
use crate::pca::{project, PcaModel};

/// One cell of the pyramid grid.
///
/// Level 1 has the single cell 0 (whole frame). Level 2 is a 2x2 grid in
/// row-major order: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
/// Level 3 splits into vertical thirds: 0 left, 1 middle, 2 right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellId {
    pub level: u8,
    pub index: u8,
}

fn cells_in_level(level: u8) -> Result<u8> {
    match level {
        1 => Ok(1),
        2 => Ok(4),
        3 => Ok(3),
        other => Err(Error::InvalidInput(format!("no pyramid level {other}"))),
    }
}

impl CellId {
    pub fn new(level: u8, index: u8) -> Result<Self> {
        let count = cells_in_level(level)?;
        if index >= count {
            return Err(Error::InvalidInput(format!(
                "level {level} has cells 0..{count}, got {index}"
            )));
        }
        Ok(Self { level, index })
    }
}

/// All cells of a pyramid in concatenation order.
pub fn cells(spec: PyramidSpec) -> Vec<CellId> {
    let mut out = Vec::with_capacity(spec.cell_count());
    for level in 1..=spec.level() {
        for index in 0..cells_in_level(level).expect("level from a valid spec") {
            out.push(CellId { level, index });
        }
    }
    out
}

/// The cell of `level` that a region's box center falls into.
///
/// Level 2: column 0 when `cx < W/2`, else 1; row likewise with `H/2`;
/// index = 2*row + column. Level 3: `min(floor(3*cx/W), 2)`. A center on a
/// boundary falls to the higher-index side; the right edge clamps.
pub fn assign_cell(level: u8, width: u32, height: u32, r: &RegionDescriptor) -> Result<CellId> {
    cells_in_level(level)?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("cell assignment needs a positive frame".into()));
    }
    let (cx, cy) = region_center(r);
    let (w, h) = (width as f64, height as f64);
    let index = match level {
        1 => 0,
        2 => {
            let column = if cx < w / 2.0 { 0 } else { 1 };
            let row = if cy < h / 2.0 { 0 } else { 1 };
            2 * row + column
        }
        _ => (3.0 * cx / w).floor().clamp(0.0, 2.0) as u8,
    };
    Ok(CellId { level, index })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// Unnormalized VLAD: block `k` holds the sum of `(x - c_k)` over the
/// descriptors assigned to centroid `k`; blocks with no descriptors stay
/// zero, as does the whole vector for an empty input.
///
/// Within each block the residuals are summed in sorted descriptor order,
/// so any permutation of the input produces bit-identical output.
pub fn vlad_raw<S: AsRef<[f64]>>(codebook: &Codebook, descriptors: &[S]) -> Result<Vec<f64>> {
    let dim = codebook.dim();
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); codebook.k()];
    for d in descriptors {
        let d = d.as_ref();
        let j = assign(codebook, d)?;
        groups[j].push(d);
    }
    let mut out = vec![0.0f64; codebook.k() * dim];
    for (j, group) in groups.iter_mut().enumerate() {
        group.sort_unstable_by(|a, b| lex_cmp(a, b));
        let centroid = codebook.centroid(j);
        let block = &mut out[j * dim..(j + 1) * dim];
        for x in group.iter() {
            for ((o, v), c) in block.iter_mut().zip(x.iter()).zip(centroid) {
                *o += v - c;
            }
        }
    }
    Ok(out)
}

fn l2_scale(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Signed square rooting: componentwise `sign(v) * sqrt(|v|)`, then one L2
/// normalization of the result. An all-zero vector stays all-zero.
pub fn normalize_ssr(v: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| x.signum() * x.abs().sqrt()).collect();
    l2_scale(&mut out);
    out
}

/// Intra-normalization: L2-normalize each `block`-sized chunk (one chunk per
/// codeword), then L2-normalize the whole vector. Zero chunks stay zero.
pub fn normalize_intra(v: &[f64], block: usize) -> Vec<f64> {
    debug_assert!(block > 0 && v.len().is_multiple_of(block));
    let mut out = v.to_vec();
    for chunk in out.chunks_exact_mut(block) {
        l2_scale(chunk);
    }
    l2_scale(&mut out);
    out
}

/// Per-cell normalization applied to the raw VLAD vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Signed square rooting followed by one L2 over the cell.
    #[default]
    SignedSqrt,
    /// L2 per codeword block, then one L2 over the cell.
    IntraBlock,
}

impl Normalization {
    fn apply(self, v: &[f64], block: usize) -> Vec<f64> {
        match self {
            Normalization::SignedSqrt => normalize_ssr(v),
            Normalization::IntraBlock => normalize_intra(v, block),
        }
    }
}

/// A projected descriptor plus the three geometry components: relative
/// center and log relative scale. Total length `base.len() + 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDescriptor {
    pub base: Vec<f64>,
    /// `cx / W - 0.5`, in `[-0.5, 0.5]`.
    pub rel_x: f64,
    /// `cy / H - 0.5`, in `[-0.5, 0.5]`.
    pub rel_y: f64,
    /// `ln(scale) - ln(sqrt(W * H))`; zero for a full-frame region.
    pub log_scale: f64,
}

impl AugmentedDescriptor {
    pub fn into_vec(self) -> Vec<f64> {
        let mut v = self.base;
        v.push(self.rel_x);
        v.push(self.rel_y);
        v.push(self.log_scale);
        v
    }
}

/// Appends region geometry to a projected descriptor.
///
/// A region covering the whole frame yields exactly `(0, 0, 0)`: the center
/// offsets vanish and its scale is the same expression as the frame scale.
pub fn augment(
    r: &RegionDescriptor,
    projected: Vec<f64>,
    width: u32,
    height: u32,
) -> Result<AugmentedDescriptor> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("augmentation needs a positive frame".into()));
    }
    let (cx, cy) = region_center(r);
    let (w, h) = (width as f64, height as f64);
    Ok(AugmentedDescriptor {
        base: projected,
        rel_x: cx / w - 0.5,
        rel_y: cy / h - 0.5,
        log_scale: region_scale(r).ln() - (w * h).sqrt().ln(),
    })
}

fn check_frame(rec: &ImageRecord) -> Result<()> {
    if rec.width == 0 || rec.height == 0 {
        return Err(Error::InvalidInput(format!(
            "image {} has an empty frame",
            rec.id
        )));
    }
    Ok(())
}

fn project_all(pca: &PcaModel, rec: &ImageRecord) -> Result<Vec<Vec<f64>>> {
    rec.regions.iter().map(|r| project(pca, &r.features)).collect()
}

/// Encodes one image: project, group per cell, VLAD, normalize, concatenate.
///
/// The result has `cells * k * d` components; each per-cell slice has unit
/// norm or is all zeros when no region center fell in the cell.
pub fn encode_pyramid(
    pca: &PcaModel,
    codebook: &Codebook,
    rec: &ImageRecord,
    spec: PyramidSpec,
    norm: Normalization,
) -> Result<EncodedRepresentation> {
    if codebook.dim() != pca.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: pca.output_dim(),
            found: codebook.dim(),
        });
    }
    check_frame(rec)?;
    let projected = project_all(pca, rec)?;

    // slot positions follow the layout: 0 = level 1, 1..5 = level 2, 5..8 = level 3
    let slot_count = spec.cell_count();
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); slot_count];
    for (r, p) in rec.regions.iter().zip(&projected) {
        groups[0].push(p.as_slice());
        if spec.level() >= 2 {
            let cell = assign_cell(2, rec.width, rec.height, r)?;
            groups[1 + cell.index as usize].push(p.as_slice());
        }
        if spec.level() >= 3 {
            let cell = assign_cell(3, rec.width, rec.height, r)?;
            groups[5 + cell.index as usize].push(p.as_slice());
        }
    }

    let mut vector = Vec::with_capacity(EncodedRepresentation::expected_len(
        spec,
        codebook.k(),
        codebook.dim(),
    ));
    for group in &groups {
        let raw = vlad_raw(codebook, group)?;
        let normalized = norm.apply(&raw, codebook.dim());
        vector.extend(normalized.iter().map(|v| *v as f32));
    }
    Ok(EncodedRepresentation {
        image_id: rec.id.clone(),
        spec,
        k: codebook.k(),
        dim: codebook.dim(),
        vector,
        layout: EncodedRepresentation::layout_for(spec, codebook.k(), codebook.dim()),
    })
}

/// Encodes one image with geometry-augmented descriptors and no pyramid:
/// one cell over all regions, vectors of length `k * (d + 3)`.
///
/// The codebook must live in the augmented space, `d + 3`.
pub fn encode_augmented(
    pca: &PcaModel,
    codebook: &Codebook,
    rec: &ImageRecord,
    norm: Normalization,
) -> Result<EncodedRepresentation> {
    if codebook.dim() != pca.output_dim() + 3 {
        return Err(Error::DimensionMismatch {
            expected: pca.output_dim() + 3,
            found: codebook.dim(),
        });
    }
    check_frame(rec)?;
    let augmented: Vec<Vec<f64>> = rec
        .regions
        .iter()
        .map(|r| {
            let p = project(pca, &r.features)?;
            Ok(augment(r, p, rec.width, rec.height)?.into_vec())
        })
        .collect::<Result<_>>()?;
    let raw = vlad_raw(codebook, &augmented)?;
    let normalized = norm.apply(&raw, codebook.dim());
    let spec = PyramidSpec::new(1).expect("level 1 is valid");
    Ok(EncodedRepresentation {
        image_id: rec.id.clone(),
        spec,
        k: codebook.k(),
        dim: codebook.dim(),
        vector: normalized.iter().map(|v| *v as f32).collect(),
        layout: EncodedRepresentation::layout_for(spec, codebook.k(), codebook.dim()),
    })
}

/// Prepends a global image descriptor to an encoded pyramid vector.
pub fn concat_global(enc: &EncodedRepresentation, global: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(global.len() + enc.vector.len());
    out.extend_from_slice(global);
    out.extend_from_slice(&enc.vector);
    out
}

/// Encodes a batch of images in parallel. Output order matches input order
/// and every vector is bit-identical to a sequential run.
pub fn encode_records(
    pca: &PcaModel,
    codebook: &Codebook,
    records: &[ImageRecord],
    spec: PyramidSpec,
    norm: Normalization,
) -> Result<Vec<EncodedRepresentation>> {
    records
        .par_iter()
        .map(|rec| encode_pyramid(pca, codebook, rec, spec, norm))
        .collect()
}

/// How many region centers fall in each cell, in concatenation order.
pub fn cell_region_counts(rec: &ImageRecord, spec: PyramidSpec) -> Result<Vec<(CellId, usize)>> {
    check_frame(rec)?;
    let mut counts: Vec<(CellId, usize)> = cells(spec).into_iter().map(|c| (c, 0)).collect();
    for r in &rec.regions {
        counts[0].1 += 1;
        if spec.level() >= 2 {
            let cell = assign_cell(2, rec.width, rec.height, r)?;
            counts[1 + cell.index as usize].1 += 1;
        }
        if spec.level() >= 3 {
            let cell = assign_cell(3, rec.width, rec.height, r)?;
            counts[5 + cell.index as usize].1 += 1;
        }
    }
    Ok(counts)
}

/// Human-readable dump of an encoding: shape line, then one line per cell
/// with its Euclidean norm.
pub fn describe(enc: &EncodedRepresentation) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "id={} level={} k={} dim={} len={}",
        enc.image_id,
        enc.spec.level(),
        enc.k,
        enc.dim,
        enc.vector.len()
    );
    for slot in &enc.layout {
        let slice = &enc.vector[slot.offset..slot.offset + slot.len];
        let norm = slice.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        let _ = writeln!(
            out,
            "level {} cell {}: norm {:.6}{}",
            slot.level,
            slot.cell,
            norm,
            if norm == 0.0 { " (empty)" } else { "" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn region_at(cx: f64, cy: f64, side: f32, features: Vec<f32>) -> RegionDescriptor {
        RegionDescriptor::new(
            (cx - side as f64 / 2.0) as f32,
            (cy - side as f64 / 2.0) as f32,
            side,
            side,
            features,
        )
    }

    fn identity_pca(dim: usize) -> PcaModel {
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        PcaModel::new(vec![0.0; dim], basis, dim).unwrap()
    }

    #[test]
    fn ssr_of_zero_is_zero() {
        assert_eq!(normalize_ssr(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn ssr_of_symmetric_pair() {
        let out = normalize_ssr(&[1.0, -1.0]);
        let e = 1.0 / 2.0f64.sqrt();
        assert!((out[0] - e).abs() < 1e-12);
        assert!((out[1] + e).abs() < 1e-12);
    }

    #[test]
    fn ssr_hand_example() {
        // ssr(4, -1) = (2, -1), norm sqrt(5)
        let out = normalize_ssr(&[4.0, -1.0]);
        assert!((out[0] - 0.89442719).abs() < 1e-8, "{out:?}");
        assert!((out[1] + 0.44721360).abs() < 1e-8, "{out:?}");
    }

    #[test]
    fn ssr_is_exactly_odd() {
        let v = [3.5, -0.25, 0.0, 1e-8, -7.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let a = normalize_ssr(&v);
        let b = normalize_ssr(&neg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn intra_normalizes_blocks_then_whole() {
        let out = normalize_intra(&[3.0, 4.0, 0.0, 0.0], 2);
        assert!((out[0] - 0.6).abs() < 1e-12);
        assert!((out[1] - 0.8).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[3], 0.0);

        let out = normalize_intra(&[3.0, 4.0, 5.0, 12.0], 2);
        let s = 1.0 / 2.0f64.sqrt();
        assert!((out[0] - 0.6 * s).abs() < 1e-12);
        assert!((out[3] - 12.0 / 13.0 * s).abs() < 1e-12);
        // both halves now carry equal weight
        let h1: f64 = out[..2].iter().map(|x| x * x).sum();
        let h2: f64 = out[2..].iter().map(|x| x * x).sum();
        assert!((h1 - h2).abs() < 1e-12);
    }

    #[test]
    fn cell_assignment_examples() {
        let r = |cx: f64, cy: f64| region_at(cx, cy, 2.0, vec![]);
        // 100x100, level 2
        assert_eq!(assign_cell(2, 100, 100, &r(10.0, 10.0)).unwrap().index, 0);
        assert_eq!(assign_cell(2, 100, 100, &r(60.0, 10.0)).unwrap().index, 1);
        assert_eq!(assign_cell(2, 100, 100, &r(10.0, 60.0)).unwrap().index, 2);
        // boundary center goes to the higher-index side
        assert_eq!(assign_cell(2, 100, 100, &r(50.0, 50.0)).unwrap().index, 3);
        // level 3 thirds of a 90-wide image: [0,30), [30,60), [60,90)
        assert_eq!(assign_cell(3, 90, 90, &r(29.9, 45.0)).unwrap().index, 0);
        assert_eq!(assign_cell(3, 90, 90, &r(30.0, 45.0)).unwrap().index, 1);
        assert_eq!(assign_cell(3, 90, 90, &r(60.0, 45.0)).unwrap().index, 2);
        // center on the right edge clamps into the last third
        assert_eq!(assign_cell(3, 90, 90, &r(89.0, 45.0)).unwrap().index, 2);
        assert_eq!(assign_cell(1, 90, 90, &r(10.0, 10.0)).unwrap().index, 0);
    }

    #[test]
    fn cell_id_ranges_are_enforced() {
        assert!(CellId::new(2, 3).is_ok());
        assert!(CellId::new(2, 4).is_err());
        assert!(CellId::new(3, 3).is_err());
        assert!(CellId::new(4, 0).is_err());
    }

    #[test]
    fn cells_come_in_concatenation_order() {
        let spec = PyramidSpec::new(3).unwrap();
        let got = cells(spec);
        let levels: Vec<(u8, u8)> = got.iter().map(|c| (c.level, c.index)).collect();
        assert_eq!(
            levels,
            vec![(1, 0), (2, 0), (2, 1), (2, 2), (2, 3), (3, 0), (3, 1), (3, 2)]
        );
    }

    fn toy_codebook() -> Codebook {
        Codebook::from_centroids(vec![0.0, 0.0, 10.0, 10.0], 2, 2).unwrap()
    }

    #[test]
    fn vlad_of_a_centroid_is_zero() {
        let cb = toy_codebook();
        let out = vlad_raw(&cb, &[vec![10.0, 10.0]]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn vlad_of_nothing_is_zero() {
        let cb = toy_codebook();
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(vlad_raw(&cb, &empty).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn vlad_matches_per_descriptor_oracle() {
        let cb = toy_codebook();
        let descriptors = vec![vec![1.0, -1.0], vec![9.0, 11.0], vec![2.0, 0.5]];
        // nearest: d0 -> c0, d1 -> c1, d2 -> c0
        let expected = [
            1.0 - 0.0 + (2.0 - 0.0),
            -1.0 - 0.0 + (0.5 - 0.0),
            9.0 - 10.0,
            11.0 - 10.0,
        ];
        let out = vlad_raw(&cb, &descriptors).unwrap();
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn vlad_rejects_wrong_dimension() {
        let cb = toy_codebook();
        assert!(matches!(
            vlad_raw(&cb, &[vec![1.0, 2.0, 3.0]]),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn vlad_is_bitwise_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = Codebook::from_centroids(
            (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            4,
            3,
        )
        .unwrap();
        let mut descriptors: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let a = vlad_raw(&cb, &descriptors).unwrap();
        descriptors.reverse();
        descriptors.swap(0, 7);
        descriptors.swap(3, 15);
        let b = vlad_raw(&cb, &descriptors).unwrap();
        assert_eq!(a, b, "permutation must not change a single bit");
    }

    #[test]
    fn vlad_is_additive_over_region_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cb = Codebook::from_centroids(
            (0..3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            3,
            2,
        )
        .unwrap();
        let first: Vec<Vec<f64>> =
            (0..8).map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let second: Vec<Vec<f64>> =
            (0..5).map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let combined: Vec<Vec<f64>> = first.iter().chain(&second).cloned().collect();
        let sum: Vec<f64> = vlad_raw(&cb, &first)
            .unwrap()
            .iter()
            .zip(vlad_raw(&cb, &second).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        let whole = vlad_raw(&cb, &combined).unwrap();
        for (a, b) in whole.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn augmentation_of_full_frame_is_exactly_zero() {
        let r = RegionDescriptor::new(0.0, 0.0, 640.0, 480.0, vec![]);
        let a = augment(&r, vec![1.0, 2.0], 640, 480).unwrap();
        assert_eq!(a.rel_x, 0.0);
        assert_eq!(a.rel_y, 0.0);
        assert_eq!(a.log_scale, 0.0);
        assert_eq!(a.into_vec(), vec![1.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn augmentation_hand_example() {
        // 100x100 frame, box centered (25, 75) with sides 50: scale 50
        let r = RegionDescriptor::new(0.0, 50.0, 50.0, 50.0, vec![]);
        let a = augment(&r, vec![], 100, 100).unwrap();
        assert!((a.rel_x + 0.25).abs() < 1e-12);
        assert!((a.rel_y - 0.25).abs() < 1e-12);
        assert!((a.log_scale + std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn scene(n: usize, dim: usize, seed: u64) -> ImageRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regions = (0..n)
            .map(|_| {
                let cx = rng.gen_range(8.0..632.0);
                let cy = rng.gen_range(8.0..472.0);
                let features = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                region_at(cx, cy, 16.0, features)
            })
            .collect();
        ImageRecord::new("scene", 640, 480, regions)
    }

    fn fitted_models(dim: usize, k: usize, seed: u64) -> (PcaModel, Codebook) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pca = identity_pca(dim);
        let centroids = (0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (pca, Codebook::from_centroids(centroids, k, dim).unwrap())
    }

    #[test]
    fn encoded_lengths_follow_the_shape_formula() {
        let (pca, cb) = fitted_models(3, 2, 1);
        let rec = scene(12, 3, 2);
        for level in 1..=3u8 {
            let spec = PyramidSpec::new(level).unwrap();
            let enc = encode_pyramid(&pca, &cb, &rec, spec, Normalization::SignedSqrt).unwrap();
            assert_eq!(enc.vector.len(), spec.cell_count() * 2 * 3);
            assert_eq!(enc.layout.len(), spec.cell_count());
        }
    }

    #[test]
    fn every_cell_slice_has_unit_or_zero_norm() {
        let (pca, cb) = fitted_models(3, 2, 3);
        // few regions so some level-3 cells stay empty sometimes
        let rec = scene(2, 3, 4);
        let spec = PyramidSpec::new(3).unwrap();
        for norm in [Normalization::SignedSqrt, Normalization::IntraBlock] {
            let enc = encode_pyramid(&pca, &cb, &rec, spec, norm).unwrap();
            for slot in &enc.layout {
                let slice = &enc.vector[slot.offset..slot.offset + slot.len];
                let n = slice.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-6, "norm {n}");
            }
        }
    }

    #[test]
    fn per_cell_vlad_sums_to_level_one() {
        let (_, cb) = fitted_models(3, 2, 7);
        let rec = scene(30, 3, 8);
        let projected: Vec<Vec<f64>> = rec
            .regions
            .iter()
            .map(|r| r.features.iter().map(|v| *v as f64).collect())
            .collect();
        let whole = vlad_raw(&cb, &projected).unwrap();
        for level in [2u8, 3] {
            let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); 4];
            let mut count = 0;
            for (r, p) in rec.regions.iter().zip(&projected) {
                let cell = assign_cell(level, rec.width, rec.height, r).unwrap();
                groups[cell.index as usize].push(p.as_slice());
                count += 1;
            }
            assert_eq!(count, rec.regions.len());
            let mut sum = vec![0.0f64; whole.len()];
            for group in &groups {
                for (s, v) in sum.iter_mut().zip(vlad_raw(&cb, group).unwrap()) {
                    *s += v;
                }
            }
            for (a, b) in whole.iter().zip(&sum) {
                assert!((a - b).abs() < 1e-9, "level {level}");
            }
        }
    }

    #[test]
    fn encoding_ignores_region_order() {
        let (pca, cb) = fitted_models(4, 3, 9);
        let rec = scene(25, 4, 10);
        let spec = PyramidSpec::new(3).unwrap();
        let a = encode_pyramid(&pca, &cb, &rec, spec, Normalization::SignedSqrt).unwrap();
        let mut shuffled = rec.clone();
        shuffled.regions.reverse();
        shuffled.regions.swap(1, 20);
        let b = encode_pyramid(&pca, &cb, &shuffled, spec, Normalization::SignedSqrt).unwrap();
        assert_eq!(a.vector, b.vector, "region order must not change a single bit");
    }

    #[test]
    fn augmented_encoding_reduces_to_level_one() {
        // all regions cover the full frame, so every appended triple is
        // exactly zero; with centroids zero-padded in those slots the
        // residuals match the plain level-1 encoding componentwise
        let dim = 3;
        let k = 2;
        let (pca, cb) = fitted_models(dim, k, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let regions = (0..6)
            .map(|_| {
                RegionDescriptor::new(
                    0.0,
                    0.0,
                    640.0,
                    480.0,
                    (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                )
            })
            .collect();
        let rec = ImageRecord::new("full", 640, 480, regions);

        let mut padded = Vec::new();
        for j in 0..k {
            padded.extend_from_slice(cb.centroid(j));
            padded.extend_from_slice(&[0.0, 0.0, 0.0]);
        }
        let cb_aug = Codebook::from_centroids(padded, k, dim + 3).unwrap();

        let plain = encode_pyramid(
            &pca,
            &cb,
            &rec,
            PyramidSpec::new(1).unwrap(),
            Normalization::SignedSqrt,
        )
        .unwrap();
        let aug = encode_augmented(&pca, &cb_aug, &rec, Normalization::SignedSqrt).unwrap();
        assert_eq!(aug.vector.len(), k * (dim + 3));
        for j in 0..k {
            let a = &aug.vector[j * (dim + 3)..j * (dim + 3) + dim];
            let p = &plain.vector[j * dim..(j + 1) * dim];
            assert_eq!(a, p);
            assert_eq!(&aug.vector[j * (dim + 3) + dim..(j + 1) * (dim + 3)], &[0.0; 3]);
        }
    }

    #[test]
    fn augmented_codebook_dimension_is_checked() {
        let (pca, cb) = fitted_models(3, 2, 13);
        let rec = scene(4, 3, 14);
        assert!(matches!(
            encode_augmented(&pca, &cb, &rec, Normalization::SignedSqrt),
            Err(Error::DimensionMismatch { expected: 6, found: 3 })
        ));
    }

    #[test]
    fn global_concatenation_lengths() {
        let spec = PyramidSpec::new(2).unwrap();
        let enc = EncodedRepresentation {
            image_id: "x".into(),
            spec,
            k: 4,
            dim: 256,
            vector: vec![0.0; EncodedRepresentation::expected_len(spec, 4, 256)],
            layout: EncodedRepresentation::layout_for(spec, 4, 256),
        };
        assert_eq!(concat_global(&enc, &vec![0.0; 4096]).len(), 9216);
        assert_eq!(concat_global(&enc, &[]), enc.vector);

        let enc8 = EncodedRepresentation {
            image_id: "y".into(),
            spec,
            k: 8,
            dim: 256,
            vector: vec![0.0; EncodedRepresentation::expected_len(spec, 8, 256)],
            layout: EncodedRepresentation::layout_for(spec, 8, 256),
        };
        assert_eq!(concat_global(&enc8, &vec![0.0; 4096]).len(), 14336);
    }

    #[test]
    fn global_comes_first() {
        let spec = PyramidSpec::new(1).unwrap();
        let enc = EncodedRepresentation {
            image_id: "x".into(),
            spec,
            k: 1,
            dim: 2,
            vector: vec![0.5, -0.5],
            layout: EncodedRepresentation::layout_for(spec, 1, 2),
        };
        assert_eq!(concat_global(&enc, &[9.0]), vec![9.0, 0.5, -0.5]);
    }

    #[test]
    fn batch_encoding_matches_sequential() {
        let (pca, cb) = fitted_models(3, 2, 15);
        let records: Vec<ImageRecord> = (0..6).map(|i| scene(10, 3, 100 + i)).collect();
        let spec = PyramidSpec::new(2).unwrap();
        let batch =
            encode_records(&pca, &cb, &records, spec, Normalization::SignedSqrt).unwrap();
        for (rec, enc) in records.iter().zip(&batch) {
            let single =
                encode_pyramid(&pca, &cb, rec, spec, Normalization::SignedSqrt).unwrap();
            assert_eq!(&single, enc);
        }
    }

    #[test]
    fn region_counts_partition_per_level() {
        let rec = scene(40, 2, 16);
        let spec = PyramidSpec::new(3).unwrap();
        let counts = cell_region_counts(&rec, spec).unwrap();
        assert_eq!(counts[0].1, 40);
        let level2: usize = counts[1..5].iter().map(|(_, n)| n).sum();
        let level3: usize = counts[5..].iter().map(|(_, n)| n).sum();
        assert_eq!(level2, 40);
        assert_eq!(level3, 40);
    }

    #[test]
    fn describe_mentions_empty_cells() {
        let (pca, cb) = fitted_models(2, 2, 17);
        // single region in the top-left corner leaves most cells empty
        let rec = ImageRecord::new(
            "corner",
            100,
            100,
            vec![region_at(10.0, 10.0, 4.0, vec![0.3, -0.4])],
        );
        let enc = encode_pyramid(
            &pca,
            &cb,
            &rec,
            PyramidSpec::new(2).unwrap(),
            Normalization::SignedSqrt,
        )
        .unwrap();
        let text = describe(&enc);
        assert!(text.contains("level 2 cell 0: norm 1.000000"), "{text}");
        assert!(text.contains("level 2 cell 3: norm 0.000000 (empty)"), "{text}");
    }
}
