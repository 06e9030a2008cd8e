//! PCA dimensionality reduction for region descriptors.
//!
//! Descriptors arrive high-dimensional; the encoder wants them small enough
//! that a VLAD block per pyramid cell stays compact. [`fit_pca`] learns the
//! projection from a (typically reservoir-sampled) subset of regions,
//! [`project`] applies it, and [`sample_regions`] draws the training subset
//! from a dataset stream in a single pass.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::ImageRecord;
use crate::error::{Error, Result};

/// Descriptors sampled for PCA training by default; a full-scale training
/// run draws this many regions from the dataset stream.
pub const DEFAULT_SAMPLE_CAP: usize = 250_000;

/// Tolerance on `|<row_i, row_j>| - delta_ij` for the basis of a valid model.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

/// Mean vector and orthonormal projection basis mapping dimension `D` to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    input_dim: usize,
    output_dim: usize,
    mean: Vec<f64>,
    /// Row-major `output_dim x input_dim`; rows are the principal directions
    /// in descending order of explained variance.
    basis: Vec<f64>,
}

impl PcaModel {
    /// Builds a model from parts, checking shapes and basis orthonormality.
    pub fn new(mean: Vec<f64>, basis: Vec<f64>, output_dim: usize) -> Result<Self> {
        let input_dim = mean.len();
        if output_dim == 0 || input_dim == 0 {
            return Err(Error::InvalidInput("model dimensions must be positive".into()));
        }
        if output_dim > input_dim {
            return Err(Error::InvalidInput(format!(
                "output dimension {output_dim} exceeds input dimension {input_dim}"
            )));
        }
        if basis.len() != output_dim * input_dim {
            return Err(Error::DimensionMismatch {
                expected: output_dim * input_dim,
                found: basis.len(),
            });
        }
        let model = Self { input_dim, output_dim, mean, basis };
        for i in 0..output_dim {
            for j in i..output_dim {
                let dot: f64 = model
                    .basis_row(i)
                    .iter()
                    .zip(model.basis_row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > ORTHONORMALITY_TOL {
                    return Err(Error::InvalidInput(format!(
                        "basis rows {i} and {j} are not orthonormal (inner product {dot})"
                    )));
                }
            }
        }
        Ok(model)
    }

    /// Exact restore from persisted coefficients; shapes are trusted.
    pub(crate) fn from_raw(mean: Vec<f64>, basis: Vec<f64>, output_dim: usize) -> Self {
        let input_dim = mean.len();
        debug_assert_eq!(basis.len(), output_dim * input_dim);
        Self { input_dim, output_dim, mean, basis }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Flat row-major basis, `output_dim x input_dim`.
    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn basis_row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// A model that keeps only the first `dim` principal directions.
    ///
    /// Because rows are ordered by descending variance, truncating a wider
    /// fit spans the same subspace a narrower fit of the same sample would.
    pub fn truncate(&self, dim: usize) -> Result<Self> {
        if dim == 0 || dim > self.output_dim {
            return Err(Error::InvalidInput(format!(
                "cannot truncate a {}-dimensional model to {dim}",
                self.output_dim
            )));
        }
        Ok(Self {
            input_dim: self.input_dim,
            output_dim: dim,
            mean: self.mean.clone(),
            basis: self.basis[..dim * self.input_dim].to_vec(),
        })
    }
}

/// Fits a PCA model on a sample of descriptors.
///
/// The mean is the arithmetic mean of the sample; the basis rows are the top
/// `dim` principal directions by descending eigenvalue, obtained from an SVD
/// of the mean-centered sample matrix. Each row's sign is fixed so that its
/// largest-magnitude component is positive, which makes fits reproducible
/// across runs and platforms.
pub fn fit_pca<S: AsRef<[f32]>>(sample: &[S], dim: usize) -> Result<PcaModel> {
    if sample.is_empty() {
        return Err(Error::SampleTooSmall { sample: 0, dim });
    }
    if dim == 0 {
        return Err(Error::InvalidInput("target dimension must be positive".into()));
    }
    let n = sample.len();
    let input_dim = sample[0].as_ref().len();
    for row in sample {
        if row.as_ref().len() != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                found: row.as_ref().len(),
            });
        }
    }
    if n < dim || input_dim < dim {
        return Err(Error::SampleTooSmall { sample: n.min(input_dim), dim });
    }

    let mut mean = vec![0.0f64; input_dim];
    for row in sample {
        for (m, v) in mean.iter_mut().zip(row.as_ref()) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let centered = DMatrix::from_fn(n, input_dim, |i, j| sample[i].as_ref()[j] as f64 - mean[j]);

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("svd requested right singular vectors");
    let singular = &svd.singular_values;

    let scale = 1.0 + mean.iter().fold(0.0f64, |a, m| a.max(m.abs()));
    if singular.iter().fold(0.0f64, |a, s| a.max(*s)) <= 1e-12 * scale * (n as f64).sqrt() {
        return Err(Error::DegenerateCovariance);
    }

    // nalgebra sorts descending already; make the ordering explicit and
    // deterministic under ties so the top-dim choice never shifts.
    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&a, &b| singular[b].total_cmp(&singular[a]).then(a.cmp(&b)));

    let mut basis = Vec::with_capacity(dim * input_dim);
    for &idx in order.iter().take(dim) {
        let mut row: Vec<f64> = (0..input_dim).map(|j| v_t[(idx, j)]).collect();
        fix_row_sign(&mut row);
        basis.extend_from_slice(&row);
    }

    Ok(PcaModel::from_raw(mean, basis, dim))
}

/// Flips a direction so its largest-magnitude component is positive.
fn fix_row_sign(row: &mut [f64]) {
    let mut lead = 0;
    for (j, v) in row.iter().enumerate() {
        if v.abs() > row[lead].abs() {
            lead = j;
        }
    }
    if row[lead] < 0.0 {
        for v in row.iter_mut() {
            *v = -*v;
        }
    }
}

/// Projects a descriptor: `basis * (x - mean)`.
pub fn project(model: &PcaModel, x: &[f32]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim {
        return Err(Error::DimensionMismatch { expected: model.input_dim, found: x.len() });
    }
    let centered: Vec<f64> = x
        .iter()
        .zip(model.mean())
        .map(|(v, m)| *v as f64 - m)
        .collect();
    Ok((0..model.output_dim)
        .map(|i| {
            model
                .basis_row(i)
                .iter()
                .zip(&centered)
                .map(|(b, c)| b * c)
                .sum()
        })
        .collect())
}

/// Maps a projected vector back into descriptor space: `mean + basis^T * y`.
pub fn reconstruct(model: &PcaModel, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.output_dim {
        return Err(Error::DimensionMismatch { expected: model.output_dim, found: y.len() });
    }
    let mut x = model.mean().to_vec();
    for (i, yi) in y.iter().enumerate() {
        for (xj, bj) in x.iter_mut().zip(model.basis_row(i)) {
            *xj += yi * bj;
        }
    }
    Ok(x)
}

/// Draws a uniform sample of up to `cap` items from a fallible stream in one
/// pass (reservoir sampling). The first `cap` items fill the reservoir in
/// order; each later item replaces a uniformly chosen slot with probability
/// `cap / items seen so far`. Deterministic for a fixed seed and stream
/// order; errors from the stream propagate immediately.
pub fn sample_stream<T, I>(items: I, cap: usize, seed: u64) -> Result<Vec<T>>
where
    I: IntoIterator<Item = Result<T>>,
{
    if cap == 0 {
        return Err(Error::InvalidInput("sample cap must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<T> = Vec::new();
    let mut seen: u64 = 0;
    for item in items {
        let item = item?;
        if (reservoir.len() as u64) < cap as u64 {
            reservoir.push(item);
        } else {
            let j = rng.gen_range(0..=seen);
            if j < cap as u64 {
                reservoir[j as usize] = item;
            }
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(reservoir)
}

/// Samples up to `cap` region descriptors from a record stream.
///
/// Returns exactly `min(cap, total regions)` descriptors, deterministically
/// for a fixed seed and stream order.
pub fn sample_regions<I>(records: I, cap: usize, seed: u64) -> Result<Vec<Vec<f32>>>
where
    I: IntoIterator<Item = Result<ImageRecord>>,
{
    let flattened = records.into_iter().flat_map(|record| match record {
        Ok(record) => record
            .regions
            .into_iter()
            .map(|region| Ok(region.features))
            .collect::<Vec<_>>(),
        Err(e) => vec![Err(e)],
    });
    sample_stream(flattened, cap, seed)
}
