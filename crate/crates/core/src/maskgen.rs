//! Per-patch sinogram masks that make the inversion layer sparse: the
//! learned-activation route (train a dense layer, refine its activation maps)
//! and the deterministic forward-projection route, plus patch tiling and
//! parameter accounting.

use crate::filters::gaussian_blur;
use crate::geom::{fov_pixel_list, ImageGeometry, ImageGrid, Sinogram, SinogramGeometry};
use crate::projector::{forward_project, ProjectorConfig, ProjectorError};
use crate::seeds;
use crate::tensorfile::{self, TensorFileError};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MaskGenError {
    #[error("patch size {size} invalid for a {width}-pixel grid")]
    BadPatchSize { size: usize, width: usize },
    #[error("unknown patch id {0}")]
    UnknownPatch(usize),
    #[error("training needs at least one (sinogram, image) pair")]
    EmptyTraining,
    #[error("training pair {0} has inconsistent geometry")]
    InconsistentPair(usize),
    #[error("atlas does not cover the tiling (geometry mismatch)")]
    AtlasMismatch,
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("threshold input is constant")]
    ConstantInput,
    #[error("threshold input must be nonnegative")]
    NegativeInput,
    #[error("threshold needs at least two values")]
    TooFewValues,
    #[error("masks do not cover tiling: expected {expected} masks, got {got}")]
    MaskCoverage { expected: usize, got: usize },
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
}

/// One tile of the FOV: its pixels (a subset of the FOV pixel list, row-major)
/// and the tile block bounds, half-open in grid coordinates.
#[derive(Debug, Clone)]
pub struct Patch {
    pub patch_id: usize,
    pub pixels: Vec<(usize, usize)>,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Partition of the FOV pixel list into square tiles (clipped to the FOV;
/// empty tiles are dropped).
#[derive(Debug, Clone)]
pub struct PatchTiling {
    pub geometry: ImageGeometry,
    pub patch_size: usize,
    pub patches: Vec<Patch>,
}

pub fn tile_patches(igeom: &ImageGeometry, patch_size: usize) -> Result<PatchTiling, MaskGenError> {
    if patch_size == 0 || patch_size > igeom.width {
        return Err(MaskGenError::BadPatchSize { size: patch_size, width: igeom.width });
    }
    let mut patches = Vec::new();
    let blocks = igeom.width.div_ceil(patch_size);
    for br in 0..blocks {
        for bc in 0..blocks {
            let rows = (br * patch_size, ((br + 1) * patch_size).min(igeom.height));
            let cols = (bc * patch_size, ((bc + 1) * patch_size).min(igeom.width));
            let mut pixels = Vec::new();
            for r in rows.0..rows.1 {
                for c in cols.0..cols.1 {
                    if igeom.in_fov(r, c) {
                        pixels.push((r, c));
                    }
                }
            }
            if !pixels.is_empty() {
                patches.push(Patch { patch_id: patches.len(), pixels, rows, cols });
            }
        }
    }
    Ok(PatchTiling { geometry: *igeom, patch_size, patches })
}

/// Per-pixel weight maps of a trained dense sinogram-to-image layer.
pub struct ActivationAtlas {
    pub igeom: ImageGeometry,
    pub sgeom: SinogramGeometry,
    pub fov_pixels: Vec<(usize, usize)>,
    /// Row-major [fov_pixels.len() x total_bins].
    weights: Vec<f32>,
    /// Grid-shaped lookup: FOV pixel index or -1.
    index: Vec<i64>,
}

impl ActivationAtlas {
    /// Atlas from raw per-pixel weight maps (row-major
    /// [fov_pixels x total_bins]); also the hook for synthetic fixtures.
    pub fn from_weights(igeom: ImageGeometry, sgeom: SinogramGeometry, weights: Vec<f32>) -> Self {
        let fov_pixels = fov_pixel_list(&igeom);
        assert_eq!(weights.len(), fov_pixels.len() * sgeom.total_bins());
        let mut index = vec![-1i64; igeom.width * igeom.height];
        for (i, &(r, c)) in fov_pixels.iter().enumerate() {
            index[r * igeom.width + c] = i as i64;
        }
        Self { igeom, sgeom, fov_pixels, weights, index }
    }

    /// Weight map of one FOV pixel, length total_bins, angle-major.
    pub fn pixel_map(&self, fov_index: usize) -> &[f32] {
        let nb = self.sgeom.total_bins();
        &self.weights[fov_index * nb..(fov_index + 1) * nb]
    }

    pub fn fov_index(&self, row: usize, col: usize) -> Option<usize> {
        let i = self.index[row * self.igeom.width + col];
        (i >= 0).then_some(i as usize)
    }
}

const DENSE_INIT_HALF_WIDTH: f32 = 1e-3;

fn dot_f32(w: &[f32], x: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut wc = w.chunks_exact(4);
    let mut xc = x.chunks_exact(4);
    for (cw, cx) in (&mut wc).zip(&mut xc) {
        acc[0] += (cw[0] * cx[0]) as f64;
        acc[1] += (cw[1] * cx[1]) as f64;
        acc[2] += (cw[2] * cx[2]) as f64;
        acc[3] += (cw[3] * cx[3]) as f64;
    }
    let mut tail = 0.0;
    for (a, b) in wc.remainder().iter().zip(xc.remainder().iter()) {
        tail += (*a * *b) as f64;
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Train a single dense linear map sinogram -> FOV pixels by mini-batch
/// gradient descent on MAE. `lr` is the starting rate; it anneals
/// geometrically to lr/100 over the run, which is what lets the per-pixel
/// maps sharpen (the sign-gradient equilibrium wanders with amplitude
/// proportional to the current rate). The returned per-pixel weight maps are
/// what the mask refinement consumes.
pub fn train_dense_layer(
    pairs: &[(Sinogram, ImageGrid)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ActivationAtlas, MaskGenError> {
    if pairs.is_empty() {
        return Err(MaskGenError::EmptyTraining);
    }
    let sgeom = pairs[0].0.geometry;
    let igeom = pairs[0].1.geometry;
    for (i, (s, img)) in pairs.iter().enumerate() {
        if s.geometry != sgeom || img.geometry != igeom {
            return Err(MaskGenError::InconsistentPair(i));
        }
    }
    let fov = fov_pixel_list(&igeom);
    let npix = fov.len();
    let nbins = sgeom.total_bins();

    // Flatten training data once: f32 is plenty for mask discovery.
    let inputs: Vec<Vec<f32>> = pairs
        .iter()
        .map(|(s, _)| s.values.iter().map(|&v| v as f32).collect())
        .collect();
    let targets: Vec<Vec<f32>> = pairs
        .iter()
        .map(|(_, img)| fov.iter().map(|&(r, c)| img.values[(r, c)] as f32).collect())
        .collect();

    let mut rng = seeds::rng(seed, 3);
    let mut weights: Vec<f32> = (0..npix * nbins)
        .map(|_| rng.gen_range(-DENSE_INIT_HALF_WIDTH..DENSE_INIT_HALF_WIDTH))
        .collect();

    let batch_size = pairs.len().min(16);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut iteration = 0usize;
    let decay = if epochs > 1 { 0.01f64.powf(1.0 / (epochs - 1) as f64) } else { 1.0 };
    for epoch in 0..epochs {
        let epoch_lr = lr * decay.powi(epoch as i32);
        let mut epoch_rng = seeds::rng(seed, 4 + epoch as u64);
        order.shuffle(&mut epoch_rng);
        for batch in order.chunks(batch_size) {
            let scale = epoch_lr / (batch.len() as f64 * npix as f64);
            let loss: f64 = weights
                .par_chunks_mut(nbins)
                .enumerate()
                .map(|(p, row)| {
                    let mut pixel_loss = 0.0f64;
                    let mut residual_signs = [0.0f32; 16];
                    for (bi, &m) in batch.iter().enumerate() {
                        let err = dot_f32(row, &inputs[m]) - targets[m][p] as f64;
                        pixel_loss += err.abs();
                        residual_signs[bi] = err.signum() as f32 * (err != 0.0) as u8 as f32;
                    }
                    for (bi, &m) in batch.iter().enumerate() {
                        let step = (residual_signs[bi] as f64 * scale) as f32;
                        if step != 0.0 {
                            let s = &inputs[m];
                            for (w, x) in row.iter_mut().zip(s.iter()) {
                                *w -= step * *x;
                            }
                        }
                    }
                    pixel_loss
                })
                .sum::<f64>()
                / (batch.len() * npix) as f64;
            if !loss.is_finite() {
                return Err(MaskGenError::Diverged { iteration });
            }
            iteration += 1;
        }
    }
    Ok(ActivationAtlas::from_weights(igeom, sgeom, weights))
}

/// Per-patch boolean selector over sinogram bins. `surviving` holds the true
/// entries as row-major bin indices.
#[derive(Debug, Clone)]
pub struct SinogramMask {
    pub patch_id: usize,
    pub mask: Array2<bool>,
    pub surviving: Vec<usize>,
}

impl SinogramMask {
    fn from_bool(patch_id: usize, mask: Array2<bool>) -> Self {
        let cols = mask.dim().1;
        let surviving = mask
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|((a, b), _)| a * cols + b)
            .collect();
        Self { patch_id, mask, surviving }
    }
}

/// Refinement knobs for the learned-activation route.
#[derive(Debug, Clone, Copy)]
pub struct MaskRefineConfig {
    /// Gaussian smoothing sigma in bins.
    pub gaussian_sigma: f64,
    /// Disk structuring element radius in bins for opening/closing.
    pub disk_radius: usize,
}

impl Default for MaskRefineConfig {
    fn default() -> Self {
        Self { gaussian_sigma: 4.0, disk_radius: 8 }
    }
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offs = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if di * di + dj * dj <= r * r {
                offs.push((di, dj));
            }
        }
    }
    offs
}

fn morph(values: &Array2<f64>, offsets: &[(isize, isize)], erode: bool) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = if erode { f64::INFINITY } else { f64::NEG_INFINITY };
            for &(di, dj) in offsets {
                let rr = r as isize + di;
                let cc = c as isize + dj;
                if rr >= 0 && (rr as usize) < h && cc >= 0 && (cc as usize) < w {
                    let v = values[(rr as usize, cc as usize)];
                    acc = if erode { acc.min(v) } else { acc.max(v) };
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Grayscale opening (erode then dilate).
fn opening(values: &Array2<f64>, offsets: &[(isize, isize)]) -> Array2<f64> {
    morph(&morph(values, offsets, true), offsets, false)
}

/// Grayscale closing (dilate then erode).
fn closing(values: &Array2<f64>, offsets: &[(isize, isize)]) -> Array2<f64> {
    morph(&morph(values, offsets, false), offsets, true)
}

/// Li's iterative minimum cross entropy threshold: fixed point of
/// `t <- (mu_above - mu_below) / (ln mu_above - ln mu_below)`, started from
/// the mean, stopped at |dt| < 1e-6 or 100 iterations.
pub fn li_threshold(values: &[f64]) -> Result<f64, MaskGenError> {
    if values.len() < 2 {
        return Err(MaskGenError::TooFewValues);
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(MaskGenError::NegativeInput);
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(MaskGenError::ConstantInput);
    }
    // Shift so class means are strictly positive under the logarithm.
    let shift = f64::EPSILON;
    let mut t = values.iter().sum::<f64>() / values.len() as f64 + shift;
    for _ in 0..100 {
        let mut below = (0.0f64, 0usize);
        let mut above = (0.0f64, 0usize);
        for &v in values {
            let v = v + shift;
            if v <= t {
                below = (below.0 + v, below.1 + 1);
            } else {
                above = (above.0 + v, above.1 + 1);
            }
        }
        if below.1 == 0 || above.1 == 0 {
            break;
        }
        let mu_b = below.0 / below.1 as f64;
        let mu_a = above.0 / above.1 as f64;
        let next = (mu_a - mu_b) / (mu_a.ln() - mu_b.ln());
        let dt = (next - t).abs();
        t = next;
        if dt < 1e-6 {
            break;
        }
    }
    Ok(t - shift)
}

/// Learned-activation mask for one patch: sum the absolute activation maps of
/// the patch's pixels, smooth, open and close with a disk, then binarize with
/// Li's threshold.
pub fn refine_mask(
    atlas: &ActivationAtlas,
    tiling: &PatchTiling,
    patch_id: usize,
    cfg: &MaskRefineConfig,
) -> Result<SinogramMask, MaskGenError> {
    if atlas.igeom != tiling.geometry {
        return Err(MaskGenError::AtlasMismatch);
    }
    let patch = tiling
        .patches
        .get(patch_id)
        .filter(|p| p.patch_id == patch_id)
        .ok_or(MaskGenError::UnknownPatch(patch_id))?;

    let (na, nb) = (atlas.sgeom.num_angles, atlas.sgeom.num_bins);
    let mut summed = Array2::zeros((na, nb));
    for &(r, c) in &patch.pixels {
        let idx = atlas.fov_index(r, c).ok_or(MaskGenError::AtlasMismatch)?;
        let map = atlas.pixel_map(idx);
        for (dst, &w) in summed.iter_mut().zip(map.iter()) {
            *dst += (w as f64).abs();
        }
    }

    let smoothed = gaussian_blur(&summed, cfg.gaussian_sigma);
    let offsets = disk_offsets(cfg.disk_radius.max(1));
    let cleaned = closing(&opening(&smoothed, &offsets), &offsets);
    let t = li_threshold(cleaned.as_slice().expect("standard layout"))?;
    let mask = cleaned.mapv(|v| v > t);
    Ok(SinogramMask::from_bool(patch_id, mask))
}

/// Geometric mask: bins with nonzero forward projection of the patch's tile
/// block dilated by `buffer` pixels.
pub fn project_mask(
    tiling: &PatchTiling,
    patch_id: usize,
    sgeom: SinogramGeometry,
    buffer: usize,
) -> Result<SinogramMask, MaskGenError> {
    let patch = tiling
        .patches
        .get(patch_id)
        .filter(|p| p.patch_id == patch_id)
        .ok_or(MaskGenError::UnknownPatch(patch_id))?;
    let geom = tiling.geometry;
    let r0 = patch.rows.0.saturating_sub(buffer);
    let r1 = (patch.rows.1 + buffer).min(geom.height);
    let c0 = patch.cols.0.saturating_sub(buffer);
    let c1 = (patch.cols.1 + buffer).min(geom.width);
    let mut indicator = ImageGrid::zeros(geom);
    for r in r0..r1 {
        for c in c0..c1 {
            indicator.values[(r, c)] = 1.0;
        }
    }
    let s = forward_project(&indicator, sgeom, ProjectorConfig::default())?;
    let mask = s.values.mapv(|v| v > 0.0);
    Ok(SinogramMask::from_bool(patch_id, mask))
}

/// Projection masks for every patch, in patch order.
pub fn project_masks(
    tiling: &PatchTiling,
    sgeom: SinogramGeometry,
    buffer: usize,
) -> Result<Vec<SinogramMask>, MaskGenError> {
    (0..tiling.patches.len())
        .into_par_iter()
        .map(|id| project_mask(tiling, id, sgeom, buffer))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PatchParams {
    pub patch_id: usize,
    pub surviving_bins: usize,
    pub pixels: usize,
    pub params: u64,
}

#[derive(Debug, Clone)]
pub struct ParamAccounting {
    pub per_patch: Vec<PatchParams>,
    pub total_masked: u64,
    /// Single dense layer: total bins x FOV pixels, no bias terms.
    pub dense: u64,
    pub mask_count: usize,
}

/// Weight accounting for a masked layer versus the dense single layer.
pub fn count_parameters(
    tiling: &PatchTiling,
    masks: &[SinogramMask],
) -> Result<ParamAccounting, MaskGenError> {
    if masks.len() != tiling.patches.len() {
        return Err(MaskGenError::MaskCoverage {
            expected: tiling.patches.len(),
            got: masks.len(),
        });
    }
    let mut per_patch = Vec::with_capacity(masks.len());
    let mut total = 0u64;
    let mut fov_pixels = 0u64;
    let mut total_bins = 0usize;
    for (patch, mask) in tiling.patches.iter().zip(masks.iter()) {
        if mask.patch_id != patch.patch_id {
            return Err(MaskGenError::UnknownPatch(mask.patch_id));
        }
        total_bins = mask.mask.len();
        let params = mask.surviving.len() as u64 * patch.pixels.len() as u64;
        per_patch.push(PatchParams {
            patch_id: patch.patch_id,
            surviving_bins: mask.surviving.len(),
            pixels: patch.pixels.len(),
            params,
        });
        total += params;
        fov_pixels += patch.pixels.len() as u64;
    }
    Ok(ParamAccounting {
        per_patch,
        total_masked: total,
        dense: total_bins as u64 * fov_pixels,
        mask_count: masks.len(),
    })
}

/// Persist masks as a [num_patches x max_surviving_bins] index tensor padded
/// with -1, plus a CSV manifest (patch_id, bin count, parameter count).
pub fn write_masks(
    tensor_path: &Path,
    csv_path: &Path,
    tiling: &PatchTiling,
    masks: &[SinogramMask],
) -> Result<(), MaskGenError> {
    let accounting = count_parameters(tiling, masks)?;
    let max_bins = masks.iter().map(|m| m.surviving.len()).max().unwrap_or(0);
    let mut payload = vec![-1.0f32; masks.len() * max_bins];
    for (i, mask) in masks.iter().enumerate() {
        for (j, &bin) in mask.surviving.iter().enumerate() {
            payload[i * max_bins + j] = bin as f32;
        }
    }
    tensorfile::write_tensor(tensor_path, &[masks.len(), max_bins.max(1)], &{
        if max_bins == 0 {
            vec![-1.0; masks.len()]
        } else {
            payload
        }
    })?;
    let mut csv = String::from("patch_id,surviving_bins,pixels,params\n");
    for p in &accounting.per_patch {
        csv.push_str(&format!("{},{},{},{}\n", p.patch_id, p.surviving_bins, p.pixels, p.params));
    }
    std::fs::write(csv_path, csv).map_err(|e| {
        MaskGenError::TensorFile(TensorFileError::Io {
            path: csv_path.display().to_string(),
            source: e,
        })
    })?;
    Ok(())
}

/// Load masks written by [`write_masks`]. Row index is the patch id.
pub fn read_masks(
    tensor_path: &Path,
    sgeom: SinogramGeometry,
) -> Result<Vec<SinogramMask>, MaskGenError> {
    let (dims, values) = tensorfile::read_tensor(tensor_path)?;
    if dims.len() != 2 {
        return Err(MaskGenError::TensorFile(TensorFileError::PayloadMismatch {
            expected: 2,
            actual: dims.len(),
            dims,
        }));
    }
    let (n, width) = (dims[0], dims[1]);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let mut mask = Array2::from_elem((sgeom.num_angles, sgeom.num_bins), false);
        for j in 0..width {
            let v = values[i * width + j];
            if v >= 0.0 {
                let bin = v as usize;
                mask[(bin / sgeom.num_bins, bin % sgeom.num_bins)] = true;
            }
        }
        masks.push(SinogramMask::from_bool(i, mask));
    }
    Ok(masks)
}
