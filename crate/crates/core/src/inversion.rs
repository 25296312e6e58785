//! The Radon inversion layer: independent per-patch linear maps from each
//! patch's surviving sinogram bins to its pixels, with analytic gradients,
//! Adam updates, and the cyclic learning-rate schedule.
//!
//! Weights and optimizer moments are stored as f32 so checkpoints round-trip
//! bit-exactly; arithmetic on them runs in f64.

use crate::geom::{ImageGeometry, ImageGrid, Sinogram, SinogramGeometry};
use crate::maskgen::{self, MaskGenError, PatchTiling, SinogramMask};
use crate::seeds;
use crate::tensorfile::{self, TensorFileError};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum InversionError {
    #[error("mask count {got} does not match tiling ({expected} patches)")]
    MaskCount { expected: usize, got: usize },
    #[error("patch {0} has an empty mask")]
    EmptyMask(usize),
    #[error("mask shape does not match sinogram geometry")]
    MaskShape,
    #[error("sinogram geometry does not match layer")]
    GeometryMismatch,
    #[error("upstream gradient shape mismatch")]
    UpstreamShape,
    #[error("gradient shape does not match layer weights")]
    GradientShape,
    #[error("non-finite gradient in patch {patch_id}")]
    NonFiniteGradient { patch_id: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error(transparent)]
    MaskGen(#[from] MaskGenError),
    #[error(transparent)]
    Geometry(#[from] crate::geom::GeometryError),
}

/// Per-patch dense weight matrices [patch pixels x surviving bins], no bias:
/// the Radon inverse is linear and zero must map to zero.
pub struct InversionLayer {
    pub tiling: PatchTiling,
    pub sgeom: SinogramGeometry,
    pub masks: Vec<SinogramMask>,
    /// Row-major [pixels x surviving bins] per patch.
    pub weights: Vec<Vec<f32>>,
}

impl InversionLayer {
    /// Near-zero init: zero-mean uniform with half-width 1e-4/sqrt(surviving
    /// bins) per patch, derived per patch id so initialization is
    /// order-independent. The map is linear, so large random init buys
    /// nothing and its out-of-span component never trains away; it only
    /// floors the held-out error.
    pub fn new(
        tiling: PatchTiling,
        sgeom: SinogramGeometry,
        masks: Vec<SinogramMask>,
        seed: u64,
    ) -> Result<Self, InversionError> {
        validate_masks(&tiling, sgeom, &masks)?;
        let weights = tiling
            .patches
            .iter()
            .zip(masks.iter())
            .map(|(patch, mask)| {
                let n = patch.pixels.len() * mask.surviving.len();
                let half_width = 1e-4 / (mask.surviving.len() as f64).sqrt();
                let mut rng = seeds::rng(seed, 10_000 + patch.patch_id as u64);
                (0..n).map(|_| rng.gen_range(-half_width..half_width) as f32).collect()
            })
            .collect();
        Ok(Self { tiling, sgeom, masks, weights })
    }

    pub fn zeroed(
        tiling: PatchTiling,
        sgeom: SinogramGeometry,
        masks: Vec<SinogramMask>,
    ) -> Result<Self, InversionError> {
        validate_masks(&tiling, sgeom, &masks)?;
        let weights = tiling
            .patches
            .iter()
            .zip(masks.iter())
            .map(|(p, m)| vec![0.0f32; p.pixels.len() * m.surviving.len()])
            .collect();
        Ok(Self { tiling, sgeom, masks, weights })
    }

    pub fn igeom(&self) -> ImageGeometry {
        self.tiling.geometry
    }

    /// Multiply-accumulate count of one forward pass: 2 * sum |bins|*|pixels|.
    pub fn flops_per_slice(&self) -> u64 {
        self.tiling
            .patches
            .iter()
            .zip(self.masks.iter())
            .map(|(p, m)| 2 * (p.pixels.len() * m.surviving.len()) as u64)
            .sum()
    }

    pub fn parameter_count(&self) -> u64 {
        self.weights.iter().map(|w| w.len() as u64).sum()
    }
}

fn validate_masks(
    tiling: &PatchTiling,
    sgeom: SinogramGeometry,
    masks: &[SinogramMask],
) -> Result<(), InversionError> {
    if masks.len() != tiling.patches.len() {
        return Err(InversionError::MaskCount { expected: tiling.patches.len(), got: masks.len() });
    }
    for (patch, mask) in tiling.patches.iter().zip(masks.iter()) {
        if mask.mask.dim() != (sgeom.num_angles, sgeom.num_bins) {
            return Err(InversionError::MaskShape);
        }
        if mask.surviving.is_empty() {
            return Err(InversionError::EmptyMask(patch.patch_id));
        }
    }
    Ok(())
}

fn dot_w_g(w: &[f32], g: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut wc = w.chunks_exact(4);
    let mut gc = g.chunks_exact(4);
    for (cw, cg) in (&mut wc).zip(&mut gc) {
        acc[0] += cw[0] as f64 * cg[0];
        acc[1] += cw[1] as f64 * cg[1];
        acc[2] += cw[2] as f64 * cg[2];
        acc[3] += cw[3] as f64 * cg[3];
    }
    let mut tail = 0.0;
    for (a, b) in wc.remainder().iter().zip(gc.remainder().iter()) {
        tail += *a as f64 * *b;
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// For each patch: gather surviving bins, multiply by the weight matrix,
/// scatter into the patch pixels. Pixels outside the FOV stay zero.
pub fn layer_forward(layer: &InversionLayer, s: &Sinogram) -> Result<ImageGrid, InversionError> {
    if s.geometry != layer.sgeom {
        return Err(InversionError::GeometryMismatch);
    }
    let flat = s.values.as_slice().expect("standard layout");
    let per_patch: Vec<Vec<f64>> = layer
        .tiling
        .patches
        .par_iter()
        .zip(layer.weights.par_iter())
        .zip(layer.masks.par_iter())
        .map(|((patch, weights), mask)| {
            let gathered: Vec<f64> = mask.surviving.iter().map(|&b| flat[b]).collect();
            let nb = gathered.len();
            let mut out = vec![0.0f64; patch.pixels.len()];
            if out.len() * nb >= 1 << 21 {
                out.par_chunks_mut(64).enumerate().for_each(|(chunk, block)| {
                    for (i, o) in block.iter_mut().enumerate() {
                        let row = chunk * 64 + i;
                        *o = dot_w_g(&weights[row * nb..(row + 1) * nb], &gathered);
                    }
                });
            } else {
                for (row, o) in out.iter_mut().enumerate() {
                    *o = dot_w_g(&weights[row * nb..(row + 1) * nb], &gathered);
                }
            }
            out
        })
        .collect();

    let mut img = ImageGrid::zeros(layer.igeom());
    for (patch, values) in layer.tiling.patches.iter().zip(per_patch.iter()) {
        for (&(r, c), &v) in patch.pixels.iter().zip(values.iter()) {
            img.values[(r, c)] = v;
        }
    }
    Ok(img)
}

/// Forward passes for a whole mini-batch. Each weight row is streamed once
/// for all samples, which matters when the weight matrices outgrow cache;
/// per-sample outputs are bit-identical to [`layer_forward`].
pub fn layer_forward_batch(
    layer: &InversionLayer,
    sinos: &[&Sinogram],
) -> Result<Vec<ImageGrid>, InversionError> {
    for s in sinos {
        if s.geometry != layer.sgeom {
            return Err(InversionError::GeometryMismatch);
        }
    }
    let b = sinos.len();
    let per_patch: Vec<Vec<Vec<f64>>> = layer
        .tiling
        .patches
        .par_iter()
        .zip(layer.weights.par_iter())
        .zip(layer.masks.par_iter())
        .map(|((patch, weights), mask)| {
            let nb = mask.surviving.len();
            let gathered: Vec<Vec<f64>> = sinos
                .iter()
                .map(|s| {
                    let flat = s.values.as_slice().expect("standard layout");
                    mask.surviving.iter().map(|&bin| flat[bin]).collect()
                })
                .collect();
            let npix = patch.pixels.len();
            let mut out = vec![0.0f64; npix * b];
            out.par_chunks_mut(64 * b.max(1)).enumerate().for_each(|(chunk, block)| {
                for (i, row_out) in block.chunks_mut(b).enumerate() {
                    let row = chunk * 64 + i;
                    let w = &weights[row * nb..(row + 1) * nb];
                    for (s, o) in row_out.iter_mut().enumerate() {
                        *o = dot_w_g(w, &gathered[s]);
                    }
                }
            });
            (0..b).map(|s| (0..npix).map(|row| out[row * b + s]).collect()).collect()
        })
        .collect();

    let mut images: Vec<ImageGrid> = (0..b).map(|_| ImageGrid::zeros(layer.igeom())).collect();
    for (patch, outputs) in layer.tiling.patches.iter().zip(per_patch.iter()) {
        for (s, values) in outputs.iter().enumerate() {
            for (&(r, c), &v) in patch.pixels.iter().zip(values.iter()) {
                images[s].values[(r, c)] = v;
            }
        }
    }
    Ok(images)
}

/// Gradient buffers shaped like the layer weights.
pub fn zero_gradients(layer: &InversionLayer) -> Vec<Vec<f64>> {
    layer.weights.iter().map(|w| vec![0.0f64; w.len()]).collect()
}

/// Accumulate the weight gradient for one (sinogram, upstream) pair:
/// per patch the outer product of the upstream patch pixels with the gathered
/// bins. Exact; no approximation.
pub fn accumulate_gradients(
    layer: &InversionLayer,
    s: &Sinogram,
    upstream: &Array2<f64>,
    grads: &mut [Vec<f64>],
) -> Result<(), InversionError> {
    if s.geometry != layer.sgeom {
        return Err(InversionError::GeometryMismatch);
    }
    let igeom = layer.igeom();
    if upstream.dim() != (igeom.height, igeom.width) {
        return Err(InversionError::UpstreamShape);
    }
    if grads.len() != layer.weights.len() {
        return Err(InversionError::GradientShape);
    }
    let flat = s.values.as_slice().expect("standard layout");
    layer
        .tiling
        .patches
        .par_iter()
        .zip(layer.masks.par_iter())
        .zip(grads.par_iter_mut())
        .try_for_each(|((patch, mask), grad)| {
            if grad.len() != patch.pixels.len() * mask.surviving.len() {
                return Err(InversionError::GradientShape);
            }
            let gathered: Vec<f64> = mask.surviving.iter().map(|&b| flat[b]).collect();
            let nb = gathered.len();
            for (row, &(r, c)) in patch.pixels.iter().enumerate() {
                let up = upstream[(r, c)];
                if up != 0.0 {
                    let dst = &mut grad[row * nb..(row + 1) * nb];
                    for (d, &g) in dst.iter_mut().zip(gathered.iter()) {
                        *d += up * g;
                    }
                }
            }
            Ok(())
        })
}

/// Weight gradients for a single upstream image.
pub fn layer_backward(
    layer: &InversionLayer,
    s: &Sinogram,
    upstream: &Array2<f64>,
) -> Result<Vec<Vec<f64>>, InversionError> {
    let mut grads = zero_gradients(layer);
    accumulate_gradients(layer, s, upstream, &mut grads)?;
    Ok(grads)
}

/// Accumulate gradients for a whole mini-batch. Each weight row is updated by
/// one task in sample order, so the result is schedule-independent and rows
/// stay cache-resident across samples.
pub fn accumulate_batch_gradients(
    layer: &InversionLayer,
    samples: &[(&Sinogram, &Array2<f64>)],
    grads: &mut [Vec<f64>],
) -> Result<(), InversionError> {
    let igeom = layer.igeom();
    for (s, upstream) in samples {
        if s.geometry != layer.sgeom {
            return Err(InversionError::GeometryMismatch);
        }
        if upstream.dim() != (igeom.height, igeom.width) {
            return Err(InversionError::UpstreamShape);
        }
    }
    if grads.len() != layer.weights.len() {
        return Err(InversionError::GradientShape);
    }
    layer
        .tiling
        .patches
        .par_iter()
        .zip(layer.masks.par_iter())
        .zip(grads.par_iter_mut())
        .try_for_each(|((patch, mask), grad)| {
            let nb = mask.surviving.len();
            if grad.len() != patch.pixels.len() * nb {
                return Err(InversionError::GradientShape);
            }
            let gathered: Vec<Vec<f64>> = samples
                .iter()
                .map(|(s, _)| {
                    let flat = s.values.as_slice().expect("standard layout");
                    mask.surviving.iter().map(|&b| flat[b]).collect()
                })
                .collect();
            let ups: Vec<Vec<f64>> = samples
                .iter()
                .map(|(_, up)| patch.pixels.iter().map(|&(r, c)| up[(r, c)]).collect())
                .collect();
            grad.par_chunks_mut(nb).enumerate().for_each(|(row, dst)| {
                for (g, up) in gathered.iter().zip(ups.iter()) {
                    let u = up[row];
                    if u != 0.0 {
                        for (d, &x) in dst.iter_mut().zip(g.iter()) {
                            *d += u * x;
                        }
                    }
                }
            });
            Ok(())
        })
}

/// Adam moments per weight plus the shared step counter.
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(layer: &InversionLayer) -> Self {
        Self {
            m: layer.weights.iter().map(|w| vec![0.0f32; w.len()]).collect(),
            v: layer.weights.iter().map(|w| vec![0.0f32; w.len()]).collect(),
            t: 0,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Standard bias-corrected Adam update.
pub fn adam_step(
    state: &mut AdamState,
    layer: &mut InversionLayer,
    grads: &[Vec<f64>],
    lr: f64,
) -> Result<(), InversionError> {
    if grads.len() != layer.weights.len() {
        return Err(InversionError::GradientShape);
    }
    for (patch, grad) in layer.tiling.patches.iter().zip(grads.iter()) {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(InversionError::NonFiniteGradient { patch_id: patch.patch_id });
        }
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let eps = state.epsilon;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    layer
        .weights
        .par_iter_mut()
        .zip(state.m.par_iter_mut())
        .zip(state.v.par_iter_mut())
        .zip(grads.par_iter())
        .for_each(|(((w, m), v), g)| {
            w.par_chunks_mut(1 << 16)
                .zip(m.par_chunks_mut(1 << 16))
                .zip(v.par_chunks_mut(1 << 16))
                .zip(g.par_chunks(1 << 16))
                .for_each(|(((wc, mc), vc), gc)| {
                    for i in 0..wc.len() {
                        let gi = gc[i];
                        let mi = b1 * mc[i] as f64 + (1.0 - b1) * gi;
                        let vi = b2 * vc[i] as f64 + (1.0 - b2) * gi * gi;
                        mc[i] = mi as f32;
                        vc[i] = vi as f32;
                        let m_hat = mi / bc1;
                        let v_hat = vi / bc2;
                        wc[i] = (wc[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                    }
                });
        });
    Ok(())
}

/// Fused backward + Adam over a mini-batch: each weight row's batch gradient
/// is accumulated in a worker-local buffer and consumed immediately, so the
/// full gradient never touches memory. Arithmetic per element matches
/// [`accumulate_batch_gradients`] followed by [`adam_step`] bit for bit.
pub fn adam_batch_step(
    state: &mut AdamState,
    layer: &mut InversionLayer,
    samples: &[(&Sinogram, &Array2<f64>)],
    lr: f64,
) -> Result<(), InversionError> {
    let igeom = layer.igeom();
    for (s, upstream) in samples {
        if s.geometry != layer.sgeom {
            return Err(InversionError::GeometryMismatch);
        }
        if upstream.dim() != (igeom.height, igeom.width) {
            return Err(InversionError::UpstreamShape);
        }
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let eps = state.epsilon;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    layer
        .tiling
        .patches
        .par_iter()
        .zip(layer.masks.par_iter())
        .zip(layer.weights.par_iter_mut())
        .zip(state.m.par_iter_mut().zip(state.v.par_iter_mut()))
        .try_for_each(|(((patch, mask), weights), (m, v))| {
            let nb = mask.surviving.len();
            let gathered: Vec<Vec<f64>> = samples
                .iter()
                .map(|(s, _)| {
                    let flat = s.values.as_slice().expect("standard layout");
                    mask.surviving.iter().map(|&bin| flat[bin]).collect()
                })
                .collect();
            let ups: Vec<Vec<f64>> = samples
                .iter()
                .map(|(_, up)| patch.pixels.iter().map(|&(r, c)| up[(r, c)]).collect())
                .collect();
            weights
                .par_chunks_mut(nb)
                .zip(m.par_chunks_mut(nb).zip(v.par_chunks_mut(nb)))
                .enumerate()
                .try_for_each_init(
                    || vec![0.0f64; nb],
                    |buf, (row, (w, (mr, vr)))| {
                        buf.fill(0.0);
                        for (g, up) in gathered.iter().zip(ups.iter()) {
                            let u = up[row];
                            if u != 0.0 {
                                for (d, &x) in buf.iter_mut().zip(g.iter()) {
                                    *d += u * x;
                                }
                            }
                        }
                        if !buf.iter().all(|g| g.is_finite()) {
                            return Err(InversionError::NonFiniteGradient {
                                patch_id: patch.patch_id,
                            });
                        }
                        for i in 0..nb {
                            let gi = buf[i];
                            let mi = b1 * mr[i] as f64 + (1.0 - b1) * gi;
                            let vi = b2 * vr[i] as f64 + (1.0 - b2) * gi * gi;
                            mr[i] = mi as f32;
                            vr[i] = vi as f32;
                            let m_hat = mi / bc1;
                            let v_hat = vi / bc2;
                            w[i] = (w[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                        }
                        Ok(())
                    },
                )
        })
}

/// Cyclic learning-rate schedule: a triangular wave between the bounds with
/// exponentially decaying amplitude.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerConfig {
    pub eta_min: f64,
    pub eta_max: f64,
    pub period: u64,
    pub decay: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { eta_min: 0.5e-5, eta_max: 9.0e-5, period: 1000, decay: 0.99995 }
    }
}

/// eta(k) = Lambda(k) * (eta_max - eta_min) * decay^k + eta_min with
/// Lambda(k) = 2*|k/period - floor(k/period + 1/2)|.
pub fn learning_rate(k: u64, cfg: &SchedulerConfig) -> f64 {
    let x = k as f64 / cfg.period as f64;
    let lambda = 2.0 * (x - (x + 0.5).floor()).abs();
    lambda * (cfg.eta_max - cfg.eta_min) * cfg.decay.powf(k as f64) + cfg.eta_min
}

// ---- checkpointing ----------------------------------------------------------

fn write_kv(path: &Path, pairs: &[(&str, String)]) -> Result<(), InversionError> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(path, text).map_err(|e| {
        InversionError::TensorFile(TensorFileError::Io { path: path.display().to_string(), source: e })
    })
}

fn read_kv(path: &Path) -> Result<std::collections::HashMap<String, String>, InversionError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        InversionError::TensorFile(TensorFileError::Io { path: path.display().to_string(), source: e })
    })?;
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(',') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    Ok(map)
}

/// Persist the layer: geometry/tiling manifest, mask index tensor, and one
/// weight tensor per patch.
pub fn save_layer(dir: &Path, layer: &InversionLayer) -> Result<(), InversionError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        InversionError::TensorFile(TensorFileError::Io { path: dir.display().to_string(), source: e })
    })?;
    let g = layer.igeom();
    write_kv(
        &dir.join("layer.csv"),
        &[
            ("width", g.width.to_string()),
            ("pixel_size", format!("{:?}", g.pixel_size)),
            ("fov_radius", format!("{:?}", g.fov_radius)),
            ("num_angles", layer.sgeom.num_angles.to_string()),
            ("num_bins", layer.sgeom.num_bins.to_string()),
            ("bin_spacing", format!("{:?}", layer.sgeom.bin_spacing)),
            ("patch_size", layer.tiling.patch_size.to_string()),
            ("num_patches", layer.tiling.patches.len().to_string()),
        ],
    )?;
    maskgen::write_masks(&dir.join("masks.dpt"), &dir.join("masks.csv"), &layer.tiling, &layer.masks)?;
    for (patch, weights) in layer.tiling.patches.iter().zip(layer.weights.iter()) {
        let rows = patch.pixels.len();
        let cols = weights.len() / rows.max(1);
        tensorfile::write_tensor(
            &dir.join(format!("weights_{:04}.dpt", patch.patch_id)),
            &[rows, cols],
            weights,
        )?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(
    map: &std::collections::HashMap<String, String>,
    key: &str,
) -> Result<T, InversionError> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| InversionError::BadCheckpoint(format!("missing or bad key {key}")))
}

/// Load a layer written by [`save_layer`].
pub fn load_layer(dir: &Path) -> Result<InversionLayer, InversionError> {
    let kv = read_kv(&dir.join("layer.csv"))?;
    let width: usize = parse(&kv, "width")?;
    let igeom = ImageGeometry::new(width, width, parse(&kv, "pixel_size")?, parse(&kv, "fov_radius")?)?;
    let sgeom = SinogramGeometry::new(
        parse(&kv, "num_angles")?,
        parse(&kv, "num_bins")?,
        parse(&kv, "bin_spacing")?,
    )?;
    let patch_size: usize = parse(&kv, "patch_size")?;
    let tiling = maskgen::tile_patches(&igeom, patch_size)?;
    let expected: usize = parse(&kv, "num_patches")?;
    if tiling.patches.len() != expected {
        return Err(InversionError::BadCheckpoint(format!(
            "tiling yields {} patches, checkpoint has {expected}",
            tiling.patches.len()
        )));
    }
    let masks = maskgen::read_masks(&dir.join("masks.dpt"), sgeom)?;
    let mut weights = Vec::with_capacity(tiling.patches.len());
    for (patch, mask) in tiling.patches.iter().zip(masks.iter()) {
        let (dims, values) =
            tensorfile::read_tensor(&dir.join(format!("weights_{:04}.dpt", patch.patch_id)))?;
        if dims != vec![patch.pixels.len(), mask.surviving.len()] {
            return Err(InversionError::BadCheckpoint(format!(
                "weight tensor for patch {} has dims {dims:?}",
                patch.patch_id
            )));
        }
        weights.push(values);
    }
    validate_masks(&tiling, sgeom, &masks)?;
    Ok(InversionLayer { tiling, sgeom, masks, weights })
}

/// Persist Adam moments alongside a layer checkpoint.
pub fn save_adam(dir: &Path, state: &AdamState) -> Result<(), InversionError> {
    for (i, (m, v)) in state.m.iter().zip(state.v.iter()).enumerate() {
        tensorfile::write_tensor(&dir.join(format!("adam_m_{i:04}.dpt")), &[m.len()], m)?;
        tensorfile::write_tensor(&dir.join(format!("adam_v_{i:04}.dpt")), &[v.len()], v)?;
    }
    write_kv(
        &dir.join("adam.csv"),
        &[
            ("t", state.t.to_string()),
            ("beta1", format!("{:?}", state.beta1)),
            ("beta2", format!("{:?}", state.beta2)),
            ("epsilon", format!("{:?}", state.epsilon)),
        ],
    )
}

pub fn load_adam(dir: &Path, layer: &InversionLayer) -> Result<AdamState, InversionError> {
    let kv = read_kv(&dir.join("adam.csv"))?;
    let mut state = AdamState::new(layer);
    state.t = parse(&kv, "t")?;
    state.beta1 = parse(&kv, "beta1")?;
    state.beta2 = parse(&kv, "beta2")?;
    state.epsilon = parse(&kv, "epsilon")?;
    for i in 0..layer.weights.len() {
        let (dims, m) = tensorfile::read_tensor(&dir.join(format!("adam_m_{i:04}.dpt")))?;
        let (_, v) = tensorfile::read_tensor(&dir.join(format!("adam_v_{i:04}.dpt")))?;
        if dims[0] != layer.weights[i].len() || v.len() != layer.weights[i].len() {
            return Err(InversionError::BadCheckpoint(format!("adam tensors for patch {i}")));
        }
        state.m[i] = m;
        state.v[i] = v;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::fov_pixel_list;
    use crate::maskgen::{project_masks, tile_patches};
    use crate::objective::{mae_loss, mae_loss_grad};
    use rand::Rng;

    fn small_layer(patch_size: usize, seed: u64) -> InversionLayer {
        let ig = ImageGeometry::square(16, 1.0).unwrap();
        let sg = SinogramGeometry::new(24, 16, 1.0).unwrap();
        let tiling = tile_patches(&ig, patch_size).unwrap();
        let masks = project_masks(&tiling, sg, 1).unwrap();
        InversionLayer::new(tiling, sg, masks, seed).unwrap()
    }

    fn full_mask_layer(seed: u64) -> InversionLayer {
        let ig = ImageGeometry::square(16, 1.0).unwrap();
        let sg = SinogramGeometry::new(24, 16, 1.0).unwrap();
        let tiling = tile_patches(&ig, 16).unwrap();
        let all = Array2::from_elem((sg.num_angles, sg.num_bins), true);
        let masks = vec![SinogramMask {
            patch_id: 0,
            surviving: (0..sg.total_bins()).collect(),
            mask: all,
        }];
        InversionLayer::new(tiling, sg, masks, seed).unwrap()
    }

    fn random_sino(layer: &InversionLayer, seed: u64) -> Sinogram {
        let mut rng = seeds::rng(seed, 0);
        let mut s = Sinogram::zeros(layer.sgeom);
        for v in s.values.iter_mut() {
            *v = rng.gen_range(0.0..4.0);
        }
        s
    }

    #[test]
    fn zero_weights_give_zero_image() {
        let ig = ImageGeometry::square(16, 1.0).unwrap();
        let sg = SinogramGeometry::new(24, 16, 1.0).unwrap();
        let tiling = tile_patches(&ig, 8).unwrap();
        let masks = project_masks(&tiling, sg, 1).unwrap();
        let layer = InversionLayer::zeroed(tiling, sg, masks).unwrap();
        let img = layer_forward(&layer, &random_sino(&layer, 1)).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_mask_equals_dense_matvec() {
        let layer = full_mask_layer(3);
        let s = random_sino(&layer, 2);
        let img = layer_forward(&layer, &s).unwrap();

        // Dense oracle: plain sequential matrix-vector product.
        let flat: Vec<f64> = s.values.iter().copied().collect();
        let fov = fov_pixel_list(&layer.igeom());
        let nb = flat.len();
        for (row, &(r, c)) in fov.iter().enumerate() {
            let mut acc = 0.0f64;
            for j in 0..nb {
                acc += layer.weights[0][row * nb + j] as f64 * flat[j];
            }
            let got = img.values[(r, c)];
            assert!(
                (got - acc).abs() <= 1e-12 * acc.abs().max(1.0),
                "pixel ({r},{c}): {got} vs {acc}"
            );
        }
    }

    #[test]
    fn forward_is_additive_and_respects_fov() {
        let layer = small_layer(8, 5);
        let a = random_sino(&layer, 10);
        let b = random_sino(&layer, 11);
        let mut sum = Sinogram::zeros(layer.sgeom);
        sum.values = &a.values + &b.values;
        let fa = layer_forward(&layer, &a).unwrap();
        let fb = layer_forward(&layer, &b).unwrap();
        let fsum = layer_forward(&layer, &sum).unwrap();
        let scale = fsum.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for ((x, y), z) in fa.values.iter().zip(fb.values.iter()).zip(fsum.values.iter()) {
            assert!((x + y - z).abs() <= 1e-10 * scale.max(1.0));
        }
        let ig = layer.igeom();
        for r in 0..ig.height {
            for c in 0..ig.width {
                if !ig.in_fov(r, c) {
                    assert_eq!(fa.values[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let layer = small_layer(8, 7);
        let s = random_sino(&layer, 3);
        let upstream = Array2::zeros((16, 16));
        let grads = layer_backward(&layer, &s, &upstream).unwrap();
        assert!(grads.iter().flat_map(|g| g.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn weight_gradients_pass_finite_difference() {
        let mut layer = small_layer(8, 9);
        let s = random_sino(&layer, 4);
        let mut rng = seeds::rng(99, 0);
        // Linear functional of the output: <forward(s), R>.
        let r_map: Array2<f64> = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0));
        let grads = layer_backward(&layer, &s, &r_map).unwrap();
        let h = 1e-4;
        let loss = |layer: &InversionLayer| -> f64 {
            let img = layer_forward(layer, &s).unwrap();
            img.values.iter().zip(r_map.iter()).map(|(a, b)| a * b).sum()
        };
        for trial in 0..50 {
            let p = rng.gen_range(0..layer.weights.len());
            let i = rng.gen_range(0..layer.weights[p].len());
            let orig = layer.weights[p][i];
            layer.weights[p][i] = (orig as f64 + h) as f32;
            let up = loss(&layer);
            layer.weights[p][i] = (orig as f64 - h) as f32;
            let down = loss(&layer);
            layer.weights[p][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[p][i];
            let rel = (fd - an).abs() / (an.abs() + 1e-8);
            assert!(rel < 1e-4, "trial {trial} patch {p} idx {i}: fd {fd} vs {an} rel {rel}");
        }
    }

    #[test]
    fn composed_mae_gradient_passes_finite_difference() {
        let mut layer = small_layer(8, 13);
        let s = random_sino(&layer, 6);
        let mut rng = seeds::rng(77, 0);
        let target: Array2<f64> = Array2::from_shape_fn((16, 16), |_| rng.gen_range(2.0..4.0));
        let pred = layer_forward(&layer, &s).unwrap();
        let (_, up) = mae_loss_grad(&pred.values, &target).unwrap();
        let grads = layer_backward(&layer, &s, &up).unwrap();
        let h = 1e-4;
        let loss = |layer: &InversionLayer| -> f64 {
            mae_loss(&layer_forward(layer, &s).unwrap().values, &target).unwrap()
        };
        for trial in 0..50 {
            let p = rng.gen_range(0..layer.weights.len());
            let i = rng.gen_range(0..layer.weights[p].len());
            let orig = layer.weights[p][i];
            layer.weights[p][i] = (orig as f64 + h) as f32;
            let upv = loss(&layer);
            layer.weights[p][i] = (orig as f64 - h) as f32;
            let downv = loss(&layer);
            layer.weights[p][i] = orig;
            let fd = (upv - downv) / (2.0 * h);
            let an = grads[p][i];
            let rel = (fd - an).abs() / (an.abs() + 1e-8);
            assert!(rel < 1e-4, "trial {trial}: fd {fd} vs {an} rel {rel}");
        }
    }

    #[test]
    fn batch_forward_matches_single_forward_bitwise() {
        let layer = small_layer(8, 19);
        let sinos: Vec<Sinogram> = (0..5).map(|i| random_sino(&layer, 30 + i)).collect();
        let refs: Vec<&Sinogram> = sinos.iter().collect();
        let batch = layer_forward_batch(&layer, &refs).unwrap();
        for (s, img) in sinos.iter().zip(batch.iter()) {
            let single = layer_forward(&layer, s).unwrap();
            for (a, b) in img.values.iter().zip(single.values.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn batch_gradients_match_sequential_accumulation() {
        let layer = small_layer(8, 15);
        let sinos: Vec<Sinogram> = (0..3).map(|i| random_sino(&layer, 20 + i)).collect();
        let mut rng = seeds::rng(33, 0);
        let ups: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let mut seq = zero_gradients(&layer);
        for (s, u) in sinos.iter().zip(ups.iter()) {
            accumulate_gradients(&layer, s, u, &mut seq).unwrap();
        }
        let mut batch = zero_gradients(&layer);
        let pairs: Vec<(&Sinogram, &Array2<f64>)> =
            sinos.iter().zip(ups.iter()).map(|(s, u)| (s, u)).collect();
        accumulate_batch_gradients(&layer, &pairs, &mut batch).unwrap();
        for (a, b) in seq.iter().zip(batch.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn fused_step_matches_unfused_bitwise() {
        let layer_a = small_layer(8, 61);
        let sinos: Vec<Sinogram> = (0..4).map(|i| random_sino(&layer_a, 40 + i)).collect();
        let mut rng = seeds::rng(63, 0);
        let ups: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((16, 16), |_| rng.gen_range(-0.5..0.5)))
            .collect();
        let pairs: Vec<(&Sinogram, &Array2<f64>)> =
            sinos.iter().zip(ups.iter()).map(|(s, u)| (s, u)).collect();

        // Unfused reference: accumulate then step, twice.
        let mut unfused = small_layer(8, 61);
        let mut adam_a = AdamState::new(&unfused);
        for _ in 0..2 {
            let mut grads = zero_gradients(&unfused);
            accumulate_batch_gradients(&unfused, &pairs, &mut grads).unwrap();
            adam_step(&mut adam_a, &mut unfused, &grads, 3e-4).unwrap();
        }

        let mut fused = small_layer(8, 61);
        let mut adam_b = AdamState::new(&fused);
        for _ in 0..2 {
            adam_batch_step(&mut adam_b, &mut fused, &pairs, 3e-4).unwrap();
        }
        assert_eq!(adam_a.t, adam_b.t);
        for (a, b) in unfused.weights.iter().zip(fused.weights.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (a, b) in adam_a.m.iter().zip(adam_b.m.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in adam_a.v.iter().zip(adam_b.v.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut layer = small_layer(8, 21);
        let before: Vec<Vec<f32>> = layer.weights.clone();
        let mut state = AdamState::new(&layer);
        let grads = zero_gradients(&layer);
        adam_step(&mut state, &mut layer, &grads, 1e-3).unwrap();
        assert_eq!(state.t, 1);
        assert_eq!(layer.weights, before);
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        // Single weight, g = 1 at t = 1: update is -lr * 1/(1 + eps).
        let mut layer = small_layer(16, 23);
        let mut state = AdamState::new(&layer);
        let mut grads = zero_gradients(&layer);
        grads[0][0] = 1.0;
        let w0 = layer.weights[0][0] as f64;
        let lr = 1e-3;
        adam_step(&mut state, &mut layer, &grads, lr).unwrap();
        let expect = w0 - lr / (1.0 + 1e-8);
        let got = layer.weights[0][0] as f64;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");

        // Second identical gradient: |step 2| <= |step 1| because v accumulates.
        let w1 = got;
        adam_step(&mut state, &mut layer, &grads, lr).unwrap();
        let step2 = (layer.weights[0][0] as f64 - w1).abs();
        let step1 = (w1 - w0).abs();
        assert!(step2 <= step1 + 1e-12, "step2 {step2} > step1 {step1}");
    }

    #[test]
    fn adam_reports_non_finite_gradient_with_patch() {
        let mut layer = small_layer(8, 25);
        let mut state = AdamState::new(&layer);
        let mut grads = zero_gradients(&layer);
        grads[2][5] = f64::NAN;
        let patch_id = layer.tiling.patches[2].patch_id;
        match adam_step(&mut state, &mut layer, &grads, 1e-3) {
            Err(InversionError::NonFiniteGradient { patch_id: p }) => assert_eq!(p, patch_id),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
    }

    #[test]
    fn scheduler_matches_paper_constants() {
        let cfg = SchedulerConfig::default();
        assert_eq!(learning_rate(0, &cfg), 0.5e-5);
        assert_eq!(learning_rate(1000, &cfg), 0.5e-5);
        // Direct formula at the first peak.
        let expect = (9.0e-5 - 0.5e-5) * 0.99995f64.powf(500.0) + 0.5e-5;
        let got = learning_rate(500, &cfg);
        assert!((got - expect).abs() < 1e-12 * expect);
        assert!((got - 8.79e-5).abs() < 2e-7, "peak {got}");
    }

    #[test]
    fn scheduler_stays_in_bounds_with_periodic_troughs() {
        let cfg = SchedulerConfig::default();
        for k in 0..=100_000u64 {
            let eta = learning_rate(k, &cfg);
            assert!(eta >= cfg.eta_min - 1e-18 && eta <= cfg.eta_max + 1e-18, "k={k} eta={eta}");
            if k % 1000 == 0 {
                assert!((eta - cfg.eta_min).abs() < 1e-18, "trough at k={k}");
            }
        }
        // Peak value of the triangle is 1 at k = 500 mod 1000.
        let lam = |k: u64| {
            let x = k as f64 / 1000.0;
            2.0 * (x - (x + 0.5).floor()).abs()
        };
        assert_eq!(lam(500), 1.0);
        assert_eq!(lam(1500), 1.0);
        assert_eq!(lam(250), 0.5);
    }

    #[test]
    fn masked_flops_below_dense() {
        let layer = small_layer(8, 31);
        let fov = fov_pixel_list(&layer.igeom()).len() as u64;
        let dense = 2 * layer.sgeom.total_bins() as u64 * fov;
        assert!(layer.flops_per_slice() < dense);
        let full = full_mask_layer(1);
        assert_eq!(full.flops_per_slice(), 2 * full.sgeom.total_bins() as u64 * fov);
    }

    #[test]
    fn layer_checkpoint_round_trips_bit_exactly() {
        let layer = small_layer(8, 41);
        let mut state = AdamState::new(&layer);
        state.t = 17;
        let mut rng = seeds::rng(55, 0);
        for (m, v) in state.m.iter_mut().zip(state.v.iter_mut()) {
            for (a, b) in m.iter_mut().zip(v.iter_mut()) {
                *a = rng.gen_range(-1.0f32..1.0);
                *b = rng.gen_range(0.0f32..1.0);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_layer(dir.path(), &layer).unwrap();
        save_adam(dir.path(), &state).unwrap();
        let back = load_layer(dir.path()).unwrap();
        assert_eq!(back.weights, layer.weights);
        assert_eq!(back.masks.len(), layer.masks.len());
        for (a, b) in back.masks.iter().zip(layer.masks.iter()) {
            assert_eq!(a.surviving, b.surviving);
        }
        let adam = load_adam(dir.path(), &back).unwrap();
        assert_eq!(adam.t, 17);
        assert_eq!(adam.m, state.m);
        assert_eq!(adam.v, state.v);
    }

    #[test]
    fn geometry_errors_are_reported() {
        let layer = small_layer(8, 51);
        let wrong = Sinogram::zeros(SinogramGeometry::new(10, 16, 1.0).unwrap());
        assert!(matches!(
            layer_forward(&layer, &wrong),
            Err(InversionError::GeometryMismatch)
        ));
        let s = random_sino(&layer, 1);
        let bad_up = Array2::zeros((8, 8));
        assert!(matches!(
            layer_backward(&layer, &s, &bad_up),
            Err(InversionError::UpstreamShape)
        ));
    }
}
