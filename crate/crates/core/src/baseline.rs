//! Classical reconstructions: MLEM/OSEM (the training-target recipe) and
//! filtered back-projection as a second speed/quality reference.

use crate::filters::gaussian_blur;
use crate::geom::{ImageGeometry, ImageGrid, Sinogram};
use crate::projector::{Projector, ProjectorConfig, ProjectorError};
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum BaselineError {
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error("sinogram contains negative values")]
    NegativeCounts,
    #[error("need at least one iteration and one subset (<= num angles)")]
    BadEmConfig,
}

/// OSEM recipe. Subsets are angle-interleaved: subset k owns the angles
/// congruent to k modulo `subsets`, which distributes any remainder
/// round-robin.
#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    pub iterations: usize,
    pub subsets: usize,
    /// Gaussian post-filter in pixels; 0 disables.
    pub post_filter_sigma: f64,
}

impl EmConfig {
    /// Desk-scale training-target recipe.
    pub fn target_recipe() -> Self {
        Self { iterations: 8, subsets: 4, post_filter_sigma: 1.0 }
    }
}

fn interleaved_subsets(num_angles: usize, subsets: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); subsets];
    for a in 0..num_angles {
        groups[a % subsets].push(a);
    }
    groups
}

/// Multiplicative EM over ordered subsets, starting from a uniform positive
/// image on the FOV. Zero-sensitivity pixels are frozen at zero; the output is
/// nonnegative and zero outside the FOV.
pub fn osem_reconstruct(
    s: &Sinogram,
    igeom: ImageGeometry,
    cfg: &EmConfig,
) -> Result<ImageGrid, BaselineError> {
    if s.values.iter().any(|&v| v < 0.0) {
        return Err(BaselineError::NegativeCounts);
    }
    if cfg.iterations == 0 || cfg.subsets == 0 || cfg.subsets > s.geometry.num_angles {
        return Err(BaselineError::BadEmConfig);
    }
    let proj = Projector::new(igeom, s.geometry, ProjectorConfig::default())?;
    let groups = interleaved_subsets(s.geometry.num_angles, cfg.subsets);

    // Per-subset sensitivity: adjoint of all-ones data over the subset angles.
    let nb = s.geometry.num_bins;
    let sensitivities: Vec<Array2<f64>> = groups
        .iter()
        .map(|angles| {
            let ones = Array2::from_elem((angles.len(), nb), 1.0);
            proj.adjoint_angles(&ones, angles).map(|img| img.values)
        })
        .collect::<Result<_, _>>()?;

    let mut x = ImageGrid::zeros(igeom);
    for row in 0..igeom.height {
        for col in 0..igeom.width {
            if igeom.in_fov(row, col) {
                x.values[(row, col)] = 1.0;
            }
        }
    }

    for _ in 0..cfg.iterations {
        for (angles, sens) in groups.iter().zip(sensitivities.iter()) {
            let mut y_hat = proj.forward_angles(&x, angles)?;
            for (i, &a) in angles.iter().enumerate() {
                for j in 0..nb {
                    let denom = y_hat[(i, j)];
                    y_hat[(i, j)] = if denom > 0.0 { s.values[(a, j)] / denom } else { 0.0 };
                }
            }
            let back = proj.adjoint_angles(&y_hat, angles)?;
            for ((xv, &bv), &sv) in
                x.values.iter_mut().zip(back.values.iter()).zip(sens.iter())
            {
                if sv > 0.0 {
                    *xv *= bv / sv;
                } else {
                    *xv = 0.0;
                }
            }
        }
    }

    if cfg.post_filter_sigma > 0.0 {
        x.values = gaussian_blur(&x.values, cfg.post_filter_sigma);
        x.clear_outside_fov();
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpFilter {
    Ramp,
    Hann,
}

/// Discrete Ram-Lak kernel values: h(0) = 1/(4 tau^2), h(odd n) = -1/(pi n tau)^2.
fn ram_lak(n: isize, tau: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * tau * tau)
    } else if n % 2 == 0 {
        0.0
    } else {
        let d = std::f64::consts::PI * n as f64 * tau;
        -1.0 / (d * d)
    }
}

/// Frequency-domain ramp filtering per view, then matched backprojection
/// scaled by pi/num_angles (with the adjoint-to-backprojection factor
/// bin_spacing/pixel_size^2).
pub fn fbp_reconstruct(
    s: &Sinogram,
    igeom: ImageGeometry,
    filter: FbpFilter,
) -> Result<ImageGrid, BaselineError> {
    let proj = Projector::new(igeom, s.geometry, ProjectorConfig::default())?;
    let nb = s.geometry.num_bins;
    let tau = s.geometry.bin_spacing;
    let padded = (2 * nb).next_power_of_two();

    // FFT of the zero-padded circular Ram-Lak kernel.
    let mut kernel: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); padded];
    for n in 0..nb as isize {
        kernel[n as usize].re = ram_lak(n, tau);
        if n > 0 {
            kernel[padded - n as usize].re = ram_lak(-n, tau);
        }
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(padded);
    let ifft = planner.plan_fft_inverse(padded);
    fft.process(&mut kernel);
    if filter == FbpFilter::Hann {
        let half = padded / 2;
        for (k, kv) in kernel.iter_mut().enumerate() {
            let f = k.min(padded - k) as f64 / half as f64; // 0..1 of Nyquist
            *kv *= 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
        }
    }

    let mut filtered = Array2::zeros(s.values.dim());
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); padded];
    for i in 0..s.geometry.num_angles {
        for b in buf.iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        for j in 0..nb {
            buf[j].re = s.values[(i, j)];
        }
        fft.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(kernel.iter()) {
            *b *= k;
        }
        ifft.process(&mut buf);
        for j in 0..nb {
            filtered[(i, j)] = buf[j].re / padded as f64 * tau;
        }
    }

    let back = proj.adjoint(&Sinogram { geometry: s.geometry, values: filtered })?;
    let scale = std::f64::consts::PI / s.geometry.num_angles as f64 * tau
        / (igeom.pixel_size * igeom.pixel_size);
    let mut out = ImageGrid { geometry: igeom, values: back.values * scale };
    out.clear_outside_fov();
    Ok(out)
}
