//! Ray-driven forward Radon transform and its exact adjoint.
//!
//! The adjoint enumerates the same sample points with the same bilinear
//! weights as the forward pass, so the pair is a matched transpose. MLEM
//! convergence and the dot-product tests below rely on that.

use crate::geom::{ImageGeometry, ImageGrid, Sinogram, SinogramGeometry};
use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ProjectorError {
    #[error("sampling step {0} outside (0, 1]")]
    BadSamplingStep(f64),
    #[error("sinogram radial extent {extent} does not cover fov diameter {needed}")]
    RadialCoverage { extent: f64, needed: f64 },
    #[error("image geometry does not match projector")]
    ImageMismatch,
    #[error("sinogram geometry does not match projector")]
    SinogramMismatch,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectorConfig {
    /// Ray-marching step as a fraction of the pixel size.
    pub sampling_step: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { sampling_step: 0.5 }
    }
}

pub struct Projector {
    pub igeom: ImageGeometry,
    pub sgeom: SinogramGeometry,
    step: f64,
    half_span: f64,
    samples: usize,
}

impl Projector {
    pub fn new(
        igeom: ImageGeometry,
        sgeom: SinogramGeometry,
        cfg: ProjectorConfig,
    ) -> Result<Self, ProjectorError> {
        if !(cfg.sampling_step > 0.0 && cfg.sampling_step <= 1.0) {
            return Err(ProjectorError::BadSamplingStep(cfg.sampling_step));
        }
        let extent = sgeom.num_bins as f64 * sgeom.bin_spacing;
        let needed = 2.0 * igeom.fov_radius;
        if extent < needed {
            return Err(ProjectorError::RadialCoverage { extent, needed });
        }
        let step = cfg.sampling_step * igeom.pixel_size;
        // March far enough to cross the grid's circumscribed circle.
        let half_span = igeom.width as f64 / 2.0 * igeom.pixel_size * std::f64::consts::SQRT_2;
        let samples = (2.0 * half_span / step).ceil() as usize;
        Ok(Self { igeom, sgeom, step, half_span: samples as f64 * step / 2.0, samples })
    }

    /// Line integral for one view row, written into `row`.
    fn forward_row(&self, values: &[f64], angle_idx: usize, row: &mut [f64]) {
        let w = self.igeom.width;
        let h = self.igeom.height;
        let px = self.igeom.pixel_size;
        let theta = self.sgeom.angle(angle_idx);
        let (sin_t, cos_t) = theta.sin_cos();
        for (j, out) in row.iter_mut().enumerate() {
            let t = self.sgeom.bin_offset(j);
            let bx = t * cos_t;
            let by = t * sin_t;
            let mut acc = 0.0;
            for k in 0..self.samples {
                let u = (k as f64 + 0.5) * self.step - self.half_span;
                let x = bx - u * sin_t;
                let y = by + u * cos_t;
                let fc = x / px + w as f64 / 2.0 - 0.5;
                let fr = y / px + h as f64 / 2.0 - 0.5;
                let c0 = fc.floor();
                let r0 = fr.floor();
                let wc = fc - c0;
                let wr = fr - r0;
                let c0 = c0 as isize;
                let r0 = r0 as isize;
                let mut sample = 0.0;
                if r0 >= 0 && (r0 as usize) < h {
                    let base = r0 as usize * w;
                    if c0 >= 0 && (c0 as usize) < w {
                        sample += (1.0 - wr) * (1.0 - wc) * values[base + c0 as usize];
                    }
                    if c0 + 1 >= 0 && ((c0 + 1) as usize) < w {
                        sample += (1.0 - wr) * wc * values[base + (c0 + 1) as usize];
                    }
                }
                if r0 + 1 >= 0 && ((r0 + 1) as usize) < h {
                    let base = (r0 + 1) as usize * w;
                    if c0 >= 0 && (c0 as usize) < w {
                        sample += wr * (1.0 - wc) * values[base + c0 as usize];
                    }
                    if c0 + 1 >= 0 && ((c0 + 1) as usize) < w {
                        sample += wr * wc * values[base + (c0 + 1) as usize];
                    }
                }
                acc += sample;
            }
            *out = acc * self.step;
        }
    }

    /// Scatter one view row back into an image accumulator (transpose of
    /// `forward_row`).
    fn adjoint_row(&self, row: &[f64], angle_idx: usize, out: &mut [f64]) {
        let w = self.igeom.width;
        let h = self.igeom.height;
        let px = self.igeom.pixel_size;
        let theta = self.sgeom.angle(angle_idx);
        let (sin_t, cos_t) = theta.sin_cos();
        for (j, &val) in row.iter().enumerate() {
            if val == 0.0 {
                continue;
            }
            let weighted = val * self.step;
            let t = self.sgeom.bin_offset(j);
            let bx = t * cos_t;
            let by = t * sin_t;
            for k in 0..self.samples {
                let u = (k as f64 + 0.5) * self.step - self.half_span;
                let x = bx - u * sin_t;
                let y = by + u * cos_t;
                let fc = x / px + w as f64 / 2.0 - 0.5;
                let fr = y / px + h as f64 / 2.0 - 0.5;
                let c0 = fc.floor();
                let r0 = fr.floor();
                let wc = fc - c0;
                let wr = fr - r0;
                let c0 = c0 as isize;
                let r0 = r0 as isize;
                if r0 >= 0 && (r0 as usize) < h {
                    let base = r0 as usize * w;
                    if c0 >= 0 && (c0 as usize) < w {
                        out[base + c0 as usize] += weighted * (1.0 - wr) * (1.0 - wc);
                    }
                    if c0 + 1 >= 0 && ((c0 + 1) as usize) < w {
                        out[base + (c0 + 1) as usize] += weighted * (1.0 - wr) * wc;
                    }
                }
                if r0 + 1 >= 0 && ((r0 + 1) as usize) < h {
                    let base = (r0 + 1) as usize * w;
                    if c0 >= 0 && (c0 as usize) < w {
                        out[base + c0 as usize] += weighted * wr * (1.0 - wc);
                    }
                    if c0 + 1 >= 0 && ((c0 + 1) as usize) < w {
                        out[base + (c0 + 1) as usize] += weighted * wr * wc;
                    }
                }
            }
        }
    }

    /// Forward projection restricted to the given view indices; returns one
    /// row per requested angle.
    pub fn forward_angles(&self, img: &ImageGrid, angles: &[usize]) -> Result<Array2<f64>, ProjectorError> {
        if img.geometry != self.igeom {
            return Err(ProjectorError::ImageMismatch);
        }
        let values = img.values.as_slice().expect("standard layout");
        let nb = self.sgeom.num_bins;
        let mut rows = Array2::zeros((angles.len(), nb));
        let row_slices: Vec<(&usize, &mut [f64])> = angles
            .iter()
            .zip(rows.as_slice_mut().expect("standard layout").chunks_mut(nb))
            .collect();
        row_slices.into_par_iter().for_each(|(&angle_idx, row)| {
            self.forward_row(values, angle_idx, row);
        });
        Ok(rows)
    }

    /// Adjoint of [`Self::forward_angles`]: per-angle partial images are
    /// accumulated in angle order so the result is schedule-independent.
    pub fn adjoint_angles(&self, rows: &Array2<f64>, angles: &[usize]) -> Result<ImageGrid, ProjectorError> {
        if rows.dim() != (angles.len(), self.sgeom.num_bins) {
            return Err(ProjectorError::SinogramMismatch);
        }
        let partials: Vec<Vec<f64>> = angles
            .par_iter()
            .enumerate()
            .map(|(i, &angle_idx)| {
                let mut img = vec![0.0; self.igeom.height * self.igeom.width];
                let row = rows.row(i);
                self.adjoint_row(row.as_slice().expect("standard layout"), angle_idx, &mut img);
                img
            })
            .collect();
        let mut out = ImageGrid::zeros(self.igeom);
        let flat = out.values.as_slice_mut().expect("standard layout");
        for partial in &partials {
            for (o, &p) in flat.iter_mut().zip(partial.iter()) {
                *o += p;
            }
        }
        Ok(out)
    }

    pub fn forward(&self, img: &ImageGrid) -> Result<Sinogram, ProjectorError> {
        let angles: Vec<usize> = (0..self.sgeom.num_angles).collect();
        let rows = self.forward_angles(img, &angles)?;
        Ok(Sinogram { geometry: self.sgeom, values: rows })
    }

    pub fn adjoint(&self, s: &Sinogram) -> Result<ImageGrid, ProjectorError> {
        if s.geometry != self.sgeom {
            return Err(ProjectorError::SinogramMismatch);
        }
        let angles: Vec<usize> = (0..self.sgeom.num_angles).collect();
        self.adjoint_angles(&s.values, &angles)
    }
}

/// Discretized Radon transform of `img` onto `sgeom`.
pub fn forward_project(
    img: &ImageGrid,
    sgeom: SinogramGeometry,
    cfg: ProjectorConfig,
) -> Result<Sinogram, ProjectorError> {
    Projector::new(img.geometry, sgeom, cfg)?.forward(img)
}

/// Exact adjoint of [`forward_project`] (unfiltered backprojection).
pub fn back_project(
    s: &Sinogram,
    igeom: ImageGeometry,
    cfg: ProjectorConfig,
) -> Result<ImageGrid, ProjectorError> {
    Projector::new(igeom, s.geometry, cfg)?.adjoint(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn desk() -> (ImageGeometry, SinogramGeometry) {
        (
            ImageGeometry::square(64, 1.0).unwrap(),
            SinogramGeometry::new(100, 64, 1.0).unwrap(),
        )
    }

    /// Disk whose rim tapers linearly over `taper` pixels. A hard edge is not
    /// representable on the grid in a rotation-invariant way; grazing rays
    /// would otherwise see grid anisotropy rather than the operator.
    fn smooth_disk(geom: &ImageGeometry, radius: f64, value: f64, taper: f64) -> ImageGrid {
        let mut img = ImageGrid::zeros(*geom);
        for row in 0..geom.height {
            for col in 0..geom.width {
                let (x, y) = geom.pixel_center(row, col);
                let r = (x * x + y * y).sqrt();
                let coverage = ((radius - r) / (taper * geom.pixel_size) + 0.5).clamp(0.0, 1.0);
                img.values[(row, col)] = value * coverage;
            }
        }
        img
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let (ig, sg) = desk();
        let s = forward_project(&ImageGrid::zeros(ig), sg, ProjectorConfig::default()).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        let img = back_project(&Sinogram::zeros(sg), ig, ProjectorConfig::default()).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_pixel_traces_the_analytic_sinusoid() {
        let (ig, sg) = desk();
        // Pixel at (row 16, col 44): polar position r, phi from its center.
        let mut img = ImageGrid::zeros(ig);
        img.values[(16, 44)] = 1.0;
        let (x, y) = ig.pixel_center(16, 44);
        let r = (x * x + y * y).sqrt();
        let phi = y.atan2(x);
        let s = forward_project(&img, sg, ProjectorConfig::default()).unwrap();
        for i in 0..sg.num_angles {
            let row = s.values.row(i);
            let (argmax, peak) = row
                .iter()
                .enumerate()
                .fold((0usize, f64::MIN), |(am, m), (j, &v)| if v > m { (j, v) } else { (am, m) });
            assert!(peak > 0.0, "view {i} saw nothing");
            let expected = sg.offset_to_bin(r * (sg.angle(i) - phi).cos());
            assert!(
                (argmax as f64 - expected).abs() <= 1.5,
                "view {i}: argmax {argmax} vs sinusoid {expected:.2}"
            );
        }
    }

    #[test]
    fn disk_profile_matches_chord_length() {
        let (ig, sg) = desk();
        let radius = 20.0;
        let img = smooth_disk(&ig, radius, 1.0, 1.0);
        let s = forward_project(&img, sg, ProjectorConfig::default()).unwrap();
        for i in (0..sg.num_angles).step_by(13) {
            for j in 0..sg.num_bins {
                let t = sg.bin_offset(j);
                if t.abs() <= 0.8 * radius {
                    let chord = 2.0 * (radius * radius - t * t).sqrt();
                    let got = s.values[(i, j)];
                    assert!(
                        (got - chord).abs() <= 0.02 * chord,
                        "view {i} bin {j}: {got} vs chord {chord}"
                    );
                }
            }
        }
    }

    #[test]
    fn adjoint_passes_dot_product_test() {
        let (ig, sg) = desk();
        let proj = Projector::new(ig, sg, ProjectorConfig::default()).unwrap();
        let mut rng = seeds::rng(42, 0);
        for trial in 0..20 {
            let mut x = ImageGrid::zeros(ig);
            for v in x.values.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let mut y = Sinogram::zeros(sg);
            for v in y.values.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let ax = proj.forward(&x).unwrap();
            let aty = proj.adjoint(&y).unwrap();
            let lhs: f64 = ax.values.iter().zip(y.values.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.values.iter().zip(aty.values.iter()).map(|(a, b)| a * b).sum();
            let rel = (lhs - rhs).abs() / (lhs.abs() + 1e-12);
            assert!(rel < 1e-6, "trial {trial}: <Ax,y>={lhs} <x,Aty>={rhs} rel={rel}");
        }
    }

    #[test]
    fn forward_is_linear() {
        let (ig, sg) = desk();
        let proj = Projector::new(ig, sg, ProjectorConfig::default()).unwrap();
        let mut rng = seeds::rng(7, 0);
        let mut x = ImageGrid::zeros(ig);
        let mut y = ImageGrid::zeros(ig);
        for v in x.values.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in y.values.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let (a, b) = (2.5, -0.75);
        let mut combo = ImageGrid::zeros(ig);
        combo.values = &x.values * a + &y.values * b;
        let lhs = proj.forward(&combo).unwrap();
        let rhs = proj.forward(&x).unwrap().values * a + proj.forward(&y).unwrap().values * b;
        let scale = rhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (l, r) in lhs.values.iter().zip(rhs.iter()) {
            assert!((l - r).abs() <= 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn centered_disk_profiles_are_view_invariant() {
        let (ig, sg) = desk();
        let img = smooth_disk(&ig, 20.0, 1.0, 3.0);
        let s = forward_project(&img, sg, ProjectorConfig::default()).unwrap();
        let peak = s.values.iter().cloned().fold(0.0, f64::max);
        for j in 0..sg.num_bins {
            let col = s.values.column(j);
            let hi = col.iter().cloned().fold(f64::MIN, f64::max);
            let lo = col.iter().cloned().fold(f64::MAX, f64::min);
            assert!(
                hi - lo < 0.01 * peak,
                "bin {j}: cross-view spread {} exceeds 1% of peak {peak}",
                hi - lo
            );
        }
    }

    #[test]
    fn single_hot_bin_backprojects_to_a_band() {
        let (ig, _) = desk();
        // One view at angle 0: rays run vertically at x = offset.
        let sg = SinogramGeometry::new(1, 64, 1.0).unwrap();
        let mut s = Sinogram::zeros(sg);
        let j = 40;
        s.values[(0, j)] = 1.0;
        let img = back_project(&s, ig, ProjectorConfig::default()).unwrap();
        let expect_col = sg.bin_offset(j) + 32.0 - 0.5; // fractional column of the ray
        let mut touched_rows = 0;
        for row in 0..64 {
            let mut row_has = false;
            for col in 0..64 {
                if img.values[(row, col)] > 1e-12 {
                    row_has = true;
                    assert!(
                        (col as f64 - expect_col).abs() <= 2.0,
                        "pixel ({row},{col}) outside band at col {expect_col}"
                    );
                }
            }
            if row_has {
                touched_rows += 1;
            }
        }
        assert!(touched_rows > 32, "band should span most rows, got {touched_rows}");
    }

    #[test]
    fn radial_coverage_is_enforced() {
        let ig = ImageGeometry::square(64, 1.0).unwrap();
        let sg = SinogramGeometry::new(10, 32, 1.0).unwrap(); // 32 < 64 needed
        assert!(matches!(
            Projector::new(ig, sg, ProjectorConfig::default()),
            Err(ProjectorError::RadialCoverage { .. })
        ));
        assert!(matches!(
            Projector::new(ig, SinogramGeometry::new(10, 64, 1.0).unwrap(),
                ProjectorConfig { sampling_step: 0.0 }),
            Err(ProjectorError::BadSamplingStep(_))
        ));
    }
}
