//! Quantitative evaluation: SNR over uniform regions of interest, bias,
//! non-zero-voxel MAE, and line profiles with FWHM.

use crate::geom::{ImageGeometry, ImageGrid};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("need at least one region of interest")]
    NoVois,
    #[error("voi at ({0}, {1}) has fewer than 2 pixels")]
    TooSmallVoi(usize, usize),
    #[error("voi at ({0}, {1}) extends outside the fov")]
    VoiOutsideFov(usize, usize),
    #[error("every voi had zero standard deviation")]
    AllVoisDegenerate,
    #[error("reference mean is zero in voi at ({0}, {1})")]
    ZeroReferenceMean(usize, usize),
    #[error("reference image has no nonzero voxels")]
    AllZeroReference,
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error("profile endpoints outside the image")]
    SegmentOutside,
    #[error("need at least 16 profile samples, got {0}")]
    TooFewSamples(usize),
    #[error("no half-maximum crossing on {0} side of the peak")]
    UndefinedFwhm(&'static str),
}

/// Disk-shaped region of interest, fully inside the FOV.
#[derive(Debug, Clone, Copy)]
pub struct Voi {
    pub center: (usize, usize),
    pub radius: f64,
}

impl Voi {
    pub fn pixels(&self, geom: &ImageGeometry) -> Vec<(usize, usize)> {
        let (cr, cc) = self.center;
        let r = self.radius.ceil() as isize;
        let mut out = Vec::new();
        for dr in -r..=r {
            for dc in -r..=r {
                let rr = cr as isize + dr;
                let cc2 = cc as isize + dc;
                if rr < 0 || cc2 < 0 || rr as usize >= geom.height || cc2 as usize >= geom.width {
                    continue;
                }
                if ((dr * dr + dc * dc) as f64).sqrt() <= self.radius {
                    out.push((rr as usize, cc2 as usize));
                }
            }
        }
        out
    }

    fn check_inside_fov(&self, geom: &ImageGeometry) -> Result<(), MetricsError> {
        let (x, y) = geom.pixel_center(self.center.0, self.center.1);
        let d = (x * x + y * y).sqrt() + self.radius * geom.pixel_size;
        if d > geom.fov_radius {
            return Err(MetricsError::VoiOutsideFov(self.center.0, self.center.1));
        }
        Ok(())
    }
}

fn voi_stats(img: &ImageGrid, voi: &Voi) -> Result<(f64, f64, usize), MetricsError> {
    voi.check_inside_fov(&img.geometry)?;
    let pixels = voi.pixels(&img.geometry);
    if pixels.len() < 2 {
        return Err(MetricsError::TooSmallVoi(voi.center.0, voi.center.1));
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&(r, c)| img.values[(r, c)]).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&(r, c)| (img.values[(r, c)] - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok((mean, var.sqrt(), pixels.len()))
}

#[derive(Debug, Clone)]
pub struct SnrResult {
    pub value: f64,
    /// Regions dropped because their standard deviation was zero.
    pub excluded: usize,
}

/// Mean over VOIs of (mean / sample standard deviation). Zero-sigma regions
/// are excluded; if every region is degenerate this is an error.
pub fn snr_voi(img: &ImageGrid, vois: &[Voi]) -> Result<SnrResult, MetricsError> {
    if vois.is_empty() {
        return Err(MetricsError::NoVois);
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for voi in vois {
        let (mean, sigma, _) = voi_stats(img, voi)?;
        if sigma == 0.0 {
            continue;
        }
        acc += mean / sigma;
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::AllVoisDegenerate);
    }
    Ok(SnrResult { value: acc / used as f64, excluded: vois.len() - used })
}

/// Percent bias of `test` relative to `reference`, averaged over VOIs:
/// 100 * (mean_test - mean_ref) / mean_ref.
pub fn bias_voi(test: &ImageGrid, reference: &ImageGrid, vois: &[Voi]) -> Result<f64, MetricsError> {
    if vois.is_empty() {
        return Err(MetricsError::NoVois);
    }
    if test.values.dim() != reference.values.dim() {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut acc = 0.0;
    for voi in vois {
        let (mt, _, _) = voi_stats(test, voi)?;
        let (mr, _, _) = voi_stats(reference, voi)?;
        if mr == 0.0 {
            return Err(MetricsError::ZeroReferenceMean(voi.center.0, voi.center.1));
        }
        acc += 100.0 * (mt - mr) / mr;
    }
    Ok(acc / vois.len() as f64)
}

/// Mean absolute difference over the voxels where the reference is nonzero.
pub fn mae_nonzero(test: &ImageGrid, reference: &ImageGrid) -> Result<f64, MetricsError> {
    if test.values.dim() != reference.values.dim() {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (&t, &r) in test.values.iter().zip(reference.values.iter()) {
        if r != 0.0 {
            acc += (t - r).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::AllZeroReference);
    }
    Ok(acc / n as f64)
}

fn bilinear(img: &ImageGrid, row: f64, col: f64) -> f64 {
    let h = img.geometry.height;
    let w = img.geometry.width;
    let r0 = row.floor();
    let c0 = col.floor();
    let wr = row - r0;
    let wc = col - c0;
    let mut acc = 0.0;
    for (dr, dc, wt) in [
        (0isize, 0isize, (1.0 - wr) * (1.0 - wc)),
        (0, 1, (1.0 - wr) * wc),
        (1, 0, wr * (1.0 - wc)),
        (1, 1, wr * wc),
    ] {
        let rr = r0 as isize + dr;
        let cc = c0 as isize + dc;
        if rr >= 0 && (rr as usize) < h && cc >= 0 && (cc as usize) < w {
            acc += wt * img.values[(rr as usize, cc as usize)];
        }
    }
    acc
}

#[derive(Debug, Clone)]
pub struct LineProfile {
    /// Distance along the segment in physical length units.
    pub distances: Vec<f64>,
    pub values: Vec<f64>,
    /// Full width at half maximum, relative to the profile minimum.
    pub fwhm: f64,
}

/// Bilinear profile along the segment p0 -> p1 (continuous pixel coordinates,
/// row/col order) with FWHM from linear interpolation of the half-maximum
/// crossings around the global peak. The baseline is the profile minimum.
pub fn line_profile_fwhm(
    img: &ImageGrid,
    p0: (f64, f64),
    p1: (f64, f64),
    samples: usize,
) -> Result<LineProfile, MetricsError> {
    if samples < 16 {
        return Err(MetricsError::TooFewSamples(samples));
    }
    let geom = img.geometry;
    for &(r, c) in &[p0, p1] {
        if r < 0.0 || c < 0.0 || r > (geom.height - 1) as f64 || c > (geom.width - 1) as f64 {
            return Err(MetricsError::SegmentOutside);
        }
    }
    let length_px = ((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt();
    let length = length_px * geom.pixel_size;
    let mut distances = Vec::with_capacity(samples);
    let mut values = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = i as f64 / (samples - 1) as f64;
        let r = p0.0 + t * (p1.0 - p0.0);
        let c = p0.1 + t * (p1.1 - p0.1);
        distances.push(t * length);
        values.push(bilinear(img, r, c));
    }

    let baseline = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let (peak_idx, peak) = values
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
    let half = baseline + (peak - baseline) / 2.0;
    if peak == baseline {
        return Err(MetricsError::UndefinedFwhm("either"));
    }

    let cross_left = (0..peak_idx)
        .rev()
        .find(|&i| values[i] <= half)
        .map(|i| {
            let frac = (half - values[i]) / (values[i + 1] - values[i]);
            distances[i] + frac * (distances[i + 1] - distances[i])
        })
        .ok_or(MetricsError::UndefinedFwhm("left"))?;
    let cross_right = (peak_idx + 1..samples)
        .find(|&i| values[i] <= half)
        .map(|i| {
            let frac = (values[i - 1] - half) / (values[i - 1] - values[i]);
            distances[i - 1] + frac * (distances[i] - distances[i - 1])
        })
        .ok_or(MetricsError::UndefinedFwhm("right"))?;

    Ok(LineProfile { distances, values, fwhm: cross_right - cross_left })
}

/// Place `count` disk VOIs of the given radius at the most uniform spots of
/// the reference image (lowest coefficient of variation), keeping centers at
/// least one diameter apart. Deterministic.
pub fn auto_vois(reference: &ImageGrid, count: usize, radius: f64) -> Vec<Voi> {
    let geom = reference.geometry;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..geom.height {
        for c in 0..geom.width {
            let voi = Voi { center: (r, c), radius };
            if voi.check_inside_fov(&geom).is_err() {
                continue;
            }
            if let Ok((mean, sigma, n)) = voi_stats(reference, &voi) {
                if n >= 2 && mean > 0.0 {
                    candidates.push((sigma / mean, r, c));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite cv"));
    let mut chosen: Vec<Voi> = Vec::new();
    let min_dist = 2.0 * radius + 1.0;
    for (_, r, c) in candidates {
        if chosen.len() >= count {
            break;
        }
        let far_enough = chosen.iter().all(|v| {
            let dr = v.center.0 as f64 - r as f64;
            let dc = v.center.1 as f64 - c as f64;
            (dr * dr + dc * dc).sqrt() >= min_dist
        });
        if far_enough {
            chosen.push(Voi { center: (r, c), radius });
        }
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn geom() -> ImageGeometry {
        ImageGeometry::square(64, 1.0).unwrap()
    }

    #[test]
    fn snr_hand_arithmetic() {
        let mut img = ImageGrid::zeros(geom());
        // Radius-1 disk at (32, 32): 5 pixels. Values {1,2,3,1,3}: mean 2, sigma 1.
        img.values[(32, 32)] = 2.0;
        img.values[(31, 32)] = 1.0;
        img.values[(33, 32)] = 3.0;
        img.values[(32, 31)] = 1.0;
        img.values[(32, 33)] = 3.0;
        let voi = Voi { center: (32, 32), radius: 1.0 };
        let snr = snr_voi(&img, &[voi]).unwrap();
        assert!((snr.value - 2.0).abs() < 1e-12);
        assert_eq!(snr.excluded, 0);
    }

    #[test]
    fn snr_constant_voi_is_error_or_excluded() {
        let mut img = ImageGrid::zeros(geom());
        img.values.fill(5.0);
        let flat = Voi { center: (32, 32), radius: 2.0 };
        assert!(matches!(snr_voi(&img, &[flat]), Err(MetricsError::AllVoisDegenerate)));

        // A degenerate VOI next to a valid one is excluded with a count.
        img.values[(20, 20)] = 6.0;
        let good = Voi { center: (20, 20), radius: 2.0 };
        let out = snr_voi(&img, &[flat, good]).unwrap();
        assert_eq!(out.excluded, 1);
    }

    #[test]
    fn snr_matches_recomputation_and_is_scale_invariant() {
        let mut img = ImageGrid::zeros(geom());
        let mut rng = seeds::rng(61, 0);
        for v in img.values.iter_mut() {
            *v = rng.gen_range(1.0..3.0);
        }
        let voi = Voi { center: (30, 34), radius: 4.0 };
        let got = snr_voi(&img, &[voi]).unwrap().value;

        let pixels = voi.pixels(&img.geometry);
        let n = pixels.len() as f64;
        let mean: f64 = pixels.iter().map(|&(r, c)| img.values[(r, c)]).sum::<f64>() / n;
        let sigma = (pixels
            .iter()
            .map(|&(r, c)| (img.values[(r, c)] - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt();
        assert!((got - mean / sigma).abs() < 1e-12);

        let scaled = ImageGrid { geometry: img.geometry, values: &img.values * 7.5 };
        let got2 = snr_voi(&scaled, &[voi]).unwrap().value;
        assert!((got - got2).abs() < 1e-9);
    }

    #[test]
    fn bias_examples() {
        let mut reference = ImageGrid::zeros(geom());
        reference.values.fill(2.0);
        let vois = [Voi { center: (32, 32), radius: 3.0 }, Voi { center: (20, 40), radius: 3.0 }];
        assert_eq!(bias_voi(&reference, &reference, &vois).unwrap(), 0.0);

        let test = ImageGrid { geometry: reference.geometry, values: &reference.values * 1.05 };
        let bias = bias_voi(&test, &reference, &vois).unwrap();
        assert!((bias - 5.0).abs() < 1e-9, "bias {bias}");

        let zero = ImageGrid::zeros(geom());
        assert!(matches!(
            bias_voi(&test, &zero, &vois),
            Err(MetricsError::ZeroReferenceMean(..))
        ));
    }

    #[test]
    fn bias_matches_bruteforce() {
        let mut rng = seeds::rng(67, 0);
        let mut test = ImageGrid::zeros(geom());
        let mut reference = ImageGrid::zeros(geom());
        for (t, r) in test.values.iter_mut().zip(reference.values.iter_mut()) {
            *t = rng.gen_range(1.0..2.0);
            *r = rng.gen_range(1.0..2.0);
        }
        let vois = [Voi { center: (28, 30), radius: 5.0 }, Voi { center: (40, 36), radius: 4.0 }];
        let got = bias_voi(&test, &reference, &vois).unwrap();
        let mut expect = 0.0;
        for voi in &vois {
            let px = voi.pixels(&test.geometry);
            let mt: f64 = px.iter().map(|&(r, c)| test.values[(r, c)]).sum::<f64>() / px.len() as f64;
            let mr: f64 =
                px.iter().map(|&(r, c)| reference.values[(r, c)]).sum::<f64>() / px.len() as f64;
            expect += 100.0 * (mt - mr) / mr;
        }
        expect /= vois.len() as f64;
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn mae_nonzero_ignores_zero_reference_voxels() {
        let mut reference = ImageGrid::zeros(geom());
        let mut test = ImageGrid::zeros(geom());
        reference.values[(10, 10)] = 1.0;
        reference.values[(11, 11)] = 1.0;
        test.values[(10, 10)] = 2.0; // error 1
        test.values[(11, 11)] = 4.0; // error 3
        test.values[(50, 50)] = 99.0; // zero-reference voxel, ignored
        assert_eq!(mae_nonzero(&test, &reference).unwrap(), 2.0);
        assert_eq!(mae_nonzero(&reference, &reference).unwrap(), 0.0);
        let zero = ImageGrid::zeros(geom());
        assert!(matches!(mae_nonzero(&test, &zero), Err(MetricsError::AllZeroReference)));
    }

    fn gaussian_blob(sigma: f64) -> ImageGrid {
        let mut img = ImageGrid::zeros(geom());
        for r in 0..64 {
            for c in 0..64 {
                let dr = r as f64 - 32.0;
                let dc = c as f64 - 32.0;
                img.values[(r, c)] = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            }
        }
        img
    }

    #[test]
    fn fwhm_of_gaussian_matches_analytic() {
        let sigma = 3.0;
        let img = gaussian_blob(sigma);
        let profile = line_profile_fwhm(&img, (32.0, 8.0), (32.0, 56.0), 256).unwrap();
        let expect = 2.0 * (2.0 * 2.0f64.ln()).sqrt() * sigma;
        assert!(
            (profile.fwhm - expect).abs() <= 0.03 * expect,
            "fwhm {} vs {expect}",
            profile.fwhm
        );

        // Positive affine intensity change leaves the baseline-relative FWHM.
        let affine = ImageGrid { geometry: img.geometry, values: &img.values * 2.5 + 10.0 };
        let p2 = line_profile_fwhm(&affine, (32.0, 8.0), (32.0, 56.0), 256).unwrap();
        assert!((p2.fwhm - profile.fwhm).abs() < 1e-9);
    }

    #[test]
    fn flat_profile_has_no_fwhm() {
        let mut img = ImageGrid::zeros(geom());
        img.values.fill(3.0);
        assert!(matches!(
            line_profile_fwhm(&img, (32.0, 8.0), (32.0, 56.0), 64),
            Err(MetricsError::UndefinedFwhm(_))
        ));
        assert!(matches!(
            line_profile_fwhm(&img, (32.0, 8.0), (32.0, 56.0), 8),
            Err(MetricsError::TooFewSamples(8))
        ));
        assert!(matches!(
            line_profile_fwhm(&img, (-1.0, 8.0), (32.0, 56.0), 64),
            Err(MetricsError::SegmentOutside)
        ));
    }

    #[test]
    fn asymmetric_triangle_matches_fine_grid_oracle() {
        let mut img = ImageGrid::zeros(geom());
        // Triangle along row 32: rises over 6 px, falls over 18 px.
        for c in 0..64 {
            let v = if (20..=26).contains(&c) {
                (c - 20) as f64 / 6.0
            } else if (27..45).contains(&c) {
                1.0 - (c - 26) as f64 / 18.0
            } else {
                0.0
            };
            img.values[(32, c)] = v;
        }
        let p0 = (32.0, 10.0);
        let p1 = (32.0, 54.0);
        let samples = 128;
        let profile = line_profile_fwhm(&img, p0, p1, samples).unwrap();

        // Brute force: dense independent bilinear sampling and crossing scan.
        let dense = 200_000usize;
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut vals = Vec::with_capacity(dense);
        for i in 0..dense {
            let t = i as f64 / (dense - 1) as f64;
            let c = 10.0 + t * 44.0;
            // Interpolate along the row directly.
            let c0 = c.floor();
            let w = c - c0;
            let v = (1.0 - w) * img.values[(32, c0 as usize)]
                + w * img.values[(32, (c0 as usize + 1).min(63))];
            vals.push(v);
            if v > best.1 {
                best = (i, v);
            }
        }
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let half = lo + (best.1 - lo) / 2.0;
        let left = (0..best.0).rev().find(|&i| vals[i] <= half).unwrap();
        let right = (best.0..dense).find(|&i| vals[i] <= half).unwrap();
        let oracle = (right - left) as f64 / (dense - 1) as f64 * 44.0;

        let spacing = 44.0 / (samples - 1) as f64;
        assert!(
            (profile.fwhm - oracle).abs() <= 0.5 * spacing,
            "fwhm {} vs oracle {oracle} (spacing {spacing})",
            profile.fwhm
        );
    }

    #[test]
    fn auto_vois_prefer_uniform_areas() {
        let mut img = ImageGrid::zeros(geom());
        let mut rng = seeds::rng(71, 0);
        for r in 0..64 {
            for c in 0..64 {
                if img.geometry.in_fov(r, c) {
                    img.values[(r, c)] = 10.0 + rng.gen_range(-0.1..0.1);
                }
            }
        }
        // Rough quadrant: heavy texture.
        for r in 0..32 {
            for c in 0..32 {
                if img.geometry.in_fov(r, c) {
                    img.values[(r, c)] += rng.gen_range(-5.0..5.0);
                }
            }
        }
        let vois = auto_vois(&img, 3, 5.0);
        assert_eq!(vois.len(), 3);
        for voi in &vois {
            // All chosen centers should avoid the noisy quadrant.
            assert!(
                voi.center.0 >= 28 || voi.center.1 >= 28,
                "voi at {:?} sits in the textured quadrant",
                voi.center
            );
            // And respect spacing.
        }
        for i in 0..vois.len() {
            for j in i + 1..vois.len() {
                let dr = vois[i].center.0 as f64 - vois[j].center.0 as f64;
                let dc = vois[i].center.1 as f64 - vois[j].center.1 as f64;
                assert!((dr * dr + dc * dc).sqrt() >= 11.0);
            }
        }
    }

    #[test]
    fn metrics_invariant_under_shared_permutation() {
        let mut rng = seeds::rng(73, 0);
        let mut test = ImageGrid::zeros(geom());
        let mut reference = ImageGrid::zeros(geom());
        for (t, r) in test.values.iter_mut().zip(reference.values.iter_mut()) {
            *t = rng.gen_range(0.5..2.0);
            *r = rng.gen_range(0.5..2.0);
        }
        let base = mae_nonzero(&test, &reference).unwrap();
        // Flip both upside down.
        let flip = |img: &ImageGrid| ImageGrid {
            geometry: img.geometry,
            values: ndarray::Array2::from_shape_fn((64, 64), |(r, c)| img.values[(63 - r, c)]),
        };
        let flipped = mae_nonzero(&flip(&test), &flip(&reference)).unwrap();
        assert!((base - flipped).abs() < 1e-12);
    }
}
