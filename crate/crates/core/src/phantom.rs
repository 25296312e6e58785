//! Randomized ellipse phantoms and noisy measurement realizations; the
//! synthetic stand-in for patient training/validation/test data.

use crate::geom::{ImageGeometry, ImageGrid, Sinogram};
use crate::seeds;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum PhantomError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("all-zero sinogram: count scaling undefined")]
    ZeroSinogram,
    #[error("mean total counts must be positive, got {0}")]
    BadCountTarget(f64),
    #[error("thinning fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("thinning requires nonnegative integer counts, found {0}")]
    NonIntegerCounts(f64),
}

/// Ranges controlling random ellipse phantoms. Axis and jitter units are
/// pixels. Ellipses add; `background_disk` fills the whole FOV first.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub num_ellipses: (usize, usize),
    pub intensity: (f64, f64),
    pub axes: (f64, f64),
    pub center_jitter: (f64, f64),
    pub rotation: (f64, f64),
    pub background_disk: Option<f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            num_ellipses: (4, 10),
            intensity: (100.0, 600.0),
            axes: (2.0, 9.0),
            center_jitter: (0.0, 18.0),
            rotation: (0.0, std::f64::consts::PI),
            background_disk: Some(120.0),
        }
    }
}

impl PhantomSpec {
    fn validate(&self, geom: &ImageGeometry) -> Result<(), PhantomError> {
        let (lo, hi) = self.num_ellipses;
        if lo > hi {
            return Err(PhantomError::InvalidSpec("num_ellipses range reversed".into()));
        }
        for (name, (lo, hi)) in [
            ("intensity", self.intensity),
            ("axes", self.axes),
            ("center_jitter", self.center_jitter),
            ("rotation", self.rotation),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(PhantomError::InvalidSpec(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        if self.intensity.0 < 0.0 {
            return Err(PhantomError::InvalidSpec("intensities must be nonnegative".into()));
        }
        if self.background_disk.is_some_and(|b| b < 0.0) {
            return Err(PhantomError::InvalidSpec("background must be nonnegative".into()));
        }
        let fov_px = geom.fov_radius / geom.pixel_size;
        if hi > 0 && self.axes.0 <= 0.0 {
            return Err(PhantomError::InvalidSpec("axes must be positive".into()));
        }
        // Worst-case ellipse extent must fit inside the FOV circle.
        if hi > 0 && self.center_jitter.1 + self.axes.1 > fov_px {
            return Err(PhantomError::InvalidSpec(format!(
                "jitter {} + axis {} exceeds fov radius {fov_px} px",
                self.center_jitter.1, self.axes.1
            )));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Deterministic random phantom: optional FOV-filling background plus additive
/// ellipses that fit entirely inside the FOV. Units are pixels in `spec`.
pub fn generate_phantom(
    spec: &PhantomSpec,
    geom: &ImageGeometry,
    seed: u64,
) -> Result<ImageGrid, PhantomError> {
    spec.validate(geom)?;
    let mut rng = seeds::rng(seed, 0);

    let count = if spec.num_ellipses.0 == spec.num_ellipses.1 {
        spec.num_ellipses.0
    } else {
        rng.gen_range(spec.num_ellipses.0..=spec.num_ellipses.1)
    };
    let px = geom.pixel_size;
    let mut ellipses = Vec::with_capacity(count);
    for _ in 0..count {
        let a = sample_range(&mut rng, spec.axes) * px;
        let b = sample_range(&mut rng, spec.axes) * px;
        let theta = sample_range(&mut rng, spec.rotation);
        let rho = sample_range(&mut rng, spec.center_jitter) * px;
        let psi = rng.gen_range(0.0..std::f64::consts::TAU);
        let intensity = sample_range(&mut rng, spec.intensity);
        ellipses.push(Ellipse {
            cx: rho * psi.cos(),
            cy: rho * psi.sin(),
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            intensity,
        });
    }

    let mut img = ImageGrid::zeros(*geom);
    for row in 0..geom.height {
        for col in 0..geom.width {
            if !geom.in_fov(row, col) {
                continue;
            }
            let (x, y) = geom.pixel_center(row, col);
            let mut v = spec.background_disk.unwrap_or(0.0);
            for e in &ellipses {
                if e.contains(x, y) {
                    v += e.intensity;
                }
            }
            img.values[(row, col)] = v;
        }
    }
    Ok(img)
}

/// Independent Poisson draws with bin means scaled so the expected total
/// equals `mean_total_counts`. Output values are nonnegative integers.
pub fn apply_poisson(
    s: &Sinogram,
    mean_total_counts: f64,
    seed: u64,
) -> Result<Sinogram, PhantomError> {
    if !(mean_total_counts > 0.0) {
        return Err(PhantomError::BadCountTarget(mean_total_counts));
    }
    let total = s.total();
    if total <= 0.0 {
        return Err(PhantomError::ZeroSinogram);
    }
    let scale = mean_total_counts / total;
    let mut rng = seeds::rng(seed, 1);
    let mut out = Array2::zeros(s.values.dim());
    for (o, &v) in out.iter_mut().zip(s.values.iter()) {
        let lambda = v * scale;
        if lambda > 0.0 {
            let draw = Poisson::new(lambda)
                .map_err(|_| PhantomError::BadCountTarget(lambda))?
                .sample(&mut rng);
            *o = draw.round();
        }
    }
    Ok(Sinogram { geometry: s.geometry, values: out })
}

/// Binomial thinning: each count survives independently with probability
/// `fraction`. Statistically equivalent to list-mode thinning of Poisson data.
pub fn thin_counts(s: &Sinogram, fraction: f64, seed: u64) -> Result<Sinogram, PhantomError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PhantomError::BadFraction(fraction));
    }
    let mut out = Array2::zeros(s.values.dim());
    let mut rng = seeds::rng(seed, 2);
    for (o, &v) in out.iter_mut().zip(s.values.iter()) {
        if v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
            return Err(PhantomError::NonIntegerCounts(v));
        }
        if fraction == 1.0 {
            *o = v;
            continue;
        }
        let n = v as u64;
        if n > 0 {
            let draw = Binomial::new(n, fraction)
                .map_err(|_| PhantomError::BadFraction(fraction))?
                .sample(&mut rng);
            *o = draw as f64;
        }
    }
    Ok(Sinogram { geometry: s.geometry, values: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::SinogramGeometry;

    fn geom64() -> ImageGeometry {
        ImageGeometry::square(64, 1.0).unwrap()
    }

    #[test]
    fn empty_spec_gives_zero_image() {
        let spec = PhantomSpec {
            num_ellipses: (0, 0),
            background_disk: None,
            ..PhantomSpec::default()
        };
        let img = generate_phantom(&spec, &geom64(), 3).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_ellipse_matches_analytic_membership() {
        let spec = PhantomSpec {
            num_ellipses: (1, 1),
            intensity: (1.0, 1.0),
            axes: (10.0, 10.0),
            center_jitter: (0.0, 0.0),
            rotation: (0.0, 0.0),
            background_disk: None,
        };
        let geom = geom64();
        let img = generate_phantom(&spec, &geom, 11).unwrap();
        for row in 0..64 {
            for col in 0..64 {
                let (x, y) = geom.pixel_center(row, col);
                let inside = (x / 10.0).powi(2) + (y / 10.0).powi(2) <= 1.0;
                let expect = if inside { 1.0 } else { 0.0 };
                assert_eq!(img.values[(row, col)], expect, "pixel ({row},{col})");
            }
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, &geom64(), 99).unwrap();
        let b = generate_phantom(&spec, &geom64(), 99).unwrap();
        assert_eq!(a.values, b.values);
        let c = generate_phantom(&spec, &geom64(), 100).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn phantom_respects_fov_and_nonnegativity() {
        let geom = geom64();
        for seed in 0..5 {
            let img = generate_phantom(&PhantomSpec::default(), &geom, seed).unwrap();
            for row in 0..64 {
                for col in 0..64 {
                    let v = img.values[(row, col)];
                    assert!(v >= 0.0);
                    if !geom.in_fov(row, col) {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_spec_rejected() {
        let spec = PhantomSpec {
            axes: (30.0, 33.0),
            center_jitter: (0.0, 10.0),
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_phantom(&spec, &geom64(), 0),
            Err(PhantomError::InvalidSpec(_))
        ));
    }

    fn sino_geom() -> SinogramGeometry {
        SinogramGeometry::new(20, 16, 1.0).unwrap()
    }

    #[test]
    fn poisson_preserves_support() {
        let mut s = Sinogram::zeros(sino_geom());
        s.values[(3, 7)] = 2.0;
        let noisy = apply_poisson(&s, 5000.0, 1).unwrap();
        for (idx, &v) in noisy.values.indexed_iter() {
            if idx != (3, 7) {
                assert_eq!(v, 0.0);
            } else {
                assert!(v >= 0.0 && v.fract() == 0.0);
            }
        }
    }

    #[test]
    fn poisson_total_matches_target() {
        // Mean of totals over 100 seeds within 5*sigma/sqrt(100) of the target.
        let mut s = Sinogram::zeros(sino_geom());
        s.values.fill(1.0);
        let target = 200_000.0;
        let mut sum = 0.0;
        for seed in 0..100 {
            sum += apply_poisson(&s, target, seed).unwrap().total();
        }
        let mean = sum / 100.0;
        let band = 5.0 * target.sqrt() / 10.0;
        assert!((mean - target).abs() < band, "mean {mean} vs {target} +- {band}");
    }

    #[test]
    fn poisson_bin_mean_matches_scaled_mean() {
        let mut s = Sinogram::zeros(sino_geom());
        s.values.fill(1.0);
        s.values[(0, 0)] = 5.0;
        let target = 10_000.0;
        let lambda = 5.0 * target / s.total();
        let mut sum = 0.0;
        for seed in 0..1000 {
            sum += apply_poisson(&s, target, seed).unwrap().values[(0, 0)];
        }
        let mean = sum / 1000.0;
        let band = 5.0 * lambda.sqrt() / (1000.0f64).sqrt();
        assert!((mean - lambda).abs() < band, "mean {mean} vs {lambda} +- {band}");
    }

    #[test]
    fn poisson_rejects_zero_sinogram() {
        let s = Sinogram::zeros(sino_geom());
        assert!(matches!(apply_poisson(&s, 100.0, 0), Err(PhantomError::ZeroSinogram)));
    }

    #[test]
    fn thinning_identity_at_full_fraction() {
        let mut s = Sinogram::zeros(sino_geom());
        s.values[(1, 1)] = 42.0;
        s.values[(5, 9)] = 7.0;
        let t = thin_counts(&s, 1.0, 0).unwrap();
        assert_eq!(t.values, s.values);
    }

    #[test]
    fn thinning_survivors_in_binomial_band() {
        let mut s = Sinogram::zeros(sino_geom());
        s.values[(0, 0)] = 1000.0;
        let sigma = (1000.0f64 * 0.25).sqrt();
        for seed in 0..20 {
            let t = thin_counts(&s, 0.5, seed).unwrap();
            let survivors = t.values[(0, 0)];
            assert!((survivors - 500.0).abs() < 5.0 * sigma, "survivors {survivors}");
        }
    }

    #[test]
    fn complementary_thinnings_recover_total_in_expectation() {
        let mut s = Sinogram::zeros(sino_geom());
        s.values.fill(20.0);
        let total = s.total();
        let mut sum = 0.0;
        let n_pairs = 200;
        for seed in 0..n_pairs {
            let a = thin_counts(&s, 0.5, 2 * seed).unwrap();
            let b = thin_counts(&s, 0.5, 2 * seed + 1).unwrap();
            sum += a.total() + b.total();
        }
        let mean = sum / n_pairs as f64;
        // Var of each pair sum is total/2 (two independent 0.5-binomials per count).
        let band = 5.0 * (total / 2.0).sqrt() / (n_pairs as f64).sqrt();
        assert!((mean - total).abs() < band, "mean {mean} vs {total} +- {band}");
    }

    #[test]
    fn thinning_argument_validation() {
        let mut s = Sinogram::zeros(sino_geom());
        s.values[(0, 0)] = 3.0;
        assert!(matches!(thin_counts(&s, 0.0, 0), Err(PhantomError::BadFraction(_))));
        assert!(matches!(thin_counts(&s, 1.5, 0), Err(PhantomError::BadFraction(_))));
        s.values[(0, 1)] = 2.5;
        assert!(matches!(thin_counts(&s, 0.5, 0), Err(PhantomError::NonIntegerCounts(_))));
    }

    #[test]
    fn noise_outputs_are_nonnegative_integers_with_bounded_support() {
        let mut s = Sinogram::zeros(sino_geom());
        for (idx, v) in s.values.indexed_iter_mut() {
            if (idx.0 + idx.1) % 3 == 0 {
                *v = (idx.0 * 2 + idx.1) as f64;
            }
        }
        let noisy = apply_poisson(&s, 4000.0, 9).unwrap();
        let thinned = thin_counts(&noisy, 0.3, 10).unwrap();
        for ((&orig, &n), &t) in s.values.iter().zip(noisy.values.iter()).zip(thinned.values.iter()) {
            assert!(n >= 0.0 && n.fract() == 0.0);
            assert!(t >= 0.0 && t.fract() == 0.0);
            if orig == 0.0 {
                assert_eq!(n, 0.0);
            }
            if n == 0.0 {
                assert_eq!(t, 0.0);
            }
            assert!(t <= n);
        }
    }
}
