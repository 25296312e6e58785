//! Small separable image filters shared by the EM post-filter and the mask
//! refinement pipeline.

use ndarray::Array2;

/// Normalized 1-D Gaussian taps truncated at ceil(3*sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        taps.push((-0.5 * d * d / (sigma * sigma)).exp());
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur. Boundaries renormalize over in-bounds taps, so
/// constant inputs are preserved exactly away from and at the edges.
pub fn gaussian_blur(values: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let taps = gaussian_kernel(sigma);
    let radius = taps.len() / 2;
    let (h, w) = values.dim();

    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let cc = c as isize + k as isize - radius as isize;
                if cc >= 0 && (cc as usize) < w {
                    acc += t * values[(r, cc as usize)];
                    norm += t;
                }
            }
            tmp[(r, c)] = acc / norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let rr = r as isize + k as isize - radius as isize;
                if rr >= 0 && (rr as usize) < h {
                    acc += t * tmp[(rr as usize, c)];
                    norm += t;
                }
            }
            out[(r, c)] = acc / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let taps = gaussian_kernel(1.5);
        let sum: f64 = taps.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let n = taps.len();
        for i in 0..n / 2 {
            assert!((taps[i] - taps[n - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass_location() {
        let ones = Array2::from_elem((9, 9), 2.5);
        let blurred = gaussian_blur(&ones, 2.0);
        for v in blurred.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }

        let mut impulse = Array2::zeros((11, 11));
        impulse[(5, 5)] = 1.0;
        let blurred = gaussian_blur(&impulse, 1.0);
        let (argmax, _) = blurred
            .indexed_iter()
            .fold(((0, 0), f64::MIN), |(am, m), (idx, &v)| if v > m { (idx, v) } else { (am, m) });
        assert_eq!(argmax, (5, 5));
    }
}
