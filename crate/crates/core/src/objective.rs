//! Training losses: mean absolute error, multi-scale SSIM, and the
//! dynamically balanced combination of the two. The MS-SSIM backward pass is
//! hand-derived; finite-difference tests pin it down.

use ndarray::Array2;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ObjectiveError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{scales} scales need at least {needed} pixels per side, image has {side}")]
    TooManyScales { scales: usize, needed: usize, side: usize },
    #[error("invalid loss config: {0}")]
    BadConfig(String),
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// MS-SSIM configuration. `data_range` is the dynamic range L of the target
/// batch; C1 = (K1 L)^2, C2 = (K2 L)^2, C3 = C2/2.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub scales: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    window: Vec<f64>,
}

impl LossConfig {
    pub fn new(scales: usize, data_range: f64) -> Result<Self, ObjectiveError> {
        if scales == 0 {
            return Err(ObjectiveError::BadConfig("need at least one scale".into()));
        }
        if !(data_range > 0.0) || !data_range.is_finite() {
            return Err(ObjectiveError::BadConfig(format!("bad data range {data_range}")));
        }
        // 11-tap Gaussian, sigma 1.5, normalized.
        let radius = (SSIM_WINDOW / 2) as f64;
        let mut window = Vec::with_capacity(SSIM_WINDOW);
        for i in 0..SSIM_WINDOW {
            let d = i as f64 - radius;
            window.push((-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
        let sum: f64 = window.iter().sum();
        for w in &mut window {
            *w /= sum;
        }
        Ok(Self { scales, k1: 0.01, k2: 0.03, data_range, window })
    }

    /// Desk-scale default: 3 scales.
    pub fn desk(data_range: f64) -> Result<Self, ObjectiveError> {
        Self::new(3, data_range)
    }
}

/// Mean absolute error over all N voxels.
pub fn mae_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, ObjectiveError> {
    if a.dim() != b.dim() {
        return Err(ObjectiveError::ShapeMismatch(a.dim(), b.dim()));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// MAE and its gradient with respect to the first argument.
pub fn mae_loss_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    if a.dim() != b.dim() {
        return Err(ObjectiveError::ShapeMismatch(a.dim(), b.dim()));
    }
    let n = a.len() as f64;
    let mut grad = Array2::zeros(a.dim());
    let mut sum = 0.0;
    for ((g, &x), &y) in grad.iter_mut().zip(a.iter()).zip(b.iter()) {
        let d = x - y;
        sum += d.abs();
        *g = d.signum() * (d != 0.0) as u8 as f64 / n;
    }
    Ok((sum / n, grad))
}

/// Separable valid convolution with a symmetric 1-D window; output shrinks by
/// window-1 in each axis.
fn conv_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let src = img.as_slice().expect("standard layout");
    let mut tmp = vec![0.0f64; h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        let dst = &mut tmp[r * ow..(r + 1) * ow];
        for (c, d) in dst.iter_mut().enumerate() {
            let window = &row[c..c + k];
            let mut acc = 0.0;
            for (t, x) in taps.iter().zip(window.iter()) {
                acc += t * x;
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        let dst = &mut out[r * ow..(r + 1) * ow];
        for (i, &t) in taps.iter().enumerate() {
            let row = &tmp[(r + i) * ow..(r + i + 1) * ow];
            for (d, x) in dst.iter_mut().zip(row.iter()) {
                *d += t * x;
            }
        }
    }
    Array2::from_shape_vec((oh, ow), out).expect("shape")
}

/// Adjoint of [`conv_valid`]: scatter a valid-position map back to full size.
fn conv_valid_adjoint(grad: &Array2<f64>, taps: &[f64], full: (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grad.dim();
    let k = taps.len();
    let src = grad.as_slice().expect("standard layout");
    let mut tmp = vec![0.0f64; full.0 * gw];
    for r in 0..gh {
        let row = &src[r * gw..(r + 1) * gw];
        for (i, &t) in taps.iter().enumerate() {
            let dst = &mut tmp[(r + i) * gw..(r + i + 1) * gw];
            for (d, x) in dst.iter_mut().zip(row.iter()) {
                *d += t * x;
            }
        }
    }
    let mut out = vec![0.0f64; full.0 * full.1];
    for r in 0..full.0 {
        let row = &tmp[r * gw..(r + 1) * gw];
        let dst = &mut out[r * full.1..(r + 1) * full.1];
        for (i, &t) in taps.iter().enumerate() {
            for (d, x) in dst[i..i + gw].iter_mut().zip(row.iter()) {
                *d += t * x;
            }
        }
    }
    Array2::from_shape_vec(full, out).expect("shape")
}

/// 2x2 mean pooling with floor halving.
fn pool2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[(r, c)] = 0.25
                * (img[(2 * r, 2 * c)]
                    + img[(2 * r, 2 * c + 1)]
                    + img[(2 * r + 1, 2 * c)]
                    + img[(2 * r + 1, 2 * c + 1)]);
        }
    }
    out
}

fn pool2_adjoint(grad: &Array2<f64>, full: (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grad.dim();
    let mut out = Array2::zeros(full);
    for r in 0..gh {
        for c in 0..gw {
            let g = 0.25 * grad[(r, c)];
            out[(2 * r, 2 * c)] += g;
            out[(2 * r, 2 * c + 1)] += g;
            out[(2 * r + 1, 2 * c)] += g;
            out[(2 * r + 1, 2 * c + 1)] += g;
        }
    }
    out
}

struct ScaleCache {
    a: Array2<f64>,
    b: Array2<f64>,
    mu_a: Array2<f64>,
    mu_b: Array2<f64>,
    num: Array2<f64>,  // 2*sigma_ab + C2
    den: Array2<f64>,  // sigma_a^2 + sigma_b^2 + C2
    cs: Array2<f64>,
    lum: Option<Array2<f64>>,
    score: f64,
}

fn scale_stats(a: Array2<f64>, b: Array2<f64>, cfg: &LossConfig, coarsest: bool) -> ScaleCache {
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mu_a = conv_valid(&a, &cfg.window);
    let mu_b = conv_valid(&b, &cfg.window);
    let ea2 = conv_valid(&(&a * &a), &cfg.window);
    let eb2 = conv_valid(&(&b * &b), &cfg.window);
    let eab = conv_valid(&(&a * &b), &cfg.window);

    let dim = mu_a.dim();
    let mut num = Array2::zeros(dim);
    let mut den = Array2::zeros(dim);
    let mut cs = Array2::zeros(dim);
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            let sab = eab[(r, c)] - mu_a[(r, c)] * mu_b[(r, c)];
            let sa2 = ea2[(r, c)] - mu_a[(r, c)] * mu_a[(r, c)];
            let sb2 = eb2[(r, c)] - mu_b[(r, c)] * mu_b[(r, c)];
            // With C3 = C2/2 the contrast*structure product collapses to this ratio.
            num[(r, c)] = 2.0 * sab + c2;
            den[(r, c)] = sa2 + sb2 + c2;
            cs[(r, c)] = num[(r, c)] / den[(r, c)];
        }
    }
    let n = (dim.0 * dim.1) as f64;
    let (lum, score) = if coarsest {
        let mut lum = Array2::zeros(dim);
        let mut acc = 0.0;
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let l = (2.0 * mu_a[(r, c)] * mu_b[(r, c)] + c1)
                    / (mu_a[(r, c)] * mu_a[(r, c)] + mu_b[(r, c)] * mu_b[(r, c)] + c1);
                lum[(r, c)] = l;
                acc += l * cs[(r, c)];
            }
        }
        (Some(lum), acc / n)
    } else {
        (None, cs.sum() / n)
    };
    ScaleCache { a, b, mu_a, mu_b, num, den, cs, lum, score }
}

fn check_scales(dim: (usize, usize), scales: usize) -> Result<(), ObjectiveError> {
    let mut side = dim.0.min(dim.1);
    let needed = SSIM_WINDOW << (scales - 1);
    for _ in 1..scales {
        side /= 2;
    }
    if side < SSIM_WINDOW {
        return Err(ObjectiveError::TooManyScales { scales, needed, side: dim.0.min(dim.1) });
    }
    Ok(())
}

fn ms_ssim_forward(
    a: &Array2<f64>,
    b: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<Vec<ScaleCache>, ObjectiveError> {
    if a.dim() != b.dim() {
        return Err(ObjectiveError::ShapeMismatch(a.dim(), b.dim()));
    }
    check_scales(a.dim(), cfg.scales)?;
    let mut caches = Vec::with_capacity(cfg.scales);
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    for j in 0..cfg.scales {
        let coarsest = j + 1 == cfg.scales;
        let (next_a, next_b) = if coarsest {
            (Array2::zeros((0, 0)), Array2::zeros((0, 0)))
        } else {
            (pool2(&cur_a), pool2(&cur_b))
        };
        caches.push(scale_stats(cur_a, cur_b, cfg, coarsest));
        cur_a = next_a;
        cur_b = next_b;
    }
    Ok(caches)
}

/// MS-SSIM loss `1 - l_M * prod_j cs_j`, each factor averaged over valid
/// window positions; the luminance term enters only at the coarsest scale.
pub fn ms_ssim_loss(a: &Array2<f64>, b: &Array2<f64>, cfg: &LossConfig) -> Result<f64, ObjectiveError> {
    let caches = ms_ssim_forward(a, b, cfg)?;
    let similarity: f64 = caches.iter().map(|c| c.score).product();
    Ok(1.0 - similarity)
}

/// MS-SSIM similarity in [-1, 1]; 1 means identical.
pub fn ms_ssim_similarity(
    a: &Array2<f64>,
    b: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<f64, ObjectiveError> {
    Ok(1.0 - ms_ssim_loss(a, b, cfg)?)
}

/// MS-SSIM loss and its gradient with respect to the first argument.
pub fn ms_ssim_loss_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    let caches = ms_ssim_forward(a, b, cfg)?;
    let similarity: f64 = caches.iter().map(|c| c.score).product();
    let c1 = (cfg.k1 * cfg.data_range).powi(2);

    // Backward from the coarsest scale toward the finest.
    let mut carried: Option<Array2<f64>> = None;
    for (j, cache) in caches.iter().enumerate().rev() {
        // d(loss)/d(score_j) = -prod_{i != j} score_i
        let others: f64 = caches
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .map(|(_, c)| c.score)
            .product();
        let upstream = -others;

        let dim = cache.cs.dim();
        let n = (dim.0 * dim.1) as f64;
        let mut g_mu_a = Array2::zeros(dim);
        let mut g_ea2 = Array2::zeros(dim);
        let mut g_eab = Array2::zeros(dim);
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let u = upstream / n;
                let num = cache.num[(r, c)];
                let den = cache.den[(r, c)];
                let mu_a = cache.mu_a[(r, c)];
                let mu_b = cache.mu_b[(r, c)];
                // cs = num/den with num = 2(eab - mu_a mu_b) + C2,
                // den = (ea2 - mu_a^2) + (eb2 - mu_b^2) + C2.
                let dcs_dnum = 1.0 / den;
                let dcs_dden = -num / (den * den);
                let (w_cs, w_lum) = match &cache.lum {
                    Some(lum) => (u * lum[(r, c)], u * cache.cs[(r, c)]),
                    None => (u, 0.0),
                };
                g_eab[(r, c)] += w_cs * 2.0 * dcs_dnum;
                g_ea2[(r, c)] += w_cs * dcs_dden;
                g_mu_a[(r, c)] +=
                    w_cs * (2.0 * dcs_dnum * (-mu_b) + dcs_dden * (-2.0 * mu_a));
                if w_lum != 0.0 {
                    let nl = 2.0 * mu_a * mu_b + c1;
                    let dl = mu_a * mu_a + mu_b * mu_b + c1;
                    g_mu_a[(r, c)] += w_lum * (2.0 * mu_b * dl - nl * 2.0 * mu_a) / (dl * dl);
                }
            }
        }
        let full = cache.a.dim();
        let mut g_img = conv_valid_adjoint(&g_mu_a, &cfg.window, full);
        let back_ea2 = conv_valid_adjoint(&g_ea2, &cfg.window, full);
        let back_eab = conv_valid_adjoint(&g_eab, &cfg.window, full);
        for r in 0..full.0 {
            for c in 0..full.1 {
                g_img[(r, c)] +=
                    2.0 * cache.a[(r, c)] * back_ea2[(r, c)] + cache.b[(r, c)] * back_eab[(r, c)];
            }
        }
        if let Some(coarser) = carried.take() {
            g_img += &pool2_adjoint(&coarser, full);
        }
        carried = Some(g_img);
    }
    Ok((1.0 - similarity, carried.expect("at least one scale")))
}

/// Running-window balance between the raw MAE and MS-SSIM losses:
/// `alpha = sum(MAE) / (sum(MAE) + sum(MS-SSIM))` over the previous `n`
/// iterations, excluding the current one. Before any history, alpha = 0.5.
///
/// Entries are held as f32 so checkpointed state round-trips bit-exactly.
#[derive(Debug, Clone)]
pub struct AlphaBalancer {
    window: VecDeque<(f32, f32)>,
    n: usize,
}

impl AlphaBalancer {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "window length must be at least 1");
        Self { window: VecDeque::with_capacity(n + 1), n }
    }

    pub fn alpha(&self) -> f64 {
        let mut mae = 0.0f64;
        let mut ms = 0.0f64;
        for &(m, s) in &self.window {
            mae += m as f64;
            ms += s as f64;
        }
        if mae + ms <= 0.0 {
            0.5
        } else {
            mae / (mae + ms)
        }
    }

    pub fn push(&mut self, mae: f64, ms_ssim: f64) {
        self.window.push_back((mae as f32, ms_ssim as f32));
        while self.window.len() > self.n {
            self.window.pop_front();
        }
    }

    /// Balanced loss for the current iteration; pushes the raw losses into the
    /// window afterwards. Returns (loss, alpha).
    pub fn balanced(&mut self, mae: f64, ms_ssim: f64) -> (f64, f64) {
        let alpha = self.alpha();
        let loss = (1.0 - alpha) * mae + alpha * ms_ssim;
        self.push(mae, ms_ssim);
        (loss, alpha)
    }

    pub fn window_len(&self) -> usize {
        self.n
    }

    pub fn history(&self) -> Vec<(f32, f32)> {
        self.window.iter().copied().collect()
    }

    pub fn restore(n: usize, history: &[(f32, f32)]) -> Self {
        let mut b = Self::new(n);
        for &(m, s) in history {
            b.window.push_back((m, s));
        }
        while b.window.len() > n {
            b.window.pop_front();
        }
        b
    }
}

/// Combined loss on a pair of images, updating the balancer window.
pub fn balanced_loss(
    a: &Array2<f64>,
    b: &Array2<f64>,
    cfg: &LossConfig,
    balancer: &mut AlphaBalancer,
) -> Result<(f64, f64), ObjectiveError> {
    let mae = mae_loss(a, b)?;
    let ms = ms_ssim_loss(a, b, cfg)?;
    Ok(balancer.balanced(mae, ms))
}
