// Scratch probe: band-mass of the min-norm least-squares dense layer for
// different phantom ensembles, solved exactly through the Gram matrix.
//   cargo run --example pilot_span -- <num_ellipses> <axis_max> <pairs>

use radonlab::geom::*;
use radonlab::phantom::*;
use radonlab::projector::*;
use radonlab::seeds;

fn cholesky_factor(g: &mut Vec<Vec<f64>>) {
    let n = g.len();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g[i][j];
            for k in 0..j {
                sum -= g[i][k] * g[j][k];
            }
            if i == j {
                g[i][j] = sum.max(1e-12).sqrt();
            } else {
                g[i][j] = sum / g[j][j];
            }
        }
    }
}

fn cholesky_solve_factored(g: &Vec<Vec<f64>>, rhs: &mut [f64]) {
    let n = g.len();
    for i in 0..n {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= g[i][k] * rhs[k];
        }
        rhs[i] = sum / g[i][i];
    }
    for i in (0..n).rev() {
        let mut sum = rhs[i];
        for k in i + 1..n {
            sum -= g[k][i] * rhs[k];
        }
        rhs[i] = sum / g[i][i];
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ne: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let axis_max: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let size: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(64);
    let angles: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(100);
    let bins: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(64);

    let ig = ImageGeometry::square(size, 1.0).unwrap();
    let spacing = (size as f64 / bins as f64).max(1.0);
    let sg = SinogramGeometry::new(angles, bins, spacing).unwrap();
    let jitter = (size as f64 / 2.0 - axis_max - 0.5).max(0.0);
    let spec = PhantomSpec {
        num_ellipses: (ne.saturating_sub(2).max(1), ne),
        intensity: (0.5, 1.5),
        axes: (0.5, axis_max),
        center_jitter: (0.0, jitter),
        rotation: (0.0, std::f64::consts::PI),
        background_disk: None,
    };
    let nbins = sg.total_bins();
    let mut sinos: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut imgs: Vec<ImageGrid> = Vec::with_capacity(n);
    for i in 0..n {
        let img = generate_phantom(&spec, &ig, seeds::derive(7, i as u64)).unwrap();
        let s = forward_project(&img, sg, ProjectorConfig::default()).unwrap();
        sinos.push(s.values.iter().copied().collect());
        imgs.push(img);
    }

    // Gram matrix with a small ridge.
    use rayon::prelude::*;
    let mut gram: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0f64; n];
            for j in 0..n {
                row[j] = sinos[i].iter().zip(sinos[j].iter()).map(|(a, b)| a * b).sum();
            }
            row
        })
        .collect();
    let trace: f64 = (0..n).map(|i| gram[i][i]).sum();
    let ridge = 1e-8 * trace / n as f64;
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += ridge;
    }
    cholesky_factor(&mut gram);

    // Sample 100 FOV pixels, solve for each, measure band mass.
    let fov = fov_pixel_list(&ig);
    use rand::seq::SliceRandom;
    let mut rng = seeds::rng(13, 0);
    let mut indices: Vec<usize> = (0..fov.len()).collect();
    indices.shuffle(&mut rng);
    let mut hits = 0;
    let mut fracs = Vec::new();
    for &pi in indices[..100].iter() {
        let (r, c) = fov[pi];
        let mut rhs: Vec<f64> = imgs.iter().map(|img| img.values[(r, c)]).collect();
        cholesky_solve_factored(&gram, &mut rhs);
        // w = S^T alpha
        let mut w = vec![0.0f64; nbins];
        for (alpha, s) in rhs.iter().zip(sinos.iter()) {
            if *alpha != 0.0 {
                for (wv, sv) in w.iter_mut().zip(s.iter()) {
                    *wv += alpha * sv;
                }
            }
        }
        let (x, y) = ig.pixel_center(r, c);
        let rad = (x * x + y * y).sqrt();
        let phi = y.atan2(x);
        let mut total = 0.0;
        let mut band = 0.0;
        for a in 0..sg.num_angles {
            let tracebin = sg.offset_to_bin(rad * (sg.angle(a) - phi).cos());
            for b in 0..sg.num_bins {
                let v = w[a * sg.num_bins + b].abs();
                total += v;
                if (b as f64 - tracebin).abs() <= 3.0 {
                    band += v;
                }
            }
        }
        let f = band / total.max(1e-30);
        fracs.push(f);
        if f >= 0.6 {
            hits += 1;
        }
    }
    fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "spec ne={ne} axes<={axis_max} pairs={n} geo {size}/{angles}x{bins}: band>=60% for {hits}/100; p10 {:.3} med {:.3} p90 {:.3}",
        fracs[10], fracs[50], fracs[90]
    );

    // Mass profile vs band half-width for one central pixel.
    let (r, c) = fov[fov.len() / 2 + 3];
    let mut rhs: Vec<f64> = imgs.iter().map(|img| img.values[(r, c)]).collect();
    cholesky_solve_factored(&gram, &mut rhs);
    let mut w = vec![0.0f64; nbins];
    for (alpha, s) in rhs.iter().zip(sinos.iter()) {
        for (wv, sv) in w.iter_mut().zip(s.iter()) {
            *wv += alpha * sv;
        }
    }
    let (x, y) = ig.pixel_center(r, c);
    let rad = (x * x + y * y).sqrt();
    let phi = y.atan2(x);
    let total: f64 = w.iter().map(|v| v.abs()).sum();
    print!("pixel ({r},{c}) mass by half-width:");
    for hw in [1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 16.0] {
        let mut band = 0.0;
        for a in 0..sg.num_angles {
            let tracebin = sg.offset_to_bin(rad * (sg.angle(a) - phi).cos());
            for b in 0..sg.num_bins {
                if (b as f64 - tracebin).abs() <= hw {
                    band += w[a * sg.num_bins + b].abs();
                }
            }
        }
        print!(" {hw}:{:.3}", band / total);
    }
    println!();
    // Also: positive vs negative mass and per-angle concentration.
    let pos: f64 = w.iter().filter(|v| **v > 0.0).sum();
    let neg: f64 = -w.iter().filter(|v| **v < 0.0).sum::<f64>();
    println!("positive mass {pos:.3} negative mass {neg:.3}");
}
