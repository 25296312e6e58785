// Scratch probe: band mass of the exact min-norm inverse rows A (A^T A)^+ e_p
// at a given geometry, via conjugate gradients on the normal equations.

use radonlab::geom::*;
use radonlab::projector::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(64);
    let angles: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let bins: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(64);

    let ig = ImageGeometry::square(size, 1.0).unwrap();
    let sg = SinogramGeometry::new(angles, bins, (size as f64 / bins as f64).max(1.0)).unwrap();
    let proj = Projector::new(ig, sg, ProjectorConfig::default()).unwrap();

    let normal = |z: &ImageGrid| -> ImageGrid {
        let s = proj.forward(z).unwrap();
        proj.adjoint(&s).unwrap()
    };

    let fov = fov_pixel_list(&ig);
    let mut report = Vec::new();
    for &(r, c) in [fov[fov.len() / 2 + 7], fov[fov.len() / 4], fov[fov.len() / 8]].iter() {
        // CG on (A^T A + eps) z = e_p.
        let mut z = ImageGrid::zeros(ig);
        let mut residual = ImageGrid::zeros(ig);
        residual.values[(r, c)] = 1.0;
        let mut p = residual.clone();
        let mut rs_old: f64 = residual.values.iter().map(|v| v * v).sum();
        for _ in 0..400 {
            let mut ap = normal(&p);
            ap.values = &ap.values + &(&p.values * 1e-9);
            let pap: f64 = p.values.iter().zip(ap.values.iter()).map(|(a, b)| a * b).sum();
            let alpha = rs_old / pap;
            z.values = &z.values + &(&p.values * alpha);
            residual.values = &residual.values - &(&ap.values * alpha);
            let rs_new: f64 = residual.values.iter().map(|v| v * v).sum();
            if rs_new.sqrt() < 1e-10 {
                break;
            }
            p.values = &residual.values + &(&p.values * (rs_new / rs_old));
            rs_old = rs_new;
        }
        let w = proj.forward(&z).unwrap();
        let (x, y) = ig.pixel_center(r, c);
        let rad = (x * x + y * y).sqrt();
        let phi = y.atan2(x);
        let total: f64 = w.values.iter().map(|v| v.abs()).sum();
        let mut line = format!("pixel ({r},{c}) residual {:.1e}:", rs_old.sqrt());
        for hw in [1.0, 2.0, 3.0, 5.0, 8.0] {
            let mut band = 0.0;
            for a in 0..sg.num_angles {
                let trace = sg.offset_to_bin(rad * (sg.angle(a) - phi).cos());
                for b in 0..sg.num_bins {
                    if (b as f64 - trace).abs() <= hw {
                        band += w.values[(a, b)].abs();
                    }
                }
            }
            line.push_str(&format!(" +-{hw}:{:.3}", band / total));
        }
        report.push(line);
    }
    for line in report {
        println!("{line}");
    }
}
