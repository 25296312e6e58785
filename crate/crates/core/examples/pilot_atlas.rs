// Scratch pilot for the learned-activation route: band-mass concentration of
// the trained dense layer and mask cross-validation statistics.
//   cargo run -p radonlab --example pilot_atlas -- <pairs> <epochs> <lr>

use radonlab::geom::*;
use radonlab::maskgen::*;
use radonlab::phantom::*;
use radonlab::projector::*;
use radonlab::seeds;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2e-4);

    let igeom = ImageGeometry::square(64, 1.0).unwrap();
    let sgeom = SinogramGeometry::new(100, 64, 1.0).unwrap();
    let spec = PhantomSpec {
        num_ellipses: (4, 8),
        intensity: (0.5, 1.5),
        axes: (0.5, 1.5),
        center_jitter: (0.0, 29.0),
        rotation: (0.0, std::f64::consts::PI),
        background_disk: None,
    };

    let t0 = Instant::now();
    let pairs: Vec<(Sinogram, ImageGrid)> = (0..n)
        .map(|i| {
            let img = generate_phantom(&spec, &igeom, seeds::derive(7, i as u64)).unwrap();
            let s = forward_project(&img, sgeom, ProjectorConfig::default()).unwrap();
            (s, img)
        })
        .collect();
    eprintln!("pairs in {:.1}s", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let atlas = train_dense_layer(&pairs, epochs, lr, 42).unwrap();
    eprintln!("trained {epochs} epochs lr {lr} in {:.1}s", t1.elapsed().as_secs_f64());

    // Band-mass statistic over 100 sampled FOV pixels.
    use rand::seq::SliceRandom;
    let mut rng = seeds::rng(13, 0);
    let mut indices: Vec<usize> = (0..atlas.fov_pixels.len()).collect();
    indices.shuffle(&mut rng);
    let sample = &indices[..100];
    let mut hits = 0;
    let mut fractions = Vec::new();
    for &pi in sample {
        let (r, c) = atlas.fov_pixels[pi];
        let (x, y) = igeom.pixel_center(r, c);
        let rad = (x * x + y * y).sqrt();
        let phi = y.atan2(x);
        let map = atlas.pixel_map(pi);
        let mut total = 0.0f64;
        let mut band = 0.0f64;
        for a in 0..sgeom.num_angles {
            let trace = sgeom.offset_to_bin(rad * (sgeom.angle(a) - phi).cos());
            for b in 0..sgeom.num_bins {
                let w = map[a * sgeom.num_bins + b].abs() as f64;
                total += w;
                if (b as f64 - trace).abs() <= 3.0 {
                    band += w;
                }
            }
        }
        let frac = band / total.max(1e-30);
        fractions.push(frac);
        if frac >= 0.60 {
            hits += 1;
        }
    }
    fractions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eprintln!(
        "band mass >= 60% for {hits}/100 pixels; p10 {:.3} median {:.3} p90 {:.3}",
        fractions[10], fractions[50], fractions[90]
    );

    // Cross-validation: how much of the atlas mass the masks capture.
    let tiling = tile_patches(&igeom, 16).unwrap();
    let refine = MaskRefineConfig::default();
    let mut worst_proj = 1.0f64;
    let mut worst_learned = 1.0f64;
    for patch in &tiling.patches {
        let proj = project_mask(&tiling, patch.patch_id, sgeom, 2).unwrap();
        let learned = refine_mask(&atlas, &tiling, patch.patch_id, &refine).unwrap();
        let mut total = 0.0f64;
        let mut in_proj = 0.0f64;
        let mut in_learned = 0.0f64;
        for &(r, c) in &patch.pixels {
            let idx = atlas.fov_index(r, c).unwrap();
            let map = atlas.pixel_map(idx);
            for (bin, &w) in map.iter().enumerate() {
                let w = w.abs() as f64;
                total += w;
                if proj.mask[(bin / sgeom.num_bins, bin % sgeom.num_bins)] {
                    in_proj += w;
                }
                if learned.mask[(bin / sgeom.num_bins, bin % sgeom.num_bins)] {
                    in_learned += w;
                }
            }
        }
        worst_proj = worst_proj.min(in_proj / total);
        worst_learned = worst_learned.min(in_learned / total);
        eprintln!(
            "patch {:2}: proj mass {:.3} learned mass {:.3} (learned bins {} / proj bins {})",
            patch.patch_id,
            in_proj / total,
            in_learned / total,
            learned.surviving.len(),
            proj.surviving.len()
        );
    }
    eprintln!("worst: proj {worst_proj:.3} learned {worst_learned:.3}");
}
