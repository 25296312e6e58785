// Scratch throughput check for the hot training pieces.
use ndarray::Array2;
use radonlab::geom::*;
use radonlab::inversion::*;
use radonlab::maskgen::{tile_patches, SinogramMask};
use std::time::Instant;

fn main() {
    let ig = ImageGeometry::square(64, 1.0).unwrap();
    let sg = SinogramGeometry::new(100, 64, 1.0).unwrap();
    let tiling = tile_patches(&ig, 64).unwrap();
    let all = Array2::from_elem((sg.num_angles, sg.num_bins), true);
    let surviving: Vec<usize> = (0..sg.total_bins()).collect();
    let masks = vec![SinogramMask { patch_id: 0, mask: all, surviving }];
    let layer = InversionLayer::new(tiling, sg, masks, 42).unwrap();
    let params = layer.parameter_count() as f64;

    let sinos: Vec<Sinogram> = (0..16)
        .map(|i| {
            let mut s = Sinogram::zeros(sg);
            for (j, v) in s.values.iter_mut().enumerate() {
                *v = ((i * 31 + j) % 17) as f64 * 0.3;
            }
            s
        })
        .collect();
    let refs: Vec<&Sinogram> = sinos.iter().collect();

    let t = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let _ = layer_forward_batch(&layer, &refs).unwrap();
    }
    let secs = t.elapsed().as_secs_f64();
    println!("forward_batch: {:.2} Gflop/s", 2.0 * params * 16.0 * reps as f64 / secs / 1e9);

    let ups: Vec<Array2<f64>> =
        (0..16).map(|i| Array2::from_elem((64, 64), 0.01 * i as f64 + 0.1)).collect();
    let pairs: Vec<(&Sinogram, &Array2<f64>)> =
        sinos.iter().zip(ups.iter()).map(|(s, u)| (s, u)).collect();
    let mut grads = zero_gradients(&layer);
    let t = Instant::now();
    for _ in 0..reps {
        accumulate_batch_gradients(&layer, &pairs, &mut grads).unwrap();
    }
    let secs = t.elapsed().as_secs_f64();
    println!("grad_batch: {:.2} Gflop/s", 2.0 * params * 16.0 * reps as f64 / secs / 1e9);

    let mut adam = AdamState::new(&layer);
    let t = Instant::now();
    for _ in 0..reps {
        adam_step(&mut adam, &mut { InversionLayer::new(layer.tiling.clone(), sg, layer.masks.clone(), 1).unwrap() }, &grads, 1e-4).unwrap();
    }
    println!("adam: {:.3} s/step (incl rebuild overhead)", t.elapsed().as_secs_f64() / reps as f64);
}
