// Scratch pilot for the end-to-end training criteria. Not part of the
// deliverable test suite; run with
//   cargo run -p radonlab --example pilot_train -- <phantoms> <epochs> <patch> [dense]

use radonlab::baseline::EmConfig;
use radonlab::geom::{ImageGeometry, SinogramGeometry};
use radonlab::trainer::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let patch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let dense = args.get(4).map(|s| s == "dense").unwrap_or(false);

    let igeom = ImageGeometry::square(64, 1.0).unwrap();
    let sgeom = SinogramGeometry::new(100, 64, 1.0).unwrap();
    let mut ds_cfg = DatasetConfig::desk(igeom, sgeom);
    ds_cfg.em = EmConfig::target_recipe();

    let t0 = Instant::now();
    let dataset = build_dataset(n, &ds_cfg, 42, None).unwrap();
    eprintln!("dataset {n} phantoms in {:.1}s", t0.elapsed().as_secs_f64());

    let layer = if dense {
        use ndarray::Array2;
        use radonlab::maskgen::{tile_patches, SinogramMask};
        let tiling = tile_patches(&igeom, 64).unwrap();
        let all = Array2::from_elem((sgeom.num_angles, sgeom.num_bins), true);
        let surviving: Vec<usize> = (0..sgeom.total_bins()).collect();
        let masks = vec![SinogramMask { patch_id: 0, mask: all, surviving }];
        radonlab::inversion::InversionLayer::new(tiling, sgeom, masks, 42).unwrap()
    } else {
        projection_mask_layer(&igeom, sgeom, patch, 2, 42).unwrap()
    };
    eprintln!("layer params: {}", layer.parameter_count());

    let cfg = TrainConfig::default();
    let mut session = TrainerSession::new(layer, cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t1 = Instant::now();
    for chunk in 0..(epochs / 10).max(1) {
        let stats = session.run(&dataset, 10.min(epochs), dir.path()).unwrap();
        let last = stats.last().unwrap();
        let (test_mae, test_ms) = session.evaluate(&dataset, &dataset.split.test).unwrap();
        eprintln!(
            "epoch {:3} ({:5.0}s): val_mae {:.4} val_ms_ssim {:.4} | test_mae {:.4} test_ms_ssim {:.4}",
            (chunk + 1) * 10,
            t1.elapsed().as_secs_f64(),
            last.val_mae,
            last.val_ms_ssim,
            test_mae,
            1.0 - test_ms
        );
    }
    eprintln!("best epoch {} (score {:.4})", session.best_epoch, session.best_score);
    let best = radonlab::inversion::load_layer(&dir.path().join("best")).unwrap();
    session.layer = best;
    let (test_mae, test_ms) = session.evaluate(&dataset, &dataset.split.test).unwrap();
    eprintln!(
        "best checkpoint: test_mae {:.4} test_ms_ssim {:.4}",
        test_mae,
        1.0 - test_ms
    );
}
