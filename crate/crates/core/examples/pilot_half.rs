// Scratch pilot for the low-count protocol and the noiseless overfit run.
use radonlab::baseline::{osem_reconstruct, EmConfig};
use radonlab::geom::*;
use radonlab::inversion::{layer_forward, load_layer};
use radonlab::objective::{ms_ssim_loss, LossConfig};
use radonlab::projector::{forward_project, ProjectorConfig};
use radonlab::trainer::*;
use std::time::Instant;

fn main() {
    let igeom = ImageGeometry::square(64, 1.0).unwrap();
    let sgeom = SinogramGeometry::new(100, 64, 1.0).unwrap();
    let t0 = Instant::now();

    // Noiseless overfit sanity: clean sinograms, OSEM-of-clean targets.
    let em = EmConfig::target_recipe();
    let base = DatasetConfig::desk(igeom, sgeom);
    let n = 32;
    let mut overfit_ds = Dataset {
        igeom,
        sgeom,
        inputs: Vec::new(),
        targets: Vec::new(),
        phantoms: Vec::new(),
        calibrations: vec![1.0; n],
        split: DatasetSplit { train: (0..n).collect(), validation: vec![], test: vec![] },
        sinogram_scale: base.sinogram_scale,
        image_scale: base.image_scale,
    };
    for i in 0..n {
        let phantom = radonlab::phantom::generate_phantom(
            &base.phantom_spec,
            &igeom,
            radonlab::seeds::derive(4242, i as u64),
        )
        .unwrap();
        let clean = forward_project(&phantom, sgeom, ProjectorConfig::default()).unwrap();
        let target = osem_reconstruct(&clean, igeom, &em).unwrap();
        overfit_ds.inputs.push(&clean.values / base.sinogram_scale);
        overfit_ds.targets.push(&target.values / base.image_scale);
        overfit_ds.phantoms.push(phantom.values);
    }
    let layer = projection_mask_layer(&igeom, sgeom, 16, 2, 42).unwrap();
    let mut session = TrainerSession::new(layer, TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for chunk in [20usize, 20, 20, 20] {
        session.run(&overfit_ds, chunk, dir.path()).unwrap();
        let (mae, ms) = session.evaluate(&overfit_ds, &overfit_ds.split.train).unwrap();
        eprintln!(
            "overfit epochs {}: train_mae {:.4} train_ms_ssim {:.4} ({:.0}s)",
            session.epochs_done,
            mae,
            1.0 - ms,
            t0.elapsed().as_secs_f64()
        );
    }

    // Thinned-input protocol.
    let t1 = Instant::now();
    let cfg_half = DatasetConfig { thinning: 0.5, ..DatasetConfig::desk(igeom, sgeom) };
    let half_ds = build_dataset(500, &cfg_half, 42, None).unwrap();
    eprintln!("half dataset in {:.0}s", t1.elapsed().as_secs_f64());
    let layer = projection_mask_layer(&igeom, sgeom, 16, 2, 42).unwrap();
    let cfg = TrainConfig::default();
    let mut half = TrainerSession::new(layer, cfg.clone()).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    half.run(&half_ds, cfg.epochs, dir2.path()).unwrap();
    let best = load_layer(&dir2.path().join("best")).unwrap();
    half.layer = best;
    let (mae, ms) = half.evaluate(&half_ds, &half_ds.split.test).unwrap();
    eprintln!(
        "half-count best checkpoint: test_mae {mae:.4} test_ms_ssim {:.4} ({:.0}s)",
        1.0 - ms,
        t1.elapsed().as_secs_f64()
    );

    // Per-phantom MS-SSIM: net on thinned input vs OSEM on thinned counts.
    let em = EmConfig::target_recipe();
    let mut wins = 0;
    for &i in half_ds.split.test.iter().take(10) {
        let reference = half_ds.unscaled_target(i);
        let range = reference.values.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let lc = LossConfig::new(3, range).unwrap();
        let pred = layer_forward(&half.layer, &half_ds.input_sinogram(i)).unwrap();
        let net_img = &pred.values * half_ds.image_scale;
        let net_ms = 1.0 - ms_ssim_loss(&net_img, &reference.values, &lc).unwrap();
        let counts = Sinogram::new(sgeom, &half_ds.inputs[i] * half_ds.sinogram_scale).unwrap();
        let osem_img = osem_reconstruct(&counts, igeom, &em).unwrap();
        let osem_cal = &osem_img.values * half_ds.calibrations[i];
        let osem_ms = 1.0 - ms_ssim_loss(&osem_cal, &reference.values, &lc).unwrap();
        eprintln!("phantom {i}: net {net_ms:.4} osem_thinned {osem_ms:.4}");
        if net_ms > osem_ms {
            wins += 1;
        }
    }
    eprintln!("net wins {wins}/10; total {:.0}s", t0.elapsed().as_secs_f64());
}
