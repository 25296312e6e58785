// Diagnostic: where does the MS-SSIM of trained predictions go?
use radonlab::baseline::EmConfig;
use radonlab::geom::*;
use radonlab::inversion::layer_forward;
use radonlab::objective::*;
use radonlab::trainer::*;

fn main() {
    let igeom = ImageGeometry::square(64, 1.0).unwrap();
    let sgeom = SinogramGeometry::new(100, 64, 1.0).unwrap();
    let mut ds_cfg = DatasetConfig::desk(igeom, sgeom);
    ds_cfg.em = EmConfig::target_recipe();
    let dataset = build_dataset(100, &ds_cfg, 42, None).unwrap();
    let layer = projection_mask_layer(&igeom, sgeom, 16, 2, 42).unwrap();
    let mut session = TrainerSession::new(layer, TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    session.run(&dataset, 30, dir.path()).unwrap();

    let idx = dataset.split.test[0];
    let pred = layer_forward(&session.layer, &dataset.input_sinogram(idx)).unwrap();
    let target = &dataset.targets[idx];
    let range = target.iter().cloned().fold(0.0f64, f64::max);
    eprintln!(
        "target range {range:.3}, pred min {:.3} max {:.3}",
        pred.values.iter().cloned().fold(f64::INFINITY, f64::min),
        pred.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
    let (mae, _) = mae_loss_grad(&pred.values, target).unwrap();
    eprintln!("mae {mae:.4}");
    for m in 1..=3 {
        let cfg = LossConfig::new(m, range).unwrap();
        let sim = ms_ssim_similarity(&pred.values, target, &cfg).unwrap();
        eprintln!("M={m}: sim {sim:.5}");
    }
    let mut errs: Vec<f64> =
        pred.values.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).collect();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = errs.len();
    eprintln!(
        "err p50 {:.4} p90 {:.4} p99 {:.4} max {:.4}",
        errs[n / 2],
        errs[n * 9 / 10],
        errs[n * 99 / 100],
        errs[n - 1]
    );
    let local_sigma = |img: &ndarray::Array2<f64>, r0: usize, c0: usize| {
        let mut vals = Vec::new();
        for r in r0..r0 + 11 {
            for c in c0..c0 + 11 {
                vals.push(img[(r, c)]);
            }
        }
        let mu: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    eprintln!(
        "local sigma at (28,28): target {:.4} pred {:.4}",
        local_sigma(target, 28, 28),
        local_sigma(&pred.values, 28, 28)
    );
    eprintln!("C2 = {:.5}", (0.03 * range).powi(2));
}
