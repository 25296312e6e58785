//! Dataset synthesis and the training loop: epochs of seeded mini-batches,
//! the cyclic scheduler, dynamic loss balancing, per-epoch validation, and
//! bit-exact checkpoint/resume.

use crate::baseline::{osem_reconstruct, BaselineError, EmConfig};
use crate::geom::{GeometryError, ImageGeometry, ImageGrid, Sinogram, SinogramGeometry};
use crate::inversion::{
    adam_batch_step, layer_forward_batch, learning_rate, load_adam, load_layer, save_adam,
    save_layer, AdamState, InversionError, InversionLayer, SchedulerConfig,
};
use crate::objective::{
    mae_loss, mae_loss_grad, ms_ssim_loss, ms_ssim_loss_grad, AlphaBalancer, LossConfig,
    ObjectiveError,
};
use crate::phantom::{apply_poisson, generate_phantom, thin_counts, PhantomError, PhantomSpec};
use crate::projector::{forward_project, ProjectorConfig, ProjectorError};
use crate::seeds;
use crate::tensorfile::{self, TensorFileError};
use ndarray::Array2;
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TrainerError {
    #[error("need at least 3 phantoms, got {0}")]
    TooFewPhantoms(usize),
    #[error("split fractions must be nonnegative and sum to at most 1")]
    BadSplit,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at iteration {iteration} (eta {eta:.3e})")]
    NonFiniteLoss { iteration: u64, eta: f64 },
    #[error("dataset is missing {0}")]
    MissingData(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainerError {
    TrainerError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Everything needed to synthesize one dataset.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub igeom: ImageGeometry,
    pub sgeom: SinogramGeometry,
    pub phantom_spec: PhantomSpec,
    /// Expected total counts per slice before thinning.
    pub count_density: f64,
    /// Survival fraction applied to the input sinogram; 1.0 disables thinning.
    /// Targets always come from the un-thinned counts.
    pub thinning: f64,
    /// OSEM recipe used to produce training targets.
    pub em: EmConfig,
    pub split: (f64, f64, f64),
    pub sinogram_scale: f64,
    pub image_scale: f64,
}

impl DatasetConfig {
    pub fn desk(igeom: ImageGeometry, sgeom: SinogramGeometry) -> Self {
        Self {
            igeom,
            sgeom,
            phantom_spec: PhantomSpec::default(),
            count_density: 200_000.0,
            thinning: 1.0,
            em: EmConfig::target_recipe(),
            split: (0.8, 0.1, 0.1),
            sinogram_scale: 5.0,
            image_scale: 400.0,
        }
    }
}

/// In-memory dataset: scaled input sinograms and scaled OSEM targets, plus the
/// unscaled ground-truth phantoms for reference.
///
/// Targets are calibrated back to activity units before the /image_scale:
/// drawing Poisson counts rescales the sinogram by count_density/total, so a
/// count-domain reconstruction sits at an arbitrary scale until divided by
/// that factor, the synthetic analog of scanner calibration.
pub struct Dataset {
    pub igeom: ImageGeometry,
    pub sgeom: SinogramGeometry,
    pub inputs: Vec<Array2<f64>>,
    pub targets: Vec<Array2<f64>>,
    pub phantoms: Vec<Array2<f64>>,
    /// Per-volume counts-to-activity factor (multiply a count-domain
    /// reconstruction by this to land in activity units).
    pub calibrations: Vec<f64>,
    pub split: DatasetSplit,
    pub sinogram_scale: f64,
    pub image_scale: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_sinogram(&self, idx: usize) -> Sinogram {
        Sinogram { geometry: self.sgeom, values: self.inputs[idx].clone() }
    }

    /// Target image back in activity units.
    pub fn unscaled_target(&self, idx: usize) -> ImageGrid {
        ImageGrid { geometry: self.igeom, values: &self.targets[idx] * self.image_scale }
    }
}

fn split_ids(n: usize, fractions: (f64, f64, f64)) -> Result<DatasetSplit, TrainerError> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c > 1.0 + 1e-9 {
        return Err(TrainerError::BadSplit);
    }
    let n_train = (n as f64 * a).round() as usize;
    let n_val = (n as f64 * b).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Ok(DatasetSplit {
        train: (0..n_train).collect(),
        validation: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    })
}

/// Synthesize `n` phantoms: image -> forward projection -> Poisson counts ->
/// optional thinning -> scaled input; target = scaled OSEM of the un-thinned
/// counts. Deterministic per seed; parallel across phantoms with per-item
/// derived seeds. When `out_dir` is given all tensors are persisted there.
pub fn build_dataset(
    n: usize,
    cfg: &DatasetConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Dataset, TrainerError> {
    if n < 3 {
        return Err(TrainerError::TooFewPhantoms(n));
    }
    if !(cfg.thinning > 0.0 && cfg.thinning <= 1.0) {
        return Err(TrainerError::BadConfig(format!("thinning {}", cfg.thinning)));
    }
    if cfg.sinogram_scale <= 0.0 || cfg.image_scale <= 0.0 {
        return Err(TrainerError::BadConfig("scales must be positive".into()));
    }
    let split = split_ids(n, cfg.split)?;

    let items: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_, TrainerError> {
            let item_seed = seeds::derive(seed, i as u64);
            let phantom = generate_phantom(&cfg.phantom_spec, &cfg.igeom, item_seed)?;
            let clean = forward_project(&phantom, cfg.sgeom, ProjectorConfig::default())?;
            let noisy = apply_poisson(&clean, cfg.count_density, item_seed)?;
            let input = if cfg.thinning < 1.0 {
                thin_counts(&noisy, cfg.thinning, item_seed)?
            } else {
                noisy.clone()
            };
            // Counts-to-activity calibration: Poisson draws rescale the means
            // by count_density/total, so the count-domain reconstruction must
            // be multiplied back before the fixed image scaling applies.
            let calibration = clean.total() / cfg.count_density;
            let target = osem_reconstruct(&noisy, cfg.igeom, &cfg.em)?;
            Ok((
                phantom.values,
                &input.values / cfg.sinogram_scale,
                &target.values * (calibration / cfg.image_scale),
                calibration,
            ))
        })
        .collect::<Result<_, _>>()?;

    let mut dataset = Dataset {
        igeom: cfg.igeom,
        sgeom: cfg.sgeom,
        inputs: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
        phantoms: Vec::with_capacity(n),
        calibrations: Vec::with_capacity(n),
        split,
        sinogram_scale: cfg.sinogram_scale,
        image_scale: cfg.image_scale,
    };
    for (phantom, input, target, calibration) in items {
        dataset.phantoms.push(phantom);
        dataset.inputs.push(input);
        dataset.targets.push(target);
        dataset.calibrations.push(calibration);
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for i in 0..n {
            tensorfile::write_array2(&dir.join(format!("phantom_{i:04}.dpt")), &dataset.phantoms[i])?;
            tensorfile::write_array2(&dir.join(format!("input_{i:04}.dpt")), &dataset.inputs[i])?;
            tensorfile::write_array2(&dir.join(format!("target_{i:04}.dpt")), &dataset.targets[i])?;
        }
        let calib: Vec<f32> = dataset.calibrations.iter().map(|&c| c as f32).collect();
        tensorfile::write_tensor(&dir.join("calib.dpt"), &[n], &calib)?;
        let mut split_csv = String::from("id,role\n");
        for &i in &dataset.split.train {
            split_csv.push_str(&format!("{i},train\n"));
        }
        for &i in &dataset.split.validation {
            split_csv.push_str(&format!("{i},validation\n"));
        }
        for &i in &dataset.split.test {
            split_csv.push_str(&format!("{i},test\n"));
        }
        std::fs::write(dir.join("split.csv"), split_csv).map_err(|e| io_err(dir, e))?;
        let meta = format!(
            "key,value\nn,{n}\nwidth,{}\npixel_size,{:?}\nfov_radius,{:?}\nnum_angles,{}\nnum_bins,{}\nbin_spacing,{:?}\nsinogram_scale,{:?}\nimage_scale,{:?}\ncount_density,{:?}\nthinning,{:?}\nseed,{seed}\n",
            cfg.igeom.width,
            cfg.igeom.pixel_size,
            cfg.igeom.fov_radius,
            cfg.sgeom.num_angles,
            cfg.sgeom.num_bins,
            cfg.sgeom.bin_spacing,
            cfg.sinogram_scale,
            cfg.image_scale,
            cfg.count_density,
            cfg.thinning,
        );
        std::fs::write(dir.join("meta.csv"), meta).map_err(|e| io_err(dir, e))?;
    }
    Ok(dataset)
}

/// Load a dataset persisted by [`build_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, TrainerError> {
    let meta_path = dir.join("meta.csv");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let mut kv = std::collections::HashMap::new();
    for line in meta.lines().skip(1) {
        if let Some((k, v)) = line.split_once(',') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |key: &str| -> Result<f64, TrainerError> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainerError::MissingData(format!("meta key {key}")))
    };
    let n = get("n")? as usize;
    let width = get("width")? as usize;
    let igeom = ImageGeometry::new(width, width, get("pixel_size")?, get("fov_radius")?)?;
    let sgeom = SinogramGeometry::new(
        get("num_angles")? as usize,
        get("num_bins")? as usize,
        get("bin_spacing")?,
    )?;
    let mut dataset = Dataset {
        igeom,
        sgeom,
        inputs: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
        phantoms: Vec::with_capacity(n),
        calibrations: Vec::with_capacity(n),
        split: DatasetSplit::default(),
        sinogram_scale: get("sinogram_scale")?,
        image_scale: get("image_scale")?,
    };
    for i in 0..n {
        dataset.phantoms.push(tensorfile::read_array2(&dir.join(format!("phantom_{i:04}.dpt")))?);
        dataset.inputs.push(tensorfile::read_array2(&dir.join(format!("input_{i:04}.dpt")))?);
        dataset.targets.push(tensorfile::read_array2(&dir.join(format!("target_{i:04}.dpt")))?);
    }
    let (cdims, cvals) = tensorfile::read_tensor(&dir.join("calib.dpt"))?;
    if cdims != vec![n] {
        return Err(TrainerError::MissingData("calibration tensor".into()));
    }
    dataset.calibrations = cvals.into_iter().map(f64::from).collect();
    let split_path = dir.join("split.csv");
    let text = std::fs::read_to_string(&split_path).map_err(|e| io_err(&split_path, e))?;
    for line in text.lines().skip(1) {
        if let Some((id, role)) = line.split_once(',') {
            let id: usize =
                id.parse().map_err(|_| TrainerError::MissingData(format!("split id {id}")))?;
            match role {
                "train" => dataset.split.train.push(id),
                "validation" => dataset.split.validation.push(id),
                "test" => dataset.split.test.push(id),
                other => return Err(TrainerError::MissingData(format!("split role {other}"))),
            }
        }
    }
    Ok(dataset)
}

/// Training-loop knobs. Desk-scale defaults shrink the full regimen about 4x;
/// the full regimen stays reachable through the same fields.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub alpha_window: usize,
    pub loss_scales: usize,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            samples_per_epoch: 512,
            batch_size: 16,
            alpha_window: 100,
            loss_scales: 3,
            scheduler: SchedulerConfig::default(),
            seed: 42,
        }
    }
}

/// Mutable training state; survives checkpoint/resume bit-exactly.
pub struct TrainerSession {
    pub layer: InversionLayer,
    pub adam: AdamState,
    pub balancer: AlphaBalancer,
    pub iteration: u64,
    pub epochs_done: usize,
    pub best_score: f64,
    pub best_epoch: usize,
    cfg: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mae: f64,
    pub train_ms_ssim: f64,
    pub val_mae: f64,
    pub val_ms_ssim_loss: f64,
    pub val_ms_ssim: f64,
}

impl TrainerSession {
    pub fn new(layer: InversionLayer, cfg: TrainConfig) -> Result<Self, TrainerError> {
        if cfg.epochs == 0 || cfg.samples_per_epoch == 0 || cfg.batch_size == 0 {
            return Err(TrainerError::BadConfig("counts must be at least 1".into()));
        }
        let adam = AdamState::new(&layer);
        let balancer = AlphaBalancer::new(cfg.alpha_window.max(1));
        Ok(Self {
            layer,
            adam,
            balancer,
            iteration: 0,
            epochs_done: 0,
            best_score: f64::INFINITY,
            best_epoch: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn iterations_per_epoch(&self) -> u64 {
        (self.cfg.samples_per_epoch / self.cfg.batch_size).max(1) as u64
    }

    /// One optimizer step on a seeded batch drawn with replacement from the
    /// train split. Returns (mae, ms_ssim_loss, alpha, eta).
    fn step(&mut self, dataset: &Dataset) -> Result<(f64, f64, f64, f64), TrainerError> {
        let train = &dataset.split.train;
        if train.is_empty() {
            return Err(TrainerError::MissingData("train split".into()));
        }
        let mut rng = seeds::rng(self.cfg.seed, 1_000_000 + self.iteration);
        use rand::Rng;
        let batch: Vec<usize> =
            (0..self.cfg.batch_size).map(|_| train[rng.gen_range(0..train.len())]).collect();

        let range = batch
            .iter()
            .map(|&i| dataset.targets[i].iter().cloned().fold(0.0, f64::max))
            .fold(0.0, f64::max)
            .max(1e-12);
        let loss_cfg = LossConfig::new(self.cfg.loss_scales, range)?;

        let alpha = self.balancer.alpha();
        let b = batch.len() as f64;
        let sinos: Vec<Sinogram> = batch.iter().map(|&i| dataset.input_sinogram(i)).collect();
        let sino_refs: Vec<&Sinogram> = sinos.iter().collect();
        let preds = layer_forward_batch(&self.layer, &sino_refs)?;
        let per_sample: Vec<(f64, f64, Array2<f64>)> = batch
            .par_iter()
            .zip(preds.par_iter())
            .map(|(&i, pred)| -> Result<_, TrainerError> {
                let (mae, g_mae) = mae_loss_grad(&pred.values, &dataset.targets[i])?;
                let (ms, g_ms) = ms_ssim_loss_grad(&pred.values, &dataset.targets[i], &loss_cfg)?;
                let upstream = &g_mae * ((1.0 - alpha) / b) + &g_ms * (alpha / b);
                Ok((mae, ms, upstream))
            })
            .collect::<Result<_, _>>()?;

        let mae_mean = per_sample.iter().map(|s| s.0).sum::<f64>() / b;
        let ms_mean = per_sample.iter().map(|s| s.1).sum::<f64>() / b;
        let eta = learning_rate(self.iteration, &self.cfg.scheduler);
        let loss = (1.0 - alpha) * mae_mean + alpha * ms_mean;
        if !loss.is_finite() {
            return Err(TrainerError::NonFiniteLoss { iteration: self.iteration, eta });
        }
        self.balancer.push(mae_mean, ms_mean);

        let pairs: Vec<(&Sinogram, &Array2<f64>)> = sinos
            .iter()
            .zip(per_sample.iter())
            .map(|(sino, (_, _, up))| (sino, up))
            .collect();
        adam_batch_step(&mut self.adam, &mut self.layer, &pairs, eta)?;
        self.iteration += 1;
        Ok((mae_mean, ms_mean, alpha, eta))
    }

    /// Frozen evaluation over a list of dataset indices.
    pub fn evaluate(
        &self,
        dataset: &Dataset,
        ids: &[usize],
    ) -> Result<(f64, f64), TrainerError> {
        if ids.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let range = ids
            .iter()
            .map(|&i| dataset.targets[i].iter().cloned().fold(0.0, f64::max))
            .fold(0.0, f64::max)
            .max(1e-12);
        let loss_cfg = LossConfig::new(self.cfg.loss_scales, range)?;
        let sinos: Vec<Sinogram> = ids.iter().map(|&i| dataset.input_sinogram(i)).collect();
        let sino_refs: Vec<&Sinogram> = sinos.iter().collect();
        let preds = layer_forward_batch(&self.layer, &sino_refs)?;
        let sums: Vec<(f64, f64)> = ids
            .par_iter()
            .zip(preds.par_iter())
            .map(|(&i, pred)| -> Result<_, TrainerError> {
                let mae = mae_loss(&pred.values, &dataset.targets[i])?;
                let ms = ms_ssim_loss(&pred.values, &dataset.targets[i], &loss_cfg)?;
                Ok((mae, ms))
            })
            .collect::<Result<_, _>>()?;
        let n = ids.len() as f64;
        Ok((sums.iter().map(|s| s.0).sum::<f64>() / n, sums.iter().map(|s| s.1).sum::<f64>() / n))
    }

    /// Run `epochs` epochs, appending one history row per iteration to
    /// `history` and keeping the best-validation checkpoint under `run_dir`.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        epochs: usize,
        run_dir: &Path,
    ) -> Result<Vec<EpochStats>, TrainerError> {
        std::fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
        let history_path = run_dir.join("history.csv");
        let fresh = !history_path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&history_path)
            .map_err(|e| io_err(&history_path, e))?;
        let mut history = std::io::BufWriter::new(file);
        if fresh {
            writeln!(history, "iteration,epoch,eta,mae,ms_ssim,alpha,val_mae,val_ms_ssim")
                .map_err(|e| io_err(&history_path, e))?;
        }

        let ipe = self.iterations_per_epoch();
        let mut stats = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let epoch = self.epochs_done;
            let mut train_mae = 0.0;
            let mut train_ms = 0.0;
            for i in 0..ipe {
                let (mae, ms, alpha, eta) = self.step(dataset)?;
                train_mae += mae;
                train_ms += ms;
                let last = i + 1 == ipe;
                let (val_mae, val_ms) = if last {
                    self.evaluate(dataset, &dataset.split.validation)?
                } else {
                    (f64::NAN, f64::NAN)
                };
                let val_cols = if last && !val_mae.is_nan() {
                    format!("{:?},{:?}", val_mae, 1.0 - val_ms)
                } else {
                    ",".to_string()
                };
                writeln!(
                    history,
                    "{},{},{:?},{:?},{:?},{:?},{}",
                    self.iteration - 1,
                    epoch,
                    eta,
                    mae,
                    ms,
                    alpha,
                    val_cols
                )
                .map_err(|e| io_err(&history_path, e))?;
                if last {
                    let score = if val_mae.is_nan() {
                        // No validation split: fall back to the train epoch mean.
                        0.5 * (train_mae + train_ms) / ipe as f64
                    } else {
                        0.5 * val_mae + 0.5 * val_ms
                    };
                    if score < self.best_score {
                        self.best_score = score;
                        self.best_epoch = epoch;
                        save_layer(&run_dir.join("best"), &self.layer)?;
                    }
                    stats.push(EpochStats {
                        epoch,
                        train_mae: train_mae / ipe as f64,
                        train_ms_ssim: 1.0 - train_ms / ipe as f64,
                        val_mae,
                        val_ms_ssim_loss: val_ms,
                        val_ms_ssim: 1.0 - val_ms,
                    });
                }
            }
            self.epochs_done += 1;
        }
        history.flush().map_err(|e| io_err(&history_path, e))?;
        self.save_checkpoint(&run_dir.join("latest"))?;
        Ok(stats)
    }

    /// Persist the full resumable state: layer, Adam moments, balancer window
    /// and counters.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainerError> {
        save_layer(dir, &self.layer)?;
        save_adam(dir, &self.adam)?;
        let history = self.balancer.history();
        let flat: Vec<f32> = history.iter().flat_map(|&(m, s)| [m, s]).collect();
        tensorfile::write_tensor(&dir.join("balancer.dpt"), &[history.len().max(1), 2], &{
            if history.is_empty() {
                vec![0.0; 2]
            } else {
                flat
            }
        })?;
        let state = format!(
            "key,value\niteration,{}\nepochs_done,{}\nbest_score,{:?}\nbest_epoch,{}\nbalancer_len,{}\nalpha_window,{}\nseed,{}\n",
            self.iteration,
            self.epochs_done,
            self.best_score,
            self.best_epoch,
            history.len(),
            self.cfg.alpha_window,
            self.cfg.seed,
        );
        std::fs::write(dir.join("trainer.csv"), state).map_err(|e| io_err(dir, e))?;
        Ok(())
    }

    /// Resume from [`Self::save_checkpoint`] output.
    pub fn resume(dir: &Path, cfg: TrainConfig) -> Result<Self, TrainerError> {
        let layer = load_layer(dir)?;
        let adam = load_adam(dir, &layer)?;
        let text = std::fs::read_to_string(dir.join("trainer.csv"))
            .map_err(|e| io_err(&dir.join("trainer.csv"), e))?;
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().skip(1) {
            if let Some((k, v)) = line.split_once(',') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |key: &str| -> Result<String, TrainerError> {
            kv.get(key).cloned().ok_or_else(|| TrainerError::MissingData(format!("trainer key {key}")))
        };
        let (dims, flat) = tensorfile::read_tensor(&dir.join("balancer.dpt"))?;
        let balancer_len: usize = get("balancer_len")?
            .parse()
            .map_err(|_| TrainerError::MissingData("balancer_len".into()))?;
        let mut history = Vec::with_capacity(balancer_len);
        for i in 0..balancer_len.min(dims[0]) {
            history.push((flat[2 * i], flat[2 * i + 1]));
        }
        let balancer = AlphaBalancer::restore(cfg.alpha_window.max(1), &history);
        Ok(Self {
            layer,
            adam,
            balancer,
            iteration: get("iteration")?.parse().map_err(|_| TrainerError::MissingData("iteration".into()))?,
            epochs_done: get("epochs_done")?.parse().map_err(|_| TrainerError::MissingData("epochs_done".into()))?,
            best_score: get("best_score")?.parse().map_err(|_| TrainerError::MissingData("best_score".into()))?,
            best_epoch: get("best_epoch")?.parse().map_err(|_| TrainerError::MissingData("best_epoch".into()))?,
            cfg,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub slices: usize,
    pub total_seconds: f64,
    pub per_slice_seconds: f64,
    pub slices_per_second: f64,
}

/// Batched forward passes with wall-clock timing. The outputs are exactly
/// `layer_forward` applied slice-wise.
pub fn reconstruct(
    layer: &InversionLayer,
    sinograms: &[Sinogram],
) -> Result<(Vec<ImageGrid>, TimingReport), TrainerError> {
    let start = Instant::now();
    let refs: Vec<&Sinogram> = sinograms.iter().collect();
    let images = layer_forward_batch(layer, &refs)?;
    let total = start.elapsed().as_secs_f64();
    let n = sinograms.len().max(1);
    Ok((
        images,
        TimingReport {
            slices: sinograms.len(),
            total_seconds: total,
            per_slice_seconds: total / n as f64,
            slices_per_second: n as f64 / total.max(1e-12),
        },
    ))
}

/// Convenience used by the end-to-end runs: layer with projection masks.
pub fn projection_mask_layer(
    igeom: &ImageGeometry,
    sgeom: SinogramGeometry,
    patch_size: usize,
    buffer: usize,
    seed: u64,
) -> Result<InversionLayer, TrainerError> {
    let tiling = crate::maskgen::tile_patches(igeom, patch_size).map_err(InversionError::from)?;
    let masks =
        crate::maskgen::project_masks(&tiling, sgeom, buffer).map_err(InversionError::from)?;
    Ok(InversionLayer::new(tiling, sgeom, masks, seed)?)
}

pub type RunDir = PathBuf;
