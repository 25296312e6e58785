//! Plain-text key=value run configuration. Every key has a default and
//! unknown keys are rejected, so any accepted config fully specifies a run.

use radonlab::baseline::{EmConfig, FbpFilter};
use radonlab::geom::{ImageGeometry, SinogramGeometry};
use radonlab::inversion::SchedulerConfig;
use radonlab::maskgen::MaskRefineConfig;
use radonlab::phantom::PhantomSpec;
use radonlab::trainer::{DatasetConfig, TrainConfig};
use std::path::Path;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}
impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskRoute {
    Projection,
    Learned,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    pub image_size: usize,
    pub pixel_size: f64,
    pub fov_radius: f64, // 0 = default width/2 * pixel_size
    pub num_angles: usize,
    pub num_bins: usize,
    pub bin_spacing: f64,
    pub sampling_step: f64,

    pub phantom_count: usize,
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    pub min_intensity: f64,
    pub max_intensity: f64,
    pub min_axis: f64,
    pub max_axis: f64,
    pub max_jitter: f64,
    pub background: f64, // < 0 disables

    pub count_density: f64,
    pub thinning: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,

    pub em_iterations: usize,
    pub em_subsets: usize,
    pub em_filter_sigma: f64,
    pub fbp_filter: FbpFilter,

    pub patch_size: usize,
    pub mask_route: MaskRoute,
    pub mask_buffer: usize,
    pub mask_gaussian_sigma: f64,
    pub mask_disk_radius: usize,
    pub learn_epochs: usize,
    pub learn_lr: f64,
    pub learn_pairs: usize,

    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub alpha_window: usize,
    pub loss_scales: usize,
    pub sinogram_scale: f64,
    pub image_scale: f64,

    pub eta_min: f64,
    pub eta_max: f64,
    pub sched_period: u64,
    pub sched_decay: f64,

    pub table1_patch_sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            image_size: 64,
            pixel_size: 1.0,
            fov_radius: 0.0,
            num_angles: 100,
            num_bins: 64,
            bin_spacing: 1.0,
            sampling_step: 0.5,
            phantom_count: 500,
            min_ellipses: 4,
            max_ellipses: 10,
            min_intensity: 100.0,
            max_intensity: 600.0,
            min_axis: 2.0,
            max_axis: 9.0,
            max_jitter: 18.0,
            background: 120.0,
            count_density: 200_000.0,
            thinning: 1.0,
            train_fraction: 0.8,
            val_fraction: 0.1,
            em_iterations: 8,
            em_subsets: 4,
            em_filter_sigma: 1.0,
            fbp_filter: FbpFilter::Ramp,
            patch_size: 16,
            mask_route: MaskRoute::Projection,
            mask_buffer: 2,
            mask_gaussian_sigma: 4.0,
            mask_disk_radius: 8,
            learn_epochs: 40,
            learn_lr: 2e-4,
            learn_pairs: 200,
            epochs: 200,
            samples_per_epoch: 512,
            batch_size: 16,
            alpha_window: 100,
            loss_scales: 3,
            sinogram_scale: 5.0,
            image_scale: 400.0,
            eta_min: 0.5e-5,
            eta_max: 9.0e-5,
            sched_period: 1000,
            sched_decay: 0.99995,
            table1_patch_sizes: vec![10, 20, 30, 40, 60],
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {}", lineno + 1, e.0)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError(format!("bad value for {key}: {value}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "image.size" => self.image_size = num(key, value)?,
            "image.pixel_size" => self.pixel_size = num(key, value)?,
            "image.fov_radius" => self.fov_radius = num(key, value)?,
            "sino.angles" => self.num_angles = num(key, value)?,
            "sino.bins" => self.num_bins = num(key, value)?,
            "sino.bin_spacing" => self.bin_spacing = num(key, value)?,
            "projector.sampling_step" => self.sampling_step = num(key, value)?,
            "phantom.count" => self.phantom_count = num(key, value)?,
            "phantom.min_ellipses" => self.min_ellipses = num(key, value)?,
            "phantom.max_ellipses" => self.max_ellipses = num(key, value)?,
            "phantom.min_intensity" => self.min_intensity = num(key, value)?,
            "phantom.max_intensity" => self.max_intensity = num(key, value)?,
            "phantom.min_axis" => self.min_axis = num(key, value)?,
            "phantom.max_axis" => self.max_axis = num(key, value)?,
            "phantom.max_jitter" => self.max_jitter = num(key, value)?,
            "phantom.background" => self.background = num(key, value)?,
            "dataset.count_density" => self.count_density = num(key, value)?,
            "dataset.thinning" => self.thinning = num(key, value)?,
            "dataset.train_fraction" => self.train_fraction = num(key, value)?,
            "dataset.val_fraction" => self.val_fraction = num(key, value)?,
            "em.iterations" => self.em_iterations = num(key, value)?,
            "em.subsets" => self.em_subsets = num(key, value)?,
            "em.filter_sigma" => self.em_filter_sigma = num(key, value)?,
            "fbp.filter" => {
                self.fbp_filter = match value {
                    "ramp" => FbpFilter::Ramp,
                    "hann" => FbpFilter::Hann,
                    other => return Err(ConfigError(format!("fbp.filter must be ramp|hann, got {other}"))),
                }
            }
            "mask.patch_size" => self.patch_size = num(key, value)?,
            "mask.route" => {
                self.mask_route = match value {
                    "projection" => MaskRoute::Projection,
                    "learned" => MaskRoute::Learned,
                    other => {
                        return Err(ConfigError(format!(
                            "mask.route must be projection|learned, got {other}"
                        )))
                    }
                }
            }
            "mask.buffer" => self.mask_buffer = num(key, value)?,
            "mask.gaussian_sigma" => self.mask_gaussian_sigma = num(key, value)?,
            "mask.disk_radius" => self.mask_disk_radius = num(key, value)?,
            "mask.learn_epochs" => self.learn_epochs = num(key, value)?,
            "mask.learn_lr" => self.learn_lr = num(key, value)?,
            "mask.learn_pairs" => self.learn_pairs = num(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.samples_per_epoch" => self.samples_per_epoch = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.alpha_window" => self.alpha_window = num(key, value)?,
            "train.loss_scales" => self.loss_scales = num(key, value)?,
            "train.sinogram_scale" => self.sinogram_scale = num(key, value)?,
            "train.image_scale" => self.image_scale = num(key, value)?,
            "sched.eta_min" => self.eta_min = num(key, value)?,
            "sched.eta_max" => self.eta_max = num(key, value)?,
            "sched.period" => self.sched_period = num(key, value)?,
            "sched.decay" => self.sched_decay = num(key, value)?,
            "table1.patch_sizes" => {
                self.table1_patch_sizes = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| ConfigError(format!("bad patch size list: {value}")))?;
            }
            other => return Err(ConfigError(format!("unknown key: {other}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.image_size == 0 || self.num_angles == 0 || self.num_bins == 0 {
            return Err(ConfigError("geometry counts must be positive".into()));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max) {
            return Err(ConfigError("need 0 < sched.eta_min <= sched.eta_max".into()));
        }
        if !(self.thinning > 0.0 && self.thinning <= 1.0) {
            return Err(ConfigError("dataset.thinning must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn image_geometry(&self) -> Result<ImageGeometry, ConfigError> {
        let fov = if self.fov_radius > 0.0 {
            self.fov_radius
        } else {
            self.image_size as f64 / 2.0 * self.pixel_size
        };
        ImageGeometry::new(self.image_size, self.image_size, self.pixel_size, fov)
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn sinogram_geometry(&self) -> Result<SinogramGeometry, ConfigError> {
        SinogramGeometry::new(self.num_angles, self.num_bins, self.bin_spacing)
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            num_ellipses: (self.min_ellipses, self.max_ellipses),
            intensity: (self.min_intensity, self.max_intensity),
            axes: (self.min_axis, self.max_axis),
            center_jitter: (0.0, self.max_jitter),
            rotation: (0.0, std::f64::consts::PI),
            background_disk: (self.background >= 0.0).then_some(self.background),
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            iterations: self.em_iterations,
            subsets: self.em_subsets,
            post_filter_sigma: self.em_filter_sigma,
        }
    }

    pub fn mask_refine(&self) -> MaskRefineConfig {
        MaskRefineConfig {
            gaussian_sigma: self.mask_gaussian_sigma,
            disk_radius: self.mask_disk_radius,
        }
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            eta_min: self.eta_min,
            eta_max: self.eta_max,
            period: self.sched_period,
            decay: self.sched_decay,
        }
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig, ConfigError> {
        Ok(DatasetConfig {
            igeom: self.image_geometry()?,
            sgeom: self.sinogram_geometry()?,
            phantom_spec: self.phantom_spec(),
            count_density: self.count_density,
            thinning: self.thinning,
            em: self.em_config(),
            split: (
                self.train_fraction,
                self.val_fraction,
                (1.0 - self.train_fraction - self.val_fraction).max(0.0),
            ),
            sinogram_scale: self.sinogram_scale,
            image_scale: self.image_scale,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            samples_per_epoch: self.samples_per_epoch,
            batch_size: self.batch_size,
            alpha_window: self.alpha_window,
            loss_scales: self.loss_scales,
            scheduler: self.scheduler(),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_empty_config() {
        let cfg = RunConfig::from_str("").unwrap();
        assert_eq!(cfg.image_size, 64);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.eta_min, 0.5e-5);
    }

    #[test]
    fn values_and_comments_parse() {
        let cfg = RunConfig::from_str(
            "# comment\nimage.size = 32\n\ntrain.epochs=5\nfbp.filter = hann\ntable1.patch_sizes = 8, 16\n",
        )
        .unwrap();
        assert_eq!(cfg.image_size, 32);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.fbp_filter, FbpFilter::Hann);
        assert_eq!(cfg.table1_patch_sizes, vec![8, 16]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_str("image.sizee = 32\n").unwrap_err();
        assert!(err.0.contains("unknown key"), "{err}");
        assert!(RunConfig::from_str("image.size").is_err());
        assert!(RunConfig::from_str("sched.eta_min = 0\n").is_err());
    }
}
