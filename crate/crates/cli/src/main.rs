//! Single executable exposing the full experiment pipeline: phantom synthesis,
//! projection, classical reconstructions, mask generation, parameter
//! accounting, training, fast reconstruction, evaluation, and benchmarks.
//!
//! Exit codes: 0 success, 2 config/usage, 3 data or i/o, 4 numeric failure.

mod artifacts;
mod config;

use clap::{Parser, Subcommand};
use config::{ConfigError, MaskRoute, RunConfig};
use radonlab::baseline::{fbp_reconstruct, osem_reconstruct, BaselineError};
use radonlab::evalmetrics::{auto_vois, bias_voi, line_profile_fwhm, mae_nonzero, snr_voi};
use radonlab::geom::{ImageGrid, Sinogram};
use radonlab::inversion::{layer_forward, learning_rate, load_layer, InversionError, InversionLayer};
use radonlab::maskgen::{
    count_parameters, project_masks, refine_mask, tile_patches, train_dense_layer, write_masks,
    MaskGenError,
};
use radonlab::objective::{ms_ssim_similarity, LossConfig};
use radonlab::phantom::{apply_poisson, generate_phantom, thin_counts, PhantomError};
use radonlab::projector::forward_project;
use radonlab::seeds;
use radonlab::tensorfile;
use radonlab::trainer::{
    build_dataset, load_dataset, reconstruct, Dataset, TrainerError, TrainerSession,
};
use std::path::{Path, PathBuf};

const EXIT_CONFIG: i32 = 2;
const EXIT_DATA: i32 = 3;
const EXIT_NUMERIC: i32 = 4;

struct CliError {
    message: String,
    code: i32,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self { message: msg.into(), code: EXIT_CONFIG }
    }
    fn data(msg: impl Into<String>) -> Self {
        Self { message: msg.into(), code: EXIT_DATA }
    }
    fn numeric(msg: impl Into<String>) -> Self {
        Self { message: msg.into(), code: EXIT_NUMERIC }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<tensorfile::TensorFileError> for CliError {
    fn from(e: tensorfile::TensorFileError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidSpec(_) | PhantomError::BadFraction(_) => {
                Self::config(e.to_string())
            }
            PhantomError::ZeroSinogram
            | PhantomError::BadCountTarget(_)
            | PhantomError::NonIntegerCounts(_) => Self::numeric(e.to_string()),
        }
    }
}

impl From<radonlab::projector::ProjectorError> for CliError {
    fn from(e: radonlab::projector::ProjectorError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<radonlab::geom::GeometryError> for CliError {
    fn from(e: radonlab::geom::GeometryError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::NegativeCounts => Self::numeric(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<MaskGenError> for CliError {
    fn from(e: MaskGenError) -> Self {
        match e {
            MaskGenError::ConstantInput
            | MaskGenError::NegativeInput
            | MaskGenError::Diverged { .. } => Self::numeric(e.to_string()),
            MaskGenError::TensorFile(t) => Self::data(t.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<InversionError> for CliError {
    fn from(e: InversionError) -> Self {
        match e {
            InversionError::NonFiniteGradient { .. } => Self::numeric(e.to_string()),
            InversionError::TensorFile(t) => Self::data(t.to_string()),
            InversionError::BadCheckpoint(_) => Self::data(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::NonFiniteLoss { .. } => Self::numeric(e.to_string()),
            TrainerError::Io { .. } | TrainerError::TensorFile(_) | TrainerError::MissingData(_) => {
                Self::data(e.to_string())
            }
            TrainerError::Phantom(p) => p.into(),
            TrainerError::Projector(p) => p.into(),
            TrainerError::Baseline(b) => b.into(),
            TrainerError::Inversion(i) => i.into(),
            TrainerError::Objective(o) => Self::numeric(o.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<radonlab::objective::ObjectiveError> for CliError {
    fn from(e: radonlab::objective::ObjectiveError) -> Self {
        Self::numeric(e.to_string())
    }
}

impl From<radonlab::evalmetrics::MetricsError> for CliError {
    fn from(e: radonlab::evalmetrics::MetricsError) -> Self {
        Self::numeric(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "radonlab", version, about = "Desk-scale tomographic reconstruction pipeline")]
struct Cli {
    /// key=value run configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts (env RADONLAB_RUN_DIR overrides the
    /// default ./runs).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Worker thread cap (env RADONLAB_THREADS, then config `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate random ellipse phantoms.
    Phantom,
    /// Forward-project stored phantoms and draw Poisson counts.
    Project,
    /// OSEM reconstruction of stored count sinograms.
    Osem {
        /// Reconstruct the thinned sinograms instead of the full counts.
        #[arg(long)]
        thinned: bool,
    },
    /// Filtered back-projection of stored count sinograms.
    Fbp {
        #[arg(long)]
        thinned: bool,
    },
    /// Build per-patch sinogram masks (projection or learned route).
    Masks,
    /// Parameter accounting per patch size, plus the dense single-layer row.
    Table1 {
        /// Substitute FOV pixel count for the dense arithmetic.
        #[arg(long)]
        fov_pixels: Option<u64>,
        /// Also compute masked parameter counts via projection masks.
        #[arg(long)]
        with_masks: bool,
    },
    /// Build (or reuse) the dataset and train the inversion layer.
    Train {
        /// Resume from run_dir/train/latest instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Timed batched reconstruction of the dataset test split.
    Reconstruct {
        /// Layer checkpoint; defaults to run_dir/train/best.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Quantitative metrics over the test split (metrics.csv + profiles).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit the cyclic learning-rate trajectory as CSV + SVG.
    Lrplot {
        #[arg(long, default_value_t = 10_000)]
        iters: u64,
    },
    /// Median-of-5 reconstruction timing: trained layer vs OSEM vs FBP.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.code);
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = cfg;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let run_dir = cli
        .run_dir
        .or_else(|| std::env::var_os("RADONLAB_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let threads = cli
        .threads
        .or_else(|| std::env::var("RADONLAB_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(cfg.threads);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&run_dir)?;

    match cli.command {
        Command::Phantom => cmd_phantom(&cfg, &run_dir),
        Command::Project => cmd_project(&cfg, &run_dir),
        Command::Osem { thinned } => cmd_classical(&cfg, &run_dir, Classical::Osem, thinned),
        Command::Fbp { thinned } => cmd_classical(&cfg, &run_dir, Classical::Fbp, thinned),
        Command::Masks => cmd_masks(&cfg, &run_dir),
        Command::Table1 { fov_pixels, with_masks } => {
            cmd_table1(&cfg, &run_dir, fov_pixels, with_masks)
        }
        Command::Train { resume } => cmd_train(&cfg, &run_dir, resume),
        Command::Reconstruct { checkpoint } => cmd_reconstruct(&cfg, &run_dir, checkpoint),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &run_dir, checkpoint),
        Command::Lrplot { iters } => cmd_lrplot(&cfg, &run_dir, iters),
        Command::Bench { checkpoint } => cmd_bench(&cfg, &run_dir, checkpoint),
    }
}

fn projector_cfg(cfg: &RunConfig) -> radonlab::projector::ProjectorConfig {
    radonlab::projector::ProjectorConfig { sampling_step: cfg.sampling_step }
}

fn cmd_phantom(cfg: &RunConfig, run_dir: &Path) -> Result<(), CliError> {
    let geom = cfg.image_geometry()?;
    let spec = cfg.phantom_spec();
    let dir = run_dir.join("phantoms");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Vec::new();
    for i in 0..cfg.phantom_count {
        let img = generate_phantom(&spec, &geom, seeds::derive(cfg.seed, i as u64))?;
        let name = format!("phantom_{i:04}.dpt");
        tensorfile::write_array2(&dir.join(&name), &img.values)?;
        manifest.push(name);
        if i == 0 {
            artifacts::write_pgm16(&dir.join("phantom_0000.pgm"), &img.values)?;
            manifest.push("phantom_0000.pgm".into());
        }
    }
    artifacts::write_manifest(&dir, &manifest)?;
    println!("wrote {} phantoms to {}", cfg.phantom_count, dir.display());
    Ok(())
}

fn indexed_files(dir: &Path, pattern: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for i in 0.. {
        let p = dir.join(format!("{pattern}{i:04}.dpt"));
        if !p.exists() {
            break;
        }
        out.push(p);
    }
    out
}

fn cmd_project(cfg: &RunConfig, run_dir: &Path) -> Result<(), CliError> {
    let geom = cfg.image_geometry()?;
    let sgeom = cfg.sinogram_geometry()?;
    let phantom_files = indexed_files(&run_dir.join("phantoms"), "phantom_");
    if phantom_files.is_empty() {
        return Err(CliError::data(format!(
            "no phantoms under {} (run `radonlab phantom` first)",
            run_dir.join("phantoms").display()
        )));
    }
    let dir = run_dir.join("sinos");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Vec::new();
    for (i, path) in phantom_files.iter().enumerate() {
        let values = tensorfile::read_array2(path)?;
        let img = ImageGrid::new(geom, values)?;
        let clean = forward_project(&img, sgeom, projector_cfg(cfg))?;
        let counts = apply_poisson(&clean, cfg.count_density, seeds::derive(cfg.seed, i as u64))?;
        tensorfile::write_array2(&dir.join(format!("clean_{i:04}.dpt")), &clean.values)?;
        tensorfile::write_array2(&dir.join(format!("counts_{i:04}.dpt")), &counts.values)?;
        manifest.push(format!("clean_{i:04}.dpt"));
        manifest.push(format!("counts_{i:04}.dpt"));
        if cfg.thinning < 1.0 {
            let thinned = thin_counts(&counts, cfg.thinning, seeds::derive(cfg.seed, i as u64))?;
            tensorfile::write_array2(&dir.join(format!("thinned_{i:04}.dpt")), &thinned.values)?;
            manifest.push(format!("thinned_{i:04}.dpt"));
        }
    }
    artifacts::write_manifest(&dir, &manifest)?;
    println!("projected {} phantoms to {}", phantom_files.len(), dir.display());
    Ok(())
}

enum Classical {
    Osem,
    Fbp,
}

fn cmd_classical(
    cfg: &RunConfig,
    run_dir: &Path,
    which: Classical,
    thinned: bool,
) -> Result<(), CliError> {
    let geom = cfg.image_geometry()?;
    let sgeom = cfg.sinogram_geometry()?;
    let prefix = if thinned { "thinned_" } else { "counts_" };
    let files = indexed_files(&run_dir.join("sinos"), prefix);
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no {prefix}*.dpt under {} (run `radonlab project` first)",
            run_dir.join("sinos").display()
        )));
    }
    let (name, dir) = match which {
        Classical::Osem => ("osem", run_dir.join("osem")),
        Classical::Fbp => ("fbp", run_dir.join("fbp")),
    };
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let values = tensorfile::read_array2(path)?;
        let sino = Sinogram::new(sgeom, values)?;
        let recon = match which {
            Classical::Osem => osem_reconstruct(&sino, geom, &cfg.em_config())?,
            Classical::Fbp => fbp_reconstruct(&sino, geom, cfg.fbp_filter)?,
        };
        let out = format!("recon_{i:04}.dpt");
        tensorfile::write_array2(&dir.join(&out), &recon.values)?;
        manifest.push(out);
        if i == 0 {
            artifacts::write_pgm16(&dir.join("recon_0000.pgm"), &recon.values)?;
            manifest.push("recon_0000.pgm".into());
        }
    }
    artifacts::write_manifest(&dir, &manifest)?;
    println!("{name}: reconstructed {} sinograms to {}", files.len(), dir.display());
    Ok(())
}

fn cmd_masks(cfg: &RunConfig, run_dir: &Path) -> Result<(), CliError> {
    let geom = cfg.image_geometry()?;
    let sgeom = cfg.sinogram_geometry()?;
    let tiling = tile_patches(&geom, cfg.patch_size)?;
    let masks = match cfg.mask_route {
        MaskRoute::Projection => project_masks(&tiling, sgeom, cfg.mask_buffer)?,
        MaskRoute::Learned => {
            let spec = cfg.phantom_spec();
            let pairs: Vec<(Sinogram, ImageGrid)> = (0..cfg.learn_pairs)
                .map(|i| -> Result<_, CliError> {
                    let img = generate_phantom(&spec, &geom, seeds::derive(cfg.seed, 7_000 + i as u64))?;
                    let s = forward_project(&img, sgeom, projector_cfg(cfg))?;
                    Ok((s, img))
                })
                .collect::<Result<_, _>>()?;
            let atlas = train_dense_layer(&pairs, cfg.learn_epochs, cfg.learn_lr, cfg.seed)?;
            let refine = cfg.mask_refine();
            (0..tiling.patches.len())
                .map(|id| refine_mask(&atlas, &tiling, id, &refine))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let dir = run_dir.join("masks");
    std::fs::create_dir_all(&dir)?;
    write_masks(&dir.join("masks.dpt"), &dir.join("masks.csv"), &tiling, &masks)?;
    let acc = count_parameters(&tiling, &masks)?;
    artifacts::write_manifest(&dir, &["masks.dpt".into(), "masks.csv".into()])?;
    println!(
        "{} masks, {} masked parameters ({} dense) at {}",
        acc.mask_count,
        acc.total_masked,
        acc.dense,
        dir.display()
    );
    Ok(())
}

fn cmd_table1(
    cfg: &RunConfig,
    run_dir: &Path,
    fov_pixels: Option<u64>,
    with_masks: bool,
) -> Result<(), CliError> {
    let geom = cfg.image_geometry()?;
    let sgeom = cfg.sinogram_geometry()?;
    let own = radonlab::fov_pixel_list(&geom).len() as u64;
    let used = fov_pixels.unwrap_or(own);
    let total_bins = sgeom.total_bins() as u64;

    let mut csv = String::from(
        "network,patch_size,input_size,output_size,segment_params,num_masks,fov_pixels_used,fov_pixels_own\n",
    );
    let input = format!("{}x{}", sgeom.num_angles, sgeom.num_bins);
    let output = format!("{}x{}", geom.width, geom.height);
    csv.push_str(&format!(
        "fully_connected,{}x{},{input},{output},{},1,{used},{own}\n",
        geom.width,
        geom.height,
        total_bins * used
    ));
    for &patch in &cfg.table1_patch_sizes {
        if patch == 0 || patch > geom.width {
            continue;
        }
        let tiling = tile_patches(&geom, patch)?;
        let params = if with_masks {
            let masks = project_masks(&tiling, sgeom, cfg.mask_buffer)?;
            count_parameters(&tiling, &masks)?.total_masked.to_string()
        } else {
            String::new()
        };
        csv.push_str(&format!(
            "radon_inversion_layer,{patch}x{patch},{input},{output},{params},{},{used},{own}\n",
            tiling.patches.len()
        ));
    }
    std::fs::write(run_dir.join("table1.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn ensure_dataset(cfg: &RunConfig, run_dir: &Path) -> Result<Dataset, CliError> {
    let dir = run_dir.join("dataset");
    if dir.join("meta.csv").exists() {
        Ok(load_dataset(&dir)?)
    } else {
        let ds_cfg = cfg.dataset_config()?;
        Ok(build_dataset(cfg.phantom_count, &ds_cfg, cfg.seed, Some(&dir))?)
    }
}

fn build_layer(cfg: &RunConfig, run_dir: &Path) -> Result<InversionLayer, CliError> {
    let geom = cfg.image_geometry()?;
    let sgeom = cfg.sinogram_geometry()?;
    let mask_file = run_dir.join("masks").join("masks.dpt");
    let tiling = tile_patches(&geom, cfg.patch_size)?;
    let masks = if mask_file.exists() {
        radonlab::maskgen::read_masks(&mask_file, sgeom)?
    } else {
        project_masks(&tiling, sgeom, cfg.mask_buffer)?
    };
    Ok(InversionLayer::new(tiling, sgeom, masks, cfg.seed)?)
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<(), CliError> {
    let dataset = ensure_dataset(cfg, run_dir)?;
    let train_dir = run_dir.join("train");
    let mut session = if resume && train_dir.join("latest").join("trainer.csv").exists() {
        TrainerSession::resume(&train_dir.join("latest"), cfg.train_config())?
    } else {
        if train_dir.exists() {
            std::fs::remove_dir_all(&train_dir)?;
        }
        TrainerSession::new(build_layer(cfg, run_dir)?, cfg.train_config())?
    };
    let stats = session.run(&dataset, cfg.epochs, &train_dir)?;
    let mut summary = String::from("epoch,train_mae,train_ms_ssim,val_mae,val_ms_ssim\n");
    for s in &stats {
        summary.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            s.epoch, s.train_mae, s.train_ms_ssim, s.val_mae, s.val_ms_ssim
        ));
    }
    std::fs::write(train_dir.join("summary.csv"), summary)?;
    if let Some(last) = stats.last() {
        println!(
            "trained {} epochs: val_mae {:.5}, val_ms_ssim {:.4} (best epoch {})",
            stats.len(),
            last.val_mae,
            last.val_ms_ssim,
            session.best_epoch
        );
    }
    Ok(())
}

fn cmd_reconstruct(
    cfg: &RunConfig,
    run_dir: &Path,
    checkpoint: Option<PathBuf>,
) -> Result<(), CliError> {
    let dataset = ensure_dataset(cfg, run_dir)?;
    let ckpt = checkpoint.unwrap_or_else(|| run_dir.join("train").join("best"));
    let layer = load_layer(&ckpt)?;
    let sinos: Vec<Sinogram> =
        dataset.split.test.iter().map(|&i| dataset.input_sinogram(i)).collect();
    if sinos.is_empty() {
        return Err(CliError::data("dataset has no test split"));
    }
    let (images, timing) = reconstruct(&layer, &sinos)?;
    let dir = run_dir.join("recon");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let unscaled = &img.values * dataset.image_scale;
        let name = format!("net_{k:04}.dpt");
        tensorfile::write_array2(&dir.join(&name), &unscaled)?;
        manifest.push(name);
        if k == 0 {
            artifacts::write_pgm16(&dir.join("net_0000.pgm"), &unscaled)?;
            manifest.push("net_0000.pgm".into());
        }
    }
    // Timing lives in its own file: everything else re-runs byte-identically.
    std::fs::write(
        dir.join("timing.csv"),
        format!(
            "slices,total_seconds,per_slice_seconds,slices_per_second\n{},{:?},{:?},{:?}\n",
            timing.slices, timing.total_seconds, timing.per_slice_seconds, timing.slices_per_second
        ),
    )?;
    artifacts::write_manifest(&dir, &manifest)?;
    println!(
        "reconstructed {} slices in {:.3} s ({:.1} slices/s)",
        timing.slices, timing.total_seconds, timing.slices_per_second
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, run_dir: &Path, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let dataset = ensure_dataset(cfg, run_dir)?;
    if dataset.split.test.is_empty() {
        return Err(CliError::data("dataset has no test split"));
    }
    let ckpt = checkpoint.unwrap_or_else(|| run_dir.join("train").join("best"));
    let layer = if ckpt.join("layer.csv").exists() { Some(load_layer(&ckpt)?) } else { None };
    let suffix = if cfg.thinning < 1.0 { "thinned" } else { "full" };

    let dir = run_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("method,volume,snr,bias_percent,mae_nonzero,ms_ssim,fwhm\n");
    let mut manifest = vec!["metrics.csv".to_string()];

    for (k, &idx) in dataset.split.test.iter().enumerate() {
        let reference = dataset.unscaled_target(idx);
        let vois = auto_vois(&reference, 3, 5.0);
        let loss_cfg = LossConfig::new(
            cfg.loss_scales,
            reference.values.iter().cloned().fold(0.0, f64::max).max(1e-12),
        )?;

        let mut methods: Vec<(String, ImageGrid)> = vec![("reference".into(), reference.clone())];
        let counts = Sinogram::new(dataset.sgeom, &dataset.inputs[idx] * dataset.sinogram_scale)?;
        let osem_img = osem_reconstruct(&counts, dataset.igeom, &cfg.em_config())?;
        // Count-domain reconstruction back to activity units. A thinned input
        // keeps the full-count calibration, mirroring the uncorrected low-dose
        // comparison (its bias shows the count deficit).
        let osem_img = ImageGrid {
            geometry: dataset.igeom,
            values: &osem_img.values * dataset.calibrations[idx],
        };
        methods.push((format!("osem_{suffix}"), osem_img));
        if let Some(layer) = &layer {
            let pred = layer_forward(layer, &dataset.input_sinogram(idx))?;
            methods.push((
                format!("net_{suffix}"),
                ImageGrid { geometry: dataset.igeom, values: &pred.values * dataset.image_scale },
            ));
        }

        // Profile line: horizontal, through the reference peak.
        let (peak, _) = reference.values.indexed_iter().fold(((0, 0), f64::MIN), |(am, m), (i, &v)| {
            if v > m {
                (i, v)
            } else {
                (am, m)
            }
        });
        let row = peak.0 as f64;
        let margin = 4.0;
        let p0 = (row, margin);
        let p1 = (row, dataset.igeom.width as f64 - 1.0 - margin);

        for (name, img) in &methods {
            let snr = snr_voi(img, &vois).map(|s| s.value).unwrap_or(f64::NAN);
            let bias = bias_voi(img, &reference, &vois)?;
            let mae = mae_nonzero(img, &reference)?;
            let ms = ms_ssim_similarity(&img.values, &reference.values, &loss_cfg)?;
            let profile = line_profile_fwhm(img, p0, p1, 4 * dataset.igeom.width);
            let fwhm = match &profile {
                Ok(p) => format!("{:?}", p.fwhm),
                Err(_) => String::new(),
            };
            csv.push_str(&format!("{name},{k},{snr:?},{bias:?},{mae:?},{ms:?},{fwhm}\n"));
            if k == 0 {
                if let Ok(p) = profile {
                    let mut prof_csv = String::from("distance,value\n");
                    for (d, v) in p.distances.iter().zip(p.values.iter()) {
                        prof_csv.push_str(&format!("{d:?},{v:?}\n"));
                    }
                    let fname = format!("profile_{name}.csv");
                    std::fs::write(dir.join(&fname), prof_csv)?;
                    manifest.push(fname);
                }
            }
        }
    }
    std::fs::write(dir.join("metrics.csv"), &csv)?;
    artifacts::write_manifest(&dir, &manifest)?;
    println!("wrote metrics for {} test volumes to {}", dataset.split.test.len(), dir.display());
    Ok(())
}

fn cmd_lrplot(cfg: &RunConfig, run_dir: &Path, iters: u64) -> Result<(), CliError> {
    let sched = cfg.scheduler();
    let mut csv = String::from("iteration,eta\n");
    let mut points = Vec::new();
    for k in 0..iters {
        let eta = learning_rate(k, &sched);
        csv.push_str(&format!("{k},{eta:?}\n"));
        points.push((k as f64, eta));
    }
    std::fs::write(run_dir.join("lrplot.csv"), &csv)?;
    artifacts::write_svg_plot(
        &run_dir.join("lrplot.svg"),
        &points,
        "cyclic learning rate",
        "iteration",
        "eta",
    )?;
    println!("wrote lrplot.csv / lrplot.svg for {iters} iterations");
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    xs[xs.len() / 2]
}

fn cmd_bench(cfg: &RunConfig, run_dir: &Path, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let dataset = ensure_dataset(cfg, run_dir)?;
    let ckpt = checkpoint.unwrap_or_else(|| run_dir.join("train").join("best"));
    let layer = load_layer(&ckpt)?;
    let ids: Vec<usize> = dataset.split.test.iter().copied().take(8).collect();
    if ids.is_empty() {
        return Err(CliError::data("dataset has no test split"));
    }
    let sinos: Vec<Sinogram> = ids.iter().map(|&i| dataset.input_sinogram(i)).collect();
    let count_sinos: Vec<Sinogram> = ids
        .iter()
        .map(|&i| Sinogram::new(dataset.sgeom, &dataset.inputs[i] * dataset.sinogram_scale))
        .collect::<Result<_, _>>()?;

    let time_method = |f: &dyn Fn() -> Result<(), CliError>| -> Result<f64, CliError> {
        let mut times = Vec::with_capacity(5);
        for _ in 0..5 {
            let start = std::time::Instant::now();
            f()?;
            times.push(start.elapsed().as_secs_f64() / ids.len() as f64);
        }
        Ok(median(times))
    };

    let net = time_method(&|| {
        let (_imgs, _t) = reconstruct(&layer, &sinos)?;
        Ok(())
    })?;
    let em_cfg = cfg.em_config();
    let osem = time_method(&|| {
        for s in &count_sinos {
            osem_reconstruct(s, dataset.igeom, &em_cfg)?;
        }
        Ok(())
    })?;
    let fbp = time_method(&|| {
        for s in &count_sinos {
            fbp_reconstruct(s, dataset.igeom, cfg.fbp_filter)?;
        }
        Ok(())
    })?;

    let csv = format!(
        "method,median_seconds_per_slice,slowdown_vs_net\nnet,{net:?},1.0\nosem,{osem:?},{:?}\nfbp,{fbp:?},{:?}\n",
        osem / net,
        fbp / net
    );
    std::fs::write(run_dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
