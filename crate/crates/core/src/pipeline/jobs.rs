use crate::error::{Error, Result};
use crate::inversion::{invert_batch_observed, mean_abs_pixel_error, InversionConfig, StepView};
use crate::io::{
    encode_idx_f64, encode_weights, image_grid, load_idx_images, load_weights, parse_arch_config, write_atomic,
    CsvTable,
};
use crate::nn::{forward, BnMode, Network};
use crate::prior::PriorSpec;
use crate::tensor::Tensor;
use crate::train::{train_gan, TrainConfig, TrainRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Reconstruction/target pairs per row of the pair grid.
pub const PAIRS_PER_ROW: usize = 10;

/// `<path>.<suffix>`, next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("configuration serializes");
    out.push(b'\n');
    out
}

/// Writes every `(path, bytes)` pair, each atomically. Directories are
/// created first so a missing one fails before any file is touched.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (path, _) in files {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    for (path, bytes) in files {
        write_atomic(path, bytes)?;
    }
    Ok(())
}

fn build(arch: &str) -> Result<Network> {
    parse_arch_config(arch)?.build()
}

/// Per-sample images `[1, m, n]` of a `[B, 1, m, n]` batch.
fn split_images(batch: &Tensor) -> Result<Vec<Tensor>> {
    let dims = batch.dims()[1..].to_vec();
    (0..batch.dims()[0])
        .map(|i| batch.slice_batch(i, i + 1)?.reshape(&dims))
        .collect()
}

/// Interleaves `[reconstruction, target]` per sample, reconstruction first
/// (left), for a grid of `2 · PAIRS_PER_ROW` columns.
pub fn pair_grid(targets: &Tensor, reconstructions: &Tensor) -> Result<Vec<Tensor>> {
    let t = split_images(targets)?;
    let r = split_images(reconstructions)?;
    if t.len() != r.len() {
        return Err(Error::dim("pair grid needs one reconstruction per target"));
    }
    Ok(r.into_iter().zip(t).flat_map(|(r, t)| [r, t]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    /// Architecture texts, recorded verbatim in the resolved configuration.
    pub arch_g: String,
    pub arch_d: String,
    pub data: PathBuf,
    /// Use only the first `data_limit` images of `data`.
    pub data_limit: Option<usize>,
    pub train: TrainConfig,
    /// Generator weights; the discriminator, loss history and configuration
    /// go next to it with suffixes `.disc`, `.loss.csv` and `.config.json`.
    pub out: PathBuf,
}

impl TrainJob {
    pub fn generator_seed(&self) -> u64 {
        self.train.seed
    }

    pub fn discriminator_seed(&self) -> u64 {
        self.train.seed.wrapping_add(1)
    }

    pub fn discriminator_path(&self) -> PathBuf {
        sibling(&self.out, "disc")
    }

    pub fn loss_path(&self) -> PathBuf {
        sibling(&self.out, "loss.csv")
    }

    pub fn config_path(&self) -> PathBuf {
        sibling(&self.out, "config.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub images: usize,
    pub history: Vec<TrainRecord>,
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    #[serde(flatten)]
    job: &'a TrainJob,
    generator_init_seed: u64,
    discriminator_init_seed: u64,
    images_used: usize,
}

pub fn run_train(job: &TrainJob, on_iter: impl FnMut(&TrainRecord)) -> Result<TrainSummary> {
    let mut g = build(&job.arch_g)?;
    let mut d = build(&job.arch_d)?;
    g.init_weights(job.generator_seed());
    d.init_weights(job.discriminator_seed());
    let data = load_idx_images(&job.data, job.data_limit, 0)?;
    let images = data.images.dims()[0];
    let history = train_gan(&mut g, &mut d, &data.images, &job.train, on_iter)?;

    let mut losses = CsvTable::new(&["iteration", "d_loss", "g_loss", "d_real", "d_fake"]);
    for r in &history {
        losses.push(vec![r.iteration as f64, r.d_loss, r.g_loss, r.d_real, r.d_fake])?;
    }
    let resolved = ResolvedTrain {
        job,
        generator_init_seed: job.generator_seed(),
        discriminator_init_seed: job.discriminator_seed(),
        images_used: images,
    };
    write_all(&[
        (job.out.clone(), encode_weights(&g)),
        (job.discriminator_path(), encode_weights(&d)),
        (job.loss_path(), losses.encode().into_bytes()),
        (job.config_path(), to_json(&resolved)),
    ])?;
    Ok(TrainSummary { images, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertJob {
    pub weights: PathBuf,
    pub arch_g: String,
    pub images: PathBuf,
    pub count: usize,
    pub offset: usize,
    pub prior: PriorSpec,
    pub inversion: InversionConfig,
    pub out_dir: PathBuf,
}

impl InvertJob {
    pub const Z_STAR: &'static str = "z_star.csv";
    pub const LOSS: &'static str = "loss.csv";
    pub const MAE: &'static str = "mae.csv";
    pub const RECONSTRUCTIONS: &'static str = "reconstructions.idx";
    pub const PAIRS: &'static str = "pairs.pgm";
    pub const CONFIG: &'static str = "config.json";
    pub const SUMMARY: &'static str = "summary.json";
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvertSummary {
    pub count: usize,
    pub bn_mode: BnMode,
    pub mean_mae: f64,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub restart_index_chosen: usize,
    pub restart_final_bce: Vec<f64>,
}

#[derive(Serialize)]
struct ResolvedInvert<'a> {
    #[serde(flatten)]
    job: &'a InvertJob,
    bn_mode: BnMode,
    latent_dim: usize,
}

pub fn run_invert(job: &InvertJob, on_step: impl FnMut(&StepView)) -> Result<InvertSummary> {
    job.inversion.validate(&job.prior)?;
    let arch = parse_arch_config(&job.arch_g)?;
    let g = load_weights(&job.weights, &arch)?;
    let targets = load_idx_images(&job.images, Some(job.count), job.offset)?.images;
    if targets.dims()[0] != job.count {
        return Err(Error::Config(format!(
            "asked for {} images at offset {}, file provides {}",
            job.count,
            job.offset,
            targets.dims()[0]
        )));
    }
    if targets.dims()[1..] != *g.output_dims() {
        return Err(Error::dim(format!(
            "images are {:?}, generator emits {:?}",
            &targets.dims()[1..],
            g.output_dims()
        )));
    }
    let result = invert_batch_observed(&g, &targets, &job.prior, &job.inversion, on_step)?;
    let latent = result.z_star.dims()[1];

    let z_header: Vec<String> = (0..latent).map(|k| format!("z{k}")).collect();
    let mut z_csv = CsvTable::new(&z_header.iter().map(String::as_str).collect::<Vec<_>>());
    for row in result.z_star.data().chunks(latent) {
        z_csv.push(row.to_vec())?;
    }
    let mut loss_csv = CsvTable::new(&["iteration", "loss"]);
    for (i, l) in result.loss_history.iter().enumerate() {
        loss_csv.push(vec![i as f64, *l])?;
    }
    let mut mae_csv = CsvTable::new(&["image", "mae"]);
    for (i, m) in result.per_image_mae.iter().enumerate() {
        mae_csv.push(vec![(job.offset + i) as f64, *m])?;
    }
    let pairs = pair_grid(&targets, &result.reconstructions)?;
    let grid = image_grid(&pairs, 2 * PAIRS_PER_ROW.min(job.count))?;
    let summary = InvertSummary {
        count: job.count,
        bn_mode: result.bn_mode,
        mean_mae: result.mean_mae,
        final_loss: *result
            .loss_history
            .last()
            .expect("history starts at the initialization"),
        iterations_used: result.iterations_used,
        converged: result.converged,
        restart_index_chosen: result.restart_index_chosen,
        restart_final_bce: result.restart_final_bce.clone(),
    };
    let resolved = ResolvedInvert {
        job,
        bn_mode: result.bn_mode,
        latent_dim: latent,
    };
    let dir = &job.out_dir;
    write_all(&[
        (dir.join(InvertJob::Z_STAR), z_csv.encode().into_bytes()),
        (dir.join(InvertJob::LOSS), loss_csv.encode().into_bytes()),
        (dir.join(InvertJob::MAE), mae_csv.encode().into_bytes()),
        (
            dir.join(InvertJob::RECONSTRUCTIONS),
            encode_idx_f64(&result.reconstructions)?,
        ),
        (dir.join(InvertJob::PAIRS), grid.encode()),
        (dir.join(InvertJob::CONFIG), to_json(&resolved)),
        (dir.join(InvertJob::SUMMARY), to_json(&summary)),
    ])?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateJob {
    pub weights: PathBuf,
    pub arch_g: String,
    pub count: usize,
    pub prior: PriorSpec,
    pub seed: u64,
    pub bn_mode: BnMode,
    /// PGM grid; the resolved configuration goes to `<out>.config.json`.
    pub out: PathBuf,
}

/// Samples `count` latents and writes `G(z)` as a square-ish grid.
pub fn run_generate(job: &GenerateJob) -> Result<Tensor> {
    if job.count == 0 {
        return Err(Error::Config("generate needs a positive count".into()));
    }
    let arch = parse_arch_config(&job.arch_g)?;
    let g = load_weights(&job.weights, &arch)?;
    let latent = g
        .latent_dim()
        .ok_or_else(|| Error::Config("generator input must be a flat latent vector".into()))?;
    let z = job
        .prior
        .validated()?
        .sample(job.count, latent, &mut ChaCha8Rng::seed_from_u64(job.seed))?;
    let (images, _) = forward(&g, &z, job.bn_mode)?;
    let columns = (job.count as f64).sqrt().ceil() as usize;
    let grid = image_grid(&split_images(&images)?, columns)?;
    write_all(&[
        (job.out.clone(), grid.encode()),
        (sibling(&job.out, "config.json"), to_json(job)),
    ])?;
    Ok(images)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub count: usize,
    pub offset: usize,
    pub mean_mae: f64,
    pub per_image_mae: Vec<f64>,
}

/// Recomputes the reconstruction error of an inversion output directory
/// against the target file. The target offset is taken from the directory's
/// resolved configuration when present.
pub fn run_metrics(targets: &Path, recon_dir: &Path) -> Result<MetricsSummary> {
    let recon = load_idx_images(recon_dir.join(InvertJob::RECONSTRUCTIONS), None, 0)?.images;
    let config = recon_dir.join(InvertJob::CONFIG);
    let offset = match std::fs::read(&config) {
        Ok(bytes) => serde_json::from_slice::<serde_json::Value>(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", config.display())))?
            .get("offset")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
        Err(e) => return Err(Error::io(config, e)),
    };
    let count = recon.dims()[0];
    let x = load_idx_images(targets, Some(count), offset)?.images;
    if x.dims() != recon.dims() {
        return Err(Error::dim(format!(
            "targets {:?} do not match reconstructions {:?}",
            x.dims(),
            recon.dims()
        )));
    }
    let (per_image_mae, mean_mae) = mean_abs_pixel_error(&x, &recon)?;
    Ok(MetricsSummary {
        count,
        offset,
        mean_mae,
        per_image_mae,
    })
}
