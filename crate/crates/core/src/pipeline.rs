//! End-to-end commands: data generation, autoencoder and model training,
//! inference, evaluation, corruption sweeps and the KL/VQ comparison.
//!
//! Every command writes below one run directory and is deterministic in
//! the master seed; evaluation parallelizes over images with per-image
//! derived seeds and merges confusion matrices by addition.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use camseg_tensor::{Float, Tensor};
use image::RgbImage;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autoencoder::{images_to_tensor, tensor_to_images, train_autoencoder, AeLogRow, AeTrainingData, Autoencoder, AutoencoderConfig, Bottleneck, GaussianPosterior, LatentGrid};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corruption::{CorruptionKind, CorruptionSpec};
use crate::diffusion::Denoiser;
use crate::error::{io_err, CamsegError, Result};
use crate::metrics::{f1_macro, fmt_opt, per_class_csv, per_class_f1, summary_csv, CategorySpec, ConfusionMatrix, MetricsReport, SUMMARY_COLUMNS};
use crate::model::{train_model, LatentPair, ModelLogRow, SegModel};
use crate::palette::{colorize, declassify, load_rgb, save_mask, save_rgb, ClassMap, Palette};
use crate::seed::{derive_rng, derive_seed};
use crate::synthetic::{load_split, write_dataset, Dataset, Manifest};
use crate::transformer::MaskedTransformer;

const AE_PREFIXES: [&str; 3] = ["enc.", "dec.", "vq."];
const ENCODE_CHUNK: usize = 16;

/// Output locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, cfg: &RunConfig) -> PathBuf {
        self.root.join(&cfg.dataset.root)
    }

    pub fn autoencoder(&self, arm: Bottleneck) -> PathBuf {
        self.root.join(format!("autoencoder_{}.cams", arm.name()))
    }

    pub fn autoencoder_log(&self, arm: Bottleneck) -> PathBuf {
        self.root.join(format!("autoencoder_{}_log.csv", arm.name()))
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.cams")
    }

    pub fn model_log(&self) -> PathBuf {
        self.root.join("model_log.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn compare_dir(&self) -> PathBuf {
        self.root.join("compare")
    }

    pub fn infer_dir(&self) -> PathBuf {
        self.root.join("infer")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CamsegError::Exists(path.to_path_buf()));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, paths: &RunPaths, force: bool) -> Result<Manifest> {
    let root = paths.data(cfg);
    info!(
        "generating {} train + {} val scenes into {}",
        cfg.dataset.train_count,
        cfg.dataset.val_count,
        root.display()
    );
    write_dataset(&root, &cfg.dataset.scene, cfg.seed, cfg.dataset.train_count, cfg.dataset.val_count, force)
}

fn load_data(cfg: &RunConfig, paths: &RunPaths, split: &str) -> Result<Dataset> {
    let mut ds = load_split(&paths.data(cfg), split, cfg.dataset.scene.height, cfg.dataset.scene.width)?;
    if split != "train" {
        if let Some(n) = cfg.eval.max_images {
            ds.images.truncate(n);
            ds.masks.truncate(n);
            ds.names.truncate(n);
        }
    }
    Ok(ds)
}

fn semantic_images(masks: &[ClassMap], palette: &Palette) -> Result<Vec<RgbImage>> {
    masks.iter().map(|m| colorize(m, palette)).collect()
}

/// Builds the autoencoder stored in `ckpt`.
pub fn load_autoencoder<T: Float>(ckpt: &Checkpoint) -> Result<Autoencoder<T>> {
    let cfg: AutoencoderConfig = serde_json::from_value(
        ckpt.meta
            .get("autoencoder")
            .cloned()
            .ok_or_else(|| CamsegError::Config("checkpoint metadata lacks the autoencoder config".into()))?,
    )?;
    Autoencoder::from_params(cfg, ckpt.params(&AE_PREFIXES))
}

/// Declassified reconstructions of semantic images through the autoencoder.
pub fn reconstruct_masks<T: Float>(ae: &Autoencoder<T>, semantic: &[RgbImage], palette: &Palette) -> Result<Vec<ClassMap>> {
    let chunks: Vec<&[RgbImage]> = semantic.chunks(ENCODE_CHUNK).collect();
    let parts: Result<Vec<Vec<ClassMap>>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            let x = images_to_tensor::<T>(&refs)?;
            let post = ae.encode(&x)?;
            let means: Vec<LatentGrid<T>> = post.into_iter().map(|p| p.mean).collect();
            let y = ae.decode(&means)?;
            Ok(tensor_to_images(&y)?.iter().map(|img| declassify(img, palette)).collect())
        })
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}

fn confusion_of(gt: &[ClassMap], pred: &[ClassMap], k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    for (g, p) in gt.iter().zip(pred) {
        cm.accumulate(g, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone)]
pub struct VaeRun {
    pub checkpoint: PathBuf,
    pub log: Vec<AeLogRow>,
    /// Macro-F1 (percent) of declassified validation reconstructions.
    pub val_f1: f64,
}

pub fn train_vae<T: Float>(cfg: &RunConfig, paths: &RunPaths, arm: Bottleneck, force: bool) -> Result<VaeRun> {
    let ckpt_path = paths.autoencoder(arm);
    refuse_existing(&ckpt_path, force)?;
    let palette = Palette::resolve(&cfg.eval.palette)?;
    let train = load_data(cfg, paths, "train")?;
    let val = load_data(cfg, paths, "val")?;
    let semantic = semantic_images(&train.masks, &palette)?;
    let model_cfg = AutoencoderConfig {
        bottleneck: arm,
        ..cfg.autoencoder.model.clone()
    };
    let seed = derive_seed(cfg.seed, "autoencoder", 0);
    let mut ae = Autoencoder::<T>::new(model_cfg.clone(), seed)?;
    let data = AeTrainingData {
        semantic: semantic.iter().collect(),
        rgb: train.images.iter().collect(),
    };
    let log_path = paths.autoencoder_log(arm);
    let mut csv = format!("{}\n", AeLogRow::CSV_HEADER);
    let every = (cfg.autoencoder.train.steps / 20).max(1);
    info!("training {} autoencoder for {} steps", arm.name(), cfg.autoencoder.train.steps);
    let log = train_autoencoder(&mut ae, &data, &cfg.autoencoder.train, seed, |row| {
        csv.push_str(&row.csv_line());
        csv.push('\n');
        if row.step % every == 0 {
            info!("autoencoder step {} loss {:.5}", row.step, row.loss);
        }
    })?;
    write_text(&log_path, &csv)?;
    let recon = reconstruct_masks(&ae, &semantic_images(&val.masks, &palette)?, &palette)?;
    let val_f1 = f1_macro(&confusion_of(&val.masks, &recon, palette.len())?);
    info!("{} autoencoder validation macro-F1 {:.2}", arm.name(), val_f1);
    let mut ckpt = Checkpoint::new(json!({
        "kind": "autoencoder",
        "autoencoder": model_cfg,
        "step": cfg.autoencoder.train.steps,
        "seed": cfg.seed,
        "val_f1": val_f1,
    }));
    ckpt.add_params(&ae.params)?;
    ckpt.save(&ckpt_path)?;
    Ok(VaeRun {
        checkpoint: ckpt_path,
        log,
        val_f1,
    })
}

fn encode_all<T: Float>(ae: &Autoencoder<T>, images: &[RgbImage]) -> Result<Vec<GaussianPosterior<T>>> {
    let chunks: Vec<&[RgbImage]> = images.chunks(ENCODE_CHUNK).collect();
    let parts: Result<Vec<Vec<GaussianPosterior<T>>>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            ae.encode(&images_to_tensor::<T>(&refs)?)
        })
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}

/// `1 / std` over every coordinate of the given latents.
pub fn latent_scale<T: Float>(latents: &[&Tensor<T>]) -> f64 {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for t in latents {
        for &v in t.data() {
            let v = v.as_f64();
            n += 1.0;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    if var > 0.0 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

fn scaled<T: Float>(t: &Tensor<T>, s: f64) -> Tensor<T> {
    t.map(|v| T::from_f64(v.as_f64() * s))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: RunConfig,
    step: u64,
    seed: u64,
    latent_scale: f64,
    latent_bound: Option<f64>,
    seq_len: usize,
    latent_dim: usize,
    seed_derivation: String,
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub checkpoint: PathBuf,
    pub log: Vec<ModelLogRow>,
    pub latent_scale: f64,
}

/// Trains transformer and denoiser on latents from the frozen autoencoder.
pub fn train_pipeline_model<T: Float>(cfg: &RunConfig, paths: &RunPaths, force: bool) -> Result<ModelRun> {
    if !cfg.autoencoder.frozen {
        return Err(CamsegError::Config(
            "pipeline training requires a frozen autoencoder (autoencoder.frozen = true)".into(),
        ));
    }
    let ckpt_path = paths.model();
    refuse_existing(&ckpt_path, force)?;
    let ae_path = match &cfg.autoencoder.checkpoint {
        Some(p) => paths.root.join(p),
        None => paths.autoencoder(cfg.autoencoder.model.bottleneck),
    };
    let ae_ckpt = Checkpoint::load(&ae_path)?;
    let ae = load_autoencoder::<T>(&ae_ckpt)?;
    let palette = Palette::resolve(&cfg.eval.palette)?;
    let train = load_data(cfg, paths, "train")?;
    let semantic = semantic_images(&train.masks, &palette)?;
    info!("encoding {} training pairs with the frozen autoencoder", train.len());
    let rgb = encode_all(&ae, &train.images)?;
    let sem = encode_all(&ae, &semantic)?;
    let scale = latent_scale(&sem.iter().map(|p| &p.mean.seq).collect::<Vec<_>>());
    info!("latent scale factor {scale:.6}");
    let pairs: Vec<LatentPair<T>> = rgb
        .iter()
        .zip(&sem)
        .map(|(x, y)| LatentPair {
            rgb: scaled(&x.mean.seq, scale),
            sem_mean: scaled(&y.mean.seq, scale),
            sem_std: y.logvar.seq.map(|lv| T::from_f64(scale * (0.5 * lv.as_f64()).exp())),
        })
        .collect();
    let seq_len = cfg.seq_len()?;
    let latent_dim = ae.cfg.latent_channels;
    let seed = derive_seed(cfg.seed, "model", 0);
    let mut model = SegModel::<T>::new(cfg.transformer.clone(), cfg.diffusion.clone(), latent_dim, seq_len, seed)?;
    let mut csv = format!("{}\n", ModelLogRow::CSV_HEADER);
    let every = (cfg.training.steps / 50).max(1);
    info!(
        "training model for {} steps: {} transformer + {} denoiser scalars",
        cfg.training.steps,
        model.transformer.params.num_scalars(),
        model.denoiser.params.num_scalars()
    );
    let start = std::time::Instant::now();
    let log = train_model(&mut model, &pairs, &cfg.training, seed, |row| {
        csv.push_str(&row.csv_line());
        csv.push('\n');
        if row.step % every == 0 {
            info!(
                "model step {} loss {:.5} ({:.1}s)",
                row.step,
                row.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    write_text(&paths.model_log(), &csv)?;
    let meta = ModelMeta {
        kind: "model".into(),
        config: cfg.clone(),
        step: cfg.training.steps,
        seed: cfg.seed,
        latent_scale: scale,
        latent_bound: model.latent_bound,
        seq_len,
        latent_dim,
        seed_derivation: "component seeds are splitmix64(splitmix64(master ^ fnv1a(tag)) + index)".into(),
    };
    let mut ckpt = Checkpoint::new(serde_json::to_value(&meta)?);
    ckpt.meta["autoencoder"] = ae_ckpt.meta["autoencoder"].clone();
    ckpt.add_params(&ae.params)?;
    ckpt.add_params(&model.transformer.params)?;
    ckpt.add_params(&model.denoiser.params)?;
    ckpt.save(&ckpt_path)?;
    Ok(ModelRun {
        checkpoint: ckpt_path,
        log,
        latent_scale: scale,
    })
}

/// A trained pipeline ready for inference.
pub struct Predictor<T> {
    pub autoencoder: Autoencoder<T>,
    pub model: SegModel<T>,
    pub latent_scale: f64,
    pub palette: Palette,
    /// Master seed of the inference randomness.
    pub seed: u64,
}

impl<T: Float> Predictor<T> {
    pub fn load(path: &Path, palette: Palette, seed: u64) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| CamsegError::Config(format!("{} is not a model checkpoint: {e}", path.display())))?;
        let autoencoder = load_autoencoder::<T>(&ckpt)?;
        let cfg = &meta.config;
        let transformer = MaskedTransformer::from_params(cfg.transformer.clone(), meta.latent_dim, 2 * meta.seq_len, ckpt.params(&["tf."]))?;
        let denoiser = Denoiser::from_params(
            cfg.diffusion.denoiser.clone(),
            meta.latent_dim,
            cfg.transformer.width,
            ckpt.params(&["dn."]),
        )?;
        let mut model = SegModel::assemble(transformer, denoiser, cfg.diffusion.clone())?;
        model.latent_bound = meta.latent_bound;
        if palette.len() != autoencoder_palette_hint(&meta, &palette) {
            warn!("palette size differs from the training configuration");
        }
        Ok(Self {
            autoencoder,
            model,
            latent_scale: meta.latent_scale,
            palette,
            seed,
        })
    }

    /// Semantic image and class map for one RGB image. `index` selects the
    /// per-image random stream.
    pub fn predict(&self, img: &RgbImage, index: u64, ar_steps: usize) -> Result<(RgbImage, ClassMap)> {
        let x = images_to_tensor::<T>(&[img])?;
        let post = self.autoencoder.encode(&x)?;
        let grid = &post[0].mean;
        let x_e = scaled(&grid.seq, self.latent_scale);
        let mut rng = derive_rng(self.seed, "infer", index);
        let y = self.model.generate(&x_e, ar_steps, &mut rng)?;
        let y = LatentGrid::from_seq(grid.height, grid.width, scaled(&y, 1.0 / self.latent_scale))?;
        let decoded = self.autoencoder.decode(&[y])?;
        let semantic = tensor_to_images(&decoded)?.remove(0);
        let mask = declassify(&semantic, &self.palette);
        Ok((semantic, mask))
    }

    /// Pooled confusion matrix over a set of images, predicted in parallel.
    /// `indices[i]` is the random-stream index of image `i`.
    pub fn confusion(&self, images: &[RgbImage], masks: &[ClassMap], indices: &[u64], ar_steps: usize) -> Result<ConfusionMatrix> {
        let k = self.palette.len();
        let parts: Result<Vec<ConfusionMatrix>> = (0..images.len())
            .into_par_iter()
            .map(|i| {
                let (_, pred) = self.predict(&images[i], indices[i], ar_steps)?;
                let mut cm = ConfusionMatrix::new(k);
                cm.accumulate(&masks[i], &pred)?;
                Ok(cm)
            })
            .collect();
        let mut total = ConfusionMatrix::new(k);
        for cm in parts? {
            total.merge(&cm)?;
        }
        Ok(total)
    }
}

fn autoencoder_palette_hint(meta: &ModelMeta, palette: &Palette) -> usize {
    Palette::resolve(&meta.config.eval.palette)
        .map(|p| p.len())
        .unwrap_or(palette.len())
}

fn model_path(paths: &RunPaths, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map(Path::to_path_buf).unwrap_or_else(|| paths.model())
}

/// Writes `<stem>_semantic.png` and `<stem>_mask.png` per input image.
pub fn infer<T: Float>(cfg: &RunConfig, paths: &RunPaths, checkpoint: Option<&Path>, inputs: &[PathBuf], ar_steps: usize) -> Result<Vec<PathBuf>> {
    let predictor = Predictor::<T>::load(&model_path(paths, checkpoint), Palette::resolve(&cfg.eval.palette)?, cfg.seed)?;
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(io_err(input))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    let (h, w) = (cfg.dataset.scene.height, cfg.dataset.scene.width);
    let dir = paths.infer_dir();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let outputs: Result<Vec<Vec<PathBuf>>> = files
        .par_iter()
        .enumerate()
        .map(|(i, file)| {
            let img = load_rgb(file)?;
            if img.height() as usize % predictor.autoencoder.cfg.downsample != 0
                || img.width() as usize % predictor.autoencoder.cfg.downsample != 0
            {
                return Err(CamsegError::Parameter {
                    what: "input image",
                    msg: format!(
                        "{} is {}x{}, not divisible by the downsampling factor {}",
                        file.display(),
                        img.width(),
                        img.height(),
                        predictor.autoencoder.cfg.downsample
                    ),
                });
            }
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(CamsegError::Parameter {
                    what: "input image",
                    msg: format!("{} is {}x{}, the model expects {w}x{h}", file.display(), img.width(), img.height()),
                });
            }
            let (semantic, mask) = predictor.predict(&img, i as u64, ar_steps)?;
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let sp = dir.join(format!("{stem}_semantic.png"));
            let mp = dir.join(format!("{stem}_mask.png"));
            save_rgb(&semantic, &sp)?;
            save_mask(&mask, &mp)?;
            Ok(vec![sp, mp])
        })
        .collect();
    Ok(outputs?.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub summary_path: PathBuf,
}

fn dataset_label(split: &str) -> String {
    format!("toyscapes-{split}")
}

/// Writes `summary.csv`, `per_class.csv` and `confusion.csv` for a split.
pub fn eval<T: Float>(cfg: &RunConfig, paths: &RunPaths, checkpoint: Option<&Path>, split: &str, ar_steps: usize) -> Result<EvalRun> {
    let palette = Palette::resolve(&cfg.eval.palette)?;
    let spec = CategorySpec::resolve(&cfg.eval.categories, &palette)?;
    let predictor = Predictor::<T>::load(&model_path(paths, checkpoint), palette.clone(), cfg.seed)?;
    let ds = load_data(cfg, paths, split)?;
    info!("evaluating {} {split} images", ds.len());
    let indices: Vec<u64> = (0..ds.len() as u64).collect();
    let cm = predictor.confusion(&ds.images, &ds.masks, &indices, ar_steps)?;
    let report = MetricsReport::from_confusion(&cm, &spec)?;
    let dir = paths.eval_dir();
    let rows = vec![(dataset_label(split), report.clone())];
    let summary_path = dir.join("summary.csv");
    write_text(&summary_path, &summary_csv(&rows))?;
    write_text(&dir.join("per_class.csv"), &per_class_csv(&rows, palette.names()))?;
    write_text(&dir.join("confusion.csv"), &cm.to_csv(palette.names()))?;
    info!("AP {:.2}", report.ap);
    Ok(EvalRun {
        report,
        confusion: cm,
        summary_path,
    })
}

/// One entry of a sweep file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub kind: String,
    pub parameters: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

pub fn load_sweep(path: &Path) -> Result<Vec<SweepEntry>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CamsegError::Format {
        source_name: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `None` for the clean baseline.
    pub spec: Option<CorruptionSpec>,
    pub values: [Option<f64>; 7],
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub rows: Vec<SweepRow>,
    /// Entries that were skipped, with the reason.
    pub skipped: Vec<String>,
    pub csv_path: PathBuf,
}

pub const SWEEP_HEADER: &str = "kind,parameter,seed";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER},{}\n", SUMMARY_COLUMNS.join(","));
    for r in rows {
        match &r.spec {
            Some(c) => {
                let _ = write!(s, "{},{},{}", c.kind.name(), c.parameter, c.seed);
            }
            None => s.push_str("clean,,"),
        }
        for v in r.values {
            s.push(',');
            s.push_str(&fmt_opt(v, 2));
        }
        s.push('\n');
    }
    s
}

/// Plain `parameter AP` columns, one gnuplot data block per kind and seed.
pub fn sweep_gnuplot(rows: &[SweepRow]) -> String {
    let clean = rows.iter().find(|r| r.spec.is_none()).and_then(|r| r.values[0]);
    let mut s = String::new();
    if let Some(ap) = clean {
        let _ = writeln!(s, "# clean baseline AP {ap:.2}");
    }
    let mut current: Option<(CorruptionKind, u64)> = None;
    for r in rows {
        let Some(c) = &r.spec else { continue };
        if current != Some((c.kind, c.seed)) {
            if current.is_some() {
                s.push_str("\n\n");
            }
            let _ = writeln!(s, "# {} seed {}\n# parameter AP", c.kind.name(), c.seed);
            current = Some((c.kind, c.seed));
        }
        let _ = writeln!(s, "{} {}", c.parameter, fmt_opt(r.values[0], 2));
    }
    s
}

/// Expands a sweep file into corruption specs, skipping invalid entries.
pub fn expand_sweep(entries: &[SweepEntry]) -> (Vec<CorruptionSpec>, Vec<String>) {
    let mut specs = Vec::new();
    let mut skipped = Vec::new();
    for e in entries {
        let Some(kind) = CorruptionKind::from_name(&e.kind) else {
            skipped.push(format!("unknown corruption kind {:?}", e.kind));
            continue;
        };
        for &p in &e.parameters {
            if let Err(err) = kind.validate(p) {
                skipped.push(format!("{} {p}: {err}", kind.name()));
                continue;
            }
            for &seed in &e.seeds {
                specs.push(CorruptionSpec { kind, parameter: p, seed });
            }
        }
    }
    (specs, skipped)
}

/// Clean baseline plus one evaluation per corruption setting. Corruption
/// noise for image `i` is seeded by `(setting seed, i)`; inference noise is
/// the same as for the clean run, so identity settings reproduce it.
pub fn corrupt_sweep<T: Float>(
    cfg: &RunConfig,
    paths: &RunPaths,
    checkpoint: Option<&Path>,
    sweep: &Path,
    ar_steps: usize,
    emit_gnuplot: bool,
) -> Result<SweepRun> {
    let entries = load_sweep(sweep)?;
    let (specs, skipped) = expand_sweep(&entries);
    for s in &skipped {
        warn!("skipping sweep entry: {s}");
    }
    let palette = Palette::resolve(&cfg.eval.palette)?;
    let cats = CategorySpec::resolve(&cfg.eval.categories, &palette)?;
    let predictor = Predictor::<T>::load(&model_path(paths, checkpoint), palette, cfg.seed)?;
    let ds = load_data(cfg, paths, "val")?;
    let indices: Vec<u64> = (0..ds.len() as u64).collect();
    let evaluate = |images: &[RgbImage]| -> Result<[Option<f64>; 7]> {
        let cm = predictor.confusion(images, &ds.masks, &indices, ar_steps)?;
        Ok(MetricsReport::from_confusion(&cm, &cats)?.summary_values())
    };
    let mut rows = vec![SweepRow {
        spec: None,
        values: evaluate(&ds.images)?,
    }];
    info!("clean AP {}", fmt_opt(rows[0].values[0], 2));
    for spec in specs {
        let corrupted: Result<Vec<RgbImage>> = ds
            .images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                CorruptionSpec {
                    seed: derive_seed(spec.seed, "corruption", i as u64),
                    ..spec
                }
                .apply_with(img, cfg.eval.contrast_pivot)
            })
            .collect();
        let values = evaluate(&corrupted?)?;
        info!("{} {} seed {}: AP {}", spec.kind.name(), spec.parameter, spec.seed, fmt_opt(values[0], 2));
        rows.push(SweepRow { spec: Some(spec), values });
    }
    let dir = paths.sweep_dir();
    let csv_path = dir.join("sweep.csv");
    write_text(&csv_path, &sweep_csv(&rows))?;
    if emit_gnuplot {
        write_text(&dir.join("sweep.dat"), &sweep_gnuplot(&rows))?;
    }
    Ok(SweepRun { rows, skipped, csv_path })
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: String,
    pub f1_macro: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub arms: Vec<ArmResult>,
    /// F1(kl) − F1(vq).
    pub gap: f64,
}

pub fn comparison_csv(arms: &[ArmResult], names: &[String]) -> String {
    let mut s = format!("arm,F1,{}\n", names.join(","));
    for a in arms {
        let _ = write!(s, "{},{:.2}", a.arm, a.f1_macro);
        for v in &a.per_class_f1 {
            s.push(',');
            s.push_str(&fmt_opt(*v, 2));
        }
        s.push('\n');
    }
    s
}

/// Encode→decode→declassify on validation semantic images for both arms.
pub fn compare_vae<T: Float>(cfg: &RunConfig, paths: &RunPaths, kl: Option<&Path>, vq: Option<&Path>) -> Result<Comparison> {
    let palette = Palette::resolve(&cfg.eval.palette)?;
    let val = load_data(cfg, paths, "val")?;
    let semantic = semantic_images(&val.masks, &palette)?;
    let mut arms = Vec::new();
    for (arm, path) in [(Bottleneck::Kl, kl), (Bottleneck::Vq, vq)] {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| paths.autoencoder(arm));
        let ae = load_autoencoder::<T>(&Checkpoint::load(&path)?)?;
        if ae.cfg.bottleneck != arm {
            return Err(CamsegError::Config(format!(
                "{} holds a {} autoencoder, expected {}",
                path.display(),
                ae.cfg.bottleneck.name(),
                arm.name()
            )));
        }
        let recon = reconstruct_masks(&ae, &semantic, &palette)?;
        let cm = confusion_of(&val.masks, &recon, palette.len())?;
        arms.push(ArmResult {
            arm: arm.name().to_string(),
            f1_macro: f1_macro(&cm),
            per_class_f1: per_class_f1(&cm),
            confusion: cm,
        });
    }
    let gap = arms[0].f1_macro - arms[1].f1_macro;
    let dir = paths.compare_dir();
    write_text(&dir.join("compare_vae.csv"), &comparison_csv(&arms, palette.names()))?;
    for a in &arms {
        write_text(&dir.join(format!("confusion_{}.csv", a.arm)), &a.confusion.to_csv(palette.names()))?;
    }
    write_text(&dir.join("gap.csv"), &format!("F1_kl_minus_vq\n{gap:.2}\n"))?;
    info!("macro-F1 kl {:.2}, vq {:.2}, gap {gap:+.2}", arms[0].f1_macro, arms[1].f1_macro);
    Ok(Comparison { arms, gap })
}
