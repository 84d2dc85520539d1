//! The segmentation generator: masked transformer plus per-position diffusion
//! head, with its training loop and both inference modes.

use camseg_tensor::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, Float, Graph, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    cosine_schedule, ddpm_sample, diffusion_loss, stride_schedule, ConditionedDenoiser, Denoiser, DenoiserConfig, EpsilonModel,
    NoiseSchedule, Parameterization, StridedSchedule,
};
use crate::error::{CamsegError, Result};
use crate::seed::{derive_rng, standard_normal, Rng};
use crate::transformer::{build_training_sequence, MaskPlan, MaskedTransformer, SequenceBatch, TransformerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub infer_steps: usize,
    pub cosine_offset: f64,
    pub parameterization: Parameterization,
    /// Clamp the sampler's clean-latent estimate to the range seen in training.
    pub clip_denoised: bool,
    pub denoiser: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            infer_steps: 100,
            cosine_offset: 0.008,
            parameterization: Parameterization::Standard,
            clip_denoised: true,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps == 0 || self.infer_steps == 0 || self.infer_steps > self.train_steps {
            return Err(CamsegError::Config(format!(
                "diffusion steps need 1 <= infer ({}) <= train ({})",
                self.infer_steps, self.train_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegModel<T> {
    pub transformer: MaskedTransformer<T>,
    pub denoiser: Denoiser<T>,
    pub diffusion: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub strided: StridedSchedule,
    /// Largest absolute target coordinate seen in training; set by [`train_model`].
    pub latent_bound: Option<f64>,
}

impl<T: Float> SegModel<T> {
    /// `seq_len` is L, the number of latent positions per image.
    pub fn new(tcfg: TransformerConfig, dcfg: DiffusionConfig, latent_dim: usize, seq_len: usize, seed: u64) -> Result<Self> {
        dcfg.validate()?;
        let transformer = MaskedTransformer::new(tcfg, latent_dim, 2 * seq_len, seed)?;
        let denoiser = Denoiser::new(dcfg.denoiser.clone(), latent_dim, transformer.cfg.width, seed, true)?;
        Self::assemble(transformer, denoiser, dcfg)
    }

    pub fn assemble(transformer: MaskedTransformer<T>, denoiser: Denoiser<T>, diffusion: DiffusionConfig) -> Result<Self> {
        diffusion.validate()?;
        let schedule = cosine_schedule(diffusion.train_steps, diffusion.cosine_offset)?;
        let strided = stride_schedule(&schedule, diffusion.infer_steps)?;
        Ok(Self {
            transformer,
            denoiser,
            diffusion,
            schedule,
            strided,
            latent_bound: None,
        })
    }

    /// Names of every tensor the trainer updates.
    pub fn trainable_names(&self) -> Vec<String> {
        let tf = self.transformer.params.iter().map(|(n, _)| n.to_string());
        tf.chain(self.denoiser.params.iter().map(|(n, _)| n.to_string())).collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.transformer.latent_dim
    }

    pub fn seq_len(&self) -> usize {
        self.transformer.capacity / 2
    }

    /// Samples latents `[L, Z]` for the RGB latents `x_e: [L, Z]`.
    ///
    /// `ar_steps == 1` is one fully masked pass. Larger values reveal the
    /// positions in `ar_steps` rounds; each round samples every hidden
    /// position and keeps those whose sample the denoiser considers cleanest
    /// (smallest predicted noise at the first timestep).
    pub fn generate(&self, x_e: &Tensor<T>, ar_steps: usize, rng: &mut Rng) -> Result<Tensor<T>> {
        let (l, z) = (self.seq_len(), self.latent_dim());
        if x_e.shape() != [l, z] {
            return Err(CamsegError::Dimension {
                what: "RGB latents",
                expected: format!("[{l}, {z}]"),
                got: format!("{:?}", x_e.shape()),
            });
        }
        if ar_steps == 0 || ar_steps > l {
            return Err(CamsegError::Parameter {
                what: "autoregressive steps",
                msg: format!("{ar_steps} outside [1, {l}]"),
            });
        }
        let param = self.diffusion.parameterization;
        let clip = self.latent_bound.filter(|_| self.diffusion.clip_denoised);
        let mut known = vec![0.0; l * z];
        let mut plan = MaskPlan::full(l);
        for round in 0..ar_steps {
            let y = Tensor::from_f64([l, z], &known)?;
            let seq = SequenceBatch::assemble(x_e, &y, &plan)?;
            let cond_all = self.transformer.conditions(&seq)?;
            let hidden = plan.indices();
            let cond = gather(&cond_all, &hidden)?;
            let mut model = ConditionedDenoiser::new(&self.denoiser, &cond)?;
            let sample = ddpm_sample(&mut model, &self.strided, param, clip, rng)?;
            let reveal_total = (l * (round + 1)).div_ceil(ar_steps);
            let reveal = reveal_total - (l - hidden.len());
            let chosen: Vec<usize> = if reveal == hidden.len() {
                (0..hidden.len()).collect()
            } else {
                let residual = model.predict(&sample, self.strided.timesteps[0])?;
                let mut order: Vec<(f64, usize)> = residual
                    .chunks(z)
                    .enumerate()
                    .map(|(i, r)| (r.iter().map(|v| v * v).sum::<f64>(), i))
                    .collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                order.into_iter().take(reveal).map(|(_, i)| i).collect()
            };
            for i in chosen {
                let pos = hidden[i];
                known[pos * z..(pos + 1) * z].copy_from_slice(&sample[i * z..(i + 1) * z]);
                plan.masked[pos] = false;
            }
        }
        Tensor::from_f64([l, z], &known).map_err(Into::into)
    }
}

fn gather<T: Float>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let d = t.last_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new([rows.len(), d], data).map_err(Into::into)
}

/// Cached latents of one training pair, already multiplied by the latent scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair<T> {
    /// Posterior mean of the RGB image, `[L, Z]`.
    pub rgb: Tensor<T>,
    /// Posterior mean and standard deviation of the semantic image.
    pub sem_mean: Tensor<T>,
    pub sem_std: Tensor<T>,
}

impl<T: Float> LatentPair<T> {
    /// A fresh posterior sample of the semantic latents.
    pub fn sample_target(&self, rng: &mut Rng) -> Tensor<T> {
        let data = self
            .sem_mean
            .data()
            .iter()
            .zip(self.sem_std.data())
            .map(|(&m, &s)| T::from_f64(m.as_f64() + s.as_f64() * standard_normal(rng)))
            .collect();
        Tensor::new(self.sem_mean.shape().to_vec(), data).expect("same shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Use a posterior sample (rather than the mean) as the semantic target.
    pub sample_targets: bool,
    /// Independent (t, ε) draws per condition vector in each step.
    pub diffusion_repeats: usize,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            sample_targets: true,
            diffusion_repeats: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelLogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub mask_ratio: f64,
}

impl ModelLogRow {
    pub const CSV_HEADER: &'static str = "step,loss,grad_norm,mask_ratio";

    pub fn csv_line(&self) -> String {
        format!("{},{:.9e},{:.9e},{:.6}", self.step, self.loss, self.grad_norm, self.mask_ratio)
    }
}

/// Trains transformer and denoiser jointly in place; nothing else is touched.
pub fn train_model<T: Float>(
    model: &mut SegModel<T>,
    data: &[LatentPair<T>],
    cfg: &ModelTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&ModelLogRow),
) -> Result<Vec<ModelLogRow>> {
    if data.is_empty() || cfg.batch == 0 || cfg.diffusion_repeats == 0 {
        return Err(CamsegError::Dataset(
            "model training needs latents, a positive batch and at least one diffusion repeat".into(),
        ));
    }
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut tf_state = AdamWState::new(&model.transformer.params);
    let mut dn_state = AdamWState::new(&model.denoiser.params);
    let mut batch_rng = derive_rng(seed, "model.batches", 0);
    let mut mask_rng = derive_rng(seed, "model.masks", 0);
    let mut noise_rng = derive_rng(seed, "model.noise", 0);
    let param = model.diffusion.parameterization;
    model.latent_bound = Some(
        data.iter()
            .flat_map(|p| p.sem_mean.data().iter())
            .fold(0.0, |m, v| m.max(v.as_f64().abs())),
    );
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bt = model.transformer.params.bind(&mut g, true);
        let bd = model.denoiser.params.bind(&mut g, true);
        let mut conds = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::new();
        let mut ratio_sum = 0.0;
        for _ in 0..cfg.batch {
            let pair = &data[batch_rng.random_range(0..data.len())];
            let y = if cfg.sample_targets {
                pair.sample_target(&mut noise_rng)
            } else {
                pair.sem_mean.clone()
            };
            let (seq, plan) = build_training_sequence(&pair.rgb, &y, &mut mask_rng)?;
            ratio_sum += plan.ratio();
            let tokens = g.constant(seq.tokens.clone());
            let out = model.transformer.forward_graph(&mut g, &bt, &seq, tokens)?;
            let idx = plan.indices();
            conds.push(g.gather_rows(out.z, &idx)?);
            targets.extend_from_slice(gather(&y, &idx)?.data());
        }
        let mut cond = g.concat_rows(&conds)?;
        let m = g.shape(cond)[0];
        if cfg.diffusion_repeats > 1 {
            cond = g.concat_rows(&vec![cond; cfg.diffusion_repeats])?;
            targets = targets.repeat(cfg.diffusion_repeats);
        }
        let targets = Tensor::new([m * cfg.diffusion_repeats, model.latent_dim()], targets)?;
        let loss = diffusion_loss(&mut g, &model.denoiser, &bd, cond, &targets, &model.schedule, param, &mut noise_rng)?;
        let loss_val = g.value(loss).item().as_f64();
        if !loss_val.is_finite() {
            return Err(CamsegError::Training {
                step,
                msg: format!("non-finite diffusion loss {loss_val}"),
            });
        }
        let mut grads = g.backward(loss)?;
        let mut all = model.transformer.params.collect_grads(&bt, &mut grads);
        let n_tf = all.len();
        all.extend(model.denoiser.params.collect_grads(&bd, &mut grads));
        let grad_norm = if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut all, cfg.grad_clip)
        } else {
            clip_grad_norm(&mut all, f64::INFINITY)
        };
        let dn_grads = all.split_off(n_tf);
        let wrap = |e: camseg_tensor::TensorError| CamsegError::Training { step, msg: e.to_string() };
        adamw_step(&mut model.transformer.params, &all, &mut tf_state, &opt).map_err(wrap)?;
        adamw_step(&mut model.denoiser.params, &dn_grads, &mut dn_state, &opt).map_err(wrap)?;
        let row = ModelLogRow {
            step,
            loss: loss_val,
            grad_norm,
            mask_ratio: ratio_sum / cfg.batch as f64,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}
