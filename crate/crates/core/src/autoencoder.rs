//! Convolutional autoencoder with a diagonal-Gaussian (KL) bottleneck or a
//! vector-quantized bottleneck.

use camseg_tensor::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, Binding, Float, Graph, ParamId, ParamStore, Tensor, Var};
use image::RgbImage;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CamsegError, Result};
use crate::nn::{randn, Conv};
use crate::seed::{derive_rng, rng_from, standard_normal, Rng};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    Kl,
    Vq,
}

impl Bottleneck {
    pub fn name(self) -> &'static str {
        match self {
            Bottleneck::Kl => "kl",
            Bottleneck::Vq => "vq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub commitment: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            commitment: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub bottleneck: Bottleneck,
    /// Spatial downsampling factor f.
    pub downsample: usize,
    /// Latent channels Z.
    pub latent_channels: usize,
    pub base_width: usize,
    pub res_blocks: usize,
    pub kl_weight: f64,
    pub vq: VqConfig,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            bottleneck: Bottleneck::Kl,
            downsample: 4,
            latent_channels: 8,
            base_width: 32,
            res_blocks: 2,
            kl_weight: 1e-6,
            vq: VqConfig::default(),
        }
    }
}

impl AutoencoderConfig {
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8, 16].contains(&self.downsample) {
            return Err(CamsegError::Config(format!(
                "downsampling factor must be 2, 4, 8 or 16, got {}",
                self.downsample
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return Err(CamsegError::Config("latent channels and base width must be positive".into()));
        }
        if self.bottleneck == Bottleneck::Vq && self.vq.codebook_size == 0 {
            return Err(CamsegError::Config("VQ codebook is empty".into()));
        }
        Ok(())
    }

    /// Latent grid extents for an `h × w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.downsample;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(CamsegError::Config(format!(
                "image size {h}x{w} must be a positive multiple of the downsampling factor {f}"
            )));
        }
        Ok((h / f, w / f))
    }
}

/// `h × w` grid of `Z`-vectors, stored in the sequence view `[L, Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub height: usize,
    pub width: usize,
    pub seq: Tensor<T>,
}

impl<T: Float> LatentGrid<T> {
    pub fn from_seq(height: usize, width: usize, seq: Tensor<T>) -> Result<Self> {
        if seq.ndim() != 2 || seq.shape()[0] != height * width {
            return Err(CamsegError::Dimension {
                what: "latent grid",
                expected: format!("[{}, Z]", height * width),
                got: format!("{:?}", seq.shape()),
            });
        }
        Ok(Self { height, width, seq })
    }

    /// From channel-major `[Z, h, w]` values.
    pub fn from_chw(data: &[T], z: usize, height: usize, width: usize) -> Result<Self> {
        let l = height * width;
        if data.len() != z * l {
            return Err(CamsegError::Dimension {
                what: "latent grid",
                expected: format!("{z}x{height}x{width}"),
                got: data.len().to_string(),
            });
        }
        let mut seq = vec![T::zero(); z * l];
        for c in 0..z {
            for p in 0..l {
                seq[p * z + c] = data[c * l + p];
            }
        }
        Self::from_seq(height, width, Tensor::new([l, z], seq)?)
    }

    pub fn to_chw(&self) -> Vec<T> {
        let (l, z) = (self.len(), self.channels());
        let src = self.seq.data();
        let mut out = vec![T::zero(); z * l];
        for p in 0..l {
            for c in 0..z {
                out[c * l + p] = src[p * z + c];
            }
        }
        out
    }

    /// Sequence length L.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.seq.shape()[1]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            seq: self.seq.scale(T::from_f64(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mean: LatentGrid<T>,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: LatentGrid<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Mean,
    Sample,
}

pub fn sample_latent<T: Float>(post: &GaussianPosterior<T>, mode: LatentMode, seed: u64) -> LatentGrid<T> {
    match mode {
        LatentMode::Mean => post.mean.clone(),
        LatentMode::Sample => {
            let mut rng = rng_from(seed);
            let data = post
                .mean
                .seq
                .data()
                .iter()
                .zip(post.logvar.seq.data())
                .map(|(&m, &lv)| {
                    let lv = lv.as_f64().clamp(LOGVAR_MIN, LOGVAR_MAX);
                    T::from_f64(m.as_f64() + (0.5 * lv).exp() * standard_normal(&mut rng))
                })
                .collect();
            LatentGrid {
                height: post.mean.height,
                width: post.mean.width,
                seq: Tensor::new(post.mean.seq.shape().to_vec(), data).expect("same shape as mean"),
            }
        }
    }
}

/// Mean over cells of `½(μ² + e^{logvar} − 1 − logvar)`.
pub fn kl_loss<T: Float>(g: &mut Graph<T>, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mean);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, T::from_f64(-1.0));
    let m = g.mean(c);
    Ok(g.scale(m, T::from_f64(0.5)))
}

/// Nearest codebook row (squared distance, lowest index on ties) for each row of `x: [n, Z]`.
pub fn nearest_codes<T: Float>(x: &Tensor<T>, codebook: &Tensor<T>) -> Result<Vec<usize>> {
    let z = codebook.last_dim();
    if codebook.rows() == 0 {
        return Err(CamsegError::Config("VQ codebook is empty".into()));
    }
    if x.last_dim() != z {
        return Err(CamsegError::Dimension {
            what: "vq input",
            expected: format!("rows of {z} features"),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok((0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, f64::INFINITY);
            for k in 0..codebook.rows() {
                let d: f64 = row
                    .iter()
                    .zip(codebook.row(k))
                    .map(|(&a, &b)| {
                        let e = (a - b).as_f64();
                        e * e
                    })
                    .sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// Output of [`vq_bottleneck`].
pub struct VqOutput {
    /// Quantized values carrying the straight-through gradient, `[B, Z, h, w]`.
    pub quantized: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    pub indices: Vec<usize>,
}

/// Quantizes channel-major latents `z_e: [B, Z, h, w]` against `codebook: [K, Z]`.
///
/// Codebook loss is `mean ‖sg(z_e) − e‖²`, commitment loss `mean ‖z_e − sg(e)‖²`.
pub fn vq_bottleneck<T: Float>(g: &mut Graph<T>, z_e: Var, codebook: Var) -> Result<VqOutput> {
    let shape = g.shape(z_e).to_vec();
    let cb = g.value(codebook).clone();
    if shape.len() != 4 || cb.ndim() != 2 || cb.shape()[1] != shape[1] {
        return Err(CamsegError::Dimension {
            what: "vq bottleneck",
            expected: format!("[B, {}, h, w] latents", cb.last_dim()),
            got: format!("{shape:?}"),
        });
    }
    let (b, z, l) = (shape[0], shape[1], shape[2] * shape[3]);
    // Sequence view of the encoder output, one row per cell.
    let ze = g.value(z_e).data();
    let mut rows = vec![T::zero(); b * l * z];
    for bi in 0..b {
        for c in 0..z {
            for p in 0..l {
                rows[(bi * l + p) * z + c] = ze[(bi * z + c) * l + p];
            }
        }
    }
    let rows = Tensor::new([b * l, z], rows)?;
    let indices = nearest_codes(&rows, &cb)?;
    let mut q_chw = vec![T::zero(); b * z * l];
    for bi in 0..b {
        for p in 0..l {
            let code = cb.row(indices[bi * l + p]);
            for c in 0..z {
                q_chw[(bi * z + c) * l + p] = code[c];
            }
        }
    }
    let q_chw = Tensor::new(shape.clone(), q_chw)?;

    let selected = g.gather_rows(codebook, &indices)?;
    let target = g.constant(rows);
    let d = g.sub(selected, target)?;
    let d2 = g.square(d);
    let codebook_loss = g.mean(d2);

    let q_const = g.constant(q_chw.clone());
    let d = g.sub(z_e, q_const)?;
    let d2 = g.square(d);
    let commitment_loss = g.mean(d2);

    let quantized = g.straight_through(z_e, q_chw)?;
    Ok(VqOutput {
        quantized,
        codebook_loss,
        commitment_loss,
        indices,
    })
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, false, 1.0, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, false, 0.0, rng),
        }
    }

    fn find<T: Float>(store: &ParamStore<T>, name: &str) -> Option<Self> {
        Some(Self {
            conv1: Conv::find(store, &format!("{name}.conv1"), 1, 1, false)?,
            conv2: Conv::find(store, &format!("{name}.conv2"), 1, 1, false)?,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = g.silu(x);
        let h = self.conv1.forward(g, b, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, b, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
struct AeLayout {
    enc_in: Conv,
    enc_stages: Vec<(Conv, Vec<ResBlock>)>,
    enc_out: Conv,
    dec_in: Conv,
    dec_stages: Vec<(Vec<ResBlock>, Conv)>,
    dec_out: Conv,
    codebook: Option<ParamId>,
}

/// Encoder/decoder weights plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    pub cfg: AutoencoderConfig,
    pub params: ParamStore<T>,
    layout: AeLayout,
}

/// Graph handles for an encoded batch.
pub struct Encoded {
    /// `[B, Z, h, w]`; for the VQ arm, the pre-quantization output.
    pub mean: Var,
    /// Clamped log-variance, KL arm only.
    pub logvar: Option<Var>,
}

impl<T: Float> Autoencoder<T> {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, "autoencoder.init", 0);
        let mut p = ParamStore::new();
        let c = cfg.base_width;
        let z = cfg.latent_channels;
        let enc_out_ch = match cfg.bottleneck {
            Bottleneck::Kl => 2 * z,
            Bottleneck::Vq => z,
        };
        let enc_in = Conv::new(&mut p, "enc.conv_in", 3, c, 3, 1, 1, false, 1.0, &mut rng);
        let mut enc_stages = Vec::new();
        for s in 0..cfg.stages() {
            let down = Conv::new(&mut p, &format!("enc.down{s}"), c, c, 4, 2, 1, false, 1.0, &mut rng);
            let res = (0..cfg.res_blocks)
                .map(|r| ResBlock::new(&mut p, &format!("enc.down{s}.res{r}"), c, &mut rng))
                .collect();
            enc_stages.push((down, res));
        }
        let enc_out = Conv::new(&mut p, "enc.conv_out", c, enc_out_ch, 3, 1, 1, false, 1.0, &mut rng);
        let dec_in = Conv::new(&mut p, "dec.conv_in", z, c, 3, 1, 1, false, 1.0, &mut rng);
        let mut dec_stages = Vec::new();
        for s in 0..cfg.stages() {
            let res = (0..cfg.res_blocks)
                .map(|r| ResBlock::new(&mut p, &format!("dec.up{s}.res{r}"), c, &mut rng))
                .collect();
            let up = Conv::new(&mut p, &format!("dec.up{s}"), c, c, 4, 2, 1, true, 1.0, &mut rng);
            dec_stages.push((res, up));
        }
        let dec_out = Conv::new(&mut p, "dec.conv_out", c, 3, 3, 1, 1, false, 1.0, &mut rng);
        let codebook = (cfg.bottleneck == Bottleneck::Vq).then(|| {
            p.add(
                "vq.codebook",
                randn(&[cfg.vq.codebook_size, z], 1.0, &mut rng),
            )
        });
        Ok(Self {
            layout: AeLayout {
                enc_in,
                enc_stages,
                enc_out,
                dec_in,
                dec_stages,
                dec_out,
                codebook,
            },
            cfg,
            params: p,
        })
    }

    /// Rebuilds the model around loaded parameters, checking every tensor shape.
    pub fn from_params(cfg: AutoencoderConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Autoencoder::<T>::new(cfg.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(CamsegError::Config(format!(
                "autoencoder expects {} tensors, checkpoint has {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let found = params
                .find(name)
                .ok_or_else(|| CamsegError::Config(format!("checkpoint lacks tensor {name}")))?;
            if params.get(found).shape() != t.shape() {
                return Err(CamsegError::Dimension {
                    what: "autoencoder tensor",
                    expected: format!("{name} {:?}", t.shape()),
                    got: format!("{:?}", params.get(found).shape()),
                });
            }
        }
        let missing = |n: &str| CamsegError::Config(format!("checkpoint lacks tensor group {n}"));
        let find_res = |prefix: &str| -> Result<Vec<ResBlock>> {
            (0..cfg.res_blocks)
                .map(|r| ResBlock::find(&params, &format!("{prefix}.res{r}")).ok_or_else(|| missing(prefix)))
                .collect()
        };
        let mut enc_stages = Vec::new();
        let mut dec_stages = Vec::new();
        for s in 0..cfg.stages() {
            let down_name = format!("enc.down{s}");
            let down = Conv::find(&params, &down_name, 2, 1, false).ok_or_else(|| missing(&down_name))?;
            enc_stages.push((down, find_res(&down_name)?));
            let up_name = format!("dec.up{s}");
            let up = Conv::find(&params, &up_name, 2, 1, true).ok_or_else(|| missing(&up_name))?;
            dec_stages.push((find_res(&up_name)?, up));
        }
        let layout = AeLayout {
            enc_in: Conv::find(&params, "enc.conv_in", 1, 1, false).ok_or_else(|| missing("enc.conv_in"))?,
            enc_stages,
            enc_out: Conv::find(&params, "enc.conv_out", 1, 1, false).ok_or_else(|| missing("enc.conv_out"))?,
            dec_in: Conv::find(&params, "dec.conv_in", 1, 1, false).ok_or_else(|| missing("dec.conv_in"))?,
            dec_stages,
            dec_out: Conv::find(&params, "dec.conv_out", 1, 1, false).ok_or_else(|| missing("dec.conv_out"))?,
            codebook: params.find("vq.codebook"),
        };
        Ok(Self { cfg, params, layout })
    }

    pub fn codebook(&self) -> Option<&Tensor<T>> {
        self.layout.codebook.map(|id| self.params.get(id))
    }

    /// Encodes `x: [B, 3, H, W]` in [−1, 1].
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Encoded> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(CamsegError::Dimension {
                what: "autoencoder input",
                expected: "[B, 3, H, W]".into(),
                got: format!("{s:?}"),
            });
        }
        let (gh, gw) = self.cfg.grid(s[2], s[3])?;
        let l = &self.layout;
        let mut h = l.enc_in.forward(g, b, x)?;
        for (down, res) in &l.enc_stages {
            h = down.forward(g, b, h)?;
            for r in res {
                h = r.forward(g, b, h)?;
            }
        }
        let h = g.silu(h);
        let out = l.enc_out.forward(g, b, h)?;
        let z = self.cfg.latent_channels;
        match self.cfg.bottleneck {
            Bottleneck::Vq => Ok(Encoded {
                mean: out,
                logvar: None,
            }),
            Bottleneck::Kl => {
                // Channels 0..Z are the mean, Z..2Z the log-variance.
                let batch = s[0];
                let flat = g.reshape(out, [batch * 2, z * gh * gw])?;
                let mut mean_idx = Vec::with_capacity(batch);
                let mut lv_idx = Vec::with_capacity(batch);
                for i in 0..batch {
                    mean_idx.push(2 * i);
                    lv_idx.push(2 * i + 1);
                }
                let mean = g.gather_rows(flat, &mean_idx)?;
                let mean = g.reshape(mean, [batch, z, gh, gw])?;
                let lv = g.gather_rows(flat, &lv_idx)?;
                let lv = g.reshape(lv, [batch, z, gh, gw])?;
                let lv = g.clamp(lv, T::from_f64(LOGVAR_MIN), T::from_f64(LOGVAR_MAX));
                Ok(Encoded {
                    mean,
                    logvar: Some(lv),
                })
            }
        }
    }

    /// Decodes `z: [B, Z, h, w]` to `[B, 3, h·f, w·f]` in [−1, 1].
    pub fn decode_graph(&self, g: &mut Graph<T>, b: &Binding, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.cfg.latent_channels {
            return Err(CamsegError::Dimension {
                what: "decoder input",
                expected: format!("[B, {}, h, w]", self.cfg.latent_channels),
                got: format!("{s:?}"),
            });
        }
        let l = &self.layout;
        let mut h = l.dec_in.forward(g, b, z)?;
        for (res, up) in &l.dec_stages {
            for r in res {
                h = r.forward(g, b, h)?;
            }
            h = up.forward(g, b, h)?;
        }
        let h = g.silu(h);
        let out = l.dec_out.forward(g, b, h)?;
        Ok(g.tanh(out))
    }

    /// Posterior for each image of a batch. For the VQ arm the mean is the
    /// quantized latent and the log-variance sits at the clamp floor.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Vec<GaussianPosterior<T>>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let enc = self.encode_graph(&mut g, &b, x)?;
        let shape = g.shape(enc.mean).to_vec();
        let (batch, z, gh, gw) = (shape[0], shape[1], shape[2], shape[3]);
        let mean_v = match (self.cfg.bottleneck, self.layout.codebook) {
            (Bottleneck::Vq, Some(cb)) => {
                let cbv = b.var(cb);
                let q = vq_bottleneck(&mut g, enc.mean, cbv)?;
                q.quantized
            }
            _ => enc.mean,
        };
        let per = z * gh * gw;
        let mean = g.value(mean_v).data();
        let lv = enc.logvar.map(|v| g.value(v).data());
        (0..batch)
            .map(|i| {
                let m = LatentGrid::from_chw(&mean[i * per..(i + 1) * per], z, gh, gw)?;
                let logvar = match lv {
                    Some(lv) => LatentGrid::from_chw(&lv[i * per..(i + 1) * per], z, gh, gw)?,
                    None => LatentGrid::from_seq(gh, gw, Tensor::full([gh * gw, z], T::from_f64(LOGVAR_MIN)))?,
                };
                Ok(GaussianPosterior { mean: m, logvar })
            })
            .collect()
    }

    /// Decodes latent grids to images `[B, 3, H, W]`.
    pub fn decode(&self, latents: &[LatentGrid<T>]) -> Result<Tensor<T>> {
        let first = latents.first().ok_or_else(|| CamsegError::Dimension {
            what: "decoder batch",
            expected: "at least one latent".into(),
            got: "0".into(),
        })?;
        let z = self.cfg.latent_channels;
        let (gh, gw) = (first.height, first.width);
        let mut data = Vec::with_capacity(latents.len() * z * gh * gw);
        for lat in latents {
            if lat.height != gh || lat.width != gw || lat.channels() != z {
                return Err(CamsegError::Dimension {
                    what: "decoder batch",
                    expected: format!("{gh}x{gw}x{z}"),
                    got: format!("{}x{}x{}", lat.height, lat.width, lat.channels()),
                });
            }
            data.extend(lat.to_chw());
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let zv = g.constant(Tensor::new([latents.len(), z, gh, gw], data)?);
        let out = self.decode_graph(&mut g, &b, zv)?;
        Ok(g.value(out).clone())
    }
}

/// `[B, 3, H, W]` tensor in [−1, 1] from 8-bit images of equal size.
pub fn images_to_tensor<T: Float>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let (w, h) = images.first().map(|i| i.dimensions()).unwrap_or((0, 0));
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dimensions() != (w as u32, h as u32) {
            return Err(CamsegError::Dimension {
                what: "image batch",
                expected: format!("{w}x{h}"),
                got: format!("{:?}", img.dimensions()),
            });
        }
        let raw = img.as_raw();
        for c in 0..3 {
            for p in 0..h * w {
                data.push(T::from_f64(raw[p * 3 + c] as f64 / 127.5 - 1.0));
            }
        }
    }
    Ok(Tensor::new([images.len(), 3, h, w], data)?)
}

/// Inverse of [`images_to_tensor`] with round-to-nearest and clamping.
pub fn tensor_to_images<T: Float>(t: &Tensor<T>) -> Result<Vec<RgbImage>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(CamsegError::Dimension {
            what: "decoded images",
            expected: "[B, 3, H, W]".into(),
            got: format!("{s:?}"),
        });
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let d = t.data();
    Ok((0..b)
        .map(|i| {
            let mut raw = vec![0u8; plane * 3];
            for c in 0..3 {
                for p in 0..plane {
                    let v = (d[(i * 3 + c) * plane + p].as_f64() + 1.0) * 127.5;
                    raw[p * 3 + c] = v.clamp(0.0, 255.0).round() as u8;
                }
            }
            RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions")
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of batch slots filled with RGB scenes instead of semantic images.
    pub rgb_fraction: f64,
    pub grad_clip: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            rgb_fraction: 0.5,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AeLogRow {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl AeLogRow {
    pub const CSV_HEADER: &'static str = "step,loss,recon,kl,codebook,commitment";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.loss, self.recon, self.kl, self.codebook, self.commitment
        )
    }
}

/// Losses of one batch, recorded on `g`.
pub struct AeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Option<Var>,
    pub codebook: Option<Var>,
    pub commitment: Option<Var>,
}

impl<T: Float> Autoencoder<T> {
    /// Reconstruction MSE plus the bottleneck's regularizers. `rng` drives
    /// the posterior sample of the KL arm.
    pub fn loss_graph(&self, g: &mut Graph<T>, b: &Binding, batch: &Tensor<T>, rng: &mut Rng) -> Result<AeLoss> {
        let x = g.constant(batch.clone());
        let enc = self.encode_graph(g, b, x)?;
        let (latent, kl, codebook, commitment) = match self.cfg.bottleneck {
            Bottleneck::Kl => {
                let lv = enc.logvar.expect("KL arm has a log-variance");
                let half = g.scale(lv, T::from_f64(0.5));
                let std = g.exp(half);
                let shape = g.shape(enc.mean).to_vec();
                let eps = g.constant(Tensor::from_fn(shape, |_| T::from_f64(standard_normal(rng))));
                let noise = g.mul(std, eps)?;
                let latent = g.add(enc.mean, noise)?;
                let kl = kl_loss(g, enc.mean, lv)?;
                (latent, Some(kl), None, None)
            }
            Bottleneck::Vq => {
                let cb = b.var(self.layout.codebook.expect("VQ arm has a codebook"));
                let q = vq_bottleneck(g, enc.mean, cb)?;
                (q.quantized, None, Some(q.codebook_loss), Some(q.commitment_loss))
            }
        };
        let recon_img = self.decode_graph(g, b, latent)?;
        let d = g.sub(recon_img, x)?;
        let d2 = g.square(d);
        let recon = g.mean(d2);
        let mut total = recon;
        if let Some(kl) = kl {
            let w = g.scale(kl, T::from_f64(self.cfg.kl_weight));
            total = g.add(total, w)?;
        }
        if let (Some(cbl), Some(cml)) = (codebook, commitment) {
            let w = g.scale(cml, T::from_f64(self.cfg.vq.commitment));
            let s = g.add(cbl, w)?;
            total = g.add(total, s)?;
        }
        Ok(AeLoss {
            total,
            recon,
            kl,
            codebook,
            commitment,
        })
    }
}

/// Images the autoencoder is trained on: semantic renderings and RGB scenes.
pub struct AeTrainingData<'a> {
    pub semantic: Vec<&'a RgbImage>,
    pub rgb: Vec<&'a RgbImage>,
}

/// Trains in place. Deterministic in `seed`; `on_step` sees every log row.
pub fn train_autoencoder<T: Float>(
    ae: &mut Autoencoder<T>,
    data: &AeTrainingData,
    cfg: &AeTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&AeLogRow),
) -> Result<Vec<AeLogRow>> {
    if data.semantic.is_empty() || cfg.batch == 0 {
        return Err(CamsegError::Dataset("autoencoder training needs semantic images and a positive batch".into()));
    }
    let opt = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new(&ae.params);
    let mut batch_rng = derive_rng(seed, "autoencoder.batches", 0);
    let mut noise_rng = derive_rng(seed, "autoencoder.noise", 0);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let picks: Vec<&RgbImage> = (0..cfg.batch)
            .map(|_| {
                if !data.rgb.is_empty() && batch_rng.random::<f64>() < cfg.rgb_fraction {
                    data.rgb[batch_rng.random_range(0..data.rgb.len())]
                } else {
                    data.semantic[batch_rng.random_range(0..data.semantic.len())]
                }
            })
            .collect();
        let x = images_to_tensor::<T>(&picks)?;
        let mut g = Graph::new();
        let b = ae.params.bind(&mut g, true);
        let loss = ae.loss_graph(&mut g, &b, &x, &mut noise_rng)?;
        let val = |v: Option<Var>| v.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0);
        let row = AeLogRow {
            step,
            loss: g.value(loss.total).item().as_f64(),
            recon: g.value(loss.recon).item().as_f64(),
            kl: val(loss.kl),
            codebook: val(loss.codebook),
            commitment: val(loss.commitment),
        };
        if !row.loss.is_finite() {
            return Err(CamsegError::Training {
                step,
                msg: format!("non-finite autoencoder loss {}", row.loss),
            });
        }
        let mut grads = g.backward(loss.total)?;
        let mut grads = ae.params.collect_grads(&b, &mut grads);
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.grad_clip);
        }
        adamw_step(&mut ae.params, &grads, &mut state, &opt).map_err(|e| CamsegError::Training {
            step,
            msg: e.to_string(),
        })?;
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_the_downsampling_factor() {
        let cfg = AutoencoderConfig {
            base_width: 4,
            res_blocks: 1,
            ..AutoencoderConfig::default()
        };
        let ae = Autoencoder::<f64>::new(cfg, 1).unwrap();
        let x = Tensor::from_fn([2, 3, 16, 16], |i| ((i % 7) as f64 - 3.0) / 4.0);
        let post = ae.encode(&x).unwrap();
        assert_eq!(post.len(), 2);
        assert_eq!((post[0].mean.height, post[0].mean.width, post[0].mean.channels()), (4, 4, 8));
        let y = ae.decode(&[post[0].mean.clone()]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn indivisible_images_are_rejected() {
        let cfg = AutoencoderConfig {
            downsample: 16,
            ..AutoencoderConfig::default()
        };
        assert!(cfg.grid(72, 64).is_err());
        assert_eq!(cfg.grid(768, 768).unwrap(), (48, 48));
    }

    #[test]
    fn grid_sequence_round_trip() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let g = LatentGrid::from_chw(&data, 2, 3, 4).unwrap();
        assert_eq!(g.seq.row(1), &[1.0, 13.0]);
        assert_eq!(g.to_chw(), data);
    }
}
