//! Bidirectional masked transformer mapping `[x_e ‖ masked y_e]` to one
//! condition vector per semantic position.

use camseg_tensor::{Binding, Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{CamsegError, Result};
use crate::nn::{adopt_params, randn, timestep_features, Linear};
use crate::seed::{derive_rng, standard_normal, Rng};

pub const MIN_MASK_RATIO: f64 = 0.70;
pub const MASK_RATIO_STD: f64 = 0.25;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    /// Drop masked tokens before the encoder and reinsert them as mask
    /// tokens for the decoder.
    pub drop_masked: bool,
    /// Amplitude of the sinusoidal initialization of the learned positions.
    pub position_scale: f64,
    /// Start each block's key projection as a copy of its query projection.
    pub tie_qk_init: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            encoder_depth: 4,
            decoder_depth: 4,
            mlp_ratio: 4,
            drop_masked: false,
            position_scale: 1.0,
            tie_qk_init: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(CamsegError::Config(format!(
                "transformer width {} must be a positive multiple of the head count {}",
                self.width, self.heads
            )));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 || self.mlp_ratio == 0 {
            return Err(CamsegError::Config("transformer depths and mlp ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws from `N(1, 0.25²)` until the value lands in `[0.70, 1.00]`.
pub fn sample_mask_ratio(rng: &mut Rng) -> f64 {
    loop {
        let r = 1.0 + MASK_RATIO_STD * standard_normal(rng);
        if (MIN_MASK_RATIO..=1.0).contains(&r) {
            return r;
        }
    }
}

/// Which semantic positions are hidden (`true`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
}

impl MaskPlan {
    /// `⌈ratio·L⌉` positions chosen uniformly without replacement.
    pub fn random(len: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(CamsegError::Parameter {
                what: "mask ratio",
                msg: format!("{ratio} outside [0, 1]"),
            });
        }
        // The small offset keeps products like 0.7·100 from rounding up to 71.
        let count = ((ratio * len as f64) - 1e-9).ceil().max(0.0) as usize;
        let mut masked = vec![false; len];
        for i in sample(rng, len, count.min(len)).into_iter() {
            masked[i] = true;
        }
        Ok(Self { masked })
    }

    pub fn full(len: usize) -> Self {
        Self { masked: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.len().max(1) as f64
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.masked[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Rgb = 0,
    Semantic = 1,
}

/// Transformer input before embedding: `2L` raw latent tokens with their
/// absolute positions, segments and mask flags. Masked rows hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T> {
    pub tokens: Tensor<T>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub masked: Vec<bool>,
}

impl<T: Float> SequenceBatch<T> {
    /// `x_e` and `y_e` are `[L, Z]`.
    pub fn assemble(x_e: &Tensor<T>, y_e: &Tensor<T>, plan: &MaskPlan) -> Result<Self> {
        if x_e.ndim() != 2 || x_e.shape() != y_e.shape() || plan.len() != x_e.shape()[0] {
            return Err(CamsegError::Dimension {
                what: "sequence halves",
                expected: format!("x_e, y_e of equal shape with {} mask flags", plan.len()),
                got: format!("{:?} and {:?}", x_e.shape(), y_e.shape()),
            });
        }
        let (l, z) = (x_e.shape()[0], x_e.shape()[1]);
        let mut data = Vec::with_capacity(2 * l * z);
        data.extend_from_slice(x_e.data());
        for i in 0..l {
            if plan.masked[i] {
                data.extend(std::iter::repeat_n(T::zero(), z));
            } else {
                data.extend_from_slice(y_e.row(i));
            }
        }
        let mut masked = vec![false; l];
        masked.extend_from_slice(&plan.masked);
        let mut segments = vec![Segment::Rgb; l];
        segments.extend(std::iter::repeat_n(Segment::Semantic, l));
        Ok(Self {
            tokens: Tensor::new([2 * l, z], data)?,
            positions: (0..2 * l).collect(),
            segments,
            masked,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of semantic positions L.
    pub fn semantic_len(&self) -> usize {
        self.len() / 2
    }
}

/// Samples a mask ratio and mask positions, then assembles the sequence.
pub fn build_training_sequence<T: Float>(x_e: &Tensor<T>, y_e: &Tensor<T>, rng: &mut Rng) -> Result<(SequenceBatch<T>, MaskPlan)> {
    let ratio = sample_mask_ratio(rng);
    build_sequence_with_ratio(x_e, y_e, ratio, rng)
}

pub fn build_sequence_with_ratio<T: Float>(
    x_e: &Tensor<T>,
    y_e: &Tensor<T>,
    ratio: f64,
    rng: &mut Rng,
) -> Result<(SequenceBatch<T>, MaskPlan)> {
    if x_e.shape() != y_e.shape() {
        return Err(CamsegError::Dimension {
            what: "sequence halves",
            expected: format!("{:?}", x_e.shape()),
            got: format!("{:?}", y_e.shape()),
        });
    }
    let plan = MaskPlan::random(x_e.shape()[0], ratio, rng)?;
    Ok((SequenceBatch::assemble(x_e, y_e, &plan)?, plan))
}

/// Every semantic slot masked.
pub fn build_inference_sequence<T: Float>(x_e: &Tensor<T>) -> Result<SequenceBatch<T>> {
    let zeros = Tensor::zeros(x_e.shape().to_vec());
    SequenceBatch::assemble(x_e, &zeros, &MaskPlan::full(x_e.shape()[0]))
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Float>(p: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: p.add(format!("{name}.gain"), Tensor::full([d], T::one())),
            bias: p.add(format!("{name}.bias"), Tensor::zeros([d])),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        Ok(g.layer_norm_affine(x, b.var(self.gain), b.var(self.bias), T::from_f64(LN_EPS))?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<T: Float>(p: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        let d = cfg.width;
        let h = d * cfg.mlp_ratio;
        let blk = Self {
            norm1: Norm::new(p, &format!("{name}.norm1"), d),
            q: Linear::new(p, &format!("{name}.q"), d, d, 1.0, rng),
            k: Linear::new(p, &format!("{name}.k"), d, d, 1.0, rng),
            v: Linear::new(p, &format!("{name}.v"), d, d, 1.0, rng),
            proj: Linear::new(p, &format!("{name}.proj"), d, d, 0.5, rng),
            norm2: Norm::new(p, &format!("{name}.norm2"), d),
            fc1: Linear::new(p, &format!("{name}.fc1"), d, h, 1.0, rng),
            fc2: Linear::new(p, &format!("{name}.fc2"), h, d, 0.5, rng),
        };
        if cfg.tie_qk_init {
            let q = p.get(p.find(&format!("{name}.q.w")).expect("just added")).clone();
            *p.get_mut(p.find(&format!("{name}.k.w")).expect("just added")) = q;
        }
        blk
    }
}

/// Full (unmasked) multi-head self-attention over `x: [n, d]`. Returns the
/// output and the attention probabilities `[heads, n, n]`.
pub fn self_attention<T: Float>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let s = g.shape(q).to_vec();
    let (n, d) = (s[0], s[1]);
    let dh = d / heads;
    let split = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let x = g.reshape(x, [n, heads, dh])?;
        Ok(g.swap_axes01(x)?)
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.matmul_t(qh, kh, true)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = g.softmax(scores);
    let out = g.matmul(probs, vh)?;
    let out = g.swap_axes01(out)?;
    Ok((g.reshape(out, [n, d])?, probs))
}

fn block_forward<T: Float>(g: &mut Graph<T>, b: &Binding, blk: &Block, heads: usize, x: Var) -> Result<(Var, Var)> {
    let h = blk.norm1.forward(g, b, x)?;
    let q = blk.q.forward(g, b, h)?;
    let k = blk.k.forward(g, b, h)?;
    let v = blk.v.forward(g, b, h)?;
    let (a, probs) = self_attention(g, q, k, v, heads)?;
    let a = blk.proj.forward(g, b, a)?;
    let x = g.add(x, a)?;
    let h = blk.norm2.forward(g, b, x)?;
    let h = blk.fc1.forward(g, b, h)?;
    let h = g.gelu(h);
    let h = blk.fc2.forward(g, b, h)?;
    Ok((g.add(x, h)?, probs))
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    mask_token: ParamId,
    pos: ParamId,
    seg: ParamId,
    encoder: Vec<Block>,
    enc_norm: Norm,
    dec_pos: ParamId,
    decoder: Vec<Block>,
    dec_norm: Norm,
}

/// Decoder output rows at the semantic positions plus every layer's attention.
#[derive(Debug, Clone)]
pub struct TransformerOutput {
    /// `[L, d]`.
    pub z: Var,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MaskedTransformer<T> {
    pub cfg: TransformerConfig,
    pub latent_dim: usize,
    /// Sequence capacity 2L.
    pub capacity: usize,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Float> MaskedTransformer<T> {
    pub fn new(cfg: TransformerConfig, latent_dim: usize, capacity: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if latent_dim == 0 || capacity == 0 || capacity % 2 != 0 {
            return Err(CamsegError::Config(format!(
                "transformer needs Z > 0 and an even positive capacity, got Z={latent_dim}, capacity={capacity}"
            )));
        }
        let mut rng = derive_rng(seed, "transformer.init", 0);
        let mut p = ParamStore::new();
        let d = cfg.width;
        let input = Linear::new(&mut p, "tf.input", latent_dim, d, 1.0, &mut rng);
        let mask_token = p.add("tf.mask_token", Tensor::zeros([d]));
        let pos = p.add("tf.pos", sinusoidal_positions(capacity / 2, capacity, d, cfg.position_scale));
        let seg = p.add("tf.seg", randn(&[2, d], 0.02, &mut rng));
        let encoder = (0..cfg.encoder_depth)
            .map(|i| Block::new(&mut p, &format!("tf.enc{i}"), &cfg, &mut rng))
            .collect();
        let enc_norm = Norm::new(&mut p, "tf.enc_norm", d);
        let dec_pos = p.add("tf.dec_pos", Tensor::zeros([capacity, d]));
        let decoder = (0..cfg.decoder_depth)
            .map(|i| Block::new(&mut p, &format!("tf.dec{i}"), &cfg, &mut rng))
            .collect();
        let dec_norm = Norm::new(&mut p, "tf.dec_norm", d);
        Ok(Self {
            cfg,
            latent_dim,
            capacity,
            params: p,
            layout: Layout {
                input,
                mask_token,
                pos,
                seg,
                encoder,
                enc_norm,
                dec_pos,
                decoder,
                dec_norm,
            },
        })
    }

    pub fn from_params(cfg: TransformerConfig, latent_dim: usize, capacity: usize, params: ParamStore<T>) -> Result<Self> {
        let mut t = Self::new(cfg, latent_dim, capacity, 0)?;
        adopt_params(&mut t.params, params, "transformer")?;
        Ok(t)
    }

    fn check(&self, g: &Graph<T>, seq: &SequenceBatch<T>, tokens: Var) -> Result<()> {
        if seq.len() > self.capacity || seq.positions.iter().any(|&p| p >= self.capacity) {
            return Err(CamsegError::Config(format!(
                "sequence of {} tokens exceeds transformer capacity {}",
                seq.len(),
                self.capacity
            )));
        }
        if g.shape(tokens) != [seq.len(), self.latent_dim] || seq.segments.len() != seq.len() || seq.masked.len() != seq.len() {
            return Err(CamsegError::Dimension {
                what: "transformer tokens",
                expected: format!("[{}, {}]", seq.len(), self.latent_dim),
                got: format!("{:?}", g.shape(tokens)),
            });
        }
        Ok(())
    }

    /// Records the forward pass for one sequence. `tokens` is the graph copy
    /// of `seq.tokens`, so callers may perturb it for probes.
    pub fn forward_graph(&self, g: &mut Graph<T>, b: &Binding, seq: &SequenceBatch<T>, tokens: Var) -> Result<TransformerOutput> {
        self.check(g, seq, tokens)?;
        let l = &self.layout;
        let n = seq.len();
        let heads = self.cfg.heads;
        let mut attention = Vec::new();

        let x = l.input.forward(g, b, tokens)?;
        let seg_ids: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
        let seg = g.gather_rows(b.var(l.seg), &seg_ids)?;
        let pos = g.gather_rows(b.var(l.pos), &seq.positions)?;

        let mut h = if self.cfg.drop_masked {
            let keep: Vec<usize> = (0..n).filter(|&i| !seq.masked[i]).collect();
            let x = g.add(x, pos)?;
            let x = g.add(x, seg)?;
            g.gather_rows(x, &keep)?
        } else {
            let x = g.mask_fill(x, b.var(l.mask_token), &seq.masked)?;
            let x = g.add(x, pos)?;
            g.add(x, seg)?
        };
        for blk in &l.encoder {
            let (y, p) = block_forward(g, b, blk, heads, h)?;
            h = y;
            attention.push(p);
        }
        h = l.enc_norm.forward(g, b, h)?;

        if self.cfg.drop_masked {
            // Scatter encoder rows back into place and fill the gaps with mask tokens.
            let kept = g.shape(h)[0];
            let dropped = n - kept;
            let token = g.reshape(b.var(l.mask_token), [1, self.cfg.width])?;
            let fill = g.gather_rows(token, &vec![0; dropped])?;
            let stacked = g.concat_rows(&[h, fill])?;
            let (mut next_kept, mut next_fill) = (0, kept);
            let order: Vec<usize> = seq
                .masked
                .iter()
                .map(|&m| {
                    let slot = if m { &mut next_fill } else { &mut next_kept };
                    *slot += 1;
                    *slot - 1
                })
                .collect();
            h = g.gather_rows(stacked, &order)?;
        }
        let dpos = g.gather_rows(b.var(l.dec_pos), &seq.positions)?;
        h = g.add(h, dpos)?;
        for blk in &l.decoder {
            let (y, p) = block_forward(g, b, blk, heads, h)?;
            h = y;
            attention.push(p);
        }
        h = l.dec_norm.forward(g, b, h)?;
        let sem: Vec<usize> = (0..n).filter(|&i| seq.segments[i] == Segment::Semantic).collect();
        let z = g.gather_rows(h, &sem)?;
        Ok(TransformerOutput { z, attention })
    }

    /// Condition vectors `[L, d]` for one sequence with frozen weights.
    pub fn conditions(&self, seq: &SequenceBatch<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let tokens = g.constant(seq.tokens.clone());
        let out = self.forward_graph(&mut g, &b, seq, tokens)?;
        Ok(g.value(out.z).clone())
    }
}

/// Sinusoidal table for a `[rgb ‖ semantic]` sequence: both halves share the
/// encoding of the grid index, the segment embedding tells them apart.
fn sinusoidal_positions<T: Float>(half: usize, capacity: usize, d: usize, scale: f64) -> Tensor<T> {
    let even = d - d % 2;
    let mut data = Vec::with_capacity(capacity * d);
    for p in 0..capacity {
        let mut row = if even > 0 {
            timestep_features((p % half) as f64, even, 10_000.0)
        } else {
            Vec::new()
        };
        row.resize(d, 0.0);
        data.extend(row.into_iter().map(|v| T::from_f64(scale * v)));
    }
    Tensor::new([capacity, d], data).expect("table size matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn mask_count_uses_ceiling() {
        let mut rng = rng_from(3);
        assert_eq!(MaskPlan::random(100, 0.70, &mut rng).unwrap().count(), 70);
        assert_eq!(MaskPlan::random(10, 0.71, &mut rng).unwrap().count(), 8);
        assert_eq!(MaskPlan::random(10, 1.0, &mut rng).unwrap().count(), 10);
    }

    #[test]
    fn inference_sequence_matches_full_training_mask() {
        let x = Tensor::<f64>::from_fn([6, 3], |i| i as f64);
        let y = Tensor::<f64>::zeros([6, 3]);
        let mut rng = rng_from(1);
        let (train, plan) = build_sequence_with_ratio(&x, &y, 1.0, &mut rng).unwrap();
        assert_eq!(plan.count(), 6);
        let infer = build_inference_sequence(&x).unwrap();
        assert_eq!(train, infer);
        assert_eq!(infer.masked, [vec![false; 6], vec![true; 6]].concat());
        assert_eq!(infer.tokens.shape(), [12, 3]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TransformerConfig {
            width: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(MaskedTransformer::<f64>::new(cfg, 2, 8, 0).is_err());
    }
}
