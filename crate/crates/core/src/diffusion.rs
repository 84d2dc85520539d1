//! Cosine noise schedule, forward noising, the ε-prediction loss and the
//! DDPM reverse sampler over per-position latent vectors.

use camseg_tensor::{Binding, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CamsegError, Result};
use crate::nn::{timestep_features, Linear};
use crate::seed::{derive_rng, standard_normal, Rng};

/// Which coefficients the noising and sampling formulas use.
///
/// `Standard` is the variance-preserving DDPM form. `Literal` scales the
/// clean signal by ᾱ_t instead of √ᾱ_t when noising and uses √(1−α_t)
/// instead of 1−α_t in the sampler mean; it exists for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Standard,
    Literal,
}

pub const BETA_MAX: f64 = 0.999;

/// Tables indexed by timestep `0..=T`; index 0 of `alpha`, `beta` and
/// `sigma` is unused padding.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `ᾱ_t = f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`; β is clipped
/// at [`BETA_MAX`] and ᾱ is re-accumulated from the clipped β.
pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(CamsegError::Config("noise schedule needs at least one step".into()));
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut beta = vec![0.0; steps + 1];
    let mut sigma = vec![0.0; steps + 1];
    for t in 1..=steps {
        let raw = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
        beta[t] = raw.clamp(0.0, BETA_MAX);
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        sigma[t] = (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
    }
    Ok(NoiseSchedule {
        steps,
        alpha_bar,
        alpha,
        beta,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(CamsegError::Parameter {
                what: "timestep",
                msg: format!("{t} outside [1, {}]", self.steps),
            });
        }
        Ok(())
    }
}

/// Reverse-process tables on a subsequence of timesteps, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct StridedSchedule {
    pub timesteps: Vec<usize>,
    pub alpha_bar: Vec<f64>,
    /// ᾱ at the previous selected timestep (1 before the first).
    pub alpha_bar_prev: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Evenly spaced timesteps from 1 to T (rounded), with β, α and σ
/// recomputed between consecutive selected steps.
pub fn stride_schedule(base: &NoiseSchedule, infer_steps: usize) -> Result<StridedSchedule> {
    let t_max = base.steps;
    if infer_steps == 0 || infer_steps > t_max {
        return Err(CamsegError::Config(format!(
            "inference steps must lie in [1, {t_max}], got {infer_steps}"
        )));
    }
    let timesteps: Vec<usize> = if infer_steps == 1 {
        vec![t_max]
    } else {
        (0..infer_steps)
            .map(|k| 1 + ((k * (t_max - 1)) as f64 / (infer_steps - 1) as f64).round() as usize)
            .collect()
    };
    let mut out = StridedSchedule {
        alpha_bar: Vec::with_capacity(infer_steps),
        alpha_bar_prev: Vec::with_capacity(infer_steps),
        beta: Vec::with_capacity(infer_steps),
        alpha: Vec::with_capacity(infer_steps),
        sigma: Vec::with_capacity(infer_steps),
        timesteps,
    };
    let mut prev = 1.0;
    for &t in &out.timesteps {
        let ab = base.alpha_bar[t];
        let beta = 1.0 - ab / prev;
        out.alpha_bar.push(ab);
        out.alpha_bar_prev.push(prev);
        out.beta.push(beta);
        out.alpha.push(1.0 - beta);
        out.sigma.push((beta * (1.0 - prev) / (1.0 - ab)).sqrt());
        prev = ab;
    }
    Ok(out)
}

/// `√ᾱ_t·y + √(1−ᾱ_t)·ε` (or the literal variant).
pub fn forward_noise(y: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule, param: Parameterization) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if y.len() != eps.len() {
        return Err(CamsegError::Dimension {
            what: "forward noise",
            expected: format!("{} noise values", y.len()),
            got: eps.len().to_string(),
        });
    }
    let ab = sched.alpha_bar[t];
    let a = match param {
        Parameterization::Standard => ab.sqrt(),
        Parameterization::Literal => ab,
    };
    let b = (1.0 - ab).sqrt();
    Ok(y.iter().zip(eps).map(|(&y, &e)| a * y + b * e).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    /// Sinusoidal timestep feature count (even).
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 256,
            blocks: 3,
            time_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct AdaBlock {
    shift: Linear,
    scale: Linear,
    gate: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct DenoiserLayout {
    time1: Linear,
    time2: Linear,
    cond: Linear,
    input: Linear,
    blocks: Vec<AdaBlock>,
    final_shift: Linear,
    final_scale: Linear,
    output: Linear,
}

/// Residual MLP ε_θ(y_t | t, z) with adaptive layer-norm conditioning.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub params: ParamStore<T>,
    layout: DenoiserLayout,
}

const LN_EPS: f64 = 1e-6;
const MAX_PERIOD: f64 = 10_000.0;

impl<T: Float> Denoiser<T> {
    /// With `zero_init` the modulation and output layers start at zero, so
    /// the initial prediction is 0; otherwise every weight is random.
    pub fn new(cfg: DenoiserConfig, latent_dim: usize, cond_dim: usize, seed: u64, zero_init: bool) -> Result<Self> {
        if cfg.width == 0 || cfg.time_dim == 0 || cfg.time_dim % 2 != 0 || latent_dim == 0 || cond_dim == 0 {
            return Err(CamsegError::Config(format!(
                "denoiser needs positive sizes and an even time dimension, got {cfg:?} with Z={latent_dim}, d={cond_dim}"
            )));
        }
        let mut rng = derive_rng(seed, "denoiser.init", 0);
        let mut p = ParamStore::new();
        let w = cfg.width;
        let zg = if zero_init { 0.0 } else { 0.5 };
        let time1 = Linear::new(&mut p, "dn.time1", cfg.time_dim, w, 1.0, &mut rng);
        let time2 = Linear::new(&mut p, "dn.time2", w, w, 1.0, &mut rng);
        let cond = Linear::new(&mut p, "dn.cond", cond_dim, w, 1.0, &mut rng);
        let input = Linear::new(&mut p, "dn.input", latent_dim, w, 1.0, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| AdaBlock {
                shift: Linear::new(&mut p, &format!("dn.block{i}.shift"), w, w, zg, &mut rng),
                scale: Linear::new(&mut p, &format!("dn.block{i}.scale"), w, w, zg, &mut rng),
                gate: Linear::new(&mut p, &format!("dn.block{i}.gate"), w, w, zg, &mut rng),
                fc1: Linear::new(&mut p, &format!("dn.block{i}.fc1"), w, w, 1.0, &mut rng),
                fc2: Linear::new(&mut p, &format!("dn.block{i}.fc2"), w, w, 1.0, &mut rng),
            })
            .collect();
        let final_shift = Linear::new(&mut p, "dn.final.shift", w, w, zg, &mut rng);
        let final_scale = Linear::new(&mut p, "dn.final.scale", w, w, zg, &mut rng);
        let output = Linear::new(&mut p, "dn.output", w, latent_dim, zg, &mut rng);
        Ok(Self {
            cfg,
            latent_dim,
            cond_dim,
            params: p,
            layout: DenoiserLayout {
                time1,
                time2,
                cond,
                input,
                blocks,
                final_shift,
                final_scale,
                output,
            },
        })
    }

    pub fn from_params(cfg: DenoiserConfig, latent_dim: usize, cond_dim: usize, params: ParamStore<T>) -> Result<Self> {
        let mut d = Self::new(cfg, latent_dim, cond_dim, 0, true)?;
        crate::nn::adopt_params(&mut d.params, params, "denoiser")?;
        Ok(d)
    }

    /// Sinusoidal features for each timestep, `[n, time_dim]`.
    pub fn time_features(&self, ts: &[usize]) -> Tensor<T> {
        let dim = self.cfg.time_dim;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            data.extend(timestep_features(t as f64, dim, MAX_PERIOD).into_iter().map(T::from_f64));
        }
        Tensor::new([ts.len(), dim], data).expect("feature count matches")
    }

    /// `y_t: [n, Z]`, `time: [n, time_dim]` or `[1, time_dim]` (shared),
    /// `cond: [n, d]` → `[n, Z]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, b: &Binding, y_t: Var, time: Var, cond: Var) -> Result<Var> {
        let l = &self.layout;
        let n = g.shape(y_t)[0];
        let w = self.cfg.width;
        let te = l.time1.forward(g, b, time)?;
        let te = g.silu(te);
        let te = l.time2.forward(g, b, te)?;
        let ce = l.cond.forward(g, b, cond)?;
        let c = if g.shape(te)[0] == 1 && n != 1 {
            let te = g.reshape(te, [w])?;
            g.add_bias(ce, te)?
        } else {
            g.add(ce, te)?
        };
        let c = g.silu(c);
        let mut x = l.input.forward(g, b, y_t)?;
        for blk in &l.blocks {
            let shift = blk.shift.forward(g, b, c)?;
            let scale = blk.scale.forward(g, b, c)?;
            let gate = blk.gate.forward(g, b, c)?;
            let h = g.layer_norm(x, T::from_f64(LN_EPS));
            let s1 = g.add_scalar(scale, T::one());
            let h = g.mul(h, s1)?;
            let h = g.add(h, shift)?;
            let h = blk.fc1.forward(g, b, h)?;
            let h = g.silu(h);
            let h = blk.fc2.forward(g, b, h)?;
            let h = g.mul(gate, h)?;
            x = g.add(x, h)?;
        }
        let shift = l.final_shift.forward(g, b, c)?;
        let scale = l.final_scale.forward(g, b, c)?;
        let h = g.layer_norm(x, T::from_f64(LN_EPS));
        let s1 = g.add_scalar(scale, T::one());
        let h = g.mul(h, s1)?;
        let h = g.add(h, shift)?;
        l.output.forward(g, b, h)
    }
}

/// ε-prediction loss `mean_i ‖ε_i − ε_θ(y_t,i | t_i, z_i)‖²` over the rows of
/// `cond: [m, d]` and `targets: [m, Z]`, with one `(t, ε)` draw per row.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<T: Float>(
    g: &mut Graph<T>,
    den: &Denoiser<T>,
    b: &Binding,
    cond: Var,
    targets: &Tensor<T>,
    sched: &NoiseSchedule,
    param: Parameterization,
    rng: &mut Rng,
) -> Result<Var> {
    let m = targets.shape()[0];
    if m == 0 {
        return Err(CamsegError::Parameter {
            what: "diffusion loss",
            msg: "no masked positions to supervise".into(),
        });
    }
    let z = den.latent_dim;
    if targets.ndim() != 2 || targets.shape()[1] != z || g.shape(cond) != [m, den.cond_dim] {
        return Err(CamsegError::Dimension {
            what: "diffusion loss",
            expected: format!("targets [{m}, {z}] and conditions [{m}, {}]", den.cond_dim),
            got: format!("{:?} and {:?}", targets.shape(), g.shape(cond)),
        });
    }
    let mut ts = Vec::with_capacity(m);
    let mut eps = Vec::with_capacity(m * z);
    let mut noised = Vec::with_capacity(m * z);
    for i in 0..m {
        let t = rng.random_range(1..=sched.steps);
        let e: Vec<f64> = (0..z).map(|_| standard_normal(rng)).collect();
        let y: Vec<f64> = targets.row(i).iter().map(|v| v.as_f64()).collect();
        noised.extend(forward_noise(&y, t, &e, sched, param)?);
        eps.extend(e);
        ts.push(t);
    }
    let y_t = g.constant(Tensor::from_f64([m, z], &noised)?);
    let time = g.constant(den.time_features(&ts));
    let pred = den.forward_graph(g, b, y_t, time, cond)?;
    let eps = g.constant(Tensor::from_f64([m, z], &eps)?);
    let d = g.sub(eps, pred)?;
    let d2 = g.square(d);
    let s = g.sum(d2);
    Ok(g.scale(s, T::from_f64(1.0 / m as f64)))
}

/// Anything that predicts the injected noise for a batch of rows at one timestep.
pub trait EpsilonModel {
    fn latent_dim(&self) -> usize;
    fn rows(&self) -> usize;
    /// `y_t` holds `rows × latent_dim` values, row-major.
    fn predict(&mut self, y_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// A denoiser with fixed per-row conditions, reusing one graph of bound weights.
pub struct ConditionedDenoiser<'a, T: Float> {
    den: &'a Denoiser<T>,
    graph: Graph<T>,
    binding: Binding,
    cond: Var,
    mark: usize,
    rows: usize,
}

impl<'a, T: Float> ConditionedDenoiser<'a, T> {
    pub fn new(den: &'a Denoiser<T>, cond: &Tensor<T>) -> Result<Self> {
        if cond.ndim() != 2 || cond.shape()[1] != den.cond_dim {
            return Err(CamsegError::Dimension {
                what: "denoiser conditions",
                expected: format!("[n, {}]", den.cond_dim),
                got: format!("{:?}", cond.shape()),
            });
        }
        let mut graph = Graph::new();
        let binding = den.params.bind(&mut graph, false);
        let cond_var = graph.constant(cond.clone());
        let mark = graph.len();
        Ok(Self {
            den,
            graph,
            binding,
            cond: cond_var,
            mark,
            rows: cond.shape()[0],
        })
    }
}

impl<T: Float> EpsilonModel for ConditionedDenoiser<'_, T> {
    fn latent_dim(&self) -> usize {
        self.den.latent_dim
    }

    fn rows(&self) -> usize {
        self.rows
    }

    fn predict(&mut self, y_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.graph.truncate(self.mark);
        let g = &mut self.graph;
        let y = g.constant(Tensor::from_f64([self.rows, self.den.latent_dim], y_t)?);
        let time = g.constant(self.den.time_features(&[t]));
        let out = self.den.forward_graph(g, &self.binding, y, time, self.cond)?;
        Ok(self.graph.value(out).to_f64_vec())
    }
}

/// One reverse step from selected index `k` (descending). Returns the new state.
///
/// With `x0_clip = Some(b)` the step goes through the implied clean estimate
/// `x̂₀ = (y − √(1−ᾱ)·ε̂)/√ᾱ`, clamped to `[−b, b]`, and the posterior mean
/// `√ᾱ_prev·β/(1−ᾱ)·x̂₀ + √α·(1−ᾱ_prev)/(1−ᾱ)·y`. Without clamping this is the
/// same mean as the ε form. The literal parameterization ignores `x0_clip`.
pub fn ddpm_step(
    y: &[f64],
    eps_hat: &[f64],
    k: usize,
    strided: &StridedSchedule,
    param: Parameterization,
    x0_clip: Option<f64>,
    rng: &mut Rng,
) -> Vec<f64> {
    let alpha = strided.alpha[k];
    let ab = strided.alpha_bar[k];
    let sigma = if k == 0 { 0.0 } else { strided.sigma[k] };
    let noise = |mean: f64, rng: &mut Rng| {
        if sigma > 0.0 {
            mean + sigma * standard_normal(rng)
        } else {
            mean
        }
    };
    if let (Some(b), Parameterization::Standard) = (x0_clip, param) {
        let abp = strided.alpha_bar_prev[k];
        let c0 = abp.sqrt() * strided.beta[k] / (1.0 - ab);
        let cy = alpha.sqrt() * (1.0 - abp) / (1.0 - ab);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        return y
            .iter()
            .zip(eps_hat)
            .map(|(&y, &e)| {
                let x0 = ((y - sn * e) / sa).clamp(-b, b);
                noise(c0 * x0 + cy * y, rng)
            })
            .collect();
    }
    let coef = match param {
        Parameterization::Standard => (1.0 - alpha) / (1.0 - ab).sqrt(),
        Parameterization::Literal => (1.0 - alpha).sqrt() / (1.0 - ab).sqrt(),
    };
    let inv = 1.0 / alpha.sqrt();
    y.iter().zip(eps_hat).map(|(&y, &e)| noise(inv * (y - coef * e), rng)).collect()
}

/// Ancestral DDPM sampling from pure noise over the strided timesteps.
pub fn ddpm_sample(
    model: &mut impl EpsilonModel,
    strided: &StridedSchedule,
    param: Parameterization,
    x0_clip: Option<f64>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if strided.timesteps.is_empty() {
        return Err(CamsegError::Config("sampler needs at least one step".into()));
    }
    let n = model.rows() * model.latent_dim();
    let mut y: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    for k in (0..strided.timesteps.len()).rev() {
        let eps_hat = model.predict(&y, strided.timesteps[k])?;
        y = ddpm_step(&y, &eps_hat, k, strided, param, x0_clip, rng);
    }
    Ok(y)
}
