//! Parameter initialization and small layer helpers shared by the models.

use camseg_tensor::{Binding, Float, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{CamsegError, Result};
use crate::seed::{standard_normal, Rng};

pub(crate) fn randn<T: Float>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(std * standard_normal(rng)))
}

/// Weight `[in, out]` and bias `[out]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// LeCun-normal weights scaled by `gain`, zero bias.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), randn(&[fan_in, fan_out], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros([fan_out])),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        Ok(g.linear(x, b.var(self.w), Some(b.var(self.b)))?)
    }
}

/// Convolution weight `[Co, Ci, k, k]` (or `[Ci, Co, k, k]` when transposed) and bias `[Co]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let (shape, fan_in) = if transposed {
            // Each output pixel of a stride-s transpose sees about cin·k²/s² taps.
            ([cin, cout, k, k], cin * k * k / (stride * stride))
        } else {
            ([cout, cin, k, k], cin * k * k)
        };
        let std = gain / (fan_in.max(1) as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), randn(&shape, std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros([cout])),
            stride,
            pad,
            transposed,
        }
    }

    pub fn find<T: Float>(store: &ParamStore<T>, name: &str, stride: usize, pad: usize, transposed: bool) -> Option<Self> {
        Some(Self {
            w: store.find(&format!("{name}.w"))?,
            b: store.find(&format!("{name}.b"))?,
            stride,
            pad,
            transposed,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let w = b.var(self.w);
        let y = if self.transposed {
            g.conv_transpose2d(x, w, self.stride, self.pad)?
        } else {
            g.conv2d(x, w, self.stride, self.pad)?
        };
        Ok(g.add_channel_bias(y, b.var(self.b))?)
    }
}

/// Sinusoidal features of a (possibly fractional) timestep, `dim` even:
/// `[cos(t·ω_0), …, cos(t·ω_{dim/2−1}), sin(t·ω_0), …]` with geometric ω.
pub fn timestep_features(t: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).cos();
        out[half + i] = (t * freq).sin();
    }
    out
}

/// Copies `loaded` into `reference` by name, requiring identical names and shapes.
pub(crate) fn adopt_params<T: Float>(reference: &mut ParamStore<T>, loaded: ParamStore<T>, what: &'static str) -> Result<()> {
    if reference.len() != loaded.len() {
        return Err(CamsegError::Config(format!(
            "{what} expects {} tensors, checkpoint has {}",
            reference.len(),
            loaded.len()
        )));
    }
    let ids: Vec<ParamId> = reference.ids().collect();
    for id in ids {
        let name = reference.name(id).to_string();
        let found = loaded
            .find(&name)
            .ok_or_else(|| CamsegError::Config(format!("checkpoint lacks tensor {name}")))?;
        let t = loaded.get(found);
        if t.shape() != reference.get(id).shape() {
            return Err(CamsegError::Dimension {
                what,
                expected: format!("{name} {:?}", reference.get(id).shape()),
                got: format!("{:?}", t.shape()),
            });
        }
        *reference.get_mut(id) = t.clone();
    }
    Ok(())
}
