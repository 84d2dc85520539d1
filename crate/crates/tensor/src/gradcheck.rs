//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::optim::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for the per-component relative error. Components whose
/// gradients are both below it are compared in absolute terms at this scale,
/// which keeps finite-difference round-off from dominating near-zero entries.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index (across all checked tensors) of the worst component.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            msg: format!("function must return a scalar, got {:?}", t.shape()),
        });
    }
    Ok(t.item())
}

#[derive(Default)]
struct Tally {
    max_rel: f64,
    max_abs: f64,
    worst: usize,
    n: usize,
}

impl Tally {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let r = rel_err(analytic, numeric);
        if r > self.max_rel {
            self.max_rel = r;
            self.worst = self.n;
        }
        self.max_abs = self.max_abs.max((analytic - numeric).abs());
        self.n += 1;
    }

    fn report(self, tol: f64) -> GradcheckReport {
        GradcheckReport {
            max_rel_err: self.max_rel,
            max_abs_err: self.max_abs,
            worst_index: self.worst,
            checked: self.n,
            tol,
        }
    }
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `h`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |xp: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(xp);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut tally = Tally::default();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        tally.record(analytic.data()[i], numeric);
    }
    Ok(tally.report(tol))
}

/// Gradient check of scalar `f` with respect to every scalar of every
/// parameter in `store` (every `stride`-th scalar when `stride > 1`).
pub fn gradcheck_params<F>(
    f: F,
    store: &ParamStore<f64>,
    h: f64,
    tol: f64,
    stride: usize,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &Binding) -> Result<Var>,
{
    let stride = stride.max(1);
    let mut g = Graph::new();
    let binding = store.bind(&mut g, true);
    let out = f(&mut g, &binding)?;
    scalar_of(&g, out)?;
    let mut grads = g.backward(out)?;
    let analytic = store.collect_grads(&binding, &mut grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let out = f(&mut g, &b)?;
        scalar_of(&g, out)
    };
    let mut tally = Tally::default();
    let mut work = store.clone();
    let mut flat = 0usize;
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            if flat % stride == 0 {
                let orig = store.get(id).data()[j];
                work.get_mut(id).data_mut()[j] = orig + h;
                let fp = eval(&work)?;
                work.get_mut(id).data_mut()[j] = orig - h;
                let fm = eval(&work)?;
                work.get_mut(id).data_mut()[j] = orig;
                tally.record(analytic[id.index()].data()[j], (fp - fm) / (2.0 * h));
            }
            flat += 1;
        }
    }
    Ok(tally.report(tol))
}
