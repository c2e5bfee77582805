//! Dense tensors, a reverse-mode tape, parameter storage and gradient
//! verification.

mod checkpoint;
mod graph;
mod params;
pub mod rng;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use graph::{Grads, Graph, Var};
pub use params::{Adam, ParamStore};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Epsilon used by every L2 normalization in the crate.
pub const NORM_EPS: f64 = 1e-12;

/// Row softmax of `logits / temperature`, stabilized by the row max.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.data().iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("NaN in softmax input"));
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.softmax_rows(x, T::lit(1.0 / temperature), false);
    Ok(g.value(y).clone())
}

/// `softmax(query · keyᵀ / √d) · value`.
pub fn scaled_attention<T: Real>(
    query: &Tensor<T>,
    key: &Tensor<T>,
    value: &Tensor<T>,
) -> Result<Tensor<T>> {
    if query.cols() != key.cols() {
        return Err(Error::shape(format!(
            "query width {} vs key width {}",
            query.cols(),
            key.cols()
        )));
    }
    if key.rows() != value.rows() {
        return Err(Error::shape(format!(
            "{} keys vs {} values",
            key.rows(),
            value.rows()
        )));
    }
    let mut g = Graph::new();
    let (q, k, v) = (
        g.constant(query.clone()),
        g.constant(key.clone()),
        g.constant(value.clone()),
    );
    let out = attend(&mut g, q, k, v);
    Ok(g.value(out).clone())
}

/// Scaled dot-product attention on the tape; the scale uses the key width.
pub fn attend<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Var {
    let d = g.shape(k).1;
    let scores = g.matmul_t(q, k);
    let w = g.softmax_rows(scores, T::lit(1.0 / (d as f64).sqrt()), false);
    g.matmul(w, v)
}

/// `x · Wᵀ + b` with `W` stored `[out×in]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul_t(x, w);
    g.add_row(y, b)
}

/// Builds the loss on a fresh tape, zeroes the store's gradients and fills
/// them by reverse accumulation.
pub fn evaluate_with_gradients<T, F>(store: &mut ParamStore<T>, loss_fn: F) -> Result<T>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    store.check_finite()?;
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    store.zero_grads();
    g.accumulate_param_grads(&grads, store);
    if !value.is_finite() {
        let culprit = store
            .names()
            .find(|n| !store.grad(n).unwrap().is_finite())
            .unwrap_or("loss")
            .to_string();
        return Err(Error::numerical(culprit, format!("loss evaluated to {value}")));
    }
    store.check_finite()?;
    Ok(value)
}

/// Fraction of the largest gradient component used as the denominator floor
/// of [`relative_error`] in gradient checks.
pub const GRAD_FLOOR_FRACTION: f64 = 1e-3;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    /// Per-parameter maximum relative error, in name order.
    pub max_rel_error: Vec<(String, f64)>,
    pub pass: bool,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.max_rel_error {
            let mark = if *err <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "  {name:<32} max_rel_err={err:.3e} {mark}")?;
        }
        write!(
            f,
            "  => {} (tolerance {:.1e})",
            if self.pass { "pass" } else { "fail" },
            self.tolerance
        )
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss_fn` against central differences
/// `(f(x+h) − f(x−h)) / 2h` for every scalar of every parameter.
pub fn grad_check<F>(loss_fn: F, store: &ParamStore<f64>, h: f64, tolerance: f64) -> GradReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    let analytic_ok = evaluate_with_gradients(&mut analytic, |g, s| loss_fn(g, s)).is_ok();
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        match loss_fn(&mut g, s) {
            Ok(v) => g.value(v).item(),
            Err(_) => f64::NAN,
        }
    };
    grad_check_against(&analytic, analytic_ok, eval, store, h, tolerance)
}

/// Same as [`grad_check`] but with externally supplied analytic gradients,
/// so a corrupted gradient can be checked as a negative control.
pub fn grad_check_against(
    analytic: &ParamStore<f64>,
    analytic_ok: bool,
    eval: impl Fn(&ParamStore<f64>) -> f64,
    store: &ParamStore<f64>,
    h: f64,
    tolerance: f64,
) -> GradReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = store.clone();
    let mut max_rel_error = Vec::new();
    let largest = analytic
        .names()
        .flat_map(|n| analytic.grad(n).unwrap().data().iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (GRAD_FLOOR_FRACTION * largest).max(1e-8);
    for name in store.names() {
        let n = store.get(name).unwrap().numel();
        let grad = analytic.grad(name).unwrap().data().to_vec();
        let mut worst: f64 = if analytic_ok { 0.0 } else { f64::INFINITY };
        for i in 0..n {
            let orig = store.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let fp = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let fm = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(grad[i], numeric, floor);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        max_rel_error.push((name.to_string(), worst));
    }
    let pass = max_rel_error.iter().all(|(_, e)| *e <= tolerance);
    GradReport {
        tolerance,
        max_rel_error,
        pass,
    }
}
