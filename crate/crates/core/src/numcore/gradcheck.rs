//! Central finite-difference gradient checks.
//!
//! The probe loss is `⟨w, f(x)⟩` for a fixed random weight tensor `w`; the
//! analytic gradient comes from the layer's backward pass with upstream `w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::DiffLayer;
use super::tensor::{ParamSet, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

/// Error of an analytic gradient relative to its numeric estimate:
/// `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub input_error: f64,
    /// Per-parameter relative errors, in layer order.
    pub param_errors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.param_errors
            .iter()
            .map(|(_, e)| *e)
            .fold(self.input_error, f64::max)
    }
}

fn probe<L: DiffLayer>(layer: &L, params: &ParamSet, x: &Tensor, w: &Tensor) -> Result<f64> {
    Ok(layer.forward(params, x)?.0.dot(w))
}

/// Numerically differentiates a scalar function over a flat buffer.
pub fn numeric_gradient(
    values: &mut [f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.len()];
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let plus = f(values)?;
        values[i] = orig - h;
        let minus = f(values)?;
        values[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Checks a layer's input and parameter gradients at `(params, x)`.
pub fn check_layer<L: DiffLayer>(
    layer: &L,
    params: &ParamSet,
    x: &Tensor,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (y, cache) = layer.forward(params, x)?;
    let w = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    let mut grads = params.zeros_like();
    let gx = layer.backward(params, &cache, &w, &mut grads)?;

    let mut xs = x.data().to_vec();
    let nx = numeric_gradient(&mut xs, h, |vals| {
        let xt = Tensor::new(x.shape().to_vec(), vals.to_vec())?;
        probe(layer, params, &xt, &w)
    })?;
    let input_error = relative_error(gx.data(), &nx);

    let mut param_errors = Vec::new();
    for name in layer.param_names() {
        let mut p = params.clone();
        let shape = p.get(&name)?.shape().to_vec();
        let mut vals = p.get(&name)?.data().to_vec();
        let np = numeric_gradient(&mut vals, h, |v| {
            *p.get_mut(&name)? = Tensor::new(shape.clone(), v.to_vec())?;
            probe(layer, &p, x, &w)
        })?;
        param_errors.push((name.clone(), relative_error(grads.get(&name)?.data(), &np)));
    }
    Ok(GradCheckReport {
        input_error,
        param_errors,
    })
}
