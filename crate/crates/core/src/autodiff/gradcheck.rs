//! Central finite-difference comparison for tape gradients.

use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation size for the central difference.
    pub step: f64,
    /// Below this magnitude (both sides) gradients are compared absolutely.
    pub abs_threshold: f64,
    /// Check at most this many evenly spaced elements per tensor.
    pub max_elements_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, abs_threshold: 1e-8, max_elements_per_tensor: None }
    }
}

#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error, or absolute error below the threshold.
    pub error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub worst: Option<ElementCheck>,
    /// Tensors for which every checked analytic gradient was exactly zero.
    pub all_zero: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error < tol
    }
}

pub fn compare(analytic: f64, numeric: f64, abs_threshold: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < abs_threshold {
        diff
    } else {
        diff / scale
    }
}

/// Checks the gradients already stored in `store` against central
/// differences of `loss`, which must evaluate the same computation with
/// fixed randomness.
pub fn check_store_gradients<F>(store: &mut ParamStore, ids: &[ParamId], cfg: GradCheckConfig, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let analytic: Vec<f64> = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = match cfg.max_elements_per_tensor {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut any_nonzero = false;
        for idx in (0..n).step_by(stride) {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + cfg.step;
            let plus = loss(store)?;
            store.get_mut(id).data_mut()[idx] = orig - cfg.step;
            let minus = loss(store)?;
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[idx];
            any_nonzero |= a != 0.0;
            let error = compare(a, numeric, cfg.abs_threshold);
            report.checked += 1;
            if error > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(error);
                report.worst = Some(ElementCheck { param: store.name(id).to_string(), index: idx, analytic: a, numeric, error });
            }
        }
        if !any_nonzero {
            report.all_zero.push(store.name(id).to_string());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Three-layer tanh/sigmoid network on a fixed batch.
    fn mlp_loss(store: &ParamStore, x: &Tensor, backprop: bool, grads_into: Option<&mut ParamStore>) -> f64 {
        let mut tape = Tape::new();
        let xin = tape.constant(x);
        let mut h = xin;
        for layer in 0..3 {
            let w = tape.param(store, store.find(&format!("w{layer}")).unwrap());
            let b = tape.param(store, store.find(&format!("b{layer}")).unwrap());
            let z = tape.matmul(h, w).unwrap();
            let z = tape.add_row(z, b).unwrap();
            h = if layer == 2 { tape.sigmoid(z) } else { tape.tanh(z) };
        }
        let targets: Vec<f64> = (0..tape.values(h).len()).map(|i| (i % 2) as f64).collect();
        let loss = tape.bce(h, &targets).unwrap();
        if backprop {
            tape.backward_into(loss, grads_into.unwrap()).unwrap();
        }
        tape.scalar(loss)
    }

    #[test]
    fn random_three_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let dims = [5, 6, 4, 3];
        for l in 0..3 {
            store.add_uniform(format!("w{l}"), &[dims[l], dims[l + 1]], 0.8, &mut rng);
            store.add_uniform(format!("b{l}"), &[dims[l + 1]], 0.3, &mut rng);
        }
        let x = Tensor::new(vec![7, 5], (0..35).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let snapshot = store.clone();
        mlp_loss(&snapshot, &x, true, Some(&mut store));
        let ids: Vec<_> = store.trainable_ids().collect();
        let report = check_store_gradients(&mut store, &ids, GradCheckConfig::default(), |s| Ok(mlp_loss(s, &x, false, None))).unwrap();
        assert!(report.passes(1e-4), "{:?}", report.worst);
        assert_eq!(report.checked, 5 * 6 + 6 + 6 * 4 + 4 + 4 * 3 + 3);
    }
}
