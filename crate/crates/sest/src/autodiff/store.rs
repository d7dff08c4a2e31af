//! Named parameter storage, Adam updates, and the finite-difference gradient
//! checker.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::tape::{Tape, Var};
use super::{AutodiffError, Tensor};
use crate::util::{fnv1a, mix_seed};

/// One trainable tensor with its gradient buffer and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub grad: Vec<f64>,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Map of parameter name to tensor. Iteration order is stable (sorted by
/// name); initialization is deterministic per (store seed, parameter name),
/// independent of insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
    step: u64,
    grads_populated: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: BTreeMap::new(), seed, step: 0, grads_populated: false }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        let n = tensor.len();
        self.params.insert(
            name.to_string(),
            Param { tensor, grad: vec![0.0; n], moment1: vec![0.0; n], moment2: vec![0.0; n] },
        );
    }

    /// Weight-matrix initialization: uniform(-r, r), r = sqrt(6/(fan_in+fan_out)).
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(self.seed, &[fnv1a(name.as_bytes())]));
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-r..r)).collect();
        let tensor = match shape {
            [_] => Tensor::vector(values),
            [rows, cols] => Tensor::matrix(*rows, *cols, values),
            other => panic!("unsupported shape {other:?}"),
        };
        self.insert(name, tensor);
    }

    /// Bias initialization: constant fill (zeros, or 1.0 for forget gates).
    pub fn init_const(&mut self, name: &str, len: usize, value: f64) {
        self.insert(name, Tensor::vector(vec![value; len]));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Names in stable sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar components.
    pub fn n_components(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_populated = true;
    }

    /// Accumulate a gradient slice into a parameter starting at `offset`.
    pub fn add_grad(&mut self, name: &str, offset: usize, grad: &[f64]) {
        if let Some(p) = self.params.get_mut(name) {
            for (slot, g) in p.grad[offset..offset + grad.len()].iter_mut().zip(grad) {
                *slot += g;
            }
            self.grads_populated = true;
        }
    }

    /// One Adam update over every parameter, in stable name order. Moment
    /// buffers persist in the store across steps.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), AutodiffError> {
        if !self.grads_populated {
            return Err(AutodiffError::GradsMissing);
        }
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - cfg.beta1.powf(t);
        let bias2 = 1.0 - cfg.beta2.powf(t);
        for p in self.params.values_mut() {
            let values = p.tensor.values_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                p.moment1[i] = cfg.beta1 * p.moment1[i] + (1.0 - cfg.beta1) * g;
                p.moment2[i] = cfg.beta2 * p.moment2[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.moment1[i] / bias1;
                let v_hat = p.moment2[i] / bias2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Snapshot of all parameter tensors, for checkpointing.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.tensor.clone()))
            .collect()
    }

    /// Rebuild a store from checkpointed tensors. Moment buffers start fresh.
    pub fn from_tensors(seed: u64, tensors: BTreeMap<String, Tensor>) -> Self {
        let mut store = ParamStore::new(seed);
        for (name, tensor) in tensors {
            store.insert(&name, tensor);
        }
        store
    }
}

/// Worst component found by [`grad_check_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub n_components: usize,
}

/// Compare backward gradients against central differences
/// (f(p+eps) - f(p-eps)) / (2 eps) for every component of every parameter.
/// Returns the maximum relative error, |a-n| / max(1e-8, |a|+|n|).
///
/// `f` must be a deterministic scalar function of the store's parameters; it
/// is re-run forward twice per component, so keep the store small.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64, AutodiffError>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var, AutodiffError>,
{
    grad_check_detailed(store, eps, f).map(|r| r.max_rel_error)
}

/// As [`grad_check`], but reporting which component was worst.
pub fn grad_check_detailed<F>(
    store: &mut ParamStore,
    eps: f64,
    f: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var, AutodiffError>,
{
    if eps <= 0.0 {
        return Err(AutodiffError::Argument {
            op: "grad_check",
            message: "eps must be positive".into(),
        });
    }
    store.zero_grads();
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let base = tape.scalar_value(loss);
    if !base.is_finite() {
        return Err(AutodiffError::NonFinite("grad_check objective".into()));
    }
    tape.backward(loss)?;
    tape.accumulate_grads(store);

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let analytic: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|n| (n.clone(), store.get(n).unwrap().grad.clone()))
        .collect();

    let eval_at = |store: &mut ParamStore, name: &str, i: usize, delta: f64| -> Result<f64, AutodiffError> {
        store.get_mut(name).unwrap().tensor.values_mut()[i] += delta;
        let tape = Tape::new();
        let out = f(&tape, store);
        store.get_mut(name).unwrap().tensor.values_mut()[i] -= delta;
        let v = tape.scalar_value(out?);
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite(format!(
                "grad_check objective at perturbed {name}[{i}]"
            )));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        n_components: 0,
    };
    for name in &names {
        let len = store.get(name).unwrap().tensor.len();
        report.n_components += len;
        for i in 0..len {
            let plus = eval_at(store, name, i, eps)?;
            let minus = eval_at(store, name, i, -eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[name][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::scalar(1.0));
        store.zero_grads();
        store.add_grad("w", 0, &[1.0]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        store.adam_step(&cfg).unwrap();
        let w = store.get("w").unwrap().tensor.values()[0];
        // bias-corrected first step is lr * g / (|g| + eps) ~= lr
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::vector(vec![1.0, -2.0]));
        store.zero_grads();
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.get("w").unwrap().tensor.values(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_without_grads_is_state_error() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::scalar(1.0));
        assert!(matches!(
            store.adam_step(&AdamConfig::default()),
            Err(AutodiffError::GradsMissing)
        ));
    }

    #[test]
    fn adam_constant_grad_moves_monotonically() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::scalar(0.0));
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut prev = 0.0;
        for _ in 0..2 {
            store.zero_grads();
            store.add_grad("w", 0, &[2.5]);
            store.adam_step(&cfg).unwrap();
            let w = store.get("w").unwrap().tensor.values()[0];
            assert!(w < prev, "w should keep decreasing against the gradient");
            prev = w;
        }
    }

    #[test]
    fn init_is_deterministic_and_order_independent() {
        let mut a = ParamStore::new(9);
        a.init_uniform("w1", &[3, 3], 3, 3);
        a.init_uniform("w2", &[2], 2, 1);
        let mut b = ParamStore::new(9);
        b.init_uniform("w2", &[2], 2, 1);
        b.init_uniform("w1", &[3, 3], 3, 3);
        assert_eq!(a.get("w1").unwrap().tensor, b.get("w1").unwrap().tensor);
        assert_eq!(a.get("w2").unwrap().tensor, b.get("w2").unwrap().tensor);
    }

    #[test]
    fn grad_check_quadratic() {
        let mut store = ParamStore::new(0);
        store.insert("x", Tensor::vector(vec![1.5, -0.7, 2.2]));
        let err = grad_check(&mut store, 1e-5, |t, s| {
            let x = t.param(s, "x")?;
            Ok(t.sum(t.mul(x, x)?))
        })
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let mut store = ParamStore::new(0);
        store.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let err = grad_check(&mut store, 1e-5, |t, _| Ok(t.sum(t.constant_vec(vec![3.0]))))
            .unwrap();
        assert_eq!(err, 0.0);
    }
}
