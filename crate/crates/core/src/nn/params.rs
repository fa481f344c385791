use std::sync::atomic::{AtomicU64, Ordering};

use super::real::Real;
use super::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<F> {
    name: String,
    value: Tensor<F>,
    trainable: bool,
}

/// Named parameter tensors in canonical order.
///
/// `version` increases on every mutation so derived caches can detect that
/// they were built from older values. Each set (including clones) carries a
/// distinct id used by [`super::Tape::param`].
#[derive(Debug)]
pub struct ParamSet<F> {
    entries: Vec<Entry<F>>,
    version: u64,
    uid: u64,
}

impl<F: Real> Clone for ParamSet<F> {
    fn clone(&self) -> Self {
        ParamSet { entries: self.entries.clone(), version: self.version, uid: fresh_uid() }
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), version: 0, uid: fresh_uid() }
    }

    /// Adds a trainable parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.push(name.into(), value, true)
    }

    /// Adds a non-trainable buffer (e.g. running statistics).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<F>, trainable: bool) -> usize {
        assert!(self.index_of(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(Entry { name, value, trainable });
        self.version += 1;
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn value(&self, idx: usize) -> &Tensor<F> {
        &self.entries[idx].value
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.entries[idx].trainable
    }

    /// Mutable access to one parameter; bumps the version.
    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<F> {
        self.version += 1;
        &mut self.entries[idx].value
    }

    /// Replaces a parameter value with one of the same shape.
    pub fn set(&mut self, idx: usize, value: Tensor<F>) {
        assert_eq!(value.shape(), self.entries[idx].value.shape(), "shape change for `{}`", self.entries[idx].name);
        self.version += 1;
        self.entries[idx].value = value;
    }

    /// Copies every value from `other` (names and shapes must match).
    pub fn copy_from(&mut self, other: &ParamSet<F>) {
        assert_eq!(self.len(), other.len(), "parameter count mismatch");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(a.name, b.name);
            a.value = b.value.clone();
        }
        self.version += 1;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            version: self.version,
            uid: fresh_uid(),
        }
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut [Option<Vec<F>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::c(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-5, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `None` gradients leave the parameter untouched.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<Vec<F>>]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        if self.m.len() != params.len() {
            self.m = (0..params.len()).map(|i| vec![F::zero(); params.value(i).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let step_size = F::c(self.lr * c2.sqrt() / c1);
        let eps = F::c(self.eps * c2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.is_trainable(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.value_mut(i).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = ps.value(0).data().to_vec();
            let g = vec![Some(vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)])];
            opt.step(&mut ps, &g);
        }
        let x = ps.value(0).data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("x", Tensor::new(vec![1], vec![0.0]));
        let mut opt = Adam::new(0.01);
        opt.step(&mut ps, &[Some(vec![4.0])]);
        assert!((ps.value(0).data()[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-5);
    }

    #[test]
    fn versions_and_clone_ids() {
        let mut ps = ParamSet::<f32>::new();
        let i = ps.add("w", Tensor::zeros(vec![2]));
        let v0 = ps.version();
        ps.value_mut(i).data_mut()[0] = 1.0;
        assert!(ps.version() > v0);
        let c = ps.clone();
        assert_ne!(c.uid(), ps.uid());
        assert_eq!(c.value(i), ps.value(i));
    }
}
