use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tensor, Value};

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Plain data, so it is `Send + Sync` and can be
/// shared read-only across evaluation threads; each evaluation binds the
/// tensors as fresh graph leaves with [`ParamSet::bind`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Inserts a tensor with entries uniform in `[-scale, scale]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-scale..=scale));
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Binds every tensor as a trainable graph leaf.
    pub fn bind(&self) -> Bound {
        Bound {
            values: self.tensors.iter().map(|t| Value::param(t.clone())).collect(),
        }
    }

    /// Binds every tensor as a constant (no gradient bookkeeping).
    pub fn bind_const(&self) -> Bound {
        Bound {
            values: self
                .tensors
                .iter()
                .map(|t| Value::constant(t.clone()))
                .collect(),
        }
    }

    /// Binds every tensor as a constant except `id`, which becomes `value`.
    pub fn bind_with(&self, id: ParamId, value: Value) -> Bound {
        assert_eq!(value.shape(), self.tensors[id.0].shape(), "replacement must keep the shape");
        let mut b = self.bind_const();
        b.values[id.0] = value;
        b
    }

    /// Zero tensors matching every parameter's shape.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

/// Parameters bound into one graph.
pub struct Bound {
    values: Vec<Value>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Value {
        &self.values[id.0]
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads(&self) -> Vec<Tensor> {
        self.values.iter().map(Value::grad).collect()
    }
}

/// Adds `src` into `dst` elementwise, tensor by tensor.
pub fn accumulate(dst: &mut [Tensor], src: &[Tensor]) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.add_assign(s);
    }
}

/// Adaptive-moment optimizer with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(5.0),
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    /// Descends along `grads` for every parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        let all = vec![true; params.len()];
        self.step_masked(params, grads, &all);
    }

    /// Descends only for parameters with `update[i]`; the others, and their
    /// moment estimates, are left untouched bit for bit. Clipping uses the
    /// norm over updated parameters only.
    pub fn step_masked(&mut self, params: &mut ParamSet, grads: &[Tensor], update: &[bool]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        assert_eq!(update.len(), params.len(), "one flag per parameter");
        if self.m.len() != params.len() {
            self.m = params.zeros_like();
            self.v = params.zeros_like();
            self.t = vec![0; params.len()];
        }
        let norm: f64 = grads
            .iter()
            .zip(update)
            .filter(|(_, &u)| u)
            .map(|(g, _)| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for i in 0..params.len() {
            if !update[i] {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.tensors[i].data_mut();
            for (k, &g) in grads[i].data().iter().enumerate() {
                let g = g * factor;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let b = ps.bind();
            let x = b.get(id);
            x.mul(x).sum().backward();
            opt.step(&mut ps, &b.grads());
        }
        assert!(ps.get(id).sq_norm() < 1e-4);
    }

    #[test]
    fn masked_step_leaves_frozen_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let a = ps.insert_uniform("a", &[3], 1.0, &mut rng);
        let b = ps.insert_uniform("b", &[3], 1.0, &mut rng);
        let before = ps.get(b).clone();
        let mut opt = Adam::new(0.01);
        for _ in 0..10 {
            let bound = ps.bind();
            bound.get(a).dot(bound.get(b)).backward();
            opt.step_masked(&mut ps, &bound.grads(), &[true, false]);
        }
        assert_eq!(ps.get(b), &before);
        assert_eq!(ps.find("a"), Some(a));
    }

    #[test]
    fn clip_bounds_first_step() {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::scalar(0.0));
        let mut opt = Adam::new(1.0);
        opt.step(&mut ps, &[Tensor::scalar(1e6)]);
        // first Adam step has magnitude lr regardless of scale
        assert!((ps.get(id).item() + 1.0).abs() < 1e-6);
    }
}
