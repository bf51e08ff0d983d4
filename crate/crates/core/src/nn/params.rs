//! Named parameter tensors, initialization, gradients, and Adam.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense f64 tensor; `shape` is `[n]` for vectors, `[rows, cols]` for
/// matrices (row-major).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Weight-matrix init: uniform in `[-sqrt(3)/d, sqrt(3)/d]` with `d` the
    /// input (column) dimension.
    pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 3.0_f64.sqrt() / cols as f64;
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Embedding init: truncated normal, mean 0, stddev 0.1 (resampling
    /// beyond two stddevs).
    pub fn truncated_normal_vector(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..n).map(|_| truncated_normal(rng, 0.1)).collect();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[1],
        }
    }
}

pub fn truncated_normal(rng: &mut ChaCha8Rng, stddev: f64) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * stddev;
        }
    }
}

/// Trainable tensors addressed by dense index; names are for checkpoints and
/// diagnostics. Frozen word embeddings live outside this store.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        self.tensors.push(tensor);
        id
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Gradient accumulator, parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            data: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8),
/// minimizing.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            m: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.data[i]);
            for j in 0..tensor.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                tensor.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::uniform_matrix(8, 4, &mut rng);
        let bound = 3.0_f64.sqrt() / 4.0;
        assert!(w.data.iter().all(|x| x.abs() <= bound));
        let e = Tensor::truncated_normal_vector(64, &mut rng);
        assert!(e.data.iter().all(|x| x.abs() <= 0.2 + 1e-12));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add(
            "x",
            Tensor {
                shape: vec![1],
                data: vec![5.0],
            },
        );
        let mut adam = Adam::new(&store);
        let mut grads = Grads::zeros_like(&store);
        for _ in 0..2000 {
            grads.zero();
            grads.data[id][0] = 2.0 * store.get(id).data[0];
            adam.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).data[0].abs() < 1e-2);
    }
}
