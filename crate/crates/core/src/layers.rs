//! Parameterized building blocks shared by the encoders and decoders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `U(-1/√fan_in, 1/√fan_in)` matrix of shape `fan_in × fan_out`.
pub fn uniform_matrix(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.random_range(-bound..bound))
}

/// Affine map over the last axis: `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.insert(format!("{name}.w"), uniform_matrix(rng, fan_in, fan_out));
        let bias = bias.then(|| store.insert(format!("{name}.b"), Tensor::zeros([fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn num_params(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Point-wise two-layer network `ReLU(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.1"), d, d_ff, true, rng),
            outer: Linear::new(store, &format!("{name}.2"), d_ff, d, true, rng),
        }
    }

    pub fn num_params(d: usize, d_ff: usize) -> usize {
        Linear::num_params(d, d_ff, true) + Linear::num_params(d_ff, d, true)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, p, x)?;
        let h = g.relu(h);
        self.outer.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full([d], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([d])),
        }
    }

    pub fn num_params(d: usize) -> usize {
        2 * d
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}

/// `B`-layer per-position projection: the first layer maps `b → d`, later
/// layers `d → d`, with ReLU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Projection {
    pub layers: Vec<Linear>,
}

impl Projection {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, d: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { input } else { d };
                Linear::new(store, &format!("{name}.{i}"), fan_in, d, true, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn num_params(input: usize, d: usize, depth: usize) -> usize {
        if depth == 0 {
            return 0;
        }
        Linear::num_params(input, d, true) + (depth - 1) * Linear::num_params(d, d, true)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.forward(g, p, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_projection_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let proj = Projection::new(&mut store, "p", 4, 4, 1, &mut rng);
        *store.get_mut(proj.layers[0].weight) = Tensor::eye(4);
        let mut g = Graph::new();
        let p = g.bind(&store);
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| i as f64 * 0.5 - 3.0));
        let y = proj.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn projection_output_width_is_model_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let proj = Projection::new(&mut store, "p", 2, 8, 3, &mut rng);
        assert_eq!(store.numel(), Projection::num_params(2, 8, 3));
        let mut g = Graph::new();
        let p = g.bind(&store);
        let x = g.constant(Tensor::full([5, 7, 2], 0.3));
        let y = proj.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[5, 7, 8]);
    }

    /// Straight-line reimplementation of a three-layer projection.
    #[test]
    fn projection_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let proj = Projection::new(&mut store, "p", 3, 4, 3, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let input = Tensor::from_fn([2, 3], |i| (i as f64 * 0.7).sin());
        let mut g = Graph::new();
        let p = g.bind(&store);
        let x = g.constant(input.clone());
        let y = proj.forward(&mut g, &p, x).unwrap();

        let dense = |x: &[f64], l: &Linear| -> Vec<f64> {
            let w = store.get(l.weight).data();
            let b = store.get(l.bias.unwrap()).data();
            (0..l.fan_out)
                .map(|j| b[j] + (0..l.fan_in).map(|i| x[i] * w[i * l.fan_out + j]).sum::<f64>())
                .collect()
        };
        for row in 0..2 {
            let mut h = input.data()[row * 3..row * 3 + 3].to_vec();
            for (i, l) in proj.layers.iter().enumerate() {
                if i > 0 {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h = dense(&h, l);
            }
            for (j, hj) in h.iter().enumerate() {
                assert!((g.value(y).data()[row * 4 + j] - hj).abs() < 1e-12);
            }
        }
    }
}
