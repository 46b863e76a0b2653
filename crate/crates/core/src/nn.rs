//! Parameter storage and the small set of layers shared by the teacher,
//! the student and the router.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Tensor, Var};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter, in order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for x in v.iter() {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Places every parameter on `graph`. With `trainable == false` the
    /// parameters are constants and no gradient is tracked through them.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Binding<'g> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// A [`ParamStore`] placed on a graph.
pub struct Binding<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Binding<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zeros where none flowed.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Parameter and FLOP totals. FLOPs count 2 per multiply-accumulate of
/// linear, convolution and attention products; normalisation, activations,
/// softmax and bias additions are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Complexity {
    type Output = Complexity;
    fn add(self, rhs: Complexity) -> Complexity {
        Complexity {
            params: self.params + rhs.params,
            flops: self.flops + rhs.flops,
        }
    }
}

impl std::ops::AddAssign for Complexity {
    fn add_assign(&mut self, rhs: Complexity) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Complexity {
    fn sum<I: Iterator<Item = Complexity>>(iter: I) -> Complexity {
        iter.fold(Complexity::default(), |a, b| a + b)
    }
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..=bound))
}

pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    Tensor::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Fully connected layer acting on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(&[out_dim], bound, rng));
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(p.get(self.weight));
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => y,
        }
    }

    /// Cost when applied to `rows` vectors.
    pub fn complexity(&self, rows: usize) -> Complexity {
        linear_complexity(self.in_dim, self.out_dim, rows)
    }
}

pub fn linear_complexity(in_dim: usize, out_dim: usize, rows: usize) -> Complexity {
    Complexity {
        params: (in_dim * out_dim + out_dim) as u64,
        flops: 2 * (in_dim * out_dim * rows) as u64,
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[dim])));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[dim])));
        Self { gamma, beta, dim }
    }

    pub fn forward<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        x.normalize_last(1e-5).mul(p.get(self.gamma)).add(p.get(self.beta))
    }

    pub fn complexity(&self) -> Complexity {
        Complexity {
            params: 2 * self.dim as u64,
            flops: 0,
        }
    }
}

/// Multi-head self-attention over `(B, N, D)` token sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let (b, n) = (shape[0], shape[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let q = self
            .query
            .forward(p, x)
            .reshape(&[b, n, h, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * h, n, dh]);
        let k_t = self
            .key
            .forward(p, x)
            .reshape(&[b, n, h, dh])
            .permute(&[0, 2, 3, 1])
            .reshape(&[b * h, dh, n]);
        let v = self
            .value
            .forward(p, x)
            .reshape(&[b, n, h, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * h, n, dh]);
        let attn = q.bmm(k_t).scale(1.0 / (dh as f64).sqrt()).softmax_last();
        let ctx = attn
            .bmm(v)
            .reshape(&[b, h, n, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, n, self.dim]);
        self.out.forward(p, ctx)
    }

    /// Cost for one sequence of `tokens` tokens.
    pub fn complexity(&self, tokens: usize) -> Complexity {
        let proj = self.query.complexity(tokens)
            + self.key.complexity(tokens)
            + self.value.complexity(tokens)
            + self.out.complexity(tokens);
        // QK^T and attention-weighted sum of V
        let mixing = Complexity {
            params: 0,
            flops: 2 * 2 * (tokens * tokens * self.dim) as u64,
        };
        proj + mixing
    }
}

/// Pre-norm transformer encoder block with a GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, ffn_dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), ffn_dim, dim, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        let x = x.add(self.attn.forward(p, self.norm1.forward(p, x)));
        let h = self.fc1.forward(p, self.norm2.forward(p, x)).gelu();
        x.add(self.fc2.forward(p, h))
    }

    pub fn complexity(&self, tokens: usize) -> Complexity {
        self.norm1.complexity()
            + self.attn.complexity(tokens)
            + self.norm2.complexity()
            + self.fc1.complexity(tokens)
            + self.fc2.complexity(tokens)
    }
}

/// Dropout mask scaled by `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep = 1.0 - p;
    Tensor::from_shape_fn(IxDyn(shape), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}
