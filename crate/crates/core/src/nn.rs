//! Layers assembled from graph primitives.

use crate::autodiff::{Graph, Var};
use crate::params::{Bound, Initializer, ParamId};
use crate::scalar::Scalar;

/// Affine map `x·W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        init.scoped(name, |i| {
            let weight = i.uniform("weight", inputs, outputs, inputs);
            let bias = bias.then(|| i.uniform("bias", 1, outputs, inputs));
            Linear { weight, bias, inputs, outputs }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.weight]);
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, width: usize) -> Self {
        init.scoped(name, |i| LayerNorm {
            gain: i.constant("gain", 1, width, 1.0),
            shift: i.constant("shift", 1, width, 0.0),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x);
        let scaled = g.mul_row(n, p[self.gain]);
        g.add_row(scaled, p[self.shift])
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, width: usize, hidden: usize) -> Self {
        init.scoped(name, |i| FeedForward {
            up: Linear::new(i, "up", width, hidden, true),
            down: Linear::new(i, "down", hidden, width, true),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = self.up.forward(g, p, x);
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product attention with a key mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Attention output plus the per-head probability matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} is not divisible by {heads} heads");
        init.scoped(name, |i| MultiHeadAttention {
            query: Linear::new(i, "query", width, width, true),
            key: Linear::new(i, "key", width, width, true),
            value: Linear::new(i, "value", width, width, true),
            output: Linear::new(i, "output", width, width, true),
            heads,
            width,
        })
    }

    /// `queries` attend over `keys` rows where `key_mask` is true.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        keys: Var,
        key_mask: &[bool],
    ) -> AttentionOutput {
        let q = self.query.forward(g, p, queries);
        let k = self.key.forward(g, p, keys);
        let v = self.value.forward(g, p, keys);
        let head_width = self.width / self.heads;
        let scale = T::of(1.0 / (head_width as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let start = h * head_width;
                (g.slice_cols(q, start, head_width), g.slice_cols(k, start, head_width), g.slice_cols(v, start, head_width))
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, key_mask);
            weights.push(probs);
            outs.push(g.matmul(probs, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOutput { output: self.output.forward(g, p, merged), weights }
    }
}

/// Sinusoidal features `[sin(ω_k x), cos(ω_k x)]` with `ω_k` geometric from
/// `π` to `π · max_freq`. `dim` must be even.
pub fn sinusoidal_features(x: f64, dim: usize, max_freq: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let w = std::f64::consts::PI * max_freq.powf(frac);
        out.push((w * x).sin());
        out.push((w * x).cos());
    }
    if dim % 2 == 1 {
        out.push(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, ParamStore};
    use crate::tensor::Matrix;

    #[test]
    fn attention_rows_are_distributions_over_unmasked_keys() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(5);
        let mha = MultiHeadAttention::new(&mut Initializer::new(&mut store, &mut rng), "attn", 8, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Matrix::from_fn(3, 8, |i, j| ((i * 8 + j) as f64).sin()));
        let kv = g.constant(Matrix::from_fn(4, 8, |i, j| ((i + j) as f64).cos()));
        let mask = [true, false, true, true];
        let out = mha.forward(&mut g, &p, x, kv, &mask);
        assert_eq!(g.value(out.output).shape(), (3, 8));
        for w in out.weights {
            let w = g.value(w);
            for i in 0..w.rows() {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(w.get(i, 1), 0.0);
            }
        }
    }

    #[test]
    fn sinusoidal_features_are_bounded() {
        let f = sinusoidal_features(0.37, 16, 64.0);
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
    }
}
