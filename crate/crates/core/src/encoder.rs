//! Dynamic event graph encoder.
//!
//! Each event becomes a node whose state combines a type embedding, a
//! sinusoidal time embedding, an aggregate of its relation-tensor edges and
//! an intensity-weighted encoding of its frame-activation row. The fused node
//! states pass through a pre-norm transformer with a padding mask; padded
//! slots produce zero rows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::hashembed;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{init_rng, Bound, Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::timeline::{FrameActivationMatrix, Relation, RelationTensor, Timeline};

const TYPE_SALT: &str = "event-type";
const MAX_TIME_SCALE: f64 = 64.0;

/// Per-unit frequency multipliers of the time MLP's sine layer, geometric
/// from 1 to `MAX_TIME_SCALE`.
fn time_frequency_scales<T: Scalar>(width: usize) -> Matrix<T> {
    Matrix::from_fn(1, width, |_, k| {
        let frac = if width > 1 { k as f64 / (width - 1) as f64 } else { 0.0 };
        T::of(MAX_TIME_SCALE.powf(frac))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_events: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 4, heads: 4, max_events: 16, frames: 16, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.max_events == 0 || self.frames == 0 {
            return Err(Error::Config("max_events and frames must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder inputs for one clip, padded to `max_events` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput<T> {
    /// Mean-pooled token hash vectors per slot, `max_events × d_model`.
    pub type_tokens: Matrix<T>,
    /// `[onset, offset]` in seconds, `max_events × 2`.
    pub times: Matrix<T>,
    pub clip_duration: f64,
    /// `max_events × 1`
    pub intensities: Matrix<T>,
    /// `max_events × frames`
    pub frames: Matrix<T>,
    /// Relation slices in row-major pair order, `max_events² × 5`.
    pub relations: Matrix<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> GraphInput<T> {
    pub fn real_events(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Length-`d_model` type embedding of one category label.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeEmbedding<T>(pub Vec<T>);

/// Per-event intermediate states, materialized for inspection.
#[derive(Clone, Debug)]
pub struct EventNodeState<T> {
    pub g0: Vec<T>,
    pub r: Vec<T>,
    pub f: Vec<T>,
    pub g1: Vec<T>,
}

/// Encoder output: `max_events × d_model` with zero rows at padding.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEmbeddings<T> {
    pub h: Matrix<T>,
    pub mask: Vec<bool>,
}

/// Graph handles produced by one encoder pass.
pub struct EncodedGraph {
    pub h: Var,
    pub g0: Var,
    pub r: Var,
    pub f: Var,
    pub g1: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DegEncoder {
    cfg: EncoderConfig,
    type_proj: Linear,
    time_in: Linear,
    time_out: Linear,
    relation: Linear,
    frame: Linear,
    fusion: Linear,
    position: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl DegEncoder {
    /// Registers the encoder's parameters under `encoder.` in the
    /// initializer's store.
    pub fn new<T: Scalar>(cfg: EncoderConfig, init: &mut Initializer<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(init.scoped("encoder", |i| {
            let type_proj = Linear::new(i, "type_proj", d, d, false);
            let time_in = Linear::new(i, "time_in", 2, d, true);
            let time_out = Linear::new(i, "time_out", d, d, true);
            let relation = Linear::new(i, "relation", Relation::COUNT, d, true);
            let frame = Linear::new(i, "frame", cfg.frames, d, true);
            let fusion = Linear::new(i, "fusion", 2 * d, d, true);
            let position = i.uniform("position", cfg.max_events, d, d);
            let layers = (0..cfg.layers)
                .map(|l| {
                    i.scoped(&format!("layer{l}"), |i| EncoderLayer {
                        attn_norm: LayerNorm::new(i, "attn_norm", d),
                        attn: MultiHeadAttention::new(i, "attn", d, cfg.heads),
                        ff_norm: LayerNorm::new(i, "ff_norm", d),
                        ff: FeedForward::new(i, "ff", d, 4 * d),
                    })
                })
                .collect();
            let final_norm = LayerNorm::new(i, "final_norm", d);
            DegEncoder { cfg: cfg.clone(), type_proj, time_in, time_out, relation, frame, fusion, position, layers, final_norm }
        }))
    }

    /// Standalone encoder with its own parameter store, seeded from the config.
    pub fn init<T: Scalar>(cfg: EncoderConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = init_rng(cfg.seed);
        let enc = Self::new(cfg, &mut Initializer::new(&mut store, &mut rng))?;
        Ok((enc, store))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Pooled token hash vector of a label (before the learned projection).
    pub fn type_tokens(&self, category: &str) -> Result<Vec<f64>> {
        hashembed::pooled_vector(self.cfg.seed, TYPE_SALT, category, self.cfg.d_model).ok_or(Error::EmptyLabel)
    }

    /// Packs a timeline and its derived structures into padded encoder input.
    pub fn graph_input<T: Scalar>(
        &self,
        tl: &Timeline,
        frames: &FrameActivationMatrix,
        relations: &RelationTensor,
    ) -> Result<GraphInput<T>> {
        let (n, nmax, d, nf) = (tl.len(), self.cfg.max_events, self.cfg.d_model, self.cfg.frames);
        if n > nmax {
            return Err(Error::ShapeMismatch(format!("{n} events exceed encoder capacity {nmax}")));
        }
        if frames.frame_count() != nf {
            return Err(Error::FrameCountMismatch { expected: nf, got: frames.frame_count() });
        }
        if frames.events() != n || relations.events() != n {
            return Err(Error::ShapeMismatch(format!(
                "timeline has {n} events, frame matrix {} and relation tensor {}",
                frames.events(),
                relations.events()
            )));
        }
        let mut type_tokens = Matrix::zeros(nmax, d);
        let mut times = Matrix::zeros(nmax, 2);
        let mut intensities = Matrix::zeros(nmax, 1);
        let mut frame_rows = Matrix::zeros(nmax, nf);
        let mut rel = Matrix::zeros(nmax * nmax, Relation::COUNT);
        for (i, ev) in tl.events().iter().enumerate() {
            for (dst, v) in type_tokens.row_mut(i).iter_mut().zip(self.type_tokens(&ev.category)?) {
                *dst = T::of(v);
            }
            times.set(i, 0, T::of(ev.onset));
            times.set(i, 1, T::of(ev.offset));
            intensities.set(i, 0, T::of(ev.intensity));
            for (dst, &v) in frame_rows.row_mut(i).iter_mut().zip(frames.row(i)) {
                *dst = T::of(v);
            }
            for j in 0..n {
                for (dst, &v) in rel.row_mut(i * nmax + j).iter_mut().zip(relations.slice(i, j)) {
                    *dst = T::of(v);
                }
            }
        }
        let mask = (0..nmax).map(|i| i < n).collect();
        Ok(GraphInput {
            type_tokens,
            times,
            clip_duration: tl.clip_duration(),
            intensities,
            frames: frame_rows,
            relations: rel,
            mask,
        })
    }

    /// Learned projection of pooled token vectors, L2-normalized per row.
    pub fn type_embedding<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pooled: Var) -> Var {
        let projected = self.type_proj.forward(g, p, pooled);
        g.normalize_rows(projected)
    }

    /// Sine MLP on `[onset, offset] / clip_duration`.
    pub fn time_embedding<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, times: Var, clip_duration: f64) -> Var {
        let x = g.scale(times, T::of(1.0 / clip_duration));
        let h = self.time_in.forward(g, p, x);
        let scales = g.constant(time_frequency_scales(self.cfg.d_model));
        let h = g.mul_row(h, scales);
        let h = g.sin(h);
        self.time_out.forward(g, p, h)
    }

    /// Mean of encoded relation slices over each event's real neighbours.
    pub fn relation_aggregate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, relations: Var, mask: &[bool]) -> Var {
        let nmax = mask.len();
        let encoded = self.relation.forward(g, p, relations);
        let mut agg = Matrix::zeros(nmax, nmax * nmax);
        for i in (0..nmax).filter(|&i| mask[i]) {
            let neighbours: Vec<usize> = (0..nmax).filter(|&j| j != i && mask[j]).collect();
            if neighbours.is_empty() {
                continue;
            }
            let w = T::of(1.0 / neighbours.len() as f64);
            for j in neighbours {
                agg.set(i, i * nmax + j, w);
            }
        }
        let agg = g.constant(agg);
        g.matmul(agg, encoded)
    }

    /// `α_i · FrameEncoder(F[i, :])`
    pub fn frame_encoding<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, frames: Var, intensities: Var) -> Var {
        let enc = self.frame.forward(g, p, frames);
        g.scale_rows(enc, intensities)
    }

    /// Full forward pass on graph-resident inputs.
    pub fn forward_vars<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, inputs: &GraphVars, mask: &[bool], clip_duration: f64) -> EncodedGraph {
        let e_type = self.type_embedding(g, p, inputs.type_tokens);
        let t = self.time_embedding(g, p, inputs.times, clip_duration);
        let g0 = g.add(e_type, t);
        let r = self.relation_aggregate(g, p, inputs.relations, mask);
        let f = self.frame_encoding(g, p, inputs.frames, inputs.intensities);
        let rf = g.add(r, f);
        let cat = g.concat_cols(&[g0, rf]);
        let g1 = self.fusion.forward(g, p, cat);
        let mut x = g.add(g1, p[self.position]);
        let mut attention = Vec::new();
        for layer in &self.layers {
            let n = layer.attn_norm.forward(g, p, x);
            let a = layer.attn.forward(g, p, n, n, mask);
            attention.extend(a.weights);
            x = g.add(x, a.output);
            let n = layer.ff_norm.forward(g, p, x);
            let ff = layer.ff.forward(g, p, n);
            x = g.add(x, ff);
        }
        let x = self.final_norm.forward(g, p, x);
        let keep = g.constant(Matrix::from_fn(mask.len(), 1, |i, _| if mask[i] { T::one() } else { T::zero() }));
        let h = g.scale_rows(x, keep);
        EncodedGraph { h, g0, r, f, g1, attention }
    }

    /// Places `input` on the graph (as constants or differentiable leaves)
    /// and runs the encoder.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, input: &GraphInput<T>, input_grad: bool) -> (GraphVars, EncodedGraph) {
        let vars = GraphVars {
            type_tokens: g.leaf(input.type_tokens.clone(), input_grad),
            times: g.leaf(input.times.clone(), input_grad),
            intensities: g.leaf(input.intensities.clone(), input_grad),
            frames: g.leaf(input.frames.clone(), input_grad),
            relations: g.leaf(input.relations.clone(), input_grad),
        };
        let out = self.forward_vars(g, p, &vars, &input.mask, input.clip_duration);
        (vars, out)
    }

    /// Inference-only encoding.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, input: &GraphInput<T>) -> GraphEmbeddings<T> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (_, out) = self.forward(&mut g, &p, input, false);
        GraphEmbeddings { h: g.value(out.h).clone(), mask: input.mask.clone() }
    }

    /// Encodes a timeline end to end: frame activation, relations, encoder.
    pub fn encode_timeline<T: Scalar>(&self, store: &ParamStore<T>, tl: &Timeline) -> Result<GraphEmbeddings<T>> {
        let fa = crate::timeline::frame_activation(tl, self.cfg.frames);
        let rt = crate::timeline::relation_tensor(tl);
        let input = self.graph_input(tl, &fa, &rt)?;
        Ok(self.encode(store, &input))
    }

    /// Intermediate node states of the real events.
    pub fn node_states<T: Scalar>(&self, store: &ParamStore<T>, input: &GraphInput<T>) -> Vec<EventNodeState<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (_, out) = self.forward(&mut g, &p, input, false);
        (0..input.real_events())
            .map(|i| EventNodeState {
                g0: g.value(out.g0).row(i).to_vec(),
                r: g.value(out.r).row(i).to_vec(),
                f: g.value(out.f).row(i).to_vec(),
                g1: g.value(out.g1).row(i).to_vec(),
            })
            .collect()
    }

    /// Projected, unit-norm type embedding of one label.
    pub fn embed_type<T: Scalar>(&self, store: &ParamStore<T>, category: &str) -> Result<TypeEmbedding<T>> {
        let pooled = self.type_tokens(category)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Matrix::from_f64(1, self.cfg.d_model, &pooled));
        let e = self.type_embedding(&mut g, &p, x);
        Ok(TypeEmbedding(g.value(e).row(0).to_vec()))
    }

    /// Time embedding of one interval.
    pub fn embed_time<T: Scalar>(&self, store: &ParamStore<T>, onset: f64, offset: f64, clip_duration: f64) -> Vec<T> {
        assert!(onset < offset, "embed_time requires onset < offset");
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Matrix::from_f64(1, 2, &[onset, offset]));
        let t = self.time_embedding(&mut g, &p, x, clip_duration);
        g.value(t).row(0).to_vec()
    }
}

/// Graph handles of the encoder inputs.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub type_tokens: Var,
    pub times: Var,
    pub intensities: Var,
    pub frames: Var,
    pub relations: Var,
}
