//! Rectified-flow generation of synthetic event latents.
//!
//! A clean latent is a mixture of per-class signature vectors weighted by
//! frame activation. The velocity model predicts `x_0 − x_1` along the
//! straight path `x_t = (1 − t)·x_1 + t·x_0`, conditioned on prompt tokens,
//! graph embeddings from the event encoder and a clip-duration embedding.
//! Sampling integrates from noise at `t = 1` to `t = 0` with Euler steps and
//! classifier-free guidance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::TensorFile;
use crate::encoder::{DegEncoder, EncoderConfig, GraphInput};
use crate::error::{Error, Result};
use crate::hashembed;
use crate::nn::{sinusoidal_features, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::optim::{Adam, AdamConfig};
use crate::params::{init_rng, stream_rng, Bound, Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::timeline::{frame_activation, relation_tensor, Timeline};

const SIGNATURE_SALT: &str = "signature";
const TEXT_SALT: &str = "text";
const TIME_FEATURES: usize = 16;
const DURATION_FEATURES: usize = 8;

/// A latent clip: `latent_frames × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLatent {
    pub x: Matrix<f64>,
    pub clip_duration: f64,
}

impl SyntheticLatent {
    pub fn frames(&self) -> usize {
        self.x.rows()
    }

    pub fn channels(&self) -> usize {
        self.x.cols()
    }

    pub fn frame_width(&self) -> f64 {
        self.clip_duration / self.frames() as f64
    }
}

/// Unit-norm signature vector per class label.
///
/// Known labels are orthonormalized in sorted order when there are no more
/// of them than channels, so a clean mixture projects exactly onto each
/// class. Unknown labels fall back to their normalized hash vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignatureBank {
    seed: u64,
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    basis: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ClassSignatureBank {
    pub fn new<S: AsRef<str>>(seed: u64, dim: usize, labels: &[S]) -> Self {
        let mut names: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        names.sort();
        names.dedup();
        let orthogonal = names.len() <= dim;
        let mut vectors = BTreeMap::new();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for name in names {
            let raw = Self::hashed(seed, dim, &name);
            let mut v = raw.clone();
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-9 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v.clone());
            }
            vectors.insert(name, if orthogonal && n > 1e-9 { v } else { raw });
        }
        Self { seed, dim, vectors, basis }
    }

    fn hashed(seed: u64, dim: usize, label: &str) -> Vec<f64> {
        let mut v = hashembed::pooled_vector(seed, SIGNATURE_SALT, label, dim)
            .unwrap_or_else(|| hashembed::token_vector(seed, SIGNATURE_SALT, "", dim));
        hashembed::l2_normalize(&mut v);
        v
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Known labels in sorted order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.vectors.get(label).map(Vec::as_slice)
    }

    pub fn signature(&self, label: &str) -> Vec<f64> {
        self.get(label).map(<[f64]>::to_vec).unwrap_or_else(|| Self::hashed(self.seed, self.dim, label))
    }

    /// Orthogonal projection of `v` onto the span of the known signatures.
    pub fn project_onto_span(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for b in &self.basis {
            let c = dot(v, b);
            out.iter_mut().zip(b).for_each(|(o, y)| *o += c * y);
        }
        out
    }
}

/// `x_1[t,:] = Σ_i α_i · F'[i,t] · v_{c_i} + noise_scale · η` at the bank's
/// channel count and `latent_frames` frames.
pub fn synth_target<R: Rng + ?Sized>(
    tl: &Timeline,
    bank: &ClassSignatureBank,
    latent_frames: usize,
    noise_scale: f64,
    rng: &mut R,
) -> SyntheticLatent {
    let fa = frame_activation(tl, latent_frames);
    let mut x = Matrix::zeros(latent_frames, bank.dim());
    for (i, ev) in tl.events().iter().enumerate() {
        let v = bank.signature(&ev.category);
        for t in 0..latent_frames {
            let w = ev.intensity * fa.get(i, t);
            if w != 0.0 {
                x.row_mut(t).iter_mut().zip(&v).for_each(|(a, b)| *a += w * b);
            }
        }
    }
    if noise_scale != 0.0 {
        let eta = Matrix::<f64>::randn(latent_frames, bank.dim(), rng);
        x.axpy(noise_scale, &eta);
    }
    SyntheticLatent { x, clip_duration: tl.clip_duration() }
}

/// `(x_t, u_t)` with `x_t = (1 − t)·x_1 + t·x_0` and `u_t = x_0 − x_1`.
pub fn interpolate<T: Scalar>(x1: &Matrix<T>, x0: &Matrix<T>, t: T) -> (Matrix<T>, Matrix<T>) {
    assert_eq!(x1.shape(), x0.shape(), "interpolation endpoints differ in shape");
    let xt = x1.zip_map(x0, |a, b| (T::one() - t) * a + t * b);
    (xt, x0.sub(x1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub max_events: usize,
    pub frames: usize,
    pub latent_frames: usize,
    pub channels: usize,
    pub text_tokens: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 4,
            heads: 4,
            max_events: 16,
            frames: 16,
            latent_frames: 64,
            channels: 16,
            text_tokens: 16,
            blocks: 2,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            layers: self.encoder_layers,
            heads: self.heads,
            max_events: self.max_events,
            frames: self.frames,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.latent_frames == 0 || self.channels == 0 || self.text_tokens == 0 || self.blocks == 0 {
            return Err(Error::Config("latent_frames, channels, text_tokens and blocks must be positive".into()));
        }
        Ok(())
    }

    /// Rows of the conditioning sequence: text, graph, duration.
    pub fn condition_rows(&self) -> usize {
        self.text_tokens + self.max_events + 1
    }
}

/// Raw conditioning sources for one clip. A `None` block is masked.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInput<T> {
    /// Token hash vectors, `text_tokens × d_model`.
    pub text: Matrix<T>,
    pub text_mask: Vec<bool>,
    pub graph: Option<GraphInput<T>>,
    pub duration: Option<f64>,
    pub clip_duration: f64,
}

impl<T: Scalar> ConditionInput<T> {
    /// Everything masked; the velocity model then sees no conditioning.
    pub fn null(&self) -> Self {
        Self {
            text: Matrix::zeros(self.text.rows(), self.text.cols()),
            text_mask: vec![false; self.text_mask.len()],
            graph: None,
            duration: None,
            clip_duration: self.clip_duration,
        }
    }

    /// Masks the graph block only.
    pub fn text_only(&self) -> Self {
        Self { graph: None, ..self.clone() }
    }
}

/// Materialized conditioning sequence `[E_text; H; E_dur]` with masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    pub text: Matrix<T>,
    pub text_mask: Vec<bool>,
    pub graph: Matrix<T>,
    pub graph_mask: Vec<bool>,
    pub duration: Matrix<T>,
    pub duration_mask: bool,
    pub clip_duration: f64,
}

impl<T: Scalar> ConditioningBundle<T> {
    pub fn rows(&self) -> Matrix<T> {
        Matrix::vstack(&[&self.text, &self.graph, &self.duration])
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = self.text_mask.clone();
        m.extend_from_slice(&self.graph_mask);
        m.push(self.duration_mask);
        m
    }

    /// Same shapes, zero content, every row masked.
    pub fn null(&self) -> Self {
        Self {
            text: Matrix::zeros(self.text.rows(), self.text.cols()),
            text_mask: vec![false; self.text_mask.len()],
            graph: Matrix::zeros(self.graph.rows(), self.graph.cols()),
            graph_mask: vec![false; self.graph_mask.len()],
            duration: Matrix::zeros(1, self.duration.cols()),
            duration_mask: false,
            clip_duration: self.clip_duration,
        }
    }

    pub fn text_only(&self) -> Self {
        Self {
            graph: Matrix::zeros(self.graph.rows(), self.graph.cols()),
            graph_mask: vec![false; self.graph_mask.len()],
            ..self.clone()
        }
    }
}

/// Conditioning rows on a graph with their key mask.
pub struct ConditionVars {
    pub rows: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
struct VelocityBlock {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// `v_θ(x_t, t, E_cond)`: per-frame input projection, positional and
/// timestep embeddings, cross-attention blocks over the conditioning rows
/// and an affine output head.
#[derive(Clone, Debug)]
pub struct VelocityModel {
    latent_frames: usize,
    d_model: usize,
    input: Linear,
    time: Linear,
    block_offsets: ParamId,
    blocks: Vec<VelocityBlock>,
    out_norm: LayerNorm,
    output: Linear,
}

impl VelocityModel {
    fn new<T: Scalar>(cfg: &FlowConfig, init: &mut Initializer<'_, T>) -> Self {
        let d = cfg.d_model;
        init.scoped("velocity", |i| VelocityModel {
            latent_frames: cfg.latent_frames,
            d_model: d,
            input: Linear::new(i, "input", cfg.channels, d, true),
            time: Linear::new(i, "time", TIME_FEATURES, d, true),
            block_offsets: i.uniform("block_offsets", 3, d, d),
            blocks: (0..cfg.blocks)
                .map(|b| {
                    i.scoped(&format!("block{b}"), |i| VelocityBlock {
                        attn_norm: LayerNorm::new(i, "attn_norm", d),
                        attn: MultiHeadAttention::new(i, "attn", d, cfg.heads),
                        ff_norm: LayerNorm::new(i, "ff_norm", d),
                        ff: FeedForward::new(i, "ff", d, 4 * d),
                    })
                })
                .collect(),
            out_norm: LayerNorm::new(i, "out_norm", d),
            output: Linear::new(i, "output", d, cfg.channels, true),
        })
    }

    fn positions<T: Scalar>(&self) -> Matrix<T> {
        let f = self.latent_frames;
        let mut m = Matrix::zeros(f, self.d_model);
        for r in 0..f {
            let feats = sinusoidal_features((r as f64 + 0.5) / f as f64, self.d_model, f as f64);
            for (dst, v) in m.row_mut(r).iter_mut().zip(feats) {
                *dst = T::of(v);
            }
        }
        m
    }

    /// `layout` gives the text and graph row counts; the last row is duration.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        t: f64,
        cond: &ConditionVars,
        layout: (usize, usize),
    ) -> Var {
        let h = self.input.forward(g, p, x);
        let pos = g.constant(self.positions());
        let h = g.add(h, pos);
        let tf = g.constant(Matrix::from_f64(1, TIME_FEATURES, &sinusoidal_features(t, TIME_FEATURES, 100.0)));
        let temb = self.time.forward(g, p, tf);
        let mut h = g.add_row(h, temb);

        let (text_rows, graph_rows) = layout;
        let rows = text_rows + graph_rows + 1;
        let indicator = g.constant(Matrix::from_fn(rows, 3, |r, c| {
            let block = if r < text_rows { 0 } else if r < text_rows + graph_rows { 1 } else { 2 };
            if block == c { T::one() } else { T::zero() }
        }));
        let offsets = g.matmul(indicator, p[self.block_offsets]);
        let keys = g.add(cond.rows, offsets);

        for block in &self.blocks {
            let n = block.attn_norm.forward(g, p, h);
            let a = block.attn.forward(g, p, n, keys, &cond.mask);
            h = g.add(h, a.output);
            let n = block.ff_norm.forward(g, p, h);
            let f = block.ff.forward(g, p, n);
            h = g.add(h, f);
        }
        let h = self.out_norm.forward(g, p, h);
        self.output.forward(g, p, h)
    }
}

/// Architecture of the full conditional generator. Parameters live in a
/// separate [`ParamStore`] so several parameter sets can share one network.
#[derive(Clone, Debug)]
pub struct FlowNet {
    cfg: FlowConfig,
    encoder: DegEncoder,
    text_proj: Linear,
    duration: Linear,
    velocity: VelocityModel,
}

impl FlowNet {
    pub fn init<T: Scalar>(cfg: FlowConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(cfg.seed);
        let mut init = Initializer::new(&mut store, &mut rng);
        let encoder = DegEncoder::new(cfg.encoder(), &mut init)?;
        let d = cfg.d_model;
        let text_proj = Linear::new(&mut init, "text_proj", d, d, true);
        let duration = Linear::new(&mut init, "duration", DURATION_FEATURES, d, true);
        let velocity = VelocityModel::new(&cfg, &mut init);
        Ok((Self { cfg, encoder, text_proj, duration, velocity }, store))
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &DegEncoder {
        &self.encoder
    }

    /// Token hash vectors of a prompt, truncated or padded to `text_tokens`.
    pub fn text_tokens<T: Scalar>(&self, prompt: &str) -> (Matrix<T>, Vec<bool>) {
        let (rows, d) = (self.cfg.text_tokens, self.cfg.d_model);
        let tokens = hashembed::tokenize(prompt);
        let mut m = Matrix::zeros(rows, d);
        let mut mask = vec![false; rows];
        for (r, tok) in tokens.iter().take(rows).enumerate() {
            for (dst, v) in m.row_mut(r).iter_mut().zip(hashembed::token_vector(self.cfg.seed, TEXT_SALT, tok, d)) {
                *dst = T::of(v);
            }
            mask[r] = true;
        }
        (m, mask)
    }

    pub fn condition_input<T: Scalar>(&self, tl: &Timeline, prompt: &str) -> Result<ConditionInput<T>> {
        let fa = frame_activation(tl, self.cfg.frames);
        let rt = relation_tensor(tl);
        let graph = self.encoder.graph_input(tl, &fa, &rt)?;
        let (text, text_mask) = self.text_tokens(prompt);
        Ok(ConditionInput {
            text,
            text_mask,
            graph: Some(graph),
            duration: Some(tl.clip_duration()),
            clip_duration: tl.clip_duration(),
        })
    }

    /// Builds `[E_text; H; E_dur]` on the graph; masked rows are zero.
    pub fn encode_condition<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, ci: &ConditionInput<T>) -> ConditionVars {
        let (tr, nr, d) = (self.cfg.text_tokens, self.cfg.max_events, self.cfg.d_model);
        let text = if ci.text_mask.iter().any(|&m| m) {
            let x = g.constant(ci.text.clone());
            let proj = self.text_proj.forward(g, p, x);
            let keep = g.constant(mask_column(&ci.text_mask));
            g.scale_rows(proj, keep)
        } else {
            g.constant(Matrix::zeros(tr, d))
        };
        let (graph, graph_mask) = match &ci.graph {
            Some(gi) => (self.encoder.forward(g, p, gi, false).1.h, gi.mask.clone()),
            None => (g.constant(Matrix::zeros(nr, d)), vec![false; nr]),
        };
        let (dur, dur_mask) = match ci.duration {
            Some(seconds) => {
                let f = g.constant(Matrix::from_f64(1, DURATION_FEATURES, &sinusoidal_features(seconds / 60.0, DURATION_FEATURES, 16.0)));
                (self.duration.forward(g, p, f), true)
            }
            None => (g.constant(Matrix::zeros(1, d)), false),
        };
        let rows = g.concat_rows(&[text, graph, dur]);
        let mut mask = ci.text_mask.clone();
        mask.extend(graph_mask);
        mask.push(dur_mask);
        ConditionVars { rows, mask }
    }

    pub fn bundle<T: Scalar>(&self, store: &ParamStore<T>, ci: &ConditionInput<T>) -> ConditioningBundle<T> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let cv = self.encode_condition(&mut g, &p, ci);
        let rows = g.value(cv.rows);
        let (tr, nr) = (self.cfg.text_tokens, self.cfg.max_events);
        let take = |start: usize, len: usize| Matrix::from_fn(len, rows.cols(), |r, c| rows.get(start + r, c));
        ConditioningBundle {
            text: take(0, tr),
            text_mask: cv.mask[..tr].to_vec(),
            graph: take(tr, nr),
            graph_mask: cv.mask[tr..tr + nr].to_vec(),
            duration: take(tr + nr, 1),
            duration_mask: cv.mask[tr + nr],
            clip_duration: ci.clip_duration,
        }
    }

    fn layout(&self) -> (usize, usize) {
        (self.cfg.text_tokens, self.cfg.max_events)
    }

    /// Velocity on the graph from raw conditioning sources.
    pub fn velocity_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, t: f64, ci: &ConditionInput<T>) -> Var {
        let cv = self.encode_condition(g, p, ci);
        self.velocity.forward(g, p, x, t, &cv, self.layout())
    }

    /// Velocity on the graph from a materialized bundle.
    pub fn velocity_from_bundle<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, t: f64, bundle: &ConditioningBundle<T>) -> Var {
        let cv = ConditionVars { rows: g.constant(bundle.rows()), mask: bundle.mask() };
        self.velocity.forward(g, p, x, t, &cv, self.layout())
    }

    /// FM loss at a fixed `(t, x_0)`; gradients for every parameter when
    /// `with_grad` is set.
    pub fn fm_loss_at<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x1: &Matrix<T>,
        ci: &ConditionInput<T>,
        t: f64,
        x0: &Matrix<T>,
        with_grad: bool,
    ) -> (T, Option<Vec<Matrix<T>>>) {
        let mut g = Graph::new();
        let p = store.bind(&mut g, with_grad);
        let (xt, u) = interpolate(x1, x0, T::of(t));
        let xt = g.constant(xt);
        let u = g.constant(u);
        let v = self.velocity_graph(&mut g, &p, xt, t, ci);
        let loss = g.mse(v, u);
        let value = g.scalar_value(loss);
        let grads = with_grad.then(|| {
            let mut grads = g.backward(loss);
            store.collect_grads(&p, &mut grads)
        });
        (value, grads)
    }
}

fn mask_column<T: Scalar>(mask: &[bool]) -> Matrix<T> {
    Matrix::from_fn(mask.len(), 1, |i, _| if mask[i] { T::one() } else { T::zero() })
}

/// Anything that predicts a velocity for a latent, time and conditioning.
pub trait VelocityField<T: Scalar> {
    fn latent_shape(&self) -> (usize, usize);
    fn velocity(&self, x: &Matrix<T>, t: f64, cond: &ConditioningBundle<T>) -> Matrix<T>;
}

/// A network together with one parameter set.
#[derive(Clone, Debug)]
pub struct FlowModel<T> {
    pub net: FlowNet,
    pub params: ParamStore<T>,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(cfg: FlowConfig) -> Result<Self> {
        let (net, params) = FlowNet::init(cfg)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &FlowConfig {
        self.net.config()
    }

    pub fn condition_input(&self, tl: &Timeline, prompt: &str) -> Result<ConditionInput<T>> {
        self.net.condition_input(tl, prompt)
    }

    pub fn bundle(&self, ci: &ConditionInput<T>) -> ConditioningBundle<T> {
        self.net.bundle(&self.params, ci)
    }

    pub fn fm_loss_at(&self, x1: &Matrix<T>, ci: &ConditionInput<T>, t: f64, x0: &Matrix<T>, with_grad: bool) -> (T, Option<Vec<Matrix<T>>>) {
        self.net.fm_loss_at(&self.params, x1, ci, t, x0, with_grad)
    }

    /// Conditions on a timeline and prompt and samples one latent.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        tl: &Timeline,
        prompt: &str,
        text_only: bool,
        gs: f64,
        steps: usize,
        rng: &mut R,
    ) -> Result<SyntheticLatent> {
        let ci = self.condition_input(tl, prompt)?;
        let ci = if text_only { ci.text_only() } else { ci };
        let bundle = self.bundle(&ci);
        Ok(sample(self, &bundle, gs, steps, rng))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(self.config())?;
        TensorFile::from_params(&self.params, self.config().seed, meta).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = TensorFile::load(path)?;
        let cfg: FlowConfig = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config in header: {e}")))?;
        let mut model = Self::new(cfg)?;
        file.load_into(&mut model.params)?;
        Ok(model)
    }
}

impl<T: Scalar> VelocityField<T> for FlowModel<T> {
    fn latent_shape(&self) -> (usize, usize) {
        (self.config().latent_frames, self.config().channels)
    }

    fn velocity(&self, x: &Matrix<T>, t: f64, cond: &ConditioningBundle<T>) -> Matrix<T> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let v = self.net.velocity_from_bundle(&mut g, &p, xv, t, cond);
        g.value(v).clone()
    }
}

/// Mean squared velocity error of any field at a fixed `(t, x_0)`.
pub fn velocity_mse<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &V,
    x1: &Matrix<T>,
    cond: &ConditioningBundle<T>,
    t: f64,
    x0: &Matrix<T>,
) -> T {
    let (xt, u) = interpolate(x1, x0, T::of(t));
    let v = field.velocity(&xt, t, cond);
    v.sub(&u).sum_squares() / T::of(u.len() as f64)
}

/// One FM-loss draw with its sampled time.
#[derive(Clone, Debug)]
pub struct FmLoss<T> {
    pub loss: T,
    pub t: f64,
    pub grads: Vec<Matrix<T>>,
}

/// Draws `t ~ U[0,1]` and `x_0 ~ N(0, I)` and returns the loss and gradients.
pub fn fm_loss<T: Scalar, R: Rng + ?Sized>(model: &FlowModel<T>, x1: &Matrix<T>, ci: &ConditionInput<T>, rng: &mut R) -> FmLoss<T> {
    let t: f64 = rng.random();
    let x0 = Matrix::randn(x1.rows(), x1.cols(), rng);
    let (loss, grads) = model.fm_loss_at(x1, ci, t, &x0, true);
    FmLoss { loss, t, grads: grads.expect("gradients requested") }
}

/// Guided Euler integration from `x_0` at `t = 1` to `t = 0`.
pub fn sample_from<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &V,
    cond: &ConditioningBundle<T>,
    gs: f64,
    steps: usize,
    x0: Matrix<T>,
) -> Matrix<T> {
    assert!(steps >= 1, "sampling needs at least one step");
    let null = cond.null();
    let dt = T::of(-1.0 / steps as f64);
    let gs_t = T::of(gs);
    let mut x = x0;
    for k in 0..steps {
        let t = 1.0 - k as f64 / steps as f64;
        let v = if gs == 0.0 {
            field.velocity(&x, t, &null)
        } else if gs == 1.0 {
            field.velocity(&x, t, cond)
        } else {
            let vu = field.velocity(&x, t, &null);
            let vc = field.velocity(&x, t, cond);
            vu.zip_map(&vc, |u, c| u + gs_t * (c - u))
        };
        x.axpy(dt, &v);
    }
    x
}

/// Draws `x_0 ~ N(0, I)` and integrates with guidance scale `gs`.
pub fn sample<T: Scalar, V: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    field: &V,
    cond: &ConditioningBundle<T>,
    gs: f64,
    steps: usize,
    rng: &mut R,
) -> SyntheticLatent {
    let (f, d) = field.latent_shape();
    let x = sample_from(field, cond, gs, steps, Matrix::randn(f, d, rng));
    SyntheticLatent { x: Matrix::from_vec(f, d, x.to_f64()), clip_duration: cond.clip_duration }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub cond_dropout: f64,
    pub noise_scale: f64,
    /// Trains with the graph block masked.
    pub text_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, adam: AdamConfig::default(), cond_dropout: 0.1, noise_scale: 0.05, text_only: false, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// One training clip with its precomputed target and conditioning.
pub struct PreparedSample<T> {
    pub x1: Matrix<T>,
    pub condition: ConditionInput<T>,
}

/// Synthesizes targets and conditioning for `(timeline, prompt)` pairs.
pub fn prepare_dataset<T: Scalar>(
    net: &FlowNet,
    data: &[(Timeline, String)],
    bank: &ClassSignatureBank,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<PreparedSample<T>>> {
    data.iter()
        .enumerate()
        .map(|(i, (tl, prompt))| {
            let mut rng = stream_rng(seed, &[1, i as u64]);
            let target = synth_target(tl, bank, net.config().latent_frames, noise_scale, &mut rng);
            Ok(PreparedSample { x1: Matrix::from_f64(target.frames(), target.channels(), target.x.as_slice()), condition: net.condition_input(tl, prompt)? })
        })
        .collect()
}

/// Adam on the FM loss with condition dropout. Per-sample losses run in
/// parallel; gradients are summed in sample order so results do not depend
/// on the thread count.
pub fn train<T: Scalar>(
    model: &mut FlowModel<T>,
    data: &[(Timeline, String)],
    bank: &ClassSignatureBank,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepared = prepare_dataset(&model.net, data, bank, cfg.noise_scale, cfg.seed)?;
    train_prepared(model, &prepared, cfg)
}

pub fn train_prepared<T: Scalar>(model: &mut FlowModel<T>, data: &[PreparedSample<T>], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = cfg.batch_size.max(1);
    let mut opt = Adam::new(cfg.adam.clone(), &model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, &[2]);
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<(usize, T, Vec<Matrix<T>>)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, &[3, step, i as u64]);
                    let sample = &data[i];
                    let dropped = rng.random::<f64>() < cfg.cond_dropout;
                    let ci = if dropped {
                        sample.condition.null()
                    } else if cfg.text_only {
                        sample.condition.text_only()
                    } else {
                        sample.condition.clone()
                    };
                    let t: f64 = rng.random();
                    let x0 = Matrix::randn(sample.x1.rows(), sample.x1.cols(), &mut rng);
                    let (loss, grads) = model.fm_loss_at(&sample.x1, &ci, t, &x0, true);
                    (i, loss, grads.expect("gradients requested"))
                })
                .collect();
            let scale = T::of(1.0 / results.len() as f64);
            let mut total: Option<Vec<Matrix<T>>> = None;
            let mut batch_loss = 0.0;
            for (i, loss, grads) in results {
                let l = loss.as_f64();
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { context: format!("epoch {epoch}, step {step}, sample {i}") });
                }
                batch_loss += l;
                match &mut total {
                    None => total = Some(grads.into_iter().map(|g| g.scale(scale)).collect()),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.axpy(scale, g)),
                }
            }
            let batch_loss = batch_loss / chunk.len() as f64;
            opt.step(&mut model.params, &total.expect("non-empty batch"));
            if !model.params.all_finite() {
                return Err(Error::NonFiniteLoss { context: format!("parameters after epoch {epoch}, step {step}") });
            }
            report.step_losses.push(batch_loss);
            epoch_total += batch_loss * chunk.len() as f64;
            step += 1;
        }
        report.epoch_losses.push(epoch_total / data.len() as f64);
    }
    Ok(report)
}
