//! Consensus preference optimization.
//!
//! Candidates for the same prompt are scored by a weighted set of rewards;
//! each ordered pair carries its reward gap `δ` as a preference intensity.
//! The model's own preference signal `δ̂` compares its flow-matching losses
//! on the two sides against a reference model, and training regresses
//! `β·δ̂` onto `δ` while keeping a reconstruction term on the winner.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ClassSignatureBank, ConditionInput, FlowModel, FlowNet, SyntheticLatent};
use crate::harness::detect::{detect_events, DEFAULT_THRESHOLD};
use crate::harness::metrics::{class_recall, temporal_iou};
use crate::hashembed;
use crate::optim::{Adam, AdamConfig};
use crate::params::{stream_rng, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::timeline::Timeline;

pub const DEFAULT_WEIGHTS: [f64; 4] = [0.35, 0.35, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r_text: f64,
    pub r_event: f64,
    pub r_temporal: f64,
    pub r_audio: f64,
}

impl RewardVector {
    pub fn components(&self) -> [f64; 4] {
        [self.r_text, self.r_event, self.r_temporal, self.r_audio]
    }

    pub fn overall(&self, weights: &[f64; 4]) -> f64 {
        self.components().iter().zip(weights).map(|(r, w)| r * w).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub weights: [f64; 4],
    pub threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { weights: DEFAULT_WEIGHTS, threshold: DEFAULT_THRESHOLD }
    }
}

fn clip01(v: f64) -> f64 {
    if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
}

/// Mean signature of the prompt tokens, projected onto the bank span.
fn prompt_embedding(prompt: &str, bank: &ClassSignatureBank) -> Vec<f64> {
    let tokens = hashembed::tokenize(prompt);
    let mut acc = vec![0.0; bank.dim()];
    for t in &tokens {
        acc.iter_mut().zip(bank.signature(t)).for_each(|(a, v)| *a += v);
    }
    bank.project_onto_span(&acc)
}

/// Text alignment mapped to `[0, 1]` by `(1 + cos) / 2`.
pub fn text_reward(latent: &SyntheticLatent, prompt: &str, bank: &ClassSignatureBank) -> f64 {
    let frames = latent.frames().max(1) as f64;
    let mut mean = vec![0.0; latent.channels()];
    for t in 0..latent.frames() {
        mean.iter_mut().zip(latent.x.row(t)).for_each(|(m, v)| *m += v / frames);
    }
    let m = bank.project_onto_span(&mean);
    clip01((1.0 + cosine(&prompt_embedding(prompt, bank), &m)) / 2.0)
}

/// Half the in-span energy fraction plus half the spread of frame norms.
pub fn audio_reward(latent: &SyntheticLatent, bank: &ClassSignatureBank) -> f64 {
    let mut total = 0.0;
    let mut residual = 0.0;
    let mut norms = Vec::with_capacity(latent.frames());
    for t in 0..latent.frames() {
        let row = latent.x.row(t);
        let proj = bank.project_onto_span(row);
        let e: f64 = row.iter().map(|v| v * v).sum();
        total += e;
        residual += row.iter().zip(&proj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        norms.push(e.sqrt());
    }
    let ratio = if total > 0.0 { residual / total } else { 1.0 };
    norms.sort_by(f64::total_cmp);
    let spread = if norms.is_empty() {
        0.0
    } else {
        crate::curation::percentile(&norms, 0.95) - crate::curation::percentile(&norms, 0.05)
    };
    0.5 * clip01(1.0 - ratio) + 0.5 * clip01(spread / 2.0)
}

pub fn compute_rewards(latent: &SyntheticLatent, tl: &Timeline, prompt: &str, bank: &ClassSignatureBank, cfg: &RewardConfig) -> RewardVector {
    let dets = detect_events(latent, bank, cfg.threshold);
    RewardVector {
        r_text: text_reward(latent, prompt, bank),
        r_event: clip01(class_recall(&dets, tl)),
        r_temporal: clip01(temporal_iou(&dets, tl)),
        r_audio: audio_reward(latent, bank),
    }
}

/// A prompt with its target timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    pub id: String,
    pub timeline: Timeline,
    pub prompt: String,
}

/// Generated latents of one source, keyed by prompt id.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSource {
    pub name: String,
    pub latents: BTreeMap<String, SyntheticLatent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub win_ref: String,
    pub lose_ref: String,
    pub win: SyntheticLatent,
    pub lose: SyntheticLatent,
    pub delta: f64,
    pub rewards_win: RewardVector,
    pub rewards_lose: RewardVector,
}

/// One line of the pair manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt_id: String,
    pub win_ref: String,
    pub lose_ref: String,
    pub delta: f64,
    pub rewards_win: RewardVector,
    pub rewards_lose: RewardVector,
}

impl PreferencePair {
    pub fn record(&self) -> PairRecord {
        PairRecord {
            prompt_id: self.prompt_id.clone(),
            win_ref: self.win_ref.clone(),
            lose_ref: self.lose_ref.clone(),
            delta: self.delta,
            rewards_win: self.rewards_win,
            rewards_lose: self.rewards_lose,
        }
    }
}

/// Reference string of a candidate latent.
pub fn candidate_ref(source: &str, prompt_id: &str) -> String {
    format!("{source}/{prompt_id}")
}

/// Scores every candidate of every prompt and emits each unordered pair
/// with a strictly positive reward gap, winner first.
pub fn build_pairs(
    prompts: &[PromptSpec],
    sources: &[CandidateSource],
    bank: &ClassSignatureBank,
    cfg: &RewardConfig,
) -> Result<Vec<PreferencePair>> {
    for p in prompts {
        for s in sources {
            if !s.latents.contains_key(&p.id) {
                return Err(Error::MissingCandidate { prompt_id: p.id.clone(), source_name: s.name.clone() });
            }
        }
    }
    let per_prompt: Vec<Vec<PreferencePair>> = prompts
        .par_iter()
        .map(|p| {
            let scored: Vec<(&str, &SyntheticLatent, RewardVector, f64)> = sources
                .iter()
                .map(|s| {
                    let latent = &s.latents[&p.id];
                    let r = compute_rewards(latent, &p.timeline, &p.prompt, bank, cfg);
                    (s.name.as_str(), latent, r, r.overall(&cfg.weights))
                })
                .collect();
            let mut pairs = Vec::new();
            for i in 0..scored.len() {
                for j in i + 1..scored.len() {
                    let (a, b) = (&scored[i], &scored[j]);
                    if a.3 == b.3 {
                        continue;
                    }
                    let (w, l) = if a.3 > b.3 { (a, b) } else { (b, a) };
                    pairs.push(PreferencePair {
                        prompt_id: p.id.clone(),
                        win_ref: candidate_ref(w.0, &p.id),
                        lose_ref: candidate_ref(l.0, &p.id),
                        win: w.1.clone(),
                        lose: l.1.clone(),
                        delta: w.3 - l.3,
                        rewards_win: w.2,
                        rewards_lose: l.2,
                    });
                }
            }
            pairs
        })
        .collect();
    Ok(per_prompt.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopoConfig {
    pub beta: f64,
    pub lambda: f64,
    pub ema_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for CopoConfig {
    fn default() -> Self {
        Self { beta: 0.1, lambda: 0.1, ema_decay: 0.999, steps: 200, batch_size: 10, adam: AdamConfig::default(), seed: 0 }
    }
}

/// Trained parameters, EMA reference and loss hyperparameters.
#[derive(Clone, Debug)]
pub struct CoPOState<T> {
    pub net: FlowNet,
    pub theta: ParamStore<T>,
    pub reference: ParamStore<T>,
    pub beta: f64,
    pub lambda: f64,
    pub ema_decay: f64,
}

impl<T: Scalar> CoPOState<T> {
    /// Starts with the reference equal to the current parameters.
    pub fn new(model: &FlowModel<T>, cfg: &CopoConfig) -> Result<Self> {
        if !(cfg.beta > 0.0 && cfg.lambda > 0.0) {
            return Err(Error::Config("beta and lambda must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} is outside [0, 1]", cfg.ema_decay)));
        }
        Ok(Self {
            net: model.net.clone(),
            theta: model.params.clone(),
            reference: model.params.clone(),
            beta: cfg.beta,
            lambda: cfg.lambda,
            ema_decay: cfg.ema_decay,
        })
    }

    pub fn model(&self) -> FlowModel<T> {
        FlowModel { net: self.net.clone(), params: self.theta.clone() }
    }
}

/// A preference pair converted to model precision with its conditioning.
#[derive(Clone, Debug)]
pub struct PairInput<T> {
    pub win: Matrix<T>,
    pub lose: Matrix<T>,
    pub condition: ConditionInput<T>,
    pub delta: f64,
}

impl<T: Scalar> PairInput<T> {
    pub fn new(net: &FlowNet, pair: &PreferencePair, spec: &PromptSpec) -> Result<Self> {
        let conv = |l: &SyntheticLatent| Matrix::from_f64(l.frames(), l.channels(), l.x.as_slice());
        Ok(Self { win: conv(&pair.win), lose: conv(&pair.lose), condition: net.condition_input(&spec.timeline, &spec.prompt)?, delta: pair.delta })
    }
}

/// The `(t, x_0)` draw shared by all loss evaluations of one pair.
#[derive(Clone, Debug)]
pub struct SharedDraw<T> {
    pub t: f64,
    pub x0: Matrix<T>,
}

impl<T: Scalar> SharedDraw<T> {
    pub fn sample<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let t = rng.random();
        Self { t, x0: Matrix::randn(rows, cols, rng) }
    }
}

/// `δ̂ = −(L_θ(win) − L_θ(lose)) + (L_ref(win) − L_ref(lose))` at one shared draw.
pub fn preference_signal<T: Scalar>(state: &CoPOState<T>, pair: &PairInput<T>, draw: &SharedDraw<T>) -> f64 {
    let loss = |store: &ParamStore<T>, x: &Matrix<T>| state.net.fm_loss_at(store, x, &pair.condition, draw.t, &draw.x0, false).0.as_f64();
    let theta = loss(&state.theta, &pair.win) - loss(&state.theta, &pair.lose);
    let reference = loss(&state.reference, &pair.win) - loss(&state.reference, &pair.lose);
    -theta + reference
}

#[derive(Clone, Debug)]
pub struct CopoLoss<T> {
    pub loss: f64,
    /// `(δ − β·δ̂)²`
    pub preference: f64,
    /// `L_θ(win)`
    pub reconstruction: f64,
    pub delta_hat: f64,
    pub grads: Vec<Matrix<T>>,
}

/// `L = (δ − β·δ̂)² + λ·L_θ(win)` with gradients for the trained
/// parameters only; `δ` and the reference are constants.
pub fn copo_loss<T: Scalar>(state: &CoPOState<T>, pair: &PairInput<T>, draw: &SharedDraw<T>) -> Result<CopoLoss<T>> {
    if !pair.delta.is_finite() {
        return Err(Error::NonFiniteLoss { context: "preference intensity".into() });
    }
    let at = |store: &ParamStore<T>, x: &Matrix<T>, grad: bool| state.net.fm_loss_at(store, x, &pair.condition, draw.t, &draw.x0, grad);
    let (lw, gw) = at(&state.theta, &pair.win, true);
    let (ll, gl) = at(&state.theta, &pair.lose, true);
    let (rw, _) = at(&state.reference, &pair.win, false);
    let (rl, _) = at(&state.reference, &pair.lose, false);
    let (lw, ll, rw, rl) = (lw.as_f64(), ll.as_f64(), rw.as_f64(), rl.as_f64());
    let delta_hat = -(lw - ll) + (rw - rl);
    let residual = pair.delta - state.beta * delta_hat;
    let preference = residual * residual;
    let loss = preference + state.lambda * lw;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { context: "preference loss".into() });
    }
    let cw = T::of(2.0 * state.beta * residual + state.lambda);
    let cl = T::of(-2.0 * state.beta * residual);
    let grads = gw
        .expect("gradients requested")
        .iter()
        .zip(gl.expect("gradients requested"))
        .map(|(w, l)| w.zip_map(&l, |a, b| cw * a + cl * b))
        .collect();
    Ok(CopoLoss { loss, preference, reconstruction: lw, delta_hat, grads })
}

/// `θ_ref ← d·θ_ref + (1 − d)·θ`
pub fn refresh_reference<T: Scalar>(state: &mut CoPOState<T>) {
    let decay = T::of(state.ema_decay);
    state.reference.ema_toward(&state.theta, decay);
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CopoReport {
    pub losses: Vec<f64>,
    pub preference_terms: Vec<f64>,
}

/// Adam on minibatches of pairs with a fresh shared draw per pair and step,
/// followed by an EMA refresh of the reference after every step.
pub fn copo_train<T: Scalar>(state: &mut CoPOState<T>, pairs: &[PairInput<T>], cfg: &CopoConfig) -> Result<CopoReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Adam::new(cfg.adam.clone(), &state.theta);
    let batch = cfg.batch_size.clamp(1, pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, &[30]);
    let mut cursor = pairs.len();
    let mut report = CopoReport::default();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let snapshot = &*state;
        let results: Vec<Result<CopoLoss<T>>> = idx
            .par_iter()
            .map(|&i| {
                let p = &pairs[i];
                let draw = SharedDraw::sample(p.win.rows(), p.win.cols(), &mut stream_rng(cfg.seed, &[31, step as u64, i as u64]));
                copo_loss(snapshot, p, &draw)
            })
            .collect();
        let scale = T::of(1.0 / batch as f64);
        let mut total: Option<Vec<Matrix<T>>> = None;
        let (mut loss, mut pref) = (0.0, 0.0);
        for r in results {
            let r = r.map_err(|e| match e {
                Error::NonFiniteLoss { context } => Error::NonFiniteLoss { context: format!("{context} at step {step}") },
                other => other,
            })?;
            loss += r.loss / batch as f64;
            pref += r.preference / batch as f64;
            match &mut total {
                None => total = Some(r.grads.iter().map(|g| g.scale(scale)).collect()),
                Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| a.axpy(scale, g)),
            }
        }
        opt.step(&mut state.theta, &total.expect("non-empty batch"));
        refresh_reference(state);
        report.losses.push(loss);
        report.preference_terms.push(pref);
    }
    Ok(report)
}

/// Mean `(δ − β·δ̂)²` over pairs with `draws` fixed shared draws per pair.
pub fn mean_preference_error<T: Scalar>(state: &CoPOState<T>, pairs: &[PairInput<T>], draws: usize, seed: u64) -> f64 {
    let per_pair: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(seed, &[32, i as u64]);
            (0..draws)
                .map(|_| {
                    let d = SharedDraw::sample(p.win.rows(), p.win.cols(), &mut rng);
                    let r = p.delta - state.beta * preference_signal(state, p, &d);
                    r * r
                })
                .sum::<f64>()
                / draws as f64
        })
        .collect();
    per_pair.iter().sum::<f64>() / per_pair.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{synth_target, FlowConfig};
    use crate::params::init_rng;
    use crate::timeline::EventSpec;

    fn setup() -> (CoPOState<f64>, PairInput<f64>, ClassSignatureBank) {
        let cfg = FlowConfig { d_model: 8, encoder_layers: 1, heads: 2, max_events: 2, frames: 4, latent_frames: 8, channels: 4, text_tokens: 4, blocks: 1, seed: 1 };
        let model = FlowModel::<f64>::new(cfg).unwrap();
        let bank = ClassSignatureBank::new(1, 4, &["dog", "cat"]);
        let tl = Timeline::new(10.0, vec![EventSpec::new("dog", 1.0, 6.0, 1.0)]).unwrap();
        let spec = PromptSpec { id: "p".into(), timeline: tl.clone(), prompt: "dog".into() };
        let win = synth_target(&tl, &bank, 8, 0.0, &mut init_rng(0));
        let lose = SyntheticLatent { x: Matrix::zeros(8, 4), clip_duration: 10.0 };
        let pair = PreferencePair {
            prompt_id: "p".into(),
            win_ref: "a/p".into(),
            lose_ref: "b/p".into(),
            win,
            lose,
            delta: 0.3,
            rewards_win: RewardVector { r_text: 1.0, r_event: 1.0, r_temporal: 1.0, r_audio: 1.0 },
            rewards_lose: RewardVector { r_text: 0.0, r_event: 0.0, r_temporal: 0.0, r_audio: 0.0 },
        };
        let state = CoPOState::new(&model, &CopoConfig::default()).unwrap();
        let input = PairInput::new(&state.net, &pair, &spec).unwrap();
        (state, input, bank)
    }

    #[test]
    fn identical_models_have_zero_preference_signal() {
        let (state, pair, _) = setup();
        let draw = SharedDraw::sample(8, 4, &mut init_rng(3));
        assert_eq!(preference_signal(&state, &pair, &draw), 0.0);
        let l = copo_loss(&state, &pair, &draw).unwrap();
        assert_eq!(l.preference, 0.3 * 0.3);
    }

    #[test]
    fn identical_sides_have_zero_preference_signal() {
        let (mut state, mut pair, _) = setup();
        state.theta.tensors_mut()[0].fill(0.01);
        pair.lose = pair.win.clone();
        let draw = SharedDraw::sample(8, 4, &mut init_rng(3));
        assert_eq!(preference_signal(&state, &pair, &draw), 0.0);
    }

    #[test]
    fn ema_limits() {
        let (mut state, _, _) = setup();
        state.theta.tensors_mut()[0].fill(2.0);
        let before = state.reference.clone();
        state.ema_decay = 1.0;
        refresh_reference(&mut state);
        assert_eq!(state.reference.tensors(), before.tensors());
        state.ema_decay = 0.0;
        refresh_reference(&mut state);
        assert_eq!(state.reference.tensors(), state.theta.tensors());
    }

    #[test]
    fn reward_examples() {
        let bank = ClassSignatureBank::new(1, 16, &["dog", "cat", "car"]);
        let tl = Timeline::new(10.0, vec![EventSpec::new("dog", 1.0, 4.0, 1.0), EventSpec::new("cat", 5.0, 9.0, 1.0)]).unwrap();
        let exact = synth_target(&tl, &bank, 64, 0.0, &mut init_rng(0));
        let r = compute_rewards(&exact, &tl, "dog and cat", &bank, &RewardConfig::default());
        assert_eq!(r.r_event, 1.0);
        assert!(r.r_temporal >= 0.95, "{r:?}");
        let zero = SyntheticLatent { x: Matrix::zeros(64, 16), clip_duration: 10.0 };
        let z = compute_rewards(&zero, &tl, "dog and cat", &bank, &RewardConfig::default());
        assert_eq!(z.r_event, 0.0);
        let ones = RewardVector { r_text: 1.0, r_event: 1.0, r_temporal: 1.0, r_audio: 1.0 };
        assert!((ones.overall(&DEFAULT_WEIGHTS) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_candidates_are_reported() {
        let (_, _, bank) = setup();
        let tl = Timeline::new(10.0, vec![EventSpec::new("dog", 1.0, 6.0, 1.0)]).unwrap();
        let prompts = vec![PromptSpec { id: "p".into(), timeline: tl, prompt: "dog".into() }];
        let sources = vec![CandidateSource { name: "a".into(), latents: BTreeMap::new() }];
        assert!(matches!(build_pairs(&prompts, &sources, &bank, &RewardConfig::default()), Err(Error::MissingCandidate { .. })));
    }
}
