#![allow(dead_code)]

use eventflow::flow::FlowConfig;
use eventflow::params::ParamStore;
use eventflow::timeline::{EventSpec, Timeline};
use eventflow::Matrix;
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_matrix(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// Central differences of `f` with respect to every parameter.
pub fn fd_params(store: &ParamStore<f64>, f: impl Fn(&ParamStore<f64>) -> f64) -> Vec<Matrix<f64>> {
    let mut probe = store.clone();
    let mut grads = Vec::with_capacity(store.len());
    for t in 0..store.len() {
        let (r, c) = store.tensors()[t].shape();
        let mut g = Matrix::zeros(r, c);
        for k in 0..r * c {
            let orig = probe.tensors()[t].as_slice()[k];
            probe.tensors_mut()[t].as_mut_slice()[k] = orig + FD_STEP;
            let up = f(&probe);
            probe.tensors_mut()[t].as_mut_slice()[k] = orig - FD_STEP;
            let down = f(&probe);
            probe.tensors_mut()[t].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (up - down) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

/// Norm-relative error. Gradients with norm below `1e-3` are compared on
/// that floor so vanishing tensors do not divide finite-difference noise by
/// zero.
pub fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let diff = a.sub(b).norm();
    diff / a.norm().max(b.norm()).max(1e-3)
}

pub fn max_rel_err(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Random projection weights for turning a matrix output into a scalar.
pub fn projection(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn grad_flow_config(d_model: usize, seed: u64) -> FlowConfig {
    FlowConfig {
        d_model,
        encoder_layers: 1,
        heads: 2,
        max_events: 3,
        frames: 4,
        latent_frames: 6,
        channels: 4,
        text_tokens: 4,
        blocks: 1,
        seed,
    }
}

/// Timeline with up to `max_events` events. Times sit on a coarse grid half
/// the time so that touching, nested and identical intervals show up.
pub fn random_timeline(rng: &mut impl Rng, max_events: usize, labels: &[&str], clip: f64) -> Timeline {
    let n = rng.random_range(1..=max_events);
    let events = (0..n)
        .map(|_| {
            let (a, b) = if rng.random_bool(0.5) {
                let steps = 20;
                let a = rng.random_range(0..steps);
                let b = rng.random_range(a + 1..=steps);
                (clip * (a as f64 / steps as f64), clip * (b as f64 / steps as f64))
            } else {
                let a = rng.random_range(0.0..clip * 0.95);
                (a, rng.random_range(a + 1e-3..=clip))
            };
            let label = labels[rng.random_range(0..labels.len())];
            EventSpec::new(label, a, b, rng.random_range(0.0..=1.0))
        })
        .collect();
    Timeline::new(clip, events).expect("generated timeline is valid")
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}
