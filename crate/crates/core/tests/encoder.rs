mod common;

use eventflow::autodiff::Graph;
use eventflow::encoder::{DegEncoder, EncoderConfig, GraphInput};
use eventflow::params::{init_rng, ParamStore};
use eventflow::timeline::{frame_activation, relation_tensor, Timeline};
use eventflow::Matrix;
use proptest::prelude::*;
use rand::Rng;

use common::*;

const LABELS: [&str; 5] = ["dog bark", "cat", "heavy rain", "siren", "door slam"];

fn setup(cfg: EncoderConfig, seed: u64, clip: f64) -> (DegEncoder, ParamStore<f64>, Timeline, GraphInput<f64>) {
    let (enc, store) = DegEncoder::init::<f64>(cfg.clone()).unwrap();
    let tl = random_timeline(&mut init_rng(seed), cfg.max_events.min(3), &LABELS, clip);
    let input = enc.graph_input(&tl, &frame_activation(&tl, cfg.frames), &relation_tensor(&tl)).unwrap();
    (enc, store, tl, input)
}

fn projected(enc: &DegEncoder, store: &ParamStore<f64>, input: &GraphInput<f64>, w: &Matrix<f64>) -> f64 {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (_, out) = enc.forward(&mut g, &p, input, false);
    let wv = g.constant(w.clone());
    let s = g.mul(out.h, wv);
    let s = g.sum(s);
    g.scalar_value(s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn parameter_gradients_match_finite_differences(d in prop_oneof![Just(4usize), Just(8)], seed in any::<u64>()) {
        let cfg = EncoderConfig { d_model: d, layers: 1, heads: 2, max_events: 3, frames: 4, seed };
        let (enc, store, _, input) = setup(cfg, seed, 6.0);
        let w = projection(3, d, &mut init_rng(seed ^ 1));
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let (_, out) = enc.forward(&mut g, &p, &input, false);
        let wv = g.constant(w.clone());
        let s = g.mul(out.h, wv);
        let s = g.sum(s);
        let mut grads = g.backward(s);
        let analytic = store.collect_grads(&p, &mut grads);
        let numeric = fd_params(&store, |s| projected(&enc, s, &input, &w));
        let err = max_rel_err(&analytic, &numeric);
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn padding_content_never_reaches_real_rows(seed in any::<u64>(), fill in -5.0f64..5.0) {
        let cfg = EncoderConfig { d_model: 8, layers: 2, heads: 2, max_events: 6, frames: 8, seed };
        let (enc, store, tl, clean) = setup(cfg, seed, 10.0);
        let n = tl.len();
        let mut rng = init_rng(seed);
        let mut noisy = clean.clone();
        for i in n..6 {
            noisy.type_tokens.row_mut(i).iter_mut().for_each(|v| *v = fill + rng.random::<f64>());
            noisy.times.set(i, 0, fill.abs());
            noisy.times.set(i, 1, fill.abs() + 1.0);
            noisy.intensities.set(i, 0, rng.random());
            noisy.frames.row_mut(i).iter_mut().for_each(|v| *v = rng.random());
        }
        for k in 0..36 {
            if k / 6 >= n || k % 6 >= n {
                noisy.relations.row_mut(k).iter_mut().for_each(|v| *v = rng.random());
            }
        }
        let (a, b) = (enc.encode(&store, &clean).h, enc.encode(&store, &noisy).h);
        for i in 0..6 {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                if i < n {
                    prop_assert!((x - y).abs() <= 1e-12);
                } else {
                    prop_assert!(*x == 0.0 && *y == 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>()) {
        let cfg = EncoderConfig { d_model: 8, layers: 2, heads: 4, max_events: 5, frames: 8, seed };
        let (enc, store, tl, input) = setup(cfg, seed, 10.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (_, out) = enc.forward(&mut g, &p, &input, false);
        for w in out.attention {
            let w = g.value(w);
            for i in 0..w.rows() {
                let row = w.row(i);
                prop_assert!((row[..tl.len()].iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row[tl.len()..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn encoding_is_identical_across_thread_counts() {
    let cfg = EncoderConfig { d_model: 16, layers: 2, heads: 4, max_events: 8, frames: 16, seed: 3 };
    let encode = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (enc, store) = DegEncoder::init::<f64>(cfg.clone()).unwrap();
            let tl = random_timeline(&mut init_rng(9), 8, &LABELS, 10.0);
            enc.encode_timeline(&store, &tl).unwrap().h
        })
    };
    assert_eq!(encode(1), encode(4));
}

#[test]
fn f32_encoding_tracks_f64() {
    let cfg = EncoderConfig { d_model: 8, layers: 1, heads: 2, max_events: 4, frames: 8, seed: 5 };
    let tl = random_timeline(&mut init_rng(2), 4, &LABELS, 10.0);
    let (enc, s64) = DegEncoder::init::<f64>(cfg.clone()).unwrap();
    let (_, s32) = DegEncoder::init::<f32>(cfg).unwrap();
    let h64 = enc.encode_timeline(&s64, &tl).unwrap().h;
    let h32 = enc.encode_timeline(&s32, &tl).unwrap().h;
    for (a, b) in h64.as_slice().iter().zip(h32.as_slice()) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}
