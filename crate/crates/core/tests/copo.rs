mod common;

use std::collections::BTreeMap;

use eventflow::copo::{
    build_pairs, compute_rewards, copo_loss, copo_train, mean_preference_error, preference_signal, refresh_reference, CandidateSource, CoPOState, CopoConfig,
    PairInput, PromptSpec, RewardConfig, RewardVector, SharedDraw, DEFAULT_WEIGHTS,
};
use eventflow::flow::{synth_target, ClassSignatureBank, FlowModel, SyntheticLatent};
use eventflow::optim::AdamConfig;
use eventflow::params::init_rng;
use eventflow::timeline::{EventSpec, Timeline};
use eventflow::{Error, Matrix};
use proptest::prelude::*;
use rand::Rng;

use common::*;

const LABELS: [&str; 4] = ["car horn", "dog bark", "rain", "siren"];

fn bank() -> ClassSignatureBank {
    ClassSignatureBank::new(3, 8, &LABELS)
}

fn timeline() -> Timeline {
    Timeline::new(10.0, vec![EventSpec::new("dog bark", 1.0, 3.5, 1.0), EventSpec::new("rain", 5.0, 9.0, 0.8)]).unwrap()
}

fn latent(x: Matrix<f64>) -> SyntheticLatent {
    SyntheticLatent { x, clip_duration: 10.0 }
}

fn exact_target(tl: &Timeline) -> SyntheticLatent {
    synth_target(tl, &bank(), 32, 0.0, &mut init_rng(0))
}

/// State with `theta` moved away from the reference, plus a pair and a draw.
fn fixture(seed: u64) -> (CoPOState<f64>, PairInput<f64>, SharedDraw<f64>) {
    let model = FlowModel::<f64>::new(grad_flow_config(8, seed)).unwrap();
    let mut state = CoPOState::new(&model, &CopoConfig::default()).unwrap();
    let mut rng = init_rng(seed);
    for t in state.theta.tensors_mut() {
        let noise = Matrix::randn(t.rows(), t.cols(), &mut rng);
        t.axpy(0.1, &noise);
    }
    let tl = timeline();
    let pair = PairInput {
        win: synth_target(&tl, &ClassSignatureBank::new(3, 4, &LABELS), 6, 0.0, &mut rng).x,
        lose: Matrix::randn(6, 4, &mut rng),
        condition: state.net.condition_input(&tl, "a dog barks then rain").unwrap(),
        delta: rng.random_range(0.0..1.0),
    };
    let draw = SharedDraw::sample(6, 4, &mut rng);
    (state, pair, draw)
}

fn rewards(r: [f64; 4]) -> RewardVector {
    RewardVector { r_text: r[0], r_event: r[1], r_temporal: r[2], r_audio: r[3] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rewards_are_bounded(seed in any::<u64>(), scale in prop_oneof![Just(0.0), 1e-6f64..1e-3, 0.1f64..10.0, 1e3f64..1e6], prompt in "[a-z ]{0,24}") {
        let x = Matrix::randn(32, 8, &mut init_rng(seed)).scale(scale);
        let r = compute_rewards(&latent(x), &timeline(), &prompt, &bank(), &RewardConfig::default());
        for v in r.components() {
            prop_assert!((0.0..=1.0).contains(&v), "{r:?}");
        }
        prop_assert!((0.0..=1.0).contains(&r.overall(&DEFAULT_WEIGHTS)));
    }

    #[test]
    fn raising_a_winning_component_never_lowers_delta(
        win in proptest::array::uniform4(0.0f64..=1.0),
        lose in proptest::array::uniform4(0.0f64..=1.0),
        k in 0usize..4,
        bump in 0.0f64..=1.0,
    ) {
        let mut raised = win;
        raised[k] = (raised[k] + bump).min(1.0);
        let lose = rewards(lose).overall(&DEFAULT_WEIGHTS);
        prop_assert!(rewards(raised).overall(&DEFAULT_WEIGHTS) - lose >= rewards(win).overall(&DEFAULT_WEIGHTS) - lose);
    }

    #[test]
    fn equal_models_reduce_the_preference_term_to_delta_squared(seed in any::<u64>()) {
        let (mut state, pair, draw) = fixture(seed);
        state.reference = state.theta.clone();
        prop_assert_eq!(preference_signal(&state, &pair, &draw), 0.0);
        let l = copo_loss(&state, &pair, &draw).unwrap();
        prop_assert_eq!(l.preference, pair.delta * pair.delta);
    }

    #[test]
    fn identical_sides_cancel_under_the_shared_draw(seed in any::<u64>()) {
        let (state, mut pair, draw) = fixture(seed);
        pair.lose = pair.win.clone();
        prop_assert_eq!(preference_signal(&state, &pair, &draw), 0.0);
    }
}

#[test]
fn improving_only_the_winner_gives_a_positive_signal() {
    for seed in 0..5 {
        let (mut state, pair, draw) = fixture(seed);
        state.reference = state.theta.clone();
        let grad = |x: &Matrix<f64>| state.net.fm_loss_at(&state.theta, x, &pair.condition, draw.t, &draw.x0, true).1.unwrap();
        let (gw, gl) = (grad(&pair.win), grad(&pair.lose));
        // Remove the component along the loser's gradient so the loser's
        // loss is unchanged to first order.
        let dot: f64 = gw.iter().zip(&gl).map(|(a, b)| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>()).sum();
        let norm: f64 = gl.iter().map(|g| g.sum_squares()).sum();
        let mut next = state.clone();
        for ((t, a), b) in next.theta.tensors_mut().iter_mut().zip(&gw).zip(&gl) {
            let mut step = a.clone();
            step.axpy(-dot / norm, b);
            t.axpy(-1e-3, &step);
        }
        let loss = |s: &CoPOState<f64>, x: &Matrix<f64>| s.net.fm_loss_at(&s.theta, x, &pair.condition, draw.t, &draw.x0, false).0;
        assert!(loss(&next, &pair.win) < loss(&state, &pair.win));
        assert!(preference_signal(&next, &pair, &draw) > 0.0, "seed {seed}");
    }
}

#[test]
fn zero_beta_leaves_only_delta_squared_and_reconstruction() {
    let (mut state, pair, draw) = fixture(11);
    state.beta = 0.0;
    let l = copo_loss(&state, &pair, &draw).unwrap();
    let (lw, _) = state.net.fm_loss_at(&state.theta, &pair.win, &pair.condition, draw.t, &draw.x0, false);
    assert_eq!(l.preference, pair.delta * pair.delta);
    assert_eq!(l.loss, pair.delta * pair.delta + state.lambda * lw);
}

#[test]
fn matched_sides_and_zero_delta_leave_only_reconstruction() {
    let (mut state, mut pair, draw) = fixture(12);
    state.reference = state.theta.clone();
    pair.lose = pair.win.clone();
    pair.delta = 0.0;
    let l = copo_loss(&state, &pair, &draw).unwrap();
    assert_eq!(l.loss, state.lambda * l.reconstruction);
}

#[test]
fn non_finite_delta_is_rejected() {
    let (state, mut pair, draw) = fixture(13);
    pair.delta = f64::NAN;
    assert!(matches!(copo_loss(&state, &pair, &draw), Err(Error::NonFiniteLoss { .. })));
}

#[test]
fn reference_contracts_geometrically_toward_a_fixed_theta() {
    let (mut state, _, _) = fixture(14);
    state.ema_decay = 0.9;
    let start = state.reference.distance(&state.theta);
    for k in 1..=20 {
        refresh_reference(&mut state);
        let expected = start * 0.9f64.powi(k);
        let got = state.reference.distance(&state.theta);
        assert!((got - expected).abs() <= 1e-10 * start, "step {k}: {got} vs {expected}");
    }
}

#[test]
fn training_lowers_the_preference_error() {
    let model = FlowModel::<f64>::new(grad_flow_config(8, 21)).unwrap();
    let bank = ClassSignatureBank::new(21, 4, &LABELS);
    let mut rng = init_rng(21);
    let pairs: Vec<PairInput<f64>> = (0..6)
        .map(|i| {
            let tl = random_timeline(&mut rng, 3, &LABELS, 10.0);
            PairInput {
                win: synth_target(&tl, &bank, 6, 0.0, &mut rng).x,
                lose: Matrix::randn(6, 4, &mut rng).scale(0.5),
                condition: model.condition_input(&tl, &format!("prompt {i}")).unwrap(),
                delta: 0.3,
            }
        })
        .collect();
    let cfg = CopoConfig { steps: 40, batch_size: 3, adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() }, seed: 21, ..CopoConfig::default() };
    let mut state = CoPOState::new(&model, &cfg).unwrap();
    let before = mean_preference_error(&state, &pairs, 4, 0);
    let report = copo_train(&mut state, &pairs, &cfg).unwrap();
    let after = mean_preference_error(&state, &pairs, 4, 0);
    assert_eq!(report.losses.len(), 40);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let model = FlowModel::<f64>::new(grad_flow_config(8, 0)).unwrap();
    for cfg in [
        CopoConfig { beta: 0.0, ..CopoConfig::default() },
        CopoConfig { lambda: -1.0, ..CopoConfig::default() },
        CopoConfig { ema_decay: 1.5, ..CopoConfig::default() },
    ] {
        assert!(CoPOState::new(&model, &cfg).is_err());
    }
}

fn source(name: &str, id: &str, l: SyntheticLatent) -> CandidateSource {
    CandidateSource { name: name.into(), latents: BTreeMap::from([(id.to_string(), l)]) }
}

#[test]
fn three_distinct_candidates_give_three_oriented_pairs() {
    let tl = timeline();
    let prompts = [PromptSpec { id: "p0".into(), timeline: tl.clone(), prompt: "a dog barks then rain".into() }];
    let shifted = Timeline::new(10.0, vec![EventSpec::new("dog bark", 6.0, 8.5, 1.0)]).unwrap();
    let sources = [
        source("exact", "p0", exact_target(&tl)),
        source("zeros", "p0", latent(Matrix::zeros(32, 8))),
        source("shifted", "p0", exact_target(&shifted)),
    ];
    let pairs = build_pairs(&prompts, &sources, &bank(), &RewardConfig::default()).unwrap();
    assert_eq!(pairs.len(), 3);
    for p in &pairs {
        assert!(p.delta > 0.0);
        assert_eq!(p.delta, p.rewards_win.overall(&DEFAULT_WEIGHTS) - p.rewards_lose.overall(&DEFAULT_WEIGHTS));
        assert_ne!(p.lose_ref, "exact/p0");
    }
    assert_eq!(pairs.iter().filter(|p| p.win_ref == "exact/p0").count(), 2);
}

#[test]
fn ties_produce_no_pair() {
    let tl = timeline();
    let prompts = [PromptSpec { id: "p0".into(), timeline: tl.clone(), prompt: "rain".into() }];
    let sources = [source("a", "p0", exact_target(&tl)), source("b", "p0", exact_target(&tl))];
    assert!(build_pairs(&prompts, &sources, &bank(), &RewardConfig::default()).unwrap().is_empty());
}

#[test]
fn exact_target_wins_every_pair_it_is_in() {
    let mut rng = init_rng(5);
    // Events quieter than the detection threshold are invisible even in the
    // exact target, so intensities stay above it.
    let audible = |rng: &mut rand_chacha::ChaCha8Rng| {
        let tl = random_timeline(rng, 3, &LABELS, 10.0);
        let events = tl.events().iter().map(|e| EventSpec::new(e.category.clone(), e.onset, e.offset, rng.random_range(0.6..=1.0))).collect();
        Timeline::new(10.0, events).unwrap()
    };
    for case in 0..20 {
        let tl = audible(&mut rng);
        let id = format!("p{case}");
        let prompts = [PromptSpec { id: id.clone(), timeline: tl.clone(), prompt: tl.labels().join(" and ") }];
        let other = audible(&mut rng);
        let sources = [
            source("exact", &id, exact_target(&tl)),
            source("noise", &id, latent(Matrix::randn(32, 8, &mut rng))),
            source("zeros", &id, latent(Matrix::zeros(32, 8))),
            source("other", &id, exact_target(&other)),
        ];
        for p in build_pairs(&prompts, &sources, &bank(), &RewardConfig::default()).unwrap() {
            assert_ne!(p.lose_ref, format!("exact/{id}"), "case {case}: {p:?}");
        }
    }
}

#[test]
fn missing_candidates_name_prompt_and_source() {
    let tl = timeline();
    let prompts = [PromptSpec { id: "p0".into(), timeline: tl.clone(), prompt: "rain".into() }, PromptSpec { id: "p1".into(), timeline: tl.clone(), prompt: "rain".into() }];
    let sources = [source("a", "p0", exact_target(&tl))];
    match build_pairs(&prompts, &sources, &bank(), &RewardConfig::default()) {
        Err(Error::MissingCandidate { prompt_id, source_name }) => assert_eq!((prompt_id.as_str(), source_name.as_str()), ("p1", "a")),
        other => panic!("expected a missing candidate, got {other:?}"),
    }
}
