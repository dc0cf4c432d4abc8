mod common;

use eventflow::params::init_rng;
use eventflow::timeline::{frame_activation, relation_tensor, validate_timeline, EventSpec, RawTimeline, Relation, Violation};
use proptest::prelude::*;

use common::random_timeline;

const LABELS: [&str; 4] = ["dog", "cat", "rain", "siren"];

proptest! {
    #[test]
    fn rows_integrate_to_event_duration(seed in any::<u64>(), frames in 1usize..48, clip in 0.5f64..40.0) {
        let tl = random_timeline(&mut init_rng(seed), 12, &LABELS, clip);
        let fa = frame_activation(&tl, frames);
        for (i, ev) in tl.events().iter().enumerate() {
            let covered: f64 = fa.row(i).iter().sum::<f64>() * fa.frame_width();
            prop_assert!((covered - ev.duration()).abs() <= 1e-9, "event {i}: {covered} vs {}", ev.duration());
            prop_assert!(fa.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn relations_are_antisymmetric_and_exclusive(seed in any::<u64>(), clip in 0.5f64..40.0) {
        let tl = random_timeline(&mut init_rng(seed), 12, &LABELS, clip);
        let rt = relation_tensor(&tl);
        for i in 0..tl.len() {
            prop_assert!(rt.slice(i, i).iter().all(|&v| v == 0.0));
            for j in 0..tl.len() {
                prop_assert_eq!(rt.get(i, j, Relation::Before), rt.get(j, i, Relation::After));
                prop_assert_eq!(rt.get(i, j, Relation::Contains), rt.get(j, i, Relation::ContainedBy));
                prop_assert_eq!(rt.get(i, j, Relation::Overlaps), rt.get(j, i, Relation::Overlaps));
                let active = rt.slice(i, j).iter().filter(|&&v| v != 0.0).count();
                prop_assert!(active <= 1);
                prop_assert!(rt.slice(i, j).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn validation_accepts_exactly_the_valid_timelines(
        clip in prop_oneof![Just(0.0), Just(-1.0), 1.0f64..20.0],
        events in proptest::collection::vec(
            (prop_oneof![Just(""), Just("dog"), Just("  ")], -2.0f64..22.0, -2.0f64..22.0, -0.5f64..1.5),
            0..6,
        ),
    ) {
        let raw = RawTimeline {
            clip_duration: clip,
            events: events.iter().map(|&(c, s, e, a)| EventSpec::new(c, s, e, a)).collect(),
        };
        let valid = clip > 0.0
            && !events.is_empty()
            && events.len() <= 4
            && events.iter().all(|&(c, s, e, a)| !c.trim().is_empty() && s >= 0.0 && s < e && e <= clip && (0.0..=1.0).contains(&a));
        match validate_timeline(&raw, 4) {
            Ok(tl) => {
                prop_assert!(valid);
                prop_assert_eq!(tl.events(), &raw.events[..]);
            }
            Err(err) => {
                prop_assert!(!valid);
                prop_assert!(!err.violations.is_empty());
            }
        }
    }
}

#[test]
fn every_bad_field_is_reported_with_its_index() {
    let raw = RawTimeline {
        clip_duration: 10.0,
        events: vec![EventSpec::new("dog", 1.0, 2.0, 1.0), EventSpec::new("", 3.0, 2.0, 1.5), EventSpec::new("cat", -1.0, 12.0, 0.5)],
    };
    let err = validate_timeline(&raw, 16).unwrap_err();
    assert_eq!(
        err.violations,
        vec![
            Violation::EmptyLabel { index: 1 },
            Violation::OnsetAfterOffset { index: 1, onset: 3.0, offset: 2.0 },
            Violation::IntensityOutOfRange { index: 1, intensity: 1.5 },
            Violation::NegativeOnset { index: 2, onset: -1.0 },
            Violation::OffsetPastClipEnd { index: 2, offset: 12.0, clip_duration: 10.0 },
        ]
    );
}

