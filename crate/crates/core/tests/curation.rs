mod common;

use std::collections::BTreeSet;

use eventflow::annotation::{AnnotatedEvent, AnnotationRecord};
use eventflow::corpus::{synthesize_corpus, CorpusConfig};
use eventflow::curation::{build_frequency_table, curate, quality_score, CurationConfig, Quotas, Stratum, Thresholds, RARE_MIN_SCORE};
use eventflow::params::init_rng;
use proptest::prelude::*;
use rand::Rng;

use common::random_timeline;

fn random_corpus(seed: u64, n: usize, labels: usize) -> Vec<AnnotationRecord> {
    let names: Vec<String> = (0..labels).map(|i| format!("label{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut rng = init_rng(seed);
    (0..n)
        .map(|i| {
            // Skew the label distribution so rare and common labels exist.
            let k = (rng.random::<f64>().powi(3) * labels as f64) as usize;
            let tl = random_timeline(&mut rng, 8, &refs[..=k.min(labels - 1)], 10.0);
            AnnotationRecord::from_timeline(format!("r{i:04}"), "", &tl)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn score_total_is_the_sum_of_its_parts(seed in any::<u64>()) {
        let tl = random_timeline(&mut init_rng(seed), 10, &["a", "b", "c", "speech", "music"], 10.0);
        let q = quality_score(&tl);
        let parts: f64 = q.breakdown.iter().map(|(_, v)| v).sum();
        prop_assert_eq!(parts, q.total);
        prop_assert_eq!(quality_score(&tl), q);
    }

    #[test]
    fn frequencies_form_a_distribution(seed in any::<u64>(), adaptive in any::<bool>()) {
        let corpus = random_corpus(seed, 120, 20);
        let f = build_frequency_table(&corpus, Thresholds { adaptive, ..Thresholds::default() }).unwrap();
        prop_assert!((f.frequencies.values().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(f.rare.is_disjoint(&f.common));
    }

    #[test]
    fn selection_is_a_threshold_respecting_partition(seed in any::<u64>(), n_target in 8usize..80, backfill in any::<bool>()) {
        let corpus = random_corpus(seed, 200, 25);
        let cfg = CurationConfig { n_target, q_min: 15.0, backfill, thresholds: Thresholds { adaptive: true, ..Thresholds::default() }, seed, ..CurationConfig::default() };
        let out = curate(&corpus, &cfg).unwrap();
        let d = &out.dataset;
        let ids: BTreeSet<&str> = d.selected.iter().map(|s| s.id.as_str()).collect();
        prop_assert_eq!(ids.len(), d.selected.len());
        prop_assert!(d.selected.len() <= n_target);
        for s in &d.selected {
            let floor = match s.stratum {
                Stratum::Rare => RARE_MIN_SCORE,
                Stratum::Common => 15.0,
                Stratum::Medium => 12.0,
            };
            prop_assert!(s.quality_score >= floor, "{} in {:?} scored {}", s.id, s.stratum, s.quality_score);
        }
        if !backfill {
            for st in Stratum::ALL {
                let i = st as usize;
                prop_assert_eq!(d.count(st), d.quotas[i].min(d.eligible[i]));
            }
        }
        prop_assert_eq!(&curate(&corpus, &cfg).unwrap().dataset, d);
    }

    #[test]
    fn quotas_always_sum_to_the_target(n in 4usize..5000) {
        let [r, c, m] = Quotas::default().sizes(n);
        prop_assert_eq!(r + c + m, n);
        prop_assert_eq!(r, n / 4);
        prop_assert_eq!(m, n / 4);
    }
}

#[test]
fn shortfalls_are_backfilled_from_medium_then_common() {
    let rec = |id: usize, labels: &[&str]| AnnotationRecord {
        id: format!("r{id:03}"),
        duration: 10.0,
        caption: String::new(),
        events: labels
            .iter()
            .enumerate()
            .map(|(k, l)| AnnotatedEvent { label: l.to_string(), onset: 2.0 * k as f64, offset: 2.0 * k as f64 + 1.5, intensity: 1.0 })
            .collect(),
    };
    // Three labels with equal frequency: nothing is rare.
    let corpus: Vec<AnnotationRecord> = (0..40).map(|i| rec(i, &["a", "b", "c"])).collect();
    let cfg = CurationConfig { n_target: 20, thresholds: Thresholds { tau_rare: 0.01, tau_common: 0.2, adaptive: false }, ..CurationConfig::default() };
    let d = curate(&corpus, &cfg).unwrap().dataset;
    assert_eq!(d.eligible, [0, 40, 0]);
    assert_eq!(d.shortfalls, [5, 0, 5]);
    assert_eq!(d.backfilled, 10);
    assert_eq!(d.selected.len(), 20);
    assert!(d.selected.iter().all(|s| s.stratum == Stratum::Common));
    let no_fill = curate(&corpus, &CurationConfig { backfill: false, ..cfg }).unwrap().dataset;
    assert_eq!(no_fill.selected.len(), 10);
}

#[test]
fn synthetic_corpus_curates_deterministically() {
    let corpus = synthesize_corpus(&CorpusConfig { clips: 300, seed: 4, ..CorpusConfig::default() });
    let cfg = CurationConfig { n_target: 100, thresholds: Thresholds { adaptive: true, ..Thresholds::default() }, seed: 4, ..CurationConfig::default() };
    let a = curate(&corpus, &cfg).unwrap();
    let b = curate(&corpus, &cfg).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.summary, b.summary);
    let reseeded = curate(&corpus, &CurationConfig { seed: 5, ..cfg }).unwrap();
    assert_eq!(reseeded.dataset.count(Stratum::Rare), a.dataset.count(Stratum::Rare));
}
