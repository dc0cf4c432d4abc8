//! Seeded synthetic annotation corpora.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedEvent, AnnotationRecord};
use crate::params::stream_rng;

const WORDS: [&str; 24] = [
    "alarm", "bark", "bell", "chirp", "clap", "cough", "drum", "engine", "flute", "glass", "horn", "knock", "laugh",
    "meow", "piano", "rain", "siren", "speech", "splash", "thunder", "typing", "whistle", "wind", "music",
];

/// `n` distinct single-token class labels.
pub fn class_labels(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| if i < WORDS.len() { WORDS[i].to_string() } else { format!("sound{i}") })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub clips: usize,
    pub classes: usize,
    pub max_events: usize,
    pub clip_duration: f64,
    pub min_event: f64,
    pub max_event: f64,
    pub min_intensity: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clips: 200,
            classes: 12,
            max_events: 4,
            clip_duration: 10.0,
            min_event: 0.5,
            max_event: 4.0,
            min_intensity: 0.7,
            seed: 0,
        }
    }
}

/// Caption listing the distinct labels in order of first appearance.
pub fn caption_for(events: &[AnnotatedEvent]) -> String {
    let mut seen: Vec<&str> = Vec::new();
    for e in events {
        if !seen.contains(&e.label.as_str()) {
            seen.push(&e.label);
        }
    }
    seen.join(" and ")
}

/// Clips with `1..=max_events` events of uniformly drawn class, duration,
/// position and intensity. Event times are rounded to milliseconds.
pub fn synthesize_corpus(cfg: &CorpusConfig) -> Vec<AnnotationRecord> {
    let labels = class_labels(cfg.classes);
    let round = |v: f64| (v * 1000.0).round() / 1000.0;
    (0..cfg.clips)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, &[10, i as u64]);
            let n = rng.random_range(1..=cfg.max_events.max(1));
            let mut events: Vec<AnnotatedEvent> = (0..n)
                .map(|_| {
                    let label = labels[rng.random_range(0..labels.len())].clone();
                    let dur = rng.random_range(cfg.min_event..=cfg.max_event.min(cfg.clip_duration));
                    let onset = round(rng.random_range(0.0..=(cfg.clip_duration - dur)));
                    let offset = round(onset + dur).min(cfg.clip_duration);
                    let intensity = round(rng.random_range(cfg.min_intensity..=1.0));
                    AnnotatedEvent { label, onset, offset, intensity }
                })
                .collect();
            events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
            AnnotationRecord { id: format!("clip{i:05}"), duration: cfg.clip_duration, caption: caption_for(&events), events }
        })
        .collect()
}
