//! Event-level and clip-level F1 with onset/offset collars.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::detect::DetectedEvent;
use crate::timeline::Timeline;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollarConfig {
    /// Onset tolerance in seconds; also the floor of the offset tolerance.
    pub collar: f64,
    /// Offset tolerance as a fraction of the reference duration.
    pub offset_fraction: f64,
}

impl Default for CollarConfig {
    fn default() -> Self {
        Self { collar: 0.2, offset_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

impl ClassStats {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, fn_, precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub f1_event: f64,
    pub f1_clip: f64,
    pub per_class: BTreeMap<String, ClassStats>,
    pub collar: CollarConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Segment {
    onset: f64,
    offset: f64,
}

impl Segment {
    fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Intersection over union of two intervals.
pub fn segment_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// Ground-truth segments per class with overlapping or touching same-class
/// events merged.
fn merged_reference(gt: &Timeline) -> BTreeMap<String, Vec<Segment>> {
    let mut by_class: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for ev in gt.events() {
        by_class.entry(ev.category.clone()).or_default().push(Segment { onset: ev.onset, offset: ev.offset });
    }
    for segs in by_class.values_mut() {
        segs.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        let mut merged: Vec<Segment> = Vec::with_capacity(segs.len());
        for s in segs.drain(..) {
            match merged.last_mut() {
                Some(last) if s.onset <= last.offset => last.offset = last.offset.max(s.offset),
                _ => merged.push(s),
            }
        }
        *segs = merged;
    }
    by_class
}

fn detections_by_class(dets: &[DetectedEvent]) -> BTreeMap<String, Vec<Segment>> {
    let mut by_class: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.category.clone()).or_default().push(Segment { onset: d.onset, offset: d.offset });
    }
    by_class
}

/// Size of a maximum one-to-one matching between detections and references
/// of one class. Candidates are tried in order of boundary error, then
/// augmenting paths fix up greedy choices.
fn match_count(dets: &[Segment], refs: &[Segment], collar: &CollarConfig) -> usize {
    let adj: Vec<Vec<usize>> = refs
        .iter()
        .map(|r| {
            let tol = collar.collar.max(collar.offset_fraction * r.duration());
            let mut cands: Vec<(f64, usize)> = dets
                .iter()
                .enumerate()
                .filter(|(_, d)| (d.onset - r.onset).abs() <= collar.collar && (d.offset - r.offset).abs() <= tol)
                .map(|(j, d)| ((d.onset - r.onset).abs() + (d.offset - r.offset).abs(), j))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; dets.len()];

    fn augment(r: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &d in &adj[r] {
            if seen[d] {
                continue;
            }
            seen[d] = true;
            if owner[d].is_none() || augment(owner[d].unwrap(), adj, owner, seen) {
                owner[d] = Some(r);
                return true;
            }
        }
        false
    }

    let mut matched = 0;
    for r in 0..refs.len() {
        let mut seen = vec![false; dets.len()];
        if augment(r, &adj, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

/// Accumulates event-level and clip-level counts over many clips.
#[derive(Clone, Debug, Default)]
pub struct EventCounts {
    collar: CollarConfig,
    event: BTreeMap<String, (usize, usize, usize)>,
    clip: BTreeMap<String, (usize, usize, usize)>,
    reference_classes: BTreeSet<String>,
}

impl EventCounts {
    pub fn new(collar: CollarConfig) -> Self {
        Self { collar, ..Default::default() }
    }

    pub fn add(&mut self, dets: &[DetectedEvent], gt: &Timeline) {
        let refs = merged_reference(gt);
        let found = detections_by_class(dets);
        let classes: BTreeSet<&String> = refs.keys().chain(found.keys()).collect();
        for class in classes {
            let r = refs.get(class).map(Vec::as_slice).unwrap_or(&[]);
            let d = found.get(class).map(Vec::as_slice).unwrap_or(&[]);
            let tp = match_count(d, r, &self.collar);
            let e = self.event.entry(class.clone()).or_default();
            e.0 += tp;
            e.1 += d.len() - tp;
            e.2 += r.len() - tp;
            let c = self.clip.entry(class.clone()).or_default();
            match (!r.is_empty(), !d.is_empty()) {
                (true, true) => c.0 += 1,
                (false, true) => c.1 += 1,
                (true, false) => c.2 += 1,
                (false, false) => {}
            }
        }
        self.reference_classes.extend(refs.into_keys());
    }

    /// Event-level statistics of every class seen in references or detections.
    pub fn event_stats(&self) -> BTreeMap<String, ClassStats> {
        self.event.iter().map(|(k, &(tp, fp, fn_))| (k.clone(), ClassStats::from_counts(tp, fp, fn_))).collect()
    }

    /// Macro-average of event-level F1 over reference classes.
    pub fn f1_event(&self) -> f64 {
        let stats = self.event_stats();
        macro_average(self.reference_classes.iter().map(|c| stats[c].f1))
    }

    /// Macro-average of clip-level F1 over reference classes.
    pub fn f1_clip(&self) -> f64 {
        macro_average(self.reference_classes.iter().map(|c| {
            let (tp, fp, fn_) = self.clip[c];
            ClassStats::from_counts(tp, fp, fn_).f1
        }))
    }

    pub fn report(&self) -> F1Report {
        let stats = self.event_stats();
        F1Report {
            f1_event: self.f1_event(),
            f1_clip: self.f1_clip(),
            per_class: self.reference_classes.iter().map(|c| (c.clone(), stats[c].clone())).collect(),
            collar: self.collar,
        }
    }
}

fn macro_average(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// One-to-one segment matching for a single clip. A detection matches a
/// reference event of the same class when its onset is within the collar and
/// its offset within `max(collar, offset_fraction · duration)`.
pub fn f1_event(dets: &[DetectedEvent], gt: &Timeline, collar: CollarConfig) -> F1Report {
    let mut acc = EventCounts::new(collar);
    acc.add(dets, gt);
    acc.report()
}

/// Clip-level presence F1, macro-averaged over the reference classes.
pub fn f1_clip(dets: &[DetectedEvent], gt: &Timeline) -> f64 {
    let mut acc = EventCounts::new(CollarConfig::default());
    acc.add(dets, gt);
    acc.f1_clip()
}

/// Fraction of reference classes with at least one detection.
pub fn class_recall(dets: &[DetectedEvent], gt: &Timeline) -> f64 {
    let refs: BTreeSet<&str> = gt.events().iter().map(|e| e.category.as_str()).collect();
    let hit = refs.iter().filter(|c| dets.iter().any(|d| d.category == **c)).count();
    ratio(hit, refs.len())
}

/// Mean over merged reference events of the best same-class detection IoU.
pub fn temporal_iou(dets: &[DetectedEvent], gt: &Timeline) -> f64 {
    let refs = merged_reference(gt);
    let found = detections_by_class(dets);
    let mut ious = Vec::new();
    for (class, segs) in &refs {
        for r in segs {
            let best = found
                .get(class)
                .into_iter()
                .flatten()
                .map(|d| segment_iou((d.onset, d.offset), (r.onset, r.offset)))
                .fold(0.0, f64::max);
            ious.push(best);
        }
    }
    macro_average(ious.into_iter())
}
