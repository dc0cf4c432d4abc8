//! Event timelines and the interval algebra built on them: the frame
//! activation matrix and the pairwise temporal-relation tensor.
//!
//! Everything here is a pure function of immutable inputs.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Default cap on the number of events in one clip.
pub const DEFAULT_MAX_EVENTS: usize = 16;

/// One sound event: category label, interval in seconds and intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub category: String,
    pub onset: f64,
    pub offset: f64,
    pub intensity: f64,
}

impl EventSpec {
    pub fn new(category: impl Into<String>, onset: f64, offset: f64, intensity: f64) -> Self {
        Self { category: category.into(), onset, offset, intensity }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// A timeline record before validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTimeline {
    pub clip_duration: f64,
    pub events: Vec<EventSpec>,
}

/// A validated clip: `1 ≤ N ≤ N_max` events, each inside `[0, clip_duration]`
/// with `onset < offset` and intensity in `[0, 1]`.
///
/// Event order is authoring order and drives the positional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    clip_duration: f64,
    events: Vec<EventSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EmptyTimeline,
    TooManyEvents { count: usize, max: usize },
    InvalidClipDuration { duration: f64 },
    EmptyLabel { index: usize },
    NonFinite { index: usize },
    NegativeOnset { index: usize, onset: f64 },
    OnsetAfterOffset { index: usize, onset: f64, offset: f64 },
    OffsetPastClipEnd { index: usize, offset: f64, clip_duration: f64 },
    IntensityOutOfRange { index: usize, intensity: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTimeline => write!(f, "timeline has no events"),
            Violation::TooManyEvents { count, max } => write!(f, "{count} events exceeds the maximum of {max}"),
            Violation::InvalidClipDuration { duration } => write!(f, "clip duration {duration} is not positive"),
            Violation::EmptyLabel { index } => write!(f, "events[{index}].label is empty"),
            Violation::NonFinite { index } => write!(f, "events[{index}] has a non-finite field"),
            Violation::NegativeOnset { index, onset } => write!(f, "events[{index}].onset {onset} is negative"),
            Violation::OnsetAfterOffset { index, onset, offset } => {
                write!(f, "events[{index}] onset {onset} is not before offset {offset}")
            }
            Violation::OffsetPastClipEnd { index, offset, clip_duration } => {
                write!(f, "events[{index}].offset {offset} is past the clip end {clip_duration}")
            }
            Violation::IntensityOutOfRange { index, intensity } => {
                write!(f, "events[{index}].intensity {intensity} is outside [0, 1]")
            }
        }
    }
}

/// Every invariant a raw timeline violated.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub struct TimelineError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for TimelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid timeline: ")?;
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every timeline invariant and reports all violations at once.
pub fn validate_timeline(raw: &RawTimeline, max_events: usize) -> Result<Timeline, TimelineError> {
    let mut violations = Vec::new();
    let dur = raw.clip_duration;
    if !(dur.is_finite() && dur > 0.0) {
        violations.push(Violation::InvalidClipDuration { duration: dur });
    }
    if raw.events.is_empty() {
        violations.push(Violation::EmptyTimeline);
    }
    if raw.events.len() > max_events {
        violations.push(Violation::TooManyEvents { count: raw.events.len(), max: max_events });
    }
    for (index, ev) in raw.events.iter().enumerate() {
        if ev.category.trim().is_empty() {
            violations.push(Violation::EmptyLabel { index });
        }
        if !(ev.onset.is_finite() && ev.offset.is_finite() && ev.intensity.is_finite()) {
            violations.push(Violation::NonFinite { index });
            continue;
        }
        if ev.onset < 0.0 {
            violations.push(Violation::NegativeOnset { index, onset: ev.onset });
        }
        if ev.onset >= ev.offset {
            violations.push(Violation::OnsetAfterOffset { index, onset: ev.onset, offset: ev.offset });
        }
        if dur.is_finite() && ev.offset > dur {
            violations.push(Violation::OffsetPastClipEnd { index, offset: ev.offset, clip_duration: dur });
        }
        if !(0.0..=1.0).contains(&ev.intensity) {
            violations.push(Violation::IntensityOutOfRange { index, intensity: ev.intensity });
        }
    }
    if violations.is_empty() {
        Ok(Timeline { clip_duration: dur, events: raw.events.clone() })
    } else {
        Err(TimelineError { violations })
    }
}

impl Timeline {
    /// Validates with the default event cap.
    pub fn new(clip_duration: f64, events: Vec<EventSpec>) -> Result<Self, TimelineError> {
        validate_timeline(&RawTimeline { clip_duration, events }, DEFAULT_MAX_EVENTS)
    }

    pub fn clip_duration(&self) -> f64 {
        self.clip_duration
    }

    pub fn events(&self) -> &[EventSpec] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Distinct labels in first-appearance order.
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.events {
            if !out.contains(&e.category.as_str()) {
                out.push(&e.category);
            }
        }
        out
    }
}

/// `N × F` matrix of per-frame coverage fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameActivationMatrix {
    events: usize,
    frame_count: usize,
    clip_duration: f64,
    values: Vec<f64>,
}

impl FrameActivationMatrix {
    pub fn events(&self) -> usize {
        self.events
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn clip_duration(&self) -> f64 {
        self.clip_duration
    }

    /// Width of one frame in seconds.
    pub fn frame_width(&self) -> f64 {
        self.clip_duration / self.frame_count as f64
    }

    pub fn get(&self, event: usize, frame: usize) -> f64 {
        self.values[event * self.frame_count + frame]
    }

    pub fn row(&self, event: usize) -> &[f64] {
        &self.values[event * self.frame_count..(event + 1) * self.frame_count]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Fraction of each frame covered by each event.
///
/// Frame `j` is `[jΔ, (j+1)Δ)` with `Δ = clip_duration / frames`; the entry
/// is `|[onset, offset] ∩ frame_j| / Δ`.
pub fn frame_activation(tl: &Timeline, frames: usize) -> FrameActivationMatrix {
    assert!(frames >= 1, "frame count must be at least 1");
    let dur = tl.clip_duration;
    let width = dur / frames as f64;
    let mut values = vec![0.0; tl.len() * frames];
    for (i, ev) in tl.events.iter().enumerate() {
        // one frame of slack on each side absorbs rounding in the division
        let first = ((ev.onset / width).floor() as usize).saturating_sub(1).min(frames - 1);
        let last = ((ev.offset / width).ceil() as usize + 1).min(frames);
        for j in first..last {
            let lo = ev.onset.max(j as f64 * dur / frames as f64);
            let hi = ev.offset.min((j + 1) as f64 * dur / frames as f64);
            if hi > lo {
                values[i * frames + j] = ((hi - lo) / width).min(1.0);
            }
        }
    }
    FrameActivationMatrix { events: tl.len(), frame_count: frames, clip_duration: dur, values }
}

/// Relation channels, in tensor order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    Before = 0,
    After = 1,
    Overlaps = 2,
    Contains = 3,
    ContainedBy = 4,
}

impl Relation {
    pub const ALL: [Relation; 5] =
        [Relation::Before, Relation::After, Relation::Overlaps, Relation::Contains, Relation::ContainedBy];
    pub const COUNT: usize = 5;
}

/// `N × N × 5` relation strengths.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationTensor {
    events: usize,
    values: Vec<f64>,
}

impl RelationTensor {
    pub fn events(&self) -> usize {
        self.events
    }

    pub fn get(&self, i: usize, j: usize, rel: Relation) -> f64 {
        self.values[(i * self.events + j) * Relation::COUNT + rel as usize]
    }

    pub fn slice(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.events + j) * Relation::COUNT;
        &self.values[base..base + Relation::COUNT]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    fn set(&mut self, i: usize, j: usize, rel: Relation, v: f64) {
        self.values[(i * self.events + j) * Relation::COUNT + rel as usize] = v;
    }
}

/// Classifies each event pair into one relation family and scores it.
///
/// Containment is tested first, then overlap, then before/after. Identical
/// intervals overlap with strength 1; touching intervals are BEFORE/AFTER
/// with gap 0.
pub fn relation_tensor(tl: &Timeline) -> RelationTensor {
    let n = tl.len();
    let t = tl.clip_duration;
    let mut out = RelationTensor { events: n, values: vec![0.0; n * n * Relation::COUNT] };
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&tl.events[i], &tl.events[j]);
            let a_holds_b = a.onset <= b.onset && b.offset <= a.offset;
            let b_holds_a = b.onset <= a.onset && a.offset <= b.offset;
            if a_holds_b && b_holds_a {
                out.set(i, j, Relation::Overlaps, 1.0);
                out.set(j, i, Relation::Overlaps, 1.0);
            } else if a_holds_b {
                out.set(i, j, Relation::Contains, 1.0);
                out.set(j, i, Relation::ContainedBy, 1.0);
            } else if b_holds_a {
                out.set(i, j, Relation::ContainedBy, 1.0);
                out.set(j, i, Relation::Contains, 1.0);
            } else {
                let inter = a.offset.min(b.offset) - a.onset.max(b.onset);
                if inter > 0.0 {
                    let s = inter / a.duration().min(b.duration());
                    out.set(i, j, Relation::Overlaps, s);
                    out.set(j, i, Relation::Overlaps, s);
                } else if a.offset <= b.onset {
                    let s = (1.0 - (b.onset - a.offset) / t).max(0.0);
                    out.set(i, j, Relation::Before, s);
                    out.set(j, i, Relation::After, s);
                } else {
                    let s = (1.0 - (a.onset - b.offset) / t).max(0.0);
                    out.set(i, j, Relation::After, s);
                    out.set(j, i, Relation::Before, s);
                }
            }
        }
    }
    out
}
