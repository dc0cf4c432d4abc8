//! Quality-balanced data selection: label-frequency analysis, rule-based
//! quality scores and quota sampling from rarity strata.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationRecord;
use crate::error::{Error, Result};
use crate::params::stream_rng;
use crate::timeline::Timeline;

/// Events shorter than this draw the short-event penalty.
pub const MIN_EVENT_DURATION: f64 = 0.1;
/// Minimum score for the rare stratum.
pub const RARE_MIN_SCORE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub tau_rare: f64,
    pub tau_common: f64,
    /// Derive both thresholds from the 20th and 80th percentiles of the
    /// label frequencies instead.
    pub adaptive: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tau_rare: 0.005, tau_common: 0.03, adaptive: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyTable {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
    pub frequencies: BTreeMap<String, f64>,
    pub tau_rare: f64,
    pub tau_common: f64,
    pub rare: BTreeSet<String>,
    pub common: BTreeSet<String>,
}

impl FrequencyTable {
    pub fn is_rare(&self, label: &str) -> bool {
        self.rare.contains(label)
    }

    pub fn is_common(&self, label: &str) -> bool {
        self.common.contains(label)
    }
}

/// Linear-interpolation percentile of sorted values, `q` in `[0, 1]`.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Counts event occurrences per label. Labels with frequency strictly below
/// `tau_rare` are rare, strictly above `tau_common` common.
pub fn build_frequency_table<'a>(
    corpus: impl IntoIterator<Item = &'a AnnotationRecord>,
    thresholds: Thresholds,
) -> Result<FrequencyTable> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for rec in corpus {
        for ev in &rec.events {
            *counts.entry(ev.label.clone()).or_default() += 1;
        }
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let frequencies: BTreeMap<String, f64> = counts.iter().map(|(k, &n)| (k.clone(), n as f64 / total as f64)).collect();
    let (tau_rare, tau_common) = if thresholds.adaptive {
        let mut phi: Vec<f64> = frequencies.values().copied().collect();
        phi.sort_by(f64::total_cmp);
        (percentile(&phi, 0.2), percentile(&phi, 0.8))
    } else {
        (thresholds.tau_rare, thresholds.tau_common)
    };
    if !thresholds.adaptive && !(tau_rare < tau_common) {
        return Err(Error::Config(format!("tau_rare {tau_rare} must be below tau_common {tau_common}")));
    }
    let rare = frequencies.iter().filter(|(_, &p)| p < tau_rare).map(|(k, _)| k.clone()).collect();
    let common = frequencies.iter().filter(|(_, &p)| p > tau_common).map(|(k, _)| k.clone()).collect();
    Ok(FrequencyTable { counts, total, frequencies, tau_rare, tau_common, rare, common })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    EventCount,
    TypeDiversity,
    DurationValidity,
    IdealDuration,
    ShortEvent,
    FullCoverage,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::EventCount,
        Criterion::TypeDiversity,
        Criterion::DurationValidity,
        Criterion::IdealDuration,
        Criterion::ShortEvent,
        Criterion::FullCoverage,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Criterion::EventCount => "event_count",
            Criterion::TypeDiversity => "type_diversity",
            Criterion::DurationValidity => "duration_validity",
            Criterion::IdealDuration => "ideal_duration",
            Criterion::ShortEvent => "short_event",
            Criterion::FullCoverage => "full_coverage",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub total: f64,
    pub breakdown: Vec<(Criterion, f64)>,
}

impl QualityScore {
    pub fn contribution(&self, c: Criterion) -> f64 {
        self.breakdown.iter().find(|(k, _)| *k == c).map_or(0.0, |(_, v)| *v)
    }
}

/// Rule-based sample quality. Every term is an integer; the total is their
/// exact sum.
pub fn quality_score(tl: &Timeline) -> QualityScore {
    let events = tl.events();
    let n = events.len();
    let event_count = match n {
        1 => 5,
        2..=5 => 10,
        6..=8 => 3,
        _ => -5,
    };
    let classes: BTreeSet<&str> = events.iter().map(|e| e.category.as_str()).collect();
    let diversity = match classes.len() {
        0 | 1 => 0,
        2 => 5,
        _ => 8,
    };
    let valid = events.iter().filter(|e| (0.5..=5.0).contains(&e.duration())).count() as i64;
    let ideal = events.iter().filter(|e| (1.0..=3.0).contains(&e.duration())).count() as i64;
    let short = if events.iter().any(|e| e.duration() < MIN_EVENT_DURATION) { -50 } else { 0 };
    let coverage = if events.iter().any(|e| {
        let label = e.category.to_lowercase();
        e.duration() > 0.95 * tl.clip_duration() && (label.contains("speech") || label.contains("music"))
    }) {
        -8
    } else {
        0
    };
    let terms: [(Criterion, i64); 6] = [
        (Criterion::EventCount, event_count),
        (Criterion::TypeDiversity, diversity),
        (Criterion::DurationValidity, (2 * valid).min(10)),
        (Criterion::IdealDuration, ideal.min(5)),
        (Criterion::ShortEvent, short),
        (Criterion::FullCoverage, coverage),
    ];
    let total: i64 = terms.iter().map(|(_, v)| v).sum();
    QualityScore { total: total as f64, breakdown: terms.iter().map(|&(c, v)| (c, v as f64)).collect() }
}

/// Validates and scores every record in parallel, preserving order.
pub fn score_records(records: &[AnnotationRecord]) -> Result<Vec<QualityScore>> {
    records
        .par_iter()
        .map(|r| {
            r.timeline()
                .map(|tl| quality_score(&tl))
                .map_err(|e| Error::InvalidRecord { id: r.id.clone(), message: e.to_string() })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stratum {
    Rare,
    Common,
    Medium,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Rare, Stratum::Common, Stratum::Medium];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Quotas {
    pub rare: f64,
    pub common: f64,
    pub medium: f64,
}

impl Default for Quotas {
    fn default() -> Self {
        Self { rare: 0.25, common: 0.5, medium: 0.25 }
    }
}

impl Quotas {
    /// Per-stratum sizes: rare and medium are floored, common takes the rest.
    pub fn sizes(&self, n_target: usize) -> [usize; 3] {
        let rare = (self.rare * n_target as f64).floor() as usize;
        let medium = (self.medium * n_target as f64).floor() as usize;
        [rare, n_target.saturating_sub(rare + medium), medium]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub n_target: usize,
    pub q_min: f64,
    pub thresholds: Thresholds,
    pub quotas: Quotas,
    /// Fill stratum shortfalls from leftover medium, then common, samples.
    pub backfill: bool,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { n_target: 1000, q_min: 15.0, thresholds: Thresholds::default(), quotas: Quotas::default(), backfill: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedSample {
    pub index: usize,
    pub id: String,
    pub stratum: Stratum,
    pub quality_score: f64,
    pub breakdown: BTreeMap<Criterion, f64>,
    pub backfilled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CuratedDataset {
    pub selected: Vec<SelectedSample>,
    pub n_target: usize,
    pub q_min: f64,
    pub quotas: [usize; 3],
    pub eligible: [usize; 3],
    pub shortfalls: [usize; 3],
    pub backfilled: usize,
}

impl CuratedDataset {
    pub fn count(&self, s: Stratum) -> usize {
        self.selected.iter().filter(|x| x.stratum == s).count()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.selected
            .iter()
            .map(|s| ManifestEntry { id: s.id.clone(), stratum: s.stratum, quality_score: s.quality_score, breakdown: s.breakdown.clone() })
            .collect()
    }
}

/// One line of the curated manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub stratum: Stratum,
    pub quality_score: f64,
    pub breakdown: BTreeMap<Criterion, f64>,
}

/// Stratum of one sample, or `None` if it meets no threshold. Rare labels
/// take precedence over common ones.
pub fn assign_stratum(labels: &BTreeSet<&str>, score: f64, freq: &FrequencyTable, q_min: f64) -> Option<Stratum> {
    if score >= RARE_MIN_SCORE && labels.iter().any(|l| freq.is_rare(l)) {
        Some(Stratum::Rare)
    } else if score >= q_min && labels.iter().any(|l| freq.is_common(l)) {
        Some(Stratum::Common)
    } else if score >= 0.8 * q_min {
        Some(Stratum::Medium)
    } else {
        None
    }
}

/// Partitions the corpus into strata and draws each quota uniformly with a
/// seeded shuffle. Shortfalls are reported and, when enabled, filled from
/// unselected medium samples by descending score and then from common ones.
pub fn stratify_and_sample(
    corpus: &[AnnotationRecord],
    freq: &FrequencyTable,
    scores: &[QualityScore],
    cfg: &CurationConfig,
) -> Result<CuratedDataset> {
    if cfg.n_target < 4 {
        return Err(Error::Config(format!("n_target must be at least 4, got {}", cfg.n_target)));
    }
    if scores.len() != corpus.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} records", scores.len(), corpus.len())));
    }
    let mut pools: [Vec<usize>; 3] = Default::default();
    for (i, (rec, q)) in corpus.iter().zip(scores).enumerate() {
        let labels: BTreeSet<&str> = rec.events.iter().map(|e| e.label.as_str()).collect();
        if let Some(s) = assign_stratum(&labels, q.total, freq, cfg.q_min) {
            pools[s.index()].push(i);
        }
    }
    let quotas = cfg.quotas.sizes(cfg.n_target);
    let eligible = [pools[0].len(), pools[1].len(), pools[2].len()];
    let mut taken = vec![false; corpus.len()];
    let mut picks: Vec<(usize, Stratum, bool)> = Vec::new();
    let mut shortfalls = [0usize; 3];
    for s in Stratum::ALL {
        let mut pool = pools[s.index()].clone();
        pool.shuffle(&mut stream_rng(cfg.seed, &[20, s.index() as u64]));
        let k = quotas[s.index()].min(pool.len());
        shortfalls[s.index()] = quotas[s.index()] - k;
        for &i in &pool[..k] {
            taken[i] = true;
            picks.push((i, s, false));
        }
    }
    let mut missing: usize = shortfalls.iter().sum();
    let mut backfilled = 0;
    if cfg.backfill && missing > 0 {
        for s in [Stratum::Medium, Stratum::Common] {
            let mut rest: Vec<usize> = pools[s.index()].iter().copied().filter(|&i| !taken[i]).collect();
            rest.sort_by(|&a, &b| scores[b].total.total_cmp(&scores[a].total).then(a.cmp(&b)));
            for i in rest.into_iter().take(missing) {
                taken[i] = true;
                picks.push((i, s, true));
                missing -= 1;
                backfilled += 1;
            }
        }
    }
    let selected = picks
        .into_iter()
        .map(|(i, stratum, backfilled)| SelectedSample {
            index: i,
            id: corpus[i].id.clone(),
            stratum,
            quality_score: scores[i].total,
            breakdown: scores[i].breakdown.iter().copied().collect(),
            backfilled,
        })
        .collect();
    Ok(CuratedDataset { selected, n_target: cfg.n_target, q_min: cfg.q_min, quotas, eligible, shortfalls, backfilled })
}

/// Summary written next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurationSummary {
    pub n_records: usize,
    pub n_target: usize,
    pub selected: BTreeMap<Stratum, usize>,
    pub eligible: BTreeMap<Stratum, usize>,
    pub quotas: BTreeMap<Stratum, usize>,
    pub shortfalls: BTreeMap<Stratum, usize>,
    pub backfilled: usize,
    pub thresholds: SummaryThresholds,
    pub rare_labels: usize,
    pub common_labels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryThresholds {
    pub tau_rare: f64,
    pub tau_common: f64,
    pub q_min: f64,
    pub rare_min_score: f64,
    pub medium_min_score: f64,
}

pub struct CurationOutput {
    pub frequencies: FrequencyTable,
    pub scores: Vec<QualityScore>,
    pub dataset: CuratedDataset,
    pub summary: CurationSummary,
}

/// Frequency analysis, scoring and stratified sampling in one pass.
pub fn curate(corpus: &[AnnotationRecord], cfg: &CurationConfig) -> Result<CurationOutput> {
    let frequencies = build_frequency_table(corpus, cfg.thresholds)?;
    let scores = score_records(corpus)?;
    let dataset = stratify_and_sample(corpus, &frequencies, &scores, cfg)?;
    let per = |v: [usize; 3]| Stratum::ALL.iter().map(|&s| (s, v[s.index()])).collect::<BTreeMap<_, _>>();
    let summary = CurationSummary {
        n_records: corpus.len(),
        n_target: cfg.n_target,
        selected: Stratum::ALL.iter().map(|&s| (s, dataset.count(s))).collect(),
        eligible: per(dataset.eligible),
        quotas: per(dataset.quotas),
        shortfalls: per(dataset.shortfalls),
        backfilled: dataset.backfilled,
        thresholds: SummaryThresholds {
            tau_rare: frequencies.tau_rare,
            tau_common: frequencies.tau_common,
            q_min: cfg.q_min,
            rare_min_score: RARE_MIN_SCORE,
            medium_min_score: 0.8 * cfg.q_min,
        },
        rare_labels: frequencies.rare.len(),
        common_labels: frequencies.common.len(),
    };
    Ok(CurationOutput { frequencies, scores, dataset, summary })
}
