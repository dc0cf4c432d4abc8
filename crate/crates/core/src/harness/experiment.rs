//! End-to-end runs: synthesize, curate, train, optionally fine-tune with
//! preferences, generate and evaluate, then sweep the ablation axes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::detect::detect_events;
use super::metrics::{CollarConfig, EventCounts, F1Report};
use crate::annotation::AnnotationRecord;
use crate::copo::{build_pairs, compute_rewards, copo_train, CandidateSource, CoPOState, PairInput, PreferencePair, PromptSpec, RewardConfig};
use crate::corpus::{class_labels, synthesize_corpus};
use crate::curation::{curate, CurationSummary};
use crate::error::{Error, Result};
use crate::flow::{synth_target, train, ClassSignatureBank, FlowModel, SyntheticLatent};
use crate::params::stream_rng;
use crate::scalar::Scalar;
use crate::timeline::Timeline;

/// A clip to generate: target timeline and caption.
pub type Clip = (Timeline, String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardMeans {
    pub r_text: f64,
    pub r_event: f64,
    pub r_temporal: f64,
    pub r_audio: f64,
    pub r_overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub f1: F1Report,
    pub rewards: RewardMeans,
}

/// Generates one latent per clip; clip `i` draws its noise from its own
/// stream so results do not depend on scheduling.
pub fn generate_latents<T: Scalar>(model: &FlowModel<T>, clips: &[Clip], text_only: bool, gs: f64, steps: usize, seed: u64) -> Result<Vec<SyntheticLatent>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, (tl, prompt))| model.generate(tl, prompt, text_only, gs, steps, &mut stream_rng(seed, &[40, i as u64])))
        .collect()
}

/// Detects events in each latent and scores them against its clip.
pub fn evaluate_latents(latents: &[SyntheticLatent], clips: &[Clip], bank: &ClassSignatureBank, collar: CollarConfig, rewards: &RewardConfig) -> Result<Evaluation> {
    if latents.len() != clips.len() {
        return Err(Error::ShapeMismatch(format!("{} latents for {} clips", latents.len(), clips.len())));
    }
    let per_clip: Vec<_> = latents
        .par_iter()
        .zip(clips)
        .map(|(lat, (tl, prompt))| (detect_events(lat, bank, rewards.threshold), compute_rewards(lat, tl, prompt, bank, rewards)))
        .collect();
    let mut counts = EventCounts::new(collar);
    let mut sum = RewardMeans::default();
    for ((dets, r), (tl, _)) in per_clip.iter().zip(clips) {
        counts.add(dets, tl);
        sum.r_text += r.r_text;
        sum.r_event += r.r_event;
        sum.r_temporal += r.r_temporal;
        sum.r_audio += r.r_audio;
        sum.r_overall += r.overall(&rewards.weights);
    }
    let n = clips.len().max(1) as f64;
    let rewards = RewardMeans {
        r_text: sum.r_text / n,
        r_event: sum.r_event / n,
        r_temporal: sum.r_temporal / n,
        r_audio: sum.r_audio / n,
        r_overall: sum.r_overall / n,
    };
    Ok(Evaluation { f1: counts.report(), rewards })
}

/// Builds one prompt per clip and pairs the model's sample against the
/// synthesized reference latent.
pub fn model_vs_reference_pairs<T: Scalar>(
    model: &FlowModel<T>,
    clips: &[Clip],
    bank: &ClassSignatureBank,
    gs: f64,
    steps: usize,
    noise_scale: f64,
    rewards: &RewardConfig,
    seed: u64,
) -> Result<(Vec<PromptSpec>, Vec<PreferencePair>)> {
    let prompts: Vec<PromptSpec> = clips
        .iter()
        .enumerate()
        .map(|(i, (tl, p))| PromptSpec { id: format!("prompt{i:05}"), timeline: tl.clone(), prompt: p.clone() })
        .collect();
    let generated: Vec<SyntheticLatent> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| model.generate(&p.timeline, &p.prompt, false, gs, steps, &mut stream_rng(seed, &[41, i as u64])))
        .collect::<Result<_>>()?;
    let model_src = CandidateSource { name: "model".into(), latents: prompts.iter().map(|p| p.id.clone()).zip(generated).collect() };
    let reference = CandidateSource {
        name: "reference".into(),
        latents: prompts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), synth_target(&p.timeline, bank, model.config().latent_frames, noise_scale, &mut stream_rng(seed, &[42, i as u64]))))
            .collect(),
    };
    let pairs = build_pairs(&prompts, &[model_src, reference], bank, rewards)?;
    Ok((prompts, pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub train_clips: usize,
    pub test_clips: usize,
    pub f1_event: f64,
    pub f1_clip: f64,
    pub rewards: RewardMeans,
    pub per_class: BTreeMap<String, super::metrics::ClassStats>,
    pub train_loss: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copo_loss: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copo_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curation: Option<CurationSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub f1_event: f64,
    pub f1_clip: f64,
    pub r_overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub f1_event: f64,
    pub f1_clip: f64,
    pub rewards: RewardMeans,
    pub runs: Vec<RunReport>,
    /// Axis name (`gs`, `steps`, `L`, `F`) to rows averaged over seeds.
    pub sweeps: BTreeMap<String, Vec<SweepRow>>,
}

struct TrainedRun {
    model: FlowModel<f64>,
    bank: ClassSignatureBank,
    test: Vec<Clip>,
    report: RunReport,
}

fn clips_of(records: &[AnnotationRecord]) -> Result<Vec<Clip>> {
    records.iter().map(|r| Ok((r.timeline()?, r.caption.clone()))).collect()
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, layers: usize, frames: usize) -> Result<TrainedRun> {
    let records = synthesize_corpus(&cfg.corpus_config(seed));
    let (train_records, test_records) = records.split_at(cfg.corpus.train_clips);
    let test = clips_of(test_records).map_err(|e| e.in_stage("corpus"))?;
    let (train_set, curation) = match cfg.curation_config(seed) {
        Some(cc) => {
            let out = curate(train_records, &cc).map_err(|e| e.in_stage("curation"))?;
            let mut idx: Vec<usize> = out.dataset.selected.iter().map(|s| s.index).collect();
            idx.sort_unstable();
            let chosen: Vec<AnnotationRecord> = idx.iter().map(|&i| train_records[i].clone()).collect();
            (clips_of(&chosen).map_err(|e| e.in_stage("curation"))?, Some(out.summary))
        }
        None => (clips_of(train_records).map_err(|e| e.in_stage("corpus"))?, None),
    };
    let bank = ClassSignatureBank::new(seed, cfg.channels, &class_labels(cfg.corpus.classes));
    let mut model = FlowModel::<f64>::new(cfg.flow_config(seed, layers, frames)).map_err(|e| e.in_stage("train"))?;
    let train_report = train(&mut model, &train_set, &bank, &cfg.train_config(seed)).map_err(|e| e.in_stage("train"))?;

    let (mut copo_loss, mut copo_pairs) = (None, None);
    if let (Some(section), Some(ccfg)) = (&cfg.copo, cfg.copo_config(seed)) {
        let rewards = cfg.reward_config();
        let n = section.pairs.min(train_set.len());
        let (prompts, pairs) = model_vs_reference_pairs(&model, &train_set[..n], &bank, cfg.gs, cfg.steps, cfg.noise_scale, &rewards, seed)
            .map_err(|e| e.in_stage("copo"))?;
        let by_id: BTreeMap<&str, &PromptSpec> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut state = CoPOState::new(&model, &ccfg).map_err(|e| e.in_stage("copo"))?;
        let inputs: Vec<PairInput<f64>> = pairs
            .iter()
            .map(|p| PairInput::new(&state.net, p, by_id[p.prompt_id.as_str()]))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("copo"))?;
        let report = copo_train(&mut state, &inputs, &ccfg).map_err(|e| e.in_stage("copo"))?;
        model = state.model();
        copo_loss = Some(report.losses);
        copo_pairs = Some(inputs.len());
    }

    let report = RunReport {
        seed,
        train_clips: train_set.len(),
        test_clips: test.len(),
        f1_event: 0.0,
        f1_clip: 0.0,
        rewards: RewardMeans::default(),
        per_class: BTreeMap::new(),
        train_loss: train_report.epoch_losses,
        copo_loss,
        copo_pairs,
        curation,
    };
    Ok(TrainedRun { model, bank, test, report })
}

fn evaluate_run(cfg: &ExperimentConfig, run: &TrainedRun, gs: f64, steps: usize) -> Result<Evaluation> {
    let latents = generate_latents(&run.model, &run.test, cfg.text_only, gs, steps, run.report.seed).map_err(|e| e.in_stage("generate"))?;
    evaluate_latents(&latents, &run.test, &run.bank, cfg.collar, &cfg.reward_config()).map_err(|e| e.in_stage("evaluate"))
}

fn mean_row(value: f64, evals: &[Evaluation]) -> SweepRow {
    let n = evals.len().max(1) as f64;
    SweepRow {
        value,
        f1_event: evals.iter().map(|e| e.f1.f1_event).sum::<f64>() / n,
        f1_clip: evals.iter().map(|e| e.f1.f1_clip).sum::<f64>() / n,
        r_overall: evals.iter().map(|e| e.rewards.r_overall).sum::<f64>() / n,
    }
}

/// Runs every seed, then every configured sweep. The result depends only on
/// the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut main_evals = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut run = run_seed(cfg, seed, cfg.layers, cfg.frames)?;
        let eval = evaluate_run(cfg, &run, cfg.gs, cfg.steps)?;
        run.report.f1_event = eval.f1.f1_event;
        run.report.f1_clip = eval.f1.f1_clip;
        run.report.rewards = eval.rewards;
        run.report.per_class = eval.f1.per_class.clone();
        main_evals.push(eval);
        runs.push(run);
    }

    let mut sweeps = BTreeMap::new();
    if !cfg.sweep.gs.is_empty() {
        let rows = cfg
            .sweep
            .gs
            .iter()
            .map(|&gs| Ok(mean_row(gs, &runs.iter().map(|r| evaluate_run(cfg, r, gs, cfg.steps)).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<Vec<_>>>()?;
        sweeps.insert("gs".to_string(), rows);
    }
    if !cfg.sweep.steps.is_empty() {
        let rows = cfg
            .sweep
            .steps
            .iter()
            .map(|&steps| Ok(mean_row(steps as f64, &runs.iter().map(|r| evaluate_run(cfg, r, cfg.gs, steps)).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<Vec<_>>>()?;
        sweeps.insert("steps".to_string(), rows);
    }
    let variant = |layers: usize, frames: usize| -> Result<Vec<Evaluation>> {
        cfg.seeds.iter().map(|&seed| evaluate_run(cfg, &run_seed(cfg, seed, layers, frames)?, cfg.gs, cfg.steps)).collect()
    };
    if !cfg.sweep.layers.is_empty() {
        let rows = cfg.sweep.layers.iter().map(|&l| Ok(mean_row(l as f64, &variant(l, cfg.frames)?))).collect::<Result<Vec<_>>>()?;
        sweeps.insert("L".to_string(), rows);
    }
    if !cfg.sweep.frames.is_empty() {
        let rows = cfg.sweep.frames.iter().map(|&f| Ok(mean_row(f as f64, &variant(cfg.layers, f)?))).collect::<Result<Vec<_>>>()?;
        sweeps.insert("F".to_string(), rows);
    }

    let overall = mean_row(0.0, &main_evals);
    let n = main_evals.len() as f64;
    let avg = |f: fn(&RewardMeans) -> f64| main_evals.iter().map(|e| f(&e.rewards)).sum::<f64>() / n;
    Ok(ExperimentReport {
        seeds: cfg.seeds.clone(),
        f1_event: overall.f1_event,
        f1_clip: overall.f1_clip,
        rewards: RewardMeans {
            r_text: avg(|r| r.r_text),
            r_event: avg(|r| r.r_event),
            r_temporal: avg(|r| r.r_temporal),
            r_audio: avg(|r| r.r_audio),
            r_overall: avg(|r| r.r_overall),
        },
        runs: runs.into_iter().map(|r| r.report).collect(),
        sweeps,
    })
}

/// Renders a sweep table with a header row.
pub fn sweep_csv(axis: &str, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut table = || -> csv::Result<()> {
        w.write_record([axis, "f1_event", "f1_clip", "r_overall"])?;
        for r in rows {
            w.write_record([r.value, r.f1_event, r.f1_clip, r.r_overall].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    };
    table().map_err(|e| Error::Io(e.into()))?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `metrics.json` and one `sweep_<axis>.csv` per swept axis.
pub fn write_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let write = || -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let metrics = dir.join("metrics.json");
        let mut json = serde_json::to_string_pretty(report)?;
        json.push('\n');
        std::fs::write(&metrics, json)?;
        let mut paths = vec![metrics];
        for (axis, rows) in &report.sweeps {
            let path = dir.join(format!("sweep_{axis}.csv"));
            std::fs::write(&path, sweep_csv(axis, rows)?)?;
            paths.push(path);
        }
        Ok(paths)
    };
    write().map_err(|e| e.in_stage("report"))
}

/// Loads a config file, runs it and writes the outputs into `out_dir`.
pub fn run_experiment_file(config: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let cfg = ExperimentConfig::load(config).map_err(|e| e.in_stage("config"))?;
    let report = run_experiment(&cfg)?;
    write_report(&report, out_dir)?;
    Ok(report)
}
