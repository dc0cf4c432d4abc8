use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use eventflow::annotation::{load_records, save_jsonl, AnnotationRecord};
use eventflow::checkpoint::TensorFile;
use eventflow::copo::{self, CandidateSource, CoPOState, CopoConfig, PairInput, PairRecord, PromptSpec, RewardConfig};
use eventflow::corpus::{synthesize_corpus, CorpusConfig};
use eventflow::curation::{self, CurationConfig, Quotas, Thresholds};
use eventflow::flow::{self, ClassSignatureBank, FlowConfig, FlowModel, SyntheticLatent, TrainConfig};
use eventflow::harness::experiment::{self, Clip};
use eventflow::harness::{CollarConfig, ExperimentConfig};
use eventflow::optim::AdamConfig;
use eventflow::{Error, Matrix};

#[derive(Parser)]
#[command(name = "eventflow", version, about = "Event-conditioned flow matching on synthetic latents")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "EVENTFLOW_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic annotation corpus.
    Synth(SynthArgs),
    /// Score, stratify and sample an annotation corpus.
    Curate(CurateArgs),
    /// Train a flow model on annotations.
    Train(TrainArgs),
    /// Generate one latent per annotation record.
    Generate(GenerateArgs),
    /// Build preference pairs from several candidate latent files.
    Pairs(PairsArgs),
    /// Fine-tune a model on preference pairs.
    Copo(CopoArgs),
    /// Score generated latents against their annotations.
    Evaluate(EvaluateArgs),
    /// Run a full experiment from a config file.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    clips: usize,
    #[arg(long, default_value_t = 12)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    max_events: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_target: usize,
    #[arg(long, default_value_t = 15.0)]
    q_min: f64,
    #[arg(long, default_value_t = 0.005)]
    tau_rare: f64,
    #[arg(long, default_value_t = 0.03)]
    tau_common: f64,
    /// Take thresholds from the 20th/80th label-frequency percentiles.
    #[arg(long)]
    adaptive: bool,
    /// Leave stratum shortfalls unfilled.
    #[arg(long)]
    no_backfill: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest JSONL output.
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON output; printed to stdout when omitted.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    max_events: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    latent_frames: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    text_tokens: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    /// Curated manifest restricting the training records.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    cond_dropout: f64,
    /// Mask the event graph during training.
    #[arg(long)]
    text_only: bool,
    /// Loss curve JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    gs: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    text_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Candidate latents as NAME=PATH; give at least two.
    #[arg(long = "candidates", required = true, num_args = 1..)]
    candidates: Vec<String>,
    /// Pair manifest JSONL output.
    #[arg(long)]
    out: PathBuf,
    /// Container holding both latents of every pair.
    #[arg(long)]
    latents_out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Signature-bank seed; defaults to the one stored with the candidates.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CopoArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Pair latents written by `pairs`.
    #[arg(long)]
    latents: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.999)]
    ema: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    latents: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0.2)]
    collar: f64,
    /// Metrics JSON output; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Signature-bank seed; defaults to the one stored with the latents.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace the configured seeds with this one.
    #[arg(long)]
    seed: Option<u64>,
}

fn read_annotations(path: &Path) -> anyhow::Result<Vec<AnnotationRecord>> {
    load_records(path).with_context(|| format!("reading {}", path.display()))
}

fn labels_of(records: &[AnnotationRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = records.iter().flat_map(|r| r.events.iter().map(|e| e.label.as_str())).collect();
    set.into_iter().map(str::to_owned).collect()
}

fn clips_of(records: &[AnnotationRecord]) -> eventflow::Result<Vec<Clip>> {
    records.iter().map(|r| Ok((r.timeline()?, r.caption.clone()))).collect()
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Latent container plus the signature-bank seed it was generated under.
struct LatentSet {
    file: TensorFile,
    bank_seed: Option<u64>,
}

impl LatentSet {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let file = TensorFile::load(path).with_context(|| format!("reading {}", path.display()))?;
        let bank_seed = file.meta.get("bank_seed").and_then(|v| v.as_u64());
        Ok(Self { file, bank_seed })
    }

    fn latent(&self, name: &str, duration: f64) -> Option<SyntheticLatent> {
        self.file.get(name).map(|x| SyntheticLatent { x: x.clone(), clip_duration: duration })
    }

    fn channels(&self) -> anyhow::Result<usize> {
        self.file.tensors.first().map(|(_, m)| m.cols()).ok_or_else(|| anyhow!(Error::Checkpoint("latent file holds no tensors".into())))
    }
}

fn bank_seed(explicit: Option<u64>, stored: Option<u64>) -> anyhow::Result<u64> {
    explicit.or(stored).ok_or_else(|| anyhow!(Error::Config("no --seed given and the latents do not record a bank seed".into())))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = CorpusConfig { clips: a.clips, classes: a.classes, max_events: a.max_events, seed: a.seed, ..CorpusConfig::default() };
    save_jsonl(&a.out, synthesize_corpus(&cfg))?;
    Ok(())
}

fn curate(a: CurateArgs) -> anyhow::Result<()> {
    let records = read_annotations(&a.input)?;
    let cfg = CurationConfig {
        n_target: a.n_target,
        q_min: a.q_min,
        thresholds: Thresholds { tau_rare: a.tau_rare, tau_common: a.tau_common, adaptive: a.adaptive },
        quotas: Quotas::default(),
        backfill: !a.no_backfill,
        seed: a.seed,
    };
    let out = curation::curate(&records, &cfg)?;
    save_jsonl(&a.out, out.dataset.manifest())?;
    write_json(a.summary.as_deref(), &out.summary)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut records = read_annotations(&a.input)?;
    if let Some(path) = &a.manifest {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut keep = BTreeSet::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: curation::ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Parse { path: path.display().to_string(), line: i + 1, message: e.to_string() })?;
            keep.insert(entry.id);
        }
        records.retain(|r| keep.contains(&r.id));
    }
    let clips = clips_of(&records)?;
    let m = &a.model;
    let cfg = FlowConfig {
        d_model: m.d_model,
        encoder_layers: m.layers,
        heads: m.heads,
        max_events: m.max_events,
        frames: m.frames,
        latent_frames: m.latent_frames,
        channels: m.channels,
        text_tokens: m.text_tokens,
        blocks: m.blocks,
        seed: a.seed,
    };
    let bank = ClassSignatureBank::new(a.seed, m.channels, &labels_of(&records));
    let mut model = FlowModel::<f64>::new(cfg)?;
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        cond_dropout: a.cond_dropout,
        text_only: a.text_only,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = flow::train(&mut model, &clips, &bank, &tcfg)?;
    model.save(&a.out)?;
    match &a.report {
        Some(p) => write_json(Some(p), &report),
        None => Ok(()),
    }
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let model = FlowModel::<f64>::load(&a.model)?;
    let records = read_annotations(&a.input)?;
    let clips = clips_of(&records)?;
    let latents = experiment::generate_latents(&model, &clips, a.text_only, a.gs, a.steps, a.seed)?;
    let meta = serde_json::json!({ "bank_seed": model.config().seed, "gs": a.gs, "steps": a.steps, "text_only": a.text_only });
    let mut file = TensorFile::new(a.seed, meta);
    for (r, l) in records.iter().zip(&latents) {
        file.push(&r.id, &l.x);
    }
    file.save(&a.out)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let records = read_annotations(&a.input)?;
    let set = LatentSet::load(&a.latents)?;
    let bank = ClassSignatureBank::new(bank_seed(a.seed, set.bank_seed)?, set.channels()?, &labels_of(&records));
    let latents = records
        .iter()
        .map(|r| set.latent(&r.id, r.duration).ok_or_else(|| anyhow!(Error::MissingCandidate { prompt_id: r.id.clone(), source_name: a.latents.display().to_string() })))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let collar = CollarConfig { collar: a.collar, ..CollarConfig::default() };
    let rewards = RewardConfig { threshold: a.threshold, ..RewardConfig::default() };
    let eval = experiment::evaluate_latents(&latents, &clips_of(&records)?, &bank, collar, &rewards)?;
    write_json(a.out.as_deref(), &eval)
}

fn prompts_of(records: &[AnnotationRecord]) -> eventflow::Result<Vec<PromptSpec>> {
    records.iter().map(|r| Ok(PromptSpec { id: r.id.clone(), timeline: r.timeline()?, prompt: r.caption.clone() })).collect()
}

fn pairs(a: PairsArgs) -> anyhow::Result<()> {
    if a.candidates.len() < 2 {
        bail!(Error::Config("pairs needs at least two --candidates".into()));
    }
    let records = read_annotations(&a.input)?;
    let prompts = prompts_of(&records)?;
    let mut sources = Vec::new();
    let mut stored_seed = None;
    let mut channels = None;
    for spec in &a.candidates {
        let (name, path) = spec.split_once('=').ok_or_else(|| anyhow!(Error::Config(format!("candidate `{spec}` is not NAME=PATH"))))?;
        let set = LatentSet::load(Path::new(path))?;
        stored_seed = stored_seed.or(set.bank_seed);
        channels = channels.or(Some(set.channels()?));
        let latents: BTreeMap<String, SyntheticLatent> =
            records.iter().filter_map(|r| set.latent(&r.id, r.duration).map(|l| (r.id.clone(), l))).collect();
        sources.push(CandidateSource { name: name.to_string(), latents });
    }
    let bank = ClassSignatureBank::new(bank_seed(a.seed, stored_seed)?, channels.unwrap_or(0), &labels_of(&records));
    let rewards = RewardConfig { threshold: a.threshold, ..RewardConfig::default() };
    let pairs = copo::build_pairs(&prompts, &sources, &bank, &rewards)?;
    let mut file = TensorFile::new(a.seed.or(stored_seed).unwrap_or(0), serde_json::json!({ "bank_seed": stored_seed }));
    let mut written = BTreeSet::new();
    for p in &pairs {
        for (name, l) in [(&p.win_ref, &p.win), (&p.lose_ref, &p.lose)] {
            if written.insert(name.clone()) {
                file.push(name.clone(), &l.x);
            }
        }
    }
    save_jsonl(&a.out, pairs.iter().map(|p| p.record()))?;
    file.save(&a.latents_out)?;
    Ok(())
}

fn run_copo(a: CopoArgs) -> anyhow::Result<()> {
    let model = FlowModel::<f64>::load(&a.model)?;
    let records = read_annotations(&a.input)?;
    let prompts: BTreeMap<String, PromptSpec> = prompts_of(&records)?.into_iter().map(|p| (p.id.clone(), p)).collect();
    let set = LatentSet::load(&a.latents)?;
    let text = std::fs::read_to_string(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let cfg = CopoConfig {
        beta: a.beta,
        lambda: a.lambda,
        ema_decay: a.ema,
        steps: a.steps,
        batch_size: a.batch_size,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: a.seed,
    };
    let mut state = CoPOState::new(&model, &cfg)?;
    let mut inputs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PairRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse { path: a.pairs.display().to_string(), line: i + 1, message: e.to_string() })?;
        let spec = prompts.get(&rec.prompt_id).ok_or_else(|| anyhow!(Error::Config(format!("pair prompt `{}` is not in {}", rec.prompt_id, a.input.display()))))?;
        let side = |name: &str| -> anyhow::Result<Matrix<f64>> {
            set.file.get(name).cloned().ok_or_else(|| anyhow!(Error::MissingCandidate { prompt_id: rec.prompt_id.clone(), source_name: name.to_string() }))
        };
        inputs.push(PairInput { win: side(&rec.win_ref)?, lose: side(&rec.lose_ref)?, condition: state.net.condition_input(&spec.timeline, &spec.prompt)?, delta: rec.delta });
    }
    let report = copo::copo_train(&mut state, &inputs, &cfg)?;
    state.model().save(&a.out)?;
    match &a.report {
        Some(p) => write_json(Some(p), &report),
        None => Ok(()),
    }
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(|e| e.in_stage("config"))?;
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    let report = experiment::run_experiment(&cfg)?;
    for path in experiment::write_report(&report, &a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Curate(a) => curate(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Pairs(a) => pairs(a),
        Command::Copo(a) => run_copo(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

/// 1 for invalid input, 2 for failures while running valid input.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
