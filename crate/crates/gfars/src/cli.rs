//! Operator entry point: subcommands wiring the library into reproducible
//! runs.
//!
//! Every subcommand is a pure function of (inputs, config, seed): identical
//! invocations produce byte-identical artifacts, none of which embed
//! timestamps. Runs that write into an output directory also persist their
//! resolved config there. Exit codes: 0 ok, 2 config error, 3 data error,
//! 4 numeric divergence, 1 anything else.

use crate::config::{resolve_seed, RunConfig};
use crate::error::{Error, Result};
use crate::evalkit::{metrics, metrics_csv, set_counts, AveragingMode, Counts, MetricsReport};
use crate::grouping::{
    group_parts, remove_noisy_parts, BceSelector, GroupingResult, ModelScorer, SelectionPolicy,
    DEFAULT_MAX_ITER,
};
use crate::ndcore::save_checkpoint;
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::scorefield::{infer_net_config, ScoreVariant};
use crate::sde::SdeSchedule;
use crate::synthdata::{read_dataset, write_dataset, DatasetManifest, MixedPartSet, Split};
use crate::train::{
    load_training_state, run as train_run, write_history, TrainState,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Default set counts per split, sized to the papered ~87/13 train/test
/// ratio.
pub fn default_sets(split: Split) -> usize {
    match split {
        Split::Train => 1000,
        Split::Test => 150,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "gfars",
    about = "Score-based auto-regressive grouping of mixed 3D part sets",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic mixed-part dataset split (JSONL + manifest).
    GenData(GenDataOpts),
    /// Train a selection network from a run config.
    Train(TrainOpts),
    /// Group every set in a dataset with a trained checkpoint.
    Group(GroupOpts),
    /// Score prediction files against ground truth.
    Eval(EvalOpts),
    /// Run one ablation: variant swap, sampler swap, or a step sweep.
    Ablate(AblateOpts),
    /// Zero-shot noisy-part removal: one selection pass per set.
    Denoise(DenoiseOpts),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(v: SplitArg) -> Split {
        match v {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Pc,
    Em,
}

impl From<KindArg> for SamplerKind {
    fn from(v: KindArg) -> SamplerKind {
        match v {
            KindArg::Pc => SamplerKind::Pc,
            KindArg::Em => SamplerKind::Em,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Gnn,
    Mlp,
    Bce,
}

impl From<VariantArg> for ScoreVariant {
    fn from(v: VariantArg) -> ScoreVariant {
        match v {
            VariantArg::Gnn => ScoreVariant::Gnn,
            VariantArg::Mlp => ScoreVariant::Mlp,
            VariantArg::Bce => ScoreVariant::Bce,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataOpts {
    /// Output JSONL file; the manifest lands beside it as
    /// <stem>.manifest.toml.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of sets (default: 1000 train, 150 test).
    #[arg(long)]
    pub sets: Option<usize>,
    /// Probability of mixing 2 shapes instead of 3.
    #[arg(long)]
    pub mix2_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Points sampled per part surface.
    #[arg(long)]
    pub points_per_part: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainOpts {
    /// Run config (TOML). Flags below override file values.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Resume from a training checkpoint (epoch-NNNN.ckpt).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GroupOpts {
    /// Model checkpoint (best.ckpt, final.ckpt, or a training snapshot).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset JSONL to group.
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSONL, one GroupingResult per line ordered by set_id.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional run config supplying sched/sampler settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// How to interpret the checkpoint's trunk.
    #[arg(long, value_enum, default_value = "gnn")]
    pub variant: VariantArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<KindArg>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Concurrent grouping episodes (output order is unaffected).
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Also render one SVG per set into this directory.
    #[arg(long)]
    pub svg_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EvalMode {
    Single,
    Overall,
    Both,
}

#[derive(Args, Debug)]
pub struct EvalOpts {
    /// Prediction JSONL (GroupingResult per line).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset JSONL.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: EvalMode,
    /// Also write metrics.csv and summary.json here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateVariant {
    /// Deterministic BCE head instead of the gradient field.
    NoGf,
    /// Per-part MLP score instead of the GNN.
    NoGraph,
    /// Euler-Maruyama sampler instead of predictor-corrector.
    Em,
    /// Sweep sampling steps over {100..600} for both samplers.
    Steps,
}

#[derive(Args, Debug)]
pub struct AblateOpts {
    #[arg(long, value_enum)]
    pub variant: AblateVariant,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV (printed to stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steps for the non-sweep variants.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct DenoiseOpts {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset JSONL of shape + distractor sets.
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSONL, one record per set ordered by set_id.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "gnn")]
    pub variant: VariantArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Parse argv, dispatch, and map errors to exit codes.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData(o) => gen_data(o),
        Command::Train(o) => {
            let summary = train_cmd(o)?;
            print!("{summary}");
            Ok(())
        }
        Command::Group(o) => group_cmd(o).map(|_| ()),
        Command::Eval(o) => {
            let text = eval_cmd(o)?;
            print!("{text}");
            Ok(())
        }
        Command::Ablate(o) => {
            let table = ablate_cmd(o)?;
            if o.out.is_none() {
                print!("{table}");
            }
            Ok(())
        }
        Command::Denoise(o) => denoise_cmd(o).map(|_| ()),
    }
}

/// Resolve the manifest a gen-data invocation describes.
pub fn resolve_manifest(opts: &GenDataOpts) -> Result<DatasetManifest> {
    let split: Split = opts.split.into();
    let defaults = DatasetManifest {
        split,
        sets: default_sets(split),
        ..DatasetManifest::default()
    };
    let manifest = DatasetManifest {
        split,
        sets: opts.sets.unwrap_or(defaults.sets),
        mix2_prob: opts.mix2_prob.unwrap_or(defaults.mix2_prob),
        points_per_part: opts.points_per_part.unwrap_or(defaults.points_per_part),
        seed: resolve_seed(opts.seed, defaults.seed)?,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn manifest_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    out.with_file_name(format!("{stem}.manifest.toml"))
}

pub fn gen_data(opts: &GenDataOpts) -> Result<()> {
    let manifest = resolve_manifest(opts)?;
    let sets = crate::synthdata::build_dataset(&manifest)?;
    if let Some(dir) = opts.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_dataset(&sets, &opts.out)?;
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
    std::fs::write(manifest_path(&opts.out), text)?;
    Ok(())
}

pub fn train_cmd(opts: &TrainOpts) -> Result<String> {
    let mut cfg = RunConfig::load(&opts.config)?;
    cfg.apply_env_seed()?;
    if let Some(seed) = opts.seed {
        cfg.override_seed(seed);
    }
    if let Some(dir) = &opts.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(epochs) = opts.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;

    let train_sets = read_dataset(&cfg.train_data)?;
    let val_sets = read_dataset(&cfg.val_data)?;
    cfg.persist(&cfg.out_dir)?;

    let mut state = match &opts.resume {
        Some(path) => load_training_state(path)?,
        None => TrainState::init(cfg.encoder.feature_dim, &cfg.net, cfg.train.seed)?,
    };
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let history = train_run(
        &mut state,
        &train_sets,
        &val_sets,
        &cfg.net,
        &cfg.sched,
        &cfg.train,
        Some(&ckpt_dir),
    )?;
    write_history(&history, cfg.out_dir.join("history.csv"))?;
    save_checkpoint(&state.params, ckpt_dir.join("final.ckpt"))?;

    let best = match state.best() {
        Some((epoch, f1)) => format!("best val f1 {f1:.4} at epoch {epoch}"),
        None => "no validation pass ran".to_string(),
    };
    Ok(format!(
        "trained {} epochs ({} steps); {best}\nartifacts in {}\n",
        state.epochs_done(),
        state.global_step(),
        cfg.out_dir.display()
    ))
}

/// Build the selection policy a checkpoint + variant flag describe.
fn load_policy(
    ckpt: &Path,
    variant: ScoreVariant,
    sched: SdeSchedule,
) -> Result<Box<dyn SelectionPolicy + Sync + Send>> {
    let params = crate::train::load_inference_params(ckpt)?;
    let net = infer_net_config(&params, variant)?;
    Ok(match variant {
        ScoreVariant::Bce => Box::new(BceSelector::new(params, net)?),
        _ => Box::new(ModelScorer::new(params, net, sched)?),
    })
}

/// Run grouping over all sets on `workers` threads; results come back in
/// set_id order regardless of completion order.
pub fn group_all(
    policy: &(dyn SelectionPolicy + Sync),
    sets: &[MixedPartSet],
    sched: &SdeSchedule,
    sampler: &SamplerConfig,
    max_iter: usize,
    workers: usize,
) -> Result<Vec<GroupingResult>> {
    if workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut results = pool.install(|| {
        use rayon::prelude::*;
        sets.par_iter()
            .map(|set| group_parts(policy, set, sched, sampler, max_iter))
            .collect::<Result<Vec<_>>>()
    })?;
    results.sort_by(|a, b| a.set_id.cmp(&b.set_id));
    Ok(results)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a predictions file: one GroupingResult JSON object per line.
pub fn read_predictions(path: &Path) -> Result<Vec<GroupingResult>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let result: GroupingResult = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(result);
    }
    Ok(out)
}

pub fn group_cmd(opts: &GroupOpts) -> Result<Vec<GroupingResult>> {
    let (sched, mut sampler, mut max_iter) = match &opts.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.sched, cfg.sampler, cfg.max_iter)
        }
        None => (
            SdeSchedule::default(),
            SamplerConfig::default(),
            DEFAULT_MAX_ITER,
        ),
    };
    sampler.seed = resolve_seed(opts.seed, sampler.seed)?;
    if let Some(steps) = opts.steps {
        sampler.steps = steps;
    }
    if let Some(kind) = opts.sampler {
        sampler.kind = kind.into();
    }
    if let Some(m) = opts.max_iter {
        max_iter = m;
    }
    let policy = load_policy(&opts.ckpt, opts.variant.into(), sched)?;
    let sets = read_dataset(&opts.data)?;
    let results = group_all(policy.as_ref(), &sets, &sched, &sampler, max_iter, opts.workers)?;
    write_jsonl(&results, &opts.out)?;
    if let Some(dir) = &opts.svg_dir {
        std::fs::create_dir_all(dir)?;
        for (set, result) in sets.iter().zip(&results) {
            // results are sorted by set_id; realign to generation order
            let matched = results
                .iter()
                .find(|r| r.set_id == set.set_id)
                .unwrap_or(result);
            std::fs::write(
                dir.join(format!("{}.svg", set.set_id)),
                render_svg(set, matched),
            )?;
        }
    }
    Ok(results)
}

/// Pair predictions with ground truth by set_id and accumulate counts.
/// Prediction and dataset files must cover exactly the same sets.
pub fn score_predictions(
    preds: &[GroupingResult],
    gt_sets: &[MixedPartSet],
) -> Result<Vec<(String, Counts)>> {
    let by_id: BTreeMap<&str, &MixedPartSet> =
        gt_sets.iter().map(|s| (s.set_id.as_str(), s)).collect();
    if by_id.len() != gt_sets.len() {
        return Err(Error::Dataset("duplicate set_id in ground truth".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut scored = Vec::with_capacity(preds.len());
    for pred in preds {
        let set = by_id.get(pred.set_id.as_str()).ok_or_else(|| {
            Error::Dataset(format!("prediction {}: no such set in ground truth", pred.set_id))
        })?;
        if !seen.insert(pred.set_id.as_str()) {
            return Err(Error::Dataset(format!(
                "duplicate prediction for set {}",
                pred.set_id
            )));
        }
        pred.validate(&set.part_ids())?;
        let gt = set.gt_groups().ok_or_else(|| {
            Error::Dataset(format!("set {}: ground truth has no labels", set.set_id))
        })?;
        scored.push((
            pred.set_id.clone(),
            set_counts(&pred.groups, &pred.residual, &gt)?,
        ));
    }
    if seen.len() != gt_sets.len() {
        return Err(Error::Dataset(format!(
            "predictions cover {} of {} ground-truth sets",
            seen.len(),
            gt_sets.len()
        )));
    }
    scored.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(scored)
}

/// Render the paper-style metric block; `both` prints "single / overall".
pub fn render_metrics(
    single: &MetricsReport,
    overall: &MetricsReport,
    mode: EvalMode,
) -> String {
    let row = |name: &str, s: f64, o: f64| match mode {
        EvalMode::Single => format!("{name} {s:.3}\n"),
        EvalMode::Overall => format!("{name} {o:.3}\n"),
        EvalMode::Both => format!("{name} {s:.3} / {o:.3}\n"),
    };
    let mut out = format!("sets {}\n", single.per_set.len());
    out.push_str(&row("precision", single.precision, overall.precision));
    out.push_str(&row("recall", single.recall, overall.recall));
    out.push_str(&row("f1", single.f1, overall.f1));
    out
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    single: SummaryLine<'a>,
    overall: SummaryLine<'a>,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    mode: &'a AveragingMode,
    precision: f64,
    recall: f64,
    f1: f64,
}

fn summary_line(r: &MetricsReport) -> SummaryLine<'_> {
    SummaryLine {
        mode: &r.mode,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
    }
}

pub fn eval_cmd(opts: &EvalOpts) -> Result<String> {
    let preds = read_predictions(&opts.pred)?;
    let gt_sets = read_dataset(&opts.gt)?;
    let scored = score_predictions(&preds, &gt_sets)?;
    let single = metrics(&scored, AveragingMode::SingleSetAvg)?;
    let overall = metrics(&scored, AveragingMode::Overall)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&overall))?;
        let summary = EvalSummary {
            single: summary_line(&single),
            overall: summary_line(&overall),
        };
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }
    Ok(render_metrics(&single, &overall, opts.mode))
}

/// Evaluate one policy/sampler combination over a labeled dataset.
fn eval_policy(
    policy: &(dyn SelectionPolicy + Sync),
    sets: &[MixedPartSet],
    sched: &SdeSchedule,
    sampler: &SamplerConfig,
    max_iter: usize,
    workers: usize,
) -> Result<(MetricsReport, MetricsReport)> {
    let results = group_all(policy, sets, sched, sampler, max_iter, workers)?;
    let scored = score_predictions(&results, sets)?;
    Ok((
        metrics(&scored, AveragingMode::SingleSetAvg)?,
        metrics(&scored, AveragingMode::Overall)?,
    ))
}

/// Step counts swept by `ablate --variant steps`.
pub const STEP_SWEEP: [usize; 6] = [100, 200, 300, 400, 500, 600];

pub const ABLATE_HEADER: &str =
    "variant,sampler,steps,precision_single,precision_overall,recall_single,recall_overall,f1_single,f1_overall\n";

fn ablate_row(
    variant: &str,
    sampler: &str,
    steps: usize,
    single: &MetricsReport,
    overall: &MetricsReport,
) -> String {
    format!(
        "{variant},{sampler},{steps},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        single.precision,
        overall.precision,
        single.recall,
        overall.recall,
        single.f1,
        overall.f1
    )
}

pub fn ablate_cmd(opts: &AblateOpts) -> Result<String> {
    let sched = SdeSchedule::default();
    let max_iter = opts.max_iter.unwrap_or(DEFAULT_MAX_ITER);
    let sets = read_dataset(&opts.data)?;
    let base = SamplerConfig {
        seed: resolve_seed(opts.seed, SamplerConfig::default().seed)?,
        ..SamplerConfig::default()
    };
    let mut table = String::from(ABLATE_HEADER);
    match opts.variant {
        AblateVariant::NoGf => {
            let policy = load_policy(&opts.ckpt, ScoreVariant::Bce, sched)?;
            let sampler = SamplerConfig {
                steps: opts.steps.unwrap_or(base.steps),
                ..base
            };
            let (s, o) = eval_policy(policy.as_ref(), &sets, &sched, &sampler, max_iter, opts.workers)?;
            table.push_str(&ablate_row("no-gf", "none", 0, &s, &o));
        }
        AblateVariant::NoGraph => {
            let policy = load_policy(&opts.ckpt, ScoreVariant::Mlp, sched)?;
            let sampler = SamplerConfig {
                steps: opts.steps.unwrap_or(base.steps),
                ..base
            };
            let (s, o) = eval_policy(policy.as_ref(), &sets, &sched, &sampler, max_iter, opts.workers)?;
            table.push_str(&ablate_row("no-graph", "pc", sampler.steps, &s, &o));
        }
        AblateVariant::Em => {
            let policy = load_policy(&opts.ckpt, ScoreVariant::Gnn, sched)?;
            let sampler = SamplerConfig {
                kind: SamplerKind::Em,
                steps: opts.steps.unwrap_or(base.steps),
                ..base
            };
            let (s, o) = eval_policy(policy.as_ref(), &sets, &sched, &sampler, max_iter, opts.workers)?;
            table.push_str(&ablate_row("em", "em", sampler.steps, &s, &o));
        }
        AblateVariant::Steps => {
            let policy = load_policy(&opts.ckpt, ScoreVariant::Gnn, sched)?;
            for kind in [SamplerKind::Pc, SamplerKind::Em] {
                for steps in STEP_SWEEP {
                    let sampler = SamplerConfig { kind, steps, ..base };
                    let (s, o) = eval_policy(
                        policy.as_ref(),
                        &sets,
                        &sched,
                        &sampler,
                        max_iter,
                        opts.workers,
                    )?;
                    let name = match kind {
                        SamplerKind::Pc => "pc",
                        SamplerKind::Em => "em",
                    };
                    table.push_str(&ablate_row("steps", name, steps, &s, &o));
                }
            }
        }
    }
    if let Some(path) = &opts.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &table)?;
    }
    Ok(table)
}

/// One noisy-part-removal outcome. `kept` and `removed` partition the
/// set's part_ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseRecord {
    pub set_id: String,
    pub kept: Vec<u32>,
    pub removed: Vec<u32>,
}

pub fn denoise_cmd(opts: &DenoiseOpts) -> Result<Vec<DenoiseRecord>> {
    let sched = SdeSchedule::default();
    let mut sampler = SamplerConfig::default();
    sampler.seed = resolve_seed(opts.seed, sampler.seed)?;
    if let Some(steps) = opts.steps {
        sampler.steps = steps;
    }
    let policy = load_policy(&opts.ckpt, opts.variant.into(), sched)?;
    let sets = read_dataset(&opts.data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut records = pool.install(|| {
        use rayon::prelude::*;
        sets.par_iter()
            .map(|set| {
                let kept_mask = remove_noisy_parts(policy.as_ref(), set, &sched, &sampler)?;
                let (mut kept, mut removed) = (Vec::new(), Vec::new());
                for (part, keep) in set.parts.iter().zip(kept_mask) {
                    if keep {
                        kept.push(part.part_id);
                    } else {
                        removed.push(part.part_id);
                    }
                }
                Ok(DenoiseRecord {
                    set_id: set.set_id.clone(),
                    kept,
                    removed,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    records.sort_by(|a, b| a.set_id.cmp(&b.set_id));
    write_jsonl(&records, &opts.out)?;
    Ok(records)
}

const SVG_CELL: f64 = 220.0;
const SVG_PAD: f64 = 26.0;
const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];

/// Render a grouped set as an SVG grid, one cell per predicted group (plus
/// one for a non-empty residual). Points are drawn in their canonical part
/// frames with a fixed oblique projection; display only, no poses.
pub fn render_svg(set: &MixedPartSet, result: &GroupingResult) -> String {
    let mut cells: Vec<(String, Vec<u32>)> = result
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| (format!("group {i}"), g.clone()))
        .collect();
    if !result.residual.is_empty() {
        cells.push(("residual".to_string(), result.residual.clone()));
    }
    let cols = cells.len().min(4).max(1);
    let rows = cells.len().div_ceil(cols).max(1);
    let width = cols as f64 * SVG_CELL;
    let height = rows as f64 * (SVG_CELL + SVG_PAD);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"12\">\n"
    );
    svg.push_str(&format!(
        "<title>{} ({} parts)</title>\n",
        set.set_id,
        set.num_parts()
    ));
    // oblique projection of [-2,2]^3 fits inside [-2.8, 2.8]^2
    let scale = SVG_CELL / 5.6;
    for (idx, (label, ids)) in cells.iter().enumerate() {
        let cx = (idx % cols) as f64 * SVG_CELL;
        let cy = (idx / cols) as f64 * (SVG_CELL + SVG_PAD);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{label}</text>\n",
            cx + 4.0,
            cy + 14.0
        ));
        svg.push_str(&format!(
            "<rect x=\"{cx}\" y=\"{}\" width=\"{SVG_CELL}\" height=\"{SVG_CELL}\" \
             fill=\"none\" stroke=\"#999\"/>\n",
            cy + SVG_PAD
        ));
        for (pi, id) in ids.iter().enumerate() {
            let Some(part) = set.parts.iter().find(|p| p.part_id == *id) else {
                continue;
            };
            let color = PALETTE[pi % PALETTE.len()];
            let pts = part.points.data();
            for p in pts.chunks(3) {
                let u = p[0] + 0.30 * p[2];
                let v = p[1] + 0.15 * p[2];
                let x = cx + (u + 2.8) * scale;
                let y = cy + SVG_PAD + (2.8 - v) * scale;
                svg.push_str(&format!(
                    "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"1.6\" fill=\"{color}\"/>\n"
                ));
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partenc::init_encoder_params;
    use crate::scorefield::{init_score_params, ScoreNetConfig};
    use crate::seeding::derive_rng;
    use crate::synthdata::build_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen_opts(out: PathBuf) -> GenDataOpts {
        GenDataOpts {
            out,
            sets: Some(6),
            mix2_prob: None,
            seed: Some(3),
            split: SplitArg::Train,
            points_per_part: Some(6),
        }
    }

    /// Write a random-weights checkpoint and return its path.
    fn tiny_ckpt(dir: &Path, variant: ScoreVariant) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut params = crate::ndcore::ModelParams::new();
        init_encoder_params(&mut params, 8, &mut rng).unwrap();
        let net = ScoreNetConfig {
            variant,
            layers: 2,
            hidden: 8,
            time_embed_dim: 4,
            fourier_scale: 1.0,
        };
        init_score_params(&mut params, &net, 8, &mut rng).unwrap();
        let path = dir.join(format!("{}.ckpt", variant.as_str()));
        save_checkpoint(&params, &path).unwrap();
        path
    }

    fn tiny_data(dir: &Path, sets: usize, seed: u64) -> PathBuf {
        let manifest = DatasetManifest {
            sets,
            points_per_part: 6,
            seed,
            ..DatasetManifest::default()
        };
        let data = build_dataset(&manifest).unwrap();
        let path = dir.join(format!("data-{seed}.jsonl"));
        write_dataset(&data, &path).unwrap();
        path
    }

    #[test]
    fn gen_data_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        gen_data(&gen_opts(a.clone())).unwrap();
        gen_data(&gen_opts(b.clone())).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let ma = std::fs::read(manifest_path(&a)).unwrap();
        let mb = std::fs::read(manifest_path(&b)).unwrap();
        assert_eq!(ma, mb);
        assert!(!ma.is_empty());
    }

    #[test]
    fn gen_data_mix2_prob_one_gives_two_groups_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("two.jsonl");
        let mut opts = gen_opts(out.clone());
        opts.mix2_prob = Some(1.0);
        opts.sets = Some(12);
        gen_data(&opts).unwrap();
        for set in read_dataset(&out).unwrap() {
            assert_eq!(set.gt_groups().unwrap().len(), 2, "set {}", set.set_id);
        }
    }

    #[test]
    fn default_split_sizes_mirror_train_test_ratio() {
        let train = default_sets(Split::Train) as f64;
        let test = default_sets(Split::Test) as f64;
        let ratio = train / (train + test);
        assert!((0.85..=0.89).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn eval_of_exact_predictions_prints_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let gt_path = tiny_data(dir.path(), 5, 41);
        let sets = read_dataset(&gt_path).unwrap();
        let preds: Vec<GroupingResult> = sets
            .iter()
            .map(|s| {
                let groups = s.gt_groups().unwrap();
                GroupingResult {
                    set_id: s.set_id.clone(),
                    iterations_used: groups.len(),
                    groups,
                    residual: vec![],
                }
            })
            .collect();
        let pred_path = dir.path().join("pred.jsonl");
        write_jsonl(&preds, &pred_path).unwrap();
        let text = eval_cmd(&EvalOpts {
            pred: pred_path,
            gt: gt_path,
            mode: EvalMode::Both,
            out_dir: Some(dir.path().join("metrics")),
        })
        .unwrap();
        assert!(text.contains("precision 1.000 / 1.000"), "{text}");
        assert!(text.contains("recall 1.000 / 1.000"), "{text}");
        assert!(text.contains("f1 1.000 / 1.000"), "{text}");
        let csv = std::fs::read_to_string(dir.path().join("metrics/metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6); // header + 5 sets
        let summary = std::fs::read_to_string(dir.path().join("metrics/summary.json")).unwrap();
        assert!(summary.contains("\"single\"") && summary.contains("\"overall\""));
    }

    #[test]
    fn eval_rejects_mismatched_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let gt_path = tiny_data(dir.path(), 3, 42);
        let sets = read_dataset(&gt_path).unwrap();
        let preds: Vec<GroupingResult> = sets
            .iter()
            .take(2)
            .map(|s| GroupingResult {
                set_id: s.set_id.clone(),
                groups: s.gt_groups().unwrap(),
                residual: vec![],
                iterations_used: 1,
            })
            .collect();
        let pred_path = dir.path().join("partial.jsonl");
        write_jsonl(&preds, &pred_path).unwrap();
        let err = eval_cmd(&EvalOpts {
            pred: pred_path,
            gt: gt_path,
            mode: EvalMode::Both,
            out_dir: None,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn group_fixed_seed_writes_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_ckpt(dir.path(), ScoreVariant::Gnn);
        let data = tiny_data(dir.path(), 3, 43);
        let run = |out: PathBuf, workers: usize| {
            group_cmd(&GroupOpts {
                ckpt: ckpt.clone(),
                data: data.clone(),
                out,
                config: None,
                variant: VariantArg::Gnn,
                seed: Some(11),
                steps: Some(40),
                sampler: None,
                max_iter: None,
                workers,
                svg_dir: None,
            })
            .unwrap()
        };
        let (a, b) = (dir.path().join("ga.jsonl"), dir.path().join("gb.jsonl"));
        run(a.clone(), 1);
        run(b.clone(), 3); // worker count must not affect bytes
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());
        assert!(!bytes_a.is_empty());
        // output is one valid GroupingResult per line, sorted by set_id
        let results = read_predictions(&a).unwrap();
        assert_eq!(results.len(), 3);
        assert!(results.windows(2).all(|w| w[0].set_id <= w[1].set_id));
    }

    #[test]
    fn group_emits_svg_per_set() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_ckpt(dir.path(), ScoreVariant::Gnn);
        let data = tiny_data(dir.path(), 2, 44);
        let svg_dir = dir.path().join("svg");
        group_cmd(&GroupOpts {
            ckpt,
            data: data.clone(),
            out: dir.path().join("g.jsonl"),
            config: None,
            variant: VariantArg::Gnn,
            seed: Some(11),
            steps: Some(30),
            sampler: None,
            max_iter: None,
            workers: 1,
            svg_dir: Some(svg_dir.clone()),
        })
        .unwrap();
        for set in read_dataset(&data).unwrap() {
            let svg =
                std::fs::read_to_string(svg_dir.join(format!("{}.svg", set.set_id))).unwrap();
            let points: usize = set.parts.iter().map(|p| p.points.shape()[0]).sum();
            assert_eq!(svg.matches("<circle").count(), points, "set {}", set.set_id);
            assert!(svg.starts_with("<svg"));
        }
    }

    #[test]
    fn denoise_records_partition_ids() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_ckpt(dir.path(), ScoreVariant::Gnn);
        let sets: Vec<MixedPartSet> = (0..2)
            .map(|i| {
                crate::synthdata::build_noisy_set(
                    format!("noisy-{i}"),
                    crate::synthdata::ShapeKind::Lamplike,
                    2,
                    6,
                    &mut derive_rng(50, "cli-denoise", i),
                )
                .unwrap()
            })
            .collect();
        let data = dir.path().join("noisy.jsonl");
        write_dataset(&sets, &data).unwrap();
        let out = dir.path().join("denoised.jsonl");
        let records = denoise_cmd(&DenoiseOpts {
            ckpt,
            data,
            out: out.clone(),
            variant: VariantArg::Gnn,
            seed: Some(7),
            steps: Some(30),
            workers: 1,
        })
        .unwrap();
        assert_eq!(records.len(), 2);
        for (record, set) in records.iter().zip(&sets) {
            let mut ids = record.kept.clone();
            ids.extend(&record.removed);
            ids.sort_unstable();
            assert_eq!(ids, set.part_ids());
        }
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn ablate_steps_emits_table_shaped_like_the_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_ckpt(dir.path(), ScoreVariant::Gnn);
        let data = tiny_data(dir.path(), 2, 45);
        let out = dir.path().join("steps.csv");
        let table = ablate_cmd(&AblateOpts {
            variant: AblateVariant::Steps,
            ckpt,
            data,
            out: Some(out.clone()),
            seed: Some(5),
            steps: None,
            max_iter: None,
            workers: 1,
        })
        .unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], ABLATE_HEADER.trim_end());
        assert_eq!(lines.len(), 1 + 2 * STEP_SWEEP.len());
        for kind in ["pc", "em"] {
            for steps in STEP_SWEEP {
                assert!(
                    lines.iter().any(|l| l.starts_with(&format!("steps,{kind},{steps},"))),
                    "missing row {kind}/{steps}"
                );
            }
        }
        assert_eq!(std::fs::read_to_string(&out).unwrap(), table);
    }

    #[test]
    fn ablate_single_variants_emit_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path(), 2, 46);
        for (variant, ckpt_variant, prefix) in [
            (AblateVariant::NoGf, ScoreVariant::Bce, "no-gf,none,"),
            (AblateVariant::NoGraph, ScoreVariant::Mlp, "no-graph,pc,"),
            (AblateVariant::Em, ScoreVariant::Gnn, "em,em,"),
        ] {
            let ckpt = tiny_ckpt(dir.path(), ckpt_variant);
            let table = ablate_cmd(&AblateOpts {
                variant,
                ckpt,
                data: data.clone(),
                out: None,
                seed: Some(5),
                steps: Some(30),
                max_iter: None,
                workers: 1,
            })
            .unwrap();
            let lines: Vec<&str> = table.lines().collect();
            assert_eq!(lines.len(), 2, "{table}");
            assert!(lines[1].starts_with(prefix), "{table}");
        }
    }

    #[test]
    fn train_cmd_writes_run_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let train_data = tiny_data(dir.path(), 4, 48);
        let val_data = tiny_data(dir.path(), 2, 49);
        let out_dir = dir.path().join("run");
        let mut cfg = RunConfig::default();
        cfg.out_dir = out_dir.clone();
        cfg.train_data = train_data;
        cfg.val_data = val_data.clone();
        cfg.test_data = val_data;
        cfg.encoder.feature_dim = 8;
        cfg.net = ScoreNetConfig {
            layers: 2,
            hidden: 8,
            time_embed_dim: 4,
            fourier_scale: 1.0,
            ..ScoreNetConfig::default()
        };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 4;
        cfg.train.eval_every = 1;
        cfg.sampler.steps = 30;
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();

        let summary = train_cmd(&TrainOpts {
            config: cfg_path,
            out_dir: None,
            seed: Some(9),
            epochs: None,
            resume: None,
        })
        .unwrap();
        assert!(summary.contains("trained 2 epochs"), "{summary}");
        for artifact in [
            "run-config.toml",
            "history.csv",
            "checkpoints/best.ckpt",
            "checkpoints/final.ckpt",
            "checkpoints/epoch-0001.ckpt",
        ] {
            assert!(out_dir.join(artifact).is_file(), "missing {artifact}");
        }
        // the persisted config reflects the seed override
        let persisted = RunConfig::load(&out_dir.join("run-config.toml")).unwrap();
        assert_eq!(persisted.train.seed, 9);
        assert_eq!(persisted.sampler.seed, 9);
        let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
        assert!(history.starts_with("step,epoch,loss,val_f1\n"));
        assert!(history.lines().count() > 1);
    }

    #[test]
    fn variant_checkpoint_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_ckpt(dir.path(), ScoreVariant::Mlp);
        let data = tiny_data(dir.path(), 1, 47);
        let err = group_cmd(&GroupOpts {
            ckpt,
            data,
            out: dir.path().join("x.jsonl"),
            config: None,
            variant: VariantArg::Gnn,
            seed: None,
            steps: Some(20),
            sampler: None,
            max_iter: None,
            workers: 1,
            svg_dir: None,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_files_map_to_data_exit_code() {
        let err = eval_cmd(&EvalOpts {
            pred: PathBuf::from("/nonexistent/pred.jsonl"),
            gt: PathBuf::from("/nonexistent/gt.jsonl"),
            mode: EvalMode::Both,
            out_dir: None,
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn cli_parses_spec_shaped_invocations() {
        use clap::Parser;
        let cli = Cli::try_parse_from([
            "gfars", "gen-data", "--out", "d.jsonl", "--sets", "100", "--seed", "7",
            "--mix2-prob", "1.0", "--split", "test",
        ])
        .unwrap();
        match cli.cmd {
            Command::GenData(o) => {
                assert_eq!(o.sets, Some(100));
                assert_eq!(o.seed, Some(7));
            }
            other => panic!("wrong command {other:?}"),
        }
        for argv in [
            vec!["gfars", "train", "--config", "run.toml"],
            vec![
                "gfars", "group", "--ckpt", "best.ckpt", "--data", "test.jsonl", "--out",
                "pred.jsonl", "--workers", "4",
            ],
            vec!["gfars", "eval", "--pred", "p.jsonl", "--gt", "g.jsonl", "--mode", "both"],
            vec![
                "gfars", "ablate", "--variant", "steps", "--ckpt", "c.ckpt", "--data",
                "d.jsonl",
            ],
            vec!["gfars", "denoise", "--ckpt", "c.ckpt", "--data", "d.jsonl", "--out", "o.jsonl"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
    }
}
