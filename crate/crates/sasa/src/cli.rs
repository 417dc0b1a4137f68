//! Command-line interface. Every command loads the merged configuration
//! (defaults, then `--config`, then `--set` overrides in order), writes a
//! snapshot of it next to its outputs, and reports failures as a single
//! `error kind=<kind> message="..."` line with a nonzero exit code.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use sasa_core::bench::{
    prepare_data, run_ablation, run_protocol_mt, run_protocol_st, Bench, MethodConfig, PreparedData, RunResult, TargetSelection,
};
use sasa_core::evalmetrics::{aggregate, evaluate, score_dataset, select_threshold, ScoreSet};
use sasa_core::nets::{image_input, ModelBundle};
use sasa_core::synthdata::{DomainDataset, DomainTag, TEST, VAL};
use sasa_core::trainer::{pretrain_source, PretrainConfig, TrainState};

use crate::config::Config;
use crate::io;
use crate::plot;

pub const CONFIG_SNAPSHOT: &str = "config.kv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const STEP_LOG: &str = "steps.csv";
pub const SCORES: &str = "scores.csv";
pub const REPORT: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "sasa", version, about = "Few-shot domain adaptation for synthetic face anti-spoofing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key=value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (overrides `run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; results land under `<out>/<protocol>/...`.
    #[arg(long, global = true, default_value = "results")]
    pub out: PathBuf,
    /// Configuration override `key=value`; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the source and target domains, their splits and few-shot sets.
    GenData(Common),
    /// Build the stylized auxiliary domain of one target and a contact sheet.
    Augment(Common),
    /// Train the source model (classification only).
    Pretrain(Common),
    /// Adapt with the configured method (default: the full method).
    Train(Common),
    /// Train a baseline: source-only, joint or joint+aux.
    Baseline(Common),
    /// Score a checkpoint on source and held-out target data.
    Eval(EvalArgs),
    /// Run every method over all seeds: `st`, `mt` or `ablation`.
    Protocol(Common),
    /// Score histograms, loss curves and a feature PCA scatter of one run.
    Plot(Common),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory (default: the run's own checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Classifies an error for the machine-readable failure line.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    use sasa_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return "config";
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidConfig { .. } => "invalid_config",
                E::Shape(_) => "shape",
                E::MissingClass { .. } => "missing_class",
                E::NotEnoughSubjects { .. } => "not_enough_subjects",
                E::InvalidPair(_) => "invalid_pair",
                E::LabelMismatch { .. } => "label_mismatch",
                E::SingleDomain(_) => "single_domain",
                E::HeldoutAccess(_) => "heldout_access",
                E::Diverged { .. } => "diverged",
                E::Degenerate(_) => "degenerate",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return "usage";
        }
    }
    "error"
}

/// The single failure line: `error kind=<kind> message="<escaped message>"`.
pub fn error_line(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error kind={} message=\"{}\"", error_kind(err), msg)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    dispatch(cli.command)
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::Augment(c) => augment(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::Train(c) => train(&c, false),
        Command::Baseline(c) => train(&c, true),
        Command::Eval(a) => eval(&a),
        Command::Protocol(c) => protocol(&c),
        Command::Plot(c) => plot_run(&c),
    }
}

pub fn load_config(c: &Common) -> Result<Config> {
    let mut sets = c.sets.clone();
    if let Some(seed) = c.seed {
        sets.push(format!("run.seed={seed}"));
    }
    Config::load(c.config.as_deref(), &sets).map_err(|e| anyhow::Error::new(ConfigError(format!("{e:#}"))))
}

/// Any failure to read, parse or validate the merged configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn save_snapshot(cfg: &Config, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_kv()).with_context(|| format!("writing snapshot in {}", dir.display()))
}

/// `<out>/<protocol>-<target tag>` for single-target protocols, `<out>/<protocol>` otherwise.
pub fn protocol_dir(out: &Path, protocol: &str, target: Option<DomainTag>) -> PathBuf {
    match target {
        Some(t) => out.join(format!("{protocol}-{t}")),
        None => out.join(protocol),
    }
}

/// Output directory of one run: `<protocol dir>/<method>/<seed>`.
pub fn run_dir(out: &Path, protocol: &str, target: Option<DomainTag>, method: &str, seed: u64) -> PathBuf {
    protocol_dir(out, protocol, target).join(method).join(seed.to_string())
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = prepare_data(&cfg.protocol)?;
    let dir = protocol_dir(&c.out, &cfg.run.protocol, None).join("data");
    save_snapshot(&cfg, &dir)?;
    io::save_dataset(&data.source, &dir.join("source"))?;
    for t in &data.targets {
        let tdir = dir.join(t.tag.to_string());
        io::save_dataset(&t.fewshot, &tdir.join("fewshot"))?;
        io::save_dataset(&t.heldout, &tdir.join("heldout"))?;
        io::save_dataset(&t.aux.dataset, &tdir.join("aux"))?;
        io::save_provenance(&t.aux.provenance, &tdir.join("aux").join("provenance.csv"))?;
    }
    println!("{}", dir.display());
    Ok(())
}

/// Number of (content, style, aux) rows on the contact sheet.
const SHEET_ROWS: usize = 8;

fn augment(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let i = cfg.target_index()?;
    let data = prepare_data(&cfg.protocol)?;
    let t = &data.targets[i];
    let dir = protocol_dir(&c.out, &cfg.run.protocol, Some(t.tag)).join("augment");
    save_snapshot(&cfg, &dir)?;
    io::save_dataset(&t.aux.dataset, &dir.join("aux"))?;
    io::save_provenance(&t.aux.provenance, &dir.join("provenance.csv"))?;
    let rows: Vec<Vec<_>> = t
        .aux
        .provenance
        .iter()
        .take(SHEET_ROWS)
        .map(|p| {
            vec![
                &data.source.samples[p.content_index].image,
                &t.fewshot.samples[p.style_index].image,
                &t.aux.dataset.samples[p.aux_index].image,
            ]
        })
        .collect();
    plot::contact_sheet(&rows, 4)?.save_png(&dir.join("contact_sheet.png"))?;
    println!("{}", dir.display());
    Ok(())
}

fn write_scores_and_report(dir: &Path, scores: &[ScoreSet], report: sasa_core::evalmetrics::SeedReport) -> Result<()> {
    io::write_scores(scores, &dir.join(SCORES))?;
    io::write_report(&aggregate(vec![report])?, &dir.join(REPORT))
}

fn pretrain(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seed = cfg.run.seed;
    let data = prepare_data(&cfg.protocol)?;
    let dir = run_dir(&c.out, &cfg.run.protocol, None, "pretrain", seed);
    save_snapshot(&cfg, &dir)?;
    let pcfg = PretrainConfig {
        seed,
        ..cfg.protocol.pretrain.clone()
    };
    let out = pretrain_source(&data.source, &pcfg)?;
    io::write_step_log(&out.log, &dir.join(STEP_LOG))?;
    let (scores, report) = score_all(&out.models, &data, None, seed)?;
    write_scores_and_report(&dir, &scores, report)?;
    // The pretraining checkpoint holds the final models with fresh optimizer state.
    let state = TrainState::fresh(&out.models, &cfg.protocol.train, out.log.len());
    io::save_checkpoint(&state.to_checkpoint(), &dir.join(CHECKPOINT_DIR))?;
    if let Some(acer) = out.val_acer {
        println!("source-val ACER {acer:.4}");
    }
    println!("{}", dir.display());
    Ok(())
}

/// Scores source validation/test and the held-out targets (`targets` = None
/// means all) and evaluates at the source-validation threshold.
fn score_all(
    models: &ModelBundle<f32>,
    data: &PreparedData,
    targets: Option<&[usize]>,
    seed: u64,
) -> Result<(Vec<ScoreSet>, sasa_core::evalmetrics::SeedReport)> {
    let src = &data.source;
    let val = score_dataset(models, src, src.split(VAL).ok_or_else(|| anyhow!("source has no validation split"))?)?;
    let test = score_dataset(models, src, src.split(TEST).ok_or_else(|| anyhow!("source has no test split"))?)?;
    let tau = select_threshold(&val)?;
    let all: Vec<usize> = (0..data.targets.len()).collect();
    let mut tscores = Vec::new();
    for &i in targets.unwrap_or(&all) {
        let held: &DomainDataset = &data.targets[i].heldout;
        let ix = held.split(TEST).ok_or_else(|| anyhow!("target has no test split"))?;
        tscores.push(score_dataset(models, held, ix)?);
    }
    let report = evaluate(seed, tau, &test, &tscores)?;
    let mut scores = vec![val, test];
    scores.extend(tscores);
    Ok((scores, report))
}

/// Writes the artifacts of one bench run into `dir`.
fn write_run(run: &RunResult, cfg: &Config, dir: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.run.method = run.method.name.clone();
    cfg.run.seed = run.seed;
    if let Some(tc) = &run.train_config {
        cfg.protocol.train = tc.clone();
    }
    save_snapshot(&cfg, dir)?;
    io::write_step_log(&run.log, &dir.join(STEP_LOG))?;
    write_scores_and_report(dir, &run.scores, run.report.clone())?;
    if let Some(state) = &run.state {
        io::save_checkpoint(&state.to_checkpoint(), &dir.join(CHECKPOINT_DIR))?;
    } else {
        let state = TrainState::fresh(&run.models, &cfg.protocol.train, run.log.len());
        io::save_checkpoint(&state.to_checkpoint(), &dir.join(CHECKPOINT_DIR))?;
    }
    Ok(())
}

const BASELINES: [&str; 3] = ["source-only", "joint", "joint+aux"];

fn train(c: &Common, baseline: bool) -> Result<()> {
    let mut cfg = load_config(c)?;
    if baseline && cfg.run.method == "sasa" && !c.sets.iter().any(|s| s.starts_with("run.method")) {
        cfg.run.method = String::from("joint");
    }
    let method = MethodConfig::by_name(&cfg.run.method)?;
    if baseline {
        ensure!(
            BASELINES.contains(&method.name.as_str()),
            "`baseline` runs one of {BASELINES:?}; got `{}` (use `train` instead)",
            method.name
        );
    }
    let i = cfg.target_index()?;
    let seed = cfg.run.seed;
    let mut bench = Bench::new(cfg.protocol.clone())?;
    let tag = bench.data.targets[i].tag;
    let dir = run_dir(&c.out, &cfg.run.protocol, Some(tag), &method.name, seed);
    let run = bench.run(&method, &TargetSelection::Single(i), seed)?;
    write_run(run, &cfg, &dir)?;
    let r = &run.report.per_domain;
    println!(
        "source ACER {:.4}  {} HTER {:.4}",
        r["source"].acer,
        tag,
        r[&tag.to_string()].hter
    );
    println!("{}", dir.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    let cfg = load_config(c)?;
    let i = cfg.target_index()?;
    let seed = cfg.run.seed;
    let data = prepare_data(&cfg.protocol)?;
    let tag = data.targets[i].tag;
    let dir = run_dir(&c.out, &cfg.run.protocol, Some(tag), &cfg.run.method, seed);
    let ck_dir = a.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_DIR));
    let state = TrainState::from_checkpoint(&io::load_checkpoint(&ck_dir)?)?;
    let out = dir.join("eval");
    save_snapshot(&cfg, &out)?;
    let (scores, report) = score_all(&state.models, &data, Some(&[i]), seed)?;
    write_scores_and_report(&out, &scores, report)?;
    println!("{}", out.display());
    Ok(())
}

fn protocol(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let mut bench = Bench::new(cfg.protocol.clone())?;
    let name = cfg.run.protocol.as_str();
    let root = protocol_dir(&c.out, name, None);
    save_snapshot(&cfg, &root)?;
    match name {
        "st" => {
            let table = run_protocol_st(&mut bench, &MethodConfig::table())?;
            io::write_protocol_table(&table, &root.join("table.csv"))?;
            for (m, t, r) in &table.rows {
                let tag: DomainTag = t.parse().map_err(|e| anyhow!("{e}"))?;
                let mdir = protocol_dir(&c.out, name, Some(tag)).join(m);
                fs::create_dir_all(&mdir)?;
                io::write_report(r, &mdir.join(REPORT))?;
            }
        }
        "mt" => {
            let table = run_protocol_mt(&mut bench, &MethodConfig::table())?;
            io::write_protocol_table(&table, &root.join("table.csv"))?;
            for (m, _, r) in &table.rows {
                fs::create_dir_all(root.join(m))?;
                io::write_report(r, &root.join(m).join(REPORT))?;
            }
        }
        "ablation" => {
            let rows = run_ablation(&mut bench)?;
            io::write_ablation_table(&rows, &root.join("table.csv"))?;
        }
        other => bail!("unknown protocol `{other}` (expected st, mt or ablation)"),
    }
    for run in bench.runs() {
        let target = match run.selection {
            TargetSelection::Single(i) => Some(bench.data.targets[i].tag),
            TargetSelection::All => None,
        };
        write_run(run, &cfg, &run_dir(&c.out, name, target, &run.method.name, run.seed))?;
    }
    println!("{}", root.join("table.csv").display());
    Ok(())
}

/// Maximum number of samples per domain in the PCA scatter.
const SCATTER_PER_DOMAIN: usize = 120;

fn plot_run(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let i = cfg.target_index()?;
    let seed = cfg.run.seed;
    let data = prepare_data(&cfg.protocol)?;
    let t = &data.targets[i];
    let dir = run_dir(&c.out, &cfg.run.protocol, Some(t.tag), &cfg.run.method, seed);
    let scores = io::read_scores(&dir.join(SCORES)).with_context(|| format!("run directory {}", dir.display()))?;
    let report = io::read_report(&dir.join(REPORT))?;
    let log = io::read_step_log(&dir.join(STEP_LOG))?;
    let state = TrainState::from_checkpoint(&io::load_checkpoint(&dir.join(CHECKPOINT_DIR))?)?;
    // Skip the source-validation set; plot source test and the targets.
    let shown: Vec<ScoreSet> = scores.into_iter().skip(1).collect();
    plot::score_histograms(&shown, report.threshold, 20)?.save_png(&dir.join("score_histograms.png"))?;
    plot::loss_curves(&log)?.save_png(&dir.join("loss_curves.png"))?;
    let mut points = Vec::new();
    let groups: [(&DomainDataset, Option<&str>); 3] = [
        (&data.source, Some(TEST)),
        (&t.heldout, Some(TEST)),
        (&t.aux.dataset, None),
    ];
    for (g, (ds, split)) in groups.iter().enumerate() {
        let ix: Vec<usize> = match split {
            Some(s) => ds.split(s).map(<[usize]>::to_vec).unwrap_or_default(),
            None => (0..ds.len()).collect(),
        };
        let step = ix.len().div_ceil(SCATTER_PER_DOMAIN).max(1);
        for &k in ix.iter().step_by(step) {
            let s = &ds.samples[k];
            let f = state.models.g.forward(&image_input::<f32>(&s.image))?;
            points.push(plot::ScatterPoint {
                features: f.iter().map(|&v| v as f64).collect(),
                group: g,
                label: s.label,
            });
        }
    }
    plot::pca_scatter(&points)?.save_png(&dir.join("pca_scatter.png"))?;
    println!("{}", dir.display());
    Ok(())
}
