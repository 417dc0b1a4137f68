//! Single-target and multi-target protocols, baselines and the ablation
//! matrix on synthetic domains.
//!
//! Datasets are generated once per protocol from `data_seed`; each run seed
//! then pretrains its own source model and trains every requested method
//! from it. Runs are cached by (method flags, target selection, seed), so a
//! configuration shared between the protocol table and the ablation matrix
//! is trained only once.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evalmetrics::{aggregate, evaluate, score_dataset, select_threshold, MetricsReport, ScoreSet, SeedReport};
use crate::losses::LossConfig;
use crate::nets::ModelBundle;
use crate::rng::{derive_seed, stream};
use crate::stylizer::{build_aux_domain, AuxDomain, StylizerConfig};
use crate::synthdata::{
    fractions, generate_domain, make_fewshot_target, pool, split_dataset, BatchSizes, DataRole, DomainDataset, DomainSpec, DomainTag,
    TEST, TRAIN, VAL,
};
use crate::trainer::{pretrain_source, PretrainConfig, PretrainOutcome, StepRecord, TrainConfig, TrainData, TrainState, Trainer};

/// Which data and loss terms a method uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MethodFlags {
    pub use_target: bool,
    pub use_aux: bool,
    pub use_lfc: bool,
    pub use_cont: bool,
    pub use_adv: bool,
    /// Two-stage adversarial schedule (only meaningful with `use_adv`).
    pub progressive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    pub flags: MethodFlags,
}

impl MethodConfig {
    fn new(name: &str, use_target: bool, use_aux: bool, use_lfc: bool, use_cont: bool, use_adv: bool) -> Self {
        MethodConfig {
            name: name.to_string(),
            flags: MethodFlags {
                use_target,
                use_aux,
                use_lfc,
                use_cont,
                use_adv,
                progressive: true,
            },
        }
    }

    /// The pretrained source model, evaluated as is.
    pub fn source_only() -> Self {
        Self::new("source-only", false, false, false, false, false)
    }

    /// Cross-entropy fine-tuning on source plus the few-shot target.
    pub fn joint() -> Self {
        Self::new("joint", true, false, false, false, false)
    }

    pub fn joint_aux() -> Self {
        Self::new("joint+aux", true, true, false, false, false)
    }

    pub fn aux_lfc() -> Self {
        Self::new("aux+lfc", true, true, true, false, false)
    }

    pub fn aux_cont() -> Self {
        Self::new("aux+cont", true, true, false, true, false)
    }

    pub fn aux_lfc_cont() -> Self {
        Self::new("aux+lfc+cont", true, true, true, true, false)
    }

    pub fn aux_lfc_adv() -> Self {
        Self::new("aux+lfc+adv", true, true, true, false, true)
    }

    /// The full method.
    pub fn sasa() -> Self {
        Self::new("sasa", true, true, true, true, true)
    }

    pub fn sasa_non_progressive() -> Self {
        let mut m = Self::new("sasa-nonprogressive", true, true, true, true, true);
        m.flags.progressive = false;
        m
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|m| m.name == name)
            .ok_or_else(|| invalid("method", format!("unknown method `{name}`")))
    }

    /// Every named method: the eight ablation configurations plus the
    /// non-progressive variant.
    pub fn all() -> Vec<Self> {
        vec![
            Self::source_only(),
            Self::joint(),
            Self::joint_aux(),
            Self::aux_lfc(),
            Self::aux_cont(),
            Self::aux_lfc_cont(),
            Self::aux_lfc_adv(),
            Self::sasa(),
            Self::sasa_non_progressive(),
        ]
    }

    /// Methods of the main comparison table.
    pub fn table() -> Vec<Self> {
        vec![Self::source_only(), Self::joint(), Self::sasa()]
    }

    /// The training configuration this method runs with.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let f = self.flags;
        TrainConfig {
            batch: BatchSizes {
                source: base.batch.source,
                target: if f.use_target { base.batch.target } else { 0 },
                aux: if f.use_aux { base.batch.aux } else { 0 },
            },
            loss: LossConfig {
                lambda1: if f.use_cont { base.loss.lambda1 } else { 0.0 },
                lambda2: if f.use_adv { base.loss.lambda2 } else { 0.0 },
                lambda3: if f.use_lfc { base.loss.lambda3 } else { 0.0 },
                margin: base.loss.margin,
            },
            progressive: f.progressive,
            ..base.clone()
        }
    }

    fn trains(&self) -> bool {
        self.flags.use_target || self.flags.use_aux
    }
}

/// A complete benchmark description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
    /// Subject fractions of the source `train` / `val` / `test` splits.
    pub source_splits: [f64; 3],
    /// Subject fractions of each target's `train` / `test` splits.
    pub target_splits: [f64; 2],
    pub fewshot_subjects: usize,
    /// Seed of the few-shot draw; fixed across run seeds so every method and
    /// seed sees the same few-shot set.
    pub fewshot_seed: u64,
    /// Seed of domain generation, splitting and aux construction.
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub stylizer: StylizerConfig,
    /// Position in `targets` of the ablation target.
    pub ablation_target: usize,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            source: DomainSpec::source(),
            targets: (1..=3).map(|k| DomainSpec::target_preset(k).expect("preset exists")).collect(),
            source_splits: [0.8, 0.1, 0.1],
            target_splits: [0.5, 0.5],
            fewshot_subjects: 1,
            fewshot_seed: 0,
            data_seed: 0,
            seeds: vec![0, 1, 2],
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            stylizer: StylizerConfig::default(),
            ablation_target: 1,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(invalid("protocol.targets", "need at least one target"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("protocol.seeds", "need at least one seed"));
        }
        if self.ablation_target >= self.targets.len() {
            return Err(invalid("protocol.ablation_target", "outside the target list"));
        }
        if self.fewshot_subjects == 0 {
            return Err(invalid("protocol.fewshot_subjects", "must be at least 1"));
        }
        self.source.validate()?;
        for t in &self.targets {
            t.validate()?;
            if !matches!(t.domain, DomainTag::Target(_)) {
                return Err(invalid("protocol.targets", "every target spec needs a target tag"));
            }
        }
        self.train.validate()?;
        self.stylizer.validate()
    }
}

/// One target domain, split and reduced to its few-shot set.
#[derive(Clone, Debug)]
pub struct PreparedTarget {
    pub tag: DomainTag,
    pub fewshot: DomainDataset,
    pub heldout: DomainDataset,
    pub aux: AuxDomain,
}

/// All data of a protocol.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub source: DomainDataset,
    pub targets: Vec<PreparedTarget>,
}

/// Generates, splits and augments every domain of `spec`.
pub fn prepare_data(spec: &ProtocolSpec) -> Result<PreparedData> {
    spec.validate()?;
    let [tr, va, te] = spec.source_splits;
    let src = generate_domain(&spec.source, derive_seed(&[spec.data_seed, stream::SUBJECT, 0]))?;
    let src = split_dataset(&src, &fractions(&[(TRAIN, tr), (VAL, va), (TEST, te)]), derive_seed(&[spec.data_seed, stream::SPLIT, 0]))?;
    let mut targets = Vec::new();
    for (k, tspec) in spec.targets.iter().enumerate() {
        let k = k as u64 + 1;
        let [ttr, tte] = spec.target_splits;
        let t = generate_domain(tspec, derive_seed(&[spec.data_seed, stream::SUBJECT, k]))?;
        let t = split_dataset(&t, &fractions(&[(TRAIN, ttr), (TEST, tte)]), derive_seed(&[spec.data_seed, stream::SPLIT, k]))?;
        let (fewshot, heldout) = make_fewshot_target(&t, spec.fewshot_subjects, derive_seed(&[spec.fewshot_seed, stream::FEWSHOT, k]))?;
        let aux = build_aux_domain(&src, &fewshot, &spec.stylizer, derive_seed(&[spec.data_seed, stream::AUX, k]))?;
        targets.push(PreparedTarget {
            tag: tspec.domain,
            fewshot,
            heldout,
            aux,
        });
    }
    Ok(PreparedData { source: src, targets })
}

/// Targets a run trains on: one target, or all of them pooled.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetSelection {
    Single(usize),
    All,
}

impl TargetSelection {
    fn indices(&self, n: usize) -> Vec<usize> {
        match self {
            TargetSelection::Single(i) => vec![*i],
            TargetSelection::All => (0..n).collect(),
        }
    }
}

/// Everything produced by one (method, target selection, seed) run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub method: MethodConfig,
    pub selection: TargetSelection,
    pub seed: u64,
    pub report: SeedReport,
    /// Source validation, source test, then each evaluated target.
    pub scores: Vec<ScoreSet>,
    pub log: Vec<StepRecord>,
    pub models: ModelBundle<f32>,
    /// Final training state (absent for the source-only method).
    pub state: Option<TrainState>,
    /// The merged training configuration (absent for source-only).
    pub train_config: Option<TrainConfig>,
}

type RunKey = (MethodFlags, TargetSelection, u64);

/// Runs and caches protocol runs.
pub struct Bench {
    pub spec: ProtocolSpec,
    pub data: PreparedData,
    pretrained: BTreeMap<u64, PretrainOutcome>,
    runs: BTreeMap<RunKey, RunResult>,
}

impl Bench {
    pub fn new(spec: ProtocolSpec) -> Result<Self> {
        let data = prepare_data(&spec)?;
        Ok(Bench {
            spec,
            data,
            pretrained: BTreeMap::new(),
            runs: BTreeMap::new(),
        })
    }

    /// Source pretraining for `seed` (cached).
    pub fn pretrained(&mut self, seed: u64) -> Result<&PretrainOutcome> {
        if !self.pretrained.contains_key(&seed) {
            let cfg = PretrainConfig {
                seed,
                ..self.spec.pretrain.clone()
            };
            let out = pretrain_source(&self.data.source, &cfg)?;
            self.pretrained.insert(seed, out);
        }
        Ok(&self.pretrained[&seed])
    }

    /// Runs `method` on `selection` with `seed` unless already cached.
    pub fn run(&mut self, method: &MethodConfig, selection: &TargetSelection, seed: u64) -> Result<&RunResult> {
        let key = (method.flags, selection.clone(), seed);
        if !self.runs.contains_key(&key) {
            let result = self.execute(method, selection, seed)?;
            self.runs.insert(key.clone(), result);
        }
        let r = self.runs.get_mut(&key).expect("inserted above");
        // Runs with identical flags share results; keep the requested name.
        r.method.name = method.name.clone();
        Ok(r)
    }

    fn execute(&mut self, method: &MethodConfig, selection: &TargetSelection, seed: u64) -> Result<RunResult> {
        let idx = selection.indices(self.data.targets.len());
        if idx.iter().any(|&i| i >= self.data.targets.len()) {
            return Err(invalid("protocol.target", "target index out of range"));
        }
        self.pretrained(seed)?;
        let pre = &self.pretrained[&seed];
        let (models, log, state, train_config) = if method.trains() {
            let cfg = method.train_config(&TrainConfig {
                seed: derive_seed(&[seed, stream::STEP]),
                ..self.spec.train.clone()
            });
            let few_parts: Vec<&DomainDataset> = idx.iter().map(|&i| &self.data.targets[i].fewshot).collect();
            let aux_parts: Vec<&DomainDataset> = idx.iter().map(|&i| &self.data.targets[i].aux.dataset).collect();
            let few = if few_parts.len() == 1 { few_parts[0].clone() } else { pool("target-pooled", &few_parts)? };
            let aux = if aux_parts.len() == 1 { aux_parts[0].clone() } else { pool("aux-pooled", &aux_parts)? };
            let data = TrainData {
                source: &self.data.source,
                target: (cfg.batch.target > 0).then_some(&few),
                aux: (cfg.batch.aux > 0).then_some(&aux),
            };
            let teacher = (cfg.loss.lambda3 > 0.0).then_some(&pre.teacher);
            let mut trainer = Trainer::new(cfg.clone(), data, &pre.models, teacher)?;
            trainer.run()?;
            let (state, log) = trainer.into_parts();
            (state.models.clone(), log, Some(state), Some(cfg))
        } else {
            (pre.models.clone(), pre.log.clone(), None, None)
        };
        let src = &self.data.source;
        let val = score_dataset(&models, src, src.split(VAL).ok_or_else(|| invalid("protocol.source_splits", "no validation split"))?)?;
        let test = score_dataset(&models, src, src.split(TEST).ok_or_else(|| invalid("protocol.source_splits", "no test split"))?)?;
        let tau = select_threshold(&val)?;
        let mut target_scores = Vec::new();
        for &i in &idx {
            let held = &self.data.targets[i].heldout;
            debug_assert_eq!(held.role, DataRole::Heldout);
            let ix = held.split(TEST).ok_or_else(|| invalid("protocol.target_splits", "no target test split"))?;
            target_scores.push(score_dataset(&models, held, ix)?);
        }
        let report = evaluate(seed, tau, &test, &target_scores)?;
        let mut scores = vec![val, test];
        scores.extend(target_scores);
        Ok(RunResult {
            method: method.clone(),
            selection: selection.clone(),
            seed,
            report,
            scores,
            log,
            models,
            state,
            train_config,
        })
    }

    /// Seed-aggregated report of one method on one target selection.
    pub fn report(&mut self, method: &MethodConfig, selection: &TargetSelection) -> Result<MetricsReport> {
        let mut reports = Vec::new();
        for seed in self.spec.seeds.clone() {
            reports.push(self.run(method, selection, seed)?.report.clone());
        }
        aggregate(reports)
    }

    /// Replaces the adaptation config, dropping cached runs (pretraining
    /// and data are kept).
    pub fn set_train_config(&mut self, train: TrainConfig) {
        self.spec.train = train;
        self.runs.clear();
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.values()
    }
}

/// Aggregated report per (method, target) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTable {
    /// `(method name, evaluated target tag(s), report)` in table order.
    pub rows: Vec<(String, String, MetricsReport)>,
}

impl ProtocolTable {
    pub fn get(&self, method: &str, target: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|(m, t, _)| m == method && t == target).map(|(_, _, r)| r)
    }
}

/// Single-target protocol: every method on every target independently.
pub fn run_protocol_st(bench: &mut Bench, methods: &[MethodConfig]) -> Result<ProtocolTable> {
    let mut rows = Vec::new();
    for i in 0..bench.data.targets.len() {
        let tag = bench.data.targets[i].tag.to_string();
        for m in methods {
            let report = bench.report(m, &TargetSelection::Single(i))?;
            rows.push((m.name.clone(), tag.clone(), report));
        }
    }
    Ok(ProtocolTable { rows })
}

/// Multi-target protocol: one training run on the union of all few-shot
/// sets (and the pooled per-target aux sets), evaluated on every target.
pub fn run_protocol_mt(bench: &mut Bench, methods: &[MethodConfig]) -> Result<ProtocolTable> {
    let mut rows = Vec::new();
    for m in methods {
        let report = bench.report(m, &TargetSelection::All)?;
        rows.push((m.name.clone(), String::from("all"), report));
    }
    Ok(ProtocolTable { rows })
}

/// One ablation configuration and its seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: MethodFlags,
    pub source_acer: f64,
    pub target_hter: f64,
    pub source_acer_std: f64,
    pub target_hter_std: f64,
}

/// The ablation matrix on the ablation target: eight configurations plus
/// the non-progressive variant of the full method.
pub fn run_ablation(bench: &mut Bench) -> Result<Vec<AblationRow>> {
    let sel = TargetSelection::Single(bench.spec.ablation_target);
    let tag = bench.data.targets[bench.spec.ablation_target].tag.to_string();
    let mut rows = Vec::new();
    for m in MethodConfig::all() {
        let r = bench.report(&m, &sel)?;
        let src = r.mean.get("source").ok_or_else(|| Error::Degenerate(String::from("no source metrics")))?;
        let tgt = r.mean.get(&tag).ok_or_else(|| Error::Degenerate(format!("no metrics for {tag}")))?;
        rows.push(AblationRow {
            name: m.name.clone(),
            flags: m.flags,
            source_acer: src.acer,
            target_hter: tgt.hter,
            source_acer_std: r.std["source"].acer,
            target_hter_std: r.std[&tag].hter,
        });
    }
    Ok(rows)
}
