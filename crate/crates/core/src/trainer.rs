//! Source pretraining, the two-stage adapted training loop and the joint
//! baseline.
//!
//! Every step draws its batch from a stream keyed by `(seed, step)`, so a run
//! restored from a checkpoint continues exactly as an uninterrupted one
//! without storing generator state. Within a step the active discriminators
//! are updated first; the generator then receives their reversed feature
//! gradients computed from the same forward pass.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evalmetrics::{error_rates, score_dataset, select_threshold};
use crate::losses::{
    classification_loss, less_forgetting_loss, progressive_adv_loss, separation_loss, semantic_alignment_loss, total_loss,
    AdversarialSchedule, LossConfig, LossParts, PairedFeatures, ProgressiveAdversarial, Stage,
};
use crate::nets::{build_models, image_input, snapshot_teacher, ArchConfig, ModelBundle, Network, Rows, TeacherSnapshot};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, stream};
use crate::synthdata::{compose_batch, BatchSizes, DataRole, DomainDataset, DomainKind, Label, VAL};

/// When the schedule moves from the target/aux stage to the
/// combined/source stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StagePolicy {
    /// Switch at `round(fraction · total)`.
    FixedFraction(f64),
    /// Switch once the mean target/aux discriminator accuracy over the last
    /// `window` steps drops below `threshold`, and at the latest at
    /// `round(fallback · total)`.
    Accuracy { window: usize, threshold: f64, fallback: f64 },
}

impl Default for StagePolicy {
    fn default() -> Self {
        StagePolicy::FixedFraction(0.3)
    }
}

impl StagePolicy {
    pub fn accuracy_default() -> Self {
        StagePolicy::Accuracy {
            window: 50,
            threshold: 0.55,
            fallback: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |f: f64| f > 0.0 && f < 1.0;
        match *self {
            StagePolicy::FixedFraction(f) if !inside(f) => Err(invalid("trainer.switch_fraction", "must lie in (0, 1)")),
            StagePolicy::Accuracy { window, threshold, fallback } => {
                if window == 0 {
                    Err(invalid("trainer.switch_window", "must be positive"))
                } else if !(0.0..=1.0).contains(&threshold) {
                    Err(invalid("trainer.switch_accuracy", "must lie in [0, 1]"))
                } else if !inside(fallback) {
                    Err(invalid("trainer.switch_fallback", "must lie in (0, 1)"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Stage for `step` given the current stage and the recent target/aux
/// discriminator accuracies. Never moves back from CS to TA.
pub fn stage_controller(current: Stage, step: usize, total: usize, policy: &StagePolicy, acc_history: &[f64]) -> Stage {
    if current == Stage::CS {
        return Stage::CS;
    }
    let at = |f: f64| libm_round(f * total as f64) as usize;
    match *policy {
        StagePolicy::FixedFraction(f) => {
            if step >= at(f) {
                Stage::CS
            } else {
                Stage::TA
            }
        }
        StagePolicy::Accuracy { window, threshold, fallback } => {
            if step >= at(fallback) {
                return Stage::CS;
            }
            if acc_history.len() >= window {
                let recent = &acc_history[acc_history.len() - window..];
                let mean = recent.iter().sum::<f64>() / window as f64;
                if mean < threshold {
                    return Stage::CS;
                }
            }
            Stage::TA
        }
    }
}

fn libm_round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

/// Configuration of the adapted training loop (and of the baselines, which
/// are the same loop with some terms and slices switched off).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Learning rate of both discriminators (other Adam settings follow `adam`).
    pub disc_lr: f64,
    pub batch: BatchSizes,
    pub steps: usize,
    pub stage_policy: StagePolicy,
    pub loss: LossConfig,
    pub seed: u64,
    /// Adversarial losses see live-class features only.
    pub live_only_adv: bool,
    /// Two-stage schedule; when off, both discriminators are active from step 0.
    pub progressive: bool,
    /// Keep the target/aux discriminator active in stage CS.
    pub keep_ta: bool,
    /// Start `G` (and `H`) from the pretrained source model.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig {
                lr: 1e-4,
                weight_decay: 1e-5,
                ..AdamConfig::default()
            },
            disc_lr: 1e-3,
            batch: BatchSizes::default(),
            steps: 2000,
            stage_policy: StagePolicy::default(),
            loss: LossConfig::default(),
            seed: 0,
            live_only_adv: true,
            progressive: true,
            keep_ta: false,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        AdamConfig {
            lr: self.disc_lr,
            ..self.adam
        }
        .validate()?;
        self.loss.validate()?;
        self.stage_policy.validate()?;
        if self.steps == 0 {
            return Err(invalid("trainer.steps", "must be positive"));
        }
        if self.batch.source == 0 {
            return Err(invalid("batch.source", "must be positive"));
        }
        Ok(())
    }
}

/// Source-only pretraining of `G_0` and `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: ArchConfig,
    pub adam: AdamConfig,
    pub batch_source: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            arch: ArchConfig::default(),
            adam: AdamConfig {
                lr: 1e-3,
                weight_decay: 1e-5,
                ..AdamConfig::default()
            },
            batch_source: 64,
            steps: 1000,
            seed: 0,
        }
    }
}

/// Number of optimizer updates applied to each network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub g: u64,
    pub h: u64,
    pub d_ta: u64,
    pub d_cs: u64,
}

/// One row of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub l_cls: f64,
    pub l_sem: f64,
    pub l_sep: f64,
    pub l_adv_ta: f64,
    pub l_adv_cs: f64,
    pub l_lfc: f64,
    pub l_total: f64,
    pub d_ta_acc: Option<f64>,
    pub d_cs_acc: Option<f64>,
}

/// Optimizer state of the four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub g: Adam,
    pub h: Adam,
    pub d_ta: Adam,
    pub d_cs: Adam,
}

impl Optimizers {
    fn new(cfg: AdamConfig, disc: AdamConfig, m: &ModelBundle<f32>) -> Self {
        Optimizers {
            g: Adam::new(cfg, m.g.num_params()),
            h: Adam::new(cfg, m.h.num_params()),
            d_ta: Adam::new(disc, m.d_ta.num_params()),
            d_cs: Adam::new(disc, m.d_cs.num_params()),
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub stage: Stage,
    pub switched_at: Option<usize>,
    pub models: ModelBundle<f32>,
    pub optimizers: Optimizers,
    pub counters: UpdateCounters,
    /// Recent target/aux discriminator accuracies (accuracy stage policy).
    pub acc_history: VecDeque<f64>,
}

/// The datasets a run may train on. Held-out sets are rejected.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub source: &'a DomainDataset,
    pub target: Option<&'a DomainDataset>,
    pub aux: Option<&'a DomainDataset>,
}

impl<'a> TrainData<'a> {
    fn check(&self) -> Result<()> {
        for ds in [Some(self.source), self.target, self.aux].into_iter().flatten() {
            if ds.role == DataRole::Heldout {
                return Err(Error::HeldoutAccess(ds.name.clone()));
            }
        }
        Ok(())
    }
}

/// Generator-side adversarial terms of one batch.
#[derive(Clone, Debug)]
pub struct AdversarialStep {
    pub terms: ProgressiveAdversarial<f32>,
    /// Reversed discriminator gradient for every batch row (`n · d`),
    /// unweighted. Rows excluded from the adversarial loss are exactly zero.
    pub grad_features: Vec<f32>,
}

/// Runs the active discriminators on the adversarial subset of a batch and
/// scatters their reversed feature gradients back to batch rows. Returns
/// `None` when the batch lacks the domains needed by every active term.
pub fn adversarial_step(
    features: &Rows<f32>,
    domains: &[DomainKind],
    labels: &[Label],
    schedule: AdversarialSchedule,
    live_only: bool,
    d_ta: &Network<f32>,
    d_cs: &Network<f32>,
) -> Result<Option<AdversarialStep>> {
    let pick = |k: DomainKind| -> Vec<usize> {
        (0..features.n)
            .filter(|&i| domains[i] == k && (!live_only || labels[i] == Label::Live))
            .collect()
    };
    let (s, t, a) = (pick(DomainKind::Source), pick(DomainKind::Target), pick(DomainKind::Aux));
    let ta_possible = !t.is_empty() && !a.is_empty();
    let cs_possible = !s.is_empty() && !(t.is_empty() && a.is_empty());
    let want_ta = schedule.stage == Stage::TA || schedule.keep_ta;
    let want_cs = schedule.stage == Stage::CS;
    let schedule = match (want_ta && ta_possible, want_cs && cs_possible) {
        (false, false) => return Ok(None),
        (true, true) => AdversarialSchedule { stage: Stage::CS, keep_ta: true },
        (true, false) => AdversarialSchedule { stage: Stage::TA, keep_ta: false },
        (false, true) => AdversarialSchedule { stage: Stage::CS, keep_ta: false },
    };
    let (fs, ft, fa) = (features.select(&s), features.select(&t), features.select(&a));
    let terms = progressive_adv_loss(schedule, &fs, &ft, &fa, d_ta, d_cs)?;
    let d = features.dim;
    let mut grad_features = vec![0.0f32; features.data.len()];
    let mut scatter = |rows: &[&[usize]], g: &[f32]| {
        for (k, &r) in rows.iter().flat_map(|x| x.iter()).enumerate() {
            for j in 0..d {
                grad_features[r * d + j] += g[k * d + j];
            }
        }
    };
    if let Some(ta) = &terms.ta {
        scatter(&[&t, &a], &ta.grad_features_g);
    }
    if let Some(cs) = &terms.cs {
        scatter(&[&s, &t, &a], &cs.grad_features_g);
    }
    Ok(Some(AdversarialStep { terms, grad_features }))
}

fn non_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// The training loop. Pretraining and every baseline use it with some
/// slices and loss terms switched off.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainData<'a>,
    /// Teacher features per source sample index (empty when unused).
    teacher_cache: Vec<Vec<f32>>,
    state: TrainState,
    log: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    /// A fresh run. `init` supplies the pretrained `G` and `H` (ignored for
    /// `G` on a cold start); the discriminators are always freshly drawn from
    /// the run seed.
    pub fn new(cfg: TrainConfig, data: TrainData<'a>, init: &ModelBundle<f32>, teacher: Option<&TeacherSnapshot<f32>>) -> Result<Self> {
        cfg.validate()?;
        let fresh: ModelBundle<f32> = build_models(&init.arch, derive_seed(&[cfg.seed, stream::INIT]))?;
        let models = ModelBundle {
            arch: init.arch.clone(),
            g: if cfg.warm_start { init.g.clone() } else { fresh.g },
            h: init.h.clone(),
            d_ta: fresh.d_ta,
            d_cs: fresh.d_cs,
        };
        let disc = AdamConfig {
            lr: cfg.disc_lr,
            ..cfg.adam
        };
        let optimizers = Optimizers::new(cfg.adam, disc, &models);
        let state = TrainState {
            step: 0,
            stage: Stage::TA,
            switched_at: None,
            models,
            optimizers,
            counters: UpdateCounters::default(),
            acc_history: VecDeque::new(),
        };
        Self::resume(cfg, data, state, teacher)
    }

    /// Continues from a saved state.
    pub fn resume(cfg: TrainConfig, data: TrainData<'a>, state: TrainState, teacher: Option<&TeacherSnapshot<f32>>) -> Result<Self> {
        cfg.validate()?;
        data.check()?;
        let want = [
            ("batch.target", cfg.batch.target, data.target.is_some()),
            ("batch.aux", cfg.batch.aux, data.aux.is_some()),
        ];
        for (field, n, present) in want {
            if n > 0 && !present {
                return Err(invalid(field, "a non-empty slice needs a dataset"));
            }
        }
        let teacher_cache = if cfg.loss.lambda3 > 0.0 {
            let teacher = teacher.ok_or_else(|| invalid("loss.lambda3", "the less-forgetting term needs a teacher"))?;
            let mut cache = vec![Vec::new(); data.source.len()];
            for i in data.source.training_indices() {
                cache[i] = teacher.features(&data.source.samples[i].image)?;
            }
            cache
        } else {
            Vec::new()
        };
        Ok(Trainer {
            cfg,
            data,
            teacher_cache,
            state,
            log: Vec::new(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn into_parts(self) -> (TrainState, Vec<StepRecord>) {
        (self.state, self.log)
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    /// Runs until `step == min(until, steps)`.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while self.state.step < until.min(self.cfg.steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.steps)
    }

    fn schedule(&self) -> AdversarialSchedule {
        if self.cfg.progressive {
            AdversarialSchedule {
                stage: self.state.stage,
                keep_ta: self.cfg.keep_ta,
            }
        } else {
            AdversarialSchedule { stage: Stage::CS, keep_ta: true }
        }
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let step = self.state.step;
        let cfg = &self.cfg;
        if cfg.progressive {
            let hist: Vec<f64> = self.state.acc_history.iter().copied().collect();
            let next = stage_controller(self.state.stage, step, cfg.steps, &cfg.stage_policy, &hist);
            if next != self.state.stage {
                self.state.stage = next;
                self.state.switched_at = Some(step);
            }
        } else {
            self.state.stage = Stage::CS;
        }
        let batch = compose_batch(
            self.data.source,
            self.data.target,
            self.data.aux,
            cfg.batch,
            derive_seed(&[cfg.seed, stream::STEP, step as u64]),
        )?;
        let mut domains = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        let mut images = Vec::with_capacity(batch.len());
        let mut source_rows = Vec::new();
        for slice in &batch.slices {
            let ds = match slice.kind {
                DomainKind::Source => self.data.source,
                DomainKind::Target => self.data.target.expect("checked in resume"),
                DomainKind::Aux => self.data.aux.expect("checked in resume"),
            };
            for (&i, &l) in slice.indices.iter().zip(&slice.labels) {
                if slice.kind == DomainKind::Source {
                    source_rows.push((domains.len(), i));
                }
                domains.push(slice.kind);
                labels.push(l);
                images.push(&ds.samples[i].image);
            }
        }
        let n = images.len();
        let models = &self.state.models;
        let dim = models.g.output_len();

        // Forward G and H.
        let mut g_tapes = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * dim);
        for img in &images {
            let (f, tape) = models.g.forward_tape(&image_input::<f32>(img))?;
            feats.extend(f);
            g_tapes.push(tape);
        }
        let feats = Rows::new(n, dim, feats)?;
        let mut h_tapes = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n * 2);
        for i in 0..n {
            let (z, tape) = models.h.forward_tape(feats.row(i))?;
            logits.extend(z);
            h_tapes.push(tape);
        }
        let logits = Rows::new(n, 2, logits)?;

        // Classification on every labelled row.
        let cls = classification_loss(&logits, &labels)?;
        non_finite(step, "L_Cls", cls.value)?;
        let mut grad_h = vec![0.0f32; models.h.num_params()];
        let mut grad_f = vec![0.0f32; n * dim];
        for i in 0..n {
            let gx = models.h.backward(&h_tapes[i], &cls.grad[i * 2..i * 2 + 2], &mut grad_h, true).expect("input gradient requested");
            for (a, b) in grad_f[i * dim..(i + 1) * dim].iter_mut().zip(gx) {
                *a += b;
            }
        }

        let lambda = cfg.loss;
        let add = |grad_f: &mut [f32], g: &[f32], w: f64| {
            let w = w as f32;
            for (a, b) in grad_f.iter_mut().zip(g) {
                *a += w * b;
            }
        };

        // Contrastive semantic alignment over all cross-domain pairs.
        let (mut l_sem, mut l_sep) = (0.0, 0.0);
        let has_target = domains.contains(&DomainKind::Target);
        if lambda.lambda1 > 0.0 && has_target {
            let (pos, neg) = PairedFeatures::exhaustive(&domains, &labels)?;
            if pos.is_empty() || neg.is_empty() {
                log::warn!("step {step}: no {} pairs in batch", if pos.is_empty() { "positive" } else { "negative" });
            }
            let sem = semantic_alignment_loss(&feats, &pos)?;
            let sep = separation_loss(&feats, &neg, lambda.margin)?;
            non_finite(step, "L_Sem", sem.value)?;
            non_finite(step, "L_Sep", sep.value)?;
            add(&mut grad_f, &sem.grad, lambda.lambda1);
            add(&mut grad_f, &sep.grad, lambda.lambda1);
            l_sem = sem.value;
            l_sep = sep.value;
        }

        // Less-forgetting on source rows against the cached teacher features.
        let mut l_lfc = 0.0;
        if lambda.lambda3 > 0.0 && !source_rows.is_empty() {
            let rows: Vec<usize> = source_rows.iter().map(|r| r.0).collect();
            let student = feats.select(&rows);
            let mut t = Vec::with_capacity(rows.len() * dim);
            for &(_, i) in &source_rows {
                t.extend_from_slice(&self.teacher_cache[i]);
            }
            let teacher = Rows::new(rows.len(), dim, t)?;
            let lfc = less_forgetting_loss(&student, &teacher)?;
            non_finite(step, "L_Lfc", lfc.value)?;
            for (k, &r) in rows.iter().enumerate() {
                add(&mut grad_f[r * dim..(r + 1) * dim], &lfc.grad[k * dim..(k + 1) * dim], lambda.lambda3);
            }
            l_lfc = lfc.value;
        }

        // Adversarial terms: discriminators first, reversed gradients to G.
        let (mut l_ta, mut l_cs, mut acc_ta, mut acc_cs) = (0.0, 0.0, None, None);
        if lambda.lambda2 > 0.0 {
            let schedule = self.schedule();
            let adv = adversarial_step(&feats, &domains, &labels, schedule, cfg.live_only_adv, &models.d_ta, &models.d_cs)?;
            if let Some(adv) = adv {
                add(&mut grad_f, &adv.grad_features, lambda.lambda2);
                let st = &mut self.state;
                if let Some(ta) = &adv.terms.ta {
                    non_finite(step, "L_Adv_ta", ta.loss_d)?;
                    st.optimizers.d_ta.step(&mut st.models.d_ta.params, &ta.grad_params);
                    st.counters.d_ta += 1;
                    l_ta = ta.loss_d;
                    acc_ta = Some(ta.accuracy);
                    if let StagePolicy::Accuracy { window, .. } = cfg.stage_policy {
                        st.acc_history.push_back(ta.accuracy);
                        while st.acc_history.len() > window {
                            st.acc_history.pop_front();
                        }
                    }
                }
                if let Some(cs) = &adv.terms.cs {
                    non_finite(step, "L_Adv_cs", cs.loss_d)?;
                    st.optimizers.d_cs.step(&mut st.models.d_cs.params, &cs.grad_params);
                    st.counters.d_cs += 1;
                    l_cs = cs.loss_d;
                    acc_cs = Some(cs.accuracy);
                }
            } else if has_target {
                log::warn!("step {step}: batch lacks the domains of every active discriminator");
            }
        }

        // Generator and classifier update.
        let st = &mut self.state;
        let mut grad_g = vec![0.0f32; st.models.g.num_params()];
        for (i, tape) in g_tapes.iter().enumerate() {
            st.models.g.backward(tape, &grad_f[i * dim..(i + 1) * dim], &mut grad_g, false);
        }
        st.optimizers.g.step(&mut st.models.g.params, &grad_g);
        st.optimizers.h.step(&mut st.models.h.params, &grad_h);
        st.counters.g += 1;
        st.counters.h += 1;

        let parts = LossParts {
            cls: cls.value,
            cont: l_sem + l_sep,
            adv: l_ta + l_cs,
            lfc: l_lfc,
        };
        let l_total = total_loss(&parts, &lambda);
        non_finite(step, "L_total", l_total)?;
        self.log.push(StepRecord {
            step,
            stage: st.stage,
            l_cls: cls.value,
            l_sem,
            l_sep,
            l_adv_ta: l_ta,
            l_adv_cs: l_cs,
            l_lfc,
            l_total,
            d_ta_acc: acc_ta,
            d_cs_acc: acc_cs,
        });
        st.step += 1;
        Ok(self.log.last().expect("just pushed"))
    }
}

/// Result of source pretraining.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub models: ModelBundle<f32>,
    pub teacher: TeacherSnapshot<f32>,
    pub log: Vec<StepRecord>,
    /// ACER on the source validation split at its own equal-error threshold.
    pub val_acer: Option<f64>,
}

/// Trains `G` and `H` with classification only on source data; the final
/// generator becomes the frozen teacher.
pub fn pretrain_source(src: &DomainDataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if src.training_indices().is_empty() {
        return Err(Error::Degenerate(format!("source `{}` has no training samples", src.name)));
    }
    let init: ModelBundle<f32> = build_models(&cfg.arch, derive_seed(&[cfg.seed, stream::INIT, 0]))?;
    let tcfg = TrainConfig {
        adam: cfg.adam,
        disc_lr: cfg.adam.lr,
        batch: BatchSizes {
            source: cfg.batch_source,
            target: 0,
            aux: 0,
        },
        steps: cfg.steps,
        loss: LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossConfig::default()
        },
        seed: cfg.seed,
        warm_start: true,
        ..TrainConfig::default()
    };
    let data = TrainData {
        source: src,
        target: None,
        aux: None,
    };
    let mut trainer = Trainer::new(tcfg, data, &init, None)?;
    trainer.run()?;
    let (state, log) = trainer.into_parts();
    let models = state.models;
    let val_acer = match src.split(VAL) {
        Some(ix) if !ix.is_empty() => {
            let scores = score_dataset(&models, src, ix)?;
            let tau = select_threshold(&scores)?;
            let acer = error_rates(&scores, tau)?.acer;
            log::info!("pretraining finished: source-val ACER {:.4} at threshold {:.4}", acer, tau);
            Some(acer)
        }
        _ => None,
    };
    Ok(PretrainOutcome {
        teacher: snapshot_teacher(&models.g),
        models,
        log,
        val_acer,
    })
}

/// Adapted training on source, few-shot target and aux data.
pub fn train_sasa(
    src: &DomainDataset,
    tgt_fewshot: &DomainDataset,
    aux: &DomainDataset,
    pretrained: &ModelBundle<f32>,
    teacher: &TeacherSnapshot<f32>,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<StepRecord>)> {
    let data = TrainData {
        source: src,
        target: Some(tgt_fewshot),
        aux: Some(aux),
    };
    let mut t = Trainer::new(cfg.clone(), data, pretrained, Some(teacher))?;
    t.run()?;
    Ok(t.into_parts())
}

/// Cross-entropy fine-tuning on source plus the few-shot target (no aux, no
/// alignment terms). With no target data it is plain source training.
pub fn train_joint_baseline(
    src: &DomainDataset,
    tgt_fewshot: Option<&DomainDataset>,
    pretrained: &ModelBundle<f32>,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<StepRecord>)> {
    let cfg = TrainConfig {
        batch: BatchSizes {
            aux: 0,
            target: if tgt_fewshot.is_some() { cfg.batch.target } else { 0 },
            ..cfg.batch
        },
        loss: LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..cfg.loss
        },
        ..cfg.clone()
    };
    let data = TrainData {
        source: src,
        target: tgt_fewshot,
        aux: None,
    };
    let mut t = Trainer::new(cfg, data, pretrained, None)?;
    t.run()?;
    Ok(t.into_parts())
}

/// Checkpoint contents: parameters by canonical name, optimizer moments and
/// the scalar state. Serialisation to disk lives outside the core crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: ArchConfig,
    pub step: usize,
    pub stage: Stage,
    pub switched_at: Option<usize>,
    pub counters: UpdateCounters,
    pub acc_history: Vec<f64>,
    /// Adam step count and hyper-parameters per network, keyed `g`, `h`, `d_ta`, `d_cs`.
    pub optimizers: Vec<(String, AdamConfig, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    /// `(canonical name, values)` for every parameter tensor.
    pub params: Vec<(String, Vec<f32>)>,
    /// `(name, values)` for the Adam first and second moments, e.g. `adam.g.m`.
    pub moments: Vec<(String, Vec<f64>)>,
}

impl TrainState {
    /// Wraps finished models with fresh optimizer state, e.g. to checkpoint
    /// a pretrained bundle at `step`.
    pub fn fresh(models: &ModelBundle<f32>, cfg: &TrainConfig, step: usize) -> Self {
        let disc = AdamConfig {
            lr: cfg.disc_lr,
            ..cfg.adam
        };
        TrainState {
            step,
            stage: Stage::TA,
            switched_at: None,
            models: models.clone(),
            optimizers: Optimizers::new(cfg.adam, disc, models),
            counters: UpdateCounters::default(),
            acc_history: VecDeque::new(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let opts = [
            ("g", &self.optimizers.g),
            ("h", &self.optimizers.h),
            ("d_ta", &self.optimizers.d_ta),
            ("d_cs", &self.optimizers.d_cs),
        ];
        let mut params = Vec::new();
        for (_, net) in self.models.parts() {
            for (name, values) in net.tensors() {
                params.push((String::from(name), values.to_vec()));
            }
        }
        let mut moments = Vec::new();
        for (name, opt) in opts {
            moments.push((format!("adam.{name}.m"), opt.m.clone()));
            moments.push((format!("adam.{name}.v"), opt.v.clone()));
        }
        Checkpoint {
            manifest: CheckpointManifest {
                arch: self.models.arch.clone(),
                step: self.step,
                stage: self.stage,
                switched_at: self.switched_at,
                counters: self.counters,
                acc_history: self.acc_history.iter().copied().collect(),
                optimizers: opts.iter().map(|(n, o)| (String::from(*n), o.config, o.t)).collect(),
            },
            params,
            moments,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut models: ModelBundle<f32> = build_models(&ck.manifest.arch, 0)?;
        let expected: usize = models.parts().iter().map(|(_, n)| n.entries.len()).sum();
        if ck.params.len() != expected {
            return Err(Error::Shape(format!("checkpoint has {} tensors, architecture needs {expected}", ck.params.len())));
        }
        for (name, values) in &ck.params {
            let prefix = name.split('.').next().unwrap_or("");
            let net = models
                .parts_mut()
                .into_iter()
                .find(|(p, _)| *p == prefix)
                .map(|(_, n)| n)
                .ok_or_else(|| Error::Shape(format!("tensor `{name}` belongs to no network")))?;
            net.set_tensor(name, values)?;
        }
        let moment = |name: String, len: usize| -> Result<Vec<f64>> {
            let v = ck
                .moments
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks `{name}`")))?;
            if v.len() != len {
                return Err(Error::Shape(format!("`{name}` has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        let adam = |key: &str, len: usize| -> Result<Adam> {
            let (_, config, t) = ck
                .manifest
                .optimizers
                .iter()
                .find(|(n, _, _)| n == key)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks optimizer `{key}`")))?;
            Ok(Adam {
                config: *config,
                m: moment(format!("adam.{key}.m"), len)?,
                v: moment(format!("adam.{key}.v"), len)?,
                t: *t,
            })
        };
        let optimizers = Optimizers {
            g: adam("g", models.g.num_params())?,
            h: adam("h", models.h.num_params())?,
            d_ta: adam("d_ta", models.d_ta.num_params())?,
            d_cs: adam("d_cs", models.d_cs.num_params())?,
        };
        Ok(TrainState {
            step: ck.manifest.step,
            stage: ck.manifest.stage,
            switched_at: ck.manifest.switched_at,
            models,
            optimizers,
            counters: ck.manifest.counters,
            acc_history: ck.manifest.acc_history.iter().copied().collect(),
        })
    }
}
