//! Objective terms: contrastive semantic alignment, domain-adversarial
//! losses with gradient reversal, the less-forgetting penalty, classification
//! cross-entropy and their weighted total.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the rows it was given, so the trainer only has to route
//! gradients back through the networks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nets::{Network, Real, Rows};
use crate::synthdata::{check_pair_kinds, DomainKind, Label};

/// Weights of the total objective `L_Cls + λ1·L_Cont + λ2·L_Adv + λ3·L_Lfc`
/// and the separation margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1e-3,
            lambda2: 1.0,
            lambda3: 10.0,
            margin: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("loss.lambda1", self.lambda1), ("loss.lambda2", self.lambda2), ("loss.lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be finite and non-negative"));
            }
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(invalid("loss.margin", "must be finite and positive"));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the input rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Vec<T>,
}

impl<T: Real> LossGrad<T> {
    fn zero(len: usize) -> Self {
        LossGrad {
            value: 0.0,
            grad: vec![T::zero(); len],
        }
    }
}

/// One cross-domain pair of feature rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePair {
    pub a: usize,
    pub b: usize,
    /// Same class (semantic alignment) or different class (separation).
    pub positive: bool,
}

/// Validated pairs over the rows of one feature matrix: every pair is
/// (source, target) or (target, aux), and the positive flag agrees with
/// the labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedFeatures {
    pairs: Vec<FeaturePair>,
}

impl PairedFeatures {
    pub fn new(pairs: Vec<FeaturePair>, domains: &[DomainKind], labels: &[Label]) -> Result<Self> {
        if domains.len() != labels.len() {
            return Err(Error::Shape(format!("{} domains for {} labels", domains.len(), labels.len())));
        }
        for p in &pairs {
            if p.a >= domains.len() || p.b >= domains.len() {
                return Err(Error::InvalidPair(format!("row index out of range in ({}, {})", p.a, p.b)));
            }
            check_pair_kinds(domains[p.a], domains[p.b])?;
            let same = labels[p.a] == labels[p.b];
            if same != p.positive {
                return Err(Error::InvalidPair(String::from(if p.positive {
                    "positive pair with different labels"
                } else {
                    "negative pair with equal labels"
                })));
            }
        }
        Ok(PairedFeatures { pairs })
    }

    /// All (source, target) and (target, aux) pairs among the rows, split into
    /// (positive, negative).
    pub fn exhaustive(domains: &[DomainKind], labels: &[Label]) -> Result<(Self, Self)> {
        let rows = |k: DomainKind| -> Vec<usize> { (0..domains.len()).filter(|&i| domains[i] == k).collect() };
        let (s, t, a) = (rows(DomainKind::Source), rows(DomainKind::Target), rows(DomainKind::Aux));
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (left, right) in [(&s, &t), (&t, &a)] {
            for &i in left {
                for &j in right {
                    let pair = FeaturePair {
                        a: i,
                        b: j,
                        positive: labels[i] == labels[j],
                    };
                    if pair.positive {
                        pos.push(pair);
                    } else {
                        neg.push(pair);
                    }
                }
            }
        }
        Ok((Self::new(pos, domains, labels)?, Self::new(neg, domains, labels)?))
    }

    pub fn pairs(&self) -> &[FeaturePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn check_pairs_in_range<T: Real>(f: &Rows<T>, pairs: &PairedFeatures) -> Result<()> {
    match pairs.pairs.iter().find(|p| p.a >= f.n || p.b >= f.n) {
        Some(p) => Err(Error::Shape(format!("pair ({}, {}) outside {} feature rows", p.a, p.b, f.n))),
        None => Ok(()),
    }
}

/// `Σ ½‖f_a − f_b‖²` over positive pairs.
pub fn semantic_alignment_loss<T: Real>(f: &Rows<T>, pos: &PairedFeatures) -> Result<LossGrad<T>> {
    check_pairs_in_range(f, pos)?;
    if pos.pairs.iter().any(|p| !p.positive) {
        return Err(Error::InvalidPair(String::from("semantic alignment takes positive pairs only")));
    }
    let mut out = LossGrad::zero(f.data.len());
    let mut total = T::zero();
    for p in &pos.pairs {
        let (ra, rb) = (f.row(p.a), f.row(p.b));
        total += T::of(0.5) * squared_distance(ra, rb);
        for k in 0..f.dim {
            let d = ra[k] - rb[k];
            out.grad[p.a * f.dim + k] += d;
            out.grad[p.b * f.dim + k] -= d;
        }
    }
    out.value = total.f64();
    Ok(out)
}

/// `Σ ½·max(0, m − ‖f_a − f_b‖²)` over negative pairs.
pub fn separation_loss<T: Real>(f: &Rows<T>, neg: &PairedFeatures, margin: f64) -> Result<LossGrad<T>> {
    check_pairs_in_range(f, neg)?;
    if neg.pairs.iter().any(|p| p.positive) {
        return Err(Error::InvalidPair(String::from("separation takes negative pairs only")));
    }
    let m = T::of(margin);
    let mut out = LossGrad::zero(f.data.len());
    let mut total = T::zero();
    for p in &neg.pairs {
        let (ra, rb) = (f.row(p.a), f.row(p.b));
        let gap = m - squared_distance(ra, rb);
        if gap <= T::zero() {
            continue;
        }
        total += T::of(0.5) * gap;
        for k in 0..f.dim {
            let d = ra[k] - rb[k];
            out.grad[p.a * f.dim + k] -= d;
            out.grad[p.b * f.dim + k] += d;
        }
    }
    out.value = total.f64();
    Ok(out)
}

/// Semantic alignment of `pos` plus separation of `neg`.
pub fn contrastive_loss<T: Real>(f: &Rows<T>, pos: &PairedFeatures, neg: &PairedFeatures, margin: f64) -> Result<(LossGrad<T>, LossGrad<T>)> {
    Ok((semantic_alignment_loss(f, pos)?, separation_loss(f, neg, margin)?))
}

/// `Σ_i ‖G(x_i) − G_0(x_i)‖²` over source rows.
pub fn less_forgetting_loss<T: Real>(g: &Rows<T>, teacher: &Rows<T>) -> Result<LossGrad<T>> {
    if g.n != teacher.n || g.dim != teacher.dim {
        return Err(Error::Shape(format!(
            "student features {}x{} vs teacher {}x{}",
            g.n, g.dim, teacher.n, teacher.dim
        )));
    }
    let mut total = T::zero();
    let grad = g
        .data
        .iter()
        .zip(&teacher.data)
        .map(|(&a, &b)| {
            let d = a - b;
            total += d * d;
            T::of(2.0) * d
        })
        .collect();
    Ok(LossGrad { value: total.f64(), grad })
}

/// Mean two-class cross-entropy of logit rows against class indices, with
/// the gradient w.r.t. the logits. Also returns the number of rows whose
/// arg-max equals the label.
pub fn cross_entropy<T: Real>(logits: &Rows<T>, targets: &[usize]) -> Result<(LossGrad<T>, usize)> {
    if logits.dim != 2 || logits.n != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets for {}x{} logits (need two columns)",
            targets.len(),
            logits.n,
            logits.dim
        )));
    }
    if targets.iter().any(|&t| t > 1) {
        return Err(Error::Shape(String::from("cross-entropy targets must be 0 or 1")));
    }
    let mut out = LossGrad::zero(logits.data.len());
    if logits.n == 0 {
        return Ok((out, 0));
    }
    let inv_n = T::one() / T::of(logits.n as f64);
    let mut total = T::zero();
    let mut correct = 0;
    for (i, &t) in targets.iter().enumerate() {
        let z = logits.row(i);
        let mx = z[0].max(z[1]);
        let e0 = (z[0] - mx).exp();
        let e1 = (z[1] - mx).exp();
        let lse = mx + (e0 + e1).ln();
        total += lse - z[t];
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        for k in 0..2 {
            let onehot = if k == t { T::one() } else { T::zero() };
            out.grad[i * 2 + k] = (p[k] - onehot) * inv_n;
        }
        let pred = if z[1] > z[0] { 1 } else { 0 };
        if pred == t {
            correct += 1;
        }
    }
    out.value = (total * inv_n).f64();
    Ok((out, correct))
}

/// Mean live/spoof cross-entropy over all labelled rows.
pub fn classification_loss<T: Real>(logits: &Rows<T>, labels: &[Label]) -> Result<LossGrad<T>> {
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    Ok(cross_entropy(logits, &targets)?.0)
}

/// Outcome of one discriminator evaluation on a feature batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialTerm<T> {
    /// Mean domain cross-entropy.
    pub loss_d: f64,
    /// `∂loss_D/∂f`, row-major like the features.
    pub grad_features_d: Vec<T>,
    /// `∂loss_G/∂f`: the reversed discriminator gradient.
    pub grad_features_g: Vec<T>,
    /// `∂loss_D/∂θ_D`.
    pub grad_params: Vec<T>,
    /// Fraction of rows whose domain the discriminator gets right.
    pub accuracy: f64,
}

/// Domain cross-entropy of `d` on `features` with labels in {0, 1}. The
/// generator gradient is the exact negation of the discriminator's feature
/// gradient (gradient reversal), computed from the same forward pass.
pub fn domain_adversarial_loss<T: Real>(features: &Rows<T>, domain_labels: &[u8], d: &Network<T>) -> Result<AdversarialTerm<T>> {
    if features.n != domain_labels.len() {
        return Err(Error::Shape(format!("{} domain labels for {} rows", domain_labels.len(), features.n)));
    }
    if features.dim != d.input_len() {
        return Err(Error::Shape(format!("discriminator expects {}-wide features, got {}", d.input_len(), features.dim)));
    }
    let has = |v: u8| domain_labels.contains(&v);
    if !(has(0) && has(1)) {
        let present = domain_labels.first().map_or(String::from("none"), |l| format!("{l}"));
        return Err(Error::SingleDomain(present));
    }
    let mut logits = Vec::with_capacity(features.n * 2);
    let mut tapes = Vec::with_capacity(features.n);
    for i in 0..features.n {
        let (y, tape) = d.forward_tape(features.row(i))?;
        logits.extend(y);
        tapes.push(tape);
    }
    let logits = Rows::new(features.n, 2, logits)?;
    let targets: Vec<usize> = domain_labels.iter().map(|&l| l as usize).collect();
    let (ce, correct) = cross_entropy(&logits, &targets)?;
    let mut grad_params = vec![T::zero(); d.num_params()];
    let mut grad_features_d = Vec::with_capacity(features.data.len());
    for (i, tape) in tapes.iter().enumerate() {
        let gx = d
            .backward(tape, &ce.grad[i * 2..i * 2 + 2], &mut grad_params, true)
            .expect("input gradient requested");
        grad_features_d.extend(gx);
    }
    let grad_features_g = grad_features_d.iter().map(|&g| -g).collect();
    Ok(AdversarialTerm {
        loss_d: ce.value,
        grad_features_d,
        grad_features_g,
        grad_params,
        accuracy: correct as f64 / features.n as f64,
    })
}

/// Training stage of the progressive adversarial schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Only the target-vs-aux discriminator is active.
    TA,
    /// Target ∪ aux (the combined domain) against source.
    CS,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TA => "TA",
            Stage::CS => "CS",
        }
    }
}

impl core::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TA" | "ta" => Ok(Stage::TA),
            "CS" | "cs" => Ok(Stage::CS),
            _ => Err(invalid("stage", format!("`{s}` is neither TA nor CS"))),
        }
    }
}

/// Which discriminators take part in the adversarial loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialSchedule {
    pub stage: Stage,
    /// Keep the target-vs-aux discriminator active in stage CS.
    pub keep_ta: bool,
}

/// Active adversarial terms; inactive terms are `None` and contribute 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveAdversarial<T> {
    /// Target rows labelled 0, aux rows labelled 1; features ordered `t ++ a`.
    pub ta: Option<AdversarialTerm<T>>,
    /// Source rows labelled 0, combined rows labelled 1; features ordered
    /// `s ++ t ++ a`.
    pub cs: Option<AdversarialTerm<T>>,
}

impl<T: Real> ProgressiveAdversarial<T> {
    pub fn ta_loss(&self) -> f64 {
        self.ta.as_ref().map_or(0.0, |t| t.loss_d)
    }

    pub fn cs_loss(&self) -> f64 {
        self.cs.as_ref().map_or(0.0, |t| t.loss_d)
    }

    /// `L_Adv`: the sum of the active terms.
    pub fn total(&self) -> f64 {
        self.ta_loss() + self.cs_loss()
    }
}

/// Stage-gated adversarial losses. In stage TA only `d_ta` sees the target
/// and aux features; in stage CS `d_cs` separates source from the combined
/// target ∪ aux set, and `d_ta` stays active only when `keep_ta` is set.
pub fn progressive_adv_loss<T: Real>(
    schedule: AdversarialSchedule,
    feats_s: &Rows<T>,
    feats_t: &Rows<T>,
    feats_a: &Rows<T>,
    d_ta: &Network<T>,
    d_cs: &Network<T>,
) -> Result<ProgressiveAdversarial<T>> {
    let ta_active = schedule.stage == Stage::TA || schedule.keep_ta;
    let cs_active = schedule.stage == Stage::CS;
    let ta = if ta_active {
        let f = Rows::concat(&[feats_t, feats_a])?;
        let labels: Vec<u8> = core::iter::repeat(0).take(feats_t.n).chain(core::iter::repeat(1).take(feats_a.n)).collect();
        Some(domain_adversarial_loss(&f, &labels, d_ta)?)
    } else {
        None
    };
    let cs = if cs_active {
        let f = Rows::concat(&[feats_s, feats_t, feats_a])?;
        let labels: Vec<u8> = core::iter::repeat(0)
            .take(feats_s.n)
            .chain(core::iter::repeat(1).take(feats_t.n + feats_a.n))
            .collect();
        Some(domain_adversarial_loss(&f, &labels, d_cs)?)
    } else {
        None
    };
    Ok(ProgressiveAdversarial { ta, cs })
}

/// Values of the individual objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub cont: f64,
    pub adv: f64,
    pub lfc: f64,
}

/// `L_Cls + λ1·L_Cont + λ2·L_Adv + λ3·L_Lfc`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    parts.cls + cfg.lambda1 * parts.cont + cfg.lambda2 * parts.adv + cfg.lambda3 * parts.lfc
}
