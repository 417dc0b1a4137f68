//! Presentation-attack error rates, equal-error threshold selection on the
//! source validation set, and seed-aggregated reports.
//!
//! Scores are liveness posteriors; a sample is predicted live iff its score
//! is at least the threshold.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ModelBundle, Real};
use crate::synthdata::{DomainDataset, DomainTag, Label};

/// Liveness scores of one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub domain: DomainTag,
    /// Sample index within the originating dataset.
    pub indices: Vec<usize>,
    pub labels: Vec<Label>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(domain: DomainTag, indices: Vec<usize>, labels: Vec<Label>, scores: Vec<f64>) -> Result<Self> {
        if labels.len() != scores.len() || indices.len() != scores.len() {
            return Err(Error::Shape(format!(
                "{} indices, {} labels, {} scores",
                indices.len(),
                labels.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Degenerate(format!("score {s} outside [0, 1]")));
        }
        Ok(ScoreSet {
            domain,
            indices,
            labels,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_scores(&self, label: Label) -> Vec<f64> {
        self.labels
            .iter()
            .zip(&self.scores)
            .filter(|(l, _)| **l == label)
            .map(|(_, s)| *s)
            .collect()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let live = self.labels.iter().filter(|l| **l == Label::Live).count();
        let spoof = self.len() - live;
        for (n, label) in [(live, Label::Live), (spoof, Label::Spoof)] {
            if n == 0 {
                return Err(Error::MissingClass {
                    class: label.name(),
                    dataset: format!("{} scores", self.domain),
                });
            }
        }
        Ok((live, spoof))
    }
}

/// Live iff `score >= tau`.
pub fn classify(scores: &[f64], tau: f64) -> Vec<Label> {
    scores
        .iter()
        .map(|&s| if s >= tau { Label::Live } else { Label::Spoof })
        .collect()
}

/// APCER, BPCER and their mean at one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// APCER = spoof classified live; BPCER = live classified spoof.
pub fn error_rates(set: &ScoreSet, tau: f64) -> Result<ErrorRates> {
    let (n_live, n_spoof) = set.require_both()?;
    let mut spoof_accepted = 0usize;
    let mut live_rejected = 0usize;
    for (pred, truth) in classify(&set.scores, tau).iter().zip(&set.labels) {
        match (truth, pred) {
            (Label::Spoof, Label::Live) => spoof_accepted += 1,
            (Label::Live, Label::Spoof) => live_rejected += 1,
            _ => {}
        }
    }
    let apcer = spoof_accepted as f64 / n_spoof as f64;
    let bpcer = live_rejected as f64 / n_live as f64;
    Ok(ErrorRates {
        apcer,
        bpcer,
        acer: acer(apcer, bpcer),
    })
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

/// Formats a rate as a percentage with two decimals, rounding halves up.
///
/// Binary floating point stores e.g. 1.135 as 1.13499…, which plain `{:.2}`
/// prints as 1.13; the value is first snapped to 9 decimals to drop that
/// representation noise.
pub fn format_percent(rate: f64) -> String {
    let p = Float::round(rate * 100.0 * 1e9) / 1e9;
    let cents = Float::floor(p * 100.0 + 0.5);
    format!("{:.2}", cents / 100.0)
}

/// Half total error rate `(FAR + FRR) / 2` at `tau`.
pub fn hter(set: &ScoreSet, tau: f64) -> Result<f64> {
    let r = error_rates(set, tau)?;
    Ok((r.apcer + r.bpcer) / 2.0)
}

/// Threshold at the equal-error point of `source_val`.
///
/// Candidate thresholds are the sorted unique scores plus one value above the
/// maximum; all thresholds in `(u[i-1], u[i]]` give the same rates. The
/// candidates minimising `|FAR − FRR|` form a contiguous run, and the
/// midpoint of the threshold interval they cover is returned.
pub fn select_threshold(source_val: &ScoreSet) -> Result<f64> {
    let (n_live, n_spoof) = source_val.require_both()?;
    let mut live = source_val.class_scores(Label::Live);
    let mut spoof = source_val.class_scores(Label::Spoof);
    live.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut unique: Vec<f64> = live.iter().chain(&spoof).copied().collect();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let k = unique.len();
    // diff[i] = FAR − FRR with τ = unique[i]; diff[k] for τ above the maximum.
    let mut diffs = Vec::with_capacity(k + 1);
    for &tau in &unique {
        let far = (n_spoof - spoof.partition_point(|&s| s < tau)) as f64 / n_spoof as f64;
        let frr = live.partition_point(|&s| s < tau) as f64 / n_live as f64;
        diffs.push(far - frr);
    }
    diffs.push(-1.0);
    let best = diffs.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    let lo = diffs.iter().position(|d| d.abs() == best).expect("non-empty");
    let hi = diffs.iter().rposition(|d| d.abs() == best).expect("non-empty");
    let lower = if lo == 0 { unique[0].min(0.0) } else { unique[lo - 1] };
    let upper = if hi == k {
        let top = unique[k - 1];
        if top < 1.0 {
            1.0
        } else {
            top + 1.0
        }
    } else {
        unique[hi]
    };
    Ok((lower + upper) / 2.0)
}

/// `|FAR − FRR|` at `tau`.
pub fn far_frr_gap(set: &ScoreSet, tau: f64) -> Result<f64> {
    let r = error_rates(set, tau)?;
    Ok((r.apcer - r.bpcer).abs())
}

/// Liveness scores of `model` on the given rows of `ds`.
pub fn score_dataset<T: Real>(model: &ModelBundle<T>, ds: &DomainDataset, indices: &[usize]) -> Result<ScoreSet> {
    let mut labels = Vec::with_capacity(indices.len());
    let mut scores = Vec::with_capacity(indices.len());
    let domain = ds.samples.first().map_or(DomainTag::Source, |s| s.domain);
    for &i in indices {
        let s = ds
            .samples
            .get(i)
            .ok_or_else(|| Error::Shape(format!("index {i} outside dataset `{}`", ds.name)))?;
        labels.push(s.label);
        scores.push(model.score(&s.image)?);
    }
    ScoreSet::new(domain, indices.to_vec(), labels, scores)
}

/// Error rates of one domain at the transferred threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
}

impl DomainMetrics {
    fn fields(&self) -> [f64; 4] {
        [self.apcer, self.bpcer, self.acer, self.hter]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        DomainMetrics {
            apcer: f[0],
            bpcer: f[1],
            acer: f[2],
            hter: f[3],
        }
    }
}

/// Name of the pseudo-domain holding the mean over all targets.
pub const TARGET_AVG: &str = "target-avg";

/// Metrics of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub threshold: f64,
    pub per_domain: BTreeMap<String, DomainMetrics>,
}

/// Report with per-seed entries and their mean and population standard
/// deviation. `threshold` and `per_domain` hold the across-seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub per_domain: BTreeMap<String, DomainMetrics>,
    pub seeds: Vec<SeedReport>,
    pub mean: BTreeMap<String, DomainMetrics>,
    pub std: BTreeMap<String, DomainMetrics>,
}

/// Source-test error rates and per-target HTER at the threshold `tau`
/// chosen on the source validation set. With more than one target, the
/// `target-avg` entry holds the arithmetic mean over targets.
pub fn evaluate(seed: u64, tau: f64, source_test: &ScoreSet, targets: &[ScoreSet]) -> Result<SeedReport> {
    let mut per_domain = BTreeMap::new();
    for set in core::iter::once(source_test).chain(targets) {
        let r = error_rates(set, tau)?;
        per_domain.insert(
            format!("{}", set.domain),
            DomainMetrics {
                apcer: r.apcer,
                bpcer: r.bpcer,
                acer: r.acer,
                hter: hter(set, tau)?,
            },
        );
    }
    if targets.len() > 1 {
        let mut sum = [0.0; 4];
        for t in targets {
            for (s, v) in sum.iter_mut().zip(per_domain[&format!("{}", t.domain)].fields()) {
                *s += v;
            }
        }
        let n = targets.len() as f64;
        per_domain.insert(String::from(TARGET_AVG), DomainMetrics::from_fields(sum.map(|s| s / n)));
    }
    Ok(SeedReport {
        seed,
        threshold: tau,
        per_domain,
    })
}

/// Mean and population standard deviation of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, Float::sqrt(var))
}

/// Aggregates per-seed reports. Seeds are sorted first, so the result does
/// not depend on the order runs finished in.
pub fn aggregate(mut seeds: Vec<SeedReport>) -> Result<MetricsReport> {
    if seeds.is_empty() {
        return Err(Error::Degenerate(String::from("no seed reports to aggregate")));
    }
    seeds.sort_by_key(|s| s.seed);
    let domains: Vec<String> = seeds[0].per_domain.keys().cloned().collect();
    if seeds.iter().any(|s| s.per_domain.keys().ne(domains.iter())) {
        return Err(Error::Shape(String::from("seed reports cover different domains")));
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for d in &domains {
        let mut m = [0.0; 4];
        let mut s = [0.0; 4];
        for f in 0..4 {
            let vals: Vec<f64> = seeds.iter().map(|r| r.per_domain[d].fields()[f]).collect();
            (m[f], s[f]) = mean_std(&vals);
        }
        mean.insert(d.clone(), DomainMetrics::from_fields(m));
        std.insert(d.clone(), DomainMetrics::from_fields(s));
    }
    let thresholds: Vec<f64> = seeds.iter().map(|s| s.threshold).collect();
    Ok(MetricsReport {
        threshold: mean_std(&thresholds).0,
        per_domain: mean.clone(),
        seeds,
        mean,
        std,
    })
}
