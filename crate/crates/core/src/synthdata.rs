//! Synthetic live/spoof domains.
//!
//! A subject is a handful of smooth Gaussian blobs (the "face"). Live frames are
//! the blobs alone; spoof frames add a periodic checkerboard trace on top. A
//! domain's style is a per-channel affine colour map, a Gaussian blur and sensor
//! noise. The pipeline for one frame is
//!
//! ```text
//! blobs -> colour map -> (+ spoof grid) -> blur -> noise -> clamp to [0, 1]
//! ```
//!
//! so the colour map never changes the grid energy while blur and noise do,
//! which is where the synthetic covariate shift bites.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_for, stream, Rng};

pub const CHANNELS: usize = 3;

/// Split names used throughout the crate.
pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const TEST: &str = "test";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Spoof = 0,
    Live = 1,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Live, Label::Spoof];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Label> {
        match i {
            0 => Some(Label::Spoof),
            1 => Some(Label::Live),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }
}

/// Which side of the expansion problem a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainKind {
    Source,
    Target,
    Aux,
}

/// Concrete domain of a sample; targets (and the auxiliary sets built from
/// them) are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainTag {
    Source,
    Target(u8),
    Aux(u8),
}

impl DomainTag {
    pub fn kind(self) -> DomainKind {
        match self {
            DomainTag::Source => DomainKind::Source,
            DomainTag::Target(_) => DomainKind::Target,
            DomainTag::Aux(_) => DomainKind::Aux,
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTag::Source => f.write_str("source"),
            DomainTag::Target(k) => write!(f, "target-{k}"),
            DomainTag::Aux(k) => write!(f, "aux-{k}"),
        }
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "source" {
            return Ok(DomainTag::Source);
        }
        let parse = |rest: &str| {
            rest.parse::<u8>()
                .map_err(|_| invalid("domain", format!("bad domain tag `{s}`")))
        };
        if let Some(rest) = s.strip_prefix("target-") {
            return Ok(DomainTag::Target(parse(rest)?));
        }
        if let Some(rest) = s.strip_prefix("aux-") {
            return Ok(DomainTag::Aux(parse(rest)?));
        }
        Err(invalid("domain", format!("bad domain tag `{s}`")))
    }
}

impl Serialize for DomainTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DomainTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 3-channel image stored channel-major (`C x H x W`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: Label,
    pub domain: DomainTag,
    pub subject_id: u32,
}

/// Parameters of the structural live/spoof evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignal {
    /// Number of Gaussian blobs per subject.
    pub blob_count: usize,
    /// Blob standard deviation as a fraction of the image side.
    pub blob_scale: f64,
    /// Peak amplitude of the spoof checkerboard.
    pub grid_amplitude: f64,
    /// Checkerboard period in pixels (two cells per period).
    pub grid_period: usize,
    /// Per-frame spoof amplitude is drawn from `amp * U(1 - j, 1 + j)`.
    pub amplitude_jitter: f64,
}

impl Default for ClassSignal {
    fn default() -> Self {
        ClassSignal {
            blob_count: 4,
            blob_scale: 0.12,
            grid_amplitude: 0.06,
            grid_period: 4,
            amplitude_jitter: 0.6,
        }
    }
}

/// Global appearance of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSignal {
    pub gain: [f64; CHANNELS],
    pub bias: [f64; CHANNELS],
    /// Gaussian blur standard deviation in pixels; 0 disables blurring.
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for StyleSignal {
    fn default() -> Self {
        StyleSignal {
            gain: [1.0; CHANNELS],
            bias: [0.0; CHANNELS],
            blur_sigma: 0.0,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: DomainTag,
    pub class_signal: ClassSignal,
    pub style_signal: StyleSignal,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub n_subjects: usize,
    /// Frames per subject *per class*.
    pub frames_per_subject: usize,
}

impl DomainSpec {
    /// Desk-scale source domain: neutral colours, sharp, light sensor noise.
    pub fn source() -> Self {
        DomainSpec {
            domain: DomainTag::Source,
            class_signal: ClassSignal::default(),
            style_signal: StyleSignal::default(),
            image_size: (32, 32),
            n_subjects: 20,
            frames_per_subject: 20,
        }
    }

    /// Target presets with increasing distance from [`DomainSpec::source`]:
    /// 1 = small tint, 2 = strong tint + blur, 3 = strong tint + blur + heavy noise.
    pub fn target_preset(k: u8) -> Result<Self> {
        let style = match k {
            1 => StyleSignal {
                gain: [1.15, 0.95, 0.85],
                bias: [0.04, 0.0, -0.02],
                blur_sigma: 0.5,
                noise_sigma: 0.02,
            },
            2 => StyleSignal {
                gain: [0.75, 0.95, 1.3],
                bias: [0.08, 0.02, -0.04],
                blur_sigma: 0.7,
                noise_sigma: 0.03,
            },
            3 => StyleSignal {
                gain: [1.3, 1.1, 0.7],
                bias: [-0.05, 0.05, 0.1],
                blur_sigma: 0.7,
                noise_sigma: 0.05,
            },
            _ => return Err(invalid("domain", format!("no target preset {k}"))),
        };
        Ok(DomainSpec {
            domain: DomainTag::Target(k),
            class_signal: ClassSignal::default(),
            style_signal: style,
            image_size: (32, 32),
            n_subjects: 20,
            frames_per_subject: 6,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.class_signal;
        let s = &self.style_signal;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("image_size", "height and width must be even and positive"));
        }
        if self.n_subjects == 0 {
            return Err(invalid("n_subjects", "must be at least 1"));
        }
        if self.frames_per_subject == 0 {
            return Err(invalid("frames_per_subject", "must be at least 1"));
        }
        if c.blob_count == 0 {
            return Err(invalid("class_signal.blob_count", "must be at least 1"));
        }
        if !(c.blob_scale.is_finite() && c.blob_scale > 0.0) {
            return Err(invalid("class_signal.blob_scale", "must be positive"));
        }
        if !(c.grid_amplitude.is_finite() && c.grid_amplitude >= 0.0) {
            return Err(invalid("class_signal.grid_amplitude", "must be >= 0"));
        }
        if c.grid_period < 2 || c.grid_period % 2 != 0 {
            return Err(invalid("class_signal.grid_period", "must be even and >= 2"));
        }
        if !(0.0..1.0).contains(&c.amplitude_jitter) {
            return Err(invalid("class_signal.amplitude_jitter", "must lie in [0, 1)"));
        }
        if s.gain.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(invalid("style_signal.gain", "gains must be positive"));
        }
        if s.bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid("style_signal.bias", "must be finite"));
        }
        if !(s.blur_sigma.is_finite() && s.blur_sigma >= 0.0) {
            return Err(invalid("style_signal.blur_sigma", "must be >= 0"));
        }
        if !(s.noise_sigma.is_finite() && s.noise_sigma >= 0.0) {
            return Err(invalid("style_signal.noise_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

/// What a dataset may be used for. Held-out data is evaluation-only and the
/// trainer refuses it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataRole {
    Full,
    FewShot,
    Heldout,
    Aux,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    /// Display name, normally the domain tag (`source`, `target-2`, ...).
    pub name: String,
    pub kind: DomainKind,
    pub samples: Vec<Sample>,
    pub splits: BTreeMap<String, Vec<usize>>,
    /// Generator parameters, when the set came straight from [`generate_domain`].
    pub spec: Option<DomainSpec>,
    pub seed: u64,
    pub role: DataRole,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, kind: DomainKind, samples: Vec<Sample>, role: DataRole) -> Self {
        DomainDataset {
            name: name.into(),
            kind,
            samples,
            splits: BTreeMap::new(),
            spec: None,
            seed: 0,
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, name: &str) -> Option<&[usize]> {
        self.splits.get(name).map(|v| v.as_slice())
    }

    /// Indices usable for training: the `train` split when present, else everything.
    pub fn training_indices(&self) -> Vec<usize> {
        match self.splits.get(TRAIN) {
            Some(ix) => ix.clone(),
            None => (0..self.samples.len()).collect(),
        }
    }

    /// Indices of `split` (or all samples when the set carries no splits at all).
    pub fn indices_of(&self, split: &str) -> Option<Vec<usize>> {
        if self.splits.is_empty() {
            return Some((0..self.samples.len()).collect());
        }
        self.splits.get(split).cloned()
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.samples.iter().map(|x| x.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Checks the structural invariants: one domain kind, valid disjoint splits,
    /// image values inside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.domain.kind() != self.kind {
                return Err(invalid("samples", format!("sample {i} has domain {} in a {:?} set", s.domain, self.kind)));
            }
            if s.image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid("samples", format!("sample {i} has values outside [0, 1]")));
            }
        }
        let mut seen = vec![false; self.samples.len()];
        for (name, ix) in &self.splits {
            for &i in ix {
                if i >= self.samples.len() {
                    return Err(invalid("splits", format!("split `{name}` index {i} out of range")));
                }
                if seen[i] {
                    return Err(invalid("splits", format!("index {i} appears in two splits")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    pub(crate) fn class_pool(&self, indices: &[usize], label: Label) -> Vec<usize> {
        indices
            .iter()
            .copied()
            .filter(|&i| self.samples[i].label == label)
            .collect()
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

struct Subject {
    background: [f64; CHANNELS],
    tint: [f64; CHANNELS],
    blobs: Vec<Blob>,
}

fn draw_subject(spec: &DomainSpec, seed: u64, subject: u32) -> Subject {
    let mut rng = rng_for(&[seed, stream::SUBJECT, subject as u64]);
    let (h, w) = spec.image_size;
    let side = h.min(w) as f64;
    let base_tint = [0.55, 0.42, 0.36];
    let mut background = [0.0; CHANNELS];
    let mut tint = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        background[c] = rng.gen_range(0.12..0.28);
        tint[c] = base_tint[c] + rng.gen_range(-0.08..0.08);
    }
    let blobs = (0..spec.class_signal.blob_count)
        .map(|_| Blob {
            cy: rng.gen_range(0.25..0.75) * h as f64,
            cx: rng.gen_range(0.25..0.75) * w as f64,
            sigma: spec.class_signal.blob_scale * side * rng.gen_range(0.7..1.3),
            amp: rng.gen_range(0.35..0.7),
        })
        .collect();
    Subject {
        background,
        tint,
        blobs,
    }
}

fn render_frame(spec: &DomainSpec, subject: &Subject, seed: u64, subject_id: u32, label: Label, frame: usize) -> Image {
    let (h, w) = spec.image_size;
    let mut rng = rng_for(&[seed, stream::FRAME, subject_id as u64, label.index() as u64, frame as u64]);
    let dy: f64 = rng.gen_range(-2.0..2.0);
    let dx: f64 = rng.gen_range(-2.0..2.0);
    let brightness: f64 = rng.gen_range(0.9..1.1);
    let cs = &spec.class_signal;
    let amp = cs.grid_amplitude * rng.gen_range((1.0 - cs.amplitude_jitter)..=(1.0 + cs.amplitude_jitter));
    let phase_y = rng.gen_range(0..cs.grid_period);
    let phase_x = rng.gen_range(0..cs.grid_period);

    // blob field shared by all channels
    let mut field = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for b in &subject.blobs {
                let ry = y as f64 - b.cy - dy;
                let rx = x as f64 - b.cx - dx;
                v += b.amp * Float::exp(-(ry * ry + rx * rx) / (2.0 * b.sigma * b.sigma));
            }
            field[y * w + x] = v.min(1.0) * brightness;
        }
    }

    let style = &spec.style_signal;
    let half = cs.grid_period / 2;
    let mut planes = vec![0.0f64; CHANNELS * h * w];
    for c in 0..CHANNELS {
        let plane = &mut planes[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let content = subject.background[c] + subject.tint[c] * field[y * w + x];
                let mut v = style.gain[c] * content + style.bias[c];
                if label == Label::Spoof {
                    let sy = if ((y + phase_y) / half) % 2 == 0 { 1.0 } else { -1.0 };
                    let sx = if ((x + phase_x) / half) % 2 == 0 { 1.0 } else { -1.0 };
                    v += amp * sy * sx;
                }
                plane[y * w + x] = v;
            }
        }
        if style.blur_sigma > 0.0 {
            gaussian_blur(plane, h, w, style.blur_sigma);
        }
    }
    if style.noise_sigma > 0.0 {
        for v in planes.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += style.noise_sigma * z;
        }
    }
    Image {
        height: h,
        width: w,
        data: planes.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

/// Separable Gaussian blur with symmetric (half-sample) boundary reflection.
pub fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = Float::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| Float::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * plane[y * w + reflect(x as isize + j as isize - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * tmp[reflect(y as isize + j as isize - radius, h) * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Renders every frame of every subject. Samples are ordered by subject, then
/// class (live first), then frame; each frame draws from its own seeded stream.
pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(2 * spec.n_subjects * spec.frames_per_subject);
    for s in 0..spec.n_subjects as u32 {
        let subject = draw_subject(spec, seed, s);
        for label in Label::BOTH {
            for f in 0..spec.frames_per_subject {
                samples.push(Sample {
                    image: render_frame(spec, &subject, seed, s, label, f),
                    label,
                    domain: spec.domain,
                    subject_id: s,
                });
            }
        }
    }
    Ok(DomainDataset {
        name: spec.domain.to_string(),
        kind: spec.domain.kind(),
        samples,
        splits: BTreeMap::new(),
        spec: Some(spec.clone()),
        seed,
        role: DataRole::Full,
    })
}

/// Largest-remainder allocation of `n` items over `fractions`, every split
/// with a positive fraction receiving at least one item.
fn allocate(n: usize, fractions: &BTreeMap<String, f64>) -> Vec<usize> {
    let raw: Vec<f64> = fractions.values().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| Float::floor(*r) as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - Float::floor(raw[a]);
        let fb = raw[b] - Float::floor(raw[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    let fr: Vec<f64> = fractions.values().copied().collect();
    loop {
        let Some(empty) = (0..counts.len()).find(|&i| counts[i] == 0 && fr[i] > 0.0) else {
            break;
        };
        let donor = (0..counts.len()).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap();
        if counts[donor] <= 1 {
            break;
        }
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    counts
}

/// Assigns whole subjects to named splits. Existing splits are replaced.
pub fn split_dataset(ds: &DomainDataset, fractions: &BTreeMap<String, f64>, seed: u64) -> Result<DomainDataset> {
    if fractions.is_empty() {
        return Err(invalid("fractions", "no splits requested"));
    }
    if fractions.values().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(invalid("fractions", "fractions must be finite and >= 0"));
    }
    let total: f64 = fractions.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid("fractions", format!("fractions sum to {total}, expected 1")));
    }
    let mut subjects = ds.subjects();
    if subjects.len() < fractions.len() {
        return Err(Error::NotEnoughSubjects {
            requested: fractions.len(),
            available: subjects.len(),
        });
    }
    let mut rng = rng_for(&[seed, stream::SPLIT]);
    rand::seq::SliceRandom::shuffle(subjects.as_mut_slice(), &mut rng);
    let counts = allocate(subjects.len(), fractions);

    let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
    let mut start = 0;
    for (k, &c) in counts.iter().enumerate() {
        for &s in &subjects[start..start + c] {
            owner.insert(s, k);
        }
        start += c;
    }
    let names: Vec<&String> = fractions.keys().collect();
    let mut splits: BTreeMap<String, Vec<usize>> = names.iter().map(|n| ((*n).clone(), Vec::new())).collect();
    for (i, s) in ds.samples.iter().enumerate() {
        let k = owner[&s.subject_id];
        splits.get_mut(names[k]).unwrap().push(i);
    }
    let mut out = ds.clone();
    out.splits = splits;
    Ok(out)
}

/// Convenience for the common `{name: fraction}` literal.
pub fn fractions(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn subset(ds: &DomainDataset, keep: &[usize], role: DataRole, suffix: &str) -> DomainDataset {
    let mut remap = vec![usize::MAX; ds.len()];
    let mut samples = Vec::with_capacity(keep.len());
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
        samples.push(ds.samples[old].clone());
    }
    let mut splits = BTreeMap::new();
    for (name, ix) in &ds.splits {
        let mapped: Vec<usize> = ix.iter().filter(|&&i| remap[i] != usize::MAX).map(|&i| remap[i]).collect();
        splits.insert(name.clone(), mapped);
    }
    DomainDataset {
        name: format!("{}{}", ds.name, suffix),
        kind: ds.kind,
        samples,
        splits,
        spec: ds.spec.clone(),
        seed: ds.seed,
        role,
    }
}

/// Picks `n_subjects` training subjects at random. The few-shot set holds all
/// of their frames; everything else (remaining training subjects and every
/// other split) becomes the held-out evaluation set.
pub fn make_fewshot_target(ds: &DomainDataset, n_subjects: usize, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if n_subjects == 0 {
        return Err(invalid("n_subjects", "must be at least 1"));
    }
    let train = ds.training_indices();
    let mut train_subjects: Vec<u32> = train.iter().map(|&i| ds.samples[i].subject_id).collect();
    train_subjects.sort_unstable();
    train_subjects.dedup();
    if n_subjects > train_subjects.len() {
        return Err(Error::NotEnoughSubjects {
            requested: n_subjects,
            available: train_subjects.len(),
        });
    }
    let mut rng = rng_for(&[seed, stream::FEWSHOT]);
    let mut chosen: Vec<u32> = index::sample(&mut rng, train_subjects.len(), n_subjects)
        .into_iter()
        .map(|i| train_subjects[i])
        .collect();
    chosen.sort_unstable();
    let in_train: Vec<bool> = {
        let mut v = vec![false; ds.len()];
        for &i in &train {
            v[i] = true;
        }
        v
    };
    let (few, rest): (Vec<usize>, Vec<usize>) = (0..ds.len())
        .partition(|&i| in_train[i] && chosen.binary_search(&ds.samples[i].subject_id).is_ok());
    let mut fewshot = subset(ds, &few, DataRole::FewShot, "");
    fewshot.splits = BTreeMap::from([(TRAIN.to_string(), (0..few.len()).collect())]);
    let heldout = subset(ds, &rest, DataRole::Heldout, "");
    Ok((fewshot, heldout))
}

/// Concatenates several datasets of the same kind (used to pool few-shot sets
/// or auxiliary sets across targets). Splits are concatenated by name.
pub fn pool(name: &str, parts: &[&DomainDataset]) -> Result<DomainDataset> {
    let first = parts.first().ok_or_else(|| invalid("parts", "nothing to pool"))?;
    let mut out = DomainDataset::new(name, first.kind, Vec::new(), first.role);
    for p in parts {
        if p.kind != first.kind {
            return Err(invalid("parts", "cannot pool different domain kinds"));
        }
        if p.role == DataRole::Heldout && first.role != DataRole::Heldout {
            return Err(Error::HeldoutAccess(p.name.clone()));
        }
        let offset = out.samples.len();
        out.samples.extend(p.samples.iter().cloned());
        for (k, ix) in &p.splits {
            out.splits.entry(k.clone()).or_default().extend(ix.iter().map(|i| i + offset));
        }
    }
    Ok(out)
}

/// One drawn cross-domain pair (indices into the two datasets).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairDraw {
    pub a: usize,
    pub b: usize,
    pub label: Label,
}

/// Only source-target and target-aux pairs are meaningful for alignment.
pub fn check_pair_kinds(a: DomainKind, b: DomainKind) -> Result<()> {
    match (a, b) {
        (DomainKind::Source, DomainKind::Target) | (DomainKind::Target, DomainKind::Aux) => Ok(()),
        _ => Err(Error::InvalidPair(format!("{a:?}-{b:?} pairs are not allowed"))),
    }
}

/// Draws `count` same-label pairs from the training portions of `a` and `b`:
/// the class is chosen uniformly, then one sample of that class from each side,
/// all with replacement.
pub fn sample_same_class_pairs(a: &DomainDataset, b: &DomainDataset, count: usize, seed: u64) -> Result<Vec<PairDraw>> {
    check_pair_kinds(a.kind, b.kind)?;
    let ia = a.training_indices();
    let ib = b.training_indices();
    let mut pools = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for label in Label::BOTH {
        for (side, (ds, ix)) in [(a, &ia), (b, &ib)].into_iter().enumerate() {
            let pool = ds.class_pool(ix, label);
            if pool.is_empty() {
                return Err(Error::MissingClass {
                    class: label.name(),
                    dataset: ds.name.clone(),
                });
            }
            pools[side][label.index()] = pool;
        }
    }
    let mut rng = rng_for(&[seed, stream::PAIRS]);
    let pairs = (0..count)
        .map(|_| {
            let label = if rng.gen_bool(0.5) { Label::Live } else { Label::Spoof };
            let pa = &pools[0][label.index()];
            let pb = &pools[1][label.index()];
            PairDraw {
                a: pa[rng.gen_range(0..pa.len())],
                b: pb[rng.gen_range(0..pb.len())],
                label,
            }
        })
        .collect();
    Ok(pairs)
}

/// Per-domain sample counts of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub source: usize,
    pub target: usize,
    pub aux: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        BatchSizes {
            source: 64,
            target: 4,
            aux: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSlice {
    pub kind: DomainKind,
    pub indices: Vec<usize>,
    pub labels: Vec<Label>,
}

impl BatchSlice {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// A class-balanced mini-batch: one slice per domain, in source, target, aux
/// order. Empty slices are omitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub slices: Vec<BatchSlice>,
}

impl Batch {
    pub fn slice(&self, kind: DomainKind) -> Option<&BatchSlice> {
        self.slices.iter().find(|s| s.kind == kind)
    }

    pub fn len(&self) -> usize {
        self.slices.iter().map(|s| s.indices.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(domain, live, spoof)` for every slice.
    pub fn class_balance(&self) -> Vec<(DomainKind, usize, usize)> {
        self.slices
            .iter()
            .map(|s| (s.kind, s.count(Label::Live), s.count(Label::Spoof)))
            .collect()
    }
}

fn draw_slice(ds: &DomainDataset, n: usize, rng: &mut Rng) -> Result<BatchSlice> {
    if ds.role == DataRole::Heldout {
        return Err(Error::HeldoutAccess(ds.name.clone()));
    }
    let train = ds.training_indices();
    let mut indices = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for label in Label::BOTH {
        let pool = ds.class_pool(&train, label);
        if pool.is_empty() {
            return Err(Error::MissingClass {
                class: label.name(),
                dataset: ds.name.clone(),
            });
        }
        let want = n / 2;
        if pool.len() >= want {
            for i in index::sample(rng, pool.len(), want) {
                indices.push(pool[i]);
            }
        } else {
            for _ in 0..want {
                indices.push(pool[rng.gen_range(0..pool.len())]);
            }
        }
        labels.extend(core::iter::repeat(label).take(want));
    }
    Ok(BatchSlice {
        kind: ds.kind,
        indices,
        labels,
    })
}

/// Composes one batch with exactly `sizes` samples per domain, half live and
/// half spoof within each domain. Within a class, samples are drawn without
/// replacement unless the pool is smaller than the request.
pub fn compose_batch(
    src: &DomainDataset,
    tgt: Option<&DomainDataset>,
    aux: Option<&DomainDataset>,
    sizes: BatchSizes,
    seed: u64,
) -> Result<Batch> {
    let wanted = [
        ("batch.source", DomainKind::Source, Some(src), sizes.source),
        ("batch.target", DomainKind::Target, tgt, sizes.target),
        ("batch.aux", DomainKind::Aux, aux, sizes.aux),
    ];
    let mut rng = rng_for(&[seed, stream::BATCH]);
    let mut slices = Vec::new();
    for (field, kind, ds, n) in wanted {
        if n % 2 != 0 {
            return Err(invalid(field, format!("size {n} is odd; live/spoof balance needs an even count")));
        }
        if n == 0 {
            continue;
        }
        let ds = ds.ok_or_else(|| invalid(field, "no dataset supplied for a non-empty slice"))?;
        if ds.kind != kind {
            return Err(invalid(field, format!("expected a {kind:?} dataset, got {:?}", ds.kind)));
        }
        slices.push(draw_slice(ds, n, &mut rng)?);
    }
    Ok(Batch { slices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(subjects: usize, frames: usize) -> DomainSpec {
        DomainSpec {
            n_subjects: subjects,
            frames_per_subject: frames,
            ..DomainSpec::source()
        }
    }

    #[test]
    fn counts_and_balance() {
        let ds = generate_domain(&small(4, 3), 7).unwrap();
        assert_eq!(ds.len(), 24);
        assert_eq!(ds.samples.iter().filter(|s| s.label == Label::Live).count(), 12);
        ds.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_domain(&small(3, 2), 11).unwrap();
        let b = generate_domain(&small(3, 2), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&small(3, 2), 12).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = small(2, 2);
        s.style_signal.gain[1] = 0.0;
        match generate_domain(&s, 0) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "style_signal.gain"),
            other => panic!("unexpected {other:?}"),
        }
        let mut s = small(2, 2);
        s.image_size = (31, 32);
        assert!(matches!(generate_domain(&s, 0), Err(Error::InvalidConfig { field: "image_size", .. })));
        let mut s = small(2, 2);
        s.style_signal.noise_sigma = -0.1;
        assert!(matches!(
            generate_domain(&s, 0),
            Err(Error::InvalidConfig { field: "style_signal.noise_sigma", .. })
        ));
    }

    #[test]
    fn split_by_subject_8_1_1() {
        let ds = generate_domain(&small(10, 1), 1).unwrap();
        let out = split_dataset(&ds, &fractions(&[("train", 0.8), ("val", 0.1), ("test", 0.1)]), 3).unwrap();
        let subjects = |name: &str| {
            let mut s: Vec<u32> = out.splits[name].iter().map(|&i| out.samples[i].subject_id).collect();
            s.dedup();
            s.len()
        };
        assert_eq!((subjects("train"), subjects("val"), subjects("test")), (8, 1, 1));
        out.validate().unwrap();
        let again = split_dataset(&ds, &fractions(&[("train", 0.8), ("val", 0.1), ("test", 0.1)]), 3).unwrap();
        assert_eq!(out.splits, again.splits);
    }

    #[test]
    fn split_errors() {
        let ds = generate_domain(&small(2, 1), 1).unwrap();
        assert!(matches!(
            split_dataset(&ds, &fractions(&[("a", 0.4), ("b", 0.3), ("c", 0.3)]), 0),
            Err(Error::NotEnoughSubjects { .. })
        ));
        assert!(split_dataset(&ds, &fractions(&[("a", 0.4), ("b", 0.4)]), 0).is_err());
    }

    #[test]
    fn allocation_gives_every_split_a_subject() {
        let c = allocate(4, &fractions(&[("test", 0.1), ("train", 0.8), ("val", 0.1)]));
        assert_eq!(c.iter().sum::<usize>(), 4);
        assert!(c.iter().all(|&x| x >= 1));
    }

    #[test]
    fn fewshot_takes_one_subject() {
        let spec = DomainSpec {
            n_subjects: 5,
            ..DomainSpec::target_preset(1).unwrap()
        };
        let ds = generate_domain(&spec, 2).unwrap();
        let ds = split_dataset(&ds, &fractions(&[("train", 0.6), ("test", 0.4)]), 2).unwrap();
        let (few, held) = make_fewshot_target(&ds, 1, 9).unwrap();
        assert_eq!(few.len(), 12);
        assert_eq!(few.len() + held.len(), ds.len());
        assert_eq!(few.role, DataRole::FewShot);
        assert_eq!(held.role, DataRole::Heldout);
        assert_eq!(held.splits["test"].len(), ds.splits["test"].len());
        assert!(make_fewshot_target(&ds, 4, 9).is_err());
    }

    #[test]
    fn fewshot_all_subjects_leaves_test_intact() {
        let ds = generate_domain(&small(5, 2), 2).unwrap();
        let ds = split_dataset(&ds, &fractions(&[("train", 0.6), ("test", 0.4)]), 2).unwrap();
        let (few, held) = make_fewshot_target(&ds, 3, 1).unwrap();
        assert_eq!(few.len(), ds.splits["train"].len());
        assert!(held.splits["train"].is_empty());
        assert_eq!(held.splits["test"].len(), ds.splits["test"].len());
    }

    fn target_and_aux() -> (DomainDataset, DomainDataset, DomainDataset) {
        let src = generate_domain(&small(3, 2), 1).unwrap();
        let tgt = generate_domain(&DomainSpec { n_subjects: 1, ..DomainSpec::target_preset(1).unwrap() }, 1).unwrap();
        let mut aux = tgt.clone();
        aux.kind = DomainKind::Aux;
        aux.name = "aux-1".into();
        for s in &mut aux.samples {
            s.domain = DomainTag::Aux(1);
        }
        (src, tgt, aux)
    }

    #[test]
    fn pairs_are_label_matched_and_cross_domain() {
        let (src, tgt, aux) = target_and_aux();
        let pairs = sample_same_class_pairs(&src, &tgt, 10, 4).unwrap();
        assert_eq!(pairs.len(), 10);
        for p in &pairs {
            assert_eq!(src.samples[p.a].label, p.label);
            assert_eq!(tgt.samples[p.b].label, p.label);
        }
        assert!(sample_same_class_pairs(&tgt, &aux, 3, 0).is_ok());
        for (a, b) in [(&src, &src), (&tgt, &tgt), (&aux, &aux), (&src, &aux), (&aux, &src)] {
            assert!(matches!(sample_same_class_pairs(a, b, 1, 0), Err(Error::InvalidPair(_))));
        }
    }

    #[test]
    fn pairs_need_both_classes() {
        let (src, mut tgt, _) = target_and_aux();
        tgt.samples.retain(|s| s.label == Label::Live);
        match sample_same_class_pairs(&src, &tgt, 1, 0) {
            Err(Error::MissingClass { class, dataset }) => {
                assert_eq!(class, "spoof");
                assert_eq!(dataset, "target-1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_composition() {
        let (src, tgt, aux) = target_and_aux();
        let b = compose_batch(&src, Some(&tgt), Some(&aux), BatchSizes { source: 2, target: 2, aux: 2 }, 0).unwrap();
        assert_eq!(b.class_balance(), vec![
            (DomainKind::Source, 1, 1),
            (DomainKind::Target, 1, 1),
            (DomainKind::Aux, 1, 1)
        ]);
        let err = compose_batch(&src, Some(&tgt), Some(&aux), BatchSizes { source: 64, target: 4, aux: 7 }, 0);
        assert!(matches!(err, Err(Error::InvalidConfig { field: "batch.aux", .. })));
    }

    #[test]
    fn heldout_never_batched() {
        let (src, mut tgt, _) = target_and_aux();
        tgt.role = DataRole::Heldout;
        let err = compose_batch(&src, Some(&tgt), None, BatchSizes { source: 2, target: 2, aux: 0 }, 0);
        assert!(matches!(err, Err(Error::HeldoutAccess(_))));
    }

    #[test]
    fn domain_tag_round_trip() {
        for t in [DomainTag::Source, DomainTag::Target(3), DomainTag::Aux(1)] {
            assert_eq!(t.to_string().parse::<DomainTag>().unwrap(), t);
        }
        assert!("target-x".parse::<DomainTag>().is_err());
    }
}
