//! Feature generator `G`, live/spoof classifier `H`, the two domain
//! discriminators and the frozen source teacher.

mod layers;
mod real;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use layers::{Activation, Network, ParamEntry, Shape, Tape};
pub use real::Real;

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_for, stream};
use crate::synthdata::{Image, CHANNELS};
use layers::{Builder, Op};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    /// `conv3x3 -> norm -> act -> 2x avg-pool` per width, then global pooling.
    Plain { widths: Vec<usize> },
    /// Residual network: a stem convolution then stages of basic blocks
    /// `(width, blocks)`; every stage after the first halves the resolution.
    Residual { stem: usize, stages: Vec<(usize, usize)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub backbone: Backbone,
    pub image_size: (usize, usize),
    pub feature_dim: usize,
    pub disc_hidden: usize,
    pub activation: Activation,
    pub disc_activation: Activation,
    /// Project generator features onto the unit sphere, so distances, the
    /// contrastive margin and the less-forgetting penalty share one scale.
    pub unit_features: bool,
}

impl Default for ArchConfig {
    /// Desk-scale configuration: three 8/16/32-wide conv blocks, 128-d features,
    /// 64 hidden units in each discriminator.
    fn default() -> Self {
        ArchConfig {
            backbone: Backbone::Plain { widths: vec![8, 16, 32] },
            image_size: (32, 32),
            feature_dim: 128,
            disc_hidden: 64,
            activation: Activation::Silu,
            disc_activation: Activation::Silu,
            unit_features: true,
        }
    }
}

impl ArchConfig {
    /// ResNet-18 layout (2-2-2-2 basic blocks, 64..512 wide) with 512-d
    /// features and 512-unit discriminators.
    pub fn resnet18() -> Self {
        ArchConfig {
            backbone: Backbone::Residual {
                stem: 64,
                stages: vec![(64, 2), (128, 2), (256, 2), (512, 2)],
            },
            feature_dim: 512,
            disc_hidden: 512,
            ..ArchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim", "must be positive"));
        }
        if self.disc_hidden == 0 {
            return Err(invalid("disc_hidden", "must be positive"));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(invalid("image_size", "must be positive"));
        }
        match &self.backbone {
            Backbone::Plain { widths } if widths.is_empty() || widths.contains(&0) => {
                Err(invalid("backbone.widths", "need at least one positive width"))
            }
            Backbone::Residual { stem, stages } if *stem == 0 || stages.is_empty() || stages.iter().any(|s| s.0 == 0 || s.1 == 0) => {
                Err(invalid("backbone.stages", "stem, widths and block counts must be positive"))
            }
            _ => Ok(()),
        }
    }
}

fn build_generator<T: Real>(arch: &ArchConfig, seed: u64) -> Result<Network<T>> {
    let mut rng = rng_for(&[seed, stream::INIT, 0]);
    let input = (CHANNELS, arch.image_size.0, arch.image_size.1);
    let mut b = Builder::new(&mut rng, input);
    let mut ops = Vec::new();
    match &arch.backbone {
        Backbone::Plain { widths } => {
            for (i, &wd) in widths.iter().enumerate() {
                ops.push(b.conv(&format!("g.block{i}.conv"), wd, 3));
                ops.push(b.norm(&format!("g.block{i}.norm")));
                ops.push(Op::Act(arch.activation));
                ops.push(b.pool()?);
            }
        }
        Backbone::Residual { stem, stages } => {
            ops.push(b.conv("g.stem.conv", *stem, 3));
            ops.push(b.norm("g.stem.norm"));
            ops.push(Op::Act(arch.activation));
            for (si, &(width, blocks)) in stages.iter().enumerate() {
                for bi in 0..blocks {
                    let name = format!("g.stage{si}.block{bi}");
                    if si > 0 && bi == 0 {
                        ops.push(b.pool()?);
                    }
                    let entry = b.shape();
                    let mut body = Vec::new();
                    body.push(b.conv(&format!("{name}.conv1"), width, 3));
                    body.push(b.norm(&format!("{name}.norm1")));
                    body.push(Op::Act(arch.activation));
                    body.push(b.conv(&format!("{name}.conv2"), width, 3));
                    body.push(b.norm(&format!("{name}.norm2")));
                    let out = b.shape();
                    let mut shortcut = Vec::new();
                    if entry.0 != width {
                        b.set_shape(entry);
                        shortcut.push(b.conv(&format!("{name}.proj"), width, 1));
                        b.set_shape(out);
                    }
                    ops.push(Op::Residual { body, shortcut });
                    ops.push(Op::Act(arch.activation));
                }
            }
        }
    }
    ops.push(b.global_pool());
    ops.push(b.linear("g.head", arch.feature_dim));
    if arch.unit_features {
        ops.push(Op::L2Normalize);
    }
    let (params, entries) = (b.params, b.entries);
    Ok(Network::from_builder(ops, input, params, entries))
}

fn build_classifier<T: Real>(arch: &ArchConfig, seed: u64) -> Network<T> {
    let mut rng = rng_for(&[seed, stream::INIT, 1]);
    let input = (arch.feature_dim, 1, 1);
    let mut b = Builder::new(&mut rng, input);
    let ops = vec![b.linear("h.fc", 2)];
    let (params, entries) = (b.params, b.entries);
    Network::from_builder(ops, input, params, entries)
}

fn build_discriminator<T: Real>(arch: &ArchConfig, seed: u64, which: u64, prefix: &str) -> Network<T> {
    let mut rng = rng_for(&[seed, stream::INIT, which]);
    let input = (arch.feature_dim, 1, 1);
    let mut b = Builder::new(&mut rng, input);
    let ops = vec![
        b.linear(&format!("{prefix}.fc1"), arch.disc_hidden),
        Op::Act(arch.disc_activation),
        b.linear(&format!("{prefix}.fc2"), 2),
    ];
    let (params, entries) = (b.params, b.entries);
    Network::from_builder(ops, input, params, entries)
}

/// `G`, `H` and the discriminators between target/aux (`d_ta`) and
/// combined/source (`d_cs`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub arch: ArchConfig,
    pub g: Network<T>,
    pub h: Network<T>,
    pub d_ta: Network<T>,
    pub d_cs: Network<T>,
}

/// Freshly initialised models. The same seed gives the same parameters; the
/// two discriminators share an architecture but draw independent weights.
pub fn build_models<T: Real>(arch: &ArchConfig, seed: u64) -> Result<ModelBundle<T>> {
    arch.validate()?;
    Ok(ModelBundle {
        arch: arch.clone(),
        g: build_generator(arch, seed)?,
        h: build_classifier(arch, seed),
        d_ta: build_discriminator(arch, seed, 2, "d_ta"),
        d_cs: build_discriminator(arch, seed, 3, "d_cs"),
    })
}

impl<T: Real> ModelBundle<T> {
    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            g: self.g.cast(),
            h: self.h.cast(),
            d_ta: self.d_ta.cast(),
            d_cs: self.d_cs.cast(),
        }
    }

    /// The four networks with their checkpoint prefixes.
    pub fn parts(&self) -> [(&'static str, &Network<T>); 4] {
        [("g", &self.g), ("h", &self.h), ("d_ta", &self.d_ta), ("d_cs", &self.d_cs)]
    }

    pub fn parts_mut(&mut self) -> [(&'static str, &mut Network<T>); 4] {
        [
            ("g", &mut self.g),
            ("h", &mut self.h),
            ("d_ta", &mut self.d_ta),
            ("d_cs", &mut self.d_cs),
        ]
    }

    /// Liveness score (softmax posterior of the live class) of one image.
    pub fn score(&self, image: &Image) -> Result<f64> {
        let f = self.g.forward(&image_input(image))?;
        let logits = self.h.forward(&f)?;
        Ok(live_posterior(logits[0].f64(), logits[1].f64()))
    }
}

/// `softmax([spoof, live])[live]`, computed stably.
pub fn live_posterior(spoof_logit: f64, live_logit: f64) -> f64 {
    let d = spoof_logit - live_logit;
    if d >= 0.0 {
        let e = num_traits::Float::exp(-d);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + num_traits::Float::exp(d))
    }
}

/// Frozen copy of a feature generator. It has no mutable access to its
/// parameters, so its outputs never change after the snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot<T> {
    g: Network<T>,
}

pub fn snapshot_teacher<T: Real>(g: &Network<T>) -> TeacherSnapshot<T> {
    TeacherSnapshot { g: g.clone() }
}

impl<T: Real> TeacherSnapshot<T> {
    pub fn network(&self) -> &Network<T> {
        &self.g
    }

    pub fn features(&self, image: &Image) -> Result<Vec<T>> {
        self.g.forward(&image_input(image))
    }

    /// A trainable copy of the frozen generator (warm start).
    pub fn to_generator(&self) -> Network<T> {
        self.g.clone()
    }
}

pub fn image_input<T: Real>(image: &Image) -> Vec<T> {
    image.data.iter().map(|&v| T::of(v as f64)).collect()
}

/// Row-major `n x dim` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Rows<T> {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> Rows<T> {
    pub fn new(n: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::Shape(format!("{} values for {n} rows of {dim}", data.len())));
        }
        Ok(Rows { n, dim, data })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, idx: &[usize]) -> Rows<T> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Rows {
            n: idx.len(),
            dim: self.dim,
            data,
        }
    }

    pub fn concat(parts: &[&Rows<T>]) -> Result<Rows<T>> {
        let dim = parts.first().map_or(0, |p| p.dim);
        if parts.iter().any(|p| p.dim != dim) {
            return Err(Error::Shape(String::from("cannot concatenate rows of different widths")));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Rows {
            n: parts.iter().map(|p| p.n).sum(),
            dim,
            data,
        })
    }
}

fn forward_rows<T: Real>(net: &Network<T>, input: &Rows<T>) -> Result<Rows<T>> {
    if input.dim != net.input_len() {
        return Err(Error::Shape(format!(
            "network expects {}-wide rows, got {}",
            net.input_len(),
            input.dim
        )));
    }
    Rows::new(input.n, net.output_len(), net.forward_rows(&input.data)?)
}

/// `G` on a batch of images, one feature row per image.
pub fn forward_features<T: Real>(g: &Network<T>, images: &[&Image]) -> Result<Rows<T>> {
    let mut data = Vec::with_capacity(images.len() * g.output_len());
    for img in images {
        data.extend(g.forward(&image_input(img))?);
    }
    Rows::new(images.len(), g.output_len(), data)
}

/// `H` on feature rows: `(n, 2)` logits ordered `[spoof, live]`.
pub fn forward_logits<T: Real>(h: &Network<T>, features: &Rows<T>) -> Result<Rows<T>> {
    forward_rows(h, features)
}

/// A discriminator on feature rows: `(n, 2)` domain logits.
pub fn forward_domain<T: Real>(d: &Network<T>, features: &Rows<T>) -> Result<Rows<T>> {
    forward_rows(d, features)
}

/// Per-network gradient buffer sized like the parameters.
pub fn zero_grads<T: Real>(net: &Network<T>) -> Vec<T> {
    vec![T::zero(); net.num_params()]
}
